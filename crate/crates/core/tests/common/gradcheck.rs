//! Central finite differences against the reverse-mode engine.
//!
//! Every leaf is held in a `ParamStore` so that it can be perturbed in place;
//! the loss is re-evaluated on a fresh graph for each perturbation and the
//! difference quotient is formed in f64.

use deep_fext::autograd::{Graph, NodeId, ParamId, ParamStore};
use deep_fext::fext::{Activation, FextLayerSpec, FextNetworkSpec, ScaleSpec};
use deep_fext::model::{Model, ModelSpec, Task};
use deep_fext::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SEEDS: u64 = 10;
pub const REL_TOL: f64 = 1e-2;
/// Ulps of the loss assumed lost to f32 round-off in each evaluation.
const ROUNDOFF_ULPS: f64 = 8.0;

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks stay out of reach of `h`.
pub fn off_kink_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f32 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(dims, v).unwrap()
}

fn loss_of(params: &ParamStore, build: &impl Fn(&ParamStore, &mut Graph) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let loss = build(params, &mut g);
    g.value(loss).values()[0] as f64
}

/// Largest relative error over the checked entries; `limit` caps entries per parameter.
pub fn gradcheck(
    params: &mut ParamStore,
    ids: &[ParamId],
    h: f32,
    limit: Option<usize>,
    rng: &mut ChaCha8Rng,
    build: impl Fn(&ParamStore, &mut Graph) -> NodeId,
) -> f64 {
    params.zero_grads();
    let mut g = Graph::new();
    let loss = build(params, &mut g);
    g.backward(loss, params).unwrap();
    // Differences below the round-off noise of the quotient carry no signal.
    let floor = ROUNDOFF_ULPS * f32::EPSILON as f64 * (g.value(loss).values()[0] as f64).abs().max(1.0) / h as f64;
    let mut worst = 0.0f64;
    for &id in ids {
        let analytic = params.get(id).grad().unwrap().to_vec();
        let mut entries: Vec<usize> = (0..analytic.len()).collect();
        if let Some(k) = limit.filter(|&k| k < entries.len()) {
            entries = rand::seq::index::sample(rng, analytic.len(), k).into_vec();
        }
        for i in entries {
            let orig = params.get(id).values()[i];
            params.get_mut(id).values_mut()[i] = orig + h;
            let up = loss_of(params, &build);
            params.get_mut(id).values_mut()[i] = orig - h;
            let down = loss_of(params, &build);
            params.get_mut(id).values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            let a = analytic[i] as f64;
            let err = (a - numeric).abs();
            if err > floor {
                worst = worst.max(err / a.abs().max(numeric.abs()));
            }
        }
    }
    worst
}

/// Worst relative error of each differentiable operation at one seed.
pub fn op_gradient_errors(seed: u64) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (kh, kw) in [(1, 1), (3, 3), (1, 3), (3, 1), (5, 5)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let x = params.add("x", random_tensor(&mut rng, &[2, 3, 4, 4]));
        let w = params.add("w", random_tensor(&mut rng, &[2, 3, kh, kw]));
        let b = params.add("b", random_tensor(&mut rng, &[2, 1, 1]));
        let coeffs: Vec<f32> = (0..2 * 2 * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let worst = gradcheck(&mut params, &[x, w, b], 1e-2, None, &mut rng, |p, g| {
            let (xn, wn, bn) = (g.param(p, x), g.param(p, w), g.param(p, b));
            let y = g.conv2d_same(xn, wn, bn).unwrap();
            g.dot(y, coeffs.clone()).unwrap()
        });
        out.push((format!("conv {kh}x{kw}"), worst));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let x = params.add("x", off_kink_tensor(&mut rng, &[1, 2, 4, 4]));
    let coeffs: Vec<f32> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let worst = gradcheck(&mut params, &[x], 1e-3, None, &mut rng, |p, g| {
        let xn = g.param(p, x);
        let y = g.relu(xn);
        g.dot(y, coeffs.clone()).unwrap()
    });
    out.push(("relu".into(), worst));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let a = params.add("a", random_tensor(&mut rng, &[1, 4, 3, 4]));
    let b = params.add("b", random_tensor(&mut rng, &[1, 5, 3, 4]));
    let pixels: Vec<usize> = vec![0, 5, 7, 11];
    let coeffs: Vec<f32> = (0..pixels.len() * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let worst = gradcheck(&mut params, &[a, b], 1e-2, None, &mut rng, |p, g| {
        let (an, bn) = (g.param(p, a), g.param(p, b));
        let cat = g.concat_channels(&[an, bn]).unwrap();
        let mesh = g.to_mesh(cat, 3, 3, Some(pixels.clone())).unwrap();
        g.dot(mesh, coeffs.clone()).unwrap()
    });
    out.push(("concat + mesh".into(), worst));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::new();
    let x = params.add("x", random_tensor(&mut rng, &[6, 3, 2, 2]));
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
    let weights: Vec<f32> = (0..6).map(|_| rng.random_range(0.0..2.0)).collect();
    let worst = gradcheck(&mut params, &[x], 1e-2, None, &mut rng, |p, g| {
        let xn = g.param(p, x);
        let pooled = g.global_avg_pool(xn);
        g.softmax_cross_entropy(pooled, &labels, Some(&weights)).unwrap()
    });
    out.push(("avg pool + weighted cross-entropy".into(), worst));

    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut params = ParamStore::new();
    let x = params.add("x", random_tensor(&mut rng, &[2, 3, 4, 4]));
    let labels: Vec<usize> = (0..32).map(|_| rng.random_range(0..3)).collect();
    let worst = gradcheck(&mut params, &[x], 1e-2, None, &mut rng, |p, g| {
        let xn = g.param(p, x);
        g.softmax_cross_entropy(xn, &labels, None).unwrap()
    });
    out.push(("cross-entropy 2x3x4x4".into(), worst));
    out
}

pub fn toy_model(seed: u64, task: Task) -> Model {
    let fext = FextNetworkSpec {
        layers: vec![FextLayerSpec { in_channels: 3, branches: vec![ScaleSpec::new(3, 6), ScaleSpec::new(5, 7)] }],
        include_input_passthrough: true,
        activation: Activation::Relu,
        refactor_scale3: false,
        refactor_chains: false,
    };
    // 3 + 6 + 7 = 16 features on a 4×4 mesh keeps the f64 oracle cheap.
    let mut spec = ModelSpec::new(fext, task);
    spec.head.mesh_h = 4;
    spec.head.mesh_w = 4;
    Model::new(spec, seed).unwrap()
}

/// Independent f64 forward pass of a model: naive loops, no shared code with the engine.
pub mod reference {
    use std::collections::HashMap;

    use deep_fext::model::ModelSpec;

    pub struct Weights {
        pub values: Vec<Vec<f64>>,
        pub dims: Vec<Vec<usize>>,
        pub index: HashMap<String, usize>,
    }

    /// Same-size cross-correlation with zero padding; `x` is `(c, h, w)`.
    pub fn conv(x: &[f64], c: usize, h: usize, w: usize, wt: &[f64], dims: &[usize], bias: &[f64]) -> Vec<f64> {
        let (o, kh, kw) = (dims[0], dims[2], dims[3]);
        assert_eq!(dims[1], c);
        let mut out = vec![0.0; o * h * w];
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - (kh / 2) as isize;
                                let sx = xx as isize + kx as isize - (kw / 2) as isize;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += wt[((oc * c + ic) * kh + ky) * kw + kx]
                                    * x[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[(oc * h + y) * w + xx] = acc;
                }
            }
        }
        out
    }

    fn relu(v: &mut [f64]) {
        v.iter_mut().for_each(|x| *x = x.max(0.0));
    }

    fn layer(wts: &Weights, name: &str, x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, usize) {
        let wi = wts.index[&format!("{name}.weight")];
        let bi = wts.index[&format!("{name}.bias")];
        let out = conv(x, c, h, w, &wts.values[wi], &wts.dims[wi], &wts.values[bi]);
        (out, wts.dims[wi][0])
    }

    /// Weighted mean cross-entropy of the whole image.
    pub fn loss(
        spec: &ModelSpec,
        wts: &Weights,
        image: &[f64],
        h: usize,
        w: usize,
        labels: &[usize],
        weights: &[f32],
    ) -> f64 {
        let relu_on = spec.fext.activation == deep_fext::fext::Activation::Relu;
        let mut blocks: Vec<Vec<f64>> = Vec::new();
        let mut channels = 0;
        let mut cur = image.to_vec();
        let mut cur_c = spec.fext.input_channels();
        if spec.fext.include_input_passthrough {
            blocks.push(cur.clone());
            channels += cur_c;
        }
        for (k, l) in spec.fext.layers.iter().enumerate() {
            let mut outs = Vec::new();
            let mut out_c = 0;
            for b in &l.branches {
                let (mut hcur, mut hc) = (cur.clone(), cur_c);
                let mut i = 0;
                while wts.index.contains_key(&format!("fext.l{}.s{}.{i}.weight", k + 1, b.scale)) {
                    let (next, nc) = layer(wts, &format!("fext.l{}.s{}.{i}", k + 1, b.scale), &hcur, hc, h, w);
                    hcur = next;
                    hc = nc;
                    if relu_on {
                        relu(&mut hcur);
                    }
                    i += 1;
                }
                outs.extend(hcur);
                out_c += hc;
            }
            cur = outs;
            cur_c = out_c;
            blocks.push(cur.clone());
            channels += cur_c;
        }
        let feats: Vec<f64> = blocks.concat();
        let (mh, mw) = (spec.head.mesh_h, spec.head.mesh_w);
        assert_eq!(channels, mh * mw);
        let (mut total, mut wsum) = (0.0, 0.0);
        for p in 0..h * w {
            let mesh: Vec<f64> = (0..channels).map(|c| feats[c * h * w + p]).collect();
            let (mut m, mut mc) = (mesh, 1);
            let layers = spec.head.conv_layers.len();
            for i in 0..layers {
                let (next, nc) = layer(wts, &format!("head.{i}"), &m, mc, mh, mw);
                m = next;
                mc = nc;
                if i + 1 < layers {
                    relu(&mut m);
                }
            }
            let logits: Vec<f64> =
                (0..mc).map(|c| m[c * mh * mw..(c + 1) * mh * mw].iter().sum::<f64>() / (mh * mw) as f64).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            let wv = weights[p] as f64;
            total += wv * (lse - logits[labels[p]]);
            wsum += wv;
        }
        total / wsum
    }
}

/// Forward gap to the f64 oracle and worst relative gradient error of the
/// full image → features → mesh → head → loss composition on a 12×12 image.
pub fn end_to_end_errors(seed: u64) -> (f64, f64) {
    let (h, w) = (12, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let mut model = toy_model(seed, Task::Both);
    // Zero-initialized biases over all-zero ReLU outputs sit exactly on a kink;
    // move to a generic point where the loss is differentiable.
    for p in model.params_mut().iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value.values_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    let image = random_tensor(&mut rng, &[1, 3, h, w]);
    let labels: Vec<usize> = (0..h * w).map(|_| rng.random_range(0..3)).collect();
    let weights: Vec<f32> = (0..h * w).map(|_| rng.random_range(0.5..1.5)).collect();

    // Analytic gradients from the engine, with the image as an extra leaf.
    let mut params = model.params().clone();
    let n_model = params.len();
    let x = params.add("image", image.clone());
    let mut g = Graph::new();
    let xn = g.param(&params, x);
    let logits = model.forward_logits(&mut g, xn, None).unwrap();
    let loss = g.softmax_cross_entropy(logits, &labels, Some(&weights)).unwrap();
    g.backward(loss, &mut params).unwrap();

    let mut wts = reference::Weights {
        values: model.params().iter().map(|p| p.value.values().iter().map(|&v| v as f64).collect()).collect(),
        dims: model.params().iter().map(|p| p.value.shape().dims().to_vec()).collect(),
        index: model.params().iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect(),
    };
    let mut img: Vec<f64> = image.values().iter().map(|&v| v as f64).collect();
    let base = reference::loss(model.spec(), &wts, &img, h, w, &labels, &weights);
    let forward_gap = (base - g.value(loss).values()[0] as f64).abs();

    // The loss is piecewise smooth with thousands of ReLU units; a kink
    // within ε of the point spoils one difference quotient, so each entry
    // is compared against the closest of several step sizes.
    let mut worst = 0.0f64;
    for pi in 0..=n_model {
        let len = if pi < n_model { wts.values[pi].len() } else { img.len() };
        let entries = rand::seq::index::sample(&mut rng, len, len.min(6)).into_vec();
        let id = if pi < n_model { params.ids().nth(pi).unwrap() } else { x };
        let analytic = params.get(id).grad().unwrap().to_vec();
        for i in entries {
            let a = analytic[i] as f64;
            let mut best = f64::INFINITY;
            for eps in [1e-5, 1e-6, 1e-7] {
                let mut eval = |delta: f64| {
                    let target = if pi < n_model { &mut wts.values[pi][i] } else { &mut img[i] };
                    let orig = *target;
                    *target = orig + delta;
                    let l = reference::loss(model.spec(), &wts, &img, h, w, &labels, &weights);
                    let target = if pi < n_model { &mut wts.values[pi][i] } else { &mut img[i] };
                    *target = orig;
                    l
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let err = (a - numeric).abs();
                let rel = if err <= 1e-6 { 0.0 } else { err / a.abs().max(numeric.abs()) };
                best = best.min(rel);
            }
            worst = worst.max(best);
        }
    }
    (forward_gap, worst)
}
