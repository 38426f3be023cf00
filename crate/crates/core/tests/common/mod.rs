#![allow(dead_code)]

pub mod blobs;
pub mod gradcheck;
pub mod metric_oracles;

use deep_fext::autograd::ParamStore;
use deep_fext::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Full 2-D convolution of two bias-free multi-channel kernels `(M, I, ·, ·)`
/// and `(O, M, ·, ·)`: applying the first then the second equals applying the result once.
pub fn compose(first: &Tensor, second: &Tensor) -> Tensor {
    let [m, i, ah, aw] = first.dims4();
    let [o, m2, bh, bw] = second.dims4();
    assert_eq!(m, m2);
    let (kh, kw) = (ah + bh - 1, aw + bw - 1);
    let mut out = vec![0.0f64; o * i * kh * kw];
    for oc in 0..o {
        for ic in 0..i {
            for mc in 0..m {
                for ay in 0..ah {
                    for ax in 0..aw {
                        let a = first.values()[((mc * i + ic) * ah + ay) * aw + ax] as f64;
                        for by in 0..bh {
                            for bx in 0..bw {
                                let b = second.values()[((oc * m + mc) * bh + by) * bw + bx] as f64;
                                out[((oc * i + ic) * kh + ay + by) * kw + ax + bx] += a * b;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[o, i, kh, kw], out.into_iter().map(|v| v as f32).collect()).unwrap()
}

pub fn param<'a>(params: &'a ParamStore, name: &str) -> &'a Tensor {
    &params.iter().find(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}")).value
}

pub fn param_mut<'a>(params: &'a mut ParamStore, name: &str) -> &'a mut Tensor {
    &mut params.iter_mut().find(|p| p.name == name).unwrap_or_else(|| panic!("no parameter {name}")).value
}
