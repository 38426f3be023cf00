mod common;

use common::{compose, random};
use deep_fext::ops::{concat_channels, conv2d_same, ConvKernel};
use deep_fext::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Nested-loop same convolution (cross-correlation, zero padding) in f64.
fn naive(x: &Tensor, k: &ConvKernel) -> Vec<f64> {
    let [n, c, h, w] = x.dims4();
    let [o, _, kh, kw] = k.weights().dims4();
    let (xv, wv) = (x.values(), k.weights().values());
    let mut out = vec![0.0; n * o * h * w];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = k.bias()[oc] as f64;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize + ky as isize - (kh / 2) as isize;
                                let sx = xx as isize + kx as isize - (kw / 2) as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += wv[((oc * c + ic) * kh + ky) * kw + kx] as f64
                                        * xv[((b * c + ic) * h + sy as usize) * w + sx as usize] as f64;
                                }
                            }
                        }
                    }
                    out[((b * o + oc) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn zero_kernel_gives_zeros() {
    let x = Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]).unwrap();
    let y = conv2d_same(&x, &ConvKernel::zeros(1, 1, 3, 3).unwrap()).unwrap();
    assert!(y.values().iter().all(|&v| v == 0.0));
}

#[test]
fn matches_naive_loops_on_random_8x8() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[1, 1, 8, 8]);
        let k = ConvKernel::new(random(&mut rng, &[1, 1, 3, 3]), vec![rng.random_range(-1.0..1.0)]).unwrap();
        let fast = conv2d_same(&x, &k).unwrap();
        for (a, b) in fast.values().iter().zip(naive(&x, &k)) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }
}

#[test]
fn matches_naive_loops_multichannel_rectangular() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, &[2, 3, 7, 9]);
    let bias = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let k = ConvKernel::new(random(&mut rng, &[4, 3, 5, 3]), bias).unwrap();
    let fast = conv2d_same(&x, &k).unwrap();
    for (a, b) in fast.values().iter().zip(naive(&x, &k)) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn same_size_for_all_odd_kernels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, &[1, 2, 6, 5]);
    for kh in [1, 3, 5, 7, 9, 11] {
        for kw in [1, 3, 5, 7, 9, 11] {
            let k = ConvKernel::new(random(&mut rng, &[3, 2, kh, kw]), vec![0.0; 3]).unwrap();
            assert_eq!(conv2d_same(&x, &k).unwrap().dims4(), [1, 3, 6, 5]);
        }
    }
}

#[test]
fn kernel_composition_at_interior_pixels() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (m, n) in [(3, 3), (1, 3), (3, 5), (5, 7)] {
            let x = random(&mut rng, &[1, 2, 20, 20]);
            let k1 = random(&mut rng, &[3, 2, m, m]);
            let k2 = random(&mut rng, &[2, 3, n, n]);
            let chain = conv2d_same(
                &conv2d_same(&x, &ConvKernel::new(k1.clone(), vec![0.0; 3]).unwrap()).unwrap(),
                &ConvKernel::new(k2.clone(), vec![0.0; 2]).unwrap(),
            )
            .unwrap();
            let once = conv2d_same(&x, &ConvKernel::new(compose(&k1, &k2), vec![0.0; 2]).unwrap()).unwrap();
            let margin = (m + n - 2) / 2;
            for c in 0..2 {
                for y in margin..20 - margin {
                    for xx in margin..20 - margin {
                        let i = (c * 20 + y) * 20 + xx;
                        assert!((chain.values()[i] - once.values()[i]).abs() < 1e-4, "m={m} n={n}");
                    }
                }
            }
        }
    }
}

fn tensor_strategy(dims: [usize; 4]) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-1.0f32..1.0, dims.iter().product::<usize>())
        .prop_map(move |v| Tensor::new(&dims, v).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linearity_without_bias(
        x in tensor_strategy([1, 2, 6, 6]),
        y in tensor_strategy([1, 2, 6, 6]),
        w in tensor_strategy([2, 2, 3, 3]),
        a in -2.0f32..2.0,
        b in -2.0f32..2.0,
    ) {
        let k = ConvKernel::new(w.reshape(&[2, 2, 3, 3]).unwrap(), vec![0.0; 2]).unwrap();
        let mix = Tensor::new(&[1, 2, 6, 6], x.values().iter().zip(y.values()).map(|(p, q)| a * p + b * q).collect()).unwrap();
        let lhs = conv2d_same(&mix, &k).unwrap();
        let (cx, cy) = (conv2d_same(&x, &k).unwrap(), conv2d_same(&y, &k).unwrap());
        for i in 0..lhs.len() {
            prop_assert!((lhs.values()[i] - (a * cx.values()[i] + b * cy.values()[i])).abs() < 1e-4);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(
        a in tensor_strategy([2, 1, 3, 4]),
        b in tensor_strategy([2, 3, 3, 4]),
    ) {
        let cat = concat_channels(&[&a, &b]).unwrap();
        prop_assert_eq!(cat.dims4(), [2, 4, 3, 4]);
        prop_assert_eq!(cat.slice_channels(0, 1).unwrap().into_values(), a.values().to_vec());
        prop_assert_eq!(cat.slice_channels(1, 3).unwrap().into_values(), b.values().to_vec());
    }

    #[test]
    fn identity_kernel_copies_channels(x in tensor_strategy([1, 3, 5, 4])) {
        let mut w = vec![0.0; 9];
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let k = ConvKernel::new(Tensor::new(&[3, 3, 1, 1], w).unwrap(), vec![0.0; 3]).unwrap();
        prop_assert_eq!(conv2d_same(&x, &k).unwrap().into_values(), x.values().to_vec());
    }
}
