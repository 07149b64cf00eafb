use emil::tensor::{
    avg_pool_patches, bilinear_upsample, conv2d, grad_check, kernels::PatchGrid, max_pool2d, Graph,
    Tensor, Var,
};
use emil::Result;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct seven-loop convolution.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
    let wo = (wd + 2 * pad.1 - kw) / stride.1 + 1;
    let mut out = vec![0.0; n * co * ho * wo];
    for bn in 0..n {
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (oy * stride.0 + i) as isize - pad.0 as isize;
                                let ix = (ox * stride.1 + j) as isize - pad.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[bn, c, iy as usize, ix as usize]) * w.at(&[o, c, i, j]);
                                }
                            }
                        }
                    }
                    out[((bn * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    out
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn conv_zero_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
    let w = rand_tensor(&mut rng, &[2, 1, 2, 2]);
    let out = conv2d(&x, &w, Some(&Tensor::zeros(&[2])), (1, 1), (0, 0)).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_scalar_kernel_scales() {
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let w = Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap();
    let out = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), (1, 1), (0, 0)).unwrap();
    assert_eq!(out.data(), &[2., 4., 6., 8.]);
}

#[test]
fn conv_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let out = conv2d(&x, &w, Some(&b), (1, 1), (0, 0)).unwrap();
    assert_eq!(out.shape(), &[1, 3, 3, 3]);
    assert_close(out.data(), &conv_oracle(&x, &w, &b, (1, 1), (0, 0)), 1e-6);
}

#[test]
fn conv_randomized_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let n = rng.random_range(1..3);
        let ci = rng.random_range(1..4);
        let co = rng.random_range(1..4);
        let k = rng.random_range(1..4);
        let h = rng.random_range(k..8);
        let w_ = rng.random_range(k..8);
        let stride = (rng.random_range(1..3), rng.random_range(1..3));
        let pad = (rng.random_range(0..2), rng.random_range(0..2));
        let x = rand_tensor(&mut rng, &[n, ci, h, w_]);
        let w = rand_tensor(&mut rng, &[co, ci, k, k]);
        let b = rand_tensor(&mut rng, &[co]);
        let out = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        assert_close(out.data(), &conv_oracle(&x, &w, &b, stride, pad), 1e-6);
    }
}

#[test]
fn conv_oversized_kernel_is_error() {
    let x = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
    let w = Tensor::zeros(&[1, 1, 5, 5]);
    let err = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap_err().to_string();
    assert!(err.contains("height"), "{err}");
}

/// Per-window mean computed straight from Eq.-style definition.
fn avg_pool_oracle(x: &Tensor<f64>, k: (usize, usize), s: (usize, usize)) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 + k.0 <= h {
        let mut c0 = 0;
        while c0 + k.1 <= w {
            for ch in 0..c {
                let mut acc = 0.0;
                for r in r0..r0 + k.0 {
                    for cc in c0..c0 + k.1 {
                        acc += x.at(&[ch, r, cc]);
                    }
                }
                out.push(acc / (k.0 * k.1) as f64);
            }
            c0 += s.1;
        }
        r0 += s.0;
    }
    out
}

#[test]
fn avg_pool_constant_map() {
    let x = Tensor::<f64>::full(&[3, 4, 5], 0.7);
    let p = avg_pool_patches(&x, (2, 3), (1, 2)).unwrap();
    assert!(p.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
}

#[test]
fn avg_pool_unit_kernel_is_row_major_cells() {
    let x = Tensor::<f64>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap();
    let p = avg_pool_patches(&x, (1, 1), (1, 1)).unwrap();
    assert_eq!(p.shape(), &[4, 1]);
    assert_eq!(p.data(), &[1., 2., 3., 4.]);
}

#[test]
fn avg_pool_hand_case() {
    let x = Tensor::<f64>::from_f64(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
    let p = avg_pool_patches(&x, (2, 2), (1, 1)).unwrap();
    assert_eq!(p.data(), &[3., 4., 6., 7.]);
}

#[test]
fn avg_pool_kernel_too_large() {
    let x = Tensor::<f64>::zeros(&[1, 3, 3]);
    assert!(avg_pool_patches(&x, (4, 1), (1, 1)).is_err());
}

#[test]
fn avg_pool_randomized_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let c = rng.random_range(1..4);
        let h = rng.random_range(1..9);
        let w = rng.random_range(1..9);
        let k = (rng.random_range(1..=h), rng.random_range(1..=w));
        let s = (rng.random_range(1..4), rng.random_range(1..4));
        let x = rand_tensor(&mut rng, &[c, h, w]);
        let p = avg_pool_patches(&x, k, s).unwrap();
        assert_close(p.data(), &avg_pool_oracle(&x, k, s), 1e-6);
    }
}

fn max_pool_oracle(mask: &[u8], h: usize, w: usize, k: (usize, usize), s: (usize, usize)) -> Vec<u8> {
    let mut out = Vec::new();
    let mut r0 = 0;
    while r0 + k.0 <= h {
        let mut c0 = 0;
        while c0 + k.1 <= w {
            let mut any = 0;
            for r in r0..r0 + k.0 {
                for c in c0..c0 + k.1 {
                    if mask[r * w + c] == 1 {
                        any = 1;
                    }
                }
            }
            out.push(any);
            c0 += s.1;
        }
        r0 += s.0;
    }
    out
}

#[test]
fn max_pool_zero_mask() {
    let out = max_pool2d(&[0; 64], (8, 8), (3, 3), (2, 2)).unwrap();
    assert!(out.iter().all(|&v| v == 0));
}

#[test]
fn max_pool_single_pixel_marks_covering_windows() {
    let mut mask = vec![0u8; 36];
    mask[2 * 6 + 3] = 1;
    let grid = PatchGrid::new(6, 6, (2, 2), (1, 1)).unwrap();
    let out = max_pool2d(&mask, (6, 6), (2, 2), (1, 1)).unwrap();
    for (k, &v) in out.iter().enumerate() {
        let (r, c) = grid.origin(k);
        let covers = (r..r + 2).contains(&2) && (c..c + 2).contains(&3);
        assert_eq!(v == 1, covers, "window {k}");
    }
}

#[test]
fn max_pool_rejects_non_binary() {
    assert!(max_pool2d(&[0, 2, 0, 0], (2, 2), (1, 1), (1, 1)).is_err());
}

#[test]
fn max_pool_randomized_against_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mask: Vec<u8> = (0..64).map(|_| u8::from(rng.random_bool(0.1))).collect();
    assert_eq!(
        max_pool2d(&mask, (8, 8), (3, 3), (2, 2)).unwrap(),
        max_pool_oracle(&mask, 8, 8, (3, 3), (2, 2))
    );
    for _ in 0..100 {
        let h = rng.random_range(1..10);
        let w = rng.random_range(1..10);
        let k = (rng.random_range(1..=h), rng.random_range(1..=w));
        let s = (rng.random_range(1..4), rng.random_range(1..4));
        let mask: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(0.15))).collect();
        assert_eq!(
            max_pool2d(&mask, (h, w), k, s).unwrap(),
            max_pool_oracle(&mask, h, w, k, s)
        );
    }
}

proptest! {
    // Both pooling paths must share one window enumeration.
    #[test]
    fn pooling_windows_align(h in 1usize..10, w in 1usize..10, kh in 1usize..4, kw in 1usize..4, sh in 1usize..4, sw in 1usize..4) {
        prop_assume!(kh <= h && kw <= w);
        let grid = PatchGrid::new(h, w, (kh, kw), (sh, sw)).unwrap();
        for k in 0..grid.len() {
            let (r, c) = grid.origin(k);
            let mut mask = vec![0u8; h * w];
            mask[r * w + c] = 1;
            let labels = max_pool2d(&mask, (h, w), (kh, kw), (sh, sw)).unwrap();
            prop_assert_eq!(labels[k], 1);
            let mut x = vec![0.0; h * w];
            x[r * w + c] = 1.0;
            let p = avg_pool_patches(&Tensor::<f64>::new(&[1, h, w], x).unwrap(), (kh, kw), (sh, sw)).unwrap();
            prop_assert!(p.data()[k] > 0.0);
            prop_assert_eq!(labels.len(), p.numel());
        }
    }
}

#[test]
fn bilinear_identity_and_constant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = rand_tensor(&mut rng, &[3, 4]);
    assert_eq!(bilinear_upsample(&m, 1).unwrap(), m);
    let c = Tensor::<f64>::full(&[2, 3], -0.3);
    for f in 1..5 {
        let up = bilinear_upsample(&c, f).unwrap();
        assert_eq!(up.shape(), &[2 * f, 3 * f]);
        assert!(up.data().iter().all(|&v| (v + 0.3).abs() < 1e-15));
    }
}

#[test]
fn bilinear_hand_case() {
    // Sample positions (i + 0.5)/2 − 0.5 clamped at the border: -0.25→0, 0.25, 0.75, 1.25→1.
    let m = Tensor::<f64>::from_f64(&[2, 2], &[0., 1., 1., 0.]).unwrap();
    let up = bilinear_upsample(&m, 2).unwrap();
    #[rustfmt::skip]
    let expected = [
        0.0, 0.25, 0.75, 1.0,
        0.25, 0.375, 0.625, 0.75,
        0.75, 0.625, 0.375, 0.25,
        1.0, 0.75, 0.25, 0.0,
    ];
    assert_close(up.data(), &expected, 1e-12);
}

proptest! {
    #[test]
    fn bilinear_range_is_bounded(vals in proptest::collection::vec(-5.0f64..5.0, 6), f in 1usize..6) {
        let m = Tensor::<f64>::new(&[2, 3], vals.clone()).unwrap();
        let up = bilinear_upsample(&m, f).unwrap();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(up.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
    }
}

#[test]
fn linear_matches_dot_product_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let w = rand_tensor(&mut rng, &[4, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.linear(xv, wv, Some(bv)).unwrap();
    let mut expected = Vec::new();
    for i in 0..5 {
        for j in 0..3 {
            expected.push(b.data()[j] + (0..4).map(|k| x.at(&[i, k]) * w.at(&[k, j])).sum::<f64>());
        }
    }
    assert_close(g.value(y).data(), &expected, 1e-6);
}

#[test]
fn sigmoid_tanh_ranges() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[5], &[-8.0, -1.0, 0.0, 1.0, 8.0]).unwrap());
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert_eq!(g.value(s).data()[2], 0.5);
    assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(g.value(t).data().iter().all(|&v| v > -1.0 && v <= 1.0));
}

fn three_layer(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let h = g.linear(v[0], v[1], Some(v[2]))?;
    let h = g.tanh(h);
    let h = g.linear(h, v[3], None)?;
    let h = g.sigmoid(h);
    let h = g.linear(h, v[4], None)?;
    let h = g.relu(h);
    let m = g.mean(h);
    let x = g.max_all(h);
    g.add(m, x)
}

#[test]
fn composite_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs = vec![
        rand_tensor(&mut rng, &[4, 3]),
        rand_tensor(&mut rng, &[3, 5]),
        rand_tensor(&mut rng, &[5]),
        rand_tensor(&mut rng, &[5, 4]),
        rand_tensor(&mut rng, &[4, 2]),
    ];
    let r = grad_check(three_layer, &inputs, 1e-5).unwrap();
    assert!(r.passes(1e-4), "{r:?}");
}

#[test]
fn affine_grad_check_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = vec![rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[2])];
    let r = grad_check(
        |g, v| {
            let w = g.constant(Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap());
            let y = g.linear(v[0], w, Some(v[1]))?;
            let y = g.scale(y, 3.0);
            Ok(g.sum(y))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-10, "{r:?}");
}

#[test]
fn corrupted_backward_rule_is_caught() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let inputs = vec![rand_tensor(&mut rng, &[6])];
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
    let r = grad_check(
        |g, v| {
            // Wrong rule: drops the (1 − σ) factor.
            let y = g.custom_unary(v[0], sigmoid, |_, y, dy| {
                Tensor::new(
                    y.shape(),
                    y.data().iter().zip(dy.data()).map(|(s, d)| s * d).collect(),
                )
                .unwrap()
            });
            let y = g.scale(y, 4.0);
            Ok(g.sum(y))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error > 1e-2, "{r:?}");
    assert!(!r.passes(1e-4));
}

#[test]
fn grad_check_rejects_bad_step() {
    let inputs = vec![Tensor::<f64>::zeros(&[1])];
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), &inputs, 1e-2).is_err());
}

#[test]
fn grad_check_rejects_non_finite() {
    let inputs = vec![Tensor::<f64>::from_f64(&[1], &[f64::NAN]).unwrap()];
    assert!(grad_check(|g, v| Ok(g.sum(v[0])), &inputs, 1e-5).is_err());
}

fn spatial_ops_program(g: &mut Graph<f64>, v: &[Var]) -> Result<Var> {
    let y = g.conv2d(v[0], v[1], Some(v[2]), (2, 1), (1, 1))?;
    let y = g.bilinear_upsample(y, 2)?;
    let p = g.avg_pool_patches(y, (2, 2), (1, 2))?;
    let p = g.tanh(p);
    let sm = g.row_softmax(p)?;
    let rm = g.row_max(sm)?;
    let mean = g.row_mean(p)?;
    let s = g.mul(rm, mean)?;
    Ok(g.sum(s))
}

#[test]
fn spatial_ops_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..5 {
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 2, 5, 4]),
            rand_tensor(&mut rng, &[3, 2, 3, 3]),
            rand_tensor(&mut rng, &[3]),
        ];
        let r = grad_check(spatial_ops_program, &inputs, 1e-5).unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}

#[test]
fn identical_inputs_give_identical_bits() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[2, 3, 7, 6]).cast::<f32>();
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]).cast::<f32>();
    let a = conv2d(&x, &w, None, (2, 2), (1, 1)).unwrap();
    let b = conv2d(&x, &w, None, (2, 2), (1, 1)).unwrap();
    assert_eq!(a.data(), b.data());
}
