use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sweepfuse_tensor::gradcheck::GradCheck;
use sweepfuse_tensor::{Adam, ConvSpec, GatherTable, ParamStore, ReduceKind, Tape, Tensor, TensorError};

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// Naive nested-loop 2D cross-correlation over `[C, H, W]`.
fn conv2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(vec![co, oh, ow]);
    for o in 0..co {
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y * stride + ky) as isize - pad as isize;
                            let ix = (xx * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.at(&[o, c, ky, kx]) * x.at(&[c, iy as usize, ix as usize]);
                        }
                    }
                }
                out.data_mut()[(o * oh + y) * ow + xx] = acc;
            }
        }
    }
    out
}

/// Naive 3D cross-correlation over `[C, D, H, W]`.
fn conv3d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (ci, d, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ext = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (ext(d), ext(h), ext(wd));
    let mut out = Tensor::zeros(vec![co, od, oh, ow]);
    let at = |c: usize, z: isize, y: isize, xx: isize| {
        if z < 0 || y < 0 || xx < 0 || z >= d as isize || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.at(&[c, z as usize, y as usize, xx as usize])
        }
    };
    for o in 0..co {
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iz = (z * stride + kz) as isize - pad as isize;
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    acc += w.at(&[o, c, kz, ky, kx]) * at(c, iz, iy, ix);
                                }
                            }
                        }
                    }
                    out.data_mut()[((o * od + z) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Naive scatter form of a 2D transposed convolution; weight `[C_in, C_out, k, k]`.
fn conv_transpose2d_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize, out_pad: usize) -> Tensor<f64> {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let oh = (h - 1) * stride + k + out_pad - 2 * pad;
    let ow = (wd - 1) * stride + k + out_pad - 2 * pad;
    let mut out = Tensor::zeros(vec![co, oh, ow]);
    for c in 0..ci {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..co {
                    for ky in 0..k {
                        for kx in 0..k {
                            let ty = (y * stride + ky) as isize - pad as isize;
                            let tx = (xx * stride + kx) as isize - pad as isize;
                            if ty < 0 || tx < 0 || ty >= oh as isize || tx >= ow as isize {
                                continue;
                            }
                            out.data_mut()[(o * oh + ty as usize) * ow + tx as usize] +=
                                x.at(&[c, y, xx]) * w.at(&[c, o, ky, kx]);
                        }
                    }
                }
            }
        }
    }
    out
}

fn forward(f: impl FnOnce(&mut Tape<f64>) -> sweepfuse_tensor::Var) -> Tensor<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

// ------------------------------------------------------------------ elementwise

#[test]
fn mul_by_zero_annihilates_value_and_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(random(&[4, 3], 1), true);
    let y = tape.mul_scalar(x, 0.0);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let loss = tape.sum_all(y);
    tape.backward(loss).unwrap();
    assert!(tape.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn sub_of_self_is_zero() {
    let out = forward(|t| {
        let x = t.constant(random(&[5], 2));
        t.sub(x, x).unwrap()
    });
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn broadcast_rejects_non_suffix_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2]));
    match tape.add(a, b) {
        Err(TensorError::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2]);
        }
        other => panic!("expected dimension error, got {other:?}", other = other.err()),
    }
    let c = tape.constant(Tensor::full(vec![3], 1.0));
    let sum = tape.add(a, c).unwrap();
    assert_eq!(tape.value(sum).data(), &[1.0; 6]);
}

proptest! {
    #[test]
    fn add_matches_scalar_loop(values in prop::collection::vec(-1e3f64..1e3, 12)) {
        let a = Tensor::new(vec![2, 3], values[..6].to_vec()).unwrap();
        let b = Tensor::new(vec![2, 3], values[6..].to_vec()).unwrap();
        let out = forward(|t| {
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            t.add(x, y).unwrap()
        });
        for i in 0..6 {
            prop_assert_eq!(out.data()[i], values[i] + values[i + 6]);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-40f32..40.0, 4 * 9)) {
        let x = Tensor::new(vec![4, 9], values).unwrap();
        for axis in 0..2 {
            let p = forward32(|t| {
                let v = t.constant(x.clone());
                t.softmax(v, axis).unwrap()
            });
            let (outer, n) = if axis == 0 { (9, 4) } else { (4, 9) };
            for o in 0..outer {
                let sum: f64 = (0..n)
                    .map(|j| if axis == 0 { p.at(&[j, o]) } else { p.at(&[o, j]) } as f64)
                    .sum();
                prop_assert!((sum - 1.0).abs() < 1e-6);
            }
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
        }
    }
}

fn forward32(f: impl FnOnce(&mut Tape<f32>) -> sweepfuse_tensor::Var) -> Tensor<f32> {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

// ------------------------------------------------------------------ convolution

#[test]
fn identity_1x1_kernel_reproduces_input() {
    let x = random(&[3, 4, 5], 3);
    let w = Tensor::from_fn(vec![3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
    let out = forward(|t| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        t.conv(xv, wv, None, ConvSpec::same(2, 1, 1)).unwrap()
    });
    assert_eq!(out, x);
}

#[test]
fn zero_kernel_gives_zero_output() {
    let out = forward(|t| {
        let xv = t.constant(random(&[2, 6, 6], 4));
        let wv = t.constant(Tensor::zeros(vec![3, 2, 3, 3]));
        t.conv(xv, wv, None, ConvSpec::same(2, 3, 1)).unwrap()
    });
    assert_eq!(out.shape(), &[3, 6, 6]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_nested_loop_oracle() {
    let x = random(&[2, 5, 5], 5);
    let w = random(&[3, 2, 3, 3], 6);
    for (stride, pad) in [(1, 1), (1, 0), (2, 1), (2, 0)] {
        let out = forward(|t| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            t.conv(xv, wv, None, ConvSpec::new(2, 3, stride, pad)).unwrap()
        });
        let expect = conv2d_oracle(&x, &w, stride, pad);
        assert_eq!(out.shape(), expect.shape());
        assert!(out.max_abs_diff(&expect) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv3d_matches_nested_loop_oracle() {
    let x = random(&[2, 4, 5, 6], 7);
    let w = random(&[2, 2, 3, 3, 3], 8);
    for (stride, pad) in [(1, 1), (2, 1)] {
        let out = forward(|t| {
            let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
            t.conv(xv, wv, None, ConvSpec::new(3, 3, stride, pad)).unwrap()
        });
        let expect = conv3d_oracle(&x, &w, stride, pad);
        assert_eq!(out.shape(), expect.shape());
        assert!(out.max_abs_diff(&expect) < 1e-12);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 4, 4]));
    let w = tape.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(tape.conv(x, w, None, ConvSpec::same(2, 3, 1)), Err(TensorError::Dimension { .. })));
}

#[test]
fn transpose_of_single_pixel_replicates_value() {
    let out = forward(|t| {
        let x = t.constant(Tensor::full(vec![1, 1, 1], 2.5));
        let w = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
        t.conv_transpose(x, w, None, ConvSpec::new(2, 2, 2, 0), 0).unwrap()
    });
    let expect =
        conv_transpose2d_oracle(&Tensor::full(vec![1, 1, 1], 2.5), &Tensor::full(vec![1, 1, 2, 2], 1.0), 2, 0, 0);
    assert_eq!(out.shape(), &[1, 2, 2]);
    assert_eq!(out, expect);
    assert_eq!(out.data(), &[2.5; 4]);
}

#[test]
fn transpose_matches_scatter_oracle() {
    let x = random(&[3, 4, 3], 9);
    let w = random(&[3, 2, 3, 3], 10);
    let out = forward(|t| {
        let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
        t.conv_transpose(xv, wv, None, ConvSpec::new(2, 3, 2, 1), 1).unwrap()
    });
    let expect = conv_transpose2d_oracle(&x, &w, 2, 1, 1);
    assert_eq!(out.shape(), &[2, 8, 6]);
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn transpose_of_zero_is_zero() {
    let out = forward(|t| {
        let x = t.constant(Tensor::zeros(vec![2, 3, 3, 3]));
        let w = t.constant(random(&[2, 4, 3, 3, 3], 11));
        t.conv_transpose(x, w, None, ConvSpec::new(3, 3, 2, 1), 1).unwrap()
    });
    assert_eq!(out.shape(), &[4, 6, 6, 6]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn strided_conv_then_transpose_restores_extent() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![1, 8, 8]));
    let down_w = tape.constant(Tensor::zeros(vec![2, 1, 3, 3]));
    let down = tape.conv(x, down_w, None, ConvSpec::same(2, 3, 2)).unwrap();
    assert_eq!(tape.shape(down), &[2, 4, 4]);
    let up_w = tape.constant(Tensor::zeros(vec![2, 1, 3, 3]));
    let up = tape.conv_transpose_to(down, up_w, None, ConvSpec::same(2, 3, 2), &[8, 8]).unwrap();
    assert_eq!(tape.shape(up), &[1, 8, 8]);
    let err = tape.conv_transpose_to(down, up_w, None, ConvSpec::same(2, 3, 2), &[9, 8]);
    assert!(matches!(err, Err(TensorError::Dimension { .. })));
}

// ------------------------------------------------------------------ group norm

fn gn(x: &Tensor<f64>, groups: usize, gamma: f64, beta: f64) -> sweepfuse_tensor::Result<Tensor<f64>> {
    let c = x.shape()[0];
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor::full(vec![c], gamma));
    let b = tape.constant(Tensor::full(vec![c], beta));
    let y = tape.group_norm(xv, g, b, groups)?;
    Ok(tape.value(y).clone())
}

#[test]
fn group_norm_of_constant_is_zero() {
    let y = gn(&Tensor::full(vec![4, 3, 3], 7.0), 2, 1.0, 0.0).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn group_norm_with_zero_gamma_is_beta() {
    let y = gn(&random(&[4, 3, 3], 12), 2, 0.0, 0.25).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.25));
}

#[test]
fn group_norm_statistics_match_scalar_loop() {
    let x = random(&[16, 4, 4], 13);
    let y = gn(&x, 4, 1.0, 0.0).unwrap();
    // Each group is 4 channels × 16 pixels, contiguous in memory.
    for g in 0..4 {
        let xs = &x.data()[g * 64..(g + 1) * 64];
        let ys = &y.data()[g * 64..(g + 1) * 64];
        let mean = xs.iter().sum::<f64>() / 64.0;
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        for (&xv, &yv) in xs.iter().zip(ys) {
            let expect = (xv - mean) / (var + 1e-5).sqrt();
            assert!((yv - expect).abs() < 1e-6);
        }
        let ymean = ys.iter().sum::<f64>() / 64.0;
        let yvar = ys.iter().map(|v| (v - ymean).powi(2)).sum::<f64>() / 64.0;
        assert!(ymean.abs() < 1e-6);
        assert!((yvar - var / (var + 1e-5)).abs() < 1e-6);
    }
}

#[test]
fn group_norm_rejects_indivisible_channels() {
    assert!(matches!(gn(&Tensor::zeros(vec![6, 2, 2]), 4, 1.0, 0.0), Err(TensorError::Config(_))));
}

// ------------------------------------------------------------------ activations

#[test]
fn activation_fixed_points() {
    let out = forward(|t| {
        let x = t.constant(Tensor::from_f64(vec![2], &[0.0, -3.0]).unwrap());
        t.sigmoid(x)
    });
    assert_eq!(out.data()[0], 0.5);
    let out = forward(|t| {
        let x = t.constant(Tensor::from_f64(vec![2], &[-3.0, 2.0]).unwrap());
        t.relu(x)
    });
    assert_eq!(out.data(), &[0.0, 2.0]);
}

#[test]
fn sigmoid_saturates_without_overflow() {
    // 40-digit reference values of 1/(1 + e^-x).
    let hi = 0.999_999_999_999_906_4_f64;
    let lo = 9.357_622_968_839_299e-14_f64;
    let out = forward(|t| {
        let x = t.constant(Tensor::from_f64(vec![4], &[30.0, -30.0, 800.0, -800.0]).unwrap());
        t.sigmoid(x)
    });
    let d = out.data();
    assert!((d[0] - hi).abs() < 4.0 * f64::EPSILON && d[0] < 1.0);
    assert!(((d[1] - lo) / lo).abs() < 1e-12);
    assert!(d[2] < 1.0 && d[3] > 0.0 && d.iter().all(|v| v.is_finite()));
    let out32 = forward32(|t| {
        let x = t.constant(Tensor::from_f64(vec![2], &[30.0, -120.0]).unwrap());
        t.sigmoid(x)
    });
    assert!(out32.data()[0] < 1.0 && out32.data()[1] > 0.0);
}

// ------------------------------------------------------------------ reductions

#[test]
fn reduce_examples() {
    let mean = forward(|t| {
        let x = t.constant(Tensor::full(vec![3, 5], 4.5));
        t.reduce(x, ReduceKind::Mean, 1).unwrap()
    });
    assert_eq!(mean.data(), &[4.5; 3]);
    let l1 = forward(|t| {
        let x = t.constant(Tensor::from_f64(vec![1, 4], &[0.0, 0.0, -1.0, 0.0]).unwrap());
        t.reduce(x, ReduceKind::L1Norm, 1).unwrap()
    });
    assert_eq!(l1.data(), &[1.0]);
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(tape.reduce(x, ReduceKind::Sum, 2), Err(TensorError::Axis { axis: 2, rank: 2 })));
}

#[test]
fn max_matches_scalar_loop_with_one_hot_gradient() {
    let x = random(&[3, 5, 4], 14);
    for axis in 0..3 {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let m = tape.reduce(xv, ReduceKind::Max, axis).unwrap();
        let s = x.shape().to_vec();
        let mut expect_grad = Tensor::<f64>::zeros(s.clone());
        let out = tape.value(m).clone();
        let mut r = 0;
        let mut idx = [0usize; 3];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for p in 0..s[others[0]] {
            for q in 0..s[others[1]] {
                idx[others[0]] = p;
                idx[others[1]] = q;
                let mut best = f64::NEG_INFINITY;
                let mut arg = 0;
                for j in 0..s[axis] {
                    idx[axis] = j;
                    if x.at(&idx) > best {
                        best = x.at(&idx);
                        arg = j;
                    }
                }
                assert_eq!(out.data()[r], best);
                idx[axis] = arg;
                expect_grad.data_mut()[(idx[0] * s[1] + idx[1]) * s[2] + idx[2]] = 1.0;
                r += 1;
            }
        }
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xv).unwrap(), &expect_grad);
    }
    let report = GradCheck::default().inputs(&[x], |t, v| t.reduce(v[0], ReduceKind::Max, 1)).unwrap();
    assert!(report.passed(1e-4), "{report:?}");
}

#[test]
fn max_gradient_ties_go_to_lowest_index() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(vec![4], &[1.0, 3.0, 3.0, 0.0]).unwrap(), true);
    let m = tape.reduce(x, ReduceKind::Max, 0).unwrap();
    tape.backward(m).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

// ------------------------------------------------------------------ softmax

#[test]
fn softmax_examples() {
    let p = forward(|t| {
        let x = t.constant(Tensor::full(vec![6], 2.0));
        t.softmax(x, 0).unwrap()
    });
    assert!(p.data().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    let p = forward32(|t| {
        let x = t.constant(Tensor::from_f64(vec![2], &[0.0, 50.0]).unwrap());
        t.softmax(x, 0).unwrap()
    });
    assert!(p.data()[1] > 0.999_999 && p.data()[0] < 1e-20);
}

#[test]
fn softmax_matches_double_precision_reference() {
    let logits = [0.3, -1.7, 2.2, 0.0, 4.1, -0.5, 1.3];
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - m).exp()).sum();
    let p = forward32(|t| {
        let x = t.constant(Tensor::from_f64(vec![7], &logits).unwrap());
        t.softmax(x, 0).unwrap()
    });
    for (i, &v) in p.data().iter().enumerate() {
        let expect = (logits[i] - m).exp() / z;
        assert!((v as f64 - expect).abs() < 1e-7, "{v} vs {expect}");
    }
}

// ------------------------------------------------------------------ backward

#[test]
fn backward_analytic_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(vec![3], &[0.5, -2.0, 7.0]).unwrap(), true);
    let s = tape.sum_all(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap(), true);
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum_all(sq);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    // A second pass without reset accumulates.
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
    tape.zero_grad();
    assert!(tape.grad(x).is_none());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(vec![2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn unreached_leaves_have_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let used = tape.leaf(Tensor::full(vec![2], 1.0), true);
    let unused = tape.leaf(Tensor::full(vec![2], 1.0), true);
    let _side = tape.relu(unused);
    let loss = tape.sum_all(used);
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());
}

#[test]
fn store_accumulates_across_tapes() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", Tensor::full(vec![2], 3.0)).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let w2 = tape.param(&store, id);
        assert_eq!(w, w2);
        let loss = tape.sum_all(w);
        tape.backward(loss).unwrap();
        store.accumulate(&tape);
    }
    assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
}

// ------------------------------------------------------------------ gradient checks

fn gc() -> GradCheck {
    GradCheck { max_entries: 40, ..GradCheck::default() }
}

#[test]
fn gradcheck_elementwise_and_activations() {
    let a = random(&[3, 4], 20);
    let b = random(&[4], 21);
    let r = gc()
        .inputs(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[1])?;
            let m = t.mul(d, v[1])?;
            let q = t.mul(m, v[0])?;
            let sg = t.sigmoid(q);
            let k = t.mul_scalar(sg, 1.7);
            let k = t.add_scalar(k, -0.3);
            let ab = t.abs(k);
            Ok(t.relu(ab))
        })
        .unwrap();
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn gradcheck_convolutions() {
    let x = random(&[2, 5, 6], 22);
    let w = random(&[3, 2, 3, 3], 23);
    let b = random(&[3], 24);
    for spec in [ConvSpec::same(2, 3, 1), ConvSpec::same(2, 3, 2), ConvSpec::new(2, 3, 1, 0)] {
        let r = gc().inputs(&[x.clone(), w.clone(), b.clone()], |t, v| t.conv(v[0], v[1], Some(v[2]), spec)).unwrap();
        assert!(r.passed(1e-4), "{spec:?} {r:?}");
    }
    let x3 = random(&[2, 4, 4, 4], 25);
    let w3 = random(&[2, 2, 3, 3, 3], 26);
    let r = gc().inputs(&[x3.clone(), w3], |t, v| t.conv(v[0], v[1], None, ConvSpec::same(3, 3, 2))).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
    let wt = random(&[2, 3, 3, 3, 3], 27);
    let bt = random(&[3], 28);
    let r = gc()
        .inputs(&[x3, wt, bt], |t, v| t.conv_transpose(v[0], v[1], Some(v[2]), ConvSpec::same(3, 3, 2), 1))
        .unwrap();
    assert!(r.passed(1e-4), "{r:?}");
}

#[test]
fn gradcheck_normalization_and_reductions() {
    let x = random(&[8, 3, 4], 30);
    let g = random(&[8], 31);
    let b = random(&[8], 32);
    let r = gc().inputs(&[x.clone(), g, b], |t, v| t.group_norm(v[0], v[1], v[2], 4)).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
    for kind in [ReduceKind::Sum, ReduceKind::Mean, ReduceKind::L1Norm, ReduceKind::Max] {
        for axis in 0..3 {
            let r = gc().inputs(std::slice::from_ref(&x), |t, v| t.reduce(v[0], kind, axis)).unwrap();
            assert!(r.passed(1e-4), "{kind:?} {axis} {r:?}");
        }
    }
    for axis in 0..3 {
        let r = gc().inputs(std::slice::from_ref(&x), |t, v| t.softmax(v[0], axis)).unwrap();
        assert!(r.passed(1e-4), "softmax {axis} {r:?}");
    }
}

#[test]
fn gradcheck_layout_and_gather() {
    let a = random(&[2, 3, 4], 40);
    let b = random(&[1, 3, 4], 41);
    let r = gc()
        .inputs(&[a.clone(), b], |t, v| {
            let c = t.concat(&[v[0], v[1]])?;
            t.reshape(c, vec![9, 4])
        })
        .unwrap();
    assert!(r.passed(1e-4), "{r:?}");
    let table = Arc::new(GatherTable {
        source_len: 12,
        out_shape: vec![2, 5],
        taps: 2,
        index: (0..20).map(|i| (i * 7 % 12) as u32).collect(),
        weight: (0..20).map(|i| if i % 5 == 0 { 0.0 } else { 0.1 * i as f64 }).collect(),
    });
    let r = gc().inputs(&[a], |t, v| t.gather(v[0], table.clone())).unwrap();
    assert!(r.passed(1e-4), "{r:?}");
}

// ------------------------------------------------------------------ adam

#[test]
fn adam_descends_quadratic_bowl() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("x", Tensor::scalar(5.0)).unwrap();
    let mut opt = Adam::new(0.1);
    let mut trace = vec![5.0];
    for _ in 0..100 {
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        store.accumulate(&tape);
        opt.step(&mut store, &[id]).unwrap();
        trace.push(store.get(id).value.data()[0]);
    }
    // Reference trajectory from a scripted double-precision Adam loop.
    assert!((trace[50] - 0.901_119_104_366_097_4).abs() < 1e-9);
    assert!((trace[100] + 0.039_004_031_223_919_36).abs() < 1e-9);
    assert!(trace[..=80].windows(2).all(|w| w[1].abs() < w[0].abs()));
    assert!(trace[100].abs() < 0.05);
}
