use cellsearch::autodiff::Tape;
use cellsearch::ops::{Conv2dOptions, Padding};
use cellsearch::params::{Frame, ParamStore};
use cellsearch::search_space::{softmax_coefficients, Candidate, CellKind, EdgeId, MixedEdge, OperatorMask, NUM_EDGES};
use cellsearch::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = dims.iter().product();
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::from_vec(dims.to_vec(), (0..n).map(|_| d.sample(rng)).collect()).unwrap()
}

/// Direct convolution with explicit zero padding.
fn naive_conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    stride: usize,
    dilation: usize,
    groups: usize,
    pad: usize,
) -> Tensor<f64> {
    let [n, cin, h, wd] = x.dims().try_into().unwrap();
    let [cout, cpg, k, _] = w.dims().try_into().unwrap();
    let span = dilation * (k - 1) + 1;
    let oh = (h + 2 * pad - span) / stride + 1;
    let ow = (wd + 2 * pad - span) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                                let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cpg + ci) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::from_vec([n, cout, oh, ow], out).unwrap()
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, opts: Conv2dOptions) -> Tensor<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let y = tape.conv2d(xv, wv, None, opts).unwrap();
    (*tape.value(y)).clone()
}

#[test]
fn conv_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..60 {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..=2);
        let dilation = rng.random_range(1..=2);
        let groups = [1, 2][rng.random_range(0..2)];
        let cin = groups * rng.random_range(1..=2);
        let cout = groups * rng.random_range(1..=2);
        let side = rng.random_range(3..=9);
        let x = randn(&[2, cin, side, side], &mut rng);
        let w = randn(&[cout, cin / groups, k, k], &mut rng);
        let pad = dilation * (k - 1) / 2;
        let got = run_conv(
            &x,
            &w,
            Conv2dOptions::default()
                .stride(stride)
                .dilation(dilation)
                .groups(groups)
                .padding(Padding::Same),
        );
        let want = naive_conv(&x, &w, stride, dilation, groups, pad);
        assert_eq!(got.dims(), want.dims());
        assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
    }
}

#[test]
fn atrous_equals_zero_inserted_five_by_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let c = rng.random_range(1..=3);
        let side = rng.random_range(2..=10);
        let stride = 1 + case % 2;
        let x = randn(&[2, c, side, side], &mut rng);
        let w3 = randn(&[c, c, 3, 3], &mut rng);
        let mut w5 = vec![0.0; c * c * 25];
        for o in 0..c {
            for i in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        w5[((o * c + i) * 5 + 2 * ky) * 5 + 2 * kx] = w3.data()[((o * c + i) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let w5 = Tensor::from_vec([c, c, 5, 5], w5).unwrap();
        let atrous = run_conv(&x, &w3, Conv2dOptions::default().dilation(2).stride(stride));
        let dense = naive_conv(&x, &w5, stride, 1, 1, 2);
        assert_eq!(atrous.dims(), dense.dims());
        assert!(atrous.max_abs_diff(&dense).unwrap() <= 1e-12, "case {case}");
    }
}

fn naive_pool(x: &Tensor<f64>, stride: usize, max: bool) -> Tensor<f64> {
    let [n, c, h, w] = x.dims().try_into().unwrap();
    let (oh, ow) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut vals = Vec::new();
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let (iy, ix) = ((oy * stride) as isize + dy, (ox * stride) as isize + dx);
                        if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                            vals.push(x.data()[(p * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(if max {
                    vals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
                } else {
                    vals.iter().sum::<f64>() / vals.len() as f64
                });
            }
        }
    }
    Tensor::from_vec([n, c, oh, ow], out).unwrap()
}

#[test]
fn pools_match_direct_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..40 {
        let side = rng.random_range(1..=9);
        let stride = rng.random_range(1..=2);
        let x = randn(&[2, 2, side, side], &mut rng);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let m = tape.max_pool2d(xv, 3, stride).unwrap();
        let a = tape.avg_pool2d(xv, 3, stride).unwrap();
        assert!(tape.value(m).max_abs_diff(&naive_pool(&x, stride, true)).unwrap() < 1e-15);
        assert!(tape.value(a).max_abs_diff(&naive_pool(&x, stride, false)).unwrap() < 1e-12);
    }
}

#[test]
fn batch_norm_matches_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = randn(&[3, 2, 4, 4], &mut rng);
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let gamma = tape.constant(Tensor::from_vec([2], vec![1.5, -0.5]).unwrap());
    let beta = tape.constant(Tensor::from_vec([2], vec![0.25, 2.0]).unwrap());
    let (y, stats) = tape.batch_norm_train(xv, Some((gamma, beta))).unwrap();
    let y = tape.value(y);
    for c in 0..2 {
        let vals: Vec<f64> = (0..3)
            .flat_map(|b| (0..16).map(move |i| (b, i)))
            .map(|(b, i)| x.data()[(b * 2 + c) * 16 + i])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((stats.mean[c] - mean).abs() < 1e-12);
        assert!((stats.var[c] - var * n / (n - 1.0)).abs() < 1e-12);
        let (g, bt) = ([1.5, -0.5][c], [0.25, 2.0][c]);
        for b in 0..3 {
            for i in 0..16 {
                let idx = (b * 2 + c) * 16 + i;
                let want = g * (x.data()[idx] - mean) / (var + 1e-5).sqrt() + bt;
                assert!((y.data()[idx] - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn softmax_rows_sum_to_one_and_ignore_shifts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10_000 {
        let m = rng.random_range(1..=7);
        let scale = [1e-3, 1.0, 10.0][rng.random_range(0..3)];
        let row: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let p = softmax_coefficients(&row).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shift = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let q = softmax_coefficients(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn mixed_edge_is_weighted_sum_of_candidates() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let masks = [OperatorMask::full(), OperatorMask::atrous_free()];
    for case in 0..100 {
        let mask = &masks[case % 2];
        let cell = if case % 3 == 0 {
            CellKind::Reduce
        } else {
            CellKind::Normal
        };
        let node = rng.random_range(0..4);
        let source = rng.random_range(0..node + 2);
        let id = EdgeId::new(cell, node, source).unwrap();
        let mut store = ParamStore::new();
        let edge = MixedEdge::new(&mut store, &mut rng, "e", id, 2, mask, case % 5 == 0).unwrap();
        let x = randn(&[2, 2, 6, 6], &mut rng);
        let alpha = randn(&[NUM_EDGES, mask.len()], &mut rng);

        let tape = Tape::new();
        let frame = Frame::new(&tape, &store);
        let xv = tape.constant(x.clone());
        let coeffs = tape.softmax(tape.constant(alpha.clone()), 1).unwrap();
        let mixed = tape.value(edge.forward(&frame, xv, coeffs, id.row()).unwrap());

        let row = &alpha.data()[id.row() * mask.len()..(id.row() + 1) * mask.len()];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let mut want = vec![0.0; mixed.numel()];
        for (k, &kind) in mask.kinds().iter().enumerate() {
            let tape = Tape::new();
            let frame = Frame::new(&tape, &store);
            let op = Candidate::new(
                &mut ParamStore::<f64>::new(),
                &mut rng,
                "unused",
                kind,
                2,
                id.stride(),
                case % 5 == 0,
            )
            .unwrap();
            assert_eq!(
                std::mem::discriminant(&op),
                std::mem::discriminant(&edge.candidates[k].1)
            );
            let out = tape.value(edge.candidates[k].1.forward(&frame, tape.constant(x.clone())).unwrap());
            let c = (row[k] - max).exp() / z;
            for (w, o) in want.iter_mut().zip(out.data()) {
                *w += c * o;
            }
        }
        let want = Tensor::from_vec(mixed.dims().to_vec(), want).unwrap();
        assert!(mixed.max_abs_diff(&want).unwrap() < 1e-12, "case {case}");
    }
}
