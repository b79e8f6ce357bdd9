//! Tensor operations against direct loop oracles, plus operator gradient checks.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mti_core::gradcheck::{grad_check, GradCheckOptions};
use mti_core::graph::GROUP_NORM_EPS;
use mti_core::{Graph, ParamStore, Shape, Tensor};

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let k = ws.h;
    let oh = (xs.h + 2 * pad - k) / stride + 1;
    let ow = (xs.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b.at(0, o, 0, 0);
                    for i in 0..xs.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = (y * stride + ky) as isize - pad as isize;
                                let sx = (xx * stride + kx) as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < xs.h && (sx as usize) < xs.w {
                                    acc += w.at(o, i, ky, kx) * x.at(n, i, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    let idx = out.index(n, o, y, xx);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

fn conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
    let y = g.conv2d(x, w, b, stride, pad).unwrap();
    g.value(y).clone()
}

/// Half-pixel bilinear sampling with clamped borders.
fn upsample_oracle(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * f, s.w * f));
    let coord = |o: usize, len: usize| {
        let src = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, src - lo as f64)
    };
    for n in 0..s.n {
        for c in 0..s.c {
            for oy in 0..s.h * f {
                for ox in 0..s.w * f {
                    let (y0, y1, ty) = coord(oy, s.h);
                    let (x0, x1, tx) = coord(ox, s.w);
                    let v = (1.0 - ty) * ((1.0 - tx) * x.at(n, c, y0, x0) + tx * x.at(n, c, y0, x1))
                        + ty * ((1.0 - tx) * x.at(n, c, y1, x0) + tx * x.at(n, c, y1, x1));
                    let idx = out.index(n, c, oy, ox);
                    out.data_mut()[idx] = v;
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_matches_loop_oracle(
        n in 1usize..3, ci in 1usize..4, co in 1usize..4, h in 3usize..8, w in 3usize..8,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let x = random(Shape::new(n, ci, h, w), seed);
        let wt = random(Shape::new(co, ci, k, k), seed ^ 1);
        let b = random(Shape::new(1, co, 1, 1), seed ^ 2);
        let fast = conv(&x, &wt, &b, stride, pad);
        prop_assert!(max_diff(&fast, &conv_oracle(&x, &wt, &b, stride, pad)) <= 1e-12);
    }

    #[test]
    fn conv_is_linear(
        c in 1usize..4, h in 3usize..7, alpha in -2.0f64..2.0, beta in -2.0f64..2.0, seed in any::<u64>(),
    ) {
        let shape = Shape::new(1, c, h, h);
        let (x1, x2) = (random(shape, seed), random(shape, seed ^ 3));
        let wt = random(Shape::new(2, c, 3, 3), seed ^ 4);
        let zero = Tensor::zeros(Shape::new(1, 2, 1, 1));
        let mix = Tensor::from_vec(
            shape,
            x1.data().iter().zip(x2.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let lhs = conv(&mix, &wt, &zero, 1, 1);
        let (y1, y2) = (conv(&x1, &wt, &zero, 1, 1), conv(&x2, &wt, &zero, 1, 1));
        let rhs = Tensor::from_vec(
            lhs.shape(),
            y1.data().iter().zip(y2.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) <= 1e-12);
    }

    #[test]
    fn upsample_matches_oracle_and_keeps_constants(
        c in 1usize..3, h in 1usize..6, w in 1usize..6, f in prop::sample::select(vec![2usize, 4]),
        level in -3.0f64..3.0, seed in any::<u64>(),
    ) {
        let x = random(Shape::new(1, c, h, w), seed);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let k = g.input(Tensor::full(Shape::new(1, c, h, w), level));
        let up = g.upsample(xv, f).unwrap();
        let flat = g.upsample(k, f).unwrap();
        prop_assert!(max_diff(g.value(up), &upsample_oracle(&x, f)) <= 1e-12);
        prop_assert!(g.value(flat).data().iter().all(|&v| (v - level).abs() <= 1e-12));
    }

    #[test]
    fn concat_then_slice_recovers_parts(c1 in 1usize..4, c2 in 1usize..4, h in 1usize..5, seed in any::<u64>()) {
        let a = random(Shape::new(2, c1, h, h), seed);
        let b = random(Shape::new(2, c2, h, h), seed ^ 5);
        let mut g = Graph::new();
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        let cat = g.concat(&[av, bv]).unwrap();
        let ra = g.slice_channels(cat, 0, c1).unwrap();
        let rb = g.slice_channels(cat, c1, c2).unwrap();
        prop_assert_eq!(g.shape(cat).c, c1 + c2);
        prop_assert_eq!(g.value(ra).data(), a.data());
        prop_assert_eq!(g.value(rb).data(), b.data());
    }

    #[test]
    fn softmax_groups_is_a_distribution_across_chunks(
        groups in 1usize..5, cg in 1usize..4, h in 1usize..4, seed in any::<u64>(), shift in -50.0f64..50.0,
    ) {
        let shape = Shape::new(1, groups * cg, h, h);
        let x = random(shape, seed).map(|v| 4.0 * v);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let shifted = g.input(x.map(|v| v + shift));
        let s = g.softmax_groups(xv, groups).unwrap();
        let s2 = g.softmax_groups(shifted, groups).unwrap();
        let out = g.value(s).clone();
        for ch in 0..cg {
            for y in 0..h {
                for xx in 0..h {
                    let logits: Vec<f64> = (0..groups).map(|k| x.at(0, k * cg + ch, y, xx)).collect();
                    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for (k, l) in logits.iter().enumerate() {
                        let want = (l - m).exp() / z;
                        prop_assert!((out.at(0, k * cg + ch, y, xx) - want).abs() <= 1e-12);
                    }
                }
            }
        }
        prop_assert!(max_diff(&out, g.value(s2)) <= 1e-12);
    }

    #[test]
    fn group_norm_matches_oracle(groups in 1usize..4, cg in 1usize..4, h in 2usize..5, seed in any::<u64>()) {
        let c = groups * cg;
        let x = random(Shape::new(2, c, h, h), seed);
        let gamma = random(Shape::new(1, c, 1, 1), seed ^ 6);
        let beta = random(Shape::new(1, c, 1, 1), seed ^ 7);
        let mut g = Graph::new();
        let (xv, gv, bv) = (g.input(x.clone()), g.input(gamma.clone()), g.input(beta.clone()));
        let y = g.group_norm(xv, gv, bv, groups).unwrap();
        let out = g.value(y);
        for n in 0..2 {
            for gi in 0..groups {
                let vals: Vec<f64> = (gi * cg..(gi + 1) * cg)
                    .flat_map(|ch| x.plane(n, ch).to_vec())
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                for ch in gi * cg..(gi + 1) * cg {
                    for y in 0..h {
                        for xx in 0..h {
                            let want = gamma.at(0, ch, 0, 0) * (x.at(n, ch, y, xx) - mean)
                                / (var + GROUP_NORM_EPS).sqrt()
                                + beta.at(0, ch, 0, 0);
                            prop_assert!((out.at(n, ch, y, xx) - want).abs() <= 1e-10);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn global_avg_pool_is_the_plane_mean(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random(Shape::new(2, c, h, w), seed);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let p = g.global_avg_pool(xv);
        prop_assert_eq!(g.shape(p), Shape::new(2, c, 1, 1));
        for n in 0..2 {
            for ch in 0..c {
                let mean = x.plane(n, ch).iter().sum::<f64>() / (h * w) as f64;
                prop_assert!((g.value(p).at(n, ch, 0, 0) - mean).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn tensor_bytes_round_trip_exactly(n in 1usize..3, c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        let t = random(Shape::new(n, c, h, w), seed).map(|v| v * 1e300_f64.powf(v));
        let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn truncated_tensor_bytes_are_rejected(cut in 0usize..40, seed in any::<u64>()) {
        let bytes = random(Shape::new(1, 2, 2, 2), seed).to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Tensor::from_bytes(&bytes[..cut]).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn conv_gradients_agree_with_central_differences(
        ci in 1usize..4, co in 1usize..4, h in 3usize..7, stride in 1usize..3, seed in any::<u64>(),
    ) {
        let mut store = ParamStore::new(seed);
        let w = store.insert("w", random(Shape::new(co, ci, 3, 3), seed));
        let b = store.insert("b", random(Shape::new(1, co, 1, 1), seed ^ 8));
        let x = random(Shape::new(2, ci, h, h), seed ^ 9);
        let oh = (h + 2 - 3) / stride + 1;
        let weights = random(Shape::new(2, co, oh, oh), seed ^ 10);
        let report = grad_check(
            &mut store,
            |g, s| {
                let xv = g.input(x.clone());
                let (wv, bv) = (g.param(s, w), g.param(s, b));
                let y = g.conv2d(xv, wv, bv, stride, 1)?;
                g.weighted_sum(y, weights.clone())
            },
            &GradCheckOptions::default(),
        ).unwrap();
        prop_assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }
}
