use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Uncorrelated linear read-out so every output coordinate matters.
fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var, Error> {
    let w = random(tape.value(y).shape(), seed, -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

#[test]
fn product_rule() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(3.0));
    let y = t.leaf(Tensor::scalar(4.0));
    let z = t.mul(x, y).unwrap();
    let g = t.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0]);
    assert_eq!(g.get(y).unwrap(), &[3.0]);
}

#[test]
fn log_and_half_rectify_derivatives() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::scalar(2.0));
    let l = t.log(x).unwrap();
    assert_eq!(t.backward(l).unwrap().get(x).unwrap(), &[0.5]);

    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let h = t.half_rectify(x);
    let s = t.sum(h);
    assert_eq!(t.backward(s).unwrap().get(x).unwrap(), &[0.0, 1.0, 0.0]);
}

#[test]
fn log_of_non_positive_is_domain_error() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
    assert!(matches!(t.log(x), Err(Error::Domain { .. })));
}

#[test]
fn mismatched_shapes_report_both() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(vec![2, 3]));
    let b = t.leaf(Tensor::zeros(vec![2]));
    match t.add(a, b) {
        Err(Error::Shape { expected, actual, .. }) => {
            assert_eq!(expected, "[2, 3]");
            assert_eq!(actual, "[2]");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn broadcasting_reduces_gradient() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::ones(vec![2, 3]));
    let b = t.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let c = t.mul(a, b).unwrap();
    let s = t.sum(c);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(b).unwrap(), &[2.0, 2.0, 2.0]);
    assert_eq!(g.get(a).unwrap(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn one_by_one_conv_doubles() {
    let x = random(&[1, 5, 5], 1, -1.0, 1.0);
    let mut t = Tape::new();
    let xv = t.leaf(x.clone());
    let k = t.constant(Tensor::full(vec![1, 1, 1, 1], 2.0));
    let y = t.conv2d(xv, k, None, Conv2dSpec { stride: 1, padding: 0 }).unwrap();
    for (a, b) in t.value(y).data().iter().zip(x.data()) {
        assert_eq!(*a, 2.0 * b);
    }
    let s = t.sum(y);
    assert!(t.backward(s).unwrap().get(xv).unwrap().iter().all(|&g| g == 2.0));
}

/// Direct 2-D cross-correlation, written independently of the tape kernel.
fn naive_conv(x: &Tensor, k: &Tensor, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kk) = (k.shape()[0], k.shape()[2]);
    let oh = (h + 2 * pad - kk) / stride + 1;
    let ow = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; o * oh * ow];
    for oc in 0..o {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..c {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += k.data()[((oc * c + ic) * kk + ky) * kk + kx]
                                * x.data()[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_forward_matches_direct_loops() {
    for (stride, pad, size) in [(1, 1, 8), (2, 1, 8), (2, 1, 7), (2, 0, 9), (1, 0, 5)] {
        let x = random(&[3, size, size], 2, -1.0, 1.0);
        let k = random(&[4, 3, 3, 3], 3, -1.0, 1.0);
        let b = [0.1, -0.2, 0.3, 0.0];
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let kv = t.constant(k.clone());
        let bv = t.constant(Tensor::new(vec![4], b.to_vec()).unwrap());
        let y = t.conv2d(xv, kv, Some(bv), Conv2dSpec { stride, padding: pad }).unwrap();
        let expected = naive_conv(&x, &k, &b, stride, pad);
        for (a, e) in t.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let x = random(&[2, 8, 8], 4, -1.0, 1.0);
    let k = random(&[3, 2, 3, 3], 5, -1.0, 1.0);
    let spec = Conv2dSpec { stride: 2, padding: 1 };
    let kc = k.clone();
    let wrt_x = finite_diff_check(
        |t, v| {
            let kv = t.constant(kc.clone());
            let y = t.conv2d(v, kv, None, spec)?;
            Ok(t.sum(y))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(wrt_x.max_rel_error < 1e-6, "{}", wrt_x.max_rel_error);

    let xc = x.clone();
    let wrt_k = finite_diff_check(
        |t, v| {
            let xv = t.constant(xc.clone());
            let y = t.conv2d(xv, v, None, spec)?;
            weighted_sum(t, y, 6)
        },
        &k,
        1e-5,
    )
    .unwrap();
    assert!(wrt_k.max_rel_error < 1e-6, "{}", wrt_k.max_rel_error);
}

#[test]
fn bilinear_sample_at_pixel_center_is_identity() {
    let img = random(&[4, 5], 7, 0.0, 1.0);
    let mut t = Tape::new();
    let v = t.leaf(img.clone());
    let s = t.bilinear_sample(v, vec![[2.0, 3.0], [0.0, 0.0], [4.0, 3.0]], &[3]).unwrap();
    assert_eq!(t.value(s).data(), &[img.data()[3 * 5 + 2], img.data()[0], img.data()[3 * 5 + 4]]);
}

#[test]
fn bilinear_backward_splats_by_weight() {
    let mut t = Tape::new();
    let v = t.leaf(Tensor::zeros(vec![2, 2]));
    let s = t.bilinear_sample(v, vec![[0.25, 0.5]], &[1]).unwrap();
    let l = t.sum(s);
    let g = t.backward(l).unwrap();
    let g = g.get(v).unwrap();
    let expected = [0.75 * 0.5, 0.25 * 0.5, 0.75 * 0.5, 0.25 * 0.5];
    for (a, e) in g.iter().zip(expected) {
        assert!((a - e).abs() < 1e-15);
    }
}

#[test]
fn upsample_block_gradient_is_block_area() {
    let c = 3;
    let mut t = Tape::new();
    let v = t.leaf(random(&[2, 2], 8, 0.0, 1.0));
    let u = t.upsample(v, c).unwrap();
    // one c x c block: rows 0..c, cols c..2c -> source cell (0, 1)
    let idx: Vec<usize> = (0..c).flat_map(|y| (c..2 * c).map(move |x| y * 2 * c + x)).collect();
    let block = t.gather(u, &idx).unwrap();
    let s = t.sum(block);
    let g = t.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[0.0, (c * c) as f64, 0.0, 0.0]);
}

#[test]
fn upsample_block_gradient_agrees_with_finite_differences() {
    let x = random(&[3, 3], 9, 0.0, 1.0);
    let check = finite_diff_check(
        |t, v| {
            let u = t.upsample(v, 4)?;
            let idx: Vec<usize> = (4..8).flat_map(|y| (0..4).map(move |x| y * 12 + x)).collect();
            let b = t.gather(u, &idx)?;
            Ok(t.sum(b))
        },
        &x,
        1e-5,
    )
    .unwrap();
    // cells other than (1, 0) have zero gradient on both sides
    assert!((check.analytic[3] - 16.0).abs() < 1e-12);
    assert!((check.numeric[3] - 16.0).abs() < 1e-6);
    assert!(check.max_rel_error < 1e-6);
}

#[test]
fn ste_ops_have_hard_forward_and_identity_backward() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![4], vec![0.7, 0.5, 0.3, 1.9]).unwrap());
    let th = t.ste_threshold(x);
    let fl = t.ste_floor(x);
    assert_eq!(t.value(th).data(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(t.value(fl).data(), &[0.0, 0.0, 0.0, 1.0]);
    let s1 = weighted_sum(&mut t, th, 10).unwrap();
    let g1 = t.backward(s1).unwrap();
    let w = random(&[4], 10, -1.0, 1.0);
    assert_eq!(g1.get(x).unwrap(), w.data());
    let s2 = t.sum(fl);
    assert_eq!(t.backward(s2).unwrap().get(x).unwrap(), &[1.0; 4]);
}

#[test]
fn sum_gives_ones_and_fan_out_accumulates() {
    let mut t = Tape::new();
    let x = t.leaf(random(&[6], 11, -1.0, 1.0));
    let s = t.sum(x);
    assert!(t.backward(s).unwrap().get(x).unwrap().iter().all(|&g| g == 1.0));

    // loss = sum(y * y) + sum(3 y) with y = 2x  ->  dL/dx = 2 * (2y + 3)
    let mut t = Tape::new();
    let xv = random(&[5], 12, -1.0, 1.0);
    let x = t.leaf(xv.clone());
    let y = t.scale(x, 2.0);
    let yy = t.mul(y, y).unwrap();
    let a = t.sum(yy);
    let y3 = t.scale(y, 3.0);
    let b = t.sum(y3);
    let l = t.add(a, b).unwrap();
    let g = t.backward(l).unwrap();
    for (gi, xi) in g.get(x).unwrap().iter().zip(xv.data()) {
        assert!((gi - 2.0 * (4.0 * xi + 3.0)).abs() < 1e-12);
    }
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(t.backward(x), Err(Error::Contract(_))));
}

#[test]
fn constant_leaf_gets_zero_gradient() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::ones(vec![3]));
    let c = t.constant(Tensor::ones(vec![3]));
    let unrelated = t.leaf(Tensor::ones(vec![2]));
    let p = t.mul(x, c).unwrap();
    let s = t.sum(p);
    let g = t.backward(s).unwrap();
    assert!(g.get(c).is_none());
    assert_eq!(g.wrt(&t, unrelated).data(), &[0.0, 0.0]);
    assert!(!t.is_tracked(c));
}

#[test]
fn max_ties_route_to_first_index() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::new(vec![4], vec![1.0, 3.0, 3.0, 2.0]).unwrap());
    let m = t.max(x).unwrap();
    assert_eq!(t.value(m).item(), 3.0);
    assert_eq!(t.backward(m).unwrap().get(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn sum_of_squares_is_fd_exact() {
    let x = random(&[10], 13, -2.0, 2.0);
    let c = finite_diff_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(c.max_rel_error < 1e-8, "{}", c.max_rel_error);
}

type UnaryCase = (&'static str, fn(&mut Tape, Var) -> Result<Var, Error>);

fn smooth_primitives() -> Vec<UnaryCase> {
    vec![
        ("log", |t, v| t.log(v)),
        ("exp", |t, v| Ok(t.exp(v))),
        ("sigmoid", |t, v| Ok(t.sigmoid(v))),
        ("softplus", |t, v| Ok(t.softplus(v))),
        ("scale", |t, v| Ok(t.scale(v, -1.7))),
        ("shift", |t, v| Ok(t.shift(v, 0.3))),
        ("mul_self", |t, v| t.mul(v, v)),
        ("div", |t, v| {
            let e = t.exp(v);
            t.div(v, e)
        }),
        ("sub_broadcast", |t, v| {
            let m = t.mean(v);
            t.sub(v, m)
        }),
        ("reshape_slice_stack", |t, v| {
            let r = t.reshape(v, &[4, 3])?;
            let a = t.slice(r, 1, 3)?;
            let b = t.slice(r, 0, 2)?;
            let s = t.stack(&[a, b])?;
            t.mul(s, s)
        }),
        ("gather", |t, v| {
            let g = t.gather(v, &[0, 5, 5, 11, 2])?;
            t.mul(g, g)
        }),
        ("upsample", |t, v| {
            let r = t.reshape(v, &[3, 4])?;
            let u = t.upsample(r, 2)?;
            t.mul(u, u)
        }),
        ("bilinear", |t, v| {
            let r = t.reshape(v, &[3, 4])?;
            t.bilinear_sample(r, vec![[0.3, 0.7], [2.5, 1.25], [3.0, 2.0], [1.9, 0.1]], &[2, 2])
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn smooth_primitives_match_finite_differences(seed in any::<u64>()) {
        let x = random(&[12], seed, 0.2, 2.0);
        for (name, op) in smooth_primitives() {
            let c = finite_diff_check(
                |t, v| {
                    let y = op(t, v)?;
                    weighted_sum(t, y, seed ^ 0x5eed)
                },
                &x,
                1e-5,
            )
            .unwrap();
            prop_assert!(c.max_rel_error < 1e-6, "{} rel error {}", name, c.max_rel_error);
        }
    }

    #[test]
    fn fan_in_accumulation_is_order_independent(seed in any::<u64>(), n in 2usize..8) {
        // sum of n scaled copies of x, recorded in two different orders
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ks: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x0 = random(&[4], seed, -1.0, 1.0);
        let grad = |order: &[usize]| {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let mut acc = None;
            for &i in order {
                let s = t.scale(x, ks[i]);
                acc = Some(match acc {
                    None => s,
                    Some(a) => t.add(a, s).unwrap(),
                });
            }
            let l = t.sum(acc.unwrap());
            t.backward(l).unwrap().get(x).unwrap().to_vec()
        };
        let forward: Vec<usize> = (0..n).collect();
        let reversed: Vec<usize> = (0..n).rev().collect();
        for (a, b) in grad(&forward).iter().zip(grad(&reversed)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
