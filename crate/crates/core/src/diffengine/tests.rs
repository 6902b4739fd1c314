use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Direct summation over the convolution definition, independent of im2col.
fn conv_oracle(x: &Array, w: &Array, b: Option<&Array>, sh: usize, sw: usize) -> Array {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let (ph, pw) = (kh / 2, kw / 2);
    let ho = (h + 2 * ph - kh) / sh + 1;
    let wo = wd / sw;
    let mut out = vec![0.0; n * o * ho * wo];
    for b_ in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for ic in 0..c {
                        for di in 0..kh {
                            let hh = (i * sh + di) as isize - ph as isize;
                            if hh < 0 || hh >= h as isize {
                                continue;
                            }
                            for dj in 0..kw {
                                let ww = ((j * sw + dj) as isize - pw as isize)
                                    .rem_euclid(wd as isize) as usize;
                                acc += w.data()[((oc * c + ic) * kh + di) * kw + dj]
                                    * x.data()[((b_ * c + ic) * h + hh as usize) * wd + ww];
                            }
                        }
                    }
                    out[((b_ * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Array::new(vec![n, o, ho, wo], out).unwrap()
}

#[test]
fn circular_shift_rotates() {
    let a = Array::vector(vec![1.0, 2.0, 3.0, 4.0]);
    assert_eq!(kernels::circular_shift(&a, 0, 1).data(), &[4.0, 1.0, 2.0, 3.0]);
    assert_eq!(kernels::circular_shift(&a, 0, -1).data(), &[2.0, 3.0, 4.0, 1.0]);
    assert_eq!(kernels::circular_shift(&a, 0, 4).data(), a.data());
}

#[test]
fn max_of_constant_routes_gradient_to_first_index() {
    let tape = Tape::new();
    let x = tape.param(Array::new(vec![2, 3], vec![5.0; 6]).unwrap()).unwrap();
    let m = tape.max_over_axis(x, 1).unwrap();
    assert_eq!(tape.value(m).unwrap().data(), &[5.0, 5.0]);
    let s = tape.sum(m).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn conv1d_with_offset_kernel_rotates_signal() {
    let tape = Tape::new();
    let x = tape
        .constant(Array::new(vec![1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap())
        .unwrap();
    let w = tape.constant(Array::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap()).unwrap();
    let y = tape.conv1d(x, w, None, 1).unwrap();
    let expected = conv_oracle(
        &Array::new(vec![1, 1, 1, 5], vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap(),
        &Array::new(vec![1, 1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap(),
        None,
        1,
        1,
    );
    assert_eq!(expected.data(), &[5.0, 1.0, 2.0, 3.0, 4.0]);
    assert_eq!(tape.value(y).unwrap().data(), expected.data());
}

#[test]
fn conv_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(sh, sw, kh, kw) in &[(1, 1, 3, 3), (2, 2, 3, 3), (1, 1, 1, 1), (2, 2, 1, 3), (1, 2, 3, 1)] {
        let x = random(&mut rng, &[2, 3, 7, 8]);
        let w = random(&mut rng, &[4, 3, kh, kw]);
        let b = random(&mut rng, &[4]);
        let spec = ConvSpec {
            stride_h: sh,
            stride_w: sw,
        };
        let got = kernels::conv_forward(&x, &w, Some(&b), spec).unwrap();
        let want = conv_oracle(&x, &w, Some(&b), sh, sw);
        assert_eq!(got.shape(), want.shape());
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn square_has_derivative_six_at_three() {
    let tape = Tape::new();
    let x = tape.param(Array::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 6.0);
}

#[test]
fn mean_squared_error_at_minimum_has_zero_gradient() {
    let tape = Tape::new();
    let v = Array::vector(vec![0.5, -1.5, 2.0]);
    let x = tape.param(v.clone()).unwrap();
    let y = tape.constant(v).unwrap();
    let d = tape.sub(x, y).unwrap();
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.mean(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_check_of_linear_function_is_exact() {
    let p = Array::vector(vec![0.3, -2.0, 7.5, 1e3]);
    let err = grad_check(|t, x| t.sum(x), &p, 1e-5).unwrap();
    // only rounding remains: ~eps·|f|/step
    assert!(err < 1e-7, "{err}");
}

#[test]
fn gradient_map_lists_exactly_the_params() {
    let tape = Tape::new();
    let a = tape.param(Array::scalar(1.0)).unwrap();
    let unused = tape.param(Array::vector(vec![1.0, 2.0])).unwrap();
    let c = tape.constant(Array::scalar(4.0)).unwrap();
    let y = tape.mul(a, c).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.len(), 2);
    assert_eq!(g.get(a).unwrap().item(), 4.0);
    assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn errors_are_structured() {
    let tape = Tape::new();
    let a = tape.param(Array::vector(vec![1.0, 2.0])).unwrap();
    let b = tape.param(Array::vector(vec![1.0, 2.0, 3.0])).unwrap();
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    let z = tape.constant(Array::vector(vec![0.0, 1.0])).unwrap();
    assert!(matches!(tape.div(a, z), Err(Error::NonFinite { .. })));
    assert!(matches!(
        tape.constant(Array::scalar(f64::NAN)),
        Err(Error::NonFinite { .. })
    ));
    let other = Tape::new();
    let foreign = other.param(Array::scalar(1.0)).unwrap();
    assert!(matches!(tape.neg(foreign), Err(Error::ForeignVar)));
    assert!(matches!(tape.backward(a), Err(Error::NotScalar(_))));
    let t2 = Tape::new();
    let s = other.sum(foreign).unwrap();
    assert!(matches!(t2.backward(s), Err(Error::ForeignVar)));
}

/// A composite expression exercising every primitive.
fn everything(t: &Tape, x: Var, mode: NormMode) -> crate::error::Result<Var> {
    // x: [2, 2, 4, 6]
    let w = t.constant(
        Array::new(
            vec![3, 2, 3, 3],
            (0..54).map(|i| ((i * 37 % 17) as f64 - 8.0) / 10.0).collect(),
        )
        .unwrap(),
    )?;
    let b = t.constant(Array::vector(vec![0.1, -0.2, 0.3]))?;
    let y = t.conv2d(x, w, Some(b), ConvSpec { stride_h: 2, stride_w: 2 })?;
    let gamma = t.constant(Array::vector(vec![1.1, 0.9, 1.3]))?;
    let beta = t.constant(Array::vector(vec![0.0, 0.2, -0.1]))?;
    let rm = [0.1, 0.0, -0.1];
    let rv = [1.0, 2.0, 0.5];
    let (y, _) = t.batch_norm(y, gamma, beta, mode, Some((&rm, &rv)), 1e-5)?;
    let y = t.activation(y, Activation::Tanh)?;
    let m = t.max_over_axis(y, 2)?; // [2, 3, 3]
    let up = t.upsample(m, 2, 2)?; // [2, 3, 6]
    let s = t.circular_shift(up, 2, 2)?;
    let xs = t.slice(x, 1, 0, 1)?; // [2, 1, 4, 6]
    let xm = t.max_over_axis(xs, 2)?; // [2, 1, 6]
    let cat = t.concat(&[s, xm], 1)?; // [2, 4, 6]
    let w1 = t.constant(
        Array::new(vec![2, 4, 3], (0..24).map(|i| ((i * 7 % 11) as f64 - 5.0) / 8.0).collect())
            .unwrap(),
    )?;
    let z = t.conv1d(cat, w1, None, 1)?;
    let z = t.activation(z, Activation::Softplus)?;
    let z2 = t.mul(z, z)?;
    let q = t.div(z2, t.offset(t.scale(z, 0.5)?, 2.0)?)?;
    let q = t.sub(q, t.neg(z)?)?;
    let f = t.scalar(1.7)?;
    let q = t.mul_scalar(q, f)?;
    let q = t.add_scalar(q, f)?;
    let target = t.constant(Array::full(&[2, 2, 6], 0.3))?;
    let r = t.reshape(q, &[2, 2, 6])?;
    let e1 = t.sq_err(r, target)?;
    let mask: Vec<bool> = (0..24).map(|i| i % 3 != 0).collect();
    let tgt: Vec<f64> = (0..24).map(|i| if i % 3 == 0 { f64::NAN } else { 0.1 * i as f64 }).collect();
    let e2 = t.masked_sq_err(r, &tgt, &mask)?;
    let m2 = t.mean(r)?;
    let tot = t.add(e1, e2)?;
    t.add(tot, m2)
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for mode in [NormMode::Train, NormMode::Eval] {
        for _ in 0..5 {
            let p = random(&mut rng, &[2, 2, 4, 6]);
            let err = grad_check(|t, x| everything(t, x, mode), &p, 1e-5).unwrap();
            assert!(err < 1e-5, "{mode:?}: {err}");
        }
    }
}

#[test]
fn recording_does_not_change_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random(&mut rng, &[2, 2, 4, 6]);
    let on = Tape::new();
    let x = on.param(p.clone()).unwrap();
    let a = everything(&on, x, NormMode::Train).unwrap();
    let off = Tape::inference();
    let y = off.constant(p).unwrap();
    let b = everything(&off, y, NormMode::Train).unwrap();
    assert_eq!(on.item(a).unwrap().to_bits(), off.item(b).unwrap().to_bits());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random(&mut rng, &[2, 2, 4, 6]);
    let grad_of = |which: u8| {
        let t = Tape::new();
        let x = t.param(p.clone()).unwrap();
        let l1 = everything(&t, x, NormMode::Train).unwrap();
        let l2 = t.sum(t.mul(x, x).unwrap()).unwrap();
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap().into_arrays().remove(0)
    };
    let (g1, g2, g12) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..g12.len() {
        let s = g1.data()[i] + g2.data()[i];
        assert!((g12.data()[i] - s).abs() <= 1e-12 * s.abs().max(1.0));
    }
}

/// Each primitive on 100 random instances.
#[test]
fn primitives_match_finite_differences_on_random_instances() {
    type Prim = fn(&Tape, Var) -> crate::error::Result<Var>;
    let prims: Vec<(&str, Vec<usize>, Prim)> = vec![
        ("add", vec![5], |t, x| {
            let y = t.scale(x, 0.7)?;
            let s = t.add(x, y)?;
            t.sum(t.mul(s, s)?)
        }),
        ("sub_div", vec![5], |t, x| {
            let d = t.offset(t.mul(x, x)?, 1.5)?;
            let q = t.div(x, d)?;
            t.sum(t.sub(q, t.neg(x)?)?)
        }),
        ("scalar_broadcast", vec![6], |t, x| {
            let s = t.slice(x, 0, 2, 1)?;
            let s = t.reshape(s, &[])?;
            let y = t.mul_scalar(x, s)?;
            t.sum(t.mul(t.add_scalar(y, s)?, x)?)
        }),
        ("tanh", vec![6], |t, x| t.sum(t.activation(x, Activation::Tanh)?)),
        ("softplus", vec![6], |t, x| t.sum(t.activation(x, Activation::Softplus)?)),
        ("shift", vec![3, 4], |t, x| {
            let s = t.circular_shift(x, 1, -2)?;
            t.sum(t.mul(s, t.circular_shift(x, 0, 1)?)?)
        }),
        ("concat_slice", vec![2, 5], |t, x| {
            let a = t.slice(x, 1, 1, 3)?;
            let b = t.slice(x, 1, 0, 2)?;
            let c = t.concat(&[a, b, a], 1)?;
            t.sum(t.mul(c, c)?)
        }),
        ("conv2d", vec![1, 2, 5, 4], |t, x| {
            let w = t.mul(t.slice(t.reshape(x, &[40])?, 0, 0, 36)?, t.constant(Array::full(&[36], 0.3))?)?;
            let w = t.reshape(w, &[2, 2, 3, 3])?;
            let y = t.conv2d(x, w, None, ConvSpec { stride_h: 2, stride_w: 2 })?;
            t.sum(t.mul(y, y)?)
        }),
        ("conv1d", vec![1, 2, 6], |t, x| {
            let w = t.reshape(t.slice(t.reshape(x, &[12])?, 0, 0, 12)?, &[2, 2, 3])?;
            let b = t.reshape(t.slice(t.reshape(x, &[12])?, 0, 3, 2)?, &[2])?;
            let y = t.conv1d(x, w, Some(b), 1)?;
            t.sum(t.activation(y, Activation::Tanh)?)
        }),
        ("batch_norm_train", vec![3, 2, 4], |t, x| {
            let g = t.reshape(t.slice(t.slice(x, 0, 0, 1)?, 2, 0, 1)?, &[2])?;
            let b = t.constant(Array::vector(vec![0.1, -0.3]))?;
            let (y, _) = t.batch_norm(x, g, b, NormMode::Train, None, 1e-5)?;
            let w = t.constant(Array::new(vec![3, 2, 4], (0..24).map(|i| (i as f64).sin()).collect()).unwrap())?;
            t.sum(t.mul(y, w)?)
        }),
        ("batch_norm_eval", vec![3, 2, 4], |t, x| {
            let g = t.reshape(t.slice(t.slice(x, 0, 1, 1)?, 2, 3, 1)?, &[2])?;
            let b = t.reshape(t.slice(t.slice(x, 0, 0, 1)?, 2, 0, 1)?, &[2])?;
            let (y, _) = t.batch_norm(x, g, b, NormMode::Eval, Some((&[0.2, -0.1], &[1.5, 0.7])), 1e-5)?;
            t.sum(t.mul(y, y)?)
        }),
        ("max_over_axis", vec![3, 7], |t, x| {
            let m = t.max_over_axis(x, 1)?;
            t.sum(t.mul(m, m)?)
        }),
        ("upsample", vec![2, 3], |t, x| {
            let u = t.upsample(x, 1, 2)?;
            let w = t.constant(Array::new(vec![2, 6], (0..12).map(|i| i as f64).collect()).unwrap())?;
            t.sum(t.mul(t.mul(u, u)?, w)?)
        }),
        ("reductions", vec![4, 2], |t, x| {
            let m = t.mean(t.mul(x, x)?)?;
            let y = t.constant(Array::full(&[4, 2], 0.25))?;
            let e = t.sq_err(x, y)?;
            let mask = [true, false, true, true, false, false, true, true];
            let tgt = [0.1, f64::NAN, -0.2, 0.3, f64::NAN, f64::NAN, 0.0, 1.0];
            let me = t.masked_sq_err(x, &tgt, &mask)?;
            t.add(t.add(m, e)?, me)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shape, f) in prims {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            // keep away from max-pool ties by drawing well-separated values
            let mut p = random(&mut rng, &shape);
            if name == "max_over_axis" {
                let n = p.len();
                let mut perm: Vec<usize> = (0..n).collect();
                for i in (1..n).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                for (i, v) in p.data_mut().iter_mut().enumerate() {
                    *v = perm[i] as f64 * 0.1;
                }
            }
            worst = worst.max(grad_check(f, &p, 1e-5).unwrap());
        }
        assert!(worst < 1e-5, "{name}: {worst}");
    }
}
