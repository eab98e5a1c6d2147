use brainformer_tensor::{check_gradients, finite_diff_check, Coords, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn eval(f: impl FnOnce(&mut Tape) -> Var) -> Tensor {
    let mut tape = Tape::new();
    let v = f(&mut tape);
    tape.value(v).clone()
}

/// Naive seven-loop cross-correlation used as an independent oracle.
fn conv_oracle(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci_n, h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co_n, k1, k2, k3) = (k.shape()[0], k.shape()[2], k.shape()[3], k.shape()[4]);
    let oh = (h + 2 * pad - k1) / stride + 1;
    let ow = (w + 2 * pad - k2) / stride + 1;
    let od = (d + 2 * pad - k3) / stride + 1;
    let mut out = Tensor::zeros(&[co_n, oh, ow, od]).unwrap();
    for co in 0..co_n {
        for ox in 0..oh {
            for oy in 0..ow {
                for oz in 0..od {
                    let mut acc = 0.0;
                    for ci in 0..ci_n {
                        for a in 0..k1 {
                            for b in 0..k2 {
                                for c in 0..k3 {
                                    let ix = (ox * stride + a) as isize - pad as isize;
                                    let iy = (oy * stride + b) as isize - pad as isize;
                                    let iz = (oz * stride + c) as isize - pad as isize;
                                    if ix < 0 || iy < 0 || iz < 0 || ix >= h as isize || iy >= w as isize || iz >= d as isize {
                                        continue;
                                    }
                                    acc += k.get(&[co, ci, a, b, c]) * x.get(&[ci, ix as usize, iy as usize, iz as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[co, ox, oy, oz], acc);
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_hand_case() {
    let b = Tensor::randn(&[3, 5], 1.0, &mut rng(1)).unwrap();
    let out = eval(|tape| {
        let i = tape.constant(Tensor::eye(3).unwrap());
        let bv = tape.constant(b.clone());
        tape.matmul(i, bv).unwrap()
    });
    assert_eq!(out, b);

    let out = eval(|tape| {
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        tape.matmul(a, b).unwrap()
    });
    assert_eq!(out, t(&[2, 1], &[2.0, 4.0]));
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[2, 3]).unwrap());
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_gradcheck() {
    let mut r = rng(2);
    let a = Tensor::randn(&[3, 4], 1.0, &mut r).unwrap();
    let b = Tensor::randn(&[4, 2], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let m = tape.matmul(v[0], v[1])?;
            tape.sum(m)
        },
        &[a, b],
        1e-5,
        Coords::All,
    )
    .unwrap();
    for r in reports {
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}

#[test]
fn bmm_matches_per_batch_matmul_and_gradchecks() {
    let mut r = rng(3);
    let a = Tensor::randn(&[2, 3, 4], 1.0, &mut r).unwrap();
    let b = Tensor::randn(&[2, 4, 5], 1.0, &mut r).unwrap();
    let out = eval(|tape| {
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        tape.bmm(av, bv).unwrap()
    });
    for batch in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let expect: f64 = (0..4).map(|p| a.get(&[batch, i, p]) * b.get(&[batch, p, j])).sum();
                assert!((out.get(&[batch, i, j]) - expect).abs() < 1e-12);
            }
        }
    }
    let w = Tensor::randn(&[2, 3, 5], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let m = tape.bmm(v[0], v[1])?;
            let m = tape.mul(m, v[2])?;
            tape.sum(m)
        },
        &[a, b, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-6), "{reports:?}");
}

#[test]
fn conv3d_identity_and_summation_kernels() {
    let out = eval(|tape| {
        let x = tape.constant(Tensor::ones(&[1, 2, 2, 2]).unwrap());
        let k = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]).unwrap());
        tape.conv3d(x, k, 1, 0).unwrap()
    });
    assert_eq!(out, Tensor::ones(&[1, 2, 2, 2]).unwrap());

    let x = Tensor::randn(&[1, 3, 3, 3], 1.0, &mut rng(4)).unwrap();
    let out = eval(|tape| {
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]).unwrap());
        tape.conv3d(xv, k, 1, 0).unwrap()
    });
    assert_eq!(out.shape(), &[1, 1, 1, 1]);
    assert!((out.data()[0] - x.sum()).abs() < 1e-12);
}

#[test]
fn conv3d_matches_naive_oracle() {
    let mut r = rng(5);
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)] {
        let x = Tensor::randn(&[2, 5, 4, 6], 1.0, &mut r).unwrap();
        let k = Tensor::randn(&[3, 2, 3, 2, 3], 1.0, &mut r).unwrap();
        let out = eval(|tape| {
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            tape.conv3d(xv, kv, stride, pad).unwrap()
        });
        let expect = conv_oracle(&x, &k, stride, pad);
        assert_eq!(out.shape(), expect.shape());
        assert!(out.max_abs_diff(&expect) < 1e-12, "stride {stride} pad {pad}");
    }
}

#[test]
fn conv3d_rejects_oversized_kernel() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
    let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3, 3]).unwrap());
    assert!(matches!(tape.conv3d(x, k, 1, 0), Err(TensorError::Shape { .. })));
}

#[test]
fn conv3d_gradcheck() {
    let mut r = rng(6);
    let x = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut r).unwrap();
    let k = Tensor::randn(&[3, 2, 3, 3, 3], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[3, 4, 4, 4], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let y = tape.conv3d(v[0], v[1], 1, 1)?;
            let y = tape.mul(y, v[2])?;
            tape.sum(y)
        },
        &[x, k, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");
}

#[test]
fn conv3d_transpose_shape_law_and_zero_input() {
    let out = eval(|tape| {
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]).unwrap());
        let k = tape.constant(Tensor::randn(&[1, 3, 2, 2, 2], 1.0, &mut rng(7)).unwrap());
        tape.conv3d_transpose(x, k, 2).unwrap()
    });
    assert_eq!(out.shape(), &[3, 4, 4, 4]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv3d_transpose_is_adjoint_of_conv3d() {
    let mut r = rng(8);
    for &(stride, ksize, extent) in &[(1, 3, 5), (2, 2, 6), (2, 3, 7), (3, 3, 9)] {
        let x = Tensor::randn(&[2, extent, extent, extent], 1.0, &mut r).unwrap();
        let k = Tensor::randn(&[3, 2, ksize, ksize, ksize], 1.0, &mut r).unwrap();
        let ax = eval(|tape| {
            let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
            tape.conv3d(xv, kv, stride, 0).unwrap()
        });
        let y = Tensor::randn(ax.shape(), 1.0, &mut r).unwrap();
        let aty = eval(|tape| {
            let (yv, kv) = (tape.constant(y.clone()), tape.constant(k.clone()));
            tape.conv3d_transpose(yv, kv, stride).unwrap()
        });
        assert_eq!(aty.shape(), x.shape());
        let lhs: f64 = ax.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn conv3d_transpose_gradcheck() {
    let mut r = rng(9);
    let x = Tensor::randn(&[2, 2, 3, 2], 1.0, &mut r).unwrap();
    let k = Tensor::randn(&[2, 3, 2, 2, 2], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[3, 4, 6, 4], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let y = tape.conv3d_transpose(v[0], v[1], 2)?;
            let y = tape.mul(y, v[2])?;
            tape.sum(y)
        },
        &[x, k, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");
}

#[test]
fn layernorm_examples() {
    let ln = |x: Tensor, eps: f64| {
        let k = *x.shape().last().unwrap();
        eval(|tape| {
            let xv = tape.constant(x);
            let g = tape.constant(Tensor::ones(&[k]).unwrap());
            let b = tape.constant(Tensor::zeros(&[k]).unwrap());
            tape.layernorm(xv, g, b, eps).unwrap()
        })
    };
    let out = ln(t(&[1, 4], &[3.0; 4]), 1e-5);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let out = ln(t(&[1, 2], &[1.0, -1.0]), 1e-14);
    assert!(out.allclose(&t(&[1, 2], &[1.0, -1.0]), 1e-12));

    let x = Tensor::randn(&[4, 8], 3.0, &mut rng(10)).unwrap();
    let out = ln(x, 1e-12);
    for row in out.data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-7);
        assert!((var - 1.0).abs() < 1e-5);
    }
}

#[test]
fn layernorm_and_instance_norm_gradcheck() {
    let mut r = rng(11);
    let x = Tensor::randn(&[3, 6], 1.0, &mut r).unwrap();
    let g = Tensor::randn(&[6], 1.0, &mut r).unwrap();
    let b = Tensor::randn(&[6], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[3, 6], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let y = tape.layernorm(v[0], v[1], v[2], 1e-5)?;
            let y = tape.mul(y, v[3])?;
            tape.sum(y)
        },
        &[x, g, b, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");

    let x = Tensor::randn(&[2, 2, 3, 2], 1.0, &mut r).unwrap();
    let g = Tensor::randn(&[2], 1.0, &mut r).unwrap();
    let b = Tensor::randn(&[2], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[2, 2, 3, 2], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let y = tape.instance_norm(v[0], v[1], v[2], 1e-5)?;
            let y = tape.mul(y, v[3])?;
            tape.sum(y)
        },
        &[x, g, b, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");
}

#[test]
fn softmax_examples() {
    let sm = |x: Tensor, axis: usize| {
        eval(|tape| {
            let xv = tape.constant(x);
            tape.softmax(xv, axis).unwrap()
        })
    };
    let out = sm(t(&[5], &[0.7; 5]), 0);
    assert!(out.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

    let out = sm(t(&[2], &[0.0, 3f64.ln()]), 0);
    assert!(out.allclose(&t(&[2], &[0.25, 0.75]), 1e-15));

    let x = Tensor::randn(&[3, 4, 5], 2.0, &mut rng(12)).unwrap();
    let shifted = x.map(|v| v + 123.25);
    for axis in 0..3 {
        let a = sm(x.clone(), axis);
        let b = sm(shifted.clone(), axis);
        assert!(a.max_abs_diff(&b) < 1e-12);
    }
}

#[test]
fn softmax_gradcheck_along_inner_axis() {
    let mut r = rng(13);
    let x = Tensor::randn(&[3, 4, 2], 1.0, &mut r).unwrap();
    let w = Tensor::randn(&[3, 4, 2], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let y = tape.softmax(v[0], 1)?;
            let y = tape.mul(y, v[1])?;
            tape.sum(y)
        },
        &[x, w],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");
}

#[test]
fn elementwise_and_shape_ops_gradcheck() {
    let mut r = rng(14);
    let x = Tensor::randn(&[2, 3, 4], 0.5, &mut r).unwrap();
    let bias = Tensor::randn(&[3, 1], 0.5, &mut r).unwrap();
    let den = Tensor::uniform(&[4], 0.5, 2.0, &mut r).unwrap();
    let other = Tensor::randn(&[2, 3, 4], 1.0, &mut r).unwrap();
    let reports = check_gradients(
        |tape, v| {
            let a = tape.broadcast_add(v[0], v[1])?;
            let a = tape.div(a, v[2])?;
            let g = tape.gelu(a)?;
            let p = tape.permute(g, &[2, 0, 1])?;
            let p = tape.reshape(p, &[4, 6])?;
            let q = tape.reshape(v[3], &[4, 6])?;
            let m = tape.mul(p, q)?;
            let head = tape.narrow(m, 1, 1, 3)?;
            let tail = tape.narrow(m, 1, 0, 2)?;
            let c = tape.concat(&[head, tail, head], 1)?;
            let c = tape.relu(c)?;
            let c = tape.add_scalar(c, 0.5)?;
            let s = tape.sum_axis(c, 0)?;
            let s = tape.scale(s, 1.5)?;
            let s2 = tape.sub(s, s)?;
            let s = tape.add(s, s2)?;
            tape.mean(s)
        },
        &[x, bias, den, other],
        1e-5,
        Coords::All,
    )
    .unwrap();
    assert!(reports.iter().all(|r| r.max_rel_error < 1e-5), "{reports:?}");
}

#[test]
fn backward_trivial_cases() {
    let x = Tensor::randn(&[2, 3], 1.0, &mut rng(15)).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let s = tape.sum(xv).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(xv).unwrap(), &Tensor::ones(&[2, 3]).unwrap());

    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::scalar(3.0));
    let sq = tape.mul(xv, xv).unwrap();
    let grads = tape.backward(sq).unwrap();
    assert_eq!(grads.get(xv).unwrap().data(), &[6.0]);
}

#[test]
fn backward_usage_errors() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[3]).unwrap());
    assert!(matches!(tape.backward(x), Err(TensorError::Usage(_))));
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(TensorError::Usage(_))));
    assert!(matches!(tape.sum(x), Err(TensorError::Usage(_))));
}

#[test]
fn unused_leaves_get_zero_gradients_and_constants_none() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::ones(&[2]).unwrap());
    let unused = tape.leaf(Tensor::ones(&[4]).unwrap());
    let c = tape.constant(Tensor::ones(&[2]).unwrap());
    let y = tape.mul(x, c).unwrap();
    let s = tape.sum(y).unwrap();
    let grads = tape.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[4]).unwrap());
    assert!(grads.get(c).is_none());
}

#[test]
fn non_finite_results_fail_loudly() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::ones(&[2]).unwrap());
    let z = tape.constant(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.div(a, z), Err(TensorError::NonFinite { op: "div" })));
    let big = tape.constant(Tensor::full(&[2], 1e200).unwrap());
    assert!(matches!(tape.mul(big, big), Err(TensorError::NonFinite { .. })));
}

#[test]
fn finite_diff_check_examples() {
    let x = Tensor::randn(&[10], 1.0, &mut rng(16)).unwrap();
    let err = finite_diff_check(
        |tape, v| {
            let sq = tape.mul(v, v)?;
            tape.sum(sq)
        },
        &x,
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");

    let w = Tensor::randn(&[10], 1.0, &mut rng(17)).unwrap();
    for step in [1e-1, 1e-3, 1.0] {
        let err = finite_diff_check(
            |tape, v| {
                let c = tape.constant(w.clone());
                let p = tape.mul(v, c)?;
                tape.sum(p)
            },
            &x,
            step,
        )
        .unwrap();
        // rounding level: ~eps·|f| / step
        assert!(err < 1e-9, "linear map, step {step}: {err}");
    }

    // 1/x evaluated at a pole
    let at_pole = t(&[2], &[0.0, 1.0]);
    let res = finite_diff_check(
        |tape, v| {
            let one = tape.constant(Tensor::ones(&[2]).unwrap());
            let r = tape.div(one, v)?;
            tape.sum(r)
        },
        &at_pole,
        1e-4,
    );
    assert!(matches!(res, Err(TensorError::NonFinite { .. })));
}

#[test]
fn f32_tape_rounds_every_value() {
    let mut tape = Tape::with_precision(brainformer_tensor::Precision::F32);
    let x = tape.leaf(t(&[1], &[0.1]));
    let y = tape.scale(x, 3.0).unwrap();
    assert_eq!(tape.value(y).data()[0], ((0.1f32 as f64) * 3.0) as f32 as f64);
    assert_eq!(tape.value(y).precision(), brainformer_tensor::Precision::F32);
}
