use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Central-difference check of `build` for every input entry. `build` maps
/// the input leaf to a scalar output on a fresh tape.
fn check_gradient(
    input: &Tensor<f64>,
    build: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> f64 {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), input.clone());
    let y = build(&mut tape, x).unwrap();
    let grads = tape.backward(y).unwrap();
    let g = grads.get_or_zeros(ParamId(0), input.rows(), input.cols());
    let eval = |t: &Tensor<f64>| {
        let mut tape = Tape::new();
        let x = tape.constant(t.clone());
        let y = build(&mut tape, x).unwrap();
        tape.scalar_value(y)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..input.len() {
        let mut plus = input.clone();
        plus.data_mut()[k] += h;
        let mut minus = input.clone();
        minus.data_mut()[k] -= h;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
        let an = g.data()[k];
        worst = worst.max((fd - an).abs() / an.abs().max(1.0));
    }
    worst
}

/// Runs `check_gradient` on 100 random inputs drawn from `[lo, hi)`.
fn check_op(
    name: &str,
    lo: f64,
    hi: f64,
    rows: usize,
    cols: usize,
    build: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(0xAD);
    for trial in 0..100 {
        let input = rand_tensor(&mut rng, rows, cols, lo, hi);
        let err = check_gradient(&input, build);
        assert!(err < 1e-6, "{name}: trial {trial} rel err {err}");
    }
}

/// Weighted sum with fixed distinct weights so every output entry matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let (r, c) = tape.value(y).shape();
    let w = Tensor::new(r, c, (0..r * c).map(|k| 0.3 + 0.17 * k as f64).collect())?;
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[test]
fn unary_rules_match_finite_differences() {
    type Build = fn(&mut Tape<f64>, Var) -> Result<Var>;
    let cases: Vec<(&str, f64, f64, Build)> = vec![
        ("neg", -2.0, 2.0, |t, x| t.neg(x)),
        ("exp", -2.0, 2.0, |t, x| t.exp(x)),
        ("log", 0.1, 3.0, |t, x| t.log(x)),
        ("sin", -3.0, 3.0, |t, x| t.sin(x)),
        ("cos", -3.0, 3.0, |t, x| t.cos(x)),
        ("sqrt", 0.1, 3.0, |t, x| t.sqrt(x)),
        ("abs", 0.05, 2.0, |t, x| t.abs(x)),
        ("abs-neg", -2.0, -0.05, |t, x| t.abs(x)),
        ("relu", 0.05, 2.0, |t, x| t.relu(x)),
        ("relu-neg", -2.0, -0.05, |t, x| t.relu(x)),
        ("softplus", -30.0, 30.0, |t, x| t.softplus(x)),
        ("sigmoid", -8.0, 8.0, |t, x| t.sigmoid(x)),
        ("tanh", -3.0, 3.0, |t, x| t.tanh(x)),
        ("scale", -2.0, 2.0, |t, x| t.scale(x, -1.75)),
        ("shift", -2.0, 2.0, |t, x| t.shift(x, 0.5)),
        ("one_minus", -2.0, 2.0, |t, x| t.one_minus(x)),
        ("clamp_min", -2.0, 2.0, |t, x| t.clamp_min(x, 0.0)),
        ("cumsum", -2.0, 2.0, |t, x| t.cumsum_exclusive(x)),
    ];
    for (name, lo, hi, f) in cases {
        check_op(name, lo, hi, 3, 4, &|t, x| {
            let y = f(t, x)?;
            weighted_sum(t, y)
        });
    }
}

#[test]
fn binary_rules_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let other = rand_tensor(&mut rng, 3, 4, 0.5, 2.0);
    type Bin2 = fn(&mut Tape<f64>, Var, Var) -> Result<Var>;
    let ops: Vec<(&str, Bin2)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    for (name, f) in ops {
        // tensor on the left, constant tensor on the right
        let o = other.clone();
        check_op(name, 0.5, 2.0, 3, 4, &move |t, x| {
            let c = t.constant(o.clone());
            let y = f(t, x, c)?;
            weighted_sum(t, y)
        });
        // tensor on the right
        let o = other.clone();
        check_op(name, 0.5, 2.0, 3, 4, &move |t, x| {
            let c = t.constant(o.clone());
            let y = f(t, c, x)?;
            weighted_sum(t, y)
        });
        // scalar broadcast on either side
        let other = other.clone();
        check_op(name, 0.5, 2.0, 1, 1, &move |t, x| {
            let c = t.constant(other.clone());
            let y = f(t, c, x)?;
            let z = f(t, x, y)?;
            weighted_sum(t, z)
        });
    }
}

#[test]
fn structural_rules_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_tensor(&mut rng, 4, 3, -1.0, 1.0);
    let b = rand_tensor(&mut rng, 1, 3, -1.0, 1.0);
    let col = rand_tensor(&mut rng, 6, 1, -1.0, 1.0);
    let wm = w.clone();
    check_op("matmul-left", -1.0, 1.0, 6, 4, &move |t, x| {
        let w = t.constant(wm.clone());
        let y = t.matmul(x, w)?;
        weighted_sum(t, y)
    });
    let lhs = rand_tensor(&mut rng, 5, 6, -1.0, 1.0);
    check_op("matmul-right", -1.0, 1.0, 6, 4, &move |t, x| {
        let a = t.constant(lhs.clone());
        let y = t.matmul(a, x)?;
        weighted_sum(t, y)
    });
    let (wa, ba) = (w.clone(), b.clone());
    check_op("affine-x", -1.0, 1.0, 6, 4, &move |t, x| {
        let w = t.constant(wa.clone());
        let b = t.constant(ba.clone());
        let y = t.affine(x, w, b)?;
        weighted_sum(t, y)
    });
    let xa = rand_tensor(&mut rng, 6, 4, -1.0, 1.0);
    let (xb, bb) = (xa.clone(), b.clone());
    check_op("affine-w", -1.0, 1.0, 4, 3, &move |t, w| {
        let x = t.constant(xb.clone());
        let b = t.constant(bb.clone());
        let y = t.affine(x, w, b)?;
        weighted_sum(t, y)
    });
    let wc = w.clone();
    check_op("affine-b", -1.0, 1.0, 1, 3, &move |t, b| {
        let x = t.constant(xa.clone());
        let w = t.constant(wc.clone());
        let y = t.affine(x, w, b)?;
        weighted_sum(t, y)
    });
    let c1 = col.clone();
    check_op("scale_rows-x", -1.0, 1.0, 6, 3, &move |t, x| {
        let s = t.constant(c1.clone());
        let y = t.scale_rows(x, s)?;
        weighted_sum(t, y)
    });
    let m = rand_tensor(&mut rng, 6, 3, -1.0, 1.0);
    check_op("scale_rows-s", -1.0, 1.0, 6, 1, &move |t, s| {
        let x = t.constant(m.clone());
        let y = t.scale_rows(x, s)?;
        weighted_sum(t, y)
    });
    check_op("sum_cols", -1.0, 1.0, 6, 3, &|t, x| {
        let y = t.sum_cols(x)?;
        weighted_sum(t, y)
    });
    check_op("segment_sum", -1.0, 1.0, 6, 2, &|t, x| {
        let y = t.segment_sum(x, 3)?;
        weighted_sum(t, y)
    });
    check_op("mean", -1.0, 1.0, 6, 2, &|t, x| {
        let y = t.mean(x)?;
        let y2 = t.mul(y, y)?;
        t.sum(y2)
    });
    check_op("concat+slice", -1.0, 1.0, 4, 3, &|t, x| {
        let a = t.slice_cols(x, 1, 3)?;
        let e = t.exp(x)?;
        let y = t.concat(&[a, e, x])?;
        weighted_sum(t, y)
    });
    check_op("reshape", -1.0, 1.0, 4, 3, &|t, x| {
        let y = t.reshape(x, 2, 6)?;
        let y = t.cumsum_exclusive(y)?;
        weighted_sum(t, y)
    });
    check_op("gather_rows", -1.0, 1.0, 4, 3, &|t, x| {
        let y = t.gather_rows(x, &[3, 0, 0, 2])?;
        weighted_sum(t, y)
    });
}

#[test]
fn two_layer_mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, 5, 3, -1.0, 1.0);
    let w1 = rand_tensor(&mut rng, 3, 8, -1.0, 1.0);
    let b1 = rand_tensor(&mut rng, 1, 8, -0.5, 0.5);
    let w2 = rand_tensor(&mut rng, 8, 2, -1.0, 1.0);
    let b2 = rand_tensor(&mut rng, 1, 2, -0.5, 0.5);
    let target = rand_tensor(&mut rng, 5, 2, 0.0, 1.0);
    let params = [w1, b1, w2, b2];
    let loss = |tape: &mut Tape<f64>, vars: &[Var]| -> Result<Var> {
        let xin = tape.constant(x.clone());
        let h = tape.affine(xin, vars[0], vars[1])?;
        let h = tape.tanh(h)?;
        let o = tape.affine(h, vars[2], vars[3])?;
        let o = tape.sigmoid(o)?;
        let t = tape.constant(target.clone());
        let d = tape.sub(o, t)?;
        let d2 = tape.mul(d, d)?;
        tape.mean(d2)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| tape.param(ParamId(i), p.clone()))
        .collect();
    let out = loss(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    for (pi, p) in params.iter().enumerate() {
        let g = grads.get(ParamId(pi)).unwrap();
        for k in 0..p.len() {
            let eval = |delta: f64| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = params
                    .iter()
                    .enumerate()
                    .map(|(i, q)| {
                        let mut q = q.clone();
                        if i == pi {
                            q.data_mut()[k] += delta;
                        }
                        tape.constant(q)
                    })
                    .collect();
                let out = loss(&mut tape, &vars).unwrap();
                tape.scalar_value(out)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = g.data()[k];
            assert!((fd - an).abs() / an.abs().max(1.0) < 1e-6);
        }
    }
}

#[test]
fn analytic_values_and_gradients() {
    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::scalar(3.0f64));
    let y = tape.mul(x, x).unwrap();
    assert_eq!(tape.scalar_value(y), 9.0);
    let g = tape.backward(y).unwrap();
    assert!((g.get(ParamId(0)).unwrap().item() - 6.0).abs() < 1e-12);

    let mut tape = Tape::new();
    let x = tape.param(ParamId(0), Tensor::scalar(0.0));
    let s = tape.sigmoid(x).unwrap();
    assert_eq!(tape.scalar_value(s), 0.5);
    let sp = tape.softplus(x).unwrap();
    assert!((tape.scalar_value(sp) - std::f64::consts::LN_2).abs() < 1e-12);
    let g = tape.backward(s).unwrap();
    assert!((g.get(ParamId(0)).unwrap().item() - 0.25).abs() < 1e-12);

    let mut tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::filled(7, 3, 1.0));
    let s = tape.sum(ones).unwrap();
    assert_eq!(tape.scalar_value(s), 21.0);
}

#[test]
fn softplus_is_stable_for_large_inputs() {
    assert_eq!(softplus(1000.0f64), 1000.0);
    assert!(softplus(-1000.0f64) >= 0.0);
    assert!((softplus_inverse(softplus(0.7f64)) - 0.7).abs() < 1e-12);
}

#[test]
fn invalid_operands_are_domain_errors() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::from_rows(&[[1.0, 0.0]]));
    let one = tape.constant(Tensor::from_rows(&[[1.0, 1.0]]));
    assert!(matches!(tape.log(z), Err(Error::Domain(_))));
    assert!(matches!(tape.div(one, z), Err(Error::Domain(_))));
    let neg = tape.scalar(-1.0);
    assert!(tape.sqrt(neg).is_err());
    let a = tape.constant(Tensor::zeros(2, 3));
    let b = tape.constant(Tensor::zeros(3, 2));
    assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    assert!(tape.matmul(a, a).is_err());
    let tape2 = tape;
    assert!(tape2.backward(a).is_err());
}

#[test]
fn linearity_of_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x0 = rand_tensor(&mut rng, 4, 2, -1.0, 1.0);
    type F = fn(&mut Tape<f64>, Var) -> Result<Var>;
    let f: F = |t, x| {
        let s = t.sin(x)?;
        t.sum(s)
    };
    let g: F = |t, x| {
        let e = t.exp(x)?;
        let p = t.mul(e, x)?;
        t.mean(p)
    };
    let grad_of = |build: &dyn Fn(&mut Tape<f64>, Var) -> Result<Var>| {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), x0.clone());
        let y = build(&mut tape, x).unwrap();
        tape.backward(y).unwrap().get(ParamId(0)).unwrap().clone()
    };
    let (a, b) = (2.5, -0.75);
    let combined = grad_of(&|t, x| {
        let fx = f(t, x)?;
        let gx = g(t, x)?;
        let fa = t.scale(fx, a)?;
        let gb = t.scale(gx, b)?;
        t.add(fa, gb)
    });
    let gf = grad_of(&f);
    let gg = grad_of(&g);
    for k in 0..x0.len() {
        let expect = a * gf.data()[k] + b * gg.data()[k];
        assert!((combined.data()[k] - expect).abs() < 1e-12);
    }
}

#[test]
fn repeated_parameter_use_accumulates() {
    let mut tape = Tape::new();
    let x1 = tape.param(ParamId(0), Tensor::scalar(2.0));
    let x2 = tape.param(ParamId(0), Tensor::scalar(2.0));
    let y = tape.mul(x1, x2).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(ParamId(0)).unwrap().item(), 4.0);
}

#[test]
fn gradients_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand_tensor(&mut rng, 600, 8, -1.0, 1.0);
        let w = rand_tensor(&mut rng, 8, 8, -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let wv = tape.param(ParamId(0), w);
        let y = tape.matmul(xv, wv).unwrap();
        let y = tape.tanh(y).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap().get(ParamId(0)).unwrap().clone()
    };
    assert_eq!(run(), run());
}
