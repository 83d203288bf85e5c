//! Finite-difference checks for every differentiable tape operation.

use hyperformer_core::tensor::{AttentionSpec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

/// Norm-wise relative error between analytic and central-difference
/// gradients, for each input.
fn check<F>(inputs: Vec<Tensor>, f: F) -> Vec<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut errs = Vec::new();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        errs.push(if scale == 0.0 { 0.0 } else { diff / scale });
    }
    errs
}

fn assert_below(errs: &[f64], tol: f64, what: &str) {
    for (i, e) in errs.iter().enumerate() {
        assert!(*e < tol, "{what}: input {i} relative error {e:e} >= {tol:e}");
    }
}

/// Weighted sum so that every output element has a distinct cotangent.
fn weighted_sum(tape: &mut Tape, x: Var) -> Var {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w: Vec<f64> = (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect();
    let w = tape.constant(Tensor::new(shape, w).unwrap());
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_sum_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let errs = check(vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        t.sum(m).unwrap()
    });
    assert_below(&errs, 1e-6, "matmul");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 5], &mut rng);
    let b = random(&[3, 5], &mut rng);
    let errs = check(vec![a.clone(), b.clone()], |t, v| {
        let x = t.add(v[0], v[1]).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "add");
    let errs = check(vec![a.clone(), b], |t, v| {
        let x = t.mul(v[0], v[1]).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "mul");
    let errs = check(vec![a.clone()], |t, v| {
        let x = t.gelu(v[0]).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "gelu");
    let errs = check(vec![a.clone()], |t, v| {
        let x = t.relu(v[0]).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "relu");
    let errs = check(vec![a.clone()], |t, v| {
        let x = t.scale(v[0], -1.7).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "scale");
    let errs = check(vec![a], |t, v| {
        let x = t.transpose(v[0]).unwrap();
        let x = t.reshape(x, &[15]).unwrap();
        weighted_sum(t, x)
    });
    assert_below(&errs, 1e-4, "transpose+reshape");
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 6], &mut rng);
    let v = random(&[6], &mut rng);
    let errs = check(vec![x.clone(), v.clone()], |t, vs| {
        let y = t.add_bias(vs[0], vs[1]).unwrap();
        weighted_sum(t, y)
    });
    assert_below(&errs, 1e-4, "add_bias");
    let errs = check(vec![x, v], |t, vs| {
        let y = t.scale_last_dim(vs[0], vs[1]).unwrap();
        weighted_sum(t, y)
    });
    assert_below(&errs, 1e-4, "scale_last_dim");
}

#[test]
fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let errs = check(
        vec![random(&[5, 8], &mut rng), random(&[8], &mut rng), random(&[8], &mut rng)],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(t, y)
        },
    );
    assert_below(&errs, 1e-4, "layer_norm");
}

#[test]
fn normalized_output_is_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(random(&[8], &mut rng));
    let y = tape.normalize(x).unwrap();
    let d = tape.value(y).data();
    let mean = d.iter().sum::<f64>() / 8.0;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
    assert!(mean.abs() < 1e-4);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn gather_concat_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let errs = check(vec![random(&[5, 3], &mut rng), random(&[2], &mut rng)], |t, v| {
        let rows = t.gather_rows(v[0], &[4, 1, 4, 0]).unwrap();
        let flat = t.reshape(rows, &[12]).unwrap();
        let c = t.concat(&[flat, v[1]]).unwrap();
        weighted_sum(t, c)
    });
    assert_below(&errs, 1e-4, "gather+concat");
}

#[test]
fn attention_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = AttentionSpec {
        batch: 2,
        query_len: 3,
        key_len: 4,
        heads: 2,
        key_valid: Some(vec![true, true, true, false, true, true, false, false]),
        causal: false,
    };
    let errs = check(
        vec![random(&[6, 4], &mut rng), random(&[8, 4], &mut rng), random(&[8, 4], &mut rng)],
        |t, v| {
            let y = t.attention(v[0], v[1], v[2], spec.clone()).unwrap();
            weighted_sum(t, y)
        },
    );
    assert_below(&errs, 1e-4, "cross attention");

    let causal = AttentionSpec {
        batch: 1,
        query_len: 4,
        key_len: 4,
        heads: 2,
        key_valid: None,
        causal: true,
    };
    let errs = check(vec![random(&[4, 4], &mut rng)], |t, v| {
        let y = t.attention(v[0], v[0], v[0], causal.clone()).unwrap();
        weighted_sum(t, y)
    });
    assert_below(&errs, 1e-4, "causal self attention");
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&[2, 5], &mut rng);
    let targets = [Some(3), Some(0)];
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = tape.softmax_cross_entropy(l, &targets).unwrap();

    let mut oracle = 0.0;
    for (r, t) in targets.iter().enumerate() {
        let row = &logits.data()[r * 5..(r + 1) * 5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        oracle += lse - row[t.unwrap()];
    }
    oracle /= 2.0;
    assert!((tape.value(loss).item() - oracle).abs() < 1e-10);

    let errs = check(vec![logits], |t, v| {
        t.softmax_cross_entropy(v[0], &[Some(1), None]).unwrap()
    });
    assert_below(&errs, 1e-4, "cross entropy");
}

#[test]
fn padding_rows_do_not_contribute() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let logits = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let l = tape.variable(logits);
    let loss = tape.softmax_cross_entropy(l, &[Some(1), None, Some(2)]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.get(l).unwrap()[4..8].iter().all(|&v| v == 0.0));
}

/// Backward through a three-op chain equals the product of the per-op
/// Jacobians, each built column by column from finite differences.
#[test]
fn chain_matches_numerical_jacobian_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x0 = random(&[2, 3], &mut rng);
    let w = random(&[3, 3], &mut rng);
    let eval_chain = |x: &Tensor, upto: usize| -> Vec<f64> {
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let wv = t.constant(w.clone());
        let a = t.matmul(xv, wv).unwrap();
        if upto == 1 {
            return t.value(a).data().to_vec();
        }
        let b = t.gelu(a).unwrap();
        if upto == 2 {
            return t.value(b).data().to_vec();
        }
        let c = t.normalize(b).unwrap();
        t.value(c).data().to_vec()
    };
    let jacobian = |f: &dyn Fn(&Tensor) -> Vec<f64>, at: &Tensor| -> Vec<Vec<f64>> {
        let n_out = f(at).len();
        let mut jac = vec![vec![0.0; at.len()]; n_out];
        for j in 0..at.len() {
            let mut p = at.clone();
            p.data_mut()[j] += STEP;
            let mut m = at.clone();
            m.data_mut()[j] -= STEP;
            let (fp, fm) = (f(&p), f(&m));
            for i in 0..n_out {
                jac[i][j] = (fp[i] - fm[i]) / (2.0 * STEP);
            }
        }
        jac
    };
    let a = Tensor::new(vec![2, 3], eval_chain(&x0, 1)).unwrap();
    let b = Tensor::new(vec![2, 3], {
        let mut t = Tape::new();
        let av = t.constant(a.clone());
        let bv = t.gelu(av).unwrap();
        t.value(bv).data().to_vec()
    })
    .unwrap();
    let j1 = jacobian(&|x| eval_chain(x, 1), &x0);
    let j2 = jacobian(
        &|x| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let g = t.gelu(v).unwrap();
            t.value(g).data().to_vec()
        },
        &a,
    );
    let j3 = jacobian(
        &|x| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let g = t.normalize(v).unwrap();
            t.value(g).data().to_vec()
        },
        &b,
    );
    let cot: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
    // vᵀ J3 J2 J1
    let vjp = |v: &[f64], j: &[Vec<f64>]| -> Vec<f64> {
        (0..j[0].len()).map(|c| (0..v.len()).map(|r| v[r] * j[r][c]).sum()).collect()
    };
    let numeric = vjp(&vjp(&vjp(&cot, &j3), &j2), &j1);

    let mut t = Tape::new();
    let xv = t.variable(x0.clone());
    let wv = t.constant(w.clone());
    let a = t.matmul(xv, wv).unwrap();
    let b = t.gelu(a).unwrap();
    let c = t.normalize(b).unwrap();
    let cv = t.constant(Tensor::new(vec![2, 3], cot).unwrap());
    let p = t.mul(c, cv).unwrap();
    let s = t.sum(p).unwrap();
    let g = t.backward(s).unwrap();
    for (an, nu) in g.get(xv).unwrap().iter().zip(&numeric) {
        assert!((an - nu).abs() <= 1e-6 * (1.0 + nu.abs()), "{an} vs {nu}");
    }
}

#[test]
fn repeated_forward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let a = t.constant(random(&[7, 5], &mut rng));
        let b = t.constant(random(&[5, 9], &mut rng));
        let c = t.matmul(a, b).unwrap();
        let d = t.gelu(c).unwrap();
        let e = t.normalize(d).unwrap();
        t.value(e).clone()
    };
    assert_eq!(run().data(), run().data());
}
