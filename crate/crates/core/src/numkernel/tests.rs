use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: &[&[f64]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(op(inputs) ⊙ weights)` on a fresh tape and compares every input
/// gradient against central differences.
fn grad_check<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights = random(&probe, &mut rng);
    let scalar = |tape: &mut Tape, out: Var| {
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars);
    let loss = scalar(&mut tape, out);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let numeric = finite_diff_grad(
            |xi| {
                let mut tape = Tape::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, x)| tape.constant(if j == i { xi.clone() } else { x.clone() }))
                    .collect();
                let out = build(&mut tape, &vars);
                let loss = scalar(&mut tape, out);
                tape.value(loss).item()
            },
            x,
            1e-5,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    worst
}

#[test]
fn matmul_identity_and_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = random(&[3, 4], &mut rng);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::eye(3));
    let bv = tape.constant(b.clone());
    let out = tape.matmul(i, bv).unwrap();
    assert_eq!(tape.value(out), &b);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let out = tape.matmul(z, bv).unwrap();
    assert_eq!(tape.value(out), &Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_hand_case() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = tape.constant(t(&[&[5.0], &[6.0]]));
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[1.0, 1.0, 1.0]));
    let y = tape.softmax(x);
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = tape.constant(Tensor::vector(&[0.0, std::f64::consts::LN_2]));
    let y = tape.softmax(x);
    let d = tape.value(y).data();
    assert!((d[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((d[1] - 2.0 / 3.0).abs() < 1e-15);

    let x = tape.constant(Tensor::vector(&[1000.0, 0.0]));
    let y = tape.softmax(x);
    let d = tape.value(y).data();
    assert!(d.iter().all(|v| v.is_finite()));
    assert!((d[0] - 1.0).abs() < 1e-12 && d[1] < 1e-300);
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));

    let x = tape.constant(Tensor::vector(&[4.0, 4.0]).reshape(&[1, 2]).unwrap());
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.constant(t(&[&[1.0, 3.0]]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    let d = tape.value(y).data();
    // population variance 1, so only eps separates the result from ±1
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((d[0] + expect).abs() < 1e-15 && (d[1] - expect).abs() < 1e-15);
    assert!((d[1] - 1.0).abs() < 1e-5);

    let g0 = tape.constant(Tensor::zeros(&[2]));
    let beta = tape.constant(Tensor::vector(&[0.5, -2.0]));
    let x = tape.constant(t(&[&[1.0, 3.0], &[7.0, -1.0]]));
    let y = tape.layer_norm(x, g0, beta, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, -2.0, 0.5, -2.0]);
}

#[test]
fn concat_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let prompt = tape.constant(random(&[1, 192], &mut rng));
    let set = tape.constant(random(&[36, 192], &mut rng));
    let out = tape.concat_rows(prompt, set).unwrap();
    assert_eq!(tape.value(out).shape(), &[37, 192]);

    let b = random(&[4, 3], &mut rng);
    let empty = tape.constant(Tensor::zeros(&[0, 3]));
    let bv = tape.constant(b.clone());
    let out = tape.concat_rows(empty, bv).unwrap();
    assert_eq!(tape.value(out), &b);
    let out = tape.concat_rows(bv, empty).unwrap();
    assert_eq!(tape.value(out), &b);

    let wrong = tape.constant(Tensor::zeros(&[1, 2]));
    assert!(matches!(
        tape.concat_rows(wrong, bv),
        Err(crate::Error::Dimension { .. })
    ));
}

#[test]
fn max_pool_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[&[1.0, 5.0]]));
    let y = tape.max_pool_rows(x, &[true]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0]);

    let x = tape.constant(t(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let y = tape.max_pool_rows(x, &[true, true]).unwrap();
    assert_eq!(tape.value(y).data(), &[3.0, 5.0]);

    let x = tape.constant(t(&[&[1.0, 5.0], &[9.0, 9.0]]));
    let y = tape.max_pool_rows(x, &[true, false]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 5.0]);

    assert!(matches!(
        tape.max_pool_rows(x, &[false, false]),
        Err(crate::Error::EmptySet(_))
    ));
}

#[test]
fn max_pool_ties_route_to_first_row() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[&[2.0, 1.0], &[2.0, 3.0], &[2.0, 3.0]]));
    let y = tape.max_pool_rows(x, &[true, true, true]).unwrap();
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0], 1e-8), 1.0);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0], 1e-8), 0.0);
    let c = cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 1e-8);
    assert!((c - 0.974_631_846_197_076_2).abs() < 1e-15);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0], 1e-8), 0.0);
}

fn weights_on_tape(tape: &mut Tape, c: usize, rng: &mut ChaCha8Rng) -> AttentionWeights {
    let mut lin = |tape: &mut Tape| {
        let w = tape.constant(random(&[c, c], rng));
        let b = tape.constant(random(&[c], rng));
        LinearVars::new(w, Some(b))
    };
    AttentionWeights {
        q: lin(tape),
        k: lin(tape),
        v: lin(tape),
        out: lin(tape),
    }
}

#[test]
fn mhsa_single_token_is_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let w = weights_on_tape(&mut tape, 4, &mut rng);
    let x = tape.constant(random(&[1, 4], &mut rng));
    let layout = SetLayout::new(1, 1, vec![true]).unwrap();
    let y = mhsa(&mut tape, x, &layout, &w, 2).unwrap();
    let v = w.v.apply(&mut tape, x).unwrap();
    let expect = w.out.apply(&mut tape, v).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-15);
}

#[test]
fn mhsa_identical_tokens_give_identical_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let w = weights_on_tape(&mut tape, 4, &mut rng);
    let row = random(&[1, 4], &mut rng);
    let x = tape.constant(Tensor::from_rows(&[row.data(), row.data()]).unwrap());
    let layout = SetLayout::new(1, 2, vec![true, true]).unwrap();
    let y = mhsa(&mut tape, x, &layout, &w, 1).unwrap();
    let out = tape.value(y);
    assert_eq!(out.row(0), out.row(1));
}

#[test]
fn mhsa_rejects_indivisible_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let w = weights_on_tape(&mut tape, 4, &mut rng);
    let x = tape.constant(random(&[2, 4], &mut rng));
    let layout = SetLayout::new(1, 2, vec![true, true]).unwrap();
    assert!(matches!(
        mhsa(&mut tape, x, &layout, &w, 3),
        Err(crate::Error::Config(_))
    ));
}

/// Straight-line single-head attention: softmax((xWqᵀ+bq)(xWkᵀ+bk)ᵀ/√C)(xWvᵀ+bv)
/// then the output projection.
fn brute_force_attention(x: &[[f64; 4]; 3], w: &[[[f64; 4]; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 3] {
    let proj = |m: usize, row: &[f64; 4]| {
        let mut o = [0.0; 4];
        for i in 0..4 {
            o[i] = b[m][i] + (0..4).map(|j| w[m][i][j] * row[j]).sum::<f64>();
        }
        o
    };
    let q: Vec<[f64; 4]> = x.iter().map(|r| proj(0, r)).collect();
    let k: Vec<[f64; 4]> = x.iter().map(|r| proj(1, r)).collect();
    let v: Vec<[f64; 4]> = x.iter().map(|r| proj(2, r)).collect();
    let mut out = [[0.0; 4]; 3];
    for i in 0..3 {
        let s: Vec<f64> = (0..3)
            .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() / 2.0)
            .collect();
        let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let mut mixed = [0.0; 4];
        for j in 0..3 {
            for c in 0..4 {
                mixed[c] += e[j] / z * v[j][c];
            }
        }
        out[i] = proj(3, &mixed);
    }
    out
}

#[test]
fn mhsa_matches_brute_force() {
    let x = [
        [0.1, -0.2, 0.3, 0.05],
        [-0.4, 0.25, 0.0, 0.15],
        [0.2, 0.1, -0.3, -0.1],
    ];
    let mut w = [[[0.0; 4]; 4]; 4];
    let mut b = [[0.0; 4]; 4];
    for m in 0..4 {
        for i in 0..4 {
            b[m][i] = 0.01 * (m as f64 + 1.0) - 0.02 * i as f64;
            for j in 0..4 {
                w[m][i][j] = ((m * 16 + i * 4 + j) as f64 * 0.37).sin() * 0.5;
            }
        }
    }
    let expect = brute_force_attention(&x, &w, &b);

    let mut tape = Tape::new();
    let mut lin = |m: usize| {
        let wt = Tensor::from_rows(&w[m]).unwrap();
        let wv = tape.constant(wt);
        let bv = tape.constant(Tensor::vector(&b[m]));
        LinearVars::new(wv, Some(bv))
    };
    let weights = AttentionWeights {
        q: lin(0),
        k: lin(1),
        v: lin(2),
        out: lin(3),
    };
    let xv = tape.constant(Tensor::from_rows(&x).unwrap());
    let layout = SetLayout::new(1, 3, vec![true; 3]).unwrap();
    let y = mhsa(&mut tape, xv, &layout, &weights, 1).unwrap();
    for i in 0..3 {
        for c in 0..4 {
            assert!((tape.value(y).at(i, c) - expect[i][c]).abs() < 1e-14);
        }
    }
}

#[test]
fn backward_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = random(&[2, 3], &mut rng);
    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let loss = tape.sum(x);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));

    let mut tape = Tape::new();
    let x = tape.param(x0.clone());
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq);
    let loss = tape.affine(s, 0.5, 0.0);
    let g = tape.backward(loss).unwrap();
    assert!(g.get(x).unwrap().max_abs_diff(&x0) < 1e-15);

    // replaying the reverse pass is bit-identical
    let again = tape.backward(loss).unwrap();
    assert_eq!(g.get(x), again.get(x));

    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
}

#[test]
fn finite_diff_examples() {
    let g = finite_diff_grad(|x| x.data().iter().map(|v| v * v).sum(), &Tensor::vector(&[1.0, 2.0]), 1e-5);
    assert!((g.data()[0] - 2.0).abs() < 1e-6 && (g.data()[1] - 4.0).abs() < 1e-6);

    let g = finite_diff_grad(|_| 3.0, &Tensor::vector(&[1.0, -2.0, 0.5]), 1e-5);
    assert!(g.data().iter().all(|v| v.abs() < 1e-8));

    // cross-entropy of softmax against class 1: analytic gradient softmax(z) − e1
    let z = [0.3, -1.2, 2.0];
    let ce = |x: &Tensor| {
        let d = x.data();
        let m = d.iter().copied().fold(f64::MIN, f64::max);
        let lse = m + d.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        lse - d[1]
    };
    let g = finite_diff_grad(ce, &Tensor::vector(&z), 1e-5);
    let e: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
    let s: f64 = e.iter().sum();
    for i in 0..3 {
        let analytic = e[i] / s - if i == 1 { 1.0 } else { 0.0 };
        assert!((g.data()[i] - analytic).abs() < 1e-5);
    }
}

#[test]
fn focal_loss_closed_form_at_zero_logits() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4, 3]));
    let targets: Arc<[f64]> = vec![0.0; 12].into();
    let loss = tape.focal_loss(x, targets, 0.25, 2.0, 1.0).unwrap();
    let expect = 12.0 * 0.75 * 0.25 * std::f64::consts::LN_2;
    assert!((tape.value(loss).item() - expect).abs() < 1e-15);
}

#[test]
fn gradient_checks_for_every_primitive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let w = random(&[5, 4], &mut rng);
    let bias = random(&[5], &mut rng);
    let gamma = random(&[4], &mut rng);
    let beta = random(&[4], &mut rng);
    let a2 = random(&[3, 4], &mut rng);

    let cases: Vec<(&str, f64)> = vec![
        ("matmul", grad_check(&[a.clone(), b.clone()], 1, |t, v| t.matmul(v[0], v[1]).unwrap())),
        ("linear", grad_check(&[a.clone(), w.clone(), bias.clone()], 2, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap())),
        ("mul", grad_check(&[a.clone(), a2.clone()], 3, |t, v| t.mul(v[0], v[1]).unwrap())),
        ("gelu", grad_check(&[a.clone()], 4, |t, v| t.gelu(v[0]))),
        ("softmax", grad_check(&[a.clone()], 5, |t, v| t.softmax(v[0]))),
        ("layer_norm", grad_check(&[a.clone(), gamma.clone(), beta.clone()], 6, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap())),
        ("concat", grad_check(&[a.clone(), a2.clone()], 7, |t, v| t.concat_rows(v[0], v[1]).unwrap())),
        ("gather", grad_check(&[a.clone()], 8, |t, v| {
            t.gather_rows(v[0], vec![Some(2), None, Some(0), Some(2)].into()).unwrap()
        })),
        ("segment_max", grad_check(&[a.clone()], 9, |t, v| t.segment_max(v[0], &[vec![0, 2], vec![1]]).unwrap())),
        ("cosine", grad_check(&[a.clone(), a2.clone()], 10, |t, v| t.cosine_rows(v[0], v[1], 1e-8).unwrap())),
        ("focal", grad_check(&[a.clone()], 11, |t, v| {
            let y: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
            t.focal_loss(v[0], y.into(), 0.25, 2.0, 3.0).unwrap()
        })),
        ("l1_rows", grad_check(&[a.clone()], 12, |t, v| {
            t.l1_rows(v[0], vec![2, 0].into(), vec![0.5; 8].into(), 2.0).unwrap()
        })),
        ("attention", grad_check(&[a.clone(), a2.clone(), random(&[3, 4], &mut ChaCha8Rng::seed_from_u64(70))], 13, |t, v| {
            let layout = SetLayout::new(1, 3, vec![true, true, false]).unwrap();
            t.attention(v[0], v[1], v[2], &layout, 2).unwrap()
        })),
    ];
    for (name, err) in cases {
        assert!(err < 1e-6, "{name}: max relative error {err:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn autograd_agrees_with_finite_differences(
        m in 1usize..=5, k in 1usize..=5, n in 1usize..=5, sets in 1usize..=2, seed in any::<u64>()
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = 2 * k;
        let x = random(&[sets * m, c], &mut rng);
        let wq = random(&[c, c], &mut rng);
        let wo = random(&[n, c], &mut rng);
        let gamma = random(&[n], &mut rng);
        let beta = random(&[n], &mut rng);
        let mut mask: Vec<bool> = (0..sets * m).map(|_| rng.random_bool(0.7)).collect();
        for s in 0..sets { mask[s * m] = true; }
        let err = grad_check(&[x, wq, wo, gamma, beta], seed, |t, v| {
            let layout = SetLayout::new(sets, m, mask.clone()).unwrap();
            let q = t.linear(v[0], v[1], None).unwrap();
            let a = t.attention(q, v[0], v[0], &layout, 2).unwrap();
            let o = t.linear(a, v[2], None).unwrap();
            let o = t.gelu(o);
            t.layer_norm(o, v[3], v[4], 1e-5).unwrap()
        });
        prop_assert!(err < 1e-4, "max relative error {err:e}");
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>(), spread in 0.1f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[rows, cols], (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv);
        for r in 0..rows {
            prop_assert!((tape.value(y).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_rows_are_centred(rows in 1usize..6, cols in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[rows, cols], &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::ones(&[cols]));
        let b = tape.constant(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(xv, g, b, 1e-5).unwrap();
        for r in 0..rows {
            let mean = tape.value(y).row(r).iter().sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn concat_then_slice_recovers_inputs(p in 0usize..5, q in 0usize..5, c in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[p, c], &mut rng);
        let b = random(&[q, c], &mut rng);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.concat_rows(av, bv).unwrap();
        prop_assert_eq!(&tape.value(out).slice_rows(0, p), &a);
        prop_assert_eq!(&tape.value(out).slice_rows(p, p + q), &b);
    }

    #[test]
    fn mhsa_is_permutation_equivariant(n in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, 4], &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() { perm.swap(i, rng.random_range(0..=i)); }
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
        mask[0] = true;
        let mut tape = Tape::new();
        let w = weights_on_tape(&mut tape, 4, &mut rng);
        let xv = tape.constant(x.clone());
        let y = mhsa(&mut tape, xv, &SetLayout::new(1, n, mask.clone()).unwrap(), &w, 2).unwrap();
        let px = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let pmask: Vec<bool> = perm.iter().map(|&p| mask[p]).collect();
        let pxv = tape.constant(px);
        let py = mhsa(&mut tape, pxv, &SetLayout::new(1, n, pmask).unwrap(), &w, 2).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                prop_assert!((tape.value(py).at(i, c) - tape.value(y).at(p, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mhsa_ignores_masked_content(n in 2usize..7, seed in any::<u64>(), junk in -1e6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[n, 4], &mut rng);
        let mut mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        mask[0] = true;
        let mut x2 = x.clone();
        for r in 0..n {
            if !mask[r] { x2.row_mut(r).fill(junk); }
        }
        let layout = SetLayout::new(1, n, mask.clone()).unwrap();
        let mut tape = Tape::new();
        let w = weights_on_tape(&mut tape, 4, &mut rng);
        let (a, b) = (tape.constant(x), tape.constant(x2));
        let ya = mhsa(&mut tape, a, &layout, &w, 2).unwrap();
        let yb = mhsa(&mut tape, b, &layout, &w, 2).unwrap();
        for r in (0..n).filter(|&r| mask[r]) {
            for c in 0..4 {
                prop_assert!((tape.value(ya).at(r, c) - tape.value(yb).at(r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_is_deterministic(n in 1usize..6, seed in any::<u64>()) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[n, 4], &mut rng);
            let mut tape = Tape::new();
            let w = weights_on_tape(&mut tape, 4, &mut rng);
            let xv = tape.constant(x);
            let y = mhsa(&mut tape, xv, &SetLayout::new(1, n, vec![true; n]).unwrap(), &w, 2).unwrap();
            tape.value(y).clone()
        };
        prop_assert_eq!(run(), run());
    }
}
