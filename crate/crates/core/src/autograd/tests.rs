use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    t64(shape, &v)
}

/// `sum(y ⊙ w)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let i = tape.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, i).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x).unwrap();
    for &p in tape.value(y).data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn gelu_at_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.gelu(x).unwrap();
    assert_eq!(tape.value(y).item(), 0.0);
}

#[test]
fn matmul_shape_error_names_op_and_shapes() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        AutogradError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![2, 3]
        }
    );
    assert!(err.to_string().contains("matmul"));
}

#[test]
fn strict_mode_rejects_non_finite_inputs() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[2], &[1.0, f64::NAN]));
    assert_eq!(
        tape.exp(x).unwrap_err(),
        AutogradError::NonFinite { op: "exp" }
    );

    let mut lenient = Tape::<f64>::with_options(TapeOptions {
        record: true,
        strict: false,
    });
    let x = lenient.constant(t64(&[2], &[1.0, f64::NAN]));
    assert!(lenient.exp(x).is_ok());
}

#[test]
fn square_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t64(&[1], &[3.0]));
    let sq = tape.mul(w, w).unwrap();
    let root = tape.sum(sq).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[6.0]);
}

#[test]
fn backward_from_constant_has_no_lineage() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::scalar(2.0));
    assert_eq!(tape.backward(c).unwrap_err(), AutogradError::NoLineage);
    let d = tape.scale(c, 3.0).unwrap();
    assert_eq!(tape.backward(d).unwrap_err(), AutogradError::NoLineage);
}

#[test]
fn backward_rejects_non_scalar_root() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t64(&[2], &[1.0, 2.0]));
    let y = tape.scale(w, 2.0).unwrap();
    assert_eq!(
        tape.backward(y).unwrap_err(),
        AutogradError::NonScalarRoot(vec![2])
    );
}

#[test]
fn strict_double_backward_errors_and_lenient_accumulates() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t64(&[1], &[3.0]));
    let sq = tape.mul(w, w).unwrap();
    let root = tape.sum(sq).unwrap();
    tape.backward(root).unwrap();
    assert_eq!(
        tape.backward(root).unwrap_err(),
        AutogradError::AlreadyBackpropagated
    );
    tape.reset_grads();
    tape.backward(root).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[6.0]);

    let mut lenient = Tape::<f64>::with_options(TapeOptions {
        record: true,
        strict: false,
    });
    let w = lenient.param(t64(&[1], &[3.0]));
    let sq = lenient.mul(w, w).unwrap();
    let root = lenient.sum(sq).unwrap();
    lenient.backward(root).unwrap();
    lenient.backward(root).unwrap();
    assert_eq!(lenient.grad(w).unwrap(), &[12.0]);
}

#[test]
fn constants_never_receive_gradients() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t64(&[2], &[1.0, -1.0]));
    let c = tape.constant(t64(&[2], &[2.0, 5.0]));
    let y = tape.mul(w, c).unwrap();
    let root = tape.sum(y).unwrap();
    tape.backward(root).unwrap();
    assert!(tape.grad(c).is_none());
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 5.0]);
}

#[test]
fn every_reachable_requires_grad_tensor_gets_a_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.param(t64(&[2, 2], &[0.5, -0.3, 0.2, 0.9]));
    let x = tape.constant(t64(&[1, 2], &[1.0, 2.0]));
    let h = tape.matmul(x, w).unwrap();
    let a = tape.gelu(h).unwrap();
    // relu-like dead branch: multiply by zeros still yields a populated grad
    let z = tape.constant(Tensor::zeros(&[1, 2]));
    let dead = tape.mul(a, z).unwrap();
    let root = tape.sum(dead).unwrap();
    tape.backward(root).unwrap();
    for v in [w, h, a, dead, root] {
        assert!(tape.grad(v).is_some(), "{v:?} missing grad");
    }
}

#[test]
fn backward_visits_each_op_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random_tensor(&mut rng, &[3, 4], -1.0, 1.0));
    let mut cur = x;
    let n_ops = 25;
    for i in 0..n_ops - 1 {
        cur = match i % 3 {
            0 => tape.gelu(cur).unwrap(),
            1 => tape.scale(cur, 0.9).unwrap(),
            _ => tape.mul(cur, x).unwrap(),
        };
    }
    let root = tape.sum(cur).unwrap();
    assert_eq!(tape.op_count(), n_ops);
    let report = tape.backward(root).unwrap();
    assert_eq!(report.visited_ops, n_ops);
}

#[test]
fn recording_off_gives_identical_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, &[4, 6], -2.0, 2.0);
    let w = random_tensor(&mut rng, &[6, 6], -1.0, 1.0);
    let g = random_tensor(&mut rng, &[6], 0.5, 1.5);
    let b = random_tensor(&mut rng, &[6], -0.5, 0.5);
    let run = |tape: &mut Tape<f64>| {
        let xs = tape.param(x.clone());
        let ws = tape.param(w.clone());
        let gs = tape.param(g.clone());
        let bs = tape.param(b.clone());
        let h = tape.matmul(xs, ws).unwrap();
        let n = tape.layer_norm(h, gs, bs, 1e-5).unwrap();
        let a = tape.gelu(n).unwrap();
        let att = tape
            .causal_attention(a, a, n, &[(0, 3), (3, 1)], 2)
            .unwrap();
        let s = tape.log_softmax(att).unwrap();
        tape.value(s).clone()
    };
    let recorded = run(&mut Tape::new());
    let plain = run(&mut Tape::no_grad());
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&recorded), bits(&plain));
}

#[test]
fn finite_diff_of_sum_is_exact() {
    let x = t64(&[2, 3], &[0.3, -1.2, 4.0, 2.5, 0.0, -7.0]);
    let err = finite_diff_check(|tape, v| tape.sum(v), &x, 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn finite_diff_rejects_zero_epsilon() {
    let x = t64(&[1], &[1.0]);
    assert_eq!(
        finite_diff_check(|tape, v| tape.sum(v), &x, 0.0).unwrap_err(),
        AutogradError::BadEpsilon(0.0)
    );
}

#[test]
fn finite_diff_rejects_non_finite_objective() {
    let x = t64(&[1], &[-1.0]);
    let err = finite_diff_check(
        |tape, v| {
            let l = tape.log(v)?;
            tape.sum(l)
        },
        &x,
        1e-5,
    )
    .unwrap_err();
    assert_eq!(err, AutogradError::NonFiniteObjective);
}

fn mlp_layer(tape: &mut Tape<f64>, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    let h = tape.add(h, b)?;
    tape.gelu(h)
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let inputs = vec![
        random_tensor(&mut rng, &[4, 5], -1.0, 1.0),
        random_tensor(&mut rng, &[5, 6], -0.8, 0.8),
        random_tensor(&mut rng, &[6], -0.2, 0.2),
        random_tensor(&mut rng, &[6, 6], -0.8, 0.8),
        random_tensor(&mut rng, &[6], -0.2, 0.2),
        random_tensor(&mut rng, &[6, 3], -0.8, 0.8),
        random_tensor(&mut rng, &[3], -0.2, 0.2),
    ];
    let err = finite_diff_check_many(
        |tape, v| {
            let h = mlp_layer(tape, v[0], v[1], v[2])?;
            let h = mlp_layer(tape, h, v[3], v[4])?;
            let o = tape.matmul(h, v[5])?;
            let o = tape.add(o, v[6])?;
            weighted_sum(tape, o, 5)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn two_layer_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 4], -1.0, 1.0),
        random_tensor(&mut rng, &[4, 8], -1.0, 1.0),
        random_tensor(&mut rng, &[8, 5], -1.0, 1.0),
    ];
    let err = finite_diff_check_many(
        |tape, v| {
            let h = tape.matmul(v[0], v[1])?;
            let h = tape.gelu(h)?;
            let logits = tape.matmul(h, v[2])?;
            let lp = tape.log_softmax(logits)?;
            let picked = tape.pick(lp, &[(0, 1), (1, 4), (2, 0)])?;
            let s = tape.sum(picked)?;
            tape.scale(s, -1.0 / 3.0)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "max relative error {err}");
}

#[derive(Clone, Copy, Debug)]
enum UnaryCase {
    Gelu,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Softplus,
    Scale,
    Reshape,
    Slice,
    GatherRows,
    Pick,
    Max0,
    Max1,
    Sum0,
    Sum1,
    Sum,
}

fn unary_case() -> impl Strategy<Value = UnaryCase> {
    prop_oneof![
        Just(UnaryCase::Gelu),
        Just(UnaryCase::Softmax),
        Just(UnaryCase::LogSoftmax),
        Just(UnaryCase::Log),
        Just(UnaryCase::Exp),
        Just(UnaryCase::Softplus),
        Just(UnaryCase::Scale),
        Just(UnaryCase::Reshape),
        Just(UnaryCase::Slice),
        Just(UnaryCase::GatherRows),
        Just(UnaryCase::Pick),
        Just(UnaryCase::Max0),
        Just(UnaryCase::Max1),
        Just(UnaryCase::Sum0),
        Just(UnaryCase::Sum1),
        Just(UnaryCase::Sum),
    ]
}

fn apply_unary(tape: &mut Tape<f64>, case: UnaryCase, x: Var) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let (r, c) = (shape[0], shape[1]);
    match case {
        UnaryCase::Gelu => tape.gelu(x),
        UnaryCase::Softmax => tape.softmax(x),
        UnaryCase::LogSoftmax => tape.log_softmax(x),
        UnaryCase::Log => tape.log(x),
        UnaryCase::Exp => tape.exp(x),
        UnaryCase::Softplus => tape.softplus(x),
        UnaryCase::Scale => tape.scale(x, -1.7),
        UnaryCase::Reshape => tape.reshape(x, &[r * c]),
        UnaryCase::Slice => tape.slice(x, r / 2, r),
        UnaryCase::GatherRows => tape.gather_rows(x, &[r - 1, 0, r - 1]),
        UnaryCase::Pick => tape.pick(x, &[(0, c - 1), (r - 1, 0), (0, c - 1)]),
        UnaryCase::Max0 => tape.max_over_axis(x, 0),
        UnaryCase::Max1 => tape.max_over_axis(x, 1),
        UnaryCase::Sum0 => tape.sum_over_axis(x, 0),
        UnaryCase::Sum1 => tape.sum_over_axis(x, 1),
        UnaryCase::Sum => tape.sum(x),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn unary_ops_match_finite_differences(
        case in unary_case(),
        rows in 1usize..4,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // log needs a positive domain; everything else is checked on both signs
        let (lo, hi) = if matches!(case, UnaryCase::Log) { (0.5, 3.0) } else { (-2.0, 2.0) };
        let x = random_tensor(&mut rng, &[rows, cols], lo, hi);
        let err = finite_diff_check(
            |tape, v| {
                let y = apply_unary(tape, case, v)?;
                weighted_sum(tape, y, seed ^ 0x5eed)
            },
            &x,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{case:?}: {err}");
    }

    #[test]
    fn binary_ops_match_finite_differences(
        which in 0usize..6,
        rows in 1usize..4,
        inner in 1usize..5,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[rows, inner], -2.0, 2.0);
        let b = match which {
            0 => random_tensor(&mut rng, &[inner, cols], -2.0, 2.0),
            1 => random_tensor(&mut rng, &[cols, inner], -2.0, 2.0),
            5 => random_tensor(&mut rng, &[inner], -2.0, 2.0),
            _ => random_tensor(&mut rng, &[rows, inner], -2.0, 2.0),
        };
        let err = finite_diff_check_many(
            |tape, v| {
                let y = match which {
                    0 => tape.matmul(v[0], v[1])?,
                    1 => tape.matmul_nt(v[0], v[1])?,
                    2 => tape.add(v[0], v[1])?,
                    3 => tape.sub(v[0], v[1])?,
                    4 => tape.mul(v[0], v[1])?,
                    _ => tape.add(v[0], v[1])?,
                };
                weighted_sum(tape, y, seed ^ 0xb1)
            },
            &[a, b],
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "binary op {which}: {err}");
    }

    #[test]
    fn structured_ops_match_finite_differences(
        heads in 1usize..3,
        head_dim in 1usize..4,
        lens in proptest::collection::vec(1usize..4, 1..3),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * head_dim;
        let n: usize = lens.iter().sum();
        let mut segments = Vec::new();
        let mut start = 0;
        for &l in &lens {
            segments.push((start, l));
            start += l;
        }
        let vocab = 5;
        let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
        let inputs = vec![
            random_tensor(&mut rng, &[vocab, d], -1.0, 1.0),
            random_tensor(&mut rng, &[d], 0.5, 1.5),
            random_tensor(&mut rng, &[d], -0.5, 0.5),
            random_tensor(&mut rng, &[d, d], -1.0, 1.0),
            random_tensor(&mut rng, &[d, d], -1.0, 1.0),
        ];
        let err = finite_diff_check_many(
            |tape, v| {
                let e = tape.embedding(v[0], &ids)?;
                let ln = tape.layer_norm(e, v[1], v[2], 1e-5)?;
                let q = tape.matmul(ln, v[3])?;
                let k = tape.matmul_nt(ln, v[4])?;
                let att = tape.causal_attention(q, k, e, &segments, heads)?;
                weighted_sum(tape, att, seed ^ 0xa7)
            },
            &inputs,
            1e-5,
        ).unwrap();
        prop_assert!(err < 1e-4, "{err}");
    }
}

#[test]
fn layer_norm_alone_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let inputs = vec![
        random_tensor(&mut rng, &[3, 7], -2.0, 2.0),
        random_tensor(&mut rng, &[7], 0.5, 1.5),
        random_tensor(&mut rng, &[7], -0.5, 0.5),
    ];
    let err = finite_diff_check_many(
        |tape, v| {
            let y = tape.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(tape, y, 99)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn attention_rows_outside_segment_are_independent() {
    // Two segments must not see each other: changing segment two leaves
    // segment one's output untouched.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = random_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let mut q2 = q.clone();
    for j in 0..4 {
        q2.data_mut()[3 * 4 + j] += 1.0;
    }
    let run = |q: &Tensor<f64>| {
        let mut tape = Tape::<f64>::no_grad();
        let v = tape.constant(q.clone());
        let out = tape
            .causal_attention(v, v, v, &[(0, 2), (2, 2)], 2)
            .unwrap();
        tape.value(out).data()[..8].to_vec()
    };
    assert_eq!(run(&q), run(&q2));
}

#[test]
fn causal_attention_ignores_future_positions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_tensor(&mut rng, &[3, 2], -1.0, 1.0);
    let mut x2 = x.clone();
    x2.data_mut()[4] += 3.0;
    x2.data_mut()[5] -= 1.0;
    let run = |x: &Tensor<f64>| {
        let mut tape = Tape::<f64>::no_grad();
        let v = tape.constant(x.clone());
        let out = tape.causal_attention(v, v, v, &[(0, 3)], 1).unwrap();
        tape.value(out).data()[..4].to_vec()
    };
    assert_eq!(run(&x), run(&x2));
}

#[test]
fn tensor_rejects_inconsistent_shapes() {
    assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::<f32>::new(vec![0, 2], vec![]).is_err());
}
