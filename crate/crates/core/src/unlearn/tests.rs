use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{finite_diff_check_many, Tape, Tensor};
use crate::evalkit::{memorization, memorization_many};
use crate::microlm::{
    bind_params, forward, init_model, train_memorization, CandidateQuery, ForwardSpec,
    Intervention, ModelConfig, ModelState, ParamKey, ParamRole, TrainConfig,
};
use crate::worldgen::{generate_world, Dataset, GraphConfig, QAItem, WorldConfig};

fn tiny_world() -> Dataset {
    let cfg = WorldConfig {
        graph: GraphConfig {
            n_famous: 30,
            n_background: 60,
            n_relations: 4,
            ..Default::default()
        },
        fractions: [0.2, 0.2, 0.5],
        ..Default::default()
    };
    generate_world(&cfg, 3).unwrap().dataset
}

fn tiny_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 32,
        max_seq_len: 8,
        seed: 11,
    }
}

/// Tiny world and a model trained to memorize all of it.
fn memorized() -> &'static (Dataset, ModelState<f64>) {
    static CELL: OnceLock<(Dataset, ModelState<f64>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let ds = tiny_world();
        let mut m = init_model::<f64>(&tiny_config(ds.vocab.size())).unwrap();
        let pairs = ds.training_pairs();
        let monitor: Vec<(CandidateQuery, usize)> = ds
            .clusters
            .iter()
            .map(|c| {
                (
                    CandidateQuery {
                        question: &c.base.question,
                        candidates: &c.base.candidates,
                    },
                    c.base.answer,
                )
            })
            .collect();
        let tc = TrainConfig {
            lr: 1e-2,
            batch_size: 16,
            max_epochs: 200,
            target_accuracy: 1.0,
            consolidation_epochs: 5,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = train_memorization(&mut m, &pairs, &monitor, &tc, &mut rng, |_| {}).unwrap();
        assert!(r.reached_target, "{r:?}");
        (ds, m)
    })
}

fn base_items<'a>(ds: &'a Dataset, ids: &'a [String]) -> Vec<&'a QAItem> {
    ds.clusters_in(ids).map(|c| &c.base).collect()
}

fn map(scores: &[f64], d_ffn: usize) -> AttributionMap {
    AttributionMap::new(scores.len() / d_ffn, d_ffn, scores.to_vec())
}

#[test]
fn method_names_round_trip() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            format!("\"{}\"", m.name())
        );
    }
    assert!("sgd".parse::<Method>().is_err());
}

#[test]
fn config_defaults_and_validation() {
    let mc = tiny_config(20);
    let c = UnlearnConfig::new(Method::Klue, 0);
    assert_eq!(
        (c.forget_weight, c.retain_weight, c.batch_size, c.max_epochs),
        (0.7, 1.0, 4, 150)
    );
    assert_eq!(
        (c.alpha, c.n_mismatch, c.neuron_ratio, c.rmu_c),
        (10.0, 5, 0.05, 20.0)
    );
    assert_eq!(c.ua_stop_threshold, 33.34);
    assert!(c.sample_selection && !UnlearnConfig::new(Method::Ga, 0).sample_selection);
    c.validate(&mc).unwrap();
    for bad in [
        UnlearnConfig {
            neuron_ratio: 0.0,
            ..c.clone()
        },
        UnlearnConfig {
            neuron_ratio: 1.5,
            ..c.clone()
        },
        UnlearnConfig {
            forget_weight: -0.1,
            ..c.clone()
        },
        UnlearnConfig {
            batch_size: 0,
            ..c.clone()
        },
        UnlearnConfig {
            alpha: -1.0,
            ..c.clone()
        },
        UnlearnConfig {
            rmu_layer: 2,
            ..c.clone()
        },
        UnlearnConfig {
            lr: 0.0,
            ..c.clone()
        },
    ] {
        assert!(bad.validate(&mc).is_err(), "{bad:?}");
    }
}

#[test]
fn regularization_with_zero_alpha_is_identity() {
    let base = map(&[1.0, -2.0, 0.5, -0.0], 2);
    let out = regularize_with(&base, &[vec![3.0, 1.0, -1.0, 9.0]], 0.0).unwrap();
    assert_eq!(out.scores, base.scores);
    assert!(out.regularized);
    let none = regularize_with(&base, &[], 10.0).unwrap();
    assert_eq!(none.scores, base.scores);
}

#[test]
fn regularization_worked_example() {
    let base = map(&[1.0], 1);
    let out = regularize_with(&base, &[vec![0.2], vec![-0.4], vec![0.6]], 1.0).unwrap();
    assert!((out.scores[0] - (1.0 - 0.8 / 3.0)).abs() < 1e-12);
}

#[test]
fn negative_alpha_is_rejected() {
    let base = map(&[1.0], 1);
    assert!(matches!(
        regularize_with(&base, &[], -0.5),
        Err(UnlearnError::Config(_))
    ));
}

#[test]
fn selection_examples() {
    let all = select_neurons(&map(&[0.3; 12], 4), 1.0).unwrap();
    assert_eq!(all.len(), 12);

    let tied = select_neurons(&map(&[1.0; 10], 5), 0.5).unwrap();
    let expect: Vec<(usize, usize)> = (0..5).map(|j| (0, j)).collect();
    assert_eq!(tied.selected.into_iter().collect::<Vec<_>>(), expect);

    let big = select_neurons(&map(&vec![0.0; 768], 256), 0.05).unwrap();
    assert_eq!(big.len(), 39);

    let ranked = select_neurons(&map(&[0.1, 5.0, -3.0, 2.0], 2), 0.5).unwrap();
    assert_eq!(
        ranked.selected.into_iter().collect::<Vec<_>>(),
        vec![(0, 1), (1, 1)]
    );
}

#[test]
fn selection_rejects_nan_and_bad_ratio() {
    assert!(matches!(
        select_neurons(&map(&[0.0, f64::NAN], 2), 0.5),
        Err(UnlearnError::NanScore)
    ));
    assert!(select_neurons(&map(&[0.0, 1.0], 2), 0.0).is_err());
    assert_eq!(neuron_count(0.1, 10), 1);
    assert_eq!(neuron_count(0.3, 10), 3);
    assert_eq!(neuron_count(0.01, 768), 8);
}

#[test]
fn mask_origin_is_map_hash() {
    let m = map(&[0.1, 0.2], 2);
    assert_eq!(select_neurons(&m, 0.5).unwrap().origin, m.hash());
}

#[test]
fn zero_activation_layer_gets_zero_attribution() {
    let (ds, model) = memorized();
    let mut m = model.clone();
    let l = 1;
    let key = |role| ParamKey {
        layer: Some(l),
        role,
    };
    let d = m.config.d_model;
    let f = m.config.d_ffn;
    *m.param_mut(key(ParamRole::FfnIn)) = Tensor::zeros(&[f, d]);
    *m.param_mut(key(ParamRole::FfnInBias)) = Tensor::zeros(&[f]);
    let items = base_items(ds, &ds.splits.forget);
    let batch: Vec<(&[usize], usize)> = items
        .iter()
        .map(|it| (it.question.as_slice(), it.answer))
        .collect();
    let a = attribute(&m, &batch).unwrap();
    assert!((0..f).all(|i| a.get(l, i) == 0.0));
    assert!((0..f).any(|i| a.get(0, i) != 0.0));
}

#[test]
fn single_token_attribution_is_activation_times_gradient() {
    let (_, model) = memorized();
    let q = [5usize];
    let a = attribute(model, &[(&q, 7)]).unwrap();
    let rec = model.activation_gradients(&q, 7).unwrap();
    let grads = rec.grads.unwrap();
    for l in 0..model.config.n_layers {
        for i in 0..model.config.d_ffn {
            let expect = rec.hidden[l].data()[i] * grads[l].data()[i];
            assert!((a.get(l, i) - expect).abs() <= 1e-15 * expect.abs().max(1.0));
        }
    }
}

#[test]
fn attribution_pools_tokens_by_max_and_batches_by_mean() {
    let (ds, model) = memorized();
    let items = base_items(ds, &ds.splits.retain);
    let (f, n_layers) = (model.config.d_ffn, model.config.n_layers);
    let mut expect = vec![0.0; n_layers * f];
    for it in items.iter().take(3) {
        let rec = model.activation_gradients(&it.question, it.answer).unwrap();
        let grads = rec.grads.unwrap();
        for l in 0..n_layers {
            for i in 0..f {
                let best = (0..it.question.len())
                    .map(|t| rec.hidden[l].data()[t * f + i] * grads[l].data()[t * f + i])
                    .fold(f64::NEG_INFINITY, f64::max);
                expect[l * f + i] += best / 3.0;
            }
        }
    }
    let batch: Vec<(&[usize], usize)> = items
        .iter()
        .take(3)
        .map(|it| (it.question.as_slice(), it.answer))
        .collect();
    let got = attribute(model, &batch).unwrap();
    for (g, e) in got.scores.iter().zip(&expect) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn attribution_rejects_empty_batch_and_unknown_tokens() {
    let (_, model) = memorized();
    assert!(matches!(
        attribute(model, &[]),
        Err(UnlearnError::EmptyBatch)
    ));
    let q = [2usize, 3];
    assert!(attribute(model, &[(&q, 10_000)]).is_err());
    assert!(attribute(model, &[(&[10_000usize][..], 2)]).is_err());
}

fn answer_prob(model: &ModelState<f64>, it: &QAItem, zero: Option<(usize, usize)>) -> f64 {
    let mut tape = Tape::no_grad();
    let vars = bind_params(&mut tape, model, false);
    let ivs: Vec<Intervention> = zero
        .map(|(layer, neuron)| Intervention::Zero { layer, neuron })
        .into_iter()
        .collect();
    let seqs = [it.question.as_slice()];
    let fwd = forward(
        &mut tape,
        &model.config,
        &vars,
        &ForwardSpec {
            seqs: &seqs,
            interventions: &ivs,
            ..Default::default()
        },
    )
    .unwrap();
    let p = tape.softmax(fwd.logits).unwrap();
    tape.value(p).data()[it.answer]
}

#[test]
fn ablating_top_neuron_hurts_more_than_a_random_one() {
    let (ds, model) = memorized();
    let items = base_items(ds, &ds.splits.test);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut top_drop, mut rand_drop) = (0.0, 0.0);
    for t in 0..20 {
        let it = items[t % items.len()];
        let a = attribute(model, &[(&it.question, it.answer)]).unwrap();
        let top = select_neurons(&a, 1.0 / a.total() as f64).unwrap();
        let &(l, i) = top.selected.iter().next().unwrap();
        let base = answer_prob(model, it, None);
        top_drop += base - answer_prob(model, it, Some((l, i)));
        let r = (
            rng.random_range(0..model.config.n_layers),
            rng.random_range(0..model.config.d_ffn),
        );
        rand_drop += base - answer_prob(model, it, Some(r));
    }
    assert!(
        top_drop / 20.0 > rand_drop / 20.0,
        "top {top_drop} random {rand_drop}"
    );
}

fn uniform_model(vocab: usize) -> ModelState<f64> {
    let mut m = init_model::<f64>(&tiny_config(vocab)).unwrap();
    let d = m.config.d_model;
    *m.param_mut(ParamKey {
        layer: None,
        role: ParamRole::Head,
    }) = Tensor::zeros(&[vocab, d]);
    m
}

#[test]
fn unforgotten_selection_examples() {
    let (ds, model) = memorized();
    let items: Vec<&QAItem> = ds.clusters.iter().map(|c| &c.base).collect();
    assert_eq!(
        select_unforgotten(model, &items).unwrap().len(),
        items.len()
    );

    // uniform logits pick the lowest candidate id, so force answers above it
    let flat = uniform_model(ds.vocab.size());
    let mut owned: Vec<QAItem> = items.iter().map(|&it| it.clone()).collect();
    for it in &mut owned {
        it.answer = *it.candidates.iter().max().unwrap();
    }
    let refs: Vec<&QAItem> = owned.iter().collect();
    assert!(select_unforgotten(&flat, &refs).unwrap().is_empty());
}

#[test]
fn unforgotten_selection_matches_memorization_item_by_item() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        lr: 0.3,
        max_epochs: 2,
        ua_stop_threshold: -1.0,
        ..UnlearnConfig::new(Method::Ga, 1)
    };
    let (mid, _) = unlearn_run(model, ds, &cfg).unwrap();
    let items: Vec<&QAItem> = ds.clusters.iter().map(|c| &c.base).collect();
    let kept = select_unforgotten(&mid, &items).unwrap();
    let expect: Vec<&str> = items
        .iter()
        .filter(|it| memorization(&mid, it).unwrap() == 1)
        .map(|it| it.id.as_str())
        .collect();
    assert_eq!(
        kept.iter().map(|it| it.id.as_str()).collect::<Vec<_>>(),
        expect
    );
    assert!(kept.len() < items.len());
}

fn loss_items<'a>(method: Method, items: &[&'a QAItem], seed: u64) -> Vec<LossItem<'a>> {
    make_loss_items(method, items, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn ga_with_zero_forget_weight_is_stationary() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        forget_weight: 0.0,
        ..UnlearnConfig::new(Method::Ga, 0)
    };
    let forget = loss_items(Method::Ga, &base_items(ds, &ds.splits.forget)[..4], 0);
    let mut m = model.clone();
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, &m, true);
    let loss = loss_for_method(&mut tape, &vars, &m, None, &forget, &[], &cfg).unwrap();
    assert_eq!(tape.value(loss.total).item(), 0.0);
    tape.backward(loss.total).unwrap();
    m.collect_grads(&tape, &vars).unwrap();
    m.apply_gradients(0.5, None).unwrap();
    assert_eq!(m.params(), model.params());
}

#[test]
fn npo_and_dpo_at_reference_are_log_two() {
    let (ds, model) = memorized();
    let items = base_items(ds, &ds.splits.forget);
    let reference = ReferenceModel::new(model);
    for (method, beta) in [
        (Method::Npo, 0.1),
        (Method::Npo, 0.5),
        (Method::DpoRej, 0.3),
        (Method::DpoMis, 0.3),
    ] {
        let cfg = UnlearnConfig {
            forget_weight: 1.0,
            beta_pref: beta,
            ..UnlearnConfig::new(method, 0)
        };
        let forget = loss_items(method, &items[..3], 1);
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, model, true);
        let loss = loss_for_method(
            &mut tape,
            &vars,
            model,
            Some(&reference),
            &forget,
            &[],
            &cfg,
        )
        .unwrap();
        let expect = if method == Method::Npo {
            2.0 / beta * 2f64.ln()
        } else {
            2f64.ln()
        };
        assert!(
            (loss.forget - expect).abs() < 1e-12,
            "{method}: {} vs {expect}",
            loss.forget
        );
    }
}

#[test]
fn reference_methods_require_a_reference() {
    let (ds, model) = memorized();
    let items = base_items(ds, &ds.splits.forget);
    for method in [Method::Npo, Method::DpoMis, Method::DpoRej, Method::Rmu] {
        let cfg = UnlearnConfig::new(method, 0);
        let forget = loss_items(method, &items[..2], 0);
        let mut tape = Tape::new();
        let vars = bind_params(&mut tape, model, true);
        assert!(matches!(
            loss_for_method(&mut tape, &vars, model, None, &forget, &[], &cfg),
            Err(UnlearnError::MissingReference(m)) if m == method
        ));
    }
}

#[test]
fn loss_items_pick_method_alternatives() {
    let (ds, _) = memorized();
    let items = base_items(ds, &ds.splits.forget);
    for it in loss_items(Method::DpoRej, &items, 0) {
        assert_eq!(it.alt, crate::worldgen::Vocab::REJECT);
    }
    for (li, it) in loss_items(Method::DpoMis, &items, 0).iter().zip(&items) {
        assert!(li.alt != it.answer && it.candidates.contains(&li.alt));
    }
    for (li, it) in loss_items(Method::GaRet, &items, 0).iter().zip(&items) {
        assert_eq!(li.alt, it.answer);
    }
}

#[test]
fn rmu_direction_is_a_fixed_unit_vector() {
    let u = rmu_direction(16, 4);
    assert_eq!(u, rmu_direction(16, 4));
    assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
}

/// Model small enough that a full finite-difference sweep is cheap.
fn gradcheck_model(vocab: usize) -> ModelState<f64> {
    let cfg = ModelConfig {
        vocab_size: vocab,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ffn: 6,
        max_seq_len: 4,
        seed: 2,
    };
    init_model::<f64>(&cfg).unwrap()
}

pub(crate) fn max_loss_gradient_error(method: Method) -> f64 {
    let vocab = 9;
    let model = gradcheck_model(vocab);
    let mut perturbed = model.clone();
    // move the policy away from the reference so preference terms are non-trivial
    let key = ParamKey {
        layer: None,
        role: ParamRole::Head,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for v in perturbed.param_mut(key).data_mut() {
        *v += rng.random_range(-0.5..0.5);
    }
    let reference = ReferenceModel::new(&model);
    let qs: [&[usize]; 4] = [&[2, 3, 0], &[4, 5, 0], &[6, 0], &[3, 7, 8, 0]];
    let forget = [
        LossItem {
            question: qs[0],
            answer: 5,
            alt: 1,
        },
        LossItem {
            question: qs[1],
            answer: 6,
            alt: 7,
        },
    ];
    let retain = [
        LossItem {
            question: qs[2],
            answer: 8,
            alt: 1,
        },
        LossItem {
            question: qs[3],
            answer: 2,
            alt: 4,
        },
    ];
    let cfg = UnlearnConfig {
        beta_pref: 0.3,
        rmu_c: 2.0,
        ..UnlearnConfig::new(method, 3)
    };
    let xs: Vec<Tensor<f64>> = perturbed.params().iter().map(|(_, t)| t.clone()).collect();
    finite_diff_check_many(
        |tape, vars| {
            loss_for_method(
                tape,
                vars,
                &perturbed,
                Some(&reference),
                &forget,
                &retain,
                &cfg,
            )
            .map(|l| l.total)
            .map_err(|e| match e {
                UnlearnError::Autograd(a) => a,
                other => panic!("{other}"),
            })
        },
        &xs,
        1e-6,
    )
    .unwrap()
}

#[test]
fn every_method_loss_passes_finite_differences() {
    for method in Method::ALL {
        let err = max_loss_gradient_error(method);
        assert!(err < 1e-4, "{method}: {err}");
    }
}

fn identity_check(state: &ModelState<f64>, other: &ModelState<f64>) -> bool {
    state.checksum() == other.checksum()
}

#[test]
fn zero_epochs_is_a_no_op() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        max_epochs: 0,
        ..UnlearnConfig::new(Method::Klue, 0)
    };
    let (out, history) = unlearn_run(model, ds, &cfg).unwrap();
    assert!(identity_check(&out, model));
    assert!(history.epochs.is_empty() && !history.stopped_early);
    assert_eq!(history.initial_ua, 100.0);
}

#[test]
fn empty_fixed_mask_never_moves_and_runs_to_the_cap() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        max_epochs: 3,
        neuron_selection: NeuronSelection::Fixed(NeuronMask::empty()),
        ..UnlearnConfig::new(Method::Klue, 0)
    };
    let (out, history) = unlearn_run(model, ds, &cfg).unwrap();
    assert!(identity_check(&out, model));
    assert_eq!(history.epochs.len(), 3);
    assert!(!history.stopped_early);
    assert!(history.epochs.iter().all(|e| e.ua == history.initial_ua));
}

#[test]
fn runs_are_deterministic() {
    let (ds, model) = memorized();
    for method in [Method::Klue, Method::DpoMis] {
        let cfg = UnlearnConfig {
            max_epochs: 2,
            ..UnlearnConfig::new(method, 4)
        };
        let (a, ha) = unlearn_run(model, ds, &cfg).unwrap();
        let (b, hb) = unlearn_run(model, ds, &cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(ha, hb);
    }
}

#[test]
fn early_stop_lands_at_or_below_threshold() {
    let (ds, model) = memorized();
    for method in [Method::Ga, Method::GaRet, Method::Klue] {
        let cfg = UnlearnConfig::new(method, 0);
        let (_, history) = unlearn_run(model, ds, &cfg).unwrap();
        assert!(history.stopped_early, "{method}: {:?}", history.final_ua());
        assert!(history.final_ua() <= cfg.ua_stop_threshold);
        assert!(history.epochs.len() <= cfg.max_epochs);
    }
}

#[test]
fn skipped_items_were_forgotten_when_skipped() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        lr: 0.03,
        ..UnlearnConfig::new(Method::Klue, 2)
    };
    let mut snapshots = vec![model.clone()];
    let (_, history) = unlearn_run_with(model, ds, &cfg, |_, m| {
        snapshots.push(m.clone());
        Ok(())
    })
    .unwrap();
    let mut checked = 0;
    for (e, record) in history.epochs.iter().enumerate() {
        let at_start = &snapshots[e];
        for id in &record.skipped {
            let item = &ds.clusters.iter().find(|c| &c.base.id == id).unwrap().base;
            assert_eq!(
                memorization(at_start, item).unwrap(),
                0,
                "epoch {} item {id}",
                record.epoch
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "no epoch skipped anything: {history:?}");
}

#[test]
fn klue_steps_only_touch_the_selected_image() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        max_epochs: 1,
        batch_size: 64,
        ua_stop_threshold: -1.0,
        ..UnlearnConfig::new(Method::Klue, 0)
    };
    // one batch holds every forget item, so the epoch is a single step
    let (out, _) = unlearn_run(model, ds, &cfg).unwrap();
    let forget = base_items(ds, &ds.splits.forget);
    assert!(forget.len() <= 64);
    let changed: Vec<(usize, usize)> = (0..model.config.n_layers)
        .flat_map(|l| (0..model.config.d_ffn).map(move |i| (l, i)))
        .filter(|&(l, i)| {
            let row = |m: &ModelState<f64>| {
                let d = m.config.d_model;
                m.param(ParamKey {
                    layer: Some(l),
                    role: ParamRole::FfnIn,
                })
                .data()[i * d..(i + 1) * d]
                    .to_vec()
            };
            row(&out) != row(model)
        })
        .collect();
    let expected = neuron_count(cfg.neuron_ratio, model.config.total_neurons());
    assert!(!changed.is_empty() && changed.len() <= expected);
    for ((k, a), (_, b)) in out.params().iter().zip(model.params()) {
        if !matches!(
            k.role,
            ParamRole::FfnIn | ParamRole::FfnInBias | ParamRole::FfnOut
        ) {
            assert_eq!(a, b, "{k}");
        }
    }
}

#[test]
fn non_finite_loss_aborts_with_diagnostic() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        lr: 1e300,
        max_epochs: 5,
        ua_stop_threshold: -1.0,
        ..UnlearnConfig::new(Method::Ga, 0)
    };
    match unlearn_run(model, ds, &cfg) {
        Err(UnlearnError::NonFinite(d)) => {
            assert!(!d.batch_ids.is_empty());
            assert_eq!(d.checksum.len(), 64);
        }
        other => panic!("{:?}", other.map(|(_, h)| h)),
    }
}

#[test]
fn history_round_trips() {
    let (ds, model) = memorized();
    let cfg = UnlearnConfig {
        max_epochs: 2,
        ..UnlearnConfig::new(Method::Klue, 0)
    };
    let (_, history) = unlearn_run(model, ds, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.jsonl");
    write_history(&history, &path).unwrap();
    assert_eq!(read_history(&path).unwrap(), history);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_penalty_never_raises_scores(
        base in proptest::collection::vec(-5.0f64..5.0, 12),
        others in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 12), 1..6),
        alpha in 0.0f64..20.0,
    ) {
        let b = map(&base, 4);
        let out = regularize_with(&b, &others, alpha).unwrap();
        for j in 0..12 {
            let penalty: f64 = others.iter().map(|o| o[j].max(0.0)).sum::<f64>() / others.len() as f64;
            prop_assert!(penalty >= 0.0);
            prop_assert!(out.scores[j] <= base[j]);
            prop_assert!((out.scores[j] - (base[j] - alpha * penalty)).abs() < 1e-12);
        }
    }

    #[test]
    fn selection_has_exact_size_and_dominates(
        scores in proptest::collection::vec(-3i32..3, 1..120),
        p in 0.001f64..=1.0,
    ) {
        let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
        let d = if s.len() % 2 == 0 { 2 } else { 1 };
        let m = map(&s, d);
        let mask = select_neurons(&m, p).unwrap();
        prop_assert_eq!(mask.len(), neuron_count(p, s.len()));
        prop_assert!(mask.len() >= 1);
        let inside: Vec<usize> = mask.selected.iter().map(|&(l, i)| l * d + i).collect();
        for j in 0..s.len() {
            if !inside.contains(&j) {
                for &k in &inside {
                    prop_assert!(s[k] > s[j] || (s[k] == s[j] && k < j));
                }
            }
        }
    }

    #[test]
    fn random_masks_have_exact_size(seed in any::<u64>(), p in 0.001f64..=1.0) {
        let mask = random_mask(3, 17, p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(mask.len(), neuron_count(p, 51));
        prop_assert!(mask.selected.iter().all(|&(l, i)| l < 3 && i < 17));
    }
}

#[test]
fn memorization_many_agrees_with_single_item_calls() {
    let (ds, model) = memorized();
    let items: Vec<&QAItem> = ds
        .clusters
        .iter()
        .flat_map(|c| c.items())
        .take(40)
        .collect();
    let many = memorization_many(model, &items).unwrap();
    for (it, f) in items.iter().zip(many) {
        assert_eq!(memorization(model, it).unwrap(), f);
    }
}
