mod common;

use cetp::autograd::{ParamGroup, ParamStore, Tape};
use cetp::config::TrainConfig;
use cetp::model::Model;
use cetp::tensor::Matrix;
use cetp::training::*;
use cetp::Error;

fn params_of(model: &Model, group: ParamGroup) -> Vec<Matrix> {
    model
        .store
        .ids()
        .filter(|&id| model.store.group(id) == group)
        .map(|id| model.store.get(id).clone())
        .collect()
}

#[test]
fn noam_schedule_warms_up_then_decays() {
    assert!((noam_lr(1e-3, 100, 1) - 1e-5).abs() < 1e-18);
    assert!((noam_lr(1e-3, 100, 50) - 5e-4).abs() < 1e-15);
    assert!((noam_lr(1e-3, 100, 100) - 1e-3).abs() < 1e-15);
    assert!((noam_lr(1e-3, 100, 400) - 5e-4).abs() < 1e-15);
    let peak = (1..1000).map(|s| noam_lr(1.0, 100, s)).fold(0.0, f64::max);
    assert_eq!(peak, 1.0);
}

fn store_with(values: &[f64], group: ParamGroup) -> ParamStore {
    let mut store = ParamStore::new();
    store.add("w", Matrix::from_vec(1, values.len(), values.to_vec()), group);
    store
}

/// Gradient `coef` for the single parameter of `store`.
fn grads_of(store: &ParamStore, coef: &[f64]) -> cetp::autograd::Grads {
    let mut tape = Tape::new(store);
    let id = store.ids().next().unwrap();
    let p = tape.param(id);
    let l = tape.mul_const(p, Matrix::from_vec(1, coef.len(), coef.to_vec()));
    let s = tape.sum(l);
    tape.backward(s)
}

#[test]
fn adam_matches_the_bias_corrected_update() {
    let cfg = TrainConfig::default();
    let mut store = store_with(&[0.5, -1.0], ParamGroup::Planner);
    let mut adam = Adam::new(&store, &cfg);
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let gs = [[0.2, -3.0], [0.1, 1.0], [-0.4, 0.5]];
    let (mut m, mut v, mut w) = ([0.0; 2], [0.0; 2], [0.5, -1.0]);
    for (t, g) in gs.iter().enumerate() {
        let grads = grads_of(&store, g);
        adam.step(&mut store, &grads, 0.01, &|_| 1.0);
        let t = t as i32 + 1;
        for i in 0..2 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= 0.01 * mh / (vh.sqrt() + eps);
        }
        let got = &store.get(store.ids().next().unwrap()).data;
        for i in 0..2 {
            assert!((got[i] - w[i]).abs() < 1e-15, "step {t}: {} vs {}", got[i], w[i]);
        }
    }
}

#[test]
fn adam_skips_frozen_groups_and_scales_shared() {
    let cfg = TrainConfig::default();
    let cases = [
        (Stage::Plan, ParamGroup::Realizer, 0.0),
        (Stage::Plan, ParamGroup::Shared, 1.0),
        (Stage::Realize, ParamGroup::Planner, 0.0),
        (Stage::Realize, ParamGroup::Shared, 0.1),
    ];
    for (stage, group, scale) in cases {
        let mut store = store_with(&[1.0], group);
        let mut adam = Adam::new(&store, &cfg);
        let grads = grads_of(&store, &[2.0]);
        adam.step(&mut store, &grads, 0.01, &|g| stage.group_scale(g, 0.1));
        // the first bias-corrected step has magnitude lr * scale
        let w = store.get(store.ids().next().unwrap()).data[0];
        assert!((w - (1.0 - 0.01 * scale)).abs() < 1e-9, "{group:?}: {w}");
    }
}

#[test]
fn clipping_bounds_the_global_norm() {
    let store = store_with(&[0.0, 0.0], ParamGroup::Planner);
    let mut g = grads_of(&store, &[3.0, 4.0]);
    assert_eq!(clip_grads(&mut g, 10.0), 5.0);
    assert!((g.global_norm() - 5.0).abs() < 1e-12);
    assert_eq!(clip_grads(&mut g, 1.0), 5.0);
    assert!((g.global_norm() - 1.0).abs() < 1e-12);
}

#[test]
fn batch_loss_agrees_with_the_mean_loss() {
    let f = common::fixture();
    let model = f.model(6);
    let batch: Vec<&Example> = f.examples.iter().take(4).collect();
    let (l, parts, g) = batch_gradients(&model, &f.cidx, &batch, Stage::Plan, 1.0, None).unwrap();
    assert!((l - plan_loss(&model, &f.cidx, &batch).unwrap()).abs() < 1e-12);
    assert!(parts.schema_total > 0 && g.is_finite());
    let (l, parts, _) = batch_gradients(&model, &f.cidx, &batch, Stage::Realize, 0.5, None).unwrap();
    assert!((l - realize_loss(&model, &f.cidx, &batch, 0.5).unwrap()).abs() < 1e-12);
    let n = batch.len() as f64;
    assert!((l - (parts.word_nll + 0.5 * parts.si) / n).abs() < 1e-9);
    assert!((parts.perplexity() - (parts.word_nll / parts.actions as f64).exp()).abs() < 1e-12);
    assert!(plan_loss(&model, &f.cidx, &[]).is_err());
}

#[test]
fn dropout_only_acts_when_seeded() {
    let mut cfg = common::config(16);
    cfg.model.dropout = 0.3;
    let f = common::fixture_with(&cetp::synth::SynthSpec::new(4, 6, 12, 30), cfg);
    let model = f.model(6);
    let batch: Vec<&Example> = f.examples.iter().take(3).collect();
    let eval = batch_gradients(&model, &f.cidx, &batch, Stage::Plan, 1.0, None).unwrap().0;
    let a = batch_gradients(&model, &f.cidx, &batch, Stage::Plan, 1.0, Some(1)).unwrap().0;
    let b = batch_gradients(&model, &f.cidx, &batch, Stage::Plan, 1.0, Some(1)).unwrap().0;
    let c = batch_gradients(&model, &f.cidx, &batch, Stage::Plan, 1.0, Some(2)).unwrap().0;
    assert_eq!(a, b);
    assert_ne!(a, eval);
    assert_ne!(a, c);
}

#[test]
fn stages_freeze_the_other_side_and_reduce_loss() {
    let f = common::fixture();
    let mut cfg = f.cfg.train.clone();
    cfg.stage1_epochs = 8;
    cfg.stage2_epochs = 8;
    let mut model = f.model(8);
    let dir = tempfile::tempdir().unwrap();
    let realizer_before = params_of(&model, ParamGroup::Realizer);
    let shared_before = params_of(&model, ParamGroup::Shared);
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        metrics_csv: Some(dir.path().join("m.csv")),
        stages: vec![1],
    };
    let out = train(&mut model, &f.cidx, &f.examples, &f.examples[..4], &cfg, 3, &opts).unwrap();
    assert_eq!(params_of(&model, ParamGroup::Realizer), realizer_before);
    assert_ne!(params_of(&model, ParamGroup::Shared), shared_before);
    let losses = &out.epoch_losses[0].1;
    assert!(losses.last().unwrap() < &losses[0]);
    assert!(dir.path().join("stage1.ckpt").exists());
    let csv = std::fs::read_to_string(dir.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 1 + out.rows.len());
    assert_eq!(out.rows.iter().filter(|r| r.valid_loss.is_some()).count(), cfg.stage1_epochs);

    let planner_before = params_of(&model, ParamGroup::Planner);
    let opts = TrainOptions {
        stages: vec![2],
        ..TrainOptions::default()
    };
    let out = train(&mut model, &f.cidx, &f.examples, &[], &cfg, 3, &opts).unwrap();
    assert_eq!(params_of(&model, ParamGroup::Planner), planner_before);
    let losses = &out.epoch_losses[0].1;
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn checkpoints_reload_to_the_same_parameters() {
    let f = common::fixture();
    let mut cfg = f.cfg.train.clone();
    cfg.stage1_epochs = 1;
    cfg.stage2_epochs = 1;
    let mut model = f.model(8);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainOptions::both_stages()
    };
    train(&mut model, &f.cidx, &f.examples, &[], &cfg, 3, &opts).unwrap();
    let back = Model::load(&checkpoint_path(dir.path(), 2)).unwrap();
    assert_eq!(back.cfg, model.cfg);
    // tensors are stored as f32
    for id in model.store.ids() {
        let want: Vec<f64> = model.store.get(id).data.iter().map(|&x| x as f32 as f64).collect();
        assert_eq!(back.store.get(id).data, want);
    }
}

#[test]
fn non_finite_parameters_stop_training() {
    let f = common::fixture();
    let mut model = f.model(8);
    let id = model
        .store
        .ids()
        .find(|&id| model.store.group(id) == ParamGroup::Planner)
        .unwrap();
    model.store.get_mut(id).data.iter_mut().for_each(|x| *x = f64::NAN);
    let mut cfg = f.cfg.train.clone();
    cfg.stage1_epochs = 1;
    let opts = TrainOptions {
        stages: vec![1],
        ..TrainOptions::default()
    };
    let err = train(&mut model, &f.cidx, &f.examples, &[], &cfg, 3, &opts).err().unwrap();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, batch: 0 }));
    assert!(!err.is_validation());
}

#[test]
fn unknown_stages_and_empty_data_are_rejected() {
    let f = common::fixture();
    let mut model = f.model(8);
    let opts = TrainOptions {
        stages: vec![3],
        ..TrainOptions::default()
    };
    assert!(train(&mut model, &f.cidx, &f.examples, &[], &f.cfg.train, 3, &opts).is_err());
    assert!(train(&mut model, &f.cidx, &[], &[], &f.cfg.train, 3, &TrainOptions::both_stages()).is_err());
}

#[test]
fn teacher_forced_accuracy_counts_every_plan_step() {
    let f = common::fixture();
    let model = f.model(8);
    let stats = teacher_forced_stats(&model, &f.cidx, &f.examples, 1.0).unwrap();
    let steps: usize = f.examples.iter().map(|e| e.plan.steps.len()).sum();
    assert_eq!(stats.schema_total, steps);
    assert!(stats.schema_correct <= steps);
    assert_eq!(stats.actions, f.examples.iter().map(Example::action_count).sum::<usize>());
    let plans = gold_plans(&f.examples);
    assert_eq!(plans.len(), f.examples.len());
    assert!(plans.iter().all(|(i, p)| sentence_schemas(p).len() == f.examples[*i].sentences.len()));
}
