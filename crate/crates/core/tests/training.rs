//! Training loop structure, gradient agreement on the full objective,
//! determinism and run persistence.

use gdmrg_core::config::{AuxLoss, GraphMode, MainLoss, MaskMode, RunConfig};
use gdmrg_core::evaluate::{evaluate, EvalOptions};
use gdmrg_core::experiments::{load_run, save_run, splits_for};
use gdmrg_core::model::Model;
use gdmrg_core::train::{joint_only, objective_gradcheck, train, train_from};
use numcore::ParamStore;

fn bits(s: &ParamStore, name: &str) -> Vec<u64> {
    s.value(name).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let cfg = RunConfig { epochs_stage1: 0, epochs_stage2: 0, ..RunConfig::tiny() };
    let splits = splits_for(&cfg).unwrap();
    let model = Model::new(&cfg, &splits.train).unwrap();
    let init = model.init_params().unwrap();
    let mut store = init.clone();
    let log = train_from(&model, &mut store, &splits).unwrap();
    assert!(log.is_empty());
    assert!(store.values_bit_equal(&init));
}

#[test]
fn warm_up_leaves_joint_modules_untouched() {
    let cfg = RunConfig { epochs_stage1: 2, epochs_stage2: 0, ..RunConfig::tiny() };
    let splits = splits_for(&cfg).unwrap();
    let model = Model::new(&cfg, &splits.train).unwrap();
    let init = model.init_params().unwrap();
    let mut store = init.clone();
    let log = train_from(&model, &mut store, &splits).unwrap();
    assert_eq!(log.len(), 2);
    assert!(log.iter().all(|l| l.starts_with("stage=1 ")));
    let names = init.names();
    assert!(names.iter().any(|n| joint_only(n)));
    let mut moved = 0;
    for n in &names {
        let same = bits(&init, n) == bits(&store, n);
        if joint_only(n) {
            assert!(same, "{n} changed during warm-up");
        } else if !same {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn joint_stage_updates_every_module() {
    let cfg = RunConfig { epochs_stage1: 0, epochs_stage2: 1, freeze_embeddings: false, ..RunConfig::tiny() };
    let splits = splits_for(&cfg).unwrap();
    let model = Model::new(&cfg, &splits.train).unwrap();
    let init = model.init_params().unwrap();
    let mut store = init.clone();
    train_from(&model, &mut store, &splits).unwrap();
    for n in init.names().iter().filter(|n| joint_only(n)) {
        assert_ne!(bits(&init, n), bits(&store, n), "{n} never moved");
    }
}

#[test]
fn frozen_embeddings_stay_fixed() {
    let cfg = RunConfig { freeze_embeddings: true, ..RunConfig::tiny() };
    let splits = splits_for(&cfg).unwrap();
    let model = Model::new(&cfg, &splits.train).unwrap();
    let init = model.init_params().unwrap();
    let mut store = init.clone();
    train_from(&model, &mut store, &splits).unwrap();
    assert_eq!(bits(&init, gdmrg_core::tki::H0), bits(&store, gdmrg_core::tki::H0));
}

#[test]
fn identical_seeds_give_identical_runs() {
    let cfg = RunConfig::tiny();
    let splits = splits_for(&cfg).unwrap();
    let a = train(&cfg, &splits).unwrap();
    let b = train(&cfg, &splits).unwrap();
    assert!(a.store.values_bit_equal(&b.store));
    assert_eq!(a.log, b.log);
    let opts = EvalOptions::from_config(&cfg);
    let ea = evaluate(&a.model, &a.store, &splits, opts).unwrap();
    let eb = evaluate(&b.model, &b.store, &splits, opts).unwrap();
    assert_eq!(ea.metrics.to_csv(), eb.metrics.to_csv());
    assert_eq!(ea.reports, eb.reports);

    let c = train(&RunConfig { seed: cfg.seed + 1, ..cfg.clone() }, &splits).unwrap();
    assert!(!a.store.values_bit_equal(&c.store));
}

#[test]
fn saved_runs_reload_bit_for_bit() {
    let cfg = RunConfig::tiny();
    let splits = splits_for(&cfg).unwrap();
    let t = train(&cfg, &splits).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_run(&t, dir.path()).unwrap();
    let (_, store) = load_run(&cfg, &splits, dir.path()).unwrap();
    assert!(store.values_bit_equal(&t.store));
    assert!(load_run(&cfg, &splits, &dir.path().join("missing")).is_err());
}

#[test]
fn objective_gradients_agree_across_variants() {
    let base = RunConfig::tiny();
    let splits = splits_for(&base).unwrap();
    let variants = [
        base.clone(),
        RunConfig { aux_loss: AuxLoss::Mbce, main_loss: MainLoss::Ce, ..base.clone() },
        RunConfig { graph: GraphMode::Vanilla, mask_mode: MaskMode::Full, ..base.clone() },
        RunConfig { graph: GraphMode::None, aux_loss: AuxLoss::None, ..base.clone() },
    ];
    for (i, cfg) in variants.iter().enumerate() {
        let model = Model::new(cfg, &splits.train).unwrap();
        let store = model.init_params().unwrap();
        let err = objective_gradcheck(&model, &store, &splits.train, 4, 3, i as u64).unwrap();
        assert!(err < 1e-4, "variant {i}: {err:e}");
    }
}
