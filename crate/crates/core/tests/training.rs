//! End-to-end training behaviour on small synthetic data.

use cenet_core::checkpoint::parameter_digest;
use cenet_core::synthetic::SyntheticSpec;
use cenet_core::{
    build_split_contexts, train_stage2, Checkpoint, CheckpointMeta, HyperParams, ModelParams,
    SplitContexts, Stage1Trainer, TkgDataset, TrainSwitches,
};

fn small_data(novel_fraction: f64) -> (TkgDataset, SplitContexts) {
    let ds = SyntheticSpec {
        num_entities: 30,
        num_relations: 5,
        granules: 24,
        recurrent_pairs: 20,
        novel_fraction,
        valid_granules: 3,
        test_granules: 3,
        seed: 5,
    }
    .generate()
    .unwrap();
    let ctx = build_split_contexts(&ds).unwrap();
    (ds, ctx)
}

fn small_hp() -> HyperParams {
    HyperParams {
        dim: 16,
        batch_size: 64,
        lr: 0.01,
        stage1_epochs: 3,
        stage2_epochs: 5,
        ..Default::default()
    }
}

fn run(
    ctx: &SplitContexts,
    ds: &TkgDataset,
    hp: &HyperParams,
    switches: TrainSwitches,
    epochs: usize,
) -> (ModelParams, Stage1Trainer, Vec<f64>) {
    let mut params = ModelParams::init(ds.num_entities, ds.num_relations_total(), hp.dim, hp.seed);
    let mut tr = Stage1Trainer::new(hp.clone(), switches).unwrap();
    let losses = (0..epochs)
        .map(|_| tr.run_epoch(&ctx.train, &mut params).unwrap().combined)
        .collect();
    (params, tr, losses)
}

fn digests(p: &ModelParams) -> Vec<[u8; 32]> {
    p.stage1().iter().map(|x| parameter_digest(x)).collect()
}

#[test]
fn loss_decreases_on_recurrent_data() {
    let (ds, ctx) = small_data(0.0);
    let (_, _, losses) = run(&ctx, &ds, &small_hp(), TrainSwitches::default(), 5);
    assert!(losses.iter().all(|l| l.is_finite()));
    assert!(losses[4] < losses[0], "{losses:?}");
}

#[test]
fn alpha_one_matches_disabled_contrastive_term() {
    let (ds, ctx) = small_data(0.3);
    let hp = HyperParams {
        alpha: 1.0,
        ..small_hp()
    };
    let on = TrainSwitches::default();
    let off = TrainSwitches {
        contrastive: false,
        ..on
    };
    let (a, _, la) = run(&ctx, &ds, &hp, on, 2);
    let (b, _, lb) = run(&ctx, &ds, &hp, off, 2);
    assert_eq!(la, lb);
    assert_eq!(digests(&a), digests(&b));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (ds, ctx) = small_data(0.3);
    let hp = small_hp();
    let bytes = || {
        let (mut params, tr, _) = run(&ctx, &ds, &hp, TrainSwitches::default(), 2);
        train_stage2(&ctx.train, &ctx.valid, &mut params, &hp).unwrap();
        Checkpoint {
            meta: CheckpointMeta {
                hyperparams: hp.clone(),
                switches: TrainSwitches::default(),
                num_relations_raw: ds.num_relations_raw,
                stage1_epochs_done: tr.epochs_done,
                adam: None,
            },
            params,
            adam: Some(tr.adam),
        }
        .to_bytes()
        .unwrap()
    };
    assert_eq!(bytes(), bytes());
}

#[test]
fn different_seed_changes_parameters() {
    let (ds, ctx) = small_data(0.0);
    let (a, _, _) = run(&ctx, &ds, &small_hp(), TrainSwitches::default(), 1);
    let hp = HyperParams {
        seed: 1,
        ..small_hp()
    };
    let (b, _, _) = run(&ctx, &ds, &hp, TrainSwitches::default(), 1);
    assert_ne!(digests(&a), digests(&b));
}

#[test]
fn stage_two_leaves_backbone_untouched() {
    let (ds, ctx) = small_data(0.4);
    let hp = small_hp();
    let (mut params, _, _) = run(&ctx, &ds, &hp, TrainSwitches::default(), 2);
    let before = digests(&params);
    let metrics = train_stage2(&ctx.train, &ctx.valid, &mut params, &hp).unwrap();
    assert_eq!(before, digests(&params));
    assert!(params.classifier.is_some());
    assert_eq!(metrics.epochs.len(), hp.stage2_epochs);
    assert!(metrics.train_accuracy >= 0.0 && metrics.train_accuracy <= 1.0);
    assert!(metrics.valid_accuracy.is_some());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (ds, ctx) = small_data(0.2);
    let hp = small_hp();
    let (full, _, full_losses) = run(&ctx, &ds, &hp, TrainSwitches::default(), 3);

    let (params, tr, _) = run(&ctx, &ds, &hp, TrainSwitches::default(), 2);
    let ckpt = Checkpoint {
        meta: CheckpointMeta {
            hyperparams: hp.clone(),
            switches: TrainSwitches::default(),
            num_relations_raw: ds.num_relations_raw,
            stage1_epochs_done: tr.epochs_done,
            adam: None,
        },
        params,
        adam: Some(tr.adam),
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let mut params = back.params;
    let mut tr = Stage1Trainer::resume(
        hp,
        back.meta.switches,
        back.adam.unwrap(),
        back.meta.stage1_epochs_done,
    )
    .unwrap();
    let last = tr.run_epoch(&ctx.train, &mut params).unwrap();
    assert_eq!(last.combined, full_losses[2]);
    assert_eq!(digests(&params), digests(&full));
}
