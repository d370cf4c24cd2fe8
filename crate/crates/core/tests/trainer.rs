use dropnas::config::ExperimentConfig;
use dropnas::data::{Dataset, DatasetKind, DatasetSpec};
use dropnas::drop::DropConfig;
use dropnas::nn::NetConfig;
use dropnas::params::ParamRole;
use dropnas::rng::{derive_seed, Purpose};
use dropnas::space::SearchSpace;
use dropnas::supernet::Supernet;
use dropnas::train::{Ablation, Gradients, TrainConfig, Trainer};

fn data(seed: u64) -> Dataset {
    DatasetSpec {
        kind: DatasetKind::SyntheticSpirals,
        train_samples: 48,
        test_samples: 8,
        ..DatasetSpec::default()
    }
    .load(seed)
    .unwrap()
    .train
}

fn trainer(seed: u64, r: f64, ablation: Ablation) -> Trainer {
    let net_cfg = NetConfig {
        cells: 3,
        nodes: 2,
        channels: 4,
        ..NetConfig::default()
    };
    let net = Supernet::new(&net_cfg, &SearchSpace::darts(), 3, 4, seed).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        alpha_optim: dropnas::train::AlphaOptim {
            lr: 0.05,
            ..Default::default()
        },
        ablation,
        ..TrainConfig::default()
    };
    Trainer::new(net, &cfg, &DropConfig::with_rate(r), seed).unwrap()
}

fn run_steps(t: &mut Trainer, data: &Dataset, steps: usize) -> Vec<f64> {
    let batches = data.batch_indices(8, None);
    (0..steps)
        .map(|s| {
            let batch = data.batch(&batches[s % batches.len()]).unwrap();
            t.train_step(&batch, 0.05).unwrap().dropped_p_drift
        })
        .collect()
}

#[test]
fn alpha_adjust_preserves_dropped_probabilities() {
    let d = data(1);
    let mut t = trainer(1, 0.3, Ablation::default());
    let drift = run_steps(&mut t, &d, 30);
    assert!(drift.iter().all(|&x| x < 1e-12), "{drift:?}");
    assert!(t
        .net()
        .alpha_table()
        .alpha
        .values()
        .flatten()
        .flatten()
        .any(|&a| a != 0.0));
}

#[test]
fn without_alpha_adjust_dropped_probabilities_move() {
    let d = data(1);
    let ablation = Ablation {
        alpha_adjust: false,
        ..Ablation::default()
    };
    let mut t = trainer(1, 0.3, ablation);
    let drift = run_steps(&mut t, &d, 30);
    assert!(drift.iter().cloned().fold(0.0, f64::max) > 1e-6);
}

#[test]
fn without_partial_decay_the_dropped_mass_is_preserved() {
    let d = data(2);
    let ablation = Ablation {
        partial_decay: false,
        ..Ablation::default()
    };
    let mut t = trainer(2, 0.3, ablation);
    let batches = d.batch_indices(8, None);
    for s in 0..10 {
        let before = t.net().alpha_table();
        let rec = t
            .train_step(&d.batch(&batches[s % batches.len()]).unwrap(), 0.05)
            .unwrap();
        let after = t.net().alpha_table();
        for (kind, e, mask) in rec.masks.iter() {
            let mass = |table: &dropnas::supernet::AlphaTable| -> f64 {
                let p = table.probs(kind, e);
                mask.dropped().map(|o| p[o]).sum()
            };
            assert!((mass(&before) - mass(&after)).abs() < 1e-12);
        }
    }
}

#[test]
fn ungrouped_dropout_runs_and_keeps_something() {
    let d = data(3);
    let ablation = Ablation {
        grouping: false,
        ..Ablation::default()
    };
    let mut t = trainer(3, 0.5, ablation);
    assert_eq!(t.sampler().groups().len(), 1);
    let batches = d.batch_indices(8, None);
    for s in 0..10 {
        let rec = t
            .train_step(&d.batch(&batches[s % batches.len()]).unwrap(), 0.05)
            .unwrap();
        assert!(rec.masks.iter().all(|(_, _, m)| m.any_kept()));
    }
}

#[test]
fn partial_decay_with_zero_gradients() {
    let mut t = trainer(4, 0.5, Ablation::default());
    let masks = t.sample_masks(0);
    assert!(masks.iter().any(|(_, _, m)| m.any_dropped()));
    let before = t.net().params().clone();
    let n = before.len();
    let mut grads = Gradients {
        loss: 0.0,
        accuracy: 0.0,
        grads: before
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect(),
    };
    let (lr, wd) = (0.05, t.config().w_optim.weight_decay);
    t.apply_update(&mut grads, &masks, lr).unwrap();
    let (mut kept, mut dropped) = (0, 0);
    for (id, p) in before.iter() {
        let after = t.net().params().get(id).value.data();
        match p.role {
            ParamRole::Weight { op: Some(slot) } if !masks.is_kept(slot) => {
                dropped += 1;
                assert_eq!(after, p.value.data(), "{}", p.name);
            }
            ParamRole::Weight { .. } => {
                kept += 1;
                for (a, b) in after.iter().zip(p.value.data()) {
                    assert_eq!(*a, b - lr * (wd * b), "{}", p.name);
                }
            }
            ParamRole::Alpha(_) => {}
        }
    }
    assert!(kept > 0 && dropped > 0 && kept + dropped + 2 == n);
}

#[test]
fn full_decay_when_partial_decay_is_off() {
    let ablation = Ablation {
        partial_decay: false,
        ..Ablation::default()
    };
    let mut t = trainer(4, 0.5, ablation);
    let masks = t.sample_masks(0);
    let before = t.net().params().clone();
    let mut grads = Gradients {
        loss: 0.0,
        accuracy: 0.0,
        grads: before
            .iter()
            .map(|(_, p)| vec![0.0; p.value.numel()])
            .collect(),
    };
    t.apply_update(&mut grads, &masks, 0.05).unwrap();
    let moved = before.iter().any(|(id, p)| {
        matches!(p.role, ParamRole::Weight { op: Some(slot) } if !masks.is_kept(slot))
            && t.net().params().get(id).value.data() != p.value.data()
    });
    assert!(moved);
}

#[test]
fn same_seed_same_trajectory() {
    let d = data(5);
    let run = || {
        let mut t = trainer(5, 0.3, Ablation::default());
        let batches = d.batch_indices(8, None);
        (0..6)
            .map(|s| {
                let rec = t
                    .train_step(&d.batch(&batches[s % batches.len()]).unwrap(), 0.05)
                    .unwrap();
                assert_eq!(rec.masks_seed, derive_seed(5, Purpose::Mask, s as u64));
                (rec.loss.to_bits(), rec.masks_digest, rec.alpha_hash)
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn steps_are_numbered_monotonically() {
    let d = data(6);
    let mut t = trainer(6, 0.0, Ablation::default());
    let batches = d.batch_indices(8, None);
    let steps: Vec<u64> = (0..4)
        .map(|s| {
            t.train_step(&d.batch(&batches[s]).unwrap(), 0.05)
                .unwrap()
                .step
        })
        .collect();
    assert_eq!(steps, vec![0, 1, 2, 3]);
    assert_eq!(t.alpha_optimizer().steps(), 4);
    assert_eq!(t.weight_optimizer().steps(), 4);
}

#[test]
fn invalid_train_config_is_rejected() {
    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.train.batch_size = 0;
    assert!(cfg.validate().is_err());
    cfg.train.batch_size = 8;
    cfg.train.w_optim.momentum = 1.5;
    assert!(cfg.validate().is_err());
}
