use dropnas::data::{DatasetKind, DatasetSpec, Split};
use dropnas::drop::{DropConfig, MaskSampler};
use dropnas::genotype::{derive_genotype, random_genotype, Genotype};
use dropnas::nn::NetConfig;
use dropnas::rng::{stream, Purpose};
use dropnas::space::{CellKind, SearchSpace};
use dropnas::standalone::StandaloneNet;
use dropnas::supernet::{AlphaTable, Supernet};
use dropnas::train::{TrainConfig, Trainer};
use dropnas::Tensor;
use dropnas_reference::{
    audit_dropped_params, brute_force_genotype, darts_parity, darts_reference_step, exact_mask_law,
    gradcheck, group_pattern_probs, hard_mask_forward, reference_logits,
};
use rand::Rng;

fn toy_net(affine: bool, seed: u64) -> Supernet {
    let cfg = NetConfig {
        cells: 3,
        nodes: 2,
        channels: 4,
        bn_affine: affine,
        ..NetConfig::default()
    };
    Supernet::new(&cfg, &SearchSpace::darts(), 3, 4, seed).unwrap()
}

fn toy_data(seed: u64) -> Split {
    DatasetSpec {
        kind: DatasetKind::SyntheticSpirals,
        train_samples: 32,
        test_samples: 16,
        ..DatasetSpec::default()
    }
    .load(seed)
    .unwrap()
}

fn toy_train_cfg() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    }
}

#[test]
fn gradcheck_flags_a_wrong_gradient() {
    // x * stop_gradient(x): the tape sees x, the true derivative is 2x.
    let f = |t: &mut dropnas::autodiff::Tape, v: &[dropnas::autodiff::Var]| {
        let c = t.constant(t.value(v[0]).clone())?;
        t.mul(v[0], c)
    };
    let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
    let report = gradcheck(f, &[x], 1e-5, &mut stream(0, Purpose::Init, 0, 0)).unwrap();
    assert!(report.max_rel_err > 0.4, "{report:?}");
}

#[test]
fn reference_forward_matches_supernet() {
    for affine in [false, true] {
        let net = toy_net(affine, 3);
        let batch = toy_data(0).train.batch(&[0, 1, 2, 3, 4]).unwrap();
        let a = net.logits(&batch.images, &net.all_kept_masks()).unwrap();
        let b = reference_logits(&net, &batch.images).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
    }
}

#[test]
fn twenty_darts_steps_match_reference() {
    let split = toy_data(1);
    for affine in [false, true] {
        let net = toy_net(affine, 5);
        let report = darts_parity(&net, &toy_train_cfg(), &split.train, 20, 7).unwrap();
        assert!(report.passed(), "{report:?}");
        assert_eq!(report.checks[0].steps, 20);
        assert!(report.max_abs_dev() >= 0.0);
    }
}

#[test]
fn zero_learning_rates_give_zero_delta() {
    let net = toy_net(false, 2);
    let batch = toy_data(0).train.batch(&[0, 1, 2, 3]).unwrap();
    let mut cfg = toy_train_cfg();
    cfg.alpha_optim.lr = 0.0;
    let delta = darts_reference_step(&net, &batch, &cfg, 0.0).unwrap();
    assert_eq!(delta.max_abs(), 0.0);
}

#[test]
fn alpha_moves_when_loss_depends_on_it() {
    let net = toy_net(false, 2);
    let batch = toy_data(0).train.batch(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
    let delta = darts_reference_step(&net, &batch, &toy_train_cfg(), 0.01).unwrap();
    let a = delta.get("alpha.normal").unwrap();
    assert!(a.iter().any(|v| *v != 0.0));
}

fn standalone_with_supernet_weights(net: &Supernet, g: &Genotype) -> StandaloneNet {
    let mut s = StandaloneNet::new(g, net.space(), net.config(), 3, 4, false, 99).unwrap();
    let copied = s.params_mut().inherit_from(net.params());
    assert_eq!(copied, s.params().len());
    s
}

#[test]
fn hard_mask_matches_standalone_with_shared_weights() {
    let space = SearchSpace::darts();
    for seed in 0..4 {
        let net = toy_net(seed % 2 == 1, seed);
        let g = random_genotype(
            &space,
            2,
            &net.kinds(),
            &mut stream(seed, Purpose::Genotype, 0, 0),
        );
        let s = standalone_with_supernet_weights(&net, &g);
        let images = toy_data(seed).train.batch(&[0, 1, 2, 3]).unwrap().images;
        let a = hard_mask_forward(&net, &g, &images).unwrap();
        let b = s.logits(&images).unwrap();
        assert!(
            a.max_abs_diff(&b) < 1e-12,
            "seed {seed}: {}",
            a.max_abs_diff(&b)
        );
    }
}

#[test]
fn hard_mask_ignores_alpha() {
    let mut net = toy_net(false, 4);
    let g = random_genotype(
        net.space(),
        2,
        &net.kinds(),
        &mut stream(4, Purpose::Genotype, 0, 0),
    );
    let images = toy_data(2).train.batch(&[0, 1, 2]).unwrap().images;
    let before = hard_mask_forward(&net, &g, &images).unwrap();
    let mut table = net.alpha_table();
    let mut rng = stream(4, Purpose::Init, 9, 0);
    for rows in table.alpha.values_mut() {
        rows.iter_mut()
            .flatten()
            .for_each(|a| *a = rng.gen_range(-3.0..3.0));
    }
    net.set_alpha_table(&table).unwrap();
    let after = hard_mask_forward(&net, &g, &images).unwrap();
    assert_eq!(before, after);
}

#[test]
fn hard_mask_ignores_unselected_ops() {
    let mut net = toy_net(false, 6);
    let g = random_genotype(
        net.space(),
        2,
        &net.kinds(),
        &mut stream(6, Purpose::Genotype, 0, 0),
    );
    let images = toy_data(3).train.batch(&[0, 1, 2]).unwrap().images;
    let before = hard_mask_forward(&net, &g, &images).unwrap();
    let selected: Vec<String> = (0..net.cell_count())
        .flat_map(|c| {
            let kind = net.cell_kind(c);
            g.cell(kind)
                .iter()
                .map(move |gene| format!("cell{c}.e{}-{}.{}.", gene.pred, gene.node, gene.op))
                .collect::<Vec<_>>()
        })
        .collect();
    let ids: Vec<_> = net
        .params()
        .iter()
        .filter(|(_, p)| p.name.contains(".e") && !selected.iter().any(|s| p.name.starts_with(s)))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        net.params_mut()
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v += 0.5);
    }
    let after = hard_mask_forward(&net, &g, &images).unwrap();
    assert_eq!(before, after);
}

#[test]
fn mask_law_is_a_distribution() {
    for (size, p_d, cap) in [(4, 0.074, 100), (4, 0.9, 3), (8, 0.5, 1), (3, 0.0, 10)] {
        let law = group_pattern_probs(size, p_d, cap);
        assert_eq!(law[0], 0.0, "empty pattern has mass");
        let total: f64 = law.iter().sum();
        assert!((total - 1.0).abs() < 1e-12, "{total}");
    }
}

#[test]
fn mask_law_marginal_closed_form() {
    // Without the cap, P(dropped | group not empty) = (p_d - r) / (1 - r).
    let ops: Vec<String> = SearchSpace::darts()
        .ops()
        .iter()
        .map(|o| o.name.clone())
        .collect();
    let r = 3e-5;
    let law = exact_mask_law(&ops, &DropConfig::with_rate(r), true);
    let p_d = r.powf(0.25);
    for m in law.drop_marginal {
        assert!((m - (p_d - r) / (1.0 - r)).abs() < 1e-15);
    }
}

#[test]
fn mask_law_matches_sampler_on_a_coarse_run() {
    let space = SearchSpace::darts();
    let ops: Vec<String> = space.ops().iter().map(|o| o.name.clone()).collect();
    let cfg = DropConfig::with_rate(0.2);
    let law = exact_mask_law(&ops, &cfg, true);
    let sampler = MaskSampler::new(&space, &cfg, true).unwrap();
    let mut rng = stream(8, Purpose::Mask, 0, 0);
    let n = 20_000;
    let mut drops = vec![0usize; ops.len()];
    for _ in 0..n {
        for o in sampler.sample(&mut rng).dropped() {
            drops[o] += 1;
        }
    }
    for (o, &d) in drops.iter().enumerate() {
        let p = law.drop_marginal[o];
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((d as f64 / n as f64 - p).abs() < 4.0 * se, "op {o}");
    }
}

#[test]
fn brute_force_derivation_agrees_on_ties_and_random_tables() {
    let space = SearchSpace::darts();
    let kinds = [CellKind::Normal, CellKind::Reduction];
    let uniform = AlphaTable::uniform(&space, 3, &kinds).unwrap();
    assert_eq!(
        brute_force_genotype(&uniform),
        derive_genotype(&uniform, &space).unwrap()
    );
    let g = brute_force_genotype(&uniform);
    assert!(g
        .normal
        .iter()
        .all(|gene| gene.op == "sep_conv_3x3" && gene.pred < 2));

    let mut rng = stream(11, Purpose::Init, 0, 0);
    for _ in 0..50 {
        let mut t = AlphaTable::uniform(&space, 4, &kinds).unwrap();
        for rows in t.alpha.values_mut() {
            // coarse values so exact ties between edges and ops are common
            rows.iter_mut()
                .flatten()
                .for_each(|a| *a = rng.gen_range(0..3) as f64);
        }
        assert_eq!(
            brute_force_genotype(&t),
            derive_genotype(&t, &space).unwrap()
        );
    }
}

#[test]
fn dropped_parameters_stay_put_for_a_hundred_steps() {
    let split = toy_data(4);
    let mut trainer = Trainer::new(
        toy_net(false, 8),
        &toy_train_cfg(),
        &DropConfig::with_rate(3e-5),
        8,
    )
    .unwrap();
    let audit = audit_dropped_params(&mut trainer, &split.train, 8, 100, 0.025).unwrap();
    assert!(audit.passed(), "{:?}", audit.violations.first());
    assert_eq!(audit.steps, 100);
}

#[test]
fn audit_catches_full_weight_decay() {
    let split = toy_data(4);
    let mut cfg = toy_train_cfg();
    cfg.ablation.partial_decay = false;
    let mut trainer =
        Trainer::new(toy_net(false, 8), &cfg, &DropConfig::with_rate(3e-5), 8).unwrap();
    let audit = audit_dropped_params(&mut trainer, &split.train, 8, 10, 0.025).unwrap();
    assert!(!audit.violations.is_empty());
}
