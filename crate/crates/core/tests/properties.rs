use dropnas::checkpoint::Checkpoint;
use dropnas::config::ExperimentConfig;
use dropnas::drop::{drop_prob, DropConfig, DropMask, MaskSampler};
use dropnas::genotype::derive_genotype;
use dropnas::params::{ParamRole, ParamStore};
use dropnas::rng::{stream, Purpose};
use dropnas::space::{enumerate_edges, CellGraph, CellKind, OpGroup, SearchSpace, DARTS_OPS};
use dropnas::supernet::AlphaTable;
use dropnas::train::alpha_adjust;
use dropnas::Tensor;
use proptest::prelude::*;
use rand::{Rng, RngCore};

fn darts() -> SearchSpace {
    SearchSpace::darts()
}

fn keeps_one_per_group(space: &SearchSpace, m: &DropMask) -> bool {
    [OpGroup::Parameterized, OpGroup::NonParameterized]
        .into_iter()
        .all(|g| space.group_indices(g).iter().any(|&o| m.is_kept(o)))
}

/// Counts 64-bit draws so resampling attempts can be observed from outside.
struct Counting<R> {
    inner: R,
    draws: u64,
}

impl<R: RngCore> RngCore for Counting<R> {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.draws += 1;
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[test]
fn whole_group_drop_rate_before_resampling_is_r() {
    let r = 0.2;
    let cfg = DropConfig {
        r,
        r_p: Some(r),
        r_np: Some(0.0),
        resample_cap: 100,
    };
    let sampler = MaskSampler::new(&darts(), &cfg, true).unwrap();
    let mut rng = Counting {
        inner: stream(5, Purpose::Mask, 0, 0),
        draws: 0,
    };
    let n = 100_000;
    let mut resampled = 0;
    for _ in 0..n {
        let before = rng.draws;
        sampler.sample(&mut rng);
        if rng.draws - before > 4 {
            resampled += 1;
        }
    }
    let freq = resampled as f64 / n as f64;
    let se = (r * (1.0 - r) / n as f64).sqrt();
    assert!((freq - r).abs() < 3.0 * se, "{freq}");
}

#[test]
fn edge_enumeration() {
    let g = CellGraph::new(4, CellKind::Normal).unwrap();
    let edges = enumerate_edges(&g);
    assert_eq!(edges.len(), 14);
    assert_eq!((edges[0].from, edges[0].to), (0, 2));
    assert_eq!(
        enumerate_edges(&CellGraph::new(1, CellKind::Normal).unwrap()).len(),
        2
    );
    for (i, e) in edges.iter().enumerate() {
        assert_eq!(g.edge_index(*e), Some(i));
    }
    let r = CellGraph::new(4, CellKind::Reduction).unwrap();
    assert!(enumerate_edges(&r)
        .iter()
        .all(|e| r.stride(*e) == if e.from < 2 { 2 } else { 1 }));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn masks_keep_one_per_group(r in 0.0f64..0.999, cap in 1u32..200, seed in any::<u64>(), grouped in any::<bool>()) {
        let space = darts();
        let cfg = DropConfig { resample_cap: cap, ..DropConfig::with_rate(r) };
        let sampler = MaskSampler::new(&space, &cfg, grouped).unwrap();
        let mut rng = stream(seed, Purpose::Mask, 0, 0);
        for _ in 0..50 {
            let m = sampler.sample(&mut rng);
            prop_assert_eq!(m.len(), space.len());
            if grouped {
                prop_assert!(keeps_one_per_group(&space, &m));
            } else {
                prop_assert!(m.any_kept());
            }
        }
    }

    #[test]
    fn mask_streams_are_reproducible(seed in any::<u64>(), edge in 0u64..14, step in 0u64..1000) {
        let sampler = MaskSampler::new(&darts(), &DropConfig::with_rate(0.3), true).unwrap();
        let a = sampler.sample(&mut stream(seed, Purpose::Mask, step, edge));
        let b = sampler.sample(&mut stream(seed, Purpose::Mask, step, edge));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn drop_prob_inverts_the_power(p in 0.0f64..0.99, size in 1usize..9) {
        let d = drop_prob(p.powi(size as i32), size).unwrap();
        prop_assert!((d - p).abs() < 1e-9);
    }

    #[test]
    fn alpha_adjust_preserves_dropped_p(
        old in prop::collection::vec(-5.0f64..5.0, 8),
        step in prop::collection::vec(-0.5f64..0.5, 8),
        keep_bits in 1u8..=255,
    ) {
        let keep: Vec<bool> = (0..8).map(|i| keep_bits >> i & 1 == 1).collect();
        let mask = DropMask::from_keep(keep.clone());
        let new: Vec<f64> = old.iter().zip(&step).zip(&keep).map(|((a, d), k)| if *k { a + d } else { *a }).collect();
        let adjusted = alpha_adjust(&old, &new, &mask).unwrap();
        let (p0, p1) = (dropnas::autodiff::softmax(&old), dropnas::autodiff::softmax(&adjusted));
        for o in mask.dropped() {
            prop_assert!((p0[o] - p1[o]).abs() < 1e-12);
            prop_assert_eq!(adjusted[o], old[o]);
        }
    }

    #[test]
    fn derivation_ignores_per_edge_shifts(seed in any::<u64>(), nodes in 1usize..5) {
        let space = darts();
        let mut t = AlphaTable::uniform(&space, nodes, &[CellKind::Normal, CellKind::Reduction]).unwrap();
        let mut rng = stream(seed, Purpose::Init, 0, 0);
        for rows in t.alpha.values_mut() {
            rows.iter_mut().flatten().for_each(|a| *a = rng.gen_range(-2.0..2.0));
        }
        let g = derive_genotype(&t, &space).unwrap();
        g.validate(&space, &[CellKind::Normal, CellKind::Reduction]).unwrap();
        let mut shifted = t.clone();
        for rows in shifted.alpha.values_mut() {
            for row in rows.iter_mut() {
                let c: f64 = rng.gen_range(-3.0..3.0);
                row.iter_mut().for_each(|a| *a += c);
            }
        }
        prop_assert_eq!(derive_genotype(&shifted, &space).unwrap(), g);
    }

    #[test]
    fn custom_spaces_partition_into_groups(bits in 1u8..=255) {
        let names: Vec<&str> = DARTS_OPS.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, n)| *n).collect();
        let has = |g: OpGroup| names.iter().any(|n| dropnas::space::OpKind::from_name(n).unwrap().group() == g);
        let built = SearchSpace::new("custom", &names);
        // a space must populate both groups
        prop_assert_eq!(built.is_ok(), has(OpGroup::Parameterized) && has(OpGroup::NonParameterized));
        let Ok(space) = built else { return Ok(()) };
        let p = space.group_indices(OpGroup::Parameterized);
        let np = space.group_indices(OpGroup::NonParameterized);
        let mut all: Vec<usize> = p.iter().chain(&np).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..space.len()).collect::<Vec<_>>());
        prop_assert!(p.iter().all(|o| !np.contains(o)));
    }

    #[test]
    fn checkpoint_round_trip(shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..4), 1..5), seed in any::<u64>()) {
        let mut store = ParamStore::new(seed);
        for (i, s) in shapes.iter().enumerate() {
            let fan = s.iter().product();
            store.add_uniform(format!("p{i}"), s, fan, ParamRole::Weight { op: None }).unwrap();
        }
        store.add(
            "alpha.normal",
            Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1e-300, -0.0, 7.5]).unwrap(),
            ParamRole::Alpha(CellKind::Normal),
        ).unwrap();
        let ckpt = Checkpoint::from_store(&store, [seed as u8; 32]);
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        // Any truncation is reported, never a panic.
        let cut = (seed as usize) % bytes.len();
        prop_assert!(Checkpoint::decode(&bytes[..cut]).is_err());
    }
}

#[test]
fn config_overrides_and_hash() {
    let base = ExperimentConfig::preset("desk").unwrap();
    let json = base.to_json().unwrap();
    assert_eq!(ExperimentConfig::from_json(&json).unwrap(), base);
    let changed = base
        .with_overrides(&["drop.r=0.001", "train.epochs=3"])
        .unwrap();
    assert_eq!(changed.drop.r, 0.001);
    assert_eq!(changed.train.epochs, 3);
    assert_ne!(changed.hash(), base.hash());
    let mut relocated = base.clone();
    relocated.output = Some("elsewhere".into());
    assert_eq!(relocated.hash(), base.hash());
    assert!(base.with_overrides(&["train.nonsense=1"]).is_err());
    assert!(base.with_overrides(&["drop.r=1.5"]).is_err());
    assert!(ExperimentConfig::from_json(&json.replacen('{', "{\"surprise\": 1,", 1)).is_err());
    assert!(ExperimentConfig::preset("huge").is_err());
}
