use dropnas::autodiff::Tape;
use dropnas::data::{DatasetKind, DatasetSpec};
use dropnas::drop::{DropConfig, DropMask, MaskSampler};
use dropnas::nn::NetConfig;
use dropnas::rng::{stream, Purpose};
use dropnas::space::{CellKind, SearchSpace};
use dropnas::supernet::{EdgeRef, MaskSet, Supernet};
use dropnas::{Error, Tensor};
use rand::Rng;

fn net(seed: u64) -> Supernet {
    let cfg = NetConfig {
        cells: 3,
        nodes: 2,
        channels: 4,
        ..NetConfig::default()
    };
    Supernet::new(&cfg, &SearchSpace::darts(), 3, 4, seed).unwrap()
}

fn images(n: usize, seed: u64) -> Tensor {
    let split = DatasetSpec {
        kind: DatasetKind::SyntheticSpirals,
        train_samples: 16,
        test_samples: 4,
        ..DatasetSpec::default()
    }
    .load(seed)
    .unwrap();
    split
        .train
        .batch(&(0..n).collect::<Vec<_>>())
        .unwrap()
        .images
}

fn random_masks(net: &Supernet, seed: u64, r: f64) -> MaskSet {
    let sampler = MaskSampler::new(net.space(), &DropConfig::with_rate(r), true).unwrap();
    let mut rng = stream(seed, Purpose::Mask, 0, 0);
    MaskSet::new(
        net.kinds()
            .into_iter()
            .map(|k| {
                (
                    k,
                    (0..net.edges(k).len())
                        .map(|_| sampler.sample(&mut rng))
                        .collect(),
                )
            })
            .collect(),
    )
}

/// A 4-D input at the resolution of cell 0's preprocessed inputs.
fn edge_input(net: &Supernet, seed: u64) -> Tensor {
    net.edge_input(EdgeRef { cell: 0, edge: 0 }, &images(3, seed))
        .unwrap()
}

fn op_outputs(net: &Supernet, x: &Tensor) -> Vec<Option<Tensor>> {
    let edge = net.mixed_edge(EdgeRef { cell: 0, edge: 0 }).unwrap();
    let mut tape = Tape::new();
    let vars = net.params().register(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    edge.ops()
        .iter()
        .map(|op| {
            op.forward(&mut tape, &vars, xv)
                .unwrap()
                .map(|v| tape.value(v).clone())
        })
        .collect()
}

fn mixed(net: &Supernet, x: &Tensor, mask: &DropMask) -> Result<Tensor, Error> {
    let edge = net.mixed_edge(EdgeRef { cell: 0, edge: 0 }).unwrap();
    let mut tape = Tape::new();
    let vars = net.params().register(&mut tape).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let alpha = vars[net.alpha_id(CellKind::Normal).unwrap().index()];
    let out = net.mixed_forward(&mut tape, &vars, xv, edge, alpha, 0, mask)?;
    Ok(tape.value(out).clone())
}

#[test]
fn uniform_alpha_gives_plain_average() {
    let n = net(1);
    let x = edge_input(&n, 1);
    let out = mixed(&n, &x, &DropMask::all_kept(8)).unwrap();
    let mut expect = vec![0.0; x.numel()];
    for t in op_outputs(&n, &x).into_iter().flatten() {
        expect
            .iter_mut()
            .zip(t.data())
            .for_each(|(e, v)| *e += v / 8.0);
    }
    let expect = Tensor::new(x.shape().to_vec(), expect).unwrap();
    assert!(out.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn dropped_terms_vanish_but_keep_their_softmax_share() {
    let n = net(2);
    let space = n.space().clone();
    let x = edge_input(&n, 2);
    let mut keep = vec![false; 8];
    keep[space.index_of("skip_connect").unwrap()] = true;
    keep[space.index_of("sep_conv_3x3").unwrap()] = true;
    let out = mixed(&n, &x, &DropMask::from_keep(keep)).unwrap();
    let sep = op_outputs(&n, &x)[space.index_of("sep_conv_3x3").unwrap()]
        .clone()
        .unwrap();
    let expect: Vec<f64> = x
        .data()
        .iter()
        .zip(sep.data())
        .map(|(a, b)| 0.125 * a + 0.125 * b)
        .collect();
    assert!(out.max_abs_diff(&Tensor::new(x.shape().to_vec(), expect).unwrap()) < 1e-14);
}

#[test]
fn all_dropped_mask_is_rejected() {
    let n = net(3);
    let x = edge_input(&n, 3);
    let err = mixed(&n, &x, &DropMask::from_keep(vec![false; 8])).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn dropped_ops_get_exactly_zero_gradients() {
    let mut n = net(4);
    let mut table = n.alpha_table();
    let mut rng = stream(4, Purpose::Init, 3, 0);
    for rows in table.alpha.values_mut() {
        rows.iter_mut()
            .flatten()
            .for_each(|a| *a = rng.gen_range(-1.0..1.0));
    }
    n.set_alpha_table(&table).unwrap();
    let masks = random_masks(&n, 4, 0.3);
    let split_images = images(6, 4);
    let mut tape = Tape::new();
    let vars = n.params().register(&mut tape).unwrap();
    let x = tape.constant(split_images).unwrap();
    let logits = n.forward(&mut tape, &vars, x, &masks).unwrap();
    let loss = tape.cross_entropy(logits, &[0, 1, 2, 3, 0, 1]).unwrap();
    tape.backward(loss).unwrap();

    let mut dropped_weights = 0;
    for (id, p) in n.params().iter() {
        if let dropnas::params::ParamRole::Weight { op: Some(slot) } = p.role {
            if !masks.is_kept(slot) {
                dropped_weights += 1;
                let g = tape.grad(vars[id.index()]);
                assert!(g.is_none_or(|g| g.iter().all(|&v| v == 0.0)), "{}", p.name);
            }
        }
    }
    assert!(dropped_weights > 0);
    for kind in n.kinds() {
        let g = tape.grad(vars[n.alpha_id(kind).unwrap().index()]).unwrap();
        for (e, mask) in masks.kind(kind).unwrap().iter().enumerate() {
            for o in mask.dropped() {
                assert_eq!(g[e * 8 + o], 0.0);
            }
        }
    }
}

#[test]
fn node_is_the_sum_of_its_edges() {
    let n = net(5);
    let x0 = edge_input(&n, 5);
    let x1 = edge_input(&n, 6);
    let x2 = edge_input(&n, 7);
    let masks = random_masks(&n, 5, 0.2);
    let mut tape = Tape::new();
    let vars = n.params().register(&mut tape).unwrap();
    let states: Vec<_> = [x0, x1, x2]
        .into_iter()
        .map(|x| tape.constant(x).unwrap())
        .collect();
    let node = n
        .node_forward(&mut tape, &vars, 0, &states, 3, &masks)
        .unwrap();
    let alpha = vars[n.alpha_id(CellKind::Normal).unwrap().index()];
    let mut expect: Option<Vec<f64>> = None;
    for (e, edge) in n
        .edges(CellKind::Normal)
        .iter()
        .enumerate()
        .filter(|(_, e)| e.to == 3)
    {
        let me = n.mixed_edge(EdgeRef { cell: 0, edge: e }).unwrap();
        let out = n
            .mixed_forward(
                &mut tape,
                &vars,
                states[edge.from],
                me,
                alpha,
                e,
                masks.get(CellKind::Normal, e).unwrap(),
            )
            .unwrap();
        let v = tape.value(out).data().to_vec();
        expect = Some(match expect {
            None => v,
            Some(acc) => acc.iter().zip(&v).map(|(a, b)| a + b).collect(),
        });
    }
    let got = tape.value(node).data();
    for (a, b) in got.iter().zip(expect.unwrap()) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn zero_batch_gives_finite_logits_deterministically() {
    let n = net(6);
    let zeros = Tensor::zeros(&[2, 3, 8, 8]);
    let masks = n.all_kept_masks();
    let a = n.logits(&zeros, &masks).unwrap();
    assert_eq!(a.shape(), &[2, 4]);
    assert!(a.is_finite());
    let x = images(4, 6);
    let m = random_masks(&n, 6, 0.5);
    assert_eq!(n.logits(&x, &m).unwrap(), net(6).logits(&x, &m).unwrap());
}

#[test]
fn dropped_op_weights_do_not_affect_output() {
    let mut n = net(7);
    let masks = random_masks(&n, 7, 0.4);
    let x = images(3, 7);
    let before = n.logits(&x, &masks).unwrap();
    let ids: Vec<_> = n
        .params()
        .iter()
        .filter(|(_, p)| matches!(p.role, dropnas::params::ParamRole::Weight { op: Some(s) } if !masks.is_kept(s)))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        n.params_mut()
            .get_mut(id)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = -*v + 0.3);
    }
    assert_eq!(before, n.logits(&x, &masks).unwrap());
}

#[test]
fn edge_features() {
    let n = net(8);
    let x = images(3, 8);
    let at = EdgeRef { cell: 0, edge: 1 };
    let feats = n.extract_edge_features(at, &x).unwrap();
    assert_eq!(feats.len(), 7);
    let shape = feats[0].1.shape().to_vec();
    assert!(feats.iter().all(|(_, f)| f.shape() == shape.as_slice()));
    let identity = &feats
        .iter()
        .find(|(name, _)| name == "skip_connect")
        .unwrap()
        .1;
    assert_eq!(identity, &n.edge_input(at, &x).unwrap());
    let again = n.extract_edge_features(at, &x).unwrap();
    assert_eq!(feats, again);
    assert!(n
        .extract_edge_features(EdgeRef { cell: 0, edge: 99 }, &x)
        .is_err());
}

#[test]
fn parameter_bookkeeping() {
    let n = net(9);
    let alpha: Vec<_> = n
        .params()
        .iter()
        .filter(|(_, p)| p.role.is_alpha())
        .map(|(_, p)| p.name.clone())
        .collect();
    assert_eq!(alpha, vec!["alpha.normal", "alpha.reduce"]);
    assert!(n.params().iter().all(|(_, p)| !p.name.contains(".none")));
    for kind in n.kinds() {
        let id = n.alpha_id(kind).unwrap();
        assert_eq!(n.params().get(id).value.shape(), &[5, 8]);
        for e in 0..5 {
            let p = n.alpha_table().probs(kind, e);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }
    assert!(n.params().weight_count() > 0);
}
