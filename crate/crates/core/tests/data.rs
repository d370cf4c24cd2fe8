use std::path::Path;

use dropnas::autodiff::{Conv2dSpec, Optimizer, Tape, UpdateMask};
use dropnas::data::{Dataset, DatasetKind, DatasetSpec, Split};
use dropnas::params::{ParamRole, ParamStore};
use dropnas::Tensor;
use serde::{Deserialize, Serialize};

fn spirals(seed: u64) -> Split {
    DatasetSpec::default().load(seed).unwrap()
}

#[test]
fn synthetic_data_is_deterministic_and_balanced() {
    let a = spirals(3);
    let b = spirals(3);
    assert_eq!(a.train.images, b.train.images);
    assert_eq!(a.test.labels, b.test.labels);
    assert_ne!(spirals(4).train.images, a.train.images);

    let spec = DatasetSpec {
        kind: DatasetKind::SyntheticBlobs,
        train_samples: 1000,
        ..DatasetSpec::default()
    };
    let split = spec.load(0).unwrap();
    assert_eq!(split.train.class_counts(), vec![250; 4]);
}

#[test]
fn train_and_test_do_not_overlap() {
    let s = spirals(5);
    let train: Vec<&[f64]> = (0..s.train.len()).map(|i| s.train.image(i)).collect();
    for i in 0..s.test.len() {
        assert!(!train.contains(&s.test.image(i)));
    }
}

/// Linear softmax classifier on raw pixels, or two 3x3 conv layers with
/// global pooling and a dense head.
fn train_baseline(split: &Split, conv: bool) -> f64 {
    let d = &split.train;
    let features = d.channels * d.height * d.width;
    let mut store = ParamStore::new(11);
    let role = ParamRole::Weight { op: None };
    if conv {
        store
            .add_uniform("c1", &[16, d.channels, 3, 3], d.channels * 9, role)
            .unwrap();
        store
            .add_uniform("c2", &[16, 16, 3, 3], 16 * 9, role)
            .unwrap();
        store.add_uniform("w", &[16, d.classes], 16, role).unwrap();
    } else {
        store
            .add_uniform("w", &[features, d.classes], features, role)
            .unwrap();
    }
    store.add("b", Tensor::zeros(&[d.classes]), role).unwrap();

    let forward = |tape: &mut Tape, vars: &[dropnas::autodiff::Var], images: &Tensor| {
        let n = images.shape()[0];
        if conv {
            let x = tape.constant(images.clone()).unwrap();
            let h = tape.conv2d(x, vars[0], Conv2dSpec::plain()).unwrap();
            let h = tape.relu(h).unwrap();
            let h = tape.conv2d(h, vars[1], Conv2dSpec::plain()).unwrap();
            let h = tape.relu(h).unwrap();
            let h = tape.global_avg_pool(h).unwrap();
            let h = tape.matmul(h, vars[2]).unwrap();
            tape.add_bias(h, vars[3]).unwrap()
        } else {
            let flat = Tensor::new(vec![n, features], images.data().to_vec()).unwrap();
            let x = tape.constant(flat).unwrap();
            let h = tape.matmul(x, vars[0]).unwrap();
            tape.add_bias(h, vars[1]).unwrap()
        }
    };

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut opt = Optimizer::adam(0.01, 0.9, 0.999, 0.0);
    for epoch in 0..30 {
        for idx in d.batch_indices(32, Some((11, epoch))) {
            let batch = d.batch(&idx).unwrap();
            let mut tape = Tape::new();
            let vars = store.register(&mut tape).unwrap();
            let logits = forward(&mut tape, &vars, &batch.images);
            let loss = tape.cross_entropy(logits, &batch.labels).unwrap();
            tape.backward(loss).unwrap();
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .map(|&v| tape.grad(v).unwrap().to_vec())
                .collect();
            let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            let masks = vec![UpdateMask::full(); ids.len()];
            let mut values = store.values_mut(&ids).unwrap();
            opt.step(&mut values, &grad_refs, &masks).unwrap();
        }
    }
    accuracy(&store, &split.test, &forward)
}

fn accuracy(
    store: &ParamStore,
    data: &Dataset,
    forward: &dyn Fn(&mut Tape, &[dropnas::autodiff::Var], &Tensor) -> dropnas::autodiff::Var,
) -> f64 {
    let mut correct = 0.0;
    for idx in data.batch_indices(128, None) {
        let batch = data.batch(&idx).unwrap();
        let mut tape = Tape::new();
        let vars = store.register(&mut tape).unwrap();
        let logits = forward(&mut tape, &vars, &batch.images);
        correct += dropnas::nn::accuracy(tape.value(logits), &batch.labels) * idx.len() as f64;
    }
    correct / data.len() as f64
}

#[derive(Debug, Serialize, Deserialize)]
struct BaselineFixture {
    linear_acc: f64,
    conv_acc: f64,
}

#[test]
fn conv_baseline_beats_linear_on_spirals() {
    let split = spirals(0);
    let linear_acc = train_baseline(&split, false);
    let conv_acc = train_baseline(&split, true);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/baseline_margin.json");
    if std::env::var_os("DROPNAS_RECORD_FIXTURES").is_some() {
        let body = serde_json::to_string_pretty(&BaselineFixture {
            linear_acc,
            conv_acc,
        })
        .unwrap();
        std::fs::write(&path, body).unwrap();
    }
    let fixture: BaselineFixture =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert!(
        conv_acc > linear_acc,
        "conv {conv_acc} vs linear {linear_acc}"
    );
    assert!(
        (linear_acc - fixture.linear_acc).abs() < 1e-9,
        "{linear_acc}"
    );
    assert!((conv_acc - fixture.conv_acc).abs() < 1e-9, "{conv_acc}");
}
