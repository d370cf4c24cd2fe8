use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, DatasetKind, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Deterministic synthetic image data. Train and test come from separate
/// streams, and labels are balanced (`i % classes` before shuffling).
///
/// * `synthetic-blobs`: a Gaussian bump whose position and channel colour
///   depend on the class, with jitter and noise. Linearly separable-ish.
/// * `synthetic-spirals`: `cos(m*theta + b*r + phi)` textures with `m = class + 1`
///   arms and a random phase `phi` per sample. The class mean image is zero, so
///   a linear classifier sits near chance while local filters can count arms.
pub fn make_synthetic(spec: &DatasetSpec, seed: u64) -> Result<Split> {
    let blob_centers = match spec.kind {
        DatasetKind::SyntheticBlobs => Some(blob_layout(spec, seed)),
        DatasetKind::SyntheticSpirals => None,
        DatasetKind::Cifar10Binary => {
            return Err(Error::Config(
                "cifar10-binary is not a synthetic kind".into(),
            ))
        }
    };
    let make = |split: u64, n: usize| {
        let mut rng = stream(seed, Purpose::Data, split, 0);
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        labels.shuffle(&mut rng);
        let mut images = Vec::with_capacity(n * spec.channels * spec.image_size * spec.image_size);
        for &label in &labels {
            match &blob_centers {
                Some(layout) => render_blob(spec, &layout[label], &mut rng, &mut images),
                None => render_spiral(spec, label, &mut rng, &mut images),
            }
        }
        Dataset {
            images,
            labels,
            channels: spec.channels,
            height: spec.image_size,
            width: spec.image_size,
            classes: spec.classes,
        }
    };
    Ok(Split {
        train: make(0, spec.train_samples),
        test: make(1, spec.test_samples),
    })
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

/// Pixel centre in `[-1, 1]` coordinates.
fn coord(i: usize, size: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / size as f64 - 1.0
}

struct BlobClass {
    cx: f64,
    cy: f64,
    colour: Vec<f64>,
}

fn blob_layout(spec: &DatasetSpec, seed: u64) -> Vec<BlobClass> {
    let mut rng = stream(seed, Purpose::Data, 2, 0);
    (0..spec.classes)
        .map(|k| {
            let angle = 2.0 * PI * k as f64 / spec.classes as f64;
            BlobClass {
                cx: 0.5 * angle.cos(),
                cy: 0.5 * angle.sin(),
                colour: (0..spec.channels)
                    .map(|_| rng.gen_range(0.3..1.0))
                    .collect(),
            }
        })
        .collect()
}

fn render_blob(spec: &DatasetSpec, class: &BlobClass, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let s = spec.image_size;
    let cx = class.cx + rng.gen_range(-0.15..0.15);
    let cy = class.cy + rng.gen_range(-0.15..0.15);
    let width = 0.35;
    for c in 0..spec.channels {
        for y in 0..s {
            for x in 0..s {
                let d2 = (coord(x, s) - cx).powi(2) + (coord(y, s) - cy).powi(2);
                let v = class.colour[c] * (-d2 / (2.0 * width * width)).exp();
                out.push(v + spec.noise * gauss(rng));
            }
        }
    }
}

fn render_spiral(spec: &DatasetSpec, label: usize, rng: &mut ChaCha8Rng, out: &mut Vec<f64>) {
    let s = spec.image_size;
    let arms = (label + 1) as f64;
    let twist = 3.0;
    let phi = rng.gen_range(0.0..2.0 * PI);
    let cx = rng.gen_range(-0.1..0.1);
    let cy = rng.gen_range(-0.1..0.1);
    let amp = rng.gen_range(0.8..1.2);
    for c in 0..spec.channels {
        let shift = 2.0 * PI * c as f64 / spec.channels as f64;
        for y in 0..s {
            for x in 0..s {
                let (u, v) = (coord(x, s) - cx, coord(y, s) - cy);
                let r = (u * u + v * v).sqrt();
                let theta = v.atan2(u);
                let val = amp * (arms * theta + twist * r + phi + shift).cos();
                out.push(val + spec.noise * gauss(rng));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind) -> DatasetSpec {
        DatasetSpec {
            kind,
            train_samples: 1000,
            test_samples: 40,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn same_seed_same_data() {
        for kind in [DatasetKind::SyntheticBlobs, DatasetKind::SyntheticSpirals] {
            let a = make_synthetic(&spec(kind), 3).unwrap();
            let b = make_synthetic(&spec(kind), 3).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
            let c = make_synthetic(&spec(kind), 4).unwrap();
            assert_ne!(a.train, c.train);
        }
    }

    #[test]
    fn balanced_labels() {
        let d = make_synthetic(&spec(DatasetKind::SyntheticSpirals), 0).unwrap();
        assert_eq!(d.train.class_counts(), vec![250; 4]);
    }

    #[test]
    fn shapes() {
        let d = make_synthetic(&spec(DatasetKind::SyntheticBlobs), 0).unwrap();
        assert_eq!(d.train.images.len(), 1000 * 3 * 64);
        assert_eq!(d.test.len(), 40);
        assert!(d.train.images.iter().all(|v| v.is_finite()));
    }
}
