use rand::seq::index::sample;
use serde::Serialize;

use super::kmeans::kmeans;
use super::pca::pca;
use super::ClusterConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::supernet::{EdgeRef, Supernet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClusterReport {
    pub schema_version: u32,
    pub cell: usize,
    pub kind: String,
    pub edge: String,
    pub samples: usize,
    pub ops: Vec<String>,
    /// 2-D PCA coordinates, one per op.
    pub coords: Vec<[f64; 2]>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    pub objective_history: Vec<f64>,
    /// Every op produced the same feature vector.
    pub degenerate: bool,
    /// Some cluster ended up empty.
    pub collapsed: bool,
    pub warnings: Vec<String>,
}

/// Per op, the spatial mean of every channel of every sample, concatenated
/// in sample order.
pub fn pooled_features(maps: &[Tensor]) -> Result<Vec<Vec<f64>>> {
    maps.iter()
        .map(|t| {
            let (n, c, h, w) = t
                .dims4()
                .ok_or_else(|| Error::shape("pooled_features", "expected 4-D feature maps"))?;
            let plane = (h * w) as f64;
            Ok((0..n * c)
                .map(|i| t.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / plane)
                .collect())
        })
        .collect()
}

/// Clusters the outputs of the non-zero ops on one edge: a random sample of
/// the data is pushed through the supernet with every op kept, each op's
/// output is mean-pooled per channel, then k-means groups the ops and PCA
/// gives a 2-D layout.
pub fn cluster_edge_features(
    net: &Supernet,
    at: EdgeRef,
    data: &Dataset,
    cfg: &ClusterConfig,
    batch_size: usize,
    seed: u64,
) -> Result<ClusterReport> {
    let edge = net
        .mixed_edge(at)
        .ok_or_else(|| Error::Config(format!("no edge {} in cell {}", at.edge, at.cell)))?
        .edge;
    if data.is_empty() {
        return Err(Error::Config("cluster: empty dataset".into()));
    }
    let mut warnings = Vec::new();
    let samples = cfg.samples.min(data.len());
    if samples < cfg.samples {
        warnings.push(format!(
            "dataset has {} samples; using all of them",
            data.len()
        ));
    }
    let mut picked = sample(
        &mut stream(seed, Purpose::Sample, 0, 0),
        data.len(),
        samples,
    )
    .into_vec();
    picked.sort_unstable();

    let mut names = Vec::new();
    let mut points: Vec<Vec<f64>> = Vec::new();
    for idx in picked.chunks(batch_size.max(1)) {
        let batch = data.batch(idx)?;
        let features = net.extract_edge_features(at, &batch.images)?;
        let (ops, maps): (Vec<String>, Vec<Tensor>) = features.into_iter().unzip();
        let pooled = pooled_features(&maps)?;
        if points.is_empty() {
            names = ops;
            points = pooled;
        } else {
            points.iter_mut().zip(pooled).for_each(|(p, q)| p.extend(q));
        }
    }

    let degenerate = points.windows(2).all(|w| w[0] == w[1]);
    if degenerate {
        warnings.push("all op features are identical".into());
    }
    let km = kmeans(
        &points,
        cfg.k,
        cfg.restarts,
        cfg.max_iter,
        &mut stream(seed, Purpose::KMeans, 0, 0),
    )?;
    if km.collapsed || km.centroids.len() < cfg.k {
        warnings.push(format!("k-means could not fill {} clusters", cfg.k));
    }
    let dims = points[0].len().min(2);
    let proj = pca(&points, dims)?;
    let coords = proj
        .coords
        .iter()
        .map(|c| [c[0], c.get(1).copied().unwrap_or(0.0)])
        .collect();
    Ok(ClusterReport {
        schema_version: 1,
        cell: at.cell,
        kind: net.cell_kind(at.cell).label().to_string(),
        edge: edge.to_string(),
        samples,
        ops: names,
        coords,
        collapsed: km.collapsed || km.centroids.len() < cfg.k,
        assignment: km.assignment,
        inertia: km.inertia,
        objective_history: km.history,
        degenerate,
        warnings,
    })
}
