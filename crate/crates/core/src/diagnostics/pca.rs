use crate::error::{Error, Result};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in descending order and the matching unit
/// eigenvectors (as rows).
pub fn symmetric_eigen(a: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    if a.iter().any(|r| r.len() != n) {
        return Err(Error::shape("symmetric_eigen", "matrix is not square"));
    }
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect())
        .collect();
    let scale: f64 = m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q] == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j][j].total_cmp(&m[i][i]));
    let values = order.iter().map(|&i| m[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| v[k][i]).collect())
        .collect();
    Ok((values, vectors))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, one per row.
    pub components: Vec<Vec<f64>>,
    /// Variance captured by each component.
    pub explained: Vec<f64>,
    /// Projection of every input point.
    pub coords: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt `v` against `basis`; returns `None` when nothing is left.
fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for _ in 0..2 {
        for b in basis {
            let d = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
        }
    }
    let norm = dot(&v, &v).sqrt();
    (norm > 1e-8).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Principal components via the eigen-decomposition of the centred Gram
/// matrix (cheap when there are far fewer points than dimensions). When the
/// data has rank below `k` the basis is completed with arbitrary
/// orthonormal directions that carry zero variance.
pub fn pca(points: &[Vec<f64>], k: usize) -> Result<Pca> {
    let n = points.len();
    if n == 0 || k == 0 {
        return Err(Error::Config("pca needs points and k > 0".into()));
    }
    let d = points[0].len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::shape("pca", "points differ in dimension"));
    }
    if k > d {
        return Err(Error::Config(format!(
            "pca: {k} components from {d} dimensions"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    let centred: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let gram: Vec<Vec<f64>> = centred
        .iter()
        .map(|a| centred.iter().map(|b| dot(a, b)).collect())
        .collect();
    let (values, vectors) = symmetric_eigen(&gram)?;
    let tol = values.first().copied().unwrap_or(0.0).abs() * 1e-12;
    let mut components: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (lambda, u) in values.iter().zip(&vectors) {
        if components.len() == k || *lambda <= tol {
            break;
        }
        let dir: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|i| centred[i][j] * u[i]).sum::<f64>())
            .collect();
        if let Some(c) = orthonormalize(dir, &components) {
            components.push(c);
        }
    }
    let mut axis = 0;
    while components.len() < k {
        let mut e = vec![0.0; d];
        e[axis] = 1.0;
        axis += 1;
        if let Some(c) = orthonormalize(e, &components) {
            components.push(c);
        }
    }
    let coords: Vec<Vec<f64>> = centred
        .iter()
        .map(|x| components.iter().map(|c| dot(x, c)).collect())
        .collect();
    let explained = (0..k)
        .map(|c| {
            coords.iter().map(|p| p[c] * p[c]).sum::<f64>() / n.max(2).saturating_sub(1) as f64
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained,
        coords,
    })
}

impl Pca {
    /// Maps projected coordinates back to the input space.
    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            out.iter_mut().zip(comp).for_each(|(o, v)| *o += c * v);
        }
        out
    }
}
