//! Reverse-mode gradient tape.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and `backward` is a single reverse sweep. Every op
//! checks its output for NaN/Inf and reports the op name and the tape's
//! step index when it finds one.

use super::conv::{Conv2dSpec, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Relu(Var),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    BatchNorm {
        x: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    SoftmaxRow {
        x: Var,
        row: usize,
        keep: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        weights: Var,
        terms: Vec<(usize, Var)>,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    tracked: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    step: u64,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Step index reported in non-finite diagnostics.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Clears gradients but keeps recorded values, allowing another `backward`.
    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: "leaf",
                step: self.step,
            });
        }
        Ok(self.push_unchecked(value, tracked, Op::Leaf))
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push_unchecked(&mut self, value: Tensor, tracked: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name,
                step: self.step,
            });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        Ok(self.push_unchecked(value, tracked, op))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("scale", out, &[x], Op::Scale(x, c))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum", out, &[x], Op::Sum(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("relu", out, &[x], Op::Relu(x))
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = match (ta.dims2(), tb.dims2()) {
            (Some(da), Some(db)) if da.1 == db.0 => (da, db),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", ta.shape(), tb.shape()),
                ))
            }
        };
        debug_assert_eq!(k, k2);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let av = ad[i * k + p];
                let brow = &bd[p * m..(p + 1) * m];
                for (o, bv) in out[i * m..(i + 1) * m].iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        self.push("matmul", out, &[a, b], Op::MatMul(a, b))
    }

    /// Adds a `[m]` bias to every row of an `[n, m]` matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let m = match tx.dims2() {
            Some((_, m)) if tb.shape() == [m] => m,
            _ => {
                return Err(Error::shape(
                    "add_bias",
                    format!("{:?} + {:?}", tx.shape(), tb.shape()),
                ))
            }
        };
        let data = tx
            .data()
            .chunks_exact(m)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(v, b)| v + b))
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_bias", out, &[x, b], Op::AddBias(x, b))
    }

    /// Convolution with "same" padding; `w` is `[c_out, c_in / groups, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), spec)?;
        let data = geom.forward(self.value(x).data(), self.value(w).data());
        let out = Tensor::new(geom.out_shape(), data)?;
        self.push("conv2d", out, &[x, w], Op::Conv2d { x, w, geom })
    }

    pub fn max_pool3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), stride, "max_pool3x3")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.n * geom.c * geom.ho * geom.wo];
        let mut argmax = vec![0; out.len()];
        geom.for_each_window(|o, window| {
            let mut best = window[0];
            for &i in &window[1..] {
                if xd[i] > xd[best] {
                    best = i;
                }
            }
            out[o] = xd[best];
            argmax[o] = best;
        });
        let out = Tensor::new(geom.out_shape(), out)?;
        self.push("max_pool3x3", out, &[x], Op::MaxPool { x, argmax })
    }

    /// Average over in-bounds window elements only (padding is not counted).
    pub fn avg_pool3x3(&mut self, x: Var, stride: usize) -> Result<Var> {
        let geom = PoolGeom::new(self.shape(x), stride, "avg_pool3x3")?;
        let xd = self.value(x).data();
        let mut out = vec![0.0; geom.n * geom.c * geom.ho * geom.wo];
        geom.for_each_window(|o, window| {
            out[o] = window.iter().map(|&i| xd[i]).sum::<f64>() / window.len() as f64;
        });
        let out = Tensor::new(geom.out_shape(), out)?;
        self.push("avg_pool3x3", out, &[x], Op::AvgPool { x, geom })
    }

    /// Batch normalization with per-batch statistics over `(N, H, W)`.
    pub fn batch_norm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let tx = self.value(x);
        let Some((n, c, h, w)) = tx.dims4() else {
            return Err(Error::shape(
                "batch_norm",
                format!("expected 4-D, got {:?}", tx.shape()),
            ));
        };
        if let Some((g, b)) = affine {
            if self.shape(g) != [c] || self.shape(b) != [c] {
                return Err(Error::shape(
                    "batch_norm",
                    "affine parameters must have shape [C]",
                ));
            }
        }
        let hw = h * w;
        let m = (n * hw) as f64;
        let xd = tx.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let planes = || (0..n).map(move |s| (s * c + ch) * hw);
            let mean = planes()
                .map(|base| xd[base..base + hw].iter().sum::<f64>())
                .sum::<f64>()
                / m;
            let var = planes()
                .map(|base| {
                    xd[base..base + hw]
                        .iter()
                        .map(|v| (v - mean).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / m;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = istd;
            for base in planes() {
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean) * istd;
                }
            }
        }
        let mut out = xhat.clone();
        if let Some((g, b)) = affine {
            let (gd, bd) = (self.value(g).data(), self.value(b).data());
            for (i, v) in out.iter_mut().enumerate() {
                let ch = (i / hw) % c;
                *v = *v * gd[ch] + bd[ch];
            }
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        let mut inputs = vec![x];
        if let Some((g, b)) = affine {
            inputs.extend([g, b]);
        }
        self.push(
            "batch_norm",
            out,
            &inputs,
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
            },
        )
    }

    /// Softmax over the last dimension of a 1-D or 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = match tx.shape() {
            [c] | [_, c] => *c,
            s => {
                return Err(Error::shape(
                    "softmax",
                    format!("expected 1-D or 2-D, got {s:?}"),
                ))
            }
        };
        let data = tx
            .data()
            .chunks_exact(cols)
            .flat_map(softmax_slice)
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("softmax", out, &[x], Op::Softmax { x, cols })
    }

    /// Softmax of one row of a 2-D tensor, returned as a 1-D tensor.
    ///
    /// The forward value uses every entry of the row. Gradient flows only to
    /// entries with `keep[j] == true`; the others act as constants.
    pub fn softmax_row(&mut self, x: Var, row: usize, keep: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let Some((rows, cols)) = tx.dims2() else {
            return Err(Error::shape(
                "softmax_row",
                format!("expected 2-D, got {:?}", tx.shape()),
            ));
        };
        if row >= rows || keep.len() != cols {
            return Err(Error::shape(
                "softmax_row",
                format!(
                    "row {row} / keep length {} for shape {:?}",
                    keep.len(),
                    tx.shape()
                ),
            ));
        }
        let data = softmax_slice(&tx.data()[row * cols..(row + 1) * cols]);
        let out = Tensor::new(vec![cols], data)?;
        self.push(
            "softmax_row",
            out,
            &[x],
            Op::SoftmaxRow {
                x,
                row,
                keep: keep.to_vec(),
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let Some((n, k)) = tl.dims2() else {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected 2-D logits, got {:?}", tl.shape()),
            ));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {n}x{k} logits", labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (row, &label) in tl.data().chunks_exact(k).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / n as f64);
        self.push(
            "cross_entropy",
            out,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `sum_k weights[idx_k] * x_k` for same-shaped `x_k`.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[(usize, Var)]) -> Result<Var> {
        let Some(&(_, first)) = terms.first() else {
            return Err(Error::shape("weighted_sum", "no terms"));
        };
        let wd = self.value(weights).data();
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for &(idx, x) in terms {
            let tx = self.value(x);
            if tx.shape() != shape.as_slice() || idx >= wd.len() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {:?} (weight {idx}) vs {shape:?}", tx.shape()),
                ));
            }
            let c = wd[idx];
            out.iter_mut().zip(tx.data()).for_each(|(o, v)| *o += c * v);
        }
        let out = Tensor::new(shape, out)?;
        let mut inputs: Vec<Var> = terms.iter().map(|t| t.1).collect();
        inputs.push(weights);
        self.push(
            "weighted_sum",
            out,
            &inputs,
            Op::WeightedSum {
                weights,
                terms: terms.to_vec(),
            },
        )
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let Some((n, _, h, w)) = self.value(first).dims4() else {
            return Err(Error::shape("concat", "expected 4-D inputs"));
        };
        let mut total_c = 0;
        for &x in xs {
            match self.value(x).dims4() {
                Some((n2, c, h2, w2)) if (n2, h2, w2) == (n, h, w) => total_c += c,
                _ => {
                    return Err(Error::shape(
                        "concat",
                        format!("incompatible {:?}", self.shape(x)),
                    ))
                }
            }
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total_c * hw);
        for s in 0..n {
            for &x in xs {
                let t = self.value(x);
                let c = t.shape()[1];
                out.extend_from_slice(&t.data()[s * c * hw..(s + 1) * c * hw]);
            }
        }
        let out = Tensor::new(vec![n, total_c, h, w], out)?;
        self.push("concat", out, xs, Op::Concat(xs.to_vec()))
    }

    /// `(N, C, H, W) -> (N, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let Some((n, c, h, w)) = tx.dims4() else {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected 4-D, got {:?}", tx.shape()),
            ));
        };
        let hw = h * w;
        let data = tx
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::new(vec![n, c], data)?;
        self.push("global_avg_pool", out, &[x], Op::GlobalAvgPool(x))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without clearing gradients".into(),
            ));
        }
        if self.value(loss).numel() != 1 || !self.tracked(loss) {
            return Err(Error::Contract(
                "backward needs a tracked scalar loss".into(),
            ));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, delta) in contributions {
                if self.nodes[v.0].tracked {
                    accumulate(&mut self.nodes[v.0].grad, delta);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if self.tracked(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(x, c) => out.push((*x, g.iter().map(|v| v * c).collect())),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()])),
            Op::Relu(x) => out.push((
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            Op::MatMul(a, b) => {
                let (n, k) = self.nodes[a.0].value.dims2().unwrap();
                let m = self.nodes[b.0].value.shape()[1];
                let (ad, bd) = (val(*a), val(*b));
                if self.tracked(*a) {
                    let mut da = vec![0.0; n * k];
                    for r in 0..n {
                        for p in 0..k {
                            da[r * k + p] = (0..m).map(|c| g[r * m + c] * bd[p * m + c]).sum();
                        }
                    }
                    out.push((*a, da));
                }
                if self.tracked(*b) {
                    let mut db = vec![0.0; k * m];
                    for r in 0..n {
                        for p in 0..k {
                            let av = ad[r * k + p];
                            for c in 0..m {
                                db[p * m + c] += av * g[r * m + c];
                            }
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::AddBias(x, b) => {
                let m = self.nodes[b.0].value.numel();
                out.push((*x, g.to_vec()));
                let mut db = vec![0.0; m];
                for row in g.chunks_exact(m) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
                out.push((*b, db));
            }
            Op::Conv2d { x, w, geom } => {
                if self.tracked(*x) {
                    out.push((*x, geom.backward_input(val(*w), g)));
                }
                if self.tracked(*w) {
                    let wlen = self.nodes[w.0].value.numel();
                    out.push((*w, geom.backward_weight(val(*x), g, wlen)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::AvgPool { x, geom } => {
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                geom.for_each_window(|o, window| {
                    let share = g[o] / window.len() as f64;
                    for &i in window {
                        dx[i] += share;
                    }
                });
                out.push((*x, dx));
            }
            Op::BatchNorm {
                x,
                affine,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                let m = (n * hw) as f64;
                let gamma = affine.map(|(gv, _)| val(gv));
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let scale = gamma.map_or(1.0, |gd| gd[ch]);
                    let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                            let d = g[i] * scale;
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                    }
                    for s in 0..n {
                        let base = (s * c + ch) * hw;
                        for i in base..base + hw {
                            let d = g[i] * scale;
                            dx[i] = inv_std[ch] / m * (m * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
                out.push((*x, dx));
                if let Some((gv, bv)) = affine {
                    out.push((*gv, dgamma));
                    out.push((*bv, dbeta));
                }
            }
            Op::Softmax { x, cols } => {
                let y = self.nodes[i].value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(*cols).zip(g.chunks_exact(*cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                out.push((*x, dx));
            }
            Op::SoftmaxRow { x, row, keep } => {
                let y = self.nodes[i].value.data();
                let cols = keep.len();
                let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                let mut dx = vec![0.0; self.nodes[x.0].value.numel()];
                for j in 0..cols {
                    if keep[j] {
                        dx[row * cols + j] = y[j] * (g[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] -= scale;
                }
                out.push((*logits, dl));
            }
            Op::WeightedSum { weights, terms } => {
                let wd = val(*weights);
                let mut dw = vec![0.0; wd.len()];
                for &(idx, x) in terms {
                    if self.tracked(x) {
                        out.push((x, g.iter().map(|v| v * wd[idx]).collect()));
                    }
                    dw[idx] += g.iter().zip(val(x)).map(|(a, b)| a * b).sum::<f64>();
                }
                out.push((*weights, dw));
            }
            Op::Concat(xs) => {
                let (n, total_c, h, w) = self.nodes[i].value.dims4().unwrap();
                let hw = h * w;
                let mut offset = 0;
                for &x in xs {
                    let c = self.nodes[x.0].value.shape()[1];
                    if self.tracked(x) {
                        let mut dx = Vec::with_capacity(n * c * hw);
                        for s in 0..n {
                            let base = (s * total_c + offset) * hw;
                            dx.extend_from_slice(&g[base..base + c * hw]);
                        }
                        out.push((x, dx));
                    }
                    offset += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4().unwrap();
                let hw = h * w;
                let dx = g
                    .iter()
                    .flat_map(|v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                out.push((*x, dx));
            }
        }
        out
    }
}

pub(crate) fn softmax_slice(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax of a slice; public helper for code that works on plain values.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    softmax_slice(values)
}
