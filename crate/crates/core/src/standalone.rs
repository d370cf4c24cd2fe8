//! Discrete networks built from a genotype and trained from scratch (or from
//! inherited supernet weights).
//!
//! Parameter names follow the supernet (`stem.*`, `cell{c}.pre0.*`,
//! `cell{c}.e{from}-{to}.{op}.*`, `head.*`), so weights of a same-shaped
//! supernet can be copied over by name.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, Optimizer, Tape, UpdateMask, Var};
use crate::data::{Batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::genotype::Genotype;
use crate::nn::{accuracy, plan_cells, CellInputs, CellPlan, Head, NetConfig, OpModule, Stem};
use crate::params::{ParamRole, ParamStore};
use crate::rng::{stream, Purpose};
use crate::space::{CellGraph, CellKind, Edge, SearchSpace};
use crate::tensor::Tensor;
use crate::train::cosine_lr;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub cells: usize,
    pub channels: usize,
    pub stem_multiplier: usize,
    pub reductions: Option<Vec<usize>>,
    pub bn_affine: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Side of the square zeroed by cutout; `None` disables it.
    pub cutout: Option<usize>,
    /// Loss weight of the auxiliary head; `None` disables it.
    pub aux_weight: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            cells: 8,
            channels: 16,
            stem_multiplier: 3,
            reductions: None,
            bn_affine: true,
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            lr_min: 0.0,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 3.0,
            cutout: None,
            aux_weight: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "eval.epochs and eval.batch_size must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr)
            || !(0.0..1.0).contains(&self.momentum)
            || !(self.weight_decay >= 0.0)
            || !(self.grad_clip > 0.0)
        {
            return Err(Error::Config("eval optimizer settings out of range".into()));
        }
        if self.cutout == Some(0) || self.aux_weight.is_some_and(|w| !(w >= 0.0)) {
            return Err(Error::Config(
                "eval.cutout must be positive and eval.aux_weight non-negative".into(),
            ));
        }
        self.net_config(1).validate()
    }

    pub fn net_config(&self, nodes: usize) -> NetConfig {
        NetConfig {
            cells: self.cells,
            nodes,
            channels: self.channels,
            stem_multiplier: self.stem_multiplier,
            reductions: self.reductions.clone(),
            bn_affine: self.bn_affine,
        }
    }
}

#[derive(Clone, Debug)]
struct DiscreteCell {
    plan: CellPlan,
    inputs: CellInputs,
    /// `(edge, op)` pairs; node `j` sums the ops whose edge ends at `j`.
    ops: Vec<(Edge, OpModule)>,
    nodes: usize,
}

#[derive(Clone, Debug)]
pub struct StandaloneNet {
    cfg: NetConfig,
    genotype: Genotype,
    params: ParamStore,
    stem: Stem,
    cells: Vec<DiscreteCell>,
    head: Head,
    aux: Option<(usize, Head)>,
}

impl StandaloneNet {
    /// Builds the network. `aux_head` attaches a second classifier to the
    /// last reduction cell (or the last cell if there is none).
    pub fn new(
        genotype: &Genotype,
        space: &SearchSpace,
        cfg: &NetConfig,
        in_channels: usize,
        classes: usize,
        aux_head: bool,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if genotype.nodes() != cfg.nodes {
            return Err(Error::Config(format!(
                "genotype has {} nodes, network config {}",
                genotype.nodes(),
                cfg.nodes
            )));
        }
        let (plans, out_c) = plan_cells(cfg);
        let kinds: Vec<CellKind> = {
            let mut k: Vec<CellKind> = plans.iter().map(|p| p.kind).collect();
            k.sort();
            k.dedup();
            k
        };
        genotype.validate(space, &kinds)?;
        let mut params = ParamStore::new(seed);
        let role = ParamRole::Weight { op: None };
        let stem = Stem::new(
            &mut params,
            in_channels,
            cfg.stem_multiplier * cfg.channels,
            cfg.bn_affine,
        )?;
        let mut cells = Vec::with_capacity(plans.len());
        for (ci, plan) in plans.iter().enumerate() {
            let prefix = format!("cell{ci}");
            let inputs = CellInputs::new(&mut params, &prefix, plan, cfg.bn_affine)?;
            let graph = CellGraph::new(cfg.nodes, plan.kind)?;
            let mut ops = Vec::new();
            for gene in genotype.cell(plan.kind) {
                let edge = Edge {
                    from: gene.pred,
                    to: gene.node,
                };
                let op = space.op(space.index_of(&gene.op).expect("validated"));
                let module = OpModule::build(
                    &mut params,
                    &format!("{prefix}.e{edge}"),
                    op,
                    plan.c,
                    graph.stride(edge),
                    cfg.bn_affine,
                    role,
                )?;
                ops.push((edge, module));
            }
            cells.push(DiscreteCell {
                plan: *plan,
                inputs,
                ops,
                nodes: cfg.nodes,
            });
        }
        let head = Head::new(&mut params, "head", out_c, classes)?;
        let aux = if aux_head {
            let at = plans
                .iter()
                .rposition(|p| p.kind == CellKind::Reduction)
                .unwrap_or(plans.len() - 1);
            let c = cfg.nodes * plans[at].c;
            Some((at, Head::new(&mut params, "aux", c, classes)?))
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            genotype: genotype.clone(),
            params,
            stem,
            cells,
            head,
            aux,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn genotype(&self) -> &Genotype {
        &self.genotype
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn cell_kinds(&self) -> Vec<CellKind> {
        self.cells.iter().map(|c| c.plan.kind).collect()
    }

    /// Main logits and, when present, auxiliary logits.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Option<Var>)> {
        let stem = self.stem.forward(tape, vars, x)?;
        let (mut s0, mut s1) = (stem, stem);
        let mut aux = None;
        for (ci, cell) in self.cells.iter().enumerate() {
            let (p0, p1) = cell.inputs.forward(tape, vars, s0, s1)?;
            let mut states = vec![p0, p1];
            for node in 2..2 + cell.nodes {
                let mut acc: Option<Var> = None;
                for (edge, module) in cell.ops.iter().filter(|(e, _)| e.to == node) {
                    let out = module
                        .forward(tape, vars, states[edge.from])?
                        .ok_or_else(|| Error::Contract("zero op in a discrete cell".into()))?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, out)?,
                        None => out,
                    });
                }
                states.push(
                    acc.ok_or_else(|| Error::Contract(format!("node {node} has no inputs")))?,
                );
            }
            let out = tape.concat_channels(&states[2..])?;
            s0 = s1;
            s1 = out;
            if let Some((at, head)) = &self.aux {
                if *at == ci {
                    aux = Some(head.forward(tape, vars, out)?);
                }
            }
        }
        Ok((self.head.forward(tape, vars, s1)?, aux))
    }

    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape)?;
        let x = tape.constant(images.clone())?;
        let (logits, _) = self.forward(&mut tape, &vars, x)?;
        Ok(tape.value(logits).clone())
    }
}

/// Zeroes a `side x side` square per image at a random centre (clipped at
/// the borders), across all channels.
pub fn apply_cutout<R: Rng + ?Sized>(batch: &mut Batch, side: usize, rng: &mut R) {
    let Some((n, c, h, w)) = batch.images.dims4() else {
        return;
    };
    let data = batch.images.data_mut();
    let half = side / 2;
    for i in 0..n {
        let cy = rng.gen_range(0..h);
        let cx = rng.gen_range(0..w);
        let (y0, y1) = (cy.saturating_sub(half), (cy + side - half).min(h));
        let (x0, x1) = (cx.saturating_sub(half), (cx + side - half).min(w));
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in y0..y1 {
                data[base + y * w + x0..base + y * w + x1].fill(0.0);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub final_acc: f64,
    pub best_acc: f64,
    pub params: usize,
    pub epochs: Vec<EvalEpoch>,
}

/// Test accuracy, evaluated in batches of `batch_size` in file order.
/// Batch norm uses the statistics of each test batch.
pub fn evaluate(net: &StandaloneNet, data: &Dataset, batch_size: usize) -> Result<f64> {
    let mut correct = 0.0;
    for idx in data.batch_indices(batch_size, None) {
        let batch = data.batch(&idx)?;
        let logits = net.logits(&batch.images)?;
        correct += accuracy(&logits, &batch.labels) * idx.len() as f64;
    }
    Ok(correct / data.len().max(1) as f64)
}

/// SGD with momentum and a cosine schedule; reports final and best test
/// accuracy over epochs.
pub fn train_standalone(
    net: &mut StandaloneNet,
    split: &Split,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut opt = Optimizer::sgd(cfg.lr, cfg.momentum, cfg.weight_decay);
    let ids = net.params.ids_where(|_| true);
    let masks = vec![UpdateMask::full(); ids.len()];
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        opt.lr = lr;
        let batches = split
            .train
            .batch_indices(cfg.batch_size, Some((seed, epoch as u64)));
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for (bi, idx) in batches.iter().enumerate() {
            let mut batch = split.train.batch(idx)?;
            if let Some(side) = cfg.cutout {
                apply_cutout(
                    &mut batch,
                    side,
                    &mut stream(seed, Purpose::Cutout, epoch as u64, bi as u64),
                );
            }
            let mut tape = Tape::new();
            tape.set_step(step);
            let vars = net.params.register(&mut tape)?;
            let x = tape.constant(batch.images.clone())?;
            let (logits, aux) = net.forward(&mut tape, &vars, x)?;
            let mut loss = tape.cross_entropy(logits, &batch.labels)?;
            let main_loss = tape.value(loss).data()[0];
            if let (Some(aux), Some(w)) = (aux, cfg.aux_weight) {
                let aux_loss = tape.cross_entropy(aux, &batch.labels)?;
                let scaled = tape.scale(aux_loss, w)?;
                loss = tape.add(loss, scaled)?;
            }
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(net.params.iter())
                .map(|(&v, (_, p))| {
                    tape.grad(v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.value.numel()])
                })
                .collect();
            {
                let mut slices: Vec<&mut [f64]> = grads.iter_mut().map(Vec::as_mut_slice).collect();
                clip_grad_norm(&mut slices, cfg.grad_clip);
            }
            let g: Vec<Option<&[f64]>> = grads.iter().map(|g| Some(g.as_slice())).collect();
            let mut values = net.params.values_mut(&ids)?;
            opt.step(&mut values, &g, &masks)?;
            loss_sum += main_loss;
            acc_sum += accuracy(tape.value(logits), &batch.labels);
            step += 1;
        }
        if net.params.iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite {
                op: "standalone step",
                step,
            });
        }
        let test_acc = evaluate(net, &split.test, cfg.batch_size)?;
        let nb = batches.len().max(1) as f64;
        epochs.push(EvalEpoch {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / nb,
            train_acc: acc_sum / nb,
            test_acc,
        });
    }
    Ok(EvalReport {
        final_acc: epochs.last().map_or(0.0, |e| e.test_acc),
        best_acc: epochs.iter().map(|e| e.test_acc).fold(0.0, f64::max),
        params: net.params.weight_count(),
        epochs,
    })
}

/// Builds the network for `genotype` under `cfg` and trains it.
pub fn evaluate_genotype(
    genotype: &Genotype,
    space: &SearchSpace,
    split: &Split,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalReport> {
    let net_cfg = cfg.net_config(genotype.nodes());
    let mut net = StandaloneNet::new(
        genotype,
        space,
        &net_cfg,
        split.train.channels,
        split.train.classes,
        cfg.aux_weight.is_some(),
        seed,
    )?;
    train_standalone(&mut net, split, cfg, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genotype::{random_genotype, Gene, GENOTYPE_SCHEMA};

    #[test]
    fn cutout_zeroes_a_square() {
        let mut batch = Batch {
            images: Tensor::full(&[2, 3, 8, 8], 1.0),
            labels: vec![0, 1],
        };
        apply_cutout(&mut batch, 4, &mut stream(0, Purpose::Cutout, 0, 0));
        let zeros = batch.images.data().iter().filter(|&&v| v == 0.0).count();
        assert!(zeros > 0 && zeros <= 2 * 3 * 16, "{zeros}");
    }

    #[test]
    fn identity_cell_network() {
        let space = SearchSpace::darts();
        let g = Genotype {
            schema_version: GENOTYPE_SCHEMA,
            normal: vec![
                Gene {
                    node: 2,
                    pred: 0,
                    op: "skip_connect".into(),
                },
                Gene {
                    node: 2,
                    pred: 1,
                    op: "skip_connect".into(),
                },
            ],
            reduce: vec![],
            meta: None,
        };
        let cfg = NetConfig {
            cells: 2,
            nodes: 1,
            channels: 4,
            reductions: Some(vec![]),
            ..NetConfig::default()
        };
        let net = StandaloneNet::new(&g, &space, &cfg, 3, 5, false, 0).unwrap();
        let conv_free = net.params().iter().all(|(_, p)| !p.name.contains(".e"));
        assert!(conv_free);
        let out = net.logits(&Tensor::full(&[2, 3, 6, 6], 0.5)).unwrap();
        assert_eq!(out.shape(), &[2, 5]);
    }

    #[test]
    fn aux_head_is_attached() {
        let space = SearchSpace::darts();
        let kinds = [CellKind::Normal, CellKind::Reduction];
        let g = random_genotype(&space, 2, &kinds, &mut stream(0, Purpose::Genotype, 0, 0));
        let net = StandaloneNet::new(&g, &space, &NetConfig::default(), 3, 4, true, 1).unwrap();
        assert!(net.params().by_name("aux.weight").is_some());
        let mut tape = Tape::new();
        let vars = net.params().register(&mut tape).unwrap();
        let x = tape.constant(Tensor::full(&[2, 3, 8, 8], 0.1)).unwrap();
        let (_, aux) = net.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(aux.unwrap()).shape(), &[2, 4]);
    }
}
