//! The one-level search loop: weights (SGD) and architecture parameters
//! (Adam) updated on the same batch, with grouped op dropout, alpha-adjust
//! and partial decay.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{clip_grad_norm, softmax, ElementMask, Optimizer, Tape, UpdateMask};
use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::{Batch, Dataset};
use crate::drop::{DropConfig, DropMask, MaskSampler};
use crate::error::{Error, Result};
use crate::nn::accuracy;
use crate::params::{ParamId, ParamRole};
use crate::report::CsvSink;
use crate::rng::{derive_seed, stream, Purpose};
use crate::space::{build_space, CellKind};
use crate::supernet::{MaskSet, Supernet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightOptim {
    pub lr: f64,
    /// Floor of the cosine schedule.
    pub lr_min: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for WeightOptim {
    fn default() -> Self {
        Self {
            lr: 0.0375,
            lr_min: 0.001,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlphaOptim {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AlphaOptim {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 1e-3,
        }
    }
}

/// Component toggles; all on is the full method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub alpha_adjust: bool,
    pub partial_decay: bool,
    pub grouping: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            alpha_adjust: true,
            partial_decay: true,
            grouping: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub w_optim: WeightOptim,
    pub alpha_optim: AlphaOptim,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            w_optim: WeightOptim::default(),
            alpha_optim: AlphaOptim::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train.epochs and train.batch_size must be positive".into(),
            ));
        }
        let w = &self.w_optim;
        if !(w.lr >= 0.0 && w.lr_min >= 0.0 && w.lr_min <= w.lr) {
            return Err(Error::Config(
                "train.w_optim needs 0 <= lr_min <= lr".into(),
            ));
        }
        if !(0.0..1.0).contains(&w.momentum) || !(w.weight_decay >= 0.0) || !(w.grad_clip > 0.0) {
            return Err(Error::Config(
                "train.w_optim: momentum in [0, 1), weight_decay >= 0, grad_clip > 0".into(),
            ));
        }
        let a = &self.alpha_optim;
        if !(a.lr >= 0.0)
            || !(0.0..1.0).contains(&a.beta1)
            || !(0.0..1.0).contains(&a.beta2)
            || !(a.weight_decay >= 0.0)
        {
            return Err(Error::Config(
                "train.alpha_optim: lr >= 0, betas in [0, 1), weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine annealing from `base` at epoch 0 towards `min`.
pub fn cosine_lr(base: f64, min: f64, epoch: usize, epochs: usize) -> f64 {
    min + 0.5 * (base - min) * (1.0 + (PI * epoch as f64 / epochs.max(1) as f64).cos())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_lengths(old: &[f64], new: &[f64], mask: &DropMask) -> Result<()> {
    if old.len() != new.len() || old.len() != mask.len() {
        return Err(Error::Contract(format!(
            "alpha_adjust: lengths {} / {} / mask {}",
            old.len(),
            new.len(),
            mask.len()
        )));
    }
    if !mask.any_kept() {
        return Err(Error::Contract("alpha_adjust: no kept op".into()));
    }
    Ok(())
}

fn shift_kept(new: &[f64], mask: &DropMask, x: f64) -> Vec<f64> {
    new.iter()
        .enumerate()
        .map(|(i, &a)| if mask.is_kept(i) { a + x } else { a })
        .collect()
}

/// Shifts the kept entries of `new` by
/// `x = ln(sum_kept exp(old) / sum_kept exp(new))`, which leaves the softmax
/// probability of every dropped op at its value under `old`. Dropped entries
/// must be unchanged between `old` and `new`.
pub fn alpha_adjust(old: &[f64], new: &[f64], mask: &DropMask) -> Result<Vec<f64>> {
    check_lengths(old, new, mask)?;
    if !mask.any_dropped() {
        return Ok(new.to_vec());
    }
    for o in mask.dropped() {
        if old[o].to_bits() != new[o].to_bits() {
            return Err(Error::Contract(format!(
                "alpha_adjust: dropped alpha[{o}] changed from {} to {}",
                old[o], new[o]
            )));
        }
    }
    let kept = |v: &[f64]| -> Vec<f64> {
        (0..v.len())
            .filter(|&i| mask.is_kept(i))
            .map(|i| v[i])
            .collect()
    };
    let x = log_sum_exp(kept(old).into_iter()) - log_sum_exp(kept(new).into_iter());
    Ok(shift_kept(new, mask, x))
}

/// Variant for when dropped entries also moved (e.g. weight decay on every
/// alpha). The shift keeps the ratio of total dropped mass to total kept
/// mass at its pre-step value; it reduces to [`alpha_adjust`] when dropped
/// entries are unchanged.
pub fn alpha_adjust_general(old: &[f64], new: &[f64], mask: &DropMask) -> Result<Vec<f64>> {
    check_lengths(old, new, mask)?;
    if !mask.any_dropped() {
        return Ok(new.to_vec());
    }
    let pick = |v: &[f64], keep: bool| -> Vec<f64> {
        (0..v.len())
            .filter(|&i| mask.is_kept(i) == keep)
            .map(|i| v[i])
            .collect()
    };
    let lse = |v: Vec<f64>| log_sum_exp(v.into_iter());
    let x =
        lse(pick(old, true)) - lse(pick(new, true)) + lse(pick(new, false)) - lse(pick(old, false));
    Ok(shift_kept(new, mask, x))
}

fn kind_index(kind: CellKind) -> u64 {
    match kind {
        CellKind::Normal => 0,
        CellKind::Reduction => 1,
    }
}

fn alpha_hash(net: &Supernet) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for kind in net.kinds() {
        let id = net.alpha_id(kind).expect("kind has alpha");
        for v in net.params().get(id).value.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
    }
    h
}

/// Loss, accuracy and one gradient per parameter (zeros where the loss does
/// not reach), indexed by `ParamId`.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub accuracy: f64,
    pub grads: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct UpdateStats {
    /// Global weight-gradient norm before clipping.
    pub grad_norm: f64,
    /// Largest change of a dropped op's softmax probability over the step.
    pub dropped_p_drift: f64,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_w: f64,
    pub grad_norm: f64,
    /// Seed the step's mask streams derive from.
    pub masks_seed: u64,
    pub masks_digest: u64,
    pub alpha_hash: u64,
    pub dropped_p_drift: f64,
    pub masks: MaskSet,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    net: Supernet,
    cfg: TrainConfig,
    sampler: MaskSampler,
    seed: u64,
    w_ids: Vec<ParamId>,
    alpha_ids: Vec<ParamId>,
    w_opt: Optimizer,
    a_opt: Optimizer,
    step: u64,
}

impl Trainer {
    pub fn new(net: Supernet, cfg: &TrainConfig, drop: &DropConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let sampler = MaskSampler::new(net.space(), drop, cfg.ablation.grouping)?;
        let w_ids = net.params().ids_where(|p| !p.role.is_alpha());
        let alpha_ids = net.params().ids_where(|p| p.role.is_alpha());
        let w = &cfg.w_optim;
        let a = &cfg.alpha_optim;
        Ok(Self {
            w_opt: Optimizer::sgd(w.lr, w.momentum, w.weight_decay),
            a_opt: Optimizer::adam(a.lr, a.beta1, a.beta2, a.weight_decay),
            net,
            cfg: cfg.clone(),
            sampler,
            seed,
            w_ids,
            alpha_ids,
            step: 0,
        })
    }

    pub fn net(&self) -> &Supernet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Supernet {
        &mut self.net
    }

    pub fn into_net(self) -> Supernet {
        self.net
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn sampler(&self) -> &MaskSampler {
        &self.sampler
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn weight_ids(&self) -> &[ParamId] {
        &self.w_ids
    }

    pub fn alpha_ids(&self) -> &[ParamId] {
        &self.alpha_ids
    }

    pub fn weight_optimizer(&self) -> &Optimizer {
        &self.w_opt
    }

    pub fn alpha_optimizer(&self) -> &Optimizer {
        &self.a_opt
    }

    /// Seed of the mask streams for `step`.
    pub fn masks_seed(&self, step: u64) -> u64 {
        derive_seed(self.seed, Purpose::Mask, step)
    }

    /// Masks for every (cell kind, edge); each pair draws from its own stream.
    pub fn sample_masks(&self, step: u64) -> MaskSet {
        let base = self.masks_seed(step);
        let masks: BTreeMap<CellKind, Vec<DropMask>> = self
            .net
            .kinds()
            .into_iter()
            .map(|kind| {
                let per_edge = (0..self.net.edges(kind).len())
                    .map(|e| {
                        self.sampler.sample(&mut stream(
                            base,
                            Purpose::Mask,
                            kind_index(kind),
                            e as u64,
                        ))
                    })
                    .collect();
                (kind, per_edge)
            })
            .collect();
        MaskSet::new(masks)
    }

    pub fn compute_grads(&self, batch: &Batch, masks: &MaskSet) -> Result<Gradients> {
        let mut tape = Tape::new();
        tape.set_step(self.step);
        let store = self.net.params();
        let vars = store.register(&mut tape)?;
        let x = tape.constant(batch.images.clone())?;
        let logits = self.net.forward(&mut tape, &vars, x, masks)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let grads = vars
            .iter()
            .zip(store.iter())
            .map(|(&v, (_, p))| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect();
        Ok(Gradients {
            loss: tape.value(loss).data()[0],
            accuracy: accuracy(tape.value(logits), &batch.labels),
            grads,
        })
    }

    fn weight_mask(&self, id: ParamId, masks: &MaskSet) -> UpdateMask {
        match self.net.params().get(id).role {
            ParamRole::Weight { op: Some(slot) } if !masks.is_kept(slot) => {
                if self.cfg.ablation.partial_decay {
                    UpdateMask {
                        active: ElementMask::None,
                        decay: ElementMask::None,
                    }
                } else {
                    UpdateMask::full()
                }
            }
            _ => UpdateMask::full(),
        }
    }

    fn alpha_mask(&self, kind: CellKind, masks: &MaskSet) -> Result<UpdateMask> {
        let rows = masks
            .kind(kind)
            .ok_or_else(|| Error::Contract(format!("no masks for {kind} cells")))?;
        if !self.cfg.ablation.partial_decay || rows.iter().all(|m| !m.any_dropped()) {
            return Ok(UpdateMask::full());
        }
        let flat: Vec<bool> = rows.iter().flat_map(|m| m.keep().iter().copied()).collect();
        Ok(UpdateMask {
            active: ElementMask::Elements(flat.clone()),
            decay: ElementMask::Elements(flat),
        })
    }

    /// Clips the weight gradients, steps both optimizers, then applies
    /// alpha-adjust on every edge that dropped something.
    pub fn apply_update(
        &mut self,
        grads: &mut Gradients,
        masks: &MaskSet,
        lr_w: f64,
    ) -> Result<UpdateStats> {
        let n = self.net.params().len();
        if grads.grads.len() != n {
            return Err(Error::Contract(format!(
                "{} gradients for {n} parameters",
                grads.grads.len()
            )));
        }
        let is_alpha: Vec<bool> = self
            .net
            .params()
            .iter()
            .map(|(_, p)| p.role.is_alpha())
            .collect();
        let grad_norm = {
            let mut slices: Vec<&mut [f64]> = grads
                .grads
                .iter_mut()
                .zip(&is_alpha)
                .filter(|(_, &a)| !a)
                .map(|(g, _)| g.as_mut_slice())
                .collect();
            clip_grad_norm(&mut slices, self.cfg.w_optim.grad_clip)
        };

        let w_masks: Vec<UpdateMask> = self
            .w_ids
            .iter()
            .map(|&id| self.weight_mask(id, masks))
            .collect();
        let mut a_kinds = Vec::with_capacity(self.alpha_ids.len());
        let mut a_masks = Vec::with_capacity(self.alpha_ids.len());
        for &id in &self.alpha_ids {
            let kind = match self.net.params().get(id).role {
                ParamRole::Alpha(k) => k,
                ParamRole::Weight { .. } => unreachable!("alpha ids hold alphas"),
            };
            a_kinds.push(kind);
            a_masks.push(self.alpha_mask(kind, masks)?);
        }
        let old_alpha: Vec<Vec<f64>> = self
            .alpha_ids
            .iter()
            .map(|&id| self.net.params().get(id).value.data().to_vec())
            .collect();

        self.w_opt.lr = lr_w;
        let w_grads: Vec<Option<&[f64]>> = self
            .w_ids
            .iter()
            .map(|id| Some(grads.grads[id.index()].as_slice()))
            .collect();
        let a_grads: Vec<Option<&[f64]>> = self
            .alpha_ids
            .iter()
            .map(|id| Some(grads.grads[id.index()].as_slice()))
            .collect();
        {
            let mut values = self.net.params_mut().values_mut(&self.w_ids)?;
            self.w_opt.step(&mut values, &w_grads, &w_masks)?;
        }
        {
            let mut values = self.net.params_mut().values_mut(&self.alpha_ids)?;
            self.a_opt.step(&mut values, &a_grads, &a_masks)?;
        }

        let ops = self.net.space().len();
        let mut drift: f64 = 0.0;
        let alpha_ids = self.alpha_ids.clone();
        for (k, &id) in alpha_ids.iter().enumerate() {
            let kind = a_kinds[k];
            let rows = masks.kind(kind).expect("checked in alpha_mask").to_vec();
            let value = &mut self.net.params_mut().get_mut(id).value;
            for (e, mask) in rows.iter().enumerate() {
                if !mask.any_dropped() {
                    continue;
                }
                let range = e * ops..(e + 1) * ops;
                let old = &old_alpha[k][range.clone()];
                if self.cfg.ablation.alpha_adjust {
                    let new = value.data()[range.clone()].to_vec();
                    let adjusted = if self.cfg.ablation.partial_decay {
                        alpha_adjust(old, &new, mask)?
                    } else {
                        alpha_adjust_general(old, &new, mask)?
                    };
                    value.data_mut()[range.clone()].copy_from_slice(&adjusted);
                }
                let p_old = softmax(old);
                let p_new = softmax(&value.data()[range]);
                for o in mask.dropped() {
                    drift = drift.max((p_new[o] - p_old[o]).abs());
                }
            }
        }
        if self.net.params().iter().any(|(_, p)| !p.value.is_finite()) {
            return Err(Error::NonFinite {
                op: "optimizer step",
                step: self.step,
            });
        }
        Ok(UpdateStats {
            grad_norm,
            dropped_p_drift: drift,
        })
    }

    /// One search step with freshly sampled masks.
    pub fn train_step(&mut self, batch: &Batch, lr_w: f64) -> Result<StepRecord> {
        let masks = self.sample_masks(self.step);
        let masks_seed = self.masks_seed(self.step);
        self.train_step_with_masks(batch, lr_w, masks, masks_seed)
    }

    /// One search step with caller-provided masks.
    pub fn train_step_with_masks(
        &mut self,
        batch: &Batch,
        lr_w: f64,
        masks: MaskSet,
        masks_seed: u64,
    ) -> Result<StepRecord> {
        let mut grads = self.compute_grads(batch, &masks)?;
        let stats = self.apply_update(&mut grads, &masks, lr_w)?;
        let record = StepRecord {
            step: self.step,
            loss: grads.loss,
            accuracy: grads.accuracy,
            lr_w,
            grad_norm: stats.grad_norm,
            masks_seed,
            masks_digest: masks.digest(),
            alpha_hash: alpha_hash(&self.net),
            dropped_p_drift: stats.dropped_p_drift,
            masks,
        };
        self.step += 1;
        Ok(record)
    }
}

pub const HISTORY_SCHEMA: &str = "dropnas-history/1";
pub const HISTORY_HEADER: [&str; 9] = [
    "epoch",
    "step",
    "loss",
    "acc",
    "lr_w",
    "masks_seed",
    "masks_digest",
    "alpha_hash",
    "p_drift",
];
pub const ENTROPY_SCHEMA: &str = "dropnas-entropy/1";
pub const ENTROPY_HEADER: [&str; 4] = ["epoch", "kind", "edge", "entropy"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub acc: f64,
    pub lr_w: f64,
    pub masks_seed: u64,
    pub masks_digest: u64,
    pub alpha_hash: u64,
    pub p_drift: f64,
}

impl HistoryRow {
    fn fields(&self) -> [String; 9] {
        [
            self.epoch.to_string(),
            self.step.to_string(),
            format!("{:.17e}", self.loss),
            format!("{:.6}", self.acc),
            format!("{:.17e}", self.lr_w),
            format!("{:016x}", self.masks_seed),
            format!("{:016x}", self.masks_digest),
            format!("{:016x}", self.alpha_hash),
            format!("{:.3e}", self.p_drift),
        ]
    }
}

/// Per-edge alpha entropy; epoch 0 is the initial (uniform) table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyRow {
    pub epoch: usize,
    pub kind: CellKind,
    pub edge: String,
    pub entropy: f64,
}

#[derive(Clone, Debug)]
pub struct EpochSummary {
    pub epoch: usize,
    pub epochs: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_w: f64,
    pub mean_entropy: f64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub net: Supernet,
    pub history: Vec<HistoryRow>,
    pub entropy: Vec<EntropyRow>,
}

fn entropy_rows(net: &Supernet, epoch: usize) -> Vec<EntropyRow> {
    let table = net.alpha_table();
    let mut rows = Vec::new();
    for kind in net.kinds() {
        for (e, edge) in net.edges(kind).iter().enumerate() {
            rows.push(EntropyRow {
                epoch,
                kind,
                edge: edge.to_string(),
                entropy: table.entropy(kind, e),
            });
        }
    }
    rows
}

fn write_entropy(sink: &mut Option<CsvSink>, rows: &[EntropyRow]) -> Result<()> {
    if let Some(s) = sink {
        for r in rows {
            s.row([
                r.epoch.to_string(),
                r.kind.label().to_string(),
                r.edge.clone(),
                format!("{:.17e}", r.entropy),
            ])?;
        }
        s.flush()?;
    }
    Ok(())
}

/// Failure context written next to the run outputs when a step aborts.
#[derive(Serialize)]
struct FailureDump<'a> {
    schema_version: u32,
    epoch: usize,
    step: u64,
    error: String,
    masks_digest: String,
    alpha: &'a crate::supernet::AlphaTable,
}

/// Full search on the training split (used for both weights and alphas).
///
/// With `out` set, writes `history.csv` and `entropy.csv` (flushed every
/// epoch), then `checkpoint.bin` and `alpha.json` at the end. A failing step
/// leaves `failure.json` behind.
pub fn run_search(
    cfg: &ExperimentConfig,
    data: &Dataset,
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochSummary),
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let space = build_space(&cfg.space)?;
    let net = Supernet::new(&cfg.net, &space, data.channels, data.classes, cfg.seed)?;
    let mut trainer = Trainer::new(net, &cfg.train, &cfg.drop, cfg.seed)?;
    let (mut history_sink, mut entropy_sink) = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            (
                Some(CsvSink::open(
                    &dir.join("history.csv"),
                    HISTORY_SCHEMA,
                    &HISTORY_HEADER,
                )?),
                Some(CsvSink::open(
                    &dir.join("entropy.csv"),
                    ENTROPY_SCHEMA,
                    &ENTROPY_HEADER,
                )?),
            )
        }
        None => (None, None),
    };
    let epochs = cfg.train.epochs;
    let mut history = Vec::new();
    let mut entropy = entropy_rows(trainer.net(), 0);
    write_entropy(&mut entropy_sink, &entropy)?;

    for epoch in 0..epochs {
        let lr_w = cosine_lr(
            cfg.train.w_optim.lr,
            cfg.train.w_optim.lr_min,
            epoch,
            epochs,
        );
        let batches = data.batch_indices(cfg.train.batch_size, Some((cfg.seed, epoch as u64)));
        let (mut loss_sum, mut acc_sum) = (0.0, 0.0);
        for idx in &batches {
            let batch = data.batch(idx)?;
            let record = match trainer.train_step(&batch, lr_w) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(dir) = out {
                        let dump = FailureDump {
                            schema_version: 1,
                            epoch: epoch + 1,
                            step: trainer.steps_done(),
                            error: e.to_string(),
                            masks_digest: format!(
                                "{:016x}",
                                trainer.sample_masks(trainer.steps_done()).digest()
                            ),
                            alpha: &trainer.net().alpha_table(),
                        };
                        let path = dir.join("failure.json");
                        let body = serde_json::to_string_pretty(&dump)?;
                        fs::write(&path, body).map_err(|err| Error::io(&path, err))?;
                    }
                    return Err(e);
                }
            };
            loss_sum += record.loss;
            acc_sum += record.accuracy;
            let row = HistoryRow {
                epoch: epoch + 1,
                step: record.step,
                loss: record.loss,
                acc: record.accuracy,
                lr_w,
                masks_seed: record.masks_seed,
                masks_digest: record.masks_digest,
                alpha_hash: record.alpha_hash,
                p_drift: record.dropped_p_drift,
            };
            if let Some(s) = &mut history_sink {
                s.row(row.fields())?;
            }
            history.push(row);
        }
        if let Some(s) = &mut history_sink {
            s.flush()?;
        }
        let rows = entropy_rows(trainer.net(), epoch + 1);
        write_entropy(&mut entropy_sink, &rows)?;
        let mean_entropy = rows.iter().map(|r| r.entropy).sum::<f64>() / rows.len().max(1) as f64;
        entropy.extend(rows);
        let nb = batches.len().max(1) as f64;
        progress(&EpochSummary {
            epoch: epoch + 1,
            epochs,
            loss: loss_sum / nb,
            accuracy: acc_sum / nb,
            lr_w,
            mean_entropy,
        });
    }

    let net = trainer.into_net();
    if let Some(dir) = out {
        Checkpoint::from_store(net.params(), cfg.hash()).save(&dir.join("checkpoint.bin"))?;
        let path = dir.join("alpha.json");
        let body = serde_json::to_string_pretty(&net.alpha_table())?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    }
    Ok(SearchOutcome {
        net,
        history,
        entropy,
    })
}
