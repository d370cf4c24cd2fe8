use dropnas::data::Dataset;
use dropnas::params::ParamRole;
use dropnas::train::Trainer;
use dropnas::Result;

/// Result of watching dropped parameters over a run of search steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DropAudit {
    pub steps: usize,
    /// Dropped (parameter, step) pairs inspected, weights and alpha entries together.
    pub dropped_checked: usize,
    pub violations: Vec<String>,
}

impl DropAudit {
    pub fn passed(&self) -> bool {
        self.steps > 0 && self.dropped_checked > 0 && self.violations.is_empty()
    }
}

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Runs `steps` training steps and checks, for every op dropped at a step,
/// that its gradient is exactly zero and that its weights, alpha entries and
/// optimizer buffers come out of the step bit-identical.
pub fn audit_dropped_params(
    trainer: &mut Trainer,
    data: &Dataset,
    batch_size: usize,
    steps: usize,
    lr_w: f64,
) -> Result<DropAudit> {
    let mut audit = DropAudit::default();
    let batches = data.batch_indices(batch_size, None);
    let ops = trainer.net().space().len();
    for s in 0..steps {
        let batch = data.batch(&batches[s % batches.len()])?;
        let step = trainer.steps_done();
        let masks = trainer.sample_masks(step);
        let grads = trainer.compute_grads(&batch, &masks)?;

        let w_ids = trainer.weight_ids().to_vec();
        let a_ids = trainer.alpha_ids().to_vec();
        let mut watched_w = Vec::new();
        for (k, &id) in w_ids.iter().enumerate() {
            let p = trainer.net().params().get(id);
            if let ParamRole::Weight { op: Some(slot) } = p.role {
                if !masks.is_kept(slot) {
                    if grads.grads[id.index()].iter().any(|&g| g != 0.0) {
                        audit.violations.push(format!(
                            "step {step}: nonzero gradient on dropped {}",
                            p.name
                        ));
                    }
                    let moment = trainer
                        .weight_optimizer()
                        .first_moment(k)
                        .map(<[f64]>::to_vec);
                    watched_w.push((id, k, p.name.clone(), p.value.data().to_vec(), moment));
                }
            }
        }
        let mut watched_a = Vec::new();
        for (k, &id) in a_ids.iter().enumerate() {
            let p = trainer.net().params().get(id);
            let ParamRole::Alpha(kind) = p.role else {
                continue;
            };
            for (e, mask) in masks.kind(kind).unwrap_or_default().iter().enumerate() {
                for o in mask.dropped() {
                    let j = e * ops + o;
                    if grads.grads[id.index()][j] != 0.0 {
                        audit.violations.push(format!(
                            "step {step}: nonzero gradient on dropped {}[{e},{o}]",
                            p.name
                        ));
                    }
                    let opt = trainer.alpha_optimizer();
                    let m = opt.first_moment(k).map(|b| b[j]);
                    let v = opt.second_moment(k).map(|b| b[j]);
                    watched_a.push((
                        id,
                        k,
                        j,
                        format!("{}[{e},{o}]", p.name),
                        p.value.data()[j],
                        m,
                        v,
                    ));
                }
            }
        }

        let seed = trainer.masks_seed(step);
        trainer.train_step_with_masks(&batch, lr_w, masks, seed)?;

        for (id, k, name, before, moment) in watched_w {
            audit.dropped_checked += 1;
            if !same_bits(&before, trainer.net().params().get(id).value.data()) {
                audit
                    .violations
                    .push(format!("step {step}: dropped {name} changed"));
            }
            if let Some(m) = moment {
                if !same_bits(
                    &m,
                    trainer
                        .weight_optimizer()
                        .first_moment(k)
                        .unwrap_or_default(),
                ) {
                    audit
                        .violations
                        .push(format!("step {step}: momentum of dropped {name} changed"));
                }
            }
        }
        for (id, k, j, name, before, m, v) in watched_a {
            audit.dropped_checked += 1;
            if trainer.net().params().get(id).value.data()[j].to_bits() != before.to_bits() {
                audit
                    .violations
                    .push(format!("step {step}: dropped {name} changed"));
            }
            let opt = trainer.alpha_optimizer();
            let changed = |old: Option<f64>, new: Option<&[f64]>| match (old, new) {
                (Some(a), Some(b)) => a.to_bits() != b[j].to_bits(),
                (None, Some(b)) => b[j] != 0.0,
                _ => false,
            };
            if changed(m, opt.first_moment(k)) || changed(v, opt.second_moment(k)) {
                audit.violations.push(format!(
                    "step {step}: Adam moments of dropped {name} changed"
                ));
            }
        }
        audit.steps += 1;
    }
    Ok(audit)
}
