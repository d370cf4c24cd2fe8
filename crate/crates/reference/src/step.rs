use dropnas::autodiff::Tape;
use dropnas::data::{Batch, Dataset};
use dropnas::drop::DropConfig;
use dropnas::supernet::Supernet;
use dropnas::train::{TrainConfig, Trainer};
use dropnas::{Result, Tensor};

use crate::forward::{forward, RefArch, Vars, Weighting};
use crate::ParityReport;

/// Change of every parameter over one step, by name.
#[derive(Clone, Debug)]
pub struct ParamDelta {
    pub loss: f64,
    pub deltas: Vec<(String, Vec<f64>)>,
}

impl ParamDelta {
    pub fn max_abs(&self) -> f64 {
        self.deltas
            .iter()
            .flat_map(|(_, d)| d.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.deltas
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, d)| d.as_slice())
    }
}

/// Plain one-level DARTS: every op always on, SGD with momentum on the
/// weights, Adam on the alphas, global-norm clipping of weight gradients.
#[derive(Clone, Debug)]
pub struct ReferenceDarts {
    arch: RefArch,
    names: Vec<String>,
    values: Vec<Tensor>,
    is_alpha: Vec<bool>,
    cfg: TrainConfig,
    velocity: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl ReferenceDarts {
    pub fn new(net: &Supernet, cfg: &TrainConfig) -> Self {
        let (names, values): (Vec<String>, Vec<Tensor>) = net
            .params()
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .unzip();
        let is_alpha = names.iter().map(|n| n.starts_with("alpha.")).collect();
        let zeros: Vec<Vec<f64>> = values.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            arch: RefArch::of(net),
            names,
            values,
            is_alpha,
            cfg: cfg.clone(),
            velocity: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn step(&mut self, batch: &Batch, lr_w: f64) -> Result<ParamDelta> {
        let mut tape = Tape::new();
        let mut vars = Vec::with_capacity(self.values.len());
        let mut by_name = std::collections::HashMap::new();
        for (name, value) in self.names.iter().zip(&self.values) {
            let var = tape.param(value.clone())?;
            vars.push(var);
            by_name.insert(name.clone(), var);
        }
        let x = tape.constant(batch.images.clone())?;
        let logits = {
            let mut v = Vars {
                tape: &mut tape,
                by_name,
            };
            forward(&self.arch, &mut v, x, &Weighting::Softmax)?
        };
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tape.backward(loss)?;
        let mut grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.values)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();

        let mut sq = 0.0;
        for (g, &a) in grads.iter().zip(&self.is_alpha) {
            if !a {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let clip = self.cfg.w_optim.grad_clip;
        if norm > clip && norm > 0.0 {
            let s = clip / norm;
            for (g, &a) in grads.iter_mut().zip(&self.is_alpha) {
                if !a {
                    g.iter_mut().for_each(|x| *x *= s);
                }
            }
        }

        self.t += 1;
        let w = &self.cfg.w_optim;
        let a = &self.cfg.alpha_optim;
        let eps = 1e-8;
        let mut deltas = Vec::with_capacity(self.values.len());
        for i in 0..self.values.len() {
            let before = self.values[i].data().to_vec();
            let data = self.values[i].data_mut();
            for j in 0..data.len() {
                if self.is_alpha[i] {
                    let g = grads[i][j] + a.weight_decay * data[j];
                    self.m[i][j] = a.beta1 * self.m[i][j] + (1.0 - a.beta1) * g;
                    self.v[i][j] = a.beta2 * self.v[i][j] + (1.0 - a.beta2) * g * g;
                    let m_hat = self.m[i][j] / (1.0 - a.beta1.powi(self.t));
                    let v_hat = self.v[i][j] / (1.0 - a.beta2.powi(self.t));
                    data[j] -= a.lr * m_hat / (v_hat.sqrt() + eps);
                } else {
                    let g = grads[i][j] + w.weight_decay * data[j];
                    self.velocity[i][j] = w.momentum * self.velocity[i][j] + g;
                    data[j] -= lr_w * self.velocity[i][j];
                }
            }
            let delta = data.iter().zip(&before).map(|(n, o)| n - o).collect();
            deltas.push((self.names[i].clone(), delta));
        }
        Ok(ParamDelta {
            loss: tape.value(loss).data()[0],
            deltas,
        })
    }
}

/// One reference step from the supernet's current parameters.
pub fn darts_reference_step(
    net: &Supernet,
    batch: &Batch,
    cfg: &TrainConfig,
    lr_w: f64,
) -> Result<ParamDelta> {
    ReferenceDarts::new(net, cfg).step(batch, lr_w)
}

/// Runs the trainer with drop rate zero and the reference side by side for
/// `steps` batches and records the largest parameter and loss deviations.
pub fn darts_parity(
    net: &Supernet,
    cfg: &TrainConfig,
    data: &Dataset,
    steps: usize,
    seed: u64,
) -> Result<ParityReport> {
    let mut trainer = Trainer::new(net.clone(), cfg, &DropConfig::with_rate(0.0), seed)?;
    let mut reference = ReferenceDarts::new(net, cfg);
    let lr = cfg.w_optim.lr;
    let (mut param_dev, mut loss_dev): (f64, f64) = (0.0, 0.0);
    let mut done = 0;
    let mut epoch = 0;
    while done < steps {
        for idx in data.batch_indices(cfg.batch_size, Some((seed, epoch))) {
            if done == steps {
                break;
            }
            let batch = data.batch(&idx)?;
            let rec = trainer.train_step(&batch, lr)?;
            let delta = reference.step(&batch, lr)?;
            loss_dev = loss_dev.max((rec.loss - delta.loss).abs());
            for (_, p) in trainer.net().params().iter() {
                let r = reference.value(&p.name).ok_or_else(|| {
                    dropnas::Error::Contract(format!("reference lacks {}", p.name))
                })?;
                let dev = if p.value.is_finite() && r.is_finite() && p.value.shape() == r.shape() {
                    p.value.max_abs_diff(r)
                } else {
                    f64::INFINITY
                };
                param_dev = param_dev.max(dev);
            }
            done += 1;
        }
        epoch += 1;
    }
    let mut report = ParityReport::new();
    report.push("parameters", param_dev, steps, 1e-9);
    report.push("loss", loss_dev, steps, 1e-9);
    Ok(report)
}
