use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// Which elements of one parameter a step touches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ElementMask {
    All,
    None,
    Elements(Vec<bool>),
}

impl ElementMask {
    pub fn get(&self, i: usize) -> bool {
        match self {
            ElementMask::All => true,
            ElementMask::None => false,
            ElementMask::Elements(m) => m[i],
        }
    }

    pub fn any(&self) -> bool {
        match self {
            ElementMask::All => true,
            ElementMask::None => false,
            ElementMask::Elements(m) => m.iter().any(|&b| b),
        }
    }
}

/// Per-parameter step control.
///
/// Elements outside `active` are skipped entirely: value and moment
/// buffers stay bit-identical. `decay` selects where the L2 term
/// `weight_decay * p` is added to the gradient; it is only honored on
/// active elements.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateMask {
    pub active: ElementMask,
    pub decay: ElementMask,
}

impl UpdateMask {
    pub fn full() -> Self {
        Self {
            active: ElementMask::All,
            decay: ElementMask::All,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::SgdMomentum { momentum }, lr, weight_decay)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self::new(
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps: 1e-8,
            },
            lr,
            weight_decay,
        )
    }

    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64) -> Self {
        Self {
            kind,
            lr,
            weight_decay,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Momentum (SGD) or first-moment (Adam) buffer of parameter `i`.
    pub fn first_moment(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).map(Vec::as_slice)
    }

    pub fn second_moment(&self, i: usize) -> Option<&[f64]> {
        self.second.get(i).map(Vec::as_slice)
    }

    fn ensure_buffers(&mut self, params: &[&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            if matches!(self.kind, OptimizerKind::Adam { .. }) {
                self.second = self.first.clone();
            }
        }
        if self.first.len() != params.len()
            || self
                .first
                .iter()
                .zip(params)
                .any(|(b, p)| b.len() != p.numel())
        {
            return Err(Error::Contract(
                "optimizer buffers do not match the parameter set".into(),
            ));
        }
        Ok(())
    }

    /// Applies one update. A parameter with any active element must have a gradient.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f64]>],
        masks: &[UpdateMask],
    ) -> Result<()> {
        if grads.len() != params.len() || masks.len() != params.len() {
            return Err(Error::Contract(
                "step: params, grads and masks differ in length".into(),
            ));
        }
        self.ensure_buffers(params)?;
        self.steps += 1;
        let t = self.steps as i32;
        for (i, param) in params.iter_mut().enumerate() {
            let mask = &masks[i];
            if !mask.active.any() {
                continue;
            }
            let grad = match grads[i] {
                Some(g) if g.len() == param.numel() => g,
                Some(_) => {
                    return Err(Error::Contract(format!(
                        "gradient shape mismatch for parameter {i}"
                    )))
                }
                None => {
                    return Err(Error::Contract(format!(
                        "missing gradient for active parameter {i}"
                    )))
                }
            };
            let values = param.data_mut();
            for j in 0..values.len() {
                if !mask.active.get(j) {
                    continue;
                }
                let mut g = grad[j];
                if self.weight_decay != 0.0 && mask.decay.get(j) {
                    g += self.weight_decay * values[j];
                }
                match self.kind {
                    OptimizerKind::SgdMomentum { momentum } => {
                        let buf = &mut self.first[i][j];
                        *buf = momentum * *buf + g;
                        values[j] -= self.lr * *buf;
                    }
                    OptimizerKind::Adam { beta1, beta2, eps } => {
                        let m = &mut self.first[i][j];
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        let v = &mut self.second[i][j];
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let m_hat = *m / (1.0 - beta1.powi(t));
                        let v_hat = *v / (1.0 - beta2.powi(t));
                        values[j] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Global L2 norm across all gradients.
pub fn grad_norm(grads: &[&mut [f64]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients uniformly so the global norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [&mut [f64]], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}
