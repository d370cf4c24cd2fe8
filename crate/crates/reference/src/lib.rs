//! Independent reference implementations used as test oracles for `dropnas`.
//!
//! Nothing here reuses the supernet, trainer, optimizer or derivation code of
//! the main crate. Only the autodiff tape and parameter storage are shared;
//! network structure is re-derived from parameter names and the net config.

mod audit;
mod derive;
mod forward;
mod gradcheck;
mod mask_law;
mod step;

pub use audit::{audit_dropped_params, DropAudit};
pub use derive::brute_force_genotype;
pub use forward::{hard_mask_forward, reference_logits, RefArch};
pub use gradcheck::{gradcheck, gradcheck_case, op_cases, GradcheckReport, OpCase};
pub use mask_law::{exact_mask_law, group_pattern_probs, MaskLaw};
pub use step::{darts_parity, darts_reference_step, ParamDelta, ReferenceDarts};

/// Outcome of comparing the main implementation against a reference.
#[derive(Clone, Debug, PartialEq)]
pub struct ParityReport {
    pub checks: Vec<ParityCheck>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParityCheck {
    pub name: String,
    pub max_abs_dev: f64,
    pub steps: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl ParityReport {
    pub fn new() -> Self {
        Self { checks: Vec::new() }
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        max_abs_dev: f64,
        steps: usize,
        tolerance: f64,
    ) {
        self.checks.push(ParityCheck {
            name: name.into(),
            max_abs_dev,
            steps,
            tolerance,
            passed: max_abs_dev.is_finite() && max_abs_dev < tolerance,
        });
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn max_abs_dev(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_abs_dev)
            .fold(0.0, f64::max)
    }
}

impl Default for ParityReport {
    fn default() -> Self {
        Self::new()
    }
}
