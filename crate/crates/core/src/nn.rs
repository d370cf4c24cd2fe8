//! Layers shared by the supernet and stand-alone networks: candidate-op
//! modules, cell preprocessing, stem, classifier head, and the channel plan
//! for a stack of cells.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamRole, ParamStore};
use crate::space::{CellKind, OpKind, Primitive};
use crate::tensor::Tensor;

/// Macro shape of a cell network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub cells: usize,
    /// Intermediate nodes per cell.
    pub nodes: usize,
    pub channels: usize,
    #[serde(default = "default_stem_multiplier")]
    pub stem_multiplier: usize,
    /// Indices of reduction cells; `None` places them at 1/3 and 2/3 depth.
    #[serde(default)]
    pub reductions: Option<Vec<usize>>,
    /// Learnable scale/shift in batch norm layers.
    #[serde(default)]
    pub bn_affine: bool,
}

fn default_stem_multiplier() -> usize {
    3
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            cells: 4,
            nodes: 2,
            channels: 8,
            stem_multiplier: 3,
            reductions: None,
            bn_affine: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 || self.nodes == 0 || self.channels == 0 || self.stem_multiplier == 0 {
            return Err(Error::Config(
                "cells, nodes, channels and stem_multiplier must be positive".into(),
            ));
        }
        if let Some(r) = &self.reductions {
            if r.iter().any(|&i| i >= self.cells) {
                return Err(Error::Config(format!(
                    "reduction cell index out of range for {} cells",
                    self.cells
                )));
            }
        }
        Ok(())
    }

    pub fn is_reduction(&self, cell: usize) -> bool {
        match &self.reductions {
            Some(r) => r.contains(&cell),
            None => cell == self.cells / 3 || cell == 2 * self.cells / 3,
        }
    }
}

/// Channel bookkeeping for one cell of a stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellPlan {
    pub kind: CellKind,
    /// Channels of the cell two back (input 0) and one back (input 1).
    pub c_prev_prev: usize,
    pub c_prev: usize,
    /// Channels of every node inside the cell.
    pub c: usize,
    /// Input 0 has twice the resolution of input 1.
    pub reduction_prev: bool,
}

/// Per-cell plan plus the channel count fed to the classifier.
pub fn plan_cells(cfg: &NetConfig) -> (Vec<CellPlan>, usize) {
    let stem_c = cfg.stem_multiplier * cfg.channels;
    let (mut c_pp, mut c_p, mut c) = (stem_c, stem_c, cfg.channels);
    let mut reduction_prev = false;
    let mut plans = Vec::with_capacity(cfg.cells);
    for i in 0..cfg.cells {
        let reduction = cfg.is_reduction(i);
        if reduction {
            c *= 2;
        }
        plans.push(CellPlan {
            kind: if reduction {
                CellKind::Reduction
            } else {
                CellKind::Normal
            },
            c_prev_prev: c_pp,
            c_prev: c_p,
            c,
            reduction_prev,
        });
        reduction_prev = reduction;
        c_pp = c_p;
        c_p = cfg.nodes * c;
    }
    (plans, c_p)
}

/// Batch norm with optional learnable affine parameters.
#[derive(Clone, Debug)]
pub struct Bn(Option<(ParamId, ParamId)>);

impl Bn {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        affine: bool,
        role: ParamRole,
    ) -> Result<Self> {
        if !affine {
            return Ok(Bn(None));
        }
        let gamma = store.add(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0), role)?;
        let beta = store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), role)?;
        Ok(Bn(Some((gamma, beta))))
    }

    pub fn none() -> Self {
        Bn(None)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let affine = self.0.map(|(g, b)| (vars[g.0], vars[b.0]));
        tape.batch_norm(x, affine)
    }
}

fn conv_weight(
    store: &mut ParamStore,
    name: String,
    c_out: usize,
    c_in_per_group: usize,
    k: usize,
    role: ParamRole,
) -> Result<ParamId> {
    store.add_uniform(
        name,
        &[c_out, c_in_per_group, k, k],
        c_in_per_group * k * k,
        role,
    )
}

/// ReLU, kxk convolution, batch norm.
#[derive(Clone, Debug)]
pub struct ReluConvBn {
    conv: ParamId,
    stride: usize,
    bn: Bn,
}

impl ReluConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        affine: bool,
        role: ParamRole,
    ) -> Result<Self> {
        Ok(Self {
            conv: conv_weight(store, format!("{prefix}.conv"), c_out, c_in, k, role)?,
            stride,
            bn: Bn::new(store, &format!("{prefix}.bn"), c_out, affine, role)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = tape.conv2d(h, vars[self.conv.0], Conv2dSpec::new(self.stride, 1, 1))?;
        self.bn.forward(tape, vars, h)
    }
}

/// Depthwise kxk (optionally dilated) followed by pointwise 1x1.
#[derive(Clone, Debug)]
struct DepthwisePointwise {
    dw: ParamId,
    pw: ParamId,
    stride: usize,
    dilation: usize,
    channels: usize,
}

impl DepthwisePointwise {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        role: ParamRole,
    ) -> Result<Self> {
        Ok(Self {
            dw: conv_weight(store, format!("{prefix}.dw"), c, 1, k, role)?,
            pw: conv_weight(store, format!("{prefix}.pw"), c, c, 1, role)?,
            stride,
            dilation,
            channels: c,
        })
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let spec = Conv2dSpec::new(self.stride, self.dilation, self.channels);
        let h = tape.conv2d(x, vars[self.dw.0], spec)?;
        tape.conv2d(h, vars[self.pw.0], Conv2dSpec::plain())
    }
}

/// One candidate operation instantiated on an edge.
#[derive(Clone, Debug)]
pub enum OpModule {
    Zero,
    Identity,
    /// Stride-2 identity: ReLU, 1x1 stride-2 conv, BN.
    ReduceSkip(ReluConvBn),
    SepConv {
        first: DepthwisePointwiseBn,
        second: DepthwisePointwiseBn,
    },
    DilConv(DepthwisePointwiseBn),
    MaxPool {
        stride: usize,
    },
    AvgPool {
        stride: usize,
    },
}

/// ReLU, depthwise, pointwise, BN.
#[derive(Clone, Debug)]
pub struct DepthwisePointwiseBn {
    conv: DepthwisePointwise,
    bn: Bn,
}

impl DepthwisePointwiseBn {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        c: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
        role: ParamRole,
    ) -> Result<Self> {
        Ok(Self {
            conv: DepthwisePointwise::new(store, prefix, c, k, stride, dilation, role)?,
            bn: Bn::new(store, &format!("{prefix}.bn"), c, affine, role)?,
        })
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.relu(x)?;
        let h = self.conv.forward(tape, vars, h)?;
        self.bn.forward(tape, vars, h)
    }
}

impl OpModule {
    /// Instantiates `op` on a `c`-channel edge. Parameter names are
    /// `{prefix}.{op name}.*`, so identically wired networks share names.
    pub fn build(
        store: &mut ParamStore,
        prefix: &str,
        op: &OpKind,
        c: usize,
        stride: usize,
        affine: bool,
        role: ParamRole,
    ) -> Result<Self> {
        let p = format!("{prefix}.{}", op.name);
        Ok(match op.primitive {
            Primitive::Zero => OpModule::Zero,
            Primitive::Skip if stride == 1 => OpModule::Identity,
            Primitive::Skip => {
                OpModule::ReduceSkip(ReluConvBn::new(store, &p, c, c, 1, stride, affine, role)?)
            }
            Primitive::SepConv { kernel } => OpModule::SepConv {
                first: DepthwisePointwiseBn::new(
                    store,
                    &format!("{p}.a"),
                    c,
                    kernel,
                    stride,
                    1,
                    affine,
                    role,
                )?,
                second: DepthwisePointwiseBn::new(
                    store,
                    &format!("{p}.b"),
                    c,
                    kernel,
                    1,
                    1,
                    affine,
                    role,
                )?,
            },
            Primitive::DilConv { kernel } => OpModule::DilConv(DepthwisePointwiseBn::new(
                store, &p, c, kernel, stride, 2, affine, role,
            )?),
            Primitive::MaxPool => OpModule::MaxPool { stride },
            Primitive::AvgPool => OpModule::AvgPool { stride },
        })
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, OpModule::Zero)
    }

    /// Output of the op, or `None` for the zero op.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Option<Var>> {
        let out = match self {
            OpModule::Zero => return Ok(None),
            OpModule::Identity => x,
            OpModule::ReduceSkip(block) => block.forward(tape, vars, x)?,
            OpModule::SepConv { first, second } => {
                let h = first.forward(tape, vars, x)?;
                second.forward(tape, vars, h)?
            }
            OpModule::DilConv(block) => block.forward(tape, vars, x)?,
            // Pools are followed by a non-affine BN so their scale matches the conv branches.
            OpModule::MaxPool { stride } => {
                let h = tape.max_pool3x3(x, *stride)?;
                tape.batch_norm(h, None)?
            }
            OpModule::AvgPool { stride } => {
                let h = tape.avg_pool3x3(x, *stride)?;
                tape.batch_norm(h, None)?
            }
        };
        Ok(Some(out))
    }
}

/// Preprocessing of the two cell inputs down to `c` channels.
#[derive(Clone, Debug)]
pub struct CellInputs {
    pre0: ReluConvBn,
    pre1: ReluConvBn,
}

impl CellInputs {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        plan: &CellPlan,
        affine: bool,
    ) -> Result<Self> {
        let role = ParamRole::Weight { op: None };
        let stride0 = if plan.reduction_prev { 2 } else { 1 };
        Ok(Self {
            pre0: ReluConvBn::new(
                store,
                &format!("{prefix}.pre0"),
                plan.c_prev_prev,
                plan.c,
                1,
                stride0,
                affine,
                role,
            )?,
            pre1: ReluConvBn::new(
                store,
                &format!("{prefix}.pre1"),
                plan.c_prev,
                plan.c,
                1,
                1,
                affine,
                role,
            )?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], s0: Var, s1: Var) -> Result<(Var, Var)> {
        Ok((
            self.pre0.forward(tape, vars, s0)?,
            self.pre1.forward(tape, vars, s1)?,
        ))
    }
}

/// 3x3 convolution and BN.
#[derive(Clone, Debug)]
pub struct Stem {
    conv: ParamId,
    bn: Bn,
}

impl Stem {
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        out_channels: usize,
        affine: bool,
    ) -> Result<Self> {
        let role = ParamRole::Weight { op: None };
        Ok(Self {
            conv: conv_weight(
                store,
                "stem.conv".into(),
                out_channels,
                in_channels,
                3,
                role,
            )?,
            bn: Bn::new(store, "stem.bn", out_channels, affine, role)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let h = tape.conv2d(x, vars[self.conv.0], Conv2dSpec::plain())?;
        self.bn.forward(tape, vars, h)
    }
}

/// Global average pool and a dense layer.
#[derive(Clone, Debug)]
pub struct Head {
    weight: ParamId,
    bias: ParamId,
}

impl Head {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_features: usize,
        classes: usize,
    ) -> Result<Self> {
        let role = ParamRole::Weight { op: None };
        Ok(Self {
            weight: store.add_uniform(
                format!("{prefix}.weight"),
                &[in_features, classes],
                in_features,
                role,
            )?,
            bias: store.add_uniform(format!("{prefix}.bias"), &[classes], in_features, role)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.matmul(pooled, vars[self.weight.0])?;
        tape.add_bias(logits, vars[self.bias.0])
    }
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let Some((n, k)) = logits.dims2() else {
        return 0.0;
    };
    let correct = logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) == label)
        .count();
    correct as f64 / n.max(1) as f64
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
