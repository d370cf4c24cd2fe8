use std::collections::HashMap;

use dropnas::autodiff::{Conv2dSpec, Tape, Var};
use dropnas::genotype::Genotype;
use dropnas::params::ParamStore;
use dropnas::space::CellKind;
use dropnas::supernet::Supernet;
use dropnas::{Error, Result, Tensor};

/// Network layout as the reference sees it.
#[derive(Clone, Debug)]
pub struct RefArch {
    pub cells: usize,
    pub nodes: usize,
    pub reduction: Vec<bool>,
    pub ops: Vec<String>,
}

impl RefArch {
    pub fn of(net: &Supernet) -> Self {
        let cfg = net.config();
        let reduction = (0..cfg.cells)
            .map(|i| match &cfg.reductions {
                Some(list) => list.contains(&i),
                None => i == cfg.cells / 3 || i == 2 * cfg.cells / 3,
            })
            .collect();
        Self {
            cells: cfg.cells,
            nodes: cfg.nodes,
            reduction,
            ops: net.space().ops().iter().map(|o| o.name.clone()).collect(),
        }
    }

    fn kind(&self, cell: usize) -> &'static str {
        if self.reduction[cell] {
            "reduce"
        } else {
            "normal"
        }
    }
}

/// How each edge's op outputs are combined.
pub(crate) enum Weighting<'a> {
    /// `sum_o softmax(alpha[e])_o * op_o(x)` over every op.
    Softmax,
    /// Only `(kind, from, to) -> op` edges, each with weight one.
    Hard(&'a HashMap<(&'static str, usize, usize), String>),
}

pub(crate) struct Vars<'a> {
    pub tape: &'a mut Tape,
    pub by_name: HashMap<String, Var>,
}

impl Vars<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("reference: missing parameter {name}")))
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let affine = match (
            self.by_name.get(&format!("{prefix}.gamma")),
            self.by_name.get(&format!("{prefix}.beta")),
        ) {
            (Some(&g), Some(&b)) => Some((g, b)),
            _ => None,
        };
        self.tape.batch_norm(x, affine)
    }

    fn relu_conv_bn(&mut self, prefix: &str, x: Var, stride: usize) -> Result<Var> {
        let h = self.tape.relu(x)?;
        let w = self.get(&format!("{prefix}.conv"))?;
        let h = self.tape.conv2d(h, w, Conv2dSpec::new(stride, 1, 1))?;
        self.bn(&format!("{prefix}.bn"), h)
    }

    fn dw_pw_bn(&mut self, prefix: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
        let h = self.tape.relu(x)?;
        let dw = self.get(&format!("{prefix}.dw"))?;
        let channels = self.tape.shape(dw)[0];
        let h = self
            .tape
            .conv2d(h, dw, Conv2dSpec::new(stride, dilation, channels))?;
        let pw = self.get(&format!("{prefix}.pw"))?;
        let h = self.tape.conv2d(h, pw, Conv2dSpec::new(1, 1, 1))?;
        self.bn(&format!("{prefix}.bn"), h)
    }

    /// Output of the op called `name`, or `None` for the zero op.
    fn op(&mut self, prefix: &str, name: &str, x: Var, stride: usize) -> Result<Option<Var>> {
        let p = format!("{prefix}.{name}");
        let out = if name == "none" {
            return Ok(None);
        } else if name.starts_with("skip_connect") {
            if stride == 1 {
                x
            } else {
                self.relu_conv_bn(&p, x, stride)?
            }
        } else if name.starts_with("sep_conv") {
            let h = self.dw_pw_bn(&format!("{p}.a"), x, stride, 1)?;
            self.dw_pw_bn(&format!("{p}.b"), h, 1, 1)?
        } else if name.starts_with("dil_conv") {
            self.dw_pw_bn(&p, x, stride, 2)?
        } else if name == "max_pool_3x3" {
            let h = self.tape.max_pool3x3(x, stride)?;
            self.tape.batch_norm(h, None)?
        } else if name == "avg_pool_3x3" {
            let h = self.tape.avg_pool3x3(x, stride)?;
            self.tape.batch_norm(h, None)?
        } else {
            return Err(Error::Config(format!("reference: unknown op {name}")));
        };
        Ok(Some(out))
    }
}

pub(crate) fn forward(arch: &RefArch, v: &mut Vars, x: Var, weighting: &Weighting) -> Result<Var> {
    let w = v.get("stem.conv")?;
    let h = v.tape.conv2d(x, w, Conv2dSpec::new(1, 1, 1))?;
    let stem = v.bn("stem.bn", h)?;
    let (mut s0, mut s1) = (stem, stem);
    let mut prev_reduction = false;
    for cell in 0..arch.cells {
        let kind = arch.kind(cell);
        let red = arch.reduction[cell];
        let pre = format!("cell{cell}");
        let p0 = v.relu_conv_bn(
            &format!("{pre}.pre0"),
            s0,
            if prev_reduction { 2 } else { 1 },
        )?;
        let p1 = v.relu_conv_bn(&format!("{pre}.pre1"), s1, 1)?;
        let mut states = vec![p0, p1];
        let mut edge_row = 0;
        for node in 2..2 + arch.nodes {
            let mut acc: Option<Var> = None;
            for from in 0..node {
                let stride = if red && from < 2 { 2 } else { 1 };
                let prefix = format!("{pre}.e{from}-{node}");
                let mixed = match weighting {
                    Weighting::Softmax => {
                        let alpha = v.get(&format!("alpha.{kind}"))?;
                        let p = v
                            .tape
                            .softmax_row(alpha, edge_row, &vec![true; arch.ops.len()])?;
                        let mut terms = Vec::new();
                        for (o, name) in arch.ops.iter().enumerate() {
                            if let Some(out) = v.op(&prefix, name, states[from], stride)? {
                                terms.push((o, out));
                            }
                        }
                        Some(v.tape.weighted_sum(p, &terms)?)
                    }
                    Weighting::Hard(chosen) => match chosen.get(&(kind, from, node)) {
                        Some(name) => v.op(&prefix, name, states[from], stride)?,
                        None => None,
                    },
                };
                edge_row += 1;
                if let Some(m) = mixed {
                    acc = Some(match acc {
                        Some(a) => v.tape.add(a, m)?,
                        None => m,
                    });
                }
            }
            states.push(
                acc.ok_or_else(|| Error::Contract(format!("reference: node {node} has no input")))?,
            );
        }
        let out = v.tape.concat_channels(&states[2..])?;
        s0 = s1;
        s1 = out;
        prev_reduction = red;
    }
    let pooled = v.tape.global_avg_pool(s1)?;
    let w = v.get("head.weight")?;
    let logits = v.tape.matmul(pooled, w)?;
    let b = v.get("head.bias")?;
    v.tape.add_bias(logits, b)
}

pub(crate) fn register(tape: &mut Tape, store: &ParamStore) -> Result<HashMap<String, Var>> {
    let mut by_name = HashMap::new();
    for (_, p) in store.iter() {
        by_name.insert(p.name.clone(), tape.param(p.value.clone())?);
    }
    Ok(by_name)
}

/// Softmax-mixture logits of `net` computed by the reference forward.
pub fn reference_logits(net: &Supernet, images: &Tensor) -> Result<Tensor> {
    let arch = RefArch::of(net);
    let mut tape = Tape::new();
    let by_name = register(&mut tape, net.params())?;
    let x = tape.constant(images.clone())?;
    let mut v = Vars {
        tape: &mut tape,
        by_name,
    };
    let logits = forward(&arch, &mut v, x, &Weighting::Softmax)?;
    Ok(tape.value(logits).clone())
}

/// Supernet forward where each gene's op has weight one and everything else
/// weight zero.
pub fn hard_mask_forward(net: &Supernet, genotype: &Genotype, images: &Tensor) -> Result<Tensor> {
    let arch = RefArch::of(net);
    let mut chosen = HashMap::new();
    for (kind, label) in [
        (CellKind::Normal, "normal"),
        (CellKind::Reduction, "reduce"),
    ] {
        for g in genotype.cell(kind) {
            chosen.insert((label, g.pred, g.node), g.op.clone());
        }
    }
    let mut tape = Tape::new();
    let by_name = register(&mut tape, net.params())?;
    let x = tape.constant(images.clone())?;
    let mut v = Vars {
        tape: &mut tape,
        by_name,
    };
    let logits = forward(&arch, &mut v, x, &Weighting::Hard(&chosen))?;
    Ok(tape.value(logits).clone())
}
