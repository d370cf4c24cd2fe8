use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};
use crate::space::CellKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A candidate op on one edge of one cell kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct OpSlot {
    pub kind: CellKind,
    pub edge: usize,
    pub op: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    /// Network weight; `op` is set when it belongs to a candidate op.
    Weight { op: Option<OpSlot> },
    /// Architecture parameters `[edges, ops]` of one cell kind.
    Alpha(CellKind),
}

impl ParamRole {
    pub fn is_alpha(self) -> bool {
        matches!(self, ParamRole::Alpha(_))
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: ParamRole,
}

/// Named parameters of a model, in creation order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    seed: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        role: ParamRole,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, role });
        Ok(ParamId(self.params.len() - 1))
    }

    /// Uniform init in `±1/sqrt(fan_in)`, drawn from a stream keyed by the
    /// parameter's creation index.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        role: ParamRole,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = stream(self.seed, Purpose::Init, self.params.len() as u64, 0);
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?, role)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    /// Mutable values of `ids`, which must be strictly ascending.
    pub fn values_mut(&mut self, ids: &[ParamId]) -> Result<Vec<&mut Tensor>> {
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Contract("values_mut needs ascending ids".into()));
        }
        let mut want = ids.iter().peekable();
        let mut out = Vec::with_capacity(ids.len());
        for (i, p) in self.params.iter_mut().enumerate() {
            if want.peek().is_some_and(|id| id.0 == i) {
                want.next();
                out.push(&mut p.value);
            }
        }
        if want.next().is_some() {
            return Err(Error::Contract("values_mut: unknown parameter id".into()));
        }
        Ok(out)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_where(&self, pred: impl Fn(&Param) -> bool) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| pred(p))
            .map(|(id, _)| id)
            .collect()
    }

    /// Total scalar count of network weights (architecture parameters excluded).
    pub fn weight_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.role.is_alpha())
            .map(|p| p.value.numel())
            .sum()
    }

    /// Places every parameter on the tape as a tracked leaf; the returned
    /// vector is indexed by `ParamId`.
    pub fn register(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.params
            .iter()
            .map(|p| tape.param(p.value.clone()))
            .collect()
    }

    /// Copies values for every parameter whose name and shape match one in
    /// `source`. Returns how many were copied.
    pub fn inherit_from(&mut self, source: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = source.by_name(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}
