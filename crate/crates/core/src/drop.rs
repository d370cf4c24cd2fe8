//! Grouped operation dropout: per-edge keep/drop masks.
//!
//! Each op in a group is dropped independently with `p_d = r^(1/|group|)`,
//! so the whole group would be dropped with probability `r`. A group that
//! comes out empty is resampled on its own until it keeps something; after
//! `resample_cap` failed attempts one op of the group is kept uniformly at
//! random.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{OpGroup, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropConfig {
    /// Drop path rate.
    #[serde(default = "default_r")]
    pub r: f64,
    /// Rate override for the parameterized group.
    #[serde(default)]
    pub r_p: Option<f64>,
    /// Rate override for the non-parameterized group.
    #[serde(default)]
    pub r_np: Option<f64>,
    #[serde(default = "default_cap")]
    pub resample_cap: u32,
}

fn default_r() -> f64 {
    3e-5
}

fn default_cap() -> u32 {
    100
}

impl Default for DropConfig {
    fn default() -> Self {
        Self {
            r: default_r(),
            r_p: None,
            r_np: None,
            resample_cap: default_cap(),
        }
    }
}

impl DropConfig {
    pub fn with_rate(r: f64) -> Self {
        Self {
            r,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r", Some(self.r)), ("r_p", self.r_p), ("r_np", self.r_np)] {
            if let Some(r) = r {
                check_rate(r)
                    .map_err(|_| Error::Config(format!("drop.{name} = {r} is outside [0, 1)")))?;
            }
        }
        if self.resample_cap == 0 {
            return Err(Error::Config("drop.resample_cap must be positive".into()));
        }
        Ok(())
    }

    fn rate_for(&self, group: OpGroup) -> f64 {
        match group {
            OpGroup::Parameterized => self.r_p.unwrap_or(self.r),
            OpGroup::NonParameterized => self.r_np.unwrap_or(self.r),
        }
    }
}

fn check_rate(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Config(format!("drop rate {r} is outside [0, 1)")))
    }
}

/// Per-op drop probability for a group of `group_size` ops.
pub fn drop_prob(r: f64, group_size: usize) -> Result<f64> {
    check_rate(r)?;
    if group_size == 0 {
        return Err(Error::Config("group size must be positive".into()));
    }
    Ok(r.powf(1.0 / group_size as f64))
}

/// Which known scheme a per-op drop probability corresponds to.
pub fn regime_of(p_d: f64) -> &'static str {
    if p_d.abs() < 1e-9 {
        "darts"
    } else if (p_d - 0.75).abs() < 1e-6 {
        "proxylessnas"
    } else if (p_d - 0.875).abs() < 1e-6 {
        "snas"
    } else {
        "dropnas"
    }
}

/// Keep (`true`) / drop (`false`) per op, in search-space order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DropMask {
    keep: Vec<bool>,
}

impl DropMask {
    pub fn all_kept(len: usize) -> Self {
        Self {
            keep: vec![true; len],
        }
    }

    /// Builds a mask and checks that every group keeps at least one op.
    pub fn new(keep: Vec<bool>, groups: &[DropGroup]) -> Result<Self> {
        let len = groups.iter().map(|g| g.ops.len()).sum::<usize>();
        if keep.len() != len {
            return Err(Error::Contract(format!(
                "mask length {} for {len} ops",
                keep.len()
            )));
        }
        for g in groups {
            if !g.ops.iter().any(|&i| keep[i]) {
                return Err(Error::Contract("mask drops every op of a group".into()));
            }
        }
        Ok(Self { keep })
    }

    /// A mask without group validation, for callers that check it themselves.
    pub fn from_keep(keep: Vec<bool>) -> Self {
        Self { keep }
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn is_kept(&self, op: usize) -> bool {
        self.keep[op]
    }

    pub fn any_dropped(&self) -> bool {
        self.keep.iter().any(|k| !k)
    }

    pub fn any_kept(&self) -> bool {
        self.keep.iter().any(|&k| k)
    }

    pub fn dropped(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.keep.len()).filter(|&i| !self.keep[i])
    }

    /// Bit-packed form, op 0 in the lowest bit.
    pub fn bits(&self) -> u64 {
        self.keep
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &k)| acc | ((k as u64) << i))
    }
}

/// A set of ops sharing one drop probability and one keep-at-least-one constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct DropGroup {
    pub ops: Vec<usize>,
    pub p_d: f64,
}

/// The groups ops are dropped in. With `grouped == false` every op forms a
/// single group with `p_d = r^(1/|O|)`.
pub fn drop_groups(space: &SearchSpace, cfg: &DropConfig, grouped: bool) -> Result<Vec<DropGroup>> {
    cfg.validate()?;
    if !grouped {
        let ops: Vec<usize> = (0..space.len()).collect();
        let p_d = drop_prob(cfg.r, ops.len())?;
        return Ok(vec![DropGroup { ops, p_d }]);
    }
    [OpGroup::Parameterized, OpGroup::NonParameterized]
        .into_iter()
        .map(|group| {
            let ops = space.group_indices(group);
            let p_d = drop_prob(cfg.rate_for(group), ops.len())?;
            Ok(DropGroup { ops, p_d })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct MaskSampler {
    len: usize,
    groups: Vec<DropGroup>,
    cap: u32,
}

impl MaskSampler {
    pub fn new(space: &SearchSpace, cfg: &DropConfig, grouped: bool) -> Result<Self> {
        Ok(Self {
            len: space.len(),
            groups: drop_groups(space, cfg, grouped)?,
            cap: cfg.resample_cap,
        })
    }

    pub fn groups(&self) -> &[DropGroup] {
        &self.groups
    }

    /// True when no op can ever be dropped.
    pub fn never_drops(&self) -> bool {
        self.groups.iter().all(|g| g.p_d == 0.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DropMask {
        let mut keep = vec![true; self.len];
        for group in &self.groups {
            if group.p_d == 0.0 {
                continue;
            }
            let mut accepted = false;
            for _ in 0..self.cap {
                for &i in &group.ops {
                    keep[i] = rng.gen::<f64>() >= group.p_d;
                }
                if group.ops.iter().any(|&i| keep[i]) {
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                let pick = group.ops[rng.gen_range(0..group.ops.len())];
                keep[pick] = true;
            }
        }
        DropMask { keep }
    }
}

pub fn sample_mask<R: Rng + ?Sized>(
    space: &SearchSpace,
    cfg: &DropConfig,
    grouped: bool,
    rng: &mut R,
) -> Result<DropMask> {
    Ok(MaskSampler::new(space, cfg, grouped)?.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn default_rate_gives_0074() {
        let p = drop_prob(3e-5, 4).unwrap();
        assert!((p - 0.074).abs() < 1e-3, "{p}");
    }

    #[test]
    fn zero_rate_never_drops() {
        assert_eq!(drop_prob(0.0, 4).unwrap(), 0.0);
        let space = SearchSpace::darts();
        let sampler = MaskSampler::new(&space, &DropConfig::with_rate(0.0), true).unwrap();
        let mut rng = stream(1, Purpose::Mask, 0, 0);
        for _ in 0..1000 {
            assert!(!sampler.sample(&mut rng).any_dropped());
        }
    }

    #[test]
    fn square_rate_over_two() {
        let p = drop_prob(0.6 * 0.6, 2).unwrap();
        assert!((p - 0.6).abs() < 1e-15);
    }

    #[test]
    fn rate_out_of_range() {
        assert!(drop_prob(1.0, 4).is_err());
        assert!(drop_prob(-0.1, 4).is_err());
        assert!(DropConfig {
            r_p: Some(1.5),
            ..DropConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn regimes() {
        assert_eq!(regime_of(0.0), "darts");
        assert_eq!(regime_of(0.875), "snas");
        assert_eq!(regime_of(0.75), "proxylessnas");
        assert_eq!(regime_of(0.074), "dropnas");
        assert_eq!(regime_of(drop_prob(0.875f64.powi(4), 4).unwrap()), "snas");
    }

    #[test]
    fn near_certain_drop_force_keeps_one_per_group() {
        let space = SearchSpace::darts();
        let cfg = DropConfig::with_rate(1.0 - 1e-12);
        let sampler = MaskSampler::new(&space, &cfg, true).unwrap();
        let mut rng = stream(2, Purpose::Mask, 0, 0);
        for _ in 0..200 {
            let mask = sampler.sample(&mut rng);
            for g in sampler.groups() {
                assert_eq!(g.ops.iter().filter(|&&i| mask.is_kept(i)).count(), 1);
            }
        }
    }

    #[test]
    fn ungrouped_uses_whole_space() {
        let space = SearchSpace::darts();
        let groups = drop_groups(&space, &DropConfig::with_rate(3e-5), false).unwrap();
        assert_eq!(groups.len(), 1);
        assert!((groups[0].p_d.powi(8) - 3e-5).abs() < 1e-15);
    }

    #[test]
    fn per_group_overrides() {
        let space = SearchSpace::darts();
        let cfg = DropConfig {
            r_p: Some(1e-4),
            r_np: Some(1e-5),
            ..DropConfig::default()
        };
        let groups = drop_groups(&space, &cfg, true).unwrap();
        assert!((groups[0].p_d - 1e-4f64.powf(0.25)).abs() < 1e-15);
        assert!((groups[1].p_d - 1e-5f64.powf(0.25)).abs() < 1e-15);
    }

    #[test]
    fn mask_validation() {
        let groups = drop_groups(&SearchSpace::darts(), &DropConfig::default(), true).unwrap();
        let mut keep = vec![true; 8];
        keep[..4].iter_mut().for_each(|k| *k = false);
        assert!(DropMask::new(keep, &groups).is_err());
        assert!(DropMask::new(vec![true; 7], &groups).is_err());
    }

    #[test]
    fn same_stream_same_mask() {
        let space = SearchSpace::darts();
        let sampler = MaskSampler::new(&space, &DropConfig::with_rate(0.3), true).unwrap();
        let a = sampler.sample(&mut stream(5, Purpose::Mask, 11, 3));
        let b = sampler.sample(&mut stream(5, Purpose::Mask, 11, 3));
        assert_eq!(a, b);
    }
}
