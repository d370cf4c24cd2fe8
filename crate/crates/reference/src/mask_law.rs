use dropnas::drop::DropConfig;

/// Exact distribution of masks produced by the sampler.
#[derive(Clone, Debug)]
pub struct MaskLaw {
    /// Op indices of each group with the probability of every keep pattern
    /// (bit `i` set = the group's `i`-th op kept).
    pub groups: Vec<(Vec<usize>, Vec<f64>)>,
    /// Per op, probability of being dropped.
    pub drop_marginal: Vec<f64>,
}

/// Pattern probabilities for one group of `size` ops dropped independently
/// with `p_d`, redrawn while empty at most `cap` times, then one op kept
/// uniformly at random.
pub fn group_pattern_probs(size: usize, p_d: f64, cap: u32) -> Vec<f64> {
    let patterns = 1usize << size;
    let mut out = vec![0.0; patterns];
    if p_d == 0.0 {
        out[patterns - 1] = 1.0;
        return out;
    }
    let q = p_d.powi(size as i32);
    let accept = (1.0 - q.powi(cap as i32)) / (1.0 - q);
    for (s, slot) in out.iter_mut().enumerate().skip(1) {
        let kept = s.count_ones() as i32;
        *slot = (1.0 - p_d).powi(kept) * p_d.powi(size as i32 - kept) * accept;
    }
    let fallback = q.powi(cap as i32) / size as f64;
    for i in 0..size {
        out[1 << i] += fallback;
    }
    out
}

fn is_parameterized(name: &str) -> bool {
    name.starts_with("sep_conv") || name.starts_with("dil_conv")
}

/// Law of the mask for an op list under `cfg`, derived by enumerating every
/// keep pattern of every group.
pub fn exact_mask_law(ops: &[String], cfg: &DropConfig, grouped: bool) -> MaskLaw {
    let groups: Vec<(Vec<usize>, f64)> = if grouped {
        let p: Vec<usize> = (0..ops.len())
            .filter(|&i| is_parameterized(&ops[i]))
            .collect();
        let np: Vec<usize> = (0..ops.len())
            .filter(|&i| !is_parameterized(&ops[i]))
            .collect();
        vec![
            (p, cfg.r_p.unwrap_or(cfg.r)),
            (np, cfg.r_np.unwrap_or(cfg.r)),
        ]
    } else {
        vec![((0..ops.len()).collect(), cfg.r)]
    };
    let mut drop_marginal = vec![0.0; ops.len()];
    let mut out = Vec::new();
    for (members, r) in groups {
        let p_d = r.powf(1.0 / members.len() as f64);
        let law = group_pattern_probs(members.len(), p_d, cfg.resample_cap);
        for (s, &pr) in law.iter().enumerate() {
            for (i, &op) in members.iter().enumerate() {
                if s & (1 << i) == 0 {
                    drop_marginal[op] += pr;
                }
            }
        }
        out.push((members, law));
    }
    MaskLaw {
        groups: out,
        drop_marginal,
    }
}
