use dropnas::genotype::{Gene, Genotype, GENOTYPE_SCHEMA};
use dropnas::space::CellKind;
use dropnas::supernet::AlphaTable;

fn probs(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Clone, Copy, Debug)]
struct Cand {
    pred: usize,
    op: usize,
    p: f64,
}

/// Strict preference between two (edge, op) candidates.
fn prefer(a: &Cand, b: &Cand) -> bool {
    a.p > b.p || (a.p == b.p && (a.pred < b.pred || (a.pred == b.pred && a.op < b.op)))
}

fn ordered(a: Cand, b: Cand) -> (Cand, Cand) {
    if prefer(&b, &a) {
        (b, a)
    } else {
        (a, b)
    }
}

fn pair_beats(x: (Cand, Cand), y: (Cand, Cand)) -> bool {
    prefer(&x.0, &y.0) || (!prefer(&y.0, &x.0) && prefer(&x.1, &y.1))
}

/// Genotype by exhaustive search: for every node, every pair of non-zero
/// (edge, op) candidates on distinct edges is scored and the best pair kept.
pub fn brute_force_genotype(alpha: &AlphaTable) -> Genotype {
    let mut g = Genotype {
        schema_version: GENOTYPE_SCHEMA,
        normal: Vec::new(),
        reduce: Vec::new(),
        meta: None,
    };
    for (&kind, edges) in &alpha.edges {
        let rows = &alpha.alpha[&kind];
        let last = edges.iter().map(|e| e.to).max().unwrap_or(0);
        let mut genes = Vec::new();
        for node in 2..=last {
            let mut cands = Vec::new();
            for (e, edge) in edges.iter().enumerate() {
                if edge.to != node {
                    continue;
                }
                let p = probs(&rows[e]);
                for (op, name) in alpha.ops.iter().enumerate() {
                    if name != "none" {
                        cands.push(Cand {
                            pred: edge.from,
                            op,
                            p: p[op],
                        });
                    }
                }
            }
            let mut best: Option<(Cand, Cand)> = None;
            for i in 0..cands.len() {
                for j in i + 1..cands.len() {
                    if cands[i].pred == cands[j].pred {
                        continue;
                    }
                    let pair = ordered(cands[i], cands[j]);
                    if best.is_none_or(|b| pair_beats(pair, b)) {
                        best = Some(pair);
                    }
                }
            }
            if let Some((a, b)) = best {
                let (lo, hi) = if a.pred < b.pred { (a, b) } else { (b, a) };
                for c in [lo, hi] {
                    genes.push(Gene {
                        node,
                        pred: c.pred,
                        op: alpha.ops[c.op].clone(),
                    });
                }
            }
        }
        match kind {
            CellKind::Normal => g.normal = genes,
            CellKind::Reduction => g.reduce = genes,
        }
    }
    g
}
