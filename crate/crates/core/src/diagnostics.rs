//! Routing traces, utilization statistics, edge exports and the
//! displacement sweep.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Tokenizer;
use crate::error::{config_err, domain_err, Result};
use crate::memory_cell::{CentroidBank, MemoryCell};
use crate::model::{ForwardOptions, Model};
use crate::numerics::{argmax, l2_norm, Matrix, Tape};

/// Exponentiated Shannon entropy of `weights` after normalization.
/// A distribution uniform over its support returns the support size exactly.
pub fn effective_count(weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let support: Vec<f64> = weights.iter().copied().filter(|&w| w > 0.0).collect();
    if support.iter().all(|&w| w == support[0]) {
        return support.len() as f64;
    }
    let h: f64 = support
        .iter()
        .map(|&w| {
            let p = w / total;
            -p * p.ln()
        })
        .sum();
    h.exp()
}

/// `Σᵢ (2i − n − 1)·xᵢ / (n·Σx)` over ascending values, `i` from 1.
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || !(total > 0.0) || values.iter().all(|&v| v == values[0]) {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let num: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (2.0 * (i + 1) as f64 - n as f64 - 1.0) * x)
        .sum();
    num / (n as f64 * total)
}

/// Largest share of the total mass.
pub fn top_share(values: &[f64]) -> f64 {
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    if values.iter().all(|&v| v == values[0]) {
        return 1.0 / values.len() as f64;
    }
    values.iter().copied().fold(f64::MIN, f64::max) / total
}

/// Entropy in nats of one probability row (`0·ln 0 = 0`).
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Slot utilization summary of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilizationStats {
    pub block: usize,
    pub n_eff: f64,
    pub unique_slots: usize,
    pub gini: f64,
    pub top_share: f64,
    pub dead_count: usize,
    pub mean_cos_sim: f64,
}

/// Statistics of a usage vector; `dead_count` counts entries below
/// `delta_dead`.
pub fn utilization_stats(
    block: usize,
    usage: &[f64],
    delta_dead: f64,
    mean_cos_sim: f64,
) -> UtilizationStats {
    UtilizationStats {
        block,
        n_eff: effective_count(usage),
        unique_slots: usage.iter().filter(|&&u| u > 0.0).count(),
        gini: gini(usage),
        top_share: top_share(usage),
        dead_count: usage.iter().filter(|&&u| u < delta_dead).count(),
        mean_cos_sim,
    }
}

/// Statistics from a bank's smoothed usage.
pub fn bank_stats(block: usize, bank: &CentroidBank, delta_dead: f64) -> UtilizationStats {
    utilization_stats(
        block,
        &bank.usage,
        delta_dead,
        bank.mean_cosine_similarity(),
    )
}

/// Row statistics of a transition matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeStats {
    pub entropy_mean: f64,
    /// Mean over rows of the largest transition probability.
    pub max_mass_mean: f64,
    /// Mean off-diagonal cosine between rows.
    pub row_similarity: f64,
}

pub fn edge_stats(p: &Matrix) -> EdgeStats {
    let f = p.rows();
    let entropy_mean = p.row_iter().map(entropy).sum::<f64>() / f as f64;
    let max_mass_mean = p
        .row_iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .sum::<f64>()
        / f as f64;
    let mut sim = 0.0;
    for i in 0..f {
        for j in 0..f {
            if i != j {
                let (a, b) = (p.row(i), p.row(j));
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                sim += dot / (l2_norm(a) * l2_norm(b));
            }
        }
    }
    EdgeStats {
        entropy_mean,
        max_mass_mean,
        row_similarity: if f > 1 {
            sim / (f * (f - 1)) as f64
        } else {
            0.0
        },
    }
}

/// One routed token in one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub block: usize,
    pub position: usize,
    pub token_id: usize,
    pub token_text: String,
    pub src_slot: usize,
    pub tgt_slot: usize,
    pub src_entropy: f64,
    pub tgt_entropy: f64,
    pub displacement_norm: f64,
    pub self_route: bool,
}

/// Frozen forward over `ids` capturing source/target routing per block.
pub fn trace_ids(
    model: &Model,
    ids: &[usize],
    tokenizer: &dyn Tokenizer,
    tau: f64,
) -> Result<Vec<RoutingRecord>> {
    if ids.is_empty() {
        return Err(domain_err!("cannot trace an empty token sequence"));
    }
    if !model.config.is_memory() {
        return Err(config_err!("routing traces need memory blocks"));
    }
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = model.forward(&mut tape, &vars, ids, 1, &ForwardOptions::frozen(tau), None)?;
    let mut records = Vec::with_capacity(ids.len() * out.blocks.len());
    for (block, b) in out.blocks.iter().enumerate() {
        let r = b.routing.expect("memory block");
        let (src, tgt, disp) = (
            tape.value(r.w_src),
            tape.value(r.w_tgt),
            tape.value(r.displacement),
        );
        for (t, &id) in ids.iter().enumerate() {
            let src_slot = argmax(src.row(t));
            let tgt_slot = argmax(tgt.row(t));
            records.push(RoutingRecord {
                block,
                position: t,
                token_id: id,
                token_text: tokenizer.token_text(id),
                src_slot,
                tgt_slot,
                src_entropy: entropy(src.row(t)),
                tgt_entropy: entropy(tgt.row(t)),
                displacement_norm: l2_norm(disp.row(t)),
                self_route: src_slot == tgt_slot,
            });
        }
    }
    Ok(records)
}

/// Tokenizes `text` (no end-of-text), truncates to the context length and
/// traces it.
pub fn trace_text(
    model: &Model,
    text: &str,
    tokenizer: &dyn Tokenizer,
    tau: f64,
) -> Result<Vec<RoutingRecord>> {
    let mut ids = tokenizer.encode(text);
    if ids.is_empty() {
        return Err(domain_err!("cannot trace empty text"));
    }
    ids.truncate(model.config.max_seq_len);
    trace_ids(model, &ids, tokenizer, tau)
}

/// Utilization per block from the argmax source slots of a trace; slots
/// never chosen count as dead and centroid similarity is not available.
pub fn trace_stats(records: &[RoutingRecord], n_slots: usize) -> Vec<UtilizationStats> {
    let blocks = records.iter().map(|r| r.block + 1).max().unwrap_or(0);
    (0..blocks)
        .map(|b| {
            let mut counts = vec![0.0; n_slots];
            for r in records.iter().filter(|r| r.block == b) {
                counts[r.src_slot] += 1.0;
            }
            UtilizationStats {
                dead_count: counts.iter().filter(|&&c| c == 0.0).count(),
                ..utilization_stats(b, &counts, 0.0, 0.0)
            }
        })
        .collect()
}

/// Rows of the transition matrix for the most used slots.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EdgeTable {
    pub slots: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
    pub entropy: Vec<f64>,
    pub max_mass: Vec<f64>,
}

impl EdgeTable {
    pub fn to_csv(&self) -> String {
        let f = self.rows.first().map_or(0, Vec::len);
        let mut out = String::from("slot,entropy,max_mass");
        for j in 0..f {
            out.push_str(&format!(",p{j}"));
        }
        out.push('\n');
        for (k, row) in self.rows.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{}",
                self.slots[k], self.entropy[k], self.max_mass[k]
            ));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Top `top_k` slots by smoothed usage (ties to the lower index) with their
/// full transition rows.
pub fn edge_structure_export(cell: &MemoryCell, top_k: usize) -> Result<EdgeTable> {
    let f = cell.bank.slots();
    if top_k == 0 || top_k > f {
        return Err(config_err!("top_k must lie in [1, {f}], got {top_k}"));
    }
    let p = cell.edges.transitions()?;
    let mut order: Vec<usize> = (0..f).collect();
    order.sort_by(|&a, &b| {
        cell.bank.usage[b]
            .total_cmp(&cell.bank.usage[a])
            .then(a.cmp(&b))
    });
    order.truncate(top_k);
    let rows: Vec<Vec<f64>> = order.iter().map(|&i| p.row(i).to_vec()).collect();
    Ok(EdgeTable {
        entropy: rows.iter().map(|r| entropy(r)).collect(),
        max_mass: rows
            .iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect(),
        slots: order,
        rows,
    })
}

/// Mean next-token loss of a long id sequence, cut into consecutive windows
/// of at most the context length.
pub fn sequence_loss(model: &Model, ids: &[usize], opts: &ForwardOptions) -> Result<f64> {
    if ids.len() < 2 {
        return Err(domain_err!("need at least 2 tokens to score a sequence"));
    }
    let t = model.config.max_seq_len;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + t).min(ids.len() - 1);
        let input = &ids[start..end];
        let target = &ids[start + 1..end + 1];
        let loss = model.lm_loss(input, target, 1, opts)?;
        total += loss * input.len() as f64;
        count += input.len();
        start = end;
    }
    Ok(total / count as f64)
}

/// Loss with every memory displacement scaled by each `α`.
pub fn displacement_sweep(
    model: &Model,
    ids: &[usize],
    alphas: &[f64],
    tau: f64,
) -> Result<Vec<(f64, f64)>> {
    alphas
        .iter()
        .map(|&alpha| {
            if !(alpha >= 0.0) {
                return Err(config_err!(
                    "displacement scale must be nonnegative, got {alpha}"
                ));
            }
            let opts = ForwardOptions {
                displacement_scale: alpha,
                ..ForwardOptions::frozen(tau)
            };
            Ok((alpha, sequence_loss(model, ids, &opts)?))
        })
        .collect()
}

/// SHA-256 over every parameter and every bank's usage and age.
pub fn state_checksum(model: &Model) -> String {
    let mut hasher = Sha256::new();
    for p in model.params() {
        hasher.update(p.name.as_bytes());
        for v in p.data {
            hasher.update(v.to_le_bytes());
        }
    }
    for block in &model.blocks {
        if let Some(cell) = block.memory() {
            for u in &cell.bank.usage {
                hasher.update(u.to_le_bytes());
            }
            for a in &cell.bank.age {
                hasher.update(a.to_le_bytes());
            }
        }
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
