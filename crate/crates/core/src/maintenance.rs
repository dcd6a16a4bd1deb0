//! Online write-back, usage smoothing, dead-slot reset and similarity merge.
//!
//! Everything here mutates a [`CentroidBank`] in place on plain values; none
//! of it is recorded on a tape.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, domain_err, Result};
use crate::memory_cell::{random_unit_vector, CentroidBank};
use crate::numerics::{l2_norm, Matrix};

/// Knobs for usage tracking and the periodic maintenance event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaintenanceConfig {
    /// Usage smoothing factor.
    pub rho: f64,
    /// Slots whose usage falls below this are reset.
    pub delta_dead: f64,
    /// Cosine above which a mature pair counts as a duplicate.
    pub tau_merge: f64,
    /// Minimum age, in write-back calls, before a slot may be merged.
    pub a_cool: u64,
    /// Optimizer steps between maintenance events.
    pub k_maint: u64,
    /// Floor on the per-slot assignment count in write-back.
    pub eps_count: f64,
}

impl Default for MaintenanceConfig {
    fn default() -> Self {
        Self {
            rho: 0.99,
            delta_dead: 1e-3,
            tau_merge: 0.95,
            a_cool: 100,
            k_maint: 110,
            eps_count: 1e-6,
        }
    }
}

impl MaintenanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(config_err!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.delta_dead > 0.0 && self.delta_dead < 1.0) {
            return Err(config_err!(
                "delta_dead must lie in (0, 1), got {}",
                self.delta_dead
            ));
        }
        if !(self.tau_merge > 0.0 && self.tau_merge < 1.0) {
            return Err(config_err!(
                "tau_merge must lie in (0, 1), got {}",
                self.tau_merge
            ));
        }
        if self.k_maint == 0 {
            return Err(config_err!("k_maint must be at least 1"));
        }
        if !(self.eps_count > 0.0) {
            return Err(config_err!("eps_count must be positive"));
        }
        Ok(())
    }
}

/// Counts from one maintenance event on one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaintenanceReport {
    pub step: u64,
    pub block: usize,
    pub resets: usize,
    pub merges: usize,
    pub dead_before: usize,
    pub mean_cos_sim: f64,
}

fn check_routing(bank: &CentroidBank, w_src: &Matrix) -> Result<()> {
    if w_src.cols() != bank.slots() {
        return Err(config_err!(
            "routing has {} columns but the bank has {} slots",
            w_src.cols(),
            bank.slots()
        ));
    }
    Ok(())
}

/// Hard-assignment EMA: each token goes to its argmax slot, each slot moves
/// toward the mean of its tokens by `1 − σ(momentum)` and is renormalized.
/// Every slot ages by one.
pub fn write_back(
    bank: &mut CentroidBank,
    states: &Matrix,
    w_src: &Matrix,
    eps_count: f64,
) -> Result<()> {
    check_routing(bank, w_src)?;
    if states.rows() != w_src.rows() || states.cols() != bank.hidden() {
        return Err(config_err!(
            "write-back states {:?} do not match routing {:?} and hidden {}",
            states.shape(),
            w_src.shape(),
            bank.hidden()
        ));
    }
    let (f, h) = (bank.slots(), bank.hidden());
    let mut sums = Matrix::zeros(f, h);
    let mut counts = vec![0usize; f];
    for t in 0..states.rows() {
        let slot = w_src.row_argmax(t);
        counts[slot] += 1;
        for (s, &x) in sums.row_mut(slot).iter_mut().zip(states.row(t)) {
            *s += x;
        }
    }
    let m = bank.momentum_value();
    for i in 0..f {
        let denom = (counts[i] as f64).max(eps_count);
        let mean = sums.row(i);
        let row = bank.centroids.row_mut(i);
        for (c, &s) in row.iter_mut().zip(mean) {
            *c = m * *c + (1.0 - m) * (s / denom);
        }
        let n = l2_norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|c| *c /= n);
        }
    }
    for a in bank.age.iter_mut() {
        *a += 1;
    }
    Ok(())
}

/// `u ← ρu + (1 − ρ)·mean(w_src)`.
pub fn update_usage(bank: &mut CentroidBank, w_src: &Matrix, rho: f64) -> Result<()> {
    check_routing(bank, w_src)?;
    if w_src.rows() == 0 {
        return Err(domain_err!("usage update needs at least one routed token"));
    }
    let n = w_src.rows() as f64;
    let mut batch = vec![0.0; bank.slots()];
    for row in w_src.row_iter() {
        for (b, &w) in batch.iter_mut().zip(row) {
            *b += w;
        }
    }
    for (u, b) in bank.usage.iter_mut().zip(batch) {
        *u = rho * *u + (1.0 - rho) * (b / n);
    }
    Ok(())
}

/// Draws normalized rows from a pool without replacement, refilling the
/// shuffled order once exhausted. Zero rows are never drawn.
struct SamplePool<'a> {
    pool: &'a Matrix,
    order: Vec<usize>,
    next: usize,
}

impl<'a> SamplePool<'a> {
    fn new(pool: &'a Matrix) -> Self {
        let order = (0..pool.rows())
            .filter(|&i| l2_norm(pool.row(i)) > 0.0)
            .collect();
        Self {
            pool,
            order,
            next: 0,
        }
    }

    fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Option<Vec<f64>> {
        if self.order.is_empty() {
            return None;
        }
        if self.next == 0 {
            self.order.shuffle(rng);
        }
        let row = self.pool.row(self.order[self.next]);
        self.next = (self.next + 1) % self.order.len();
        let n = l2_norm(row);
        Some(row.iter().map(|x| x / n).collect())
    }
}

fn install(bank: &mut CentroidBank, slot: usize, direction: &[f64]) {
    bank.centroids.row_mut(slot).copy_from_slice(direction);
    bank.usage[slot] = 1.0 / bank.slots() as f64;
    bank.age[slot] = 0;
}

/// Slots with usage strictly below `delta_dead`.
pub fn dead_slots(bank: &CentroidBank, delta_dead: f64) -> Vec<usize> {
    (0..bank.slots())
        .filter(|&i| bank.usage[i] < delta_dead)
        .collect()
}

/// Replaces dead slots. Up to half the bank is refilled from normalized pool
/// states; beyond that every dead slot gets a random unit direction.
pub fn reset_dead_centroids<R: Rng + ?Sized>(
    bank: &mut CentroidBank,
    pool: &Matrix,
    delta_dead: f64,
    rng: &mut R,
) -> Result<usize> {
    let dead = dead_slots(bank, delta_dead);
    if dead.is_empty() {
        return Ok(0);
    }
    if pool.rows() > 0 && pool.cols() != bank.hidden() {
        return Err(config_err!(
            "sample pool has width {} but the bank hidden size is {}",
            pool.cols(),
            bank.hidden()
        ));
    }
    let h = bank.hidden();
    let from_pool = 2 * dead.len() <= bank.slots();
    let mut samples = SamplePool::new(pool);
    if from_pool && samples.is_empty() {
        log::warn!(
            "no usable pool states for {} dead slots; using random directions",
            dead.len()
        );
    }
    for &slot in &dead {
        let direction = if from_pool { samples.draw(rng) } else { None };
        let direction = direction.unwrap_or_else(|| random_unit_vector(h, rng));
        install(bank, slot, &direction);
    }
    Ok(dead.len())
}

/// Mature pairs `(i, j)` with cosine above `tau_merge`, most similar first.
pub fn merge_candidates(
    bank: &CentroidBank,
    tau_merge: f64,
    a_cool: u64,
) -> Vec<(usize, usize, f64)> {
    let f = bank.slots();
    let c = bank.unit_centroids();
    let mut pairs = Vec::new();
    for i in 0..f {
        for j in (i + 1)..f {
            if bank.age[i] < a_cool || bank.age[j] < a_cool {
                continue;
            }
            let cos: f64 = c.row(i).iter().zip(c.row(j)).map(|(a, b)| a * b).sum();
            if cos > tau_merge {
                pairs.push((i, j, cos));
            }
        }
    }
    // Stable sort keeps row-major order among equal similarities.
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2));
    pairs
}

/// Repurposes the lower-usage member of each over-similar mature pair.
/// Usage ties replace the higher index. A slot is touched at most once per
/// call, and a pair is skipped once either member has been replaced.
pub fn merge_similar_centroids<R: Rng + ?Sized>(
    bank: &mut CentroidBank,
    pool: &Matrix,
    tau_merge: f64,
    a_cool: u64,
    rng: &mut R,
) -> Result<usize> {
    let pairs = merge_candidates(bank, tau_merge, a_cool);
    if pairs.is_empty() {
        return Ok(0);
    }
    if pool.rows() > 0 && pool.cols() != bank.hidden() {
        return Err(config_err!(
            "sample pool has width {} but the bank hidden size is {}",
            pool.cols(),
            bank.hidden()
        ));
    }
    let h = bank.hidden();
    let mut replaced = vec![false; bank.slots()];
    let mut samples = SamplePool::new(pool);
    let mut merges = 0;
    for (i, j, _) in pairs {
        if replaced[i] || replaced[j] {
            continue;
        }
        let loser = if bank.usage[i] >= bank.usage[j] { j } else { i };
        let direction = samples
            .draw(rng)
            .unwrap_or_else(|| random_unit_vector(h, rng));
        install(bank, loser, &direction);
        replaced[loser] = true;
        merges += 1;
    }
    Ok(merges)
}

/// Reset first, then merge; returns the event counts for one block.
pub fn maintenance_step<R: Rng + ?Sized>(
    bank: &mut CentroidBank,
    pool: &Matrix,
    config: &MaintenanceConfig,
    step: u64,
    block: usize,
    rng: &mut R,
) -> Result<MaintenanceReport> {
    let dead_before = dead_slots(bank, config.delta_dead).len();
    let resets = reset_dead_centroids(bank, pool, config.delta_dead, rng)?;
    let merges = merge_similar_centroids(bank, pool, config.tau_merge, config.a_cool, rng)?;
    Ok(MaintenanceReport {
        step,
        block,
        resets,
        merges,
        dead_before,
        mean_cos_sim: bank.mean_cosine_similarity(),
    })
}
