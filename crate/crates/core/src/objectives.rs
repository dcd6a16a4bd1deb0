//! Auxiliary memory objectives and the weighted training loss.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, GmtError, Result};
use crate::numerics::{Tape, Var};

/// Weights and targets for the auxiliary losses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_track: f64,
    pub beta_ortho: f64,
    pub lambda_cluster: f64,
    pub lambda_edge: f64,
    pub lambda_contrast: f64,
    /// Target effective slot count; `None` means a quarter of the bank.
    pub n_target: Option<f64>,
    /// Minimum outgoing edge entropy per slot, in nats.
    pub h_target: f64,
    pub eps_log: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_track: 1.0,
            beta_ortho: 0.05,
            lambda_cluster: 0.3,
            lambda_edge: 0.1,
            lambda_contrast: 0.5,
            n_target: None,
            h_target: 4.0,
            eps_log: 1e-8,
        }
    }
}

impl LossWeights {
    /// All auxiliary weights zero: the objective is the task loss alone.
    pub fn task_only() -> Self {
        Self {
            lambda_track: 0.0,
            beta_ortho: 0.0,
            lambda_cluster: 0.0,
            lambda_edge: 0.0,
            lambda_contrast: 0.0,
            ..Self::default()
        }
    }

    pub fn n_target_for(&self, slots: usize) -> f64 {
        self.n_target.unwrap_or(slots as f64 / 4.0)
    }

    pub fn validate(&self, slots: usize) -> Result<()> {
        let weights = [
            ("lambda_track", self.lambda_track),
            ("beta_ortho", self.beta_ortho),
            ("lambda_cluster", self.lambda_cluster),
            ("lambda_edge", self.lambda_edge),
            ("lambda_contrast", self.lambda_contrast),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(config_err!(
                    "{name} must be a finite nonnegative weight, got {w}"
                ));
            }
        }
        let n = self.n_target_for(slots);
        if !(n > 0.0 && n <= slots as f64) {
            return Err(config_err!("n_target must lie in (0, {slots}], got {n}"));
        }
        if !(self.eps_log > 0.0) {
            return Err(config_err!("eps_log must be positive"));
        }
        Ok(())
    }
}

/// `(1 − σ(momentum))·MSE(sg(x_next), w_src·C̃)`.
pub fn tracking_loss(
    tape: &mut Tape,
    x_next: Var,
    w_src: Var,
    c_tilde: Var,
    momentum: Var,
) -> Result<Var> {
    let target = tape.stop_gradient(x_next);
    let recon = tape.matmul(w_src, c_tilde)?;
    let diff = tape.sub(target, recon)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq)?;
    let m = tape.sigmoid(momentum)?;
    let neg = tape.scale(m, -1.0)?;
    let keep = tape.add_scalar(neg, 1.0)?;
    tape.mul_scalar(mse, keep)
}

fn off_diagonal_mean(tape: &mut Tape, square: Var) -> Result<Var> {
    let f = tape.value(square).rows();
    if f < 2 {
        return Err(config_err!(
            "pairwise losses need at least 2 slots, got {f}"
        ));
    }
    let total = tape.off_diag_sum(square)?;
    tape.scale(total, 1.0 / (f * (f - 1)) as f64)
}

/// Mean squared off-diagonal cosine between raw centroid rows.
pub fn orthogonality_loss(tape: &mut Tape, centroids: Var) -> Result<Var> {
    let cn = tape.row_normalize(centroids)?;
    let gram = tape.matmul_nt(cn, cn)?;
    let sq = tape.square(gram)?;
    off_diagonal_mean(tape, sq)
}

/// `max(N_target / max(N_eff, 1) − 1, 0)` with `N_eff` the exponentiated
/// entropy of the batch-mean source distribution.
pub fn clustering_loss(tape: &mut Tape, w_src: Var, n_target: f64, eps_log: f64) -> Result<Var> {
    let u_bar = tape.col_mean(w_src)?;
    let total = tape.sum(u_bar)?;
    let total = tape.add_scalar(total, eps_log)?;
    let inv = tape.recip(total)?;
    let u = tape.mul_scalar(u_bar, inv)?;
    let log_u = tape.ln_eps(u, eps_log)?;
    let plogp = tape.mul(u, log_u)?;
    let neg_entropy = tape.sum(plogp)?;
    let entropy = tape.scale(neg_entropy, -1.0)?;
    let n_eff = tape.exp(entropy)?;
    let n_eff = tape.clamp_min(n_eff, 1.0)?;
    let ratio = tape.recip(n_eff)?;
    let ratio = tape.scale(ratio, n_target)?;
    let excess = tape.add_scalar(ratio, -1.0)?;
    tape.clamp_min(excess, 0.0)
}

/// Mean hinge on per-row entropy deficit below `h_target`.
pub fn edge_entropy_loss(
    tape: &mut Tape,
    transitions: Var,
    h_target: f64,
    eps_log: f64,
) -> Result<Var> {
    let log_p = tape.ln_eps(transitions, eps_log)?;
    let plogp = tape.mul(transitions, log_p)?;
    // Row sums are −H_i, so the deficit is h_target + row_sum.
    let neg_h = tape.row_sum(plogp)?;
    let deficit = tape.add_scalar(neg_h, h_target)?;
    let hinge = tape.clamp_min(deficit, 0.0)?;
    tape.mean(hinge)
}

/// Mean off-diagonal cosine between transition rows.
pub fn edge_contrast_loss(tape: &mut Tape, transitions: Var) -> Result<Var> {
    let pn = tape.row_normalize(transitions)?;
    let sim = tape.matmul_nt(pn, pn)?;
    off_diagonal_mean(tape, sim)
}

/// Auxiliary terms of one memory block.
#[derive(Clone, Copy, Debug)]
pub struct BlockAuxTerms {
    pub track: Var,
    pub ortho: Var,
    pub cluster: Var,
    pub edge: Var,
    pub contrast: Var,
}

/// Scalar values of each objective component, aux terms summed over blocks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub lm: f64,
    pub track: f64,
    pub ortho: f64,
    pub cluster: f64,
    pub edge: f64,
    pub contrast: f64,
}

impl LossBreakdown {
    /// Weighted composition of already-evaluated components.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        self.lm
            + w.lambda_track * self.track
            + w.beta_ortho * self.ortho
            + w.lambda_cluster * self.cluster
            + w.lambda_edge * self.edge
            + w.lambda_contrast * self.contrast
    }
}

/// Task loss plus weighted auxiliary terms, each summed over blocks.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    blocks: &[BlockAuxTerms],
    weights: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let mut breakdown = LossBreakdown {
        lm: tape.scalar(task),
        ..LossBreakdown::default()
    };
    let mut total = task;
    let ws = [
        weights.lambda_track,
        weights.beta_ortho,
        weights.lambda_cluster,
        weights.lambda_edge,
        weights.lambda_contrast,
    ];
    let mut sums = [0.0; 5];
    for block in blocks {
        let terms = [
            block.track,
            block.ortho,
            block.cluster,
            block.edge,
            block.contrast,
        ];
        for k in 0..5 {
            sums[k] += tape.scalar(terms[k]);
            if ws[k] != 0.0 {
                let scaled = tape.scale(terms[k], ws[k])?;
                total = tape.add(total, scaled)?;
            }
        }
    }
    [
        breakdown.track,
        breakdown.ortho,
        breakdown.cluster,
        breakdown.edge,
        breakdown.contrast,
    ] = sums;
    breakdown.total = tape.scalar(total);
    let values = [
        breakdown.total,
        breakdown.lm,
        breakdown.track,
        breakdown.ortho,
        breakdown.cluster,
        breakdown.edge,
        breakdown.contrast,
    ];
    if values.iter().any(|v| !v.is_finite()) {
        return Err(GmtError::Training(format!(
            "non-finite objective component: {breakdown:?}"
        )));
    }
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory_cell::transition_matrix;
    use crate::numerics::Matrix;

    #[test]
    fn tracking_vanishes_at_saturated_momentum_and_exact_reconstruction() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![0.3, -0.2]]).unwrap());
        let w = tape.constant(Matrix::row_vector(&[0.0, 1.0]));
        let c = tape.constant(Matrix::from_rows(&[vec![1.0, 1.0], vec![0.3, -0.2]]).unwrap());
        let m = tape.constant(Matrix::scalar(0.0));
        let loss = tracking_loss(&mut tape, x, w, c, m).unwrap();
        assert_eq!(tape.scalar(loss), 0.0);

        let x = tape.constant(Matrix::from_rows(&[vec![5.0, 5.0]]).unwrap());
        let m = tape.constant(Matrix::scalar(40.0));
        let loss = tracking_loss(&mut tape, x, w, c, m).unwrap();
        assert!(tape.scalar(loss) < 1e-15);
    }

    #[test]
    fn orthogonality_extremes() {
        let mut tape = Tape::new();
        let c = tape.constant(Matrix::identity(3));
        let l = orthogonality_loss(&mut tape, c).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let c = tape.constant(Matrix::filled(4, 3, 2.0));
        let l = orthogonality_loss(&mut tape, c).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn clustering_guardrail() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Matrix::filled(10, 128, 1.0 / 128.0));
        let l = clustering_loss(&mut tape, uniform, 32.0, 1e-8).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let onehot = tape.constant(Matrix::from_fn(
            10,
            128,
            |_, j| if j == 7 { 1.0 } else { 0.0 },
        ));
        let l = clustering_loss(&mut tape, onehot, 32.0, 1e-8).unwrap();
        assert!((tape.scalar(l) - 31.0).abs() < 1e-12);
    }

    #[test]
    fn edge_entropy_at_zero_edges() {
        let mut tape = Tape::new();
        let e = tape.constant(Matrix::zeros(128, 128));
        let p = transition_matrix(&mut tape, e).unwrap();
        let l = edge_entropy_loss(&mut tape, p, 4.0, 1e-8).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert!((127f64.ln() - 4.8442).abs() < 1e-4);
    }

    #[test]
    fn single_deterministic_row_deficit() {
        let mut tape = Tape::new();
        let mut e = Matrix::zeros(128, 128);
        e.set(0, 1, 200.0);
        let e = tape.constant(e);
        let p = transition_matrix(&mut tape, e).unwrap();
        let l = edge_entropy_loss(&mut tape, p, 4.0, 1e-8).unwrap();
        assert!((tape.scalar(l) - 4.0 / 128.0).abs() < 1e-6);
    }

    #[test]
    fn contrast_extremes() {
        let mut tape = Tape::new();
        let same = tape.constant(Matrix::filled(3, 3, 1.0 / 3.0));
        let l = edge_contrast_loss(&mut tape, same).unwrap();
        assert!((tape.scalar(l) - 1.0).abs() < 1e-15);
        // Cyclic shift: one-hot rows on distinct off-diagonal columns.
        let shift = tape.constant(Matrix::from_fn(3, 3, |i, j| {
            if j == (i + 1) % 3 {
                1.0
            } else {
                0.0
            }
        }));
        let l = edge_contrast_loss(&mut tape, shift).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
    }

    fn block(tape: &mut Tape, vals: [f64; 5]) -> BlockAuxTerms {
        let v = vals.map(|x| tape.constant(Matrix::scalar(x)));
        BlockAuxTerms {
            track: v[0],
            ortho: v[1],
            cluster: v[2],
            edge: v[3],
            contrast: v[4],
        }
    }

    #[test]
    fn weighted_sum_by_hand() {
        let mut tape = Tape::new();
        let task = tape.constant(Matrix::scalar(2.5));
        let b = block(&mut tape, [0.1, 0.2, 0.3, 0.4, 0.5]);
        let (t, br) = total_loss(&mut tape, task, &[b], &LossWeights::default()).unwrap();
        let hand = 2.5 + 1.0 * 0.1 + 0.05 * 0.2 + 0.3 * 0.3 + 0.1 * 0.4 + 0.5 * 0.5;
        assert!((tape.scalar(t) - hand).abs() < 1e-15);
        assert!((br.weighted_total(&LossWeights::default()) - hand).abs() < 1e-15);

        let (t, _) = total_loss(&mut tape, task, &[b, b], &LossWeights::task_only()).unwrap();
        assert_eq!(tape.scalar(t), 2.5);
    }

    #[test]
    fn defaults_validate() {
        LossWeights::default().validate(16).unwrap();
        assert_eq!(LossWeights::default().n_target_for(128), 32.0);
        let mut w = LossWeights::default();
        w.beta_ortho = -1.0;
        assert!(w.validate(16).is_err());
    }
}
