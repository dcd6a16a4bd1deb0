//! The graph-memory cell that takes the place of the feed-forward sublayer.
//!
//! Per block the cell owns a centroid bank `C` (F×H), a raw directed edge
//! matrix `E` (F×F) and a query/key navigation pair. A forward pass:
//!
//! 1. normalizes the post-attention state, `z = LN₂(h)`;
//! 2. routes each token to a source distribution over centroids by a softmax
//!    over reciprocal, temperature-scaled cosine distances;
//! 3. diffuses that distribution one hop over `P = softmax(E + M)` and adds
//!    query/key compatibility logits to obtain the target distribution;
//! 4. returns `σ(g)·LN_disp(c_tgt − c_src)`, added to the residual stream.
//!
//! With `adaptive` set, the centroids are then pulled toward the post-block
//! states of their hard-assigned tokens (see [`crate::maintenance`]).

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, Result};
use crate::maintenance::{update_usage, write_back};
use crate::numerics::{l2_norm, Matrix, Tape, Var};

/// Centroid matrix plus the state that rides along with it.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidBank {
    /// Raw centroids, one per row.
    pub centroids: Matrix,
    pub ln_gain: Matrix,
    pub ln_bias: Matrix,
    /// Smoothed source usage per slot.
    pub usage: Vec<f64>,
    /// Write-back steps since each slot was (re)initialized.
    pub age: Vec<u64>,
    /// Raw output gate; the cell scales by `sigmoid(gate)`.
    pub gate: f64,
    /// Raw write-back momentum; the EMA uses `sigmoid(momentum)`.
    pub momentum: f64,
}

pub const INITIAL_GATE: f64 = 1.0;
pub const INITIAL_MOMENTUM: f64 = 4.6;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gaussian direction projected onto the unit sphere.
pub fn random_unit_vector<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = l2_norm(&v);
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl CentroidBank {
    pub fn new<R: Rng + ?Sized>(slots: usize, hidden: usize, rng: &mut R) -> Self {
        let mut centroids = Matrix::zeros(slots, hidden);
        for i in 0..slots {
            centroids
                .row_mut(i)
                .copy_from_slice(&random_unit_vector(hidden, rng));
        }
        Self {
            centroids,
            ln_gain: Matrix::filled(1, hidden, 1.0),
            ln_bias: Matrix::zeros(1, hidden),
            usage: vec![1.0 / slots as f64; slots],
            age: vec![0; slots],
            gate: INITIAL_GATE,
            momentum: INITIAL_MOMENTUM,
        }
    }

    pub fn slots(&self) -> usize {
        self.centroids.rows()
    }

    pub fn hidden(&self) -> usize {
        self.centroids.cols()
    }

    pub fn momentum_value(&self) -> f64 {
        sigmoid(self.momentum)
    }

    pub fn gate_value(&self) -> f64 {
        sigmoid(self.gate)
    }

    /// Rescales every centroid to unit L2 norm (zero rows are left alone).
    pub fn normalize_rows(&mut self) {
        for i in 0..self.slots() {
            let row = self.centroids.row_mut(i);
            let n = l2_norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
    }

    /// Row-normalized centroid directions.
    pub fn unit_centroids(&self) -> Matrix {
        let mut c = self.centroids.clone();
        for i in 0..c.rows() {
            let row = c.row_mut(i);
            let n = l2_norm(row);
            if n > 0.0 {
                row.iter_mut().for_each(|x| *x /= n);
            }
        }
        c
    }

    /// Mean off-diagonal cosine similarity between centroids.
    pub fn mean_cosine_similarity(&self) -> f64 {
        let f = self.slots();
        if f < 2 {
            return 0.0;
        }
        let c = self.unit_centroids();
        let g = c.matmul(&c.transpose()).expect("square gram");
        let mut total = 0.0;
        for i in 0..f {
            for j in 0..f {
                if i != j {
                    total += g.get(i, j);
                }
            }
        }
        total / (f * (f - 1)) as f64
    }
}

/// Raw directed edge preferences between slots.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGraph {
    pub edges: Matrix,
}

impl EdgeGraph {
    /// Zero edges: uniform transitions to every other slot.
    pub fn zeros(slots: usize) -> Self {
        Self {
            edges: Matrix::zeros(slots, slots),
        }
    }

    /// Row-stochastic transitions with the diagonal masked out.
    pub fn transitions(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let e = tape.constant(self.edges.clone());
        let p = transition_matrix(&mut tape, e)?;
        Ok(tape.value(p).clone())
    }
}

/// Query/key projections and the displacement layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct NavigationParams {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub ln_disp_gain: Matrix,
    pub ln_disp_bias: Matrix,
}

impl NavigationParams {
    pub fn new<R: Rng + ?Sized>(hidden: usize, nav_dim: usize, std: f64, rng: &mut R) -> Self {
        Self {
            w_q: Matrix::randn(hidden, nav_dim, std, rng),
            w_k: Matrix::randn(hidden, nav_dim, std, rng),
            ln_disp_gain: Matrix::filled(1, hidden, 1.0),
            ln_disp_bias: Matrix::zeros(1, hidden),
        }
    }
}

/// Complete per-block memory state.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryCell {
    pub bank: CentroidBank,
    pub edges: EdgeGraph,
    pub nav: NavigationParams,
}

impl MemoryCell {
    pub fn new<R: Rng + ?Sized>(
        slots: usize,
        hidden: usize,
        nav_dim: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            bank: CentroidBank::new(slots, hidden, rng),
            edges: EdgeGraph::zeros(slots),
            nav: NavigationParams::new(hidden, nav_dim, std, rng),
        }
    }

    /// Records every trainable cell parameter as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> CellVars {
        CellVars {
            centroids: tape.leaf(self.bank.centroids.clone()),
            ln_c_gain: tape.leaf(self.bank.ln_gain.clone()),
            ln_c_bias: tape.leaf(self.bank.ln_bias.clone()),
            edges: tape.leaf(self.edges.edges.clone()),
            w_q: tape.leaf(self.nav.w_q.clone()),
            w_k: tape.leaf(self.nav.w_k.clone()),
            ln_disp_gain: tape.leaf(self.nav.ln_disp_gain.clone()),
            ln_disp_bias: tape.leaf(self.nav.ln_disp_bias.clone()),
            gate: tape.leaf(Matrix::scalar(self.bank.gate)),
            momentum: tape.leaf(Matrix::scalar(self.bank.momentum)),
        }
    }
}

/// Tape handles for one cell's trainable parameters.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub centroids: Var,
    pub ln_c_gain: Var,
    pub ln_c_bias: Var,
    pub edges: Var,
    pub w_q: Var,
    pub w_k: Var,
    pub ln_disp_gain: Var,
    pub ln_disp_bias: Var,
    pub gate: Var,
    pub momentum: Var,
}

/// Tape handles for every intermediate of one cell forward.
#[derive(Clone, Copy, Debug)]
pub struct RoutingVars {
    pub z: Var,
    pub c_tilde: Var,
    pub transitions: Var,
    pub w_src: Var,
    pub w_edge: Var,
    pub w_tgt: Var,
    pub c_src: Var,
    pub c_tgt: Var,
    pub displacement: Var,
    pub x_next: Var,
}

/// Plain-value snapshot of a cell forward.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingResult {
    pub w_src: Matrix,
    pub w_edge: Matrix,
    pub w_tgt: Matrix,
    pub c_src: Matrix,
    pub c_tgt: Matrix,
    pub displacement: Matrix,
}

impl RoutingResult {
    pub fn from_tape(tape: &Tape, vars: &RoutingVars) -> Self {
        Self {
            w_src: tape.value(vars.w_src).clone(),
            w_edge: tape.value(vars.w_edge).clone(),
            w_tgt: tape.value(vars.w_tgt).clone(),
            c_src: tape.value(vars.c_src).clone(),
            c_tgt: tape.value(vars.c_tgt).clone(),
            displacement: tape.value(vars.displacement).clone(),
        }
    }
}

/// Scalars that steer one cell forward.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellSettings {
    pub tau: f64,
    pub eps_grav: f64,
    pub ln_eps: f64,
    /// Multiplier on the displacement before the residual add (1 = standard).
    pub displacement_scale: f64,
}

/// Online update applied after the forward, outside the tape.
pub struct Adaptive<'a> {
    pub bank: &'a mut CentroidBank,
    pub rho: f64,
    pub eps_count: f64,
}

/// `P = softmax_rows(E + M)` with `M` masking the diagonal to `-inf`.
pub fn transition_matrix(tape: &mut Tape, edges: Var) -> Result<Var> {
    let f = tape.value(edges).rows();
    if f < 2 {
        return Err(config_err!(
            "transition matrix needs at least 2 slots (got {f}); every row would be masked"
        ));
    }
    let masked = tape.mask_diagonal(edges)?;
    tape.softmax_rows(masked)
}

/// `C̃ = LN_C(C)`.
pub fn normalized_centroids(tape: &mut Tape, vars: &CellVars, ln_eps: f64) -> Result<Var> {
    tape.layer_norm(vars.centroids, vars.ln_c_gain, vars.ln_c_bias, ln_eps)
}

/// Source distribution: softmax over `1 / (τ · max(1 − ẑ·ĉᵢ, ε_grav))`.
///
/// Only the direction of each token row enters, so a zero row is rejected.
pub fn source_routing(
    tape: &mut Tape,
    z: Var,
    c_tilde: Var,
    tau: f64,
    eps_grav: f64,
) -> Result<Var> {
    let z_hat = tape.row_normalize(z)?;
    let c_hat = tape.row_normalize(c_tilde)?;
    let sim = tape.matmul_nt(z_hat, c_hat)?;
    let logits = tape.gravity_logits(sim, tau, eps_grav)?;
    tape.softmax_rows(logits)
}

/// One-hop diffusion `w_edge = w_src·P` and target distribution
/// `softmax(w_edge + (zW_Q)(C̃W_K)ᵀ/√D)`.
pub fn target_selection(
    tape: &mut Tape,
    z: Var,
    w_src: Var,
    transitions: Var,
    w_q: Var,
    w_k: Var,
    c_tilde: Var,
) -> Result<(Var, Var)> {
    let w_edge = tape.matmul(w_src, transitions)?;
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(c_tilde, w_k)?;
    let nav_dim = tape.value(w_q).cols() as f64;
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / nav_dim.sqrt())?;
    let logits = tape.add(w_edge, scores)?;
    let w_tgt = tape.softmax_rows(logits)?;
    Ok((w_edge, w_tgt))
}

/// `c_src = w_src·C̃`, `c_tgt = w_tgt·C̃`, `d = σ(g)·LN_disp(c_tgt − c_src)`.
pub fn displacement_readout(
    tape: &mut Tape,
    w_src: Var,
    w_tgt: Var,
    c_tilde: Var,
    vars: &CellVars,
    ln_eps: f64,
) -> Result<(Var, Var, Var)> {
    let c_src = tape.matmul(w_src, c_tilde)?;
    let c_tgt = tape.matmul(w_tgt, c_tilde)?;
    let delta = tape.sub(c_tgt, c_src)?;
    let normed = tape.layer_norm(delta, vars.ln_disp_gain, vars.ln_disp_bias, ln_eps)?;
    let gate = tape.sigmoid(vars.gate)?;
    let d = tape.mul_scalar(normed, gate)?;
    Ok((c_src, c_tgt, d))
}

/// Full cell branch: `x_next = h + MC(LN₂(h); τ)`.
///
/// When `adaptive` is given, the bank receives hard-assignment write-back
/// from `x_next` and a usage update; both happen on plain values after the
/// differentiable computation is recorded.
pub fn memory_cell_forward(
    tape: &mut Tape,
    h: Var,
    ln2: (Var, Var),
    vars: &CellVars,
    settings: CellSettings,
    adaptive: Option<Adaptive<'_>>,
) -> Result<RoutingVars> {
    let z = tape.layer_norm(h, ln2.0, ln2.1, settings.ln_eps)?;
    let c_tilde = normalized_centroids(tape, vars, settings.ln_eps)?;
    let transitions = transition_matrix(tape, vars.edges)?;
    let w_src = source_routing(tape, z, c_tilde, settings.tau, settings.eps_grav)?;
    let (w_edge, w_tgt) =
        target_selection(tape, z, w_src, transitions, vars.w_q, vars.w_k, c_tilde)?;
    let (c_src, c_tgt, displacement) =
        displacement_readout(tape, w_src, w_tgt, c_tilde, vars, settings.ln_eps)?;
    let branch = if settings.displacement_scale == 1.0 {
        displacement
    } else {
        tape.scale(displacement, settings.displacement_scale)?
    };
    let x_next = tape.add(h, branch)?;
    if let Some(a) = adaptive {
        let states = tape.value(x_next);
        let weights = tape.value(w_src);
        write_back(a.bank, states, weights, a.eps_count)?;
        update_usage(a.bank, weights, a.rho)?;
    }
    Ok(RoutingVars {
        z,
        c_tilde,
        transitions,
        w_src,
        w_edge,
        w_tgt,
        c_src,
        c_tgt,
        displacement,
        x_next,
    })
}
