use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{config_err, domain_err, Result};
use crate::memory_cell::{memory_cell_forward, Adaptive, CellSettings, CentroidBank, RoutingVars};
use crate::model::config::ModelConfig;
use crate::model::params::{BlockVars, BranchVars, Model, ModelVars};
use crate::numerics::{grad_check, AttentionShape, GradCheckReport, Matrix, Tape, Var};
use crate::objectives::{
    clustering_loss, edge_contrast_loss, edge_entropy_loss, orthogonality_loss, total_loss,
    tracking_loss, BlockAuxTerms, LossBreakdown, LossWeights,
};

/// Online memory update settings used when a forward runs adaptively.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveSettings {
    pub rho: f64,
    pub eps_count: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    /// Routing temperature.
    pub tau: f64,
    /// Scale on each memory displacement before the residual add.
    pub displacement_scale: f64,
    /// Write-back and usage updates after each memory block.
    pub adaptive: Option<AdaptiveSettings>,
}

impl ForwardOptions {
    pub fn frozen(tau: f64) -> Self {
        Self {
            tau,
            displacement_scale: 1.0,
            adaptive: None,
        }
    }
}

/// Tape handles produced by one block.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutputs {
    pub x_in: Var,
    pub h: Var,
    pub x_next: Var,
    pub routing: Option<RoutingVars>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `(batch·seq) × V`.
    pub logits: Var,
    pub blocks: Vec<BlockOutputs>,
    pub batch: usize,
    pub seq: usize,
}

fn keep_mask(rng: &mut ChaCha8Rng, len: usize, p: f64) -> Vec<f64> {
    let scale = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
        .collect()
}

/// `Attn(LN₁(x))` without the residual. Attention-weight dropout applies
/// when `dropout` carries an RNG and a positive rate.
pub fn attention_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    shape: AttentionShape,
    ln_eps: f64,
    dropout: Option<(&mut ChaCha8Rng, f64)>,
) -> Result<Var> {
    let a = tape.layer_norm(x, block.ln1.0, block.ln1.1, ln_eps)?;
    let qkv = tape.matmul(a, block.w_qkv)?;
    let mask = match dropout {
        Some((rng, p)) if p > 0.0 => Some(keep_mask(
            rng,
            shape.batch * shape.heads * shape.seq * shape.seq,
            p,
        )),
        _ => None,
    };
    let heads = tape.causal_attention(qkv, shape, mask)?;
    tape.matmul(heads, block.w_o)
}

/// One block: `h = x + Attn(LN₁(x))`, then either the memory cell or the
/// dense feed-forward branch on `LN₂(h)`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    block: &BlockVars,
    config: &ModelConfig,
    shape: AttentionShape,
    opts: &ForwardOptions,
    dropout_rng: Option<&mut ChaCha8Rng>,
    bank: Option<&mut CentroidBank>,
) -> Result<BlockOutputs> {
    let attn = attention_forward(
        tape,
        x,
        block,
        shape,
        config.ln_eps,
        dropout_rng.map(|r| (r, config.p_attn)),
    )?;
    let h = tape.add(x, attn)?;
    match &block.branch {
        BranchVars::Memory(cell) => {
            let settings = CellSettings {
                tau: opts.tau,
                eps_grav: config.eps_grav,
                ln_eps: config.ln_eps,
                displacement_scale: opts.displacement_scale,
            };
            let adaptive = match (opts.adaptive, bank) {
                (Some(a), Some(bank)) => Some(Adaptive {
                    bank,
                    rho: a.rho,
                    eps_count: a.eps_count,
                }),
                _ => None,
            };
            let routing = memory_cell_forward(tape, h, block.ln2, cell, settings, adaptive)?;
            Ok(BlockOutputs {
                x_in: x,
                h,
                x_next: routing.x_next,
                routing: Some(routing),
            })
        }
        BranchVars::Ffn { w1, w2 } => {
            let z = tape.layer_norm(h, block.ln2.0, block.ln2.1, config.ln_eps)?;
            let up = tape.matmul(z, *w1)?;
            let act = tape.gelu(up)?;
            let down = tape.matmul(act, *w2)?;
            let x_next = tape.add(h, down)?;
            Ok(BlockOutputs {
                x_in: x,
                h,
                x_next,
                routing: None,
            })
        }
    }
}

fn check_tokens(config: &ModelConfig, tokens: &[usize], batch: usize) -> Result<usize> {
    if batch == 0 || tokens.is_empty() || tokens.len() % batch != 0 {
        return Err(config_err!(
            "{} tokens cannot be split into {batch} equal sequences",
            tokens.len()
        ));
    }
    let seq = tokens.len() / batch;
    if seq > config.max_seq_len {
        return Err(config_err!(
            "sequence length {seq} exceeds the context length {}",
            config.max_seq_len
        ));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(domain_err!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        ));
    }
    Ok(seq)
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: &ModelConfig,
    tape: &mut Tape,
    vars: &ModelVars,
    tokens: &[usize],
    batch: usize,
    opts: &ForwardOptions,
    mut rng: Option<&mut ChaCha8Rng>,
    mut banks: Option<Vec<&mut CentroidBank>>,
) -> Result<ForwardOutput> {
    let seq = check_tokens(config, tokens, batch)?;
    let positions: Vec<usize> = (0..tokens.len()).map(|r| r % seq).collect();
    let tok = tape.embedding(vars.tok_emb, tokens)?;
    let pos = tape.embedding(vars.pos_emb, &positions)?;
    let mut x = tape.add(tok, pos)?;
    if let Some(r) = rng.as_deref_mut() {
        if config.p_embed > 0.0 {
            let mask = keep_mask(r, tokens.len() * config.hidden, config.p_embed);
            x = tape.dropout(x, Matrix::from_vec(tokens.len(), config.hidden, mask)?)?;
        }
    }
    let shape = AttentionShape {
        batch,
        seq,
        heads: config.n_heads,
    };
    let mut bank_iter = banks.as_mut().map(|b| b.iter_mut());
    let mut blocks = Vec::with_capacity(vars.blocks.len());
    for block in &vars.blocks {
        let bank = match (&block.branch, bank_iter.as_mut()) {
            (BranchVars::Memory(_), Some(it)) => it.next().map(|b| &mut **b),
            _ => None,
        };
        let out = block_forward(
            tape,
            x,
            block,
            config,
            shape,
            opts,
            rng.as_deref_mut(),
            bank,
        )?;
        x = out.x_next;
        blocks.push(out);
    }
    let normed = tape.layer_norm(x, vars.ln_f.0, vars.ln_f.1, config.ln_eps)?;
    // Tied head: the same table that embedded the input scores the output.
    let logits = tape.matmul_nt(normed, vars.tok_emb)?;
    Ok(ForwardOutput {
        logits,
        blocks,
        batch,
        seq,
    })
}

impl Model {
    /// Forward over `batch` stacked sequences without touching model state.
    /// Dropout is active only when `dropout_rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[usize],
        batch: usize,
        opts: &ForwardOptions,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        if opts.adaptive.is_some() {
            return Err(config_err!(
                "adaptive forwards mutate memory; use forward_adaptive"
            ));
        }
        run(
            &self.config,
            tape,
            vars,
            tokens,
            batch,
            opts,
            dropout_rng,
            None,
        )
    }

    /// Forward that also applies write-back and usage updates to every
    /// memory bank when `opts.adaptive` is set.
    pub fn forward_adaptive(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        tokens: &[usize],
        batch: usize,
        opts: &ForwardOptions,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        let banks: Vec<&mut CentroidBank> = self
            .blocks
            .iter_mut()
            .filter_map(|b| b.memory_mut().map(|c| &mut c.bank))
            .collect();
        run(
            &self.config,
            tape,
            vars,
            tokens,
            batch,
            opts,
            dropout_rng,
            Some(banks),
        )
    }

    /// Evaluation logits of a single sequence.
    pub fn logits(&self, tokens: &[usize], tau: f64) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward(
            &mut tape,
            &vars,
            tokens,
            1,
            &ForwardOptions::frozen(tau),
            None,
        )?;
        Ok(tape.value(out.logits).clone())
    }

    /// Mean next-token loss of stacked sequences in evaluation mode.
    pub fn lm_loss(
        &self,
        tokens: &[usize],
        targets: &[usize],
        batch: usize,
        opts: &ForwardOptions,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward(&mut tape, &vars, tokens, batch, opts, None)?;
        let loss = tape.cross_entropy(out.logits, targets)?;
        Ok(tape.scalar(loss))
    }
}

/// Task loss plus every memory block's auxiliary terms. The clustering
/// term pools all `batch·seq` routed states of the forward.
pub fn training_objective(
    tape: &mut Tape,
    vars: &ModelVars,
    out: &ForwardOutput,
    targets: &[usize],
    weights: &LossWeights,
    n_slots: usize,
) -> Result<(Var, LossBreakdown)> {
    objective_with_tracking_targets(tape, vars, out, targets, weights, n_slots, None)
}

/// Post-block states of every memory block, in block order.
pub fn tracking_targets(tape: &Tape, out: &ForwardOutput) -> Vec<Matrix> {
    out.blocks
        .iter()
        .filter(|b| b.routing.is_some())
        .map(|b| tape.value(b.x_next).clone())
        .collect()
}

/// [`training_objective`] with the stop-gradient tracking targets replaced
/// by fixed matrices (one per memory block). At the point where the targets
/// were recorded both objectives agree in value and gradient; holding them
/// fixed makes the objective a plain function that finite differences can
/// check.
pub fn objective_with_tracking_targets(
    tape: &mut Tape,
    vars: &ModelVars,
    out: &ForwardOutput,
    targets: &[usize],
    weights: &LossWeights,
    n_slots: usize,
    frozen: Option<&[Matrix]>,
) -> Result<(Var, LossBreakdown)> {
    let task = tape.cross_entropy(out.logits, targets)?;
    let n_target = weights.n_target_for(n_slots);
    let mut terms = Vec::new();
    for (block, bv) in out.blocks.iter().zip(&vars.blocks) {
        let (Some(r), BranchVars::Memory(cell)) = (&block.routing, &bv.branch) else {
            continue;
        };
        let target = match frozen {
            Some(list) => {
                let m = list.get(terms.len()).ok_or_else(|| {
                    config_err!(
                        "missing frozen tracking target for memory block {}",
                        terms.len()
                    )
                })?;
                tape.constant(m.clone())
            }
            None => r.x_next,
        };
        terms.push(BlockAuxTerms {
            track: tracking_loss(tape, target, r.w_src, r.c_tilde, cell.momentum)?,
            ortho: orthogonality_loss(tape, cell.centroids)?,
            cluster: clustering_loss(tape, r.w_src, n_target, weights.eps_log)?,
            edge: edge_entropy_loss(tape, r.transitions, weights.h_target, weights.eps_log)?,
            contrast: edge_contrast_loss(tape, r.transitions)?,
        });
    }
    total_loss(tape, task, &terms, weights)
}

/// Central-difference check of the full training objective of `model` on
/// one sequence (frozen forward: no dropout, no write-back).
pub fn objective_grad_check(
    model: &Model,
    tokens: &[usize],
    targets: &[usize],
    weights: &LossWeights,
    tau: f64,
    h: f64,
) -> Result<GradCheckReport> {
    let config = &model.config;
    let opts = ForwardOptions::frozen(tau);
    let frozen = {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = model.forward(&mut tape, &vars, tokens, 1, &opts, None)?;
        tracking_targets(&tape, &out)
    };
    grad_check(&model.param_matrices(), h, |tape, leaves| {
        let vars = ModelVars::from_leaves(config, leaves)?;
        let out = model.forward(tape, &vars, tokens, 1, &opts, None)?;
        let (loss, _) = objective_with_tracking_targets(
            tape,
            &vars,
            &out,
            targets,
            weights,
            config.n_slots,
            Some(&frozen),
        )?;
        Ok(loss)
    })
}

impl Model {
    /// Copy with independent Gaussian noise of scale `std` added to every
    /// parameter entry; moves a freshly initialized model off its highly
    /// symmetric starting point.
    pub fn jittered(&self, std: f64, seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for p in out.params_mut() {
            for v in p.data.iter_mut() {
                *v += std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::SecondBranch;

    fn toy() -> Model {
        Model::new(ModelConfig::toy(), 7).unwrap()
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let model = toy();
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let x = tape.constant(Matrix::randn(1, 16, 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let shape = AttentionShape {
            batch: 1,
            seq: 1,
            heads: 2,
        };
        let out = attention_forward(&mut tape, x, &vars.blocks[0], shape, 1e-5, None).unwrap();
        let b = &model.blocks[0];
        let a = tape.value(x).clone();
        let mut t2 = Tape::new();
        let (xv, g, bi) = (
            t2.constant(a),
            t2.constant(b.ln1.gain.clone()),
            t2.constant(b.ln1.bias.clone()),
        );
        let ln = t2.layer_norm(xv, g, bi, 1e-5).unwrap();
        let ln = t2.value(ln).clone();
        let w_v = Matrix::from_fn(16, 16, |i, j| b.w_qkv.get(i, 32 + j));
        let expect = ln.matmul(&w_v).unwrap().matmul(&b.w_o).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn future_tokens_do_not_leak() {
        let model = toy();
        let a = model.logits(&[1, 2, 3], 1.0).unwrap();
        let b = model.logits(&[1, 2, 9], 1.0).unwrap();
        for t in 0..2 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn zero_embeddings_and_closed_gates_give_uniform_logits() {
        let mut model = toy();
        model.tok_emb = Matrix::zeros(11, 16);
        model.pos_emb = Matrix::zeros(3, 16);
        for b in &mut model.blocks {
            b.memory_mut().unwrap().bank.gate = -30.0;
            // LN₂ of the zero state is its bias, which routing needs nonzero.
            b.ln2.bias = Matrix::filled(1, 16, 0.1);
        }
        let logits = model.logits(&[0, 5, 10], 1.0).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tied_head_shares_storage() {
        let mut model = toy();
        let before = model.logits(&[4], 1.0).unwrap();
        model.tok_emb.set(7, 0, model.tok_emb.get(7, 0) + 0.5);
        let after = model.logits(&[4], 1.0).unwrap();
        assert_ne!(before.get(0, 7), after.get(0, 7));
        assert_eq!(before.get(0, 6), after.get(0, 6));
    }

    #[test]
    fn zero_ffn_is_identity_branch() {
        let mut model = Model::new(
            ModelConfig {
                block_kind: crate::model::BlockKind::DenseFfn,
                ..ModelConfig::toy()
            },
            3,
        )
        .unwrap();
        if let SecondBranch::Ffn { w1, .. } = &mut model.blocks[0].branch {
            *w1 = Matrix::zeros(16, 24);
        }
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = model
            .forward(
                &mut tape,
                &vars,
                &[1, 2],
                1,
                &ForwardOptions::frozen(1.0),
                None,
            )
            .unwrap();
        let b = out.blocks[0];
        assert_eq!(tape.value(b.h), tape.value(b.x_next));
    }

    #[test]
    fn adaptive_requires_mutable_entry_point() {
        let mut model = toy();
        let mut opts = ForwardOptions::frozen(1.0);
        opts.adaptive = Some(AdaptiveSettings {
            rho: 0.99,
            eps_count: 1e-6,
        });
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        assert!(model
            .forward(&mut tape, &vars, &[1], 1, &opts, None)
            .is_err());
        let before = model.clone();
        model
            .forward_adaptive(&mut tape, &vars, &[1, 2, 3], 1, &opts, None)
            .unwrap();
        assert_ne!(model, before);
        assert!(model
            .blocks
            .iter()
            .all(|b| b.memory().unwrap().bank.age == vec![1; 4]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = toy();
        assert!(matches!(
            model.logits(&[11], 1.0),
            Err(crate::GmtError::Domain(_))
        ));
        assert!(matches!(
            model.logits(&[1, 1, 1, 1], 1.0),
            Err(crate::GmtError::Config(_))
        ));
    }

    #[test]
    fn toy_objective_gradients() {
        let model = toy().jittered(0.3, 9);
        let report = objective_grad_check(
            &model,
            &[1, 4, 7],
            &[4, 7, 2],
            &LossWeights::default(),
            0.7,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
