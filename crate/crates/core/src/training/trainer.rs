use std::io::Write;
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::TokenWindowStream;
use crate::diagnostics::{bank_stats, edge_stats};
use crate::error::{config_err, GmtError, Result};
use crate::maintenance::{maintenance_step, MaintenanceReport};
use crate::model::{training_objective, AdaptiveSettings, ForwardOptions, Model};
use crate::numerics::{Matrix, Tape};
use crate::training::checkpoint::{save_checkpoint, Checkpoint, CheckpointMeta, FORMAT_VERSION};
use crate::training::optimizer::{clip_global_norm, AdamW};
use crate::training::schedule::{lr_schedule, perplexity, temperature_schedule};

/// Position in the shuffled stream of training windows. Each epoch visits
/// every window once, in an order fixed by `(seed, epoch)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DataCursor {
    pub seed: u64,
    pub windows: usize,
    pub epoch: u64,
    pub position: usize,
    /// Cached permutation of the current epoch; rebuilt on demand.
    #[serde(skip)]
    order: Vec<usize>,
}

impl PartialEq for DataCursor {
    fn eq(&self, other: &Self) -> bool {
        (self.seed, self.windows, self.epoch, self.position)
            == (other.seed, other.windows, other.epoch, other.position)
    }
}

impl DataCursor {
    pub fn new(seed: u64, windows: usize) -> Result<Self> {
        if windows == 0 {
            return Err(config_err!("training stream has no complete window"));
        }
        Ok(Self {
            seed,
            windows,
            epoch: 0,
            position: 0,
            order: Vec::new(),
        })
    }

    /// The window permutation used in `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.windows).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn next_window(&mut self) -> usize {
        if self.position == self.windows {
            self.epoch += 1;
            self.position = 0;
            self.order.clear();
        }
        if self.order.len() != self.windows {
            self.order = self.epoch_order(self.epoch);
        }
        let w = self.order[self.position];
        self.position += 1;
        w
    }
}

/// One optimizer update, as written to the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Updates completed, including this one.
    pub step: u64,
    pub lr: f64,
    pub tau: f64,
    pub lm_loss: f64,
    pub track: f64,
    pub ortho: f64,
    pub cluster: f64,
    pub edge: f64,
    pub contrast: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub maintenance: Vec<MaintenanceReport>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub val_loss: f64,
    pub ppl: f64,
    pub batches: usize,
    pub tokens: usize,
}

/// Validation loss plus memory diagnostics. Memory fields are absent for
/// dense models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub val_loss: f64,
    pub ppl: f64,
    pub n_eff_mean: Option<f64>,
    pub n_eff_min: Option<f64>,
    pub dead_total: Option<usize>,
    pub mean_cos_sim: Option<f64>,
    pub edge_entropy_mean: Option<f64>,
    pub max_edge_mass: Option<f64>,
    pub edge_row_sim: Option<f64>,
}

impl EvalRecord {
    pub fn new(
        step: u64,
        report: &ValidationReport,
        model: &Model,
        delta_dead: f64,
    ) -> Result<Self> {
        let mut record = EvalRecord {
            step,
            val_loss: report.val_loss,
            ppl: report.ppl,
            n_eff_mean: None,
            n_eff_min: None,
            dead_total: None,
            mean_cos_sim: None,
            edge_entropy_mean: None,
            max_edge_mass: None,
            edge_row_sim: None,
        };
        let cells: Vec<_> = model.blocks.iter().filter_map(|b| b.memory()).collect();
        if cells.is_empty() {
            return Ok(record);
        }
        let n = cells.len() as f64;
        let (mut n_eff_sum, mut n_eff_min, mut dead, mut cos) = (0.0, f64::INFINITY, 0, 0.0);
        let (mut ent, mut mass, mut sim) = (0.0, 0.0, 0.0);
        for (i, cell) in cells.iter().enumerate() {
            let u = bank_stats(i, &cell.bank, delta_dead);
            n_eff_sum += u.n_eff;
            n_eff_min = n_eff_min.min(u.n_eff);
            dead += u.dead_count;
            cos += u.mean_cos_sim;
            let e = edge_stats(&cell.edges.transitions()?);
            ent += e.entropy_mean;
            mass += e.max_mass_mean;
            sim += e.row_similarity;
        }
        record.n_eff_mean = Some(n_eff_sum / n);
        record.n_eff_min = Some(n_eff_min);
        record.dead_total = Some(dead);
        record.mean_cos_sim = Some(cos / n);
        record.edge_entropy_mean = Some(ent / n);
        record.max_edge_mass = Some(mass / n);
        record.edge_row_sim = Some(sim / n);
        Ok(record)
    }
}

/// Lines of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepReport),
    Eval(EvalRecord),
}

fn stack_windows(
    stream: &TokenWindowStream,
    windows: &[usize],
    seq: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut tokens = Vec::with_capacity(windows.len() * seq);
    let mut targets = Vec::with_capacity(windows.len() * seq);
    for &w in windows {
        let (x, y) = stream.get_window(w, seq)?;
        tokens.extend(x);
        targets.extend(y);
    }
    Ok((tokens, targets))
}

/// Mean next-token loss over the first `min(cap, available)` validation
/// batches in stream order. The final batch may hold fewer than `batch`
/// windows; batches are weighted by token count. With `adaptive` set,
/// write-back and usage tracking run during the forwards.
pub fn validate(
    model: &mut Model,
    val: &TokenWindowStream,
    cap: usize,
    batch: usize,
    tau: f64,
    adaptive: Option<AdaptiveSettings>,
) -> Result<ValidationReport> {
    let seq = model.config.max_seq_len;
    let windows = val.window_count(seq);
    if windows == 0 {
        return Err(config_err!(
            "validation stream has no complete window of length {seq}"
        ));
    }
    if batch == 0 {
        return Err(config_err!("validation batch size must be at least 1"));
    }
    let adaptive = adaptive.filter(|_| model.config.is_memory());
    let opts = ForwardOptions {
        tau,
        displacement_scale: 1.0,
        adaptive,
    };
    let (mut total, mut tokens, mut batches) = (0.0, 0usize, 0usize);
    for chunk in (0..windows).collect::<Vec<_>>().chunks(batch).take(cap) {
        let (x, y) = stack_windows(val, chunk, seq)?;
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let out = if adaptive.is_some() {
            model.forward_adaptive(&mut tape, &vars, &x, chunk.len(), &opts, None)?
        } else {
            model.forward(&mut tape, &vars, &x, chunk.len(), &opts, None)?
        };
        let loss = tape.cross_entropy(out.logits, &y)?;
        total += tape.scalar(loss) * y.len() as f64;
        tokens += y.len();
        batches += 1;
    }
    let val_loss = total / tokens as f64;
    Ok(ValidationReport {
        val_loss,
        ppl: perplexity(val_loss),
        batches,
        tokens,
    })
}

/// Model, optimizer, memory, data position and RNG of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: AdamW,
    /// Updates completed.
    pub step: u64,
    pub total_steps: u64,
    pub cursor: DataCursor,
    /// Drives dropout masks and maintenance sampling.
    pub rng: ChaCha8Rng,
    pub best_val: Option<f64>,
}

impl Trainer {
    pub fn new(config: RunConfig, train_windows: usize) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let model = Model::new(config.model.clone(), seed)?;
        let optimizer = AdamW::new(&model);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Ok(Self {
            total_steps: config.train.planned_steps(train_windows),
            cursor: DataCursor::new(seed, train_windows)?,
            config,
            model,
            optimizer,
            step: 0,
            rng,
            best_val: None,
        })
    }

    /// Resumes from a checkpoint; the stream must have the same window count.
    pub fn from_checkpoint(ckpt: Checkpoint, train_windows: usize) -> Result<Self> {
        let Checkpoint {
            meta,
            model,
            optimizer,
        } = ckpt;
        if meta.cursor.windows != train_windows {
            return Err(config_err!(
                "checkpoint was trained on {} windows, stream has {train_windows}",
                meta.cursor.windows
            ));
        }
        Ok(Self {
            config: meta.run,
            model,
            optimizer,
            step: meta.step,
            total_steps: meta.total_steps,
            cursor: meta.cursor,
            rng: meta.rng,
            best_val: meta.best_val,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                config_hash: self.model.config.config_hash(),
                run: self.config.clone(),
                step: self.step,
                total_steps: self.total_steps,
                best_val: self.best_val,
                rng: self.rng.clone(),
                cursor: self.cursor.clone(),
            },
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Routing temperature at the current step.
    pub fn tau(&self) -> f64 {
        let m = &self.config.model;
        temperature_schedule(self.step, self.total_steps, m.tau_max, m.tau_min)
    }

    pub fn lr(&self) -> f64 {
        let t = &self.config.train;
        lr_schedule(self.step, t.warmup_steps, self.total_steps, t.peak_lr)
    }

    fn adaptive(&self) -> Option<AdaptiveSettings> {
        self.config.model.is_memory().then_some(AdaptiveSettings {
            rho: self.config.maintenance.rho,
            eps_count: self.config.maintenance.eps_count,
        })
    }

    /// One optimizer update over `accum_steps` micro-batches of
    /// `batch_size` windows each.
    pub fn train_step(&mut self, train: &TokenWindowStream) -> Result<StepReport> {
        let seq = self.model.config.max_seq_len;
        let (batch, accum) = (self.config.train.batch_size, self.config.train.accum_steps);
        let (lr, tau) = (self.lr(), self.tau());
        let opts = ForwardOptions {
            tau,
            displacement_scale: 1.0,
            adaptive: self.adaptive(),
        };
        let mut grads: Vec<Matrix> = self
            .model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.shape.0, p.shape.1))
            .collect();
        let mut sums = [0.0; 6];
        let mut pools: Vec<Matrix> = Vec::new();
        let inv = 1.0 / accum as f64;
        for _ in 0..accum {
            let windows: Vec<usize> = (0..batch).map(|_| self.cursor.next_window()).collect();
            let (x, y) = stack_windows(train, &windows, seq)?;
            let mut tape = Tape::new();
            let vars = self.model.bind(&mut tape);
            let out = self.model.forward_adaptive(
                &mut tape,
                &vars,
                &x,
                batch,
                &opts,
                Some(&mut self.rng),
            )?;
            let (loss, parts) = training_objective(
                &mut tape,
                &vars,
                &out,
                &y,
                &self.config.loss,
                self.config.model.n_slots,
            )
            .map_err(|e| self.abort(e))?;
            let parts = [
                parts.lm,
                parts.track,
                parts.ortho,
                parts.cluster,
                parts.edge,
                parts.contrast,
            ];
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p * inv;
            }
            let mut g = tape.backward(loss)?;
            for (acc, leaf) in grads.iter_mut().zip(&vars.all) {
                if let Some(mut gi) = g.take(*leaf) {
                    gi.scale_assign(inv);
                    acc.add_assign(&gi);
                }
            }
            pools = out
                .blocks
                .iter()
                .filter(|b| b.routing.is_some())
                .map(|b| tape.value(b.x_in).clone())
                .collect();
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.train.clip_norm);
        if !grad_norm.is_finite() {
            return Err(self.abort(GmtError::Training(format!(
                "non-finite gradient norm {grad_norm}"
            ))));
        }
        self.optimizer
            .step(&mut self.model, &grads, lr, &self.config.train.adamw())?;
        for block in self.model.blocks.iter_mut() {
            if let Some(cell) = block.memory_mut() {
                cell.bank.normalize_rows();
            }
        }
        self.step += 1;
        let mut maintenance = Vec::new();
        let maint = self.config.maintenance.clone();
        if self.model.config.is_memory() && self.step % maint.k_maint == 0 {
            let cells = self.model.blocks.iter_mut().filter_map(|b| b.memory_mut());
            for (block, (cell, pool)) in cells.zip(&pools).enumerate() {
                let report = maintenance_step(
                    &mut cell.bank,
                    pool,
                    &maint,
                    self.step,
                    block,
                    &mut self.rng,
                )?;
                if report.resets + report.merges > 0 {
                    info!(
                        "step {} block {block}: {} resets, {} merges",
                        self.step, report.resets, report.merges
                    );
                }
                maintenance.push(report);
            }
        }
        Ok(StepReport {
            step: self.step,
            lr,
            tau,
            lm_loss: sums[0],
            track: sums[1],
            ortho: sums[2],
            cluster: sums[3],
            edge: sums[4],
            contrast: sums[5],
            grad_norm,
            maintenance,
        })
    }

    fn abort(&self, e: GmtError) -> GmtError {
        match e {
            GmtError::Training(msg) => {
                let usage: Vec<_> = self
                    .model
                    .blocks
                    .iter()
                    .filter_map(|b| b.memory())
                    .map(|c| (c.bank.gate, c.bank.momentum, c.bank.usage.clone()))
                    .collect();
                GmtError::Training(format!(
                    "step {} (lr {:.3e}, tau {:.4}): {msg}; memory (gate, momentum, usage) = {usage:?}",
                    self.step,
                    self.lr(),
                    self.tau()
                ))
            }
            other => other,
        }
    }

    /// Validation at the current step with the configured cap and mode.
    pub fn evaluate(&mut self, val: &TokenWindowStream) -> Result<EvalRecord> {
        let tau = self.tau();
        let adaptive = if self.config.train.adaptive_eval {
            self.adaptive()
        } else {
            None
        };
        let report = validate(
            &mut self.model,
            val,
            self.config.train.eval_batches_cap,
            self.config.train.batch_size,
            tau,
            adaptive,
        )?;
        EvalRecord::new(
            self.step,
            &report,
            &self.model,
            self.config.maintenance.delta_dead,
        )
    }

    /// Records `val_loss`; returns whether it strictly improved on the best.
    pub fn record_best(&mut self, val_loss: f64) -> bool {
        match self.best_val {
            Some(best) if val_loss >= best => false,
            _ => {
                self.best_val = Some(val_loss);
                true
            }
        }
    }

    /// Trains to `total_steps`, writing one JSON line per update and per
    /// evaluation to `log`. With `out_dir` set, keeps `best.ckpt`,
    /// periodic `step_NNNNNN.ckpt` files and a final `last.ckpt`.
    pub fn run(
        &mut self,
        train: &TokenWindowStream,
        val: &TokenWindowStream,
        out_dir: Option<&Path>,
        log: &mut dyn Write,
    ) -> Result<Vec<EvalRecord>> {
        let mut evals = Vec::new();
        let (eval_every, ckpt_every) = (
            self.config.train.eval_every,
            self.config.train.checkpoint_every,
        );
        while self.step < self.total_steps {
            let report = self.train_step(train)?;
            writeln!(log, "{}", serde_json::to_string(&LogRecord::Step(report))?)?;
            let done = self.step == self.total_steps;
            if self.step % eval_every == 0 || done {
                let record = self.evaluate(val)?;
                info!(
                    "step {}: val_loss {:.4} ppl {:.2}",
                    self.step, record.val_loss, record.ppl
                );
                writeln!(
                    log,
                    "{}",
                    serde_json::to_string(&LogRecord::Eval(record.clone()))?
                )?;
                if self.record_best(record.val_loss) {
                    if let Some(dir) = out_dir {
                        save_checkpoint(&self.checkpoint(), &dir.join("best.ckpt"))?;
                    }
                }
                evals.push(record);
            }
            if let Some(dir) = out_dir {
                if ckpt_every > 0 && self.step % ckpt_every == 0 {
                    save_checkpoint(
                        &self.checkpoint(),
                        &dir.join(format!("step_{:06}.ckpt", self.step)),
                    )?;
                }
                if done {
                    save_checkpoint(&self.checkpoint(), &dir.join("last.ckpt"))?;
                }
            }
            log.flush()?;
        }
        if evals.is_empty() {
            warn!("run ended without an evaluation");
        }
        Ok(evals)
    }
}
