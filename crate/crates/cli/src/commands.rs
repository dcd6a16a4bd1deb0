use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use gmt_core::config::RunConfig;
use gmt_core::corpus::{
    read_documents, split_documents, synthetic_documents, tokenize_documents, ByteTokenizer,
    SplitSpec, TokenWindowStream, Tokenizer, VocabTokenizer,
};
use gmt_core::diagnostics::{
    bank_stats, displacement_sweep, edge_structure_export, trace_stats, trace_text, RoutingRecord,
};
use gmt_core::evaluation::{evaluate_choices, load_items, Template};
use gmt_core::model::{objective_grad_check, parameter_count, AdaptiveSettings, Model};
use gmt_core::training::{self, load_checkpoint, Checkpoint, EvalRecord, Trainer};

use crate::{TemplateKind, TokenizerKind};

pub struct PrepareArgs {
    pub input: Option<PathBuf>,
    pub synthetic: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub tokenizer: TokenizerKind,
    pub vocab: Option<PathBuf>,
    pub split: f64,
    pub blank_line_docs: bool,
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn train_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, ".train")
}

pub fn val_path(prefix: &Path) -> PathBuf {
    suffixed(prefix, ".val")
}

fn tokenizer(vocab: Option<&Path>) -> Result<Box<dyn Tokenizer>> {
    Ok(match vocab {
        Some(path) => Box::new(VocabTokenizer::from_file(path)?),
        None => Box::new(ByteTokenizer),
    })
}

fn model_tokenizer(model: &Model, vocab: Option<&Path>) -> Result<Box<dyn Tokenizer>> {
    let tok = tokenizer(vocab)?;
    if tok.vocab_size() != model.config.vocab_size {
        bail!(
            "tokenizer {} has {} ids but the model expects {}",
            tok.name(),
            tok.vocab_size(),
            model.config.vocab_size
        );
    }
    Ok(tok)
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path, None).with_context(|| format!("loading {}", path.display()))
}

fn adaptive_settings(ckpt: &Checkpoint) -> AdaptiveSettings {
    AdaptiveSettings {
        rho: ckpt.meta.run.maintenance.rho,
        eps_count: ckpt.meta.run.maintenance.eps_count,
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn prepare(args: PrepareArgs) -> Result<()> {
    let docs = match (&args.input, args.synthetic) {
        (Some(dir), _) => read_documents(dir, args.blank_line_docs)?,
        (None, Some(bytes)) => synthetic_documents(args.seed, bytes),
        (None, None) => bail!("either --input or --synthetic is required"),
    };
    let tok: Box<dyn Tokenizer> = match args.tokenizer {
        TokenizerKind::Byte => Box::new(ByteTokenizer),
        TokenizerKind::Plugin => {
            let path = args
                .vocab
                .as_deref()
                .context("--tokenizer plugin needs --vocab FILE")?;
            Box::new(VocabTokenizer::from_file(path)?)
        }
    };
    let (train, val) = split_documents(
        &docs,
        SplitSpec {
            train_fraction: args.split,
        },
    )?;
    let train_stream = tokenize_documents(&train, tok.as_ref())?;
    let val_stream = tokenize_documents(&val, tok.as_ref())?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    train_stream.save(&train_path(&args.out))?;
    val_stream.save(&val_path(&args.out))?;
    print_json(&json!({
        "documents": docs.len(),
        "train_documents": train.len(),
        "val_documents": val.len(),
        "train_tokens": train_stream.len(),
        "val_tokens": val_stream.len(),
        "tokenizer": tok.name(),
        "vocab_size": tok.vocab_size(),
        "unigram_entropy": train_stream.unigram_entropy(),
    }))
}

fn check_stream(stream: &TokenWindowStream, config: &RunConfig, path: &Path) -> Result<()> {
    let vocab = stream.manifest().vocab_size;
    if vocab != config.model.vocab_size {
        bail!(
            "{} was tokenized with {vocab} ids, model vocab_size is {}",
            path.display(),
            config.model.vocab_size
        );
    }
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config).with_context(|| format!("reading {}", config.display()))?;
    let (tp, vp) = (train_path(data), val_path(data));
    let train =
        TokenWindowStream::load(&tp).with_context(|| format!("reading {}", tp.display()))?;
    let val = TokenWindowStream::load(&vp).with_context(|| format!("reading {}", vp.display()))?;
    check_stream(&train, &run, &tp)?;
    check_stream(&val, &run, &vp)?;
    let windows = train.window_count(run.model.max_seq_len);
    fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path, Some(&run.model.config_hash()))
                .with_context(|| format!("resuming from {}", path.display()))?;
            info!("resuming at step {}", ckpt.meta.step);
            Trainer::from_checkpoint(ckpt, windows)?
        }
        None => {
            fs::write(out.join("config.json"), run.to_json())?;
            Trainer::new(run, windows)?
        }
    };
    info!(
        "{} parameters, {} training windows, {} steps",
        trainer.model.num_parameters(),
        windows,
        trainer.total_steps
    );
    let log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(out.join("log.jsonl"))?;
    let mut log = BufWriter::new(log_file);
    let evals = trainer.run(&train, &val, Some(out), &mut log)?;
    print_json(&json!({
        "step": trainer.step,
        "best_val": trainer.best_val,
        "last_eval": evals.last(),
    }))
}

pub fn validate(
    ckpt_path: &Path,
    stream: &Path,
    frozen: bool,
    cap: Option<usize>,
    batch: Option<usize>,
) -> Result<()> {
    let mut ckpt = load(ckpt_path)?;
    let val = TokenWindowStream::load(stream)?;
    check_stream(&val, &ckpt.meta.run, stream)?;
    let tau = ckpt.tau();
    let adaptive = (!frozen).then(|| adaptive_settings(&ckpt));
    let train_cfg = &ckpt.meta.run.train;
    let report = training::validate(
        &mut ckpt.model,
        &val,
        cap.unwrap_or(train_cfg.eval_batches_cap),
        batch.unwrap_or(train_cfg.batch_size),
        tau,
        adaptive,
    )?;
    let record = EvalRecord::new(
        ckpt.meta.step,
        &report,
        &ckpt.model,
        ckpt.meta.run.maintenance.delta_dead,
    )?;
    print_json(&record)
}

pub fn score(
    ckpt_path: &Path,
    items: &Path,
    template: TemplateKind,
    vocab: Option<&Path>,
    adaptive: bool,
    out: Option<&Path>,
) -> Result<()> {
    let mut ckpt = load(ckpt_path)?;
    let tok = model_tokenizer(&ckpt.model, vocab)?;
    let items = load_items(items)?;
    let template = match template {
        TemplateKind::Qa => Template::Qa,
    };
    let tau = ckpt.tau();
    let settings = adaptive.then(|| adaptive_settings(&ckpt));
    let report = evaluate_choices(
        &mut ckpt.model,
        &items,
        tok.as_ref(),
        template,
        tau,
        settings,
    )?;
    if let Some(path) = out {
        fs::write(path, serde_json::to_string_pretty(&report)?)?;
    }
    print_json(&json!({
        "acc_raw": report.acc_raw,
        "acc_norm": report.acc_norm,
        "n": report.n,
        "skipped": report.skipped,
    }))
}

pub fn trace(ckpt_path: &Path, text: &Path, out: &Path, vocab: Option<&Path>) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let tok = model_tokenizer(&ckpt.model, vocab)?;
    let text = fs::read_to_string(text)?;
    let records = trace_text(&ckpt.model, &text, tok.as_ref(), ckpt.tau())?;
    let mut w = BufWriter::new(fs::File::create(out)?);
    for r in &records {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    info!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn read_trace(path: &Path) -> Result<Vec<RoutingRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1))
        })
        .collect()
}

pub fn stats(ckpt_path: &Path, trace: Option<&Path>, out: &Path) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let delta = ckpt.meta.run.maintenance.delta_dead;
    let bank: Vec<_> = ckpt
        .model
        .blocks
        .iter()
        .filter_map(|b| b.memory())
        .enumerate()
        .map(|(i, c)| bank_stats(i, &c.bank, delta))
        .collect();
    if bank.is_empty() {
        warn!("model has no memory blocks");
    }
    let trace_stats = match trace {
        Some(path) => Some(trace_stats(&read_trace(path)?, ckpt.model.config.n_slots)),
        None => None,
    };
    let value = json!({ "step": ckpt.meta.step, "bank": bank, "trace": trace_stats });
    fs::write(out, serde_json::to_string_pretty(&value)?)?;
    print_json(&value)
}

pub fn edges(ckpt_path: &Path, top: usize, block: usize, out: &Path) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let cells: Vec<_> = ckpt
        .model
        .blocks
        .iter()
        .filter_map(|b| b.memory())
        .collect();
    let cell = cells
        .get(block)
        .with_context(|| format!("no memory block {block} (model has {})", cells.len()))?;
    let table = edge_structure_export(cell, top)?;
    fs::write(out, table.to_csv())?;
    info!("wrote {} rows to {}", table.rows.len(), out.display());
    Ok(())
}

pub fn sweep(ckpt_path: &Path, text: &Path, alphas: &[f64], vocab: Option<&Path>) -> Result<()> {
    let ckpt = load(ckpt_path)?;
    let tok = model_tokenizer(&ckpt.model, vocab)?;
    let ids = tok.encode(&fs::read_to_string(text)?);
    for (alpha, loss) in displacement_sweep(&ckpt.model, &ids, alphas, ckpt.tau())? {
        println!("{}", json!({ "alpha": alpha, "loss": loss }));
    }
    Ok(())
}

pub fn gradcheck(config: &Path, tolerance: f64, step: f64, seed: u64) -> Result<()> {
    let run = RunConfig::load(config)?;
    let model = Model::new(run.model.clone(), seed)?.jittered(0.3, seed.wrapping_add(1));
    if model.num_parameters() > 50_000 {
        warn!(
            "{} parameters: the check costs two forwards per parameter entry",
            model.num_parameters()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = run.model.max_seq_len;
    let v = run.model.vocab_size;
    let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let tau = 0.5 * (run.model.tau_max + run.model.tau_min);
    let report = objective_grad_check(&model, &tokens, &targets, &run.loss, tau, step)?;
    for (p, err) in model.params().iter().zip(&report.per_param) {
        println!("{:<32} {:.3e}", p.name, err);
    }
    println!(
        "max relative error {:.3e} over {} entries (tolerance {:.1e})",
        report.max_rel_error, report.entries_checked, tolerance
    );
    if !(report.max_rel_error <= tolerance) {
        bail!("gradient check failed");
    }
    Ok(())
}

fn with_commas(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

pub fn paramcount(config: &Path, as_json: bool) -> Result<()> {
    let run = RunConfig::load(config)?;
    let count = parameter_count(&run.model);
    if as_json {
        return print_json(&count);
    }
    println!("embeddings      {:>14}", with_commas(count.embeddings));
    for (name, n) in &count.block_components {
        println!("  {:<14}{:>14}", name, with_commas(*n));
    }
    println!("per block       {:>14}", with_commas(count.per_block));
    println!(
        "blocks (x{:<3})   {:>14}",
        run.model.n_layers,
        with_commas(count.blocks)
    );
    println!("final norm      {:>14}", with_commas(count.final_norm));
    println!("total           {:>14}", with_commas(count.total));
    Ok(())
}
