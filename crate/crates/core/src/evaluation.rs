//! Multiple-choice scoring by teacher-forced log-likelihood.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Tokenizer;
use crate::error::{config_err, domain_err, Result};
use crate::model::{AdaptiveSettings, ForwardOptions, Model};
use crate::numerics::{argmax, Matrix, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChoiceItem {
    pub question: String,
    pub choices: Vec<String>,
    pub gold: usize,
}

impl ChoiceItem {
    pub fn validate(&self) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(config_err!(
                "an item needs at least 2 choices, got {}",
                self.choices.len()
            ));
        }
        if self.gold >= self.choices.len() {
            return Err(config_err!(
                "gold index {} out of range for {} choices",
                self.gold,
                self.choices.len()
            ));
        }
        Ok(())
    }
}

/// Reads one [`ChoiceItem`] per nonblank line.
pub fn load_items(path: &Path) -> Result<Vec<ChoiceItem>> {
    let text = std::fs::read_to_string(path)?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: ChoiceItem = serde_json::from_str(line)
            .map_err(|e| config_err!("{}:{}: {e}", path.display(), i + 1))?;
        item.validate()?;
        items.push(item);
    }
    Ok(items)
}

/// How a question becomes the scoring context.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `"Question: {q}\nAnswer:"`.
    #[default]
    Qa,
}

impl Template {
    pub fn context(self, question: &str) -> String {
        match self {
            Template::Qa => format!("Question: {question}\nAnswer:"),
        }
    }

    /// Choices are scored with one leading space.
    pub fn continuation(self, choice: &str) -> String {
        format!(" {choice}")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceScore {
    /// Sum of choice-token log-probabilities.
    pub raw: f64,
    /// `raw` divided by the number of choice tokens.
    pub norm: f64,
    pub tokens: usize,
}

fn log_prob(logits: &Matrix, row: usize, target: usize) -> f64 {
    let r = logits.row(row);
    let max = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + r.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    r[target] - lse
}

/// Scores `choice` after `context` in one forward over
/// `context ++ choice[..m-1]`. With `adaptive` set the forward also runs
/// write-back, so later items see the updated memory.
pub fn score_choice(
    model: &mut Model,
    context: &[usize],
    choice: &[usize],
    tau: f64,
    adaptive: Option<AdaptiveSettings>,
) -> Result<ChoiceScore> {
    if context.is_empty() || choice.is_empty() {
        return Err(domain_err!("context and choice must both be nonempty"));
    }
    let total = context.len() + choice.len();
    if total > model.config.max_seq_len {
        return Err(domain_err!(
            "context plus choice is {total} tokens, window is {}",
            model.config.max_seq_len
        ));
    }
    let mut input = context.to_vec();
    input.extend_from_slice(&choice[..choice.len() - 1]);
    let adaptive = adaptive.filter(|_| model.config.is_memory());
    let opts = ForwardOptions {
        adaptive,
        ..ForwardOptions::frozen(tau)
    };
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape);
    let out = if adaptive.is_some() {
        model.forward_adaptive(&mut tape, &vars, &input, 1, &opts, None)?
    } else {
        model.forward(&mut tape, &vars, &input, 1, &opts, None)?
    };
    let logits = tape.value(out.logits);
    let raw: f64 = choice
        .iter()
        .enumerate()
        .map(|(j, &a)| log_prob(logits, context.len() - 1 + j, a))
        .sum();
    Ok(ChoiceScore {
        raw,
        norm: raw / choice.len() as f64,
        tokens: choice.len(),
    })
}

/// Per-item outcome. Skipped items carry the reason and no scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub index: usize,
    pub gold: usize,
    pub raw: Vec<f64>,
    pub norm: Vec<f64>,
    pub pred_raw: Option<usize>,
    pub pred_norm: Option<usize>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChoiceReport {
    pub acc_raw: f64,
    pub acc_norm: f64,
    /// Items scored.
    pub n: usize,
    pub skipped: usize,
    pub items: Vec<ItemRecord>,
}

/// Picks the best choice under each rule, lowest index on ties.
pub fn select(scores: &[ChoiceScore]) -> (usize, usize) {
    let raw: Vec<f64> = scores.iter().map(|s| s.raw).collect();
    let norm: Vec<f64> = scores.iter().map(|s| s.norm).collect();
    (argmax(&raw), argmax(&norm))
}

/// Scores every item. Items whose rendering does not fit the context window
/// are skipped and reported; accuracies are over scored items.
pub fn evaluate_choices(
    model: &mut Model,
    items: &[ChoiceItem],
    tokenizer: &dyn Tokenizer,
    template: Template,
    tau: f64,
    adaptive: Option<AdaptiveSettings>,
) -> Result<ChoiceReport> {
    if items.is_empty() {
        return Err(config_err!("no items to evaluate"));
    }
    let mut records = Vec::with_capacity(items.len());
    let (mut hits_raw, mut hits_norm, mut n) = (0usize, 0usize, 0usize);
    for (index, item) in items.iter().enumerate() {
        item.validate()?;
        let context = tokenizer.encode(&template.context(&item.question));
        let mut scores = Vec::with_capacity(item.choices.len());
        let mut skipped = None;
        for choice in &item.choices {
            let ids = tokenizer.encode(&template.continuation(choice));
            match score_choice(model, &context, &ids, tau, adaptive) {
                Ok(s) => scores.push(s),
                Err(crate::GmtError::Domain(msg)) => {
                    skipped = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if skipped.is_some() {
            log::warn!("item {index} skipped: {}", skipped.as_deref().unwrap_or(""));
            records.push(ItemRecord {
                index,
                gold: item.gold,
                raw: Vec::new(),
                norm: Vec::new(),
                pred_raw: None,
                pred_norm: None,
                skipped,
            });
            continue;
        }
        let (pred_raw, pred_norm) = select(&scores);
        n += 1;
        hits_raw += usize::from(pred_raw == item.gold);
        hits_norm += usize::from(pred_norm == item.gold);
        records.push(ItemRecord {
            index,
            gold: item.gold,
            raw: scores.iter().map(|s| s.raw).collect(),
            norm: scores.iter().map(|s| s.norm).collect(),
            pred_raw: Some(pred_raw),
            pred_norm: Some(pred_norm),
            skipped: None,
        });
    }
    let frac = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Ok(ChoiceReport {
        acc_raw: frac(hits_raw),
        acc_norm: frac(hits_norm),
        n,
        skipped: items.len() - n,
        items: records,
    })
}
