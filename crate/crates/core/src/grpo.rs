//! Group-relative advantages, the masked KL-regularized policy-gradient
//! objective, and training-record export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{
    compute_loss_mask, serialize_state, MaskError, SpanMask, SpanOrigin, Trajectory,
};
use crate::reward::RewardBreakdown;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub batch_questions: usize,
    pub normalize_by_std: bool,
    pub std_eps: f64,
    /// Rewards are terminal only, so this stays 1.
    pub discount: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            kl_beta: 0.04,
            learning_rate: 5e-6,
            batch_questions: 128,
            normalize_by_std: true,
            std_eps: 1e-8,
            discount: 1.0,
        }
    }
}

impl GrpoConfig {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.kl_beta >= 0.0) || !(self.std_eps > 0.0) || !self.learning_rate.is_finite() {
            return Err(GrpoError::Config(
                "kl_beta must be >= 0, std_eps > 0 and learning_rate finite".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GrpoError {
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("record {record}: {what} has {got} entries, expected {expected}")]
    MaskMismatch {
        record: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// All rollouts for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub prompt_id: String,
    pub members: Vec<(Trajectory, RewardBreakdown)>,
}

impl Group {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.members.iter().map(|(_, r)| r.total).collect()
    }
}

/// `r_i − mean(r)`, optionally divided by `std(r) + ε` (population std).
pub fn compute_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if !cfg.normalize_by_std {
        return Ok(centered);
    }
    let std = (centered.iter().map(|c| c * c).sum::<f64>() / n).sqrt();
    Ok(centered.iter().map(|c| c / (std + cfg.std_eps)).collect())
}

/// One trajectory prepared for a trainer. Offsets are character offsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub schema_version: u32,
    pub prompt_id: String,
    pub text: String,
    pub spans: SpanMask,
    pub token_offsets: Vec<(usize, usize)>,
    pub loss_mask: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_ids: Option<Vec<u32>>,
    pub reward: f64,
    pub advantage: f64,
}

impl TrainingRecord {
    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }

    /// Spans cover the text and the stored mask is the one the spans imply.
    pub fn validate(&self) -> Result<(), String> {
        if !self.spans.is_well_formed() || self.spans.total_len() != self.text.chars().count() {
            return Err("spans do not cover the text".into());
        }
        if let Some(ids) = &self.token_ids {
            if ids.len() != self.token_offsets.len() {
                return Err(format!(
                    "{} token ids for {} tokens",
                    ids.len(),
                    self.token_offsets.len()
                ));
            }
        }
        let mask =
            compute_loss_mask(&self.spans, &self.token_offsets).map_err(|e| e.to_string())?;
        if mask != self.loss_mask {
            return Err("loss_mask disagrees with spans and token offsets".into());
        }
        Ok(())
    }
}

/// Tokenizes text into character-offset pairs.
pub type Tokenizer<'a> = &'a dyn Fn(&str) -> Vec<(usize, usize)>;

/// One token per span: the coarsest tokenization that keeps the mask exact.
pub fn span_tokens(spans: &SpanMask) -> Vec<(usize, usize)> {
    spans.spans.iter().map(|s| (s.start, s.end)).collect()
}

pub fn build_record(
    traj: &Trajectory,
    system_prompt: &str,
    reward: f64,
    advantage: f64,
    tokenizer: Tokenizer<'_>,
) -> Result<TrainingRecord, GrpoError> {
    let (text, spans) = serialize_state(traj, system_prompt);
    let token_offsets = tokenizer(&text);
    let loss_mask = compute_loss_mask(&spans, &token_offsets)?;
    Ok(TrainingRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        prompt_id: traj.prompt_id.clone(),
        text,
        spans,
        token_offsets,
        loss_mask,
        token_ids: None,
        reward,
        advantage,
    })
}

/// Computes advantages per group and builds one record per member.
pub fn records_from_groups(
    groups: &[Group],
    system_prompt: &str,
    cfg: &GrpoConfig,
    tokenizer: Tokenizer<'_>,
) -> Result<Vec<TrainingRecord>, GrpoError> {
    let mut out = Vec::new();
    for g in groups {
        let adv = compute_advantages(&g.rewards(), cfg)?;
        for ((traj, r), a) in g.members.iter().zip(adv) {
            out.push(build_record(traj, system_prompt, r.total, a, tokenizer)?);
        }
    }
    Ok(out)
}

/// A token's log-probability and its sparse gradient `(param index, ∂/∂θ)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TokenLogprob {
    pub value: f64,
    pub grad: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub policy_term: f64,
    pub kl_term: f64,
    pub grad: Vec<f64>,
    /// `∂loss/∂logπ(token)` per record and token; exactly 0 for unmasked tokens.
    pub token_weights: Vec<Vec<f64>>,
    pub masked_tokens: usize,
}

/// `−Σ_i a_i Σ_{t∈M_i} logπ_θ / N + β · mean_{t∈M}(exp(Δ) − Δ − 1)` with
/// `Δ = logπ_ref − logπ_θ` and `N` the number of masked tokens in the batch.
pub fn grpo_objective(
    records: &[TrainingRecord],
    n_params: usize,
    logprob_fn: &dyn Fn(usize, &TrainingRecord) -> Vec<TokenLogprob>,
    ref_logprob_fn: &dyn Fn(usize, &TrainingRecord) -> Vec<f64>,
    cfg: &GrpoConfig,
) -> Result<Objective, GrpoError> {
    for (i, r) in records.iter().enumerate() {
        if r.loss_mask.len() != r.token_offsets.len() {
            return Err(GrpoError::MaskMismatch {
                record: i,
                what: "loss_mask",
                got: r.loss_mask.len(),
                expected: r.token_offsets.len(),
            });
        }
    }
    let masked_tokens: usize = records.iter().map(TrainingRecord::masked_count).sum();
    let mut grad = vec![0.0; n_params];
    let mut token_weights = Vec::with_capacity(records.len());
    if masked_tokens == 0 {
        token_weights.extend(records.iter().map(|r| vec![0.0; r.loss_mask.len()]));
        return Ok(Objective {
            loss: 0.0,
            policy_term: 0.0,
            kl_term: 0.0,
            grad,
            token_weights,
            masked_tokens,
        });
    }
    let n = masked_tokens as f64;
    let (mut policy_sum, mut kl_sum) = (0.0, 0.0);
    for (i, r) in records.iter().enumerate() {
        let lps = logprob_fn(i, r);
        let refs = ref_logprob_fn(i, r);
        let expected = r.loss_mask.len();
        if lps.len() != expected {
            return Err(GrpoError::MaskMismatch {
                record: i,
                what: "logprobs",
                got: lps.len(),
                expected,
            });
        }
        if refs.len() != expected {
            return Err(GrpoError::MaskMismatch {
                record: i,
                what: "reference logprobs",
                got: refs.len(),
                expected,
            });
        }
        let mut weights = vec![0.0; expected];
        for (t, masked) in r.loss_mask.iter().enumerate() {
            if !masked {
                continue;
            }
            let lp = &lps[t];
            let delta = refs[t] - lp.value;
            policy_sum += r.advantage * lp.value;
            kl_sum += delta.exp() - delta - 1.0;
            let w = (-r.advantage + cfg.kl_beta * (1.0 - delta.exp())) / n;
            weights[t] = w;
            for &(p, g) in &lp.grad {
                grad[p] += w * g;
            }
        }
        token_weights.push(weights);
    }
    let policy_term = -policy_sum / n;
    let kl_term = cfg.kl_beta * kl_sum / n;
    Ok(Objective {
        loss: policy_term + kl_term,
        policy_term,
        kl_term,
        grad,
        token_weights,
        masked_tokens,
    })
}

#[derive(Debug, Error)]
pub enum RecordIoError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error("line {line}: {message}")]
    Invalid { line: usize, message: String },
}

pub fn write_records(records: &[TrainingRecord], path: &Path) -> Result<usize, RecordIoError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(records.len())
}

pub fn read_records(path: &Path) -> Result<Vec<TrainingRecord>, RecordIoError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TrainingRecord =
            serde_json::from_str(&line).map_err(|source| RecordIoError::Parse {
                line: i + 1,
                source,
            })?;
        record
            .validate()
            .map_err(|message| RecordIoError::Invalid {
                line: i + 1,
                message,
            })?;
        out.push(record);
    }
    Ok(out)
}

/// Writes one masked record per group member. Returns the count written.
pub fn export_records(
    groups: &[Group],
    system_prompt: &str,
    cfg: &GrpoConfig,
    tokenizer: Tokenizer<'_>,
    path: &Path,
) -> Result<usize, RecordIoError> {
    let records = records_from_groups(groups, system_prompt, cfg, tokenizer)?;
    write_records(&records, path)
}

/// Characters of each origin in a record, for consistency checks.
pub fn origin_chars(spans: &SpanMask, origin: SpanOrigin) -> usize {
    spans
        .spans
        .iter()
        .filter(|s| s.origin == origin)
        .map(|s| s.end - s.start)
        .sum()
}
