//! The terminal reward and answer judges.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::EpisodeStats;
use crate::generation::{GenerationClient, GenerationRequest, Message};
use crate::prompts::render_judge_prompt;
use crate::protocol::{is_structurally_valid, Trajectory};
use crate::sparql::{is_numeric_datatype, PrefixMap, RdfTerm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub base_valid: f64,
    pub ans_correct: f64,
    pub ans_wrong: f64,
    pub err_coef: f64,
    pub turn_coef: f64,
    pub invalid: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            base_valid: 1.0,
            ans_correct: 0.5,
            ans_wrong: -0.2,
            err_coef: 0.1,
            turn_coef: 0.02,
            invalid: -1.0,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all = [
            self.base_valid,
            self.ans_correct,
            self.ans_wrong,
            self.err_coef,
            self.turn_coef,
            self.invalid,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err("reward coefficients must be finite".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub correct: bool,
    pub justification: String,
    pub judge_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub structural_valid: bool,
    pub r_ans: f64,
    pub cost: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RewardError {
    #[error("a structurally valid trajectory needs a judgment")]
    MissingJudgment,
    #[error("invalid trajectories are never judged")]
    UnexpectedJudgment,
}

/// `−1` for invalid trajectories, else `1 + R_ans − (0.1·N_err + 0.02·T)`.
pub fn score(
    traj: &Trajectory,
    stats: &EpisodeStats,
    judgment: Option<&Judgment>,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown, RewardError> {
    if !is_structurally_valid(traj) {
        if judgment.is_some() {
            return Err(RewardError::UnexpectedJudgment);
        }
        return Ok(RewardBreakdown {
            structural_valid: false,
            r_ans: 0.0,
            cost: 0.0,
            total: cfg.invalid,
        });
    }
    let judgment = judgment.ok_or(RewardError::MissingJudgment)?;
    Ok(valid_reward(
        judgment.correct,
        stats.n_err,
        stats.turns,
        cfg,
    ))
}

pub fn valid_reward(
    correct: bool,
    n_err: usize,
    turns: usize,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let r_ans = if correct {
        cfg.ans_correct
    } else {
        cfg.ans_wrong
    };
    let cost = cfg.err_coef * n_err as f64 + cfg.turn_coef * turns as f64;
    RewardBreakdown {
        structural_valid: true,
        r_ans,
        cost,
        total: cfg.base_valid + r_ans - cost,
    }
}

pub const LOCAL_JUDGE_ID: &str = "local-normalizing-v1";

/// Deterministic normalization judge.
pub fn judge_local(answer: &str, gold: &RdfTerm, aliases: &[String]) -> Judgment {
    judge_local_with(answer, gold, aliases, &PrefixMap::standard())
}

pub fn judge_local_with(
    answer: &str,
    gold: &RdfTerm,
    aliases: &[String],
    prefixes: &PrefixMap,
) -> Judgment {
    let (correct, why) = local_match(answer, gold, aliases, prefixes);
    Judgment {
        correct,
        justification: why.to_string(),
        judge_id: LOCAL_JUDGE_ID.to_string(),
    }
}

fn local_match(
    answer: &str,
    gold: &RdfTerm,
    aliases: &[String],
    prefixes: &PrefixMap,
) -> (bool, &'static str) {
    let raw = strip_wrappers(answer);
    let norm = normalize(&raw);
    if aliases
        .iter()
        .any(|a| normalize(&strip_wrappers(a)) == norm)
    {
        return (true, "matches alias");
    }
    match gold {
        RdfTerm::Iri { value } => {
            let full = value.to_lowercase();
            if norm == full {
                return (true, "matches IRI");
            }
            if prefixes
                .compact(value)
                .is_some_and(|q| normalize(&q) == norm)
            {
                return (true, "matches QName");
            }
            if prefixes
                .expand(&raw)
                .is_some_and(|e| e.to_lowercase() == full)
            {
                return (true, "matches expanded QName");
            }
            if !norm.is_empty() && local_name(value).to_lowercase() == norm {
                return (true, "matches local name");
            }
            (false, "different entity")
        }
        RdfTerm::Literal {
            lexical, datatype, ..
        } => {
            let numeric_gold = datatype.as_deref().is_some_and(is_numeric_datatype)
                || parse_number(lexical).is_some();
            if numeric_gold {
                if let (Some(a), Some(g)) = (parse_number(&norm), parse_number(lexical)) {
                    return if numbers_close(a, g) {
                        (true, "numerically equal")
                    } else {
                        (false, "different number")
                    };
                }
            }
            if normalize(lexical) == norm {
                (true, "matches literal")
            } else {
                (false, "different literal")
            }
        }
        RdfTerm::Boolean { value } => match parse_bool(&norm) {
            Some(b) if b == *value => (true, "matches boolean"),
            Some(_) => (false, "opposite boolean"),
            None => (false, "not a boolean"),
        },
        RdfTerm::BlankNode { .. } => (false, "blank node gold is not comparable"),
    }
}

/// Trims and removes matching quotes or angle brackets, and a literal's
/// `@lang` / `^^type` suffix after a closing quote.
fn strip_wrappers(s: &str) -> String {
    let mut s = s.trim().to_string();
    if s.starts_with('"') {
        if let Some(end) = s[1..].find('"') {
            let rest = &s[end + 2..];
            if rest.is_empty() || rest.starts_with('@') || rest.starts_with("^^") {
                s = s[1..end + 1].to_string();
            }
        }
    }
    loop {
        let t = s.trim();
        let stripped = [('"', '"'), ('\'', '\''), ('<', '>')]
            .iter()
            .find(|(o, c)| t.len() >= 2 && t.starts_with(*o) && t.ends_with(*c))
            .map(|_| t[1..t.len() - 1].to_string());
        match stripped {
            Some(inner) => s = inner,
            None => return t.to_string(),
        }
    }
}

fn normalize(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn local_name(iri: &str) -> &str {
    iri.rsplit(['/', '#']).next().unwrap_or(iri)
}

fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if let Ok(v) = t.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    let grouped = t.split(',').collect::<Vec<_>>();
    let thousands = grouped.len() > 1
        && grouped[0].trim_start_matches(['-', '+']).len() <= 3
        && grouped[1..]
            .iter()
            .all(|g| g.len() >= 3 && g.as_bytes()[..3].iter().all(u8::is_ascii_digit));
    if thousands {
        return t
            .replace(',', "")
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite());
    }
    None
}

fn numbers_close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-6 * a.abs().max(b.abs())
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "yes" | "true" | "1" => Some(true),
        "no" | "false" | "0" => Some(false),
        _ => None,
    }
}

/// Renders a gold term for a judging prompt: the compact form, plus a label when known.
pub fn render_gold(gold: &RdfTerm, label: Option<&str>, prefixes: &PrefixMap) -> String {
    let term = match gold {
        RdfTerm::Literal { lexical, .. } => lexical.clone(),
        other => other.to_compact(prefixes),
    };
    match label {
        Some(l) => format!("{term} ({l})"),
        None => term,
    }
}

/// Reads `VERDICT: yes|no` anywhere in the reply (case-insensitive).
pub fn parse_verdict(reply: &str) -> Option<bool> {
    let lower = reply.to_lowercase();
    let at = lower.find("verdict:")?;
    let rest = lower[at + "verdict:".len()..].trim_start();
    if rest.starts_with("yes") {
        Some(true)
    } else if rest.starts_with("no") {
        Some(false)
    } else {
        None
    }
}

/// The configured answer judge.
#[derive(Debug, Clone)]
pub enum Judge {
    Local(PrefixMap),
    Remote(RemoteJudge),
}

impl Judge {
    pub fn local() -> Self {
        Judge::Local(PrefixMap::standard())
    }

    /// The first alias, if any, is shown to a remote judge as the gold label.
    pub fn judge(
        &self,
        question: &str,
        answer: &str,
        gold: &RdfTerm,
        aliases: &[String],
    ) -> Judgment {
        match self {
            Judge::Local(prefixes) => judge_local_with(answer, gold, aliases, prefixes),
            Judge::Remote(r) => {
                let gold = render_gold(
                    gold,
                    aliases.first().map(String::as_str),
                    &PrefixMap::standard(),
                );
                r.judge(question, &gold, answer)
            }
        }
    }
}

/// Judges with a frozen text-generation service.
#[derive(Debug, Clone)]
pub struct RemoteJudge {
    client: GenerationClient,
    judge_id: String,
}

impl RemoteJudge {
    pub fn new(client: GenerationClient, judge_id: impl Into<String>) -> Self {
        Self {
            client,
            judge_id: judge_id.into(),
        }
    }

    pub fn judge(&self, question: &str, gold: &str, answer: &str) -> Judgment {
        let req = GenerationRequest {
            messages: vec![Message::new(
                "user",
                render_judge_prompt(question, gold, answer),
            )],
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 128,
            stop: Vec::new(),
            seed: Some(0),
        };
        let reply = match self.client.generate(&req) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("judge unreachable: {e}");
                return self.unparseable();
            }
        };
        match parse_verdict(&reply) {
            Some(correct) => Judgment {
                correct,
                justification: reply.trim().to_string(),
                judge_id: self.judge_id.clone(),
            },
            None => {
                log::warn!(
                    "judge reply has no verdict: {}",
                    reply.chars().take(120).collect::<String>()
                );
                self.unparseable()
            }
        }
    }

    fn unparseable(&self) -> Judgment {
        Judgment {
            correct: false,
            justification: "unparseable".into(),
            judge_id: self.judge_id.clone(),
        }
    }
}
