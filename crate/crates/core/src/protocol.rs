//! The tagged trajectory language spoken between agent and environment.
//!
//! An agent turn is a `<think>` block followed by exactly one `<query>` or
//! `<answer>` block. The environment replies to queries with a
//! `<query_result>` block. A serialized trajectory is the concatenation of the
//! prompt, every agent turn and every observation, together with a
//! [`SpanMask`] recording who produced each character.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ExecutionOutcome;
use crate::sparql::{PrefixMap, QueryResult};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";
pub const QUERY_OPEN: &str = "<query>";
pub const QUERY_CLOSE: &str = "</query>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";
pub const RESULT_OPEN: &str = "<query_result>";
pub const RESULT_CLOSE: &str = "</query_result>";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Action {
    Query(String),
    Answer(String),
}

/// One parsed agent action. `think` is `None` only for agents running without
/// the reasoning block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTurn {
    pub think: Option<String>,
    pub action: Action,
}

impl AgentTurn {
    pub fn query(think: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            think: Some(think.into()),
            action: Action::Query(query.into()),
        }
    }

    pub fn answer(think: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            think: Some(think.into()),
            action: Action::Answer(answer.into()),
        }
    }

    pub fn is_answer(&self) -> bool {
        matches!(self.action, Action::Answer(_))
    }

    /// An empty reasoning block is accepted by the parser but worth flagging.
    pub fn has_empty_think(&self) -> bool {
        self.think.as_deref().is_some_and(|t| t.trim().is_empty())
    }

    /// Canonical tagged text: think block, one newline, action block.
    pub fn render(&self) -> String {
        let action = match &self.action {
            Action::Query(q) => format!("{QUERY_OPEN}{q}{QUERY_CLOSE}"),
            Action::Answer(a) => format!("{ANSWER_OPEN}{a}{ANSWER_CLOSE}"),
        };
        match &self.think {
            Some(t) => format!("{THINK_OPEN}{t}{THINK_CLOSE}\n{action}"),
            None => action,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MalformedReason {
    MissingThink,
    MissingAction,
    TrailingContent,
    NestedTags,
    MultipleActions,
    UnclosedTag,
    UnexpectedTag,
    StrayText,
}

impl fmt::Display for MalformedReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MalformedReason::MissingThink => "missing-think",
            MalformedReason::MissingAction => "missing-action",
            MalformedReason::TrailingContent => "trailing-content",
            MalformedReason::NestedTags => "nested-tags",
            MalformedReason::MultipleActions => "multiple-actions",
            MalformedReason::UnclosedTag => "unclosed-tag",
            MalformedReason::UnexpectedTag => "unexpected-tag",
            MalformedReason::StrayText => "stray-text",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed agent output ({reason}): {detail}")]
pub struct MalformedError {
    pub reason: MalformedReason,
    pub detail: String,
}

fn malformed(reason: MalformedReason, detail: impl Into<String>) -> MalformedError {
    MalformedError {
        reason,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tag {
    ThinkOpen,
    ThinkClose,
    QueryOpen,
    QueryClose,
    AnswerOpen,
    AnswerClose,
    ResultOpen,
    ResultClose,
}

const TAGS: [(&str, Tag); 8] = [
    (THINK_OPEN, Tag::ThinkOpen),
    (THINK_CLOSE, Tag::ThinkClose),
    (QUERY_OPEN, Tag::QueryOpen),
    (QUERY_CLOSE, Tag::QueryClose),
    (ANSWER_OPEN, Tag::AnswerOpen),
    (ANSWER_CLOSE, Tag::AnswerClose),
    (RESULT_OPEN, Tag::ResultOpen),
    (RESULT_CLOSE, Tag::ResultClose),
];

/// Byte offset, length and kind of every protocol tag in `text`.
fn scan_tags(text: &str) -> Vec<(usize, usize, Tag)> {
    let mut out = Vec::new();
    for (i, _) in text.match_indices('<') {
        if let Some((lit, tag)) = TAGS.iter().find(|(lit, _)| text[i..].starts_with(lit)) {
            out.push((i, lit.len(), *tag));
        }
    }
    out
}

/// Parses one agent generation.
///
/// Accepts exactly `ws? <think>…</think> ws? (<query>…</query> | <answer>…</answer>) ws?`
/// (without the think block when `require_think` is false). Tags are
/// lowercase and attribute-free; block contents are kept verbatim.
pub fn parse_agent_output(raw: &str, require_think: bool) -> Result<AgentTurn, MalformedError> {
    let tags = scan_tags(raw);
    if tags
        .iter()
        .any(|t| matches!(t.2, Tag::ResultOpen | Tag::ResultClose))
    {
        return Err(malformed(
            MalformedReason::UnexpectedTag,
            "agent output contains a query_result tag",
        ));
    }
    if !require_think
        && tags
            .iter()
            .any(|t| matches!(t.2, Tag::ThinkOpen | Tag::ThinkClose))
    {
        return Err(malformed(
            MalformedReason::UnexpectedTag,
            "think block is not part of the action-only grammar",
        ));
    }
    let action_opens = tags
        .iter()
        .filter(|t| matches!(t.2, Tag::QueryOpen | Tag::AnswerOpen))
        .count();
    if action_opens > 1 {
        return Err(malformed(
            MalformedReason::MultipleActions,
            format!("{action_opens} action blocks"),
        ));
    }

    let mut tags = tags.into_iter().peekable();
    let mut cursor = 0usize;
    let skip_ws = |from: usize| from + (raw.len() - from - raw[from..].trim_start().len());

    let think = if require_think {
        cursor = skip_ws(cursor);
        match tags.peek() {
            Some(&(pos, len, Tag::ThinkOpen)) if pos == cursor => {
                tags.next();
                let content_start = pos + len;
                match tags.next() {
                    Some((close, close_len, Tag::ThinkClose)) => {
                        cursor = close + close_len;
                        Some(raw[content_start..close].to_string())
                    }
                    Some(_) => {
                        return Err(malformed(
                            MalformedReason::NestedTags,
                            "tag inside think block",
                        ))
                    }
                    None => {
                        return Err(malformed(
                            MalformedReason::UnclosedTag,
                            "think block is not closed",
                        ))
                    }
                }
            }
            _ => {
                return Err(malformed(
                    MalformedReason::MissingThink,
                    "output must start with a think block",
                ))
            }
        }
    } else {
        None
    };

    cursor = skip_ws(cursor);
    let (open_pos, open_len, open_tag) = match tags.next() {
        Some(t @ (_, _, Tag::QueryOpen | Tag::AnswerOpen)) => t,
        Some((_, _, Tag::ThinkOpen)) => {
            return Err(malformed(MalformedReason::NestedTags, "second think block"))
        }
        Some(_) | None if cursor >= raw.len() => {
            return Err(malformed(
                MalformedReason::MissingAction,
                "no query or answer block",
            ))
        }
        Some(_) => {
            return Err(malformed(
                MalformedReason::NestedTags,
                "unexpected closing tag",
            ))
        }
        None => {
            return Err(malformed(
                MalformedReason::MissingAction,
                "no query or answer block",
            ))
        }
    };
    if open_pos != cursor {
        return Err(malformed(MalformedReason::StrayText, "text between blocks"));
    }
    let expected_close = if open_tag == Tag::QueryOpen {
        Tag::QueryClose
    } else {
        Tag::AnswerClose
    };
    let content_start = open_pos + open_len;
    let content = match tags.next() {
        Some((close, close_len, tag)) if tag == expected_close => {
            cursor = close + close_len;
            &raw[content_start..close]
        }
        Some(_) => {
            return Err(malformed(
                MalformedReason::NestedTags,
                "tag inside action block",
            ))
        }
        None => {
            return Err(malformed(
                MalformedReason::UnclosedTag,
                "action block is not closed",
            ))
        }
    };
    if !raw[cursor..].trim().is_empty() {
        return Err(malformed(
            MalformedReason::TrailingContent,
            "content after the action block",
        ));
    }
    let action = if open_tag == Tag::QueryOpen {
        Action::Query(content.to_string())
    } else {
        Action::Answer(content.to_string())
    };
    Ok(AgentTurn { think, action })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationKind {
    Result,
    ExecError,
}

/// The environment's reply to a query, as shown inside `<query_result>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub payload: String,
    /// Total rows in the result (before clipping); 0 for errors.
    pub row_count: usize,
    pub truncated: bool,
}

impl Observation {
    pub fn is_error(&self) -> bool {
        self.kind == ObservationKind::ExecError
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderLimits {
    pub max_rows: usize,
    pub max_chars: usize,
    /// Used to abbreviate IRIs in rendered rows.
    #[serde(skip, default = "PrefixMap::standard")]
    pub prefixes: PrefixMap,
}

impl Default for RenderLimits {
    fn default() -> Self {
        Self {
            max_rows: 10,
            max_chars: 2000,
            prefixes: PrefixMap::standard(),
        }
    }
}

fn clip_chars(s: &str, max: usize) -> (String, bool) {
    match s.char_indices().nth(max) {
        Some((byte, _)) => (s[..byte].to_string(), true),
        None => (s.to_string(), false),
    }
}

/// Renders an execution outcome as observation text.
///
/// Results become a header line of variable names followed by one
/// tab-separated line per row. Clipped output ends with a
/// `[truncated: N rows total]` line and never exceeds `max_chars`. Failures
/// render as `ERROR: <category>: <message>`.
pub fn render_observation(outcome: &ExecutionOutcome, limits: &RenderLimits) -> Observation {
    let max_rows = limits.max_rows.max(1);
    let max_chars = limits.max_chars.max(64);
    match outcome {
        ExecutionOutcome::Failure { category, message } => {
            let (payload, _) = clip_chars(&format!("ERROR: {category}: {message}"), max_chars);
            Observation {
                kind: ObservationKind::ExecError,
                payload,
                row_count: 0,
                truncated: false,
            }
        }
        ExecutionOutcome::Success { result, .. } => {
            let (lines, total) = match result {
                QueryResult::Boolean { value } => {
                    (vec!["boolean".to_string(), value.to_string()], 1)
                }
                QueryResult::Solutions(s) => {
                    let mut lines = Vec::with_capacity(s.len().min(max_rows) + 1);
                    lines.push(s.vars.join("\t"));
                    for row in s.rows.iter().take(max_rows) {
                        let cells: Vec<String> = row
                            .iter()
                            .map(|c| {
                                c.as_ref()
                                    .map(|t| t.to_compact(&limits.prefixes))
                                    .unwrap_or_default()
                            })
                            .collect();
                        lines.push(cells.join("\t"));
                    }
                    (lines, s.len())
                }
            };
            let mut truncated = total > max_rows;
            let marker = format!("\n[truncated: {total} rows total]");
            let body = lines.join("\n");
            let budget = max_chars.saturating_sub(marker.chars().count());
            let body = if body.chars().count() > max_chars || truncated {
                truncated = true;
                let (clipped, _) = clip_chars(&body, budget);
                clipped
            } else {
                body
            };
            let payload = if truncated {
                format!("{body}{marker}")
            } else {
                body
            };
            Observation {
                kind: ObservationKind::Result,
                payload,
                row_count: total,
                truncated,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub turn: AgentTurn,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<Observation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnLimit,
    Malformed {
        raw_text: String,
        reason: MalformedReason,
    },
}

/// A full episode record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub question: String,
    pub prompt_id: String,
    pub steps: Vec<Step>,
    /// `None` while the episode is running.
    pub termination: Option<Termination>,
    pub final_answer: Option<String>,
}

impl Trajectory {
    pub fn new(prompt_id: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            prompt_id: prompt_id.into(),
            steps: Vec::new(),
            termination: None,
            final_answer: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.termination.is_some()
    }

    /// Agent turns taken, counting the final answer and a malformed last generation.
    pub fn turns(&self) -> usize {
        self.steps.len()
            + usize::from(matches!(
                self.termination,
                Some(Termination::Malformed { .. })
            ))
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.steps.iter().filter_map(|s| s.observation.as_ref())
    }

    pub fn queries_issued(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s.turn.action, Action::Query(_)))
            .count()
    }

    pub fn last_observation(&self) -> Option<&Observation> {
        self.steps.last().and_then(|s| s.observation.as_ref())
    }

    /// Checks the structural invariants of a (possibly running) trajectory.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (i, step) in self.steps.iter().enumerate() {
            let last = i + 1 == self.steps.len();
            match (&step.turn.action, &step.observation) {
                (Action::Query(_), None) => {
                    return Err(format!("query step {i} has no observation"))
                }
                (Action::Answer(_), Some(_)) => {
                    return Err(format!("answer step {i} has an observation"))
                }
                (Action::Answer(_), None) if !last => {
                    return Err(format!("answer step {i} is not last"))
                }
                _ => {}
            }
        }
        let answered = matches!(self.termination, Some(Termination::Answered));
        if answered != self.final_answer.is_some() {
            return Err("final_answer must be present exactly when the episode is answered".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanOrigin {
    Prompt,
    Agent,
    Environment,
}

/// A half-open character range `[start, end)` of the serialized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub origin: SpanOrigin,
}

/// Origin labels covering a serialized trajectory without gaps or overlaps.
/// Offsets count Unicode scalar values, not bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMask {
    pub spans: Vec<Span>,
}

impl SpanMask {
    pub fn total_len(&self) -> usize {
        self.spans.last().map_or(0, |s| s.end)
    }

    /// True when spans are sorted, contiguous from 0, and non-empty.
    pub fn is_well_formed(&self) -> bool {
        let mut at = 0;
        for s in &self.spans {
            if s.start != at || s.end <= s.start {
                return false;
            }
            at = s.end;
        }
        true
    }

    fn push(&mut self, text: &str, origin: SpanOrigin) {
        let len = text.chars().count();
        if len == 0 {
            return;
        }
        let start = self.total_len();
        self.spans.push(Span {
            start,
            end: start + len,
            origin,
        });
    }
}

/// Serializes the current state.
///
/// Layout (bit-exact):
/// `{system_prompt}\n` (omitted when empty), `Question: {question}\n`, then for
/// every step the rendered agent turn, followed for queries by
/// `\n<query_result>{payload}</query_result>\n`. A malformed final generation
/// is appended verbatim as an agent span.
pub fn serialize_state(traj: &Trajectory, system_prompt: &str) -> (String, SpanMask) {
    let mut text = String::new();
    let mut mask = SpanMask::default();
    let mut prompt = String::new();
    if !system_prompt.is_empty() {
        prompt.push_str(system_prompt);
        prompt.push('\n');
    }
    prompt.push_str("Question: ");
    prompt.push_str(&traj.question);
    prompt.push('\n');
    mask.push(&prompt, SpanOrigin::Prompt);
    text.push_str(&prompt);
    for step in &traj.steps {
        let agent = step.turn.render();
        mask.push(&agent, SpanOrigin::Agent);
        text.push_str(&agent);
        if let Some(obs) = &step.observation {
            let env = format!("\n{RESULT_OPEN}{}{RESULT_CLOSE}\n", obs.payload);
            mask.push(&env, SpanOrigin::Environment);
            text.push_str(&env);
        }
    }
    if let Some(Termination::Malformed { raw_text, .. }) = &traj.termination {
        mask.push(raw_text, SpanOrigin::Agent);
        text.push_str(raw_text);
    }
    (text, mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("token {index} has offsets ({start}, {end}) outside the text of length {len}")]
    OutOfBounds {
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
}

/// Maps character-level origins to tokens: a token is trainable iff every
/// character it covers was produced by the agent. Empty tokens and tokens
/// straddling a boundary are not trainable.
pub fn compute_loss_mask(
    mask: &SpanMask,
    token_offsets: &[(usize, usize)],
) -> Result<Vec<bool>, MaskError> {
    let len = mask.total_len();
    token_offsets
        .iter()
        .enumerate()
        .map(|(index, &(start, end))| {
            if start > end || end > len {
                return Err(MaskError::OutOfBounds {
                    index,
                    start,
                    end,
                    len,
                });
            }
            if start == end {
                return Ok(false);
            }
            let first = mask.spans.partition_point(|s| s.end <= start);
            Ok(mask.spans[first..]
                .iter()
                .take_while(|s| s.start < end)
                .all(|s| s.origin == SpanOrigin::Agent))
        })
        .collect()
}

/// Valid iff the episode terminated with an answer; every accepted step was
/// parsed, so turn-limit and malformed terminations are the invalid cases.
pub fn is_structurally_valid(traj: &Trajectory) -> bool {
    matches!(traj.termination, Some(Termination::Answered)) && traj.final_answer.is_some()
}

/// Whitespace/punctuation-boundary tokenization with character offsets, used
/// when exporting records without a model tokenizer.
pub fn word_token_offsets(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_alphanumeric() || c == '_' {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push((s, i));
        }
        out.push((i, i + 1));
    }
    if let Some(s) = start {
        out.push((s, text.chars().count()));
    }
    out
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::client::FailureCategory;
    use crate::sparql::{RdfTerm, Solutions};

    #[test]
    fn parses_query_and_answer_actions() {
        let t = parse_agent_output(
            "<think>find director</think><query>SELECT ?d WHERE { ?d ?p ?o }</query>",
            true,
        )
        .unwrap();
        assert_eq!(
            t,
            AgentTurn::query("find director", "SELECT ?d WHERE { ?d ?p ?o }")
        );
        let t = parse_agent_output("<think>done</think><answer>Q90</answer>", true).unwrap();
        assert_eq!(t.action, Action::Answer("Q90".into()));
        let t = parse_agent_output("  <think></think>\n\n<answer>x</answer>\n", true).unwrap();
        assert!(t.has_empty_think());
    }

    #[test]
    fn malformed_reasons() {
        let cases = [
            ("<query>SELECT…</query>", MalformedReason::MissingThink),
            (
                "<think>a</think><query>X</query><answer>Y</answer>",
                MalformedReason::MultipleActions,
            ),
            ("<think>a</think>", MalformedReason::MissingAction),
            ("<think>a</think>   ", MalformedReason::MissingAction),
            (
                "<think>a</think><answer>Y</answer> and more",
                MalformedReason::TrailingContent,
            ),
            (
                "<think>a</think><answer>Y</answer><think>b</think>",
                MalformedReason::TrailingContent,
            ),
            (
                "<think>a<think>b</think></think><answer>Y</answer>",
                MalformedReason::NestedTags,
            ),
            (
                "<think>a</think><query>X<query>Y</query>",
                MalformedReason::MultipleActions,
            ),
            (
                "<think>a</think><answer>X</query>",
                MalformedReason::NestedTags,
            ),
            ("<think>a", MalformedReason::UnclosedTag),
            ("<think>a</think><answer>X", MalformedReason::UnclosedTag),
            (
                "<think>a</think> so: <answer>X</answer>",
                MalformedReason::StrayText,
            ),
            (
                "<think>a</think><query_result>x</query_result>",
                MalformedReason::UnexpectedTag,
            ),
            (
                "<THINK>a</THINK><answer>X</answer>",
                MalformedReason::MissingThink,
            ),
            (
                "preamble <think>a</think><answer>X</answer>",
                MalformedReason::MissingThink,
            ),
            ("", MalformedReason::MissingThink),
        ];
        for (raw, reason) in cases {
            assert_eq!(
                parse_agent_output(raw, true).unwrap_err().reason,
                reason,
                "{raw:?}"
            );
        }
    }

    #[test]
    fn action_only_grammar() {
        let t = parse_agent_output("<answer>Q1</answer>", false).unwrap();
        assert_eq!(t.think, None);
        assert_eq!(parse_agent_output(&t.render(), false).unwrap(), t);
        assert_eq!(
            parse_agent_output("<think>a</think><answer>Q1</answer>", false)
                .unwrap_err()
                .reason,
            MalformedReason::UnexpectedTag
        );
    }

    fn success(vars: &[&str], rows: Vec<Vec<RdfTerm>>) -> ExecutionOutcome {
        ExecutionOutcome::Success {
            result: QueryResult::Solutions(Solutions {
                vars: vars.iter().map(|v| v.to_string()).collect(),
                rows: rows
                    .into_iter()
                    .map(|r| r.into_iter().map(Some).collect())
                    .collect(),
            }),
            elapsed: Duration::ZERO,
        }
    }

    #[test]
    fn renders_single_binding() {
        let o = render_observation(
            &success(
                &["d"],
                vec![vec![RdfTerm::iri("http://www.wikidata.org/entity/Q25191")]],
            ),
            &RenderLimits::default(),
        );
        assert_eq!(o.payload, "d\nwd:Q25191");
        assert_eq!(
            (o.row_count, o.truncated, o.kind),
            (1, false, ObservationKind::Result)
        );
    }

    #[test]
    fn renders_failure() {
        let o = render_observation(
            &ExecutionOutcome::failure(FailureCategory::Timeout, "query exceeded 3s"),
            &RenderLimits::default(),
        );
        assert_eq!(o.payload, "ERROR: timeout: query exceeded 3s");
        assert_eq!((o.kind, o.row_count), (ObservationKind::ExecError, 0));
    }

    #[test]
    fn clips_rows_and_chars() {
        let rows: Vec<Vec<RdfTerm>> = (0..500)
            .map(|i| vec![RdfTerm::iri(format!("http://x.org/item{i}"))])
            .collect();
        let limits = RenderLimits {
            max_rows: 10,
            max_chars: 2000,
            prefixes: PrefixMap::new(),
        };
        let o = render_observation(&success(&["x"], rows.clone()), &limits);
        assert!(o.truncated);
        assert_eq!(o.row_count, 500);
        assert_eq!(
            o.payload.lines().filter(|l| l.starts_with("<http")).count(),
            10
        );
        assert!(o.payload.ends_with("[truncated: 500 rows total]"));

        let limits = RenderLimits {
            max_rows: 500,
            max_chars: 100,
            prefixes: PrefixMap::new(),
        };
        let o = render_observation(&success(&["x"], rows), &limits);
        assert!(o.truncated);
        assert!(o.payload.chars().count() <= 100);
    }

    #[test]
    fn boolean_and_empty_results() {
        let ask = ExecutionOutcome::Success {
            result: QueryResult::Boolean { value: true },
            elapsed: Duration::ZERO,
        };
        assert_eq!(
            render_observation(&ask, &RenderLimits::default()).payload,
            "boolean\ntrue"
        );
        let empty = render_observation(&success(&["a", "b"], vec![]), &RenderLimits::default());
        assert_eq!(
            (empty.payload.as_str(), empty.row_count, empty.kind),
            ("a\tb", 0, ObservationKind::Result)
        );
    }

    fn obs(payload: &str) -> Observation {
        Observation {
            kind: ObservationKind::Result,
            payload: payload.into(),
            row_count: 1,
            truncated: false,
        }
    }

    #[test]
    fn serialize_empty_and_one_step() {
        let mut traj = Trajectory::new("q1", "Who directed it?");
        let (text, mask) = serialize_state(&traj, "SYS");
        assert_eq!(text, "SYS\nQuestion: Who directed it?\n");
        assert_eq!(mask.spans.len(), 1);
        assert_eq!(mask.spans[0].origin, SpanOrigin::Prompt);

        traj.steps.push(Step {
            turn: AgentTurn::query("t", "SELECT"),
            observation: Some(obs("d\nwd:Q1")),
        });
        let (text, mask) = serialize_state(&traj, "SYS");
        assert_eq!(
            text,
            "SYS\nQuestion: Who directed it?\n<think>t</think>\n<query>SELECT</query>\n<query_result>d\nwd:Q1</query_result>\n"
        );
        let origins: Vec<_> = mask.spans.iter().map(|s| s.origin).collect();
        assert_eq!(
            origins,
            vec![
                SpanOrigin::Prompt,
                SpanOrigin::Agent,
                SpanOrigin::Environment
            ]
        );
        assert!(mask.is_well_formed());
        assert_eq!(mask.total_len(), text.chars().count());
    }

    #[test]
    fn loss_mask_rules() {
        let mask = SpanMask {
            spans: vec![
                Span {
                    start: 0,
                    end: 5,
                    origin: SpanOrigin::Prompt,
                },
                Span {
                    start: 5,
                    end: 10,
                    origin: SpanOrigin::Agent,
                },
                Span {
                    start: 10,
                    end: 15,
                    origin: SpanOrigin::Environment,
                },
            ],
        };
        assert_eq!(
            compute_loss_mask(&mask, &[(5, 7), (7, 10)]).unwrap(),
            vec![true, true]
        );
        assert_eq!(
            compute_loss_mask(&mask, &[(0, 2), (2, 5)]).unwrap(),
            vec![false, false]
        );
        assert_eq!(
            compute_loss_mask(&mask, &[(8, 12), (4, 6), (7, 7)]).unwrap(),
            vec![false, false, false]
        );
        assert!(compute_loss_mask(&mask, &[(14, 16)]).is_err());
        assert!(compute_loss_mask(&mask, &[(3, 2)]).is_err());
    }

    #[test]
    fn structural_validity() {
        let mut t = Trajectory::new("q", "?");
        t.steps.push(Step {
            turn: AgentTurn::query("a", "q1"),
            observation: Some(obs("x")),
        });
        t.steps.push(Step {
            turn: AgentTurn::query("a", "q2"),
            observation: Some(obs("x")),
        });
        t.steps.push(Step {
            turn: AgentTurn::answer("a", "Q1"),
            observation: None,
        });
        t.termination = Some(Termination::Answered);
        t.final_answer = Some("Q1".into());
        assert!(is_structurally_valid(&t));
        assert!(t.check_invariants().is_ok());

        let mut limit = Trajectory::new("q", "?");
        limit.termination = Some(Termination::TurnLimit);
        assert!(!is_structurally_valid(&limit));

        let mut bad = Trajectory::new("q", "?");
        bad.termination = Some(Termination::Malformed {
            raw_text: "oops".into(),
            reason: MalformedReason::MissingThink,
        });
        assert!(!is_structurally_valid(&bad));
        assert_eq!(bad.turns(), 1);
    }

    #[test]
    fn word_tokens_cover_text() {
        let toks = word_token_offsets("<think>hi you</think>");
        let joined: usize = toks.iter().map(|(s, e)| e - s).sum();
        assert_eq!(joined, "<think>hi you</think>".len());
        assert!(toks.windows(2).all(|w| w[0].1 == w[1].0));
    }
}
