//! Dataset ingestion and the keep-rules: the gold query must execute, return
//! exactly one row, and bind a valid RDF term.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ExecutionOutcome, FailureCategory};
use crate::environment::Executor;
use crate::sparql::{QueryResult, RdfTerm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split '{other}' (expected train or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    pub question: String,
    pub gold_query: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

/// Input line shape. Accepts native names and LC-QuAD 2.0 export names
/// (`uid`, `sparql_wikidata`, `NNQT_question` as a fallback question).
#[derive(Debug, Deserialize)]
struct InputLine {
    #[serde(alias = "uid")]
    id: serde_json::Value,
    #[serde(default)]
    question: Option<String>,
    #[serde(default, rename = "NNQT_question")]
    nnqt_question: Option<String>,
    #[serde(alias = "sparql_wikidata")]
    gold_query: String,
    #[serde(default)]
    split: Option<Split>,
    #[serde(default)]
    metadata: Option<serde_json::Value>,
}

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("input line {line}: {message}")]
    Input { line: usize, message: String },
}

/// Reads line-delimited JSON records. Records without a split get `default_split`.
pub fn read_raw_records<R: BufRead>(
    input: R,
    default_split: Split,
) -> Result<Vec<RawRecord>, CurationError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| CurationError::Input {
            line: i + 1,
            message,
        };
        let raw: InputLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let id = match raw.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(bad(format!("id must be a string or number, got {other}"))),
        };
        if !seen.insert(id.clone()) {
            return Err(bad(format!("duplicate id '{id}'")));
        }
        let question = raw
            .question
            .filter(|q| !q.trim().is_empty())
            .or(raw.nnqt_question)
            .ok_or_else(|| bad("missing question".into()))?;
        out.push(RawRecord {
            id,
            question,
            gold_query: raw.gold_query,
            split: raw.split.unwrap_or(default_split),
            metadata: raw.metadata,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason")]
pub enum DropReason {
    Kept,
    ExecFailed {
        /// Transient failure: rerunning may succeed.
        transport: bool,
        message: String,
    },
    NotSingleRow {
        rows: usize,
    },
    InvalidTerm,
}

impl DropReason {
    pub fn name(&self) -> &'static str {
        match self {
            DropReason::Kept => "Kept",
            DropReason::ExecFailed { .. } => "ExecFailed",
            DropReason::NotSingleRow { .. } => "NotSingleRow",
            DropReason::InvalidTerm => "InvalidTerm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationVerdict {
    pub kept: bool,
    pub reason: DropReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<RdfTerm>,
}

impl CurationVerdict {
    fn drop(reason: DropReason) -> Self {
        Self {
            kept: false,
            reason,
            answer: None,
        }
    }
}

/// Blank nodes are not stable identifiers across endpoints, and an empty IRI
/// names nothing; every other term is valid, including the empty literal.
pub fn is_valid_rdf_term(term: &RdfTerm) -> bool {
    match term {
        RdfTerm::Iri { value } => !value.trim().is_empty(),
        RdfTerm::Literal { .. } | RdfTerm::Boolean { .. } => true,
        RdfTerm::BlankNode { .. } => false,
    }
}

/// Applies the rules in order: executes, exactly one row, valid term.
pub fn curate_record(rec: &RawRecord, executor: &Executor) -> CurationVerdict {
    let result = match executor.execute(&rec.gold_query) {
        ExecutionOutcome::Success { result, .. } => result,
        ExecutionOutcome::Failure { category, message } => {
            let transport = match category {
                FailureCategory::Transport => true,
                FailureCategory::Http(code) => code >= 500,
                FailureCategory::Syntax | FailureCategory::Timeout => false,
            };
            return CurationVerdict::drop(DropReason::ExecFailed { transport, message });
        }
    };
    let answer = match result {
        QueryResult::Boolean { value } => RdfTerm::Boolean { value },
        QueryResult::Solutions(s) => {
            if s.len() != 1 {
                return CurationVerdict::drop(DropReason::NotSingleRow { rows: s.len() });
            }
            match s.rows[0].first().cloned().flatten() {
                Some(t) => t,
                None => return CurationVerdict::drop(DropReason::InvalidTerm),
            }
        }
    };
    if !is_valid_rdf_term(&answer) {
        return CurationVerdict::drop(DropReason::InvalidTerm);
    }
    CurationVerdict {
        kept: true,
        reason: DropReason::Kept,
        answer: Some(answer),
    }
}

/// A kept record: the input plus its single answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuratedRecord {
    pub id: String,
    pub question: String,
    pub gold_query: String,
    pub split: Split,
    pub answer: RdfTerm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<serde_json::Value>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
}

impl SplitCounts {
    fn add(&mut self, v: &CurationVerdict) {
        self.input += 1;
        if v.kept {
            self.kept += 1;
        } else {
            *self.dropped.entry(v.reason.name().to_string()).or_default() += 1;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<String, usize>,
    pub per_split: BTreeMap<Split, SplitCounts>,
    /// Records that failed for transient reasons; rerun them.
    pub rerunnable: Vec<String>,
}

/// Curates records with at most `parallelism` concurrent executions. Output
/// order follows input order.
pub fn curate_all(
    records: &[RawRecord],
    executor: &Executor,
    parallelism: usize,
) -> Vec<CurationVerdict> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .expect("curation pool");
    pool.install(|| {
        records
            .par_iter()
            .map(|r| curate_record(r, executor))
            .collect()
    })
}

pub fn summarize(records: &[RawRecord], verdicts: &[CurationVerdict]) -> CurationSummary {
    let mut total = SplitCounts::default();
    let mut summary = CurationSummary::default();
    for (r, v) in records.iter().zip(verdicts) {
        total.add(v);
        summary.per_split.entry(r.split).or_default().add(v);
        if matches!(
            v.reason,
            DropReason::ExecFailed {
                transport: true,
                ..
            }
        ) {
            summary.rerunnable.push(r.id.clone());
        }
    }
    summary.input = total.input;
    summary.kept = total.kept;
    summary.dropped = total.dropped;
    summary
}

/// Curates and writes kept records as line-delimited JSON to `out`.
pub fn curate_dataset<W: Write>(
    records: &[RawRecord],
    executor: &Executor,
    parallelism: usize,
    mut out: W,
) -> Result<CurationSummary, CurationError> {
    let verdicts = curate_all(records, executor, parallelism);
    for (r, v) in records.iter().zip(&verdicts) {
        let Some(answer) = &v.answer else { continue };
        let kept = CuratedRecord {
            id: r.id.clone(),
            question: r.question.clone(),
            gold_query: r.gold_query.clone(),
            split: r.split,
            answer: answer.clone(),
            metadata: r.metadata.clone(),
        };
        serde_json::to_writer(&mut out, &kept).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(summarize(records, &verdicts))
}

pub fn read_curated<R: BufRead>(input: R) -> Result<Vec<CuratedRecord>, CurationError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| CurationError::Input {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::sparql::{load_ntriples, PrefixMap};

    fn executor() -> Executor {
        let nt = "<http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P1> <http://www.wikidata.org/entity/Q2> .\n\
                  <http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P2> <http://www.wikidata.org/entity/Q3> .\n\
                  <http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P2> <http://www.wikidata.org/entity/Q4> .\n";
        Executor::Embedded(Arc::new(load_ntriples(nt, PrefixMap::standard()).unwrap()))
    }

    fn rec(q: &str) -> RawRecord {
        RawRecord {
            id: "r".into(),
            question: "?".into(),
            gold_query: q.into(),
            split: Split::Test,
            metadata: None,
        }
    }

    #[test]
    fn rules() {
        let ex = executor();
        let v = curate_record(&rec("SELECT ?o WHERE { wd:Q1 wdt:P2 ?o }"), &ex);
        assert_eq!(v.reason, DropReason::NotSingleRow { rows: 2 });
        let v = curate_record(&rec("ASK { wd:Q1 wdt:P1 wd:Q2 }"), &ex);
        assert_eq!(v.answer, Some(RdfTerm::Boolean { value: true }));
        assert!(v.kept);
        let v = curate_record(&rec("SELECT ?o WHERE { wd:Q1 wdt:P1 }"), &ex);
        assert!(matches!(
            v.reason,
            DropReason::ExecFailed {
                transport: false,
                ..
            }
        ));
    }

    #[test]
    fn term_validity() {
        assert!(is_valid_rdf_term(&RdfTerm::iri(
            "http://www.wikidata.org/entity/Q90"
        )));
        assert!(!is_valid_rdf_term(&RdfTerm::BlankNode {
            label: "b0".into()
        }));
        assert!(!is_valid_rdf_term(&RdfTerm::iri("")));
        assert!(is_valid_rdf_term(&RdfTerm::literal("")));
    }

    #[test]
    fn lcquad_field_mapping() {
        let input = r#"{"uid": 19719, "question": null, "NNQT_question": "What is {x} of {y}", "sparql_wikidata": "ASK { wd:Q1 wdt:P1 wd:Q2 }"}
{"id": "b", "question": "Q?", "gold_query": "ASK { wd:Q1 wdt:P1 wd:Q2 }", "split": "train"}"#;
        let recs = read_raw_records(input.as_bytes(), Split::Test).unwrap();
        assert_eq!(recs[0].id, "19719");
        assert_eq!(recs[0].question, "What is {x} of {y}");
        assert_eq!(recs[0].split, Split::Test);
        assert_eq!(recs[1].split, Split::Train);
    }

    #[test]
    fn input_errors_carry_line_numbers() {
        let input = "{\"id\": \"a\", \"question\": \"q\", \"gold_query\": \"ASK {}\"}\n{not json\n";
        match read_raw_records(input.as_bytes(), Split::Test) {
            Err(CurationError::Input { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\": \"a\", \"question\": \"q\", \"gold_query\": \"x\"}\n{\"id\": \"a\", \"question\": \"q\", \"gold_query\": \"x\"}\n";
        assert!(read_raw_records(dup.as_bytes(), Split::Test).is_err());
    }

    #[test]
    fn empty_input() {
        let mut out = Vec::new();
        let s = curate_dataset(&[], &executor(), 4, &mut out).unwrap();
        assert!(out.is_empty());
        assert_eq!(s, CurationSummary::default());
    }
}
