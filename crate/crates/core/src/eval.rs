//! End-to-end metrics, pass@k, McNemar's test and the failure taxonomy.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::environment::{EpisodeRecord, EpisodeStats};
use crate::protocol::Termination;
use crate::reward::Judgment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub question_id: String,
    pub system_id: String,
    pub sample: u32,
    pub stats: EpisodeStats,
    pub judgment: Option<Judgment>,
    pub n_queries_issued: usize,
    pub n_queries_succeeded: usize,
}

impl RunResult {
    pub fn correct(&self) -> bool {
        self.judgment.as_ref().is_some_and(|j| j.correct)
    }
}

impl From<&EpisodeRecord> for RunResult {
    fn from(r: &EpisodeRecord) -> Self {
        Self {
            question_id: r.question_id.clone(),
            system_id: r.system_id.clone(),
            sample: r.sample,
            stats: r.stats.clone(),
            judgment: r.judgment.clone(),
            n_queries_issued: r.stats.n_err + r.stats.n_exec_success,
            n_queries_succeeded: r.stats.n_exec_success,
        }
    }
}

/// A metric that may be undefined (e.g. executability without any query).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Value(f64),
    Undefined,
}

impl Metric {
    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Value(v) => Some(v),
            Metric::Undefined => None,
        }
    }

    fn ratio(num: f64, den: f64) -> Self {
        if den == 0.0 {
            Metric::Undefined
        } else {
            Metric::Value(num / den)
        }
    }

    /// Percentage with one decimal, rounded half up; `n/a` when undefined.
    pub fn percent(self) -> String {
        match self {
            Metric::Value(v) => format!("{:.1}", round_half_up_1(v * 100.0)),
            Metric::Undefined => "n/a".to_string(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Value(v) => write!(f, "{v:.4}"),
            Metric::Undefined => f.write_str("n/a"),
        }
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.map_or(Metric::Undefined, Metric::Value))
    }
}

/// Rounds to one decimal, ties upward. A tiny tolerance absorbs binary
/// representation error (e.g. 81.05 stored as 81.04999…).
pub fn round_half_up_1(x: f64) -> f64 {
    ((x * 10.0) + 0.5 + 1e-9).floor() / 10.0
}

/// Successful executions over queries issued.
pub fn executability_rate(results: &[RunResult]) -> Metric {
    let issued: usize = results.iter().map(|r| r.n_queries_issued).sum();
    let ok: usize = results.iter().map(|r| r.n_queries_succeeded).sum();
    Metric::ratio(ok as f64, issued as f64)
}

pub fn accuracy(results: &[RunResult]) -> Metric {
    Metric::ratio(
        results.iter().filter(|r| r.correct()).count() as f64,
        results.len() as f64,
    )
}

pub fn avg_turns(results: &[RunResult]) -> Metric {
    Metric::ratio(
        results.iter().map(|r| r.stats.turns as f64).sum(),
        results.len() as f64,
    )
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("question {question} has {got} samples, expected {expected}")]
    Ragged {
        question: String,
        got: usize,
        expected: usize,
    },
}

/// Fraction of questions with at least one correct sample among exactly `k`.
pub fn pass_at_k(
    samples: &BTreeMap<String, Vec<RunResult>>,
    k: usize,
) -> Result<Metric, EvalError> {
    for (q, runs) in samples {
        if runs.len() != k {
            return Err(EvalError::Ragged {
                question: q.clone(),
                got: runs.len(),
                expected: k,
            });
        }
    }
    let passed = samples
        .values()
        .filter(|runs| runs.iter().any(RunResult::correct))
        .count();
    Ok(Metric::ratio(passed as f64, samples.len() as f64))
}

/// Continuity-corrected McNemar statistic; `None` without discordant pairs.
pub fn mcnemar(n01: u64, n10: u64) -> Option<f64> {
    let n = n01 + n10;
    if n == 0 {
        return None;
    }
    let d = (n01.abs_diff(n10) as f64 - 1.0).max(0.0);
    Some(d * d / n as f64)
}

/// Upper-tail p-value of a χ²(1) statistic.
pub fn chi2_p_value(chi2: f64) -> f64 {
    ChiSquared::new(1.0)
        .expect("one degree of freedom")
        .sf(chi2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureClass {
    ExecutionFailure,
    RefusedToQuery,
    IncorrectLogic,
}

/// `None` for correct runs. Otherwise: no query at all → RefusedToQuery;
/// every query failed → ExecutionFailure; else IncorrectLogic.
pub fn classify_failure(r: &RunResult) -> Option<FailureClass> {
    if r.correct() {
        return None;
    }
    if r.n_queries_issued == 0
        && matches!(
            r.stats.termination,
            Some(Termination::Answered) | Some(Termination::Malformed { .. })
        )
    {
        return Some(FailureClass::RefusedToQuery);
    }
    if r.n_queries_issued > 0 && r.n_queries_succeeded == 0 {
        return Some(FailureClass::ExecutionFailure);
    }
    Some(FailureClass::IncorrectLogic)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Discordance {
    /// First system correct, second wrong.
    pub n01: u64,
    /// First system wrong, second correct.
    pub n10: u64,
    pub both_correct: u64,
    pub both_wrong: u64,
    /// Questions answered by only one of the systems.
    pub unpaired: u64,
}

/// Joins two systems' sample-0 runs on question id.
pub fn discordance(a: &[RunResult], b: &[RunResult]) -> Discordance {
    let first = |rs: &[RunResult]| -> BTreeMap<String, bool> {
        rs.iter()
            .filter(|r| r.sample == 0)
            .map(|r| (r.question_id.clone(), r.correct()))
            .collect()
    };
    let (ma, mb) = (first(a), first(b));
    let mut d = Discordance::default();
    for (q, &ca) in &ma {
        match mb.get(q) {
            None => d.unpaired += 1,
            Some(&cb) => match (ca, cb) {
                (true, false) => d.n01 += 1,
                (false, true) => d.n10 += 1,
                (true, true) => d.both_correct += 1,
                (false, false) => d.both_wrong += 1,
            },
        }
    }
    d.unpaired += mb.keys().filter(|q| !ma.contains_key(*q)).count() as u64;
    d
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub system_id: String,
    pub questions: usize,
    pub runs: usize,
    pub accuracy: Metric,
    pub executability: Metric,
    pub avg_turns: Metric,
    /// Present when every question has the same number (> 1) of samples.
    pub pass_at_k: Option<(usize, Metric)>,
    pub failures: BTreeMap<FailureClass, usize>,
}

/// Metrics for one system. Accuracy, executability, turns and the failure
/// taxonomy use sample 0; pass@k uses all samples.
pub fn system_report(system_id: &str, results: &[RunResult]) -> SystemReport {
    let primary: Vec<RunResult> = results.iter().filter(|r| r.sample == 0).cloned().collect();
    let mut by_q: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for r in results {
        by_q.entry(r.question_id.clone())
            .or_default()
            .push(r.clone());
    }
    let k = by_q.values().map(Vec::len).max().unwrap_or(0);
    let pass = (k > 1)
        .then(|| pass_at_k(&by_q, k).ok().map(|m| (k, m)))
        .flatten();
    let mut failures = BTreeMap::new();
    for c in primary.iter().filter_map(classify_failure) {
        *failures.entry(c).or_insert(0) += 1;
    }
    SystemReport {
        system_id: system_id.to_string(),
        questions: by_q.len(),
        runs: results.len(),
        accuracy: accuracy(&primary),
        executability: executability_rate(&primary),
        avg_turns: avg_turns(&primary),
        pass_at_k: pass,
        failures,
    }
}

pub fn group_by_system(results: &[RunResult]) -> BTreeMap<String, Vec<RunResult>> {
    let mut out: BTreeMap<String, Vec<RunResult>> = BTreeMap::new();
    for r in results {
        out.entry(r.system_id.clone()).or_default().push(r.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McNemarReport {
    pub system_a: String,
    pub system_b: String,
    pub n01: u64,
    pub n10: u64,
    pub chi2: Option<f64>,
    pub p_value: Option<f64>,
}

impl McNemarReport {
    pub fn new(system_a: &str, system_b: &str, n01: u64, n10: u64) -> Self {
        let chi2 = mcnemar(n01, n10);
        Self {
            system_a: system_a.into(),
            system_b: system_b.into(),
            n01,
            n10,
            chi2,
            p_value: chi2.map(chi2_p_value),
        }
    }
}

/// A human-readable metrics table.
pub fn render_table(reports: &[SystemReport]) -> String {
    let mut out = format!(
        "{:<16} {:>9} {:>10} {:>14} {:>9} {:>10}\n",
        "system", "questions", "accuracy%", "executability%", "pass@k%", "avg_turns"
    );
    for r in reports {
        let pass = r
            .pass_at_k
            .map_or("n/a".to_string(), |(k, m)| format!("{}@{k}", m.percent()));
        let turns = r
            .avg_turns
            .value()
            .map_or("n/a".to_string(), |t| format!("{t:.2}"));
        out.push_str(&format!(
            "{:<16} {:>9} {:>10} {:>14} {:>9} {:>10}\n",
            r.system_id,
            r.questions,
            r.accuracy.percent(),
            r.executability.percent(),
            pass,
            turns
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(
        q: &str,
        correct: bool,
        issued: usize,
        ok: usize,
        turns: usize,
        term: Termination,
    ) -> RunResult {
        RunResult {
            question_id: q.into(),
            system_id: "s".into(),
            sample: 0,
            stats: EpisodeStats {
                turns,
                n_err: issued - ok,
                n_exec_success: ok,
                termination: Some(term),
            },
            judgment: Some(Judgment {
                correct,
                justification: String::new(),
                judge_id: "t".into(),
            }),
            n_queries_issued: issued,
            n_queries_succeeded: ok,
        }
    }

    #[test]
    fn mcnemar_values() {
        assert!((mcnemar(354, 130).unwrap() - 102.75).abs() < 0.01);
        assert_eq!(mcnemar(10, 10), Some(0.0));
        assert!((mcnemar(5, 0).unwrap() - 3.2).abs() < 1e-12);
        assert_eq!(mcnemar(0, 0), None);
        assert_eq!(mcnemar(130, 354), mcnemar(354, 130));
        assert!(chi2_p_value(102.75) < 1e-20);
    }

    #[test]
    fn rates() {
        let rs = vec![
            run("a", true, 6, 5, 3, Termination::Answered),
            run("b", false, 4, 3, 1, Termination::Answered),
        ];
        assert_eq!(executability_rate(&rs), Metric::Value(0.8));
        assert_eq!(accuracy(&rs), Metric::Value(0.5));
        assert_eq!(avg_turns(&rs), Metric::Value(2.0));
        assert_eq!(
            executability_rate(&[run("c", false, 0, 0, 1, Termination::Answered)]),
            Metric::Undefined
        );
        assert_eq!(avg_turns(&[]), Metric::Undefined);
        assert_eq!(Metric::Undefined.percent(), "n/a");
    }

    #[test]
    fn rounding() {
        assert_eq!(Metric::Value(636.0 / 1279.0).percent(), "49.7");
        assert_eq!(Metric::Value(0.8105).percent(), "81.1");
        assert_eq!(Metric::Value(0.81).percent(), "81.0");
    }

    #[test]
    fn pass_at_k_rules() {
        let mut m = BTreeMap::new();
        m.insert(
            "a".to_string(),
            vec![run("a", false, 1, 1, 2, Termination::Answered); 5],
        );
        assert_eq!(pass_at_k(&m, 5).unwrap(), Metric::Value(0.0));
        m.get_mut("a").unwrap()[3] = run("a", true, 1, 1, 2, Termination::Answered);
        assert_eq!(pass_at_k(&m, 5).unwrap(), Metric::Value(1.0));
        m.insert(
            "b".to_string(),
            vec![run("b", true, 1, 1, 2, Termination::Answered); 4],
        );
        assert!(matches!(pass_at_k(&m, 5), Err(EvalError::Ragged { .. })));
    }

    #[test]
    fn taxonomy() {
        assert_eq!(
            classify_failure(&run("a", false, 0, 0, 1, Termination::Answered)),
            Some(FailureClass::RefusedToQuery)
        );
        assert_eq!(
            classify_failure(&run("a", false, 3, 0, 4, Termination::Answered)),
            Some(FailureClass::ExecutionFailure)
        );
        assert_eq!(
            classify_failure(&run("a", false, 3, 2, 4, Termination::Answered)),
            Some(FailureClass::IncorrectLogic)
        );
        assert_eq!(
            classify_failure(&run("a", true, 3, 2, 4, Termination::Answered)),
            None
        );
    }

    #[test]
    fn paired_counts() {
        let a = vec![
            run("1", true, 1, 1, 2, Termination::Answered),
            run("2", false, 1, 1, 2, Termination::Answered),
        ];
        let b = vec![
            run("1", false, 1, 1, 2, Termination::Answered),
            run("2", false, 1, 1, 2, Termination::Answered),
        ];
        let d = discordance(&a, &b);
        assert_eq!((d.n01, d.n10, d.both_wrong), (1, 0, 1));
        assert_eq!(discordance(&a, &a).n01 + discordance(&a, &a).n10, 0);
    }
}
