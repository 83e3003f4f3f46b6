//! The episode engine: think → act → observe until an answer, a malformed
//! action, or the turn limit.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::{ExecutionOutcome, FailureCategory, SparqlClient};
use crate::policy::{Policy, PolicyContext};
use crate::protocol::{
    is_structurally_valid, parse_agent_output, render_observation, serialize_state, Action,
    RenderLimits, Step, Termination, Trajectory,
};
use crate::reward::{Judgment, RewardBreakdown};
use crate::sparql::{execute_subset, parse_subset, PrefixMap, RdfTerm, TripleStore};

/// All episode randomness flows through this generator.
pub type EpisodeRng = rand_chacha::ChaCha8Rng;

pub fn episode_rng(seed: u64) -> EpisodeRng {
    EpisodeRng::seed_from_u64(seed)
}

/// Mixes a run seed with two indices (e.g. question and sample) so that each
/// episode gets an independent, order-free seed.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z =
        base ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Where queries run.
#[derive(Debug, Clone)]
pub enum Executor {
    Embedded(Arc<TripleStore>),
    Remote(Arc<SparqlClient>),
}

impl Executor {
    /// Runs a query. Embedded execution reports subset parse errors as syntax
    /// failures; remote execution is memoized and prechecked by the client.
    pub fn execute(&self, query: &str) -> ExecutionOutcome {
        match self {
            Executor::Embedded(store) => {
                let started = Instant::now();
                match parse_subset(query, store.prefixes()) {
                    Ok(q) => ExecutionOutcome::Success {
                        result: execute_subset(&q, store),
                        elapsed: started.elapsed(),
                    },
                    Err(e) => ExecutionOutcome::failure(FailureCategory::Syntax, e.to_string()),
                }
            }
            Executor::Remote(client) => client.cached_execute(query).0,
        }
    }

    pub fn prefixes(&self) -> PrefixMap {
        match self {
            Executor::Embedded(store) => store.prefixes().clone(),
            Executor::Remote(_) => PrefixMap::standard(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeConfig {
    pub t_max: usize,
    pub render: RenderLimits,
    pub require_think: bool,
    pub system_prompt: String,
    pub executor: Executor,
}

impl EpisodeConfig {
    pub fn new(executor: Executor) -> Self {
        let render = RenderLimits {
            prefixes: executor.prefixes(),
            ..RenderLimits::default()
        };
        Self {
            t_max: 10,
            render,
            require_think: true,
            system_prompt: crate::prompts::AGENT_SYSTEM_PROMPT.to_string(),
            executor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeStats {
    /// Agent turns, including the answer turn and a malformed final generation.
    pub turns: usize,
    pub n_err: usize,
    pub n_exec_success: usize,
    pub termination: Option<Termination>,
}

impl EpisodeStats {
    pub fn of(traj: &Trajectory) -> Self {
        let n_err = count_errors(traj);
        Self {
            turns: traj.turns(),
            n_err,
            n_exec_success: traj.queries_issued() - n_err,
            termination: traj.termination.clone(),
        }
    }
}

/// Failed executions in the trajectory. Empty results are not failures.
pub fn count_errors(traj: &Trajectory) -> usize {
    traj.observations().filter(|o| o.is_error()).count()
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("step called on a terminated trajectory")]
    AlreadyTerminated,
}

#[derive(Debug, Error)]
#[error("episode aborted by policy failure: {message}")]
pub struct EpisodeAborted {
    pub trajectory: Trajectory,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct Environment {
    cfg: EpisodeConfig,
}

impl Environment {
    pub fn new(cfg: EpisodeConfig) -> Self {
        assert!(cfg.t_max >= 1, "t_max must be at least 1");
        Self { cfg }
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    /// Applies one agent generation. Returns whether the episode is done.
    pub fn step(&self, traj: &mut Trajectory, raw_agent_text: &str) -> Result<bool, EnvError> {
        if traj.is_done() {
            return Err(EnvError::AlreadyTerminated);
        }
        let turn = match parse_agent_output(raw_agent_text, self.cfg.require_think) {
            Ok(turn) => turn,
            Err(e) => {
                traj.termination = Some(Termination::Malformed {
                    raw_text: raw_agent_text.to_string(),
                    reason: e.reason,
                });
                return Ok(true);
            }
        };
        match &turn.action {
            Action::Answer(answer) => {
                traj.final_answer = Some(answer.clone());
                traj.steps.push(Step {
                    turn,
                    observation: None,
                });
                traj.termination = Some(Termination::Answered);
            }
            Action::Query(query) => {
                let outcome = self.cfg.executor.execute(query);
                let observation = render_observation(&outcome, &self.cfg.render);
                traj.steps.push(Step {
                    turn,
                    observation: Some(observation),
                });
                if traj.steps.len() >= self.cfg.t_max {
                    traj.termination = Some(Termination::TurnLimit);
                }
            }
        }
        Ok(traj.is_done())
    }

    pub fn state_text(&self, traj: &Trajectory) -> String {
        serialize_state(traj, &self.cfg.system_prompt).0
    }

    /// Runs a full episode; deterministic for a deterministic policy, a fixed
    /// seed and an embedded executor.
    #[allow(clippy::result_large_err)]
    pub fn run_episode(
        &self,
        policy: &mut dyn Policy,
        prompt_id: &str,
        question: &str,
        seed: u64,
    ) -> Result<(Trajectory, EpisodeStats), EpisodeAborted> {
        let mut rng = episode_rng(seed);
        let mut traj = Trajectory::new(prompt_id, question);
        loop {
            let state_text = self.state_text(&traj);
            let ctx = PolicyContext {
                trajectory: &traj,
                state_text: &state_text,
            };
            let raw = match policy.generate(&ctx, &mut rng) {
                Ok(raw) => raw,
                Err(e) => {
                    log::warn!("episode {prompt_id} aborted: {e}");
                    return Err(EpisodeAborted {
                        trajectory: traj,
                        message: e.to_string(),
                    });
                }
            };
            if self
                .step(&mut traj, &raw)
                .expect("trajectory checked as running")
            {
                break;
            }
        }
        let stats = EpisodeStats::of(&traj);
        Ok((traj, stats))
    }
}

/// One line of an episode log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub question_id: String,
    pub system_id: String,
    #[serde(default)]
    pub sample: u32,
    #[serde(default)]
    pub seed: u64,
    pub trajectory: Trajectory,
    pub stats: EpisodeStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<RdfTerm>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgment: Option<Judgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardBreakdown>,
}

impl EpisodeRecord {
    pub fn structurally_valid(&self) -> bool {
        is_structurally_valid(&self.trajectory)
    }
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn write_episode_log<W: Write>(mut out: W, records: &[EpisodeRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_episode_log<R: BufRead>(input: R) -> Result<Vec<EpisodeRecord>, LogError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| LogError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ScriptedPolicy;
    use crate::protocol::{MalformedReason, ObservationKind};
    use crate::sparql::load_ntriples;

    fn store() -> Arc<TripleStore> {
        let src = "<http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P57> <http://www.wikidata.org/entity/Q2> .\n";
        Arc::new(load_ntriples(src, PrefixMap::standard()).unwrap())
    }

    fn env(t_max: usize) -> Environment {
        let mut cfg = EpisodeConfig::new(Executor::Embedded(store()));
        cfg.t_max = t_max;
        Environment::new(cfg)
    }

    const GOOD_Q: &str = "<think>look</think><query>SELECT ?d WHERE { wd:Q1 wdt:P57 ?d }</query>";
    const EMPTY_Q: &str = "<think>look</think><query>SELECT ?d WHERE { wd:Q9 wdt:P57 ?d }</query>";
    const BAD_Q: &str = "<think>look</think><query>SELECT ?d WHERE { ?d }</query>";
    const ANSWER: &str = "<think>done</think><answer>wd:Q2</answer>";

    #[test]
    fn answer_on_first_turn() {
        let env = env(10);
        let mut t = Trajectory::new("q", "?");
        assert!(env.step(&mut t, ANSWER).unwrap());
        assert_eq!(t.termination, Some(Termination::Answered));
        assert_eq!(EpisodeStats::of(&t).turns, 1);
        assert!(matches!(
            env.step(&mut t, ANSWER),
            Err(EnvError::AlreadyTerminated)
        ));
    }

    #[test]
    fn turn_limit_after_t_max_queries() {
        let env = env(10);
        let mut policy = ScriptedPolicy::new(vec![GOOD_Q.to_string(); 10]);
        let (t, stats) = env.run_episode(&mut policy, "q", "?", 0).unwrap();
        assert_eq!(t.termination, Some(Termination::TurnLimit));
        assert_eq!(stats.turns, 10);
        assert!(!is_structurally_valid(&t));
    }

    #[test]
    fn malformed_second_turn() {
        let env = env(10);
        let mut policy = ScriptedPolicy::new(vec![GOOD_Q.into(), "no tags at all".into()]);
        let (t, stats) = env.run_episode(&mut policy, "q", "?", 0).unwrap();
        assert!(matches!(
            t.termination,
            Some(Termination::Malformed {
                reason: MalformedReason::MissingThink,
                ..
            })
        ));
        assert_eq!(stats.turns, 2);
        assert!(!is_structurally_valid(&t));
    }

    #[test]
    fn scripted_query_then_answer() {
        let env = env(10);
        let mut policy = ScriptedPolicy::new(vec![GOOD_Q.into(), ANSWER.into()]);
        let (t, stats) = env.run_episode(&mut policy, "q", "?", 0).unwrap();
        assert_eq!(
            stats,
            EpisodeStats {
                turns: 2,
                n_err: 0,
                n_exec_success: 1,
                termination: Some(Termination::Answered)
            }
        );
        assert_eq!(t.steps[0].observation.as_ref().unwrap().payload, "d\nwd:Q2");
        assert_eq!(t.final_answer.as_deref(), Some("wd:Q2"));
        t.check_invariants().unwrap();
    }

    #[test]
    fn error_counting() {
        let env = env(10);
        let mut t = Trajectory::new("q", "?");
        assert_eq!(count_errors(&t), 0);
        env.step(&mut t, BAD_Q).unwrap();
        env.step(&mut t, BAD_Q).unwrap();
        env.step(&mut t, GOOD_Q).unwrap();
        assert_eq!(count_errors(&t), 2);
        env.step(&mut t, EMPTY_Q).unwrap();
        assert_eq!(
            t.steps[3].observation.as_ref().unwrap().kind,
            ObservationKind::Result
        );
        assert_eq!(count_errors(&t), 2);
        let stats = EpisodeStats::of(&t);
        assert_eq!(stats.n_err + stats.n_exec_success, 4);
    }

    #[test]
    fn state_is_monotone_prefix() {
        let env = env(10);
        let mut t = Trajectory::new("q", "?");
        let mut prev = env.state_text(&t);
        for raw in [GOOD_Q, BAD_Q, "garbage"] {
            env.step(&mut t, raw).unwrap();
            let next = env.state_text(&t);
            assert!(next.starts_with(&prev) && next.len() > prev.len());
            prev = next;
        }
    }

    #[test]
    fn policy_failure_aborts() {
        let env = env(10);
        let mut policy = ScriptedPolicy::new(vec![GOOD_Q.into()]);
        let err = env.run_episode(&mut policy, "q", "?", 0).unwrap_err();
        assert_eq!(err.trajectory.steps.len(), 1);
    }

    #[test]
    fn log_round_trip() {
        let env = env(10);
        let mut policy = ScriptedPolicy::new(vec![GOOD_Q.into(), ANSWER.into()]);
        let (trajectory, stats) = env.run_episode(&mut policy, "q", "?", 0).unwrap();
        let rec = EpisodeRecord {
            question_id: "q".into(),
            system_id: "s".into(),
            sample: 0,
            seed: 0,
            trajectory,
            stats,
            gold: Some(RdfTerm::iri("http://www.wikidata.org/entity/Q2")),
            judgment: None,
            reward: None,
        };
        let mut buf = Vec::new();
        write_episode_log(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_episode_log(buf.as_slice()).unwrap(), vec![rec]);
    }
}
