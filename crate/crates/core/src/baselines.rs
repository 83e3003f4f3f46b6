//! Evaluation runs: the iterative agent and the three baselines.
//!
//! * `B1` direct answer, no graph access.
//! * `B2` exactly one query; the first binding of its result is the answer.
//! * `B3` the full iterative loop with greedy decoding.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::ExecutionOutcome;
use crate::curation::CuratedRecord;
use crate::environment::{
    derive_seed, episode_rng, Environment, EpisodeConfig, EpisodeRecord, EpisodeStats,
};
use crate::policy::{DecodingParams, Policy, PolicyContext};
use crate::protocol::{
    parse_agent_output, render_observation, serialize_state, Action, AgentTurn, MalformedReason,
    Step, Termination, Trajectory,
};
use crate::reward::{score, Judge, RewardConfig};
use crate::sparql::{PrefixMap, QueryResult, RdfTerm};

/// An evaluation question with its gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub question: String,
    pub gold: RdfTerm,
    #[serde(default)]
    pub aliases: Vec<String>,
}

impl From<&CuratedRecord> for Question {
    fn from(r: &CuratedRecord) -> Self {
        let aliases = r
            .metadata
            .as_ref()
            .and_then(|m| m.get("aliases"))
            .and_then(|a| serde_json::from_value(a.clone()).ok())
            .unwrap_or_default();
        Self {
            id: r.id.clone(),
            question: r.question.clone(),
            gold: r.answer.clone(),
            aliases,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SystemKind {
    /// Direct answer from parametric knowledge.
    B1,
    /// One query, answer read from its result.
    B2,
    /// Iterative loop, greedy decoding.
    B3,
    /// Iterative loop with the caller's decoding parameters.
    Agent,
}

impl SystemKind {
    pub fn default_decoding(self) -> DecodingParams {
        match self {
            SystemKind::B2 => DecodingParams::one_shot(),
            _ => DecodingParams::greedy(),
        }
    }

    /// The system message sent to a remote policy for this system.
    pub fn system_message(self) -> String {
        match self {
            SystemKind::B1 => crate::prompts::DIRECT_QA_PROMPT.to_string(),
            SystemKind::B2 => crate::prompts::ONE_SHOT_PROMPT.to_string(),
            SystemKind::B3 | SystemKind::Agent => crate::prompts::agent_system_message(),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SystemKind::B1 => "B1",
            SystemKind::B2 => "B2",
            SystemKind::B3 => "B3",
            SystemKind::Agent => "agent",
        })
    }
}

impl std::str::FromStr for SystemKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "b1" => Ok(SystemKind::B1),
            "b2" => Ok(SystemKind::B2),
            "b3" => Ok(SystemKind::B3),
            "agent" => Ok(SystemKind::Agent),
            other => Err(format!(
                "unknown system '{other}' (expected b1, b2, b3 or agent)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub system_id: String,
    pub kind: SystemKind,
    pub episode: EpisodeConfig,
    pub reward: RewardConfig,
    /// Samples per question (5 for pass@5).
    pub samples: u32,
    pub seed: u64,
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aborted {
    pub question_id: String,
    pub sample: u32,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<EpisodeRecord>,
    /// Episodes lost to policy transport failures; not scored.
    pub aborted: Vec<Aborted>,
}

/// Runs `kind` on every question `samples` times. `make_policy` is called
/// once per episode. Records come back in question, then sample order.
pub fn run_system(
    questions: &[Question],
    make_policy: &(dyn Fn() -> Box<dyn Policy> + Sync),
    judge: &Judge,
    cfg: &RunConfig,
) -> RunOutput {
    let env = Environment::new(cfg.episode.clone());
    let jobs: Vec<(usize, u32)> = (0..questions.len())
        .flat_map(|q| (0..cfg.samples.max(1)).map(move |s| (q, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.max(1))
        .build()
        .expect("evaluation pool");
    let results: Vec<Result<EpisodeRecord, Aborted>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(qi, sample)| {
                let q = &questions[qi];
                let seed = derive_seed(cfg.seed, qi as u64, sample as u64);
                let mut policy = make_policy();
                policy.set_decoding(cfg.kind.default_decoding());
                let run = match cfg.kind {
                    SystemKind::B1 => direct_episode(&env, policy.as_mut(), q, seed),
                    SystemKind::B2 => one_query_episode(&env, policy.as_mut(), q, seed),
                    SystemKind::B3 | SystemKind::Agent => env
                        .run_episode(policy.as_mut(), &q.id, &q.question, seed)
                        .map_err(|e| e.message),
                };
                let (trajectory, stats) = run.map_err(|message| Aborted {
                    question_id: q.id.clone(),
                    sample,
                    message,
                })?;
                let judgment = trajectory
                    .final_answer
                    .as_ref()
                    .map(|a| judge.judge(&q.question, a, &q.gold, &q.aliases));
                let reward = score(&trajectory, &stats, judgment.as_ref(), &cfg.reward).ok();
                Ok(EpisodeRecord {
                    question_id: q.id.clone(),
                    system_id: cfg.system_id.clone(),
                    sample,
                    seed,
                    trajectory,
                    stats,
                    gold: Some(q.gold.clone()),
                    judgment,
                    reward,
                })
            })
            .collect()
    });
    let mut out = RunOutput::default();
    for r in results {
        match r {
            Ok(rec) => out.records.push(rec),
            Err(a) => {
                log::warn!(
                    "episode {} sample {} aborted: {}",
                    a.question_id,
                    a.sample,
                    a.message
                );
                out.aborted.push(a);
            }
        }
    }
    out
}

/// One generation; a query is not executed and ends the episode as malformed.
fn direct_episode(
    env: &Environment,
    policy: &mut dyn Policy,
    q: &Question,
    seed: u64,
) -> Result<(Trajectory, EpisodeStats), String> {
    let mut traj = Trajectory::new(&q.id, &q.question);
    let raw = generate_once(env, policy, &traj, seed)?;
    match parse_agent_output(&raw, env.config().require_think) {
        Ok(
            turn @ AgentTurn {
                action: Action::Answer(_),
                ..
            },
        ) => {
            env.step(&mut traj, &turn.render())
                .expect("fresh trajectory");
        }
        Ok(_) => {
            traj.termination = Some(Termination::Malformed {
                raw_text: raw,
                reason: MalformedReason::UnexpectedTag,
            })
        }
        Err(e) => {
            traj.termination = Some(Termination::Malformed {
                raw_text: raw,
                reason: e.reason,
            })
        }
    }
    let stats = EpisodeStats::of(&traj);
    Ok((traj, stats))
}

/// One generation executed as a query. Unparseable replies are sent to the
/// executor verbatim, so they count as failed executions.
fn one_query_episode(
    env: &Environment,
    policy: &mut dyn Policy,
    q: &Question,
    seed: u64,
) -> Result<(Trajectory, EpisodeStats), String> {
    let mut traj = Trajectory::new(&q.id, &q.question);
    let raw = generate_once(env, policy, &traj, seed)?;
    let turn = match parse_agent_output(&raw, env.config().require_think) {
        Ok(AgentTurn {
            think,
            action: Action::Query(query),
        }) => AgentTurn {
            think,
            action: Action::Query(query),
        },
        Ok(AgentTurn {
            think,
            action: Action::Answer(text),
        }) => AgentTurn {
            think,
            action: Action::Query(text),
        },
        Err(_) => AgentTurn {
            think: None,
            action: Action::Query(raw.trim().to_string()),
        },
    };
    let Action::Query(query) = &turn.action else {
        unreachable!()
    };
    let cfg = env.config();
    let outcome = cfg.executor.execute(query);
    let answer = first_binding(&outcome, &cfg.render.prefixes);
    let observation = render_observation(&outcome, &cfg.render);
    traj.steps.push(Step {
        turn,
        observation: Some(observation),
    });
    traj.final_answer = Some(answer);
    traj.termination = Some(Termination::Answered);
    let stats = EpisodeStats::of(&traj);
    Ok((traj, stats))
}

fn generate_once(
    env: &Environment,
    policy: &mut dyn Policy,
    traj: &Trajectory,
    seed: u64,
) -> Result<String, String> {
    let mut rng = episode_rng(seed);
    let (state_text, _) = serialize_state(traj, &env.config().system_prompt);
    policy
        .generate(
            &PolicyContext {
                trajectory: traj,
                state_text: &state_text,
            },
            &mut rng,
        )
        .map_err(|e| e.to_string())
}

/// The first binding of the first row, or the ASK result; empty when there is none.
pub fn first_binding(outcome: &ExecutionOutcome, prefixes: &PrefixMap) -> String {
    match outcome.result() {
        Some(QueryResult::Boolean { value }) => value.to_string(),
        Some(QueryResult::Solutions(s)) => match s.first_term() {
            Some(RdfTerm::Literal { lexical, .. }) => lexical.clone(),
            Some(t) => t.to_compact(prefixes),
            None => String::new(),
        },
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::environment::Executor;
    use crate::eval::{avg_turns, executability_rate, RunResult};
    use crate::policy::ScriptedPolicy;
    use crate::sparql::load_ntriples;

    fn setup(kind: SystemKind) -> (Vec<Question>, RunConfig) {
        let nt = "<http://www.wikidata.org/entity/Q1> <http://www.wikidata.org/prop/direct/P57> <http://www.wikidata.org/entity/Q2> .\n";
        let store = Arc::new(load_ntriples(nt, PrefixMap::standard()).unwrap());
        let cfg = RunConfig {
            system_id: kind.to_string(),
            kind,
            episode: EpisodeConfig::new(Executor::Embedded(store)),
            reward: RewardConfig::default(),
            samples: 1,
            seed: 1,
            parallelism: 2,
        };
        let q = Question {
            id: "q1".into(),
            question: "Who directed Q1?".into(),
            gold: RdfTerm::iri("http://www.wikidata.org/entity/Q2"),
            aliases: vec![],
        };
        (vec![q], cfg)
    }

    fn scripted(replies: &'static [&'static str]) -> impl Fn() -> Box<dyn Policy> + Sync {
        move || {
            Box::new(ScriptedPolicy::new(
                replies.iter().map(|s| s.to_string()).collect(),
            )) as Box<dyn Policy>
        }
    }

    fn results(out: &RunOutput) -> Vec<RunResult> {
        out.records.iter().map(RunResult::from).collect()
    }

    #[test]
    fn b1_never_queries() {
        let (qs, cfg) = setup(SystemKind::B1);
        let out = run_system(
            &qs,
            &scripted(&["<think>I recall.</think><answer>wd:Q2</answer>"]),
            &Judge::local(),
            &cfg,
        );
        let rs = results(&out);
        assert_eq!(rs[0].n_queries_issued, 0);
        assert_eq!(executability_rate(&rs).percent(), "n/a");
        assert!(rs[0].correct());
    }

    #[test]
    fn b2_reads_first_binding() {
        let (qs, cfg) = setup(SystemKind::B2);
        let out = run_system(
            &qs,
            &scripted(&["<think>q</think><query>SELECT ?d WHERE { wd:Q1 wdt:P57 ?d }</query>"]),
            &Judge::local(),
            &cfg,
        );
        let r = &out.records[0];
        assert_eq!(
            r.trajectory.final_answer.as_deref(),
            Some("wd:Q2"),
            "{:?}",
            r.trajectory
        );
        assert_eq!(r.stats.turns, 1);
        assert!(r.judgment.as_ref().unwrap().correct);
    }

    #[test]
    fn b2_invalid_sparql_is_a_failed_execution() {
        let (qs, cfg) = setup(SystemKind::B2);
        let out = run_system(
            &qs,
            &scripted(&["<think>q</think><query>SELEC ?d WHERE { wd:Q1 wdt:P57 ?d }</query>"]),
            &Judge::local(),
            &cfg,
        );
        let rs = results(&out);
        assert_eq!((rs[0].n_queries_issued, rs[0].n_queries_succeeded), (1, 0));
        assert!(!rs[0].correct());
        assert_eq!(out.records[0].trajectory.steps.len(), 1);
    }

    #[test]
    fn b3_three_turns() {
        let (qs, cfg) = setup(SystemKind::B3);
        let out = run_system(
            &qs,
            &scripted(&[
                "<think>a</think><query>SELECT ?d WHERE { wd:Q1 wdt:P57 }</query>",
                "<think>b</think><query>SELECT ?d WHERE { wd:Q1 wdt:P57 ?d }</query>",
                "<think>c</think><answer>wd:Q2</answer>",
            ]),
            &Judge::local(),
            &cfg,
        );
        assert_eq!(avg_turns(&results(&out)).value(), Some(3.0));
        let reward = out.records[0].reward.unwrap();
        assert!((reward.total - (1.5 - 0.1 - 0.06)).abs() < 1e-12);
    }

    #[test]
    fn aborted_episodes_are_reported() {
        let (qs, cfg) = setup(SystemKind::B3);
        let out = run_system(&qs, &scripted(&[]), &Judge::local(), &cfg);
        assert!(out.records.is_empty());
        assert_eq!(out.aborted.len(), 1);
    }
}
