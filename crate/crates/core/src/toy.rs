//! A seeded synthetic graph with 1-hop and 2-hop questions, and a softmax
//! policy over a fixed set of action templates trained with GRPO.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, EpisodeConfig, EpisodeRng, EpisodeStats, Executor};
use crate::grpo::{
    compute_advantages, grpo_objective, span_tokens, GrpoConfig, Objective, TokenLogprob,
    TrainingRecord, RECORD_SCHEMA_VERSION,
};
use crate::policy::{Policy, PolicyContext, PolicyError};
use crate::protocol::{compute_loss_mask, serialize_state, Action, ObservationKind, Trajectory};
use crate::reward::{judge_local, score, RewardConfig};
use crate::sparql::{
    execute_subset, parse_subset, PrefixMap, QueryResult, RdfTerm, Triple, TripleStore,
};

const TOY: &str = "http://example.org/toy/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub id: String,
    pub question: String,
    pub gold: RdfTerm,
    pub gold_query: String,
    pub hops: usize,
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub store: Arc<TripleStore>,
    pub tasks: Vec<ToyTask>,
    pub relations: Vec<String>,
    pub n_entities: usize,
}

pub const N_RELATIONS: usize = 6;

/// Builds a random graph over `toy:e0..` and `toy:p1..p6` and samples
/// questions whose answer chain is unique at every hop. Tasks alternate
/// between 1-hop and 2-hop shapes while both are available.
pub fn generate_world(seed: u64, n_entities: usize, n_tasks: usize) -> ToyWorld {
    assert!(n_entities >= 10, "n_entities must be at least 10");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let relations: Vec<String> = (1..=N_RELATIONS).map(|j| format!("p{j}")).collect();
    let mut edges: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut triples = Vec::new();
    for e in 0..n_entities {
        for (p, rel) in relations.iter().enumerate() {
            let roll: f64 = rng.random();
            let out_degree = if roll < 0.45 {
                0
            } else if roll < 0.88 {
                1
            } else {
                2
            };
            let mut objects = Vec::new();
            while objects.len() < out_degree {
                let o = rng.random_range(0..n_entities);
                if o != e && !objects.contains(&o) {
                    objects.push(o);
                }
            }
            for &o in &objects {
                triples.push(Triple {
                    subject: RdfTerm::iri(format!("{TOY}e{e}")),
                    predicate: format!("{TOY}{}", rel),
                    object: RdfTerm::iri(format!("{TOY}e{o}")),
                });
            }
            edges.insert((e, p), objects);
        }
    }
    let unique = |e: usize, p: usize| match edges.get(&(e, p)).map(Vec::as_slice) {
        Some([o]) => Some(*o),
        _ => None,
    };
    let mut one_hop = Vec::new();
    let mut two_hop = Vec::new();
    for e in 0..n_entities {
        for p in 0..N_RELATIONS {
            let Some(x) = unique(e, p) else { continue };
            one_hop.push((e, vec![p], x));
            for q in 0..N_RELATIONS {
                if let Some(y) = unique(x, q) {
                    two_hop.push((e, vec![p, q], y));
                }
            }
        }
    }
    one_hop.shuffle(&mut rng);
    two_hop.shuffle(&mut rng);
    let (mut a, mut b) = (one_hop.into_iter(), two_hop.into_iter());
    let mut tasks = Vec::with_capacity(n_tasks);
    while tasks.len() < n_tasks {
        let next = if tasks.len() % 2 == 0 {
            a.next().or_else(|| b.next())
        } else {
            b.next().or_else(|| a.next())
        };
        let Some((start, chain, answer)) = next else {
            break;
        };
        tasks.push(make_task(tasks.len(), start, &chain, answer, &relations));
    }
    let store = Arc::new(TripleStore::from_triples(triples, PrefixMap::standard()));
    ToyWorld {
        store,
        tasks,
        relations,
        n_entities,
    }
}

fn make_task(
    index: usize,
    start: usize,
    chain: &[usize],
    answer: usize,
    relations: &[String],
) -> ToyTask {
    let (question, gold_query) = match chain {
        [p] => (
            format!("What is the {} of e{start}?", relations[*p]),
            format!(
                "SELECT ?x WHERE {{ toy:e{start} toy:{} ?x }}",
                relations[*p]
            ),
        ),
        [p, q] => (
            format!(
                "What is the {} of the {} of e{start}?",
                relations[*q], relations[*p]
            ),
            format!(
                "SELECT ?y WHERE {{ toy:e{start} toy:{} ?x . ?x toy:{} ?y }}",
                relations[*p], relations[*q]
            ),
        ),
        _ => unreachable!("tasks have one or two hops"),
    };
    ToyTask {
        id: format!("toy-{index:04}"),
        question,
        gold: RdfTerm::iri(format!("{TOY}e{answer}")),
        gold_query,
        hops: chain.len(),
    }
}

impl ToyWorld {
    /// Checks that every gold query returns exactly one row equal to the gold term.
    pub fn verify(&self) -> Result<(), String> {
        for t in &self.tasks {
            let q = parse_subset(&t.gold_query, self.store.prefixes())
                .map_err(|e| format!("{}: {e}", t.id))?;
            let r = execute_subset(&q, &self.store);
            match &r {
                QueryResult::Solutions(s) if s.len() == 1 && s.first_term() == Some(&t.gold) => {}
                _ => {
                    return Err(format!(
                        "{}: gold query returned {} rows",
                        t.id,
                        r.row_count()
                    ))
                }
            }
        }
        Ok(())
    }
}

/// The parsed shape of a toy question: start entity and relations in traversal order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyQuestion {
    pub start: String,
    pub chain: Vec<String>,
}

pub fn parse_question(q: &str) -> Option<ToyQuestion> {
    let body = q.strip_prefix("What is the ")?.strip_suffix('?')?;
    let mut parts: Vec<&str> = body
        .split(" of ")
        .map(|p| p.strip_prefix("the ").unwrap_or(p))
        .collect();
    let entity = parts.pop()?;
    if parts.is_empty() {
        return None;
    }
    parts.reverse();
    Some(ToyQuestion {
        start: format!("toy:{entity}"),
        chain: parts.into_iter().map(str::to_string).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    ProbeOneHop,
    ProbeReverseHop,
    FilterCandidates,
    AnswerFromLastResult,
    AnswerRandom,
    MalformedEmit,
}

impl Template {
    pub const ALL: [Template; 6] = [
        Template::ProbeOneHop,
        Template::ProbeReverseHop,
        Template::FilterCandidates,
        Template::AnswerFromLastResult,
        Template::AnswerRandom,
        Template::MalformedEmit,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_query(self) -> bool {
        matches!(
            self,
            Template::ProbeOneHop | Template::ProbeReverseHop | Template::FilterCandidates
        )
    }

    fn think(self) -> &'static str {
        match self {
            Template::ProbeOneHop => "Follow the next relation from the current entity.",
            Template::ProbeReverseHop => "Check the relation in the reverse direction.",
            Template::FilterCandidates => "Narrow down using the candidate from the last result.",
            Template::AnswerFromLastResult => "The last result holds the answer.",
            Template::AnswerRandom => "Guess an entity.",
            Template::MalformedEmit => "",
        }
    }
}

pub const N_TEMPLATES: usize = Template::ALL.len();

/// Feature layout: bias, turn one-hot (`t_max`), last outcome
/// (none / non-empty / empty / error), hop hint (1 / 2 / unknown),
/// row bucket (0 / 1 / 2+, only after a successful query).
pub fn feature_dim(t_max: usize) -> usize {
    1 + t_max + 4 + 3 + 3
}

pub fn featurize(traj: &Trajectory, t_max: usize) -> Vec<f64> {
    let mut phi = vec![0.0; feature_dim(t_max)];
    phi[0] = 1.0;
    phi[1 + traj.steps.len().min(t_max - 1)] = 1.0;
    let outcome = 1 + t_max;
    let hop = outcome + 4;
    let rows = hop + 3;
    match traj.steps.last().and_then(|s| s.observation.as_ref()) {
        None => phi[outcome] = 1.0,
        Some(o) if o.kind == ObservationKind::ExecError => phi[outcome + 3] = 1.0,
        Some(o) => {
            phi[outcome + if o.row_count > 0 { 1 } else { 2 }] = 1.0;
            phi[rows + o.row_count.min(2)] = 1.0;
        }
    }
    match parse_question(&traj.question).map(|q| q.chain.len()) {
        Some(1) => phi[hop] = 1.0,
        Some(2) => phi[hop + 1] = 1.0,
        _ => phi[hop + 2] = 1.0,
    }
    phi
}

fn first_cell(payload: &str) -> Option<String> {
    let cell = payload.lines().nth(1)?.split('\t').next()?;
    (!cell.is_empty() && !cell.starts_with("[truncated")).then(|| cell.to_string())
}

fn probe_query(current: &str, rel: &str) -> String {
    format!("SELECT ?x WHERE {{ {current} toy:{rel} ?x }}")
}

fn reverse_query(current: &str, rel: &str) -> String {
    format!("SELECT ?x WHERE {{ ?x toy:{rel} {current} }}")
}

fn filter_query(candidate: &str, rel: &str) -> String {
    format!("SELECT ?x WHERE {{ ?c toy:{rel} ?x . FILTER(?c = {candidate}) }}")
}

/// Walks the trajectory: forward hops along the question's chain that
/// returned rows advance the current entity.
fn progress(q: &ToyQuestion, traj: &Trajectory) -> (String, usize) {
    let mut current = q.start.clone();
    let mut hop = 0;
    for step in &traj.steps {
        let (Action::Query(text), Some(obs)) = (&step.turn.action, &step.observation) else {
            continue;
        };
        if obs.kind != ObservationKind::Result || obs.row_count == 0 || hop >= q.chain.len() {
            continue;
        }
        let rel = &q.chain[hop];
        if *text == probe_query(&current, rel) || *text == filter_query(&current, rel) {
            if let Some(next) = first_cell(&obs.payload) {
                current = next;
                hop += 1;
            }
        }
    }
    (current, hop)
}

fn last_candidate(traj: &Trajectory) -> Option<String> {
    let obs = traj.steps.last()?.observation.as_ref()?;
    (obs.kind == ObservationKind::Result && obs.row_count > 0)
        .then(|| first_cell(&obs.payload))
        .flatten()
}

/// Fills in a template from the trajectory: entities come from the question,
/// candidates from the last result's first row.
pub fn instantiate(
    template: Template,
    traj: &Trajectory,
    n_entities: usize,
    require_think: bool,
    rng: &mut impl Rng,
) -> String {
    let q = parse_question(&traj.question).unwrap_or(ToyQuestion {
        start: "toy:e0".into(),
        chain: vec!["p1".into()],
    });
    let (current, hop) = progress(&q, traj);
    let rel = &q.chain[hop.min(q.chain.len() - 1)];
    let action = match template {
        Template::ProbeOneHop => format!("<query>{}</query>", probe_query(&current, rel)),
        Template::ProbeReverseHop => format!("<query>{}</query>", reverse_query(&current, rel)),
        Template::FilterCandidates => match last_candidate(traj) {
            Some(c) => format!("<query>{}</query>", filter_query(&c, rel)),
            None => format!(
                "<query>SELECT ?x WHERE {{ ?c toy:{rel} ?x . FILTER(?x = ?candidate) }}</query>"
            ),
        },
        Template::AnswerFromLastResult => format!(
            "<answer>{}</answer>",
            last_candidate(traj).unwrap_or(current)
        ),
        Template::AnswerRandom => {
            format!("<answer>toy:e{}</answer>", rng.random_range(0..n_entities))
        }
        Template::MalformedEmit => {
            return "I believe the answer is in the graph somewhere.".to_string()
        }
    };
    if require_think {
        format!("<think>{}</think>\n{action}", template.think())
    } else {
        action
    }
}

/// Softmax over `θ·φ / temperature`, one row of θ per template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxTemplatePolicy {
    pub theta: Vec<f64>,
    pub t_max: usize,
    pub temperature: f64,
}

const MIN_TEMPERATURE: f64 = 1e-6;

impl SoftmaxTemplatePolicy {
    pub fn zeros(t_max: usize) -> Self {
        Self {
            theta: vec![0.0; N_TEMPLATES * feature_dim(t_max)],
            t_max,
            temperature: 1.0,
        }
    }

    /// Starts with `bias` extra logit on every query template.
    pub fn with_query_prior(t_max: usize, bias: f64) -> Self {
        let mut p = Self::zeros(t_max);
        let dim = feature_dim(t_max);
        for t in Template::ALL.iter().filter(|t| t.is_query()) {
            p.theta[t.index() * dim] = bias;
        }
        p
    }

    pub fn dim(&self) -> usize {
        feature_dim(self.t_max)
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    fn scaled_logits(&self, phi: &[f64]) -> Vec<f64> {
        let tau = self.temperature.max(MIN_TEMPERATURE);
        let d = self.dim();
        (0..N_TEMPLATES)
            .map(|k| {
                self.theta[k * d..(k + 1) * d]
                    .iter()
                    .zip(phi)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
                    / tau
            })
            .collect()
    }

    pub fn log_probs(&self, phi: &[f64]) -> Vec<f64> {
        let z = self.scaled_logits(phi);
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        z.iter().map(|v| v - lse).collect()
    }

    pub fn probs(&self, phi: &[f64]) -> Vec<f64> {
        self.log_probs(phi).into_iter().map(f64::exp).collect()
    }

    /// Log-probability of `template` and its gradient in θ.
    pub fn log_prob(&self, phi: &[f64], template: Template) -> TokenLogprob {
        let lp = self.log_probs(phi);
        let tau = self.temperature.max(MIN_TEMPERATURE);
        let d = self.dim();
        let k = template.index();
        let mut grad = Vec::new();
        for (j, lpj) in lp.iter().enumerate() {
            let coef = (if j == k { 1.0 } else { 0.0 }) - lpj.exp();
            for (f, x) in phi.iter().enumerate() {
                if *x != 0.0 {
                    grad.push((j * d + f, coef * x / tau));
                }
            }
        }
        TokenLogprob { value: lp[k], grad }
    }

    /// Temperature 0 picks the argmax (lowest index on ties).
    pub fn sample(&self, phi: &[f64], rng: &mut impl Rng) -> Template {
        if self.temperature <= 0.0 {
            let z = self.scaled_logits(phi);
            let best = (0..N_TEMPLATES).fold(0, |b, k| if z[k] > z[b] { k } else { b });
            return Template::ALL[best];
        }
        let p = self.probs(phi);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                return Template::ALL[k];
            }
        }
        Template::ALL[N_TEMPLATES - 1]
    }
}

/// A template decision made during an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub features: Vec<f64>,
    pub template: Template,
}

/// Runs a [`SoftmaxTemplatePolicy`] in an episode and records its decisions.
pub struct ToyAgent<'a> {
    pub policy: &'a SoftmaxTemplatePolicy,
    pub n_entities: usize,
    pub require_think: bool,
    pub decisions: Vec<Decision>,
}

impl<'a> ToyAgent<'a> {
    pub fn new(policy: &'a SoftmaxTemplatePolicy, n_entities: usize) -> Self {
        Self {
            policy,
            n_entities,
            require_think: true,
            decisions: Vec::new(),
        }
    }
}

impl Policy for ToyAgent<'_> {
    fn generate(
        &mut self,
        ctx: &PolicyContext<'_>,
        rng: &mut EpisodeRng,
    ) -> Result<String, PolicyError> {
        let features = featurize(ctx.trajectory, self.policy.t_max);
        let template = self.policy.sample(&features, rng);
        let text = instantiate(
            template,
            ctx.trajectory,
            self.n_entities,
            self.require_think,
            rng,
        );
        self.decisions.push(Decision { features, template });
        Ok(text)
    }

    fn supports_sampling(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub world_seed: u64,
    pub n_entities: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub steps: usize,
    pub grpo: GrpoConfig,
    pub reward: RewardConfig,
    pub t_max: usize,
    pub temperature: f64,
    pub prior_query_bias: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rollout threads; 0 uses all cores. Results do not depend on it.
    pub workers: usize,
    /// Replaces every reward with this value (sanity check: no learning).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constant_reward: Option<f64>,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            world_seed: 7,
            n_entities: 40,
            n_tasks: 64,
            seed: 11,
            steps: 200,
            grpo: GrpoConfig {
                learning_rate: 0.05,
                batch_questions: 16,
                ..GrpoConfig::default()
            },
            reward: RewardConfig::default(),
            t_max: 10,
            temperature: 1.0,
            prior_query_bias: 3.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            workers: 0,
            constant_reward: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub mean_reward: f64,
    pub in_batch_accuracy: f64,
    pub executability: f64,
    pub mean_turns: f64,
    pub p_malformed: f64,
}

pub const CURVE_HEADER: [&str; 6] = [
    "step",
    "mean_reward",
    "in_batch_accuracy",
    "executability",
    "mean_turns",
    "p_malformed",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySummary {
    pub steps: usize,
    pub first_window_reward: f64,
    pub final_window_reward: f64,
    pub first_window_turns: f64,
    pub final_window_turns: f64,
    /// First step with executability ≥ 0.9.
    pub exec_reached_step: Option<usize>,
    /// First step with accuracy > 0.6.
    pub accuracy_reached_step: Option<usize>,
    pub final_p_malformed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub curves: Vec<CurvePoint>,
    pub summary: ToySummary,
    pub policy: SoftmaxTemplatePolicy,
}

/// One sampled episode with everything needed for the update.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub task: usize,
    pub trajectory: Trajectory,
    pub stats: EpisodeStats,
    pub decisions: Vec<Decision>,
    pub reward: f64,
    pub correct: bool,
}

pub fn toy_environment(world: &ToyWorld, t_max: usize) -> Environment {
    let mut cfg = EpisodeConfig::new(Executor::Embedded(world.store.clone()));
    cfg.t_max = t_max;
    cfg.system_prompt = String::new();
    Environment::new(cfg)
}

pub fn rollout(
    env: &Environment,
    world: &ToyWorld,
    policy: &SoftmaxTemplatePolicy,
    task: usize,
    seed: u64,
    reward: &RewardConfig,
) -> Rollout {
    let t = &world.tasks[task];
    let mut agent = ToyAgent::new(policy, world.n_entities);
    let (trajectory, stats) = env
        .run_episode(&mut agent, &t.id, &t.question, seed)
        .expect("toy policy never fails");
    let judgment = trajectory
        .final_answer
        .as_ref()
        .map(|a| judge_local(a, &t.gold, &[]));
    let breakdown =
        score(&trajectory, &stats, judgment.as_ref(), reward).expect("judged iff valid");
    Rollout {
        task,
        trajectory,
        stats,
        decisions: agent.decisions,
        reward: breakdown.total,
        correct: judgment.is_some_and(|j| j.correct),
    }
}

/// Builds masked records (one token per span) with per-group advantages.
pub fn toy_records(
    groups: &[Vec<Rollout>],
    cfg: &GrpoConfig,
) -> (Vec<TrainingRecord>, Vec<Vec<Decision>>) {
    let mut records = Vec::new();
    let mut decisions = Vec::new();
    for g in groups {
        let adv = compute_advantages(&g.iter().map(|r| r.reward).collect::<Vec<_>>(), cfg)
            .expect("group size >= 2");
        for (r, a) in g.iter().zip(adv) {
            let (text, spans) = serialize_state(&r.trajectory, "");
            let token_offsets = span_tokens(&spans);
            let loss_mask =
                compute_loss_mask(&spans, &token_offsets).expect("span tokens are in bounds");
            records.push(TrainingRecord {
                schema_version: RECORD_SCHEMA_VERSION,
                prompt_id: r.trajectory.prompt_id.clone(),
                text,
                spans,
                token_offsets,
                loss_mask,
                token_ids: None,
                reward: r.reward,
                advantage: a,
            });
            decisions.push(r.decisions.clone());
        }
    }
    (records, decisions)
}

fn token_logprobs(
    policy: &SoftmaxTemplatePolicy,
    record: &TrainingRecord,
    decisions: &[Decision],
) -> Vec<TokenLogprob> {
    let mut next = decisions.iter();
    let out: Vec<TokenLogprob> = record
        .loss_mask
        .iter()
        .map(|&m| {
            if !m {
                return TokenLogprob::default();
            }
            let d = next.next().expect("one decision per agent token");
            policy.log_prob(&d.features, d.template)
        })
        .collect();
    debug_assert!(next.next().is_none(), "decisions left over");
    out
}

/// The GRPO objective of `policy` on recorded decisions against `reference`.
pub fn toy_objective(
    policy: &SoftmaxTemplatePolicy,
    reference: &SoftmaxTemplatePolicy,
    records: &[TrainingRecord],
    decisions: &[Vec<Decision>],
    cfg: &GrpoConfig,
) -> Objective {
    let lp = |i: usize, r: &TrainingRecord| token_logprobs(policy, r, &decisions[i]);
    let lp_ref = |i: usize, r: &TrainingRecord| {
        token_logprobs(reference, r, &decisions[i])
            .into_iter()
            .map(|t| t.value)
            .collect()
    };
    grpo_objective(records, policy.n_params(), &lp, &lp_ref, cfg)
        .expect("toy records are consistent")
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, cfg: &ToyTrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..theta.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.adam_eps);
        }
    }
}

fn batch_metrics(
    step: usize,
    batch: &[Vec<Rollout>],
    policy: &SoftmaxTemplatePolicy,
) -> CurvePoint {
    let all: Vec<&Rollout> = batch.iter().flatten().collect();
    let n = all.len() as f64;
    let issued: usize = all
        .iter()
        .map(|r| r.stats.n_err + r.stats.n_exec_success)
        .sum();
    let ok: usize = all.iter().map(|r| r.stats.n_exec_success).sum();
    let states: Vec<&Decision> = all.iter().flat_map(|r| &r.decisions).collect();
    let p_malformed = states
        .iter()
        .map(|d| policy.probs(&d.features)[Template::MalformedEmit.index()])
        .sum::<f64>()
        / states.len().max(1) as f64;
    CurvePoint {
        step,
        mean_reward: all.iter().map(|r| r.reward).sum::<f64>() / n,
        in_batch_accuracy: all.iter().filter(|r| r.correct).count() as f64 / n,
        executability: if issued == 0 {
            f64::NAN
        } else {
            ok as f64 / issued as f64
        },
        mean_turns: all.iter().map(|r| r.stats.turns as f64).sum::<f64>() / n,
        p_malformed,
    }
}

/// Rollout → reward → advantage → one Adam step, `steps` times. The curve
/// has `steps + 1` points: the metrics of each batch before its update and a
/// final evaluation batch.
pub fn train_toy(world: &ToyWorld, cfg: &ToyTrainConfig) -> TrainOutput {
    cfg.grpo.validate().expect("valid GRPO configuration");
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .expect("rollout pool");
    let env = toy_environment(world, cfg.t_max);
    let mut policy = SoftmaxTemplatePolicy::with_query_prior(cfg.t_max, cfg.prior_query_bias);
    policy.temperature = cfg.temperature;
    let reference = policy.clone();
    let mut adam = Adam {
        m: vec![0.0; policy.n_params()],
        v: vec![0.0; policy.n_params()],
        t: 0,
    };
    let mut master = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curves = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let jobs: Vec<(usize, Vec<u64>)> = (0..cfg.grpo.batch_questions)
            .map(|_| {
                let task = master.random_range(0..world.tasks.len());
                (
                    task,
                    (0..cfg.grpo.group_size)
                        .map(|_| master.next_u64())
                        .collect(),
                )
            })
            .collect();
        let batch: Vec<Vec<Rollout>> = pool.install(|| {
            jobs.par_iter()
                .map(|(task, seeds)| {
                    seeds
                        .iter()
                        .map(|&s| {
                            let mut r = rollout(&env, world, &policy, *task, s, &cfg.reward);
                            if let Some(c) = cfg.constant_reward {
                                r.reward = c;
                            }
                            r
                        })
                        .collect()
                })
                .collect()
        });
        curves.push(batch_metrics(step, &batch, &policy));
        if step == cfg.steps {
            break;
        }
        let (records, decisions) = toy_records(&batch, &cfg.grpo);
        let obj = toy_objective(&policy, &reference, &records, &decisions, &cfg.grpo);
        adam.step(&mut policy.theta, &obj.grad, cfg.grpo.learning_rate, cfg);
    }
    let summary = summarize(&curves);
    TrainOutput {
        curves,
        summary,
        policy,
    }
}

fn window_mean(points: &[CurvePoint], f: impl Fn(&CurvePoint) -> f64) -> f64 {
    points.iter().map(f).sum::<f64>() / points.len().max(1) as f64
}

pub fn summarize(curves: &[CurvePoint]) -> ToySummary {
    let w = 20.min(curves.len());
    let (first, last) = (&curves[..w], &curves[curves.len() - w..]);
    ToySummary {
        steps: curves.len().saturating_sub(1),
        first_window_reward: window_mean(first, |p| p.mean_reward),
        final_window_reward: window_mean(last, |p| p.mean_reward),
        first_window_turns: window_mean(first, |p| p.mean_turns),
        final_window_turns: window_mean(last, |p| p.mean_turns),
        exec_reached_step: curves
            .iter()
            .find(|p| p.executability >= 0.9)
            .map(|p| p.step),
        accuracy_reached_step: curves
            .iter()
            .find(|p| p.in_batch_accuracy > 0.6)
            .map(|p| p.step),
        final_p_malformed: curves.last().map_or(f64::NAN, |p| p.p_malformed),
    }
}

pub fn write_curves<W: std::io::Write>(out: W, curves: &[CurvePoint]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in curves {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves<R: std::io::Read>(input: R) -> csv::Result<Vec<CurvePoint>> {
    csv::Reader::from_reader(input).deserialize().collect()
}
