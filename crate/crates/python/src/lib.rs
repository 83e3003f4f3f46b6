//! Python bindings: the triple store, the episode environment, reward and
//! GRPO arithmetic, evaluation statistics and the synthetic training task.
//!
//! Structured values cross the boundary as plain dicts and lists (built from
//! their JSON form), so the Python side needs no extra classes to read them.

use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use kgqa_core::environment::{Environment as CoreEnv, EpisodeConfig, EpisodeStats, Executor};
use kgqa_core::grpo::{compute_advantages as core_advantages, GrpoConfig};
use kgqa_core::protocol::{
    compute_loss_mask, parse_agent_output as core_parse, serialize_state, Trajectory,
};
use kgqa_core::reward::{score, Judge, RewardConfig};
use kgqa_core::sparql::{load_ntriples, query_store, PrefixMap, RdfTerm, TripleStore};
use kgqa_core::toy::{generate_world, train_toy as core_train_toy, ToyTrainConfig};

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// In-memory RDF graph queried with the supported SPARQL subset.
#[pyclass(name = "TripleStore", frozen)]
struct PyTripleStore {
    inner: Arc<TripleStore>,
}

#[pymethods]
impl PyTripleStore {
    #[staticmethod]
    fn from_ntriples(text: &str) -> PyResult<Self> {
        let store = load_ntriples(text, PrefixMap::standard()).map_err(value_err)?;
        Ok(Self {
            inner: Arc::new(store),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Runs a query; raises ValueError on a syntax error.
    fn query<'py>(&self, py: Python<'py>, sparql: &str) -> PyResult<Bound<'py, PyAny>> {
        let result = query_store(sparql, &self.inner).map_err(value_err)?;
        to_py(py, &result)
    }

    fn to_ntriples(&self) -> String {
        self.inner.to_ntriples()
    }
}

/// One episode in progress. Feed raw agent replies to `step`.
#[pyclass(name = "Episode")]
struct PyEpisode {
    env: Arc<CoreEnv>,
    traj: Trajectory,
}

#[pymethods]
impl PyEpisode {
    /// Returns True once the episode has terminated.
    fn step(&mut self, raw: &str) -> PyResult<bool> {
        self.env
            .step(&mut self.traj, raw)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn done(&self) -> bool {
        self.traj.is_done()
    }

    #[getter]
    fn final_answer(&self) -> Option<String> {
        self.traj.final_answer.clone()
    }

    /// The text a policy would be conditioned on for its next turn.
    fn state_text(&self) -> String {
        self.env.state_text(&self.traj)
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &EpisodeStats::of(&self.traj))
    }

    fn trajectory<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.traj)
    }

    /// Per-token loss mask for the serialized transcript under the given
    /// character offsets: True only for tokens made entirely of agent text.
    #[pyo3(signature = (token_offsets, system_prompt = ""))]
    fn loss_mask(
        &self,
        token_offsets: Vec<(usize, usize)>,
        system_prompt: &str,
    ) -> PyResult<Vec<bool>> {
        let (_, spans) = serialize_state(&self.traj, system_prompt);
        compute_loss_mask(&spans, &token_offsets).map_err(value_err)
    }

    fn serialize(&self, system_prompt: &str) -> String {
        serialize_state(&self.traj, system_prompt).0
    }

    /// Judges the answer against `gold` (an IRI, or a literal if not an IRI)
    /// and returns the reward breakdown.
    #[pyo3(signature = (gold = None, aliases = Vec::new()))]
    fn reward<'py>(
        &self,
        py: Python<'py>,
        gold: Option<&str>,
        aliases: Vec<String>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let stats = EpisodeStats::of(&self.traj);
        let judgment = match (&self.traj.final_answer, gold) {
            (Some(answer), Some(g)) => {
                Some(Judge::local().judge(&self.traj.question, answer, &gold_term(g), &aliases))
            }
            _ => None,
        };
        let r = score(
            &self.traj,
            &stats,
            judgment.as_ref(),
            &RewardConfig::default(),
        )
        .map_err(value_err)?;
        to_py(py, &r)
    }
}

fn gold_term(g: &str) -> RdfTerm {
    if let Some(iri) = g.strip_prefix('<').and_then(|s| s.strip_suffix('>')) {
        return RdfTerm::iri(iri);
    }
    match PrefixMap::standard().expand(g) {
        Some(iri) if !g.contains(' ') => RdfTerm::iri(iri),
        _ => RdfTerm::literal(g),
    }
}

/// Episode factory bound to a store.
#[pyclass(name = "Environment", frozen)]
struct PyEnvironment {
    inner: Arc<CoreEnv>,
}

#[pymethods]
impl PyEnvironment {
    #[new]
    #[pyo3(signature = (store, t_max = 10, require_think = true))]
    fn new(store: &PyTripleStore, t_max: usize, require_think: bool) -> PyResult<Self> {
        if t_max == 0 {
            return Err(PyValueError::new_err("t_max must be at least 1"));
        }
        let mut cfg = EpisodeConfig::new(Executor::Embedded(store.inner.clone()));
        cfg.t_max = t_max;
        cfg.require_think = require_think;
        Ok(Self {
            inner: Arc::new(CoreEnv::new(cfg)),
        })
    }

    #[pyo3(signature = (question, prompt_id = "q0"))]
    fn episode(&self, question: &str, prompt_id: &str) -> PyEpisode {
        PyEpisode {
            env: self.inner.clone(),
            traj: Trajectory::new(prompt_id, question),
        }
    }
}

/// Parses one agent reply into a dict with `think` and `action`; raises
/// ValueError with the malformation reason otherwise.
#[pyfunction]
#[pyo3(signature = (raw, require_think = true))]
fn parse_agent_output<'py>(
    py: Python<'py>,
    raw: &str,
    require_think: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let turn = core_parse(raw, require_think).map_err(value_err)?;
    to_py(py, &turn)
}

/// Reward of a structurally valid trajectory.
#[pyfunction]
fn valid_reward(correct: bool, n_err: usize, turns: usize) -> f64 {
    kgqa_core::reward::valid_reward(correct, n_err, turns, &RewardConfig::default()).total
}

#[pyfunction]
#[pyo3(signature = (rewards, normalize_by_std = true))]
fn compute_advantages(rewards: Vec<f64>, normalize_by_std: bool) -> PyResult<Vec<f64>> {
    let cfg = GrpoConfig {
        normalize_by_std,
        ..GrpoConfig::default()
    };
    core_advantages(&rewards, &cfg).map_err(value_err)
}

/// Continuity-corrected McNemar statistic and p-value, or None without
/// discordant pairs.
#[pyfunction]
fn mcnemar(n01: u64, n10: u64) -> Option<(f64, f64)> {
    kgqa_core::eval::mcnemar(n01, n10).map(|c| (c, kgqa_core::eval::chi2_p_value(c)))
}

/// Builds the synthetic graph; returns the store and its task list.
#[pyfunction]
#[pyo3(signature = (seed = 7, n_entities = 40, n_tasks = 64))]
fn toy_world<'py>(
    py: Python<'py>,
    seed: u64,
    n_entities: usize,
    n_tasks: usize,
) -> PyResult<(PyTripleStore, Bound<'py, PyAny>)> {
    if n_entities < 10 {
        return Err(PyValueError::new_err("n_entities must be at least 10"));
    }
    let world = generate_world(seed, n_entities, n_tasks);
    let tasks = to_py(py, &world.tasks)?;
    Ok((PyTripleStore { inner: world.store }, tasks))
}

/// Trains the template policy; returns (curves, summary).
#[pyfunction]
#[pyo3(signature = (steps = 200, seed = 11, world_seed = 7, normalize_by_std = true))]
fn train_toy<'py>(
    py: Python<'py>,
    steps: usize,
    seed: u64,
    world_seed: u64,
    normalize_by_std: bool,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let d = ToyTrainConfig::default();
    let cfg = ToyTrainConfig {
        steps,
        seed,
        world_seed,
        grpo: GrpoConfig {
            normalize_by_std,
            ..d.grpo
        },
        ..d
    };
    let out = py.detach(|| {
        let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
        core_train_toy(&world, &cfg)
    });
    Ok((to_py(py, &out.curves)?, to_py(py, &out.summary)?))
}

#[pymodule]
fn kgqa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTripleStore>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyEpisode>()?;
    m.add_function(wrap_pyfunction!(parse_agent_output, m)?)?;
    m.add_function(wrap_pyfunction!(valid_reward, m)?)?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(mcnemar, m)?)?;
    m.add_function(wrap_pyfunction!(toy_world, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    Ok(())
}
