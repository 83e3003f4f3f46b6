//! SPARQL-protocol client with memoization, retry/backoff and per-attempt timeouts.

use std::fmt;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use lru::LruCache;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::{duration_ms, run_with_retries, Attempt, RetryPolicy, Semaphore};
use crate::sparql::json::{self, MEDIA_TYPE};
use crate::sparql::{lexical_precheck, QueryResult};

/// Queries longer than this are sent as a POST form instead of a GET parameter.
const MAX_GET_QUERY_BYTES: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(with = "duration_ms")]
    pub timeout: Duration,
    pub max_retries: u32,
    #[serde(with = "duration_ms")]
    pub backoff_base: Duration,
    pub backoff_factor: f64,
    pub cache_capacity: usize,
    pub max_parallel: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            timeout: Duration::from_secs(3),
            max_retries: 3,
            backoff_base: Duration::from_millis(250),
            backoff_factor: 2.0,
            cache_capacity: 10_000,
            max_parallel: 8,
        }
    }
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            ..Self::default()
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            backoff_base: self.backoff_base,
            backoff_factor: self.backoff_factor,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.timeout.is_zero() {
            return Err(ClientError::Config("timeout must be positive".into()));
        }
        if !(self.backoff_factor.is_finite() && self.backoff_factor >= 1.0) {
            return Err(ClientError::Config("backoff_factor must be >= 1".into()));
        }
        if self.max_parallel == 0 {
            return Err(ClientError::Config("max_parallel must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid endpoint configuration: {0}")]
    Config(String),
    #[error("could not build HTTP client: {0}")]
    Build(#[from] reqwest::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "status", rename_all = "snake_case")]
pub enum FailureCategory {
    Syntax,
    Timeout,
    Http(u16),
    Transport,
}

impl fmt::Display for FailureCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FailureCategory::Syntax => f.write_str("syntax"),
            FailureCategory::Timeout => f.write_str("timeout"),
            FailureCategory::Http(status) => write!(f, "http {status}"),
            FailureCategory::Transport => f.write_str("transport"),
        }
    }
}

/// The result of executing one query. A success with zero rows is still a success.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ExecutionOutcome {
    Success {
        result: QueryResult,
        #[serde(with = "duration_ms", rename = "elapsed_ms")]
        elapsed: Duration,
    },
    Failure {
        category: FailureCategory,
        message: String,
    },
}

impl ExecutionOutcome {
    pub fn failure(category: FailureCategory, message: impl Into<String>) -> Self {
        ExecutionOutcome::Failure {
            category,
            message: message.into(),
        }
    }

    pub fn is_success(&self) -> bool {
        matches!(self, ExecutionOutcome::Success { .. })
    }

    pub fn result(&self) -> Option<&QueryResult> {
        match self {
            ExecutionOutcome::Success { result, .. } => Some(result),
            ExecutionOutcome::Failure { .. } => None,
        }
    }

    /// Whether the outcome can be memoized: successes and deterministic syntax failures.
    fn is_cacheable(&self) -> bool {
        matches!(
            self,
            ExecutionOutcome::Success { .. }
                | ExecutionOutcome::Failure {
                    category: FailureCategory::Syntax,
                    ..
                }
        )
    }
}

/// Collapses whitespace runs outside quoted literals to a single space and trims.
pub fn normalize_query(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut quote: Option<char> = None;
    let mut escaped = false;
    let mut pending_space = false;
    for c in text.chars() {
        if let Some(q) = quote {
            out.push(c);
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == q {
                quote = None;
            }
            continue;
        }
        if c.is_whitespace() {
            pending_space = true;
            continue;
        }
        if pending_space && !out.is_empty() {
            out.push(' ');
        }
        pending_space = false;
        if c == '"' || c == '\'' {
            quote = Some(c);
        }
        out.push(c);
    }
    out
}

/// LRU memo of outcomes keyed by normalized query text. Capacity 0 disables caching.
#[derive(Debug)]
pub struct QueryCache {
    inner: Option<Mutex<LruCache<String, ExecutionOutcome>>>,
}

impl QueryCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: NonZeroUsize::new(capacity).map(|c| Mutex::new(LruCache::new(c))),
        }
    }

    pub fn get(&self, key: &str) -> Option<ExecutionOutcome> {
        self.inner.as_ref()?.lock().unwrap().get(key).cloned()
    }

    pub fn put(&self, key: String, outcome: ExecutionOutcome) {
        if let Some(inner) = &self.inner {
            inner.lock().unwrap().put(key, outcome);
        }
    }

    pub fn len(&self) -> usize {
        self.inner.as_ref().map_or(0, |m| m.lock().unwrap().len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Blocking SPARQL-protocol client, shareable across rollout threads.
#[derive(Debug)]
pub struct SparqlClient {
    cfg: EndpointConfig,
    http: reqwest::blocking::Client,
    cache: QueryCache,
    permits: Semaphore,
    requests_sent: AtomicU64,
}

impl SparqlClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, ClientError> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .user_agent(concat!("kgqa/", env!("CARGO_PKG_VERSION")))
            .build()?;
        Ok(Self {
            cache: QueryCache::new(cfg.cache_capacity),
            permits: Semaphore::new(cfg.max_parallel),
            requests_sent: AtomicU64::new(0),
            http,
            cfg,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &QueryCache {
        &self.cache
    }

    /// Number of HTTP requests issued so far, including retries.
    pub fn requests_sent(&self) -> u64 {
        self.requests_sent.load(Ordering::Relaxed)
    }

    /// Sends the query without consulting the cache. A query failing the
    /// lexical precheck is a syntax failure and never reaches the network.
    pub fn execute_remote(&self, query: &str) -> ExecutionOutcome {
        self.execute_counted(query).0
    }

    /// Like [`execute_remote`](Self::execute_remote), also returning the number of attempts made.
    pub fn execute_counted(&self, query: &str) -> (ExecutionOutcome, u32) {
        if let Err(e) = lexical_precheck(query) {
            return (
                ExecutionOutcome::failure(FailureCategory::Syntax, e.to_string()),
                0,
            );
        }
        run_with_retries(&self.cfg.retry_policy(), |_| {
            let outcome = self.attempt(query);
            match &outcome {
                ExecutionOutcome::Failure {
                    category: FailureCategory::Transport,
                    ..
                } => Attempt::Retry(outcome),
                ExecutionOutcome::Failure {
                    category: FailureCategory::Http(s),
                    ..
                } if *s >= 500 => Attempt::Retry(outcome),
                _ => Attempt::Done(outcome),
            }
        })
    }

    /// Memoized execution; returns the outcome and whether it came from the cache.
    pub fn cached_execute(&self, query: &str) -> (ExecutionOutcome, bool) {
        let key = normalize_query(query);
        if let Some(hit) = self.cache.get(&key) {
            return (hit, true);
        }
        let outcome = self.execute_remote(query);
        if outcome.is_cacheable() {
            self.cache.put(key, outcome.clone());
        }
        (outcome, false)
    }

    fn attempt(&self, query: &str) -> ExecutionOutcome {
        let _permit = self.permits.acquire();
        self.requests_sent.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let request = if query.len() <= MAX_GET_QUERY_BYTES {
            self.http.get(&self.cfg.url).query(&[("query", query)])
        } else {
            self.http.post(&self.cfg.url).form(&[("query", query)])
        };
        let response = request.header(reqwest::header::ACCEPT, MEDIA_TYPE).send();
        let response = match response {
            Ok(r) => r,
            Err(e) => return self.classify_error(e),
        };
        let status = response.status();
        let body = match response.bytes() {
            Ok(b) => b,
            Err(e) => return self.classify_error(e),
        };
        if status.as_u16() == 400 {
            let message = String::from_utf8_lossy(&body).trim().to_string();
            return ExecutionOutcome::failure(FailureCategory::Syntax, message);
        }
        if !status.is_success() {
            let reason = status.canonical_reason().unwrap_or("error");
            return ExecutionOutcome::failure(FailureCategory::Http(status.as_u16()), reason);
        }
        match json::from_json(&body) {
            Ok(result) => ExecutionOutcome::Success {
                result,
                elapsed: started.elapsed(),
            },
            Err(e) => ExecutionOutcome::failure(FailureCategory::Transport, e.to_string()),
        }
    }

    fn classify_error(&self, e: reqwest::Error) -> ExecutionOutcome {
        if e.is_timeout() {
            ExecutionOutcome::failure(
                FailureCategory::Timeout,
                format!("query exceeded {}", format_duration(self.cfg.timeout)),
            )
        } else {
            ExecutionOutcome::failure(FailureCategory::Transport, e.to_string())
        }
    }
}

pub(crate) fn format_duration(d: Duration) -> String {
    if d.subsec_nanos() == 0 {
        format!("{}s", d.as_secs())
    } else {
        format!("{}ms", d.as_millis())
    }
}
