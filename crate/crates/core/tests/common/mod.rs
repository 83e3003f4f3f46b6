#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use kgqa_core::endpoint::{serve, ServerConfig, ServerHandle};
use kgqa_core::sparql::{
    EqualityFilter, PatternTerm, PrefixMap, QueryForm, QueryResult, RdfTerm, Solutions,
    SubsetQuery, Triple, TriplePattern, TripleStore, XSD,
};
use rand::seq::IndexedRandom;
use rand::Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn fixture_store() -> Arc<TripleStore> {
    let text = std::fs::read_to_string(fixture("films.nt")).unwrap();
    Arc::new(kgqa_core::sparql::load_ntriples(&text, PrefixMap::standard()).unwrap())
}

pub fn spawn(store: Arc<TripleStore>, latency_ms: u64, fail_pattern: Vec<u16>) -> ServerHandle {
    let cfg = ServerConfig {
        artificial_latency: (latency_ms > 0).then(|| std::time::Duration::from_millis(latency_ms)),
        fail_pattern,
        ..ServerConfig::local()
    };
    serve(store, cfg).expect("server starts")
}

const ENTITIES: usize = 8;
const PREDICATES: usize = 3;

fn entity(i: usize) -> RdfTerm {
    RdfTerm::iri(format!("http://example.org/e{i}"))
}

fn predicate(i: usize) -> String {
    format!("http://example.org/p{i}")
}

fn object<R: Rng>(rng: &mut R) -> RdfTerm {
    match rng.random_range(0..10) {
        0 => RdfTerm::literal(format!("v{}", rng.random_range(0..3))),
        1 => RdfTerm::typed_literal(rng.random_range(0..3).to_string(), format!("{XSD}integer")),
        _ => entity(rng.random_range(0..ENTITIES)),
    }
}

/// A random store of at most 50 triples over a small vocabulary, so random
/// queries have a fair chance of matching.
pub fn random_store<R: Rng>(rng: &mut R) -> TripleStore {
    let n = rng.random_range(0..=50);
    let triples: Vec<Triple> = (0..n)
        .map(|_| Triple {
            subject: entity(rng.random_range(0..ENTITIES)),
            predicate: predicate(rng.random_range(0..PREDICATES)),
            object: object(rng),
        })
        .collect();
    TripleStore::from_triples(triples, PrefixMap::standard())
}

const VARS: [&str; 4] = ["a", "b", "c", "d"];

fn pattern_term<R: Rng>(rng: &mut R, constant: impl FnOnce(&mut R) -> RdfTerm) -> PatternTerm {
    if rng.random_bool(0.55) {
        PatternTerm::Var(VARS.choose(rng).unwrap().to_string())
    } else {
        PatternTerm::Term(constant(rng))
    }
}

/// A random well-formed subset query with 1 to 3 patterns.
pub fn random_query<R: Rng>(rng: &mut R) -> SubsetQuery {
    loop {
        let n = rng.random_range(1..=3);
        let patterns: Vec<TriplePattern> = (0..n)
            .map(|_| TriplePattern {
                subject: pattern_term(rng, |r| entity(r.random_range(0..ENTITIES))),
                predicate: pattern_term(rng, |r| {
                    RdfTerm::iri(predicate(r.random_range(0..PREDICATES)))
                }),
                object: pattern_term(rng, object),
            })
            .collect();
        let vars: Vec<String> = patterns
            .iter()
            .flat_map(|p| p.positions())
            .filter_map(|t| t.var().map(str::to_string))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if vars.is_empty() && rng.random_bool(0.7) {
            continue;
        }
        let mut filters = Vec::new();
        if !vars.is_empty() && rng.random_bool(0.3) {
            filters.push(EqualityFilter {
                var: vars.choose(rng).unwrap().clone(),
                value: object(rng),
            });
        }
        let form = if vars.is_empty() || rng.random_bool(0.15) {
            QueryForm::Ask
        } else {
            let k = rng.random_range(1..=vars.len());
            let mut picked: Vec<String> = vars.choose_multiple(rng, k).cloned().collect();
            picked.sort();
            QueryForm::Select {
                vars: picked,
                distinct: rng.random_bool(0.3),
            }
        };
        let limit = (matches!(form, QueryForm::Select { .. }) && rng.random_bool(0.25))
            .then(|| rng.random_range(1..=4));
        return SubsetQuery {
            form,
            patterns,
            filters,
            limit,
        };
    }
}

/// Reference semantics: try every assignment of every pattern variable to
/// every term of the store (plus filter constants), keep the assignments
/// under which all patterns are store triples and all filters hold.
pub fn brute_force(query: &SubsetQuery, store: &TripleStore) -> QueryResult {
    let vars: Vec<&str> = query.pattern_vars().into_iter().collect();
    let mut domain: BTreeSet<RdfTerm> = BTreeSet::new();
    for t in store.triples() {
        domain.insert(t.subject.clone());
        domain.insert(RdfTerm::iri(t.predicate.clone()));
        domain.insert(t.object.clone());
    }
    for f in &query.filters {
        domain.insert(f.value.clone());
    }
    let domain: Vec<RdfTerm> = domain.into_iter().collect();
    let preds: Vec<RdfTerm> = store
        .triples()
        .iter()
        .map(|t| RdfTerm::iri(t.predicate.clone()))
        .collect();
    let facts: std::collections::HashSet<(&RdfTerm, &RdfTerm, &RdfTerm)> = store
        .triples()
        .iter()
        .zip(&preds)
        .map(|(t, p)| (&t.subject, p, &t.object))
        .collect();
    let slot_of = |v: &str| vars.iter().position(|x| *x == v).unwrap();

    let mut matches: Vec<Vec<RdfTerm>> = Vec::new();
    let mut idx = vec![0usize; vars.len()];
    let total = domain.len().pow(vars.len() as u32);
    for _ in 0..total {
        let ok = query.patterns.iter().all(|p| {
            let r = |t| bound(t, &domain, &idx, &vars);
            facts.contains(&(r(&p.subject), r(&p.predicate), r(&p.object)))
        }) && query
            .filters
            .iter()
            .all(|f| domain[idx[slot_of(&f.var)]] == f.value);
        if ok {
            matches.push(idx.iter().map(|&i| domain[i].clone()).collect());
        }
        for slot in idx.iter_mut() {
            *slot += 1;
            if *slot < domain.len() {
                break;
            }
            *slot = 0;
        }
    }

    match &query.form {
        QueryForm::Ask => QueryResult::Boolean {
            value: !matches.is_empty(),
        },
        QueryForm::Select {
            vars: proj,
            distinct,
        } => {
            let mut rows: Vec<Vec<RdfTerm>> = matches
                .iter()
                .map(|a| {
                    proj.iter()
                        .map(|v| a[vars.iter().position(|x| x == v).unwrap()].clone())
                        .collect()
                })
                .collect();
            let key = |r: &Vec<RdfTerm>| r.iter().map(RdfTerm::to_ntriples).collect::<Vec<_>>();
            rows.sort_by_key(key);
            if *distinct {
                rows.dedup();
            }
            if let Some(n) = query.limit {
                rows.truncate(n);
            }
            QueryResult::Solutions(Solutions {
                vars: proj.clone(),
                rows: rows
                    .into_iter()
                    .map(|r| r.into_iter().map(Some).collect())
                    .collect(),
            })
        }
    }
}

fn bound<'a>(
    t: &'a PatternTerm,
    domain: &'a [RdfTerm],
    idx: &[usize],
    vars: &[&str],
) -> &'a RdfTerm {
    match t {
        PatternTerm::Term(c) => c,
        PatternTerm::Var(v) => &domain[idx[vars.iter().position(|x| x == v).unwrap()]],
    }
}
