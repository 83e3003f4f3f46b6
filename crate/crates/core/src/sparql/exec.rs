use std::collections::HashMap;

use super::parser::{PatternTerm, QueryForm, SubsetQuery, TriplePattern};
use super::store::TripleStore;
use super::term::{QueryResult, RdfTerm, Solutions};

/// Evaluates a parsed query against the store.
///
/// Rows are ordered lexicographically by the N-Triples rendering of the
/// projected cells, then clipped to LIMIT.
pub fn execute_subset(query: &SubsetQuery, store: &TripleStore) -> QueryResult {
    let var_ids: HashMap<&str, usize> = query
        .pattern_vars()
        .into_iter()
        .enumerate()
        .map(|(i, v)| (v, i))
        .collect();
    let mut seed = vec![None; var_ids.len()];
    // FILTER(?x = t) under term equality is the same as pre-binding ?x to t
    for f in &query.filters {
        let id = var_ids[f.var.as_str()];
        match &seed[id] {
            Some(existing) if existing != &f.value => return empty_result(query),
            _ => seed[id] = Some(f.value.clone()),
        }
    }

    let order = join_order(&query.patterns, &var_ids, &seed);
    let mut solutions = Vec::new();
    let stop_at_first = matches!(query.form, QueryForm::Ask);
    search(
        store,
        &order,
        &var_ids,
        &mut seed,
        &mut solutions,
        stop_at_first,
    );

    match &query.form {
        QueryForm::Ask => QueryResult::Boolean {
            value: !solutions.is_empty(),
        },
        QueryForm::Select { vars, distinct } => {
            let ids: Vec<usize> = vars.iter().map(|v| var_ids[v.as_str()]).collect();
            let mut rows: Vec<(Vec<String>, Vec<Option<RdfTerm>>)> = solutions
                .into_iter()
                .map(|binding| {
                    let row: Vec<Option<RdfTerm>> =
                        ids.iter().map(|&i| binding[i].clone()).collect();
                    let key = row
                        .iter()
                        .map(|t| t.as_ref().map(RdfTerm::to_ntriples).unwrap_or_default())
                        .collect();
                    (key, row)
                })
                .collect();
            rows.sort_by(|a, b| a.0.cmp(&b.0));
            if *distinct {
                rows.dedup_by(|a, b| a.0 == b.0);
            }
            if let Some(limit) = query.limit {
                rows.truncate(limit);
            }
            QueryResult::Solutions(Solutions {
                vars: vars.clone(),
                rows: rows.into_iter().map(|(_, row)| row).collect(),
            })
        }
    }
}

fn empty_result(query: &SubsetQuery) -> QueryResult {
    match &query.form {
        QueryForm::Ask => QueryResult::Boolean { value: false },
        QueryForm::Select { vars, .. } => QueryResult::Solutions(Solutions {
            vars: vars.clone(),
            rows: Vec::new(),
        }),
    }
}

/// Greedy ordering: repeatedly take the pattern with the most positions bound
/// by constants or by variables bound earlier.
fn join_order<'q>(
    patterns: &'q [TriplePattern],
    var_ids: &HashMap<&str, usize>,
    seed: &[Option<RdfTerm>],
) -> Vec<&'q TriplePattern> {
    let mut bound: Vec<bool> = seed.iter().map(Option::is_some).collect();
    let mut remaining: Vec<&TriplePattern> = patterns.iter().collect();
    let mut order = Vec::with_capacity(patterns.len());
    while !remaining.is_empty() {
        let score = |p: &TriplePattern| {
            p.positions()
                .iter()
                .filter(|t| match t {
                    PatternTerm::Term(_) => true,
                    PatternTerm::Var(v) => bound[var_ids[v.as_str()]],
                })
                .count()
        };
        let best = (0..remaining.len())
            .max_by_key(|&i| (score(remaining[i]), usize::MAX - i))
            .unwrap();
        let p = remaining.remove(best);
        for v in p.positions().iter().filter_map(|t| t.var()) {
            bound[var_ids[v]] = true;
        }
        order.push(p);
    }
    order
}

fn search(
    store: &TripleStore,
    order: &[&TriplePattern],
    var_ids: &HashMap<&str, usize>,
    binding: &mut Vec<Option<RdfTerm>>,
    out: &mut Vec<Vec<Option<RdfTerm>>>,
    stop_at_first: bool,
) -> bool {
    let Some((pattern, rest)) = order.split_first() else {
        out.push(binding.clone());
        return stop_at_first;
    };
    let resolve = |t: &PatternTerm, binding: &[Option<RdfTerm>]| -> Option<RdfTerm> {
        match t {
            PatternTerm::Term(term) => Some(term.clone()),
            PatternTerm::Var(v) => binding[var_ids[v.as_str()]].clone(),
        }
    };
    let s = resolve(&pattern.subject, binding);
    let p = resolve(&pattern.predicate, binding);
    let o = resolve(&pattern.object, binding);
    let p_iri = match &p {
        Some(RdfTerm::Iri { value }) => Some(value.as_str()),
        Some(_) => return false,
        None => None,
    };
    for triple in store.candidates(s.as_ref(), p_iri, o.as_ref()) {
        let pred = RdfTerm::iri(triple.predicate.clone());
        let values = [&triple.subject, &pred, &triple.object];
        let mut newly_bound = Vec::new();
        let mut ok = true;
        for (slot, value) in pattern.positions().into_iter().zip(values) {
            match slot {
                PatternTerm::Term(term) => {
                    if term != value {
                        ok = false;
                        break;
                    }
                }
                PatternTerm::Var(v) => {
                    let id = var_ids[v.as_str()];
                    match &binding[id] {
                        Some(existing) if existing != value => {
                            ok = false;
                            break;
                        }
                        Some(_) => {}
                        None => {
                            binding[id] = Some(value.clone());
                            newly_bound.push(id);
                        }
                    }
                }
            }
        }
        if ok && search(store, rest, var_ids, binding, out, stop_at_first) {
            for id in newly_bound {
                binding[id] = None;
            }
            return true;
        }
        for id in newly_bound {
            binding[id] = None;
        }
    }
    false
}
