mod common;

use std::sync::Arc;
use std::time::Duration;

use kgqa_core::client::{EndpointConfig, ExecutionOutcome, FailureCategory, SparqlClient};
use kgqa_core::sparql::{QueryResult, RdfTerm};

const DIRECTOR: &str = "SELECT ?d WHERE { wd:Q25188 wdt:P57 ?d }";

fn client(url: String, f: impl FnOnce(&mut EndpointConfig)) -> SparqlClient {
    let mut cfg = EndpointConfig::new(url);
    f(&mut cfg);
    SparqlClient::new(cfg).unwrap()
}

fn category(o: &ExecutionOutcome) -> Option<FailureCategory> {
    match o {
        ExecutionOutcome::Failure { category, .. } => Some(*category),
        _ => None,
    }
}

#[test]
fn answers_select_and_ask() {
    let server = common::spawn(common::fixture_store(), 0, vec![]);
    let c = client(server.url(), |_| {});
    let out = c.execute_remote(DIRECTOR);
    let r = out.result().expect("success");
    match r {
        QueryResult::Solutions(s) => assert_eq!(
            s.first_term(),
            Some(&RdfTerm::iri("http://www.wikidata.org/entity/Q25191"))
        ),
        other => panic!("{other:?}"),
    }
    let out = c.execute_remote("ASK { wd:Q90 wdt:P31 wd:Q515 }");
    assert_eq!(out.result(), Some(&QueryResult::Boolean { value: true }));
}

#[test]
fn exhausted_retries_report_last_status() {
    let server = common::spawn(common::fixture_store(), 0, vec![503; 5]);
    let c = client(server.url(), |cfg| {
        cfg.max_retries = 2;
        cfg.backoff_base = Duration::from_millis(10);
    });
    let (out, attempts) = c.execute_counted(DIRECTOR);
    assert_eq!(category(&out), Some(FailureCategory::Http(503)));
    assert_eq!(attempts, 3);
    assert_eq!(server.stats().requests(), 3);
}

#[test]
fn client_errors_are_not_retried() {
    let server = common::spawn(common::fixture_store(), 0, vec![404]);
    let c = client(server.url(), |_| {});
    let (out, attempts) = c.execute_counted(DIRECTOR);
    assert_eq!(category(&out), Some(FailureCategory::Http(404)));
    assert_eq!(attempts, 1);
}

#[test]
fn server_side_parse_error_is_a_syntax_failure() {
    let server = common::spawn(common::fixture_store(), 0, vec![]);
    let c = client(server.url(), |_| {});
    // balanced, so it passes the local precheck and reaches the server
    let (out, attempts) = c.execute_counted("SELECT ?d WHERE { wd:Q25188 wdt:P57 }");
    assert_eq!(category(&out), Some(FailureCategory::Syntax));
    assert_eq!(attempts, 1);
}

#[test]
fn precheck_failure_never_reaches_the_network() {
    let server = common::spawn(common::fixture_store(), 0, vec![]);
    let c = client(server.url(), |_| {});
    let (out, _) = c.cached_execute("SELECT ?d WHERE { wd:Q25188 wdt:P57 ?d");
    assert_eq!(category(&out), Some(FailureCategory::Syntax));
    assert_eq!(server.stats().requests(), 0);
}

#[test]
fn long_queries_are_posted() {
    let server = common::spawn(common::fixture_store(), 0, vec![]);
    let c = client(server.url(), |_| {});
    let padding = " ".repeat(8000);
    let q = format!("SELECT ?d WHERE {{{padding} wd:Q25188 wdt:P57 ?d }}");
    assert!(c.execute_remote(&q).is_success());
}

#[test]
fn transient_failures_are_not_cached() {
    let server = common::spawn(common::fixture_store(), 0, vec![503]);
    let c = client(server.url(), |cfg| cfg.max_retries = 0);
    let (first, _) = c.cached_execute(DIRECTOR);
    assert_eq!(category(&first), Some(FailureCategory::Http(503)));
    let (second, hit) = c.cached_execute(DIRECTOR);
    assert!(second.is_success() && !hit);
    let (_, hit) = c.cached_execute(DIRECTOR);
    assert!(hit);
    assert_eq!(server.stats().requests(), 2);
}

#[test]
fn in_flight_requests_are_capped() {
    let server = common::spawn(common::fixture_store(), 150, vec![]);
    let c = Arc::new(client(server.url(), |cfg| cfg.max_parallel = 2));
    std::thread::scope(|s| {
        for i in 0..6 {
            let c = c.clone();
            s.spawn(move || {
                let q = format!("SELECT ?d WHERE {{ wd:Q25188 wdt:P57 ?d }} LIMIT {}", i + 1);
                assert!(c.execute_remote(&q).is_success());
            });
        }
    });
    assert_eq!(server.stats().requests(), 6);
    assert!(
        server.stats().max_in_flight() <= 2,
        "{}",
        server.stats().max_in_flight()
    );
}

#[test]
fn raw_protocol_get_and_post() {
    let server = common::spawn(common::fixture_store(), 0, vec![]);
    let http = reqwest::blocking::Client::new();
    let r = http
        .get(server.url())
        .query(&[("query", DIRECTOR)])
        .send()
        .unwrap();
    assert!(r.status().is_success());
    assert!(r.headers()["content-type"]
        .to_str()
        .unwrap()
        .starts_with("application/sparql-results+json"));
    let body: serde_json::Value = r.json().unwrap();
    assert_eq!(body["head"]["vars"][0], "d");
    assert_eq!(body["results"]["bindings"][0]["d"]["type"], "uri");

    let r = http
        .post(server.url())
        .header("content-type", "application/sparql-query")
        .body("ASK { wd:Q90 wdt:P31 wd:Q515 }")
        .send()
        .unwrap();
    let body: serde_json::Value = r.json().unwrap();
    assert_eq!(body["boolean"], true);

    let r = http.get(server.url()).send().unwrap();
    assert_eq!(r.status().as_u16(), 400);
}
