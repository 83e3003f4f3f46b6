mod common;

use std::sync::Arc;

use kgqa_core::client::{EndpointConfig, SparqlClient};
use kgqa_core::curation::{
    curate_all, curate_dataset, read_curated, read_raw_records, summarize, DropReason, Split,
};
use kgqa_core::environment::Executor;
use kgqa_core::sparql::{query_store, QueryResult, RdfTerm};

fn fixture_records() -> Vec<kgqa_core::curation::RawRecord> {
    let input = std::fs::read(common::fixture("curation_input.jsonl")).unwrap();
    read_raw_records(&input[..], Split::Test).unwrap()
}

#[test]
fn kept_answers_reexecute_to_the_same_single_row() {
    let store = common::fixture_store();
    let mut out = Vec::new();
    curate_dataset(
        &fixture_records(),
        &Executor::Embedded(store.clone()),
        2,
        &mut out,
    )
    .unwrap();
    let kept = read_curated(&out[..]).unwrap();
    assert_eq!(
        kept.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(),
        ["c1", "c2"]
    );
    for r in &kept {
        let again = match query_store(&r.gold_query, &store).unwrap() {
            QueryResult::Boolean { value } => RdfTerm::Boolean { value },
            QueryResult::Solutions(s) => {
                assert_eq!(s.len(), 1);
                s.first_term().unwrap().clone()
            }
        };
        assert_eq!(again, r.answer);
    }
}

#[test]
fn per_split_counts_and_reasons() {
    let records = fixture_records();
    let verdicts = curate_all(&records, &Executor::Embedded(common::fixture_store()), 1);
    let reasons: Vec<&str> = verdicts.iter().map(|v| v.reason.name()).collect();
    assert_eq!(
        reasons,
        [
            "Kept",
            "Kept",
            "NotSingleRow",
            "NotSingleRow",
            "ExecFailed",
            "InvalidTerm"
        ]
    );
    assert!(matches!(
        verdicts[2].reason,
        DropReason::NotSingleRow { rows: 3 }
    ));
    let s = summarize(&records, &verdicts);
    assert_eq!(s.per_split[&Split::Train].input, 3);
    assert_eq!(s.per_split[&Split::Train].kept, 1);
    assert_eq!(s.per_split[&Split::Test].kept, 1);
    assert!(s.rerunnable.is_empty(), "syntax errors are not transient");
}

#[test]
fn unreachable_endpoint_marks_records_rerunnable() {
    let mut cfg = EndpointConfig::new("http://127.0.0.1:9/sparql");
    cfg.max_retries = 0;
    let executor = Executor::Remote(Arc::new(SparqlClient::new(cfg).unwrap()));
    let records = fixture_records();
    let verdicts = curate_all(&records, &executor, 2);
    let s = summarize(&records, &verdicts);
    // c5 fails the local precheck before any connection is attempted
    assert_eq!(s.rerunnable, ["c1", "c2", "c3", "c4", "c6"]);
    assert_eq!(s.kept, 0);
}

#[test]
fn remote_and_embedded_curation_agree() {
    let store = common::fixture_store();
    let server = common::spawn(store.clone(), 0, vec![]);
    let remote = Executor::Remote(Arc::new(
        SparqlClient::new(EndpointConfig::new(server.url())).unwrap(),
    ));
    let records = fixture_records();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let sa = curate_dataset(&records, &Executor::Embedded(store), 3, &mut a).unwrap();
    let sb = curate_dataset(&records, &remote, 3, &mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(sa.dropped, sb.dropped);
}

#[test]
fn lcquad_field_names_and_line_numbered_errors() {
    let input = br#"{"uid": 19719, "NNQT_question": "What is {capital} of France?", "question": null, "sparql_wikidata": "SELECT ?c WHERE { wd:Q142 wdt:P36 ?c }"}
"#;
    let recs = read_raw_records(&input[..], Split::Train).unwrap();
    assert_eq!(recs[0].id, "19719");
    assert_eq!(recs[0].question, "What is {capital} of France?");
    assert_eq!(recs[0].split, Split::Train);

    let bad = b"{\"id\":\"a\",\"question\":\"q\",\"gold_query\":\"ASK {}\"}\n\nnot json\n";
    let err = read_raw_records(&bad[..], Split::Test).unwrap_err();
    assert!(err.to_string().contains("line 3"), "{err}");
}
