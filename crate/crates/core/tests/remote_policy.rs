//! Episodes driven by a fake text-generation service.

mod common;

use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use kgqa_core::environment::{Environment, EpisodeConfig, Executor};
use kgqa_core::generation::{GenerationClient, GenerationConfig};
use kgqa_core::policy::{DecodingParams, RemotePolicy};
use kgqa_core::protocol::Termination;
use kgqa_core::reward::{Judge, RemoteJudge};
use kgqa_core::sparql::RdfTerm;
use serde_json::{json, Value};

#[derive(Clone, Default)]
struct Fake {
    replies: Arc<Mutex<Vec<Value>>>,
    seen: Arc<Mutex<Vec<Value>>>,
    fail_first: Arc<Mutex<u32>>,
}

async fn complete(State(f): State<Fake>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    f.seen.lock().unwrap().push(body);
    {
        let mut fails = f.fail_first.lock().unwrap();
        if *fails > 0 {
            *fails -= 1;
            return (StatusCode::SERVICE_UNAVAILABLE, Json(json!({})));
        }
    }
    let reply = f.replies.lock().unwrap().remove(0);
    (StatusCode::OK, Json(reply))
}

/// Serves the fake on a background runtime; returns its URL.
fn start(fake: Fake) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            let app = Router::new()
                .route("/generate", post(complete))
                .with_state(fake);
            axum::serve(listener, app).await.unwrap();
        });
    });
    format!("http://{}/generate", rx.recv().unwrap())
}

fn client(url: String) -> GenerationClient {
    let mut cfg = GenerationConfig::new(url);
    cfg.retry.backoff_base = std::time::Duration::from_millis(5);
    GenerationClient::new(cfg).unwrap()
}

#[test]
fn remote_policy_runs_an_episode() {
    let fake = Fake::default();
    // the service strips the stop sequence, in both reply shapes it may use
    *fake.replies.lock().unwrap() = vec![
        json!({"choices": [{"message": {"content": "<think>look up</think><query>SELECT ?d WHERE { wd:Q25188 wdt:P57 ?d }"}}]}),
        json!({"text": "<think>found</think><answer>wd:Q25191"}),
    ];
    *fake.fail_first.lock().unwrap() = 1;
    let url = start(fake.clone());

    let params = DecodingParams {
        temperature: 0.7,
        top_p: 0.9,
        max_new_tokens: 64,
    };
    let mut policy = RemotePolicy::new(client(url), "SYS", params);
    let env = Environment::new(EpisodeConfig::new(Executor::Embedded(
        common::fixture_store(),
    )));
    let (t, stats) = env
        .run_episode(&mut policy, "q1", "Who directed Inception?", 42)
        .unwrap();
    assert_eq!(t.termination, Some(Termination::Answered));
    assert_eq!(t.final_answer.as_deref(), Some("wd:Q25191"));
    assert_eq!(stats.turns, 2);

    let seen = fake.seen.lock().unwrap();
    assert_eq!(seen.len(), 3, "one retried 503 plus two turns");
    let last = &seen[2];
    assert_eq!(last["temperature"], 0.7);
    assert_eq!(last["top_p"], 0.9);
    assert_eq!(last["max_tokens"], 64);
    assert_eq!(last["stop"], json!(["</query>", "</answer>"]));
    assert_eq!(last["messages"][0]["content"], "SYS");
    let user = last["messages"][1]["content"].as_str().unwrap();
    assert!(user.starts_with("Question: Who directed Inception?"));
    assert!(
        user.contains("<query_result>"),
        "second turn sees the observation"
    );
}

#[test]
fn remote_judge_parses_verdicts() {
    let fake = Fake::default();
    *fake.replies.lock().unwrap() = vec![
        json!({"text": "The answer names the director.\nVERDICT: yes"}),
        json!({"text": "no idea"}),
    ];
    let judge = Judge::Remote(RemoteJudge::new(client(start(fake.clone())), "remote-test"));
    let gold = RdfTerm::iri("http://www.wikidata.org/entity/Q25191");
    let j = judge.judge("Who directed Inception?", "Christopher Nolan", &gold, &[]);
    assert!(j.correct);
    assert_eq!(j.judge_id, "remote-test");
    let j = judge.judge("Who directed Inception?", "Someone", &gold, &[]);
    assert!(!j.correct);
    assert_eq!(j.justification, "unparseable");

    let seen = fake.seen.lock().unwrap();
    let prompt = seen[0].to_string();
    assert!(
        prompt.contains("wd:Q25191"),
        "gold rendered for the judge: {prompt}"
    );
}
