mod common;

use axum::http::StatusCode;
use serde_json::{json, Value};
use steexlab_core::engine::result_digest;
use steexlab_service::api::ExplainRequest;
use steexlab_service::jobs::{JobState, JobStore};
use steexlab_service::pipeline::{execute, prepare, ModelCache};
use steexlab_service::registry::Registry;
use steexlab_service::server::{router, AppState};
use steexlab_service::ServiceError;

use common::{call, wait_job, DATASET};

fn request(index: usize, seed: u64, regions: Option<Vec<&str>>) -> Value {
    json!({
        "model": "clf1",
        "query": { "dataset": DATASET, "index": index },
        "target_regions": regions,
        "optimizer": { "lambda": 0.3, "learning_rate": 0.02, "num_steps": 15, "seed": seed }
    })
}

async fn submit(app: &axum::Router, body: &Value) -> String {
    let r = call(app, "POST", "/api/jobs/explain", Some(body)).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", r.json());
    r.json()["job_id"].as_str().unwrap().to_string()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_jobs_match_serial_runs() {
    let h = common::home();
    let app = router(AppState::open(h.path(), 4).unwrap());
    let region_sets = [None, Some(vec!["light"]), Some(vec!["obstacle", "road"]), Some(vec!["sky", "sign", "tree"])];
    let bodies: Vec<Value> = (0..20).map(|k| request(40 + k % 20, k as u64, region_sets[k % 4].clone())).collect();
    let handles: Vec<_> = bodies
        .iter()
        .cloned()
        .map(|b| {
            let app = app.clone();
            tokio::spawn(async move {
                let id = submit(&app, &b).await;
                wait_job(&app, &id).await.json()
            })
        })
        .collect();
    let mut views = Vec::new();
    for h in handles {
        views.push(h.await.unwrap());
    }

    let registry = Registry::open(h.path()).unwrap();
    let cache = ModelCache::default();
    for (body, view) in bodies.iter().zip(&views) {
        assert_eq!(view["state"], "done", "{view}");
        let req: ExplainRequest = serde_json::from_value(body.clone()).unwrap();
        let serial = execute(&prepare(h.path(), &registry, &cache, &req).unwrap()).unwrap();
        let norms: Vec<f64> = serde_json::from_value(view["result"]["delta_norms"].clone()).unwrap();
        assert_eq!(norms, serial.delta_norms, "request {body}");
        assert_eq!(view["result_digest"].as_str().unwrap(), result_digest(&serial));
    }
    let mut ids: Vec<&str> = views.iter().map(|v| v["id"].as_str().unwrap()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 20);
}

fn stored_request() -> ExplainRequest {
    serde_json::from_value(request(45, 1, Some(vec!["light", "obstacle"]))).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn finished_jobs_survive_a_restart_unchanged() {
    let h = common::home();
    let before = {
        let app = router(AppState::open(h.path(), 1).unwrap());
        let id = submit(&app, &request(45, 1, None)).await;
        wait_job(&app, &id).await.json()
    };
    let app = router(AppState::open(h.path(), 1).unwrap());
    let id = before["id"].as_str().unwrap();
    let after = call(&app, "GET", &format!("/api/jobs/{id}"), None).await;
    assert_eq!(after.status, StatusCode::OK);
    assert_eq!(after.json(), before);
    // numbering continues after the restart
    let next = submit(&app, &request(46, 1, None)).await;
    assert_eq!(next, "job-000002");
    wait_job(&app, &next).await;
}

#[tokio::test(flavor = "multi_thread")]
async fn queued_and_interrupted_jobs_resume_after_a_restart() {
    let h = common::home();
    {
        let store = JobStore::open(h.path()).unwrap();
        store.create(stored_request()).unwrap();
        let interrupted = store.create(stored_request()).unwrap();
        store.start(&interrupted.id).unwrap();
        // a partial result left behind by the interrupted attempt
        std::fs::create_dir_all(store.result_dir(&interrupted.id)).unwrap();
        std::fs::write(store.result_dir(&interrupted.id).join("query.png"), b"partial").unwrap();
    }
    let reopened = JobStore::open(h.path()).unwrap();
    assert_eq!(reopened.queued(), vec!["job-000001".to_string(), "job-000002".to_string()]);
    drop(reopened);

    let state = AppState::open(h.path(), 2).unwrap();
    state.resume_queued();
    let app = router(state);
    let a = wait_job(&app, "job-000001").await.json();
    let b = wait_job(&app, "job-000002").await.json();
    assert_eq!(a["state"], "done");
    assert_eq!(b["state"], "done");
    assert_eq!(a["result_digest"], b["result_digest"]);
}

#[test]
fn terminal_states_are_immutable() {
    let h = common::home();
    let store = JobStore::open(h.path()).unwrap();
    let r = store.create(stored_request()).unwrap();
    store.start(&r.id).unwrap();
    let done = store.finish(&r.id, Ok("d".repeat(64))).unwrap();
    assert_eq!(done.state, JobState::Done);
    assert!(matches!(store.start(&r.id), Err(ServiceError::Conflict(_))));
    assert!(matches!(store.finish(&r.id, Ok(String::new())), Err(ServiceError::Conflict(_))));
    let reopened = JobStore::open(h.path()).unwrap();
    assert_eq!(reopened.get(&r.id).unwrap(), done);
    assert!(matches!(reopened.start("job-424242"), Err(ServiceError::NotFound(_))));
}
