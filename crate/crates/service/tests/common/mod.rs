//! A small trained home directory shared by the service tests: one
//! dataset, a segmenter, an autoencoder and a classifier, each trained for
//! a single epoch and registered under relative checkpoint paths.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use steexlab_core::autoencoder::{train_autoencoder, train_segmenter, AutoencoderTrainConfig, SegmenterTrainConfig};
use steexlab_core::checkpoint::ModelKind;
use steexlab_core::dataset::build_dataset;
use steexlab_core::decision::{train_classifier, ClassifierTrainConfig};
use steexlab_core::pngio;
use steexlab_core::synth::desk_profile;
use steexlab_core::train::{Schedule, TrainControl};
use steexlab_service::registry::Registry;
use steexlab_service::schema::{BASE_URI, SCHEMAS};
use tempfile::TempDir;
use tower::ServiceExt;

pub const DATASET: &str = "tiny";

fn one_epoch(batch_size: usize) -> Schedule {
    Schedule { epochs: 1, batch_size, learning_rate: 3e-3, final_lr_fraction: 1.0 }
}

fn control(dir: &Path) -> TrainControl<'_> {
    TrainControl { checkpoint_dir: Some(dir), stop_after_epochs: None }
}

fn build_template(home: &Path) {
    let ds = build_dataset(60, 3, &desk_profile(), &home.join("datasets").join(DATASET)).unwrap();
    let models = home.join("models");
    let seg = SegmenterTrainConfig { schedule: one_epoch(8), ..Default::default() };
    train_segmenter(&ds, &seg, control(&models.join("seg"))).unwrap();
    let ae = AutoencoderTrainConfig { schedule: one_epoch(8), ..Default::default() };
    train_autoencoder(&ds, &ae, control(&models.join("ae"))).unwrap();
    let clf = ClassifierTrainConfig { schedule: one_epoch(8), ..Default::default() };
    train_classifier(&ds, &clf, control(&models.join("clf"))).unwrap();
    let registry = Registry::open(home).unwrap();
    registry.register("seg", ModelKind::Segmenter, Path::new("models/seg")).unwrap();
    registry.register("ae", ModelKind::Autoencoder, Path::new("models/ae")).unwrap();
    registry.register("clf1", ModelKind::Classifier, Path::new("models/clf")).unwrap();
    let val = ds.val();
    pngio::write_image(&home.join("q.png"), &val[0].image).unwrap();
}

fn template() -> &'static Path {
    static T: OnceLock<TempDir> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        build_template(dir.path());
        dir
    })
    .path()
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            std::fs::copy(e.path(), &target).unwrap();
        }
    }
}

/// A private copy of the trained home directory.
pub fn home() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(template(), dir.path());
    dir
}

pub fn query_png(home: &Path) -> PathBuf {
    home.join("q.png")
}

pub struct Reply {
    pub status: StatusCode,
    pub content_type: String,
    pub bytes: Vec<u8>,
}

impl Reply {
    pub fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("body is not JSON ({e}): {:?}", String::from_utf8_lossy(&self.bytes)))
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<&Value>) -> Reply {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(v) => req.body(Body::from(serde_json::to_vec(v).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let content_type = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, content_type, bytes }
}

/// Polls a job until it reaches a terminal state.
pub async fn wait_job(app: &Router, id: &str) -> Reply {
    let start = Instant::now();
    loop {
        let r = call(app, "GET", &format!("/api/jobs/{id}"), None).await;
        let state = r.json()["state"].as_str().unwrap().to_string();
        if state == "done" || state == "failed" {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(300), "job {id} still {state}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

/// Validator for one of the shipped schemas, with the others resolvable.
pub fn validator(name: &str) -> jsonschema::Validator {
    let mut opts = jsonschema::options();
    let mut root = None;
    for (n, text) in SCHEMAS {
        let v: Value = serde_json::from_str(text).unwrap();
        if n == name {
            root = Some(v.clone());
        }
        opts = opts.with_resource(format!("{BASE_URI}{n}.json"), jsonschema::Resource::from_contents(v).unwrap());
    }
    opts.build(&root.unwrap_or_else(|| panic!("no schema {name}"))).unwrap()
}

pub fn assert_valid(name: &str, body: &Value) {
    let v = validator(name);
    let errors: Vec<String> = v.iter_errors(body).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{name} schema violations: {errors:#?}\nbody: {body}");
}
