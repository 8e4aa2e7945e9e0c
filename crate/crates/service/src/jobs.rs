//! Persistent job store: one `<home>/jobs/<id>/job.json` per job, with the
//! result directory next to it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use steexlab_core::engine::{
    COUNTERFACTUAL_PNG, MASK_PNG, QUERY_PNG, RECONSTRUCTION_PNG, RESULT_JSON, TRAJECTORY_CSV,
};

use crate::api::ExplainRequest;
use crate::error::{ErrorDetail, Result, ServiceError};
use crate::{read_json, write_json_atomic};

pub const JOB_FILE: &str = "job.json";
pub const RESULT_DIR: &str = "result";
pub const ARTIFACT_NAMES: [&str; 6] =
    [RESULT_JSON, QUERY_PNG, COUNTERFACTUAL_PNG, RECONSTRUCTION_PNG, MASK_PNG, TRAJECTORY_CSV];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobState {
    pub fn is_terminal(self) -> bool {
        matches!(self, JobState::Done | JobState::Failed)
    }
}

/// Unix milliseconds.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Timings {
    pub submitted_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_ms: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobRecord {
    pub id: String,
    pub state: JobState,
    pub request: ExplainRequest,
    pub timings: Timings,
    /// Relative to the job directory; set once the job is done.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorDetail>,
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Inner {
    records: BTreeMap<String, JobRecord>,
    next: u64,
}

pub struct JobStore {
    dir: PathBuf,
    inner: Mutex<Inner>,
}

fn job_number(id: &str) -> Option<u64> {
    id.strip_prefix("job-")?.parse().ok()
}

impl JobStore {
    /// Loads every persisted job. Jobs that were running when the previous
    /// process stopped go back to the queue.
    pub fn open(home: &Path) -> Result<Self> {
        let dir = home.join("jobs");
        fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
        let mut records = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| ServiceError::io(&dir, e))? {
            let path = entry.map_err(|e| ServiceError::io(&dir, e))?.path().join(JOB_FILE);
            if !path.exists() {
                continue;
            }
            let mut r: JobRecord = read_json(&path)?;
            if r.state == JobState::Running {
                r.state = JobState::Queued;
                r.timings.started_ms = None;
                write_json_atomic(&path, &r)?;
            }
            records.insert(r.id.clone(), r);
        }
        let next = records.keys().filter_map(|k| job_number(k)).max().unwrap_or(0) + 1;
        Ok(JobStore { dir, inner: Mutex::new(Inner { records, next }) })
    }

    pub fn job_dir(&self, id: &str) -> PathBuf {
        self.dir.join(id)
    }

    pub fn result_dir(&self, id: &str) -> PathBuf {
        self.job_dir(id).join(RESULT_DIR)
    }

    fn persist(&self, r: &JobRecord) -> Result<()> {
        let d = self.job_dir(&r.id);
        fs::create_dir_all(&d).map_err(|e| ServiceError::io(&d, e))?;
        write_json_atomic(&d.join(JOB_FILE), r)
    }

    pub fn create(&self, request: ExplainRequest) -> Result<JobRecord> {
        let mut inner = self.inner.lock().expect("job store poisoned");
        let id = format!("job-{:06}", inner.next);
        let r = JobRecord {
            id: id.clone(),
            state: JobState::Queued,
            request,
            timings: Timings { submitted_ms: now_ms(), ..Timings::default() },
            result_path: None,
            result_digest: None,
            error: None,
        };
        self.persist(&r)?;
        inner.next += 1;
        inner.records.insert(id, r.clone());
        Ok(r)
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.inner.lock().expect("job store poisoned").records.get(id).cloned()
    }

    /// Ids of queued jobs, oldest first.
    pub fn queued(&self) -> Vec<String> {
        let inner = self.inner.lock().expect("job store poisoned");
        inner.records.values().filter(|r| r.state == JobState::Queued).map(|r| r.id.clone()).collect()
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut JobRecord)) -> Result<JobRecord> {
        let mut inner = self.inner.lock().expect("job store poisoned");
        let current = inner.records.get(id).ok_or_else(|| ServiceError::NotFound(format!("no job {id:?}")))?;
        if current.state.is_terminal() {
            return Err(ServiceError::Conflict(format!("job {id} is already {:?}", current.state)));
        }
        let mut next = current.clone();
        f(&mut next);
        self.persist(&next)?;
        inner.records.insert(id.into(), next.clone());
        Ok(next)
    }

    pub fn start(&self, id: &str) -> Result<JobRecord> {
        self.update(id, |r| {
            r.state = JobState::Running;
            r.timings.started_ms = Some(now_ms());
        })
    }

    pub fn finish(&self, id: &str, outcome: std::result::Result<String, ErrorDetail>) -> Result<JobRecord> {
        self.update(id, |r| {
            r.timings.finished_ms = Some(now_ms());
            match outcome {
                Ok(digest) => {
                    r.state = JobState::Done;
                    r.result_path = Some(RESULT_DIR.into());
                    r.result_digest = Some(digest);
                }
                Err(e) => {
                    r.state = JobState::Failed;
                    r.error = Some(e);
                }
            }
        })
    }
}
