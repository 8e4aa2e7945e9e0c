//! Request and response bodies of the HTTP API.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use steexlab_core::dataset::Split;
use steexlab_core::engine::ResultRecord;
use steexlab_core::types::{CounterClass, OptimizerConfig, Profile, RegionTargetSpec};

use crate::error::{ErrorDetail, Result, ServiceError};
use crate::jobs::{JobRecord, JobState, Timings};
use crate::registry::ModelEntry;

pub const API_VERSION: &str = "v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItemRef {
    pub dataset: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PngQuery {
    pub png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuerySource {
    Item(DatasetItemRef),
    Png(PngQuery),
}

/// A semantic class given by 1-based index or by name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegionRef {
    Index(usize),
    Name(String),
}

impl RegionRef {
    pub fn resolve(&self, profile: &Profile) -> Result<u8> {
        let token = match self {
            RegionRef::Index(i) => i.to_string(),
            RegionRef::Name(s) => s.clone(),
        };
        profile.class_id(&token).map_err(|e| ServiceError::BadRequest(format!("invalid target region: {e}")))
    }
}

/// Target regions: `None` frees every class.
pub fn resolve_regions(regions: Option<&[RegionRef]>, profile: &Profile) -> Result<RegionTargetSpec> {
    match regions {
        None => Ok(RegionTargetSpec::all(profile.num_classes)),
        Some(list) => {
            let ids = list.iter().map(|r| r.resolve(profile)).collect::<Result<Vec<u8>>>()?;
            Ok(RegionTargetSpec::new(ids, profile.num_classes)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplainRequest {
    /// Classifier id.
    pub model: String,
    /// Segmenter and autoencoder ids; each defaults to the only registered
    /// model of its kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<String>,
    pub query: QuerySource,
    #[serde(default)]
    pub counter_class: CounterClass,
    #[serde(default)]
    pub target_regions: Option<Vec<RegionRef>>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobAccepted {
    pub job_id: String,
    pub state: JobState,
    pub url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobView {
    pub id: String,
    pub state: JobState,
    pub request: ExplainRequest,
    pub timings: Timings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ResultRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_digest: Option<String>,
    /// Artifact name to URL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorDetail>,
}

impl JobView {
    pub fn new(record: JobRecord, result: Option<ResultRecord>) -> Self {
        let artifacts = result.as_ref().map(|_| {
            crate::jobs::ARTIFACT_NAMES
                .iter()
                .map(|n| (n.to_string(), format!("/api/jobs/{}/artifacts/{n}", record.id)))
                .collect()
        });
        JobView {
            id: record.id,
            state: record.state,
            request: record.request,
            timings: record.timings,
            result,
            result_digest: record.result_digest,
            artifacts,
            error: record.error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelList {
    pub models: Vec<ModelEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterModel {
    pub id: String,
    pub kind: steexlab_core::checkpoint::ModelKind,
    pub checkpoint: std::path::PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRef {
    pub id: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetItemView {
    pub dataset: String,
    pub index: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_name: Option<String>,
    pub class_names: Vec<String>,
    pub present_classes: Vec<ClassRef>,
    pub image_png_base64: String,
    /// Mask PNG whose grey level is the class index.
    pub mask_png_base64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaIndex {
    pub version: String,
    pub schemas: BTreeMap<String, serde_json::Value>,
}
