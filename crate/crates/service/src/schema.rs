//! JSON schemas of every response body, shipped under `schemas/v1`.

use std::collections::BTreeMap;

pub const BASE_URI: &str = "https://steexlab.invalid/schemas/v1/";

pub const SCHEMAS: [(&str, &str); 9] = [
    ("common", include_str!("../schemas/v1/common.json")),
    ("error", include_str!("../schemas/v1/error.json")),
    ("job_accepted", include_str!("../schemas/v1/job_accepted.json")),
    ("job", include_str!("../schemas/v1/job.json")),
    ("result", include_str!("../schemas/v1/result.json")),
    ("model", include_str!("../schemas/v1/model.json")),
    ("model_list", include_str!("../schemas/v1/model_list.json")),
    ("dataset_item", include_str!("../schemas/v1/dataset_item.json")),
    ("schema_index", include_str!("../schemas/v1/schema_index.json")),
];

/// Every schema by name.
pub fn all() -> BTreeMap<String, serde_json::Value> {
    SCHEMAS
        .iter()
        .map(|(name, text)| (name.to_string(), serde_json::from_str(text).expect("shipped schemas are valid JSON")))
        .collect()
}
