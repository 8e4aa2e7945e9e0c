use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::proxies::{AttributeOracle, IdentityEmbedder};
use super::IDENTITY_THRESHOLD;
use crate::error::{Error, Result};
use crate::types::{CounterfactualResult, ImageTensor};

pub const FID_MIN_SAMPLES: usize = 50;
pub const FID_REGULARIZATION: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub name: String,
    pub value: f64,
    pub count: usize,
    pub config_fingerprint: String,
    /// File holding the per-item values, relative to the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl MetricReport {
    pub fn new(name: &str, value: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Precondition(format!("{name}: no samples")));
        }
        if !value.is_finite() {
            return Err(Error::Precondition(format!("{name}: non-finite value {value}")));
        }
        Ok(MetricReport {
            name: name.into(),
            value,
            count,
            config_fingerprint: String::new(),
            breakdown: None,
            flags: Vec::new(),
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: &str) -> Self {
        self.config_fingerprint = fingerprint.into();
        self
    }

    pub fn with_breakdown(mut self, file: &str) -> Self {
        self.breakdown = Some(file.into());
        self
    }
}

/// sha256 of the JSON form of a configuration.
pub fn fingerprint<T: Serialize>(config: &T) -> String {
    let bytes = serde_json::to_vec(config).expect("configuration serializes");
    hex::encode(Sha256::digest(bytes))
}

pub fn success_rate(results: &[CounterfactualResult]) -> Result<MetricReport> {
    let hits = results.iter().filter(|r| r.success).count();
    MetricReport::new("success_rate", hits as f64 / results.len().max(1) as f64, results.len())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrechetDistance {
    pub value: f64,
    /// Set when a covariance was singular and `1e-6·I` was added.
    pub regularized: bool,
}

fn gaussian_fit(features: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let d = features[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0).max(1.0);
    (mean, cov)
}

/// Symmetric PSD square root with negative eigenvalues clipped at zero.
fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((m + m.transpose()) * 0.5).eigenvalues.min()
}

/// `|μ1-μ2|² + tr(Σ1 + Σ2 - 2 (Σ1^½ Σ2 Σ1^½)^½)` over two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetDistance> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Precondition("Fréchet distance needs at least two samples per set".into()));
    }
    if a[0].len() != b[0].len() || a.iter().chain(b).any(|v| v.len() != a[0].len()) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let (m1, mut s1) = gaussian_fit(a);
    let (m2, mut s2) = gaussian_fit(b);
    let regularized = min_eigenvalue(&s1) <= 1e-12 || min_eigenvalue(&s2) <= 1e-12;
    if regularized {
        let eye = DMatrix::<f64>::identity(s1.nrows(), s1.ncols()) * FID_REGULARIZATION;
        s1 += &eye;
        s2 += &eye;
    }
    Ok(FrechetDistance { value: frechet_from_moments(&m1, &s1, &m2, &s2), regularized })
}

pub fn frechet_from_moments(m1: &DVector<f64>, s1: &DMatrix<f64>, m2: &DVector<f64>, s2: &DMatrix<f64>) -> f64 {
    let r1 = psd_sqrt(s1);
    let inner = psd_sqrt(&(&r1 * s2 * &r1));
    let value = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * inner.trace();
    value.max(0.0)
}

/// Fréchet distance in the oracle's feature space. Not comparable with
/// Inception-based FID values.
pub fn desk_fid(extractor: &AttributeOracle, explanations: &[&ImageTensor], references: &[&ImageTensor]) -> Result<MetricReport> {
    if explanations.len() < FID_MIN_SAMPLES || references.len() < FID_MIN_SAMPLES {
        return Err(Error::Precondition(format!(
            "desk-FID needs at least {FID_MIN_SAMPLES} images per set, got {} and {}",
            explanations.len(),
            references.len()
        )));
    }
    let fd = frechet_distance(&extractor.features(explanations), &extractor.features(references))?;
    let mut report = MetricReport::new("desk_fid", fd.value, explanations.len())?;
    if fd.regularized {
        report.flags.push("covariance regularized".into());
    }
    Ok(report)
}

pub fn cosine_similarities(embedder: &IdentityEmbedder, pairs: &[(&ImageTensor, &ImageTensor)]) -> Vec<f64> {
    let a = embedder.embed_batch(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = embedder.embed_batch(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    a.iter().zip(&b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u * v).sum()).collect()
}

/// Fraction of pairs whose identity embeddings have cosine similarity
/// above 0.5.
pub fn identity_preservation(
    embedder: Option<&IdentityEmbedder>,
    pairs: &[(&ImageTensor, &ImageTensor)],
) -> Result<MetricReport> {
    let embedder = embedder.ok_or_else(|| Error::Config("identity preservation needs a trained embedder".into()))?;
    let sims = cosine_similarities(embedder, pairs);
    let kept = sims.iter().filter(|&&s| s > IDENTITY_THRESHOLD).count();
    MetricReport::new("identity_preservation", kept as f64 / pairs.len().max(1) as f64, pairs.len())
}

pub fn hamming(a: &[bool], b: &[bool]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn attribute_changes(oracle: &AttributeOracle, pairs: &[(&ImageTensor, &ImageTensor)]) -> Vec<usize> {
    let a = oracle.attributes(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = oracle.attributes(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    a.iter().zip(&b).map(|(x, y)| hamming(x, y)).collect()
}

/// Mean number of thresholded oracle attributes that differ within a pair.
pub fn attributes_changed(oracle: Option<&AttributeOracle>, pairs: &[(&ImageTensor, &ImageTensor)]) -> Result<MetricReport> {
    let oracle = oracle.ok_or_else(|| Error::Config("attribute changes need a trained oracle".into()))?;
    let changes = attribute_changes(oracle, pairs);
    let mean = changes.iter().sum::<usize>() as f64 / pairs.len().max(1) as f64;
    MetricReport::new("attributes_changed", mean, pairs.len())
}

/// (query, counterfactual) pairs of a result set.
pub fn query_pairs(results: &[CounterfactualResult]) -> Vec<(&ImageTensor, &ImageTensor)> {
    results.iter().map(|r| (&r.query_image, &r.counterfactual_image)).collect()
}

/// (query, reconstruction) pairs of a result set.
pub fn reconstruction_pairs(results: &[CounterfactualResult]) -> Vec<(&ImageTensor, &ImageTensor)> {
    results.iter().map(|r| (&r.query_image, &r.reconstruction_image)).collect()
}
