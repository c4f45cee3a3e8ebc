//! Logit margins, certified radii and dataset certification.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LipError, Result};
use crate::linop::{PowerIterConfig, Vector};
use crate::liplt::{pairwise_lipschitz, BoundMethod, BoundReport, PairwiseMode};
use crate::netgraph::{argmax, Dataset, ResidualChain};

/// Temperature used for reported soft radii.
pub const DEFAULT_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginInfo {
    pub logits: Vec<f64>,
    pub label: usize,
    pub margin: f64,
    pub correct: bool,
}

impl MarginInfo {
    pub fn new(z: &Vector, y: usize) -> Result<Self> {
        let margin = logit_margin(z, y)?;
        Ok(MarginInfo { logits: z.iter().copied().collect(), label: y, margin, correct: margin > 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertRecord {
    pub index: usize,
    pub label: usize,
    pub prediction: usize,
    pub margin: f64,
    pub radius_lower: f64,
    pub soft_radius: f64,
    pub verified: bool,
    /// Exact logit tie between the label and another class.
    pub on_boundary: bool,
}

fn check_label(k: usize, y: usize) -> Result<()> {
    if k < 2 {
        return Err(LipError::InvalidArgument(format!("need at least 2 logits, got {k}")));
    }
    if y >= k {
        return Err(LipError::InvalidArgument(format!("label {y} out of range for {k} classes")));
    }
    Ok(())
}

/// `z_y − max_{j≠y} z_j`.
pub fn logit_margin(z: &Vector, y: usize) -> Result<f64> {
    check_label(z.len(), y)?;
    let runner_up = z.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    Ok(z[y] - runner_up)
}

/// `t⁻¹ log Σ exp(t x_i)`, evaluated with the max subtracted.
pub fn lse_scaled(x: &[f64], t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(LipError::InvalidArgument(format!("temperature must be > 0, got {t}")));
    }
    if x.is_empty() {
        return Err(LipError::InvalidArgument("log-sum-exp of an empty vector".into()));
    }
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m.is_infinite() {
        return Ok(m);
    }
    let s: f64 = x.iter().map(|&v| (t * (v - m)).exp()).sum();
    Ok(m + s.ln() / t)
}

fn check_row(k: usize, y: usize, lip_row: &[f64]) -> Result<()> {
    if lip_row.len() != k {
        return Err(LipError::DimensionMismatch(format!(
            "pairwise row has {} entries for {k} classes",
            lip_row.len()
        )));
    }
    for (i, &l) in lip_row.iter().enumerate() {
        if i != y && !(l > 0.0) {
            return Err(LipError::InvalidArgument(format!("L_{y}{i} = {l} must be > 0")));
        }
    }
    Ok(())
}

/// Normalised gaps `(z_y − z_i) / L_yi` for `i ≠ y`.
pub fn normalized_gaps(z: &Vector, y: usize, lip_row: &[f64]) -> Result<Vec<f64>> {
    check_label(z.len(), y)?;
    check_row(z.len(), y, lip_row)?;
    Ok((0..z.len()).filter(|&i| i != y).map(|i| (z[y] - z[i]) / lip_row[i]).collect())
}

/// `min_{i≠y} (z_y − z_i) / L_yi`, or 0 when the margin is not positive.
pub fn certified_radius(z: &Vector, y: usize, lip_row: &[f64]) -> Result<f64> {
    let gaps = normalized_gaps(z, y, lip_row)?;
    let r = gaps.into_iter().fold(f64::INFINITY, f64::min);
    Ok(if r > 0.0 { r } else { 0.0 })
}

/// `−t⁻¹ log Σ_{i≠y} exp(−t (z_y − z_i) / L_yi)`.
pub fn soft_certified_radius(z: &Vector, y: usize, lip_row: &[f64], t: f64) -> Result<f64> {
    let neg: Vec<f64> = normalized_gaps(z, y, lip_row)?.into_iter().map(|g| -g).collect();
    Ok(-lse_scaled(&neg, t)?)
}

/// Certifies one sample against a precomputed pairwise report.
pub fn certify_sample(
    z: &Vector,
    y: usize,
    index: usize,
    report: &BoundReport,
    eps: f64,
    t: f64,
) -> Result<CertRecord> {
    let row = report.row(y);
    let margin = logit_margin(z, y)?;
    let radius_lower = certified_radius(z, y, row)?;
    let soft_radius = soft_certified_radius(z, y, row, t)?;
    Ok(CertRecord {
        index,
        label: y,
        prediction: argmax(z),
        margin,
        radius_lower,
        soft_radius,
        verified: margin > 0.0 && radius_lower > eps,
        on_boundary: margin == 0.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadiusQuantiles {
    pub p5: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertSummary {
    pub n: usize,
    pub eps: f64,
    pub temperature: f64,
    pub clean_acc: f64,
    pub cert_acc: f64,
    /// Mean `R̲` over all samples (misclassified count as 0).
    pub mean_radius: f64,
    /// Quantiles of `R̲` over correctly classified samples.
    pub quantiles: Option<RadiusQuantiles>,
    pub on_boundary: usize,
}

#[derive(Debug, Clone)]
pub struct CertifyOutput {
    pub report: BoundReport,
    pub records: Vec<CertRecord>,
    pub summary: CertSummary,
}

/// Linear-interpolated quantile of sorted data, `q ∈ [0, 1]`.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize(records: &[CertRecord], eps: f64, t: f64) -> CertSummary {
    let n = records.len();
    let correct: Vec<&CertRecord> = records.iter().filter(|r| r.margin > 0.0).collect();
    let verified = records.iter().filter(|r| r.radius_lower > eps && r.margin > 0.0).count();
    let mut radii: Vec<f64> = correct.iter().map(|r| r.radius_lower).collect();
    radii.sort_by(f64::total_cmp);
    let quantiles = (!radii.is_empty()).then(|| RadiusQuantiles {
        p5: quantile(&radii, 0.05),
        p25: quantile(&radii, 0.25),
        p50: quantile(&radii, 0.50),
        p75: quantile(&radii, 0.75),
        p95: quantile(&radii, 0.95),
    });
    let denom = n.max(1) as f64;
    CertSummary {
        n,
        eps,
        temperature: t,
        clean_acc: correct.len() as f64 / denom,
        cert_acc: verified as f64 / denom,
        mean_radius: records.iter().map(|r| r.radius_lower).sum::<f64>() / denom,
        quantiles,
        on_boundary: records.iter().filter(|r| r.on_boundary).count(),
    }
}

/// Certified accuracy at `eps` from existing records.
pub fn certified_accuracy(records: &[CertRecord], eps: f64) -> f64 {
    summarize(records, eps, DEFAULT_TEMPERATURE).cert_acc
}

/// Computes one pairwise report, then certifies every sample.
pub fn certify_dataset(
    chain: &ResidualChain,
    data: &Dataset,
    eps: f64,
    t: f64,
    mode: PairwiseMode,
    method: &BoundMethod,
    cfg: &PowerIterConfig,
) -> Result<CertifyOutput> {
    if !(eps >= 0.0) {
        return Err(LipError::InvalidArgument(format!("eps must be >= 0, got {eps}")));
    }
    if data.input_dim() != chain.input_dim() || data.num_classes != chain.num_classes {
        return Err(LipError::DimensionMismatch(format!(
            "dataset ({} inputs, {} classes) does not match model ({} inputs, {} classes)",
            data.input_dim(),
            data.num_classes,
            chain.input_dim(),
            chain.num_classes
        )));
    }
    let report = pairwise_lipschitz(chain, mode, method, cfg)?;
    let records = certify_with_report(chain, data, &report, eps, t)?;
    let summary = summarize(&records, eps, t);
    Ok(CertifyOutput { report, records, summary })
}

pub fn certify_with_report(
    chain: &ResidualChain,
    data: &Dataset,
    report: &BoundReport,
    eps: f64,
    t: f64,
) -> Result<Vec<CertRecord>> {
    data.inputs
        .par_iter()
        .zip(data.labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| certify_sample(&chain.forward(x), y, i, report, eps, t))
        .collect()
}

pub const CSV_HEADER: &str = "index,label,pred,margin,radius_lower,soft_radius,verified";

pub fn records_to_csv(records: &[CertRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.index,
            r.label,
            r.prediction,
            r.margin,
            r.radius_lower,
            r.soft_radius,
            r.verified as u8
        ));
    }
    out
}
