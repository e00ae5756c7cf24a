//! Quantitative evaluation against simulator ground truth.

use ndarray::{ArrayViewD, Axis};
use serde::Serialize;
use thiserror::Error;

use crate::model::{BraggMapStack, HyperVolume};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("truth volume is all zero; NRMSE undefined")]
    ZeroTruth,
}

/// Normalized root-mean-square error `||recon - truth||_2 / ||truth||_2`.
pub fn nrmse(recon: &ArrayViewD<f32>, truth: &ArrayViewD<f32>) -> Result<f64, MetricsError> {
    if recon.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            recon.shape(),
            truth.shape()
        )));
    }
    let mut err2 = 0.0f64;
    let mut ref2 = 0.0f64;
    for (&r, &t) in recon.iter().zip(truth.iter()) {
        let d = f64::from(r) - f64::from(t);
        err2 += d * d;
        ref2 += f64::from(t) * f64::from(t);
    }
    if ref2 == 0.0 {
        return Err(MetricsError::ZeroTruth);
    }
    Ok((err2 / ref2).sqrt())
}

/// Confusion-matrix rates for binary masks. Rates whose denominator is
/// empty are reported as `None`.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct BinaryRates {
    pub true_positives: u64,
    pub false_positives: u64,
    pub true_negatives: u64,
    pub false_negatives: u64,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn binary_rates(
    predicted: &ArrayViewD<u8>,
    truth: &ArrayViewD<u8>,
) -> Result<BinaryRates, MetricsError> {
    if predicted.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            predicted.shape(),
            truth.shape()
        )));
    }
    let mut r = BinaryRates::default();
    for (&p, &t) in predicted.iter().zip(truth.iter()) {
        match (p != 0, t != 0) {
            (true, true) => r.true_positives += 1,
            (true, false) => r.false_positives += 1,
            (false, true) => r.false_negatives += 1,
            (false, false) => r.true_negatives += 1,
        }
    }
    let pos = r.true_positives + r.false_negatives;
    let neg = r.false_positives + r.true_negatives;
    let flagged = r.true_positives + r.false_positives;
    if pos > 0 {
        let tpr = r.true_positives as f64 / pos as f64;
        r.tpr = Some(tpr);
        r.recall = Some(tpr);
    }
    if neg > 0 {
        r.fpr = Some(r.false_positives as f64 / neg as f64);
    }
    if flagged > 0 {
        r.precision = Some(r.true_positives as f64 / flagged as f64);
    }
    Ok(r)
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelReport {
    pub wavelength: f64,
    /// Fraction of measurements flagged in the simulator truth mask.
    pub affected_fraction: f64,
    pub nrmse_rmbir: Option<f64>,
    pub nrmse_fbp: Option<f64>,
    pub bragg_precision: Option<f64>,
    pub bragg_recall: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SignatureReport {
    /// Domain id in the segmented reconstruction.
    pub domain_id: usize,
    /// Best-overlap grain label in the simulator phantom.
    pub matched_grain: usize,
    pub domain_voxels: usize,
    pub overlap_voxels: usize,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct RuntimeReport {
    pub simulate_seconds: Option<f64>,
    pub fbp_seconds: Option<f64>,
    pub rmbir_seconds: Option<f64>,
    pub signatures_seconds: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub channels: Vec<ChannelReport>,
    pub signatures: Vec<SignatureReport>,
    pub runtime: RuntimeReport,
}

/// Per-wavelength NRMSE of a reconstruction against the truth volume.
pub fn nrmse_per_channel(
    recon: &HyperVolume,
    truth: &HyperVolume,
) -> Result<Vec<f64>, MetricsError> {
    if recon.data.dim() != truth.data.dim() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            recon.data.dim(),
            truth.data.dim()
        )));
    }
    (0..recon.n_channels())
        .map(|k| {
            nrmse(
                &recon.data.index_axis(Axis(0), k).into_dyn(),
                &truth.data.index_axis(Axis(0), k).into_dyn(),
            )
        })
        .collect()
}

/// Per-wavelength precision/recall of predicted Bragg maps against the
/// simulator truth mask.
pub fn bragg_rates_per_channel(
    predicted: &BraggMapStack,
    truth: &BraggMapStack,
) -> Result<Vec<BinaryRates>, MetricsError> {
    if predicted.data.dim() != truth.data.dim() {
        return Err(MetricsError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            predicted.data.dim(),
            truth.data.dim()
        )));
    }
    (0..predicted.data.dim().0)
        .map(|k| {
            binary_rates(
                &predicted.data.index_axis(Axis(0), k).into_dyn(),
                &truth.data.index_axis(Axis(0), k).into_dyn(),
            )
        })
        .collect()
}
