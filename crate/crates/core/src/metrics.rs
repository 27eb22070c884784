//! Pose-accuracy metrics: per-pair angular errors, AUC@τ, RRA/RTA/mAA and
//! median absolute-pose errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::averaging::median;
use crate::geometry::{rotation_angle, translation_angle, DirectionalPose, Pose};
use crate::pipeline::{GroundTruth, LocalizationResult};

/// Ground-truth baselines shorter than this leave the translation angle undefined.
pub const MIN_GT_BASELINE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    EmptyInput,
    #[error("threshold must be positive and finite, got {0}")]
    InvalidThreshold(f64),
    #[error("no ground truth for query `{0}`")]
    MissingGroundTruth(String),
}

/// Angular errors of one relative pose, in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairError {
    pub rotation_error: f64,
    /// `None` when the ground-truth baseline is (near) zero.
    pub translation_error: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reducer {
    #[default]
    Max,
    Min,
}

impl std::str::FromStr for Reducer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            other => Err(format!("unknown reducer `{other}` (expected max|min)")),
        }
    }
}

impl std::fmt::Display for Reducer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Max => "max",
            Self::Min => "min",
        })
    }
}

impl PairError {
    /// Scalar error for AUC; undefined translation counts as a failure (+∞).
    pub fn reduced(&self, reducer: Reducer) -> f64 {
        match self.translation_error {
            None => f64::INFINITY,
            Some(t) => match reducer {
                Reducer::Max => self.rotation_error.max(t),
                Reducer::Min => self.rotation_error.min(t),
            },
        }
    }
}

pub fn pair_error(pred: &DirectionalPose, gt: &Pose) -> PairError {
    let rotation_error = rotation_angle(&pred.rotation, &gt.rotation).to_degrees();
    let translation_error = if gt.translation.norm() < MIN_GT_BASELINE {
        None
    } else {
        translation_angle(pred.direction(), &gt.translation)
            .ok()
            .map(f64::to_degrees)
    };
    PairError {
        rotation_error,
        translation_error,
    }
}

/// Normalized area under the recall-vs-error curve up to `tau` degrees.
///
/// The curve runs through `(0, 0)` and `(e_i, i/N)` for the ascending errors;
/// the trapezoidal area up to the last error `<= tau` is extended by a
/// rectangle at that recall out to `tau`. NaN counts as +∞.
pub fn pose_auc(errors: &[f64], tau: f64) -> Result<f64, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(MetricsError::InvalidThreshold(tau));
    }
    let mut sorted: Vec<f64> = errors
        .iter()
        .map(|e| if e.is_nan() { f64::INFINITY } else { *e })
        .collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let (mut area, mut prev_e, mut prev_r) = (0.0, 0.0, 0.0);
    for (i, &e) in sorted.iter().enumerate() {
        if e > tau {
            break;
        }
        let r = (i + 1) as f64 / n;
        area += 0.5 * (r + prev_r) * (e - prev_e);
        prev_e = e;
        prev_r = r;
    }
    area += prev_r * (tau - prev_e);
    Ok(area / tau)
}

pub fn pose_auc_pairs(
    errors: &[PairError],
    tau: f64,
    reducer: Reducer,
) -> Result<f64, MetricsError> {
    let scalar: Vec<f64> = errors.iter().map(|e| e.reduced(reducer)).collect();
    pose_auc(&scalar, tau)
}

/// Thresholds (degrees) of the accuracy triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyThresholds {
    pub rra: f64,
    pub rta: f64,
    pub maa: f64,
}

impl Default for AccuracyThresholds {
    fn default() -> Self {
        Self {
            rra: 15.0,
            rta: 15.0,
            maa: 30.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Accuracy {
    pub rra: f64,
    pub rta: f64,
    pub maa: f64,
}

/// Fraction of pairs within the rotation / translation thresholds, and the
/// mean average accuracy (AUC with the max reducer).
pub fn rra_rta_maa(
    errors: &[PairError],
    thresholds: &AccuracyThresholds,
) -> Result<Accuracy, MetricsError> {
    if errors.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let n = errors.len() as f64;
    let rra = errors
        .iter()
        .filter(|e| e.rotation_error <= thresholds.rra)
        .count() as f64
        / n;
    let rta = errors
        .iter()
        .filter(|e| e.translation_error.is_some_and(|t| t <= thresholds.rta))
        .count() as f64
        / n;
    let maa = pose_auc_pairs(errors, thresholds.maa, Reducer::Max)?;
    Ok(Accuracy { rra, rta, maa })
}

/// Error of one localized query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsoluteError {
    /// Camera-center distance, meters.
    pub translation_error: f64,
    /// Geodesic angle, degrees.
    pub rotation_error: f64,
}

pub fn absolute_error(pred: &Pose, gt: &Pose) -> AbsoluteError {
    AbsoluteError {
        translation_error: (pred.camera_center() - gt.camera_center()).norm(),
        rotation_error: rotation_angle(&pred.rotation, &gt.rotation).to_degrees(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbsoluteSummary {
    pub median_translation: Option<f64>,
    pub median_rotation: Option<f64>,
    pub n_total: usize,
    pub n_failed: usize,
    pub per_query: Vec<(String, Option<AbsoluteError>)>,
}

/// Medians over successful queries; failed queries are only counted.
pub fn absolute_errors(
    results: &[LocalizationResult],
    gt: &GroundTruth,
) -> Result<AbsoluteSummary, MetricsError> {
    let mut per_query = Vec::with_capacity(results.len());
    for r in results {
        let truth = gt
            .get(&r.query_id)
            .ok_or_else(|| MetricsError::MissingGroundTruth(r.query_id.clone()))?;
        per_query.push((
            r.query_id.clone(),
            r.pose().map(|p| absolute_error(p, truth)),
        ));
    }
    let mut t: Vec<f64> = per_query
        .iter()
        .filter_map(|(_, e)| e.map(|e| e.translation_error))
        .collect();
    let mut rot: Vec<f64> = per_query
        .iter()
        .filter_map(|(_, e)| e.map(|e| e.rotation_error))
        .collect();
    let n_failed = per_query.len() - t.len();
    Ok(AbsoluteSummary {
        median_translation: (!t.is_empty()).then(|| median(&mut t)),
        median_rotation: (!rot.is_empty()).then(|| median(&mut rot)),
        n_total: per_query.len(),
        n_failed,
        per_query,
    })
}

/// Median of a list of values; even counts average the middle two.
pub fn median_of(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    Some(median(&mut v))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEntry {
    pub threshold: f64,
    pub value: f64,
}

/// Aggregate metrics. Relative-pose evaluations fill the AUC and accuracy
/// fields; absolute localization fills the medians.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reducer: Option<Reducer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub auc: Vec<AucEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rra15: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rta15: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub maa30: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_t: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median_r: Option<f64>,
    pub n_total: usize,
    pub n_failed: usize,
}

impl MetricReport {
    pub fn relative(
        errors: &[PairError],
        thresholds: &[f64],
        reducer: Reducer,
    ) -> Result<Self, MetricsError> {
        let auc = thresholds
            .iter()
            .map(|&t| {
                Ok(AucEntry {
                    threshold: t,
                    value: pose_auc_pairs(errors, t, reducer)?,
                })
            })
            .collect::<Result<Vec<_>, MetricsError>>()?;
        let acc = rra_rta_maa(errors, &AccuracyThresholds::default())?;
        Ok(Self {
            reducer: Some(reducer),
            auc,
            rra15: Some(acc.rra),
            rta15: Some(acc.rta),
            maa30: Some(acc.maa),
            n_total: errors.len(),
            n_failed: errors
                .iter()
                .filter(|e| e.translation_error.is_none())
                .count(),
            ..Self::default()
        })
    }

    pub fn absolute(summary: &AbsoluteSummary) -> Self {
        Self {
            median_t: summary.median_translation,
            median_r: summary.median_rotation,
            n_total: summary.n_total,
            n_failed: summary.n_failed,
            ..Self::default()
        }
    }
}
