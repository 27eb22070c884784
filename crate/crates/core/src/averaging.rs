//! Motion averaging: turns per-pair relative estimates into one absolute
//! query pose by rotation averaging and camera-center triangulation.

use nalgebra::Vector4;
use thiserror::Error;

use crate::geometry::{
    quaternion_to_rotation, rotation_angle, rotation_to_quaternion, DirectionalPose, Mat3, Pose,
    RotationMatrix, UnitQuaternion, Vec3,
};

/// Averaged quaternions shorter than this are rejected.
pub const MIN_MEAN_NORM: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AveragingError {
    #[error("no rotations to average")]
    EmptyInput,
    #[error("averaged quaternion has norm {0:e}; inputs cancel out")]
    DegenerateMean(f64),
    #[error("degenerate ray configuration (condition ratio {0:e})")]
    DegenerateGeometry(f64),
    #[error("{found} pairs available, at least {required} required")]
    TooFewPairs { found: usize, required: usize },
    #[error("invalid averaging config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RotationMode {
    #[default]
    Median,
    Mean,
}

impl std::str::FromStr for RotationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "median" => Ok(Self::Median),
            "mean" => Ok(Self::Mean),
            other => Err(format!(
                "unknown averaging mode `{other}` (expected median|mean)"
            )),
        }
    }
}

impl std::fmt::Display for RotationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Median => "median",
            Self::Mean => "mean",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AveragingConfig {
    pub rotation_mode: RotationMode,
    /// Minimum accepted `σ_min / σ_max` of the triangulation normal matrix.
    pub degeneracy_threshold: f64,
    pub min_pairs: usize,
}

impl Default for AveragingConfig {
    fn default() -> Self {
        Self {
            rotation_mode: RotationMode::Median,
            degeneracy_threshold: 1e-6,
            min_pairs: 2,
        }
    }
}

impl AveragingConfig {
    pub fn with_mode(rotation_mode: RotationMode) -> Self {
        Self {
            rotation_mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AveragingError> {
        if !(self.degeneracy_threshold > 0.0 && self.degeneracy_threshold < 1.0) {
            return Err(AveragingError::InvalidConfig(format!(
                "degeneracy_threshold {} not in (0, 1)",
                self.degeneracy_threshold
            )));
        }
        if self.min_pairs < 2 {
            return Err(AveragingError::InvalidConfig(format!(
                "min_pairs {} < 2",
                self.min_pairs
            )));
        }
        Ok(())
    }
}

/// One retrieved database image with the estimated query→database transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairObservation {
    pub database_pose: Pose,
    pub rel: DirectionalPose,
}

/// World-frame ray from a database camera center toward the query center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    direction: Vec3,
}

impl Ray {
    /// `direction` is normalized; returns `None` for a (near) zero vector.
    pub fn new(origin: Vec3, direction: Vec3) -> Option<Self> {
        let n = direction.norm();
        (n > crate::geometry::MIN_NORM).then(|| Self {
            origin,
            direction: direction / n,
        })
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }

    pub fn distance_to(&self, p: &Vec3) -> f64 {
        let d = p - self.origin;
        (d - self.direction * self.direction.dot(&d)).norm()
    }
}

/// `R_q = R_relᵀ · R_d`, given `X_db = R_rel X_q + t_rel`.
pub fn absolute_rotation_from_pair(obs: &PairObservation) -> RotationMatrix {
    obs.rel
        .rotation
        .transpose()
        .mul(&obs.database_pose.rotation)
}

/// The query center in database-camera coordinates lies along `t_rel`, so the
/// world-frame ray starts at the database center with direction `R_dᵀ t_rel`.
pub fn center_ray_from_pair(obs: &PairObservation) -> Ray {
    let direction = obs
        .database_pose
        .rotation
        .transpose()
        .apply(obs.rel.direction());
    Ray {
        origin: obs.database_pose.camera_center(),
        direction: direction.normalize(),
    }
}

/// Quaternions of `rs`, each sign-flipped to agree with the first.
fn aligned_quaternions(rs: &[RotationMatrix]) -> Vec<Vector4<f64>> {
    let first = rotation_to_quaternion(&rs[0]).as_vector();
    rs.iter()
        .map(|r| {
            let q = rotation_to_quaternion(r).as_vector();
            if q.dot(&first) < 0.0 {
                -q
            } else {
                q
            }
        })
        .collect()
}

/// Median of a slice; even lengths average the two middle values.
pub(crate) fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn average_rotations(
    rs: &[RotationMatrix],
    mode: RotationMode,
) -> Result<RotationMatrix, AveragingError> {
    if rs.is_empty() {
        return Err(AveragingError::EmptyInput);
    }
    let qs = aligned_quaternions(rs);
    let avg = match mode {
        RotationMode::Mean => qs.iter().sum::<Vector4<f64>>() / qs.len() as f64,
        RotationMode::Median => {
            let mut column = vec![0.0; qs.len()];
            Vector4::from_fn(|k, _| {
                for (slot, q) in column.iter_mut().zip(&qs) {
                    *slot = q[k];
                }
                median(&mut column)
            })
        }
    };
    let n = avg.norm();
    if n < MIN_MEAN_NORM {
        return Err(AveragingError::DegenerateMean(n));
    }
    let q = UnitQuaternion::new(avg[0], avg[1], avg[2], avg[3])
        .map_err(|_| AveragingError::DegenerateMean(n))?;
    Ok(quaternion_to_rotation(&q))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangulation {
    pub center: Vec3,
    /// `σ_min / σ_max` of `Σ (I - u uᵀ)`.
    pub condition_ratio: f64,
}

/// Least-squares point closest to all rays, `argmin_C Σ ‖(I - uuᵀ)(C - o)‖²`,
/// solved from the 3×3 normal system by SVD.
pub fn triangulate(rays: &[Ray], cfg: &AveragingConfig) -> Result<Triangulation, AveragingError> {
    if rays.len() < cfg.min_pairs {
        return Err(AveragingError::TooFewPairs {
            found: rays.len(),
            required: cfg.min_pairs,
        });
    }
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for ray in rays {
        let u = ray.direction;
        let p = Mat3::identity() - u * u.transpose();
        a += p;
        b += p * ray.origin;
    }
    let svd = a.svd(true, true);
    let s_max = svd.singular_values.max();
    let s_min = svd.singular_values.min();
    let condition_ratio = if s_max > 0.0 { s_min / s_max } else { 0.0 };
    if !(condition_ratio >= cfg.degeneracy_threshold) {
        return Err(AveragingError::DegenerateGeometry(condition_ratio));
    }
    let center = svd
        .solve(&b, 0.0)
        .map_err(|_| AveragingError::DegenerateGeometry(condition_ratio))?;
    Ok(Triangulation {
        center,
        condition_ratio,
    })
}

pub fn triangulate_center(rays: &[Ray], cfg: &AveragingConfig) -> Result<Vec3, AveragingError> {
    triangulate(rays, cfg).map(|t| t.center)
}

/// Absolute pose plus the quantities reported as localization diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbsoluteSolution {
    pub pose: Pose,
    pub condition_ratio: f64,
    /// Largest angle (degrees) between a per-pair absolute rotation and the average.
    pub rotation_spread_deg: f64,
}

pub fn solve_absolute_pose_detailed(
    obs: &[PairObservation],
    cfg: &AveragingConfig,
) -> Result<AbsoluteSolution, AveragingError> {
    cfg.validate()?;
    if obs.len() < cfg.min_pairs {
        return Err(AveragingError::TooFewPairs {
            found: obs.len(),
            required: cfg.min_pairs,
        });
    }
    let rotations: Vec<_> = obs.iter().map(absolute_rotation_from_pair).collect();
    let rotation = average_rotations(&rotations, cfg.rotation_mode)?;
    let rays: Vec<_> = obs.iter().map(center_ray_from_pair).collect();
    let tri = triangulate(&rays, cfg)?;
    let rotation_spread_deg = rotations
        .iter()
        .map(|r| rotation_angle(r, &rotation).to_degrees())
        .fold(0.0, f64::max);
    Ok(AbsoluteSolution {
        pose: Pose::from_center(rotation, &tri.center),
        condition_ratio: tri.condition_ratio,
        rotation_spread_deg,
    })
}

pub fn solve_absolute_pose(
    obs: &[PairObservation],
    cfg: &AveragingConfig,
) -> Result<Pose, AveragingError> {
    solve_absolute_pose_detailed(obs, cfg).map(|s| s.pose)
}
