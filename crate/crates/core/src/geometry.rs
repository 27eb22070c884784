//! Rigid poses, SO(3) parameterizations and the angular pose losses.
//!
//! Poses are world-to-camera: `X_cam = R * X_world + t`, OpenCV axes
//! (x right, y down, z forward).

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Tolerance of the `RotationMatrix` invariants (orthogonality residual, determinant).
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Norms at or below this are treated as zero vectors.
pub const MIN_NORM: f64 = 1e-12;
/// Floor on `sigma_i + sigma_j` in the orthogonalization backward pass.
pub const SVD_GAP_FLOOR: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("matrix has rank < 2, its projection onto SO(3) is not unique")]
    SingularInput,
    #[error("vector norm {0:e} is too small to define a direction")]
    ZeroVector(f64),
    #[error("input contains non-finite values")]
    NonFinite,
    #[error("not a rotation: orthogonality residual {residual:e}, determinant {det}")]
    NotARotation { residual: f64, det: f64 },
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Frobenius norm of `MᵀM - I`.
pub fn orthogonality_residual(m: &Mat3) -> f64 {
    (m.transpose() * m - Mat3::identity()).norm()
}

/// A 3×3 matrix in SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub fn new(m: Mat3) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let residual = orthogonality_residual(&m);
        let det = m.determinant();
        if residual > ROTATION_TOLERANCE || (det - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(GeometryError::NotARotation { residual, det });
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    /// Row-major entries.
    pub fn from_row_slice(v: &[f64; 9]) -> Result<Self> {
        Self::new(Mat3::from_row_slice(v))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn to_row_array(&self) -> [f64; 9] {
        row_major(&self.0)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self * other`, i.e. apply `other` first.
    pub fn mul(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vec3) -> Vec3 {
        self.0 * v
    }

    /// Rotation of `angle` radians about `axis` (need not be normalized).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Result<Self> {
        let n = axis.norm();
        if n <= MIN_NORM {
            return Err(GeometryError::ZeroVector(n));
        }
        Ok(rotation_from_3d(&(axis * (angle / n))))
    }
}

pub(crate) fn row_major(m: &Mat3) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

/// Unit quaternion `(w, x, y, z)`, sign-canonicalized so that `w >= 0`
/// (for `w == 0` the first nonzero component is positive).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    /// Normalizes and canonicalizes the given components.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let v = Vector4::new(w, x, y, z);
        if v.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = v.norm();
        if n <= MIN_NORM {
            return Err(GeometryError::ZeroVector(n));
        }
        let v = canonical_sign(v / n);
        Ok(Self {
            w: v[0],
            x: v[1],
            y: v[2],
            z: v[3],
        })
    }

    pub fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.as_vector().dot(&other.as_vector())
    }
}

pub(crate) fn canonical_sign(v: Vector4<f64>) -> Vector4<f64> {
    let lead = v.iter().copied().find(|c| *c != 0.0).unwrap_or(0.0);
    if lead < 0.0 {
        -v
    } else {
        v
    }
}

/// Shepperd's method: picks the numerically largest of `w, x, y, z` to divide by.
pub fn rotation_to_quaternion(r: &RotationMatrix) -> UnitQuaternion {
    let m = r.matrix();
    let tr = m.trace();
    let (w, x, y, z);
    if tr >= m[(0, 0)] && tr >= m[(1, 1)] && tr >= m[(2, 2)] {
        let s = 2.0 * (1.0 + tr).sqrt();
        w = 0.25 * s;
        x = (m[(2, 1)] - m[(1, 2)]) / s;
        y = (m[(0, 2)] - m[(2, 0)]) / s;
        z = (m[(1, 0)] - m[(0, 1)]) / s;
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        w = (m[(2, 1)] - m[(1, 2)]) / s;
        x = 0.25 * s;
        y = (m[(0, 1)] + m[(1, 0)]) / s;
        z = (m[(0, 2)] + m[(2, 0)]) / s;
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        w = (m[(0, 2)] - m[(2, 0)]) / s;
        x = (m[(0, 1)] + m[(1, 0)]) / s;
        y = 0.25 * s;
        z = (m[(1, 2)] + m[(2, 1)]) / s;
    } else {
        let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        w = (m[(1, 0)] - m[(0, 1)]) / s;
        x = (m[(0, 2)] + m[(2, 0)]) / s;
        y = (m[(1, 2)] + m[(2, 1)]) / s;
        z = 0.25 * s;
    }
    // The input is a valid rotation, so the norm is 1 up to rounding.
    UnitQuaternion::new(w, x, y, z).expect("rotation yields a nonzero quaternion")
}

pub fn quaternion_to_rotation(q: &UnitQuaternion) -> RotationMatrix {
    RotationMatrix(quaternion_matrix(q.w, q.x, q.y, q.z))
}

fn quaternion_matrix(w: f64, x: f64, y: f64, z: f64) -> Mat3 {
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

fn clamp_unit(c: f64) -> f64 {
    c.clamp(-1.0, 1.0)
}

/// Cosine and sine of the geodesic angle between two rotations.
fn rotation_cos_sin(a: &Mat3, b: &Mat3) -> (f64, f64) {
    let c = (a.component_mul(b).sum() - 1.0) / 2.0;
    let rel = a.transpose() * b;
    (c, vee_asym(&rel).norm() / 2.0)
}

/// Geodesic angle `arccos((tr(aᵀb) - 1) / 2)` in radians, in `[0, π]`.
///
/// Evaluated as `atan2(sin θ, cos θ)` with `sin θ` taken from the skew part of
/// `aᵀb`, which keeps full precision near 0 and π where arccos does not.
pub fn rotation_angle(a: &RotationMatrix, b: &RotationMatrix) -> f64 {
    let (c, s) = rotation_cos_sin(&a.0, &b.0);
    s.atan2(clamp_unit(c))
}

/// Angle between two directions in radians, in `[0, π]`.
pub fn translation_angle(a: &Vec3, b: &Vec3) -> Result<f64> {
    let (na, nb) = (a.norm(), b.norm());
    if na <= MIN_NORM {
        return Err(GeometryError::ZeroVector(na));
    }
    if nb <= MIN_NORM {
        return Err(GeometryError::ZeroVector(nb));
    }
    Ok(a.cross(b).norm().atan2(a.dot(b)))
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(RotationMatrix::identity(), Vec3::zeros())
    }

    /// Pose of a camera with orientation `rotation` centered at `center`.
    pub fn from_center(rotation: RotationMatrix, center: &Vec3) -> Self {
        let translation = -(rotation.matrix() * center);
        Self::new(rotation, translation)
    }

    pub fn apply(&self, point: &Vec3) -> Vec3 {
        self.rotation.matrix() * point + self.translation
    }

    /// `C = -Rᵀt`.
    pub fn camera_center(&self) -> Vec3 {
        -(self.rotation.matrix().transpose() * self.translation)
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose::new(rt, -(rt.matrix() * self.translation))
    }

    /// `self ∘ other`: maps `X` to `self(other(X))`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation.mul(&other.rotation),
            self.rotation.matrix() * other.translation + self.translation,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(p: &Pose) -> Pose {
    p.inverse()
}

pub fn camera_center(p: &Pose) -> Vec3 {
    p.camera_center()
}

/// Transform taking query-camera coordinates to database-camera coordinates:
/// `X_db = R_rel X_q + t_rel`.
pub fn relative_pose(query: &Pose, database: &Pose) -> Pose {
    database.compose(&query.inverse())
}

/// Unconstrained 3×3 matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation9D(pub [f64; 9]);

impl Rotation9D {
    pub fn from_matrix(m: &Mat3) -> Self {
        Self(row_major(m))
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::from_row_slice(&self.0)
    }
}

/// Relative rotation together with a unit translation direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalPose {
    pub rotation: RotationMatrix,
    direction: Vec3,
}

impl DirectionalPose {
    /// Normalizes `direction`; it must not be (near) zero.
    pub fn new(rotation: RotationMatrix, direction: Vec3) -> Result<Self> {
        if direction.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = direction.norm();
        if n <= MIN_NORM {
            return Err(GeometryError::ZeroVector(n));
        }
        // Leave already-normalized vectors bit-for-bit untouched.
        let direction = if (n - 1.0).abs() > MIN_NORM {
            direction / n
        } else {
            direction
        };
        Ok(Self {
            rotation,
            direction,
        })
    }

    /// Drops the translation magnitude of a full pose.
    pub fn from_pose(p: &Pose) -> Result<Self> {
        Self::new(p.rotation, p.translation)
    }

    pub fn direction(&self) -> &Vec3 {
        &self.direction
    }
}

/// SVD factors of a projection onto SO(3), kept for the backward pass.
///
/// Stores the signed factorization `M = U diag(s) Vᵀ` with `det(UVᵀ) = +1`,
/// where the last singular value absorbs the reflection sign.
#[derive(Debug, Clone)]
pub struct So3Projection {
    u: Mat3,
    v: Mat3,
    signed_sigma: Vec3,
    rotation: RotationMatrix,
}

impl So3Projection {
    pub fn new(m: &Mat3) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let svd = m.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(GeometryError::SingularInput),
        };
        let v = v_t.transpose();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut us = Mat3::zeros();
        let mut vs = Mat3::zeros();
        let mut sigma = Vec3::zeros();
        for (dst, &src) in order.iter().enumerate() {
            us.set_column(dst, &u.column(src));
            vs.set_column(dst, &v.column(src));
            sigma[dst] = svd.singular_values[src];
        }
        if sigma[1] < MIN_NORM {
            return Err(GeometryError::SingularInput);
        }
        if (us * vs.transpose()).determinant() < 0.0 {
            let flipped = -us.column(2);
            us.set_column(2, &flipped);
            sigma[2] = -sigma[2];
        }
        let rotation = RotationMatrix(us * vs.transpose());
        Ok(Self {
            u: us,
            v: vs,
            signed_sigma: sigma,
            rotation,
        })
    }

    pub fn rotation(&self) -> &RotationMatrix {
        &self.rotation
    }

    /// Maps `dL/dR` to `dL/dM`.
    pub fn backward(&self, grad_rotation: &Mat3) -> Mat3 {
        let h = self.u.transpose() * grad_rotation * self.v;
        let mut k = Mat3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let gap = (self.signed_sigma[i] + self.signed_sigma[j]).max(SVD_GAP_FLOOR);
                    k[(i, j)] = (h[(i, j)] - h[(j, i)]) / gap;
                }
            }
        }
        self.u * k * self.v.transpose()
    }
}

/// Closest rotation in Frobenius norm to the reshaped 9D input,
/// `U diag(1, 1, det(UVᵀ)) Vᵀ`.
pub fn orthogonalize_9d(raw: &Rotation9D) -> Result<RotationMatrix> {
    So3Projection::new(&raw.matrix()).map(|p| p.rotation)
}

fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// `vee(X) = (X32 - X23, X13 - X31, X21 - X12)`; satisfies `<X, skew(e)> = vee(X)·e`.
fn vee_asym(x: &Mat3) -> Vec3 {
    Vec3::new(
        x[(2, 1)] - x[(1, 2)],
        x[(0, 2)] - x[(2, 0)],
        x[(1, 0)] - x[(0, 1)],
    )
}

/// Rodrigues coefficients `a = sin θ/θ`, `b = (1 - cos θ)/θ²` and their
/// derivatives divided by θ.
fn rodrigues_coefficients(theta: f64) -> (f64, f64, f64, f64) {
    if theta < 1e-4 {
        let t2 = theta * theta;
        (
            1.0 - t2 / 6.0,
            0.5 - t2 / 24.0,
            -1.0 / 3.0 + t2 / 30.0,
            -1.0 / 12.0 + t2 / 180.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let t2 = theta * theta;
        let a = s / theta;
        let b = (1.0 - c) / t2;
        let da = (theta * c - s) / (t2 * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (t2 * t2);
        (a, b, da, db)
    }
}

/// Exponential map of an axis-angle vector. The zero vector maps to identity.
pub fn rotation_from_3d(omega: &Vec3) -> RotationMatrix {
    let theta = omega.norm();
    let (a, b, _, _) = rodrigues_coefficients(theta);
    let k = skew(omega);
    RotationMatrix(Mat3::identity() + k * a + k * k * b)
}

/// Gradient of `L(rotation_from_3d(omega))` given `dL/dR`.
pub fn rotation_from_3d_backward(omega: &Vec3, grad_rotation: &Mat3) -> Vec3 {
    let theta = omega.norm();
    let (a, b, da, db) = rodrigues_coefficients(theta);
    let k = skew(omega);
    let g = grad_rotation;
    let radial = da * g.dot(&k) + db * g.dot(&(k * k));
    vee_asym(g) * a + vee_asym(&(g * k.transpose() + k.transpose() * g)) * b + omega * radial
}

/// Normalizes an arbitrary 4-vector `(w, x, y, z)` and converts it.
pub fn rotation_from_4d(raw: &[f64; 4]) -> Result<RotationMatrix> {
    let q = UnitQuaternion::new(raw[0], raw[1], raw[2], raw[3])?;
    Ok(quaternion_to_rotation(&q))
}

/// Gradient of `L(rotation_from_4d(raw))` given `dL/dR`.
pub fn rotation_from_4d_backward(raw: &[f64; 4], grad_rotation: &Mat3) -> [f64; 4] {
    let r = Vector4::from_row_slice(raw);
    let n = r.norm();
    let q = r / n;
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let g = grad_rotation;
    // dR/dw, dR/dx, dR/dy, dR/dz, each contracted with G.
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let gq = Vector4::new(dw, dx, dy, dz);
    let gr = (gq - q * q.dot(&gq)) / n;
    [gr[0], gr[1], gr[2], gr[3]]
}

/// `ℓ_R` and its gradient with respect to the predicted rotation matrix.
/// The gradient is zero where the arccos clamp is active.
pub fn rotation_loss_grad(pred: &RotationMatrix, gt: &RotationMatrix) -> (f64, Mat3) {
    let (c, s) = rotation_cos_sin(&pred.0, &gt.0);
    let angle = s.atan2(clamp_unit(c));
    let grad = if c.abs() >= 1.0 || s == 0.0 {
        Mat3::zeros()
    } else {
        gt.0 * (-0.5 / s)
    };
    (angle, grad)
}

/// `ℓ_t` and its gradient with respect to the (not necessarily unit) predicted vector.
pub fn translation_loss_grad(pred: &Vec3, gt: &Vec3) -> Result<(f64, Vec3)> {
    let (np, ng) = (pred.norm(), gt.norm());
    if np <= MIN_NORM {
        return Err(GeometryError::ZeroVector(np));
    }
    if ng <= MIN_NORM {
        return Err(GeometryError::ZeroVector(ng));
    }
    let c = pred.dot(gt) / (np * ng);
    let s = pred.cross(gt).norm() / (np * ng);
    let angle = s.atan2(c);
    let grad = if c.abs() >= 1.0 || s == 0.0 {
        Vec3::zeros()
    } else {
        let dc = gt / (np * ng) - pred * (c / (np * np));
        dc * (-1.0 / s)
    };
    Ok((angle, grad))
}

/// Value and gradient of `L = ℓ_R + ℓ_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLoss {
    pub rotation: f64,
    pub translation: f64,
    pub grad_raw: Rotation9D,
    pub grad_direction: Vec3,
}

impl PoseLoss {
    pub fn total(&self) -> f64 {
        self.rotation + self.translation
    }
}

/// Loss of a raw 9D rotation prediction plus translation direction against a
/// ground-truth pose, with analytic gradients through SVD orthogonalization.
pub fn pose_loss(raw: &Rotation9D, direction: &Vec3, gt: &Pose) -> Result<PoseLoss> {
    let proj = So3Projection::new(&raw.matrix())?;
    let (rotation, grad_r) = rotation_loss_grad(proj.rotation(), &gt.rotation);
    let (translation, grad_direction) = translation_loss_grad(direction, &gt.translation)?;
    Ok(PoseLoss {
        rotation,
        translation,
        grad_raw: Rotation9D::from_matrix(&proj.backward(&grad_r)),
        grad_direction,
    })
}

/// Loss value for an already-orthogonalized prediction.
pub fn directional_pose_loss(pred: &DirectionalPose, gt: &Pose) -> Result<f64> {
    Ok(rotation_angle(&pred.rotation, &gt.rotation)
        + translation_angle(pred.direction(), &gt.translation)?)
}

/// Uniformly distributed rotation (Haar measure).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
        if let Ok(r) = rotation_from_4d(&q) {
            return r;
        }
    }
}

/// Uniformly distributed unit vector.
pub fn random_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::from_fn(|_, _| StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}
