//! Rotations, camera projection, rays and triangulation.
//!
//! Lengths are millimetres and angles radians, except [`geodesic_deg`] which
//! reports degrees. Camera extrinsics map world points into the camera frame:
//! `X_cam = R_cam * X + T_cam` (x right, y down, z forward).

use nalgebra::{Matrix2x3, Matrix3, Vector2, Vector3, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, to_f64, Real};

/// Weak-perspective scales are expressed per metre of body extent.
pub const WEAK_PERSPECTIVE_UNIT_MM: f64 = 1000.0;

/// Proper rotation stored as a full 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Rotation<T: Real>(Matrix3<T>);

impl<T: Real> Rotation<T> {
    pub fn identity() -> Self {
        Rotation(Matrix3::identity())
    }

    /// Wraps a matrix without checking orthonormality.
    pub fn from_matrix_unchecked(m: Matrix3<T>) -> Self {
        Rotation(m)
    }

    /// Exponential map of a rotation vector (axis * angle).
    pub fn exp(w: &Vector3<T>) -> Self {
        Rotation(*nalgebra::Rotation3::from_scaled_axis(*w).matrix())
    }

    /// Rotation vector of this rotation (inverse of [`Rotation::exp`]).
    pub fn log(&self) -> Vector3<T> {
        nalgebra::Rotation3::from_matrix_unchecked(self.0).scaled_axis()
    }

    pub fn about_axis(axis: &Vector3<T>, angle: T) -> Self {
        Self::exp(&(axis.normalize() * angle))
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Rotation(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Rotation(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<T>) -> Vector3<T> {
        self.0 * v
    }

    /// Orthonormality and determinant check.
    pub fn is_valid(&self, tol: T) -> bool {
        let e = self.0.transpose() * self.0 - Matrix3::identity();
        e.iter().all(|x| x.abs() <= tol) && (self.0.determinant() - T::one()).abs() <= tol
    }

    pub fn cast<U: Real>(&self) -> Rotation<U> {
        Rotation(self.0.map(|x| lit::<U>(to_f64(x))))
    }
}

/// First two columns of a rotation matrix, `(c1x, c1y, c1z, c2x, c2y, c2z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rot6d<T: Real>(pub [T; 6]);

impl<T: Real> Rot6d<T> {
    pub fn zero() -> Self {
        Rot6d([T::zero(); 6])
    }

    pub fn first(&self) -> Vector3<T> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn second(&self) -> Vector3<T> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.0;
        out.iter_mut().zip(other.0.iter()).for_each(|(a, b)| *a += *b);
        Rot6d(out)
    }

    pub fn sub(&self, other: &Self) -> Self {
        let mut out = self.0;
        out.iter_mut().zip(other.0.iter()).for_each(|(a, b)| *a -= *b);
        Rot6d(out)
    }

    pub fn norm(&self) -> T {
        self.0.iter().fold(T::zero(), |acc, x| acc + *x * *x).sqrt()
    }
}

/// Gram-Schmidt map from the 6D representation onto the rotation group.
pub fn rot6d_to_matrix<T: Real>(r: &Rot6d<T>) -> Result<Rotation<T>> {
    let a1 = r.first();
    let a2 = r.second();
    let eps = lit::<T>(1e-12);
    let n1 = a1.norm();
    if !(n1 > eps) || !n1.is_finite() {
        return Err(Error::DegenerateRot6d("first column is zero or non-finite"));
    }
    let b1 = a1 / n1;
    let a2_perp = a2 - b1 * b1.dot(&a2);
    let n2 = a2_perp.norm();
    if !(n2 > eps * (a2.norm() + T::one())) || !n2.is_finite() {
        return Err(Error::DegenerateRot6d("columns are collinear or zero"));
    }
    let b2 = a2_perp / n2;
    let b3 = b1.cross(&b2);
    Ok(Rotation(Matrix3::from_columns(&[b1, b2, b3])))
}

pub fn matrix_to_rot6d<T: Real>(r: &Rotation<T>) -> Rot6d<T> {
    let m = r.matrix();
    Rot6d([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]])
}

/// Angle of `r1 * r2^T` in degrees, in `[0, 180]`.
///
/// Evaluated as `atan2(sin, cos)` with the cosine clamped to `[-1, 1]`; the
/// plain arccos loses about 1e-6 degrees of resolution near zero.
pub fn geodesic_deg<T: Real>(r1: &Rotation<T>, r2: &Rotation<T>) -> T {
    let rel = r1.matrix() * r2.matrix().transpose();
    let c = ((rel.trace() - T::one()) / lit(2.0)).clamp(-T::one(), T::one());
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let s = (axis.norm() / lit(2.0)).min(T::one());
    s.atan2(c) * lit(180.0) / T::pi()
}

/// Projection of `m` onto SO(3) by SVD with determinant correction.
/// `floor` is the smallest acceptable second singular value relative to the first
/// (or to 1 when the first is smaller).
pub(crate) fn project_to_rotation<T: Real>(m: &Matrix3<T>, floor: f64) -> Result<Rotation<T>> {
    let svd = SVD::new(*m, true, true);
    let s = svd.singular_values;
    let mut sorted = [to_f64(s[0]), to_f64(s[1]), to_f64(s[2])];
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    // The third direction is fixed by the determinant, so rank 2 is enough.
    if !(sorted[1] > floor * sorted[0].max(1.0)) {
        return Err(Error::RankDeficientMean(sorted));
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant();
    let mut fix = Matrix3::identity();
    // nalgebra does not order singular values; flip the smallest.
    let mut min_i = 0;
    for i in 1..3 {
        if s[i] < s[min_i] {
            min_i = i;
        }
    }
    fix[(min_i, min_i)] = if d < T::zero() { -T::one() } else { T::one() };
    Ok(Rotation(u * fix * v_t))
}

/// Chordal L2 mean of rotations.
pub fn chordal_mean<T: Real>(rotations: &[Rotation<T>]) -> Result<Rotation<T>> {
    if rotations.is_empty() {
        return Err(Error::Empty("chordal_mean needs at least one rotation"));
    }
    let sum = rotations
        .iter()
        .fold(Matrix3::zeros(), |acc, r| acc + r.matrix());
    project_to_rotation(&(sum / crate::scalar::from_usize::<T>(rotations.len())), 1e-10)
}

/// Calibrated pinhole camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView<T: Real> {
    pub k: Matrix3<T>,
    pub r_cam: Rotation<T>,
    pub t_cam: Vector3<T>,
    pub width: u32,
    pub height: u32,
}

impl<T: Real> CameraView<T> {
    pub fn new(
        k: Matrix3<T>,
        r_cam: Rotation<T>,
        t_cam: Vector3<T>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let upper = k[(1, 0)] == T::zero() && k[(2, 0)] == T::zero() && k[(2, 1)] == T::zero();
        if !upper || !(k[(0, 0)] > T::zero()) || !(k[(1, 1)] > T::zero()) {
            return Err(Error::Config("intrinsics must be upper triangular with positive focals".into()));
        }
        if width == 0 || height == 0 {
            return Err(Error::Config("camera resolution must be positive".into()));
        }
        Ok(CameraView { k, r_cam, t_cam, width, height })
    }

    /// Camera looking from `position` towards `target`, world `up` roughly opposite image y.
    pub fn look_at(
        focal: T,
        width: u32,
        height: u32,
        position: Vector3<T>,
        target: Vector3<T>,
        up: Vector3<T>,
    ) -> Result<Self> {
        let z = (target - position).normalize();
        let x = (-up).cross(&z);
        if x.norm() < lit(1e-12) {
            return Err(Error::Config("look_at: view direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Rotation(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]));
        let t = -(r.matrix() * position);
        let k = Matrix3::new(
            focal,
            T::zero(),
            crate::scalar::lit::<T>(width as f64 / 2.0),
            T::zero(),
            focal,
            crate::scalar::lit::<T>(height as f64 / 2.0),
            T::zero(),
            T::zero(),
            T::one(),
        );
        Self::new(k, r, t, width, height)
    }

    pub fn cast<U: Real>(&self) -> CameraView<U> {
        CameraView {
            k: self.k.map(|x| lit::<U>(to_f64(x))),
            r_cam: self.r_cam.cast(),
            t_cam: self.t_cam.map(|x| lit::<U>(to_f64(x))),
            width: self.width,
            height: self.height,
        }
    }

    pub fn focal(&self) -> T {
        self.k[(0, 0)]
    }

    pub fn principal_point(&self) -> Vector2<T> {
        Vector2::new(self.k[(0, 2)], self.k[(1, 2)])
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.r_cam.matrix().transpose() * self.t_cam)
    }

    /// Optical axis in world coordinates.
    pub fn optical_axis(&self) -> Vector3<T> {
        self.r_cam.matrix().row(2).transpose()
    }

    pub fn to_camera(&self, x: &Vector3<T>) -> Vector3<T> {
        self.r_cam.matrix() * x + self.t_cam
    }

    pub fn intrinsics(&self) -> Projector<T> {
        Projector::Perspective { k: self.k }
    }

    pub fn contains(&self, uv: &Vector2<T>) -> bool {
        uv.x >= T::zero()
            && uv.y >= T::zero()
            && uv.x <= lit(self.width as f64)
            && uv.y <= lit(self.height as f64)
    }
}

/// Projection of camera-frame points to pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projector<T: Real> {
    /// Full pinhole projection with intrinsics `k`.
    Perspective { k: Matrix3<T> },
    /// Orthographic projection with scale `s` and offset `o` onto a square crop.
    WeakPerspective { s: T, o: Vector2<T>, crop: T },
}

impl<T: Real> Projector<T> {
    pub fn project(&self, x: &Vector3<T>) -> Result<Vector2<T>> {
        match self {
            Projector::Perspective { k } => {
                if !(x.z > T::zero()) {
                    return Err(Error::BehindCamera(to_f64(x.z)));
                }
                let h = k * x;
                Ok(Vector2::new(h.x / h.z, h.y / h.z))
            }
            Projector::WeakPerspective { s, o, crop } => project_weak_perspective(x, *s, o, *crop),
        }
    }

    /// Derivative of [`Projector::project`] with respect to the camera-frame point.
    pub fn jacobian(&self, x: &Vector3<T>) -> Matrix2x3<T> {
        match self {
            Projector::Perspective { k } => {
                let z = x.z;
                let (fx, skew, fy) = (k[(0, 0)], k[(0, 1)], k[(1, 1)]);
                let zi = T::one() / z;
                let zi2 = zi * zi;
                // d(x/z, y/z)/dX
                let dn = Matrix2x3::new(zi, T::zero(), -x.x * zi2, T::zero(), zi, -x.y * zi2);
                let kk = nalgebra::Matrix2::new(fx, skew, T::zero(), fy);
                kk * dn
            }
            Projector::WeakPerspective { s, crop, .. } => {
                let g = *crop / lit(2.0) * *s / lit(WEAK_PERSPECTIVE_UNIT_MM);
                Matrix2x3::new(g, T::zero(), T::zero(), T::zero(), g, T::zero())
            }
        }
    }
}

/// Pinhole projection of a world point.
pub fn project_perspective<T: Real>(x: &Vector3<T>, cam: &CameraView<T>) -> Result<Vector2<T>> {
    cam.intrinsics().project(&cam.to_camera(x))
}

/// Orthographic projection onto a `crop` x `crop` pixel square:
/// `crop/2 * (1 + s * (X_xy + o) / 1000mm)`.
pub fn project_weak_perspective<T: Real>(
    x: &Vector3<T>,
    s: T,
    o: &Vector2<T>,
    crop: T,
) -> Result<Vector2<T>> {
    if !(s > T::zero()) {
        return Err(Error::NonPositiveScale(to_f64(s)));
    }
    let half = crop / lit(2.0);
    let g = half * s / lit(WEAK_PERSPECTIVE_UNIT_MM);
    Ok(Vector2::new(half + g * (x.x + o.x), half + g * (x.y + o.y)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray<T: Real> {
    pub origin: Vector3<T>,
    pub direction: Vector3<T>,
}

impl<T: Real> Ray<T> {
    pub fn new(origin: Vector3<T>, direction: Vector3<T>) -> Self {
        Ray { origin, direction: direction.normalize() }
    }

    pub fn distance_to(&self, p: &Vector3<T>) -> T {
        let d = p - self.origin;
        (d - self.direction * self.direction.dot(&d)).norm()
    }

    pub fn at(&self, t: T) -> Vector3<T> {
        self.origin + self.direction * t
    }
}

/// Back-projection of pixel `uv` through `cam`.
pub fn pixel_ray<T: Real>(cam: &CameraView<T>, uv: &Vector2<T>) -> Ray<T> {
    let k_inv = cam
        .k
        .try_inverse()
        .expect("upper triangular intrinsics with positive focals are invertible");
    let d_cam = k_inv * Vector3::new(uv.x, uv.y, T::one());
    Ray::new(cam.center(), cam.r_cam.matrix().transpose() * d_cam)
}

/// Least-squares point closest to all rays.
pub fn triangulate<T: Real>(rays: &[Ray<T>]) -> Result<Vector3<T>> {
    if rays.len() < 2 {
        return Err(Error::DegenerateRays);
    }
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for ray in rays {
        let p = Matrix3::identity() - ray.direction * ray.direction.transpose();
        a += p;
        b += p * ray.origin;
    }
    let svd = SVD::new(a, false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(min > lit::<T>(1e-10) * max) {
        return Err(Error::DegenerateRays);
    }
    a.lu().solve(&b).ok_or(Error::DegenerateRays)
}

/// Skew-symmetric cross-product matrix.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(T::zero(), -v.z, v.y, v.z, T::zero(), -v.x, -v.y, v.x, T::zero())
}
