//! Pose and mesh error metrics (millimetres, percent, degrees).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::scalar::{lit, Real};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;

fn check<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(shape_mismatch(gt.len(), pred.len()));
    }
    if pred.is_empty() {
        return Err(Error::Empty("joint set"));
    }
    Ok(())
}

fn mean_distance<T: Real>(a: impl Iterator<Item = Vector3<T>>, b: &[Vector3<T>]) -> T {
    let n = lit::<T>(b.len() as f64);
    a.zip(b).fold(T::zero(), |acc, (p, g)| acc + (p - g).norm()) / n
}

/// Mean joint distance without any alignment.
pub fn absolute_mpjpe<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<T> {
    check(pred, gt)?;
    Ok(mean_distance(pred.iter().copied(), gt))
}

/// Mean joint distance after subtracting each set's root (index 0).
pub fn mpjpe<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<T> {
    check(pred, gt)?;
    let shift = gt[0] - pred[0];
    Ok(mean_distance(pred.iter().map(|p| p + shift), gt))
}

/// Root-aligned mean vertex distance; the root is the first joint of each body.
pub fn pve<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>], pred_root: &Vector3<T>, gt_root: &Vector3<T>) -> Result<T> {
    check(pred, gt)?;
    let shift = gt_root - pred_root;
    Ok(mean_distance(pred.iter().map(|p| p + shift), gt))
}

/// Least-squares similarity `gt ~ s R pred + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity<T: Real> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Similarity<T> {
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }
}

/// Orthogonal Procrustes with scale: SVD of the centred cross-covariance with
/// a determinant correction.
pub fn procrustes<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<Similarity<T>> {
    check(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::DegenerateConfiguration("collinear or coincident points"));
    }
    let n = lit::<T>(pred.len() as f64);
    let mp = pred.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mg = gt.iter().fold(Vector3::zeros(), |a, g| a + g) / n;
    let mut cov = Matrix3::zeros();
    let mut var_p = T::zero();
    let mut var_g = T::zero();
    for (p, g) in pred.iter().zip(gt) {
        let (pc, gc) = (p - mp, g - mg);
        cov += gc * pc.transpose();
        var_p += pc.norm_squared();
        var_g += gc.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let mut sv: Vec<(usize, T)> = svd.singular_values.iter().copied().enumerate().collect();
    sv.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let tol = lit::<T>(1e-12) * (var_p * var_g).sqrt().max(T::one());
    // both sets must span at least a plane
    if !(sv[1].1 > tol) || !(var_p > T::zero()) {
        return Err(Error::DegenerateConfiguration("collinear or coincident points"));
    }
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        d[(sv[2].0, sv[2].0)] = -T::one();
    }
    let rotation = u * d * vt;
    let trace = (0..3).fold(T::zero(), |a, i| a + svd.singular_values[i] * d[(i, i)]);
    let scale = trace / var_p;
    let translation = mg - rotation * mp * scale;
    Ok(Similarity { scale, rotation, translation })
}

pub fn pa_mpjpe<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<T> {
    let sim = procrustes(pred, gt)?;
    Ok(mean_distance(pred.iter().map(|p| sim.apply(p)), gt))
}

/// `(PCK, AUC)` in percent over the root-aligned non-root joints:
/// PCK at 150 mm, AUC the mean PCK over thresholds `0, 5, ..., 150` mm.
pub fn pck_auc<T: Real>(pred: &[Vector3<T>], gt: &[Vector3<T>]) -> Result<(f64, f64)> {
    check(pred, gt)?;
    if pred.len() < 2 {
        return Err(Error::Empty("joint set"));
    }
    let shift = gt[0] - pred[0];
    let errors: Vec<f64> = pred.iter().zip(gt).skip(1).map(|(p, g)| crate::scalar::to_f64((p + shift - g).norm())).collect();
    let pck = |th: f64| 100.0 * errors.iter().filter(|e| **e <= th).count() as f64 / errors.len() as f64;
    let steps = (PCK_THRESHOLD_MM / AUC_STEP_MM).round() as usize;
    let auc = (0..=steps).map(|k| pck(k as f64 * AUC_STEP_MM)).sum::<f64>() / (steps + 1) as f64;
    Ok((pck(PCK_THRESHOLD_MM), auc))
}

/// All metrics of one prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mpjpe: f64,
    pub pa_mpjpe: f64,
    pub pve: f64,
    pub abs_mpjpe: f64,
    pub o_err_deg: f64,
    pub pck: f64,
    pub auc: f64,
}
