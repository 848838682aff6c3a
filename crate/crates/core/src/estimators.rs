//! Global orientation aligner, additive 6D orientation updates, and the
//! global translation / adaptive scale solve.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{chordal_mean, geodesic_deg, matrix_to_rot6d, rot6d_to_matrix, CameraView, Rot6d, Rotation};
use crate::scalar::{lit, to_f64, Real};

/// Skew scores closer than this (degrees) count as tied.
const SKEW_TIE_DEG: f64 = 1e-9;
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerResult<T: Real> {
    pub aligned: Vec<Rotation<T>>,
    pub outlier: usize,
    pub consensus: Rotation<T>,
    /// Sum of geodesic distances (degrees) from each view's world rotation to the others.
    pub skew_scores: Vec<T>,
}

/// Maps camera-frame orientations to world frame, drops the most skewed view,
/// averages the rest and broadcasts the consensus back to every camera.
pub fn align_orientations<T: Real>(o_views: &[Rotation<T>], cams: &[CameraView<T>]) -> Result<AlignerResult<T>> {
    if o_views.len() < 2 {
        return Err(Error::TooFewViews { need: 2, got: o_views.len() });
    }
    if cams.len() != o_views.len() {
        return Err(shape_mismatch(o_views.len(), cams.len()));
    }
    let world: Vec<Rotation<T>> = o_views.iter().zip(cams).map(|(o, c)| c.r_cam.transpose().compose(o)).collect();
    let skew_scores: Vec<T> = (0..world.len())
        .map(|v| (0..world.len()).filter(|&u| u != v).fold(T::zero(), |a, u| a + geodesic_deg(&world[v], &world[u])))
        .collect();
    let mut outlier = 0;
    for v in 1..skew_scores.len() {
        if skew_scores[v] > skew_scores[outlier] + lit(SKEW_TIE_DEG) {
            outlier = v;
        }
    }
    let rest: Vec<Rotation<T>> = world.iter().enumerate().filter(|(v, _)| *v != outlier).map(|(_, w)| *w).collect();
    let consensus = chordal_mean(&rest)?;
    let aligned = cams.iter().map(|c| c.r_cam.compose(&consensus)).collect();
    Ok(AlignerResult { aligned, outlier, consensus, skew_scores })
}

/// `rot6d(O) + dO`, re-orthonormalized.
pub fn update_orientation<T: Real>(o: &Rotation<T>, delta: &Rot6d<T>) -> Result<Rotation<T>> {
    rot6d_to_matrix(&matrix_to_rot6d(o).add(delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationSolve<T: Real> {
    pub translation: Vector3<T>,
    pub scale: T,
    /// Euclidean norm of the stacked residual (mm).
    pub residual: T,
    /// Per-view pelvis depth per unit scale (mm).
    pub depths: Vec<T>,
}

/// Normalized ray direction `((u - cx)/f, (v - cy)/f, 1)` in camera frame.
pub fn pelvis_direction<T: Real>(cam: &CameraView<T>, px: &Vector2<T>) -> Vector3<T> {
    let kinv = cam.k.try_inverse().expect("validated intrinsics are invertible");
    let h = kinv * Vector3::new(px.x, px.y, T::one());
    h / h.z
}

fn check_inputs<T: Real>(cams: &[CameraView<T>], px: &[Vector2<T>], depths: &[T]) -> Result<()> {
    if cams.len() < 2 {
        return Err(Error::TooFewViews { need: 2, got: cams.len() });
    }
    if px.len() != cams.len() {
        return Err(shape_mismatch(cams.len(), px.len()));
    }
    if depths.len() != cams.len() {
        return Err(shape_mismatch(cams.len(), depths.len()));
    }
    Ok(())
}

/// Stacked `3N x 4` system in `(T_g, alpha)`.
pub fn translation_scale_system<T: Real>(
    cams: &[CameraView<T>],
    o_g: &Rotation<T>,
    pelvis_body: &Vector3<T>,
    pelvis_px: &[Vector2<T>],
    depths: &[T],
) -> Result<(DMatrix<T>, DVector<T>)> {
    check_inputs(cams, pelvis_px, depths)?;
    let n = cams.len();
    let p_w = o_g.apply(pelvis_body);
    let mut a = DMatrix::zeros(3 * n, 4);
    let mut b = DVector::zeros(3 * n);
    for (v, cam) in cams.iter().enumerate() {
        let r = cam.r_cam.matrix();
        let col = r * p_w - pelvis_direction(cam, &pelvis_px[v]) * depths[v];
        a.view_mut((3 * v, 0), (3, 3)).copy_from(r);
        a.view_mut((3 * v, 3), (3, 1)).copy_from(&col);
        b.rows_mut(3 * v, 3).copy_from(&(-cam.t_cam));
    }
    Ok((a, b))
}

/// Least-squares `(T_g, alpha)` from per-view pelvis rays anchored at the
/// weak-perspective depths. Rank below 4 and `alpha <= 0` are errors; the
/// caller keeps its previous translation and `alpha = 1`.
pub fn solve_translation_scale<T: Real>(
    cams: &[CameraView<T>],
    o_g: &Rotation<T>,
    pelvis_body: &Vector3<T>,
    pelvis_px: &[Vector2<T>],
    depths: &[T],
) -> Result<TranslationSolve<T>> {
    let (a, b) = translation_scale_system(cams, o_g, pelvis_body, pelvis_px, depths)?;
    // equilibrate columns so the rank test is unit-free
    let norms: Vec<T> = (0..4).map(|c| a.column(c).norm()).collect();
    if norms.iter().any(|n| !(*n > T::zero())) {
        return Err(Error::RankDeficientSystem(3));
    }
    let mut scaled = a.clone();
    for (c, n) in norms.iter().enumerate() {
        scaled.column_mut(c).scale_mut(T::one() / *n);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let rank = svd.singular_values.iter().filter(|s| **s > smax * lit(RANK_TOL)).count();
    if rank < 4 {
        return Err(Error::RankDeficientSystem(rank));
    }
    let y = svd.solve(&b, T::zero()).map_err(|_| Error::RankDeficientSystem(rank))?;
    let x = DVector::from_fn(4, |i, _| y[i] / norms[i]);
    let scale = x[3];
    if !(scale > T::zero()) {
        return Err(Error::NonPositiveGlobalScale(to_f64(scale)));
    }
    let residual = (&a * &x - &b).norm();
    Ok(TranslationSolve { translation: Vector3::new(x[0], x[1], x[2]), scale, residual, depths: depths.to_vec() })
}

/// The same system with `alpha` pinned to 1: mean of the per-view world
/// pelvis points minus the rotated body pelvis.
pub fn solve_translation_fixed_scale<T: Real>(
    cams: &[CameraView<T>],
    o_g: &Rotation<T>,
    pelvis_body: &Vector3<T>,
    pelvis_px: &[Vector2<T>],
    depths: &[T],
) -> Result<TranslationSolve<T>> {
    let (a, b) = translation_scale_system(cams, o_g, pelvis_body, pelvis_px, depths)?;
    let n = cams.len();
    let p_w = o_g.apply(pelvis_body);
    let mut sum = Vector3::zeros();
    for (v, cam) in cams.iter().enumerate() {
        let x_cam = pelvis_direction(cam, &pelvis_px[v]) * depths[v];
        sum += cam.r_cam.transpose().apply(&(x_cam - cam.t_cam)) - p_w;
    }
    let t = sum / lit::<T>(n as f64);
    let x = DVector::from_vec(vec![t.x, t.y, t.z, T::one()]);
    let residual = (&a * &x - &b).norm();
    Ok(TranslationSolve { translation: t, scale: T::one(), residual, depths: depths.to_vec() })
}

pub fn weak_persp_to_translation<T: Real>(s: T, o: &Vector2<T>, focal: T, crop: T) -> Result<Vector3<T>> {
    if !(s > T::zero()) {
        return Err(Error::NonPositiveScale(to_f64(s)));
    }
    let unit = lit::<T>(crate::geometry::WEAK_PERSPECTIVE_UNIT_MM);
    Ok(Vector3::new(o.x, o.y, lit::<T>(2.0) * focal * unit / (s * crop)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{pixel_ray, project_perspective, project_weak_perspective, triangulate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rig(n: usize) -> Vec<CameraView<f64>> {
        (0..n)
            .map(|i| {
                let a = i as f64 * std::f64::consts::TAU / n as f64;
                CameraView::look_at(480.0, 224, 224, Vector3::new(4500.0 * a.sin(), 900.0, -4500.0 * a.cos()), Vector3::new(0.0, 900.0, 0.0), Vector3::y()).unwrap()
            })
            .collect()
    }

    fn random_rotation(rng: &mut ChaCha8Rng, max_angle: f64) -> Rotation<f64> {
        let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Rotation::about_axis(&axis, rng.gen_range(0.0..max_angle))
    }

    #[test]
    fn aligner_consensus_case() {
        let cams = rig(4);
        let w = Rotation::about_axis(&Vector3::new(0.3, 1.0, -0.2), 1.1);
        let views: Vec<_> = cams.iter().map(|c| c.r_cam.compose(&w)).collect();
        let res = align_orientations(&views, &cams).unwrap();
        assert!(geodesic_deg(&res.consensus, &w) < 1e-6);
        for (a, v) in res.aligned.iter().zip(&views) {
            assert!((a.matrix() - v.matrix()).abs().max() < 1e-9);
        }
        assert!(res.skew_scores.iter().all(|s| *s < 1e-5));
        assert_eq!(res.outlier, 0);
        let again = align_orientations(&res.aligned, &cams).unwrap();
        assert_eq!(again.outlier, res.outlier);
        assert!((again.consensus.matrix() - res.consensus.matrix()).abs().max() < 1e-12);
    }

    #[test]
    fn aligner_rejects_skewed_view() {
        let cams = rig(4);
        let w = Rotation::about_axis(&Vector3::new(0.0, 1.0, 0.0), 0.4);
        let mut views: Vec<_> = cams.iter().map(|c| c.r_cam.compose(&w)).collect();
        views[2] = views[2].compose(&Rotation::about_axis(&Vector3::x(), 30f64.to_radians()));
        let res = align_orientations(&views, &cams).unwrap();
        assert_eq!(res.outlier, 2);
        assert!(geodesic_deg(&res.consensus, &w) < 1e-6);
        for (a, c) in res.aligned.iter().zip(&cams) {
            assert!((a.matrix() - c.r_cam.compose(&res.consensus).matrix()).abs().max() < 1e-12);
        }
    }

    #[test]
    fn aligner_needs_two_views() {
        let cams = rig(1);
        assert!(matches!(align_orientations(&[Rotation::identity()], &cams), Err(Error::TooFewViews { .. })));
    }

    #[test]
    fn update_orientation_examples() {
        let o = Rotation::about_axis(&Vector3::new(1.0, 2.0, 3.0), 0.7);
        assert_eq!(update_orientation(&o, &Rot6d::zero()).unwrap(), rot6d_to_matrix(&matrix_to_rot6d(&o)).unwrap());
        let target = Rotation::about_axis(&Vector3::new(-1.0, 0.2, 0.0), 2.0);
        let d = matrix_to_rot6d(&target).sub(&matrix_to_rot6d(&o));
        assert!(geodesic_deg(&update_orientation(&o, &d).unwrap(), &target) < 1e-6);
        let kill = Rot6d([-o.matrix()[(0, 0)], -o.matrix()[(1, 0)], -o.matrix()[(2, 0)], 0.0, 0.0, 0.0]);
        assert!(update_orientation(&o, &kill).is_err());
    }

    #[test]
    fn update_orientation_continuity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let o = random_rotation(&mut rng, 3.0);
            let d: [f64; 6] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            let mut prev = 0.0;
            for k in 1..=5 {
                let eps = 1e-3 * k as f64;
                let delta = Rot6d(d.map(|x| x * eps));
                let ang = geodesic_deg(&update_orientation(&o, &delta).unwrap(), &o);
                // the change grows with the step and stays within a Lipschitz bound
                assert!(ang >= prev - 1e-9);
                assert!(ang.to_radians() <= 4.0 * delta.norm());
                prev = ang;
            }
        }
    }

    #[test]
    fn weak_perspective_depth() {
        let (f, crop, z): (f64, f64, f64) = (5000.0, 224.0, 7300.0);
        let s = 2.0 * f * 1000.0 / (crop * z);
        let t = weak_persp_to_translation(s, &Vector2::new(3.0, -4.0), f, crop).unwrap();
        assert!((t.z - z).abs() < 1e-9 && t.x == 3.0 && t.y == -4.0);
        let t2 = weak_persp_to_translation(2.0 * s, &Vector2::zeros(), f, crop).unwrap();
        assert!((t2.z - z / 2.0).abs() < 1e-9);
        assert!(weak_persp_to_translation(0.0, &Vector2::zeros(), f, crop).is_err());
        // on-axis point: weak-perspective and perspective agree at the conversion depth
        let x = Vector3::new(120.0, -80.0, 0.0);
        let weak = project_weak_perspective(&x, s, &Vector2::zeros(), crop).unwrap();
        let k = nalgebra::Matrix3::new(f, 0.0, crop / 2.0, 0.0, f, crop / 2.0, 0.0, 0.0, 1.0);
        let cam = CameraView::new(k, Rotation::identity(), t2 * 2.0, 224, 224).unwrap();
        let persp = project_perspective(&x, &cam).unwrap();
        assert!((weak - persp).norm() < 1e-9);
    }

    struct Case {
        cams: Vec<CameraView<f64>>,
        o_g: Rotation<f64>,
        p: Vector3<f64>,
        t_g: Vector3<f64>,
        alpha: f64,
        px: Vec<Vector2<f64>>,
        depths: Vec<f64>,
    }

    fn case(seed: u64) -> Case {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cams = rig(4);
        let o_g = random_rotation(&mut rng, 3.0);
        let p = Vector3::new(rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0));
        let t_g = Vector3::new(rng.gen_range(-300.0..300.0), rng.gen_range(600.0..1200.0), rng.gen_range(-300.0..300.0));
        let alpha = rng.gen_range(0.8..1.2);
        let world = t_g + o_g.apply(&p) * alpha;
        let mut px = Vec::new();
        let mut depths = Vec::new();
        for c in &cams {
            px.push(project_perspective(&world, c).unwrap());
            depths.push(c.to_camera(&world).z / alpha);
        }
        Case { cams, o_g, p, t_g, alpha, px, depths }
    }

    #[test]
    fn noiseless_recovery() {
        for seed in 0..20 {
            let c = case(seed);
            let s = solve_translation_scale(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
            assert!((s.scale - c.alpha).abs() < 1e-6, "{seed}");
            assert!((s.translation - c.t_g).norm() < 1e-6);
            assert!(s.residual < 1e-6);
        }
    }

    #[test]
    fn unit_scale_exact() {
        let mut c = case(7);
        let world = c.t_g + c.o_g.apply(&c.p) * c.alpha;
        c.depths = c.cams.iter().map(|cam| cam.to_camera(&world).z).collect();
        c.t_g = world - c.o_g.apply(&c.p);
        let s = solve_translation_scale(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
        assert!((s.scale - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fixed_scale_matches_triangulation() {
        let c = case(11);
        let fixed = solve_translation_fixed_scale(&c.cams, &c.o_g, &c.p, &c.px, &c.depths.iter().map(|d| d * c.alpha).collect::<Vec<_>>()).unwrap();
        let rays: Vec<_> = c.cams.iter().zip(&c.px).map(|(cam, uv)| pixel_ray(cam, uv)).collect();
        let x = triangulate(&rays).unwrap();
        assert!((fixed.translation - (x - c.o_g.apply(&c.p))).norm() < 1e-6);
    }

    #[test]
    fn degenerate_rig_is_error() {
        let c = case(2);
        let same = vec![c.cams[0].clone(); 4];
        let px = vec![c.px[0]; 4];
        let depths = vec![c.depths[0]; 4];
        assert!(matches!(solve_translation_scale(&same, &c.o_g, &c.p, &px, &depths), Err(Error::RankDeficientSystem(_))));
        assert!(solve_translation_scale(&c.cams[..1], &c.o_g, &c.p, &c.px[..1], &c.depths[..1]).is_err());
    }

    fn residual(a: &DMatrix<f64>, b: &DVector<f64>, x: &[f64; 4]) -> f64 {
        (a * DVector::from_column_slice(x) - b).norm()
    }

    /// Coarse-to-fine grid search over `(T_g, alpha)`.
    fn grid_refine(a: &DMatrix<f64>, b: &DVector<f64>, center: [f64; 4], half: [f64; 4], n: usize, rounds: usize) -> [f64; 4] {
        let mut best = center;
        let mut half = half;
        for _ in 0..rounds {
            let c = best;
            let mut best_r = residual(a, b, &best);
            let step = |k: usize, i: usize| c[k] - half[k] + 2.0 * half[k] * i as f64 / (n - 1) as f64;
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        for l in 0..n {
                            let x = [step(0, i), step(1, j), step(2, k), step(3, l)];
                            let r = residual(a, b, &x);
                            if r < best_r {
                                best_r = r;
                                best = x;
                            }
                        }
                    }
                }
            }
            half = half.map(|h| h * 0.5);
        }
        best
    }

    #[test]
    fn perturbed_pixel_matches_grid_oracle() {
        let mut c = case(5);
        c.px[1].x += 5.0;
        let s = solve_translation_scale(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
        let (a, b) = translation_scale_system(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
        let g = grid_refine(&a, &b, [c.t_g.x, c.t_g.y, c.t_g.z, c.alpha], [100.0, 100.0, 100.0, 0.05], 9, 40);
        assert!((s.translation - Vector3::new(g[0], g[1], g[2])).norm() < 1e-3, "{:?} vs {g:?}", s);
        assert!((s.scale - g[3]).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn solve_not_beaten_by_grid(seed in 0u64..1000, bump in -8.0f64..8.0) {
            let mut c = case(seed);
            c.px[seed as usize % 4].y += bump;
            c.depths[0] *= 1.01;
            let s = solve_translation_scale(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
            let (a, b) = translation_scale_system(&c.cams, &c.o_g, &c.p, &c.px, &c.depths).unwrap();
            let g = grid_refine(&a, &b, [c.t_g.x, c.t_g.y, c.t_g.z, c.alpha], [60.0, 60.0, 60.0, 0.05], 7, 4);
            prop_assert!(s.residual <= residual(&a, &b, &g) + 1e-9);
        }

        #[test]
        fn aligner_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cams = rig(4);
            let views: Vec<_> = cams.iter().map(|c| c.r_cam.compose(&random_rotation(&mut rng, 0.5))).collect();
            let perm = [1usize, 3, 0, 2];
            let pv: Vec<_> = perm.iter().map(|&i| views[i]).collect();
            let pc: Vec<_> = perm.iter().map(|&i| cams[i].clone()).collect();
            let a = align_orientations(&views, &cams).unwrap();
            let b = align_orientations(&pv, &pc).unwrap();
            prop_assert_eq!(perm[b.outlier], a.outlier);
            prop_assert!((a.consensus.matrix() - b.consensus.matrix()).abs().max() < 1e-9);
        }
    }
}
