//! The iterative multi-view regression loop: grid-sampled initialization,
//! feedback iterations over the level schedule, and the final global solve.
//!
//! Each view carries its own placement of the unscaled body: camera-frame
//! orientation `O^v` and weak camera `(s, o)`. Calibrated views project
//! `O^v y + T^v` through the real intrinsics with `T^v` derived from `(s, o)`;
//! calibration-free views project `O^v y` weak-perspectively.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, RowDVector, SMatrix, SVector, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::body_model::{downsample, forward, pose_body, BodyState, BodyTemplate, Posed, WeakCamera};
use crate::error::{shape_mismatch, Error, Result};
use crate::estimators::{align_orientations, solve_translation_fixed_scale, solve_translation_scale, update_orientation, AlignerResult};
use crate::features::{bilinear_grad, bilinear_sample, channel, extract_paf, grid_sample_init, FeaturePyramid};
use crate::fusion::{aggregate, decode_camera, decode_init, decode_orientation, decode_pose_shape, orientation_tokens, transformer_encode, AggregationKind, FusionWeights, CAMERA_SCALE_MIN};
use crate::geometry::{chordal_mean, geodesic_deg, matrix_to_rot6d, skew, CameraView, Projector, Rotation};
use crate::metrics::{absolute_mpjpe, mpjpe, pa_mpjpe, pck_auc, pve, Metrics};
use crate::scalar::{lit, to_f64, Real};
use crate::scenario::{initial_state, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Descent,
    Neural,
}

/// How per-view orientation evidence is combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OrientationFusion {
    /// Every view steps on its own evidence.
    Independent,
    /// One world-frame step from all views (descent: pooled normal equations;
    /// neural: transformer over the view tokens).
    Joint,
}

/// Feature source of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Grid sampling of the coarsest map.
    Grid,
    /// Mesh-vertex sampling of the given pyramid level.
    Mesh(usize),
}

impl Stage {
    pub fn level(&self) -> usize {
        match self {
            Stage::Grid => 0,
            Stage::Mesh(l) => *l,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Stage::Grid => "grid0".into(),
            Stage::Mesh(l) => l.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub n_views: usize,
    pub n_iterations: usize,
    pub schedule: Vec<Stage>,
    pub mode: Mode,
    pub aggregation: AggregationKind,
    pub calibrated: bool,
    pub aligner: bool,
    pub orientation_fusion: OrientationFusion,
    pub orientation_path: bool,
    pub camera_path: bool,
    /// Solve `T_g` and the global scale from the pelvis rays after the last iteration.
    pub global_solve: bool,
    /// Descent step size.
    pub step: f64,
    /// Descent damping, relative to the normal-matrix diagonal.
    pub damping: f64,
    /// Per-joint damping of the pose solve, relative to the mean diagonal of
    /// that joint's block; holds weakly observed axes such as limb twist.
    pub ridge: f64,
    /// Gauss-Newton rounds per feedback iteration.
    pub inner_steps: usize,
    /// Step halvings tried before a sub-step is rejected.
    pub backtracks: usize,
    /// Weight of the surface-coordinate residual, pixels per metre; zero
    /// uses the offset channels alone.
    pub surface_weight: f64,
    /// Extra weight of the depth surface coordinate, which separates the
    /// front and back of the body.
    pub surface_depth_weight: f64,
    /// Occupancy below which surface coordinates are ignored.
    pub surface_gate: f64,
    /// Ramp the surface weight to zero over the inner rounds at the finest level.
    pub surface_anneal: bool,
    /// Cauchy scale of the sample weights, in grid cells of the sampled
    /// level; zero weights every sample equally.
    pub robust_cells: f64,
    /// Focal length of the calibration-free weak-perspective depth conversion.
    pub default_focal: f64,
    pub grid_res: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            n_views: 4,
            n_iterations: 4,
            schedule: vec![Stage::Grid, Stage::Mesh(1), Stage::Mesh(1), Stage::Mesh(2)],
            mode: Mode::Descent,
            aggregation: AggregationKind::MaxPool,
            calibrated: true,
            aligner: true,
            orientation_fusion: OrientationFusion::Joint,
            orientation_path: true,
            camera_path: true,
            global_solve: true,
            step: 1.0,
            damping: 1e-3,
            ridge: 0.3,
            inner_steps: 10,
            backtracks: 4,
            surface_weight: 100.0,
            surface_depth_weight: 2.0,
            surface_gate: 0.5,
            surface_anneal: true,
            robust_cells: 0.375,
            default_focal: 5000.0,
            grid_res: 8,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.len() != self.n_iterations {
            return Err(Error::Config(format!("schedule has {} stages for {} iterations", self.schedule.len(), self.n_iterations)));
        }
        if self.schedule.first() != Some(&Stage::Grid) || self.schedule[1..].contains(&Stage::Grid) {
            return Err(Error::Config("the schedule starts with the grid stage and only there".into()));
        }
        if self.schedule.iter().any(|s| s.level() > 2) {
            return Err(Error::Config("pyramid levels are 0, 1, 2".into()));
        }
        if !(self.surface_weight >= 0.0) || !(self.surface_depth_weight >= 0.0) || !(self.robust_cells >= 0.0) {
            return Err(Error::Config("surface weights and robust scale must be non-negative".into()));
        }
        if !(self.step > 0.0) || !(self.damping >= 0.0) || !(self.ridge >= 0.0) {
            return Err(Error::Config("step must be positive, damping and ridge non-negative".into()));
        }
        if self.n_views == 0 {
            return Err(Error::TooFewViews { need: 1, got: 0 });
        }
        if !(self.default_focal > 0.0) || self.grid_res < 2 || self.inner_steps == 0 {
            return Err(Error::Config("default focal, grid resolution and inner steps must be positive".into()));
        }
        Ok(())
    }

    fn uses_aligner(&self) -> bool {
        self.calibrated && self.aligner && self.n_views >= 2
    }

    fn joint_orientation(&self) -> bool {
        self.calibrated && self.orientation_fusion == OrientationFusion::Joint && self.n_views >= 2
    }
}

/// Everything the loop reads but never changes.
#[derive(Debug, Clone)]
pub struct Problem<'a, T: Real> {
    pub tpl: &'a BodyTemplate<T>,
    pub cams: &'a [CameraView<T>],
    pub pyramids: &'a [FeaturePyramid<T>],
    /// Rest-pose surface coordinates (metres) of the downsampled vertices.
    pub surface: Vec<Vector3<T>>,
}

impl<'a, T: Real> Problem<'a, T> {
    pub fn new(tpl: &'a BodyTemplate<T>, cams: &'a [CameraView<T>], pyramids: &'a [FeaturePyramid<T>]) -> Result<Self> {
        if cams.is_empty() {
            return Err(Error::TooFewViews { need: 1, got: 0 });
        }
        if pyramids.len() != cams.len() {
            return Err(shape_mismatch(cams.len(), pyramids.len()));
        }
        let surface = downsample(&tpl.rest_vertices, tpl)?.into_iter().map(|x| x / lit::<T>(1000.0)).collect();
        Ok(Problem { tpl, cams, pyramids, surface })
    }

    pub fn n_views(&self) -> usize {
        self.cams.len()
    }
}

/// Placement of the body in one view's projector input space.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame<T: Real> {
    pub orientation: Rotation<T>,
    pub translation: Vector3<T>,
    pub projector: Projector<T>,
}

pub fn view_frame<T: Real>(cam: &CameraView<T>, state: &BodyState<T>, v: usize, calibrated: bool) -> Result<ViewFrame<T>> {
    let view = state.views.get(v).ok_or(Error::TooFewViews { need: v + 1, got: state.views.len() })?;
    let crop = lit::<T>(cam.width as f64);
    if calibrated {
        Ok(ViewFrame {
            orientation: view.orientation,
            translation: view.camera.translation(cam.focal(), crop)?,
            projector: cam.intrinsics(),
        })
    } else {
        if !(view.camera.scale > T::zero()) {
            return Err(Error::NonPositiveScale(to_f64(view.camera.scale)));
        }
        Ok(ViewFrame {
            orientation: view.orientation,
            translation: Vector3::zeros(),
            projector: Projector::WeakPerspective { s: view.camera.scale, o: view.camera.offset, crop },
        })
    }
}

/// Rows of one vertex sample: the two offset channels, then the weighted
/// surface-coordinate mismatch.
pub const RESIDUAL_ROWS: usize = 5;

pub type SampleResidual<T> = SVector<T, RESIDUAL_ROWS>;

/// One sampled vertex of one view, linearized.
#[derive(Debug, Clone, Copy)]
struct Term<T: Real> {
    /// Position in the downsampled index list.
    k: usize,
    /// Body-frame vertex.
    y: Vector3<T>,
    /// Projector input point.
    x: Vector3<T>,
    r: SampleResidual<T>,
    /// `dr/d(u, v)`.
    g: SMatrix<T, RESIDUAL_ROWS, 2>,
    /// `g * d(u, v)/dx`.
    a: SMatrix<T, RESIDUAL_ROWS, 3>,
    /// Robust weight of the sample.
    w: T,
}

struct ViewLinearization<T: Real> {
    frame: ViewFrame<T>,
    terms: Vec<Term<T>>,
    valid: Vec<bool>,
}

/// Residual and its pixel derivative for downsampled vertex `k` sampled at `uv`.
fn sample_residual<T: Real>(problem: &Problem<T>, v: usize, level: usize, k: usize, uv: &Vector2<T>, config: &EngineConfig) -> Option<(SampleResidual<T>, SMatrix<T, RESIDUAL_ROWS, 2>)> {
    let map = problem.pyramids[v].level(level);
    let s = bilinear_sample(map, uv);
    if !s.valid {
        return None;
    }
    let grad = bilinear_grad(map, uv);
    let mut r = SampleResidual::zeros();
    let mut g = SMatrix::<T, RESIDUAL_ROWS, 2>::zeros();
    for (row, ch) in [channel::DU, channel::DV].into_iter().enumerate() {
        r[row] = s.values[ch];
        g[(row, 0)] = grad[(ch, 0)];
        g[(row, 1)] = grad[(ch, 1)];
    }
    let w = lit::<T>(config.surface_weight);
    let surface = map.channels >= channel::SURFACE + 3 && w > T::zero() && s.values[channel::OCCUPANCY] >= lit(config.surface_gate);
    if surface {
        for c in 0..3 {
            let ch = channel::SURFACE + c;
            let w = if c == 2 { w * lit(config.surface_depth_weight) } else { w };
            r[2 + c] = w * (s.values[ch] - problem.surface[k][c]);
            g[(2 + c, 0)] = w * grad[(ch, 0)];
            g[(2 + c, 1)] = w * grad[(ch, 1)];
        }
    }
    Some((r, g))
}

fn linearize_view<T: Real>(problem: &Problem<T>, state: &BodyState<T>, posed: &Posed<T>, v: usize, level: usize, config: &EngineConfig) -> Result<ViewLinearization<T>> {
    let frame = view_frame(&problem.cams[v], state, v, config.calibrated)?;
    let n = problem.tpl.n_down();
    let mut terms = Vec::with_capacity(n);
    let mut valid = vec![false; n];
    let map = problem.pyramids[v].level(level);
    let robust = lit::<T>(config.robust_cells) * map.pixel_width / lit(map.cols as f64);
    for (k, &i) in problem.tpl.down_indices.iter().enumerate() {
        let y = posed.vertices[i];
        let x = frame.orientation.apply(&y) + frame.translation;
        let Ok(uv) = frame.projector.project(&x) else { continue };
        let Some((r, g)) = sample_residual(problem, v, level, k, &uv, config) else { continue };
        let a = g * frame.projector.jacobian(&x);
        let w = if robust > T::zero() { T::one() / (T::one() + (r.norm() / robust).powi(2)) } else { T::one() };
        terms.push(Term { k, y, x, r, g, a, w });
        valid[k] = true;
    }
    Ok(ViewLinearization { frame, terms, valid })
}

fn linearize<T: Real>(problem: &Problem<T>, state: &BodyState<T>, level: usize, config: &EngineConfig) -> Result<(Posed<T>, Vec<ViewLinearization<T>>)> {
    let posed = pose_body(problem.tpl, &state.pose, &state.shape)?;
    let lins = (0..problem.n_views())
        .into_par_iter()
        .map(|v| linearize_view(problem, state, &posed, v, level, config))
        .collect::<Result<Vec<_>>>()?;
    Ok((posed, lins))
}

/// Mean sampled `|(du, dv)|` over every valid vertex of every view, and the
/// mean norm of the full residual the descent steps minimize.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    pub mean_px: f64,
    pub objective: f64,
    pub n_valid: usize,
}

fn residual_of<T: Real>(lins: &[ViewLinearization<T>]) -> Residual {
    let (px, obj, n) = lins
        .iter()
        .flat_map(|l| &l.terms)
        .fold((0.0, 0.0, 0usize), |(p, o, n), t| (p + to_f64(t.r.fixed_rows::<2>(0).norm()), o + to_f64(t.r.norm()), n + 1));
    let mean = |x: f64| if n > 0 { x / n as f64 } else { 0.0 };
    Residual { mean_px: mean(px), objective: mean(obj), n_valid: n }
}

pub fn residual<T: Real>(problem: &Problem<T>, state: &BodyState<T>, level: usize, config: &EngineConfig) -> Result<Residual> {
    Ok(residual_of(&linearize(problem, state, level, config)?.1))
}

/// Per downsampled vertex of view `v`: the sample pixel and the residual
/// rows, or `None` when the vertex is behind the camera or off the image.
pub fn view_residuals<T: Real>(problem: &Problem<T>, state: &BodyState<T>, v: usize, level: usize, config: &EngineConfig) -> Result<Vec<Option<(Vector2<T>, SampleResidual<T>)>>> {
    let posed = pose_body(problem.tpl, &state.pose, &state.shape)?;
    let frame = view_frame(&problem.cams[v], state, v, config.calibrated)?;
    Ok(problem
        .tpl
        .down_indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let x = frame.orientation.apply(&posed.vertices[i]) + frame.translation;
            let uv = frame.projector.project(&x).ok()?;
            sample_residual(problem, v, level, k, &uv, config).map(|(r, _)| (uv, r))
        })
        .collect())
}

/// Full-chain derivative of one view's sampled residuals.
#[derive(Debug, Clone)]
pub struct PafJacobian<T: Real> {
    /// Downsampled-vertex positions of the row blocks.
    pub vertices: Vec<usize>,
    pub pixels: Vec<Vector2<T>>,
    /// `RESIDUAL_ROWS` entries per vertex.
    pub residual: DVector<T>,
    /// Columns: right rotation increments of joints `1..`, shape
    /// coefficients, then a left camera-frame increment of `O^v`.
    pub jacobian: DMatrix<T>,
}

/// Feature gradient x projection Jacobian x kinematic Jacobian for view `v`.
pub fn paf_jacobian<T: Real>(problem: &Problem<T>, state: &BodyState<T>, v: usize, level: usize, config: &EngineConfig) -> Result<PafJacobian<T>> {
    const R: usize = RESIDUAL_ROWS;
    let posed = pose_body(problem.tpl, &state.pose, &state.shape)?;
    let lin = linearize_view(problem, state, &posed, v, level, config)?;
    let np = problem.tpl.n_local_params();
    let n = lin.terms.len();
    let mut jac = DMatrix::zeros(R * n, np + 3);
    let mut res = DVector::zeros(R * n);
    let o = lin.frame.orientation.matrix();
    for (row, t) in lin.terms.iter().enumerate() {
        let kin = posed.vertex_jacobian(problem.tpl, problem.tpl.down_indices[t.k]);
        jac.view_mut((R * row, 0), (R, np)).copy_from(&(t.a * o * kin));
        jac.view_mut((R * row, np), (R, 3)).copy_from(&(t.a * (-skew(&(o * t.y)))));
        res.rows_mut(R * row, R).copy_from(&t.r);
    }
    Ok(PafJacobian {
        vertices: lin.terms.iter().map(|t| t.k).collect(),
        pixels: lin.terms.iter().map(|t| lin.frame.projector.project(&t.x).unwrap_or_else(|_| Vector2::zeros())).collect(),
        residual: res,
        jacobian: jac,
    })
}

/// `(H + lambda diag H + (ridge + eps) max diag H) x = b`.
fn damped_solve<T: Real>(h: &DMatrix<T>, b: &DVector<T>, lambda: T, ridge: T) -> Option<DVector<T>> {
    let n = h.nrows();
    let max_diag = (0..n).fold(T::zero(), |m, i| m.max(h[(i, i)]));
    if !(max_diag > T::zero()) {
        return None;
    }
    let floor = max_diag * (ridge + lit(1e-9));
    let mut m = h.clone();
    for i in 0..n {
        m[(i, i)] += lambda * h[(i, i)] + floor;
    }
    m.cholesky().map(|c| c.solve(b))
}

/// Adds `ridge * trace / 3` to the diagonal of each joint's 3x3 block, damping
/// the weakest rotation axis of a joint relative to its strongest ones.
fn ridged<T: Real>(h: &DMatrix<T>, n_pose: usize, ridge: T) -> DMatrix<T> {
    let mut m = h.clone();
    for j in 0..n_pose {
        let add = ridge * (h[(3 * j, 3 * j)] + h[(3 * j + 1, 3 * j + 1)] + h[(3 * j + 2, 3 * j + 2)]) / lit(3.0);
        for c in 0..3 {
            m[(3 * j + c, 3 * j + c)] += add;
        }
    }
    m
}

fn solve3<T: Real>(h: &Matrix3<T>, b: &Vector3<T>, lambda: T) -> Option<Vector3<T>> {
    let hd = DMatrix::from_column_slice(3, 3, h.as_slice());
    let bd = DVector::from_column_slice(b.as_slice());
    damped_solve(&hd, &bd, lambda, T::zero()).map(|x| Vector3::new(x[0], x[1], x[2]))
}

/// Keeps `O_g` and `T_g` of the state consistent with its per-view placements.
fn refresh_globals<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, calibrated: bool) -> Result<()> {
    let world: Vec<Rotation<T>> = state.views.iter().zip(problem.cams).map(|(v, c)| c.r_cam.transpose().compose(&v.orientation)).collect();
    state.orientation = chordal_mean(&world)?;
    let mut t = Vector3::zeros();
    for (v, cam) in problem.cams.iter().enumerate() {
        let tv = if calibrated {
            state.views[v].camera.translation(cam.focal(), lit(cam.width as f64))?
        } else {
            view_frame(cam, state, v, true)?.translation
        };
        t += cam.r_cam.transpose().apply(&(tv - cam.t_cam));
    }
    state.translation = t / lit::<T>(problem.n_views() as f64);
    Ok(())
}

fn apply_aligner<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>) -> Result<AlignerResult<T>> {
    let views: Vec<Rotation<T>> = state.views.iter().map(|v| v.orientation).collect();
    let res = align_orientations(&views, problem.cams)?;
    for (v, o) in state.views.iter_mut().zip(&res.aligned) {
        v.orientation = *o;
    }
    state.orientation = res.consensus;
    Ok(res)
}

/// Rotates `o` by the left increment `w` through the additive 6D path.
fn rotate_additive<T: Real>(o: &Rotation<T>, w: &Vector3<T>) -> Result<Rotation<T>> {
    let target = Rotation::exp(w).compose(o);
    update_orientation(o, &matrix_to_rot6d(&target).sub(&matrix_to_rot6d(o)))
}

/// Summary of the aligner for the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignerSummary {
    pub outlier: usize,
    pub skew_scores: Vec<f64>,
}

impl<T: Real> From<&AlignerResult<T>> for AlignerSummary {
    fn from(r: &AlignerResult<T>) -> Self {
        AlignerSummary { outlier: r.outlier, skew_scores: r.skew_scores.iter().map(|s| to_f64(*s)).collect() }
    }
}

/// Diagnostics of one iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub aligner: Option<AlignerSummary>,
    /// Views whose orientation update was degenerate and skipped.
    pub failed_orientation_updates: Vec<usize>,
    /// Sub-steps rejected after every step halving.
    pub rejected_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// `None` for the initial state.
    pub stage: Option<Stage>,
    pub state: BodyState<f64>,
    /// Mean finest-level `|(du, dv)|` in pixels.
    pub residual_px: f64,
    /// Root-aligned MPJPE against the ground truth, when known.
    pub mpjpe: Option<f64>,
    pub log: StepLog,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
}

impl IterationTrace {
    pub fn levels(&self) -> Vec<String> {
        self.records.iter().filter_map(|r| r.stage.map(|s| s.label())).collect()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.residual_px).collect()
    }
}

/// Initial state: init-spec body parameters and per-view placements, unit
/// scale, globals derived from the views. Neural mode adds the decoded
/// grid-feature deltas to pose and shape; orientations and translations are
/// never changed here.
pub fn initialize<T: Real>(problem: &Problem<T>, init: &BodyState<T>, config: &EngineConfig, weights: Option<&FusionWeights<T>>) -> Result<BodyState<T>> {
    config.validate()?;
    if init.views.len() != problem.n_views() {
        return Err(Error::TooFewViews { need: problem.n_views(), got: init.views.len() });
    }
    let mut state = init.clone();
    state.scale = T::one();
    state.validate(problem.tpl)?;
    refresh_globals(problem, &mut state, config.calibrated)?;
    if config.mode == Mode::Neural {
        let w = weights.ok_or_else(|| Error::Config("neural mode needs weights".into()))?;
        let mut pooled: Option<DVector<T>> = None;
        for p in problem.pyramids {
            let g = DVector::from_vec(grid_sample_init(p.level(0), config.grid_res)?);
            pooled = Some(match pooled {
                Some(acc) => acc + g,
                None => g,
            });
        }
        let pooled = pooled.expect("at least one view") / lit::<T>(problem.n_views() as f64);
        let (dpose, dshape) = decode_init(&pooled, w)?;
        for (r, d) in state.pose.iter_mut().zip(&dpose) {
            if let Ok(n) = update_orientation(r, d) {
                *r = n;
            }
        }
        for (b, d) in state.shape.iter_mut().zip(&dshape) {
            *b += *d;
        }
    }
    Ok(state)
}

fn finest_level<T: Real>(problem: &Problem<T>) -> usize {
    problem.pyramids[0].levels.len() - 1
}

/// Tries `propose(eta)` with step halving until the finest-level objective
/// does not increase; returns whether a step was taken.
fn guarded_step<T: Real>(
    problem: &Problem<T>,
    state: &mut BodyState<T>,
    config: &EngineConfig,
    mut propose: impl FnMut(T) -> Result<BodyState<T>>,
) -> Result<bool> {
    let check = finest_level(problem);
    let before = residual(problem, state, check, config)?;
    let mut eta = lit::<T>(config.step);
    for _ in 0..=config.backtracks {
        if let Ok(candidate) = propose(eta) {
            if let Ok(after) = residual(problem, &candidate, check, config) {
                if after.n_valid > 0 && after.objective <= before.objective + 1e-12 {
                    *state = candidate;
                    return Ok(true);
                }
            }
        }
        eta *= lit(0.5);
    }
    Ok(false)
}

fn camera_step<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, level: usize, config: &EngineConfig, log: &mut StepLog) -> Result<()> {
    let (_, lins) = linearize(problem, state, level, config)?;
    let lambda = lit::<T>(config.damping);
    let mut deltas = Vec::with_capacity(lins.len());
    for (v, lin) in lins.iter().enumerate() {
        let cam = &problem.cams[v];
        let mut h = Matrix3::zeros();
        let mut b = Vector3::zeros();
        for t in &lin.terms {
            let j = if config.calibrated {
                t.a
            } else {
                let view = &state.views[v];
                let half = lit::<T>(cam.width as f64 / 2.0);
                let unit = lit::<T>(crate::geometry::WEAK_PERSPECTIVE_UNIT_MM);
                let ds = Vector2::new(t.x.x + view.camera.offset.x, t.x.y + view.camera.offset.y) * (half / unit);
                let go = half * view.camera.scale / unit;
                let du = Matrix2x3::new(ds.x, go, T::zero(), ds.y, T::zero(), go);
                t.g * du
            };
            h += j.transpose() * j * t.w;
            b += j.transpose() * t.r * t.w;
        }
        deltas.push(solve3(&h, &(-b), lambda));
    }
    let frames: Vec<ViewFrame<T>> = lins.iter().map(|l| l.frame).collect();
    let base = state.clone();
    let took = guarded_step(problem, state, config, |eta| {
        let mut s = base.clone();
        for (v, d) in deltas.iter().enumerate() {
            let Some(d) = d else { continue };
            let cam = &problem.cams[v];
            let view = &mut s.views[v];
            if config.calibrated {
                let t = frames[v].translation + d * eta;
                view.camera = WeakCamera::from_translation(&t, cam.focal(), lit(cam.width as f64))?;
            } else {
                let scale = view.camera.scale + d.x * eta;
                if !(scale > lit(CAMERA_SCALE_MIN)) {
                    return Err(Error::NonPositiveScale(to_f64(scale)));
                }
                view.camera = WeakCamera { scale, offset: view.camera.offset + Vector2::new(d.y, d.z) * eta };
            }
        }
        refresh_globals(problem, &mut s, config.calibrated)?;
        Ok(s)
    })?;
    if !took {
        log.rejected_steps += 1;
    }
    Ok(())
}

fn orientation_step<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, level: usize, config: &EngineConfig, log: &mut StepLog) -> Result<()> {
    let (_, lins) = linearize(problem, state, level, config)?;
    let lambda = lit::<T>(config.damping);
    let normals: Vec<(Matrix3<T>, Vector3<T>)> = lins
        .iter()
        .map(|lin| {
            let o = lin.frame.orientation.matrix();
            lin.terms.iter().fold((Matrix3::zeros(), Vector3::zeros()), |(h, b), t| {
                let j = t.a * (-skew(&(o * t.y)));
                (h + j.transpose() * j * t.w, b + j.transpose() * t.r * t.w)
            })
        })
        .collect();
    let increments: Vec<Option<Vector3<T>>> = if config.joint_orientation() {
        let (mut hw, mut bw) = (Matrix3::zeros(), Vector3::zeros());
        for ((h, b), cam) in normals.iter().zip(problem.cams) {
            let r = cam.r_cam.matrix();
            hw += r.transpose() * h * r;
            bw += r.transpose() * b;
        }
        let w = solve3(&hw, &(-bw), lambda);
        problem.cams.iter().map(|c| w.map(|w| c.r_cam.apply(&w))).collect()
    } else {
        normals.iter().map(|(h, b)| solve3(h, &(-b), lambda)).collect()
    };
    let mut failed = Vec::new();
    let base = state.clone();
    let took = guarded_step(problem, state, config, |eta| {
        let mut s = base.clone();
        failed.clear();
        for (v, w) in increments.iter().enumerate() {
            let Some(w) = w else { continue };
            match rotate_additive(&s.views[v].orientation, &(w * eta)) {
                Ok(o) => s.views[v].orientation = o,
                Err(_) => failed.push(v),
            }
        }
        if config.uses_aligner() {
            apply_aligner(problem, &mut s)?;
        }
        refresh_globals(problem, &mut s, config.calibrated)?;
        if config.uses_aligner() {
            s.orientation = consensus(problem, &s)?;
        }
        Ok(s)
    })?;
    log.failed_orientation_updates.extend(failed);
    if !took {
        log.rejected_steps += 1;
    }
    Ok(())
}

/// Per-vertex 3D corrections aggregated across views, in the body frame.
fn fused_corrections<T: Real>(problem: &Problem<T>, state: &BodyState<T>, lins: &[ViewLinearization<T>], config: &EngineConfig) -> Result<(DMatrix<T>, Vec<bool>)> {
    let n = problem.tpl.n_down();
    let lambda = lit::<T>(config.damping);
    let mut per_view = Vec::with_capacity(lins.len());
    let mut masks = Vec::with_capacity(lins.len());
    for (v, lin) in lins.iter().enumerate() {
        let to_frame = if config.calibrated { problem.cams[v].r_cam.transpose() } else { lin.frame.orientation.transpose() };
        let mut m = DMatrix::zeros(n, 6);
        for t in &lin.terms {
            let ata = t.a.transpose() * t.a;
            let mu = lambda * ata.trace() / lit(3.0) + lit(1e-18);
            let Some(inv) = (ata + Matrix3::identity() * mu).try_inverse() else { continue };
            let dc = -(inv * t.a.transpose() * t.r);
            let d = to_frame.apply(&dc) * t.w;
            for c in 0..3 {
                m[(t.k, c)] = d[c].max(T::zero());
                m[(t.k, 3 + c)] = (-d[c]).max(T::zero());
            }
        }
        per_view.push(m);
        masks.push(lin.valid.clone());
    }
    let pooled = aggregate(&per_view, &masks, config.aggregation, None)?;
    let to_body = if config.calibrated { state.orientation.transpose() } else { Rotation::identity() };
    let mut out = DMatrix::zeros(n, 3);
    for k in 0..n {
        let d = Vector3::new(pooled[(k, 0)] - pooled[(k, 3)], pooled[(k, 1)] - pooled[(k, 4)], pooled[(k, 2)] - pooled[(k, 5)]);
        out.row_mut(k).copy_from(&to_body.apply(&d).transpose());
    }
    let observed = (0..n).map(|k| masks.iter().any(|m| m[k])).collect();
    Ok((out, observed))
}

/// Right-multiplies joint rotations by `exp(eta·δ)` and adds `eta·δ` to the shape.
pub fn apply_local_step<T: Real>(state: &BodyState<T>, delta: &DVector<T>, eta: T) -> BodyState<T> {
    let mut s = state.clone();
    for (j, r) in s.pose.iter_mut().enumerate() {
        let w = Vector3::new(delta[3 * j], delta[3 * j + 1], delta[3 * j + 2]) * eta;
        *r = r.compose(&Rotation::exp(&w));
    }
    let base = 3 * s.pose.len();
    for (i, b) in s.shape.iter_mut().enumerate() {
        *b += delta[base + i] * eta;
    }
    s
}

fn pose_shape_step<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, level: usize, config: &EngineConfig, log: &mut StepLog) -> Result<()> {
    let (posed, lins) = linearize(problem, state, level, config)?;
    let (d, observed) = fused_corrections(problem, state, &lins, config)?;
    // In joint orientation mode the fit also carries a rigid motion of the
    // body frame, shared by every view, so the root and its children are
    // resolved together.
    let rotate = config.joint_orientation() && config.orientation_path;
    let translate = rotate && config.camera_path;
    let np = problem.tpl.n_local_params();
    let nx = np + if translate { 6 } else if rotate { 3 } else { 0 };
    let mut h = DMatrix::zeros(nx, nx);
    let mut b = DVector::zeros(nx);
    for (k, &i) in problem.tpl.down_indices.iter().enumerate() {
        if !observed[k] {
            continue;
        }
        let mut kin = posed.vertex_jacobian(problem.tpl, i).resize_horizontally(nx, T::zero());
        if rotate {
            kin.view_mut((0, np), (3, 3)).copy_from(&(-skew(&posed.vertices[i])));
        }
        if translate {
            kin.view_mut((0, np + 3), (3, 3)).copy_from(&Matrix3::identity());
        }
        h += kin.transpose() * &kin;
        b += kin.transpose() * d.row(k).transpose();
    }
    let Some(delta) = damped_solve(&ridged(&h, problem.tpl.n_joints() - 1, lit(config.ridge)), &b, lit(config.damping), T::zero()) else {
        log.rejected_steps += 1;
        return Ok(());
    };
    let base = state.clone();
    let took = guarded_step(problem, state, config, |eta| {
        let mut s = apply_local_step(&base, &delta, eta);
        if !rotate {
            return Ok(s);
        }
        let r = Rotation::exp(&(Vector3::new(delta[np], delta[np + 1], delta[np + 2]) * eta));
        for (view, cam) in s.views.iter_mut().zip(problem.cams) {
            if translate {
                let crop = lit(cam.width as f64);
                let shift = view.orientation.apply(&Vector3::new(delta[np + 3], delta[np + 4], delta[np + 5])) * eta;
                view.camera = WeakCamera::from_translation(&(view.camera.translation(cam.focal(), crop)? + shift), cam.focal(), crop)?;
            }
            view.orientation = view.orientation.compose(&r);
        }
        refresh_globals(problem, &mut s, config.calibrated)?;
        if config.uses_aligner() {
            s.orientation = consensus(problem, &s)?;
        }
        Ok(s)
    })?;
    if !took {
        log.rejected_steps += 1;
    }
    Ok(())
}

fn iterate_descent<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, level: usize, config: &EngineConfig, log: &mut StepLog) -> Result<()> {
    let finest = level == finest_level(problem);
    let mut round = config.clone();
    for i in 0..config.inner_steps {
        if finest && config.surface_anneal {
            round.surface_weight = config.surface_weight * (1.0 - i as f64 / config.inner_steps as f64);
        }
        if round.camera_path {
            camera_step(problem, state, level, &round, log)?;
        }
        if round.orientation_path {
            orientation_step(problem, state, level, &round, log)?;
        }
        pose_shape_step(problem, state, level, &round, log)?;
    }
    Ok(())
}

fn iterate_neural<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, level: usize, config: &EngineConfig, weights: &FusionWeights<T>, log: &mut StepLog) -> Result<()> {
    let posed = pose_body(problem.tpl, &state.pose, &state.shape)?;
    let pafs = (0..problem.n_views())
        .into_par_iter()
        .map(|v| {
            let frame = view_frame(&problem.cams[v], state, v, config.calibrated)?;
            let pts: Vec<Vector3<T>> = problem.tpl.down_indices.iter().map(|&i| frame.orientation.apply(&posed.vertices[i]) + frame.translation).collect();
            Ok(extract_paf(&pts, &frame.projector, problem.pyramids[v].level(level)))
        })
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<DMatrix<T>> = pafs.iter().map(|p| p.rows.clone()).collect();
    let masks: Vec<Vec<bool>> = pafs.iter().map(|p| p.valid.clone()).collect();

    let tokens = rows.iter().map(|r| weights.pose_proj.apply_rows(r)).collect::<Result<Vec<_>>>()?;
    let encoder = (config.aggregation == AggregationKind::TransformerThenMaxPool).then_some(&weights.pose_encoder);
    let fused = aggregate(&tokens, &masks, config.aggregation, encoder)?;
    let (dpose, dshape) = decode_pose_shape(&fused, weights)?;
    for (r, d) in state.pose.iter_mut().zip(&dpose) {
        if let Ok(n) = update_orientation(r, d) {
            *r = n;
        }
    }
    for (b, d) in state.shape.iter_mut().zip(&dshape) {
        *b += *d;
    }

    if config.orientation_path || config.camera_path {
        let raw = orientation_tokens(&rows, weights)?;
        let view_tokens = if config.joint_orientation() { transformer_encode(&raw, &weights.orient_encoder)? } else { raw };
        for v in 0..problem.n_views() {
            let token: RowDVector<T> = view_tokens.row(v).into_owned();
            if config.orientation_path {
                let d = decode_orientation(&token, weights)?;
                match update_orientation(&state.views[v].orientation, &d) {
                    Ok(o) => state.views[v].orientation = o,
                    Err(_) => log.failed_orientation_updates.push(v),
                }
            }
            if config.camera_path {
                let (s, ox, oy) = decode_camera(&token, weights)?;
                let neutral = lit::<T>(2f64.ln() + CAMERA_SCALE_MIN);
                let cam = &mut state.views[v].camera;
                cam.scale = cam.scale * s / neutral;
                cam.offset += Vector2::new(ox, oy);
            }
        }
        if config.uses_aligner() {
            apply_aligner(problem, state)?;
        }
    }
    refresh_globals(problem, state, config.calibrated)?;
    if config.uses_aligner() {
        state.orientation = consensus(problem, state)?;
    }
    Ok(())
}

/// One feedback iteration at schedule index `t >= 1`.
pub fn iterate<T: Real>(problem: &Problem<T>, state: &BodyState<T>, weights: Option<&FusionWeights<T>>, t: usize, config: &EngineConfig) -> Result<(BodyState<T>, StepLog)> {
    let stage = *config.schedule.get(t).ok_or_else(|| Error::Config(format!("iteration {t} outside the schedule")))?;
    let Stage::Mesh(level) = stage else {
        return Err(Error::Config("feedback iterations sample mesh vertices".into()));
    };
    let mut s = state.clone();
    let mut log = StepLog::default();
    if config.uses_aligner() {
        log.aligner = Some(AlignerSummary::from(&apply_aligner(problem, &mut s)?));
        refresh_globals(problem, &mut s, config.calibrated)?;
        s.orientation = consensus(problem, &s)?;
    }
    match config.mode {
        Mode::Descent => iterate_descent(problem, &mut s, level, config, &mut log)?,
        Mode::Neural => {
            let w = weights.ok_or_else(|| Error::Config("neural mode needs weights".into()))?;
            iterate_neural(problem, &mut s, level, config, w, &mut log)?
        }
    }
    Ok((s, log))
}

fn consensus<T: Real>(problem: &Problem<T>, s: &BodyState<T>) -> Result<Rotation<T>> {
    let views: Vec<Rotation<T>> = s.views.iter().map(|v| v.orientation).collect();
    Ok(align_orientations(&views, problem.cams)?.consensus)
}

/// Outcome of the final translation / scale solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSolveSummary {
    pub with_scale: bool,
    pub scale: f64,
    pub residual_mm: f64,
    /// Set when the scaled solve failed and the unit-scale fallback was used.
    pub failure: Option<String>,
}

/// Per-view pelvis pixels and depths per unit scale of the current placements.
pub fn pelvis_observations<T: Real>(problem: &Problem<T>, state: &BodyState<T>) -> Result<(Vector3<T>, Vec<Vector2<T>>, Vec<T>)> {
    let posed = pose_body(problem.tpl, &state.pose, &state.shape)?;
    let p = posed.pelvis();
    let mut px = Vec::new();
    let mut depths = Vec::new();
    for (v, cam) in problem.cams.iter().enumerate() {
        let t = state.views[v].camera.translation(cam.focal(), lit(cam.width as f64))?;
        let x = state.views[v].orientation.apply(&p) + t;
        px.push(cam.intrinsics().project(&x)?);
        depths.push(x.z);
    }
    Ok((p, px, depths))
}

/// Solves `T_g` (and `alpha` when `with_scale`) from the per-view placements.
pub fn global_solve<T: Real>(problem: &Problem<T>, state: &mut BodyState<T>, with_scale: bool) -> Result<GlobalSolveSummary> {
    let (p, px, depths) = pelvis_observations(problem, state)?;
    let mut failure = None;
    if with_scale {
        match solve_translation_scale(problem.cams, &state.orientation, &p, &px, &depths) {
            Ok(sol) => {
                state.translation = sol.translation;
                state.scale = sol.scale;
                return Ok(GlobalSolveSummary { with_scale, scale: to_f64(sol.scale), residual_mm: to_f64(sol.residual), failure: None });
            }
            Err(e) => failure = Some(e.to_string()),
        }
    }
    let sol = solve_translation_fixed_scale(problem.cams, &state.orientation, &p, &px, &depths)?;
    state.translation = sol.translation;
    state.scale = T::one();
    Ok(GlobalSolveSummary { with_scale, scale: 1.0, residual_mm: to_f64(sol.residual), failure })
}

/// Result of running the full schedule on a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub state: BodyState<f64>,
    pub trace: IterationTrace,
    pub initial: Metrics,
    pub metrics: Metrics,
    pub global_solve: Option<GlobalSolveSummary>,
}

/// Mean over views of the geodesic between each view's world orientation and the truth.
pub fn orientation_error_deg<T: Real>(state: &BodyState<T>, cams: &[CameraView<T>], gt: &Rotation<T>) -> f64 {
    let sum: f64 = state.views.iter().zip(cams).map(|(v, c)| to_f64(geodesic_deg(&c.r_cam.transpose().compose(&v.orientation), gt))).sum();
    sum / state.views.len().max(1) as f64
}

pub fn evaluate(tpl: &BodyTemplate<f64>, state: &BodyState<f64>, scenario: &Scenario) -> Result<Metrics> {
    let (pv, pj) = forward(tpl, state)?;
    let (gv, gj) = forward(tpl, &scenario.gt)?;
    let (pck, auc) = pck_auc(&pj, &gj)?;
    Ok(Metrics {
        mpjpe: mpjpe(&pj, &gj)?,
        pa_mpjpe: pa_mpjpe(&pj, &gj)?,
        pve: pve(&pv, &gv, &pj[0], &gj[0])?,
        abs_mpjpe: absolute_mpjpe(&pj, &gj)?,
        o_err_deg: orientation_error_deg(state, &scenario.cams, &scenario.gt.orientation),
        pck,
        auc,
    })
}

fn record<T: Real>(problem: &Problem<T>, state: &BodyState<T>, stage: Option<Stage>, log: StepLog, config: &EngineConfig, eval: &dyn Fn(&BodyState<f64>) -> Option<f64>) -> Result<IterationRecord> {
    let finest = finest_level(problem);
    let snap = state.cast::<f64>();
    Ok(IterationRecord {
        stage,
        residual_px: residual(problem, state, finest, config)?.mean_px,
        mpjpe: eval(&snap),
        state: snap,
        log,
    })
}

/// Runs the configured schedule from `init`; `eval` scores intermediate states.
pub fn run_problem<T: Real>(
    problem: &Problem<T>,
    init: &BodyState<T>,
    config: &EngineConfig,
    weights: Option<&FusionWeights<T>>,
    eval: &dyn Fn(&BodyState<f64>) -> Option<f64>,
) -> Result<(BodyState<T>, IterationTrace, Option<GlobalSolveSummary>)> {
    config.validate()?;
    if config.mode == Mode::Neural && weights.is_none() {
        return Err(Error::Config("neural mode needs weights".into()));
    }
    if problem.n_views() != config.n_views {
        return Err(Error::TooFewViews { need: config.n_views, got: problem.n_views() });
    }
    let mut trace = IterationTrace::default();
    let mut start = init.clone();
    start.scale = T::one();
    refresh_globals(problem, &mut start, config.calibrated)?;
    trace.records.push(record(problem, &start, None, StepLog::default(), config, eval)?);
    let mut state = initialize(problem, init, config, weights)?;
    trace.records.push(record(problem, &state, Some(Stage::Grid), StepLog::default(), config, eval)?);
    for t in 1..config.n_iterations {
        let (next, log) = iterate(problem, &state, weights, t, config)?;
        state = next;
        trace.records.push(record(problem, &state, Some(config.schedule[t]), log, config, eval)?);
    }
    // without the solve, `T_g` stays the mean of the per-view placements
    let summary = if config.calibrated && config.global_solve {
        let s = global_solve(problem, &mut state, true)?;
        if let Some(last) = trace.records.last_mut() {
            last.state = state.cast();
            last.mpjpe = eval(&last.state);
        }
        Some(s)
    } else {
        None
    };
    Ok((state, trace, summary))
}

/// Generates pyramids for `scenario`, runs the schedule and scores the result.
pub fn run<T: Real>(scenario: &Scenario, config: &EngineConfig, weights: Option<&FusionWeights<T>>) -> Result<RunOutput> {
    let tpl64 = scenario.template::<f64>()?;
    let tpl = scenario.template::<T>()?;
    let cams = scenario.cams::<T>();
    let pyramids = scenario.pyramids::<T>(&tpl64)?;
    let problem = Problem::new(&tpl, &cams, &pyramids)?;
    let init = initial_state::<T>(scenario);
    let (_, gt_joints) = forward(&tpl64, &scenario.gt)?;
    let eval = |s: &BodyState<f64>| forward(&tpl64, s).ok().and_then(|(_, j)| mpjpe(&j, &gt_joints).ok());
    let (state, trace, global) = run_problem(&problem, &init, config, weights, &eval)?;
    let state = state.cast::<f64>();
    let initial = evaluate(&tpl64, &trace.records[0].state, scenario)?;
    let metrics = evaluate(&tpl64, &state, scenario)?;
    Ok(RunOutput { state, trace, initial, metrics, global_solve: global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionDims;
    use crate::scenario::{generate_scenario, NoiseSpec, ScenarioConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noiseless() -> ScenarioConfig {
        ScenarioConfig { noise: NoiseSpec { orientation_cap_deg: 0.0, translation_cap_mm: 0.0, joint_cap_rad: 0.0, ..Default::default() }, ..Default::default() }
    }

    struct Fixture {
        scenario: Scenario,
        tpl: BodyTemplate<f64>,
        cams: Vec<CameraView<f64>>,
        pyramids: Vec<FeaturePyramid<f64>>,
    }

    impl Fixture {
        fn new(config: &ScenarioConfig, seed: u64) -> Self {
            let scenario = generate_scenario(config, seed).unwrap();
            let tpl = scenario.template::<f64>().unwrap();
            let cams = scenario.cams::<f64>();
            let pyramids = scenario.pyramids::<f64>(&tpl).unwrap();
            Fixture { scenario, tpl, cams, pyramids }
        }

        fn problem(&self) -> Problem<'_, f64> {
            Problem::new(&self.tpl, &self.cams, &self.pyramids).unwrap()
        }
    }

    fn zero_weights(tpl: &BodyTemplate<f64>) -> FusionWeights<f64> {
        let dims = FusionDims { n_down: tpl.n_down(), n_pose: tpl.n_joints() - 1, n_shape: tpl.n_shape(), ..Default::default() };
        FusionWeights::init(&dims, 3).unwrap()
    }

    fn max_pose_change(a: &BodyState<f64>, b: &BodyState<f64>) -> f64 {
        a.pose.iter().zip(&b.pose).map(|(x, y)| geodesic_deg(x, y).to_radians()).fold(0.0, f64::max)
    }

    #[test]
    fn trace_shape_and_schedule() {
        let f = Fixture::new(&ScenarioConfig::default(), 11);
        let out = run::<f64>(&f.scenario, &EngineConfig::default(), None).unwrap();
        assert_eq!(out.trace.records.len(), 5);
        assert_eq!(out.trace.levels(), ["grid0", "1", "1", "2"]);
        assert!(out.trace.records[0].stage.is_none());
        assert!(out.trace.records.iter().all(|r| r.mpjpe.is_some()));
        assert!(out.metrics.mpjpe < out.initial.mpjpe);
    }

    #[test]
    fn runs_are_bit_identical() {
        let f = Fixture::new(&ScenarioConfig::default(), 12);
        let a = run::<f64>(&f.scenario, &EngineConfig::default(), None).unwrap();
        let b = run::<f64>(&f.scenario, &EngineConfig::default(), None).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn initialize_keeps_injected_placements() {
        let f = Fixture::new(&ScenarioConfig::default(), 13);
        let p = f.problem();
        let init = initial_state::<f64>(&f.scenario);
        for mode in [Mode::Descent, Mode::Neural] {
            let config = EngineConfig { mode, ..Default::default() };
            let w = zero_weights(&f.tpl);
            let s = initialize(&p, &init, &config, Some(&w)).unwrap();
            assert_eq!(s.views, init.views);
        }
        let skewed = NoiseSpec { skewed_view: Some((1, 30.0)), ..noiseless().noise };
        let g = generate_scenario(&ScenarioConfig { noise: skewed, ..noiseless() }, 13).unwrap();
        let cams = g.cams::<f64>();
        let world = cams[1].r_cam.transpose().compose(&g.init.views[1].orientation);
        assert!((geodesic_deg(&world, &g.gt.orientation) - 30.0).abs() < 1e-6);
    }

    #[test]
    fn initialize_errors() {
        let f = Fixture::new(&ScenarioConfig::default(), 14);
        let p = f.problem();
        let mut init = initial_state::<f64>(&f.scenario);
        let neural = EngineConfig { mode: Mode::Neural, ..Default::default() };
        assert!(initialize(&p, &init, &neural, None).is_err());
        init.views.pop();
        assert!(initialize(&p, &init, &EngineConfig::default(), None).is_err());
        assert!(Problem::new(&f.tpl, &f.cams, &f.pyramids[..3]).is_err());
    }

    /// The sampled offsets are not exactly zero at the truth (neighbouring
    /// nodes can point at different vertices), so the truth is a fixed point
    /// only up to that discretization: the descent may move, but only to a
    /// lower objective and only by a few millimetres.
    #[test]
    fn truth_is_near_fixed_point() {
        for seed in 0..5 {
            let f = Fixture::new(&noiseless(), seed);
            let p = f.problem();
            let config = EngineConfig::default();
            let start = initialize(&p, &initial_state::<f64>(&f.scenario), &config, None).unwrap();
            let (_, gj) = forward(&f.tpl, &f.scenario.gt).unwrap();
            let before = residual(&p, &start, 2, &config).unwrap();
            assert!(before.mean_px < 2.0);
            let (next, _) = iterate(&p, &start, None, 3, &config).unwrap();
            let (_, j) = forward(&f.tpl, &next).unwrap();
            let drift = mpjpe(&j, &gj).unwrap();
            let after = residual(&p, &next, 2, &config).unwrap();
            eprintln!("seed {seed}: truth residual {:.3} px -> {:.3} px, drift {drift:.2} mm, dpose {:.2e} rad", before.mean_px, after.mean_px, max_pose_change(&start, &next));
            assert!(after.objective <= before.objective);
            assert!(drift < 25.0);
            assert!(orientation_error_deg(&next, &f.cams, &f.scenario.gt.orientation) < 3.0);
        }
    }

    #[test]
    fn single_joint_recovers() {
        let mut better = 0;
        let n = 100;
        for seed in 0..n {
            let f = Fixture::new(&noiseless(), seed);
            let p = f.problem();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let j = rng.gen_range(0..f.scenario.gt.pose.len());
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
            let mut init = initial_state::<f64>(&f.scenario);
            init.pose[j] = init.pose[j].compose(&Rotation::exp(&(axis * 0.2)));
            let config = EngineConfig::default();
            let start = initialize(&p, &init, &config, None).unwrap();
            let (next, _) = iterate(&p, &start, None, 3, &config).unwrap();
            let gt = &f.scenario.gt.pose[j];
            let (e0, e1) = (geodesic_deg(&start.pose[j], gt), geodesic_deg(&next.pose[j], gt));
            if e1 < e0 {
                better += 1;
            } else {
                eprintln!("seed {seed} joint {j}: {e0:.2} -> {e1:.2} deg");
            }
        }
        eprintln!("strict decrease {better}/{n}");
        assert!(better * 100 >= 95 * n);
    }

    #[test]
    fn zero_weight_neural_changes_only_through_aligner() {
        let f = Fixture::new(&ScenarioConfig::default(), 15);
        let p = f.problem();
        let w = zero_weights(&f.tpl);
        let config = EngineConfig { mode: Mode::Neural, ..Default::default() };
        let start = initialize(&p, &initial_state::<f64>(&f.scenario), &config, Some(&w)).unwrap();
        let (next, log) = iterate(&p, &start, Some(&w), 1, &config).unwrap();
        assert!(log.aligner.is_some());

        let mut expect = start.clone();
        apply_aligner(&p, &mut expect).unwrap();
        assert_eq!(next.pose.len(), expect.pose.len());
        assert!(max_pose_change(&next, &start) < 1e-9);
        assert!(next.shape.iter().zip(&start.shape).all(|(a, b)| (a - b).abs() < 1e-12));
        for (a, b) in next.views.iter().zip(&expect.views) {
            assert!(geodesic_deg(&a.orientation, &b.orientation) < 1e-6);
            assert!((a.camera.scale - b.camera.scale).abs() < 1e-12 && (a.camera.offset - b.camera.offset).norm() < 1e-12);
        }

        // without the aligner nothing moves at all
        let off = EngineConfig { aligner: false, ..config };
        let (still, log) = iterate(&p, &start, Some(&w), 1, &off).unwrap();
        assert!(log.aligner.is_none());
        assert!(max_pose_change(&still, &start) < 1e-9);
        for (a, b) in still.views.iter().zip(&start.views) {
            assert!(geodesic_deg(&a.orientation, &b.orientation) < 1e-6);
        }
    }

    #[test]
    fn pose_updates_ignore_orientation_decoders() {
        let f = Fixture::new(&ScenarioConfig::default(), 16);
        let p = f.problem();
        let mut a = zero_weights(&f.tpl);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layer in &mut a.pose_decoder.layers {
            layer.w.iter_mut().for_each(|x| *x = rng.gen_range(-0.01..0.01));
        }
        let mut b = a.clone();
        for layer in b.orient_decoder.layers.iter_mut().chain(&mut b.camera_decoder.layers) {
            layer.w.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
            layer.b.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
        let config = EngineConfig { mode: Mode::Neural, aligner: false, orientation_path: false, camera_path: false, ..Default::default() };
        let start = initialize(&p, &initial_state::<f64>(&f.scenario), &config, Some(&a)).unwrap();
        let (sa, _) = iterate(&p, &start, Some(&a), 1, &config).unwrap();
        let (sb, _) = iterate(&p, &start, Some(&b), 1, &config).unwrap();
        assert!(max_pose_change(&sa, &start) > 1e-6);
        assert_eq!(sa.pose, sb.pose);
        assert_eq!(sa.shape, sb.shape);
        assert_eq!(sa.views, start.views);

        // descent: the same holds with the orientation step switched off
        let descent = EngineConfig { aligner: false, orientation_path: false, camera_path: false, inner_steps: 2, ..Default::default() };
        let (da, _) = iterate(&p, &start, Some(&a), 1, &descent).unwrap();
        let (db, _) = iterate(&p, &start, Some(&b), 1, &descent).unwrap();
        assert_eq!(da, db);
        assert_eq!(da.views, start.views);
    }

    #[test]
    fn config_validation() {
        let bad = [
            EngineConfig { n_iterations: 3, ..Default::default() },
            EngineConfig { schedule: vec![Stage::Mesh(1), Stage::Mesh(1), Stage::Mesh(1), Stage::Mesh(2)], ..Default::default() },
            EngineConfig { schedule: vec![Stage::Grid, Stage::Mesh(1), Stage::Mesh(3), Stage::Mesh(2)], ..Default::default() },
            EngineConfig { step: 0.0, ..Default::default() },
            EngineConfig { damping: -1.0, ..Default::default() },
            EngineConfig { ridge: -1.0, ..Default::default() },
            EngineConfig { n_views: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        EngineConfig::default().validate().unwrap();
        let f = Fixture::new(&ScenarioConfig::default(), 17);
        let p = f.problem();
        let s = initialize(&p, &initial_state::<f64>(&f.scenario), &EngineConfig::default(), None).unwrap();
        assert!(iterate(&p, &s, None, 0, &EngineConfig::default()).is_err());
        assert!(iterate(&p, &s, None, 4, &EngineConfig::default()).is_err());
        assert!(run::<f64>(&f.scenario, &EngineConfig { mode: Mode::Neural, ..Default::default() }, None).is_err());
        assert!(run::<f64>(&f.scenario, &EngineConfig { n_views: 3, ..Default::default() }, None).is_err());
    }

    #[test]
    fn jacobian_matches_differences() {
        let f = Fixture::new(&ScenarioConfig::default(), 18);
        let p = f.problem();
        let config = EngineConfig::default();
        let s = initialize(&p, &initial_state::<f64>(&f.scenario), &config, None).unwrap();
        let jac = paf_jacobian(&p, &s, 0, 2, &config).unwrap();
        let np = f.tpl.n_local_params();
        let h = 1e-6;
        let perturb = |c: usize, e: f64| {
            let mut d = DVector::zeros(np);
            let mut t = s.clone();
            if c < np {
                d[c] = e;
                t = apply_local_step(&s, &d, 1.0);
            } else {
                let mut w = Vector3::zeros();
                w[c - np] = e;
                t.views[0].orientation = Rotation::exp(&w).compose(&s.views[0].orientation);
            }
            view_residuals(&p, &t, 0, 2, &config).unwrap()
        };
        let (mut worst, mut checked) = (0.0f64, 0);
        for c in [0, 7, 13, 20, 31, 44, np - 5, np - 1, np, np + 1, np + 2] {
            let (plus, minus) = (perturb(c, h), perturb(c, -h));
            let mut num = DVector::zeros(jac.residual.len());
            let mut ok = true;
            for (row, &k) in jac.vertices.iter().enumerate() {
                match (&plus[k], &minus[k]) {
                    (Some((_, a)), Some((_, b))) => num.rows_mut(RESIDUAL_ROWS * row, RESIDUAL_ROWS).copy_from(&((a - b) / (2.0 * h))),
                    _ => ok = false,
                }
            }
            assert!(ok);
            let ana = jac.jacobian.column(c);
            if ana.norm() > 1e-6 {
                worst = worst.max((ana - &num).norm() / ana.norm());
                checked += 1;
            }
        }
        assert!(checked >= 8);
        assert!(worst < 1e-3, "relative error {worst}");
    }
}
