//! Synthetic multi-view scenarios: ground-truth body, inward-looking rig,
//! perturbed initialization and occluders.

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body_model::{downsample, forward, make_template, BodyState, BodyTemplate, TemplateConfig, ViewEstimate, WeakCamera};
use crate::error::{Error, Result};
use crate::features::{synth_pyramid_from_pixels, synth_pyramid_with_surface, FeaturePyramid, Rect, SynthConfig};
use crate::geometry::{project_perspective, CameraView, Rotation};
use crate::scalar::Real;

const MAX_ATTEMPTS: usize = 200;

/// Initialization perturbation caps and observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub orientation_cap_deg: f64,
    pub translation_cap_mm: f64,
    pub joint_cap_rad: f64,
    /// Standard deviation of the pixel noise on the synthesized targets.
    pub pixel_sigma: f64,
    /// `(view, degrees)`: that view's initial orientation is exactly this far from the truth.
    pub skewed_view: Option<(usize, f64)>,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { orientation_cap_deg: 20.0, translation_cap_mm: 200.0, joint_cap_rad: 0.15, pixel_sigma: 0.0, skewed_view: None }
    }
}

/// Occluders covering a fraction of the image in some views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub n_views: usize,
    pub area_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub template: TemplateConfig,
    pub n_views: usize,
    pub image_size: u32,
    pub focal: f64,
    pub rig_radius_mm: f64,
    pub rig_height_mm: f64,
    /// Per-joint ground-truth rotation cap.
    pub pose_cap_deg: f64,
    pub shape_range: f64,
    /// Ground-truth global tilt away from upright.
    pub tilt_cap_deg: f64,
    pub translation_range_mm: f64,
    /// Ground-truth global scale drawn from `[lo, hi]`.
    pub scale_range: (f64, f64),
    /// Minimum distance of any projected ground-truth vertex to the image border.
    pub margin_px: f64,
    pub synth: SynthConfig,
    pub noise: NoiseSpec,
    pub occlusion: Option<OcclusionSpec>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            template: TemplateConfig::default(),
            n_views: 4,
            image_size: 224,
            focal: 480.0,
            rig_radius_mm: 5000.0,
            rig_height_mm: 0.0,
            pose_cap_deg: 60.0,
            shape_range: 2.0,
            tilt_cap_deg: 15.0,
            translation_range_mm: 150.0,
            scale_range: (1.0, 1.0),
            margin_px: 4.0,
            synth: SynthConfig::default(),
            noise: NoiseSpec::default(),
            occlusion: None,
        }
    }
}

/// Initial per-view placements and body parameters handed to the engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub pose: Vec<Rotation<f64>>,
    pub shape: Vec<f64>,
    pub views: Vec<ViewEstimate<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub config: ScenarioConfig,
    pub gt: BodyState<f64>,
    pub cams: Vec<CameraView<f64>>,
    pub init: InitSpec,
    pub occluders: Vec<Vec<Rect>>,
}

/// Cameras on a horizontal circle, evenly spaced, looking at the rig centre.
pub fn make_rig(config: &ScenarioConfig) -> Result<Vec<CameraView<f64>>> {
    if config.n_views == 0 {
        return Err(Error::TooFewViews { need: 1, got: 0 });
    }
    let target = Vector3::new(0.0, config.rig_height_mm, 0.0);
    (0..config.n_views)
        .map(|i| {
            let a = i as f64 * std::f64::consts::TAU / config.n_views as f64;
            let pos = Vector3::new(config.rig_radius_mm * a.sin(), config.rig_height_mm, -config.rig_radius_mm * a.cos());
            CameraView::look_at(config.focal, config.image_size, config.image_size, pos, target, Vector3::y())
        })
        .collect()
}

fn unit_vector(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

/// Rotation by an angle uniform in `[0, cap]` about a uniform axis.
fn random_rotation(rng: &mut ChaCha8Rng, cap_rad: f64) -> Rotation<f64> {
    let axis = unit_vector(rng);
    let angle = if cap_rad > 0.0 { rng.gen_range(0.0..=cap_rad) } else { 0.0 };
    Rotation::exp(&(axis * angle))
}

/// Per-view placement of the unscaled body that images exactly like the
/// ground truth: `O^v = R_v O_g`, `T^v = (R_v T_g + t_v) / alpha`.
pub fn gt_view_placements(gt: &BodyState<f64>, cams: &[CameraView<f64>]) -> Result<Vec<ViewEstimate<f64>>> {
    cams.iter()
        .map(|c| {
            let t = (c.r_cam.apply(&gt.translation) + c.t_cam) / gt.scale;
            Ok(ViewEstimate {
                orientation: c.r_cam.compose(&gt.orientation),
                camera: WeakCamera::from_translation(&t, c.focal(), c.width as f64)?,
            })
        })
        .collect()
}

fn inside_all(vertices: &[Vector3<f64>], cams: &[CameraView<f64>], margin: f64) -> bool {
    cams.iter().all(|c| {
        vertices.iter().all(|x| match project_perspective(x, c) {
            Ok(uv) => uv.x >= margin && uv.y >= margin && uv.x <= c.width as f64 - margin && uv.y <= c.height as f64 - margin,
            Err(_) => false,
        })
    })
}

pub fn generate_scenario(config: &ScenarioConfig, seed: u64) -> Result<Scenario> {
    let tpl = make_template::<f64>(&config.template)?;
    generate_with_template(config, seed, &tpl)
}

/// [`generate_scenario`] reusing an already built template for `config.template`.
pub fn generate_with_template(config: &ScenarioConfig, seed: u64, tpl: &BodyTemplate<f64>) -> Result<Scenario> {
    let cams = make_rig(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nj = tpl.n_joints();
    let mut gt = None;
    for _ in 0..MAX_ATTEMPTS {
        let pose: Vec<Rotation<f64>> = (1..nj).map(|_| random_rotation(&mut rng, config.pose_cap_deg.to_radians())).collect();
        let shape: Vec<f64> = (0..tpl.n_shape())
            .map(|_| if config.shape_range > 0.0 { rng.gen_range(-config.shape_range..=config.shape_range) } else { 0.0 })
            .collect();
        let yaw = Rotation::about_axis(&Vector3::y(), rng.gen_range(0.0..std::f64::consts::TAU));
        let tilt_axis = Vector3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0));
        let tilt = if tilt_axis.norm() > 1e-6 {
            Rotation::about_axis(&tilt_axis, rng.gen_range(0.0..=config.tilt_cap_deg.to_radians()))
        } else {
            Rotation::identity()
        };
        let r = config.translation_range_mm;
        let translation = Vector3::new(
            rng.gen_range(-r..=r),
            config.rig_height_mm + rng.gen_range(-r..=r) * 0.5,
            rng.gen_range(-r..=r),
        );
        let (lo, hi) = config.scale_range;
        let scale = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let state = BodyState { pose, shape, orientation: tilt.compose(&yaw), translation, scale, views: Vec::new() };
        let (verts, _) = forward(tpl, &state)?;
        if inside_all(&verts, &cams, config.margin_px) {
            gt = Some(state);
            break;
        }
    }
    let mut gt = gt.ok_or_else(|| Error::Config(format!("no ground truth inside every view after {MAX_ATTEMPTS} draws")))?;
    gt.views = gt_view_placements(&gt, &cams)?;

    let noise = &config.noise;
    let pose = gt.pose.iter().map(|r| r.compose(&random_rotation(&mut rng, noise.joint_cap_rad))).collect();
    let mut views = Vec::with_capacity(cams.len());
    for (v, (cam, truth)) in cams.iter().zip(&gt.views).enumerate() {
        let mut orientation = random_rotation(&mut rng, noise.orientation_cap_deg.to_radians()).compose(&truth.orientation);
        if let Some((sv, deg)) = noise.skewed_view {
            if sv == v {
                orientation = Rotation::exp(&(unit_vector(&mut rng) * deg.to_radians())).compose(&truth.orientation);
            }
        }
        let crop = cam.width as f64;
        let t = truth.camera.translation(cam.focal(), crop)?;
        let magnitude = if noise.translation_cap_mm > 0.0 { rng.gen_range(0.0..=noise.translation_cap_mm) } else { 0.0 };
        let t = t + unit_vector(&mut rng) * magnitude;
        views.push(ViewEstimate { orientation, camera: WeakCamera::from_translation(&t, cam.focal(), crop)? });
    }
    let init = InitSpec { pose, shape: vec![0.0; tpl.n_shape()], views };

    let mut occluders = vec![Vec::new(); cams.len()];
    if let Some(occ) = &config.occlusion {
        let pelvis = gt.translation;
        let mut order: Vec<usize> = (0..cams.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for &v in order.iter().take(occ.n_views.min(cams.len())) {
            let cam = &cams[v];
            let side = (occ.area_fraction * (cam.width * cam.height) as f64).sqrt();
            let uv = project_perspective(&pelvis, cam)?;
            let (right, down) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let x0 = if right { uv.x } else { uv.x - side };
            let y0 = if down { uv.y } else { uv.y - side };
            occluders[v].push(Rect { x0, y0, x1: x0 + side, y1: y0 + side });
        }
    }
    Ok(Scenario { seed, config: config.clone(), gt, cams, init, occluders })
}

impl Scenario {
    pub fn template<T: Real>(&self) -> Result<BodyTemplate<T>> {
        make_template(&self.config.template)
    }

    pub fn gt_vertices(&self, tpl: &BodyTemplate<f64>) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
        forward(tpl, &self.gt)
    }

    /// Descent-mode pyramids of every view from the ground-truth body.
    pub fn pyramids<T: Real>(&self, tpl: &BodyTemplate<f64>) -> Result<Vec<FeaturePyramid<T>>> {
        let (verts, _) = forward(tpl, &self.gt)?;
        let down = downsample(&verts, tpl)?;
        let surface = downsample(&tpl.rest_vertices, tpl)?;
        let normal = Normal::new(0.0, self.config.noise.pixel_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0f_f1e1d5);
        self.cams
            .iter()
            .zip(&self.occluders)
            .map(|(cam, occ)| {
                let mut targets = Vec::with_capacity(down.len());
                let mut depth = 0.0;
                for x in &down {
                    let uv = project_perspective(x, cam)?;
                    let noise = if self.config.noise.pixel_sigma > 0.0 { Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng)) } else { Vector2::zeros() };
                    targets.push((uv.x + noise.x, uv.y + noise.y));
                    depth += cam.to_camera(x).z;
                }
                let cfg = SynthConfig { occluders: occ.clone(), ..self.config.synth.clone() };
                let depth = depth / down.len() as f64;
                if cfg.surface {
                    synth_pyramid_with_surface(&targets, &surface, depth, &cam.cast::<T>(), &cfg)
                } else {
                    synth_pyramid_from_pixels(&targets, None, depth, &cam.cast::<T>(), &cfg)
                }
            })
            .collect()
    }

    pub fn cams<T: Real>(&self) -> Vec<CameraView<T>> {
        self.cams.iter().map(|c| c.cast()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// The init-spec pose, shape and views with unit scale; the engine derives
/// the global orientation and translation from the views.
pub fn initial_state<T: Real>(scenario: &Scenario) -> BodyState<T> {
    let init = &scenario.init;
    BodyState::<f64> {
        pose: init.pose.clone(),
        shape: init.shape.clone(),
        orientation: Rotation::identity(),
        translation: Vector3::zeros(),
        scale: 1.0,
        views: init.views.clone(),
    }
    .cast::<T>()
}
