//! Feature pyramids and pixel-aligned feedback sampling.
//!
//! A [`FeatureMap`] covers the full pixel rectangle of its camera. Grid node
//! `(x, y)` sits at the centre of its pixel block, i.e. at pixel
//! `((x + 0.5) * width / W, (y + 0.5) * height / H)`.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{CameraView, Projector};
use crate::scalar::{lit, Real};

/// Channel layout of synthesized (descent-mode) pyramids.
pub mod channel {
    pub const OCCUPANCY: usize = 0;
    pub const DU: usize = 1;
    pub const DV: usize = 2;
    pub const SIGNED_DISTANCE: usize = 3;
    /// First of three channels holding the rest-pose surface coordinates
    /// (metres) of the nearest target vertex; zero when not synthesized.
    pub const SURFACE: usize = 4;
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    pub level: usize,
    /// Grid rows.
    pub rows: usize,
    /// Grid columns.
    pub cols: usize,
    pub channels: usize,
    /// Pixel rectangle covered by the grid.
    pub pixel_width: T,
    pub pixel_height: T,
    /// Row-major `[row][col][channel]`.
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(level: usize, rows: usize, cols: usize, channels: usize, pixel_width: T, pixel_height: T) -> Result<Self> {
        if rows < 2 || cols < 2 || channels == 0 {
            return Err(Error::InvalidSize(format!("feature map {rows}x{cols}x{channels}")));
        }
        if !(pixel_width > T::zero()) || !(pixel_height > T::zero()) {
            return Err(Error::InvalidSize("feature map pixel extent must be positive".into()));
        }
        Ok(FeatureMap {
            level,
            rows,
            cols,
            channels,
            pixel_width,
            pixel_height,
            data: vec![T::zero(); rows * cols * channels],
        })
    }

    /// Builds a map by evaluating `f(u, v)` at every node centre.
    pub fn from_fn(
        level: usize,
        rows: usize,
        cols: usize,
        channels: usize,
        pixel_width: T,
        pixel_height: T,
        mut f: impl FnMut(T, T) -> Vec<T>,
    ) -> Result<Self> {
        let mut map = Self::zeros(level, rows, cols, channels, pixel_width, pixel_height)?;
        for r in 0..rows {
            for c in 0..cols {
                let uv = map.node_pixel(r, c);
                let vals = f(uv.x, uv.y);
                if vals.len() != channels {
                    return Err(shape_mismatch(channels, vals.len()));
                }
                map.node_mut(r, c).copy_from_slice(&vals);
            }
        }
        Ok(map)
    }

    #[inline]
    pub fn node(&self, row: usize, col: usize) -> &[T] {
        let i = (row * self.cols + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn node_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let i = (row * self.cols + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn cell_width(&self) -> T {
        self.pixel_width / lit(self.cols as f64)
    }

    pub fn cell_height(&self) -> T {
        self.pixel_height / lit(self.rows as f64)
    }

    pub fn node_pixel(&self, row: usize, col: usize) -> Vector2<T> {
        Vector2::new(
            (lit::<T>(col as f64) + lit(0.5)) * self.cell_width(),
            (lit::<T>(row as f64) + lit(0.5)) * self.cell_height(),
        )
    }

    pub fn contains(&self, uv: &Vector2<T>) -> bool {
        uv.x.is_finite()
            && uv.y.is_finite()
            && uv.x >= T::zero()
            && uv.y >= T::zero()
            && uv.x <= self.pixel_width
            && uv.y <= self.pixel_height
    }

    /// Grid coordinates of a pixel.
    pub fn grid_coords(&self, uv: &Vector2<T>) -> Vector2<T> {
        Vector2::new(uv.x / self.cell_width() - lit(0.5), uv.y / self.cell_height() - lit(0.5))
    }

    /// Cell index and fractional position along one axis; `clamped` when the
    /// coordinate lies in the half-cell border outside the node hull.
    fn axis(g: T, n: usize) -> (usize, T, bool) {
        let max = lit::<T>((n - 1) as f64);
        if g < T::zero() {
            return (0, T::zero(), true);
        }
        if g > max {
            return (n - 2, T::one(), true);
        }
        let i = num_traits::ToPrimitive::to_usize(&g.floor()).unwrap_or(0).min(n - 2);
        (i, g - lit(i as f64), false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Real> {
    pub values: DVector<T>,
    pub valid: bool,
}

/// Bilinear interpolation in grid coordinates; zero and invalid outside the
/// pixel rectangle, edge-replicated in the half-cell border.
pub fn bilinear_sample<T: Real>(map: &FeatureMap<T>, uv: &Vector2<T>) -> Sample<T> {
    if !map.contains(uv) {
        return Sample { values: DVector::zeros(map.channels), valid: false };
    }
    let g = map.grid_coords(uv);
    let (c0, fx, _) = FeatureMap::<T>::axis(g.x, map.cols);
    let (r0, fy, _) = FeatureMap::<T>::axis(g.y, map.rows);
    let (n00, n01, n10, n11) = (
        map.node(r0, c0),
        map.node(r0, c0 + 1),
        map.node(r0 + 1, c0),
        map.node(r0 + 1, c0 + 1),
    );
    let one = T::one();
    let values = DVector::from_fn(map.channels, |k, _| {
        (one - fy) * ((one - fx) * n00[k] + fx * n01[k]) + fy * ((one - fx) * n10[k] + fx * n11[k])
    });
    Sample { values, valid: true }
}

/// Derivative of [`bilinear_sample`] with respect to the pixel position,
/// `channels x 2` (columns `d/du`, `d/dv`). On grid lines the cell containing
/// `uv + eps` is used; outside the rectangle the result is zero.
pub fn bilinear_grad<T: Real>(map: &FeatureMap<T>, uv: &Vector2<T>) -> DMatrix<T> {
    let mut out = DMatrix::zeros(map.channels, 2);
    if !map.contains(uv) {
        return out;
    }
    let g = map.grid_coords(uv);
    let (c0, fx, clamp_x) = FeatureMap::<T>::axis(g.x, map.cols);
    let (r0, fy, clamp_y) = FeatureMap::<T>::axis(g.y, map.rows);
    let (n00, n01, n10, n11) = (
        map.node(r0, c0),
        map.node(r0, c0 + 1),
        map.node(r0 + 1, c0),
        map.node(r0 + 1, c0 + 1),
    );
    let one = T::one();
    let sx = one / map.cell_width();
    let sy = one / map.cell_height();
    for k in 0..map.channels {
        if !clamp_x {
            out[(k, 0)] = ((one - fy) * (n01[k] - n00[k]) + fy * (n11[k] - n10[k])) * sx;
        }
        if !clamp_y {
            out[(k, 1)] = ((one - fx) * (n10[k] - n00[k]) + fx * (n11[k] - n01[k])) * sy;
        }
    }
    out
}

/// Samples `map` on a uniform `grid_res x grid_res` lattice of pixel-block
/// centres and concatenates the results row-major.
pub fn grid_sample_init<T: Real>(map: &FeatureMap<T>, grid_res: usize) -> Result<Vec<T>> {
    if grid_res < 2 {
        return Err(Error::InvalidSize(format!("grid resolution {grid_res} < 2")));
    }
    let mut out = Vec::with_capacity(grid_res * grid_res * map.channels);
    let n = lit::<T>(grid_res as f64);
    for r in 0..grid_res {
        for c in 0..grid_res {
            let uv = Vector2::new(
                (lit::<T>(c as f64) + lit(0.5)) * map.pixel_width / n,
                (lit::<T>(r as f64) + lit(0.5)) * map.pixel_height / n,
            );
            out.extend(bilinear_sample(map, &uv).values.iter().copied());
        }
    }
    Ok(out)
}

/// Three-level pyramid of one view, coarse to fine.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<T: Real> {
    pub levels: Vec<FeatureMap<T>>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(levels: Vec<FeatureMap<T>>) -> Result<Self> {
        if levels.len() != 3 {
            return Err(Error::InvalidSize(format!("pyramid needs 3 levels, got {}", levels.len())));
        }
        let channels = levels[0].channels;
        for w in levels.windows(2) {
            if !(w[1].rows > w[0].rows && w[1].cols > w[0].cols) {
                return Err(Error::InvalidSize("pyramid resolution must increase per level".into()));
            }
        }
        if levels.iter().any(|l| l.channels != channels) {
            return Err(Error::InvalidSize("pyramid levels disagree on channel count".into()));
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    pub fn level(&self, i: usize) -> &FeatureMap<T> {
        &self.levels[i]
    }
}

/// Per-vertex feedback features of one view.
#[derive(Debug, Clone, PartialEq)]
pub struct PafFeature<T: Real> {
    /// `|D| x (C + 2)`: sampled channels then the normalized sample position.
    pub rows: DMatrix<T>,
    pub valid: Vec<bool>,
    /// Sample pixel of each vertex (meaningless where invalid).
    pub pixels: Vec<Vector2<T>>,
}

impl<T: Real> PafFeature<T> {
    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn width(&self) -> usize {
        self.rows.ncols()
    }
}

/// Projects camera-frame vertices with `projector` and samples `map`.
pub fn extract_paf<T: Real>(
    vertices_cam: &[Vector3<T>],
    projector: &Projector<T>,
    map: &FeatureMap<T>,
) -> PafFeature<T> {
    let c = map.channels;
    let mut rows = DMatrix::zeros(vertices_cam.len(), c + 2);
    let mut valid = vec![false; vertices_cam.len()];
    let mut pixels = vec![Vector2::zeros(); vertices_cam.len()];
    let two = lit::<T>(2.0);
    for (i, x) in vertices_cam.iter().enumerate() {
        let Ok(uv) = projector.project(x) else { continue };
        let s = bilinear_sample(map, &uv);
        if !s.valid {
            continue;
        }
        for k in 0..c {
            rows[(i, k)] = s.values[k];
        }
        rows[(i, c)] = two * uv.x / map.pixel_width - T::one();
        rows[(i, c + 1)] = two * uv.y / map.pixel_height - T::one();
        valid[i] = true;
        pixels[i] = uv;
    }
    PafFeature { rows, valid, pixels }
}

/// World-frame convenience wrapper: perspective projection through `cam`.
pub fn extract_paf_world<T: Real>(
    vertices_world: &[Vector3<T>],
    cam: &CameraView<T>,
    pyramid: &FeaturePyramid<T>,
    level: usize,
) -> PafFeature<T> {
    let cam_pts: Vec<_> = vertices_world.iter().map(|x| cam.to_camera(x)).collect();
    extract_paf(&cam_pts, &cam.intrinsics(), pyramid.level(level))
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }
}

/// Settings of the synthesized misalignment pyramid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub resolutions: [usize; 3],
    pub channels: usize,
    /// Occupancy width in coarse cells.
    pub sigma_cells: f64,
    pub clamp_px: f64,
    pub body_radius_mm: f64,
    pub occluders: Vec<Rect>,
    /// Fill the surface-coordinate channels (scenario generation only).
    pub surface: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            resolutions: [14, 28, 56],
            channels: 8,
            sigma_cells: 2.0,
            clamp_px: 32.0,
            body_radius_mm: 60.0,
            occluders: Vec::new(),
            surface: true,
        }
    }
}

/// Builds the analytic misalignment pyramid of one view from ground-truth
/// downsampled vertices (world frame).
///
/// Per node: occupancy `exp(-d^2 / 2 sigma^2)`, offset to the nearest
/// projected vertex (clamped), and `d - body_radius_px`; nodes under an
/// occluder are zero in every channel.
pub fn synth_pyramid<T: Real>(
    gt_vertices_down: &[Vector3<T>],
    cam: &CameraView<T>,
    config: &SynthConfig,
) -> Result<FeaturePyramid<T>> {
    if config.channels < 4 {
        return Err(Error::Config("synthesized pyramids need at least 4 channels".into()));
    }
    let to64 = crate::scalar::to_f64::<T>;
    let targets: Vec<(f64, f64)> = gt_vertices_down
        .iter()
        .filter_map(|x| crate::geometry::project_perspective(x, cam).ok())
        .map(|uv| (to64(uv.x), to64(uv.y)))
        .collect();
    let depth = {
        let zs: Vec<f64> = gt_vertices_down.iter().map(|x| to64(cam.to_camera(x).z)).filter(|z| *z > 0.0).collect();
        if zs.is_empty() { 1.0 } else { zs.iter().sum::<f64>() / zs.len() as f64 }
    };
    synth_pyramid_from_pixels(&targets, None, depth, cam, config)
}

/// [`synth_pyramid_from_pixels`] with the surface channels filled from
/// `surface` (rest-pose coordinates in mm, one per target).
pub fn synth_pyramid_with_surface<T: Real>(
    targets: &[(f64, f64)],
    surface: &[Vector3<f64>],
    depth: f64,
    cam: &CameraView<T>,
    config: &SynthConfig,
) -> Result<FeaturePyramid<T>> {
    if surface.len() != targets.len() {
        return Err(shape_mismatch(targets.len(), surface.len()));
    }
    if config.channels < channel::SURFACE + 3 {
        return Err(Error::Config("surface coordinates need at least 7 channels".into()));
    }
    synth_pyramid_from_pixels(targets, Some(surface), depth, cam, config)
}

/// [`synth_pyramid`] from already projected target pixels at mean depth `depth` (mm).
pub fn synth_pyramid_from_pixels<T: Real>(
    targets: &[(f64, f64)],
    surface: Option<&[Vector3<f64>]>,
    depth: f64,
    cam: &CameraView<T>,
    config: &SynthConfig,
) -> Result<FeaturePyramid<T>> {
    if config.channels < 4 {
        return Err(Error::Config("synthesized pyramids need at least 4 channels".into()));
    }
    let to64 = crate::scalar::to_f64::<T>;
    let body_radius_px = config.body_radius_mm * to64(cam.focal()) / depth;
    let (w, h) = (cam.width as f64, cam.height as f64);
    let sigma = config.sigma_cells * w / config.resolutions[0] as f64;
    let clamp = config.clamp_px;

    let mut levels = Vec::with_capacity(3);
    for (level, &res) in config.resolutions.iter().enumerate() {
        let map = FeatureMap::from_fn(level, res, res, config.channels, lit::<T>(w), lit::<T>(h), |u, v| {
            let (u, v) = (to64(u), to64(v));
            let mut vals = vec![T::zero(); config.channels];
            if targets.is_empty() || config.occluders.iter().any(|r| r.contains(u, v)) {
                return vals;
            }
            let (mut best, mut best_i, mut best_d2) = (targets[0], 0, f64::INFINITY);
            for (i, &t) in targets.iter().enumerate() {
                let d2 = (t.0 - u).powi(2) + (t.1 - v).powi(2);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = t;
                    best_i = i;
                }
            }
            let d = best_d2.sqrt();
            vals[channel::OCCUPANCY] = lit((-best_d2 / (2.0 * sigma * sigma)).exp());
            vals[channel::DU] = lit((best.0 - u).clamp(-clamp, clamp));
            vals[channel::DV] = lit((best.1 - v).clamp(-clamp, clamp));
            vals[channel::SIGNED_DISTANCE] = lit(d - body_radius_px);
            if let Some(surface) = surface {
                for k in 0..3 {
                    vals[channel::SURFACE + k] = lit(surface[best_i][k] / 1000.0);
                }
            }
            vals
        })?;
        levels.push(map);
    }
    FeaturePyramid::new(levels)
}
