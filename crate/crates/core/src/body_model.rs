//! Procedural articulated body: template, shape blendshapes, joint regressor,
//! kinematic tree and linear blend skinning.
//!
//! The template is a capsule person with 16 joints (pelvis root, spine, chest,
//! head, two arms with elbow and wrist, two legs with knee and ankle). Vertices
//! are laid out in rings of [`RING`] around each bone; every joint owns one
//! ring centred exactly on it, and the joint regressor averages that ring.

use nalgebra::{Matrix3, OMatrix, Vector2, Vector3, Dyn, U3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::{skew, Rotation};
use crate::scalar::{lit, Real};

pub const N_JOINTS: usize = 16;
pub const RING: usize = 8;

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis", "spine", "chest", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist", "l_hip", "l_knee", "l_ankle", "r_hip", "r_knee", "r_ankle",
];

const PARENTS: [Option<usize>; N_JOINTS] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(2),
    Some(4),
    Some(5),
    Some(2),
    Some(7),
    Some(8),
    Some(0),
    Some(10),
    Some(11),
    Some(0),
    Some(13),
    Some(14),
];

const REST_JOINTS: [[f64; 3]; N_JOINTS] = [
    [0.0, 0.0, 0.0],
    [0.0, 110.0, -10.0],
    [0.0, 400.0, -10.0],
    [0.0, 530.0, 0.0],
    [175.0, 390.0, -10.0],
    [195.0, 110.0, -20.0],
    [205.0, -140.0, 0.0],
    [-175.0, 390.0, -10.0],
    [-195.0, 110.0, -20.0],
    [-205.0, -140.0, 0.0],
    [90.0, -70.0, 0.0],
    [100.0, -490.0, 10.0],
    [105.0, -880.0, -10.0],
    [-90.0, -70.0, 0.0],
    [-100.0, -490.0, 10.0],
    [-105.0, -880.0, -10.0],
];

#[derive(Clone, Copy)]
enum End {
    Joint(usize),
    Point([f64; 3]),
}

struct Bone {
    from: usize,
    to: End,
    radius: f64,
    rounded: bool,
}

fn bones() -> Vec<Bone> {
    let b = |from, to, radius| Bone { from, to, radius, rounded: false };
    vec![
        b(0, End::Joint(1), 120.0),
        b(1, End::Joint(2), 135.0),
        b(2, End::Joint(3), 55.0),
        Bone { from: 3, to: End::Point([0.0, 760.0, 10.0]), radius: 95.0, rounded: true },
        b(2, End::Joint(4), 55.0),
        b(4, End::Joint(5), 50.0),
        b(5, End::Joint(6), 40.0),
        b(6, End::Point([210.0, -320.0, 10.0]), 35.0),
        b(2, End::Joint(7), 55.0),
        b(7, End::Joint(8), 50.0),
        b(8, End::Joint(9), 40.0),
        b(9, End::Point([-210.0, -320.0, 10.0]), 35.0),
        b(0, End::Joint(10), 85.0),
        b(10, End::Joint(11), 70.0),
        b(11, End::Joint(12), 50.0),
        b(12, End::Point([110.0, -900.0, 150.0]), 40.0),
        b(0, End::Joint(13), 85.0),
        b(13, End::Joint(14), 70.0),
        b(14, End::Joint(15), 50.0),
        b(15, End::Point([-110.0, -900.0, 150.0]), 40.0),
    ]
}

/// Sizes and seed of a generated template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateConfig {
    pub seed: u64,
    pub n_vertices: usize,
    pub n_shape: usize,
    pub n_joints: usize,
    pub n_down: usize,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        TemplateConfig { seed: 0, n_vertices: 432, n_shape: 10, n_joints: N_JOINTS, n_down: 108 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyTemplate<T: Real> {
    pub rest_vertices: Vec<Vector3<T>>,
    /// `blendshapes[s][i]`: displacement of vertex `i` per unit of shape coefficient `s`.
    pub blendshapes: Vec<Vec<Vector3<T>>>,
    /// Sparse rows of the joint regressor, `(vertex, weight)`.
    pub joint_regressor: Vec<Vec<(usize, T)>>,
    pub parents: Vec<Option<usize>>,
    /// Per-vertex `(joint, weight)`, at most four entries.
    pub skin_weights: Vec<Vec<(usize, T)>>,
    pub down_indices: Vec<usize>,
    pub faces: Vec<[usize; 3]>,
    /// `ancestor[k][j]`: joint `k` is `j` or one of its ancestors.
    ancestor: Vec<Vec<bool>>,
}

impl<T: Real> BodyTemplate<T> {
    pub fn n_vertices(&self) -> usize {
        self.rest_vertices.len()
    }

    pub fn n_joints(&self) -> usize {
        self.parents.len()
    }

    pub fn n_shape(&self) -> usize {
        self.blendshapes.len()
    }

    pub fn n_down(&self) -> usize {
        self.down_indices.len()
    }

    /// Number of pose and shape parameters in the kinematic Jacobian.
    pub fn n_local_params(&self) -> usize {
        3 * (self.n_joints() - 1) + self.n_shape()
    }

    pub fn is_in_subtree(&self, root: usize, joint: usize) -> bool {
        self.ancestor[root][joint]
    }

    pub fn shaped_vertices(&self, shape: &[T]) -> Result<Vec<Vector3<T>>> {
        if shape.len() != self.n_shape() {
            return Err(shape_mismatch(self.n_shape(), shape.len()));
        }
        let mut out = self.rest_vertices.clone();
        for (beta, field) in shape.iter().zip(&self.blendshapes) {
            for (v, d) in out.iter_mut().zip(field) {
                *v += d * *beta;
            }
        }
        Ok(out)
    }

    pub fn regress_joints(&self, vertices: &[Vector3<T>]) -> Vec<Vector3<T>> {
        self.joint_regressor
            .iter()
            .map(|row| row.iter().fold(Vector3::zeros(), |acc, (i, w)| acc + vertices[*i] * *w))
            .collect()
    }
}

/// Generates the deterministic capsule-person template.
pub fn make_template<T: Real>(config: &TemplateConfig) -> Result<BodyTemplate<T>> {
    let TemplateConfig { seed, n_vertices: m, n_shape, n_joints, n_down } = *config;
    if n_joints != N_JOINTS {
        return Err(Error::InvalidSize(format!(
            "the capsule skeleton has {N_JOINTS} joints, requested {n_joints}"
        )));
    }
    if m < 4 * n_joints || m < N_JOINTS * RING || m % RING != 0 {
        return Err(Error::InvalidSize(format!(
            "vertex count {m} must be a multiple of {RING} and at least {}",
            N_JOINTS * RING
        )));
    }
    if n_down == 0 || n_down > m {
        return Err(Error::InvalidSize(format!("downsample size {n_down} out of range 1..={m}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bones = bones();
    let joint_pos: Vec<Vector3<f64>> = REST_JOINTS.iter().map(|p| Vector3::from(*p)).collect();
    let end_pos = |e: End| match e {
        End::Joint(j) => joint_pos[j],
        End::Point(p) => Vector3::from(p),
    };
    let primary_bone: Vec<Option<usize>> = (0..N_JOINTS)
        .map(|j| bones.iter().position(|b| b.from == j))
        .collect();

    let mut verts: Vec<Vector3<f64>> = Vec::with_capacity(m);
    let mut axis_points: Vec<Vector3<f64>> = Vec::with_capacity(m);
    let mut skin: Vec<Vec<(usize, f64)>> = Vec::with_capacity(m);
    let mut faces = Vec::new();
    let mut joint_ring_start = [0usize; N_JOINTS];

    let ring_frame = |axis: Vector3<f64>| {
        let reference = if axis.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let e1 = axis.cross(&reference).normalize();
        let e2 = axis.cross(&e1);
        (e1, e2)
    };
    let push_ring = |center: Vector3<f64>,
                         axis: Vector3<f64>,
                         radius: f64,
                         phase: f64,
                         weights: Vec<(usize, f64)>,
                         verts: &mut Vec<Vector3<f64>>,
                         axis_points: &mut Vec<Vector3<f64>>,
                         skin: &mut Vec<Vec<(usize, f64)>>| {
        let (e1, e2) = ring_frame(axis);
        for k in 0..RING {
            let a = phase + std::f64::consts::TAU * k as f64 / RING as f64;
            verts.push(center + (e1 * a.cos() + e2 * a.sin()) * radius);
            axis_points.push(center);
            skin.push(weights.clone());
        }
    };

    for j in 0..N_JOINTS {
        let (axis, radius) = match j {
            0 => (Vector3::y(), 110.0),
            2 => (Vector3::y(), 120.0),
            _ => {
                let b = &bones[primary_bone[j].expect("every joint has an outgoing bone")];
                ((end_pos(b.to) - joint_pos[j]).normalize(), b.radius)
            }
        };
        let weights = match PARENTS[j] {
            Some(p) => vec![(j, 0.5), (p, 0.5)],
            None => vec![(j, 1.0)],
        };
        joint_ring_start[j] = verts.len();
        push_ring(joint_pos[j], axis, radius, 0.0, weights, &mut verts, &mut axis_points, &mut skin);
    }

    // Remaining rings are split across bones by lateral area (largest remainder).
    let n_rings = (m - verts.len()) / RING;
    let areas: Vec<f64> = bones
        .iter()
        .map(|b| (end_pos(b.to) - joint_pos[b.from]).norm() * b.radius)
        .collect();
    let total: f64 = areas.iter().sum();
    let quotas: Vec<f64> = areas.iter().map(|a| a / total * n_rings as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..bones.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let assigned: usize = counts.iter().sum();
    for &b in order.iter().take(n_rings - assigned) {
        counts[b] += 1;
    }

    for (bi, bone) in bones.iter().enumerate() {
        let start = joint_pos[bone.from];
        let end = end_pos(bone.to);
        let axis = (end - start).normalize();
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let n = counts[bi];
        let mut prev_ring = if primary_bone[bone.from] == Some(bi) && bone.from != 0 && bone.from != 2 {
            Some(joint_ring_start[bone.from])
        } else {
            None
        };
        for q in 0..n {
            let t = (q + 1) as f64 / (n + 1) as f64;
            let radius = if bone.rounded {
                bone.radius * (std::f64::consts::PI * (0.12 + 0.8 * t)).sin().max(0.3)
            } else {
                bone.radius * (1.0 - 0.15 * t)
            };
            let mut w = vec![(bone.from, 1.0)];
            if let Some(p) = PARENTS[bone.from] {
                if t < 0.35 {
                    w.push((p, 0.5 * (0.35 - t) / 0.35));
                }
            }
            if let End::Joint(c) = bone.to {
                if t > 0.65 {
                    w.push((c, 0.5 * (t - 0.65) / 0.35));
                }
            }
            let sum: f64 = w.iter().map(|x| x.1).sum();
            w.iter_mut().for_each(|x| x.1 /= sum);
            let ring_start = verts.len();
            let stagger = if q % 2 == 1 { std::f64::consts::PI / RING as f64 } else { 0.0 };
            push_ring(
                start + (end - start) * t,
                axis,
                radius,
                phase + stagger,
                w,
                &mut verts,
                &mut axis_points,
                &mut skin,
            );
            if let Some(prev) = prev_ring {
                for k in 0..RING {
                    let (a0, a1) = (prev + k, prev + (k + 1) % RING);
                    let (b0, b1) = (ring_start + k, ring_start + (k + 1) % RING);
                    faces.push([a0, b0, a1]);
                    faces.push([a1, b0, b1]);
                }
            }
            prev_ring = Some(ring_start);
        }
    }
    debug_assert_eq!(verts.len(), m);

    let mut blendshapes: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(n_shape);
    for s in 0..n_shape {
        let field: Vec<Vector3<f64>> = match s {
            0 => verts.iter().map(|v| Vector3::new(0.0, 0.022 * v.y, 0.0)).collect(),
            1 => verts.iter().zip(&axis_points).map(|(v, c)| (v - c) * 0.08).collect(),
            2 => verts.iter().map(|v| Vector3::new(0.05 * v.x, 0.0, 0.0)).collect(),
            _ => {
                let k = random_unit(&mut rng);
                let dir = random_unit(&mut rng);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let omega = std::f64::consts::TAU / 1600.0;
                verts.iter().map(|v| dir * (12.0 * (omega * k.dot(v) + phase).sin())).collect()
            }
        };
        blendshapes.push(field);
    }

    let joint_regressor: Vec<Vec<(usize, f64)>> = joint_ring_start
        .iter()
        .map(|&start| (start..start + RING).map(|i| (i, 1.0 / RING as f64)).collect())
        .collect();

    let down_indices = farthest_point_sampling(&verts, n_down);

    let mut ancestor = vec![vec![false; N_JOINTS]; N_JOINTS];
    for j in 0..N_JOINTS {
        let mut cur = Some(j);
        while let Some(c) = cur {
            ancestor[c][j] = true;
            cur = PARENTS[c];
        }
    }

    let cv = |v: &Vector3<f64>| v.map(lit::<T>);
    Ok(BodyTemplate {
        rest_vertices: verts.iter().map(cv).collect(),
        blendshapes: blendshapes.iter().map(|f| f.iter().map(cv).collect()).collect(),
        joint_regressor: joint_regressor
            .into_iter()
            .map(|r| r.into_iter().map(|(i, w)| (i, lit(w))).collect())
            .collect(),
        parents: PARENTS.to_vec(),
        skin_weights: skin
            .into_iter()
            .map(|r| r.into_iter().map(|(j, w)| (j, lit(w))).collect())
            .collect(),
        down_indices,
        faces,
        ancestor,
    })
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn farthest_point_sampling(points: &[Vector3<f64>], n: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = points.iter().map(|p| (p - points[0]).norm_squared()).collect();
    while chosen.len() < n {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, d)| if *d > best.1 { (i, *d) } else { best });
        chosen.push(next);
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - points[next]).norm_squared());
        }
    }
    chosen
}

/// Per-view weak-perspective camera: scale per metre and offset in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeakCamera<T: Real> {
    pub scale: T,
    pub offset: Vector2<T>,
}

impl<T: Real> WeakCamera<T> {
    /// Camera-frame translation implied by this camera for focal `f` and crop `crop`.
    pub fn translation(&self, focal: T, crop: T) -> Result<Vector3<T>> {
        crate::estimators::weak_persp_to_translation(self.scale, &self.offset, focal, crop)
    }

    /// Inverse of [`WeakCamera::translation`].
    pub fn from_translation(t: &Vector3<T>, focal: T, crop: T) -> Result<Self> {
        if !(t.z > T::zero()) {
            return Err(Error::BehindCamera(crate::scalar::to_f64(t.z)));
        }
        let unit = lit::<T>(crate::geometry::WEAK_PERSPECTIVE_UNIT_MM);
        Ok(WeakCamera {
            scale: lit::<T>(2.0) * focal * unit / (crop * t.z),
            offset: Vector2::new(t.x, t.y),
        })
    }
}

/// Per-view body placement estimate: camera-frame orientation and weak camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewEstimate<T: Real> {
    pub orientation: Rotation<T>,
    pub camera: WeakCamera<T>,
}

/// Full parameter set of the body and its per-view placements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BodyState<T: Real> {
    /// Local rotations of joints `1..n_joints`.
    pub pose: Vec<Rotation<T>>,
    pub shape: Vec<T>,
    pub orientation: Rotation<T>,
    pub translation: Vector3<T>,
    pub scale: T,
    pub views: Vec<ViewEstimate<T>>,
}

impl<T: Real> BodyState<T> {
    pub fn neutral(n_joints: usize, n_shape: usize) -> Self {
        BodyState {
            pose: vec![Rotation::identity(); n_joints - 1],
            shape: vec![T::zero(); n_shape],
            orientation: Rotation::identity(),
            translation: Vector3::zeros(),
            scale: T::one(),
            views: Vec::new(),
        }
    }

    pub fn cast<U: Real>(&self) -> BodyState<U> {
        let c = |x: T| lit::<U>(crate::scalar::to_f64(x));
        BodyState {
            pose: self.pose.iter().map(|r| r.cast()).collect(),
            shape: self.shape.iter().map(|x| c(*x)).collect(),
            orientation: self.orientation.cast(),
            translation: self.translation.map(c),
            scale: c(self.scale),
            views: self
                .views
                .iter()
                .map(|v| ViewEstimate {
                    orientation: v.orientation.cast(),
                    camera: WeakCamera { scale: c(v.camera.scale), offset: v.camera.offset.map(c) },
                })
                .collect(),
        }
    }

    pub fn validate(&self, tpl: &BodyTemplate<T>) -> Result<()> {
        if self.pose.len() + 1 != tpl.n_joints() {
            return Err(shape_mismatch(tpl.n_joints() - 1, self.pose.len()));
        }
        if self.shape.len() != tpl.n_shape() {
            return Err(shape_mismatch(tpl.n_shape(), self.shape.len()));
        }
        if !(self.scale > T::zero()) {
            return Err(Error::NonPositiveGlobalScale(crate::scalar::to_f64(self.scale)));
        }
        Ok(())
    }
}

/// Body-frame result of shaping and posing, before the global similarity.
#[derive(Debug, Clone)]
pub struct Posed<T: Real> {
    pub vertices: Vec<Vector3<T>>,
    pub joints: Vec<Vector3<T>>,
    shaped: Vec<Vector3<T>>,
    rest_joints: Vec<Vector3<T>>,
    world_rot: Vec<Matrix3<T>>,
    /// `shape_joint_deriv[s][j]`: derivative of posed joint `j` w.r.t. shape `s`.
    shape_joint_deriv: Vec<Vec<Vector3<T>>>,
    /// `shape_rest_joint_deriv[s][j]`: derivative of rest joint `j` w.r.t. shape `s`.
    shape_rest_joint_deriv: Vec<Vec<Vector3<T>>>,
}

/// Shapes and poses the template in the body frame.
pub fn pose_body<T: Real>(tpl: &BodyTemplate<T>, pose: &[Rotation<T>], shape: &[T]) -> Result<Posed<T>> {
    if pose.len() + 1 != tpl.n_joints() {
        return Err(shape_mismatch(tpl.n_joints() - 1, pose.len()));
    }
    let shaped = tpl.shaped_vertices(shape)?;
    let rest_joints = tpl.regress_joints(&shaped);
    let nj = tpl.n_joints();
    let mut world_rot = vec![Matrix3::identity(); nj];
    let mut joints = vec![Vector3::zeros(); nj];
    joints[0] = rest_joints[0];
    for j in 1..nj {
        let p = tpl.parents[j].expect("non-root joint has a parent");
        world_rot[j] = world_rot[p] * pose[j - 1].matrix();
        joints[j] = joints[p] + world_rot[p] * (rest_joints[j] - rest_joints[p]);
    }
    let vertices = shaped
        .iter()
        .zip(&tpl.skin_weights)
        .map(|(v, ws)| {
            ws.iter().fold(Vector3::zeros(), |acc, (j, w)| {
                acc + (world_rot[*j] * (v - rest_joints[*j]) + joints[*j]) * *w
            })
        })
        .collect();

    let mut shape_joint_deriv = Vec::with_capacity(tpl.n_shape());
    let mut shape_rest_joint_deriv = Vec::with_capacity(tpl.n_shape());
    for field in &tpl.blendshapes {
        let d_rest = tpl.regress_joints(field);
        let mut d_t = vec![Vector3::zeros(); nj];
        d_t[0] = d_rest[0];
        for j in 1..nj {
            let p = tpl.parents[j].expect("non-root joint has a parent");
            d_t[j] = d_t[p] + world_rot[p] * (d_rest[j] - d_rest[p]);
        }
        shape_joint_deriv.push(d_t);
        shape_rest_joint_deriv.push(d_rest);
    }

    Ok(Posed { vertices, joints, shaped, rest_joints, world_rot, shape_joint_deriv, shape_rest_joint_deriv })
}

impl<T: Real> Posed<T> {
    /// Derivative of body-frame vertex `i` with respect to the local parameters:
    /// columns `3(k-1)..3k` are a right-multiplied rotation increment of joint
    /// `k` (`R_k <- R_k exp(d)`), followed by one column per shape coefficient.
    pub fn vertex_jacobian(&self, tpl: &BodyTemplate<T>, i: usize) -> OMatrix<T, U3, Dyn> {
        let nj = tpl.n_joints();
        let mut jac = OMatrix::<T, U3, Dyn>::zeros(tpl.n_local_params());
        let v = self.shaped[i];
        let ws = &tpl.skin_weights[i];
        let transformed: Vec<(usize, T, Vector3<T>)> = ws
            .iter()
            .map(|(j, w)| (*j, *w, self.world_rot[*j] * (v - self.rest_joints[*j]) + self.joints[*j]))
            .collect();
        for k in 1..nj {
            let lever = transformed
                .iter()
                .filter(|(j, _, _)| tpl.is_in_subtree(k, *j))
                .fold(Vector3::zeros(), |acc, (_, w, y)| acc + (y - self.joints[k]) * *w);
            if lever == Vector3::zeros() {
                continue;
            }
            let block = -skew(&lever) * self.world_rot[k];
            jac.fixed_view_mut::<3, 3>(0, 3 * (k - 1)).copy_from(&block);
        }
        let base = 3 * (nj - 1);
        for (s, field) in tpl.blendshapes.iter().enumerate() {
            let dv = field[i];
            let col = ws.iter().fold(Vector3::zeros(), |acc, (j, w)| {
                acc + (self.world_rot[*j] * (dv - self.shape_rest_joint_deriv[s][*j])
                    + self.shape_joint_deriv[s][*j])
                    * *w
            });
            jac.set_column(base + s, &col);
        }
        jac
    }

    pub fn pelvis(&self) -> Vector3<T> {
        self.joints[0]
    }
}

/// World-frame vertices and joints: `alpha * O_g * posed + T_g`.
pub fn forward<T: Real>(
    tpl: &BodyTemplate<T>,
    state: &BodyState<T>,
) -> Result<(Vec<Vector3<T>>, Vec<Vector3<T>>)> {
    state.validate(tpl)?;
    let posed = pose_body(tpl, &state.pose, &state.shape)?;
    let place = |p: &Vector3<T>| state.orientation.apply(p) * state.scale + state.translation;
    Ok((posed.vertices.iter().map(place).collect(), posed.joints.iter().map(place).collect()))
}

pub fn downsample<T: Real>(vertices: &[Vector3<T>], tpl: &BodyTemplate<T>) -> Result<Vec<Vector3<T>>> {
    if vertices.len() != tpl.n_vertices() {
        return Err(shape_mismatch(tpl.n_vertices(), vertices.len()));
    }
    Ok(tpl.down_indices.iter().map(|&i| vertices[i]).collect())
}

pub fn pelvis<T: Real>(joints: &[Vector3<T>]) -> Vector3<T> {
    joints[0]
}

/// Wavefront OBJ text for a vertex set, with the template's faces when the
/// vertex count matches.
pub fn to_obj<T: Real>(vertices: &[Vector3<T>], tpl: &BodyTemplate<T>) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for v in vertices {
        let _ = writeln!(
            out,
            "v {:.4} {:.4} {:.4}",
            crate::scalar::to_f64(v.x),
            crate::scalar::to_f64(v.y),
            crate::scalar::to_f64(v.z)
        );
    }
    if vertices.len() == tpl.n_vertices() {
        for f in &tpl.faces {
            let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
        }
    }
    out
}
