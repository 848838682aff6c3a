//! Vertex-wise multi-view aggregation, the view-token transformer encoder and
//! the parameter decoders.
//!
//! Linear layers store `w` as `out x in` and act on row tokens as
//! `y = x * w^T + b`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, RowDVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_mismatch, Error, Result};
use crate::geometry::Rot6d;
use crate::io::Tensor;
use crate::scalar::{lit, Real};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Positivity floor of the decoded weak-perspective scale.
pub const CAMERA_SCALE_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AggregationKind {
    MaxPool,
    AvgPool,
    SoftmaxSum,
    TransformerThenMaxPool,
}

impl AggregationKind {
    pub const ALL: [AggregationKind; 4] = [
        AggregationKind::MaxPool,
        AggregationKind::AvgPool,
        AggregationKind::SoftmaxSum,
        AggregationKind::TransformerThenMaxPool,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AggregationKind::MaxPool => "MP",
            AggregationKind::AvgPool => "AP",
            AggregationKind::SoftmaxSum => "SOFTMAX_SUM",
            AggregationKind::TransformerThenMaxPool => "Transformer+MP",
        }
    }
}

impl std::str::FromStr for AggregationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mp" | "max" | "maxpool" => Ok(AggregationKind::MaxPool),
            "ap" | "avg" | "avgpool" => Ok(AggregationKind::AvgPool),
            "softmax" | "softmax_sum" | "softmaxsum" => Ok(AggregationKind::SoftmaxSum),
            "transformer+mp" | "transformer" | "tmp" => Ok(AggregationKind::TransformerThenMaxPool),
            _ => Err(Error::Config(format!("unknown aggregation kind `{s}`"))),
        }
    }
}

fn check_views<T: Real>(per_view: &[DMatrix<T>], masks: &[Vec<bool>]) -> Result<(usize, usize)> {
    let first = per_view.first().ok_or(Error::TooFewViews { need: 1, got: 0 })?;
    let (rows, cols) = first.shape();
    if masks.len() != per_view.len() {
        return Err(shape_mismatch(per_view.len(), masks.len()));
    }
    for (m, mask) in per_view.iter().zip(masks) {
        if m.shape() != (rows, cols) {
            return Err(shape_mismatch(format!("{rows}x{cols}"), format!("{}x{}", m.nrows(), m.ncols())));
        }
        if mask.len() != rows {
            return Err(shape_mismatch(rows, mask.len()));
        }
    }
    Ok((rows, cols))
}

/// Fuses `N` per-view `|D| x h` feature matrices into one, vertex by vertex
/// and channel by channel over the valid views. Vertices with no valid view
/// fuse to zero. `encoder` is the cross-view encoder for
/// [`AggregationKind::TransformerThenMaxPool`]; `None` means identity.
pub fn aggregate<T: Real>(
    per_view: &[DMatrix<T>],
    masks: &[Vec<bool>],
    kind: AggregationKind,
    encoder: Option<&EncoderWeights<T>>,
) -> Result<DMatrix<T>> {
    let (rows, cols) = check_views(per_view, masks)?;
    let mut out = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        let views: Vec<usize> = (0..per_view.len()).filter(|&v| masks[v][i]).collect();
        if views.is_empty() {
            continue;
        }
        match kind {
            AggregationKind::MaxPool => {
                for c in 0..cols {
                    out[(i, c)] = views.iter().map(|&v| per_view[v][(i, c)]).fold(T::min_value().unwrap(), |a, b| a.max(b));
                }
            }
            AggregationKind::AvgPool => {
                let n = lit::<T>(views.len() as f64);
                for c in 0..cols {
                    out[(i, c)] = views.iter().fold(T::zero(), |a, &v| a + per_view[v][(i, c)]) / n;
                }
            }
            AggregationKind::SoftmaxSum => {
                for c in 0..cols {
                    let vals: Vec<T> = views.iter().map(|&v| per_view[v][(i, c)]).collect();
                    let m = vals.iter().copied().fold(T::min_value().unwrap(), |a, b| a.max(b));
                    let w: Vec<T> = vals.iter().map(|x| (*x - m).exp()).collect();
                    let z = w.iter().fold(T::zero(), |a, b| a + *b);
                    out[(i, c)] = vals.iter().zip(&w).fold(T::zero(), |a, (x, wi)| a + *x * *wi) / z;
                }
            }
            AggregationKind::TransformerThenMaxPool => {
                let tokens = DMatrix::from_fn(views.len(), cols, |r, c| per_view[views[r]][(i, c)]);
                let encoded = match encoder {
                    Some(e) => transformer_encode(&tokens, e)?,
                    None => tokens,
                };
                for c in 0..cols {
                    out[(i, c)] = encoded.column(c).max();
                }
            }
        }
    }
    Ok(out)
}

/// Index of the view attaining each fused maximum (ties to the lowest index);
/// vertices without a valid view report view 0.
pub fn argmax_views<T: Real>(per_view: &[DMatrix<T>], masks: &[Vec<bool>]) -> Result<DMatrix<usize>> {
    let (rows, cols) = check_views(per_view, masks)?;
    let mut out = DMatrix::from_element(rows, cols, 0usize);
    for i in 0..rows {
        for c in 0..cols {
            let mut best: Option<(usize, T)> = None;
            for (v, m) in per_view.iter().enumerate() {
                if !masks[v][i] {
                    continue;
                }
                let x = m[(i, c)];
                if best.is_none_or(|(_, b)| x > b) {
                    best = Some((v, x));
                }
            }
            out[(i, c)] = best.map_or(0, |b| b.0);
        }
    }
    Ok(out)
}

/// Dense layer, `w: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T: Real> {
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: DMatrix::zeros(output, input), b: DVector::zeros(output) }
    }

    fn uniform(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            w: DMatrix::from_fn(output, input, |_, _| lit(rng.gen_range(-bound..bound))),
            b: DVector::from_fn(output, |_, _| lit(rng.gen_range(-bound..bound))),
        }
    }

    pub fn input(&self) -> usize {
        self.w.ncols()
    }

    pub fn output(&self) -> usize {
        self.w.nrows()
    }

    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        if x.len() != self.input() {
            return Err(shape_mismatch(self.input(), x.len()));
        }
        Ok(&self.w * x + &self.b)
    }

    /// Applies the layer to every row of `x`.
    pub fn apply_rows(&self, x: &DMatrix<T>) -> Result<DMatrix<T>> {
        if x.ncols() != self.input() {
            return Err(shape_mismatch(self.input(), x.ncols()));
        }
        let mut y = x * self.w.transpose();
        for mut row in y.row_iter_mut() {
            row += self.b.transpose();
        }
        Ok(y)
    }
}

/// Perceptron with ReLU between layers and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Real> {
    pub layers: Vec<Linear<T>>,
}

impl<T: Real> Mlp<T> {
    /// Hidden layers seeded uniform in `+-1/sqrt(fan_in)`, final layer zero.
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Linear::uniform(fan_in, h, rng));
            fan_in = h;
        }
        layers.push(Linear::zeros(fan_in, output));
        Mlp { layers }
    }

    pub fn input(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output(&self) -> usize {
        self.layers.last().expect("non-empty perceptron").output()
    }

    pub fn apply(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h)?;
            if i + 1 < self.layers.len() {
                h.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T: Real> {
    pub gain: DVector<T>,
    pub bias: DVector<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn identity(width: usize) -> Self {
        LayerNorm { gain: DVector::from_element(width, T::one()), bias: DVector::zeros(width) }
    }

    fn apply_rows(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let n = lit::<T>(x.ncols() as f64);
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            let mean = row.sum() / n;
            let var = row.iter().fold(T::zero(), |a, v| a + (*v - mean) * (*v - mean)) / n;
            let inv = T::one() / (var + lit(LAYER_NORM_EPS)).sqrt();
            for (k, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * self.gain[k] + self.bias[k];
            }
        }
        y
    }
}

/// One pre-norm encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T: Real> {
    pub norm1: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T: Real> {
    pub heads: usize,
    pub layers: Vec<EncoderLayer<T>>,
}

impl<T: Real> EncoderWeights<T> {
    /// All projections zero, layer norms identity: the encoder is the identity map.
    pub fn zeros(width: usize, heads: usize, layers: usize, ff_width: usize) -> Self {
        let layer = EncoderLayer {
            norm1: LayerNorm::identity(width),
            query: Linear::zeros(width, width),
            key: Linear::zeros(width, width),
            value: Linear::zeros(width, width),
            out: Linear::zeros(width, width),
            norm2: LayerNorm::identity(width),
            ff1: Linear::zeros(width, ff_width),
            ff2: Linear::zeros(ff_width, width),
        };
        EncoderWeights { heads, layers: vec![layer; layers] }
    }

    /// Uniformly initialized projections, identity layer norms.
    pub fn init(width: usize, heads: usize, layers: usize, ff_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = (0..layers)
            .map(|_| EncoderLayer {
                norm1: LayerNorm::identity(width),
                query: Linear::uniform(width, width, rng),
                key: Linear::uniform(width, width, rng),
                value: Linear::uniform(width, width, rng),
                out: Linear::uniform(width, width, rng),
                norm2: LayerNorm::identity(width),
                ff1: Linear::uniform(width, ff_width, rng),
                ff2: Linear::uniform(ff_width, width, rng),
            })
            .collect();
        EncoderWeights { heads, layers }
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.query.input())
    }
}

fn softmax_rows<T: Real>(m: &mut DMatrix<T>) {
    for mut row in m.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|x| *x = (*x - max).exp());
        let z = row.sum();
        row.iter_mut().for_each(|x| *x /= z);
    }
}

/// Pre-norm transformer encoder over `N` view tokens (rows of `tokens`):
/// `x += MHA(LN1(x)); x += FF(LN2(x))` per layer, no positional encoding.
pub fn transformer_encode<T: Real>(tokens: &DMatrix<T>, weights: &EncoderWeights<T>) -> Result<DMatrix<T>> {
    if tokens.nrows() == 0 {
        return Err(Error::TooFewViews { need: 1, got: 0 });
    }
    let width = tokens.ncols();
    let heads = weights.heads;
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::InvalidSize(format!("token width {width} not divisible by {heads} heads")));
    }
    if weights.width() != width && !weights.layers.is_empty() {
        return Err(shape_mismatch(weights.width(), width));
    }
    let dh = width / heads;
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut x = tokens.clone();
    for layer in &weights.layers {
        let h = layer.norm1.apply_rows(&x);
        let q = layer.query.apply_rows(&h)?;
        let k = layer.key.apply_rows(&h)?;
        let v = layer.value.apply_rows(&h)?;
        let mut concat = DMatrix::zeros(x.nrows(), width);
        for head in 0..heads {
            let cols = head * dh;
            let qh = q.columns(cols, dh);
            let kh = k.columns(cols, dh);
            let vh = v.columns(cols, dh);
            let mut scores = qh * kh.transpose() * scale;
            softmax_rows(&mut scores);
            concat.columns_mut(cols, dh).copy_from(&(scores * vh));
        }
        x += layer.out.apply_rows(&concat)?;
        let h = layer.norm2.apply_rows(&x);
        let mut f = layer.ff1.apply_rows(&h)?;
        f.iter_mut().for_each(|v| *v = v.max(T::zero()));
        x += layer.ff2.apply_rows(&f)?;
    }
    Ok(x)
}

/// Sizes of the neural-mode networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    /// Width of a feedback-feature row (`C + 2`).
    pub feature_width: usize,
    pub n_down: usize,
    /// Number of non-root joints.
    pub n_pose: usize,
    pub n_shape: usize,
    /// Pose/shape token width.
    pub pose_width: usize,
    pub pose_heads: usize,
    /// Orientation token width.
    pub orient_width: usize,
    pub orient_heads: usize,
    pub encoder_layers: usize,
    pub hidden: Vec<usize>,
    /// Length of the grid-sampled initialization feature.
    pub grid_features: usize,
}

impl Default for FusionDims {
    fn default() -> Self {
        FusionDims {
            feature_width: 10,
            n_down: 108,
            n_pose: 15,
            n_shape: 10,
            pose_width: 16,
            pose_heads: 4,
            orient_width: 80,
            orient_heads: 5,
            encoder_layers: 2,
            hidden: vec![256, 256],
            grid_features: 8 * 8 * 8,
        }
    }
}

impl FusionDims {
    pub fn pose_shape_outputs(&self) -> usize {
        6 * self.n_pose + self.n_shape
    }
}

/// Every learned tensor of the neural-mode regressor.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T: Real> {
    pub dims: FusionDims,
    pub pose_proj: Linear<T>,
    pub pose_encoder: EncoderWeights<T>,
    pub pose_decoder: Mlp<T>,
    pub orient_proj: Linear<T>,
    pub orient_encoder: EncoderWeights<T>,
    pub orient_decoder: Mlp<T>,
    pub camera_decoder: Mlp<T>,
    pub init_decoder: Mlp<T>,
}

impl<T: Real> FusionWeights<T> {
    /// Seeded initialization: earlier layers uniform `+-1/sqrt(fan_in)`, final
    /// decoder layers zero so the first deltas vanish.
    pub fn init(dims: &FusionDims, seed: u64) -> Result<Self> {
        if !dims.orient_width.is_multiple_of(dims.orient_heads) || !dims.pose_width.is_multiple_of(dims.pose_heads) {
            return Err(Error::Config("token widths must be divisible by head counts".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = dims.pose_shape_outputs();
        Ok(FusionWeights {
            dims: dims.clone(),
            pose_proj: Linear::uniform(dims.feature_width, dims.pose_width, &mut rng),
            pose_encoder: EncoderWeights::init(dims.pose_width, dims.pose_heads, dims.encoder_layers, 2 * dims.pose_width, &mut rng),
            pose_decoder: Mlp::init(dims.pose_width * dims.n_down, &dims.hidden, out, &mut rng),
            orient_proj: Linear::uniform(dims.feature_width * dims.n_down, dims.orient_width, &mut rng),
            orient_encoder: EncoderWeights::init(dims.orient_width, dims.orient_heads, dims.encoder_layers, 2 * dims.orient_width, &mut rng),
            orient_decoder: Mlp::init(dims.orient_width, &dims.hidden, 6, &mut rng),
            camera_decoder: Mlp::init(dims.orient_width, &dims.hidden, 3, &mut rng),
            init_decoder: Mlp::init(dims.grid_features, &dims.hidden, out, &mut rng),
        })
    }

    /// Named tensors in a fixed order (the weights-file manifest order).
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        push_linear(&mut out, "pose_proj", &self.pose_proj);
        push_encoder(&mut out, "pose_encoder", &self.pose_encoder);
        push_mlp(&mut out, "pose_decoder", &self.pose_decoder);
        push_linear(&mut out, "orient_proj", &self.orient_proj);
        push_encoder(&mut out, "orient_encoder", &self.orient_encoder);
        push_mlp(&mut out, "orient_decoder", &self.orient_decoder);
        push_mlp(&mut out, "camera_decoder", &self.camera_decoder);
        push_mlp(&mut out, "init_decoder", &self.init_decoder);
        out
    }

    pub fn from_tensors(dims: &FusionDims, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let w = FusionWeights {
            dims: dims.clone(),
            pose_proj: read_linear(tensors, "pose_proj")?,
            pose_encoder: read_encoder(tensors, "pose_encoder", dims.pose_heads, dims.encoder_layers)?,
            pose_decoder: read_mlp(tensors, "pose_decoder", dims.hidden.len() + 1)?,
            orient_proj: read_linear(tensors, "orient_proj")?,
            orient_encoder: read_encoder(tensors, "orient_encoder", dims.orient_heads, dims.encoder_layers)?,
            orient_decoder: read_mlp(tensors, "orient_decoder", dims.hidden.len() + 1)?,
            camera_decoder: read_mlp(tensors, "camera_decoder", dims.hidden.len() + 1)?,
            init_decoder: read_mlp(tensors, "init_decoder", dims.hidden.len() + 1)?,
        };
        w.check()?;
        Ok(w)
    }

    /// Mutual shape consistency and finiteness.
    pub fn check(&self) -> Result<()> {
        let d = &self.dims;
        let expect = |what: &str, got: usize, want: usize| {
            if got == want { Ok(()) } else { Err(shape_mismatch(format!("{what}={want}"), format!("{what}={got}"))) }
        };
        expect("pose_proj.in", self.pose_proj.input(), d.feature_width)?;
        expect("pose_proj.out", self.pose_proj.output(), d.pose_width)?;
        expect("pose_decoder.in", self.pose_decoder.input(), d.pose_width * d.n_down)?;
        expect("pose_decoder.out", self.pose_decoder.output(), d.pose_shape_outputs())?;
        expect("orient_proj.in", self.orient_proj.input(), d.feature_width * d.n_down)?;
        expect("orient_proj.out", self.orient_proj.output(), d.orient_width)?;
        expect("orient_decoder.in", self.orient_decoder.input(), d.orient_width)?;
        expect("orient_decoder.out", self.orient_decoder.output(), 6)?;
        expect("camera_decoder.in", self.camera_decoder.input(), d.orient_width)?;
        expect("camera_decoder.out", self.camera_decoder.output(), 3)?;
        expect("init_decoder.in", self.init_decoder.input(), d.grid_features)?;
        expect("init_decoder.out", self.init_decoder.output(), d.pose_shape_outputs())?;
        expect("orient_encoder.width", self.orient_encoder.width(), d.orient_width)?;
        expect("pose_encoder.width", self.pose_encoder.width(), d.pose_width)?;
        for (name, t) in self.to_tensors() {
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("tensor `{name}` has non-finite entries")));
            }
        }
        Ok(())
    }
}

fn push_matrix<T: Real>(out: &mut Vec<(String, Tensor)>, name: String, m: &DMatrix<T>) {
    let data = (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| (r, c))).map(|(r, c)| crate::scalar::to_f64(m[(r, c)]) as f32).collect();
    out.push((name, Tensor { shape: vec![m.nrows(), m.ncols()], data }));
}

fn push_vector<T: Real>(out: &mut Vec<(String, Tensor)>, name: String, v: &DVector<T>) {
    out.push((name, Tensor { shape: vec![v.len()], data: v.iter().map(|x| crate::scalar::to_f64(*x) as f32).collect() }));
}

fn push_linear<T: Real>(out: &mut Vec<(String, Tensor)>, name: &str, l: &Linear<T>) {
    push_matrix(out, format!("{name}.w"), &l.w);
    push_vector(out, format!("{name}.b"), &l.b);
}

fn push_mlp<T: Real>(out: &mut Vec<(String, Tensor)>, name: &str, m: &Mlp<T>) {
    for (i, l) in m.layers.iter().enumerate() {
        push_linear(out, &format!("{name}.{i}"), l);
    }
}

fn push_encoder<T: Real>(out: &mut Vec<(String, Tensor)>, name: &str, e: &EncoderWeights<T>) {
    for (i, l) in e.layers.iter().enumerate() {
        let p = format!("{name}.{i}");
        push_vector(out, format!("{p}.norm1.gain"), &l.norm1.gain);
        push_vector(out, format!("{p}.norm1.bias"), &l.norm1.bias);
        push_linear(out, &format!("{p}.query"), &l.query);
        push_linear(out, &format!("{p}.key"), &l.key);
        push_linear(out, &format!("{p}.value"), &l.value);
        push_linear(out, &format!("{p}.out"), &l.out);
        push_vector(out, format!("{p}.norm2.gain"), &l.norm2.gain);
        push_vector(out, format!("{p}.norm2.bias"), &l.norm2.bias);
        push_linear(out, &format!("{p}.ff1"), &l.ff1);
        push_linear(out, &format!("{p}.ff2"), &l.ff2);
    }
}

fn get<'a>(t: &'a BTreeMap<String, Tensor>, name: &str) -> Result<&'a Tensor> {
    t.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

fn read_matrix<T: Real>(t: &BTreeMap<String, Tensor>, name: &str) -> Result<DMatrix<T>> {
    let x = get(t, name)?;
    if x.shape.len() != 2 {
        return Err(shape_mismatch(format!("{name}: rank 2"), format!("rank {}", x.shape.len())));
    }
    Ok(DMatrix::from_row_iterator(x.shape[0], x.shape[1], x.data.iter().map(|v| lit(*v as f64))))
}

fn read_vector<T: Real>(t: &BTreeMap<String, Tensor>, name: &str) -> Result<DVector<T>> {
    let x = get(t, name)?;
    if x.shape.len() != 1 {
        return Err(shape_mismatch(format!("{name}: rank 1"), format!("rank {}", x.shape.len())));
    }
    Ok(DVector::from_iterator(x.shape[0], x.data.iter().map(|v| lit(*v as f64))))
}

fn read_linear<T: Real>(t: &BTreeMap<String, Tensor>, name: &str) -> Result<Linear<T>> {
    let l = Linear { w: read_matrix(t, &format!("{name}.w"))?, b: read_vector(t, &format!("{name}.b"))? };
    if l.b.len() != l.w.nrows() {
        return Err(shape_mismatch(format!("{name}.b: {}", l.w.nrows()), l.b.len()));
    }
    Ok(l)
}

fn read_mlp<T: Real>(t: &BTreeMap<String, Tensor>, name: &str, n_layers: usize) -> Result<Mlp<T>> {
    let layers: Vec<Linear<T>> = (0..n_layers).map(|i| read_linear(t, &format!("{name}.{i}"))).collect::<Result<_>>()?;
    for w in layers.windows(2) {
        if w[0].output() != w[1].input() {
            return Err(shape_mismatch(format!("{name}: {}", w[0].output()), w[1].input()));
        }
    }
    Ok(Mlp { layers })
}

fn read_encoder<T: Real>(t: &BTreeMap<String, Tensor>, name: &str, heads: usize, n_layers: usize) -> Result<EncoderWeights<T>> {
    let layers = (0..n_layers)
        .map(|i| {
            let p = format!("{name}.{i}");
            Ok(EncoderLayer {
                norm1: LayerNorm { gain: read_vector(t, &format!("{p}.norm1.gain"))?, bias: read_vector(t, &format!("{p}.norm1.bias"))? },
                query: read_linear(t, &format!("{p}.query"))?,
                key: read_linear(t, &format!("{p}.key"))?,
                value: read_linear(t, &format!("{p}.value"))?,
                out: read_linear(t, &format!("{p}.out"))?,
                norm2: LayerNorm { gain: read_vector(t, &format!("{p}.norm2.gain"))?, bias: read_vector(t, &format!("{p}.norm2.bias"))? },
                ff1: read_linear(t, &format!("{p}.ff1"))?,
                ff2: read_linear(t, &format!("{p}.ff2"))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(EncoderWeights { heads, layers })
}

fn split_pose_shape<T: Real>(out: &DVector<T>, n_pose: usize, n_shape: usize) -> (Vec<Rot6d<T>>, Vec<T>) {
    let pose = (0..n_pose)
        .map(|j| {
            let mut r = [T::zero(); 6];
            r.copy_from_slice(&out.as_slice()[6 * j..6 * j + 6]);
            Rot6d(r)
        })
        .collect();
    let shape = out.as_slice()[6 * n_pose..6 * n_pose + n_shape].to_vec();
    (pose, shape)
}

/// Flattens the fused `|D| x h` features row-major and decodes additive 6D
/// joint deltas and shape deltas.
pub fn decode_pose_shape<T: Real>(fused: &DMatrix<T>, weights: &FusionWeights<T>) -> Result<(Vec<Rot6d<T>>, Vec<T>)> {
    let d = &weights.dims;
    if fused.shape() != (d.n_down, d.pose_width) {
        return Err(shape_mismatch(format!("{}x{}", d.n_down, d.pose_width), format!("{}x{}", fused.nrows(), fused.ncols())));
    }
    let flat = DVector::from_iterator(fused.len(), fused.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
    let out = weights.pose_decoder.apply(&flat)?;
    Ok(split_pose_shape(&out, d.n_pose, d.n_shape))
}

/// Pose and shape deltas from the pooled grid-sampled features.
pub fn decode_init<T: Real>(grid: &DVector<T>, weights: &FusionWeights<T>) -> Result<(Vec<Rot6d<T>>, Vec<T>)> {
    let out = weights.init_decoder.apply(grid)?;
    Ok(split_pose_shape(&out, weights.dims.n_pose, weights.dims.n_shape))
}

pub fn decode_orientation<T: Real>(token: &RowDVector<T>, weights: &FusionWeights<T>) -> Result<Rot6d<T>> {
    let out = weights.orient_decoder.apply(&token.transpose())?;
    let mut r = [T::zero(); 6];
    r.copy_from_slice(out.as_slice());
    Ok(Rot6d(r))
}

/// `(s, o_x, o_y)` with `s = ln(1 + e^x) + 0.1`.
pub fn decode_camera<T: Real>(token: &RowDVector<T>, weights: &FusionWeights<T>) -> Result<(T, T, T)> {
    let out = weights.camera_decoder.apply(&token.transpose())?;
    Ok((softplus(out[0]) + lit(CAMERA_SCALE_MIN), out[1], out[2]))
}

pub fn softplus<T: Real>(x: T) -> T {
    // stable for large |x|
    x.max(T::zero()) + (T::one() + (-x.abs()).exp()).ln()
}

/// Per-view orientation tokens: flattened feedback rows through the projection.
pub fn orientation_tokens<T: Real>(per_view: &[DMatrix<T>], weights: &FusionWeights<T>) -> Result<DMatrix<T>> {
    let mut tokens = DMatrix::zeros(per_view.len(), weights.dims.orient_width);
    for (v, m) in per_view.iter().enumerate() {
        let flat = DVector::from_iterator(m.len(), m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()));
        tokens.set_row(v, &weights.orient_proj.apply(&flat)?.transpose());
    }
    Ok(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn views(n: usize, rows: usize, cols: usize, seed: u64) -> Vec<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))).collect()
    }

    fn random_encoder(width: usize, heads: usize, seed: u64) -> EncoderWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EncoderWeights::init(width, heads, 2, 2 * width, &mut rng)
    }

    #[test]
    fn single_view_identity() {
        let v = views(1, 5, 4, 1);
        let m = vec![vec![true; 5]];
        let enc = EncoderWeights::zeros(4, 2, 2, 8);
        for kind in AggregationKind::ALL {
            let out = aggregate(&v, &m, kind, Some(&enc)).unwrap();
            assert!((out - &v[0]).abs().max() < 1e-12, "{kind:?}");
        }
    }

    #[test]
    fn identical_views_pool_to_that_view() {
        let v = views(1, 5, 3, 2);
        let all = vec![v[0].clone(), v[0].clone(), v[0].clone()];
        let m = vec![vec![true; 5]; 3];
        for kind in [AggregationKind::MaxPool, AggregationKind::AvgPool, AggregationKind::SoftmaxSum] {
            assert!((aggregate(&all, &m, kind, None).unwrap() - &v[0]).abs().max() < 1e-12);
        }
        assert_eq!(argmax_views(&all, &m).unwrap(), DMatrix::from_element(5, 3, 0));
    }

    #[test]
    fn maxpool_definition() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[0.0, 5.0]);
        let m = vec![vec![true]; 2];
        let out = aggregate(&[a.clone(), b.clone()], &m, AggregationKind::MaxPool, None).unwrap();
        assert_eq!(out.as_slice(), &[1.0, 5.0]);
        let c = DMatrix::from_row_slice(1, 2, &[0.5, 9.0]);
        let idx = argmax_views(&[a, b, c], &vec![vec![true]; 3]).unwrap();
        assert_eq!(idx.as_slice(), &[0, 2]);
    }

    #[test]
    fn no_views_is_error_and_unmasked_vertex_zero() {
        assert!(aggregate::<f64>(&[], &[], AggregationKind::MaxPool, None).is_err());
        let v = views(2, 3, 2, 4);
        let m = vec![vec![true, false, true], vec![true, false, false]];
        let out = aggregate(&v, &m, AggregationKind::AvgPool, None).unwrap();
        assert_eq!(out.row(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0]);
        assert_eq!(out.row(2), v[0].row(2));
    }

    #[test]
    fn zero_encoder_is_identity() {
        let t = views(1, 4, 10, 5).remove(0);
        let out = transformer_encode(&t, &EncoderWeights::zeros(10, 5, 2, 20)).unwrap();
        assert!((out - t).abs().max() < 1e-12);
    }

    #[test]
    fn encoder_head_mismatch_is_error() {
        let t = DMatrix::<f64>::zeros(3, 10);
        assert!(transformer_encode(&t, &EncoderWeights::zeros(10, 3, 1, 4)).is_err());
    }

    #[test]
    fn zero_decoders() {
        let dims = FusionDims { n_down: 6, hidden: vec![8], grid_features: 12, orient_width: 10, ..Default::default() };
        let mut w = FusionWeights::<f64>::init(&dims, 1).unwrap();
        let fused = DMatrix::from_element(6, 16, 0.3);
        let (dp, ds) = decode_pose_shape(&fused, &w).unwrap();
        assert_eq!(dp.len(), 15);
        assert!(dp.iter().all(|r| r.0 == [0.0; 6]) && ds.iter().all(|x| *x == 0.0));
        let tok = RowDVector::from_element(10, 1.0);
        assert_eq!(decode_orientation(&tok, &w).unwrap().0, [0.0; 6]);
        let (s, ox, oy) = decode_camera(&tok, &w).unwrap();
        assert!((s - (2f64.ln() + 0.1)).abs() < 1e-12 && ox == 0.0 && oy == 0.0);

        // doubling the final layer doubles the output
        let last = w.pose_decoder.layers.len() - 1;
        w.pose_decoder.layers[last].w.iter_mut().for_each(|x| *x = 0.01);
        w.pose_decoder.layers[last].b.iter_mut().for_each(|x| *x = 0.02);
        let (a, _) = decode_pose_shape(&fused, &w).unwrap();
        w.pose_decoder.layers[last].w.iter_mut().for_each(|x| *x *= 2.0);
        w.pose_decoder.layers[last].b.iter_mut().for_each(|x| *x *= 2.0);
        let (b, _) = decode_pose_shape(&fused, &w).unwrap();
        assert!((b[3].0[2] - 2.0 * a[3].0[2]).abs() < 1e-12);
        assert!(decode_pose_shape(&DMatrix::zeros(5, 16), &w).is_err());
    }

    #[test]
    fn camera_scale_monotone() {
        let mut prev = f64::NEG_INFINITY;
        for x in [-50.0, -3.0, -0.5, 0.0, 0.7, 4.0, 80.0] {
            let s = softplus(x) + CAMERA_SCALE_MIN;
            assert!(s > prev && s >= CAMERA_SCALE_MIN);
            prev = s;
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn permutation_invariance(seed in 0u64..10_000) {
            let v = views(4, 6, 4, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let m: Vec<Vec<bool>> = (0..4).map(|_| (0..6).map(|_| rng.gen_bool(0.8)).collect()).collect();
            let perm = [2usize, 0, 3, 1];
            let pv: Vec<_> = perm.iter().map(|&i| v[i].clone()).collect();
            let pm: Vec<_> = perm.iter().map(|&i| m[i].clone()).collect();
            let enc = random_encoder(4, 2, seed);
            for kind in AggregationKind::ALL {
                let a = aggregate(&v, &m, kind, Some(&enc)).unwrap();
                let b = aggregate(&pv, &pm, kind, Some(&enc)).unwrap();
                prop_assert!((a - b).abs().max() < 1e-9);
            }
        }

        #[test]
        fn pooled_values_within_view_range(seed in 0u64..10_000) {
            let v = views(3, 5, 3, seed);
            let m = vec![vec![true; 5]; 3];
            for kind in [AggregationKind::MaxPool, AggregationKind::AvgPool, AggregationKind::SoftmaxSum] {
                let out = aggregate(&v, &m, kind, None).unwrap();
                for i in 0..5 {
                    for c in 0..3 {
                        let lo = v.iter().map(|x| x[(i, c)]).fold(f64::MAX, f64::min);
                        let hi = v.iter().map(|x| x[(i, c)]).fold(f64::MIN, f64::max);
                        prop_assert!(out[(i, c)] >= lo - 1e-12 && out[(i, c)] <= hi + 1e-12);
                    }
                }
            }
        }

        #[test]
        fn masked_view_never_influences(seed in 0u64..10_000) {
            let v = views(4, 6, 4, seed);
            let enc = random_encoder(4, 2, seed);
            let mut m = vec![vec![true; 6]; 4];
            m[2] = vec![false; 6];
            let fewer: Vec<_> = [0usize, 1, 3].iter().map(|&i| v[i].clone()).collect();
            for kind in AggregationKind::ALL {
                let a = aggregate(&v, &m, kind, Some(&enc)).unwrap();
                let b = aggregate(&fewer, &vec![vec![true; 6]; 3], kind, Some(&enc)).unwrap();
                prop_assert!((a - b).abs().max() < 1e-12);
            }
        }

        #[test]
        fn encoder_permutation_equivariance(seed in 0u64..10_000) {
            let t = views(1, 4, 10, seed).remove(0);
            let enc = random_encoder(10, 5, seed);
            let perm = [3usize, 1, 0, 2];
            let pt = DMatrix::from_fn(4, 10, |r, c| t[(perm[r], c)]);
            let a = transformer_encode(&t, &enc).unwrap();
            let b = transformer_encode(&pt, &enc).unwrap();
            let pa = DMatrix::from_fn(4, 10, |r, c| a[(perm[r], c)]);
            prop_assert!((pa - b).abs().max() < 1e-9);
        }
    }
}
