//! Feed-forward substrate: parameter bundles, masked softmax heads, exact
//! analytic backprop, and the plain/anchored gradient steps used by every
//! strategy.
//!
//! Networks are MLPs with a configurable activation on hidden layers and a
//! linear output layer feeding a (optionally label-masked) softmax. Parameters
//! live in a single flat `f64` buffer laid out layer by layer (row-major
//! `out x in` weights, then the bias vector), which keeps the element-wise
//! algebra (`axpy`, penalty terms, interpolation) trivial and exact.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;

/// Probability floor inside logarithms.
pub const EPS_P: f64 = 1e-12;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative with respect to the pre-activation `z`.
    #[inline]
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Architecture description: sizes plus hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl NetworkSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, output_dim: usize, activation: Activation) -> Self {
        NetworkSpec { input_dim, hidden_dims, output_dim, activation }
    }

    /// Total parameter count of this architecture.
    pub fn param_count(&self) -> usize {
        NetShape::from_spec(self).len
    }
}

/// Resolved layer layout shared by every tensor of one architecture.
#[derive(Debug, PartialEq, Eq)]
pub struct NetShape {
    /// Per layer `(out_dim, in_dim)`.
    dims: Vec<(usize, usize)>,
    /// Per layer `(weights_offset, bias_offset)` into the flat buffer.
    offsets: Vec<(usize, usize)>,
    len: usize,
    activation: Activation,
}

impl NetShape {
    pub fn from_spec(spec: &NetworkSpec) -> Arc<NetShape> {
        let mut dims = Vec::with_capacity(spec.hidden_dims.len() + 1);
        let mut prev = spec.input_dim;
        for &h in &spec.hidden_dims {
            dims.push((h, prev));
            prev = h;
        }
        dims.push((spec.output_dim, prev));
        Arc::new(NetShape::from_dims(dims, spec.activation))
    }

    fn from_dims(dims: Vec<(usize, usize)>, activation: Activation) -> NetShape {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(out, inp) in &dims {
            offsets.push((off, off + out * inp));
            off += out * inp + out;
        }
        NetShape { dims, offsets, len: off, activation }
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0].1
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1].0
    }

    pub fn layer_dims(&self, layer: usize) -> (usize, usize) {
        self.dims[layer]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.len
    }

    /// Flat range covering layer `l`'s weights and bias.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let (w, _) = self.offsets[layer];
        let end = if layer + 1 < self.offsets.len() { self.offsets[layer + 1].0 } else { self.len };
        w..end
    }
}

pub(crate) fn check_same_shape(a: &Arc<NetShape>, b: &Arc<NetShape>) -> Result<()> {
    if Arc::ptr_eq(a, b) || a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("incompatible layouts: {:?} vs {:?}", a.dims, b.dims)))
    }
}

/// Shape-aligned tensor bundle; implemented by `ParamSet` and `GradSet`.
pub trait TensorLike: Sized {
    fn shape(&self) -> &Arc<NetShape>;
    fn data(&self) -> &[f64];
    fn data_mut(&mut self) -> &mut [f64];
    fn from_parts(shape: Arc<NetShape>, data: Vec<f64>) -> Self;

    /// Total number of scalar entries.
    fn dims(&self) -> usize {
        self.data().len()
    }

    /// Copy of the flat buffer.
    fn flatten(&self) -> Vec<f64> {
        self.data().to_vec()
    }

    /// In-place `self += a * other`.
    fn add_scaled(&mut self, a: f64, other: &Self) -> Result<()> {
        check_same_shape(self.shape(), other.shape())?;
        let od = other.data().to_vec();
        for (s, o) in self.data_mut().iter_mut().zip(od) {
            *s += a * o;
        }
        Ok(())
    }

    fn scaled(&self, a: f64) -> Self {
        let data = self.data().iter().map(|v| a * v).collect();
        Self::from_parts(self.shape().clone(), data)
    }

    fn is_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

/// `a * x + y`, element-wise over shape-aligned tensors.
pub fn axpy<T: TensorLike>(a: f64, x: &T, y: &T) -> Result<T> {
    check_same_shape(x.shape(), y.shape())?;
    let data = x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + yv).collect();
    Ok(T::from_parts(x.shape().clone(), data))
}

/// Network parameters.
#[derive(Debug, Clone)]
pub struct ParamSet {
    shape: Arc<NetShape>,
    data: Vec<f64>,
}

/// Gradient (or any parameter-aligned diagonal, e.g. a Fisher estimate).
#[derive(Debug, Clone)]
pub struct GradSet {
    shape: Arc<NetShape>,
    data: Vec<f64>,
}

macro_rules! impl_tensor {
    ($t:ty) => {
        impl TensorLike for $t {
            fn shape(&self) -> &Arc<NetShape> {
                &self.shape
            }
            fn data(&self) -> &[f64] {
                &self.data
            }
            fn data_mut(&mut self) -> &mut [f64] {
                &mut self.data
            }
            fn from_parts(shape: Arc<NetShape>, data: Vec<f64>) -> Self {
                assert_eq!(shape.len, data.len(), "layout/buffer length mismatch");
                Self { shape, data }
            }
        }

        impl PartialEq for $t {
            fn eq(&self, other: &Self) -> bool {
                *self.shape == *other.shape && self.data == other.data
            }
        }
    };
}

impl_tensor!(ParamSet);
impl_tensor!(GradSet);

impl ParamSet {
    /// Xavier-uniform initialization: weights from
    /// `U(-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out)))`, zero biases.
    pub fn xavier_init(spec: &NetworkSpec, seed: u64) -> ParamSet {
        let shape = NetShape::from_spec(spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; shape.len];
        for l in 0..shape.num_layers() {
            let (out, inp) = shape.dims[l];
            let limit = (6.0 / (inp + out) as f64).sqrt();
            let dist = Uniform::new(-limit, limit);
            let (w_off, b_off) = shape.offsets[l];
            for w in &mut data[w_off..b_off] {
                *w = dist.sample(&mut rng);
            }
        }
        ParamSet { shape, data }
    }

    pub fn zeros(spec: &NetworkSpec) -> ParamSet {
        let shape = NetShape::from_spec(spec);
        let data = vec![0.0; shape.len];
        ParamSet { shape, data }
    }

    pub fn zeros_like(&self) -> GradSet {
        GradSet { shape: self.shape.clone(), data: vec![0.0; self.data.len()] }
    }

    pub fn from_flat(shape: Arc<NetShape>, data: Vec<f64>) -> Result<ParamSet> {
        if data.len() != shape.len {
            return Err(Error::Shape(format!(
                "flat buffer has {} entries, layout wants {}",
                data.len(),
                shape.len
            )));
        }
        Ok(ParamSet { shape, data })
    }

    /// Weights of layer `l`, row-major `(out, in)`.
    pub fn layer_weights(&self, layer: usize) -> &[f64] {
        let (w, b) = self.shape.offsets[layer];
        &self.data[w..b]
    }

    pub fn layer_bias(&self, layer: usize) -> &[f64] {
        let (_, b) = self.shape.offsets[layer];
        let (out, _) = self.shape.dims[layer];
        &self.data[b..b + out]
    }

    /// `theta + a*d1 + b*d2` for flat direction vectors (landscape probes).
    pub fn offset_by(&self, a: f64, d1: &[f64], b: f64, d2: &[f64]) -> Result<ParamSet> {
        if d1.len() != self.data.len() || d2.len() != self.data.len() {
            return Err(Error::Shape("direction length mismatch".into()));
        }
        let data = self
            .data
            .iter()
            .zip(d1.iter().zip(d2))
            .map(|(t, (u, v))| t + a * u + b * v)
            .collect();
        Ok(ParamSet { shape: self.shape.clone(), data })
    }

    /// Forward pass to a full softmax over all classes.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward_masked(x, None)
    }

    /// Forward pass; with a mask, non-member logits are excluded before the
    /// softmax and their probabilities are exactly zero.
    pub fn forward_masked(&self, x: &[f64], mask: Option<&LabelMask>) -> Result<Vec<f64>> {
        let logits = self.logits(x)?;
        softmax_masked(&logits, mask)
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.shape.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} features, network wants {}",
                x.len(),
                self.shape.input_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input".into()));
        }
        let n_layers = self.shape.num_layers();
        let mut act = x.to_vec();
        for l in 0..n_layers {
            let z = self.layer_affine(l, &act);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite pre-activation in layer {l}")));
            }
            if l + 1 < n_layers {
                act = z.iter().map(|&v| self.shape.activation.apply(v)).collect();
            } else {
                act = z;
            }
        }
        Ok(act)
    }

    /// `W_l * input + b_l`.
    fn layer_affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let (out, inp) = self.shape.dims[layer];
        let w = self.layer_weights(layer);
        let b = self.layer_bias(layer);
        let mut z = Vec::with_capacity(out);
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            z.push(acc);
        }
        z
    }
}

impl GradSet {
    pub fn zeros(spec: &NetworkSpec) -> GradSet {
        let shape = NetShape::from_spec(spec);
        let data = vec![0.0; shape.len];
        GradSet { shape, data }
    }

    /// Largest absolute entry.
    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Active-class mask for task-incremental heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    active: Vec<bool>,
    count: usize,
}

impl LabelMask {
    pub fn from_labels(labels: &[usize], num_classes: usize) -> Result<LabelMask> {
        let mut active = vec![false; num_classes];
        for &l in labels {
            if l >= num_classes {
                return Err(Error::Index(format!("label {l} out of range for {num_classes} classes")));
            }
            active[l] = true;
        }
        let count = active.iter().filter(|a| **a).count();
        if count == 0 {
            return Err(Error::Argument("label mask with no active classes".into()));
        }
        Ok(LabelMask { active, count })
    }

    pub fn full(num_classes: usize) -> LabelMask {
        LabelMask { active: vec![true; num_classes], count: num_classes }
    }

    #[inline]
    pub fn is_active(&self, class: usize) -> bool {
        self.active[class]
    }

    pub fn num_classes(&self) -> usize {
        self.active.len()
    }

    pub fn active_count(&self) -> usize {
        self.count
    }

    /// Active classes in ascending order.
    pub fn active_labels(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&k| self.active[k]).collect()
    }
}

/// Numerically stable softmax; masked entries get probability exactly zero.
pub fn softmax_masked(logits: &[f64], mask: Option<&LabelMask>) -> Result<Vec<f64>> {
    if let Some(m) = mask {
        if m.num_classes() != logits.len() {
            return Err(Error::Shape(format!(
                "mask over {} classes applied to {} logits",
                m.num_classes(),
                logits.len()
            )));
        }
    }
    let is_active = |k: usize| mask.map_or(true, |m| m.is_active(k));
    let mut mx = f64::NEG_INFINITY;
    for (k, &z) in logits.iter().enumerate() {
        if is_active(k) {
            if z.is_nan() {
                return Err(Error::Numeric("NaN logit".into()));
            }
            mx = mx.max(z);
        }
    }
    if mx == f64::NEG_INFINITY {
        return Err(Error::Argument("softmax with no active classes".into()));
    }
    let mut p = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for (k, &z) in logits.iter().enumerate() {
        if is_active(k) {
            let e = (z - mx).exp();
            p[k] = e;
            sum += e;
        }
    }
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Numeric("degenerate softmax normalizer".into()));
    }
    for v in &mut p {
        *v /= sum;
    }
    Ok(p)
}

/// `-ln(max(p_y, 1e-12))`.
pub fn cross_entropy(probs: &[f64], y: usize) -> Result<f64> {
    if y >= probs.len() {
        return Err(Error::Index(format!("class {y} out of range for {} probabilities", probs.len())));
    }
    let p = probs[y];
    if !p.is_finite() {
        return Err(Error::Numeric("non-finite probability".into()));
    }
    Ok(-(p.max(EPS_P)).ln())
}

/// One training example as seen by `backward`.
///
/// `prob_override` replaces the sample's own softmax output as the
/// distribution the loss is evaluated on (used for joint-inference training,
/// where the distribution is an average over modes and only this network's
/// share varies). The mixture weight `1/N` is NOT applied here; the caller
/// scales the returned gradient.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub x: &'a [f64],
    pub y: usize,
    pub mask: Option<&'a LabelMask>,
    pub prob_override: Option<&'a [f64]>,
}

impl<'a> TrainItem<'a> {
    pub fn plain(x: &'a [f64], y: usize) -> Self {
        TrainItem { x, y, mask: None, prob_override: None }
    }

    pub fn masked(x: &'a [f64], y: usize, mask: &'a LabelMask) -> Self {
        TrainItem { x, y, mask: Some(mask), prob_override: None }
    }
}

/// Batch-mean cross-entropy and its exact gradient.
///
/// The loss is averaged over items; for items with `prob_override` the loss
/// is the cross-entropy of the overridden distribution and the gradient
/// treats every contribution except this network's own softmax as constant.
pub fn backward(params: &ParamSet, items: &[TrainItem<'_>]) -> Result<(f64, GradSet)> {
    if items.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let per_sample = exec::run_indexed(items.len(), |i| sample_loss_grad(params, &items[i]));
    let mut loss_sum = 0.0;
    let mut acc = vec![0.0; params.data.len()];
    for r in per_sample {
        let (l, g) = r?;
        loss_sum += l;
        for (a, gv) in acc.iter_mut().zip(&g) {
            *a += gv;
        }
    }
    let scale = 1.0 / items.len() as f64;
    loss_sum *= scale;
    for a in &mut acc {
        *a *= scale;
    }
    Ok((loss_sum, GradSet { shape: params.shape.clone(), data: acc }))
}

/// Loss and flat gradient for one sample.
fn sample_loss_grad(params: &ParamSet, item: &TrainItem<'_>) -> Result<(f64, Vec<f64>)> {
    let shape = &params.shape;
    let n_layers = shape.num_layers();
    if item.x.len() != shape.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} features, network wants {}",
            item.x.len(),
            shape.input_dim()
        )));
    }
    if item.x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite input".into()));
    }

    // Forward with caches: `acts[l]` feeds layer l, `pres[l]` is its affine output.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    let mut pres: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    acts.push(item.x.to_vec());
    for l in 0..n_layers {
        let z = params.layer_affine(l, &acts[l]);
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite pre-activation in layer {l}")));
        }
        if l + 1 < n_layers {
            acts.push(z.iter().map(|&v| shape.activation.apply(v)).collect());
        }
        pres.push(z);
    }
    let probs = softmax_masked(&pres[n_layers - 1], item.mask)?;
    let k = probs.len();
    if item.y >= k {
        return Err(Error::Index(format!("class {} out of range for {k} classes", item.y)));
    }

    // Loss on the effective distribution, and the scale factor carrying
    // d(loss)/d(own probs) through the softmax.
    let (loss, scale) = match item.prob_override {
        None => (cross_entropy(&probs, item.y)?, 1.0),
        Some(rho) => {
            if rho.len() != k {
                return Err(Error::Shape(format!("override has {} entries, head has {k}", rho.len())));
            }
            let l = cross_entropy(rho, item.y)?;
            (l, probs[item.y] / rho[item.y].max(EPS_P))
        }
    };

    // delta at the logits: scale * (p - onehot(y)).
    let mut delta: Vec<f64> = probs.iter().map(|&p| scale * p).collect();
    delta[item.y] -= scale;

    let mut grad = vec![0.0; params.data.len()];
    for l in (0..n_layers).rev() {
        let (out, inp) = shape.dims[l];
        let (w_off, b_off) = shape.offsets[l];
        let input = &acts[l];
        for o in 0..out {
            let d = delta[o];
            let row = &mut grad[w_off + o * inp..w_off + (o + 1) * inp];
            for (g, xi) in row.iter_mut().zip(input) {
                *g = d * xi;
            }
            grad[b_off + o] = d;
        }
        if l > 0 {
            // delta_prev = W^T delta (.) act'(pre_{l-1})
            let w = params.layer_weights(l);
            let prev_out = shape.dims[l - 1].0;
            let mut nd = vec![0.0; prev_out];
            for o in 0..out {
                let d = delta[o];
                let row = &w[o * inp..(o + 1) * inp];
                for (ndj, wj) in nd.iter_mut().zip(row) {
                    *ndj += wj * d;
                }
            }
            for (ndj, z) in nd.iter_mut().zip(&pres[l - 1]) {
                *ndj *= shape.activation.deriv(*z);
            }
            delta = nd;
        }
    }
    Ok((loss, grad))
}

/// Plain gradient-descent step: `theta - lr * grad`.
pub fn optimizer_step(params: &ParamSet, grads: &GradSet, lr: f64) -> Result<ParamSet> {
    check_same_shape(&params.shape, &grads.shape)?;
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::Argument(format!("learning rate {lr} must be finite and non-negative")));
    }
    let data = params.data.iter().zip(&grads.data).map(|(t, g)| t - lr * g).collect();
    Ok(ParamSet { shape: params.shape.clone(), data })
}

// ───────────────────────── serialization ─────────────────────────
//
// Record format (little-endian): u64 layer count, then per layer u64 out_dim
// and u64 in_dim, then the flat parameter buffer as f64 values.

impl ParamSet {
    pub fn write_record<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.num_layers() as u64).to_le_bytes())?;
        for &(out, inp) in &self.shape.dims {
            w.write_all(&(out as u64).to_le_bytes())?;
            w.write_all(&(inp as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_record<R: Read>(r: &mut R, activation: Activation) -> Result<ParamSet> {
        let mut u = [0u8; 8];
        r.read_exact(&mut u)?;
        let n_layers = u64::from_le_bytes(u) as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Serde(format!("implausible layer count {n_layers}")));
        }
        let mut dims = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            r.read_exact(&mut u)?;
            let out = u64::from_le_bytes(u) as usize;
            r.read_exact(&mut u)?;
            let inp = u64::from_le_bytes(u) as usize;
            dims.push((out, inp));
        }
        for w in dims.windows(2) {
            if w[0].0 != w[1].1 {
                return Err(Error::Serde(format!("inconsistent layer dims {:?} -> {:?}", w[0], w[1])));
            }
        }
        let shape = Arc::new(NetShape::from_dims(dims, activation));
        let mut data = Vec::with_capacity(shape.len);
        for _ in 0..shape.len {
            r.read_exact(&mut u)?;
            data.push(f64::from_le_bytes(u));
        }
        Ok(ParamSet { shape, data })
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_record(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_from(path: &Path, activation: Activation) -> Result<ParamSet> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        ParamSet::read_record(&mut f, activation)
    }
}
