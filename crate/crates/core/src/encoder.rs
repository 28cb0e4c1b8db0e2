//! Multi-window textual convolution encoder.
//!
//! For every window size `n` the token sequence is zero-padded by `(n-1)/2`
//! on both ends and convolved with `K` filters of shape `n x d`, followed by
//! ReLU, giving a `T x K` map. The maps are concatenated per position and
//! passed through a two-layer MLP (ReLU hidden layer) to produce `L` local
//! logits per token. The global logits are the mean of the local logits over
//! positions.
//!
//! Batches are processed by stacking every document's rows, so each layer is
//! a single matrix product per batch.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::error::{DhimError, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::store::DocEmbedding;
use crate::wire::{put_f32s, put_u32, usize_to_u32, ByteReader};

/// Hyperparameters fixing every tensor shape of the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderShape {
    pub windows: Vec<usize>,
    pub dim: usize,
    pub filters: usize,
    pub hidden: usize,
    pub bits: usize,
}

impl EncoderShape {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(DhimError::Config("window set is empty".into()));
        }
        for (i, &n) in self.windows.iter().enumerate() {
            if n == 0 || n % 2 == 0 {
                return Err(DhimError::Config(format!("window size {n} must be odd and positive")));
            }
            if self.windows[..i].contains(&n) {
                return Err(DhimError::Config(format!("window size {n} listed twice")));
            }
        }
        if self.dim == 0 || self.filters == 0 || self.hidden == 0 || self.bits == 0 {
            return Err(DhimError::Config(format!("all encoder sizes must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn concat_width(&self) -> usize {
        self.windows.len() * self.filters
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<F> {
    pub width: usize,
    /// `K x (width * d)`; filter `k` at window offset `o`, input dim `j` sits at `[k, o * d + j]`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<F> {
    pub shape: EncoderShape,
    pub conv: Vec<ConvLayer<F>>,
    /// `(|windows| * K) x hidden`
    pub fc1_weight: Array2<F>,
    pub fc1_bias: Array1<F>,
    /// `hidden x L`
    pub fc2_weight: Array2<F>,
    pub fc2_bias: Array1<F>,
}

pub(crate) fn glorot<F: Real, R: Rng>(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || F::from_f64(rng.random_range(-limit..limit)))
}

impl<F: Real> EncoderParams<F> {
    pub fn zeros(shape: &EncoderShape) -> Self {
        let conv = shape
            .windows
            .iter()
            .map(|&n| ConvLayer {
                width: n,
                weight: Array2::zeros((shape.filters, n * shape.dim)),
                bias: Array1::zeros(shape.filters),
            })
            .collect();
        Self {
            shape: shape.clone(),
            conv,
            fc1_weight: Array2::zeros((shape.concat_width(), shape.hidden)),
            fc1_bias: Array1::zeros(shape.hidden),
            fc2_weight: Array2::zeros((shape.hidden, shape.bits)),
            fc2_bias: Array1::zeros(shape.bits),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng>(shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let mut p = Self::zeros(shape);
        for layer in &mut p.conv {
            let fan_in = layer.width * shape.dim;
            layer.weight = glorot(shape.filters, fan_in, fan_in, shape.filters, rng);
        }
        p.fc1_weight = glorot(shape.concat_width(), shape.hidden, shape.concat_width(), shape.hidden, rng);
        p.fc2_weight = glorot(shape.hidden, shape.bits, shape.hidden, shape.bits, rng);
        Ok(p)
    }

    pub fn cast<G: Real>(&self) -> EncoderParams<G> {
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.as_f64()));
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from_f64(v.as_f64()));
        EncoderParams {
            shape: self.shape.clone(),
            conv: self
                .conv
                .iter()
                .map(|l| ConvLayer {
                    width: l.width,
                    weight: c2(&l.weight),
                    bias: c1(&l.bias),
                })
                .collect(),
            fc1_weight: c2(&self.fc1_weight),
            fc1_bias: c1(&self.fc1_bias),
            fc2_weight: c2(&self.fc2_weight),
            fc2_bias: c1(&self.fc2_bias),
        }
    }

    fn window_index(&self, n: usize) -> Result<usize> {
        self.shape
            .windows
            .iter()
            .position(|&w| w == n)
            .ok_or_else(|| DhimError::Shape(format!("window size {n} not in {:?}", self.shape.windows)))
    }

    fn check_doc(&self, doc: &DocEmbedding) -> Result<()> {
        if doc.dim() != self.shape.dim {
            return Err(DhimError::Shape(format!(
                "document {} has dim {}, encoder expects {}",
                doc.doc_id,
                doc.dim(),
                self.shape.dim
            )));
        }
        Ok(())
    }
}

impl<F: Real> ParamSet<F> for EncoderParams<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut out = Vec::with_capacity(2 * self.conv.len() + 4);
        for l in &self.conv {
            out.push(l.weight.as_slice().unwrap());
            out.push(l.bias.as_slice().unwrap());
        }
        out.push(self.fc1_weight.as_slice().unwrap());
        out.push(self.fc1_bias.as_slice().unwrap());
        out.push(self.fc2_weight.as_slice().unwrap());
        out.push(self.fc2_bias.as_slice().unwrap());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::with_capacity(2 * self.conv.len() + 4);
        for l in &mut self.conv {
            out.push(l.weight.as_slice_mut().unwrap());
            out.push(l.bias.as_slice_mut().unwrap());
        }
        out.push(self.fc1_weight.as_slice_mut().unwrap());
        out.push(self.fc1_bias.as_slice_mut().unwrap());
        out.push(self.fc2_weight.as_slice_mut().unwrap());
        out.push(self.fc2_bias.as_slice_mut().unwrap());
        out
    }
}

/// Per-window post-ReLU maps for one document, in window-set order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub maps: Vec<(usize, Array2<F>)>,
}

/// Writes the centered, zero-padded windows of `tokens` into `out` (`T x n*d`).
fn fill_patches<F: Real>(tokens: &Array2<f32>, n: usize, mut out: ndarray::ArrayViewMut2<F>) {
    let (t, d) = tokens.dim();
    let pad = (n - 1) / 2;
    out.fill(F::zero());
    for i in 0..t {
        for o in 0..n {
            let src = i + o;
            if src < pad || src - pad >= t {
                continue;
            }
            let row = tokens.row(src - pad);
            let mut dst = out.slice_mut(s![i, o * d..(o + 1) * d]);
            for (x, &v) in dst.iter_mut().zip(row) {
                *x = F::from_f64(v as f64);
            }
        }
    }
}

fn conv_from_patches<F: Real>(patches: &Array2<F>, layer: &ConvLayer<F>) -> Array2<F> {
    let mut out = patches.dot(&layer.weight.t());
    out += &layer.bias;
    out.mapv_inplace(|v| v.max(F::zero()));
    out
}

/// Feature map of one window size over one document: `T x K`, post-ReLU.
pub fn conv_local<F: Real>(doc: &DocEmbedding, params: &EncoderParams<F>, n: usize) -> Result<Array2<F>> {
    params.check_doc(doc)?;
    let w = params.window_index(n)?;
    let mut patches = Array2::zeros((doc.len(), n * params.shape.dim));
    fill_patches(&doc.tokens, n, patches.view_mut());
    Ok(conv_from_patches(&patches, &params.conv[w]))
}

pub fn feature_maps<F: Real>(doc: &DocEmbedding, params: &EncoderParams<F>) -> Result<FeatureMap<F>> {
    let maps = params
        .shape
        .windows
        .iter()
        .map(|&n| Ok((n, conv_local(doc, params, n)?)))
        .collect::<Result<_>>()?;
    Ok(FeatureMap { maps })
}

fn relu_affine<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = x.dot(w);
    out += b;
    out.mapv_inplace(|v| v.max(F::zero()));
    out
}

fn affine<F: Real>(x: &Array2<F>, w: &Array2<F>, b: &Array1<F>) -> Array2<F> {
    let mut out = x.dot(w);
    out += b;
    out
}

/// Column mean of `rows` with f64 accumulation.
fn mean_over_rows<F: Real>(rows: ArrayView2<F>) -> Array1<F> {
    let n = rows.nrows() as f64;
    let mut acc = vec![0.0f64; rows.ncols()];
    for row in rows.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    acc.into_iter().map(|a| F::from_f64(a / n)).collect()
}

/// Fuses per-window maps into local logits (`T x L`) and mean-pools them
/// into the global logits (`L`).
pub fn fuse_and_readout<F: Real>(maps: &FeatureMap<F>, params: &EncoderParams<F>) -> Result<(Array2<F>, Array1<F>)> {
    let k = params.shape.filters;
    let t = maps
        .maps
        .first()
        .map(|(_, m)| m.nrows())
        .ok_or_else(|| DhimError::Shape("no feature maps".into()))?;
    let mut concat = Array2::zeros((t, params.shape.concat_width()));
    for (w, &n) in params.shape.windows.iter().enumerate() {
        let (_, m) = maps
            .maps
            .iter()
            .find(|(width, _)| *width == n)
            .ok_or_else(|| DhimError::Shape(format!("missing feature map for window {n}")))?;
        if m.dim() != (t, k) {
            return Err(DhimError::Shape(format!("window {n} map has shape {:?}, expected ({t}, {k})", m.dim())));
        }
        concat.slice_mut(s![.., w * k..(w + 1) * k]).assign(m);
    }
    let hidden = relu_affine(&concat, &params.fc1_weight, &params.fc1_bias);
    let locals = affine(&hidden, &params.fc2_weight, &params.fc2_bias);
    let global = mean_over_rows(locals.view());
    Ok((locals, global))
}

/// Activations of a stacked batch, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BatchForward<F> {
    /// Row offsets of each document in the stacked matrices (`len = batch + 1`).
    pub offsets: Vec<usize>,
    patches: Vec<Array2<F>>,
    conv_out: Vec<Array2<F>>,
    concat: Array2<F>,
    hidden: Array2<F>,
    /// Stacked local logits, one row per token of every document.
    pub locals: Array2<F>,
    /// Global logits, one row per document.
    pub globals: Array2<F>,
}

impl<F: Real> BatchForward<F> {
    pub fn doc_locals(&self, doc: usize) -> ArrayView2<'_, F> {
        self.locals.slice(s![self.offsets[doc]..self.offsets[doc + 1], ..])
    }

    pub fn batch_len(&self) -> usize {
        self.offsets.len() - 1
    }
}

pub fn forward_batch<F: Real>(params: &EncoderParams<F>, docs: &[&DocEmbedding]) -> Result<BatchForward<F>> {
    if docs.is_empty() {
        return Err(DhimError::Argument("empty batch".into()));
    }
    let shape = &params.shape;
    let mut offsets = Vec::with_capacity(docs.len() + 1);
    offsets.push(0);
    for doc in docs {
        params.check_doc(doc)?;
        offsets.push(offsets.last().unwrap() + doc.len());
    }
    let rows = *offsets.last().unwrap();
    let k = shape.filters;

    let mut patches = Vec::with_capacity(shape.windows.len());
    let mut conv_out = Vec::with_capacity(shape.windows.len());
    let mut concat = Array2::zeros((rows, shape.concat_width()));
    for (w, &n) in shape.windows.iter().enumerate() {
        let mut p = Array2::zeros((rows, n * shape.dim));
        for (j, doc) in docs.iter().enumerate() {
            fill_patches(&doc.tokens, n, p.slice_mut(s![offsets[j]..offsets[j + 1], ..]));
        }
        let c = conv_from_patches(&p, &params.conv[w]);
        concat.slice_mut(s![.., w * k..(w + 1) * k]).assign(&c);
        patches.push(p);
        conv_out.push(c);
    }
    let hidden = relu_affine(&concat, &params.fc1_weight, &params.fc1_bias);
    let locals = affine(&hidden, &params.fc2_weight, &params.fc2_bias);
    let mut globals = Array2::zeros((docs.len(), shape.bits));
    for j in 0..docs.len() {
        globals
            .row_mut(j)
            .assign(&mean_over_rows(locals.slice(s![offsets[j]..offsets[j + 1], ..])));
    }
    Ok(BatchForward {
        offsets,
        patches,
        conv_out,
        concat,
        hidden,
        locals,
        globals,
    })
}

/// Reverse pass for a stacked batch. `grad_locals` is `rows x L`,
/// `grad_globals` is `batch x L`; the global gradient reaches every local
/// row of its document scaled by `1/T`.
pub fn backward_batch<F: Real>(
    params: &EncoderParams<F>,
    fwd: &BatchForward<F>,
    grad_locals: ArrayView2<F>,
    grad_globals: ArrayView2<F>,
) -> Result<EncoderParams<F>> {
    if grad_locals.dim() != fwd.locals.dim() || grad_globals.dim() != fwd.globals.dim() {
        return Err(DhimError::Shape(format!(
            "upstream gradients {:?}/{:?} do not match outputs {:?}/{:?}",
            grad_locals.dim(),
            grad_globals.dim(),
            fwd.locals.dim(),
            fwd.globals.dim()
        )));
    }
    let k = params.shape.filters;
    let mut grads = EncoderParams::zeros(&params.shape);

    let mut d_locals = grad_locals.to_owned();
    for j in 0..fwd.batch_len() {
        let (lo, hi) = (fwd.offsets[j], fwd.offsets[j + 1]);
        let share = grad_globals.row(j).mapv(|g| g / F::from_f64((hi - lo) as f64));
        let mut block = d_locals.slice_mut(s![lo..hi, ..]);
        block += &share;
    }

    grads.fc2_weight = fwd.hidden.t().dot(&d_locals);
    grads.fc2_bias = d_locals.sum_axis(Axis(0));
    let mut d_hidden = d_locals.dot(&params.fc2_weight.t());
    ndarray::Zip::from(&mut d_hidden)
        .and(&fwd.hidden)
        .for_each(|g, &h| {
            if h <= F::zero() {
                *g = F::zero();
            }
        });

    grads.fc1_weight = fwd.concat.t().dot(&d_hidden);
    grads.fc1_bias = d_hidden.sum_axis(Axis(0));
    let d_concat = d_hidden.dot(&params.fc1_weight.t());

    for (w, layer) in grads.conv.iter_mut().enumerate() {
        let mut d_act = d_concat.slice(s![.., w * k..(w + 1) * k]).to_owned();
        ndarray::Zip::from(&mut d_act)
            .and(&fwd.conv_out[w])
            .for_each(|g, &a| {
                if a <= F::zero() {
                    *g = F::zero();
                }
            });
        layer.weight = d_act.t().dot(&fwd.patches[w]);
        layer.bias = d_act.sum_axis(Axis(0));
    }
    Ok(grads)
}

/// Gradients of every encoder parameter for one document given upstream
/// gradients on its local (`T x L`) and global (`L`) logits.
pub fn encoder_backward<F: Real>(
    doc: &DocEmbedding,
    params: &EncoderParams<F>,
    grad_locals: ArrayView2<F>,
    grad_global: ndarray::ArrayView1<F>,
) -> Result<EncoderParams<F>> {
    let fwd = forward_batch(params, &[doc])?;
    let gg = grad_global.insert_axis(Axis(0));
    backward_batch(params, &fwd, grad_locals, gg)
}

pub(crate) fn write_encoder(out: &mut Vec<u8>, p: &EncoderParams<f32>) -> Result<()> {
    let s = &p.shape;
    put_u32(out, usize_to_u32(s.windows.len(), "window count")?);
    for &n in &s.windows {
        put_u32(out, usize_to_u32(n, "window")?);
    }
    put_u32(out, usize_to_u32(s.filters, "filters")?);
    put_u32(out, usize_to_u32(s.bits, "bits")?);
    put_u32(out, usize_to_u32(s.hidden, "hidden")?);
    put_u32(out, usize_to_u32(s.dim, "dim")?);
    for t in p.tensors() {
        put_f32s(out, t.iter());
    }
    Ok(())
}

pub(crate) fn read_encoder(r: &mut ByteReader<'_>) -> Result<EncoderParams<f32>> {
    let nw = r.u32()? as usize;
    if nw == 0 || nw > 64 {
        return Err(DhimError::Format(format!("checkpoint: implausible window count {nw}")));
    }
    let windows = (0..nw).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
    let filters = r.u32()? as usize;
    let bits = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let shape = EncoderShape {
        windows,
        dim,
        filters,
        hidden,
        bits,
    };
    shape
        .validate()
        .map_err(|e| DhimError::Format(format!("checkpoint: {e}")))?;
    let mut p = EncoderParams::zeros(&shape);
    for t in p.tensors_mut() {
        let vals = r.f32s(t.len())?;
        t.copy_from_slice(&vals);
    }
    Ok(p)
}
