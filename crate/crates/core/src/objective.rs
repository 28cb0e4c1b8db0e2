//! Global/local mutual-information objective.
//!
//! Two affine discriminators score `(local code, global code)` pairs and
//! `(CLS code, global code)` pairs. Mutual information is estimated with the
//! Jensen-Shannon bound
//!
//! ```text
//! I(a; B) ~= mean_pos[-softplus(-D(a, B))] - mean_neg[softplus(D(a', B))]
//! ```
//!
//! where negatives pair a document's global code with codes from the other
//! documents of the minibatch. The training loss, minimized jointly over the
//! encoder and both discriminators, is
//! `-(local-global MI) - beta * (CLS-global MI)` averaged over documents.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;

use crate::binarization::{binarize_into, doc_rng, sigmoid_slope, Mode};
use crate::encoder::{backward_batch, forward_batch, glorot, EncoderParams, EncoderShape};
use crate::error::{DhimError, Result};
use crate::params::ParamSet;
use crate::real::{sigmoid, softplus, Real};
use crate::store::DocEmbedding;
use crate::wire::{put_f32s, ByteReader};

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorParams<F> {
    pub bits: usize,
    pub dim: usize,
    /// `2L` weights: the first `L` see the local code, the last `L` the global code.
    pub local_weight: Array1<F>,
    pub local_bias: Array1<F>,
    /// `d + L` weights: the first `d` see the CLS code, the last `L` the global code.
    pub cls_weight: Array1<F>,
    pub cls_bias: Array1<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Local,
    Cls,
}

impl<F: Real> DiscriminatorParams<F> {
    pub fn zeros(bits: usize, dim: usize) -> Self {
        Self {
            bits,
            dim,
            local_weight: Array1::zeros(2 * bits),
            local_bias: Array1::zeros(1),
            cls_weight: Array1::zeros(dim + bits),
            cls_bias: Array1::zeros(1),
        }
    }

    pub fn init<R: Rng>(bits: usize, dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(bits, dim);
        p.local_weight = glorot(1, 2 * bits, 2 * bits, 1, rng).remove_axis(Axis(0));
        p.cls_weight = glorot(1, dim + bits, dim + bits, 1, rng).remove_axis(Axis(0));
        p
    }

    pub fn cast<G: Real>(&self) -> DiscriminatorParams<G> {
        let c = |a: &Array1<F>| a.mapv(|v| G::from_f64(v.as_f64()));
        DiscriminatorParams {
            bits: self.bits,
            dim: self.dim,
            local_weight: c(&self.local_weight),
            local_bias: c(&self.local_bias),
            cls_weight: c(&self.cls_weight),
            cls_bias: c(&self.cls_bias),
        }
    }

    fn split(&self, which: Which) -> (ArrayView1<'_, F>, ArrayView1<'_, F>, F) {
        let (w, b, first) = match which {
            Which::Local => (&self.local_weight, &self.local_bias, self.bits),
            Which::Cls => (&self.cls_weight, &self.cls_bias, self.dim),
        };
        let (a, g) = w.view().split_at(Axis(0), first);
        (a, g, b[0])
    }
}

impl<F: Real> ParamSet<F> for DiscriminatorParams<F> {
    fn tensors(&self) -> Vec<&[F]> {
        vec![
            self.local_weight.as_slice().unwrap(),
            self.local_bias.as_slice().unwrap(),
            self.cls_weight.as_slice().unwrap(),
            self.cls_bias.as_slice().unwrap(),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        vec![
            self.local_weight.as_slice_mut().unwrap(),
            self.local_bias.as_slice_mut().unwrap(),
            self.cls_weight.as_slice_mut().unwrap(),
            self.cls_bias.as_slice_mut().unwrap(),
        ]
    }
}

fn dot<F: Real>(w: ArrayView1<F>, x: &[F]) -> f64 {
    w.iter().zip(x).map(|(&a, &b)| a.as_f64() * b.as_f64()).sum()
}

/// Raw affine discriminator logit for `concat(a, global)`.
pub fn disc_score<F: Real>(params: &DiscriminatorParams<F>, which: Which, a: &[F], global: &[F]) -> Result<f64> {
    let (wa, wg, bias) = params.split(which);
    if a.len() != wa.len() || global.len() != wg.len() {
        return Err(DhimError::Shape(format!(
            "{which:?} discriminator expects inputs of {} and {}, got {} and {}",
            wa.len(),
            wg.len(),
            a.len(),
            global.len()
        )));
    }
    Ok(dot(wa, a) + dot(wg, global) + bias.as_f64())
}

/// Pairs of `(first code, global code)` slices for the estimator.
#[derive(Debug, Clone, Default)]
pub struct PairBatch<'a, F> {
    pub positives: Vec<(&'a [F], &'a [F])>,
    pub negatives: Vec<(&'a [F], &'a [F])>,
}

/// Codes of one document: one row per local position, plus its global code.
#[derive(Debug, Clone, PartialEq)]
pub struct DocCodes<F> {
    pub locals: Array2<F>,
    pub global: Array1<F>,
}

/// Every document's global code is paired with its own local codes
/// (positives) and with every local code of the other documents (negatives).
pub fn build_pairs<F: Real>(batch: &[DocCodes<F>]) -> Result<PairBatch<'_, F>> {
    if batch.len() < 2 {
        return Err(DhimError::Argument(format!(
            "pairing needs at least 2 documents for negatives, got {}",
            batch.len()
        )));
    }
    let mut pairs = PairBatch {
        positives: Vec::new(),
        negatives: Vec::new(),
    };
    for (j, doc) in batch.iter().enumerate() {
        let global = doc
            .global
            .as_slice()
            .ok_or_else(|| DhimError::Shape("non-contiguous global code".into()))?;
        for (k, other) in batch.iter().enumerate() {
            for row in other.locals.rows() {
                let local = row
                    .to_slice()
                    .ok_or_else(|| DhimError::Shape("non-contiguous local code".into()))?;
                if k == j {
                    pairs.positives.push((local, global));
                } else {
                    pairs.negatives.push((local, global));
                }
            }
        }
    }
    Ok(pairs)
}

/// Jensen-Shannon estimate from precomputed discriminator scores.
pub fn jsd_from_scores(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(DhimError::Argument(format!(
            "estimator needs positives and negatives, got {} and {}",
            positive.len(),
            negative.len()
        )));
    }
    let pos = positive.iter().map(|&d| -softplus(-d)).sum::<f64>() / positive.len() as f64;
    let neg = negative.iter().map(|&d| softplus(d)).sum::<f64>() / negative.len() as f64;
    Ok(pos - neg)
}

pub fn jsd_mi<F: Real>(params: &DiscriminatorParams<F>, which: Which, pairs: &PairBatch<'_, F>) -> Result<f64> {
    let score = |v: &Vec<(&[F], &[F])>| -> Result<Vec<f64>> {
        v.iter().map(|(a, g)| disc_score(params, which, a, g)).collect()
    };
    jsd_from_scores(&score(&pairs.positives)?, &score(&pairs.negatives)?)
}

/// Encoder plus both discriminators: everything that is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub encoder: EncoderParams<F>,
    pub disc: DiscriminatorParams<F>,
}

impl<F: Real> Model<F> {
    pub fn init<R: Rng>(shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        let encoder = EncoderParams::init(shape, rng)?;
        let disc = DiscriminatorParams::init(shape.bits, shape.dim, rng);
        Ok(Self { encoder, disc })
    }

    pub fn zeros(shape: &EncoderShape) -> Self {
        Self {
            encoder: EncoderParams::zeros(shape),
            disc: DiscriminatorParams::zeros(shape.bits, shape.dim),
        }
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            encoder: self.encoder.cast(),
            disc: self.disc.cast(),
        }
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.encoder.shape
    }
}

impl<F: Real> ParamSet<F> for Model<F> {
    fn tensors(&self) -> Vec<&[F]> {
        let mut t = self.encoder.tensors();
        t.extend(self.disc.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.disc.tensors_mut());
        t
    }
}

/// Source of binarization noise for one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Noise {
    pub mode: Mode,
    pub seed: u64,
    pub epoch: u32,
}

impl Noise {
    pub fn relaxed() -> Self {
        Self {
            mode: Mode::Relaxed,
            seed: 0,
            epoch: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput<F> {
    pub loss: f64,
    /// Mean over documents of the local/global estimate.
    pub local_mi: f64,
    /// Mean over documents of the CLS/global estimate.
    pub cls_mi: f64,
    pub grads: Model<F>,
}

/// Loss and gradients of every trainable parameter for one minibatch.
///
/// Per document `j` with `T_j` tokens: positives are its own `T_j` locals,
/// negatives are all locals of the other documents; the two means are taken
/// per document and then averaged over the batch. The CLS term pairs `B_j`
/// with `E_j` (positive) and with every other document's `E_k` (negatives).
/// Codes are Bernoulli samples in stochastic mode and sigmoid values in
/// relaxed mode; in both cases gradients reach the logits through the
/// sigmoid slope.
pub fn total_loss<F: Real>(model: &Model<F>, docs: &[&DocEmbedding], beta: f64, noise: Noise) -> Result<LossOutput<F>> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(DhimError::Argument(format!("beta must be finite and >= 0, got {beta}")));
    }
    let n_docs = docs.len();
    if n_docs < 2 {
        return Err(DhimError::Argument(format!(
            "a minibatch needs at least 2 documents, got {n_docs}"
        )));
    }
    let shape = model.shape();
    let (bits, dim) = (shape.bits, shape.dim);
    let fwd = forward_batch(&model.encoder, docs)?;
    let offsets = &fwd.offsets;
    let rows = *offsets.last().unwrap();

    let mut local_codes = Array2::<F>::zeros((rows, bits));
    let mut global_codes = Array2::<F>::zeros((n_docs, bits));
    let mut cls_codes = Array2::<F>::zeros((n_docs, dim));
    for (j, doc) in docs.iter().enumerate() {
        let mut rng = doc_rng(noise.seed, doc.doc_id, noise.epoch);
        for r in offsets[j]..offsets[j + 1] {
            binarize_into(
                fwd.locals.row(r).iter().copied(),
                noise.mode,
                &mut rng,
                local_codes.row_mut(r).as_slice_mut().unwrap(),
            )?;
        }
        binarize_into(
            fwd.globals.row(j).iter().copied(),
            noise.mode,
            &mut rng,
            global_codes.row_mut(j).as_slice_mut().unwrap(),
        )?;
        binarize_into(
            doc.cls.iter().map(|&v| F::from_f64(v as f64)),
            noise.mode,
            &mut rng,
            cls_codes.row_mut(j).as_slice_mut().unwrap(),
        )?;
    }

    let disc = &model.disc;
    let (wl_a, wl_g, bl) = disc.split(Which::Local);
    let (wc_e, wc_g, bc) = disc.split(Which::Cls);
    let local_part: Vec<f64> = local_codes.rows().into_iter().map(|r| dot(wl_a, r.as_slice().unwrap())).collect();
    let global_part: Vec<f64> = global_codes
        .rows()
        .into_iter()
        .map(|r| dot(wl_g, r.as_slice().unwrap()) + bl.as_f64())
        .collect();
    let cls_part: Vec<f64> = cls_codes.rows().into_iter().map(|r| dot(wc_e, r.as_slice().unwrap())).collect();
    let cls_global_part: Vec<f64> = global_codes
        .rows()
        .into_iter()
        .map(|r| dot(wc_g, r.as_slice().unwrap()) + bc.as_f64())
        .collect();

    // dLoss/dScore accumulated per code row.
    let mut coef_local = vec![0.0f64; rows];
    let mut coef_global = vec![0.0f64; n_docs];
    let mut coef_cls = vec![0.0f64; n_docs];
    let mut coef_cls_global = vec![0.0f64; n_docs];
    let inv_docs = 1.0 / n_docs as f64;
    let mut local_mi = 0.0;
    let mut cls_mi = 0.0;

    for j in 0..n_docs {
        let (lo, hi) = (offsets[j], offsets[j + 1]);
        let n_pos = (hi - lo) as f64;
        let n_neg = (rows - (hi - lo)) as f64;
        let g = global_part[j];
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (r, (&s, coef)) in local_part.iter().zip(coef_local.iter_mut()).enumerate() {
            let score = s + g;
            let c = if (lo..hi).contains(&r) {
                pos += softplus(-score);
                -sigmoid(-score) * inv_docs / n_pos
            } else {
                neg += softplus(score);
                sigmoid(score) * inv_docs / n_neg
            };
            *coef += c;
            coef_global[j] += c;
        }
        local_mi -= pos / n_pos + neg / n_neg;

        let g = cls_global_part[j];
        let n_neg = (n_docs - 1) as f64;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for (k, &s) in cls_part.iter().enumerate() {
            let score = s + g;
            let c = if k == j {
                pos += softplus(-score);
                -sigmoid(-score) * beta * inv_docs
            } else {
                neg += softplus(score);
                sigmoid(score) * beta * inv_docs / n_neg
            };
            coef_cls[k] += c;
            coef_cls_global[j] += c;
        }
        cls_mi -= pos + neg / n_neg;
    }
    local_mi *= inv_docs;
    cls_mi *= inv_docs;
    let loss = -local_mi - beta * cls_mi;
    if !loss.is_finite() {
        return Err(DhimError::Numeric(format!("non-finite loss {loss}")));
    }

    let to_f = |v: &[f64]| Array1::from_iter(v.iter().map(|&x| F::from_f64(x)));
    let (cl, cg, ce, ccg) = (to_f(&coef_local), to_f(&coef_global), to_f(&coef_cls), to_f(&coef_cls_global));

    let mut dgrads = DiscriminatorParams::zeros(bits, dim);
    {
        let (mut wa, mut wg) = dgrads.local_weight.view_mut().split_at(Axis(0), bits);
        wa.assign(&local_codes.t().dot(&cl));
        wg.assign(&global_codes.t().dot(&cg));
        dgrads.local_bias[0] = F::from_f64(coef_global.iter().sum());
        let (mut we, mut wg) = dgrads.cls_weight.view_mut().split_at(Axis(0), dim);
        we.assign(&cls_codes.t().dot(&ce));
        wg.assign(&global_codes.t().dot(&ccg));
        dgrads.cls_bias[0] = F::from_f64(coef_cls_global.iter().sum());
    }

    // Code gradients, then through the sigmoid slope onto the logits.
    let mut d_locals = Array2::<F>::zeros((rows, bits));
    for (r, mut row) in d_locals.rows_mut().into_iter().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            let g = coef_local[r] * wl_a[k].as_f64();
            *v = F::from_f64(g * sigmoid_slope(fwd.locals[[r, k]].as_f64()));
        }
    }
    let mut d_globals = Array2::<F>::zeros((n_docs, bits));
    for (j, mut row) in d_globals.rows_mut().into_iter().enumerate() {
        for (k, v) in row.iter_mut().enumerate() {
            let g = coef_global[j] * wl_g[k].as_f64() + coef_cls_global[j] * wc_g[k].as_f64();
            *v = F::from_f64(g * sigmoid_slope(fwd.globals[[j, k]].as_f64()));
        }
    }
    let egrads = backward_batch(&model.encoder, &fwd, d_locals.view(), d_globals.view())?;

    Ok(LossOutput {
        loss,
        local_mi,
        cls_mi,
        grads: Model {
            encoder: egrads,
            disc: dgrads,
        },
    })
}

pub(crate) fn write_disc(out: &mut Vec<u8>, p: &DiscriminatorParams<f32>) {
    for t in p.tensors() {
        put_f32s(out, t.iter());
    }
}

pub(crate) fn read_disc(r: &mut ByteReader<'_>, bits: usize, dim: usize) -> Result<DiscriminatorParams<f32>> {
    let mut p = DiscriminatorParams::zeros(bits, dim);
    for t in p.tensors_mut() {
        let vals = r.f32s(t.len())?;
        t.copy_from_slice(&vals);
    }
    Ok(p)
}
