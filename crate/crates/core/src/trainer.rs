//! Minibatch Adam training with validation-based model selection, the
//! `DHCK` checkpoint format, and code emission for corpus splits.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binarization::{deterministic_binarize, median_binarize, BinaryCode, CodesFile, Mode};
use crate::encoder::{forward_batch, read_encoder, write_encoder, EncoderParams, EncoderShape};
use crate::error::{DhimError, Result};
use crate::objective::{read_disc, total_loss, write_disc, Model, Noise};
use crate::params::ParamSet;
use crate::real::Real;
use crate::retrieval::{evaluate, CodeIndex, PrecisionReport};
use crate::store::{Corpus, DocEmbedding, Split};
use crate::wire::{put_f64, put_u32, usize_to_u32, ByteReader};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DHCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Gradients are rescaled to this global L2 norm when they exceed it.
pub const CLIP_NORM: f64 = 5.0;

/// Retrieval depth used for model selection and evaluation.
pub const EVAL_K: usize = 100;

const SHUFFLE_SALT: u64 = 0x5eed_5eed_5eed_5eed;

/// Rule turning global logits into emitted codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CodeRule {
    /// bit = 1 iff logit >= 0
    #[default]
    Sign,
    /// bit = 1 iff logit > the per-bit median over the encoded set
    Median,
}

impl FromStr for CodeRule {
    type Err = DhimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sign" => Ok(CodeRule::Sign),
            "median" => Ok(CodeRule::Median),
            other => Err(DhimError::Argument(format!("unknown code rule '{other}'"))),
        }
    }
}

impl fmt::Display for CodeRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodeRule::Sign => "sign",
            CodeRule::Median => "median",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub bits: usize,
    pub filters: usize,
    pub hidden: usize,
    pub windows: Vec<usize>,
    pub learning_rate: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub mode: Mode,
    pub regularizer: bool,
    pub code_rule: CodeRule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            bits: 32,
            filters: 128,
            hidden: 256,
            windows: vec![1, 3, 5],
            learning_rate: 1e-4,
            beta: 0.5,
            batch_size: 64,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            mode: Mode::Stochastic,
            regularizer: true,
            code_rule: CodeRule::Sign,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DhimError::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(DhimError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.batch_size < 2 {
            return Err(DhimError::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if self.max_epochs == 0 {
            return Err(DhimError::Config("max_epochs must be >= 1".into()));
        }
        self.encoder_shape(1).validate()
    }

    /// Regularizer weight actually applied.
    pub fn effective_beta(&self) -> f64 {
        if self.regularizer {
            self.beta
        } else {
            0.0
        }
    }

    pub fn encoder_shape(&self, dim: usize) -> EncoderShape {
        EncoderShape {
            windows: self.windows.clone(),
            dim,
            filters: self.filters,
            hidden: self.hidden,
            bits: self.bits,
        }
    }

    /// `key=value` lines; floats use the shortest exact representation.
    pub fn to_kv(&self) -> String {
        let windows: Vec<String> = self.windows.iter().map(|w| w.to_string()).collect();
        [
            format!("bits={}", self.bits),
            format!("filters={}", self.filters),
            format!("hidden={}", self.hidden),
            format!("windows={}", windows.join(",")),
            format!("lr={:?}", self.learning_rate),
            format!("beta={:?}", self.beta),
            format!("batch_size={}", self.batch_size),
            format!("epochs={}", self.max_epochs),
            format!("patience={}", self.patience),
            format!("seed={}", self.seed),
            format!("mode={}", self.mode),
            format!("regularizer={}", self.regularizer),
            format!("code_rule={}", self.code_rule),
        ]
        .join("\n")
            + "\n"
    }

    /// Applies `key=value` pairs on top of `self`. Unknown keys are errors.
    pub fn apply_kv(&mut self, pairs: &BTreeMap<String, String>) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| DhimError::Config(format!("bad value '{v}' for '{key}'")))
        }
        for (key, v) in pairs {
            match key.as_str() {
                "bits" => self.bits = num(key, v)?,
                "filters" => self.filters = num(key, v)?,
                "hidden" => self.hidden = num(key, v)?,
                "windows" => self.windows = parse_windows(v)?,
                "lr" => self.learning_rate = num(key, v)?,
                "beta" => self.beta = num(key, v)?,
                "batch_size" => self.batch_size = num(key, v)?,
                "epochs" => self.max_epochs = num(key, v)?,
                "patience" => self.patience = num(key, v)?,
                "seed" => self.seed = num(key, v)?,
                "mode" => self.mode = v.trim().parse().map_err(|_| DhimError::Config(format!("bad mode '{v}'")))?,
                "regularizer" => self.regularizer = num(key, v)?,
                "code_rule" => {
                    self.code_rule = v.trim().parse().map_err(|_| DhimError::Config(format!("bad code rule '{v}'")))?
                }
                other => return Err(DhimError::Config(format!("unknown config key '{other}'"))),
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(&parse_kv(text)?)?;
        Ok(cfg)
    }
}

pub fn parse_windows(v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| DhimError::Config(format!("bad window list '{v}'")))
        })
        .collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| DhimError::Config(format!("expected key=value, got '{line}'")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Adam with bias correction. Moments mirror the parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new<P: ParamSet<F>>(params: &P) -> Self {
        let zeros = |p: &P| p.tensors().iter().map(|t| vec![F::zero(); t.len()]).collect();
        Self {
            first: zeros(params),
            second: zeros(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn moments(&self) -> (&[Vec<F>], &[Vec<F>]) {
        (&self.first, &self.second)
    }

    pub fn update<P: ParamSet<F>>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let gt = grads.tensors();
        if gt.len() != self.first.len() || gt.iter().zip(&self.first).any(|(g, m)| g.len() != m.len()) {
            return Err(DhimError::Shape("gradient tensors do not match optimizer state".into()));
        }
        for (i, g) in gt.iter().enumerate() {
            if let Some(j) = g.iter().position(|v| !v.is_finite()) {
                return Err(DhimError::Numeric(format!(
                    "non-finite gradient in tensor {i} at entry {j} (step {})",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(gt)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let m1 = self.beta1 * m.as_f64() + (1.0 - self.beta1) * g;
                let v1 = self.beta2 * v.as_f64() + (1.0 - self.beta2) * g * g;
                *m = F::from_f64(m1);
                *v = F::from_f64(v1);
                let m_hat = m1 / c1;
                let v_hat = v1 / c2;
                *p = F::from_f64(p.as_f64() - lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}

/// Functional form of one Adam update.
pub fn adam_step<F: Real, P: ParamSet<F>>(params: &mut P, grads: &P, state: &mut AdamState<F>, lr: f64) -> Result<()> {
    state.update(params, grads, lr)
}

/// Rescales `grads` to at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<F: Real, P: ParamSet<F>>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(F::from_f64(max_norm / norm));
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub val_precision: f64,
    pub epoch: u32,
}

impl ModelCheckpoint {
    /// `"DHCK" | u32 version | encoder hyperparameters and tensors |
    /// discriminator tensors | u32 config length | config key=value text |
    /// f64 validation precision | u32 epoch`, all little-endian.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        write_encoder(&mut out, &self.model.encoder)?;
        write_disc(&mut out, &self.model.disc);
        let cfg = self.config.to_kv();
        put_u32(&mut out, usize_to_u32(cfg.len(), "config length")?);
        out.extend_from_slice(cfg.as_bytes());
        put_f64(&mut out, self.val_precision);
        put_u32(&mut out, self.epoch);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let encoder = read_encoder(&mut r)?;
        let disc = read_disc(&mut r, encoder.shape.bits, encoder.shape.dim)?;
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?)
            .map_err(|_| DhimError::Format("checkpoint: config is not UTF-8".into()))?;
        let config = TrainConfig::from_kv(text).map_err(|e| DhimError::Format(format!("checkpoint: {e}")))?;
        let val_precision = r.f64()?;
        let epoch = r.u32()?;
        r.finish()?;
        if config.encoder_shape(encoder.shape.dim) != encoder.shape {
            return Err(DhimError::Format(
                "checkpoint: config disagrees with stored tensor shapes".into(),
            ));
        }
        Ok(Self {
            model: Model { encoder, disc },
            config,
            val_precision,
            epoch,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub val_precision: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: ModelCheckpoint,
    pub history: Vec<EpochStats>,
}

/// Global logits (`N x L`) for a list of documents, in input order.
pub fn global_logits<F: Real>(encoder: &EncoderParams<F>, docs: &[&DocEmbedding]) -> Result<Array2<F>> {
    const CHUNK: usize = 256;
    let mut out = Array2::zeros((docs.len(), encoder.shape.bits));
    for (c, chunk) in docs.chunks(CHUNK).enumerate() {
        let fwd = forward_batch(encoder, chunk)?;
        out.slice_mut(s![c * CHUNK..c * CHUNK + chunk.len(), ..]).assign(&fwd.globals);
    }
    Ok(out)
}

/// Codes for `docs` (in input order) under `rule`.
pub fn encode_docs<F: Real>(encoder: &EncoderParams<F>, docs: &[&DocEmbedding], rule: CodeRule) -> Result<Vec<(u32, BinaryCode)>> {
    if docs.is_empty() {
        return Ok(Vec::new());
    }
    let logits = global_logits(encoder, docs)?;
    let codes = match rule {
        CodeRule::Sign => logits
            .rows()
            .into_iter()
            .map(|r| deterministic_binarize(r.as_slice().unwrap()))
            .collect(),
        CodeRule::Median => median_binarize(logits.view())?,
    };
    Ok(docs.iter().map(|d| d.doc_id).zip(codes).collect())
}

fn validation_precision(model: &Model<f32>, corpus: &Corpus, rule: CodeRule) -> Result<f64> {
    let labels = corpus.labels();
    let pool = encode_docs(&model.encoder, &corpus.split_embeddings(Split::Train), rule)?;
    let queries = encode_docs(&model.encoder, &corpus.split_embeddings(Split::Val), rule)?;
    let index = CodeIndex::new(model.shape().bits, &pool, &labels)?;
    let k = EVAL_K.min(index.len());
    Ok(evaluate(&queries, &index, &labels, k)?.precision)
}

/// Shuffled minibatches for one epoch; a trailing single document joins the
/// previous batch so every batch has a negative source.
fn epoch_batches(ids: &[u32], batch_size: usize, seed: u64, epoch: u32) -> Vec<Vec<u32>> {
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(u64::from(epoch));
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<u32>> = order.chunks(batch_size).map(<[u32]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// One optimizer pass over the training split; returns the mean batch loss.
fn run_epoch(model: &mut Model<f32>, adam: &mut AdamState<f32>, corpus: &Corpus, ids: &[u32], cfg: &TrainConfig, epoch: u32) -> Result<f64> {
    let noise = Noise {
        mode: cfg.mode,
        seed: cfg.seed,
        epoch,
    };
    let mut total = 0.0;
    let batches = epoch_batches(ids, cfg.batch_size, cfg.seed, epoch);
    for batch in &batches {
        let docs: Vec<&DocEmbedding> = batch.iter().map(|id| corpus.embedding(*id).unwrap()).collect();
        let mut out = total_loss(model, &docs, cfg.effective_beta(), noise)?;
        let norm = clip_global_norm(&mut out.grads, CLIP_NORM);
        debug!("epoch {epoch} loss {:.5} grad-norm {norm:.4}", out.loss);
        adam.update(model, &out.grads, cfg.learning_rate)?;
        total += out.loss;
    }
    Ok(total / batches.len() as f64)
}

pub fn train(corpus: &Corpus, cfg: &TrainConfig) -> Result<ModelCheckpoint> {
    Ok(train_with_history(corpus, cfg)?.checkpoint)
}

/// Trains from a seeded initialization, keeping the model with the best
/// validation precision@100 (sign or median codes per `cfg.code_rule`).
/// Stops once `patience` consecutive epochs fail to improve on it.
pub fn train_with_history(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ids: Vec<u32> = corpus.split(Split::Train).iter().map(|d| d.id).collect();
    if ids.len() < 2 {
        return Err(DhimError::Argument(format!(
            "training split needs at least 2 documents, has {}",
            ids.len()
        )));
    }
    if corpus.split(Split::Val).is_empty() {
        return Err(DhimError::Argument("validation split is empty".into()));
    }
    let shape = cfg.encoder_shape(corpus.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::<f32>::init(&shape, &mut rng)?;
    let mut adam = AdamState::new(&model);

    let mut best: Option<ModelCheckpoint> = None;
    let mut history = Vec::new();
    let mut stale = 0usize;
    for epoch in 0..cfg.max_epochs {
        let epoch = epoch as u32;
        let mean_loss = run_epoch(&mut model, &mut adam, corpus, &ids, cfg, epoch)?;
        let val_precision = validation_precision(&model, corpus, cfg.code_rule)?;
        info!("epoch {epoch}: loss {mean_loss:.5}, val precision {val_precision:.4}");
        history.push(EpochStats {
            epoch,
            mean_loss,
            val_precision,
        });
        if best.as_ref().is_none_or(|b| val_precision > b.val_precision) {
            best = Some(ModelCheckpoint {
                model: model.clone(),
                config: cfg.clone(),
                val_precision,
                epoch,
            });
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: best.expect("at least one epoch runs"),
        history,
    })
}

/// Codes for one split ordered by document id, using `rule` (or the
/// checkpoint's own rule when `None`).
pub fn encode_split(ckpt: &ModelCheckpoint, corpus: &Corpus, split: Split, rule: Option<CodeRule>) -> Result<CodesFile> {
    let shape = ckpt.model.shape();
    if shape.dim != corpus.dim() {
        return Err(DhimError::Config(format!(
            "checkpoint expects dim {}, corpus has dim {}",
            shape.dim,
            corpus.dim()
        )));
    }
    let mut docs = corpus.split_embeddings(split);
    docs.sort_by_key(|d| d.doc_id);
    let entries = encode_docs(&ckpt.model.encoder, &docs, rule.unwrap_or(ckpt.config.code_rule))?;
    Ok(CodesFile {
        bits: shape.bits,
        entries,
    })
}

/// Precision@100 of `query_split` codes against training-split codes.
pub fn evaluate_checkpoint(ckpt: &ModelCheckpoint, corpus: &Corpus, query_split: Split, rule: Option<CodeRule>) -> Result<PrecisionReport> {
    let labels = corpus.labels();
    let pool = encode_split(ckpt, corpus, Split::Train, rule)?;
    let queries = encode_split(ckpt, corpus, query_split, rule)?;
    let index = CodeIndex::from_codes_file(&pool, &labels)?;
    let k = EVAL_K.min(index.len());
    evaluate(&queries.entries, &index, &labels, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![0.5f64, -1.0];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &vec![1.0, 1.0], &mut st, 0.01).unwrap();
        let after_one = p.clone();
        let m_before = st.moments().0[0].clone();
        adam_step(&mut p, &vec![0.0, 0.0], &mut st, 0.01).unwrap();
        let m_after = &st.moments().0[0];
        for (a, b) in m_before.iter().zip(m_after) {
            assert!(b.abs() < a.abs());
        }
        // with zero gradient from the start, nothing moves at all
        let mut q = vec![0.5f64, -1.0];
        let mut st = AdamState::new(&q);
        adam_step(&mut q, &vec![0.0, 0.0], &mut st, 0.01).unwrap();
        assert_eq!(q, vec![0.5, -1.0]);
        assert_eq!(st.step, 1);
        assert_ne!(after_one, vec![0.5, -1.0]);
    }

    #[test]
    fn first_step_hand_value() {
        let mut p = vec![0.0f64];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &vec![1.0], &mut st, 0.1).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] + 0.0999999).abs() < 1e-7);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = vec![0.0f64, 1.0];
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &vec![0.0, f64::NAN], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, DhimError::Numeric(_)));
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut g = vec![3.0f64, 4.0];
        assert_eq!(clip_global_norm(&mut g, 5.0), 5.0);
        assert_eq!(g, vec![3.0, 4.0]);
        let mut g = vec![30.0f64, 40.0];
        clip_global_norm(&mut g, 5.0);
        assert!((g.global_norm() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let cfg = TrainConfig {
            learning_rate: 3e-4,
            beta: 0.1 + 0.2,
            windows: vec![1, 3],
            mode: Mode::Relaxed,
            regularizer: false,
            code_rule: CodeRule::Median,
            seed: u64::MAX,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        assert!(TrainConfig::from_kv("nonsense=1").is_err());
        assert!(TrainConfig::from_kv("bits=abc").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.beta = -0.1));
        assert!(bad(|c| c.windows = vec![2]));
    }

    #[test]
    fn batches_cover_every_id_once() {
        let ids: Vec<u32> = (0..11).collect();
        let b = epoch_batches(&ids, 5, 3, 0);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![5, 6]);
        let mut all: Vec<u32> = b.concat();
        all.sort();
        assert_eq!(all, ids);
        assert_eq!(epoch_batches(&ids, 5, 3, 0), b);
        assert_ne!(epoch_batches(&ids, 5, 3, 1), b);
    }
}
