#![allow(dead_code)]

use dhim::binarization::BinaryCode;
use dhim::encoder::EncoderShape;
use dhim::objective::{total_loss, Model, Noise};
use dhim::{DocEmbedding, ParamSet};
use ndarray::{Array1, Array2};
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const FD_FLOOR: f64 = 1e-4;
/// Instances with a ReLU preactivation closer than this to zero are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

pub fn tiny_shape() -> EncoderShape {
    EncoderShape {
        windows: vec![1, 3, 5],
        dim: 6,
        filters: 3,
        hidden: 5,
        bits: 4,
    }
}

pub fn random_doc<R: Rng>(rng: &mut R, id: u32, t: usize, d: usize) -> DocEmbedding {
    let tokens = Array2::from_shape_simple_fn((t, d), || rng.random_range(-1.0f32..1.0));
    let cls = Array1::from_shape_simple_fn(d, || rng.random_range(-1.0f32..1.0));
    DocEmbedding::new(id, tokens, cls).unwrap()
}

/// Random f64 model with every parameter (biases included) drawn uniformly.
pub fn random_model<R: Rng>(rng: &mut R, shape: &EncoderShape) -> Model<f64> {
    let mut m = Model::<f64>::zeros(shape);
    for t in m.tensors_mut() {
        for v in t.iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
    }
    m
}

/// Smallest |preactivation| over every ReLU in the encoder, computed with
/// plain loops straight from the parameter tensors.
pub fn relu_margin(model: &Model<f64>, docs: &[&DocEmbedding]) -> f64 {
    let enc = &model.encoder;
    let shape = &enc.shape;
    let mut margin = f64::INFINITY;
    for doc in docs {
        let t = doc.len();
        let mut concat = vec![vec![0.0; shape.concat_width()]; t];
        for (w, layer) in enc.conv.iter().enumerate() {
            let n = layer.width;
            let half = (n as isize - 1) / 2;
            for pos in 0..t {
                for f in 0..shape.filters {
                    let mut z = layer.bias[f];
                    for o in 0..n {
                        let src = pos as isize + o as isize - half;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        for c in 0..shape.dim {
                            z += layer.weight[[f, o * shape.dim + c]] * f64::from(doc.tokens[[src as usize, c]]);
                        }
                    }
                    margin = margin.min(z.abs());
                    concat[pos][w * shape.filters + f] = z.max(0.0);
                }
            }
        }
        for row in &concat {
            for h in 0..shape.hidden {
                let mut z = enc.fc1_bias[h];
                for (i, x) in row.iter().enumerate() {
                    z += x * enc.fc1_weight[[i, h]];
                }
                margin = margin.min(z.abs());
            }
        }
    }
    margin
}

/// Worst relative error between analytic and central-difference gradients.
/// Returns `(max_rel, flat_index, analytic, numeric)`.
pub fn fd_check(model: &Model<f64>, docs: &[&DocEmbedding], beta: f64) -> (f64, usize, f64, f64) {
    let noise = Noise::relaxed();
    let analytic = total_loss(model, docs, beta, noise).unwrap().grads;
    let mut probe = model.clone();
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..model.num_params() {
        let orig = model.get_flat(i);
        probe.set_flat(i, orig + FD_STEP);
        let up = total_loss(&probe, docs, beta, noise).unwrap().loss;
        probe.set_flat(i, orig - FD_STEP);
        let down = total_loss(&probe, docs, beta, noise).unwrap().loss;
        probe.set_flat(i, orig);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic.get_flat(i);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
        if rel > worst.0 {
            worst = (rel, i, a, numeric);
        }
    }
    worst
}

/// Draws a tiny instance (2 documents of 4 tokens) whose ReLUs all sit
/// clear of their kink. Returns the instance and the number of redraws.
pub fn tiny_instance<R: Rng>(rng: &mut R) -> (Model<f64>, Vec<DocEmbedding>, usize) {
    let shape = tiny_shape();
    let mut redraws = 0;
    loop {
        let model = random_model(rng, &shape);
        let docs: Vec<DocEmbedding> = (0..2).map(|i| random_doc(rng, i, 4, shape.dim)).collect();
        let refs: Vec<&DocEmbedding> = docs.iter().collect();
        if relu_margin(&model, &refs) > KINK_MARGIN {
            return (model, docs, redraws);
        }
        redraws += 1;
    }
}

pub fn random_code<R: Rng>(rng: &mut R, bits: usize) -> BinaryCode {
    let b: Vec<bool> = (0..bits).map(|_| rng.random()).collect();
    BinaryCode::from_bits(&b)
}

/// Hamming distance one bit at a time.
pub fn bit_loop_hamming(a: &BinaryCode, b: &BinaryCode) -> u32 {
    (0..a.len()).filter(|&j| a.bit(j) != b.bit(j)).count() as u32
}

/// Reference top-k: full sort of (distance, id) with the query excluded.
pub fn full_sort_topk(query: &BinaryCode, query_id: u32, pool: &[(u32, BinaryCode)], k: usize) -> Vec<(u32, u32)> {
    let mut all: Vec<(u32, u32)> = pool
        .iter()
        .filter(|(id, _)| *id != query_id)
        .map(|(id, c)| (bit_loop_hamming(query, c), *id))
        .collect();
    all.sort();
    all.truncate(k);
    all.into_iter().map(|(d, id)| (id, d)).collect()
}
