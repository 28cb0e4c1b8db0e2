//! Labeled synthetic corpora: every token of a document is its cluster
//! center plus isotropic Gaussian noise.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{DhimError, Result};
use crate::store::{mean_rows, Corpus, DocEmbedding, Document, SplitDocs};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCorpusSpec {
    pub clusters: usize,
    pub dim: usize,
    pub doc_len: usize,
    /// Standard deviation of the per-token noise.
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ClusterCorpusSpec {
    fn default() -> Self {
        Self {
            clusters: 8,
            dim: 64,
            doc_len: 32,
            noise: 0.5,
            train: 1600,
            val: 200,
            test: 200,
            seed: 0,
        }
    }
}

impl ClusterCorpusSpec {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Builds the corpus: centers ~ N(0, I), labels balanced round-robin, then
/// documents shuffled into the three splits. CLS is the mean token.
pub fn cluster_corpus(spec: &ClusterCorpusSpec) -> Result<Corpus> {
    if spec.clusters == 0 || spec.dim == 0 || spec.doc_len == 0 || spec.train < 2 {
        return Err(DhimError::Argument(format!("degenerate synthetic corpus spec: {spec:?}")));
    }
    let noise = Normal::new(0.0, spec.noise)
        .map_err(|e| DhimError::Argument(format!("noise scale {}: {e}", spec.noise)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Array1<f64>> = (0..spec.clusters)
        .map(|_| Array1::from_shape_simple_fn(spec.dim, || StandardNormal.sample(&mut rng)))
        .collect();

    let mut docs: Vec<(Document, DocEmbedding)> = (0..spec.total())
        .map(|i| {
            let label = i % spec.clusters;
            let c = &centers[label];
            let tokens = Array2::from_shape_fn((spec.doc_len, spec.dim), |(_, j)| {
                (c[j] + noise.sample(&mut rng)) as f32
            });
            let cls = mean_rows(&tokens);
            let id = i as u32;
            let doc = Document {
                id,
                label: label as i32,
                len: spec.doc_len,
            };
            (doc, DocEmbedding::new(id, tokens, cls).expect("finite synthetic tokens"))
        })
        .collect();
    docs.shuffle(&mut rng);
    let test: SplitDocs = docs.split_off(spec.train + spec.val);
    let val: SplitDocs = docs.split_off(spec.train);
    Corpus::from_splits(docs, val, test)
}
