//! Unsupervised binary document codes learned by
//! maximizing mutual information between local n-gram codes and a global
//! document code, with Hamming-space retrieval and evaluation.

pub mod binarization;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod objective;
pub mod params;
pub mod real;
pub mod retrieval;
pub mod store;
pub mod synth;
pub mod trainer;
mod wire;

pub use binarization::{BinaryCode, CodesFile, Mode};
pub use encoder::{EncoderParams, EncoderShape};
pub use error::{DhimError, Result};
pub use objective::{DiscriminatorParams, Model, Noise};
pub use params::ParamSet;
pub use retrieval::{CodeIndex, PrecisionReport, RetrievalResult};
pub use store::{Corpus, DocEmbedding, Document, Split};
pub use trainer::{CodeRule, ModelCheckpoint, TrainConfig};
