//! Logits to bits: Bernoulli sampling with a sigmoid-slope straight-through
//! gradient for training, sign thresholding (or per-bit median thresholding)
//! for emitted codes, and the `DHCB` codes file.

use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DhimError, Result};
use crate::real::{sigmoid, Real};
use crate::wire::{put_u32, put_u64, usize_to_u32, ByteReader};

pub const CODES_MAGIC: &[u8; 4] = b"DHCB";
pub const CODES_VERSION: u32 = 1;

/// An `L`-bit code packed little-endian into 64-bit words: bit `j` of word
/// `w` is code bit `64 * w + j`. Pad bits past `L` are always zero.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryCode {
    len: usize,
    words: Vec<u64>,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl BinaryCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; words_for(len)],
        }
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (j, &b) in bits.iter().enumerate() {
            code.set(j, b);
        }
        code
    }

    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(DhimError::Shape(format!(
                "{} words cannot hold exactly {len} bits",
                words.len()
            )));
        }
        if !len.is_multiple_of(64) {
            let pad_mask = !0u64 << (len % 64);
            if words.last().is_some_and(|w| w & pad_mask != 0) {
                return Err(DhimError::Format(format!("code of {len} bits has nonzero pad bits")));
            }
        }
        Ok(Self { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, j: usize) -> bool {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        self.words[j / 64] >> (j % 64) & 1 == 1
    }

    pub fn set(&mut self, j: usize, value: bool) {
        assert!(j < self.len, "bit {j} out of range for {}-bit code", self.len);
        let mask = 1u64 << (j % 64);
        if value {
            self.words[j / 64] |= mask;
        } else {
            self.words[j / 64] &= !mask;
        }
    }

    pub fn bits(&self) -> Vec<bool> {
        (0..self.len).map(|j| self.bit(j)).collect()
    }
}

impl fmt::Display for BinaryCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.len {
            f.write_str(if self.bit(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// How the binarization layer behaves during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Bits drawn from Bernoulli(sigmoid(logit)).
    #[default]
    Stochastic,
    /// The layer outputs sigmoid(logit) itself; the model is exactly differentiable.
    Relaxed,
}

impl FromStr for Mode {
    type Err = DhimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(Mode::Stochastic),
            "relaxed" => Ok(Mode::Relaxed),
            other => Err(DhimError::Argument(format!("unknown mode '{other}'"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Stochastic => "stochastic",
            Mode::Relaxed => "relaxed",
        })
    }
}

/// Random stream for one document in one epoch. The stream depends only on
/// `(seed, doc_id, epoch)`, never on batch composition or order.
pub fn doc_rng(seed: u64, doc_id: u32, epoch: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(epoch) << 32) | u64::from(doc_id));
    rng
}

fn check_finite<F: Real>(logits: &[F]) -> Result<()> {
    match logits.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(DhimError::Numeric(format!("non-finite logit at position {j}"))),
        None => Ok(()),
    }
}

/// Draws each bit independently with probability `sigmoid(logit)`.
pub fn sample_binary<F: Real, R: Rng + ?Sized>(logits: &[F], rng: &mut R) -> Result<BinaryCode> {
    check_finite(logits)?;
    let mut code = BinaryCode::zeros(logits.len());
    for (j, &x) in logits.iter().enumerate() {
        let u: f64 = rng.random();
        code.set(j, u < sigmoid(x.as_f64()));
    }
    Ok(code)
}

/// Training-path binarization: writes 0/1 samples (stochastic) or sigmoid
/// values (relaxed) into `out`. Consumes one uniform per logit when stochastic.
pub(crate) fn binarize_into<F: Real, R: Rng + ?Sized>(
    logits: impl IntoIterator<Item = F>,
    mode: Mode,
    rng: &mut R,
    out: &mut [F],
) -> Result<()> {
    for (o, x) in out.iter_mut().zip(logits) {
        if !x.is_finite() {
            return Err(DhimError::Numeric("non-finite logit during training".into()));
        }
        let p = sigmoid(x.as_f64());
        *o = match mode {
            Mode::Relaxed => F::from_f64(p),
            Mode::Stochastic => {
                let u: f64 = rng.random();
                if u < p {
                    F::one()
                } else {
                    F::zero()
                }
            }
        };
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid_slope(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 - s)
}

/// Straight-through gradient with sigmoid slope: `upstream * s(x) * (1 - s(x))`.
pub fn st_backward<F: Real>(upstream: &[F], logits: &[F]) -> Result<Vec<F>> {
    if upstream.len() != logits.len() {
        return Err(DhimError::Shape(format!(
            "upstream has {} entries, logits {}",
            upstream.len(),
            logits.len()
        )));
    }
    Ok(upstream
        .iter()
        .zip(logits)
        .map(|(&g, &x)| F::from_f64(g.as_f64() * sigmoid_slope(x.as_f64())))
        .collect())
}

/// Inference code: bit `j` is set iff `logits[j] >= 0`.
pub fn deterministic_binarize<F: Real>(logits: &[F]) -> BinaryCode {
    let mut code = BinaryCode::zeros(logits.len());
    for (j, &x) in logits.iter().enumerate() {
        code.set(j, x >= F::zero());
    }
    code
}

/// Per-column median thresholding over a set of global logits (`N x L`):
/// bit `j` of code `i` is set iff `globals[i, j]` is strictly above the
/// median of column `j`. Even `N` uses the mean of the two middle values.
pub fn median_binarize<F: Real>(globals: ArrayView2<F>) -> Result<Vec<BinaryCode>> {
    let (n, bits) = globals.dim();
    if n == 0 {
        return Err(DhimError::Argument("median binarization needs at least one row".into()));
    }
    let mut codes = vec![BinaryCode::zeros(bits); n];
    let mut column = Vec::with_capacity(n);
    for j in 0..bits {
        column.clear();
        column.extend(globals.column(j).iter().map(|v| v.as_f64()));
        check_finite(&column)?;
        column.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            column[n / 2]
        } else {
            0.5 * (column[n / 2 - 1] + column[n / 2])
        };
        for (i, code) in codes.iter_mut().enumerate() {
            code.set(j, globals[[i, j]].as_f64() > median);
        }
    }
    Ok(codes)
}

/// Contents of a `DHCB` codes file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodesFile {
    pub bits: usize,
    pub entries: Vec<(u32, BinaryCode)>,
}

impl CodesFile {
    /// Layout: `"DHCB" | u32 version | u32 L | u32 N`, then per document
    /// `u32 id | ceil(L/64) x u64`.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let wpc = words_for(self.bits);
        let mut out = Vec::with_capacity(16 + self.entries.len() * (4 + 8 * wpc));
        out.extend_from_slice(CODES_MAGIC);
        put_u32(&mut out, CODES_VERSION);
        put_u32(&mut out, usize_to_u32(self.bits, "bits")?);
        put_u32(&mut out, usize_to_u32(self.entries.len(), "code count")?);
        for (id, code) in &self.entries {
            if code.len() != self.bits {
                return Err(DhimError::Shape(format!(
                    "code for {id} has {} bits, file has {}",
                    code.len(),
                    self.bits
                )));
            }
            put_u32(&mut out, *id);
            for &w in code.words() {
                put_u64(&mut out, w);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "codes file");
        r.magic(CODES_MAGIC)?;
        r.version(CODES_VERSION)?;
        let bits = r.u32()? as usize;
        if bits == 0 {
            return Err(DhimError::Format("codes file: zero code length".into()));
        }
        let n = r.u32()? as usize;
        let wpc = words_for(bits);
        if n.saturating_mul(4 + 8 * wpc) != r.remaining() {
            return Err(DhimError::Format(format!(
                "codes file: {n} codes of {bits} bits need {} bytes, found {}",
                n.saturating_mul(4 + 8 * wpc),
                r.remaining()
            )));
        }
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let id = r.u32()?;
            let words = (0..wpc).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            entries.push((id, BinaryCode::from_words(bits, words)?));
        }
        r.finish()?;
        Ok(Self { bits, entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn saturated_logits_sample_deterministically() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..1000 {
            let code = sample_binary(&[50.0f64, -50.0, 50.0, -50.0], &mut rng).unwrap();
            assert_eq!(code.bits(), vec![true, false, true, false]);
        }
    }

    #[test]
    fn zero_logits_are_fair_coins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 100_000;
        let mut ones = [0usize; 4];
        for _ in 0..draws {
            let code = sample_binary(&[0.0f64; 4], &mut rng).unwrap();
            for (j, c) in ones.iter_mut().enumerate() {
                *c += code.bit(j) as usize;
            }
        }
        for c in ones {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.5).abs() <= 0.01, "{freq}");
        }
    }

    #[test]
    fn sampling_frequencies_track_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = [logit(0.9), logit(0.1)];
        let draws = 100_000;
        let mut ones = [0usize; 2];
        for _ in 0..draws {
            let code = sample_binary(&logits, &mut rng).unwrap();
            ones[0] += code.bit(0) as usize;
            ones[1] += code.bit(1) as usize;
        }
        let f0 = ones[0] as f64 / draws as f64;
        let f1 = ones[1] as f64 / draws as f64;
        assert!((0.89..=0.91).contains(&f0), "{f0}");
        assert!((0.09..=0.11).contains(&f1), "{f1}");
    }

    #[test]
    fn non_finite_logit_is_numeric_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(sample_binary(&[0.0, f64::NAN], &mut rng), Err(DhimError::Numeric(_))));
        assert!(matches!(sample_binary(&[f64::INFINITY], &mut rng), Err(DhimError::Numeric(_))));
    }

    #[test]
    fn same_seed_same_samples() {
        let logits: Vec<f64> = (0..128).map(|j| (j as f64 - 64.0) / 20.0).collect();
        let a = sample_binary(&logits, &mut doc_rng(9, 17, 3)).unwrap();
        let b = sample_binary(&logits, &mut doc_rng(9, 17, 3)).unwrap();
        let c = sample_binary(&logits, &mut doc_rng(9, 17, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn st_backward_values() {
        let g = st_backward(&[1.0f64, -2.0, 4.0], &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(g, vec![0.25, -0.5, 1.0]);
        let g = st_backward(&[0.0f64, 0.0], &[3.0, -1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        let g = st_backward(&[1.0f64, 1.0], &[2.0, -2.0]).unwrap();
        let want = (-2.0f64).exp() / (1.0 + (-2.0f64).exp()).powi(2);
        assert!((want - 0.104994).abs() < 1e-6);
        for v in g {
            assert!((v - want).abs() < 1e-15);
            assert!((v - 0.1050).abs() < 1e-4);
        }
        assert!(matches!(st_backward(&[1.0f64], &[1.0, 2.0]), Err(DhimError::Shape(_))));
    }

    #[test]
    fn sign_threshold() {
        let code = deterministic_binarize(&[0.3f64, -0.3, 0.0, -0.0]);
        assert_eq!(code.bits(), vec![true, false, true, true]);
        let code = deterministic_binarize(&[-1.0f64; 70]);
        assert!(code.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn threshold_agrees_with_sampling_majority() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits: Vec<f64> = (0..40)
            .map(|_| {
                let m: f64 = rng.random_range(0.1..3.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let draws = 10_000;
        let mut ones = vec![0usize; logits.len()];
        for _ in 0..draws {
            let code = sample_binary(&logits, &mut rng).unwrap();
            for (j, c) in ones.iter_mut().enumerate() {
                *c += code.bit(j) as usize;
            }
        }
        let det = deterministic_binarize(&logits);
        for (j, &c) in ones.iter().enumerate() {
            assert_eq!(det.bit(j), 2 * c > draws, "bit {j} logit {}", logits[j]);
        }
    }

    #[test]
    fn median_odd_and_degenerate() {
        let g = Array2::from_shape_vec((3, 1), vec![1.0f64, 2.0, 3.0]).unwrap();
        let codes = median_binarize(g.view()).unwrap();
        let bits: Vec<bool> = codes.iter().map(|c| c.bit(0)).collect();
        assert_eq!(bits, vec![false, false, true]);

        let g = Array2::from_elem((5, 3), 0.7f64);
        let codes = median_binarize(g.view()).unwrap();
        assert!(codes.iter().all(|c| c.bits().iter().all(|&b| !b)));

        assert!(median_binarize(Array2::<f64>::zeros((0, 4)).view()).is_err());
    }

    #[test]
    fn median_splits_distinct_columns_in_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Array2::from_shape_simple_fn((100, 8), || rng.random_range(-5.0f64..5.0));
        let codes = median_binarize(g.view()).unwrap();
        for j in 0..8 {
            // sort-based oracle: the 50 largest values are exactly those above the median
            let mut col: Vec<(f64, usize)> = (0..100).map(|i| (g[[i, j]], i)).collect();
            col.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (rank, &(_, i)) in col.iter().enumerate() {
                assert_eq!(codes[i].bit(j), rank >= 50);
            }
        }
    }

    #[test]
    fn codes_file_size_and_round_trip() {
        let entries: Vec<_> = (0..10u32)
            .map(|i| (i, BinaryCode::from_words(16, vec![(u64::from(i) * 977) & 0xFFFF]).unwrap()))
            .collect();
        let file = CodesFile { bits: 16, entries };
        let bytes = file.encode().unwrap();
        assert_eq!(bytes.len(), 16 + 10 * (4 + 8));
        assert_eq!(CodesFile::decode(&bytes).unwrap(), file);
    }

    #[test]
    fn codes_file_rejects_corruption() {
        let file = CodesFile {
            bits: 16,
            entries: vec![(1, BinaryCode::zeros(16)), (2, BinaryCode::zeros(16))],
        };
        let bytes = file.encode().unwrap();
        for cut in 0..bytes.len() {
            assert!(CodesFile::decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(CodesFile::decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(CodesFile::decode(&bad).is_err());
        // set a pad bit of the first code
        let mut bad = bytes.clone();
        bad[16 + 4 + 3] = 0x01;
        assert!(CodesFile::decode(&bad).is_err());
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in prop::collection::vec(any::<bool>(), 1..=128)) {
            let code = BinaryCode::from_bits(&bits);
            prop_assert_eq!(code.bits(), bits.clone());
            let back = BinaryCode::from_words(bits.len(), code.words().to_vec()).unwrap();
            prop_assert_eq!(back, code);
        }

        #[test]
        fn sampling_probability_is_monotone(x in -30.0f64..30.0, dx in 0.0f64..10.0) {
            prop_assert!(sigmoid(x + dx) >= sigmoid(x));
        }
    }
}
