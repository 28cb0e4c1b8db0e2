//! Corpus ingestion: token-embedding sequences, splits, labels and the
//! `DHEM` embedding file format.
//!
//! Layout of an embedding file (little-endian):
//!
//! ```text
//! "DHEM" | u32 version=1 | u32 d | u32 num_docs
//! per document: u32 id | i32 label | u32 T | d x f32 CLS | T x d x f32 tokens (row-major)
//! ```
//!
//! A manifest is a text file with the three lines `train=<path>`,
//! `val=<path>` and `test=<path>`; relative paths resolve against the
//! manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DhimError, Result};
use crate::wire::{put_f32s, put_i32, put_u32, usize_to_u32, ByteReader};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"DHEM";
pub const EMBEDDING_VERSION: u32 = 1;

/// Longest token sequence kept at ingestion; longer documents are truncated.
pub const MAX_TOKENS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Document {
    pub id: u32,
    /// Class id, used only for evaluation. `-1` when unknown.
    pub label: i32,
    pub len: usize,
}

/// One document as a `T x d` token matrix plus a `d`-dim CLS vector.
///
/// Carries no label: everything on the training path sees only this type.
#[derive(Debug, Clone, PartialEq)]
pub struct DocEmbedding {
    pub doc_id: u32,
    pub tokens: Array2<f32>,
    pub cls: Array1<f32>,
}

impl DocEmbedding {
    pub fn new(doc_id: u32, tokens: Array2<f32>, cls: Array1<f32>) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(DhimError::Argument(format!("document {doc_id} has no tokens")));
        }
        if tokens.ncols() != cls.len() {
            return Err(DhimError::Shape(format!(
                "document {doc_id}: token dim {} != cls dim {}",
                tokens.ncols(),
                cls.len()
            )));
        }
        if !tokens.iter().chain(cls.iter()).all(|v| v.is_finite()) {
            return Err(DhimError::Numeric(format!("document {doc_id} has non-finite entries")));
        }
        Ok(Self {
            doc_id,
            tokens: tokens.as_standard_layout().into_owned(),
            cls,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DhimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DhimError::Argument(format!("unknown split '{other}'"))),
        }
    }
}

/// Documents of one split, in file order.
pub type SplitDocs = Vec<(Document, DocEmbedding)>;

/// A validated corpus with disjoint train/val/test splits.
#[derive(Debug, Clone)]
pub struct Corpus {
    dim: usize,
    num_classes: usize,
    splits: [Vec<Document>; 3],
    embeddings: BTreeMap<u32, DocEmbedding>,
}

impl Corpus {
    pub fn from_splits(train: SplitDocs, val: SplitDocs, test: SplitDocs) -> Result<Self> {
        let mut dim = None;
        let mut splits: [Vec<Document>; 3] = Default::default();
        let mut embeddings = BTreeMap::new();
        let mut classes = HashSet::new();
        for (slot, docs) in [train, val, test].into_iter().enumerate() {
            for (doc, emb) in docs {
                if doc.id != emb.doc_id {
                    return Err(DhimError::Consistency(format!(
                        "document {} paired with embedding for {}",
                        doc.id, emb.doc_id
                    )));
                }
                if doc.len != emb.len() || doc.len == 0 {
                    return Err(DhimError::Consistency(format!(
                        "document {}: declared length {} but {} token rows",
                        doc.id,
                        doc.len,
                        emb.len()
                    )));
                }
                match dim {
                    None => dim = Some(emb.dim()),
                    Some(d) if d != emb.dim() => {
                        return Err(DhimError::Consistency(format!(
                            "document {} has dim {} but corpus dim is {d}",
                            doc.id,
                            emb.dim()
                        )))
                    }
                    _ => {}
                }
                if embeddings.insert(doc.id, emb).is_some() {
                    return Err(DhimError::Consistency(format!("duplicate document id {}", doc.id)));
                }
                if doc.label >= 0 {
                    classes.insert(doc.label);
                }
                splits[slot].push(doc);
            }
        }
        let dim = dim.ok_or_else(|| DhimError::Consistency("corpus has no documents".into()))?;
        Ok(Self {
            dim,
            num_classes: classes.len().max(1),
            splits,
            embeddings,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self, split: Split) -> &[Document] {
        &self.splits[split.index()]
    }

    pub fn embedding(&self, id: u32) -> Option<&DocEmbedding> {
        self.embeddings.get(&id)
    }

    /// Embeddings of a split, in split order.
    pub fn split_embeddings(&self, split: Split) -> Vec<&DocEmbedding> {
        self.split(split)
            .iter()
            .map(|d| &self.embeddings[&d.id])
            .collect()
    }

    /// Label of every document in the corpus, keyed by id.
    pub fn labels(&self) -> HashMap<u32, i32> {
        self.splits
            .iter()
            .flatten()
            .map(|d| (d.id, d.label))
            .collect()
    }

    fn split_docs(&self, split: Split) -> Vec<(Document, &DocEmbedding)> {
        self.split(split)
            .iter()
            .map(|d| (*d, &self.embeddings[&d.id]))
            .collect()
    }

    /// Writes `<stem>.<split>.dhem` files plus `<stem>.manifest` into `dir`
    /// and returns the manifest path.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for split in Split::ALL {
            let name = format!("{stem}.{split}.dhem");
            let bytes = encode_embedding_file(self.dim, &self.split_docs(split))?;
            fs::write(dir.join(&name), bytes)?;
            manifest.push_str(&format!("{split}={name}\n"));
        }
        let path = dir.join(format!("{stem}.manifest"));
        fs::write(&path, manifest)?;
        Ok(path)
    }
}

pub fn encode_embedding_file(dim: usize, docs: &[(Document, &DocEmbedding)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(EMBEDDING_MAGIC);
    put_u32(&mut out, EMBEDDING_VERSION);
    put_u32(&mut out, usize_to_u32(dim, "dim")?);
    put_u32(&mut out, usize_to_u32(docs.len(), "document count")?);
    for (doc, emb) in docs {
        if emb.dim() != dim {
            return Err(DhimError::Shape(format!(
                "document {} has dim {}, file dim is {dim}",
                doc.id,
                emb.dim()
            )));
        }
        put_u32(&mut out, doc.id);
        put_i32(&mut out, doc.label);
        put_u32(&mut out, usize_to_u32(emb.len(), "token count")?);
        put_f32s(&mut out, emb.cls.iter());
        put_f32s(&mut out, emb.tokens.iter());
    }
    Ok(out)
}

/// Parses a `DHEM` payload. Returns the declared dim and the documents;
/// sequences longer than [`MAX_TOKENS`] are truncated with a warning.
pub fn decode_embedding_file(bytes: &[u8]) -> Result<(usize, SplitDocs)> {
    let mut r = ByteReader::new(bytes, "embedding file");
    r.magic(EMBEDDING_MAGIC)?;
    r.version(EMBEDDING_VERSION)?;
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(DhimError::Format("embedding file: zero dimension".into()));
    }
    let num_docs = r.u32()? as usize;
    // Every document needs at least a header, a CLS vector and one token row.
    let min_doc_bytes = 12 + 8 * dim;
    if num_docs.saturating_mul(min_doc_bytes) > r.remaining() {
        return Err(DhimError::Format(format!(
            "embedding file: {num_docs} documents declared but only {} payload bytes",
            r.remaining()
        )));
    }
    let mut docs = Vec::with_capacity(num_docs);
    let mut truncated = 0usize;
    for _ in 0..num_docs {
        let id = r.u32()?;
        let label = r.i32()?;
        let len = r.u32()? as usize;
        if len == 0 {
            return Err(DhimError::Format(format!("document {id}: zero length")));
        }
        let cls = Array1::from(r.f32s(dim)?);
        let flat = r.f32s(len.checked_mul(dim).ok_or_else(|| {
            DhimError::Format(format!("document {id}: length overflow"))
        })?)?;
        let mut tokens = Array2::from_shape_vec((len, dim), flat)
            .map_err(|e| DhimError::Format(e.to_string()))?;
        if len > MAX_TOKENS {
            truncated += 1;
            tokens = tokens.slice(ndarray::s![..MAX_TOKENS, ..]).to_owned();
        }
        let emb = DocEmbedding::new(id, tokens, cls)?;
        docs.push((
            Document {
                id,
                label,
                len: emb.len(),
            },
            emb,
        ));
    }
    r.finish()?;
    if truncated > 0 {
        warn!("truncated {truncated} documents to {MAX_TOKENS} tokens");
    }
    Ok((dim, docs))
}

pub fn read_embedding_file(path: &Path) -> Result<(usize, SplitDocs)> {
    decode_embedding_file(&fs::read(path)?)
}

/// Parses manifest text into the train/val/test paths.
pub fn parse_manifest(text: &str, base: &Path) -> Result<[PathBuf; 3]> {
    let mut paths: [Option<PathBuf>; 3] = Default::default();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| DhimError::Manifest(format!("malformed line '{line}'")))?;
        let split: Split = key
            .trim()
            .parse()
            .map_err(|_| DhimError::Manifest(format!("unknown split key '{}'", key.trim())))?;
        let slot = &mut paths[split.index()];
        if slot.is_some() {
            return Err(DhimError::Manifest(format!("split '{split}' listed twice")));
        }
        let p = PathBuf::from(value.trim());
        *slot = Some(if p.is_absolute() { p } else { base.join(p) });
    }
    let [train, val, test] = paths;
    let missing = |s: Split| DhimError::Manifest(format!("missing '{s}' entry"));
    Ok([
        train.ok_or_else(|| missing(Split::Train))?,
        val.ok_or_else(|| missing(Split::Val))?,
        test.ok_or_else(|| missing(Split::Test))?,
    ])
}

pub fn load_corpus(manifest: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(manifest)
        .map_err(|e| DhimError::Manifest(format!("{}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let [train, val, test] = parse_manifest(&text, base)?;
    let mut dims = Vec::new();
    let mut load = |p: &Path| -> Result<SplitDocs> {
        let (d, docs) = read_embedding_file(p)?;
        dims.push(d);
        Ok(docs)
    };
    let (train, val, test) = (load(&train)?, load(&val)?, load(&test)?);
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(DhimError::Consistency(format!("split files disagree on dim: {dims:?}")));
    }
    Corpus::from_splits(train, val, test)
}

/// Random word-embedding table for the "no pretrained features" setting.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub vocab_size: usize,
    pub dim: usize,
    pub seed: u64,
    pub rows: Array2<f32>,
}

/// Entries drawn i.i.d. from N(0, 1/d) with a ChaCha stream keyed by `seed`.
pub fn build_random_embedding_table(vocab_size: usize, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if vocab_size == 0 || dim == 0 {
        return Err(DhimError::Argument(format!(
            "embedding table needs positive vocab_size and dim, got ({vocab_size}, {dim})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0 / (dim as f64).sqrt()).unwrap();
    let rows = Array2::from_shape_simple_fn((vocab_size, dim), || normal.sample(&mut rng) as f32);
    Ok(EmbeddingTable {
        vocab_size,
        dim,
        seed,
        rows,
    })
}

/// Looks up each token row; the CLS surrogate is the mean of the rows.
pub fn embed_tokens(table: &EmbeddingTable, doc_id: u32, token_ids: &[usize]) -> Result<DocEmbedding> {
    if token_ids.is_empty() {
        return Err(DhimError::Argument(format!("document {doc_id}: empty token sequence")));
    }
    if let Some(&bad) = token_ids.iter().find(|&&t| t >= table.vocab_size) {
        return Err(DhimError::Index(format!(
            "token id {bad} out of range for vocabulary of {}",
            table.vocab_size
        )));
    }
    let ids = &token_ids[..token_ids.len().min(MAX_TOKENS)];
    let tokens = table.rows.select(ndarray::Axis(0), ids);
    let cls = mean_rows(&tokens);
    DocEmbedding::new(doc_id, tokens, cls)
}

/// Column means with f64 accumulation.
pub fn mean_rows(m: &Array2<f32>) -> Array1<f32> {
    let n = m.nrows() as f64;
    let mut acc = vec![0.0f64; m.ncols()];
    for row in m.rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|a| (a / n) as f32).collect()
}

/// One line of a token-id corpus: `id<TAB>label<TAB>split<TAB>tok tok tok ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub id: u32,
    pub label: i32,
    pub split: Split,
    pub tokens: Vec<usize>,
}

pub fn parse_token_rows(text: &str) -> Result<Vec<TokenRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |what: &str| DhimError::Format(format!("token corpus line {}: {what}", lineno + 1));
        let mut fields = line.split('\t');
        let mut next = |name: &str| fields.next().ok_or_else(|| bad(&format!("missing {name}")));
        let id = next("id")?.trim().parse().map_err(|_| bad("bad id"))?;
        let label = next("label")?.trim().parse().map_err(|_| bad("bad label"))?;
        let split = next("split")?.trim().parse().map_err(|_| bad("bad split"))?;
        let tokens = next("tokens")?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad token id")))
            .collect::<Result<Vec<usize>>>()?;
        rows.push(TokenRow {
            id,
            label,
            split,
            tokens,
        });
    }
    Ok(rows)
}

/// Embeds token-id rows with a random table and assembles a corpus.
pub fn corpus_from_token_rows(table: &EmbeddingTable, rows: &[TokenRow]) -> Result<Corpus> {
    let mut splits: [SplitDocs; 3] = Default::default();
    for row in rows {
        let emb = embed_tokens(table, row.id, &row.tokens)?;
        let doc = Document {
            id: row.id,
            label: row.label,
            len: emb.len(),
        };
        splits[row.split.index()].push((doc, emb));
    }
    let [train, val, test] = splits;
    Corpus::from_splits(train, val, test)
}
