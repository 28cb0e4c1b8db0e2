//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure. Training flags override values from `--config`, which override
//! the built-in defaults. Log level comes from `DHIM_LOG`.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::binarization::{CodesFile, Mode, CODES_MAGIC};
use crate::error::{DhimError, Result};
use crate::retrieval::{evaluate, CodeIndex, PrecisionReport};
use crate::store::{
    build_random_embedding_table, corpus_from_token_rows, decode_embedding_file, load_corpus, parse_token_rows, Split,
    EMBEDDING_MAGIC,
};
use crate::synth::{cluster_corpus, ClusterCorpusSpec};
use crate::trainer::{
    encode_split, evaluate_checkpoint, parse_kv, parse_windows, train, CodeRule, ModelCheckpoint, TrainConfig,
    CHECKPOINT_MAGIC, EVAL_K,
};

#[derive(Debug, Parser)]
#[command(name = "dhim", version, about = "Binary document hashing by global/local mutual-information maximization")]
struct Cli {
    /// Cap on worker threads used by evaluation.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a corpus from random features: token ids embedded with a random
    /// table (--tokens), or a labeled Gaussian-cluster corpus.
    IngestRandom(IngestArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainCmd),
    /// Write codes for one corpus split.
    Encode(EncodeArgs),
    /// Precision@k of query codes against a pool of codes.
    Eval(EvalArgs),
    /// Check that files written by this tool are well formed.
    Validate(ValidateArgs),
    /// Train across the beta or batch-size grid and report test precision.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct IngestArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value = "corpus")]
    stem: String,
    /// TSV rows `id<TAB>label<TAB>split<TAB>space-separated token ids`.
    #[arg(long)]
    tokens: Option<PathBuf>,
    #[arg(long, default_value_t = 30000)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long = "len", default_value_t = 32)]
    doc_len: usize,
    #[arg(long, default_value_t = 0.5)]
    noise: f64,
    #[arg(long, default_value_t = 1600)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    val: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Stochastic,
    Relaxed,
}

#[derive(Debug, Default, Args)]
struct TrainFlags {
    /// key=value config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    filters: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    /// Comma-separated odd window sizes, e.g. 1,3,5.
    #[arg(long)]
    windows: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Drop the CLS regularizer.
    #[arg(long)]
    no_reg: bool,
    /// Emit codes by per-bit median thresholding instead of sign.
    #[arg(long)]
    median_binarize: bool,
}

impl TrainFlags {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| DhimError::Config(format!("{}: {e}", path.display())))?;
            cfg.apply_kv(&parse_kv(&text)?)?;
        }
        let mut flags = BTreeMap::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                flags.insert(k.to_string(), v);
            }
        };
        put("bits", self.bits.map(|v| v.to_string()));
        put("filters", self.filters.map(|v| v.to_string()));
        put("hidden", self.hidden.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| format!("{v:?}")));
        put("beta", self.beta.map(|v| format!("{v:?}")));
        put("batch_size", self.batch_size.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("patience", self.patience.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        cfg.apply_kv(&flags).map_err(|e| DhimError::Argument(e.to_string()))?;
        if let Some(w) = &self.windows {
            cfg.windows = parse_windows(w).map_err(|e| DhimError::Argument(e.to_string()))?;
        }
        if let Some(m) = self.mode {
            cfg.mode = match m {
                ModeArg::Stochastic => Mode::Stochastic,
                ModeArg::Relaxed => Mode::Relaxed,
            };
        }
        if self.no_reg {
            cfg.regularizer = false;
        }
        if self.median_binarize {
            cfg.code_rule = CodeRule::Median;
        }
        cfg.validate().map_err(|e| DhimError::Argument(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct TrainCmd {
    #[arg(long)]
    manifest: PathBuf,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Output codes path; labels go to `<codes>.labels`.
    #[arg(long)]
    codes: PathBuf,
    #[arg(long)]
    median_binarize: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    pool: PathBuf,
    #[arg(long, default_value_t = EVAL_K)]
    k: usize,
    /// `id<TAB>label` file; defaults to the `.labels` files next to the codes.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Take labels from a corpus instead.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Write the key=value report here as well.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Write per-query precision as TSV.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Embedding, checkpoint or codes files.
    files: Vec<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    Beta,
    BatchSize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum)]
    param: SweepParam,
    #[command(flatten)]
    flags: TrainFlags,
}

pub const BETA_GRID: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
pub const BATCH_GRID: [usize; 6] = [8, 16, 32, 64, 128, 256];

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code. Output goes to stdout.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    run_with_output(argv, &mut std::io::stdout())
}

pub fn run_with_output<I, T>(argv: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("DHIM_LOG", "error")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        builder = builder.num_threads(n.max(1));
    }
    let result = match builder.build() {
        Ok(pool) => pool.install(|| dispatch(cli.command, out)),
        Err(e) => Err(DhimError::Argument(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut (dyn Write + Send)) -> Result<()> {
    match cmd {
        Command::IngestRandom(a) => ingest_random(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Encode(a) => encode_cmd(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Validate(a) => validate_cmd(a, out),
        Command::Sweep(a) => sweep_cmd(a, out),
    }
}

fn ingest_random(a: IngestArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let corpus = match &a.tokens {
        Some(path) => {
            let rows = parse_token_rows(&fs::read_to_string(path)?)?;
            let table = build_random_embedding_table(a.vocab, a.dim, a.seed)?;
            corpus_from_token_rows(&table, &rows)?
        }
        None => cluster_corpus(&ClusterCorpusSpec {
            clusters: a.clusters,
            dim: a.dim,
            doc_len: a.doc_len,
            noise: a.noise,
            train: a.train,
            val: a.val,
            test: a.test,
            seed: a.seed,
        })?,
    };
    let manifest = corpus.write(&a.out_dir, &a.stem)?;
    writeln!(out, "manifest={}", manifest.display())?;
    for split in Split::ALL {
        writeln!(out, "{split}={}", corpus.split(split).len())?;
    }
    writeln!(out, "dim={}", corpus.dim())?;
    writeln!(out, "classes={}", corpus.num_classes())?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    ModelCheckpoint::decode(&fs::read(path)?)
}

fn train_cmd(a: TrainCmd, out: &mut (dyn Write + Send)) -> Result<()> {
    let cfg = a.flags.resolve()?;
    let corpus = load_corpus(&a.manifest)?;
    let ckpt = train(&corpus, &cfg)?;
    fs::write(&a.checkpoint, ckpt.encode()?)?;
    writeln!(out, "checkpoint={}", a.checkpoint.display())?;
    writeln!(out, "epoch={}", ckpt.epoch)?;
    writeln!(out, "val_precision@{}={:.4}", EVAL_K, ckpt.val_precision)?;
    Ok(())
}

fn labels_sidecar(codes: &Path) -> PathBuf {
    let mut s = codes.as_os_str().to_owned();
    s.push(".labels");
    PathBuf::from(s)
}

fn encode_cmd(a: EncodeArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let split: Split = a.split.parse()?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let corpus = load_corpus(&a.manifest)?;
    let rule = a.median_binarize.then_some(CodeRule::Median);
    let codes = encode_split(&ckpt, &corpus, split, rule)?;
    fs::write(&a.codes, codes.encode()?)?;
    let labels = corpus.labels();
    let mut text = String::new();
    for (id, _) in &codes.entries {
        text.push_str(&format!("{id}\t{}\n", labels[id]));
    }
    fs::write(labels_sidecar(&a.codes), text)?;
    writeln!(out, "codes={}", a.codes.display())?;
    writeln!(out, "count={}", codes.entries.len())?;
    writeln!(out, "bits={}", codes.bits)?;
    Ok(())
}

fn read_labels(path: &Path, into: &mut HashMap<u32, i32>) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| DhimError::Evaluation(format!("{}: {e}", path.display())))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| DhimError::Format(format!("labels line '{line}'")))?;
        let id = id.trim().parse().map_err(|_| DhimError::Format(format!("labels line '{line}'")))?;
        let label = label.trim().parse().map_err(|_| DhimError::Format(format!("labels line '{line}'")))?;
        into.insert(id, label);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let query = CodesFile::decode(&fs::read(&a.query)?)?;
    let pool = CodesFile::decode(&fs::read(&a.pool)?)?;
    if query.bits != pool.bits {
        return Err(DhimError::Shape(format!(
            "query codes have {} bits, pool codes {}",
            query.bits, pool.bits
        )));
    }
    let mut labels = HashMap::new();
    match (&a.labels, &a.manifest) {
        (Some(path), _) => read_labels(path, &mut labels)?,
        (None, Some(m)) => labels = load_corpus(m)?.labels(),
        (None, None) => {
            read_labels(&labels_sidecar(&a.pool), &mut labels)?;
            read_labels(&labels_sidecar(&a.query), &mut labels)?;
        }
    }
    let index = CodeIndex::from_codes_file(&pool, &labels)?;
    let report = evaluate(&query.entries, &index, &labels, a.k)?;
    emit_report(&report, a.report.as_deref(), a.per_query.as_deref(), out)
}

fn emit_report(report: &PrecisionReport, kv: Option<&Path>, per_query: Option<&Path>, out: &mut (dyn Write + Send)) -> Result<()> {
    out.write_all(report.to_kv().as_bytes())?;
    log::info!("\n{}", report.to_text());
    if let Some(p) = kv {
        fs::write(p, report.to_kv())?;
    }
    if let Some(p) = per_query {
        fs::write(p, report.per_query_tsv())?;
    }
    Ok(())
}

/// Checks one file by its magic bytes and returns a short description.
pub fn validate_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let magic = bytes.get(..4).unwrap_or(&[]);
    if magic == EMBEDDING_MAGIC {
        let (dim, docs) = decode_embedding_file(&bytes)?;
        let mut seen = std::collections::HashSet::new();
        if let Some((d, _)) = docs.iter().find(|(d, _)| !seen.insert(d.id)) {
            return Err(DhimError::Consistency(format!("duplicate document id {}", d.id)));
        }
        Ok(format!("embeddings dim={dim} docs={}", docs.len()))
    } else if magic == CODES_MAGIC {
        let codes = CodesFile::decode(&bytes)?;
        Ok(format!("codes bits={} count={}", codes.bits, codes.entries.len()))
    } else if magic == CHECKPOINT_MAGIC {
        let ckpt = ModelCheckpoint::decode(&bytes)?;
        let s = ckpt.model.shape();
        Ok(format!("checkpoint bits={} dim={} epoch={}", s.bits, s.dim, ckpt.epoch))
    } else {
        Err(DhimError::Format(format!("{}: unrecognized file type", path.display())))
    }
}

fn validate_cmd(a: ValidateArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    if a.files.is_empty() && a.manifest.is_none() {
        return Err(DhimError::Argument("nothing to validate".into()));
    }
    if let Some(m) = &a.manifest {
        let c = load_corpus(m)?;
        writeln!(
            out,
            "ok {} manifest train={} val={} test={} dim={}",
            m.display(),
            c.split(Split::Train).len(),
            c.split(Split::Val).len(),
            c.split(Split::Test).len(),
            c.dim()
        )?;
    }
    for f in &a.files {
        let desc = validate_file(f).map_err(|e| match e {
            DhimError::Io(io) => DhimError::Format(format!("{}: {io}", f.display())),
            other => other,
        })?;
        writeln!(out, "ok {} {desc}", f.display())?;
    }
    Ok(())
}

fn sweep_cmd(a: SweepArgs, out: &mut (dyn Write + Send)) -> Result<()> {
    let base = a.flags.resolve()?;
    let corpus = load_corpus(&a.manifest)?;
    let run = |cfg: &TrainConfig| -> Result<f64> {
        let ckpt = train(&corpus, cfg)?;
        Ok(evaluate_checkpoint(&ckpt, &corpus, Split::Test, None)?.precision)
    };
    match a.param {
        SweepParam::Beta => {
            let reference = run(&TrainConfig {
                beta: 0.0,
                ..base.clone()
            })?;
            writeln!(out, "# beta=0 precision@{EVAL_K}={reference:.4}")?;
            writeln!(out, "beta\tprecision@{EVAL_K}")?;
            for beta in BETA_GRID {
                let p = run(&TrainConfig {
                    beta,
                    regularizer: true,
                    ..base.clone()
                })?;
                writeln!(out, "{beta}\t{p:.4}")?;
            }
        }
        SweepParam::BatchSize => {
            writeln!(out, "batch_size\tprecision@{EVAL_K}")?;
            for batch_size in BATCH_GRID {
                let p = run(&TrainConfig {
                    batch_size,
                    ..base.clone()
                })?;
                writeln!(out, "{batch_size}\t{p:.4}")?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("exp.cfg");
        fs::write(&cfg_path, "bits=64\nbeta=0.2\n# comment\nseed=5\n").unwrap();
        let flags = TrainFlags {
            config: Some(cfg_path),
            beta: Some(0.9),
            no_reg: true,
            ..Default::default()
        };
        let cfg = flags.resolve().unwrap();
        assert_eq!(cfg.bits, 64);
        assert_eq!(cfg.beta, 0.9);
        assert_eq!(cfg.seed, 5);
        assert!(!cfg.regularizer);
    }

    #[test]
    fn usage_errors_exit_1() {
        let mut sink = Vec::new();
        assert_eq!(run_with_output(["dhim", "train", "--bogus"], &mut sink), 1);
        assert_eq!(run_with_output(["dhim", "frobnicate"], &mut sink), 1);
        assert_eq!(run_with_output(["dhim", "validate"], &mut sink), 1);
    }
}
