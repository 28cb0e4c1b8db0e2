use dhim::objective::{total_loss, Model, Noise};
use dhim::synth::{cluster_corpus, ClusterCorpusSpec};
use dhim::trainer::{encode_split, train, train_with_history};
use dhim::{Corpus, DhimError, DocEmbedding, Mode, Split, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_corpus(seed: u64) -> Corpus {
    cluster_corpus(&ClusterCorpusSpec {
        clusters: 4,
        dim: 8,
        doc_len: 6,
        noise: 1.0,
        train: 48,
        val: 16,
        test: 16,
        seed,
    })
    .unwrap()
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        bits: 8,
        filters: 6,
        hidden: 12,
        learning_rate: 1e-3,
        batch_size: 16,
        max_epochs: 1,
        seed,
        ..TrainConfig::default()
    }
}

fn train_loss(model: &Model<f32>, corpus: &Corpus, beta: f64) -> f64 {
    let docs: Vec<&DocEmbedding> = corpus.split_embeddings(Split::Train);
    total_loss(model, &docs, beta, Noise::relaxed()).unwrap().loss
}

#[test]
fn one_relaxed_epoch_lowers_training_loss() {
    let mut lowered = 0;
    for seed in 0..10 {
        let corpus = tiny_corpus(seed);
        let cfg = TrainConfig {
            mode: Mode::Relaxed,
            ..tiny_config(seed)
        };
        let start = Model::<f32>::init(&cfg.encoder_shape(corpus.dim()), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let after = train(&corpus, &cfg).unwrap().model;
        if train_loss(&after, &corpus, cfg.beta) < train_loss(&start, &corpus, cfg.beta) {
            lowered += 1;
        }
    }
    assert!(lowered >= 9, "loss fell in only {lowered}/10 seeds");
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let corpus = tiny_corpus(1);
    let cfg = TrainConfig {
        max_epochs: 40,
        patience: 0,
        ..tiny_config(1)
    };
    let out = train_with_history(&corpus, &cfg).unwrap();
    let h = &out.history;
    let mut best = h[0].val_precision;
    for (i, e) in h.iter().enumerate().skip(1) {
        if e.val_precision <= best {
            assert_eq!(i, h.len() - 1, "training continued past epoch {i}");
        }
        best = best.max(e.val_precision);
    }
    let top = h.iter().map(|e| e.val_precision).fold(f64::MIN, f64::max);
    assert_eq!(out.checkpoint.val_precision, top);
}

#[test]
fn max_epochs_bounds_history() {
    let corpus = tiny_corpus(2);
    let cfg = TrainConfig {
        max_epochs: 3,
        patience: 100,
        ..tiny_config(2)
    };
    assert_eq!(train_with_history(&corpus, &cfg).unwrap().history.len(), 3);
}

#[test]
fn same_seed_gives_identical_checkpoint_and_codes() {
    let corpus = tiny_corpus(3);
    let cfg = TrainConfig {
        max_epochs: 3,
        ..tiny_config(3)
    };
    let a = train(&corpus, &cfg).unwrap();
    let b = train(&corpus, &cfg).unwrap();
    assert_eq!(a.encode().unwrap(), b.encode().unwrap());
    let ca = encode_split(&a, &corpus, Split::Test, None).unwrap().encode().unwrap();
    let cb = encode_split(&b, &corpus, Split::Test, None).unwrap().encode().unwrap();
    assert_eq!(ca, cb);
    let other = train(&corpus, &TrainConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.encode().unwrap(), other.encode().unwrap());
}

#[test]
fn codes_file_has_expected_size_and_order() {
    let corpus = tiny_corpus(4);
    let ckpt = train(&corpus, &tiny_config(4)).unwrap();
    let codes = encode_split(&ckpt, &corpus, Split::Test, None).unwrap();
    let bytes = codes.encode().unwrap();
    // header 16 bytes, then per code a u32 id and one u64 word for 8 bits
    assert_eq!(bytes.len(), 16 + 16 * 12);
    assert!(codes.entries.windows(2).all(|w| w[0].0 < w[1].0));
    assert_eq!(encode_split(&ckpt, &corpus, Split::Test, None).unwrap().encode().unwrap(), bytes);
}

#[test]
fn checkpoint_roundtrips_and_rejects_other_dims() {
    let corpus = tiny_corpus(5);
    let ckpt = train(&corpus, &tiny_config(5)).unwrap();
    let bytes = ckpt.encode().unwrap();
    let back = dhim::ModelCheckpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(back.config, ckpt.config);
    let wider = cluster_corpus(&ClusterCorpusSpec {
        dim: 10,
        train: 8,
        val: 4,
        test: 4,
        ..ClusterCorpusSpec::default()
    })
    .unwrap();
    assert!(matches!(encode_split(&back, &wider, Split::Test, None), Err(DhimError::Config(_))));
}

#[test]
fn training_rejects_degenerate_inputs() {
    let corpus = tiny_corpus(6);
    let bad = TrainConfig {
        bits: 0,
        ..tiny_config(6)
    };
    assert!(train(&corpus, &bad).is_err());
    let no_val = cluster_corpus(&ClusterCorpusSpec {
        train: 8,
        val: 0,
        test: 2,
        ..ClusterCorpusSpec::default()
    })
    .unwrap();
    assert!(matches!(train(&no_val, &tiny_config(6)), Err(DhimError::Argument(_))));
}
