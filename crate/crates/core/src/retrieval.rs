//! Exact Hamming-space retrieval and the precision@k protocol.

use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::binarization::{words_for, BinaryCode, CodesFile};
use crate::error::{DhimError, Result};

/// Label assigned to documents whose class is unknown.
pub const UNLABELED: i32 = -1;

pub fn hamming(a: &BinaryCode, b: &BinaryCode) -> Result<u32> {
    if a.len() != b.len() {
        return Err(DhimError::Shape(format!("code lengths differ: {} vs {}", a.len(), b.len())));
    }
    Ok(hamming_words(a.words(), b.words()))
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Contiguous packed codes with parallel id and label arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeIndex {
    bits: usize,
    words_per_code: usize,
    codes: Vec<u64>,
    ids: Vec<u32>,
    labels: Vec<i32>,
}

impl CodeIndex {
    pub fn new(bits: usize, entries: &[(u32, BinaryCode)], labels: &HashMap<u32, i32>) -> Result<Self> {
        let wpc = words_for(bits);
        let mut codes = Vec::with_capacity(entries.len() * wpc);
        let mut ids = Vec::with_capacity(entries.len());
        let mut seen = HashSet::with_capacity(entries.len());
        for (id, code) in entries {
            if code.len() != bits {
                return Err(DhimError::Shape(format!(
                    "code for {id} has {} bits, index has {bits}",
                    code.len()
                )));
            }
            if !seen.insert(*id) {
                return Err(DhimError::Consistency(format!("duplicate id {id} in code index")));
            }
            codes.extend_from_slice(code.words());
            ids.push(*id);
        }
        let labels = ids.iter().map(|id| labels.get(id).copied().unwrap_or(UNLABELED)).collect();
        Ok(Self {
            bits,
            words_per_code: wpc,
            codes,
            ids,
            labels,
        })
    }

    pub fn from_codes_file(file: &CodesFile, labels: &HashMap<u32, i32>) -> Result<Self> {
        Self::new(file.bits, &file.entries, labels)
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        let w = self.words_per_code;
        BinaryCode::from_words(self.bits, self.codes[i * w..(i + 1) * w].to_vec()).unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetrievalResult {
    pub query_id: u32,
    /// `(doc id, distance)`, nearest first; equal distances by ascending id.
    pub neighbors: Vec<(u32, u32)>,
}

/// Exact `k` nearest neighbors by full scan with a bounded max-heap.
/// An index entry with the query's own id is skipped.
pub fn topk(query: &BinaryCode, query_id: u32, index: &CodeIndex, k: usize) -> Result<RetrievalResult> {
    if query.len() != index.bits {
        return Err(DhimError::Shape(format!(
            "query has {} bits, index has {}",
            query.len(),
            index.bits
        )));
    }
    if k == 0 || k > index.len() {
        return Err(DhimError::Argument(format!("k={k} must be in 1..={} for this index", index.len())));
    }
    let q = query.words();
    let wpc = index.words_per_code;
    let mut heap: BinaryHeap<(u32, u32)> = BinaryHeap::with_capacity(k + 1);
    for (chunk, &id) in index.codes.chunks_exact(wpc).zip(&index.ids) {
        if id == query_id {
            continue;
        }
        let d = hamming_words(q, chunk);
        if heap.len() < k {
            heap.push((d, id));
        } else if (d, id) < *heap.peek().unwrap() {
            heap.pop();
            heap.push((d, id));
        }
    }
    if heap.len() < k {
        return Err(DhimError::Argument(format!(
            "k={k} exceeds the {} candidates left after excluding query {query_id}",
            heap.len()
        )));
    }
    let mut neighbors: Vec<(u32, u32)> = heap.into_vec().into_iter().map(|(d, id)| (id, d)).collect();
    neighbors.sort_unstable_by_key(|&(id, d)| (d, id));
    Ok(RetrievalResult { query_id, neighbors })
}

fn label_of(labels: &HashMap<u32, i32>, id: u32) -> Result<i32> {
    match labels.get(&id) {
        Some(&l) if l != UNLABELED => Ok(l),
        _ => Err(DhimError::Evaluation(format!("document {id} has no label"))),
    }
}

/// Fraction of each query's top `k` sharing its label.
pub fn query_precision(result: &RetrievalResult, labels: &HashMap<u32, i32>, k: usize) -> Result<f64> {
    if result.neighbors.len() < k || k == 0 {
        return Err(DhimError::Evaluation(format!(
            "query {} has {} results, need {k}",
            result.query_id,
            result.neighbors.len()
        )));
    }
    let want = label_of(labels, result.query_id)?;
    let mut hits = 0usize;
    for &(id, _) in &result.neighbors[..k] {
        hits += usize::from(label_of(labels, id)? == want);
    }
    Ok(hits as f64 / k as f64)
}

/// Mean precision@k over queries.
pub fn precision_at_k(results: &[RetrievalResult], labels: &HashMap<u32, i32>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(DhimError::Evaluation("no queries".into()));
    }
    let mut sum = 0.0;
    for r in results {
        sum += query_precision(r, labels, k)?;
    }
    Ok(sum / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionReport {
    pub k: usize,
    pub bits: usize,
    pub num_queries: usize,
    pub pool_size: usize,
    pub precision: f64,
    /// label -> (mean precision, number of queries)
    pub per_class: BTreeMap<i32, (f64, usize)>,
    /// `(query id, label, precision)` in query order.
    pub per_query: Vec<(u32, i32, f64)>,
}

impl PrecisionReport {
    /// Machine-readable `key=value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "precision@{}={:.4}", self.k, self.precision).unwrap();
        writeln!(s, "bits={}", self.bits).unwrap();
        writeln!(s, "queries={}", self.num_queries).unwrap();
        writeln!(s, "pool={}", self.pool_size).unwrap();
        for (label, (p, n)) in &self.per_class {
            writeln!(s, "class.{label}.precision@{}={p:.4}", self.k).unwrap();
            writeln!(s, "class.{label}.queries={n}").unwrap();
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{} queries against {} codes ({} bits): mean precision@{} = {:.4}",
            self.num_queries, self.pool_size, self.bits, self.k, self.precision
        )
        .unwrap();
        writeln!(s, "{:>8} {:>8} {:>10}", "class", "queries", "precision").unwrap();
        for (label, (p, n)) in &self.per_class {
            writeln!(s, "{label:>8} {n:>8} {p:>10.4}").unwrap();
        }
        s
    }

    pub fn per_query_tsv(&self) -> String {
        let mut s = String::from("query_id\tlabel\tprecision\n");
        for (id, label, p) in &self.per_query {
            writeln!(s, "{id}\t{label}\t{p:.4}").unwrap();
        }
        s
    }
}

/// Runs every query against the pool and aggregates precision@k. Queries
/// are scored in parallel; results keep query order.
pub fn evaluate(
    queries: &[(u32, BinaryCode)],
    pool: &CodeIndex,
    labels: &HashMap<u32, i32>,
    k: usize,
) -> Result<PrecisionReport> {
    if queries.is_empty() {
        return Err(DhimError::Evaluation("no queries".into()));
    }
    let per_query: Vec<(u32, i32, f64)> = queries
        .par_iter()
        .map(|(id, code)| {
            let r = topk(code, *id, pool, k)?;
            Ok((*id, label_of(labels, *id)?, query_precision(&r, labels, k)?))
        })
        .collect::<Result<_>>()?;
    let mut per_class: BTreeMap<i32, (f64, usize)> = BTreeMap::new();
    for &(_, label, p) in &per_query {
        let e = per_class.entry(label).or_default();
        e.0 += p;
        e.1 += 1;
    }
    for v in per_class.values_mut() {
        v.0 /= v.1 as f64;
    }
    let precision = per_query.iter().map(|q| q.2).sum::<f64>() / per_query.len() as f64;
    Ok(PrecisionReport {
        k,
        bits: pool.bits,
        num_queries: per_query.len(),
        pool_size: pool.len(),
        precision,
        per_class,
        per_query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_code(bits: usize, rng: &mut impl Rng) -> BinaryCode {
        let b: Vec<bool> = (0..bits).map(|_| rng.random()).collect();
        BinaryCode::from_bits(&b)
    }

    fn bit_loop(a: &BinaryCode, b: &BinaryCode) -> u32 {
        a.bits().iter().zip(b.bits()).filter(|(x, y)| **x != *y).count() as u32
    }

    #[test]
    fn hamming_basics() {
        let a = BinaryCode::from_words(8, vec![0x0F]).unwrap();
        let b = BinaryCode::from_words(8, vec![0xF0]).unwrap();
        assert_eq!(hamming(&a, &b).unwrap(), 8);
        assert_eq!(hamming(&a, &a).unwrap(), 0);
        assert!(hamming(&a, &BinaryCode::zeros(9)).is_err());
    }

    #[test]
    fn hamming_matches_bit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let a = random_code(128, &mut rng);
            let b = random_code(128, &mut rng);
            assert_eq!(hamming(&a, &b).unwrap(), bit_loop(&a, &b));
        }
    }

    #[test]
    fn topk_orders_by_distance_then_id() {
        let q = BinaryCode::zeros(8);
        let entries = vec![
            (10, BinaryCode::from_words(8, vec![0b11111]).unwrap()),
            (11, BinaryCode::from_words(8, vec![0b1]).unwrap()),
            (12, BinaryCode::from_words(8, vec![0b111]).unwrap()),
        ];
        let idx = CodeIndex::new(8, &entries, &HashMap::new()).unwrap();
        let r = topk(&q, 99, &idx, 3).unwrap();
        assert_eq!(r.neighbors, vec![(11, 1), (12, 3), (10, 5)]);

        let entries = vec![
            (5, BinaryCode::from_words(8, vec![0b1]).unwrap()),
            (3, BinaryCode::from_words(8, vec![0b10]).unwrap()),
        ];
        let idx = CodeIndex::new(8, &entries, &HashMap::new()).unwrap();
        assert_eq!(topk(&q, 99, &idx, 2).unwrap().neighbors, vec![(3, 1), (5, 1)]);
    }

    #[test]
    fn self_exclusion_only_by_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_code(16, &mut rng);
        let entries = vec![(1, q.clone()), (2, random_code(16, &mut rng)), (3, q.clone())];
        let idx = CodeIndex::new(16, &entries, &HashMap::new()).unwrap();
        let r = topk(&q, 7, &idx, 1).unwrap();
        assert_eq!(r.neighbors[0], (1, 0));
        let r = topk(&q, 1, &idx, 2).unwrap();
        assert_eq!(r.neighbors[0], (3, 0));
        assert!(r.neighbors.iter().all(|&(id, _)| id != 1));
        assert!(matches!(topk(&q, 1, &idx, 3), Err(DhimError::Argument(_))));
        assert!(matches!(topk(&q, 9, &idx, 4), Err(DhimError::Argument(_))));
    }

    #[test]
    fn precision_values() {
        let labels: HashMap<u32, i32> = [(0, 1), (1, 1), (2, 1), (3, 2), (4, UNLABELED)].into_iter().collect();
        let r = RetrievalResult {
            query_id: 0,
            neighbors: vec![(1, 0), (2, 1)],
        };
        assert_eq!(precision_at_k(&[r.clone()], &labels, 2).unwrap(), 1.0);
        let r2 = RetrievalResult {
            query_id: 3,
            neighbors: vec![(1, 0), (3, 1)],
        };
        assert_eq!(precision_at_k(&[r, r2], &labels, 2).unwrap(), 0.75);
        let bad = RetrievalResult {
            query_id: 0,
            neighbors: vec![(4, 0)],
        };
        assert!(matches!(precision_at_k(&[bad], &labels, 1), Err(DhimError::Evaluation(_))));
        let missing = RetrievalResult {
            query_id: 0,
            neighbors: vec![(99, 0)],
        };
        assert!(matches!(precision_at_k(&[missing], &labels, 1), Err(DhimError::Evaluation(_))));
    }

    #[test]
    fn random_labels_give_chance_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let classes = 5;
        let n = 5000;
        let entries: Vec<_> = (0..n).map(|i| (i as u32, random_code(32, &mut rng))).collect();
        let labels: HashMap<u32, i32> = (0..n).map(|i| (i as u32, rng.random_range(0..classes))).collect();
        let idx = CodeIndex::new(32, &entries, &labels).unwrap();
        let report = evaluate(&entries[..500], &idx, &labels, 100).unwrap();
        assert!((report.precision - 1.0 / classes as f64).abs() <= 0.02, "{}", report.precision);
    }

    #[test]
    fn balanced_random_codes_are_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool: Vec<_> = (0..4000u32).map(|i| (i, random_code(16, &mut rng))).collect();
        let queries: Vec<_> = (4000..4800u32).map(|i| (i, random_code(16, &mut rng))).collect();
        let labels: HashMap<u32, i32> = (0..4800u32).map(|i| (i, (i % 4) as i32)).collect();
        let idx = CodeIndex::new(16, &pool, &labels).unwrap();
        let report = evaluate(&queries, &idx, &labels, 100).unwrap();
        assert!((report.precision - 0.25).abs() <= 0.02, "{}", report.precision);
        assert!(report.to_kv().starts_with("precision@100="));
        assert_eq!(report.per_class.len(), 4);
    }

    #[test]
    fn self_pool_nearest_neighbor_on_separable_set() {
        // two well-separated clusters of codes
        let mut entries = Vec::new();
        let mut labels = HashMap::new();
        for i in 0..20u32 {
            let base = if i < 10 { 0u64 } else { 0xFFFF };
            let word = base ^ (1u64 << (i % 4));
            entries.push((i, BinaryCode::from_words(16, vec![word]).unwrap()));
            labels.insert(i, (i >= 10) as i32);
        }
        let idx = CodeIndex::new(16, &entries, &labels).unwrap();
        let report = evaluate(&entries, &idx, &labels, 1).unwrap();
        assert_eq!(report.precision, 1.0);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let e = vec![(1, BinaryCode::zeros(8)), (1, BinaryCode::zeros(8))];
        assert!(CodeIndex::new(8, &e, &HashMap::new()).is_err());
    }

    proptest! {
        #[test]
        fn hamming_is_a_metric(seed in any::<u64>(), bits in 1usize..=128) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_code(bits, &mut rng);
            let b = random_code(bits, &mut rng);
            let c = random_code(bits, &mut rng);
            let ab = hamming(&a, &b).unwrap();
            prop_assert_eq!(ab, hamming(&b, &a).unwrap());
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(hamming(&a, &c).unwrap() <= ab + hamming(&b, &c).unwrap());
        }

        #[test]
        fn topk_matches_full_sort(seed in any::<u64>(), n in 1usize..400, bits in prop::sample::select(vec![16usize, 32, 64, 128])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<_> = (0..n as u32).map(|i| (i * 7 % 1009, random_code(bits, &mut rng))).collect();
            let idx = CodeIndex::new(bits, &entries, &HashMap::new()).unwrap();
            let k = rng.random_range(1..=n);
            let q = random_code(bits, &mut rng);
            let got = topk(&q, u32::MAX, &idx, k).unwrap();
            let mut all: Vec<(u32, u32)> = entries.iter().map(|(id, c)| (*id, bit_loop(&q, c))).collect();
            all.sort_by_key(|&(id, d)| (d, id));
            all.truncate(k);
            prop_assert_eq!(got.neighbors, all);
        }
    }
}
