//! Retrieval metrics and the once / daily / realtime evaluation protocols.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{is_positive, Corpus, UserTimeline, SECONDS_PER_DAY};
use crate::encoding::{encode_actions, EncodedSequence};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{self, tag};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// One embedding at the evaluation start predicts the whole horizon.
    Once,
    /// Each day's positives are predicted from the embedding computed one
    /// day before that day starts.
    Daily,
    /// Each positive is predicted from the actions right before it.
    Realtime,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Once, Protocol::Daily, Protocol::Realtime];

    pub fn name(self) -> &'static str {
        match self {
            Protocol::Once => "once",
            Protocol::Daily => "daily",
            Protocol::Realtime => "realtime",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        Protocol::ALL.into_iter().find(|p| p.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub index_size: usize,
    pub recall_ks: Vec<usize>,
    pub coverage_k: usize,
    pub entropy_k: usize,
    pub horizon_days: u32,
    pub protocols: Vec<Protocol>,
    pub seed: u64,
    /// Sequences per forward batch.
    pub batch_size: usize,
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            index_size: 10_000,
            recall_ks: vec![10, 50, 100],
            coverage_k: 10,
            entropy_k: 50,
            horizon_days: 14,
            protocols: vec![Protocol::Once],
            seed: 0,
            batch_size: 64,
            threads: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.index_size == 0 || self.coverage_k == 0 || self.entropy_k == 0 || self.batch_size == 0 {
            return Err(Error::config("index_size, k values and batch_size must be positive"));
        }
        if self.recall_ks.is_empty() || self.recall_ks.contains(&0) {
            return Err(Error::config("recall_ks must be non-empty and positive"));
        }
        if self.horizon_days == 0 {
            return Err(Error::config("horizon_days must be positive"));
        }
        if self.threads == 0 {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of index rows at distance `<= d(user, positive)`.
fn closer_or_equal(user: &[f64], positive: &[f64], index: &Matrix) -> usize {
    let dp = sq_dist(user, positive);
    (0..index.rows()).filter(|&r| sq_dist(user, index.row(r)) <= dp).count()
}

/// Fraction of `positives` that fewer than `k` index pins beat or tie.
/// Returns `None` for an empty positive set.
pub fn recall_at_k(user: &[f64], positives: &[&[f64]], index: &Matrix, k: usize) -> Option<f64> {
    if positives.is_empty() {
        return None;
    }
    let hits = positives
        .iter()
        .filter(|p| closer_or_equal(user, p, index) < k)
        .count();
    Some(hits as f64 / positives.len() as f64)
}

/// Smallest share of the index accounting for 90% of all retrievals.
pub fn p90_coverage_at_k(retrieved: &[Vec<u64>], index_size: usize) -> f64 {
    let mut freq: HashMap<u64, usize> = HashMap::new();
    let mut total = 0usize;
    for list in retrieved {
        for id in list {
            *freq.entry(*id).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 || index_size == 0 {
        return 0.0;
    }
    let mut counts: Vec<(usize, u64)> = freq.into_iter().map(|(id, c)| (c, id)).collect();
    counts.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    // integer form of cumulative >= 0.9 * total
    let mut cum = 0usize;
    for (i, (c, _)) in counts.iter().enumerate() {
        cum += c;
        if 10 * cum >= 9 * total {
            return (i + 1) as f64 / index_size as f64;
        }
    }
    counts.len() as f64 / index_size as f64
}

/// Shannon entropy (natural log) of the label distribution.
pub fn interest_entropy(labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_default() += 1;
    }
    let n = labels.len() as f64;
    counts
        .values()
        .map(|c| {
            let p = *c as f64 / n;
            -p * p.ln()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Exact top-`k` of `ids`/`embeddings` by Euclidean distance to `query`,
/// ascending, ties by id. Returns `(id, distance)`.
pub fn exact_search(ids: &[u64], embeddings: &Matrix, query: &[f64], k: usize) -> Vec<(u64, f64)> {
    let mut all: Vec<(f64, u64)> = (0..embeddings.rows())
        .map(|r| (sq_dist(query, embeddings.row(r)), ids[r]))
        .collect();
    let k = k.min(all.len());
    let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() && k > 0 {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all.into_iter().take(k).map(|(d, id)| (id, d.sqrt())).collect()
}

/// Pin tower outputs for every corpus pin, in id order.
pub fn embed_corpus(model: &Model, corpus: &Corpus) -> Result<Matrix> {
    let d = corpus.d_pin();
    let out_dim = model.config().transformer.output_dim;
    let mut out = Matrix::zeros(corpus.len(), out_dim);
    for start in (0..corpus.len()).step_by(1024) {
        let end = (start + 1024).min(corpus.len());
        let mut x = Matrix::zeros(end - start, d);
        for (r, pin) in corpus.pins[start..end].iter().enumerate() {
            for (dst, src) in x.row_mut(r).iter_mut().zip(&pin.embedding) {
                *dst = *src as f64;
            }
        }
        let e = model.pin_forward(&x)?;
        for r in 0..e.rows() {
            out.row_mut(start + r).copy_from_slice(e.row(r));
        }
    }
    Ok(out)
}

/// Random sample of pins with their tower embeddings and interest labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalIndex {
    pub pin_ids: Vec<u64>,
    pub embeddings: Matrix,
    pub interests: Vec<u32>,
}

impl EvalIndex {
    /// Samples `size` pins without replacement (all pins if the corpus is
    /// smaller). `pin_embeddings` holds one row per corpus pin.
    pub fn sample(corpus: &Corpus, pin_embeddings: &Matrix, size: usize, seed: u64) -> EvalIndex {
        let n = corpus.len();
        let mut ids: Vec<u64> = if size >= n {
            (0..n as u64).collect()
        } else {
            sample(&mut rng::stream(seed, &[tag::INDEX]), n, size)
                .into_iter()
                .map(|i| i as u64)
                .collect()
        };
        ids.sort_unstable();
        let mut embeddings = Matrix::zeros(ids.len(), pin_embeddings.cols());
        for (r, id) in ids.iter().enumerate() {
            embeddings.row_mut(r).copy_from_slice(pin_embeddings.row(*id as usize));
        }
        let interests = ids.iter().map(|id| corpus.pins[*id as usize].interest_id).collect();
        EvalIndex {
            pin_ids: ids,
            embeddings,
            interests,
        }
    }

    pub fn len(&self) -> usize {
        self.pin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pin_ids.is_empty()
    }
}

/// One embedding request and the positives it must retrieve.
#[derive(Clone, Debug, PartialEq)]
struct Query {
    user: usize,
    /// Encode `actions[..end]`.
    end: usize,
    positives: Vec<u64>,
}

fn usable_positive(corpus: &Corpus, a: &crate::corpus::Action) -> bool {
    is_positive(a) && corpus.pin(a.pin_id).is_some()
}

fn build_queries(protocol: Protocol, timelines: &[UserTimeline], start: i64, horizon_days: u32, corpus: &Corpus) -> Vec<Query> {
    let day = SECONDS_PER_DAY;
    let horizon = horizon_days as i64 * day;
    let mut out = Vec::new();
    for (u, tl) in timelines.iter().enumerate() {
        let positives_in = |lo: i64, hi: i64| -> Vec<u64> {
            tl.actions[tl.end_at(lo)..tl.end_at(hi)]
                .iter()
                .filter(|a| usable_positive(corpus, a))
                .map(|a| a.pin_id)
                .collect()
        };
        match protocol {
            Protocol::Once => out.push(Query {
                user: u,
                end: tl.end_at(start),
                positives: positives_in(start, start + horizon),
            }),
            Protocol::Daily => {
                for k in 0..horizon_days as i64 {
                    let x = start + k * day;
                    out.push(Query {
                        user: u,
                        end: tl.end_at(x - day),
                        positives: positives_in(x, x + day),
                    });
                }
            }
            Protocol::Realtime => {
                let lo = tl.end_at(start);
                let hi = tl.end_at(start + horizon);
                for a in &tl.actions[lo..hi] {
                    if usable_positive(corpus, a) {
                        out.push(Query {
                            user: u,
                            end: tl.start_at(a.timestamp),
                            positives: vec![a.pin_id],
                        });
                    }
                }
            }
        }
    }
    out.retain(|q| !q.positives.is_empty() && q.end > 0);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub protocol: Protocol,
    pub users: usize,
    pub queries: usize,
    pub positives: usize,
    pub index_size: usize,
    /// `"k" -> mean over users of per-user recall@k`.
    pub recall: BTreeMap<String, f64>,
    /// Standard error of the user mean, per k.
    pub recall_stderr: BTreeMap<String, f64>,
    pub p90_coverage: f64,
    pub coverage_k: usize,
    pub interest_entropy: f64,
    pub entropy_k: usize,
}

impl ProtocolReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k.to_string()).copied()
    }

    pub fn recall_stderr_at(&self, k: usize) -> Option<f64> {
        self.recall_stderr.get(&k.to_string()).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_version: u32,
    pub eval_start: i64,
    pub config: EvalConfig,
    pub config_hash: String,
    pub protocols: Vec<ProtocolReport>,
}

impl EvalReport {
    pub fn protocol(&self, p: Protocol) -> Option<&ProtocolReport> {
        self.protocols.iter().find(|r| r.protocol == p)
    }

    /// One row per protocol: `protocol,users,queries,positives,index_size,
    /// recall@k...,p90_coverage@k,interest_entropy@k`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("protocol,users,queries,positives,index_size");
        for k in &self.config.recall_ks {
            s.push_str(&format!(",recall@{k}"));
        }
        s.push_str(&format!(
            ",p90_coverage@{},interest_entropy@{}\n",
            self.config.coverage_k, self.config.entropy_k
        ));
        for p in &self.protocols {
            s.push_str(&format!(
                "{},{},{},{},{}",
                p.protocol.name(),
                p.users,
                p.queries,
                p.positives,
                p.index_size
            ));
            for k in &self.config.recall_ks {
                s.push_str(&format!(",{}", p.recall_at(*k).unwrap_or(f64::NAN)));
            }
            s.push_str(&format!(",{},{}\n", p.p90_coverage, p.interest_entropy));
        }
        s
    }
}

/// Hex SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn embed_queries(
    model: &Model,
    corpus: &Corpus,
    timelines: &[UserTimeline],
    queries: &[Query],
    batch: usize,
) -> Result<Vec<Option<Vec<f64>>>> {
    let enc = &model.config().encoder;
    let mut out = Vec::with_capacity(queries.len());
    for chunk in queries.chunks(batch) {
        let mut seqs: Vec<EncodedSequence> = Vec::with_capacity(chunk.len());
        let mut ok = Vec::with_capacity(chunk.len());
        for q in chunk {
            match encode_actions(&timelines[q.user].actions[..q.end], enc, corpus) {
                Ok(s) => {
                    seqs.push(s);
                    ok.push(true);
                }
                Err(Error::EmptySequence) => ok.push(false),
                Err(e) => return Err(e),
            }
        }
        let refs: Vec<&EncodedSequence> = seqs.iter().collect();
        let e = if refs.is_empty() {
            Matrix::zeros(0, 0)
        } else {
            model.user_embeddings(&refs)?
        };
        let mut r = 0;
        for good in ok {
            if good {
                out.push(Some(e.row(r).to_vec()));
                r += 1;
            } else {
                out.push(None);
            }
        }
    }
    Ok(out)
}

fn embed_parallel(
    model: &Model,
    corpus: &Corpus,
    timelines: &[UserTimeline],
    queries: &[Query],
    config: &EvalConfig,
) -> Result<Vec<Option<Vec<f64>>>> {
    if config.threads <= 1 || queries.len() < 2 * config.batch_size {
        return embed_queries(model, corpus, timelines, queries, config.batch_size);
    }
    let per = queries.len().div_ceil(config.threads);
    let parts: Vec<Result<Vec<Option<Vec<f64>>>>> = std::thread::scope(|s| {
        let handles: Vec<_> = queries
            .chunks(per)
            .map(|c| s.spawn(move || embed_queries(model, corpus, timelines, c, config.batch_size)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Distances from `user` to every index row, sorted ascending.
fn sorted_distances(user: &[f64], index: &EvalIndex) -> Vec<(f64, u64)> {
    let mut d: Vec<(f64, u64)> = (0..index.len())
        .map(|r| (sq_dist(user, index.embeddings.row(r)), index.pin_ids[r]))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

/// Evaluates `model` on held-out `timelines` starting at `start`.
///
/// A positive's own pin does not count against it when it happens to be in
/// the index. Coverage and entropy use every embedding the protocol
/// produces; entropy is averaged per user first.
pub fn evaluate(
    model: &Model,
    corpus: &Corpus,
    timelines: &[UserTimeline],
    start: i64,
    config: &EvalConfig,
) -> Result<EvalReport> {
    config.validate()?;
    let pin_emb = embed_corpus(model, corpus)?;
    let index = EvalIndex::sample(corpus, &pin_emb, config.index_size, config.seed);
    let mut protocols = Vec::new();
    for &p in &config.protocols {
        protocols.push(evaluate_protocol(model, corpus, timelines, start, config, p, &pin_emb, &index)?);
    }
    Ok(EvalReport {
        model_version: model.version(),
        eval_start: start,
        config: config.clone(),
        config_hash: config_hash(config),
        protocols,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate_protocol(
    model: &Model,
    corpus: &Corpus,
    timelines: &[UserTimeline],
    start: i64,
    config: &EvalConfig,
    protocol: Protocol,
    pin_emb: &Matrix,
    index: &EvalIndex,
) -> Result<ProtocolReport> {
    let queries = build_queries(protocol, timelines, start, config.horizon_days, corpus);
    let embeddings = embed_parallel(model, corpus, timelines, &queries, config)?;
    let in_index: HashSet<u64> = index.pin_ids.iter().copied().collect();
    let interest_of: HashMap<u64, u32> = index.pin_ids.iter().copied().zip(index.interests.iter().copied()).collect();

    let ks = &config.recall_ks;
    // per user: hits per k, positive count, entropy sum, query count
    let mut per_user: BTreeMap<usize, (Vec<usize>, usize, f64, usize)> = BTreeMap::new();
    let mut retrieved = Vec::new();
    let mut n_queries = 0;
    for (q, e) in queries.iter().zip(&embeddings) {
        let Some(u) = e else { continue };
        n_queries += 1;
        let dists = sorted_distances(u, index);
        let entry = per_user.entry(q.user).or_insert_with(|| (vec![0; ks.len()], 0, 0.0, 0));
        for pid in &q.positives {
            let dp = sq_dist(u, pin_emb.row(*pid as usize));
            let mut count = dists.partition_point(|(d, _)| *d <= dp);
            if in_index.contains(pid) {
                count -= 1;
            }
            for (i, k) in ks.iter().enumerate() {
                if count < *k {
                    entry.0[i] += 1;
                }
            }
            entry.1 += 1;
        }
        retrieved.push(dists.iter().take(config.coverage_k).map(|(_, id)| *id).collect::<Vec<u64>>());
        let labels: Vec<u32> = dists.iter().take(config.entropy_k).map(|(_, id)| interest_of[id]).collect();
        entry.2 += interest_entropy(&labels);
        entry.3 += 1;
    }

    let users = per_user.len();
    let mut recall = BTreeMap::new();
    let mut recall_stderr = BTreeMap::new();
    for (i, k) in ks.iter().enumerate() {
        let vals: Vec<f64> = per_user.values().map(|(h, n, _, _)| h[i] as f64 / *n as f64).collect();
        let (mean, se) = mean_stderr(&vals);
        recall.insert(k.to_string(), mean);
        recall_stderr.insert(k.to_string(), se);
    }
    let entropies: Vec<f64> = per_user.values().map(|(_, _, s, c)| s / *c as f64).collect();
    Ok(ProtocolReport {
        protocol,
        users,
        queries: n_queries,
        positives: per_user.values().map(|v| v.1).sum(),
        index_size: index.len(),
        recall,
        recall_stderr,
        p90_coverage: p90_coverage_at_k(&retrieved, index.len()),
        coverage_k: config.coverage_k,
        interest_entropy: mean_stderr(&entropies).0,
        entropy_k: config.entropy_k,
    })
}

/// Mean and standard error of the mean (zero for fewer than two values).
pub fn mean_stderr(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Action, ActionType, Surface, EPOCH_START};
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_rows(n: usize, d: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::uniform(n, d, 1.0, rng);
        for r in 0..n {
            crate::tensor::normalize_in_place(m.row_mut(r));
        }
        m
    }

    #[test]
    fn recall_boundaries() {
        let index = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let user = [1.0, 0.0];
        let close = [1.0, 0.0];
        assert_eq!(recall_at_k(&user, &[&close], &index, 1), Some(0.0));
        let closer = [0.999, 0.0447];
        // two index pins (distance 0 and ~1.41) vs positive at ~0.045: one beats it
        assert_eq!(recall_at_k(&user, &[&closer], &index, 1), Some(0.0));
        assert_eq!(recall_at_k(&user, &[&closer], &index, 2), Some(1.0));
        assert_eq!(recall_at_k(&user, &[], &index, 2), None);
        let far = Matrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert_eq!(recall_at_k(&user, &[&close], &far, 1), Some(1.0));
    }

    fn oracle_recall(user: &[f64], positives: &[&[f64]], index: &Matrix, k: usize) -> f64 {
        // rank each positive among index ∪ {positive}, placing it after all ties
        let mut hits = 0;
        for p in positives {
            let mut all: Vec<(f64, bool)> = (0..index.rows())
                .map(|r| (sq_dist(user, index.row(r)), false))
                .collect();
            all.push((sq_dist(user, p), true));
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let rank = all.iter().position(|x| x.1).unwrap();
            if rank < k {
                hits += 1;
            }
        }
        hits as f64 / positives.len() as f64
    }

    proptest! {
        #[test]
        fn recall_matches_sort_oracle(seed in any::<u64>(), n in 1usize..40, k in 1usize..12, dup in any::<bool>()) {
            let mut rng = rng::stream(seed, &[]);
            let mut index = unit_rows(n, 3, &mut rng);
            let user = unit_rows(1, 3, &mut rng).row(0).to_vec();
            let pos = unit_rows(3, 3, &mut rng);
            if dup {
                // exact tie between an index pin and a positive
                let row = pos.row(0).to_vec();
                index.row_mut(0).copy_from_slice(&row);
            }
            let ps: Vec<&[f64]> = (0..3).map(|r| pos.row(r)).collect();
            let got = recall_at_k(&user, &ps, &index, k).unwrap();
            prop_assert_eq!(got, oracle_recall(&user, &ps, &index, k));
            let bigger = recall_at_k(&user, &ps, &index, k + 1).unwrap();
            prop_assert!(bigger >= got);
        }
    }

    #[test]
    fn random_embeddings_give_chance_recall() {
        let mut rng = rng::stream(42, &[]);
        let index = unit_rows(1000, 16, &mut rng);
        let mut hits = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let u = unit_rows(1, 16, &mut rng);
            let p = unit_rows(1, 16, &mut rng);
            hits += recall_at_k(u.row(0), &[p.row(0)], &index, 10).unwrap();
        }
        let r = hits / n as f64;
        assert!((r - 0.01).abs() <= 0.005, "{r}");
    }

    #[test]
    fn coverage_examples() {
        let same: Vec<Vec<u64>> = (0..7).map(|_| (0..10).collect()).collect();
        assert_eq!(p90_coverage_at_k(&same, 1000), 0.009);
        let disjoint: Vec<Vec<u64>> = (0..10).map(|u| (u * 10..u * 10 + 10).collect()).collect();
        assert_eq!(p90_coverage_at_k(&disjoint, 1000), 0.09);
        assert_eq!(p90_coverage_at_k(&same[..1], 1000), 0.009);
        let mut shuffled = disjoint.clone();
        shuffled.reverse();
        assert_eq!(p90_coverage_at_k(&shuffled, 1000), 0.09);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(interest_entropy(&[4; 50]), 0.0);
        let uniform: Vec<u32> = (0..50).collect();
        assert!((interest_entropy(&uniform) - 50f64.ln()).abs() < 1e-12);
        let split: Vec<u32> = (0..50).map(|i| i % 2).collect();
        assert!((interest_entropy(&split) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn exact_search_matches_a_sort() {
        let mut rng = rng::stream(3, &[]);
        for _ in 0..50 {
            let n = rng.random_range(1..60);
            let emb = unit_rows(n, 4, &mut rng);
            let ids: Vec<u64> = (0..n as u64).map(|i| i * 7 % 101).collect();
            let q = unit_rows(1, 4, &mut rng);
            let k = rng.random_range(1..70);
            let got = exact_search(&ids, &emb, q.row(0), k);
            let mut naive: Vec<(u64, f64)> = (0..n).map(|r| (ids[r], sq_dist(q.row(0), emb.row(r)).sqrt())).collect();
            naive.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            naive.truncate(k);
            assert_eq!(got, naive);
        }
        let dup = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(exact_search(&[9, 4], &dup, &[1.0, 0.0], 1)[0].0, 4);
        assert_eq!(exact_search(&[5, 6], &dup, &[0.0, 1.0], 3).len(), 2);
    }

    fn pos(pin_id: u64, timestamp: i64) -> Action {
        Action {
            pin_id,
            timestamp,
            action_type: ActionType::Repin,
            surface: Surface::Homefeed,
            duration: 0.0,
        }
    }

    #[test]
    fn daily_queries_use_the_day_before() {
        let corpus = Corpus {
            interests: vec![],
            pins: (0..10)
                .map(|id| crate::corpus::Pin {
                    id,
                    embedding: vec![1.0],
                    interest_id: 0,
                    popularity: 1.0,
                })
                .collect(),
        };
        let t = EPOCH_START + 30 * SECONDS_PER_DAY;
        let d = SECONDS_PER_DAY;
        let tl = UserTimeline {
            user_id: 0,
            interest_mixture: vec![],
            actions: vec![
                pos(1, t - 5 * d),
                pos(2, t + 10 * d + 100),
                pos(3, t + 11 * d + 100),
                pos(4, t + 12 * d + 100),
            ],
        };
        let q = build_queries(Protocol::Daily, std::slice::from_ref(&tl), t, 14, &corpus);
        let last = q.iter().find(|q| q.positives == vec![4]).unwrap();
        // day starting at t + 12d uses actions up to t + 11d
        assert_eq!(last.end, 2);
        let once = build_queries(Protocol::Once, std::slice::from_ref(&tl), t, 14, &corpus);
        assert_eq!(once[0].end, 1);
        assert_eq!(once[0].positives, vec![2, 3, 4]);
        let rt = build_queries(Protocol::Realtime, std::slice::from_ref(&tl), t, 14, &corpus);
        assert_eq!(rt.iter().map(|q| q.end).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn protocol_names_parse() {
        for p in Protocol::ALL {
            assert_eq!(Protocol::parse(p.name()), Some(p));
        }
        assert_eq!(Protocol::parse("weekly"), None);
    }
}
