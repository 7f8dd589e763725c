//! Negative pools, inclusion-probability estimates and loss weighting.

pub mod cms;
pub mod softmax;

use std::collections::{HashMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use cms::CountMinSketch;
pub use softmax::{sampled_softmax_loss, Correction, SoftmaxBatch};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    InBatch,
    Random,
    Mixed,
}

impl NegativeMode {
    pub fn uses_in_batch(self) -> bool {
        matches!(self, NegativeMode::InBatch | NegativeMode::Mixed)
    }

    pub fn uses_random(self) -> bool {
        matches!(self, NegativeMode::Random | NegativeMode::Mixed)
    }

    pub fn name(self) -> &'static str {
        match self {
            NegativeMode::InBatch => "in_batch",
            NegativeMode::Random => "random",
            NegativeMode::Mixed => "mixed",
        }
    }
}

/// How pair losses are combined into the batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Average a user's pairs, then average users.
    #[default]
    PerUser,
    /// Plain mean over pairs.
    PerPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    InBatch,
    Random,
}

/// `log Q` for one candidate.
///
/// In-batch candidates use the sketch's relative frequency, floored at
/// `1 / total` so unseen items stay finite. Random candidates use the
/// closed-form uniform inclusion rate `n_random / corpus_size`.
pub fn estimate_logq(pin_id: u64, source: Source, sketch: &CountMinSketch, corpus_size: usize, n_random: usize) -> f64 {
    match source {
        Source::InBatch => {
            let total = sketch.total().max(1) as f64;
            let est = sketch.estimate(pin_id).max(1) as f64;
            (est / total).ln()
        }
        Source::Random => (n_random as f64 / corpus_size as f64).ln(),
    }
}

/// One positive contributed to the batch by a simulated worker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositiveRef {
    pub user_id: u64,
    pub pin_id: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolSpec {
    pub mode: NegativeMode,
    pub n_random: usize,
    pub max_in_batch: usize,
}

impl Default for PoolSpec {
    fn default() -> Self {
        PoolSpec {
            mode: NegativeMode::Mixed,
            n_random: 8192,
            max_in_batch: 5000,
        }
    }
}

/// The negative pool as seen by one worker after synchronization.
///
/// Candidates are identified by pin id; the caller embeds them with the pin
/// tower. In-batch candidates come first, in global positive order, so the
/// first `in_batch_count` rows are `positives[..in_batch_count]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativePool {
    pub pin_ids: Vec<u64>,
    pub sources: Vec<Source>,
    pub logq: Vec<f64>,
    pub in_batch_count: usize,
    /// Global indices (into the concatenated positives) of this worker's pairs.
    pub pairs: Vec<usize>,
    /// Row-major `pairs x pool`; `true` excludes the candidate for that pair.
    pub mask: Vec<bool>,
}

impl NegativePool {
    pub fn len(&self) -> usize {
        self.pin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pin_ids.is_empty()
    }

    pub fn is_masked(&self, pair: usize, candidate: usize) -> bool {
        self.mask[pair * self.len() + candidate]
    }

    pub fn random_count(&self) -> usize {
        self.len() - self.in_batch_count
    }
}

/// Builds the synchronized negative pool for every worker shard.
///
/// All shards' positives are exchanged first, so each worker sees the same
/// candidates (including one shared random draw); only the per-pair masks
/// differ. A candidate is masked for a pair when it is any in-batch positive
/// of that pair's user.
pub fn gather_negatives<R: Rng + ?Sized>(
    shards: &[Vec<PositiveRef>],
    spec: PoolSpec,
    corpus_size: usize,
    sketch: &CountMinSketch,
    rng: &mut R,
) -> Result<Vec<NegativePool>> {
    if corpus_size == 0 {
        return Err(Error::config("negative sampling needs a non-empty corpus"));
    }
    let all: Vec<PositiveRef> = shards.iter().flatten().copied().collect();
    if all.is_empty() {
        return Err(Error::Precondition("negative pool needs a non-empty batch".into()));
    }

    let mut pin_ids = Vec::new();
    let mut sources = Vec::new();
    if spec.mode.uses_in_batch() {
        for p in all.iter().take(spec.max_in_batch) {
            pin_ids.push(p.pin_id);
            sources.push(Source::InBatch);
        }
    }
    let in_batch_count = pin_ids.len();
    if spec.mode.uses_random() {
        for _ in 0..spec.n_random {
            pin_ids.push(rng.random_range(0..corpus_size as u64));
            sources.push(Source::Random);
        }
    }
    let logq: Vec<f64> = pin_ids
        .iter()
        .zip(&sources)
        .map(|(id, s)| estimate_logq(*id, *s, sketch, corpus_size, spec.n_random))
        .collect();

    let mut user_positives: HashMap<u64, HashSet<u64>> = HashMap::new();
    for p in &all {
        user_positives.entry(p.user_id).or_default().insert(p.pin_id);
    }

    let mut columns: HashMap<u64, Vec<usize>> = HashMap::new();
    for (j, id) in pin_ids.iter().enumerate() {
        columns.entry(*id).or_default().push(j);
    }

    let n = pin_ids.len();
    let mut pools = Vec::with_capacity(shards.len());
    let mut offset = 0;
    for shard in shards {
        let pairs: Vec<usize> = (offset..offset + shard.len()).collect();
        let mut mask = vec![false; shard.len() * n];
        for (r, p) in shard.iter().enumerate() {
            for id in &user_positives[&p.user_id] {
                for j in columns.get(id).into_iter().flatten() {
                    mask[r * n + j] = true;
                }
            }
        }
        offset += shard.len();
        pools.push(NegativePool {
            pin_ids: pin_ids.clone(),
            sources: sources.clone(),
            logq: logq.clone(),
            in_batch_count,
            pairs,
            mask,
        });
    }
    Ok(pools)
}

/// `log Q` applied to a pair's positive: its in-batch frequency when the pool
/// draws from the batch, otherwise the uniform random rate.
pub fn positive_logq(pin_id: u64, mode: NegativeMode, sketch: &CountMinSketch, corpus_size: usize, n_random: usize) -> f64 {
    let source = if mode.uses_in_batch() {
        Source::InBatch
    } else {
        Source::Random
    };
    estimate_logq(pin_id, source, sketch, corpus_size, n_random)
}

/// Normalized pair weights: each group of pairs sharing a user sums to
/// `1 / users` under [`Weighting::PerUser`]; under [`Weighting::PerPair`]
/// weights are proportional to `base` over the whole batch.
pub fn pair_weights(user_ids: &[u64], base: &[f64], weighting: Weighting) -> Vec<f64> {
    assert_eq!(user_ids.len(), base.len());
    match weighting {
        Weighting::PerPair => {
            let total: f64 = base.iter().sum();
            base.iter().map(|b| b / total).collect()
        }
        Weighting::PerUser => {
            let mut sums: HashMap<u64, f64> = HashMap::new();
            for (u, b) in user_ids.iter().zip(base) {
                *sums.entry(*u).or_default() += b;
            }
            let users = sums.len() as f64;
            user_ids
                .iter()
                .zip(base)
                .map(|(u, b)| b / sums[u] / users)
                .collect()
        }
    }
}

/// Combines per-pair losses under `weighting`.
pub fn batch_loss(pair_losses: &[f64], user_ids: &[u64], weighting: Weighting) -> Result<f64> {
    if pair_losses.is_empty() {
        return Err(Error::Precondition("batch loss needs at least one pair".into()));
    }
    let w = pair_weights(user_ids, &vec![1.0; pair_losses.len()], weighting);
    let loss: f64 = pair_losses.iter().zip(&w).map(|(l, w)| l * w).sum();
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("batch loss {loss}")));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pos(user_id: u64, pin_id: u64) -> PositiveRef {
        PositiveRef { user_id, pin_id }
    }

    #[test]
    fn per_user_weighting_averages_within_users() {
        let l = batch_loss(&[1.0, 3.0, 2.0], &[1, 1, 2], Weighting::PerUser).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        let single = batch_loss(&[0.7], &[5], Weighting::PerUser).unwrap();
        assert_eq!(single, 0.7);
        for weighting in [Weighting::PerUser, Weighting::PerPair] {
            let same = batch_loss(&[0.4; 5], &[1, 1, 2, 3, 3], weighting).unwrap();
            assert!((same - 0.4).abs() < 1e-15);
        }
    }

    #[test]
    fn per_pair_weighting_is_plain_mean() {
        let l = batch_loss(&[1.0, 3.0, 2.0], &[1, 1, 2], Weighting::PerPair).unwrap();
        assert!((l - 2.0).abs() < 1e-15);
        let w = pair_weights(&[1, 1, 2], &[1.0; 3], Weighting::PerPair);
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn figure_seven_masking() {
        // U1 engaged P1 and P2 on worker 0; U2 -> P3 and U3 -> P4 on worker 1.
        let shards = vec![vec![pos(1, 1), pos(1, 2)], vec![pos(2, 3), pos(3, 4)]];
        let sketch = {
            let mut s = CountMinSketch::new(64, 4, 0);
            for p in 1..=4 {
                s.update(p);
            }
            s
        };
        let spec = PoolSpec {
            mode: NegativeMode::Mixed,
            n_random: 2,
            max_in_batch: 5000,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pools = gather_negatives(&shards, spec, 1_000_000, &sketch, &mut rng).unwrap();
        assert_eq!(pools.len(), 2);
        for p in &pools {
            assert_eq!(&p.pin_ids[..4], &[1, 2, 3, 4]);
            assert_eq!(p.random_count(), 2);
            assert_eq!(p.pin_ids, pools[0].pin_ids);
        }
        let w0 = &pools[0];
        // row (u1, P1): P2 masked (and P1 itself, which is the numerator)
        assert!(w0.is_masked(0, 1));
        assert!(w0.is_masked(1, 0));
        assert!(!w0.is_masked(0, 2) && !w0.is_masked(0, 3));
        let w1 = &pools[1];
        assert!(w1.is_masked(0, 2) && !w1.is_masked(0, 0));
        assert!(w1.is_masked(1, 3) && !w1.is_masked(1, 2));
    }

    #[test]
    fn single_pair_in_batch_pool_is_fully_masked() {
        let sketch = {
            let mut s = CountMinSketch::new(8, 2, 0);
            s.update(42);
            s
        };
        let spec = PoolSpec {
            mode: NegativeMode::InBatch,
            ..PoolSpec::default()
        };
        let pools = gather_negatives(&[vec![pos(9, 42)]], spec, 100, &sketch, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pools[0].pin_ids, vec![42]);
        assert!(pools[0].is_masked(0, 0));
        let u = [1.0, 0.0];
        let loss = sampled_softmax_loss(&u, &u, &[], 1.0, None).unwrap();
        assert!(loss.abs() < 1e-15, "positive-only denominator gives zero loss");
    }

    #[test]
    fn workers_share_all_positives_and_random_draw() {
        let shards = vec![
            vec![pos(1, 10), pos(2, 11), pos(3, 12)],
            vec![pos(4, 13), pos(5, 14), pos(6, 15)],
        ];
        let mut sketch = CountMinSketch::new(64, 4, 0);
        for p in 10..16 {
            sketch.update(p);
        }
        let spec = PoolSpec {
            mode: NegativeMode::Mixed,
            n_random: 5,
            max_in_batch: 5000,
        };
        let pools = gather_negatives(&shards, spec, 1000, &sketch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for p in &pools {
            assert_eq!(&p.pin_ids[..6], &[10, 11, 12, 13, 14, 15]);
            assert_eq!(p.len(), 11);
            assert_eq!(p.pin_ids[6..], pools[0].pin_ids[6..]);
        }
        assert_eq!(pools[1].pairs, vec![3, 4, 5]);
    }

    #[test]
    fn in_batch_pool_is_capped() {
        let shard: Vec<PositiveRef> = (0..20).map(|i| pos(i, i)).collect();
        let sketch = CountMinSketch::new(8, 2, 0);
        let spec = PoolSpec {
            mode: NegativeMode::InBatch,
            n_random: 0,
            max_in_batch: 7,
        };
        let pools = gather_negatives(&[shard], spec, 100, &sketch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(pools[0].len(), 7);
    }

    #[test]
    fn empty_corpus_is_a_config_error() {
        let sketch = CountMinSketch::new(8, 2, 0);
        let r = gather_negatives(&[vec![pos(1, 1)]], PoolSpec::default(), 0, &sketch, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn log_q_closed_forms() {
        let mut sketch = CountMinSketch::new(1 << 12, 4, 5);
        for id in 0..100 {
            sketch.update(id);
        }
        for id in 0..100 {
            let lq = estimate_logq(id, Source::InBatch, &sketch, 10, 1);
            assert!((lq - (1.0f64 / 100.0).ln()).abs() < 1e-12);
        }
        let r = estimate_logq(0, Source::Random, &sketch, 1_000_000, 8192);
        assert!((r - (8192.0f64 / 1e6).ln()).abs() < 1e-15);
        // never-seen in-batch candidate is floored at 1 / total
        let fresh = estimate_logq(10_000_000, Source::InBatch, &sketch, 10, 1);
        assert!(fresh.is_finite() && fresh <= (1.0f64 / 100.0).ln() + 1e-12);
    }
}
