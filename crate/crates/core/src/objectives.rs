//! Turning timelines into (user position, positive pin) training pairs.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_positive, Action, Corpus, UserTimeline, SECONDS_PER_DAY};
use crate::encoding::{encode_actions, EncodedSequence, EncoderConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    NextAction,
    #[serde(alias = "sasrec_dense")]
    Sasrec,
    AllAction,
    DenseAllAction,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [
        ObjectiveKind::NextAction,
        ObjectiveKind::Sasrec,
        ObjectiveKind::AllAction,
        ObjectiveKind::DenseAllAction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::NextAction => "next_action",
            ObjectiveKind::Sasrec => "sasrec",
            ObjectiveKind::AllAction => "all_action",
            ObjectiveKind::DenseAllAction => "dense_all_action",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub kind: ObjectiveKind,
    /// Future window `K` of the all-action objectives.
    pub window_days: u32,
    pub max_positives_per_sequence: usize,
    /// Positions sampled per sequence by the dense all-action objective.
    pub dense_positions: usize,
    /// Give the pair at position 0 as much total weight as all other
    /// positions combined (next-step prediction at every position only).
    pub e1_equal_weight: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            kind: ObjectiveKind::DenseAllAction,
            window_days: 28,
            max_positives_per_sequence: 32,
            dense_positions: 8,
            e1_equal_weight: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_days == 0 {
            return Err(Error::config("window_days must be positive"));
        }
        if self.max_positives_per_sequence == 0 || self.dense_positions == 0 {
            return Err(Error::config("positive and position caps must be at least 1"));
        }
        Ok(())
    }

    fn window_secs(&self) -> i64 {
        self.window_days as i64 * SECONDS_PER_DAY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Fraction of eligible end positions sampled per timeline, in `(0, 1]`.
    pub sequence_fraction: f64,
    pub max_sequences_per_user: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            sequence_fraction: 1.0,
            max_sequences_per_user: 2,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sequence_fraction > 0.0 && self.sequence_fraction <= 1.0) {
            return Err(Error::config("sequence_fraction must lie in (0, 1]"));
        }
        if self.max_sequences_per_user == 0 {
            return Err(Error::config("max_sequences_per_user must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pair {
    /// Row of the user embedding matrix (0 = most recent action).
    pub position: usize,
    /// Index of the positive action in the timeline.
    pub action_index: usize,
    pub pin_id: u64,
    /// Relative weight among the sequence's pairs.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub user_id: u64,
    /// Index of the most recent input action.
    pub end_index: usize,
    pub sequence: EncodedSequence,
    pub pairs: Vec<Pair>,
}

fn usable(actions: &[Action], idx: usize, corpus: &Corpus) -> bool {
    is_positive(&actions[idx]) && corpus.pin(actions[idx].pin_id).is_some()
}

fn pair(actions: &[Action], position: usize, idx: usize) -> Pair {
    Pair {
        position,
        action_index: idx,
        pin_id: actions[idx].pin_id,
        weight: 1.0,
    }
}

/// Usable positives with `t < timestamp <= t + window`.
fn future_positives(actions: &[Action], after: usize, window: i64, corpus: &Corpus) -> Vec<usize> {
    let t = actions[after].timestamp;
    let start = actions.partition_point(|a| a.timestamp <= t);
    (start..actions.len())
        .take_while(|&i| actions[i].timestamp <= t + window)
        .filter(|&i| usable(actions, i, corpus))
        .collect()
}

fn subsample<R: Rng + ?Sized, T: Copy>(items: Vec<T>, cap: usize, rng: &mut R) -> Vec<T> {
    if items.len() <= cap {
        return items;
    }
    let mut idx = sample(rng, items.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i]).collect()
}

/// The action right after the sequence end, on `e_1`, if it is positive.
pub fn pairs_next_action(actions: &[Action], seq: &EncodedSequence, corpus: &Corpus) -> Vec<Pair> {
    let next = seq.source_index[0] + 1;
    if next < actions.len() && usable(actions, next, corpus) {
        vec![pair(actions, 0, next)]
    } else {
        Vec::new()
    }
}

/// One pair per position whose immediate successor is positive.
pub fn pairs_sasrec<R: Rng + ?Sized>(
    actions: &[Action],
    seq: &EncodedSequence,
    config: &ObjectiveConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Vec<Pair> {
    let candidates: Vec<Pair> = seq
        .source_index
        .iter()
        .enumerate()
        .filter_map(|(r, &s)| {
            let next = s + 1;
            (next < actions.len() && usable(actions, next, corpus)).then(|| pair(actions, r, next))
        })
        .collect();
    let mut pairs = subsample(candidates, config.max_positives_per_sequence, rng);
    let others = pairs.iter().filter(|p| p.position != 0).count();
    if config.e1_equal_weight && others > 0 {
        for p in pairs.iter_mut().filter(|p| p.position == 0) {
            p.weight = others as f64;
        }
    }
    pairs
}

/// Up to the cap of positives within `K` days after the sequence end, all on
/// `e_1`.
pub fn pairs_all_action<R: Rng + ?Sized>(
    actions: &[Action],
    seq: &EncodedSequence,
    config: &ObjectiveConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Vec<Pair> {
    let future = future_positives(actions, seq.source_index[0], config.window_secs(), corpus);
    subsample(future, config.max_positives_per_sequence, rng)
        .into_iter()
        .map(|i| pair(actions, 0, i))
        .collect()
}

/// Samples positions that have a positive within `K` days of their own
/// action and pairs each with one such positive chosen uniformly.
pub fn pairs_dense_all_action<R: Rng + ?Sized>(
    actions: &[Action],
    seq: &EncodedSequence,
    config: &ObjectiveConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Vec<Pair> {
    let window = config.window_secs();
    let options: Vec<(usize, Vec<usize>)> = seq
        .source_index
        .iter()
        .enumerate()
        .map(|(r, &s)| (r, future_positives(actions, s, window, corpus)))
        .filter(|(_, f)| !f.is_empty())
        .collect();
    let n = config.dense_positions.min(config.max_positives_per_sequence);
    let chosen: Vec<usize> = subsample((0..options.len()).collect(), n, rng);
    chosen
        .into_iter()
        .map(|o| {
            let (r, future) = &options[o];
            pair(actions, *r, future[rng.random_range(0..future.len())])
        })
        .collect()
}

pub fn make_pairs<R: Rng + ?Sized>(
    actions: &[Action],
    seq: &EncodedSequence,
    config: &ObjectiveConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Vec<Pair> {
    match config.kind {
        ObjectiveKind::NextAction => pairs_next_action(actions, seq, corpus),
        ObjectiveKind::Sasrec => pairs_sasrec(actions, seq, config, corpus, rng),
        ObjectiveKind::AllAction => pairs_all_action(actions, seq, config, corpus, rng),
        ObjectiveKind::DenseAllAction => pairs_dense_all_action(actions, seq, config, corpus, rng),
    }
}

/// End indices that can yield at least one pair under `config`.
pub fn eligible_ends(actions: &[Action], max_len: usize, config: &ObjectiveConfig, corpus: &Corpus) -> Vec<usize> {
    let n = actions.len();
    if n < 2 {
        return Vec::new();
    }
    let window = config.window_secs();
    // suffix[i]: first usable positive at index >= i
    let mut next_pos = vec![usize::MAX; n + 1];
    for i in (0..n).rev() {
        next_pos[i] = if usable(actions, i, corpus) { i } else { next_pos[i + 1] };
    }
    (0..n - 1)
        .filter(|&e| match config.kind {
            ObjectiveKind::NextAction => next_pos[e + 1] == e + 1,
            ObjectiveKind::Sasrec => {
                let first = (e + 1).saturating_sub(max_len) + 1;
                next_pos[first] <= e + 1
            }
            ObjectiveKind::AllAction => {
                let p = next_pos[e + 1];
                p < n && actions[p].timestamp <= actions[e].timestamp + window && actions[p].timestamp > actions[e].timestamp
            }
            ObjectiveKind::DenseAllAction => {
                let first = (e + 1).saturating_sub(max_len);
                (first..=e).any(|s| {
                    let p = next_pos[s + 1];
                    p < n && actions[p].timestamp <= actions[s].timestamp + window
                })
            }
        })
        .collect()
}

/// Samples end positions of one timeline, encodes each window and attaches
/// its pairs. Windows that end up with no pair are skipped.
pub fn sample_training_examples<R: Rng + ?Sized>(
    timeline: &UserTimeline,
    encoder: &EncoderConfig,
    objective: &ObjectiveConfig,
    sampling: &SamplingConfig,
    corpus: &Corpus,
    rng: &mut R,
) -> Result<Vec<TrainingExample>> {
    let actions = &timeline.actions;
    let ends = eligible_ends(actions, encoder.max_len, objective, corpus);
    if ends.is_empty() {
        return Ok(Vec::new());
    }
    let want = ((ends.len() as f64 * sampling.sequence_fraction).ceil() as usize)
        .min(sampling.max_sequences_per_user)
        .min(ends.len());
    let mut picked = sample(rng, ends.len(), want).into_vec();
    picked.sort_unstable();
    let mut out = Vec::with_capacity(want);
    for i in picked {
        let end = ends[i];
        let sequence = match encode_actions(&actions[..=end], encoder, corpus) {
            Ok(s) => s,
            Err(Error::EmptySequence) => continue,
            Err(e) => return Err(e),
        };
        let pairs = make_pairs(actions, &sequence, objective, corpus, rng);
        if pairs.is_empty() {
            continue;
        }
        out.push(TrainingExample {
            user_id: timeline.user_id,
            end_index: end,
            sequence,
            pairs,
        });
    }
    Ok(out)
}
