//! Turns the most recent actions of a timeline into transformer input rows.
//!
//! An [`EncodedSequence`] holds the parameter-free part of the encoding (pin
//! embeddings, vocabulary indices, raw times). The learnable parts, namely the
//! action-type and surface tables and the three phase vectors, are applied
//! either eagerly with [`EncodedSequence::features`] or inside a [`Graph`] with
//! [`input_graph`].

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{Action, ActionType, Corpus, Surface, UserTimeline};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const HOUR: f64 = 3600.0;
const DAY: f64 = 86_400.0;

pub const ACTION_TYPE_VOCAB: usize = 5;
pub const SURFACE_VOCAB: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Sequence length `M`.
    pub max_len: usize,
    /// Periods in seconds applied to the absolute timestamp.
    pub absolute_periods: Vec<f64>,
    pub relative_period_count: usize,
    /// Smallest and largest relative period in seconds, log-spaced inclusive.
    pub relative_period_range: [f64; 2],
    pub action_type_width: usize,
    pub surface_width: usize,
    /// Whether `log(1 + t)` of the absolute timestamp is part of the input.
    pub include_absolute_log: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            max_len: 64,
            absolute_periods: default_absolute_periods(),
            relative_period_count: 32,
            relative_period_range: [1.0, 28.0 * DAY],
            action_type_width: 8,
            surface_width: 4,
            include_absolute_log: true,
        }
    }
}

pub fn default_absolute_periods() -> Vec<f64> {
    vec![
        0.25 * HOUR,
        0.5 * HOUR,
        0.75 * HOUR,
        HOUR,
        2.0 * HOUR,
        4.0 * HOUR,
        8.0 * HOUR,
        16.0 * HOUR,
        DAY,
        7.0 * DAY,
        28.0 * DAY,
        365.0 * DAY,
    ]
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_len == 0 {
            return Err(Error::config("max_len must be at least 1"));
        }
        if self.absolute_periods.iter().any(|p| !(*p > 0.0 && p.is_finite())) {
            return Err(Error::config("absolute periods must be positive"));
        }
        if self.relative_period_count == 0 {
            return Err(Error::config("relative_period_count must be at least 1"));
        }
        let [lo, hi] = self.relative_period_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::config("relative_period_range must satisfy 0 < lo <= hi"));
        }
        if self.action_type_width == 0 || self.surface_width == 0 {
            return Err(Error::config("vocabulary widths must be at least 1"));
        }
        Ok(())
    }

    pub fn relative_periods(&self) -> Vec<f64> {
        let [lo, hi] = self.relative_period_range;
        let n = self.relative_period_count;
        if n == 1 {
            return vec![lo];
        }
        let (a, b) = (lo.ln(), hi.ln());
        (0..n)
            .map(|i| {
                if i == n - 1 {
                    hi
                } else {
                    (a + (b - a) * i as f64 / (n - 1) as f64).exp()
                }
            })
            .collect()
    }

    pub fn absolute_width(&self) -> usize {
        2 * self.absolute_periods.len() + usize::from(self.include_absolute_log)
    }

    pub fn relative_width(&self) -> usize {
        2 * self.relative_period_count + 1
    }

    /// Input row width for pins of dimension `d_pin`.
    pub fn d_in(&self, d_pin: usize) -> usize {
        d_pin + self.action_type_width + self.surface_width + 1 + self.absolute_width() + 2 * self.relative_width()
    }
}

fn angle(t: f64, period: f64) -> f64 {
    TAU * t.rem_euclid(period) / period
}

/// `2P + 1` features of `t` seconds: a phase-shifted cosine and sine per
/// period followed by `log(1 + t)`.
pub fn encode_time(t: f64, periods: &[f64], phase: &[f64]) -> Result<Vec<f64>> {
    if !(t >= 0.0) {
        return Err(Error::Precondition(format!("time {t} must be non-negative")));
    }
    if phase.len() != 2 * periods.len() {
        return Err(Error::shape(format!(
            "{} phases for {} periods",
            phase.len(),
            periods.len()
        )));
    }
    let mut out = Vec::with_capacity(2 * periods.len() + 1);
    for (i, p) in periods.iter().enumerate() {
        let a = angle(t, *p);
        out.push((a + phase[2 * i]).cos());
        out.push((a + phase[2 * i + 1]).sin());
    }
    out.push(t.ln_1p());
    Ok(out)
}

fn vocab_index(action: &Action) -> Option<(usize, usize)> {
    let t = match action.action_type {
        ActionType::Unknown(_) => return None,
        t => t.code() as usize,
    };
    let s = match action.surface {
        Surface::Unknown(_) => return None,
        s => s.code() as usize,
    };
    Some((t, s))
}

/// Parameter-free encoding of up to `M` actions; row 0 is the most recent,
/// real rows come first and padding follows.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub max_len: usize,
    /// `len x d_pin` pin embeddings of the real rows.
    pub pins: Matrix,
    pub pin_ids: Vec<u64>,
    /// Index of each real row's action within the source slice.
    pub source_index: Vec<usize>,
    pub action_types: Vec<usize>,
    pub surfaces: Vec<usize>,
    pub log_durations: Vec<f64>,
    pub timestamps: Vec<i64>,
    /// Seconds since the most recent encoded action.
    pub since_latest: Vec<f64>,
    /// Seconds until the next more recent encoded action; zero for row 0.
    pub gap_to_next: Vec<f64>,
}

impl EncodedSequence {
    /// Number of real rows.
    pub fn len(&self) -> usize {
        self.pin_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pin_ids.is_empty()
    }

    /// Length-`M` mask; `true` marks a real action.
    pub fn padding_mask(&self) -> Vec<bool> {
        (0..self.max_len).map(|i| i < self.len()).collect()
    }

    /// Materializes the `M x D_in` feature matrix with frozen tables.
    pub fn features(&self, config: &EncoderConfig, tables: &InputTables) -> Result<Matrix> {
        let mut g = Graph::new();
        let vars = tables.constants(&mut g);
        let x = input_graph(&mut g, config, &[self], &vars)?;
        Ok(g.take_value(x))
    }
}

/// Encodes the `M` most recent in-vocabulary actions of `actions`, which
/// must be time-sorted. Actions with unknown codes or pins missing from the
/// corpus are dropped first.
pub fn encode_actions(actions: &[Action], config: &EncoderConfig, corpus: &Corpus) -> Result<EncodedSequence> {
    let d_pin = corpus.d_pin();
    let mut picked: Vec<(usize, usize, usize)> = Vec::with_capacity(config.max_len);
    for (idx, a) in actions.iter().enumerate().rev() {
        if picked.len() == config.max_len {
            break;
        }
        if corpus.pin(a.pin_id).is_none() {
            continue;
        }
        if let Some((t, s)) = vocab_index(a) {
            picked.push((idx, t, s));
        }
    }
    if picked.is_empty() {
        return Err(Error::EmptySequence);
    }
    let n = picked.len();
    let latest = actions[picked[0].0].timestamp;
    let mut pins = Matrix::zeros(n, d_pin);
    let mut seq = EncodedSequence {
        max_len: config.max_len,
        pins: Matrix::zeros(0, 0),
        pin_ids: Vec::with_capacity(n),
        source_index: Vec::with_capacity(n),
        action_types: Vec::with_capacity(n),
        surfaces: Vec::with_capacity(n),
        log_durations: Vec::with_capacity(n),
        timestamps: Vec::with_capacity(n),
        since_latest: Vec::with_capacity(n),
        gap_to_next: Vec::with_capacity(n),
    };
    for (r, &(idx, t, s)) in picked.iter().enumerate() {
        let a = &actions[idx];
        let pin = corpus.pin(a.pin_id).expect("checked above");
        for (dst, src) in pins.row_mut(r).iter_mut().zip(&pin.embedding) {
            *dst = *src as f64;
        }
        seq.pin_ids.push(a.pin_id);
        seq.source_index.push(idx);
        seq.action_types.push(t);
        seq.surfaces.push(s);
        seq.log_durations.push((a.duration.max(0.0) as f64).ln_1p());
        seq.timestamps.push(a.timestamp);
        seq.since_latest.push((latest - a.timestamp) as f64);
        let gap = if r == 0 {
            0.0
        } else {
            (actions[picked[r - 1].0].timestamp - a.timestamp) as f64
        };
        seq.gap_to_next.push(gap);
    }
    seq.pins = pins;
    Ok(seq)
}

/// Encodes the actions of `timeline` with `timestamp <= as_of`.
pub fn encode_sequence(
    timeline: &UserTimeline,
    as_of: i64,
    config: &EncoderConfig,
    corpus: &Corpus,
) -> Result<EncodedSequence> {
    encode_actions(&timeline.actions[..timeline.end_at(as_of)], config, corpus)
}

/// Learnable pieces of the input encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct InputTables {
    /// `5 x action_type_width`.
    pub action_type: Matrix,
    /// `4 x surface_width`.
    pub surface: Matrix,
    pub phase_absolute: Matrix,
    pub phase_relative: Matrix,
    pub phase_gap: Matrix,
}

/// Graph handles for [`InputTables`].
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub action_type: Var,
    pub surface: Var,
    pub phase_absolute: Var,
    pub phase_relative: Var,
    pub phase_gap: Var,
}

impl InputTables {
    pub fn constants(&self, g: &mut Graph) -> InputVars {
        InputVars {
            action_type: g.constant(self.action_type.clone()),
            surface: g.constant(self.surface.clone()),
            phase_absolute: g.constant(self.phase_absolute.clone()),
            phase_relative: g.constant(self.phase_relative.clone()),
            phase_gap: g.constant(self.phase_gap.clone()),
        }
    }
}

fn angles(values: &[f64], periods: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(values.len(), periods.len());
    for (r, t) in values.iter().enumerate() {
        for (c, p) in periods.iter().enumerate() {
            m.set(r, c, angle(*t, *p));
        }
    }
    m
}

fn log_column(values: impl Iterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = values.map(f64::ln_1p).collect();
    Matrix::from_vec(v.len(), 1, v)
}

/// Builds the stacked `(B * M) x D_in` input of `seqs` inside `g`; padded
/// rows are zero.
pub fn input_graph(g: &mut Graph, config: &EncoderConfig, seqs: &[&EncodedSequence], vars: &InputVars) -> Result<Var> {
    let m = config.max_len;
    let d_pin = seqs.first().map_or(0, |s| s.pins.cols());
    let mut index = Vec::new();
    let mut pins = Vec::new();
    let (mut types, mut surfaces, mut durs) = (Vec::new(), Vec::new(), Vec::new());
    let (mut abs_t, mut rel_t, mut gap_t) = (Vec::new(), Vec::new(), Vec::new());
    for (b, s) in seqs.iter().enumerate() {
        if s.max_len != m {
            return Err(Error::shape(format!("sequence length {} != {m}", s.max_len)));
        }
        if s.pins.cols() != d_pin {
            return Err(Error::shape("pin dimension differs across sequences"));
        }
        index.extend((0..s.len()).map(|r| b * m + r));
        pins.extend_from_slice(s.pins.data());
        types.extend_from_slice(&s.action_types);
        surfaces.extend_from_slice(&s.surfaces);
        durs.extend_from_slice(&s.log_durations);
        abs_t.extend(s.timestamps.iter().map(|t| (*t).max(0) as f64));
        rel_t.extend_from_slice(&s.since_latest);
        gap_t.extend_from_slice(&s.gap_to_next);
    }
    let n = index.len();
    let rel_periods = config.relative_periods();
    let mut parts = vec![
        g.constant(Matrix::from_vec(n, d_pin, pins)),
        g.gather_rows(vars.action_type, types),
        g.gather_rows(vars.surface, surfaces),
        g.constant(Matrix::from_vec(n, 1, durs)),
        g.periodic(angles(&abs_t, &config.absolute_periods), vars.phase_absolute),
    ];
    if config.include_absolute_log {
        parts.push(g.constant(log_column(abs_t.iter().copied())));
    }
    parts.push(g.periodic(angles(&rel_t, &rel_periods), vars.phase_relative));
    parts.push(g.constant(log_column(rel_t.iter().copied())));
    parts.push(g.periodic(angles(&gap_t, &rel_periods), vars.phase_gap));
    parts.push(g.constant(log_column(gap_t.iter().copied())));
    let real = g.concat_cols(parts);
    Ok(g.scatter_rows(real, index, seqs.len() * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, CorpusConfig, Interest, Pin, EPOCH_START};

    fn corpus(n: usize) -> Corpus {
        Corpus {
            interests: vec![Interest {
                id: 0,
                centroid: vec![1.0, 0.0],
            }],
            pins: (0..n as u64)
                .map(|id| Pin {
                    id,
                    embedding: vec![id as f32, 1.0],
                    interest_id: 0,
                    popularity: 1.0,
                })
                .collect(),
        }
    }

    fn action(pin_id: u64, timestamp: i64) -> Action {
        Action {
            pin_id,
            timestamp,
            action_type: ActionType::Repin,
            surface: Surface::Homefeed,
            duration: 0.0,
        }
    }

    fn tables(cfg: &EncoderConfig) -> InputTables {
        let p = cfg.relative_period_count;
        InputTables {
            action_type: Matrix::filled(ACTION_TYPE_VOCAB, cfg.action_type_width, 0.5),
            surface: Matrix::filled(SURFACE_VOCAB, cfg.surface_width, -0.5),
            phase_absolute: Matrix::zeros(1, 2 * cfg.absolute_periods.len()),
            phase_relative: Matrix::zeros(1, 2 * p),
            phase_gap: Matrix::zeros(1, 2 * p),
        }
    }

    #[test]
    fn full_period_and_zero_time() {
        let periods = [7.0, 3600.0];
        let v = encode_time(7.0, &periods[..1], &[0.0, 0.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        let v = encode_time(0.0, &periods, &[0.0; 4]).unwrap();
        assert_eq!(v, vec![1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(encode_time(-1.0, &periods, &[0.0; 4]), Err(Error::Precondition(_))));
    }

    #[test]
    fn absolute_periods_are_the_fixed_twelve() {
        let hours: Vec<f64> = default_absolute_periods().iter().map(|p| p / HOUR).collect();
        assert_eq!(
            hours,
            vec![0.25, 0.5, 0.75, 1.0, 2.0, 4.0, 8.0, 16.0, 24.0, 168.0, 672.0, 8760.0]
        );
    }

    #[test]
    fn relative_periods_are_log_spaced_inclusive() {
        let p = EncoderConfig::default().relative_periods();
        assert_eq!(p.len(), 32);
        assert_eq!(p[0], 1.0);
        assert_eq!(p[31], 2_419_200.0);
        let ratio = p[1] / p[0];
        for w in p.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9);
        }
    }

    #[test]
    fn encode_time_width_and_range() {
        for n in 1..6 {
            let periods: Vec<f64> = (1..=n).map(|i| i as f64 * 13.0).collect();
            let mut prev = f64::NEG_INFINITY;
            for t in [0.0, 1.0, 5.5, 100.0, 1e9] {
                let v = encode_time(t, &periods, &vec![0.3; 2 * n]).unwrap();
                assert_eq!(v.len(), 2 * n + 1);
                assert!(v[..2 * n].iter().all(|x| (-1.0..=1.0).contains(x)));
                assert!(v[2 * n] >= prev);
                prev = v[2 * n];
            }
        }
    }

    #[test]
    fn keeps_most_recent_actions_in_reverse_order() {
        let c = corpus(1000);
        let cfg = EncoderConfig {
            max_len: 256,
            ..EncoderConfig::default()
        };
        let actions: Vec<Action> = (0..1000).map(|i| action(i, EPOCH_START + 10 * i as i64)).collect();
        let s = encode_actions(&actions, &cfg, &c).unwrap();
        assert_eq!(s.len(), 256);
        assert_eq!(s.pin_ids[0], 999);
        assert_eq!(s.pin_ids[255], 744);
        assert_eq!(s.since_latest[0], 0.0);
        assert_eq!(s.gap_to_next[0], 0.0);
        assert_eq!(s.gap_to_next[1], 10.0);

        let short = encode_actions(&actions[..3], &cfg, &c).unwrap();
        assert_eq!(short.padding_mask().iter().filter(|m| **m).count(), 3);
        assert_eq!(short.padding_mask().len(), 256);
    }

    #[test]
    fn drops_out_of_vocabulary_actions() {
        let c = corpus(5);
        let cfg = EncoderConfig::default();
        let mut actions: Vec<Action> = (0..4).map(|i| action(i, EPOCH_START + i as i64)).collect();
        actions[2].surface = Surface::Unknown(9);
        actions[1].action_type = ActionType::Unknown(7);
        let s = encode_actions(&actions, &cfg, &c).unwrap();
        assert_eq!(s.pin_ids, vec![3, 0]);
        assert_eq!(s.gap_to_next, vec![0.0, 3.0]);
        actions.push(action(77, EPOCH_START + 10));
        assert_eq!(encode_actions(&actions, &cfg, &c).unwrap().pin_ids, vec![3, 0]);
    }

    #[test]
    fn empty_window_is_an_error() {
        let c = corpus(2);
        let tl = UserTimeline {
            user_id: 1,
            interest_mixture: vec![],
            actions: vec![action(0, EPOCH_START + 100)],
        };
        let cfg = EncoderConfig::default();
        assert!(matches!(
            encode_sequence(&tl, EPOCH_START, &cfg, &c),
            Err(Error::EmptySequence)
        ));
        assert_eq!(encode_sequence(&tl, EPOCH_START + 100, &cfg, &c).unwrap().len(), 1);
    }

    #[test]
    fn feature_layout_matches_the_scalar_encoders() {
        let c = corpus(4);
        let cfg = EncoderConfig {
            max_len: 5,
            ..EncoderConfig::default()
        };
        let mut actions: Vec<Action> = (0..3).map(|i| action(i, EPOCH_START + 100 * i as i64)).collect();
        actions[0].duration = 0.0;
        actions[1].duration = 12.5;
        actions[1].action_type = ActionType::Click;
        let s = encode_actions(&actions, &cfg, &c).unwrap();
        let mut t = tables(&cfg);
        t.phase_relative.data_mut()[3] = 0.25;
        let x = s.features(&cfg, &t).unwrap();
        assert_eq!(x.shape(), (5, cfg.d_in(2)));
        for r in 3..5 {
            assert!(x.row(r).iter().all(|v| *v == 0.0));
        }
        let row = x.row(1);
        assert_eq!(&row[..2], &[1.0, 1.0]);
        assert_eq!(row[2 + 8 + 4], 12.5f64.ln_1p());
        let abs_start = 2 + 8 + 4 + 1;
        let abs = encode_time(
            (EPOCH_START + 100) as f64,
            &cfg.absolute_periods,
            t.phase_absolute.data(),
        )
        .unwrap();
        for (a, b) in row[abs_start..abs_start + abs.len()].iter().zip(&abs) {
            assert!((a - b).abs() < 1e-12);
        }
        let rel_start = abs_start + cfg.absolute_width();
        let rel = encode_time(100.0, &cfg.relative_periods(), t.phase_relative.data()).unwrap();
        for (a, b) in row[rel_start..rel_start + rel.len()].iter().zip(&rel) {
            assert!((a - b).abs() < 1e-12);
        }
        let top = x.row(0);
        let zero = encode_time(0.0, &cfg.relative_periods(), t.phase_relative.data()).unwrap();
        assert_eq!(&top[rel_start..rel_start + zero.len()], &zero[..]);
    }

    #[test]
    fn future_actions_do_not_change_the_encoding() {
        let cfg = CorpusConfig {
            n_pins: 100,
            n_users: 3,
            n_interests: 5,
            d_pin: 8,
            timeline_span_days: 20,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&cfg).unwrap();
        let tls = crate::corpus::synth_timelines(&cfg, &corpus).unwrap();
        let ec = EncoderConfig {
            max_len: 16,
            ..EncoderConfig::default()
        };
        for tl in &tls {
            let Some(mid) = tl.actions.get(tl.actions.len() / 2) else { continue };
            let as_of = mid.timestamp;
            let a = encode_sequence(tl, as_of, &ec, &corpus).unwrap();
            let b = encode_sequence(&tl.truncated(as_of), as_of, &ec, &corpus).unwrap();
            assert_eq!(a, b);
            let x = a.features(&ec, &tables(&ec)).unwrap();
            assert_eq!(x.cols(), ec.d_in(8));
        }
    }
}
