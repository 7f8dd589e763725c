//! Synthetic pins, interests and user action timelines.

mod io;
mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use io::{read_corpus, read_dataset, write_corpus, write_dataset, DatasetReader, CORPUS_MAGIC, DATASET_MAGIC};
pub use synth::{synth_corpus, synth_timelines, Corpus};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Midnight UTC at which every synthetic timeline starts.
pub const EPOCH_START: i64 = 1_599_955_200;

#[derive(Clone, Debug, PartialEq)]
pub struct Interest {
    pub id: u32,
    pub centroid: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pin {
    pub id: u64,
    pub embedding: Vec<f32>,
    pub interest_id: u32,
    pub popularity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ActionType {
    Repin,
    Closeup,
    Click,
    Hide,
    Impression,
    /// A code outside the known vocabulary, kept verbatim.
    Unknown(u8),
}

impl ActionType {
    pub const KNOWN: [ActionType; 5] = [
        ActionType::Repin,
        ActionType::Closeup,
        ActionType::Click,
        ActionType::Hide,
        ActionType::Impression,
    ];

    pub fn code(self) -> u8 {
        match self {
            ActionType::Repin => 0,
            ActionType::Closeup => 1,
            ActionType::Click => 2,
            ActionType::Hide => 3,
            ActionType::Impression => 4,
            ActionType::Unknown(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            0 => ActionType::Repin,
            1 => ActionType::Closeup,
            2 => ActionType::Click,
            3 => ActionType::Hide,
            4 => ActionType::Impression,
            c => ActionType::Unknown(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Surface {
    Homefeed,
    Search,
    RelatedPins,
    Other,
    Unknown(u8),
}

impl Surface {
    pub const KNOWN: [Surface; 4] = [Surface::Homefeed, Surface::Search, Surface::RelatedPins, Surface::Other];

    pub fn code(self) -> u8 {
        match self {
            Surface::Homefeed => 0,
            Surface::Search => 1,
            Surface::RelatedPins => 2,
            Surface::Other => 3,
            Surface::Unknown(c) => c,
        }
    }

    pub fn from_code(code: u8) -> Self {
        match code {
            0 => Surface::Homefeed,
            1 => Surface::Search,
            2 => Surface::RelatedPins,
            3 => Surface::Other,
            c => Surface::Unknown(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub pin_id: u64,
    /// Seconds since the Unix epoch.
    pub timestamp: i64,
    pub action_type: ActionType,
    pub surface: Surface,
    /// Seconds.
    pub duration: f32,
}

/// Engagement threshold, in seconds, for closeups and clickthroughs.
pub const LONG_ENGAGEMENT_SECS: f32 = 10.0;

/// Positive engagement: a homefeed repin, or a homefeed closeup or click that
/// lasted strictly longer than ten seconds.
pub fn is_positive(action: &Action) -> bool {
    action.surface == Surface::Homefeed
        && match action.action_type {
            ActionType::Repin => true,
            ActionType::Closeup | ActionType::Click => action.duration > LONG_ENGAGEMENT_SECS,
            _ => false,
        }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserTimeline {
    pub user_id: u64,
    /// Sparse `(interest_id, weight)`; weights sum to one.
    pub interest_mixture: Vec<(u32, f32)>,
    /// Ascending by `(timestamp, pin_id)`.
    pub actions: Vec<Action>,
}

impl UserTimeline {
    /// Index one past the last action with `timestamp <= t`.
    pub fn end_at(&self, t: i64) -> usize {
        self.actions.partition_point(|a| a.timestamp <= t)
    }

    /// Index of the first action with `timestamp >= t`.
    pub fn start_at(&self, t: i64) -> usize {
        self.actions.partition_point(|a| a.timestamp < t)
    }

    /// Copy holding only actions with `timestamp <= t`.
    pub fn truncated(&self, t: i64) -> UserTimeline {
        UserTimeline {
            user_id: self.user_id,
            interest_mixture: self.interest_mixture.clone(),
            actions: self.actions[..self.end_at(t)].to_vec(),
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.actions
            .windows(2)
            .all(|w| (w[0].timestamp, w[0].pin_id) < (w[1].timestamp, w[1].pin_id))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_pins: usize,
    pub n_users: usize,
    pub n_interests: usize,
    pub d_pin: usize,
    pub zipf_exponent: f64,
    /// Std-dev of the isotropic noise added to an interest centroid, per unit
    /// of embedding norm.
    pub pin_noise: f64,
    /// Weight of the standardized log-popularity direction mixed into each pin
    /// embedding (the engagement part of a content embedding).
    pub popularity_signal: f64,
    pub interests_per_user: usize,
    /// Spread of a user's personal taste point around each chosen centroid.
    pub taste_noise: f64,
    /// Sharpness of within-interest pin choice towards the user's taste.
    pub taste_sharpness: f64,
    /// Exponent on pin popularity in within-interest pin choice.
    pub popularity_bias: f64,
    /// Mixture drift towards a second mixture over the whole span, in `[0, 1]`.
    pub interest_drift: f64,
    /// Probability that an engaged action follows the session's focus
    /// interest rather than a fresh draw from the mixture.
    pub session_focus: f64,
    /// Consecutive sessions keep the previous focus interest with probability
    /// `exp(-gap / focus_memory_days)`; zero makes every focus a fresh draw.
    pub focus_memory_days: f64,
    /// Mean sessions per day (Poisson process).
    pub session_rate: f64,
    /// Mean actions per session (one plus a Poisson count).
    pub actions_per_session: f64,
    /// Probability that a session happens on homefeed.
    pub homefeed_probability: f64,
    /// Probabilities of repin, closeup, click, hide, impression.
    pub action_type_probabilities: [f64; 5],
    /// Mean duration in seconds of closeups and clicks (exponential).
    pub mean_engaged_duration: f64,
    pub timeline_span_days: u32,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_pins: 10_000,
            n_users: 2_000,
            n_interests: 350,
            d_pin: 64,
            zipf_exponent: 1.0,
            pin_noise: 0.5,
            popularity_signal: 0.5,
            interests_per_user: 4,
            taste_noise: 0.5,
            taste_sharpness: 4.0,
            popularity_bias: 0.5,
            interest_drift: 0.3,
            session_focus: 0.5,
            focus_memory_days: 3.0,
            session_rate: 0.6,
            actions_per_session: 8.0,
            homefeed_probability: 0.7,
            action_type_probabilities: [0.2, 0.3, 0.2, 0.05, 0.25],
            mean_engaged_duration: 15.0,
            timeline_span_days: 90,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_pins", self.n_pins),
            ("n_users", self.n_users),
            ("n_interests", self.n_interests),
            ("d_pin", self.d_pin),
            ("interests_per_user", self.interests_per_user),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.interests_per_user > self.n_interests {
            return Err(Error::config("interests_per_user exceeds n_interests"));
        }
        let probs = [self.homefeed_probability, self.interest_drift, self.session_focus];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        if self.action_type_probabilities.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::config("action type probabilities must lie in [0, 1]"));
        }
        let total: f64 = self.action_type_probabilities.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::config("action type probabilities must sum to 1"));
        }
        let non_neg = [
            ("zipf_exponent", self.zipf_exponent),
            ("pin_noise", self.pin_noise),
            ("popularity_signal", self.popularity_signal),
            ("taste_noise", self.taste_noise),
            ("taste_sharpness", self.taste_sharpness),
            ("popularity_bias", self.popularity_bias),
            ("session_rate", self.session_rate),
            ("focus_memory_days", self.focus_memory_days),
            ("mean_engaged_duration", self.mean_engaged_duration),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and non-negative")));
            }
        }
        if !(self.actions_per_session >= 1.0) {
            return Err(Error::config("actions_per_session must be at least 1"));
        }
        Ok(())
    }
}
