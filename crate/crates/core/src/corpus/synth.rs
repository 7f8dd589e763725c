use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Exp, Gamma, Poisson, StandardNormal};

use super::{
    Action, ActionType, CorpusConfig, Interest, Pin, Surface, UserTimeline, EPOCH_START, SECONDS_PER_DAY,
};
use crate::error::Result;
use crate::rng::{self, tag, StreamRng};

/// Interest taxonomy plus pins, indexed so that `pins[i].id == i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub interests: Vec<Interest>,
    pub pins: Vec<Pin>,
}

impl Corpus {
    pub fn d_pin(&self) -> usize {
        self.pins.first().map_or(0, |p| p.embedding.len())
    }

    pub fn len(&self) -> usize {
        self.pins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pins.is_empty()
    }

    pub fn pin(&self, id: u64) -> Option<&Pin> {
        self.pins.get(id as usize)
    }

    /// Pin indices grouped by interest.
    pub fn by_interest(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.interests.len()];
        for (i, p) in self.pins.iter().enumerate() {
            groups[p.interest_id as usize].push(i);
        }
        groups
    }
}

fn gaussian(rng: &mut StreamRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    crate::tensor::normalize_in_place(&mut v);
    v
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|x| *x as f32).collect()
}

/// Draws interests and pins. Each pin embedding is its interest centroid plus
/// isotropic noise plus a popularity component, renormalized; popularity is a
/// Zipf weight over a random rank permutation.
pub fn synth_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let d = config.d_pin;
    let mut rng = rng::stream(config.seed, &[tag::CORPUS]);
    let centroids: Vec<Vec<f64>> = (0..config.n_interests).map(|_| unit(gaussian(&mut rng, d))).collect();
    let pop_direction = unit(gaussian(&mut rng, d));

    let n = config.n_pins;
    let ranks = sample(&mut rng, n, n).into_vec();
    let noise_scale = config.pin_noise / (d as f64).sqrt();
    let mut pins = Vec::with_capacity(n);
    for (i, &rank) in ranks.iter().enumerate() {
        let interest_id = rng.random_range(0..config.n_interests);
        let popularity = 1.0 / ((rank + 1) as f64).powf(config.zipf_exponent);
        let percentile = if n > 1 {
            1.0 - 2.0 * rank as f64 / (n - 1) as f64
        } else {
            0.0
        };
        let noise = gaussian(&mut rng, d);
        let c = &centroids[interest_id];
        let raw: Vec<f64> = (0..d)
            .map(|k| c[k] + noise_scale * noise[k] + config.popularity_signal * percentile * pop_direction[k])
            .collect();
        pins.push(Pin {
            id: i as u64,
            embedding: to_f32(&unit(raw)),
            interest_id: interest_id as u32,
            popularity,
        });
    }
    let interests = centroids
        .iter()
        .enumerate()
        .map(|(i, c)| Interest {
            id: i as u32,
            centroid: to_f32(c),
        })
        .collect();
    Ok(Corpus { interests, pins })
}

/// Quantizes positive weights to multiples of 2^-20 summing to exactly one,
/// so the mixture survives an `f32` round trip unchanged.
fn dyadic_mixture(weights: &[f64]) -> Vec<f32> {
    const SCALE: f64 = (1u64 << 20) as f64;
    let total: f64 = weights.iter().sum();
    let mut units: Vec<u64> = weights
        .iter()
        .map(|w| ((w / total * SCALE).round() as u64).max(1))
        .collect();
    let sum: i64 = units.iter().sum::<u64>() as i64;
    let (imax, _) = units.iter().enumerate().max_by_key(|(_, u)| **u).unwrap();
    // the largest weight absorbs the rounding error
    units[imax] = (units[imax] as i64 + (1i64 << 20) - sum) as u64;
    units.iter().map(|u| (*u as f64 / SCALE) as f32).collect()
}

struct UserModel {
    interests: Vec<usize>,
    start: Vec<f64>,
    end: Vec<f64>,
    samplers: Vec<Option<(Vec<usize>, WeightedIndex<f64>)>>,
}

fn user_model(config: &CorpusConfig, corpus: &Corpus, groups: &[Vec<usize>], rng: &mut StreamRng) -> UserModel {
    let d = config.d_pin;
    let interests = sample(rng, config.n_interests, config.interests_per_user).into_vec();
    let gamma = Gamma::new(1.0, 1.0).expect("valid gamma");
    let start: Vec<f64> = interests.iter().map(|_| gamma.sample(rng) + 1e-3).collect();
    let end: Vec<f64> = interests.iter().map(|_| gamma.sample(rng) + 1e-3).collect();
    let taste_scale = config.taste_noise / (d as f64).sqrt();
    let samplers = interests
        .iter()
        .map(|&i| {
            let centroid = &corpus.interests[i].centroid;
            let noise = gaussian(rng, d);
            let taste = unit((0..d).map(|k| centroid[k] as f64 + taste_scale * noise[k]).collect());
            let members = &groups[i];
            if members.is_empty() {
                return None;
            }
            let weights: Vec<f64> = members
                .iter()
                .map(|&p| {
                    let pin = &corpus.pins[p];
                    let affinity: f64 = pin.embedding.iter().zip(&taste).map(|(a, b)| *a as f64 * b).sum();
                    pin.popularity.powf(config.popularity_bias) * (config.taste_sharpness * affinity).exp()
                })
                .collect();
            Some((members.clone(), WeightedIndex::new(&weights).expect("positive weights")))
        })
        .collect();
    UserModel {
        interests,
        start,
        end,
        samplers,
    }
}

/// Generates one timeline per user id `0..n_users`, each from its own random
/// stream. Sessions arrive as a Poisson process; each session focuses on one
/// interest, kept from the previous session with a probability decaying in the
/// gap between them and otherwise drawn from a slowly drifting mixture.
/// Repins, closeups and clicks pick an interest (the focus with probability
/// `session_focus`, otherwise a fresh mixture draw) and then a pin in it by
/// popularity and personal taste; hides and impressions pick pins by global
/// popularity.
pub fn synth_timelines(config: &CorpusConfig, corpus: &Corpus) -> Result<Vec<UserTimeline>> {
    config.validate()?;
    let groups = corpus.by_interest();
    let global = WeightedIndex::new(corpus.pins.iter().map(|p| p.popularity)).expect("positive popularity");
    let type_dist = WeightedIndex::new(config.action_type_probabilities).expect("valid type probabilities");
    let span = config.timeline_span_days as i64 * SECONDS_PER_DAY;
    let end_ts = EPOCH_START + span;
    let session_gap = (config.session_rate > 0.0)
        .then(|| Exp::new(config.session_rate / SECONDS_PER_DAY as f64).expect("positive rate"));
    let extra_actions = (config.actions_per_session > 1.0)
        .then(|| Poisson::new(config.actions_per_session - 1.0).expect("positive mean"));
    let duration = Exp::new(1.0 / config.mean_engaged_duration.max(1e-9)).expect("positive duration");
    let action_gap = Exp::new(1.0 / 30.0).expect("positive gap");

    let mut timelines = Vec::with_capacity(config.n_users);
    for user_id in 0..config.n_users as u64 {
        let mut rng = rng::stream(config.seed, &[tag::USER, user_id]);
        let model = user_model(config, corpus, &groups, &mut rng);
        let mixture = dyadic_mixture(&model.start);
        let mut actions: Vec<Action> = Vec::new();
        let mut last_focus: Option<(usize, f64)> = None;
        if let Some(gap) = session_gap {
            let mut t = EPOCH_START as f64 + gap.sample(&mut rng);
            while (t as i64) < end_ts {
                let frac = (t - EPOCH_START as f64) / span as f64;
                let drift = config.interest_drift * frac;
                let weights: Vec<f64> = model
                    .start
                    .iter()
                    .zip(&model.end)
                    .map(|(a, b)| (1.0 - drift) * a + drift * b)
                    .collect();
                let mixture_now = WeightedIndex::new(&weights).expect("positive mixture");
                let keep = match last_focus {
                    Some((_, t0)) if config.focus_memory_days > 0.0 => {
                        let memory = config.focus_memory_days * SECONDS_PER_DAY as f64;
                        rng.random_bool((-(t - t0) / memory).exp())
                    }
                    _ => false,
                };
                let focus = match last_focus {
                    Some((f, _)) if keep => f,
                    _ => mixture_now.sample(&mut rng),
                };
                last_focus = Some((focus, t));
                let surface = if rng.random_bool(config.homefeed_probability) {
                    Surface::Homefeed
                } else {
                    [Surface::Search, Surface::RelatedPins, Surface::Other][rng.random_range(0..3)]
                };
                let n_actions = 1 + extra_actions.map_or(0, |p| p.sample(&mut rng) as usize);
                let mut ts = t as i64;
                for _ in 0..n_actions {
                    if let Some(last) = actions.last() {
                        ts = ts.max(last.timestamp + 1);
                    }
                    if ts >= end_ts {
                        break;
                    }
                    let action_type = ActionType::KNOWN[type_dist.sample(&mut rng)];
                    let engaged = matches!(action_type, ActionType::Repin | ActionType::Closeup | ActionType::Click);
                    let interest = if engaged && !rng.random_bool(config.session_focus) {
                        mixture_now.sample(&mut rng)
                    } else {
                        focus
                    };
                    let pin_id = match (&model.samplers[interest], engaged) {
                        (Some((members, w)), true) => members[w.sample(&mut rng)],
                        _ => global.sample(&mut rng),
                    } as u64;
                    let secs = match action_type {
                        ActionType::Closeup | ActionType::Click => (duration.sample(&mut rng) * 10.0).round() / 10.0,
                        _ => 0.0,
                    };
                    actions.push(Action {
                        pin_id,
                        timestamp: ts,
                        action_type,
                        surface,
                        duration: secs as f32,
                    });
                    ts += 1 + action_gap.sample(&mut rng) as i64;
                }
                t += gap.sample(&mut rng);
            }
        }
        timelines.push(UserTimeline {
            user_id,
            interest_mixture: model.interests.iter().map(|i| *i as u32).zip(mixture).collect(),
            actions,
        });
    }
    Ok(timelines)
}
