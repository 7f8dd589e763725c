//! Mini-batch training with simulated data-parallel workers.
//!
//! Every random choice of step `k` comes from streams keyed by `(seed, k)`,
//! so a run resumed from a saved state replays the uninterrupted run exactly.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::codec::{Reader, Writer};
use crate::corpus::{Corpus, UserTimeline};
use crate::encoding::EncodedSequence;
use crate::error::{Error, Result};
use crate::loss::{
    gather_negatives, pair_weights, positive_logq, CountMinSketch, NegativeMode, NegativePool, PoolSpec,
    PositiveRef, SoftmaxBatch, Weighting,
};
use crate::model::{Model, ModelConfig};
use crate::objectives::{eligible_ends, sample_training_examples, ObjectiveConfig, SamplingConfig, TrainingExample};
use crate::rng::{self, tag};
use crate::tensor::Matrix;

pub const STATE_MAGIC: &[u8; 4] = b"SQS1";
const STATE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SampledSoftmax,
    /// One uniformly drawn negative per pair, logistic loss.
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub sampling: SamplingConfig,
    pub loss: LossKind,
    pub negatives: NegativeMode,
    pub n_random: usize,
    pub max_in_batch: usize,
    pub spc: bool,
    pub weighting: Weighting,
    /// Users per step.
    pub batch_size: usize,
    pub workers: usize,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    /// Save model and state every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub cms_width: usize,
    pub cms_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            sampling: SamplingConfig::default(),
            loss: LossKind::SampledSoftmax,
            negatives: NegativeMode::Mixed,
            n_random: 8192,
            max_in_batch: 5000,
            spc: true,
            weighting: Weighting::PerUser,
            batch_size: 32,
            workers: 1,
            optimizer: OptimizerConfig::default(),
            steps: 1000,
            checkpoint_every: 0,
            cms_width: 1 << 15,
            cms_depth: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.sampling.validate()?;
        if self.batch_size == 0 || self.workers == 0 {
            return Err(Error::config("batch_size and workers must be at least 1"));
        }
        if self.negatives.uses_random() && self.n_random == 0 {
            return Err(Error::config("random negatives need n_random >= 1"));
        }
        if self.negatives.uses_in_batch() && self.max_in_batch == 0 {
            return Err(Error::config("in-batch negatives need max_in_batch >= 1"));
        }
        if self.cms_width == 0 || self.cms_depth == 0 {
            return Err(Error::config("count-min sketch needs positive width and depth"));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.epsilon > 0.0)
        {
            return Err(Error::config("invalid optimizer hyperparameters"));
        }
        Ok(())
    }

    fn pool_spec(&self) -> PoolSpec {
        PoolSpec {
            mode: self.negatives,
            n_random: self.n_random,
            max_in_batch: self.max_in_batch,
        }
    }
}

/// One step's sampled examples, pairs and negatives.
#[derive(Clone, Debug)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    /// Stacked hidden row (`example * M + position`) of each pair, worker-major.
    pub pair_rows: Vec<usize>,
    pub pair_users: Vec<u64>,
    pub pair_pins: Vec<u64>,
    pub pair_base_weights: Vec<f64>,
    pub workers: Vec<Range<usize>>,
    pub pools: Vec<NegativePool>,
    pub pos_logq: Vec<f64>,
    /// One negative per pair for the logistic loss.
    pub bce_negatives: Vec<u64>,
}

impl Batch {
    pub fn pair_count(&self) -> usize {
        self.pair_rows.len()
    }
}

fn pin_matrix(corpus: &Corpus, ids: &[u64]) -> Matrix {
    let d = corpus.d_pin();
    let mut m = Matrix::zeros(ids.len(), d);
    for (r, id) in ids.iter().enumerate() {
        let pin = corpus.pin(*id).expect("pin ids are validated before use");
        for (dst, src) in m.row_mut(r).iter_mut().zip(&pin.embedding) {
            *dst = *src as f64;
        }
    }
    m
}

/// Builds the scalar batch loss in `g`.
pub fn loss_graph(
    g: &mut Graph,
    model: &Model,
    corpus: &Corpus,
    config: &TrainConfig,
    batch: &Batch,
    trainable: bool,
) -> Result<Var> {
    let b = model.bind(g, trainable);
    let seqs: Vec<&EncodedSequence> = batch.examples.iter().map(|e| &e.sequence).collect();
    let users = model.user_graph(g, &b, &seqs, batch.pair_rows.clone())?;

    let mut unique: Vec<u64> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    let mut index_of = |id: u64, unique: &mut Vec<u64>| {
        *slot.entry(id).or_insert_with(|| {
            unique.push(id);
            unique.len() - 1
        })
    };
    let pos_idx: Vec<usize> = batch.pair_pins.iter().map(|id| index_of(*id, &mut unique)).collect();
    let pool_idx: Vec<usize> = batch
        .pools
        .first()
        .map(|p| p.pin_ids.iter().map(|id| index_of(*id, &mut unique)).collect())
        .unwrap_or_default();
    let neg_idx: Vec<usize> = batch.bce_negatives.iter().map(|id| index_of(*id, &mut unique)).collect();
    let pins = model.pin_graph(g, &b, pin_matrix(corpus, &unique))?;
    let positives = g.gather_rows(pins, pos_idx);
    let tau = b.var(model.tau_slot());

    let weights = pair_weights(&batch.pair_users, &batch.pair_base_weights, config.weighting);
    let pool = match config.loss {
        LossKind::SampledSoftmax => Some(g.gather_rows(pins, pool_idx)),
        LossKind::BinaryCrossEntropy => None,
    };
    let negatives = match config.loss {
        LossKind::BinaryCrossEntropy => Some(g.gather_rows(pins, neg_idx)),
        LossKind::SampledSoftmax => None,
    };
    let single = batch.workers.len() == 1;
    let mut total: Option<Var> = None;
    for (w, range) in batch.workers.iter().enumerate() {
        if range.is_empty() {
            continue;
        }
        let rows: Vec<usize> = range.clone().collect();
        let (u, p) = if single {
            (users, positives)
        } else {
            (g.gather_rows(users, rows.clone()), g.gather_rows(positives, rows.clone()))
        };
        let wts = weights[range.clone()].to_vec();
        let loss = match config.loss {
            LossKind::SampledSoftmax => {
                let pool_def = &batch.pools[w];
                let sb = SoftmaxBatch {
                    pos_logq: batch.pos_logq[range.clone()].to_vec(),
                    pool_logq: pool_def.logq.clone(),
                    mask: pool_def.mask.clone(),
                    weights: wts,
                    spc: config.spc,
                };
                g.sampled_softmax(u, p, pool.expect("softmax pool"), tau, sb)
            }
            LossKind::BinaryCrossEntropy => {
                let negs = negatives.expect("bce negatives");
                let n = if single { negs } else { g.gather_rows(negs, rows) };
                g.bce(u, p, n, tau, wts)
            }
        };
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss),
        });
    }
    total.ok_or_else(|| Error::Precondition("batch has no pairs".into()))
}

#[derive(Clone, Debug, PartialEq)]
struct Adam {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    fn new(params: &[Matrix]) -> Adam {
        Adam {
            m: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            v: params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
            t: 0,
        }
    }

    fn update(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>], c: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *x -= c.learning_rate * mh / (vh.sqrt() + c.epsilon);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub tau: f64,
    pub pairs: usize,
    pub wall_ms: f64,
}

pub struct Trainer<'a> {
    config: TrainConfig,
    corpus: &'a Corpus,
    timelines: &'a [UserTimeline],
    eligible: Vec<usize>,
    model: Model,
    adam: Adam,
    sketch: CountMinSketch,
    step: u64,
    losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: Model, config: TrainConfig, corpus: &'a Corpus, timelines: &'a [UserTimeline]) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::config("training needs a non-empty corpus"));
        }
        if corpus.d_pin() != model.config().d_pin {
            return Err(Error::shape(format!(
                "corpus pins have dimension {}, model expects {}",
                corpus.d_pin(),
                model.config().d_pin
            )));
        }
        let m = model.config().max_len();
        let eligible: Vec<usize> = timelines
            .iter()
            .enumerate()
            .filter(|(_, t)| !eligible_ends(&t.actions, m, &config.objective, corpus).is_empty())
            .map(|(i, _)| i)
            .collect();
        if eligible.is_empty() {
            return Err(Error::Precondition("no timeline yields a training example".into()));
        }
        let adam = Adam::new(model.params());
        let sketch = CountMinSketch::new(config.cms_width, config.cms_depth, rng::mix(config.seed, &[tag::CMS]));
        Ok(Trainer {
            config,
            corpus,
            timelines,
            eligible,
            model,
            adam,
            sketch,
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn sketch(&self) -> &CountMinSketch {
        &self.sketch
    }

    /// Samples the batch of the current step and updates the sketch with its
    /// positives.
    pub fn prepare(&mut self) -> Result<Batch> {
        let c = &self.config;
        let step = self.step;
        let mut pick = rng::stream(c.seed, &[tag::STEP, step]);
        let n = c.batch_size.min(self.eligible.len());
        let mut users: Vec<usize> = sample(&mut pick, self.eligible.len(), n)
            .into_iter()
            .map(|i| self.eligible[i])
            .collect();
        users.sort_unstable();

        let m = self.model.config().max_len();
        let enc = &self.model.config().encoder;
        let mut per_user: Vec<Vec<TrainingExample>> = Vec::with_capacity(users.len());
        for &u in &users {
            let tl = &self.timelines[u];
            let mut r = rng::stream(c.seed, &[tag::SAMPLE, step, tl.user_id]);
            let ex = sample_training_examples(tl, enc, &c.objective, &c.sampling, self.corpus, &mut r)?;
            if !ex.is_empty() {
                per_user.push(ex);
            }
        }
        if per_user.is_empty() {
            return Err(Error::Precondition(format!("step {step} sampled no pairs")));
        }

        let w = c.workers;
        let chunk = per_user.len().div_ceil(w);
        let mut examples = Vec::new();
        let mut pair_rows = Vec::new();
        let mut pair_users = Vec::new();
        let mut pair_pins = Vec::new();
        let mut pair_base_weights = Vec::new();
        let mut workers = Vec::with_capacity(w);
        let mut shards: Vec<Vec<PositiveRef>> = Vec::with_capacity(w);
        let mut iter = per_user.into_iter();
        for _ in 0..w {
            let start = pair_rows.len();
            let mut shard = Vec::new();
            for ex_list in iter.by_ref().take(chunk) {
                for ex in ex_list {
                    let e = examples.len();
                    for p in &ex.pairs {
                        pair_rows.push(e * m + p.position);
                        pair_users.push(ex.user_id);
                        pair_pins.push(p.pin_id);
                        pair_base_weights.push(p.weight);
                        shard.push(PositiveRef {
                            user_id: ex.user_id,
                            pin_id: p.pin_id,
                        });
                    }
                    examples.push(ex);
                }
            }
            workers.push(start..pair_rows.len());
            shards.push(shard);
        }

        for id in &pair_pins {
            self.sketch.update(*id);
        }
        let corpus_size = self.corpus.len();
        let mut neg_rng = rng::stream(c.seed, &[tag::NEGATIVES, step]);
        let (pools, bce_negatives) = match c.loss {
            LossKind::SampledSoftmax => (
                gather_negatives(&shards, c.pool_spec(), corpus_size, &self.sketch, &mut neg_rng)?,
                Vec::new(),
            ),
            LossKind::BinaryCrossEntropy => (
                Vec::new(),
                (0..pair_pins.len())
                    .map(|_| neg_rng.random_range(0..corpus_size as u64))
                    .collect(),
            ),
        };
        let pos_logq = pair_pins
            .iter()
            .map(|id| positive_logq(*id, c.negatives, &self.sketch, corpus_size, c.n_random))
            .collect();
        Ok(Batch {
            examples,
            pair_rows,
            pair_users,
            pair_pins,
            pair_base_weights,
            workers,
            pools,
            pos_logq,
            bce_negatives,
        })
    }

    /// Loss of `batch` under the current parameters, without updating.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let out = loss_graph(&mut g, &self.model, self.corpus, &self.config, batch, false)?;
        Ok(g.value(out).get(0, 0))
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<StepStats> {
        let start = Instant::now();
        let batch = self.prepare()?;
        let mut g = Graph::new();
        let out = loss_graph(&mut g, &self.model, self.corpus, &self.config, &batch, true)?;
        let loss = g.value(out).get(0, 0);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss} at step {}", self.step)));
        }
        let grads = g.backward(out, self.model.n_params()).into_vec();
        drop(g);
        if let Some(bad) = grads
            .iter()
            .enumerate()
            .find(|(_, gr)| gr.as_ref().is_some_and(|m| !m.is_finite()))
        {
            let name = self.model.param_names().nth(bad.0).unwrap_or("?").to_string();
            return Err(Error::Numeric(format!("non-finite gradient for {name} at step {}", self.step)));
        }
        let opt = self.config.optimizer.clone();
        self.adam.update(self.model.params_mut(), &grads, &opt);
        self.model.clamp_tau();
        self.losses.push(loss);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            tau: self.model.tau(),
            pairs: batch.pair_count(),
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Steps until `config.steps`, appending to the metrics log and saving
    /// at the configured cadence. On a numeric failure the current model is
    /// written to `diagnostic.sqm` in the output directory.
    pub fn run(&mut self, out: Option<&OutputDir>, mut on_step: impl FnMut(&StepStats)) -> Result<()> {
        while self.step < self.config.steps {
            let stats = match self.step() {
                Ok(s) => s,
                Err(e @ Error::Numeric(_)) => {
                    if let Some(o) = out {
                        self.model.save(&o.path("diagnostic.sqm"))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(o) = out {
                o.append_metrics(&stats)?;
                if self.config.checkpoint_every > 0 && stats.step % self.config.checkpoint_every == 0 {
                    self.save(o)?;
                }
            }
            on_step(&stats);
        }
        if let Some(o) = out {
            self.save(o)?;
        }
        Ok(())
    }

    fn save(&self, out: &OutputDir) -> Result<()> {
        self.model.save(&out.model_path())?;
        self.save_state(&out.state_path())
    }

    /// Writes everything needed to continue bit-exactly: `f64` parameters,
    /// optimizer moments, step counter, sketch and loss history.
    pub fn save_state(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new(BufWriter::new(File::create(path)?));
        w.bytes(STATE_MAGIC)?;
        w.u32(STATE_VERSION)?;
        w.str(&serde_json::to_string(&self.config).map_err(|e| Error::config(e.to_string()))?)?;
        w.str(&serde_json::to_string(self.model.config()).map_err(|e| Error::config(e.to_string()))?)?;
        w.u64(self.step)?;
        w.u64(self.adam.t)?;
        let params = self.model.params();
        w.u32(params.len() as u32)?;
        for i in 0..params.len() {
            w.u32(params[i].rows() as u32)?;
            w.u32(params[i].cols() as u32)?;
            w.f64s(params[i].data())?;
            w.f64s(self.adam.m[i].data())?;
            w.f64s(self.adam.v[i].data())?;
        }
        let s = &self.sketch;
        w.u32(s.width() as u32)?;
        w.u32(s.depth() as u32)?;
        for seed in s.seeds() {
            w.u64(*seed)?;
        }
        for c in s.counters() {
            w.u64(*c)?;
        }
        w.u64(s.total())?;
        w.u64(self.losses.len() as u64)?;
        w.f64s(&self.losses)?;
        w.finish()?;
        Ok(())
    }

    /// Restores a trainer from [`Trainer::save_state`]. `steps` overrides the
    /// stored target step count when given.
    pub fn resume(path: &Path, corpus: &'a Corpus, timelines: &'a [UserTimeline], steps: Option<u64>) -> Result<Self> {
        let mut r = Reader::new(BufReader::new(File::open(path)?));
        r.magic(STATE_MAGIC)?;
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::VersionMismatch {
                expected: STATE_VERSION,
                found: version,
            });
        }
        let tc = r.str(1 << 20)?;
        let mc = r.str(1 << 20)?;
        let mut config: TrainConfig = serde_json::from_str(&tc).map_err(|e| r.error(format!("train config: {e}")))?;
        let model_config: ModelConfig =
            serde_json::from_str(&mc).map_err(|e| r.error(format!("model config: {e}")))?;
        if let Some(s) = steps {
            config.steps = s;
        }
        let model = Model::new(model_config, 0)?;
        let mut t = Trainer::new(model, config, corpus, timelines)?;
        t.step = r.u64()?;
        t.adam.t = r.u64()?;
        let n = r.u32()? as usize;
        if n != t.model.n_params() {
            return Err(r.error(format!("{n} tensors, model has {}", t.model.n_params())));
        }
        let mut params = Vec::with_capacity(n);
        for i in 0..n {
            r.set_record(Some(i as u64));
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            params.push(Matrix::from_vec(rows, cols, r.f64s(rows * cols)?));
            t.adam.m[i] = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?);
            t.adam.v[i] = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?);
        }
        r.set_record(None);
        t.model.set_params(params)?;
        let width = r.u32()? as usize;
        let depth = r.u32()? as usize;
        let seeds = (0..depth).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let counters = (0..width * depth).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let total = r.u64()?;
        t.sketch = CountMinSketch::from_parts(width, depth, seeds, counters, total)
            .ok_or_else(|| r.error("inconsistent count-min sketch"))?;
        let n_losses = r.u64()? as usize;
        t.losses = r.f64s(n_losses)?;
        r.expect_eof()?;
        Ok(t)
    }
}

/// Output directory layout of a training run. The model and metrics files
/// may be redirected elsewhere.
#[derive(Clone, Debug)]
pub struct OutputDir {
    root: PathBuf,
    model: PathBuf,
    metrics: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(OutputDir {
            model: root.join("model.sqm"),
            metrics: root.join("metrics.csv"),
            root,
        })
    }

    pub fn with_model_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.model = path.into();
        self
    }

    pub fn with_metrics_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.metrics = path.into();
        self
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone()
    }

    pub fn state_path(&self) -> PathBuf {
        self.path("state.sqs")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.metrics.clone()
    }

    fn append_metrics(&self, s: &StepStats) -> Result<()> {
        let path = self.metrics_path();
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "step,loss,tau,wall_ms")?;
        }
        writeln!(f, "{},{},{},{:.3}", s.step, s.loss, s.tau, s.wall_ms)?;
        Ok(())
    }
}

/// Relative error of one parameter tensor's analytic gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub relative_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }
}

/// `||a - n|| / max(||a|| + ||n||, 1e-6)`. The floor keeps gradients that
/// vanish identically (such as attention key biases, which shift every logit
/// of a query equally) from being judged on finite-difference round-off.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / (analytic.frobenius_norm() + numeric.frobenius_norm()).max(1e-6)
}

/// Compares the analytic gradient of the first batch's loss with central
/// finite differences (`h = 1e-5`) for every parameter tensor.
pub fn grad_check(trainer: &mut Trainer<'_>) -> Result<GradCheckReport> {
    const H: f64 = 1e-5;
    let batch = trainer.prepare()?;
    let corpus = trainer.corpus;
    let config = trainer.config.clone();
    let mut model = trainer.model.clone();
    let mut g = Graph::new();
    let out = loss_graph(&mut g, &model, corpus, &config, &batch, true)?;
    let grads = g.backward(out, model.n_params()).into_vec();
    drop(g);
    let eval = |m: &Model| -> Result<f64> {
        let mut g = Graph::new();
        let out = loss_graph(&mut g, m, corpus, &config, &batch, false)?;
        Ok(g.value(out).get(0, 0))
    };
    let names: Vec<String> = model.param_names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for (slot, name) in names.into_iter().enumerate() {
        let (rows, cols) = model.params()[slot].shape();
        let mut numeric = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = model.params()[slot].data()[i];
            model.params_mut()[slot].data_mut()[i] = orig + H;
            let plus = eval(&model)?;
            model.params_mut()[slot].data_mut()[i] = orig - H;
            let minus = eval(&model)?;
            model.params_mut()[slot].data_mut()[i] = orig;
            numeric.data_mut()[i] = (plus - minus) / (2.0 * H);
        }
        let analytic = grads[slot].clone().unwrap_or_else(|| Matrix::zeros(rows, cols));
        entries.push(GradCheckEntry {
            name,
            relative_error: relative_error(&analytic, &numeric),
            analytic_norm: analytic.frobenius_norm(),
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_corpus, synth_timelines, CorpusConfig};
    use crate::encoding::EncoderConfig;
    use crate::model::TransformerConfig;
    use crate::objectives::ObjectiveKind;

    fn setup() -> (Corpus, Vec<UserTimeline>) {
        let cc = CorpusConfig {
            n_pins: 300,
            n_users: 24,
            n_interests: 8,
            d_pin: 8,
            timeline_span_days: 30,
            ..CorpusConfig::default()
        };
        let corpus = synth_corpus(&cc).unwrap();
        let tls = synth_timelines(&cc, &corpus).unwrap();
        (corpus, tls)
    }

    fn tiny_model(pe: bool) -> Model {
        Model::new(
            ModelConfig {
                d_pin: 8,
                encoder: EncoderConfig {
                    max_len: 4,
                    relative_period_count: 4,
                    ..EncoderConfig::default()
                },
                transformer: TransformerConfig {
                    layers: 1,
                    hidden: 8,
                    heads: 2,
                    output_dim: 4,
                    pin_hidden: 8,
                    positional_encoding: pe,
                    ..TransformerConfig::default()
                },
            },
            3,
        )
        .unwrap()
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            n_random: 16,
            steps: 6,
            objective: ObjectiveConfig {
                dense_positions: 2,
                max_positives_per_sequence: 3,
                ..ObjectiveConfig::default()
            },
            sampling: SamplingConfig {
                sequence_fraction: 1.0,
                max_sequences_per_user: 1,
            },
            cms_width: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (corpus, tls) = setup();
        let run = || {
            let mut t = Trainer::new(tiny_model(true), tiny_train(), &corpus, &tls).unwrap();
            t.run(None, |_| {}).unwrap();
            (t.losses().to_vec(), t.model().params().to_vec())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (corpus, tls) = setup();
        let mut full = Trainer::new(tiny_model(true), tiny_train(), &corpus, &tls).unwrap();
        full.run(None, |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            steps: 3,
            ..tiny_train()
        };
        let mut first = Trainer::new(tiny_model(true), cfg, &corpus, &tls).unwrap();
        first.run(None, |_| {}).unwrap();
        let state = dir.path().join("s.sqs");
        first.save_state(&state).unwrap();
        let mut second = Trainer::resume(&state, &corpus, &tls, Some(6)).unwrap();
        second.run(None, |_| {}).unwrap();
        assert_eq!(second.losses(), full.losses());
        assert_eq!(second.model().params(), full.model().params());
    }

    #[test]
    fn two_workers_match_one_on_the_first_step() {
        let (corpus, tls) = setup();
        let one = Trainer::new(tiny_model(true), tiny_train(), &corpus, &tls);
        let mut one = one.unwrap();
        let b1 = one.prepare().unwrap();
        let l1 = one.evaluate_loss(&b1).unwrap();
        let cfg = TrainConfig {
            workers: 2,
            ..tiny_train()
        };
        let mut two = Trainer::new(tiny_model(true), cfg, &corpus, &tls).unwrap();
        let b2 = two.prepare().unwrap();
        assert_eq!(b2.workers.len(), 2);
        assert_eq!(b1.pools[0].pin_ids, b2.pools[1].pin_ids);
        let l2 = two.evaluate_loss(&b2).unwrap();
        assert!((l1 - l2).abs() < 1e-12, "{l1} vs {l2}");
    }

    #[test]
    fn tau_stays_above_floor() {
        let (corpus, tls) = setup();
        let mut model = tiny_model(true);
        let slot = model.tau_slot();
        model.params_mut()[slot] = Matrix::scalar(0.01);
        let cfg = TrainConfig {
            optimizer: OptimizerConfig {
                learning_rate: 0.05,
                ..OptimizerConfig::default()
            },
            ..tiny_train()
        };
        let mut t = Trainer::new(model, cfg, &corpus, &tls).unwrap();
        t.run(None, |s| assert!(s.tau >= 0.01)).unwrap();
    }

    #[test]
    fn gradients_match_finite_differences_across_variants() {
        let (corpus, tls) = setup();
        for kind in ObjectiveKind::ALL {
            for mode in [NegativeMode::InBatch, NegativeMode::Random, NegativeMode::Mixed] {
                for spc in [false, true] {
                    let cfg = TrainConfig {
                        objective: ObjectiveConfig {
                            kind,
                            ..tiny_train().objective
                        },
                        negatives: mode,
                        spc,
                        batch_size: 3,
                        n_random: 6,
                        ..tiny_train()
                    };
                    let mut t = Trainer::new(tiny_model(true), cfg, &corpus, &tls).unwrap();
                    let report = grad_check(&mut t).unwrap();
                    assert!(
                        report.max_relative_error() < 1e-4,
                        "{kind:?} {mode:?} spc={spc}: {:?}",
                        report.entries.iter().max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
                    );
                }
            }
        }
    }

    #[test]
    fn disabled_positional_encoding_has_no_tensor() {
        let (corpus, tls) = setup();
        let mut t = Trainer::new(tiny_model(false), tiny_train(), &corpus, &tls).unwrap();
        assert!(t.model().param_names().all(|n| n != "input.pe"));
        let report = grad_check(&mut t).unwrap();
        assert!(report.max_relative_error() < 1e-4);
    }

    #[test]
    fn logistic_baseline_trains() {
        let (corpus, tls) = setup();
        let cfg = TrainConfig {
            loss: LossKind::BinaryCrossEntropy,
            ..tiny_train()
        };
        let mut t = Trainer::new(tiny_model(true), cfg, &corpus, &tls).unwrap();
        let report = grad_check(&mut t).unwrap();
        assert!(report.max_relative_error() < 1e-4);
        t.run(None, |_| {}).unwrap();
        assert!(t.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn metrics_log_and_checkpoints_are_written() {
        let (corpus, tls) = setup();
        let dir = tempfile::tempdir().unwrap();
        let out = OutputDir::create(dir.path().join("run")).unwrap();
        let cfg = TrainConfig {
            checkpoint_every: 2,
            ..tiny_train()
        };
        let mut t = Trainer::new(tiny_model(true), cfg, &corpus, &tls).unwrap();
        t.run(Some(&out), |_| {}).unwrap();
        let csv = std::fs::read_to_string(out.metrics_path()).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "step,loss,tau,wall_ms");
        assert_eq!(lines.len(), 7);
        let back = Model::load(&out.model_path()).unwrap();
        assert_eq!(back.version(), t.model().version());
    }
}
