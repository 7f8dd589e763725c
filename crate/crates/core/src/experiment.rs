//! End-to-end runs: synthesize, split, train, evaluate, record.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{read_corpus, read_dataset, synth_corpus, synth_timelines, write_corpus, write_dataset, Corpus, UserTimeline};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::model::Model;
use crate::trainer::{OutputDir, Trainer};

pub const CORPUS_FILE: &str = "corpus.sqc";
pub const TRAIN_FILE: &str = "train.sqr";
pub const EVAL_FILE: &str = "eval.sqr";
pub const SPLIT_FILE: &str = "split.json";
pub const RUN_FILE: &str = "run.json";

/// Corpus plus disjoint train and eval users.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub corpus: Corpus,
    /// Truncated at `eval_start`.
    pub train: Vec<UserTimeline>,
    /// Full timelines.
    pub eval: Vec<UserTimeline>,
    pub eval_start: i64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SplitInfo {
    eval_start: i64,
    config_hash: String,
}

/// The highest-id `ceil(fraction * n)` users are held out.
pub fn split_users(timelines: Vec<UserTimeline>, fraction: f64, eval_start: i64) -> (Vec<UserTimeline>, Vec<UserTimeline>) {
    let mut timelines = timelines;
    timelines.sort_by_key(|t| t.user_id);
    let n_eval = ((timelines.len() as f64 * fraction).ceil() as usize).min(timelines.len());
    let eval = timelines.split_off(timelines.len() - n_eval);
    let train = timelines.iter().map(|t| t.truncated(eval_start)).collect();
    (train, eval)
}

pub fn synthesize(config: &ExperimentConfig) -> Result<Dataset> {
    let corpus = synth_corpus(&config.corpus)?;
    let timelines = synth_timelines(&config.corpus, &corpus)?;
    let eval_start = config.eval_start();
    let (train, eval) = split_users(timelines, config.split.eval_user_fraction, eval_start);
    Ok(Dataset {
        corpus,
        train,
        eval,
        eval_start,
    })
}

pub fn save_dataset(dir: &Path, data: &Dataset, config: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_corpus(&dir.join(CORPUS_FILE), &data.corpus)?;
    write_dataset(&dir.join(TRAIN_FILE), &data.train)?;
    write_dataset(&dir.join(EVAL_FILE), &data.eval)?;
    let info = SplitInfo {
        eval_start: data.eval_start,
        config_hash: config.hash(),
    };
    std::fs::write(dir.join(SPLIT_FILE), serde_json::to_string_pretty(&info).expect("serializes"))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(SPLIT_FILE))?;
    let info: SplitInfo = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{SPLIT_FILE}: {e}")))?;
    Ok(Dataset {
        corpus: read_corpus(&dir.join(CORPUS_FILE))?,
        train: read_dataset(&dir.join(TRAIN_FILE))?,
        eval: read_dataset(&dir.join(EVAL_FILE))?,
        eval_start: info.eval_start,
    })
}

/// Reads the eval start time stored next to a dataset file.
pub fn eval_start_near(dataset: &Path) -> Result<i64> {
    let dir = dataset.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(dir.join(SPLIT_FILE))?;
    let info: SplitInfo = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{SPLIT_FILE}: {e}")))?;
    Ok(info.eval_start)
}

/// Trains a fresh model; returns it with the per-step losses.
pub fn train_model(config: &ExperimentConfig, data: &Dataset, out: Option<&OutputDir>) -> Result<(Model, Vec<f64>)> {
    let model = Model::new(config.model.clone(), config.train.seed)?;
    let mut trainer = Trainer::new(model, config.train.clone(), &data.corpus, &data.train)?;
    trainer.run(out, |_| {})?;
    let losses = trainer.losses().to_vec();
    Ok((trainer.into_model(), losses))
}

/// Everything a report needs from one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub name: String,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub eval: EvalReport,
}

fn window_mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Synthesizes, trains and evaluates. With `dir`, writes the checkpoint,
/// metrics and `run.json` there.
pub fn run_experiment(config: &ExperimentConfig, dir: Option<&Path>) -> Result<RunRecord> {
    config.validate()?;
    let data = synthesize(config)?;
    let out = dir.map(OutputDir::create).transpose()?;
    if let Some(o) = &out {
        // a fresh metrics log per run
        let _ = std::fs::remove_file(o.metrics_path());
    }
    let (model, losses) = train_model(config, &data, out.as_ref())?;
    let eval = evaluate(&model, &data.corpus, &data.eval, data.eval_start, &config.eval)?;
    let w = 20.min(losses.len());
    let record = RunRecord {
        name: config.name.clone(),
        config_hash: config.hash(),
        config: config.clone(),
        steps: losses.len() as u64,
        initial_loss: window_mean(&losses[..w]),
        final_loss: window_mean(&losses[losses.len() - w..]),
        eval,
    };
    if let Some(d) = dir {
        std::fs::write(d.join(RUN_FILE), serde_json::to_string_pretty(&record).expect("serializes"))?;
    }
    Ok(record)
}

fn collect_runs(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_runs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == RUN_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Every `run.json` under `dir`, in path order.
pub fn read_runs(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths = Vec::new();
    collect_runs(dir, &mut paths)?;
    paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_disjoint_and_truncated() {
        let mut c = ExperimentConfig::default();
        c.corpus.n_users = 11;
        c.corpus.n_pins = 300;
        c.corpus.n_interests = 10;
        c.corpus.timeline_span_days = 20;
        c.eval.horizon_days = 5;
        let data = synthesize(&c).unwrap();
        assert_eq!(data.eval.len(), 3);
        assert_eq!(data.train.len(), 8);
        let t = c.eval_start();
        assert!(data.train.iter().all(|u| u.actions.iter().all(|a| a.timestamp <= t)));
        let max_train = data.train.iter().map(|u| u.user_id).max().unwrap();
        assert!(data.eval.iter().all(|u| u.user_id > max_train));

        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data, &c).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), data);
        assert_eq!(eval_start_near(&dir.path().join(EVAL_FILE)).unwrap(), t);
    }
}
