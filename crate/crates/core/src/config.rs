//! The single TOML document describing an experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, EPOCH_START, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::eval::{config_hash, EvalConfig};
use crate::model::ModelConfig;
use crate::serve::HnswConfig;
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "SEQREC_SEED";

/// Which users are held out for evaluation and when evaluation starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub eval_user_fraction: f64,
    /// Days after the synthetic epoch; defaults to the span minus the eval
    /// horizon so the horizon fits.
    pub eval_start_day: Option<u32>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            eval_user_fraction: 0.2,
            eval_start_day: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    /// Copied into every component seed.
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitConfig,
    pub index: HnswConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = ExperimentConfig {
            name: "default".into(),
            seed: 0,
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            split: SplitConfig::default(),
            index: HnswConfig::default(),
        };
        c.set_seed(0);
        c
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key.path=value` overrides. Values are
    /// read as TOML literals, falling back to plain strings.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        for o in overrides {
            set_path(&mut doc, o)?;
        }
        let mut c: ExperimentConfig = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    /// Reads and validates a config file with overrides, then applies
    /// `SEQREC_SEED`.
    pub fn load_with(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = ExperimentConfig::from_toml_with(&text, overrides)?;
        c.apply_env()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::load_with(path, &[])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self.index.seed = seed;
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}")))?;
            self.set_seed(seed);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.index.validate()?;
        if self.model.d_pin != self.corpus.d_pin {
            return Err(Error::config(format!(
                "model.d_pin = {} but corpus.d_pin = {}",
                self.model.d_pin, self.corpus.d_pin
            )));
        }
        let f = self.split.eval_user_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::config("split.eval_user_fraction must be in (0, 1)"));
        }
        if self.eval_start_day() == 0 || self.eval_start_day() > self.corpus.timeline_span_days {
            return Err(Error::config("evaluation must start inside the timeline span"));
        }
        Ok(())
    }

    pub fn eval_start_day(&self) -> u32 {
        self.split
            .eval_start_day
            .unwrap_or_else(|| self.corpus.timeline_span_days.saturating_sub(self.eval.horizon_days))
    }

    /// Unix time at which evaluation starts (a synthetic UTC midnight).
    pub fn eval_start(&self) -> i64 {
        EPOCH_START + self.eval_start_day() as i64 * SECONDS_PER_DAY
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

fn set_path(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key}: {part} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("name = \"x\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = ExperimentConfig::from_toml("[train]\nstepz = 3\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
    }

    #[test]
    fn partial_documents_fill_defaults_and_propagate_seed() {
        let c = ExperimentConfig::from_toml("seed = 9\n[train]\nsteps = 5\n").unwrap();
        assert_eq!(c.train.steps, 5);
        assert_eq!((c.corpus.seed, c.train.seed, c.eval.seed, c.index.seed), (9, 9, 9, 9));
        assert_ne!(c.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let c = ExperimentConfig::from_toml_with(
            "[train]\nsteps = 5\n",
            &["train.steps=7".into(), "name=quick".into(), "train.objective.kind=\"sasrec\"".into()],
        )
        .unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.name, "quick");
        assert_eq!(c.train.objective.kind, crate::objectives::ObjectiveKind::Sasrec);
        assert!(ExperimentConfig::from_toml_with("", &["train.nope=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with("", &["no_equals".into()]).is_err());
    }

    #[test]
    fn mismatched_dimensions_fail_validation() {
        let err = ExperimentConfig::from_toml("[corpus]\nd_pin = 16\n").unwrap_err();
        assert!(err.to_string().contains("d_pin"));
    }
}
