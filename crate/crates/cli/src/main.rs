use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqrec::config::ExperimentConfig;
use seqrec::corpus::{read_corpus, read_dataset, EPOCH_START, SECONDS_PER_DAY};
use seqrec::eval::{evaluate, EvalConfig, Protocol, ProtocolReport};
use seqrec::experiment::{
    eval_start_near, load_dataset, run_experiment, save_dataset, synthesize, read_runs, Dataset, CORPUS_FILE,
};
use seqrec::model::Model;
use seqrec::report::{build_report, Table};
use seqrec::serve::{incremental_infer, EmbeddingStore, HnswConfig, HnswIndex};
use seqrec::trainer::{OutputDir, Trainer};
use seqrec::Error;

#[derive(Parser)]
#[command(name = "seqrec", version, about = "Train, evaluate and serve sequence-based user embeddings")]
struct Cli {
    /// Upper bound on worker threads inside a command.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> seqrec::Result<ExperimentConfig> {
        ExperimentConfig::load_with(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus and train/eval datasets.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint and metrics log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `synth`; synthesized in memory when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_ckpt: PathBuf,
        /// Defaults to `metrics.csv` next to the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on held-out users.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Eval timelines; `corpus.sqc` and `split.json` are looked up beside it.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Evaluation start (unix seconds); defaults to the stored split.
        #[arg(long)]
        start: Option<i64>,
        /// once, daily or realtime; repeatable.
        #[arg(long, value_delimiter = ',')]
        protocol: Vec<String>,
        #[arg(long)]
        index_size: Option<usize>,
        /// Optional config supplying the remaining eval settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report path; `.csv` writes the CSV table, anything else JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one day of incremental inference and merge into the store.
    Pipeline {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Previous store; an empty store when absent.
        #[arg(long)]
        store_in: Option<PathBuf>,
        #[arg(long)]
        store_out: PathBuf,
        /// Day boundary, in days after the synthetic epoch.
        #[arg(long)]
        day: u32,
        /// Where to list users that were active but could not be encoded.
        #[arg(long)]
        skip_log: Option<PathBuf>,
    },
    /// Build the pin retrieval index from a checkpoint.
    Index {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        m_links: usize,
        #[arg(long, default_value_t = 200)]
        ef_construction: usize,
        #[arg(long, default_value_t = 100)]
        ef_search: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Retrieve the nearest pins for users in an embedding store.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// When given, the index must have been built from this checkpoint.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Users to query; all users in the store when absent.
        #[arg(long, value_delimiter = ',')]
        user: Vec<u64>,
        #[arg(long)]
        k: usize,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate finished runs as CSV and SVG.
    Report {
        #[arg(long)]
        runs: PathBuf,
        /// losses, negatives, seqlen, dims or arch.
        #[arg(long)]
        table: String,
        #[arg(long, default_value = "once")]
        protocol: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Output prefix; `<runs>/report_<table>` when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Synthesize, train and evaluate in one go, writing `run.json`.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn corpus_path(explicit: &Option<PathBuf>, dataset: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| dataset.parent().unwrap_or(Path::new(".")).join(CORPUS_FILE))
}

fn parse_protocols(names: &[String]) -> seqrec::Result<Vec<Protocol>> {
    names
        .iter()
        .map(|n| Protocol::parse(n).ok_or_else(|| usage(format!("unknown protocol {n:?}"))))
        .collect()
}

fn recall_fields(p: &ProtocolReport) -> String {
    let mut ks: Vec<(usize, f64)> = p.recall.iter().filter_map(|(k, v)| Some((k.parse().ok()?, *v))).collect();
    ks.sort_by_key(|&(k, _)| k);
    ks.iter().map(|(k, v)| format!(" recall@{k}={v:.6}")).collect()
}

/// Fails early with the offending path instead of a bare OS error.
fn need(path: &Path) -> seqrec::Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Precondition(format!("{} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> seqrec::Result<()> {
    if cli.threads == 0 {
        return Err(usage("--threads must be at least 1"));
    }
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Synth { cfg, out } => {
            let config = cfg.load()?;
            let data = synthesize(&config)?;
            save_dataset(&out, &data, &config)?;
            writeln!(
                stdout,
                "synth pins={} train_users={} eval_users={} eval_start={} config_hash={}",
                data.corpus.len(),
                data.train.len(),
                data.eval.len(),
                data.eval_start,
                config.hash()
            )?;
        }
        Command::Train {
            cfg,
            data,
            out_ckpt,
            metrics,
        } => {
            let config = cfg.load()?;
            let dataset: Dataset = match &data {
                Some(d) => load_dataset(need(d)?)?,
                None => synthesize(&config)?,
            };
            let dir = out_ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let metrics = metrics.unwrap_or_else(|| dir.join("metrics.csv"));
            if metrics.exists() {
                std::fs::remove_file(&metrics)?;
            }
            let out = OutputDir::create(dir)?
                .with_model_path(&out_ckpt)
                .with_metrics_path(&metrics);
            let model = Model::new(config.model.clone(), config.train.seed)?;
            let mut trainer = Trainer::new(model, config.train.clone(), &dataset.corpus, &dataset.train)?;
            trainer.run(Some(&out), |_| {})?;
            let losses = trainer.losses();
            writeln!(
                stdout,
                "train steps={} final_loss={} tau={} model_version={} config_hash={}",
                losses.len(),
                losses.last().copied().unwrap_or(f64::NAN),
                trainer.model().tau(),
                trainer.model().version(),
                config.hash()
            )?;
        }
        Command::Eval {
            ckpt,
            dataset,
            corpus,
            start,
            protocol,
            index_size,
            config,
            out,
        } => {
            let model = Model::load(need(&ckpt)?)?;
            let corpus = read_corpus(need(&corpus_path(&corpus, &dataset))?)?;
            let timelines = read_dataset(need(&dataset)?)?;
            let start = match start {
                Some(s) => s,
                None => eval_start_near(&dataset)?,
            };
            let mut eval: EvalConfig = match &config {
                Some(p) => ExperimentConfig::load(p)?.eval,
                None => EvalConfig::default(),
            };
            if !protocol.is_empty() {
                eval.protocols = parse_protocols(&protocol)?;
            }
            if let Some(n) = index_size {
                eval.index_size = n;
            }
            eval.threads = cli.threads;
            let report = evaluate(&model, &corpus, &timelines, start, &eval)?;
            let text = if out.extension().is_some_and(|e| e == "csv") {
                report.to_csv()
            } else {
                serde_json::to_string_pretty(&report).expect("report serializes") + "\n"
            };
            std::fs::write(&out, text)?;
            for p in &report.protocols {
                write!(stdout, "eval protocol={} users={}{}", p.protocol.name(), p.users, recall_fields(p))?;
                writeln!(
                    stdout,
                    " p90_coverage@{}={:.6} interest_entropy@{}={:.6}",
                    p.coverage_k, p.p90_coverage, p.entropy_k, p.interest_entropy
                )?;
            }
        }
        Command::Pipeline {
            ckpt,
            dataset,
            corpus,
            store_in,
            store_out,
            day,
            skip_log,
        } => {
            let model = Model::load(need(&ckpt)?)?;
            let corpus = read_corpus(need(&corpus_path(&corpus, &dataset))?)?;
            let timelines = read_dataset(need(&dataset)?)?;
            let prev = match &store_in {
                Some(p) => EmbeddingStore::load(need(p)?)?,
                None => EmbeddingStore::new(model.config().transformer.output_dim),
            };
            let boundary = EPOCH_START + day as i64 * SECONDS_PER_DAY;
            let outcome = incremental_infer(&model, &corpus, &prev, &timelines, boundary)?;
            outcome.store.save(&store_out)?;
            if let Some(p) = skip_log {
                let lines: String = outcome.skipped.iter().map(|u| format!("{u}\n")).collect();
                std::fs::write(p, lines)?;
            }
            writeln!(
                stdout,
                "pipeline day={day} boundary={boundary} updated={} skipped={} users={}",
                outcome.updated.len(),
                outcome.skipped.len(),
                outcome.store.len()
            )?;
        }
        Command::Index {
            ckpt,
            corpus,
            out,
            m_links,
            ef_construction,
            ef_search,
            seed,
        } => {
            let model = Model::load(need(&ckpt)?)?;
            let corpus = read_corpus(need(&corpus)?)?;
            let config = HnswConfig {
                m_links,
                ef_construction,
                ef_search,
                seed,
            };
            let index = HnswIndex::build_for_model(&model, &corpus, config)?;
            index.save(&out)?;
            writeln!(stdout, "index pins={} model_version={}", index.len(), index.model_version)?;
        }
        Command::Query {
            index,
            store,
            ckpt,
            user,
            k,
            out,
        } => {
            if k == 0 {
                return Err(usage("--k must be at least 1"));
            }
            let index = HnswIndex::load(need(&index)?)?;
            if let Some(c) = ckpt {
                let version = Model::load(need(&c)?)?.version();
                if version != index.model_version {
                    return Err(Error::VersionMismatch {
                        expected: version,
                        found: index.model_version,
                    });
                }
            }
            let store = EmbeddingStore::load(need(&store)?)?;
            let users: Vec<u64> = if user.is_empty() {
                store.records.keys().copied().collect()
            } else {
                user
            };
            let mut csv = String::from("user_id,rank,pin_id,distance\n");
            for u in users {
                let rec = store
                    .get(u)
                    .ok_or_else(|| Error::Precondition(format!("user {u} has no stored embedding")))?;
                for (rank, (pin, d)) in index.query_record(rec, k)?.into_iter().enumerate() {
                    csv.push_str(&format!("{u},{},{pin},{d:.6}\n", rank + 1));
                }
            }
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => stdout.write_all(csv.as_bytes())?,
            }
        }
        Command::Report {
            runs,
            table,
            protocol,
            k,
            out,
        } => {
            let table = Table::parse(&table).ok_or_else(|| usage(format!("unknown table {table:?}")))?;
            let protocol = Protocol::parse(&protocol).ok_or_else(|| usage(format!("unknown protocol {protocol:?}")))?;
            let records = read_runs(need(&runs)?)?;
            if records.is_empty() {
                return Err(usage(format!("no run.json found under {}", runs.display())));
            }
            let report = build_report(table, &records, protocol, k)?;
            let prefix = out.unwrap_or_else(|| runs.join(format!("report_{}", table.name())));
            let csv = prefix.with_extension("csv");
            let svg = prefix.with_extension("svg");
            std::fs::write(&csv, report.to_csv())?;
            std::fs::write(&svg, report.to_svg())?;
            writeln!(
                stdout,
                "report table={} rows={} runs={} csv={} svg={}",
                table.name(),
                report.rows.len(),
                records.len(),
                csv.display(),
                svg.display()
            )?;
        }
        Command::Experiment { cfg, out } => {
            let mut config = cfg.load()?;
            config.eval.threads = cli.threads;
            let record = run_experiment(&config, Some(&out))?;
            for p in &record.eval.protocols {
                write!(stdout, "experiment name={} protocol={}{}", record.name, p.protocol.name(), recall_fields(p))?;
                writeln!(stdout, " p90_coverage={:.6} interest_entropy={:.6}", p.p90_coverage, p.interest_entropy)?;
            }
        }
    }
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("error kind=usage message=\"{}\"", one_line(&first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = match &e {
                Error::Config(_) => ("config", 2),
                Error::Decode { .. } => ("decode", 1),
                Error::Io(_) => ("io", 1),
                Error::VersionMismatch { .. } => ("version_mismatch", 1),
                Error::Numeric(_) => ("numeric", 1),
                Error::Precondition(_) => ("precondition", 1),
                Error::EmptySequence => ("empty_sequence", 1),
                Error::Shape(_) => ("shape", 1),
            };
            eprintln!("error kind={kind} message=\"{}\"", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
