//! Comparison tables over finished runs, as CSV and a plain SVG bar chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::eval::{mean_stderr, Protocol};
use crate::experiment::RunRecord;
use crate::error::{Error, Result};
use crate::loss::NegativeMode;
use crate::objectives::ObjectiveKind;
use crate::trainer::LossKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Table {
    /// Training objectives and losses.
    Losses,
    /// Negative pools with and without sample probability correction.
    Negatives,
    /// Input sequence length.
    Seqlen,
    /// Output embedding dimension.
    Dims,
    /// Depth and width.
    Arch,
}

impl Table {
    pub const ALL: [Table; 5] = [Table::Losses, Table::Negatives, Table::Seqlen, Table::Dims, Table::Arch];

    pub fn name(self) -> &'static str {
        match self {
            Table::Losses => "losses",
            Table::Negatives => "negatives",
            Table::Seqlen => "seqlen",
            Table::Dims => "dims",
            Table::Arch => "arch",
        }
    }

    pub fn parse(s: &str) -> Option<Table> {
        Table::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Sort key and row label for a run.
    fn key(self, run: &RunRecord) -> ((u64, u64, u64), String) {
        let c = &run.config;
        match self {
            Table::Losses => {
                let kind = c.train.objective.kind;
                let k = ObjectiveKind::ALL.iter().position(|o| *o == kind).unwrap_or(0) as u64;
                let mut label = kind.name().to_string();
                if matches!(kind, ObjectiveKind::AllAction | ObjectiveKind::DenseAllAction) {
                    label.push_str(&format!(" {}d", c.train.objective.window_days));
                }
                let bce = c.train.loss == LossKind::BinaryCrossEntropy;
                if bce {
                    label.push_str(" bce");
                }
                if kind == ObjectiveKind::Sasrec && !c.train.objective.e1_equal_weight {
                    label.push_str(" unweighted");
                }
                ((k, c.train.objective.window_days as u64, bce as u64), label)
            }
            Table::Negatives => {
                let pool = [NegativeMode::Random, NegativeMode::InBatch, NegativeMode::Mixed]
                    .iter()
                    .position(|m| *m == c.train.negatives)
                    .unwrap_or(0) as u64;
                let spc = if c.train.spc { "spc" } else { "no_spc" };
                ((pool, c.train.spc as u64, 0), format!("{} {spc}", c.train.negatives.name()))
            }
            Table::Seqlen => {
                let m = c.model.encoder.max_len as u64;
                ((m, 0, 0), format!("M={m}"))
            }
            Table::Dims => {
                let d = c.model.transformer.output_dim as u64;
                ((d, 0, 0), format!("D={d}"))
            }
            Table::Arch => {
                let t = &c.model.transformer;
                ((t.layers as u64, t.hidden as u64, 0), format!("L={} H={}", t.layers, t.hidden))
            }
        }
    }
}

/// One table row: runs sharing a label, typically differing only in seed.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub label: String,
    pub runs: usize,
    pub recall: f64,
    /// Standard error across runs.
    pub recall_se: f64,
    pub coverage: f64,
    pub entropy: f64,
    pub config_hashes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub table: Table,
    pub protocol: Protocol,
    pub recall_k: usize,
    pub rows: Vec<ReportRow>,
}

pub fn build_report(table: Table, runs: &[RunRecord], protocol: Protocol, recall_k: usize) -> Result<Report> {
    let mut groups: BTreeMap<((u64, u64, u64), String), Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry(table.key(r)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((_, label), members) in groups {
        let mut recalls = Vec::new();
        let mut cov = Vec::new();
        let mut ent = Vec::new();
        for r in &members {
            let p = r.eval.protocol(protocol).ok_or_else(|| {
                Error::Config(format!("run {} has no {} evaluation", r.config_hash, protocol.name()))
            })?;
            recalls.push(p.recall_at(recall_k).ok_or_else(|| {
                Error::Config(format!("run {} has no recall@{recall_k}", r.config_hash))
            })?);
            cov.push(p.p90_coverage);
            ent.push(p.interest_entropy);
        }
        let (recall, recall_se) = mean_stderr(&recalls);
        rows.push(ReportRow {
            label,
            runs: members.len(),
            recall,
            recall_se,
            coverage: mean_stderr(&cov).0,
            entropy: mean_stderr(&ent).0,
            config_hashes: members.iter().map(|r| r.config_hash.clone()).collect(),
        });
    }
    Ok(Report {
        table,
        protocol,
        recall_k,
        rows,
    })
}

impl Report {
    pub fn to_csv(&self) -> String {
        let k = self.recall_k;
        let mut s = format!("{},runs,recall@{k},recall@{k}_se,p90_coverage,interest_entropy,config_hashes\n", self.table.name());
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.label,
                r.runs,
                r.recall,
                r.recall_se,
                r.coverage,
                r.entropy,
                r.config_hashes.join(";")
            );
        }
        s
    }

    /// Bar chart of recall per row with one-standard-error whiskers.
    pub fn to_svg(&self) -> String {
        let title = format!("{}: recall@{} ({})", self.table.name(), self.recall_k, self.protocol.name());
        let values: Vec<(String, f64, f64)> = self.rows.iter().map(|r| (r.label.clone(), r.recall, r.recall_se)).collect();
        bar_chart(&title, &values)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// `(label, value, error)` bars on a zero-based axis.
pub fn bar_chart(title: &str, bars: &[(String, f64, f64)]) -> String {
    let bar_w = 60.0;
    let gap = 30.0;
    let left = 60.0;
    let top = 40.0;
    let plot_h = 240.0;
    let width = left + gap + bars.len() as f64 * (bar_w + gap);
    let height = top + plot_h + 70.0;
    let max = bars
        .iter()
        .map(|(_, v, e)| v + e)
        .fold(0.0_f64, f64::max)
        .max(1e-9)
        * 1.1;
    let y = |v: f64| top + plot_h * (1.0 - v / max);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#,
        top + plot_h
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{0:.1}" x2="{width:.1}" y2="{0:.1}" stroke="black"/>"#,
        top + plot_h
    );
    for i in 0..=4 {
        let v = max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    for (i, (label, v, e)) in bars.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{:.1}" width="{bar_w}" height="{:.1}" fill="#4a7ab5"/>"##,
            y(*v),
            top + plot_h - y(*v)
        );
        if *e > 0.0 {
            let cx = x + bar_w / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                y(v + e),
                y((v - e).max(0.0))
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            x + bar_w / 2.0,
            top + plot_h + 16.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.4}</text>"#,
            x + bar_w / 2.0,
            y(*v) - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}
