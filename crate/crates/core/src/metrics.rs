//! Append-only run metrics: one tab-separated record per line with a
//! fixed column order and a header row. Absent values are written as
//! `-` so the files stay diff-able and trivially plottable.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 11] = [
    "run_id",
    "seed",
    "iteration",
    "phase",
    "loss",
    "eval_acc",
    "density",
    "score_mean",
    "score_max",
    "diag_kind",
    "diag_value",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Dense,
    Pruning,
    FineTune,
    Diagnose,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Dense => "dense",
            Phase::Pruning => "pruning",
            Phase::FineTune => "fine-tune",
            Phase::Diagnose => "diagnose",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "dense" => Ok(Phase::Dense),
            "pruning" => Ok(Phase::Pruning),
            "fine-tune" => Ok(Phase::FineTune),
            "diagnose" => Ok(Phase::Diagnose),
            other => Err(Error::InvalidArgument(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub seed: u64,
    pub iteration: usize,
    pub phase: Phase,
    pub loss: f64,
    pub eval_acc: Option<f64>,
    pub density: f64,
    pub score_mean: Option<f64>,
    pub score_max: Option<f64>,
    pub diag_kind: Option<String>,
    pub diag_value: Option<f64>,
}

fn opt_f64(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.17e}"),
        None => "-".into(),
    }
}

fn parse_opt_f64(tok: &str, line: usize) -> Result<Option<f64>> {
    if tok == "-" {
        return Ok(None);
    }
    tok.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        path: "<metrics>".into(),
        line,
        msg: format!("bad float {tok:?}"),
    })
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{:.17e}\t{}\t{:.17e}\t{}\t{}\t{}\t{}",
            self.run_id,
            self.seed,
            self.iteration,
            self.phase.name(),
            self.loss,
            opt_f64(self.eval_acc),
            self.density,
            opt_f64(self.score_mean),
            opt_f64(self.score_max),
            self.diag_kind.as_deref().unwrap_or("-"),
            opt_f64(self.diag_value),
        );
        s
    }

    pub fn from_line(line: &str, lineno: usize) -> Result<MetricsRecord> {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != COLUMNS.len() {
            return Err(Error::Parse {
                path: "<metrics>".into(),
                line: lineno,
                msg: format!("{} fields, expected {}", parts.len(), COLUMNS.len()),
            });
        }
        let bad = |what: &str| Error::Parse {
            path: "<metrics>".into(),
            line: lineno,
            msg: format!("bad {what}"),
        };
        Ok(MetricsRecord {
            run_id: parts[0].to_string(),
            seed: parts[1].parse().map_err(|_| bad("seed"))?,
            iteration: parts[2].parse().map_err(|_| bad("iteration"))?,
            phase: Phase::parse(parts[3])?,
            loss: parts[4].parse().map_err(|_| bad("loss"))?,
            eval_acc: parse_opt_f64(parts[5], lineno)?,
            density: parts[6].parse().map_err(|_| bad("density"))?,
            score_mean: parse_opt_f64(parts[7], lineno)?,
            score_max: parse_opt_f64(parts[8], lineno)?,
            diag_kind: if parts[9] == "-" {
                None
            } else {
                Some(parts[9].to_string())
            },
            diag_value: parse_opt_f64(parts[10], lineno)?,
        })
    }
}

/// Streaming writer that enforces the append-only, strictly-increasing
/// iteration contract within a run.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: String,
    last_iteration: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<MetricsWriter> {
        let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{}", COLUMNS.join("\t")).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(MetricsWriter {
            out,
            path: path.display().to_string(),
            last_iteration: None,
        })
    }

    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last_iteration {
            if rec.iteration <= last {
                return Err(Error::InvalidArgument(format!(
                    "metrics iteration {} not after {} (append-only contract)",
                    rec.iteration, last
                )));
            }
        }
        self.last_iteration = Some(rec.iteration);
        writeln!(self.out, "{}", rec.to_line()).map_err(|e| Error::io(self.path.clone(), e))?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(self.path.clone(), e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if i == 0 {
            if line != COLUMNS.join("\t") {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: 1,
                    msg: "bad metrics header".into(),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        records.push(MetricsRecord::from_line(&line, i + 1)?);
    }
    Ok(records)
}
