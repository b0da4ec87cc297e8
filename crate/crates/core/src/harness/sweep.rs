use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use super::{run, HarnessError, Result, RunConfig};
use crate::data::{Corpus, CrossLabelMap};
use crate::retrieval::{MetricReport, DEFAULT_KS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    BatchSize,
    EpisodeLength,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            Self::Tau => "tau",
            Self::BatchSize => "batch_size",
            Self::EpisodeLength => "episode_length",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "tau" => Ok(Self::Tau),
            "batch_size" | "batch" => Ok(Self::BatchSize),
            "episode_length" | "L" | "l" => Ok(Self::EpisodeLength),
            other => Err(format!("unknown sweep axis {other:?}")),
        }
    }
}

/// One grid point; `reports` is empty and `error` set when the run failed.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub value: String,
    pub reports: BTreeMap<String, MetricReport>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn mean_mrr(&self) -> Option<f64> {
        (self.error.is_none() && !self.reports.is_empty())
            .then(|| self.reports.values().map(|r| r.mrr).sum::<f64>() / self.reports.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// `axis,value,market,mrr,r@k...,status` with one row per market, or a
    /// single `failed` row for a failed cell.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis,value,market,mrr");
        for k in DEFAULT_KS {
            let _ = write!(out, ",r@{k}");
        }
        out.push_str(",status\n");
        let blanks = ",".repeat(DEFAULT_KS.len() + 1);
        for cell in &self.cells {
            match &cell.error {
                Some(e) => {
                    let _ = writeln!(out, "{},{},{blanks},failed: {}", self.axis.key(), cell.value, e.replace(',', ";"));
                }
                None => {
                    for (market, r) in &cell.reports {
                        let _ = write!(out, "{},{},{market},{}", self.axis.key(), cell.value, r.mrr);
                        for k in DEFAULT_KS {
                            let _ = write!(out, ",{}", r.recall_at(k).unwrap_or(f64::NAN));
                        }
                        out.push_str(",ok\n");
                    }
                }
            }
        }
        out
    }
}

/// Runs one training per value with `axis` overridden, in parallel. A failing
/// cell is recorded and the rest of the grid still runs.
pub fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    markets: &[Corpus],
    cross: Option<&CrossLabelMap>,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(axis.key(), v)?;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells = configs
        .par_iter()
        .zip(values)
        .map(|(cfg, v)| match run(cfg, markets, cross) {
            Ok(outcome) => SweepCell {
                value: v.clone(),
                reports: outcome.reports(),
                error: None,
            },
            Err(e) => {
                log::warn!("sweep cell {}={v} failed: {e}", axis.key());
                SweepCell {
                    value: v.clone(),
                    reports: BTreeMap::new(),
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    Ok(SweepResult { axis, cells })
}
