use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::Result;
use owfs::config::RunConfig;
use owfs::eval::wilson_interval;
use owfs::train::{self, MultiSeedReport};
use serde::Serialize;

use super::{start_output, write, write_json, write_seed_outputs, Axis};

pub const CSV_HEADER: &str = "axis_value,head,order,accuracy,ci_low,ci_high,seconds_per_epoch";

#[derive(Debug, Serialize)]
pub struct Cell {
    pub axis: String,
    pub axis_value: String,
    pub head: String,
    pub order: String,
    pub status: String,
    pub error: Option<String>,
    /// Pooled over seeds.
    pub correct: usize,
    pub episodes: usize,
    pub accuracy: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub seconds_per_epoch: Option<f64>,
}

impl Axis {
    fn key(self) -> &'static str {
        match self {
            Axis::Shots => "shots",
            Axis::Head => "head",
            Axis::Order => "order",
        }
    }
}

impl Cell {
    fn csv_row(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.axis_value,
            self.head,
            self.order,
            num(self.accuracy),
            num(self.ci_low),
            num(self.ci_high),
            num(self.seconds_per_epoch)
        )
    }
}

fn order_name(cfg: &RunConfig) -> String {
    cfg.to_text()
        .lines()
        .find_map(|l| l.strip_prefix("order = ").map(str::to_string))
        .unwrap_or_default()
}

fn failed(axis: Axis, value: &str, cfg: &RunConfig, err: String) -> Cell {
    Cell {
        axis: axis.key().into(),
        axis_value: value.into(),
        head: cfg.head.to_string(),
        order: order_name(cfg),
        status: "failed".into(),
        error: Some(err),
        correct: 0,
        episodes: 0,
        accuracy: None,
        ci_low: None,
        ci_high: None,
        seconds_per_epoch: None,
    }
}

fn from_report(axis: Axis, value: &str, cfg: &RunConfig, report: &MultiSeedReport) -> Cell {
    let evals: Vec<_> = report.runs.iter().filter_map(|r| r.eval.as_ref()).collect();
    let correct = evals.iter().map(|e| e.correct).sum();
    let episodes = evals.iter().map(|e| e.episodes).sum();
    if report.partial || episodes == 0 {
        let errs: Vec<String> = report
            .runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
            .collect();
        return failed(axis, value, cfg, errs.join("; "));
    }
    let (lo, hi) = wilson_interval(correct, episodes);
    Cell {
        axis: axis.key().into(),
        axis_value: value.into(),
        head: cfg.head.to_string(),
        order: order_name(cfg),
        status: "ok".into(),
        error: None,
        correct,
        episodes,
        accuracy: Some(correct as f64 / episodes as f64),
        ci_low: Some(lo),
        ci_high: Some(hi),
        seconds_per_epoch: Some(report.seconds_per_epoch.mean),
    }
}

/// One training and evaluation cell per axis value over `base.seeds`. A
/// failing cell is recorded and the sweep moves on; the exit code is 1 if
/// any cell failed.
pub fn run(base: &RunConfig, axis: Axis, values: &[String], out: &Path) -> Result<ExitCode> {
    base.validate_dataset()?;
    let mut cells_cfg = Vec::with_capacity(values.len());
    for v in values {
        let mut c = base.clone();
        c.set(axis.key(), v)?;
        cells_cfg.push(c);
    }
    start_output(out, base)?;
    let data = train::prepare_data(base)?;
    let mut cells = Vec::new();
    for (value, cfg) in values.iter().zip(&cells_cfg) {
        let dir = out.join(format!("{}_{value}", axis.key()));
        fs::create_dir_all(&dir)?;
        write(&dir.join("config.cfg"), cfg.to_text())?;
        let cell = match cfg.validate() {
            Err(e) => failed(axis, value, cfg, e.to_string()),
            Ok(()) => match train::multi_seed(cfg, &cfg.seeds, &data, Some(&dir)) {
                Ok(report) => {
                    write_seed_outputs(&dir, &report)?;
                    write_json(&dir.join("summary.json"), &report)?;
                    from_report(axis, value, cfg, &report)
                }
                Err(e) => failed(axis, value, cfg, e.to_string()),
            },
        };
        write_json(&dir.join("cell.json"), &cell)?;
        match &cell.error {
            Some(e) => eprintln!("{}={value}: failed: {e}", axis.key()),
            None => println!("{}={value}: {}", axis.key(), cell.csv_row()),
        }
        cells.push(cell);
    }
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    for c in &cells {
        csv.push_str(&c.csv_row());
        csv.push('\n');
    }
    write(&out.join("sweep.csv"), csv)?;
    write_json(&out.join("summary.json"), &cells)?;
    let any_failed = cells.iter().any(|c| c.error.is_some());
    Ok(if any_failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
