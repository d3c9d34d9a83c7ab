//! Episode-level evaluation, cross-dataset evaluation and the training-time
//! benchmark.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{self, RawDataset};
use crate::embed::EmbedMode;
use crate::episodes::{episode_stream, rng_for, Split, SplitDataset, STREAM_EVAL, STREAM_LABEL_SHUFFLE};
use crate::error::{Error, Result};
use crate::model::{argmax2, positive_probability, Model};
use crate::train::{train_run, PreparedData, REPORT_SCHEMA_VERSION};

const Z95: f64 = 1.959_963_984_540_054;
const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
    /// Normalize each episode with its own batch statistics.
    pub transductive: bool,
    /// Score against fair coin flips instead of the true labels.
    pub shuffle_labels: bool,
    pub workers: usize,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig, seed: u64) -> Self {
        Self {
            shots: cfg.eval_shots(),
            episodes: cfg.eval_episodes,
            seed,
            transductive: cfg.bn_transductive,
            shuffle_labels: false,
            workers: crate::train::worker_threads(),
        }
    }

    pub fn single_threaded(mut self) -> Self {
        self.workers = 1;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelAccuracy {
    pub label: usize,
    pub episodes: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub dataset: String,
    pub head: String,
    pub shots: usize,
    pub seed: u64,
    pub transductive: bool,
    pub shuffled_labels: bool,
    pub episodes: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Wilson score interval at 95%.
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_label: Vec<LabelAccuracy>,
    pub mean_positive_prob: f64,
    pub config: String,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        format!(
            "dataset,head,shots,episodes,accuracy,ci_low,ci_high,acc_positive,acc_negative,mean_positive_prob\n{},{},{},{},{},{},{},{},{},{}\n",
            self.dataset,
            self.head,
            self.shots,
            self.episodes,
            self.accuracy,
            self.ci_low,
            self.ci_high,
            self.per_label[0].accuracy,
            self.per_label[1].accuracy,
            self.mean_positive_prob
        )
    }
}

pub fn wilson_interval(correct: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = correct as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

struct Scored {
    label: usize,
    pred: usize,
    pos_prob: f64,
}

/// Evaluates `model` on fresh episodes from `ds`. The model is not
/// modified. Episodes come from one seeded stream and are scored in order,
/// so the report does not depend on the worker count.
pub fn evaluate(model: &Model, ds: &SplitDataset, opts: &EvalOptions) -> Result<EvalReport> {
    model.check_geometry(ds.geometry)?;
    model.head.check_shots(opts.shots)?;
    if opts.episodes == 0 {
        return Err(Error::config("eval_episodes", "must be positive"));
    }
    let mode = if opts.transductive {
        EmbedMode::Transductive
    } else {
        EmbedMode::Eval
    };
    let mut stream = episode_stream(ds, model.way_mode(), opts.shots, opts.episodes, opts.seed, STREAM_EVAL);
    let mut coin = rng_for(opts.seed, STREAM_LABEL_SHUFFLE);
    let mut scored = Vec::with_capacity(opts.episodes);
    let workers = opts.workers.max(1);
    loop {
        let chunk: Vec<_> = stream.by_ref().take(CHUNK * workers).collect::<Result<_>>()?;
        if chunk.is_empty() {
            break;
        }
        let per = chunk.len().div_ceil(workers);
        let results: Vec<Result<Vec<[f64; 2]>>> = if workers == 1 {
            vec![chunk.iter().map(|ep| model.predict(ep, mode)).collect()]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .chunks(per)
                    .map(|part| s.spawn(move || part.iter().map(|ep| model.predict(ep, mode)).collect()))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("eval worker panicked")).collect()
            })
        };
        let logits: Vec<[f64; 2]> = results.into_iter().collect::<Result<Vec<_>>>()?.concat();
        for (ep, l) in chunk.iter().zip(logits) {
            let label = if opts.shuffle_labels {
                usize::from(coin.random_bool(0.5))
            } else {
                ep.label
            };
            scored.push(Scored {
                label,
                pred: argmax2(l),
                pos_prob: positive_probability(l),
            });
        }
    }
    let n = scored.len();
    let correct = scored.iter().filter(|s| s.label == s.pred).count();
    let per_label = (0..2)
        .map(|label| {
            let of: Vec<&Scored> = scored.iter().filter(|s| s.label == label).collect();
            let c = of.iter().filter(|s| s.pred == label).count();
            LabelAccuracy {
                label,
                episodes: of.len(),
                correct: c,
                accuracy: if of.is_empty() { f64::NAN } else { c as f64 / of.len() as f64 },
            }
        })
        .collect();
    let (ci_low, ci_high) = wilson_interval(correct, n);
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: ds.name.clone(),
        head: model.head.kind().to_string(),
        shots: opts.shots,
        seed: opts.seed,
        transductive: opts.transductive,
        shuffled_labels: opts.shuffle_labels,
        episodes: n,
        correct,
        accuracy: correct as f64 / n as f64,
        ci_low,
        ci_high,
        per_label,
        mean_positive_prob: scored.iter().map(|s| s.pos_prob).sum::<f64>() / n as f64,
        config: model.config.to_text(),
    })
}

/// Brings `other` to the model's geometry and applies the model's stored
/// normalization (never refitted) before evaluating on all of its classes.
pub fn prepare_cross(model: &Model, other: &RawDataset) -> Result<SplitDataset> {
    let (c, h, w) = model.embedder.input_geometry();
    if other.geometry.0 != c {
        return Err(Error::Geometry {
            expected: (c, h, w),
            found: other.geometry,
        });
    }
    let resized = data::resize_dataset(other, (h, w))?;
    let mut ds = data::to_unit_range(&resized, Split::Test)?;
    model.norm.apply(&mut ds)?;
    Ok(ds)
}

pub fn cross_evaluate(model: &Model, other: &RawDataset, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate(model, &prepare_cross(model, other)?, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchEntry {
    pub label: String,
    pub head: String,
    pub shots: usize,
    pub episodes_per_epoch: usize,
    pub epoch_seconds: Vec<f64>,
    /// Mean of the last three epochs; the first epoch is warmup.
    pub seconds_per_epoch: f64,
    pub support_forwards: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRatio {
    pub pair: String,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub hardware: String,
    pub entries: Vec<BenchEntry>,
    pub ratios: Vec<BenchRatio>,
}

impl BenchReport {
    pub fn seconds(&self, label: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.label == label).map(|e| e.seconds_per_epoch)
    }

    pub fn ratios_csv(&self) -> String {
        let mut s = String::from("pair,ratio\n");
        for r in &self.ratios {
            s.push_str(&format!("{},{}\n", r.pair, r.ratio));
        }
        s
    }

    pub fn entries_csv(&self) -> String {
        let mut s = String::from("label,head,shots,episodes_per_epoch,seconds_per_epoch\n");
        for e in &self.entries {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.label, e.head, e.shots, e.episodes_per_epoch, e.seconds_per_epoch
            ));
        }
        s
    }
}

pub fn hardware_note() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|m| m.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!(
        "{cpu}; {} {}; {} logical cpus; single-threaded measurement",
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get())
    )
}

/// Smallest observable step of the monotonic clock.
pub fn clock_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times training of each labelled configuration on the calling thread.
/// Every configuration must share epoch and episode counts, with at least
/// one warmup epoch plus three measured ones.
pub fn bench(configs: &[(String, RunConfig)], data: &PreparedData, pairs: &[(String, String)]) -> Result<BenchReport> {
    let Some((_, first)) = configs.first() else {
        return Err(Error::Bench("no configurations to compare".into()));
    };
    for (label, cfg) in configs {
        if cfg.epochs < 4 {
            return Err(Error::Bench(format!("`{label}`: need at least 4 epochs (1 warmup + 3 measured)")));
        }
        if (cfg.epochs, cfg.episodes_per_epoch) != (first.epochs, first.episodes_per_epoch) {
            return Err(Error::Bench(format!("`{label}`: epoch and episode counts differ between configurations")));
        }
    }
    let resolution = clock_resolution().as_secs_f64();
    let mut entries = Vec::with_capacity(configs.len());
    for (label, cfg) in configs {
        let seed = cfg.seeds.first().copied().unwrap_or(0);
        let outcome = train_run(cfg, seed, data, None)?;
        let secs: Vec<f64> = outcome.report.epochs.iter().map(|e| e.seconds).collect();
        if let Some(&min) = secs.iter().min_by(|a, b| a.total_cmp(b)) {
            if min < 1000.0 * resolution {
                return Err(Error::Bench(format!(
                    "`{label}`: an epoch took {min:.3e} s, too close to the clock resolution of {resolution:.1e} s; use more episodes per epoch"
                )));
            }
        }
        let last3 = &secs[secs.len() - 3..];
        entries.push(BenchEntry {
            label: label.clone(),
            head: cfg.head.to_string(),
            shots: cfg.shots,
            episodes_per_epoch: cfg.episodes_per_epoch,
            epoch_seconds: secs.clone(),
            seconds_per_epoch: last3.iter().sum::<f64>() / 3.0,
            support_forwards: outcome.report.support_forwards,
        });
    }
    let find = |l: &str| {
        entries
            .iter()
            .find(|e| e.label == l)
            .map(|e| e.seconds_per_epoch)
            .ok_or_else(|| Error::Bench(format!("ratio refers to unknown configuration `{l}`")))
    };
    let ratios = pairs
        .iter()
        .map(|(a, b)| {
            Ok(BenchRatio {
                pair: format!("{a}/{b}"),
                ratio: find(a)? / find(b)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        hardware: hardware_note(),
        entries,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_interval_brackets_the_estimate() {
        let (lo, hi) = wilson_interval(1000, 2000);
        assert!(lo < 0.5 && hi > 0.5);
        assert!((hi - lo - 2.0 * 0.0219).abs() < 1e-3, "{lo} {hi}");
        let (lo, hi) = wilson_interval(0, 10);
        assert_eq!(lo, 0.0);
        assert!(hi > 0.0 && hi < 0.4);
    }

    #[test]
    fn clock_is_fine_grained() {
        assert!(clock_resolution() < Duration::from_millis(1));
    }
}
