//! Episodic training and multi-seed orchestration.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::Serialize;

use crate::checkpoint;
use crate::config::{DatasetKind, DatasetSpec, RunConfig};
use crate::data::{self, NormStats, RawDataset, SynthConfig};
use crate::embed::EmbedMode;
use crate::episodes::{episode_stream, rng_for, train_stream, Split, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::heads::cross_entropy;
use crate::model::{argmax2, Model};
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Graph, Tensor};

use rand::Rng;

pub const STREAM_BACKGROUND_BASE: u64 = 2 << 32;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Normalized train and test splits plus the statistics fitted on train.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: SplitDataset,
    pub test: SplitDataset,
    pub norm: NormStats,
}

/// Loads a dataset at the configured geometry, without splitting.
pub fn load_raw(spec: &DatasetSpec, cfg: &RunConfig) -> Result<RawDataset> {
    let missing = |key: &str| Error::config(key, "required but not set");
    match spec.kind {
        DatasetKind::Synth => data::synth_blobs(&SynthConfig {
            num_classes: spec.synth_classes,
            per_class: spec.synth_per_class,
            geometry: (cfg.in_channels, cfg.image_size.0, cfg.image_size.1),
            spread: spec.synth_spread,
            seed: spec.synth_seed,
        }),
        DatasetKind::Tree => {
            let root = spec.root.as_ref().ok_or_else(|| missing("data_root"))?;
            data::load_image_tree(root, cfg.image_size, cfg.in_channels)
        }
        DatasetKind::Idx => {
            let images = spec.idx_images.as_ref().ok_or_else(|| missing("idx_images"))?;
            let labels = spec.idx_labels.as_ref().ok_or_else(|| missing("idx_labels"))?;
            let raw = data::load_idx(images, labels)?;
            if cfg.in_channels != 1 {
                return Err(Error::config("in_channels", "IDX images are single-channel"));
            }
            data::resize_dataset(&raw, cfg.image_size)
        }
    }
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let raw = load_raw(&cfg.dataset, cfg)?;
    let (train_raw, test_raw) = match cfg.split_spec()? {
        Some(spec) => data::split(&raw, &spec, cfg.split_seed)?,
        None => {
            let mut spec = cfg.dataset.clone();
            spec.root = cfg.test_root.clone();
            (raw, load_raw(&spec, cfg)?)
        }
    };
    let (train, norm) = data::normalize(&train_raw, cfg.norm_scope, Split::Train)?;
    let mut test = data::to_unit_range(&test_raw, Split::Test)?;
    norm.apply(&mut test)?;
    Ok(PreparedData { train, test, norm })
}

/// The test split of `cfg`'s dataset, normalized with `norm` rather than
/// refitted statistics.
pub fn prepare_test_split(cfg: &RunConfig, norm: &NormStats) -> Result<SplitDataset> {
    let raw = load_raw(&cfg.dataset, cfg)?;
    let test_raw = match cfg.split_spec()? {
        Some(spec) => data::split(&raw, &spec, cfg.split_seed)?.1,
        None => {
            let mut spec = cfg.dataset.clone();
            spec.root = cfg.test_root.clone();
            load_raw(&spec, cfg)?
        }
    };
    let mut test = data::to_unit_range(&test_raw, Split::Test)?;
    norm.apply(&mut test)?;
    Ok(test)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub schema_version: u32,
    pub seed: u64,
    pub config: String,
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    /// Support images embedded over the whole run.
    pub support_forwards: u64,
    pub query_forwards: u64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.acc)
    }

    /// `epoch,loss,acc,seconds` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,acc,seconds\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.acc, e.seconds));
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    pub report: TrainReport,
}

pub fn adam_config(cfg: &RunConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.adam_eps,
    }
}

/// Trains one model with one optimizer step per episode. With `out`, the
/// final checkpoint is written to `out/checkpoint.owfs` (and per epoch to
/// `out/epoch{e}.owfs` when configured).
pub fn train_run(cfg: &RunConfig, seed: u64, data: &PreparedData, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = Model::new(cfg, seed, data.norm.clone())?;
    model.check_geometry(data.train.geometry)?;
    let mut optimizer = AdamState::new(adam_config(cfg), &model.params);
    let mode = model.way_mode();
    let mut report = TrainReport {
        schema_version: REPORT_SCHEMA_VERSION,
        seed,
        config: model.config.to_text(),
        epochs: Vec::with_capacity(cfg.epochs),
        steps: 0,
        support_forwards: 0,
        query_forwards: 0,
        checkpoint: None,
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut bg_rng = rng_for(seed, STREAM_BACKGROUND_BASE + epoch as u64);
        for ep in episode_stream(&data.train, mode, cfg.shots, cfg.episodes_per_epoch, seed, train_stream(epoch)) {
            let ep = ep?;
            let background = sample_background(&data.train, cfg.bn_background, &mut bg_rng)?;
            let graph = Graph::new();
            let bound = model.params.bind(&graph);
            let (logits, updates) =
                model.episode_logits_with(&graph, &bound, &ep, background.as_ref(), EmbedMode::Train)?;
            let loss = cross_entropy(logits, ep.label)?;
            let step = optimizer.t + 1;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            graph.backward(loss)?;
            optimizer.step(&mut model.params, &bound.gradients())?;
            model.embedder.apply_bn_updates(&updates);
            let lv = logits.value();
            correct += usize::from(argmax2([lv.data()[0], lv.data()[1]]) == ep.label);
            loss_sum += value;
            report.steps += 1;
            report.support_forwards += ep.support_count() as u64;
            report.query_forwards += 1;
        }
        let n = cfg.episodes_per_epoch as f64;
        report.epochs.push(EpochStats {
            epoch,
            loss: loss_sum / n,
            acc: correct as f64 / n,
            seconds: start.elapsed().as_secs_f64(),
        });
        if let (Some(dir), true) = (out, cfg.checkpoint_every_epoch) {
            checkpoint::save(&dir.join(format!("epoch{epoch}.owfs")), &model, Some(&optimizer))?;
        }
    }
    if let Some(dir) = out {
        let path = dir.join("checkpoint.owfs");
        checkpoint::save(&path, &model, Some(&optimizer))?;
        report.checkpoint = Some(path);
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        report,
    })
}

/// `count` training images drawn uniformly over classes, then examples.
fn sample_background(ds: &SplitDataset, count: usize, rng: &mut impl Rng) -> Result<Option<Tensor>> {
    if count == 0 {
        return Ok(None);
    }
    let (c, h, w) = ds.geometry;
    let mut data = Vec::with_capacity(count * c * h * w);
    for _ in 0..count {
        let class = &ds.classes[rng.random_range(0..ds.classes.len())];
        data.extend_from_slice(&class.examples[rng.random_range(0..class.examples.len())]);
    }
    Tensor::new(vec![count, c, h, w], data).map(Some)
}

/// Worker cap from `OWFS_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("OWFS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub train: Option<TrainReport>,
    pub eval: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MultiSeedReport {
    pub schema_version: u32,
    pub config: String,
    /// Sorted by seed.
    pub runs: Vec<SeedResult>,
    pub train_acc: Aggregate,
    pub test_acc: Aggregate,
    pub seconds_per_epoch: Aggregate,
    /// Some seed failed; aggregates cover the successful ones.
    pub partial: bool,
}

/// Trains and evaluates every seed, each with its own model; seeds run on
/// up to [`worker_threads`] threads. With `out`, seed `s` writes into
/// `out/seed{s}/`.
pub fn multi_seed(cfg: &RunConfig, seeds: &[u64], data: &PreparedData, out: Option<&Path>) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }
    cfg.validate()?;
    let mut order: Vec<u64> = seeds.to_vec();
    order.sort_unstable();
    order.dedup();
    let next = AtomicUsize::new(0);
    let results = Mutex::new(Vec::with_capacity(order.len()));
    let run_one = |seed: u64| -> SeedResult {
        let dir = out.map(|o| o.join(format!("seed{seed}")));
        let outcome = (|| {
            if let Some(d) = &dir {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            let trained = train_run(cfg, seed, data, dir.as_deref())?;
            let opts = EvalOptions::from_config(cfg, seed).single_threaded();
            let eval = evaluate(&trained.model, &data.test, &opts)?;
            Ok::<_, Error>((trained.report, eval))
        })();
        match outcome {
            Ok((train, eval)) => SeedResult {
                seed,
                train: Some(train),
                eval: Some(eval),
                error: None,
            },
            Err(e) => SeedResult {
                seed,
                train: None,
                eval: None,
                error: Some(e.to_string()),
            },
        }
    };
    let threads = worker_threads().min(order.len()).max(1);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&seed) = order.get(i) else { break };
                let r = run_one(seed);
                results.lock().expect("no poisoned lock").push(r);
            });
        }
    });
    let mut runs = results.into_inner().expect("no poisoned lock");
    runs.sort_by_key(|r| r.seed);
    let ok: Vec<&SeedResult> = runs.iter().filter(|r| r.error.is_none()).collect();
    let train_acc: Vec<f64> = ok.iter().filter_map(|r| r.train.as_ref()?.final_acc()).collect();
    let test_acc: Vec<f64> = ok.iter().filter_map(|r| Some(r.eval.as_ref()?.accuracy)).collect();
    let spe: Vec<f64> = ok
        .iter()
        .filter_map(|r| {
            let e = &r.train.as_ref()?.epochs;
            (!e.is_empty()).then(|| e.iter().map(|x| x.seconds).sum::<f64>() / e.len() as f64)
        })
        .collect();
    let mut shown = cfg.clone();
    shown.seeds = order.clone();
    Ok(MultiSeedReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: shown.to_text(),
        partial: ok.len() != runs.len(),
        train_acc: Aggregate::of(&train_acc),
        test_acc: Aggregate::of(&test_acc),
        seconds_per_epoch: Aggregate::of(&spe),
        runs,
    })
}
