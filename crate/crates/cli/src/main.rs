use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use owfs::checkpoint;
use owfs::config::{parse_list, DatasetKind, RunConfig};
use owfs::eval::{self, EvalOptions, EvalReport};
use owfs::heads::HeadKind;
use owfs::train::{self, MultiSeedReport, PreparedData};

mod sweep;

#[derive(Parser)]
#[command(name = "owfs", version, about = "One-way prototypical few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, applied in order: defaults, `--config`, `--set`,
/// then the named flags.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    shots: Option<String>,
    #[arg(long)]
    order: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    episodes_per_epoch: Option<String>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    matching_metric: Option<String>,
    #[arg(long)]
    norm_scope: Option<String>,
    /// Normalize evaluation episodes with their own batch statistics.
    #[arg(long)]
    bn_transductive: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Axis {
    Shots,
    Head,
    Order,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and evaluate it on the test split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split of its dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every class of another dataset, reusing the
    /// checkpoint's normalization.
    Crosseval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time training epochs of one-way against two-way heads.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Head families to compare: `proto`, `normal`.
        #[arg(long, default_value = "proto,normal")]
        pairs: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training+evaluation cell per value of an axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated axis values.
        #[arg(long)]
        values: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the entries and configuration stored in a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
        #[arg(long)]
        json: bool,
    },
}

impl ConfigArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| {
                owfs::Error::config("--config", format!("cannot read {}: {e}", path.display()))
            })?;
            cfg.apply_text(&text)?;
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| owfs::Error::config("--set", format!("expected KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let named = [
            ("head", &self.head),
            ("shots", &self.shots),
            ("order", &self.order),
            ("epochs", &self.epochs),
            ("episodes_per_epoch", &self.episodes_per_epoch),
            ("matching_metric", &self.matching_metric),
            ("norm_scope", &self.norm_scope),
        ];
        for (key, value) in named {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        if let Some(root) = &self.data_root {
            cfg.set("data_root", &root.display().to_string())?;
            if cfg.dataset.kind == DatasetKind::Synth {
                cfg.dataset.kind = DatasetKind::Tree;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seeds = vec![seed];
        }
        if self.bn_transductive {
            cfg.bn_transductive = true;
        }
        Ok(())
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        self.apply(&mut cfg)?;
        Ok(cfg)
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let validation = err
        .chain()
        .filter_map(|e| e.downcast_ref::<owfs::Error>())
        .any(owfs::Error::is_validation);
    if validation {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Creates the output directory and records the resolved configuration
/// before any work starts.
fn start_output(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("config.cfg"), cfg.to_text())
}

fn write_eval(out: &Path, report: &EvalReport) -> Result<()> {
    write_json(&out.join("eval_report.json"), report)?;
    write(&out.join("eval.csv"), report.to_csv())
}

fn print_eval(report: &EvalReport) {
    println!(
        "{} on {}: accuracy {:.4} [{:.4}, {:.4}] over {} episodes (K={})",
        report.head, report.dataset, report.accuracy, report.ci_low, report.ci_high, report.episodes, report.shots
    );
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { cfg, out } => {
            let cfg = cfg.resolve()?;
            cfg.validate()?;
            start_output(&out, &cfg)?;
            let data = train::prepare_data(&cfg)?;
            train_cmd(&cfg, &data, &out)
        }
        Command::Eval { checkpoint, cfg: args, out } => {
            let (model, cfg) = load_for_eval(&checkpoint, &args)?;
            start_output(&out, &cfg)?;
            let test = train::prepare_test_split(&cfg, &model.norm)?;
            let report = eval::evaluate(&model, &test, &eval_options(&cfg, &args, &model))?;
            write_eval(&out, &report)?;
            print_eval(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Crosseval { checkpoint, cfg: args, out } => {
            let (model, cfg) = load_for_eval(&checkpoint, &args)?;
            start_output(&out, &cfg)?;
            let other = train::load_raw(&cfg.dataset, &cfg)?;
            let report = eval::cross_evaluate(&model, &other, &eval_options(&cfg, &args, &model))?;
            write_eval(&out, &report)?;
            print_eval(&report);
            Ok(ExitCode::SUCCESS)
        }
        Command::Bench { cfg, pairs, out } => {
            let cfg = cfg.resolve()?;
            bench_cmd(&cfg, &pairs, &out)
        }
        Command::Sweep { cfg: args, axis, values, out } => {
            let (axis, values, base_args) = sweep_axis(args, axis, values)?;
            let base = base_args.resolve()?;
            sweep::run(&base, axis, &values, &out)
        }
        Command::InspectCheckpoint { path, json } => {
            let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
            let (entries, text) = checkpoint::parse_bytes(&bytes, &path)?;
            if json {
                let list: Vec<_> = entries
                    .iter()
                    .map(|(n, t)| serde_json::json!({ "name": n, "shape": t.shape(), "numel": t.numel() }))
                    .collect();
                println!(
                    "{}",
                    serde_json::to_string_pretty(&serde_json::json!({
                        "version": checkpoint::VERSION,
                        "entries": list,
                        "config": text,
                    }))?
                );
            } else {
                println!("OWFS checkpoint v{}, {} entries", checkpoint::VERSION, entries.len());
                for (name, t) in &entries {
                    println!("  {name} {:?}", t.shape());
                }
                println!("config:\n{text}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train_cmd(cfg: &RunConfig, data: &PreparedData, out: &Path) -> Result<ExitCode> {
    if let [seed] = cfg.seeds[..] {
        let trained = train::train_run(cfg, seed, data, Some(out))?;
        write_json(&out.join("train_report.json"), &trained.report)?;
        write(&out.join("train.csv"), trained.report.to_csv())?;
        let opts = EvalOptions::from_config(cfg, seed);
        let report = eval::evaluate(&trained.model, &data.test, &opts)?;
        write_eval(out, &report)?;
        if let Some(acc) = trained.report.final_acc() {
            println!("seed {seed}: final train accuracy {acc:.4}");
        }
        print_eval(&report);
        return Ok(ExitCode::SUCCESS);
    }
    let summary = train::multi_seed(cfg, &cfg.seeds, data, Some(out))?;
    write_seed_outputs(out, &summary)?;
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "{} seeds: test accuracy {:.4} ± {:.4}",
        summary.test_acc.n, summary.test_acc.mean, summary.test_acc.std
    );
    for r in summary.runs.iter().filter(|r| r.error.is_some()) {
        eprintln!("seed {} failed: {}", r.seed, r.error.as_deref().unwrap_or_default());
    }
    Ok(if summary.partial { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

pub(crate) fn write_seed_outputs(out: &Path, summary: &MultiSeedReport) -> Result<()> {
    for r in &summary.runs {
        let dir = out.join(format!("seed{}", r.seed));
        fs::create_dir_all(&dir)?;
        if let Some(t) = &r.train {
            write_json(&dir.join("train_report.json"), t)?;
            write(&dir.join("train.csv"), t.to_csv())?;
        }
        if let Some(e) = &r.eval {
            write_eval(&dir, e)?;
        }
        if let Some(err) = &r.error {
            write(&dir.join("error.txt"), format!("{err}\n"))?;
        }
    }
    Ok(())
}

fn load_for_eval(path: &Path, args: &ConfigArgs) -> Result<(owfs::Model, RunConfig)> {
    let ckpt = checkpoint::load(path)?;
    let mut cfg = ckpt.model.config.clone();
    args.apply(&mut cfg)?;
    cfg.validate_dataset()?;
    ckpt.model.head.check_shots(cfg.eval_shots())?;
    Ok((ckpt.model, cfg))
}

fn eval_options(cfg: &RunConfig, args: &ConfigArgs, model: &owfs::Model) -> EvalOptions {
    EvalOptions::from_config(cfg, args.seed.unwrap_or_else(|| model.seed()))
}

fn bench_cmd(cfg: &RunConfig, pairs: &str, out: &Path) -> Result<ExitCode> {
    let families: Vec<String> = parse_list("--pairs", pairs)?;
    let mut configs = Vec::new();
    let mut ratio_pairs = Vec::new();
    for family in &families {
        let (one, two) = match family.as_str() {
            "proto" => (HeadKind::OneWayProto, HeadKind::TwoWayProto),
            "normal" => (HeadKind::OneWayNormal, HeadKind::TwoWayNormal),
            other => {
                return Err(owfs::Error::config("--pairs", format!("unknown family `{other}`; use proto or normal")).into())
            }
        };
        for head in [one, two] {
            let mut c = cfg.clone();
            c.head = head;
            c.validate()?;
            configs.push((head.to_string(), c));
        }
        ratio_pairs.push((one.to_string(), two.to_string()));
    }
    start_output(out, cfg)?;
    let data = train::prepare_data(cfg)?;
    let report = eval::bench(&configs, &data, &ratio_pairs)?;
    write_json(&out.join("bench.json"), &report)?;
    write(&out.join("bench.csv"), report.entries_csv())?;
    write(&out.join("ratios.csv"), report.ratios_csv())?;
    for e in &report.entries {
        println!("{}: {:.3} s/epoch", e.label, e.seconds_per_epoch);
    }
    for r in &report.ratios {
        println!("{}: {:.3}", r.pair, r.ratio);
    }
    Ok(ExitCode::SUCCESS)
}

/// Picks the sweep axis: explicit `--axis/--values`, or a comma list given
/// to `--shots`, `--head` or `--order`, which is then removed from the base
/// overrides.
fn sweep_axis(mut args: ConfigArgs, axis: Option<Axis>, values: Option<String>) -> Result<(Axis, Vec<String>, ConfigArgs)> {
    let (axis, values) = match (axis, values) {
        (Some(a), Some(v)) => (a, v),
        (None, None) => {
            if let Some(v) = args.shots.take() {
                (Axis::Shots, v)
            } else if let Some(v) = args.head.take() {
                (Axis::Head, v)
            } else if let Some(v) = args.order.take() {
                (Axis::Order, v)
            } else {
                return Err(owfs::Error::config("--axis", "give --axis with --values, or a list to --shots, --head or --order").into());
            }
        }
        _ => return Err(owfs::Error::config("--axis", "--axis and --values go together").into()),
    };
    let values: Vec<String> = parse_list("--values", &values)?;
    if values.is_empty() {
        return Err(owfs::Error::config("--values", "no values given").into());
    }
    Ok((axis, values, args))
}
