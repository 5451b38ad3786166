use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use weakloc::data::{Dataset, GenConfig, Label6, Profile, Scenario, Split};
use weakloc::eval::{compare_table, MetricsReport};
use weakloc::model::{Model, Scheme, CHECKPOINT_FILE};
use weakloc::tensor::{PoolKind, PoolingConfig};
use weakloc::train::{evaluate, train_to_dir, EvalOptions, Imbalance, RunConfig, CHECKPOINT_DIR};
use weakloc::Error;

const SEED_ENV: &str = "WEAKLOC_SEED";

const EXIT_USAGE: u8 = 2;
const EXIT_ARTIFACT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "weakloc",
    version,
    about = "Synthetic fracture classification and weakly supervised localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train one scheme and write its run directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Write PPM overlays of heatmaps and boxes for fractured test images
    ExportOverlays(OverlayArgs),
    /// Merge metrics reports into one table
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    total: Option<usize>,
    /// paper or uniform
    #[arg(long, value_parser = parse_with::<Profile>)]
    profile: Option<Profile>,
    /// Scenario whose classes are generated: 2, 3 or 6
    #[arg(long, value_parser = parse_with::<Scenario>)]
    classes: Option<Scenario>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    /// JSON file with generator settings
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// lbm, ubm, suploc, astn, affstn, stl or globalpool
    #[arg(long, value_parser = parse_with::<Scheme>)]
    scheme: Option<Scheme>,
    #[arg(long, value_parser = parse_with::<Scenario>)]
    classes: Option<Scenario>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// augment, wce or none
    #[arg(long, value_parser = parse_with::<Imbalance>)]
    imbalance: Option<Imbalance>,
    /// Loss blend of the two-branch scheme
    #[arg(long)]
    alpha: Option<f64>,
    /// Epoch from which the blend is complemented, or `none`
    #[arg(long, value_parser = parse_flip)]
    flip_epoch: Option<Flip>,
    /// Initial learning rate of the main network
    #[arg(long)]
    lr: Option<f64>,
    /// Initial learning rate of the localizer
    #[arg(long)]
    loc_lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    /// avg, max or lse
    #[arg(long, value_parser = parse_with::<PoolKind>)]
    pooling: Option<PoolKind>,
    /// LSE sharpness
    #[arg(long)]
    lse_r: Option<f64>,
    /// JSON file with run settings
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ModelInput {
    /// Checkpoint directory or run directory
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelInput,
    /// Where to write the metrics JSON; printed when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report name
    #[arg(long)]
    name: Option<String>,
    /// Report localization only
    #[arg(long)]
    loc_only: bool,
    /// Other reports to show in the same table
    #[arg(long, num_args = 1..)]
    compare: Vec<PathBuf>,
}

#[derive(Args)]
struct OverlayArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long)]
    out: PathBuf,
    /// Upscaling factor
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the table to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum Flip {
    Never,
    At(usize),
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_flip(s: &str) -> std::result::Result<Flip, String> {
    if s.eq_ignore_ascii_case("none") {
        return Ok(Flip::Never);
    }
    s.parse()
        .map(Flip::At)
        .map_err(|_| format!("expected an epoch or `none`, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::ExportOverlays(a) => export_overlays(a),
        Command::Compare(a) => compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Format { .. } | Error::Json(_)) => EXIT_ARTIFACT,
        Some(Error::NonFiniteLoss { .. } | Error::DegenerateTransform { .. }) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Error::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`")).into()
        }),
        Err(_) => Ok(None),
    }
}

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())).into())
}

/// Overlays `patch` onto `base`, rejecting keys the defaults do not have.
fn merge(base: &mut Value, patch: &Value, at: &str) -> std::result::Result<(), Error> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let key = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}

fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Value>) -> Result<T> {
    let Some(file) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(defaults)?)?);
    };
    let mut v = serde_json::to_value(defaults)?;
    merge(&mut v, file, "")?;
    serde_json::from_value(v).map_err(|e| Error::Config(format!("config file: {e}")).into())
}

fn print_config<T: Serialize>(cfg: &T) -> Result<()> {
    println!("effective config: {}", serde_json::to_string(cfg)?);
    Ok(())
}

fn gen(a: GenArgs) -> Result<()> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let mut cfg: GenConfig = layered(&GenConfig::default(), file.as_ref())?;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(v) = a.total {
        cfg.total = v;
    }
    if let Some(v) = a.profile {
        cfg.profile = v;
    }
    if let Some(v) = a.classes {
        cfg.scenario = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = v;
    }
    print_config(&cfg)?;
    let ds = weakloc::data::generate(&cfg)?;
    ds.save(&a.out)?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    print!("{}", count_table(&ds));
    Ok(())
}

fn count_table(ds: &Dataset) -> String {
    let mut out = format!(
        "{:<6}{:>6}{:>8}{:>6}{:>7}{:>7}\n",
        "label", "group", "total", "train", "val", "test"
    );
    let mut sums = [0usize; 4];
    for label in Label6::ALL {
        let of = |split: Option<Split>| {
            ds.samples
                .iter()
                .filter(|s| s.label6 == label && split.is_none_or(|sp| s.split == sp))
                .count()
        };
        let row = [
            of(None),
            of(Some(Split::Train)),
            of(Some(Split::Val)),
            of(Some(Split::Test)),
        ];
        if row[0] == 0 {
            continue;
        }
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
        out.push_str(&format!(
            "{:<6}{:>6}{:>8}{:>6}{:>7}{:>7}\n",
            label.name(),
            format!("{:?}", label.label3()),
            row[0],
            row[1],
            row[2],
            row[3]
        ));
    }
    out.push_str(&format!(
        "{:<6}{:>6}{:>8}{:>6}{:>7}{:>7}\n",
        "all", "", sums[0], sums[1], sums[2], sums[3]
    ));
    out
}

fn train(a: TrainArgs) -> Result<()> {
    let file = a.config.as_deref().map(read_json).transpose()?;
    let from_file = |key: &str| file.as_ref().and_then(|f| f.get(key)).cloned();
    let scheme = match (a.scheme, from_file("scheme")) {
        (Some(s), _) => s,
        (None, Some(v)) => serde_json::from_value(v)
            .map_err(|e| Error::Config(format!("config file: scheme: {e}")))?,
        (None, None) => {
            return Err(Error::Usage(
                "a scheme is required (--scheme or `scheme` in --config)".into(),
            )
            .into())
        }
    };
    let scenario = match (a.classes, from_file("scenario")) {
        (Some(s), _) => s,
        (None, Some(v)) => serde_json::from_value(v)
            .map_err(|e| Error::Config(format!("config file: scenario: {e}")))?,
        (None, None) => Scenario::Three,
    };
    let mut defaults = RunConfig::new(scheme, scenario);
    if let Some(alpha) = from_file("alpha").and_then(|v| v.as_f64()) {
        defaults = defaults.with_alpha(alpha);
    }
    let mut cfg: RunConfig = layered(&defaults, file.as_ref())?;
    cfg.scheme = scheme;
    cfg.scenario = scenario;
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    if let Some(v) = a.alpha {
        cfg = cfg.with_alpha(v);
    }
    match a.flip_epoch {
        Some(Flip::Never) => cfg.flip_epoch = None,
        Some(Flip::At(e)) => cfg.flip_epoch = Some(e),
        None => {}
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.imbalance {
        cfg.imbalance = v;
    }
    if let Some(v) = a.lr {
        cfg.schedule.lr0 = v;
    }
    if let Some(v) = a.loc_lr {
        cfg.localizer_schedule.lr0 = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(kind) = a.pooling {
        cfg.arch.pooling = match kind {
            PoolKind::Avg => PoolingConfig::avg(),
            PoolKind::Max => PoolingConfig::max(),
            PoolKind::Lse => PoolingConfig::lse(cfg.arch.pooling.lse_sharpness)?,
        };
    }
    if let Some(r) = a.lse_r {
        cfg.arch.pooling.lse_sharpness = r;
        cfg.arch.pooling.validate()?;
    }
    print_config(&cfg)?;
    let data = Dataset::load(&a.data)?;
    let (_, summary, artifacts) = train_to_dir(&cfg, &data, &a.out)?;
    println!(
        "best epoch {} (validation loss {:.6})",
        summary.best_epoch, summary.best_val_loss
    );
    println!("checkpoint {}", artifacts.checkpoint.display());
    println!("losses {}", artifacts.losses.display());
    print!("{}", summary.test_metrics.table());
    Ok(())
}

fn checkpoint_dir(path: &Path) -> PathBuf {
    if path.join(CHECKPOINT_FILE).exists() {
        path.to_path_buf()
    } else if path.join(CHECKPOINT_DIR).join(CHECKPOINT_FILE).exists() {
        path.join(CHECKPOINT_DIR)
    } else {
        path.to_path_buf()
    }
}

fn load(input: &ModelInput) -> Result<(Model, Dataset)> {
    let (model, _) = Model::load_checkpoint(checkpoint_dir(&input.checkpoint))?;
    let data = Dataset::load(&input.data)?;
    Ok((model, data))
}

fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    let malformed = |e: serde_json::Error| Error::Format {
        path: path.into(),
        detail: e.to_string(),
    };
    let mut v: Value = serde_json::from_str(&text).map_err(malformed)?;
    // run summaries carry their report under `test_metrics`
    if let Some(inner) = v.get_mut("test_metrics") {
        v = inner.take();
    }
    Ok(serde_json::from_value(v).map_err(malformed)?)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| {
        Error::Io {
            path: path.into(),
            source: e,
        }
        .into()
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, data) = load(&a.input)?;
    let opts = EvalOptions {
        name: a.name,
        loc_only: a.loc_only,
    };
    let report = evaluate(&model, &data, Split::Test, &opts)?;
    let json = report.to_json()?;
    let mut reports = vec![report];
    for p in &a.compare {
        reports.push(read_report(p)?);
    }
    print!("{}", compare_table(&reports));
    match &a.out {
        Some(path) => {
            write_file(path, &json)?;
            println!("metrics {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn export_overlays(a: OverlayArgs) -> Result<()> {
    let (model, data) = load(&a.input)?;
    let paths = weakloc::overlay::export(&model, &data, &a.out, a.scale)
        .with_context(|| format!("exporting overlays to {}", a.out.display()))?;
    println!("wrote {} overlays to {}", paths.len(), a.out.display());
    Ok(())
}

fn compare(a: CompareArgs) -> Result<()> {
    let reports = a
        .reports
        .iter()
        .map(|p| read_report(p))
        .collect::<Result<Vec<_>>>()?;
    let table = compare_table(&reports);
    print!("{table}");
    if let Some(path) = &a.out {
        write_file(path, &table)?;
    }
    Ok(())
}
