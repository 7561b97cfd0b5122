//! `constyle`: dataset forging, degradation, pre-training, evaluation and
//! file inspection on top of `constyle-core`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use constyle_core::degrade::{degrade_one, DegradationRecipe, PolicyConfig};
use constyle_core::forge::{forge_all, read_manifest, verify_manifest, ForgeSpec, MANIFEST_FILE};
use constyle_core::image::{load_image, save_image};
use constyle_core::metrics::{evaluate_benchmark, MetricOptions, SsimChannels};
use constyle_core::prompter::{
    classifier_accuracy, contrastive_gap, export_encoder, pretrain_loop, weights_summary, CheckpointPlan,
    PretrainConfig,
};
use constyle_core::Error;
use serde_json::json;

/// Seed used when neither a flag nor a config file provides one.
pub const DEFAULT_SEED: u64 = 0;

/// Accepted `schema_version` for JSON files read by the CLI.
const SCHEMA_VERSION: u64 = 1;

const LOG_FILE: &str = "train_log.jsonl";
const ENCODER_FILE: &str = "encoder.safetensors";

#[derive(Parser, Debug)]
#[command(name = "constyle", version, about = "Degradation synthesis, dataset forging and prompter pre-training")]
struct Cli {
    /// Worker threads for parallel stages. Defaults to the number of
    /// available cores. Results do not depend on this value.
    #[arg(long, global = true, env = "CONSTYLE_FORGE_THREADS")]
    threads: Option<usize>,

    /// More log output on standard error (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Tile paired and synthetic sources into a dataset with a JSON Lines manifest.
    Forge(ForgeArgs),
    /// Degrade one image with the batch policy, or replay a saved recipe.
    Degrade(DegradeArgs),
    /// Pre-train the prompter on the built-in texture task and export the encoder.
    Pretrain(PretrainArgs),
    /// Score restored tiles against the targets listed in a manifest.
    Eval(EvalArgs),
    /// Summarise a manifest, a weight file or a degradation recipe.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct ForgeArgs {
    /// Source specification (JSON with `schema_version` and `tasks`).
    #[arg(long)]
    spec: PathBuf,
    /// Output directory for tiles and the manifest.
    #[arg(long)]
    out: PathBuf,
    /// Master seed for synthetic degradations.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// After forging, check every entry and replay this many synthetic recipes.
    #[arg(long, default_value_t = 0)]
    verify: usize,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Clean input image (PNG or JPEG).
    #[arg(long)]
    input: PathBuf,
    /// Where to write the degraded image (PNG).
    #[arg(long)]
    output: PathBuf,
    /// Replay this recipe instead of sampling a new one.
    #[arg(long, conflicts_with_all = ["seed", "index", "policy"])]
    recipe: Option<PathBuf>,
    /// Policy overrides (JSON with `schema_version` plus any policy fields).
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Master seed for sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Batch index of the image; together with the seed it fixes the branch.
    #[arg(long)]
    index: Option<usize>,
    /// Write the sampled recipe here instead of standard output.
    #[arg(long)]
    save_recipe: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Run configuration (JSON with `schema_version`). Without it the
    /// built-in toy configuration is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the log, encoder weights and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides the checkpoint interval (0 disables checkpoints).
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SsimMode {
    Luminance,
    RgbMean,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Manifest produced by `forge`.
    #[arg(long)]
    manifest: PathBuf,
    /// Directory holding restored images at the manifest's target paths.
    #[arg(long)]
    restored: PathBuf,
    /// Dataset root the manifest paths are relative to. Defaults to the
    /// manifest's directory.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Channel handling for SSIM.
    #[arg(long, value_enum, default_value_t = SsimMode::Luminance)]
    ssim_channels: SsimMode,
    /// Pixels removed from every border before scoring.
    #[arg(long, default_value_t = 0)]
    crop_border: usize,
    /// Also write the full report as JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// A manifest (.jsonl), weight file (.safetensors) or recipe (.json).
    path: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Lib(Error::Data(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Forge(a) => forge(a),
        Command::Degrade(a) => degrade(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("JSON value serializes"));
}

fn forge(a: ForgeArgs) -> CliResult {
    if !a.spec.is_file() {
        return Err(Error::MissingFile(a.spec).into());
    }
    let spec = ForgeSpec::load(&a.spec)?;
    log::info!("forging {} task(s) into {}", spec.tasks.len(), a.out.display());
    let outcome = forge_all(&spec, &a.out, a.seed)?;
    for s in &outcome.skipped {
        log::warn!("skipped {}/{}: {}", s.task, s.image_id, s.reason);
    }
    let mut per_task: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &outcome.entries {
        *per_task.entry(e.task.as_str()).or_default() += 1;
    }
    let mut summary = json!({
        "manifest": a.out.join(MANIFEST_FILE),
        "entries": outcome.entries.len(),
        "per_task": per_task,
        "skipped": outcome.skipped,
    });
    if a.verify > 0 {
        let report = verify_manifest(&outcome.entries, &a.out, a.verify);
        let clean = report.is_clean();
        summary["verify"] = serde_json::to_value(&report).expect("report serializes");
        print_json(&summary);
        if !clean {
            return Err(Error::Data(format!("{} manifest finding(s)", report.findings.len())).into());
        }
        return Ok(());
    }
    print_json(&summary);
    Ok(())
}

/// Reads a JSON object, checks and strips its `schema_version`.
fn read_versioned(path: &Path) -> CliResult<serde_json::Value> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("{}: invalid JSON: {e}", path.display())))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Data(format!("{}: expected a JSON object", path.display())))?;
    match obj.remove("schema_version").and_then(|v| v.as_u64()) {
        Some(SCHEMA_VERSION) => Ok(value),
        Some(v) => Err(Error::Data(format!("{}: unsupported schema_version {v}", path.display())).into()),
        None => Err(Error::Data(format!("{}: missing schema_version", path.display())).into()),
    }
}

fn degrade(a: DegradeArgs) -> CliResult {
    if !a.input.is_file() {
        return Err(Error::MissingFile(a.input).into());
    }
    let img = load_image(&a.input)?;
    let recipe = if let Some(path) = &a.recipe {
        if !path.is_file() {
            return Err(Error::MissingFile(path.clone()).into());
        }
        let recipe = DegradationRecipe::load(path)?;
        save_image(&recipe.apply(&img)?, &a.output)?;
        recipe
    } else {
        let policy = match &a.policy {
            Some(p) => serde_json::from_value::<PolicyConfig>(read_versioned(p)?)
                .map_err(|e| Error::Data(format!("{}: {e}", p.display())))?,
            None => PolicyConfig::default(),
        };
        let item = degrade_one(&img, a.seed.unwrap_or(DEFAULT_SEED), a.index.unwrap_or(0), &policy)?;
        save_image(&item.image, &a.output)?;
        log::info!("branch {:?}, {} step(s)", item.branch, item.recipe.steps.len());
        item.recipe
    };
    match &a.save_recipe {
        Some(path) => recipe.save(path)?,
        None if a.recipe.is_none() => println!("{}", recipe.to_json()),
        None => {}
    }
    Ok(())
}

fn pretrain(a: PretrainArgs) -> CliResult {
    let mut cfg = match &a.config {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::MissingFile(path.clone()).into());
            }
            let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
            PretrainConfig::from_json(&text)?
        }
        None => PretrainConfig::toy(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = a.iters {
        cfg.train.total_iters = iters;
    }
    if let Some(every) = a.checkpoint_every {
        cfg.checkpoint_every = every;
    }
    cfg.validate()?;

    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let resolved = a.out.join("config.json");
    std::fs::write(&resolved, serde_json::to_string_pretty(&cfg).expect("config serializes"))
        .map_err(|e| io_err(&resolved, e))?;

    let data = cfg.train_set()?;
    let plan = (cfg.checkpoint_every > 0).then(|| CheckpointPlan {
        dir: a.out.join("checkpoints"),
        every: cfg.checkpoint_every,
    });
    if let Some(p) = &plan {
        std::fs::create_dir_all(&p.dir).map_err(|e| io_err(&p.dir, e))?;
    }
    let log_path = a.out.join(LOG_FILE);
    let mut sink = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    log::info!("training {} iterations on {} images", cfg.train.total_iters, data.len());
    let outcome = pretrain_loop(&data, &cfg, Some(&mut sink), plan.as_ref())?;
    sink.flush().map_err(|e| io_err(&log_path, e))?;

    let weights = a.out.join(ENCODER_FILE);
    export_encoder(&outcome.state.student, &cfg.encoder, &weights)?;
    let heldout = cfg.heldout_set()?;
    let accuracy = classifier_accuracy(&outcome.state.student, &cfg.encoder, &heldout)?;
    let gap = contrastive_gap(&outcome.state, &cfg.encoder, &heldout, &cfg.policy, cfg.seed)?;
    let last = outcome.log.last();
    print_json(&json!({
        "iterations": outcome.log.len(),
        "skipped_steps": outcome.skipped_steps,
        "final_loss": last.map(|r| r.loss_total),
        "heldout_accuracy": accuracy,
        "heldout_gap": gap,
        "log": log_path,
        "encoder": weights,
    }));
    Ok(())
}

fn eval(a: EvalArgs) -> CliResult {
    if !a.manifest.is_file() {
        return Err(Error::MissingFile(a.manifest).into());
    }
    let entries = read_manifest(&a.manifest)?;
    let root = a
        .data_root
        .clone()
        .unwrap_or_else(|| a.manifest.parent().unwrap_or(Path::new(".")).to_path_buf());
    let opts = MetricOptions {
        ssim_channels: match a.ssim_channels {
            SsimMode::Luminance => SsimChannels::Luminance,
            SsimMode::RgbMean => SsimChannels::RgbMean,
        },
        crop_border: a.crop_border,
    };
    let report = evaluate_benchmark(&entries, &root, &a.restored, opts)?;
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        std::fs::write(path, text).map_err(|e| io_err(path, e))?;
    }
    print!("{}", report.to_table());
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let path = &a.path;
    if !path.is_file() {
        return Err(Error::MissingFile(path.clone()).into());
    }
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "safetensors" => {
            let summary = weights_summary(path)?;
            print_json(&serde_json::to_value(summary).expect("summary serializes"));
        }
        "jsonl" => {
            let entries = read_manifest(path)?;
            let mut per_task: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for e in &entries {
                let slot = per_task.entry(e.task.as_str()).or_default();
                slot.0 += 1;
                slot.1 += usize::from(e.recipe.is_some());
            }
            let tasks: BTreeMap<&str, serde_json::Value> = per_task
                .into_iter()
                .map(|(t, (n, synth))| (t, json!({"entries": n, "synthetic": synth})))
                .collect();
            print_json(&json!({"entries": entries.len(), "tasks": tasks}));
        }
        "json" => {
            let recipe = DegradationRecipe::load(path)?;
            let steps: Vec<&str> = recipe.steps.iter().map(|s| s.name()).collect();
            print_json(&json!({"seed": recipe.seed, "steps": steps, "recipe": recipe}));
        }
        _ => {
            return Err(Failure::Usage(format!(
                "{}: expected a .jsonl manifest, .safetensors weights or .json recipe",
                path.display()
            )))
        }
    }
    Ok(())
}
