//! `objdisc`: the pipeline stages as subcommands over a state directory.
//!
//! Exit codes: 0 on success, 2 on invalid input or configuration, 1 on any
//! other failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use objdisc::evaluation::SyntheticConfig;
use objdisc::pipeline::{
    run_discover, run_discover_large, run_evaluate, run_propose, run_score, run_synth, EvalSource, PipelineConfig,
    PipelineError, StageStatus, StateDir,
};
use serde::de::DeserializeOwned;

#[derive(Parser, Debug)]
#[command(
    name = "objdisc",
    version,
    about = "Unsupervised object discovery over precomputed CNN features"
)]
struct Cli {
    /// State directory holding every stage's inputs and outputs.
    #[arg(long, env = "ROSD_STATE_DIR", global = true, default_value = ".")]
    state_dir: PathBuf,
    /// Dataset manifest; `<state-dir>/manifest.json` when unset.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// YAML or JSON pipeline config. Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; every stage derives its own from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Thread cap for every stage; all cores when unset.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (tensors, descriptors, manifest) into the state directory.
    Synth(SynthArgs),
    /// Generate proposals and region descriptors for every image.
    Propose(StageArgs),
    /// Prefilter neighbors and score proposal pairs.
    Score(StageArgs),
    /// Run discovery over the whole collection.
    Discover(StageArgs),
    /// Run two-stage discovery under a memory budget.
    DiscoverLarge(StageArgs),
    /// Evaluate discovery results against the manifest ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 40)]
    images: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Strength of the smooth per-image background.
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    /// Strength of independent per-cell noise.
    #[arg(long, default_value_t = 0.0)]
    speckle: f32,
    #[arg(long, default_value_t = 224)]
    image_size: u32,
    #[arg(long, default_value_t = 32)]
    depth: usize,
    #[arg(long, default_value_t = 3)]
    max_objects: usize,
    #[arg(long, default_value_t = 0.5)]
    distractor_prob: f64,
}

/// Overrides for any field of the pipeline config.
#[derive(Args, Debug, Default)]
struct StageArgs {
    /// `discovery` or `colocalization`.
    #[arg(long)]
    setting: Option<String>,
    /// Saliency floor as a fraction of the map maximum.
    #[arg(long)]
    alpha: Option<f32>,
    /// Fraction of the map mean below which a location is weak.
    #[arg(long)]
    beta: Option<f32>,
    /// Local maxima kept per layer.
    #[arg(long)]
    max_maxima: Option<usize>,
    /// Thresholds swept per local map.
    #[arg(long)]
    threshold_count: Option<usize>,
    /// `both` or `either`.
    #[arg(long)]
    mask_rule: Option<String>,
    /// `all_locations` or `above_floor`.
    #[arg(long)]
    mean_scope: Option<String>,
    /// Layers to propose from, comma separated.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<String>>,
    /// Layer pooled for region descriptors.
    #[arg(long)]
    descriptor_layer: Option<String>,
    #[arg(long)]
    pool_grid: Option<usize>,
    /// Neighbors per image after prefiltering.
    #[arg(long)]
    neighbors: Option<usize>,
    /// Stored entries per score matrix.
    #[arg(long)]
    budget: Option<usize>,
    /// Regions kept per image.
    #[arg(long)]
    nu: Option<usize>,
    /// Out-neighbors kept per image.
    #[arg(long)]
    tau: Option<usize>,
    /// Drop the one-region-per-group constraint.
    #[arg(long)]
    no_groups: bool,
    #[arg(long)]
    max_sweeps: Option<usize>,
    /// Independent discovery runs with derived seeds.
    #[arg(long)]
    runs: Option<usize>,
    /// Keep several boxes per image.
    #[arg(long)]
    multi: bool,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    max_regions: Option<usize>,
    /// Parts for two-stage discovery.
    #[arg(long)]
    parts: Option<usize>,
    /// Stage-2 entries per matrix, used to derive the memory limit.
    #[arg(long)]
    k2: Option<usize>,
    /// Memory limit in stored score entries.
    #[arg(long)]
    memory_limit: Option<u64>,
    #[arg(long)]
    stage1_nu: Option<usize>,
    /// Take stage-1 neighbors from the whole collection.
    #[arg(long)]
    global_prefilter: bool,
    #[arg(long)]
    iou_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// Evaluate the two-stage solution instead of the discover runs.
    #[arg(long)]
    large: bool,
    /// Also write the per-class results as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn parse_enum<T: DeserializeOwned>(flag: &str, value: &str) -> Result<T, PipelineError> {
    serde_json::from_value(serde_json::Value::String(value.to_string()))
        .map_err(|_| PipelineError::Config(format!("--{flag}: unknown value '{value}'")))
}

fn read_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bad = |e: &dyn std::fmt::Display| PipelineError::Config(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(&e))
    } else {
        serde_yaml::from_str(&text).map_err(|e| bad(&e))
    }
}

fn build_config(cli: &Cli, a: &StageArgs) -> Result<PipelineConfig, PipelineError> {
    let mut c = match &cli.config {
        Some(p) => read_config(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($field:expr => $value:expr),* $(,)?) => {
            $(if let Some(v) = $value.clone() { $field = v; })*
        };
    }
    set! {
        c.seed => cli.seed,
        c.proposals.alpha => a.alpha,
        c.proposals.beta => a.beta,
        c.proposals.max_maxima => a.max_maxima,
        c.proposals.threshold_count => a.threshold_count,
        c.pool_grid => a.pool_grid,
        c.neighbors => a.neighbors,
        c.budget => a.budget,
        c.discovery.nu => a.nu,
        c.discovery.tau => a.tau,
        c.discovery.max_sweeps => a.max_sweeps,
        c.discovery.runs => a.runs,
        c.postprocess.nms_iou => a.nms_iou,
        c.postprocess.max_regions => a.max_regions,
        c.large.parts => a.parts,
        c.large.k2 => a.k2,
        c.evaluation.iou_threshold => a.iou_threshold,
    }
    if cli.workers.is_some() {
        c.workers = cli.workers;
    }
    if a.layers.is_some() {
        c.layers = a.layers.clone();
    }
    if a.descriptor_layer.is_some() {
        c.descriptor_layer = a.descriptor_layer.clone();
    }
    if a.memory_limit.is_some() {
        c.large.memory_limit = a.memory_limit;
    }
    if a.stage1_nu.is_some() {
        c.large.stage1_nu = a.stage1_nu;
    }
    if let Some(s) = &a.setting {
        c.setting = parse_enum("setting", s)?;
    }
    if let Some(s) = &a.mask_rule {
        c.proposals.mask_rule = parse_enum("mask-rule", s)?;
    }
    if let Some(s) = &a.mean_scope {
        c.proposals.mean_scope = parse_enum("mean-scope", s)?;
    }
    if a.no_groups {
        c.discovery.use_groups = false;
    }
    if a.multi {
        c.postprocess.multi = true;
    }
    if a.global_prefilter {
        c.large.global_prefilter = true;
    }
    c.validate()?;
    Ok(c)
}

fn status_line(stage: &str, status: StageStatus) {
    match status {
        StageStatus::Ran => println!("{stage}: done"),
        StageStatus::Skipped => println!("{stage}: up to date, skipped"),
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let state = StateDir::new(&cli.state_dir);
    let manifest = cli.manifest.clone().unwrap_or_else(|| state.manifest());
    match &cli.command {
        Command::Synth(s) => {
            let synth = SyntheticConfig {
                n_images: s.images,
                classes: s.classes,
                noise_level: s.noise,
                speckle: s.speckle,
                seed: cli.seed.unwrap_or(0),
                image_size: s.image_size,
                depth: s.depth,
                max_objects: s.max_objects,
                distractor_prob: s.distractor_prob,
                ..Default::default()
            };
            let m = run_synth(&state, &synth)?;
            println!("synth: wrote {} images to {}", m.images.len(), state.root().display());
        }
        Command::Propose(a) => status_line("propose", run_propose(&state, &manifest, &build_config(cli, a)?)?),
        Command::Score(a) => status_line("score", run_score(&state, &manifest, &build_config(cli, a)?)?),
        Command::Discover(a) => status_line("discover", run_discover(&state, &manifest, &build_config(cli, a)?)?),
        Command::DiscoverLarge(a) => status_line(
            "discover-large",
            run_discover_large(&state, &manifest, &build_config(cli, a)?)?,
        ),
        Command::Evaluate(e) => {
            let cfg = build_config(cli, &e.stage)?;
            let source = if e.large {
                EvalSource::DiscoverLarge
            } else {
                EvalSource::Discover
            };
            let (status, report) = run_evaluate(&state, &manifest, &cfg, source, e.csv.as_deref())?;
            status_line("evaluate", status);
            print!("{}", report.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
