//! File-based pipeline over a state directory.
//!
//! ```text
//! <state>/manifest.json
//! <state>/proposals.jsonl          header line, then one ProposalSet per image
//! <state>/features/<id>.npy        region descriptors, (proposals, dim)
//! <state>/scores/                  header.json, neighbors.json, scores.bin, scores.index.json
//! <state>/discovery/run-<r>.jsonl  header line, then one SolutionRecord per image
//! <state>/large/plan.json, part-<p>.jsonl, solution.jsonl
//! <state>/report.json, report.txt
//! ```
//!
//! Every stage output starts with a header carrying the stage config and a
//! hash of it chained with the upstream hashes. A stage whose outputs already
//! carry the current hash is skipped.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbox::BBox;
use crate::discovery::{
    postprocess_multi, postprocess_single, run, solution_records, DiscoveryConfig, DiscoveryError, DiscoveryMode,
    DiscoveryProblem, DiscoverySolution, SolutionRecord,
};
use crate::evaluation::{
    corloc, corret, detection_rate, format_csv, format_table, Averaging, EvalError, EvalReport, GroundTruth,
    ImageTruth, Predictions, SeedSummary, SyntheticConfig,
};
use crate::largescale::{
    merge_shortlists, plan_budget, run_part, run_stage_two, BudgetPlan, CollectionView, LargeScaleError, PartShortlist,
    TwoStageConfig,
};
use crate::matching::{
    prefilter_neighbors, read_score_files, score_all_pairs, write_score_files, CosineKernel, NeighborSets,
    ScoreFileError, DEFAULT_NEIGHBORS,
};
use crate::proposals::{generate, ProposalError, ProposalParams, ProposalSet};
use crate::region_features::{
    describe_regions, load_descriptor_cache, save_descriptor_cache, RegionDescriptor, DEFAULT_POOL_GRID,
};
use crate::seed::{content_hash, derive_seed, hex};
use crate::tensor_store::{
    load_descriptor, load_manifest, load_tensor, validate_manifest, write_atomic, DatasetManifest, FeatureTensor,
    GlobalDescriptor, ImageEntry, ManifestError, TensorError, Violation,
};

/// Score-matrix budget of single-stage runs.
pub const DEFAULT_BUDGET: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// One problem over the pooled collection.
    #[default]
    Discovery,
    /// Neighbors restricted to the image's class; results averaged per class.
    Colocalization,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoverySettings {
    pub nu: usize,
    pub tau: usize,
    pub use_groups: bool,
    pub max_sweeps: usize,
    /// Independent runs, each with its own derived seed.
    pub runs: usize,
}

impl Default for DiscoverySettings {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        Self {
            nu: d.nu,
            tau: d.tau,
            use_groups: d.use_groups,
            max_sweeps: d.max_sweeps,
            runs: 1,
        }
    }
}

impl DiscoverySettings {
    pub fn config(&self, seed: u64) -> DiscoveryConfig {
        DiscoveryConfig {
            nu: self.nu,
            tau: self.tau,
            use_groups: self.use_groups,
            max_sweeps: self.max_sweeps,
            seed,
            mode: DiscoveryMode::Standard,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessSettings {
    /// Keep up to `max_regions` boxes instead of one.
    pub multi: bool,
    pub nms_iou: f64,
    pub max_regions: usize,
}

impl Default for PostprocessSettings {
    fn default() -> Self {
        Self {
            multi: false,
            nms_iou: 0.7,
            max_regions: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LargeScaleSettings {
    pub parts: usize,
    /// Stage-2 budget used to derive `M = n * N * k2` when no limit is set.
    pub k2: usize,
    pub memory_limit: Option<u64>,
    /// Stage-1 `nu`; `K2` when unset.
    pub stage1_nu: Option<usize>,
    pub global_prefilter: bool,
}

impl Default for LargeScaleSettings {
    fn default() -> Self {
        Self {
            parts: 5,
            k2: 50,
            memory_limit: None,
            stage1_nu: None,
            global_prefilter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    pub iou_threshold: f64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self { iou_threshold: 0.5 }
    }
}

/// Every tunable of the pipeline in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Thread cap; all cores when unset. Never affects outputs.
    pub workers: Option<usize>,
    pub setting: Setting,
    pub proposals: ProposalParams,
    /// Layers to propose from; all manifest layers when unset.
    pub layers: Option<Vec<String>>,
    /// Layer pooled for region descriptors; the coarsest when unset.
    pub descriptor_layer: Option<String>,
    pub pool_grid: usize,
    pub neighbors: usize,
    pub budget: usize,
    pub discovery: DiscoverySettings,
    pub postprocess: PostprocessSettings,
    pub large: LargeScaleSettings,
    pub evaluation: EvaluationSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            setting: Setting::default(),
            proposals: ProposalParams::default(),
            layers: None,
            descriptor_layer: None,
            pool_grid: DEFAULT_POOL_GRID,
            neighbors: DEFAULT_NEIGHBORS,
            budget: DEFAULT_BUDGET,
            discovery: DiscoverySettings::default(),
            postprocess: PostprocessSettings::default(),
            large: LargeScaleSettings::default(),
            evaluation: EvaluationSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        self.proposals
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.discovery
            .config(0)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.pool_grid == 0 {
            return bad("pool_grid must be at least 1");
        }
        if self.neighbors == 0 || self.budget == 0 {
            return bad("neighbors and budget must be at least 1");
        }
        if self.discovery.runs == 0 {
            return bad("runs must be at least 1");
        }
        if !(self.postprocess.nms_iou > 0.0 && self.postprocess.nms_iou <= 1.0) || self.postprocess.max_regions == 0 {
            return bad("nms_iou must lie in (0, 1] and max_regions be at least 1");
        }
        if self.large.parts == 0 || self.large.k2 == 0 {
            return bad("parts and k2 must be at least 1");
        }
        if !(0.0..1.0).contains(&self.evaluation.iou_threshold) {
            return bad("iou_threshold must lie in [0, 1)");
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1");
        }
        Ok(())
    }

    /// Seed of discovery run `r`.
    pub fn run_seed(&self, r: usize) -> u64 {
        derive_seed(self.seed, &format!("discover-{r}"))
    }

    fn propose_part(&self) -> serde_json::Value {
        serde_json::json!({
            "proposals": self.proposals,
            "layers": self.layers,
            "descriptor_layer": self.descriptor_layer,
            "pool_grid": self.pool_grid,
        })
    }

    fn score_part(&self) -> serde_json::Value {
        serde_json::json!({
            "setting": self.setting,
            "neighbors": self.neighbors,
            "budget": self.budget,
        })
    }

    fn discover_part(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "discovery": self.discovery,
            "postprocess": self.postprocess,
        })
    }

    fn large_part(&self) -> serde_json::Value {
        serde_json::json!({
            "seed": self.seed,
            "setting": self.setting,
            "neighbors": self.neighbors,
            "large": self.large,
            "discovery": self.discovery,
            "postprocess": self.postprocess,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("manifest has {} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    InvalidManifest(Vec<Violation>),
    #[error("missing input from stage '{stage}': {path}")]
    MissingStage { stage: &'static str, path: PathBuf },
    #[error("{image_id}: {source}")]
    Tensor {
        image_id: String,
        #[source]
        source: TensorError,
    },
    #[error("{image_id}: {source}")]
    Proposal {
        image_id: String,
        #[source]
        source: ProposalError,
    },
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    LargeScale(#[from] LargeScaleError),
    #[error(transparent)]
    Scores(#[from] ScoreFileError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// Bad input or configuration, as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Self::Config(_)
                | Self::InvalidManifest(_)
                | Self::MissingStage { .. }
                | Self::Eval(_)
                | Self::Manifest(ManifestError::Parse { .. })
                | Self::Discovery(DiscoveryError::InvalidConfig(_))
                | Self::LargeScale(LargeScaleError::ZeroBudget { .. })
                | Self::LargeScale(LargeScaleError::InvalidPlan(_))
                | Self::LargeScale(LargeScaleError::PartTooSmall { .. })
        )
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Outputs already matched the config hash.
    Skipped,
}

/// First line of every stage output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageHeader {
    pub stage: String,
    pub config_hash: String,
    pub config: serde_json::Value,
}

impl StageHeader {
    fn new(stage: &str, upstream: &[&str], config: serde_json::Value) -> Self {
        let config_hash = content_hash(&(stage, upstream, &config));
        Self {
            stage: stage.to_string(),
            config_hash,
            config,
        }
    }
}

/// Paths inside a state directory.
#[derive(Debug, Clone)]
pub struct StateDir {
    root: PathBuf,
}

impl StateDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn proposals(&self) -> PathBuf {
        self.root.join("proposals.jsonl")
    }

    pub fn features(&self, image_id: &str) -> PathBuf {
        self.root.join("features").join(format!("{image_id}.npy"))
    }

    pub fn scores_dir(&self) -> PathBuf {
        self.root.join("scores")
    }

    pub fn discovery_run(&self, r: usize) -> PathBuf {
        self.root.join("discovery").join(format!("run-{r}.jsonl"))
    }

    pub fn large_dir(&self) -> PathBuf {
        self.root.join("large")
    }

    pub fn report_json(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn report_txt(&self) -> PathBuf {
        self.root.join("report.txt")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    write_atomic(path, bytes).map_err(|e| match e {
        TensorError::Io { path, source } => PipelineError::Io { path, source },
        other => PipelineError::Corrupt {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    write_bytes(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_jsonl<T: Serialize>(path: &Path, header: &StageHeader, rows: &[T]) -> Result<()> {
    let mut out = serde_json::to_vec(header).expect("serializable");
    out.push(b'\n');
    for row in rows {
        out.extend(serde_json::to_vec(row).expect("serializable"));
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, stage: &'static str) -> Result<(StageHeader, Vec<T>)> {
    let file = fs::File::open(path).map_err(|_| PipelineError::MissingStage {
        stage,
        path: path.to_path_buf(),
    })?;
    let corrupt = |line: usize, e: &dyn std::fmt::Display| PipelineError::Corrupt {
        path: path.to_path_buf(),
        message: format!("line {line}: {e}"),
    };
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| corrupt(1, &"empty file"))?
        .map_err(io_err(path))?;
    let header: StageHeader = serde_json::from_str(&header_line).map_err(|e| corrupt(1, &e))?;
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| corrupt(n + 2, &e))?);
    }
    Ok((header, rows))
}

/// Hash recorded in the first line of a JSONL file, if readable.
fn jsonl_hash(path: &Path) -> Option<String> {
    let file = fs::File::open(path).ok()?;
    let line = BufReader::new(file).lines().next()?.ok()?;
    serde_json::from_str::<StageHeader>(&line).ok().map(|h| h.config_hash)
}

fn json_hash(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice::<StageHeader>(&bytes)
        .ok()
        .map(|h| h.config_hash)
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Loads and validates the manifest.
pub fn open_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(PipelineError::MissingStage {
            stage: "synth or extract",
            path: path.to_path_buf(),
        });
    }
    let manifest = load_manifest(path)?;
    let violations = validate_manifest(&manifest);
    if !violations.is_empty() {
        return Err(PipelineError::InvalidManifest(violations));
    }
    Ok(manifest)
}

fn manifest_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(bytes)))
}

/// Layers to propose from, and the one pooled for descriptors.
fn resolve_layers(manifest: &DatasetManifest, entry: &ImageEntry, cfg: &PipelineConfig) -> Result<Vec<String>> {
    let layers = match &cfg.layers {
        Some(l) => l.clone(),
        None => manifest.layer_tags(),
    };
    if layers.is_empty() {
        return Err(PipelineError::Config("no layers to propose from".into()));
    }
    for l in layers.iter().chain(cfg.descriptor_layer.as_ref()) {
        if !entry.tensor_paths.contains_key(l) {
            return Err(PipelineError::Config(format!(
                "image '{}' has no tensor for layer '{l}'",
                entry.image_id
            )));
        }
    }
    Ok(layers)
}

/// Proposals from `tensors` and their descriptors pooled from `pooled`.
pub fn process_image(
    image_id: &str,
    image_size: (u32, u32),
    tensors: &[FeatureTensor],
    pooled: &FeatureTensor,
    params: &ProposalParams,
    pool_grid: usize,
) -> Result<(ProposalSet, Vec<RegionDescriptor>)> {
    let proposals = generate(tensors, params, image_id, image_size).map_err(|source| PipelineError::Proposal {
        image_id: image_id.to_string(),
        source,
    })?;
    let regions = describe_regions(image_id, pooled, &proposals.boxes(), image_size, pool_grid);
    Ok((proposals, regions))
}

/// The tensor with the fewest grid cells.
pub fn coarsest(tensors: &[FeatureTensor]) -> Option<&FeatureTensor> {
    tensors.iter().min_by_key(|t| t.height() * t.width())
}

fn load_image_tensors(manifest: &DatasetManifest, entry: &ImageEntry, layers: &[String]) -> Result<Vec<FeatureTensor>> {
    layers
        .iter()
        .map(|l| {
            load_tensor(&manifest.resolve(&entry.tensor_paths[l]))
                .map(|t| t.with_layer_tag(l.clone()))
                .map_err(|source| PipelineError::Tensor {
                    image_id: entry.image_id.clone(),
                    source,
                })
        })
        .collect()
}

fn propose_header(manifest_path: &Path, cfg: &PipelineConfig) -> Result<StageHeader> {
    let m = manifest_hash(manifest_path)?;
    Ok(StageHeader::new("propose", &[&m], cfg.propose_part()))
}

/// Proposals and descriptor caches for every manifest image.
pub fn run_propose(state: &StateDir, manifest_path: &Path, cfg: &PipelineConfig) -> Result<StageStatus> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let header = propose_header(manifest_path, cfg)?;
    let out = state.proposals();
    let caches_present = manifest.images.iter().all(|e| state.features(&e.image_id).exists());
    if jsonl_hash(&out).as_deref() == Some(header.config_hash.as_str()) && caches_present {
        return Ok(StageStatus::Skipped);
    }
    let features_dir = state.root().join("features");
    fs::create_dir_all(&features_dir).map_err(io_err(&features_dir))?;
    let sets = with_workers(cfg.workers, || {
        manifest
            .images
            .par_iter()
            .map(|entry| {
                let layers = resolve_layers(&manifest, entry, cfg)?;
                let tensors = load_image_tensors(&manifest, entry, &layers)?;
                let extra = match &cfg.descriptor_layer {
                    Some(d) if !layers.contains(d) => load_image_tensors(&manifest, entry, std::slice::from_ref(d))?,
                    _ => Vec::new(),
                };
                let pooled = match &cfg.descriptor_layer {
                    Some(tag) => tensors
                        .iter()
                        .chain(&extra)
                        .find(|t| t.layer_tag() == tag)
                        .expect("loaded above"),
                    None => coarsest(&tensors).expect("at least one layer"),
                };
                let size = (entry.original_width, entry.original_height);
                let (set, regions) =
                    process_image(&entry.image_id, size, &tensors, pooled, &cfg.proposals, cfg.pool_grid)?;
                let dim = cfg.pool_grid * cfg.pool_grid * pooled.depth();
                save_descriptor_cache(&state.features(&entry.image_id), &regions, dim).map_err(|source| {
                    PipelineError::Tensor {
                        image_id: entry.image_id.clone(),
                        source,
                    }
                })?;
                log::debug!("{}: {} proposals", entry.image_id, set.len());
                Ok(set)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    write_jsonl(&out, &header, &sets)?;
    log::info!("proposed regions for {} images", sets.len());
    Ok(StageStatus::Ran)
}

/// Reads `proposals.jsonl` in manifest order.
pub fn load_proposals(state: &StateDir, manifest: &DatasetManifest) -> Result<(StageHeader, Vec<ProposalSet>)> {
    let path = state.proposals();
    let (header, sets): (StageHeader, Vec<ProposalSet>) = read_jsonl(&path, "propose")?;
    let by_id: BTreeMap<&str, &ProposalSet> = sets.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let ordered = manifest
        .images
        .iter()
        .map(|e| {
            by_id
                .get(e.image_id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| PipelineError::Corrupt {
                    path: path.clone(),
                    message: format!("no proposals for image '{}'", e.image_id),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, ordered))
}

fn load_global_descriptors(manifest: &DatasetManifest) -> Result<Vec<GlobalDescriptor>> {
    manifest
        .images
        .iter()
        .map(|e| {
            load_descriptor(&manifest.resolve(&e.descriptor_path), &e.image_id).map_err(|source| {
                PipelineError::Tensor {
                    image_id: e.image_id.clone(),
                    source,
                }
            })
        })
        .collect()
}

fn load_regions(
    state: &StateDir,
    manifest: &DatasetManifest,
    sets: &[ProposalSet],
) -> Result<Vec<Vec<RegionDescriptor>>> {
    manifest
        .images
        .iter()
        .zip(sets)
        .map(|(e, set)| {
            let path = state.features(&e.image_id);
            if !path.exists() {
                return Err(PipelineError::MissingStage { stage: "propose", path });
            }
            let regions = load_descriptor_cache(&path, &e.image_id).map_err(|source| PipelineError::Tensor {
                image_id: e.image_id.clone(),
                source,
            })?;
            if regions.len() != set.len() {
                return Err(PipelineError::Corrupt {
                    path,
                    message: format!("{} descriptors for {} proposals", regions.len(), set.len()),
                });
            }
            Ok(regions)
        })
        .collect()
}

/// `N(i)` over the manifest; in the colocalization setting, only images of
/// the same class are candidates.
pub fn build_neighbors(
    manifest: &DatasetManifest,
    descriptors: &[GlobalDescriptor],
    cfg: &PipelineConfig,
) -> NeighborSets {
    match cfg.setting {
        Setting::Discovery => prefilter_neighbors(descriptors, cfg.neighbors),
        Setting::Colocalization => {
            let mut classes: BTreeMap<Option<&str>, Vec<usize>> = BTreeMap::new();
            for (i, e) in manifest.images.iter().enumerate() {
                classes.entry(e.class_label.as_deref()).or_default().push(i);
            }
            let mut neighbors = vec![Vec::new(); descriptors.len()];
            for members in classes.values() {
                let descs: Vec<GlobalDescriptor> = members.iter().map(|&i| descriptors[i].clone()).collect();
                let local = prefilter_neighbors(&descs, cfg.neighbors);
                for (l, &i) in members.iter().enumerate() {
                    neighbors[i] = local.neighbors[l].iter().map(|&m| members[m]).collect();
                }
            }
            NeighborSets {
                image_ids: descriptors.iter().map(|d| d.image_id.clone()).collect(),
                neighbors,
            }
        }
    }
}

fn score_header(propose_hash: &str, cfg: &PipelineConfig) -> StageHeader {
    StageHeader::new("score", &[propose_hash], cfg.score_part())
}

/// Neighbor prefiltering and sparse score matrices.
pub fn run_score(state: &StateDir, manifest_path: &Path, cfg: &PipelineConfig) -> Result<StageStatus> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let (prop_header, sets) = load_proposals(state, &manifest)?;
    let header = score_header(&prop_header.config_hash, cfg);
    let dir = state.scores_dir();
    let header_path = dir.join("header.json");
    if json_hash(&header_path).as_deref() == Some(header.config_hash.as_str())
        && dir.join(crate::matching::SCORE_INDEX_FILE).exists()
    {
        return Ok(StageStatus::Skipped);
    }
    let descriptors = load_global_descriptors(&manifest)?;
    let regions = load_regions(state, &manifest, &sets)?;
    let neighbors = build_neighbors(&manifest, &descriptors, cfg);
    let scores = with_workers(cfg.workers, || {
        score_all_pairs(&CosineKernel, &regions, &neighbors, cfg.budget, None)
    });
    let ids: Vec<String> = manifest.images.iter().map(|e| e.image_id.clone()).collect();
    write_score_files(&dir, &ids, &scores)?;
    write_json(&dir.join("neighbors.json"), &neighbors)?;
    write_json(&header_path, &header)?;
    log::info!(
        "scored {} pairs, {} stored entries",
        scores.len(),
        scores.values().map(|m| m.len()).sum::<usize>()
    );
    Ok(StageStatus::Ran)
}

fn boxes_for(
    problem: &DiscoveryProblem,
    solution: &DiscoverySolution,
    i: usize,
    boxes: &[BBox],
    post: &PostprocessSettings,
) -> Result<Vec<BBox>> {
    if solution.x[i].is_empty() {
        return Ok(Vec::new());
    }
    Ok(if post.multi {
        postprocess_multi(problem, solution, i, boxes, post.nms_iou, post.max_regions)?
    } else {
        vec![postprocess_single(problem, solution, i, boxes)?]
    })
}

/// Solution records with final boxes; `boxes[i]` indexes the problem's
/// proposals of image `i`.
pub fn finalize(
    problem: &DiscoveryProblem,
    solution: &DiscoverySolution,
    boxes: &[Vec<BBox>],
    post: &PostprocessSettings,
) -> Result<Vec<SolutionRecord>> {
    let mut records = solution_records(problem, solution);
    for (i, r) in records.iter_mut().enumerate() {
        r.boxes = boxes_for(problem, solution, i, &boxes[i], post)?;
    }
    Ok(records)
}

fn discover_header(score_hash: &str, cfg: &PipelineConfig) -> StageHeader {
    StageHeader::new("discover", &[score_hash], cfg.discover_part())
}

/// Single-stage discovery, once per configured run.
pub fn run_discover(state: &StateDir, manifest_path: &Path, cfg: &PipelineConfig) -> Result<StageStatus> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let score_header_path = state.scores_dir().join("header.json");
    let score_header: StageHeader = read_json(&score_header_path).map_err(|_| PipelineError::MissingStage {
        stage: "score",
        path: score_header_path.clone(),
    })?;
    let header = discover_header(&score_header.config_hash, cfg);
    let outputs: Vec<PathBuf> = (0..cfg.discovery.runs).map(|r| state.discovery_run(r)).collect();
    if outputs
        .iter()
        .all(|p| jsonl_hash(p).as_deref() == Some(header.config_hash.as_str()))
    {
        return Ok(StageStatus::Skipped);
    }

    let (_, sets) = load_proposals(state, &manifest)?;
    let (ids, scores) = read_score_files(&state.scores_dir())?;
    let neighbors: NeighborSets = read_json(&state.scores_dir().join("neighbors.json"))?;
    let manifest_ids: Vec<String> = manifest.images.iter().map(|e| e.image_id.clone()).collect();
    if ids != manifest_ids || neighbors.image_ids != manifest_ids {
        return Err(PipelineError::Corrupt {
            path: state.scores_dir(),
            message: "score files do not match the manifest images".into(),
        });
    }
    let groups: Vec<Vec<usize>> = sets.iter().map(ProposalSet::group_ids).collect();
    let boxes: Vec<Vec<BBox>> = sets.iter().map(ProposalSet::boxes).collect();
    let problem = DiscoveryProblem::new(ids, groups, neighbors.neighbors, scores)?;

    with_workers(cfg.workers, || -> Result<()> {
        for (r, path) in outputs.iter().enumerate() {
            let run_header = StageHeader {
                config: serde_json::json!({ "run": r, "run_seed": cfg.run_seed(r), "settings": header.config }),
                ..header.clone()
            };
            let solution = run(&problem, &cfg.discovery.config(cfg.run_seed(r)))?;
            log::info!(
                "run {r}: objective {:.4} after {} sweep(s)",
                solution.objective,
                solution.sweeps_run
            );
            let records = finalize(&problem, &solution, &boxes, &cfg.postprocess)?;
            write_jsonl(path, &run_header, &records)?;
        }
        Ok(())
    })?;
    Ok(StageStatus::Ran)
}

/// `M`, `K1`, `K2` and the partition for `n` images.
pub fn large_plan(image_ids: &[String], cfg: &PipelineConfig) -> Result<BudgetPlan> {
    let n = image_ids.len();
    let m = cfg
        .large
        .memory_limit
        .unwrap_or(n as u64 * cfg.neighbors as u64 * cfg.large.k2 as u64);
    Ok(plan_budget(
        image_ids,
        cfg.large.parts,
        cfg.neighbors,
        m,
        derive_seed(cfg.seed, "partition"),
    )?)
}

/// Stage-1 and stage-2 settings derived from the pipeline config.
pub fn two_stage_config(cfg: &PipelineConfig) -> TwoStageConfig {
    TwoStageConfig {
        stage1: DiscoveryConfig {
            mode: DiscoveryMode::Proxy,
            ..cfg.discovery.config(derive_seed(cfg.seed, "large-stage1"))
        },
        stage1_nu: cfg.large.stage1_nu,
        stage2: cfg.discovery.config(derive_seed(cfg.seed, "large-stage2")),
        global_prefilter: cfg.large.global_prefilter,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ShortlistRecord {
    image_id: String,
    proposals: Vec<usize>,
}

/// Two-stage discovery; each finished part is kept across reruns.
pub fn run_discover_large(state: &StateDir, manifest_path: &Path, cfg: &PipelineConfig) -> Result<StageStatus> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let (prop_header, sets) = load_proposals(state, &manifest)?;
    let header = StageHeader::new("discover-large", &[&prop_header.config_hash], cfg.large_part());
    let dir = state.large_dir();
    let solution_path = dir.join("solution.jsonl");
    if jsonl_hash(&solution_path).as_deref() == Some(header.config_hash.as_str()) {
        return Ok(StageStatus::Skipped);
    }

    let ids: Vec<String> = manifest.images.iter().map(|e| e.image_id.clone()).collect();
    let plan = large_plan(&ids, cfg)?;
    let plan_header = StageHeader {
        config: serde_json::to_value(&plan).expect("serializable"),
        ..header.clone()
    };
    write_json(&dir.join("plan.json"), &plan_header)?;
    log::info!(
        "budget plan: M = {}, K1 = {}, K2 = {}",
        plan.memory_limit,
        plan.k1,
        plan.k2
    );

    let descriptors = load_global_descriptors(&manifest)?;
    let regions = load_regions(state, &manifest, &sets)?;
    let groups: Vec<Vec<usize>> = sets.iter().map(ProposalSet::group_ids).collect();
    let view = CollectionView {
        descriptors: &descriptors,
        regions: &regions,
        groups: &groups,
    };
    let two = two_stage_config(cfg);
    let global = match cfg.setting {
        Setting::Colocalization => Some(build_neighbors(&manifest, &descriptors, cfg)),
        Setting::Discovery if cfg.large.global_prefilter => Some(prefilter_neighbors(&descriptors, cfg.neighbors)),
        Setting::Discovery => None,
    };

    let parts = with_workers(cfg.workers, || {
        (0..plan.parts)
            .into_par_iter()
            .map(|p| -> Result<PartShortlist> {
                let path = dir.join(format!("part-{p}.jsonl"));
                if jsonl_hash(&path).as_deref() == Some(header.config_hash.as_str()) {
                    let (_, rows): (_, Vec<ShortlistRecord>) = read_jsonl(&path, "discover-large")?;
                    let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
                    let images = rows
                        .into_iter()
                        .map(|r| {
                            index
                                .get(r.image_id.as_str())
                                .map(|&i| (i, r.proposals))
                                .ok_or_else(|| PipelineError::Corrupt {
                                    path: path.clone(),
                                    message: format!("unknown image '{}'", r.image_id),
                                })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    return Ok(PartShortlist {
                        part: p,
                        images,
                        stored_entries: 0,
                    });
                }
                let shortlist = run_part(&view, &plan, p, &two, global.as_ref())?;
                let rows: Vec<ShortlistRecord> = shortlist
                    .images
                    .iter()
                    .map(|(i, keep)| ShortlistRecord {
                        image_id: ids[*i].clone(),
                        proposals: keep.clone(),
                    })
                    .collect();
                write_jsonl(&path, &header, &rows)?;
                log::info!(
                    "part {p}: {} images, {} stored entries",
                    rows.len(),
                    shortlist.stored_entries
                );
                Ok(shortlist)
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let shortlists = merge_shortlists(ids.len(), &parts);
    let stage2 = with_workers(cfg.workers, || run_stage_two(&view, &plan, shortlists, &two.stage2))?;
    log::info!(
        "stage 2: objective {:.4}, {} stored entries",
        stage2.solution.objective,
        stage2.stored_entries
    );
    let boxes: Vec<Vec<BBox>> = sets
        .iter()
        .zip(&stage2.shortlists)
        .map(|(s, keep)| keep.iter().map(|&k| s.proposals[k].bbox).collect())
        .collect();
    let mut records = finalize(&stage2.problem, &stage2.solution, &boxes, &cfg.postprocess)?;
    for (i, r) in records.iter_mut().enumerate() {
        r.selected = stage2.original_selection(i);
    }
    write_jsonl(&solution_path, &header, &records)?;
    Ok(StageStatus::Ran)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSource {
    #[default]
    Discover,
    DiscoverLarge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub corloc: EvalReport,
    pub detection_rate: EvalReport,
    pub corret: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub header: StageHeader,
    pub source: EvalSource,
    pub runs: Vec<RunReport>,
    pub corloc: SeedSummary,
    pub detection_rate: SeedSummary,
    pub corret: Option<SeedSummary>,
}

impl PipelineReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "source: {:?}\nruns: {}\nCorLoc: {}\ndetection rate: {}\n",
            self.source,
            self.runs.len(),
            self.corloc,
            self.detection_rate
        );
        if let Some(c) = &self.corret {
            out.push_str(&format!("CorRet: {c}\n"));
        }
        if let Some(first) = self.runs.first() {
            out.push_str("\nrun 0 per class:\n");
            let mut reports = vec![first.corloc.clone(), first.detection_rate.clone()];
            reports.extend(first.corret.clone());
            out.push_str(&format_table(&reports));
        }
        out
    }

    /// One CSV block per run, prefixed by a `run` column.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (n, r) in self.runs.iter().enumerate() {
            let mut reports = vec![r.corloc.clone(), r.detection_rate.clone()];
            reports.extend(r.corret.clone());
            for (k, line) in format_csv(&reports).lines().enumerate() {
                if k == 0 && n > 0 {
                    continue;
                }
                let prefix = if k == 0 { "run".to_string() } else { r.run.to_string() };
                out.push_str(&format!("{prefix},{line}\n"));
            }
        }
        out
    }
}

/// Ground truth from the manifest; images without boxes are left out.
pub fn manifest_ground_truth(manifest: &DatasetManifest) -> GroundTruth {
    manifest
        .images
        .iter()
        .filter_map(|e| {
            let boxes: Vec<BBox> = e.ground_truth.as_ref()?.iter().map(|g| g.bbox).collect();
            (!boxes.is_empty()).then(|| {
                (
                    e.image_id.clone(),
                    ImageTruth {
                        boxes,
                        class_label: e.class_label.clone(),
                    },
                )
            })
        })
        .collect()
}

/// CorLoc of the top box, detection rate of all boxes and CorRet of the
/// graph for one solution.
pub fn evaluate_records(
    records: &[SolutionRecord],
    manifest: &DatasetManifest,
    cfg: &PipelineConfig,
    run: usize,
) -> Result<RunReport> {
    let truth = manifest_ground_truth(manifest);
    if truth.is_empty() {
        return Err(PipelineError::Config("manifest has no ground-truth boxes".into()));
    }
    let averaging = match cfg.setting {
        Setting::Discovery => Averaging::Pooled,
        Setting::Colocalization => Averaging::ClassMean,
    };
    let top: Predictions = records
        .iter()
        .map(|r| (r.image_id.clone(), r.boxes.iter().take(1).copied().collect()))
        .collect();
    let all: Predictions = records.iter().map(|r| (r.image_id.clone(), r.boxes.clone())).collect();
    let thr = cfg.evaluation.iou_threshold;
    let labels: BTreeMap<String, String> = manifest
        .images
        .iter()
        .filter_map(|e| Some((e.image_id.clone(), e.class_label.clone()?)))
        .collect();
    let corret_report = if labels.len() == manifest.images.len() {
        let edges = records
            .iter()
            .map(|r| (r.image_id.clone(), r.neighbors.clone()))
            .collect();
        Some(corret(&edges, &labels, averaging)?)
    } else {
        None
    };
    Ok(RunReport {
        run,
        corloc: corloc(&top, &truth, thr, averaging)?,
        detection_rate: detection_rate(&all, &truth, thr, averaging)?,
        corret: corret_report,
    })
}

/// Scores the solutions of `source` against the manifest ground truth and
/// writes `report.json`, `report.txt` and optionally a CSV.
pub fn run_evaluate(
    state: &StateDir,
    manifest_path: &Path,
    cfg: &PipelineConfig,
    source: EvalSource,
    csv: Option<&Path>,
) -> Result<(StageStatus, PipelineReport)> {
    cfg.validate()?;
    let manifest = open_manifest(manifest_path)?;
    let inputs: Vec<PathBuf> = match source {
        EvalSource::Discover => (0..cfg.discovery.runs).map(|r| state.discovery_run(r)).collect(),
        EvalSource::DiscoverLarge => vec![state.large_dir().join("solution.jsonl")],
    };
    let stage = match source {
        EvalSource::Discover => "discover",
        EvalSource::DiscoverLarge => "discover-large",
    };
    let mut upstream = Vec::new();
    let mut solutions = Vec::new();
    for p in &inputs {
        let (h, records): (StageHeader, Vec<SolutionRecord>) = read_jsonl(p, stage)?;
        upstream.push(h.config_hash);
        solutions.push(records);
    }
    let upstream_refs: Vec<&str> = upstream.iter().map(String::as_str).collect();
    let header = StageHeader::new(
        "evaluate",
        &upstream_refs,
        serde_json::json!({ "source": source, "setting": cfg.setting, "evaluation": cfg.evaluation }),
    );
    let report_path = state.report_json();
    if let Ok(existing) = read_json::<PipelineReport>(&report_path) {
        let csv_ok = csv.is_none_or(Path::exists);
        if existing.header.config_hash == header.config_hash && state.report_txt().exists() && csv_ok {
            return Ok((StageStatus::Skipped, existing));
        }
    }
    let runs = solutions
        .iter()
        .enumerate()
        .map(|(r, recs)| evaluate_records(recs, &manifest, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let summary = |f: &dyn Fn(&RunReport) -> f64| SeedSummary::new(runs.iter().map(f).collect());
    let report = PipelineReport {
        header,
        source,
        corloc: summary(&|r| r.corloc.overall),
        detection_rate: summary(&|r| r.detection_rate.overall),
        corret: runs
            .iter()
            .all(|r| r.corret.is_some())
            .then(|| summary(&|r| r.corret.as_ref().map_or(0.0, |c| c.overall))),
        runs,
    };
    write_json(&report_path, &report)?;
    write_bytes(&state.report_txt(), report.to_text().as_bytes())?;
    if let Some(p) = csv {
        write_bytes(p, report.to_csv().as_bytes())?;
    }
    Ok((StageStatus::Ran, report))
}

/// Writes a synthetic dataset into the state directory.
pub fn run_synth(state: &StateDir, synth: &SyntheticConfig) -> Result<DatasetManifest> {
    if synth.classes == 0 || synth.n_images == 0 {
        return Err(PipelineError::Config("images and classes must be at least 1".into()));
    }
    let dataset = synth.generate();
    Ok(dataset.write(state.root())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_changes_with_any_field() {
        let base = PipelineConfig::default();
        let h = |c: &PipelineConfig| propose_like(c);
        fn propose_like(c: &PipelineConfig) -> String {
            content_hash(c)
        }
        let mut other = base.clone();
        other.proposals.beta = 0.4;
        assert_ne!(h(&base), h(&other));
        assert_eq!(h(&base), h(&base.clone()));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        let c: PipelineConfig = serde_json::from_str(r#"{"discovery": {"nu": 7}}"#).unwrap();
        assert_eq!(c.discovery.nu, 7);
        assert_eq!(c.discovery.tau, 10);
    }

    #[test]
    fn stage_hashes_chain() {
        let cfg = PipelineConfig::default();
        let a = score_header("p1", &cfg);
        let b = score_header("p2", &cfg);
        assert_ne!(a.config_hash, b.config_hash);
        let mut cfg2 = cfg.clone();
        cfg2.budget = 10;
        assert_ne!(a.config_hash, score_header("p1", &cfg2).config_hash);
        // Discovery settings do not touch the score hash.
        cfg2 = cfg.clone();
        cfg2.discovery.nu = 2;
        assert_eq!(a.config_hash, score_header("p1", &cfg2).config_hash);
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::default();
        c.postprocess.nms_iou = 0.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.discovery.nu = 0;
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        assert!(PipelineConfig::default().validate().is_ok());
    }
}
