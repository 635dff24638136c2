//! Two-stage discovery under a fixed score-memory budget.
//!
//! Stage 1 splits the collection into `k` random parts and runs proxy
//! discovery inside each part with a large per-matrix budget `K1`, keeping
//! `K2` promising proposals per image. Stage 2 runs ordinary discovery over
//! the whole collection, restricted to those shortlists, at budget `K2`.
//! Both budgets are chosen so every phase stores at most `M` entries:
//!
//! ```text
//! K1 = floor(M / (N * floor(n / k)))      K2 = floor(M / (n * N))
//! ```

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discovery::{run, DiscoveryConfig, DiscoveryError, DiscoveryMode, DiscoveryProblem, DiscoverySolution};
use crate::matching::{prefilter_neighbors, score_all_pairs, CosineKernel, NeighborSets};
use crate::region_features::RegionDescriptor;
use crate::seed::derive_seed;
use crate::tensor_store::GlobalDescriptor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    /// `M`, in stored score entries.
    pub memory_limit: u64,
    /// `k`.
    pub parts: usize,
    /// `N`.
    pub neighbor_cap: usize,
    pub k1: usize,
    pub k2: usize,
    pub part_assignment: BTreeMap<String, usize>,
}

impl BudgetPlan {
    /// Image indices of `part`, ascending, relative to `image_ids`.
    pub fn members(&self, image_ids: &[String], part: usize) -> Vec<usize> {
        image_ids
            .iter()
            .enumerate()
            .filter(|(_, id)| self.part_assignment.get(*id) == Some(&part))
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LargeScaleError {
    #[error("memory limit {memory_limit} leaves no entries per matrix for {n} images with {neighbor_cap} neighbors")]
    ZeroBudget {
        memory_limit: u64,
        n: usize,
        neighbor_cap: usize,
    },
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("part {part} has {size} image(s); at least 2 are needed")]
    PartTooSmall { part: usize, size: usize },
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
}

/// `(K1, K2)` for `n` images, `k` parts, `N` neighbors and limit `M`.
pub fn budgets(n: usize, k: usize, neighbor_cap: usize, memory_limit: u64) -> Result<(usize, usize), LargeScaleError> {
    if k == 0 || n < k || neighbor_cap == 0 {
        return Err(LargeScaleError::InvalidPlan(format!(
            "need k >= 1, n >= k and N >= 1 (n = {n}, k = {k}, N = {neighbor_cap})"
        )));
    }
    let per_part = (n / k) as u64;
    let k1 = memory_limit / (neighbor_cap as u64 * per_part);
    let k2 = memory_limit / (n as u64 * neighbor_cap as u64);
    if k2 == 0 {
        return Err(LargeScaleError::ZeroBudget {
            memory_limit,
            n,
            neighbor_cap,
        });
    }
    Ok((k1 as usize, k2 as usize))
}

/// Budgets plus a seeded random partition into parts whose sizes differ by
/// at most one.
pub fn plan_budget(
    image_ids: &[String],
    parts: usize,
    neighbor_cap: usize,
    memory_limit: u64,
    seed: u64,
) -> Result<BudgetPlan, LargeScaleError> {
    let (k1, k2) = budgets(image_ids.len(), parts, neighbor_cap, memory_limit)?;
    let mut order: Vec<usize> = (0..image_ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let part_assignment = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| (image_ids[i].clone(), pos % parts))
        .collect();
    Ok(BudgetPlan {
        memory_limit,
        parts,
        neighbor_cap,
        k1,
        k2,
        part_assignment,
    })
}

/// Per-image inputs shared by both stages, indexed alike.
#[derive(Debug, Clone, Copy)]
pub struct CollectionView<'a> {
    pub descriptors: &'a [GlobalDescriptor],
    /// Descriptor of every proposal, by proposal index.
    pub regions: &'a [Vec<RegionDescriptor>],
    /// Group of every proposal, by proposal index.
    pub groups: &'a [Vec<usize>],
}

impl CollectionView<'_> {
    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.descriptors.iter().map(|d| d.image_id.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TwoStageConfig {
    /// Stage-1 settings; `nu` is replaced by `K2` unless `stage1_nu` is set.
    pub stage1: DiscoveryConfig,
    pub stage1_nu: Option<usize>,
    pub stage2: DiscoveryConfig,
    /// Restrict whole-collection neighbors to each part instead of
    /// prefiltering within the part.
    pub global_prefilter: bool,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            stage1: DiscoveryConfig {
                mode: DiscoveryMode::Proxy,
                ..DiscoveryConfig::default()
            },
            stage1_nu: None,
            stage2: DiscoveryConfig::default(),
            global_prefilter: false,
        }
    }
}

/// Retained proposals of the images of one part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartShortlist {
    pub part: usize,
    /// Image index and its retained original proposal indices, ascending.
    pub images: Vec<(usize, Vec<usize>)>,
    pub stored_entries: usize,
}

/// Scores and solves one problem over `images` (indices into `view`), each
/// restricted to the listed proposals.
fn solve(
    view: &CollectionView<'_>,
    images: &[usize],
    proposals: &[Vec<usize>],
    neighbors: NeighborSets,
    budget: usize,
    config: &DiscoveryConfig,
) -> Result<(DiscoveryProblem, DiscoverySolution, usize), LargeScaleError> {
    let regions: Vec<Vec<RegionDescriptor>> = images
        .iter()
        .zip(proposals)
        .map(|(&i, keep)| keep.iter().map(|&k| view.regions[i][k].clone()).collect())
        .collect();
    let groups: Vec<Vec<usize>> = images
        .iter()
        .zip(proposals)
        .map(|(&i, keep)| keep.iter().map(|&k| view.groups[i][k]).collect())
        .collect();
    let scores = score_all_pairs(&CosineKernel, &regions, &neighbors, budget, None);
    let stored = scores.values().map(|m| m.len()).sum();
    let problem = DiscoveryProblem::new(neighbors.image_ids, groups, neighbors.neighbors, scores)?;
    let solution = run(&problem, config)?;
    Ok((problem, solution, stored))
}

fn all_proposals(view: &CollectionView<'_>, images: &[usize]) -> Vec<Vec<usize>> {
    images.iter().map(|&i| (0..view.groups[i].len()).collect()).collect()
}

/// Neighbor sets local to `members`.
fn part_neighbors(
    view: &CollectionView<'_>,
    members: &[usize],
    neighbor_cap: usize,
    global: Option<&NeighborSets>,
) -> NeighborSets {
    match global {
        None => {
            let descs: Vec<GlobalDescriptor> = members.iter().map(|&i| view.descriptors[i].clone()).collect();
            prefilter_neighbors(&descs, neighbor_cap)
        }
        Some(all) => {
            let local: BTreeMap<usize, usize> = members.iter().enumerate().map(|(l, &i)| (i, l)).collect();
            NeighborSets {
                image_ids: members.iter().map(|&i| view.descriptors[i].image_id.clone()).collect(),
                neighbors: members
                    .iter()
                    .map(|&i| all.neighbors[i].iter().filter_map(|j| local.get(j).copied()).collect())
                    .collect(),
            }
        }
    }
}

/// Stage 1 for one part.
pub fn run_part(
    view: &CollectionView<'_>,
    plan: &BudgetPlan,
    part: usize,
    config: &TwoStageConfig,
    global_neighbors: Option<&NeighborSets>,
) -> Result<PartShortlist, LargeScaleError> {
    let ids = view.image_ids();
    let members = plan.members(&ids, part);
    if members.len() < 2 {
        return Err(LargeScaleError::PartTooSmall {
            part,
            size: members.len(),
        });
    }
    let neighbors = part_neighbors(view, &members, plan.neighbor_cap, global_neighbors);
    let cfg = DiscoveryConfig {
        nu: config.stage1_nu.unwrap_or(plan.k2),
        seed: derive_seed(config.stage1.seed, &format!("part-{part}")),
        ..config.stage1.clone()
    };
    let (_, solution, stored) = solve(view, &members, &all_proposals(view, &members), neighbors, plan.k1, &cfg)?;
    if stored as u64 > plan.memory_limit {
        log::warn!(
            "part {part} stored {stored} entries, above the limit {}",
            plan.memory_limit
        );
    }
    Ok(PartShortlist {
        part,
        images: members.into_iter().zip(solution.x).collect(),
        stored_entries: stored,
    })
}

/// Stage 1 for every part, in parallel.
pub fn run_stage_one(
    view: &CollectionView<'_>,
    plan: &BudgetPlan,
    config: &TwoStageConfig,
) -> Result<Vec<PartShortlist>, LargeScaleError> {
    let global = config
        .global_prefilter
        .then(|| prefilter_neighbors(view.descriptors, plan.neighbor_cap));
    (0..plan.parts)
        .into_par_iter()
        .map(|p| run_part(view, plan, p, config, global.as_ref()))
        .collect()
}

/// Per-image shortlists from all parts, by image index.
pub fn merge_shortlists(n: usize, parts: &[PartShortlist]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n];
    for p in parts {
        for (i, keep) in &p.images {
            out[*i] = keep.clone();
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageTwoOutput {
    /// Problem over shortlisted proposals; proposal `k` of image `i` is
    /// original proposal `shortlists[i][k]`.
    pub problem: DiscoveryProblem,
    pub solution: DiscoverySolution,
    pub shortlists: Vec<Vec<usize>>,
    pub stored_entries: usize,
}

impl StageTwoOutput {
    /// Selected original proposal indices of image `i`.
    pub fn original_selection(&self, i: usize) -> Vec<usize> {
        self.solution.x[i].iter().map(|&k| self.shortlists[i][k]).collect()
    }
}

/// Stage 2: whole-collection discovery over the shortlists at budget `K2`.
pub fn run_stage_two(
    view: &CollectionView<'_>,
    plan: &BudgetPlan,
    shortlists: Vec<Vec<usize>>,
    config: &DiscoveryConfig,
) -> Result<StageTwoOutput, LargeScaleError> {
    let neighbors = prefilter_neighbors(view.descriptors, plan.neighbor_cap);
    let images: Vec<usize> = (0..view.len()).collect();
    let (problem, solution, stored) = solve(view, &images, &shortlists, neighbors, plan.k2, config)?;
    if stored as u64 > plan.memory_limit {
        log::warn!("stage 2 stored {stored} entries, above the limit {}", plan.memory_limit);
    }
    Ok(StageTwoOutput {
        problem,
        solution,
        shortlists,
        stored_entries: stored,
    })
}

#[derive(Debug, Clone)]
pub struct TwoStageOutput {
    pub parts: Vec<PartShortlist>,
    pub stage2: StageTwoOutput,
}

pub fn run_two_stage(
    view: &CollectionView<'_>,
    plan: &BudgetPlan,
    config: &TwoStageConfig,
) -> Result<TwoStageOutput, LargeScaleError> {
    let parts = run_stage_one(view, plan, config)?;
    let shortlists = merge_shortlists(view.len(), &parts);
    let stage2 = run_stage_two(view, plan, shortlists, &config.stage2)?;
    Ok(TwoStageOutput { parts, stage2 })
}

/// Single-stage discovery over all proposals at the stage-2 budget: the
/// equal-memory baseline.
pub fn run_baseline(
    view: &CollectionView<'_>,
    plan: &BudgetPlan,
    config: &DiscoveryConfig,
) -> Result<StageTwoOutput, LargeScaleError> {
    let images: Vec<usize> = (0..view.len()).collect();
    run_stage_two(view, plan, all_proposals(view, &images), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("im{i:05}")).collect()
    }

    #[test]
    fn budget_examples() {
        assert_eq!(budgets(3550, 5, 50, 8_875_000).unwrap(), (250, 50));
        let m = 19817u64 * 50 * 50;
        let (k1, k2) = budgets(19817, 20, 50, m).unwrap();
        assert_eq!(k2, 50);
        assert!((999..=1001).contains(&k1));
        assert_eq!(budgets(100, 1, 10, 100 * 10 * 7).unwrap(), (7, 7));
    }

    #[test]
    fn zero_budget_and_bad_plans() {
        assert!(matches!(
            budgets(100, 2, 10, 999),
            Err(LargeScaleError::ZeroBudget { .. })
        ));
        assert!(budgets(3, 4, 10, 1000).is_err());
        assert!(budgets(3, 0, 10, 1000).is_err());
    }

    #[test]
    fn partition_is_balanced_and_seeded() {
        let ids = ids(23);
        let plan = plan_budget(&ids, 5, 4, 10_000, 3).unwrap();
        let mut sizes = [0usize; 5];
        for p in plan.part_assignment.values() {
            sizes[*p] += 1;
        }
        assert_eq!(sizes.iter().sum::<usize>(), 23);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert_eq!(plan, plan_budget(&ids, 5, 4, 10_000, 3).unwrap());
        assert_ne!(plan, plan_budget(&ids, 5, 4, 10_000, 4).unwrap());
    }
}
