//! Joint selection of regions and an image graph by greedy block-coordinate
//! ascent.
//!
//! The objective is
//!
//! ```text
//! S(x, e) = sum_i sum_{j in N(i)} e_ij * x_i^T S_ij x_j
//! ```
//!
//! subject to at most `nu` selected regions per image, at most `tau`
//! out-edges per image, and (with groups enabled) at most one selected region
//! per proposal group. One sweep visits images in a fresh random order and
//! re-selects each image's regions optimally given everything else, then
//! re-selects every image's out-edges.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::{greedy_nms, BBox};
use crate::matching::{PairScores, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryMode {
    /// Selections are final objects.
    Standard,
    /// Selections are shortlists of promising regions (large `nu`).
    Proxy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscoveryConfig {
    pub nu: usize,
    pub tau: usize,
    /// At most one region per proposal group.
    pub use_groups: bool,
    pub max_sweeps: usize,
    pub seed: u64,
    pub mode: DiscoveryMode,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            nu: 5,
            tau: 10,
            use_groups: true,
            max_sweeps: 50,
            seed: 0,
            mode: DiscoveryMode::Standard,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.nu == 0 || self.tau == 0 || self.max_sweeps == 0 {
            return Err(DiscoveryError::InvalidConfig(
                "nu, tau and max_sweeps must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiscoveryError {
    #[error("invalid discovery config: {0}")]
    InvalidConfig(String),
    #[error("invalid discovery problem: {0}")]
    InvalidProblem(String),
    #[error("image '{image_id}' has no retained regions")]
    EmptySelection { image_id: String },
}

#[derive(Debug, Clone, Copy)]
struct Link {
    other: usize,
    matrix: Option<usize>,
    /// The owning image indexes the matrix rows.
    forward: bool,
}

/// Everything the optimizer reads: proposal groups, candidate neighbors and
/// sparse score matrices.
#[derive(Debug, Clone)]
pub struct DiscoveryProblem {
    image_ids: Vec<String>,
    groups: Vec<Vec<usize>>,
    neighbors: Vec<Vec<usize>>,
    matrices: Vec<ScoreMatrix>,
    links: Vec<Vec<Link>>,
    id_rank: Vec<usize>,
}

impl DiscoveryProblem {
    /// `groups[i][k]` is the group of proposal `k` in image `i`;
    /// `neighbors[i]` is `N(i)`; `scores` holds `S_ab` for `a < b`.
    pub fn new(
        image_ids: Vec<String>,
        groups: Vec<Vec<usize>>,
        neighbors: Vec<Vec<usize>>,
        scores: PairScores,
    ) -> Result<Self, DiscoveryError> {
        let n = image_ids.len();
        let bad = |m: String| Err(DiscoveryError::InvalidProblem(m));
        if groups.len() != n || neighbors.len() != n {
            return bad(format!(
                "{n} images but {} group lists and {} neighbor lists",
                groups.len(),
                neighbors.len()
            ));
        }
        let mut links: Vec<Vec<Link>> = vec![Vec::new(); n];
        for (i, ns) in neighbors.iter().enumerate() {
            for &j in ns {
                if j >= n || j == i {
                    return bad(format!("image {i} lists invalid neighbor {j}"));
                }
            }
        }
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (j, ns) in neighbors.iter().enumerate() {
            for &i in ns {
                reverse[i].push(j);
            }
        }
        for i in 0..n {
            let mut others: Vec<usize> = neighbors[i].clone();
            others.extend_from_slice(&reverse[i]);
            others.sort_unstable();
            others.dedup();
            links[i] = others
                .into_iter()
                .map(|other| Link {
                    other,
                    matrix: None,
                    forward: i < other,
                })
                .collect();
        }

        let mut matrices = Vec::with_capacity(scores.len());
        for ((a, b), m) in scores {
            if a >= b || b >= n {
                return bad(format!("score pair ({a}, {b}) is not an ordered in-range pair"));
            }
            if m.rows != groups[a].len() || m.cols != groups[b].len() {
                return bad(format!(
                    "score matrix ({a}, {b}) is {}x{} but images have {} and {} proposals",
                    m.rows,
                    m.cols,
                    groups[a].len(),
                    groups[b].len()
                ));
            }
            if let Some(e) = m
                .entries
                .iter()
                .find(|e| e.k as usize >= m.rows || e.l as usize >= m.cols || e.score < 0.0 || !e.score.is_finite())
            {
                return bad(format!("score matrix ({a}, {b}) has invalid entry {e:?}"));
            }
            let idx = matrices.len();
            matrices.push(m);
            for (owner, other) in [(a, b), (b, a)] {
                // Pairs nobody links are kept but never read.
                if let Some(link) = links[owner].iter_mut().find(|l| l.other == other) {
                    link.matrix = Some(idx);
                }
            }
        }

        let mut by_id: Vec<usize> = (0..n).collect();
        by_id.sort_by(|&a, &b| image_ids[a].cmp(&image_ids[b]));
        let mut id_rank = vec![0; n];
        for (rank, &i) in by_id.iter().enumerate() {
            id_rank[i] = rank;
        }

        Ok(Self {
            image_ids,
            groups,
            neighbors,
            matrices,
            links,
            id_rank,
        })
    }

    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn proposal_count(&self, i: usize) -> usize {
        self.groups[i].len()
    }

    pub fn groups(&self, i: usize) -> &[usize] {
        &self.groups[i]
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Total stored score entries.
    pub fn stored_entries(&self) -> usize {
        self.matrices.iter().map(ScoreMatrix::len).sum()
    }

    fn link(&self, i: usize, j: usize) -> Option<&Link> {
        let links = &self.links[i];
        links.binary_search_by_key(&j, |l| l.other).ok().map(|p| &links[p])
    }

    /// Calls `f(k, l, s)` for each stored entry of `S_ij`, `k` indexing
    /// image `i`, `l` indexing image `j`.
    fn for_each_entry(&self, link: &Link, mut f: impl FnMut(usize, usize, f64)) {
        if let Some(m) = link.matrix {
            for e in &self.matrices[m].entries {
                let (k, l) = if link.forward { (e.k, e.l) } else { (e.l, e.k) };
                f(k as usize, l as usize, e.score as f64);
            }
        }
    }

    /// Dense `S_ij` (rows index image `i`), for tests and small problems.
    pub fn dense_scores(&self, i: usize, j: usize) -> Vec<f64> {
        let cols = self.proposal_count(j);
        let mut out = vec![0.0; self.proposal_count(i) * cols];
        if let Some(link) = self.link(i, j) {
            self.for_each_entry(link, |k, l, s| out[k * cols + l] = s);
        }
        out
    }
}

/// Current value of every variable: `x[i][k]` and the sorted out-neighbors `e[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub x: Vec<Vec<bool>>,
    pub e: Vec<Vec<usize>>,
}

impl Assignment {
    /// All regions selected and `e_ij = 1` for every `j` in `N(i)`.
    pub fn initial(problem: &DiscoveryProblem) -> Self {
        Self {
            x: (0..problem.len())
                .map(|i| vec![true; problem.proposal_count(i)])
                .collect(),
            e: problem
                .neighbors
                .iter()
                .map(|ns| {
                    let mut v = ns.clone();
                    v.sort_unstable();
                    v
                })
                .collect(),
        }
    }

    pub fn from_indices(problem: &DiscoveryProblem, x: &[Vec<usize>], e: &[Vec<usize>]) -> Self {
        let x = x
            .iter()
            .enumerate()
            .map(|(i, sel)| {
                let mut mask = vec![false; problem.proposal_count(i)];
                for &k in sel {
                    mask[k] = true;
                }
                mask
            })
            .collect();
        let e = e
            .iter()
            .map(|v| {
                let mut v = v.clone();
                v.sort_unstable();
                v
            })
            .collect();
        Self { x, e }
    }

    pub fn selected(&self, i: usize) -> Vec<usize> {
        self.x[i]
            .iter()
            .enumerate()
            .filter_map(|(k, &on)| on.then_some(k))
            .collect()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.e[i].binary_search(&j).is_ok()
    }
}

/// `S(x, e)` summed over active edges, in image order.
pub fn objective(problem: &DiscoveryProblem, a: &Assignment) -> f64 {
    let mut total = 0.0;
    for i in 0..problem.len() {
        for &j in &a.e[i] {
            total += edge_score(problem, a, i, j);
        }
    }
    total
}

/// `x_i^T S_ij x_j`.
pub fn edge_score(problem: &DiscoveryProblem, a: &Assignment, i: usize, j: usize) -> f64 {
    let mut s = 0.0;
    if let Some(link) = problem.link(i, j) {
        problem.for_each_entry(link, |k, l, v| {
            if a.x[i][k] && a.x[j][l] {
                s += v;
            }
        });
    }
    s
}

/// `R = sum_j (e_ij S_ij + e_ji S_ji^T) x_j`, the marginal score of every
/// region of image `i` with the rest of the assignment fixed.
pub fn region_scores(problem: &DiscoveryProblem, a: &Assignment, i: usize) -> Vec<f64> {
    let mut r = vec![0.0; problem.proposal_count(i)];
    for link in &problem.links[i] {
        let j = link.other;
        let weight = a.has_edge(i, j) as u8 + a.has_edge(j, i) as u8;
        if weight == 0 {
            continue;
        }
        let w = weight as f64;
        problem.for_each_entry(link, |k, l, s| {
            if a.x[j][l] {
                r[k] += w * s;
            }
        });
    }
    r
}

/// Best `nu` regions by score; with `groups`, first the best region of each
/// group. Ties prefer the lower index. Returns sorted indices.
pub fn select_regions(scores: &[f64], groups: Option<&[usize]>, nu: usize) -> Vec<usize> {
    let better = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut candidates: Vec<usize> = match groups {
        Some(groups) => {
            let mut best: std::collections::BTreeMap<usize, usize> = Default::default();
            for (k, &g) in groups.iter().enumerate() {
                best.entry(g)
                    .and_modify(|cur| {
                        if better(k, *cur) {
                            *cur = k;
                        }
                    })
                    .or_insert(k);
            }
            best.into_values().collect()
        }
        None => (0..scores.len()).collect(),
    };
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(nu);
    candidates.sort_unstable();
    candidates
}

/// New selection for image `i` given everything else.
pub fn update_regions(problem: &DiscoveryProblem, a: &Assignment, i: usize, config: &DiscoveryConfig) -> Vec<usize> {
    let r = region_scores(problem, a, i);
    let groups = config.use_groups.then(|| problem.groups(i));
    select_regions(&r, groups, config.nu)
}

/// New out-edges of image `i`: the `tau` neighbors in `N(i)` with the largest
/// `x_i^T S_ij x_j`, ties by image id, kept regardless of sign. Sorted.
pub fn update_edges(problem: &DiscoveryProblem, a: &Assignment, i: usize, config: &DiscoveryConfig) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = problem.neighbors[i]
        .iter()
        .map(|&j| (edge_score(problem, a, i, j), j))
        .collect();
    scored.sort_by(|x, y| {
        y.0.total_cmp(&x.0)
            .then(problem.id_rank[x.1].cmp(&problem.id_rank[y.1]))
    });
    let mut e: Vec<usize> = scored.into_iter().take(config.tau).map(|(_, j)| j).collect();
    e.sort_unstable();
    e
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverySolution {
    /// Selected proposal indices per image, ascending.
    pub x: Vec<Vec<usize>>,
    /// Out-neighbors per image, ascending image index.
    pub e: Vec<Vec<usize>>,
    pub objective: f64,
    pub sweeps_run: usize,
    /// Objective after each sweep.
    pub objective_trace: Vec<f64>,
}

impl DiscoverySolution {
    pub fn assignment(&self, problem: &DiscoveryProblem) -> Assignment {
        Assignment::from_indices(problem, &self.x, &self.e)
    }
}

/// Optimizes from the all-selected start, calling `on_sweep` with the
/// assignment after every sweep.
pub fn run_with_observer(
    problem: &DiscoveryProblem,
    config: &DiscoveryConfig,
    mut on_sweep: impl FnMut(usize, &Assignment),
) -> Result<DiscoverySolution, DiscoveryError> {
    config.validate()?;
    let n = problem.len();
    let mut a = Assignment::initial(problem);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::new();

    for sweep in 0..config.max_sweeps {
        let before = a.clone();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let chosen = update_regions(problem, &a, i, config);
            let mask = &mut a.x[i];
            mask.iter_mut().for_each(|m| *m = false);
            for k in chosen {
                mask[k] = true;
            }
        }
        let edges: Vec<Vec<usize>> = (0..n)
            .into_par_iter()
            .map(|i| update_edges(problem, &a, i, config))
            .collect();
        a.e = edges;
        trace.push(objective(problem, &a));
        on_sweep(sweep, &a);
        if a == before {
            break;
        }
    }

    Ok(DiscoverySolution {
        x: (0..n).map(|i| a.selected(i)).collect(),
        e: a.e,
        objective: *trace.last().expect("at least one sweep"),
        sweeps_run: trace.len(),
        objective_trace: trace,
    })
}

pub fn run(problem: &DiscoveryProblem, config: &DiscoveryConfig) -> Result<DiscoverySolution, DiscoveryError> {
    run_with_observer(problem, config, |_, _| {})
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub proposal_index: usize,
    pub rank_score: f64,
}

/// Retained regions of image `i` ranked by the sum, over graph neighbors in
/// either direction, of their best similarity to a retained region there.
pub fn rank_regions(problem: &DiscoveryProblem, solution: &DiscoverySolution, i: usize) -> Vec<RankedRegion> {
    let a = solution.assignment(problem);
    let mut scores = vec![0.0f64; problem.proposal_count(i)];
    for link in &problem.links[i] {
        let j = link.other;
        if !(a.has_edge(i, j) || a.has_edge(j, i)) {
            continue;
        }
        let mut best = vec![0.0f64; problem.proposal_count(i)];
        problem.for_each_entry(link, |k, l, s| {
            if a.x[j][l] && s > best[k] {
                best[k] = s;
            }
        });
        for (acc, b) in scores.iter_mut().zip(best) {
            *acc += b;
        }
    }
    let mut ranked: Vec<RankedRegion> = solution.x[i]
        .iter()
        .map(|&k| RankedRegion {
            proposal_index: k,
            rank_score: scores[k],
        })
        .collect();
    ranked.sort_by(|p, q| {
        q.rank_score
            .total_cmp(&p.rank_score)
            .then(p.proposal_index.cmp(&q.proposal_index))
    });
    ranked
}

/// The single best retained region of image `i`.
pub fn postprocess_single(
    problem: &DiscoveryProblem,
    solution: &DiscoverySolution,
    i: usize,
    boxes: &[BBox],
) -> Result<BBox, DiscoveryError> {
    rank_regions(problem, solution, i)
        .first()
        .map(|r| boxes[r.proposal_index])
        .ok_or_else(|| DiscoveryError::EmptySelection {
            image_id: problem.image_ids[i].clone(),
        })
}

/// Up to `max_regions` retained regions of image `i` in rank order after
/// suppressing any box whose IoU with a higher-ranked kept box exceeds
/// `nms_iou`.
pub fn postprocess_multi(
    problem: &DiscoveryProblem,
    solution: &DiscoverySolution,
    i: usize,
    boxes: &[BBox],
    nms_iou: f64,
    max_regions: usize,
) -> Result<Vec<BBox>, DiscoveryError> {
    let ranked = rank_regions(problem, solution, i);
    if ranked.is_empty() {
        return Err(DiscoveryError::EmptySelection {
            image_id: problem.image_ids[i].clone(),
        });
    }
    let ordered: Vec<BBox> = ranked.iter().map(|r| boxes[r.proposal_index]).collect();
    Ok(greedy_nms(&ordered, nms_iou, max_regions)
        .into_iter()
        .map(|k| ordered[k])
        .collect())
}

/// One serialized line of a solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub image_id: String,
    pub selected: Vec<usize>,
    pub neighbors: Vec<String>,
    /// Rank score of each entry of `selected`, same order.
    pub rank_scores: Vec<f64>,
    /// Final post-processed boxes, best first.
    #[serde(default)]
    pub boxes: Vec<BBox>,
}

pub fn solution_records(problem: &DiscoveryProblem, solution: &DiscoverySolution) -> Vec<SolutionRecord> {
    (0..problem.len())
        .map(|i| {
            let ranked = rank_regions(problem, solution, i);
            let rank_scores = solution.x[i]
                .iter()
                .map(|&k| {
                    ranked
                        .iter()
                        .find(|r| r.proposal_index == k)
                        .map_or(0.0, |r| r.rank_score)
                })
                .collect();
            SolutionRecord {
                image_id: problem.image_ids[i].clone(),
                selected: solution.x[i].clone(),
                neighbors: solution.e[i].iter().map(|&j| problem.image_ids[j].clone()).collect(),
                rank_scores,
                boxes: Vec::new(),
            }
        })
        .collect()
}

/// Checks the constraints on a solution; returns the first violation.
pub fn check_feasible(
    problem: &DiscoveryProblem,
    solution: &DiscoverySolution,
    config: &DiscoveryConfig,
) -> Result<(), String> {
    for i in 0..problem.len() {
        let x = &solution.x[i];
        if x.len() > config.nu {
            return Err(format!("image {i}: {} regions > nu = {}", x.len(), config.nu));
        }
        if config.use_groups {
            let mut seen = std::collections::BTreeSet::new();
            for &k in x {
                if !seen.insert(problem.groups[i][k]) {
                    return Err(format!("image {i}: two regions from group {}", problem.groups[i][k]));
                }
            }
        }
        let e = &solution.e[i];
        if e.len() > config.tau {
            return Err(format!("image {i}: {} edges > tau = {}", e.len(), config.tau));
        }
        if let Some(j) = e.iter().find(|j| !problem.neighbors[i].contains(j)) {
            return Err(format!("image {i}: edge to {j} outside N(i)"));
        }
    }
    Ok(())
}
