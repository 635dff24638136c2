//! Independent reference implementations used by the property and
//! acceptance tests. Each one favors obviousness over speed.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use objdisc::discovery::{Assignment, DiscoveryProblem};
use objdisc::matching::{sparsify_top_k, PairScores, ScoreEntry};
use objdisc::saliency::SaliencyMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `(row-major peak index, birth, death)`, sorted by index.
pub type PersistencePairs = Vec<(usize, f32, f32)>;

/// Superlevel persistence by recomputing connected components from scratch
/// at every distinct level, highest first.
///
/// A component present at the previous level keeps its identity when it
/// grows; when several meet, the one with the highest peak (lowest index on
/// ties) lives on and the rest die at the current level. Components first
/// seen at a level are born there. Survivors die at the lowest retained
/// level.
pub fn persistence_oracle(map: &SaliencyMap, floor: f32) -> PersistencePairs {
    let (h, w) = (map.height, map.width);
    let s = &map.scores;
    let mut levels: Vec<f32> = s.iter().copied().filter(|&v| v >= floor).collect();
    levels.sort_by(|a, b| b.total_cmp(a));
    levels.dedup();
    let Some(&lowest) = levels.last() else {
        return Vec::new();
    };

    // Peaks alive after the previous level.
    let mut alive: Vec<usize> = Vec::new();
    let mut out = Vec::new();
    for &t in &levels {
        let comps = components(s, h, w, t);
        let mut next_alive = Vec::new();
        for comp in comps {
            let members: BTreeSet<usize> = comp.iter().copied().collect();
            let mut old: Vec<usize> = alive.iter().copied().filter(|p| members.contains(p)).collect();
            if old.is_empty() {
                let peak = *comp
                    .iter()
                    .max_by(|&&a, &&b| s[a].total_cmp(&s[b]).then(b.cmp(&a)))
                    .unwrap();
                next_alive.push(peak);
                continue;
            }
            old.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
            next_alive.push(old[0]);
            for &loser in &old[1..] {
                out.push((loser, s[loser], t));
            }
        }
        alive = next_alive;
    }
    for p in alive {
        out.push((p, s[p], lowest));
    }
    out.sort_by_key(|e| e.0);
    out
}

fn components(s: &[f32], h: usize, w: usize, t: f32) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || s[start] < t {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            let (r, c) = (p / w, p % w);
            let mut nb = Vec::new();
            if r > 0 {
                nb.push(p - w);
            }
            if r + 1 < h {
                nb.push(p + w);
            }
            if c > 0 {
                nb.push(p - 1);
            }
            if c + 1 < w {
                nb.push(p + 1);
            }
            for q in nb {
                if !seen[q] && s[q] >= t {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Random integer map of the given shape with values `0..=max`.
pub fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max: u32) -> SaliencyMap {
    let scores = (0..h * w).map(|_| rng.gen_range(0..=max) as f32).collect();
    SaliencyMap::new(h, w, scores, objdisc::saliency::SaliencyKind::Global)
}

/// A random discovery instance with integer scores.
pub struct Instance {
    pub problem: DiscoveryProblem,
    pub groups: Vec<Vec<usize>>,
    pub dense: BTreeMap<(usize, usize), Vec<f32>>,
}

/// `n` images with `p_min..=p_max` proposals each, `g_max` groups at most,
/// random neighbor sets and integer scores in `0..=9` (about `density` of
/// them nonzero).
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    (p_min, p_max): (usize, usize),
    g_max: usize,
    density: f64,
) -> Instance {
    let ids: Vec<String> = (0..n)
        .map(|i| format!("im{:03}", rng.gen_range(0..1000) * n + i))
        .collect();
    let counts: Vec<usize> = (0..n).map(|_| rng.gen_range(p_min..=p_max)).collect();
    let groups: Vec<Vec<usize>> = counts
        .iter()
        .map(|&p| {
            let g = rng.gen_range(1..=g_max.min(p).max(1));
            // Dense group ids 0..g.
            let mut v: Vec<usize> = (0..p).map(|k| if k < g { k } else { rng.gen_range(0..g) }).collect();
            for k in (1..p).rev() {
                let j = rng.gen_range(0..=k);
                v.swap(k, j);
            }
            v
        })
        .collect();
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && rng.gen_bool(0.7)).collect())
        .collect();
    let mut pairs = BTreeSet::new();
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            pairs.insert((i.min(j), i.max(j)));
        }
    }
    let mut scores = PairScores::new();
    let mut dense = BTreeMap::new();
    for (a, b) in pairs {
        let d: Vec<f32> = (0..counts[a] * counts[b])
            .map(|_| {
                if rng.gen_bool(density) {
                    rng.gen_range(1..=9) as f32
                } else {
                    0.0
                }
            })
            .collect();
        scores.insert((a, b), sparsify_top_k(&d, counts[a], counts[b], counts[a] * counts[b]));
        dense.insert((a, b), d);
    }
    let problem = DiscoveryProblem::new(ids, groups.clone(), neighbors, scores).unwrap();
    Instance { problem, groups, dense }
}

/// Arbitrary (possibly infeasible) assignment with `e_i` inside `N(i)`.
pub fn random_assignment(rng: &mut ChaCha8Rng, problem: &DiscoveryProblem) -> Assignment {
    let x = (0..problem.len())
        .map(|i| (0..problem.proposal_count(i)).map(|_| rng.gen_bool(0.5)).collect())
        .collect();
    let e = (0..problem.len())
        .map(|i| {
            problem
                .neighbors(i)
                .iter()
                .copied()
                .filter(|_| rng.gen_bool(0.5))
                .collect::<Vec<_>>()
        })
        .map(|mut v: Vec<usize>| {
            v.sort_unstable();
            v
        })
        .collect();
    Assignment { x, e }
}

/// Objective from dense matrices, summing every active edge and selected
/// pair directly.
pub fn dense_objective(inst: &Instance, a: &Assignment) -> f64 {
    let mut total = 0.0;
    for i in 0..inst.problem.len() {
        for &j in &a.e[i] {
            let (lo, hi) = (i.min(j), i.max(j));
            let Some(d) = inst.dense.get(&(lo, hi)) else { continue };
            let cols = inst.problem.proposal_count(hi);
            for (k, &xk) in a.x[i].iter().enumerate() {
                for (l, &xl) in a.x[j].iter().enumerate() {
                    if xk && xl {
                        let (r, c) = if i < j { (k, l) } else { (l, k) };
                        total += d[r * cols + c] as f64;
                    }
                }
            }
        }
    }
    total
}

/// Largest objective over every feasible `x_i` with the rest fixed.
pub fn best_region_block(inst: &Instance, a: &Assignment, i: usize, nu: usize, groups: bool) -> f64 {
    let problem = &inst.problem;
    let p = problem.proposal_count(i);
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << p) {
        if mask.count_ones() as usize > nu {
            continue;
        }
        let chosen: Vec<usize> = (0..p).filter(|k| mask >> k & 1 == 1).collect();
        if groups {
            let g: BTreeSet<usize> = chosen.iter().map(|&k| problem.groups(i)[k]).collect();
            if g.len() != chosen.len() {
                continue;
            }
        }
        let mut trial = a.clone();
        trial.x[i] = (0..p).map(|k| mask >> k & 1 == 1).collect();
        best = best.max(dense_objective(inst, &trial));
    }
    best
}

/// Largest objective over every `e_i` inside `N(i)` with at most `tau` members.
pub fn best_edge_block(inst: &Instance, a: &Assignment, i: usize, tau: usize) -> f64 {
    let ns = inst.problem.neighbors(i);
    let mut best = f64::NEG_INFINITY;
    for mask in 0u32..(1 << ns.len()) {
        if mask.count_ones() as usize > tau {
            continue;
        }
        let mut trial = a.clone();
        trial.e[i] = ns
            .iter()
            .enumerate()
            .filter(|(b, _)| mask >> b & 1 == 1)
            .map(|(_, &j)| j)
            .collect();
        trial.e[i].sort_unstable();
        best = best.max(dense_objective(inst, &trial));
    }
    best
}

/// Top-`budget` strictly positive entries by full sort, row-major output.
pub fn top_k_oracle(dense: &[f32], cols: usize, budget: usize) -> Vec<ScoreEntry> {
    let mut all: Vec<(usize, f32)> = dense.iter().copied().enumerate().filter(|&(_, v)| v > 0.0).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(budget);
    all.sort_by_key(|e| e.0);
    all.into_iter()
        .map(|(i, score)| ScoreEntry {
            k: (i / cols) as u32,
            l: (i % cols) as u32,
            score,
        })
        .collect()
}
