//! Saliency maps over a feature grid and robust local maxima by persistence.
//!
//! Persistence is computed on the superlevel-set filtration of a map over the
//! 4-neighborhood grid graph. Pixels are visited in decreasing score order
//! (ties by row-major index) and merged with a union-find; when two
//! components meet, the one whose peak is lower dies at the current level.
//! Peak comparison uses the saliency first and the row-major index second.
//! Components that never merge die at the lowest retained score.

use std::cmp::Ordering;

use crate::tensor_store::FeatureTensor;
use crate::union_find::DisjointSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyKind {
    Global,
    /// Similarity to the feature vector at `(row, col)`.
    Local {
        row: usize,
        col: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major `height x width` scores.
    pub scores: Vec<f32>,
    pub kind: SaliencyKind,
}

impl SaliencyMap {
    pub fn new(height: usize, width: usize, scores: Vec<f32>, kind: SaliencyKind) -> Self {
        assert_eq!(scores.len(), height * width, "score count must equal height * width");
        Self {
            height,
            width,
            scores,
            kind,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.scores[row * self.width + col]
    }

    pub fn max(&self) -> f32 {
        self.scores.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn min(&self) -> f32 {
        self.scores.iter().copied().fold(f32::INFINITY, f32::min)
    }

    /// Mean over all locations.
    pub fn mean(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalMaximum {
    pub row: usize,
    pub col: usize,
    /// Birth time.
    pub saliency: f32,
    pub death: f32,
    pub persistence: f32,
    /// Position in decreasing-persistence order among all candidates.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SaliencyError {
    #[error("every location is below the floor {floor}")]
    EmptyAfterFloor { floor: f32 },
    #[error("feature vector at ({row}, {col}) has zero norm")]
    ZeroNormAtMaximum { row: usize, col: usize },
    #[error("location ({row}, {col}) is outside the {height}x{width} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        height: usize,
        width: usize,
    },
}

/// Depthwise sum of the tensor.
pub fn global_saliency(tensor: &FeatureTensor) -> SaliencyMap {
    let (h, w, _) = tensor.shape();
    let mut scores = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            scores.push(tensor.at(r, c).iter().map(|&v| v as f64).sum::<f64>() as f32);
        }
    }
    SaliencyMap::new(h, w, scores, SaliencyKind::Global)
}

/// Cosine similarity of every feature vector to the one at `(row, col)`.
/// Zero-norm locations score 0.
pub fn local_saliency(tensor: &FeatureTensor, row: usize, col: usize) -> Result<SaliencyMap, SaliencyError> {
    let (h, w, _) = tensor.shape();
    if row >= h || col >= w {
        return Err(SaliencyError::OutOfBounds {
            row,
            col,
            height: h,
            width: w,
        });
    }
    let anchor = tensor.at(row, col);
    let anchor_norm = norm64(anchor);
    if anchor_norm == 0.0 {
        return Err(SaliencyError::ZeroNormAtMaximum { row, col });
    }
    let mut scores = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let f = tensor.at(r, c);
            let n = norm64(f);
            let s = if n == 0.0 {
                0.0
            } else {
                let dot: f64 = f.iter().zip(anchor).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (n * anchor_norm)).clamp(-1.0, 1.0)
            };
            scores.push(s as f32);
        }
    }
    Ok(SaliencyMap::new(h, w, scores, SaliencyKind::Local { row, col }))
}

fn norm64(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Whether peak `a` beats peak `b`: higher score, then lower row-major index.
fn peak_beats(scores: &[f32], a: usize, b: usize) -> bool {
    match scores[a].total_cmp(&scores[b]) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => a < b,
    }
}

/// Local maxima of the superlevel filtration restricted to locations with
/// score `>= floor`, sorted by decreasing persistence (ties: higher saliency,
/// then row-major location).
///
/// A plateau yields a single maximum at its row-major-first pixel.
pub fn compute_persistence(map: &SaliencyMap, floor: f32) -> Result<Vec<LocalMaximum>, SaliencyError> {
    let (h, w) = (map.height, map.width);
    let scores = &map.scores;
    let mut order: Vec<usize> = (0..h * w).filter(|&i| scores[i] >= floor).collect();
    if order.is_empty() {
        return Err(SaliencyError::EmptyAfterFloor { floor });
    }
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let lowest = scores[*order.last().unwrap()];

    let mut sets = DisjointSet::new(h * w);
    let mut peak: Vec<usize> = (0..h * w).collect();
    let mut active = vec![false; h * w];
    // (peak index, death)
    let mut dead: Vec<(usize, f32)> = Vec::new();

    for &p in &order {
        active[p] = true;
        let level = scores[p];
        let (r, c) = (p / w, p % w);
        let neighbors = [
            (r > 0).then(|| p - w),
            (r + 1 < h).then(|| p + w),
            (c > 0).then(|| p - 1),
            (c + 1 < w).then(|| p + 1),
        ];
        for q in neighbors.into_iter().flatten() {
            if !active[q] {
                continue;
            }
            let (rp, rq) = (sets.find(p), sets.find(q));
            if rp == rq {
                continue;
            }
            let (a, b) = (peak[rp], peak[rq]);
            let (winner, loser) = if peak_beats(scores, a, b) { (a, b) } else { (b, a) };
            // A loser whose peak sits at the merge level is part of the same plateau.
            if scores[loser] > level {
                dead.push((loser, level));
            }
            let root = sets.union(rp, rq);
            peak[root] = winner;
        }
    }

    let mut survivors: Vec<usize> = order
        .iter()
        .filter(|&&p| sets.find(p) == p)
        .map(|&root| peak[root])
        .collect();
    survivors.sort_unstable();
    let mut entries: Vec<(usize, f32)> = dead;
    entries.extend(survivors.into_iter().map(|p| (p, lowest)));

    let mut maxima: Vec<LocalMaximum> = entries
        .into_iter()
        .map(|(p, death)| LocalMaximum {
            row: p / w,
            col: p % w,
            saliency: scores[p],
            death,
            persistence: scores[p] - death,
            rank: 0,
        })
        .collect();
    maxima.sort_by(|a, b| {
        b.persistence
            .total_cmp(&a.persistence)
            .then(b.saliency.total_cmp(&a.saliency))
            .then((a.row * w + a.col).cmp(&(b.row * w + b.col)))
    });
    for (rank, m) in maxima.iter_mut().enumerate() {
        m.rank = rank;
    }
    Ok(maxima)
}

/// Greedy 3x3 suppression in the given order, keeping at most `max_count`.
pub fn select_maxima(candidates: &[LocalMaximum], max_count: usize) -> Vec<LocalMaximum> {
    let mut kept: Vec<LocalMaximum> = Vec::new();
    for cand in candidates {
        if kept.len() >= max_count {
            break;
        }
        let clashes = kept
            .iter()
            .any(|k| k.row.abs_diff(cand.row) <= 1 && k.col.abs_diff(cand.col) <= 1);
        if !clashes {
            kept.push(cand.clone());
        }
    }
    kept
}
