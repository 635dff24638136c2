//! Neighbor prefiltering and sparse region-similarity matrices.
//!
//! A score matrix `S_ij` keeps the `K` largest strictly positive similarities
//! between the regions of images `i` and `j`, matrix-wide. Only one matrix is
//! computed per unordered pair; `S_ji` is its transpose.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::region_features::{cosine, normalize, RegionDescriptor};
use crate::tensor_store::GlobalDescriptor;

pub const DEFAULT_NEIGHBORS: usize = 50;

/// Candidate neighbors `N(i)` of every image, by image index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSets {
    pub image_ids: Vec<String>,
    pub neighbors: Vec<Vec<usize>>,
}

impl NeighborSets {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// `sum_i |N(i)|`.
    pub fn total_links(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn neighbor_ids(&self, i: usize) -> Vec<&str> {
        self.neighbors[i].iter().map(|&j| self.image_ids[j].as_str()).collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, Vec<String>> {
        (0..self.len())
            .map(|i| {
                (
                    self.image_ids[i].clone(),
                    self.neighbor_ids(i).into_iter().map(String::from).collect(),
                )
            })
            .collect()
    }

    /// Unordered pairs `(a, b)`, `a < b`, linked in either direction.
    pub fn unordered_pairs(&self) -> Vec<(usize, usize)> {
        let mut set = BTreeSet::new();
        for (i, ns) in self.neighbors.iter().enumerate() {
            for &j in ns {
                set.insert((i.min(j), i.max(j)));
            }
        }
        set.into_iter().collect()
    }
}

/// `N(i)`: the `n_max` most cosine-similar other images, ties broken by
/// lexicographic image id.
pub fn prefilter_neighbors(descriptors: &[GlobalDescriptor], n_max: usize) -> NeighborSets {
    let unit: Vec<Vec<f32>> = descriptors.iter().map(|d| normalize(&d.vector)).collect();
    let neighbors = (0..descriptors.len())
        .into_par_iter()
        .map(|i| {
            let mut scored: Vec<(f32, usize)> = (0..descriptors.len())
                .filter(|&j| j != i)
                .map(|j| (cosine(&unit[i], &unit[j]), j))
                .collect();
            scored.sort_by(|a, b| {
                b.0.total_cmp(&a.0)
                    .then_with(|| descriptors[a.1].image_id.cmp(&descriptors[b.1].image_id))
            });
            scored.truncate(n_max);
            scored.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    NeighborSets {
        image_ids: descriptors.iter().map(|d| d.image_id.clone()).collect(),
        neighbors,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub k: u32,
    pub l: u32,
    pub score: f32,
}

/// Sparse nonnegative `rows x cols` similarity matrix, entries in row-major order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreMatrix {
    pub fn transpose(&self) -> Self {
        let mut entries: Vec<ScoreEntry> = self
            .entries
            .iter()
            .map(|e| ScoreEntry {
                k: e.l,
                l: e.k,
                score: e.score,
            })
            .collect();
        entries.sort_by_key(|e| (e.k, e.l));
        Self {
            rows: self.cols,
            cols: self.rows,
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Dense row-major copy, zeros where no entry is stored.
    pub fn to_dense(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.rows * self.cols];
        for e in &self.entries {
            out[e.k as usize * self.cols + e.l as usize] = e.score;
        }
        out
    }
}

/// Dense region-to-region similarity between two images.
pub trait SimilarityKernel: Sync {
    /// Row-major `a.len() x b.len()` scores.
    fn dense(&self, a: &[RegionDescriptor], b: &[RegionDescriptor]) -> Vec<f32>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CosineKernel;

impl SimilarityKernel for CosineKernel {
    fn dense(&self, a: &[RegionDescriptor], b: &[RegionDescriptor]) -> Vec<f32> {
        let mut out = Vec::with_capacity(a.len() * b.len());
        for x in a {
            for y in b {
                out.push(cosine(&x.vector, &y.vector));
            }
        }
        out
    }
}

/// Keeps the `budget` largest strictly positive entries of a dense matrix,
/// ties broken by row-major position.
pub fn sparsify_top_k(dense: &[f32], rows: usize, cols: usize, budget: usize) -> ScoreMatrix {
    debug_assert_eq!(dense.len(), rows * cols);
    let mut positive: Vec<(f32, usize)> = dense
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > 0.0)
        .map(|(i, &s)| (s, i))
        .collect();
    let order = |a: &(f32, usize), b: &(f32, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if positive.len() > budget {
        if budget == 0 {
            positive.clear();
        } else {
            positive.select_nth_unstable_by(budget - 1, order);
            positive.truncate(budget);
        }
    }
    positive.sort_by_key(|&(_, i)| i);
    ScoreMatrix {
        rows,
        cols,
        entries: positive
            .into_iter()
            .map(|(score, i)| ScoreEntry {
                k: (i / cols) as u32,
                l: (i % cols) as u32,
                score,
            })
            .collect(),
    }
}

pub fn score_pair_with(
    kernel: &dyn SimilarityKernel,
    a: &[RegionDescriptor],
    b: &[RegionDescriptor],
    budget: usize,
) -> ScoreMatrix {
    let dense = kernel.dense(a, b);
    sparsify_top_k(&dense, a.len(), b.len(), budget)
}

/// Cosine score matrix with at most `budget` positive entries.
pub fn score_pair(a: &[RegionDescriptor], b: &[RegionDescriptor], budget: usize) -> ScoreMatrix {
    score_pair_with(&CosineKernel, a, b, budget)
}

/// `(sum_i |N(i)|) * K`, in stored entries.
pub fn memory_cost(neighbors: &NeighborSets, budget: usize) -> u64 {
    neighbors.total_links() as u64 * budget as u64
}

/// Score matrices for every unordered linked pair `(a, b)`, `a < b`,
/// oriented from `a` to `b`.
pub type PairScores = BTreeMap<(usize, usize), ScoreMatrix>;

/// Scores every linked pair. With `workers`, the work runs on a dedicated
/// pool of that size; peak transient memory is one dense block per worker.
pub fn score_all_pairs(
    kernel: &dyn SimilarityKernel,
    regions: &[Vec<RegionDescriptor>],
    neighbors: &NeighborSets,
    budget: usize,
    workers: Option<usize>,
) -> PairScores {
    let pairs = neighbors.unordered_pairs();
    let work = || {
        pairs
            .par_iter()
            .map(|&(a, b)| ((a, b), score_pair_with(kernel, &regions[a], &regions[b], budget)))
            .collect::<Vec<_>>()
    };
    let scored = match workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(work),
        None => work(),
    };
    scored.into_iter().collect()
}

pub const SCORE_DATA_FILE: &str = "scores.bin";
pub const SCORE_INDEX_FILE: &str = "scores.index.json";
const ENTRY_BYTES: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreIndex {
    pub version: u32,
    pub entry_bytes: usize,
    pub image_ids: Vec<String>,
    pub pairs: Vec<ScoreIndexEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreIndexEntry {
    pub i: String,
    pub j: String,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset into the data file.
    pub offset: u64,
    pub count: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum ScoreFileError {
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Corrupt { path: std::path::PathBuf, message: String },
}

/// Writes `scores.bin` (little-endian `u32 k, u32 l, f32 score` triplets,
/// pair blocks back to back) and `scores.index.json` into `dir`.
pub fn write_score_files(dir: &Path, image_ids: &[String], scores: &PairScores) -> Result<(), ScoreFileError> {
    let data_path = dir.join(SCORE_DATA_FILE);
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ScoreFileError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(&data_path))?;
    let mut out = BufWriter::new(tmp);
    let mut index = ScoreIndex {
        version: 1,
        entry_bytes: ENTRY_BYTES,
        image_ids: image_ids.to_vec(),
        pairs: Vec::with_capacity(scores.len()),
    };
    let mut offset = 0u64;
    for (&(a, b), m) in scores {
        for e in &m.entries {
            out.write_all(&e.k.to_le_bytes()).map_err(io(&data_path))?;
            out.write_all(&e.l.to_le_bytes()).map_err(io(&data_path))?;
            out.write_all(&e.score.to_le_bytes()).map_err(io(&data_path))?;
        }
        index.pairs.push(ScoreIndexEntry {
            i: image_ids[a].clone(),
            j: image_ids[b].clone(),
            rows: m.rows,
            cols: m.cols,
            offset,
            count: m.entries.len(),
        });
        offset += (m.entries.len() * ENTRY_BYTES) as u64;
    }
    let tmp = out.into_inner().map_err(|e| io(&data_path)(e.into_error()))?;
    tmp.persist(&data_path).map_err(|e| io(&data_path)(e.error))?;

    let index_path = dir.join(SCORE_INDEX_FILE);
    let text = serde_json::to_string(&index).expect("index serializes");
    crate::tensor_store::write_atomic(&index_path, text.as_bytes()).map_err(|e| ScoreFileError::Corrupt {
        path: index_path.clone(),
        message: e.to_string(),
    })?;
    Ok(())
}

pub fn read_score_files(dir: &Path) -> Result<(Vec<String>, PairScores), ScoreFileError> {
    let index_path = dir.join(SCORE_INDEX_FILE);
    let data_path = dir.join(SCORE_DATA_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|source| ScoreFileError::Io {
        path: index_path.clone(),
        source,
    })?;
    let index: ScoreIndex = serde_json::from_str(&text).map_err(|e| ScoreFileError::Corrupt {
        path: index_path.clone(),
        message: e.to_string(),
    })?;
    let mut data = Vec::new();
    std::fs::File::open(&data_path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| ScoreFileError::Io {
            path: data_path.clone(),
            source,
        })?;
    let position: BTreeMap<&str, usize> = index
        .image_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let corrupt = |message: String| ScoreFileError::Corrupt {
        path: data_path.clone(),
        message,
    };

    let mut scores = PairScores::new();
    for p in &index.pairs {
        let (a, b) = match (position.get(p.i.as_str()), position.get(p.j.as_str())) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(corrupt(format!("unknown image in pair ({}, {})", p.i, p.j))),
        };
        let start = p.offset as usize;
        let end = start + p.count * ENTRY_BYTES;
        let block = data
            .get(start..end)
            .ok_or_else(|| corrupt(format!("pair ({}, {}) runs past end of data", p.i, p.j)))?;
        let entries = block
            .chunks_exact(ENTRY_BYTES)
            .map(|c| ScoreEntry {
                k: u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                l: u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
                score: f32::from_le_bytes([c[8], c[9], c[10], c[11]]),
            })
            .collect();
        let m = ScoreMatrix {
            rows: p.rows,
            cols: p.cols,
            entries,
        };
        let (key, m) = if a < b { ((a, b), m) } else { ((b, a), m.transpose()) };
        scores.insert(key, m);
    }
    Ok((index.image_ids, scores))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rd(v: &[f32]) -> RegionDescriptor {
        RegionDescriptor::new("x", 0, v.to_vec())
    }

    fn gd(id: &str, v: &[f32]) -> GlobalDescriptor {
        GlobalDescriptor::new(id, v.to_vec()).unwrap()
    }

    #[test]
    fn identical_descriptors_are_mutual_neighbors() {
        let d = [gd("a", &[1.0, 2.0]), gd("b", &[1.0, 2.0]), gd("c", &[1.0, 2.0])];
        let n = prefilter_neighbors(&d, 50);
        assert_eq!(n.neighbors, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
    }

    #[test]
    fn orthogonal_descriptors_fall_back_to_id_order() {
        let d = [
            gd("c", &[1.0, 0.0, 0.0]),
            gd("a", &[0.0, 1.0, 0.0]),
            gd("b", &[0.0, 0.0, 1.0]),
        ];
        let n = prefilter_neighbors(&d, 1);
        assert_eq!(n.neighbor_ids(0), vec!["a"]);
        assert_eq!(n.neighbor_ids(1), vec!["b"]);
        assert_eq!(n.neighbor_ids(2), vec!["a"]);
    }

    #[test]
    fn identical_single_regions() {
        let m = score_pair(&[rd(&[0.3, 0.4])], &[rd(&[0.3, 0.4])], 10);
        assert_eq!(m.entries.len(), 1);
        assert!((m.entries[0].score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anti_correlated_is_empty() {
        let m = score_pair(&[rd(&[1.0, 0.0])], &[rd(&[-1.0, 0.0]), rd(&[0.0, 1.0])], 10);
        assert!(m.is_empty());
        assert_eq!((m.rows, m.cols), (1, 2));
    }

    #[test]
    fn ties_prefer_row_major() {
        let m = sparsify_top_k(&[1.0, 2.0, 2.0, 2.0], 2, 2, 2);
        let kl: Vec<_> = m.entries.iter().map(|e| (e.k, e.l)).collect();
        assert_eq!(kl, vec![(0, 1), (1, 0)]);
        assert!(sparsify_top_k(&[1.0], 1, 1, 0).is_empty());
    }

    #[test]
    fn transpose_twice_is_identity() {
        let m = sparsify_top_k(&[0.5, 0.0, 0.25, 0.75, 0.1, 0.0], 2, 3, 4);
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().to_dense(), vec![0.5, 0.75, 0.0, 0.1, 0.25, 0.0]);
    }

    #[test]
    fn memory_cost_examples() {
        let n = NeighborSets {
            image_ids: (0..3550).map(|i| i.to_string()).collect(),
            neighbors: vec![(0..50).collect(); 3550],
        };
        assert_eq!(memory_cost(&n, 50), 8_875_000);
        assert_eq!(memory_cost(&n, 1), 3550 * 50);
        let empty = NeighborSets {
            image_ids: vec![],
            neighbors: vec![],
        };
        assert_eq!(memory_cost(&empty, 50), 0);
    }

    #[test]
    fn score_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let mut scores = PairScores::new();
        scores.insert((0, 1), sparsify_top_k(&[0.5, 0.0, 0.25, 0.75], 2, 2, 3));
        scores.insert((1, 2), sparsify_top_k(&[0.0, 0.0, 0.0], 1, 3, 3));
        scores.insert((0, 2), sparsify_top_k(&[0.9, 0.1, 0.2], 3, 1, 1));
        write_score_files(dir.path(), &ids, &scores).unwrap();
        let (ids_back, back) = read_score_files(dir.path()).unwrap();
        assert_eq!(ids_back, ids);
        assert_eq!(back, scores);
        let bytes = std::fs::metadata(dir.path().join(SCORE_DATA_FILE)).unwrap().len();
        assert_eq!(bytes, 12 * 4);
    }
}
