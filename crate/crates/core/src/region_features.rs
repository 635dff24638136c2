//! Fixed-size region descriptors by RoI max pooling, and cosine similarity.

use std::path::Path;

use crate::bbox::BBox;
use crate::tensor_store::{l2_norm, load_array, save_array, FeatureTensor, TensorError};

pub const DEFAULT_POOL_GRID: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescriptor {
    pub image_id: String,
    pub proposal_index: usize,
    /// `pool_grid x pool_grid x depth`, bin-major.
    pub vector: Vec<f32>,
    pub norm: f32,
}

impl RegionDescriptor {
    pub fn new(image_id: impl Into<String>, proposal_index: usize, vector: Vec<f32>) -> Self {
        let norm = l2_norm(&vector);
        Self {
            image_id: image_id.into(),
            proposal_index,
            vector,
            norm,
        }
    }

    /// Unit-norm copy; a zero vector stays zero.
    pub fn normalized(&self) -> Self {
        Self {
            vector: normalize(&self.vector),
            norm: if self.norm > 0.0 { 1.0 } else { 0.0 },
            ..self.clone()
        }
    }
}

pub fn normalize(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|&x| (x as f64 / n) as f32).collect()
    }
}

/// Cells `[lo, hi)` covered by the pixel interval `[a, b)` along one axis,
/// rounded inward, never empty.
fn inward_cells(a: f32, b: f32, image_len: u32, cells: usize) -> (usize, usize) {
    const EPS: f64 = 1e-6;
    let scale = cells as f64 / image_len as f64;
    let lo = ((a as f64 * scale) - EPS).ceil().max(0.0) as usize;
    let hi = (((b as f64 * scale) + EPS).floor() as usize).min(cells);
    if hi > lo {
        (lo.min(cells - 1), hi)
    } else {
        let center = ((a as f64 + b as f64) / 2.0 * scale).floor().max(0.0) as usize;
        let c = center.min(cells - 1);
        (c, c + 1)
    }
}

/// Splits `len` cells into `bins` near-equal, non-overlapping windows and
/// maps every bin to a non-empty one: itself, or the nearest non-empty bin
/// (lower index on ties). Returns `(start, end)` offsets per bin.
fn bin_windows(len: usize, bins: usize) -> Vec<(usize, usize)> {
    let raw: Vec<(usize, usize)> = (0..bins).map(|i| (i * len / bins, (i + 1) * len / bins)).collect();
    (0..bins)
        .map(|i| {
            let nearest = (0..bins)
                .filter(|&j| raw[j].1 > raw[j].0)
                .min_by_key(|&j| (j.abs_diff(i), j))
                .expect("len >= 1 leaves a non-empty bin");
            raw[nearest]
        })
        .collect()
}

/// Channelwise max pooling of `tensor` over `bbox` on a
/// `pool_grid x pool_grid` layout. The box is first clamped to the image.
pub fn roi_pool(tensor: &FeatureTensor, bbox: &BBox, image_size: (u32, u32), pool_grid: usize) -> Vec<f32> {
    assert!(pool_grid >= 1, "pool_grid must be at least 1");
    let (h, w, d) = tensor.shape();
    let b = bbox.clamp_to(image_size.0 as f32, image_size.1 as f32);
    let (c_lo, c_hi) = inward_cells(b.xmin, b.xmax, image_size.0, w);
    let (r_lo, r_hi) = inward_cells(b.ymin, b.ymax, image_size.1, h);
    let row_bins = bin_windows(r_hi - r_lo, pool_grid);
    let col_bins = bin_windows(c_hi - c_lo, pool_grid);

    let mut out = Vec::with_capacity(pool_grid * pool_grid * d);
    for &(rs, re) in &row_bins {
        for &(cs, ce) in &col_bins {
            let mut acc = vec![f32::NEG_INFINITY; d];
            for r in r_lo + rs..r_lo + re {
                for c in c_lo + cs..c_lo + ce {
                    for (a, &v) in acc.iter_mut().zip(tensor.at(r, c)) {
                        *a = a.max(v);
                    }
                }
            }
            out.extend(acc);
        }
    }
    out
}

/// Descriptors for every box of one image.
pub fn describe_regions(
    image_id: &str,
    tensor: &FeatureTensor,
    boxes: &[BBox],
    image_size: (u32, u32),
    pool_grid: usize,
) -> Vec<RegionDescriptor> {
    boxes
        .iter()
        .enumerate()
        .map(|(k, b)| RegionDescriptor::new(image_id, k, roi_pool(tensor, b, image_size, pool_grid)))
        .collect()
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0) as f32
}

/// Writes one image's descriptors as a `(num_proposals, dim)` array.
pub fn save_descriptor_cache(path: &Path, descriptors: &[RegionDescriptor], dim: usize) -> Result<(), TensorError> {
    let mut values = Vec::with_capacity(descriptors.len() * dim);
    for d in descriptors {
        assert_eq!(d.vector.len(), dim, "descriptor dimension mismatch");
        values.extend_from_slice(&d.vector);
    }
    save_array(path, &[descriptors.len(), dim], &values)
}

pub fn load_descriptor_cache(path: &Path, image_id: &str) -> Result<Vec<RegionDescriptor>, TensorError> {
    let (shape, values) = load_array(path)?;
    if shape.len() != 2 {
        return Err(TensorError::MalformedHeader {
            path: path.to_path_buf(),
            offset: 10,
            reason: format!("descriptor cache must be 2-axis, got {shape:?}"),
        });
    }
    let dim = shape[1];
    if dim == 0 {
        return Ok(Vec::new());
    }
    Ok(values
        .chunks_exact(dim)
        .enumerate()
        .map(|(k, v)| RegionDescriptor::new(image_id, k, v.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_cell_box_replicates() {
        let t = FeatureTensor::from_fn(4, 4, 2, "", |r, c, d| (r * 10 + c + d * 100) as f32).unwrap();
        // Cell (1, 2) of a 4x4 grid on a 40x40 image.
        let v = roi_pool(&t, &BBox::new(20.0, 10.0, 30.0, 20.0), (40, 40), 2);
        assert_eq!(v, [12.0, 112.0].repeat(4));
    }

    #[test]
    fn tiny_box_keeps_one_cell() {
        let t = FeatureTensor::from_fn(4, 4, 1, "", |r, c, _| (r * 4 + c) as f32).unwrap();
        let v = roi_pool(&t, &BBox::new(21.0, 11.0, 22.0, 12.0), (40, 40), 3);
        assert_eq!(v, vec![6.0; 9]);
    }

    #[test]
    fn constant_tensor_constant_descriptor() {
        let t = FeatureTensor::from_fn(5, 7, 3, "", |_, _, d| d as f32 + 0.5).unwrap();
        let v = roi_pool(&t, &BBox::new(3.0, 4.0, 60.0, 33.0), (70, 50), 3);
        for bin in v.chunks(3) {
            assert_eq!(bin, &[0.5, 1.5, 2.5]);
        }
    }

    #[test]
    fn bins_partition_or_replicate() {
        assert_eq!(bin_windows(6, 3), vec![(0, 2), (2, 4), (4, 6)]);
        assert_eq!(bin_windows(1, 2), vec![(0, 1), (0, 1)]);
        assert_eq!(bin_windows(2, 3), vec![(0, 1), (0, 1), (1, 2)]);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-7);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 3.0]), 0.0);
        assert!((cosine(&[1.0, 0.0], &[-2.0, 0.0]) + 1.0).abs() < 1e-7);
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.npy");
        let descs = vec![
            RegionDescriptor::new("a", 0, vec![1.0, 2.0, 3.0]),
            RegionDescriptor::new("a", 1, vec![4.0, 5.0, 6.0]),
        ];
        save_descriptor_cache(&path, &descs, 3).unwrap();
        assert_eq!(load_descriptor_cache(&path, "a").unwrap(), descs);
        save_descriptor_cache(&path, &[], 3).unwrap();
        assert!(load_descriptor_cache(&path, "a").unwrap().is_empty());
    }
}
