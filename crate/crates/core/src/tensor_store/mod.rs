//! Feature tensors, global descriptors, and dataset manifests on disk.
//!
//! All numeric arrays use the NPY v1.0 `<f4` C-order subset (see [`npy`]).
//! Writes go to a temporary file in the destination directory and are then
//! renamed into place, so readers never observe a partial file.

mod manifest;
pub(crate) mod npy;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use manifest::{
    load_manifest, save_manifest, validate_manifest, DatasetManifest, GroundTruthBox, ImageEntry, ManifestError,
    Violation,
};

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{}: malformed NPY header at byte {offset}: {reason}", path.display())]
    MalformedHeader {
        path: PathBuf,
        offset: usize,
        reason: String,
    },
    #[error("{}: non-finite value at byte {offset}", path.display())]
    NonFiniteValue { path: PathBuf, offset: usize },
    #[error(
        "{}: shape {shape:?} needs {expected_bytes} data bytes, found {found_bytes} starting at byte {offset}",
        path.display()
    )]
    ShapeMismatch {
        path: PathBuf,
        offset: usize,
        shape: Vec<usize>,
        expected_bytes: usize,
        found_bytes: usize,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

/// An `H x W x D` activation volume stored row-major as `(row, col, channel)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f32>,
    layer_tag: String,
}

impl FeatureTensor {
    pub fn new(
        height: usize,
        width: usize,
        depth: usize,
        values: Vec<f32>,
        layer_tag: impl Into<String>,
    ) -> Result<Self, TensorError> {
        if height == 0 || width == 0 || depth == 0 {
            return Err(TensorError::Invalid(format!(
                "dimensions must be positive, got ({height}, {width}, {depth})"
            )));
        }
        let expected = height
            .checked_mul(width)
            .and_then(|hw| hw.checked_mul(depth))
            .ok_or_else(|| TensorError::Invalid("shape overflows".into()))?;
        if values.len() != expected {
            return Err(TensorError::Invalid(format!(
                "expected {expected} values for ({height}, {width}, {depth}), got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            height,
            width,
            depth,
            values,
            layer_tag: layer_tag.into(),
        })
    }

    /// Builds a tensor from a closure over `(row, col, channel)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        depth: usize,
        layer_tag: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, TensorError> {
        let mut values = Vec::with_capacity(height * width * depth);
        for r in 0..height {
            for c in 0..width {
                for d in 0..depth {
                    values.push(f(r, c, d));
                }
            }
        }
        Self::new(height, width, depth, values, layer_tag)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.depth)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn layer_tag(&self) -> &str {
        &self.layer_tag
    }

    pub fn with_layer_tag(mut self, tag: impl Into<String>) -> Self {
        self.layer_tag = tag.into();
        self
    }

    /// Feature vector at grid cell `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.depth;
        &self.values[start..start + self.depth]
    }

    /// Elementwise scaling; `factor` must keep values finite.
    pub fn scaled(&self, factor: f32) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }
}

/// Whole-image descriptor used for neighbor prefiltering.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalDescriptor {
    pub image_id: String,
    pub vector: Vec<f32>,
    pub norm: f32,
}

impl GlobalDescriptor {
    pub fn new(image_id: impl Into<String>, vector: Vec<f32>) -> Result<Self, TensorError> {
        if vector.is_empty() {
            return Err(TensorError::Invalid("global descriptor is empty".into()));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Invalid("global descriptor has non-finite values".into()));
        }
        let norm = l2_norm(&vector);
        Ok(Self {
            image_id: image_id.into(),
            vector,
            norm,
        })
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt() as f32
}

/// Reads any-rank `<f4` NPY array.
pub fn load_array(path: &Path) -> Result<(Vec<usize>, Vec<f32>), TensorError> {
    let bytes = std::fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    npy::decode(path, &bytes)
}

/// Writes an any-rank `<f4` NPY array atomically.
pub fn save_array(path: &Path, shape: &[usize], values: &[f32]) -> Result<(), TensorError> {
    debug_assert_eq!(shape.iter().product::<usize>(), values.len());
    write_atomic(path, &npy::encode(shape, values))
}

pub fn load_tensor(path: &Path) -> Result<FeatureTensor, TensorError> {
    let (shape, values) = load_array(path)?;
    if shape.len() != 3 {
        return Err(TensorError::MalformedHeader {
            path: path.to_path_buf(),
            offset: 10,
            reason: format!("expected a 3-axis (H, W, D) shape, got {shape:?}"),
        });
    }
    if shape.contains(&0) {
        return Err(TensorError::MalformedHeader {
            path: path.to_path_buf(),
            offset: 10,
            reason: format!("shape {shape:?} has an empty axis"),
        });
    }
    FeatureTensor::new(shape[0], shape[1], shape[2], values, "")
}

pub fn save_tensor(tensor: &FeatureTensor, path: &Path) -> Result<(), TensorError> {
    save_array(path, &[tensor.height, tensor.width, tensor.depth], &tensor.values)
}

/// Loads a global descriptor; any shape is flattened.
pub fn load_descriptor(path: &Path, image_id: &str) -> Result<GlobalDescriptor, TensorError> {
    let (_, values) = load_array(path)?;
    GlobalDescriptor::new(image_id, values).map_err(|e| match e {
        TensorError::Invalid(reason) => TensorError::MalformedHeader {
            path: path.to_path_buf(),
            offset: 10,
            reason,
        },
        other => other,
    })
}

pub fn save_descriptor(descriptor: &GlobalDescriptor, path: &Path) -> Result<(), TensorError> {
    save_array(path, &[descriptor.vector.len()], &descriptor.vector)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), TensorError> {
    let io_err = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.as_file().sync_all().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureTensor {
        FeatureTensor::from_fn(2, 2, 3, "relu5_3", |r, c, d| (r * 6 + c * 3 + d) as f32 - 4.5).unwrap()
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.npy");
        let t = sample();
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap().with_layer_tag("relu5_3");
        assert_eq!(back, t);
    }

    #[test]
    fn eleven_floats_for_twelve_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.npy");
        let mut bytes = npy::encode(&[2, 2, 3], &[1.0; 12]);
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        match load_tensor(&path) {
            Err(TensorError::ShapeMismatch {
                expected_bytes,
                found_bytes,
                path: p,
                ..
            }) => {
                assert_eq!(expected_bytes, 48);
                assert_eq!(found_bytes, 44);
                assert_eq!(p, path);
            }
            other => panic!("expected ShapeMismatch, got {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.npy");
        let mut vals = [0.5f32; 12];
        vals[7] = f32::NAN;
        let bytes = npy::encode(&[2, 2, 3], &vals);
        let data_start = bytes.len() - 48;
        std::fs::write(&path, bytes).unwrap();
        match load_tensor(&path) {
            Err(TensorError::NonFiniteValue { offset, .. }) => assert_eq!(offset, data_start + 28),
            other => panic!("expected NonFiniteValue, got {other:?}"),
        }
    }

    #[test]
    fn two_axis_file_is_not_a_feature_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.npy");
        save_array(&path, &[3, 4], &[0.0; 12]).unwrap();
        assert!(matches!(load_tensor(&path), Err(TensorError::MalformedHeader { .. })));
    }

    #[test]
    fn save_into_missing_or_non_directory_parent_fails() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope").join("t.npy");
        assert!(matches!(save_tensor(&sample(), &missing), Err(TensorError::Io { .. })));

        // A regular file as parent fails even for root, unlike a chmod'ed directory.
        let file = dir.path().join("plain");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(
            save_tensor(&sample(), &file.join("t.npy")),
            Err(TensorError::Io { .. })
        ));
    }

    #[test]
    fn descriptor_norm_is_cached() {
        let d = GlobalDescriptor::new("a", vec![3.0, 4.0]).unwrap();
        assert!((d.norm - 5.0).abs() < 1e-6);
        assert!(GlobalDescriptor::new("a", vec![]).is_err());
    }

    #[test]
    fn constructor_rejects_bad_tensors() {
        assert!(FeatureTensor::new(0, 1, 1, vec![], "").is_err());
        assert!(FeatureTensor::new(1, 1, 2, vec![1.0], "").is_err());
        assert!(FeatureTensor::new(1, 1, 1, vec![f32::INFINITY], "").is_err());
    }
}
