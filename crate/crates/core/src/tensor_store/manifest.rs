use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

use super::{write_atomic, TensorError};

/// Catalog of a dataset. Paths are stored relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    #[serde(default = "default_version")]
    pub version: u32,
    pub images: Vec<ImageEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub image_id: String,
    pub original_width: u32,
    pub original_height: u32,
    /// Layer tag to tensor file.
    pub tensor_paths: BTreeMap<String, PathBuf>,
    pub descriptor_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub image_id: String,
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}: {}", self.image_id, self.field, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Write(#[from] TensorError),
}

impl DatasetManifest {
    pub fn new(images: Vec<ImageEntry>, base_dir: impl Into<PathBuf>) -> Self {
        Self {
            version: 1,
            images,
            base_dir: base_dir.into(),
        }
    }

    /// Resolves a manifest-relative path.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|e| e.image_id == image_id)
    }

    /// Union of layer tags, sorted.
    pub fn layer_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .images
            .iter()
            .flat_map(|e| e.tensor_paths.keys().cloned())
            .collect();
        tags.sort();
        tags.dedup();
        tags
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| ManifestError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    manifest.base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(manifest)
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ManifestError> {
    let mut text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

/// Checks every manifest invariant; an empty list means the manifest is valid.
pub fn validate_manifest(manifest: &DatasetManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    let mut push = |id: &str, field: &str, message: String| {
        out.push(Violation {
            image_id: id.to_string(),
            field: field.to_string(),
            message,
        })
    };

    for entry in &manifest.images {
        let id = entry.image_id.as_str();
        if id.is_empty() {
            push(id, "image_id", "empty id".into());
        }
        if !seen.insert(id) {
            push(id, "image_id", "duplicate id".into());
        }
        if entry.original_width == 0 || entry.original_height == 0 {
            push(id, "original_width", "image size must be positive".into());
        }
        if entry.tensor_paths.is_empty() {
            push(id, "tensor_paths", "no feature tensors listed".into());
        }
        for (tag, p) in &entry.tensor_paths {
            if !manifest.resolve(p).is_file() {
                push(
                    id,
                    &format!("tensor_paths.{tag}"),
                    format!("file not found: {}", p.display()),
                );
            }
        }
        if !manifest.resolve(&entry.descriptor_path).is_file() {
            push(
                id,
                "descriptor_path",
                format!("file not found: {}", entry.descriptor_path.display()),
            );
        }
        if let Some(gt) = &entry.ground_truth {
            let (w, h) = (entry.original_width as f32, entry.original_height as f32);
            for (k, g) in gt.iter().enumerate() {
                if !g.bbox.is_within(w, h) {
                    push(
                        id,
                        &format!("ground_truth[{k}]"),
                        format!("box {:?} is empty or outside [0,{w}]x[0,{h}]", <[f32; 4]>::from(g.bbox)),
                    );
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{save_descriptor, save_tensor, FeatureTensor, GlobalDescriptor};

    fn fixture(dir: &Path, n: usize) -> DatasetManifest {
        let mut images = Vec::new();
        for i in 0..n {
            let id = format!("img{i}");
            let t = FeatureTensor::new(2, 2, 1, vec![1.0; 4], "relu5_3").unwrap();
            save_tensor(&t, &dir.join(format!("{id}.npy"))).unwrap();
            let d = GlobalDescriptor::new(&id, vec![1.0, 0.0]).unwrap();
            save_descriptor(&d, &dir.join(format!("{id}.fc6.npy"))).unwrap();
            images.push(ImageEntry {
                image_id: id.clone(),
                original_width: 32,
                original_height: 32,
                tensor_paths: [("relu5_3".to_string(), PathBuf::from(format!("{id}.npy")))]
                    .into_iter()
                    .collect(),
                descriptor_path: PathBuf::from(format!("{id}.fc6.npy")),
                ground_truth: Some(vec![GroundTruthBox {
                    bbox: BBox::new(0.0, 0.0, 16.0, 16.0),
                    label: "a".into(),
                }]),
                class_label: Some("a".into()),
            });
        }
        DatasetManifest::new(images, dir)
    }

    #[test]
    fn valid_three_image_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 3);
        let path = dir.path().join("manifest.json");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.images, m.images);
        assert!(validate_manifest(&loaded).is_empty());
    }

    #[test]
    fn duplicate_id_and_out_of_bounds_box() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path(), 2);
        m.images[1].image_id = "img0".into();
        m.images[0].ground_truth.as_mut().unwrap()[0].bbox = BBox::new(10.0, 0.0, 40.0, 8.0);
        let v = validate_manifest(&m);
        assert!(v.iter().any(|v| v.message == "duplicate id" && v.image_id == "img0"));
        assert!(v.iter().any(|v| v.field == "ground_truth[0]"));
    }

    #[test]
    fn missing_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = fixture(dir.path(), 1);
        m.images[0].descriptor_path = PathBuf::from("gone.npy");
        let v = validate_manifest(&m);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].field, "descriptor_path");
    }

    #[test]
    fn parse_error_has_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\n  \"images\": [\n    {\"image_id\": 3}\n  ]\n}\n").unwrap();
        match load_manifest(&path) {
            Err(ManifestError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"images\": [], \"extra\": 1}").unwrap();
        assert!(matches!(load_manifest(&path), Err(ManifestError::Parse { .. })));
    }
}
