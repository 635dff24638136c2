//! Planted-object feature tensors with known boxes.
//!
//! Every image belongs to one class and carries 1 to 3 rectangular blobs
//! whose features follow that class's 3x3 layout of part directions, plus an
//! optional distractor blob along a direction unique to the image. Blob
//! amplitude decays away from a random peak but stays at or above 0.4 of the
//! peak value. Blobs are separated by at least one coarse cell so noise-free
//! saliency components match the planted rectangles. The background is a smooth
//! image-specific scene pattern scaled by the noise level, plus optional
//! sparse per-cell speckle.

use std::collections::BTreeMap;
use std::f32::consts::TAU;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GroundTruth, ImageTruth};
use crate::bbox::BBox;
use crate::tensor_store::{
    save_descriptor, save_manifest, save_tensor, DatasetManifest, FeatureTensor, GlobalDescriptor, GroundTruthBox,
    ImageEntry, ManifestError,
};

/// Sum of a blob direction; peak global saliency of a blob is this times its
/// peak amplitude.
const DIRECTION_MASS: f32 = 10.0;

/// Per-cell noise is `max(0, z - NOISE_SHIFT)` for standard normal `z`, so
/// most channels stay silent, as after a ReLU.
const NOISE_SHIFT: f32 = 1.0;

/// Peak background saliency per unit of noise level, as a share of
/// [`DIRECTION_MASS`].
const SCENE_WEIGHT: f32 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_images: usize,
    pub classes: usize,
    /// Strength of the smooth image-specific background.
    pub noise_level: f32,
    /// Strength of independent sparse per-cell noise, relative to the mean
    /// per-channel blob activation.
    pub speckle: f32,
    pub seed: u64,
    pub image_size: u32,
    pub depth: usize,
    /// Layer tag and grid side, coarsest first. Every side must divide
    /// `image_size`, and the coarsest must divide every other.
    pub layers: Vec<(String, usize)>,
    pub max_objects: usize,
    pub distractor_prob: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_images: 40,
            classes: 4,
            noise_level: 0.0,
            speckle: 0.0,
            seed: 0,
            image_size: 224,
            depth: 32,
            layers: vec![("relu5_3".into(), 14), ("relu4_3".into(), 28)],
            max_objects: 3,
            distractor_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub image_id: String,
    pub class_label: String,
    pub width: u32,
    pub height: u32,
    /// One tensor per configured layer, in config order.
    pub tensors: Vec<FeatureTensor>,
    pub descriptor: GlobalDescriptor,
    pub objects: Vec<BBox>,
    pub distractors: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub images: Vec<SyntheticImage>,
}

pub fn generate_synthetic(n_images: usize, classes: usize, noise_level: f32, seed: u64) -> SyntheticDataset {
    SyntheticConfig {
        n_images,
        classes,
        noise_level,
        seed,
        ..SyntheticConfig::default()
    }
    .generate()
}

/// Nonnegative direction with a few dominant channels, summing to
/// [`DIRECTION_MASS`].
fn random_direction(rng: &mut ChaCha8Rng, depth: usize) -> Vec<f32> {
    let raw: Vec<f32> = (0..depth).map(|_| rng.gen::<f32>().powi(4)).collect();
    let sum: f32 = raw.iter().sum::<f32>().max(f32::MIN_POSITIVE);
    raw.into_iter().map(|v| v * DIRECTION_MASS / sum).collect()
}

/// Directions of a 3x3 layout of object parts, row-major.
type Parts = Vec<Vec<f32>>;

/// Parts sharing a common base direction, each with its own component.
fn random_parts(rng: &mut ChaCha8Rng, depth: usize) -> Parts {
    let base = random_direction(rng, depth);
    (0..9)
        .map(|_| {
            let own = random_direction(rng, depth);
            base.iter().zip(&own).map(|(b, o)| (b + o) / 2.0).collect()
        })
        .collect()
}

struct Blob {
    /// Inclusive coarse-cell rectangle.
    cells: (usize, usize, usize, usize),
    bbox: BBox,
    peak: f32,
    /// Where the amplitude peaks, in pixels.
    center: (f32, f32),
    /// Object blobs follow the class parts; distractors use one direction.
    parts: Parts,
    is_object: bool,
}

impl Blob {
    /// Amplitude and part direction at `(x, y)`, or `None` outside.
    fn sample(&self, x: f32, y: f32) -> Option<(f32, &[f32])> {
        let b = &self.bbox;
        if x < b.xmin || x >= b.xmax || y < b.ymin || y >= b.ymax {
            return None;
        }
        let d = ((x - self.center.0).abs() / b.width()).max((y - self.center.1).abs() / b.height());
        let a = self.peak * (1.0 - 0.6 * d.min(1.0));
        let part = if self.parts.len() == 9 {
            let col = ((x - b.xmin) * 3.0 / b.width()) as usize;
            let row = ((y - b.ymin) * 3.0 / b.height()) as usize;
            row.min(2) * 3 + col.min(2)
        } else {
            0
        };
        Some((a, &self.parts[part]))
    }
}

/// Rejection-samples a rectangle of 2..=5 cells per side that keeps a
/// one-cell gap to `placed`.
fn place_blob(rng: &mut ChaCha8Rng, grid: usize, placed: &[Blob]) -> Option<(usize, usize, usize, usize)> {
    for _ in 0..200 {
        let h = rng.gen_range(2..=5.min(grid));
        let w = rng.gen_range(2..=5.min(grid));
        let r0 = rng.gen_range(0..=grid - h);
        let c0 = rng.gen_range(0..=grid - w);
        let (r1, c1) = (r0 + h - 1, c0 + w - 1);
        let clear = placed.iter().all(|b| {
            let (pr0, pc0, pr1, pc1) = b.cells;
            r1 + 1 < pr0 || pr1 + 1 < r0 || c1 + 1 < pc0 || pc1 + 1 < c0
        });
        if clear {
            return Some((r0, c0, r1, c1));
        }
    }
    None
}

impl SyntheticConfig {
    pub fn generate(&self) -> SyntheticDataset {
        assert!(self.classes >= 1, "at least one class");
        assert!(!self.layers.is_empty(), "at least one layer");
        let coarse = self.layers[0].1;
        assert!(
            self.layers
                .iter()
                .all(|(_, g)| (self.image_size as usize).is_multiple_of(*g) && g % coarse == 0),
            "layer grids must divide the image and refine the coarsest grid"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let class_parts: Vec<Parts> = (0..self.classes).map(|_| random_parts(&mut rng, self.depth)).collect();
        let cell = self.image_size as f32 / coarse as f32;
        let noise_scale = self.speckle * DIRECTION_MASS / self.depth as f32;

        let images = (0..self.n_images)
            .map(|i| {
                let class = i % self.classes;
                let mut blobs: Vec<Blob> = Vec::new();
                let n_objects = rng.gen_range(1..=self.max_objects.max(1));
                let with_distractor = rng.gen_bool(self.distractor_prob);
                let total = n_objects + with_distractor as usize;
                for k in 0..total {
                    let Some(cells) = place_blob(&mut rng, coarse, &blobs) else {
                        break;
                    };
                    let is_object = !(with_distractor && k == total - 1);
                    let (parts, peak) = if is_object {
                        (class_parts[class].clone(), rng.gen_range(0.7..1.0))
                    } else {
                        (vec![random_direction(&mut rng, self.depth)], rng.gen_range(0.5..0.9))
                    };
                    let (r0, c0, r1, c1) = cells;
                    let bbox = BBox::new(
                        c0 as f32 * cell,
                        r0 as f32 * cell,
                        (c1 + 1) as f32 * cell,
                        (r1 + 1) as f32 * cell,
                    );
                    let center = (rng.gen_range(bbox.xmin..bbox.xmax), rng.gen_range(bbox.ymin..bbox.ymax));
                    blobs.push(Blob {
                        cells,
                        bbox,
                        peak,
                        center,
                        parts,
                        is_object,
                    });
                }

                let scene = random_direction(&mut rng, self.depth);
                let phase: (f32, f32) = (rng.gen_range(0.0..TAU), rng.gen_range(0.0..TAU));
                let scene_weight = |x: f32, y: f32| {
                    let (u, v) = (x / self.image_size as f32, y / self.image_size as f32);
                    self.noise_level
                        * SCENE_WEIGHT
                        * (0.5 + 0.25 * ((TAU * u + phase.0).sin() + (TAU * v + phase.1).sin()))
                };

                let tensors: Vec<FeatureTensor> = self
                    .layers
                    .iter()
                    .map(|(tag, g)| {
                        let step = self.image_size as f32 / *g as f32;
                        let mut values = Vec::with_capacity(g * g * self.depth);
                        for r in 0..*g {
                            for c in 0..*g {
                                let (x, y) = ((c as f32 + 0.5) * step, (r as f32 + 0.5) * step);
                                let mut v = vec![0.0f32; self.depth];
                                for b in &blobs {
                                    if let Some((a, dir)) = b.sample(x, y) {
                                        for (out, d) in v.iter_mut().zip(dir) {
                                            *out += a * d;
                                        }
                                    }
                                }
                                let w = scene_weight(x, y);
                                if w > 0.0 {
                                    for (out, d) in v.iter_mut().zip(&scene) {
                                        *out += w * d;
                                    }
                                }
                                if noise_scale > 0.0 {
                                    for out in v.iter_mut() {
                                        let n: f32 = rng.sample(StandardNormal);
                                        *out += noise_scale * (n - NOISE_SHIFT).max(0.0);
                                    }
                                }
                                values.extend(v);
                            }
                        }
                        FeatureTensor::new(*g, *g, self.depth, values, tag.clone())
                            .expect("generated tensor is well-formed")
                    })
                    .collect();

                let mut global = vec![0.0f32; self.depth];
                for chunk in tensors[0].values().chunks_exact(self.depth) {
                    for (g, v) in global.iter_mut().zip(chunk) {
                        *g += v;
                    }
                }
                let image_id = format!("img{i:04}");
                let descriptor =
                    GlobalDescriptor::new(image_id.clone(), global).expect("global descriptor is finite and non-empty");
                let (objects, distractors): (Vec<&Blob>, Vec<&Blob>) = blobs.iter().partition(|b| b.is_object);
                SyntheticImage {
                    image_id,
                    class_label: format!("class{class}"),
                    width: self.image_size,
                    height: self.image_size,
                    tensors,
                    descriptor,
                    objects: objects.iter().map(|b| b.bbox).collect(),
                    distractors: distractors.iter().map(|b| b.bbox).collect(),
                }
            })
            .collect();

        SyntheticDataset {
            config: self.clone(),
            images,
        }
    }
}

impl SyntheticDataset {
    pub fn ground_truth(&self) -> GroundTruth {
        self.images
            .iter()
            .map(|im| {
                (
                    im.image_id.clone(),
                    ImageTruth {
                        boxes: im.objects.clone(),
                        class_label: Some(im.class_label.clone()),
                    },
                )
            })
            .collect()
    }

    pub fn class_labels(&self) -> BTreeMap<String, String> {
        self.images
            .iter()
            .map(|im| (im.image_id.clone(), im.class_label.clone()))
            .collect()
    }

    pub fn descriptors(&self) -> Vec<GlobalDescriptor> {
        self.images.iter().map(|im| im.descriptor.clone()).collect()
    }

    /// Writes tensors, descriptors and `manifest.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest, ManifestError> {
        for sub in ["tensors", "descriptors"] {
            let path = dir.join(sub);
            std::fs::create_dir_all(&path).map_err(|source| ManifestError::Io { path, source })?;
        }
        let mut entries = Vec::with_capacity(self.images.len());
        for im in &self.images {
            let mut tensor_paths = BTreeMap::new();
            for t in &im.tensors {
                let rel = PathBuf::from("tensors").join(format!("{}_{}.npy", im.image_id, t.layer_tag()));
                save_tensor(t, &dir.join(&rel))?;
                tensor_paths.insert(t.layer_tag().to_string(), rel);
            }
            let descriptor_path = PathBuf::from("descriptors").join(format!("{}.npy", im.image_id));
            save_descriptor(&im.descriptor, &dir.join(&descriptor_path))?;
            entries.push(ImageEntry {
                image_id: im.image_id.clone(),
                original_width: im.width,
                original_height: im.height,
                tensor_paths,
                descriptor_path,
                ground_truth: Some(
                    im.objects
                        .iter()
                        .map(|&bbox| GroundTruthBox {
                            bbox,
                            label: im.class_label.clone(),
                        })
                        .collect(),
                ),
                class_label: Some(im.class_label.clone()),
            });
        }
        let manifest = DatasetManifest::new(entries, dir);
        save_manifest(&manifest, &dir.join("manifest.json"))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(6, 2, 0.3, 5), generate_synthetic(6, 2, 0.3, 5));
        assert_ne!(generate_synthetic(6, 2, 0.3, 5), generate_synthetic(6, 2, 0.3, 6));
    }

    #[test]
    fn objects_are_separated_and_inside() {
        let ds = generate_synthetic(30, 3, 0.0, 1);
        for im in &ds.images {
            assert!(!im.objects.is_empty() && im.objects.len() <= 3);
            let all: Vec<BBox> = im.objects.iter().chain(&im.distractors).copied().collect();
            for (a, b) in all
                .iter()
                .enumerate()
                .flat_map(|(k, a)| all[k + 1..].iter().map(move |b| (a, b)))
            {
                assert_eq!(a.intersection_area(b), 0.0);
            }
            for b in &all {
                assert!(b.is_within(224.0, 224.0));
            }
        }
    }

    #[test]
    fn noise_free_background_is_zero() {
        let ds = generate_synthetic(3, 1, 0.0, 2);
        let im = &ds.images[0];
        let t = &im.tensors[0];
        let covered = |r: usize, c: usize| {
            let (x, y) = ((c as f32 + 0.5) * 16.0, (r as f32 + 0.5) * 16.0);
            im.objects
                .iter()
                .chain(&im.distractors)
                .any(|b| x >= b.xmin && x < b.xmax && y >= b.ymin && y < b.ymax)
        };
        for r in 0..14 {
            for c in 0..14 {
                let s: f32 = t.at(r, c).iter().sum();
                assert_eq!(s > 0.0, covered(r, c), "cell ({r}, {c})");
            }
        }
    }
}
