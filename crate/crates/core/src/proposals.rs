//! Region proposals from threshold sweeps over local saliency maps.
//!
//! For one layer: the global saliency map is floored at `alpha * max`, robust
//! local maxima are picked by persistence with 3x3 suppression, and each
//! maximum `y` gets a local saliency map. Locations that are weak in both the
//! local map (below its mean) and the global map (below `beta` times its
//! mean) are masked out. Sweeping `v` thresholds between the lowest and
//! highest unmasked local scores, the 4-connected component holding `y` at
//! each threshold yields one box. All boxes from one maximum form a group.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize, Serializer};

use crate::bbox::BBox;
use crate::saliency::{
    compute_persistence, global_saliency, local_saliency, select_maxima, SaliencyError, SaliencyMap,
};
use crate::tensor_store::FeatureTensor;

/// How the two weakness tests combine when masking a local map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Masked only when weak in both maps.
    Both,
    /// Masked when weak in either map.
    Either,
}

/// Which locations the map means are taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanScope {
    AllLocations,
    /// Only locations that pass the `alpha` floor.
    AboveFloor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalParams {
    pub alpha: f32,
    pub beta: f32,
    /// Maximum number of local maxima (groups) per layer.
    pub max_maxima: usize,
    /// Number of thresholds swept per local map.
    pub threshold_count: usize,
    pub mask_rule: MaskRule,
    pub mean_scope: MeanScope,
}

impl Default for ProposalParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.5,
            max_maxima: 20,
            threshold_count: 50,
            mask_rule: MaskRule::Both,
            mean_scope: MeanScope::AllLocations,
        }
    }
}

impl ProposalParams {
    pub fn validate(&self) -> Result<(), ProposalError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.alpha) || !unit.contains(&self.beta) {
            return Err(ProposalError::InvalidParams(format!(
                "alpha and beta must lie in [0, 1], got ({}, {})",
                self.alpha, self.beta
            )));
        }
        if self.max_maxima == 0 || self.threshold_count == 0 {
            return Err(ProposalError::InvalidParams(
                "max_maxima and threshold_count must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProposalError {
    #[error("feature grid of {height}x{width} is too small to propose regions")]
    DegenerateTensor { height: usize, width: usize },
    #[error("cannot fuse proposals of different images: '{first}' and '{other}'")]
    MixedImageIds { first: String, other: String },
    #[error("no proposal sets to fuse")]
    NothingToFuse,
    #[error("invalid proposal parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    #[serde(rename = "box", serialize_with = "serialize_box_2dp")]
    pub bbox: BBox,
    #[serde(rename = "group")]
    pub group_id: usize,
    #[serde(rename = "layer")]
    pub layer_tag: String,
    #[serde(rename = "threshold")]
    pub threshold_index: usize,
}

fn serialize_box_2dp<S: Serializer>(b: &BBox, s: S) -> Result<S::Ok, S::Error> {
    let round = |v: f32| ((v as f64) * 100.0).round() / 100.0;
    [round(b.xmin), round(b.ymin), round(b.xmax), round(b.ymax)].serialize(s)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub layer_tag: String,
    pub group_count: usize,
}

/// Proposals of one image, partitioned into groups by source local maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub image_id: String,
    pub proposals: Vec<Proposal>,
    /// Group count per layer, in group-id order.
    pub layers: Vec<LayerGroups>,
    /// Set when the global map had nothing above the floor.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_after_floor: bool,
}

impl ProposalSet {
    pub fn empty(image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            proposals: Vec::new(),
            layers: Vec::new(),
            empty_after_floor: false,
        }
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }

    pub fn group_count(&self) -> usize {
        self.layers.iter().map(|l| l.group_count).sum()
    }

    /// Group id of every proposal.
    pub fn group_ids(&self) -> Vec<usize> {
        self.proposals.iter().map(|p| p.group_id).collect()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.proposals.iter().map(|p| p.bbox).collect()
    }

    /// Checks the partition invariants: dense group ids, every group
    /// non-empty, no duplicate `(box, group)` pair.
    pub fn check_invariants(&self) -> Result<(), String> {
        let groups = self.group_count();
        let mut sizes = vec![0usize; groups];
        for (i, p) in self.proposals.iter().enumerate() {
            if p.group_id >= groups {
                return Err(format!("proposal {i} has group {} of {groups}", p.group_id));
            }
            sizes[p.group_id] += 1;
            if self.proposals[..i]
                .iter()
                .any(|q| q.group_id == p.group_id && q.bbox == p.bbox)
            {
                return Err(format!("proposal {i} duplicates an earlier box in its group"));
            }
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(format!("group {g} is empty"));
        }
        Ok(())
    }
}

/// Inclusive rectangle of grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

/// Maps grid cells to the pixel rectangle they cover, rounding outward.
///
/// Cell `(r, c)` covers `[c*W/w, (c+1)*W/w) x [r*H/h, (r+1)*H/h)`.
pub fn map_grid_box_to_image(grid_box: GridBox, grid_shape: (usize, usize), image_size: (u32, u32)) -> BBox {
    let (h, w) = (grid_shape.0 as u64, grid_shape.1 as u64);
    let (img_w, img_h) = (image_size.0 as u64, image_size.1 as u64);
    let floor_div = |a: u64, b: u64| a / b;
    let ceil_div = |a: u64, b: u64| a.div_ceil(b);
    let x0 = floor_div(grid_box.col0 as u64 * img_w, w).min(img_w);
    let x1 = ceil_div((grid_box.col1 as u64 + 1) * img_w, w).min(img_w);
    let y0 = floor_div(grid_box.row0 as u64 * img_h, h).min(img_h);
    let y1 = ceil_div((grid_box.row1 as u64 + 1) * img_h, h).min(img_h);
    BBox::new(x0 as f32, y0 as f32, x1 as f32, y1 as f32)
}

/// Proposals from one layer's tensor.
pub fn generate_for_layer(
    tensor: &FeatureTensor,
    params: &ProposalParams,
    image_id: &str,
    image_size: (u32, u32),
) -> Result<ProposalSet, ProposalError> {
    params.validate()?;
    let (h, w, _) = tensor.shape();
    if h * w == 1 {
        return Err(ProposalError::DegenerateTensor { height: h, width: w });
    }
    let layer_tag = tensor.layer_tag().to_string();
    let mut set = ProposalSet::empty(image_id);

    let global = global_saliency(tensor);
    let floor = params.alpha * global.max();
    let candidates = match compute_persistence(&global, floor) {
        Ok(c) => c,
        Err(SaliencyError::EmptyAfterFloor { .. }) => {
            log::warn!("{image_id}/{layer_tag}: no location above the saliency floor");
            set.empty_after_floor = true;
            set.layers.push(LayerGroups {
                layer_tag,
                group_count: 0,
            });
            return Ok(set);
        }
        Err(e) => unreachable!("persistence only fails on an empty floor: {e}"),
    };
    let maxima = select_maxima(&candidates, params.max_maxima);
    let above_floor: Vec<bool> = global.scores.iter().map(|&s| s >= floor).collect();
    let global_mean = scoped_mean(&global, &above_floor, params.mean_scope);

    let mut group = 0;
    for m in &maxima {
        let local = match local_saliency(tensor, m.row, m.col) {
            Ok(map) => map,
            Err(e) => {
                log::warn!("{image_id}/{layer_tag}: skipping maximum: {e}");
                continue;
            }
        };
        let local_mean = scoped_mean(&local, &above_floor, params.mean_scope);
        let anchor = m.row * w + m.col;
        let keep: Vec<bool> = (0..h * w)
            .map(|i| {
                if i == anchor {
                    return true;
                }
                let weak_local = (local.scores[i] as f64) < local_mean;
                let weak_global = (global.scores[i] as f64) < params.beta as f64 * global_mean;
                let masked = match params.mask_rule {
                    MaskRule::Both => weak_local && weak_global,
                    MaskRule::Either => weak_local || weak_global,
                };
                !masked
            })
            .collect();

        let (lo, hi) = keep
            .iter()
            .zip(&local.scores)
            .filter(|(&k, _)| k)
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), (_, &s)| {
                (lo.min(s), hi.max(s))
            });

        let start = set.proposals.len();
        for (t_idx, threshold) in sweep_thresholds(lo, hi, params.threshold_count).enumerate() {
            let cells = component_box(&local.scores, &keep, (h, w), anchor, threshold);
            let bbox = map_grid_box_to_image(cells, (h, w), image_size);
            if set.proposals[start..].iter().any(|p| p.bbox == bbox) {
                continue;
            }
            set.proposals.push(Proposal {
                bbox,
                group_id: group,
                layer_tag: layer_tag.clone(),
                threshold_index: t_idx,
            });
        }
        group += 1;
    }
    set.layers.push(LayerGroups {
        layer_tag,
        group_count: group,
    });
    Ok(set)
}

/// `count` thresholds from `lo` to `hi` inclusive; the last one is exactly `hi`.
pub fn sweep_thresholds(lo: f32, hi: f32, count: usize) -> impl Iterator<Item = f32> {
    (0..count).map(move |j| {
        if count == 1 {
            lo
        } else if j + 1 == count {
            hi
        } else {
            (lo as f64 + (hi as f64 - lo as f64) * j as f64 / (count - 1) as f64) as f32
        }
    })
}

fn scoped_mean(map: &SaliencyMap, above_floor: &[bool], scope: MeanScope) -> f64 {
    match scope {
        MeanScope::AllLocations => map.mean(),
        MeanScope::AboveFloor => {
            let (sum, n) = map
                .scores
                .iter()
                .zip(above_floor)
                .filter(|(_, &k)| k)
                .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
            if n == 0 {
                map.mean()
            } else {
                sum / n as f64
            }
        }
    }
}

/// Bounding cells of the 4-connected component of unmasked locations scoring
/// at least `threshold` that contains `anchor`. The anchor always belongs.
fn component_box(scores: &[f32], keep: &[bool], (h, w): (usize, usize), anchor: usize, threshold: f32) -> GridBox {
    let mut seen = vec![false; h * w];
    let mut queue = VecDeque::from([anchor]);
    seen[anchor] = true;
    let (mut r0, mut c0, mut r1, mut c1) = (anchor / w, anchor % w, anchor / w, anchor % w);
    while let Some(p) = queue.pop_front() {
        let (r, c) = (p / w, p % w);
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
        let neighbors = [
            (r > 0).then(|| p - w),
            (r + 1 < h).then(|| p + w),
            (c > 0).then(|| p - 1),
            (c + 1 < w).then(|| p + 1),
        ];
        for q in neighbors.into_iter().flatten() {
            if !seen[q] && keep[q] && scores[q] >= threshold {
                seen[q] = true;
                queue.push_back(q);
            }
        }
    }
    GridBox {
        row0: r0,
        col0: c0,
        row1: r1,
        col1: c1,
    }
}

/// Concatenates per-layer sets, offsetting group ids so groups stay distinct.
pub fn fuse_layers(sets: &[ProposalSet]) -> Result<ProposalSet, ProposalError> {
    let first = sets.first().ok_or(ProposalError::NothingToFuse)?;
    let mut fused = ProposalSet::empty(first.image_id.clone());
    let mut offset = 0;
    for set in sets {
        if set.image_id != first.image_id {
            return Err(ProposalError::MixedImageIds {
                first: first.image_id.clone(),
                other: set.image_id.clone(),
            });
        }
        fused.proposals.extend(set.proposals.iter().map(|p| Proposal {
            group_id: p.group_id + offset,
            ..p.clone()
        }));
        fused.layers.extend(set.layers.iter().cloned());
        fused.empty_after_floor |= set.empty_after_floor;
        offset += set.group_count();
    }
    Ok(fused)
}

/// Runs [`generate_for_layer`] on every tensor and fuses the results.
pub fn generate(
    tensors: &[FeatureTensor],
    params: &ProposalParams,
    image_id: &str,
    image_size: (u32, u32),
) -> Result<ProposalSet, ProposalError> {
    let sets = tensors
        .iter()
        .map(|t| generate_for_layer(t, params, image_id, image_size))
        .collect::<Result<Vec<_>, _>>()?;
    if sets.is_empty() {
        return Ok(ProposalSet::empty(image_id));
    }
    fuse_layers(&sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn planted(h: usize, w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> FeatureTensor {
        FeatureTensor::from_fn(h, w, 4, "relu5_3", |r, c, d| {
            if rows.contains(&r) && cols.contains(&c) {
                [1.0, 0.5, 0.0, 2.0][d]
            } else {
                0.0
            }
        })
        .unwrap()
    }

    #[test]
    fn grid_mapping_identity_and_cell() {
        let full = GridBox {
            row0: 0,
            col0: 0,
            row1: 13,
            col1: 13,
        };
        assert_eq!(
            map_grid_box_to_image(full, (14, 14), (224, 224)),
            BBox::new(0.0, 0.0, 224.0, 224.0)
        );
        let cell = GridBox {
            row0: 0,
            col0: 0,
            row1: 0,
            col1: 0,
        };
        assert_eq!(
            map_grid_box_to_image(cell, (14, 14), (224, 224)),
            BBox::new(0.0, 0.0, 16.0, 16.0)
        );
        // Non-integer cell size rounds outward.
        let odd = GridBox {
            row0: 1,
            col0: 1,
            row1: 1,
            col1: 1,
        };
        assert_eq!(
            map_grid_box_to_image(odd, (3, 3), (10, 10)),
            BBox::new(3.0, 3.0, 7.0, 7.0)
        );
    }

    #[test]
    fn single_planted_block_is_recovered() {
        let t = planted(14, 14, 3..8, 5..11);
        let set = generate_for_layer(&t, &ProposalParams::default(), "a", (224, 224)).unwrap();
        assert_eq!(set.group_count(), 1);
        let truth = BBox::new(80.0, 48.0, 176.0, 128.0);
        let last = set.proposals.iter().max_by_key(|p| p.threshold_index).unwrap();
        assert!(last.bbox.iou(&truth) >= 0.9, "{:?}", last.bbox);
        set.check_invariants().unwrap();
    }

    #[test]
    fn constant_tensor_gives_full_image() {
        let t = FeatureTensor::new(6, 5, 3, vec![0.7; 90], "relu4_3").unwrap();
        let set = generate_for_layer(&t, &ProposalParams::default(), "a", (100, 120)).unwrap();
        assert_eq!(set.group_count(), 1);
        assert_eq!(set.len(), 1);
        assert_eq!(set.proposals[0].bbox, BBox::new(0.0, 0.0, 100.0, 120.0));
        assert_eq!(set.proposals[0].threshold_index, 0);
    }

    #[test]
    fn degenerate_and_invalid() {
        let t = FeatureTensor::new(1, 1, 3, vec![1.0; 3], "").unwrap();
        assert!(matches!(
            generate_for_layer(&t, &ProposalParams::default(), "a", (10, 10)),
            Err(ProposalError::DegenerateTensor { .. })
        ));
        let t = FeatureTensor::new(2, 2, 1, vec![1.0; 4], "").unwrap();
        let bad = ProposalParams {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(matches!(
            generate_for_layer(&t, &bad, "a", (10, 10)),
            Err(ProposalError::InvalidParams(_))
        ));
    }

    #[test]
    fn all_zero_tensor_yields_no_groups() {
        let t = FeatureTensor::new(3, 3, 2, vec![0.0; 18], "x").unwrap();
        let set = generate_for_layer(&t, &ProposalParams::default(), "a", (30, 30)).unwrap();
        assert!(set.is_empty());
        assert_eq!(set.group_count(), 0);
    }

    #[test]
    fn fuse_offsets_groups() {
        let mk = |groups: usize, tag: &str| ProposalSet {
            image_id: "img".into(),
            proposals: (0..groups)
                .map(|g| Proposal {
                    bbox: BBox::new(0.0, 0.0, 1.0 + g as f32, 1.0),
                    group_id: g,
                    layer_tag: tag.into(),
                    threshold_index: 0,
                })
                .collect(),
            layers: vec![LayerGroups {
                layer_tag: tag.into(),
                group_count: groups,
            }],
            empty_after_floor: false,
        };
        let fused = fuse_layers(&[mk(3, "a"), mk(4, "b")]).unwrap();
        assert_eq!(fused.group_count(), 7);
        assert_eq!(fused.group_ids(), vec![0, 1, 2, 3, 4, 5, 6]);
        fused.check_invariants().unwrap();

        let a = mk(3, "a");
        assert_eq!(
            fuse_layers(&[a.clone(), ProposalSet::empty("img")]).unwrap().proposals,
            a.proposals
        );

        let mut other = mk(1, "a");
        other.image_id = "x".into();
        assert!(matches!(
            fuse_layers(&[a, other]),
            Err(ProposalError::MixedImageIds { .. })
        ));
        assert_eq!(fuse_layers(&[]), Err(ProposalError::NothingToFuse));
    }

    #[test]
    fn thresholds_are_inclusive() {
        let t: Vec<f32> = sweep_thresholds(0.2, 1.0, 5).collect();
        assert_eq!(t.len(), 5);
        assert_eq!(t[0], 0.2);
        assert_eq!(t[4], 1.0);
        assert!((t[2] - 0.6).abs() < 1e-6);
        assert_eq!(sweep_thresholds(0.3, 0.9, 1).collect::<Vec<_>>(), vec![0.3]);
    }

    #[test]
    fn json_boxes_have_two_decimals() {
        let p = Proposal {
            bbox: BBox::new(1.0 / 3.0, 0.0, 10.0, 5.5),
            group_id: 2,
            layer_tag: "relu5_3".into(),
            threshold_index: 7,
        };
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"box":[0.33,0.0,10.0,5.5],"group":2,"layer":"relu5_3","threshold":7}"#
        );
    }
}
