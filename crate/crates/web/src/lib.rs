//! Browser demo over one synthetic image: global saliency with its
//! persistence maxima, local saliency at a clicked cell, and the proposals
//! they produce.

use objdisc::evaluation::{SyntheticConfig, SyntheticImage};
use objdisc::proposals::{generate, ProposalParams};
use objdisc::saliency::{compute_persistence, global_saliency, local_saliency, select_maxima, SaliencyMap};
use objdisc::tensor_store::FeatureTensor;
use serde_json::json;
use wasm_bindgen::prelude::*;

#[wasm_bindgen]
pub struct Demo {
    image: SyntheticImage,
    global: SaliencyMap,
}

fn unit_range(map: &SaliencyMap) -> Vec<f32> {
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    map.scores.iter().map(|&s| (s - lo) / span).collect()
}

#[wasm_bindgen]
impl Demo {
    /// A fresh image; `noise` is the background strength.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, noise: f32, speckle: f32) -> Demo {
        let image = SyntheticConfig {
            n_images: 1,
            classes: 1,
            noise_level: noise,
            speckle,
            seed: seed as u64,
            ..Default::default()
        }
        .generate()
        .images
        .remove(0);
        let global = global_saliency(&image.tensors[0]);
        Demo { image, global }
    }

    fn coarse(&self) -> &FeatureTensor {
        &self.image.tensors[0]
    }

    pub fn grid(&self) -> usize {
        self.global.width
    }

    pub fn image_size(&self) -> u32 {
        self.image.width
    }

    /// Global saliency rescaled to `[0, 1]`, row-major.
    pub fn global_saliency(&self) -> Vec<f32> {
        unit_range(&self.global)
    }

    /// Up to `count` maxima above `alpha * max`, as `[row, col, persistence, ...]`.
    pub fn maxima(&self, alpha: f32, count: usize) -> Vec<f32> {
        let Ok(all) = compute_persistence(&self.global, alpha * self.global.max()) else {
            return Vec::new();
        };
        select_maxima(&all, count)
            .iter()
            .flat_map(|m| [m.row as f32, m.col as f32, m.persistence])
            .collect()
    }

    /// Cosine similarity to the cell at `(row, col)`, clamped to `[0, 1]`.
    /// Empty when the cell has no activation.
    pub fn local_saliency(&self, row: usize, col: usize) -> Vec<f32> {
        match local_saliency(self.coarse(), row, col) {
            Ok(m) => m.scores.iter().map(|&s| s.max(0.0)).collect(),
            Err(_) => Vec::new(),
        }
    }

    /// Proposals from every layer as JSON: `{"proposals": [{box, group,
    /// layer}], "objects": [box], "error": null}`.
    pub fn proposals(&self, alpha: f32, beta: f32, max_maxima: usize) -> String {
        let params = ProposalParams {
            alpha,
            beta,
            max_maxima,
            ..Default::default()
        };
        let size = (self.image.width, self.image.height);
        let objects: Vec<[f32; 4]> = self
            .image
            .objects
            .iter()
            .map(|b| [b.xmin, b.ymin, b.xmax, b.ymax])
            .collect();
        match params
            .validate()
            .and_then(|_| generate(&self.image.tensors, &params, &self.image.image_id, size))
        {
            Ok(set) => json!({ "proposals": set.proposals, "objects": objects, "error": null }).to_string(),
            Err(e) => json!({ "proposals": [], "objects": objects, "error": e.to_string() }).to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_operations() {
        let d = Demo::new(3, 1.0, 0.0);
        let n = d.grid();
        assert_eq!(d.global_saliency().len(), n * n);
        let m = d.maxima(0.3, 5);
        assert!(!m.is_empty() && m.len().is_multiple_of(3));
        let (r, c) = (m[0] as usize, m[1] as usize);
        let local = d.local_saliency(r, c);
        assert_eq!(local[r * n + c], 1.0);
        let v: serde_json::Value = serde_json::from_str(&d.proposals(0.3, 0.5, 10)).unwrap();
        assert!(v["error"].is_null());
        assert!(!v["proposals"].as_array().unwrap().is_empty());
        let bad: serde_json::Value = serde_json::from_str(&d.proposals(2.0, 0.5, 10)).unwrap();
        assert!(bad["error"].is_string());
    }
}
