//! Axis-aligned boxes in original-image pixel coordinates.

use serde::{Deserialize, Serialize};

/// A box `[xmin, ymin, xmax, ymax)` in image pixels, inclusive-exclusive.
///
/// Serialized as a four-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub xmin: f32,
    pub ymin: f32,
    pub xmax: f32,
    pub ymax: f32,
}

impl BBox {
    pub const fn new(xmin: f32, ymin: f32, xmax: f32, ymax: f32) -> Self {
        Self { xmin, ymin, xmax, ymax }
    }

    pub fn width(&self) -> f32 {
        self.xmax - self.xmin
    }

    pub fn height(&self) -> f32 {
        self.ymax - self.ymin
    }

    pub fn area(&self) -> f64 {
        let w = (self.xmax as f64 - self.xmin as f64).max(0.0);
        let h = (self.ymax as f64 - self.ymin as f64).max(0.0);
        w * h
    }

    /// Strictly positive area and finite coordinates.
    pub fn is_valid(&self) -> bool {
        [self.xmin, self.ymin, self.xmax, self.ymax]
            .iter()
            .all(|v| v.is_finite())
            && self.xmin < self.xmax
            && self.ymin < self.ymax
    }

    /// Valid and inside `[0, width] x [0, height]`.
    pub fn is_within(&self, width: f32, height: f32) -> bool {
        self.is_valid() && self.xmin >= 0.0 && self.ymin >= 0.0 && self.xmax <= width && self.ymax <= height
    }

    pub fn clamp_to(&self, width: f32, height: f32) -> Self {
        Self {
            xmin: self.xmin.clamp(0.0, width),
            ymin: self.ymin.clamp(0.0, height),
            xmax: self.xmax.clamp(0.0, width),
            ymax: self.ymax.clamp(0.0, height),
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.xmin <= other.xmin && self.ymin <= other.ymin && self.xmax >= other.xmax && self.ymax >= other.ymax
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.xmax.min(other.xmax) as f64 - self.xmin.max(other.xmin) as f64).max(0.0);
        let h = (self.ymax.min(other.ymax) as f64 - self.ymin.max(other.ymin) as f64).max(0.0);
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }
}

impl From<[f32; 4]> for BBox {
    fn from(v: [f32; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        [b.xmin, b.ymin, b.xmax, b.ymax]
    }
}

/// Greedy non-maximum suppression over boxes already sorted by decreasing rank.
///
/// A box is dropped when its IoU with any kept box is strictly greater than
/// `iou_threshold`. Returns indices into `boxes`, at most `max_keep` of them.
pub fn greedy_nms(boxes: &[BBox], iou_threshold: f64, max_keep: usize) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for (idx, b) in boxes.iter().enumerate() {
        if kept.len() >= max_keep {
            break;
        }
        if kept.iter().all(|&k| boxes[k].iou(b) <= iou_threshold) {
            kept.push(idx);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_overlap() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&b) - 50.0 / 150.0).abs() < 1e-12);
    }

    #[test]
    fn serde_as_array() {
        let b = BBox::new(1.0, 2.0, 3.5, 4.0);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(s, "[1.0,2.0,3.5,4.0]");
        let back: BBox = serde_json::from_str(&s).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn nms_drops_duplicates() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let far = BBox::new(10.0, 10.0, 12.0, 12.0);
        assert_eq!(greedy_nms(&[b, b, far], 0.7, 5), vec![0, 2]);
        assert_eq!(greedy_nms(&[b, far], 0.7, 1), vec![0]);
    }
}
