//! Center-form boxes, overlap metrics, anchor grids and non-maximum suppression.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("invalid box ({x}, {y}, {w}, {h}): dimensions must be finite and positive")]
    InvalidBox { x: f64, y: f64, w: f64, h: f64 },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
}

/// Axis-aligned box in center form: `(x, y)` is the center, `w`/`h` the extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite fields and non-positive extents.
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, GeometryError> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let finite = self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite();
        if finite && self.w > 0.0 && self.h > 0.0 {
            Ok(())
        } else {
            Err(GeometryError::InvalidBox { x: self.x, y: self.y, w: self.w, h: self.h })
        }
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner form `(x0, y0, x1, y1)`.
    #[inline]
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        let hw = 0.5 * self.w;
        let hh = 0.5 * self.h;
        (self.x - hw, self.y - hh, self.x + hw, self.y + hh)
    }

    #[inline]
    pub fn as_array(&self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }
}

/// Intersection over union without validation. Callers guarantee valid boxes.
#[inline]
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    // areas from the same corners as the intersection so iou(a, a) == 1 exactly
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    (inter / union).clamp(0.0, 1.0)
}

#[inline]
pub(crate) fn euclidean_unchecked(a: &BBox, b: &BBox) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let dw = a.w - b.w;
    let dh = a.h - b.h;
    (dx * dx + dy * dy + dw * dw + dh * dh).sqrt()
}

/// Intersection area over union area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

/// `1 - iou(a, b)`: the edge weight used by every matcher.
pub fn matching_distance(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    Ok(1.0 - iou(a, b)?)
}

/// L2 distance between the `(x, y, w, h)` vectors of two boxes.
pub fn euclidean_distance(a: &BBox, b: &BBox) -> Result<f64, GeometryError> {
    a.validate()?;
    b.validate()?;
    Ok(euclidean_unchecked(a, b))
}

/// Layout of a dense anchor grid over an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub image_w: f64,
    pub image_h: f64,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Anchor template shapes as `(w, h)`.
    pub templates: Vec<(f64, f64)>,
}

impl GridSpec {
    pub fn anchors_per_cell(&self) -> usize {
        self.templates.len()
    }

    pub fn anchor_count(&self) -> usize {
        self.grid_w * self.grid_h * self.templates.len()
    }

    /// Flattened position of anchor `[i, j, k]`.
    pub fn index_of(&self, i: usize, j: usize, k: usize) -> usize {
        (j * self.grid_w + i) * self.templates.len() + k
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.templates.is_empty() {
            return Err(GeometryError::InvalidSpec("template list is empty".into()));
        }
        if self.grid_w == 0 || self.grid_h == 0 {
            return Err(GeometryError::InvalidSpec("grid dimensions must be positive".into()));
        }
        if !(self.image_w.is_finite() && self.image_h.is_finite() && self.image_w > 0.0 && self.image_h > 0.0) {
            return Err(GeometryError::InvalidSpec("image dimensions must be finite and positive".into()));
        }
        if let Some((w, h)) = self.templates.iter().find(|(w, h)| !(w.is_finite() && h.is_finite() && *w > 0.0 && *h > 0.0)) {
            return Err(GeometryError::InvalidSpec(format!("template ({w}, {h}) must have positive dimensions")));
        }
        Ok(())
    }
}

/// Lays anchors out on an evenly spaced grid.
///
/// Centers sit at `(i + 1) * image_w / (grid_w + 1)` and
/// `(j + 1) * image_h / (grid_h + 1)`; the output is ordered so that anchor
/// `[i, j, k]` lands at [`GridSpec::index_of`].
pub fn build_anchor_grid(spec: &GridSpec) -> Result<Vec<BBox>, GeometryError> {
    spec.validate()?;
    let step_x = spec.image_w / (spec.grid_w + 1) as f64;
    let step_y = spec.image_h / (spec.grid_h + 1) as f64;
    let mut anchors = Vec::with_capacity(spec.anchor_count());
    for j in 0..spec.grid_h {
        let y = (j + 1) as f64 * step_y;
        for i in 0..spec.grid_w {
            let x = (i + 1) as f64 * step_x;
            for &(w, h) in &spec.templates {
                anchors.push(BBox { x, y, w, h });
            }
        }
    }
    Ok(anchors)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u32,
}

/// Per-class non-maximum suppression.
///
/// Candidates are visited by descending score (ties by ascending index). A
/// candidate is dropped when its IOU with an already kept candidate of the
/// same class exceeds `thresh`. Returns kept indices in the order they were kept.
pub fn nms(candidates: &[ScoredBox], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].score.total_cmp(&candidates[a].score).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let cand = &candidates[idx];
        let suppressed = kept.iter().any(|&k| {
            let other = &candidates[k];
            other.class_id == cand.class_id && iou_unchecked(&other.bbox, &cand.bbox) > thresh
        });
        if !suppressed {
            kept.push(idx);
        }
    }
    kept
}
