//! Dense anchor grid and IoU-based anchor labeling.

use serde::{Deserialize, Serialize};

use crate::error::AnchorError;
use crate::geometry::{encode, BBox, OffsetTuple};
use crate::scalar::Real;

/// Anchor shapes tiled at every feature-map cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorSpec {
    /// Side lengths in input pixels; each anchor has area `scale²`.
    pub scales: Vec<f64>,
    /// Height / width ratios.
    pub ratios: Vec<f64>,
    /// Input pixels per feature-map cell.
    pub stride: usize,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 12.0, 16.0],
            ratios: vec![0.5, 1.0, 2.0],
            stride: 8,
        }
    }
}

impl AnchorSpec {
    pub fn anchors_per_location(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<(), AnchorError> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(AnchorError::EmptySpec);
        }
        Ok(())
    }
}

/// All anchors for a `feature_h x feature_w` map, ordered by cell (row-major)
/// and then by `(scale, ratio)` within a cell.
pub fn generate<T: Real>(
    spec: &AnchorSpec,
    feature_h: usize,
    feature_w: usize,
) -> Result<Vec<BBox<T>>, AnchorError> {
    spec.validate()?;
    if feature_h == 0 || feature_w == 0 {
        return Err(AnchorError::EmptyFeatureMap {
            h: feature_h,
            w: feature_w,
        });
    }
    let stride = spec.stride as f64;
    let mut shapes = Vec::with_capacity(spec.anchors_per_location());
    for &s in &spec.scales {
        for &r in &spec.ratios {
            let root = r.sqrt();
            shapes.push((s * root, s / root));
        }
    }
    let mut out = Vec::with_capacity(feature_h * feature_w * shapes.len());
    for cy in 0..feature_h {
        for cx in 0..feature_w {
            let (ctr_x, ctr_y) = ((cx as f64 + 0.5) * stride, (cy as f64 + 0.5) * stride);
            for &(h, w) in &shapes {
                out.push(BBox::new(
                    T::lit(ctr_x - 0.5 * w),
                    T::lit(ctr_y - 0.5 * h),
                    T::lit(h),
                    T::lit(w),
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

impl AnchorLabel {
    /// `p*` as used by the losses: 1 for positive, 0 otherwise.
    pub fn target<T: Real>(self) -> T {
        match self {
            AnchorLabel::Positive => T::one(),
            _ => T::zero(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledAnchor<T> {
    pub anchor: BBox<T>,
    pub label: AnchorLabel,
    pub matched_gt: Option<usize>,
    pub target_offsets: Option<OffsetTuple<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelingConfig {
    pub pos_thresh: f64,
    pub neg_thresh: f64,
    /// Also mark the highest-IoU anchor(s) of every ground-truth box positive.
    pub best_anchor_fallback: bool,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            pos_thresh: 0.7,
            neg_thresh: 0.3,
            best_anchor_fallback: true,
        }
    }
}

/// Positive above `pos_thresh`, negative below `neg_thresh` against every
/// ground-truth box, ignored in between. Both comparisons are strict.
pub fn label_anchors<T: Real>(
    anchors: &[BBox<T>],
    gt: &[BBox<T>],
    cfg: &LabelingConfig,
) -> Result<Vec<LabeledAnchor<T>>, AnchorError> {
    if !(0.0 <= cfg.neg_thresh && cfg.neg_thresh < cfg.pos_thresh && cfg.pos_thresh <= 1.0) {
        return Err(AnchorError::Thresholds {
            neg: cfg.neg_thresh,
            pos: cfg.pos_thresh,
        });
    }
    let (pos, neg) = (T::lit(cfg.pos_thresh), T::lit(cfg.neg_thresh));

    // best (iou, gt index) per anchor
    let mut best: Vec<(T, Option<usize>)> = vec![(T::zero(), None); anchors.len()];
    let mut gt_best = vec![T::zero(); gt.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt.iter().enumerate() {
            let v = a.iou(g);
            if v > best[ai].0 {
                best[ai] = (v, Some(gi));
            }
            if v > gt_best[gi] {
                gt_best[gi] = v;
            }
        }
    }

    let mut forced: Vec<Option<(T, usize)>> = vec![None; anchors.len()];
    if cfg.best_anchor_fallback {
        for (gi, g) in gt.iter().enumerate() {
            if gt_best[gi] <= T::zero() {
                continue;
            }
            for (ai, a) in anchors.iter().enumerate() {
                let v = a.iou(g);
                if v == gt_best[gi] && forced[ai].is_none_or(|(fv, _)| v > fv) {
                    forced[ai] = Some((v, gi));
                }
            }
        }
    }

    anchors
        .iter()
        .enumerate()
        .map(|(ai, a)| {
            let (max_iou, arg) = best[ai];
            let matched = if max_iou > pos {
                arg
            } else {
                forced[ai].map(|(_, gi)| gi)
            };
            if let Some(gi) = matched {
                return Ok(LabeledAnchor {
                    anchor: *a,
                    label: AnchorLabel::Positive,
                    matched_gt: Some(gi),
                    target_offsets: Some(encode(&gt[gi], a)?),
                });
            }
            let label = if max_iou < neg {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
            Ok(LabeledAnchor {
                anchor: *a,
                label,
                matched_gt: None,
                target_offsets: None,
            })
        })
        .collect()
}
