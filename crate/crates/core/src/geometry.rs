//! Axis-aligned boxes stored as top-left corner plus height and width.

use std::cmp::Ordering;
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use serde::{Deserialize, Serialize};

use crate::error::GeometryError;
use crate::scalar::Real;

/// Log-ratio bound applied when decoding predicted offsets.
pub const MAX_LOG_RATIO: f64 = 20.0;

static DECODE_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of decoded components clamped at [`MAX_LOG_RATIO`] in this process.
pub fn decode_clamp_count() -> usize {
    DECODE_CLAMPS.load(AtomicOrdering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub x: T,
    pub y: T,
    pub h: T,
    pub w: T,
}

/// Offsets `(t_x, t_y, t_h, t_w)` of a box relative to an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetTuple<T> {
    pub tx: T,
    pub ty: T,
    pub th: T,
    pub tw: T,
}

impl<T: Real> OffsetTuple<T> {
    pub fn zero() -> Self {
        Self {
            tx: T::zero(),
            ty: T::zero(),
            th: T::zero(),
            tw: T::zero(),
        }
    }

    pub fn to_array(self) -> [T; 4] {
        [self.tx, self.ty, self.th, self.tw]
    }

    pub fn from_array(a: [T; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            th: a[2],
            tw: a[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

impl<T: Real> BBox<T> {
    pub fn new(x: T, y: T, h: T, w: T) -> Self {
        Self { x, y, h, w }
    }

    /// Builds a box from corner coordinates `(x1, y1)`–`(x2, y2)`.
    pub fn from_corners(x1: T, y1: T, x2: T, y2: T) -> Self {
        Self {
            x: x1,
            y: y1,
            h: y2 - y1,
            w: x2 - x1,
        }
    }

    pub fn right(&self) -> T {
        self.x + self.w
    }

    pub fn bottom(&self) -> T {
        self.y + self.h
    }

    pub fn area(&self) -> T {
        self.h * self.w
    }

    pub fn center(&self) -> (T, T) {
        let half = T::lit(0.5);
        (self.x + half * self.w, self.y + half * self.h)
    }

    pub fn is_valid(&self) -> bool {
        self.h > T::zero() && self.w > T::zero() && self.x.is_finite() && self.y.is_finite()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.h > T::zero() && self.w > T::zero() {
            Ok(())
        } else {
            Err(GeometryError::NonPositiveSize {
                h: self.h.as_f64(),
                w: self.w.as_f64(),
            })
        }
    }

    pub fn intersection(&self, other: &Self) -> T {
        let iw = self.right().min(other.right()) - self.x.max(other.x);
        let ih = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if iw <= T::zero() || ih <= T::zero() {
            T::zero()
        } else {
            iw * ih
        }
    }

    /// Intersection over union in `[0, 1]`; 0 for disjoint boxes.
    pub fn iou(&self, other: &Self) -> T {
        if self == other {
            return T::one();
        }
        let inter = self.intersection(other);
        if inter <= T::zero() {
            return T::zero();
        }
        let union = self.area() + other.area() - inter;
        (inter / union).min(T::one())
    }

    /// Clips to `[0, width] x [0, height]`; `None` if nothing remains.
    pub fn clip(&self, height: T, width: T) -> Option<Self> {
        let x1 = self.x.max(T::zero());
        let y1 = self.y.max(T::zero());
        let x2 = self.right().min(width);
        let y2 = self.bottom().min(height);
        (x2 > x1 && y2 > y1).then(|| Self::from_corners(x1, y1, x2, y2))
    }

    pub fn cast<U: Real>(&self) -> BBox<U> {
        BBox {
            x: U::lit(self.x.as_f64()),
            y: U::lit(self.y.as_f64()),
            h: U::lit(self.h.as_f64()),
            w: U::lit(self.w.as_f64()),
        }
    }

    /// Lexicographic order on `(x, y, h, w)`, used to break score ties.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        cmp_real(self.x, other.x)
            .then(cmp_real(self.y, other.y))
            .then(cmp_real(self.h, other.h))
            .then(cmp_real(self.w, other.w))
    }
}

pub fn iou<T: Real>(a: &BBox<T>, b: &BBox<T>) -> T {
    a.iou(b)
}

pub(crate) fn cmp_real<T: Real>(a: T, b: T) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Offsets of `target` relative to `anchor`.
pub fn encode<T: Real>(target: &BBox<T>, anchor: &BBox<T>) -> Result<OffsetTuple<T>, GeometryError> {
    target.validate()?;
    anchor.validate()?;
    Ok(OffsetTuple {
        tx: (target.x - anchor.x) / anchor.w,
        ty: (target.y - anchor.y) / anchor.h,
        th: (target.h / anchor.h).ln(),
        tw: (target.w / anchor.w).ln(),
    })
}

/// Inverse of [`encode`]; also reports whether a log-ratio was clamped.
pub fn decode_checked<T: Real>(t: &OffsetTuple<T>, anchor: &BBox<T>) -> (BBox<T>, bool) {
    let bound = T::lit(MAX_LOG_RATIO);
    let mut clamped = false;
    let mut clamp = |v: T| {
        if v.is_nan() {
            clamped = true;
            T::zero()
        } else if v.abs() > bound {
            clamped = true;
            v.signum() * bound
        } else {
            v
        }
    };
    let th = clamp(t.th);
    let tw = clamp(t.tw);
    let b = BBox {
        x: t.tx * anchor.w + anchor.x,
        y: t.ty * anchor.h + anchor.y,
        h: anchor.h * th.exp(),
        w: anchor.w * tw.exp(),
    };
    (b, clamped)
}

/// Applies predicted offsets to an anchor. Log-ratios beyond
/// ±[`MAX_LOG_RATIO`] are clamped and counted in [`decode_clamp_count`].
pub fn decode<T: Real>(t: &OffsetTuple<T>, anchor: &BBox<T>) -> BBox<T> {
    let (b, clamped) = decode_checked(t, anchor);
    if clamped {
        DECODE_CLAMPS.fetch_add(1, AtomicOrdering::Relaxed);
    }
    b
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub score: T,
}

/// Descending score, ties broken by ascending `(x, y, h, w)`.
pub fn detection_order<T: Real>(a: &Detection<T>, b: &Detection<T>) -> Ordering {
    cmp_real(b.score, a.score).then_with(|| a.bbox.lex_cmp(&b.bbox))
}

/// Greedy non-maximum suppression. Keeps the best remaining detection and
/// drops every remaining one whose IoU with it exceeds `iou_threshold`.
pub fn nms<T: Real>(detections: &[Detection<T>], iou_threshold: T) -> Vec<Detection<T>> {
    let mut order: Vec<Detection<T>> = detections.to_vec();
    order.sort_by(detection_order);
    let mut suppressed = vec![false; order.len()];
    let mut kept = Vec::new();
    for i in 0..order.len() {
        if suppressed[i] {
            continue;
        }
        kept.push(order[i]);
        for j in i + 1..order.len() {
            if !suppressed[j] && order[i].bbox.iou(&order[j].bbox) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    kept
}
