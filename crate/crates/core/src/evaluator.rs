//! Inference (decode, clip, threshold, NMS) and detection metrics.
//!
//! Two protocols are supported: `f1ap` (precision, recall, F1 and AP over a
//! labeled set) and `ringcell` (recall on positive images plus the
//! normal-region false-positive score on negative-only images).

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorSpec};
use crate::error::{EvalError, ModelError, TrainError};
use crate::geometry::{cmp_real, decode, detection_order, nms, BBox, Detection, OffsetTuple};
use crate::head::{HeadOutput, Model};
use crate::scalar::Real;
use crate::synth::AnnotatedImage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Detections with a lower score are dropped.
    pub score_threshold: f64,
    pub nms_iou: f64,
    /// IoU needed for a detection to match a ground-truth box.
    pub match_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.3,
            match_iou: 0.3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    F1ap,
    Ringcell,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Protocol::F1ap => "f1ap",
            Protocol::Ringcell => "ringcell",
        })
    }
}

/// Decodes every anchor, clips to the image, thresholds and suppresses.
pub fn detections_from_output<T: Real>(
    out: &HeadOutput<T>,
    anchors: &[BBox<T>],
    image_h: usize,
    image_w: usize,
    score_threshold: T,
    nms_iou: T,
) -> Vec<Detection<T>> {
    let l = out.layout();
    let (h, w) = (T::from_usize_lossy(image_h), T::from_usize_lossy(image_w));
    let mut cands = Vec::new();
    for (i, anchor) in anchors.iter().enumerate().take(l.anchor_count()) {
        let score = out.scores.data()[l.score_index(i)];
        if score < score_threshold {
            continue;
        }
        let t = OffsetTuple::from_array(std::array::from_fn(|j| out.offsets.data()[l.offset_index(i, j)]));
        if let Some(bbox) = decode(&t, anchor).clip(h, w) {
            cands.push(Detection { bbox, score });
        }
    }
    nms(&cands, nms_iou)
}

pub fn detect<T: Real>(
    model: &Model<T>,
    image: &Tensor<T>,
    spec: &AnchorSpec,
    score_threshold: T,
    nms_iou: T,
) -> Result<Vec<Detection<T>>, ModelError> {
    let out = model.forward(image)?;
    let l = out.layout();
    let a = anchors::generate(spec, l.height, l.width)
        .map_err(|e| ModelError::Checkpoint(format!("anchor spec: {e}")))?;
    if a.len() != l.anchor_count() {
        return Err(ModelError::AnchorCount {
            expected: l.anchor_count(),
            found: a.len(),
        });
    }
    let s = image.shape();
    Ok(detections_from_output(&out, &a, s[1], s[2], score_threshold, nms_iou))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection, ground truth)` index pairs.
    pub matches: Vec<(usize, usize)>,
    /// Per detection (input order): whether it matched a ground-truth box.
    pub detection_matched: Vec<bool>,
}

/// Greedy one-to-one matching. Detections are visited by descending score
/// (ties by box coordinates) and each claims the unmatched ground-truth box
/// of highest IoU, provided IoU ≥ `iou_thresh`; IoU ties go to the lower
/// ground-truth index.
pub fn match_detections<T: Real>(dets: &[Detection<T>], gt: &[BBox<T>], iou_thresh: T) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| detection_order(&dets[a], &dets[b]).then(a.cmp(&b)));
    let mut gt_taken = vec![false; gt.len()];
    let mut detection_matched = vec![false; dets.len()];
    let mut matches = Vec::new();
    for d in order {
        let mut best: Option<(usize, T)> = None;
        for (g, b) in gt.iter().enumerate() {
            if gt_taken[g] {
                continue;
            }
            let v = dets[d].bbox.iou(b);
            if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            gt_taken[g] = true;
            detection_matched[d] = true;
            matches.push((d, g));
        }
    }
    let tp = matches.len();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gt.len() - tp,
        matches,
        detection_matched,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision `tp/(tp+fp)`, recall `tp/(tp+fn)`, `F1 = 2tp/(2tp+fp+fn)`;
/// each is 0 when its denominator is 0.
pub fn f1_report(tp: usize, fp: usize, fn_: usize) -> F1Report {
    F1Report {
        tp,
        fp,
        fn_,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    }
}

/// Detections of one image with its ground-truth boxes.
pub type ImageDetections<T> = (Vec<Detection<T>>, Vec<BBox<T>>);

/// All-points interpolated AP over a dataset of `(detections, ground truth)`.
///
/// Detections from every image are ranked by descending score; each is a
/// true positive iff greedy per-image matching assigned it a box. AP is the
/// area under the monotone precision envelope. With no ground truth the AP
/// is 0.
pub fn average_precision<T: Real>(images: &[ImageDetections<T>], iou_thresh: T) -> f64 {
    let total_gt: usize = images.iter().map(|(_, g)| g.len()).sum();
    if total_gt == 0 {
        return 0.0;
    }
    let mut ranked: Vec<(T, usize, usize, bool)> = Vec::new();
    for (img, (dets, gt)) in images.iter().enumerate() {
        let m = match_detections(dets, gt, iou_thresh);
        for (d, det) in dets.iter().enumerate() {
            ranked.push((det.score, img, d, m.detection_matched[d]));
        }
    }
    ranked.sort_by(|a, b| cmp_real(b.0, a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut curve: Vec<(f64, f64)> = Vec::with_capacity(ranked.len());
    for &(_, _, _, hit) in &ranked {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        curve.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    // precision envelope, right to left
    for i in (0..curve.len().saturating_sub(1)).rev() {
        curve[i].1 = curve[i].1.max(curve[i + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

/// `max(100 − mean FP, 0) / 100` over negative-only images.
pub fn s_nr(fp_counts: &[usize]) -> Result<f64, EvalError> {
    if fp_counts.is_empty() {
        return Err(EvalError::NoNegativeImages);
    }
    let mean = fp_counts.iter().sum::<usize>() as f64 / fp_counts.len() as f64;
    Ok((100.0 - mean).max(0.0) / 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    /// Whether the image carries targets (false for negative-only images).
    pub positive: bool,
    pub detections: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    /// Only for the ringcell protocol.
    pub s_nr: Option<f64>,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    pub fn summary(&self) -> String {
        let mut s = format!(
            "protocol {}\ntp {}  fp {}  fn {}\nprecision {:.4}\nrecall {:.4}\nf1 {:.4}\nap {:.4}\n",
            self.protocol, self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1, self.ap
        );
        if let Some(v) = self.s_nr {
            let _ = writeln!(s, "s_nr {v:.4}");
        }
        s
    }

    /// Aggregate row followed by one row per image.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,positive,detections,tp,fp,fn,precision,recall,f1,ap,s_nr\n");
        let snr = self.s_nr.map(|v| v.to_string()).unwrap_or_default();
        let dets: usize = self.per_image.iter().map(|m| m.detections).sum();
        let _ = writeln!(
            s,
            "ALL,,{},{},{},{},{},{},{},{},{}",
            dets, self.tp, self.fp, self.fn_, self.precision, self.recall, self.f1, self.ap, snr
        );
        for m in &self.per_image {
            let r = f1_report(m.tp, m.fp, m.fn_);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},,",
                m.id, m.positive, m.detections, m.tp, m.fp, m.fn_, r.precision, r.recall, r.f1
            );
        }
        s
    }
}

fn ground_truth_cmp<T: Real>(a: &BBox<T>, b: &BBox<T>) -> Ordering {
    a.lex_cmp(b)
}

/// Detections for every image, in dataset order.
pub fn detect_all<T: Real>(
    model: &Model<T>,
    images: &[AnnotatedImage<T>],
    spec: &AnchorSpec,
    cfg: &EvalConfig,
) -> Result<Vec<Vec<Detection<T>>>, ModelError> {
    images
        .iter()
        .map(|img| detect(model, &img.image, spec, T::lit(cfg.score_threshold), T::lit(cfg.nms_iou)))
        .collect()
}

/// Metrics from precomputed detections.
pub fn report_f1ap<T: Real>(images: &[AnnotatedImage<T>], dets: &[Vec<Detection<T>>], cfg: &EvalConfig) -> MetricsReport {
    let thr = T::lit(cfg.match_iou);
    let mut per_image = Vec::with_capacity(images.len());
    let mut pairs = Vec::with_capacity(images.len());
    for (img, d) in images.iter().zip(dets) {
        let mut gt = img.boxes.clone();
        gt.sort_by(ground_truth_cmp);
        let m = match_detections(d, &gt, thr);
        per_image.push(ImageMetrics {
            id: img.id.clone(),
            positive: !img.boxes.is_empty(),
            detections: d.len(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
        pairs.push((d.clone(), gt));
    }
    let (tp, fp, fn_) = per_image
        .iter()
        .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
    let r = f1_report(tp, fp, fn_);
    MetricsReport {
        protocol: Protocol::F1ap,
        tp,
        fp,
        fn_,
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        ap: average_precision(&pairs, thr),
        s_nr: None,
        per_image,
    }
}

pub fn evaluate_f1ap<T: Real>(
    model: &Model<T>,
    images: &[AnnotatedImage<T>],
    spec: &AnchorSpec,
    cfg: &EvalConfig,
) -> Result<MetricsReport, TrainError> {
    let dets = detect_all(model, images, spec, cfg)?;
    Ok(report_f1ap(images, &dets, cfg))
}

/// Ringcell protocol from precomputed detections: recall and precision on
/// images with targets, `s_nr` from the false positives on images without.
pub fn report_ringcell<T: Real>(
    images: &[AnnotatedImage<T>],
    dets: &[Vec<Detection<T>>],
    cfg: &EvalConfig,
) -> Result<MetricsReport, EvalError> {
    let mut report = report_f1ap(images, dets, cfg);
    let negative_fp: Vec<usize> = report.per_image.iter().filter(|m| !m.positive).map(|m| m.fp).collect();
    report.s_nr = Some(s_nr(&negative_fp)?);
    let (tp, fp, fn_) = report
        .per_image
        .iter()
        .filter(|m| m.positive)
        .fold((0, 0, 0), |(a, b, c), m| (a + m.tp, b + m.fp, c + m.fn_));
    let r = f1_report(tp, fp, fn_);
    report.protocol = Protocol::Ringcell;
    (report.tp, report.fp, report.fn_) = (tp, fp, fn_);
    (report.precision, report.recall, report.f1) = (r.precision, r.recall, r.f1);
    Ok(report)
}

pub fn evaluate_ringcell<T: Real>(
    model: &Model<T>,
    images: &[AnnotatedImage<T>],
    spec: &AnchorSpec,
    cfg: &EvalConfig,
) -> Result<MetricsReport, TrainError> {
    let dets = detect_all(model, images, spec, cfg)?;
    report_ringcell(images, &dets, cfg).map_err(|e| TrainError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::HeadConfig;

    fn det(x: f64, y: f64, s: f64) -> Detection<f64> {
        Detection {
            bbox: BBox::new(x, y, 10.0, 10.0),
            score: s,
        }
    }

    #[test]
    fn table_rows_reproduce() {
        let rows = [
            (4760, 1040, 1937, 0.8207, 0.7108, 0.7618),
            (5482, 663, 1215, 0.8921, 0.8186, 0.8538),
        ];
        for (tp, fp, fn_, p, r, f) in rows {
            let rep = f1_report(tp, fp, fn_);
            assert!((rep.precision - p).abs() < 5e-5);
            assert!((rep.recall - r).abs() < 5e-5);
            assert!((rep.f1 - f).abs() < 5e-5);
        }
    }

    #[test]
    fn degenerate_counts_are_zero() {
        let r = f1_report(0, 0, 0);
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        let r = f1_report(0, 0, 4);
        assert_eq!((r.precision, r.recall), (0.0, 0.0));
    }

    #[test]
    fn exact_detections_match_everything() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(30.0, 30.0, 8.0, 12.0)];
        let dets: Vec<_> = gt.iter().zip([0.3, 0.9]).map(|(b, s)| Detection { bbox: *b, score: s }).collect();
        let m = match_detections(&dets, &gt, 0.3);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));
    }

    #[test]
    fn one_detection_claims_one_ground_truth() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(0.0, 5.0, 10.0, 10.0)];
        let m = match_detections(&[det(0.0, 2.0, 0.9)], &gt, 0.3);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 0, 1));
        assert_eq!(m.matches, vec![(0, 0)]);
    }

    #[test]
    fn higher_score_claims_first() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let dets = vec![det(1.0, 0.0, 0.4), det(3.0, 0.0, 0.8)];
        let m = match_detections(&dets, &gt, 0.3);
        assert_eq!(m.detection_matched, vec![false, true]);
    }

    #[test]
    fn below_threshold_is_unmatched() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let m = match_detections(&[det(8.0, 8.0, 0.9)], &gt, 0.3);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 1, 1));
    }

    #[test]
    fn perfect_and_useless_ap() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 10.0, 10.0)];
        let perfect: Vec<_> = gt.iter().map(|b| Detection { bbox: *b, score: 0.7 }).collect();
        assert_eq!(average_precision(&[(perfect, gt.clone())], 0.3), 1.0);
        let wrong = vec![det(50.0, 50.0, 0.9)];
        assert_eq!(average_precision(&[(wrong, gt)], 0.3), 0.0);
        assert_eq!(average_precision::<f64>(&[(vec![], vec![])], 0.3), 0.0);
    }

    #[test]
    fn ap_hand_example() {
        // ranked hits: T F T -> recall 0.5, 0.5, 1.0; precision 1, 0.5, 2/3
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(40.0, 40.0, 10.0, 10.0)];
        let dets = vec![det(0.0, 0.0, 0.9), det(20.0, 20.0, 0.8), det(40.0, 40.0, 0.7)];
        let ap = average_precision(&[(dets, gt)], 0.3);
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn s_nr_formula() {
        assert_eq!(s_nr(&[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(s_nr(&[100, 150]).unwrap(), 0.0);
        assert!((s_nr(&[20, 36]).unwrap() - 0.72).abs() < 1e-15);
        assert_eq!(s_nr(&[]), Err(EvalError::NoNegativeImages));
    }

    #[test]
    fn detect_respects_threshold_bounds_and_nms() {
        let head = HeadConfig::default();
        let model = Model::<f64>::build(head, 1);
        let img = Tensor::full(vec![3, 64, 64], 0.5);
        let spec = AnchorSpec::default();
        assert!(detect(&model, &img, &spec, 1.0, 0.3).unwrap().is_empty());
        let dets = detect(&model, &img, &spec, 0.0, 0.3).unwrap();
        assert!(!dets.is_empty());
        for (i, a) in dets.iter().enumerate() {
            assert!(a.bbox.x >= 0.0 && a.bbox.y >= 0.0 && a.bbox.right() <= 64.0 && a.bbox.bottom() <= 64.0);
            for b in &dets[i + 1..] {
                assert!(a.bbox.iou(&b.bbox) <= 0.3);
            }
        }
    }

    #[test]
    fn ringcell_needs_negative_images() {
        let imgs = vec![AnnotatedImage {
            id: "a".into(),
            image: Tensor::zeros(vec![3, 8, 8]),
            boxes: vec![BBox::new(0.0, 0.0, 10.0, 10.0)],
        }];
        assert!(report_ringcell(&imgs, &[vec![]], &EvalConfig::default()).is_err());
        let mut with_neg = imgs.clone();
        with_neg.push(AnnotatedImage {
            id: "b".into(),
            image: Tensor::zeros(vec![3, 8, 8]),
            boxes: vec![],
        });
        let dets = vec![vec![det(0.0, 0.0, 0.9)], vec![det(1.0, 1.0, 0.9), det(5.0, 5.0, 0.8)]];
        let r = report_ringcell(&with_neg, &dets, &EvalConfig::default()).unwrap();
        assert_eq!(r.s_nr, Some(0.98));
        assert_eq!(r.recall, 1.0);
        assert_eq!((r.tp, r.fp), (1, 0));
        assert!(r.to_csv().lines().count() == 4 && r.summary().contains("s_nr 0.9800"));
    }
}
