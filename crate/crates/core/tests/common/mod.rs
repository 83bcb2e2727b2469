//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use srpn_core::{BBox64, Detection64};

/// IoU of integer boxes by counting covered unit cells.
pub fn raster_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let cells = |r: [i64; 4]| {
        let mut v = Vec::new();
        for y in r[1]..r[1] + r[2] {
            for x in r[0]..r[0] + r[3] {
                v.push((x, y));
            }
        }
        v
    };
    let ca = cells(a);
    let cb: std::collections::HashSet<(i64, i64)> = cells(b).into_iter().collect();
    let inter = ca.iter().filter(|c| cb.contains(c)).count();
    let union = ca.len() + cb.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn ranks_before(a: &Detection64, b: &Detection64) -> bool {
    if a.score != b.score {
        return a.score > b.score;
    }
    let ka = [a.bbox.x, a.bbox.y, a.bbox.h, a.bbox.w];
    let kb = [b.bbox.x, b.bbox.y, b.bbox.h, b.bbox.w];
    ka < kb
}

fn box_iou(a: &BBox64, b: &BBox64) -> f64 {
    let ix = (a.x + a.w).min(b.x + b.w) - a.x.max(b.x);
    let iy = (a.y + a.h).min(b.y + b.h) - a.y.max(b.y);
    let inter = ix.max(0.0) * iy.max(0.0);
    let union = a.h * a.w + b.h * b.w - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Greedy NMS by repeated linear search for the best survivor.
pub fn nms_reference(dets: &[Detection64], thr: f64) -> Vec<Detection64> {
    let mut alive: Vec<Detection64> = dets.to_vec();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for i in 1..alive.len() {
            if ranks_before(&alive[i], &alive[best]) {
                best = i;
            }
        }
        let top = alive.swap_remove(best);
        alive.retain(|d| box_iou(&top.bbox, &d.bbox) <= thr);
        kept.push(top);
    }
    kept
}

/// Greedy one-to-one matching counts `(tp, fp, fn)` by repeated search.
pub fn match_reference(dets: &[Detection64], gt: &[BBox64], thr: f64) -> (usize, usize, usize) {
    let mut pending: Vec<usize> = (0..dets.len()).collect();
    let mut free = vec![true; gt.len()];
    let mut tp = 0;
    while !pending.is_empty() {
        let mut bi = 0;
        for k in 1..pending.len() {
            if ranks_before(&dets[pending[k]], &dets[pending[bi]]) {
                bi = k;
            }
        }
        let d = pending.remove(bi);
        let mut claim: Option<usize> = None;
        for g in 0..gt.len() {
            let v = box_iou(&dets[d].bbox, &gt[g]);
            if free[g] && v >= thr && claim.is_none_or(|c| v > box_iou(&dets[d].bbox, &gt[c])) {
                claim = Some(g);
            }
        }
        if let Some(g) = claim {
            free[g] = false;
            tp += 1;
        }
    }
    (tp, dets.len() - tp, gt.len() - tp)
}

/// All-points AP over one image by rematching at every distinct score
/// threshold. Scores must be distinct.
pub fn ap_by_thresholds(dets: &[Detection64], gt: &[BBox64], thr: f64) -> f64 {
    let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let points: Vec<(f64, f64)> = scores
        .iter()
        .map(|&s| {
            let kept: Vec<Detection64> = dets.iter().copied().filter(|d| d.score >= s).collect();
            let (tp, fp, _) = match_reference(&kept, gt, thr);
            (tp as f64 / gt.len() as f64, tp as f64 / (tp + fp) as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        let best_p = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (r - prev) * best_p;
        prev = r;
    }
    ap
}

/// Every foreground-anchored `(a, p, n)` index triple valid for `labels`.
pub fn enumerate_fg_triplets(labels: &[bool]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            for n in 0..labels.len() {
                if labels[a] && labels[p] && !labels[n] && a != p {
                    out.push((a, p, n));
                }
            }
        }
    }
    out
}

/// The hardest `k` negatives by an independent stable sort.
pub fn hardest_negatives(labels: &[i8], losses: &[f64], k: usize) -> Vec<usize> {
    let mut neg: Vec<(f64, usize)> = (0..labels.len())
        .filter(|&i| labels[i] == -1)
        .map(|i| (losses[i], i))
        .collect();
    neg.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut out: Vec<usize> = neg.into_iter().take(k).map(|p| p.1).collect();
    out.sort_unstable();
    out
}
