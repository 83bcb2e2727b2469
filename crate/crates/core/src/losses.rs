//! Training objectives: pair and triplet embedding losses, smooth-L1
//! localization, cross-entropy / focal classification and their weighted sum.
//!
//! Embedding losses use squared Euclidean distances, so margins are in
//! squared-distance units.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::geometry::OffsetTuple;
use crate::scalar::Real;
use crate::tape::{smooth_l1_value, Tape, Var};
use crate::tensor::Tensor;

/// Probability floor applied before every logarithm.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Margin(f64);

impl Margin {
    pub fn new(m: f64) -> Result<Self, String> {
        if m.is_finite() && m >= 0.0 {
            Ok(Self(m))
        } else {
            Err(format!("margin must be finite and non-negative, got {m}"))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Margin {
    type Error = String;
    fn try_from(m: f64) -> Result<Self, String> {
        Self::new(m)
    }
}

impl From<Margin> for f64 {
    fn from(m: Margin) -> f64 {
        m.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub embed: f64,
    pub loc: f64,
    pub cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            embed: 1.0,
            loc: 1.0,
            cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("embed", self.embed), ("loc", self.loc), ("cls", self.cls)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("loss weight {name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    /// Plain RPN baseline without the embedding term.
    None,
    Pair,
    Triplet,
}

impl std::fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            EmbedMode::None => "none",
            EmbedMode::Pair => "pair",
            EmbedMode::Triplet => "triplet",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClsLoss {
    #[default]
    CrossEntropy,
    Focal { alpha: f64, gamma: f64 },
}

/// How each term of the total loss is reduced over its contributors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Each term averaged over its own contributing count.
    #[default]
    Mean,
    /// Raw sums.
    Sum,
}

fn pair_from_distances<T: Real>(
    tape: &Tape<T>,
    dist: Var,
    similar: &[bool],
    margin: Margin,
) -> Result<Var, TensorError> {
    let half = T::lit(0.5);
    let shape = tape.shape(dist);
    let s: Vec<T> = similar.iter().map(|&s| if s { half } else { T::zero() }).collect();
    let d: Vec<T> = similar.iter().map(|&s| if s { T::zero() } else { half }).collect();
    let s = tape.constant(Tensor::new(shape.clone(), s)?);
    let d = tape.constant(Tensor::new(shape, d)?);
    let pull = tape.mul(dist, s)?;
    let gap = tape.add_scalar(tape.scale(dist, -T::one()), T::lit(margin.get()));
    let push = tape.mul(tape.relu(gap), d)?;
    tape.add(pull, push)
}

/// `½·s·D + ½·(1−s)·max(m − D, 0)` with `D = ‖ε − ε'‖²`.
pub fn pair_loss<T: Real>(
    tape: &Tape<T>,
    e1: Var,
    e2: Var,
    similar: bool,
    margin: Margin,
) -> Result<Var, TensorError> {
    let dist = tape.squared_l2(e1, e2)?;
    pair_from_distances(tape, dist, &[similar], margin)
}

/// Per-pair losses for row-aligned `[n, d]` embedding matrices, giving `[n]`.
pub fn pair_loss_batch<T: Real>(
    tape: &Tape<T>,
    left: Var,
    right: Var,
    similar: &[bool],
    margin: Margin,
) -> Result<Var, TensorError> {
    let dist = tape.row_squared_l2(left, right)?;
    if tape.shape(dist) != [similar.len()] {
        return Err(TensorError::ShapeMismatch {
            op: "pair_loss_batch",
            expected: vec![similar.len()],
            found: tape.shape(dist),
        });
    }
    pair_from_distances(tape, dist, similar, margin)
}

/// `max(‖a − p‖² − ‖a − n‖² + m, 0)`.
pub fn triplet_loss<T: Real>(
    tape: &Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: Margin,
) -> Result<Var, TensorError> {
    let ap = tape.squared_l2(anchor, positive)?;
    let an = tape.squared_l2(anchor, negative)?;
    let diff = tape.sub(ap, an)?;
    Ok(tape.relu(tape.add_scalar(diff, T::lit(margin.get()))))
}

/// Per-triplet losses for row-aligned `[n, d]` matrices, giving `[n]`.
pub fn triplet_loss_batch<T: Real>(
    tape: &Tape<T>,
    anchor: Var,
    positive: Var,
    negative: Var,
    margin: Margin,
) -> Result<Var, TensorError> {
    let ap = tape.row_squared_l2(anchor, positive)?;
    let an = tape.row_squared_l2(anchor, negative)?;
    let diff = tape.sub(ap, an)?;
    Ok(tape.relu(tape.add_scalar(diff, T::lit(margin.get()))))
}

/// `Σⱼ f(tⱼ − t*ⱼ)` over every element.
pub fn smooth_l1<T: Real>(tape: &Tape<T>, t: Var, t_star: Var) -> Result<Var, TensorError> {
    let diff = tape.sub(t, t_star)?;
    Ok(tape.sum(tape.smooth_l1(diff)))
}

fn one_minus<T: Real>(tape: &Tape<T>, x: Var) -> Var {
    tape.add_scalar(tape.scale(x, -T::one()), T::one())
}

/// Elementwise binary cross-entropy of probabilities `p` against 0/1 targets.
pub fn cross_entropy<T: Real>(tape: &Tape<T>, p: Var, targets: &[T]) -> Result<Var, TensorError> {
    let eps = T::lit(PROB_EPS);
    let shape = tape.shape(p);
    let t = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let not_t = tape.constant(Tensor::new(
        shape,
        targets.iter().map(|&v| T::one() - v).collect(),
    )?);
    let pos = tape.mul(tape.ln_clamped(p, eps), t)?;
    let neg = tape.mul(tape.ln_clamped(one_minus(tape, p), eps), not_t)?;
    Ok(tape.scale(tape.add(pos, neg)?, -T::one()))
}

/// Elementwise `−α_t (1 − p_t)^γ ln p_t`.
pub fn focal_loss<T: Real>(
    tape: &Tape<T>,
    p: Var,
    targets: &[T],
    alpha: f64,
    gamma: f64,
) -> Result<Var, TensorError> {
    let eps = T::lit(PROB_EPS);
    let shape = tape.shape(p);
    let t = tape.constant(Tensor::new(shape.clone(), targets.to_vec())?);
    let not_t = tape.constant(Tensor::new(
        shape.clone(),
        targets.iter().map(|&v| T::one() - v).collect(),
    )?);
    let a = T::lit(alpha);
    let alpha_t = tape.constant(Tensor::new(
        shape,
        targets.iter().map(|&v| v * a + (T::one() - v) * (T::one() - a)).collect(),
    )?);
    let p_t = tape.add(tape.mul(p, t)?, tape.mul(one_minus(tape, p), not_t)?)?;
    let modulating = tape.powf(one_minus(tape, p_t), T::lit(gamma));
    let weighted = tape.mul(tape.mul(modulating, alpha_t)?, tape.ln_clamped(p_t, eps))?;
    Ok(tape.scale(weighted, -T::one()))
}

/// Cross-entropy of a single probability, without recording on a tape.
pub fn cross_entropy_value<T: Real>(p: T, target: bool) -> T {
    let eps = T::lit(PROB_EPS);
    if target {
        -p.max(eps).ln()
    } else {
        -(T::one() - p).max(eps).ln()
    }
}

pub fn focal_value<T: Real>(p: T, target: bool, alpha: f64, gamma: f64) -> T {
    let eps = T::lit(PROB_EPS);
    let (p_t, a_t) = if target {
        (p, T::lit(alpha))
    } else {
        (T::one() - p, T::one() - T::lit(alpha))
    };
    -a_t * (T::one() - p_t).powf(T::lit(gamma)) * p_t.max(eps).ln()
}

pub fn smooth_l1_scalar<T: Real>(x: T) -> T {
    smooth_l1_value(x)
}

pub fn cls_loss_value<T: Real>(kind: ClsLoss, p: T, target: bool) -> T {
    match kind {
        ClsLoss::CrossEntropy => cross_entropy_value(p, target),
        ClsLoss::Focal { alpha, gamma } => focal_value(p, target, alpha, gamma),
    }
}

/// Embedding-loss inputs, already gathered into row-aligned matrices.
pub enum EmbedBatch {
    None,
    Pairs {
        left: Var,
        right: Var,
        similar: Vec<bool>,
    },
    Triplets {
        anchor: Var,
        positive: Var,
        negative: Var,
    },
}

/// Per-anchor predictions and targets for the retained (non-ignored) anchors.
pub struct DetectionBatch<'a, T> {
    /// `[n, 4]` predicted offsets.
    pub offsets: Var,
    /// `[n]` foreground probabilities.
    pub scores: Var,
    /// Regression targets; entries for negatives are ignored.
    pub target_offsets: &'a [OffsetTuple<T>],
    /// `p*` per anchor.
    pub labels: &'a [bool],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub mode: EmbedMode,
    pub margin: Margin,
    pub weights: LossWeights,
    pub cls: ClsLoss,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mode: EmbedMode::Triplet,
            margin: Margin(2.0),
            weights: LossWeights::default(),
            cls: ClsLoss::CrossEntropy,
            reduction: Reduction::Mean,
        }
    }
}

/// The three unweighted terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub embed: Var,
    pub loc: Var,
    pub cls: Var,
}

fn reduce<T: Real>(tape: &Tape<T>, v: Var, count: usize, reduction: Reduction) -> Var {
    let s = tape.sum(v);
    match reduction {
        Reduction::Sum => s,
        Reduction::Mean => tape.scale(s, T::one() / T::from_usize_lossy(count.max(1))),
    }
}

/// `λ_embed·L_embed + λ_loc·Σ p*·L_loc + λ_cls·Σ L_cls`.
///
/// With `EmbedMode::None` the embedding term is identically zero whatever
/// `embed` holds.
pub fn total_loss<T: Real>(
    tape: &Tape<T>,
    det: &DetectionBatch<'_, T>,
    embed: &EmbedBatch,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let n = det.labels.len();
    if det.target_offsets.len() != n
        || tape.shape(det.scores) != [n]
        || tape.shape(det.offsets) != [n, 4]
    {
        return Err(TensorError::ShapeMismatch {
            op: "total_loss",
            expected: vec![n, 4],
            found: tape.shape(det.offsets),
        });
    }
    let positives = det.labels.iter().filter(|&&l| l).count();

    // localization, gated by p*
    let mut targets = Vec::with_capacity(n * 4);
    let mut gate = Vec::with_capacity(n * 4);
    for (t, &l) in det.target_offsets.iter().zip(det.labels) {
        let (t, g) = if l {
            (t.to_array(), T::one())
        } else {
            ([T::zero(); 4], T::zero())
        };
        targets.extend_from_slice(&t);
        gate.extend(std::iter::repeat_n(g, 4));
    }
    let targets = tape.constant(Tensor::new(vec![n, 4], targets)?);
    let gate = tape.constant(Tensor::new(vec![n, 4], gate)?);
    let per_elem = tape.smooth_l1(tape.sub(det.offsets, targets)?);
    let loc = reduce(tape, tape.mul(per_elem, gate)?, positives, cfg.reduction);

    let target_probs: Vec<T> = det.labels.iter().map(|&l| if l { T::one() } else { T::zero() }).collect();
    let per_anchor = match cfg.cls {
        ClsLoss::CrossEntropy => cross_entropy(tape, det.scores, &target_probs)?,
        ClsLoss::Focal { alpha, gamma } => focal_loss(tape, det.scores, &target_probs, alpha, gamma)?,
    };
    let cls = reduce(tape, per_anchor, n, cfg.reduction);

    let embed_term = match (cfg.mode, embed) {
        (EmbedMode::Pair, EmbedBatch::Pairs { left, right, similar }) if !similar.is_empty() => {
            let l = pair_loss_batch(tape, *left, *right, similar, cfg.margin)?;
            Some(reduce(tape, l, similar.len(), cfg.reduction))
        }
        (EmbedMode::Triplet, EmbedBatch::Triplets { anchor, positive, negative }) => {
            let l = triplet_loss_batch(tape, *anchor, *positive, *negative, cfg.margin)?;
            let k = tape.shape(l)[0];
            (k > 0).then(|| reduce(tape, l, k, cfg.reduction))
        }
        (EmbedMode::None, _) | (_, EmbedBatch::None) => None,
        (EmbedMode::Pair, EmbedBatch::Pairs { .. }) => None,
        _ => {
            return Err(TensorError::Invalid {
                op: "total_loss",
                msg: format!("embedding batch does not match mode {}", cfg.mode),
            })
        }
    };
    let embed_term = embed_term.unwrap_or_else(|| tape.constant(Tensor::scalar(T::zero())));

    let w = cfg.weights;
    let mut total = tape.scale(loc, T::lit(w.loc));
    total = tape.add(total, tape.scale(cls, T::lit(w.cls)))?;
    if cfg.mode != EmbedMode::None {
        total = tape.add(total, tape.scale(embed_term, T::lit(w.embed)))?;
    }
    Ok(LossTerms {
        total,
        embed: embed_term,
        loc,
        cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecvar(tape: &Tape<f64>, v: &[f64]) -> Var {
        tape.leaf(Tensor::vector(v).requiring_grad())
    }

    #[test]
    fn pair_loss_values() {
        let tape = Tape::new();
        let a = vecvar(&tape, &[0.3, -0.2]);
        let same = pair_loss(&tape, a, a, true, Margin(1.0)).unwrap();
        assert_eq!(tape.item(same), 0.0);

        let b = vecvar(&tape, &[0.8, -0.2]);
        // D = 0.25
        let l = pair_loss(&tape, a, b, false, Margin(1.0)).unwrap();
        assert!((tape.item(l) - 0.375).abs() < 1e-12);
        let far = vecvar(&tape, &[3.3, -0.2]);
        let l = pair_loss(&tape, a, far, false, Margin(1.0)).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn similar_pairs_ignore_margin() {
        let tape = Tape::new();
        let a = vecvar(&tape, &[0.1, 0.7, -0.4]);
        let b = vecvar(&tape, &[-0.5, 0.2, 0.9]);
        let vals: Vec<f64> = [0.5, 1.0, 2.0]
            .iter()
            .map(|&m| tape.item(pair_loss(&tape, a, b, true, Margin(m)).unwrap()))
            .collect();
        assert!(vals.iter().all(|&v| v == vals[0]));
    }

    #[test]
    fn triplet_loss_values() {
        let tape = Tape::new();
        let a = vecvar(&tape, &[0.0, 0.0]);
        let p = vecvar(&tape, &[1.0, 0.0]);
        let n = vecvar(&tape, &[1.0, 1.0]);
        let l = triplet_loss(&tape, a, p, n, Margin(2.0)).unwrap();
        assert!((tape.item(l) - 1.0).abs() < 1e-12);
        let far = vecvar(&tape, &[3.0, 0.0]);
        let l = triplet_loss(&tape, a, a, far, Margin(2.0)).unwrap();
        assert_eq!(tape.item(l), 0.0);
    }

    #[test]
    fn smooth_l1_values() {
        let tape = Tape::new();
        let z = vecvar(&tape, &[0.0; 4]);
        assert_eq!(tape.item(smooth_l1(&tape, z, z).unwrap()), 0.0);
        let half = vecvar(&tape, &[0.5, 0.0, 0.0, 0.0]);
        assert!((tape.item(smooth_l1(&tape, half, z).unwrap()) - 0.125).abs() < 1e-12);
        let two = vecvar(&tape, &[0.0, 0.0, -2.0, 0.0]);
        assert!((tape.item(smooth_l1(&tape, two, z).unwrap()) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_values() {
        let tape = Tape::new();
        let p = vecvar(&tape, &[0.5, 1.0 - 1e-15, 1e-30]);
        let l = cross_entropy(&tape, p, &[1.0, 1.0, 1.0]).unwrap();
        let v = tape.value(l).data().to_vec();
        assert!((v[0] - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(v[1] < 1e-12);
        assert!(v[2].is_finite() && (v[2] - 1e12f64.ln()).abs() < 1e-9);
        assert!((cross_entropy_value(0.5, false) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn focal_reduces_to_half_cross_entropy() {
        let tape = Tape::new();
        let probs = [0.1, 0.35, 0.8, 0.99];
        let p = vecvar(&tape, &probs);
        for targets in [[1.0; 4], [0.0; 4]] {
            let f = focal_loss(&tape, p, &targets, 0.5, 0.0).unwrap();
            let c = cross_entropy(&tape, p, &targets).unwrap();
            for (fv, cv) in tape.value(f).data().iter().zip(tape.value(c).data()) {
                assert!((fv - 0.5 * cv).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn focal_hand_value() {
        let expected = 0.25 * 0.01 * -(0.9f64.ln());
        let v = focal_value(0.9, true, 0.25, 2.0);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 2.634e-4).abs() < 1e-7);
        let tape = Tape::new();
        let p = vecvar(&tape, &[0.9]);
        let f = focal_loss(&tape, p, &[1.0], 0.25, 2.0).unwrap();
        assert!((tape.item(f) - expected).abs() < 1e-15);
    }

    #[test]
    fn focal_decreases_in_p_for_positives() {
        let vals: Vec<f64> = (1..=100)
            .map(|i| focal_value(i as f64 / 101.0, true, 0.25, 2.0))
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    fn det_batch<'a>(
        tape: &Tape<f64>,
        t: &[[f64; 4]],
        p: &[f64],
        targets: &'a [OffsetTuple<f64>],
        labels: &'a [bool],
    ) -> DetectionBatch<'a, f64> {
        let flat: Vec<f64> = t.iter().flatten().copied().collect();
        DetectionBatch {
            offsets: tape.leaf(Tensor::new(vec![t.len(), 4], flat).unwrap().requiring_grad()),
            scores: tape.leaf(Tensor::vector(p).requiring_grad()),
            target_offsets: targets,
            labels,
        }
    }

    #[test]
    fn negatives_never_contribute_localization() {
        let tape = Tape::new();
        let targets = [OffsetTuple::zero(); 2];
        let det = det_batch(&tape, &[[5.0, -3.0, 9.0, 1.0], [0.2; 4]], &[0.3, 0.6], &targets, &[false, false]);
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let cfg = LossConfig {
                mode: EmbedMode::None,
                reduction,
                ..Default::default()
            };
            let terms = total_loss(&tape, &det, &EmbedBatch::None, &cfg).unwrap();
            assert_eq!(tape.item(terms.loc), 0.0);
        }
    }

    #[test]
    fn perfect_positive_gives_zero_total() {
        let tape = Tape::new();
        let target = OffsetTuple {
            tx: 0.1,
            ty: -0.2,
            th: 0.3,
            tw: 0.0,
        };
        let targets = [target];
        let det = det_batch(&tape, &[target.to_array()], &[1.0 - 1e-12], &targets, &[true]);
        let cfg = LossConfig {
            mode: EmbedMode::None,
            ..Default::default()
        };
        let terms = total_loss(&tape, &det, &EmbedBatch::None, &cfg).unwrap();
        assert!(tape.item(terms.total) < 1e-11);
    }

    #[test]
    fn two_anchor_total_matches_hand_sum() {
        // positive: t - t* = (0.5, 0, 0, 2) -> 0.125 + 1.5; p = 0.8
        // negative: p = 0.4
        // pair: D = 0.25, dissimilar, m = 1 -> 0.375
        let tape = Tape::new();
        let targets = [OffsetTuple::zero(), OffsetTuple::zero()];
        let det = det_batch(&tape, &[[0.5, 0.0, 0.0, 2.0], [9.0; 4]], &[0.8, 0.4], &targets, &[true, false]);
        let left = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap().requiring_grad());
        let right = tape.leaf(Tensor::new(vec![1, 2], vec![0.3, 0.4]).unwrap().requiring_grad());
        let embed = EmbedBatch::Pairs {
            left,
            right,
            similar: vec![false],
        };
        let cfg = LossConfig {
            mode: EmbedMode::Pair,
            margin: Margin(1.0),
            reduction: Reduction::Sum,
            ..Default::default()
        };
        let terms = total_loss(&tape, &det, &embed, &cfg).unwrap();
        let cls = -(0.8f64.ln()) - (0.6f64.ln());
        let expected = 0.375 + 1.625 + cls;
        assert!((tape.item(terms.total) - expected).abs() < 1e-12);
        assert!((tape.item(terms.embed) - 0.375).abs() < 1e-12);

        let mean_cfg = LossConfig {
            reduction: Reduction::Mean,
            ..cfg
        };
        let terms = total_loss(&tape, &det, &embed, &mean_cfg).unwrap();
        assert!((tape.item(terms.total) - (0.375 + 1.625 + cls / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn mode_none_is_loc_plus_cls() {
        let tape = Tape::new();
        let targets = [OffsetTuple::zero(), OffsetTuple::zero()];
        let det = det_batch(&tape, &[[0.5, 0.1, 0.0, 2.0], [1.0; 4]], &[0.7, 0.2], &targets, &[true, false]);
        let left = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap().requiring_grad());
        let embed = EmbedBatch::Pairs {
            left,
            right: left,
            similar: vec![false],
        };
        let cfg = LossConfig {
            mode: EmbedMode::None,
            weights: LossWeights {
                embed: 3.0,
                loc: 0.5,
                cls: 2.0,
            },
            ..Default::default()
        };
        let terms = total_loss(&tape, &det, &embed, &cfg).unwrap();
        let expected = 0.5 * tape.item(terms.loc) + 2.0 * tape.item(terms.cls);
        assert_eq!(tape.item(terms.total), expected);
        assert_eq!(tape.item(terms.embed), 0.0);
    }

    #[test]
    fn misaligned_inputs_are_rejected() {
        let tape = Tape::new();
        let targets = [OffsetTuple::zero()];
        let det = det_batch(&tape, &[[0.0; 4], [0.0; 4]], &[0.5, 0.5], &targets, &[true]);
        assert!(total_loss(&tape, &det, &EmbedBatch::None, &LossConfig::default()).is_err());
    }

    #[test]
    fn margin_validation() {
        assert!(Margin::new(-0.1).is_err());
        assert!(Margin::new(f64::NAN).is_err());
        assert_eq!(Margin::new(1.5).unwrap().get(), 1.5);
    }
}
