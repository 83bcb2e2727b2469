//! Central finite-difference checks of the reverse pass, for single
//! operations, every loss, and the full head under a frozen sampling plan.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anchors::{self, AnchorSpec};
use crate::error::{ModelError, TensorError};
use crate::geometry::{BBox, OffsetTuple};
use crate::head::{AnchorLayout, HeadConfig, Model};
use crate::losses::{self, ClsLoss, DetectionBatch, EmbedBatch, EmbedMode, LossConfig, Margin, Reduction};
use crate::tape::{Conv2dParams, Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{image_loss, mix_seed, plan_image, ImagePlan, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Accepted random points per case.
    pub points: usize,
    pub op_tolerance: f64,
    pub model_tolerance: f64,
    /// Points closer than this to a kink are redrawn.
    pub hinge_gap: f64,
    /// Magnitude below which errors are measured absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            points: 20,
            op_tolerance: 1e-4,
            model_tolerance: 1e-3,
            hinge_gap: 1e-3,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Losses,
    Model,
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(match self {
            Scope::Ops => "ops",
            Scope::Losses => "losses",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ops" => Ok(Scope::Ops),
            "losses" => Ok(Scope::Losses),
            "model" => Ok(Scope::Model),
            other => Err(format!("unknown scope {other:?} (expected ops, losses or model)")),
        }
    }
}

/// A scalar-valued function of tape variables.
pub type Builder = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var, TensorError>>;

/// Inputs to differentiate plus constants appended after them.
pub struct Point {
    pub inputs: Vec<Tensor<f64>>,
    pub fixed: Vec<Tensor<f64>>,
    pub f: Builder,
}

fn record(tape: &Tape<f64>, p: &Point, inputs: &[Tensor<f64>], trainable: bool) -> Vec<Var> {
    let mut vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            if trainable {
                tape.leaf(t.clone().requiring_grad())
            } else {
                tape.constant(t.clone())
            }
        })
        .collect();
    vars.extend(p.fixed.iter().map(|t| tape.constant(t.clone())));
    vars
}

fn rel_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between reverse-mode and central-difference
/// gradients over every input element, or `None` when the point lies within
/// `hinge_gap` of a non-smooth point.
pub fn check_point(p: &Point, cfg: &GradCheckConfig) -> Result<Option<f64>, TensorError> {
    let tape = Tape::new();
    let vars = record(&tape, p, &p.inputs, true);
    let out = (p.f)(&tape, &vars)?;
    if tape.hinge_distance().is_some_and(|d| d < cfg.hinge_gap) {
        return Ok(None);
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars[..p.inputs.len()]
        .iter()
        .map(|&v| tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; tape.value(v).numel()]))
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let t = Tape::new();
        let vs = record(&t, p, inputs, false);
        let o = (p.f)(&t, &vs)?;
        Ok(t.item(o))
    };
    let mut work = p.inputs.clone();
    let mut worst = 0.0f64;
    for (k, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let orig = work[k].data()[j];
            work[k].data_mut()[j] = orig + cfg.step;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = orig - cfg.step;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            worst = worst.max(rel_error(a, numeric, cfg.abs_floor));
        }
    }
    Ok(Some(worst))
}

pub struct Case {
    pub name: &'static str,
    pub make: Box<dyn Fn(&mut ChaCha8Rng) -> Point>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub scope: Scope,
    pub name: String,
    pub points: usize,
    pub skipped_near_hinge: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub error: Option<String>,
}

const MAX_REDRAWS: usize = 50;

pub fn run_case(scope: Scope, index: usize, case: &Case, tolerance: f64, cfg: &GradCheckConfig) -> CheckRow {
    let mut row = CheckRow {
        scope,
        name: case.name.to_string(),
        points: 0,
        skipped_near_hinge: 0,
        max_rel_error: 0.0,
        tolerance,
        passed: false,
        error: None,
    };
    let mut attempt = 0u64;
    while row.points < cfg.points && row.skipped_near_hinge < MAX_REDRAWS * cfg.points {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64 + 1, attempt));
        attempt += 1;
        let point = (case.make)(&mut rng);
        match check_point(&point, cfg) {
            Ok(Some(e)) => {
                row.points += 1;
                row.max_rel_error = row.max_rel_error.max(e);
            }
            Ok(None) => row.skipped_near_hinge += 1,
            Err(e) => {
                row.error = Some(e.to_string());
                return row;
            }
        }
    }
    row.passed = row.points == cfg.points && row.max_rel_error < tolerance;
    row
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub rows: Vec<CheckRow>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<7} {:<24} {:>6} {:>8} {:>13} {:>9}  result\n",
            "scope", "case", "points", "redrawn", "max_rel_err", "tol"
        );
        for r in &self.rows {
            let result = match (&r.error, r.passed) {
                (Some(e), _) => format!("error: {e}"),
                (None, true) => "pass".into(),
                (None, false) => "FAIL".into(),
            };
            let _ = writeln!(
                s,
                "{:<7} {:<24} {:>6} {:>8} {:>13.3e} {:>9.0e}  {}",
                r.scope, r.name, r.points, r.skipped_near_hinge, r.max_rel_error, r.tolerance, result
            );
        }
        s
    }
}

pub fn run_scope(scope: Scope, cfg: &GradCheckConfig) -> GradReport {
    let (cases, tol) = match scope {
        Scope::Ops => (op_cases(), cfg.op_tolerance),
        Scope::Losses => (loss_cases(), cfg.op_tolerance),
        Scope::Model => (model_cases(), cfg.model_tolerance),
    };
    let offset = match scope {
        Scope::Ops => 0,
        Scope::Losses => 100,
        Scope::Model => 200,
    };
    GradReport {
        rows: cases
            .iter()
            .enumerate()
            .map(|(i, c)| run_case(scope, offset + i, c, tol, cfg))
            .collect(),
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = Normal::new(0.0, std).expect("std");
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| n.sample(rng)).collect()).expect("shape")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// `Σ c ⊙ y` with `c` the last variable, reducing a tensor op to a scalar.
fn weighted(tape: &Tape<f64>, y: Var, c: Var) -> Result<Var, TensorError> {
    Ok(tape.sum(tape.mul(y, c)?))
}

fn case(name: &'static str, make: impl Fn(&mut ChaCha8Rng) -> Point + 'static) -> Case {
    Case {
        name,
        make: Box::new(make),
    }
}

fn unary_case(
    name: &'static str,
    draw: impl Fn(&mut ChaCha8Rng) -> Tensor<f64> + 'static,
    op: impl Fn(&Tape<f64>, Var) -> Var + Copy + 'static,
) -> Case {
    case(name, move |rng| {
        let x = draw(rng);
        let c = randn(rng, x.shape(), 1.0);
        Point {
            inputs: vec![x],
            fixed: vec![c],
            f: Box::new(move |t, v| weighted(t, op(t, v[0]), v[1])),
        }
    })
}

fn binary_case(
    name: &'static str,
    op: impl Fn(&Tape<f64>, Var, Var) -> Result<Var, TensorError> + Copy + 'static,
) -> Case {
    case(name, move |rng| {
        let (a, b, c) = (randn(rng, &[2, 3], 1.0), randn(rng, &[2, 3], 1.0), randn(rng, &[2, 3], 1.0));
        Point {
            inputs: vec![a, b],
            fixed: vec![c],
            f: Box::new(move |t, v| weighted(t, op(t, v[0], v[1])?, v[2])),
        }
    })
}

fn conv_case(name: &'static str, size: usize, params: Conv2dParams) -> Case {
    case(name, move |rng| {
        let out = (size + 2 * params.padding - 3) / params.stride + 1;
        Point {
            inputs: vec![
                randn(rng, &[2, size, size], 1.0),
                randn(rng, &[3, 2, 3, 3], 0.5),
                randn(rng, &[3], 0.5),
            ],
            fixed: vec![randn(rng, &[3, out, out], 1.0)],
            f: Box::new(move |t, v| weighted(t, t.conv2d(v[0], v[1], v[2], params)?, v[3])),
        }
    })
}

/// One case per differentiable tape operation.
pub fn op_cases() -> Vec<Case> {
    vec![
        conv_case("conv2d", 5, Conv2dParams { stride: 1, padding: 1 }),
        conv_case("conv2d_strided", 6, Conv2dParams { stride: 2, padding: 1 }),
        conv_case("conv2d_pointwise", 4, Conv2dParams { stride: 1, padding: 0 }),
        unary_case("relu", |r| randn(r, &[12], 1.0), |t, x| t.relu(x)),
        unary_case("logistic", |r| randn(r, &[12], 2.0), |t, x| t.logistic(x)),
        unary_case("ln_clamped", |r| uniform(r, &[12], 0.1, 3.0), |t, x| t.ln_clamped(x, 1e-12)),
        unary_case("powf", |r| uniform(r, &[12], 0.2, 2.0), |t, x| t.powf(x, 2.5)),
        unary_case("smooth_l1", |r| randn(r, &[12], 2.0), |t, x| t.smooth_l1(x)),
        unary_case("scale", |r| randn(r, &[12], 1.0), |t, x| t.scale(x, -1.7)),
        unary_case("add_scalar", |r| randn(r, &[12], 1.0), |t, x| t.add_scalar(x, 0.3)),
        binary_case("add", |t, a, b| t.add(a, b)),
        binary_case("sub", |t, a, b| t.sub(a, b)),
        binary_case("mul", |t, a, b| t.mul(a, b)),
        case("sum", |rng| Point {
            inputs: vec![randn(rng, &[7], 1.0)],
            fixed: vec![],
            f: Box::new(|t, v| Ok(t.sum(v[0]))),
        }),
        case("mean", |rng| Point {
            inputs: vec![randn(rng, &[2, 4], 1.0)],
            fixed: vec![],
            f: Box::new(|t, v| Ok(t.mean(v[0]))),
        }),
        case("squared_l2", |rng| Point {
            inputs: vec![randn(rng, &[6], 1.0), randn(rng, &[6], 1.0)],
            fixed: vec![],
            f: Box::new(|t, v| t.squared_l2(v[0], v[1])),
        }),
        case("row_squared_l2", |rng| Point {
            inputs: vec![randn(rng, &[4, 3], 1.0), randn(rng, &[4, 3], 1.0)],
            fixed: vec![randn(rng, &[4], 1.0)],
            f: Box::new(|t, v| weighted(t, t.row_squared_l2(v[0], v[1])?, v[2])),
        }),
        case("gather", |rng| Point {
            inputs: vec![randn(rng, &[10], 1.0)],
            fixed: vec![randn(rng, &[2, 3], 1.0)],
            f: Box::new(|t, v| weighted(t, t.gather(v[0], vec![0, 3, 3, 9, 1, 0], vec![2, 3])?, v[1])),
        }),
    ]
}

fn margin(m: f64) -> Margin {
    Margin::new(m).expect("valid margin")
}

fn alternating(n: usize) -> Vec<f64> {
    (0..n).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect()
}

/// One case per loss, plus the weighted total.
pub fn loss_cases() -> Vec<Case> {
    vec![
        case("pair_similar", |rng| Point {
            inputs: vec![randn(rng, &[20], 0.3), randn(rng, &[20], 0.3)],
            fixed: vec![],
            f: Box::new(|t, v| losses::pair_loss(t, v[0], v[1], true, margin(1.0)).map(|l| t.sum(l))),
        }),
        case("pair_dissimilar", |rng| Point {
            inputs: vec![randn(rng, &[20], 0.15), randn(rng, &[20], 0.15)],
            fixed: vec![],
            f: Box::new(|t, v| losses::pair_loss(t, v[0], v[1], false, margin(1.0)).map(|l| t.sum(l))),
        }),
        case("pair_batch", |rng| Point {
            inputs: vec![randn(rng, &[6, 5], 0.3), randn(rng, &[6, 5], 0.3)],
            fixed: vec![randn(rng, &[6], 1.0)],
            f: Box::new(|t, v| {
                let similar = [true, false, true, false, false, true];
                weighted(t, losses::pair_loss_batch(t, v[0], v[1], &similar, margin(1.0))?, v[2])
            }),
        }),
        case("triplet", |rng| Point {
            inputs: vec![randn(rng, &[20], 0.2), randn(rng, &[20], 0.2), randn(rng, &[20], 0.2)],
            fixed: vec![],
            f: Box::new(|t, v| losses::triplet_loss(t, v[0], v[1], v[2], margin(2.0)).map(|l| t.sum(l))),
        }),
        case("triplet_batch", |rng| Point {
            inputs: vec![randn(rng, &[6, 5], 0.5), randn(rng, &[6, 5], 0.5), randn(rng, &[6, 5], 0.5)],
            fixed: vec![randn(rng, &[6], 1.0)],
            f: Box::new(|t, v| weighted(t, losses::triplet_loss_batch(t, v[0], v[1], v[2], margin(1.0))?, v[3])),
        }),
        case("smooth_l1", |rng| Point {
            inputs: vec![randn(rng, &[8, 4], 1.5), randn(rng, &[8, 4], 1.5)],
            fixed: vec![],
            f: Box::new(|t, v| losses::smooth_l1(t, v[0], v[1])),
        }),
        case("cross_entropy", |rng| Point {
            inputs: vec![uniform(rng, &[10], 0.05, 0.95)],
            fixed: vec![randn(rng, &[10], 1.0)],
            f: Box::new(|t, v| weighted(t, losses::cross_entropy(t, v[0], &alternating(10))?, v[1])),
        }),
        case("focal", |rng| Point {
            inputs: vec![uniform(rng, &[10], 0.05, 0.95)],
            fixed: vec![randn(rng, &[10], 1.0)],
            f: Box::new(|t, v| weighted(t, losses::focal_loss(t, v[0], &alternating(10), 0.25, 2.0)?, v[1])),
        }),
        case("total_triplet", |rng| total_point(rng, EmbedMode::Triplet, ClsLoss::CrossEntropy)),
        case("total_pair_focal", |rng| {
            total_point(rng, EmbedMode::Pair, ClsLoss::Focal { alpha: 0.25, gamma: 2.0 })
        }),
    ]
}

fn total_point(rng: &mut ChaCha8Rng, mode: EmbedMode, cls: ClsLoss) -> Point {
    let n = 8;
    let labels: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let targets: Vec<OffsetTuple<f64>> = (0..n)
        .map(|_| OffsetTuple::from_array(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
        .collect();
    let cfg = LossConfig {
        mode,
        margin: margin(1.0),
        cls,
        reduction: Reduction::Mean,
        ..Default::default()
    };
    Point {
        inputs: vec![
            randn(rng, &[n, 4], 1.5),
            uniform(rng, &[n], 0.05, 0.95),
            randn(rng, &[5, 4], 0.3),
            randn(rng, &[5, 4], 0.3),
            randn(rng, &[5, 4], 0.3),
        ],
        fixed: vec![],
        f: Box::new(move |t, v| {
            let det = DetectionBatch {
                offsets: v[0],
                scores: v[1],
                target_offsets: &targets,
                labels: &labels,
            };
            let embed = match mode {
                EmbedMode::Pair => EmbedBatch::Pairs {
                    left: v[2],
                    right: v[3],
                    similar: vec![true, false, true, false, true],
                },
                _ => EmbedBatch::Triplets {
                    anchor: v[2],
                    positive: v[3],
                    negative: v[4],
                },
            };
            Ok(losses::total_loss(t, &det, &embed, &cfg)?.total)
        }),
    }
}

/// Small head used for end-to-end checks: 16×16 input, stride 4, two anchors.
pub fn model_check_setup() -> (HeadConfig, AnchorSpec) {
    (
        HeadConfig {
            backbone_widths: vec![3],
            c1: 4,
            c2: 4,
            num_anchor: 2,
            dim_embedding: 3,
            ..Default::default()
        },
        AnchorSpec {
            scales: vec![6.0, 10.0],
            ratios: vec![1.0],
            stride: 4,
        },
    )
}

fn model_point(rng: &mut ChaCha8Rng, mode: EmbedMode, head: HeadConfig) -> Point {
    let (_, spec) = model_check_setup();
    let mut model = Model::<f64>::build(head, rng.random());
    for p in model.params_mut() {
        let s = p.tensor.shape().to_vec();
        let std = if s.len() == 4 {
            (2.0 / (s[1] * s[2] * s[3]) as f64).sqrt()
        } else {
            0.1
        };
        p.tensor = randn(rng, &s, std);
    }
    let image = uniform(rng, &[3, 16, 16], 0.0, 1.0);
    let gt = vec![
        BBox::new(rng.random_range(0.0..3.0), rng.random_range(0.0..3.0), 7.0, 6.0),
        BBox::new(rng.random_range(7.0..9.0), rng.random_range(7.0..9.0), 6.5, 7.5),
    ];
    let train = TrainConfig {
        loss: LossConfig {
            mode,
            margin: margin(1.0),
            ..Default::default()
        },
        anchors: spec.clone(),
        embed_count: Some(6),
        ..Default::default()
    };
    let out = model.forward(&image).expect("forward");
    let layout = AnchorLayout {
        dim_embedding: model.config().dim_embedding,
        ..out.layout()
    };
    let a = anchors::generate(&spec, layout.height, layout.width).expect("anchors");
    let labeled = anchors::label_anchors(&a, &gt, &train.labeling).expect("labels");
    let plan: ImagePlan<f64> =
        plan_image(&train, layout, &labeled, out.scores.data(), rng.random()).expect("plan");
    let inputs = model.params().iter().map(|p| p.tensor.clone()).collect();
    let loss = train.loss;
    Point {
        inputs,
        fixed: vec![image],
        f: Box::new(move |t, v| {
            let (params, x) = v.split_at(v.len() - 1);
            let vars = model.forward_on(t, params, x[0]).map_err(|e| match e {
                ModelError::Tensor(e) => e,
                other => TensorError::Invalid {
                    op: "forward",
                    msg: other.to_string(),
                },
            })?;
            Ok(image_loss(t, &vars, &plan, &loss)?.total)
        }),
    }
}

/// Total loss through the whole head, one case per embedding mode.
pub fn model_cases() -> Vec<Case> {
    let (head, _) = model_check_setup();
    let shared = HeadConfig {
        classifier_input: crate::head::ClassifierInput::Shared,
        ..head.clone()
    };
    let (h1, h2, h3) = (head.clone(), head.clone(), head);
    vec![
        case("head_triplet", move |rng| model_point(rng, EmbedMode::Triplet, h1.clone())),
        case("head_pair", move |rng| model_point(rng, EmbedMode::Pair, h2.clone())),
        case("head_none", move |rng| model_point(rng, EmbedMode::None, h3.clone())),
        case("head_shared_classifier", move |rng| model_point(rng, EmbedMode::Triplet, shared.clone())),
    ]
}
