//! SGD training loop: augment, forward, label anchors, OHEM, pair / triplet
//! sampling, loss, backward, momentum update.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{self, AnchorLabel, AnchorSpec, LabeledAnchor, LabelingConfig};
use crate::error::{SamplingError, TensorError, TrainError};
use crate::evaluator::{evaluate_f1ap, EvalConfig};
use crate::geometry::{BBox, OffsetTuple};
use crate::head::{AnchorLayout, HeadConfig, HeadVars, Model};
use crate::losses::{cls_loss_value, total_loss, DetectionBatch, EmbedBatch, EmbedMode, LossConfig, LossTerms, Margin};
use crate::sampling::{default_embed_count, make_pairs, make_triplets, ohem_select, Pair, Triplet};
use crate::scalar::Real;
use crate::synth::{augment_with, AnnotatedImage, AugmentConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OhemConfig {
    pub enabled: bool,
    /// Negatives kept per positive.
    pub neg_pos_ratio: f64,
    /// Upper bound on anchors kept per image.
    pub max_total: usize,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            neg_pos_ratio: 3.0,
            max_total: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Images per iteration.
    pub batch_size: usize,
    pub iterations: usize,
    pub loss: LossConfig,
    pub anchors: AnchorSpec,
    pub labeling: LabelingConfig,
    pub ohem: OhemConfig,
    /// Pairs or triplets per image; `None` uses [`default_embed_count`].
    pub embed_count: Option<usize>,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    /// Seeds parameter initialisation.
    pub model_seed: u64,
    /// Seeds batch order, augmentation and pair / triplet sampling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 4,
            iterations: 2000,
            loss: LossConfig::default(),
            anchors: AnchorSpec::default(),
            labeling: LabelingConfig::default(),
            ohem: OhemConfig::default(),
            embed_count: None,
            augment: true,
            augmentation: AugmentConfig::default(),
            model_seed: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.ohem.neg_pos_ratio.is_nan() || self.ohem.neg_pos_ratio < 0.0 || self.ohem.max_total == 0 {
            return bad("ohem needs neg_pos_ratio >= 0 and max_total >= 1".into());
        }
        self.loss.weights.validate().map_err(TrainError::Config)?;
        self.anchors.validate()?;
        Ok(())
    }

    pub fn check_head(&self, head: &HeadConfig) -> Result<(), TrainError> {
        head.validate().map_err(TrainError::Config)?;
        if head.stride() != self.anchors.stride {
            return Err(TrainError::Config(format!(
                "anchor stride {} differs from the head stride {}",
                self.anchors.stride,
                head.stride()
            )));
        }
        if head.num_anchor != self.anchors.anchors_per_location() {
            return Err(TrainError::Config(format!(
                "head has {} anchors per location, anchor spec {}",
                head.num_anchor,
                self.anchors.anchors_per_location()
            )));
        }
        Ok(())
    }
}

/// `v ← μ·v + g; p ← p − lr·v` for every parameter.
pub fn sgd_step<T: Real>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    velocity: &mut [Vec<T>],
    learning_rate: T,
    momentum: T,
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TensorError::Invalid {
            op: "sgd_step",
            msg: format!(
                "{} parameters, {} gradients, {} velocity buffers",
                params.len(),
                grads.len(),
                velocity.len()
            ),
        });
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || v.len() != p.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "sgd_step",
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= learning_rate * *vi;
        }
    }
    Ok(())
}

/// Momentum SGD over a model's parameter list.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &Model<T>, learning_rate: T, momentum: T) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: model.params().iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut Model<T>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        let mut params: Vec<Tensor<T>> = model.params().iter().map(|p| p.tensor.clone()).collect();
        sgd_step(&mut params, grads, &mut self.velocity, self.learning_rate, self.momentum)?;
        for (slot, p) in model.params_mut().iter_mut().zip(params) {
            slot.tensor = p;
        }
        Ok(())
    }
}

/// Pair or triplet indices into [`ImagePlan::selected`].
#[derive(Clone, Debug, PartialEq)]
pub enum EmbedPlan {
    None,
    Pairs(Vec<Pair>),
    Triplets(Vec<Triplet>),
}

/// Which anchors of one image enter the loss, and how.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlan<T> {
    pub layout: AnchorLayout,
    /// Ascending anchor indices.
    pub selected: Vec<usize>,
    /// `p*` per selected anchor.
    pub labels: Vec<bool>,
    pub targets: Vec<OffsetTuple<T>>,
    pub embed: EmbedPlan,
}

impl<T> ImagePlan<T> {
    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives()
    }
}

pub fn layout_of<T: Real>(tape: &Tape<T>, vars: &HeadVars, dim_embedding: usize) -> AnchorLayout {
    let s = tape.shape(vars.scores);
    AnchorLayout {
        num_anchor: s[0],
        dim_embedding,
        height: s[1],
        width: s[2],
    }
}

/// Selects anchors (OHEM on classification loss when enabled) and draws the
/// embedding pairs or triplets among them.
pub fn plan_image<T: Real>(
    cfg: &TrainConfig,
    layout: AnchorLayout,
    labeled: &[LabeledAnchor<T>],
    scores: &[T],
    seed: u64,
) -> Result<ImagePlan<T>, TrainError> {
    let selected: Vec<usize> = if cfg.ohem.enabled {
        let losses: Vec<T> = labeled
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let p = scores[layout.score_index(i)];
                cls_loss_value(cfg.loss.cls, p, a.label == AnchorLabel::Positive)
            })
            .collect();
        ohem_select(labeled, &losses, cfg.ohem.neg_pos_ratio, cfg.ohem.max_total)?
    } else {
        (0..labeled.len()).filter(|&i| labeled[i].label != AnchorLabel::Ignore).collect()
    };
    let labels: Vec<bool> = selected.iter().map(|&i| labeled[i].label == AnchorLabel::Positive).collect();
    let targets = selected
        .iter()
        .map(|&i| labeled[i].target_offsets.unwrap_or_else(OffsetTuple::zero))
        .collect();
    let positives = labels.iter().filter(|&&l| l).count();
    let n = cfg.embed_count.unwrap_or_else(|| default_embed_count(positives));
    let embed = match cfg.loss.mode {
        EmbedMode::None => EmbedPlan::None,
        _ if n == 0 => EmbedPlan::None,
        EmbedMode::Pair => match make_pairs(&labels, n.max(2), seed) {
            Ok(set) => EmbedPlan::Pairs(set.pairs),
            Err(SamplingError::Invalid(msg)) => {
                log::debug!("no pairs for this image: {msg}");
                EmbedPlan::None
            }
            Err(e) => return Err(e.into()),
        },
        EmbedMode::Triplet => match make_triplets(&labels, n, seed) {
            Ok(set) => EmbedPlan::Triplets(set.triplets),
            Err(SamplingError::DeficientClass(msg)) => {
                log::debug!("no triplets for this image: {msg}");
                EmbedPlan::None
            }
            Err(e) => return Err(e.into()),
        },
    };
    Ok(ImagePlan {
        layout,
        selected,
        labels,
        targets,
        embed,
    })
}

fn gather_rows<T: Real>(tape: &Tape<T>, map: Var, layout: AnchorLayout, anchors: &[usize]) -> Result<Var, TensorError> {
    tape.gather(map, layout.embedding_indices(anchors), vec![anchors.len(), layout.dim_embedding])
}

/// Loss terms for one image under a fixed plan.
pub fn image_loss<T: Real>(
    tape: &Tape<T>,
    vars: &HeadVars,
    plan: &ImagePlan<T>,
    cfg: &LossConfig,
) -> Result<LossTerms, TensorError> {
    let l = plan.layout;
    let n = plan.selected.len();
    let offsets = tape.gather(vars.offsets, l.offset_indices(&plan.selected), vec![n, 4])?;
    let scores = tape.gather(vars.scores, l.score_indices(&plan.selected), vec![n])?;
    let pick = |idx: &mut dyn Iterator<Item = usize>| -> Vec<usize> { idx.map(|k| plan.selected[k]).collect() };
    let embed = match &plan.embed {
        EmbedPlan::None => EmbedBatch::None,
        EmbedPlan::Pairs(pairs) => EmbedBatch::Pairs {
            left: gather_rows(tape, vars.embeddings, l, &pick(&mut pairs.iter().map(|p| p.first)))?,
            right: gather_rows(tape, vars.embeddings, l, &pick(&mut pairs.iter().map(|p| p.second)))?,
            similar: pairs.iter().map(|p| p.similar).collect(),
        },
        EmbedPlan::Triplets(ts) => EmbedBatch::Triplets {
            anchor: gather_rows(tape, vars.embeddings, l, &pick(&mut ts.iter().map(|t| t.anchor)))?,
            positive: gather_rows(tape, vars.embeddings, l, &pick(&mut ts.iter().map(|t| t.positive)))?,
            negative: gather_rows(tape, vars.embeddings, l, &pick(&mut ts.iter().map(|t| t.negative)))?,
        },
    };
    let embed = match (cfg.mode, embed) {
        (EmbedMode::None, _) => EmbedBatch::None,
        (_, e) => e,
    };
    let det = DetectionBatch {
        offsets,
        scores,
        target_offsets: &plan.targets,
        labels: &plan.labels,
    };
    total_loss(tape, &det, &embed, cfg)
}

/// Batch-mean loss values and parameter gradients for fixed plans.
#[derive(Clone, Debug)]
pub struct BatchResult<T> {
    pub total: T,
    pub embed: T,
    pub loc: T,
    pub cls: T,
    pub grads: Vec<Tensor<T>>,
}

/// Forward, loss and backward over `images` with the given plans.
pub fn batch_loss<T: Real>(
    model: &Model<T>,
    images: &[&Tensor<T>],
    plans: &[ImagePlan<T>],
    cfg: &LossConfig,
) -> Result<BatchResult<T>, TrainError> {
    let tape = Tape::new();
    let params = model.register(&tape);
    let mut terms = Vec::with_capacity(images.len());
    for (img, plan) in images.iter().zip(plans) {
        let x = tape.constant((*img).clone());
        let vars = model.forward_on(&tape, &params, x)?;
        terms.push(image_loss(&tape, &vars, plan, cfg)?);
    }
    finish_batch(&tape, &params, &terms)
}

fn finish_batch<T: Real>(tape: &Tape<T>, params: &[Var], terms: &[LossTerms]) -> Result<BatchResult<T>, TrainError> {
    let inv = T::one() / T::from_usize_lossy(terms.len().max(1));
    let mean = |f: fn(&LossTerms) -> Var| -> T { terms.iter().map(|t| tape.item(f(t))).sum::<T>() * inv };
    let mut total = terms[0].total;
    for t in &terms[1..] {
        total = tape.add(total, t.total)?;
    }
    let total = tape.scale(total, inv);
    tape.backward(total)?;
    let grads = params
        .iter()
        .map(|&p| tape.grad(p).unwrap_or_else(|| Tensor::zeros(tape.shape(p))))
        .collect();
    Ok(BatchResult {
        total: tape.item(total),
        embed: mean(|t| t.embed),
        loc: mean(|t| t.loc),
        cls: mean(|t| t.cls),
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss_total: f64,
    pub loss_embed: f64,
    pub loss_loc: f64,
    pub loss_cls: f64,
    pub positives: usize,
    pub negatives_sampled: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub const HEADER: &'static str = "iteration,loss_total,loss_embed,loss_loc,loss_cls,positives,negatives_sampled";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.iteration, r.loss_total, r.loss_embed, r.loss_loc, r.loss_cls, r.positives, r.negatives_sampled
            );
        }
        s
    }

    /// Mean total loss over the last `n` rows.
    pub fn tail_mean(&self, n: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(|r| r.loss_total).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// SplitMix64 finaliser over a combination of stream identifiers.
pub(crate) fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHUFFLE_STREAM: u64 = 1;
const AUGMENT_STREAM: u64 = 2;
const SAMPLE_STREAM: u64 = 3;

/// Epoch-wise shuffled image order.
struct BatchOrder {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl BatchOrder {
    fn index(&mut self, k: usize) -> usize {
        let epoch = k / self.n;
        if self.epoch != Some(epoch) {
            self.order = (0..self.n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, SHUFFLE_STREAM, epoch as u64));
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[k % self.n]
    }
}

/// Builds a model from `head` and trains it on `dataset`.
pub fn train<T: Real>(
    head: &HeadConfig,
    cfg: &TrainConfig,
    dataset: &[AnnotatedImage<T>],
) -> Result<(Model<T>, TrainLog), TrainError> {
    cfg.check_head(head)?;
    let model = Model::build(head.clone(), cfg.model_seed);
    train_model(model, cfg, dataset)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model<T: Real>(
    mut model: Model<T>,
    cfg: &TrainConfig,
    dataset: &[AnnotatedImage<T>],
) -> Result<(Model<T>, TrainLog), TrainError> {
    cfg.validate()?;
    cfg.check_head(model.config())?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut anchor_cache: BTreeMap<(usize, usize), Vec<BBox<T>>> = BTreeMap::new();
    let mut opt = Sgd::new(&model, T::lit(cfg.learning_rate), T::lit(cfg.momentum));
    let mut order = BatchOrder {
        seed: cfg.seed,
        n: dataset.len(),
        epoch: None,
        order: Vec::new(),
    };
    let dim = model.config().dim_embedding;
    let mut log = TrainLog::default();

    for it in 0..cfg.iterations {
        let tape = Tape::new();
        let params = model.register(&tape);
        let mut terms = Vec::with_capacity(cfg.batch_size);
        let (mut positives, mut negatives) = (0, 0);
        for b in 0..cfg.batch_size {
            let src = &dataset[order.index(it * cfg.batch_size + b)];
            let img = if cfg.augment {
                augment_with(src, mix_seed(cfg.seed, AUGMENT_STREAM, (it * cfg.batch_size + b) as u64), &cfg.augmentation)
            } else {
                src.clone()
            };
            let x = tape.constant(img.image.clone());
            let vars = model.forward_on(&tape, &params, x)?;
            let layout = layout_of(&tape, &vars, dim);
            let anchors = match anchor_cache.get(&(layout.height, layout.width)) {
                Some(a) => a,
                None => {
                    let a = anchors::generate(&cfg.anchors, layout.height, layout.width)?;
                    anchor_cache.entry((layout.height, layout.width)).or_insert(a)
                }
            };
            let labeled = anchors::label_anchors(anchors, &img.boxes, &cfg.labeling)?;
            let scores = tape.value(vars.scores).data().to_vec();
            let plan = plan_image(
                cfg,
                layout,
                &labeled,
                &scores,
                mix_seed(cfg.seed, SAMPLE_STREAM, (it * cfg.batch_size + b) as u64),
            )?;
            positives += plan.positives();
            negatives += plan.negatives();
            terms.push(image_loss(&tape, &vars, &plan, &cfg.loss)?);
        }
        let r = finish_batch(&tape, &params, &terms)?;
        for (name, v) in [("loss_total", r.total), ("loss_embed", r.embed), ("loss_loc", r.loc), ("loss_cls", r.cls)] {
            if !v.is_finite() {
                return Err(TrainError::Diverged { iteration: it, component: name });
            }
        }
        opt.step(&mut model, &r.grads)?;
        log.rows.push(LogRow {
            iteration: it,
            loss_total: r.total.as_f64(),
            loss_embed: r.embed.as_f64(),
            loss_loc: r.loc.as_f64(),
            loss_cls: r.cls.as_f64(),
            positives,
            negatives_sampled: negatives,
        });
        if it % 100 == 0 {
            log::info!("iteration {it}: loss {:.5}", r.total.as_f64());
        }
    }
    Ok((model, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: EmbedMode,
    pub margin: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub final_loss: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("mode,margin,precision,recall,f1,ap,final_loss\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.mode, r.margin, r.precision, r.recall, r.f1, r.ap, r.final_loss
        );
    }
    s
}

/// Trains one model per margin with the base seeds and evaluates each.
pub fn sweep_margins<T: Real>(
    head: &HeadConfig,
    base: &TrainConfig,
    margins: &[f64],
    train_set: &[AnnotatedImage<T>],
    eval_set: &[AnnotatedImage<T>],
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    if margins.is_empty() {
        return Err(TrainError::Config("margin sweep needs at least one margin".into()));
    }
    margins
        .iter()
        .map(|&m| {
            let mut cfg = base.clone();
            cfg.loss.margin = Margin::new(m).map_err(TrainError::Config)?;
            let (model, log) = train(head, &cfg, train_set)?;
            let report = evaluate_f1ap(&model, eval_set, &cfg.anchors, eval)?;
            Ok(SweepRow {
                mode: cfg.loss.mode,
                margin: m,
                precision: report.precision,
                recall: report.recall,
                f1: report.f1,
                ap: report.ap,
                final_loss: log.tail_mean(20),
            })
        })
        .collect()
}

/// [`sweep_margins`] for the pair and then the triplet loss.
pub fn sweep_losses<T: Real>(
    head: &HeadConfig,
    base: &TrainConfig,
    margins: &[f64],
    train_set: &[AnnotatedImage<T>],
    eval_set: &[AnnotatedImage<T>],
    eval: &EvalConfig,
) -> Result<Vec<SweepRow>, TrainError> {
    let mut rows = Vec::with_capacity(2 * margins.len());
    for mode in [EmbedMode::Pair, EmbedMode::Triplet] {
        let mut cfg = base.clone();
        cfg.loss.mode = mode;
        rows.extend(sweep_margins(head, &cfg, margins, train_set, eval_set, eval)?);
    }
    Ok(rows)
}
