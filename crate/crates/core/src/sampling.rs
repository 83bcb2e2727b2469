//! Hard-negative selection and the pair / triplet generators over labeled
//! embeddings.
//!
//! Generators work on labels and return indices into the embedding set, so
//! the same plan can gather rows from any embedding matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{AnchorLabel, LabeledAnchor};
use crate::error::SamplingError;
use crate::geometry::cmp_real;
use crate::scalar::Real;

/// Labeled embeddings of identical dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet<T> {
    dim: usize,
    vectors: Vec<Vec<T>>,
    labels: Vec<bool>,
}

impl<T: Real> EmbeddingSet<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            vectors: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, embedding: Vec<T>, foreground: bool) -> Result<(), SamplingError> {
        if embedding.len() != self.dim {
            return Err(SamplingError::Invalid(format!(
                "embedding has dimension {}, set expects {}",
                embedding.len(),
                self.dim
            )));
        }
        self.vectors.push(embedding);
        self.labels.push(foreground);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn embedding(&self, i: usize) -> &[T] {
        &self.vectors[i]
    }

    pub fn pairs(&self, n_pairs: usize, seed: u64) -> Result<PairSet, SamplingError> {
        make_pairs(&self.labels, n_pairs, seed)
    }

    pub fn triplets(&self, n_triplets: usize, seed: u64) -> Result<TripletSet, SamplingError> {
        make_triplets(&self.labels, n_triplets, seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub first: usize,
    pub second: usize,
    /// `s`: true iff both members carry the same label.
    pub similar: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<Pair>,
    /// Set when one pair kind could not be drawn, breaking the balance.
    pub unbalanced: bool,
}

impl PairSet {
    pub fn similar_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.similar).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletSet {
    pub triplets: Vec<Triplet>,
}

/// Pairs/triplets drawn per image: four per positive, capped at 256.
pub fn default_embed_count(positives: usize) -> usize {
    (4 * positives).min(256)
}

fn split(labels: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let fg = (0..labels.len()).filter(|&i| labels[i]).collect();
    let bg = (0..labels.len()).filter(|&i| !labels[i]).collect();
    (fg, bg)
}

fn distinct_two(rng: &mut ChaCha8Rng, members: &[usize]) -> (usize, usize) {
    let i = rng.random_range(0..members.len());
    let mut j = rng.random_range(0..members.len() - 1);
    if j >= i {
        j += 1;
    }
    (members[i], members[j])
}

/// Balanced pair generator: `ceil(n/2)` similar and `floor(n/2)` dissimilar
/// pairs when both labels are present.
pub fn make_pairs(labels: &[bool], n_pairs: usize, seed: u64) -> Result<PairSet, SamplingError> {
    if n_pairs < 2 {
        return Err(SamplingError::Invalid(format!(
            "need at least 2 pairs, asked for {n_pairs}"
        )));
    }
    let (fg, bg) = split(labels);
    let similar_pools: Vec<&[usize]> = [&fg[..], &bg[..]]
        .into_iter()
        .filter(|c| c.len() >= 2)
        .collect();
    let can_similar = !similar_pools.is_empty();
    let can_dissimilar = !fg.is_empty() && !bg.is_empty();
    if !can_similar && !can_dissimilar {
        return Err(SamplingError::Invalid(
            "no pair can be formed from fewer than two embeddings".into(),
        ));
    }
    let (n_similar, unbalanced) = match (can_similar, can_dissimilar) {
        (true, true) => (n_pairs.div_ceil(2), false),
        (true, false) => (n_pairs, true),
        _ => (0, true),
    };
    if unbalanced {
        log::warn!("pair generator: only one pair kind available, output is unbalanced");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        if k < n_similar {
            let pool = similar_pools[k % similar_pools.len()];
            let (first, second) = distinct_two(&mut rng, pool);
            pairs.push(Pair {
                first,
                second,
                similar: true,
            });
        } else {
            let f = fg[rng.random_range(0..fg.len())];
            let b = bg[rng.random_range(0..bg.len())];
            let (first, second) = if rng.random_bool(0.5) { (f, b) } else { (b, f) };
            pairs.push(Pair {
                first,
                second,
                similar: false,
            });
        }
    }
    Ok(PairSet { pairs, unbalanced })
}

/// Triplet generator alternating foreground- and background-anchored
/// triplets when both are possible.
pub fn make_triplets(
    labels: &[bool],
    n_triplets: usize,
    seed: u64,
) -> Result<TripletSet, SamplingError> {
    let (fg, bg) = split(labels);
    let fg_anchored = fg.len() >= 2 && !bg.is_empty();
    let bg_anchored = bg.len() >= 2 && !fg.is_empty();
    if !fg_anchored && !bg_anchored {
        let msg = if fg.is_empty() {
            "no foreground embedding".to_string()
        } else if bg.is_empty() {
            "no background embedding".to_string()
        } else {
            format!(
                "foreground has {} and background {} embeddings; one class needs two",
                fg.len(),
                bg.len()
            )
        };
        return Err(SamplingError::DeficientClass(msg));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triplets = Vec::with_capacity(n_triplets);
    for k in 0..n_triplets {
        let use_fg = match (fg_anchored, bg_anchored) {
            (true, true) => k % 2 == 0,
            (f, _) => f,
        };
        let (same, other) = if use_fg { (&fg, &bg) } else { (&bg, &fg) };
        let (anchor, positive) = distinct_two(&mut rng, same);
        let negative = other[rng.random_range(0..other.len())];
        triplets.push(Triplet {
            anchor,
            positive,
            negative,
        });
    }
    Ok(TripletSet { triplets })
}

/// Online hard example mining. Keeps positives (highest loss first, at most
/// `max_total / (1 + ratio)`) and the highest-loss negatives up to
/// `ratio × kept positives`. Returns ascending anchor indices; ignored
/// anchors are never selected.
pub fn ohem_select<T: Real>(
    anchors: &[LabeledAnchor<T>],
    cls_loss: &[T],
    neg_pos_ratio: f64,
    max_total: usize,
) -> Result<Vec<usize>, SamplingError> {
    if anchors.len() != cls_loss.len() {
        return Err(SamplingError::Invalid(format!(
            "{} anchors but {} losses",
            anchors.len(),
            cls_loss.len()
        )));
    }
    let labels: Vec<AnchorLabel> = anchors.iter().map(|a| a.label).collect();
    Ok(ohem_select_labels(&labels, cls_loss, neg_pos_ratio, max_total))
}

pub fn ohem_select_labels<T: Real>(
    labels: &[AnchorLabel],
    cls_loss: &[T],
    neg_pos_ratio: f64,
    max_total: usize,
) -> Vec<usize> {
    let by_loss_desc = |a: &usize, b: &usize| cmp_real(cls_loss[*b], cls_loss[*a]).then(a.cmp(b));
    let mut pos: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Positive)
        .collect();
    let mut neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    pos.sort_by(by_loss_desc);
    neg.sort_by(by_loss_desc);

    let pos_cap = (max_total as f64 / (1.0 + neg_pos_ratio)).floor() as usize;
    pos.truncate(pos_cap);
    let neg_quota = if pos.is_empty() {
        max_total
    } else {
        ((neg_pos_ratio * pos.len() as f64).floor() as usize).min(max_total - pos.len())
    };
    neg.truncate(neg_quota);

    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    out.sort_unstable();
    out
}
