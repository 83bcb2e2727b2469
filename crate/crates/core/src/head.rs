//! The detection network: a small strided conv backbone, a shared 3x3
//! convolution, and three 1x1 heads (box regressor, embedding layer and
//! classifier).
//!
//! Per-anchor channel layout at each location, for anchor `a`:
//! offsets `4a..4a+4`, embedding `d·a..d·a+d`, score `a`. Anchors are indexed
//! `(row · W + col) · A + a`, matching [`crate::anchors::generate`].

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchors::{AnchorLabel, LabeledAnchor};
use crate::error::ModelError;
use crate::scalar::Real;
use crate::tape::{Conv2dParams, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    /// Classifier reads the embedding map.
    #[default]
    Embedding,
    /// Classifier reads the shared features directly.
    Shared,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Widths of the stride-2 backbone stages preceding the last one.
    pub backbone_widths: Vec<usize>,
    /// Channels of the final backbone stage, i.e. the shared feature map.
    pub c1: usize,
    /// Output channels of the shared 3x3 convolution.
    pub c2: usize,
    pub num_anchor: usize,
    pub dim_embedding: usize,
    pub classifier_input: ClassifierInput,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            backbone_widths: vec![16, 32],
            c1: 32,
            c2: 32,
            num_anchor: 9,
            dim_embedding: 20,
            classifier_input: ClassifierInput::Embedding,
        }
    }
}

impl HeadConfig {
    pub fn stride(&self) -> usize {
        1 << (self.backbone_widths.len() + 1)
    }

    pub fn regressor_channels(&self) -> usize {
        4 * self.num_anchor
    }

    pub fn embedding_channels(&self) -> usize {
        self.num_anchor * self.dim_embedding
    }

    pub fn classifier_channels(&self) -> usize {
        self.num_anchor
    }

    /// `(name, c_out, c_in, k)` for every convolution in forward order.
    pub fn layers(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &w) in self.backbone_widths.iter().chain(std::iter::once(&self.c1)).enumerate() {
            out.push((format!("backbone.{i}"), w, c_in, 3));
            c_in = w;
        }
        out.push(("conv1".into(), self.c2, self.c1, 3));
        out.push(("conv2".into(), self.regressor_channels(), self.c2, 1));
        out.push(("conv3".into(), self.embedding_channels(), self.c2, 1));
        let cls_in = match self.classifier_input {
            ClassifierInput::Embedding => self.embedding_channels(),
            ClassifierInput::Shared => self.c2,
        };
        out.push(("conv4".into(), self.classifier_channels(), cls_in, 1));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, co, ci, k)| co * ci * k * k + co)
            .sum()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.c1 == 0 || self.c2 == 0 || self.num_anchor == 0 || self.dim_embedding == 0 {
            return Err("head channel counts must be positive".into());
        }
        if self.backbone_widths.contains(&0) {
            return Err("backbone widths must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: HeadConfig,
    seed: u64,
    params: Vec<NamedParam<T>>,
}

/// Output maps recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub offsets: Var,
    pub embeddings: Var,
    pub scores: Var,
}

/// Output maps `[4A, H, W]`, `[A·d, H, W]` and `[A, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput<T> {
    pub offsets: Tensor<T>,
    pub embeddings: Tensor<T>,
    pub scores: Tensor<T>,
}

impl<T: Real> HeadOutput<T> {
    pub fn layout(&self) -> AnchorLayout {
        let s = self.scores.shape();
        AnchorLayout {
            num_anchor: s[0],
            dim_embedding: self.embeddings.shape()[0] / s[0].max(1),
            height: s[1],
            width: s[2],
        }
    }
}

/// Index arithmetic between anchor indices and flat head-map positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorLayout {
    pub num_anchor: usize,
    pub dim_embedding: usize,
    pub height: usize,
    pub width: usize,
}

impl AnchorLayout {
    pub fn anchor_count(&self) -> usize {
        self.num_anchor * self.height * self.width
    }

    fn split(&self, anchor: usize) -> (usize, usize) {
        (anchor / self.num_anchor, anchor % self.num_anchor)
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Flat index of offset component `j` (x, y, h, w) for `anchor`.
    pub fn offset_index(&self, anchor: usize, j: usize) -> usize {
        let (cell, a) = self.split(anchor);
        (4 * a + j) * self.plane() + cell
    }

    pub fn embedding_index(&self, anchor: usize, k: usize) -> usize {
        let (cell, a) = self.split(anchor);
        (self.dim_embedding * a + k) * self.plane() + cell
    }

    pub fn score_index(&self, anchor: usize) -> usize {
        let (cell, a) = self.split(anchor);
        a * self.plane() + cell
    }

    pub fn offset_indices(&self, anchors: &[usize]) -> Vec<usize> {
        anchors
            .iter()
            .flat_map(|&i| (0..4).map(move |j| self.offset_index(i, j)))
            .collect()
    }

    pub fn embedding_indices(&self, anchors: &[usize]) -> Vec<usize> {
        anchors
            .iter()
            .flat_map(|&i| (0..self.dim_embedding).map(move |k| self.embedding_index(i, k)))
            .collect()
    }

    pub fn score_indices(&self, anchors: &[usize]) -> Vec<usize> {
        anchors.iter().map(|&i| self.score_index(i)).collect()
    }
}

/// One anchor's slice of the head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorView<T> {
    pub anchor: usize,
    pub offsets: [T; 4],
    pub embedding: Vec<T>,
    pub score: T,
}

/// Flattens every anchor of `out`, in anchor-index order.
pub fn flatten<T: Real>(out: &HeadOutput<T>) -> Vec<AnchorView<T>> {
    let l = out.layout();
    (0..l.anchor_count())
        .map(|i| AnchorView {
            anchor: i,
            offsets: std::array::from_fn(|j| out.offsets.data()[l.offset_index(i, j)]),
            embedding: (0..l.dim_embedding)
                .map(|k| out.embeddings.data()[l.embedding_index(i, k)])
                .collect(),
            score: out.scores.data()[l.score_index(i)],
        })
        .collect()
}

/// Inverse of [`flatten`] for a complete view list.
pub fn unflatten<T: Real>(views: &[AnchorView<T>], layout: AnchorLayout) -> Result<HeadOutput<T>, ModelError> {
    if views.len() != layout.anchor_count() {
        return Err(ModelError::AnchorCount {
            expected: layout.anchor_count(),
            found: views.len(),
        });
    }
    let (a, d, h, w) = (layout.num_anchor, layout.dim_embedding, layout.height, layout.width);
    let mut offsets = Tensor::zeros(vec![4 * a, h, w]);
    let mut embeddings = Tensor::zeros(vec![a * d, h, w]);
    let mut scores = Tensor::zeros(vec![a, h, w]);
    for v in views {
        for j in 0..4 {
            offsets.data_mut()[layout.offset_index(v.anchor, j)] = v.offsets[j];
        }
        for k in 0..d {
            embeddings.data_mut()[layout.embedding_index(v.anchor, k)] = v.embedding[k];
        }
        scores.data_mut()[layout.score_index(v.anchor)] = v.score;
    }
    Ok(HeadOutput {
        offsets,
        embeddings,
        scores,
    })
}

/// Views of every anchor not labeled `Ignore`, in anchor-index order.
pub fn extract_anchor_views<T: Real>(
    out: &HeadOutput<T>,
    labels: &[LabeledAnchor<T>],
) -> Result<Vec<AnchorView<T>>, ModelError> {
    let l = out.layout();
    if labels.len() != l.anchor_count() {
        return Err(ModelError::AnchorCount {
            expected: l.anchor_count(),
            found: labels.len(),
        });
    }
    Ok(flatten(out)
        .into_iter()
        .filter(|v| labels[v.anchor].label != AnchorLabel::Ignore)
        .collect())
}

const CONV_STD: f64 = 0.01;

impl<T: Real> Model<T> {
    /// Head convolutions start from `N(0, 0.01²)` with zero bias; backbone
    /// stages use He-normal weights since they are trained from scratch.
    pub fn build(config: HeadConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .layers()
            .into_iter()
            .flat_map(|(name, co, ci, k)| {
                let std = if name.starts_with("backbone") {
                    (2.0 / (ci * k * k) as f64).sqrt()
                } else {
                    CONV_STD
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                let w: Vec<T> = (0..co * ci * k * k)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect();
                [
                    NamedParam {
                        name: format!("{name}.weight"),
                        tensor: Tensor::new(vec![co, ci, k, k], w).expect("weight shape"),
                    },
                    NamedParam {
                        name: format!("{name}.bias"),
                        tensor: Tensor::zeros(vec![co]),
                    },
                ]
            })
            .collect();
        Self {
            config,
            seed,
            params,
        }
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[NamedParam<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedParam<T>] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn register(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().requiring_grad()))
            .collect()
    }

    /// Records parameters as constants (inference, no gradients).
    pub fn register_frozen(&self, tape: &Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect()
    }

    pub fn check_image(&self, shape: &[usize]) -> Result<(), ModelError> {
        let stride = self.config.stride();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(ModelError::Tensor(crate::error::TensorError::Invalid {
                op: "forward",
                msg: format!("image must be [3, H, W], got {shape:?}"),
            }));
        }
        let (h, w) = (shape[1], shape[2]);
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return Err(ModelError::Divisibility { h, w, stride });
        }
        Ok(())
    }

    /// Forward pass using parameter handles from [`Model::register`].
    pub fn forward_on(&self, tape: &Tape<T>, params: &[Var], image: Var) -> Result<HeadVars, ModelError> {
        self.check_image(&tape.shape(image))?;
        let down = Conv2dParams { stride: 2, padding: 1 };
        let same3 = Conv2dParams { stride: 1, padding: 1 };
        let point = Conv2dParams { stride: 1, padding: 0 };
        let stages = self.config.backbone_widths.len() + 1;
        let mut x = image;
        for s in 0..stages {
            x = tape.relu(tape.conv2d(x, params[2 * s], params[2 * s + 1], down)?);
        }
        let p = 2 * stages;
        let shared = tape.relu(tape.conv2d(x, params[p], params[p + 1], same3)?);
        let offsets = tape.conv2d(shared, params[p + 2], params[p + 3], point)?;
        let embeddings = tape.conv2d(shared, params[p + 4], params[p + 5], point)?;
        let cls_in = match self.config.classifier_input {
            ClassifierInput::Embedding => embeddings,
            ClassifierInput::Shared => shared,
        };
        let logits = tape.conv2d(cls_in, params[p + 6], params[p + 7], point)?;
        Ok(HeadVars {
            offsets,
            embeddings,
            scores: tape.logistic(logits),
        })
    }

    pub fn forward(&self, image: &Tensor<T>) -> Result<HeadOutput<T>, ModelError> {
        let tape = Tape::new();
        let params = self.register_frozen(&tape);
        let x = tape.constant(image.clone());
        let v = self.forward_on(&tape, &params, x)?;
        let out = HeadOutput {
            offsets: tape.value(v.offsets).clone(),
            embeddings: tape.value(v.embeddings).clone(),
            scores: tape.value(v.scores).clone(),
        };
        Ok(out)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            seed: self.seed,
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }
}

const MAGIC: &[u8; 8] = b"SRPNCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: HeadConfig,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl<T: Real> Model<T> {
    /// Checkpoint layout: magic `SRPNCKPT`, `u32` version, `u64` header
    /// length, JSON header (config, seed, tensor names and shapes), then every
    /// tensor as little-endian `f64` in header order.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            config: self.config.clone(),
            seed: self.seed,
            tensors: self
                .params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(ModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let expected = Model::<T>::build(header.config.clone(), 0);
        let mut cursor = 20 + hlen;
        let mut params = Vec::with_capacity(header.tensors.len());
        if header.tensors.len() != expected.params.len() {
            return Err(bad("tensor count does not match config"));
        }
        for (entry, want) in header.tensors.iter().zip(&expected.params) {
            if entry.name != want.name || entry.shape != want.tensor.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} {:?} does not match config ({} {:?})",
                    entry.name,
                    entry.shape,
                    want.name,
                    want.tensor.shape()
                )));
            }
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(cursor..cursor + 8 * n)
                .ok_or_else(|| bad("truncated tensor data"))?;
            cursor += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect();
            params.push(NamedParam {
                name: entry.name.clone(),
                tensor: Tensor::new(entry.shape.clone(), data)?,
            });
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            seed: header.seed,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_checkpoint_bytes(&bytes)
    }
}
