//! The layered backbone and its transformation into a partitioned
//! classifier: layer extraction, network-head replacement, and the
//! extractor/classifier split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowdata::FlowRecord;
use crate::nncore::layers::{self, argmax, linear};
use crate::nncore::network::{names, residual_block};
use crate::nncore::{ArchSpec, Matrix, ParamSet};
use crate::seed::{self, Stream};

pub const HEAD_INIT_STD: f64 = 0.02;

/// Strictly increasing indices of the layers kept by [`layer_extract`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerIndexSet(Vec<usize>);

impl LayerIndexSet {
    pub fn new(indices: Vec<usize>, source_depth: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Validation("layer index set is empty".into()));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Validation(format!(
                    "layer indices must be strictly increasing and unique, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= source_depth) {
            return Err(Error::Validation(format!("layer index {bad} out of range for depth {source_depth}")));
        }
        Ok(Self(indices))
    }

    pub fn all(depth: usize) -> Self {
        Self((0..depth).collect())
    }

    /// Parses `"0-4,6,7"` style lists.
    pub fn parse(text: &str, source_depth: usize) -> Result<Self> {
        let mut out = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let num = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Validation(format!("bad layer index `{s}`")))
            };
            match part.split_once('-') {
                Some((a, b)) => {
                    let (a, b) = (num(a)?, num(b)?);
                    if a > b {
                        return Err(Error::Validation(format!("bad layer range `{part}`")));
                    }
                    out.extend(a..=b);
                }
                None => out.push(num(part)?),
            }
        }
        Self::new(out, source_depth)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Residual block `h + W2·tanh(W1·h + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub fc1_weight: Matrix,
    pub fc1_bias: Matrix,
    pub fc2_weight: Matrix,
    pub fc2_bias: Matrix,
}

impl Block {
    pub fn param_count(&self) -> usize {
        self.fc1_weight.len() + self.fc1_bias.len() + self.fc2_weight.len() + self.fc2_bias.len()
    }

    fn forward(&self, h: &Matrix) -> Result<Matrix> {
        residual_block(h, &self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias).map(|(o, _)| o)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub depth: usize,
    /// Standard deviation of the token embedding table.
    pub embedding_std: f64,
}

/// Token embedding plus an ordered stack of residual blocks. Stands in for a
/// pretrained layered model; weights come from a seeded initializer.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn random(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let BackboneConfig {
            vocab_size,
            d_model,
            hidden,
            depth,
            embedding_std,
        } = *config;
        if vocab_size == 0 || d_model == 0 || hidden == 0 || depth == 0 {
            return Err(Error::config("model", "vocab_size, d_model, hidden and depth must be positive"));
        }
        let mut rng = seed::stream_rng(seed, Stream::Backbone, 0, 0);
        let embedding = Matrix::random_normal(vocab_size, d_model, embedding_std, &mut rng);
        let blocks = (0..depth)
            .map(|_| Block {
                fc1_weight: Matrix::random_normal(d_model, hidden, (1.0 / d_model as f64).sqrt(), &mut rng),
                fc1_bias: Matrix::zeros(1, hidden),
                fc2_weight: Matrix::random_normal(hidden, d_model, (1.0 / hidden as f64).sqrt(), &mut rng),
                fc2_bias: Matrix::zeros(1, d_model),
            })
            .collect();
        Ok(Self { embedding, blocks })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn hidden(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.fc1_weight.cols())
    }

    pub fn param_count(&self) -> usize {
        self.embedding.len() + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    fn features(&self, batch: &[&[u32]]) -> Result<Matrix> {
        let mut h = layers::mean_pool_embed(&self.embedding, batch)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

/// Keeps only the blocks named by `index`, in order; the embedding is kept.
pub fn layer_extract(backbone: &Backbone, index: &LayerIndexSet) -> Result<Backbone> {
    if let Some(&bad) = index.indices().iter().find(|&&i| i >= backbone.depth()) {
        return Err(Error::Validation(format!(
            "layer index {bad} out of range for depth {}",
            backbone.depth()
        )));
    }
    Ok(Backbone {
        embedding: backbone.embedding.clone(),
        blocks: index.indices().iter().map(|&i| backbone.blocks[i].clone()).collect(),
    })
}

/// Linear classification head: one logit per traffic class.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkHead {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl NetworkHead {
    pub fn init(d_model: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = seed::stream_rng(seed, Stream::Head, 0, 0);
        Self {
            weight: Matrix::random_normal(d_model, num_classes, HEAD_INIT_STD, &mut rng),
            bias: Matrix::zeros(1, num_classes),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        linear(features, &self.weight, &self.bias)
    }
}

/// Backbone with its network head, before the split.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadedModel {
    pub backbone: Backbone,
    pub head: NetworkHead,
}

impl HeadedModel {
    pub fn logits(&self, batch: &[&[u32]]) -> Result<Matrix> {
        self.head.logits(&self.backbone.features(batch)?)
    }
}

/// Drops whatever output head the backbone had and attaches a fresh linear
/// network head (Gaussian weights, zero bias).
pub fn attach_network_head(backbone: Backbone, num_classes: usize, seed: u64) -> Result<HeadedModel> {
    if num_classes < 2 {
        return Err(Error::config("classes", "need at least 2 classes"));
    }
    let head = NetworkHead::init(backbone.d_model(), num_classes, seed);
    Ok(HeadedModel { backbone, head })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub embedding: Matrix,
    pub blocks: Vec<Block>,
}

impl Extractor {
    pub fn features(&self, batch: &[&[u32]]) -> Result<Matrix> {
        let mut h = layers::mean_pool_embed(&self.embedding, batch)?;
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub blocks: Vec<Block>,
    pub head: NetworkHead,
}

impl Classifier {
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut h = features.clone();
        for b in &self.blocks {
            h = b.forward(&h)?;
        }
        self.head.logits(&h)
    }
}

/// Shape information recorded next to model checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub source_depth: usize,
    pub index: Vec<usize>,
    pub split_point: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
}

/// Compressed model split into a frozen extractor (the first `split_point`
/// blocks) and a classifier (the remaining blocks plus the head).
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedModel {
    pub extractor: Extractor,
    pub classifier: Classifier,
    pub split_point: usize,
}

/// Splits at block `split_point`; both sides must keep at least one block.
pub fn split(model: HeadedModel, split_point: usize) -> Result<PartitionedModel> {
    let depth = model.backbone.depth();
    if split_point == 0 || split_point >= depth {
        return Err(Error::Validation(format!(
            "split point {split_point} must lie strictly inside (0, {depth})"
        )));
    }
    let HeadedModel { backbone, head } = model;
    let mut blocks = backbone.blocks;
    let classifier_blocks = blocks.split_off(split_point);
    Ok(PartitionedModel {
        extractor: Extractor {
            embedding: backbone.embedding,
            blocks,
        },
        classifier: Classifier {
            blocks: classifier_blocks,
            head,
        },
        split_point,
    })
}

impl PartitionedModel {
    pub fn depth(&self) -> usize {
        self.extractor.blocks.len() + self.classifier.blocks.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.extractor.embedding.rows()
    }

    pub fn d_model(&self) -> usize {
        self.extractor.embedding.cols()
    }

    pub fn hidden(&self) -> usize {
        self.extractor.blocks[0].fc1_weight.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.head.num_classes()
    }

    pub fn arch(&self) -> ArchSpec {
        ArchSpec {
            vocab_size: self.vocab_size(),
            d_model: self.d_model(),
            hidden: self.hidden(),
            num_blocks: self.depth(),
            num_classes: self.num_classes(),
        }
    }

    pub fn logits(&self, batch: &[&[u32]]) -> Result<Matrix> {
        self.classifier.logits(&self.extractor.features(batch)?)
    }

    /// Argmax over one forward pass; ties go to the lowest class.
    pub fn predict(&self, record: &FlowRecord) -> Result<usize> {
        let logits = self.logits(&[record.tokens.as_slice()])?;
        Ok(argmax(logits.row(0)))
    }

    pub fn predict_batch(&self, batch: &[&[u32]]) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }

    /// Global indices of the classifier blocks.
    pub fn classifier_block_indices(&self) -> std::ops::Range<usize> {
        self.split_point..self.depth()
    }

    fn block(&self, i: usize) -> &Block {
        if i < self.split_point {
            &self.extractor.blocks[i]
        } else {
            &self.classifier.blocks[i - self.split_point]
        }
    }

    fn block_mut(&mut self, i: usize) -> &mut Block {
        if i < self.split_point {
            &mut self.extractor.blocks[i]
        } else {
            &mut self.classifier.blocks[i - self.split_point]
        }
    }

    /// Every parameter, named for the network executor. Embedding and blocks
    /// are frozen; the head is trainable.
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(names::EMBEDDING, self.extractor.embedding.clone(), true);
        for i in 0..self.depth() {
            let b = self.block(i);
            p.insert(names::fc1_weight(i), b.fc1_weight.clone(), true);
            p.insert(names::fc1_bias(i), b.fc1_bias.clone(), true);
            p.insert(names::fc2_weight(i), b.fc2_weight.clone(), true);
            p.insert(names::fc2_bias(i), b.fc2_bias.clone(), true);
        }
        p.insert(names::HEAD_WEIGHT, self.classifier.head.weight.clone(), false);
        p.insert(names::HEAD_BIAS, self.classifier.head.bias.clone(), false);
        p
    }

    /// Rebuilds a model of this shape from named parameters.
    pub fn from_params(params: &ParamSet, depth: usize, split_point: usize) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
        };
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            blocks.push(Block {
                fc1_weight: get(&names::fc1_weight(i))?,
                fc1_bias: get(&names::fc1_bias(i))?,
                fc2_weight: get(&names::fc2_weight(i))?,
                fc2_bias: get(&names::fc2_bias(i))?,
            });
        }
        let head = NetworkHead {
            weight: get(names::HEAD_WEIGHT)?,
            bias: get(names::HEAD_BIAS)?,
        };
        let backbone = Backbone {
            embedding: get(names::EMBEDDING)?,
            blocks,
        };
        split(HeadedModel { backbone, head }, split_point)
    }

    /// Names and shapes of the classifier weight matrices that carry LoRA.
    pub fn adapt_points(&self) -> Vec<crate::lora::AdaptPoint> {
        let mut out = Vec::new();
        for i in self.classifier_block_indices() {
            let b = self.block(i);
            out.push(crate::lora::AdaptPoint::new(names::fc1_weight(i), b.fc1_weight.shape()));
            out.push(crate::lora::AdaptPoint::new(names::fc2_weight(i), b.fc2_weight.shape()));
        }
        out
    }

    pub fn weight(&self, name: &str) -> Option<&Matrix> {
        let (i, which) = parse_weight_name(name)?;
        if i >= self.depth() {
            return None;
        }
        let b = self.block(i);
        Some(if which == 1 { &b.fc1_weight } else { &b.fc2_weight })
    }

    pub fn weight_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let (i, which) = parse_weight_name(name)?;
        if i >= self.depth() {
            return None;
        }
        let b = self.block_mut(i);
        Some(if which == 1 { &mut b.fc1_weight } else { &mut b.fc2_weight })
    }
}

fn parse_weight_name(name: &str) -> Option<(usize, u8)> {
    let rest = name.strip_prefix("blocks.")?;
    let (idx, tail) = rest.split_once('.')?;
    let which = match tail {
        "fc1.weight" => 1,
        "fc2.weight" => 2,
        _ => return None,
    };
    Some((idx.parse().ok()?, which))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(depth: usize) -> BackboneConfig {
        BackboneConfig {
            vocab_size: 16,
            d_model: 8,
            hidden: 8,
            depth,
            embedding_std: 1.0,
        }
    }

    #[test]
    fn index_set_validation() {
        assert!(LayerIndexSet::new(vec![], 4).is_err());
        assert!(LayerIndexSet::new(vec![0, 0], 4).is_err());
        assert!(LayerIndexSet::new(vec![2, 1], 4).is_err());
        assert!(LayerIndexSet::new(vec![4], 4).is_err());
        let s = LayerIndexSet::parse("0-12, 23-27", 28).unwrap();
        assert_eq!(s.len(), 18);
        assert!(LayerIndexSet::parse("0-4,3", 8).is_err());
    }

    #[test]
    fn identity_extraction() {
        let b = Backbone::random(&config(4), 1).unwrap();
        assert_eq!(layer_extract(&b, &LayerIndexSet::all(4)).unwrap(), b);
    }

    #[test]
    fn extraction_keeps_blocks_verbatim() {
        let b = Backbone::random(&config(6), 1).unwrap();
        let idx = LayerIndexSet::new(vec![0, 2, 5], 6).unwrap();
        let e = layer_extract(&b, &idx).unwrap();
        assert_eq!(e.depth(), 3);
        for (k, &i) in idx.indices().iter().enumerate() {
            assert_eq!(e.blocks[k], b.blocks[i]);
        }
        assert_eq!(e.embedding, b.embedding);
        let idx_long = LayerIndexSet::new(vec![0, 7], 8).unwrap();
        assert!(layer_extract(&b, &idx_long).is_err());
    }

    #[test]
    fn head_shape_and_determinism() {
        let b = Backbone::random(
            &BackboneConfig {
                d_model: 32,
                ..config(2)
            },
            0,
        )
        .unwrap();
        let m1 = attach_network_head(b.clone(), 20, 5).unwrap();
        let m2 = attach_network_head(b.clone(), 20, 5).unwrap();
        assert_eq!(m1.head.weight.shape(), (32, 20));
        assert_eq!(m1.head, m2.head);
        assert!(m1.head.bias.as_slice().iter().all(|&v| v == 0.0));
        assert!(attach_network_head(b, 1, 5).is_err());
    }

    #[test]
    fn split_bounds() {
        let b = Backbone::random(&config(3), 0).unwrap();
        let m = attach_network_head(b, 3, 0).unwrap();
        assert!(split(m.clone(), 0).is_err());
        assert!(split(m.clone(), 3).is_err());
        let p = split(m, 1).unwrap();
        assert_eq!((p.extractor.blocks.len(), p.classifier.blocks.len()), (1, 2));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let b = Backbone::random(&config(2), 0).unwrap();
        let mut m = attach_network_head(b, 4, 0).unwrap();
        m.head.weight = Matrix::zeros(8, 4);
        let seqs: Vec<Vec<u32>> = vec![vec![1, 2], vec![3], vec![15, 0, 7]];
        let batch: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
        let logits = m.logits(&batch).unwrap();
        assert_eq!(logits.shape(), (3, 4));
        assert!(logits.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn params_round_trip() {
        let b = Backbone::random(&config(3), 0).unwrap();
        let p = split(attach_network_head(b, 3, 0).unwrap(), 2).unwrap();
        let params = p.to_params();
        assert_eq!(PartitionedModel::from_params(&params, 3, 2).unwrap(), p);
        assert_eq!(params.trainable_names().collect::<Vec<_>>(), vec!["head.weight", "head.bias"]);
        assert_eq!(p.adapt_points().len(), 2);
        assert!(p.weight("blocks.2.fc2.weight").is_some());
        assert!(p.weight("blocks.3.fc2.weight").is_none());
        assert!(p.weight("head.weight").is_none());
    }
}
