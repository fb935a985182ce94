//! Two-tower encoder with a learned temperature.
//!
//! Each tower is `affine → tanh → affine` followed by row L2 normalization,
//! so both modalities land on the same unit sphere and a class is predicted
//! by a temperature-scaled softmax over cosine similarities.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::rng;

/// Layer sizes of both towers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub d_img: usize,
    pub d_txt: usize,
    pub hidden: usize,
    pub d_emb: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            d_img: 32,
            d_txt: 24,
            hidden: 64,
            d_emb: 16,
        }
    }
}

/// Location of one weight block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl Architecture {
    /// Blocks in storage order: image `W1, b1, W2, b2`, then text `W1, b1, W2, b2`.
    pub fn blocks(&self) -> [Block; 8] {
        let mut offset = 0;
        let mut next = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        [
            next(self.d_img, self.hidden),
            next(1, self.hidden),
            next(self.hidden, self.d_emb),
            next(1, self.d_emb),
            next(self.d_txt, self.hidden),
            next(1, self.hidden),
            next(self.hidden, self.d_emb),
            next(1, self.d_emb),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(Block::len).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.d_img == 0 || self.d_txt == 0 || self.hidden == 0 || self.d_emb == 0 {
            return Err(Error::Config(format!("architecture has a zero dimension: {self:?}")));
        }
        Ok(())
    }
}

/// Flat view of every trainable tower weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParameterVector(Vec<f64>);

impl ParameterVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn sub(&self, other: &ParameterVector) -> Result<Vec<f64>> {
        check_same_len(self.len(), other.len())?;
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }
}

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Contract(format!("parameter vectors differ in length: {a} vs {b}")))
    }
}

/// Unit-norm image and text embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub image: Tensor,
    pub text: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    arch: Architecture,
    seed: u64,
    params: ParameterVector,
    log_temperature: f64,
}

/// Default initial temperature, `τ = 0.07`.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

impl TwoTowerModel {
    /// Seeded uniform `(−1/√fan_in, 1/√fan_in)` initialization for every
    /// block; biases share the fan-in of their layer.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r = rng::stream(seed, "model-init", 0);
        let mut params = vec![0.0; arch.num_params()];
        let blocks = arch.blocks();
        for (i, block) in blocks.iter().enumerate() {
            let fan_in = if i % 2 == 0 { block.rows } else { blocks[i - 1].rows };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut params[block.range()] {
                *v = r.random_range(-bound..bound);
            }
        }
        Ok(Self {
            arch,
            seed,
            params: ParameterVector(params),
            log_temperature: INITIAL_TEMPERATURE.ln(),
        })
    }

    pub fn from_parts(
        arch: Architecture,
        seed: u64,
        params: ParameterVector,
        log_temperature: f64,
    ) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Contract(format!(
                "architecture needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if !log_temperature.is_finite() {
            return Err(Error::Parameter("log temperature must be finite".into()));
        }
        Ok(Self {
            arch,
            seed,
            params,
            log_temperature,
        })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParameterVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterVector {
        &mut self.params
    }

    pub fn log_temperature(&self) -> f64 {
        self.log_temperature
    }

    pub fn set_log_temperature(&mut self, value: f64) {
        self.log_temperature = value;
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    fn block_tensor(&self, block: Block) -> Tensor {
        Tensor::matrix(block.rows, block.cols, self.params.0[block.range()].to_vec())
            .expect("block layout matches parameter vector")
    }

    fn tower_forward(&self, input: &Tensor, blocks: &[Block]) -> Result<Tensor> {
        let h = input
            .matmul(&self.block_tensor(blocks[0]))?
            .add_row(&self.block_tensor(blocks[1]))?
            .map(f64::tanh);
        h.matmul(&self.block_tensor(blocks[2]))?
            .add_row(&self.block_tensor(blocks[3]))
    }

    /// Raw (pre-normalization) image-tower output.
    pub fn image_features(&self, images: &Tensor) -> Result<Tensor> {
        check_input(images, self.arch.d_img, "image")?;
        self.tower_forward(images, &self.arch.blocks()[0..4])
    }

    pub fn text_features(&self, texts: &Tensor) -> Result<Tensor> {
        check_input(texts, self.arch.d_txt, "text")?;
        self.tower_forward(texts, &self.arch.blocks()[4..8])
    }

    pub fn encode_images(&self, images: &Tensor) -> Result<Tensor> {
        self.image_features(images)?.l2_normalize_rows()
    }

    pub fn encode_texts(&self, texts: &Tensor) -> Result<Tensor> {
        self.text_features(texts)?.l2_normalize_rows()
    }

    pub fn encode(&self, images: &Tensor, texts: &Tensor) -> Result<EmbeddingBatch> {
        Ok(EmbeddingBatch {
            image: self.encode_images(images)?,
            text: self.encode_texts(texts)?,
        })
    }

    /// Class distribution for one image against `K` class prompts:
    /// `softmax(cos(z, wₖ) / τ)`.
    pub fn predict(&self, image: &[f64], class_texts: &Tensor) -> Result<Vec<f64>> {
        if class_texts.rows() == 0 || class_texts.is_empty() {
            return Err(Error::Contract("prediction needs at least one class".into()));
        }
        let z = self.encode_images(&Tensor::row(image))?;
        let w = self.encode_texts(class_texts)?;
        Ok(z.matmul_t(&w)?.softmax_rows(self.temperature())?.into_data())
    }

    /// Argmax class index for every image row, against pre-encoded class
    /// text embeddings.
    pub fn classify(&self, images: &Tensor, class_embeddings: &Tensor) -> Result<Vec<usize>> {
        let z = self.encode_images(images)?;
        let cos = z.matmul_t(class_embeddings)?;
        Ok((0..cos.rows())
            .map(|i| argmax(cos.row_slice(i)))
            .collect())
    }

    /// Registers every weight block as a parameter leaf of `g`. With
    /// `train_temperature`, the log temperature becomes a leaf as well.
    pub fn bind(&self, g: &mut Graph, train_temperature: bool) -> BoundModel {
        let blocks = self.arch.blocks();
        let leaves = blocks.map(|b| g.param(self.block_tensor(b)));
        let log_temperature = train_temperature.then(|| g.param(Tensor::scalar(self.log_temperature)));
        BoundModel {
            arch: self.arch,
            leaves,
            log_temperature,
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_input(x: &Tensor, expected: usize, what: &str) -> Result<()> {
    if x.shape().len() != 2 || x.cols() != expected {
        return Err(Error::Contract(format!(
            "{what} input has shape {:?}, tower expects {expected} columns",
            x.shape()
        )));
    }
    Ok(())
}

/// A model whose weights live as leaves in a particular [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundModel {
    arch: Architecture,
    leaves: [NodeId; 8],
    log_temperature: Option<NodeId>,
}

impl BoundModel {
    fn tower(&self, g: &mut Graph, input: NodeId, leaves: &[NodeId]) -> Result<NodeId> {
        let h = g.matmul(input, leaves[0])?;
        let h = g.add_row(h, leaves[1])?;
        let h = g.tanh(h);
        let h = g.matmul(h, leaves[2])?;
        let h = g.add_row(h, leaves[3])?;
        g.l2_normalize_rows(h)
    }

    pub fn encode_images(&self, g: &mut Graph, images: &Tensor) -> Result<NodeId> {
        check_input(images, self.arch.d_img, "image")?;
        let x = g.constant(images.clone());
        self.tower(g, x, &self.leaves[0..4])
    }

    pub fn encode_texts(&self, g: &mut Graph, texts: &Tensor) -> Result<NodeId> {
        check_input(texts, self.arch.d_txt, "text")?;
        let x = g.constant(texts.clone());
        self.tower(g, x, &self.leaves[4..8])
    }

    /// Weight leaves in storage order.
    pub fn leaves(&self) -> &[NodeId; 8] {
        &self.leaves
    }

    pub fn log_temperature(&self) -> Option<NodeId> {
        self.log_temperature
    }

    /// Gathers leaf gradients into one vector laid out like
    /// [`TwoTowerModel::params`]. Leaves the root does not reach contribute
    /// zeros.
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut out = vec![0.0; self.arch.num_params()];
        for (leaf, block) in self.leaves.iter().zip(self.arch.blocks()) {
            if let Some(g) = grads.get(*leaf) {
                out[block.range()].copy_from_slice(g.data());
            }
        }
        out
    }

    pub fn temperature_gradient(&self, grads: &Gradients) -> f64 {
        self.log_temperature
            .and_then(|id| grads.get(id))
            .map_or(0.0, |t| t.data()[0])
    }

    /// Adds `Σ w·(θ − anchor)²` over the whole parameter vector as one
    /// scalar node.
    pub fn weighted_sq_dist(
        &self,
        g: &mut Graph,
        anchor: &ParameterVector,
        weights: &[f64],
    ) -> Result<NodeId> {
        check_same_len(anchor.len(), self.arch.num_params())?;
        check_same_len(weights.len(), self.arch.num_params())?;
        let mut total: Option<NodeId> = None;
        for (leaf, block) in self.leaves.iter().zip(self.arch.blocks()) {
            let a = Tensor::matrix(block.rows, block.cols, anchor.as_slice()[block.range()].to_vec())?;
            let w = Tensor::matrix(block.rows, block.cols, weights[block.range()].to_vec())?;
            let term = g.weighted_sq_dist(*leaf, &a, &w)?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        Ok(total.expect("architecture has blocks"))
    }
}

/// Frozen copy of a model plus the point in the task sequence it was taken.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    model: TwoTowerModel,
    task: usize,
    step: usize,
}

impl ModelSnapshot {
    pub fn new(model: TwoTowerModel, task: usize, step: usize) -> Self {
        Self { model, task, step }
    }

    pub fn model(&self) -> &TwoTowerModel {
        &self.model
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn params(&self) -> &ParameterVector {
        self.model.params()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch: self.model.arch,
            seed: self.model.seed,
            params: self.model.params.0.clone(),
            log_temperature: self.model.log_temperature,
            metadata: SnapshotMetadata {
                task: self.task,
                step: self.step,
            },
        }
    }

    pub fn from_checkpoint(c: Checkpoint) -> Result<Self> {
        let model = TwoTowerModel::from_parts(
            c.arch,
            c.seed,
            ParameterVector(c.params),
            c.log_temperature,
        )?;
        Ok(Self::new(model, c.metadata.task, c.metadata.step))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        Self::from_checkpoint(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMetadata {
    pub task: usize,
    pub step: usize,
}

/// On-disk checkpoint. Floats are written in shortest round-trip form and
/// parsed with exact rounding, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub seed: u64,
    pub params: Vec<f64>,
    pub log_temperature: f64,
    pub metadata: SnapshotMetadata,
}

/// `(1 − w)·θ_a + w·θ_b`, including the log temperature.
pub fn interpolate(a: &ModelSnapshot, b: &ModelSnapshot, w: f64) -> Result<TwoTowerModel> {
    if a.model.arch != b.model.arch {
        return Err(Error::Contract(format!(
            "cannot interpolate {:?} with {:?}",
            a.model.arch, b.model.arch
        )));
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Contract(format!("interpolation weight {w} outside [0, 1]")));
    }
    let blend = |x: f64, y: f64| {
        if w == 0.0 {
            x
        } else if w == 1.0 {
            y
        } else {
            (1.0 - w) * x + w * y
        }
    };
    let params = a
        .params()
        .as_slice()
        .iter()
        .zip(b.params().as_slice())
        .map(|(&x, &y)| blend(x, y))
        .collect();
    TwoTowerModel::from_parts(
        a.model.arch,
        a.model.seed,
        ParameterVector(params),
        blend(a.model.log_temperature, b.model.log_temperature),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff, max_relative_error};
    use proptest::prelude::*;
    use rand::Rng as RandRng;

    fn random_inputs(seed: u64, rows: usize, cols: usize) -> Tensor {
        let mut r = rng::stream(seed, "model-test-input", cols as u64);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| RandRng::random_range(&mut r, -1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn encode_outputs_unit_rows() {
        let m = TwoTowerModel::new(Architecture::default(), 1).unwrap();
        let e = m
            .encode(&random_inputs(1, 10, 32), &random_inputs(2, 10, 24))
            .unwrap();
        for t in [&e.image, &e.text] {
            for n in t.row_norms().unwrap() {
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let m = TwoTowerModel::new(Architecture::default(), 4).unwrap();
        let x = random_inputs(3, 5, 32);
        assert_eq!(m.encode_images(&x).unwrap(), m.encode_images(&x).unwrap());
        let twin = random_inputs(3, 5, 32);
        assert_eq!(m.encode_images(&x).unwrap(), m.encode_images(&twin).unwrap());
    }

    #[test]
    fn zero_final_layer_is_degenerate() {
        let mut m = TwoTowerModel::new(Architecture::default(), 5).unwrap();
        let blocks = m.arch().blocks();
        for b in [blocks[2], blocks[3]] {
            m.params_mut().as_mut_slice()[b.range()].fill(0.0);
        }
        let err = m.encode_images(&random_inputs(4, 3, 32)).unwrap_err();
        assert!(matches!(err, Error::DegenerateInput(_)));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = TwoTowerModel::new(Architecture::default(), 5).unwrap();
        assert!(matches!(
            m.encode_images(&random_inputs(1, 2, 31)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn predict_single_class_and_symmetry() {
        let m = TwoTowerModel::new(Architecture::default(), 6).unwrap();
        let image = random_inputs(5, 1, 32);
        let texts = random_inputs(6, 1, 24);
        assert_eq!(m.predict(image.data(), &texts).unwrap(), vec![1.0]);
        let two = Tensor::from_rows(&[texts.row_slice(0), texts.row_slice(0)]).unwrap();
        assert_eq!(m.predict(image.data(), &two).unwrap(), vec![0.5, 0.5]);
        let none = Tensor::new(vec![0, 24], vec![]).unwrap();
        assert!(matches!(m.predict(image.data(), &none), Err(Error::Contract(_))));
    }

    #[test]
    fn predict_matches_direct_formula() {
        let m = TwoTowerModel::new(Architecture::default(), 7).unwrap();
        let image = random_inputs(7, 1, 32);
        let texts = random_inputs(8, 3, 24);
        let z = m.encode_images(&image).unwrap();
        let w = m.encode_texts(&texts).unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|k| {
                let cos: f64 = z.row_slice(0).iter().zip(w.row_slice(k)).map(|(a, b)| a * b).sum();
                (cos / m.temperature()).exp()
            })
            .collect();
        let total: f64 = logits.iter().sum();
        for (p, l) in m.predict(image.data(), &texts).unwrap().iter().zip(&logits) {
            assert!((p - l / total).abs() < 1e-12);
        }
        let hand = Tensor::from_rows(&[[0.9, 0.1]]).unwrap().softmax_rows(1.0).unwrap();
        let e = (0.9f64).exp() + (0.1f64).exp();
        assert!((hand.at(0, 0) - 0.9f64.exp() / e).abs() < 1e-12);
    }

    #[test]
    fn bound_gradients_match_finite_differences() {
        let arch = Architecture {
            d_img: 3,
            d_txt: 2,
            hidden: 4,
            d_emb: 3,
        };
        let m = TwoTowerModel::new(arch, 9).unwrap();
        let images = random_inputs(9, 4, 3);
        let texts = random_inputs(10, 4, 2);
        let target = Tensor::identity(4);
        let loss = |model: &TwoTowerModel| -> Result<(f64, Vec<f64>)> {
            let mut g = Graph::new();
            let b = model.bind(&mut g, false);
            let z = b.encode_images(&mut g, &images)?;
            let w = b.encode_texts(&mut g, &texts)?;
            let wt = g.transpose(w)?;
            let s = g.matmul(z, wt)?;
            let ls = g.log_softmax_rows(s, 0.5)?;
            let root = g.cross_entropy_rows(&target, ls)?;
            let grads = g.backward(root)?;
            Ok((g.value(root).item()?, b.flat_gradient(&grads)))
        };
        let (_, analytic) = loss(&m).unwrap();
        let numeric = finite_diff(
            |theta| {
                let probe = TwoTowerModel::from_parts(arch, 9, ParameterVector::new(theta.to_vec()), m.log_temperature())?;
                Ok(loss(&probe)?.0)
            },
            m.params().as_slice(),
            1e-5,
        )
        .unwrap();
        assert!(max_relative_error(&analytic, &numeric, 1e-6) < 1e-5);
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let a = ModelSnapshot::new(TwoTowerModel::new(Architecture::default(), 1).unwrap(), 0, 0);
        let b = ModelSnapshot::new(TwoTowerModel::new(Architecture::default(), 2).unwrap(), 1, 10);
        assert_eq!(interpolate(&a, &b, 0.0).unwrap().params(), a.params());
        assert_eq!(interpolate(&a, &b, 1.0).unwrap().params(), b.params());
        let mid = interpolate(&a, &b, 0.5).unwrap();
        for ((m, x), y) in mid.params().as_slice().iter().zip(a.params().as_slice()).zip(b.params().as_slice()) {
            assert_eq!(*m, 0.5 * x + 0.5 * y);
        }
    }

    #[test]
    fn interpolation_rejects_mismatched_architectures() {
        let a = ModelSnapshot::new(TwoTowerModel::new(Architecture::default(), 1).unwrap(), 0, 0);
        let other = Architecture {
            hidden: 8,
            ..Architecture::default()
        };
        let b = ModelSnapshot::new(TwoTowerModel::new(other, 2).unwrap(), 0, 0);
        assert!(matches!(interpolate(&a, &b, 0.5), Err(Error::Contract(_))));
        assert!(interpolate(&a, &a, 1.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = TwoTowerModel::new(Architecture::default(), 77).unwrap();
        let snap = ModelSnapshot::new(m, 3, 300);
        let back = ModelSnapshot::from_json(&snap.to_json()).unwrap();
        assert_eq!(back, snap);
        let bits = |s: &ModelSnapshot| s.params().as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&snap));
    }

    #[test]
    fn checkpoint_rejects_unknown_fields() {
        let m = TwoTowerModel::new(Architecture::default(), 1).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&ModelSnapshot::new(m, 0, 0).to_json()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(matches!(ModelSnapshot::from_json(&v.to_string()), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn checkpoint_floats_survive_json(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
            let text = serde_json::to_string(&values).unwrap();
            let back: Vec<f64> = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn interpolation_is_symmetric(w in 0.0f64..=1.0, sa in 0u64..50, sb in 50u64..100) {
            let a = ModelSnapshot::new(TwoTowerModel::new(Architecture::default(), sa).unwrap(), 0, 0);
            let b = ModelSnapshot::new(TwoTowerModel::new(Architecture::default(), sb).unwrap(), 0, 0);
            let ab = interpolate(&a, &b, w).unwrap();
            let ba = interpolate(&b, &a, 1.0 - w).unwrap();
            for (x, y) in ab.params().as_slice().iter().zip(ba.params().as_slice()) {
                prop_assert!((x - y).abs() <= 1e-15 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn predict_ignores_image_feature_scale(scale in 0.01f64..100.0, seed in 0u64..20) {
            let m = TwoTowerModel::new(Architecture::default(), seed).unwrap();
            let image = random_inputs(seed, 1, 32);
            let texts = random_inputs(seed + 1, 4, 24);
            let raw = m.image_features(&image).unwrap();
            let w = m.encode_texts(&texts).unwrap();
            let p1 = raw.l2_normalize_rows().unwrap().matmul_t(&w).unwrap().softmax_rows(m.temperature()).unwrap();
            let p2 = raw.map(|v| v * scale).l2_normalize_rows().unwrap().matmul_t(&w).unwrap().softmax_rows(m.temperature()).unwrap();
            for (a, b) in p1.data().iter().zip(p2.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
