//! Contrastive distillation, image-text alignment and label-smoothed
//! cross-entropy.
//!
//! Rows and columns of a contrastive matrix become distributions through a
//! softmax at the owning model's temperature. Graph-level functions
//! (`*_node`) build differentiable losses; the plain functions evaluate the
//! same quantities on values for monitoring and tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::model::EmbeddingBatch;

/// `B × B` cosine similarities between the image and text embeddings of one
/// batch: entry `(i, j)` is `cos(zᵢ, wⱼ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveMatrix(Tensor);

impl ContrastiveMatrix {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 || values.rows() != values.cols() {
            return Err(Error::Contract(format!(
                "contrastive matrix must be square, got {:?}",
                values.shape()
            )));
        }
        Ok(Self(values))
    }

    pub fn from_embeddings(e: &EmbeddingBatch) -> Result<Self> {
        if e.image.rows() != e.text.rows() {
            return Err(Error::Contract(format!(
                "batch mismatch: {} image rows vs {} text rows",
                e.image.rows(),
                e.text.rows()
            )));
        }
        Self::new(e.image.matmul_t(&e.text)?)
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.rows()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose().expect("square matrix"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Contrastive distillation scale.
    pub alpha: f64,
    /// Image-text alignment scale.
    pub beta: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.25,
            label_smoothing: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing must be in [0, 1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Whether any synthetic-batch term contributes to the gradient.
    pub fn distills(&self) -> bool {
        self.alpha != 0.0 || self.beta != 0.0
    }
}

/// `z · wᵀ` on graph nodes.
pub fn contrastive_matrix_node(g: &mut Graph, z: NodeId, w: NodeId) -> Result<NodeId> {
    let (bz, bw) = (g.value(z).rows(), g.value(w).rows());
    if bz != bw {
        return Err(Error::Contract(format!(
            "batch mismatch: {bz} image rows vs {bw} text rows"
        )));
    }
    let wt = g.transpose(w)?;
    g.matmul(z, wt)
}

fn check_batch(b: usize) -> Result<()> {
    if b == 0 {
        Err(Error::Contract("empty batch".into()))
    } else {
        Ok(())
    }
}

/// `KL(teacher rows ‖ student rows) + KL(teacher cols ‖ student cols)`, each
/// averaged over the batch.
pub fn cd_loss_node(
    g: &mut Graph,
    student: NodeId,
    teacher: &ContrastiveMatrix,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<NodeId> {
    let b = teacher.batch_size();
    check_batch(b)?;
    if g.value(student).shape() != teacher.values().shape() {
        return Err(Error::Contract(format!(
            "student matrix {:?} and teacher matrix {:?} differ",
            g.value(student).shape(),
            teacher.values().shape()
        )));
    }
    let p_rows = teacher.values().softmax_rows(tau_teacher)?;
    let p_cols = teacher.transpose().values().softmax_rows(tau_teacher)?;
    let log_rows = g.log_softmax_rows(student, tau_student)?;
    let row_term = g.kl_rows_log(&p_rows, log_rows)?;
    let st = g.transpose(student)?;
    let log_cols = g.log_softmax_rows(st, tau_student)?;
    let col_term = g.kl_rows_log(&p_cols, log_cols)?;
    g.add(row_term, col_term)
}

/// Row and column KL against the identity alignment matrix, i.e. the mean
/// negative log of the diagonal softmax entries in both directions.
pub fn ita_loss_node(g: &mut Graph, student: NodeId, tau_student: f64) -> Result<NodeId> {
    let b = g.value(student).rows();
    check_batch(b)?;
    let eye = Tensor::identity(b);
    let log_rows = g.log_softmax_rows(student, tau_student)?;
    let row_term = g.cross_entropy_rows(&eye, log_rows)?;
    let st = g.transpose(student)?;
    let log_cols = g.log_softmax_rows(st, tau_student)?;
    let col_term = g.cross_entropy_rows(&eye, log_cols)?;
    g.add(row_term, col_term)
}

/// `(1 − ε)·onehot + ε/K` for each label.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, smoothing: f64) -> Result<Tensor> {
    if num_classes == 0 {
        return Err(Error::Contract("no classes".into()));
    }
    let mut t = Tensor::filled(labels.len(), num_classes, smoothing / num_classes as f64);
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::Contract(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        t.data_mut()[i * num_classes + y] += 1.0 - smoothing;
    }
    Ok(t)
}

/// Label-smoothed cross-entropy on `cos(z, wₖ)/τ` logits.
pub fn ce_loss_node(
    g: &mut Graph,
    cosines: NodeId,
    labels: &[usize],
    tau: f64,
    smoothing: f64,
) -> Result<NodeId> {
    let (b, k) = (g.value(cosines).rows(), g.value(cosines).cols());
    if labels.len() != b {
        return Err(Error::Contract(format!("{} labels for {b} rows", labels.len())));
    }
    check_batch(b)?;
    let target = smoothed_targets(labels, k, smoothing)?;
    let log_p = g.log_softmax_rows(cosines, tau)?;
    g.cross_entropy_rows(&target, log_p)
}

/// Value-level `cd_loss`.
pub fn cd_loss(
    student: &ContrastiveMatrix,
    teacher: &ContrastiveMatrix,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.values().clone());
    let root = cd_loss_node(&mut g, s, teacher, tau_student, tau_teacher)?;
    g.value(root).item()
}

/// Value-level `ita_loss`.
pub fn ita_loss(student: &ContrastiveMatrix, tau_student: f64) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(student.values().clone());
    let root = ita_loss_node(&mut g, s, tau_student)?;
    g.value(root).item()
}

/// Mean over the batch of `−Σ q·log p`, where `probabilities` holds one
/// predicted distribution per row and `q` is the smoothed target.
pub fn ce_loss(probabilities: &Tensor, labels: &[usize], smoothing: f64) -> Result<f64> {
    if labels.len() != probabilities.rows() {
        return Err(Error::Contract(format!(
            "{} labels for {} rows",
            labels.len(),
            probabilities.rows()
        )));
    }
    check_batch(labels.len())?;
    let target = smoothed_targets(labels, probabilities.cols(), smoothing)?;
    let mut g = Graph::new();
    let p = g.constant(probabilities.clone());
    let log_p = g.log(p, crate::autodiff::EPS_PROB);
    let root = g.cross_entropy_rows(&target, log_p)?;
    g.value(root).item()
}

/// `L_CE + α·L_CD + β·L_ITA`. The consolidation term is added separately
/// by the trainer.
pub fn total_loss(ce: f64, cd: f64, ita: f64, weights: &LossWeights) -> f64 {
    ce + weights.alpha * cd + weights.beta * ita
}

/// Mean row entropy of a row-stochastic matrix.
fn mean_row_entropy(p: &Tensor) -> f64 {
    let total: f64 = p
        .data()
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -v * v.ln())
        .sum();
    total / p.rows().max(1) as f64
}

/// Entropy of the teacher's row and column distributions, averaged over
/// the batch like the KL terms.
pub fn teacher_entropy(teacher: &ContrastiveMatrix, tau_teacher: f64) -> Result<f64> {
    let rows = teacher.values().softmax_rows(tau_teacher)?;
    let cols = teacher.transpose().values().softmax_rows(tau_teacher)?;
    Ok(mean_row_entropy(&rows) + mean_row_entropy(&cols))
}

/// Cross-entropy between teacher and student distributions,
/// `KL(teacher ‖ student) + H(teacher)`, rows plus columns. Monitoring only.
pub fn distill_cross_entropy(
    student: &ContrastiveMatrix,
    teacher: &ContrastiveMatrix,
    tau_student: f64,
    tau_teacher: f64,
) -> Result<f64> {
    Ok(cd_loss(student, teacher, tau_student, tau_teacher)? + teacher_entropy(teacher, tau_teacher)?)
}
