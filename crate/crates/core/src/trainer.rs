//! Optimizer, learning-rate schedule, pretraining and the continual loop.
//!
//! Each fine-tuning step pairs one labeled task batch with one synthetic
//! batch. The two objectives are backpropagated through separate graphs so
//! the distillation gradient is available on its own; its square is the
//! per-step Fisher used by adaptive consolidation.

use std::io::Write;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::consolidation::{
    self, ConsolidationConfig, ConsolidationMode, FisherDiagonal, FisherStats,
};
use crate::error::{Error, Result};
use crate::losses::{self, ContrastiveMatrix, LossWeights};
use crate::model::{interpolate, BoundModel, ModelSnapshot, TwoTowerModel};
use crate::rng;
use crate::worldgen::{
    regenerate_for_task, task_split, ClassId, ClassPool, Dataset, GeneratorKnobs, Split,
    SyntheticSet, TaskSpec, TaskSuite, World,
};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Log-temperature bounds while the temperature is trainable.
pub const LOG_TEMPERATURE_RANGE: (f64, f64) = (-4.605_170_185_988_091, 0.0);

/// AdamW moments and step counter for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    weight_decay: f64,
}

impl OptimizerState {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected AdamW update. Weight decay shrinks `θ` by
    /// `1 − lr·wd` before the adaptive step.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                theta.len(),
                grad.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Training {
                task: 0,
                step: self.step as usize,
                message: format!("non-finite gradient at index {i}"),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if self.weight_decay != 0.0 {
                theta[i] *= decay;
            }
            theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`. Steps past `total`
/// clamp to `lr_min`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr_max;
    }
    if step >= total {
        return lr_min;
    }
    let progress = step as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Which frozen model the student distills from.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// The model after the previous task (`θ⁰` for the first task).
    #[default]
    Previous,
    /// Always the pretrained model.
    Initial,
    /// `(1 − w)·θ^{t−1} + w·θ⁰`.
    Wise(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub synthetic_batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub consolidation: ConsolidationConfig,
    pub teacher: TeacherMode,
    /// Keep per-step Fisher and distillation-gradient vectors.
    #[serde(skip)]
    pub record_diagnostics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch_size: 16,
            synthetic_batch_size: 16,
            lr: 1e-3,
            lr_min: 1e-4,
            weight_decay: 0.0,
            loss: LossWeights::default(),
            consolidation: ConsolidationConfig::default(),
            teacher: TeacherMode::Previous,
            record_diagnostics: false,
        }
    }
}

fn check_rate(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch_size < 2 || self.synthetic_batch_size < 2 {
            return Err(Error::Config("batch sizes must be at least 2".into()));
        }
        check_rate("lr", self.lr)?;
        check_rate("lr_min", self.lr_min)?;
        check_rate("weight_decay", self.weight_decay)?;
        if let TeacherMode::Wise(w) = self.teacher {
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::Config(format!("wise teacher weight {w} outside [0, 1]")));
            }
        }
        self.loss.validate()?;
        self.consolidation.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Classes per batch; each batch holds distinct classes.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub train_temperature: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2500,
            batch_size: 32,
            lr: 3e-3,
            lr_min: 3e-4,
            weight_decay: 0.0,
            train_temperature: true,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("pretraining batch size must be at least 2".into()));
        }
        check_rate("pretrain lr", self.lr)?;
        check_rate("pretrain lr_min", self.lr_min)?;
        check_rate("pretrain weight_decay", self.weight_decay)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub snapshot: ModelSnapshot,
    /// Contrastive loss per step.
    pub losses: Vec<f64>,
}

fn training_error(task: usize, step: usize, message: impl Into<String>) -> Error {
    Error::Training {
        task,
        step,
        message: message.into(),
    }
}

fn with_task(e: Error, task: usize) -> Error {
    match e {
        Error::Training { step, message, .. } => Error::Training {
            task,
            step,
            message,
        },
        other => other,
    }
}

/// Symmetric contrastive training on fresh noisy images of the base
/// classes, one image per distinct class in each batch.
pub fn pretrain(
    model: &TwoTowerModel,
    world: &World,
    base_classes: &[ClassId],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if base_classes.is_empty() {
        return Err(Error::Contract("pretraining needs at least one base class".into()));
    }
    let mut model = model.clone();
    let batch = config.batch_size.min(base_classes.len());
    let clean: Vec<Vec<f64>> = base_classes.iter().map(|&c| world.clean_image(c)).collect();
    let texts = world.class_texts(base_classes);
    let sigma = world.config().sigma_real_img;
    let mut r = rng::stream(seed, "pretrain", 0);
    let mut opt = OptimizerState::new(model.params().len(), config.weight_decay);
    let mut temp_opt = OptimizerState::new(1, 0.0);
    let mut losses = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let lr = cosine_lr(step, config.steps, config.lr, config.lr_min);
        let picks = index::sample(&mut r, base_classes.len(), batch).into_vec();
        let mut images = Vec::with_capacity(batch * world.config().d_img);
        for &p in &picks {
            for &x in &clean[p] {
                images.push(x + sigma * r.sample::<f64, _>(StandardNormal));
            }
        }
        let images = Tensor::matrix(batch, world.config().d_img, images)?;
        let batch_texts = texts.select_rows(&picks);

        let mut g = Graph::new();
        let bound = model.bind(&mut g, config.train_temperature);
        let z = bound.encode_images(&mut g, &images)?;
        let w = bound.encode_texts(&mut g, &batch_texts)?;
        let m = losses::contrastive_matrix_node(&mut g, z, w)?;
        let loss = match bound.log_temperature() {
            Some(lt) => {
                let neg = g.scale(lt, -1.0);
                let inv_tau = g.exp(neg);
                let logits = g.mul_scalar(m, inv_tau)?;
                losses::ita_loss_node(&mut g, logits, 1.0)?
            }
            None => losses::ita_loss_node(&mut g, m, model.temperature())?,
        };
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(training_error(0, step, format!("pretraining loss is {value}")));
        }
        losses.push(value);
        let grads = g.backward(loss)?;
        let flat = bound.flat_gradient(&grads);
        opt.step(model.params_mut().as_mut_slice(), &flat, lr)
            .map_err(|e| with_task(e, 0))?;
        if config.train_temperature {
            let mut lt = [model.log_temperature()];
            temp_opt.step(&mut lt, &[bound.temperature_gradient(&grads)], lr)?;
            let (lo, hi) = LOG_TEMPERATURE_RANGE;
            model.set_log_temperature(lt[0].clamp(lo, hi));
        }
    }
    Ok(PretrainOutcome {
        snapshot: ModelSnapshot::new(model, 0, config.steps),
        losses,
    })
}

/// One fine-tuning step's monitored quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub cd: f64,
    pub ita: f64,
    /// Consolidation term including its λ scale.
    pub awc: f64,
    pub distill_xent: f64,
    pub fisher_min: f64,
    pub fisher_mean: f64,
    pub fisher_max: f64,
}

pub const TRACE_COLUMNS: [&str; 10] = [
    "step",
    "lr",
    "ce",
    "cd",
    "ita",
    "awc",
    "distill_xent",
    "fisher_min",
    "fisher_mean",
    "fisher_max",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrace {
    pub task: usize,
    pub rows: Vec<TraceRow>,
}

impl TaskTrace {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "{}", TRACE_COLUMNS.join(","))?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.lr,
                r.ce,
                r.cd,
                r.ita,
                r.awc,
                r.distill_xent,
                r.fisher_min,
                r.fisher_mean,
                r.fisher_max
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Parses a trace written by [`TaskTrace::write_csv`]. Columns may come
    /// in any order; each of [`TRACE_COLUMNS`] must be present.
    pub fn from_csv(task: usize, text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Format("empty trace CSV".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let mut pos = [0usize; 10];
        for (slot, name) in pos.iter_mut().zip(TRACE_COLUMNS) {
            *slot = header
                .iter()
                .position(|h| *h == name)
                .ok_or_else(|| Error::Format(format!("trace CSV lacks column {name:?}")))?;
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |k: usize| -> Result<f64> {
                let cell = cells.get(pos[k]).ok_or_else(|| {
                    Error::Format(format!("trace row {} is missing {}", n + 1, TRACE_COLUMNS[k]))
                })?;
                cell.parse::<f64>().map_err(|e| {
                    Error::Format(format!("trace row {} column {}: {e}", n + 1, TRACE_COLUMNS[k]))
                })
            };
            rows.push(TraceRow {
                step: get(0)? as usize,
                lr: get(1)?,
                ce: get(2)?,
                cd: get(3)?,
                ita: get(4)?,
                awc: get(5)?,
                distill_xent: get(6)?,
                fisher_min: get(7)?,
                fisher_mean: get(8)?,
                fisher_max: get(9)?,
            });
        }
        Ok(Self { task, rows })
    }
}

/// Per-step vectors kept when [`TrainConfig::record_diagnostics`] is set.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    /// Fisher applied at each step (empty for modes without one).
    pub fishers: Vec<Vec<f64>>,
    /// Distillation gradient from each step's backward pass.
    pub distill_gradients: Vec<Vec<f64>>,
}

/// Inputs of one task beyond the models.
#[derive(Debug, Clone, Copy)]
pub struct TaskData<'a> {
    pub task: &'a TaskSpec,
    pub train: &'a Dataset,
    /// Text inputs of the task's class prompts, one row per class.
    pub class_texts: &'a Tensor,
    pub synthetic: &'a SyntheticSet,
}

#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub model: TwoTowerModel,
    pub trace: TaskTrace,
    pub diagnostics: Option<Diagnostics>,
}

/// Teacher embeddings of the whole synthetic set, computed once per task.
struct TeacherView {
    images: Tensor,
    texts: Tensor,
    tau: f64,
}

impl TeacherView {
    fn new(teacher: &TwoTowerModel, synthetic: &SyntheticSet) -> Result<Self> {
        let all = synthetic.all_indices();
        Ok(Self {
            images: teacher.encode_images(&synthetic.images(&all))?,
            texts: teacher.encode_texts(&synthetic.texts(&all))?,
            tau: teacher.temperature(),
        })
    }

    fn matrix(&self, idx: &[usize]) -> Result<ContrastiveMatrix> {
        ContrastiveMatrix::new(self.images.select_rows(idx).matmul_t(&self.texts.select_rows(idx))?)
    }
}

/// Graph for `α·L_CD + β·L_ITA` on one synthetic batch. Returns the root
/// (absent when both weights are zero) and the student matrix node.
fn distill_objective(
    g: &mut Graph,
    bound: &BoundModel,
    images: &Tensor,
    texts: &Tensor,
    teacher: &ContrastiveMatrix,
    tau_student: f64,
    tau_teacher: f64,
    weights: &LossWeights,
) -> Result<(Option<NodeId>, NodeId)> {
    let z = bound.encode_images(g, images)?;
    let w = bound.encode_texts(g, texts)?;
    let m = losses::contrastive_matrix_node(g, z, w)?;
    let mut root = None;
    if weights.alpha != 0.0 {
        let cd = losses::cd_loss_node(g, m, teacher, tau_student, tau_teacher)?;
        root = Some(g.scale(cd, weights.alpha));
    }
    if weights.beta != 0.0 {
        let ita = losses::ita_loss_node(g, m, tau_student)?;
        let ita = g.scale(ita, weights.beta);
        root = Some(match root {
            Some(r) => g.add(r, ita)?,
            None => ita,
        });
    }
    Ok((root, m))
}

fn sample_batch(r: &mut rng::Rng, n: usize, b: usize) -> Vec<usize> {
    index::sample(r, n, b.min(n)).into_vec()
}

/// Static Fisher: squared distillation gradients at the task's starting
/// weights, averaged over a few synthetic batches.
fn static_fisher(
    student: &TwoTowerModel,
    view: &TeacherView,
    synthetic: &SyntheticSet,
    config: &TrainConfig,
    seed: u64,
    task: usize,
) -> Result<FisherDiagonal> {
    let mut r = rng::stream(seed, "ewc-static", task as u64);
    let mut grads = Vec::with_capacity(config.consolidation.static_sample_batches);
    for _ in 0..config.consolidation.static_sample_batches {
        let idx = sample_batch(&mut r, synthetic.len(), config.synthetic_batch_size);
        let mut g = Graph::new();
        let bound = student.bind(&mut g, false);
        let (root, _) = distill_objective(
            &mut g,
            &bound,
            &synthetic.images(&idx),
            &synthetic.texts(&idx),
            &view.matrix(&idx)?,
            student.temperature(),
            view.tau,
            &config.loss,
        )?;
        grads.push(match root {
            Some(root) => bound.flat_gradient(&g.backward(root)?),
            None => vec![0.0; student.params().len()],
        });
    }
    consolidation::fisher_from_gradient_batches(&grads, config.consolidation.normalize)
}

/// Fine-tunes `student` on one task while distilling from `teacher` and
/// consolidating toward the student's starting weights.
pub fn train_task(
    student: &TwoTowerModel,
    teacher: &ModelSnapshot,
    data: TaskData<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TaskOutcome> {
    config.validate()?;
    if teacher.model().arch() != student.arch() {
        return Err(Error::Contract(format!(
            "teacher architecture {:?} differs from student {:?}",
            teacher.model().arch(),
            student.arch()
        )));
    }
    if data.train.is_empty() || data.synthetic.is_empty() {
        return Err(Error::Contract("task data and synthetic set must be nonempty".into()));
    }
    let task = data.task.index;
    let mut model = student.clone();
    let anchor = student.params().clone();
    let tau_s = student.temperature();
    let view = TeacherView::new(teacher.model(), data.synthetic)?;
    let weights = config.loss;
    let cons = config.consolidation;
    let fixed_fisher = match cons.mode {
        ConsolidationMode::EwcStatic => {
            Some(static_fisher(student, &view, data.synthetic, config, seed, task)?)
        }
        _ => None,
    };

    let mut task_rng = rng::stream(seed, "task-batches", task as u64);
    let mut syn_rng = rng::stream(seed, "synthetic-batches", task as u64);
    let mut opt = OptimizerState::new(model.params().len(), config.weight_decay);
    let mut rows = Vec::with_capacity(config.iterations);
    let mut diagnostics = config.record_diagnostics.then(Diagnostics::default);

    for step in 0..config.iterations {
        let lr = cosine_lr(step, config.iterations, config.lr, config.lr_min);

        let idx = sample_batch(&mut task_rng, data.train.len(), config.batch_size);
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let images = data.train.images.select_rows(&idx);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let z = bound.encode_images(&mut g, &images)?;
        let w = bound.encode_texts(&mut g, data.class_texts)?;
        let wt = g.transpose(w)?;
        let cosines = g.matmul(z, wt)?;
        let ce_node = losses::ce_loss_node(&mut g, cosines, &labels, tau_s, weights.label_smoothing)?;
        let ce = g.value(ce_node).item()?;
        let mut grad = bound.flat_gradient(&g.backward(ce_node)?);

        let sidx = sample_batch(&mut syn_rng, data.synthetic.len(), config.synthetic_batch_size);
        let s_images = data.synthetic.images(&sidx);
        let s_texts = data.synthetic.texts(&sidx);
        let teacher_m = view.matrix(&sidx)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let (root, m_node) = distill_objective(
            &mut g, &bound, &s_images, &s_texts, &teacher_m, tau_s, view.tau, &weights,
        )?;
        let student_m = ContrastiveMatrix::new(g.value(m_node).clone())?;
        let cd = losses::cd_loss(&student_m, &teacher_m, tau_s, view.tau)?;
        let ita = losses::ita_loss(&student_m, tau_s)?;
        let distill_xent = cd + losses::teacher_entropy(&teacher_m, view.tau)?;
        let distill_grad = match root {
            Some(root) => Some(bound.flat_gradient(&g.backward(root)?)),
            None => None,
        };

        let adaptive;
        let fisher = match cons.mode {
            ConsolidationMode::Awc => {
                adaptive = match &distill_grad {
                    Some(d) => consolidation::fisher_from_gradients(d, step, cons.normalize),
                    None => consolidation::fisher_from_gradients(
                        &vec![0.0; anchor.len()],
                        step,
                        cons.normalize,
                    ),
                };
                Some(&adaptive)
            }
            ConsolidationMode::EwcStatic => fixed_fisher.as_ref(),
            _ => None,
        };
        let (penalty, fisher_stats) = match (cons.mode, fisher) {
            (_, Some(f)) => (consolidation::awc_loss(model.params(), &anchor, f)?, f.stats()),
            (ConsolidationMode::L2, None) => (
                consolidation::l2_penalty(model.params(), &anchor)?,
                FisherStats { min: 1.0, mean: 1.0, max: 1.0 },
            ),
            _ => (0.0, FisherStats { min: 0.0, mean: 0.0, max: 0.0 }),
        };

        for (name, v) in [("ce", ce), ("cd", cd), ("ita", ita), ("consolidation", penalty)] {
            if !v.is_finite() {
                return Err(training_error(task, step, format!("{name} loss is {v}")));
            }
        }

        if let Some(d) = &distill_grad {
            grad.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        if cons.active() {
            let extra = match fisher {
                Some(f) => consolidation::awc_gradient(model.params(), &anchor, f)?,
                None => consolidation::l2_gradient(model.params(), &anchor)?,
            };
            grad.iter_mut().zip(&extra).for_each(|(a, b)| *a += cons.lambda * b);
        }
        if let Some(diag) = diagnostics.as_mut() {
            diag.fishers.push(fisher.map(|f| f.values().to_vec()).unwrap_or_default());
            diag.distill_gradients.push(distill_grad.clone().unwrap_or_default());
        }

        opt.step(model.params_mut().as_mut_slice(), &grad, lr)
            .map_err(|e| with_task(e, task))?;
        rows.push(TraceRow {
            step,
            lr,
            ce,
            cd,
            ita,
            awc: cons.lambda * penalty,
            distill_xent,
            fisher_min: fisher_stats.min,
            fisher_mean: fisher_stats.mean,
            fisher_max: fisher_stats.max,
        });
    }

    Ok(TaskOutcome {
        model,
        trace: TaskTrace { task, rows },
        diagnostics,
    })
}

/// World-side inputs of a continual run.
#[derive(Debug, Clone, Copy)]
pub struct ContinualInputs<'a> {
    pub world: &'a World,
    pub suite: &'a TaskSuite,
    pub synthetic_per_task: usize,
    pub generator: GeneratorKnobs,
}

/// State handed to the per-task hook.
#[derive(Debug)]
pub struct TaskEnd<'a> {
    /// 1-based task position.
    pub position: usize,
    pub snapshot: &'a ModelSnapshot,
    pub pool: &'a ClassPool,
    pub trace: &'a TaskTrace,
}

#[derive(Debug, Clone)]
pub struct ContinualOutcome {
    /// One snapshot per task, in order.
    pub snapshots: Vec<ModelSnapshot>,
    pub traces: Vec<TaskTrace>,
    pub pool: ClassPool,
    pub diagnostics: Vec<Option<Diagnostics>>,
}

impl ContinualOutcome {
    pub fn final_model(&self) -> &TwoTowerModel {
        self.snapshots.last().expect("nonempty suite").model()
    }
}

pub fn teacher_for(
    mode: TeacherMode,
    previous: &ModelSnapshot,
    initial: &ModelSnapshot,
) -> Result<ModelSnapshot> {
    Ok(match mode {
        TeacherMode::Previous => previous.clone(),
        TeacherMode::Initial => initial.clone(),
        TeacherMode::Wise(w) => {
            ModelSnapshot::new(interpolate(previous, initial, w)?, previous.task(), previous.step())
        }
    })
}

pub fn continual_fit(
    theta0: &ModelSnapshot,
    inputs: ContinualInputs<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<ContinualOutcome> {
    continual_fit_with(theta0, inputs, config, seed, |_| Ok(()))
}

/// Runs the task sequence, calling `on_task` after every task.
pub fn continual_fit_with<F>(
    theta0: &ModelSnapshot,
    inputs: ContinualInputs<'_>,
    config: &TrainConfig,
    seed: u64,
    mut on_task: F,
) -> Result<ContinualOutcome>
where
    F: FnMut(&TaskEnd<'_>) -> Result<()>,
{
    config.validate()?;
    let suite = inputs.suite;
    if suite.is_empty() {
        return Err(Error::Contract("task suite is empty".into()));
    }
    let mut pool = ClassPool::new(suite.base_classes.clone(), false);
    let mut snapshots: Vec<ModelSnapshot> = Vec::with_capacity(suite.len());
    let mut traces = Vec::with_capacity(suite.len());
    let mut diagnostics = Vec::with_capacity(suite.len());
    for (pos, task) in suite.tasks.iter().enumerate() {
        pool.add_task(&task.classes)?;
        let synthetic = regenerate_for_task(
            inputs.world,
            &pool,
            task.index,
            inputs.synthetic_per_task,
            &inputs.generator,
            seed,
        )?;
        let previous = snapshots.last().unwrap_or(theta0);
        let teacher = if pos == 0 {
            theta0.clone()
        } else {
            teacher_for(config.teacher, previous, theta0)?
        };
        let train = task_split(inputs.world, task, Split::Train)?;
        let class_texts = inputs.world.class_texts(&task.classes);
        let data = TaskData {
            task,
            train: &train,
            class_texts: &class_texts,
            synthetic: &synthetic,
        };
        let outcome = train_task(previous.model(), &teacher, data, config, seed)?;
        let snapshot = ModelSnapshot::new(outcome.model, task.index, config.iterations);
        on_task(&TaskEnd {
            position: pos + 1,
            snapshot: &snapshot,
            pool: &pool,
            trace: &outcome.trace,
        })?;
        snapshots.push(snapshot);
        traces.push(outcome.trace);
        diagnostics.push(outcome.diagnostics);
    }
    Ok(ContinualOutcome {
        snapshots,
        traces,
        pool,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::worldgen::{build_world, make_task_suite, SuiteConfig, WorldConfig};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-4), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3, 1e-4), 1e-4);
        assert!((cosine_lr(50, 100, 1e-3, 1e-4) - 5.5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(0, 0, 2.0, 1.0), 2.0);
    }

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut opt = OptimizerState::new(3, 0.0);
        let mut theta = [1.0, -2.0, 0.5];
        opt.step(&mut theta, &[3.0, -0.01, 1e3], 0.1).unwrap();
        let expected = [0.9, -1.9, 0.4];
        for (t, e) in theta.iter().zip(expected) {
            assert!((t - e).abs() < 1e-6, "{t} vs {e}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = OptimizerState::new(2, 0.0);
        let mut theta = [1.5, -0.25];
        for _ in 0..3 {
            opt.step(&mut theta, &[0.0, 0.0], 0.1).unwrap();
        }
        assert_eq!(theta, [1.5, -0.25]);
    }

    /// Straight-line transcription of the update rule with explicit
    /// powers, independent of the incremental bias correction above.
    fn reference_trace(grads: &[[f64; 3]], lr: f64, wd: f64) -> [f64; 3] {
        let mut theta = [0.3, -1.2, 2.0];
        let mut m = [0.0; 3];
        let mut v = [0.0; 3];
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powf(t));
                let vh = v[i] / (1.0 - 0.999f64.powf(t));
                theta[i] = theta[i] * (1.0 - lr * wd) - lr * mh / (vh.sqrt() + 1e-8);
            }
        }
        theta
    }

    #[test]
    fn adam_matches_hand_stepped_trace() {
        let grads = [
            [0.5, -1.0, 0.25],
            [0.4, -0.5, -0.75],
            [-0.1, 0.2, 0.3],
            [1.0, 1.0, -1.0],
            [0.05, -0.3, 0.6],
        ];
        for wd in [0.0, 0.01] {
            let mut opt = OptimizerState::new(3, wd);
            let mut theta = [0.3, -1.2, 2.0];
            for g in &grads {
                opt.step(&mut theta, g, 0.01).unwrap();
            }
            let reference = reference_trace(&grads, 0.01, wd);
            for (a, b) in theta.iter().zip(reference) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
            assert_eq!(opt.step_count(), 5);
        }
    }

    #[test]
    fn non_finite_gradient_is_training_error() {
        let mut opt = OptimizerState::new(1, 0.0);
        let err = opt.step(&mut [0.0], &[f64::NAN], 0.1).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { batch_size: 1, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { teacher: TeacherMode::Wise(1.5), ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { iterations: 0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    struct Fixture {
        world: World,
        suite: TaskSuite,
        theta0: ModelSnapshot,
    }

    fn fixture() -> Fixture {
        let world = build_world(5, &WorldConfig::default()).unwrap();
        let suite = make_task_suite(
            &world,
            &SuiteConfig {
                n_tasks: 2,
                train_per_class: 20,
                test_per_class: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let model = TwoTowerModel::new(Architecture::default(), 5).unwrap();
        let pre = PretrainConfig { steps: 30, ..Default::default() };
        let theta0 = pretrain(&model, &world, &suite.base_classes, &pre, 5).unwrap().snapshot;
        Fixture { world, suite, theta0 }
    }

    fn run_task(f: &Fixture, config: &TrainConfig, seed: u64) -> TaskOutcome {
        let task = &f.suite.tasks[0];
        let mut pool = ClassPool::new(f.suite.base_classes.clone(), false);
        pool.add_task(&task.classes).unwrap();
        let synthetic =
            regenerate_for_task(&f.world, &pool, 1, 64, &GeneratorKnobs::default(), seed).unwrap();
        let train = task_split(&f.world, task, Split::Train).unwrap();
        let texts = f.world.class_texts(&task.classes);
        let data = TaskData { task, train: &train, class_texts: &texts, synthetic: &synthetic };
        train_task(f.theta0.model(), &f.theta0, data, config, seed).unwrap()
    }

    #[test]
    fn trace_csv_round_trip() {
        let f = fixture();
        let out = run_task(&f, &TrainConfig { iterations: 3, ..Default::default() }, 1);
        let text = out.trace.to_csv();
        assert_eq!(TaskTrace::from_csv(1, &text).unwrap(), out.trace);
        let missing = text.replacen("distill_xent", "other", 1);
        assert!(matches!(TaskTrace::from_csv(1, &missing), Err(Error::Format(_))));
    }

    #[test]
    fn pretrain_with_zero_steps_is_identity() {
        let world = build_world(1, &WorldConfig::default()).unwrap();
        let model = TwoTowerModel::new(Architecture::default(), 1).unwrap();
        let pre = PretrainConfig { steps: 0, ..Default::default() };
        let out = pretrain(&model, &world, &[0, 1, 2], &pre, 1).unwrap();
        assert_eq!(out.snapshot.model(), &model);
        assert!(pretrain(&model, &world, &[], &pre, 1).is_err());
    }

    #[test]
    fn train_task_is_deterministic_and_leaves_teacher_alone() {
        let f = fixture();
        let before = f.theta0.clone();
        let cfg = TrainConfig { iterations: 10, ..Default::default() };
        let a = run_task(&f, &cfg, 3);
        let b = run_task(&f, &cfg, 3);
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        assert_eq!(f.theta0, before);
        assert_ne!(a.model.params(), f.theta0.params());
    }

    #[test]
    fn zero_lr_keeps_distillation_losses_constant() {
        let f = fixture();
        let cfg = TrainConfig { iterations: 5, lr: 0.0, lr_min: 0.0, ..Default::default() };
        let out = run_task(&f, &cfg, 3);
        assert_eq!(out.model, *f.theta0.model());
        for r in &out.trace.rows {
            assert!(r.cd.abs() < 1e-12);
            assert_eq!(r.awc, 0.0);
        }
    }

    #[test]
    fn fisher_is_squared_distillation_gradient() {
        let f = fixture();
        let cfg = TrainConfig {
            iterations: 6,
            consolidation: ConsolidationConfig {
                normalize: consolidation::FisherNormalization::Raw,
                ..Default::default()
            },
            record_diagnostics: true,
            ..Default::default()
        };
        let out = run_task(&f, &cfg, 4);
        let diag = out.diagnostics.unwrap();
        for (fisher, grad) in diag.fishers.iter().zip(&diag.distill_gradients) {
            let squared: Vec<f64> = grad.iter().map(|g| g * g).collect();
            assert_eq!(fisher, &squared);
        }
        assert_ne!(diag.fishers[1], diag.fishers[2]);
    }

    #[test]
    fn continual_fit_grows_pool_and_snapshots() {
        let f = fixture();
        let cfg = TrainConfig { iterations: 4, ..Default::default() };
        let inputs = ContinualInputs {
            world: &f.world,
            suite: &f.suite,
            synthetic_per_task: 32,
            generator: GeneratorKnobs::default(),
        };
        let mut seen = Vec::new();
        let out = continual_fit_with(&f.theta0, inputs, &cfg, 2, |end| {
            let mut expect = f.suite.base_classes.clone();
            for t in &f.suite.tasks[..end.position] {
                expect.extend(&t.classes);
            }
            expect.sort_unstable();
            assert_eq!(end.pool.union(), expect);
            seen.push(end.position);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.snapshots.len(), 2);
        assert_eq!(seen, vec![1, 2]);
        assert_eq!(out.snapshots[1].task(), 2);
    }
}
