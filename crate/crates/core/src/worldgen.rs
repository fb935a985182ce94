//! Seeded procedural world.
//!
//! Every class is a unit prototype in a latent space. Images and texts are
//! two fixed linear views of that latent space, so an encoder pair that
//! aligns the views on some classes generalizes to unseen ones. Downstream
//! tasks distort the image view with a per-task affine map; the synthetic
//! generator samples classes from the pool and emits undistorted,
//! prompt-aligned pairs.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

pub type ClassId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub d_img: usize,
    pub d_txt: usize,
    /// Minimum pairwise angle between class prototypes, in degrees.
    pub min_angle_deg: f64,
    pub sigma_real_img: f64,
    pub sigma_text: f64,
    /// Rejection-sampling budget per prototype.
    pub max_retries: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_classes: 80,
            latent_dim: 8,
            d_img: 32,
            d_txt: 24,
            min_angle_deg: 25.0,
            sigma_real_img: 0.5,
            sigma_text: 1.0,
            max_retries: 10_000,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.latent_dim < 2 || self.d_img == 0 || self.d_txt == 0 {
            return Err(Error::Config(format!("world dimensions must be positive: {self:?}")));
        }
        if !(0.0..180.0).contains(&self.min_angle_deg) {
            return Err(Error::Config(format!(
                "min_angle_deg must be in [0, 180), got {}",
                self.min_angle_deg
            )));
        }
        for (name, v) in [("sigma_real_img", self.sigma_real_img), ("sigma_text", self.sigma_text)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative")));
            }
        }
        Ok(())
    }
}

/// A class name that has not been templated.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassName(String);

impl ClassName {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Contract("class name must be nonempty".into()));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// A templated prompt. Distinct from [`ClassName`] so a prompt cannot be
/// templated again by accident.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Prompt(String);

impl Prompt {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// `"a photo of a {name}."`, with literal substitution.
pub fn template_prompt(name: &ClassName) -> Prompt {
    Prompt(format!("a photo of a {}.", name.0))
}

#[derive(Debug, Clone)]
pub struct World {
    seed: u64,
    config: WorldConfig,
    prototypes: Vec<Vec<f64>>,
    /// `latent_dim × d_img`; an image is `μ · image_proj`.
    image_proj: Tensor,
    /// `latent_dim × d_txt`.
    text_proj: Tensor,
    /// Unit direction of the generator's domain-gap bias.
    gap_direction: Vec<f64>,
    names: Vec<ClassName>,
}

fn gaussian_vec(r: &mut rng::Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ra", "ven", "tor", "sil", "pa", "dro", "ne", "qui", "zu", "bel", "fa",
    "gor", "hin", "ja", "mur", "ost", "pel", "ri", "sa", "tam", "wyn",
];

fn class_name(r: &mut rng::Rng, taken: &mut BTreeSet<String>) -> ClassName {
    loop {
        let parts = r.random_range(2..=3);
        let name: String = (0..parts)
            .map(|_| SYLLABLES[r.random_range(0..SYLLABLES.len())])
            .collect();
        if taken.insert(name.clone()) {
            return ClassName(name);
        }
    }
}

/// Builds the world for `seed`. Prototypes are drawn uniformly on the unit
/// sphere and rejected until every pair is at least `min_angle_deg` apart.
pub fn build_world(seed: u64, config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut r = rng::stream(seed, "world-prototypes", 0);
    let max_cos = config.min_angle_deg.to_radians().cos();
    let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.num_classes);
    while prototypes.len() < config.num_classes {
        let mut accepted = false;
        for _ in 0..config.max_retries.max(1) {
            let candidate = unit(gaussian_vec(&mut r, config.latent_dim));
            if prototypes.iter().all(|p| dot(p, &candidate) < max_cos) {
                prototypes.push(candidate);
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::Config(format!(
                "could not place {} prototypes {}° apart in {} dimensions (placed {})",
                config.num_classes,
                config.min_angle_deg,
                config.latent_dim,
                prototypes.len()
            )));
        }
    }

    let mut r = rng::stream(seed, "world-projections", 0);
    let image_proj = Tensor::matrix(
        config.latent_dim,
        config.d_img,
        gaussian_vec(&mut r, config.latent_dim * config.d_img),
    )?;
    let text_proj = Tensor::matrix(
        config.latent_dim,
        config.d_txt,
        gaussian_vec(&mut r, config.latent_dim * config.d_txt),
    )?;
    let gap_direction = unit(gaussian_vec(&mut r, config.d_img));

    let mut r = rng::stream(seed, "world-names", 0);
    let mut taken = BTreeSet::new();
    let names = (0..config.num_classes)
        .map(|_| class_name(&mut r, &mut taken))
        .collect();

    Ok(World {
        seed,
        config: config.clone(),
        prototypes,
        image_proj,
        text_proj,
        gap_direction,
        names,
    })
}

impl World {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn prototype(&self, class: ClassId) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn name(&self, class: ClassId) -> &ClassName {
        &self.names[class]
    }

    pub fn prompt(&self, class: ClassId) -> Prompt {
        template_prompt(&self.names[class])
    }

    pub fn gap_direction(&self) -> &[f64] {
        &self.gap_direction
    }

    fn project(&self, latent: &[f64], proj: &Tensor) -> Vec<f64> {
        let cols = proj.cols();
        let mut out = vec![0.0; cols];
        for (k, &l) in latent.iter().enumerate() {
            for (o, &p) in out.iter_mut().zip(proj.row_slice(k)) {
                *o += l * p;
            }
        }
        out
    }

    /// Noiseless image-view projection of a class prototype.
    pub fn clean_image(&self, class: ClassId) -> Vec<f64> {
        self.project(&self.prototypes[class], &self.image_proj)
    }

    /// Text input for a prompt describing `class`: the text-view projection
    /// plus a small jitter that is a deterministic function of the prompt.
    pub fn text_input(&self, class: ClassId, prompt: &Prompt) -> Vec<f64> {
        let mut v = self.project(&self.prototypes[class], &self.text_proj);
        let scale = 0.01 * self.config.sigma_text;
        if scale > 0.0 {
            let mut r = rng::stream(self.seed, "prompt-jitter", rng::stable_hash(prompt.as_str()));
            for x in &mut v {
                *x += scale * r.sample::<f64, _>(StandardNormal);
            }
        }
        v
    }

    /// Text inputs of the templated prompts of `classes`, one row each.
    pub fn class_texts(&self, classes: &[ClassId]) -> Tensor {
        let rows: Vec<Vec<f64>> = classes
            .iter()
            .map(|&c| self.text_input(c, &self.prompt(c)))
            .collect();
        Tensor::from_rows(&rows).unwrap_or_else(|_| Tensor::zeros(0, self.config.d_txt))
    }

    pub fn angle_deg(&self, a: ClassId, b: ClassId) -> f64 {
        dot(&self.prototypes[a], &self.prototypes[b]).clamp(-1.0, 1.0).acos().to_degrees()
    }
}

/// Affine image distortion `x ↦ x·M + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    severity: f64,
    matrix: Tensor,
    bias: Vec<f64>,
}

impl DomainTransform {
    pub fn identity(d: usize) -> Self {
        Self {
            severity: 0.0,
            matrix: Tensor::identity(d),
            bias: vec![0.0; d],
        }
    }

    /// `M = I + s·G/√d`, `b = s·g` with standard normal `G`, `g`.
    pub fn random(r: &mut rng::Rng, d: usize, severity: f64) -> Self {
        if severity == 0.0 {
            return Self::identity(d);
        }
        let scale = severity / (d as f64).sqrt();
        let mut matrix = Tensor::identity(d);
        for v in matrix.data_mut() {
            *v += scale * r.sample::<f64, _>(StandardNormal);
        }
        let bias = gaussian_vec(r, d).into_iter().map(|v| severity * v).collect();
        Self {
            severity,
            matrix,
            bias,
        }
    }

    pub fn severity(&self) -> f64 {
        self.severity
    }

    pub fn is_identity(&self) -> bool {
        self.severity == 0.0
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        if self.is_identity() {
            return x.to_vec();
        }
        let d = self.bias.len();
        let mut out = self.bias.clone();
        for (k, &xv) in x.iter().enumerate() {
            let row = &self.matrix.data()[k * d..(k + 1) * d];
            for (o, &m) in out.iter_mut().zip(row) {
                *o += xv * m;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    /// 1-based position in the sequence; 0 denotes the pretraining classes.
    pub index: usize,
    pub classes: Vec<ClassId>,
    pub transform: DomainTransform,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl TaskSpec {
    pub fn samples(&self, split: Split) -> usize {
        self.classes.len()
            * match split {
                Split::Train => self.train_per_class,
                Split::Test => self.test_per_class,
            }
    }
}

/// Labeled images of one task split. `labels` index into the task's class
/// list; `class_ids` are the matching world ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_ids: Vec<ClassId>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Draws `n` stratified images for `task`: label `i % K`, image
/// `transform(μ·A_img + ε)` with isotropic Gaussian `ε`.
pub fn sample_real(world: &World, task: &TaskSpec, n: usize, split: Split) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("sample count must be at least 1".into()));
    }
    if task.classes.is_empty() {
        return Err(Error::Contract(format!("task {} has no classes", task.index)));
    }
    let tag = match split {
        Split::Train => "real-train",
        Split::Test => "real-test",
    };
    let mut r = rng::stream(world.seed, tag, task.index as u64);
    let sigma = world.config.sigma_real_img;
    let d = world.config.d_img;
    let k = task.classes.len();
    let clean: Vec<Vec<f64>> = task.classes.iter().map(|&c| world.clean_image(c)).collect();
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut class_ids = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        let mut x = clean[label].clone();
        if sigma > 0.0 {
            for v in &mut x {
                *v += sigma * r.sample::<f64, _>(StandardNormal);
            }
        }
        data.extend(task.transform.apply(&x));
        labels.push(label);
        class_ids.push(task.classes[label]);
    }
    Ok(Dataset {
        images: Tensor::matrix(n, d, data)?,
        labels,
        class_ids,
    })
}

/// Full split at the task's configured per-class count.
pub fn task_split(world: &World, task: &TaskSpec, split: Split) -> Result<Dataset> {
    sample_real(world, task, task.samples(split), split)
}

/// Pool of class identifiers available to the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPool {
    base: Vec<ClassId>,
    tasks: Vec<Vec<ClassId>>,
    allow_overlap: bool,
}

impl ClassPool {
    pub fn new(base: Vec<ClassId>, allow_overlap: bool) -> Self {
        Self {
            base,
            tasks: Vec::new(),
            allow_overlap,
        }
    }

    pub fn base(&self) -> &[ClassId] {
        &self.base
    }

    pub fn task_classes(&self) -> &[Vec<ClassId>] {
        &self.tasks
    }

    /// Adds the next task's classes. Without `allow_overlap`, they must be
    /// disjoint from everything already in the pool.
    pub fn add_task(&mut self, classes: &[ClassId]) -> Result<()> {
        if !self.allow_overlap {
            let existing: BTreeSet<ClassId> = self.union().into_iter().collect();
            if let Some(c) = classes.iter().find(|c| existing.contains(c)) {
                return Err(Error::Contract(format!("class {c} is already in the pool")));
            }
        }
        self.tasks.push(classes.to_vec());
        Ok(())
    }

    /// `C⁰ ∪ C¹ ∪ … ∪ Cᵗ`, sorted and deduplicated.
    pub fn union(&self) -> Vec<ClassId> {
        let set: BTreeSet<ClassId> = self
            .base
            .iter()
            .chain(self.tasks.iter().flatten())
            .copied()
            .collect();
        set.into_iter().collect()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty() && self.tasks.iter().all(Vec::is_empty)
    }
}

/// Generator fidelity knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorKnobs {
    /// Image noise standard deviation; `None` uses the world's real-image σ.
    pub sigma_gen: Option<f64>,
    /// Magnitude of a constant bias along the world's gap direction.
    pub gap_scale: f64,
}

impl Default for GeneratorKnobs {
    fn default() -> Self {
        Self {
            sigma_gen: None,
            gap_scale: 0.0,
        }
    }
}

impl GeneratorKnobs {
    pub fn noiseless() -> Self {
        Self {
            sigma_gen: Some(0.0),
            gap_scale: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub class_id: ClassId,
    pub prompt: Prompt,
}

/// Samples `n` classes uniformly with replacement from the pool and emits
/// one aligned pair per draw.
pub fn generate_synthetic(
    world: &World,
    pool: &ClassPool,
    n: usize,
    knobs: &GeneratorKnobs,
    r: &mut rng::Rng,
) -> Result<Vec<SyntheticPair>> {
    if n == 0 {
        return Err(Error::Contract("synthetic count must be at least 1".into()));
    }
    let classes = pool.union();
    if classes.is_empty() {
        return Err(Error::Contract("class pool is empty".into()));
    }
    let sigma = knobs.sigma_gen.unwrap_or(world.config.sigma_real_img);
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = classes[r.random_range(0..classes.len())];
        let prompt = world.prompt(class_id);
        let mut image = world.clean_image(class_id);
        for (v, g) in image.iter_mut().zip(&world.gap_direction) {
            *v += knobs.gap_scale * g;
            if sigma > 0.0 {
                *v += sigma * r.sample::<f64, _>(StandardNormal);
            }
        }
        let text = world.text_input(class_id, &prompt);
        pairs.push(SyntheticPair {
            image,
            text,
            class_id,
            prompt,
        });
    }
    Ok(pairs)
}

/// Synthetic pairs for one task. A new set replaces the previous one; only
/// one is alive at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub task: usize,
    pub pairs: Vec<SyntheticPair>,
}

impl SyntheticSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn images(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.pairs[i].image.as_slice()).collect();
        Tensor::from_rows(&rows).expect("uniform image width")
    }

    pub fn texts(&self, indices: &[usize]) -> Tensor {
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.pairs[i].text.as_slice()).collect();
        Tensor::from_rows(&rows).expect("uniform text width")
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.pairs.len()).collect()
    }
}

/// Fresh synthetic set for task `t`, drawn from a stream keyed on
/// `(master_seed, t)`.
pub fn regenerate_for_task(
    world: &World,
    pool: &ClassPool,
    t: usize,
    n: usize,
    knobs: &GeneratorKnobs,
    master_seed: u64,
) -> Result<SyntheticSet> {
    let mut r = rng::stream(master_seed, "synthetic", t as u64);
    Ok(SyntheticSet {
        task: t,
        pairs: generate_synthetic(world, pool, n, knobs, &mut r)?,
    })
}

/// Per-task domain-shift severity profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSchedule {
    Constant { severity: f64 },
    Linear { start: f64, end: f64 },
    Explicit { severities: Vec<f64> },
}

impl ShiftSchedule {
    pub fn severity(&self, task_pos: usize, n_tasks: usize) -> Result<f64> {
        let s = match self {
            ShiftSchedule::Constant { severity } => *severity,
            ShiftSchedule::Linear { start, end } => {
                if n_tasks <= 1 {
                    *start
                } else {
                    start + (end - start) * task_pos as f64 / (n_tasks - 1) as f64
                }
            }
            ShiftSchedule::Explicit { severities } => *severities.get(task_pos).ok_or_else(|| {
                Error::Config(format!(
                    "explicit shift schedule has {} entries for {n_tasks} tasks",
                    severities.len()
                ))
            })?,
        };
        if !(s.is_finite() && s >= 0.0) {
            return Err(Error::Config(format!("shift severity must be nonnegative, got {s}")));
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IncrementalMode {
    /// Task identity known at test time; predictions within the task's classes.
    #[default]
    Til,
    /// Predictions over every class seen so far.
    Cil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub base_classes: usize,
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub synthetic_per_task: usize,
    pub shift: ShiftSchedule,
    pub mode: IncrementalMode,
    /// Shuffle which world classes land in which task.
    pub shuffle_classes: bool,
    pub generator: GeneratorKnobs,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            base_classes: 40,
            n_tasks: 5,
            classes_per_task: 8,
            train_per_class: 200,
            test_per_class: 100,
            synthetic_per_task: 256,
            shift: ShiftSchedule::Constant { severity: 1.2 },
            mode: IncrementalMode::Til,
            shuffle_classes: true,
            generator: GeneratorKnobs::default(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("suite needs at least one task and one class per task".into()));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 || self.synthetic_per_task == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        for t in 0..self.n_tasks {
            self.shift.severity(t, self.n_tasks)?;
        }
        Ok(())
    }
}

/// Base classes plus the downstream task sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub base_classes: Vec<ClassId>,
    pub tasks: Vec<TaskSpec>,
    pub mode: IncrementalMode,
}

impl TaskSuite {
    /// The pretraining classes as an undistorted pseudo-task with index 0.
    pub fn base_task(&self, world: &World, train_per_class: usize, test_per_class: usize) -> TaskSpec {
        TaskSpec {
            index: 0,
            classes: self.base_classes.clone(),
            transform: DomainTransform::identity(world.config.d_img),
            train_per_class,
            test_per_class,
        }
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Partitions world classes into `C⁰` and `n_tasks` disjoint task class
/// sets, and draws each task's domain transform.
pub fn make_task_suite(world: &World, config: &SuiteConfig) -> Result<TaskSuite> {
    config.validate()?;
    let needed = config.base_classes + config.n_tasks * config.classes_per_task;
    if needed > world.num_classes() {
        return Err(Error::Config(format!(
            "suite needs {needed} classes, world has {}",
            world.num_classes()
        )));
    }
    let mut order: Vec<ClassId> = (0..world.num_classes()).collect();
    if config.shuffle_classes {
        order.shuffle(&mut rng::stream(world.seed, "suite-classes", 0));
    }
    let base_classes = order[..config.base_classes].to_vec();
    let mut tasks = Vec::with_capacity(config.n_tasks);
    for t in 0..config.n_tasks {
        let start = config.base_classes + t * config.classes_per_task;
        let classes = order[start..start + config.classes_per_task].to_vec();
        let severity = config.shift.severity(t, config.n_tasks)?;
        let mut r = rng::stream(world.seed, "domain", (t + 1) as u64);
        tasks.push(TaskSpec {
            index: t + 1,
            classes,
            transform: DomainTransform::random(&mut r, world.config.d_img, severity),
            train_per_class: config.train_per_class,
            test_per_class: config.test_per_class,
        });
    }
    Ok(TaskSuite {
        base_classes,
        tasks,
        mode: config.mode,
    })
}

/// Writes one split as CSV rows `task,split,class_id,prompt,x0,x1,…`.
pub fn write_dataset_csv<W: Write>(
    out: &mut W,
    world: &World,
    task: &TaskSpec,
    split: Split,
    data: &Dataset,
    header: bool,
) -> std::io::Result<()> {
    if header {
        write!(out, "task,split,class_id,prompt")?;
        for i in 0..data.images.cols() {
            write!(out, ",x{i}")?;
        }
        writeln!(out)?;
    }
    for (i, &c) in data.class_ids.iter().enumerate() {
        write!(out, "{},{},{},\"{}\"", task.index, split.as_str(), c, world.prompt(c).as_str())?;
        for v in data.images.row_slice(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_world(seed: u64) -> World {
        build_world(seed, &WorldConfig::default()).unwrap()
    }

    #[test]
    fn world_is_deterministic_per_seed() {
        let a = small_world(3);
        let b = small_world(3);
        assert_eq!(a.prototypes, b.prototypes);
        assert_eq!(a.image_proj, b.image_proj);
        assert_eq!(a.names, b.names);
        let c = small_world(4);
        assert_ne!(a.prototypes, c.prototypes);
    }

    #[test]
    fn prototypes_respect_angle_floor() {
        let cfg = WorldConfig {
            num_classes: 2,
            min_angle_deg: 60.0,
            ..WorldConfig::default()
        };
        let w = build_world(9, &cfg).unwrap();
        assert!(w.angle_deg(0, 1) >= 60.0);
        let full = small_world(1);
        for a in 0..full.num_classes() {
            for b in a + 1..full.num_classes() {
                assert!(full.angle_deg(a, b) >= 25.0);
            }
        }
    }

    #[test]
    fn impossible_angle_floor_is_config_error() {
        let cfg = WorldConfig {
            num_classes: 10,
            latent_dim: 2,
            min_angle_deg: 90.0,
            max_retries: 50,
            ..WorldConfig::default()
        };
        assert!(matches!(build_world(1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn prompt_template_is_literal() {
        let dog = ClassName::new("dog").unwrap();
        assert_eq!(template_prompt(&dog).as_str(), "a photo of a dog.");
        let pet = ClassName::new("oxford pet").unwrap();
        assert_eq!(template_prompt(&pet).as_str(), "a photo of a oxford pet.");
        let twice = ClassName::new(template_prompt(&dog).as_str()).unwrap();
        assert_eq!(template_prompt(&twice).as_str(), "a photo of a a photo of a dog..");
        assert!(matches!(ClassName::new(""), Err(Error::Contract(_))));
    }

    fn one_task(world: &World, severity: f64) -> TaskSpec {
        let suite = make_task_suite(
            world,
            &SuiteConfig {
                n_tasks: 1,
                shift: ShiftSchedule::Constant { severity },
                ..SuiteConfig::default()
            },
        )
        .unwrap();
        suite.tasks[0].clone()
    }

    #[test]
    fn noiseless_identity_sample_is_clean_projection() {
        let cfg = WorldConfig {
            sigma_real_img: 0.0,
            ..WorldConfig::default()
        };
        let w = build_world(2, &cfg).unwrap();
        let task = one_task(&w, 0.0);
        let d = sample_real(&w, &task, 16, Split::Train).unwrap();
        for i in 0..16 {
            assert_eq!(d.images.row_slice(i), w.clean_image(d.class_ids[i]).as_slice());
        }
    }

    #[test]
    fn train_and_test_draws_differ() {
        let w = small_world(5);
        let task = one_task(&w, 0.5);
        let tr = sample_real(&w, &task, 64, Split::Train).unwrap();
        let te = sample_real(&w, &task, 64, Split::Test).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                assert_ne!(tr.images.row_slice(i), te.images.row_slice(j));
            }
        }
        assert_eq!(tr, sample_real(&w, &task, 64, Split::Train).unwrap());
    }

    #[test]
    fn labels_are_stratified() {
        let w = small_world(6);
        let task = one_task(&w, 0.5);
        let d = sample_real(&w, &task, 80, Split::Train).unwrap();
        let mut counts = vec![0; task.classes.len()];
        d.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == 10));
        assert!(sample_real(&w, &task, 0, Split::Train).is_err());
    }

    #[test]
    fn generator_frequencies_are_uniform() {
        let w = small_world(7);
        let pool = ClassPool::new((0..10).collect(), false);
        let mut r = rng::stream(1, "freq", 0);
        let n = 10_000;
        let pairs = generate_synthetic(&w, &pool, n, &GeneratorKnobs::default(), &mut r).unwrap();
        let mut counts = vec![0usize; 10];
        pairs.iter().for_each(|p| counts[p.class_id] += 1);
        let p = 0.1;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "count {c}");
        }
    }

    #[test]
    fn generator_rejects_empty_requests() {
        let w = small_world(7);
        let mut r = rng::stream(1, "empty", 0);
        let pool = ClassPool::new(vec![], false);
        assert!(generate_synthetic(&w, &pool, 4, &GeneratorKnobs::default(), &mut r).is_err());
        let pool = ClassPool::new(vec![1], false);
        assert!(generate_synthetic(&w, &pool, 0, &GeneratorKnobs::default(), &mut r).is_err());
    }

    #[test]
    fn noiseless_generator_emits_clean_images_and_prompt_texts() {
        let w = small_world(8);
        let pool = ClassPool::new(vec![3, 4, 5], false);
        let mut r = rng::stream(1, "clean", 0);
        for p in generate_synthetic(&w, &pool, 20, &GeneratorKnobs::noiseless(), &mut r).unwrap() {
            assert_eq!(p.image, w.clean_image(p.class_id));
            assert_eq!(p.prompt, template_prompt(w.name(p.class_id)));
            assert_eq!(p.text, w.text_input(p.class_id, &p.prompt));
        }
    }

    #[test]
    fn regeneration_is_task_scoped_and_reproducible() {
        let w = small_world(9);
        let mut pool = ClassPool::new((0..10).collect(), false);
        pool.add_task(&[10, 11]).unwrap();
        let k = GeneratorKnobs::default();
        let a = regenerate_for_task(&w, &pool, 1, 64, &k, 42).unwrap();
        let b = regenerate_for_task(&w, &pool, 2, 64, &k, 42).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, regenerate_for_task(&w, &pool, 1, 64, &k, 42).unwrap());
        assert_eq!(pool.union(), (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn pool_grows_and_rejects_overlap() {
        let mut pool = ClassPool::new(vec![0, 1], false);
        pool.add_task(&[2, 3]).unwrap();
        assert!(pool.add_task(&[3, 4]).is_err());
        let mut cil = ClassPool::new(vec![0, 1], true);
        cil.add_task(&[1, 2]).unwrap();
        assert_eq!(cil.union(), vec![0, 1, 2]);
    }

    #[test]
    fn suite_partitions_are_disjoint() {
        let w = small_world(10);
        let suite = make_task_suite(&w, &SuiteConfig::default()).unwrap();
        let mut seen: BTreeSet<ClassId> = suite.base_classes.iter().copied().collect();
        assert_eq!(seen.len(), 40);
        for t in &suite.tasks {
            for c in &t.classes {
                assert!(seen.insert(*c), "class {c} repeated");
            }
        }
        let single = make_task_suite(&w, &SuiteConfig { n_tasks: 1, classes_per_task: 12, ..Default::default() }).unwrap();
        assert_eq!(single.tasks.len(), 1);
        assert_eq!(single.tasks[0].classes.len(), 12);
        let too_many = SuiteConfig { classes_per_task: 9, ..Default::default() };
        assert!(matches!(make_task_suite(&w, &too_many), Err(Error::Config(_))));
    }

    #[test]
    fn zero_severity_gives_identity_transforms() {
        let w = small_world(11);
        let suite = make_task_suite(&w, &SuiteConfig { shift: ShiftSchedule::Constant { severity: 0.0 }, ..Default::default() }).unwrap();
        for t in &suite.tasks {
            assert!(t.transform.is_identity());
            let x = w.clean_image(0);
            assert_eq!(t.transform.apply(&x), x);
        }
    }

    #[test]
    fn linear_schedule_interpolates() {
        let s = ShiftSchedule::Linear { start: 0.2, end: 1.0 };
        assert_eq!(s.severity(0, 5).unwrap(), 0.2);
        assert_eq!(s.severity(4, 5).unwrap(), 1.0);
        let e = ShiftSchedule::Explicit { severities: vec![0.1] };
        assert!(e.severity(1, 2).is_err());
    }

    #[test]
    fn dataset_csv_has_header_and_rows() {
        let w = small_world(12);
        let task = one_task(&w, 0.0);
        let d = sample_real(&w, &task, 3, Split::Test).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &w, &task, Split::Test, &d, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[0].starts_with("task,split,class_id,prompt,x0"));
        assert!(lines[1].contains("\"a photo of a "));
    }
}
