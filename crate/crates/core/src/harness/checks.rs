//! Self-checks with pinned tolerances. Each returns a [`CheckOutcome`]
//! instead of panicking so the command line and the test suite can both
//! report every result.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::analysis::{dataset_ce, landscape_slice, ce_closure, plane_basis, Grid};
use crate::autodiff::{finite_diff, Graph, Tensor};
use crate::bench::{metrics, prepare, run_method, AccuracyMatrix, Method, Prepared};
use crate::consolidation::{
    awc_gradient, awc_loss, fisher_from_gradients, l2_penalty, ConsolidationConfig,
    ConsolidationMode, FisherDiagonal, FisherNormalization,
};
use crate::error::Result;
use crate::losses::{
    self, cd_loss, distill_cross_entropy, ita_loss, teacher_entropy, ContrastiveMatrix, LossWeights,
};
use crate::model::{Architecture, ModelSnapshot, ParameterVector, TwoTowerModel};
use crate::rng;
use crate::trainer::{train_task, Diagnostics, TaskData, TrainConfig};
use crate::worldgen::{
    generate_synthetic, regenerate_for_task, task_split, ClassPool, GeneratorKnobs, Split,
};

use super::config::ExperimentConfig;
use super::run::execute;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(id: u8, name: &'static str, passed: bool, detail: String) -> Self {
        Self { id, name, passed, detail }
    }

    fn from_result(id: u8, name: &'static str, r: Result<(bool, String)>) -> Self {
        match r {
            Ok((passed, detail)) => Self::new(id, name, passed, detail),
            Err(e) => Self::new(id, name, false, format!("error: {e}")),
        }
    }

    /// `[PASS] 3 metric oracle: ...`
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("[{tag}] {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

pub const GRADIENT_CONFIGS: usize = 100;
pub const GRADIENT_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const FORGETTING_GAP: f64 = 0.10;
pub const TRANSFER_MARGIN: f64 = 0.05;
pub const SWEEP_SEEDS: u64 = 5;
pub const SWEEP_BUDGET_SECONDS: f64 = 600.0;
pub const ALIGNMENT_PAIRS: usize = 400;
pub const ALIGNMENT_RATE: f64 = 0.95;

/// Toy layer sizes for the finite-difference oracle.
pub const TOY_ARCH: Architecture = Architecture { d_img: 5, d_txt: 4, hidden: 6, d_emb: 3 };

/// Every check, in order. `quick` skips the 5-seed sweep and the
/// determinism runs.
pub fn run_all(quick: bool) -> Vec<CheckOutcome> {
    let mut out = vec![gradient_oracle(), loss_identities(), metric_oracle(), fisher_dynamics()];
    if !quick {
        let (c5, c6) = method_sweep();
        out.push(c5);
        out.push(c6);
    }
    out.push(alignment_premise());
    out.push(landscape_anchors());
    if !quick {
        out.push(determinism());
    }
    out.push(teacher_invariance());
    out
}

fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute error for two zero vectors.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = vec_norm(a).max(vec_norm(b));
    if scale == 0.0 {
        vec_norm(&diff)
    } else {
        vec_norm(&diff) / scale
    }
}

fn gaussian(r: &mut rng::Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// One random instance of every training term on the toy model.
struct GradientCase {
    student: TwoTowerModel,
    ce_images: Tensor,
    class_texts: Tensor,
    labels: Vec<usize>,
    smoothing: f64,
    syn_images: Tensor,
    syn_texts: Tensor,
    teacher: ContrastiveMatrix,
    tau_teacher: f64,
    anchor: ParameterVector,
    fisher: FisherDiagonal,
    weights: LossWeights,
    lambda: f64,
}

const BATCH: usize = 4;
const CLASSES: usize = 3;

impl GradientCase {
    fn random(k: usize) -> Result<Self> {
        let mut r = rng::stream(0x6ead, "gradient-oracle", k as u64);
        let mut student = TwoTowerModel::new(TOY_ARCH, r.random())?;
        student.set_log_temperature(r.random_range(0.05f64..1.0).ln());
        let mut teacher_model = TwoTowerModel::new(TOY_ARCH, r.random())?;
        teacher_model.set_log_temperature(r.random_range(0.05f64..1.0).ln());
        let syn_images = gaussian(&mut r, BATCH, TOY_ARCH.d_img);
        let syn_texts = gaussian(&mut r, BATCH, TOY_ARCH.d_txt);
        let teacher = ContrastiveMatrix::from_embeddings(&teacher_model.encode(&syn_images, &syn_texts)?)?;
        let anchor = ParameterVector::new(
            student
                .params()
                .as_slice()
                .iter()
                .map(|v| v + 0.1 * r.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let raw: Vec<f64> = (0..anchor.len()).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self {
            ce_images: gaussian(&mut r, BATCH, TOY_ARCH.d_img),
            class_texts: gaussian(&mut r, CLASSES, TOY_ARCH.d_txt),
            labels: (0..BATCH).map(|_| r.random_range(0..CLASSES)).collect(),
            smoothing: r.random_range(0.0..0.3),
            syn_images,
            syn_texts,
            teacher,
            tau_teacher: teacher_model.temperature(),
            anchor,
            fisher: fisher_from_gradients(&raw, 0, FisherNormalization::MeanOne),
            weights: LossWeights {
                alpha: r.random_range(0.1..2.0),
                beta: r.random_range(0.1..2.0),
                label_smoothing: 0.0,
            },
            lambda: r.random_range(0.1..2.0),
            student,
        })
    }

    fn at(&self, theta: &[f64]) -> Result<TwoTowerModel> {
        TwoTowerModel::from_parts(
            TOY_ARCH,
            self.student.seed(),
            ParameterVector::new(theta.to_vec()),
            self.student.log_temperature(),
        )
    }

    fn ce(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let model = self.at(theta)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let z = bound.encode_images(&mut g, &self.ce_images)?;
        let w = bound.encode_texts(&mut g, &self.class_texts)?;
        let wt = g.transpose(w)?;
        let cos = g.matmul(z, wt)?;
        let root = losses::ce_loss_node(&mut g, cos, &self.labels, model.temperature(), self.smoothing)?;
        Ok((g.value(root).item()?, bound.flat_gradient(&g.backward(root)?)))
    }

    /// `α·CD + β·ITA` on one graph.
    fn distill(&self, theta: &[f64], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
        let model = self.at(theta)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let z = bound.encode_images(&mut g, &self.syn_images)?;
        let w = bound.encode_texts(&mut g, &self.syn_texts)?;
        let m = losses::contrastive_matrix_node(&mut g, z, w)?;
        let tau = model.temperature();
        let cd = losses::cd_loss_node(&mut g, m, &self.teacher, tau, self.tau_teacher)?;
        let cd = g.scale(cd, alpha);
        let ita = losses::ita_loss_node(&mut g, m, tau)?;
        let ita = g.scale(ita, beta);
        let root = g.add(cd, ita)?;
        Ok((g.value(root).item()?, bound.flat_gradient(&g.backward(root)?)))
    }

    fn awc(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let now = ParameterVector::new(theta.to_vec());
        Ok((
            awc_loss(&now, &self.anchor, &self.fisher)?,
            awc_gradient(&now, &self.anchor, &self.fisher)?,
        ))
    }

    /// Summed like the trainer: CE and distillation gradients come from
    /// separate graphs and the penalty gradient is closed-form.
    fn combined(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (ce, mut grad) = self.ce(theta)?;
        let (d, dg) = self.distill(theta, self.weights.alpha, self.weights.beta)?;
        let (p, pg) = self.awc(theta)?;
        for ((g, a), b) in grad.iter_mut().zip(&dg).zip(&pg) {
            *g += a + self.lambda * b;
        }
        Ok((ce + d + self.lambda * p, grad))
    }

    /// Worst relative error over the five terms.
    fn errors(&self) -> Result<[f64; 5]> {
        let theta = self.student.params().as_slice().to_vec();
        let term = |f: &dyn Fn(&[f64]) -> Result<(f64, Vec<f64>)>| -> Result<f64> {
            let (_, analytic) = f(&theta)?;
            let numeric = finite_diff(|t| Ok(f(t)?.0), &theta, GRADIENT_STEP)?;
            Ok(relative_error(&analytic, &numeric))
        };
        Ok([
            term(&|t| self.ce(t))?,
            term(&|t| self.distill(t, 1.0, 0.0))?,
            term(&|t| self.distill(t, 0.0, 1.0))?,
            term(&|t| self.awc(t))?,
            term(&|t| self.combined(t))?,
        ])
    }
}

pub fn gradient_oracle() -> CheckOutcome {
    const NAME: &str = "gradient oracle";
    let start = Instant::now();
    let r = (0..GRADIENT_CONFIGS)
        .into_par_iter()
        .map(|k| GradientCase::random(k)?.errors())
        .collect::<Result<Vec<_>>>()
        .map(|all| {
            let names = ["ce", "cd", "ita", "awc", "combined"];
            let mut worst = [0.0f64; 5];
            for e in &all {
                for (w, v) in worst.iter_mut().zip(e) {
                    *w = w.max(*v);
                }
            }
            let secs = start.elapsed().as_secs_f64();
            let passed = worst.iter().all(|&w| w < GRADIENT_TOLERANCE) && secs < 60.0;
            let parts: Vec<String> = names.iter().zip(worst).map(|(n, w)| format!("{n} {w:.1e}")).collect();
            (
                passed,
                format!(
                    "{} configs, max rel err {} (< {GRADIENT_TOLERANCE:.0e}), {secs:.1}s (< 60s)",
                    all.len(),
                    parts.join(", ")
                ),
            )
        });
    CheckOutcome::from_result(1, NAME, r)
}

pub fn loss_identities() -> CheckOutcome {
    const NAME: &str = "loss identities";
    let r = (|| -> Result<(bool, String)> {
        let mut r = rng::stream(0x1d, "loss-identities", 0);
        let mut worst_cd: f64 = 0.0;
        let mut worst_xent: f64 = 0.0;
        let mut l2_bitwise = true;
        for _ in 0..200 {
            let b = r.random_range(2..8);
            let m = ContrastiveMatrix::new(gaussian(&mut r, b, b).map(f64::tanh))?;
            let other = ContrastiveMatrix::new(gaussian(&mut r, b, b).map(f64::tanh))?;
            let tau = r.random_range(0.02..1.0);
            let tau_t = r.random_range(0.02..1.0);
            worst_cd = worst_cd.max(cd_loss(&m, &m, tau, tau)?.abs());
            let gap = distill_cross_entropy(&m, &other, tau, tau_t)? - cd_loss(&m, &other, tau, tau_t)?;
            worst_xent = worst_xent.max((gap - teacher_entropy(&other, tau_t)?).abs());
            let len = r.random_range(1..64);
            let now = ParameterVector::new((0..len).map(|_| r.sample(StandardNormal)).collect());
            let prev = ParameterVector::new((0..len).map(|_| r.sample(StandardNormal)).collect());
            let a = awc_loss(&now, &prev, &FisherDiagonal::ones(len))?;
            l2_bitwise &= a.to_bits() == l2_penalty(&now, &prev)?.to_bits();
        }
        let uniform = ContrastiveMatrix::new(Tensor::filled(2, 2, 0.3))?;
        let ita_err = (ita_loss(&uniform, 0.07)? - 2.0 * 2f64.ln()).abs();
        let passed = worst_cd <= 1e-10 && ita_err <= 1e-12 && worst_xent <= 1e-12 && l2_bitwise;
        Ok((
            passed,
            format!(
                "|cd(M,M)| {worst_cd:.1e} (≤ 1e-10), |ita(uniform) − 2 ln 2| {ita_err:.1e} (≤ 1e-12), \
                 |xent − cd − H| {worst_xent:.1e} (≤ 1e-12), unit-Fisher penalty bitwise l2: {l2_bitwise}"
            ),
        ))
    })();
    CheckOutcome::from_result(2, NAME, r)
}

/// Literal double loops, sharing nothing with `metrics`.
fn brute_metrics(m: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = m.len();
    let mut transfer = 0.0;
    for j in 2..=n {
        let mut col = 0.0;
        for i in 1..j {
            col += m[i - 1][j - 1];
        }
        transfer += col / (j - 1) as f64;
    }
    transfer /= (n - 1) as f64;
    let mut avg = 0.0;
    for row in m {
        for v in row {
            avg += v;
        }
    }
    avg /= (n * n) as f64;
    let last = m[n - 1].iter().sum::<f64>() / n as f64;
    (transfer, avg, last)
}

pub fn metric_oracle() -> CheckOutcome {
    const NAME: &str = "metric oracle";
    let r = (|| -> Result<(bool, String)> {
        let mut r = rng::stream(0x3e, "metric-oracle", 0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let n = r.random_range(2..=8);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random()).collect()).collect();
            let got = metrics(&AccuracyMatrix::from_task_rows(rows.clone())?)?;
            let (t, a, l) = brute_metrics(&rows);
            worst = worst.max((got.transfer - t).abs()).max((got.avg - a).abs()).max((got.last - l).abs());
        }
        let mut constant_exact = true;
        for c in [0.0, 0.1, 0.25, 1.0 / 3.0, 0.7, 0.9, 1.0] {
            for n in 2..=8 {
                let got = metrics(&AccuracyMatrix::from_task_rows(vec![vec![c; n]; n])?)?;
                constant_exact &= got.transfer == c && got.avg == c && got.last == c;
            }
        }
        Ok((
            worst <= 1e-12 && constant_exact,
            format!("1000 matrices, max |Δ| {worst:.1e} (≤ 1e-12), constant matrices exact: {constant_exact}"),
        ))
    })();
    CheckOutcome::from_result(3, NAME, r)
}

/// Fisher vectors recorded over a 50-step run of `mode` from an untrained
/// student toward an unrelated teacher.
pub fn fisher_run(mode: ConsolidationMode, steps: usize, seed: u64) -> Result<Diagnostics> {
    let config = ExperimentConfig::default();
    let world = crate::worldgen::build_world(seed, &config.world)?;
    let suite = crate::worldgen::make_task_suite(&world, &config.suite)?;
    let task = &suite.tasks[0];
    let mut pool = ClassPool::new(suite.base_classes.clone(), false);
    pool.add_task(&task.classes)?;
    let synthetic = regenerate_for_task(&world, &pool, task.index, 128, &GeneratorKnobs::default(), seed)?;
    let train = task_split(&world, task, Split::Train)?;
    let class_texts = world.class_texts(&task.classes);
    let student = TwoTowerModel::new(config.model, rng::derive_u64(seed, "fisher-student", 0))?;
    let teacher = TwoTowerModel::new(config.model, rng::derive_u64(seed, "fisher-teacher", 0))?;
    let train_config = TrainConfig {
        iterations: steps,
        consolidation: ConsolidationConfig { mode, ..ConsolidationConfig::default() },
        record_diagnostics: true,
        ..TrainConfig::default()
    };
    let out = train_task(
        &student,
        &ModelSnapshot::new(teacher, 0, 0),
        TaskData { task, train: &train, class_texts: &class_texts, synthetic: &synthetic },
        &train_config,
        seed,
    )?;
    Ok(out.diagnostics.expect("diagnostics were requested"))
}

pub fn fisher_dynamics() -> CheckOutcome {
    const NAME: &str = "fisher dynamics";
    let r = (|| -> Result<(bool, String)> {
        let steps = 50;
        let adaptive = fisher_run(ConsolidationMode::Awc, steps, 4)?;
        let changed = adaptive.fishers.windows(2).filter(|w| w[0] != w[1]).count();
        let frac = changed as f64 / (steps - 1) as f64;
        let fixed = fisher_run(ConsolidationMode::EwcStatic, steps, 4)?;
        let first: Vec<u64> = fixed.fishers[0].iter().map(|v| v.to_bits()).collect();
        let constant = fixed
            .fishers
            .iter()
            .all(|f| f.iter().map(|v| v.to_bits()).eq(first.iter().copied()));
        Ok((
            frac >= 0.9 && constant && !first.is_empty(),
            format!(
                "adaptive Fisher changed at {changed}/{} steps ({:.0}%, ≥ 90%), static Fisher bitwise constant: {constant}",
                steps - 1,
                100.0 * frac
            ),
        ))
    })();
    CheckOutcome::from_result(4, NAME, r)
}

/// Median Transfer/Avg/Last of each method over the sweep seeds at the
/// default configuration.
#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub medians: BTreeMap<String, (f64, f64, f64)>,
    pub seconds: f64,
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub const SWEEP_METHODS: [Method; 5] =
    [Method::Zeroshot, Method::Finetune, Method::L2, Method::GiftCd, Method::GiftFull];

pub fn sweep(config: &ExperimentConfig, seeds: u64, methods: &[Method]) -> Result<SweepSummary> {
    let start = Instant::now();
    let prepared = (0..seeds)
        .into_par_iter()
        .map(|s| prepare(s, &config.world, &config.suite, config.model, &config.pretrain))
        .collect::<Result<Vec<Prepared>>>()?;
    let jobs: Vec<(usize, Method)> =
        (0..prepared.len()).flat_map(|p| methods.iter().map(move |m| (p, *m))).collect();
    let reports = jobs
        .par_iter()
        .map(|&(p, m)| Ok((m, run_method(m, &prepared[p], &config.train)?.report)))
        .collect::<Result<Vec<_>>>()?;
    let mut medians = BTreeMap::new();
    for m in methods {
        let mine: Vec<_> = reports.iter().filter(|(k, _)| k == m).map(|(_, r)| r).collect();
        medians.insert(
            m.to_string(),
            (
                median(mine.iter().map(|r| r.transfer).collect()),
                median(mine.iter().map(|r| r.avg).collect()),
                median(mine.iter().map(|r| r.last).collect()),
            ),
        );
    }
    Ok(SweepSummary { medians, seconds: start.elapsed().as_secs_f64() })
}

/// Criteria 5 and 6 from one shared sweep.
pub fn method_sweep() -> (CheckOutcome, CheckOutcome) {
    const N5: &str = "forgetting demonstration";
    const N6: &str = "method ordering";
    match sweep(&ExperimentConfig::default(), SWEEP_SEEDS, &SWEEP_METHODS) {
        Err(e) => (
            CheckOutcome::new(5, N5, false, format!("error: {e}")),
            CheckOutcome::new(6, N6, false, format!("error: {e}")),
        ),
        Ok(s) => (forgetting_outcome(&s), ordering_outcome(&s)),
    }
}

pub fn forgetting_outcome(s: &SweepSummary) -> CheckOutcome {
    let zs = s.medians["zeroshot"].0;
    let ft = s.medians["finetune"].0;
    CheckOutcome::new(
        5,
        "forgetting demonstration",
        zs - ft >= FORGETTING_GAP,
        format!(
            "median Transfer zeroshot {zs:.3} − finetune {ft:.3} = {:.3} (≥ {FORGETTING_GAP})",
            zs - ft
        ),
    )
}

pub fn ordering_outcome(s: &SweepSummary) -> CheckOutcome {
    let get = |k: &str| s.medians[k];
    let (full, cd, l2, ft) = (get("gift_full"), get("gift_cd"), get("l2"), get("finetune"));
    let transfer = full.0 > ft.0 + TRANSFER_MARGIN;
    let last = full.2 > l2.2;
    let avg = full.1 >= cd.1 && cd.1 >= l2.1;
    let fast = s.seconds < SWEEP_BUDGET_SECONDS;
    CheckOutcome::new(
        6,
        "method ordering",
        transfer && last && avg && fast,
        format!(
            "Transfer full {:.3} > finetune {:.3} + {TRANSFER_MARGIN}: {transfer}; Last full {:.3} > l2 {:.3}: {last}; \
             Avg full {:.3} ≥ cd {:.3} ≥ l2 {:.3}: {avg}; {} seeds × {} methods in {:.0}s (< {SWEEP_BUDGET_SECONDS:.0}s)",
            full.0, ft.0, full.2, l2.2, full.1, cd.1, l2.1, SWEEP_SEEDS, SWEEP_METHODS.len(), s.seconds
        ),
    )
}

/// Fraction of noiseless synthetic pairs whose image embedding is closest
/// to its own class text among every class of the suite.
pub fn alignment_rate(bench: &Prepared, pairs: usize) -> Result<f64> {
    let mut pool = ClassPool::new(bench.suite.base_classes.clone(), false);
    for t in &bench.suite.tasks {
        pool.add_task(&t.classes)?;
    }
    let mut r = rng::stream(bench.seed, "alignment-check", 0);
    let set = generate_synthetic(&bench.world, &pool, pairs, &GeneratorKnobs::noiseless(), &mut r)?;
    let classes = pool.union();
    let model = bench.theta0.model();
    let texts = model.encode_texts(&bench.world.class_texts(&classes))?;
    let rows: Vec<&[f64]> = set.iter().map(|p| p.image.as_slice()).collect();
    let predicted = model.classify(&Tensor::from_rows(&rows)?, &texts)?;
    let hits = predicted.iter().zip(&set).filter(|(&p, pair)| classes[p] == pair.class_id).count();
    Ok(hits as f64 / pairs as f64)
}

pub fn alignment_premise() -> CheckOutcome {
    const NAME: &str = "alignment premise";
    let r = (|| -> Result<(bool, String)> {
        let c = ExperimentConfig::default();
        let bench = prepare(0, &c.world, &c.suite, c.model, &c.pretrain)?;
        let rate = alignment_rate(&bench, ALIGNMENT_PAIRS)?;
        Ok((
            rate >= ALIGNMENT_RATE,
            format!(
                "{ALIGNMENT_PAIRS} noiseless pairs over {} classes, text match {:.1}% (≥ {:.0}%)",
                c.suite.base_classes + c.suite.n_tasks * c.suite.classes_per_task,
                100.0 * rate,
                100.0 * ALIGNMENT_RATE
            ),
        ))
    })();
    CheckOutcome::from_result(7, NAME, r)
}

pub fn landscape_anchors() -> CheckOutcome {
    const NAME: &str = "landscape slice";
    let r = (|| -> Result<(bool, String)> {
        let c = ExperimentConfig::smoke();
        let bench = prepare(1, &c.world, &c.suite, c.model, &c.pretrain)?;
        let a = run_method(Method::Finetune, &bench, &c.train)?;
        let b = run_method(Method::GiftFull, &bench, &c.train)?;
        let anchors = [&bench.theta0, &a.snapshots[0], &b.snapshots[0]];
        let basis = plane_basis(anchors[0].params(), anchors[1].params(), anchors[2].params())?;
        let (u1, u2) = basis.directions();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
        let ortho = (dot(u1, u1) - 1.0).abs().max((dot(u2, u2) - 1.0).abs()).max(dot(u1, u2).abs());
        let task = &bench.suite.tasks[0];
        let data = task_split(&bench.world, task, Split::Train)?;
        let smoothing = c.train.loss.label_smoothing;
        let land = landscape_slice(
            &basis,
            ce_closure(bench.theta0.model(), &bench.world, task, &data, smoothing),
            Grid::around(&basis, (9, 9)),
        )?;
        let mut worst: f64 = 0.0;
        for (snap, point) in anchors.iter().zip(&land.anchors) {
            let direct = dataset_ce(snap.model(), &bench.world, task, &data, smoothing)?;
            worst = worst.max((direct - point.loss).abs());
        }
        Ok((
            worst <= 1e-9 && ortho <= 1e-9,
            format!("max |slice − direct| at anchors {worst:.1e} (≤ 1e-9), orthonormality error {ortho:.1e} (≤ 1e-9)"),
        ))
    })();
    CheckOutcome::from_result(8, NAME, r)
}

fn collect_files(root: &Path) -> Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(|e| crate::Error::io(&dir, e))? {
            let path = entry.map_err(|e| crate::Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                let bytes = std::fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
                out.insert(rel, bytes);
            }
        }
    }
    Ok(out)
}

/// Relative paths whose contents differ between two run directories,
/// ignoring the manifest, which records wall-clock timings.
pub fn artifact_differences(a: &Path, b: &Path) -> Result<Vec<String>> {
    let fa = collect_files(a)?;
    let fb = collect_files(b)?;
    let mut diffs = Vec::new();
    for key in fa.keys().chain(fb.keys().filter(|k| !fa.contains_key(*k))) {
        if key == super::run::MANIFEST_FILE {
            continue;
        }
        if fa.get(key) != fb.get(key) {
            diffs.push(key.clone());
        }
    }
    Ok(diffs)
}

pub fn determinism() -> CheckOutcome {
    const NAME: &str = "determinism";
    let r = (|| -> Result<(bool, String)> {
        let tmp = tempfile::tempdir().map_err(|e| crate::Error::io(std::env::temp_dir(), e))?;
        let mut c = ExperimentConfig::smoke();
        c.replicates = 2;
        c.methods = vec![Method::Finetune, Method::EwcStatic, Method::GiftFull, Method::WiseTeacher(0.5)];
        let dirs = ["serial_a", "serial_b", "parallel"].map(|d| tmp.path().join(d));
        execute(&c, &dirs[0])?;
        execute(&c, &dirs[1])?;
        c.parallel = true;
        let p = execute(&c, &dirs[2])?;
        let serial = artifact_differences(&dirs[0], &dirs[1])?;
        let mut parallel = artifact_differences(&dirs[0], &dirs[2])?;
        // the stored config records the parallel flag itself
        parallel.retain(|f| f != super::run::CONFIG_FILE);
        let files = collect_files(&dirs[0])?.len();
        let a = super::run::RunManifest::load(&dirs[0])?;
        let same_index = a.methods.iter().zip(&p.manifest.methods).all(|(x, y)| {
            (x.method, x.seed, &x.matrix, &x.traces) == (y.method, y.seed, &y.matrix, &y.traces)
        });
        Ok((
            serial.is_empty() && parallel.is_empty() && same_index,
            format!(
                "{files} artifacts; serial/serial differences {:?}, serial/parallel differences {:?}",
                serial, parallel
            ),
        ))
    })();
    CheckOutcome::from_result(9, NAME, r)
}

/// CE-only AdamW written out by hand: same batch stream, schedule and
/// update rule as the trainer, with no distillation or penalty code.
pub fn manual_ce_run(
    student: &TwoTowerModel,
    data: &TaskData<'_>,
    config: &TrainConfig,
    seed: u64,
) -> Result<TwoTowerModel> {
    let mut model = student.clone();
    let tau = student.temperature();
    let n = model.params().len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut r = rng::stream(seed, "task-batches", data.task.index as u64);
    for step in 0..config.iterations {
        let progress = step as f64 / config.iterations as f64;
        let lr = config.lr_min
            + 0.5 * (config.lr - config.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos());
        let idx = index::sample(&mut r, data.train.len(), config.batch_size.min(data.train.len())).into_vec();
        let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let z = bound.encode_images(&mut g, &data.train.images.select_rows(&idx))?;
        let w = bound.encode_texts(&mut g, data.class_texts)?;
        let wt = g.transpose(w)?;
        let cos = g.matmul(z, wt)?;
        let root = losses::ce_loss_node(&mut g, cos, &labels, tau, config.loss.label_smoothing)?;
        let grad = bound.flat_gradient(&g.backward(root)?);
        let t = step as i32 + 1;
        let (bc1, bc2) = (1.0 - 0.9f64.powi(t), 1.0 - 0.999f64.powi(t));
        let theta = model.params_mut().as_mut_slice();
        for i in 0..n {
            m[i] = 0.9 * m[i] + (1.0 - 0.9) * grad[i];
            v[i] = 0.999 * v[i] + (1.0 - 0.999) * grad[i] * grad[i];
            theta[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + 1e-8);
        }
    }
    Ok(model)
}

fn bits(p: &ParameterVector) -> Vec<u64> {
    p.as_slice().iter().map(|v| v.to_bits()).collect()
}

pub fn teacher_invariance() -> CheckOutcome {
    const NAME: &str = "teacher invariance and reduction";
    let r = (|| -> Result<(bool, String)> {
        let c = ExperimentConfig::smoke();
        let seed = 2;
        let bench = prepare(seed, &c.world, &c.suite, c.model, &c.pretrain)?;
        let task = &bench.suite.tasks[0];
        let mut pool = ClassPool::new(bench.suite.base_classes.clone(), false);
        pool.add_task(&task.classes)?;
        let synthetic =
            regenerate_for_task(&bench.world, &pool, task.index, c.suite.synthetic_per_task, &c.suite.generator, seed)?;
        let train = task_split(&bench.world, task, Split::Train)?;
        let class_texts = bench.world.class_texts(&task.classes);
        let data = TaskData { task, train: &train, class_texts: &class_texts, synthetic: &synthetic };

        let teacher = bench.theta0.clone();
        let before = (bits(teacher.params()), teacher.model().log_temperature().to_bits(), teacher.to_json());
        let student = TwoTowerModel::new(c.model, 99)?;
        let mut full = c.train.clone();
        full.consolidation.mode = ConsolidationMode::Awc;
        train_task(&student, &teacher, data, &full, seed)?;
        let mut ewc = full.clone();
        ewc.consolidation.mode = ConsolidationMode::EwcStatic;
        train_task(&student, &teacher, data, &ewc, seed)?;
        let after = (bits(teacher.params()), teacher.model().log_temperature().to_bits(), teacher.to_json());
        let unchanged = before == after;

        let mut zero = c.train.clone();
        zero.loss.alpha = 0.0;
        zero.loss.beta = 0.0;
        zero.consolidation.lambda = 0.0;
        let reduced = train_task(bench.theta0.model(), &teacher, data, &zero, seed)?.model;
        let manual = manual_ce_run(bench.theta0.model(), &data, &zero, seed)?;
        let equal = bits(reduced.params()) == bits(manual.params());
        Ok((
            unchanged && equal,
            format!(
                "teacher bitwise unchanged after awc and ewc runs: {unchanged}; α=β=λ=0 run bitwise equals hand-written CE loop: {equal}"
            ),
        ))
    })();
    CheckOutcome::from_result(10, NAME, r)
}
