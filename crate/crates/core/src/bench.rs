//! Accuracy matrices, Transfer/Avg/Last metrics and method runners.
//!
//! Row `i` of the matrix is the model after task `i`, column `j` the
//! evaluated task. Row 0 holds the pretrained model's accuracies; it is
//! stored for reference and excluded from every metric.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::consolidation::ConsolidationMode;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelSnapshot, TwoTowerModel};
use crate::rng;
use crate::trainer::{
    continual_fit_with, pretrain, ContinualInputs, PretrainConfig, TaskTrace, TeacherMode,
    TrainConfig,
};
use crate::worldgen::{
    build_world, make_task_suite, task_split, ClassId, Dataset, IncrementalMode, Split,
    SuiteConfig, TaskSuite, World, WorldConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `n + 1` rows of `n` entries, row 0 first.
    rows: Vec<Vec<f64>>,
}

fn check_cell(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Contract(format!("accuracy {v} outside [0, 1]")))
    }
}

impl AccuracyMatrix {
    /// Starts a matrix from the pretrained model's row.
    pub fn new(row0: Vec<f64>) -> Result<Self> {
        if row0.is_empty() {
            return Err(Error::Contract("accuracy matrix needs at least one task".into()));
        }
        row0.iter().try_for_each(|&v| check_cell(v))?;
        Ok(Self { rows: vec![row0] })
    }

    /// Whole matrix from `n + 1` rows, row 0 first.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut it = rows.into_iter();
        let mut m = Self::new(it.next().unwrap_or_default())?;
        for row in it {
            m.push_row(row)?;
        }
        Ok(m)
    }

    /// Square `n × n` matrix from the task rows, with a zero row 0.
    pub fn from_task_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let mut all = vec![vec![0.0; n]];
        all.extend(rows);
        Self::from_rows(all)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        if row.len() != self.n() {
            return Err(Error::Contract(format!(
                "row has {} entries, matrix has {} tasks",
                row.len(),
                self.n()
            )));
        }
        if self.is_complete() {
            return Err(Error::Contract("accuracy matrix is already complete".into()));
        }
        row.iter().try_for_each(|&v| check_cell(v))?;
        self.rows.push(row);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.rows[0].len()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.len() == self.n() + 1
    }

    /// `a_{i,j}` with `i ∈ 0..=n` and `j ∈ 1..=n`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i][j - 1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let header: Vec<String> = (1..=self.n()).map(|j| format!("task_{j}")).collect();
        writeln!(out, "{}", header.join(","))?;
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(out, "{}", cells.join(","))?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        lines
            .next()
            .ok_or_else(|| Error::Format("empty accuracy matrix CSV".into()))?;
        let rows = lines
            .map(|l| {
                l.split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Format(format!("bad cell {c:?}: {e}"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerTask {
    /// Mean of the cells above the diagonal in each column; absent for the
    /// first task.
    pub transfer: Vec<Option<f64>>,
    /// Column means over rows `1..=n`.
    pub avg: Vec<f64>,
    /// Final row.
    pub last: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub transfer: f64,
    pub avg: f64,
    pub last: f64,
    pub per_task: PerTask,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("metric report: {e}")))
    }
}

/// `x₀ + mean(xᵢ − x₀)`: exact for constant inputs, where a plain sum
/// followed by a division can round.
fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let Some(&first) = values.peek() else {
        return f64::NAN;
    };
    let (mut shifted, mut count) = (0.0, 0usize);
    for v in values {
        shifted += v - first;
        count += 1;
    }
    first + shifted / count as f64
}

/// Transfer, Avg and Last of a complete matrix.
pub fn metrics(m: &AccuracyMatrix) -> Result<MetricReport> {
    let n = m.n();
    if !m.is_complete() {
        return Err(Error::Contract(format!(
            "accuracy matrix has {} of {} task rows",
            m.rows.len() - 1,
            n
        )));
    }
    if n < 2 {
        return Err(Error::Contract("Transfer is undefined for fewer than two tasks".into()));
    }
    let column_transfer: Vec<Option<f64>> = (1..=n)
        .map(|j| (j >= 2).then(|| mean((1..j).map(|i| m.get(i, j)))))
        .collect();
    let transfer = mean(column_transfer.iter().flatten().copied());
    let avg_cols: Vec<f64> = (1..=n).map(|j| mean((1..=n).map(|i| m.get(i, j)))).collect();
    let avg = mean(avg_cols.iter().copied());
    let last_row = m.row(n).to_vec();
    let last = mean(last_row.iter().copied());
    Ok(MetricReport {
        transfer,
        avg,
        last,
        per_task: PerTask {
            transfer: column_transfer,
            avg: avg_cols,
            last: last_row,
        },
    })
}

/// Candidate classes when the model after task `after` (0 = pretrained)
/// is evaluated on task `eval` (both 1-based).
pub fn candidate_classes(
    suite: &TaskSuite,
    mode: IncrementalMode,
    after: usize,
    eval: usize,
) -> Vec<ClassId> {
    match mode {
        IncrementalMode::Til => suite.tasks[eval - 1].classes.clone(),
        IncrementalMode::Cil => {
            let set: BTreeSet<ClassId> = suite.tasks[..after]
                .iter()
                .chain(std::iter::once(&suite.tasks[eval - 1]))
                .flat_map(|t| t.classes.iter().copied())
                .collect();
            set.into_iter().collect()
        }
    }
}

/// Fraction of `test` classified correctly among `candidates`.
pub fn evaluate(
    model: &TwoTowerModel,
    world: &World,
    test: &Dataset,
    candidates: &[ClassId],
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    if candidates.is_empty() {
        return Err(Error::Contract("no candidate classes".into()));
    }
    let class_embeddings = model.encode_texts(&world.class_texts(candidates))?;
    let predictions = model.classify(&test.images, &class_embeddings)?;
    let correct = predictions
        .iter()
        .zip(&test.class_ids)
        .filter(|(&p, &c)| candidates[p] == c)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// One matrix row: `model` as the state after task `after`.
pub fn evaluate_row(
    model: &TwoTowerModel,
    bench: &Prepared,
    after: usize,
) -> Result<Vec<f64>> {
    (1..=bench.suite.len())
        .map(|j| {
            let candidates = candidate_classes(&bench.suite, bench.suite.mode, after, j);
            evaluate(model, &bench.world, &bench.tests[j - 1], &candidates)
        })
        .collect()
}

/// Comparison rows: baselines and additive ablations of the full method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Zeroshot,
    Finetune,
    L2,
    EwcStatic,
    GiftCd,
    GiftCdIta,
    GiftCdAwc,
    GiftFull,
    WiseTeacher(f64),
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Zeroshot,
        Method::Finetune,
        Method::L2,
        Method::EwcStatic,
        Method::GiftCd,
        Method::GiftCdIta,
        Method::GiftCdAwc,
        Method::GiftFull,
        Method::WiseTeacher(0.5),
    ];

    /// Trainer settings for this method on top of `base`; `None` for
    /// methods that do not train.
    pub fn configure(&self, base: &TrainConfig) -> Option<TrainConfig> {
        let mut c = base.clone();
        let (cd, ita, mode) = match self {
            Method::Zeroshot => return None,
            Method::Finetune => (false, false, ConsolidationMode::None),
            Method::L2 => (false, false, ConsolidationMode::L2),
            Method::EwcStatic => (true, true, ConsolidationMode::EwcStatic),
            Method::GiftCd => (true, false, ConsolidationMode::L2),
            Method::GiftCdIta => (true, true, ConsolidationMode::L2),
            Method::GiftCdAwc => (true, false, ConsolidationMode::Awc),
            Method::GiftFull | Method::WiseTeacher(_) => (true, true, ConsolidationMode::Awc),
        };
        if !cd {
            c.loss.alpha = 0.0;
        }
        if !ita {
            c.loss.beta = 0.0;
        }
        c.consolidation.mode = mode;
        if mode == ConsolidationMode::None {
            c.consolidation.lambda = 0.0;
        }
        c.teacher = match self {
            Method::WiseTeacher(w) => TeacherMode::Wise(*w),
            _ => TeacherMode::Previous,
        };
        Some(c)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Zeroshot => f.write_str("zeroshot"),
            Method::Finetune => f.write_str("finetune"),
            Method::L2 => f.write_str("l2"),
            Method::EwcStatic => f.write_str("ewc_static"),
            Method::GiftCd => f.write_str("gift_cd"),
            Method::GiftCdIta => f.write_str("gift_cd_ita"),
            Method::GiftCdAwc => f.write_str("gift_cd_awc"),
            Method::GiftFull => f.write_str("gift_full"),
            Method::WiseTeacher(w) => write!(f, "wise_teacher({w})"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "zeroshot" => Method::Zeroshot,
            "finetune" => Method::Finetune,
            "l2" => Method::L2,
            "ewc_static" => Method::EwcStatic,
            "gift_cd" => Method::GiftCd,
            "gift_cd_ita" => Method::GiftCdIta,
            "gift_cd_awc" => Method::GiftCdAwc,
            "gift_full" => Method::GiftFull,
            "wise_teacher" => Method::WiseTeacher(0.5),
            _ => {
                let w = s
                    .strip_prefix("wise_teacher(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))?;
                let w: f64 = w
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad wise_teacher weight in {s:?}")))?;
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Config(format!("wise_teacher weight {w} outside [0, 1]")));
                }
                Method::WiseTeacher(w)
            }
        })
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything shared by the methods of one seed: the world, the suite,
/// the pretrained model and the test splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub world: World,
    pub suite: TaskSuite,
    pub suite_config: SuiteConfig,
    pub theta0: ModelSnapshot,
    pub pretrain_losses: Vec<f64>,
    /// Test split of every task, in order.
    pub tests: Vec<Dataset>,
}

pub fn prepare(
    seed: u64,
    world_config: &WorldConfig,
    suite_config: &SuiteConfig,
    arch: Architecture,
    pretrain_config: &PretrainConfig,
) -> Result<Prepared> {
    let world = build_world(seed, world_config)?;
    let suite = make_task_suite(&world, suite_config)?;
    let init = TwoTowerModel::new(arch, rng::derive_u64(seed, "model-seed", 0))?;
    let pre = pretrain(&init, &world, &suite.base_classes, pretrain_config, seed)?;
    let tests = suite
        .tasks
        .iter()
        .map(|t| task_split(&world, t, Split::Test))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        seed,
        world,
        suite,
        suite_config: suite_config.clone(),
        theta0: pre.snapshot,
        pretrain_losses: pre.losses,
        tests,
    })
}

/// Seed of the training streams of `method`.
pub fn method_seed(master: u64, method: &Method) -> u64 {
    rng::derive_u64(master, "method", rng::stable_hash(&method.to_string()))
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub resolved: Option<TrainConfig>,
    pub matrix: AccuracyMatrix,
    pub report: MetricReport,
    pub traces: Vec<TaskTrace>,
    pub snapshots: Vec<ModelSnapshot>,
}

/// Trains `method` through the suite and fills its accuracy matrix.
pub fn run_method(method: Method, bench: &Prepared, base: &TrainConfig) -> Result<MethodRun> {
    run_method_seeded(method, bench, base, method_seed(bench.seed, &method))
}

/// [`run_method`] with an explicit training seed.
pub fn run_method_seeded(
    method: Method,
    bench: &Prepared,
    base: &TrainConfig,
    seed: u64,
) -> Result<MethodRun> {
    let row0 = evaluate_row(bench.theta0.model(), bench, 0)?;
    let mut matrix = AccuracyMatrix::new(row0.clone())?;
    let resolved = method.configure(base);
    let (traces, snapshots) = match &resolved {
        None => {
            for _ in 0..bench.suite.len() {
                matrix.push_row(row0.clone())?;
            }
            (Vec::new(), Vec::new())
        }
        Some(config) => {
            let inputs = ContinualInputs {
                world: &bench.world,
                suite: &bench.suite,
                synthetic_per_task: bench.suite_config.synthetic_per_task,
                generator: bench.suite_config.generator,
            };
            let out = continual_fit_with(&bench.theta0, inputs, config, seed, |end| {
                matrix.push_row(evaluate_row(end.snapshot.model(), bench, end.position)?)
            })?;
            (out.traces, out.snapshots)
        }
    };
    let report = metrics(&matrix)?;
    Ok(MethodRun {
        method,
        resolved,
        matrix,
        report,
        traces,
        snapshots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng as _;

    /// Literal double loops over the matrix, no shared code with `metrics`.
    fn brute(m: &[Vec<f64>]) -> (f64, f64, f64) {
        let n = m.len();
        let mut transfer = 0.0;
        for j in 2..=n {
            let mut s = 0.0;
            for i in 1..j {
                s += m[i - 1][j - 1];
            }
            transfer += s / (j - 1) as f64;
        }
        transfer /= (n - 1) as f64;
        let mut last = 0.0;
        for j in 1..=n {
            last += m[n - 1][j - 1];
        }
        last /= n as f64;
        let mut avg = 0.0;
        for row in m {
            for v in row {
                avg += v;
            }
        }
        avg /= (n * n) as f64;
        (transfer, avg, last)
    }

    #[test]
    fn hand_example() {
        let m = AccuracyMatrix::from_task_rows(vec![vec![0.5, 0.3], vec![0.2, 0.6]]).unwrap();
        let r = metrics(&m).unwrap();
        assert!((r.transfer - 0.3).abs() < 1e-15);
        assert!((r.last - 0.4).abs() < 1e-15);
        assert!((r.avg - 0.4).abs() < 1e-15);
    }

    #[test]
    fn constant_matrix_metrics_are_exact() {
        for c in [0.0, 0.1, 0.25, 1.0 / 3.0, 0.5, 0.7, 1.0] {
            for n in 2..6 {
                let m = AccuracyMatrix::from_task_rows(vec![vec![c; n]; n]).unwrap();
                let r = metrics(&m).unwrap();
                assert_eq!((r.transfer, r.avg, r.last), (c, c, c));
            }
        }
    }

    #[test]
    fn metrics_match_brute_force() {
        let mut r = rng::stream(11, "metric-oracle", 0);
        for _ in 0..1000 {
            let n = r.random_range(2..=8);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random::<f64>()).collect()).collect();
            let report = metrics(&AccuracyMatrix::from_task_rows(rows.clone()).unwrap()).unwrap();
            let (t, a, l) = brute(&rows);
            assert!((report.transfer - t).abs() < 1e-12);
            assert!((report.avg - a).abs() < 1e-12);
            assert!((report.last - l).abs() < 1e-12);
        }
    }

    #[test]
    fn row_zero_is_excluded() {
        let rows = vec![vec![0.5, 0.3], vec![0.2, 0.6]];
        let mut full = vec![vec![1.0, 1.0]];
        full.extend(rows.clone());
        let a = metrics(&AccuracyMatrix::from_rows(full).unwrap()).unwrap();
        let b = metrics(&AccuracyMatrix::from_task_rows(rows).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn metric_errors() {
        let one = AccuracyMatrix::from_task_rows(vec![vec![0.5]]).unwrap();
        assert!(metrics(&one).is_err());
        let partial = AccuracyMatrix::new(vec![0.1, 0.2]).unwrap();
        assert!(metrics(&partial).is_err());
        assert!(AccuracyMatrix::new(vec![1.5]).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let m = AccuracyMatrix::from_rows(vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]]).unwrap();
        let text = m.to_csv();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(AccuracyMatrix::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn report_json_has_expected_fields() {
        let m = AccuracyMatrix::from_task_rows(vec![vec![0.5, 0.3], vec![0.2, 0.6]]).unwrap();
        let json = metrics(&m).unwrap().to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for k in ["transfer", "avg", "last", "per_task"] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert!(MetricReport::from_json(r#"{"transfer":0.1,"avg":0.2}"#).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!("wise_teacher(0.25)".parse::<Method>().unwrap(), Method::WiseTeacher(0.25));
        assert!(matches!("lwf".parse::<Method>(), Err(Error::Config(_))));
        assert!("wise_teacher(2)".parse::<Method>().is_err());
    }

    #[test]
    fn resolved_configs() {
        let base = TrainConfig::default();
        let ft = Method::Finetune.configure(&base).unwrap();
        assert_eq!((ft.loss.alpha, ft.loss.beta, ft.consolidation.lambda), (0.0, 0.0, 0.0));
        let full = Method::GiftFull.configure(&base).unwrap();
        assert_eq!((full.loss.alpha, full.loss.beta), (1.0, 0.25));
        assert_eq!(full.consolidation.mode, ConsolidationMode::Awc);
        let l2 = Method::L2.configure(&base).unwrap();
        assert_eq!((l2.loss.alpha, l2.loss.beta), (0.0, 0.0));
        assert_eq!(l2.consolidation.mode, ConsolidationMode::L2);
        assert!(Method::Zeroshot.configure(&base).is_none());
        let wise = Method::WiseTeacher(0.3).configure(&base).unwrap();
        assert_eq!(wise.teacher, TeacherMode::Wise(0.3));
    }

    proptest! {
        #[test]
        fn raising_an_upper_cell_raises_transfer_and_avg(
            n in 2usize..6,
            cells in proptest::collection::vec(0.0f64..0.9, 36),
            pick in 0usize..100,
            bump in 0.01f64..0.1,
        ) {
            let rows: Vec<Vec<f64>> = (0..n).map(|i| cells[i * n..(i + 1) * n].to_vec()).collect();
            let upper: Vec<(usize, usize)> = (0..n - 1).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
            let (i, j) = upper[pick % upper.len()];
            let mut raised = rows.clone();
            raised[i][j] += bump;
            let a = metrics(&AccuracyMatrix::from_task_rows(rows).unwrap()).unwrap();
            let b = metrics(&AccuracyMatrix::from_task_rows(raised).unwrap()).unwrap();
            prop_assert!(b.transfer > a.transfer);
            prop_assert!(b.avg > a.avg);
            prop_assert_eq!(a.last, b.last);
        }

        #[test]
        fn metrics_lie_within_cell_range(cells in proptest::collection::vec(0.0f64..=1.0, 16)) {
            let rows: Vec<Vec<f64>> = cells.chunks(4).map(<[f64]>::to_vec).collect();
            let lo = cells.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = cells.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let r = metrics(&AccuracyMatrix::from_task_rows(rows).unwrap()).unwrap();
            for v in [r.transfer, r.avg, r.last] {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
