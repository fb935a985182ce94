use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    ce_closure, distill_trace_report, landscape_slice, plane_basis, write_reports_csv,
    write_task_starts_csv, DistillReport, Grid, Landscape,
};
use crate::bench::{prepare, run_method, MethodRun, MetricReport, Method, Prepared};
use crate::error::{Error, Result};
use crate::model::ModelSnapshot;
use crate::rng;
use crate::trainer::TaskTrace;
use crate::worldgen::{build_world, make_task_suite, task_split, IncrementalMode, Split};

use super::config::ExperimentConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Writes `bytes` to a sibling temporary file and renames it over `path`,
/// so readers never observe a partial artifact.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&parent).map_err(|e| Error::io(&parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Directory-safe method name.
pub fn method_dir(method: &Method) -> String {
    method
        .to_string()
        .chars()
        .map(|c| match c {
            '(' => '_',
            ')' => ' ',
            c => c,
        })
        .filter(|c| *c != ' ')
        .collect()
}

/// Shape of the task suite; runs with equal shapes can be compared.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteShape {
    pub n_tasks: usize,
    pub classes_per_task: usize,
    pub base_classes: usize,
    pub mode: IncrementalMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedEntry {
    pub seed: u64,
    pub theta0: String,
    pub pretrain_loss: String,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEntry {
    pub method: Method,
    pub seed: u64,
    pub matrix: String,
    pub report: String,
    pub traces: Vec<String>,
    pub snapshots: Vec<String>,
    pub start_seconds: f64,
    pub end_seconds: f64,
}

/// Index of a finished run. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: String,
    /// SHA-256 of the stored config file's bytes.
    pub config_hash: String,
    pub suite: SuiteShape,
    pub seeds: Vec<u64>,
    pub prepared: Vec<PreparedEntry>,
    pub methods: Vec<MethodEntry>,
    pub summary: String,
    pub total_seconds: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        serde_json::from_str(&read(&path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn entry(&self, method: &Method, seed: u64) -> Result<&MethodEntry> {
        self.methods
            .iter()
            .find(|m| m.method == *method && m.seed == seed)
            .ok_or_else(|| Error::Contract(format!("run has no {method} result for seed {seed}")))
    }

    pub fn prepared_entry(&self, seed: u64) -> Result<&PreparedEntry> {
        self.prepared
            .iter()
            .find(|p| p.seed == seed)
            .ok_or_else(|| Error::Contract(format!("run has no seed {seed}")))
    }
}

/// In-memory results of [`execute`].
#[derive(Debug)]
pub struct RunResults {
    pub out: PathBuf,
    pub manifest: RunManifest,
    pub runs: Vec<MethodRun>,
}

fn seconds(start: Instant) -> f64 {
    start.elapsed().as_secs_f64()
}

fn shape(config: &ExperimentConfig) -> SuiteShape {
    SuiteShape {
        n_tasks: config.suite.n_tasks,
        classes_per_task: config.suite.classes_per_task,
        base_classes: config.suite.base_classes,
        mode: config.suite.mode,
    }
}

fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").expect("String write");
    }
    s
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-seed results and per-method medians.
fn summary_csv(config: &ExperimentConfig, runs: &[(u64, &MethodRun)]) -> String {
    let mut s = String::from("method,seed,transfer,avg,last\n");
    for (seed, r) in runs {
        writeln!(s, "{},{seed},{},{},{}", r.method, r.report.transfer, r.report.avg, r.report.last)
            .expect("String write");
    }
    for m in &config.methods {
        let mine: Vec<&MetricReport> =
            runs.iter().filter(|(_, r)| r.method == *m).map(|(_, r)| &r.report).collect();
        writeln!(
            s,
            "{m},median,{},{},{}",
            median(mine.iter().map(|r| r.transfer).collect()),
            median(mine.iter().map(|r| r.avg).collect()),
            median(mine.iter().map(|r| r.last).collect())
        )
        .expect("String write");
    }
    s
}

/// Runs every configured method on every replicate seed and writes the
/// artifacts under `out`. Results are identical with and without
/// `config.parallel`.
pub fn execute(config: &ExperimentConfig, out: &Path) -> Result<RunResults> {
    config.validate()?;
    let start = Instant::now();
    let config_text = config.to_toml();
    write_atomic(&out.join(CONFIG_FILE), config_text.as_bytes())?;

    let prepare_one = |seed: u64| -> Result<(Prepared, f64, f64)> {
        let t0 = seconds(start);
        let p = prepare(seed, &config.world, &config.suite, config.model, &config.pretrain)?;
        Ok((p, t0, seconds(start)))
    };
    let seeds = config.seeds();
    let prepared: Vec<(Prepared, f64, f64)> = if config.parallel {
        seeds.par_iter().map(|&s| prepare_one(s)).collect::<Result<_>>()?
    } else {
        seeds.iter().map(|&s| prepare_one(s)).collect::<Result<_>>()?
    };

    let jobs: Vec<(usize, Method)> = (0..prepared.len())
        .flat_map(|p| config.methods.iter().map(move |m| (p, *m)))
        .collect();
    let run_one = |&(p, m): &(usize, Method)| -> Result<(MethodRun, f64, f64)> {
        let t0 = seconds(start);
        let r = run_method(m, &prepared[p].0, &config.train)?;
        Ok((r, t0, seconds(start)))
    };
    let runs: Vec<(MethodRun, f64, f64)> = if config.parallel {
        jobs.par_iter().map(run_one).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run_one).collect::<Result<_>>()?
    };

    let mut prepared_entries = Vec::new();
    for (p, t0, t1) in &prepared {
        let dir = format!("seed_{}", p.seed);
        let theta0 = format!("{dir}/theta0.json");
        let pretrain_loss = format!("{dir}/pretrain_loss.csv");
        write_atomic(&out.join(&theta0), p.theta0.to_json().as_bytes())?;
        write_atomic(&out.join(&pretrain_loss), loss_csv(&p.pretrain_losses).as_bytes())?;
        prepared_entries.push(PreparedEntry {
            seed: p.seed,
            theta0,
            pretrain_loss,
            start_seconds: *t0,
            end_seconds: *t1,
        });
    }

    let mut entries = Vec::new();
    for ((p, _), (run, t0, t1)) in jobs.iter().zip(&runs) {
        let seed = prepared[*p].0.seed;
        let dir = format!("seed_{seed}/{}", method_dir(&run.method));
        let matrix = format!("{dir}/matrix.csv");
        let report = format!("{dir}/report.json");
        write_atomic(&out.join(&matrix), run.matrix.to_csv().as_bytes())?;
        write_atomic(&out.join(&report), run.report.to_json().as_bytes())?;
        let mut traces = Vec::new();
        for t in &run.traces {
            let path = format!("{dir}/traces/task_{}.csv", t.task);
            write_atomic(&out.join(&path), t.to_csv().as_bytes())?;
            traces.push(path);
        }
        let mut snapshots = Vec::new();
        if config.save_snapshots {
            for s in &run.snapshots {
                let path = format!("{dir}/snapshots/task_{}.json", s.task());
                write_atomic(&out.join(&path), s.to_json().as_bytes())?;
                snapshots.push(path);
            }
        }
        entries.push(MethodEntry {
            method: run.method,
            seed,
            matrix,
            report,
            traces,
            snapshots,
            start_seconds: *t0,
            end_seconds: *t1,
        });
    }

    let seeded: Vec<(u64, &MethodRun)> = jobs
        .iter()
        .zip(&runs)
        .map(|((p, _), (r, _, _))| (prepared[*p].0.seed, r))
        .collect();
    let summary = "summary.csv".to_string();
    write_atomic(&out.join(&summary), summary_csv(config, &seeded).as_bytes())?;

    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config: CONFIG_FILE.to_string(),
        config_hash: rng::sha256_hex(config_text.as_bytes()),
        suite: shape(config),
        seeds,
        prepared: prepared_entries,
        methods: entries,
        summary,
        total_seconds: seconds(start),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&out.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(RunResults {
        out: out.to_path_buf(),
        manifest,
        runs: runs.into_iter().map(|(r, _, _)| r).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub run: String,
    pub method: Method,
    pub seeds: usize,
    pub transfer: f64,
    pub avg: f64,
    pub last: f64,
    pub d_transfer: f64,
    pub d_avg: f64,
    pub d_last: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub baseline: Method,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,method,seeds,transfer,avg,last,d_transfer,d_avg,d_last\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.run, r.method, r.seeds, r.transfer, r.avg, r.last, r.d_transfer, r.d_avg, r.d_last
            )
            .expect("String write");
        }
        s
    }

    /// Aligned text table with percentages and signed deltas.
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
        let mwidth = self.rows.iter().map(|r| r.method.to_string().len()).max().unwrap_or(6).max(6);
        let mut s = format!(
            "{:width$}  {:mwidth$}  {:>8} {:>8} {:>8}  {:>7} {:>7} {:>7}\n",
            "run", "method", "Transfer", "Avg", "Last", "ΔTr", "ΔAvg", "ΔLast"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:width$}  {:mwidth$}  {:>8.1} {:>8.1} {:>8.1}  {:>+7.1} {:>+7.1} {:>+7.1}",
                r.run,
                r.method.to_string(),
                100.0 * r.transfer,
                100.0 * r.avg,
                100.0 * r.last,
                100.0 * r.d_transfer,
                100.0 * r.d_avg,
                100.0 * r.d_last
            )
            .expect("String write");
        }
        writeln!(s, "deltas are method − {} (first run), in points", self.baseline).expect("String write");
        s
    }
}

/// Median Transfer/Avg/Last per method and run, with deltas against
/// `baseline` in the first run. Without a baseline, each method is
/// compared with itself in the first run.
pub fn compare(manifests: &[PathBuf], baseline: Option<Method>) -> Result<Comparison> {
    if manifests.len() < 2 {
        return Err(Error::Contract("compare needs at least two manifests".into()));
    }
    let mut loaded = Vec::new();
    for path in manifests {
        let dir = if path.is_dir() { path.clone() } else { path.parent().map(Path::to_path_buf).unwrap_or_default() };
        loaded.push((dir, RunManifest::load(path)?));
    }
    let first_shape = loaded[0].1.suite.clone();
    for (dir, m) in &loaded[1..] {
        if m.suite != first_shape {
            return Err(Error::Contract(format!(
                "{} has suite {:?}, first run has {:?}",
                dir.display(),
                m.suite,
                first_shape
            )));
        }
    }
    let mut rows = Vec::new();
    for (k, (dir, m)) in loaded.iter().enumerate() {
        let label = format!("{k}:{}", dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
        let mut methods: Vec<Method> = Vec::new();
        for e in &m.methods {
            if !methods.contains(&e.method) {
                methods.push(e.method);
            }
        }
        for method in methods {
            let reports = m
                .methods
                .iter()
                .filter(|e| e.method == method)
                .map(|e| MetricReport::from_json(&read(&dir.join(&e.report))?))
                .collect::<Result<Vec<_>>>()?;
            rows.push(ComparisonRow {
                run: label.clone(),
                method,
                seeds: reports.len(),
                transfer: median(reports.iter().map(|r| r.transfer).collect()),
                avg: median(reports.iter().map(|r| r.avg).collect()),
                last: median(reports.iter().map(|r| r.last).collect()),
                d_transfer: 0.0,
                d_avg: 0.0,
                d_last: 0.0,
            });
        }
    }
    let first_run = rows[0].run.clone();
    let lookup = |m: &Method| {
        rows.iter()
            .find(|r| r.run == first_run && r.method == *m)
            .map(|r| (r.transfer, r.avg, r.last))
            .ok_or_else(|| Error::Contract(format!("baseline {m} is not in the first run")))
    };
    let base_of: Vec<(f64, f64, f64)> = rows
        .iter()
        .map(|r| lookup(&baseline.unwrap_or(r.method)))
        .collect::<Result<_>>()?;
    for (r, (t, a, l)) in rows.iter_mut().zip(base_of) {
        r.d_transfer = r.transfer - t;
        r.d_avg = r.avg - a;
        r.d_last = r.last - l;
    }
    Ok(Comparison {
        baseline: baseline.unwrap_or(rows[0].method),
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct LandscapeOptions {
    pub seed: u64,
    /// Method of the second anchor; the first is the pretrained model.
    pub a: Method,
    /// Method of the third anchor.
    pub b: Method,
    /// Snapshot position of both trained anchors, and the task whose train
    /// loss is sliced.
    pub task: usize,
    /// Task whose test loss is sliced; defaults to the last task.
    pub unlearned: Option<usize>,
    pub resolution: usize,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct LandscapeOutput {
    pub dir: PathBuf,
    pub train: Landscape,
    pub test: Landscape,
}

fn load_run(run: &Path) -> Result<(RunManifest, ExperimentConfig)> {
    let manifest = RunManifest::load(run)?;
    let config = ExperimentConfig::load(&run.join(&manifest.config))?;
    Ok((manifest, config))
}

fn snapshot_at(run: &Path, manifest: &RunManifest, method: &Method, seed: u64, task: usize) -> Result<ModelSnapshot> {
    let entry = manifest.entry(method, seed)?;
    let rel = entry
        .snapshots
        .get(task.wrapping_sub(1))
        .ok_or_else(|| Error::Contract(format!("{method} has no snapshot for task {task}")))?;
    ModelSnapshot::load(&run.join(rel))
}

/// Heightfields of a learned task's train loss and an unlearned task's
/// test loss over the plane through `θ⁰` and two trained snapshots.
pub fn landscape(run: &Path, opts: &LandscapeOptions) -> Result<LandscapeOutput> {
    let (manifest, config) = load_run(run)?;
    let n = config.suite.n_tasks;
    let unlearned = opts.unlearned.unwrap_or(n);
    if opts.task == 0 || opts.task > n || unlearned == 0 || unlearned > n {
        return Err(Error::Contract(format!("task indices must lie in 1..={n}")));
    }
    let theta0 = ModelSnapshot::load(&run.join(&manifest.prepared_entry(opts.seed)?.theta0))?;
    let w1 = snapshot_at(run, &manifest, &opts.a, opts.seed, opts.task)?;
    let w2 = snapshot_at(run, &manifest, &opts.b, opts.seed, opts.task)?;
    let world = build_world(opts.seed, &config.world)?;
    let suite = make_task_suite(&world, &config.suite)?;
    let learned = &suite.tasks[opts.task - 1];
    let later = &suite.tasks[unlearned - 1];
    let train_data = task_split(&world, learned, Split::Train)?;
    let test_data = task_split(&world, later, Split::Test)?;
    let basis = plane_basis(theta0.params(), w1.params(), w2.params())?;
    let grid = Grid::around(&basis, (opts.resolution, opts.resolution));
    let smoothing = config.train.loss.label_smoothing;
    let template = theta0.model();
    let train = landscape_slice(&basis, ce_closure(template, &world, learned, &train_data, smoothing), grid)?;
    let test = landscape_slice(&basis, ce_closure(template, &world, later, &test_data, smoothing), grid)?;

    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| run.join("landscape").join(format!("seed_{}", opts.seed)));
    let names = ["theta0", &opts.a.to_string(), &opts.b.to_string()];
    for (tag, land) in [(format!("train_task_{}", opts.task), &train), (format!("test_task_{unlearned}"), &test)] {
        let mut buf = Vec::new();
        land.write_csv(&mut buf).expect("Vec write");
        write_atomic(&dir.join(format!("{tag}_heightfield.csv")), &buf)?;
        let mut buf = Vec::new();
        land.write_anchors_csv(&mut buf, names).expect("Vec write");
        write_atomic(&dir.join(format!("{tag}_anchors.csv")), &buf)?;
    }
    Ok(LandscapeOutput { dir, train, test })
}

#[derive(Debug)]
pub struct TraceOutput {
    pub dir: PathBuf,
    pub reports: Vec<(Method, DistillReport)>,
}

/// Teacher-student cross-entropy series of one or more methods.
pub fn trace(run: &Path, seed: u64, methods: &[Method], out: Option<&Path>) -> Result<TraceOutput> {
    let manifest = RunManifest::load(run)?;
    let mut reports = Vec::new();
    for m in methods {
        let entry = manifest.entry(m, seed)?;
        if entry.traces.is_empty() {
            return Err(Error::Contract(format!("{m} has no training traces")));
        }
        let traces = entry
            .traces
            .iter()
            .enumerate()
            .map(|(k, rel)| TaskTrace::from_csv(k + 1, &read(&run.join(rel))?))
            .collect::<Result<Vec<_>>>()?;
        reports.push((*m, distill_trace_report(&traces)?));
    }
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.join("trace").join(format!("seed_{seed}")));
    let names: Vec<String> = reports.iter().map(|(m, _)| m.to_string()).collect();
    let labeled: Vec<(&str, &DistillReport)> =
        names.iter().zip(&reports).map(|(n, (_, r))| (n.as_str(), r)).collect();
    let mut buf = Vec::new();
    write_reports_csv(&mut buf, &labeled).expect("Vec write");
    write_atomic(&dir.join("distill_trace.csv"), &buf)?;
    let mut buf = Vec::new();
    write_task_starts_csv(&mut buf, &labeled).expect("Vec write");
    write_atomic(&dir.join("distill_task_starts.csv"), &buf)?;
    Ok(TraceOutput { dir, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "second");
        let leftovers = std::fs::read_dir(dir.path().join("a")).unwrap().count();
        assert_eq!(leftovers, 1);
    }

    #[test]
    fn method_dirs_are_plain() {
        assert_eq!(method_dir(&Method::WiseTeacher(0.5)), "wise_teacher_0.5");
        assert_eq!(method_dir(&Method::GiftFull), "gift_full");
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
