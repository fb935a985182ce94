//! Post-hoc diagnostics: loss over a plane through three parameter vectors
//! and teacher-student cross-entropy traces across task boundaries.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::{ParameterVector, TwoTowerModel};
use crate::trainer::TaskTrace;
use crate::worldgen::{Dataset, TaskSpec, World};

/// Orthonormal frame of the plane through `W₀, W₁, W₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneBasis {
    origin: Vec<f64>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    /// In-plane coordinates of `W₀, W₁, W₂`.
    anchors: [(f64, f64); 3],
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Gram–Schmidt on `W₁ − W₀` and `W₂ − W₀`.
pub fn plane_basis(
    w0: &ParameterVector,
    w1: &ParameterVector,
    w2: &ParameterVector,
) -> Result<PlaneBasis> {
    let d1 = w1.sub(w0)?;
    let d2 = w2.sub(w0)?;
    let n1 = norm(&d1);
    let n2 = norm(&d2);
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegeneratePlane("an anchor coincides with the origin".into()));
    }
    let u1: Vec<f64> = d1.iter().map(|v| v / n1).collect();
    let a = dot(&d2, &u1);
    let residual: Vec<f64> = d2.iter().zip(&u1).map(|(v, u)| v - a * u).collect();
    let r = norm(&residual);
    // sin of the angle between the two directions
    if r / n2 <= 1e-6 {
        return Err(Error::DegeneratePlane(format!(
            "directions are collinear (sin angle {:.3e})",
            r / n2
        )));
    }
    let u2: Vec<f64> = residual.iter().map(|v| v / r).collect();
    let b = dot(&d2, &u2);
    Ok(PlaneBasis {
        origin: w0.as_slice().to_vec(),
        u1,
        u2,
        anchors: [(0.0, 0.0), (n1, 0.0), (a, b)],
    })
}

impl PlaneBasis {
    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn directions(&self) -> (&[f64], &[f64]) {
        (&self.u1, &self.u2)
    }

    pub fn anchors(&self) -> [(f64, f64); 3] {
        self.anchors
    }

    /// `W₀ + x·u₁ + y·u₂`.
    pub fn point(&self, x: f64, y: f64) -> ParameterVector {
        ParameterVector::new(
            self.origin
                .iter()
                .zip(&self.u1)
                .zip(&self.u2)
                .map(|((o, a), b)| o + x * a + y * b)
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Grid {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub resolution: (usize, usize),
}

impl Grid {
    /// Spans `[min − ½·span, max + ½·span]` of the anchor coordinates on
    /// each axis.
    pub fn around(basis: &PlaneBasis, resolution: (usize, usize)) -> Self {
        let axis = |f: fn(&(f64, f64)) -> f64| {
            let vals = basis.anchors.iter().map(f);
            let lo = vals.clone().fold(f64::INFINITY, f64::min);
            let hi = vals.fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            (lo - 0.5 * span, hi + 0.5 * span)
        };
        Self {
            x: axis(|p| p.0),
            y: axis(|p| p.1),
            resolution,
        }
    }

    fn coord(range: (f64, f64), n: usize, i: usize) -> f64 {
        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlicePoint {
    pub x: f64,
    pub y: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Landscape {
    pub grid: Grid,
    /// Row-major over `y`, then `x`.
    pub points: Vec<SlicePoint>,
    /// Loss at `W₀, W₁, W₂`, evaluated at their exact plane coordinates.
    pub anchors: [SlicePoint; 3],
}

/// Evaluates `loss` at every grid point and at the three anchors. Points
/// are evaluated in parallel; the result does not depend on scheduling.
pub fn landscape_slice<F>(basis: &PlaneBasis, loss: F, grid: Grid) -> Result<Landscape>
where
    F: Fn(&ParameterVector) -> Result<f64> + Sync,
{
    let (nx, ny) = grid.resolution;
    if nx < 2 || ny < 2 {
        return Err(Error::Contract(format!(
            "grid resolution must be at least 2 per axis, got {nx}×{ny}"
        )));
    }
    let eval = |x: f64, y: f64| -> Result<SlicePoint> {
        Ok(SlicePoint {
            x,
            y,
            loss: loss(&basis.point(x, y))?,
        })
    };
    let points = (0..nx * ny)
        .into_par_iter()
        .map(|k| eval(Grid::coord(grid.x, nx, k % nx), Grid::coord(grid.y, ny, k / nx)))
        .collect::<Result<Vec<_>>>()?;
    let [a, b, c] = basis.anchors;
    Ok(Landscape {
        grid,
        points,
        anchors: [eval(a.0, a.1)?, eval(b.0, b.1)?, eval(c.0, c.1)?],
    })
}

impl Landscape {
    /// Heightfield rows `x,y,loss`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "x,y,loss")?;
        for p in &self.points {
            writeln!(out, "{},{},{}", p.x, p.y, p.loss)?;
        }
        Ok(())
    }

    /// Rows `anchor,x,y,loss` for the three models spanning the plane.
    pub fn write_anchors_csv<W: Write>(&self, out: &mut W, names: [&str; 3]) -> std::io::Result<()> {
        writeln!(out, "anchor,x,y,loss")?;
        for (name, p) in names.iter().zip(&self.anchors) {
            writeln!(out, "{name},{},{},{}", p.x, p.y, p.loss)?;
        }
        Ok(())
    }
}

/// Label-smoothed cross-entropy of `model` on a labeled task split.
pub fn dataset_ce(
    model: &TwoTowerModel,
    world: &World,
    task: &TaskSpec,
    data: &Dataset,
    smoothing: f64,
) -> Result<f64> {
    let z = model.encode_images(&data.images)?;
    let w = model.encode_texts(&world.class_texts(&task.classes))?;
    let mut g = Graph::new();
    let cos = g.constant(z.matmul_t(&w)?);
    let root = losses::ce_loss_node(&mut g, cos, &data.labels, model.temperature(), smoothing)?;
    g.value(root).item()
}

/// Loss closure over parameter vectors for a fixed architecture and
/// temperature.
pub fn ce_closure<'a>(
    template: &'a TwoTowerModel,
    world: &'a World,
    task: &'a TaskSpec,
    data: &'a Dataset,
    smoothing: f64,
) -> impl Fn(&ParameterVector) -> Result<f64> + Sync + 'a {
    move |theta: &ParameterVector| {
        let model = TwoTowerModel::from_parts(
            template.arch(),
            template.seed(),
            theta.clone(),
            template.log_temperature(),
        )?;
        dataset_ce(&model, world, task, data, smoothing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TracePoint {
    pub global_step: usize,
    pub task: usize,
    pub step: usize,
    pub distill_xent: f64,
    /// First step of its task.
    pub task_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillReport {
    pub series: Vec<TracePoint>,
    /// `(task, distill_xent at the task's first step)`.
    pub task_starts: Vec<(usize, f64)>,
}

/// Concatenates the per-task cross-entropy series.
pub fn distill_trace_report(traces: &[TaskTrace]) -> Result<DistillReport> {
    let mut series = Vec::new();
    let mut task_starts = Vec::new();
    for trace in traces {
        let first = trace
            .rows
            .first()
            .ok_or_else(|| Error::Format(format!("trace of task {} is empty", trace.task)))?;
        task_starts.push((trace.task, first.distill_xent));
        for (k, r) in trace.rows.iter().enumerate() {
            series.push(TracePoint {
                global_step: series.len(),
                task: trace.task,
                step: r.step,
                distill_xent: r.distill_xent,
                task_start: k == 0,
            });
        }
    }
    Ok(DistillReport {
        series,
        task_starts,
    })
}

/// Long-format CSV of one or more labeled reports, for paired plotting.
pub fn write_reports_csv<W: Write>(out: &mut W, reports: &[(&str, &DistillReport)]) -> std::io::Result<()> {
    writeln!(out, "series,global_step,task,step,distill_xent,task_start")?;
    for (label, report) in reports {
        for p in &report.series {
            writeln!(
                out,
                "{label},{},{},{},{},{}",
                p.global_step,
                p.task,
                p.step,
                p.distill_xent,
                u8::from(p.task_start)
            )?;
        }
    }
    Ok(())
}

pub fn write_task_starts_csv<W: Write>(out: &mut W, reports: &[(&str, &DistillReport)]) -> std::io::Result<()> {
    writeln!(out, "series,task,initial_distill_xent")?;
    for (label, report) in reports {
        for (task, v) in &report.task_starts {
            writeln!(out, "{label},{task},{v}")?;
        }
    }
    Ok(())
}

/// Lowest grid point.
pub fn min_point(points: &[SlicePoint]) -> Option<SlicePoint> {
    points
        .iter()
        .copied()
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::trainer::TraceRow;
    use rand::Rng as _;

    fn random_vec(r: &mut rng::Rng, n: usize) -> ParameterVector {
        ParameterVector::new((0..n).map(|_| r.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn basis_is_orthonormal_and_reconstructs() {
        let mut r = rng::stream(3, "plane", 0);
        for _ in 0..100 {
            let n = r.random_range(3..40);
            let (w0, w1, w2) = (random_vec(&mut r, n), random_vec(&mut r, n), random_vec(&mut r, n));
            let b = plane_basis(&w0, &w1, &w2).unwrap();
            let (u1, u2) = b.directions();
            assert!(dot(u1, u2).abs() < 1e-9);
            assert!((norm(u1) - 1.0).abs() < 1e-12);
            assert!((norm(u2) - 1.0).abs() < 1e-12);
            for (w, (x, y)) in [&w0, &w1, &w2].into_iter().zip(b.anchors()) {
                let back = b.point(x, y);
                let err: f64 = back.sub(w).unwrap().iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(err <= 1e-9 * norm(w.as_slice()).max(1.0));
            }
            assert_eq!(b.anchors()[1].1, 0.0);
        }
    }

    #[test]
    fn orthogonal_directions_are_kept() {
        let w0 = ParameterVector::new(vec![1.0, 1.0, 1.0]);
        let w1 = ParameterVector::new(vec![3.0, 1.0, 1.0]);
        let w2 = ParameterVector::new(vec![1.0, 1.0, 4.0]);
        let b = plane_basis(&w0, &w1, &w2).unwrap();
        assert_eq!(b.directions().1, &[0.0, 0.0, 1.0]);
        assert_eq!(b.anchors(), [(0.0, 0.0), (2.0, 0.0), (0.0, 3.0)]);
    }

    #[test]
    fn collinear_inputs_are_degenerate() {
        let w0 = ParameterVector::new(vec![0.0, 0.0]);
        let w1 = ParameterVector::new(vec![1.0, 1.0]);
        let w2 = ParameterVector::new(vec![2.0, 2.0]);
        assert!(matches!(plane_basis(&w0, &w1, &w2), Err(Error::DegeneratePlane(_))));
        assert!(plane_basis(&w0, &w0, &w2).is_err());
    }

    #[test]
    fn slice_matches_direct_evaluation() {
        let mut r = rng::stream(4, "slice", 0);
        let (w0, w1, w2) = (random_vec(&mut r, 5), random_vec(&mut r, 5), random_vec(&mut r, 5));
        let b = plane_basis(&w0, &w1, &w2).unwrap();
        let loss = |t: &ParameterVector| Ok(t.as_slice().iter().map(|v| (v - 0.3).powi(2)).sum::<f64>());
        let grid = Grid::around(&b, (7, 5));
        let land = landscape_slice(&b, loss, grid).unwrap();
        assert_eq!(land.points.len(), 35);
        for (p, w) in land.anchors.iter().zip([&w0, &w1, &w2]) {
            assert!((p.loss - loss(w).unwrap()).abs() < 1e-9);
        }
        assert_eq!(land.anchors[0].loss, loss(&w0).unwrap());
        let p = land.points[17];
        let (u1, u2) = b.directions();
        let direct: Vec<f64> = (0..5).map(|i| w0.as_slice()[i] + p.x * u1[i] + p.y * u2[i]).collect();
        assert_eq!(p.loss, loss(&ParameterVector::new(direct)).unwrap());
        assert!(landscape_slice(&b, loss, Grid { resolution: (1, 5), ..grid }).is_err());
    }

    fn trace(task: usize, values: &[f64]) -> TaskTrace {
        TaskTrace {
            task,
            rows: values
                .iter()
                .enumerate()
                .map(|(step, &v)| TraceRow {
                    step,
                    lr: 0.0,
                    ce: 0.0,
                    cd: 0.0,
                    ita: 0.0,
                    awc: 0.0,
                    distill_xent: v,
                    fisher_min: 0.0,
                    fisher_mean: 0.0,
                    fisher_max: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn report_concatenates_with_markers() {
        let r = distill_trace_report(&[trace(1, &[3.0, 2.0, 1.0]), trace(2, &[4.0, 3.5])]).unwrap();
        assert_eq!(r.series.len(), 5);
        assert_eq!(r.task_starts, vec![(1, 3.0), (2, 4.0)]);
        assert!(r.series[3].task_start && !r.series[4].task_start);
        assert_eq!(r.series[4].global_step, 4);
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &[("awc", &r)]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 6);
        assert!(distill_trace_report(&[trace(1, &[])]).is_err());
    }
}
