use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard below which a row is considered to have no direction.
pub const EPS_NORM: f64 = 1e-8;

/// Floor applied to probabilities before taking a logarithm.
pub const EPS_PROB: f64 = 1e-12;

/// Dense row-major `f64` tensor.
///
/// Every operation in the lab works on rank-2 tensors; a scalar is any
/// tensor with exactly one element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            shape: vec![rows, cols],
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// A single row `[1 × n]`.
    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values.to_vec(),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!(
                "expected a rank-2 tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn row_slice(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Builds a new matrix from a subset of rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row_slice(i));
        }
        Tensor {
            shape: vec![indices.len(), c],
            data,
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: [{m}x{k}] * [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "transposed matmul row counts differ: {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (n, k2) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul with transpose: inner dimensions differ ({k} vs {k2})"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a `[1 × n]` row to every row of an `[m × n]` matrix.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, n) = self.dims2()?;
        if bias.len() != n {
            return Err(Error::Dimension(format!(
                "bias of length {} cannot broadcast over {n} columns",
                bias.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn row_norms(&self) -> Result<Vec<f64>> {
        let (_, n) = self.dims2()?;
        Ok(self
            .data
            .chunks(n.max(1))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }

    pub fn l2_normalize_rows(&self) -> Result<Tensor> {
        let norms = self.row_norms()?;
        self.divide_rows(&norms)
    }

    pub(crate) fn divide_rows(&self, norms: &[f64]) -> Result<Tensor> {
        let n = self.cols();
        let mut out = self.clone();
        for (i, (row, &norm)) in out.data.chunks_mut(n.max(1)).zip(norms).enumerate() {
            if !(norm > EPS_NORM) {
                return Err(Error::DegenerateInput(format!(
                    "row {i} has norm {norm:e}, below guard {EPS_NORM:e}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        Ok(out)
    }

    /// Row-wise `softmax(x / temperature)` with max subtraction.
    pub fn softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let (_, n) = self.dims2()?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = ((*v - max) / temperature).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(out)
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax_rows(&self, temperature: f64) -> Result<Tensor> {
        check_temperature(temperature)?;
        let (_, n) = self.dims2()?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(n.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            for v in row.iter_mut() {
                *v = (*v - max) / temperature - lse;
            }
        }
        Ok(out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub(crate) fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive and finite, got {temperature}"
        )))
    }
}

/// Fails unless every row of `p` sums to one within `1e-6` and has no
/// negative entries.
pub(crate) fn check_row_stochastic(p: &Tensor, what: &str) -> Result<()> {
    let n = p.cols().max(1);
    for (i, row) in p.data().chunks(n).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > 1e-6 || row.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract(format!(
                "{what} row {i} is not a distribution (sum {total})"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(Tensor::identity(2).matmul(&x).unwrap(), x);
    }

    #[test]
    fn basis_selection() {
        let a = Tensor::from_rows(&[[1.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[[5.0], [7.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut r = rng::stream(3, "matmul", 0);
        let a = Tensor::matrix(3, 4, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::matrix(4, 2, (0..8).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let fast = a.matmul(&b).unwrap();
        for (x, y) in fast.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = a.transpose().unwrap();
        let bt = b.transpose().unwrap();
        for (x, y) in at.t_matmul(&b).unwrap().data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.matmul_t(&bt).unwrap().data().iter().zip(fast.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros(2, 3);
        assert!(matches!(a.matmul(&Tensor::zeros(2, 3)), Err(Error::Dimension(_))));
    }

    #[test]
    fn normalize_three_four_five() {
        let x = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        let y = x.l2_normalize_rows().unwrap();
        assert!((y.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((y.at(0, 1) - 0.8).abs() < 1e-15);
        let unit = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert_eq!(unit.l2_normalize_rows().unwrap(), unit);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let x = Tensor::zeros(1, 3);
        assert!(matches!(x.l2_normalize_rows(), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn softmax_symmetry_and_direct_formula() {
        let z = Tensor::from_rows(&[[0.0, 0.0]]).unwrap().softmax_rows(1.0).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5]);
        let u = Tensor::from_rows(&[[2.5, 2.5, 2.5]]).unwrap().softmax_rows(0.3).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = Tensor::from_rows(&[[1.0, 2.0]]).unwrap().softmax_rows(1.0).unwrap();
        let denom = 1f64.exp() + 2f64.exp();
        assert!((s.at(0, 0) - 1f64.exp() / denom).abs() < 1e-12);
        assert!((s.at(0, 1) - 2f64.exp() / denom).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::zeros(1, 2);
        assert!(matches!(x.softmax_rows(0.0), Err(Error::Parameter(_))));
        assert!(matches!(x.softmax_rows(-1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn log_softmax_agrees_with_softmax() {
        let x = Tensor::from_rows(&[[0.3, -1.2, 2.0], [5.0, 5.0, -5.0]]).unwrap();
        let a = x.softmax_rows(0.07).unwrap();
        let b = x.log_softmax_rows(0.07).unwrap();
        for (p, lp) in a.data().iter().zip(b.data()) {
            assert!((p.ln() - lp).abs() < 1e-9);
        }
    }
}
