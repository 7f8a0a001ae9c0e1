//! Multi-kernel maximum mean discrepancy and the squared-error alternative.
//!
//! The biased MMD² estimator over a bank of Gaussian kernels
//! `k(x, y) = exp(-|x - y|² / (2 s²))` with `s² = multiplier * base`, where the
//! base is the median pairwise squared distance of the pooled sample. The
//! analytic gradient includes the dependence of the median on the samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise squared distance of the pooled sample; falls back to
    /// 1.0 when that median is zero.
    Median,
    /// Fixed squared bandwidth.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub multipliers: Vec<f64>,
    pub base: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            base: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    /// One Gaussian kernel of fixed width `sigma`.
    pub fn single(sigma: f64) -> Self {
        KernelConfig {
            multipliers: vec![1.0],
            base: Bandwidth::Fixed(sigma * sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() || self.multipliers.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::invalid("kernel multipliers must be positive and non-empty"));
        }
        if let Bandwidth::Fixed(b) = self.base {
            if !(b > 0.0) {
                return Err(Error::invalid(format!("fixed bandwidth must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Value and gradients of a sample discrepancy.
#[derive(Clone, Debug)]
pub struct DiscrepancyGrad<T> {
    pub value: T,
    pub grad_x: Tensor<T>,
    pub grad_y: Tensor<T>,
}

fn rows_of<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.rows(), t.row_len())
}

fn check_pair<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, d) = rows_of(x);
    let (m, dy) = rows_of(y);
    if n == 0 || m == 0 {
        return Err(Error::EmptyDataset("MMD needs at least one sample per side".into()));
    }
    if d != dy {
        return Err(Error::ShapeMismatch {
            expected: vec![m, d],
            actual: vec![m, dy],
        });
    }
    Ok((n, m, d))
}

/// Pairwise squared distances of the rows of `z` (`rows x d`), in f64.
fn pairwise_sq_dists<T: Real>(z: &[T], rows: usize, d: usize) -> Vec<f64> {
    let mut gram = vec![T::zero(); rows * rows];
    gemm(rows, d, rows, T::one(), z, Op::N, z, Op::T, T::zero(), &mut gram);
    let sq: Vec<f64> = (0..rows).map(|i| gram[i * rows + i].to_f64_lossy()).collect();
    let mut dist = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            if i != j {
                dist[i * rows + j] = (sq[i] + sq[j] - 2.0 * gram[i * rows + j].to_f64_lossy()).max(0.0);
            }
        }
    }
    dist
}

/// Median of the strictly-upper-triangle distances, with the pair(s) that
/// realise it and their weight in the median.
fn median_pairs(dist: &[f64], rows: usize) -> (f64, Vec<(usize, usize, f64)>) {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(rows * (rows - 1) / 2);
    for i in 0..rows {
        for j in i + 1..rows {
            pairs.push((dist[i * rows + j], i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let len = pairs.len();
    if len % 2 == 1 {
        let (v, i, j) = pairs[len / 2];
        (v, vec![(i, j, 1.0)])
    } else {
        let (a, i, j) = pairs[len / 2 - 1];
        let (b, p, q) = pairs[len / 2];
        ((a + b) / 2.0, vec![(i, j, 0.5), (p, q, 0.5)])
    }
}

/// MMD² value and gradients w.r.t. both samples. Rows are samples; each row
/// is flattened to a vector.
pub fn mmd_with_grad<T: Real>(x: &Tensor<T>, y: &Tensor<T>, k: &KernelConfig) -> Result<DiscrepancyGrad<T>> {
    k.validate()?;
    let (n, m, d) = check_pair(x, y)?;
    let rows = n + m;
    let mut z = Vec::with_capacity(rows * d);
    z.extend_from_slice(x.data());
    z.extend_from_slice(y.data());
    let dist = pairwise_sq_dists(&z, rows, d);

    let (base, median_at) = match k.base {
        Bandwidth::Fixed(b) => (b, Vec::new()),
        Bandwidth::Median => {
            let (med, at) = median_pairs(&dist, rows);
            if med > 0.0 {
                (med, at)
            } else {
                (1.0, Vec::new())
            }
        }
    };

    let coef = |i: usize, j: usize| -> f64 {
        match (i < n, j < n) {
            (true, true) => 1.0 / (n * n) as f64,
            (false, false) => 1.0 / (m * m) as f64,
            _ => -1.0 / (n * m) as f64,
        }
    };

    let sig2: Vec<f64> = k.multipliers.iter().map(|&mu| mu * base).collect();
    let mut value = 0.0;
    let mut d_base = 0.0;
    // w[i][j] = dL/dD_ij over ordered pairs.
    let mut w = vec![0.0f64; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            let dij = dist[i * rows + j];
            let c = coef(i, j);
            let mut wij = 0.0;
            for (&s2, &mu) in sig2.iter().zip(&k.multipliers) {
                let kv = (-dij / (2.0 * s2)).exp();
                value += c * kv;
                wij -= c * kv / (2.0 * s2);
                d_base += mu * c * kv * dij / (2.0 * s2 * s2);
            }
            w[i * rows + j] = wij;
        }
    }
    for &(i, j, share) in &median_at {
        w[i * rows + j] += d_base * share;
    }

    // grad_z = 2 (diag(S 1) - S) z, with S = W + W^T.
    let mut s = vec![T::zero(); rows * rows];
    let mut rowsum = vec![0.0f64; rows];
    for i in 0..rows {
        for j in 0..rows {
            let v = w[i * rows + j] + w[j * rows + i];
            s[i * rows + j] = T::from_f64_lossy(v);
            rowsum[i] += v;
        }
    }
    let mut grad = vec![T::zero(); rows * d];
    gemm(
        rows,
        rows,
        d,
        T::from_f64_lossy(-2.0),
        &s,
        Op::N,
        &z,
        Op::N,
        T::zero(),
        &mut grad,
    );
    for i in 0..rows {
        let r = T::from_f64_lossy(2.0 * rowsum[i]);
        for (g, &zv) in grad[i * d..(i + 1) * d].iter_mut().zip(&z[i * d..(i + 1) * d]) {
            *g += r * zv;
        }
    }
    let grad_y = grad.split_off(n * d);
    Ok(DiscrepancyGrad {
        value: T::from_f64_lossy(value),
        grad_x: Tensor::from_vec(x.shape(), grad)?,
        grad_y: Tensor::from_vec(y.shape(), grad_y)?,
    })
}

/// Biased MMD² between the row-samples of `x` and `y`, summed over the kernel
/// bank.
pub fn mmd<T: Real>(x: &Tensor<T>, y: &Tensor<T>, k: &KernelConfig) -> Result<T> {
    Ok(mmd_with_grad(x, y, k)?.value)
}

/// Mean squared difference between paired samples.
pub fn mse_with_grad<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<DiscrepancyGrad<T>> {
    let (n, m, d) = check_pair(x, y)?;
    if n != m {
        return Err(Error::ShapeMismatch {
            expected: vec![n, d],
            actual: vec![m, d],
        });
    }
    let scale = 1.0 / (n * d) as f64;
    let mut value = 0.0;
    let mut gx = Vec::with_capacity(n * d);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let diff = a.to_f64_lossy() - b.to_f64_lossy();
        value += diff * diff * scale;
        gx.push(T::from_f64_lossy(2.0 * diff * scale));
    }
    let gy = gx.iter().map(|&g| -g).collect();
    Ok(DiscrepancyGrad {
        value: T::from_f64_lossy(value),
        grad_x: Tensor::from_vec(x.shape(), gx)?,
        grad_y: Tensor::from_vec(y.shape(), gy)?,
    })
}

/// Feature discrepancy used by the alignment loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discrepancy {
    Mmd(KernelConfig),
    Mse,
}

impl Default for Discrepancy {
    fn default() -> Self {
        Discrepancy::Mmd(KernelConfig::default())
    }
}

impl Discrepancy {
    pub fn with_grad<T: Real>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<DiscrepancyGrad<T>> {
        match self {
            Discrepancy::Mmd(k) => mmd_with_grad(x, y, k),
            Discrepancy::Mse => mse_with_grad(x, y),
        }
    }

    pub fn value<T: Real>(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<T> {
        Ok(self.with_grad(x, y)?.value)
    }
}
