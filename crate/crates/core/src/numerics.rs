//! Dense kernels shared by every scoring path.
//!
//! Everything here works in `f64` and is a pure function of its inputs, so
//! results do not depend on thread count or call order.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    /// New matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            let o = out.row_mut(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                for (oj, &bkj) in o.iter_mut().zip(other.row(k)) {
                    *oj += aik * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `⌈frac · n⌉`, clamped to `n`.
///
/// Products that land within 1e-9 of an integer are snapped first, so a
/// 15 % budget over 20 tokens is 3 tokens, not 4.
pub fn ceil_fraction(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let nearest = x.round();
    let c = if (x - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (c.max(0.0) as usize).min(n)
}

/// `(v - mean) / (popstd + epsilon)` with the divide-by-N standard deviation.
pub fn standardize(v: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyVector);
    }
    if !(epsilon > 0.0) {
        return Err(Error::param("epsilon", "must be > 0"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + epsilon;
    Ok(v.iter().map(|x| (x - mean) / denom).collect())
}

/// Softmax of `v / tau`, max-subtracted.
pub fn softmax_temp(v: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::param("tau", "must be > 0"));
    }
    if v.is_empty() {
        return Ok(Vec::new());
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

/// Orthonormal basis for the span of the leading `min(r, d, m)` columns of
/// the `d x m` matrix `m`, by unpivoted Householder QR.
///
/// A column whose remaining norm falls below `1e-12` (relative to the
/// largest column norm when that exceeds 1) adds no direction and is
/// dropped, so the result may have fewer than `r` columns, possibly none.
pub fn thin_qr(m: &Matrix, r: usize) -> Result<Matrix> {
    if m.cols() == 0 {
        return Err(Error::ShapeMismatch("thin_qr needs at least one column".into()));
    }
    if r == 0 {
        return Err(Error::param("rank_r", "must be >= 1"));
    }
    let d = m.rows();
    let r_eff = r.min(d).min(m.cols());

    // Working copy of the leading columns, stored column-major.
    let mut cols: Vec<Vec<f64>> = (0..r_eff).map(|j| m.column(j)).collect();
    let scale = cols.iter().map(|c| l2_norm(c)).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(1.0);

    // (first row, unit reflector vector)
    let mut reflectors: Vec<(usize, Vec<f64>)> = Vec::new();
    for j in 0..r_eff {
        let k = reflectors.len();
        if k >= d {
            break;
        }
        let x = &cols[j][k..];
        let norm = l2_norm(x);
        if norm < tol {
            continue;
        }
        let alpha = if x[0] >= 0.0 { -norm } else { norm };
        let mut v = x.to_vec();
        v[0] -= alpha;
        let vnorm = l2_norm(&v);
        v.iter_mut().for_each(|e| *e /= vnorm);
        for col in cols.iter_mut().skip(j + 1) {
            apply_reflector(k, &v, col);
        }
        reflectors.push((k, v));
    }

    let rank = reflectors.len();
    let mut q = Matrix::zeros(d, rank);
    for i in 0..rank {
        let mut e = vec![0.0; d];
        e[i] = 1.0;
        for (k, v) in reflectors.iter().rev() {
            apply_reflector(*k, v, &mut e);
        }
        for (row, val) in e.into_iter().enumerate() {
            q[(row, i)] = val;
        }
    }
    Ok(q)
}

/// `x[k..] -= 2 v (v . x[k..])` for a unit `v`.
fn apply_reflector(k: usize, v: &[f64], x: &mut [f64]) {
    let tail = &mut x[k..];
    let s = 2.0 * dot(v, tail);
    for (t, vi) in tail.iter_mut().zip(v) {
        *t -= s * vi;
    }
}

/// Residual norm of each row of `keys` after projecting onto the column
/// space of the orthonormal `basis`: `|k - (k Q) Q^T|`.
pub fn project_residual_norms(keys: &Matrix, basis: &Matrix) -> Result<Vec<f64>> {
    if keys.cols() != basis.rows() {
        return Err(Error::ShapeMismatch(format!(
            "keys have {} columns, basis has {} rows",
            keys.cols(),
            basis.rows()
        )));
    }
    let coords = keys.matmul(basis)?;
    let projected = coords.matmul(&basis.transpose())?;
    Ok((0..keys.rows())
        .map(|i| {
            keys.row(i)
                .iter()
                .zip(projected.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Lower nearest-rank percentile: the ascending-sorted element at index
/// `⌈q·m⌉ - 1`, clamped into range.
pub fn nearest_rank_percentile(v: &[f64], q: f64) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::NoPreviousFrameTokens);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::param("q", "must lie in [0, 1]"));
    }
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ceil_fraction(q, sorted.len()).saturating_sub(1);
    Ok(sorted[idx.min(sorted.len() - 1)])
}

/// Indices of the `k` largest scores, ties to the lower index, returned
/// in ascending index order.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let by_rank = |&a: &usize, &b: &usize| -> Ordering {
        scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_examples() {
        assert_eq!(standardize(&[1.0, 1.0, 1.0], 1e-8).unwrap(), vec![0.0; 3]);
        assert_eq!(standardize(&[5.0], 1e-8).unwrap(), vec![0.0]);
        let s = standardize(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        // 1/sqrt(2/3) with the epsilon folded in; value from an mpmath run.
        let expect = 1.224_744_856_391_589_2;
        assert!((s[0] + expect).abs() < 1e-12);
        assert_eq!(s[1], 0.0);
        assert!((s[2] - expect).abs() < 1e-12);
        assert!(matches!(standardize(&[], 1e-8), Err(Error::EmptyVector)));
    }

    #[test]
    fn softmax_examples() {
        let u = softmax_temp(&[0.0, 0.0, 0.0], 3.5).unwrap();
        assert!(u.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_temp(&[2f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!(softmax_temp(&[1.0], 0.0).is_err());
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn softmax_of_standardized_123_matches_oracle() {
        // mpmath (50 digits): softmax([-1.2247448..., 0, 1.2247448...] / 3.5)
        let z = standardize(&[1.0, 2.0, 3.0], 1e-8).unwrap();
        let p = softmax_temp(&z, 3.5).unwrap();
        let expect = [
            0.225_610_224_194_081_43,
            0.320_132_809_836_813_06,
            0.454_256_965_969_105_5,
        ];
        for (a, b) in p.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn ceil_fraction_snaps_near_integers() {
        assert_eq!(ceil_fraction(0.15, 20), 3);
        assert_eq!(ceil_fraction(0.25, 10), 3);
        assert_eq!(ceil_fraction(0.01, 64), 1);
        assert_eq!(ceil_fraction(1.0, 7), 7);
        assert_eq!(ceil_fraction(0.0, 7), 0);
        assert_eq!(ceil_fraction(0.1, 10), 1);
        assert_eq!(ceil_fraction(0.3, 10), 3);
    }

    #[test]
    fn qr_identity_keeps_leading_axes() {
        let q = thin_qr(&Matrix::identity(3), 2).unwrap();
        assert_eq!((q.rows(), q.cols()), (3, 2));
        for j in 0..2 {
            for i in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((q[(i, j)].abs() - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn qr_drops_zero_column() {
        // columns (2,0,0) and (0,0,0)
        let m = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let q = thin_qr(&m, 2).unwrap();
        assert_eq!(q.cols(), 1);
        assert!((q[(0, 0)].abs() - 1.0).abs() < 1e-15);

        let z = Matrix::zeros(4, 3);
        assert_eq!(thin_qr(&z, 2).unwrap().cols(), 0);
    }

    #[test]
    fn residual_examples() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[vec![0.0, 0.0, 5.0], vec![3.0, 4.0, 0.0]]).unwrap();
        let rho = project_residual_norms(&k, &q).unwrap();
        assert!((rho[0] - 5.0).abs() < 1e-12);
        assert!(rho[1].abs() < 1e-12);

        let empty = Matrix::zeros(3, 0);
        let rho = project_residual_norms(&k, &empty).unwrap();
        assert!((rho[1] - 5.0).abs() < 1e-12);
        assert!(project_residual_norms(&k, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(nearest_rank_percentile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(nearest_rank_percentile(&[4.0, 3.0, 2.0, 1.0], 0.0).unwrap(), 1.0);
        assert_eq!(nearest_rank_percentile(&[4.0, 3.0, 2.0, 1.0], 1.0).unwrap(), 4.0);
        for q in [0.0, 0.3, 1.0] {
            assert_eq!(nearest_rank_percentile(&[7.0], q).unwrap(), 7.0);
        }
        assert!(matches!(
            nearest_rank_percentile(&[], 0.5),
            Err(Error::NoPreviousFrameTokens)
        ));
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5, 0.5], 2), vec![0, 1]);
        assert_eq!(top_k_indices(&[0.5, 0.5], 5), vec![0, 1]);
        assert!(top_k_indices(&[0.5, 0.5], 0).is_empty());
    }
}
