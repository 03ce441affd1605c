//! Small dense/banded linear solvers used by the time steppers and the
//! dual Newton iteration.

use crate::error::{Error, Result};

/// Solves a tridiagonal system with the Thomas algorithm.
///
/// `lower[i]` multiplies `x[i-1]` in row `i` (so `lower[0]` is ignored),
/// `upper[i]` multiplies `x[i+1]` (so `upper[n-1]` is ignored).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    if lower.len() != n || upper.len() != n || rhs.len() != n {
        return Err(Error::Shape("tridiagonal bands must share one length".into()));
    }
    let mut c_prime = vec![0.0; n];
    let mut d_prime = vec![0.0; n];
    let mut denom = diag[0];
    if denom == 0.0 {
        return Err(Error::Domain("singular tridiagonal system".into()));
    }
    c_prime[0] = upper[0] / denom;
    d_prime[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i] * c_prime[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(Error::Domain("singular tridiagonal system".into()));
        }
        c_prime[i] = upper[i] / denom;
        d_prime[i] = (rhs[i] - lower[i] * d_prime[i - 1]) / denom;
    }
    let mut x = d_prime;
    for i in (0..n - 1).rev() {
        x[i] -= c_prime[i] * x[i + 1];
    }
    Ok(x)
}

/// Symmetric positive definite band matrix stored by lower diagonals.
///
/// Entry `(r, r - d)` for `d in 0..=bandwidth` lives at `data[r * (bandwidth + 1) + d]`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bandwidth: usize,
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, r: usize, c: usize) -> usize {
        debug_assert!(c <= r && r - c <= self.bandwidth);
        r * (self.bandwidth + 1) + (r - c)
    }

    /// Adds `value` to the symmetric pair `(r, c)` / `(c, r)`.
    #[inline]
    pub fn add(&mut self, r: usize, c: usize, value: f64) {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        let i = self.idx(r, c);
        self.data[i] += value;
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (r, c) = if r >= c { (r, c) } else { (c, r) };
        if r - c > self.bandwidth {
            0.0
        } else {
            self.data[self.idx(r, c)]
        }
    }

    pub fn max_diag(&self) -> f64 {
        (0..self.n).map(|r| self.get(r, r)).fold(0.0, f64::max)
    }

    /// Replaces row and column `r` by the identity row/column.
    pub fn pin(&mut self, r: usize) {
        let lo = r.saturating_sub(self.bandwidth);
        for c in lo..r {
            let i = self.idx(r, c);
            self.data[i] = 0.0;
        }
        let hi = (r + self.bandwidth).min(self.n - 1);
        for rr in r + 1..=hi {
            let i = self.idx(rr, r);
            self.data[i] = 0.0;
        }
        let i = self.idx(r, r);
        self.data[i] = 1.0;
    }

    /// In-place banded Cholesky followed by the two triangular solves.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let bw = self.bandwidth;
        if rhs.len() != n {
            return Err(Error::Shape("banded rhs length".into()));
        }
        for j in 0..n {
            let lo = j.saturating_sub(bw);
            let mut s = self.data[self.idx(j, j)];
            for k in lo..j {
                let l = self.data[self.idx(j, k)];
                s -= l * l;
            }
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::Domain(format!(
                    "band matrix not positive definite at pivot {j}"
                )));
            }
            let d = s.sqrt();
            let jj = self.idx(j, j);
            self.data[jj] = d;
            let hi = (j + bw).min(n - 1);
            for i in j + 1..=hi {
                let lo_i = i.saturating_sub(bw).max(lo);
                let mut s = self.data[self.idx(i, j)];
                for k in lo_i..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                let ij = self.idx(i, j);
                self.data[ij] = s / d;
            }
        }
        // L y = b
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= self.data[self.idx(i, k)] * y[k];
            }
            y[i] = s / self.data[self.idx(i, i)];
        }
        // L^T x = y
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = y[i];
            for k in i + 1..=hi {
                s -= self.data[self.idx(k, i)] * y[k];
            }
            y[i] = s / self.data[self.idx(i, i)];
        }
        Ok(y)
    }
}

/// Dense Gaussian elimination with partial pivoting (row-major `a`, size `n x n`).
pub fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    if a.len() != n || a.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("dense system must be square".into()));
    }
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col] == 0.0 {
            return Err(Error::Domain("singular dense system".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    Ok(x)
}

fn mat_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut c = vec![vec![0.0; n]; n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i][k];
            if aik != 0.0 {
                for j in 0..n {
                    c[i][j] += aik * b[k][j];
                }
            }
        }
    }
    c
}

/// `exp(t A)` by scaling and squaring with a truncated Taylor series.
pub fn expm(a: &[Vec<f64>], t: f64) -> Vec<Vec<f64>> {
    let n = a.len();
    let norm = a
        .iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        * t.abs();
    let squarings = if norm > 0.25 { (norm / 0.25).log2().ceil() as i32 } else { 0 };
    let scale = t / 2f64.powi(squarings);
    let m: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|x| x * scale).collect()).collect();
    let mut result: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let mut term = result.clone();
    for k in 1..=18 {
        term = mat_mul(&term, &m);
        let inv = 1.0 / k as f64;
        for row in term.iter_mut() {
            for x in row.iter_mut() {
                *x *= inv;
            }
        }
        for i in 0..n {
            for j in 0..n {
                result[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..squarings {
        result = mat_mul(&result, &result);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thomas_matches_dense() {
        let lower = [0.0, -1.0, -0.5, -2.0];
        let diag = [4.0, 5.0, 6.0, 7.0];
        let upper = [-1.0, -2.0, -1.0, 0.0];
        let rhs = [1.0, 2.0, 3.0, 4.0];
        let x = solve_tridiagonal(&lower, &diag, &upper, &rhs).unwrap();
        let dense = vec![
            vec![4.0, -1.0, 0.0, 0.0],
            vec![-1.0, 5.0, -2.0, 0.0],
            vec![0.0, -0.5, 6.0, -1.0],
            vec![0.0, 0.0, -2.0, 7.0],
        ];
        let y = solve_dense(dense, rhs.to_vec()).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn banded_cholesky_matches_dense() {
        let n = 9;
        let bw = 2;
        let mut m = BandedSpd::zeros(n, bw);
        let mut dense = vec![vec![0.0; n]; n];
        for r in 0..n {
            for d in 0..=bw.min(r) {
                let c = r - d;
                let v = if d == 0 { 6.0 + r as f64 } else { -1.0 / (1.0 + d as f64 + c as f64) };
                m.add(r, c, v);
                dense[r][c] = v;
                dense[c][r] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let x = m.solve(&rhs).unwrap();
        let y = solve_dense(dense, rhs).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn pinned_row_is_identity() {
        let mut m = BandedSpd::zeros(3, 1);
        m.add(0, 0, 2.0);
        m.add(1, 0, -1.0);
        m.add(1, 1, 2.0);
        m.add(2, 1, -1.0);
        m.add(2, 2, 2.0);
        m.pin(0);
        let x = m.solve(&[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(x[0], 0.0);
        assert!((2.0 * x[1] - x[2] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_of_two_state_generator() {
        let (a, b) = (2.0, 0.5);
        let gen = vec![vec![-a, b], vec![a, -b]];
        let t = 3.7;
        let e = expm(&gen, t);
        let s = a + b;
        let f = 1.0 - (-s * t).exp();
        assert!((e[0][0] - (1.0 - a * f / s)).abs() < 1e-14);
        assert!((e[1][0] - a * f / s).abs() < 1e-14);
        assert!((e[0][1] - b * f / s).abs() < 1e-14);
        assert!((e[0][0] + e[1][0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn expm_zero_is_identity() {
        let e = expm(&[vec![0.0, 0.0], vec![0.0, 0.0]], 1.0);
        assert_eq!(e, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }
}
