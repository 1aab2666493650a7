//! Symmetric banded matrices with Cholesky factorization.
//!
//! Spline fitting and the batch solver both produce normal equations whose
//! trajectory part is banded: a residual at time `t` only touches the `k`
//! control points of its segment, so coupling is limited to a fixed number of
//! off-diagonals.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {0} = {1:.3e})")]
    NotPositiveDefinite(usize, f64),
}

/// Symmetric positive definite matrix stored as a lower band.
///
/// `data[i * (hb + 1) + (i - j)]` holds entry `(i, j)` for `i - hb <= j <= i`.
#[derive(Debug, Clone)]
pub struct BandedSym {
    n: usize,
    hb: usize,
    data: Vec<f64>,
}

impl BandedSym {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        BandedSym {
            n,
            hb: half_bandwidth,
            data: vec![0.0; n * (half_bandwidth + 1)],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_bandwidth(&self) -> usize {
        self.hb
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i >= j && i - j <= self.hb);
        self.data[i * (self.hb + 1) + (i - j)]
    }

    /// Adds `v` to entry `(i, j)`; callers must pass `i >= j` within the band.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i >= j, "lower-triangle access only");
        debug_assert!(i - j <= self.hb, "entry ({i},{j}) outside band hb={}", self.hb);
        self.data[i * (self.hb + 1) + (i - j)] += v;
    }

    #[inline]
    pub fn diag_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i * (self.hb + 1)]
    }

    pub fn scale_diag(&mut self, factor: f64) {
        for i in 0..self.n {
            self.data[i * (self.hb + 1)] *= factor;
        }
    }

    /// In-place banded Cholesky, `A = L L^T` with `L` stored in the band.
    pub fn cholesky_in_place(&mut self) -> Result<(), LinalgError> {
        let hb = self.hb;
        let w = hb + 1;
        for i in 0..self.n {
            let j0 = i.saturating_sub(hb);
            for j in j0..=i {
                let mut sum = self.data[i * w + (i - j)];
                let k0 = j0.max(j.saturating_sub(hb));
                for k in k0..j {
                    sum -= self.data[i * w + (i - k)] * self.data[j * w + (j - k)];
                }
                if i == j {
                    if sum <= 0.0 || !sum.is_finite() {
                        return Err(LinalgError::NotPositiveDefinite(i, sum));
                    }
                    self.data[i * w] = sum.sqrt();
                } else {
                    self.data[i * w + (i - j)] = sum / self.data[j * w];
                }
            }
        }
        Ok(())
    }

    /// Forward substitution `L y = b` (after `cholesky_in_place`).
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let hb = self.hb;
        let w = hb + 1;
        for i in 0..self.n {
            let mut sum = b[i];
            let j0 = i.saturating_sub(hb);
            for j in j0..i {
                sum -= self.data[i * w + (i - j)] * b[j];
            }
            b[i] = sum / self.data[i * w];
        }
    }

    /// Backward substitution `L^T x = y`.
    pub fn solve_lower_transpose_in_place(&self, b: &mut [f64]) {
        let hb = self.hb;
        let w = hb + 1;
        for i in (0..self.n).rev() {
            let mut sum = b[i];
            let jmax = (i + hb).min(self.n - 1);
            for j in (i + 1)..=jmax {
                sum -= self.data[j * w + (j - i)] * b[j];
            }
            b[i] = sum / self.data[i * w];
        }
    }

    /// Full solve `A x = b` in place (after factorization).
    pub fn solve_in_place(&self, b: &mut [f64]) {
        self.solve_lower_in_place(b);
        self.solve_lower_transpose_in_place(b);
    }
}
