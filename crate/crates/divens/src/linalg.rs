//! LU factorization with partial pivoting for small square matrices.
//!
//! The diversity objective only ever needs determinants and inverses of
//! `K x K` Gram matrices where `K` is the ensemble size (at most 8), so a
//! dense textbook factorization is both sufficient and easy to audit.

use crate::error::{Error, Result};

/// Largest supported matrix side for determinant/inverse operations.
pub const MAX_DET_SIZE: usize = 8;

/// LU factorization `PA = LU` of a `k x k` matrix stored row-major.
///
/// Multipliers live in the strict lower triangle, `U` on and above the
/// diagonal, and `swaps[col]` records which row was exchanged with `col`
/// while pivoting.
pub struct Lu {
    lu: Vec<f64>,
    swaps: Vec<usize>,
    k: usize,
    sign: f64,
}

/// Factors `a` (row-major, `k x k`) with partial pivoting.
///
/// Zero pivots are permitted: they simply produce a zero determinant.
/// Callers that need to divide (solve/inverse) get [`Error::Singular`]
/// at that point instead.
pub fn factor(a: &[f64], k: usize) -> Result<Lu> {
    if k == 0 || a.len() != k * k {
        return Err(Error::NotSquare {
            op: "lu-factor",
            rows: if k == 0 { 0 } else { a.len() / k },
            cols: k,
        });
    }
    if k > MAX_DET_SIZE {
        return Err(Error::InvalidArgument(format!(
            "lu-factor supports matrices up to {MAX_DET_SIZE}x{MAX_DET_SIZE}, got {k}x{k}"
        )));
    }
    let mut lu = a.to_vec();
    let mut swaps = Vec::with_capacity(k);
    let mut sign = 1.0;
    for col in 0..k {
        // Partial pivot: largest magnitude on or below the diagonal.
        let mut pivot_row = col;
        let mut pivot_mag = lu[col * k + col].abs();
        for r in (col + 1)..k {
            let mag = lu[r * k + col].abs();
            if mag > pivot_mag {
                pivot_mag = mag;
                pivot_row = r;
            }
        }
        swaps.push(pivot_row);
        if pivot_row != col {
            for j in 0..k {
                lu.swap(col * k + j, pivot_row * k + j);
            }
            sign = -sign;
        }
        let pivot = lu[col * k + col];
        if pivot == 0.0 {
            // Leave the zero in place: the determinant is exactly zero and
            // any subsequent solve reports singularity instead.
            continue;
        }
        for r in (col + 1)..k {
            let factor = lu[r * k + col] / pivot;
            lu[r * k + col] = factor;
            for j in (col + 1)..k {
                lu[r * k + j] -= factor * lu[col * k + j];
            }
        }
    }
    Ok(Lu { lu, swaps, k, sign })
}

impl Lu {
    /// Determinant: signed product of the pivots.
    pub fn det(&self) -> f64 {
        let mut d = self.sign;
        for i in 0..self.k {
            d *= self.lu[i * self.k + i];
        }
        d
    }

    /// Crude condition estimate: ratio of extreme pivot magnitudes.
    pub fn condition_estimate(&self) -> f64 {
        let mut max_p = 0.0f64;
        let mut min_p = f64::INFINITY;
        for i in 0..self.k {
            let p = self.lu[i * self.k + i].abs();
            max_p = max_p.max(p);
            min_p = min_p.min(p);
        }
        if min_p == 0.0 {
            f64::INFINITY
        } else {
            max_p / min_p
        }
    }

    /// Solves `Ax = b` in place.
    pub fn solve(&self, b: &mut [f64]) -> Result<()> {
        let k = self.k;
        if b.len() != k {
            return Err(Error::ShapeMismatch {
                op: "lu-solve",
                details: format!("rhs length {} for {k}x{k} system", b.len()),
            });
        }
        for i in 0..k {
            if self.lu[i * k + i] == 0.0 {
                return Err(Error::Singular {
                    op: "lu-solve",
                    cond: self.condition_estimate(),
                });
            }
        }
        // Replay the pivoting on the right-hand side.
        for (col, &swap) in self.swaps.iter().enumerate() {
            if swap != col {
                b.swap(col, swap);
            }
        }
        // Forward substitution with the unit lower triangle.
        for r in 1..k {
            for c in 0..r {
                b[r] -= self.lu[r * k + c] * b[c];
            }
        }
        // Back substitution with U.
        for r in (0..k).rev() {
            for c in (r + 1)..k {
                b[r] -= self.lu[r * k + c] * b[c];
            }
            b[r] /= self.lu[r * k + r];
        }
        Ok(())
    }

    /// Inverse matrix, row-major.
    pub fn inverse(&self) -> Result<Vec<f64>> {
        let k = self.k;
        let mut inv = vec![0.0; k * k];
        let mut col = vec![0.0; k];
        for j in 0..k {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.solve(&mut col)?;
            for r in 0..k {
                inv[r * k + j] = col[r];
            }
        }
        Ok(inv)
    }
}

/// Convenience: determinant of a row-major `k x k` matrix.
pub fn det(a: &[f64], k: usize) -> Result<f64> {
    Ok(factor(a, k)?.det())
}

/// Convenience: inverse of a row-major `k x k` matrix.
pub fn inverse(a: &[f64], k: usize) -> Result<Vec<f64>> {
    factor(a, k)?.inverse()
}
