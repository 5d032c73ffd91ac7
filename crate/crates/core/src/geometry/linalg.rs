//! Dense 8x8 solves for the DLT system.

use crate::error::{Error, Result};

use super::MAX_DLT_CONDITION;

pub(crate) fn adjugate3(m: &[f64; 9]) -> [f64; 9] {
    [
        m[4] * m[8] - m[5] * m[7],
        m[2] * m[7] - m[1] * m[8],
        m[1] * m[5] - m[2] * m[4],
        m[5] * m[6] - m[3] * m[8],
        m[0] * m[8] - m[2] * m[6],
        m[2] * m[3] - m[0] * m[5],
        m[3] * m[7] - m[4] * m[6],
        m[1] * m[6] - m[0] * m[7],
        m[0] * m[4] - m[1] * m[3],
    ]
}

/// LU with partial pivoting of `R A C`, where `R` and `C` are diagonal
/// row/column equilibration scales. Pixel-coordinate DLT rows mix entries of
/// order 1 and order `w^2`; the conditioning test runs on the scaled matrix.
pub(crate) struct EquilibratedLu {
    lu: [[f64; 8]; 8],
    perm: [usize; 8],
    row_scale: [f64; 8],
    col_scale: [f64; 8],
}

impl EquilibratedLu {
    pub(crate) fn factor(a: &[[f64; 8]; 8]) -> Result<Self> {
        let mut row_scale = [1.0; 8];
        let mut col_scale = [1.0; 8];
        let mut m = *a;
        for (i, row) in m.iter_mut().enumerate() {
            let mx = row.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            if mx == 0.0 || !mx.is_finite() {
                return Err(Error::DegenerateCorners { condition: f64::INFINITY });
            }
            row_scale[i] = 1.0 / mx;
            row.iter_mut().for_each(|v| *v *= row_scale[i]);
        }
        for (j, cs) in col_scale.iter_mut().enumerate() {
            let mx = m.iter().fold(0.0f64, |acc, r| acc.max(r[j].abs()));
            if mx == 0.0 {
                return Err(Error::DegenerateCorners { condition: f64::INFINITY });
            }
            *cs = 1.0 / mx;
            m.iter_mut().for_each(|r| r[j] *= *cs);
        }
        let scaled = m;
        let mut perm = [0, 1, 2, 3, 4, 5, 6, 7];
        for k in 0..8 {
            let p = (k..8)
                .max_by(|&x, &y| m[x][k].abs().total_cmp(&m[y][k].abs()))
                .unwrap();
            if m[p][k].abs() < 1e-300 {
                return Err(Error::DegenerateCorners { condition: f64::INFINITY });
            }
            m.swap(k, p);
            perm.swap(k, p);
            for i in k + 1..8 {
                let f = m[i][k] / m[k][k];
                m[i][k] = f;
                for j in k + 1..8 {
                    m[i][j] -= f * m[k][j];
                }
            }
        }
        let lu = Self {
            lu: m,
            perm,
            row_scale,
            col_scale,
        };
        let condition = lu.condition_1(&scaled);
        if !(condition <= MAX_DLT_CONDITION) {
            return Err(Error::DegenerateCorners { condition });
        }
        Ok(lu)
    }

    fn norm1(m: &[[f64; 8]; 8]) -> f64 {
        (0..8)
            .map(|j| m.iter().map(|r| r[j].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    fn condition_1(&self, scaled: &[[f64; 8]; 8]) -> f64 {
        let mut inv = [[0.0; 8]; 8];
        for j in 0..8 {
            let mut e = [0.0; 8];
            e[j] = 1.0;
            let col = self.solve_scaled(&e);
            for i in 0..8 {
                inv[i][j] = col[i];
            }
        }
        Self::norm1(scaled) * Self::norm1(&inv)
    }

    /// Solves the scaled system `(R A C) y = rhs`.
    fn solve_scaled(&self, rhs: &[f64; 8]) -> [f64; 8] {
        let mut x: [f64; 8] = std::array::from_fn(|i| rhs[self.perm[i]]);
        for i in 0..8 {
            for j in 0..i {
                x[i] -= self.lu[i][j] * x[j];
            }
        }
        for i in (0..8).rev() {
            for j in i + 1..8 {
                x[i] -= self.lu[i][j] * x[j];
            }
            x[i] /= self.lu[i][i];
        }
        x
    }

    /// Solves `A x = b`.
    pub(crate) fn solve(&self, b: &[f64; 8]) -> [f64; 8] {
        let rb: [f64; 8] = std::array::from_fn(|i| b[i] * self.row_scale[i]);
        let y = self.solve_scaled(&rb);
        std::array::from_fn(|i| y[i] * self.col_scale[i])
    }

    /// Solves `A^T x = b`.
    pub(crate) fn solve_transpose(&self, b: &[f64; 8]) -> [f64; 8] {
        // (R A C)^T = C A^T R, so A^T x = b  <=>  (RAC)^T (R^-1 x) = C b.
        let cb: [f64; 8] = std::array::from_fn(|i| b[i] * self.col_scale[i]);
        // With P S = L U: S^T = U^T L^T P.
        let mut z = cb;
        for i in 0..8 {
            for j in 0..i {
                z[i] -= self.lu[j][i] * z[j];
            }
            z[i] /= self.lu[i][i];
        }
        for i in (0..8).rev() {
            for j in i + 1..8 {
                z[i] -= self.lu[j][i] * z[j];
            }
        }
        let mut mu = [0.0; 8];
        for i in 0..8 {
            mu[self.perm[i]] = z[i];
        }
        std::array::from_fn(|i| mu[i] * self.row_scale[i])
    }
}
