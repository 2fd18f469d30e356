//! Zero-sum matrix games solved exactly by the simplex method.
//!
//! The row player maximises. A game `M` is shifted to be strictly positive and
//! the column player's problem `max 1^T y  s.t.  M y <= 1, y >= 0` is solved on a
//! dense tableau with Bland's rule, so a given matrix always yields the same
//! strategies. The row strategy is read off the slack duals.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Pivot tolerance for the tableau.
const PIVOT_TOL: f64 = 1e-11;

/// Dense row-major payoff matrix (row player maximises).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::dims(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                i / cols,
                i % cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dims("ragged matrix rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `-M^T`: the same game with the players' roles swapped.
    pub fn negated_transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(-self.get(i, j));
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// `(p^T M)_j` for every column.
    pub fn row_payoffs(&self, p: &[f64]) -> Vec<f64> {
        row_payoffs(&self.data, self.cols, p)
    }

    /// `(M q)_i` for every row.
    pub fn col_payoffs(&self, q: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(q).map(|(m, q)| m * q).sum())
            .collect()
    }
}

pub(crate) fn row_payoffs(data: &[f64], cols: usize, p: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (row, &pi) in data.chunks_exact(cols).zip(p) {
        if pi == 0.0 {
            continue;
        }
        for (o, m) in out.iter_mut().zip(row) {
            *o += pi * m;
        }
    }
    out
}

/// Value and optimal strategy pair of a matrix game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameSolution {
    /// Security level of `row_strategy`, i.e. `min_j (row^T M)_j`.
    pub value: f64,
    pub row_strategy: Vec<f64>,
    pub col_strategy: Vec<f64>,
    /// `max_i (M col)_i - value`; zero at an exact equilibrium.
    pub gap: f64,
}

/// Solves `max_p min_q p^T M q` over the two simplices.
pub fn solve_matrix_game(m: &Matrix) -> MatrixGameSolution {
    solve_flat(m.rows, m.cols, &m.data)
}

/// Same as [`solve_matrix_game`] on a flat row-major slice that is known to be
/// finite and correctly sized.
pub(crate) fn solve_flat(rows: usize, cols: usize, data: &[f64]) -> MatrixGameSolution {
    debug_assert_eq!(data.len(), rows * cols);
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo == 0.0 {
        // Constant game: every strategy is optimal; pick the first pure pair.
        return MatrixGameSolution {
            value: lo,
            row_strategy: unit(rows, 0),
            col_strategy: unit(cols, 0),
            gap: 0.0,
        };
    }
    // Scale to [1, 2] so tableau magnitudes are independent of the payoff range.
    let scale = hi - lo;
    let shifted: Vec<f64> = data.iter().map(|v| (v - lo) / scale + 1.0).collect();
    let (y, duals) = simplex_max_sum(rows, cols, &shifted);
    let col_strategy = normalise(y);
    let row_strategy = normalise(duals);

    let value = row_payoffs(data, cols, &row_strategy)
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let upper = data
        .chunks_exact(cols)
        .map(|row| row.iter().zip(&col_strategy).map(|(m, q)| m * q).sum::<f64>())
        .fold(f64::NEG_INFINITY, f64::max);
    MatrixGameSolution {
        value,
        row_strategy,
        col_strategy,
        gap: upper - value,
    }
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn normalise(mut v: Vec<f64>) -> Vec<f64> {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Solves `max 1^T y s.t. A y <= 1, y >= 0` for a strictly positive `A`.
///
/// Returns the primal `y` and the constraint duals. Both are strictly
/// positive in sum because `A > 0` keeps the problem bounded and feasible.
fn simplex_max_sum(rows: usize, cols: usize, a: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let width = cols + rows + 1;
    let rhs = width - 1;
    let mut tab = vec![0.0; rows * width];
    for i in 0..rows {
        tab[i * width..i * width + cols].copy_from_slice(&a[i * cols..(i + 1) * cols]);
        tab[i * width + cols + i] = 1.0;
        tab[i * width + rhs] = 1.0;
    }
    // Reduced costs c_j - z_j for the maximisation.
    let mut reduced = vec![0.0; width - 1];
    reduced[..cols].iter_mut().for_each(|c| *c = 1.0);
    let mut basis: Vec<usize> = (cols..cols + rows).collect();

    // Bland: lowest-index improving column.
    while let Some(enter) = (0..width - 1).find(|&j| reduced[j] > PIVOT_TOL) {
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..rows {
            let coef = tab[i * width + enter];
            if coef > PIVOT_TOL {
                let ratio = tab[i * width + rhs] / coef;
                leave = match leave {
                    None => Some((i, ratio)),
                    Some((li, lr)) => {
                        let tie = (ratio - lr).abs() <= PIVOT_TOL * lr.abs().max(1.0);
                        if ratio < lr && !tie || tie && basis[i] < basis[li] {
                            Some((i, ratio))
                        } else {
                            Some((li, lr))
                        }
                    }
                };
            }
        }
        // A > 0 makes the objective bounded, so a leaving row always exists.
        let (pr, _) = leave.expect("bounded LP");
        let piv = tab[pr * width + enter];
        for v in &mut tab[pr * width..(pr + 1) * width] {
            *v /= piv;
        }
        let pivot_row: Vec<f64> = tab[pr * width..(pr + 1) * width].to_vec();
        for i in 0..rows {
            if i == pr {
                continue;
            }
            let f = tab[i * width + enter];
            if f != 0.0 {
                for (v, p) in tab[i * width..(i + 1) * width].iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                tab[i * width + enter] = 0.0;
            }
        }
        let f = reduced[enter];
        for (r, p) in reduced.iter_mut().zip(&pivot_row) {
            *r -= f * p;
        }
        reduced[enter] = 0.0;
        basis[pr] = enter;
    }

    let mut y = vec![0.0; cols];
    for (i, &bv) in basis.iter().enumerate() {
        if bv < cols {
            y[bv] = tab[i * width + rhs];
        }
    }
    let duals = (0..rows).map(|i| -reduced[cols + i]).collect();
    (y, duals)
}

/// Minimum over columns of `row^T M`, with the smallest minimising column.
pub fn best_pure_response_value(m: &Matrix, row_strategy: &[f64]) -> Result<(f64, usize)> {
    if row_strategy.len() != m.rows {
        return Err(Error::dims(format!(
            "row strategy has {} entries for a {}-row matrix",
            row_strategy.len(),
            m.rows
        )));
    }
    Ok(argmin_first(&m.row_payoffs(row_strategy)))
}

/// Maximum over rows of `M col`, with the smallest maximising row.
pub fn best_pure_row_response(m: &Matrix, col_strategy: &[f64]) -> Result<(f64, usize)> {
    if col_strategy.len() != m.cols {
        return Err(Error::dims(format!(
            "column strategy has {} entries for a {}-column matrix",
            col_strategy.len(),
            m.cols
        )));
    }
    Ok(argmax_first(&m.col_payoffs(col_strategy)))
}

pub(crate) fn argmin_first(v: &[f64]) -> (f64, usize) {
    let mut best = (v[0], 0);
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x < best.0 {
            best = (x, j);
        }
    }
    best
}

pub(crate) fn argmax_first(v: &[f64]) -> (f64, usize) {
    let mut best = (v[0], 0);
    for (j, &x) in v.iter().enumerate().skip(1) {
        if x > best.0 {
            best = (x, j);
        }
    }
    best
}
