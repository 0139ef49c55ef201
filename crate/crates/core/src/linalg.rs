//! Dense linear-algebra helpers on top of `faer`.

use faer::linalg::solvers::Llt;
use faer::linalg::triangular_solve;
use faer::{Mat, MatMut, MatRef, Par, Side};

/// Cholesky factor `A = L L^T` of a symmetric positive-definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    llt: Llt<f64>,
}

impl Cholesky {
    /// Returns `None` when `a` is not numerically positive definite.
    pub fn factor(a: &Mat<f64>) -> Option<Self> {
        a.llt(Side::Lower).ok().map(|llt| Self { llt })
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `rhs <- L^{-1} rhs`.
    pub fn solve_lower_in_place(&self, rhs: MatMut<'_, f64>) {
        triangular_solve::solve_lower_triangular_in_place(self.llt.L(), rhs, Par::Seq);
    }

    /// `rhs <- L^{-T} rhs`.
    pub fn solve_upper_in_place(&self, rhs: MatMut<'_, f64>) {
        triangular_solve::solve_upper_triangular_in_place(self.llt.L().transpose(), rhs, Par::Seq);
    }

    /// `rhs <- A^{-1} rhs`.
    pub fn solve_in_place(&self, mut rhs: MatMut<'_, f64>) {
        self.solve_lower_in_place(rhs.as_mut());
        self.solve_upper_in_place(rhs);
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let mut m = col_from_slice(b);
        self.solve_in_place(m.as_mut());
        col_to_vec(m.as_ref())
    }
}

pub fn col_from_slice(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

pub fn col_to_vec(m: MatRef<'_, f64>) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, 0)]).collect()
}

pub fn column(m: MatRef<'_, f64>, j: usize) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y = M x`.
pub fn matvec(m: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(m.ncols(), x.len());
    let mut y = vec![0.0; m.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        if xj == 0.0 {
            continue;
        }
        let col = m.col(j);
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += col[i] * xj;
        }
    }
    y
}

/// Solves the square system `a x = b` by LU with partial pivoting.
pub fn solve_dense(a: &Mat<f64>, b: &[f64]) -> Vec<f64> {
    use faer::linalg::solvers::Solve;
    let lu = a.partial_piv_lu();
    let mut x = col_from_slice(b);
    lu.solve_in_place(x.as_mut());
    col_to_vec(x.as_ref())
}

/// `x^T M x` for square `M`.
pub fn quad_form(m: MatRef<'_, f64>, x: &[f64]) -> f64 {
    dot(x, &matvec(m, x))
}

/// Partial pivoted Cholesky `A ~ R R^T` of a PSD matrix accessed column by column.
///
/// The residual `A - R R^T` is the Schur complement of the pivot block, hence PSD,
/// and its trace is reported in `residual_trace`.
#[derive(Clone, Debug)]
pub struct LowRankFactor {
    /// `n x rank`.
    pub r: Mat<f64>,
    pub pivots: Vec<usize>,
    pub residual_trace: f64,
}

impl LowRankFactor {
    pub fn rank(&self) -> usize {
        self.r.ncols()
    }
}

/// Greedy largest-diagonal pivoting; stops once every residual diagonal entry is
/// at most `tol` or `max_rank` columns were taken.
pub fn pivoted_cholesky(
    diag: &[f64],
    mut column: impl FnMut(usize) -> Vec<f64>,
    tol: f64,
    max_rank: usize,
) -> LowRankFactor {
    let n = diag.len();
    let max_rank = max_rank.min(n);
    let mut d = diag.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut pivots = Vec::new();
    while cols.len() < max_rank {
        let (p, &dp) = d
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |best, cur| {
                if cur.1 > best.1 {
                    cur
                } else {
                    best
                }
            });
        if dp <= tol {
            break;
        }
        let mut l = column(p);
        for c in &cols {
            let cp = c[p];
            if cp != 0.0 {
                for (li, ci) in l.iter_mut().zip(c) {
                    *li -= ci * cp;
                }
            }
        }
        let s = dp.sqrt();
        for li in l.iter_mut() {
            *li /= s;
        }
        // exact zero on eliminated pivots keeps them from being chosen again
        for (di, li) in d.iter_mut().zip(&l) {
            *di -= li * li;
        }
        d[p] = 0.0;
        for &q in &pivots {
            d[q] = 0.0;
        }
        pivots.push(p);
        cols.push(l);
    }
    let rank = cols.len();
    let r = Mat::from_fn(n, rank, |i, j| cols[j][i]);
    let residual_trace = d.iter().map(|x| x.max(0.0)).sum();
    LowRankFactor {
        r,
        pivots,
        residual_trace,
    }
}
