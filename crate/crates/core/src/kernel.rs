//! Gaussian-kernel algebra.
//!
//! Everything that touches the kernel goes through [`KernelParams::eval`]:
//! Gram matrices, kernel sections `k_X(x)`, embeddings of finitely supported
//! measures and the MMD between them. The closed-form bounds used elsewhere
//! (snapping error, Lipschitz constants) are specific to the Gaussian kernel.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radicands below `-MMD_NEG_ERROR * scale` are reported instead of clamped.
const MMD_NEG_ERROR: f64 = 1e-9;

/// A list of points in `R^n` stored row-major in one buffer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("points must have dimension >= 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Input(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Input("empty point list".into()))?;
        let dim = first.as_ref().len();
        let mut pts = Self::with_capacity(dim, rows.len());
        for r in rows {
            pts.push(r.as_ref())?;
        }
        Ok(pts)
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Input(format!(
                "point of dimension {} pushed into a set of dimension {}",
                x.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(x);
        Ok(())
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Rows selected by `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.dim, idx.len());
        for &i in idx {
            out.data.extend_from_slice(self.get(i));
        }
        out
    }
}

/// Parameters of `k(x, y) = sigma_f^2 exp(-|x - y|^2 / (2 sigma_l^2))`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub sigma_f: f64,
    pub sigma_l: f64,
}

impl KernelParams {
    pub fn new(sigma_f: f64, sigma_l: f64) -> Result<Self> {
        if !(sigma_f > 0.0 && sigma_f.is_finite()) {
            return Err(Error::Input(format!("sigma_f must be > 0, got {sigma_f}")));
        }
        if !(sigma_l > 0.0 && sigma_l.is_finite()) {
            return Err(Error::Input(format!("sigma_l must be > 0, got {sigma_l}")));
        }
        Ok(Self { sigma_f, sigma_l })
    }

    /// `k(x, x)`.
    #[inline]
    pub fn diag(&self) -> f64 {
        self.sigma_f * self.sigma_f
    }

    /// `sigma_f / sigma_l`, the Lipschitz constant of `x -> k(., x)` in the RKHS norm.
    #[inline]
    pub fn feature_lipschitz(&self) -> f64 {
        self.sigma_f / self.sigma_l
    }

    #[inline]
    pub fn eval_sq_dist(&self, d2: f64) -> f64 {
        self.diag() * (-d2 / (2.0 * self.sigma_l * self.sigma_l)).exp()
    }

    /// Unchecked evaluation; callers guarantee equal dimensions.
    #[inline]
    pub fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.eval_sq_dist(d2)
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Input(format!(
                "kernel arguments have dimensions {} and {}",
                x.len(),
                y.len()
            )));
        }
        Ok(self.eval_unchecked(x, y))
    }

    /// `k_X(x) = [k(x, X_1), ..., k(x, X_N)]`.
    pub fn section(&self, pts: &Points, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(pts.dim(), x.len());
        pts.iter().map(|p| self.eval_unchecked(p, x)).collect()
    }

    /// `|k(., x) - k(., y)|_H = sqrt(2 sigma_f^2 (1 - exp(-d^2 / (2 sigma_l^2))))` at distance `d`.
    pub fn feature_distance(&self, d: f64) -> f64 {
        (2.0 * (self.diag() - self.eval_sq_dist(d * d)))
            .max(0.0)
            .sqrt()
    }
}

/// A dense kernel matrix with its row and column point sets.
#[derive(Clone, Debug)]
pub struct GramMatrix {
    pub entries: Mat<f64>,
    pub row_points: Points,
    pub col_points: Points,
    /// Row and column sets are the same list.
    pub square: bool,
}

impl GramMatrix {
    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[(i, j)]
    }
}

pub fn eval(k: &KernelParams, x: &[f64], y: &[f64]) -> Result<f64> {
    k.eval(x, y)
}

pub fn gram(k: &KernelParams, rows: &Points, cols: &Points) -> Result<GramMatrix> {
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Input("gram of an empty point list".into()));
    }
    if rows.dim() != cols.dim() {
        return Err(Error::Input(format!(
            "gram rows have dimension {} but columns have {}",
            rows.dim(),
            cols.dim()
        )));
    }
    let square = rows == cols;
    let entries = if square {
        symmetric_gram(k, rows)
    } else {
        Mat::from_fn(rows.len(), cols.len(), |i, j| {
            k.eval_unchecked(rows.get(i), cols.get(j))
        })
    };
    Ok(GramMatrix {
        entries,
        row_points: rows.clone(),
        col_points: cols.clone(),
        square,
    })
}

/// Symmetric Gram matrix with the upper triangle mirrored from the lower one.
pub(crate) fn symmetric_gram(k: &KernelParams, pts: &Points) -> Mat<f64> {
    let n = pts.len();
    let mut m = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        let xj = pts.get(j);
        m[(j, j)] = k.diag();
        for i in j + 1..n {
            m[(i, j)] = k.eval_unchecked(pts.get(i), xj);
        }
    }
    for j in 0..n {
        for i in j + 1..n {
            m[(j, i)] = m[(i, j)];
        }
    }
    m
}

/// `K(pts, pts) * rhs` without materializing the Gram matrix.
pub(crate) fn gram_times(k: &KernelParams, pts: &Points, rhs: faer::MatRef<'_, f64>) -> Mat<f64> {
    const BLOCK: usize = 256;
    let n = pts.len();
    assert_eq!(rhs.nrows(), n);
    let mut out = Mat::<f64>::zeros(n, rhs.ncols());
    let mut block = Mat::<f64>::zeros(BLOCK.min(n), n);
    let mut start = 0;
    while start < n {
        let rows = BLOCK.min(n - start);
        for j in 0..n {
            let xj = pts.get(j);
            for r in 0..rows {
                block[(r, j)] = k.eval_unchecked(pts.get(start + r), xj);
            }
        }
        let prod = block.as_ref().subrows(0, rows) * rhs;
        out.as_mut().subrows_mut(start, rows).copy_from(&prod);
        start += rows;
    }
    out
}

/// A finitely supported signed measure `sum_i w_i delta_{x_i}`; its embedding is
/// `sum_i w_i k(., x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FiniteMeasure {
    pub atoms: Points,
    pub weights: Vec<f64>,
}

impl FiniteMeasure {
    pub fn new(atoms: Points, weights: Vec<f64>) -> Result<Self> {
        if atoms.len() != weights.len() {
            return Err(Error::Input(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        Ok(Self { atoms, weights })
    }

    pub fn dirac(x: &[f64]) -> Self {
        Self {
            atoms: Points::from_flat(x.len(), x.to_vec()).expect("nonzero dimension"),
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.atoms.dim()
    }

    /// Evaluates the embedding at `y`.
    pub fn embedding_at(&self, k: &KernelParams, y: &[f64]) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * k.eval_unchecked(x, y))
            .sum()
    }
}

/// `<Psi(P), Psi(Q)>_H = w_P^T K_PQ w_Q`.
pub fn inner(k: &KernelParams, p: &FiniteMeasure, q: &FiniteMeasure) -> f64 {
    let mut acc = 0.0;
    for (x, wx) in p.atoms.iter().zip(&p.weights) {
        if *wx == 0.0 {
            continue;
        }
        let mut row = 0.0;
        for (y, wy) in q.atoms.iter().zip(&q.weights) {
            row += wy * k.eval_unchecked(x, y);
        }
        acc += wx * row;
    }
    acc
}

/// Squared MMD radicand, unclamped, together with the magnitude of its terms.
pub(crate) fn mmd_radicand(k: &KernelParams, p: &FiniteMeasure, q: &FiniteMeasure) -> (f64, f64) {
    let pp = inner(k, p, p);
    let qq = inner(k, q, q);
    let pq = inner(k, p, q);
    (pp + qq - 2.0 * pq, pp.abs() + qq.abs() + 2.0 * pq.abs())
}

/// `|Psi(P) - Psi(Q)|_H`.
pub fn mmd(k: &KernelParams, p: &FiniteMeasure, q: &FiniteMeasure) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::Input(format!(
            "measures live in dimensions {} and {}",
            p.dim(),
            q.dim()
        )));
    }
    let (r, scale) = mmd_radicand(k, p, q);
    if r < -MMD_NEG_ERROR * scale.max(1.0) {
        return Err(Error::Numerical(format!(
            "squared MMD radicand {r:.3e} is negative beyond rounding"
        )));
    }
    Ok(r.max(0.0).sqrt())
}
