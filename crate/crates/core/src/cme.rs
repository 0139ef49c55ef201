//! Empirical conditional mean embeddings, one per control.
//!
//! For an action with training pairs `(x_i, x+_i)`, the estimate at `x` is
//! `mu(x) = sum_i beta_i(x) k(., x+_i)` with
//! `beta(x) = (K_xx + N lambda I)^{-1} k_x(x)`. The matrix is factored once at
//! fit time and every query is a pair of triangular solves.

use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{self, FiniteMeasure, KernelParams, Points};
use crate::linalg::{self, Cholesky, LowRankFactor};

/// Above this many samples the vRKHS norm is bounded through a low-rank
/// factorization of the successor Gram matrix instead of formed exactly.
pub const EXACT_NORM_MAX_N: usize = 1500;

/// Pivoted-Cholesky stopping level for the successor Gram, relative to `sigma_f^2`.
const SUCCESSOR_FACTOR_TOL: f64 = 1e-13;
const SUCCESSOR_FACTOR_MAX_RANK: usize = 1200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingMode {
    /// `per_prompt` successors drawn at each of `prompts` fixed input points.
    GridPrompted { prompts: usize, per_prompt: usize },
    /// Inputs drawn i.i.d. from `distribution`, one successor each.
    DistributionSampled { distribution: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub mode: SamplingMode,
    pub seed: u64,
}

/// Transition samples for one control value.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionSamples {
    pub control: Vec<f64>,
    pub inputs: Points,
    pub successors: Points,
}

impl ActionSamples {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub actions: Vec<ActionSamples>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Input("dataset has no actions".into()));
        }
        for (u, a) in self.actions.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Input(format!("action {u} has no samples")));
            }
            if a.inputs.len() != a.successors.len() {
                return Err(Error::Input(format!(
                    "action {u}: {} inputs but {} successors",
                    a.inputs.len(),
                    a.successors.len()
                )));
            }
            if a.inputs.dim() != self.dim || a.successors.dim() != self.dim {
                return Err(Error::Input(format!("action {u}: dimension mismatch")));
            }
        }
        Ok(())
    }

    /// Writes `action,x_0..,xnext_0..`, one sample per row. Floats use the
    /// shortest round-trip representation so files are byte-stable.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut header = String::from("action");
        for i in 0..self.dim {
            header.push_str(&format!(",x_{i}"));
        }
        for i in 0..self.dim {
            header.push_str(&format!(",xnext_{i}"));
        }
        let io = |e| Error::io(path, e);
        writeln!(w, "{header}").map_err(io)?;
        for (u, a) in self.actions.iter().enumerate() {
            for (x, y) in a.inputs.iter().zip(a.successors.iter()) {
                let mut line = u.to_string();
                for v in x.iter().chain(y) {
                    line.push(',');
                    line.push_str(&format!("{v:?}"));
                }
                writeln!(w, "{line}").map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Reads the CSV layout of [`Dataset::write_csv`]. Controls are not part of
    /// the file and are taken from `controls` (indexed by the action column).
    pub fn read_csv(path: &Path, controls: &[Vec<f64>], meta: DatasetMeta) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        let cols = headers.len();
        if cols < 3 || (cols - 1) % 2 != 0 || &headers[0] != "action" {
            return Err(Error::Input(format!(
                "{}: expected header action,x_0..,xnext_0..",
                path.display()
            )));
        }
        let dim = (cols - 1) / 2;
        for i in 0..dim {
            if headers[1 + i] != *format!("x_{i}") || headers[1 + dim + i] != *format!("xnext_{i}")
            {
                return Err(Error::Input(format!(
                    "{}: bad column names",
                    path.display()
                )));
            }
        }
        let mut actions: Vec<ActionSamples> = controls
            .iter()
            .map(|c| ActionSamples {
                control: c.clone(),
                inputs: Points::new(dim),
                successors: Points::new(dim),
            })
            .collect();
        for rec in rdr.records() {
            let rec = rec?;
            let u: usize = rec[0]
                .trim()
                .parse()
                .map_err(|_| Error::Input(format!("bad action index `{}`", &rec[0])))?;
            let a = actions
                .get_mut(u)
                .ok_or_else(|| Error::Input(format!("action index {u} has no control value")))?;
            let mut vals = Vec::with_capacity(2 * dim);
            for f in rec.iter().skip(1) {
                vals.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Input(format!("bad number `{f}`")))?,
                );
            }
            a.inputs.push(&vals[..dim])?;
            a.successors.push(&vals[dim..])?;
        }
        let ds = Dataset { dim, actions, meta };
        ds.validate()?;
        Ok(ds)
    }
}

/// Fitted estimator for one action.
#[derive(Debug)]
pub struct ActionModel {
    control: Vec<f64>,
    inputs: Points,
    successors: Points,
    /// Factor of `K_xx + N lambda I`.
    chol: Cholesky,
    successor_factor: OnceLock<SuccessorFactor>,
    successor_gram: OnceLock<Mat<f64>>,
}

/// Low-rank split of the successor Gram `K3 = R R^T + E` with `E` PSD, plus the
/// products needed to bound quantities that involve `K3`.
#[derive(Debug)]
pub struct SuccessorFactor {
    pub factor: LowRankFactor,
    /// `tr(E)` plus a rounding allowance; an upper bound on `lambda_max(E)`.
    pub residual_bound: f64,
    /// `W R` with `W = (K_xx + N lambda I)^{-1}`, `N x rank`.
    pub w_r: Mat<f64>,
    /// `L^{-1} R`.
    pub linv_r: Mat<f64>,
}

impl ActionModel {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn control(&self) -> &[f64] {
        &self.control
    }

    pub fn inputs(&self) -> &Points {
        &self.inputs
    }

    pub fn successors(&self) -> &Points {
        &self.successors
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }
}

/// Norm of the fitted embedding as an element of the vector-valued RKHS.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub value: f64,
    /// `false` when `value` is a certified upper bound from the low-rank route.
    pub exact: bool,
}

#[derive(Debug)]
pub struct CmeModel {
    kernel: KernelParams,
    lambda: f64,
    actions: Vec<ActionModel>,
    norms: Vec<OnceLock<NormReport>>,
}

pub fn fit(data: &Dataset, k: KernelParams, lambda: f64) -> Result<CmeModel> {
    CmeModel::fit(data, k, lambda)
}

impl CmeModel {
    pub fn fit(data: &Dataset, k: KernelParams, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Input(format!("lambda must be >= 0, got {lambda}")));
        }
        data.validate()?;
        let actions = data
            .actions
            .par_iter()
            .enumerate()
            .map(|(u, a)| {
                let n = a.len();
                let mut gram = kernel::symmetric_gram(&k, &a.inputs);
                let shift = n as f64 * lambda;
                for i in 0..n {
                    gram[(i, i)] += shift;
                }
                let chol =
                    Cholesky::factor(&gram).ok_or(Error::Regularization { action: u, lambda })?;
                Ok(ActionModel {
                    control: a.control.clone(),
                    inputs: a.inputs.clone(),
                    successors: a.successors.clone(),
                    chol,
                    successor_factor: OnceLock::new(),
                    successor_gram: OnceLock::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let norms = actions.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            kernel: k,
            lambda,
            actions,
            norms,
        })
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_actions(&self) -> usize {
        self.actions.len()
    }

    pub fn dim(&self) -> usize {
        self.actions[0].inputs.dim()
    }

    pub fn action(&self, u: usize) -> Result<&ActionModel> {
        self.actions
            .get(u)
            .ok_or_else(|| Error::Input(format!("unknown action {u}")))
    }

    /// `N lambda` for action `u`.
    pub fn ridge(&self, u: usize) -> Result<f64> {
        Ok(self.action(u)?.len() as f64 * self.lambda)
    }

    pub fn beta(&self, u: usize, x: &[f64]) -> Result<Vec<f64>> {
        let a = self.action(u)?;
        if x.len() != a.inputs.dim() {
            return Err(Error::Input(format!(
                "query of dimension {} for a model of dimension {}",
                x.len(),
                a.inputs.dim()
            )));
        }
        Ok(a.chol.solve_vec(&self.kernel.section(&a.inputs, x)))
    }

    /// Coefficients for many queries at once, one column per query.
    pub fn beta_batch(&self, u: usize, xs: &Points) -> Result<Mat<f64>> {
        let a = self.action(u)?;
        if xs.dim() != a.inputs.dim() {
            return Err(Error::Input("query dimension mismatch".into()));
        }
        let mut m = Mat::from_fn(a.len(), xs.len(), |i, j| {
            self.kernel.eval_unchecked(a.inputs.get(i), xs.get(j))
        });
        a.chol.solve_in_place(m.as_mut());
        Ok(m)
    }

    pub fn embed_at(&self, u: usize, x: &[f64]) -> Result<FiniteMeasure> {
        let beta = self.beta(u, x)?;
        FiniteMeasure::new(self.action(u)?.successors.clone(), beta)
    }

    pub fn vrkhs_norm(&self, u: usize) -> Result<f64> {
        Ok(self.vrkhs_norm_report(u)?.value)
    }

    /// `|mu|^2 = sum_ij (W K W)_ij (K3)_ij` with `W = (K + N lambda I)^{-1}`.
    /// Computed exactly for small `N` (or `lambda = 0`), otherwise bounded from
    /// above through [`SuccessorFactor`].
    pub fn vrkhs_norm_report(&self, u: usize) -> Result<NormReport> {
        let a = self.action(u)?;
        if let Some(r) = self.norms[u].get() {
            return Ok(*r);
        }
        let report = if a.len() <= EXACT_NORM_MAX_N || self.lambda == 0.0 {
            NormReport {
                value: self.exact_norm_sq(a).max(0.0).sqrt(),
                exact: true,
            }
        } else {
            let sf = self.successor_factor(u)?;
            let ridge = a.len() as f64 * self.lambda;
            let head = sq_frobenius(sf.linv_r.as_ref()) - ridge * sq_frobenius(sf.w_r.as_ref());
            // lambda_max(W K W) = max_i s_i / (s_i + ridge)^2 <= 1 / (4 ridge)
            let tail = sf.residual_bound / (4.0 * ridge);
            NormReport {
                value: (head.max(0.0) + tail).sqrt(),
                exact: false,
            }
        };
        Ok(*self.norms[u].get_or_init(|| report))
    }

    fn exact_norm_sq(&self, a: &ActionModel) -> f64 {
        let n = a.len();
        let mut w = Mat::<f64>::identity(n, n);
        a.chol.solve_in_place(w.as_mut());
        let kxx = kernel::symmetric_gram(&self.kernel, &a.inputs);
        let wkw = &w * &kxx * &w;
        let k3 = self.successor_gram_of(a);
        let mut acc = 0.0;
        for j in 0..n {
            for i in 0..n {
                acc += wkw[(i, j)] * k3[(i, j)];
            }
        }
        acc
    }

    /// Dense successor Gram `K3`; cached, intended for moderate `N`.
    pub fn successor_gram(&self, u: usize) -> Result<&Mat<f64>> {
        Ok(self.successor_gram_of(self.action(u)?))
    }

    fn successor_gram_of<'a>(&self, a: &'a ActionModel) -> &'a Mat<f64> {
        a.successor_gram
            .get_or_init(|| kernel::symmetric_gram(&self.kernel, &a.successors))
    }

    /// Low-rank split of `K3` and its products with `W`; cached. Requires `lambda > 0`.
    pub fn successor_factor(&self, u: usize) -> Result<&SuccessorFactor> {
        let a = self.action(u)?;
        if self.lambda <= 0.0 {
            return Err(Error::Input(
                "the low-rank successor factor needs lambda > 0".into(),
            ));
        }
        Ok(a.successor_factor.get_or_init(|| {
            let k = self.kernel;
            let n = a.len();
            let diag = vec![k.diag(); n];
            let factor = linalg::pivoted_cholesky(
                &diag,
                |j| k.section(&a.successors, a.successors.get(j)),
                SUCCESSOR_FACTOR_TOL * k.diag(),
                SUCCESSOR_FACTOR_MAX_RANK,
            );
            let rounding = 64.0 * f64::EPSILON * k.diag() * n as f64;
            let residual_bound = factor.residual_trace + rounding;
            let mut linv_r = factor.r.clone();
            a.chol.solve_lower_in_place(linv_r.as_mut());
            let mut w_r = linv_r.clone();
            a.chol.solve_upper_in_place(w_r.as_mut());
            log::debug!(
                "successor factor: rank {} of {n}, residual trace {:.3e}",
                factor.rank(),
                factor.residual_trace
            );
            SuccessorFactor {
                factor,
                residual_bound,
                w_r,
                linv_r,
            }
        }))
    }
}

fn sq_frobenius(m: faer::MatRef<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            acc += m[(i, j)] * m[(i, j)];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meta() -> DatasetMeta {
        DatasetMeta {
            mode: SamplingMode::DistributionSampled {
                distribution: "test".into(),
            },
            seed: 0,
        }
    }

    fn dataset_1d(inputs: &[f64], succ: &[f64]) -> Dataset {
        Dataset {
            dim: 1,
            actions: vec![ActionSamples {
                control: vec![0.0],
                inputs: Points::from_flat(1, inputs.to_vec()).unwrap(),
                successors: Points::from_flat(1, succ.to_vec()).unwrap(),
            }],
            meta: meta(),
        }
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Dataset {
        let xs: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.7 * x + rng.random_range(-0.3..0.3))
            .collect();
        Dataset {
            dim,
            actions: vec![ActionSamples {
                control: vec![0.0],
                inputs: Points::from_flat(dim, xs).unwrap(),
                successors: Points::from_flat(dim, ys).unwrap(),
            }],
            meta: meta(),
        }
    }

    #[test]
    fn single_sample_beta_and_norm() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let m = fit(&dataset_1d(&[0.0], &[1.0]), k, 1.0).unwrap();
        let b = m.beta(0, &[0.0]).unwrap();
        assert!((b[0] - 0.5).abs() < 1e-15);
        assert!((m.vrkhs_norm(0).unwrap() - 0.5).abs() < 1e-15);
        let e = m.embed_at(0, &[0.0]).unwrap();
        assert_eq!(e.weights, b);
        assert_eq!(e.atoms.get(0), &[1.0]);
    }

    #[test]
    fn interpolates_without_regularization() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let m = fit(&dataset_1d(&[0.3], &[2.0]), k, 0.0).unwrap();
        assert!((m.beta(0, &[0.3]).unwrap()[0] - 1.0).abs() < 1e-14);

        let m = fit(&dataset_1d(&[0.0, 1.5], &[1.0, -1.0]), k, 0.0).unwrap();
        let b = m.beta(0, &[1.5]).unwrap();
        assert!(b[0].abs() < 1e-12 && (b[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn singular_gram_needs_regularization() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let err = fit(&dataset_1d(&[0.0, 0.0], &[1.0, 2.0]), k, 0.0).unwrap_err();
        assert!(matches!(err, Error::Regularization { action: 0, .. }));
        assert!(fit(&dataset_1d(&[0.0, 0.0], &[1.0, 2.0]), k, 1e-3).is_ok());
    }

    #[test]
    fn unknown_action() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let m = fit(&dataset_1d(&[0.0], &[1.0]), k, 1.0).unwrap();
        assert!(matches!(m.beta(3, &[0.0]), Err(Error::Input(_))));
    }

    #[test]
    fn beta_solves_the_regularized_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = KernelParams::new(2.0, 0.8).unwrap();
        let data = random_dataset(&mut rng, 5, 1);
        let lambda = 0.01;
        let m = fit(&data, k, lambda).unwrap();
        let xs = &data.actions[0].inputs;
        for _ in 0..20 {
            let x = [rng.random_range(-2.0..2.0)];
            let b = m.beta(0, &x).unwrap();
            for i in 0..5 {
                let mut lhs = 5.0 * lambda * b[i];
                for j in 0..5 {
                    lhs += k.eval(xs.get(i), xs.get(j)).unwrap() * b[j];
                }
                assert!((lhs - k.eval(xs.get(i), &x).unwrap()).abs() < 1e-10);
            }
        }
    }

    /// Expands `beta_i = sum_j W_ij k(x_j, .)` and sums
    /// `<beta_i, beta_j> k(x+_i, x+_j)` term by term.
    fn termwise_norm(k: &KernelParams, data: &Dataset, lambda: f64) -> f64 {
        let a = &data.actions[0];
        let n = a.len();
        // W by Gauss-Jordan elimination, independent of the Cholesky route.
        let mut aug = vec![vec![0.0; 2 * n]; n];
        for i in 0..n {
            for j in 0..n {
                aug[i][j] = k.eval(a.inputs.get(i), a.inputs.get(j)).unwrap();
            }
            aug[i][i] += n as f64 * lambda;
            aug[i][n + i] = 1.0;
        }
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs()))
                .unwrap();
            aug.swap(c, p);
            let d = aug[c][c];
            for v in aug[c].iter_mut() {
                *v /= d;
            }
            for r in 0..n {
                if r != c {
                    let f = aug[r][c];
                    let row_c = aug[c].clone();
                    for (v, rc) in aug[r].iter_mut().zip(row_c) {
                        *v -= f * rc;
                    }
                }
            }
        }
        let w = |i: usize, j: usize| aug[i][n + j];
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let mut bij = 0.0;
                for l in 0..n {
                    for p in 0..n {
                        bij +=
                            w(i, l) * w(j, p) * k.eval(a.inputs.get(l), a.inputs.get(p)).unwrap();
                    }
                }
                total += bij * k.eval(a.successors.get(i), a.successors.get(j)).unwrap();
            }
        }
        total.sqrt()
    }

    #[test]
    fn norm_matches_termwise_expansion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (dim, lambda) in [(1, 0.05), (2, 0.001), (1, 0.0)] {
            let k = KernelParams::new(1.5, 0.9).unwrap();
            let data = random_dataset(&mut rng, 4, dim);
            let m = fit(&data, k, lambda).unwrap();
            let got = m.vrkhs_norm(0).unwrap();
            let want = termwise_norm(&k, &data, lambda);
            assert!(
                (got - want).abs() < 1e-10 * want.max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn norm_decreases_with_regularization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = KernelParams::new(1.0, 0.5).unwrap();
        let data = random_dataset(&mut rng, 12, 1);
        let mut prev = f64::INFINITY;
        for lambda in [1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0] {
            let v = fit(&data, k, lambda).unwrap().vrkhs_norm(0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 0.05);
    }

    #[test]
    fn low_rank_bound_dominates_exact_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = KernelParams::new(3.0, 1.0).unwrap();
        let data = random_dataset(&mut rng, 400, 1);
        let m = fit(&data, k, 1e-3).unwrap();
        let exact = m.vrkhs_norm(0).unwrap();
        let sf = m.successor_factor(0).unwrap();
        let ridge = m.ridge(0).unwrap();
        let head = sq_frobenius(sf.linv_r.as_ref()) - ridge * sq_frobenius(sf.w_r.as_ref());
        let bound = (head + sf.residual_bound / (4.0 * ridge)).sqrt();
        assert!(bound >= exact - 1e-9, "{bound} < {exact}");
        assert!(bound - exact < 1e-4 * exact, "{bound} vs {exact}");
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = random_dataset(&mut rng, 7, 2);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        data.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("action,x_0,x_1,xnext_0,xnext_1\n"));
        let back = Dataset::read_csv(&p, &[vec![0.0]], meta()).unwrap();
        assert_eq!(back, data);
    }
}
