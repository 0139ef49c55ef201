//! Abstraction error budget `eps = eps1 + eps2 + eps3`.
//!
//! * `eps1` bounds the distance between the learned and the true embedding at
//!   the region centers, either from the grid-sampling concentration bound or as
//!   a user-declared value.
//! * `eps2(s, a)` bounds how far the learned embedding moves inside region `s`.
//! * `eps3` bounds the error of snapping a successor to its region center.
//!
//! Every value reported here is an over-approximation.

pub mod lipschitz;

use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cme::CmeModel;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::linalg;
use crate::partition::{Label, Partition, Rect};

pub use lipschitz::Maximum;

/// `(sigma_f / sigma_l) (L eta + sqrt(1/N) + sqrt(2 ln(M / delta) / N))`.
pub fn eps1_explicit(
    k: &KernelParams,
    lipschitz: f64,
    eta: f64,
    n: usize,
    m: usize,
    delta: f64,
) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Input(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if n == 0 || m == 0 {
        return Err(Error::Input("eps1 needs N >= 1 and M >= 1".into()));
    }
    if !(lipschitz >= 0.0 && eta >= 0.0) {
        return Err(Error::Input("eps1 needs L >= 0 and eta >= 0".into()));
    }
    let n = n as f64;
    let stat = (1.0 / n).sqrt() + (2.0 * (m as f64 / delta).ln() / n).sqrt();
    Ok(k.feature_lipschitz() * (lipschitz * eta + stat))
}

/// Bound on the MMD between true transition kernels at inputs `eta` apart.
pub fn mmd_lipschitz_bound(k: &KernelParams, lipschitz: f64, eta: f64) -> f64 {
    k.feature_lipschitz() * lipschitz * eta
}

/// `max_s sup_{y in s} |k(., c_s) - k(., y)|`, attained at a farthest corner.
pub fn eps3(k: &KernelParams, p: &Partition) -> f64 {
    k.feature_distance(p.max_radius())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Eps2Bound {
    pub value: f64,
    /// Largest value of `g_s` actually evaluated.
    pub best_found: f64,
    pub probes: usize,
    /// The optimizer closed its gap to within tolerance.
    pub certified: bool,
}

impl Eps2Bound {
    fn zero() -> Self {
        Self {
            value: 0.0,
            best_found: 0.0,
            probes: 0,
            certified: true,
        }
    }
}

/// `g_s(x) = |mu(x) - mu(c_s)|` for one action and one center, in either the
/// exact form or the low-rank over-approximation.
enum Gap<'a> {
    Exact {
        model: &'a CmeModel,
        action: usize,
        k3: &'a faer::Mat<f64>,
        beta_c: Vec<f64>,
    },
    LowRank {
        model: &'a CmeModel,
        action: usize,
        w_r: faer::MatRef<'a, f64>,
        kc: Vec<f64>,
        /// `sqrt(residual_bound) / (N lambda)`.
        tail: f64,
    },
}

impl<'a> Gap<'a> {
    fn new(model: &'a CmeModel, action: usize, center: &[f64]) -> Result<(Self, f64)> {
        let a = model.action(action)?;
        let k = model.kernel();
        let norm = model.vrkhs_norm(action)?;
        let lip = norm * k.feature_lipschitz();
        if a.len() <= crate::cme::EXACT_NORM_MAX_N || model.lambda() == 0.0 {
            let gap = Gap::Exact {
                model,
                action,
                k3: model.successor_gram(action)?,
                beta_c: model.beta(action, center)?,
            };
            Ok((gap, lip))
        } else {
            let sf = model.successor_factor(action)?;
            let ridge = model.ridge(action)?;
            let tail = sf.residual_bound.sqrt() / ridge;
            // Lipschitz constant of x -> tail * k_X(x): each entry has slope at most
            // sigma_f^2 e^{-1/2} / sigma_l
            let section_lip = (a.len() as f64).sqrt() * k.diag() * (-0.5f64).exp() / k.sigma_l;
            let gap = Gap::LowRank {
                model,
                action,
                w_r: sf.w_r.as_ref(),
                kc: k.section(a.inputs(), center),
                tail,
            };
            Ok((gap, lip + tail * section_lip))
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Gap::Exact {
                model,
                action,
                k3,
                beta_c,
            } => {
                let mut d = model.beta(*action, x).expect("validated action");
                for (di, ci) in d.iter_mut().zip(beta_c) {
                    *di -= ci;
                }
                linalg::quad_form(k3.as_ref(), &d).max(0.0).sqrt()
            }
            Gap::LowRank {
                model,
                action,
                w_r,
                kc,
                tail,
            } => {
                let a = model.action(*action).expect("validated action");
                let mut dk = model.kernel().section(a.inputs(), x);
                for (di, ci) in dk.iter_mut().zip(kc) {
                    *di -= ci;
                }
                let mut head = 0.0;
                for j in 0..w_r.ncols() {
                    let col = w_r.col(j);
                    let mut s = 0.0;
                    for (i, v) in dk.iter().enumerate() {
                        s += col[i] * v;
                    }
                    head += s * s;
                }
                let dk2: f64 = dk.iter().map(|v| v * v).sum();
                (head + tail * tail * dk2).sqrt()
            }
        }
    }
}

/// Certified `max_{x in region} |mu_a(x) - mu_a(center)|`.
pub fn eps2_region(
    model: &CmeModel,
    action: usize,
    region: &Rect,
    center: &[f64],
    tol: f64,
    budget: usize,
) -> Result<Eps2Bound> {
    if region.dim() != model.dim() || center.len() != model.dim() {
        return Err(Error::Input(
            "region dimension does not match the model".into(),
        ));
    }
    if !(tol > 0.0) {
        return Err(Error::Input(format!(
            "eps2 tolerance must be > 0, got {tol}"
        )));
    }
    let k = model.kernel();
    let norm = model.vrkhs_norm(action)?;
    let r = (0..region.dim())
        .map(|d| {
            let far = (center[d] - region.lo[d])
                .abs()
                .max((region.hi[d] - center[d]).abs());
            far * far
        })
        .sum::<f64>()
        .sqrt();
    if r == 0.0 {
        return Ok(Eps2Bound::zero());
    }
    // closed-form caps: the embedding operator has norm at most |mu|
    let coarse = (norm * k.feature_lipschitz() * r).min(norm * k.feature_distance(r));
    let (gap, lip) = Gap::new(model, action, center)?;
    let max = if region.dim() == 1 {
        let c = center[0];
        maximize_1d(&gap, region.lo[0], region.hi[0], c, lip, tol, budget)
    } else {
        lipschitz::maximize_box(|x| gap.eval(x), region, lip, tol, budget)
    };
    Ok(Eps2Bound {
        value: max.upper.min(coarse).max(max.best),
        best_found: max.best,
        probes: max.probes,
        certified: max.converged || coarse - max.best <= tol,
    })
}

fn maximize_1d(
    gap: &Gap<'_>,
    a: f64,
    b: f64,
    c: f64,
    lip: f64,
    tol: f64,
    budget: usize,
) -> Maximum {
    lipschitz::maximize_interval(|x| gap.eval(&[x]), a, b, &[(c, 0.0)], lip, tol, budget)
}

/// Per-cell certified bounds for one action; avoid cells get zero since their
/// ambiguity set is pinned.
pub fn eps2(
    model: &CmeModel,
    p: &Partition,
    action: usize,
    tol: f64,
    budget: usize,
) -> Result<Vec<Eps2Bound>> {
    model.action(action)?;
    // warm the shared caches before fanning out
    model.vrkhs_norm(action)?;
    p.cells()
        .par_iter()
        .map(|cell| {
            if cell.label == Label::Avoid {
                Ok(Eps2Bound::zero())
            } else {
                eps2_region(model, action, &cell.bounds, &cell.center, tol, budget)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// `eps(s, a) = eps1 + eps2(s, a) + eps3`.
    PerRegion,
    /// One radius for every pair, using the largest `eps2`.
    Global,
}

/// Where `eps1` came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum Eps1Provenance {
    /// Grid-sampling concentration bound.
    Theorem {
        lipschitz: f64,
        eta: f64,
        n: usize,
        m: usize,
        delta: f64,
    },
    /// Declared by the user.
    User,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub eps1: f64,
    pub eps1_provenance: Eps1Provenance,
    /// Indexed `[action][cell]`.
    pub eps2: Vec<Vec<Eps2Bound>>,
    pub eps3: f64,
    pub mode: BudgetMode,
}

impl ErrorBudget {
    pub fn new(
        eps1: f64,
        eps1_provenance: Eps1Provenance,
        eps2: Vec<Vec<Eps2Bound>>,
        eps3: f64,
        mode: BudgetMode,
    ) -> Result<Self> {
        let bad = |v: f64| !(v >= 0.0 && v.is_finite());
        if bad(eps1) || bad(eps3) || eps2.iter().flatten().any(|b| bad(b.value)) {
            return Err(Error::Input(
                "budget components must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            eps1,
            eps1_provenance,
            eps2,
            eps3,
            mode,
        })
    }

    /// Computes `eps2` and `eps3` for every action of `model` over `p`.
    pub fn compute(
        model: &CmeModel,
        p: &Partition,
        eps1: f64,
        eps1_provenance: Eps1Provenance,
        mode: BudgetMode,
        tol: f64,
        budget: usize,
    ) -> Result<Self> {
        let eps2 = (0..model.n_actions())
            .map(|a| eps2(model, p, a, tol, budget))
            .collect::<Result<Vec<_>>>()?;
        Self::new(eps1, eps1_provenance, eps2, eps3(model.kernel(), p), mode)
    }

    pub fn max_eps2(&self) -> f64 {
        self.eps2
            .iter()
            .flatten()
            .map(|b| b.value)
            .fold(0.0, f64::max)
    }

    pub fn total(&self, cell: usize, action: usize) -> f64 {
        let e2 = match self.mode {
            BudgetMode::PerRegion => self.eps2[action][cell].value,
            BudgetMode::Global => self.max_eps2(),
        };
        self.eps1 + e2 + self.eps3
    }

    /// `region_id,action,eps1,eps2,eps3,eps_total,certified` for non-avoid cells.
    pub fn write_csv(&self, p: &Partition, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(w, "region_id,action,eps1,eps2,eps3,eps_total,certified").map_err(io)?;
        for cell in 0..p.n_cells() {
            if p.cell(cell).label == Label::Avoid {
                continue;
            }
            for (a, row) in self.eps2.iter().enumerate() {
                let b = &row[cell];
                writeln!(
                    w,
                    "{cell},{a},{:?},{:?},{:?},{:?},{}",
                    self.eps1,
                    b.value,
                    self.eps3,
                    self.total(cell, a),
                    b.certified
                )
                .map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cme::{ActionSamples, Dataset, DatasetMeta, SamplingMode};
    use crate::kernel::{mmd, FiniteMeasure, Points};
    use crate::partition::{build_grid, Spec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eps1_example() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let v = eps1_explicit(&k, 1.0, 0.1, 100, 10, 0.05).unwrap();
        assert!((v - 0.525525).abs() < 1e-6);
        let far = eps1_explicit(&k, 1.0, 0.1, usize::MAX / 2, 10, 0.05).unwrap();
        assert!((far - 0.1).abs() < 1e-8);
        assert!(eps1_explicit(&k, 1.0, 0.1, 100, 10, 1.0).is_err());
        assert!(eps1_explicit(&k, 1.0, 0.1, 100, 10, 0.0).is_err());
    }

    #[test]
    fn mmd_lipschitz_examples() {
        let k = KernelParams::new(10.0, 1.0).unwrap();
        assert_eq!(mmd_lipschitz_bound(&k, 2.0, 0.0), 0.0);
        assert!((mmd_lipschitz_bound(&k, 2.0, 0.05) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eps3_examples() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let spec = Spec::new(
            Rect::interval(0.0, 1.0).unwrap(),
            Rect::interval(0.0, 1.0).unwrap(),
            None,
        )
        .unwrap();
        let p = build_grid(&spec, &[1]).unwrap();
        let want = (2.0 * (1.0 - (-0.125f64).exp())).sqrt();
        assert!((eps3(&k, &p) - want).abs() < 1e-15);
        assert!((want - 0.484774).abs() < 1e-6);
        // the farthest corner attains it
        let c = FiniteMeasure::dirac(&[0.5]);
        let y = FiniteMeasure::dirac(&[1.0]);
        assert!((mmd(&k, &c, &y).unwrap() - want).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn eps1_monotone(n in 1usize..10_000, m in 1usize..1000, delta in 0.001f64..0.99,
                         l in 0.1f64..5.0, eta in 0.001f64..1.0) {
            let k = KernelParams::new(2.0, 0.7).unwrap();
            let base = eps1_explicit(&k, l, eta, n, m, delta).unwrap();
            prop_assert!(eps1_explicit(&k, l, eta, n + 1, m, delta).unwrap() < base);
            prop_assert!(eps1_explicit(&k, l, eta * 1.1, n, m, delta).unwrap() > base);
            prop_assert!(eps1_explicit(&k, l * 1.1, eta, n, m, delta).unwrap() > base);
            prop_assert!(eps1_explicit(&k, l, eta, n, m + 1, delta).unwrap() > base);
            prop_assert!(eps1_explicit(&k, l, eta, n, m, delta * 0.9).unwrap() > base);
        }

        #[test]
        fn eps3_monotone_and_bounded(r in 0.0f64..50.0, sf in 0.1f64..20.0, sl in 0.1f64..5.0) {
            let k = KernelParams::new(sf, sl).unwrap();
            let a = k.feature_distance(r);
            prop_assert!(k.feature_distance(r * 1.1 + 1e-3) >= a);
            prop_assert!(a <= sf * 2f64.sqrt() + 1e-12);
        }
    }

    fn random_model(rng: &mut ChaCha8Rng, n: usize, dim: usize, lambda: f64) -> CmeModel {
        let xs: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 0.5 * x + 0.3 * (3.0 * x).sin() + rng.random_range(-0.2..0.2))
            .collect();
        let data = Dataset {
            dim,
            actions: vec![ActionSamples {
                control: vec![0.0],
                inputs: Points::from_flat(dim, xs).unwrap(),
                successors: Points::from_flat(dim, ys).unwrap(),
            }],
            meta: DatasetMeta {
                mode: SamplingMode::DistributionSampled {
                    distribution: "test".into(),
                },
                seed: 0,
            },
        };
        let k = KernelParams::new(rng.random_range(0.5..3.0), rng.random_range(0.3..1.0)).unwrap();
        crate::cme::fit(&data, k, lambda).unwrap()
    }

    fn gap_oracle(m: &CmeModel, x: &[f64], c: &[f64]) -> f64 {
        mmd(
            m.kernel(),
            &m.embed_at(0, x).unwrap(),
            &m.embed_at(0, c).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn eps2_dominates_dense_grid_1d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_model(&mut rng, 30, 1, 1e-3);
        let region = Rect::interval(0.0, 0.5).unwrap();
        let b = eps2_region(&m, 0, &region, &[0.25], 1e-6, 100_000).unwrap();
        let grid = (0..=10_000)
            .map(|i| gap_oracle(&m, &[0.5 * i as f64 / 10_000.0], &[0.25]))
            .fold(0.0, f64::max);
        assert!(b.value >= grid, "{} < {grid}", b.value);
        assert!(b.value - grid <= 1e-5, "{} vs {grid}", b.value);
        let coarse = m.vrkhs_norm(0).unwrap() * m.kernel().feature_lipschitz() * 0.25;
        assert!(b.value <= coarse + 1e-9);
    }

    #[test]
    fn eps2_dominates_dense_grid_2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_model(&mut rng, 25, 2, 1e-2);
        let region = Rect::new(vec![-0.2, 0.1], vec![0.1, 0.3]).unwrap();
        let c = region.center();
        let b = eps2_region(&m, 0, &region, &c, 1e-4, 200_000).unwrap();
        let mut grid: f64 = 0.0;
        for i in 0..=100 {
            for j in 0..=100 {
                let x = [-0.2 + 0.3 * i as f64 / 100.0, 0.1 + 0.2 * j as f64 / 100.0];
                grid = grid.max(gap_oracle(&m, &x, &c));
            }
        }
        assert!(b.value >= grid);
    }

    #[test]
    fn eps2_zero_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_model(&mut rng, 10, 1, 1e-3);
        let region = Rect::interval(0.2, 0.2).unwrap();
        let b = eps2_region(&m, 0, &region, &[0.2], 1e-6, 100).unwrap();
        assert_eq!(b.value, 0.0);
    }

    #[test]
    fn eps2_budget_exhaustion_stays_sound() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_model(&mut rng, 20, 1, 1e-3);
        let region = Rect::interval(-1.0, 1.0).unwrap();
        let b = eps2_region(&m, 0, &region, &[0.0], 1e-12, 3).unwrap();
        let grid = (0..=2000)
            .map(|i| gap_oracle(&m, &[-1.0 + 2.0 * i as f64 / 2000.0], &[0.0]))
            .fold(0.0, f64::max);
        assert!(b.value >= grid);
    }

    #[test]
    fn low_rank_gap_dominates_exact_gap() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = random_model(&mut rng, 300, 1, 1e-3);
        let c = [0.1];
        let sf = m.successor_factor(0).unwrap();
        let ridge = m.ridge(0).unwrap();
        let a = m.action(0).unwrap();
        let kc = m.kernel().section(a.inputs(), &c);
        let lr = Gap::LowRank {
            model: &m,
            action: 0,
            w_r: sf.w_r.as_ref(),
            kc,
            tail: sf.residual_bound.sqrt() / ridge,
        };
        let (exact, _) = Gap::new(&m, 0, &c).unwrap();
        for i in 0..50 {
            let x = [-1.0 + 2.0 * i as f64 / 49.0];
            let (e, l) = (exact.eval(&x), lr.eval(&x));
            assert!(l >= e - 1e-9, "{l} < {e}");
            assert!(l - e < 1e-4 * e.max(1e-3));
        }
    }

    #[test]
    fn budget_total_and_csv() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = random_model(&mut rng, 15, 1, 1e-2);
        let spec = Spec::new(
            Rect::interval(-1.0, 1.0).unwrap(),
            Rect::interval(-0.5, 1.0).unwrap(),
            Some(Rect::interval(0.5, 1.0).unwrap()),
        )
        .unwrap();
        let p = build_grid(&spec, &[4]).unwrap();
        let b = ErrorBudget::compute(
            &m,
            &p,
            0.1,
            Eps1Provenance::User,
            BudgetMode::PerRegion,
            1e-6,
            10_000,
        )
        .unwrap();
        assert_eq!(b.eps2[0][0].value, 0.0);
        for cell in 1..4 {
            let want = 0.1 + b.eps2[0][cell].value + b.eps3;
            assert_eq!(b.total(cell, 0), want);
        }
        let mut g = b.clone();
        g.mode = BudgetMode::Global;
        assert_eq!(g.total(1, 0), 0.1 + b.max_eps2() + b.eps3);
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("b.csv");
        b.write_csv(&p, &f).unwrap();
        let text = std::fs::read_to_string(&f).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("region_id,action,eps1,eps2,eps3,eps_total,certified\n1,0,"));
    }
}
