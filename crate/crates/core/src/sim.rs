//! Benchmark systems, dataset generation and seeded Monte Carlo validation.
//!
//! Every random draw comes from a ChaCha8 stream keyed by a hash of
//! `(seed, purpose, i, j)`, so results do not depend on the number of worker
//! threads or on scheduling.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cme::{ActionSamples, Dataset, DatasetMeta, SamplingMode};
use crate::error::{Error, Result};
use crate::kernel::Points;
use crate::partition::{Partition, Rect, Spec};
use crate::rdp::{Horizon, StatePolicy};

/// Gaussian draws rejected before a step is declared impossible.
pub const MAX_REJECTIONS: usize = 10_000;

/// Two-sided 99% standard normal quantile.
pub const Z99: f64 = 2.575_829_303_549;

/// Unbounded reach-avoid runs are cut after this many steps per abstract state.
pub const CAP_PER_STATE: usize = 10;

/// Mean dynamics `x + b (x_e - x) + c u (x_h - x)`, applied per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dynamics {
    pub b: f64,
    pub c: f64,
    pub x_e: f64,
    pub x_h: f64,
}

impl Default for Dynamics {
    /// Room heated by a boiler: ambient 15, heater 45.
    fn default() -> Self {
        Self {
            b: 0.06,
            c: 0.025,
            x_e: 15.0,
            x_h: 45.0,
        }
    }
}

impl Dynamics {
    pub fn mean(&self, x: &[f64], u: f64) -> Vec<f64> {
        x.iter()
            .map(|&xi| xi + self.b * (self.x_e - xi) + self.c * u * (self.x_h - xi))
            .collect()
    }

    /// Largest `|d mean / d x|` over the controls, a Lipschitz constant of the
    /// mean map.
    pub fn lipschitz(&self, controls: &[f64]) -> f64 {
        controls
            .iter()
            .map(|u| (1.0 - self.b - self.c * u).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SystemModel {
    pub dynamics: Dynamics,
    pub sigma_w: f64,
    /// Scalar control values, indexed by action.
    pub controls: Vec<f64>,
    pub domain: Rect,
}

impl SystemModel {
    pub fn new(dynamics: Dynamics, sigma_w: f64, controls: Vec<f64>, domain: Rect) -> Result<Self> {
        if !(sigma_w > 0.0 && sigma_w.is_finite()) {
            return Err(Error::Model(format!(
                "noise std must be positive, got {sigma_w}"
            )));
        }
        if controls.is_empty() || controls.iter().any(|u| !u.is_finite()) {
            return Err(Error::Model(
                "control set must be a nonempty list of finite values".into(),
            ));
        }
        let d = &dynamics;
        if ![d.b, d.c, d.x_e, d.x_h].iter().all(|v| v.is_finite()) {
            return Err(Error::Model("dynamics constants must be finite".into()));
        }
        Ok(Self {
            dynamics,
            sigma_w,
            controls,
            domain,
        })
    }

    pub fn n_actions(&self) -> usize {
        self.controls.len()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Control vectors in the layout used by datasets and abstractions.
    pub fn control_vectors(&self) -> Vec<Vec<f64>> {
        self.controls.iter().map(|&u| vec![u]).collect()
    }

    /// One transition. The noise is redrawn until the successor lies in the
    /// domain, which makes it a Gaussian truncated to the domain.
    pub fn step(&self, x: &[f64], action: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        if x.len() != self.dim() || !self.domain.contains(x) {
            return Err(Error::Domain { point: x.to_vec() });
        }
        let u = *self
            .controls
            .get(action)
            .ok_or_else(|| Error::Input(format!("unknown action {action}")))?;
        let mean = self.dynamics.mean(x, u);
        let mut next = vec![0.0; mean.len()];
        for _ in 0..MAX_REJECTIONS {
            for (n, m) in next.iter_mut().zip(&mean) {
                let w: f64 = rng.sample(StandardNormal);
                *n = m + self.sigma_w * w;
            }
            if self.domain.contains(&next) {
                return Ok(next);
            }
        }
        Err(Error::Model(format!(
            "no successor of {x:?} under action {action} landed in the domain after \
             {MAX_REJECTIONS} draws; the domain is too small for the dynamics"
        )))
    }
}

/// Independent stream for `(seed, purpose, i, j)`.
pub fn stream(seed: u64, purpose: &str, i: u64, j: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(i.to_le_bytes());
    h.update(j.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataMode {
    /// `per_prompt` successors at each prompt point, per action.
    Grid { prompts: Points, per_prompt: usize },
    /// `n` inputs uniform on the domain, one successor each, per action.
    Uniform { n: usize },
}

pub fn gen_dataset(model: &SystemModel, mode: &DataMode, seed: u64) -> Result<Dataset> {
    let dim = model.dim();
    let inputs = match mode {
        DataMode::Grid {
            prompts,
            per_prompt,
        } => {
            if prompts.is_empty() || *per_prompt == 0 {
                return Err(Error::Input(
                    "grid sampling needs prompts and per_prompt >= 1".into(),
                ));
            }
            if prompts.dim() != dim {
                return Err(Error::Input(
                    "prompt dimension differs from the model".into(),
                ));
            }
            let mut pts = Points::with_capacity(dim, prompts.len() * per_prompt);
            for x in prompts.iter() {
                for _ in 0..*per_prompt {
                    pts.push(x)?;
                }
            }
            pts
        }
        DataMode::Uniform { n } => {
            if *n == 0 {
                return Err(Error::Input("distribution sampling needs n >= 1".into()));
            }
            let lo = &model.domain.lo;
            let hi = &model.domain.hi;
            let flat: Vec<f64> = (0..*n)
                .flat_map(|i| {
                    let mut rng = stream(seed, "input", i as u64, 0);
                    (0..dim)
                        .map(|d| lo[d] + (hi[d] - lo[d]) * rng.random::<f64>())
                        .collect::<Vec<_>>()
                })
                .collect();
            Points::from_flat(dim, flat)?
        }
    };
    let actions = (0..model.n_actions())
        .map(|a| {
            let succ = (0..inputs.len())
                .into_par_iter()
                .map(|i| {
                    model.step(
                        inputs.get(i),
                        a,
                        &mut stream(seed, "successor", a as u64, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mut successors = Points::with_capacity(dim, succ.len());
            for y in &succ {
                assert!(model.domain.contains(y), "successor {y:?} left the domain");
                successors.push(y)?;
            }
            Ok(ActionSamples {
                control: vec![model.controls[a]],
                inputs: inputs.clone(),
                successors,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = match mode {
        DataMode::Grid {
            prompts,
            per_prompt,
        } => SamplingMode::GridPrompted {
            prompts: prompts.len(),
            per_prompt: *per_prompt,
        },
        DataMode::Uniform { .. } => SamplingMode::DistributionSampled {
            distribution: "uniform".into(),
        },
    };
    let ds = Dataset {
        dim,
        actions,
        meta: DatasetMeta { mode, seed },
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<usize>,
    pub satisfied: bool,
}

/// Whether a state sequence satisfies the task. For a finite horizon `H` the
/// first `H + 1` states must be safe; unbounded tasks need a reach state before
/// any avoid state. A sequence too short to decide counts as a failure.
pub fn satisfies(spec: &Spec, horizon: Horizon, states: &[Vec<f64>]) -> bool {
    match horizon {
        Horizon::Finite { steps } => {
            states.len() > steps && states[..=steps].iter().all(|x| !spec.is_avoid(x))
        }
        Horizon::Unbounded => {
            for x in states {
                if spec.is_avoid(x) {
                    return false;
                }
                if spec.is_reach(x) {
                    return true;
                }
            }
            false
        }
    }
}

/// Rolls out `policy` from `x0` until the outcome is decided or `cap` steps
/// have been taken (unbounded tasks only).
pub fn simulate(
    model: &SystemModel,
    policy: &StatePolicy<'_>,
    horizon: Horizon,
    cap: usize,
    x0: &[f64],
    rng: &mut impl Rng,
) -> Result<Trajectory> {
    let spec = policy.partition.spec();
    let steps = match horizon {
        Horizon::Finite { steps } => steps,
        Horizon::Unbounded => cap,
    };
    let mut states = vec![x0.to_vec()];
    let mut controls = Vec::new();
    for t in 0..steps {
        let x = states.last().expect("nonempty");
        if spec.is_avoid(x) || (horizon == Horizon::Unbounded && spec.is_reach(x)) {
            break;
        }
        let a = policy.action(x, t)?;
        let next = model.step(x, a, rng)?;
        controls.push(a);
        states.push(next);
    }
    let satisfied = satisfies(spec, horizon, &states);
    Ok(Trajectory {
        states,
        controls,
        satisfied,
    })
}

/// Empirical satisfaction probability of one region with a Wilson interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimate {
    pub region_id: usize,
    pub successes: usize,
    pub runs: usize,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Wilson score interval for `k` successes out of `n` at quantile `z`.
pub fn wilson(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // exact at the ends, where rounding would otherwise exclude p itself
    let lo = if k == 0 {
        0.0
    } else {
        (center - half).max(0.0)
    };
    let hi = if k as f64 == n {
        1.0
    } else {
        (center + half).min(1.0)
    };
    (lo, hi)
}

/// Runs `runs` trajectories from the center of every cell. Unbounded tasks are
/// cut at `10 |S|` steps and unfinished runs count as failures.
pub fn monte_carlo(
    model: &SystemModel,
    policy: &StatePolicy<'_>,
    horizon: Horizon,
    runs: usize,
    seed: u64,
) -> Result<Vec<RegionEstimate>> {
    let p = policy.partition;
    let cap = CAP_PER_STATE * p.n_states();
    (0..p.n_cells())
        .map(|cell| {
            let x0 = &p.cell(cell).center;
            let outcomes = (0..runs)
                .into_par_iter()
                .map(|r| {
                    let mut rng = stream(seed, "monte-carlo", cell as u64, r as u64);
                    simulate(model, policy, horizon, cap, x0, &mut rng).map(|t| t.satisfied)
                })
                .collect::<Result<Vec<_>>>()?;
            let successes = outcomes.iter().filter(|&&s| s).count();
            let (ci_low, ci_high) = wilson(successes, runs, Z99);
            Ok(RegionEstimate {
                region_id: cell,
                successes,
                runs,
                p_hat: if runs == 0 {
                    0.0
                } else {
                    successes as f64 / runs as f64
                },
                ci_low,
                ci_high,
            })
        })
        .collect()
}

/// `region_id,p_hat,ci_low,ci_high,runs`.
pub fn write_validation_csv(path: &Path, estimates: &[RegionEstimate]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(w, "region_id,p_hat,ci_low,ci_high,runs").map_err(io)?;
    for e in estimates {
        writeln!(
            w,
            "{},{:?},{:?},{:?},{}",
            e.region_id, e.p_hat, e.ci_low, e.ci_high, e.runs
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_validation_csv(path: &Path) -> Result<Vec<RegionEstimate>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|f| f.trim().parse().ok())
                .ok_or_else(|| Error::Input(format!("{}: bad field {i}", path.display())))
        };
        let runs = num(4)? as usize;
        let p_hat = num(1)?;
        out.push(RegionEstimate {
            region_id: num(0)? as usize,
            successes: (p_hat * runs as f64).round() as usize,
            runs,
            p_hat,
            ci_low: num(2)?,
            ci_high: num(3)?,
        });
    }
    Ok(out)
}

/// Regions whose interval lies entirely above `p_lower` or entirely below
/// `p_upper`, as `(below_lower, above_upper)` cell ids over non-avoid cells.
pub fn bracket_violations(
    p: &Partition,
    estimates: &[RegionEstimate],
    p_lower: &[f64],
    p_upper: &[f64],
) -> (Vec<usize>, Vec<usize>) {
    let mut low = Vec::new();
    let mut high = Vec::new();
    for e in estimates {
        if p.cell(e.region_id).label == crate::partition::Label::Avoid {
            continue;
        }
        let s = p.state_of_cell(e.region_id);
        if e.ci_high < p_lower[s] {
            low.push(e.region_id);
        }
        if e.ci_low > p_upper[s] {
            high.push(e.region_id);
        }
    }
    (low, high)
}
