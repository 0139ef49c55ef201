//! Robust dynamic programming on the uncertain MDP.
//!
//! The pessimistic value `p_lower` is computed by max-over-actions,
//! min-over-ambiguity value iteration; the adversary is never stored, it is
//! realized pointwise by the inner QCLP. Inner minima are replaced by their
//! certified lower bounds and inner maxima by certified upper bounds, so both
//! reported vectors stay on the sound side of the exact recursion.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::abstraction::Umdp;
use crate::error::{Error, Result};
use crate::partition::{Label, Partition};
use crate::qclp::{self, QclpProblem, Sense};

/// Actions whose values differ by at most this much are considered tied.
pub const TIE_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Horizon {
    /// Reach-avoid with no time bound.
    Unbounded,
    /// Stay in the safe set for this many steps.
    Finite { steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdpOptions {
    pub conv_tol: f64,
    pub max_sweeps: usize,
    pub tol_obj: f64,
    pub tol_feas: f64,
}

impl Default for RdpOptions {
    fn default() -> Self {
        Self {
            conv_tol: 1e-6,
            max_sweeps: 500,
            tol_obj: 1e-6,
            tol_feas: 1e-8,
        }
    }
}

/// Output of [`robust_value_iteration`].
#[derive(Clone, Debug, PartialEq)]
pub struct ValueIteration {
    pub horizon: Horizon,
    /// One entry per state (cells, then the avoid state).
    pub p_lower: Vec<f64>,
    /// Greedy action per state for each sweep; `greedy[k]` produced iterate `k + 1`.
    pub greedy: Vec<Vec<usize>>,
    pub sweeps: usize,
    /// Sup-norm change of the last sweep.
    pub residual: f64,
    pub converged: bool,
    /// Largest decrease of a raw unbounded-horizon iterate below its
    /// predecessor, before the monotone clamp; zero up to solver tolerance.
    pub max_drop: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieBreak {
    pub state: usize,
    /// Actions tied on the value key.
    pub tied: Vec<usize>,
    pub chosen: usize,
    /// `progress` or `lowest-index`.
    pub rule: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    pub horizon: Horizon,
    /// `actions[t][state]`; a single row for stationary policies.
    pub actions: Vec<Vec<usize>>,
    /// Action returned on avoid states.
    pub default_action: usize,
    pub tie_breaks: Vec<TieBreak>,
}

impl Policy {
    pub fn is_stationary(&self) -> bool {
        self.actions.len() == 1
    }

    pub fn action(&self, state: usize, t: usize) -> usize {
        let row = &self.actions[t.min(self.actions.len() - 1)];
        row[state]
    }

    /// Builds the time-indexed policy of a finite-horizon iteration:
    /// at time `t` the greedy action of the sweep with `H - t` steps to go.
    pub fn from_finite(vi: &ValueIteration) -> Result<Self> {
        let Horizon::Finite { steps } = vi.horizon else {
            return Err(Error::Input(
                "time-indexed policies need a finite horizon".into(),
            ));
        };
        let actions = (0..steps)
            .map(|t| vi.greedy[steps - t - 1].clone())
            .collect();
        Ok(Self {
            horizon: vi.horizon,
            actions,
            default_action: 0,
            tie_breaks: Vec::new(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValueBounds {
    pub p_lower: Vec<f64>,
    pub p_upper: Vec<f64>,
    pub sweeps_lower: usize,
    pub sweeps_upper: usize,
    pub residual_lower: f64,
    pub residual_upper: f64,
}

/// States whose value is pinned: avoid states always, reach states in the
/// reach-avoid task.
fn is_terminal(u: &Umdp, horizon: Horizon, s: usize) -> bool {
    match u.label(s) {
        Label::Avoid => true,
        Label::Reach => horizon == Horizon::Unbounded,
        Label::Safe => false,
    }
}

fn initial_values(u: &Umdp, horizon: Horizon) -> Vec<f64> {
    (0..u.n_states())
        .map(|s| match (u.label(s), horizon) {
            (Label::Avoid, _) => 0.0,
            (Label::Reach, _) => 1.0,
            (Label::Safe, Horizon::Unbounded) => 0.0,
            (Label::Safe, Horizon::Finite { .. }) => 1.0,
        })
        .collect()
}

/// Value of every atom: the avoid cells carry the avoid state's value.
fn atom_values(u: &Umdp, v: &[f64]) -> Vec<f64> {
    (0..u.n_cells())
        .map(|j| {
            if u.label(j) == Label::Avoid {
                v[u.avoid_state()]
            } else {
                v[j]
            }
        })
        .collect()
}

/// Solves `sense_{g in Gamma_{s,a}} g^T values` for all listed pairs, in parallel,
/// returning certified bounds in input order.
fn inner_values(
    u: &Umdp,
    pairs: &[(usize, usize)],
    values: &[f64],
    sense: Sense,
    opts: &RdpOptions,
    sweep: usize,
) -> Result<Vec<f64>> {
    let problems: Vec<QclpProblem<'_>> = pairs
        .iter()
        .map(|&(s, a)| QclpProblem {
            values,
            data: u.ambiguity(s, a).expect("non-avoid state"),
            sense,
            tol_obj: opts.tol_obj,
            tol_feas: opts.tol_feas,
        })
        .collect();
    qclp::solve_batch(&problems)
        .into_iter()
        .zip(pairs)
        .map(|(r, &(s, a))| {
            r.map(|sol| sol.objective.clamp(0.0, 1.0))
                .map_err(|e| Error::InnerSolve {
                    state: s,
                    action: a,
                    sweep,
                    source: Box::new(e),
                })
        })
        .collect()
}

fn validate(opts: &RdpOptions) -> Result<()> {
    if !(opts.conv_tol > 0.0 && opts.tol_obj > 0.0 && opts.tol_feas > 0.0) {
        return Err(Error::Input("tolerances must be > 0".into()));
    }
    if opts.max_sweeps == 0 {
        return Err(Error::Input("max_sweeps must be >= 1".into()));
    }
    Ok(())
}

/// Pessimistic value iteration. Unbounded: iterate from the reach indicator
/// until the sup-norm change drops below `conv_tol` or `max_sweeps` is hit.
/// Finite: exactly `steps` sweeps of the safety recursion.
pub fn robust_value_iteration(
    u: &Umdp,
    horizon: Horizon,
    opts: &RdpOptions,
) -> Result<ValueIteration> {
    validate(opts)?;
    let n_actions = u.n_actions();
    let active: Vec<usize> = (0..u.n_states())
        .filter(|&s| !is_terminal(u, horizon, s))
        .collect();
    let pairs: Vec<(usize, usize)> = active
        .iter()
        .flat_map(|&s| (0..n_actions).map(move |a| (s, a)))
        .collect();
    let mut v = initial_values(u, horizon);
    let mut greedy = Vec::new();
    let sweeps_cap = match horizon {
        Horizon::Unbounded => opts.max_sweeps,
        Horizon::Finite { steps } => steps,
    };
    let mut residual = 0.0;
    let mut max_drop: f64 = 0.0;
    let mut converged = matches!(horizon, Horizon::Finite { .. });
    for sweep in 0..sweeps_cap {
        let vals = atom_values(u, &v);
        let inner = inner_values(u, &pairs, &vals, Sense::Min, opts, sweep)?;
        let mut next = v.clone();
        let mut choice = vec![0usize; u.n_states()];
        for (k, &s) in active.iter().enumerate() {
            let row = &inner[k * n_actions..(k + 1) * n_actions];
            let (best_a, best) = argmax_lowest(row);
            choice[s] = best_a;
            next[s] = match horizon {
                // iterates from below are nondecreasing; keep the larger sound value
                Horizon::Unbounded => {
                    max_drop = max_drop.max(v[s] - best);
                    best.max(v[s])
                }
                Horizon::Finite { .. } => best,
            };
        }
        residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        greedy.push(choice);
        log::debug!("sweep {}: residual {residual:.3e}", sweep + 1);
        if horizon == Horizon::Unbounded && residual < opts.conv_tol {
            converged = true;
            break;
        }
    }
    Ok(ValueIteration {
        horizon,
        p_lower: v,
        sweeps: greedy.len(),
        greedy,
        residual,
        converged,
        max_drop,
    })
}

fn argmax_lowest(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (a, &x) in row.iter().enumerate().skip(1) {
        if x > best.1 + TIE_TOL {
            best = (a, x);
        }
    }
    best
}

/// Stationary greedy policy for `p_lower`: per state the action maximizing the
/// inner minimum; ties go to the larger one-step robust probability of entering
/// the reach set, then to the lowest action index.
pub fn extract_policy(u: &Umdp, p_lower: &[f64], opts: &RdpOptions) -> Result<Policy> {
    validate(opts)?;
    if p_lower.len() != u.n_states() {
        return Err(Error::Input(
            "value vector length does not match the state count".into(),
        ));
    }
    let horizon = Horizon::Unbounded;
    let n_actions = u.n_actions();
    let active: Vec<usize> = (0..u.n_states())
        .filter(|&s| !is_terminal(u, horizon, s))
        .collect();
    let pairs: Vec<(usize, usize)> = active
        .iter()
        .flat_map(|&s| (0..n_actions).map(move |a| (s, a)))
        .collect();
    let vals = atom_values(u, p_lower);
    let inner = inner_values(u, &pairs, &vals, Sense::Min, opts, 0)?;
    let reach: Vec<f64> = (0..u.n_cells())
        .map(|j| if u.label(j) == Label::Reach { 1.0 } else { 0.0 })
        .collect();

    let mut actions = vec![0usize; u.n_states()];
    let mut tie_breaks = Vec::new();
    for (k, &s) in active.iter().enumerate() {
        let row = &inner[k * n_actions..(k + 1) * n_actions];
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tied: Vec<usize> = (0..n_actions)
            .filter(|&a| row[a] >= best - TIE_TOL)
            .collect();
        if tied.len() == 1 {
            actions[s] = tied[0];
            continue;
        }
        let tied_pairs: Vec<(usize, usize)> = tied.iter().map(|&a| (s, a)).collect();
        let progress = inner_values(u, &tied_pairs, &reach, Sense::Min, opts, 0)?;
        let top = progress.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let finalists: Vec<usize> = tied
            .iter()
            .zip(&progress)
            .filter(|&(_, &p)| p >= top - TIE_TOL)
            .map(|(&a, _)| a)
            .collect();
        let chosen = finalists[0];
        let rule = if finalists.len() == 1 {
            "progress"
        } else {
            "lowest-index"
        };
        log::debug!("state {s}: tie among {tied:?} resolved to {chosen} by {rule}");
        actions[s] = chosen;
        tie_breaks.push(TieBreak {
            state: s,
            tied,
            chosen,
            rule: rule.into(),
        });
    }
    Ok(Policy {
        horizon,
        actions: vec![actions],
        default_action: 0,
        tie_breaks,
    })
}

/// Fixed-policy value iteration with inner maxima. Unbounded: iterate from the
/// reach indicator and report the last iterate plus `conv_tol`. Finite: the
/// `steps`-sweep recursion under the time-indexed policy.
pub fn optimistic_bound(
    u: &Umdp,
    pol: &Policy,
    opts: &RdpOptions,
) -> Result<(Vec<f64>, usize, f64)> {
    validate(opts)?;
    let horizon = pol.horizon;
    let active: Vec<usize> = (0..u.n_states())
        .filter(|&s| !is_terminal(u, horizon, s))
        .collect();
    let mut v = initial_values(u, horizon);
    let (cap, steps) = match horizon {
        Horizon::Unbounded => (opts.max_sweeps, 0),
        Horizon::Finite { steps } => (steps, steps),
    };
    let mut residual = 0.0;
    let mut sweeps = 0;
    for sweep in 0..cap {
        // the sweep computing `k + 1` steps to go runs at time `H - k - 1`
        let t = if steps > 0 { steps - sweep - 1 } else { 0 };
        let pairs: Vec<(usize, usize)> = active.iter().map(|&s| (s, pol.action(s, t))).collect();
        let vals = atom_values(u, &v);
        let inner = inner_values(u, &pairs, &vals, Sense::Max, opts, sweep)?;
        let mut next = v.clone();
        for (k, &s) in active.iter().enumerate() {
            next[s] = inner[k];
        }
        residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = next;
        sweeps += 1;
        if horizon == Horizon::Unbounded && residual < opts.conv_tol {
            break;
        }
    }
    if horizon == Horizon::Unbounded {
        for s in &active {
            v[*s] = (v[*s] + opts.conv_tol).min(1.0);
        }
    }
    Ok((v, sweeps, residual))
}

/// Runs the whole synthesis: pessimistic iteration, policy, optimistic bound.
pub fn synthesize(u: &Umdp, horizon: Horizon, opts: &RdpOptions) -> Result<(ValueBounds, Policy)> {
    let vi = robust_value_iteration(u, horizon, opts)?;
    let policy = match horizon {
        Horizon::Unbounded => extract_policy(u, &vi.p_lower, opts)?,
        Horizon::Finite { .. } => Policy::from_finite(&vi)?,
    };
    let (p_upper, sweeps_upper, residual_upper) = optimistic_bound(u, &policy, opts)?;
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    Ok((
        ValueBounds {
            p_lower: clamp(vi.p_lower),
            p_upper: clamp(p_upper),
            sweeps_lower: vi.sweeps,
            sweeps_upper,
            residual_lower: vi.residual,
            residual_upper,
        },
        policy,
    ))
}

/// A policy on the continuous domain: the action of the containing region.
#[derive(Clone, Debug)]
pub struct StatePolicy<'a> {
    pub policy: &'a Policy,
    pub partition: &'a Partition,
}

pub fn refine<'a>(policy: &'a Policy, partition: &'a Partition) -> StatePolicy<'a> {
    StatePolicy { policy, partition }
}

impl StatePolicy<'_> {
    pub fn action(&self, x: &[f64], t: usize) -> Result<usize> {
        let s = self.partition.locate(x)?;
        if s == self.partition.avoid_state() {
            Ok(self.policy.default_action)
        } else {
            Ok(self.policy.action(s, t))
        }
    }
}

/// `region_id,center_0..,label,action,p_lower,p_upper`: one row per cell, then
/// the aggregated avoid state (empty center and action).
pub fn write_results_csv(
    path: &Path,
    p: &Partition,
    bounds: &ValueBounds,
    policy: &Policy,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let n = p.dim();
    let mut header = String::from("region_id");
    for d in 0..n {
        header.push_str(&format!(",center_{d}"));
    }
    header.push_str(",label,action,p_lower,p_upper");
    writeln!(w, "{header}").map_err(io)?;
    for (i, cell) in p.cells().iter().enumerate() {
        let s = p.state_of_cell(i);
        let mut line = i.to_string();
        for c in &cell.center {
            line.push_str(&format!(",{c:?}"));
        }
        let action = if cell.label == Label::Avoid {
            String::new()
        } else {
            policy.action(s, 0).to_string()
        };
        line.push_str(&format!(
            ",{},{action},{:?},{:?}",
            cell.label.as_str(),
            bounds.p_lower[s],
            bounds.p_upper[s]
        ));
        writeln!(w, "{line}").map_err(io)?;
    }
    let s = p.avoid_state();
    let mut line = s.to_string();
    for _ in 0..n {
        line.push(',');
    }
    line.push_str(&format!(
        ",avoid,,{:?},{:?}",
        bounds.p_lower[s], bounds.p_upper[s]
    ));
    writeln!(w, "{line}").map_err(io)?;
    w.flush().map_err(io)
}

/// `region_id,t_0..t_{H-1}` for time-indexed policies (non-avoid cells only).
pub fn write_policy_csv(path: &Path, p: &Partition, policy: &Policy) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    let mut header = String::from("region_id");
    for t in 0..policy.actions.len() {
        header.push_str(&format!(",t_{t}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for i in 0..p.n_cells() {
        if p.cell(i).label == Label::Avoid {
            continue;
        }
        let mut line = i.to_string();
        for row in &policy.actions {
            line.push_str(&format!(",{}", row[i]));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::build;
    use crate::cme::{fit, ActionSamples, Dataset, DatasetMeta, SamplingMode};
    use crate::errbounds::{BudgetMode, Eps1Provenance, ErrorBudget};
    use crate::kernel::{KernelParams, Points};
    use crate::partition::{build_grid, Rect, Spec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Four cells on [0, 4]: avoid, safe, safe, reach. Action 1 pushes right.
    fn setup(eps1: f64, reach: bool) -> (Umdp, Partition) {
        setup_with(eps1, reach, 4, 0.7)
    }

    fn setup_with(eps1: f64, reach: bool, cells: usize, sigma_l: f64) -> (Umdp, Partition) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = Spec::new(
            Rect::interval(0.0, 4.0).unwrap(),
            Rect::interval(1.0, 4.0).unwrap(),
            reach.then(|| Rect::interval(3.0, 4.0).unwrap()),
        )
        .unwrap();
        let p = build_grid(&spec, &[cells]).unwrap();
        let mut actions = Vec::new();
        for u in [0.0, 1.0] {
            let mut xs = Points::new(1);
            let mut ys = Points::new(1);
            for c in p.centers().iter() {
                for _ in 0..15 {
                    xs.push(c).unwrap();
                    let y: f64 = 0.8 * c[0] + 0.2 + 0.9 * u + rng.random_range(-0.3..0.3);
                    ys.push(&[y.clamp(0.0, 4.0)]).unwrap();
                }
            }
            actions.push(ActionSamples {
                control: vec![u],
                inputs: xs,
                successors: ys,
            });
        }
        let data = Dataset {
            dim: 1,
            actions,
            meta: DatasetMeta {
                mode: SamplingMode::GridPrompted {
                    prompts: cells,
                    per_prompt: 15,
                },
                seed: 5,
            },
        };
        let model = fit(&data, KernelParams::new(1.0, sigma_l).unwrap(), 1e-3).unwrap();
        let budget = ErrorBudget::compute(
            &model,
            &p,
            eps1,
            Eps1Provenance::User,
            BudgetMode::PerRegion,
            1e-6,
            10_000,
        )
        .unwrap();
        (build(&model, &p, &budget).unwrap(), p)
    }

    /// Feasible points of every (state, action) set on a simplex grid.
    fn feasible_grid(u: &Umdp, res: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
        let mut grid = Vec::new();
        for i in 0..=res {
            for j in 0..=res - i {
                for k in 0..=res - i - j {
                    let l = res - i - j - k;
                    grid.push([i, j, k, l].map(|c| c as f64 / res as f64).to_vec());
                }
            }
        }
        (0..u.n_cells())
            .map(|s| {
                (0..u.n_actions())
                    .map(|a| match u.ambiguity(s, a) {
                        Some(d) => grid
                            .iter()
                            .filter(|g| d.member(g).unwrap().member)
                            .cloned()
                            .collect(),
                        None => Vec::new(),
                    })
                    .collect()
            })
            .collect()
    }

    fn brute_force(u: &Umdp, sets: &[Vec<Vec<Vec<f64>>>], horizon: Horizon) -> Vec<f64> {
        let mut v = initial_values(u, horizon);
        let sweeps = match horizon {
            Horizon::Unbounded => 400,
            Horizon::Finite { steps } => steps,
        };
        for _ in 0..sweeps {
            let vals = atom_values(u, &v);
            let mut next = v.clone();
            for s in 0..u.n_cells() {
                if is_terminal(u, horizon, s) {
                    continue;
                }
                next[s] = (0..u.n_actions())
                    .map(|a| {
                        sets[s][a]
                            .iter()
                            .map(|g| g.iter().zip(&vals).map(|(x, y)| x * y).sum::<f64>())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
            }
            v = next;
        }
        v
    }

    /// Three atoms at 0, 1, 2 labeled avoid, safe, reach.
    fn chain(eps: f64) -> Umdp {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let centers = Points::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let k1 = std::sync::Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let set = |w: [f64; 3]| {
            let t = crate::kernel::FiniteMeasure::new(centers.clone(), w.to_vec()).unwrap();
            Some(
                crate::abstraction::AmbiguityData::from_measure(&k, k1.clone(), &centers, &t, eps)
                    .unwrap(),
            )
        };
        let sets = vec![
            vec![None, None],
            vec![set([0.1, 0.6, 0.3]), set([0.25, 0.2, 0.55])],
            vec![set([0.05, 0.15, 0.8]), set([0.2, 0.3, 0.5])],
        ];
        Umdp::from_sets(
            k,
            vec![Label::Avoid, Label::Safe, Label::Reach],
            centers,
            vec![vec![0.0], vec![1.0]],
            sets,
        )
        .unwrap()
    }

    fn simplex3(res: usize) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for i in 0..=res {
            for j in 0..=res - i {
                out.push(vec![
                    i as f64 / res as f64,
                    j as f64 / res as f64,
                    (res - i - j) as f64 / res as f64,
                ]);
            }
        }
        out
    }

    #[test]
    fn identical_actions_tie_to_lowest_index() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let centers = Points::from_rows(&[[0.0], [1.0], [2.0], [3.0]]).unwrap();
        let k1 = std::sync::Arc::new(crate::kernel::gram(&k, &centers, &centers).unwrap().entries);
        let set = |w: [f64; 4]| {
            let t = crate::kernel::FiniteMeasure::new(centers.clone(), w.to_vec()).unwrap();
            Some(
                crate::abstraction::AmbiguityData::from_measure(&k, k1.clone(), &centers, &t, 0.05)
                    .unwrap(),
            )
        };
        let w = [0.1, 0.3, 0.3, 0.3];
        let sets = vec![
            vec![None, None],
            vec![set(w), set(w)],
            vec![set(w), set(w)],
            vec![set(w), set(w)],
        ];
        let labels = vec![Label::Avoid, Label::Safe, Label::Safe, Label::Reach];
        let u = Umdp::from_sets(k, labels, centers, vec![vec![0.0], vec![1.0]], sets).unwrap();
        let (_, pol) = synthesize(&u, Horizon::Unbounded, &RdpOptions::default()).unwrap();
        assert_eq!(pol.actions[0][1], 0);
        assert_eq!(pol.tie_breaks.len(), 2);
        assert!(pol
            .tie_breaks
            .iter()
            .all(|t| t.rule == "lowest-index" && t.tied == vec![0, 1]));
    }

    #[test]
    fn chain_matches_fine_brute_force() {
        let u = chain(0.1);
        let grid = simplex3(2000);
        let sets: Vec<Vec<Vec<Vec<f64>>>> = (0..3)
            .map(|s| {
                (0..2)
                    .map(|a| match u.ambiguity(s, a) {
                        Some(d) => grid
                            .iter()
                            .filter(|g| d.member(g).unwrap().member)
                            .cloned()
                            .collect(),
                        None => Vec::new(),
                    })
                    .collect()
            })
            .collect();
        for horizon in [Horizon::Unbounded, Horizon::Finite { steps: 6 }] {
            let vi = robust_value_iteration(&u, horizon, &RdpOptions::default()).unwrap();
            assert!(vi.max_drop <= 1e-6);
            let bf = brute_force(&u, &sets, horizon);
            for s in 0..u.n_states() {
                assert!(
                    (vi.p_lower[s] - bf[s]).abs() < 1e-3,
                    "{horizon:?} s={s}: {} vs {}",
                    vi.p_lower[s],
                    bf[s]
                );
            }
        }
        assert!(u
            .write_container(&std::env::temp_dir().join("never.bin"))
            .is_err());
    }

    #[test]
    fn matches_brute_force_minimax() {
        let (u, _) = setup(0.15, true);
        let sets = feasible_grid(&u, 80);
        assert!(sets[1][0].len() > 10 && sets[2][1].len() > 10);
        for horizon in [Horizon::Unbounded, Horizon::Finite { steps: 4 }] {
            let vi = robust_value_iteration(&u, horizon, &RdpOptions::default()).unwrap();
            let bf = brute_force(&u, &sets, horizon);
            for s in 0..u.n_states() {
                // the grid is a subset of each set, so its minimum sits above the exact one
                assert!(
                    vi.p_lower[s] <= bf[s] + 1e-6,
                    "{horizon:?} s={s}: {} > {}",
                    vi.p_lower[s],
                    bf[s]
                );
                assert!(
                    bf[s] - vi.p_lower[s] < 0.03,
                    "{horizon:?} s={s}: {} vs {}",
                    vi.p_lower[s],
                    bf[s]
                );
            }
        }
    }

    #[test]
    fn unbounded_bracket_and_terminals() {
        let (u, p) = setup_with(0.0, true, 12, 1.0);
        let opts = RdpOptions::default();
        let (b, pol) = synthesize(&u, Horizon::Unbounded, &opts).unwrap();
        assert_eq!(b.p_lower[0], 0.0);
        assert_eq!(b.p_lower[11], 1.0);
        assert_eq!(b.p_lower[p.avoid_state()], 0.0);
        for s in 0..u.n_states() {
            assert!(b.p_lower[s] <= b.p_upper[s] + 2.0 * opts.conv_tol, "s={s}");
        }
        assert!(pol.is_stationary());
        // pushing right is the only way to the reach set
        assert_eq!(pol.action(5, 0), 1);
    }

    #[test]
    fn safety_values_shrink_with_horizon() {
        let (u, _) = setup(0.15, false);
        let opts = RdpOptions::default();
        let mut prev = vec![1.0; u.n_states()];
        for h in 1..6 {
            let (b, pol) = synthesize(&u, Horizon::Finite { steps: h }, &opts).unwrap();
            assert_eq!(pol.actions.len(), h);
            for s in 0..u.n_cells() {
                assert!(b.p_lower[s] <= prev[s] + 1e-9);
                assert!(b.p_lower[s] <= b.p_upper[s] + 1e-12);
            }
            prev = b.p_lower;
        }
    }

    #[test]
    fn huge_ambiguity_is_hopeless() {
        let (u, _) = setup(10.0, true);
        let vi = robust_value_iteration(&u, Horizon::Unbounded, &RdpOptions::default()).unwrap();
        assert!(vi.converged);
        assert!(vi.p_lower[1].abs() < 1e-6 && vi.p_lower[2].abs() < 1e-6);
    }

    #[test]
    fn refine_follows_regions() {
        let (u, p) = setup(0.15, true);
        let (_, pol) = synthesize(&u, Horizon::Unbounded, &RdpOptions::default()).unwrap();
        let sp = refine(&pol, &p);
        assert_eq!(sp.action(&[0.5], 0).unwrap(), pol.default_action);
        assert_eq!(sp.action(&[2.5], 0).unwrap(), pol.action(2, 0));
        assert!(sp.action(&[9.0], 0).is_err());
    }

    #[test]
    fn results_csv_layout() {
        let (u, p) = setup(0.15, true);
        let (b, pol) = synthesize(&u, Horizon::Unbounded, &RdpOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("r.csv");
        write_results_csv(&f, &p, &b, &pol).unwrap();
        let text = std::fs::read_to_string(&f).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "region_id,center_0,label,action,p_lower,p_upper");
        assert_eq!(lines.len(), 1 + p.n_states());
        assert!(lines[1].starts_with("0,0.5,avoid,,"));
        assert!(lines[4].starts_with("3,3.5,reach,"));
        assert!(lines[5].starts_with("4,,avoid,,0.0,0.0"));
    }
}
