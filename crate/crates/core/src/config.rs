//! Run configuration: TOML with `[section]` headers and `key = value` lines.
//!
//! Every section and key has a default reproducing the temperature benchmark
//! (safety for 15 steps, 35 regions), unknown keys are rejected, and every
//! consumed value is checked with an error naming its key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::errbounds::BudgetMode;
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::partition::{Rect, Spec};
use crate::rdp::{Horizon, RdpOptions};
use crate::sim::{Dynamics, SystemModel};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub kernel: KernelSection,
    pub cme: CmeSection,
    pub spec: SpecSection,
    pub partition: PartitionSection,
    pub budget: BudgetSection,
    pub solver: SolverSection,
    pub sim: SimSection,
    pub task: TaskSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub sigma_f: f64,
    pub sigma_l: f64,
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            sigma_f: 10.0,
            sigma_l: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CmeSection {
    pub lambda: f64,
}

impl Default for CmeSection {
    fn default() -> Self {
        Self { lambda: 0.001 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxSection {
    fn interval(lo: f64, hi: f64) -> Self {
        Self {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    fn rect(&self, key: &str) -> Result<Rect> {
        Rect::new(self.lo.clone(), self.hi.clone()).map_err(|e| Error::config(key, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecSection {
    pub domain: BoxSection,
    pub safe: BoxSection,
    pub reach: Option<BoxSection>,
}

impl Default for SpecSection {
    fn default() -> Self {
        Self {
            domain: BoxSection::interval(17.5, 23.5),
            safe: BoxSection::interval(19.0, 22.0),
            reach: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionSection {
    pub cells: Vec<usize>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { cells: vec![35] }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eps1Source {
    /// Declared in `budget.eps1`.
    User,
    /// Grid-sampling concentration bound; needs `sim.sampling = "grid"`.
    Theorem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    pub mode: BudgetMode,
    pub eps1_source: Eps1Source,
    pub eps1: Option<f64>,
    pub delta: f64,
    /// Lipschitz constant of the mean dynamics; derived from `sim` if absent.
    pub lipschitz: Option<f64>,
    /// Distance from any point to its prompt; the largest region radius if absent.
    pub eta: Option<f64>,
    pub eps2_tol: f64,
    pub eps2_budget: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        Self {
            mode: BudgetMode::PerRegion,
            eps1_source: Eps1Source::User,
            eps1: Some(0.09),
            delta: 0.1,
            lipschitz: None,
            eta: None,
            eps2_tol: 1e-4,
            eps2_budget: 5_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub conv_tol: f64,
    pub max_sweeps: usize,
    pub tol_obj: f64,
    pub tol_feas: f64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = RdpOptions::default();
        Self {
            conv_tol: d.conv_tol,
            max_sweeps: d.max_sweeps,
            tol_obj: d.tol_obj,
            tol_feas: d.tol_feas,
            workers: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    /// Inputs uniform on the domain, `samples` per control.
    Uniform,
    /// `samples` successors at every region center, per control.
    Grid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub b: f64,
    pub c: f64,
    pub x_e: f64,
    pub x_h: f64,
    pub sigma_w: f64,
    pub controls: Vec<f64>,
    pub sampling: Sampling,
    pub samples: usize,
    /// Optional CSV in the dataset layout used instead of simulating.
    pub dataset: Option<PathBuf>,
    pub seed: u64,
    pub runs_per_state: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let d = Dynamics::default();
        Self {
            b: d.b,
            c: d.c,
            x_e: d.x_e,
            x_h: d.x_h,
            sigma_w: 0.15,
            controls: vec![0.0, 1.0],
            sampling: Sampling::Uniform,
            samples: 7000,
            dataset: None,
            seed: 0,
            runs_per_state: 500,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Safety,
    ReachAvoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSection {
    pub kind: TaskKind,
    /// Steps for the safety task.
    pub horizon: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self {
            kind: TaskKind::Safety,
            horizon: 15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

/// Checked domain objects built from a [`RunConfig`].
#[derive(Clone, Debug)]
pub struct Resolved {
    pub kernel: KernelParams,
    pub lambda: f64,
    pub spec: Spec,
    pub cells: Vec<usize>,
    pub model: SystemModel,
    pub horizon: Horizon,
    pub rdp: RdpOptions,
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::config(
            key,
            format!("must be a finite number > 0, got {v}"),
        ))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let key = e.span().map_or_else(
                || "<document>".to_string(),
                |s| text[s].lines().next().unwrap_or("").to_string(),
            );
            Error::config(key, e.message().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|_| Error::config("<document>", "config is not UTF-8"))?;
        Ok((Self::from_toml(text)?, bytes))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self) -> Result<Resolved> {
        let kernel = KernelParams::new(
            positive("kernel.sigma_f", self.kernel.sigma_f)?,
            positive("kernel.sigma_l", self.kernel.sigma_l)?,
        )?;
        let lambda = self.cme.lambda;
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::config(
                "cme.lambda",
                format!("must be finite and >= 0, got {lambda}"),
            ));
        }
        let domain = self.spec.domain.rect("spec.domain")?;
        let safe = self.spec.safe.rect("spec.safe")?;
        let reach = self
            .spec
            .reach
            .as_ref()
            .map(|r| r.rect("spec.reach"))
            .transpose()?;
        let spec = Spec::new(domain.clone(), safe, reach)
            .map_err(|e| Error::config("spec", e.to_string()))?;
        if self.partition.cells.len() != spec.dim() || self.partition.cells.contains(&0) {
            return Err(Error::config(
                "partition.cells",
                format!("needs {} positive entries, one per dimension", spec.dim()),
            ));
        }
        let horizon = match (self.task.kind, &spec.reach) {
            (TaskKind::Safety, _) => Horizon::Finite {
                steps: self.task.horizon,
            },
            (TaskKind::ReachAvoid, Some(_)) => Horizon::Unbounded,
            (TaskKind::ReachAvoid, None) => {
                return Err(Error::config(
                    "spec.reach",
                    "the reach-avoid task needs a reach set",
                ));
            }
        };
        let b = &self.budget;
        match b.eps1_source {
            Eps1Source::User => {
                let e = b.eps1.ok_or_else(|| {
                    Error::config("budget.eps1", "required when eps1_source = \"user\"")
                })?;
                if !(e >= 0.0 && e.is_finite()) {
                    return Err(Error::config(
                        "budget.eps1",
                        format!("must be finite and >= 0, got {e}"),
                    ));
                }
            }
            Eps1Source::Theorem => {
                if self.sim.sampling != Sampling::Grid || self.sim.dataset.is_some() {
                    return Err(Error::config(
                        "budget.eps1_source",
                        "the theorem bound holds for simulated grid sampling only; set sim.sampling = \"grid\" or declare eps1",
                    ));
                }
                if !(b.delta > 0.0 && b.delta < 1.0) {
                    return Err(Error::config(
                        "budget.delta",
                        format!("must lie in (0, 1), got {}", b.delta),
                    ));
                }
                for (key, v) in [("budget.lipschitz", b.lipschitz), ("budget.eta", b.eta)] {
                    if let Some(v) = v {
                        if !(v >= 0.0 && v.is_finite()) {
                            return Err(Error::config(
                                key,
                                format!("must be finite and >= 0, got {v}"),
                            ));
                        }
                    }
                }
            }
        }
        positive("budget.eps2_tol", b.eps2_tol)?;
        if b.eps2_budget == 0 {
            return Err(Error::config("budget.eps2_budget", "must be >= 1"));
        }
        let s = &self.solver;
        let rdp = RdpOptions {
            conv_tol: positive("solver.conv_tol", s.conv_tol)?,
            max_sweeps: s.max_sweeps,
            tol_obj: positive("solver.tol_obj", s.tol_obj)?,
            tol_feas: positive("solver.tol_feas", s.tol_feas)?,
        };
        if s.max_sweeps == 0 {
            return Err(Error::config("solver.max_sweeps", "must be >= 1"));
        }
        let m = &self.sim;
        for (key, v) in [
            ("sim.b", m.b),
            ("sim.c", m.c),
            ("sim.x_e", m.x_e),
            ("sim.x_h", m.x_h),
        ] {
            if !v.is_finite() {
                return Err(Error::config(key, format!("must be finite, got {v}")));
            }
        }
        positive("sim.sigma_w", m.sigma_w)?;
        if m.controls.is_empty() || m.controls.iter().any(|u| !u.is_finite()) {
            return Err(Error::config(
                "sim.controls",
                "must be a nonempty list of finite numbers",
            ));
        }
        if m.samples == 0 {
            return Err(Error::config("sim.samples", "must be >= 1"));
        }
        if m.runs_per_state == 0 {
            return Err(Error::config("sim.runs_per_state", "must be >= 1"));
        }
        let dynamics = Dynamics {
            b: m.b,
            c: m.c,
            x_e: m.x_e,
            x_h: m.x_h,
        };
        let model = SystemModel::new(dynamics, m.sigma_w, m.controls.clone(), domain)
            .map_err(|e| Error::config("sim", e.to_string()))?;
        Ok(Resolved {
            kernel,
            lambda,
            spec,
            cells: self.partition.cells.clone(),
            model,
            horizon,
            rdp,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, back);
        let r = c.resolve().unwrap();
        assert_eq!(r.horizon, Horizon::Finite { steps: 15 });
        assert_eq!(r.kernel.sigma_f, 10.0);
    }

    #[test]
    fn empty_document_is_the_benchmark() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[kernel]\nsigma_f = 1.0\nsigmaf = 2.0\n").unwrap_err();
        assert!(
            matches!(&err, Error::Config { message, .. } if message.contains("sigmaf")),
            "{err}"
        );
        assert!(RunConfig::from_toml("[kernels]\n").is_err());
    }

    #[test]
    fn bad_values_name_their_key() {
        let key_of = |text: &str| match RunConfig::from_toml(text).unwrap().resolve().unwrap_err() {
            Error::Config { key, .. } => key,
            e => panic!("unexpected {e}"),
        };
        assert_eq!(key_of("[kernel]\nsigma_l = -1.0"), "kernel.sigma_l");
        assert_eq!(key_of("[partition]\ncells = [3, 4]"), "partition.cells");
        assert_eq!(key_of("[task]\nkind = \"reach-avoid\""), "spec.reach");
        assert_eq!(
            key_of("[budget]\neps1_source = \"theorem\""),
            "budget.eps1_source"
        );
        assert_eq!(
            key_of("[budget]\neps1_source = \"user\"\neps1 = -0.1"),
            "budget.eps1"
        );
        assert_eq!(key_of("[sim]\nsigma_w = 0.0"), "sim.sigma_w");
    }

    #[test]
    fn reach_avoid_config() {
        let text =
            "[spec]\nreach = { lo = [20.25], hi = [20.75] }\n[task]\nkind = \"reach-avoid\"\n";
        let r = RunConfig::from_toml(text).unwrap().resolve().unwrap();
        assert_eq!(r.horizon, Horizon::Unbounded);
    }
}
