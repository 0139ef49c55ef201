//! End-to-end run: gen-data, fit, abstract, synthesize, validate, report.
//!
//! Each stage writes its artifacts into the output directory and the manifest
//! is rewritten after every stage, so a failed run keeps everything produced
//! before the failure.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::Umdp;
use crate::cme::{CmeModel, Dataset, DatasetMeta, SamplingMode};
use crate::config::{Eps1Source, Resolved, RunConfig, Sampling, TaskKind};
use crate::errbounds::{self, Eps1Provenance, ErrorBudget};
use crate::error::{Error, Result};
use crate::partition::{Label, Partition};
use crate::rdp::{self, Horizon, Policy, TieBreak, ValueBounds};
use crate::report::{self, Summary};
use crate::sim::{self, DataMode, RegionEstimate};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenData,
    Fit,
    Abstract,
    Synthesize,
    Validate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::GenData,
        Stage::Fit,
        Stage::Abstract,
        Stage::Synthesize,
        Stage::Validate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Fit => "fit",
            Stage::Abstract => "abstract",
            Stage::Synthesize => "synthesize",
            Stage::Validate => "validate",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Input(format!("unknown stage `{s}`")))
    }
}

/// Command-line overrides of a configuration.
#[derive(Clone, Debug)]
pub struct RunOptions {
    /// Last stage to run.
    pub stage: Stage,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            stage: Stage::Report,
            workers: None,
            seed: None,
            out: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub dataset: Option<u64>,
    pub monte_carlo: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub mode: SamplingMode,
    pub samples_per_action: usize,
    /// Input file when the data was not simulated.
    pub source: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub lambda: f64,
    /// Per action.
    pub vrkhs_norm: Vec<f64>,
    /// Whether each norm is exact or a certified upper bound.
    pub norm_exact: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetInfo {
    pub mode: errbounds::BudgetMode,
    pub eps1: f64,
    pub eps1_provenance: Eps1Provenance,
    pub eps2_max: f64,
    /// `(region, action)` pairs whose `eps2` search hit its probe budget;
    /// their value is the certified bound reached, not a tolerance-tight one.
    pub eps2_budget_exhausted: usize,
    pub eps3: f64,
    pub eps3_rule: String,
    pub avoid_representation: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisInfo {
    pub horizon: Horizon,
    pub states: usize,
    pub actions: usize,
    pub sweeps_lower: usize,
    pub residual_lower: f64,
    pub sweeps_upper: usize,
    pub residual_upper: f64,
    pub tie_breaks: Vec<TieBreak>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationInfo {
    pub runs_per_state: usize,
    pub seed: u64,
    pub step_cap: Option<usize>,
    /// Non-avoid regions whose 99% interval lies below `p_lower`.
    pub below_lower: Vec<usize>,
    /// Non-avoid regions whose 99% interval lies above `p_upper`.
    pub above_upper: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub config_path: Option<PathBuf>,
    /// Effective configuration after command-line overrides.
    pub config: RunConfig,
    pub workers: usize,
    pub stages_completed: Vec<String>,
    pub seeds: Seeds,
    pub dataset: Option<DatasetInfo>,
    pub fit: Option<FitInfo>,
    pub budget: Option<BudgetInfo>,
    pub synthesis: Option<SynthesisInfo>,
    pub validation: Option<ValidationInfo>,
    pub summary: Option<Summary>,
    /// Wall-clock seconds per stage.
    pub timings_s: BTreeMap<String, f64>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Abstraction (fit plus abstract) and synthesis times in minutes.
    pub fn times_min(&self) -> (Option<f64>, Option<f64>) {
        let t = |k: &str| self.timings_s.get(k).copied();
        let abs = match (t("fit"), t("abstract")) {
            (Some(a), Some(b)) => Some((a + b) / 60.0),
            _ => None,
        };
        (abs, t("synthesize").map(|s| s / 60.0))
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const DATASET: &str = "dataset.csv";
pub const PARTITION: &str = "partition.csv";
pub const BUDGET: &str = "budget.csv";
pub const UMDP: &str = "umdp.bin";
pub const RESULTS: &str = "results.csv";
pub const POLICY: &str = "policy.csv";
pub const VALIDATION: &str = "validation.csv";

/// In-memory products of a run, for callers that continue in-process.
#[derive(Debug, Default)]
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub partition: Option<Partition>,
    pub dataset: Option<Dataset>,
    pub budget: Option<ErrorBudget>,
    pub bounds: Option<ValueBounds>,
    pub policy: Option<Policy>,
    pub estimates: Option<Vec<RegionEstimate>>,
}

pub fn run_file(config_path: &Path, opts: &RunOptions) -> Result<Outcome> {
    let (cfg, bytes) = RunConfig::load(config_path)?;
    run(&cfg, &bytes, Some(config_path), opts)
}

/// Runs every stage up to `opts.stage`. `config_bytes` is hashed into the
/// manifest.
pub fn run(
    cfg: &RunConfig,
    config_bytes: &[u8],
    config_path: Option<&Path>,
    opts: &RunOptions,
) -> Result<Outcome> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.sim.seed = seed;
    }
    if let Some(w) = opts.workers {
        cfg.solver.workers = w;
    }
    if let Some(out) = &opts.out {
        cfg.output.dir = out.clone();
    }
    let resolved = cfg.resolve()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.solver.workers)
        .build()
        .map_err(|e| Error::config("solver.workers", e.to_string()))?;
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: hex::encode(Sha256::digest(config_bytes)),
        config_path: config_path.map(Path::to_path_buf),
        workers: pool.current_num_threads(),
        config: cfg.clone(),
        ..Manifest::default()
    };
    let mut run = Run {
        cfg,
        r: resolved,
        out: Outcome {
            dir,
            manifest,
            ..Outcome::default()
        },
    };
    pool.install(|| run.execute(opts.stage))?;
    Ok(run.out)
}

struct Run {
    cfg: RunConfig,
    r: Resolved,
    out: Outcome,
}

impl Run {
    fn execute(&mut self, last: Stage) -> Result<()> {
        let partition = Partition::grid(&self.r.spec, &self.r.cells)
            .map_err(|e| Error::config("partition", e.to_string()))?;
        let mut model = None;
        let mut umdp = None;
        for stage in Stage::ALL.into_iter().filter(|&s| s <= last) {
            let t0 = Instant::now();
            let res = match stage {
                Stage::GenData => self.gen_data(&partition),
                Stage::Fit => self.fit().map(|m| model = Some(m)),
                Stage::Abstract => self
                    .abstraction(model.as_ref().expect("fit ran"), &partition)
                    .map(|u| umdp = Some(u)),
                Stage::Synthesize => {
                    self.synthesize(umdp.as_ref().expect("abstract ran"), &partition)
                }
                Stage::Validate => self.validate(&partition),
                Stage::Report => self.report(),
            };
            let m = &mut self.out.manifest;
            m.timings_s
                .insert(stage.as_str().into(), t0.elapsed().as_secs_f64());
            if res.is_ok() {
                m.stages_completed.push(stage.as_str().into());
            }
            m.write(&self.out.dir)?;
            res.map_err(|e| Error::Stage {
                stage: stage.as_str(),
                source: Box::new(e),
            })?;
            log::info!("stage {stage} done in {:.2} s", t0.elapsed().as_secs_f64());
        }
        self.out.partition = Some(partition);
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.dir.join(name)
    }

    fn gen_data(&mut self, p: &Partition) -> Result<()> {
        let sim = &self.cfg.sim;
        let seed = sim.seed;
        let ds = match &sim.dataset {
            Some(file) => {
                let meta = DatasetMeta {
                    mode: SamplingMode::DistributionSampled {
                        distribution: format!("file:{}", file.display()),
                    },
                    seed,
                };
                let ds = Dataset::read_csv(file, &self.r.model.control_vectors(), meta)?;
                if ds.dim != p.dim() {
                    return Err(Error::config(
                        "sim.dataset",
                        "dimension differs from spec.domain",
                    ));
                }
                let outside = ds
                    .actions
                    .iter()
                    .flat_map(|a| a.inputs.iter().chain(a.successors.iter()))
                    .any(|x| !p.spec().domain.contains(x));
                if outside {
                    return Err(Error::config(
                        "sim.dataset",
                        "samples must lie in the domain",
                    ));
                }
                ds
            }
            None => {
                let mode = match sim.sampling {
                    Sampling::Uniform => DataMode::Uniform { n: sim.samples },
                    Sampling::Grid => DataMode::Grid {
                        prompts: p.centers(),
                        per_prompt: sim.samples,
                    },
                };
                sim::gen_dataset(&self.r.model, &mode, seed)?
            }
        };
        ds.write_csv(&self.path(DATASET))?;
        let simulated = sim.dataset.is_none();
        self.out.manifest.seeds.dataset = simulated.then_some(seed);
        self.out.manifest.dataset = Some(DatasetInfo {
            mode: ds.meta.mode.clone(),
            samples_per_action: ds.actions.first().map_or(0, |a| a.len()),
            source: sim.dataset.clone(),
            seed: simulated.then_some(seed),
        });
        self.out.dataset = Some(ds);
        Ok(())
    }

    fn fit(&mut self) -> Result<CmeModel> {
        let ds = self.out.dataset.as_ref().expect("gen-data ran");
        let model = CmeModel::fit(ds, self.r.kernel, self.r.lambda)?;
        let reports = (0..model.n_actions())
            .map(|a| model.vrkhs_norm_report(a))
            .collect::<Result<Vec<_>>>()?;
        self.out.manifest.fit = Some(FitInfo {
            lambda: self.r.lambda,
            vrkhs_norm: reports.iter().map(|r| r.value).collect(),
            norm_exact: reports.iter().map(|r| r.exact).collect(),
        });
        Ok(model)
    }

    fn abstraction(&mut self, model: &CmeModel, p: &Partition) -> Result<Umdp> {
        let b = &self.cfg.budget;
        let (eps1, provenance) = match b.eps1_source {
            Eps1Source::User => (b.eps1.expect("checked by resolve"), Eps1Provenance::User),
            Eps1Source::Theorem => {
                let lipschitz = b
                    .lipschitz
                    .unwrap_or_else(|| self.r.model.dynamics.lipschitz(&self.r.model.controls));
                let eta = b.eta.unwrap_or_else(|| p.max_radius());
                let (n, m) = (self.cfg.sim.samples, p.n_cells());
                let eps1 = errbounds::eps1_explicit(&self.r.kernel, lipschitz, eta, n, m, b.delta)?;
                (
                    eps1,
                    Eps1Provenance::Theorem {
                        lipschitz,
                        eta,
                        n,
                        m,
                        delta: b.delta,
                    },
                )
            }
        };
        let budget = ErrorBudget::compute(
            model,
            p,
            eps1,
            provenance,
            b.mode,
            b.eps2_tol,
            b.eps2_budget,
        )?;
        p.write_csv(&self.path(PARTITION))?;
        budget.write_csv(p, &self.path(BUDGET))?;
        let exhausted = budget
            .eps2
            .iter()
            .map(|row| {
                row.iter()
                    .zip(p.cells())
                    .filter(|(e, c)| c.label != Label::Avoid && !e.certified)
                    .count()
            })
            .sum();
        self.out.manifest.budget = Some(BudgetInfo {
            mode: budget.mode,
            eps1: budget.eps1,
            eps1_provenance: budget.eps1_provenance.clone(),
            eps2_max: budget.max_eps2(),
            eps2_budget_exhausted: exhausted,
            eps3: budget.eps3,
            eps3_rule:
                "sqrt(k(c,c) + k(y,y) - 2 k(c,y)) at the farthest corner of the largest region"
                    .into(),
            avoid_representation:
                "every avoid cell keeps its own center as an atom; their values are tied to the \
                                   absorbing avoid state"
                    .into(),
        });
        let u = Umdp::build(model, p, &budget)?;
        u.write_container(&self.path(UMDP))?;
        self.out.budget = Some(budget);
        Ok(u)
    }

    fn synthesize(&mut self, u: &Umdp, p: &Partition) -> Result<()> {
        let (bounds, policy) = rdp::synthesize(u, self.r.horizon, &self.r.rdp)?;
        rdp::write_results_csv(&self.path(RESULTS), p, &bounds, &policy)?;
        if !policy.is_stationary() {
            rdp::write_policy_csv(&self.path(POLICY), p, &policy)?;
        }
        self.out.manifest.synthesis = Some(SynthesisInfo {
            horizon: self.r.horizon,
            states: u.n_states(),
            actions: u.n_actions(),
            sweeps_lower: bounds.sweeps_lower,
            residual_lower: bounds.residual_lower,
            sweeps_upper: bounds.sweeps_upper,
            residual_upper: bounds.residual_upper,
            tie_breaks: policy.tie_breaks.clone(),
        });
        self.out.bounds = Some(bounds);
        self.out.policy = Some(policy);
        Ok(())
    }

    fn validate(&mut self, p: &Partition) -> Result<()> {
        let policy = self.out.policy.as_ref().expect("synthesize ran");
        let bounds = self.out.bounds.as_ref().expect("synthesize ran");
        let seed = self.cfg.sim.seed;
        let runs = self.cfg.sim.runs_per_state;
        let sp = rdp::refine(policy, p);
        let est = sim::monte_carlo(&self.r.model, &sp, self.r.horizon, runs, seed)?;
        sim::write_validation_csv(&self.path(VALIDATION), &est)?;
        let (below, above) = sim::bracket_violations(p, &est, &bounds.p_lower, &bounds.p_upper);
        self.out.manifest.seeds.monte_carlo = Some(seed);
        self.out.manifest.validation = Some(ValidationInfo {
            runs_per_state: runs,
            seed,
            step_cap: (self.r.horizon == Horizon::Unbounded)
                .then(|| sim::CAP_PER_STATE * p.n_states()),
            below_lower: below.clone(),
            above_upper: above,
        });
        self.out.estimates = Some(est);
        if below.is_empty() {
            Ok(())
        } else {
            Err(Error::Bracket { count: below.len() })
        }
    }

    fn report(&mut self) -> Result<()> {
        let title = match self.cfg.task.kind {
            TaskKind::Safety => format!("safety, {} steps", self.cfg.task.horizon),
            TaskKind::ReachAvoid => "reach-avoid".to_string(),
        };
        let eps1 = self.out.manifest.budget.as_ref().map(|b| b.eps1);
        let summary = report::render(&self.out.dir, eps1, self.out.manifest.times_min(), &title)?;
        self.out.manifest.summary = Some(summary);
        Ok(())
    }
}

/// Re-renders the report of a completed run directory.
pub fn report_dir(dir: &Path) -> Result<Summary> {
    let manifest = Manifest::read(dir).map_err(|e| match e {
        Error::Io { .. } => Error::StageOrder(format!(
            "{} has no {MANIFEST}; run the pipeline first",
            dir.display()
        )),
        e => e,
    })?;
    let done = |s: Stage| manifest.stages_completed.iter().any(|x| x == s.as_str());
    if !done(Stage::Synthesize) {
        return Err(Error::StageOrder(
            "the synthesize stage has not completed".into(),
        ));
    }
    if !done(Stage::Validate) {
        return Err(Error::StageOrder(
            "the validate stage has not completed".into(),
        ));
    }
    let title = match manifest.config.task.kind {
        TaskKind::Safety => format!("safety, {} steps", manifest.config.task.horizon),
        TaskKind::ReachAvoid => "reach-avoid".to_string(),
    };
    report::render(
        dir,
        manifest.budget.as_ref().map(|b| b.eps1),
        manifest.times_min(),
        &title,
    )
}
