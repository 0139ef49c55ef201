//! Finite uncertain MDP built from a fitted embedding and a partition.
//!
//! States are the grid cells plus one aggregated avoid state. For a non-avoid
//! cell `s` and action `a` the ambiguity set is
//!
//! ```text
//! Gamma_{s,a} = { g in simplex : | sum_j g_j k(., c_j) - mu_a(c_s) | <= eps(s, a) }
//! ```
//!
//! over the `M` cell centers, which expands to the quadratic constraint
//! `g^T K1 g - 2 h^T g + c <= eps^2` with `h = K2 beta(c_s)` and
//! `c = beta(c_s)^T K3 beta(c_s)`. The avoid state is absorbing.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, OnceLock};

use faer::Mat;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cme::CmeModel;
use crate::errbounds::ErrorBudget;
use crate::error::{Error, Result};
use crate::kernel::{self, FiniteMeasure, KernelParams, Points};
use crate::linalg;
use crate::partition::{Label, Partition};
use crate::qclp;

/// Simplex membership tolerance of [`AmbiguityData::member`].
pub const SIMPLEX_TOL: f64 = 1e-9;

const MAGIC: &[u8; 8] = b"CMEUMDP\0";
const CONTAINER_VERSION: u32 = 1;

/// The quadratic constraint describing one ambiguity set.
#[derive(Clone, Debug)]
pub struct AmbiguityData {
    k1: Arc<Mat<f64>>,
    h: Vec<f64>,
    const_term: f64,
    eps: f64,
    /// Independent of `eps`, so kept across [`AmbiguityData::with_eps`].
    min_q: OnceLock<qclp::MinQuadratic>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Membership {
    pub member: bool,
    /// `eps^2 - q(gamma)`.
    pub slack: f64,
}

impl AmbiguityData {
    pub fn from_parts(k1: Arc<Mat<f64>>, h: Vec<f64>, const_term: f64, eps: f64) -> Result<Self> {
        if k1.nrows() != k1.ncols() || k1.nrows() != h.len() || h.is_empty() {
            return Err(Error::Input(format!(
                "K1 is {}x{} but h has length {}",
                k1.nrows(),
                k1.ncols(),
                h.len()
            )));
        }
        if !(eps >= 0.0 && eps.is_finite()) {
            return Err(Error::Input(format!(
                "eps must be finite and >= 0, got {eps}"
            )));
        }
        Ok(Self {
            k1,
            h,
            const_term,
            eps,
            min_q: OnceLock::new(),
        })
    }

    /// Ball of radius `eps` around the embedding of `target`, with atoms at `centers`.
    pub fn from_measure(
        k: &KernelParams,
        k1: Arc<Mat<f64>>,
        centers: &Points,
        target: &FiniteMeasure,
        eps: f64,
    ) -> Result<Self> {
        if centers.dim() != target.dim() {
            return Err(Error::Input(
                "centers and target differ in dimension".into(),
            ));
        }
        let h = centers.iter().map(|c| target.embedding_at(k, c)).collect();
        Self::from_parts(k1, h, kernel::inner(k, target, target), eps)
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self {
            eps,
            ..self.clone()
        }
    }

    /// Minimum of the quadratic over the simplex, computed once.
    pub fn min_quadratic(&self) -> &qclp::MinQuadratic {
        self.min_q.get_or_init(|| qclp::min_quadratic(self))
    }

    pub fn k1(&self) -> &Mat<f64> {
        &self.k1
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn const_term(&self) -> f64 {
        self.const_term
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn n_atoms(&self) -> usize {
        self.h.len()
    }

    /// `q(g) = g^T K1 g - 2 h^T g + c`, the squared MMD to the ball center.
    pub fn quadratic(&self, g: &[f64]) -> f64 {
        linalg::quad_form(Mat::as_ref(&self.k1), g) - 2.0 * linalg::dot(&self.h, g)
            + self.const_term
    }

    pub fn grad_q(&self, g: &[f64]) -> Vec<f64> {
        linalg::matvec(Mat::as_ref(&self.k1), g)
            .iter()
            .zip(&self.h)
            .map(|(a, b)| 2.0 * (a - b))
            .collect()
    }

    pub fn member(&self, g: &[f64]) -> Result<Membership> {
        if g.len() != self.n_atoms() {
            return Err(Error::Input(format!(
                "distribution has {} entries, expected {}",
                g.len(),
                self.n_atoms()
            )));
        }
        let sum: f64 = g.iter().sum();
        if g.iter().any(|&x| x < -SIMPLEX_TOL || !x.is_finite()) || (sum - 1.0).abs() > SIMPLEX_TOL
        {
            return Err(Error::Input("distribution is not on the simplex".into()));
        }
        let slack = self.eps * self.eps - self.quadratic(g);
        Ok(Membership {
            member: slack >= 0.0,
            slack,
        })
    }
}

/// Per-action blocks kept for serialization.
#[derive(Clone, Debug)]
struct ActionBlocks {
    control: Vec<f64>,
    successors: Points,
    /// `M x N`, `K2[s][j] = k(c_s, x+_j)`.
    k2: Mat<f64>,
    /// `M x N`, row `s` is `beta(c_s)`.
    beta: Mat<f64>,
    /// `beta(c_s)^T K3 beta(c_s)` per cell.
    const_terms: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Umdp {
    kernel: KernelParams,
    labels: Vec<Label>,
    centers: Points,
    k1: Arc<Mat<f64>>,
    controls: Vec<Vec<f64>>,
    /// Empty for models built by [`Umdp::from_sets`].
    blocks: Vec<ActionBlocks>,
    /// `[cell][action]`; `None` on avoid cells.
    sets: Vec<Vec<Option<AmbiguityData>>>,
}

pub fn build(model: &CmeModel, p: &Partition, budget: &ErrorBudget) -> Result<Umdp> {
    Umdp::build(model, p, budget)
}

impl Umdp {
    pub fn build(model: &CmeModel, p: &Partition, budget: &ErrorBudget) -> Result<Self> {
        if model.dim() != p.dim() {
            return Err(Error::Input(
                "model and partition differ in dimension".into(),
            ));
        }
        if budget.eps2.len() != model.n_actions()
            || budget.eps2.iter().any(|r| r.len() != p.n_cells())
        {
            return Err(Error::Input(
                "error budget does not match the model and partition".into(),
            ));
        }
        let k = *model.kernel();
        let centers = p.centers();
        let k1 = Arc::new(kernel::symmetric_gram(&k, &centers));
        let blocks = (0..model.n_actions())
            .into_par_iter()
            .map(|a| action_blocks(model, a, &centers))
            .collect::<Result<Vec<_>>>()?;
        let eps: Vec<Vec<f64>> = (0..p.n_cells())
            .map(|s| (0..model.n_actions()).map(|a| budget.total(s, a)).collect())
            .collect();
        let labels = (0..p.n_states()).map(|s| p.label(s)).collect();
        Self::assemble(k, labels, centers, k1, blocks, &eps)
    }

    fn assemble(
        kernel: KernelParams,
        labels: Vec<Label>,
        centers: Points,
        k1: Arc<Mat<f64>>,
        blocks: Vec<ActionBlocks>,
        eps: &[Vec<f64>],
    ) -> Result<Self> {
        let m = centers.len();
        let h: Vec<Mat<f64>> = blocks.iter().map(|b| &b.k2 * b.beta.transpose()).collect();
        let mut sets = Vec::with_capacity(m);
        for s in 0..m {
            let mut row = Vec::with_capacity(blocks.len());
            for (a, b) in blocks.iter().enumerate() {
                if labels[s] == Label::Avoid {
                    row.push(None);
                } else {
                    let hs = linalg::column(h[a].as_ref(), s);
                    row.push(Some(AmbiguityData::from_parts(
                        k1.clone(),
                        hs,
                        b.const_terms[s],
                        eps[s][a],
                    )?));
                }
            }
            sets.push(row);
        }
        let u = Self {
            kernel,
            labels,
            centers,
            k1,
            controls: blocks.iter().map(|b| b.control.clone()).collect(),
            blocks,
            sets,
        };
        u.check_feasible()?;
        Ok(u)
    }

    /// Builds a model directly from ambiguity data over `centers`.
    /// `cell_labels` has one entry per cell and `sets[cell][action]` must be
    /// `None` exactly on avoid cells. Such models cannot be serialized.
    pub fn from_sets(
        kernel: KernelParams,
        cell_labels: Vec<Label>,
        centers: Points,
        controls: Vec<Vec<f64>>,
        sets: Vec<Vec<Option<AmbiguityData>>>,
    ) -> Result<Self> {
        let m = centers.len();
        if cell_labels.len() != m || sets.len() != m || controls.is_empty() {
            return Err(Error::Input(
                "labels, sets and centers must agree in length".into(),
            ));
        }
        for (s, row) in sets.iter().enumerate() {
            if row.len() != controls.len() {
                return Err(Error::Input(format!(
                    "cell {s}: expected {} actions",
                    controls.len()
                )));
            }
            for d in row {
                if d.is_some() == (cell_labels[s] == Label::Avoid) {
                    return Err(Error::Input(format!(
                        "cell {s}: ambiguity data must be absent exactly on avoid cells"
                    )));
                }
                if d.as_ref().is_some_and(|d| d.n_atoms() != m) {
                    return Err(Error::Input(format!(
                        "cell {s}: ambiguity data has the wrong atom count"
                    )));
                }
            }
        }
        let mut labels = cell_labels;
        labels.push(Label::Avoid);
        let k1 = Arc::new(kernel::symmetric_gram(&kernel, &centers));
        let u = Self {
            kernel,
            labels,
            centers,
            k1,
            controls,
            blocks: Vec::new(),
            sets,
        };
        u.check_feasible()?;
        Ok(u)
    }

    /// Every non-avoid ambiguity set must contain a distribution.
    fn check_feasible(&self) -> Result<()> {
        let pairs: Vec<(usize, usize)> = (0..self.n_cells())
            .flat_map(|s| (0..self.n_actions()).map(move |a| (s, a)))
            .filter(|&(s, a)| self.sets[s][a].is_some())
            .collect();
        let mins: Vec<f64> = pairs
            .par_iter()
            .map(|&(s, a)| {
                self.sets[s][a]
                    .as_ref()
                    .expect("filtered")
                    .min_quadratic()
                    .lower
            })
            .collect();
        for (&(s, a), &min_sq) in pairs.iter().zip(&mins) {
            let eps = self.sets[s][a].as_ref().expect("filtered").eps();
            if min_sq > eps * eps {
                return Err(Error::InfeasibleAbstraction {
                    state: s,
                    action: a,
                    min_sq,
                    eps_sq: eps * eps,
                });
            }
        }
        Ok(())
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    /// Number of grid cells, which are also the atoms of every ambiguity set.
    pub fn n_cells(&self) -> usize {
        self.centers.len()
    }

    /// Cells plus the aggregated avoid state.
    pub fn n_states(&self) -> usize {
        self.labels.len()
    }

    pub fn n_actions(&self) -> usize {
        self.sets.first().map_or(0, Vec::len)
    }

    pub fn avoid_state(&self) -> usize {
        self.n_cells()
    }

    pub fn label(&self, state: usize) -> Label {
        self.labels[state]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn centers(&self) -> &Points {
        &self.centers
    }

    pub fn control(&self, a: usize) -> &[f64] {
        &self.controls[a]
    }

    pub fn k1(&self) -> &Arc<Mat<f64>> {
        &self.k1
    }

    /// Ambiguity data of `(state, action)`; `None` for avoid states.
    pub fn ambiguity(&self, state: usize, action: usize) -> Option<&AmbiguityData> {
        self.sets.get(state)?.get(action)?.as_ref()
    }

    /// Membership of a distribution over cells. For avoid states only the
    /// distributions that stay in avoid cells (that is, `delta_{s_avoid}` at the
    /// state level) are accepted.
    pub fn member(&self, state: usize, action: usize, g: &[f64]) -> Result<Membership> {
        if action >= self.n_actions() || state >= self.n_states() {
            return Err(Error::Input(format!(
                "unknown state/action ({state}, {action})"
            )));
        }
        match self.ambiguity(state, action) {
            Some(d) => d.member(g),
            None => {
                if g.len() != self.n_cells() {
                    return Err(Error::Input("distribution length mismatch".into()));
                }
                let outside: f64 = g
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| self.labels[i] != Label::Avoid)
                    .map(|(_, x)| x.abs())
                    .sum();
                let ok = outside <= SIMPLEX_TOL;
                Ok(Membership {
                    member: ok,
                    slack: if ok { 0.0 } else { -outside },
                })
            }
        }
    }

    /// Writes the binary container and its JSON sidecar `<path>.json`.
    pub fn write_container(&self, path: &Path) -> Result<()> {
        if self.blocks.len() != self.n_actions() {
            return Err(Error::Container(
                "model was built from raw sets and has no blocks to store".into(),
            ));
        }
        let mut w = ContainerWriter::default();
        let m = self.n_cells();
        let dim = self.centers.dim();
        w.raw("header", |b| {
            b.extend_from_slice(MAGIC);
            b.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
            for x in [m as u64, self.n_actions() as u64, dim as u64] {
                b.extend_from_slice(&x.to_le_bytes());
            }
            for blk in &self.blocks {
                b.extend_from_slice(&(blk.successors.len() as u64).to_le_bytes());
                b.extend_from_slice(&(blk.control.len() as u64).to_le_bytes());
            }
        });
        w.floats("kernel", 1, 2, &[self.kernel.sigma_f, self.kernel.sigma_l]);
        w.raw("labels", |b| {
            b.extend(self.labels.iter().map(|l| label_code(*l)))
        });
        w.floats("centers", m, dim, self.centers.as_flat());
        w.matrix("k1", &self.k1);
        for (a, blk) in self.blocks.iter().enumerate() {
            w.floats(&format!("control[{a}]"), 1, blk.control.len(), &blk.control);
            w.floats(
                &format!("successors[{a}]"),
                blk.successors.len(),
                dim,
                blk.successors.as_flat(),
            );
            w.matrix(&format!("k2[{a}]"), &blk.k2);
            w.matrix(&format!("beta[{a}]"), &blk.beta);
            w.floats(&format!("const[{a}]"), 1, m, &blk.const_terms);
        }
        let eps: Vec<f64> = (0..m)
            .flat_map(|s| {
                (0..self.n_actions())
                    .map(move |a| self.ambiguity(s, a).map_or(f64::NAN, |d| d.eps()))
            })
            .collect();
        w.floats("eps", m, self.n_actions(), &eps);
        w.finish(path)
    }

    /// Reads a container written by [`Umdp::write_container`], verifying the
    /// sidecar checksums when the sidecar is present.
    pub fn read_container(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            let manifest: Sidecar = serde_json::from_str(&text)?;
            if manifest.file_sha256 != hex::encode(Sha256::digest(&bytes)) {
                return Err(Error::Container("checksum mismatch against sidecar".into()));
            }
        }
        let mut r = ContainerReader {
            bytes: &bytes,
            pos: 0,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::Container("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CONTAINER_VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }
        let m = r.u64()? as usize;
        let n_actions = r.u64()? as usize;
        let dim = r.u64()? as usize;
        let mut sizes = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            sizes.push((r.u64()? as usize, r.u64()? as usize));
        }
        let kp = r.floats(2)?;
        let kernel = KernelParams::new(kp[0], kp[1])?;
        let labels = r
            .take(m + 1)?
            .iter()
            .map(|&c| label_from_code(c))
            .collect::<Result<Vec<_>>>()?;
        let centers = Points::from_flat(dim, r.floats(m * dim)?)?;
        let k1 = Arc::new(r.matrix(m, m)?);
        let mut blocks = Vec::with_capacity(n_actions);
        for &(n, clen) in &sizes {
            let control = r.floats(clen)?;
            let successors = Points::from_flat(dim, r.floats(n * dim)?)?;
            let k2 = r.matrix(m, n)?;
            let beta = r.matrix(m, n)?;
            let const_terms = r.floats(m)?;
            blocks.push(ActionBlocks {
                control,
                successors,
                k2,
                beta,
                const_terms,
            });
        }
        let flat = r.floats(m * n_actions)?;
        if r.pos != bytes.len() {
            return Err(Error::Container("trailing bytes".into()));
        }
        let eps: Vec<Vec<f64>> = flat.chunks(n_actions).map(|c| c.to_vec()).collect();
        Self::assemble(kernel, labels, centers, k1, blocks, &eps)
    }
}

fn action_blocks(model: &CmeModel, a: usize, centers: &Points) -> Result<ActionBlocks> {
    let k = model.kernel();
    let am = model.action(a)?;
    let succ = am.successors();
    let k2 = kernel::gram(k, centers, succ)?.entries;
    let b = model.beta_batch(a, centers)?;
    // K3 B without forming K3
    let k3b = kernel::gram_times(k, succ, b.as_ref());
    let const_terms = (0..centers.len())
        .map(|s| {
            let mut acc = 0.0;
            for i in 0..b.nrows() {
                acc += b[(i, s)] * k3b[(i, s)];
            }
            acc
        })
        .collect();
    Ok(ActionBlocks {
        control: am.control().to_vec(),
        successors: succ.clone(),
        k2,
        beta: b.transpose().to_owned(),
        const_terms,
    })
}

fn label_code(l: Label) -> u8 {
    match l {
        Label::Reach => 0,
        Label::Safe => 1,
        Label::Avoid => 2,
    }
}

fn label_from_code(c: u8) -> Result<Label> {
    match c {
        0 => Ok(Label::Reach),
        1 => Ok(Label::Safe),
        2 => Ok(Label::Avoid),
        _ => Err(Error::Container(format!("bad label code {c}"))),
    }
}

pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    offset: usize,
    bytes: usize,
    rows: usize,
    cols: usize,
    dtype: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format: String,
    version: u32,
    byte_order: String,
    layout: String,
    blocks: Vec<BlockEntry>,
    file_sha256: String,
}

#[derive(Default)]
struct ContainerWriter {
    buf: Vec<u8>,
    blocks: Vec<BlockEntry>,
}

impl ContainerWriter {
    fn push(&mut self, name: &str, rows: usize, cols: usize, dtype: &str, start: usize) {
        let bytes = &self.buf[start..];
        self.blocks.push(BlockEntry {
            name: name.to_string(),
            offset: start,
            bytes: bytes.len(),
            rows,
            cols,
            dtype: dtype.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
    }

    fn raw(&mut self, name: &str, f: impl FnOnce(&mut Vec<u8>)) {
        let start = self.buf.len();
        f(&mut self.buf);
        let n = self.buf.len() - start;
        self.push(name, 1, n, "u8", start);
    }

    fn floats(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) {
        debug_assert_eq!(rows * cols, data.len());
        let start = self.buf.len();
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self.push(name, rows, cols, "f64le", start);
    }

    /// Row-major.
    fn matrix(&mut self, name: &str, m: &Mat<f64>) {
        let start = self.buf.len();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.buf.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        self.push(name, m.nrows(), m.ncols(), "f64le", start);
    }

    fn finish(self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.buf).map_err(io)?;
        let side = Sidecar {
            format: "cme-umdp".into(),
            version: CONTAINER_VERSION,
            byte_order: "little-endian".into(),
            layout: "row-major".into(),
            blocks: self.blocks,
            file_sha256: hex::encode(Sha256::digest(&self.buf)),
        };
        let sp = sidecar_path(path);
        let text = serde_json::to_string_pretty(&side)?;
        std::fs::write(&sp, text + "\n").map_err(|e| Error::io(&sp, e))
    }
}

struct ContainerReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ContainerReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Container("truncated container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Container("size overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Mat<f64>> {
        let v = self.floats(rows * cols)?;
        Ok(Mat::from_fn(rows, cols, |i, j| v[i * cols + j]))
    }
}
