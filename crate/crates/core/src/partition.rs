//! Uniform grid partitions of the compact domain with conservative labels.
//!
//! Every grid cell is kept as its own geometric region (id `0..M`, row-major,
//! dimension 0 most significant). Cells that are not contained in `X_safe` are
//! labeled avoid and collapse onto one aggregated absorbing state with id `M`.

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Points;

/// Boundaries closer than this to a grid edge count as aligned with it.
pub const SNAP_TOL: f64 = 1e-9;

/// Closed axis-aligned box `[lo_0, hi_0] x ... x [lo_{n-1}, hi_{n-1}]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Rect {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Input(format!(
                "box bounds have dimensions {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        for (a, b) in lo.iter().zip(&hi) {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return Err(Error::Input(format!("invalid box side [{a}, {b}]")));
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| a <= v && v <= b)
    }

    /// `self ⊆ other`, with boundaries within `tol` treated as equal.
    pub fn within(&self, other: &Rect, tol: f64) -> bool {
        self.dim() == other.dim()
            && (0..self.dim())
                .all(|d| self.lo[d] >= other.lo[d] - tol && self.hi[d] <= other.hi[d] + tol)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// Largest distance from the center to a point of the box.
    pub fn radius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.25 * (b - a) * (b - a))
            .sum::<f64>()
            .sqrt()
    }

    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|d| {
                        if mask >> d & 1 == 1 {
                            self.hi[d]
                        } else {
                            self.lo[d]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Reach-avoid specification: stay in `safe` until `reach` is hit. The avoid
/// set is the complement of `safe`. A `None` reach set is the pure safety task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spec {
    pub domain: Rect,
    pub safe: Rect,
    pub reach: Option<Rect>,
}

impl Spec {
    pub fn new(domain: Rect, safe: Rect, reach: Option<Rect>) -> Result<Self> {
        if safe.dim() != domain.dim() {
            return Err(Error::Input(
                "safe set and domain differ in dimension".into(),
            ));
        }
        if !safe.within(&domain, 0.0) {
            return Err(Error::Input("safe set must lie inside the domain".into()));
        }
        if let Some(r) = &reach {
            if !r.within(&safe, 0.0) {
                return Err(Error::Input(
                    "reach set must lie inside the safe set".into(),
                ));
            }
        }
        Ok(Self {
            domain,
            safe,
            reach,
        })
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn is_reach(&self, x: &[f64]) -> bool {
        self.reach.as_ref().is_some_and(|r| r.contains(x))
    }

    pub fn is_avoid(&self, x: &[f64]) -> bool {
        !self.safe.contains(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Reach,
    Safe,
    Avoid,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Reach => "reach",
            Label::Safe => "safe",
            Label::Avoid => "avoid",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub bounds: Rect,
    pub center: Vec<f64>,
    pub radius: f64,
    pub label: Label,
}

#[derive(Clone, Debug)]
pub struct Partition {
    spec: Spec,
    cells_per_dim: Vec<usize>,
    /// Grid edges per dimension, `cells_per_dim[d] + 1` each.
    edges: Vec<Vec<f64>>,
    cells: Vec<Cell>,
}

pub fn build_grid(spec: &Spec, cells_per_dim: &[usize]) -> Result<Partition> {
    Partition::grid(spec, cells_per_dim)
}

impl Partition {
    pub fn grid(spec: &Spec, cells_per_dim: &[usize]) -> Result<Self> {
        let n = spec.dim();
        if cells_per_dim.len() != n {
            return Err(Error::Input(format!(
                "{} cell counts for a {n}-dimensional domain",
                cells_per_dim.len()
            )));
        }
        if cells_per_dim.contains(&0) {
            return Err(Error::Input("cells per dimension must be >= 1".into()));
        }
        let edges: Vec<Vec<f64>> = (0..n)
            .map(|d| {
                let (lo, hi, k) = (spec.domain.lo[d], spec.domain.hi[d], cells_per_dim[d]);
                let w = (hi - lo) / k as f64;
                (0..=k)
                    .map(|i| if i == k { hi } else { lo + i as f64 * w })
                    .collect()
            })
            .collect();
        let total: usize = cells_per_dim.iter().product();
        let mut cells = Vec::with_capacity(total);
        let mut idx = vec![0usize; n];
        for _ in 0..total {
            let lo: Vec<f64> = (0..n).map(|d| edges[d][idx[d]]).collect();
            let hi: Vec<f64> = (0..n).map(|d| edges[d][idx[d] + 1]).collect();
            let bounds = Rect { lo, hi };
            let label = if !bounds.within(&spec.safe, SNAP_TOL) {
                Label::Avoid
            } else if spec
                .reach
                .as_ref()
                .is_some_and(|r| bounds.within(r, SNAP_TOL))
            {
                Label::Reach
            } else {
                Label::Safe
            };
            cells.push(Cell {
                center: bounds.center(),
                radius: bounds.radius(),
                bounds,
                label,
            });
            // odometer, last dimension fastest
            for d in (0..n).rev() {
                idx[d] += 1;
                if idx[d] < cells_per_dim[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            spec: spec.clone(),
            cells_per_dim: cells_per_dim.to_vec(),
            edges,
            cells,
        })
    }

    pub fn spec(&self) -> &Spec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn cells_per_dim(&self) -> &[usize] {
        &self.cells_per_dim
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, i: usize) -> &Cell {
        &self.cells[i]
    }

    /// Number of grid cells `M`; these are also the atoms of every ambiguity set.
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// `M + 1`: one entry per cell plus the aggregated avoid state.
    pub fn n_states(&self) -> usize {
        self.cells.len() + 1
    }

    pub fn avoid_state(&self) -> usize {
        self.cells.len()
    }

    pub fn label(&self, state: usize) -> Label {
        if state == self.avoid_state() {
            Label::Avoid
        } else {
            self.cells[state].label
        }
    }

    /// State id carrying the dynamics of `cell`.
    pub fn state_of_cell(&self, cell: usize) -> usize {
        if self.cells[cell].label == Label::Avoid {
            self.avoid_state()
        } else {
            cell
        }
    }

    pub fn centers(&self) -> Points {
        let mut p = Points::with_capacity(self.dim(), self.n_cells());
        for c in &self.cells {
            p.push(&c.center).expect("cell dimension");
        }
        p
    }

    pub fn max_radius(&self) -> f64 {
        self.cells.iter().map(|c| c.radius).fold(0.0, f64::max)
    }

    /// Ids of the cells labeled `label`.
    pub fn cells_labeled(&self, label: Label) -> Vec<usize> {
        (0..self.n_cells())
            .filter(|&i| self.cells[i].label == label)
            .collect()
    }

    /// Grid cell containing `x`; points on a shared face go to the smaller index.
    pub fn locate_cell(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.dim() || !self.spec.domain.contains(x) {
            return Err(Error::Domain { point: x.to_vec() });
        }
        let mut id = 0;
        for (d, &v) in x.iter().enumerate() {
            let inner = &self.edges[d][1..self.cells_per_dim[d]];
            let k = inner.partition_point(|&e| e < v);
            id = id * self.cells_per_dim[d] + k;
        }
        Ok(id)
    }

    /// State containing `x`: its cell, or the avoid state.
    pub fn locate(&self, x: &[f64]) -> Result<usize> {
        Ok(self.state_of_cell(self.locate_cell(x)?))
    }

    /// Writes `region_id,label,lo_..,hi_..,center_..`, one row per cell.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let n = self.dim();
        let mut header = String::from("region_id,label");
        for prefix in ["lo", "hi", "center"] {
            for d in 0..n {
                header.push_str(&format!(",{prefix}_{d}"));
            }
        }
        writeln!(w, "{header}").map_err(io)?;
        for (i, c) in self.cells.iter().enumerate() {
            let mut line = format!("{i},{}", c.label.as_str());
            for v in c.bounds.lo.iter().chain(&c.bounds.hi).chain(&c.center) {
                line.push_str(&format!(",{v:?}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}
