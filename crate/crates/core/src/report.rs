//! Summary table and static SVG plots built from the artifacts of a run.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::Label;
use crate::sim::{read_validation_csv, RegionEstimate};

/// One cell row of the results CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub region_id: usize,
    pub center: Vec<f64>,
    pub label: Label,
    pub action: Option<usize>,
    pub p_lower: f64,
    pub p_upper: f64,
}

/// One row of the partition CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionRow {
    pub region_id: usize,
    pub label: Label,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

/// Aggregates over the non-avoid regions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub regions: usize,
    pub safe_regions: usize,
    pub eps1: Option<f64>,
    /// `1 - p_lower_avg`.
    pub e_avg: Option<f64>,
    pub p_lower_avg: Option<f64>,
    pub p_upper_avg: Option<f64>,
    pub p_hat_avg: Option<f64>,
    pub abstraction_time_min: Option<f64>,
    pub synthesis_time_min: Option<f64>,
    /// No region satisfies the specification's safe labeling.
    pub degenerate: bool,
}

fn parse_label(s: &str) -> Result<Label> {
    match s {
        "reach" => Ok(Label::Reach),
        "safe" => Ok(Label::Safe),
        "avoid" => Ok(Label::Avoid),
        _ => Err(Error::Input(format!("unknown label `{s}`"))),
    }
}

fn num<T: std::str::FromStr>(path: &Path, field: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("{}: bad number `{field}`", path.display())))
}

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.exists() {
        return Err(Error::StageOrder(format!(
            "{} is missing; run the stages that produce it first",
            path.display()
        )));
    }
    Ok(csv::Reader::from_path(path)?)
}

/// Reads the cell rows of a results CSV (the aggregated avoid row is skipped).
pub fn read_results_csv(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = open(path)?;
    let dim = rdr
        .headers()?
        .iter()
        .filter(|h| h.starts_with("center_"))
        .count();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.get(1).is_none_or(|c| c.is_empty()) {
            continue;
        }
        let center = (0..dim)
            .map(|d| num(path, &rec[1 + d]))
            .collect::<Result<Vec<f64>>>()?;
        let action = match &rec[2 + dim] {
            "" => None,
            a => Some(num(path, a)?),
        };
        rows.push(ResultRow {
            region_id: num(path, &rec[0])?,
            center,
            label: parse_label(&rec[1 + dim])?,
            action,
            p_lower: num(path, &rec[3 + dim])?,
            p_upper: num(path, &rec[4 + dim])?,
        });
    }
    Ok(rows)
}

pub fn read_partition_csv(path: &Path) -> Result<Vec<RegionRow>> {
    let mut rdr = open(path)?;
    let dim = rdr
        .headers()?
        .iter()
        .filter(|h| h.starts_with("lo_"))
        .count();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let vals = |off: usize| {
            (0..dim)
                .map(|d| num(path, &rec[off + d]))
                .collect::<Result<Vec<f64>>>()
        };
        rows.push(RegionRow {
            region_id: num(path, &rec[0])?,
            label: parse_label(&rec[1])?,
            lo: vals(2)?,
            hi: vals(2 + dim)?,
        });
    }
    Ok(rows)
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn summarize(
    results: &[ResultRow],
    estimates: Option<&[RegionEstimate]>,
    eps1: Option<f64>,
) -> Summary {
    let live: Vec<&ResultRow> = results.iter().filter(|r| r.label != Label::Avoid).collect();
    let p_lower_avg = mean(live.iter().map(|r| r.p_lower.clamp(0.0, 1.0)));
    let p_hat_avg = estimates.and_then(|est| {
        mean(live.iter().filter_map(|r| {
            est.iter()
                .find(|e| e.region_id == r.region_id)
                .map(|e| e.p_hat)
        }))
    });
    Summary {
        regions: results.len(),
        safe_regions: live.len(),
        eps1,
        e_avg: p_lower_avg.map(|p| 1.0 - p),
        p_lower_avg,
        p_upper_avg: mean(live.iter().map(|r| r.p_upper.clamp(0.0, 1.0))),
        p_hat_avg,
        abstraction_time_min: None,
        synthesis_time_min: None,
        degenerate: live.is_empty(),
    }
}

pub fn write_summary_csv(path: &Path, s: &Summary) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
    let text = format!(
        "regions,safe_regions,eps1,e_avg,p_lower_avg,p_upper_avg,p_hat_avg,abstraction_time_min,synthesis_time_min,degenerate\n\
         {},{},{},{},{},{},{},{},{},{}\n",
        s.regions,
        s.safe_regions,
        opt(s.eps1),
        opt(s.e_avg),
        opt(s.p_lower_avg),
        opt(s.p_upper_avg),
        opt(s.p_hat_avg),
        opt(s.abstraction_time_min),
        opt(s.synthesis_time_min),
        s.degenerate
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

const W: f64 = 760.0;
const H: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Step plot of `p_lower`, `p_upper` (shaded band) and `p_hat` (dots with
/// 99% intervals) against the state, for 1-D partitions.
pub fn plot_1d(
    regions: &[RegionRow],
    results: &[ResultRow],
    estimates: &[RegionEstimate],
    title: &str,
) -> String {
    let x0 = regions
        .iter()
        .map(|r| r.lo[0])
        .fold(f64::INFINITY, f64::min);
    let x1 = regions
        .iter()
        .map(|r| r.hi[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * pw;
    let sy = |p: f64| TOP + (1.0 - p.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{title}</text>"#,
        LEFT + pw / 2.0
    );
    for r in regions.iter().filter(|r| r.label == Label::Avoid) {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{TOP}" width="{:.2}" height="{ph}" fill="#eeeeee"/>"##,
            sx(r.lo[0]),
            sx(r.hi[0]) - sx(r.lo[0])
        );
    }
    // band and steps
    for row in results.iter().filter(|r| r.label != Label::Avoid) {
        let Some(reg) = regions.iter().find(|r| r.region_id == row.region_id) else {
            continue;
        };
        let (a, b) = (sx(reg.lo[0]), sx(reg.hi[0]));
        let _ = writeln!(
            s,
            r##"<rect x="{a:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#9ecae1" fill-opacity="0.5"/>"##,
            sy(row.p_upper),
            b - a,
            (sy(row.p_lower) - sy(row.p_upper)).max(0.0)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{a:.2}" y1="{y:.2}" x2="{b:.2}" y2="{y:.2}" stroke="#08519c" stroke-width="2"/>"##,
            y = sy(row.p_lower)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{a:.2}" y1="{y:.2}" x2="{b:.2}" y2="{y:.2}" stroke="#cb181d" stroke-width="2"/>"##,
            y = sy(row.p_upper)
        );
    }
    for e in estimates {
        let Some(row) = results.iter().find(|r| r.region_id == e.region_id) else {
            continue;
        };
        let x = sx(row.center[0]);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#,
            sy(e.ci_low),
            sy(e.ci_high)
        );
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{:.2}" r="2.5" fill="black"/>"#,
            sy(e.p_hat)
        );
    }
    axes(&mut s, x0, x1, &sx, &sy);
    let lx = W - RIGHT + 15.0;
    for (i, (color, name)) in [
        ("#08519c", "lower bound"),
        ("#cb181d", "upper bound"),
        ("black", "empirical (99% CI)"),
    ]
    .iter()
    .enumerate()
    {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{name}</text>"#,
            lx + 20.0,
            lx + 26.0,
            y + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn axes(s: &mut String, x0: f64, x1: f64, sx: &dyn Fn(f64) -> f64, sy: &dyn Fn(f64) -> f64) {
    let (xb, yb) = (sx(x0), sy(0.0));
    let _ = writeln!(
        s,
        r#"<line x1="{xb:.2}" y1="{yb:.2}" x2="{:.2}" y2="{yb:.2}" stroke="black"/><line x1="{xb:.2}" y1="{yb:.2}" x2="{xb:.2}" y2="{:.2}" stroke="black"/>"#,
        sx(x1),
        sy(1.0)
    );
    for i in 0..=4 {
        let p = i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{p:.2}</text>"#,
            xb - 6.0,
            sy(p) + 4.0
        );
        let x = x0 + (x1 - x0) * p;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x:.2}</text>"#,
            sx(x),
            yb + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">state</text>"#,
        (sx(x0) + sx(x1)) / 2.0,
        yb + 38.0
    );
}

fn heat(p: f64) -> String {
    // white to dark blue
    let t = p.clamp(0.0, 1.0);
    let r = (255.0 * (1.0 - 0.9 * t)) as u8;
    let g = (255.0 * (1.0 - 0.7 * t)) as u8;
    format!("#{r:02x}{g:02x}ff")
}

/// Heatmaps of `p_lower` and `p_hat` over the first two coordinates.
pub fn plot_2d(
    regions: &[RegionRow],
    results: &[ResultRow],
    estimates: &[RegionEstimate],
    title: &str,
) -> String {
    let bound = |d: usize, hi: bool| {
        regions
            .iter()
            .map(|r| if hi { r.hi[d] } else { r.lo[d] })
            .fold(
                if hi { f64::NEG_INFINITY } else { f64::INFINITY },
                |a, b| if hi { a.max(b) } else { a.min(b) },
            )
    };
    let (x0, x1, y0, y1) = (
        bound(0, false),
        bound(0, true),
        bound(1, false),
        bound(1, true),
    );
    let panel = 320.0;
    let mut s = String::new();
    let width = 2.0 * panel + 3.0 * 40.0;
    let height = panel + 80.0;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        s,
        r#"<rect width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle" font-size="14">{title}</text>"#,
        width / 2.0
    );
    for (k, name) in ["lower bound", "empirical"].iter().enumerate() {
        let ox = 40.0 + k as f64 * (panel + 40.0);
        let oy = 50.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{name}</text>"#,
            ox + panel / 2.0,
            oy - 8.0
        );
        for r in regions {
            let val = match (k, r.label) {
                (_, Label::Avoid) => None,
                (0, _) => results
                    .iter()
                    .find(|x| x.region_id == r.region_id)
                    .map(|x| x.p_lower),
                _ => estimates
                    .iter()
                    .find(|e| e.region_id == r.region_id)
                    .map(|e| e.p_hat),
            };
            let fill = val.map_or_else(|| "#dddddd".to_string(), heat);
            let px = ox + (r.lo[0] - x0) / (x1 - x0) * panel;
            let py = oy + (y1 - r.hi[1]) / (y1 - y0) * panel;
            let _ = writeln!(
                s,
                r#"<rect x="{px:.2}" y="{py:.2}" width="{:.2}" height="{:.2}" fill="{fill}"/>"#,
                (r.hi[0] - r.lo[0]) / (x1 - x0) * panel,
                (r.hi[1] - r.lo[1]) / (y1 - y0) * panel
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Reads `partition.csv`, `results.csv`, `validation.csv` (optional) from
/// `dir` and writes `plot.svg` and `summary.csv`.
pub fn render(
    dir: &Path,
    eps1: Option<f64>,
    times_min: (Option<f64>, Option<f64>),
    title: &str,
) -> Result<Summary> {
    let regions = read_partition_csv(&dir.join("partition.csv"))?;
    let results = read_results_csv(&dir.join("results.csv"))?;
    let val = dir.join("validation.csv");
    let estimates = if val.exists() {
        read_validation_csv(&val)?
    } else {
        Vec::new()
    };
    let mut summary = summarize(
        &results,
        (!estimates.is_empty()).then_some(&estimates[..]),
        eps1,
    );
    summary.abstraction_time_min = times_min.0;
    summary.synthesis_time_min = times_min.1;
    let dim = regions.first().map_or(0, |r| r.lo.len());
    let svg = match dim {
        1 => Some(plot_1d(&regions, &results, &estimates, title)),
        2 => Some(plot_2d(&regions, &results, &estimates, title)),
        _ => None,
    };
    if let Some(svg) = svg {
        let path = dir.join("plot.svg");
        std::fs::write(&path, svg).map_err(|e| Error::io(path, e))?;
    }
    write_summary_csv(&dir.join("summary.csv"), &summary)?;
    if summary.degenerate {
        log::warn!("no safe regions: the specification is degenerate");
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<ResultRow> {
        vec![
            ResultRow {
                region_id: 0,
                center: vec![0.5],
                label: Label::Avoid,
                action: None,
                p_lower: 0.0,
                p_upper: 0.0,
            },
            ResultRow {
                region_id: 1,
                center: vec![1.5],
                label: Label::Safe,
                action: Some(1),
                p_lower: 0.2,
                p_upper: 0.6,
            },
            ResultRow {
                region_id: 2,
                center: vec![2.5],
                label: Label::Safe,
                action: Some(0),
                p_lower: 0.4,
                p_upper: 0.8,
            },
        ]
    }

    #[test]
    fn averages_skip_avoid_regions() {
        let est: Vec<RegionEstimate> = (0..3)
            .map(|i| RegionEstimate {
                region_id: i,
                successes: 0,
                runs: 10,
                p_hat: [0.0, 0.5, 0.7][i],
                ci_low: 0.0,
                ci_high: 1.0,
            })
            .collect();
        let s = summarize(&rows(), Some(&est), Some(0.09));
        assert_eq!(s.safe_regions, 2);
        assert!((s.p_lower_avg.unwrap() - 0.3).abs() < 1e-12);
        assert!((s.e_avg.unwrap() - 0.7).abs() < 1e-12);
        assert!((s.p_hat_avg.unwrap() - 0.6).abs() < 1e-12);
        assert!(!s.degenerate);
    }

    #[test]
    fn empty_safe_set_is_flagged() {
        let s = summarize(&rows()[..1], None, None);
        assert!(s.degenerate);
        assert_eq!(s.p_lower_avg, None);
    }

    #[test]
    fn missing_inputs_are_a_stage_order_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            render(dir.path(), None, (None, None), "x"),
            Err(Error::StageOrder(_))
        ));
    }

    #[test]
    fn plot_is_well_formed() {
        let regions: Vec<RegionRow> = (0..3)
            .map(|i| RegionRow {
                region_id: i,
                label: if i == 0 { Label::Avoid } else { Label::Safe },
                lo: vec![i as f64],
                hi: vec![i as f64 + 1.0],
            })
            .collect();
        let svg = plot_1d(&regions, &rows(), &[], "t");
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.matches("<line").count() >= 4);
    }
}
