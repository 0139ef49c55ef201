//! Certified maximization of Lipschitz functions over intervals and boxes.
//!
//! Both routines keep a priority queue of pieces keyed by an upper bound on the
//! function over the piece. The reported `upper` is the largest key still in
//! the queue, which bounds the true maximum regardless of when the search stops.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::partition::Rect;

#[derive(Clone, Debug, PartialEq)]
pub struct Maximum {
    /// Certified upper bound on the maximum.
    pub upper: f64,
    /// Largest value actually observed.
    pub best: f64,
    pub argbest: Vec<f64>,
    pub probes: usize,
    /// `upper - best <= tol` was reached within the probe budget.
    pub converged: bool,
}

struct Piece<T> {
    ub: f64,
    item: T,
}

impl<T> PartialEq for Piece<T> {
    fn eq(&self, other: &Self) -> bool {
        self.ub.total_cmp(&other.ub) == Ordering::Equal
    }
}
impl<T> Eq for Piece<T> {}
impl<T> PartialOrd for Piece<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<T> Ord for Piece<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.ub.total_cmp(&other.ub)
    }
}

struct Interval {
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
}

impl Interval {
    fn bound(&self, lip: f64) -> f64 {
        0.5 * (self.fa + self.fb) + 0.5 * lip * (self.b - self.a)
    }

    /// Where the two cones from the endpoints meet.
    fn probe(&self, lip: f64) -> f64 {
        let mid = 0.5 * (self.a + self.b);
        if lip > 0.0 {
            (mid + (self.fb - self.fa) / (2.0 * lip)).clamp(self.a, self.b)
        } else {
            mid
        }
    }
}

/// Piyavskii–Shubert on `[a, b]` for an `lip`-Lipschitz `f`. `known` lists
/// interior points with their values (for example a point where `f` is known to
/// vanish); they seed the initial subdivision at no probe cost.
pub fn maximize_interval(
    mut f: impl FnMut(f64) -> f64,
    a: f64,
    b: f64,
    known: &[(f64, f64)],
    lip: f64,
    tol: f64,
    budget: usize,
) -> Maximum {
    assert!(a <= b && lip >= 0.0);
    let mut nodes: Vec<(f64, f64)> = known
        .iter()
        .copied()
        .filter(|(x, _)| *x > a && *x < b)
        .collect();
    let mut probes = 0;
    nodes.push((a, f(a)));
    probes += 1;
    if b > a {
        nodes.push((b, f(b)));
        probes += 1;
    }
    nodes.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut best, mut argbest) = nodes.iter().copied().fold(
        (f64::NEG_INFINITY, a),
        |acc, (x, v)| if v > acc.0 { (v, x) } else { acc },
    );
    if b == a {
        return Maximum {
            upper: best,
            best,
            argbest: vec![argbest],
            probes,
            converged: true,
        };
    }
    let mut heap = BinaryHeap::new();
    for w in nodes.windows(2) {
        let iv = Interval {
            a: w[0].0,
            b: w[1].0,
            fa: w[0].1,
            fb: w[1].1,
        };
        heap.push(Piece {
            ub: iv.bound(lip),
            item: iv,
        });
    }
    loop {
        let top = heap.peek().expect("nonempty").ub;
        if top - best <= tol {
            return Maximum {
                upper: top.max(best),
                best,
                argbest: vec![argbest],
                probes,
                converged: true,
            };
        }
        if probes >= budget {
            return Maximum {
                upper: top.max(best),
                best,
                argbest: vec![argbest],
                probes,
                converged: false,
            };
        }
        let Piece { item: iv, .. } = heap.pop().expect("nonempty");
        let x = iv.probe(lip);
        let fx = f(x);
        probes += 1;
        if fx > best {
            best = fx;
            argbest = x;
        }
        if x <= iv.a || x >= iv.b {
            // degenerate piece (width at rounding level): its endpoints settle it
            let ub = iv.fa.max(iv.fb).max(fx);
            heap.push(Piece {
                ub,
                item: Interval {
                    a: x,
                    b: x,
                    fa: ub,
                    fb: ub,
                },
            });
            continue;
        }
        for half in [
            Interval {
                a: iv.a,
                b: x,
                fa: iv.fa,
                fb: fx,
            },
            Interval {
                a: x,
                b: iv.b,
                fa: fx,
                fb: iv.fb,
            },
        ] {
            heap.push(Piece {
                ub: half.bound(lip),
                item: half,
            });
        }
    }
}

/// Branch-and-bound over a box with the bound `f(center) + lip * half_diagonal`,
/// bisecting the widest side of the most promising box.
pub fn maximize_box(
    mut f: impl FnMut(&[f64]) -> f64,
    region: &Rect,
    lip: f64,
    tol: f64,
    budget: usize,
) -> Maximum {
    let center = region.center();
    let fc = f(&center);
    let mut probes = 1;
    let mut best = fc;
    let mut argbest = center;
    let mut heap = BinaryHeap::new();
    heap.push(Piece {
        ub: fc + lip * region.radius(),
        item: (region.clone(), fc),
    });
    loop {
        let top = heap.peek().expect("nonempty").ub;
        let converged = top - best <= tol;
        if converged || probes >= budget {
            return Maximum {
                upper: top.max(best),
                best,
                argbest,
                probes,
                converged,
            };
        }
        let Piece { item: (bx, _), .. } = heap.pop().expect("nonempty");
        let d = (0..bx.dim())
            .max_by(|&i, &j| (bx.hi[i] - bx.lo[i]).total_cmp(&(bx.hi[j] - bx.lo[j])))
            .expect("dim >= 1");
        let mid = 0.5 * (bx.lo[d] + bx.hi[d]);
        let mut left = bx.clone();
        left.hi[d] = mid;
        let mut right = bx;
        right.lo[d] = mid;
        for child in [left, right] {
            let c = child.center();
            let v = f(&c);
            probes += 1;
            if v > best {
                best = v;
                argbest = c;
            }
            heap.push(Piece {
                ub: v + lip * child.radius(),
                item: (child, v),
            });
        }
    }
}
