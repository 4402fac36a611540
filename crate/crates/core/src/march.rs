//! Explicit leapfrog marcher for second-order hyperbolic equations
//!
//! `a u_tt + b u_ts + c u_ss + d u_t + e u_s + f = 0`
//!
//! on a tensor grid of marching columns and lateral nodes, together with the
//! characteristic cone tracker shared with the domain-of-influence computation.

use crate::error::{invalid, Error, Result};
use crate::geometry::{Chart, Domain};
use serde::{Deserialize, Serialize};

/// Marching direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Along `+x1` from the face `x1 = x_min` (Cartesian grids).
    AxisX1,
    /// Inward from the outer circle (polar grids).
    RadialInward,
}

/// Index geometry of a march: column `c` and lateral index `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarchFrame {
    pub direction: Direction,
    pub columns: usize,
    pub lateral: usize,
    /// Column spacing.
    pub dt: f64,
    /// Lateral spacing (angle for polar grids).
    pub ds: f64,
    pub periodic: bool,
    /// Exponential rate of the lateral profile; lateral differences act on
    /// `u e^{-rate s}` when nonzero.
    pub rate: f64,
    nx: usize,
}

impl MarchFrame {
    pub fn new(domain: &Domain, direction: Direction) -> Result<Self> {
        let g = &domain.grid;
        match (direction, g.chart) {
            (Direction::AxisX1, Chart::Cartesian) if domain.grid_aligned() => {}
            (Direction::RadialInward, Chart::Polar) => {}
            _ => return invalid(format!("direction {direction:?} is not available on this domain")),
        }
        Ok(MarchFrame {
            direction,
            columns: g.nx,
            lateral: g.ny,
            dt: g.hx,
            ds: g.hy,
            periodic: g.periodic_y(),
            rate: 0.0,
            nx: g.nx,
        })
    }

    /// Lateral first and second derivative of one level at `j`.
    #[inline]
    pub fn lat(&self, values: &[f64], valid: &[bool], j: usize) -> Option<(f64, f64)> {
        if self.rate == 0.0 {
            return lateral(values, valid, j, self.ds, self.periodic);
        }
        let (r, ds) = (self.rate, self.ds);
        let at = offset_reader(values, valid, j, self.periodic);
        let (ws, wss) = stencil(|o| at(o).map(|v| v * (-r * o as f64 * ds).exp()), ds)?;
        let w0 = values[j];
        Some((ws + r * w0, wss + 2.0 * r * ws + r * r * w0))
    }

    /// Grid node of column `c`, lateral index `j`.
    #[inline]
    pub fn node(&self, c: usize, j: usize) -> usize {
        let i = match self.direction {
            Direction::AxisX1 => c,
            Direction::RadialInward => self.nx - 1 - c,
        };
        j * self.nx + i
    }
}

/// Why a cell left the valid region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrimReason {
    GradientFloor,
    HyperbolicityLoss,
    ConeTrim,
}

impl TrimReason {
    pub fn as_str(self) -> &'static str {
        match self {
            TrimReason::GradientFloor => "gradient_floor",
            TrimReason::HyperbolicityLoss => "hyperbolicity_loss",
            TrimReason::ConeTrim => "cone_trim",
        }
    }
}

/// Local coefficients of the marched equation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coef {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    /// Normalised hyperbolicity indicator, compared with `margin_min`.
    pub hyper: f64,
    /// Gradient magnitude, compared with the gradient floor.
    pub grad: f64,
}

impl Coef {
    /// Lateral characteristic speeds `ds/dt` (min, max), if real.
    pub fn speeds(&self) -> Option<(f64, f64)> {
        let disc = 0.25 * self.b * self.b - self.a * self.c;
        if !(disc >= 0.0) || self.a <= 0.0 {
            return None;
        }
        let r = disc.sqrt();
        let s1 = (0.5 * self.b - r) / self.a;
        let s2 = (0.5 * self.b + r) / self.a;
        Some((s1.min(s2), s1.max(s2)))
    }
}

/// Supplies the equation coefficients. `col` is the fractional column.
pub trait Coefficients: Sync {
    fn eval(&self, col: f64, j: usize, ut: f64, us: f64) -> Coef;
}

/// Lateral first and second derivative at `j` from the valid cells of one
/// level. Fourth-order stencils (central, off-centre or one-sided) where the
/// valid run is long enough, lower order otherwise.
pub(crate) fn lateral(values: &[f64], valid: &[bool], j: usize, ds: f64, periodic: bool) -> Option<(f64, f64)> {
    stencil(offset_reader(values, valid, j, periodic), ds)
}

fn offset_reader<'a>(values: &'a [f64], valid: &'a [bool], j: usize, periodic: bool) -> impl Fn(i64) -> Option<f64> + 'a {
    let n = values.len();
    move |o: i64| -> Option<f64> {
        let k = j as i64 + o;
        let k = if periodic {
            k.rem_euclid(n as i64)
        } else if k < 0 || k >= n as i64 {
            return None;
        } else {
            k
        } as usize;
        valid[k].then_some(values[k])
    }
}

fn stencil(at: impl Fn(i64) -> Option<f64>, ds: f64) -> Option<(f64, f64)> {
    at(0)?;
    let run = |dir: i64| (1..=5).take_while(|&o| at(dir * o).is_some()).count();
    let (left, right) = (run(-1), run(1));
    // Orient so the longer run points forward; the first derivative flips sign.
    let (sign, back, fwd) = if right >= left {
        (1.0, left, right)
    } else {
        (-1.0, right, left)
    };
    let v = |o: i64| at(sign as i64 * o).unwrap_or(f64::NAN);
    let (d1, d2) = match (back, fwd) {
        (2.., _) => (
            8.0 * (v(1) - v(-1)) - v(2) + v(-2),
            16.0 * (v(1) + v(-1)) - 30.0 * v(0) - v(2) - v(-2),
        ),
        (1, 4..) => (
            -3.0 * v(-1) - 10.0 * v(0) + 18.0 * v(1) - 6.0 * v(2) + v(3),
            10.0 * v(-1) - 15.0 * v(0) - 4.0 * v(1) + 14.0 * v(2) - 6.0 * v(3) + v(4),
        ),
        (1, 3) => (
            -3.0 * v(-1) - 10.0 * v(0) + 18.0 * v(1) - 6.0 * v(2) + v(3),
            12.0 * (v(1) - 2.0 * v(0) + v(-1)),
        ),
        (1, _) => (6.0 * (v(1) - v(-1)), 12.0 * (v(1) - 2.0 * v(0) + v(-1))),
        (0, 5..) => (
            -25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4),
            45.0 * v(0) - 154.0 * v(1) + 214.0 * v(2) - 156.0 * v(3) + 61.0 * v(4) - 10.0 * v(5),
        ),
        (0, 4) => (
            -25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4),
            12.0 * (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)),
        ),
        (0, 3) => (
            6.0 * (-3.0 * v(0) + 4.0 * v(1) - v(2)),
            12.0 * (2.0 * v(0) - 5.0 * v(1) + 4.0 * v(2) - v(3)),
        ),
        (0, 2) => (6.0 * (-3.0 * v(0) + 4.0 * v(1) - v(2)), 12.0 * (v(0) - 2.0 * v(1) + v(2))),
        _ => return None,
    };
    Some((sign * d1 / (12.0 * ds), d2 / (12.0 * ds * ds)))
}

/// Real-valued lateral intervals of the characteristic cone, in index units.
#[derive(Clone, Debug, PartialEq)]
pub struct ConeTracker {
    n: usize,
    periodic: bool,
    /// Whole periodic ring with no edges.
    full: bool,
    intervals: Vec<(f64, f64)>,
}

const EDGE_TOL: f64 = 1e-9;

impl ConeTracker {
    /// Intervals from the runs of a lateral mask.
    pub fn from_mask(mask: &[bool], periodic: bool) -> Self {
        let n = mask.len();
        if periodic && mask.iter().all(|&m| m) {
            return ConeTracker {
                n,
                periodic,
                full: true,
                intervals: Vec::new(),
            };
        }
        ConeTracker {
            n,
            periodic,
            full: false,
            intervals: runs(mask, periodic),
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.full && self.intervals.is_empty()
    }

    /// Current lateral mask.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![self.full; self.n];
        for &(lo, hi) in &self.intervals {
            let a = (lo - EDGE_TOL).ceil() as i64;
            let b = (hi + EDGE_TOL).floor() as i64;
            for k in a..=b {
                let idx = if self.periodic { k.rem_euclid(self.n as i64) } else { k };
                if idx >= 0 && (idx as usize) < self.n {
                    m[idx as usize] = true;
                }
            }
        }
        m
    }

    /// Advance one level: each lower edge moves with the largest and each
    /// upper edge with the smallest lateral speed (index units per level),
    /// evaluated at the edge cell. Cells with `ok == false` are removed.
    pub fn advance(&mut self, speeds: impl Fn(usize) -> Option<(f64, f64)>, ok: impl Fn(usize) -> bool) {
        let wrap = |k: i64| -> usize { k.rem_euclid(self.n as i64) as usize };
        let mut moved = Vec::with_capacity(self.intervals.len());
        if self.full {
            moved.push((0.0, (self.n - 1) as f64));
        } else {
            for &(lo, hi) in &self.intervals {
                let jl = wrap((lo - EDGE_TOL).ceil() as i64);
                let jh = wrap((hi + EDGE_TOL).floor() as i64);
                let (Some((_, smax)), Some((smin, _))) = (speeds(jl), speeds(jh)) else {
                    continue;
                };
                // Edges never move outward: there is no data beyond them.
                let nlo = lo + smax.max(0.0);
                let nhi = hi + smin.min(0.0);
                if nlo <= nhi + EDGE_TOL {
                    moved.push((nlo, nhi));
                }
            }
        }
        let full = self.full;
        let mut next = Vec::new();
        for (lo, hi) in moved {
            let a = (lo - EDGE_TOL).ceil() as i64;
            let b = (hi + EDGE_TOL).floor() as i64;
            let mut start: Option<f64> = if ok(wrap(a)) { Some(lo) } else { None };
            for k in a..=b {
                if !ok(wrap(k)) {
                    if let Some(s) = start.take() {
                        next.push((s, (k - 1) as f64));
                    }
                } else if start.is_none() {
                    start = Some(k as f64);
                }
            }
            if let Some(s) = start {
                next.push((s, hi));
            }
        }
        if full && next.len() == 1 && next[0] == (0.0, (self.n - 1) as f64) {
            return;
        }
        if full {
            // A ring that lost cells is re-anchored at the removed ones.
            let m: Vec<bool> = (0..self.n).map(&ok).collect();
            *self = ConeTracker::from_mask(&m, self.periodic);
            return;
        }
        self.intervals = next.into_iter().filter(|(lo, hi)| lo <= &(hi + EDGE_TOL)).collect();
    }
}

impl ConeTracker {
    /// Cells covered by both cones, keeping fractional edges.
    pub fn intersect(&self, other: &ConeTracker) -> ConeTracker {
        if self.full {
            return other.clone();
        }
        if other.full {
            return self.clone();
        }
        if self.periodic {
            let (a, b) = (self.mask(), other.mask());
            let m: Vec<bool> = a.iter().zip(&b).map(|(x, y)| *x && *y).collect();
            return ConeTracker::from_mask(&m, true);
        }
        let mut intervals = Vec::new();
        for &(a, b) in &self.intervals {
            for &(c, d) in &other.intervals {
                let (lo, hi) = (a.max(c), b.min(d));
                if lo <= hi + EDGE_TOL {
                    intervals.push((lo, hi));
                }
            }
        }
        intervals.sort_by(|x, y| x.0.total_cmp(&y.0));
        ConeTracker {
            n: self.n,
            periodic: false,
            full: false,
            intervals,
        }
    }

    /// Closed lateral intervals in index units (empty for a full ring).
    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }
}

/// Maximal runs of a mask as closed index intervals; periodic runs that wrap
/// are expressed with an upper end beyond `n - 1`.
fn runs(mask: &[bool], periodic: bool) -> Vec<(f64, f64)> {
    let n = mask.len();
    let mut out = Vec::new();
    let mut k = 0;
    while k < n {
        if mask[k] {
            let s = k;
            while k < n && mask[k] {
                k += 1;
            }
            out.push((s as f64, (k - 1) as f64));
        } else {
            k += 1;
        }
    }
    if periodic && out.len() > 1 && mask[0] && mask[n - 1] {
        let first = out.remove(0);
        let last = out.last_mut().unwrap();
        last.1 = first.1 + n as f64;
    }
    out
}

/// Setup of one march.
#[derive(Clone, Debug)]
pub struct MarchSetup {
    pub col_start: usize,
    pub col_end: usize,
    /// Initial values and marching derivative on the start column.
    pub u0: Vec<f64>,
    pub ut0: Vec<f64>,
    pub start_valid: Vec<bool>,
    pub cfl: f64,
    pub margin_min: f64,
    pub grad_floor: f64,
    pub picard_iters: usize,
    /// Force a number of levels per column instead of choosing it from the CFL number.
    pub substeps: Option<usize>,
    /// Cone state carried over from a previous march; its mask must lie
    /// within `start_valid`.
    pub tracker: Option<ConeTracker>,
}

/// Output on the grid columns `col_start..=col_end`.
#[derive(Clone, Debug)]
pub struct MarchOutput {
    pub u: Vec<Vec<f64>>,
    pub ut: Vec<Vec<f64>>,
    pub valid: Vec<Vec<bool>>,
    pub failures: Vec<(usize, usize, TrimReason)>,
    pub substeps: usize,
    /// Cone state on the last column.
    pub tracker: ConeTracker,
}

const MAX_SUBSTEPS: usize = 64;

/// March from `col_start` to `col_end`, refining the step until the CFL
/// condition holds on every valid cell.
pub fn march(frame: &MarchFrame, setup: &MarchSetup, coef: &dyn Coefficients) -> Result<MarchOutput> {
    if setup.col_end <= setup.col_start || setup.col_end >= frame.columns {
        return invalid(format!("invalid column range {}..={}", setup.col_start, setup.col_end));
    }
    if !setup.start_valid.iter().any(|&v| v) {
        return Err(Error::Precondition("empty first marching layer".into()));
    }
    let mut m = match setup.substeps {
        Some(m) => m.max(1),
        None => {
            let mut smax: f64 = 0.0;
            for j in 0..frame.lateral {
                if !setup.start_valid[j] {
                    continue;
                }
                let us = frame.lat(&setup.u0, &setup.start_valid, j).map_or(0.0, |d| d.0);
                if let Some((a, b)) = coef.eval(setup.col_start as f64, j, setup.ut0[j], us).speeds() {
                    smax = smax.max(a.abs()).max(b.abs());
                }
            }
            ((smax * frame.dt / frame.ds / setup.cfl).ceil() as usize).max(1)
        }
    };
    loop {
        match march_with(frame, setup, coef, m)? {
            Some(out) => return Ok(out),
            None if setup.substeps.is_none() && m < MAX_SUBSTEPS => m *= 2,
            None => return Err(Error::Abort(format!("CFL condition violated with {m} substeps per column"))),
        }
    }
}

fn march_with(frame: &MarchFrame, s: &MarchSetup, coef: &dyn Coefficients, m: usize) -> Result<Option<MarchOutput>> {
    let nl = frame.lateral;
    let ds = frame.ds;
    let per = frame.periodic;
    let dt = frame.dt / m as f64;
    let levels = (s.col_end - s.col_start) * m;
    let ncols = s.col_end - s.col_start + 1;
    let col_of = |n: usize| s.col_start as f64 + n as f64 / m as f64;
    let cfl_limit = 0.9;

    let mut out = MarchOutput {
        u: vec![vec![0.0; nl]; ncols],
        ut: vec![vec![f64::NAN; nl]; ncols],
        valid: vec![vec![false; nl]; ncols],
        failures: Vec::new(),
        substeps: m,
        tracker: ConeTracker::from_mask(&[], per),
    };

    let mut tracker = match &s.tracker {
        Some(t) => {
            let mut t = t.clone();
            t.advance(|_| Some((0.0, 0.0)), |j| s.start_valid[j]);
            t
        }
        None => ConeTracker::from_mask(&s.start_valid, per),
    };
    let mut valid = tracker.mask();
    let mut u_prev2 = vec![0.0; nl];
    let mut u_prev = vec![0.0; nl];
    let mut u = s.u0.clone();
    let mut acc = vec![0.0; nl];
    let mut ut = s.ut0.clone();
    let mut last_coef = vec![None::<Coef>; nl];
    // Chart gradient per cell, to catch a gradient passing through zero between levels.
    let mut grad_dir = vec![[0.0; 2]; nl];

    // Initial acceleration from the equation.
    {
        let mut bad = vec![None; nl];
        for j in 0..nl {
            if !valid[j] {
                continue;
            }
            let (Some((us, uss)), Some((uts, _))) = (frame.lat(&u, &valid, j), frame.lat(&ut, &valid, j)) else {
                bad[j] = Some(TrimReason::ConeTrim);
                continue;
            };
            let cf = coef.eval(col_of(0), j, ut[j], us);
            if let Some(r) = check(&cf, s) {
                bad[j] = Some(r);
                continue;
            }
            acc[j] = -(cf.b * uts + cf.c * uss + cf.d * ut[j] + cf.e * us + cf.f) / cf.a;
            last_coef[j] = Some(cf);
            grad_dir[j] = [ut[j], us];
        }
        for j in 0..nl {
            if let Some(r) = bad[j] {
                out.failures.push((s.col_start, j, r));
                valid[j] = false;
            }
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Precondition(
                "every cell of the first marching layer failed the marching checks".into(),
            ));
        }
        tracker.advance(|_| Some((0.0, 0.0)), |j| valid[j]);
        valid = tracker.mask();
    }
    out.u[0] = u.clone();
    out.valid[0] = valid.clone();
    out.ut[0] = s.ut0.clone();

    let mut valid_prev = valid.clone();
    for n in 0..levels {
        // Cone for the next level from the speeds at this one.
        let speeds = |j: usize| last_coef[j].and_then(|c| c.speeds()).map(|(a, b)| (a * dt / ds, b * dt / ds));
        for j in 0..nl {
            if valid[j] {
                if let Some((a, b)) = speeds(j) {
                    if a.abs().max(b.abs()) > cfl_limit {
                        return Ok(None);
                    }
                }
            }
        }
        let mut next_tracker = tracker.clone();
        next_tracker.advance(speeds, |j| valid[j]);
        let next_valid = next_tracker.mask();

        let mut u_next = vec![0.0; nl];
        if n == 0 {
            for j in 0..nl {
                if next_valid[j] {
                    u_next[j] = u[j] + dt * ut[j] + 0.5 * dt * dt * acc[j];
                }
            }
        } else {
            // Leapfrog with Picard refresh of the coefficients.
            let mut p: Vec<f64> = (0..nl)
                .map(|j| {
                    if valid[j] {
                        2.0 * u[j] - u_prev[j] + dt * dt * acc[j]
                    } else {
                        0.0
                    }
                })
                .collect();
            let mut coefs = vec![None::<Coef>; nl];
            let both = valid_prev_sub(&valid_prev, &valid);
            for _ in 0..s.picard_iters.max(1) {
                let mut q = vec![0.0; nl];
                for j in 0..nl {
                    if !next_valid[j] {
                        continue;
                    }
                    let (us, uss, uts) = match (
                        frame.lat(&u, &valid, j),
                        frame.lat(&p, &valid, j),
                        frame.lat(&u_prev, &both, j),
                    ) {
                        (Some((us, uss)), Some((ps, _)), Some((qs, _))) => (us, uss, (ps - qs) / (2.0 * dt)),
                        // Isolated apex cell: lateral data from the level below.
                        _ => match frame.lat(&u_prev, &valid_prev, j) {
                            Some((us, uss)) => (us, uss, 0.0),
                            None => continue,
                        },
                    };
                    let utn = (p[j] - u_prev[j]) / (2.0 * dt);
                    let cf = coef.eval(col_of(n), j, utn, us);
                    let num = cf.a * (2.0 * u[j] - u_prev[j]) / (dt * dt) + cf.d * u_prev[j] / (2.0 * dt)
                        - (cf.b * uts + cf.c * uss + cf.e * us + cf.f);
                    let den = cf.a / (dt * dt) + cf.d / (2.0 * dt);
                    q[j] = num / den;
                    coefs[j] = Some(cf);
                }
                for j in 0..nl {
                    if next_valid[j] {
                        p[j] = q[j];
                    }
                }
            }
            u_next = p;
            last_coef[..nl].copy_from_slice(&coefs[..nl]);
        }

        // Marching checks on the new level.
        let mut survived = next_valid.clone();
        for j in 0..nl {
            if !next_valid[j] {
                continue;
            }
            if !u_next[j].is_finite() {
                survived[j] = false;
                out.failures.push((cell_col(s, n + 1, m), j, TrimReason::HyperbolicityLoss));
                continue;
            }
            if n > 0 && last_coef[j].is_none() {
                survived[j] = false;
                out.failures.push((cell_col(s, n + 1, m), j, TrimReason::ConeTrim));
            }
        }
        // Coefficients at the new level, needed for the next cone update.
        let mut new_coef = vec![None; nl];
        let mut new_acc = vec![0.0; nl];
        for j in 0..nl {
            if !survived[j] {
                continue;
            }
            let ut_here = if n == 0 {
                (u_next[j] - u[j]) / dt
            } else {
                (3.0 * u_next[j] - 4.0 * u[j] + u_prev[j]) / (2.0 * dt)
            };
            // An isolated apex cell keeps the lateral slope of the level below.
            let us = frame
                .lat(&u_next, &survived, j)
                .or_else(|| frame.lat(&u, &valid, j))
                .or_else(|| frame.lat(&u_prev, &valid_prev, j))
                .map(|d| d.0);
            let Some(us) = us else {
                survived[j] = false;
                out.failures.push((cell_col(s, n + 1, m), j, TrimReason::ConeTrim));
                continue;
            };
            let cf = coef.eval(col_of(n + 1), j, ut_here, us);
            let reversed = cf.grad.is_finite() && ut_here * grad_dir[j][0] + us * grad_dir[j][1] <= 0.0;
            let verdict = if reversed {
                Some(TrimReason::GradientFloor)
            } else {
                check(&cf, s)
            };
            grad_dir[j] = [ut_here, us];
            if let Some(r) = verdict {
                survived[j] = false;
                out.failures.push((cell_col(s, n + 1, m), j, r));
                continue;
            }
            new_coef[j] = Some(cf);
            new_acc[j] = (u_next[j] - 2.0 * u[j] + if n == 0 { u[j] - dt * ut[j] } else { u_prev[j] }) / (dt * dt);
        }
        if survived != next_valid {
            next_tracker.advance(|_| Some((0.0, 0.0)), |j| survived[j]);
        }
        let next_valid = next_tracker.mask();
        for j in 0..nl {
            if !next_valid[j] {
                new_coef[j] = None;
            }
        }

        u_prev2 = std::mem::replace(&mut u_prev, std::mem::replace(&mut u, u_next));
        valid_prev = std::mem::replace(&mut valid, next_valid);
        tracker = next_tracker;
        acc = new_acc;
        last_coef = new_coef;
        if n == 0 {
            ut = vec![0.0; nl];
        }

        // Column outputs.
        let lvl = n + 1;
        if lvl % m == 0 {
            let c = lvl / m;
            out.u[c] = u.clone();
            out.valid[c] = valid.clone();
        }
        // Central marching derivative at the column of the previous level.
        if n % m == 0 && n > 0 {
            let c = n / m;
            for j in 0..nl {
                if out.valid[c][j] {
                    out.ut[c][j] = if valid[j] {
                        (u[j] - u_prev2[j]) / (2.0 * dt)
                    } else {
                        f64::NAN
                    };
                }
            }
        }
        if !valid.iter().any(|&v| v) {
            break;
        }
    }
    out.tracker = tracker;
    finish_derivatives(&mut out, m, dt);
    Ok(Some(out))
}

fn valid_prev_sub(prev: &[bool], cur: &[bool]) -> Vec<bool> {
    prev.iter().zip(cur).map(|(a, b)| *a && *b).collect()
}

fn cell_col(s: &MarchSetup, level: usize, m: usize) -> usize {
    s.col_start + level.div_ceil(m)
}

fn check(cf: &Coef, s: &MarchSetup) -> Option<TrimReason> {
    if !(cf.grad >= s.grad_floor) {
        Some(TrimReason::GradientFloor)
    } else if !(cf.hyper >= s.margin_min) || cf.speeds().is_none() {
        Some(TrimReason::HyperbolicityLoss)
    } else {
        None
    }
}

/// Replace missing column derivatives with backward differences along the
/// columns: third order when four columns are available, else lower order.
fn finish_derivatives(out: &mut MarchOutput, m: usize, dt: f64) {
    let hcol = dt * m as f64;
    for c in 1..out.u.len() {
        for j in 0..out.u[c].len() {
            if !out.valid[c][j] {
                out.ut[c][j] = 0.0;
                continue;
            }
            if !out.ut[c][j].is_finite() {
                out.ut[c][j] = if c >= 3 && out.valid[c - 2][j] && out.valid[c - 3][j] {
                    (11.0 * out.u[c][j] - 18.0 * out.u[c - 1][j] + 9.0 * out.u[c - 2][j] - 2.0 * out.u[c - 3][j]) / (6.0 * hcol)
                } else if c >= 2 && out.valid[c - 2][j] {
                    (3.0 * out.u[c][j] - 4.0 * out.u[c - 1][j] + out.u[c - 2][j]) / (2.0 * hcol)
                } else {
                    (out.u[c][j] - out.u[c - 1][j]) / hcol
                };
            }
        }
    }
}
