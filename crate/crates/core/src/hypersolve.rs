//! Reconstruction of `sigma` by marching `div(H grad u / |grad u|^2) = 0`
//! from Cauchy data on a spacelike boundary piece, and the linearised twin
//! equation used in stability studies.

use crate::elliptic::{axis_derivative, gradient, CauchyTrace};
use crate::error::{invalid, precondition, Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::geometry::{Chart, Domain, Grid2D};
use crate::lorentz::{self, Causal, LorentzDirectionField};
use crate::march::{march, Coef, Coefficients, Direction, MarchFrame, MarchOutput, MarchSetup, TrimReason};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// Marching parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarchConfig {
    pub direction: Direction,
    pub cfl: f64,
    /// Gradient floor relative to the median `|j|` on the initial piece.
    pub g_min: f64,
    pub margin_min: f64,
    pub picard_iters: usize,
}

impl Default for MarchConfig {
    fn default() -> Self {
        MarchConfig {
            direction: Direction::AxisX1,
            cfl: 0.5,
            g_min: 1e-3,
            margin_min: 0.05,
            picard_iters: 2,
        }
    }
}

impl MarchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return invalid(format!("march.cfl must lie in (0, 1], got {}", self.cfl));
        }
        if !(self.g_min > 0.0) {
            return invalid(format!("march.g_min must be positive, got {}", self.g_min));
        }
        if !(self.margin_min > 0.0) {
            return invalid(format!("march.margin_min must be positive, got {}", self.margin_min));
        }
        if self.picard_iters == 0 {
            return invalid("march.picard_iters must be positive");
        }
        Ok(())
    }
}

/// A trimmed cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: usize,
    pub reason: TrimReason,
}

#[derive(Clone, Debug)]
pub struct ReconstructionResult {
    pub u: ScalarField,
    pub sigma: ScalarField,
    pub valid: Vec<bool>,
    pub failure_log: Vec<Failure>,
    /// Marching levels per grid column actually used.
    pub substeps: usize,
    /// Absolute gradient floor applied.
    pub gradient_floor: f64,
}

impl ReconstructionResult {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn trim_counts(&self) -> [(TrimReason, usize); 3] {
        let count = |r| self.failure_log.iter().filter(|f| f.reason == r).count();
        [
            (TrimReason::GradientFloor, count(TrimReason::GradientFloor)),
            (TrimReason::HyperbolicityLoss, count(TrimReason::HyperbolicityLoss)),
            (TrimReason::ConeTrim, count(TrimReason::ConeTrim)),
        ]
    }

    /// CSV `cell,i,j,x,y,reason`.
    pub fn write_failure_log(&self, path: &Path) -> Result<()> {
        let g = &self.u.grid;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "cell,i,j,x,y,reason")?;
        for f in &self.failure_log {
            let (i, j) = g.ij(f.cell);
            let p = g.position_of(f.cell);
            writeln!(w, "{},{},{},{:.17e},{:.17e},{}", f.cell, i, j, p[0], p[1], f.reason.as_str())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Boundary samples of the default initial piece: the `x1 = x_min` face
/// without its corners, or the whole outer circle of the annulus.
pub fn initial_piece(domain: &Domain, direction: Direction) -> Result<Vec<usize>> {
    let frame = MarchFrame::new(domain, direction)?;
    let range = if frame.periodic {
        0..frame.lateral
    } else {
        1..frame.lateral - 1
    };
    range
        .map(|j| {
            domain.node_sample[frame.node(0, j)]
                .ok_or_else(|| Error::InvalidInput(format!("face node {j} carries no boundary sample")))
        })
        .collect()
}

/// Coefficients of the quasilinear equation `g^{ij}(grad u) d_ij u + k . grad u = 0`
/// with `g = 2 e e - I`, `e = grad u / |grad u|` and `k = -grad ln H`.
pub(crate) struct Nonlinear<'a> {
    frame: &'a MarchFrame,
    grid: &'a Grid2D,
    /// `k` in marching components `(t, s)`: `(k1, k2)` or `(k_r, k_phi)`.
    k: Vec<[f64; 2]>,
}

impl<'a> Nonlinear<'a> {
    pub(crate) fn new(domain: &'a Domain, frame: &'a MarchFrame, h: &ScalarField) -> Self {
        let grid = &domain.grid;
        let lnh = h.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
        let gl = gradient(domain, &lnh);
        let k = (0..grid.len())
            .map(|n| {
                let kc = [-gl.values[n][0], -gl.values[n][1]];
                match grid.chart {
                    Chart::Cartesian => kc,
                    Chart::Polar => {
                        let (i, j) = grid.ij(n);
                        let phi = grid.coords(i, j)[1];
                        let (c, s) = (phi.cos(), phi.sin());
                        [kc[0] * c + kc[1] * s, -kc[0] * s + kc[1] * c]
                    }
                }
            })
            .collect();
        Nonlinear { frame, grid, k }
    }

    fn k_at(&self, col: f64, j: usize) -> [f64; 2] {
        let c0 = (col.floor() as usize).min(self.frame.columns - 1);
        let c1 = (c0 + 1).min(self.frame.columns - 1);
        let t = col - c0 as f64;
        let (a, b) = (self.k[self.frame.node(c0, j)], self.k[self.frame.node(c1, j)]);
        [(1.0 - t) * a[0] + t * b[0], (1.0 - t) * a[1] + t * b[1]]
    }
}

impl Coefficients for Nonlinear<'_> {
    fn eval(&self, col: f64, j: usize, ut: f64, us: f64) -> Coef {
        let k = self.k_at(col, j);
        match self.frame.direction {
            Direction::AxisX1 => {
                let gn = ut.hypot(us);
                let (p, q) = if gn > 0.0 { (ut / gn, us / gn) } else { (1.0, 0.0) };
                let a = 2.0 * p * p - 1.0;
                Coef {
                    a,
                    b: 4.0 * p * q,
                    c: 2.0 * q * q - 1.0,
                    d: k[0],
                    e: k[1],
                    f: 0.0,
                    hyper: a,
                    grad: gn,
                }
            }
            Direction::RadialInward => {
                let r = self.grid.origin[0] + self.grid.hx * (self.frame.columns as f64 - 1.0 - col);
                let (pr, qr) = (-ut, us / r);
                let gn = pr.hypot(qr);
                let (p, q) = if gn > 0.0 { (pr / gn, qr / gn) } else { (1.0, 0.0) };
                let grr = 2.0 * p * p - 1.0;
                let grp = 2.0 * p * q;
                let gpp = 2.0 * q * q - 1.0;
                Coef {
                    a: grr,
                    b: -2.0 * grp / r,
                    c: gpp / (r * r),
                    d: -(gpp / r + k[0]),
                    e: -2.0 * grp / (r * r) + k[1] / r,
                    f: 0.0,
                    hyper: grr,
                    grad: gn,
                }
            }
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flat per-sample views of the traces.
fn flatten(domain: &Domain, traces: &[CauchyTrace]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut f = vec![f64::NAN; domain.samples.len()];
    let mut j = vec![f64::NAN; domain.samples.len()];
    for tr in traces {
        let comp = domain
            .components
            .get(tr.component)
            .ok_or_else(|| Error::InvalidInput(format!("trace refers to missing component {}", tr.component)))?;
        if tr.f.len() != comp.len || tr.j.len() != comp.len {
            return invalid(format!("trace of component {} has the wrong length", tr.component));
        }
        for k in 0..comp.len {
            f[comp.start + k] = tr.f[k];
            j[comp.start + k] = tr.j[k];
        }
    }
    Ok((f, j))
}

/// Checks shared by the nonlinear marches; returns the absolute gradient floor.
fn preconditions(domain: &Domain, h: &ScalarField, traces: &[CauchyTrace], piece: &[usize], cfg: &MarchConfig) -> Result<f64> {
    cfg.validate()?;
    if h.grid != domain.grid {
        return invalid("H lives on a different grid than the domain");
    }
    let (_, j) = flatten(domain, traces)?;
    if piece.iter().any(|&s| !j[s].is_finite()) {
        return invalid("Cauchy data missing on the initial piece");
    }
    let med = median(piece.iter().map(|&s| j[s].abs()).collect());
    if !(med > 0.0) {
        return precondition("vanishing normal derivative on the initial piece: the potential is constant");
    }
    let floor = cfg.g_min * med;
    if let Some(&s) = piece.iter().find(|&&s| j[s].abs() < floor) {
        return precondition(format!(
            "|j| = {:.3e} below the gradient floor {floor:.3e} at boundary sample {s}",
            j[s].abs()
        ));
    }
    if let Some(n) = (0..h.values.len()).find(|&n| domain.inside[n] && !(h.values[n] > 0.0)) {
        return precondition(format!("H = {:.3e} is not positive at cell {n}", h.values[n]));
    }
    let e = lorentz::directions_from_traces(domain, traces);
    let cls = lorentz::classify_samples(domain, &e, &vec![1.0; e.len()], lorentz::TOL_NULL);
    if let Some(&s) = piece.iter().find(|&&s| cls.tags[s] != Causal::Spacelike) {
        return precondition(format!(
            "initial boundary sample {s} is not spacelike (margin {:.3e}, tag {})",
            cls.margins[s],
            cls.tags[s].as_str()
        ));
    }
    Ok(floor)
}

/// March the nonlinear equation along `+x1` from the `x1 = x_min` face.
pub fn march_nonlinear(
    domain: &Domain,
    h: &ScalarField,
    traces: &[CauchyTrace],
    cfg: &MarchConfig,
) -> Result<ReconstructionResult> {
    if cfg.direction != Direction::AxisX1 {
        return invalid("march_nonlinear marches along x1; use march_polar for the annulus");
    }
    run_nonlinear(domain, h, traces, cfg)
}

/// March the nonlinear equation radially inward from the outer circle.
pub fn march_polar(domain: &Domain, h: &ScalarField, traces: &[CauchyTrace], cfg: &MarchConfig) -> Result<ReconstructionResult> {
    if domain.grid.chart != Chart::Polar {
        return invalid("march_polar needs an annulus");
    }
    let cfg = MarchConfig {
        direction: Direction::RadialInward,
        ..cfg.clone()
    };
    run_nonlinear(domain, h, traces, &cfg)
}

fn run_nonlinear(domain: &Domain, h: &ScalarField, traces: &[CauchyTrace], cfg: &MarchConfig) -> Result<ReconstructionResult> {
    let frame = MarchFrame::new(domain, cfg.direction)?;
    let piece = initial_piece(domain, cfg.direction)?;
    let floor = preconditions(domain, h, traces, &piece, cfg)?;
    let (f, j) = flatten(domain, traces)?;
    let mut u0 = vec![0.0; frame.lateral];
    let mut ut0 = vec![0.0; frame.lateral];
    let mut start = vec![false; frame.lateral];
    for jj in 0..frame.lateral {
        if let Some(s) = domain.node_sample[frame.node(0, jj)] {
            u0[jj] = f[s];
            // The outward normal points against the marching direction.
            ut0[jj] = -j[s];
            start[jj] = piece.contains(&s);
        }
    }
    let setup = MarchSetup {
        col_start: 0,
        col_end: frame.columns - 1,
        u0,
        ut0,
        start_valid: start,
        cfl: cfg.cfl,
        margin_min: cfg.margin_min,
        grad_floor: floor,
        picard_iters: cfg.picard_iters,
        substeps: None,
        tracker: None,
    };
    let coef = Nonlinear::new(domain, &frame, h);
    let out = march(&frame, &setup, &coef)?;
    Ok(assemble_result(domain, &frame, &out, h, floor, 0))
}

/// Gridded potential, gradient-based `sigma` and failure log from a march.
pub(crate) fn assemble_result(
    domain: &Domain,
    frame: &MarchFrame,
    out: &MarchOutput,
    h: &ScalarField,
    floor: f64,
    col_start: usize,
) -> ReconstructionResult {
    let g = &domain.grid;
    let mut u = ScalarField::constant(g, 0.0);
    let mut sigma = ScalarField::constant(g, 0.0);
    let mut valid = vec![false; g.len()];
    let mut log: Vec<Failure> = out
        .failures
        .iter()
        .map(|&(c, j, reason)| Failure {
            cell: frame.node(c.min(frame.columns - 1), j),
            reason,
        })
        .collect();
    for (ci, col) in out.u.iter().enumerate() {
        let c = col_start + ci;
        for jj in 0..frame.lateral {
            if out.valid[ci][jj] {
                let n = frame.node(c, jj);
                u.values[n] = col[jj];
                valid[n] = true;
            }
        }
    }
    for ci in 0..out.u.len() {
        let c = col_start + ci;
        for jj in 0..frame.lateral {
            if !out.valid[ci][jj] {
                continue;
            }
            let n = frame.node(c, jj);
            // Apex cells borrow the lateral slope of the nearest wider column.
            let us = (0..=ci.min(2))
                .find_map(|back| frame.lat(&out.u[ci - back], &out.valid[ci - back], jj))
                .map(|d| d.0);
            let Some(us) = us else {
                valid[n] = false;
                log.push(Failure {
                    cell: n,
                    reason: TrimReason::ConeTrim,
                });
                continue;
            };
            let ut = out.ut[ci][jj];
            let g2 = match frame.direction {
                Direction::AxisX1 => ut * ut + us * us,
                Direction::RadialInward => {
                    let r = g.coords(g.ij(n).0, jj)[0];
                    ut * ut + (us / r) * (us / r)
                }
            };
            if g2.sqrt() < floor || !g2.is_finite() {
                valid[n] = false;
                log.push(Failure {
                    cell: n,
                    reason: TrimReason::GradientFloor,
                });
                continue;
            }
            sigma.values[n] = (h.values[n] / g2).max(0.0);
        }
    }
    for n in 0..g.len() {
        if !valid[n] {
            u.values[n] = 0.0;
            sigma.values[n] = 0.0;
        }
    }
    log.sort_by_key(|f| f.cell);
    log.dedup();
    ReconstructionResult {
        u,
        sigma,
        valid,
        failure_log: log,
        substeps: out.substeps,
        gradient_floor: floor,
    }
}

/// Gradient restricted to `mask`: central differences where both neighbours
/// are in the mask, one-sided otherwise, `None` where no neighbour is.
pub fn masked_gradient(grid: &Grid2D, u: &[f64], mask: &[bool]) -> Vec<Option<[f64; 2]>> {
    let per = grid.periodic_y();
    (0..grid.len())
        .map(|n| {
            if !mask[n] {
                return None;
            }
            let (i, j) = grid.ij(n);
            let node = |di: i64, dj: i64| -> Option<usize> {
                let (ii, jj) = (i as i64 + di, j as i64 + dj);
                if ii < 0 || ii >= grid.nx as i64 {
                    return None;
                }
                let jj = if per {
                    jj.rem_euclid(grid.ny as i64)
                } else if jj < 0 || jj >= grid.ny as i64 {
                    return None;
                } else {
                    jj
                };
                let k = grid.idx(ii as usize, jj as usize);
                mask[k].then_some(k)
            };
            let has_x = node(-1, 0).is_some() || node(1, 0).is_some();
            let has_y = node(0, -1).is_some() || node(0, 1).is_some();
            if !(has_x && has_y) {
                return None;
            }
            let dx = axis_derivative(|s| node(s, 0).is_some(), |s| u[node(s, 0).unwrap_or(n)], grid.hx);
            let dy = axis_derivative(|s| node(0, s).is_some(), |s| u[node(0, s).unwrap_or(n)], grid.hy);
            Some(match grid.chart {
                Chart::Cartesian => [dx, dy],
                Chart::Polar => {
                    let [r, phi] = grid.coords(i, j);
                    let (c, s) = (phi.cos(), phi.sin());
                    [dx * c - dy / r * s, dx * s + dy / r * c]
                }
            })
        })
        .collect()
}

/// `sigma = H / |grad u|^2` on `mask`; cells whose gradient falls below
/// `g_min` are dropped from the returned mask.
pub fn recover_sigma(h: &ScalarField, u: &ScalarField, mask: &[bool], g_min: f64) -> Result<(ScalarField, Vec<bool>)> {
    if h.grid != u.grid || mask.len() != u.values.len() {
        return invalid("H, u and mask must share one grid");
    }
    let grads = masked_gradient(&u.grid, &u.values, mask);
    let mut sigma = ScalarField::constant(&u.grid, 0.0);
    let mut valid = vec![false; mask.len()];
    for (n, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            let g2 = g[0] * g[0] + g[1] * g[1];
            if g2.sqrt() >= g_min && g2 > 0.0 {
                sigma.values[n] = (h.values[n] / g2).max(0.0);
                valid[n] = true;
            }
        }
    }
    Ok((sigma, valid))
}

/// Coefficients of the linear equation
/// `G^{ij} d_ij v + K^j d_j v - div(dH b) = 0`, `K^j = d_i G^{ij}`.
struct Linear {
    frame: MarchFrame,
    g: Vec<[f64; 3]>,
    k: Vec<[f64; 2]>,
    src: Vec<f64>,
    hyper: Vec<f64>,
}

impl Linear {
    fn at(&self, v: &[f64], col: f64, j: usize) -> f64 {
        let c0 = (col.floor() as usize).min(self.frame.columns - 1);
        let c1 = (c0 + 1).min(self.frame.columns - 1);
        let t = col - c0 as f64;
        (1.0 - t) * v[self.frame.node(c0, j)] + t * v[self.frame.node(c1, j)]
    }
}

impl Coefficients for Linear {
    fn eval(&self, col: f64, j: usize, _ut: f64, _us: f64) -> Coef {
        let c0 = (col.round() as usize).min(self.frame.columns - 1);
        let n = self.frame.node(c0, j);
        let lerp = |f: &dyn Fn(usize) -> f64| {
            let cf = (col.floor() as usize).min(self.frame.columns - 1);
            let cc = (cf + 1).min(self.frame.columns - 1);
            let t = col - cf as f64;
            (1.0 - t) * f(self.frame.node(cf, j)) + t * f(self.frame.node(cc, j))
        };
        Coef {
            a: lerp(&|m| self.g[m][0]),
            b: 2.0 * lerp(&|m| self.g[m][1]),
            c: lerp(&|m| self.g[m][2]),
            d: lerp(&|m| self.k[m][0]),
            e: lerp(&|m| self.k[m][1]),
            f: self.at(&self.src, col, j),
            hyper: self.hyper[n].min(self.at(&self.hyper, col, j)),
            grad: f64::INFINITY,
        }
    }
}

/// Solution of the linearised equation for `v = ut - u` with Cauchy data
/// `(df, dj)` on the initial face, `dH = Ht - H`, and the pair metric of
/// `(u, ut)` built with the functional `H` of `u`. Cartesian grids only.
#[allow(clippy::too_many_arguments)]
pub fn linearized_solve(
    domain: &Domain,
    ut: &ScalarField,
    dh: &ScalarField,
    df: &[f64],
    dj: &[f64],
    metric: &LorentzDirectionField,
    cfg: &MarchConfig,
) -> Result<(ScalarField, Vec<bool>)> {
    cfg.validate()?;
    if domain.grid.chart != Chart::Cartesian {
        return invalid("the linearised solve runs on Cartesian grids");
    }
    let frame = MarchFrame::new(domain, Direction::AxisX1)?;
    if df.len() != frame.lateral || dj.len() != frame.lateral {
        return invalid(format!("Cauchy perturbations need {} face values", frame.lateral));
    }
    let g = &domain.grid;
    let n = g.len();
    let tens: Vec<[f64; 3]> = (0..n)
        .map(|m| {
            let t = metric.g(m);
            [t[0][0], t[0][1], t[1][1]]
        })
        .collect();
    let comp = |c: usize| ScalarField {
        grid: g.clone(),
        values: tens.iter().map(|t| t[c]).collect(),
    };
    let (d11, d12, d22) = (
        gradient(domain, &comp(0)),
        gradient(domain, &comp(1)),
        gradient(domain, &comp(2)),
    );
    let k: Vec<[f64; 2]> = (0..n)
        .map(|m| [d11.values[m][0] + d12.values[m][1], d12.values[m][0] + d22.values[m][1]])
        .collect();
    // Source: -div(dH b) with b = 2 grad ut / |grad ut|^2.
    let gut = gradient(domain, ut);
    let mut bx = ScalarField::constant(g, 0.0);
    let mut by = ScalarField::constant(g, 0.0);
    for m in 0..n {
        let q = gut.values[m];
        let q2 = q[0] * q[0] + q[1] * q[1];
        if q2 > 0.0 {
            bx.values[m] = 2.0 * dh.values[m] * q[0] / q2;
            by.values[m] = 2.0 * dh.values[m] * q[1] / q2;
        }
    }
    let (gbx, gby) = (gradient(domain, &bx), gradient(domain, &by));
    let src: Vec<f64> = (0..n).map(|m| -(gbx.values[m][0] + gby.values[m][1])).collect();
    let hyper: Vec<f64> = (0..n)
        .map(|m| {
            if metric.valid[m] {
                tens[m][0] / metric.alpha.values[m]
            } else {
                -1.0
            }
        })
        .collect();
    let coef = Linear {
        frame: frame.clone(),
        g: tens,
        k,
        src,
        hyper,
    };
    let start: Vec<bool> = (0..frame.lateral)
        .map(|j| j > 0 && j + 1 < frame.lateral && metric.valid[frame.node(0, j)])
        .collect();
    let setup = MarchSetup {
        col_start: 0,
        col_end: frame.columns - 1,
        u0: df.to_vec(),
        ut0: dj.iter().map(|v| -v).collect(),
        start_valid: start,
        cfl: cfg.cfl,
        margin_min: cfg.margin_min,
        grad_floor: 0.0,
        picard_iters: 1,
        substeps: None,
        tracker: None,
    };
    let out = march(&frame, &setup, &coef)?;
    let mut v = ScalarField::constant(g, 0.0);
    let mut valid = vec![false; n];
    for (c, col) in out.u.iter().enumerate() {
        for j in 0..frame.lateral {
            if out.valid[c][j] {
                let m = frame.node(c, j);
                v.values[m] = col[j];
                valid[m] = true;
            }
        }
    }
    Ok((v, valid))
}

/// Unit field along `+x1`, the marching direction of the Cartesian solvers.
pub fn axis_direction(grid: &Grid2D) -> VectorField {
    let mut v = VectorField::zeros(grid);
    v.values.iter_mut().for_each(|x| *x = [1.0, 0.0]);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::{boundary_values, neumann_trace, solve_elliptic, EllipticOptions};
    use crate::geometry::{build_domain, Shape};
    use approx::assert_relative_eq;

    fn slab(n: usize) -> Domain {
        build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 1.0,
            },
            n,
            n,
        )
        .unwrap()
    }

    fn linear_traces(d: &Domain, c: f64) -> Vec<CauchyTrace> {
        let f = boundary_values(d, |p| c * p[0]);
        let j: Vec<f64> = d.samples.iter().map(|s| c * s.normal[0]).collect();
        vec![CauchyTrace {
            component: 0,
            flux: j.clone(),
            f,
            j,
        }]
    }

    #[test]
    fn linear_potential_is_exact() {
        let d = slab(33);
        let h = ScalarField::constant(&d.grid, 1.0);
        let r = march_nonlinear(&d, &h, &linear_traces(&d, 1.0), &MarchConfig::default()).unwrap();
        assert!(r.failure_log.is_empty(), "{:?}", r.failure_log);
        let o = lorentz::domain_of_influence(
            &d,
            &initial_piece(&d, Direction::AxisX1).unwrap(),
            &lorentz::metric_single(&d, &ScalarField::from_fn(&d.grid, |p| p[0]), &h, 1e-3),
            Direction::AxisX1,
        )
        .unwrap();
        for n in 0..d.grid.len() {
            if r.valid[n] {
                let p = d.grid.position_of(n);
                assert!((r.u.values[n] - p[0]).abs() < 1e-12);
                assert!((r.sigma.values[n] - 1.0).abs() < 1e-10);
            }
            assert_eq!(r.valid[n], o[n], "cell {n}");
        }
    }

    #[test]
    fn scaling_equivariance() {
        let d = slab(33);
        let sig = ScalarField::from_fn(&d.grid, |p| 1.0 + 0.2 * (-10.0 * ((p[0] - 0.3).powi(2) + p[1] * p[1])).exp());
        let f = boundary_values(&d, |p| p[0]);
        let u = solve_elliptic(&d, &sig, &f, &EllipticOptions::default()).unwrap();
        let h = crate::elliptic::internal_functional(&d, &sig, &u);
        let tr = neumann_trace(&d, &sig, &u, &f).unwrap();
        let c = 3.0;
        let tr2: Vec<CauchyTrace> = tr
            .iter()
            .map(|t| CauchyTrace {
                component: t.component,
                f: t.f.iter().map(|v| c * v).collect(),
                j: t.j.iter().map(|v| c * v).collect(),
                flux: t.flux.iter().map(|v| c * v).collect(),
            })
            .collect();
        let cfg = MarchConfig::default();
        let a = march_nonlinear(&d, &h, &tr, &cfg).unwrap();
        let b = march_nonlinear(&d, &h.map(|v| c * c * v), &tr2, &cfg).unwrap();
        assert_eq!(a.valid, b.valid);
        for n in 0..d.grid.len() {
            if a.valid[n] {
                assert_relative_eq!(a.sigma.values[n], b.sigma.values[n], max_relative = 1e-10);
                assert_relative_eq!(c * a.u.values[n], b.u.values[n], max_relative = 1e-10, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_gradient_is_flagged() {
        // u = x1 - x1^2: the gradient vanishes on x1 = 1/2.
        let d = slab(33);
        let h = ScalarField::from_fn(&d.grid, |p| (1.0 - 2.0 * p[0]).abs() + 1e-12);
        let f = boundary_values(&d, |p| p[0] - p[0] * p[0]);
        let j: Vec<f64> = d.samples.iter().map(|s| (1.0 - 2.0 * s.position[0]) * s.normal[0]).collect();
        let tr = vec![CauchyTrace {
            component: 0,
            flux: j.clone(),
            f,
            j,
        }];
        let r = march_nonlinear(&d, &h, &tr, &MarchConfig::default()).unwrap();
        assert!(r.failure_log.iter().any(|f| f.reason == TrimReason::GradientFloor));
        assert!(r.u.values.iter().chain(&r.sigma.values).all(|v| v.is_finite()));
        for n in 0..d.grid.len() {
            if r.valid[n] {
                assert!(
                    d.grid.position_of(n)[0] <= 0.5 + 2.0 * d.grid.hx,
                    "{:?}",
                    d.grid.position_of(n)
                );
            }
        }
    }

    #[test]
    fn timelike_face_is_rejected() {
        let d = slab(17);
        let f = boundary_values(&d, |p| p[1]);
        let j: Vec<f64> = d.samples.iter().map(|s| s.normal[1]).collect();
        let tr = vec![CauchyTrace {
            component: 0,
            flux: j.clone(),
            f,
            j,
        }];
        let e = march_nonlinear(&d, &ScalarField::constant(&d.grid, 1.0), &tr, &MarchConfig::default());
        assert!(matches!(e, Err(Error::Precondition(_))));
    }

    #[test]
    fn recover_sigma_closed_forms() {
        let d = slab(33);
        let all = vec![true; d.grid.len()];
        let (s, v) = recover_sigma(
            &ScalarField::constant(&d.grid, 4.0),
            &ScalarField::from_fn(&d.grid, |p| 2.0 * p[0]),
            &all,
            1e-3,
        )
        .unwrap();
        assert!(v.iter().all(|&x| x));
        assert!(s.values.iter().all(|x| (x - 1.0).abs() < 1e-12));
        let (s, _) = recover_sigma(
            &ScalarField::constant(&d.grid, 1.0),
            &ScalarField::constant(&d.grid, 0.0),
            &all,
            1e-3,
        )
        .unwrap();
        assert!(s.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linearized_trivial_cases() {
        let d = slab(33);
        let g = &d.grid;
        let u = ScalarField::from_fn(g, |p| p[0]);
        let h = ScalarField::constant(g, 1.0);
        let m = lorentz::metric_pair(&d, &u, &u, &h);
        let zero = vec![0.0; g.ny];
        let cfg = MarchConfig::default();
        let (v, valid) = linearized_solve(&d, &u, &ScalarField::constant(g, 0.0), &zero, &zero, &m, &cfg).unwrap();
        assert!(valid.iter().filter(|&&x| x).count() > g.len() / 3);
        assert!(v.values.iter().all(|&x| x == 0.0));
        let (v, valid) = linearized_solve(&d, &u, &ScalarField::constant(g, 0.0), &vec![0.25; g.ny], &zero, &m, &cfg).unwrap();
        for n in 0..g.len() {
            if valid[n] {
                assert!((v.values[n] - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn polar_radial_solution() {
        let d = build_domain(
            &Shape::Annulus {
                r_inner: 0.5,
                r_outer: 1.0,
            },
            33,
            64,
        )
        .unwrap();
        let g = &d.grid;
        let ln2 = 2f64.ln();
        let exact = |r: f64| (r / 0.5).ln() / ln2;
        let h = ScalarField::from_fn(g, |p| {
            let r = p[0].hypot(p[1]);
            1.0 / (r * ln2).powi(2)
        });
        let f = boundary_values(&d, |p| exact(p[0].hypot(p[1])));
        let j: Vec<f64> = d
            .samples
            .iter()
            .map(|s| {
                let r = s.position[0].hypot(s.position[1]);
                let dr = 1.0 / (r * ln2);
                if s.component == 0 {
                    dr
                } else {
                    -dr
                }
            })
            .collect();
        let tr: Vec<CauchyTrace> = d
            .components
            .iter()
            .enumerate()
            .map(|(c, comp)| {
                let rg = comp.start..comp.start + comp.len;
                CauchyTrace {
                    component: c,
                    f: f[rg.clone()].to_vec(),
                    j: j[rg.clone()].to_vec(),
                    flux: j[rg].to_vec(),
                }
            })
            .collect();
        let r = march_polar(&d, &h, &tr, &MarchConfig::default()).unwrap();
        assert_eq!(r.valid_count(), g.len());
        for n in 0..g.len() {
            let p = g.position_of(n);
            assert!((r.u.values[n] - exact(p[0].hypot(p[1]))).abs() < 1e-3);
            assert!((r.sigma.values[n] - 1.0).abs() < 1e-2, "{}", r.sigma.values[n]);
        }
        // Constant data on both circles is rejected.
        let zero: Vec<CauchyTrace> = tr
            .iter()
            .map(|t| CauchyTrace {
                component: t.component,
                f: vec![0.0; t.f.len()],
                j: vec![0.0; t.f.len()],
                flux: vec![0.0; t.f.len()],
            })
            .collect();
        assert!(matches!(
            march_polar(&d, &h, &zero, &MarchConfig::default()),
            Err(Error::Precondition(_))
        ));
    }
}
