//! Complex geometrical optics illuminations and the slab-by-slab global
//! reconstruction for conductivities close to a constant.

use crate::elliptic::{boundary_values, internal_functional, neumann_trace, solve_elliptic, CauchyTrace, EllipticOptions};
use crate::error::{invalid, Error, Result};
use crate::field::ScalarField;
use crate::geometry::{Domain, Shape};
use crate::hypersolve::{assemble_result, initial_piece, Failure, MarchConfig, Nonlinear, ReconstructionResult};
use crate::march::{march, Direction, MarchFrame, MarchSetup};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

/// Parameters of the CGO slab scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgoSpec {
    pub k_magnitude: f64,
    #[serde(default = "default_w")]
    pub w: f64,
    /// Number of slabs; `ceil(10 |k|)` when absent.
    #[serde(default)]
    pub slab_count: Option<usize>,
    /// Half-width of the slab cross-section.
    pub a: f64,
}

fn default_w() -> f64 {
    (std::f64::consts::PI / 8.0).cos()
}

impl CgoSpec {
    pub fn new(k_magnitude: f64, a: f64) -> Self {
        CgoSpec {
            k_magnitude,
            w: default_w(),
            slab_count: None,
            a,
        }
    }

    pub fn slabs(&self) -> usize {
        self.slab_count.unwrap_or((10.0 * self.k_magnitude).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_magnitude > 0.0) {
            return invalid(format!("cgo.k_magnitude must be positive, got {}", self.k_magnitude));
        }
        if !(self.w > 0.0 && self.w < 1.0) {
            return invalid(format!("cgo.w must lie in (0, 1), got {}", self.w));
        }
        if !(self.a > 0.0) {
            return invalid(format!("cgo.a must be positive, got {}", self.a));
        }
        if self.k_magnitude / self.slabs() as f64 > 0.1 + 1e-12 {
            return invalid(format!(
                "cgo.slab_count = {} is too small: |k|/N must not exceed 0.1",
                self.slabs()
            ));
        }
        Ok(())
    }

    /// Marching directions `p` and `q`.
    pub fn p(&self) -> [f64; 2] {
        [self.w, (1.0 - self.w * self.w).sqrt()]
    }

    pub fn q(&self) -> [f64; 2] {
        [self.w, -(1.0 - self.w * self.w).sqrt()]
    }
}

/// `theta(x)` for `k = |k| e1`.
pub fn theta(k: f64, x: [f64; 2]) -> [f64; 2] {
    [(k * x[0]).cos(), (k * x[0]).sin()]
}

pub fn theta_perp(k: f64, x: [f64; 2]) -> [f64; 2] {
    [-(k * x[0]).sin(), (k * x[0]).cos()]
}

/// `v = Im e^{rho.x}`, `w = Re e^{rho.x}` with `rho = i k e1 + k e2`.
pub fn cgo_harmonic_pair(grid: &crate::geometry::Grid2D, k: f64) -> (ScalarField, ScalarField) {
    (
        ScalarField::from_fn(grid, |p| (k * p[1]).exp() * (k * p[0]).sin()),
        ScalarField::from_fn(grid, |p| (k * p[1]).exp() * (k * p[0]).cos()),
    )
}

/// Angles `(alpha, beta)` in `[0, 2 pi)` rotating `(theta, theta_perp)` at
/// `(t, 0)` onto `p` and `q`.
pub fn slab_angles(t: f64, k: f64, w: f64) -> (f64, f64) {
    let a = w.acos();
    ((a - k * t).rem_euclid(TAU), (-a - k * t).rem_euclid(TAU))
}

/// Three internal functionals and the Cauchy data of two illuminations.
#[derive(Clone, Debug)]
pub struct MeasurementBundle {
    pub h11: ScalarField,
    pub h22: ScalarField,
    /// Functional of the sum of both illuminations.
    pub h12: ScalarField,
    pub cauchy1: Vec<CauchyTrace>,
    pub cauchy2: Vec<CauchyTrace>,
}

/// Cross term `sigma grad u1 . grad u2`.
pub fn polarize(b: &MeasurementBundle) -> ScalarField {
    let values = (0..b.h11.values.len())
        .map(|n| 0.5 * (b.h12.values[n] - b.h11.values[n] - b.h22.values[n]))
        .collect();
    ScalarField {
        grid: b.h11.grid.clone(),
        values,
    }
}

/// `sigma |mu grad u1 + nu grad u2|^2`.
pub fn combined_functional(b: &MeasurementBundle, mu: f64, nu: f64) -> ScalarField {
    let cross = polarize(b);
    let values = (0..b.h11.values.len())
        .map(|n| mu * mu * b.h11.values[n] + nu * nu * b.h22.values[n] + 2.0 * mu * nu * cross.values[n])
        .collect();
    ScalarField {
        grid: b.h11.grid.clone(),
        values,
    }
}

/// Synthesise a bundle with the forward model. The third functional uses the
/// sum of the two potentials, which by linearity is the potential of `f1 + f2`.
pub fn measure_bundle(
    domain: &Domain,
    sigma: &ScalarField,
    f1: &[f64],
    f2: &[f64],
    opts: &EllipticOptions,
) -> Result<MeasurementBundle> {
    let u1 = solve_elliptic(domain, sigma, f1, opts)?;
    let u2 = solve_elliptic(domain, sigma, f2, opts)?;
    let u3 = u1.zip_map(&u2, |a, b| a + b);
    Ok(MeasurementBundle {
        h11: internal_functional(domain, sigma, &u1),
        h22: internal_functional(domain, sigma, &u2),
        h12: internal_functional(domain, sigma, &u3),
        cauchy1: neumann_trace(domain, sigma, &u1, f1)?,
        cauchy2: neumann_trace(domain, sigma, &u2, f2)?,
    })
}

/// Lateral decay rate of the grid-harmonic CGO: the `kappa` for which
/// `e^{kappa x2} sin(k x1)` is annihilated by the five-point Laplacian.
pub fn discrete_rate(grid: &crate::geometry::Grid2D, k: f64) -> f64 {
    let r = grid.hy / grid.hx;
    (1.0 + r * r * (1.0 - (k * grid.hx).cos())).acosh() / grid.hy
}

/// Boundary traces of the grid-harmonic CGO pair, used as illuminations.
/// For constant conductivity the discrete potentials are exactly
/// `e^{kappa x2} (sin k x1, cos k x1)`.
pub fn cgo_illuminations(domain: &Domain, k: f64) -> (Vec<f64>, Vec<f64>) {
    let kappa = discrete_rate(&domain.grid, k);
    (
        boundary_values(domain, |p| (kappa * p[1]).exp() * (k * p[0]).sin()),
        boundary_values(domain, |p| (kappa * p[1]).exp() * (k * p[0]).cos()),
    )
}

/// Grid-harmonic CGO traces with wavenumber `k (1 + delta)` and phase `delta`.
fn shifted_illuminations(domain: &Domain, k: f64, delta: f64) -> (Vec<f64>, Vec<f64>) {
    let kk = k * (1.0 + delta);
    let kappa = discrete_rate(&domain.grid, kk);
    (
        boundary_values(domain, |p| (kappa * p[1]).exp() * (kk * p[0] + delta).sin()),
        boundary_values(domain, |p| (kappa * p[1]).exp() * (kk * p[0] + delta).cos()),
    )
}

fn trace_norm(domain: &Domain, f: &[f64]) -> f64 {
    f.iter()
        .zip(&domain.samples)
        .map(|(v, s)| v * v * s.weight)
        .sum::<f64>()
        .sqrt()
}

/// Illuminations at relative trace distance `level` from the grid-harmonic
/// CGO pair, obtained by detuning its wavenumber and phase. Perturbations
/// outside this family are not grid-harmonic and their discretisation error
/// grows relative to the CGO across the slab.
pub fn perturbed_illuminations(domain: &Domain, k: f64, level: f64) -> (Vec<f64>, Vec<f64>) {
    let (f1, f2) = cgo_illuminations(domain, k);
    if level == 0.0 {
        return (f1, f2);
    }
    let n0 = trace_norm(domain, &f1).hypot(trace_norm(domain, &f2));
    let dist = |delta: f64| {
        let (g1, g2) = shifted_illuminations(domain, k, delta);
        let d1: Vec<f64> = g1.iter().zip(&f1).map(|(a, b)| a - b).collect();
        let d2: Vec<f64> = g2.iter().zip(&f2).map(|(a, b)| a - b).collect();
        trace_norm(domain, &d1).hypot(trace_norm(domain, &d2)) / n0
    };
    let target = level.abs();
    let (mut lo, mut hi) = (0.0, 1e-4);
    while dist(hi) < target && hi < 1.0 {
        hi *= 2.0;
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if dist(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    shifted_illuminations(domain, k, level.signum() * 0.5 * (lo + hi))
}

/// Synthesise a bundle on a laterally refined copy of a slab and restrict it
/// to the nodes of `domain`. Illuminations are the grid-harmonic CGO traces
/// of the fine grid, optionally perturbed by a relative trace level.
pub fn synthesize_slab_bundle(
    domain: &Domain,
    sigma: impl Fn([f64; 2]) -> f64,
    k: f64,
    refine: usize,
    perturbation: f64,
    opts: &EllipticOptions,
) -> Result<MeasurementBundle> {
    let Shape::Slab { .. } = domain.shape else {
        return invalid("slab data synthesis needs a slab domain");
    };
    if refine == 0 {
        return invalid("refinement factor must be at least 1");
    }
    let g = &domain.grid;
    let fine = crate::geometry::build_domain(&domain.shape, g.nx, refine * (g.ny - 1) + 1)?;
    let fg = &fine.grid;
    let sig = ScalarField::from_fn(fg, &sigma);
    let (f1, f2) = perturbed_illuminations(&fine, k, perturbation);
    let u1 = solve_elliptic(&fine, &sig, &f1, opts)?;
    let u2 = solve_elliptic(&fine, &sig, &f2, opts)?;
    let u3 = u1.zip_map(&u2, |a, b| a + b);
    let functional = |u: &ScalarField| {
        let values = (0..fg.len())
            .map(|n| {
                let [a, b] = gradient4(fg, u, n);
                sig.values[n] * (a * a + b * b)
            })
            .collect();
        ScalarField {
            grid: fg.clone(),
            values,
        }
    };
    let mut fine_node = vec![usize::MAX; fine.samples.len()];
    for (n, s) in fine.node_sample.iter().enumerate() {
        if let Some(s) = *s {
            fine_node[s] = n;
        }
    }
    let cauchy = |u: &ScalarField, f: &[f64]| -> Result<Vec<CauchyTrace>> {
        let mut tr = neumann_trace(&fine, &sig, u, f)?;
        for t in &mut tr {
            let c = &fine.components[t.component];
            for s in 0..c.len {
                if let Some(d) = normal_derivative4(&fine, u, c.start + s, fine_node[c.start + s]) {
                    t.j[s] = d;
                    t.flux[s] = sigma(fine.samples[c.start + s].position) * d;
                }
            }
        }
        Ok(tr)
    };
    let b = MeasurementBundle {
        h11: functional(&u1),
        h22: functional(&u2),
        h12: functional(&u3),
        cauchy1: cauchy(&u1, &f1)?,
        cauchy2: cauchy(&u2, &f2)?,
    };
    let coarse = |h: &ScalarField| {
        let values = (0..g.len())
            .map(|n| {
                let (i, j) = g.ij(n);
                h.values[fg.idx(i, refine * j)]
            })
            .collect();
        ScalarField { grid: g.clone(), values }
    };
    let mut sample_node = vec![usize::MAX; domain.samples.len()];
    for (n, s) in domain.node_sample.iter().enumerate() {
        if let Some(s) = *s {
            sample_node[s] = n;
        }
    }
    let traces = |fine_traces: &[CauchyTrace]| -> Result<Vec<CauchyTrace>> {
        let mut f = vec![0.0; fine.samples.len()];
        let mut j = vec![0.0; fine.samples.len()];
        let mut flux = vec![0.0; fine.samples.len()];
        for tr in fine_traces {
            let c = &fine.components[tr.component];
            f[c.start..c.start + c.len].copy_from_slice(&tr.f);
            j[c.start..c.start + c.len].copy_from_slice(&tr.j);
            flux[c.start..c.start + c.len].copy_from_slice(&tr.flux);
        }
        let pick = |s: usize| -> Result<usize> {
            let (i, jj) = g.ij(sample_node[s]);
            fine.node_sample[fg.idx(i, refine * jj)]
                .ok_or_else(|| Error::InvalidInput("boundary node missing on the refined slab".into()))
        };
        domain
            .components
            .iter()
            .enumerate()
            .map(|(ci, c)| {
                let idx: Vec<usize> = (c.start..c.start + c.len).map(pick).collect::<Result<_>>()?;
                Ok(CauchyTrace {
                    component: ci,
                    f: idx.iter().map(|&s| f[s]).collect(),
                    j: idx.iter().map(|&s| j[s]).collect(),
                    flux: idx.iter().map(|&s| flux[s]).collect(),
                })
            })
            .collect()
    };
    Ok(MeasurementBundle {
        h11: coarse(&b.h11),
        h22: coarse(&b.h22),
        h12: coarse(&b.h12),
        cauchy1: traces(&b.cauchy1)?,
        cauchy2: traces(&b.cauchy2)?,
    })
}

fn diff4(v: impl Fn(i64) -> f64, lo: i64, hi: i64, at: i64, h: f64) -> f64 {
    if at - 2 >= lo && at + 2 <= hi {
        (8.0 * (v(at + 1) - v(at - 1)) - v(at + 2) + v(at - 2)) / (12.0 * h)
    } else if at + 4 <= hi {
        one_sided4(|o| v(at + o), h)
    } else {
        -one_sided4(|o| v(at - o), h)
    }
}

fn one_sided4(v: impl Fn(i64) -> f64, h: f64) -> f64 {
    (-25.0 * v(0) + 48.0 * v(1) - 36.0 * v(2) + 16.0 * v(3) - 3.0 * v(4)) / (12.0 * h)
}

/// Fourth-order gradient on a full rectangular grid.
fn gradient4(g: &crate::geometry::Grid2D, u: &ScalarField, n: usize) -> [f64; 2] {
    let (i, j) = g.ij(n);
    let (ni, nj) = (g.nx as i64 - 1, g.ny as i64 - 1);
    [
        diff4(|m| u.at(m as usize, j), 0, ni, i as i64, g.hx),
        diff4(|m| u.at(i, m as usize), 0, nj, j as i64, g.hy),
    ]
}

/// Fourth-order outward normal derivative at a sample with an axis-aligned normal.
fn normal_derivative4(domain: &Domain, u: &ScalarField, sample: usize, node: usize) -> Option<f64> {
    let g = &domain.grid;
    let nu = domain.samples[sample].normal;
    let (i, j) = g.ij(node);
    let inward = |o: i64| -> f64 {
        match (nu[0].round() as i64, nu[1].round() as i64) {
            (-1, 0) => u.at(i + o as usize, j),
            (1, 0) => u.at(i - o as usize, j),
            (0, -1) => u.at(i, j + o as usize),
            _ => u.at(i, j - o as usize),
        }
    };
    let aligned = (nu[0].abs() - 1.0).abs() < 1e-12 || (nu[1].abs() - 1.0).abs() < 1e-12;
    if !aligned {
        return None;
    }
    let h = if nu[0].abs() > 0.5 { g.hx } else { g.hy };
    Some(-one_sided4(inward, h))
}

/// Per-slab diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlabDiagnostics {
    pub index: usize,
    pub x_start: f64,
    pub x_end: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Margin of `e1` for the two slab metrics on the starting column.
    pub margin_p: f64,
    pub margin_q: f64,
    pub condition: f64,
    /// Lateral extent `[x2_min, x2_max]` of the data carried to the next slab.
    pub extent: [f64; 2],
}

#[derive(Clone, Debug)]
pub struct CgoResult {
    /// Reconstruction from the marches along `p`.
    pub result: ReconstructionResult,
    /// Conductivity from the marches along `q`.
    pub sigma_q: ScalarField,
    /// Relative L2 discrepancy between both conductivities on the common mask.
    pub consistency: f64,
    pub slabs: Vec<SlabDiagnostics>,
    /// Largest angle between the illumination gradients and the harmonic
    /// CGO directions on the first face.
    pub open_set_angle: f64,
}

impl CgoResult {
    pub fn write_slab_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "slab,x_start,x_end,alpha,beta,margin_p,margin_q,condition,x2_min,x2_max")?;
        for s in &self.slabs {
            writeln!(
                w,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                s.index, s.x_start, s.x_end, s.alpha, s.beta, s.margin_p, s.margin_q, s.condition, s.extent[0], s.extent[1]
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest open-set tolerance on the first face.
pub const OPEN_SET_ANGLE: f64 = 0.2;

fn face_data(domain: &Domain, frame: &MarchFrame, traces: &[CauchyTrace]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut f = vec![0.0; domain.samples.len()];
    let mut j = vec![0.0; domain.samples.len()];
    for tr in traces {
        let comp = domain
            .components
            .get(tr.component)
            .ok_or_else(|| Error::InvalidInput("trace of a missing component".into()))?;
        if tr.f.len() != comp.len || tr.j.len() != comp.len {
            return invalid("trace length does not match its component");
        }
        f[comp.start..comp.start + comp.len].copy_from_slice(&tr.f);
        j[comp.start..comp.start + comp.len].copy_from_slice(&tr.j);
    }
    let mut u = vec![0.0; frame.lateral];
    let mut ut = vec![0.0; frame.lateral];
    for l in 0..frame.lateral {
        let s = domain.node_sample[frame.node(0, l)].ok_or_else(|| Error::InvalidInput("face node without sample".into()))?;
        u[l] = f[s];
        ut[l] = -j[s];
    }
    Ok((u, ut))
}

fn angle_between(a: [f64; 2], b: [f64; 2]) -> f64 {
    let c = (a[0] * b[0] + a[1] * b[1]) / (a[0].hypot(a[1]) * b[0].hypot(b[1]));
    c.clamp(-1.0, 1.0).acos()
}

/// Min over the masked lateral cells of `(e1 . e)^2 - 1/2` for the gradient `(ut, us)`.
fn start_margin(frame: &MarchFrame, u: &[f64], ut: &[f64], mask: &[bool]) -> f64 {
    (0..u.len())
        .filter(|&l| mask[l])
        .filter_map(|l| frame.lat(u, mask, l).map(|(us, _)| (l, us)))
        .map(|(l, us)| {
            let g2 = ut[l] * ut[l] + us * us;
            ut[l] * ut[l] / g2 - 0.5
        })
        .fold(f64::INFINITY, f64::min)
}

/// Slab column boundaries snapped to the grid.
fn slab_columns(columns: usize, n: usize) -> Vec<usize> {
    let last = columns - 1;
    let mut c: Vec<usize> = (0..=n)
        .map(|i| ((i as f64 * last as f64) / n as f64).round() as usize)
        .collect();
    c.dedup();
    c
}

/// Global reconstruction on `(0, L) x (-a, a)` from a measurement bundle.
pub fn slab_reconstruct(domain: &Domain, bundle: &MeasurementBundle, spec: &CgoSpec, cfg: &MarchConfig) -> Result<CgoResult> {
    spec.validate()?;
    cfg.validate()?;
    let Shape::Slab { half_width, .. } = domain.shape else {
        return invalid("the CGO scheme runs on a slab");
    };
    if (half_width - spec.a).abs() > 1e-9 * spec.a {
        return invalid(format!("cgo.a = {} does not match the slab half-width {half_width}", spec.a));
    }
    let g = &domain.grid;
    let k = spec.k_magnitude;
    let mut frame = MarchFrame::new(domain, Direction::AxisX1)?;
    frame.rate = k;
    let (mut u1, mut u1t) = face_data(domain, &frame, &bundle.cauchy1)?;
    let (mut u2, mut u2t) = face_data(domain, &frame, &bundle.cauchy2)?;
    let piece = initial_piece(domain, Direction::AxisX1)?;
    let mut mask = vec![false; frame.lateral];
    for l in 0..frame.lateral {
        mask[l] = domain.node_sample[frame.node(0, l)].is_some_and(|s| piece.contains(&s));
    }

    // Open-set condition on the first face.
    let mut open_set_angle: f64 = 0.0;
    for l in 0..frame.lateral {
        if !mask[l] {
            continue;
        }
        let x = g.position(0, l);
        let (Some((s1, _)), Some((s2, _))) = (frame.lat(&u1, &mask, l), frame.lat(&u2, &mask, l)) else {
            continue;
        };
        open_set_angle = open_set_angle
            .max(angle_between([u1t[l], s1], theta(k, x)))
            .max(angle_between([u2t[l], s2], theta_perp(k, x)));
    }
    if open_set_angle > OPEN_SET_ANGLE {
        return Err(Error::Precondition(format!(
            "illuminations deviate by {open_set_angle:.3} rad from the CGO directions (limit {OPEN_SET_ANGLE})"
        )));
    }

    let cols = slab_columns(frame.columns, spec.slabs());
    let mut history = vec![(Vec::new(), Vec::new(), vec![false; frame.lateral]); frame.columns];
    history[0] = (u1.clone(), u2.clone(), mask.clone());
    let inner = spec.a / 2.0;
    let x2 = |l: usize| g.origin[1] + l as f64 * g.hy;
    let lim = 1.0 / (1.0 - spec.w);

    let mut sigma_p = ScalarField::constant(g, 0.0);
    let mut sigma_q = ScalarField::constant(g, 0.0);
    let mut u_p = ScalarField::constant(g, 0.0);
    let mut valid_p = vec![false; g.len()];
    let mut valid_q = vec![false; g.len()];
    let mut log: Vec<Failure> = Vec::new();
    let mut slabs = Vec::new();
    let mut tracker = None;
    let mut substeps = 1;
    let mut floor_abs = 0.0;

    for (i, win) in cols.windows(2).enumerate() {
        let (c0, c1) = (win[0], win[1]);
        let t0 = g.position(c0, 0)[0];
        let (alpha, beta) = slab_angles(t0, k, spec.w);
        let (ca, sa, cb, sb) = (alpha.cos(), alpha.sin(), beta.cos(), beta.sin());
        let det = ca * sb - sa * cb;
        // Two unit rows at angle gamma: condition number cot(gamma / 2).
        let gamma = angle_between([ca, sa], [cb, sb]);
        let condition = 1.0 / (gamma / 2.0).tan();
        if condition > lim || det.abs() < 1e-12 {
            return Err(Error::Abort(format!(
                "slab {i}: rotation system condition number {condition:.3} exceeds {lim:.3}"
            )));
        }
        let combine =
            |a: &[f64], b: &[f64], m: f64, n: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| m * x + n * y).collect() };
        let (v, vt) = (combine(&u1, &u2, ca, sa), combine(&u1t, &u2t, ca, sa));
        let (w, wt) = (combine(&u1, &u2, cb, sb), combine(&u1t, &u2t, cb, sb));
        let margin_p = start_margin(&frame, &v, &vt, &mask);
        let margin_q = start_margin(&frame, &w, &wt, &mask);
        let hv = combined_functional(bundle, ca, sa);
        let hw = combined_functional(bundle, cb, sb);
        // CGO gradients span many decades across the slab, so the floor is
        // taken relative to the weakest starting gradient.
        let floor = |u: &[f64], ut: &[f64]| {
            let weakest = (0..u.len())
                .filter(|&l| mask[l])
                .filter_map(|l| frame.lat(u, &mask, l).map(|(us, _)| ut[l].hypot(us)))
                .fold(f64::INFINITY, f64::min);
            if weakest.is_finite() {
                cfg.g_min * weakest
            } else {
                0.0
            }
        };
        let mut run = |u0: Vec<f64>, ut0: Vec<f64>, h: &ScalarField| -> Result<_> {
            let grad_floor = floor(&u0, &ut0);
            let setup = MarchSetup {
                col_start: c0,
                col_end: c1,
                u0,
                ut0,
                start_valid: mask.clone(),
                cfl: cfg.cfl,
                margin_min: cfg.margin_min,
                grad_floor,
                picard_iters: cfg.picard_iters,
                substeps: None,
                tracker: tracker.clone(),
            };
            let coef = Nonlinear::new(domain, &frame, h);
            let out = march(&frame, &setup, &coef)?;
            substeps = substeps.max(out.substeps);
            Ok((out, setup.grad_floor))
        };
        let (op, fp) = run(v, vt, &hv)?;
        let (oq, fq) = run(w, wt, &hw)?;
        floor_abs = f64::max(floor_abs, fp.max(fq));
        let rp = assemble_result(domain, &frame, &op, &hv, fp, c0);
        let rq = assemble_result(domain, &frame, &oq, &hw, fq, c0);
        let first = if i == 0 { c0 } else { c0 + 1 };
        for c in first..=c1 {
            for l in 0..frame.lateral {
                let n = frame.node(c, l);
                if rp.valid[n] {
                    sigma_p.values[n] = rp.sigma.values[n];
                    u_p.values[n] = rp.u.values[n];
                    valid_p[n] = true;
                }
                if rq.valid[n] {
                    sigma_q.values[n] = rq.sigma.values[n];
                    valid_q[n] = true;
                }
            }
        }
        log.extend(rp.failure_log.iter().chain(&rq.failure_log).filter(|f| {
            let c = g.ij(f.cell).0;
            c >= first && c <= c1
        }));

        // Potentials of (u1, u2) on every column of the slab.
        for c in c0 + 1..=c1 {
            let (a, b) = (&op.u[c - c0], &oq.u[c - c0]);
            let ok: Vec<bool> = (0..frame.lateral)
                .map(|l| op.valid[c - c0][l] && oq.valid[c - c0][l])
                .collect();
            let h1 = (0..frame.lateral)
                .map(|l| if ok[l] { (sb * a[l] - sa * b[l]) / det } else { 0.0 })
                .collect();
            let h2 = (0..frame.lateral)
                .map(|l| if ok[l] { (-cb * a[l] + ca * b[l]) / det } else { 0.0 })
                .collect();
            history[c] = (h1, h2, ok);
        }
        // Cauchy data on the far column; the marching derivative comes from
        // backward differences across slabs where enough columns exist.
        let last = c1 - c0;
        let next = op.tracker.intersect(&oq.tracker);
        let m_next = next.mask();
        for l in 0..frame.lateral {
            mask[l] = m_next[l] && history[c1].2[l];
            if !mask[l] {
                continue;
            }
            u1[l] = history[c1].0[l];
            u2[l] = history[c1].1[l];
            let depth = (1..=3.min(c1)).take_while(|&b| history[c1 - b].2[l]).count();
            let back = |h: usize, b: usize| if h == 0 { history[c1 - b].0[l] } else { history[c1 - b].1[l] };
            for (h, target) in [(0, &mut u1t), (1, &mut u2t)] {
                target[l] = match depth {
                    3 => (11.0 * back(h, 0) - 18.0 * back(h, 1) + 9.0 * back(h, 2) - 2.0 * back(h, 3)) / (6.0 * frame.dt),
                    2 => (3.0 * back(h, 0) - 4.0 * back(h, 1) + back(h, 2)) / (2.0 * frame.dt),
                    _ => {
                        let (pvt, pwt) = (op.ut[last][l], oq.ut[last][l]);
                        if h == 0 {
                            (sb * pvt - sa * pwt) / det
                        } else {
                            (-cb * pvt + ca * pwt) / det
                        }
                    }
                };
            }
        }
        tracker = Some(next);
        let lo = (0..frame.lateral).find(|&l| mask[l]);
        let hi = (0..frame.lateral).rev().find(|&l| mask[l]);
        let extent = match (lo, hi) {
            (Some(a), Some(b)) => [x2(a), x2(b)],
            _ => [f64::NAN, f64::NAN],
        };
        slabs.push(SlabDiagnostics {
            index: i,
            x_start: t0,
            x_end: g.position(c1, 0)[0],
            alpha,
            beta,
            margin_p,
            margin_q,
            condition,
            extent,
        });
        let covers = (0..frame.lateral).filter(|&l| x2(l).abs() <= inner + 1e-9).all(|l| mask[l]);
        if !covers {
            return Err(Error::Abort(format!(
                "slab {i}: the marching cone no longer covers |x2| <= {inner} (data on [{:.3}, {:.3}])",
                extent[0], extent[1]
            )));
        }
    }

    // Consistency on the common mask.
    let (mut num, mut den) = (0.0, 0.0);
    for n in 0..g.len() {
        if valid_p[n] && valid_q[n] {
            let (i, j) = g.ij(n);
            let wgt = g.cell_weight(i, j);
            num += wgt * (sigma_p.values[n] - sigma_q.values[n]).powi(2);
            den += wgt * sigma_p.values[n].powi(2);
        }
    }
    let consistency = if den > 0.0 { (num / den).sqrt() } else { f64::NAN };
    log.sort_by_key(|f| f.cell);
    log.dedup();
    Ok(CgoResult {
        result: ReconstructionResult {
            u: u_p,
            sigma: sigma_p,
            valid: valid_p,
            failure_log: log,
            substeps,
            gradient_floor: floor_abs,
        },
        sigma_q,
        consistency,
        slabs,
        open_set_angle,
    })
}

/// `1 + amplitude b(x)` with the smooth compact bump
/// `b = exp(1 - 1/(1 - r^2))`, `r = |x - (0.5, 0)| / 0.4`, peak value 1.
pub fn bump_conductivity(amplitude: f64) -> impl Fn([f64; 2]) -> f64 + Copy {
    move |p: [f64; 2]| {
        let r2 = ((p[0] - 0.5).powi(2) + p[1] * p[1]) / 0.16;
        1.0 + if r2 < 1.0 {
            amplitude * (1.0 - 1.0 / (1.0 - r2)).exp()
        } else {
            0.0
        }
    }
}

/// Mask of `|x2| <= a/2`, the region the scheme must cover.
pub fn inner_mask(domain: &Domain, spec: &CgoSpec) -> Vec<bool> {
    (0..domain.grid.len())
        .map(|n| domain.grid.position_of(n)[1].abs() <= spec.a / 2.0 + 1e-9)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_domain;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn theta_closed_forms() {
        let k = 4.0;
        assert_eq!(theta(k, [0.0, 0.3]), [1.0, 0.0]);
        assert_eq!(theta_perp(k, [0.0, 0.3]), [-0.0, 1.0]);
        let x = [std::f64::consts::FRAC_PI_2 / k, 0.0];
        assert!((theta(k, x)[0]).abs() < 1e-15 && (theta(k, x)[1] - 1.0).abs() < 1e-15);
        assert!((theta_perp(k, x)[0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn harmonic_pair_gradients() {
        let d = build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 1.0,
            },
            65,
            65,
        )
        .unwrap();
        let (v, w) = cgo_harmonic_pair(&d.grid, 4.0);
        let gv = crate::elliptic::gradient(&d, &v);
        let gw = crate::elliptic::gradient(&d, &w);
        let c = d.grid.idx(0, 32);
        assert!(angle_between(gv.values[c], [1.0, 0.0]) < 1e-2);
        assert!(angle_between(gw.values[c], [0.0, 1.0]) < 1e-2);
    }

    #[test]
    fn angles_base_and_quarter_period() {
        let w = default_w();
        let (a, b) = slab_angles(0.0, 4.0, w);
        assert_relative_eq!(a, w.acos(), epsilon = 1e-15);
        assert_relative_eq!(b, TAU - w.acos(), epsilon = 1e-15);
        let t = std::f64::consts::FRAC_PI_2 / 4.0;
        let (a2, b2) = slab_angles(t, 4.0, w);
        assert_relative_eq!((a - a2).rem_euclid(TAU), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!((b - b2).rem_euclid(TAU), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
    }

    #[test]
    fn spec_directions() {
        let s = CgoSpec::new(4.0, 6.0);
        assert_eq!(s.slabs(), 40);
        let (p, q) = (s.p(), s.q());
        assert_relative_eq!(p[0] * q[0] + p[1] * q[1], 2.0 * s.w * s.w - 1.0, epsilon = 1e-14);
        assert_relative_eq!(angle_between(p, q), 2.0 * s.w.acos(), epsilon = 1e-12);
        assert!(CgoSpec {
            slab_count: Some(10),
            ..s.clone()
        }
        .validate()
        .is_err());
        assert!(CgoSpec { w: 1.0, ..s }.validate().is_err());
    }

    fn bundle_from(h11: f64, h22: f64, h12: f64) -> MeasurementBundle {
        let g = crate::geometry::Grid2D::cartesian(8, 8, 1.0, 1.0, [0.0, 0.0]).unwrap();
        MeasurementBundle {
            h11: ScalarField::constant(&g, h11),
            h22: ScalarField::constant(&g, h22),
            h12: ScalarField::constant(&g, h12),
            cauchy1: vec![],
            cauchy2: vec![],
        }
    }

    #[test]
    fn polarization_identities() {
        assert_eq!(polarize(&bundle_from(2.0, 2.0, 8.0)).values[0], 2.0);
        assert_eq!(polarize(&bundle_from(2.0, 3.0, 5.0)).values[0], 0.0);
        let b = bundle_from(2.0, 3.0, 6.0);
        assert_eq!(combined_functional(&b, 1.0, 0.0).values[0], 2.0);
        assert_relative_eq!(combined_functional(&b, 1.0, 1.0).values[0], 6.0, epsilon = 1e-14);
    }

    #[test]
    fn polarization_matches_forward_cross_term() {
        let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 33, 33).unwrap();
        let sig = ScalarField::from_fn(&d.grid, |p| 1.0 + 0.2 * p[0] * p[1]);
        let f1 = boundary_values(&d, |p| p[0] + 0.1 * p[1]);
        let f2 = boundary_values(&d, |p| p[1] - 0.3 * p[0] * p[0]);
        let opts = EllipticOptions::default();
        let b = measure_bundle(&d, &sig, &f1, &f2, &opts).unwrap();
        let u1 = solve_elliptic(&d, &sig, &f1, &opts).unwrap();
        let u2 = solve_elliptic(&d, &sig, &f2, &opts).unwrap();
        let (g1, g2) = (crate::elliptic::gradient(&d, &u1), crate::elliptic::gradient(&d, &u2));
        let cross = polarize(&b);
        let mix = combined_functional(&b, 0.7, -1.3);
        for n in 0..d.grid.len() {
            let (a, c) = (g1.values[n], g2.values[n]);
            assert_relative_eq!(cross.values[n], sig.values[n] * (a[0] * c[0] + a[1] * c[1]), epsilon = 1e-9);
            let m = [0.7 * a[0] - 1.3 * c[0], 0.7 * a[1] - 1.3 * c[1]];
            assert_relative_eq!(mix.values[n], sig.values[n] * (m[0] * m[0] + m[1] * m[1]), epsilon = 1e-9);
        }
    }

    #[test]
    fn discrete_rate_annihilates_the_five_point_laplacian() {
        let d = build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 3.0,
            },
            65,
            97,
        )
        .unwrap();
        let g = &d.grid;
        let kappa = discrete_rate(g, 4.0);
        assert!((kappa - 4.0).abs() < 0.05);
        let u = ScalarField::from_fn(g, |p| (kappa * p[1]).exp() * (4.0 * p[0]).sin());
        for (i, j) in [(10, 10), (32, 48), (60, 90)] {
            let lap = (u.at(i + 1, j) - 2.0 * u.at(i, j) + u.at(i - 1, j)) / (g.hx * g.hx)
                + (u.at(i, j + 1) - 2.0 * u.at(i, j) + u.at(i, j - 1)) / (g.hy * g.hy);
            assert!(lap.abs() < 1e-9 * u.at(i, j + 1).abs().max(1.0), "{lap}");
        }
    }

    #[test]
    fn harmonic_pair_residual_is_second_order() {
        let d = build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 1.0,
            },
            128,
            128,
        )
        .unwrap();
        let g = &d.grid;
        let (v, _) = cgo_harmonic_pair(g, 4.0);
        let vmax = v.max_abs(None);
        let k4 = 4.0f64.powi(4);
        for j in 1..g.ny - 1 {
            for i in 1..g.nx - 1 {
                let lap = (v.at(i + 1, j) - 2.0 * v.at(i, j) + v.at(i - 1, j)) / (g.hx * g.hx)
                    + (v.at(i, j + 1) - 2.0 * v.at(i, j) + v.at(i, j - 1)) / (g.hy * g.hy);
                assert!(lap.abs() <= 1.1 * k4 * (g.hx * g.hx + g.hy * g.hy) / 12.0 * vmax);
            }
        }
    }

    #[test]
    fn perturbation_hits_the_requested_trace_distance() {
        let d = build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 2.0,
            },
            33,
            33,
        )
        .unwrap();
        let (f1, f2) = cgo_illuminations(&d, 4.0);
        let (g1, g2) = perturbed_illuminations(&d, 4.0, 0.01);
        let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
        let rel = trace_norm(&d, &diff(&g1, &f1)).hypot(trace_norm(&d, &diff(&g2, &f2)))
            / trace_norm(&d, &f1).hypot(trace_norm(&d, &f2));
        assert_relative_eq!(rel, 0.01, max_relative = 1e-6);
        assert_eq!(perturbed_illuminations(&d, 4.0, 0.0), (f1, f2));
    }

    #[test]
    fn slab_columns_cover_the_grid() {
        let c = slab_columns(128, 40);
        assert_eq!((c[0], *c.last().unwrap(), c.len()), (0, 127, 41));
        assert!(c.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn reconstruction_rejects_mismatched_geometry() {
        let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 16, 16).unwrap();
        let b = bundle_from(1.0, 1.0, 2.0);
        assert!(slab_reconstruct(&d, &b, &CgoSpec::new(4.0, 0.5), &MarchConfig::default()).is_err());
        let slab = build_domain(
            &Shape::Slab {
                length: 1.0,
                half_width: 2.0,
            },
            16,
            16,
        )
        .unwrap();
        let err = slab_reconstruct(&slab, &b, &CgoSpec::new(4.0, 3.0), &MarchConfig::default()).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    proptest! {
        #[test]
        fn angles_rotate_onto_p_and_q(t in 0.0f64..1.0, k in 0.5f64..8.0, w in 0.5f64..0.99) {
            let (a, b) = slab_angles(t, k, w);
            prop_assert!((0.0..TAU).contains(&a) && (0.0..TAU).contains(&b));
            let y = [t, 0.0];
            let (th, tp) = (theta(k, y), theta_perp(k, y));
            let p = [w, (1.0 - w * w).sqrt()];
            let q = [w, -(1.0 - w * w).sqrt()];
            for c in 0..2 {
                prop_assert!((a.cos() * th[c] + a.sin() * tp[c] - p[c]).abs() < 1e-12);
                prop_assert!((b.cos() * th[c] + b.sin() * tp[c] - q[c]).abs() < 1e-12);
            }
        }

        #[test]
        fn theta_frame_is_orthonormal(k in 0.1f64..10.0, x in -2.0f64..2.0) {
            let (a, b) = (theta(k, [x, 0.0]), theta_perp(k, [x, 0.0]));
            prop_assert!((a[0] * b[0] + a[1] * b[1]).abs() < 1e-14);
            prop_assert!((a[0].hypot(a[1]) - 1.0).abs() < 1e-14 && (b[0].hypot(b[1]) - 1.0).abs() < 1e-14);
        }
    }
}
