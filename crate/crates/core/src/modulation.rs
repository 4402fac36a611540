//! Synthetic ultrasound-modulated measurements and recovery of the internal
//! functional by Fourier inversion.

use crate::elliptic::{conductances, gather, reactions, scatter, solve_system, EllipticOptions, LinearSolver, Pattern};
use crate::error::{invalid, precondition, Result};
use crate::field::ScalarField;
use crate::geometry::Domain;
use crate::linalg::{BandedCholesky, CsrMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// Modulation phase: the two quadratures of the DFT.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Cos,
    Sin,
}

impl Phase {
    pub fn radians(self) -> f64 {
        match self {
            Phase::Cos => 0.0,
            Phase::Sin => FRAC_PI_2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSample {
    pub k: [f64; 2],
    pub phase: f64,
    pub eps: f64,
    pub j_eps: f64,
}

/// `sigma (1 + eps cos(k.x + phase))`, rejected if it drops below `sigma_min / 2`.
pub fn modulated_sigma(sigma: &ScalarField, k: [f64; 2], phase: f64, eps: f64, sigma_min: f64) -> Result<ScalarField> {
    let g = &sigma.grid;
    let values: Vec<f64> = (0..g.len())
        .map(|n| {
            let x = g.position_of(n);
            sigma.values[n] * (1.0 + eps * (k[0] * x[0] + k[1] * x[1] + phase).cos())
        })
        .collect();
    if let Some(n) = values.iter().position(|&v| !(v >= 0.5 * sigma_min)) {
        let (i, j) = g.ij(n);
        return precondition(format!(
            "modulated conductivity {} at node ({i}, {j}) is below sigma_min/2",
            values[n]
        ));
    }
    Ok(ScalarField { grid: g.clone(), values })
}

/// Cached unmodulated problem. Each modulated solve is computed as a
/// correction to the unmodulated potential, preconditioned by the Cholesky
/// factor of the unmodulated operator.
pub struct ModulationContext<'a> {
    domain: &'a Domain,
    sigma: &'a ScalarField,
    f: Vec<f64>,
    opts: EllipticOptions,
    pattern: Pattern,
    tvals: Vec<f64>,
    x0: Vec<f64>,
    base: BandedCholesky,
}

impl<'a> ModulationContext<'a> {
    pub fn new(domain: &'a Domain, sigma: &'a ScalarField, f: &[f64], opts: &EllipticOptions) -> Result<Self> {
        let u0 = crate::elliptic::solve_elliptic(
            domain,
            sigma,
            f,
            &EllipticOptions {
                solver: LinearSolver::Direct,
                ..*opts
            },
        )?;
        let pattern = Pattern::new(domain);
        let cond = conductances(domain, &sigma.values);
        let base = BandedCholesky::factor(&pattern.matrix(&cond))?;
        Ok(ModulationContext {
            domain,
            sigma,
            f: f.to_vec(),
            opts: *opts,
            tvals: domain.terminal_values(f),
            x0: gather(domain, &u0),
            pattern,
            base,
        })
    }

    /// Unmodulated potential.
    pub fn potential(&self) -> ScalarField {
        scatter(self.domain, &self.x0, &self.f)
    }

    /// Solve with modulated conductivity; returns edge conductances and the
    /// unknown vector.
    fn solve(&self, k: [f64; 2], phase: f64, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        let s = modulated_sigma(self.sigma, k, phase, eps, self.opts.sigma_min)?;
        let cond = conductances(self.domain, &s.values);
        let a: CsrMatrix = self.pattern.matrix(&cond);
        let mut b = self.pattern.rhs(&cond, &self.tvals);
        let mut ax0 = vec![0.0; a.n];
        a.matvec(&self.x0, &mut ax0);
        for (bi, ai) in b.iter_mut().zip(&ax0) {
            *bi -= ai;
        }
        let mut w = vec![0.0; a.n];
        let opts = EllipticOptions {
            solver: LinearSolver::Pcg,
            tol: 1e-10,
            max_iter: 2000,
            ..self.opts
        };
        solve_system(&a, &b, &mut w, &opts, Some(&self.base))?;
        for (wi, x0) in w.iter_mut().zip(&self.x0) {
            *wi += x0;
        }
        Ok((cond, w))
    }

    /// One measurement `J_eps(k, phase)`.
    pub fn sample(&self, k: [f64; 2], phase: f64, eps: f64) -> Result<ModulationSample> {
        if eps == 0.0 || eps.abs() > 0.05 {
            return invalid(format!("modulation amplitude eps = {eps} must satisfy 0 < |eps| <= 0.05"));
        }
        let (cp, xp) = self.solve(k, phase, eps)?;
        let (cm, xm) = self.solve(k, phase, -eps)?;
        let rp = reactions(self.domain, &cp, &xp, &self.tvals);
        let rm = reactions(self.domain, &cm, &xm, &self.tvals);
        let j: f64 = self
            .tvals
            .iter()
            .zip(rp.iter().zip(&rm))
            .map(|(u, (a, b))| u * (a - b))
            .sum::<f64>()
            * 0.5;
        Ok(ModulationSample { k, phase, eps, j_eps: j })
    }
}

/// Boundary functional `J_eps = 1/2 int (sigma_eps du_eps/dnu u_-eps - sigma_-eps du_-eps/dnu u_eps)`.
pub fn boundary_functional(
    domain: &Domain,
    sigma: &ScalarField,
    f: &[f64],
    k: [f64; 2],
    phase: f64,
    eps: f64,
    opts: &EllipticOptions,
) -> Result<ModulationSample> {
    ModulationContext::new(domain, sigma, f, opts)?.sample(k, phase, eps)
}

/// Richardson extrapolation of `J_1` from samples at `eps` and `eps / 2`.
pub fn first_order_coefficient(s: &ModulationSample, half: &ModulationSample) -> Result<f64> {
    if s.k != half.k || s.phase != half.phase {
        return invalid("samples differ in wavevector or phase");
    }
    if ((half.eps - 0.5 * s.eps) / s.eps).abs() > 1e-12 {
        return invalid(format!("second sample must use eps/2, got {} and {}", s.eps, half.eps));
    }
    Ok((4.0 * half.j_eps / half.eps - s.j_eps / s.eps) / 3.0)
}

/// One entry of the `J_1` table, indexed by the lattice `k = 2 pi (m1/L1, m2/L2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct J1Entry {
    pub m1: i32,
    pub m2: i32,
    pub phase: Phase,
    pub j1: f64,
}

/// Periodic box spanned by the grid nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lattice {
    pub m_max: i32,
    pub lengths: [f64; 2],
}

impl Lattice {
    pub fn for_domain(domain: &Domain, m_max: i32) -> Self {
        let g = &domain.grid;
        Lattice {
            m_max,
            lengths: [(g.nx - 1) as f64 * g.hx, (g.ny - 1) as f64 * g.hy],
        }
    }

    pub fn wavevector(&self, m1: i32, m2: i32) -> [f64; 2] {
        let tau = 2.0 * std::f64::consts::PI;
        [tau * m1 as f64 / self.lengths[0], tau * m2 as f64 / self.lengths[1]]
    }

    /// All `(m1, m2, phase)` in table order.
    pub fn entries(&self) -> Vec<(i32, i32, Phase)> {
        let m = self.m_max;
        let mut out = Vec::with_capacity((2 * m as usize + 1).pow(2) * 2);
        for m2 in -m..=m {
            for m1 in -m..=m {
                out.push((m1, m2, Phase::Cos));
                out.push((m1, m2, Phase::Sin));
            }
        }
        out
    }
}

/// Measure the full `J_1` table (parallel over entries, ordered output).
pub fn measure_j1_table(ctx: &ModulationContext<'_>, lattice: &Lattice, eps: f64) -> Result<Vec<J1Entry>> {
    lattice
        .entries()
        .into_par_iter()
        .map(|(m1, m2, phase)| {
            let k = lattice.wavevector(m1, m2);
            let s = ctx.sample(k, phase.radians(), eps)?;
            let h = ctx.sample(k, phase.radians(), 0.5 * eps)?;
            Ok(J1Entry {
                m1,
                m2,
                phase,
                j1: first_order_coefficient(&s, &h)?,
            })
        })
        .collect()
}

/// Result of the Fourier inversion.
#[derive(Clone, Debug)]
pub struct RecoveredH {
    pub h: ScalarField,
    /// `||Im H|| / ||Re H||` before taking the real part.
    pub imaginary_ratio: f64,
    /// Nodes clipped from below `-1e-6 max H` to zero.
    pub clipped: usize,
    pub min_before_clip: f64,
}

/// Inverse DFT of `H^(k) = J_1(k, 0) + i J_1(k, pi/2)` on the grid.
pub fn recover_h(domain: &Domain, table: &[J1Entry], lattice: &Lattice) -> Result<RecoveredH> {
    let m = lattice.m_max;
    let side = (2 * m + 1) as usize;
    let mut re = vec![f64::NAN; side * side];
    let mut im = vec![f64::NAN; side * side];
    for e in table {
        if e.m1.abs() > m || e.m2.abs() > m {
            return invalid(format!("table entry ({}, {}) lies outside the lattice", e.m1, e.m2));
        }
        let slot = (e.m2 + m) as usize * side + (e.m1 + m) as usize;
        match e.phase {
            Phase::Cos => re[slot] = e.j1,
            Phase::Sin => im[slot] = e.j1,
        }
    }
    if let Some(slot) = (0..side * side).find(|&s| re[s].is_nan() || im[s].is_nan()) {
        let (m1, m2) = ((slot % side) as i32 - m, (slot / side) as i32 - m);
        return precondition(format!("J1 table lacks an entry for lattice point ({m1}, {m2})"));
    }

    let g = &domain.grid;
    let area = lattice.lengths[0] * lattice.lengths[1];
    let kx: Vec<f64> = (-m..=m).map(|m1| lattice.wavevector(m1, 0)[0]).collect();
    let ky: Vec<f64> = (-m..=m).map(|m2| lattice.wavevector(0, m2)[1]).collect();
    let mut hr = vec![0.0; g.len()];
    let mut hi = vec![0.0; g.len()];
    // Separable evaluation: first sum over m1 for each (node column, m2).
    let mut ex = vec![(0.0, 0.0); g.nx * side];
    for i in 0..g.nx {
        let x = g.origin[0] + i as f64 * g.hx;
        for (a, k) in kx.iter().enumerate() {
            ex[i * side + a] = ((k * x).cos(), (k * x).sin());
        }
    }
    let mut partial = vec![(0.0, 0.0); g.nx * side];
    for i in 0..g.nx {
        for b in 0..side {
            let (mut sr, mut si) = (0.0, 0.0);
            for a in 0..side {
                let (c, s) = ex[i * side + a];
                let (r, q) = (re[b * side + a], im[b * side + a]);
                sr += r * c - q * s;
                si += r * s + q * c;
            }
            partial[i * side + b] = (sr, si);
        }
    }
    for j in 0..g.ny {
        let y = g.origin[1] + j as f64 * g.hy;
        let ey: Vec<(f64, f64)> = ky.iter().map(|k| ((k * y).cos(), (k * y).sin())).collect();
        for i in 0..g.nx {
            let (mut sr, mut si) = (0.0, 0.0);
            for (b, &(c, s)) in ey.iter().enumerate() {
                let (r, q) = partial[i * side + b];
                sr += r * c - q * s;
                si += r * s + q * c;
            }
            let n = g.idx(i, j);
            hr[n] = sr / area;
            hi[n] = si / area;
        }
    }
    let nr: f64 = hr.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ni: f64 = hi.iter().map(|v| v * v).sum::<f64>().sqrt();
    let hmax = hr.iter().cloned().fold(0.0, f64::max);
    let min_before_clip = hr.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut clipped = 0;
    for v in hr.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-6 * hmax {
                clipped += 1;
            }
            *v = 0.0;
        }
    }
    if clipped > 0 {
        log::warn!("recovered H was clipped at {clipped} nodes (minimum {min_before_clip:e})");
    }
    Ok(RecoveredH {
        h: ScalarField {
            grid: g.clone(),
            values: hr,
        },
        imaginary_ratio: if nr > 0.0 { ni / nr } else { 0.0 },
        clipped,
        min_before_clip,
    })
}

/// Quadrature `int H cos(k.x + phase)` over the box with trapezoid weights,
/// used to feed band-limited fields through the inversion.
pub fn quadrature_table(h: &ScalarField, lattice: &Lattice) -> Vec<J1Entry> {
    let g = &h.grid;
    lattice
        .entries()
        .into_iter()
        .map(|(m1, m2, phase)| {
            let k = lattice.wavevector(m1, m2);
            let mut s = 0.0;
            for j in 0..g.ny {
                for i in 0..g.nx {
                    let x = g.position(i, j);
                    s += g.cell_weight(i, j) * h.at(i, j) * (k[0] * x[0] + k[1] * x[1] + phase.radians()).cos();
                }
            }
            J1Entry { m1, m2, phase, j1: s }
        })
        .collect()
}
