//! Benchmark studies: noise stability of the closed loop, the Hölder
//! interpolation estimate, non-injectivity of the single-potential problem,
//! the annulus gradient floor and the hyperbolic energy bound.

use crate::elliptic::{
    boundary_values, gradient, internal_functional, neumann_trace, solve_elliptic, CauchyTrace, EllipticOptions,
};
use crate::error::{invalid, Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::geometry::{build_domain, Chart, Domain, Grid2D, Shape};
use crate::hypersolve::{axis_direction, march_nonlinear, march_polar, masked_gradient, MarchConfig, ReconstructionResult};
use crate::linalg::symmetric_eigenvalues;
use crate::lorentz::{energy_at, margin_at};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::f64::consts::{LN_2, PI};

/// A closed-loop test problem: forward data synthesised from a known `sigma`
/// and reconstructed by marching.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scenario {
    /// `[0,1] x [-1,1]` with `sigma = 1 + bump exp(-50 |x - (0.35,0)|^2)` and
    /// boundary data `x1 cos(tilt) + x2 sin(tilt)`.
    Slab { n: usize, bump: f64, tilt: f64 },
    /// Annulus `0.5 < r < 1` with `sigma = 1 + bump cos(2 phi) exp(-((r-0.75)/0.1)^2)`,
    /// `f = 0` on the outer circle and `1` on the inner one.
    Annulus { nr: usize, nphi: usize, bump: f64 },
}

impl Scenario {
    pub fn domain(&self) -> Result<Domain> {
        match *self {
            Scenario::Slab { n, .. } => build_domain(
                &Shape::Slab {
                    length: 1.0,
                    half_width: 1.0,
                },
                n,
                n,
            ),
            Scenario::Annulus { nr, nphi, .. } => build_domain(
                &Shape::Annulus {
                    r_inner: 0.5,
                    r_outer: 1.0,
                },
                nr,
                nphi,
            ),
        }
    }

    pub fn sigma(&self, grid: &Grid2D) -> ScalarField {
        match *self {
            Scenario::Slab { bump, .. } => {
                ScalarField::from_fn(grid, |p| 1.0 + bump * (-50.0 * ((p[0] - 0.35).powi(2) + p[1] * p[1])).exp())
            }
            Scenario::Annulus { bump, .. } => ScalarField::from_fn(grid, |p| {
                let (r, phi) = (p[0].hypot(p[1]), p[1].atan2(p[0]));
                1.0 + bump * (2.0 * phi).cos() * (-((r - 0.75) / 0.1).powi(2)).exp()
            }),
        }
    }

    pub fn boundary_data(&self, domain: &Domain) -> Vec<f64> {
        match *self {
            Scenario::Slab { tilt, .. } => boundary_values(domain, |p| p[0] * tilt.cos() + p[1] * tilt.sin()),
            Scenario::Annulus { .. } => boundary_values(domain, |p| if p[0].hypot(p[1]) < 0.75 { 1.0 } else { 0.0 }),
        }
    }

    /// Solve the forward problem, synthesise `(H, Cauchy data)` and run the
    /// noiseless reconstruction.
    pub fn prepare(&self, cfg: &MarchConfig) -> Result<Prepared> {
        let domain = self.domain()?;
        let sigma = self.sigma(&domain.grid);
        let f = self.boundary_data(&domain);
        let opts = EllipticOptions::default();
        let u = solve_elliptic(&domain, &sigma, &f, &opts)?;
        let h = internal_functional(&domain, &sigma, &u);
        let traces = neumann_trace(&domain, &sigma, &u, &f)?;
        let mut p = Prepared {
            domain,
            sigma,
            u,
            h,
            traces,
            cfg: cfg.clone(),
            baseline: None,
            theta: f64::NAN,
        };
        let base = p.reconstruct(&p.h)?;
        let nu = p.march_direction();
        p.theta = masked_gradient(&p.domain.grid, &base.u.values, &base.valid)
            .iter()
            .zip(&nu.values)
            .filter_map(|(g, &n)| g.map(|g| margin_at(unit(g), 1.0, n)))
            .fold(f64::INFINITY, f64::min);
        if !p.theta.is_finite() {
            return Err(Error::Abort("reconstruction left no valid gradients".into()));
        }
        p.baseline = Some(base);
        Ok(p)
    }
}

/// Synthetic data of a [`Scenario`] together with its noiseless reconstruction.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub domain: Domain,
    pub sigma: ScalarField,
    pub u: ScalarField,
    pub h: ScalarField,
    pub traces: Vec<CauchyTrace>,
    pub cfg: MarchConfig,
    baseline: Option<ReconstructionResult>,
    /// Hyperbolicity margin of the marching direction over the reconstructed region.
    pub theta: f64,
}

impl Prepared {
    pub fn reconstruct(&self, h: &ScalarField) -> Result<ReconstructionResult> {
        match self.domain.grid.chart {
            Chart::Cartesian => march_nonlinear(&self.domain, h, &self.traces, &self.cfg),
            Chart::Polar => march_polar(&self.domain, h, &self.traces, &self.cfg),
        }
    }

    pub fn baseline(&self) -> &ReconstructionResult {
        self.baseline.as_ref().expect("prepared scenarios carry a baseline")
    }

    /// Relative L2 error of the noiseless reconstruction on its valid region.
    pub fn error(&self) -> f64 {
        let b = self.baseline();
        b.sigma.relative_l2_error(&self.sigma, Some(&b.valid))
    }

    /// The same problem with data `(c^2 H, c f, c j)`, which leaves `sigma`
    /// unchanged and scales `u` by `c`.
    pub fn scaled(&self, c: f64) -> Result<Prepared> {
        let traces = self
            .traces
            .iter()
            .map(|t| CauchyTrace {
                component: t.component,
                f: t.f.iter().map(|v| c * v).collect(),
                j: t.j.iter().map(|v| c * v).collect(),
                flux: t.flux.iter().map(|v| c * v).collect(),
            })
            .collect();
        let mut p = Prepared {
            u: self.u.map(|v| c * v),
            h: self.h.map(|v| c * c * v),
            traces,
            baseline: None,
            ..self.clone()
        };
        p.baseline = Some(p.reconstruct(&p.h)?);
        Ok(p)
    }

    fn march_direction(&self) -> VectorField {
        let g = &self.domain.grid;
        match g.chart {
            Chart::Cartesian => axis_direction(g),
            Chart::Polar => {
                let mut v = VectorField::zeros(g);
                for (k, x) in v.values.iter_mut().enumerate() {
                    let p = g.position_of(k);
                    let r = p[0].hypot(p[1]);
                    *x = [-p[0] / r, -p[1] / r];
                }
                v
            }
        }
    }

    /// `||sigma(H + dH) - sigma(H)||` and `||sigma(H)||` on the common valid
    /// region, or `None` when the perturbed march fails or keeps less than
    /// half the region.
    fn twin_difference(&self, dh: &ScalarField) -> Option<(f64, f64)> {
        let base = self.baseline();
        let noisy = self.reconstruct(&self.h.zip_map(dh, |a, b| a + b)).ok()?;
        let common: Vec<bool> = base.valid.iter().zip(&noisy.valid).map(|(&a, &b)| a && b).collect();
        if 2 * common.iter().filter(|&&c| c).count() < base.valid_count() {
            return None;
        }
        Some((
            noisy.sigma.zip_map(&base.sigma, |a, b| a - b).l2_norm(Some(&common)),
            base.sigma.l2_norm(Some(&common)),
        ))
    }
}

/// `(||f||^2 + ||grad f||^2)^{1/2}` over the masked nodes.
pub fn h1_norm(domain: &Domain, f: &ScalarField, mask: &[bool]) -> f64 {
    let g = gradient(domain, f);
    let gn = ScalarField {
        grid: f.grid.clone(),
        values: g.norm_sq().into_iter().map(f64::sqrt).collect(),
    };
    (f.l2_norm(Some(mask)).powi(2) + gn.l2_norm(Some(mask)).powi(2)).sqrt()
}

/// Gaussian noise smoothed by one Jacobi pass and scaled to `level` times
/// the RMS of `reference` (both measured over the closed domain).
pub fn smoothed_noise(domain: &Domain, reference: &ScalarField, level: f64, rng: &mut impl Rng) -> ScalarField {
    let g = &domain.grid;
    let raw: Vec<f64> = (0..g.len())
        .map(|k| if domain.inside[k] { rng.sample(StandardNormal) } else { 0.0 })
        .collect();
    let mut values = vec![0.0; g.len()];
    for k in 0..g.len() {
        if !domain.inside[k] {
            continue;
        }
        let (i, j) = g.ij(k);
        let (mut s, mut c) = (raw[k], 1.0);
        for (di, dj) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let ii = i as i64 + di;
            let mut jj = j as i64 + dj;
            if g.periodic_y() {
                jj = jj.rem_euclid(g.ny as i64);
            }
            if ii < 0 || jj < 0 || ii >= g.nx as i64 || jj >= g.ny as i64 {
                continue;
            }
            let m = g.idx(ii as usize, jj as usize);
            if domain.inside[m] {
                s += raw[m];
                c += 1.0;
            }
        }
        values[k] = s / c;
    }
    let mut eta = ScalarField { grid: g.clone(), values };
    let scale = level * rms(reference, &domain.inside) / rms(&eta, &domain.inside);
    eta.values.iter_mut().for_each(|v| *v *= scale);
    eta
}

fn unit(g: [f64; 2]) -> [f64; 2] {
    let n = g[0].hypot(g[1]);
    [g[0] / n, g[1] / n]
}

fn rms(f: &ScalarField, mask: &[bool]) -> f64 {
    let area = ScalarField::constant(&f.grid, 1.0).l2_norm(Some(mask)).powi(2);
    f.l2_norm(Some(mask)) / area.sqrt()
}

/// One trial of the stability sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRecord {
    pub noise_level: f64,
    pub trial: usize,
    /// `||dH||_{H^1} / ||H||_{H^1}` over the whole domain.
    pub dh_h1: f64,
    /// Noise is applied to `H` only, so the Cauchy data error is zero.
    pub dcauchy_l2: f64,
    /// `||dsigma|| / ||sigma||` on the common valid region.
    pub dsigma_l2: f64,
    pub theta_margin: f64,
    /// `dsigma / (dh_h1 + dcauchy)`, `NaN` for censored trials.
    pub ratio: f64,
    pub censored: bool,
}

/// Twin-run stability sweep: for each noise level and trial, perturb `H`,
/// reconstruct and compare against the noiseless reconstruction. Trials are
/// independent ChaCha streams of `seed` and run in parallel.
pub fn stability_sweep(p: &Prepared, levels: &[f64], trials: usize, seed: u64) -> Vec<StabilityRecord> {
    let href = h1_norm(&p.domain, &p.h, &p.domain.inside);
    let jobs: Vec<(usize, f64, usize)> = levels
        .iter()
        .enumerate()
        .flat_map(|(li, &l)| (0..trials).map(move |t| (li, l, t)))
        .collect();
    jobs.par_iter()
        .map(|&(li, level, trial)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((li * trials + trial) as u64);
            let dh = smoothed_noise(&p.domain, &p.h, level, &mut rng);
            let dh_h1 = h1_norm(&p.domain, &dh, &p.domain.inside) / href;
            let ds = p.twin_difference(&dh).map(|(d, s)| d / s);
            StabilityRecord {
                noise_level: level,
                trial,
                dh_h1,
                dcauchy_l2: 0.0,
                dsigma_l2: ds.unwrap_or(f64::NAN),
                theta_margin: p.theta,
                ratio: ds.map_or(f64::NAN, |d| d / dh_h1),
                censored: ds.is_none(),
            }
        })
        .collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.retain(|x| x.is_finite());
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Median stability ratio per tilt of the slab boundary data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltRow {
    pub tilt: f64,
    pub theta_margin: f64,
    pub median_ratio: f64,
    pub censored: usize,
}

pub fn tilt_sweep(n: usize, tilts: &[f64], level: f64, trials: usize, seed: u64, cfg: &MarchConfig) -> Result<Vec<TiltRow>> {
    tilts
        .iter()
        .map(|&tilt| {
            let p = Scenario::Slab { n, bump: 0.3, tilt }.prepare(cfg)?;
            let recs = stability_sweep(&p, &[level], trials, seed);
            Ok(TiltRow {
                tilt,
                theta_margin: p.theta,
                median_ratio: median(recs.iter().map(|r| r.ratio).collect()),
                censored: recs.iter().filter(|r| r.censored).count(),
            })
        })
        .collect()
}

/// `||f||_{H^s}` of a Cartesian field via its even extension to the doubled
/// periodic box.
pub fn sobolev_norm(f: &ScalarField, s: f64) -> Result<f64> {
    let g = &f.grid;
    if g.chart != Chart::Cartesian {
        return invalid("spectral Sobolev norms need a Cartesian grid");
    }
    let (mx, my) = (2 * (g.nx - 1), 2 * (g.ny - 1));
    let refl = |k: usize, n: usize| if k < n { k } else { 2 * (n - 1) - k };
    let mut data: Vec<Complex64> = (0..my)
        .flat_map(|b| (0..mx).map(move |a| (a, b)))
        .map(|(a, b)| Complex64::new(f.at(refl(a, g.nx), refl(b, g.ny)), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let (px, py) = (planner.plan_fft_forward(mx), planner.plan_fft_forward(my));
    for row in data.chunks_mut(mx) {
        px.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); my];
    for a in 0..mx {
        for b in 0..my {
            col[b] = data[b * mx + a];
        }
        py.process(&mut col);
        for b in 0..my {
            data[b * mx + a] = col[b];
        }
    }
    let (lx, ly) = (mx as f64 * g.hx, my as f64 * g.hy);
    let wave = |k: usize, n: usize, l: f64| {
        let m = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        2.0 * PI * m / l
    };
    let mut sum = 0.0;
    for b in 0..my {
        for a in 0..mx {
            let k2 = wave(a, mx, lx).powi(2) + wave(b, my, ly).powi(2);
            sum += (1.0 + k2).powf(s) * data[b * mx + a].norm_sqr();
        }
    }
    let npts = (mx * my) as f64;
    // Parseval on the doubled box, then a quarter for the original domain.
    Ok((sum * lx * ly / (npts * npts) / 4.0).sqrt())
}

/// One member of the worst-case perturbation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderRow {
    pub level: f64,
    pub omega: f64,
    pub dh_l2: f64,
    pub dh_h1: f64,
    pub dsigma_l2: f64,
    /// `dsigma theta / (||dH||^{1-1/s} ||H + dH||_{H^s}^{1/s})`.
    pub constant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderReport {
    pub s: f64,
    pub rows: Vec<HolderRow>,
    /// Fitted exponent of `dsigma` against `||dH||_{L2}`.
    pub exponent: f64,
    /// `max / min` of the Hölder constants.
    pub constant_spread: f64,
}

/// Perturbations `A w(x) sin(omega xi . x)` with a Gaussian window `w`, a null
/// covector `xi` of the reconstructed metric and `A omega^s` held fixed. This
/// family saturates `||dH||_{H^1} <= ||dH||^{1-1/s} ||dH||_{H^s}^{1/s}`; the
/// fitted exponent of `dsigma` against `||dH||` is the Hölder exponent the
/// reconstruction actually exhibits.
pub fn holder_check(p: &Prepared, s: f64, levels: &[f64], omega0: f64) -> Result<HolderReport> {
    if !(s >= 1.0) {
        return invalid(format!("holder check needs s >= 1, got {s}"));
    }
    if levels.len() < 2 || levels.iter().any(|&l| !(l > 0.0)) {
        return invalid("holder check needs at least two positive levels");
    }
    let g = &p.domain.grid;
    if g.chart != Chart::Cartesian {
        return invalid("holder check runs on the slab");
    }
    let base = p.baseline();
    let centre = [0.45, 0.0];
    let k0 = g.idx(
        ((centre[0] - g.origin[0]) / g.hx).round() as usize,
        ((centre[1] - g.origin[1]) / g.hy).round() as usize,
    );
    let grad = gradient(&p.domain, &base.u).values[k0];
    let gn = grad[0].hypot(grad[1]);
    if !(gn > 0.0) {
        return Err(Error::Abort("vanishing gradient at the perturbation centre".into()));
    }
    let e = [grad[0] / gn, grad[1] / gn];
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let xi = [c * (e[0] - e[1]), c * (e[0] + e[1])];
    let lmax = levels.iter().cloned().fold(0.0, f64::max);
    let href = p.h.l2_norm(Some(&p.domain.inside));
    let mut rows = Vec::with_capacity(levels.len());
    for &level in levels {
        let omega = omega0 * (lmax / level).powf(1.0 / s);
        let shape = ScalarField::from_fn(g, |x| {
            let d2 = (x[0] - centre[0]).powi(2) + (x[1] - centre[1]).powi(2);
            (-d2 / (2.0 * 0.15 * 0.15)).exp() * (omega * (xi[0] * x[0] + xi[1] * x[1])).sin()
        });
        let amp = level * href / shape.l2_norm(Some(&p.domain.inside));
        let dh = shape.map(|v| amp * v);
        let (ds, _) = p
            .twin_difference(&dh)
            .ok_or_else(|| Error::Abort(format!("perturbed march failed at level {level:e}")))?;
        let dh_l2 = dh.l2_norm(Some(&p.domain.inside));
        let hs = sobolev_norm(&p.h.zip_map(&dh, |a, b| a + b), s)?;
        rows.push(HolderRow {
            level,
            omega,
            dh_l2,
            dh_h1: h1_norm(&p.domain, &dh, &p.domain.inside),
            dsigma_l2: ds,
            constant: ds * p.theta / (dh_l2.powf(1.0 - 1.0 / s) * hs.powf(1.0 / s)),
        });
    }
    let x: Vec<f64> = rows.iter().map(|r| r.dh_l2).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.dsigma_l2).collect();
    let cs: Vec<f64> = rows.iter().map(|r| r.constant).collect();
    let spread = cs.iter().cloned().fold(0.0, f64::max) / cs.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(HolderReport {
        s,
        exponent: loglog_slope(&x, &y),
        constant_spread: spread,
        rows,
    })
}

/// Discrete check of the kernel `sin(m pi x1) sin(m pi x2)` of `d11 - d22` on
/// the unit square.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SquareRow {
    pub n: usize,
    pub m: usize,
    /// `||D11 u - D22 u|| / ||D11 u||` over interior nodes.
    pub residual: f64,
    pub trace_max: f64,
    /// `||D11 u - d11 u|| / ||d11 u||`: the consistency error of each term.
    pub consistency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscRow {
    pub n: usize,
    /// Median over [`DISC_ASPECTS`] of the smallest singular value.
    pub sigma_median: f64,
    /// Minimum over the same family.
    pub sigma_min: f64,
    /// The equal-spacing operator is exactly singular.
    pub singular_at_unit_aspect: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoninjectivityReport {
    pub square: Vec<SquareRow>,
    pub disc: Vec<DiscRow>,
}

pub fn square_kernel(n: usize, m: usize) -> SquareRow {
    let h = 1.0 / n as f64;
    let w = m as f64 * PI;
    let u = |i: usize, j: usize| (w * i as f64 * h).sin() * (w * j as f64 * h).sin();
    let (mut res, mut d11n, mut cons) = (0.0, 0.0, 0.0);
    for i in 1..n {
        for j in 1..n {
            let d11 = (u(i + 1, j) - 2.0 * u(i, j) + u(i - 1, j)) / (h * h);
            let d22 = (u(i, j + 1) - 2.0 * u(i, j) + u(i, j - 1)) / (h * h);
            let exact = -w * w * u(i, j);
            res += (d11 - d22).powi(2);
            d11n += d11 * d11;
            cons += (d11 - exact).powi(2);
        }
    }
    let mut trace_max: f64 = 0.0;
    for k in 0..=n {
        for (i, j) in [(0, k), (n, k), (k, 0), (k, n)] {
            trace_max = trace_max.max(u(i, j).abs());
        }
    }
    let exact_norm: f64 = (1..n)
        .flat_map(|i| (1..n).map(move |j| (i, j)))
        .map(|(i, j)| (w * w * u(i, j)).powi(2))
        .sum();
    SquareRow {
        n,
        m,
        residual: (res / d11n).sqrt(),
        trace_max,
        consistency: (cons / exact_norm).sqrt(),
    }
}

/// Five-point `d11 - d22` on the nodes of a grid over `[-1,1]^2` with
/// `hx = 2/n` and `hy = aspect hx`, restricted to nodes strictly inside the
/// unit disc, with zero Dirichlet values elsewhere. Returned in lower band
/// form: `rows[k][d] = A(k, k - d)` for `d <= width`. With `aspect = 1` the
/// lattice carries exact discrete kernels, so an incommensurate aspect is
/// used to probe near-singularity instead.
pub fn disc_operator(n: usize, aspect: f64) -> (Vec<Vec<f64>>, usize) {
    let hx = 2.0 / n as f64;
    let hy = aspect * hx;
    let ny = (1.0 / hy).floor() as i64;
    let (nxi, nyi) = (n as i64 + 1, 2 * ny + 1);
    let mut id = vec![usize::MAX; (nxi * nyi) as usize];
    let mut count = 0;
    for j in 0..nyi {
        for i in 0..nxi {
            let (x, y) = (-1.0 + i as f64 * hx, (j - ny) as f64 * hy);
            if x * x + y * y < 1.0 - 1e-12 {
                id[(j * nxi + i) as usize] = count;
                count += 1;
            }
        }
    }
    let (cx, cy) = (1.0 / (hx * hx), 1.0 / (hy * hy));
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    let mut width = 0;
    for j in 0..nyi {
        for i in 0..nxi {
            let k = id[(j * nxi + i) as usize];
            if k == usize::MAX {
                continue;
            }
            entries.push((k, k, -2.0 * cx + 2.0 * cy));
            for (di, dj, v) in [(-1i64, 0i64, cx), (0, -1, -cy)] {
                let (ii, jj) = (i + di, j + dj);
                if ii < 0 || jj < 0 {
                    continue;
                }
                let l = id[(jj * nxi + ii) as usize];
                if l != usize::MAX {
                    entries.push((k, l, v));
                    width = width.max(k - l);
                }
            }
        }
    }
    let mut rows = vec![vec![0.0; width + 1]; count];
    for (k, l, v) in entries {
        rows[k][k - l] = v;
    }
    (rows, width)
}

/// Band LU factorisation with partial pivoting of a symmetric band matrix
/// given in lower band form.
struct BandLu {
    n: usize,
    kl: usize,
    /// Row `i` holds columns `i - kl ..= i + 2 kl` of `U`.
    u: Vec<Vec<f64>>,
    l: Vec<Vec<f64>>,
    piv: Vec<usize>,
}

impl BandLu {
    fn factor(rows: &[Vec<f64>], kl: usize) -> Option<Self> {
        let n = rows.len();
        let span = 3 * kl + 1;
        let mut u = vec![vec![0.0; span]; n];
        for (i, r) in rows.iter().enumerate() {
            for d in 0..=kl.min(i) {
                u[i][kl - d] = r[d];
                u[i - d][kl + d] = r[d];
            }
        }
        let at = |i: usize, j: usize| j + kl - i;
        let scale = rows.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut l = vec![vec![0.0; kl]; n];
        let mut piv = vec![0; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let p = (k..=last)
                .max_by(|&a, &b| u[a][at(a, k)].abs().total_cmp(&u[b][at(b, k)].abs()))
                .unwrap();
            if u[p][at(p, k)].abs() <= 1e-14 * scale {
                return None;
            }
            piv[k] = p;
            let hi = (k + 2 * kl).min(n - 1);
            if p != k {
                for j in k..=hi {
                    let (a, b) = (at(k, j), at(p, j));
                    let t = u[k][a];
                    u[k][a] = u[p][b];
                    u[p][b] = t;
                }
            }
            let pivot = u[k][at(k, k)];
            for i in k + 1..=last {
                let m = u[i][at(i, k)] / pivot;
                l[k][i - k - 1] = m;
                u[i][at(i, k)] = 0.0;
                if m != 0.0 {
                    for j in k + 1..=hi {
                        let v = u[k][at(k, j)];
                        u[i][at(i, j)] -= m * v;
                    }
                }
            }
        }
        Some(BandLu { n, kl, u, l, piv })
    }

    fn solve(&self, b: &mut [f64]) {
        let (n, kl) = (self.n, self.kl);
        for k in 0..n {
            b.swap(k, self.piv[k]);
            for i in k + 1..=(k + kl).min(n - 1) {
                b[i] -= self.l[k][i - k - 1] * b[k];
            }
        }
        for k in (0..n).rev() {
            let mut v = b[k];
            for j in k + 1..=(k + 2 * kl).min(n - 1) {
                v -= self.u[k][j + kl - k] * b[j];
            }
            b[k] = v / self.u[k][kl];
        }
    }
}

/// Smallest `|lambda|` of a symmetric band matrix: Lanczos with full
/// reorthogonalisation on `A^{-1}`, whose extreme Ritz values converge
/// first. Exactly singular matrices give zero.
pub fn smallest_abs_eigenvalue(rows: &[Vec<f64>], width: usize, rtol: f64) -> f64 {
    let Some(lu) = BandLu::factor(rows, width) else { return 0.0 };
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut q: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let q0 = norm(&q);
    q.iter_mut().for_each(|x| *x /= q0);
    let mut basis: Vec<Vec<f64>> = vec![q];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    let mut prev = f64::INFINITY;
    for step in 0..n.min(300) {
        let mut w = basis[step].clone();
        lu.solve(&mut w);
        for _ in 0..2 {
            for b in &basis {
                let c: f64 = b.iter().zip(&w).map(|(x, y)| x * y).sum();
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let a: f64 = {
            let mut v = basis[step].clone();
            lu.solve(&mut v);
            v.iter().zip(&basis[step]).map(|(x, y)| x * y).sum()
        };
        alpha.push(a);
        let nb = norm(&w);
        let mut t = vec![vec![0.0; alpha.len()]; alpha.len()];
        for k in 0..alpha.len() {
            t[k][k] = alpha[k];
            if k + 1 < alpha.len() {
                t[k][k + 1] = beta[k];
                t[k + 1][k] = beta[k];
            }
        }
        let top = symmetric_eigenvalues(t).into_iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if (top - prev).abs() <= rtol * top || nb <= 1e-14 * top {
            return 1.0 / top;
        }
        prev = top;
        beta.push(nb);
        basis.push(w.into_iter().map(|x| x / nb).collect());
    }
    1.0 / prev
}

/// Spacing ratios `hy / hx` probed for the disc operator. Near-resonances
/// make the smallest singular value at a single ratio erratic in `n`.
pub const DISC_ASPECTS: [f64; 9] = [0.601, 0.6385, 0.676, 0.7135, 0.751, 0.7885, 0.826, 0.8635, 0.901];

pub fn noninjectivity_demo(square_sizes: &[usize], modes: &[usize], disc_sizes: &[usize]) -> NoninjectivityReport {
    let square = square_sizes
        .iter()
        .flat_map(|&n| modes.iter().map(move |&m| square_kernel(n, m)))
        .collect();
    let disc = disc_sizes
        .iter()
        .map(|&n| {
            let sv: Vec<f64> = DISC_ASPECTS
                .iter()
                .map(|&a| {
                    let (rows, w) = disc_operator(n, a);
                    smallest_abs_eigenvalue(&rows, w, 1e-10)
                })
                .collect();
            let (rows, w) = disc_operator(n, 1.0);
            DiscRow {
                n,
                sigma_min: sv.iter().cloned().fold(f64::INFINITY, f64::min),
                sigma_median: median(sv),
                singular_at_unit_aspect: BandLu::factor(&rows, w).is_none(),
            }
        })
        .collect();
    NoninjectivityReport { square, disc }
}

/// Random band-limited conductivity on the annulus with values in `[0.5, 2]`.
pub fn random_annulus_sigma(grid: &Grid2D, rng: &mut impl Rng) -> ScalarField {
    let mut coef = Vec::new();
    for m in 0..=3 {
        for q in 1..=2 {
            coef.push((m as f64, q as f64, rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        }
    }
    let raw = ScalarField::from_fn(grid, |p| {
        let (r, phi) = (p[0].hypot(p[1]), p[1].atan2(p[0]));
        let t = (r - 0.5) / 0.5;
        coef.iter()
            .map(|&(m, q, a, b)| (a * (m * phi).cos() + b * (m * phi).sin()) * (q * PI * t).sin())
            .sum()
    });
    let peak = raw.max_abs(None).max(1e-300);
    let target = rng.random_range(0.3..1.0) * LN_2;
    raw.map(|v| (v * target / peak).exp())
}

/// Cells crossed by the level `c` of `u` form one 4-connected set, with
/// periodic wrap in the angular direction.
pub fn level_set_connected(u: &ScalarField, c: f64) -> bool {
    let g = &u.grid;
    let nj = if g.periodic_y() { g.ny } else { g.ny - 1 };
    let ni = g.nx - 1;
    let cell = |i: usize, j: usize| {
        let jn = (j + 1) % g.ny;
        let v = [u.at(i, j), u.at(i + 1, j), u.at(i, jn), u.at(i + 1, jn)];
        let (lo, hi) = v
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        lo <= c && c <= hi
    };
    let mut hit = vec![false; ni * nj];
    for j in 0..nj {
        for i in 0..ni {
            hit[j * ni + i] = cell(i, j);
        }
    }
    let Some(start) = hit.iter().position(|&b| b) else {
        return false;
    };
    let mut seen = vec![false; hit.len()];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    let mut reached = 1;
    while let Some(k) = queue.pop_front() {
        let (i, j) = (k % ni, k / ni);
        let mut nb = Vec::with_capacity(4);
        if i > 0 {
            nb.push(k - 1);
        }
        if i + 1 < ni {
            nb.push(k + 1);
        }
        if j > 0 {
            nb.push(k - ni);
        } else if g.periodic_y() {
            nb.push((nj - 1) * ni + i);
        }
        if j + 1 < nj {
            nb.push(k + ni);
        } else if g.periodic_y() {
            nb.push(i);
        }
        for m in nb {
            if hit[m] && !seen[m] {
                seen[m] = true;
                reached += 1;
                queue.push_back(m);
            }
        }
    }
    reached == hit.iter().filter(|&&b| b).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusRow {
    pub sample: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub min_grad: f64,
    pub level_sets_connected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnulusReport {
    /// `1 / (r_outer ln(r_outer / r_inner))`, the floor for constant `sigma`.
    pub analytic_floor: f64,
    /// Measured floor for constant `sigma` on the same grid.
    pub constant_floor: f64,
    pub rows: Vec<AnnulusRow>,
}

fn min_gradient(domain: &Domain, u: &ScalarField) -> f64 {
    gradient(domain, u).norm_sq().into_iter().fold(f64::INFINITY, f64::min).sqrt()
}

/// Gradient floor and level-set topology of the annulus potential with
/// `f = 0` on the outer circle and `1` on the inner one, for random conductivities in `[0.5, 2]`.
pub fn annulus_gradient_floor(samples: usize, seed: u64, nr: usize, nphi: usize) -> Result<AnnulusReport> {
    let domain = build_domain(
        &Shape::Annulus {
            r_inner: 0.5,
            r_outer: 1.0,
        },
        nr,
        nphi,
    )?;
    let f = boundary_values(&domain, |p| if p[0].hypot(p[1]) < 0.75 { 1.0 } else { 0.0 });
    let opts = EllipticOptions::default();
    let u1 = solve_elliptic(&domain, &ScalarField::constant(&domain.grid, 1.0), &f, &opts)?;
    let rows = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let sigma = random_annulus_sigma(&domain.grid, &mut rng);
            let u = solve_elliptic(&domain, &sigma, &f, &opts)?;
            let connected = (1..10).all(|l| level_set_connected(&u, l as f64 / 10.0));
            Ok(AnnulusRow {
                sample: k,
                sigma_min: sigma.values.iter().cloned().fold(f64::INFINITY, f64::min),
                sigma_max: sigma.values.iter().cloned().fold(0.0, f64::max),
                min_grad: min_gradient(&domain, &u),
                level_sets_connected: connected,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnnulusReport {
        analytic_floor: 1.0 / LN_2,
        constant_floor: min_gradient(&domain, &u1),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub train: usize,
    pub test: usize,
    /// Half the smallest training ratio `E / (theta^2 |dv|^2)`.
    pub constant: f64,
    pub min_test_ratio: f64,
    pub violations: usize,
    /// Samples with negative energy (there should be none).
    pub negative: usize,
}

/// Random metrics (`alpha, beta` in `[0.5, 2]`), timelike unit `nu2` with
/// margin `theta` in `[0.05, 0.5]` and gradients `|dv|` in `[0.1, 10]`:
/// fit `E >= C theta^2 |dv|^2` on one set and count violations on another.
pub fn energy_bound_study(train: usize, test: usize, seed: u64) -> EnergyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| loop {
        let a = rng.random_range(0.0..2.0 * PI);
        let e = [a.cos(), a.sin()];
        let alpha = rng.random_range(0.5..2.0);
        let beta = rng.random_range(0.5..2.0);
        let b = rng.random_range(0.0..2.0 * PI);
        let nu = [b.cos(), b.sin()];
        let theta = margin_at(e, beta, nu);
        if !(0.05..=0.5).contains(&theta) {
            continue;
        }
        let c = rng.random_range(0.0..2.0 * PI);
        let mag = (rng.random_range(0.1f64.ln()..10f64.ln())).exp();
        let dv = [mag * c.cos(), mag * c.sin()];
        let en = energy_at(e, alpha, beta, dv, nu);
        return (en, en / (theta * theta * mag * mag));
    };
    let training: Vec<(f64, f64)> = (0..train).map(|_| draw(&mut rng)).collect();
    let testing: Vec<(f64, f64)> = (0..test).map(|_| draw(&mut rng)).collect();
    let constant = 0.5 * training.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    EnergyReport {
        train,
        test,
        constant,
        min_test_ratio: testing.iter().map(|t| t.1).fold(f64::INFINITY, f64::min),
        violations: testing.iter().filter(|t| t.1 < constant).count(),
        negative: training.iter().chain(&testing).filter(|t| t.0 < 0.0).count(),
    }
}
