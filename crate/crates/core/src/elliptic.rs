//! Forward conductivity problem `-div(sigma grad u) = 0` with Dirichlet data.

use crate::error::{invalid, precondition, Error, Result};
use crate::field::{diff, ScalarField, VectorField};
use crate::geometry::{Chart, Domain, Vertex};
use crate::linalg::{pcg, BandedCholesky, CsrMatrix, Jacobi, Preconditioner, SolveStats};
use serde::{Deserialize, Serialize};

/// Linear solver used for the SPD system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Jacobi-preconditioned conjugate gradients, falling back to the
    /// direct solver if it stalls.
    Pcg,
    /// Banded Cholesky factorisation.
    Direct,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EllipticOptions {
    pub sigma_min: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub solver: LinearSolver,
}

impl Default for EllipticOptions {
    fn default() -> Self {
        EllipticOptions {
            sigma_min: 0.1,
            tol: 1e-12,
            max_iter: 20_000,
            solver: LinearSolver::Pcg,
        }
    }
}

/// Paired Dirichlet and Neumann data on one boundary component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CauchyTrace {
    pub component: usize,
    pub f: Vec<f64>,
    /// Outward normal derivative.
    pub j: Vec<f64>,
    /// `sigma * j`.
    pub flux: Vec<f64>,
}

/// A solved forward problem.
#[derive(Clone, Debug)]
pub struct Solution {
    pub u: ScalarField,
    pub stats: SolveStats,
}

pub(crate) fn harmonic_mean(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

fn check_sigma(domain: &Domain, sigma: &ScalarField, sigma_min: f64) -> Result<()> {
    if sigma.grid != domain.grid {
        return invalid("conductivity grid does not match the domain grid");
    }
    for (k, &s) in sigma.values.iter().enumerate() {
        if !s.is_finite() || s < sigma_min {
            let (i, j) = domain.grid.ij(k);
            return precondition(format!("sigma = {s} at node ({i}, {j}) is below sigma_min = {sigma_min}"));
        }
    }
    Ok(())
}

/// Conductance of every graph edge for a given conductivity.
pub(crate) fn conductances(domain: &Domain, sigma: &[f64]) -> Vec<f64> {
    let n = domain.grid.len();
    let node_sigma = |id: usize| -> f64 {
        if id < n {
            sigma[id]
        } else {
            match domain.vertex(id) {
                Vertex::Terminal(t) => domain.terminal_sigma(&domain.terminals[t], sigma),
                Vertex::Unknown(_) => unreachable!("cut terminals are never unknowns"),
            }
        }
    };
    domain
        .edges
        .iter()
        .map(|e| e.geom * harmonic_mean(node_sigma(e.a), node_sigma(e.b)))
        .collect()
}

/// Sparsity pattern of the system matrix with the storage slots touched by
/// each edge, so that repeated assemblies skip the sort.
#[derive(Clone, Debug)]
pub(crate) struct Pattern {
    empty: CsrMatrix,
    slots: Vec<EdgeSlots>,
}

#[derive(Clone, Copy, Debug)]
enum EdgeSlots {
    Inner { pp: usize, qq: usize, pq: usize, qp: usize },
    Boundary { pp: usize, p: usize, t: usize },
    None,
}

impl Pattern {
    pub fn new(domain: &Domain) -> Self {
        let nu = domain.n_unknowns();
        let mut trip = Vec::with_capacity(5 * nu);
        for e in &domain.edges {
            match (domain.vertex(e.a), domain.vertex(e.b)) {
                (Vertex::Unknown(p), Vertex::Unknown(q)) => {
                    trip.extend([(p, p, 0.0), (q, q, 0.0), (p, q, 0.0), (q, p, 0.0)]);
                }
                (Vertex::Unknown(p), Vertex::Terminal(_)) | (Vertex::Terminal(_), Vertex::Unknown(p)) => {
                    trip.push((p, p, 0.0));
                }
                _ => {}
            }
        }
        let empty = CsrMatrix::from_triplets(nu, trip);
        let slot = |r: usize, c: usize| -> usize {
            let row = &empty.indices[empty.indptr[r]..empty.indptr[r + 1]];
            empty.indptr[r] + row.binary_search(&c).expect("entry present in pattern")
        };
        let slots = domain
            .edges
            .iter()
            .map(|e| match (domain.vertex(e.a), domain.vertex(e.b)) {
                (Vertex::Unknown(p), Vertex::Unknown(q)) => EdgeSlots::Inner {
                    pp: slot(p, p),
                    qq: slot(q, q),
                    pq: slot(p, q),
                    qp: slot(q, p),
                },
                (Vertex::Unknown(p), Vertex::Terminal(t)) | (Vertex::Terminal(t), Vertex::Unknown(p)) => {
                    EdgeSlots::Boundary { pp: slot(p, p), p, t }
                }
                _ => EdgeSlots::None,
            })
            .collect();
        Pattern { empty, slots }
    }

    /// Matrix for the given edge conductances.
    pub fn matrix(&self, cond: &[f64]) -> CsrMatrix {
        let mut a = self.empty.clone();
        for (s, &c) in self.slots.iter().zip(cond) {
            match *s {
                EdgeSlots::Inner { pp, qq, pq, qp } => {
                    a.data[pp] += c;
                    a.data[qq] += c;
                    a.data[pq] -= c;
                    a.data[qp] -= c;
                }
                EdgeSlots::Boundary { pp, .. } => a.data[pp] += c,
                EdgeSlots::None => {}
            }
        }
        a
    }

    /// Right-hand side for terminal values `tvals`.
    pub fn rhs(&self, cond: &[f64], tvals: &[f64]) -> Vec<f64> {
        let mut b = vec![0.0; self.empty.n];
        for (s, &c) in self.slots.iter().zip(cond) {
            if let EdgeSlots::Boundary { p, t, .. } = *s {
                b[p] += c * tvals[t];
            }
        }
        b
    }
}

/// Assemble `A u = b` over the unknown nodes.
pub(crate) fn assemble(domain: &Domain, cond: &[f64], tvals: &[f64]) -> (CsrMatrix, Vec<f64>) {
    let pat = Pattern::new(domain);
    (pat.matrix(cond), pat.rhs(cond, tvals))
}

/// Value of every graph vertex: unknowns from `x`, terminals from `tvals`.
pub(crate) fn vertex_values<'a>(domain: &'a Domain, x: &'a [f64], tvals: &'a [f64]) -> impl Fn(usize) -> f64 + 'a {
    move |id| match domain.vertex(id) {
        Vertex::Unknown(p) => x[p],
        Vertex::Terminal(t) => tvals[t],
    }
}

/// Conservative boundary reaction `sum_edges c (u_t - u_other)` at each terminal.
/// It equals the outward flux `sigma du/dnu` integrated over the terminal's
/// share of the boundary.
pub(crate) fn reactions(domain: &Domain, cond: &[f64], x: &[f64], tvals: &[f64]) -> Vec<f64> {
    let val = vertex_values(domain, x, tvals);
    let mut r = vec![0.0; domain.terminals.len()];
    for (e, &c) in domain.edges.iter().zip(cond) {
        let d = c * (val(e.a) - val(e.b));
        if let Vertex::Terminal(t) = domain.vertex(e.a) {
            r[t] += d;
        }
        if let Vertex::Terminal(t) = domain.vertex(e.b) {
            r[t] -= d;
        }
    }
    r
}

/// Unknown vector gathered from a full-grid field.
pub(crate) fn gather(domain: &Domain, u: &ScalarField) -> Vec<f64> {
    domain.unknowns.iter().map(|&id| u.values[id]).collect()
}

/// Full-grid field from the unknown vector; boundary nodes take their
/// Dirichlet values and nodes outside the domain are zero.
pub(crate) fn scatter(domain: &Domain, x: &[f64], f: &[f64]) -> ScalarField {
    let mut values = vec![0.0; domain.grid.len()];
    for (k, &id) in domain.unknowns.iter().enumerate() {
        values[id] = x[k];
    }
    for (id, s) in domain.node_sample.iter().enumerate() {
        if let Some(s) = s {
            values[id] = f[*s];
        }
    }
    ScalarField {
        grid: domain.grid.clone(),
        values,
    }
}

pub(crate) fn solve_system(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    opts: &EllipticOptions,
    pre: Option<&dyn Preconditioner>,
) -> Result<SolveStats> {
    match opts.solver {
        LinearSolver::Direct => {
            let chol = BandedCholesky::factor(a)?;
            x.copy_from_slice(b);
            chol.solve_in_place(x);
            Ok(SolveStats {
                iterations: 0,
                relative_residual: relative_residual(a, b, x),
            })
        }
        LinearSolver::Pcg => {
            let jac;
            let m: &dyn Preconditioner = match pre {
                Some(p) => p,
                None => {
                    jac = Jacobi::new(a);
                    &jac
                }
            };
            match pcg(a, b, x, m, opts.tol, opts.max_iter) {
                Ok(s) => Ok(s),
                Err(Error::NotConverged { iterations, residual }) => {
                    log::warn!("pcg stalled after {iterations} iterations (residual {residual:e}); using direct solver");
                    let direct = EllipticOptions {
                        solver: LinearSolver::Direct,
                        ..*opts
                    };
                    let st = solve_system(a, b, x, &direct, None)?;
                    if st.relative_residual > opts.tol.max(1e-10) {
                        return Err(Error::NotConverged {
                            iterations,
                            residual: st.relative_residual,
                        });
                    }
                    Ok(st)
                }
                Err(e) => Err(e),
            }
        }
    }
}

fn relative_residual(a: &CsrMatrix, b: &[f64], x: &[f64]) -> f64 {
    let mut r = vec![0.0; a.n];
    a.matvec(x, &mut r);
    let num: f64 = r.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
    let den: f64 = b.iter().map(|q| q * q).sum();
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

fn check_boundary(domain: &Domain, f: &[f64]) -> Result<()> {
    if f.len() != domain.samples.len() {
        return invalid(format!(
            "boundary data has {} values, domain has {} samples",
            f.len(),
            domain.samples.len()
        ));
    }
    if let Some(k) = f.iter().position(|v| !v.is_finite()) {
        return invalid(format!("boundary value at sample {k} is not finite"));
    }
    Ok(())
}

/// Solve the forward problem and return the full-grid potential.
pub fn solve_elliptic(domain: &Domain, sigma: &ScalarField, f: &[f64], opts: &EllipticOptions) -> Result<ScalarField> {
    Ok(solve_elliptic_with_stats(domain, sigma, f, opts)?.u)
}

pub fn solve_elliptic_with_stats(domain: &Domain, sigma: &ScalarField, f: &[f64], opts: &EllipticOptions) -> Result<Solution> {
    check_sigma(domain, sigma, opts.sigma_min)?;
    check_boundary(domain, f)?;
    let cond = conductances(domain, &sigma.values);
    let tvals = domain.terminal_values(f);
    let (a, b) = assemble(domain, &cond, &tvals);
    let mut x = vec![0.0; a.n];
    let stats = solve_system(&a, &b, &mut x, opts, None)?;
    Ok(Solution {
        u: scatter(domain, &x, f),
        stats,
    })
}

/// Net conservative boundary flux `sum sigma du/dnu dS` of a solved potential.
pub fn flux_balance(domain: &Domain, sigma: &ScalarField, u: &ScalarField, f: &[f64]) -> Result<f64> {
    check_boundary(domain, f)?;
    let cond = conductances(domain, &sigma.values);
    let r = reactions(domain, &cond, &gather(domain, u), &domain.terminal_values(f));
    Ok(r.iter().sum())
}

/// Domain-aware gradient: central differences where both neighbours lie in
/// the closed domain, second-order one-sided differences otherwise.
pub fn gradient(domain: &Domain, u: &ScalarField) -> VectorField {
    let g = &domain.grid;
    let inside = &domain.inside;
    let mut out = VectorField::zeros(g);
    for j in 0..g.ny {
        for i in 0..g.nx {
            let k = g.idx(i, j);
            if !inside[k] {
                continue;
            }
            let ok = |ii: i64, jj: i64| -> bool {
                if ii < 0 || ii >= g.nx as i64 {
                    return false;
                }
                let jj = if g.periodic_y() {
                    jj.rem_euclid(g.ny as i64)
                } else if jj < 0 || jj >= g.ny as i64 {
                    return false;
                } else {
                    jj
                };
                inside[g.idx(ii as usize, jj as usize)]
            };
            let val = |ii: i64, jj: i64| -> f64 {
                let jj = if g.periodic_y() { jj.rem_euclid(g.ny as i64) } else { jj };
                u.values[g.idx(ii as usize, jj as usize)]
            };
            let (ii, jj) = (i as i64, j as i64);
            let dx = axis_derivative(|s| ok(ii + s, jj), |s| val(ii + s, jj), g.hx);
            let dy = axis_derivative(|s| ok(ii, jj + s), |s| val(ii, jj + s), g.hy);
            out.values[k] = match g.chart {
                Chart::Cartesian => [dx, dy],
                Chart::Polar => {
                    let [r, phi] = g.coords(i, j);
                    let (c, s) = (phi.cos(), phi.sin());
                    [dx * c - dy / r * s, dx * s + dy / r * c]
                }
            };
        }
    }
    out
}

pub(crate) fn axis_derivative(ok: impl Fn(i64) -> bool, v: impl Fn(i64) -> f64, h: f64) -> f64 {
    match (ok(-1), ok(1)) {
        (true, true) => (v(1) - v(-1)) / (2.0 * h),
        (false, true) if ok(2) => (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h),
        (false, true) => (v(1) - v(0)) / h,
        (true, false) if ok(-2) => (3.0 * v(0) - 4.0 * v(-1) + v(-2)) / (2.0 * h),
        (true, false) => (v(0) - v(-1)) / h,
        (false, false) => 0.0,
    }
}

/// `H = sigma |grad u|^2` on the closed domain, zero outside.
pub fn internal_functional(domain: &Domain, sigma: &ScalarField, u: &ScalarField) -> ScalarField {
    internal_functional_from_gradient(domain, sigma, &gradient(domain, u))
}

pub fn internal_functional_from_gradient(domain: &Domain, sigma: &ScalarField, grad: &VectorField) -> ScalarField {
    let values = (0..domain.grid.len())
        .map(|k| {
            if domain.inside[k] {
                let g = grad.values[k];
                sigma.values[k] * (g[0] * g[0] + g[1] * g[1])
            } else {
                0.0
            }
        })
        .collect();
    ScalarField {
        grid: domain.grid.clone(),
        values,
    }
}

/// Dirichlet and Neumann traces of a solved potential on every component.
pub fn neumann_trace(domain: &Domain, sigma: &ScalarField, u: &ScalarField, f: &[f64]) -> Result<Vec<CauchyTrace>> {
    check_boundary(domain, f)?;
    let g = &domain.grid;
    let mut j = vec![0.0; domain.samples.len()];
    let mut s_at = vec![0.0; domain.samples.len()];
    if domain.grid_aligned() {
        for (id, s) in domain.node_sample.iter().enumerate() {
            let Some(s) = *s else { continue };
            let (i, jj) = g.ij(id);
            s_at[s] = sigma.values[id];
            let nu = domain.samples[s].normal;
            j[s] = match g.chart {
                Chart::Cartesian => {
                    let dx = diff(|m| u.at(m, jj), i, g.nx, g.hx, false);
                    let dy = diff(|m| u.at(i, m), jj, g.ny, g.hy, false);
                    nu[0] * dx + nu[1] * dy
                }
                Chart::Polar => {
                    let dr = diff(|m| u.at(m, jj), i, g.nx, g.hx, false);
                    let sign = if i == 0 { -1.0 } else { 1.0 };
                    sign * dr
                }
            };
        }
    } else {
        let h = g.hx.max(g.hy);
        let delta = 3.0 * h;
        for (s, smp) in domain.samples.iter().enumerate() {
            let p = smp.position;
            let nu = smp.normal;
            let u1 = biquadratic(domain, u, [p[0] - delta * nu[0], p[1] - delta * nu[1]]);
            let u2 = biquadratic(domain, u, [p[0] - 2.0 * delta * nu[0], p[1] - 2.0 * delta * nu[1]]);
            j[s] = (3.0 * f[s] - 4.0 * u1 + u2) / (2.0 * delta);
            s_at[s] = sigma.interpolate(p);
        }
    }
    Ok(domain
        .components
        .iter()
        .enumerate()
        .map(|(c, comp)| {
            let r = comp.start..comp.start + comp.len;
            CauchyTrace {
                component: c,
                f: f[r.clone()].to_vec(),
                j: j[r.clone()].to_vec(),
                flux: r.map(|k| s_at[k] * j[k]).collect(),
            }
        })
        .collect())
}

/// Biquadratic interpolation from a 3x3 block of interior nodes, shifted
/// towards the centre until every stencil node is interior.
fn biquadratic(domain: &Domain, u: &ScalarField, p: [f64; 2]) -> f64 {
    let g = &domain.grid;
    let fx = (p[0] - g.origin[0]) / g.hx;
    let fy = (p[1] - g.origin[1]) / g.hy;
    let mut ci = fx.round() as i64;
    let mut cj = fy.round() as i64;
    let (mid_i, mid_j) = ((g.nx / 2) as i64, (g.ny / 2) as i64);
    let all_in = |ci: i64, cj: i64| {
        (-1..=1).all(|a| {
            (-1..=1).all(|b| {
                let (ii, jj) = (ci + a, cj + b);
                ii >= 0 && jj >= 0 && ii < g.nx as i64 && jj < g.ny as i64 && domain.interior[g.idx(ii as usize, jj as usize)]
            })
        })
    };
    for _ in 0..g.nx.max(g.ny) {
        if all_in(ci, cj) {
            break;
        }
        ci += (mid_i - ci).signum();
        cj += (mid_j - cj).signum();
    }
    let (tx, ty) = (fx - ci as f64, fy - cj as f64);
    let w = |t: f64| [0.5 * t * (t - 1.0), 1.0 - t * t, 0.5 * t * (t + 1.0)];
    let (wx, wy) = (w(tx), w(ty));
    let mut s = 0.0;
    for (b, wyb) in wy.iter().enumerate() {
        for (a, wxa) in wx.iter().enumerate() {
            s += wxa * wyb * u.at((ci + a as i64 - 1) as usize, (cj + b as i64 - 1) as usize);
        }
    }
    s
}

/// Dirichlet data sampled from an analytic function at the boundary samples.
pub fn boundary_values(domain: &Domain, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
    domain.samples.iter().map(|s| f(s.position)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, Shape};
    use approx::assert_relative_eq;

    fn unit_square(n: usize) -> Domain {
        build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, n, n).unwrap()
    }

    #[test]
    fn linear_data_is_reproduced_exactly() {
        let d = unit_square(24);
        let sigma = ScalarField::constant(&d.grid, 1.0);
        let f = boundary_values(&d, |p| p[0]);
        let u = solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()).unwrap();
        for k in 0..d.grid.len() {
            assert_relative_eq!(u.values[k], d.grid.position_of(k)[0], epsilon = 1e-10);
        }
        let h = internal_functional(&d, &sigma, &u);
        assert!(h.values.iter().all(|v| (v - 1.0).abs() < 1e-9));
        let tr = neumann_trace(&d, &sigma, &u, &f).unwrap();
        for (s, jv) in d.samples.iter().zip(&tr[0].j) {
            assert_relative_eq!(*jv, s.normal[0], epsilon = 1e-9);
        }
    }

    #[test]
    fn constant_data_has_zero_trace() {
        let d = unit_square(16);
        let sigma = ScalarField::from_fn(&d.grid, |p| 1.0 + p[0] * p[1]);
        let f = vec![2.5; d.samples.len()];
        let u = solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()).unwrap();
        let tr = neumann_trace(&d, &sigma, &u, &f).unwrap();
        assert!(tr[0].j.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn conductivity_floor_is_enforced() {
        let d = unit_square(16);
        let sigma = ScalarField::constant(&d.grid, 0.05);
        let f = vec![0.0; d.samples.len()];
        assert!(matches!(
            solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()),
            Err(Error::Precondition(_))
        ));
        assert!(solve_elliptic(&d, &ScalarField::constant(&d.grid, 1.0), &f[1..], &EllipticOptions::default()).is_err());
    }

    #[test]
    fn direct_and_iterative_agree() {
        let d = build_domain(&Shape::Disc { r: 1.0 }, 40, 40).unwrap();
        let sigma = ScalarField::from_fn(&d.grid, |p| 1.0 + 0.5 * p[0] * p[0]);
        let f = boundary_values(&d, |p| p[0] * p[1] + p[1]);
        let u1 = solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()).unwrap();
        let u2 = solve_elliptic(
            &d,
            &sigma,
            &f,
            &EllipticOptions {
                solver: LinearSolver::Direct,
                ..Default::default()
            },
        )
        .unwrap();
        for (a, b) in u1.values.iter().zip(&u2.values) {
            assert_relative_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn gradient_of_sine_is_second_order() {
        let err = |n: usize| {
            let d = unit_square(n);
            let u = ScalarField::from_fn(&d.grid, |p| (std::f64::consts::PI * p[0]).sin());
            let g = gradient(&d, &u);
            (0..d.grid.len())
                .map(|k| {
                    let x = d.grid.position_of(k)[0];
                    (g.values[k][0] - std::f64::consts::PI * (std::f64::consts::PI * x).cos()).abs()
                })
                .fold(0.0, f64::max)
        };
        let order = (err(32) / err(64)).log2();
        assert!(order > 1.8, "order {order}");
    }

    #[test]
    fn harmonic_disc_trace() {
        // u = x1 on the unit disc: du/dnu = cos(theta).
        let d = build_domain(&Shape::Disc { r: 1.0 }, 64, 64).unwrap();
        let sigma = ScalarField::constant(&d.grid, 1.0);
        let f = boundary_values(&d, |p| p[0]);
        let u = solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()).unwrap();
        let tr = neumann_trace(&d, &sigma, &u, &f).unwrap();
        for (s, jv) in d.samples.iter().zip(&tr[0].j) {
            assert!((jv - s.normal[0]).abs() < 1e-2, "{jv} vs {}", s.normal[0]);
        }
        assert!(flux_balance(&d, &sigma, &u, &f).unwrap().abs() < 1e-8);
    }
}
