//! Lorentzian metrics induced by one or two potentials, causal classification
//! of boundary samples, hyperbolicity margins, energies and domains of
//! influence.

use crate::elliptic::{gradient, CauchyTrace};
use crate::error::{invalid, precondition, Result};
use crate::field::{ScalarField, VectorField};
use crate::geometry::{BoundarySample, Chart, Domain, Grid2D};
use crate::march::{Coef, ConeTracker, Direction, MarchFrame};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// 2x2 symmetric tensor `[[xx, xy], [xy, yy]]`.
pub type Mat2 = [[f64; 2]; 2];

/// Default width of the null band.
pub const TOL_NULL: f64 = 1e-3;

/// Time direction `e`, scale `alpha` and speed `beta` of a Lorentzian metric
/// `g = alpha (e e - beta^2 (I - e e))`.
#[derive(Clone, Debug)]
pub struct LorentzDirectionField {
    pub e: VectorField,
    pub alpha: ScalarField,
    pub beta: ScalarField,
    /// Nodes where the metric is defined.
    pub valid: Vec<bool>,
    /// `k = -grad ln H`, produced by the single-potential metric.
    pub k: Option<VectorField>,
}

/// Pointwise metric tensors from `e`, `alpha`, `beta`.
pub fn tensors(e: [f64; 2], alpha: f64, beta: f64) -> (Mat2, Mat2) {
    let ee = [[e[0] * e[0], e[0] * e[1]], [e[0] * e[1], e[1] * e[1]]];
    let b2 = beta * beta;
    let mut g = [[0.0; 2]; 2];
    let mut h = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            let id = if a == b { 1.0 } else { 0.0 };
            g[a][b] = alpha * (ee[a][b] - b2 * (id - ee[a][b]));
            h[a][b] = (ee[a][b] - (id - ee[a][b]) / b2) / alpha;
        }
    }
    (g, h)
}

fn bilinear(m: &Mat2, x: [f64; 2], y: [f64; 2]) -> f64 {
    x[0] * (m[0][0] * y[0] + m[0][1] * y[1]) + x[1] * (m[1][0] * y[0] + m[1][1] * y[1])
}

fn apply(m: &Mat2, x: [f64; 2]) -> [f64; 2] {
    [m[0][0] * x[0] + m[0][1] * x[1], m[1][0] * x[0] + m[1][1] * x[1]]
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

impl LorentzDirectionField {
    pub fn grid(&self) -> &Grid2D {
        &self.e.grid
    }

    /// `g` at node `n`.
    pub fn g(&self, n: usize) -> Mat2 {
        tensors(self.e.values[n], self.alpha.values[n], self.beta.values[n]).0
    }

    /// `h = g^{-1}` at node `n`.
    pub fn h(&self, n: usize) -> Mat2 {
        tensors(self.e.values[n], self.alpha.values[n], self.beta.values[n]).1
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Metric of a pair of gradients at one point: `(e, alpha, beta)`, or `None`
/// outside the hyperbolic regime `grad u . grad ut > 0`.
pub fn pair_at(gu: [f64; 2], gut: [f64; 2], h: f64) -> Option<([f64; 2], f64, f64)> {
    let s = [gu[0] + gut[0], gu[1] + gut[1]];
    let (nu, nut, ns) = (
        gu[0] * gu[0] + gu[1] * gu[1],
        gut[0] * gut[0] + gut[1] * gut[1],
        s[0] * s[0] + s[1] * s[1],
    );
    let gap = ns - (nu + nut);
    if !(gap > 1e-14 * (nu + nut)) || !(h > 0.0) {
        return None;
    }
    let sn = ns.sqrt();
    let beta = ((nu + nut) / gap).sqrt();
    let alpha = h / (nu * nut) * gap;
    Some(([s[0] / sn, s[1] / sn], alpha, beta))
}

/// Single-potential metric `g = 2 e e - I` with `e = grad u / |grad u|`,
/// together with `k = -grad ln H`. Nodes with `|grad u| < g_min` or `H <= 0`
/// are marked invalid.
pub fn metric_single(domain: &Domain, u: &ScalarField, h: &ScalarField, g_min: f64) -> LorentzDirectionField {
    let grid = &domain.grid;
    let grad = gradient(domain, u);
    let lnh = h.map(|v| if v > 0.0 { v.ln() } else { 0.0 });
    let glnh = gradient(domain, &lnh);
    let n = grid.len();
    let mut e = VectorField::zeros(grid);
    let mut valid = vec![false; n];
    let mut k = VectorField::zeros(grid);
    for i in 0..n {
        if !domain.inside[i] {
            continue;
        }
        let g = grad.values[i];
        let gn = norm(g);
        k.values[i] = [-glnh.values[i][0], -glnh.values[i][1]];
        if gn >= g_min && gn > 0.0 && h.values[i] > 0.0 {
            e.values[i] = [g[0] / gn, g[1] / gn];
            valid[i] = true;
        }
    }
    LorentzDirectionField {
        e,
        alpha: ScalarField::constant(grid, 1.0),
        beta: ScalarField::constant(grid, 1.0),
        valid,
        k: Some(k),
    }
}

/// Pair metric of two potentials sharing the internal functional `H`.
pub fn metric_pair(domain: &Domain, u: &ScalarField, ut: &ScalarField, h: &ScalarField) -> LorentzDirectionField {
    let grid = &domain.grid;
    let (gu, gut) = (gradient(domain, u), gradient(domain, ut));
    let n = grid.len();
    let mut e = VectorField::zeros(grid);
    let mut alpha = ScalarField::constant(grid, 1.0);
    let mut beta = ScalarField::constant(grid, 1.0);
    let mut valid = vec![false; n];
    for i in 0..n {
        if !domain.inside[i] {
            continue;
        }
        if let Some((ev, a, b)) = pair_at(gu.values[i], gut.values[i], h.values[i]) {
            e.values[i] = ev;
            alpha.values[i] = a;
            beta.values[i] = b;
            valid[i] = true;
        }
    }
    LorentzDirectionField {
        e,
        alpha,
        beta,
        valid,
        k: None,
    }
}

/// Causal character of a boundary normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Causal {
    Spacelike,
    Timelike,
    Null,
}

impl Causal {
    pub fn as_str(self) -> &'static str {
        match self {
            Causal::Spacelike => "spacelike",
            Causal::Timelike => "timelike",
            Causal::Null => "null",
        }
    }
}

/// Per-sample classification with margin `|nu . e|^2 - 1/(1 + beta^2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryClassification {
    pub tags: Vec<Causal>,
    pub margins: Vec<f64>,
    pub tol_null: f64,
}

impl BoundaryClassification {
    pub fn spacelike_fraction(&self) -> f64 {
        self.tags.iter().filter(|&&t| t == Causal::Spacelike).count() as f64 / self.tags.len().max(1) as f64
    }

    /// CSV export: `component,arclength,tag,margin`.
    pub fn write_csv(&self, domain: &Domain, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "component,arclength,tag,margin")?;
        for (s, smp) in domain.samples.iter().enumerate() {
            writeln!(
                w,
                "{},{:.12e},{},{:.12e}",
                smp.component,
                smp.arclength,
                self.tags[s].as_str(),
                self.margins[s]
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tag(margin: f64, tol: f64) -> Causal {
    if margin.abs() <= tol {
        Causal::Null
    } else if margin > tol {
        Causal::Spacelike
    } else {
        Causal::Timelike
    }
}

/// Classify from time directions and speeds given per sample.
pub fn classify_samples(domain: &Domain, e: &[[f64; 2]], beta: &[f64], tol_null: f64) -> BoundaryClassification {
    let margins: Vec<f64> = domain
        .samples
        .iter()
        .enumerate()
        .map(|(s, smp)| {
            let d = smp.normal[0] * e[s][0] + smp.normal[1] * e[s][1];
            if e[s] == [0.0, 0.0] || !beta[s].is_finite() {
                f64::NAN
            } else {
                d * d - 1.0 / (1.0 + beta[s] * beta[s])
            }
        })
        .collect();
    let tags = margins
        .iter()
        .map(|&m| if m.is_nan() { Causal::Timelike } else { tag(m, tol_null) })
        .collect();
    BoundaryClassification { tags, margins, tol_null }
}

/// Metric direction and speed at every boundary sample, interpolated from
/// the valid nodes of the surrounding cell (nearest valid node as fallback).
pub fn sample_metric(domain: &Domain, metric: &LorentzDirectionField) -> (Vec<[f64; 2]>, Vec<f64>) {
    let g = &domain.grid;
    let mut es = Vec::with_capacity(domain.samples.len());
    let mut bs = Vec::with_capacity(domain.samples.len());
    for smp in &domain.samples {
        let c = chart_point(g, smp.position);
        let fx = ((c[0] - g.origin[0]) / g.hx).clamp(0.0, (g.nx - 1) as f64);
        let fy = (c[1] - g.origin[1]) / g.hy;
        let fy = if g.periodic_y() {
            fy.rem_euclid(g.ny as f64)
        } else {
            fy.clamp(0.0, (g.ny - 1) as f64)
        };
        let (i0, j0) = ((fx.floor() as usize).min(g.nx - 1), (fy.floor() as usize).min(g.ny - 1));
        let (tx, ty) = (fx - i0 as f64, fy - j0 as f64);
        let mut acc = ([0.0, 0.0], 0.0, 0.0);
        for (di, wx) in [(0, 1.0 - tx), (1, tx)] {
            for (dj, wy) in [(0, 1.0 - ty), (1, ty)] {
                let i = (i0 + di).min(g.nx - 1);
                let j = if g.periodic_y() {
                    (j0 + dj) % g.ny
                } else {
                    (j0 + dj).min(g.ny - 1)
                };
                let n = g.idx(i, j);
                let w = wx * wy;
                if metric.valid[n] && w > 1e-12 {
                    add(&mut acc, metric, n, w);
                }
            }
        }
        if acc.2 == 0.0 {
            // Nearest valid node within two cells.
            let mut best: Option<(f64, usize)> = None;
            for dj in -2i64..=3 {
                for di in -2i64..=3 {
                    let (i, j) = (i0 as i64 + di, j0 as i64 + dj);
                    if i < 0 || i >= g.nx as i64 {
                        continue;
                    }
                    let j = if g.periodic_y() {
                        j.rem_euclid(g.ny as i64)
                    } else if j < 0 || j >= g.ny as i64 {
                        continue;
                    } else {
                        j
                    };
                    let n = g.idx(i as usize, j as usize);
                    if metric.valid[n] {
                        let p = g.position_of(n);
                        let d = (p[0] - smp.position[0]).hypot(p[1] - smp.position[1]);
                        if best.is_none_or(|b| d < b.0) {
                            best = Some((d, n));
                        }
                    }
                }
            }
            if let Some((_, n)) = best {
                add(&mut acc, metric, n, 1.0);
            }
        }
        let (ev, bsum, w) = acc;
        let en = norm(ev);
        if w > 0.0 && en > 0.0 {
            es.push([ev[0] / en, ev[1] / en]);
            bs.push(bsum / w);
        } else {
            es.push([0.0, 0.0]);
            bs.push(f64::NAN);
        }
    }
    (es, bs)
}

fn add(acc: &mut ([f64; 2], f64, f64), metric: &LorentzDirectionField, n: usize, w: f64) {
    let e = metric.e.values[n];
    acc.0[0] += w * e[0];
    acc.0[1] += w * e[1];
    acc.1 += w * metric.beta.values[n];
    acc.2 += w;
}

fn chart_point(g: &Grid2D, p: [f64; 2]) -> [f64; 2] {
    match g.chart {
        Chart::Cartesian => p,
        Chart::Polar => [p[0].hypot(p[1]), p[1].atan2(p[0]).rem_euclid(std::f64::consts::TAU)],
    }
}

/// Classify every boundary sample with the default null band.
pub fn classify_boundary(domain: &Domain, metric: &LorentzDirectionField) -> BoundaryClassification {
    classify_boundary_with(domain, metric, TOL_NULL)
}

pub fn classify_boundary_with(domain: &Domain, metric: &LorentzDirectionField, tol_null: f64) -> BoundaryClassification {
    let (e, b) = sample_metric(domain, metric);
    classify_samples(domain, &e, &b, tol_null)
}

/// Time direction at each sample implied by Cauchy data: `grad u = j nu + f_s tau`.
pub fn directions_from_traces(domain: &Domain, traces: &[CauchyTrace]) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0, 0.0]; domain.samples.len()];
    for tr in traces {
        let comp = domain.components[tr.component];
        let n = comp.len;
        for k in 0..n {
            let s = comp.start + k;
            let smp = &domain.samples[s];
            let tau = [-smp.normal[1], smp.normal[0]];
            let fs = tangential(&tr.f, &domain.samples[comp.start..comp.start + n], k, comp.length);
            let g = [tr.j[k] * smp.normal[0] + fs * tau[0], tr.j[k] * smp.normal[1] + fs * tau[1]];
            let gn = norm(g);
            if gn > 0.0 {
                out[s] = [g[0] / gn, g[1] / gn];
            }
        }
    }
    out
}

/// Tangential derivative along a closed component by central differences
/// in arclength.
fn tangential(f: &[f64], smp: &[BoundarySample], k: usize, length: f64) -> f64 {
    let n = f.len();
    let (a, b) = ((k + n - 1) % n, (k + 1) % n);
    let mut ds = smp[b].arclength - smp[a].arclength;
    if ds <= 0.0 {
        ds += length;
    }
    (f[b] - f[a]) / ds
}

/// Boundary points where the margin changes sign, as `(component, arclength)`
/// by linear interpolation between consecutive samples.
pub fn null_points(domain: &Domain, cls: &BoundaryClassification) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (c, comp) in domain.components.iter().enumerate() {
        let n = comp.len;
        for k in 0..n {
            let (a, b) = (comp.start + k, comp.start + (k + 1) % n);
            let (ma, mb) = (cls.margins[a], cls.margins[b]);
            if !(ma.is_finite() && mb.is_finite()) || (ma > 0.0) == (mb > 0.0) {
                continue;
            }
            let (sa, mut sb) = (domain.samples[a].arclength, domain.samples[b].arclength);
            if sb <= sa {
                sb += comp.length;
            }
            let t = ma / (ma - mb);
            out.push((c, (sa + t * (sb - sa)).rem_euclid(comp.length)));
        }
    }
    out
}

/// `min (nu2 . e)^2 - 1/(1 + beta^2)` over the valid nodes of `mask`.
pub fn hyperbolicity_margin(metric: &LorentzDirectionField, nu2: &VectorField, mask: &[bool]) -> Result<f64> {
    let mut m = f64::INFINITY;
    for n in 0..mask.len() {
        if mask[n] && metric.valid[n] {
            m = m.min(margin_at(metric.e.values[n], metric.beta.values[n], nu2.values[n]));
        }
    }
    if m == f64::INFINITY {
        return invalid("hyperbolicity margin over an empty region");
    }
    Ok(m)
}

/// Pointwise margin of a unit direction.
pub fn margin_at(e: [f64; 2], beta: f64, nu2: [f64; 2]) -> f64 {
    let d = e[0] * nu2[0] + e[1] * nu2[1];
    d * d - 1.0 / (1.0 + beta * beta)
}

/// Energy density `<dv,nu2>^2 - 1/2 <dv,dv><nu2,nu2>` with `dv = g grad v`
/// and the bilinear form `h`.
pub fn energy_at(e: [f64; 2], alpha: f64, beta: f64, grad_v: [f64; 2], nu2: [f64; 2]) -> f64 {
    let (g, h) = tensors(e, alpha, beta);
    let dv = apply(&g, grad_v);
    let a = bilinear(&h, dv, nu2);
    a * a - 0.5 * bilinear(&h, dv, dv) * bilinear(&h, nu2, nu2)
}

/// Energy density at every valid node, zero elsewhere.
pub fn energy(metric: &LorentzDirectionField, grad_v: &VectorField, nu2: &VectorField) -> ScalarField {
    let values = (0..metric.valid.len())
        .map(|n| {
            if metric.valid[n] {
                energy_at(
                    metric.e.values[n],
                    metric.alpha.values[n],
                    metric.beta.values[n],
                    grad_v.values[n],
                    nu2.values[n],
                )
            } else {
                0.0
            }
        })
        .collect();
    ScalarField {
        grid: metric.grid().clone(),
        values,
    }
}

/// Principal coefficients `(a, b, c)` of `g^{ij} d_ij` in marching coordinates
/// `(t, s)` at node `n`, with `s` the angle for polar grids.
pub(crate) fn principal(frame: &MarchFrame, grid: &Grid2D, g: &Mat2, n: usize) -> (f64, f64, f64) {
    match frame.direction {
        Direction::AxisX1 => (g[0][0], 2.0 * g[0][1], g[1][1]),
        Direction::RadialInward => {
            let (i, j) = grid.ij(n);
            let [r, phi] = grid.coords(i, j);
            let (rh, ph) = ([phi.cos(), phi.sin()], [-phi.sin(), phi.cos()]);
            let grr = bilinear(g, rh, rh);
            let grp = bilinear(g, rh, ph);
            let gpp = bilinear(g, ph, ph);
            (grr, -2.0 * grp / r, gpp / (r * r))
        }
    }
}

/// Lateral index of each marching-face sample, if the sample sits on the face.
pub(crate) fn face_lateral(domain: &Domain, frame: &MarchFrame, samples: &[usize]) -> Result<Vec<bool>> {
    let mut mask = vec![false; frame.lateral];
    for &s in samples {
        let hit = (0..frame.lateral).find(|&j| domain.node_sample[frame.node(0, j)] == Some(s));
        match hit {
            Some(j) => mask[j] = true,
            None => return invalid(format!("boundary sample {s} is not on the marching face")),
        }
    }
    Ok(mask)
}

/// Cells reachable from `sigma1` by the discrete cone of the metric, swept
/// column by column in `direction`.
pub fn domain_of_influence(
    domain: &Domain,
    sigma1: &[usize],
    metric: &LorentzDirectionField,
    direction: Direction,
) -> Result<Vec<bool>> {
    if sigma1.is_empty() {
        return invalid("empty initial boundary piece");
    }
    let frame = MarchFrame::new(domain, direction)?;
    let cls = classify_boundary(domain, metric);
    if let Some(&s) = sigma1.iter().find(|&&s| cls.tags[s] != Causal::Spacelike) {
        return precondition(format!(
            "boundary sample {s} of the initial piece is not spacelike (margin {:.3e})",
            cls.margins[s]
        ));
    }
    let grid = &domain.grid;
    let start = face_lateral(domain, &frame, sigma1)?;
    let mut tracker = ConeTracker::from_mask(&start, frame.periodic);
    let mut out = vec![false; grid.len()];
    let speed = |c: usize, j: usize| -> Option<(f64, f64)> {
        let n = frame.node(c, j);
        if !metric.valid[n] {
            return None;
        }
        let (a, b, cc) = principal(&frame, grid, &metric.g(n), n);
        let coef = Coef {
            a,
            b,
            c: cc,
            d: 0.0,
            e: 0.0,
            f: 0.0,
            hyper: 1.0,
            grad: 1.0,
        };
        coef.speeds()
            .map(|(lo, hi)| (lo * frame.dt / frame.ds, hi * frame.dt / frame.ds))
    };
    let ok = |c: usize, j: usize| -> bool {
        let n = frame.node(c, j);
        metric.valid[n] && domain.inside[n] && principal(&frame, grid, &metric.g(n), n).0 > 0.0
    };
    for c in 0..frame.columns {
        let mask = tracker.mask();
        for (j, &m) in mask.iter().enumerate() {
            if m {
                out[frame.node(c, j)] = true;
            }
        }
        if c + 1 == frame.columns || tracker.is_empty() {
            break;
        }
        tracker.advance(|j| speed(c, j), |j| ok(c + 1, j));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_domain, Shape};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

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

    #[test]
    fn single_metric_of_linear_potentials() {
        let d = slab(17);
        let h = ScalarField::constant(&d.grid, 1.0);
        let m = metric_single(&d, &ScalarField::from_fn(&d.grid, |p| p[0]), &h, 1e-3);
        let k = m.k.as_ref().unwrap();
        for n in 0..d.grid.len() {
            assert!(m.valid[n]);
            assert_relative_eq!(m.e.values[n][0], 1.0, epsilon = 1e-12);
            assert_eq!(k.values[n], [0.0, 0.0]);
        }
        let m = metric_single(&d, &ScalarField::from_fn(&d.grid, |p| p[1]), &h, 1e-3);
        assert_relative_eq!(m.e.values[40][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_metric_of_exponential_fields() {
        let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 65, 65).unwrap();
        let f = ScalarField::from_fn(&d.grid, |p| (-p[0]).exp());
        let m = metric_single(&d, &f, &f, 1e-3);
        let k = m.k.as_ref().unwrap();
        for n in 0..d.grid.len() {
            assert_relative_eq!(m.e.values[n][0], -1.0, epsilon = 1e-12);
            assert!((k.values[n][0] - 1.0).abs() < 1e-10 && k.values[n][1].abs() < 1e-12);
        }
    }

    #[test]
    fn pair_metric_cases() {
        let (e, a, b) = pair_at([1.0, 0.0], [1.0, 0.0], 1.0).unwrap();
        assert_eq!(e, [1.0, 0.0]);
        assert_relative_eq!(a, 2.0, epsilon = 1e-14);
        assert_relative_eq!(b, 1.0, epsilon = 1e-14);
        let (g, _) = tensors(e, a, b);
        assert_relative_eq!(g[0][0], 2.0, epsilon = 1e-14);
        assert_relative_eq!(g[1][1], -2.0, epsilon = 1e-14);
        assert!(pair_at([1.0, 0.0], [0.0, 1.0], 1.0).is_none());

        // Independent evaluation for an oblique pair.
        let t: f64 = 0.2;
        let (e, a, b) = pair_at([1.0, 0.0], [t.cos(), t.sin()], 1.0).unwrap();
        let s = [1.0 + t.cos(), t.sin()];
        let s2 = s[0] * s[0] + s[1] * s[1];
        assert_relative_eq!(e[0], s[0] / s2.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(e[1], s[1] / s2.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(b * b, 2.0 / (2.0 * t.cos()), epsilon = 1e-13);
        assert_relative_eq!(a, 2.0 * t.cos(), epsilon = 1e-13);
    }

    #[test]
    fn energy_hand_evaluation() {
        assert_eq!(energy_at([1.0, 0.0], 2.0, 1.0, [0.0, 0.0], [1.0, 0.0]), 0.0);
        assert_relative_eq!(energy_at([1.0, 0.0], 2.0, 1.0, [1.0, 0.0], [1.0, 0.0]), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn margins_closed_form() {
        assert_relative_eq!(margin_at([1.0, 0.0], 1.0, [1.0, 0.0]), 0.5);
        assert!(margin_at([1.0, 0.0], 1.0, [0.0, 1.0]) < 0.0);
        let a = 30f64.to_radians();
        assert_relative_eq!(margin_at([1.0, 0.0], 1.0, [a.cos(), a.sin()]), 0.25, epsilon = 1e-14);
        let d = slab(9);
        let m = metric_single(
            &d,
            &ScalarField::from_fn(&d.grid, |p| p[0]),
            &ScalarField::constant(&d.grid, 1.0),
            1e-3,
        );
        let mut nu = VectorField::zeros(&d.grid);
        nu.values.iter_mut().for_each(|v| *v = [1.0, 0.0]);
        assert_relative_eq!(hyperbolicity_margin(&m, &nu, &vec![true; d.grid.len()]).unwrap(), 0.5);
        assert!(hyperbolicity_margin(&m, &nu, &vec![false; d.grid.len()]).is_err());
    }

    #[test]
    fn slab_face_is_spacelike() {
        let d = slab(17);
        let m = metric_single(
            &d,
            &ScalarField::from_fn(&d.grid, |p| p[0]),
            &ScalarField::constant(&d.grid, 1.0),
            1e-3,
        );
        let cls = classify_boundary(&d, &m);
        for &n in &d.face_nodes()[1..16] {
            let s = d.node_sample[n].unwrap();
            assert_eq!(cls.tags[s], Causal::Spacelike);
            assert_relative_eq!(cls.margins[s], 0.5, epsilon = 1e-12);
        }
    }

    fn face_samples(d: &Domain) -> Vec<usize> {
        let f = d.face_nodes();
        f[1..f.len() - 1].iter().map(|&n| d.node_sample[n].unwrap()).collect()
    }

    fn cone_check(beta: f64, n: usize) {
        let d = slab(n);
        let g = &d.grid;
        let mut m = metric_single(&d, &ScalarField::from_fn(g, |p| p[0]), &ScalarField::constant(g, 1.0), 1e-3);
        m.beta = ScalarField::constant(g, beta);
        let o = domain_of_influence(&d, &face_samples(&d), &m, Direction::AxisX1).unwrap();
        let h = g.hx;
        for k in 0..g.len() {
            let p = g.position_of(k);
            // Analytic cone from the face samples.
            let edge = 1.0 - h - beta * p[0];
            if p[1].abs() < edge - h - 1e-9 {
                assert!(o[k], "missing {p:?}");
            }
            if p[1].abs() > edge + h + 1e-9 {
                assert!(!o[k], "extra {p:?}");
            }
        }
    }

    #[test]
    fn influence_matches_analytic_cones() {
        cone_check(1.0, 33);
        cone_check(0.5, 33);
    }

    #[test]
    fn annulus_radial_data() {
        let d = build_domain(
            &Shape::Annulus {
                r_inner: 0.5,
                r_outer: 1.0,
            },
            17,
            64,
        )
        .unwrap();
        let u = ScalarField::from_fn(&d.grid, |p| (p[0].hypot(p[1]) / 0.5).ln() / 2f64.ln());
        let m = metric_single(&d, &u, &ScalarField::constant(&d.grid, 1.0), 1e-3);
        let cls = classify_boundary(&d, &m);
        assert_eq!(cls.spacelike_fraction(), 1.0);
        for &mg in &cls.margins {
            assert!((mg - 0.5).abs() < 1e-6);
        }
        let outer: Vec<usize> = (0..d.components[0].len).map(|k| d.components[0].start + k).collect();
        let o = domain_of_influence(&d, &outer, &m, Direction::RadialInward).unwrap();
        assert!(o.iter().all(|&v| v));
    }

    proptest! {
        #[test]
        fn tensors_are_inverse_with_lorentzian_signature(
            phi in 0.0..std::f64::consts::TAU, alpha in 0.1f64..10.0, beta in 0.1f64..10.0,
        ) {
            let (g, h) = tensors([phi.cos(), phi.sin()], alpha, beta);
            for a in 0..2 {
                for b in 0..2 {
                    let p: f64 = (0..2).map(|c| g[a][c] * h[c][b]).sum();
                    let id = if a == b { 1.0 } else { 0.0 };
                    prop_assert!((p - id).abs() < 1e-10);
                }
            }
            let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
            prop_assert!(det < 0.0);
        }

        #[test]
        fn pair_direction_is_unit(
            a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0, h in 0.1f64..5.0,
        ) {
            if let Some((e, alpha, beta)) = pair_at([a, b], [c, d], h) {
                prop_assert!((norm(e) - 1.0).abs() < 1e-10);
                prop_assert!(alpha > 0.0 && beta > 0.0);
                prop_assert!(a * c + b * d > 0.0);
            }
        }

        #[test]
        fn classification_is_scale_invariant(c in 0.01f64..100.0, t in -0.5f64..0.5) {
            let d = build_domain(&Shape::Disc { r: 1.0 }, 17, 17).unwrap();
            let h = ScalarField::constant(&d.grid, 1.0);
            let u = ScalarField::from_fn(&d.grid, |p| p[0] * t.cos() + p[1] * t.sin());
            let a = classify_boundary(&d, &metric_single(&d, &u, &h, 1e-6));
            let b = classify_boundary(&d, &metric_single(&d, &u.map(|v| c * v), &h, 1e-6));
            prop_assert_eq!(a.tags, b.tags);
            for (x, y) in a.margins.iter().zip(&b.margins) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn influence_is_monotone(lo in 1usize..8, hi in 9usize..16, extra in 0usize..4) {
            let d = slab(17);
            let m = metric_single(&d, &ScalarField::from_fn(&d.grid, |p| p[0]), &ScalarField::constant(&d.grid, 1.0), 1e-3);
            let face = d.face_nodes();
            let pick = |a: usize, b: usize| -> Vec<usize> { (a..=b).map(|j| d.node_sample[face[j]].unwrap()).collect() };
            let small = domain_of_influence(&d, &pick(lo, hi), &m, Direction::AxisX1).unwrap();
            let big = domain_of_influence(&d, &pick(lo.saturating_sub(extra).max(1), (hi + extra).min(15)), &m, Direction::AxisX1).unwrap();
            for (s, b) in small.iter().zip(&big) {
                prop_assert!(!s || *b);
            }
        }
    }
}
