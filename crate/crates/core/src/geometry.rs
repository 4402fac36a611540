//! Domains, grids and boundary samples.
//!
//! Rectangles and slabs are node grids whose outermost nodes are the boundary
//! samples. Discs and ovoids are embedded in a Cartesian box and carry their
//! boundary as uniformly spaced arclength samples; grid links that cross the
//! boundary are cut at the exact intersection. The annulus uses a polar chart.
//!
//! Every domain is also described as a conductance graph (nodes, terminals,
//! edges) which the elliptic solver assembles for a given conductivity.

use crate::error::{invalid, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Coordinate chart of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Chart {
    /// Nodes at `origin + (i hx, j hy)`.
    Cartesian,
    /// Nodes at radius `origin[0] + i hx` and angle `j hy`, periodic in `j`.
    Polar,
}

/// A uniform two-dimensional grid. Values are stored row-major: node `(i, j)`
/// lives at index `j * nx + i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub nx: usize,
    pub ny: usize,
    pub hx: f64,
    pub hy: f64,
    pub origin: [f64; 2],
    pub chart: Chart,
}

impl Grid2D {
    pub fn cartesian(nx: usize, ny: usize, hx: f64, hy: f64, origin: [f64; 2]) -> Result<Self> {
        let g = Grid2D {
            nx,
            ny,
            hx,
            hy,
            origin,
            chart: Chart::Cartesian,
        };
        g.validate()?;
        Ok(g)
    }

    /// Polar grid with `nr` radial nodes spanning `[r_inner, r_outer]` and
    /// `nphi` periodic angular nodes.
    pub fn polar(nr: usize, nphi: usize, r_inner: f64, r_outer: f64) -> Result<Self> {
        if !(r_inner > 0.0 && r_outer > r_inner) {
            return invalid(format!(
                "polar radii must satisfy 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
            ));
        }
        let g = Grid2D {
            nx: nr,
            ny: nphi,
            hx: (r_outer - r_inner) / (nr.max(2) - 1) as f64,
            hy: 2.0 * PI / nphi.max(1) as f64,
            origin: [r_inner, 0.0],
            chart: Chart::Polar,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return invalid(format!(
                "grid must have at least 8 nodes per axis, got {}x{}",
                self.nx, self.ny
            ));
        }
        if !(self.hx > 0.0 && self.hy > 0.0 && self.hx.is_finite() && self.hy.is_finite()) {
            return invalid(format!("grid spacings must be positive, got {} and {}", self.hx, self.hy));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx % self.nx, idx / self.nx)
    }

    pub fn periodic_y(&self) -> bool {
        self.chart == Chart::Polar
    }

    /// Chart coordinates of a node: `(x, y)` or `(r, phi)`.
    #[inline]
    pub fn coords(&self, i: usize, j: usize) -> [f64; 2] {
        [self.origin[0] + i as f64 * self.hx, self.origin[1] + j as f64 * self.hy]
    }

    /// Cartesian position of a node.
    #[inline]
    pub fn position(&self, i: usize, j: usize) -> [f64; 2] {
        let [a, b] = self.coords(i, j);
        match self.chart {
            Chart::Cartesian => [a, b],
            Chart::Polar => [a * b.cos(), a * b.sin()],
        }
    }

    pub fn position_of(&self, idx: usize) -> [f64; 2] {
        let (i, j) = self.ij(idx);
        self.position(i, j)
    }

    /// Physical extent along each chart axis (`ny * hy` for periodic axes).
    pub fn extent(&self) -> [f64; 2] {
        let ly = if self.periodic_y() {
            self.ny as f64 * self.hy
        } else {
            (self.ny - 1) as f64 * self.hy
        };
        [(self.nx - 1) as f64 * self.hx, ly]
    }

    /// Quadrature weight of a node for integrals over the chart (trapezoid in
    /// Cartesian, `r dr dphi` in polar).
    pub fn cell_weight(&self, i: usize, j: usize) -> f64 {
        let wx = if i == 0 || i == self.nx - 1 { 0.5 } else { 1.0 };
        match self.chart {
            Chart::Cartesian => {
                let wy = if j == 0 || j == self.ny - 1 { 0.5 } else { 1.0 };
                wx * wy * self.hx * self.hy
            }
            Chart::Polar => wx * self.coords(i, j)[0] * self.hx * self.hy,
        }
    }
}

/// Supported domain shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `(0, lx) x (0, ly)`.
    Rectangle { lx: f64, ly: f64 },
    /// Disc of radius `r` centred at the origin.
    Disc { r: f64 },
    /// Ellipse with semi-axes `a` (x) and `b` (y) centred at the origin.
    Ovoid { a: f64, b: f64 },
    /// `r_inner < |x| < r_outer`.
    Annulus { r_inner: f64, r_outer: f64 },
    /// `(0, length) x (-half_width, half_width)`.
    Slab { length: f64, half_width: f64 },
}

/// One quadrature point on the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySample {
    pub position: [f64; 2],
    /// Outward unit normal.
    pub normal: [f64; 2],
    /// Arclength weight.
    pub weight: f64,
    pub component: usize,
    /// Arclength coordinate within the component.
    pub arclength: f64,
}

/// Contiguous block of samples forming one closed boundary curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub start: usize,
    pub len: usize,
    pub length: f64,
}

/// Where a terminal reads its conductivity from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum SigmaSource {
    Node(usize),
    Lerp { a: usize, b: usize, theta: f64 },
}

/// A Dirichlet terminal of the conductance graph.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Terminal {
    pub id: usize,
    pub position: [f64; 2],
    /// Boundary value as a combination of sample values.
    pub weights: Vec<(usize, f64)>,
    pub sigma: SigmaSource,
}

/// Edge of the conductance graph; conductance is `geom * face_sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Edge {
    pub a: usize,
    pub b: usize,
    pub geom: f64,
}

/// Kind of a graph vertex during assembly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Vertex {
    Unknown(usize),
    Terminal(usize),
}

const NONE: usize = usize::MAX;

/// A discretised domain.
#[derive(Clone, Debug)]
pub struct Domain {
    pub shape: Shape,
    pub grid: Grid2D,
    /// Grid nodes carrying an unknown of the elliptic problem.
    pub interior: Vec<bool>,
    /// Grid nodes in the closed domain (interior nodes plus boundary nodes).
    pub inside: Vec<bool>,
    pub samples: Vec<BoundarySample>,
    pub components: Vec<Component>,
    /// Sample located at a grid node, if any.
    pub node_sample: Vec<Option<usize>>,
    pub(crate) terminals: Vec<Terminal>,
    pub(crate) edges: Vec<Edge>,
    pub(crate) unknowns: Vec<usize>,
    unknown_of: Vec<usize>,
    terminal_of: Vec<usize>,
}

impl Domain {
    pub fn n_unknowns(&self) -> usize {
        self.unknowns.len()
    }

    pub(crate) fn vertex(&self, id: usize) -> Vertex {
        let u = if id < self.unknown_of.len() {
            self.unknown_of[id]
        } else {
            NONE
        };
        if u != NONE {
            Vertex::Unknown(u)
        } else {
            Vertex::Terminal(self.terminal_of[id])
        }
    }

    /// Mask of nodes carrying an unknown.
    pub fn interior_mask(&self) -> &[bool] {
        &self.interior
    }

    /// Mask of nodes belonging to the closed domain.
    pub fn closure_mask(&self) -> &[bool] {
        &self.inside
    }

    /// Samples of one component.
    pub fn component_samples(&self, c: usize) -> &[BoundarySample] {
        let comp = self.components[c];
        &self.samples[comp.start..comp.start + comp.len]
    }

    /// Boundary value at every terminal for sample values `f`.
    pub(crate) fn terminal_values(&self, f: &[f64]) -> Vec<f64> {
        self.terminals
            .iter()
            .map(|t| t.weights.iter().map(|&(s, w)| w * f[s]).sum())
            .collect()
    }

    /// Conductivity at a terminal.
    pub(crate) fn terminal_sigma(&self, t: &Terminal, sigma: &[f64]) -> f64 {
        match t.sigma {
            SigmaSource::Node(n) => sigma[n],
            SigmaSource::Lerp { a, b, theta } => (1.0 - theta) * sigma[a] + theta * sigma[b],
        }
    }

    /// Whether the domain boundary coincides with grid nodes.
    pub fn grid_aligned(&self) -> bool {
        !matches!(self.shape, Shape::Disc { .. } | Shape::Ovoid { .. })
    }

    /// Node indices along the marching face (first grid column) for
    /// grid-aligned Cartesian domains, or the outer ring for the annulus.
    pub fn face_nodes(&self) -> Vec<usize> {
        let g = &self.grid;
        match self.grid.chart {
            Chart::Cartesian => (0..g.ny).map(|j| g.idx(0, j)).collect(),
            Chart::Polar => (0..g.ny).map(|j| g.idx(g.nx - 1, j)).collect(),
        }
    }
}

/// Build the discretised domain for `shape` with `nx x ny` grid nodes. For
/// the annulus `nx` counts radial and `ny` angular nodes.
pub fn build_domain(shape: &Shape, nx: usize, ny: usize) -> Result<Domain> {
    match *shape {
        Shape::Rectangle { lx, ly } => {
            check_positive(&[lx, ly])?;
            rectangle(shape.clone(), lx, ly, [0.0, 0.0], nx, ny)
        }
        Shape::Slab { length, half_width } => {
            check_positive(&[length, half_width])?;
            rectangle(shape.clone(), length, 2.0 * half_width, [0.0, -half_width], nx, ny)
        }
        Shape::Disc { r } => {
            check_positive(&[r])?;
            curved(shape.clone(), Ellipse::new(r, r), nx, ny)
        }
        Shape::Ovoid { a, b } => {
            check_positive(&[a, b])?;
            curved(shape.clone(), Ellipse::new(a, b), nx, ny)
        }
        Shape::Annulus { r_inner, r_outer } => annulus(shape.clone(), r_inner, r_outer, nx, ny),
    }
}

fn check_positive(v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite() && *x > 0.0) {
        Ok(())
    } else {
        invalid(format!("shape parameters must be positive and finite, got {v:?}"))
    }
}

/// Weighted boundary integral `sum_k g_k w_k` in sample order.
pub fn boundary_integral(domain: &Domain, g: &[f64]) -> Result<f64> {
    if g.len() != domain.samples.len() {
        return invalid(format!(
            "boundary data has {} values, expected {}",
            g.len(),
            domain.samples.len()
        ));
    }
    Ok(domain.samples.iter().zip(g).map(|(s, v)| s.weight * v).sum())
}

fn rectangle(shape: Shape, lx: f64, ly: f64, origin: [f64; 2], nx: usize, ny: usize) -> Result<Domain> {
    let grid = Grid2D::cartesian(nx, ny, lx / (nx.max(2) - 1) as f64, ly / (ny.max(2) - 1) as f64, origin)?;
    let (hx, hy) = (grid.hx, grid.hy);
    let n = grid.len();
    let on_edge = |i: usize, j: usize| i == 0 || j == 0 || i == nx - 1 || j == ny - 1;

    // Counterclockwise walk starting at the lower-left corner.
    let mut walk = Vec::with_capacity(2 * (nx + ny));
    walk.extend((0..nx - 1).map(|i| (i, 0)));
    walk.extend((0..ny - 1).map(|j| (nx - 1, j)));
    walk.extend((1..nx).rev().map(|i| (i, ny - 1)));
    walk.extend((1..ny).rev().map(|j| (0, j)));

    let mut samples = Vec::with_capacity(walk.len());
    let mut node_sample = vec![None; n];
    let mut s = 0.0;
    for (k, &(i, j)) in walk.iter().enumerate() {
        let nxv = if i == 0 {
            -1.0
        } else if i == nx - 1 {
            1.0
        } else {
            0.0
        };
        let nyv = if j == 0 {
            -1.0
        } else if j == ny - 1 {
            1.0
        } else {
            0.0
        };
        let norm: f64 = f64::hypot(nxv, nyv);
        let wx = if j == 0 || j == ny - 1 { hx } else { 0.0 };
        let wy = if i == 0 || i == nx - 1 { hy } else { 0.0 };
        let corner = nxv != 0.0 && nyv != 0.0;
        let weight = if corner { 0.5 * (hx + hy) } else { wx + wy };
        if k > 0 {
            let (pi, pj) = walk[k - 1];
            s += ((i as f64 - pi as f64) * hx).hypot((j as f64 - pj as f64) * hy);
        }
        samples.push(BoundarySample {
            position: grid.position(i, j),
            normal: [nxv / norm, nyv / norm],
            weight,
            component: 0,
            arclength: s,
        });
        node_sample[grid.idx(i, j)] = Some(k);
    }
    let length = 2.0 * (lx + ly);

    let mut interior = vec![false; n];
    let mut inside = vec![true; n];
    let mut terminals = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let id = grid.idx(i, j);
            inside[id] = true;
            if on_edge(i, j) {
                terminals.push(Terminal {
                    id,
                    position: grid.position(i, j),
                    weights: vec![(node_sample[id].unwrap(), 1.0)],
                    sigma: SigmaSource::Node(id),
                });
            } else {
                interior[id] = true;
            }
        }
    }

    let mut edges = Vec::with_capacity(2 * n);
    for j in 0..ny {
        let face = if j == 0 || j == ny - 1 { 0.5 * hy } else { hy };
        for i in 0..nx - 1 {
            edges.push(Edge {
                a: grid.idx(i, j),
                b: grid.idx(i + 1, j),
                geom: face / hx,
            });
        }
    }
    for i in 0..nx {
        let face = if i == 0 || i == nx - 1 { 0.5 * hx } else { hx };
        for j in 0..ny - 1 {
            edges.push(Edge {
                a: grid.idx(i, j),
                b: grid.idx(i, j + 1),
                geom: face / hy,
            });
        }
    }

    let unknowns: Vec<usize> = (0..n).filter(|&id| interior[id]).collect();
    finish(Domain {
        shape,
        grid,
        interior,
        inside,
        samples,
        components: vec![Component {
            start: 0,
            len: walk.len(),
            length,
        }],
        node_sample,
        terminals,
        edges,
        unknowns,
        unknown_of: Vec::new(),
        terminal_of: Vec::new(),
    })
}

fn annulus(shape: Shape, r_inner: f64, r_outer: f64, nr: usize, nphi: usize) -> Result<Domain> {
    let grid = Grid2D::polar(nr, nphi, r_inner, r_outer)?;
    let (hr, hphi) = (grid.hx, grid.hy);
    let n = grid.len();
    let mut samples = Vec::with_capacity(2 * nphi);
    let mut node_sample = vec![None; n];
    let mut components = Vec::new();
    for (c, (i, sign, r)) in [(nr - 1, 1.0, r_outer), (0, -1.0, r_inner)].into_iter().enumerate() {
        let start = samples.len();
        for j in 0..nphi {
            let phi = j as f64 * hphi;
            let id = grid.idx(i, j);
            node_sample[id] = Some(samples.len());
            samples.push(BoundarySample {
                position: grid.position(i, j),
                normal: [sign * phi.cos(), sign * phi.sin()],
                weight: r * hphi,
                component: c,
                arclength: r * phi,
            });
        }
        components.push(Component {
            start,
            len: nphi,
            length: 2.0 * PI * r,
        });
    }

    let mut interior = vec![false; n];
    let inside = vec![true; n];
    let mut terminals = Vec::new();
    for j in 0..nphi {
        for i in 0..nr {
            let id = grid.idx(i, j);
            if i == 0 || i == nr - 1 {
                terminals.push(Terminal {
                    id,
                    position: grid.position(i, j),
                    weights: vec![(node_sample[id].unwrap(), 1.0)],
                    sigma: SigmaSource::Node(id),
                });
            } else {
                interior[id] = true;
            }
        }
    }

    let mut edges = Vec::with_capacity(2 * n);
    for j in 0..nphi {
        for i in 0..nr - 1 {
            let rf = r_inner + (i as f64 + 0.5) * hr;
            edges.push(Edge {
                a: grid.idx(i, j),
                b: grid.idx(i + 1, j),
                geom: rf * hphi / hr,
            });
        }
    }
    for i in 0..nr {
        let r = r_inner + i as f64 * hr;
        let face = if i == 0 || i == nr - 1 { 0.5 * hr } else { hr };
        for j in 0..nphi {
            edges.push(Edge {
                a: grid.idx(i, j),
                b: grid.idx(i, (j + 1) % nphi),
                geom: face / (r * hphi),
            });
        }
    }

    // Ring-major unknown order keeps the bandwidth at one ring.
    let mut unknowns = Vec::with_capacity(n);
    for i in 1..nr - 1 {
        for j in 0..nphi {
            unknowns.push(grid.idx(i, j));
        }
    }
    finish(Domain {
        shape,
        grid,
        interior,
        inside,
        samples,
        components,
        node_sample,
        terminals,
        edges,
        unknowns,
        unknown_of: Vec::new(),
        terminal_of: Vec::new(),
    })
}

/// Axis-aligned ellipse with arclength parametrisation.
#[derive(Clone, Debug)]
pub(crate) struct Ellipse {
    pub a: f64,
    pub b: f64,
    /// Cumulative arclength at `t_k = 2 pi k / M`.
    table: Vec<f64>,
}

const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

impl Ellipse {
    const M: usize = 2048;

    pub fn new(a: f64, b: f64) -> Self {
        let mut e = Ellipse { a, b, table: Vec::new() };
        let dt = 2.0 * PI / Self::M as f64;
        let mut table = Vec::with_capacity(Self::M + 1);
        table.push(0.0);
        let mut acc = 0.0;
        for k in 0..Self::M {
            acc += e.segment(k as f64 * dt, (k + 1) as f64 * dt);
            table.push(acc);
        }
        e.table = table;
        e
    }

    fn speed(&self, t: f64) -> f64 {
        (self.a * t.sin()).hypot(self.b * t.cos())
    }

    fn segment(&self, t0: f64, t1: f64) -> f64 {
        let (m, h) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
        GL5.iter().map(|&(x, w)| w * self.speed(m + h * x)).sum::<f64>() * h
    }

    pub fn perimeter(&self) -> f64 {
        self.table[Self::M]
    }

    pub fn point(&self, t: f64) -> [f64; 2] {
        [self.a * t.cos(), self.b * t.sin()]
    }

    pub fn normal(&self, p: [f64; 2]) -> [f64; 2] {
        let g = [p[0] / (self.a * self.a), p[1] / (self.b * self.b)];
        let n = g[0].hypot(g[1]);
        [g[0] / n, g[1] / n]
    }

    pub fn level(&self, p: [f64; 2]) -> f64 {
        (p[0] / self.a).powi(2) + (p[1] / self.b).powi(2) - 1.0
    }

    /// Arclength from `t = 0` to `t` in `[0, 2 pi)`.
    pub fn arclength(&self, t: f64) -> f64 {
        let t = t.rem_euclid(2.0 * PI);
        let dt = 2.0 * PI / Self::M as f64;
        let k = ((t / dt) as usize).min(Self::M - 1);
        self.table[k] + self.segment(k as f64 * dt, t)
    }

    /// Parameter at arclength `s`.
    pub fn parameter(&self, s: f64) -> f64 {
        let per = self.perimeter();
        let s = s.rem_euclid(per);
        let mut t = 2.0 * PI * s / per;
        for _ in 0..50 {
            let step = (self.arclength(t) - s) / self.speed(t);
            t -= step;
            if step.abs() < 1e-15 {
                break;
            }
        }
        t
    }

    /// Parameter of a point on the curve.
    pub fn param_of(&self, p: [f64; 2]) -> f64 {
        (p[1] / self.b).atan2(p[0] / self.a).rem_euclid(2.0 * PI)
    }

    /// Smallest `tau in (0, hmax]` with `p + tau d` on the curve.
    fn cut(&self, p: [f64; 2], d: [f64; 2], hmax: f64) -> Option<f64> {
        let (ia, ib) = (1.0 / (self.a * self.a), 1.0 / (self.b * self.b));
        let qa = d[0] * d[0] * ia + d[1] * d[1] * ib;
        let qb = 2.0 * (p[0] * d[0] * ia + p[1] * d[1] * ib);
        let qc = p[0] * p[0] * ia + p[1] * p[1] * ib - 1.0;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return None;
        }
        let tau = (-qb + disc.sqrt()) / (2.0 * qa);
        (tau > 0.0 && tau <= hmax * (1.0 + 1e-12)).then_some(tau.min(hmax))
    }
}

/// Periodic four-point Lagrange weights for arclength `s` on `n` uniform samples.
fn periodic_lagrange(s: f64, ds: f64, n: usize) -> Vec<(usize, f64)> {
    let x = s / ds;
    let k = x.floor();
    let f = x - k;
    let k = k as i64;
    let w = [
        -f * (f - 1.0) * (f - 2.0) / 6.0,
        (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
        -(f + 1.0) * f * (f - 2.0) / 2.0,
        (f + 1.0) * f * (f - 1.0) / 6.0,
    ];
    (0..4)
        .map(|m| ((k - 1 + m as i64).rem_euclid(n as i64) as usize, w[m]))
        .collect()
}

fn curved(shape: Shape, ell: Ellipse, nx: usize, ny: usize) -> Result<Domain> {
    let (a, b) = (ell.a, ell.b);
    let grid = Grid2D::cartesian(
        nx,
        ny,
        2.0 * a / (nx.max(2) - 1) as f64,
        2.0 * b / (ny.max(2) - 1) as f64,
        [-a, -b],
    )?;
    let (hx, hy) = (grid.hx, grid.hy);
    let n = grid.len();
    let per = ell.perimeter();
    let ns = (per / hx.min(hy)).ceil() as usize;
    let ds = per / ns as f64;
    let mut samples = Vec::with_capacity(ns);
    for k in 0..ns {
        let s = k as f64 * ds;
        let p = ell.point(ell.parameter(s));
        samples.push(BoundarySample {
            position: p,
            normal: ell.normal(p),
            weight: ds,
            component: 0,
            arclength: s,
        });
    }

    let interior: Vec<bool> = (0..n).map(|id| ell.level(grid.position_of(id)) < -1e-12).collect();
    let mut terminals = Vec::new();
    let mut edges = Vec::new();
    let dirs: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    for j in 0..ny {
        for i in 0..nx {
            let p = grid.idx(i, j);
            if !interior[p] {
                continue;
            }
            for &(di, dj) in &dirs {
                let (qi, qj) = (i as i64 + di, j as i64 + dj);
                let (h, face) = if di != 0 { (hx, hy) } else { (hy, hx) };
                let inb = qi >= 0 && qj >= 0 && (qi as usize) < nx && (qj as usize) < ny;
                let q = if inb { grid.idx(qi as usize, qj as usize) } else { NONE };
                if q != NONE && interior[q] {
                    if p < q {
                        edges.push(Edge {
                            a: p,
                            b: q,
                            geom: face / h,
                        });
                    }
                    continue;
                }
                let pos = grid.position(i, j);
                let d = [di as f64, dj as f64];
                let tau = ell.cut(pos, d, h).unwrap_or(h);
                let theta = (tau / h).max(1e-3);
                let cp = [pos[0] + tau * d[0], pos[1] + tau * d[1]];
                let s = ell.arclength(ell.param_of(cp));
                let id = n + terminals.len();
                let sigma = if q != NONE {
                    SigmaSource::Lerp { a: p, b: q, theta }
                } else {
                    SigmaSource::Node(p)
                };
                terminals.push(Terminal {
                    id,
                    position: cp,
                    weights: periodic_lagrange(s, ds, ns),
                    sigma,
                });
                edges.push(Edge {
                    a: p,
                    b: id,
                    geom: face / (theta * h),
                });
            }
        }
    }

    let unknowns: Vec<usize> = (0..n).filter(|&id| interior[id]).collect();
    finish(Domain {
        shape,
        grid,
        inside: interior.clone(),
        interior,
        samples,
        components: vec![Component {
            start: 0,
            len: ns,
            length: per,
        }],
        node_sample: vec![None; n],
        terminals,
        edges,
        unknowns,
        unknown_of: Vec::new(),
        terminal_of: Vec::new(),
    })
}

fn finish(mut d: Domain) -> Result<Domain> {
    let n = d.grid.len();
    let n_ids = n + d.terminals.iter().filter(|t| t.id >= n).count();
    d.unknown_of = vec![NONE; n];
    for (k, &id) in d.unknowns.iter().enumerate() {
        d.unknown_of[id] = k;
    }
    d.terminal_of = vec![NONE; n_ids];
    for (k, t) in d.terminals.iter().enumerate() {
        d.terminal_of[t.id] = k;
    }
    if d.unknowns.is_empty() {
        return invalid("domain has no interior nodes at this resolution");
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unit_square_has_124_samples_and_perimeter_four() {
        let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 32, 32).unwrap();
        assert_eq!(d.samples.len(), 124);
        let total: f64 = d.samples.iter().map(|s| s.weight).sum();
        assert_relative_eq!(total, 4.0, epsilon = 1e-12);
        assert_relative_eq!(boundary_integral(&d, &vec![1.0; 124]).unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn rectangle_walk_is_counterclockwise() {
        let d = build_domain(&Shape::Rectangle { lx: 2.0, ly: 1.0 }, 9, 9).unwrap();
        let mut area = 0.0;
        let s = &d.samples;
        for k in 0..s.len() {
            let (p, q) = (s[k].position, s[(k + 1) % s.len()].position);
            area += p[0] * q[1] - q[0] * p[1];
        }
        assert_relative_eq!(0.5 * area, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn disc_perimeter_and_normals() {
        let d = build_domain(&Shape::Disc { r: 1.0 }, 64, 64).unwrap();
        let total: f64 = d.samples.iter().map(|s| s.weight).sum();
        assert_relative_eq!(total, 2.0 * PI, epsilon = 1e-10);
        for s in &d.samples {
            assert_relative_eq!(s.normal[0], s.position[0], epsilon = 1e-12);
            assert_relative_eq!(s.position[0].hypot(s.position[1]), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn ellipse_perimeter_matches_series() {
        // Ramanujan's second approximation is accurate to ~1e-11 here.
        let (a, b) = (1.0, 0.6);
        let e = Ellipse::new(a, b);
        let h = ((a - b) / (a + b)).powi(2);
        let ram = PI * (a + b) * (1.0 + 3.0 * h / (10.0 + (4.0 - 3.0 * h).sqrt()));
        assert_relative_eq!(e.perimeter(), ram, epsilon = 1e-8);
        let t = e.parameter(1.234);
        assert_relative_eq!(e.arclength(t), 1.234, epsilon = 1e-12);
    }

    #[test]
    fn annulus_components() {
        let d = build_domain(
            &Shape::Annulus {
                r_inner: 0.5,
                r_outer: 1.0,
            },
            16,
            32,
        )
        .unwrap();
        assert_eq!(d.components.len(), 2);
        let outer: f64 = d.component_samples(0).iter().map(|s| s.weight).sum();
        let inner: f64 = d.component_samples(1).iter().map(|s| s.weight).sum();
        assert_relative_eq!(outer, 2.0 * PI, epsilon = 1e-12);
        assert_relative_eq!(inner, PI, epsilon = 1e-12);
        assert!(d
            .component_samples(1)
            .iter()
            .all(|s| s.normal[0] * s.position[0] + s.normal[1] * s.position[1] < 0.0));
    }

    #[test]
    fn lagrange_weights_reproduce_cubics() {
        let n = 40;
        let ds = 0.1;
        let w = periodic_lagrange(1.234, ds, n);
        let f = |k: usize| {
            let s = k as f64 * ds;
            s * s * s - s
        };
        let v: f64 = w.iter().map(|&(k, c)| c * f(k)).sum();
        assert_relative_eq!(v, 1.234f64.powi(3) - 1.234, epsilon = 1e-12);
    }

    #[test]
    fn rejects_tiny_grids_and_bad_shapes() {
        assert!(build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 4, 32).is_err());
        assert!(build_domain(&Shape::Disc { r: -1.0 }, 32, 32).is_err());
        assert!(build_domain(
            &Shape::Annulus {
                r_inner: 1.0,
                r_outer: 0.5
            },
            32,
            32
        )
        .is_err());
    }
}
