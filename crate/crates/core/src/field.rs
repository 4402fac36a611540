//! Scalar and vector fields on a grid, with text and PGM serialisation.

use crate::error::{invalid, Error, Result};
use crate::geometry::{Chart, Grid2D};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    pub grid: Grid2D,
    /// Cartesian components at every node.
    pub values: Vec<[f64; 2]>,
}

impl ScalarField {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return invalid(format!("field has {} values, grid has {} nodes", values.len(), grid.len()));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: &Grid2D, c: f64) -> Self {
        ScalarField {
            grid: grid.clone(),
            values: vec![c; grid.len()],
        }
    }

    /// Evaluate `f` at the Cartesian position of every node.
    pub fn from_fn(grid: &Grid2D, f: impl Fn([f64; 2]) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.position_of(k))).collect();
        ScalarField {
            grid: grid.clone(),
            values,
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[self.grid.idx(i, j)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        ScalarField {
            grid: self.grid.clone(),
            values,
        }
    }

    /// Bilinear interpolation at a Cartesian point, clamped to the grid.
    pub fn interpolate(&self, p: [f64; 2]) -> f64 {
        let g = &self.grid;
        let (u, v) = match g.chart {
            Chart::Cartesian => ((p[0] - g.origin[0]) / g.hx, (p[1] - g.origin[1]) / g.hy),
            Chart::Polar => {
                let r = p[0].hypot(p[1]);
                let phi = p[1].atan2(p[0]).rem_euclid(2.0 * std::f64::consts::PI);
                ((r - g.origin[0]) / g.hx, phi / g.hy)
            }
        };
        let u = u.clamp(0.0, (g.nx - 1) as f64);
        let i0 = (u.floor() as usize).min(g.nx - 2);
        let fu = u - i0 as f64;
        let (j0, j1, fv) = if g.periodic_y() {
            let v = v.rem_euclid(g.ny as f64);
            let j0 = (v.floor() as usize) % g.ny;
            (j0, (j0 + 1) % g.ny, v - v.floor())
        } else {
            let v = v.clamp(0.0, (g.ny - 1) as f64);
            let j0 = (v.floor() as usize).min(g.ny - 2);
            (j0, j0 + 1, v - j0 as f64)
        };
        let f = |i, j| self.values[g.idx(i, j)];
        (1.0 - fv) * ((1.0 - fu) * f(i0, j0) + fu * f(i0 + 1, j0)) + fv * ((1.0 - fu) * f(i0, j1) + fu * f(i0 + 1, j1))
    }

    /// Derivatives along the two chart axes using central differences and
    /// second-order one-sided differences on non-periodic edges.
    pub fn chart_derivatives(&self) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let mut dx = vec![0.0; g.len()];
        let mut dy = vec![0.0; g.len()];
        for j in 0..g.ny {
            for i in 0..g.nx {
                let k = g.idx(i, j);
                dx[k] = diff(|m| self.at(m, j), i, g.nx, g.hx, false);
                dy[k] = diff(|m| self.at(i, m), j, g.ny, g.hy, g.periodic_y());
            }
        }
        (dx, dy)
    }

    /// Cartesian gradient over the whole grid.
    pub fn gradient(&self) -> VectorField {
        let (da, db) = self.chart_derivatives();
        let g = &self.grid;
        let values = (0..g.len())
            .map(|k| match g.chart {
                Chart::Cartesian => [da[k], db[k]],
                Chart::Polar => {
                    let (i, j) = g.ij(k);
                    let [r, phi] = g.coords(i, j);
                    let (c, s) = (phi.cos(), phi.sin());
                    let q = db[k] / r;
                    [da[k] * c - q * s, da[k] * s + q * c]
                }
            })
            .collect();
        VectorField { grid: g.clone(), values }
    }

    /// Quadrature of `f^2` over the masked nodes.
    pub fn l2_norm(&self, mask: Option<&[bool]>) -> f64 {
        weighted_sum(&self.grid, mask, |k| self.values[k] * self.values[k]).sqrt()
    }

    /// `||self - other|| / ||other||` over the masked nodes.
    pub fn relative_l2_error(&self, other: &ScalarField, mask: Option<&[bool]>) -> f64 {
        let num = weighted_sum(&self.grid, mask, |k| (self.values[k] - other.values[k]).powi(2));
        let den = weighted_sum(&self.grid, mask, |k| other.values[k].powi(2));
        (num / den).sqrt()
    }

    pub fn max_abs(&self, mask: Option<&[bool]>) -> f64 {
        self.values
            .iter()
            .enumerate()
            .filter(|(k, _)| mask.is_none_or(|m| m[*k]))
            .fold(0.0, |a, (_, v)| a.max(v.abs()))
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(24 * self.values.len());
        out.push_str(&header(&self.grid));
        for j in 0..self.grid.ny {
            let row: Vec<String> = (0..self.grid.nx).map(|i| format!("{:.16e}", self.at(i, j))).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_text(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let head = lines.next().ok_or_else(|| Error::InvalidInput("empty field file".into()))??;
        let grid = parse_header(&head)?;
        let mut values = Vec::with_capacity(grid.len());
        for line in lines {
            for tok in line?.split_whitespace() {
                values.push(
                    tok.parse::<f64>()
                        .map_err(|e| Error::InvalidInput(format!("bad value {tok:?}: {e}")))?,
                );
            }
        }
        ScalarField::new(grid, values)
    }

    /// Grey-scale PGM image, rows flipped so that `+y` points up.
    pub fn write_pgm(&self, path: &Path, mask: Option<&[bool]>) -> Result<()> {
        let sel = |k: usize| mask.is_none_or(|m| m[k]) && self.values[k].is_finite();
        let (lo, hi) = (0..self.values.len())
            .filter(|&k| sel(k))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), k| {
                (lo.min(self.values[k]), hi.max(self.values[k]))
            });
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pixels: Vec<u8> = (0..self.grid.ny)
            .rev()
            .flat_map(|j| (0..self.grid.nx).map(move |i| (i, j)))
            .map(|(i, j)| {
                let k = self.grid.idx(i, j);
                if sel(k) {
                    (1.0 + 254.0 * (self.values[k] - lo) / span).round() as u8
                } else {
                    0
                }
            })
            .collect();
        write_pgm_bytes(path, self.grid.nx, self.grid.ny, &pixels)
    }
}

impl VectorField {
    pub fn zeros(grid: &Grid2D) -> Self {
        VectorField {
            grid: grid.clone(),
            values: vec![[0.0; 2]; grid.len()],
        }
    }

    pub fn norm_sq(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0] * v[0] + v[1] * v[1]).collect()
    }

    pub fn component(&self, c: usize) -> ScalarField {
        ScalarField {
            grid: self.grid.clone(),
            values: self.values.iter().map(|v| v[c]).collect(),
        }
    }

    /// Write both components, `x y` pairs row by row.
    pub fn write_text(&self, path: &Path) -> Result<()> {
        let mut out = header(&self.grid);
        for j in 0..self.grid.ny {
            let row: Vec<String> = (0..self.grid.nx)
                .map(|i| {
                    let v = self.values[self.grid.idx(i, j)];
                    format!("{:.16e} {:.16e}", v[0], v[1])
                })
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Write a 0/255 mask image.
pub fn write_mask_pgm(path: &Path, grid: &Grid2D, mask: &[bool]) -> Result<()> {
    let pixels: Vec<u8> = (0..grid.ny)
        .rev()
        .flat_map(|j| (0..grid.nx).map(move |i| (i, j)))
        .map(|(i, j)| if mask[grid.idx(i, j)] { 255 } else { 0 })
        .collect();
    write_pgm_bytes(path, grid.nx, grid.ny, &pixels)
}

fn write_pgm_bytes(path: &Path, w: usize, h: usize, pixels: &[u8]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    f.write_all(pixels)?;
    Ok(())
}

fn header(g: &Grid2D) -> String {
    let chart = match g.chart {
        Chart::Cartesian => format!("cartesian({:.16e},{:.16e})", g.origin[0], g.origin[1]),
        Chart::Polar => format!("polar({:.16e},{:.16e})", g.origin[0], g.origin[0] + (g.nx - 1) as f64 * g.hx),
    };
    format!("{} {} {:.16e} {:.16e} {}\n", g.nx, g.ny, g.hx, g.hy, chart)
}

fn parse_header(line: &str) -> Result<Grid2D> {
    let bad = || Error::InvalidInput(format!("malformed field header {line:?}"));
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != 5 {
        return Err(bad());
    }
    let nx: usize = toks[0].parse().map_err(|_| bad())?;
    let ny: usize = toks[1].parse().map_err(|_| bad())?;
    let hx: f64 = toks[2].parse().map_err(|_| bad())?;
    let hy: f64 = toks[3].parse().map_err(|_| bad())?;
    let (name, args) = toks[4].split_once('(').ok_or_else(bad)?;
    let args: Vec<f64> = args
        .trim_end_matches(')')
        .split(',')
        .map(|t| t.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if args.len() != 2 {
        return Err(bad());
    }
    match name {
        "cartesian" => Grid2D::cartesian(nx, ny, hx, hy, [args[0], args[1]]),
        "polar" => Grid2D::polar(nx, ny, args[0], args[1]),
        _ => Err(bad()),
    }
}

fn weighted_sum(grid: &Grid2D, mask: Option<&[bool]>, f: impl Fn(usize) -> f64) -> f64 {
    let mut s = 0.0;
    for j in 0..grid.ny {
        for i in 0..grid.nx {
            let k = grid.idx(i, j);
            if mask.is_none_or(|m| m[k]) {
                s += grid.cell_weight(i, j) * f(k);
            }
        }
    }
    s
}

/// First derivative of `f` at index `i` of `n` samples with spacing `h`.
pub(crate) fn diff(f: impl Fn(usize) -> f64, i: usize, n: usize, h: f64, periodic: bool) -> f64 {
    if periodic {
        return (f((i + 1) % n) - f((i + n - 1) % n)) / (2.0 * h);
    }
    if i == 0 {
        (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
    } else if i == n - 1 {
        (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
    } else {
        (f(i + 1) - f(i - 1)) / (2.0 * h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn square(n: usize) -> Grid2D {
        Grid2D::cartesian(n, n, 1.0 / (n - 1) as f64, 1.0 / (n - 1) as f64, [0.0, 0.0]).unwrap()
    }

    #[test]
    fn gradient_of_linear_is_exact() {
        let f = ScalarField::from_fn(&square(16), |p| p[0]);
        for v in f.gradient().values {
            assert_relative_eq!(v[0], 1.0, epsilon = 1e-12);
            assert_relative_eq!(v[1], 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn gradient_of_quadratic_is_exact() {
        let g = square(16);
        let f = ScalarField::from_fn(&g, |p| p[0] * p[0]);
        for (k, v) in f.gradient().values.iter().enumerate() {
            assert_relative_eq!(v[0], 2.0 * g.position_of(k)[0], epsilon = 1e-12);
        }
    }

    #[test]
    fn polar_gradient_of_x() {
        let g = Grid2D::polar(16, 256, 0.5, 1.0).unwrap();
        let f = ScalarField::from_fn(&g, |p| p[0]);
        for v in f.gradient().values {
            assert_relative_eq!(v[0], 1.0, epsilon = 2e-4);
            assert!(v[1].abs() < 2e-4);
        }
    }

    #[test]
    fn text_round_trip_is_exact() {
        let dir = std::env::temp_dir().join(format!("umeit-field-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.txt");
        let f = ScalarField::from_fn(&square(9), |p| (p[0] * 3.1).sin() + 1.0 / 3.0);
        f.write_text(&path).unwrap();
        assert_eq!(ScalarField::read_text(&path).unwrap(), f);
        let g = Grid2D::polar(9, 12, 0.5, 1.0).unwrap();
        let f = ScalarField::from_fn(&g, |p| p[1]);
        f.write_text(&path).unwrap();
        let back = ScalarField::read_text(&path).unwrap();
        assert_eq!(back.values, f.values);
        assert_relative_eq!(back.grid.hx, g.hx, epsilon = 1e-15);
    }

    #[test]
    fn interpolation_reproduces_bilinear() {
        let f = ScalarField::from_fn(&square(11), |p| 1.0 + 2.0 * p[0] - p[1] + p[0] * p[1]);
        let p = [0.237, 0.711];
        assert_relative_eq!(f.interpolate(p), 1.0 + 2.0 * p[0] - p[1] + p[0] * p[1], epsilon = 1e-12);
    }
}
