//! Run configuration: a TOML document with one table per concern.
//!
//! Unknown keys are rejected everywhere. `--set section.key=value`
//! overrides are applied to the raw table before deserialisation, so they
//! go through exactly the same validation as the file.

use crate::bench::Scenario;
use crate::elliptic::EllipticOptions;
use crate::error::{Error, Result};
use crate::field::ScalarField;
use crate::geometry::{build_domain, Domain, Grid2D, Shape};
use crate::hypersolve::MarchConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// One term of a closed-form field. Fields are sums of terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Term {
    Constant {
        value: f64,
    },
    /// `gradient . x + offset`
    Linear {
        gradient: [f64; 2],
        #[serde(default)]
        offset: f64,
    },
    /// `amplitude exp(rate . x)`
    Exponential {
        amplitude: f64,
        rate: [f64; 2],
    },
    /// `amplitude exp(-rate |x - centre|^2)`
    Gaussian {
        amplitude: f64,
        centre: [f64; 2],
        rate: f64,
    },
    /// Smooth bump supported in the disc of the given radius.
    CompactBump {
        amplitude: f64,
        centre: [f64; 2],
        radius: f64,
    },
    /// `amplitude cos(k1 x1 + p1) cos(k2 x2 + p2)`
    TrigProduct {
        amplitude: f64,
        wavenumber: [f64; 2],
        #[serde(default)]
        phase: [f64; 2],
    },
    /// `amplitude cos(order phi) exp(-((r - radius) / width)^2)`
    AngularBump {
        amplitude: f64,
        order: f64,
        radius: f64,
        width: f64,
    },
    /// `inside` for `|x| < radius`, `outside` otherwise.
    Step {
        radius: f64,
        inside: f64,
        outside: f64,
    },
}

impl Term {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        match *self {
            Term::Constant { value } => value,
            Term::Linear { gradient, offset } => dot(gradient, p) + offset,
            Term::Exponential { amplitude, rate } => amplitude * dot(rate, p).exp(),
            Term::Gaussian { amplitude, centre, rate } => {
                amplitude * (-rate * ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2))).exp()
            }
            Term::CompactBump {
                amplitude,
                centre,
                radius,
            } => {
                let r2 = ((p[0] - centre[0]).powi(2) + (p[1] - centre[1]).powi(2)) / (radius * radius);
                if r2 < 1.0 {
                    amplitude * (1.0 - 1.0 / (1.0 - r2)).exp()
                } else {
                    0.0
                }
            }
            Term::TrigProduct {
                amplitude,
                wavenumber,
                phase,
            } => amplitude * (wavenumber[0] * p[0] + phase[0]).cos() * (wavenumber[1] * p[1] + phase[1]).cos(),
            Term::AngularBump {
                amplitude,
                order,
                radius,
                width,
            } => {
                let r = p[0].hypot(p[1]);
                amplitude * (order * p[1].atan2(p[0])).cos() * (-((r - radius) / width).powi(2)).exp()
            }
            Term::Step { radius, inside, outside } => {
                if p[0].hypot(p[1]) < radius {
                    inside
                } else {
                    outside
                }
            }
        }
    }
}

/// Sum of terms at a point.
pub fn eval_terms(terms: &[Term], p: [f64; 2]) -> f64 {
    terms.iter().map(|t| t.eval(p)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Disc,
    Ovoid,
    Annulus,
    Slab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub shape: ShapeKind,
    pub lx: Option<f64>,
    pub ly: Option<f64>,
    pub r: Option<f64>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub r_inner: Option<f64>,
    pub r_outer: Option<f64>,
    pub length: Option<f64>,
    pub half_width: Option<f64>,
    pub nx: usize,
    pub ny: usize,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            shape: ShapeKind::Rectangle,
            lx: Some(1.0),
            ly: Some(1.0),
            r: None,
            a: None,
            b: None,
            r_inner: None,
            r_outer: None,
            length: None,
            half_width: None,
            nx: 64,
            ny: 64,
        }
    }
}

fn need(v: Option<f64>, key: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Config(format!("domain.{key} is required for this shape")))
}

impl DomainConfig {
    pub fn to_shape(&self) -> Result<Shape> {
        Ok(match self.shape {
            ShapeKind::Rectangle => Shape::Rectangle {
                lx: need(self.lx, "lx")?,
                ly: need(self.ly, "ly")?,
            },
            ShapeKind::Disc => Shape::Disc { r: need(self.r, "r")? },
            ShapeKind::Ovoid => Shape::Ovoid {
                a: need(self.a, "a")?,
                b: need(self.b, "b")?,
            },
            ShapeKind::Annulus => Shape::Annulus {
                r_inner: need(self.r_inner, "r_inner")?,
                r_outer: need(self.r_outer, "r_outer")?,
            },
            ShapeKind::Slab => Shape::Slab {
                length: need(self.length, "length")?,
                half_width: need(self.half_width, "half_width")?,
            },
        })
    }

    pub fn build(&self) -> Result<Domain> {
        build_domain(&self.to_shape()?, self.nx, self.ny)
    }
}

/// Conductivity: a sum of terms, or a field file on the domain grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SigmaConfig {
    pub terms: Vec<Term>,
    pub file: Option<PathBuf>,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        SigmaConfig {
            terms: vec![Term::Constant { value: 1.0 }],
            file: None,
        }
    }
}

impl SigmaConfig {
    pub fn field(&self, grid: &Grid2D) -> Result<ScalarField> {
        match &self.file {
            Some(path) => {
                let f = ScalarField::read_text(path)?;
                if f.grid != *grid {
                    return Err(Error::Config(format!(
                        "sigma.file {} does not match the domain grid",
                        path.display()
                    )));
                }
                Ok(f)
            }
            None => Ok(ScalarField::from_fn(grid, |p| eval_terms(&self.terms, p))),
        }
    }

    /// Pointwise closure, for schemes that sample the conductivity off-grid.
    pub fn closure(&self) -> Result<impl Fn([f64; 2]) -> f64 + '_> {
        if self.file.is_some() {
            return Err(Error::Config("sigma.file cannot be used here; give sigma.terms".into()));
        }
        Ok(move |p| eval_terms(&self.terms, p))
    }
}

/// Boundary data and CGO illumination parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlluminationConfig {
    /// Dirichlet data as a sum of terms evaluated on the boundary.
    pub f: Vec<Term>,
    pub k_magnitude: f64,
    pub w: f64,
    pub slab_count: Option<usize>,
    /// Sub-grid refinement used to synthesise the CGO measurements.
    pub refine: usize,
    /// Relative size of the detuning applied to the CGO illuminations.
    pub perturbation: f64,
}

impl Default for IlluminationConfig {
    fn default() -> Self {
        IlluminationConfig {
            f: vec![Term::Linear {
                gradient: [1.0, 0.0],
                offset: 0.0,
            }],
            k_magnitude: 4.0,
            w: (std::f64::consts::PI / 8.0).cos(),
            slab_count: None,
            refine: 4,
            perturbation: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    pub m_max: i32,
    pub eps: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        ModulationConfig { m_max: 16, eps: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub levels: Vec<f64>,
    pub trials: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            levels: vec![1e-3, 3e-3, 1e-2],
            trials: 10,
        }
    }
}

/// Parameters of the benchmark studies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub scenario: Scenario,
    /// Tilts of the boundary data for the margin sweep; empty skips it.
    pub tilts: Vec<f64>,
    pub tilt_level: f64,
    /// Sobolev orders for the worst-case family; empty skips it.
    pub holder_s: Vec<f64>,
    pub holder_levels: Vec<f64>,
    pub omega0: f64,
    pub square_sizes: Vec<usize>,
    pub modes: Vec<usize>,
    pub disc_sizes: Vec<usize>,
    pub annulus_samples: usize,
    pub annulus_nr: usize,
    pub annulus_nphi: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            scenario: Scenario::Slab {
                n: 128,
                bump: 0.3,
                tilt: 0.0,
            },
            tilts: vec![0.0, 0.2, 0.35, 0.5, 0.6, 0.66, 0.7],
            tilt_level: 3e-3,
            holder_s: vec![2.0, 4.0, 8.0],
            holder_levels: vec![1e-2, 5e-3, 2.5e-3, 1.25e-3],
            omega0: 12.0,
            square_sizes: vec![32, 64],
            modes: vec![1, 2, 3],
            disc_sizes: vec![32, 64],
            annulus_samples: 20,
            annulus_nr: 96,
            annulus_nphi: 192,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write PGM previews of the main fields.
    pub pgm: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("run"),
            pgm: true,
        }
    }
}

/// Files produced by an earlier run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    /// Run directory of a `forward` run.
    pub run: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub domain: DomainConfig,
    pub sigma: SigmaConfig,
    pub illumination: IlluminationConfig,
    pub modulation: ModulationConfig,
    pub elliptic: EllipticOptions,
    pub march: MarchConfig,
    pub noise: NoiseConfig,
    pub bench: BenchConfig,
    pub output: OutputConfig,
    pub input: InputConfig,
}

impl RunConfig {
    /// Parses TOML text, applying `section.key=value` overrides first.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
    }

    /// Loads a TOML file, or the `config` object of a run manifest.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            let manifest: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let cfg = manifest
                .get("config")
                .ok_or_else(|| Error::Config("manifest has no config object".into()))?;
            let cfg: RunConfig = serde_json::from_value(cfg.clone()).map_err(|e| Error::Config(e.to_string()))?;
            return Self::from_toml_str(&cfg.to_toml()?, overrides);
        }
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    // Parse the value as TOML; bare words fall back to strings.
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let (last, parents) = path.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
