//! Command line front end. Every subcommand writes a run directory holding
//! `manifest.json` (resolved configuration, metrics, artifact list) and its
//! output files; subcommands compose only through those files.

use crate::bench::{
    annulus_gradient_floor, holder_check, level_set_connected, loglog_slope, median, noninjectivity_demo, stability_sweep,
    tilt_sweep, Scenario,
};
use crate::cgo::{inner_mask, slab_reconstruct, synthesize_slab_bundle, CgoSpec};
use crate::config::{eval_terms, RunConfig, ShapeKind};
use crate::elliptic::{
    boundary_values, flux_balance, gradient, internal_functional, neumann_trace, solve_elliptic_with_stats, CauchyTrace,
};
use crate::error::{Error, Result};
use crate::field::{write_mask_pgm, ScalarField};
use crate::geometry::{Chart, Domain, Shape};
use crate::hypersolve::{march_nonlinear, march_polar, ReconstructionResult};
use crate::lorentz::{classify_boundary, metric_single, null_points};
use crate::modulation::{measure_j1_table, recover_h, Lattice, ModulationContext, Phase};
use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;
use serde_json::{json, Map, Value};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "umeit",
    version,
    about = "Ultrasound-modulated EIT: forward model, inversion and hyperbolic reconstruction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration, or the manifest.json of an earlier run.
    #[arg(short, long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set march.cfl=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Run directory; overrides `output.dir`.
    #[arg(short, long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Solve the forward problem and write u, H, sigma and the Cauchy data.
    Forward,
    /// Synthesise modulated boundary data and recover H by Fourier inversion.
    Modulate,
    /// Classify the boundary as spacelike, timelike or null.
    Classify,
    /// Reconstruct sigma from the H and Cauchy data of a forward run.
    Reconstruct,
    /// Forward solve and inward march on an annulus.
    Annulus,
    /// CGO slab reconstruction on a long slab.
    CgoSlab,
    /// Noise stability, margin sweep and worst-case family.
    BenchStability,
    /// Discrete non-injectivity on the square and the disc.
    BenchNoninjectivity,
    /// Gradient floor and level-set topology on the annulus.
    BenchAnnulus,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Forward => "forward",
            Command::Modulate => "modulate",
            Command::Classify => "classify",
            Command::Reconstruct => "reconstruct",
            Command::Annulus => "annulus",
            Command::CgoSlab => "cgo-slab",
            Command::BenchStability => "bench-stability",
            Command::BenchNoninjectivity => "bench-noninjectivity",
            Command::BenchAnnulus => "bench-annulus",
        }
    }
}

/// Output directory, collected metrics and artifact names.
struct Run {
    dir: PathBuf,
    artifacts: Vec<String>,
    metrics: Map<String, Value>,
}

impl Run {
    fn file(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(p, text)?;
        Ok(())
    }

    fn field(&mut self, name: &str, f: &ScalarField, pgm: bool, mask: Option<&[bool]>) -> Result<()> {
        f.write_text(&self.file(&format!("{name}.txt")))?;
        if pgm {
            f.write_pgm(&self.file(&format!("{name}.pgm")), mask)?;
        }
        Ok(())
    }
}

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Parses arguments, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

/// Runs a parsed command line and returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let cfg = match resolve_config(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 2;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cfg.output.dir) {
        eprintln!("error: cannot create {}: {e}", cfg.output.dir.display());
        return 2;
    }
    let mut run = Run {
        dir: cfg.output.dir.clone(),
        artifacts: Vec::new(),
        metrics: Map::new(),
    };
    let outcome = pool.install(|| execute(cli.command, &cfg, &mut run));
    let (status, code, message) = match &outcome {
        Ok(()) => ("ok", 0, None),
        Err(e) => ("error", e.exit_code(), Some(e.to_string())),
    };
    if let Some(msg) = &message {
        let p = run.file("failure_log.txt");
        if let Err(e) = std::fs::write(p, format!("{}: {msg}\n", cli.command.name())) {
            eprintln!("error: cannot write failure log: {e}");
        }
    }
    run.artifacts.push("manifest.json".into());
    let manifest = json!({
        "tool": "umeit",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": cli.command.name(),
        "status": status,
        "exit_code": code,
        "error": message,
        "threads": pool.current_num_threads(),
        "config": cfg,
        "metrics": run.metrics,
        "artifacts": run.artifacts,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    if let Err(e) = std::fs::write(run.dir.join("manifest.json"), text + "\n") {
        eprintln!("error: cannot write manifest: {e}");
        return 2;
    }
    match outcome {
        Ok(()) => {
            info!("{} finished in {}", cli.command.name(), run.dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            code
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p, &cli.set)?,
        None => RunConfig::from_toml_str("", &cli.set)?,
    };
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cmd: Command, cfg: &RunConfig, run: &mut Run) -> Result<()> {
    match cmd {
        Command::Forward => forward(cfg, run),
        Command::Modulate => modulate(cfg, run),
        Command::Classify => classify(cfg, run),
        Command::Reconstruct => reconstruct(cfg, run),
        Command::Annulus => annulus(cfg, run),
        Command::CgoSlab => cgo_slab(cfg, run),
        Command::BenchStability => bench_stability(cfg, run),
        Command::BenchNoninjectivity => bench_noninjectivity(cfg, run),
        Command::BenchAnnulus => bench_annulus(cfg, run),
    }
}

struct Forward {
    domain: Domain,
    sigma: ScalarField,
    u: ScalarField,
    h: ScalarField,
    traces: Vec<CauchyTrace>,
}

fn solve_forward(cfg: &RunConfig, f: impl Fn([f64; 2]) -> f64, run: &mut Run) -> Result<Forward> {
    let domain = cfg.domain.build()?;
    let sigma = cfg.sigma.field(&domain.grid)?;
    let fv = boundary_values(&domain, f);
    let sol = solve_elliptic_with_stats(&domain, &sigma, &fv, &cfg.elliptic)?;
    let h = internal_functional(&domain, &sigma, &sol.u);
    let traces = neumann_trace(&domain, &sigma, &sol.u, &fv)?;
    run.metric("solver_iterations", sol.stats.iterations);
    run.metric("solver_relative_residual", sol.stats.relative_residual);
    run.metric("flux_balance", flux_balance(&domain, &sigma, &sol.u, &fv)?);
    Ok(Forward {
        domain,
        sigma,
        u: sol.u,
        h,
        traces,
    })
}

fn boundary_data(cfg: &RunConfig) -> impl Fn([f64; 2]) -> f64 + '_ {
    move |p| eval_terms(&cfg.illumination.f, p)
}

fn forward(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let fw = solve_forward(cfg, boundary_data(cfg), run)?;
    let pgm = cfg.output.pgm;
    let mask = Some(&fw.domain.inside[..]);
    run.field("sigma", &fw.sigma, pgm, mask)?;
    run.field("u", &fw.u, pgm, mask)?;
    run.field("h", &fw.h, pgm, mask)?;
    let traces = serde_json::to_string(&fw.traces).map_err(|e| Error::InvalidInput(e.to_string()))?;
    run.write("traces.json", &traces)?;
    run.metric(
        "h_min",
        fw.h.values
            .iter()
            .zip(&fw.domain.inside)
            .filter(|p| *p.1)
            .map(|p| *p.0)
            .fold(f64::INFINITY, f64::min),
    );
    run.metric("h_max", fw.h.max_abs(mask));
    Ok(())
}

fn modulate(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let domain = cfg.domain.build()?;
    let sigma = cfg.sigma.field(&domain.grid)?;
    let f = boundary_values(&domain, boundary_data(cfg));
    let ctx = ModulationContext::new(&domain, &sigma, &f, &cfg.elliptic)?;
    let h_true = internal_functional(&domain, &sigma, &ctx.potential());
    let lattice = Lattice::for_domain(&domain, cfg.modulation.m_max);
    let table = measure_j1_table(&ctx, &lattice, cfg.modulation.eps)?;
    let rec = recover_h(&domain, &table, &lattice)?;
    let mut csv = String::from("m1,m2,phase,j1\n");
    for e in &table {
        let phase = match e.phase {
            Phase::Cos => "cos",
            Phase::Sin => "sin",
        };
        let _ = writeln!(csv, "{},{},{},{}", e.m1, e.m2, phase, num(e.j1));
    }
    run.write("j1_table.csv", &csv)?;
    run.field("h_recovered", &rec.h, cfg.output.pgm, None)?;
    run.field("h_true", &h_true, cfg.output.pgm, None)?;
    run.metric("table_entries", table.len());
    run.metric("h_relative_l2_error", rec.h.relative_l2_error(&h_true, None));
    run.metric("imaginary_ratio", rec.imaginary_ratio);
    run.metric("clipped_nodes", rec.clipped);
    Ok(())
}

fn classify(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let fw = solve_forward(cfg, boundary_data(cfg), run)?;
    let metric = metric_single(&fw.domain, &fw.u, &fw.h, cfg.march.g_min);
    let cls = classify_boundary(&fw.domain, &metric);
    cls.write_csv(&fw.domain, &run.file("classification.csv"))?;
    let nulls = null_points(&fw.domain, &cls);
    let mut csv = String::from("sample,arclength\n");
    for &(s, a) in &nulls {
        let _ = writeln!(csv, "{s},{}", num(a));
    }
    run.write("null_points.csv", &csv)?;
    run.metric("spacelike_fraction", cls.spacelike_fraction());
    run.metric("null_points", nulls.len());
    run.metric("tol_null", cls.tol_null);
    Ok(())
}

/// Marches the data and records coverage and trimming; an empty
/// reconstruction is a numerical abort.
fn march_and_record(
    domain: &Domain,
    h: &ScalarField,
    traces: &[CauchyTrace],
    cfg: &RunConfig,
    run: &mut Run,
) -> Result<ReconstructionResult> {
    let r = match domain.grid.chart {
        Chart::Cartesian => march_nonlinear(domain, h, traces, &cfg.march)?,
        Chart::Polar => march_polar(domain, h, traces, &cfg.march)?,
    };
    r.write_failure_log(&run.file("failure_log.csv"))?;
    write_mask_pgm(&run.file("valid.pgm"), &domain.grid, &r.valid)?;
    run.field("sigma_rec", &r.sigma, cfg.output.pgm, Some(&r.valid))?;
    run.field("u_rec", &r.u, false, None)?;
    let inside = domain.inside.iter().filter(|&&b| b).count();
    run.metric("valid_nodes", r.valid_count());
    run.metric("coverage", r.valid_count() as f64 / inside as f64);
    run.metric("substeps", r.substeps);
    run.metric("gradient_floor", r.gradient_floor);
    let trims: Map<String, Value> = r
        .trim_counts()
        .iter()
        .map(|(reason, n)| (reason.as_str().to_string(), json!(n)))
        .collect();
    run.metric("trimmed", trims);
    if r.valid_count() == 0 {
        return Err(Error::Abort("reconstruction left no valid nodes; see failure_log.csv".into()));
    }
    Ok(r)
}

fn reconstruct(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let input = cfg
        .input
        .run
        .as_ref()
        .ok_or_else(|| Error::Config("input.run must name a forward run directory".into()))?;
    let domain = cfg.domain.build()?;
    let h = ScalarField::read_text(&input.join("h.txt"))?;
    if h.grid != domain.grid {
        return Err(Error::Config(format!(
            "{}/h.txt does not match the [domain] grid",
            input.display()
        )));
    }
    let text = std::fs::read_to_string(input.join("traces.json"))?;
    let traces: Vec<CauchyTrace> = serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("traces.json: {e}")))?;
    let r = march_and_record(&domain, &h, &traces, cfg, run)?;
    let truth = input.join("sigma.txt");
    if truth.exists() {
        let s = ScalarField::read_text(&truth)?;
        run.metric("sigma_relative_l2_error", r.sigma.relative_l2_error(&s, Some(&r.valid)));
    }
    Ok(())
}

fn annulus(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let Shape::Annulus { r_inner, r_outer } = cfg.domain.to_shape()? else {
        return Err(Error::Config("annulus needs domain.shape = \"annulus\"".into()));
    };
    // Potential 1 on the inner circle and 0 on the outer one.
    let mid = 0.5 * (r_inner + r_outer);
    let fw = solve_forward(cfg, |p| if p[0].hypot(p[1]) < mid { 1.0 } else { 0.0 }, run)?;
    run.field("sigma", &fw.sigma, cfg.output.pgm, None)?;
    run.field("h", &fw.h, false, None)?;
    let r = march_and_record(&fw.domain, &fw.h, &fw.traces, cfg, run)?;
    run.metric(
        "sigma_relative_l2_error",
        r.sigma.relative_l2_error(&fw.sigma, Some(&r.valid)),
    );
    let g = gradient(&fw.domain, &fw.u).norm_sq();
    let min_grad = g
        .iter()
        .zip(&fw.domain.inside)
        .filter(|p| *p.1)
        .map(|p| p.0.sqrt())
        .fold(f64::INFINITY, f64::min);
    run.metric("min_gradient", min_grad);
    run.metric(
        "level_sets_connected",
        [0.25, 0.5, 0.75].iter().all(|&c| level_set_connected(&fw.u, c)),
    );
    Ok(())
}

fn cgo_slab(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    if cfg.domain.shape != ShapeKind::Slab {
        return Err(Error::Config("cgo-slab needs domain.shape = \"slab\"".into()));
    }
    let domain = cfg.domain.build()?;
    let Shape::Slab { half_width, .. } = domain.shape else {
        unreachable!()
    };
    let il = &cfg.illumination;
    let spec = CgoSpec {
        k_magnitude: il.k_magnitude,
        w: il.w,
        slab_count: il.slab_count,
        a: half_width,
    };
    spec.validate()?;
    let sigma_fn = cfg.sigma.closure()?;
    let bundle = synthesize_slab_bundle(&domain, &sigma_fn, il.k_magnitude, il.refine, il.perturbation, &cfg.elliptic)?;
    let res = slab_reconstruct(&domain, &bundle, &spec, &cfg.march)?;
    res.write_slab_csv(&run.file("slabs.csv"))?;
    res.result.write_failure_log(&run.file("failure_log.csv"))?;
    write_mask_pgm(&run.file("valid.pgm"), &domain.grid, &res.result.valid)?;
    run.field("sigma_rec", &res.result.sigma, cfg.output.pgm, Some(&res.result.valid))?;
    run.field("sigma_q", &res.sigma_q, false, None)?;
    let truth = ScalarField::from_fn(&domain.grid, &sigma_fn);
    let inner = inner_mask(&domain, &spec);
    let covered = inner.iter().zip(&res.result.valid).filter(|(&i, &v)| i && v).count();
    let inner_count = inner.iter().filter(|&&b| b).count();
    run.metric("slabs", res.slabs.len());
    run.metric("open_set_angle", res.open_set_angle);
    run.metric("consistency", res.consistency);
    run.metric("inner_coverage", covered as f64 / inner_count.max(1) as f64);
    let both: Vec<bool> = inner.iter().zip(&res.result.valid).map(|(&i, &v)| i && v).collect();
    run.metric(
        "sigma_relative_l2_error",
        res.result.sigma.relative_l2_error(&truth, Some(&both)),
    );
    Ok(())
}

fn bench_stability(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let b = &cfg.bench;
    let p = b.scenario.prepare(&cfg.march)?;
    run.metric("baseline_error", p.error());
    run.metric("theta_margin", p.theta);
    let recs = stability_sweep(&p, &cfg.noise.levels, cfg.noise.trials, cfg.seed);
    let mut csv = String::from("noise_level,trial,dh_h1,dcauchy_l2,dsigma_l2,theta_margin,ratio,censored\n");
    for r in &recs {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            num(r.noise_level),
            r.trial,
            num(r.dh_h1),
            num(r.dcauchy_l2),
            num(r.dsigma_l2),
            num(r.theta_margin),
            num(r.ratio),
            r.censored
        );
    }
    run.write("stability.csv", &csv)?;
    let medians: Vec<f64> = cfg
        .noise
        .levels
        .iter()
        .map(|&l| median(recs.iter().filter(|r| r.noise_level == l).map(|r| r.ratio).collect()))
        .collect();
    run.metric("median_ratios", &medians);
    run.metric("censored", recs.iter().filter(|r| r.censored).count());

    let slab_n = match b.scenario {
        Scenario::Slab { n, .. } => Some(n),
        Scenario::Annulus { .. } => None,
    };
    if let (Some(n), false) = (slab_n, b.tilts.is_empty()) {
        let rows = tilt_sweep(
            n,
            &b.tilts,
            b.tilt_level,
            cfg.noise.trials,
            cfg.seed.wrapping_add(1),
            &cfg.march,
        )?;
        let mut csv = String::from("tilt,theta_margin,median_ratio,censored\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{}",
                num(r.tilt),
                num(r.theta_margin),
                num(r.median_ratio),
                r.censored
            );
        }
        run.write("tilt.csv", &csv)?;
        let inv: Vec<f64> = rows.iter().map(|r| 1.0 / (r.theta_margin * r.theta_margin)).collect();
        let ratios: Vec<f64> = rows.iter().map(|r| r.median_ratio).collect();
        run.metric("tilt_slope", loglog_slope(&inv, &ratios));
    }
    if slab_n.is_some() && !b.holder_s.is_empty() {
        let mut csv = String::from("s,level,omega,dh_l2,dh_h1,dsigma_l2,constant\n");
        let mut summary = Vec::new();
        for &s in &b.holder_s {
            let rep = holder_check(&p, s, &b.holder_levels, b.omega0)?;
            for r in &rep.rows {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{},{},{}",
                    num(s),
                    num(r.level),
                    num(r.omega),
                    num(r.dh_l2),
                    num(r.dh_h1),
                    num(r.dsigma_l2),
                    num(r.constant)
                );
            }
            summary.push(json!({ "s": s, "exponent": rep.exponent, "constant_spread": rep.constant_spread }));
        }
        run.write("holder.csv", &csv)?;
        run.metric("holder", summary);
    }
    Ok(())
}

fn bench_noninjectivity(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let b = &cfg.bench;
    let r = noninjectivity_demo(&b.square_sizes, &b.modes, &b.disc_sizes);
    let mut csv = String::from("n,m,residual,trace_max,consistency\n");
    for s in &r.square {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            s.n,
            s.m,
            num(s.residual),
            num(s.trace_max),
            num(s.consistency)
        );
    }
    run.write("square.csv", &csv)?;
    let mut csv = String::from("n,sigma_median,sigma_min,singular_at_unit_aspect\n");
    for d in &r.disc {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            d.n,
            num(d.sigma_median),
            num(d.sigma_min),
            d.singular_at_unit_aspect
        );
    }
    run.write("disc.csv", &csv)?;
    run.metric("square_max_residual", r.square.iter().map(|s| s.residual).fold(0.0, f64::max));
    run.metric("disc_sigma_median", r.disc.iter().map(|d| d.sigma_median).collect::<Vec<_>>());
    Ok(())
}

fn bench_annulus(cfg: &RunConfig, run: &mut Run) -> Result<()> {
    let b = &cfg.bench;
    let r = annulus_gradient_floor(b.annulus_samples, cfg.seed, b.annulus_nr, b.annulus_nphi)?;
    let mut csv = String::from("sample,sigma_min,sigma_max,min_grad,level_sets_connected\n");
    for a in &r.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            a.sample,
            num(a.sigma_min),
            num(a.sigma_max),
            num(a.min_grad),
            a.level_sets_connected
        );
    }
    run.write("annulus_floor.csv", &csv)?;
    run.metric("analytic_floor", r.analytic_floor);
    run.metric("constant_floor", r.constant_floor);
    run.metric(
        "min_gradient",
        r.rows.iter().map(|a| a.min_grad).fold(f64::INFINITY, f64::min),
    );
    run.metric("all_connected", r.rows.iter().all(|a| a.level_sets_connected));
    Ok(())
}

/// Reads `manifest.json` of a run directory.
pub fn read_manifest(dir: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(e.to_string()))
}
