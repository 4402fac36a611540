//! Acceptance suite: one PASS/FAIL line per criterion. Failures are
//! reported but only turn into a non-zero exit with `UMEIT_ACCEPTANCE_STRICT=1`.
//! Positional arguments filter criteria by name.

use std::f64::consts::PI;
use std::time::Instant;
use umeit::bench::{
    annulus_gradient_floor, energy_bound_study, holder_check, loglog_slope, median, noninjectivity_demo, stability_sweep,
    tilt_sweep, Scenario,
};
use umeit::cgo::{bump_conductivity, inner_mask, slab_reconstruct, synthesize_slab_bundle, CgoSpec};
use umeit::elliptic::{boundary_values, flux_balance, internal_functional, solve_elliptic, EllipticOptions, LinearSolver};
use umeit::field::ScalarField;
use umeit::geometry::{build_domain, Shape};
use umeit::hypersolve::MarchConfig;
use umeit::lorentz::{classify_boundary, metric_single, null_points};
use umeit::modulation::{measure_j1_table, recover_h, Lattice, ModulationContext};

struct Outcome {
    pass: bool,
    detail: String,
}

fn forward_verification() -> Outcome {
    let t0 = Instant::now();
    let mut u_err: f64 = 0.0;
    let mut h_errors = Vec::new();
    let mut worst_flux: f64 = 0.0;
    for n in [32, 64, 128] {
        let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, n, n).unwrap();
        let sigma = ScalarField::from_fn(&d.grid, |p| p[0].exp());
        let f = boundary_values(&d, |p| (-p[0]).exp());
        let u = solve_elliptic(&d, &sigma, &f, &EllipticOptions::default()).unwrap();
        let exact = ScalarField::from_fn(&d.grid, |p| (-p[0]).exp());
        u_err = u_err.max(u.zip_map(&exact, |a, b| a - b).max_abs(None));
        h_errors.push(
            internal_functional(&d, &sigma, &u)
                .zip_map(&exact, |a, b| a - b)
                .l2_norm(None),
        );
        worst_flux = worst_flux.max(flux_balance(&d, &sigma, &u, &f).unwrap().abs());
    }
    let orders: Vec<f64> = h_errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: u_err <= 1e-9 && orders.iter().all(|&o| o >= 1.9) && worst_flux <= 1e-8 && secs < 30.0,
        detail: format!("max |u - exact| {u_err:.1e}, H orders {orders:.3?}, max |net flux| {worst_flux:.2e}, {secs:.1} s"),
    }
}

fn modulation_pipeline() -> Outcome {
    let t0 = Instant::now();
    let d = build_domain(&Shape::Rectangle { lx: 1.0, ly: 1.0 }, 64, 64).unwrap();
    let sigma = ScalarField::from_fn(&d.grid, |p| {
        1.0 + 0.3 * (-50.0 * ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2))).exp()
    });
    let f = boundary_values(&d, |p| p[0]);
    let opts = EllipticOptions::default();
    let ctx = ModulationContext::new(&d, &sigma, &f, &opts).unwrap();
    let h_true = internal_functional(&d, &sigma, &ctx.potential());
    let lattice = Lattice::for_domain(&d, 16);
    let table = measure_j1_table(&ctx, &lattice, 1e-3).unwrap();
    let rec = recover_h(&d, &table, &lattice).unwrap();
    let err = rec.h.relative_l2_error(&h_true, None);
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: err < 0.01 && secs < 300.0,
        detail: format!(
            "relative L2 error of H {err:.3e}, imaginary ratio {:.1e}, {secs:.1} s",
            rec.imaginary_ratio
        ),
    }
}

fn sci(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ")
}

fn boundary_classification() -> Outcome {
    // Disc with u = x1: null points where the normal meets e1 at 45 degrees.
    let d = build_domain(&Shape::Disc { r: 1.0 }, 96, 96).unwrap();
    let one = ScalarField::constant(&d.grid, 1.0);
    let f = boundary_values(&d, |p| p[0]);
    let u = solve_elliptic(&d, &one, &f, &EllipticOptions::default()).unwrap();
    let h = internal_functional(&d, &one, &u);
    let cls = classify_boundary(&d, &metric_single(&d, &u, &h, 1e-6));
    let spacing = d
        .samples
        .windows(2)
        .map(|w| (w[1].arclength - w[0].arclength).abs())
        .fold(0.0, f64::max);
    let angles: Vec<f64> = null_points(&d, &cls).iter().map(|&(_, s)| s).collect();
    let expected = [PI / 4.0, 3.0 * PI / 4.0, 5.0 * PI / 4.0, 7.0 * PI / 4.0];
    let worst = expected
        .iter()
        .map(|&t| {
            angles
                .iter()
                .map(|&a| (a - t).abs().min(2.0 * PI - (a - t).abs()))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let disc_ok = angles.len() == 4 && worst <= spacing;

    // Annulus with radial data: every sample spacelike with margin 1/2.
    let an = build_domain(
        &Shape::Annulus {
            r_inner: 0.5,
            r_outer: 1.0,
        },
        64,
        128,
    )
    .unwrap();
    let one = ScalarField::constant(&an.grid, 1.0);
    let f = boundary_values(&an, |p| if p[0].hypot(p[1]) < 0.75 { 1.0 } else { 0.0 });
    let u = solve_elliptic(&an, &one, &f, &EllipticOptions::default()).unwrap();
    let h = internal_functional(&an, &one, &u);
    let cls = classify_boundary(&an, &metric_single(&an, &u, &h, 1e-6));
    let dev = cls.margins.iter().map(|m| (m - 0.5).abs()).fold(0.0, f64::max);
    let hr = 0.5 / 63.0;
    let annulus_ok = cls.spacelike_fraction() == 1.0 && dev <= hr;
    Outcome {
        pass: disc_ok && annulus_ok,
        detail: format!(
            "disc: {} null points, worst offset {worst:.2e} vs spacing {spacing:.2e}; annulus: spacelike fraction {:.3}, max |margin - 0.5| {dev:.1e} (h {hr:.1e})",
            angles.len(),
            cls.spacelike_fraction()
        ),
    }
}

fn slab_closed_loop() -> Outcome {
    let t0 = Instant::now();
    let cfg = MarchConfig::default();
    let errs: Vec<f64> = [128, 256]
        .iter()
        .map(|&n| {
            Scenario::Slab { n, bump: 0.3, tilt: 0.0 }
                .prepare(&cfg)
                .map(|p| p.error())
                .unwrap_or(f64::NAN)
        })
        .collect();
    let ratio = errs[0] / errs[1];
    Outcome {
        pass: errs[0] <= 0.05 && ratio >= 1.7,
        detail: format!(
            "error {:.3e} at 128^2, {:.3e} at 256^2, ratio {ratio:.2}, {:.1} s",
            errs[0],
            errs[1],
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn annulus_global() -> Outcome {
    let t0 = Instant::now();
    let p = Scenario::Annulus {
        nr: 128,
        nphi: 256,
        bump: 0.2,
    }
    .prepare(&MarchConfig::default());
    let (err, cover) = match &p {
        Ok(p) => (p.error(), p.baseline().valid_count() as f64 / p.domain.grid.len() as f64),
        Err(_) => (f64::NAN, 0.0),
    };
    let floor = annulus_gradient_floor(20, 2024, 96, 192).unwrap();
    let min_grad = floor.rows.iter().map(|r| r.min_grad).fold(f64::INFINITY, f64::min);
    let connected = floor.rows.iter().all(|r| r.level_sets_connected);
    Outcome {
        pass: err <= 0.05 && cover == 1.0 && min_grad > 0.05 * floor.analytic_floor && connected,
        detail: format!(
            "error {err:.3e} on {:.0}% of the annulus; 20 random sigma: min |grad u| {min_grad:.3} (floor {:.3}, sigma=1 measured {:.3}), level sets connected: {connected}; {:.1} s",
            100.0 * cover,
            floor.analytic_floor,
            floor.constant_floor,
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn energy_bound() -> Outcome {
    let r = energy_bound_study(10_000, 10_000, 6);
    Outcome {
        pass: r.constant > 0.0 && r.violations == 0 && r.negative == 0,
        detail: format!(
            "fitted C {:.3e}, min test ratio {:.3e}, violations {}/{}",
            r.constant, r.min_test_ratio, r.violations, r.test
        ),
    }
}

fn stability_trend() -> Outcome {
    let t0 = Instant::now();
    let cfg = MarchConfig::default();
    let p = Scenario::Slab {
        n: 128,
        bump: 0.3,
        tilt: 0.0,
    }
    .prepare(&cfg)
    .unwrap();
    let levels = [1e-3, 3e-3, 1e-2];
    let recs = stability_sweep(&p, &levels, 10, 7);
    let medians: Vec<f64> = levels
        .iter()
        .map(|&l| median(recs.iter().filter(|r| r.noise_level == l).map(|r| r.ratio).collect()))
        .collect();
    let spread = medians.iter().cloned().fold(0.0, f64::max) / medians.iter().cloned().fold(f64::INFINITY, f64::min);
    let censored = recs.iter().filter(|r| r.censored).count();
    let rows = tilt_sweep(128, &[0.0, 0.2, 0.35, 0.5, 0.6, 0.66, 0.7], 3e-3, 10, 8, &cfg).unwrap();
    let inv: Vec<f64> = rows.iter().map(|r| 1.0 / (r.theta_margin * r.theta_margin)).collect();
    let ratios: Vec<f64> = rows.iter().map(|r| r.median_ratio).collect();
    let slope = loglog_slope(&inv, &ratios);
    Outcome {
        pass: spread < 3.0 && slope > 0.0,
        detail: format!(
            "median ratios [{}] (spread {spread:.2}, {censored} censored); tilt sweep theta {:.3?} -> ratios [{}], slope vs 1/theta^2 {slope:.3}; {:.1} s",
            sci(&medians),
            rows.iter().map(|r| r.theta_margin).collect::<Vec<_>>(),
            sci(&ratios),
            t0.elapsed().as_secs_f64()
        ),
    }
}

fn holder_exponent() -> Outcome {
    let p = Scenario::Slab {
        n: 128,
        bump: 0.3,
        tilt: 0.0,
    }
    .prepare(&MarchConfig::default())
    .unwrap();
    let levels = [1e-2, 5e-3, 2.5e-3, 1.25e-3];
    let reports: Vec<_> = [2.0, 4.0, 8.0]
        .iter()
        .map(|&s| holder_check(&p, s, &levels, 12.0).unwrap())
        .collect();
    let e2 = reports[0].exponent;
    Outcome {
        pass: (0.4..=0.6).contains(&e2) && reports[0].constant_spread <= 5.0,
        detail: format!(
            "exponents for s = 2, 4, 8: {:.3?} (theory 0.5, 0.75, 0.875); constant spread at s=2 {:.2}",
            reports.iter().map(|r| r.exponent).collect::<Vec<_>>(),
            reports[0].constant_spread
        ),
    }
}

fn noninjectivity() -> Outcome {
    let r = noninjectivity_demo(&[32, 64], &[1, 2, 3], &[32, 64]);
    let sq64: Vec<_> = r.square.iter().filter(|row| row.n == 64).collect();
    let square_ok = sq64.iter().all(|row| row.residual <= 1e-2 && row.trace_max <= 1e-12);
    let orders: Vec<f64> = (1..=3)
        .map(|m| {
            let c = |n| r.square.iter().find(|row| row.n == n && row.m == m).unwrap().consistency;
            (c(32) / c(64)).log2()
        })
        .collect();
    let (a, b) = (&r.disc[0], &r.disc[1]);
    let disc_ok = b.sigma_median < a.sigma_median && b.sigma_min < a.sigma_min;
    Outcome {
        pass: square_ok && disc_ok,
        detail: format!(
            "square n=64 residuals [{}], consistency orders {orders:.2?}; disc sigma_min median {:.3e} -> {:.3e}, min {:.3e} -> {:.3e} (n=32 -> 64), equal spacing singular: {}",
            sci(&sq64.iter().map(|row| row.residual).collect::<Vec<_>>()),
            a.sigma_median,
            b.sigma_median,
            a.sigma_min,
            b.sigma_min,
            a.singular_at_unit_aspect && b.singular_at_unit_aspect
        ),
    }
}

fn cgo_slab() -> Outcome {
    let t0 = Instant::now();
    let a = 7.0;
    let d = build_domain(
        &Shape::Slab {
            length: 1.0,
            half_width: a,
        },
        128,
        128,
    )
    .unwrap();
    let spec = CgoSpec {
        slab_count: Some(40),
        ..CgoSpec::new(4.0, a)
    };
    let opts = EllipticOptions {
        solver: LinearSolver::Direct,
        ..Default::default()
    };
    let cfg = MarchConfig::default();
    let run = |amp: f64, pert: f64| {
        let sigma = bump_conductivity(amp);
        let truth = ScalarField::from_fn(&d.grid, sigma);
        let bundle = synthesize_slab_bundle(&d, sigma, 4.0, 4, pert, &opts)?;
        let r = slab_reconstruct(&d, &bundle, &spec, &cfg)?;
        let inner = inner_mask(&d, &spec);
        let full = inner.iter().zip(&r.result.valid).all(|(&i, &v)| !i || v);
        let err = r.result.sigma.relative_l2_error(&truth, Some(&inner));
        let margins = r.slabs.iter().all(|s| s.margin_p > 0.0 && s.margin_q > 0.0);
        Ok::<_, umeit::error::Error>((err, r.consistency, full, margins, r.open_set_angle))
    };
    let describe = |o: &Result<(f64, f64, bool, bool, f64), umeit::error::Error>| match o {
        Ok((e, c, full, m, ang)) => {
            format!("error {e:.3e}, consistency {c:.3e}, covered {full}, margins positive {m}, face angle {ang:.1e}")
        }
        Err(e) => format!("{e}"),
    };
    let target = run(0.1, 0.0);
    let reference = run(0.0, 0.0);
    let perturbed = run(0.0, 0.01);
    let pass = match (&target, &perturbed) {
        (Ok((e, c, full, m, _)), Ok((ep, _, fp, _, _))) => *e <= 0.05 && *c <= 2.0 * e && *full && *m && *fp && *ep <= 0.05,
        _ => false,
    };
    Outcome {
        pass,
        detail: format!(
            "amplitude 0.1: {}; sigma = 1: {}; sigma = 1 with 1% perturbed illuminations: {}; {:.1} s",
            describe(&target),
            describe(&reference),
            describe(&perturbed),
            t0.elapsed().as_secs_f64()
        ),
    }
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        ("1 forward verification", forward_verification),
        ("2 modulation pipeline", modulation_pipeline),
        ("3 boundary classification", boundary_classification),
        ("4 slab closed loop", slab_closed_loop),
        ("5 annulus global reconstruction", annulus_global),
        ("6 energy bound", energy_bound),
        ("7 stability trend", stability_trend),
        ("8 holder exponent", holder_exponent),
        ("9 non-injectivity", noninjectivity),
        ("10 cgo slab scheme", cgo_slab),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let strict = std::env::var("UMEIT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!("criterion {name}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        println!("{} criteria failed: {}", failed.len(), failed.join(", "));
        if strict {
            std::process::exit(1);
        }
    }
}
