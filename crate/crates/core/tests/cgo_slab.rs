use umeit::cgo::{bump_conductivity, inner_mask, slab_reconstruct, synthesize_slab_bundle, CgoResult, CgoSpec};
use umeit::elliptic::{EllipticOptions, LinearSolver};
use umeit::error::{Error, Result};
use umeit::field::ScalarField;
use umeit::geometry::{build_domain, Domain, Shape};
use umeit::hypersolve::MarchConfig;

const A: f64 = 7.0;

fn slab() -> Domain {
    build_domain(
        &Shape::Slab {
            length: 1.0,
            half_width: A,
        },
        128,
        128,
    )
    .unwrap()
}

fn run(d: &Domain, amplitude: f64, perturbation: f64, slabs: usize) -> Result<CgoResult> {
    let opts = EllipticOptions {
        solver: LinearSolver::Direct,
        ..Default::default()
    };
    let bundle = synthesize_slab_bundle(d, bump_conductivity(amplitude), 4.0, 4, perturbation, &opts)?;
    let spec = CgoSpec {
        slab_count: Some(slabs),
        ..CgoSpec::new(4.0, A)
    };
    slab_reconstruct(d, &bundle, &spec, &MarchConfig::default())
}

fn error(d: &Domain, r: &CgoResult, amplitude: f64) -> f64 {
    let truth = ScalarField::from_fn(&d.grid, bump_conductivity(amplitude));
    let inner = inner_mask(d, &CgoSpec::new(4.0, A));
    assert!(
        inner.iter().zip(&r.result.valid).all(|(&i, &v)| !i || v),
        "inner region not covered"
    );
    r.result.sigma.relative_l2_error(&truth, Some(&inner))
}

#[test]
fn constant_conductivity_is_recovered_on_the_whole_inner_region() {
    let d = slab();
    let r = run(&d, 0.0, 0.0, 40).unwrap();
    let e = error(&d, &r, 0.0);
    assert!(e < 1e-2, "error {e:.3e}");
    assert!(r.consistency <= 2.0 * e, "consistency {:.3e} vs error {e:.3e}", r.consistency);
    assert_eq!(r.slabs.len(), 40);
    assert!(r
        .slabs
        .iter()
        .all(|s| s.margin_p > 0.0 && s.margin_q > 0.0 && s.condition.is_finite()));

    // Perturbed illuminations stay inside the open set and reconstruct as well.
    let p = run(&d, 0.0, 0.01, 40).unwrap();
    let ep = error(&d, &p, 0.0);
    assert!(p.open_set_angle < 0.2);
    assert!(ep < 1e-2 && ep <= 1.5 * e, "perturbed error {ep:.3e} vs {e:.3e}");

    // Doubling the slab count gives a consistent reconstruction.
    let q = run(&d, 0.0, 0.0, 80).unwrap();
    let inner = inner_mask(&d, &CgoSpec::new(4.0, A));
    let diff = q.result.sigma.relative_l2_error(&r.result.sigma, Some(&inner));
    assert!(diff < 3e-2, "N vs 2N difference {diff:.3e}");
}

#[test]
fn small_bump_is_recovered() {
    let d = slab();
    let r = run(&d, 0.002, 0.0, 40).unwrap();
    let e = error(&d, &r, 0.002);
    assert!(e < 1e-2, "error {e:.3e}");
}

#[test]
fn large_bump_leaves_the_open_set() {
    let d = slab();
    match run(&d, 0.1, 0.0, 40) {
        Err(Error::Precondition(msg)) => assert!(msg.contains("illuminations"), "{msg}"),
        other => panic!("expected a precondition failure, got {:?}", other.map(|r| r.consistency)),
    }
}
