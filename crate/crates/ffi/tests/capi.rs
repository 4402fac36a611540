use std::ffi::CStr;
use std::path::Path;
use std::ptr;
use umeit_ffi::*;

fn last_error() -> String {
    let p = umeit_last_error();
    assert!(!p.is_null(), "no error message recorded");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn domain(kind: UmeitShapeKind, p0: f64, p1: f64, n: usize) -> *mut UmeitDomain {
    let mut d = ptr::null_mut();
    assert_eq!(umeit_domain_new(kind as u32, p0, p1, n, n, &mut d), UmeitStatus::Ok);
    d
}

unsafe fn values(f: *const UmeitField, len: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    assert_eq!(umeit_field_values(f, v.as_mut_ptr(), len), UmeitStatus::Ok);
    v
}

/// Forward solve of `sigma` with data `x1` on a slab.
unsafe fn forward(d: *const UmeitDomain, sigma: impl Fn(f64, f64) -> f64) -> *mut UmeitForward {
    let mut n = 0;
    assert_eq!(umeit_domain_node_count(d, &mut n), UmeitStatus::Ok);
    let mut xy = vec![0.0; 2 * n];
    assert_eq!(umeit_domain_node_positions(d, xy.as_mut_ptr(), xy.len()), UmeitStatus::Ok);
    let s: Vec<f64> = xy.chunks(2).map(|p| sigma(p[0], p[1])).collect();
    let mut field = ptr::null_mut();
    assert_eq!(umeit_field_new(d, s.as_ptr(), s.len(), &mut field), UmeitStatus::Ok);
    let mut m = 0;
    assert_eq!(umeit_domain_boundary_count(d, &mut m), UmeitStatus::Ok);
    let mut f = vec![0.0; m];
    assert_eq!(
        umeit_affine_boundary_data(d, 1.0, 0.0, 0.0, f.as_mut_ptr(), m),
        UmeitStatus::Ok
    );
    let mut fw = ptr::null_mut();
    let st = umeit_forward_solve(d, field, f.as_ptr(), m, &mut fw);
    umeit_field_free(field);
    assert_eq!(
        st,
        UmeitStatus::Ok,
        "{}",
        if st == UmeitStatus::Ok { String::new() } else { last_error() }
    );
    fw
}

#[test]
fn closed_loop_through_the_c_abi() {
    unsafe {
        let d = domain(UmeitShapeKind::Slab, 1.0, 1.0, 64);
        let truth = |x: f64, y: f64| 1.0 + 0.3 * (-50.0 * ((x - 0.35).powi(2) + y * y)).exp();
        let fw = forward(d, truth);

        let mut r = ptr::null_mut();
        assert_eq!(umeit_reconstruct(fw, ptr::null(), ptr::null(), &mut r), UmeitStatus::Ok);
        let mut n = 0;
        umeit_domain_node_count(d, &mut n);
        let mut mask = vec![0u8; n];
        let mut count = 0;
        assert_eq!(
            umeit_reconstruction_valid(r, mask.as_mut_ptr(), n, &mut count),
            UmeitStatus::Ok
        );
        assert_eq!(mask.iter().filter(|&&m| m == 1).count(), count);
        assert!(count > n / 3);

        let mut sf = ptr::null_mut();
        assert_eq!(umeit_reconstruction_sigma(r, &mut sf), UmeitStatus::Ok);
        let rec = values(sf, n);
        let mut xy = vec![0.0; 2 * n];
        umeit_domain_node_positions(d, xy.as_mut_ptr(), 2 * n);
        let (mut num, mut den) = (0.0, 0.0);
        for k in (0..n).filter(|&k| mask[k] == 1) {
            let t = truth(xy[2 * k], xy[2 * k + 1]);
            num += (rec[k] - t).powi(2);
            den += t * t;
        }
        assert!((num / den).sqrt() < 0.02, "relative error {}", (num / den).sqrt());

        // Custom options reach the marcher: a stricter margin shrinks the region.
        let opts = UmeitMarchOptions {
            margin_min: 0.999,
            ..umeit_march_options_default()
        };
        let mut r2 = ptr::null_mut();
        assert_eq!(umeit_reconstruct(fw, ptr::null(), &opts, &mut r2), UmeitStatus::Ok);
        let mut count2 = 0;
        assert_eq!(
            umeit_reconstruction_valid(r2, ptr::null_mut(), 0, &mut count2),
            UmeitStatus::Ok
        );
        assert!(count2 < count);

        umeit_field_free(sf);
        umeit_reconstruction_free(r);
        umeit_reconstruction_free(r2);
        umeit_forward_free(fw);
        umeit_domain_free(d);
    }
}

#[test]
fn unit_conductivity_gives_unit_functional_and_disc_null_points() {
    unsafe {
        let d = domain(UmeitShapeKind::Rectangle, 1.0, 1.0, 33);
        let fw = forward(d, |_, _| 1.0);
        let mut h = ptr::null_mut();
        assert_eq!(umeit_forward_functional(fw, &mut h), UmeitStatus::Ok);
        assert!(values(h, 33 * 33).iter().all(|v| (v - 1.0).abs() < 1e-8));
        let mut u = ptr::null_mut();
        assert_eq!(umeit_forward_potential(fw, &mut u), UmeitStatus::Ok);
        umeit_field_free(h);
        umeit_field_free(u);
        umeit_forward_free(fw);
        umeit_domain_free(d);

        let disc = domain(UmeitShapeKind::Disc, 1.0, 0.0, 96);
        let fw = forward(disc, |_, _| 1.0);
        let (mut frac, mut nulls) = (0.0, 0);
        assert_eq!(umeit_forward_classify(fw, 1e-6, &mut frac, &mut nulls), UmeitStatus::Ok);
        assert_eq!(nulls, 4);
        assert!((frac - 0.5).abs() < 0.05, "{frac}");
        umeit_forward_free(fw);
        umeit_domain_free(disc);
    }
}

#[test]
fn errors_are_reported_with_status_and_message() {
    unsafe {
        let mut d = ptr::null_mut();
        assert_eq!(umeit_domain_new(9, 1.0, 1.0, 8, 8, &mut d), UmeitStatus::InvalidArgument);
        assert!(last_error().contains("shape kind"));
        assert!(d.is_null());
        assert_eq!(umeit_domain_new(0, -1.0, 1.0, 8, 8, &mut d), UmeitStatus::InvalidArgument);
        assert_eq!(
            umeit_domain_new(0, 1.0, 1.0, 8, 8, ptr::null_mut()),
            UmeitStatus::InvalidArgument
        );
        assert!(last_error().contains("out_domain"));

        let d = domain(UmeitShapeKind::Rectangle, 1.0, 1.0, 8);
        let mut count = 0;
        assert_eq!(umeit_domain_node_count(ptr::null(), &mut count), UmeitStatus::InvalidArgument);
        let short = [1.0; 10];
        let mut f = ptr::null_mut();
        assert_eq!(
            umeit_field_new(d, short.as_ptr(), short.len(), &mut f),
            UmeitStatus::InvalidArgument
        );

        // Conductivity below the ellipticity floor violates a precondition.
        let low = vec![0.01; 64];
        assert_eq!(umeit_field_new(d, low.as_ptr(), 64, &mut f), UmeitStatus::Ok);
        let mut m = 0;
        umeit_domain_boundary_count(d, &mut m);
        let data = vec![0.0; m];
        let mut fw = ptr::null_mut();
        assert_eq!(
            umeit_forward_solve(d, f, data.as_ptr(), m, &mut fw),
            UmeitStatus::Precondition
        );
        assert!(last_error().contains("sigma_min"), "{}", last_error());
        assert_eq!(
            umeit_forward_solve(d, f, data.as_ptr(), m + 1, &mut fw),
            UmeitStatus::InvalidArgument
        );

        // A successful call clears the message.
        assert_eq!(umeit_domain_node_count(d, &mut count), UmeitStatus::Ok);
        assert!(umeit_last_error().is_null());

        // Freeing null is a no-op.
        umeit_field_free(ptr::null_mut());
        umeit_field_free(f);
        umeit_domain_free(d);
    }
}

#[test]
fn version_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(umeit_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/umeit.h")).unwrap();
    for name in [
        "umeit_domain_new",
        "umeit_forward_solve",
        "umeit_reconstruct",
        "umeit_last_error",
        "UMEIT_STATUS_NUMERICAL_ABORT",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
    let src = std::env::temp_dir().join(format!("umeit-header-{}.c", std::process::id()));
    std::fs::write(
        &src,
        "#include \"umeit.h\"\nint main(void) { UmeitMarchOptions o = umeit_march_options_default(); (void)o; return UMEIT_STATUS_OK; }\n",
    )
    .unwrap();
    let status = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(dir.join("include"))
        .arg(&src)
        .status()
        .expect("a C compiler is available");
    std::fs::remove_file(&src).ok();
    assert!(status.success());
}
