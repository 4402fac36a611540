//! C ABI for the umeit library.
//!
//! Objects are opaque handles created by `umeit_*_new` or returned through
//! out-parameters, and released with the matching `umeit_*_free`. Every
//! function returns a [`UmeitStatus`]; on failure the message is available
//! from [`umeit_last_error`] on the same thread until the next call.
//! Panics never cross the boundary: they are reported as `UMEIT_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use umeit::elliptic::{boundary_values, internal_functional, neumann_trace, solve_elliptic, CauchyTrace, EllipticOptions};
use umeit::field::ScalarField;
use umeit::geometry::{build_domain, Chart, Domain, Shape};
use umeit::hypersolve::{march_nonlinear, march_polar, MarchConfig, ReconstructionResult};
use umeit::lorentz::{classify_boundary, metric_single, null_points};
use umeit::march::Direction;
use umeit::Error;

/// Result of every call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmeitStatus {
    Ok = 0,
    /// Null pointer, bad size or malformed parameter.
    InvalidArgument = 1,
    /// A mathematical precondition does not hold.
    Precondition = 2,
    /// The computation started but could not finish.
    NumericalAbort = 3,
    /// Internal error; the library state is unchanged.
    Panic = 4,
}

/// Domain shapes accepted by [`umeit_domain_new`].
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UmeitShapeKind {
    /// `(0, p0) x (0, p1)`
    Rectangle = 0,
    /// Radius `p0`, centred at the origin.
    Disc = 1,
    /// Semi-axes `p0`, `p1`.
    Ovoid = 2,
    /// `p0 < |x| < p1`, polar grid with `nx` radial and `ny` angular nodes.
    Annulus = 3,
    /// `(0, p0) x (-p1, p1)`
    Slab = 4,
}

/// Marching parameters; start from [`umeit_march_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UmeitMarchOptions {
    pub cfl: f64,
    pub g_min: f64,
    pub margin_min: f64,
    pub picard_iters: u32,
}

pub struct UmeitDomain {
    inner: Domain,
}

pub struct UmeitField {
    inner: ScalarField,
}

/// A solved forward problem: potential, internal functional and Cauchy data.
pub struct UmeitForward {
    domain: Domain,
    u: ScalarField,
    h: ScalarField,
    traces: Vec<CauchyTrace>,
}

pub struct UmeitReconstruction {
    inner: ReconstructionResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(UmeitStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::InvalidInput(_) | Error::Config(_) | Error::Io(_) => UmeitStatus::InvalidArgument,
            Error::Precondition(_) => UmeitStatus::Precondition,
            Error::NotConverged { .. } | Error::Abort(_) => UmeitStatus::NumericalAbort,
        };
        Failure(status, e.to_string())
    }
}

fn bad(msg: &str) -> Failure {
    Failure(UmeitStatus::InvalidArgument, msg.to_string())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UmeitStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UmeitStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            UmeitStatus::Panic
        }
    }
}

unsafe fn obj<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| bad(&format!("{what} is null")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| bad(&format!("{what} is null")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(bad(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(bad(&format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn umeit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn umeit_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => panic!("version string"),
    };
    VERSION.as_ptr()
}

#[no_mangle]
pub extern "C" fn umeit_march_options_default() -> UmeitMarchOptions {
    let d = MarchConfig::default();
    UmeitMarchOptions {
        cfl: d.cfl,
        g_min: d.g_min,
        margin_min: d.margin_min,
        picard_iters: d.picard_iters as u32,
    }
}

/// Builds a domain and its grid. `kind` is a [`UmeitShapeKind`] value.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_new(
    kind: u32,
    p0: f64,
    p1: f64,
    nx: usize,
    ny: usize,
    out_domain: *mut *mut UmeitDomain,
) -> UmeitStatus {
    guard(|| {
        let slot = out(out_domain, "out_domain")?;
        let shape = match kind {
            0 => Shape::Rectangle { lx: p0, ly: p1 },
            1 => Shape::Disc { r: p0 },
            2 => Shape::Ovoid { a: p0, b: p1 },
            3 => Shape::Annulus {
                r_inner: p0,
                r_outer: p1,
            },
            4 => Shape::Slab {
                length: p0,
                half_width: p1,
            },
            k => return Err(bad(&format!("unknown shape kind {k}"))),
        };
        *slot = boxed(UmeitDomain {
            inner: build_domain(&shape, nx, ny)?,
        });
        Ok(())
    })
}

/// # Safety
/// `domain` must be null or a handle from [`umeit_domain_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_free(domain: *mut UmeitDomain) {
    release(domain)
}

/// Number of grid nodes (`nx * ny`).
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_node_count(domain: *const UmeitDomain, out_count: *mut usize) -> UmeitStatus {
    guard(|| {
        *out(out_count, "out_count")? = obj(domain, "domain")?.inner.grid.len();
        Ok(())
    })
}

/// Cartesian position of every node, interleaved `x, y`; `len` must be
/// twice the node count. Node `i + nx * j` is the `(i, j)` grid node.
///
/// # Safety
/// `xy` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_node_positions(domain: *const UmeitDomain, xy: *mut f64, len: usize) -> UmeitStatus {
    guard(|| {
        let g = &obj(domain, "domain")?.inner.grid;
        if len != 2 * g.len() {
            return Err(bad(&format!("expected {} doubles, got {len}", 2 * g.len())));
        }
        let xy = slice_mut(xy, len, "xy")?;
        for n in 0..g.len() {
            let p = g.position_of(n);
            xy[2 * n] = p[0];
            xy[2 * n + 1] = p[1];
        }
        Ok(())
    })
}

/// Number of boundary samples carrying Dirichlet and Neumann data.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_boundary_count(domain: *const UmeitDomain, out_count: *mut usize) -> UmeitStatus {
    guard(|| {
        *out(out_count, "out_count")? = obj(domain, "domain")?.inner.samples.len();
        Ok(())
    })
}

/// Positions of the boundary samples, interleaved `x, y`.
///
/// # Safety
/// `xy` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_domain_boundary_positions(domain: *const UmeitDomain, xy: *mut f64, len: usize) -> UmeitStatus {
    guard(|| {
        let d = &obj(domain, "domain")?.inner;
        if len != 2 * d.samples.len() {
            return Err(bad(&format!("expected {} doubles, got {len}", 2 * d.samples.len())));
        }
        let xy = slice_mut(xy, len, "xy")?;
        for (k, s) in d.samples.iter().enumerate() {
            xy[2 * k] = s.position[0];
            xy[2 * k + 1] = s.position[1];
        }
        Ok(())
    })
}

/// Copies `len` node values into a new field on the domain grid.
///
/// # Safety
/// `values` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_field_new(
    domain: *const UmeitDomain,
    values: *const f64,
    len: usize,
    out_field: *mut *mut UmeitField,
) -> UmeitStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        let grid = obj(domain, "domain")?.inner.grid.clone();
        let v = slice(values, len, "values")?.to_vec();
        *slot = boxed(UmeitField {
            inner: ScalarField::new(grid, v)?,
        });
        Ok(())
    })
}

/// # Safety
/// `field` must be null or a live field handle.
#[no_mangle]
pub unsafe extern "C" fn umeit_field_free(field: *mut UmeitField) {
    release(field)
}

/// Copies the node values out; `len` must equal the node count.
///
/// # Safety
/// `values` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_field_values(field: *const UmeitField, values: *mut f64, len: usize) -> UmeitStatus {
    guard(|| {
        let f = &obj(field, "field")?.inner;
        if len != f.values.len() {
            return Err(bad(&format!("expected {} doubles, got {len}", f.values.len())));
        }
        slice_mut(values, len, "values")?.copy_from_slice(&f.values);
        Ok(())
    })
}

/// Solves `div(sigma grad u) = 0` with Dirichlet data `f` given at the
/// boundary samples, and derives `H` and the Neumann data.
///
/// # Safety
/// Handles must be live; `f` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_forward_solve(
    domain: *const UmeitDomain,
    sigma: *const UmeitField,
    f: *const f64,
    len: usize,
    out_forward: *mut *mut UmeitForward,
) -> UmeitStatus {
    guard(|| {
        let slot = out(out_forward, "out_forward")?;
        let d = &obj(domain, "domain")?.inner;
        let s = &obj(sigma, "sigma")?.inner;
        if len != d.samples.len() {
            return Err(bad(&format!("expected {} boundary values, got {len}", d.samples.len())));
        }
        let fv = slice(f, len, "f")?;
        let u = solve_elliptic(d, s, fv, &EllipticOptions::default())?;
        let h = internal_functional(d, s, &u);
        let traces = neumann_trace(d, s, &u, fv)?;
        *slot = boxed(UmeitForward {
            domain: d.clone(),
            u,
            h,
            traces,
        });
        Ok(())
    })
}

/// Convenience: Dirichlet data `f(x) = a x1 + b x2 + c` at the samples.
///
/// # Safety
/// `f` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn umeit_affine_boundary_data(
    domain: *const UmeitDomain,
    a: f64,
    b: f64,
    c: f64,
    f: *mut f64,
    len: usize,
) -> UmeitStatus {
    guard(|| {
        let d = &obj(domain, "domain")?.inner;
        if len != d.samples.len() {
            return Err(bad(&format!("expected {} boundary values, got {len}", d.samples.len())));
        }
        slice_mut(f, len, "f")?.copy_from_slice(&boundary_values(d, |p| a * p[0] + b * p[1] + c));
        Ok(())
    })
}

/// # Safety
/// `forward` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn umeit_forward_free(forward: *mut UmeitForward) {
    release(forward)
}

/// New field holding the potential `u`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_forward_potential(forward: *const UmeitForward, out_field: *mut *mut UmeitField) -> UmeitStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        *slot = boxed(UmeitField {
            inner: obj(forward, "forward")?.u.clone(),
        });
        Ok(())
    })
}

/// New field holding the internal functional `H = sigma |grad u|^2`.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_forward_functional(forward: *const UmeitForward, out_field: *mut *mut UmeitField) -> UmeitStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        *slot = boxed(UmeitField {
            inner: obj(forward, "forward")?.h.clone(),
        });
        Ok(())
    })
}

/// Fraction of spacelike boundary samples and number of null crossings for
/// the metric of a single illumination.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_forward_classify(
    forward: *const UmeitForward,
    g_min: f64,
    out_spacelike_fraction: *mut f64,
    out_null_points: *mut usize,
) -> UmeitStatus {
    guard(|| {
        let fw = obj(forward, "forward")?;
        let frac = out(out_spacelike_fraction, "out_spacelike_fraction")?;
        let nulls = out(out_null_points, "out_null_points")?;
        let cls = classify_boundary(&fw.domain, &metric_single(&fw.domain, &fw.u, &fw.h, g_min));
        *frac = cls.spacelike_fraction();
        *nulls = null_points(&fw.domain, &cls).len();
        Ok(())
    })
}

/// Reconstructs `sigma` from the `H` and Cauchy data of a forward solution.
/// `h` overrides the stored functional when non-null (e.g. noisy data).
/// `options` may be null for defaults.
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_reconstruct(
    forward: *const UmeitForward,
    h: *const UmeitField,
    options: *const UmeitMarchOptions,
    out_reconstruction: *mut *mut UmeitReconstruction,
) -> UmeitStatus {
    guard(|| {
        let slot = out(out_reconstruction, "out_reconstruction")?;
        let fw = obj(forward, "forward")?;
        let h = if h.is_null() { &fw.h } else { &obj(h, "h")?.inner };
        let o = options.as_ref().copied().unwrap_or_else(|| umeit_march_options_default());
        let chart = fw.domain.grid.chart;
        let cfg = MarchConfig {
            direction: if chart == Chart::Polar {
                Direction::RadialInward
            } else {
                Direction::AxisX1
            },
            cfl: o.cfl,
            g_min: o.g_min,
            margin_min: o.margin_min,
            picard_iters: o.picard_iters as usize,
        };
        let r = match chart {
            Chart::Cartesian => march_nonlinear(&fw.domain, h, &fw.traces, &cfg)?,
            Chart::Polar => march_polar(&fw.domain, h, &fw.traces, &cfg)?,
        };
        if r.valid_count() == 0 {
            return Err(Failure(
                UmeitStatus::NumericalAbort,
                "reconstruction left no valid nodes".into(),
            ));
        }
        *slot = boxed(UmeitReconstruction { inner: r });
        Ok(())
    })
}

/// # Safety
/// `reconstruction` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn umeit_reconstruction_free(reconstruction: *mut UmeitReconstruction) {
    release(reconstruction)
}

/// New field with the reconstructed conductivity (zero outside the valid region).
///
/// # Safety
/// Pointers must be valid or null.
#[no_mangle]
pub unsafe extern "C" fn umeit_reconstruction_sigma(
    r: *const UmeitReconstruction,
    out_field: *mut *mut UmeitField,
) -> UmeitStatus {
    guard(|| {
        let slot = out(out_field, "out_field")?;
        *slot = boxed(UmeitField {
            inner: obj(r, "reconstruction")?.inner.sigma.clone(),
        });
        Ok(())
    })
}

/// Validity mask (1 = reconstructed) and the number of valid nodes.
/// `mask` may be null when only the count is wanted.
///
/// # Safety
/// `mask` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn umeit_reconstruction_valid(
    r: *const UmeitReconstruction,
    mask: *mut u8,
    len: usize,
    out_count: *mut usize,
) -> UmeitStatus {
    guard(|| {
        let r = &obj(r, "reconstruction")?.inner;
        *out(out_count, "out_count")? = r.valid_count();
        if !mask.is_null() {
            if len != r.valid.len() {
                return Err(bad(&format!("expected {} bytes, got {len}", r.valid.len())));
            }
            for (m, &v) in slice_mut(mask, len, "mask")?.iter_mut().zip(&r.valid) {
                *m = v as u8;
            }
        }
        Ok(())
    })
}
