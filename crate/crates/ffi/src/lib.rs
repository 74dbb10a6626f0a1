//! C ABI over the thermoeit solvers.
//!
//! Every entry point returns a [`ThermoeitStatus`]. On failure the message is
//! kept in a thread-local slot readable through [`thermoeit_last_error`].
//! Objects cross the boundary as opaque handles created by `*_new`/`*_parse`
//! and released by the matching `*_free`. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::Arc;

use thermoeit::config::ExperimentConfig;
use thermoeit::heat::{Envelope, FluxTrace, ForwardModel, TimeGrid};
use thermoeit::mesh::BoundaryTrace;
use thermoeit::Error;

/// Result codes of every exported function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThermoeitStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    Config = 3,
    Solver = 4,
    Identification = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Time envelope selector for heat runs.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ThermoeitEnvelope {
    Ramp = 0,
    Impulse = 1,
}

/// Parsed experiment configuration.
pub struct ThermoeitConfig {
    inner: ExperimentConfig,
}

/// Meshed forward model with sampled coefficients.
pub struct ThermoeitModel {
    inner: ForwardModel,
}

/// Boundary heat-flux trace: `times x channels` samples.
pub struct ThermoeitTrace {
    inner: FluxTrace,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> ThermoeitStatus {
    match e {
        Error::InvalidInput(_) => ThermoeitStatus::InvalidInput,
        Error::Config { .. } => ThermoeitStatus::Config,
        Error::Solver(_) => ThermoeitStatus::Solver,
        Error::Identification { .. } => ThermoeitStatus::Identification,
        Error::Io(_) => ThermoeitStatus::Io,
    }
}

enum Fail {
    Status(ThermoeitStatus, String),
    Core(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Core(e)
    }
}

fn null(what: &str) -> Fail {
    Fail::Status(ThermoeitStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status plus the last-error message.
fn guarded(f: impl FnOnce() -> Result<(), Fail>) -> ThermoeitStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ThermoeitStatus::Ok
        }
        Ok(Err(Fail::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            ThermoeitStatus::Panic
        }
    }
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn copy_out(src: &[f64], out: *mut f64, capacity: usize, written: *mut usize) -> Result<(), Fail> {
    if !written.is_null() {
        *written = src.len();
    }
    if capacity < src.len() {
        return Err(Fail::Status(
            ThermoeitStatus::BufferTooSmall,
            format!("buffer holds {capacity} values, {} needed", src.len()),
        ));
    }
    if !src.is_empty() {
        if out.is_null() {
            return Err(null("output buffer"));
        }
        ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn thermoeit_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn thermoeit_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses a TOML experiment. Relative expression files resolve against the
/// working directory. A NULL `toml` yields the built-in default experiment.
///
/// # Safety
/// `toml` must be NULL or a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_config_parse(toml: *const c_char, out: *mut *mut ThermoeitConfig) -> ThermoeitStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = if toml.is_null() {
            ExperimentConfig::default_config()
        } else {
            let src = CStr::from_ptr(toml)
                .to_str()
                .map_err(|_| Fail::Status(ThermoeitStatus::InvalidInput, "config is not UTF-8".into()))?;
            ExperimentConfig::parse(src, Path::new("."))?
        };
        *out = Box::into_raw(Box::new(ThermoeitConfig { inner: cfg }));
        Ok(())
    })
}

/// Copies the configuration digest (hex, NUL-terminated) into `buf`.
///
/// # Safety
/// `config` must come from [`thermoeit_config_parse`]; `buf` must hold `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_config_digest(config: *const ThermoeitConfig, buf: *mut c_char, len: usize) -> ThermoeitStatus {
    guarded(|| {
        let cfg = config.as_ref().ok_or_else(|| null("config"))?;
        let d = cfg.inner.digest.as_bytes();
        if len < d.len() + 1 {
            return Err(Fail::Status(ThermoeitStatus::BufferTooSmall, format!("digest needs {} bytes", d.len() + 1)));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(d.as_ptr().cast(), buf, d.len());
        *buf.add(d.len()) = 0;
        Ok(())
    })
}

/// # Safety
/// `config` must be NULL or come from [`thermoeit_config_parse`], freed once.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_config_free(config: *mut ThermoeitConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Builds the mesh and assembles the forward model of a configuration.
///
/// # Safety
/// `config` must come from [`thermoeit_config_parse`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_new(config: *const ThermoeitConfig, out: *mut *mut ThermoeitModel) -> ThermoeitStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let cfg = &config.as_ref().ok_or_else(|| null("config"))?.inner;
        let mesh = Arc::new(cfg.domain.build()?);
        let c = cfg.require_coefficients()?.sample(&mesh)?;
        let model = ForwardModel::new(mesh, &c.gamma, &c.kappa, &c.tensor)?.with_mode_count(cfg.solver.modes);
        *out = Box::into_raw(Box::new(ThermoeitModel { inner: model }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or come from [`thermoeit_model_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_free(model: *mut ThermoeitModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of boundary nodes, the length of every boundary trace.
///
/// # Safety
/// `model` must come from [`thermoeit_model_new`]; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_boundary_count(model: *const ThermoeitModel, out: *mut usize) -> ThermoeitStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = m.inner.mesh().boundary_nodes.len();
        Ok(())
    })
}

/// Coordinates of the boundary nodes as `count x 3` row-major values.
///
/// # Safety
/// `out` must hold `capacity` doubles; `written` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_boundary_points(
    model: *const ThermoeitModel,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> ThermoeitStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let mesh = m.inner.mesh();
        let pts: Vec<f64> = mesh.boundary_nodes.iter().flat_map(|&i| mesh.nodes[i]).collect();
        copy_out(&pts, out, capacity, written)
    })
}

/// Lowest Dirichlet eigenvalues of the heat operator, in ascending order.
///
/// # Safety
/// `out` must hold `capacity` doubles; `written` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_eigenvalues(
    model: *const ThermoeitModel,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> ThermoeitStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let s = m.inner.spectral()?;
        copy_out(&s.eigenvalues, out, capacity, written)
    })
}

/// Dirichlet energy ⟨Λh, h⟩ of the conductivity problem for a boundary trace.
///
/// # Safety
/// `h` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_dtn_energy(model: *const ThermoeitModel, h: *const f64, len: usize, out: *mut f64) -> ThermoeitStatus {
    guarded(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let h = BoundaryTrace::new(slice(h, len, "h")?.to_vec());
        let w = m.inner.conductivity.solve(&h)?;
        *out = m.inner.conductivity.energy(&w);
        Ok(())
    })
}

/// Boundary heat flux generated by the Joule power of the boundary voltage `h`.
///
/// # Safety
/// `h` must hold `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_model_flux(
    model: *const ThermoeitModel,
    h: *const f64,
    len: usize,
    envelope: ThermoeitEnvelope,
    t_end: f64,
    dt: f64,
    out: *mut *mut ThermoeitTrace,
) -> ThermoeitStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let h = BoundaryTrace::new(slice(h, len, "h")?.to_vec());
        let env = match envelope {
            ThermoeitEnvelope::Ramp => Envelope::Ramp,
            ThermoeitEnvelope::Impulse => Envelope::Impulse,
        };
        let trace = m.inner.sigma(&h, &env, TimeGrid::new(t_end, dt))?;
        *out = Box::into_raw(Box::new(ThermoeitTrace { inner: trace }));
        Ok(())
    })
}

/// Dimensions of a trace: number of time samples and of boundary channels.
///
/// # Safety
/// `trace` must come from [`thermoeit_model_flux`]; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_trace_shape(trace: *const ThermoeitTrace, times: *mut usize, channels: *mut usize) -> ThermoeitStatus {
    guarded(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        *times.as_mut().ok_or_else(|| null("times"))? = t.inner.times.len();
        *channels.as_mut().ok_or_else(|| null("channels"))? = t.inner.nodes.len();
        Ok(())
    })
}

/// Copies the sample times.
///
/// # Safety
/// `out` must hold `capacity` doubles; `written` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_trace_times(trace: *const ThermoeitTrace, out: *mut f64, capacity: usize, written: *mut usize) -> ThermoeitStatus {
    guarded(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        copy_out(&t.inner.times, out, capacity, written)
    })
}

/// Copies the flux samples, row-major `times x channels`.
///
/// # Safety
/// `out` must hold `capacity` doubles; `written` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_trace_values(trace: *const ThermoeitTrace, out: *mut f64, capacity: usize, written: *mut usize) -> ThermoeitStatus {
    guarded(|| {
        let t = trace.as_ref().ok_or_else(|| null("trace"))?;
        let flat: Vec<f64> = t.inner.values.iter().flatten().copied().collect();
        copy_out(&flat, out, capacity, written)
    })
}

/// # Safety
/// `trace` must be NULL or come from [`thermoeit_model_flux`], freed once.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_trace_free(trace: *mut ThermoeitTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Root with positive imaginary part of the half-space characteristic
/// polynomial for a constant `dim x dim` tensor (row-major, normal last) and a
/// tangential frequency of `dim - 1` components.
///
/// # Safety
/// `a` must hold `dim * dim` doubles, `xi` `dim - 1`; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn thermoeit_halfspace_root(a: *const f64, dim: usize, xi: *const f64, re: *mut f64, im: *mut f64) -> ThermoeitStatus {
    guarded(|| {
        if !(2..=3).contains(&dim) {
            return Err(Fail::Status(ThermoeitStatus::InvalidInput, format!("dimension {dim} is not 2 or 3")));
        }
        let a = slice(a, dim * dim, "a")?;
        let rows: Vec<Vec<f64>> = a.chunks(dim).map(|r| r.to_vec()).collect();
        let xi = slice(xi, dim - 1, "xi")?;
        let z = thermoeit::boundary::halfspace_root(&rows, xi)?;
        *re.as_mut().ok_or_else(|| null("re"))? = z.re;
        *im.as_mut().ok_or_else(|| null("im"))? = z.im;
        Ok(())
    })
}
