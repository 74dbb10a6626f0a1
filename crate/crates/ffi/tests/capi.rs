use std::ffi::{CStr, CString};
use std::ptr;

use thermoeit_ffi::*;

const SMALL: &str = r#"
[domain]
shape = "box"
lengths = [1.0, 1.0]
divisions = [8, 8]

[coefficients]
gamma = "1"
kappa = "1"

[solver]
modes = 6
"#;

fn last_error() -> String {
    let p = thermoeit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_model() -> (*mut ThermoeitConfig, *mut ThermoeitModel) {
    let src = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    assert_eq!(unsafe { thermoeit_config_parse(src.as_ptr(), &mut cfg) }, ThermoeitStatus::Ok);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { thermoeit_model_new(cfg, &mut model) }, ThermoeitStatus::Ok);
    (cfg, model)
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(thermoeit_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn malformed_config_reports_config_status() {
    let src = CString::new("[domain]\nshape = 3\n").unwrap();
    let mut cfg = ptr::null_mut();
    let s = unsafe { thermoeit_config_parse(src.as_ptr(), &mut cfg) };
    assert_eq!(s, ThermoeitStatus::Config);
    assert!(cfg.is_null());
    assert!(last_error().contains("line"));
}

#[test]
fn null_arguments_are_rejected() {
    assert_eq!(unsafe { thermoeit_config_parse(ptr::null(), ptr::null_mut()) }, ThermoeitStatus::NullPointer);
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { thermoeit_model_new(ptr::null(), &mut model) }, ThermoeitStatus::NullPointer);
    assert!(last_error().contains("config"));
    unsafe {
        thermoeit_config_free(ptr::null_mut());
        thermoeit_model_free(ptr::null_mut());
        thermoeit_trace_free(ptr::null_mut());
    }
}

#[test]
fn eigenvalues_of_unit_square() {
    let (cfg, model) = small_model();
    let mut n = 0usize;
    let s = unsafe { thermoeit_model_eigenvalues(model, ptr::null_mut(), 0, &mut n) };
    assert_eq!(s, ThermoeitStatus::BufferTooSmall);
    assert!(n >= 6);
    let mut buf = vec![0.0; n];
    assert_eq!(unsafe { thermoeit_model_eigenvalues(model, buf.as_mut_ptr(), n, &mut n) }, ThermoeitStatus::Ok);
    let exact = 2.0 * std::f64::consts::PI.powi(2);
    assert!((buf[0] - exact).abs() / exact < 0.05, "{}", buf[0]);
    assert!(buf.windows(2).all(|w| w[0] <= w[1]));
    unsafe {
        thermoeit_model_free(model);
        thermoeit_config_free(cfg);
    }
}

#[test]
fn dtn_energy_of_linear_trace() {
    let (cfg, model) = small_model();
    let mut nb = 0usize;
    assert_eq!(unsafe { thermoeit_model_boundary_count(model, &mut nb) }, ThermoeitStatus::Ok);
    let mut pts = vec![0.0; 3 * nb];
    assert_eq!(
        unsafe { thermoeit_model_boundary_points(model, pts.as_mut_ptr(), pts.len(), ptr::null_mut()) },
        ThermoeitStatus::Ok
    );
    let h: Vec<f64> = pts.chunks(3).map(|p| p[0]).collect();
    let mut e = 0.0;
    assert_eq!(unsafe { thermoeit_model_dtn_energy(model, h.as_ptr(), h.len(), &mut e) }, ThermoeitStatus::Ok);
    // γ = 1, w = x: ∫|∇w|² = 1 exactly for P1 elements.
    assert!((e - 1.0).abs() < 1e-10, "{e}");
    let s = unsafe { thermoeit_model_dtn_energy(model, h.as_ptr(), h.len() - 1, &mut e) };
    assert_eq!(s, ThermoeitStatus::InvalidInput);
    unsafe {
        thermoeit_model_free(model);
        thermoeit_config_free(cfg);
    }
}

#[test]
fn flux_trace_round_trip() {
    let (cfg, model) = small_model();
    let mut nb = 0usize;
    unsafe { thermoeit_model_boundary_count(model, &mut nb) };
    let mut pts = vec![0.0; 3 * nb];
    unsafe { thermoeit_model_boundary_points(model, pts.as_mut_ptr(), pts.len(), ptr::null_mut()) };
    let h: Vec<f64> = pts.chunks(3).map(|p| p[0]).collect();
    let mut trace = ptr::null_mut();
    let s = unsafe { thermoeit_model_flux(model, h.as_ptr(), h.len(), ThermoeitEnvelope::Ramp, 3.0, 0.02, &mut trace) };
    assert_eq!(s, ThermoeitStatus::Ok);
    let (mut nt, mut nc) = (0usize, 0usize);
    assert_eq!(unsafe { thermoeit_trace_shape(trace, &mut nt, &mut nc) }, ThermoeitStatus::Ok);
    assert_eq!(nc, nb);
    let mut times = vec![0.0; nt];
    let mut values = vec![0.0; nt * nc];
    unsafe {
        assert_eq!(thermoeit_trace_times(trace, times.as_mut_ptr(), nt, ptr::null_mut()), ThermoeitStatus::Ok);
        assert_eq!(thermoeit_trace_values(trace, values.as_mut_ptr(), nt * nc, ptr::null_mut()), ThermoeitStatus::Ok);
    }
    assert!((times[nt - 1] - 3.0).abs() < 1e-9);
    // Before the ramp switches on at t = 1/2 no heat leaves the body.
    assert!(values[..nc].iter().all(|v| v.abs() < 1e-14));
    assert!(values.iter().all(|v| v.is_finite()));
    unsafe {
        thermoeit_trace_free(trace);
        thermoeit_model_free(model);
        thermoeit_config_free(cfg);
    }
}

#[test]
fn halfspace_root_isotropic() {
    let a = [1.0, 0.0, 0.0, 1.0];
    let xi = [2.0];
    let (mut re, mut im) = (0.0, 0.0);
    assert_eq!(unsafe { thermoeit_halfspace_root(a.as_ptr(), 2, xi.as_ptr(), &mut re, &mut im) }, ThermoeitStatus::Ok);
    assert!(re.abs() < 1e-14 && (im - 2.0).abs() < 1e-14);
    assert_eq!(unsafe { thermoeit_halfspace_root(a.as_ptr(), 4, xi.as_ptr(), &mut re, &mut im) }, ThermoeitStatus::InvalidInput);
}

#[test]
fn digest_matches_core() {
    let src = CString::new(SMALL).unwrap();
    let mut cfg = ptr::null_mut();
    unsafe { thermoeit_config_parse(src.as_ptr(), &mut cfg) };
    let mut buf = vec![0 as std::ffi::c_char; 128];
    assert_eq!(unsafe { thermoeit_config_digest(cfg, buf.as_mut_ptr(), buf.len()) }, ThermoeitStatus::Ok);
    let d = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    let core = thermoeit::config::ExperimentConfig::parse(SMALL, std::path::Path::new(".")).unwrap();
    assert_eq!(d, core.digest);
    assert_eq!(unsafe { thermoeit_config_digest(cfg, buf.as_mut_ptr(), 3) }, ThermoeitStatus::BufferTooSmall);
    unsafe { thermoeit_config_free(cfg) };
}
