//! Command line runner: subcommands, output layout and exit codes.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use log::info;
use serde_json::{json, Value};

use crate::boundary::{probes_csv, run_halfspace};
use crate::cgo::{density_gram_test_cgo, extend_gamma, remainder_sweep, sweep_csv};
use crate::config::{ExperimentConfig, ReconstructSpec, DEFAULT_CONFIG};
use crate::error::{Error, Result};
use crate::heat::ForwardModel;
use crate::inverse::pipeline::{acquire, reconstruct, write_truth, Measurements};
use crate::io::{fmt17, write_json};
use crate::mesh::BoundaryTrace;
use crate::verify::{report_json, run_suites};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "THERMOEIT_OUTPUT";

#[derive(Parser, Debug)]
#[command(name = "thermoeit", version, about = "Electro-thermal boundary measurements: forward maps and identification")]
pub struct Cli {
    /// Experiment configuration (TOML). The built-in unit-square experiment is used when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root; defaults to $THERMOEIT_OUTPUT, then the config's `output`, then ./out.
    #[arg(long, global = true, env = OUTPUT_ENV)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent probes (1 gives byte-identical artifacts).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log stage progress and timings to stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Solve the conductivity and heat problems for the [source] table.
    Forward,
    /// Record flux traces for the [measure] protocol; truth goes to a sibling directory.
    Measure,
    /// Direct Dirichlet eigensolve of the configured operator.
    Spectrum,
    /// Identify γ and κ from a measurement directory alone.
    Reconstruct {
        #[arg(long)]
        measurements: PathBuf,
    },
    /// Run the invariant suites and write a pass/fail report.
    Verify,
    /// Boundary tensor recovery on a periodic slab ([halfspace] table).
    Halfspace,
    /// CGO remainder decay and density rank test ([cgo] table).
    CgoSweep,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default_config(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn output_root(cli: &Cli, cfg: Option<&ExperimentConfig>) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write_text(path: &Path, digest: &str, body: &str) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, format!("# config_digest: {digest}\n{body}"))?;
    Ok(())
}

fn with_digest(mut v: Value, digest: &str) -> Value {
    if let Value::Object(m) = &mut v {
        m.insert("config_digest".into(), json!(digest));
    }
    v
}

fn forward(cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    let src = cfg.source.as_ref().ok_or_else(|| Error::Config {
        line: 0,
        column: 0,
        message: "missing [source] table".into(),
    })?;
    let grid = cfg.time.ok_or_else(|| Error::Config {
        line: 0,
        column: 0,
        message: "missing [time] table".into(),
    })?;
    let mesh = Arc::new(cfg.domain.build()?);
    let c = cfg.require_coefficients()?.sample(&mesh)?;
    let model = ForwardModel::new(mesh.clone(), &c.gamma, &c.kappa, &c.tensor)?.with_mode_count(cfg.solver.modes);
    let h = BoundaryTrace::from_fn(&mesh, |p| src.h.expr.eval(p));
    let ht = src.h_tilde.as_ref().map_or_else(|| h.clone(), |e| BoundaryTrace::from_fn(&mesh, |p| e.expr.eval(p)));
    let w = model.conductivity.solve(&h)?;
    let f = match &src.power {
        Some(e) => e.sample(&mesh),
        None => model.power_density(&h, &ht)?,
    };
    let flux = model.xi(&f, &src.envelope, grid)?;
    let mut fields = String::from("node,x,y,z,w,F\n");
    for (i, p) in mesh.nodes.iter().enumerate() {
        fields.push_str(&format!("{i},{},{},{},{},{}\n", fmt17(p[0]), fmt17(p[1]), fmt17(p[2]), fmt17(w.values[i]), fmt17(f.values[i])));
    }
    write_text(&out.join("fields.csv"), &cfg.digest, &fields)?;
    write_text(&out.join("flux.csv"), &cfg.digest, &flux.to_csv())?;
    let summary = json!({
        "envelope": src.envelope.label(),
        "dirichlet_energy": model.conductivity.energy(&w),
        "flux": flux.summary_json(),
        "nodes": mesh.node_count(),
    });
    let summary = with_digest(summary, &cfg.digest);
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn spectrum(cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    let mesh = Arc::new(cfg.domain.build()?);
    let c = cfg.require_coefficients()?.sample(&mesh)?;
    let p = crate::elliptic::assemble_p(mesh, &c.kappa, &c.tensor)?;
    let s = p.spectrum(cfg.solver.modes, cfg.solver.cluster_rtol, cfg.seed)?;
    let mut csv = String::from("index,eigenvalue,residual\n");
    for (k, (l, r)) in s.eigenvalues.iter().zip(&s.residuals).enumerate() {
        csv.push_str(&format!("{k},{},{}\n", fmt17(*l), fmt17(*r)));
    }
    write_text(&out.join("eigenvalues.csv"), &cfg.digest, &csv)?;
    let v = with_digest(
        json!({
            "eigenvalues": s.eigenvalues,
            "multiplicities": s.multiplicities,
            "cluster_values": s.cluster_values(),
            "residuals": s.residuals,
        }),
        &cfg.digest,
    );
    write_json(&out.join("spectrum.json"), &v)?;
    Ok(v)
}

fn cgo_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    let spec = cfg.cgo.as_ref().ok_or_else(|| Error::Config {
        line: 0,
        column: 0,
        message: "missing [cgo] table".into(),
    })?;
    let expr = spec.gamma.expr.clone();
    let gamma = Arc::new(move |p: &[f64; 3]| expr.eval(p));
    let ext = extend_gamma(gamma, [0.0; 3], [1.0; 3], 2.0)?;
    let (rows, slope) = remainder_sweep(&ext, &spec.xi, &spec.radii, spec.grid, 2.0)?;
    write_text(&out.join("sweep.csv"), &cfg.digest, &sweep_csv(&rows))?;
    let rank = density_gram_test_cgo(&ext, spec.probes, spec.basis, spec.radii[0], spec.grid.min(32), cfg.seed)?;
    let v = with_digest(
        json!({
            "slope": slope,
            "rows": rows.iter().map(|r| json!({"rho_abs": r.rho_abs, "remainder_l2": r.remainder_l2, "residual": r.residual, "method": r.method})).collect::<Vec<_>>(),
            "density": rank.to_json(),
        }),
        &cfg.digest,
    );
    write_json(&out.join("cgo.json"), &v)?;
    Ok(v)
}

/// Runs one command; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Reconstruct { measurements } => {
            let (meas, digest) = Measurements::load(measurements)?;
            let spec = match &cli.config {
                Some(p) => ReconstructSpec::from_file(p, meas.domain.dim())?,
                None => ReconstructSpec::parse(DEFAULT_CONFIG, meas.domain.dim())?,
            };
            let out = output_root(cli, None).join("reconstruction");
            info!("reconstructing from {} into {}", measurements.display(), out.display());
            let r = reconstruct(&meas, &digest, &spec, Some(&out))?;
            info!("eigenvalues {}", r.report["eigenvalues"]);
            Ok(0)
        }
        cmd => {
            let cfg = load_config(cli)?;
            let root = output_root(cli, Some(&cfg));
            match cmd {
                Command::Forward => {
                    forward(&cfg, &root.join("forward"))?;
                }
                Command::Measure => {
                    let m = acquire(&cfg, cli.threads.max(1))?;
                    m.save(&root.join("measurements"))?;
                    write_truth(&cfg, &root.join("truth"))?;
                    info!("wrote {} impulse and {} ramp traces", m.impulse.len(), m.ramp_diag.len() + 2 * m.ramp_pairs.len());
                }
                Command::Spectrum => {
                    spectrum(&cfg, &root.join("spectrum"))?;
                }
                Command::Verify => {
                    let checks = run_suites(&cfg)?;
                    for c in &checks {
                        info!("{} {} value={:e} tol={:e}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.tolerance);
                    }
                    let report = report_json(&checks, &cfg.digest);
                    write_json(&root.join("verify").join("report.json"), &report)?;
                    if !checks.iter().all(|c| c.pass) {
                        return Ok(4);
                    }
                }
                Command::Halfspace => {
                    let spec = cfg.halfspace.as_ref().ok_or_else(|| Error::Config {
                        line: 0,
                        column: 0,
                        message: "missing [halfspace] table".into(),
                    })?;
                    let run = run_halfspace(spec)?;
                    let dir = root.join("halfspace");
                    write_text(&dir.join("probes.csv"), &cfg.digest, &probes_csv(&run.probes))?;
                    write_json(&dir.join("estimate.json"), &with_digest(run.estimate.to_json(), &cfg.digest))?;
                    write_json(&dir.join("probes.json"), &with_digest(run.to_json(), &cfg.digest))?;
                }
                Command::CgoSweep => {
                    cgo_sweep(&cfg, &root.join("cgo"))?;
                }
                Command::Reconstruct { .. } => unreachable!(),
            }
            Ok(0)
        }
    }
}

/// Entry point used by the binary: parses arguments, sets up logging and
/// maps errors to exit codes with a machine-readable line on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_global_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["thermoeit", "spectrum", "--threads", "2", "--seed", "9", "-v"]).unwrap();
        assert_eq!(cli.threads, 2);
        assert_eq!(cli.seed, Some(9));
        assert!(cli.verbose);
        assert!(matches!(cli.command, Command::Spectrum));
    }

    #[test]
    fn reconstruct_requires_measurements() {
        assert!(Cli::try_parse_from(["thermoeit", "reconstruct"]).is_err());
    }

    #[test]
    fn bad_config_exits_with_two() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, "[domain]\nshape = \"box\"\nlengths = [1.0, 1.0]\ndivisions = [4, 4]\n[coefficients]\ngamma = \"-1\"\nkappa = \"1\"\n").unwrap();
        let code = main_with_args(["thermoeit", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "spectrum"]);
        assert_eq!(code, 2);
        assert!(!dir.path().join("spectrum").exists());
    }
}
