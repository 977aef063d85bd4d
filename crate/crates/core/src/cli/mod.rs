//! The `djet` command line: diffuse-jet estimates, mollification,
//! diffuse-solution checks and approximation runs on built-in or CSV inputs.

pub mod config;
pub mod inputs;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::diffuse_jets::{estimate_diffuse_jet, DiffuseJetEstimate, DiffuseJetOptions};
use crate::difference_quotients::{step_schedule, StepMatrix};
use crate::dsolution_pipeline::{
    convergence_diagnostics, residual, run_approximation, run_report, system_by_name, DiagnosticsOptions,
    ResidualOptions, RunOptions, SystemF,
};
use crate::error::{Error, Result};
use crate::mollifier::{assemble, MollifyOptions};
use crate::sampled_fields::{write_field_csv, GridDomain, SampledField};
use crate::tensor_frames::Frame;

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_RESIDUAL: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "djet", version, about = "Diffuse jets, patched mollifiers and diffuse-solution checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// File of key=value settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in input name or path of a field CSV.
    #[arg(long, global = true)]
    pub input: Option<String>,
    #[arg(long, global = true)]
    pub system: Option<String>,
    #[arg(long, global = true)]
    pub p: Option<usize>,
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Also bound the L^r distance for this exponent.
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the diffuse jet along a step schedule.
    DiffuseJet,
    /// Build the patched smooth approximation and verify its bounds.
    Mollify,
    /// Check the system over the reduced support of the estimated diffuse jet.
    CheckDsolution,
    /// Run the approximation sequence and its convergence diagnostics.
    Approximate,
    /// Run a built-in example.
    Example {
        #[arg(value_enum)]
        name: ExampleName,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExampleName {
    /// Cantor-type function against u' = 0.
    Cantor,
    /// Indicator of the fat Cantor set against u' = 0, full approximation run.
    FatCantor,
    /// sin(pi x) against the eikonal equation; expected to fail.
    SinEikonal,
    /// Mollification of sin(pi x).
    Smooth,
}

impl ExampleName {
    fn preset(self) -> (Command, &'static [(&'static str, &'static str)]) {
        match self {
            ExampleName::Cantor => (
                Command::CheckDsolution,
                &[("input", "cantor-function"), ("system", "derivative-zero")],
            ),
            ExampleName::FatCantor => (
                Command::Approximate,
                &[
                    ("input", "fat-cantor-indicator"),
                    ("system", "derivative-zero"),
                    ("cells", "19683"),
                    ("rho_tol", "0.001"),
                ],
            ),
            ExampleName::SinEikonal => (Command::CheckDsolution, &[("input", "sin"), ("system", "eikonal")]),
            ExampleName::Smooth => (Command::Mollify, &[("input", "sin"), ("cells", "6561")]),
        }
    }
}

/// Output of one command: files to write, the report and the exit code.
struct Outcome {
    code: i32,
    message: String,
    report: Value,
    files: Vec<(String, Vec<u8>)>,
}

fn provenance(command: &str, cfg: &RunConfig) -> Value {
    json!({
        "tool": "djet",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "config": cfg.echo(),
    })
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::DiffuseJet => "diffuse-jet",
        Command::Mollify => "mollify",
        Command::CheckDsolution => "check-dsolution",
        Command::Approximate => "approximate",
        Command::Example { .. } => "example",
    }
}

/// Everything the commands share, built before any computation so that
/// configuration problems surface as exit code 2.
struct Prepared {
    cfg: RunConfig,
    domain: Arc<GridDomain>,
    u: SampledField,
    frame: Frame,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let domain = if Path::new(&cfg.input).is_file() {
        None
    } else {
        let g = cfg.cell_size();
        Some(Arc::new(GridDomain::full_box(vec![0.0; cfg.dim], vec![cfg.cells; cfg.dim], g)?))
    };
    let u = match &domain {
        Some(d) => inputs::load_input(&cfg.input, d, cfg.terms)?,
        None => inputs::load_input(&cfg.input, &Arc::new(GridDomain::unit_interval(1)), cfg.terms)?,
    };
    let domain = u.domain_arc().clone();
    let frame = Frame::standard(u.dim(), domain.dim());
    Ok(Prepared {
        cfg: cfg.clone(),
        domain,
        u,
        frame,
    })
}

fn schedule(pre: &Prepared, count: usize) -> Result<Vec<StepMatrix>> {
    let g = pre.domain.cell_size();
    let h0 = pre.cfg.first_step(count);
    let s = step_schedule(pre.cfg.p, h0, pre.cfg.decay, count, g)?;
    let reach = s[0].max_step() * pre.cfg.p as f64;
    let side = pre.domain.shape().iter().copied().min().unwrap_or(0) as f64 * g;
    if reach >= side {
        return Err(Error::Precondition(format!(
            "largest stencil reach {reach:.4e} does not fit the grid side {side:.4e}; lower h0 or steps"
        )));
    }
    Ok(s)
}

fn system(pre: &Prepared) -> Result<SystemF> {
    let sys = system_by_name(&pre.cfg.system, pre.domain.dim(), pre.u.dim())?;
    if sys.order != pre.cfg.p {
        return Err(Error::Precondition(format!(
            "system {} has order {}, but p = {}",
            sys.name, sys.order, pre.cfg.p
        )));
    }
    Ok(sys)
}

fn estimate(pre: &Prepared, sched: &[StepMatrix]) -> Result<DiffuseJetEstimate> {
    let opts = DiffuseJetOptions {
        rho_tol: pre.cfg.rho_tol,
        bins: pre.cfg.bins,
        window: pre.cfg.window,
        ..Default::default()
    };
    estimate_diffuse_jet(&pre.u, &pre.frame, sched, &opts)
}

fn estimate_summary(est: &DiffuseJetEstimate, tau_inf: f64) -> Value {
    let e = crate::dsolution_pipeline::exceptional_set(est, tau_inf);
    json!({
        "converged": est.converged,
        "rho_trace": est.rho_trace,
        "subschedule_gap": est.subschedule_gap,
        "non_unique": est.non_unique(),
        "diagnostic": est.diagnostic,
        "infinity_cells_measure": e.measure(),
    })
}

fn csv_bytes(f: &SampledField) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_field_csv(f, &mut buf)?;
    Ok(buf)
}

fn cmd_diffuse_jet(pre: &Prepared) -> Result<Outcome> {
    let sched = schedule(pre, pre.cfg.steps)?;
    let est = estimate(pre, &sched)?;
    let mut dump = Vec::new();
    est.measure.write_csv(&mut dump)?;
    let trace = serde_json::to_vec_pretty(&est.trace_json())?;
    let (code, message) = if est.converged {
        (EXIT_OK, "diffuse jet estimate converged".to_string())
    } else {
        (EXIT_CONVERGENCE, est.diagnostic.clone().unwrap_or_default())
    };
    Ok(Outcome {
        code,
        message,
        report: json!({ "estimate": estimate_summary(&est, pre.cfg.tau_inf) }),
        files: vec![("estimate.csv".into(), dump), ("trace.json".into(), trace)],
    })
}

fn cmd_mollify(pre: &Prepared) -> Result<Outcome> {
    let g = pre.domain.cell_size();
    let h = StepMatrix::diagonal(pre.cfg.p, g, g)?;
    let opts = MollifyOptions {
        ramp: pre.cfg.ramp,
        lr: pre.cfg.lr,
        ..Default::default()
    };
    let out = match assemble(&pre.u, &pre.frame, &h, pre.cfg.eps, &opts) {
        Ok(o) => o,
        Err(e @ Error::GridResolution { .. }) => {
            return Ok(Outcome {
                code: EXIT_CONVERGENCE,
                message: e.to_string(),
                report: json!({ "error": e.to_string() }),
                files: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    // spot check of the first derivative against central differences
    let mut rng = ChaCha8Rng::seed_from_u64(pre.cfg.seed);
    let lower = pre.domain.origin().to_vec();
    let upper = pre.domain.upper();
    let mut worst: f64 = 0.0;
    let step = (out.delta * (1.0 - out.alpha) / 64.0).max(1e-7);
    for _ in 0..20 {
        let x: Vec<f64> = lower.iter().zip(&upper).map(|(a, b)| rng.gen_range(*a..*b)).collect();
        let d1 = out.evaluate_all(&x).swap_remove(1);
        for k in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += step;
            xm[k] -= step;
            let fp = out.evaluate_all(&xp).swap_remove(0);
            let fm = out.evaluate_all(&xm).swap_remove(0);
            for a in 0..fp.len() {
                let fd = (fp[a] - fm[a]) / (2.0 * step);
                worst = worst.max((fd - d1[a * x.len() + k]).abs() / fd.abs().max(1.0));
            }
        }
    }
    let verified = out.bounds.verified;
    let report = json!({
        "bounds": out.bounds,
        "grid_check": out.grid_check,
        "delta": out.delta,
        "alpha": out.alpha,
        "R": out.radius,
        "sigma": out.sigma,
        "cube_cells": out.cube_cells,
        "derivative_spot_check": { "points": 20, "step": step, "max_relative_gap": worst },
    });
    let files = vec![("mollifier.json".into(), serde_json::to_vec(&out.to_json())?)];
    let (code, message) = if verified {
        (EXIT_OK, "bounds verified".to_string())
    } else {
        (
            EXIT_CONVERGENCE,
            format!(
                "bounds exceed eps = {}: sup_u {:.4e}, sup_jet {:.4e}, measure_E {:.4e}, lr {:?}",
                out.bounds.eps, out.bounds.sup_u, out.bounds.sup_jet, out.bounds.measure_e, out.bounds.lr
            ),
        )
    };
    Ok(Outcome {
        code,
        message,
        report,
        files,
    })
}

fn residual_stage(pre: &Prepared, sys: &SystemF, est: &DiffuseJetEstimate) -> Result<(Value, Vec<u8>, bool)> {
    let opts = ResidualOptions {
        tau: pre.cfg.tau,
        tol: pre.cfg.tol,
        mass_budget: Some(pre.cfg.mass_budget * pre.domain.measure()),
        allow_unconverged: pre.cfg.allow_unconverged,
    };
    let r = residual(&pre.u, est, sys, &opts)?;
    let v = json!({
        "passed": r.passed,
        "tol": r.tol,
        "offending_measure": r.offending_measure,
        "mass_budget": r.mass_budget,
        "domain_measure": pre.domain.measure(),
        "warning": r.warning,
    });
    Ok((v, csv_bytes(&r.values)?, r.passed))
}

fn cmd_check(pre: &Prepared) -> Result<Outcome> {
    let sys = system(pre)?;
    let sched = schedule(pre, pre.cfg.steps)?;
    let est = estimate(pre, &sched)?;
    let summary = estimate_summary(&est, pre.cfg.tau_inf);
    let (res, csv, passed) = match residual_stage(pre, &sys, &est) {
        Ok(r) => r,
        Err(e @ Error::Unconverged(_)) => {
            return Ok(Outcome {
                code: EXIT_CONVERGENCE,
                message: e.to_string(),
                report: json!({ "estimate": summary }),
                files: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let message = format!(
        "residual {}: offending measure {:.4e} (budget {:.4e})",
        if passed { "passed" } else { "failed" },
        res["offending_measure"].as_f64().unwrap_or(f64::NAN),
        res["mass_budget"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(Outcome {
        code: if passed { EXIT_OK } else { EXIT_RESIDUAL },
        message,
        report: json!({ "estimate": summary, "residual": res }),
        files: vec![("residual.csv".into(), csv)],
    })
}

fn cmd_approximate(pre: &Prepared) -> Result<Outcome> {
    let sys = system(pre)?;
    let sched = schedule(pre, pre.cfg.steps)?;
    let run_sched = schedule(pre, pre.cfg.nu_max)?;
    let est = estimate(pre, &sched)?;
    let summary = estimate_summary(&est, pre.cfg.tau_inf);
    let (res, csv, passed) = match residual_stage(pre, &sys, &est) {
        Ok(r) => r,
        Err(e @ Error::Unconverged(_)) => {
            return Ok(Outcome {
                code: EXIT_CONVERGENCE,
                message: e.to_string(),
                report: json!({ "estimate": summary }),
                files: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let opts = RunOptions {
        eps_rule: pre.cfg.eps_rule,
        mollify: MollifyOptions {
            ramp: pre.cfg.ramp,
            lr: pre.cfg.lr,
            ..Default::default()
        },
        mass_budget: Some(pre.cfg.mass_budget * pre.domain.measure()),
        ..Default::default()
    };
    let run = run_approximation(&pre.u, &sys, &pre.frame, &run_sched, Some(&est), &opts)?;
    let diag_opts = DiagnosticsOptions {
        tau_inf: pre.cfg.tau_inf,
        mass_budget: Some(pre.cfg.mass_budget * pre.domain.measure()),
        ..Default::default()
    };
    let diag = convergence_diagnostics(&run, &est, &diag_opts)?;
    let mut traces = String::from("nu,eps,rho_to_estimate,f_l1,sup_on_exceptional,error\n");
    let mut k = 0;
    for s in &run.steps {
        let sup = if s.fields.is_some() {
            k += 1;
            diag.sup_on_exceptional[k - 1].to_string()
        } else {
            String::new()
        };
        traces.push_str(&format!(
            "{},{},{},{},{},{}\n",
            s.nu,
            s.eps,
            s.rho_to_estimate.map(|v| v.to_string()).unwrap_or_default(),
            s.f_l1.map(|v| v.to_string()).unwrap_or_default(),
            sup,
            s.error.as_deref().unwrap_or("").replace(',', ";")
        ));
    }
    let message = format!(
        "residual {}; modes weighted {} ball {} measure {}; f -> 0 off E {}",
        if passed { "passed" } else { "failed" },
        diag.mode_weighted,
        diag.mode_ball,
        diag.mode_measure,
        diag.off_exceptional.passed
    );
    Ok(Outcome {
        code: if passed { EXIT_OK } else { EXIT_RESIDUAL },
        message,
        report: json!({ "estimate": summary, "residual": res, "run": run_report(&run, &diag) }),
        files: vec![("residual.csv".into(), csv), ("traces.csv".into(), traces.into_bytes())],
    })
}

fn resolve(cli: &Cli, base: &RunConfig) -> Result<RunConfig> {
    let mut cfg = base.clone();
    if let Some(path) = &cli.config {
        cfg.apply_text(&fs::read_to_string(path)?)?;
    }
    if let Some(v) = &cli.input {
        cfg.input = v.clone();
    }
    if let Some(v) = &cli.system {
        cfg.system = v.clone();
    }
    if let Some(v) = cli.p {
        cfg.p = v;
    }
    if let Some(v) = cli.eps {
        cfg.eps = v;
    }
    if cli.lr.is_some() {
        cfg.lr = cli.lr;
    }
    if let Some(v) = &cli.out {
        cfg.out = v.clone();
    }
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    Ok(cfg)
}

fn execute(command: &Command, cfg: &RunConfig) -> (i32, String, Option<Value>) {
    let pre = match prepare(cfg) {
        Ok(p) => p,
        Err(e) => return (EXIT_CONFIG, format!("configuration error: {e}"), None),
    };
    let result = match command {
        Command::DiffuseJet => cmd_diffuse_jet(&pre),
        Command::Mollify => cmd_mollify(&pre),
        Command::CheckDsolution => cmd_check(&pre),
        Command::Approximate => cmd_approximate(&pre),
        Command::Example { .. } => unreachable!("examples are resolved before execution"),
    };
    let outcome = match result {
        Ok(o) => o,
        Err(e @ (Error::Precondition(_) | Error::Step { .. } | Error::Unknown { .. } | Error::Invalid(_) | Error::Dimension(_))) => {
            return (EXIT_CONFIG, format!("configuration error: {e}"), None)
        }
        Err(e @ (Error::GridResolution { .. } | Error::Unconverged(_))) => return (EXIT_CONVERGENCE, e.to_string(), None),
        Err(e) => return (EXIT_CONFIG, format!("error: {e}"), None),
    };
    let mut report = json!({
        "provenance": provenance(command_name(command), cfg),
        "exit_code": outcome.code,
        "message": outcome.message,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut report, outcome.report) {
        m.extend(extra);
    }
    if let Err(e) = write_outputs(&cfg.out, &report, &outcome.files) {
        return (EXIT_CONFIG, format!("cannot write outputs: {e}"), Some(report));
    }
    (outcome.code, outcome.message, Some(report))
}

fn write_outputs(dir: &Path, report: &Value, files: &[(String, Vec<u8>)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    for (name, bytes) in files {
        fs::write(dir.join(name), bytes)?;
    }
    Ok(())
}

/// Runs the parsed command line; returns the exit code and the report written.
pub fn run_cli(cli: &Cli) -> (i32, String, Option<Value>) {
    let (command, base) = match &cli.command {
        Command::Example { name } => {
            let (command, preset) = name.preset();
            let mut base = RunConfig::default();
            for (k, v) in preset {
                base.set(k, v).expect("presets are valid");
            }
            (command, base)
        }
        Command::DiffuseJet => (Command::DiffuseJet, RunConfig::default()),
        Command::Mollify => (Command::Mollify, RunConfig::default()),
        Command::CheckDsolution => (Command::CheckDsolution, RunConfig::default()),
        Command::Approximate => (Command::Approximate, RunConfig::default()),
    };
    let cfg = match resolve(cli, &base) {
        Ok(c) => c,
        Err(e) => return (EXIT_CONFIG, format!("configuration error: {e}"), None),
    };
    execute(&command, &cfg)
}

/// Entry point for the binary.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let (code, message, _) = run_cli(&cli);
    if code == EXIT_OK {
        println!("{message}");
    } else {
        eprintln!("{message}");
    }
    code
}
