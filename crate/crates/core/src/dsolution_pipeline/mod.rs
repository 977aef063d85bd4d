//! Residuals of sampled maps against a system over the reduced support of a
//! diffuse jet, the approximation run by patched mollifiers and its
//! convergence diagnostics.

pub mod systems;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::diffuse_jets::DiffuseJetEstimate;
use crate::difference_quotients::StepMatrix;
use crate::error::{Error, Result};
use crate::mollifier::{assemble, BoundReport, MollifierOutput, MollifyOptions};
use crate::sampled_fields::{
    ae_convergence_check, exceedance_set, lr_norm, tail_nonincreasing, AeReport, CellSet, GridDomain, SampledField,
};
use crate::tensor_frames::{Frame, SymTensor};
use crate::young_measures::{dirac_embed, reduced_support_joint, weak_star_distance, DEFAULT_K_MAX};

pub use systems::{builtin_systems, system_by_name, SystemF};

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualOptions {
    /// Mass threshold of the reduced support.
    pub tau: f64,
    /// Residual tolerance; defaults to half the widest bin of the scheme.
    pub tol: Option<f64>,
    /// Allowed offending measure; defaults to one percent of the domain.
    pub mass_budget: Option<f64>,
    /// Accept an estimate whose distance trace did not settle.
    pub allow_unconverged: bool,
}

impl Default for ResidualOptions {
    fn default() -> Self {
        Self {
            tau: 0.05,
            tol: None,
            mass_budget: None,
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualField {
    /// Per cell: max `|F(x, u(x), X)|` over the reduced support, 0 when it is empty.
    pub values: SampledField,
    pub tol: f64,
    pub offending: CellSet,
    pub offending_measure: f64,
    pub mass_budget: f64,
    pub passed: bool,
    pub warning: Option<String>,
}

/// Evaluates the system over the reduced support of the estimate at every cell.
pub fn residual(u: &SampledField, est: &DiffuseJetEstimate, sys: &SystemF, opts: &ResidualOptions) -> Result<ResidualField> {
    let theta = &est.measure;
    let d = u.domain();
    if !d.same_grid(theta.domain()) {
        return Err(Error::Incompatible("map and estimate live on different grids".into()));
    }
    sys.check_dims(d.dim(), u.dim())?;
    if theta.scheme().len() != sys.order {
        return Err(Error::Dimension(format!(
            "estimate carries {} orders, system {} has order {}",
            theta.scheme().len(),
            sys.name,
            sys.order
        )));
    }
    let warning = if est.converged {
        None
    } else if opts.allow_unconverged {
        Some(format!(
            "estimate not converged: {}",
            est.diagnostic.clone().unwrap_or_default()
        ))
    } else {
        return Err(Error::Unconverged(
            est.diagnostic.clone().unwrap_or_else(|| "diffuse jet estimate not converged".into()),
        ));
    };
    let tol = match opts.tol {
        Some(t) => t,
        None => theta
            .scheme()
            .slots()
            .iter()
            .map(|s| s.bin_width() / 2.0)
            .fold(0.0, f64::max),
    };
    let mut values = vec![0.0; d.total_cells()];
    for cell in d.cells() {
        let x = d.cell_center(cell);
        let mut r: f64 = 0.0;
        for (jet, _) in reduced_support_joint(theta, cell, opts.tau)? {
            r = r.max(sys.norm(&x, u.value(cell), &jet)?);
        }
        values[cell] = r;
    }
    let values = SampledField::new(u.domain_arc().clone(), 1, values)?;
    let offending = exceedance_set(&values, tol)?;
    let offending_measure = offending.measure();
    let mass_budget = opts.mass_budget.unwrap_or(0.01 * d.measure());
    Ok(ResidualField {
        values,
        tol,
        passed: offending_measure <= mass_budget,
        offending,
        offending_measure,
        mass_budget,
        warning,
    })
}

/// Tolerance per approximation index `nu = 1, 2, ..`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EpsRule {
    /// `1 / nu`.
    Harmonic,
    /// `first * ratio^(nu-1)`.
    Geometric { first: f64, ratio: f64 },
}

impl Default for EpsRule {
    fn default() -> Self {
        EpsRule::Harmonic
    }
}

impl EpsRule {
    pub fn eps(&self, nu: usize) -> f64 {
        match *self {
            EpsRule::Harmonic => 1.0 / nu as f64,
            EpsRule::Geometric { first, ratio } => first * ratio.powi(nu as i32 - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub eps_rule: EpsRule,
    pub mollify: MollifyOptions,
    /// Pointwise tolerance of the a.e. trends.
    pub tol: f64,
    pub mass_budget: Option<f64>,
    /// Radii `R` of the weights `Phi_R = clamp(2 - |X|/R, 0, 1)`.
    pub phi_radii: Vec<f64>,
    pub k_max: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            eps_rule: EpsRule::Harmonic,
            mollify: MollifyOptions::default(),
            tol: 0.05,
            mass_budget: None,
            phi_radii: vec![1.0, 4.0],
            k_max: DEFAULT_K_MAX,
        }
    }
}

/// `u^nu`, its derivatives of orders `1..=p` and `f^nu` at the cell centres.
#[derive(Debug, Clone)]
pub struct SampledApproximation {
    pub u: SampledField,
    pub jet: Vec<SampledField>,
    pub f: SampledField,
}

impl SampledApproximation {
    /// `|D^{[p]} u^nu|` per cell.
    pub fn jet_norm(&self) -> SampledField {
        let d = self.u.domain_arc().clone();
        let vals = (0..d.total_cells())
            .map(|c| self.jet.iter().map(|j| j.value(c).iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt())
            .collect();
        SampledField::from_raw(d, 1, vals)
    }
}

/// Samples the approximation and evaluates `f = F(x, u, D^{[p]} u)` at cell centres.
pub fn sample_approximation(out: &MollifierOutput, sys: &SystemF, domain: &Arc<GridDomain>) -> Result<SampledApproximation> {
    let mut orders = out.sample(domain);
    let u = orders.remove(0);
    let jet = orders;
    let (big_n, n) = out.dims;
    let mut f = vec![0.0; sys.m * domain.total_cells()];
    for cell in domain.cells() {
        let x = domain.cell_center(cell);
        let tensors: Vec<SymTensor> = jet
            .iter()
            .enumerate()
            .map(|(k, j)| SymTensor::from_symmetric(k + 1, big_n, n, j.value(cell).to_vec()))
            .collect();
        let v = sys.eval(&x, u.value(cell), &tensors)?;
        f[cell * sys.m..(cell + 1) * sys.m].copy_from_slice(&v);
    }
    let f = SampledField::new(domain.clone(), sys.m, f)?;
    Ok(SampledApproximation { u, jet, f })
}

#[derive(Debug, Clone)]
pub struct NuStep {
    pub nu: usize,
    pub eps: f64,
    pub output: Option<MollifierOutput>,
    pub error: Option<String>,
    pub fields: Option<SampledApproximation>,
    /// Distance from the Dirac embedding of `D^{[p]} u^nu` to the estimate.
    pub rho_to_estimate: Option<f64>,
    /// `||Phi_R(D^{[p]} u^nu) f^nu||_{L^1}` per weight radius.
    pub phi_weighted: Vec<f64>,
    pub f_l1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ApproximationRun {
    pub domain: Arc<GridDomain>,
    pub system: String,
    pub steps: Vec<NuStep>,
    /// `u^nu -> u` a.e. over the successful steps.
    pub u_convergence: Option<AeReport>,
    pub rho_trend: Vec<f64>,
    pub phi_radii: Vec<f64>,
}

impl ApproximationRun {
    /// Steps whose mollifier succeeded.
    pub fn completed(&self) -> impl Iterator<Item = (&NuStep, &SampledApproximation)> {
        self.steps.iter().filter_map(|s| s.fields.as_ref().map(|f| (s, f)))
    }

    /// Per weight radius, the `L^1` trend of the weighted residual.
    pub fn phi_trends(&self) -> Vec<Vec<f64>> {
        (0..self.phi_radii.len())
            .map(|k| self.completed().map(|(s, _)| s.phi_weighted[k]).collect())
            .collect()
    }

    pub fn f_l1_trend(&self) -> Vec<f64> {
        self.completed().filter_map(|(s, _)| s.f_l1).collect()
    }
}

/// `clamp(2 - |X|/R, 0, 1)`: 1 on the ball of radius `R`, 0 outside radius `2R`.
pub fn phi_weight(norm: f64, radius: f64) -> f64 {
    (2.0 - norm / radius).clamp(0.0, 1.0)
}

fn weighted(f: &SampledField, jet_norm: &SampledField, w: impl Fn(f64) -> f64) -> SampledField {
    let d = f.domain_arc().clone();
    let vals = (0..d.total_cells())
        .map(|c| w(jet_norm.value(c)[0]) * f.norm_at(c))
        .collect();
    SampledField::from_raw(d, 1, vals)
}

/// Builds `u^nu` for every step of the schedule with tolerance `eps_nu` and
/// records the convergence trends. Mollifier failures are kept in the step
/// and the run continues.
pub fn run_approximation(
    u: &SampledField,
    sys: &SystemF,
    f: &Frame,
    schedule: &[StepMatrix],
    est: Option<&DiffuseJetEstimate>,
    opts: &RunOptions,
) -> Result<ApproximationRun> {
    if schedule.is_empty() {
        return Err(Error::EmptySequence);
    }
    let domain = u.domain_arc().clone();
    sys.check_dims(domain.dim(), u.dim())?;
    if schedule.iter().any(|h| h.order() != sys.order) {
        return Err(Error::Dimension(format!("schedule order differs from system order {}", sys.order)));
    }
    let mut steps = Vec::with_capacity(schedule.len());
    for (i, h) in schedule.iter().enumerate() {
        let nu = i + 1;
        let eps = opts.eps_rule.eps(nu);
        let mut step = NuStep {
            nu,
            eps,
            output: None,
            error: None,
            fields: None,
            rho_to_estimate: None,
            phi_weighted: Vec::new(),
            f_l1: None,
        };
        match assemble(u, f, h, eps, &opts.mollify) {
            Err(e) => step.error = Some(e.to_string()),
            Ok(out) => {
                let fields = sample_approximation(&out, sys, &domain)?;
                if let Some(est) = est {
                    let refs: Vec<&SampledField> = fields.jet.iter().collect();
                    let theta = dirac_embed(est.measure.scheme_arc().clone(), &refs, est.measure.is_joint())?;
                    step.rho_to_estimate = Some(weak_star_distance(&theta, &est.measure, opts.k_max)?);
                }
                let jn = fields.jet_norm();
                step.phi_weighted = opts
                    .phi_radii
                    .iter()
                    .map(|&r| lr_norm(&weighted(&fields.f, &jn, |x| phi_weight(x, r)), 1.0))
                    .collect::<Result<_>>()?;
                step.f_l1 = Some(lr_norm(&fields.f, 1.0)?);
                step.output = Some(out);
                step.fields = Some(fields);
            }
        }
        steps.push(step);
    }
    let seq: Vec<SampledField> = steps.iter().filter_map(|s| s.fields.as_ref().map(|f| f.u.clone())).collect();
    let u_convergence = if seq.is_empty() {
        None
    } else {
        Some(ae_convergence_check(&seq, u, opts.tol, opts.mass_budget)?)
    };
    let rho_trend = steps.iter().filter_map(|s| s.rho_to_estimate).collect();
    Ok(ApproximationRun {
        domain,
        system: sys.name.clone(),
        steps,
        u_convergence,
        rho_trend,
        phi_radii: opts.phi_radii.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsOptions {
    /// Thresholds `eps` of the measure mode.
    pub eps_grid: Vec<f64>,
    /// Radii `R` of the ball mode; the weighted mode uses the same radii.
    pub r_grid: Vec<f64>,
    /// Infinity mass above which a cell joins the exceptional set.
    pub tau_inf: f64,
    /// Pointwise tolerance of the a.e. trends.
    pub tol: f64,
    /// Allowed offending measure of the a.e. trends; defaults to one percent of the domain.
    pub mass_budget: Option<f64>,
    /// Final value allowed for the measure mode; defaults to five percent of the domain.
    pub measure_budget: Option<f64>,
}

impl Default for DiagnosticsOptions {
    fn default() -> Self {
        Self {
            eps_grid: vec![0.5, 0.1],
            r_grid: vec![1.0, 4.0, 16.0],
            tau_inf: 0.05,
            tol: 0.05,
            mass_budget: None,
            measure_budget: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrend {
    /// `R` or `eps` of this entry.
    pub param: f64,
    pub trend: Vec<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceDiagnostics {
    /// `chi_{B_R}(D^{[p]} u^nu) f^nu -> 0` a.e., offending measure per step.
    pub ball: Vec<ModeTrend>,
    /// `Phi_R(D^{[p]} u^nu) f^nu -> 0` a.e., offending measure per step.
    pub weighted: Vec<ModeTrend>,
    /// `|{|f^nu| > eps} & {|D^{[p]} u^nu| < 1/eps}|` per step.
    pub measure: Vec<ModeTrend>,
    /// Cells where some order of the estimate puts more than `tau_inf` at infinity.
    pub exceptional_cells: Vec<usize>,
    pub exceptional_measure: f64,
    /// `f^nu -> 0` a.e. off the exceptional set.
    pub off_exceptional: ModeTrend,
    /// `max |f^nu|` over exceptional cells per step.
    pub sup_on_exceptional: Vec<f64>,
    /// The trend on the exceptional set ends above its initial value.
    pub diverges_on_exceptional: bool,
    pub mode_weighted: bool,
    pub mode_ball: bool,
    pub mode_measure: bool,
    pub modes_agree: bool,
}

fn ae_trend(fields: &[SampledField], tol: f64, budget: f64) -> Result<(Vec<f64>, bool)> {
    let mut trend = Vec::with_capacity(fields.len());
    for f in fields {
        trend.push(exceedance_set(f, tol)?.measure());
    }
    let passed = trend.last().is_some_and(|&m| m <= budget) && tail_nonincreasing(&trend, 0.0);
    Ok((trend, passed))
}

/// Exceptional set of an estimate: cells with infinity mass above `tau_inf` in some order.
pub fn exceptional_set(est: &DiffuseJetEstimate, tau_inf: f64) -> CellSet {
    let theta = &est.measure;
    let slots = theta.scheme().len();
    CellSet::from_predicate(theta.domain(), |c| (0..slots).any(|s| theta.infinity_mass(s, c) > tau_inf))
}

/// Evaluates the equivalent convergence modes of the run together with the
/// exceptional set of the estimate and the behaviour of `f^nu` off and on it.
pub fn convergence_diagnostics(
    run: &ApproximationRun,
    est: &DiffuseJetEstimate,
    opts: &DiagnosticsOptions,
) -> Result<ConvergenceDiagnostics> {
    let d = &run.domain;
    let budget = opts.mass_budget.unwrap_or(0.01 * d.measure());
    let measure_budget = opts.measure_budget.unwrap_or(0.05 * d.measure());
    let done: Vec<&SampledApproximation> = run.completed().map(|(_, f)| f).collect();
    if done.is_empty() {
        return Err(Error::EmptySequence);
    }
    let norms: Vec<SampledField> = done.iter().map(|a| a.jet_norm()).collect();
    let mut ball = Vec::new();
    let mut weighted_modes = Vec::new();
    for &r in &opts.r_grid {
        let b: Vec<SampledField> = done
            .iter()
            .zip(&norms)
            .map(|(a, n)| weighted(&a.f, n, |x| if x < r { 1.0 } else { 0.0 }))
            .collect();
        let (trend, passed) = ae_trend(&b, opts.tol, budget)?;
        ball.push(ModeTrend { param: r, trend, passed });
        let w: Vec<SampledField> = done
            .iter()
            .zip(&norms)
            .map(|(a, n)| weighted(&a.f, n, |x| phi_weight(x, r)))
            .collect();
        let (trend, passed) = ae_trend(&w, opts.tol, budget)?;
        weighted_modes.push(ModeTrend { param: r, trend, passed });
    }
    let mut measure = Vec::new();
    for &e in &opts.eps_grid {
        let trend: Vec<f64> = done
            .iter()
            .zip(&norms)
            .map(|(a, n)| {
                CellSet::from_predicate(d, |c| a.f.norm_at(c) > e && n.value(c)[0] < 1.0 / e).measure()
            })
            .collect();
        let first = trend[0];
        let monotone = trend.windows(2).all(|w| w[1] <= w[0] + 0.1 * first.max(w[0]));
        let passed = monotone && trend.last().is_some_and(|&m| m <= measure_budget);
        measure.push(ModeTrend { param: e, trend, passed });
    }
    let e_set = exceptional_set(est, opts.tau_inf);
    let off: Vec<SampledField> = done
        .iter()
        .map(|a| {
            let vals = (0..d.total_cells())
                .map(|c| if e_set.contains(c) { 0.0 } else { a.f.norm_at(c) })
                .collect();
            SampledField::from_raw(d.clone(), 1, vals)
        })
        .collect();
    let (trend, passed) = ae_trend(&off, opts.tol, budget)?;
    let off_exceptional = ModeTrend { param: opts.tol, trend, passed };
    let sup_on_exceptional: Vec<f64> = done
        .iter()
        .map(|a| e_set.iter().map(|c| a.f.norm_at(c)).fold(0.0, f64::max))
        .collect();
    let diverges_on_exceptional =
        sup_on_exceptional.len() > 1 && sup_on_exceptional.last() > sup_on_exceptional.first();
    let mode_weighted = weighted_modes.iter().all(|m| m.passed);
    let mode_ball = ball.iter().all(|m| m.passed);
    let mode_measure = measure.iter().all(|m| m.passed);
    Ok(ConvergenceDiagnostics {
        ball,
        weighted: weighted_modes,
        measure,
        exceptional_measure: e_set.measure(),
        exceptional_cells: e_set.to_vec(),
        off_exceptional,
        sup_on_exceptional,
        diverges_on_exceptional,
        mode_weighted,
        mode_ball,
        mode_measure,
        modes_agree: mode_weighted == mode_ball,
    })
}

fn bounds_json(b: &BoundReport) -> serde_json::Value {
    serde_json::to_value(b).expect("bounds serialize")
}

/// Report with one block per step and the diagnostics summary.
pub fn run_report(run: &ApproximationRun, diag: &ConvergenceDiagnostics) -> serde_json::Value {
    let e_set = CellSet::from_cells(&run.domain, &diag.exceptional_cells);
    let mut k = 0;
    let steps: Vec<serde_json::Value> = run
        .steps
        .iter()
        .map(|s| {
            let Some(fields) = &s.fields else {
                return json!({ "nu": s.nu, "eps": s.eps, "error": s.error });
            };
            let sup_off = run
                .domain
                .cells()
                .filter(|&c| !e_set.contains(c))
                .map(|c| fields.f.norm_at(c))
                .fold(0.0, f64::max);
            let pick = |m: &[ModeTrend]| m.iter().map(|t| t.trend[k]).fold(0.0, f64::max);
            let block = json!({
                "nu": s.nu,
                "eps": s.eps,
                "bounds": s.output.as_ref().map(|o| bounds_json(&o.bounds)),
                "rho_to_estimate": s.rho_to_estimate,
                "residual_sup_offE": sup_off,
                "mode_weighted": pick(&diag.weighted),
                "mode_ball": pick(&diag.ball),
                "mode_measure": pick(&diag.measure),
                "phi_weighted_l1": s.phi_weighted,
                "f_l1": s.f_l1,
            });
            k += 1;
            block
        })
        .collect();
    json!({
        "system": run.system,
        "steps": steps,
        "u_convergence": run.u_convergence.as_ref().map(|r| json!({"passed": r.passed, "trend": r.trend})),
        "rho_trend": run.rho_trend,
        "diagnostics": diag,
    })
}
