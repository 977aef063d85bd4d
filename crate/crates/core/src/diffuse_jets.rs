//! Diffuse jets as limits of Dirac embeddings of difference-quotient jets
//! along a step schedule.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::difference_quotients::{jet_of_quotients, JetField, QuotientOptions, StepMatrix};
use crate::error::{Error, Result};
use crate::sampled_fields::{CellSet, SampledField};
use crate::tensor_frames::Frame;
use crate::young_measures::{dirac_embed, weak_star_distance, BinScheme, DiscreteYoungMeasure, DEFAULT_K_MAX};

pub const DEFAULT_RHO_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct DiffuseJetOptions {
    pub rho_tol: f64,
    /// Bin scheme for orders `1..=p`; derived from the coarsest jet when absent.
    pub scheme: Option<Arc<BinScheme>>,
    /// Bins per axis for the derived scheme.
    pub bins: Option<usize>,
    /// Histogram averaging radius in cells (0 keeps the plain embedding).
    pub window: usize,
    pub joint: bool,
    pub k_max: usize,
    pub quotients: QuotientOptions,
}

impl Default for DiffuseJetOptions {
    fn default() -> Self {
        Self {
            rho_tol: DEFAULT_RHO_TOL,
            scheme: None,
            bins: None,
            window: 0,
            joint: false,
            k_max: DEFAULT_K_MAX,
            quotients: QuotientOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffuseJetEstimate {
    /// Embedding of the jet at the last step.
    pub measure: DiscreteYoungMeasure,
    pub schedule: Vec<StepMatrix>,
    /// Distances between consecutive embeddings.
    pub rho_trace: Vec<f64>,
    pub converged: bool,
    /// Distance between the limits along the even and odd sub-schedules.
    pub subschedule_gap: f64,
    /// Limits of the even and odd sub-schedules when they differ by more than `3 rho_tol`.
    pub candidates: Option<(DiscreteYoungMeasure, DiscreteYoungMeasure)>,
    pub diagnostic: Option<String>,
}

#[derive(Serialize)]
struct TraceDump<'a> {
    rho_trace: &'a [f64],
    converged: bool,
    schedule: Vec<&'a [Vec<f64>]>,
}

impl DiffuseJetEstimate {
    pub fn non_unique(&self) -> bool {
        self.candidates.is_some()
    }

    /// `{"rho_trace": [...], "converged": bool, "schedule": [...]}`.
    pub fn trace_json(&self) -> serde_json::Value {
        serde_json::to_value(TraceDump {
            rho_trace: &self.rho_trace,
            converged: self.converged,
            schedule: self.schedule.iter().map(|m| m.rows()).collect(),
        })
        .expect("trace serializes")
    }
}

/// Cauchy test on a distance trace: last gap within `tol` and the last three
/// gaps nonincreasing up to ten percent.
pub fn trace_converged(trace: &[f64], tol: f64) -> bool {
    let Some(&last) = trace.last() else { return false };
    let start = trace.len().saturating_sub(3);
    last <= tol && trace[start..].windows(2).all(|w| w[1] <= w[0] + 0.1 * w[0].max(tol))
}

/// Dirac embedding of a quotient jet over the slots of `scheme`.
pub fn embed_jet(scheme: &Arc<BinScheme>, jet: &JetField, joint: bool) -> Result<DiscreteYoungMeasure> {
    let fields: Vec<&SampledField> = (1..=jet.order()).map(|q| jet.component(q)).collect();
    dirac_embed(scheme.clone(), &fields, joint)
}

/// Default scheme for the orders of a quotient jet.
pub fn scheme_for_jet(jet: &JetField, bins: Option<usize>) -> Result<BinScheme> {
    let fields: Vec<(usize, &SampledField)> = (1..=jet.order()).map(|q| (q, jet.component(q))).collect();
    BinScheme::from_samples(&fields, bins)
}

/// Runs the schedule, embeds every quotient jet and reports the distance
/// trace. The estimate is one subsequential limit candidate; the even and
/// odd entries of the schedule are compared as disjoint sub-schedules.
pub fn estimate_diffuse_jet(
    u: &SampledField,
    f: &Frame,
    schedule: &[StepMatrix],
    opts: &DiffuseJetOptions,
) -> Result<DiffuseJetEstimate> {
    if schedule.len() < 3 {
        return Err(Error::Invalid(format!("schedule needs at least 3 steps, got {}", schedule.len())));
    }
    let p = schedule[0].order();
    if schedule.iter().any(|m| m.order() != p) {
        return Err(Error::Invalid("schedule mixes jet orders".into()));
    }
    let mut scheme = opts.scheme.clone();
    let mut embeddings = Vec::with_capacity(schedule.len());
    for h in schedule {
        let jet = jet_of_quotients(u, f, h, opts.quotients)?;
        let s = match &scheme {
            Some(s) => s.clone(),
            None => {
                let s = Arc::new(scheme_for_jet(&jet, opts.bins)?);
                scheme = Some(s.clone());
                s
            }
        };
        let theta = embed_jet(&s, &jet, opts.joint)?.window_average(opts.window)?;
        embeddings.push(theta);
    }
    let rho_trace = embeddings
        .windows(2)
        .map(|w| weak_star_distance(&w[0], &w[1], opts.k_max))
        .collect::<Result<Vec<_>>>()?;
    let converged = trace_converged(&rho_trace, opts.rho_tol);
    let last = embeddings.len() - 1;
    let (even, odd) = if last % 2 == 0 { (last, last - 1) } else { (last - 1, last) };
    let subschedule_gap = weak_star_distance(&embeddings[even], &embeddings[odd], opts.k_max)?;
    let candidates =
        (subschedule_gap > 3.0 * opts.rho_tol).then(|| (embeddings[even].clone(), embeddings[odd].clone()));
    let diagnostic = (!converged).then(|| {
        format!(
            "distance trace did not settle below {:.1e} before the schedule ended at step {:.3e} (last gap {:.3e})",
            opts.rho_tol,
            schedule[last].max_step(),
            rho_trace.last().copied().unwrap_or(f64::NAN)
        )
    });
    Ok(DiffuseJetEstimate {
        measure: embeddings.pop().expect("nonempty"),
        schedule: schedule.to_vec(),
        rho_trace,
        converged,
        subschedule_gap,
        candidates,
        diagnostic,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatibilityReport {
    pub passed: bool,
    /// Fraction of domain cells holding mass at least `1 - tau` in the bin of the exact jet.
    pub agreeing_fraction: f64,
    pub failing_cells: Vec<usize>,
}

/// For a map with known classical jet (`exact[k]` is the order `k+1`
/// derivative tensor in standard coordinates), checks that the estimate
/// concentrates on the exact jet: on all but a `mass_budget` fraction of
/// cells (default one percent), mass at least `1 - tau` sits in its bin.
pub fn check_jet_compatibility(
    exact: &[SampledField],
    est: &DiscreteYoungMeasure,
    tau: f64,
    mass_budget: Option<f64>,
) -> Result<CompatibilityReport> {
    let scheme = est.scheme();
    if exact.len() != scheme.len() {
        return Err(Error::Dimension(format!("{} exact orders for {} slots", exact.len(), scheme.len())));
    }
    let domain = est.domain();
    let failing = CellSet::from_predicate(domain, |cell| {
        let bins: Vec<u32> = exact
            .iter()
            .enumerate()
            .map(|(s, f)| scheme.slot(s).bin_of(f.value(cell)))
            .collect();
        let ok = if est.is_joint() {
            est.joint_at(cell)
                .iter()
                .filter(|(b, _)| *b == bins)
                .map(|e| e.1)
                .sum::<f64>()
                >= 1.0 - tau
        } else {
            bins.iter().enumerate().all(|(s, b)| est.mass(s, cell, *b) >= 1.0 - tau)
        };
        !ok
    });
    let fraction_bad = failing.len() as f64 / domain.cell_count() as f64;
    Ok(CompatibilityReport {
        passed: fraction_bad <= mass_budget.unwrap_or(0.01),
        agreeing_fraction: 1.0 - fraction_bad,
        failing_cells: failing.to_vec(),
    })
}
