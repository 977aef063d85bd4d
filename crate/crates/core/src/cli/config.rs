//! Run configuration: defaults, `key=value` files and flag overrides.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::dsolution_pipeline::EpsRule;
use crate::error::{Error, Result};
use crate::mollifier::Ramp;

use super::inputs::DEFAULT_FAT_CANTOR_TERMS;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: String,
    pub system: String,
    pub p: usize,
    pub eps: f64,
    pub lr: Option<f64>,
    pub out: PathBuf,
    pub seed: u64,
    pub dim: usize,
    /// Cells per axis of the unit box.
    pub cells: usize,
    /// Largest step; defaults to `3^(steps-1)` cells so the schedule ends at one cell.
    pub h0: Option<f64>,
    pub decay: f64,
    /// Schedule length of the diffuse-jet estimate.
    pub steps: usize,
    /// Number of approximations in the approximation run.
    pub nu_max: usize,
    pub eps_rule: EpsRule,
    pub bins: Option<usize>,
    pub rho_tol: f64,
    pub tau: f64,
    pub tau_inf: f64,
    pub mass_budget: f64,
    pub tol: Option<f64>,
    pub terms: usize,
    pub allow_unconverged: bool,
    pub window: usize,
    pub ramp: Ramp,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: "sin".into(),
            system: "derivative-zero".into(),
            p: 1,
            eps: 0.1,
            lr: None,
            out: PathBuf::from("djet-out"),
            seed: 0,
            dim: 1,
            cells: 59049,
            h0: None,
            decay: 1.0 / 3.0,
            steps: 4,
            nu_max: 6,
            eps_rule: EpsRule::Harmonic,
            bins: None,
            rho_tol: 1e-2,
            tau: 0.05,
            tau_inf: 0.05,
            mass_budget: 0.05,
            tol: None,
            terms: DEFAULT_FAT_CANTOR_TERMS,
            allow_unconverged: false,
            window: 0,
            ramp: Ramp::Exponential,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("{key}: cannot parse '{value}'")))
}

fn parse_eps_rule(value: &str) -> Result<EpsRule> {
    if value == "harmonic" {
        return Ok(EpsRule::Harmonic);
    }
    if let Some(rest) = value.strip_prefix("geometric:") {
        let mut parts = rest.split(':');
        if let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) {
            return Ok(EpsRule::Geometric {
                first: parse("eps_rule", a)?,
                ratio: parse("eps_rule", b)?,
            });
        }
    }
    Err(Error::Parse(format!(
        "eps_rule: expected 'harmonic' or 'geometric:FIRST:RATIO', got '{value}'"
    )))
}

fn opt<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" || value.is_empty() {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim().replace('-', "_").as_str() {
            "input" => self.input = v.to_string(),
            "system" => self.system = v.to_string(),
            "p" => self.p = parse(key, v)?,
            "eps" => self.eps = parse(key, v)?,
            "lr" => self.lr = opt(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "cells" => self.cells = parse(key, v)?,
            "h0" => self.h0 = opt(key, v)?,
            "decay" => self.decay = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "nu_max" => self.nu_max = parse(key, v)?,
            "eps_rule" => self.eps_rule = parse_eps_rule(v)?,
            "bins" => self.bins = opt(key, v)?,
            "rho_tol" => self.rho_tol = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "tau_inf" => self.tau_inf = parse(key, v)?,
            "mass_budget" => self.mass_budget = parse(key, v)?,
            "tol" => self.tol = opt(key, v)?,
            "terms" => self.terms = parse(key, v)?,
            "allow_unconverged" => self.allow_unconverged = parse(key, v)?,
            "window" => self.window = parse(key, v)?,
            "ramp" => {
                self.ramp = match v {
                    "exponential" => Ramp::Exponential,
                    "polynomial" => Ramp::Polynomial,
                    _ => return Err(Error::Parse(format!("ramp: expected exponential or polynomial, got '{v}'"))),
                }
            }
            other => {
                return Err(Error::Unknown {
                    kind: "config key",
                    name: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value, got '{line}'", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("eps", self.eps),
            ("rho_tol", self.rho_tol),
            ("tau", self.tau),
            ("tau_inf", self.tau_inf),
            ("mass_budget", self.mass_budget),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{k} must be positive, got {v}")));
            }
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                return Err(Error::Invalid(format!("tol must be positive, got {t}")));
            }
        }
        if !(self.tau < 1.0 && self.tau_inf < 1.0) {
            return Err(Error::Invalid("mass thresholds tau and tau_inf must lie below 1".into()));
        }
        if self.p == 0 {
            return Err(Error::Invalid("p must be at least 1".into()));
        }
        if self.dim == 0 || self.cells == 0 {
            return Err(Error::Invalid("dim and cells must be positive".into()));
        }
        if self.steps < 3 {
            return Err(Error::Invalid(format!("steps must be at least 3, got {}", self.steps)));
        }
        if self.nu_max == 0 {
            return Err(Error::Invalid("nu_max must be positive".into()));
        }
        Ok(())
    }

    pub fn cell_size(&self) -> f64 {
        1.0 / self.cells as f64
    }

    /// Largest step of a schedule with `count` entries.
    pub fn first_step(&self, count: usize) -> f64 {
        self.h0
            .unwrap_or_else(|| self.cell_size() * (1.0 / self.decay).round().powi(count as i32 - 1))
    }

    /// Resolved settings as sorted strings.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let o = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        let rule = match self.eps_rule {
            EpsRule::Harmonic => "harmonic".to_string(),
            EpsRule::Geometric { first, ratio } => format!("geometric:{first}:{ratio}"),
        };
        let ramp = match self.ramp {
            Ramp::Exponential => "exponential",
            Ramp::Polynomial => "polynomial",
        };
        [
            ("input", self.input.clone()),
            ("system", self.system.clone()),
            ("p", self.p.to_string()),
            ("eps", self.eps.to_string()),
            ("lr", o(self.lr.map(|v| v.to_string()))),
            ("out", self.out.display().to_string()),
            ("seed", self.seed.to_string()),
            ("dim", self.dim.to_string()),
            ("cells", self.cells.to_string()),
            ("h0", o(self.h0.map(|v| v.to_string()))),
            ("decay", self.decay.to_string()),
            ("steps", self.steps.to_string()),
            ("nu_max", self.nu_max.to_string()),
            ("eps_rule", rule),
            ("bins", o(self.bins.map(|v| v.to_string()))),
            ("rho_tol", self.rho_tol.to_string()),
            ("tau", self.tau.to_string()),
            ("tau_inf", self.tau_inf.to_string()),
            ("mass_budget", self.mass_budget.to_string()),
            ("tol", o(self.tol.map(|v| v.to_string()))),
            ("terms", self.terms.to_string()),
            ("allow_unconverged", self.allow_unconverged.to_string()),
            ("window", self.window.to_string()),
            ("ramp", ramp.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
