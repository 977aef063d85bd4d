//! Cube decompositions of the grid and the choice of cube side and shrink factor.

use serde::{Deserialize, Serialize};

use super::modulus::EmpiricalModulus;
use crate::error::{Error, Inequality, Result};
use crate::sampled_fields::{CellSet, GridDomain};

/// Cubes of `cube_cells^n` cells anchored at the box corner, keeping those
/// that lie in the domain; inner cubes are concentric with side `alpha delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct CubeDecomposition {
    pub delta: f64,
    pub cube_cells: usize,
    pub alpha: f64,
    /// Multi-index of every kept cube on the cube lattice.
    pub cubes: Vec<Vec<usize>>,
    /// Cell at the centre of every kept cube.
    pub centers: Vec<usize>,
    pub outer: CellSet,
    pub inner: CellSet,
}

impl CubeDecomposition {
    pub fn new(domain: &GridDomain, cube_cells: usize, alpha: f64) -> Self {
        assert!(cube_cells % 2 == 1, "cube sides are odd numbers of cells");
        let n = domain.dim();
        let k = cube_cells;
        let per_axis: Vec<usize> = domain.shape().iter().map(|s| s / k).collect();
        let count: usize = per_axis.iter().product();
        let half = (k - 1) / 2;
        let delta = k as f64 * domain.cell_size();
        let mut cubes = Vec::new();
        let mut centers = Vec::new();
        let mut outer = CellSet::empty(domain);
        let mut inner = CellSet::empty(domain);
        let offsets: Vec<Vec<usize>> = (0..k.pow(n as u32))
            .map(|lin| crate::tensor_frames::decode_slots(lin, n, k))
            .collect();
        for c in 0..count {
            let mut idx = vec![0usize; n];
            let mut rem = c;
            for a in (0..n).rev() {
                idx[a] = rem % per_axis[a];
                rem /= per_axis[a];
            }
            let cells: Vec<usize> = offsets
                .iter()
                .map(|o| {
                    let m: Vec<i64> = (0..n).map(|a| (idx[a] * k + o[a]) as i64).collect();
                    domain.linear_index(&m).expect("cube inside box")
                })
                .collect();
            if !cells.iter().all(|&c| domain.contains(c)) {
                continue;
            }
            let centre: Vec<i64> = (0..n).map(|a| (idx[a] * k + half) as i64).collect();
            centers.push(domain.linear_index(&centre).expect("centre inside box"));
            for (o, &cell) in offsets.iter().zip(&cells) {
                outer.insert(cell);
                // |offset| g < alpha delta / 2 on every axis
                if o.iter().all(|&j| ((j as f64 - half as f64).abs()) < alpha * k as f64 / 2.0) {
                    inner.insert(cell);
                }
            }
            cubes.push(idx);
        }
        Self {
            delta,
            cube_cells,
            alpha,
            cubes,
            centers,
            outer,
            inner,
        }
    }

    /// Largest distance from a cube centre to a cell centre of its cube.
    pub fn reach(&self, domain: &GridDomain) -> f64 {
        (self.cube_cells - 1) as f64 / 2.0 * domain.cell_size() * (domain.dim() as f64).sqrt()
    }
}

/// Measured sides of the cube-selection inequalities at the chosen parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCheck {
    pub delta: f64,
    pub alpha: f64,
    pub taylor_remainder: f64,
    pub modulus: f64,
    pub outer_gap: f64,
    pub inner_gap: f64,
    pub eps: f64,
}

/// `max_k sum_{q>k} ||U^q|| rho^(q-k) / (q-k)!`.
pub fn taylor_remainder(sup_norms: &[f64], rho: f64) -> f64 {
    let p = sup_norms.len() - 1;
    (0..=p)
        .map(|k| {
            ((k + 1)..=p)
                .map(|q| {
                    let j = q - k;
                    sup_norms[q] * rho.powi(j as i32) / (1..=j).product::<usize>() as f64
                })
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

/// `(max{1 - eps / (2|Omega|), 1/2})^(1/n)`.
pub fn shrink_factor(eps: f64, measure: f64, n: usize) -> f64 {
    (1.0 - eps / (2.0 * measure)).max(0.5).powf(1.0 / n as f64)
}

/// Candidate cube sides: `diam / 2^j` rounded down to odd multiples of `g`,
/// largest first, ending with a single cell.
pub fn delta_candidates(domain: &GridDomain) -> Vec<usize> {
    let g = domain.cell_size();
    let mut out: Vec<usize> = Vec::new();
    let mut delta = domain.diameter();
    loop {
        let mut k = (delta / g).floor() as usize;
        if k % 2 == 0 {
            k = k.saturating_sub(1);
        }
        let k = k.max(1);
        if out.last() != Some(&k) {
            out.push(k);
        }
        if k == 1 {
            break;
        }
        delta /= 2.0;
    }
    out
}

/// Pushes `alpha` toward 1 until the inner cubes cover all but `eps` of the domain.
pub fn tighten_alpha(domain: &GridDomain, cube_cells: usize, alpha: f64, eps: f64) -> (CubeDecomposition, f64) {
    let total = domain.measure();
    let mut a = alpha;
    loop {
        let dec = CubeDecomposition::new(domain, cube_cells, a);
        let gap = total - dec.inner.measure();
        let saturated = a * cube_cells as f64 > (cube_cells - 1) as f64;
        if gap <= eps || saturated {
            return (dec, gap);
        }
        a = 1.0 - (1.0 - a) / 2.0;
    }
}

/// Chooses the cube side and shrink factor for the patch construction.
///
/// Cube sides are tried from the domain diameter downward. A side is accepted
/// when the Taylor remainder and the modulus, both taken at the largest
/// centre-to-cell distance of a cube, are at most `eps`, and the kept cubes
/// miss at most `eps / 2` of the domain. The shrink factor starts at the
/// closed-form value and moves toward 1 until the inner cubes miss at most
/// `eps`.
pub fn select_grid_params(
    modulus: &EmpiricalModulus,
    sup_norms: &[f64],
    eps: f64,
    domain: &GridDomain,
) -> Result<(CubeDecomposition, GridCheck)> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let n = domain.dim();
    let total = domain.measure();
    let alpha0 = shrink_factor(eps, total, n);
    let mut last_failure = None;
    for k in delta_candidates(domain) {
        let probe = CubeDecomposition::new(domain, k, alpha0);
        let rho = probe.reach(domain);
        let taylor = taylor_remainder(sup_norms, rho);
        let omega = modulus.at(rho);
        let outer_gap = total - probe.outer.measure();
        let failure = if taylor > eps {
            Some((Inequality::TaylorRemainder, taylor, eps))
        } else if omega > eps {
            Some((Inequality::Modulus, omega, eps))
        } else if outer_gap > eps / 2.0 {
            Some((Inequality::OuterCover, outer_gap, eps / 2.0))
        } else {
            None
        };
        if let Some(f) = failure {
            last_failure = Some((f, probe.delta));
            continue;
        }
        let (dec, inner_gap) = tighten_alpha(domain, k, alpha0, eps);
        if inner_gap > eps {
            last_failure = Some(((Inequality::InnerCover, inner_gap, eps), dec.delta));
            continue;
        }
        let check = GridCheck {
            delta: dec.delta,
            alpha: dec.alpha,
            taylor_remainder: taylor,
            modulus: omega,
            outer_gap,
            inner_gap,
            eps,
        };
        return Ok((dec, check));
    }
    let ((inequality, measured, budget), delta) = last_failure.expect("at least one candidate");
    Err(Error::GridResolution {
        inequality,
        measured,
        budget,
        delta,
    })
}
