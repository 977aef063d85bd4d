//! Smooth approximation of a sampled map together with its difference-quotient
//! jet, off a small exceptional set, by cutoff polynomial patches on cubes.
//!
//! The construction stacks `V = (u, D^{[p],h} u)`, truncates it radially,
//! smooths it by a bump convolution, and places on every cube of a lattice the
//! Taylor polynomial of the smoothed stack at the cube centre, multiplied by a
//! cutoff that is 1 on the concentric inner cube. The exceptional set collects
//! the cells where truncation or smoothing moved the stack by more than the
//! internal tolerance, and the cells outside the inner cubes.

pub mod cutoff;
pub mod grid;
pub mod modulus;
pub mod series;

use std::collections::HashMap;
use std::ops::Range;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use crate::difference_quotients::{jet_of_quotients, JetField, QuotientOptions, StepMatrix};
use crate::error::{Error, Inequality, Result};
use crate::sampled_fields::{exceedance_set, lr_norm, CellSet, GridDomain, SampledField};
use crate::tensor_frames::{tensor_len, Frame, SymTensor};

pub use cutoff::{Cutoff, Ramp};
pub use grid::{select_grid_params, CubeDecomposition, GridCheck};
pub use modulus::{empirical_modulus, EmpiricalModulus};

use series::MultiIndexTable;

/// Stacks `(u, X_1, .., X_p)` per cell; returns the component range of every order.
pub fn stack_jet(u: &SampledField, jet: &JetField) -> Result<(SampledField, Vec<Range<usize>>)> {
    if !u.domain().same_grid(jet.domain()) {
        return Err(Error::Incompatible("map and jet live on different grids".into()));
    }
    let mut fields = vec![u];
    for q in 1..=jet.order() {
        fields.push(jet.component(q));
    }
    let dim: usize = fields.iter().map(|f| f.dim()).sum();
    let domain = u.domain_arc().clone();
    let mut values = vec![0.0; dim * domain.total_cells()];
    let mut groups = Vec::with_capacity(fields.len());
    let mut off = 0;
    for f in &fields {
        groups.push(off..off + f.dim());
        off += f.dim();
    }
    for cell in domain.cells() {
        let mut at = cell * dim;
        for f in &fields {
            values[at..at + f.dim()].copy_from_slice(f.value(cell));
            at += f.dim();
        }
    }
    Ok((SampledField::from_raw(domain, dim, values), groups))
}

fn truncate_slice(v: &mut [f64], r: f64) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm >= r {
        v.iter_mut().for_each(|x| *x *= r / norm);
    }
}

/// Radial truncation: unchanged where `|V| < R`, `R V / |V|` elsewhere.
pub fn truncate(v: &SampledField, r: f64) -> Result<SampledField> {
    truncate_components(v, r, 0..v.dim())
}

/// Radial truncation of the components in `range` only.
pub fn truncate_components(v: &SampledField, r: f64, range: Range<usize>) -> Result<SampledField> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("truncation radius must be positive, got {r}")));
    }
    let dim = v.dim();
    let mut values = v.values().to_vec();
    for cell in v.domain().cells() {
        truncate_slice(&mut values[cell * dim + range.start..cell * dim + range.end], r);
    }
    Ok(SampledField::from_raw(v.domain_arc().clone(), dim, values))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruncationParams {
    pub radius: f64,
    /// `(R, |{|V| > R}|)` for every radius tried.
    pub trace: Vec<(f64, f64)>,
    /// Cells where the truncation changes the stack.
    pub set: CellSet,
}

/// Smallest `R` in `1, 2, 4, ..` with `|{|V| > R}| <= eps / 2`.
pub fn select_truncation_radius(v: &SampledField, eps: f64) -> Result<TruncationParams> {
    select_radius_on(v, eps, 0..v.dim())
}

fn select_radius_on(v: &SampledField, eps: f64, range: Range<usize>) -> Result<TruncationParams> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let norms = v.components(range).norm_field();
    let mut trace = Vec::new();
    let mut r = 1.0;
    loop {
        let set = exceedance_set(&norms, r)?;
        let m = set.measure();
        trace.push((r, m));
        if m <= eps / 2.0 {
            return Ok(TruncationParams { radius: r, trace, set });
        }
        r *= 2.0;
    }
}

#[derive(Debug, Clone)]
pub struct SmoothResult {
    pub fields: SampledField,
    /// Bump radius used; at most one cell means no smoothing.
    pub sigma: f64,
    /// Cells where the smoothed stack is more than `eps` from its input.
    pub set: CellSet,
    /// `(sigma, |set|)` for every radius tried.
    pub trace: Vec<(f64, f64)>,
    /// `L^r` distance of the first group from its input, when requested.
    pub lr_gap: Option<f64>,
}

fn bump_weights(sigma: f64, g: f64) -> Vec<f64> {
    let m = ((sigma / g) * (1.0 - 1e-12)).ceil() as i64 - 1;
    if m <= 0 {
        return vec![1.0];
    }
    let w: Vec<f64> = (-m..=m)
        .map(|j| {
            let t = j as f64 * g / sigma;
            (-1.0 / (1.0 - t * t)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Convolution with a separable bump of radius `sigma`, reading the field as
/// zero outside the domain.
pub fn bump_convolve(w: &SampledField, sigma: f64) -> SampledField {
    let d = w.domain();
    let weights = bump_weights(sigma, d.cell_size());
    if weights.len() == 1 {
        return w.clone();
    }
    let m = (weights.len() / 2) as i64;
    let shape = d.shape();
    let dim = w.dim();
    let total = d.total_cells();
    let mut strides = vec![1usize; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * shape[k + 1];
    }
    let mut cur = w.values().to_vec();
    for k in 0..shape.len() {
        let (len, stride) = (shape[k], strides[k]);
        let mut next = vec![0.0; cur.len()];
        for start in 0..total {
            if (start / stride) % len != 0 {
                continue;
            }
            for i in 0..len as i64 {
                let out = (start + i as usize * stride) * dim;
                let lo = (-m).max(-i);
                let hi = m.min(len as i64 - 1 - i);
                for j in lo..=hi {
                    let wt = weights[(j + m) as usize];
                    let src = (start + (i + j) as usize * stride) * dim;
                    for c in 0..dim {
                        next[out + c] += wt * cur[src + c];
                    }
                }
            }
        }
        cur = next;
    }
    for cell in 0..total {
        if !d.contains(cell) {
            cur[cell * dim..(cell + 1) * dim].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    SampledField::from_raw(w.domain_arc().clone(), dim, cur)
}

/// Smooths `w` with bumps of radius `min(diam/8, 128 g)`, halving until the
/// cells moved by more than `eps` have measure at most `eps / 2` (and, when
/// `lr` is given, the components in `first` move by at most `eps` in `L^r`).
/// At radius one cell the kernel is the identity, so the loop always ends.
pub fn smooth_approx(w: &SampledField, eps: f64, lr: Option<(f64, Range<usize>)>) -> Result<SmoothResult> {
    if !(eps > 0.0) {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    let d = w.domain();
    let g = d.cell_size();
    let mut sigma = (d.diameter() / 8.0).min(128.0 * g);
    let mut trace = Vec::new();
    loop {
        let s = if sigma <= g { g } else { sigma };
        let smoothed = bump_convolve(w, s);
        let dev = smoothed.sub(w)?.norm_field();
        let set = exceedance_set(&dev, eps)?;
        let m = set.measure();
        trace.push((s, m));
        let lr_gap = match &lr {
            Some((r, range)) => Some(lr_norm(&smoothed.components(range.clone()).sub(&w.components(range.clone()))?, *r)?),
            None => None,
        };
        let ok = m <= eps / 2.0 && lr_gap.map_or(true, |x| x <= eps);
        if ok || s <= g {
            return Ok(SmoothResult {
                fields: smoothed,
                sigma: s,
                set,
                trace,
                lr_gap,
            });
        }
        sigma /= 2.0;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    /// Position of the cube on the cube lattice.
    pub cube: Vec<usize>,
    pub center: Vec<f64>,
    /// Flat standard-coordinate tensors `U^q(center)`, `q = 0..=p`.
    pub coeffs: Vec<Vec<f64>>,
    pub cutoff: Cutoff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `max |u - u_eps|` over domain cells off the exceptional set.
    pub sup_u: f64,
    /// `max |D^{[p],h} u - D^{[p]} u_eps|` over domain cells off the exceptional set.
    pub sup_jet: f64,
    #[serde(rename = "measure_E")]
    pub measure_e: f64,
    /// `||u - u_eps||_{L^r}` when an exponent was requested.
    pub lr: Option<f64>,
    pub eps: f64,
    pub verified: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MollifyOptions {
    pub ramp: Ramp,
    pub quotients: QuotientOptions,
    /// Also bound the `L^r` distance for this exponent.
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MollifierOutput {
    pub delta: f64,
    pub alpha: f64,
    #[serde(rename = "R")]
    pub radius: f64,
    pub sigma: f64,
    pub eps: f64,
    pub eps_internal: f64,
    pub order: usize,
    pub dims: (usize, usize),
    pub cell_size: f64,
    pub origin: Vec<f64>,
    pub cube_cells: usize,
    pub patches: Vec<Patch>,
    pub exceptional_cells: Vec<usize>,
    pub bounds: BoundReport,
    pub grid_check: GridCheck,
    #[serde(skip)]
    lookup: HashMap<Vec<usize>, usize>,
    #[serde(skip)]
    table: OnceLock<MultiIndexTable>,
}

/// Contracts the last slot of an order-`q` tensor with `y`.
fn contract_last(data: &[f64], y: &[f64]) -> Vec<f64> {
    let n = y.len();
    data.chunks(n).map(|c| c.iter().zip(y).map(|(a, b)| a * b).sum()).collect()
}

impl MollifierOutput {
    fn index(&mut self) {
        self.lookup = self.patches.iter().enumerate().map(|(i, p)| (p.cube.clone(), i)).collect();
    }

    /// Parses the JSON form and restores the cube lookup.
    pub fn from_json(s: &str) -> Result<Self> {
        let mut out: Self = serde_json::from_str(s)?;
        out.index();
        Ok(out)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("mollifier output serializes")
    }

    fn table(&self) -> &MultiIndexTable {
        self.table.get_or_init(|| MultiIndexTable::new(self.dims.1, self.order))
    }

    fn patch_at(&self, x: &[f64]) -> Option<&Patch> {
        let side = self.cube_cells as f64 * self.cell_size;
        let mut idx = Vec::with_capacity(x.len());
        for (xk, o) in x.iter().zip(&self.origin) {
            let t = ((xk - o) / side).floor();
            if !(t >= 0.0) {
                return None;
            }
            idx.push(t as usize);
        }
        let p = &self.patches[*self.lookup.get(&idx)?];
        p.cutoff.supports(x).then_some(p)
    }

    /// Flat derivative tensors `D^k u_eps(x)`, `k = 0..=p`.
    pub fn evaluate_all(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let (big_n, n) = self.dims;
        let p = self.order;
        let zero = || (0..=p).map(|k| vec![0.0; tensor_len(k, big_n, n)]).collect::<Vec<_>>();
        if x.len() != n {
            return zero();
        }
        let Some(patch) = self.patch_at(x) else { return zero() };
        let y: Vec<f64> = x.iter().zip(&patch.center).map(|(a, b)| a - b).collect();
        // D^k P(x) = sum_{q>=k} U^q : y^(q-k) / (q-k)!
        let mut dp: Vec<Vec<f64>> = zero();
        for q in 0..=p {
            let mut t = patch.coeffs[q].clone();
            let mut fact = 1.0;
            for j in 0..=q {
                let k = q - j;
                if j > 0 {
                    fact *= j as f64;
                }
                for (a, b) in dp[k].iter_mut().zip(&t) {
                    *a += b / fact;
                }
                if k > 0 {
                    t = contract_last(&t, &y);
                }
            }
        }
        if patch.cutoff.is_flat(x) {
            return dp;
        }
        let table = self.table();
        let factors: Vec<series::Series> = (0..n).map(|k| patch.cutoff.axis_series(k, x[k], p, p)).collect();
        let zeta = table.tensor_product(&factors);
        let facts = table.factorials();
        let mut out = zero();
        for alpha in 0..big_n {
            let mut poly = vec![0.0; table.len()];
            for (b, beta) in table.list.iter().enumerate() {
                let k: usize = beta.iter().sum();
                let slots: Vec<usize> = beta.iter().enumerate().flat_map(|(i, &d)| std::iter::repeat(i).take(d)).collect();
                let block = n.pow(k as u32);
                let lin = crate::tensor_frames::encode_slots(&slots, n);
                poly[b] = dp[k][alpha * block + lin] / facts[b];
            }
            let prod = table.mul(&zeta, &poly);
            for (k, o) in out.iter_mut().enumerate() {
                let block = n.pow(k as u32);
                for lin in 0..block {
                    let slots = crate::tensor_frames::decode_slots(lin, k, n);
                    let b = table.from_slots(&slots);
                    o[alpha * block + lin] = prod[b] * facts[b];
                }
            }
        }
        out
    }

    /// `D^k u_eps(x)`; `k = 0` gives the value.
    pub fn evaluate(&self, x: &[f64], k: usize) -> Result<SymTensor> {
        if k > self.order {
            return Err(Error::Order { k, p: self.order });
        }
        let (big_n, n) = self.dims;
        let mut all = self.evaluate_all(x);
        Ok(SymTensor::from_symmetric(k, big_n, n, all.swap_remove(k)))
    }

    pub fn exceptional_set(&self, domain: &GridDomain) -> CellSet {
        CellSet::from_cells(domain, &self.exceptional_cells)
    }

    /// `u_eps` and its jet at every cell centre, as fields per order.
    pub fn sample(&self, domain: &Arc<GridDomain>) -> Vec<SampledField> {
        let (big_n, n) = self.dims;
        let mut vals: Vec<Vec<f64>> = (0..=self.order)
            .map(|k| vec![0.0; tensor_len(k, big_n, n) * domain.total_cells()])
            .collect();
        for cell in domain.cells() {
            let all = self.evaluate_all(&domain.cell_center(cell));
            for (k, v) in all.into_iter().enumerate() {
                let len = v.len();
                vals[k][cell * len..(cell + 1) * len].copy_from_slice(&v);
            }
        }
        vals.into_iter()
            .enumerate()
            .map(|(k, v)| SampledField::from_raw(domain.clone(), tensor_len(k, big_n, n), v))
            .collect()
    }
}

fn build_output(
    u: &SampledField,
    smoothed: &SampledField,
    groups: &[Range<usize>],
    dec: &CubeDecomposition,
    check: GridCheck,
    fset: &CellSet,
    meta: (f64, f64, f64, f64, Ramp),
) -> MollifierOutput {
    let (radius, sigma, eps, eps_internal, ramp) = meta;
    let d = u.domain();
    let p = groups.len() - 1;
    let patches = dec
        .cubes
        .iter()
        .zip(&dec.centers)
        .map(|(cube, &cell)| {
            let center = d.cell_center(cell);
            Patch {
                cube: cube.clone(),
                center: center.clone(),
                coeffs: groups.iter().map(|r| smoothed.value(cell)[r.clone()].to_vec()).collect(),
                cutoff: Cutoff {
                    center,
                    half_side: dec.delta / 2.0,
                    inner_half_side: dec.alpha * dec.delta / 2.0,
                    ramp,
                },
            }
        })
        .collect();
    let outside_inner = CellSet::whole(d).difference(&dec.inner);
    let e = fset.union(&outside_inner);
    let mut out = MollifierOutput {
        delta: dec.delta,
        alpha: dec.alpha,
        radius,
        sigma,
        eps,
        eps_internal,
        order: p,
        dims: (u.dim(), d.dim()),
        cell_size: d.cell_size(),
        origin: d.origin().to_vec(),
        cube_cells: dec.cube_cells,
        patches,
        exceptional_cells: e.to_vec(),
        bounds: BoundReport {
            sup_u: 0.0,
            sup_jet: 0.0,
            measure_e: e.measure(),
            lr: None,
            eps,
            verified: false,
        },
        grid_check: check,
        lookup: HashMap::new(),
        table: OnceLock::new(),
    };
    out.index();
    out
}

/// Measures the approximation bounds at the cell centres.
pub fn measure_bounds(out: &MollifierOutput, u: &SampledField, jet: &JetField, lr: Option<f64>) -> Result<BoundReport> {
    let d = u.domain();
    let e = out.exceptional_set(d);
    let mut sup_u: f64 = 0.0;
    let mut sup_jet: f64 = 0.0;
    let mut lr_acc = 0.0;
    for cell in d.cells() {
        let all = out.evaluate_all(&d.cell_center(cell));
        let du: f64 = u.value(cell).iter().zip(&all[0]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if let Some(r) = lr {
            lr_acc += du.powf(r);
        }
        if e.contains(cell) {
            continue;
        }
        sup_u = sup_u.max(du);
        let mut sq = 0.0;
        for q in 1..=jet.order() {
            sq += jet.component(q).value(cell).iter().zip(&all[q]).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        }
        sup_jet = sup_jet.max(sq.sqrt());
    }
    let lr_val = lr.map(|r| (lr_acc * d.cell_volume()).powf(1.0 / r));
    let eps = out.eps;
    let measure_e = e.measure();
    Ok(BoundReport {
        sup_u,
        sup_jet,
        measure_e,
        lr: lr_val,
        eps,
        verified: sup_u <= eps && sup_jet <= eps && measure_e <= eps && lr_val.map_or(true, |x| x <= eps),
    })
}

/// Builds the patched approximation of `u` for the jet of quotients with steps `h`.
///
/// Internally the construction runs at `eps / (3p)` (and at most `eps / 7`
/// when an `L^r` bound is requested) so that the measured bounds can be
/// compared against `eps` itself. When the `L^r` distance exceeds `eps`, the
/// cube side is decreased and the shrink factor pushed toward 1 until it
/// fits or the grid runs out.
pub fn assemble(u: &SampledField, f: &Frame, h: &StepMatrix, eps: f64, opts: &MollifyOptions) -> Result<MollifierOutput> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    if let Some(r) = opts.lr {
        if !(r >= 1.0) || !r.is_finite() {
            return Err(Error::Invalid(format!("L^r exponent must lie in [1, inf), got {r}")));
        }
    }
    let p = h.order();
    let eps_i = match opts.lr {
        Some(_) => (eps / (3 * p) as f64).min(eps / 7.0),
        None => eps / (3 * p) as f64,
    };
    let jet = jet_of_quotients(u, f, h, opts.quotients)?;
    let (v, groups) = stack_jet(u, &jet)?;
    let big = v.dim();
    let (trunc, w) = match opts.lr {
        Some(_) => {
            let jet_part = groups[0].end..big;
            let t = select_radius_on(&v, eps_i, jet_part.clone())?;
            let w = truncate_components(&v, t.radius, jet_part)?;
            (t, w)
        }
        None => {
            let t = select_truncation_radius(&v, eps_i)?;
            let w = truncate(&v, t.radius)?;
            (t, w)
        }
    };
    let smooth = smooth_approx(&w, eps_i, opts.lr.map(|r| (r, groups[0].clone())))?;
    let fset = trunc.set.union(&smooth.set);
    let sup_norms: Vec<f64> = groups
        .iter()
        .map(|r| smooth.fields.components(r.clone()).sup_norm())
        .collect();
    let modulus = EmpiricalModulus::new(smooth.fields.clone(), groups.clone());
    let d = u.domain();
    let (dec, check) = select_grid_params(&modulus, &sup_norms, eps_i, d)?;
    let meta = (trunc.radius, smooth.sigma, eps, eps_i, opts.ramp);
    let mut out = build_output(u, &smooth.fields, &groups, &dec, check.clone(), &fset, meta);
    out.bounds = measure_bounds(&out, u, &jet, opts.lr)?;
    let Some(r) = opts.lr else { return Ok(out) };
    if out.bounds.lr.unwrap_or(0.0) <= eps {
        return Ok(out);
    }
    let mut best = out.bounds.lr.unwrap_or(f64::INFINITY);
    for k in grid::delta_candidates(d).into_iter().filter(|&k| k < dec.cube_cells) {
        let mut alpha = dec.alpha;
        for _ in 0..8 {
            let (cand, inner_gap) = grid::tighten_alpha(d, k, alpha, eps_i);
            let rho = cand.reach(d);
            let check = GridCheck {
                delta: cand.delta,
                alpha: cand.alpha,
                taylor_remainder: grid::taylor_remainder(&sup_norms, rho),
                modulus: modulus.at(rho),
                outer_gap: d.measure() - cand.outer.measure(),
                inner_gap,
                eps: eps_i,
            };
            let mut o = build_output(u, &smooth.fields, &groups, &cand, check, &fset, meta);
            o.bounds = measure_bounds(&o, u, &jet, Some(r))?;
            let lr = o.bounds.lr.unwrap_or(f64::INFINITY);
            if lr <= eps {
                return Ok(o);
            }
            best = best.min(lr);
            if cand.alpha * k as f64 > (k - 1) as f64 {
                break;
            }
            alpha = 1.0 - (1.0 - cand.alpha) / 2.0;
        }
    }
    Err(Error::GridResolution {
        inequality: Inequality::LrBound,
        measured: best,
        budget: eps,
        delta: d.cell_size(),
    })
}
