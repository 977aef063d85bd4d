//! Forward difference quotients, their iterates and jets of quotients in a frame.
//!
//! Iterated quotients are evaluated through their finite stencil
//! `sum_S (-1)^(q-|S|) u(x + sum_{k in S} h_k a_k) / prod h_k`, which equals the
//! right-to-left iteration on the zero-extended map and needs no intermediate
//! values outside the domain.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampled_fields::{CellSet, GridDomain, SampledField};
use crate::tensor_frames::{decode_slots, symmetrize, tensor_len, Frame, SymTensor};

const GRID_TOL: f64 = 1e-9;
const AXIS_TOL: f64 = 1e-12;

/// Lower-triangular matrix of steps; row `q` (1-based) holds the `q` steps of
/// the order-`q` quotient, innermost first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMatrix {
    rows: Vec<Vec<f64>>,
}

/// Rounds `h` to the nearest multiple of `g` if it is one up to rounding noise.
fn snap_to_grid(h: f64, g: f64) -> Option<f64> {
    let k = (h / g).round();
    ((h / g - k).abs() <= GRID_TOL * k.abs().max(1.0)).then_some(k * g)
}

fn check_step(h: f64, g: f64) -> Result<f64> {
    if h == 0.0 || !h.is_finite() {
        return Err(Error::Step {
            step: h,
            reason: "steps must be finite and nonzero".into(),
        });
    }
    let snapped = snap_to_grid(h, g).ok_or_else(|| Error::Step {
        step: h,
        reason: format!("not a multiple of the cell size {g}"),
    })?;
    if snapped.abs() < g {
        return Err(Error::Step {
            step: h,
            reason: format!("below the cell size {g}"),
        });
    }
    Ok(snapped)
}

impl StepMatrix {
    /// Validates that row `q` has `q` entries, each a nonzero multiple of `g` of size at least `g`.
    pub fn new(rows: Vec<Vec<f64>>, g: f64) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("step matrix needs at least one row".into()));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (q, row) in rows.iter().enumerate() {
            if row.len() != q + 1 {
                return Err(Error::Dimension(format!("row {} has {} steps", q + 1, row.len())));
            }
            out.push(row.iter().map(|&h| check_step(h, g)).collect::<Result<Vec<_>>>()?);
        }
        Ok(Self { rows: out })
    }

    /// All entries equal to `h`.
    pub fn diagonal(p: usize, h: f64, g: f64) -> Result<Self> {
        Self::new((1..=p).map(|q| vec![h; q]).collect(), g)
    }

    pub fn order(&self) -> usize {
        self.rows.len()
    }

    /// Steps of the order-`q` quotient, `q` starting at 1.
    pub fn row(&self, q: usize) -> &[f64] {
        &self.rows[q - 1]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Largest step magnitude.
    pub fn max_step(&self) -> f64 {
        self.rows.iter().flatten().fold(0.0, |m, h| m.max(h.abs()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuotientOptions {
    /// Multilinear resampling for steps that do not land on cell centres.
    pub resample: bool,
}

/// How one stencil displacement is read off the grid.
enum Probe {
    Offset(Vec<i64>),
    Point(Vec<f64>),
}

fn axis_of(a: &[f64]) -> Option<(usize, f64)> {
    let mut found = None;
    for (k, &v) in a.iter().enumerate() {
        if (v.abs() - 1.0).abs() < AXIS_TOL {
            if found.is_some() {
                return None;
            }
            found = Some((k, v.signum()));
        } else if v.abs() >= AXIS_TOL {
            return None;
        }
    }
    found
}

/// Integer cell offset of `h a`, if it lands on a cell centre.
fn grid_offset(a: &[f64], h: f64, g: f64) -> Option<Vec<i64>> {
    let (axis, sign) = axis_of(a)?;
    let k = snap_to_grid(h, g)? / g;
    let mut off = vec![0i64; a.len()];
    off[axis] = (sign * k).round() as i64;
    Some(off)
}

struct Stencil {
    probes: Vec<(f64, Probe)>,
    scale: f64,
}

fn build_stencil(domain: &GridDomain, dirs: &[&[f64]], steps: &[f64], opts: QuotientOptions) -> Result<Stencil> {
    let n = domain.dim();
    let g = domain.cell_size();
    if dirs.len() != steps.len() || dirs.is_empty() {
        return Err(Error::Dimension(format!("{} directions for {} steps", dirs.len(), steps.len())));
    }
    let mut offsets = Vec::with_capacity(dirs.len());
    for (a, &h) in dirs.iter().zip(steps) {
        if a.len() != n {
            return Err(Error::Dimension(format!("direction of length {} in dimension {n}", a.len())));
        }
        if h == 0.0 || !h.is_finite() {
            return Err(Error::Step {
                step: h,
                reason: "steps must be finite and nonzero".into(),
            });
        }
        match grid_offset(a, h, g) {
            Some(o) => offsets.push(Some(o)),
            None if opts.resample => offsets.push(None),
            None => {
                return Err(Error::Step {
                    step: h,
                    reason: "displacement is off the grid and resampling is disabled".into(),
                })
            }
        }
    }
    let q = dirs.len();
    let exact = offsets.iter().all(|o| o.is_some());
    let mut probes = Vec::with_capacity(1 << q);
    for mask in 0u32..(1 << q) {
        let sign = if (q as u32 - mask.count_ones()) % 2 == 0 { 1.0 } else { -1.0 };
        if exact {
            let mut off = vec![0i64; n];
            for (k, o) in offsets.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    for (a, b) in off.iter_mut().zip(o.as_ref().expect("exact")) {
                        *a += b;
                    }
                }
            }
            probes.push((sign, Probe::Offset(off)));
        } else {
            let mut disp = vec![0.0; n];
            for k in 0..q {
                if mask & (1 << k) != 0 {
                    for (d, a) in disp.iter_mut().zip(dirs[k]) {
                        *d += steps[k] * a;
                    }
                }
            }
            probes.push((sign, Probe::Point(disp)));
        }
    }
    Ok(Stencil {
        probes,
        scale: steps.iter().product(),
    })
}

/// Reads zero-extended values of `u`; the flag reports reads outside the domain.
struct Reader<'a> {
    u: &'a SampledField,
    strides: Vec<usize>,
}

impl<'a> Reader<'a> {
    fn new(u: &'a SampledField) -> Self {
        let shape = u.domain().shape();
        let mut strides = vec![1usize; shape.len()];
        for k in (0..shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        Self { u, strides }
    }

    fn cell_at(&self, cell: usize, off: &[i64]) -> Option<usize> {
        let shape = self.u.domain().shape();
        let mut target = cell as i64;
        for k in 0..shape.len() {
            if off[k] != 0 {
                let coord = ((cell / self.strides[k]) % shape[k]) as i64 + off[k];
                if coord < 0 || coord >= shape[k] as i64 {
                    return None;
                }
                target += off[k] * self.strides[k] as i64;
            }
        }
        Some(target as usize)
    }

    /// Adds `w * u(component)` at the probe to `acc`; returns whether the read left the domain.
    fn accumulate(&self, cell: usize, probe: &Probe, w: f64, acc: &mut [f64]) -> bool {
        let d = self.u.domain();
        match probe {
            Probe::Offset(off) => match self.cell_at(cell, off) {
                Some(t) if d.contains(t) => {
                    for (a, v) in acc.iter_mut().zip(self.u.value(t)) {
                        *a += w * v;
                    }
                    false
                }
                _ => true,
            },
            Probe::Point(disp) => {
                let n = d.dim();
                let g = d.cell_size();
                let x = d.cell_center(cell);
                // position in cell-centre coordinates
                let t: Vec<f64> = (0..n).map(|k| (x[k] + disp[k] - d.origin()[k]) / g - 0.5).collect();
                let base: Vec<i64> = t.iter().map(|s| s.floor() as i64).collect();
                let frac: Vec<f64> = t.iter().zip(&base).map(|(s, b)| s - *b as f64).collect();
                let mut exited = false;
                for corner in 0u32..(1 << n) {
                    let mut weight = w;
                    let mut idx = base.clone();
                    for k in 0..n {
                        if corner & (1 << k) != 0 {
                            weight *= frac[k];
                            idx[k] += 1;
                        } else {
                            weight *= 1.0 - frac[k];
                        }
                    }
                    if weight == 0.0 {
                        continue;
                    }
                    match d.linear_index(&idx) {
                        Some(c) if d.contains(c) => {
                            for (a, v) in acc.iter_mut().zip(self.u.value(c)) {
                                *a += weight * v;
                            }
                        }
                        _ => {
                            if weight.abs() > 1e-12 * w.abs() {
                                exited = true;
                            }
                        }
                    }
                }
                exited
            }
        }
    }
}

fn apply_stencil(u: &SampledField, st: &Stencil) -> (Vec<f64>, Vec<bool>) {
    let d = u.domain();
    let dim = u.dim();
    let reader = Reader::new(u);
    let mut values = vec![0.0; dim * d.total_cells()];
    let mut exits = vec![false; d.total_cells()];
    for cell in d.cells() {
        let acc = &mut values[cell * dim..(cell + 1) * dim];
        let mut exited = false;
        for (sign, probe) in &st.probes {
            exited |= reader.accumulate(cell, probe, *sign, acc);
        }
        acc.iter_mut().for_each(|v| *v /= st.scale);
        exits[cell] = exited;
    }
    (values, exits)
}

/// `(u(x + h a) - u(x)) / h` on every cell, reading `u` as zero outside the domain.
pub fn dq1(u: &SampledField, a: &[f64], h: f64, opts: QuotientOptions) -> Result<SampledField> {
    dq_iterated(u, &[a], &[h], opts)
}

/// Iterated quotient with `dirs = (a_p, .., a_1)` and `steps = (h_p, .., h_1)`;
/// `a_1` with `h_1` is applied first.
pub fn dq_iterated(u: &SampledField, dirs: &[&[f64]], steps: &[f64], opts: QuotientOptions) -> Result<SampledField> {
    let st = build_stencil(u.domain(), dirs, steps, opts)?;
    let (values, _) = apply_stencil(u, &st);
    Ok(SampledField::from_raw(u.domain_arc().clone(), u.dim(), values))
}

/// Per-cell jet `(X_1, .., X_p)` of difference quotients in standard coordinates.
#[derive(Debug, Clone)]
pub struct JetField {
    domain: Arc<GridDomain>,
    big_n: usize,
    /// `orders[q-1]` has `N n^q` components per cell.
    orders: Vec<SampledField>,
    symmetry_deviation: f64,
    exits: CellSet,
}

impl JetField {
    pub fn order(&self) -> usize {
        self.orders.len()
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.big_n, self.domain.dim())
    }

    /// The order-`q` component as a field, `q` starting at 1.
    pub fn component(&self, q: usize) -> &SampledField {
        &self.orders[q - 1]
    }

    pub fn at(&self, cell: usize, q: usize) -> SymTensor {
        let (big_n, n) = self.dims();
        SymTensor::from_symmetric(q, big_n, n, self.orders[q - 1].value(cell).to_vec())
    }

    /// Largest change made by symmetrizing the raw quotient coefficients.
    pub fn symmetry_deviation(&self) -> f64 {
        self.symmetry_deviation
    }

    /// Cells whose stencil reads outside the domain.
    pub fn boundary_exits(&self) -> &CellSet {
        &self.exits
    }
}

/// Jet of difference quotients of `u` along the frame directions with the steps of `h`.
///
/// The coefficient of `E^{alpha i_1..i_q}` is the order-`q` quotient of
/// `E^alpha . u`, innermost along `E^(alpha)i_1` with step `h_{q,1}`.
pub fn jet_of_quotients(u: &SampledField, f: &Frame, h: &StepMatrix, opts: QuotientOptions) -> Result<JetField> {
    let domain = u.domain_arc().clone();
    let n = domain.dim();
    let big_n = u.dim();
    if f.dims() != (big_n, n) {
        return Err(Error::Dimension(format!(
            "frame dims {:?} for a map R^{n} -> R^{big_n}",
            f.dims()
        )));
    }
    if !opts.resample && !f.is_axis_aligned() {
        return Err(Error::Step {
            step: h.max_step(),
            reason: "frame directions are not grid axes and resampling is disabled".into(),
        });
    }
    let total = domain.total_cells();
    // scalar components E^alpha . u
    let projected: Vec<SampledField> = (0..big_n)
        .map(|alpha| {
            let e = f.target(alpha);
            let mut vals = vec![0.0; total];
            for cell in domain.cells() {
                vals[cell] = u.value(cell).iter().zip(e).map(|(a, b)| a * b).sum();
            }
            SampledField::from_raw(domain.clone(), 1, vals)
        })
        .collect();
    let mut exits = vec![false; total];
    let mut deviation: f64 = 0.0;
    let mut orders = Vec::with_capacity(h.order());
    for q in 1..=h.order() {
        let steps = h.row(q);
        let block = n.pow(q as u32);
        let len = tensor_len(q, big_n, n);
        let mut coeffs = vec![0.0; total * len];
        for alpha in 0..big_n {
            for lin in 0..block {
                let idx = decode_slots(lin, q, n);
                // dirs listed outermost first
                let dirs: Vec<&[f64]> = idx.iter().rev().map(|&i| f.direction(alpha, i)).collect();
                let rev_steps: Vec<f64> = steps.iter().rev().copied().collect();
                let st = build_stencil(&domain, &dirs, &rev_steps, opts)?;
                let (vals, ex) = apply_stencil(&projected[alpha], &st);
                for cell in domain.cells() {
                    coeffs[cell * len + alpha * block + lin] = vals[cell];
                    exits[cell] |= ex[cell];
                }
            }
        }
        let standard = f == &Frame::standard(big_n, n);
        let mut values = vec![0.0; total * len];
        for cell in domain.cells() {
            let c = &coeffs[cell * len..(cell + 1) * len];
            let full = if standard { c.to_vec() } else { f.coefficients_to_standard(c, q) };
            let sym = symmetrize(&full, q, big_n, n);
            for (a, b) in full.iter().zip(&sym) {
                deviation = deviation.max((a - b).abs());
            }
            values[cell * len..(cell + 1) * len].copy_from_slice(&sym);
        }
        orders.push(SampledField::from_raw(domain.clone(), len, values));
    }
    let exit_set = CellSet::from_predicate(&domain, |c| exits[c]);
    Ok(JetField {
        domain,
        big_n,
        orders,
        symmetry_deviation: deviation,
        exits: exit_set,
    })
}

/// Diagonal schedule: entry `nu` has every step equal to `h0 * decay^nu`, `nu = 0..count`.
pub fn step_schedule(p: usize, h0: f64, decay: f64, count: usize, g: f64) -> Result<Vec<StepMatrix>> {
    if p == 0 {
        return Err(Error::Invalid("jet order must be at least 1".into()));
    }
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::Invalid(format!("decay must lie in (0,1), got {decay}")));
    }
    (0..count)
        .map(|nu| StepMatrix::diagonal(p, h0 * decay.powi(nu as i32), g))
        .collect()
}

/// Copies of `base` with entry `(q, r)` (both 1-based) replaced by each of `values`;
/// the other indices stay frozen.
pub fn sweep_entry(base: &StepMatrix, q: usize, r: usize, values: &[f64], g: f64) -> Result<Vec<StepMatrix>> {
    if q == 0 || q > base.order() || r == 0 || r > q {
        return Err(Error::Dimension(format!("no entry ({q},{r}) in an order-{} matrix", base.order())));
    }
    values
        .iter()
        .map(|&v| {
            let mut rows = base.rows.clone();
            rows[q - 1][r - 1] = v;
            StepMatrix::new(rows, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(cells: usize, lo: f64, g: f64) -> Arc<GridDomain> {
        Arc::new(GridDomain::full_box(vec![lo], vec![cells], g).unwrap())
    }

    const OPTS: QuotientOptions = QuotientOptions { resample: false };

    #[test]
    fn constants_are_annihilated() {
        let d = line(50, 0.0, 0.02);
        let u = SampledField::scalar_from_fn(d.clone(), |_| 3.5).unwrap();
        let v = dq1(&u, &[1.0], 0.1, OPTS).unwrap();
        // cells whose shifted centre stays inside
        for c in 0..45 {
            assert_eq!(v.value(c)[0], 0.0);
        }
    }

    #[test]
    fn square_quotient_at_one() {
        // cell centres at k 0.1, so x = 1 is cell 10
        let d = line(40, -0.05, 0.1);
        let u = SampledField::scalar_from_fn(d.clone(), |x| x[0] * x[0]).unwrap();
        let v = dq1(&u, &[1.0], 0.1, OPTS).unwrap();
        let x = d.cell_center(10)[0];
        let expected = ((x + 0.1) * (x + 0.1) - x * x) / 0.1;
        assert!((v.value(10)[0] - expected).abs() < 1e-12);
        assert!((v.value(10)[0] - 2.1).abs() < 1e-12);
    }

    #[test]
    fn second_quotient_of_square_is_two() {
        let g = 1.0 / 64.0;
        let d = line(64, 0.0, g);
        let u = SampledField::scalar_from_fn(d, |x| x[0] * x[0]).unwrap();
        let h = 4.0 * g;
        let v = dq_iterated(&u, &[&[1.0], &[1.0]], &[h, h], OPTS).unwrap();
        for c in 0..56 {
            assert!((v.value(c)[0] - 2.0).abs() < 1e-9, "cell {c}: {}", v.value(c)[0]);
        }
    }

    #[test]
    fn mixed_quotients_commute() {
        let g = 0.125;
        let d = Arc::new(GridDomain::full_box(vec![0.0, 0.0], vec![8, 8], g).unwrap());
        let u = SampledField::scalar_from_fn(d, |x| x[0] * x[1]).unwrap();
        let a = dq_iterated(&u, &[&[1.0, 0.0], &[0.0, 1.0]], &[g, 2.0 * g], OPTS).unwrap();
        let b = dq_iterated(&u, &[&[0.0, 1.0], &[1.0, 0.0]], &[2.0 * g, g], OPTS).unwrap();
        for c in 0..64 {
            assert!((a.value(c)[0] - b.value(c)[0]).abs() < 1e-12);
        }
        assert!((a.value(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn off_grid_step_needs_resampling() {
        let d = line(10, 0.0, 0.1);
        let u = SampledField::scalar_from_fn(d, |x| x[0]).unwrap();
        assert!(matches!(dq1(&u, &[1.0], 0.15, OPTS), Err(Error::Step { .. })));
        assert!(matches!(dq1(&u, &[1.0], 0.0, OPTS), Err(Error::Step { .. })));
        let v = dq1(&u, &[1.0], 0.15, QuotientOptions { resample: true }).unwrap();
        assert!((v.value(2)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jet_of_quadratic_is_exact() {
        let g = 1.0 / 32.0;
        let d = Arc::new(GridDomain::full_box(vec![0.0, 0.0], vec![32, 32], g).unwrap());
        // u = x^2 + 3xy - y^2: Hessian [[2,3],[3,-2]]
        let u = SampledField::scalar_from_fn(d.clone(), |x| x[0] * x[0] + 3.0 * x[0] * x[1] - x[1] * x[1]).unwrap();
        let h = StepMatrix::diagonal(2, 2.0 * g, g).unwrap();
        let jet = jet_of_quotients(&u, &Frame::standard(1, 2), &h, OPTS).unwrap();
        let cell = d.linear_index(&[10, 12]).unwrap();
        let hess = jet.at(cell, 2);
        let expect = [2.0, 3.0, 3.0, -2.0];
        for (a, b) in hess.entries().iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(jet.symmetry_deviation() < 1e-9);
        assert!(jet.boundary_exits().contains(d.linear_index(&[31, 3]).unwrap()));
        assert!(!jet.boundary_exits().contains(cell));
    }

    #[test]
    fn schedule_examples() {
        let s = step_schedule(1, 0.5, 0.5, 3, 1.0 / 64.0).unwrap();
        let steps: Vec<f64> = s.iter().map(|m| m.row(1)[0]).collect();
        assert_eq!(steps, vec![0.5, 0.25, 0.125]);
        let s2 = step_schedule(2, 0.5, 0.5, 2, 1.0 / 64.0).unwrap();
        assert_eq!(s2[1].rows(), &[vec![0.25], vec![0.25, 0.25]]);
        assert!(step_schedule(1, 0.5, 0.5, 10, 1.0 / 64.0).is_err());
    }

    #[test]
    fn sweep_changes_one_entry() {
        let g = 0.01;
        let base = StepMatrix::diagonal(2, 0.08, g).unwrap();
        let sw = sweep_entry(&base, 2, 1, &[0.04, 0.02], g).unwrap();
        assert_eq!(sw[1].rows(), &[vec![0.08], vec![0.02, 0.08]]);
    }
}
