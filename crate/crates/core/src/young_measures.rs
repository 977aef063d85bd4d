//! Discrete Young measures: per-cell probability histograms over binned
//! compactified tensor spaces.
//!
//! A [`BinScheme`] has one slot per stored tensor order. Each slot bins the
//! independent coordinates (entries with sorted domain indices) of its
//! tensors uniformly on `[-R, R]` and keeps one extra bin for everything with
//! a coordinate beyond `R`, including the point at infinity.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampled_fields::{ae_convergence_check, CellSet, GridDomain, SampledField};
use crate::tensor_frames::{chordal_to_infinity, decode_slots, encode_slots, tensor_len, CompactifiedValue, SymTensor};

pub const DEFAULT_K_MAX: usize = 4096;
/// Bins per axis when a slot has a single independent coordinate. Odd, so
/// that zero is a bin centre.
pub const DEFAULT_SCALAR_BINS: usize = 65;
pub const DEFAULT_TENSOR_BINS: usize = 9;

/// Binning of one tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotBins {
    pub order: usize,
    pub big_n: usize,
    pub n: usize,
    pub radius: f64,
    pub bins: usize,
    /// Flat indices of the independent coordinates.
    #[serde(skip)]
    coords: Vec<usize>,
    /// For every flat index, its position among the independent coordinates.
    #[serde(skip)]
    expand: Vec<usize>,
    /// Bins ordered for the weak* enumeration: infinity, then by centre norm.
    #[serde(skip)]
    ranked: Vec<u32>,
}

impl SlotBins {
    pub fn new(order: usize, big_n: usize, n: usize, radius: f64, bins: usize) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() {
            return Err(Error::Invalid(format!("bin radius must be positive, got {radius}")));
        }
        if bins == 0 {
            return Err(Error::Invalid("need at least one bin per axis".into()));
        }
        let len = tensor_len(order, big_n, n);
        let block = n.pow(order as u32);
        let mut coords = Vec::new();
        let mut expand = vec![0; len];
        let mut pos_of = HashMap::new();
        for flat in 0..len {
            let alpha = flat / block;
            let mut idx = decode_slots(flat % block, order, n);
            idx.sort_unstable();
            let key = alpha * block + encode_slots(&idx, n);
            let pos = *pos_of.entry(key).or_insert_with(|| {
                coords.push(key);
                coords.len() - 1
            });
            expand[flat] = pos;
        }
        let finite = (bins as u64)
            .checked_pow(coords.len() as u32)
            .filter(|c| *c < u32::MAX as u64)
            .ok_or_else(|| Error::Invalid(format!("{bins}^{} bins do not fit the bin index", coords.len())))?;
        let mut slot = Self {
            order,
            big_n,
            n,
            radius,
            bins,
            coords,
            expand,
            ranked: Vec::new(),
        };
        let mut finite_bins: Vec<(f64, u32)> = (0..finite as u32).map(|b| (slot.center_norm(b), b)).collect();
        finite_bins.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        slot.ranked = std::iter::once(finite as u32).chain(finite_bins.into_iter().map(|(_, b)| b)).collect();
        Ok(slot)
    }

    fn rebuild(&self) -> Result<Self> {
        Self::new(self.order, self.big_n, self.n, self.radius, self.bins)
    }

    /// Number of independent coordinates.
    pub fn independent_dim(&self) -> usize {
        self.coords.len()
    }

    pub fn flat_len(&self) -> usize {
        self.expand.len()
    }

    pub fn infinity_bin(&self) -> u32 {
        self.ranked[0]
    }

    pub fn bin_count(&self) -> usize {
        self.infinity_bin() as usize + 1
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.radius / self.bins as f64
    }

    /// Bin holding the flat tensor `values`.
    pub fn bin_of(&self, values: &[f64]) -> u32 {
        let mut lin = 0u32;
        for &c in &self.coords {
            let v = values[c];
            if !(v.abs() <= self.radius) {
                return self.infinity_bin();
            }
            let b = (((v + self.radius) / (2.0 * self.radius)) * self.bins as f64).floor() as i64;
            lin = lin * self.bins as u32 + b.clamp(0, self.bins as i64 - 1) as u32;
        }
        lin
    }

    pub fn bin_of_value(&self, v: &CompactifiedValue) -> u32 {
        match v {
            CompactifiedValue::Infinity => self.infinity_bin(),
            CompactifiedValue::Finite(t) => self.bin_of(t.entries()),
        }
    }

    fn digits(&self, bin: u32) -> Vec<u32> {
        let mut d = vec![0; self.coords.len()];
        let mut b = bin;
        for k in (0..d.len()).rev() {
            d[k] = b % self.bins as u32;
            b /= self.bins as u32;
        }
        d
    }

    fn coordinate_center(&self, digit: u32) -> f64 {
        self.radius * ((2 * digit as i64 + 1 - self.bins as i64) as f64 / self.bins as f64)
    }

    /// Flat entries of the centre of a finite bin.
    pub fn center_entries(&self, bin: u32) -> Vec<f64> {
        let vals: Vec<f64> = self.digits(bin).iter().map(|d| self.coordinate_center(*d)).collect();
        self.expand.iter().map(|&p| vals[p]).collect()
    }

    fn center_norm(&self, bin: u32) -> f64 {
        self.center_entries(bin).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Representative of a bin: its centre, or infinity for the infinity bin.
    pub fn representative(&self, bin: u32) -> CompactifiedValue {
        if bin == self.infinity_bin() {
            CompactifiedValue::Infinity
        } else {
            CompactifiedValue::Finite(SymTensor::from_symmetric(self.order, self.big_n, self.n, self.center_entries(bin)))
        }
    }

    /// Chordal distance from infinity to the nearest finite centre.
    fn infinity_gap(&self) -> f64 {
        let far = self.ranked[self.ranked.len() - 1];
        chordal_to_infinity(&self.center_entries(far))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinScheme {
    slots: Vec<SlotBins>,
}

impl BinScheme {
    pub fn new(slots: Vec<SlotBins>) -> Result<Self> {
        if slots.is_empty() {
            return Err(Error::Invalid("bin scheme needs at least one slot".into()));
        }
        Ok(Self { slots })
    }

    /// Restores the derived tables after deserializing.
    pub fn rebuild(&self) -> Result<Self> {
        Self::new(self.slots.iter().map(|s| s.rebuild()).collect::<Result<_>>()?)
    }

    /// Default scheme for sampled tensor fields: twice the 0.999-quantile of
    /// the largest coordinate as radius (1 when that is zero), and
    /// [`DEFAULT_SCALAR_BINS`] or [`DEFAULT_TENSOR_BINS`] bins per axis.
    pub fn from_samples(fields: &[(usize, &SampledField)], bins: Option<usize>) -> Result<Self> {
        let mut slots = Vec::with_capacity(fields.len());
        for &(order, f) in fields {
            let n = f.domain().dim();
            let block = n.pow(order as u32);
            if f.dim() % block != 0 {
                return Err(Error::Dimension(format!("field of dim {} is not an order-{order} tensor", f.dim())));
            }
            let big_n = f.dim() / block;
            let probe = SlotBins::new(order, big_n, n, 1.0, 1)?;
            let mut maxima: Vec<f64> = f
                .domain()
                .cells()
                .map(|c| probe.coords.iter().map(|&k| f.value(c)[k].abs()).fold(0.0, f64::max))
                .collect();
            maxima.sort_by(f64::total_cmp);
            let q = maxima[((0.999 * maxima.len() as f64).ceil() as usize).clamp(1, maxima.len()) - 1];
            let radius = if q > 0.0 { 2.0 * q } else { 1.0 };
            let b = bins.unwrap_or(if probe.independent_dim() == 1 {
                DEFAULT_SCALAR_BINS
            } else {
                DEFAULT_TENSOR_BINS
            });
            slots.push(SlotBins::new(order, big_n, n, radius, b)?);
        }
        Self::new(slots)
    }

    pub fn slots(&self) -> &[SlotBins] {
        &self.slots
    }

    pub fn slot(&self, k: usize) -> &SlotBins {
        &self.slots[k]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Scheme of the product space: the slots of `self` followed by those of `other`.
    pub fn concat(&self, other: &BinScheme) -> BinScheme {
        BinScheme {
            slots: self.slots.iter().chain(&other.slots).cloned().collect(),
        }
    }
}

/// Sparse histogram sorted by bin.
pub type Histogram = Vec<(u32, f64)>;
/// Sparse joint histogram over all slots, sorted by bin tuple.
pub type JointHistogram = Vec<(Vec<u32>, f64)>;

const NORMALIZATION_TOL: f64 = 1e-9;

fn normalize_histogram(mut h: Histogram) -> Histogram {
    h.sort_by_key(|e| e.0);
    let mut out: Histogram = Vec::with_capacity(h.len());
    for (b, m) in h {
        match out.last_mut() {
            Some(last) if last.0 == b => last.1 += m,
            _ => out.push((b, m)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

fn total_mass<T>(h: &[(T, f64)]) -> f64 {
    h.iter().map(|e| e.1).sum()
}

fn check_probability<T>(h: &[(T, f64)], cell: usize) -> Result<()> {
    if h.iter().any(|e| !(e.1 >= 0.0)) {
        return Err(Error::Invalid(format!("negative or non-finite mass at cell {cell}")));
    }
    let s = total_mass(h);
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::Invalid(format!("histogram at cell {cell} sums to {s}")));
    }
    Ok(())
}

/// Per-cell probability measures over the compactified tensor spaces of a scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteYoungMeasure {
    domain: Arc<GridDomain>,
    scheme: Arc<BinScheme>,
    /// `marginals[slot][cell]`; empty outside the domain.
    marginals: Vec<Vec<Histogram>>,
    /// Joint histograms when the measure is not stored as a fibre product.
    joint: Option<Vec<JointHistogram>>,
}

impl DiscreteYoungMeasure {
    /// Builds a fibre-product measure from per-slot, per-cell histograms.
    pub fn from_marginals(domain: Arc<GridDomain>, scheme: Arc<BinScheme>, marginals: Vec<Vec<Histogram>>) -> Result<Self> {
        if marginals.len() != scheme.len() {
            return Err(Error::Dimension(format!("{} marginals for {} slots", marginals.len(), scheme.len())));
        }
        let mut clean = Vec::with_capacity(marginals.len());
        for (s, per_cell) in marginals.into_iter().enumerate() {
            if per_cell.len() != domain.total_cells() {
                return Err(Error::Dimension("one histogram per box cell expected".into()));
            }
            let nb = scheme.slot(s).bin_count() as u32;
            let mut out = Vec::with_capacity(per_cell.len());
            for (cell, h) in per_cell.into_iter().enumerate() {
                if !domain.contains(cell) {
                    out.push(Vec::new());
                    continue;
                }
                if h.iter().any(|e| e.0 >= nb) {
                    return Err(Error::Invalid(format!("bin out of range at cell {cell}")));
                }
                let h = normalize_histogram(h);
                check_probability(&h, cell)?;
                out.push(h);
            }
            clean.push(out);
        }
        Ok(Self {
            domain,
            scheme,
            marginals: clean,
            joint: None,
        })
    }

    /// Builds a measure from joint histograms; the marginals are derived.
    pub fn from_joint(domain: Arc<GridDomain>, scheme: Arc<BinScheme>, joint: Vec<JointHistogram>) -> Result<Self> {
        if joint.len() != domain.total_cells() {
            return Err(Error::Dimension("one histogram per box cell expected".into()));
        }
        let slots = scheme.len();
        let mut marginals = vec![vec![Vec::new(); domain.total_cells()]; slots];
        let mut clean = Vec::with_capacity(joint.len());
        for (cell, mut h) in joint.into_iter().enumerate() {
            if !domain.contains(cell) {
                clean.push(Vec::new());
                continue;
            }
            if h.iter().any(|e| e.0.len() != slots) {
                return Err(Error::Dimension(format!("joint bin of wrong arity at cell {cell}")));
            }
            h.sort_by(|a, b| a.0.cmp(&b.0));
            let mut merged: JointHistogram = Vec::with_capacity(h.len());
            for (b, m) in h {
                match merged.last_mut() {
                    Some(last) if last.0 == b => last.1 += m,
                    _ => merged.push((b, m)),
                }
            }
            merged.retain(|e| e.1 != 0.0);
            check_probability(&merged, cell)?;
            for s in 0..slots {
                marginals[s][cell] = normalize_histogram(merged.iter().map(|(b, m)| (b[s], *m)).collect());
            }
            clean.push(merged);
        }
        Ok(Self {
            domain,
            scheme,
            marginals,
            joint: Some(clean),
        })
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn domain_arc(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn scheme(&self) -> &BinScheme {
        &self.scheme
    }

    pub fn scheme_arc(&self) -> &Arc<BinScheme> {
        &self.scheme
    }

    pub fn is_joint(&self) -> bool {
        self.joint.is_some()
    }

    pub fn marginal(&self, slot: usize, cell: usize) -> &Histogram {
        &self.marginals[slot][cell]
    }

    /// Mass of one bin of one slot at a cell.
    pub fn mass(&self, slot: usize, cell: usize, bin: u32) -> f64 {
        self.marginals[slot][cell]
            .binary_search_by_key(&bin, |e| e.0)
            .map(|i| self.marginals[slot][cell][i].1)
            .unwrap_or(0.0)
    }

    pub fn infinity_mass(&self, slot: usize, cell: usize) -> f64 {
        self.mass(slot, cell, self.scheme.slot(slot).infinity_bin())
    }

    /// The joint histogram at a cell: stored, or the product of the marginals.
    pub fn joint_at(&self, cell: usize) -> JointHistogram {
        if let Some(j) = &self.joint {
            return j[cell].clone();
        }
        let mut acc: JointHistogram = vec![(Vec::new(), 1.0)];
        for s in 0..self.scheme.len() {
            let mut next = Vec::with_capacity(acc.len() * self.marginals[s][cell].len());
            for (bins, m) in &acc {
                for (b, w) in &self.marginals[s][cell] {
                    let mut t = bins.clone();
                    t.push(*b);
                    next.push((t, m * w));
                }
            }
            acc = next;
        }
        if !self.domain.contains(cell) {
            acc.clear();
        }
        acc
    }

    /// Largest per-cell deviation from unit mass over all slots.
    pub fn normalization_defect(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for cell in self.domain.cells() {
            for s in 0..self.scheme.len() {
                worst = worst.max((total_mass(&self.marginals[s][cell]) - 1.0).abs());
            }
            if let Some(j) = &self.joint {
                worst = worst.max((total_mass(&j[cell]) - 1.0).abs());
            }
        }
        worst
    }

    fn compatible(&self, other: &Self) -> Result<()> {
        if !self.domain.same_grid(&other.domain) {
            return Err(Error::Incompatible("measures live on different grids".into()));
        }
        if self.scheme != other.scheme {
            return Err(Error::Incompatible("measures use different bin schemes".into()));
        }
        Ok(())
    }

    /// `lambda self + (1 - lambda) other`.
    pub fn mix(&self, other: &Self, lambda: f64) -> Result<Self> {
        self.compatible(other)?;
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::Invalid(format!("mixing weight {lambda} outside [0,1]")));
        }
        if self.joint.is_some() || other.joint.is_some() {
            let joint = (0..self.domain.total_cells())
                .map(|c| {
                    let mut h: JointHistogram = self.joint_at(c).into_iter().map(|(b, m)| (b, lambda * m)).collect();
                    h.extend(other.joint_at(c).into_iter().map(|(b, m)| (b, (1.0 - lambda) * m)));
                    h
                })
                .collect();
            return Self::from_joint(self.domain.clone(), self.scheme.clone(), joint);
        }
        let marginals = (0..self.scheme.len())
            .map(|s| {
                (0..self.domain.total_cells())
                    .map(|c| {
                        let mut h: Histogram = self.marginals[s][c].iter().map(|(b, m)| (*b, lambda * m)).collect();
                        h.extend(other.marginals[s][c].iter().map(|(b, m)| (*b, (1.0 - lambda) * m)));
                        h
                    })
                    .collect()
            })
            .collect();
        Self::from_marginals(self.domain.clone(), self.scheme.clone(), marginals)
    }

    /// Averages every histogram over the cells of the domain within `radius`
    /// cells in each axis.
    pub fn window_average(&self, radius: usize) -> Result<Self> {
        if radius == 0 {
            return Ok(self.clone());
        }
        let n = self.domain.dim();
        let r = radius as i64;
        let width = 2 * radius + 1;
        let offsets: Vec<Vec<i64>> = (0..width.pow(n as u32))
            .map(|lin| decode_slots(lin, n, width).iter().map(|&d| d as i64 - r).collect())
            .collect();
        let mut neighbours = vec![Vec::new(); self.domain.total_cells()];
        for cell in self.domain.cells() {
            neighbours[cell] = offsets
                .iter()
                .filter_map(|o| self.domain.offset(cell, o))
                .filter(|c| self.domain.contains(*c))
                .collect();
        }
        if self.joint.is_some() {
            let joint = (0..self.domain.total_cells())
                .map(|c| {
                    let w = 1.0 / neighbours[c].len().max(1) as f64;
                    neighbours[c]
                        .iter()
                        .flat_map(|&nb| self.joint_at(nb).into_iter().map(move |(b, m)| (b, m * w)))
                        .collect()
                })
                .collect();
            return Self::from_joint(self.domain.clone(), self.scheme.clone(), joint);
        }
        let marginals = (0..self.scheme.len())
            .map(|s| {
                (0..self.domain.total_cells())
                    .map(|c| {
                        let w = 1.0 / neighbours[c].len().max(1) as f64;
                        neighbours[c]
                            .iter()
                            .flat_map(|&nb| self.marginals[s][nb].iter().map(move |(b, m)| (*b, m * w)))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self::from_marginals(self.domain.clone(), self.scheme.clone(), marginals)
    }

    /// Writes `cell,order,bin_index,mass` rows for every charged bin.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "cell,order,bin_index,mass")?;
        for cell in self.domain.cells() {
            for (s, slot) in self.scheme.slots().iter().enumerate() {
                for (b, m) in &self.marginals[s][cell] {
                    writeln!(w, "{cell},{},{b},{m:e}", slot.order)?;
                }
            }
        }
        Ok(())
    }
}

/// Dirac embedding `x -> delta_{v(x)}`; `fields[k]` is binned by slot `k`.
pub fn dirac_embed(scheme: Arc<BinScheme>, fields: &[&SampledField], joint: bool) -> Result<DiscreteYoungMeasure> {
    if fields.len() != scheme.len() || fields.is_empty() {
        return Err(Error::Dimension(format!("{} fields for {} slots", fields.len(), scheme.len())));
    }
    let domain = fields[0].domain_arc().clone();
    for (k, f) in fields.iter().enumerate() {
        if !f.domain().same_grid(&domain) {
            return Err(Error::Incompatible("fields live on different grids".into()));
        }
        if f.dim() != scheme.slot(k).flat_len() {
            return Err(Error::Dimension(format!(
                "slot {k} expects {} components, field has {}",
                scheme.slot(k).flat_len(),
                f.dim()
            )));
        }
    }
    let total = domain.total_cells();
    if joint {
        let mut hists = vec![Vec::new(); total];
        for cell in domain.cells() {
            let bins = fields
                .iter()
                .enumerate()
                .map(|(k, f)| scheme.slot(k).bin_of(f.value(cell)))
                .collect();
            hists[cell] = vec![(bins, 1.0)];
        }
        return DiscreteYoungMeasure::from_joint(domain, scheme, hists);
    }
    let marginals = fields
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let slot = scheme.slot(k);
            (0..total)
                .map(|cell| {
                    if domain.contains(cell) {
                        vec![(slot.bin_of(f.value(cell)), 1.0)]
                    } else {
                        Vec::new()
                    }
                })
                .collect()
        })
        .collect();
    DiscreteYoungMeasure::from_marginals(domain, scheme, marginals)
}

/// Value factor of a test function, evaluated at bin representatives.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueFactor {
    Constant(f64),
    /// Tent of half-width one bin, in the max-norm of the independent
    /// coordinates, around the centre of a finite bin.
    Hat(u32),
    /// `max(0, 1 - d(X, inf) / d0)` with `d0` the chordal gap between
    /// infinity and the outermost finite centres.
    Infinity,
}

impl ValueFactor {
    pub fn eval(&self, slot: &SlotBins, bin: u32) -> f64 {
        match *self {
            ValueFactor::Constant(c) => c,
            ValueFactor::Hat(centre) => {
                let inf = slot.infinity_bin();
                if bin == inf || centre == inf {
                    return 0.0;
                }
                let spread = slot
                    .digits(bin)
                    .iter()
                    .zip(slot.digits(centre))
                    .map(|(a, b)| (*a as i64 - b as i64).unsigned_abs())
                    .max()
                    .unwrap_or(0);
                (1.0 - spread as f64).max(0.0)
            }
            ValueFactor::Infinity => {
                if bin == slot.infinity_bin() {
                    return 1.0;
                }
                let d = chordal_to_infinity(&slot.center_entries(bin));
                (1.0 - d / slot.infinity_gap()).max(0.0)
            }
        }
    }
}

/// `phi(x) psi(X)` with `phi` the indicator of a cell set and `psi` a product
/// of value factors over some slots (the remaining slots contribute 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    pub cells: CellSet,
    pub factors: Vec<(usize, ValueFactor)>,
}

/// `<theta, Phi> = sum over cells of g^n phi(cell) sum over bins psi(centre) mass`.
pub fn pair(theta: &DiscreteYoungMeasure, phi: &TestFunction) -> Result<f64> {
    let scheme = theta.scheme();
    if phi.factors.iter().any(|(s, _)| *s >= scheme.len()) {
        return Err(Error::Dimension("test function refers to a missing slot".into()));
    }
    let vol = theta.domain().cell_volume();
    let mut acc = 0.0;
    for cell in phi.cells.iter().filter(|c| theta.domain().contains(*c)) {
        let v = if theta.is_joint() && phi.factors.len() > 1 {
            theta
                .joint_at(cell)
                .iter()
                .map(|(bins, m)| m * phi.factors.iter().map(|(s, f)| f.eval(scheme.slot(*s), bins[*s])).product::<f64>())
                .sum()
        } else if phi.factors.is_empty() {
            total_mass(theta.marginal(0, cell))
        } else {
            phi.factors
                .iter()
                .map(|(s, f)| {
                    theta
                        .marginal(*s, cell)
                        .iter()
                        .map(|(b, m)| m * f.eval(scheme.slot(*s), *b))
                        .sum::<f64>()
                })
                .product()
        };
        acc += vol * v;
    }
    Ok(acc)
}

/// Dyadic block partition of the box at one level; `None` once every block is a single cell.
fn block_ids(domain: &GridDomain, level: u32) -> Option<(Vec<usize>, usize)> {
    let shape = domain.shape();
    let parts: Vec<usize> = shape.iter().map(|&s| (1usize << level.min(40)).min(s)).collect();
    if level > 0 {
        let prev: Vec<usize> = shape.iter().map(|&s| (1usize << (level - 1).min(40)).min(s)).collect();
        if prev == parts {
            return None;
        }
    }
    let count = parts.iter().product();
    let ids = (0..domain.total_cells())
        .map(|cell| {
            let idx = domain.multi_index(cell);
            let mut id = 0;
            for k in 0..shape.len() {
                id = id * parts[k] + idx[k] * parts[k] / shape[k];
            }
            id
        })
        .collect();
    Some((ids, count))
}

/// Rank tuples over `sizes` in order of increasing rank sum, lexicographic within a sum.
fn rank_tuples(sizes: &[usize], limit: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let max_sum: usize = sizes.iter().map(|s| s - 1).sum();
    fn rec(sizes: &[usize], left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>, limit: usize) {
        if out.len() >= limit {
            return;
        }
        if sizes.is_empty() {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        let rest: usize = sizes[1..].iter().map(|s| s - 1).sum();
        let lo = left.saturating_sub(rest);
        for r in lo..=left.min(sizes[0] - 1) {
            prefix.push(r);
            rec(&sizes[1..], left - r, prefix, out, limit);
            prefix.pop();
        }
    }
    for sum in 0..=max_sum {
        rec(sizes, sum, &mut Vec::new(), &mut out, limit);
        if out.len() >= limit {
            break;
        }
    }
    out
}

/// Weak* distance `sum_k 2^-k |d_k| / (1 + |d_k|)` with `d_k = <theta1 - theta2, Phi_k>`
/// over the first `k_max` test functions of the fixed enumeration.
///
/// Tests run over dyadic cell blocks, coarse to fine and lexicographic within
/// a level. Per block, fibre-product measures are probed slot by slot with
/// the infinity bump first and then the bin hats by increasing centre norm;
/// joint measures are probed with products of those factors ordered by rank
/// sum. Terms past `2^-1075` vanish in double precision and are skipped.
pub fn weak_star_distance(t1: &DiscreteYoungMeasure, t2: &DiscreteYoungMeasure, k_max: usize) -> Result<f64> {
    t1.compatible(t2)?;
    let domain = t1.domain();
    let scheme = t1.scheme();
    let vol = domain.cell_volume();
    let budget = k_max.min(1075);
    let joint = t1.is_joint() || t2.is_joint();
    let mut k = 0usize;
    let mut rho = 0.0;
    let mut term = |d: f64, k: &mut usize| {
        *k += 1;
        let d = d.abs();
        rho += 2f64.powi(-(*k as i32)) * d / (1.0 + d);
    };
    let mut level = 0;
    while k < budget {
        let Some((ids, blocks)) = block_ids(domain, level) else { break };
        if joint {
            // both sides summed separately so that swapping the arguments only flips the sign
            let mut diff: Vec<HashMap<Vec<u32>, (f64, f64)>> = vec![HashMap::new(); blocks];
            for cell in domain.cells() {
                for (b, m) in t1.joint_at(cell) {
                    diff[ids[cell]].entry(b).or_default().0 += vol * m;
                }
                for (b, m) in t2.joint_at(cell) {
                    diff[ids[cell]].entry(b).or_default().1 += vol * m;
                }
            }
            let sizes: Vec<usize> = scheme.slots().iter().map(|s| s.bin_count()).collect();
            let tuples = rank_tuples(&sizes, budget - k);
            for block in diff.iter() {
                for t in &tuples {
                    if k >= budget {
                        break;
                    }
                    let bins: Vec<u32> = t.iter().enumerate().map(|(s, r)| scheme.slot(s).ranked[*r]).collect();
                    term(block.get(&bins).map_or(0.0, |(a, b)| a - b), &mut k);
                }
            }
        } else {
            let mut diff: Vec<Vec<HashMap<u32, (f64, f64)>>> = vec![vec![HashMap::new(); scheme.len()]; blocks];
            for cell in domain.cells() {
                for s in 0..scheme.len() {
                    for (b, m) in t1.marginal(s, cell) {
                        diff[ids[cell]][s].entry(*b).or_default().0 += vol * m;
                    }
                    for (b, m) in t2.marginal(s, cell) {
                        diff[ids[cell]][s].entry(*b).or_default().1 += vol * m;
                    }
                }
            }
            'blocks: for block in diff.iter() {
                for (s, slot) in scheme.slots().iter().enumerate() {
                    for b in &slot.ranked {
                        if k >= budget {
                            break 'blocks;
                        }
                        term(block[s].get(b).map_or(0.0, |(x, y)| x - y), &mut k);
                    }
                }
            }
        }
        level += 1;
    }
    Ok(rho)
}

/// Bin centres of one slot carrying mass at least `tau`, infinity excluded.
pub fn reduced_support(theta: &DiscreteYoungMeasure, cell: usize, slot: usize, tau: f64) -> Result<Vec<(SymTensor, f64)>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("mass threshold must lie in (0,1), got {tau}")));
    }
    let s = theta.scheme().slot(slot);
    Ok(theta
        .marginal(slot, cell)
        .iter()
        .filter(|(b, m)| *m >= tau && *b != s.infinity_bin())
        .map(|(b, m)| (SymTensor::from_symmetric(s.order, s.big_n, s.n, s.center_entries(*b)), *m))
        .collect())
}

/// Reduced support of the measure on the product of all slots: the stored
/// joint entries, or the product of the marginal supports, with mass at
/// least `tau` and no infinite component.
pub fn reduced_support_joint(theta: &DiscreteYoungMeasure, cell: usize, tau: f64) -> Result<Vec<(Vec<SymTensor>, f64)>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("mass threshold must lie in (0,1), got {tau}")));
    }
    let scheme = theta.scheme();
    let centre = |s: usize, b: u32| {
        let slot = scheme.slot(s);
        SymTensor::from_symmetric(slot.order, slot.big_n, slot.n, slot.center_entries(b))
    };
    if theta.is_joint() {
        return Ok(theta
            .joint_at(cell)
            .into_iter()
            .filter(|(bins, m)| *m >= tau && bins.iter().enumerate().all(|(s, b)| *b != scheme.slot(s).infinity_bin()))
            .map(|(bins, m)| (bins.iter().enumerate().map(|(s, b)| centre(s, *b)).collect(), m))
            .collect());
    }
    let mut acc: Vec<(Vec<SymTensor>, f64)> = vec![(Vec::new(), 1.0)];
    for s in 0..scheme.len() {
        let supp = reduced_support(theta, cell, s, tau)?;
        let mut next = Vec::new();
        for (prefix, m) in &acc {
            for (t, w) in &supp {
                let mut p = prefix.clone();
                p.push(t.clone());
                next.push((p, m * w));
            }
        }
        acc = next;
    }
    Ok(acc)
}

/// Fibre product `theta1 x theta2` over the concatenated scheme.
pub fn product_measure(t1: &DiscreteYoungMeasure, t2: &DiscreteYoungMeasure) -> Result<DiscreteYoungMeasure> {
    if !t1.domain().same_grid(t2.domain()) {
        return Err(Error::Incompatible("product of measures on different grids".into()));
    }
    let scheme = Arc::new(t1.scheme().concat(t2.scheme()));
    let domain = t1.domain_arc().clone();
    if t1.is_joint() || t2.is_joint() {
        let joint = (0..domain.total_cells())
            .map(|c| {
                let a = t1.joint_at(c);
                let b = t2.joint_at(c);
                let mut out = Vec::with_capacity(a.len() * b.len());
                for (ba, ma) in &a {
                    for (bb, mb) in &b {
                        out.push((ba.iter().chain(bb).copied().collect(), ma * mb));
                    }
                }
                out
            })
            .collect();
        return DiscreteYoungMeasure::from_joint(domain, scheme, joint);
    }
    let marginals = t1.marginals.iter().chain(&t2.marginals).cloned().collect();
    DiscreteYoungMeasure::from_marginals(domain, scheme, marginals)
}

/// Outcome of the shared-limit check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedLimitReport {
    pub passed: bool,
    /// Distances from the embeddings of the first sequence to the limit.
    pub rho_u: Vec<f64>,
    /// Distances from the embeddings of the second sequence to the limit.
    pub rho_v: Vec<f64>,
    /// Offending measure of `|U_m - V_m| > tol` along the sequence.
    pub gap_trend: Vec<f64>,
}

fn trace_tends_to_zero(trace: &[f64], slack: f64) -> bool {
    let last = *trace.last().expect("nonempty trace");
    let start = trace.len().saturating_sub(3);
    trace[start..].windows(2).all(|w| w[1] <= w[0] + slack) && last <= slack
}

/// If `U_m - V_m -> 0` almost everywhere and the embeddings of `U_m` tend to
/// `theta`, checks that the embeddings of `V_m` tend to `theta` too. Each
/// sequence entry lists one field per slot of `theta`.
///
/// Convergence of a distance trace means: the last three distances do not
/// increase and the final one is at most a tenth of the initial distance
/// (the larger of the two sequences' initial distances). A failed hypothesis
/// is reported as [`Error::Precondition`].
pub fn check_shared_limit(
    u_seq: &[Vec<SampledField>],
    v_seq: &[Vec<SampledField>],
    theta: &DiscreteYoungMeasure,
    tol: f64,
    mass_budget: Option<f64>,
) -> Result<SharedLimitReport> {
    if u_seq.is_empty() || v_seq.is_empty() {
        return Err(Error::EmptySequence);
    }
    if u_seq.len() != v_seq.len() {
        return Err(Error::Dimension("sequences of different lengths".into()));
    }
    let mut gaps = Vec::with_capacity(u_seq.len());
    for (u, v) in u_seq.iter().zip(v_seq) {
        if u.len() != v.len() || u.is_empty() {
            return Err(Error::Dimension("sequence entries need one field per slot".into()));
        }
        let d = u[0].domain_arc().clone();
        let mut vals = vec![0.0; d.total_cells()];
        for (a, b) in u.iter().zip(v) {
            let diff = a.sub(b)?;
            for (cell, acc) in vals.iter_mut().enumerate() {
                *acc += diff.norm_at(cell).powi(2);
            }
        }
        gaps.push(SampledField::from_raw(d, 1, vals.into_iter().map(f64::sqrt).collect()));
    }
    let zero = SampledField::zeros(gaps[0].domain_arc().clone(), 1);
    let ae = ae_convergence_check(&gaps, &zero, tol, mass_budget)?;
    if !ae.passed {
        return Err(Error::Precondition(format!(
            "|U_m - V_m| does not tend to zero almost everywhere (offending measure {:.4e})",
            ae.measure
        )));
    }
    let scheme = theta.scheme_arc().clone();
    let embed = |fields: &Vec<SampledField>| -> Result<DiscreteYoungMeasure> {
        let refs: Vec<&SampledField> = fields.iter().collect();
        dirac_embed(scheme.clone(), &refs, theta.is_joint())
    };
    let rho_u = u_seq
        .iter()
        .map(|u| weak_star_distance(&embed(u)?, theta, DEFAULT_K_MAX))
        .collect::<Result<Vec<_>>>()?;
    let rho_v = v_seq
        .iter()
        .map(|v| weak_star_distance(&embed(v)?, theta, DEFAULT_K_MAX))
        .collect::<Result<Vec<_>>>()?;
    let scale = rho_u[0].max(rho_v[0]);
    let slack = 0.1 * scale;
    if !trace_tends_to_zero(&rho_u, slack) {
        return Err(Error::Precondition("embeddings of U_m do not approach the given measure".into()));
    }
    Ok(SharedLimitReport {
        passed: trace_tends_to_zero(&rho_v, slack),
        rho_u,
        rho_v,
        gap_trend: ae.trend,
    })
}
