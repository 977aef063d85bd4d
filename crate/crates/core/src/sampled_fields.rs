//! Cell-centred sampled maps on uniform grids, cell sets, norms and
//! almost-everywhere convergence checks.
//!
//! A [`GridDomain`] is a box of `shape[0] x .. x shape[n-1]` cells of side `g`
//! with a membership mask selecting the cells that make up the open set.
//! Cells are numbered in row-major order over the box, last axis fastest.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    g: f64,
    origin: Vec<f64>,
    shape: Vec<usize>,
    inside: Vec<bool>,
    count: usize,
}

impl GridDomain {
    pub fn new(origin: Vec<f64>, shape: Vec<usize>, g: f64, inside: Vec<bool>) -> Result<Self> {
        if !(g > 0.0) || !g.is_finite() {
            return Err(Error::Invalid(format!("cell size must be positive, got {g}")));
        }
        if origin.len() != shape.len() || shape.is_empty() {
            return Err(Error::Dimension("origin and shape must share a positive dimension".into()));
        }
        let total: usize = shape.iter().product();
        if inside.len() != total {
            return Err(Error::Dimension(format!("mask has {} cells, box has {}", inside.len(), total)));
        }
        let count = inside.iter().filter(|b| **b).count();
        if count == 0 {
            return Err(Error::Invalid("domain has no cells".into()));
        }
        Ok(Self {
            g,
            origin,
            shape,
            inside,
            count,
        })
    }

    /// Every cell of the box belongs to the domain.
    pub fn full_box(origin: Vec<f64>, shape: Vec<usize>, g: f64) -> Result<Self> {
        let total = shape.iter().product();
        Self::new(origin, shape, g, vec![true; total])
    }

    /// The unit interval split into `cells` cells.
    pub fn unit_interval(cells: usize) -> Self {
        Self::full_box(vec![0.0], vec![cells], 1.0 / cells as f64).expect("valid interval")
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn cell_size(&self) -> f64 {
        self.g
    }

    pub fn cell_volume(&self) -> f64 {
        self.g.powi(self.dim() as i32)
    }

    pub fn origin(&self) -> &[f64] {
        &self.origin
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn total_cells(&self) -> usize {
        self.inside.len()
    }

    pub fn cell_count(&self) -> usize {
        self.count
    }

    pub fn measure(&self) -> f64 {
        self.count as f64 * self.cell_volume()
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.inside.get(cell).copied().unwrap_or(false)
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        self.inside.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn upper(&self) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.shape)
            .map(|(o, s)| o + *s as f64 * self.g)
            .collect()
    }

    /// Euclidean diameter of the bounding box.
    pub fn diameter(&self) -> f64 {
        self.shape
            .iter()
            .map(|s| (*s as f64 * self.g).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn multi_index(&self, mut cell: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for k in (0..self.dim()).rev() {
            idx[k] = cell % self.shape[k];
            cell /= self.shape[k];
        }
        idx
    }

    pub fn linear_index(&self, idx: &[i64]) -> Option<usize> {
        let mut lin = 0usize;
        for (k, &i) in idx.iter().enumerate() {
            if i < 0 || i as usize >= self.shape[k] {
                return None;
            }
            lin = lin * self.shape[k] + i as usize;
        }
        Some(lin)
    }

    /// Index of the cell reached from `cell` by an integer offset, if it lies in the box.
    pub fn offset(&self, cell: usize, shift: &[i64]) -> Option<usize> {
        let idx = self.multi_index(cell);
        let moved: Vec<i64> = idx.iter().zip(shift).map(|(i, s)| *i as i64 + s).collect();
        self.linear_index(&moved)
    }

    pub fn cell_center(&self, cell: usize) -> Vec<f64> {
        self.multi_index(cell)
            .iter()
            .zip(&self.origin)
            .map(|(i, o)| o + (*i as f64 + 0.5) * self.g)
            .collect()
    }

    /// The box cell containing `x`, if any.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim() {
            return None;
        }
        let mut idx = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            let t = (x[k] - self.origin[k]) / self.g;
            if !(t >= 0.0) || t >= self.shape[k] as f64 {
                return None;
            }
            idx.push(t.floor() as i64);
        }
        self.linear_index(&idx)
    }

    pub(crate) fn same_grid(&self, other: &GridDomain) -> bool {
        self == other
    }
}

/// A subset of the cells of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSet {
    bits: Vec<bool>,
    volume: f64,
}

impl CellSet {
    pub fn empty(domain: &GridDomain) -> Self {
        Self {
            bits: vec![false; domain.total_cells()],
            volume: domain.cell_volume(),
        }
    }

    /// Cells of the domain satisfying `pred`.
    pub fn from_predicate(domain: &GridDomain, mut pred: impl FnMut(usize) -> bool) -> Self {
        let bits = (0..domain.total_cells())
            .map(|c| domain.contains(c) && pred(c))
            .collect();
        Self {
            bits,
            volume: domain.cell_volume(),
        }
    }

    pub fn whole(domain: &GridDomain) -> Self {
        Self::from_predicate(domain, |_| true)
    }

    pub fn from_cells(domain: &GridDomain, cells: &[usize]) -> Self {
        let mut s = Self::empty(domain);
        for &c in cells {
            if domain.contains(c) {
                s.bits[c] = true;
            }
        }
        s
    }

    pub fn insert(&mut self, cell: usize) {
        self.bits[cell] = true;
    }

    pub fn contains(&self, cell: usize) -> bool {
        self.bits.get(cell).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn to_vec(&self) -> Vec<usize> {
        self.iter().collect()
    }

    fn zip_with(&self, other: &Self, f: impl Fn(bool, bool) -> bool) -> Self {
        assert_eq!(self.bits.len(), other.bits.len(), "cell sets over different grids");
        Self {
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| f(*a, *b)).collect(),
            volume: self.volume,
        }
    }

    pub fn union(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a && !b)
    }

    pub fn symmetric_difference(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a != b)
    }

    pub fn measure(&self) -> f64 {
        self.len() as f64 * self.volume
    }
}

/// Lebesgue measure of a cell set.
pub fn measure_of(s: &CellSet) -> f64 {
    s.measure()
}

/// A grid-sampled map into `R^dim`, zero outside the domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledField {
    domain: Arc<GridDomain>,
    dim: usize,
    values: Vec<f64>,
}

impl SampledField {
    /// `values` holds `dim` numbers per box cell; entries outside the domain are zeroed.
    pub fn new(domain: Arc<GridDomain>, dim: usize, mut values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != dim * domain.total_cells() {
            return Err(Error::Dimension(format!(
                "expected {} values, got {}",
                dim * domain.total_cells(),
                values.len()
            )));
        }
        for cell in 0..domain.total_cells() {
            let slot = &mut values[cell * dim..(cell + 1) * dim];
            if domain.contains(cell) {
                if slot.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { cell });
                }
            } else {
                slot.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Self { domain, dim, values })
    }

    pub fn zeros(domain: Arc<GridDomain>, dim: usize) -> Self {
        let len = dim * domain.total_cells();
        Self {
            domain,
            dim,
            values: vec![0.0; len],
        }
    }

    /// Samples `f` at the centre of every domain cell.
    pub fn from_fn(domain: Arc<GridDomain>, dim: usize, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = vec![0.0; dim * domain.total_cells()];
        for cell in domain.cells() {
            let v = f(&domain.cell_center(cell));
            if v.len() != dim {
                return Err(Error::Dimension(format!("sampler returned {} values, expected {dim}", v.len())));
            }
            values[cell * dim..(cell + 1) * dim].copy_from_slice(&v);
        }
        Self::new(domain, dim, values)
    }

    pub fn scalar_from_fn(domain: Arc<GridDomain>, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        Self::from_fn(domain, 1, |x| vec![f(x)])
    }

    pub fn domain(&self) -> &GridDomain {
        &self.domain
    }

    pub fn domain_arc(&self) -> &Arc<GridDomain> {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, cell: usize) -> &[f64] {
        &self.values[cell * self.dim..(cell + 1) * self.dim]
    }

    /// Value at an arbitrary point: the cell value inside the domain, zero elsewhere.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        match self.domain.locate(x) {
            Some(c) if self.domain.contains(c) => self.value(c).to_vec(),
            _ => vec![0.0; self.dim],
        }
    }

    pub fn norm_at(&self, cell: usize) -> f64 {
        self.value(cell).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Pointwise Euclidean norm as a scalar field.
    pub fn norm_field(&self) -> SampledField {
        let values = (0..self.domain.total_cells()).map(|c| self.norm_at(c)).collect();
        SampledField {
            domain: self.domain.clone(),
            dim: 1,
            values,
        }
    }

    fn check_same(&self, other: &SampledField) -> Result<()> {
        if self.dim != other.dim || !self.domain.same_grid(&other.domain) {
            return Err(Error::Dimension("fields live on different grids or dimensions".into()));
        }
        Ok(())
    }

    pub fn add(&self, other: &SampledField) -> Result<SampledField> {
        self.check_same(other)?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &SampledField) -> Result<SampledField> {
        self.check_same(other)?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn scale(&self, c: f64) -> SampledField {
        self.map_values(|v| v * c)
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> SampledField {
        let mut values: Vec<f64> = self.values.iter().map(|v| f(*v)).collect();
        for cell in 0..self.domain.total_cells() {
            if !self.domain.contains(cell) {
                values[cell * self.dim..(cell + 1) * self.dim].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        SampledField {
            domain: self.domain.clone(),
            dim: self.dim,
            values,
        }
    }

    fn zip_map(&self, other: &SampledField, f: impl Fn(f64, f64) -> f64) -> SampledField {
        SampledField {
            domain: self.domain.clone(),
            dim: self.dim,
            values: self.values.iter().zip(&other.values).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    /// Builds a field from per-cell vectors without revalidating finiteness.
    pub(crate) fn from_raw(domain: Arc<GridDomain>, dim: usize, values: Vec<f64>) -> SampledField {
        debug_assert_eq!(values.len(), dim * domain.total_cells());
        SampledField { domain, dim, values }
    }

    /// Components `range` of every cell as a new field.
    pub fn components(&self, range: std::ops::Range<usize>) -> SampledField {
        let d = range.len();
        let mut values = Vec::with_capacity(d * self.domain.total_cells());
        for cell in 0..self.domain.total_cells() {
            values.extend_from_slice(&self.value(cell)[range.clone()]);
        }
        SampledField {
            domain: self.domain.clone(),
            dim: d,
            values,
        }
    }

    pub fn sup_norm(&self) -> f64 {
        self.domain.cells().map(|c| self.norm_at(c)).fold(0.0, f64::max)
    }
}

/// Riemann-sum `L^r` norm over the domain; `r = f64::INFINITY` gives the cell maximum.
pub fn lr_norm(u: &SampledField, r: f64) -> Result<f64> {
    if !(r >= 1.0) {
        return Err(Error::Invalid(format!("L^r norm needs r >= 1, got {r}")));
    }
    if r.is_infinite() {
        return Ok(u.sup_norm());
    }
    let vol = u.domain().cell_volume();
    let mut acc = 0.0;
    for c in u.domain().cells() {
        acc += u.norm_at(c).powf(r);
    }
    Ok((acc * vol).powf(1.0 / r))
}

/// Cells where a scalar field exceeds `t`.
pub fn exceedance_set(u: &SampledField, t: f64) -> Result<CellSet> {
    if u.dim() != 1 {
        return Err(Error::Dimension(format!("exceedance needs a scalar field, got dim {}", u.dim())));
    }
    Ok(CellSet::from_predicate(u.domain(), |c| u.value(c)[0] > t))
}

/// Result of an almost-everywhere convergence check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeReport {
    pub passed: bool,
    /// Measure of the offending set at the last entry.
    pub measure: f64,
    pub offending_cells: Vec<usize>,
    /// Offending measure for every entry of the sequence.
    pub trend: Vec<f64>,
}

/// True when the last three entries of `trend` never increase.
pub fn tail_nonincreasing(trend: &[f64], slack: f64) -> bool {
    let start = trend.len().saturating_sub(3);
    trend[start..].windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Checks that `seq` approaches `limit` up to a cell set of measure at most
/// `mass_budget` (default one percent of the domain).
pub fn ae_convergence_check(
    seq: &[SampledField],
    limit: &SampledField,
    tol: f64,
    mass_budget: Option<f64>,
) -> Result<AeReport> {
    let last = seq.last().ok_or(Error::EmptySequence)?;
    let budget = mass_budget.unwrap_or(0.01 * limit.domain().measure());
    let mut trend = Vec::with_capacity(seq.len());
    for s in seq {
        let diff = s.sub(limit)?;
        trend.push(exceedance_set(&diff.norm_field(), tol)?.measure());
    }
    let offending = exceedance_set(&last.sub(limit)?.norm_field(), tol)?;
    let measure = offending.measure();
    Ok(AeReport {
        passed: measure <= budget && tail_nonincreasing(&trend, 0.0),
        measure,
        offending_cells: offending.to_vec(),
        trend,
    })
}

/// Writes a field as CSV: a `# n N g lower.. upper..` header, then one row
/// per domain cell with its multi-index and values.
pub fn write_field_csv<W: Write>(u: &SampledField, mut w: W) -> Result<()> {
    let d = u.domain();
    let mut header = format!("# {} {} {:e}", d.dim(), u.dim(), d.cell_size());
    for v in d.origin().iter().chain(d.upper().iter()) {
        header.push_str(&format!(" {v:e}"));
    }
    writeln!(w, "{header}")?;
    for cell in d.cells() {
        let mut row: Vec<String> = d.multi_index(cell).iter().map(|i| i.to_string()).collect();
        row.extend(u.value(cell).iter().map(|v| format!("{v:e}")));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads the format of [`write_field_csv`]; cells without a row lie outside the domain.
pub fn read_field_csv<R: BufRead>(r: R) -> Result<SampledField> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty field file".into()))??;
    let parts: Vec<&str> = header
        .trim_start_matches('#')
        .split_whitespace()
        .collect();
    let num = |s: &str| -> Result<f64> { s.parse::<f64>().map_err(|e| Error::Parse(format!("'{s}': {e}"))) };
    if parts.len() < 3 {
        return Err(Error::Parse("header needs n N g and the box corners".into()));
    }
    let n = num(parts[0])? as usize;
    let big_n = num(parts[1])? as usize;
    let g = num(parts[2])?;
    if n == 0 || big_n == 0 || parts.len() != 3 + 2 * n {
        return Err(Error::Parse("header has the wrong number of box coordinates".into()));
    }
    let lower: Vec<f64> = parts[3..3 + n].iter().map(|s| num(s)).collect::<Result<_>>()?;
    let upper: Vec<f64> = parts[3 + n..].iter().map(|s| num(s)).collect::<Result<_>>()?;
    let shape: Vec<usize> = lower
        .iter()
        .zip(&upper)
        .map(|(l, u)| ((u - l) / g).round() as usize)
        .collect();
    let total: usize = shape.iter().product();
    let mut inside = vec![false; total];
    let mut values = vec![0.0; total * big_n];
    let probe = GridDomain::full_box(lower.clone(), shape.clone(), g)?;
    for line in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
        if cols.len() != n + big_n {
            return Err(Error::Parse(format!("row '{line}' has {} columns, expected {}", cols.len(), n + big_n)));
        }
        let idx: Vec<i64> = cols[..n]
            .iter()
            .map(|s| s.parse::<i64>().map_err(|e| Error::Parse(format!("'{s}': {e}"))))
            .collect::<Result<_>>()?;
        let cell = probe
            .linear_index(&idx)
            .ok_or_else(|| Error::Parse(format!("cell {idx:?} outside the box")))?;
        inside[cell] = true;
        for (k, s) in cols[n..].iter().enumerate() {
            values[cell * big_n + k] = num(s)?;
        }
    }
    let domain = Arc::new(GridDomain::new(lower, shape, g, inside)?);
    SampledField::new(domain, big_n, values)
}
