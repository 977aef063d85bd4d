//! Symmetric tensor spaces, orthonormal frames and the chordal metric on the
//! one-point compactification.
//!
//! Tensors of order `q` with values in `R^N` are stored as flat arrays indexed
//! by `(alpha, i_1, .., i_q)` in row-major order, so the entry
//! `(alpha, i_1, .., i_q)` lives at `alpha * n^q + sum_k i_k * n^(q-1-k)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const ORTHONORMAL_TOL: f64 = 1e-12;

/// Number of entries of a tensor of order `q` over `(N, n)`.
pub fn tensor_len(q: usize, big_n: usize, n: usize) -> usize {
    big_n * n.pow(q as u32)
}

/// Decodes a linear slot index into `q` domain indices.
pub fn decode_slots(mut lin: usize, q: usize, n: usize) -> Vec<usize> {
    let mut idx = vec![0; q];
    for k in (0..q).rev() {
        idx[k] = lin % n;
        lin /= n;
    }
    idx
}

/// Encodes `q` domain indices into a linear slot index.
pub fn encode_slots(idx: &[usize], n: usize) -> usize {
    idx.iter().fold(0, |acc, &i| acc * n + i)
}

/// Averages a flat order-`q` tensor over all permutations of its domain slots.
pub fn symmetrize(data: &[f64], q: usize, big_n: usize, n: usize) -> Vec<f64> {
    if q < 2 {
        return data.to_vec();
    }
    let block = n.pow(q as u32);
    let mut out = vec![0.0; data.len()];
    // canonical key of every slot index: sorted tuple
    let keys: Vec<usize> = (0..block)
        .map(|lin| {
            let mut idx = decode_slots(lin, q, n);
            idx.sort_unstable();
            encode_slots(&idx, n)
        })
        .collect();
    for alpha in 0..big_n {
        let base = alpha * block;
        let mut sum = vec![0.0; block];
        let mut count = vec![0usize; block];
        for lin in 0..block {
            sum[keys[lin]] += data[base + lin];
            count[keys[lin]] += 1;
        }
        for lin in 0..block {
            out[base + lin] = sum[keys[lin]] / count[keys[lin]] as f64;
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// An element of the symmetric tensor space of order `q` over `(N, n)`.
/// Order zero is a plain vector in `R^N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymTensor {
    order: usize,
    big_n: usize,
    n: usize,
    data: Vec<f64>,
}

impl SymTensor {
    /// Validates length and symmetry of user-supplied entries.
    pub fn new(order: usize, big_n: usize, n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != tensor_len(order, big_n, n) {
            return Err(Error::Dimension(format!(
                "order {order} tensor over ({big_n}, {n}) needs {} entries, got {}",
                tensor_len(order, big_n, n),
                data.len()
            )));
        }
        let sym = symmetrize(&data, order, big_n, n);
        let scale = data.iter().map(|v| v.abs()).fold(1.0, f64::max);
        let deviation = max_abs_diff(&sym, &data);
        if deviation > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { deviation });
        }
        Ok(Self {
            order,
            big_n,
            n,
            data: sym,
        })
    }

    /// Symmetrizes arbitrary entries, returning the tensor and the largest
    /// entrywise deviation removed by symmetrization.
    pub fn symmetrized(order: usize, big_n: usize, n: usize, data: Vec<f64>) -> Result<(Self, f64)> {
        if data.len() != tensor_len(order, big_n, n) {
            return Err(Error::Dimension(format!(
                "expected {} entries, got {}",
                tensor_len(order, big_n, n),
                data.len()
            )));
        }
        let sym = symmetrize(&data, order, big_n, n);
        let deviation = max_abs_diff(&sym, &data);
        Ok((
            Self {
                order,
                big_n,
                n,
                data: sym,
            },
            deviation,
        ))
    }

    /// Wraps entries that are symmetric by construction.
    pub(crate) fn from_symmetric(order: usize, big_n: usize, n: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), tensor_len(order, big_n, n));
        Self {
            order,
            big_n,
            n,
            data,
        }
    }

    pub fn zeros(order: usize, big_n: usize, n: usize) -> Self {
        Self::from_symmetric(order, big_n, n, vec![0.0; tensor_len(order, big_n, n)])
    }

    pub fn vector(values: Vec<f64>, n: usize) -> Self {
        let big_n = values.len();
        Self::from_symmetric(0, big_n, n, values)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.big_n, self.n)
    }

    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, alpha: usize, idx: &[usize]) -> f64 {
        self.data[alpha * self.n.pow(self.order as u32) + encode_slots(idx, self.n)]
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.order == other.order && self.big_n == other.big_n && self.n == other.n
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "order/dims ({}, {}, {}) vs ({}, {}, {})",
                self.order, self.big_n, self.n, other.order, other.big_n, other.n
            )))
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_symmetric(self.order, self.big_n, self.n, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_symmetric(self.order, self.big_n, self.n, data))
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_symmetric(self.order, self.big_n, self.n, self.data.iter().map(|a| a * c).collect())
    }
}

/// The symmetrised product `(a (x) b + b (x) a) / 2` of two vectors of `R^n`.
pub fn sym_product(a: &[f64], b: &[f64]) -> Result<SymTensor> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite vector entry".into()));
    }
    let n = a.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = 0.5 * (a[i] * b[j] + b[i] * a[j]);
        }
    }
    Ok(SymTensor::from_symmetric(2, 1, n, data))
}

/// Symmetrised tensor product of `q` vectors of `R^n` as a flat `n^q` array.
pub fn sym_product_all(vectors: &[&[f64]], n: usize) -> Vec<f64> {
    let q = vectors.len();
    let block = n.pow(q as u32);
    let mut full = vec![1.0; block];
    for (lin, slot) in full.iter_mut().enumerate() {
        let idx = decode_slots(lin, q, n);
        for (k, v) in vectors.iter().enumerate() {
            *slot *= v[idx[k]];
        }
    }
    symmetrize(&full, q, 1, n)
}

/// Orthonormal frames of `R^N` and, per target direction, of `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    target: Vec<Vec<f64>>,
    domain: Vec<Vec<Vec<f64>>>,
}

fn orthonormal_defect(basis: &[Vec<f64>], dim: usize) -> Option<f64> {
    if basis.len() != dim || basis.iter().any(|v| v.len() != dim) {
        return None;
    }
    let mut worst: f64 = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            let d: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((d - want).abs());
        }
    }
    Some(worst)
}

impl Frame {
    pub fn new(target: Vec<Vec<f64>>, domain: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let big_n = target.len();
        if big_n == 0 || domain.len() != big_n {
            return Err(Error::Dimension(format!(
                "{} target vectors need as many domain bases, got {}",
                big_n,
                domain.len()
            )));
        }
        let n = domain[0].len();
        let defect = orthonormal_defect(&target, big_n)
            .ok_or_else(|| Error::Dimension("target basis is not square".into()))?;
        if defect > ORTHONORMAL_TOL {
            return Err(Error::NotOrthonormal { defect });
        }
        for basis in &domain {
            let defect = orthonormal_defect(basis, n)
                .ok_or_else(|| Error::Dimension("domain basis is not square".into()))?;
            if defect > ORTHONORMAL_TOL {
                return Err(Error::NotOrthonormal { defect });
            }
        }
        Ok(Self { target, domain })
    }

    pub fn standard(big_n: usize, n: usize) -> Self {
        let id = |d: usize| -> Vec<Vec<f64>> {
            (0..d)
                .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect()
        };
        Self {
            target: id(big_n),
            domain: vec![id(n); big_n],
        }
    }

    /// A frame whose domain bases are all the same rotation.
    pub fn with_domain_basis(big_n: usize, basis: Vec<Vec<f64>>) -> Result<Self> {
        let std = Self::standard(big_n, basis.len());
        Self::new(std.target, vec![basis; big_n])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.target.len(), self.domain[0].len())
    }

    pub fn target(&self, alpha: usize) -> &[f64] {
        &self.target[alpha]
    }

    pub fn direction(&self, alpha: usize, i: usize) -> &[f64] {
        &self.domain[alpha][i]
    }

    /// True when every domain direction is a signed coordinate axis.
    pub fn is_axis_aligned(&self) -> bool {
        self.domain.iter().flatten().all(|v| {
            let big = v.iter().filter(|x| (x.abs() - 1.0).abs() < 1e-12).count();
            let zero = v.iter().filter(|x| x.abs() < 1e-12).count();
            big == 1 && big + zero == v.len()
        })
    }

    /// The induced element `E^alpha (x) (E^(alpha)i_1 v .. v E^(alpha)i_q)`.
    pub fn basis_element(&self, order: usize, alpha: usize, idx: &[usize]) -> Result<SymTensor> {
        let (big_n, n) = self.dims();
        if idx.len() != order || alpha >= big_n || idx.iter().any(|&i| i >= n) {
            return Err(Error::Dimension("basis index out of range".into()));
        }
        let vecs: Vec<&[f64]> = idx.iter().map(|&i| self.domain[alpha][i].as_slice()).collect();
        let sym = sym_product_all(&vecs, n);
        let block = sym.len();
        let mut data = vec![0.0; big_n * block];
        for beta in 0..big_n {
            for (lin, s) in sym.iter().enumerate() {
                data[beta * block + lin] = self.target[alpha][beta] * s;
            }
        }
        Ok(SymTensor::from_symmetric(order, big_n, n, data))
    }

    /// Maps frame coefficients `c[alpha, i_1..i_q]` to standard entries of the
    /// unsymmetrized sum `sum c E^alpha (x) E^(alpha)i_1 (x) .. (x) E^(alpha)i_q`.
    pub(crate) fn coefficients_to_standard(&self, coeffs: &[f64], q: usize) -> Vec<f64> {
        let (big_n, n) = self.dims();
        let block = n.pow(q as u32);
        let mut out = vec![0.0; big_n * block];
        for alpha in 0..big_n {
            let mut part = coeffs[alpha * block..(alpha + 1) * block].to_vec();
            for slot in 0..q {
                part = apply_slot(&part, q, n, slot, &self.domain[alpha], true);
            }
            for beta in 0..big_n {
                let e = self.target[alpha][beta];
                if e != 0.0 {
                    for lin in 0..block {
                        out[beta * block + lin] += e * part[lin];
                    }
                }
            }
        }
        out
    }
}

/// Applies `m` (rows are basis vectors) to one slot of an `n^q` array.
/// With `transpose` the coefficient-to-standard direction is used.
fn apply_slot(data: &[f64], q: usize, n: usize, slot: usize, m: &[Vec<f64>], transpose: bool) -> Vec<f64> {
    let stride = n.pow((q - 1 - slot) as u32);
    let mut out = vec![0.0; data.len()];
    for (lin, o) in out.iter_mut().enumerate() {
        let i = (lin / stride) % n;
        let base = lin - i * stride;
        let mut acc = 0.0;
        for j in 0..n {
            let w = if transpose { m[j][i] } else { m[i][j] };
            acc += w * data[base + j * stride];
        }
        *o = acc;
    }
    out
}

/// Coefficients `E^{alpha i_1..i_q} : X` of `x` in the frame, ordered like the
/// entries of a tensor.
pub fn frame_coordinates(x: &SymTensor, f: &Frame) -> Result<Vec<f64>> {
    let (big_n, n) = f.dims();
    if x.dims() != (big_n, n) {
        return Err(Error::Dimension(format!(
            "tensor dims {:?} vs frame dims {:?}",
            x.dims(),
            (big_n, n)
        )));
    }
    let q = x.order();
    let block = n.pow(q as u32);
    let mut coeffs = vec![0.0; big_n * block];
    for alpha in 0..big_n {
        let mut part = vec![0.0; block];
        for beta in 0..big_n {
            let e = f.target[alpha][beta];
            if e != 0.0 {
                for lin in 0..block {
                    part[lin] += e * x.data[beta * block + lin];
                }
            }
        }
        for slot in 0..q {
            part = apply_slot(&part, q, n, slot, &f.domain[alpha], false);
        }
        coeffs[alpha * block..(alpha + 1) * block].copy_from_slice(&part);
    }
    Ok(coeffs)
}

/// Rebuilds `sum c E^{alpha i_1..i_q}` from frame coefficients.
pub fn reconstruct(coeffs: &[f64], order: usize, f: &Frame) -> Result<SymTensor> {
    let (big_n, n) = f.dims();
    if coeffs.len() != tensor_len(order, big_n, n) {
        return Err(Error::Dimension("coefficient count does not match frame".into()));
    }
    let full = f.coefficients_to_standard(coeffs, order);
    Ok(SymTensor::from_symmetric(order, big_n, n, symmetrize(&full, order, big_n, n)))
}

/// A random orthonormal basis of `R^dim` by Gram-Schmidt on uniform samples.
pub fn random_orthonormal<R: Rng>(dim: usize, rng: &mut R) -> Vec<Vec<f64>> {
    loop {
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
        let mut ok = true;
        for _ in 0..dim {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for _ in 0..2 {
                for b in &basis {
                    let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= d * y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                ok = false;
                break;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        if ok {
            return basis;
        }
    }
}

/// A point of the compactified tensor space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CompactifiedValue {
    Finite(SymTensor),
    Infinity,
}

impl CompactifiedValue {
    pub fn is_infinite(&self) -> bool {
        matches!(self, CompactifiedValue::Infinity)
    }

    pub fn finite(&self) -> Option<&SymTensor> {
        match self {
            CompactifiedValue::Finite(t) => Some(t),
            CompactifiedValue::Infinity => None,
        }
    }
}

/// Chordal distance through stereographic projection onto the unit sphere.
pub fn chordal_distance(x: &CompactifiedValue, y: &CompactifiedValue) -> f64 {
    match (x, y) {
        (CompactifiedValue::Infinity, CompactifiedValue::Infinity) => 0.0,
        (CompactifiedValue::Finite(a), CompactifiedValue::Infinity)
        | (CompactifiedValue::Infinity, CompactifiedValue::Finite(a)) => chordal_to_infinity(a.entries()),
        (CompactifiedValue::Finite(a), CompactifiedValue::Finite(b)) => chordal_finite(a.entries(), b.entries()),
    }
}

pub(crate) fn chordal_to_infinity(a: &[f64]) -> f64 {
    let na2: f64 = a.iter().map(|v| v * v).sum();
    2.0 / (1.0 + na2).sqrt()
}

pub(crate) fn chordal_finite(a: &[f64], b: &[f64]) -> f64 {
    let na2: f64 = a.iter().map(|v| v * v).sum();
    let nb2: f64 = b.iter().map(|v| v * v).sum();
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    2.0 * d2.sqrt() / ((1.0 + na2).sqrt() * (1.0 + nb2).sqrt())
}
