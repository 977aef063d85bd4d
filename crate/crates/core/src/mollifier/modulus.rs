//! Empirical joint modulus of continuity of sampled fields.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Mutex;

use crate::sampled_fields::SampledField;

/// `omega(t)` bounding `sum_q |U^q(x) - U^q(y)|` over cell centres with `|x - y| <= t`.
///
/// Pairs at distance at most `t` lie in a common axis-aligned window of
/// `floor(t/g) + 1` cells, so the sum over groups of the Euclidean norm of the
/// per-component window oscillations bounds the pairwise form from above.
/// Values are computed on demand and cached per window size.
#[derive(Debug)]
pub struct EmpiricalModulus {
    field: SampledField,
    groups: Vec<Range<usize>>,
    cache: Mutex<HashMap<usize, f64>>,
}

fn sliding(line: &mut [f64], w: usize, take_max: bool) {
    let better = |a: f64, b: f64| if take_max { a >= b } else { a <= b };
    let len = line.len();
    let mut deque: std::collections::VecDeque<usize> = std::collections::VecDeque::new();
    let src = line.to_vec();
    for i in (0..len).rev() {
        while let Some(&back) = deque.back() {
            if better(src[i], src[back]) {
                deque.pop_back();
            } else {
                break;
            }
        }
        deque.push_back(i);
        while let Some(&front) = deque.front() {
            if front >= i + w {
                deque.pop_front();
            } else {
                break;
            }
        }
        line[i] = src[*deque.front().expect("nonempty")];
    }
}

impl EmpiricalModulus {
    /// `groups` partitions the components of `field` (one range per tensor order).
    pub fn new(field: SampledField, groups: Vec<Range<usize>>) -> Self {
        Self {
            field,
            groups,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn window_cells(&self, t: f64) -> usize {
        let g = self.field.domain().cell_size();
        let span = (t / g * (1.0 + 1e-12)).floor();
        let cap = self.field.domain().shape().iter().copied().max().unwrap_or(1);
        (span.max(0.0) as usize + 1).min(cap)
    }

    fn oscillations(&self, w: usize) -> Vec<f64> {
        let d = self.field.domain();
        let shape = d.shape();
        let total = d.total_cells();
        let mut strides = vec![1usize; shape.len()];
        for k in (0..shape.len().saturating_sub(1)).rev() {
            strides[k] = strides[k + 1] * shape[k + 1];
        }
        let mut out = Vec::with_capacity(self.field.dim());
        for comp in 0..self.field.dim() {
            let mut hi: Vec<f64> = (0..total)
                .map(|c| if d.contains(c) { self.field.value(c)[comp] } else { f64::NEG_INFINITY })
                .collect();
            let mut lo: Vec<f64> = hi.iter().map(|v| if v.is_finite() { *v } else { f64::INFINITY }).collect();
            for k in 0..shape.len() {
                let (len, stride) = (shape[k], strides[k]);
                for start in 0..total {
                    if (start / stride) % len != 0 {
                        continue;
                    }
                    let idx: Vec<usize> = (0..len).map(|j| start + j * stride).collect();
                    let mut line_hi: Vec<f64> = idx.iter().map(|&i| hi[i]).collect();
                    let mut line_lo: Vec<f64> = idx.iter().map(|&i| lo[i]).collect();
                    sliding(&mut line_hi, w, true);
                    sliding(&mut line_lo, w, false);
                    for (j, &i) in idx.iter().enumerate() {
                        hi[i] = line_hi[j];
                        lo[i] = line_lo[j];
                    }
                }
            }
            let osc = hi
                .iter()
                .zip(&lo)
                .filter(|(a, b)| a.is_finite() && b.is_finite())
                .map(|(a, b)| a - b)
                .fold(0.0, f64::max);
            out.push(osc);
        }
        out
    }

    pub fn at(&self, t: f64) -> f64 {
        let w = self.window_cells(t);
        if w <= 1 {
            return 0.0;
        }
        if let Some(v) = self.cache.lock().expect("modulus cache").get(&w) {
            return *v;
        }
        let osc = self.oscillations(w);
        let v = self
            .groups
            .iter()
            .map(|r| osc[r.clone()].iter().map(|o| o * o).sum::<f64>().sqrt())
            .sum();
        self.cache.lock().expect("modulus cache").insert(w, v);
        v
    }

    /// The modulus on a ladder of distances.
    pub fn ladder(&self, ts: &[f64]) -> Vec<f64> {
        ts.iter().map(|&t| self.at(t)).collect()
    }
}

/// Modulus of a list of fields, each forming one group.
pub fn empirical_modulus(fields: &[&SampledField]) -> EmpiricalModulus {
    let domain = fields[0].domain_arc().clone();
    let dim: usize = fields.iter().map(|f| f.dim()).sum();
    let mut values = vec![0.0; dim * domain.total_cells()];
    let mut groups = Vec::with_capacity(fields.len());
    let mut off = 0;
    for f in fields {
        groups.push(off..off + f.dim());
        off += f.dim();
    }
    for cell in 0..domain.total_cells() {
        let mut at = cell * dim;
        for f in fields {
            values[at..at + f.dim()].copy_from_slice(f.value(cell));
            at += f.dim();
        }
    }
    EmpiricalModulus::new(SampledField::from_raw(domain, dim, values), groups)
}
