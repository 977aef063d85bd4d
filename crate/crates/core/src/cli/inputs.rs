//! Built-in sampled maps: the ternary Cantor function, the indicator of a fat
//! Cantor set, and smooth baselines.

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::sampled_fields::{read_field_csv, GridDomain, SampledField};

pub const INPUT_NAMES: [&str; 6] = ["cantor-function", "fat-cantor-indicator", "sin", "quadratic", "constant", "zero"];

/// Default number of removed intervals in the fat Cantor set.
pub const DEFAULT_FAT_CANTOR_TERMS: usize = 64;

/// Ternary Cantor function iterated `depth` times; linear on the remaining
/// intervals of the last level.
pub fn cantor_function(x: f64, depth: u32) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let (mut y, mut value, mut scale) = (x, 0.0, 1.0);
    for _ in 0..depth {
        if y < 1.0 / 3.0 {
            y *= 3.0;
        } else if y <= 2.0 / 3.0 {
            return value + scale / 2.0;
        } else {
            value += scale / 2.0;
            y = 3.0 * y - 2.0;
        }
        scale /= 2.0;
    }
    value + scale * y
}

/// `sin(pi c(x))` for the Cantor function `c`: continuous, vanishing at both
/// ends, constant on every removed middle third.
pub fn cantor_bump(x: f64, depth: u32) -> f64 {
    (std::f64::consts::PI * cantor_function(x, depth)).sin()
}

/// Ternary depth whose remaining intervals match the cell size `g`.
pub fn cantor_depth(g: f64) -> u32 {
    (1.0 / g).log(3.0).ceil().max(1.0) as u32
}

/// Rationals `(p, q)` of `[1/3, 2/3]` in Stern-Brocot order (breadth first,
/// left to right), first `count` of them.
pub fn stern_brocot_rationals(count: usize) -> Vec<(u64, u64)> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return out;
    }
    // level of the tree between 0/1 and 1/1, as the sequence of its boundary fractions
    let mut level: Vec<(u64, u64)> = vec![(0, 1), (1, 1)];
    while out.len() < count {
        let mut next = Vec::with_capacity(2 * level.len());
        for w in level.windows(2) {
            let m = (w[0].0 + w[1].0, w[0].1 + w[1].1);
            next.push(w[0]);
            next.push(m);
            if 3 * m.0 >= m.1 && 3 * m.0 <= 2 * m.1 {
                out.push(m);
                if out.len() == count {
                    break;
                }
            }
        }
        next.push(*level.last().expect("nonempty level"));
        level = next;
    }
    out
}

/// The open intervals `(q_j - 3^(-2j), q_j + 3^(-2j))`, `j = 1..=terms`.
pub fn fat_cantor_intervals(terms: usize) -> Vec<(f64, f64)> {
    stern_brocot_rationals(terms)
        .into_iter()
        .enumerate()
        .map(|(i, (p, q))| {
            let c = p as f64 / q as f64;
            let r = 3f64.powi(-2 * (i as i32 + 1));
            (c - r, c + r)
        })
        .collect()
}

/// `[1/3, 2/3]` minus the removed intervals.
#[derive(Debug, Clone)]
pub struct FatCantor {
    pub removed: Vec<(f64, f64)>,
}

impl FatCantor {
    pub fn new(terms: usize) -> Self {
        Self {
            removed: fat_cantor_intervals(terms),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        (1.0 / 3.0..=2.0 / 3.0).contains(&x) && !self.removed.iter().any(|&(a, b)| a < x && x < b)
    }

    /// Lebesgue measure by merging the removed intervals inside `[1/3, 2/3]`.
    pub fn measure(&self) -> f64 {
        let (lo, hi) = (1.0 / 3.0, 2.0 / 3.0);
        let mut iv: Vec<(f64, f64)> = self
            .removed
            .iter()
            .map(|&(a, b)| (a.max(lo), b.min(hi)))
            .filter(|(a, b)| a < b)
            .collect();
        iv.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut covered = 0.0;
        let mut cur: Option<(f64, f64)> = None;
        for (a, b) in iv {
            cur = match cur {
                Some((s, e)) if a <= e => Some((s, e.max(b))),
                Some((s, e)) => {
                    covered += e - s;
                    Some((a, b))
                }
                None => Some((a, b)),
            };
        }
        if let Some((s, e)) = cur {
            covered += e - s;
        }
        hi - lo - covered
    }
}

/// Samples a named input on `domain`, or reads a CSV field when `name` is a path.
pub fn load_input(name: &str, domain: &Arc<GridDomain>, fat_cantor_terms: usize) -> Result<SampledField> {
    let d = domain.clone();
    match name {
        "cantor-function" => {
            let depth = cantor_depth(d.cell_size());
            SampledField::scalar_from_fn(d, |x| x.iter().map(|&t| cantor_bump(t, depth)).product())
        }
        "fat-cantor-indicator" => {
            let k = FatCantor::new(fat_cantor_terms);
            SampledField::scalar_from_fn(d, |x| if x.iter().all(|&t| k.contains(t)) { 1.0 } else { 0.0 })
        }
        "sin" => SampledField::scalar_from_fn(d, |x| x.iter().map(|&t| (std::f64::consts::PI * t).sin()).product()),
        "quadratic" => SampledField::scalar_from_fn(d, |x| x.iter().map(|t| t * t).sum()),
        "constant" => SampledField::scalar_from_fn(d, |_| 1.0),
        "zero" => Ok(SampledField::zeros(d, 1)),
        path if Path::new(path).is_file() => {
            let file = std::fs::File::open(path)?;
            read_field_csv(std::io::BufReader::new(file))
        }
        other => Err(Error::Unknown {
            kind: "input",
            name: other.to_string(),
        }),
    }
}
