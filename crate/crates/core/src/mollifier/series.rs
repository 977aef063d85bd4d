//! Truncated power series in one and several variables, used to
//! differentiate cutoff-times-polynomial patches exactly.

use std::collections::HashMap;

/// Coefficients `c_0..c_p` of a univariate series truncated at degree `p`.
pub type Series = Vec<f64>;

pub fn constant(c: f64, p: usize) -> Series {
    let mut s = vec![0.0; p + 1];
    s[0] = c;
    s
}

pub fn mul(a: &[f64], b: &[f64]) -> Series {
    let p = a.len() - 1;
    let mut out = vec![0.0; p + 1];
    for i in 0..=p {
        for j in 0..=p - i {
            out[i + j] += a[i] * b[j];
        }
    }
    out
}

pub fn add(a: &[f64], b: &[f64]) -> Series {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], c: f64) -> Series {
    a.iter().map(|x| x * c).collect()
}

/// `1 / a`, requires `a_0 != 0`.
pub fn recip(a: &[f64]) -> Series {
    let p = a.len() - 1;
    let mut b = vec![0.0; p + 1];
    b[0] = 1.0 / a[0];
    for k in 1..=p {
        let s: f64 = (1..=k).map(|j| a[j] * b[k - j]).sum();
        b[k] = -s * b[0];
    }
    b
}

pub fn exp(a: &[f64]) -> Series {
    let p = a.len() - 1;
    let mut e = vec![0.0; p + 1];
    e[0] = a[0].exp();
    for k in 1..=p {
        let s: f64 = (1..=k).map(|j| j as f64 * a[j] * e[k - j]).sum();
        e[k] = s / k as f64;
    }
    e
}

/// Multi-indices of total degree at most `p` in `n` variables.
#[derive(Debug, Clone)]
pub struct MultiIndexTable {
    pub n: usize,
    pub p: usize,
    pub list: Vec<Vec<usize>>,
    index: HashMap<Vec<usize>, usize>,
    /// `(i, j, k)` with `list[i] + list[j] = list[k]`.
    products: Vec<(usize, usize, usize)>,
}

impl MultiIndexTable {
    pub fn new(n: usize, p: usize) -> Self {
        let mut list = Vec::new();
        fn rec(n: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if prefix.len() == n {
                out.push(prefix.clone());
                return;
            }
            for d in 0..=left {
                prefix.push(d);
                rec(n, left - d, prefix, out);
                prefix.pop();
            }
        }
        rec(n, p, &mut Vec::new(), &mut list);
        list.sort_by_key(|b| b.iter().sum::<usize>());
        let index: HashMap<Vec<usize>, usize> = list.iter().cloned().enumerate().map(|(i, b)| (b, i)).collect();
        let mut products = Vec::new();
        for (i, a) in list.iter().enumerate() {
            for (j, b) in list.iter().enumerate() {
                let s: Vec<usize> = a.iter().zip(b).map(|(x, y)| x + y).collect();
                if let Some(&k) = index.get(&s) {
                    products.push((i, j, k));
                }
            }
        }
        Self {
            n,
            p,
            list,
            index,
            products,
        }
    }

    pub fn len(&self) -> usize {
        self.list.len()
    }

    pub fn is_empty(&self) -> bool {
        self.list.is_empty()
    }

    pub fn position(&self, beta: &[usize]) -> usize {
        self.index[beta]
    }

    /// Multi-index counting how often each variable occurs in `slots`.
    pub fn from_slots(&self, slots: &[usize]) -> usize {
        let mut beta = vec![0; self.n];
        for &i in slots {
            beta[i] += 1;
        }
        self.position(&beta)
    }

    pub fn mul(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for &(i, j, k) in &self.products {
            out[k] += a[i] * b[j];
        }
        out
    }

    /// Product of univariate series, one per variable.
    pub fn tensor_product(&self, factors: &[Series]) -> Vec<f64> {
        self.list
            .iter()
            .map(|beta| beta.iter().enumerate().map(|(k, &d)| factors[k][d]).product())
            .collect()
    }

    /// `beta!` for every multi-index.
    pub fn factorials(&self) -> Vec<f64> {
        self.list
            .iter()
            .map(|b| b.iter().map(|&d| (1..=d).product::<usize>() as f64).product())
            .collect()
    }
}
