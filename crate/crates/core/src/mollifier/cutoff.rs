//! Smooth cube cutoffs: products over axes of a ramp that is 1 on the inner
//! cube and 0 outside the outer cube.

use serde::{Deserialize, Serialize};

use super::series::{self, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ramp {
    /// `f(t) / (f(t) + f(1-t))` with `f(t) = exp(-1/t)`, smooth of all orders.
    #[default]
    Exponential,
    /// Degree `2p+1` smoothstep, flat to order `p` at both ends.
    Polynomial,
}

/// Cutoff of one cube: equal to 1 where every axis offset from `center` is at
/// most `inner_half_side`, 0 where some offset reaches `half_side`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cutoff {
    pub center: Vec<f64>,
    pub half_side: f64,
    pub inner_half_side: f64,
    pub ramp: Ramp,
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Taylor series in `dt` of the ramp profile `S(t)` at `t0 in (0,1)`, for the
/// argument series `t = t0 + t1 dt`.
fn profile_series(t: &[f64], ramp: Ramp, order: usize) -> Series {
    let p = t.len() - 1;
    match ramp {
        Ramp::Exponential => {
            // S = 1 / (1 + exp(1/t - 1/(1-t)))
            let one_minus: Series = t.iter().enumerate().map(|(i, v)| if i == 0 { 1.0 - v } else { -v }).collect();
            let g = series::add(&series::recip(t), &series::scale(&series::recip(&one_minus), -1.0));
            if g[0] > 700.0 {
                return series::constant(0.0, p);
            }
            if g[0] < -700.0 {
                return series::constant(1.0, p);
            }
            let mut denom = series::exp(&g);
            denom[0] += 1.0;
            series::recip(&denom)
        }
        Ramp::Polynomial => {
            let m = 2 * order + 1;
            let one_minus: Series = t.iter().enumerate().map(|(i, v)| if i == 0 { 1.0 - v } else { -v }).collect();
            let mut out = series::constant(0.0, p);
            for j in (order + 1)..=m {
                let mut term = series::constant(binomial(m, j), p);
                for _ in 0..j {
                    term = series::mul(&term, t);
                }
                for _ in 0..(m - j) {
                    term = series::mul(&term, &one_minus);
                }
                out = series::add(&out, &term);
            }
            out
        }
    }
}

impl Cutoff {
    /// Taylor series of the axis-`k` ramp at coordinate `x`, degree `p`;
    /// `order` is the jet order the polynomial ramp is built for.
    pub fn axis_series(&self, k: usize, x: f64, p: usize, order: usize) -> Series {
        let off = x - self.center[k];
        let s = off.abs();
        if s <= self.inner_half_side {
            return series::constant(1.0, p);
        }
        if s >= self.half_side {
            return series::constant(0.0, p);
        }
        let width = self.half_side - self.inner_half_side;
        let mut t = series::constant((self.half_side - s) / width, p);
        if p >= 1 {
            t[1] = -off.signum() / width;
        }
        profile_series(&t, self.ramp, order)
    }

    /// Value of the cutoff at `x`.
    pub fn value(&self, x: &[f64], order: usize) -> f64 {
        (0..x.len()).map(|k| self.axis_series(k, x[k], 0, order)[0]).product()
    }

    /// True when `x` lies in the open outer cube.
    pub fn supports(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.center).all(|(a, c)| (a - c).abs() < self.half_side)
    }

    /// True when `x` lies in the closed inner cube, where the cutoff is 1.
    pub fn is_flat(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.center).all(|(a, c)| (a - c).abs() <= self.inner_half_side)
    }
}
