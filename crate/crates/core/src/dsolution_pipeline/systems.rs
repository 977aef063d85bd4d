//! Fully nonlinear systems `F(x, u, Du, .., D^p u)` and the built-in catalogue.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::tensor_frames::SymTensor;

pub type Evaluator = dyn Fn(&[f64], &[f64], &[SymTensor]) -> Vec<f64> + Send + Sync;

/// Singular values below this count as zero when forming `[Du]^perp`.
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Clone)]
pub struct SystemF {
    pub name: String,
    /// Domain dimension `n`.
    pub n: usize,
    /// Target dimension `N` of the unknown.
    pub big_n: usize,
    /// Codomain dimension `M`.
    pub m: usize,
    pub order: usize,
    /// Whether `F` is continuous in `x` as well.
    pub continuous_in_x: bool,
    evaluator: Arc<Evaluator>,
}

impl fmt::Debug for SystemF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemF")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("big_n", &self.big_n)
            .field("m", &self.m)
            .field("order", &self.order)
            .finish()
    }
}

impl SystemF {
    pub fn new(
        name: impl Into<String>,
        (n, big_n, m, order): (usize, usize, usize, usize),
        continuous_in_x: bool,
        evaluator: impl Fn(&[f64], &[f64], &[SymTensor]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n,
            big_n,
            m,
            order,
            continuous_in_x,
            evaluator: Arc::new(evaluator),
        }
    }

    /// `F(x, u, X_1, .., X_p)`; `jet[q-1]` is the order-`q` tensor.
    pub fn eval(&self, x: &[f64], u: &[f64], jet: &[SymTensor]) -> Result<Vec<f64>> {
        if x.len() != self.n || u.len() != self.big_n || jet.len() != self.order {
            return Err(Error::Dimension(format!(
                "system {} expects n={} N={} p={}, got x:{} u:{} jet orders:{}",
                self.name,
                self.n,
                self.big_n,
                self.order,
                x.len(),
                u.len(),
                jet.len()
            )));
        }
        for (q, t) in jet.iter().enumerate() {
            if t.order() != q + 1 || t.dims() != (self.big_n, self.n) {
                return Err(Error::Dimension(format!("jet entry {} has the wrong shape", q + 1)));
            }
        }
        let out = (self.evaluator)(x, u, jet);
        debug_assert_eq!(out.len(), self.m);
        Ok(out)
    }

    /// Euclidean norm of `F(x, u, X)`.
    pub fn norm(&self, x: &[f64], u: &[f64], jet: &[SymTensor]) -> Result<f64> {
        Ok(self.eval(x, u, jet)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    }

    pub fn check_dims(&self, n: usize, big_n: usize) -> Result<()> {
        if n != self.n || big_n != self.big_n {
            return Err(Error::Dimension(format!(
                "system {} is posed for n={} N={}, data has n={n} N={big_n}",
                self.name, self.n, self.big_n
            )));
        }
        Ok(())
    }
}

/// `u' = 0` in one variable.
pub fn derivative_zero() -> SystemF {
    SystemF::new("derivative-zero", (1, 1, 1, 1), true, |_, _, jet| vec![jet[0].entries()[0]])
}

/// `a . Du = 0` for a scalar unknown.
pub fn transport(a: Vec<f64>) -> SystemF {
    let n = a.len();
    SystemF::new("transport", (n, 1, 1, 1), true, move |_, _, jet| {
        vec![a.iter().zip(jet[0].entries()).map(|(x, y)| x * y).sum()]
    })
}

/// `|Du| - 1` for a scalar unknown.
pub fn eikonal(n: usize) -> SystemF {
    SystemF::new("eikonal", (n, 1, 1, 1), true, |_, _, jet| vec![jet[0].norm() - 1.0])
}

/// Orthogonal projection onto the complement of the range of the `N x n` matrix `du`.
pub fn range_complement_projection(du: &DMatrix<f64>) -> DMatrix<f64> {
    let big_n = du.nrows();
    let mut proj = DMatrix::<f64>::identity(big_n, big_n);
    if du.ncols() == 0 {
        return proj;
    }
    let svd = du.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    for (k, s) in svd.singular_values.iter().enumerate() {
        if *s > RANK_THRESHOLD {
            let col = u.column(k);
            proj -= &col * col.transpose();
        }
    }
    proj
}

/// `(Du (x) Du + |Du|^2 [Du]^perp (x) I) : D^2 u`.
pub fn infinity_laplace(big_n: usize, n: usize) -> SystemF {
    SystemF::new("infinity-laplace", (n, big_n, big_n, 2), true, move |_, _, jet| {
        let du = jet[0].entries();
        let d2 = jet[1].entries();
        let grad = DMatrix::from_row_slice(big_n, n, du);
        let norm2: f64 = du.iter().map(|v| v * v).sum();
        let perp = range_complement_projection(&grad);
        let lap: Vec<f64> = (0..big_n).map(|b| (0..n).map(|i| d2[b * n * n + i * n + i]).sum()).collect();
        (0..big_n)
            .map(|a| {
                let mut s = 0.0;
                for b in 0..big_n {
                    for i in 0..n {
                        for j in 0..n {
                            s += du[a * n + i] * du[b * n + j] * d2[b * n * n + i * n + j];
                        }
                    }
                    s += norm2 * perp[(a, b)] * lap[b];
                }
                s
            })
            .collect()
    })
}

/// Names of the built-in systems.
pub const BUILTIN_NAMES: [&str; 4] = ["derivative-zero", "transport", "eikonal", "infinity-laplace"];

/// Built-in systems posed for maps `R^n -> R^N`; transport uses the direction `(1, .., 1)`.
pub fn builtin_systems(n: usize, big_n: usize) -> Vec<SystemF> {
    let mut out = Vec::new();
    if n == 1 && big_n == 1 {
        out.push(derivative_zero());
    }
    if big_n == 1 {
        out.push(transport(vec![1.0; n]));
        out.push(eikonal(n));
    }
    out.push(infinity_laplace(big_n, n));
    out
}

pub fn system_by_name(name: &str, n: usize, big_n: usize) -> Result<SystemF> {
    if !BUILTIN_NAMES.contains(&name) {
        return Err(Error::Unknown {
            kind: "system",
            name: name.to_string(),
        });
    }
    builtin_systems(n, big_n)
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Dimension(format!("system {name} is not defined for n={n} N={big_n}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(order: usize, big_n: usize, n: usize, v: Vec<f64>) -> SymTensor {
        SymTensor::new(order, big_n, n, v).unwrap()
    }

    #[test]
    fn scalar_infinity_laplacian_drops_projection() {
        let sys = infinity_laplace(1, 2);
        let du = t(1, 1, 2, vec![1.0, 2.0]);
        let d2 = t(2, 1, 2, vec![3.0, 0.5, 0.5, -1.0]);
        let r = sys.eval(&[0.0, 0.0], &[0.0], &[du, d2]).unwrap();
        // Du D2 Du^T = 3 + 2*0.5*2 + 4*(-1)
        assert!((r[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn linear_maps_have_zero_infinity_laplacian() {
        let sys = infinity_laplace(2, 2);
        let du = t(1, 2, 2, vec![1.0, 2.0, -1.0, 0.5]);
        let d2 = SymTensor::zeros(2, 2, 2);
        assert_eq!(sys.eval(&[0.0; 2], &[0.0; 2], &[du, d2]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_of_rank_one_gradient() {
        let du = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let p = range_complement_projection(&du);
        assert!((p[(1, 1)] - 1.0).abs() < 1e-14);
        assert!(p[(0, 0)].abs() < 1e-14);
        let zero = DMatrix::<f64>::zeros(2, 1);
        assert_eq!(range_complement_projection(&zero), DMatrix::identity(2, 2));
    }

    #[test]
    fn vector_infinity_laplacian_uses_complement() {
        // u = (x^2/2, 0) in one variable: Du = (x, 0), D2u = (1, 0)
        let sys = infinity_laplace(2, 1);
        let du = t(1, 2, 1, vec![2.0, 0.0]);
        let d2 = t(2, 2, 1, vec![1.0, 0.0]);
        let r = sys.eval(&[0.0], &[0.0; 2], &[du, d2]).unwrap();
        assert!((r[0] - 4.0).abs() < 1e-14 && r[1].abs() < 1e-14);
        // D2u = (0, 1) lies in the complement: |Du|^2 * 1
        let du = t(1, 2, 1, vec![2.0, 0.0]);
        let d2 = t(2, 2, 1, vec![0.0, 1.0]);
        let r = sys.eval(&[0.0], &[0.0; 2], &[du, d2]).unwrap();
        assert!(r[0].abs() < 1e-14 && (r[1] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn catalogue_examples() {
        let dz = system_by_name("derivative-zero", 1, 1).unwrap();
        assert_eq!(dz.eval(&[0.3], &[5.0], &[t(1, 1, 1, vec![0.0])]).unwrap(), vec![0.0]);
        let ek = system_by_name("eikonal", 2, 1).unwrap();
        assert!((ek.eval(&[0.0; 2], &[0.0], &[t(1, 1, 2, vec![0.6, 0.8])]).unwrap()[0]).abs() < 1e-15);
        assert!(matches!(system_by_name("heat", 1, 1), Err(Error::Unknown { .. })));
        assert!(system_by_name("derivative-zero", 2, 1).is_err());
        assert!(dz.eval(&[0.0, 0.0], &[0.0], &[t(1, 1, 1, vec![0.0])]).is_err());
    }
}
