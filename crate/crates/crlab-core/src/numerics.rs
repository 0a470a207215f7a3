//! Finite-difference stencils, quadrature and small dense linear-algebra helpers.

use nalgebra::{DMatrix, DVector};

use crate::{CrError, Result, C64};

/// Central finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central2,
    /// Five-point stencil, fourth order.
    Central4,
}

impl Stencil {
    fn offsets_weights(self) -> &'static [(f64, f64)] {
        match self {
            Stencil::Central2 => &[(1.0, 0.5), (-1.0, -0.5)],
            Stencil::Central4 => &[
                (2.0, -1.0 / 12.0),
                (1.0, 8.0 / 12.0),
                (-1.0, -8.0 / 12.0),
                (-2.0, 1.0 / 12.0),
            ],
        }
    }

    pub fn order(self) -> u32 {
        match self {
            Stencil::Central2 => 2,
            Stencil::Central4 => 4,
        }
    }
}

/// Finite-difference step and stencil.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FdSpec {
    pub step: f64,
    pub stencil: Stencil,
}

impl FdSpec {
    pub const fn new(step: f64, stencil: Stencil) -> Self {
        Self { step, stencil }
    }
}

/// Derivative of a vector-valued field along a real direction.
pub fn directional<F>(f: &F, x: &DVector<f64>, dir: &DVector<f64>, fd: FdSpec) -> Result<DVector<C64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<C64>> + ?Sized,
{
    let mut acc: Option<DVector<C64>> = None;
    for &(off, w) in fd.stencil.offsets_weights() {
        let y = f(&(x + dir * (off * fd.step)))?;
        match acc.as_mut() {
            None => acc = Some(y * C64::from(w)),
            Some(a) => a.axpy(C64::from(w), &y, C64::from(1.0)),
        }
    }
    Ok(acc.expect("stencil is non-empty") / C64::from(fd.step))
}

/// Derivative along a complex vector `X + iY`, i.e. `X(f) + i Y(f)`.
pub fn complex_directional<F>(
    f: &F,
    x: &DVector<f64>,
    dir: &DVector<C64>,
    fd: FdSpec,
) -> Result<DVector<C64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<C64>> + ?Sized,
{
    let re = dir.map(|c| c.re);
    let im = dir.map(|c| c.im);
    let dre = directional(f, x, &re, fd)?;
    let dim = directional(f, x, &im, fd)?;
    Ok(dre + dim * C64::i())
}

/// All coordinate partials; column `k` of the result is `∂_k f`.
pub fn jacobian<F>(f: &F, x: &DVector<f64>, fd: FdSpec) -> Result<DMatrix<C64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<C64>> + ?Sized,
{
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    for k in 0..d {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        cols.push(directional(f, x, &e, fd)?);
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Weights for the first derivative at `x0` from values at `nodes`
/// (Fornberg's recursion).
pub fn fornberg_first_derivative(x0: f64, nodes: &[f64]) -> Vec<f64> {
    let m = nodes.len();
    let mut c = vec![[0.0f64; 2]; m];
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    c[0][0] = 1.0;
    for i in 1..m {
        let mn = i.min(1);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.iter().map(|w| w[1]).collect()
}

/// Differentiate samples `y(t_i)` on a possibly non-uniform, strictly
/// increasing grid with five-point stencils (one-sided near the ends).
pub fn differentiate_samples(t: &[f64], y: &[DVector<C64>]) -> Result<Vec<DVector<C64>>> {
    let m = t.len();
    if m < 5 || y.len() != m {
        return Err(CrError::InvalidArgument(format!(
            "need at least 5 samples with matching values, got {m} and {}",
            y.len()
        )));
    }
    if t.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(CrError::InvalidArgument("sample parameters must increase strictly".into()));
    }
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let lo = i.saturating_sub(2).min(m - 5);
        let idx: Vec<usize> = (lo..lo + 5).collect();
        let nodes: Vec<f64> = idx.iter().map(|&j| t[j]).collect();
        let w = fornberg_first_derivative(t[i], &nodes);
        let mut acc = DVector::<C64>::zeros(y[i].len());
        for (wj, &j) in w.iter().zip(&idx) {
            acc.axpy(C64::from(*wj), &y[j], C64::from(1.0));
        }
        out.push(acc);
    }
    Ok(out)
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(m: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; m];
    let mut w = vec![0.0; m];
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=m {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if m == 1 { z } else { p1 };
            let pm1 = if m == 1 { 1.0 } else { p0 };
            dp = m as f64 * (z * p - pm1) / (z * z - 1.0);
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

/// Positive-definite square root of a hermitian positive-definite matrix.
pub fn hermitian_sqrt(h: &DMatrix<C64>) -> Result<DMatrix<C64>> {
    let eig = h.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) {
        return Err(CrError::NotPseudoconvex(min));
    }
    let v = &eig.eigenvectors;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| C64::from(l.sqrt())));
    Ok(v * s * v.adjoint())
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Largest absolute entry of a vector.
pub fn max_abs_v(v: &DVector<C64>) -> f64 {
    v.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

pub fn to_complex(v: &DVector<f64>) -> DVector<C64> {
    v.map(C64::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn fornberg_matches_central_stencil() {
        let w = fornberg_first_derivative(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let expected = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expected) {
            assert_relative_eq!(*a, b, epsilon = 1e-14);
        }
    }

    #[test]
    fn fornberg_one_sided_is_exact_on_quartics() {
        let nodes = [0.0, 0.3, 0.5, 0.9, 1.4];
        let w = fornberg_first_derivative(0.0, &nodes);
        let f = |t: f64| 1.0 + 2.0 * t - t * t + 0.5 * t.powi(3) + 0.25 * t.powi(4);
        let d: f64 = w.iter().zip(nodes).map(|(w, t)| w * f(t)).sum();
        assert_relative_eq!(d, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre(7);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(12)).sum();
        assert_relative_eq!(s, 2.0 / 13.0, epsilon = 1e-14);
        assert_relative_eq!(w.iter().sum::<f64>(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn sqrt_squares_back() {
        let h = DMatrix::from_row_slice(
            2,
            2,
            &[C64::new(3.0, 0.0), C64::new(0.5, -1.0), C64::new(0.5, 1.0), C64::new(2.0, 0.0)],
        );
        let s = hermitian_sqrt(&h).unwrap();
        assert!(max_abs(&(&s * &s - &h)) < 1e-13);
        assert!(max_abs(&(&s - s.adjoint())) < 1e-13);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![C64::from(1.0), C64::from(-1.0)]));
        assert!(matches!(hermitian_sqrt(&h), Err(CrError::NotPseudoconvex(_))));
    }

    #[test]
    fn five_point_stencil_is_fourth_order() {
        let f = |x: &DVector<f64>| Ok(DVector::from_vec(vec![C64::from(x[0].sin())]));
        let x = DVector::from_vec(vec![0.4]);
        let e = DVector::from_vec(vec![1.0]);
        let err = |h: f64| {
            (directional(&f, &x, &e, FdSpec::new(h, Stencil::Central4)).unwrap()[0].re - 0.4f64.cos()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((ratio - 16.0).abs() < 1.0, "ratio {ratio}");
    }
}
