//! Chart models of strictly pseudoconvex hypersurfaces with admissible coframes.
//!
//! Chart coordinates are ordered `(x¹, y¹, …, xⁿ, yⁿ, u)` with `z^α = x^α + i y^α`.
//! A real 1-form is a real covector of length `2n+1`; a complex 1-form a complex
//! one. 2-forms are antisymmetric `d × d` arrays `Ω` with `Ω(X, Y) = Xᵀ Ω Y`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::numerics::{self, FdSpec, Stencil};
use crate::{CrError, Result, C64};

pub type ChartPoint = DVector<f64>;

/// `θ`, `θ^α` and the Levi matrix `g_{αβ̄}` at a point.
#[derive(Debug, Clone)]
pub struct CoframeEval {
    pub theta: DVector<f64>,
    /// Row `α` holds the coefficients of `θ^α`.
    pub theta_alpha: DMatrix<C64>,
    pub levi: DMatrix<C64>,
}

/// Dual frame `{T, L_α, L_ᾱ}`.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub t: DVector<f64>,
    /// Column `α` is `L_α`.
    pub l: DMatrix<C64>,
    /// Columns `T, L_1 … L_n, L_1̄ … L_n̄`; the inverse of [`CoframeEval::matrix`].
    pub basis: DMatrix<C64>,
}

/// First partials of the coframe coefficients: `theta[(k, i)] = ∂_k θ_i`,
/// `theta_alpha[α][(k, i)] = ∂_k θ^α_i`.
#[derive(Debug, Clone)]
pub struct CoframeDerivs {
    pub theta: DMatrix<f64>,
    pub theta_alpha: Vec<DMatrix<C64>>,
}

impl CoframeDerivs {
    /// `dθ` as an antisymmetric array.
    pub fn d_theta(&self) -> DMatrix<f64> {
        &self.theta - self.theta.transpose()
    }

    pub fn d_theta_alpha(&self, alpha: usize) -> DMatrix<C64> {
        let p = &self.theta_alpha[alpha];
        p - p.transpose()
    }
}

impl CoframeEval {
    pub fn n(&self) -> usize {
        self.theta_alpha.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// `d × d` matrix with rows `θ, θ^1 … θ^n, θ^1̄ … θ^n̄`.
    pub fn matrix(&self) -> DMatrix<C64> {
        let n = self.n();
        let d = self.dim();
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            m[(0, i)] = C64::from(self.theta[i]);
            for a in 0..n {
                m[(1 + a, i)] = self.theta_alpha[(a, i)];
                m[(1 + n + a, i)] = self.theta_alpha[(a, i)].conj();
            }
        }
        m
    }

    pub fn frame(&self) -> Result<FrameEval> {
        let n = self.n();
        let basis = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| CrError::Degenerate("coframe matrix is singular".into()))?;
        let t = basis.column(0).map(|c| c.re);
        let l = basis.columns(1, n).into_owned();
        Ok(FrameEval { t, l, basis })
    }

    /// `θ^α` as a vector.
    pub fn theta_alpha_row(&self, alpha: usize) -> DVector<C64> {
        self.theta_alpha.row(alpha).transpose()
    }
}

impl FrameEval {
    /// Largest deviation of `coframe(frame)` from the identity pairing.
    pub fn duality_residual(&self, coframe: &CoframeEval) -> f64 {
        let d = coframe.dim();
        numerics::max_abs(&(coframe.matrix() * &self.basis - DMatrix::identity(d, d)))
    }
}

/// Levi matrix `-i dθ(L_α, L_β̄)` of a frame.
pub fn levi_matrix(d_theta: &DMatrix<f64>, frame: &FrameEval) -> DMatrix<C64> {
    let n = frame.l.ncols();
    let dt = d_theta.map(C64::from);
    DMatrix::from_fn(n, n, |a, b| {
        let la = frame.basis.column(1 + a);
        let lb = frame.basis.column(1 + n + b);
        -C64::i() * (la.transpose() * &dt * lb)[(0, 0)]
    })
}

/// Normalize `η^α` so that the Levi matrix becomes the identity.
///
/// Expects `dθ = i h_{αβ̄} η^α ∧ η^β̄` with `h` positive definite; returns
/// `θ^α = S^α_β η^β` with `Sᵀ S̄ = h`, `S` the conjugate of the positive
/// square root of `h`.
pub fn normalize_coframe(
    theta: &DVector<f64>,
    eta: &DMatrix<C64>,
    d_theta: &DMatrix<f64>,
) -> Result<CoframeEval> {
    let n = eta.nrows();
    let raw = CoframeEval {
        theta: theta.clone(),
        theta_alpha: eta.clone(),
        levi: DMatrix::identity(n, n),
    };
    let h = levi_matrix(d_theta, &raw.frame()?);
    let h = (&h + h.adjoint()) * C64::from(0.5);
    let s = numerics::hermitian_sqrt(&h)?.map(|c| c.conj());
    let mut out = CoframeEval {
        theta: theta.clone(),
        theta_alpha: &s * eta,
        levi: DMatrix::identity(n, n),
    };
    out.levi = levi_matrix(d_theta, &out.frame()?);
    Ok(out)
}

/// How a model supplies coframe derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DerivativeKind {
    Analytic,
    FiniteDifference(FdSpec),
}

/// A single-chart strictly pseudoconvex hypersurface with an admissible coframe.
pub trait Model: Send + Sync {
    fn name(&self) -> String;

    /// CR dimension.
    fn n(&self) -> usize;

    fn dim(&self) -> usize {
        2 * self.n() + 1
    }

    fn in_domain(&self, x: &ChartPoint) -> bool;

    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval>;

    fn derivatives_unchecked(&self, x: &ChartPoint) -> Result<CoframeDerivs>;

    fn derivative_kind(&self) -> DerivativeKind {
        DerivativeKind::Analytic
    }

    /// Ambient coordinates in `ℂ^{n+1}` when the model carries an embedding.
    fn ambient(&self, _x: &ChartPoint) -> Option<DVector<C64>> {
        None
    }

    fn base_point(&self) -> ChartPoint {
        DVector::zeros(self.dim())
    }

    fn check(&self, x: &ChartPoint) -> Result<()> {
        if x.len() != self.dim() {
            return Err(CrError::Dimension { expected: self.dim(), got: x.len() });
        }
        if !x.iter().all(|v| v.is_finite()) || !self.in_domain(x) {
            return Err(CrError::DomainExit { model: self.name(), point: x.iter().cloned().collect() });
        }
        Ok(())
    }

    fn coframe(&self, x: &ChartPoint) -> Result<CoframeEval> {
        self.check(x)?;
        self.coframe_unchecked(x)
    }

    fn coframe_derivatives(&self, x: &ChartPoint) -> Result<CoframeDerivs> {
        self.check(x)?;
        self.derivatives_unchecked(x)
    }

    /// `max |dθ − i Σ θ^α ∧ θ^ᾱ|` over chart components.
    fn structure_residual(&self, x: &ChartPoint) -> Result<f64> {
        let cf = self.coframe(x)?;
        let dv = self.coframe_derivatives(x)?;
        let mut rhs = DMatrix::<C64>::zeros(self.dim(), self.dim());
        for a in 0..self.n() {
            let t = cf.theta_alpha_row(a);
            let tb = t.map(|c| c.conj());
            rhs += (&t * tb.transpose() - &tb * t.transpose()) * C64::i();
        }
        Ok(numerics::max_abs(&(dv.d_theta().map(C64::from) - rhs)))
    }
}

pub type ModelRef = Arc<dyn Model>;

/// Flatten `(θ, θ^α)` into one complex vector for finite differencing.
fn flatten(cf: &CoframeEval) -> DVector<C64> {
    let d = cf.dim();
    let n = cf.n();
    let mut v = DVector::zeros(d * (n + 1));
    for i in 0..d {
        v[i] = C64::from(cf.theta[i]);
        for a in 0..n {
            v[(1 + a) * d + i] = cf.theta_alpha[(a, i)];
        }
    }
    v
}

/// Coframe derivatives by central differences of the coframe values.
pub fn fd_derivatives<M: Model + ?Sized>(model: &M, x: &ChartPoint, fd: FdSpec) -> Result<CoframeDerivs> {
    let d = model.dim();
    let n = model.n();
    let f = |y: &DVector<f64>| model.coframe(y).map(|c| flatten(&c));
    let jac = numerics::jacobian(&f, x, fd)?;
    let theta = DMatrix::from_fn(d, d, |k, i| jac[(i, k)].re);
    let theta_alpha = (0..n)
        .map(|a| DMatrix::from_fn(d, d, |k, i| jac[((1 + a) * d + i, k)]))
        .collect();
    Ok(CoframeDerivs { theta, theta_alpha })
}

// ---------------------------------------------------------------------------
// Heisenberg group

/// `θ = du + i Σ (z^α dz̄^α − z̄^α dz^α)`, `θ^α = √2 dz^α`.
#[derive(Debug, Clone)]
pub struct Heisenberg {
    n: usize,
}

pub fn heisenberg_model(n: usize) -> Result<Heisenberg> {
    if n < 1 {
        return Err(CrError::InvalidArgument("CR dimension must be at least 1".into()));
    }
    Ok(Heisenberg { n })
}

impl Model for Heisenberg {
    fn name(&self) -> String {
        format!("heisenberg(n={})", self.n)
    }

    fn n(&self) -> usize {
        self.n
    }

    fn in_domain(&self, _x: &ChartPoint) -> bool {
        true
    }

    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval> {
        let n = self.n;
        let d = self.dim();
        let mut theta = DVector::zeros(d);
        theta[2 * n] = 1.0;
        let mut ta = DMatrix::zeros(n, d);
        let r2 = std::f64::consts::SQRT_2;
        for a in 0..n {
            theta[2 * a] = -2.0 * x[2 * a + 1];
            theta[2 * a + 1] = 2.0 * x[2 * a];
            ta[(a, 2 * a)] = C64::from(r2);
            ta[(a, 2 * a + 1)] = C64::new(0.0, r2);
        }
        Ok(CoframeEval { theta, theta_alpha: ta, levi: DMatrix::identity(n, n) })
    }

    fn derivatives_unchecked(&self, _x: &ChartPoint) -> Result<CoframeDerivs> {
        let n = self.n;
        let d = self.dim();
        let mut theta = DMatrix::zeros(d, d);
        for a in 0..n {
            theta[(2 * a, 2 * a + 1)] = 2.0;
            theta[(2 * a + 1, 2 * a)] = -2.0;
        }
        Ok(CoframeDerivs { theta, theta_alpha: vec![DMatrix::zeros(d, d); n] })
    }

    /// Boundary of the Siegel domain: `(w₀, z) = (u + i|z|², z)`.
    fn ambient(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        let n = self.n;
        let r2: f64 = (0..2 * n).map(|i| x[i] * x[i]).sum();
        let mut z = DVector::zeros(n + 1);
        z[0] = C64::new(x[2 * n], r2);
        for a in 0..n {
            z[1 + a] = C64::new(x[2 * a], x[2 * a + 1]);
        }
        Some(z)
    }
}

// ---------------------------------------------------------------------------
// Sphere

/// Unit sphere `S^{2n+1} ⊂ ℂ^{n+1}` with `θ = Im(Z̄·dZ)`.
///
/// The chart is the Cayley transform to Heisenberg coordinates,
/// `Z = Q·((i − w₀)/(i + w₀), 2i z/(i + w₀))` with `w₀ = u + i|z|²`, which covers
/// the sphere minus the pole `−Q e₀`. The unitary `Q` moves the pole; the
/// coframe expressed in chart coordinates does not depend on it.
#[derive(Debug, Clone)]
pub struct Sphere {
    n: usize,
    rotation: DMatrix<C64>,
    max_g: f64,
}

pub fn sphere_model(n: usize) -> Result<Sphere> {
    if n < 1 {
        return Err(CrError::InvalidArgument("CR dimension must be at least 1".into()));
    }
    Ok(Sphere { n, rotation: DMatrix::identity(n + 1, n + 1), max_g: 1e4 })
}

impl Sphere {
    /// Same sphere with the chart pole moved to `−Q e₀`.
    pub fn with_rotation(mut self, q: DMatrix<C64>) -> Result<Self> {
        let k = self.n + 1;
        if q.shape() != (k, k) || numerics::max_abs(&(q.adjoint() * &q - DMatrix::identity(k, k))) > 1e-12 {
            return Err(CrError::InvalidArgument("chart rotation must be a unitary matrix".into()));
        }
        self.rotation = q;
        Ok(self)
    }

    pub fn rotation(&self) -> &DMatrix<C64> {
        &self.rotation
    }

    fn r2(&self, x: &ChartPoint) -> f64 {
        (0..2 * self.n).map(|i| x[i] * x[i]).sum()
    }

    /// `i + w₀ = u + i(1 + |z|²)`.
    fn q(&self, x: &ChartPoint) -> C64 {
        C64::new(x[2 * self.n], 1.0 + self.r2(x))
    }

    /// `∂_k (i + w₀)`.
    fn dq(&self, x: &ChartPoint) -> Vec<C64> {
        let n = self.n;
        let mut d = vec![C64::from(0.0); 2 * n + 1];
        for i in 0..2 * n {
            d[i] = C64::new(0.0, 2.0 * x[i]);
        }
        d[2 * n] = C64::from(1.0);
        d
    }

    /// Unrotated ambient point.
    fn cayley(&self, x: &ChartPoint) -> DVector<C64> {
        let n = self.n;
        let q = self.q(x);
        let i = C64::i();
        let mut z = DVector::zeros(n + 1);
        z[0] = i * 2.0 / q - 1.0;
        for a in 0..n {
            z[1 + a] = i * 2.0 * C64::new(x[2 * a], x[2 * a + 1]) / q;
        }
        z
    }

    /// `∂Z/∂x_k` in `ℂ^{n+1}`, one column per chart coordinate.
    pub fn ambient_jacobian(&self, x: &ChartPoint) -> DMatrix<C64> {
        let n = self.n;
        let d = self.dim();
        let q = self.q(x);
        let dq = self.dq(x);
        let i = C64::i();
        let mut j = DMatrix::zeros(n + 1, d);
        for k in 0..d {
            j[(0, k)] = -i * 2.0 * dq[k] / (q * q);
            for a in 0..n {
                let za = C64::new(x[2 * a], x[2 * a + 1]);
                let dza = if k == 2 * a {
                    C64::from(1.0)
                } else if k == 2 * a + 1 {
                    i
                } else {
                    C64::from(0.0)
                };
                j[(1 + a, k)] = i * 2.0 * (dza / q - za * dq[k] / (q * q));
            }
        }
        &self.rotation * j
    }

    /// Chart point of an ambient point of the sphere.
    pub fn chart_of_ambient(&self, z: &DVector<C64>) -> Result<ChartPoint> {
        let n = self.n;
        let w = self.rotation.adjoint() * z;
        let den = w[0] + 1.0;
        if den.norm() < 1e-12 {
            return Err(CrError::DomainExit { model: self.name(), point: vec![] });
        }
        let w0 = C64::i() * (C64::from(1.0) - w[0]) / den;
        let mut x = DVector::zeros(2 * n + 1);
        for a in 0..n {
            let za = w[1 + a] / den;
            x[2 * a] = za.re;
            x[2 * a + 1] = za.im;
        }
        x[2 * n] = w0.re;
        Ok(x)
    }

    /// Real Jacobian of [`Self::chart_of_ambient`] applied to complex ambient
    /// tangent vectors `dz` (columns): returns the chart tangent vectors.
    pub fn chart_differential(&self, z: &DVector<C64>, dz: &DMatrix<C64>) -> DMatrix<f64> {
        let n = self.n;
        let w = self.rotation.adjoint() * z;
        let dw = self.rotation.adjoint() * dz;
        let den = w[0] + 1.0;
        let i = C64::i();
        DMatrix::from_fn(2 * n + 1, dz.ncols(), |r, c| {
            let dw0 = dw[(0, c)];
            if r == 2 * n {
                (-i * 2.0 * dw0 / (den * den)).re
            } else {
                let a = r / 2;
                let dza = dw[(1 + a, c)] / den - w[1 + a] * dw0 / (den * den);
                if r % 2 == 0 {
                    dza.re
                } else {
                    dza.im
                }
            }
        })
    }
}

impl Model for Sphere {
    fn name(&self) -> String {
        format!("sphere(n={})", self.n)
    }

    fn n(&self) -> usize {
        self.n
    }

    fn in_domain(&self, x: &ChartPoint) -> bool {
        let q = self.q(x);
        q.norm_sqr() < self.max_g
    }

    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval> {
        let p = SpherePieces::new(self.n, x);
        normalize_coframe(&p.theta, &p.eta, &(&p.dtheta - p.dtheta.transpose()))
    }

    fn derivatives_unchecked(&self, x: &ChartPoint) -> Result<CoframeDerivs> {
        let p = SpherePieces::new(self.n, x);
        let n = self.n;
        let d = self.dim();
        // θ^α = s η^α with s = 2/√g.
        let g = p.g;
        let s = 2.0 / g.sqrt();
        let theta_alpha = (0..n)
            .map(|a| {
                DMatrix::from_fn(d, d, |k, i| {
                    let ds = -p.dg[k] * g.powf(-1.5);
                    p.eta[(a, i)] * ds + p.deta[a][(k, i)] * s
                })
            })
            .collect();
        Ok(CoframeDerivs { theta: p.dtheta, theta_alpha })
    }

    fn ambient(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        Some(&self.rotation * self.cayley(x))
    }
}

/// Closed-form pieces of the sphere coframe in chart coordinates.
///
/// `θ = μ θ_H` with `θ_H` the Heisenberg form and `μ = 2/g`,
/// `g = |i + w₀|²`; `η^α = dz^α − c^α θ` with `c^α = z^α (i + w₀)/2`, the
/// `dz^α`-component of the Reeb field; `dθ = (4/g) i Σ η^α ∧ η^ᾱ` on `H`.
struct SpherePieces {
    g: f64,
    dg: Vec<f64>,
    theta: DVector<f64>,
    dtheta: DMatrix<f64>,
    eta: DMatrix<C64>,
    deta: Vec<DMatrix<C64>>,
}

impl SpherePieces {
    fn new(n: usize, x: &ChartPoint) -> Self {
        let d = 2 * n + 1;
        let u = x[2 * n];
        let r2: f64 = (0..2 * n).map(|i| x[i] * x[i]).sum();
        let g = u * u + (1.0 + r2) * (1.0 + r2);
        let mut dg = vec![0.0; d];
        for i in 0..2 * n {
            dg[i] = 4.0 * (1.0 + r2) * x[i];
        }
        dg[2 * n] = 2.0 * u;
        let mu = 2.0 / g;
        let dmu: Vec<f64> = dg.iter().map(|v| -2.0 * v / (g * g)).collect();

        let mut th = DVector::zeros(d);
        let mut dth_h = DMatrix::zeros(d, d);
        th[2 * n] = 1.0;
        for a in 0..n {
            th[2 * a] = -2.0 * x[2 * a + 1];
            th[2 * a + 1] = 2.0 * x[2 * a];
            dth_h[(2 * a, 2 * a + 1)] = 2.0;
            dth_h[(2 * a + 1, 2 * a)] = -2.0;
        }
        let theta = &th * mu;
        let dtheta = DMatrix::from_fn(d, d, |k, i| dmu[k] * th[i] + mu * dth_h[(k, i)]);

        let i = C64::i();
        let q = C64::new(u, 1.0 + r2);
        let mut dq = vec![C64::from(0.0); d];
        for k in 0..2 * n {
            dq[k] = C64::new(0.0, 2.0 * x[k]);
        }
        dq[2 * n] = C64::from(1.0);

        let mut eta = DMatrix::zeros(n, d);
        let mut deta = Vec::with_capacity(n);
        for a in 0..n {
            let za = C64::new(x[2 * a], x[2 * a + 1]);
            let c = za * q * 0.5;
            let dc: Vec<C64> = (0..d)
                .map(|k| {
                    let dza = if k == 2 * a {
                        C64::from(1.0)
                    } else if k == 2 * a + 1 {
                        i
                    } else {
                        C64::from(0.0)
                    };
                    (dza * q + za * dq[k]) * 0.5
                })
                .collect();
            for col in 0..d {
                eta[(a, col)] = -c * theta[col];
            }
            eta[(a, 2 * a)] += 1.0;
            eta[(a, 2 * a + 1)] += i;
            deta.push(DMatrix::from_fn(d, d, |k, col| -dc[k] * theta[col] - c * dtheta[(k, col)]));
        }
        SpherePieces { g, dg, theta, dtheta, eta, deta }
    }
}

// ---------------------------------------------------------------------------
// Wrappers

/// A model whose coframe derivatives come from central differences.
pub struct FdModel {
    inner: ModelRef,
    fd: FdSpec,
}

impl FdModel {
    pub fn new(inner: ModelRef, fd: FdSpec) -> Self {
        Self { inner, fd }
    }

    /// Second-order central differences with the given step.
    pub fn central(inner: ModelRef, step: f64) -> Self {
        Self::new(inner, FdSpec::new(step, Stencil::Central2))
    }
}

impl Model for FdModel {
    fn name(&self) -> String {
        format!("{}[fd h={:e}]", self.inner.name(), self.fd.step)
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn in_domain(&self, x: &ChartPoint) -> bool {
        self.inner.in_domain(x)
    }
    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval> {
        self.inner.coframe_unchecked(x)
    }
    fn derivatives_unchecked(&self, x: &ChartPoint) -> Result<CoframeDerivs> {
        fd_derivatives(self.inner.as_ref(), x, self.fd)
    }
    fn derivative_kind(&self) -> DerivativeKind {
        DerivativeKind::FiniteDifference(self.fd)
    }
    fn ambient(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.inner.ambient(x)
    }
    fn base_point(&self) -> ChartPoint {
        self.inner.base_point()
    }
}

/// Constant rescaling `θ ↦ cθ`, `θ^α ↦ √c θ^α` (keeps the Levi matrix).
pub struct ScaledModel {
    inner: ModelRef,
    c: f64,
}

impl ScaledModel {
    pub fn new(inner: ModelRef, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(CrError::InvalidArgument(format!("contact scale must be positive, got {c}")));
        }
        Ok(Self { inner, c })
    }

    pub fn scale(&self) -> f64 {
        self.c
    }
}

impl Model for ScaledModel {
    fn name(&self) -> String {
        format!("{}[scaled {}]", self.inner.name(), self.c)
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn in_domain(&self, x: &ChartPoint) -> bool {
        self.inner.in_domain(x)
    }
    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval> {
        let mut cf = self.inner.coframe_unchecked(x)?;
        cf.theta *= self.c;
        cf.theta_alpha *= C64::from(self.c.sqrt());
        Ok(cf)
    }
    fn derivatives_unchecked(&self, x: &ChartPoint) -> Result<CoframeDerivs> {
        let mut dv = self.inner.derivatives_unchecked(x)?;
        dv.theta *= self.c;
        for m in dv.theta_alpha.iter_mut() {
            *m *= C64::from(self.c.sqrt());
        }
        Ok(dv)
    }
    fn derivative_kind(&self) -> DerivativeKind {
        self.inner.derivative_kind()
    }
    fn ambient(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.inner.ambient(x)
    }
    fn base_point(&self) -> ChartPoint {
        self.inner.base_point()
    }
}

/// Point-dependent unitary change of admissible coframe,
/// `θ^α ↦ U^α_β(x) θ^β` with `U(x) = V diag(e^{i ⟨k_α, x⟩}) V*`.
pub struct GaugeRotated {
    inner: ModelRef,
    v: DMatrix<C64>,
    k: DMatrix<f64>,
}

impl GaugeRotated {
    /// `v` is a fixed unitary, row `α` of `k` the phase gradient of the `α`-th eigenvalue.
    pub fn new(inner: ModelRef, v: DMatrix<C64>, k: DMatrix<f64>) -> Result<Self> {
        let n = inner.n();
        if v.shape() != (n, n) || k.shape() != (n, inner.dim()) {
            return Err(CrError::InvalidArgument("gauge field has the wrong shape".into()));
        }
        if numerics::max_abs(&(v.adjoint() * &v - DMatrix::identity(n, n))) > 1e-12 {
            return Err(CrError::InvalidArgument("gauge basis must be unitary".into()));
        }
        Ok(Self { inner, v, k })
    }

    fn unitary(&self, x: &ChartPoint) -> (DMatrix<C64>, Vec<DMatrix<C64>>) {
        let n = self.inner.n();
        let phases: Vec<C64> = (0..n).map(|a| C64::from_polar(1.0, self.k.row(a).dot(&x.transpose()))).collect();
        let u = &self.v * DMatrix::from_diagonal(&DVector::from_vec(phases.clone())) * self.v.adjoint();
        let du = (0..self.inner.dim())
            .map(|j| {
                let dd = DVector::from_iterator(n, (0..n).map(|a| phases[a] * C64::new(0.0, self.k[(a, j)])));
                &self.v * DMatrix::from_diagonal(&dd) * self.v.adjoint()
            })
            .collect();
        (u, du)
    }
}

impl Model for GaugeRotated {
    fn name(&self) -> String {
        format!("{}[gauge-rotated]", self.inner.name())
    }
    fn n(&self) -> usize {
        self.inner.n()
    }
    fn in_domain(&self, x: &ChartPoint) -> bool {
        self.inner.in_domain(x)
    }
    fn coframe_unchecked(&self, x: &ChartPoint) -> Result<CoframeEval> {
        let mut cf = self.inner.coframe_unchecked(x)?;
        let (u, _) = self.unitary(x);
        cf.theta_alpha = &u * &cf.theta_alpha;
        cf.levi = &u * cf.levi * u.adjoint();
        Ok(cf)
    }
    fn derivatives_unchecked(&self, x: &ChartPoint) -> Result<CoframeDerivs> {
        let cf = self.inner.coframe_unchecked(x)?;
        let dv = self.inner.derivatives_unchecked(x)?;
        let (u, du) = self.unitary(x);
        let n = self.n();
        let d = self.dim();
        let theta_alpha = (0..n)
            .map(|a| {
                DMatrix::from_fn(d, d, |k, i| {
                    (0..n)
                        .map(|b| du[k][(a, b)] * cf.theta_alpha[(b, i)] + u[(a, b)] * dv.theta_alpha[b][(k, i)])
                        .sum()
                })
            })
            .collect();
        Ok(CoframeDerivs { theta: dv.theta, theta_alpha })
    }
    fn derivative_kind(&self) -> DerivativeKind {
        self.inner.derivative_kind()
    }
    fn ambient(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.inner.ambient(x)
    }
    fn base_point(&self) -> ChartPoint {
        self.inner.base_point()
    }
}

/// Uniform sample in the coordinate box of half-width `radius` around the base point.
pub fn sample_point<R: Rng + ?Sized>(model: &dyn Model, rng: &mut R, radius: f64) -> ChartPoint {
    let b = model.base_point();
    DVector::from_iterator(b.len(), b.iter().map(|c| c + rng.gen_range(-radius..radius)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn heisenberg_rejects_zero_dimension() {
        assert!(heisenberg_model(0).is_err());
        assert!(sphere_model(0).is_err());
    }

    #[test]
    fn heisenberg_contact_form_at_origin_is_du() {
        let m = heisenberg_model(2).unwrap();
        let cf = m.coframe(&DVector::zeros(5)).unwrap();
        assert_eq!(cf.theta.as_slice(), &[0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn heisenberg_contact_form_off_origin() {
        // z = 1: i(z dz̄ − z̄ dz) = i(−2i dy) = 2 dy.
        let m = heisenberg_model(1).unwrap();
        let cf = m.coframe(&DVector::from_vec(vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(cf.theta.as_slice(), &[0.0, 2.0, 1.0]);
    }

    #[test]
    fn heisenberg_structure_residual_vanishes() {
        let m = heisenberg_model(1).unwrap();
        let mut r = rng();
        for _ in 0..20 {
            let x = sample_point(&m, &mut r, 2.0);
            assert!(m.structure_residual(&x).unwrap() < 1e-12);
        }
    }

    #[test]
    fn heisenberg_coframe_derivatives_are_zero() {
        let m = heisenberg_model(2).unwrap();
        let dv = m.coframe_derivatives(&DVector::from_vec(vec![0.3, -0.1, 0.2, 0.5, 1.0])).unwrap();
        assert!(dv.theta_alpha.iter().all(|p| p.iter().all(|c| *c == C64::from(0.0))));
    }

    #[test]
    fn normalize_identity_levi_is_noop() {
        let m = heisenberg_model(1).unwrap();
        let x = DVector::from_vec(vec![0.2, 0.1, -0.3]);
        let cf = m.coframe(&x).unwrap();
        let dv = m.coframe_derivatives(&x).unwrap();
        let out = normalize_coframe(&cf.theta, &cf.theta_alpha, &dv.d_theta()).unwrap();
        assert!(numerics::max_abs(&(out.theta_alpha - cf.theta_alpha)) < 1e-14);
    }

    #[test]
    fn normalize_scalar_levi_takes_square_root() {
        // η = dz/√2 gives h = 4 on the Heisenberg contact form; θ¹ = 2η.
        let m = heisenberg_model(1).unwrap();
        let x = DVector::zeros(3);
        let cf = m.coframe(&x).unwrap();
        let dv = m.coframe_derivatives(&x).unwrap();
        let eta = &cf.theta_alpha * C64::from(0.5);
        let out = normalize_coframe(&cf.theta, &eta, &dv.d_theta()).unwrap();
        assert!(numerics::max_abs(&(out.theta_alpha - eta * C64::from(2.0))) < 1e-14);
    }

    #[test]
    fn normalize_random_levi_gives_identity() {
        let m = heisenberg_model(2).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.5]);
        let cf = m.coframe(&x).unwrap();
        let dv = m.coframe_derivatives(&x).unwrap();
        let mut r = rng();
        let b = DMatrix::from_fn(2, 2, |_, _| C64::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)));
        let b = b + DMatrix::identity(2, 2) * C64::from(2.0);
        let eta = b.try_inverse().unwrap() * &cf.theta_alpha;
        let out = normalize_coframe(&cf.theta, &eta, &dv.d_theta()).unwrap();
        assert!(numerics::max_abs(&(&out.levi - DMatrix::identity(2, 2))) < 1e-10);
        // Recompute dθ against the new coframe.
        let mut rhs = DMatrix::<C64>::zeros(5, 5);
        for a in 0..2 {
            let t = out.theta_alpha_row(a);
            let tb = t.map(|c| c.conj());
            rhs += (&t * tb.transpose() - &tb * t.transpose()) * C64::i();
        }
        assert!(numerics::max_abs(&(dv.d_theta().map(C64::from) - rhs)) < 1e-10);
    }

    #[test]
    fn sphere_contact_form_is_pullback_of_ambient_form() {
        for n in 1..=2 {
            let s = sphere_model(n).unwrap();
            let mut r = rng();
            for _ in 0..10 {
                let x = sample_point(&s, &mut r, 0.8);
                let z = s.ambient(&x).unwrap();
                assert_relative_eq!(z.norm_squared(), 1.0, epsilon = 1e-14);
                let j = s.ambient_jacobian(&x);
                let cf = s.coframe(&x).unwrap();
                for k in 0..s.dim() {
                    let v = z.dotc(&j.column(k).into_owned()).im;
                    assert_relative_eq!(v, cf.theta[k], epsilon = 1e-13);
                }
            }
        }
    }

    #[test]
    fn sphere_ambient_jacobian_matches_differences() {
        let s = sphere_model(2).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.1, 0.3, 0.05, -0.4]);
        let f = |y: &DVector<f64>| Ok(s.ambient(y).unwrap());
        let fd = numerics::jacobian(&f, &x, FdSpec::new(1e-3, Stencil::Central4)).unwrap();
        assert!(numerics::max_abs(&(fd - s.ambient_jacobian(&x))) < 1e-10);
    }

    #[test]
    fn sphere_chart_inverse_round_trips() {
        let q = DMatrix::from_row_slice(
            3,
            3,
            &[0.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 1.0].map(C64::from),
        );
        let s = sphere_model(2).unwrap().with_rotation(q).unwrap();
        let x = DVector::from_vec(vec![0.7, -0.2, 0.1, 0.3, -0.6]);
        let z = s.ambient(&x).unwrap();
        let back = s.chart_of_ambient(&z).unwrap();
        assert!((back - &x).amax() < 1e-13);
        let j = s.ambient_jacobian(&x);
        let id = s.chart_differential(&z, &j);
        assert!((id - DMatrix::<f64>::identity(5, 5)).amax() < 1e-12);
    }

    #[test]
    fn sphere_levi_is_identity_and_structure_holds() {
        for n in 1..=2 {
            let s = sphere_model(n).unwrap();
            let mut r = rng();
            for _ in 0..20 {
                let x = sample_point(&s, &mut r, 1.0);
                let cf = s.coframe(&x).unwrap();
                assert!(numerics::max_abs(&(&cf.levi - DMatrix::identity(n, n))) < 1e-10);
                assert!(s.structure_residual(&x).unwrap() < 1e-12);
                let fr = cf.frame().unwrap();
                assert!(fr.duality_residual(&cf) < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_reeb_field_generates_the_circle_action() {
        let s = sphere_model(1).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.4]);
        let fr = s.coframe(&x).unwrap().frame().unwrap();
        let z = s.ambient(&x).unwrap();
        let dz = s.ambient_jacobian(&x) * fr.t.map(C64::from);
        assert!(numerics::max_abs_v(&(dz - z * C64::i())) < 1e-13);
    }

    #[test]
    fn sphere_analytic_derivatives_match_differences() {
        for n in 1..=2 {
            let s = sphere_model(n).unwrap();
            let mut r = rng();
            let x = sample_point(&s, &mut r, 0.7);
            let a = s.coframe_derivatives(&x).unwrap();
            let f = fd_derivatives(&s, &x, FdSpec::new(1e-3, Stencil::Central4)).unwrap();
            assert!((a.theta - f.theta).amax() < 1e-10);
            for (p, q) in a.theta_alpha.iter().zip(&f.theta_alpha) {
                assert!(numerics::max_abs(&(p - q)) < 1e-10);
            }
        }
    }

    #[test]
    fn sphere_domain_excludes_pole_neighbourhood() {
        let s = sphere_model(1).unwrap();
        assert!(s.coframe(&DVector::from_vec(vec![0.0, 0.0, 200.0])).is_err());
        assert!(s.coframe(&DVector::from_vec(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn scaled_model_keeps_levi() {
        let s: ModelRef = Arc::new(sphere_model(1).unwrap());
        let sc = ScaledModel::new(s, 0.5).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        assert!(sc.structure_residual(&x).unwrap() < 1e-12);
    }

    #[test]
    fn gauge_rotation_keeps_structure() {
        let s: ModelRef = Arc::new(sphere_model(2).unwrap());
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let v = DMatrix::from_row_slice(2, 2, &[C64::from(c), C64::new(0.0, c), C64::new(0.0, c), C64::from(c)]);
        let k = DMatrix::from_row_slice(2, 5, &[1.0, 0.5, -0.3, 0.2, 0.7, -0.4, 0.1, 0.9, 0.0, 0.3]);
        let g = GaugeRotated::new(s, v, k).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, 0.3, -0.2, 0.4]);
        assert!(g.structure_residual(&x).unwrap() < 1e-12);
        let a = g.coframe_derivatives(&x).unwrap();
        let f = fd_derivatives(&g, &x, FdSpec::new(1e-3, Stencil::Central4)).unwrap();
        for (p, q) in a.theta_alpha.iter().zip(&f.theta_alpha) {
            assert!(numerics::max_abs(&(p - q)) < 1e-9);
        }
    }
}
