//! The circle bundle `C = M × S¹`, its σ-form and Lorentz metric
//! `h = Σ θ^α·θ^ᾱ + 2 θ·σ`, null geodesics, and the Levi-Civita forms in the
//! coframe `{θ, σ, θ^α, θ^ᾱ}`.
//!
//! Points of `C` are chart points of `M` followed by the fiber coordinate `t`.

use nalgebra::{DMatrix, DVector};

use rand::Rng;

use crate::chains::chain_velocity;
use crate::curvature::{curvature_with, d_tensor, lemma1_form_of, CurvatureEval, DiffOptions, PolygonLoop};
use crate::embeddings::{adapt_coframes, adapted_connection, adapted_unitary, CrEmbedding};
use crate::models::{ChartPoint, Model};
use crate::numerics::{self, FdSpec, Stencil};
use crate::ode::{self, IntegrationOptions};
use crate::{CrError, Result, C64};

/// Tolerance on the Levi matrix for dropping the `dg` term of σ.
const LEVI_IDENTITY_TOL: f64 = 1e-9;

/// Numerical settings for the bundle computations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeffermanOptions {
    pub diff: DiffOptions,
    /// Differentiation of the metric (Christoffel symbols).
    pub metric_fd: FdSpec,
    /// Null defect above which a geodesic is flagged.
    pub null_tolerance: f64,
}

impl Default for FeffermanOptions {
    fn default() -> Self {
        Self {
            diff: DiffOptions::default(),
            metric_fd: FdSpec::new(1e-3, Stencil::Central4),
            null_tolerance: 1e-6,
        }
    }
}

/// σ from curvature data: `(1/(n+2)) (dt + iω_α^α − Rθ/(2(n+1)))`, returned on
/// `C` (last entry is the `dt` coefficient) or on `M` only.
pub fn sigma_of(c: &CurvatureEval, include_fiber: bool) -> Result<DVector<f64>> {
    let n = c.n;
    let nf = n as f64;
    let levi = &c.connection.coframe.levi;
    let dev = numerics::max_abs(&(levi - DMatrix::identity(n, n)));
    if dev > LEVI_IDENTITY_TOL {
        return Err(CrError::Residual { what: "Levi matrix identity (dg term of σ)", residual: dev, tol: LEVI_IDENTITY_TOL });
    }
    let tr = c.connection.omega_trace_chart() * C64::i();
    let base = (tr.map(|v| v.re) - &c.connection.coframe.theta * (c.scalar / (2.0 * (nf + 1.0)))) / (nf + 2.0);
    if include_fiber {
        let d = base.len();
        let mut s = DVector::zeros(d + 1);
        s.rows_mut(0, d).copy_from(&base);
        s[d] = 1.0 / (nf + 2.0);
        Ok(s)
    } else {
        Ok(base)
    }
}

pub fn sigma(model: &dyn Model, point: &ChartPoint, include_fiber: bool) -> Result<DVector<f64>> {
    sigma_of(&curvature_with(model, point, &DiffOptions::default())?, include_fiber)
}

/// `h` on `C` in chart coordinates.
#[derive(Debug, Clone)]
pub struct MetricEval {
    pub h: DMatrix<f64>,
}

impl MetricEval {
    pub fn eval(&self, u: &DVector<f64>, v: &DVector<f64>) -> f64 {
        (u.transpose() * &self.h * v)[(0, 0)]
    }

    /// Numbers of negative and positive eigenvalues (with a relative cutoff).
    pub fn signature(&self) -> (usize, usize) {
        let e = self.h.clone().symmetric_eigen().eigenvalues;
        let scale = e.amax();
        let neg = e.iter().filter(|v| **v < -1e-12 * scale).count();
        let pos = e.iter().filter(|v| **v > 1e-12 * scale).count();
        (neg, pos)
    }

    pub fn symmetry_defect(&self) -> f64 {
        (&self.h - self.h.transpose()).amax()
    }
}

/// Metric from the coframe of `M` and σ (both as chart covectors on `M`).
pub fn metric_from(theta: &DVector<f64>, theta_alpha: &DMatrix<C64>, sigma_c: &DVector<f64>) -> MetricEval {
    let d = theta.len();
    let n = theta_alpha.nrows();
    let mut th = DVector::zeros(d + 1);
    th.rows_mut(0, d).copy_from(theta);
    let mut h = &th * sigma_c.transpose() + sigma_c * th.transpose();
    for a in 0..n {
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] += (theta_alpha[(a, i)] * theta_alpha[(a, j)].conj()).re;
            }
        }
    }
    MetricEval { h }
}

pub fn metric_with(model: &dyn Model, cpoint: &DVector<f64>, opts: &FeffermanOptions) -> Result<MetricEval> {
    let d = model.dim();
    if cpoint.len() != d + 1 {
        return Err(CrError::Dimension { expected: d + 1, got: cpoint.len() });
    }
    let x = cpoint.rows(0, d).into_owned();
    let c = curvature_with(model, &x, &opts.diff)?;
    let s = sigma_of(&c, true)?;
    Ok(metric_from(&c.connection.coframe.theta, &c.connection.coframe.theta_alpha, &s))
}

pub fn metric(model: &dyn Model, cpoint: &DVector<f64>) -> Result<MetricEval> {
    metric_with(model, cpoint, &FeffermanOptions::default())
}

/// Christoffel symbols `gamma[k][(i, j)] = Γ^k_{ij}` by differentiating the
/// metric along the base directions (the metric does not depend on `t`).
pub fn christoffel(model: &dyn Model, cpoint: &DVector<f64>, opts: &FeffermanOptions) -> Result<(MetricEval, Vec<DMatrix<f64>>)> {
    let d = model.dim();
    let m = d + 1;
    let g = metric_with(model, cpoint, opts)?;
    let field = |y: &DVector<f64>| -> Result<DVector<C64>> {
        let h = metric_with(model, y, opts)?.h;
        Ok(DVector::from_iterator(m * m, h.iter().map(|v| C64::from(*v))))
    };
    let mut dh: Vec<DMatrix<f64>> = Vec::with_capacity(m);
    for k in 0..m {
        if k == d {
            dh.push(DMatrix::zeros(m, m));
            continue;
        }
        let mut e = DVector::zeros(m);
        e[k] = 1.0;
        let dv = numerics::directional(&field, cpoint, &e, opts.metric_fd)?;
        dh.push(DMatrix::from_iterator(m, m, dv.iter().map(|c| c.re)));
    }
    let hinv = g.h.clone().try_inverse().ok_or_else(|| CrError::Degenerate("Fefferman metric is singular".into()))?;
    let mut gam = vec![DMatrix::zeros(m, m); m];
    for i in 0..m {
        for j in 0..m {
            let low: DVector<f64> = DVector::from_fn(m, |l, _| 0.5 * (dh[i][(l, j)] + dh[j][(l, i)] - dh[l][(i, j)]));
            let up = &hinv * low;
            for k in 0..m {
                gam[k][(i, j)] = up[k];
            }
        }
    }
    Ok((g, gam))
}

/// Base point, fiber angle and velocity on `C`.
#[derive(Debug, Clone)]
pub struct FeffermanState {
    pub base: ChartPoint,
    pub fiber: f64,
    pub velocity: DVector<f64>,
}

impl FeffermanState {
    pub fn cpoint(&self) -> DVector<f64> {
        let d = self.base.len();
        let mut p = DVector::zeros(d + 1);
        p.rows_mut(0, d).copy_from(&self.base);
        p[d] = self.fiber;
        p
    }
}

/// Null vector over a chain tangent: `ṽ = v + ṫ ∂_t` with `h(ṽ, ṽ) = 0`.
pub fn null_lift(model: &dyn Model, base: &ChartPoint, a: &DVector<C64>, fiber: f64) -> Result<FeffermanState> {
    null_lift_with(model, base, a, fiber, &FeffermanOptions::default())
}

pub fn null_lift_with(
    model: &dyn Model,
    base: &ChartPoint,
    a: &DVector<C64>,
    fiber: f64,
    opts: &FeffermanOptions,
) -> Result<FeffermanState> {
    let n = model.n();
    let d = model.dim();
    let v = chain_velocity(model, base, a)?;
    let c = curvature_with(model, base, &opts.diff)?;
    let sig = sigma_of(&c, false)?;
    let cf = &c.connection.coframe;
    let th = cf.theta.dot(&v);
    let vc = numerics::to_complex(&v);
    let q: f64 = (0..n).map(|al| cf.theta_alpha_row(al).dot(&vc).norm_sqr()).sum();
    // σ(ṽ) = −Σ|θ^α(v)|²/(2θ(v)), σ(∂_t) = 1/(n+2)
    let tdot = (n as f64 + 2.0) * (-q / (2.0 * th) - sig.dot(&v));
    let mut vel = DVector::zeros(d + 1);
    vel.rows_mut(0, d).copy_from(&v);
    vel[d] = tdot;
    Ok(FeffermanState { base: base.clone(), fiber, velocity: vel })
}

/// One sample of a geodesic on `C`.
#[derive(Debug, Clone)]
pub struct GeodesicSample {
    pub s: f64,
    pub base: ChartPoint,
    pub fiber: f64,
    pub velocity: DVector<f64>,
    pub null_defect: f64,
}

#[derive(Debug, Clone)]
pub struct GeodesicCurve {
    pub samples: Vec<GeodesicSample>,
    pub stop: Option<CrError>,
    pub max_null_defect: f64,
    /// Set when the null defect exceeded the configured tolerance.
    pub null_breach: bool,
}

pub fn integrate_null_geodesic(
    model: &dyn Model,
    initial: &FeffermanState,
    t_span: f64,
    integration: &IntegrationOptions,
    opts: &FeffermanOptions,
) -> Result<GeodesicCurve> {
    let d = model.dim();
    let m = d + 1;
    if initial.base.len() != d || initial.velocity.len() != m {
        return Err(CrError::Dimension { expected: m, got: initial.velocity.len() });
    }
    let p0 = initial.cpoint();
    let h0 = metric_with(model, &p0, opts)?;
    let defect0 = h0.eval(&initial.velocity, &initial.velocity).abs();
    if defect0 > 1e-8 {
        return Err(CrError::Residual { what: "initial null defect", residual: defect0, tol: 1e-8 });
    }
    let rhs = |_s: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let p = y.rows(0, m).into_owned();
        let v = y.rows(m, m).into_owned();
        let (_, gam) = christoffel(model, &p, opts)?;
        let mut out = DVector::zeros(2 * m);
        out.rows_mut(0, m).copy_from(&v);
        for k in 0..m {
            out[m + k] = -(v.transpose() * &gam[k] * &v)[(0, 0)];
        }
        Ok(out)
    };
    let guard = |_s: f64, y: &DVector<f64>| model.check(&y.rows(0, d).into_owned());
    let mut y0 = DVector::zeros(2 * m);
    y0.rows_mut(0, m).copy_from(&p0);
    y0.rows_mut(m, m).copy_from(&initial.velocity);
    let tr = ode::integrate(rhs, y0, t_span, integration, guard)?;
    let mut samples = Vec::with_capacity(tr.t.len());
    let mut max_def: f64 = 0.0;
    for (s, y) in tr.t.iter().zip(&tr.y) {
        let p = y.rows(0, m).into_owned();
        let v = y.rows(m, m).into_owned();
        let def = metric_with(model, &p, opts)?.eval(&v, &v).abs();
        max_def = max_def.max(def);
        samples.push(GeodesicSample { s: *s, base: p.rows(0, d).into_owned(), fiber: p[d], velocity: v, null_defect: def });
    }
    Ok(GeodesicCurve { samples, stop: tr.stop, max_null_defect: max_def, null_breach: max_def > opts.null_tolerance })
}

/// Variants of the Levi-Civita form matrix for sensitivity checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LeviCivitaVariant {
    /// Use `σ_β = iτ_β + D_{βγ̄}θ^γ̄ + C_βθ` exactly as printed instead of the
    /// torsion-free form `iτ_β − iD_{βγ̄}θ^γ̄ + C_βθ`.
    pub printed_d_phase: bool,
    /// Flip the sign of the `iθ^α` entry in the `X` row.
    pub flip_x_row: bool,
}

/// Result of comparing the Levi-Civita forms in the coframe `{θ, σ, θ^α, θ^ᾱ}`
/// with the connection of the finite-difference Christoffel symbols.
#[derive(Debug, Clone, Copy)]
pub struct LeviCivitaCheck {
    /// `max |h(ΩX, Y) + h(X, ΩY)|` over frame pairs and random directions.
    pub compatibility: f64,
    /// `max |Ω_b^a(Y) − Θ^a(∇_Y e_b)|` with `∇` from the Christoffel symbols.
    pub christoffel_agreement: f64,
}

impl LeviCivitaCheck {
    pub fn residual(&self) -> f64 {
        self.compatibility.max(self.christoffel_agreement)
    }
}

/// Coframe `(θ, σ, θ^α, θ^ᾱ)` on `C` as rows of a `(d+1) × (d+1)` matrix.
fn bundle_coframe(c: &CurvatureEval) -> Result<DMatrix<C64>> {
    let n = c.n;
    let d = 2 * n + 1;
    let s = sigma_of(c, true)?;
    let cf = &c.connection.coframe;
    let mut m = DMatrix::zeros(d + 1, d + 1);
    for i in 0..d {
        m[(0, i)] = C64::from(cf.theta[i]);
        for a in 0..n {
            m[(2 + a, i)] = cf.theta_alpha[(a, i)];
            m[(2 + n + a, i)] = cf.theta_alpha[(a, i)].conj();
        }
    }
    for i in 0..=d {
        m[(1, i)] = C64::from(s[i]);
    }
    Ok(m)
}

/// `C_β = (2/(n+2)) (A_{αβ;}^α + (i/(2(n+1))) R_{;β})`.
fn c_beta(model: &dyn Model, x: &ChartPoint, c: &CurvatureEval, opts: &DiffOptions) -> Result<DVector<C64>> {
    let n = c.n;
    let conn = &c.connection;
    // Fields A_{αβ} = conj(A^α_β̄) and R.
    let field = |y: &ChartPoint| -> Result<DVector<C64>> {
        let cy = curvature_with(model, y, opts)?;
        let mut v = DVector::zeros(n * n + 1);
        for a in 0..n {
            for b in 0..n {
                v[a * n + b] = cy.connection.torsion[(a, b)].conj();
            }
        }
        v[n * n] = C64::from(cy.scalar);
        Ok(v)
    };
    let mut out = DVector::zeros(n);
    let mut dxs = Vec::with_capacity(n);
    for m in 0..n {
        let l = conn.frame.basis.column(1 + m).into_owned();
        let dx = numerics::directional(&field, x, &l.map(|c| c.re), opts.covariant)?;
        let dy = numerics::directional(&field, x, &l.map(|c| c.im), opts.covariant)?;
        dxs.push((dx, dy));
    }
    let alow = |a: usize, b: usize| conn.torsion[(a, b)].conj();
    for b in 0..n {
        let mut div = C64::from(0.0);
        for a in 0..n {
            let (dx, dy) = &dxs[a];
            let lbar = dx[a * n + b] - dy[a * n + b] * C64::i();
            let mut s = lbar;
            for m in 0..n {
                s -= alow(m, b) * conn.omega(a, m, 1 + n + a) + alow(a, m) * conn.omega(b, m, 1 + n + a);
            }
            div += s;
        }
        let (dx, dy) = &dxs[b];
        let rb = dx[n * n] + dy[n * n] * C64::i();
        out[b] = (div + rb * C64::i() / (2.0 * (n as f64 + 1.0))) * (2.0 / (n as f64 + 2.0));
    }
    Ok(out)
}

/// Levi-Civita forms `Ω_b^a` (`∇e_b = Ω_b^a e_a`) as frame coefficients on `C`:
/// `omega[b * m + a]` is a vector of length `m` (values on the bundle frame).
fn levi_civita_forms(
    model: &dyn Model,
    x: &ChartPoint,
    c: &CurvatureEval,
    variant: LeviCivitaVariant,
    opts: &DiffOptions,
) -> Result<Vec<DVector<C64>>> {
    let n = c.n;
    let m = 2 * n + 2;
    let i = C64::i();
    let conn = &c.connection;
    let dd = d_tensor(&c.ricci, c.scalar);
    let cb = c_beta(model, x, c, opts)?;
    // bundle frame order: T(0), X(1), L_α(2+α), L_ᾱ(2+n+α); M-frame order: T(0), L(1+α), L̄(1+n+α)
    let lift = |v: &DVector<C64>, sigma_coeff: C64| {
        let mut w = DVector::zeros(m);
        w[0] = v[0];
        w[1] = sigma_coeff;
        for k in 0..2 * n {
            w[2 + k] = v[1 + k];
        }
        w
    };
    let unit = |k: usize| {
        let mut w = DVector::<C64>::zeros(m);
        w[k] = C64::from(1.0);
        w
    };
    // σ_β as bundle-frame coefficients
    let sigma_low: Vec<DVector<C64>> = (0..n)
        .map(|b| {
            let mut v = DVector::<C64>::zeros(m);
            for g in 0..n {
                // iτ_β = i conj(A^β_γ̄) θ^γ
                v[2 + g] += i * conj_c(conn.torsion[(b, g)]);
                let dcoef = if variant.printed_d_phase { dd[(b, g)] } else { -i * dd[(b, g)] };
                v[2 + n + g] += dcoef;
            }
            v[0] += cb[b];
            v
        })
        .collect();
    let conj_form = |v: &DVector<C64>| {
        let mut w = DVector::<C64>::zeros(m);
        w[0] = v[0].conj();
        w[1] = v[1].conj();
        for k in 0..n {
            w[2 + k] = v[2 + n + k].conj();
            w[2 + n + k] = v[2 + k].conj();
        }
        w
    };
    let mut om = vec![DVector::<C64>::zeros(m); m * m];
    let sx = if variant.flip_x_row { -1.0 } else { 1.0 };
    for a in 0..n {
        let sig_up = conj_form(&sigma_low[a]); // σ^α = conj σ_α
        om[2 + a] = sig_up.clone() * i; // T row: iσ^α
        om[2 + n + a] = conj_form(&sig_up) * (-i); // −iσ^ᾱ
        om[m + 2 + a] = unit(2 + a) * (i * sx); // X row: iθ^α
        om[m + 2 + n + a] = unit(2 + n + a) * (-i * sx);
    }
    for b in 0..n {
        // L_β row
        om[(2 + b) * m] = unit(2 + n + b) * (i * 0.5); // (i/2) θ_β
        om[(2 + b) * m + 1] = sigma_low[b].clone() * (i * 0.5);
        // L_β̄ row
        om[(2 + n + b) * m] = unit(2 + b) * (-i * 0.5);
        om[(2 + n + b) * m + 1] = conj_form(&sigma_low[b]) * (-i * 0.5);
        for a in 0..n {
            let mut phi = lift(&conn.omega_frame(b, a), C64::from(0.0));
            phi[0] += dd[(b, a)];
            if a == b {
                phi[1] += i;
            }
            om[(2 + b) * m + 2 + a] = phi.clone();
            om[(2 + n + b) * m + 2 + n + a] = conj_form(&phi);
        }
    }
    Ok(om)
}

fn conj_c(c: C64) -> C64 {
    c.conj()
}

/// Compare Lee's Levi-Civita forms with the Christoffel connection at `x`.
pub fn levi_civita_forms_check(model: &dyn Model, x: &ChartPoint, variant: LeviCivitaVariant) -> Result<LeviCivitaCheck> {
    let opts = FeffermanOptions::default();
    let n = model.n();
    let d = model.dim();
    let m = d + 1;
    let c = curvature_with(model, x, &opts.diff)?;
    let om = levi_civita_forms(model, x, &c, variant, &opts.diff)?;
    let cof = bundle_coframe(&c)?;
    let frame = cof.clone().try_inverse().ok_or_else(|| CrError::Degenerate("bundle coframe singular".into()))?;
    // frame metric: h(T,X) = 1, h(L_α, L_β̄) = 1/2
    let mut hf = DMatrix::<C64>::zeros(m, m);
    hf[(0, 1)] = C64::from(1.0);
    hf[(1, 0)] = C64::from(1.0);
    for a in 0..n {
        hf[(2 + a, 2 + n + a)] = C64::from(0.5);
        hf[(2 + n + a, 2 + a)] = C64::from(0.5);
    }
    // compatibility: Σ_c h_{ac} Ω_b^c + h_{bc} Ω_a^c = 0 on every frame vector
    let mut compat: f64 = 0.0;
    for a in 0..m {
        for b in 0..m {
            let mut s = DVector::<C64>::zeros(m);
            for cc in 0..m {
                s += &om[b * m + cc] * hf[(a, cc)] + &om[a * m + cc] * hf[(b, cc)];
            }
            compat = compat.max(numerics::max_abs_v(&s));
        }
    }
    // Christoffel connection
    let mut p = DVector::zeros(m);
    p.rows_mut(0, d).copy_from(x);
    let (_, gam) = christoffel(model, &p, &opts)?;
    let frame_field = |y: &DVector<f64>| -> Result<DVector<C64>> {
        let cy = curvature_with(model, &y.rows(0, d).into_owned(), &opts.diff)?;
        let f = bundle_coframe(&cy)?
            .try_inverse()
            .ok_or_else(|| CrError::Degenerate("bundle coframe singular".into()))?;
        Ok(DVector::from_iterator(m * m, f.iter().cloned()))
    };
    let mut agree: f64 = 0.0;
    for k in 0..m {
        // Y = k-th bundle frame vector, split into real directions
        let y = frame.column(k).into_owned();
        let mut dframe = DVector::<C64>::zeros(m * m);
        for (part, coef) in [(y.map(|c| c.re), C64::from(1.0)), (y.map(|c| c.im), C64::i())] {
            if part.amax() == 0.0 {
                continue;
            }
            let mut pp = part.clone();
            pp[d] = 0.0;
            if pp.amax() > 0.0 {
                dframe += numerics::directional(&frame_field, &p, &pp, opts.metric_fd)? * coef;
            }
        }
        let dframe = DMatrix::from_iterator(m, m, dframe.iter().cloned());
        for b in 0..m {
            let eb = frame.column(b).into_owned();
            let mut nab = dframe.column(b).into_owned();
            for kk in 0..m {
                let g = gam[kk].map(C64::from);
                nab[kk] += (y.transpose() * g * &eb)[(0, 0)];
            }
            let lc = &cof * nab;
            for a in 0..m {
                agree = agree.max((om[b * m + a][k] - lc[a]).norm());
            }
        }
    }
    Ok(LeviCivitaCheck { compatibility: compat, christoffel_agreement: agree })
}

/// `(n̂+2)[(1/(n+2))(iω_α^α − Rθ/(2(n+1))) − (1/(n̂+2)) f*(iω̃_A^A − R̂θ̃/(2(n̂+1)))]`
/// in the adapted pair; `ds = ((n̂+2)/(n+2)) dt + β`.
pub fn lift_form(emb: &CrEmbedding, x: &ChartPoint) -> Result<DVector<f64>> {
    lift_form_with(emb, x, &DiffOptions::default())
}

fn lift_form_with(emb: &CrEmbedding, x: &ChartPoint, opts: &DiffOptions) -> Result<DVector<f64>> {
    let n = emb.n() as f64;
    let nh = emb.n_hat() as f64;
    let src = curvature_with(emb.source().as_ref(), x, opts)?;
    let ac = adapted_connection(emb, x)?;
    let tgt = curvature_with(emb.scaled_target().as_ref(), &ac.pair.image, opts)?;
    let pulled_theta = ac.pair.differential.transpose() * &ac.pair.target.theta;
    let lhat = ac.trace_form() - pulled_theta * (tgt.scalar / (2.0 * (nh + 1.0)));
    Ok((lemma1_form_of(&src) / (n + 2.0) - lhat / (nh + 2.0)) * (nh + 2.0))
}

/// Fiber map `s(x, t) = ((n̂+2)/(n+2)) t + S(x)` along a polyline, in the
/// adapted gauge, with loop defects of the right-hand side.
#[derive(Debug, Clone)]
pub struct IsometricLift {
    pub ratio: f64,
    pub points: Vec<ChartPoint>,
    /// `S` at the polyline vertices (`S = 0` at the first).
    pub offsets: Vec<f64>,
    pub loop_defects: Vec<f64>,
}

impl IsometricLift {
    pub fn max_loop_defect(&self) -> f64 {
        self.loop_defects.iter().cloned().fold(0.0, f64::max)
    }

    pub fn s(&self, vertex: usize, t: f64) -> f64 {
        self.ratio * t + self.offsets[vertex]
    }
}

pub fn isometric_lift(emb: &CrEmbedding, path: &[ChartPoint], loops: &[PolygonLoop], nodes: usize) -> Result<IsometricLift> {
    let ratio = (emb.n_hat() as f64 + 2.0) / (emb.n() as f64 + 2.0);
    let (xs, ws) = numerics::gauss_legendre(nodes);
    let mut offsets = Vec::with_capacity(path.len());
    if !path.is_empty() {
        offsets.push(0.0);
    }
    for w in path.windows(2) {
        let dv = &w[1] - &w[0];
        let mut s = *offsets.last().expect("nonempty");
        for (xn, wn) in xs.iter().zip(&ws) {
            let p = &w[0] + &dv * (0.5 * (xn + 1.0));
            s += 0.5 * wn * lift_form(emb, &p)?.dot(&dv);
        }
        offsets.push(s);
    }
    let loop_defects = loops.iter().map(|l| Ok(l.integrate(|p| lift_form(emb, p))?.abs())).collect::<Result<Vec<_>>>()?;
    Ok(IsometricLift { ratio, points: path.to_vec(), offsets, loop_defects })
}

fn arg_det_u(emb: &CrEmbedding, y: &ChartPoint, completion: &[usize], reference: f64) -> Result<f64> {
    let u = adapted_unitary(emb, y, completion)?;
    let a = u.determinant().arg();
    // unwrap against the value at the centre
    let k = ((reference - a) / std::f64::consts::TAU).round();
    Ok(a + k * std::f64::consts::TAU)
}

/// `max |F*ĥ(u, v) − h(u, v)|` over random vector pairs at `x`, where
/// `F(x, t) = (f(x), s(x, t) + arg det U(x))` carries the adapted fiber
/// coordinate to the one of the unrotated scaled target coframe.
pub fn lift_isometry_defect<R: Rng + ?Sized>(emb: &CrEmbedding, x: &ChartPoint, pairs: usize, rng: &mut R) -> Result<f64> {
    let opts = FeffermanOptions::default();
    let d = x.len();
    let dh = emb.n_hat() * 2 + 1;
    let ratio = (emb.n_hat() as f64 + 2.0) / (emb.n() as f64 + 2.0);
    let pair = adapt_coframes(emb, x)?;
    let a0 = pair.u.determinant().arg();
    let comp = pair.completion.clone();
    let phase = |y: &ChartPoint| Ok(DVector::from_element(1, C64::from(arg_det_u(emb, y, &comp, a0)?)));
    let beta = lift_form(emb, x)?;
    let mut jf = DMatrix::zeros(dh + 1, d + 1);
    jf.view_mut((0, 0), (dh, d)).copy_from(&pair.differential);
    for k in 0..d {
        let mut e = DVector::zeros(d);
        e[k] = 1.0;
        jf[(dh, k)] = beta[k] + numerics::directional(&phase, x, &e, opts.metric_fd)?[0].re;
    }
    jf[(dh, d)] = ratio;
    let mut p = DVector::zeros(d + 1);
    p.rows_mut(0, d).copy_from(x);
    let h = metric_with(emb.source().as_ref(), &p, &opts)?;
    let mut q = DVector::zeros(dh + 1);
    q.rows_mut(0, dh).copy_from(&pair.image);
    let hh = metric_with(emb.scaled_target().as_ref(), &q, &opts)?;
    let pulled = jf.transpose() * &hh.h * &jf;
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let u = DVector::from_fn(d + 1, |_, _| rng.gen_range(-1.0..1.0));
        let v = DVector::from_fn(d + 1, |_, _| rng.gen_range(-1.0..1.0));
        let a = (u.transpose() * &pulled * &v)[(0, 0)];
        worst = worst.max((a - h.eval(&u, &v)).abs());
    }
    Ok(worst)
}
