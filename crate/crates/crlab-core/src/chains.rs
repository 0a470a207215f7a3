//! The chain ODE, its integrator, and the chain residual of arbitrary curves.

use nalgebra::{DMatrix, DVector};

use crate::curvature::{chern_moser_with, ChernMoserEval, DiffOptions};
use crate::models::{ChartPoint, Model};
use crate::numerics;
use crate::ode::{self, IntegrationOptions};
use crate::{CrError, Result, C64};

/// Default blow-up bound on `|a|`.
pub const BLOWUP_BOUND: f64 = 1e3;

#[derive(Debug, Clone)]
pub struct ChainState {
    pub point: ChartPoint,
    pub a: DVector<C64>,
}

/// One sample of a curve on `M`.
#[derive(Debug, Clone)]
pub struct CurveSample {
    pub t: f64,
    pub point: ChartPoint,
    /// Chart velocity `dγ/dt`.
    pub tangent: DVector<f64>,
    pub ambient: Option<DVector<C64>>,
}

/// `d/dt` of a chain state.
#[derive(Debug, Clone)]
pub struct ChainDerivative {
    pub point: DVector<f64>,
    pub a: DVector<C64>,
}

/// `γ' = T + 2a^α L_α + 2ā^ᾱ L_ᾱ` at a point.
pub fn chain_velocity(model: &dyn Model, point: &ChartPoint, a: &DVector<C64>) -> Result<DVector<f64>> {
    let fr = model.coframe(point)?.frame()?;
    Ok(velocity_from_frame(&fr.t, &fr.l, a))
}

fn velocity_from_frame(t: &DVector<f64>, l: &DMatrix<C64>, a: &DVector<C64>) -> DVector<f64> {
    let la = l * a;
    t + la.map(|c| 4.0 * c.re)
}

/// Chain right-hand side with `θ(γ') = 1`:
/// `da^α/dt = 4i a^α|a|² − φ_β^α(γ') a^β − ½ φ^α(γ')`.
pub fn chain_rhs(model: &dyn Model, state: &ChainState) -> Result<ChainDerivative> {
    chain_rhs_with(model, state, &DiffOptions::default())
}

pub fn chain_rhs_with(model: &dyn Model, state: &ChainState, opts: &DiffOptions) -> Result<ChainDerivative> {
    let cm = chern_moser_with(model, &state.point, opts)?;
    let fr = &cm.curvature.connection.frame;
    let v = velocity_from_frame(&fr.t, &fr.l, &state.a);
    let a_dot = a_equation(&cm, &state.a, &frame_velocity(&state.a));
    Ok(ChainDerivative { point: v, a: a_dot })
}

/// Frame components `(1, 2a, 2ā)` of the chain velocity.
fn frame_velocity(a: &DVector<C64>) -> DVector<C64> {
    let n = a.len();
    let mut v = DVector::zeros(2 * n + 1);
    v[0] = C64::from(1.0);
    for k in 0..n {
        v[1 + k] = a[k] * 2.0;
        v[1 + n + k] = a[k].conj() * 2.0;
    }
    v
}

/// Right-hand side of the `a`-equation for a velocity given in frame components
/// (normalized so that `θ(γ') = 1`).
fn a_equation(cm: &ChernMoserEval, a: &DVector<C64>, vf: &DVector<C64>) -> DVector<C64> {
    let n = a.len();
    let a2 = a.norm_squared();
    DVector::from_fn(n, |al, _| {
        let mut s = C64::i() * 4.0 * a[al] * a2;
        for b in 0..n {
            s -= cm.phi_matrix[b * n + al].dot(vf) * a[b];
        }
        s - cm.phi_vector[al].dot(vf) * 0.5
    })
}

fn pack(state: &ChainState) -> DVector<f64> {
    let d = state.point.len();
    let n = state.a.len();
    let mut y = DVector::zeros(d + 2 * n);
    y.rows_mut(0, d).copy_from(&state.point);
    for k in 0..n {
        y[d + 2 * k] = state.a[k].re;
        y[d + 2 * k + 1] = state.a[k].im;
    }
    y
}

fn unpack(y: &DVector<f64>, d: usize, n: usize) -> ChainState {
    ChainState {
        point: y.rows(0, d).into_owned(),
        a: DVector::from_fn(n, |k, _| C64::new(y[d + 2 * k], y[d + 2 * k + 1])),
    }
}

/// An integrated chain.
#[derive(Debug, Clone)]
pub struct ChainCurve {
    pub samples: Vec<CurveSample>,
    pub states: Vec<ChainState>,
    /// Reason for halting before the end of the span.
    pub stop: Option<CrError>,
}

impl ChainCurve {
    pub fn completed(&self) -> bool {
        self.stop.is_none()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ChainOptions {
    pub integration: IntegrationOptions,
    pub blowup: f64,
    pub diff: DiffOptions,
}

impl Default for ChainOptions {
    fn default() -> Self {
        Self { integration: IntegrationOptions::default(), blowup: BLOWUP_BOUND, diff: DiffOptions::default() }
    }
}

impl ChainOptions {
    pub fn rk4(step: f64) -> Self {
        Self { integration: IntegrationOptions::rk4(step), ..Self::default() }
    }
}

pub fn integrate_chain(model: &dyn Model, initial: &ChainState, t_span: f64, opts: &ChainOptions) -> Result<ChainCurve> {
    let d = model.dim();
    let n = model.n();
    if initial.point.len() != d || initial.a.len() != n {
        return Err(CrError::Dimension { expected: d + n, got: initial.point.len() + initial.a.len() });
    }
    model.check(&initial.point)?;
    let rhs = |_t: f64, y: &DVector<f64>| -> Result<DVector<f64>> {
        let s = unpack(y, d, n);
        let dv = chain_rhs_with(model, &s, &opts.diff)?;
        Ok(pack(&ChainState { point: dv.point, a: dv.a }))
    };
    let guard = |t: f64, y: &DVector<f64>| -> Result<()> {
        let s = unpack(y, d, n);
        let norm = s.a.norm();
        if !(norm <= opts.blowup) {
            return Err(CrError::BlowUp { t, norm });
        }
        model.check(&s.point)
    };
    let tr = ode::integrate(rhs, pack(initial), t_span, &opts.integration, guard)?;
    let mut samples = Vec::with_capacity(tr.t.len());
    let mut states = Vec::with_capacity(tr.t.len());
    for (t, y) in tr.t.iter().zip(&tr.y) {
        let s = unpack(y, d, n);
        let tangent = chain_velocity(model, &s.point, &s.a)?;
        samples.push(CurveSample { t: *t, point: s.point.clone(), tangent, ambient: model.ambient(&s.point) });
        states.push(s);
    }
    Ok(ChainCurve { samples, states, stop: tr.stop })
}

/// Pointwise defect of the chain equation along a sampled transverse curve.
///
/// `a^α = θ^α(γ')/(2θ(γ'))`; `da/ds = (da/dt)/θ(γ')` with `da/dt` from
/// five-point differences on the sample grid.
pub fn chain_residual_profile(model: &dyn Model, curve: &[CurveSample], opts: &DiffOptions) -> Result<Vec<f64>> {
    let mut theta_v = Vec::with_capacity(curve.len());
    let mut avals = Vec::with_capacity(curve.len());
    let mut cms = Vec::with_capacity(curve.len());
    for (i, s) in curve.iter().enumerate() {
        let cm = chern_moser_with(model, &s.point, opts)?;
        let fc = cm.curvature.connection.frame_components(&numerics::to_complex(&s.tangent));
        let th = fc[0].re;
        if th.abs() <= 1e-6 {
            return Err(CrError::NotTransverse { index: i, value: th.abs() });
        }
        let n = model.n();
        avals.push(DVector::from_fn(n, |k, _| fc[1 + k] / (2.0 * th)));
        theta_v.push(th);
        cms.push(cm);
    }
    let t: Vec<f64> = curve.iter().map(|s| s.t).collect();
    let da = numerics::differentiate_samples(&t, &avals)?;
    Ok((0..curve.len())
        .map(|i| {
            let a = &avals[i];
            let lhs = &da[i] / C64::from(theta_v[i]);
            let rhs = a_equation(&cms[i], a, &frame_velocity(a));
            numerics::max_abs_v(&(lhs - rhs))
        })
        .collect())
}

/// Sup-norm of [`chain_residual_profile`].
pub fn chain_residual(model: &dyn Model, curve: &[CurveSample]) -> Result<f64> {
    Ok(chain_residual_profile(model, curve, &DiffOptions::default())?.into_iter().fold(0.0, f64::max))
}

/// Largest distance of the points from their best-fitting affine real
/// `k`-plane (principal axes of the second moment).
pub fn affine_plane_deviation(points: &[DVector<C64>], k: usize) -> f64 {
    let m = points.len();
    if m == 0 {
        return 0.0;
    }
    let real: Vec<DVector<f64>> = points
        .iter()
        .map(|z| DVector::from_iterator(2 * z.len(), z.iter().flat_map(|c| [c.re, c.im])))
        .collect();
    let dim = real[0].len();
    let mean = real.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / m as f64;
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for p in &real {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    let eig = cov.symmetric_eigen();
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|a, b| eig.eigenvalues[*b].partial_cmp(&eig.eigenvalues[*a]).unwrap());
    let basis: Vec<DVector<f64>> = idx[..k.min(dim)].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    real.iter()
        .map(|p| {
            let mut c = p - &mean;
            for b in &basis {
                c -= b * b.dot(&c);
            }
            c.norm()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{heisenberg_model, sphere_model};

    fn st(point: Vec<f64>, a: Vec<C64>) -> ChainState {
        ChainState { point: DVector::from_vec(point), a: DVector::from_vec(a) }
    }

    #[test]
    fn heisenberg_rhs_at_rest() {
        let m = heisenberg_model(1).unwrap();
        let d = chain_rhs(&m, &st(vec![0.0; 3], vec![C64::from(0.0)])).unwrap();
        assert_eq!(d.point.as_slice(), &[0.0, 0.0, 1.0]);
        assert_eq!(d.a[0], C64::from(0.0));
    }

    #[test]
    fn heisenberg_rhs_rotates_a() {
        let m = heisenberg_model(2).unwrap();
        let a = vec![C64::new(0.3, -0.1), C64::new(0.2, 0.4)];
        let s = st(vec![0.1, 0.2, -0.3, 0.4, 0.5], a.clone());
        let d = chain_rhs(&m, &s).unwrap();
        let a2 = s.a.norm_squared();
        for k in 0..2 {
            assert!((d.a[k] - C64::i() * 4.0 * a[k] * a2).norm() < 1e-12);
        }
        // d|a|²/dt = 2 Re(ā·a') = 0
        assert!(s.a.dotc(&d.a).re.abs() < 1e-12);
    }

    #[test]
    fn chain_velocity_is_normalized() {
        let m = sphere_model(2).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.2, -0.1, 0.3, 0.2]);
        let a = DVector::from_vec(vec![C64::new(0.2, 0.1), C64::new(-0.1, 0.05)]);
        let v = chain_velocity(&m, &x, &a).unwrap();
        let cf = m.coframe(&x).unwrap();
        assert!((cf.theta.dot(&v) - 1.0).abs() < 1e-12);
        for k in 0..2 {
            let ta = cf.theta_alpha_row(k).dot(&numerics::to_complex(&v));
            assert!((ta - a[k] * 2.0).norm() < 1e-12);
        }
    }

    #[test]
    fn heisenberg_vertical_chain() {
        let m = heisenberg_model(1).unwrap();
        let c = integrate_chain(&m, &st(vec![0.0; 3], vec![C64::from(0.0)]), 1.0, &ChainOptions::rk4(1e-2)).unwrap();
        assert!(c.completed());
        for s in &c.samples {
            assert!(s.point[0].abs() < 1e-12 && s.point[1].abs() < 1e-12);
            assert!((s.point[2] - s.t).abs() < 1e-12);
        }
    }

    #[test]
    fn heisenberg_closed_form() {
        let m = heisenberg_model(1).unwrap();
        let a0 = C64::from(0.3);
        let c = integrate_chain(&m, &st(vec![0.0; 3], vec![a0]), 2.0, &ChainOptions::rk4(1e-3)).unwrap();
        for (s, state) in c.samples.iter().zip(&c.states) {
            let exact = a0 * C64::from_polar(1.0, 4.0 * a0.norm_sqr() * s.t);
            assert!((state.a[0].norm() - 0.3).abs() < 1e-9);
            assert!((state.a[0] - exact).norm() < 1e-7);
        }
    }

    #[test]
    fn blowup_and_domain_exit_halt() {
        let m = heisenberg_model(1).unwrap();
        let mut o = ChainOptions::rk4(1e-2);
        o.blowup = 0.1;
        let c = integrate_chain(&m, &st(vec![0.0; 3], vec![C64::from(0.3)]), 1.0, &o);
        assert!(matches!(c, Err(CrError::BlowUp { .. })));
        let s = sphere_model(1).unwrap();
        let c = integrate_chain(&s, &st(vec![0.0, 0.0, 95.0], vec![C64::from(0.0)]), 10.0, &ChainOptions::rk4(0.05)).unwrap();
        assert!(matches!(c.stop, Some(CrError::DomainExit { .. })));
    }

    #[test]
    fn heisenberg_straight_line_is_not_a_chain() {
        let m = heisenberg_model(1).unwrap();
        let curve: Vec<CurveSample> = (0..21)
            .map(|i| {
                let t = i as f64 * 0.05;
                CurveSample {
                    t,
                    point: DVector::from_vec(vec![0.5 * t, 0.0, t]),
                    tangent: DVector::from_vec(vec![0.5, 0.0, 1.0]),
                    ambient: None,
                }
            })
            .collect();
        let r = chain_residual(&m, &curve).unwrap();
        // a = √2/4 is constant, so the defect is 4|a|³.
        assert!((r - 4.0 * (2f64.sqrt() / 4.0).powi(3)).abs() < 1e-10);
        assert!(r > 0.1);
    }

    #[test]
    fn residual_rejects_tangential_curves() {
        let m = heisenberg_model(1).unwrap();
        let curve: Vec<CurveSample> = (0..6)
            .map(|i| CurveSample {
                t: i as f64,
                point: DVector::from_vec(vec![i as f64 * 0.1, 0.0, 0.0]),
                tangent: DVector::from_vec(vec![0.1, 0.0, 0.0]),
                ambient: None,
            })
            .collect();
        assert!(matches!(chain_residual(&m, &curve), Err(CrError::NotTransverse { .. })));
    }

    #[test]
    fn plane_fit_detects_curvature_out_of_plane() {
        let circle: Vec<DVector<C64>> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.1;
                DVector::from_vec(vec![C64::new(1.0 + t.cos(), t.sin()), C64::new(0.5, 0.2)])
            })
            .collect();
        assert!(affine_plane_deviation(&circle, 2) < 1e-12);
        let helix: Vec<DVector<C64>> = (0..50)
            .map(|i| {
                let t = i as f64 * 0.1;
                DVector::from_vec(vec![C64::new(t.cos(), t.sin()), C64::new(0.3 * t, 0.0)])
            })
            .collect();
        assert!(affine_plane_deviation(&helix, 2) > 0.1);
    }
}
