//! Exterior derivatives and the pointwise Webster connection.
//!
//! Connection forms are stored against the admissible co-basis
//! `{θ, θ^1 … θ^n, θ^1̄ … θ^n̄}`: the coefficient with index `k` is the value of
//! the form on the `k`-th frame vector `T, L_1 … L_n, L_1̄ … L_n̄`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::models::{ChartPoint, CoframeDerivs, CoframeEval, FrameEval, Model};
use crate::numerics::{self, FdSpec};
use crate::{CrError, Result, C64};

/// Coefficients of a 1- or 2-form in the chart co-basis at a point.
#[derive(Debug, Clone)]
pub struct FormEval {
    pub degree: u8,
    /// `d × 1` for 1-forms, antisymmetric `d × d` for 2-forms.
    pub coeffs: DMatrix<C64>,
}

impl FormEval {
    pub fn one(v: DVector<C64>) -> Self {
        let d = v.len();
        Self { degree: 1, coeffs: DMatrix::from_column_slice(d, 1, v.as_slice()) }
    }

    pub fn two(m: DMatrix<C64>) -> Self {
        Self { degree: 2, coeffs: m }
    }

    /// `max |Ω + Ωᵀ|` for 2-forms, 0 for 1-forms.
    pub fn antisymmetry_defect(&self) -> f64 {
        if self.degree == 2 {
            numerics::max_abs(&(&self.coeffs + self.coeffs.transpose()))
        } else {
            0.0
        }
    }

    /// Value of a 2-form on a pair of vectors.
    pub fn eval2(&self, x: &DVector<C64>, y: &DVector<C64>) -> C64 {
        (x.transpose() * &self.coeffs * y)[(0, 0)]
    }
}

/// `a ∧ b` for chart 1-forms.
pub fn wedge(a: &DVector<C64>, b: &DVector<C64>) -> DMatrix<C64> {
    a * b.transpose() - b * a.transpose()
}

/// `d` of a 1-form field by central differences: `(dω)_{ki} = ∂_k ω_i − ∂_i ω_k`.
pub fn exterior_derivative<F>(form_field: &F, x: &ChartPoint, fd: FdSpec) -> Result<FormEval>
where
    F: Fn(&ChartPoint) -> Result<DVector<C64>> + ?Sized,
{
    let j = numerics::jacobian(form_field, x, fd)?;
    Ok(FormEval::two(j.transpose() - j))
}

/// The constant least-squares system behind the connection solve for a given `n`.
pub struct ConnectionSystem {
    n: usize,
    d: usize,
    pairs: Vec<(usize, usize)>,
    pinv: DMatrix<f64>,
    matrix: DMatrix<f64>,
}

impl ConnectionSystem {
    fn build(n: usize) -> Result<Self> {
        let d = 2 * n + 1;
        let pairs: Vec<(usize, usize)> = (0..d).flat_map(|a| (a + 1..d).map(move |b| (a, b))).collect();
        let mut sys = Self { n, d, pairs, pinv: DMatrix::zeros(0, 0), matrix: DMatrix::zeros(0, 0) };
        let unknowns = sys.unknowns();
        let cols: Vec<DVector<f64>> = (0..unknowns)
            .map(|i| {
                let mut e = DVector::zeros(unknowns);
                e[i] = 1.0;
                let (g, a) = sys.assemble(&e);
                sys.apply(&g, &a)
            })
            .collect();
        let m = DMatrix::from_columns(&cols);
        let svd = m.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd.singular_values.iter().filter(|s| **s > 1e-10 * smax).count();
        if rank < unknowns {
            return Err(CrError::RankDeficient { rank, expected: unknowns });
        }
        sys.pinv = svd.pseudo_inverse(1e-12 * smax).map_err(|e| CrError::Degenerate(e.to_string()))?;
        sys.matrix = m;
        Ok(sys)
    }

    /// Shared system for CR dimension `n`.
    pub fn get(n: usize) -> Result<Arc<ConnectionSystem>> {
        static CACHE: OnceLock<Mutex<HashMap<usize, Arc<ConnectionSystem>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(s) = cache.lock().expect("connection cache poisoned").get(&n) {
            return Ok(s.clone());
        }
        let s = Arc::new(Self::build(n)?);
        cache.lock().expect("connection cache poisoned").insert(n, s.clone());
        Ok(s)
    }

    /// Number of real unknowns after imposing skew-hermitian symmetry.
    pub fn unknowns(&self) -> usize {
        let (n, d) = (self.n, self.d);
        n * n * d + 2 * n * n
    }

    pub fn equations(&self) -> usize {
        2 * self.n * self.pairs.len()
    }

    fn conj_index(&self, k: usize) -> usize {
        let n = self.n;
        if k == 0 {
            0
        } else if k <= n {
            k + n
        } else {
            k - n
        }
    }

    /// Real parameters → `(Γ[α][β][k], A[β][μ])` with `ω_β^α = −conj ω_α^β` built in.
    fn assemble(&self, x: &DVector<f64>) -> (Vec<C64>, DMatrix<C64>) {
        let (n, d) = (self.n, self.d);
        let mut g = vec![C64::from(0.0); n * n * d];
        let at = |a: usize, b: usize, k: usize| (a * n + b) * d + k;
        let mut idx = 0;
        for a in 0..n {
            for b in a + 1..n {
                for k in 0..d {
                    let c = C64::new(x[idx], x[idx + 1]);
                    idx += 2;
                    g[at(a, b, k)] = c;
                    g[at(b, a, self.conj_index(k))] = -c.conj();
                }
            }
            g[at(a, a, 0)] = C64::new(0.0, x[idx]);
            idx += 1;
            for m in 0..n {
                let c = C64::new(x[idx], x[idx + 1]);
                idx += 2;
                g[at(a, a, 1 + m)] = c;
                g[at(a, a, 1 + n + m)] = -c.conj();
            }
        }
        let mut tors = DMatrix::zeros(n, n);
        for b in 0..n {
            for m in 0..n {
                tors[(b, m)] = C64::new(x[idx], x[idx + 1]);
                idx += 2;
            }
        }
        (g, tors)
    }

    /// Frame values of `θ^α ∧ ω_α^β + θ ∧ τ^β` on all pairs `(e_a, e_b)`, `a < b`.
    fn apply(&self, g: &[C64], tors: &DMatrix<C64>) -> DVector<f64> {
        let (n, d) = (self.n, self.d);
        let mut out = DVector::zeros(self.equations());
        let mut row = 0;
        for b in 0..n {
            let tau = |k: usize| if k > n { tors[(b, k - 1 - n)] } else { C64::from(0.0) };
            for &(ea, eb) in &self.pairs {
                let mut v = C64::from(0.0);
                if (1..=n).contains(&ea) {
                    v += g[((ea - 1) * n + b) * d + eb];
                }
                if (1..=n).contains(&eb) {
                    v -= g[((eb - 1) * n + b) * d + ea];
                }
                if ea == 0 {
                    v += tau(eb);
                }
                out[row] = v.re;
                out[row + 1] = v.im;
                row += 2;
            }
        }
        out
    }

    fn rhs(&self, frame: &FrameEval, derivs: &CoframeDerivs) -> DVector<f64> {
        let mut out = DVector::zeros(self.equations());
        let mut row = 0;
        for b in 0..self.n {
            let om = derivs.d_theta_alpha(b);
            let om_e = &om * &frame.basis;
            for &(ea, eb) in &self.pairs {
                let v = frame.basis.column(ea).dot(&om_e.column(eb));
                out[row] = v.re;
                out[row + 1] = v.im;
                row += 2;
            }
        }
        out
    }
}

/// Webster connection `ω_α^β` and torsion `A^β_μ̄` at a point.
#[derive(Debug, Clone)]
pub struct ConnectionEval {
    pub n: usize,
    /// `gamma[(α n + β) d + k] = ω_α^β(e_k)`.
    pub gamma: Vec<C64>,
    /// `torsion[(β, μ)] = A^β_μ̄`.
    pub torsion: DMatrix<C64>,
    /// Least-squares residual of the structure equations (max abs).
    pub residual: f64,
    pub coframe: CoframeEval,
    pub frame: FrameEval,
}

/// Solve `dθ^β = θ^α ∧ ω_α^β + θ ∧ τ^β`, `ω_α^β + conj ω_β^α = 0` at `x`.
pub fn solve_connection(model: &dyn Model, x: &ChartPoint) -> Result<ConnectionEval> {
    let coframe = model.coframe(x)?;
    let derivs = model.coframe_derivatives(x)?;
    solve_with(model.n(), coframe, &derivs)
}

/// Connection from a coframe and its derivatives.
pub fn solve_with(n: usize, coframe: CoframeEval, derivs: &CoframeDerivs) -> Result<ConnectionEval> {
    let sys = ConnectionSystem::get(n)?;
    let frame = coframe.frame()?;
    let b = sys.rhs(&frame, derivs);
    let p = &sys.pinv * &b;
    let residual = (&sys.matrix * &p - &b).amax();
    let (gamma, torsion) = sys.assemble(&p);
    Ok(ConnectionEval { n, gamma, torsion, residual, coframe, frame })
}

impl ConnectionEval {
    pub fn dim(&self) -> usize {
        2 * self.n + 1
    }

    /// `ω_α^β(e_k)`.
    pub fn omega(&self, alpha: usize, beta: usize, k: usize) -> C64 {
        self.gamma[(alpha * self.n + beta) * self.dim() + k]
    }

    /// Frame coefficients of `ω_α^β`.
    pub fn omega_frame(&self, alpha: usize, beta: usize) -> DVector<C64> {
        let d = self.dim();
        let s = (alpha * self.n + beta) * d;
        DVector::from_column_slice(&self.gamma[s..s + d])
    }

    /// Frame coefficients of `τ^β = A^β_μ̄ θ^μ̄`.
    pub fn tau_frame(&self, beta: usize) -> DVector<C64> {
        let n = self.n;
        let mut v = DVector::zeros(self.dim());
        for m in 0..n {
            v[1 + n + m] = self.torsion[(beta, m)];
        }
        v
    }

    /// Chart covector of a form given by frame coefficients.
    pub fn to_chart(&self, frame_coeffs: &DVector<C64>) -> DVector<C64> {
        self.coframe.matrix().transpose() * frame_coeffs
    }

    pub fn omega_chart(&self, alpha: usize, beta: usize) -> DVector<C64> {
        self.to_chart(&self.omega_frame(alpha, beta))
    }

    pub fn tau_chart(&self, beta: usize) -> DVector<C64> {
        self.to_chart(&self.tau_frame(beta))
    }

    /// `ω_α^α` summed, as a chart covector.
    pub fn omega_trace_chart(&self) -> DVector<C64> {
        let mut v = DVector::zeros(self.dim());
        for a in 0..self.n {
            v += self.omega_chart(a, a);
        }
        v
    }

    /// Frame components of a chart vector: `(θ(v), θ^α(v), θ^ᾱ(v))`.
    pub fn frame_components(&self, v: &DVector<C64>) -> DVector<C64> {
        self.coframe.matrix() * v
    }

    /// `ω_α^β(v)` for a chart vector `v`.
    pub fn omega_on(&self, alpha: usize, beta: usize, v: &DVector<C64>) -> C64 {
        self.omega_frame(alpha, beta).dot(&self.frame_components(v))
    }

    /// `max |ω_α^β + conj ω_β^α|` evaluated on the frame.
    pub fn skew_hermitian_defect(&self) -> f64 {
        let n = self.n;
        let d = self.dim();
        let mut m: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                for k in 0..d {
                    let kb = if k == 0 { 0 } else if k <= n { k + n } else { k - n };
                    m = m.max((self.omega(a, b, k) + self.omega(b, a, kb).conj()).norm());
                }
            }
        }
        m
    }

    /// `max |A^{αβ} − A^{βα}|` (indices raised with the identity Levi form).
    pub fn torsion_symmetry_defect(&self) -> f64 {
        numerics::max_abs(&(&self.torsion - self.torsion.transpose()))
    }

    /// `max |dθ^β − θ^α ∧ ω_α^β − θ ∧ τ^β|` over chart components, with `dθ^β`
    /// taken from `derivs` (which may differ from the derivatives used to solve).
    pub fn structure_residual_against(&self, derivs: &CoframeDerivs) -> f64 {
        let n = self.n;
        let theta = numerics::to_complex(&self.coframe.theta);
        let mut worst: f64 = 0.0;
        for b in 0..n {
            let mut r = derivs.d_theta_alpha(b);
            for a in 0..n {
                r -= wedge(&self.coframe.theta_alpha_row(a), &self.omega_chart(a, b));
            }
            r -= wedge(&theta, &self.tau_chart(b));
            worst = worst.max(numerics::max_abs(&r));
        }
        worst
    }

    /// Add a symmetry-respecting perturbation given by real parameters.
    pub fn perturbed(&self, delta: &DVector<f64>) -> Result<ConnectionEval> {
        let sys = ConnectionSystem::get(self.n)?;
        if delta.len() != sys.unknowns() {
            return Err(CrError::Dimension { expected: sys.unknowns(), got: delta.len() });
        }
        let (g, t) = sys.assemble(delta);
        let mut out = self.clone();
        for (a, b) in out.gamma.iter_mut().zip(g) {
            *a += b;
        }
        out.torsion += t;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{heisenberg_model, sample_point, sphere_model, FdModel};
    use crate::numerics::Stencil;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn system_sizes() {
        let s = ConnectionSystem::get(1).unwrap();
        assert_eq!((s.unknowns(), s.equations()), (5, 6));
        let s = ConnectionSystem::get(2).unwrap();
        assert_eq!((s.unknowns(), s.equations()), (28, 40));
    }

    #[test]
    fn constant_form_is_closed() {
        let f = |_: &ChartPoint| Ok(DVector::from_vec(vec![C64::new(1.0, 2.0), C64::from(-3.0), C64::from(0.5)]));
        let d = exterior_derivative(&f, &DVector::zeros(3), FdSpec::new(1e-5, Stencil::Central2)).unwrap();
        assert!(numerics::max_abs(&d.coeffs) < 1e-12);
    }

    #[test]
    fn heisenberg_contact_form_derivative() {
        let m = heisenberg_model(2).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.7, 0.4]);
        let f = |y: &ChartPoint| Ok(numerics::to_complex(&m.coframe(y)?.theta));
        let d = exterior_derivative(&f, &x, FdSpec::new(1e-5, Stencil::Central2)).unwrap();
        // 2i Σ dz∧dz̄ = 4 Σ dx∧dy
        let mut expected = DMatrix::<C64>::zeros(5, 5);
        for a in 0..2 {
            expected[(2 * a, 2 * a + 1)] = C64::from(4.0);
            expected[(2 * a + 1, 2 * a)] = C64::from(-4.0);
        }
        assert!(numerics::max_abs(&(d.coeffs - expected)) < 1e-10);
    }

    #[test]
    fn product_rule_oracle() {
        // f dg with f = x0 x2, g = sin(x1): d(f dg) = df ∧ dg.
        let x = DVector::from_vec(vec![0.4, -0.3, 1.2]);
        let field = |y: &ChartPoint| {
            let f = y[0] * y[2];
            Ok(DVector::from_vec(vec![C64::from(0.0), C64::from(f * y[1].cos()), C64::from(0.0)]))
        };
        let d = exterior_derivative(&field, &x, FdSpec::new(1e-5, Stencil::Central2)).unwrap();
        let df = DVector::from_vec(vec![C64::from(x[2]), C64::from(0.0), C64::from(x[0])]);
        let dg = DVector::from_vec(vec![C64::from(0.0), C64::from(x[1].cos()), C64::from(0.0)]);
        assert!(numerics::max_abs(&(d.coeffs.clone() - wedge(&df, &dg))) < 1e-7);
        assert!(d.antisymmetry_defect() == 0.0);
    }

    #[test]
    fn heisenberg_connection_vanishes() {
        let m = heisenberg_model(2).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let x = sample_point(&m, &mut r, 1.5);
            let c = solve_connection(&m, &x).unwrap();
            assert!(c.gamma.iter().all(|g| g.norm() < 1e-14));
            assert!(numerics::max_abs(&c.torsion) < 1e-14);
        }
    }

    #[test]
    fn sphere_connection_satisfies_structure_equations() {
        for n in 1..=2 {
            let m = sphere_model(n).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..10 {
                let x = sample_point(&m, &mut r, 0.8);
                let c = solve_connection(&m, &x).unwrap();
                let dv = m.coframe_derivatives(&x).unwrap();
                assert!(c.structure_residual_against(&dv) < 1e-12);
                assert!(c.residual < 1e-12);
                assert!(c.skew_hermitian_defect() < 1e-14);
                assert!(numerics::max_abs(&c.torsion) < 1e-10, "sphere torsion");
            }
        }
    }

    #[test]
    fn perturbations_increase_the_residual() {
        let m = sphere_model(2).unwrap();
        let x = DVector::from_vec(vec![0.1, 0.3, -0.2, 0.2, 0.5]);
        let c = solve_connection(&m, &x).unwrap();
        let dv = m.coframe_derivatives(&x).unwrap();
        let base = c.structure_residual_against(&dv);
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let k = ConnectionSystem::get(2).unwrap().unknowns();
        for _ in 0..20 {
            let mut delta = DVector::from_fn(k, |_, _| r.gen_range(-1.0..1.0));
            delta *= 1e-3 / delta.norm();
            let p = c.perturbed(&delta).unwrap();
            assert!(p.structure_residual_against(&dv) > base + 1e-6);
        }
    }

    #[test]
    fn fd_residual_converges_at_second_order() {
        let s: Arc<dyn Model> = Arc::new(sphere_model(1).unwrap());
        let x = DVector::from_vec(vec![0.3, -0.4, 0.6]);
        let dv = s.coframe_derivatives(&x).unwrap();
        let err = |h: f64| {
            let m = FdModel::central(s.clone(), h);
            solve_connection(&m, &x).unwrap().structure_residual_against(&dv)
        };
        let ratio = err(2e-2) / err(1e-2);
        assert!((ratio - 4.0).abs() < 1.2, "ratio {ratio}");
    }
}
