//! Pseudohermitian curvature, Ricci and scalar curvature, the pseudo-Einstein
//! residual, Lemma-1 closedness defects and the Chern–Moser quantities.

use nalgebra::{DMatrix, DVector};

use crate::connection::{solve_connection, ConnectionEval};
use crate::models::{ChartPoint, Model};
use crate::numerics::{self, FdSpec, Stencil};
use crate::{CrError, Result, C64};

/// Finite-difference settings for second-level derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiffOptions {
    /// Differentiation of connection forms (curvature).
    pub curvature: FdSpec,
    /// Differentiation of tensor fields built from curvature (covariant derivatives).
    pub covariant: FdSpec,
}

impl Default for DiffOptions {
    fn default() -> Self {
        Self {
            curvature: FdSpec::new(1e-3, Stencil::Central4),
            covariant: FdSpec::new(1e-2, Stencil::Central4),
        }
    }
}

/// Curvature of the Webster connection at a point.
#[derive(Debug, Clone)]
pub struct CurvatureEval {
    pub n: usize,
    /// `r_full[((α n + β) n + μ) n + ν] = R_α^β_{μν̄}`.
    pub r_full: Vec<C64>,
    /// `w[(α n + β) n + μ] = W_α^β_μ`.
    pub w: Vec<C64>,
    pub ricci: DMatrix<C64>,
    pub scalar: f64,
    /// Largest frame component of the curvature forms outside the
    /// `θ^μ∧θ^ν̄`, `θ^μ∧θ`, `θ^ν̄∧θ` sectors.
    pub expansion_residual: f64,
    /// `pi[α n + β]`: frame values `Π_α^β(e_a, e_b)`.
    pub pi: Vec<DMatrix<C64>>,
    pub connection: ConnectionEval,
}

impl CurvatureEval {
    pub fn r(&self, a: usize, b: usize, m: usize, v: usize) -> C64 {
        let n = self.n;
        self.r_full[((a * n + b) * n + m) * n + v]
    }

    /// `max |ricci − ricci*|`.
    pub fn ricci_hermitian_defect(&self) -> f64 {
        numerics::max_abs(&(&self.ricci - self.ricci.adjoint()))
    }

    /// `max |R_{αβ̄μν̄} − R_{μβ̄αν̄}|`.
    pub fn bianchi_defect(&self) -> f64 {
        let n = self.n;
        let mut m: f64 = 0.0;
        for a in 0..n {
            for b in 0..n {
                for mu in 0..n {
                    for v in 0..n {
                        m = m.max((self.r(a, b, mu, v) - self.r(mu, b, a, v)).norm());
                    }
                }
            }
        }
        m
    }

    /// Curvature 2-form matrix `Π_α^β` evaluated on two chart vectors.
    pub fn pi_on(&self, alpha: usize, beta: usize, x: &DVector<C64>, y: &DVector<C64>) -> C64 {
        let fx = self.connection.frame_components(x);
        let fy = self.connection.frame_components(y);
        (fx.transpose() * &self.pi[alpha * self.n + beta] * fy)[(0, 0)]
    }
}

fn omega_field(model: &dyn Model) -> impl Fn(&ChartPoint) -> Result<DVector<C64>> + '_ {
    move |y: &ChartPoint| {
        let c = solve_connection(model, y)?;
        let n = c.n;
        let d = c.dim();
        let mut v = DVector::zeros(n * n * d);
        for a in 0..n {
            for b in 0..n {
                v.rows_mut((a * n + b) * d, d).copy_from(&c.omega_chart(a, b));
            }
        }
        Ok(v)
    }
}

pub fn curvature(model: &dyn Model, x: &ChartPoint) -> Result<CurvatureEval> {
    curvature_with(model, x, &DiffOptions::default())
}

/// `Π_α^β = dω_α^β − ω_α^γ∧ω_γ^β − (iθ_α∧τ^β − τ_α∧θ^β)` expanded in the frame.
pub fn curvature_with(model: &dyn Model, x: &ChartPoint, opts: &DiffOptions) -> Result<CurvatureEval> {
    let conn = solve_connection(model, x)?;
    let n = conn.n;
    let d = conn.dim();
    let jac = numerics::jacobian(&omega_field(model), x, opts.curvature)?;
    let e = &conn.frame.basis;
    let mut pi = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            let blk = jac.rows((a * n + b) * d, d);
            let dw = blk.transpose() - blk;
            let mut p = e.transpose() * dw * e;
            for i in 0..d {
                for j in 0..d {
                    let mut ww = C64::from(0.0);
                    for g in 0..n {
                        ww += conn.omega(a, g, i) * conn.omega(g, b, j) - conn.omega(a, g, j) * conn.omega(g, b, i);
                    }
                    let theta_low = |k: usize| if k == 1 + n + a { 1.0 } else { 0.0 };
                    let tau_up = |k: usize| if k > n { conn.torsion[(b, k - 1 - n)] } else { C64::from(0.0) };
                    let tau_low = |k: usize| {
                        if (1..=n).contains(&k) {
                            conn.torsion[(a, k - 1)].conj()
                        } else {
                            C64::from(0.0)
                        }
                    };
                    let theta_up = |k: usize| if k == 1 + b { 1.0 } else { 0.0 };
                    let t1 = C64::i() * (tau_up(j) * theta_low(i) - tau_up(i) * theta_low(j));
                    let t2 = tau_low(i) * theta_up(j) - tau_low(j) * theta_up(i);
                    p[(i, j)] -= ww + t1 - t2;
                }
            }
            pi.push(p);
        }
    }
    let mut r_full = vec![C64::from(0.0); n * n * n * n];
    let mut w = vec![C64::from(0.0); n * n * n];
    let mut expansion_residual: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let p = &pi[a * n + b];
            for m in 0..n {
                w[(a * n + b) * n + m] = p[(1 + m, 0)];
                for v in 0..n {
                    r_full[((a * n + b) * n + m) * n + v] = p[(1 + m, 1 + n + v)];
                    expansion_residual = expansion_residual
                        .max(p[(1 + m, 1 + v)].norm())
                        .max(p[(1 + n + m, 1 + n + v)].norm());
                }
            }
        }
    }
    let ricci = DMatrix::from_fn(n, n, |m, v| (0..n).map(|a| r_full[((a * n + a) * n + m) * n + v]).sum::<C64>());
    let scalar = ricci.trace().re;
    Ok(CurvatureEval { n, r_full, w, ricci, scalar, expansion_residual, pi, connection: conn })
}

/// `‖R_{αβ̄} − R g_{αβ̄}/(2(n+1))‖_F`.
pub fn pseudo_einstein_residual_of(ricci: &DMatrix<C64>, scalar: f64) -> f64 {
    let n = ricci.nrows();
    let g = DMatrix::<C64>::identity(n, n) * C64::from(scalar / (2.0 * (n as f64 + 1.0)));
    (ricci - g).norm()
}

pub fn pseudo_einstein_residual(model: &dyn Model, x: &ChartPoint) -> Result<f64> {
    let c = curvature(model, x)?;
    Ok(pseudo_einstein_residual_of(&c.ricci, c.scalar))
}

/// The real 1-form `iω_α^α − Rθ/(2(n+1))` in chart coordinates.
pub fn lemma1_form(model: &dyn Model, x: &ChartPoint) -> Result<DVector<f64>> {
    let c = curvature(model, x)?;
    Ok(lemma1_form_of(&c))
}

pub fn lemma1_form_of(c: &CurvatureEval) -> DVector<f64> {
    let n = c.n as f64;
    let tr = c.connection.omega_trace_chart() * C64::i();
    tr.map(|v| v.re) - &c.connection.coframe.theta * (c.scalar / (2.0 * (n + 1.0)))
}

/// Closed polygon in a chart with Gauss–Legendre nodes on every side.
#[derive(Debug, Clone)]
pub struct PolygonLoop {
    pub vertices: Vec<ChartPoint>,
    pub nodes_per_side: usize,
}

impl PolygonLoop {
    /// Square of side `side` centred at `center` in the plane of the
    /// orthonormal directions `e1`, `e2`, traversed `e1` then `e2`.
    pub fn square(center: &ChartPoint, e1: &DVector<f64>, e2: &DVector<f64>, side: f64, nodes: usize) -> Self {
        let h = side / 2.0;
        let c = |s: f64, t: f64| center + e1 * (s * h) + e2 * (t * h);
        Self {
            vertices: vec![c(-1.0, -1.0), c(1.0, -1.0), c(1.0, 1.0), c(-1.0, 1.0)],
            nodes_per_side: nodes,
        }
    }

    /// Random square in a random coordinate 2-plane.
    pub fn random_square<R: rand::Rng + ?Sized>(center: &ChartPoint, side: f64, nodes: usize, rng: &mut R) -> Self {
        let d = center.len();
        let mut e1 = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        e1 /= e1.norm();
        let mut e2 = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..1.0));
        e2 -= &e1 * e1.dot(&e2);
        e2 /= e2.norm();
        Self::square(center, &e1, &e2, side, nodes)
    }

    /// Quadrature nodes as `(point, tangent · weight)` pairs.
    pub fn nodes(&self) -> Vec<(ChartPoint, DVector<f64>)> {
        let (xs, ws) = numerics::gauss_legendre(self.nodes_per_side);
        let m = self.vertices.len();
        let mut out = Vec::with_capacity(m * xs.len());
        for s in 0..m {
            let a = &self.vertices[s];
            let b = &self.vertices[(s + 1) % m];
            let dv = b - a;
            for (x, w) in xs.iter().zip(&ws) {
                let t = 0.5 * (x + 1.0);
                out.push((a + &dv * t, &dv * (0.5 * w)));
            }
        }
        out
    }

    /// `∮ β` for a real 1-form field.
    pub fn integrate<F>(&self, field: F) -> Result<f64>
    where
        F: Fn(&ChartPoint) -> Result<DVector<f64>>,
    {
        let mut s = 0.0;
        for (p, tw) in self.nodes() {
            s += field(&p)?.dot(&tw);
        }
        Ok(s)
    }

    /// Signed area of the projection to the coordinate plane `(i, j)`.
    pub fn projected_area(&self, i: usize, j: usize) -> f64 {
        let m = self.vertices.len();
        (0..m)
            .map(|s| {
                let a = &self.vertices[s];
                let b = &self.vertices[(s + 1) % m];
                0.5 * (a[i] * b[j] - b[i] * a[j])
            })
            .sum()
    }
}

/// `|∮ (iω_α^α − Rθ/(2(n+1)))|`.
pub fn closedness_defect(model: &dyn Model, lp: &PolygonLoop) -> Result<f64> {
    Ok(lp.integrate(|p| lemma1_form(model, p))?.abs())
}

/// Chern–Moser quantities on an admissible coframe.
#[derive(Debug, Clone)]
pub struct ChernMoserEval {
    /// `d[(α, β)] = D_{αβ̄}`.
    pub d: DMatrix<C64>,
    pub e: DVector<C64>,
    /// `phi_matrix[β n + α]`: frame coefficients of `φ_β^α`.
    pub phi_matrix: Vec<DVector<C64>>,
    /// Frame coefficients of `φ^α`.
    pub phi_vector: Vec<DVector<C64>>,
    pub curvature: CurvatureEval,
}

/// `D_{αβ̄} = (i/(n+2)) R_{αβ̄} − i R g_{αβ̄} / (2(n+1)(n+2))`.
pub fn d_tensor(ricci: &DMatrix<C64>, scalar: f64) -> DMatrix<C64> {
    let n = ricci.nrows() as f64;
    let i = C64::i();
    ricci * (i / (n + 2.0))
        - DMatrix::<C64>::identity(ricci.nrows(), ricci.nrows()) * (i * scalar / (2.0 * (n + 1.0) * (n + 2.0)))
}

pub fn chern_moser(model: &dyn Model, x: &ChartPoint) -> Result<ChernMoserEval> {
    chern_moser_with(model, x, &DiffOptions::default())
}

/// `E^α = (2i/(2n+1)) (A^{αμ}_{;μ} − D^{ν̄α}_{;ν̄})`, `φ_β^α = ω_β^α + D_β^α θ`,
/// `φ^α = τ^α + D_μ^α θ^μ + E^α θ`.
pub fn chern_moser_with(model: &dyn Model, x: &ChartPoint, opts: &DiffOptions) -> Result<ChernMoserEval> {
    let curv = curvature_with(model, x, opts)?;
    let n = curv.n;
    let d = d_tensor(&curv.ricci, curv.scalar);
    let conn = &curv.connection;

    // Fields A^α_μ̄ and D_{να̅}, flattened as [A | D].
    let field = |y: &ChartPoint| -> Result<DVector<C64>> {
        let c = curvature_with(model, y, opts)?;
        let dd = d_tensor(&c.ricci, c.scalar);
        let mut v = DVector::zeros(2 * n * n);
        for a in 0..n {
            for b in 0..n {
                v[a * n + b] = c.connection.torsion[(a, b)];
                v[n * n + a * n + b] = dd[(a, b)];
            }
        }
        Ok(v)
    };
    let mut div_a = DVector::<C64>::zeros(n);
    let mut div_d = DVector::<C64>::zeros(n);
    for m in 0..n {
        let l = conn.frame.basis.column(1 + m).into_owned();
        let dx = numerics::directional(&field, x, &l.map(|c| c.re), opts.covariant)?;
        let dy = numerics::directional(&field, x, &l.map(|c| c.im), opts.covariant)?;
        let dl = &dx + &dy * C64::i();
        let dlb = &dx - &dy * C64::i();
        for a in 0..n {
            // A^{αμ}_{;μ}
            let mut s = dl[a * n + m];
            for b in 0..n {
                s += conn.omega(b, a, 1 + m) * conn.torsion[(b, m)] + conn.omega(b, m, 1 + m) * conn.torsion[(a, b)];
            }
            div_a[a] += s;
            // D^{ν̄α}_{;ν̄} with ν = m
            let mut t = dlb[n * n + m * n + a];
            for b in 0..n {
                t += conn.omega(b, m, 1 + m).conj() * d[(b, a)] + conn.omega(b, a, 1 + n + m) * d[(m, b)];
            }
            div_d[a] += t;
        }
    }
    let e = (div_a - div_d) * (C64::i() * 2.0 / (2.0 * n as f64 + 1.0));

    let mut phi_matrix = Vec::with_capacity(n * n);
    for b in 0..n {
        for a in 0..n {
            let mut v = conn.omega_frame(b, a);
            v[0] += d[(b, a)];
            phi_matrix.push(v);
        }
    }
    let phi_vector = (0..n)
        .map(|a| {
            let mut v = conn.tau_frame(a);
            v[0] += e[a];
            for m in 0..n {
                v[1 + m] += d[(m, a)];
            }
            v
        })
        .collect();
    Ok(ChernMoserEval { d, e, phi_matrix, phi_vector, curvature: curv })
}

impl ChernMoserEval {
    pub fn n(&self) -> usize {
        self.curvature.n
    }

    /// `φ_β^α(v)` for a chart vector.
    pub fn phi_matrix_on(&self, beta: usize, alpha: usize, v: &DVector<C64>) -> C64 {
        let fc = self.curvature.connection.frame_components(v);
        self.phi_matrix[beta * self.n() + alpha].dot(&fc)
    }

    pub fn phi_vector_on(&self, alpha: usize, v: &DVector<C64>) -> C64 {
        let fc = self.curvature.connection.frame_components(v);
        self.phi_vector[alpha].dot(&fc)
    }

    /// `max |φ_β^α − ω_β^α − D_β^α θ|` over frame coefficients.
    pub fn phi_defect(&self) -> f64 {
        let n = self.n();
        let c = &self.curvature.connection;
        let mut m: f64 = 0.0;
        for b in 0..n {
            for a in 0..n {
                let mut v = self.phi_matrix[b * n + a].clone() - c.omega_frame(b, a);
                v[0] -= self.d[(b, a)];
                m = m.max(numerics::max_abs_v(&v));
            }
        }
        m
    }
}

/// Reject non-finite or inconsistent curvature output.
pub fn check_expansion(c: &CurvatureEval, tol: f64) -> Result<()> {
    if !(c.expansion_residual <= tol) {
        return Err(CrError::Residual { what: "curvature expansion", residual: c.expansion_residual, tol });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{heisenberg_model, sample_point, sphere_model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heisenberg_is_flat() {
        let m = heisenberg_model(2).unwrap();
        let x = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1, 0.9]);
        let cm = chern_moser(&m, &x).unwrap();
        assert!(cm.curvature.r_full.iter().all(|c| c.norm() < 1e-12));
        assert!(cm.curvature.w.iter().all(|c| c.norm() < 1e-12));
        assert!(cm.curvature.scalar.abs() < 1e-12);
        assert!(numerics::max_abs(&cm.d) < 1e-12);
        assert!(numerics::max_abs_v(&cm.e) < 1e-12);
    }

    #[test]
    fn sphere_ricci_and_scalar() {
        // With θ = Im(Z̄dZ): R_{αβ̄} = (n+1) δ, R = n(n+1).
        for n in 1..=2 {
            let m = sphere_model(n).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..3 {
                let x = sample_point(&m, &mut r, 0.6);
                let c = curvature(&m, &x).unwrap();
                let nf = n as f64;
                let expected = DMatrix::<C64>::identity(n, n) * C64::from(nf + 1.0);
                assert!(numerics::max_abs(&(&c.ricci - expected)) < 1e-8, "{}", c.ricci);
                assert!((c.scalar - nf * (nf + 1.0)).abs() < 1e-8);
                assert!(c.expansion_residual < 1e-8);
                assert!(c.bianchi_defect() < 1e-8);
                assert!(c.ricci_hermitian_defect() < 1e-9);
            }
        }
    }

    #[test]
    fn sphere_pseudo_einstein_residual_value() {
        // Ricci (n+1)δ against R/(2(n+1)) = n/2: residual √n (n+2)/2.
        for n in 1..=2 {
            let m = sphere_model(n).unwrap();
            let x = DVector::from_element(2 * n + 1, 0.1);
            let nf = n as f64;
            let r = pseudo_einstein_residual(&m, &x).unwrap();
            assert!((r - nf.sqrt() * (nf + 2.0) / 2.0).abs() < 1e-8, "{r}");
        }
    }

    #[test]
    fn perturbed_ricci_raises_residual() {
        // Off-diagonal entries do not enter the trace, so a hermitian unit
        // perturbation adds exactly √2 in Frobenius norm to a zero residual.
        let ricci = DMatrix::<C64>::zeros(2, 2);
        assert_eq!(pseudo_einstein_residual_of(&ricci, 0.0), 0.0);
        let mut p = ricci.clone();
        p[(0, 1)] += C64::from(1.0);
        p[(1, 0)] += C64::from(1.0);
        assert!(pseudo_einstein_residual_of(&p, 0.0) >= 2f64.sqrt() * (1.0 - 1e-6));
    }

    #[test]
    fn sphere_chern_moser_values() {
        // P = δ/2 for this normalization, so D = (i/2)δ; A = 0 and D parallel give E = 0.
        let m = sphere_model(1).unwrap();
        let x = DVector::from_vec(vec![0.2, -0.1, 0.3]);
        let cm = chern_moser(&m, &x).unwrap();
        assert!((cm.d[(0, 0)] - C64::new(0.0, 0.5)).norm() < 1e-8);
        assert!(numerics::max_abs_v(&cm.e) < 1e-7, "{}", cm.e);
        assert!(cm.phi_defect() < 1e-12);
    }

    #[test]
    fn heisenberg_loops_are_closed_and_synthetic_term_obeys_green() {
        let m = heisenberg_model(1).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..3 {
            let c = sample_point(&m, &mut r, 1.0);
            let lp = PolygonLoop::random_square(&c, 0.1, 50, &mut r);
            assert!(closedness_defect(&m, &lp).unwrap() < 1e-8);
            let synth = lp
                .integrate(|p| {
                    let mut f = lemma1_form(&m, p)?;
                    f[1] += p[0];
                    Ok(f)
                })
                .unwrap();
            let green = lp.projected_area(0, 1);
            assert!((synth - green).abs() <= 0.05 * green.abs());
        }
    }
}
