//! CR embeddings between models: adapted coframe pairs, the CR second
//! fundamental form `ω_{αβ}^b`, the lift condition, the trace lemma and chain
//! preservation.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::chains::{chain_residual_profile, integrate_chain, ChainOptions, ChainState, CurveSample};
use crate::connection::{solve_connection, ConnectionEval};
use crate::curvature::{curvature_with, d_tensor, DiffOptions};
use crate::models::{heisenberg_model, sphere_model, ChartPoint, CoframeEval, FrameEval, Model, ModelRef, ScaledModel, Sphere};
use crate::numerics::{self, FdSpec, Stencil};
use crate::{CrError, Result, C64};

/// Chain-sweep threshold of the three equivalent conditions.
pub const EPS_CHAIN: f64 = 1e-4;
/// Lift-condition threshold.
pub const EPS_LIFT: f64 = 1e-7;
/// Second fundamental form threshold.
pub const EPS_SFF: f64 = 1e-8;
/// Pullback tolerance of an adapted pair.
pub const ADAPT_TOL: f64 = 1e-8;

const FRAME_FD: FdSpec = FdSpec { step: 1e-3, stencil: Stencil::Central4 };

/// A smooth CR map between chart models.
pub trait CrMap: Send + Sync {
    fn name(&self) -> String;
    fn source(&self) -> ModelRef;
    fn target(&self) -> ModelRef;
    fn map(&self, x: &ChartPoint) -> Result<ChartPoint>;
    /// Real Jacobian `∂f^i/∂x^k`.
    fn differential(&self, x: &ChartPoint) -> Result<DMatrix<f64>>;
    /// Image in the target's ambient space, when available.
    fn ambient_image(&self, _x: &ChartPoint) -> Option<DVector<C64>> {
        None
    }
    /// Target has vanishing Chern–Moser curvature and constant scalar curvature.
    fn spherical_target(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SpherePolynomial {
    Linear,
    Whitney,
}

struct SphereMap {
    kind: SpherePolynomial,
    source: Arc<Sphere>,
    target: Arc<Sphere>,
}

impl SphereMap {
    fn value(&self, z: &DVector<C64>) -> DVector<C64> {
        match self.kind {
            SpherePolynomial::Linear => {
                let mut w = DVector::zeros(self.target.n() + 1);
                w.rows_mut(0, z.len()).copy_from(z);
                w
            }
            SpherePolynomial::Whitney => {
                DVector::from_vec(vec![z[0] * z[0], z[0] * z[1] * std::f64::consts::SQRT_2, z[1] * z[1]])
            }
        }
    }

    fn jacobian(&self, z: &DVector<C64>) -> DMatrix<C64> {
        match self.kind {
            SpherePolynomial::Linear => DMatrix::from_fn(self.target.n() + 1, z.len(), |r, c| C64::from(if r == c { 1.0 } else { 0.0 })),
            SpherePolynomial::Whitney => {
                let s = std::f64::consts::SQRT_2;
                DMatrix::from_row_slice(3, 2, &[z[0] * 2.0, C64::from(0.0), z[1] * s, z[0] * s, C64::from(0.0), z[1] * 2.0])
            }
        }
    }
}

impl CrMap for SphereMap {
    fn name(&self) -> String {
        match self.kind {
            SpherePolynomial::Linear => format!("linear S^{} -> S^{}", 2 * self.source.n() + 1, 2 * self.target.n() + 1),
            SpherePolynomial::Whitney => "whitney S^3 -> S^5".into(),
        }
    }
    fn source(&self) -> ModelRef {
        self.source.clone()
    }
    fn target(&self) -> ModelRef {
        self.target.clone()
    }
    fn map(&self, x: &ChartPoint) -> Result<ChartPoint> {
        self.source.check(x)?;
        let z = self.source.ambient(x).expect("sphere carries an ambient map");
        let y = self.target.chart_of_ambient(&self.value(&z))?;
        self.target.check(&y)?;
        Ok(y)
    }
    fn differential(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.source.check(x)?;
        let z = self.source.ambient(x).expect("sphere carries an ambient map");
        let dz = self.jacobian(&z) * self.source.ambient_jacobian(x);
        Ok(self.target.chart_differential(&self.value(&z), &dz))
    }
    fn ambient_image(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.source.ambient(x).map(|z| self.value(&z))
    }
    fn spherical_target(&self) -> bool {
        true
    }
}

/// Chart-linear map `x ↦ A x`.
struct ChartLinearMap {
    name: String,
    source: ModelRef,
    target: ModelRef,
    a: DMatrix<f64>,
    spherical: bool,
}

impl CrMap for ChartLinearMap {
    fn name(&self) -> String {
        self.name.clone()
    }
    fn source(&self) -> ModelRef {
        self.source.clone()
    }
    fn target(&self) -> ModelRef {
        self.target.clone()
    }
    fn map(&self, x: &ChartPoint) -> Result<ChartPoint> {
        self.source.check(x)?;
        let y = &self.a * x;
        self.target.check(&y)?;
        Ok(y)
    }
    fn differential(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.source.check(x)?;
        Ok(self.a.clone())
    }
    fn ambient_image(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.target.ambient(&(&self.a * x))
    }
    fn spherical_target(&self) -> bool {
        self.spherical
    }
}

/// A CR embedding together with the constant contact scale `λ` with
/// `f*θ̂ = λθ` and the rescaled target `θ̂/λ`.
#[derive(Clone)]
pub struct CrEmbedding {
    map: Arc<dyn CrMap>,
    scale: f64,
    scaled_target: ModelRef,
}

impl std::fmt::Debug for CrEmbedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CrEmbedding").field("name", &self.map.name()).field("scale", &self.scale).finish()
    }
}

impl CrEmbedding {
    pub fn new(map: Arc<dyn CrMap>) -> Result<Self> {
        let source = map.source();
        let target = map.target();
        if target.n() < source.n() {
            return Err(CrError::InvalidArgument(format!(
                "target CR dimension {} is below source CR dimension {}",
                target.n(),
                source.n()
            )));
        }
        let x0 = source.base_point();
        let lam = contact_scale(map.as_ref(), &x0)?;
        if !(lam > 0.0) {
            return Err(CrError::Degenerate(format!("contact scale {lam} is not positive")));
        }
        let field = |y: &ChartPoint| Ok(DVector::from_element(1, C64::from(contact_scale(map.as_ref(), y)?)));
        for k in 0..source.dim() {
            let mut e = DVector::zeros(source.dim());
            e[k] = 1.0;
            let g = numerics::directional(&field, &x0, &e, FRAME_FD)?[0].norm();
            if g > 1e-7 * lam {
                return Err(CrError::Degenerate(format!("contact scale is not constant (gradient {g:e})")));
            }
        }
        let scaled_target: ModelRef = Arc::new(ScaledModel::new(target, 1.0 / lam)?);
        Ok(Self { map, scale: lam, scaled_target })
    }

    pub fn name(&self) -> String {
        self.map.name()
    }
    pub fn source(&self) -> ModelRef {
        self.map.source()
    }
    pub fn target(&self) -> ModelRef {
        self.map.target()
    }
    /// Target with contact form `θ̂/λ`, so that `f*θ̂ = θ`.
    pub fn scaled_target(&self) -> ModelRef {
        self.scaled_target.clone()
    }
    pub fn scale(&self) -> f64 {
        self.scale
    }
    pub fn n(&self) -> usize {
        self.map.source().n()
    }
    pub fn n_hat(&self) -> usize {
        self.map.target().n()
    }
    pub fn codim(&self) -> usize {
        self.n_hat() - self.n()
    }
    pub fn spherical_target(&self) -> bool {
        self.map.spherical_target()
    }
    pub fn map(&self, x: &ChartPoint) -> Result<ChartPoint> {
        self.map.map(x)
    }
    pub fn differential(&self, x: &ChartPoint) -> Result<DMatrix<f64>> {
        self.map.differential(x)
    }
    pub fn ambient_image(&self, x: &ChartPoint) -> Option<DVector<C64>> {
        self.map.ambient_image(x)
    }

    /// `max |θ̂(f_*L_α)|, |θ̂^Ā(f_*L_α)|`: `f_*` maps `H^{1,0}` into `Ĥ^{1,0}`.
    pub fn cr_residual(&self, x: &ChartPoint) -> Result<f64> {
        let fr = self.source().coframe(x)?.frame()?;
        let y = self.map(x)?;
        let cf = self.target().coframe(&y)?;
        let df = self.differential(x)?.map(C64::from);
        let mut r: f64 = 0.0;
        for a in 0..self.n() {
            let v = &df * fr.l.column(a);
            r = r.max(numerics::to_complex(&cf.theta).dot(&v).norm());
            for b in 0..self.n_hat() {
                r = r.max(cf.theta_alpha_row(b).map(|c| c.conj()).dot(&v).norm());
            }
        }
        Ok(r)
    }

    /// Numerical rank of the differential.
    pub fn rank(&self, x: &ChartPoint) -> Result<usize> {
        let sv = self.differential(x)?.singular_values();
        let top = sv.max();
        Ok(sv.iter().filter(|s| **s > 1e-10 * top).count())
    }
}

fn contact_scale(map: &dyn CrMap, x: &ChartPoint) -> Result<f64> {
    let t = map.source().coframe(x)?.frame()?.t;
    let y = map.map(x)?;
    Ok(map.target().coframe(&y)?.theta.dot(&(map.differential(x)? * t)))
}

/// `S^{2n+1} → S^{2n̂+1}`, `Z ↦ (Z, 0)`.
pub fn linear_sphere_embedding(n: usize, n_hat: usize) -> Result<CrEmbedding> {
    if !(n_hat > n && n >= 1) {
        return Err(CrError::InvalidArgument(format!("need n̂ > n ≥ 1, got n = {n}, n̂ = {n_hat}")));
    }
    CrEmbedding::new(Arc::new(SphereMap {
        kind: SpherePolynomial::Linear,
        source: Arc::new(sphere_model(n)?),
        target: Arc::new(sphere_model(n_hat)?),
    }))
}

/// `S³ → S⁵`, `(z, w) ↦ (z², √2 zw, w²)`. The target chart pole is moved to
/// `(0, 1, 0)`, which the image avoids (`2|zw|² ≤ ½`).
pub fn whitney_embedding() -> Result<CrEmbedding> {
    let one = C64::from(1.0);
    let zero = C64::from(0.0);
    let q = DMatrix::from_row_slice(3, 3, &[zero, one, zero, -one, zero, zero, zero, zero, one]);
    CrEmbedding::new(Arc::new(SphereMap {
        kind: SpherePolynomial::Whitney,
        source: Arc::new(sphere_model(1)?),
        target: Arc::new(sphere_model(2)?.with_rotation(q)?),
    }))
}

/// Heisenberg inclusion `(z, u) ↦ (z, 0, u)`.
pub fn heisenberg_inclusion(n: usize, n_hat: usize) -> Result<CrEmbedding> {
    if !(n_hat > n && n >= 1) {
        return Err(CrError::InvalidArgument(format!("need n̂ > n ≥ 1, got n = {n}, n̂ = {n_hat}")));
    }
    let mut a = DMatrix::zeros(2 * n_hat + 1, 2 * n + 1);
    for i in 0..2 * n {
        a[(i, i)] = 1.0;
    }
    a[(2 * n_hat, 2 * n)] = 1.0;
    CrEmbedding::new(Arc::new(ChartLinearMap {
        name: format!("heisenberg H^{} -> H^{}", 2 * n + 1, 2 * n_hat + 1),
        source: Arc::new(heisenberg_model(n)?),
        target: Arc::new(heisenberg_model(n_hat)?),
        a,
        spherical: true,
    }))
}

/// Identity map of a model.
pub fn identity_embedding(model: ModelRef, spherical: bool) -> Result<CrEmbedding> {
    let d = model.dim();
    CrEmbedding::new(Arc::new(ChartLinearMap {
        name: format!("identity {}", model.name()),
        source: model.clone(),
        target: model,
        a: DMatrix::identity(d, d),
        spherical,
    }))
}

/// Adapted coframes at a point: on `M`, `f*θ̃ = θ`, `f*θ̃^α = θ^α`, `f*θ̃^a = 0`
/// with `θ̃ = θ̂/λ` and `θ̃^A = U^A_B θ̂^B` (`θ̂^B` of the scaled target).
#[derive(Debug, Clone)]
pub struct AdaptedPair {
    pub point: ChartPoint,
    pub image: ChartPoint,
    pub source: CoframeEval,
    /// Rows `α` (tangential) then `a` (normal); target chart covectors.
    pub target: CoframeEval,
    pub u: DMatrix<C64>,
    pub scale: f64,
    pub differential: DMatrix<f64>,
    pub residual_theta: f64,
    pub residual_tangential: f64,
    pub residual_normal: f64,
    /// Standard basis vectors used to complete the normal block.
    pub completion: Vec<usize>,
}

impl AdaptedPair {
    pub fn max_residual(&self) -> f64 {
        self.residual_theta.max(self.residual_tangential).max(self.residual_normal)
    }
}

pub fn adapt_coframes(emb: &CrEmbedding, x: &ChartPoint) -> Result<AdaptedPair> {
    adapt_with(emb, x, None)
}

/// Gram–Schmidt in the Levi-orthonormal coordinates of the scaled target,
/// starting from the pushed-forward frame; the normal block is completed from
/// standard basis vectors (given, or chosen greedily by projected length).
fn adapt_with(emb: &CrEmbedding, x: &ChartPoint, completion: Option<&[usize]>) -> Result<AdaptedPair> {
    let n = emb.n();
    let nh = emb.n_hat();
    let source = emb.source().coframe(x)?;
    let fr = source.frame()?;
    let y = emb.map(x)?;
    let tgt = emb.scaled_target().coframe(&y)?;
    let df = emb.differential(x)?;
    let dfc = df.map(C64::from);
    let lam = tgt.theta.dot(&(&df * &fr.t));
    if (lam - 1.0).abs() > ADAPT_TOL {
        return Err(CrError::Residual { what: "contact scale along the embedding", residual: (lam - 1.0).abs(), tol: ADAPT_TOL });
    }
    let p = &tgt.theta_alpha * (&dfc * &fr.l);
    let mut cols: Vec<DVector<C64>> = Vec::with_capacity(nh);
    for a in 0..n {
        let mut v = p.column(a).into_owned();
        for c in &cols {
            let pr = c.dotc(&v);
            v -= c * pr;
        }
        let nv = v.norm();
        if nv < 1e-8 {
            return Err(CrError::RankDeficient { rank: a, expected: n });
        }
        cols.push(v / C64::from(nv));
    }
    let mut chosen = Vec::with_capacity(nh - n);
    let project = |cols: &[DVector<C64>], j: usize| {
        let mut v = DVector::<C64>::zeros(nh);
        v[j] = C64::from(1.0);
        for c in cols {
            let pr = c.dotc(&v);
            v -= c * pr;
        }
        v
    };
    for k in 0..nh - n {
        let j = match completion {
            Some(c) => c[k],
            None => (0..nh)
                .max_by(|a, b| project(&cols, *a).norm().total_cmp(&project(&cols, *b).norm()))
                .expect("nonempty"),
        };
        let v = project(&cols, j);
        let nv = v.norm();
        if nv < 1e-6 {
            return Err(CrError::Degenerate("normal completion failed".into()));
        }
        cols.push(v / C64::from(nv));
        chosen.push(j);
    }
    let v = DMatrix::from_columns(&cols);
    let u = v.adjoint();
    let ta = &u * &tgt.theta_alpha;
    let levi = DMatrix::identity(nh, nh);
    let target = CoframeEval { theta: tgt.theta.clone(), theta_alpha: ta, levi };
    // pullbacks
    let dft = df.transpose();
    let residual_theta = (&dft * &target.theta - &source.theta).amax();
    let pulled = &target.theta_alpha * &dfc;
    let mut rt: f64 = 0.0;
    let mut rn: f64 = 0.0;
    for a in 0..nh {
        for i in 0..x.len() {
            if a < n {
                rt = rt.max((pulled[(a, i)] - source.theta_alpha[(a, i)]).norm());
            } else {
                rn = rn.max(pulled[(a, i)].norm());
            }
        }
    }
    let pair = AdaptedPair {
        point: x.clone(),
        image: y,
        source,
        target,
        u,
        scale: emb.scale(),
        differential: df,
        residual_theta,
        residual_tangential: rt,
        residual_normal: rn,
        completion: chosen,
    };
    if pair.max_residual() > ADAPT_TOL {
        return Err(CrError::Residual { what: "adapted pair pullback", residual: pair.max_residual(), tol: ADAPT_TOL });
    }
    Ok(pair)
}

/// `U` of the adapted pair at `y` with a fixed normal completion.
pub fn adapted_unitary(emb: &CrEmbedding, y: &ChartPoint, completion: &[usize]) -> Result<DMatrix<C64>> {
    Ok(adapt_with(emb, y, Some(completion))?.u)
}

/// Target Webster connection in the adapted frame, pulled back to `M`.
#[derive(Debug, Clone)]
pub struct AdaptedConnection {
    pub pair: AdaptedPair,
    /// `omega[A n̂ + B]`: `f*ω̃_A^B` as a source chart covector.
    pub omega: Vec<DVector<C64>>,
    /// `f*τ̃^B`.
    pub tau: Vec<DVector<C64>>,
    pub source_frame: FrameEval,
    pub target_connection: ConnectionEval,
}

impl AdaptedConnection {
    pub fn omega(&self, a: usize, b: usize) -> &DVector<C64> {
        &self.omega[a * self.pair.target.theta_alpha.nrows() + b]
    }

    /// `i f*ω̃_A^A` trace as a real source covector (the imaginary part is
    /// roundoff).
    pub fn trace_form(&self) -> DVector<f64> {
        let nh = self.pair.target.theta_alpha.nrows();
        let mut s = DVector::<C64>::zeros(self.pair.point.len());
        for a in 0..nh {
            s += self.omega(a, a);
        }
        (s * C64::i()).map(|c| c.re)
    }
}

pub fn adapted_connection(emb: &CrEmbedding, x: &ChartPoint) -> Result<AdaptedConnection> {
    adapted_connection_with(emb, x, None)
}

fn adapted_connection_with(emb: &CrEmbedding, x: &ChartPoint, completion: Option<&[usize]>) -> Result<AdaptedConnection> {
    let nh = emb.n_hat();
    let d = x.len();
    let pair = adapt_with(emb, x, completion)?;
    let sel = pair.completion.clone();
    let source_frame = pair.source.frame()?;
    let conn = solve_connection(emb.scaled_target().as_ref(), &pair.image)?;
    let u = &pair.u;
    // dU along the source coordinates
    let ufield = |y: &ChartPoint| -> Result<DVector<C64>> {
        let p = adapt_with(emb, y, Some(&sel))?;
        Ok(DVector::from_iterator(nh * nh, p.u.iter().cloned()))
    };
    let ju = numerics::jacobian(&ufield, x, FRAME_FD)?;
    let du: Vec<DMatrix<C64>> = (0..d).map(|k| DMatrix::from_iterator(nh, nh, ju.column(k).iter().cloned())).collect();
    let dft = pair.differential.transpose().map(C64::from);
    // Ψ[B][A] = −f*ω̂_A^B
    let mut psi = vec![DVector::<C64>::zeros(d); nh * nh];
    for a in 0..nh {
        for b in 0..nh {
            psi[b * nh + a] = -(&dft * conn.omega_chart(a, b));
        }
    }
    let uad = u.adjoint();
    let mut psit = vec![DVector::<C64>::zeros(d); nh * nh];
    for k in 0..d {
        let pk = DMatrix::from_fn(nh, nh, |r, c| psi[r * nh + c][k]);
        let m = &du[k] * &uad + u * pk * &uad;
        for r in 0..nh {
            for c in 0..nh {
                psit[r * nh + c][k] = m[(r, c)];
            }
        }
    }
    let mut omega = vec![DVector::<C64>::zeros(d); nh * nh];
    for a in 0..nh {
        for b in 0..nh {
            omega[a * nh + b] = -psit[b * nh + a].clone();
        }
    }
    let tau_hat: Vec<DVector<C64>> = (0..nh).map(|c| &dft * conn.tau_chart(c)).collect();
    let tau = (0..nh)
        .map(|b| {
            let mut s = DVector::<C64>::zeros(d);
            for c in 0..nh {
                s += &tau_hat[c] * u[(b, c)];
            }
            s
        })
        .collect();
    Ok(AdaptedConnection { pair, omega, tau, source_frame, target_connection: conn })
}

/// `ω_{αβ}^b`, stored as `omega[(α n + β) k + b]` with `k = n̂ − n`.
#[derive(Debug, Clone)]
pub struct SecondFundamentalForm {
    pub n: usize,
    pub codim: usize,
    pub omega: Vec<C64>,
    pub symmetry_defect: f64,
    /// Largest `θ`, `θ^β̄` component of `ω_α^b` and component of `τ^b`.
    pub structure_defect: f64,
}

impl SecondFundamentalForm {
    pub fn get(&self, a: usize, b: usize, nb: usize) -> C64 {
        self.omega[(a * self.n + b) * self.codim + nb]
    }

    pub fn norm(&self) -> f64 {
        self.omega.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
    }

    fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        for c in out.omega.iter_mut() {
            *c *= s;
        }
        out
    }
}

fn sff_from(ac: &AdaptedConnection, n: usize) -> SecondFundamentalForm {
    let nh = ac.pair.target.theta_alpha.nrows();
    let k = nh - n;
    let fr = &ac.source_frame;
    let t = numerics::to_complex(&fr.t);
    let mut omega = vec![C64::from(0.0); n * n * k];
    let mut sd: f64 = 0.0;
    for a in 0..n {
        for b in 0..k {
            let w = ac.omega(a, n + b);
            sd = sd.max(w.dot(&t).norm());
            for be in 0..n {
                let l = fr.l.column(be).into_owned();
                omega[(a * n + be) * k + b] = w.dot(&l);
                sd = sd.max(w.dot(&l.map(|c| c.conj())).norm());
            }
        }
    }
    for b in 0..k {
        for e in fr.basis.column_iter() {
            sd = sd.max(ac.tau[n + b].dot(&e).norm());
        }
    }
    let mut sym: f64 = 0.0;
    for a in 0..n {
        for be in 0..n {
            for b in 0..k {
                sym = sym.max((omega[(a * n + be) * k + b] - omega[(be * n + a) * k + b]).norm());
            }
        }
    }
    SecondFundamentalForm { n, codim: k, omega, symmetry_defect: sym, structure_defect: sd }
}

pub fn second_fundamental_form(emb: &CrEmbedding, x: &ChartPoint) -> Result<SecondFundamentalForm> {
    let s = sff_from(&adapted_connection(emb, x)?, emb.n());
    if s.structure_defect > 1e-7 {
        return Err(CrError::Residual { what: "second fundamental form structure", residual: s.structure_defect, tol: 1e-7 });
    }
    Ok(s)
}

/// Outcome of the trace lemma on a tensor `ω_{αβ}^b`.
#[derive(Debug, Clone, Copy)]
pub struct TraceLemmaVerdict {
    pub holds: bool,
    /// `‖ω_{μα}^a ω^μ_{aβ̄} − (Σ|ω|²/(2(n+1))) g_{αβ̄}‖_F`.
    pub residual: f64,
    pub norm_sqr: f64,
}

/// `M_{αβ̄} = Σ_{μ,a} ω_{μα}^a conj(ω_{μβ}^a)`.
fn trace_matrix(omega: &[C64], n: usize, k: usize) -> DMatrix<C64> {
    DMatrix::from_fn(n, n, |a, b| {
        let mut s = C64::from(0.0);
        for m in 0..n {
            for c in 0..k {
                s += omega[(m * n + a) * k + c] * omega[(m * n + b) * k + c].conj();
            }
        }
        s
    })
}

pub fn trace_lemma_check(omega: &[C64], n: usize, codim: usize, tol: f64) -> Result<TraceLemmaVerdict> {
    if omega.len() != n * n * codim {
        return Err(CrError::Dimension { expected: n * n * codim, got: omega.len() });
    }
    let scale = omega.iter().map(|c| c.norm()).fold(1.0, f64::max);
    for a in 0..n {
        for b in 0..n {
            for c in 0..codim {
                let d = (omega[(a * n + b) * codim + c] - omega[(b * n + a) * codim + c]).norm();
                if d > 1e-8 * scale {
                    return Err(CrError::InvalidArgument(format!("ω is not symmetric in its lower indices ({d:e})")));
                }
            }
        }
    }
    let m = trace_matrix(omega, n, codim);
    let nsq = m.trace().re;
    let r = (m - DMatrix::<C64>::identity(n, n) * C64::from(nsq / (2.0 * (n as f64 + 1.0)))).norm();
    Ok(TraceLemmaVerdict { holds: r < tol, residual: r, norm_sqr: nsq })
}

/// Lift condition at a point.
#[derive(Debug, Clone)]
pub struct LiftReport {
    /// `C_{αβ̄} = D̂_{αβ̄} − D_{αβ̄}` in the adapted pair.
    pub c: DMatrix<C64>,
    pub c_norm: f64,
    /// Trace-lemma residual (sphere-like targets only).
    pub trace_residual: Option<f64>,
    pub verdicts_agree: Option<bool>,
    /// `‖C − (i/(n+2))(M − tr M/(2(n+1)) g)‖` with `M` the trace matrix of
    /// `ω_{αβ}^b` (sphere-like targets only).
    pub gauss_defect: Option<f64>,
    pub sff: SecondFundamentalForm,
}

impl LiftReport {
    pub fn residual(&self) -> f64 {
        self.c_norm.max(self.trace_residual.unwrap_or(0.0))
    }
}

pub fn lift_condition(emb: &CrEmbedding, x: &ChartPoint) -> Result<LiftReport> {
    let opts = DiffOptions::default();
    let n = emb.n();
    let nh = emb.n_hat() as f64;
    let ac = adapted_connection(emb, x)?;
    let sff = sff_from(&ac, n);
    let src = curvature_with(emb.source().as_ref(), x, &opts)?;
    let tgt = curvature_with(emb.scaled_target().as_ref(), &ac.pair.image, &opts)?;
    let dfc = ac.pair.differential.map(C64::from);
    let pushed: Vec<DVector<C64>> = (0..n).map(|a| &dfc * ac.source_frame.l.column(a)).collect();
    let rhat = DMatrix::from_fn(n, n, |a, b| {
        let yb = pushed[b].map(|c| c.conj());
        (0..emb.n_hat()).map(|c| tgt.pi_on(c, c, &pushed[a], &yb)).sum::<C64>()
    });
    let i = C64::i();
    let dhat = &rhat * (i / (nh + 2.0)) - DMatrix::<C64>::identity(n, n) * (i * tgt.scalar / (2.0 * (nh + 1.0) * (nh + 2.0)));
    let c = dhat - d_tensor(&src.ricci, src.scalar);
    let c_norm = c.norm();
    let (trace_residual, verdicts_agree, gauss_defect) = if emb.spherical_target() {
        let v = trace_lemma_check(&sff.omega, n, sff.codim, EPS_LIFT)?;
        let m = trace_matrix(&sff.omega, n, sff.codim);
        let tr = m.trace();
        let g = (m - DMatrix::<C64>::identity(n, n) * (tr / (2.0 * (n as f64 + 1.0)))) * (i / (n as f64 + 2.0));
        (Some(v.residual), Some(v.holds == (c_norm < EPS_LIFT)), Some((&c - g).norm()))
    } else {
        (None, None, None)
    };
    Ok(LiftReport { c, c_norm, trace_residual, verdicts_agree, gauss_defect, sff })
}

/// Perturbations for sensitivity checks of the covariant-derivative identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma7Variant {
    /// Multiplies `ω_{αγ}^a` (curvature term kept).
    pub sff_scale: f64,
    /// Flips the sign of the normal connection term `ω_{αγ}^b ω_b^a`.
    pub flip_normal_connection: bool,
}

impl Default for Lemma7Variant {
    fn default() -> Self {
        Self { sff_scale: 1.0, flip_normal_connection: false }
    }
}

/// `∇ω_{αγ}^a(L_ν̄) + R̂_α^a_{γν̄}` in the adapted frame.
#[derive(Debug, Clone, Copy)]
pub struct Lemma7Report {
    pub residual: f64,
    /// Largest `|L_ν̄ ω_{αγ}^a|` (before connection terms).
    pub derivative_norm: f64,
    /// Largest `|R̂_α^a_{γν̄}|`.
    pub curvature_norm: f64,
}

pub fn covariant_derivative_sff(emb: &CrEmbedding, x: &ChartPoint) -> Result<Lemma7Report> {
    covariant_derivative_sff_with(emb, x, Lemma7Variant::default())
}

pub fn covariant_derivative_sff_with(emb: &CrEmbedding, x: &ChartPoint, variant: Lemma7Variant) -> Result<Lemma7Report> {
    let opts = DiffOptions::default();
    let n = emb.n();
    let nh = emb.n_hat();
    let k = nh - n;
    let ac = adapted_connection(emb, x)?;
    let sel = ac.pair.completion.clone();
    let sff = sff_from(&ac, n).scaled(variant.sff_scale);
    let field = |y: &ChartPoint| -> Result<DVector<C64>> {
        let a = adapted_connection_with(emb, y, Some(&sel))?;
        Ok(DVector::from_vec(sff_from(&a, n).omega))
    };
    let tgt = curvature_with(emb.scaled_target().as_ref(), &ac.pair.image, &opts)?;
    let dfc = ac.pair.differential.map(C64::from);
    let u = &ac.pair.u;
    let mut res: f64 = 0.0;
    let mut dn: f64 = 0.0;
    let mut cn: f64 = 0.0;
    let ns = if variant.flip_normal_connection { -1.0 } else { 1.0 };
    for v in 0..n {
        let l = ac.source_frame.l.column(v).into_owned();
        let lb = l.map(|c| c.conj());
        let dx = numerics::directional(&field, x, &l.map(|c| c.re), opts.covariant)?;
        let dy = numerics::directional(&field, x, &l.map(|c| c.im), opts.covariant)?;
        let dlb = (dx - dy * C64::i()) * C64::from(variant.sff_scale);
        let w = |a: usize, b: usize| ac.omega(a, b).dot(&lb);
        let pushed_bar = &dfc * &lb;
        for g in 0..n {
            let pg = &dfc * ac.source_frame.l.column(g);
            // Π̂ on (f_*L_γ, f_*L_ν̄) in the scaled-target frame
            let ph = DMatrix::from_fn(nh, nh, |r, c| tgt.pi_on(r, c, &pg, &pushed_bar));
            let pt = u.map(|c| c.conj()) * ph * u.transpose();
            for a in 0..n {
                for na in 0..k {
                    let idx = (a * n + g) * k + na;
                    let mut cov = dlb[idx];
                    for m in 0..n {
                        cov -= sff.get(m, g, na) * w(a, m) + sff.get(a, m, na) * w(g, m);
                    }
                    for b in 0..k {
                        cov += sff.get(a, g, b) * w(n + b, n + na) * ns;
                    }
                    let r = pt[(a, n + na)];
                    res = res.max((cov + r).norm());
                    dn = dn.max(dlb[idx].norm());
                    cn = cn.max(r.norm());
                }
            }
        }
    }
    Ok(Lemma7Report { residual: res, derivative_norm: dn, curvature_norm: cn })
}

/// Chain through `initial` mapped into the target, with the target chain residual.
#[derive(Debug, Clone)]
pub struct ChainImage {
    pub source: Vec<CurveSample>,
    pub image: Vec<CurveSample>,
    pub residual: f64,
}

pub fn chain_preservation_test(emb: &CrEmbedding, initial: &ChainState, t_span: f64, opts: &ChainOptions) -> Result<ChainImage> {
    let src = emb.source();
    let ch = integrate_chain(src.as_ref(), initial, t_span, opts)?;
    if let Some(e) = ch.stop {
        return Err(e);
    }
    let image = ch
        .samples
        .iter()
        .map(|s| {
            Ok(CurveSample {
                t: s.t,
                point: emb.map(&s.point)?,
                tangent: emb.differential(&s.point)? * &s.tangent,
                ambient: emb.ambient_image(&s.point),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let residual = chain_residual_profile(emb.target().as_ref(), &image, &opts.diff)?.into_iter().fold(0.0, f64::max);
    Ok(ChainImage { source: ch.samples, image, residual })
}

/// Chain residuals over initial vectors `a` sampled uniformly in the ball of
/// radius `radius` in `ℂⁿ` (the first sample is `a = 0`).
#[derive(Debug, Clone)]
pub struct ChainSweep {
    pub a: Vec<DVector<C64>>,
    pub residuals: Vec<f64>,
}

impl ChainSweep {
    pub fn max(&self) -> f64 {
        self.residuals.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn sample_ball<R: Rng + ?Sized>(n: usize, radius: f64, count: usize, rng: &mut R) -> Vec<DVector<C64>> {
    let mut out = vec![DVector::zeros(n)];
    while out.len() < count {
        let v = DVector::from_fn(n, |_, _| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        if v.norm() <= 1.0 {
            out.push(v * C64::from(radius));
        }
    }
    out.truncate(count);
    out
}

pub fn chain_preservation_sweep(
    emb: &CrEmbedding,
    point: &ChartPoint,
    a_values: &[DVector<C64>],
    t_span: f64,
    opts: &ChainOptions,
) -> Result<ChainSweep> {
    let mut residuals = Vec::with_capacity(a_values.len());
    for a in a_values {
        let st = ChainState { point: point.clone(), a: a.clone() };
        residuals.push(chain_preservation_test(emb, &st, t_span, opts)?.residual);
    }
    Ok(ChainSweep { a: a_values.to_vec(), residuals })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SffVerdict {
    TotallyGeodesic,
    NotTotallyGeodesic,
    NotEvaluated,
}

#[derive(Debug, Clone)]
pub struct SffReport {
    pub sff_norm: f64,
    /// `‖R̂_{αā}‖` in the adapted frame.
    pub mixed_ricci_norm: f64,
    /// Largest chart derivative of the target scalar curvature.
    pub scalar_gradient: f64,
    pub verdict: SffVerdict,
}

pub fn sff_comparison_report(emb: &CrEmbedding, x: &ChartPoint) -> Result<SffReport> {
    let opts = DiffOptions::default();
    let n = emb.n();
    let nh = emb.n_hat();
    let ac = adapted_connection(emb, x)?;
    let sff = sff_from(&ac, n);
    let tgt = emb.scaled_target();
    let c = curvature_with(tgt.as_ref(), &ac.pair.image, &opts)?;
    // adapted target frame vectors ẽ_A = Σ_B conj(U[A][B]) L̂_B
    let lh = &c.connection.frame.l;
    let e: Vec<DVector<C64>> = (0..nh)
        .map(|a| (0..nh).fold(DVector::zeros(lh.nrows()), |s, b| s + lh.column(b) * ac.pair.u[(a, b)].conj()))
        .collect();
    let mut mixed: f64 = 0.0;
    for a in 0..n {
        for b in n..nh {
            let eb = e[b].map(|z| z.conj());
            let r: C64 = (0..nh).map(|cc| c.pi_on(cc, cc, &e[a], &eb)).sum();
            mixed += r.norm_sqr();
        }
    }
    let field = |y: &ChartPoint| Ok(DVector::from_element(1, C64::from(curvature_with(tgt.as_ref(), y, &opts)?.scalar)));
    let mut grad: f64 = 0.0;
    for k in 0..tgt.dim() {
        let mut ek = DVector::zeros(tgt.dim());
        ek[k] = 1.0;
        grad = grad.max(numerics::directional(&field, &ac.pair.image, &ek, opts.covariant)?[0].norm());
    }
    let verdict = if grad > 1e-6 {
        SffVerdict::NotEvaluated
    } else if sff.norm() < EPS_SFF {
        SffVerdict::TotallyGeodesic
    } else {
        SffVerdict::NotTotallyGeodesic
    };
    Ok(SffReport { sff_norm: sff.norm(), mixed_ricci_norm: mixed.sqrt(), scalar_gradient: grad, verdict })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::sample_point;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn x0() -> ChartPoint {
        DVector::from_vec(vec![0.3, -0.2, 0.4])
    }

    #[test]
    fn linear_basics() {
        let e = linear_sphere_embedding(1, 2).unwrap();
        assert!((e.scale() - 1.0).abs() < 1e-12);
        let x = e.source().base_point();
        assert!(e.cr_residual(&x).unwrap() < 1e-12);
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = sample_point(e.source().as_ref(), &mut r, 0.8);
            assert_eq!(e.rank(&x).unwrap(), 3);
            assert!((e.ambient_image(&x).unwrap().norm_squared() - 1.0).abs() < 1e-14);
            let y = e.map(&x).unwrap();
            let e = DVector::from_vec(vec![x[0], x[1], 0.0, 0.0, x[2]]);
            assert!((y - e).amax() < 1e-14);
        }
    }

    #[test]
    fn whitney_basics() {
        let e = whitney_embedding().unwrap();
        assert!((e.scale() - 2.0).abs() < 1e-10, "{}", e.scale());
        let mut r = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x = sample_point(e.source().as_ref(), &mut r, 1.0);
            assert!((e.ambient_image(&x).unwrap().norm_squared() - 1.0).abs() < 1e-14);
        }
        for _ in 0..10 {
            let x = sample_point(e.source().as_ref(), &mut r, 0.8);
            assert!(e.cr_residual(&x).unwrap() < 1e-10);
            assert_eq!(e.rank(&x).unwrap(), 3);
        }
    }

    #[test]
    fn whitney_differential_matches_fd() {
        let e = whitney_embedding().unwrap();
        let x = x0();
        let df = e.differential(&x).unwrap();
        let f = |y: &ChartPoint| Ok(numerics::to_complex(&e.map(y)?));
        let j = numerics::jacobian(&f, &x, FRAME_FD).unwrap();
        let err = (j.map(|c| c.re) - df).amax();
        assert!(err < 1e-7, "{err:e}");
    }

    #[test]
    fn adapted_pairs() {
        for e in [linear_sphere_embedding(1, 2).unwrap(), whitney_embedding().unwrap(), heisenberg_inclusion(1, 2).unwrap()] {
            let p = adapt_coframes(&e, &x0()).unwrap();
            assert!(p.max_residual() < 1e-8, "{}", e.name());
        }
        let lin = adapt_coframes(&linear_sphere_embedding(1, 2).unwrap(), &x0()).unwrap();
        assert_eq!(lin.residual_normal, 0.0);
        let s: ModelRef = Arc::new(sphere_model(1).unwrap());
        let id = identity_embedding(s.clone(), true).unwrap();
        let p = adapt_coframes(&id, &x0()).unwrap();
        assert!(p.max_residual() < 1e-15);
        assert!(numerics::max_abs(&(p.target.theta_alpha - s.coframe(&x0()).unwrap().theta_alpha)) < 1e-15);
    }

    #[test]
    fn sff_controls() {
        let lin = second_fundamental_form(&linear_sphere_embedding(1, 2).unwrap(), &x0()).unwrap();
        assert!(lin.norm() < 1e-8);
        let w = second_fundamental_form(&whitney_embedding().unwrap(), &x0()).unwrap();
        assert!(w.norm() > 0.1, "{}", w.norm());
        assert!(w.symmetry_defect < 1e-8);
        let s: ModelRef = Arc::new(sphere_model(1).unwrap());
        let id = second_fundamental_form(&identity_embedding(s, true).unwrap(), &x0()).unwrap();
        assert!(id.omega.is_empty());
    }

    #[test]
    fn lift_controls() {
        let lin = lift_condition(&linear_sphere_embedding(1, 2).unwrap(), &x0()).unwrap();
        assert!(lin.c_norm < 1e-7 && lin.trace_residual.unwrap() < 1e-7);
        assert_eq!(lin.verdicts_agree, Some(true));
        let w = lift_condition(&whitney_embedding().unwrap(), &x0()).unwrap();
        assert!((w.c[(0, 0)] - C64::new(0.0, 0.5)).norm() < 1e-8);
        assert!(w.trace_residual.unwrap() > 1e-3);
        assert!(w.gauss_defect.unwrap() < 1e-8);
        assert_eq!(w.verdicts_agree, Some(true));
        let s: ModelRef = Arc::new(sphere_model(1).unwrap());
        let id = lift_condition(&identity_embedding(s, true).unwrap(), &x0()).unwrap();
        assert!(id.c_norm < 1e-9);
    }

    #[test]
    fn lemma7_whitney() {
        let e = whitney_embedding().unwrap();
        let r = covariant_derivative_sff(&e, &x0()).unwrap();
        let d = covariant_derivative_sff_with(&e, &x0(), Lemma7Variant { sff_scale: 2.0, ..Default::default() }).unwrap();
        let f = covariant_derivative_sff_with(&e, &x0(), Lemma7Variant { flip_normal_connection: true, ..Default::default() }).unwrap();
        assert!(r.residual < 1e-5 && r.derivative_norm > 1.0);
        assert!(d.residual < 1e-5);
        assert!(f.residual > 0.1);
    }

    #[test]
    fn trace_lemma_examples() {
        let z = vec![C64::from(0.0); 4];
        let v = trace_lemma_check(&z, 2, 1, 1e-10).unwrap();
        assert!(v.holds && v.residual == 0.0);
        let mut w = z.clone();
        w[0] = C64::from(1.0);
        assert!(!trace_lemma_check(&w, 2, 1, 1e-10).unwrap().holds);
        let mut a = z.clone();
        a[1] = C64::from(1.0);
        assert!(trace_lemma_check(&a, 2, 1, 1e-10).is_err());
    }
}
