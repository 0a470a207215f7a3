//! Task runners. Each writes its artifacts through the [`Writer`]; failures
//! come back as a [`RunError`], which maps to an exit status.

use std::sync::Arc;

use crlab_core::chains::{chain_residual_profile, integrate_chain, ChainOptions};
use crlab_core::curvature::{
    chern_moser_with, curvature_with, lemma1_form_of, pseudo_einstein_residual_of, DiffOptions, PolygonLoop,
};
use crlab_core::embeddings::{
    adapt_coframes, chain_preservation_sweep, heisenberg_inclusion, lift_condition, linear_sphere_embedding, sample_ball,
    whitney_embedding,
};
use crlab_core::fefferman::{integrate_null_geodesic, isometric_lift, null_lift_with, FeffermanOptions};
use crlab_core::models::{heisenberg_model, sample_point, sphere_model, ModelRef};
use crlab_core::numerics::{FdSpec, Stencil};
use crlab_core::ode::{IntegrationOptions, Method};
use crlab_core::{ChainState, CrEmbedding, CrError, DMatrix, DVector, Model, C64};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ConfigError, EmbeddingKind, ModelName, RunConfig, SuiteKind, TaskKind};
use crate::output::Writer;

#[derive(Debug)]
pub enum RunError {
    Validation(ConfigError),
    Numerical(String),
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Validation(_) => 2,
            RunError::Numerical(_) => 3,
            RunError::Io(_) => 1,
        }
    }
}

impl From<CrError> for RunError {
    fn from(e: CrError) -> Self {
        RunError::Numerical(e.to_string())
    }
}

impl From<std::io::Error> for RunError {
    fn from(e: std::io::Error) -> Self {
        RunError::Io(e.to_string())
    }
}

type Complex = [f64; 2];

fn c2(z: C64) -> Complex {
    [z.re, z.im]
}

fn cmatrix(m: &DMatrix<C64>) -> Vec<Vec<Complex>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| c2(m[(i, j)])).collect()).collect()
}

fn diff_options(cfg: &RunConfig) -> DiffOptions {
    DiffOptions {
        curvature: FdSpec::new(cfg.numerics.fd_step, Stencil::Central4),
        covariant: FdSpec::new(cfg.numerics.covariant_fd_step, Stencil::Central4),
    }
}

fn integration(cfg: &RunConfig) -> IntegrationOptions {
    let method = match cfg.numerics.adaptive {
        Some(a) => Method::Adaptive { rtol: a.rtol, atol: a.atol },
        None => Method::Rk4,
    };
    IntegrationOptions { step: cfg.numerics.step, method }
}

fn build_model(cfg: &RunConfig) -> Result<ModelRef, RunError> {
    let spec = cfg.model.as_ref().ok_or_else(|| RunError::Validation(ConfigError { field: "model".into(), message: "required".into() }))?;
    Ok(match spec.name {
        ModelName::Heisenberg => Arc::new(heisenberg_model(spec.n)?),
        ModelName::Sphere => Arc::new(sphere_model(spec.n)?),
    })
}

fn initial_point(cfg: &RunConfig, model: &dyn Model) -> Result<DVector<f64>, RunError> {
    let x = match &cfg.initial.point {
        Some(p) => DVector::from_column_slice(p),
        None => model.base_point(),
    };
    if !model.in_domain(&x) {
        return Err(RunError::Validation(ConfigError {
            field: "initial.point".into(),
            message: format!("outside the chart domain of {}", model.name()),
        }));
    }
    Ok(x)
}

fn initial_a(cfg: &RunConfig, n: usize) -> DVector<C64> {
    match &cfg.initial.a {
        Some(a) => DVector::from_iterator(n, a.iter().map(|p| C64::new(p[0], p[1]))),
        None => DVector::zeros(n),
    }
}

/// `x1, y1, …, xn, yn, u`
fn chart_columns(n: usize) -> Vec<String> {
    let mut h: Vec<String> = (1..=n).flat_map(|a| [format!("x{a}"), format!("y{a}")]).collect();
    h.push("u".into());
    h
}

fn stop_message(stop: &Option<CrError>) -> Option<String> {
    stop.as_ref().map(|e| e.to_string())
}

pub fn run(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    match cfg.task {
        TaskKind::Chain => chain_task(cfg, w),
        TaskKind::Geodesic => geodesic_task(cfg, w),
        TaskKind::CurvatureReport => curvature_task(cfg, w),
        TaskKind::EmbedVerify => embed_task(cfg, w),
        TaskKind::Suite => suite_task(cfg, w),
    }
}

// ---------------------------------------------------------------------------
// chain

#[derive(Serialize)]
struct ChainSummary {
    model: String,
    point: Vec<f64>,
    a: Vec<Complex>,
    step: f64,
    t_span: f64,
    samples: usize,
    t_end: f64,
    completed: bool,
    stop: Option<String>,
    max_chain_residual: Option<f64>,
    csv: String,
}

fn chain_task(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let model = build_model(cfg)?;
    let n = model.n();
    let x = initial_point(cfg, model.as_ref())?;
    let a = initial_a(cfg, n);
    let opts = ChainOptions { integration: integration(cfg), blowup: cfg.numerics.blowup, diff: diff_options(cfg) };
    let curve = integrate_chain(model.as_ref(), &ChainState { point: x.clone(), a: a.clone() }, cfg.numerics.t_span, &opts)?;

    let has_ambient = curve.samples.first().is_some_and(|s| s.ambient.is_some());
    let mut header = vec!["t".to_string()];
    header.extend(chart_columns(n));
    if has_ambient {
        for k in 0..=n {
            header.push(format!("Z{k}_re"));
            header.push(format!("Z{k}_im"));
        }
    }
    header.push("a_norm".into());
    let rows: Vec<Vec<f64>> = curve
        .samples
        .iter()
        .zip(&curve.states)
        .map(|(s, st)| {
            let mut r = vec![s.t];
            r.extend(s.point.iter());
            if let Some(z) = &s.ambient {
                r.extend(z.iter().flat_map(|c| [c.re, c.im]));
            }
            r.push(st.a.norm());
            r
        })
        .collect();
    let csv = w.csv("", &header, &rows)?;

    let max_chain_residual = if curve.samples.len() >= 5 {
        chain_residual_profile(model.as_ref(), &curve.samples, &opts.diff)
            .ok()
            .map(|p| p.into_iter().fold(0.0, f64::max))
    } else {
        None
    };
    let summary = ChainSummary {
        model: model.name(),
        point: x.iter().cloned().collect(),
        a: a.iter().map(|z| c2(*z)).collect(),
        step: cfg.numerics.step,
        t_span: cfg.numerics.t_span,
        samples: curve.samples.len(),
        t_end: curve.samples.last().map_or(0.0, |s| s.t),
        completed: curve.completed(),
        stop: stop_message(&curve.stop),
        max_chain_residual,
        csv,
    };
    w.json("", cfg.task.as_str(), &summary)?;
    match curve.stop {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// geodesic

#[derive(Serialize)]
struct GeodesicSummary {
    model: String,
    point: Vec<f64>,
    a: Vec<Complex>,
    fiber: f64,
    step: f64,
    t_span: f64,
    samples: usize,
    s_end: f64,
    completed: bool,
    stop: Option<String>,
    max_null_defect: f64,
    null_tolerance: f64,
    null_breach: bool,
    csv: String,
}

fn geodesic_task(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let model = build_model(cfg)?;
    let n = model.n();
    let x = initial_point(cfg, model.as_ref())?;
    let a = initial_a(cfg, n);
    let fopts = FeffermanOptions {
        diff: diff_options(cfg),
        metric_fd: FdSpec::new(cfg.numerics.metric_fd_step, Stencil::Central4),
        null_tolerance: cfg.tolerances.null,
    };
    let init = null_lift_with(model.as_ref(), &x, &a, cfg.initial.fiber, &fopts)?;
    let g = integrate_null_geodesic(model.as_ref(), &init, cfg.numerics.t_span, &integration(cfg), &fopts)?;

    let mut header = vec!["s".to_string()];
    header.extend(chart_columns(n));
    header.push("fiber".into());
    header.push("null_defect".into());
    let rows: Vec<Vec<f64>> = g
        .samples
        .iter()
        .map(|s| {
            let mut r = vec![s.s];
            r.extend(s.base.iter());
            r.push(s.fiber);
            r.push(s.null_defect);
            r
        })
        .collect();
    let csv = w.csv("", &header, &rows)?;
    if g.null_breach {
        eprintln!("warning: null defect {:e} exceeded tolerance {:e}", g.max_null_defect, cfg.tolerances.null);
    }
    let summary = GeodesicSummary {
        model: model.name(),
        point: x.iter().cloned().collect(),
        a: a.iter().map(|z| c2(*z)).collect(),
        fiber: cfg.initial.fiber,
        step: cfg.numerics.step,
        t_span: cfg.numerics.t_span,
        samples: g.samples.len(),
        s_end: g.samples.last().map_or(0.0, |s| s.s),
        completed: g.stop.is_none(),
        stop: stop_message(&g.stop),
        max_null_defect: g.max_null_defect,
        null_tolerance: cfg.tolerances.null,
        null_breach: g.null_breach,
        csv,
    };
    w.json("", cfg.task.as_str(), &summary)?;
    match g.stop {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// curvature report

#[derive(Serialize)]
struct LoopDefect {
    loop_id: usize,
    defect: f64,
}

#[derive(Serialize)]
struct CurvatureSummary {
    model: String,
    point: Vec<f64>,
    structure_residual: f64,
    connection_residual: f64,
    torsion: Vec<Vec<Complex>>,
    ricci: Vec<Vec<Complex>>,
    scalar: f64,
    expansion_residual: f64,
    bianchi_defect: f64,
    ricci_hermitian_defect: f64,
    pseudo_einstein_residual: f64,
    lemma1_form: Vec<f64>,
    loop_defects: Vec<LoopDefect>,
    /// Every loop defect is below `tolerances.loop_defect`.
    loops_closed: bool,
    d: Vec<Vec<Complex>>,
    e: Vec<Complex>,
    phi_defect: f64,
}

fn random_loops(model: &dyn Model, centre: &DVector<f64>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Vec<PolygonLoop> {
    (0..cfg.loops.count)
        .map(|_| {
            let off = sample_point(model, rng, cfg.loops.radius) - model.base_point();
            PolygonLoop::random_square(&(centre + off), cfg.loops.side, cfg.loops.nodes, rng)
        })
        .collect()
}

fn curvature_task(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let model = build_model(cfg)?;
    let x = initial_point(cfg, model.as_ref())?;
    let diff = diff_options(cfg);
    let cm = chern_moser_with(model.as_ref(), &x, &diff)?;
    let c = &cm.curvature;
    let mut rng = ChaCha8Rng::seed_from_u64(w.provenance().seed);
    let loops = random_loops(model.as_ref(), &x, cfg, &mut rng);
    let mut loop_defects = Vec::with_capacity(loops.len());
    for (i, lp) in loops.iter().enumerate() {
        let v = lp.integrate(|p| Ok(lemma1_form_of(&curvature_with(model.as_ref(), p, &diff)?)))?;
        loop_defects.push(LoopDefect { loop_id: i, defect: v.abs() });
    }
    let summary = CurvatureSummary {
        model: model.name(),
        point: x.iter().cloned().collect(),
        structure_residual: model.structure_residual(&x)?,
        connection_residual: c.connection.residual,
        torsion: cmatrix(&c.connection.torsion),
        ricci: cmatrix(&c.ricci),
        scalar: c.scalar,
        expansion_residual: c.expansion_residual,
        bianchi_defect: c.bianchi_defect(),
        ricci_hermitian_defect: c.ricci_hermitian_defect(),
        pseudo_einstein_residual: pseudo_einstein_residual_of(&c.ricci, c.scalar),
        lemma1_form: lemma1_form_of(c).iter().cloned().collect(),
        loops_closed: loop_defects.iter().all(|l| l.defect < cfg.tolerances.loop_defect),
        loop_defects,
        d: cmatrix(&cm.d),
        e: cm.e.iter().map(|z| c2(*z)).collect(),
        phi_defect: cm.phi_defect(),
    };
    w.json("", cfg.task.as_str(), &summary)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// embeddings

#[derive(Serialize)]
struct SweepEntry {
    a: Vec<Complex>,
    residual: f64,
}

#[derive(Serialize)]
struct Verdicts {
    chain_preserving: bool,
    lift_exists: bool,
    totally_geodesic: bool,
    /// The three predicates agree.
    consistent: bool,
}

#[derive(Serialize)]
struct EmbedRecord {
    embedding: String,
    point: Vec<f64>,
    image: Vec<f64>,
    scale: f64,
    cr_residual: f64,
    adapted_pair_residual: f64,
    sff_norm: f64,
    lift_residual: f64,
    chain_sweep_max: f64,
    chain_sweep: Vec<SweepEntry>,
    trace_residual: Option<f64>,
    gauss_defect: Option<f64>,
    loop_defects: Vec<LoopDefect>,
    /// Every lift-loop defect is below `tolerances.loop_defect`.
    loops_closed: bool,
    verdicts: Verdicts,
}

fn build_embedding(kind: EmbeddingKind) -> Result<CrEmbedding, RunError> {
    Ok(match kind {
        EmbeddingKind::Linear => linear_sphere_embedding(1, 2)?,
        EmbeddingKind::Whitney => whitney_embedding()?,
        EmbeddingKind::HeisenbergInclusion => heisenberg_inclusion(1, 2)?,
    })
}

fn embedding_record(emb: &CrEmbedding, cfg: &RunConfig, seed: u64) -> Result<EmbedRecord, RunError> {
    let src = emb.source();
    let x = initial_point(cfg, src.as_ref())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let avals = sample_ball(emb.n(), cfg.sweep.radius, cfg.sweep.count, &mut rng);
    let sweep_opts = ChainOptions { diff: diff_options(cfg), ..ChainOptions::rk4(cfg.sweep.step) };
    let sweep = chain_preservation_sweep(emb, &x, &avals, cfg.sweep.t_span, &sweep_opts)?;
    let pair = adapt_coframes(emb, &x)?;
    let lift = lift_condition(emb, &x)?;
    let sff_norm = lift.sff.norm();
    let loops = random_loops(src.as_ref(), &x, cfg, &mut rng);
    let il = isometric_lift(emb, std::slice::from_ref(&x), &loops, cfg.loops.nodes)?;
    let t = &cfg.tolerances;
    let chain_preserving = sweep.max() < t.chain;
    let lift_exists = lift.residual() < t.lift;
    let totally_geodesic = sff_norm < t.sff;
    Ok(EmbedRecord {
        embedding: emb.name(),
        point: x.iter().cloned().collect(),
        image: pair.image.iter().cloned().collect(),
        scale: emb.scale(),
        cr_residual: emb.cr_residual(&x)?,
        adapted_pair_residual: pair.max_residual(),
        sff_norm,
        lift_residual: lift.residual(),
        chain_sweep_max: sweep.max(),
        chain_sweep: sweep
            .a
            .iter()
            .zip(&sweep.residuals)
            .map(|(a, r)| SweepEntry { a: a.iter().map(|z| c2(*z)).collect(), residual: *r })
            .collect(),
        trace_residual: lift.trace_residual,
        gauss_defect: lift.gauss_defect,
        loop_defects: il.loop_defects.iter().enumerate().map(|(i, d)| LoopDefect { loop_id: i, defect: *d }).collect(),
        loops_closed: il.max_loop_defect() < t.loop_defect,
        verdicts: Verdicts {
            chain_preserving,
            lift_exists,
            totally_geodesic,
            consistent: chain_preserving == lift_exists && lift_exists == totally_geodesic,
        },
    })
}

fn embed_task(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let kind = cfg.embedding.expect("validated");
    let emb = build_embedding(kind)?;
    let rec = embedding_record(&emb, cfg, w.provenance().seed)?;
    w.json("", cfg.task.as_str(), &rec)?;
    Ok(())
}

#[derive(Serialize)]
struct Thresholds {
    chain: f64,
    lift: f64,
    sff: f64,
}

#[derive(Serialize)]
struct SuiteEntry {
    kind: EmbeddingKind,
    /// Expected verdict for all three predicates.
    expected: bool,
    matches_expected: bool,
    record: EmbedRecord,
}

#[derive(Serialize)]
struct SuiteSummary {
    suite: SuiteKind,
    thresholds: Thresholds,
    embeddings: Vec<SuiteEntry>,
    all_consistent: bool,
    all_match_expected: bool,
}

fn suite_task(cfg: &RunConfig, w: &mut Writer) -> Result<(), RunError> {
    let suite = cfg.suite.expect("validated");
    match suite {
        SuiteKind::Theorem1 => {
            let mut entries = Vec::new();
            for (kind, expected) in [(EmbeddingKind::Linear, true), (EmbeddingKind::Whitney, false)] {
                let emb = build_embedding(kind)?;
                let record = embedding_record(&emb, cfg, w.provenance().seed)?;
                let v = &record.verdicts;
                let matches_expected =
                    v.chain_preserving == expected && v.lift_exists == expected && v.totally_geodesic == expected;
                entries.push(SuiteEntry { kind, expected, matches_expected, record });
            }
            let summary = SuiteSummary {
                suite,
                thresholds: Thresholds { chain: cfg.tolerances.chain, lift: cfg.tolerances.lift, sff: cfg.tolerances.sff },
                all_consistent: entries.iter().all(|e| e.record.verdicts.consistent),
                all_match_expected: entries.iter().all(|e| e.matches_expected),
                embeddings: entries,
            };
            w.json("", "suite", &summary)?;
        }
    }
    Ok(())
}
