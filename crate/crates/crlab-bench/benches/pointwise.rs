use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use crlab_core::chains::chain_rhs;
use crlab_core::connection::solve_connection;
use crlab_core::curvature::{chern_moser, curvature};
use crlab_core::embeddings::{second_fundamental_form, whitney_embedding};
use crlab_core::fefferman::{christoffel, null_lift, FeffermanOptions};
use crlab_core::models::{heisenberg_model, sphere_model};
use crlab_core::{ChainState, DVector, C64};

fn point(d: usize) -> DVector<f64> {
    DVector::from_fn(d, |i, _| 0.1 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 })
}

fn pointwise(c: &mut Criterion) {
    for n in [1, 2] {
        let s = sphere_model(n).unwrap();
        let x = point(2 * n + 1);
        c.bench_function(&format!("connection_solve/sphere{n}"), |b| b.iter(|| solve_connection(&s, black_box(&x)).unwrap()));
        c.bench_function(&format!("curvature/sphere{n}"), |b| b.iter(|| curvature(&s, black_box(&x)).unwrap()));
        c.bench_function(&format!("chern_moser/sphere{n}"), |b| b.iter(|| chern_moser(&s, black_box(&x)).unwrap()));
        let st = ChainState { point: x.clone(), a: DVector::from_element(n, C64::new(0.3, -0.2)) };
        c.bench_function(&format!("chain_rhs/sphere{n}"), |b| b.iter(|| chain_rhs(&s, black_box(&st)).unwrap()));
    }
    let h = heisenberg_model(1).unwrap();
    let x = point(3);
    c.bench_function("connection_solve/heisenberg1", |b| b.iter(|| solve_connection(&h, black_box(&x)).unwrap()));

    let s = sphere_model(1).unwrap();
    let lift = null_lift(&s, &x, &DVector::from_element(1, C64::new(0.3, -0.2)), 0.0).unwrap();
    let p = lift.cpoint();
    let opts = FeffermanOptions::default();
    c.bench_function("christoffel/sphere1", |b| b.iter(|| christoffel(&s, black_box(&p), &opts).unwrap()));

    let w = whitney_embedding().unwrap();
    c.bench_function("second_fundamental_form/whitney", |b| b.iter(|| second_fundamental_form(&w, black_box(&x)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = pointwise
}
criterion_main!(benches);
