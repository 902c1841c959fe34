//! Benchmarks for the hot paths: compiled expression evaluation,
//! Euler–Maruyama throughput, flow reconstruction and residual formation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use std::hint::black_box;

use symsde_bench::{lv_model, planar_model, rotational_symmetry, small_sim};
use symsde_core::fields::ScalarField;
use symsde_core::mc::simulate;
use symsde_core::symmetry::{
    reconstruct_flow, weak_determining_residual, FlowOptions,
};

fn bench_expr_eval(c: &mut Criterion) {
    let model = lv_model();
    let field = ScalarField::parse(
        "x*(1 - y) + 0.5*x^2*ln(x) - tanh(y*z)",
        model.vars(),
    )
    .unwrap();
    let point = [1.3, 0.7, 0.4, 0.4];
    let mut scratch = Vec::new();
    c.bench_function("expr/compiled_eval", |b| {
        b.iter(|| field.eval_scratch(black_box(&point), &mut scratch).unwrap())
    });
}

fn bench_simulate(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulate");
    for (name, model) in [("bm2d", planar_model()), ("lotka_volterra", lv_model())] {
        let cfg = small_sim(256);
        let steps = (cfg.n_paths * cfg.n_steps().unwrap()) as u64;
        group.throughput(Throughput::Elements(steps));
        group.bench_function(name, |b| {
            b.iter(|| simulate(black_box(&model), black_box(&cfg)).unwrap())
        });
    }
    group.finish();
}

fn bench_flow(c: &mut Criterion) {
    let v = rotational_symmetry();
    let opts = FlowOptions::default();
    c.bench_function("flow/reconstruct_1000_steps", |b| {
        b.iter(|| {
            reconstruct_flow(
                black_box(&v),
                black_box(0.7),
                black_box(&[1.0, -0.5, 0.4]),
                0.4,
                &opts,
            )
            .unwrap()
        })
    });
}

fn bench_residual(c: &mut Criterion) {
    let model = lv_model();
    let v = symsde_core::models::lv_v_a(
        &symsde_core::models::LotkaVolterraParams {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            delta: 1.0,
            sigma_tilde: 1.0,
        },
        &symsde_core::expr::Expr::var("z"),
    )
    .unwrap();
    let grid = model.sample_grid(128);
    c.bench_function("symmetry/weak_residual_128pts", |b| {
        b.iter_batched(
            || grid.clone(),
            |g| weak_determining_residual(black_box(&model), black_box(&v), &g).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(
    benches,
    bench_expr_eval,
    bench_simulate,
    bench_flow,
    bench_residual
);
criterion_main!(benches);
