use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gcnm_bench::fixture;
use gcnm_core::fem::{forward_and_jacobian, simulate_voltages};
use gcnm_core::gnn::{block_backward, block_forward, init_params, BlockSchedule};
use gcnm_core::mesh::{element_adjacency, generate_disk_mesh, normalized_adjacency};
use gcnm_core::recon::{build_tv_matrix, lm_update, tv_update};
use nalgebra::DVector;
use std::hint::black_box;

fn mesh_generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("mesh");
    g.sample_size(10);
    for n in [1000, 4000] {
        g.bench_with_input(BenchmarkId::new("disk", n), &n, |b, &n| {
            b.iter(|| generate_disk_mesh(140.0, 16, 25.0, n, 1).unwrap())
        });
    }
    g.finish();
}

fn forward(c: &mut Criterion) {
    let mut g = c.benchmark_group("fem");
    g.sample_size(20);
    for n in [1000, 4000] {
        let f = fixture(n);
        g.bench_with_input(BenchmarkId::new("forward", n), &f, |b, f| {
            b.iter(|| simulate_voltages(&f.model, black_box(&f.sigma), &f.z, &f.patterns).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("forward_and_jacobian", n), &f, |b, f| {
            b.iter(|| forward_and_jacobian(&f.model, black_box(&f.sigma), &f.z, &f.patterns).unwrap())
        });
    }
    g.finish();
}

fn updates(c: &mut Criterion) {
    let f = fixture(1000);
    let (sol, j) = forward_and_jacobian(&f.model, &f.sigma, &f.z, &f.patterns).unwrap();
    let u = sol.voltages.clone();
    let v = &u * 1.01;
    let tv = build_tv_matrix(&f.mesh);
    let mut g = c.benchmark_group("recon");
    g.sample_size(20);
    g.bench_function("lm_update", |b| b.iter(|| lm_update(&j, &u, &v, 10.0).unwrap()));
    g.bench_function("tv_update", |b| {
        b.iter(|| tv_update(&j, &u, &v, &f.sigma, &tv, 0.005, 1e-8).unwrap())
    });
    g.finish();
}

fn gcn_block(c: &mut Criterion) {
    let f = fixture(1000);
    let s = normalized_adjacency(&element_adjacency(&f.mesh));
    let p = init_params(1, &BlockSchedule::standard());
    let x = f.sigma.clone();
    let dx = DVector::from_fn(x.len(), |i, _| 1e-3 * (i as f64).sin());
    let (y, cache) = block_forward(&s, &x, &dx, &p).unwrap();
    let dy = y.map(|t| t - 0.4);
    let mut g = c.benchmark_group("gcn");
    g.sample_size(20);
    g.bench_function("block_forward", |b| b.iter(|| block_forward(&s, black_box(&x), &dx, &p).unwrap()));
    g.bench_function("block_backward", |b| b.iter(|| block_backward(&cache, &s, &p, black_box(&dy)).unwrap()));
    g.finish();
}

criterion_group!(benches, mesh_generation, forward, updates, gcn_block);
criterion_main!(benches);
