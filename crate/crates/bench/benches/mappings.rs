use acrl::mappings::{map_alpha, map_closest, map_radial, select_center};
use acrl::optim::{chebyshev_center, project, projection_jacobian};
use acrl::Family;
use acrl_bench::{instance, queries};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn projection(c: &mut Criterion) {
    let mut g = c.benchmark_group("project");
    for (family, d) in [(Family::L2, 2), (Family::O, 2), (Family::O, 6), (Family::M, 6), (Family::OS, 6)] {
        let inst = instance(family, d);
        let qs = queries(d, 64);
        g.bench_with_input(BenchmarkId::new(family.name(), d), &qs, |b, qs| {
            b.iter(|| qs.iter().map(|q| project(black_box(q), &inst).unwrap().point[0]).sum::<f64>())
        });
    }
    g.finish();

    let inst = instance(Family::O, 6);
    let qs = queries(6, 64);
    let results: Vec<_> = qs.iter().map(|q| project(q, &inst).unwrap()).collect();
    c.bench_function("projection_jacobian/O/6", |b| {
        b.iter(|| results.iter().filter_map(|r| projection_jacobian(black_box(r), &inst).ok()).count())
    });
    c.bench_function("chebyshev_center/O/6", |b| b.iter(|| chebyshev_center(black_box(&inst)).unwrap().1));
}

fn mappings(c: &mut Criterion) {
    let mut g = c.benchmark_group("map");
    for (family, d) in [(Family::L2, 2), (Family::O, 6)] {
        let inst = instance(family, d);
        let center = select_center(&inst).unwrap();
        let qs = queries(d, 64);
        let id = format!("{}/{d}", family.name());
        g.bench_function(BenchmarkId::new("closest", &id), |b| {
            b.iter(|| qs.iter().map(|q| map_closest(black_box(q), &inst, true).unwrap().action[0]).sum::<f64>())
        });
        g.bench_function(BenchmarkId::new("alpha", &id), |b| {
            b.iter(|| qs.iter().map(|q| map_alpha(black_box(q), &inst, &center).unwrap().action[0]).sum::<f64>())
        });
        g.bench_function(BenchmarkId::new("radial", &id), |b| {
            b.iter(|| qs.iter().map(|q| map_radial(black_box(q), &inst, &center).unwrap().action[0]).sum::<f64>())
        });
    }
    g.finish();
}

criterion_group!(benches, projection, mappings);
criterion_main!(benches);
