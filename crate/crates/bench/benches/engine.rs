use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::rngs::StdRng;
use rand::SeedableRng;

use stancefact_bench::{random_table, random_valid_fact, sample_store};
use stancefact_core::dataset::{execute_query, validate_query};
use stancefact_core::engine::compute_fact;

fn facts(c: &mut Criterion) {
    let mut rng = StdRng::seed_from_u64(7);
    let cases: Vec<_> = (0..200)
        .filter_map(|_| {
            let t = random_table(&mut rng, 10);
            random_valid_fact(&mut rng, &t, 50).map(|f| (f, t))
        })
        .collect();
    c.bench_function("compute_fact/200 random facts", |b| {
        b.iter(|| {
            for (f, t) in &cases {
                black_box(compute_fact(f, t).ok());
            }
        })
    });
}

fn queries(c: &mut Criterion) {
    let store = sample_store();
    let d = store.datasets().find(|d| d.name == "gdp_per_capita").expect("sample dataset");
    let sql = format!(
        "SELECT country, year, value FROM {} WHERE year BETWEEN 2015 AND 2021 ORDER BY value DESC LIMIT 10",
        d.id
    );
    c.bench_function("validate_query", |b| b.iter(|| black_box(validate_query(&sql, d))));
    c.bench_function("execute_query", |b| b.iter(|| black_box(execute_query(&sql, d).ok())));
}

criterion_group!(benches, facts, queries);
criterion_main!(benches);
