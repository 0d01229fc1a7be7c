use criterion::{criterion_group, criterion_main, Criterion};

use stancefact_bench::{case_script, scripted_retriever, CASE_STATEMENT};
use stancefact_core::Stance;

fn sessions(c: &mut Criterion) {
    let r = scripted_retriever(&case_script());
    let mut group = c.benchmark_group("retrieval");
    group.sample_size(20);
    group.bench_function("create_session", |b| {
        b.iter(|| r.create_session("bench", CASE_STATEMENT, Stance::Support).expect("session"))
    });
    group.bench_function("create_and_expand", |b| {
        b.iter(|| {
            let mut tree = r.create_session("bench", CASE_STATEMENT, Stance::Support).expect("session");
            let node = tree.recommended_node.expect("recommendation");
            r.expand(&mut tree, node, Stance::Support).expect("expansion")
        })
    });
    group.finish();
}

criterion_group!(benches, sessions);
criterion_main!(benches);
