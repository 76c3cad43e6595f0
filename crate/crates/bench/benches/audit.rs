use chaoskit_core::audit::{verify, AuditAction, AuditChain};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use serde_json::json;

fn chain(n: u64) -> AuditChain {
    let mut chain = AuditChain::in_memory();
    for i in 0..n {
        chain
            .append("bench", AuditAction::CheckRun, i * 500, &json!({ "stage": 0, "evaluation": i, "passed": true }))
            .unwrap();
    }
    chain
}

fn append(c: &mut Criterion) {
    let mut g = c.benchmark_group("audit");
    g.throughput(Throughput::Elements(1000));
    g.bench_function("append_1000", |b| b.iter(|| chain(1000).head()));
    let bytes = chain(1000).to_jsonl();
    g.bench_function("verify_1000", |b| {
        b.iter_batched(|| bytes.clone(), |bytes| verify(&bytes), BatchSize::SmallInput)
    });
    g.finish();
}

criterion_group!(benches, append);
criterion_main!(benches);
