mod policy;

use criterion::{criterion_group, criterion_main};

criterion_group!(
    benches,
    identity::bench,
    issuance::bench,
    policy::bench,
    scenario::bench
);
criterion_main!(benches);
