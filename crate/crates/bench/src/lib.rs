//! Fixtures shared by the criterion benches under `benches/`.

use faultloc_core::synthetic::{generate, SyntheticFault, SyntheticOptions};
use faultloc_core::MethodId;

/// One synthetic fault with `methods` covered production methods.
pub fn fault_with(methods: usize, passing_tests: usize) -> SyntheticFault {
    generate(&SyntheticOptions {
        faults: 1,
        methods,
        passing_tests,
        ..Default::default()
    })
    .remove(0)
}

/// `n` rendered entries of varying size, already in rank order.
pub fn entries(n: usize) -> Vec<(MethodId, String)> {
    (0..n)
        .map(|i| {
            let id = MethodId::new("org.bench", &format!("C{}", i % 17), &format!("m{i}"), "int");
            let body = "x".repeat(200 + (i * 37) % 1800);
            (id, body)
        })
        .collect()
}
