//! Fixtures shared by the benchmarks.

use acrl::{ActionSpace, ConstraintInstance, ConstraintSpec, Family, JointState, Vector};

/// Instance of `family` for a `d`-joint arm at a fixed, non-trivial pose.
pub fn instance(family: Family, d: usize) -> ConstraintInstance {
    let theta: Vec<f64> = (0..d).map(|i| 0.3 + 0.4 * i as f64).collect();
    let omega: Vec<f64> = (0..d).map(|i| 0.8 - 0.3 * i as f64).collect();
    ConstraintSpec::new(family)
        .instantiate(&ActionSpace::unit(d), &JointState::new(theta, omega))
        .expect("benchmark instance")
}

/// Deterministic spread of infeasible queries.
pub fn queries(d: usize, n: usize) -> Vec<Vector> {
    (0..n).map(|k| Vector::from_fn(d, |i, _| 1.5 * ((k * 7 + i * 3) as f64 * 0.37).sin())).collect()
}
