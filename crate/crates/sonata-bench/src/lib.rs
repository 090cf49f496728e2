//! Shared fixtures for the kernel benchmarks.

use nalgebra::DMatrix;
use sonata::network::{generate_topology, metropolis_weights};
use sonata::problem::make_ridge_problem;
use sonata::surrogate::surrogate_constants;
use sonata::{CompositeProblem, MixingMatrix, SurrogateKind, SurrogateSpec, TopologyKind};

pub struct Fixture {
    pub problem: CompositeProblem,
    pub weights: MixingMatrix,
    pub spec: SurrogateSpec,
    pub x0: DMatrix<f64>,
}

/// Ridge problem on an Erdos-Renyi graph with `m` agents in dimension `d`.
pub fn fixture(m: usize, d: usize, kind: SurrogateKind) -> Fixture {
    let problem = make_ridge_problem(m, 50, d, 0.1, 1.0, 20.0, 42).expect("ridge fixture");
    let topology = generate_topology(&TopologyKind::ErdosRenyi { p: 0.3 }, m, 42).expect("topology");
    let weights = metropolis_weights(&topology).expect("weights");
    let spec = surrogate_constants(&kind, &problem).expect("surrogate");
    let x0 = DMatrix::from_fn(m, d, |i, j| ((i * d + j) as f64).sin());
    Fixture {
        problem,
        weights,
        spec,
        x0,
    }
}
