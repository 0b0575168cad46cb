//! Shared builders for the benchmark targets.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ddnkit::netspec::{build_graph, ComputeGraph, IccMode, NetworkSpec, OccMode};
use ddnkit::tensor::{Shape, TensorData};

pub fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

/// The 3-stage network used by the desk-scale training runs.
pub fn desk_graph(seed: u64) -> ComputeGraph {
    let spec = NetworkSpec::with_widths(&[8, 16, 32], 2, IccMode::Full, OccMode::All);
    build_graph(&spec, &mut rng(seed)).expect("valid spec")
}

pub fn batch_input(n: usize, size: usize, seed: u64) -> TensorData {
    TensorData::randn(Shape::new(n, 1, size, size), &mut rng(seed))
}
