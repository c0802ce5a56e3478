//! Fixtures shared by the benchmarks.

use fedval_core::data::{gen_synthetic, SyntheticSpec};
use fedval_core::model::{init_params, Activation};
use fedval_core::{ClientUpdate, Dataset, MlpSpec, ParamVector, ValidationReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random per-label and overall losses for `clients` clients.
pub fn random_report(clients: usize, labels: usize, seed: u64) -> ValidationReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let label_losses = (0..clients)
        .map(|_| (0..labels).map(|_| rng.random_range(0.05..4.0)).collect())
        .collect();
    let overall = (0..clients).map(|_| rng.random_range(0.05..4.0)).collect();
    ValidationReport::from_parts(label_losses, overall, vec![], vec![]).expect("valid losses")
}

/// `clients` random updates of length `dim`.
pub fn random_updates(clients: usize, dim: usize, seed: u64) -> Vec<ClientUpdate> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..clients)
        .map(|id| ClientUpdate {
            client_id: id,
            delta: ParamVector::new((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()),
            sample_count: 100,
        })
        .collect()
}

/// The MLP used by the scaled experiments.
pub fn experiment_model() -> MlpSpec {
    MlpSpec {
        layer_sizes: vec![20, 32, 10],
        activation: Activation::Relu,
        seed: 3,
    }
}

/// One client's worth of data for [`experiment_model`].
pub fn client_data(samples: usize) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        classes: 10,
        features: 20,
        samples,
        separation: 5.0,
        seed: 1,
        groups: 0,
    })
    .expect("valid synthetic spec")
}

pub fn initial_params() -> ParamVector {
    init_params(&experiment_model()).expect("valid model")
}
