//! Shared setup for the criterion benchmarks: a mid-size dynamical-network
//! model with data, parameters, and noise drawn from fixed seeds.

use auxinfer::data::{generate_dbn_data, DbnSpec};
use auxinfer_core::{to_auxiliary, Assignment, AuxiliaryNet, BayesNet, ParameterStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Everything a gradient or sampling benchmark needs, built once.
pub struct BenchSetup {
    pub net: BayesNet,
    pub aux: AuxiliaryNet,
    pub params: ParameterStore,
    /// Observed rows.
    pub data: Assignment,
    /// Observed rows plus latents sampled from the model.
    pub full: Assignment,
    /// Root noise for the auxiliary form, same shape as the latents.
    pub epsilon: Assignment,
}

/// A dynamical network with `rows` sequences of length 10 and width 10,
/// matching the comparison experiment's shape.
pub fn dbn_setup(rows: usize) -> BenchSetup {
    let spec = DbnSpec {
        length: 10,
        latent_dim: 10,
        obs_dim: 10,
        rows,
        seed: 2024,
    };
    let (dataset, _truth) = generate_dbn_data(&spec).expect("valid spec");
    let (net, template) = auxinfer::models::dbn_chain_model(10, 10, 10)
        .build()
        .expect("valid model");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = template;
    params.init_gaussian(0.1, &mut rng);

    let data = dataset.observed;
    let latents = net
        .sample_latents_given(&data, &params, &mut rng)
        .expect("sampling");
    let mut full = data.clone();
    for (name, m) in latents.iter() {
        full.insert(name.clone(), m.clone()).expect("insert");
    }

    let aux = to_auxiliary(&net).expect("gaussian latents");
    let epsilon = aux.sample_epsilon(data.rows(), &mut rng);

    BenchSetup {
        net,
        aux,
        params,
        data,
        full,
        epsilon,
    }
}
