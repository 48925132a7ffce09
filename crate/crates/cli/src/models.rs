//! Builders for the two model families the experiments use: a homogeneous
//! latent chain over time (dynamical network) and a layered binary-output
//! generator. Both return plain model documents, so they can be serialized
//! to JSON configs or built directly into networks.

use auxinfer_core::{ConditionalSpec, Family, ModelDocument, ParamRefs, VarKind, VariableDecl};
use std::collections::BTreeMap;

/// Homogeneous dynamical network of the given length. The initial state
/// `z_t0` has an isotropic Gaussian prior; every later state follows
/// `z_t{t} ~ N(tanh(W_z z_t{t-1} + b_z), diag e^{2 ls_z})` and every
/// observation follows `x_t{t} ~ N(tanh(W_x z_t{t} + b_x), diag e^{2 ls_x})`.
/// Transition and emission parameters are shared across timesteps.
pub fn dbn_chain_model(length: usize, latent_dim: usize, obs_dim: usize) -> ModelDocument {
    let mut variables = Vec::new();
    let mut conditionals = Vec::new();
    for t in 0..length {
        let z = format!("z_t{t}");
        variables.push(VariableDecl {
            name: z.clone(),
            dim: latent_dim,
            kind: VarKind::LatentContinuous,
        });
        if t == 0 {
            conditionals.push(ConditionalSpec {
                child: z.clone(),
                parents: vec![],
                family: Family::GaussianIsotropicPrior,
                params: ParamRefs {
                    weights: vec![],
                    bias: None,
                    log_sigma: Some("ls_z0".into()),
                },
                generator: None,
            });
        } else {
            conditionals.push(ConditionalSpec {
                child: z.clone(),
                parents: vec![format!("z_t{}", t - 1)],
                family: Family::GaussianAffineTanh,
                params: ParamRefs {
                    weights: vec!["w_z".into()],
                    bias: Some("b_z".into()),
                    log_sigma: Some("ls_z".into()),
                },
                generator: None,
            });
        }

        let x = format!("x_t{t}");
        variables.push(VariableDecl {
            name: x.clone(),
            dim: obs_dim,
            kind: VarKind::Observed,
        });
        conditionals.push(ConditionalSpec {
            child: x,
            parents: vec![z],
            family: Family::GaussianAffineTanh,
            params: ParamRefs {
                weights: vec!["w_x".into()],
                bias: Some("b_x".into()),
                log_sigma: Some("ls_x".into()),
            },
            generator: None,
        });
    }
    ModelDocument {
        variables,
        conditionals,
        priors: BTreeMap::new(),
    }
}

/// Layered generator for binary observations: `z1` has an isotropic
/// Gaussian prior, each deeper layer follows
/// `z{k} ~ N(tanh(W z{k-1} + b), diag e^{2 ls})` with its own parameters,
/// and the observation `x` is Bernoulli with sigmoid logits driven by the
/// deepest layer. `latent_dims[0]` is the root layer's width.
pub fn layered_binary_model(latent_dims: &[usize], obs_dim: usize) -> ModelDocument {
    assert!(!latent_dims.is_empty(), "need at least one latent layer");
    let mut variables = Vec::new();
    let mut conditionals = Vec::new();
    for (i, &dim) in latent_dims.iter().enumerate() {
        let k = i + 1;
        let z = format!("z{k}");
        variables.push(VariableDecl {
            name: z.clone(),
            dim,
            kind: VarKind::LatentContinuous,
        });
        if i == 0 {
            conditionals.push(ConditionalSpec {
                child: z,
                parents: vec![],
                family: Family::GaussianIsotropicPrior,
                params: ParamRefs {
                    weights: vec![],
                    bias: None,
                    log_sigma: Some(format!("ls_z{k}")),
                },
                generator: None,
            });
        } else {
            conditionals.push(ConditionalSpec {
                child: z,
                parents: vec![format!("z{i}")],
                family: Family::GaussianAffineTanh,
                params: ParamRefs {
                    weights: vec![format!("w_z{k}")],
                    bias: Some(format!("b_z{k}")),
                    log_sigma: Some(format!("ls_z{k}")),
                },
                generator: None,
            });
        }
    }

    variables.push(VariableDecl {
        name: "x".into(),
        dim: obs_dim,
        kind: VarKind::Observed,
    });
    conditionals.push(ConditionalSpec {
        child: "x".into(),
        parents: vec![format!("z{}", latent_dims.len())],
        family: Family::BernoulliAffineSigmoid,
        params: ParamRefs {
            weights: vec!["w_x".into()],
            bias: Some("b_x".into()),
            log_sigma: None,
        },
        generator: None,
    });

    ModelDocument {
        variables,
        conditionals,
        priors: BTreeMap::new(),
    }
}
