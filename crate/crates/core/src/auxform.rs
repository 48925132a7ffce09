//! Rewrites a network with continuous Gaussian latents into an equivalent
//! form where every latent is a deterministic function of fresh independent
//! root noise. Each latent z with conditional mean m and scale sigma becomes
//! z = m + sigma * e (root e standard normal) or z = m + sigma * Phi^-1(e)
//! (root e uniform), applied recursively in topological order. Observed
//! factors are evaluated at the generated values; only the root densities
//! replace the latent factors, so gradients flow through the whole ancestry
//! instead of stopping at each latent's Markov blanket.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Open01, StandardNormal};

use crate::error::{Error, Result};
use crate::grad::{Compiled, EPSILON_CLAMP};
use crate::model::{Assignment, BayesNet, GeneratorKind, ParameterStore, VarKind, VariableDecl};

/// One latent's generator: which root drives it and how.
#[derive(Debug, Clone)]
pub(crate) struct GenSpec {
    pub(crate) latent: usize,
    pub(crate) root_name: String,
    pub(crate) kind: GeneratorKind,
}

/// The transformed network: the base graph plus one auxiliary root per
/// continuous latent, in latent topological order.
#[derive(Debug, Clone)]
pub struct AuxiliaryNet {
    base: BayesNet,
    gens: Vec<GenSpec>,
    variables: Vec<VariableDecl>,
    root_names: Vec<String>,
    latent_names: Vec<String>,
}

/// Build the auxiliary form. Every continuous latent must have a Gaussian
/// conditional; anything else has no location-scale representation here.
pub fn to_auxiliary(net: &BayesNet) -> Result<AuxiliaryNet> {
    let mut taken: std::collections::BTreeSet<String> =
        net.variables().iter().map(|v| v.name.clone()).collect();
    let mut gens = Vec::new();
    for &v in net.topo_order() {
        let decl = net.var(v);
        match decl.kind {
            VarKind::Observed => {}
            VarKind::LatentContinuous => {
                let cond = net.conditional_for(v);
                if !cond.family.is_gaussian() {
                    return Err(Error::UnsupportedFamily(format!(
                        "latent {} has family {:?}, which has no location-scale form",
                        decl.name, cond.family
                    )));
                }
                let mut root = format!("eps_{}", decl.name);
                while taken.contains(&root) {
                    root.insert(0, '_');
                }
                taken.insert(root.clone());
                gens.push(GenSpec {
                    latent: v,
                    root_name: root,
                    kind: cond.generator.unwrap_or_default(),
                });
            }
            VarKind::LatentDeterministic | VarKind::AuxiliaryRoot => {
                return Err(Error::Domain(format!(
                    "variable {} is already auxiliary-form ({:?})",
                    decl.name, decl.kind
                )));
            }
        }
    }

    let mut variables: Vec<VariableDecl> = net
        .variables()
        .iter()
        .map(|d| {
            let mut d = d.clone();
            if d.kind == VarKind::LatentContinuous {
                d.kind = VarKind::LatentDeterministic;
            }
            d
        })
        .collect();
    for g in &gens {
        variables.push(VariableDecl {
            name: g.root_name.clone(),
            dim: net.var(g.latent).dim,
            kind: VarKind::AuxiliaryRoot,
        });
    }
    let root_names = gens.iter().map(|g| g.root_name.clone()).collect();
    let latent_names = gens
        .iter()
        .map(|g| net.var(g.latent).name.clone())
        .collect();
    Ok(AuxiliaryNet {
        base: net.clone(),
        gens,
        variables,
        root_names,
        latent_names,
    })
}

impl AuxiliaryNet {
    pub fn base(&self) -> &BayesNet {
        &self.base
    }

    /// Variable declarations after the rewrite: former latents become
    /// deterministic nodes and one root is appended per latent.
    pub fn variables(&self) -> &[VariableDecl] {
        &self.variables
    }

    /// Root names, in latent topological order.
    pub fn root_names(&self) -> &[String] {
        &self.root_names
    }

    /// Latent names, aligned with `root_names`.
    pub fn latent_names(&self) -> &[String] {
        &self.latent_names
    }

    pub(crate) fn generators(&self) -> &[GenSpec] {
        &self.gens
    }

    /// The root driving a latent, if the name is one of the base latents.
    pub fn root_for(&self, latent: &str) -> Option<&str> {
        self.latent_names
            .iter()
            .position(|n| n == latent)
            .map(|i| self.root_names[i].as_str())
    }

    /// Draw the root noise: standard normal rows for location-scale
    /// generators, open-interval uniforms for inverse-cdf ones. Row-major
    /// per root, so equal seeds give bit-identical assignments.
    pub fn sample_epsilon<R: Rng>(&self, rows: usize, rng: &mut R) -> Assignment {
        let mut asg = Assignment::new(rows);
        for g in &self.gens {
            let dim = self.base.var(g.latent).dim;
            let mut m = Array2::zeros((rows, dim));
            match g.kind {
                GeneratorKind::LocationScale => {
                    for v in m.iter_mut() {
                        *v = rng.sample(StandardNormal);
                    }
                }
                GeneratorKind::InverseCdf => {
                    for v in m.iter_mut() {
                        let u: f64 = rng.sample(Open01);
                        *v = u.clamp(EPSILON_CLAMP, 1.0 - EPSILON_CLAMP);
                    }
                }
            }
            asg.insert(g.root_name.clone(), m).expect("root names are unique");
        }
        asg
    }

    /// Run the generators forward: the latent values implied by the roots,
    /// as a plain assignment keyed by the original latent names. Same inputs
    /// give bit-identical outputs.
    pub fn generate_latents(
        &self,
        observed: &Assignment,
        epsilon: &Assignment,
        params: &ParameterStore,
    ) -> Result<Assignment> {
        let compiled = Compiled::auxiliary(self);
        let trace = compiled.trace(observed, Some(epsilon), params)?;
        let mut out = Assignment::new(observed.rows());
        for (name, value) in compiled.generated_latents(&trace) {
            out.insert(name, value)?;
        }
        Ok(out)
    }

    /// Auxiliary-form log density: observed factors evaluated at the
    /// generated latents, plus the root densities for location-scale
    /// generators. With no latents this equals the base log joint exactly.
    pub fn log_joint(
        &self,
        observed: &Assignment,
        epsilon: &Assignment,
        params: &ParameterStore,
    ) -> Result<f64> {
        Compiled::auxiliary(self).value(observed, Some(epsilon), params)
    }
}
