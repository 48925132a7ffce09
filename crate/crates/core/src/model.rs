//! Network structure: variable declarations, one conditional per variable,
//! parameter storage with Gaussian priors, and the graph queries (Markov
//! blanket, factor distance) that make gradient locality measurable.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dist::{sigmoid, Nonlin, LN_2PI};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarKind {
    #[serde(rename = "observed")]
    Observed,
    #[serde(rename = "latent-continuous")]
    LatentContinuous,
    #[serde(rename = "latent-deterministic")]
    LatentDeterministic,
    #[serde(rename = "auxiliary-root")]
    AuxiliaryRoot,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub dim: usize,
    pub kind: VarKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "gaussian-affine-tanh")]
    GaussianAffineTanh,
    #[serde(rename = "gaussian-affine-sigmoid")]
    GaussianAffineSigmoid,
    #[serde(rename = "gaussian-affine-linear")]
    GaussianAffineLinear,
    #[serde(rename = "bernoulli-affine-sigmoid")]
    BernoulliAffineSigmoid,
    #[serde(rename = "gaussian-isotropic-prior")]
    GaussianIsotropicPrior,
}

impl Family {
    pub fn is_gaussian(self) -> bool {
        !matches!(self, Family::BernoulliAffineSigmoid)
    }

    pub fn nonlinearity(self) -> Nonlin {
        match self {
            Family::GaussianAffineTanh => Nonlin::Tanh,
            Family::GaussianAffineSigmoid | Family::BernoulliAffineSigmoid => Nonlin::Sigmoid,
            Family::GaussianAffineLinear | Family::GaussianIsotropicPrior => Nonlin::None,
        }
    }
}

/// How an auxiliary root drives its generated latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum GeneratorKind {
    /// z = mean + sigma * eps with eps standard normal.
    #[serde(rename = "location-scale")]
    #[default]
    LocationScale,
    /// z = mean + sigma * inverse_cdf(eps) with eps uniform on (0, 1).
    #[serde(rename = "inverse-cdf")]
    InverseCdf,
}

/// Names of the parameter tensors a conditional reads: one weight matrix per
/// parent, a bias, and per-dimension log scales where the family has them.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamRefs {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub weights: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_sigma: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionalSpec {
    pub child: String,
    #[serde(default)]
    pub parents: Vec<String>,
    pub family: Family,
    pub params: ParamRefs,
    /// Only meaningful on continuous latents; picked up by the auxiliary
    /// transform. Defaults to location-scale.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamShape {
    Matrix(usize, usize),
    Vector(usize),
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match *self {
            ParamShape::Matrix(r, c) => r * c,
            ParamShape::Vector(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Distance between two variables counted in factors along the shortest path
/// of the bipartite factor graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorDistance {
    Hops(usize),
    Disconnected,
}

impl FactorDistance {
    pub fn hops(self) -> Option<usize> {
        match self {
            FactorDistance::Hops(h) => Some(h),
            FactorDistance::Disconnected => None,
        }
    }
}

/// Validated directed acyclic network. Every variable is the child of exactly
/// one conditional; construction caches a topological order and the shapes
/// implied for every referenced parameter.
#[derive(Debug, Clone)]
pub struct BayesNet {
    variables: Vec<VariableDecl>,
    conditionals: Vec<ConditionalSpec>,
    name_to_var: BTreeMap<String, usize>,
    /// conditional index for each variable, aligned with `variables`
    cond_of_var: Vec<usize>,
    /// parent variable indices per conditional
    parent_idx: Vec<Vec<usize>>,
    /// child variable indices per variable
    children: Vec<Vec<usize>>,
    topo: Vec<usize>,
    param_shapes: BTreeMap<String, ParamShape>,
}

impl BayesNet {
    pub fn new(variables: Vec<VariableDecl>, conditionals: Vec<ConditionalSpec>) -> Result<Self> {
        let mut name_to_var = BTreeMap::new();
        for (i, v) in variables.iter().enumerate() {
            if v.dim == 0 {
                return Err(Error::Shape(format!("variable {} has dim 0", v.name)));
            }
            if name_to_var.insert(v.name.clone(), i).is_some() {
                return Err(Error::DuplicateName(v.name.clone()));
            }
        }

        let mut cond_of_var = vec![usize::MAX; variables.len()];
        let mut parent_idx = Vec::with_capacity(conditionals.len());
        for (ci, c) in conditionals.iter().enumerate() {
            let child = *name_to_var
                .get(&c.child)
                .ok_or_else(|| Error::UnknownVariable(c.child.clone()))?;
            if cond_of_var[child] != usize::MAX {
                return Err(Error::DuplicateName(format!(
                    "variable {} is the child of two conditionals",
                    c.child
                )));
            }
            cond_of_var[child] = ci;
            let mut pidx = Vec::with_capacity(c.parents.len());
            for p in &c.parents {
                pidx.push(
                    *name_to_var
                        .get(p)
                        .ok_or_else(|| Error::UnknownVariable(p.clone()))?,
                );
            }
            parent_idx.push(pidx);
        }
        if let Some(orphan) = cond_of_var.iter().position(|&c| c == usize::MAX) {
            return Err(Error::Shape(format!(
                "variable {} has no conditional",
                variables[orphan].name
            )));
        }

        // family arity and parameter roles
        let mut param_shapes: BTreeMap<String, ParamShape> = BTreeMap::new();
        let mut claim = |name: &str, shape: ParamShape| -> Result<()> {
            match param_shapes.get(name) {
                Some(prev) if *prev != shape => Err(Error::Shape(format!(
                    "parameter {name} used with conflicting shapes"
                ))),
                _ => {
                    param_shapes.insert(name.to_string(), shape);
                    Ok(())
                }
            }
        };
        for (ci, c) in conditionals.iter().enumerate() {
            let child_dim = variables[*name_to_var.get(&c.child).unwrap()].dim;
            match c.family {
                Family::GaussianIsotropicPrior => {
                    if !c.parents.is_empty() {
                        return Err(Error::Shape(format!(
                            "isotropic prior on {} cannot have parents",
                            c.child
                        )));
                    }
                    if !c.params.weights.is_empty() || c.params.bias.is_some() {
                        return Err(Error::Shape(format!(
                            "isotropic prior on {} takes only log_sigma",
                            c.child
                        )));
                    }
                    let ls = c.params.log_sigma.as_ref().ok_or_else(|| {
                        Error::Shape(format!("isotropic prior on {} needs log_sigma", c.child))
                    })?;
                    claim(ls, ParamShape::Vector(child_dim))?;
                }
                fam => {
                    if c.params.weights.len() != c.parents.len() {
                        return Err(Error::Shape(format!(
                            "conditional for {} has {} parents but {} weight tensors",
                            c.child,
                            c.parents.len(),
                            c.params.weights.len()
                        )));
                    }
                    for (w, &pi) in c.params.weights.iter().zip(&parent_idx[ci]) {
                        claim(w, ParamShape::Matrix(child_dim, variables[pi].dim))?;
                    }
                    let b = c.params.bias.as_ref().ok_or_else(|| {
                        Error::Shape(format!("conditional for {} needs a bias", c.child))
                    })?;
                    claim(b, ParamShape::Vector(child_dim))?;
                    if fam.is_gaussian() {
                        let ls = c.params.log_sigma.as_ref().ok_or_else(|| {
                            Error::Shape(format!("conditional for {} needs log_sigma", c.child))
                        })?;
                        claim(ls, ParamShape::Vector(child_dim))?;
                    } else if c.params.log_sigma.is_some() {
                        return Err(Error::Shape(format!(
                            "bernoulli conditional for {} takes no log_sigma",
                            c.child
                        )));
                    }
                }
            }
        }

        let mut children = vec![Vec::new(); variables.len()];
        for (ci, c) in conditionals.iter().enumerate() {
            let child = *name_to_var.get(&c.child).unwrap();
            for &p in &parent_idx[ci] {
                children[p].push(child);
            }
        }
        for ch in &mut children {
            ch.sort_unstable();
            ch.dedup();
        }

        // Kahn topological sort, lowest declaration index first, so the
        // cached order is deterministic.
        let mut indeg: Vec<usize> = (0..variables.len())
            .map(|v| parent_idx[cond_of_var[v]].len())
            .collect();
        let mut ready: BTreeSet<usize> = indeg
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut topo = Vec::with_capacity(variables.len());
        while let Some(&v) = ready.iter().next() {
            ready.remove(&v);
            topo.push(v);
            for &ch in &children[v] {
                indeg[ch] -= 1;
                if indeg[ch] == 0 {
                    ready.insert(ch);
                }
            }
        }
        if topo.len() != variables.len() {
            let stuck = indeg
                .iter()
                .position(|&d| d > 0)
                .map(|i| variables[i].name.clone())
                .unwrap_or_default();
            return Err(Error::Cycle(stuck));
        }

        Ok(BayesNet {
            variables,
            conditionals,
            name_to_var,
            cond_of_var,
            parent_idx,
            children,
            topo,
            param_shapes,
        })
    }

    pub fn variables(&self) -> &[VariableDecl] {
        &self.variables
    }

    pub fn conditionals(&self) -> &[ConditionalSpec] {
        &self.conditionals
    }

    pub fn var_index(&self, name: &str) -> Result<usize> {
        self.name_to_var
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn var(&self, idx: usize) -> &VariableDecl {
        &self.variables[idx]
    }

    /// Variable indices in the cached topological order.
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn conditional_for(&self, var_idx: usize) -> &ConditionalSpec {
        &self.conditionals[self.cond_of_var[var_idx]]
    }

    pub fn parent_indices(&self, var_idx: usize) -> &[usize] {
        &self.parent_idx[self.cond_of_var[var_idx]]
    }

    pub fn child_indices(&self, var_idx: usize) -> &[usize] {
        &self.children[var_idx]
    }

    /// Shapes implied for every parameter name referenced by the network.
    pub fn param_shapes(&self) -> &BTreeMap<String, ParamShape> {
        &self.param_shapes
    }

    /// Parents, children, and co-parents of `name` (self excluded).
    pub fn markov_blanket(&self, name: &str) -> Result<BTreeSet<String>> {
        let v = self.var_index(name)?;
        let mut out = BTreeSet::new();
        for &p in self.parent_indices(v) {
            out.insert(self.variables[p].name.clone());
        }
        for &ch in &self.children[v] {
            out.insert(self.variables[ch].name.clone());
            for &co in self.parent_indices(ch) {
                out.insert(self.variables[co].name.clone());
            }
        }
        out.remove(name);
        Ok(out)
    }

    /// Shortest path between two variables counted in factors: adjacent means
    /// sharing a factor (a conditional's child+parents clique).
    pub fn factor_distance(&self, a: &str, b: &str) -> Result<FactorDistance> {
        let start = self.var_index(a)?;
        let goal = self.var_index(b)?;
        if start == goal {
            return Ok(FactorDistance::Hops(0));
        }
        // var -> vars sharing a factor with it
        let mut dist = vec![usize::MAX; self.variables.len()];
        dist[start] = 0;
        let mut frontier = std::collections::VecDeque::from([start]);
        while let Some(v) = frontier.pop_front() {
            let mut neighbors: BTreeSet<usize> = BTreeSet::new();
            // factor owned by v
            for &p in self.parent_indices(v) {
                neighbors.insert(p);
            }
            // factors owned by children of v, and factors v feeds into
            for &ch in &self.children[v] {
                neighbors.insert(ch);
                for &co in self.parent_indices(ch) {
                    neighbors.insert(co);
                }
            }
            neighbors.remove(&v);
            for n in neighbors {
                if dist[n] == usize::MAX {
                    dist[n] = dist[v] + 1;
                    if n == goal {
                        return Ok(FactorDistance::Hops(dist[n]));
                    }
                    frontier.push_back(n);
                }
            }
        }
        Ok(FactorDistance::Disconnected)
    }

    /// Joint log density over all factors and datapoint rows.
    pub fn log_joint(&self, assignment: &Assignment, params: &ParameterStore) -> Result<f64> {
        crate::grad::log_joint_value(self, assignment, params)
    }

    /// Ancestral sampling of every variable, observed included, in
    /// topological order. Row-major draw order makes runs with an equally
    /// seeded generator bit-identical.
    pub fn sample_forward<R: Rng>(
        &self,
        params: &ParameterStore,
        rows: usize,
        rng: &mut R,
    ) -> Result<Assignment> {
        params.check_against(self)?;
        let mut asg = Assignment::new(rows);
        for &v in &self.topo {
            let decl = &self.variables[v];
            let cond = self.conditional_for(v);
            let dim = decl.dim;
            let mut out = Array2::zeros((rows, dim));
            match cond.family {
                Family::GaussianIsotropicPrior => {
                    let sigma = params.vector(cond.params.log_sigma.as_ref().unwrap())?;
                    for m in 0..rows {
                        for d in 0..dim {
                            let e: f64 = rng.sample(StandardNormal);
                            out[[m, d]] = sigma[d].exp() * e;
                        }
                    }
                }
                fam => {
                    let act = self.activation(v, &asg, params)?;
                    if fam.is_gaussian() {
                        let sigma =
                            params.vector(cond.params.log_sigma.as_ref().unwrap())?;
                        for m in 0..rows {
                            for d in 0..dim {
                                let e: f64 = rng.sample(StandardNormal);
                                out[[m, d]] = act[[m, d]] + sigma[d].exp() * e;
                            }
                        }
                    } else {
                        for m in 0..rows {
                            for d in 0..dim {
                                let u: f64 = rng.gen();
                                out[[m, d]] = if u < act[[m, d]] { 1.0 } else { 0.0 };
                            }
                        }
                    }
                }
            }
            asg.insert(decl.name.clone(), out)?;
        }
        Ok(asg)
    }

    /// Ancestral draws of the continuous latents only, conditioning on the
    /// observed values in `data`. Rows come from `data`; a latent whose
    /// parent is observed reads the parent straight out of the data.
    pub fn sample_latents_given<R: Rng>(
        &self,
        data: &Assignment,
        params: &ParameterStore,
        rng: &mut R,
    ) -> Result<Assignment> {
        let rows = data.rows();
        let mut work = data.clone();
        let mut out = Assignment::new(rows);
        for &v in &self.topo {
            let decl = &self.variables[v];
            if decl.kind != VarKind::LatentContinuous {
                continue;
            }
            let cond = self.conditional_for(v);
            let dim = decl.dim;
            let mut value = Array2::zeros((rows, dim));
            match cond.family {
                Family::GaussianIsotropicPrior => {
                    let sigma = params.vector(cond.params.log_sigma.as_ref().unwrap())?;
                    for m in 0..rows {
                        for d in 0..dim {
                            let e: f64 = rng.sample(StandardNormal);
                            value[[m, d]] = sigma[d].exp() * e;
                        }
                    }
                }
                fam if fam.is_gaussian() => {
                    let act = self.activation(v, &work, params)?;
                    let sigma = params.vector(cond.params.log_sigma.as_ref().unwrap())?;
                    for m in 0..rows {
                        for d in 0..dim {
                            let e: f64 = rng.sample(StandardNormal);
                            value[[m, d]] = act[[m, d]] + sigma[d].exp() * e;
                        }
                    }
                }
                _ => {
                    return Err(Error::UnsupportedFamily(format!(
                        "latent {} is not continuous Gaussian",
                        decl.name
                    )))
                }
            }
            work.insert(decl.name.clone(), value.clone())?;
            out.insert(decl.name.clone(), value)?;
        }
        Ok(out)
    }

    /// Batched affine activation of a variable's conditional given parent
    /// values already present in `asg`.
    pub(crate) fn activation(
        &self,
        var_idx: usize,
        asg: &Assignment,
        params: &ParameterStore,
    ) -> Result<Array2<f64>> {
        let cond = self.conditional_for(var_idx);
        let rows = asg.rows();
        let dim = self.variables[var_idx].dim;
        let mut pre = Array2::zeros((rows, dim));
        if let Some(b) = &cond.params.bias {
            let bias = params.vector(b)?;
            pre += &bias.broadcast((rows, dim)).unwrap();
        }
        for (w, p) in cond.params.weights.iter().zip(&cond.parents) {
            let wm = params.matrix(w)?;
            let pv = asg.get(p)?;
            pre += &pv.dot(&wm.t());
        }
        let nl = cond.family.nonlinearity();
        Ok(match nl {
            Nonlin::None => pre,
            Nonlin::Tanh => pre.mapv(f64::tanh),
            Nonlin::Sigmoid => pre.mapv(sigmoid),
        })
    }
}

/// One tensor in the parameter store.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamTensor {
    Matrix(Array2<f64>),
    Vector(Array1<f64>),
}

impl ParamTensor {
    pub fn zeros(shape: ParamShape) -> Self {
        match shape {
            ParamShape::Matrix(r, c) => ParamTensor::Matrix(Array2::zeros((r, c))),
            ParamShape::Vector(n) => ParamTensor::Vector(Array1::zeros(n)),
        }
    }

    pub fn shape(&self) -> ParamShape {
        match self {
            ParamTensor::Matrix(m) => ParamShape::Matrix(m.nrows(), m.ncols()),
            ParamTensor::Vector(v) => ParamShape::Vector(v.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.shape().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> Box<dyn Iterator<Item = &f64> + '_> {
        match self {
            ParamTensor::Matrix(m) => Box::new(m.iter()),
            ParamTensor::Vector(v) => Box::new(v.iter()),
        }
    }

    pub fn iter_mut(&mut self) -> Box<dyn Iterator<Item = &mut f64> + '_> {
        match self {
            ParamTensor::Matrix(m) => Box::new(m.iter_mut()),
            ParamTensor::Vector(v) => Box::new(v.iter_mut()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Zero-mean Gaussian prior with the given variance on every entry of a
/// parameter tensor. Log-scale tensors store log sigma, so this reads as a
/// log-normal prior on the scale itself.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PriorSpec {
    pub variance: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec { variance: 0.01 }
    }
}

/// Named parameter tensors plus their priors. Iteration order is name order,
/// which fixes the flattened layout used by the optimizers.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    values: BTreeMap<String, ParamTensor>,
    priors: BTreeMap<String, PriorSpec>,
}

impl ParameterStore {
    /// Zero-valued store with one tensor per parameter the network references.
    /// `priors` may name a subset; missing names use the default prior, and a
    /// "default" entry overrides that fallback.
    pub fn zeros_for(net: &BayesNet, priors: &BTreeMap<String, PriorSpec>) -> Self {
        let fallback = priors.get("default").copied().unwrap_or_default();
        let mut values = BTreeMap::new();
        let mut out_priors = BTreeMap::new();
        for (name, shape) in net.param_shapes() {
            values.insert(name.clone(), ParamTensor::zeros(*shape));
            out_priors.insert(
                name.clone(),
                priors.get(name).copied().unwrap_or(fallback),
            );
        }
        ParameterStore {
            values,
            priors: out_priors,
        }
    }

    /// Fill every entry with independent draws from N(0, std^2), in name
    /// order then row-major order, so equal seeds give equal stores.
    pub fn init_gaussian<R: Rng>(&mut self, std: f64, rng: &mut R) {
        for t in self.values.values_mut() {
            for v in t.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v = std * e;
            }
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn get(&self, name: &str) -> Result<&ParamTensor> {
        self.values
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(format!("parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamTensor> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownVariable(format!("parameter {name}")))
    }

    pub fn set(&mut self, name: &str, tensor: ParamTensor) -> Result<()> {
        match self.values.get_mut(name) {
            Some(slot) => {
                if slot.shape() != tensor.shape() {
                    return Err(Error::Shape(format!("parameter {name} shape mismatch")));
                }
                *slot = tensor;
                Ok(())
            }
            None => {
                self.values.insert(name.to_string(), tensor);
                Ok(())
            }
        }
    }

    pub fn matrix(&self, name: &str) -> Result<&Array2<f64>> {
        match self.get(name)? {
            ParamTensor::Matrix(m) => Ok(m),
            ParamTensor::Vector(_) => {
                Err(Error::Shape(format!("parameter {name} is not a matrix")))
            }
        }
    }

    pub fn vector(&self, name: &str) -> Result<&Array1<f64>> {
        match self.get(name)? {
            ParamTensor::Vector(v) => Ok(v),
            ParamTensor::Matrix(_) => {
                Err(Error::Shape(format!("parameter {name} is not a vector")))
            }
        }
    }

    pub fn prior(&self, name: &str) -> PriorSpec {
        self.priors.get(name).copied().unwrap_or_default()
    }

    pub fn check_against(&self, net: &BayesNet) -> Result<()> {
        for (name, shape) in net.param_shapes() {
            let t = self.get(name)?;
            if t.shape() != *shape {
                return Err(Error::Shape(format!("parameter {name} has wrong shape")));
            }
            if !t.all_finite() {
                return Err(Error::NonFinite);
            }
        }
        Ok(())
    }

    /// Sum of zero-mean Gaussian log densities over every stored entry.
    pub fn log_prior(&self) -> f64 {
        let mut acc = 0.0;
        for (name, t) in &self.values {
            let v = self.prior(name).variance;
            for &e in t.iter() {
                acc += -0.5 * LN_2PI - 0.5 * v.ln() - e * e / (2.0 * v);
            }
        }
        acc
    }

    /// Gradient of `log_prior` in flattened layout.
    pub fn grad_log_prior(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (name, t) in &self.values {
            let v = self.prior(name).variance;
            for &e in t.iter() {
                out.push(-e / v);
            }
        }
        Array1::from(out)
    }

    pub fn flat_len(&self) -> usize {
        self.values.values().map(ParamTensor::len).sum()
    }

    /// Concatenate every tensor, name order, row-major.
    pub fn flatten(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for t in self.values.values() {
            out.extend(t.iter().copied());
        }
        Array1::from(out)
    }

    /// Inverse of `flatten`.
    pub fn unflatten_from(&mut self, flat: &Array1<f64>) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, store holds {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let mut i = 0;
        for t in self.values.values_mut() {
            for v in t.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
        Ok(())
    }
}

/// Values for a set of variables: one rows x dim matrix per name, all with
/// the same row count.
#[derive(Debug, Clone)]
pub struct Assignment {
    rows: usize,
    values: BTreeMap<String, Array2<f64>>,
}

impl Assignment {
    pub fn new(rows: usize) -> Self {
        Assignment {
            rows,
            values: BTreeMap::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn insert(&mut self, name: String, value: Array2<f64>) -> Result<()> {
        if value.nrows() != self.rows {
            return Err(Error::Shape(format!(
                "assignment for {name} has {} rows, expected {}",
                value.nrows(),
                self.rows
            )));
        }
        self.values.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Array2<f64>> {
        self.values
            .get_mut(name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.values.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.values.iter()
    }

    /// Concatenate the named matrices row-major into one flat vector.
    pub fn flatten_names(&self, names: &[String]) -> Result<Array1<f64>> {
        let mut out = Vec::new();
        for n in names {
            out.extend(self.get(n)?.iter().copied());
        }
        Ok(Array1::from(out))
    }

    /// Write a flat vector produced by `flatten_names` back into the named
    /// matrices.
    pub fn unflatten_names(&mut self, names: &[String], flat: &Array1<f64>) -> Result<()> {
        let mut i = 0;
        for n in names {
            let m = self.get_mut(n)?;
            for v in m.iter_mut() {
                *v = flat[i];
                i += 1;
            }
        }
        if i != flat.len() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, variables take {i}",
                flat.len()
            )));
        }
        Ok(())
    }
}

/// JSON model document: variables, conditionals, and per-parameter priors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub variables: Vec<VariableDecl>,
    pub conditionals: Vec<ConditionalSpec>,
    #[serde(default)]
    pub priors: BTreeMap<String, PriorSpec>,
}

impl ModelDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Document(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model document serializes")
    }

    /// Validate into a network plus a zeroed parameter store carrying the
    /// document's priors.
    pub fn build(self) -> Result<(BayesNet, ParameterStore)> {
        let net = BayesNet::new(self.variables, self.conditionals)?;
        let store = ParameterStore::zeros_for(&net, &self.priors);
        Ok((net, store))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn decl(name: &str, dim: usize, kind: VarKind) -> VariableDecl {
        VariableDecl {
            name: name.into(),
            dim,
            kind,
        }
    }

    fn gauss_cond(child: &str, parents: &[&str], tag: &str) -> ConditionalSpec {
        ConditionalSpec {
            child: child.into(),
            parents: parents.iter().map(|s| s.to_string()).collect(),
            family: if parents.is_empty() {
                Family::GaussianIsotropicPrior
            } else {
                Family::GaussianAffineTanh
            },
            params: if parents.is_empty() {
                ParamRefs {
                    weights: vec![],
                    bias: None,
                    log_sigma: Some(format!("ls_{tag}")),
                }
            } else {
                ParamRefs {
                    weights: parents
                        .iter()
                        .map(|p| format!("w_{tag}_{p}"))
                        .collect(),
                    bias: Some(format!("b_{tag}")),
                    log_sigma: Some(format!("ls_{tag}")),
                }
            },
            generator: None,
        }
    }

    /// Chain Z1 -> Z2 -> Z3 with an observation hanging off each layer.
    fn three_layer_chain() -> BayesNet {
        let vars = vec![
            decl("z1", 1, VarKind::LatentContinuous),
            decl("z2", 1, VarKind::LatentContinuous),
            decl("z3", 1, VarKind::LatentContinuous),
            decl("x1", 1, VarKind::Observed),
            decl("x2", 1, VarKind::Observed),
            decl("x3", 1, VarKind::Observed),
        ];
        let conds = vec![
            gauss_cond("z1", &[], "z1"),
            gauss_cond("z2", &["z1"], "z2"),
            gauss_cond("z3", &["z2"], "z3"),
            gauss_cond("x1", &["z1"], "x1"),
            gauss_cond("x2", &["z2"], "x2"),
            gauss_cond("x3", &["z3"], "x3"),
        ];
        BayesNet::new(vars, conds).unwrap()
    }

    #[test]
    fn chain_builds_with_topological_order() {
        let vars = vec![
            decl("z1", 2, VarKind::LatentContinuous),
            decl("z2", 2, VarKind::LatentContinuous),
            decl("x", 3, VarKind::Observed),
        ];
        let conds = vec![
            gauss_cond("z1", &[], "z1"),
            gauss_cond("z2", &["z1"], "z2"),
            gauss_cond("x", &["z2"], "x"),
        ];
        let net = BayesNet::new(vars, conds).unwrap();
        let order: Vec<&str> = net
            .topo_order()
            .iter()
            .map(|&i| net.var(i).name.as_str())
            .collect();
        assert_eq!(order, vec!["z1", "z2", "x"]);
        assert_eq!(
            net.param_shapes().get("w_z2_z1"),
            Some(&ParamShape::Matrix(2, 2))
        );
        assert_eq!(
            net.param_shapes().get("w_x_z2"),
            Some(&ParamShape::Matrix(3, 2))
        );
    }

    #[test]
    fn cycle_is_rejected() {
        let vars = vec![
            decl("a", 1, VarKind::LatentContinuous),
            decl("b", 1, VarKind::LatentContinuous),
        ];
        let conds = vec![gauss_cond("a", &["b"], "a"), gauss_cond("b", &["a"], "b")];
        assert!(matches!(BayesNet::new(vars, conds), Err(Error::Cycle(_))));
    }

    #[test]
    fn duplicate_and_unknown_names_are_rejected() {
        let vars = vec![
            decl("a", 1, VarKind::Observed),
            decl("a", 1, VarKind::Observed),
        ];
        let conds = vec![gauss_cond("a", &[], "a")];
        assert!(matches!(
            BayesNet::new(vars, conds),
            Err(Error::DuplicateName(_))
        ));

        let vars = vec![decl("a", 1, VarKind::Observed)];
        let conds = vec![gauss_cond("a", &["ghost"], "a")];
        assert!(matches!(
            BayesNet::new(vars, conds),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn conflicting_shared_param_shapes_are_rejected() {
        // same weight name used for a 1-dim and a 2-dim parent
        let vars = vec![
            decl("p1", 1, VarKind::LatentContinuous),
            decl("p2", 2, VarKind::LatentContinuous),
            decl("c1", 1, VarKind::Observed),
            decl("c2", 1, VarKind::Observed),
        ];
        let mut c1 = gauss_cond("c1", &["p1"], "c");
        let mut c2 = gauss_cond("c2", &["p2"], "c");
        c1.params.weights = vec!["w_shared".into()];
        c2.params.weights = vec!["w_shared".into()];
        let conds = vec![
            gauss_cond("p1", &[], "p1"),
            gauss_cond("p2", &[], "p2"),
            c1,
            c2,
        ];
        assert!(matches!(BayesNet::new(vars, conds), Err(Error::Shape(_))));
    }

    #[test]
    fn missing_conditional_is_rejected() {
        let vars = vec![
            decl("a", 1, VarKind::Observed),
            decl("b", 1, VarKind::Observed),
        ];
        let conds = vec![gauss_cond("a", &[], "a")];
        assert!(matches!(BayesNet::new(vars, conds), Err(Error::Shape(_))));
    }

    #[test]
    fn markov_blankets_on_the_three_layer_chain() {
        let net = three_layer_chain();
        let bl: Vec<String> = net.markov_blanket("z2").unwrap().into_iter().collect();
        assert_eq!(bl, vec!["x2", "z1", "z3"]);
        let bl: Vec<String> = net.markov_blanket("z1").unwrap().into_iter().collect();
        assert_eq!(bl, vec!["x1", "z2"]);
        assert!(matches!(
            net.markov_blanket("nope"),
            Err(Error::UnknownVariable(_))
        ));
    }

    #[test]
    fn blanket_includes_coparents() {
        let vars = vec![
            decl("a", 1, VarKind::LatentContinuous),
            decl("b", 1, VarKind::LatentContinuous),
            decl("x", 1, VarKind::Observed),
        ];
        let conds = vec![
            gauss_cond("a", &[], "a"),
            gauss_cond("b", &[], "b"),
            gauss_cond("x", &["a", "b"], "x"),
        ];
        let net = BayesNet::new(vars, conds).unwrap();
        let bl: Vec<String> = net.markov_blanket("a").unwrap().into_iter().collect();
        assert_eq!(bl, vec!["b", "x"]);
    }

    #[test]
    fn factor_distances_on_the_chain() {
        let net = three_layer_chain();
        assert_eq!(
            net.factor_distance("x3", "z1").unwrap(),
            FactorDistance::Hops(3)
        );
        assert_eq!(
            net.factor_distance("z1", "x3").unwrap(),
            FactorDistance::Hops(3)
        );
        assert_eq!(
            net.factor_distance("z2", "z2").unwrap(),
            FactorDistance::Hops(0)
        );
        assert_eq!(
            net.factor_distance("x1", "z1").unwrap(),
            FactorDistance::Hops(1)
        );
        // x1 -> z1 -> z2 -> x2: the leaves never share a factor directly
        assert_eq!(
            net.factor_distance("x1", "x2").unwrap(),
            FactorDistance::Hops(3)
        );
    }

    #[test]
    fn disconnected_components_have_infinite_distance() {
        let vars = vec![
            decl("a", 1, VarKind::LatentContinuous),
            decl("b", 1, VarKind::LatentContinuous),
        ];
        let conds = vec![gauss_cond("a", &[], "a"), gauss_cond("b", &[], "b")];
        let net = BayesNet::new(vars, conds).unwrap();
        assert_eq!(
            net.factor_distance("a", "b").unwrap(),
            FactorDistance::Disconnected
        );
        assert_eq!(net.factor_distance("a", "b").unwrap().hops(), None);
    }

    #[test]
    fn factor_distance_is_a_metric_on_the_chain() {
        let net = three_layer_chain();
        let names: Vec<&str> = net.variables().iter().map(|v| v.name.as_str()).collect();
        for a in &names {
            for b in &names {
                let d_ab = net.factor_distance(a, b).unwrap().hops().unwrap();
                let d_ba = net.factor_distance(b, a).unwrap().hops().unwrap();
                assert_eq!(d_ab, d_ba);
                if a == b {
                    assert_eq!(d_ab, 0);
                } else {
                    assert!(d_ab >= 1);
                }
                for c in &names {
                    let d_ac = net.factor_distance(a, c).unwrap().hops().unwrap();
                    let d_cb = net.factor_distance(c, b).unwrap().hops().unwrap();
                    assert!(d_ab <= d_ac + d_cb);
                }
            }
        }
    }

    #[test]
    fn parameter_store_roundtrips_and_priors() {
        let net = three_layer_chain();
        let mut priors = BTreeMap::new();
        priors.insert("ls_z1".to_string(), PriorSpec { variance: 0.5 });
        let mut store = ParameterStore::zeros_for(&net, &priors);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        store.init_gaussian(0.1, &mut rng);
        store.check_against(&net).unwrap();

        let flat = store.flatten();
        assert_eq!(flat.len(), store.flat_len());
        let mut store2 = store.clone();
        store2.unflatten_from(&flat).unwrap();
        assert_eq!(store2.flatten(), flat);

        // prior log density: hand-build the same sum
        let mut expect = 0.0;
        for name in store.names().cloned().collect::<Vec<_>>() {
            let v = store.prior(&name).variance;
            for &e in store.get(&name).unwrap().iter() {
                expect += -0.5 * LN_2PI - 0.5 * v.ln() - e * e / (2.0 * v);
            }
        }
        assert!((store.log_prior() - expect).abs() < 1e-12);
        assert_eq!(store.prior("ls_z1").variance, 0.5);
        assert_eq!(store.prior("ls_z2").variance, 0.01);

        // gradient of the prior matches finite differences through flatten
        let g = store.grad_log_prior();
        let h = 1e-6;
        for i in [0usize, 3, 7] {
            let mut up = store.clone();
            let mut f = up.flatten();
            f[i] += h;
            up.unflatten_from(&f).unwrap();
            let mut dn = store.clone();
            let mut f = dn.flatten();
            f[i] -= h;
            dn.unflatten_from(&f).unwrap();
            let fd = (up.log_prior() - dn.log_prior()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn assignment_checks_row_counts() {
        let mut asg = Assignment::new(3);
        asg.insert("a".into(), Array2::zeros((3, 2))).unwrap();
        assert!(matches!(
            asg.insert("b".into(), Array2::zeros((2, 2))),
            Err(Error::Shape(_))
        ));
        let flat = asg.flatten_names(&["a".to_string()]).unwrap();
        assert_eq!(flat.len(), 6);
    }

    #[test]
    fn model_document_round_trip() {
        let doc_text = r#"{
            "variables": [
                {"name": "z1", "dim": 2, "kind": "latent-continuous"},
                {"name": "x", "dim": 3, "kind": "observed"}
            ],
            "conditionals": [
                {"child": "z1", "parents": [], "family": "gaussian-isotropic-prior",
                 "params": {"log_sigma": "ls_z1"}, "generator": "inverse-cdf"},
                {"child": "x", "parents": ["z1"], "family": "bernoulli-affine-sigmoid",
                 "params": {"weights": ["w_x"], "bias": "b_x"}}
            ],
            "priors": {"default": {"variance": 0.02}, "w_x": {"variance": 1.0}}
        }"#;
        let doc = ModelDocument::from_json(doc_text).unwrap();
        let (net, store) = doc.clone().build().unwrap();
        assert_eq!(net.variables().len(), 2);
        assert_eq!(
            net.conditional_for(net.var_index("z1").unwrap()).generator,
            Some(GeneratorKind::InverseCdf)
        );
        assert_eq!(store.prior("w_x").variance, 1.0);
        assert_eq!(store.prior("b_x").variance, 0.02);
        assert_eq!(
            store.get("w_x").unwrap().shape(),
            ParamShape::Matrix(3, 2)
        );

        // serialization keeps the exact key vocabulary
        let text = doc.to_json();
        for key in [
            "\"variables\"",
            "\"conditionals\"",
            "\"name\"",
            "\"dim\"",
            "\"kind\"",
            "\"child\"",
            "\"parents\"",
            "\"family\"",
            "\"params\"",
            "\"priors\"",
            "\"generator\"",
            "latent-continuous",
            "gaussian-isotropic-prior",
            "bernoulli-affine-sigmoid",
            "inverse-cdf",
        ] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let reparsed = ModelDocument::from_json(&text).unwrap();
        reparsed.build().unwrap();
    }

    #[test]
    fn malformed_documents_error() {
        assert!(matches!(
            ModelDocument::from_json("{"),
            Err(Error::Document(_))
        ));
        let bad_kind = r#"{"variables": [{"name": "a", "dim": 1, "kind": "mystery"}],
                           "conditionals": []}"#;
        assert!(matches!(
            ModelDocument::from_json(bad_kind),
            Err(Error::Document(_))
        ));
    }

    #[test]
    fn forward_sampling_is_seed_deterministic() {
        let net = three_layer_chain();
        let mut store = ParameterStore::zeros_for(&net, &BTreeMap::new());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        store.init_gaussian(0.1, &mut rng);

        let a = net
            .sample_forward(&store, 4, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let b = net
            .sample_forward(&store, 4, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        for name in ["z1", "z2", "z3", "x1", "x2", "x3"] {
            assert_eq!(a.get(name).unwrap(), b.get(name).unwrap());
        }
    }

    #[test]
    fn activation_matches_vector_affine() {
        // batched activation agrees with the per-row affine kernel
        let vars = vec![
            decl("p", 2, VarKind::LatentContinuous),
            decl("c", 3, VarKind::Observed),
        ];
        let conds = vec![gauss_cond("p", &[], "p"), gauss_cond("c", &["p"], "c")];
        let net = BayesNet::new(vars, conds).unwrap();
        let mut store = ParameterStore::zeros_for(&net, &BTreeMap::new());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        store.init_gaussian(0.5, &mut rng);

        let mut asg = Assignment::new(2);
        asg.insert("p".into(), array![[0.3, -0.8], [1.2, 0.1]])
            .unwrap();
        let act = net
            .activation(net.var_index("c").unwrap(), &asg, &store)
            .unwrap();

        let map = crate::dist::AffineMap {
            weights: vec![store.matrix("w_c_p").unwrap().clone()],
            bias: store.vector("b_c").unwrap().clone(),
            nonlinearity: Nonlin::Tanh,
        };
        for m in 0..2 {
            let row = asg.get("p").unwrap().row(m).to_owned();
            let expect = crate::dist::apply_affine(&map, &[row.view()]).unwrap();
            for d in 0..3 {
                assert!((act[[m, d]] - expect[d]).abs() < 1e-14);
            }
        }
    }
}
