//! Hand-structured reverse-mode gradients over a fixed primitive set: affine
//! maps with pointwise nonlinearities, Gaussian and Bernoulli log densities,
//! the location-scale transform, and the normal quantile. A network compiles
//! to a flat program; one forward pass records every node value, one backward
//! pass accumulates adjoints in reverse order. The same forward pass computes
//! plain log densities, so gradients and values can never disagree.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Axis};

use crate::auxform::AuxiliaryNet;
use crate::dist::{Nonlin, LN_2PI, SQRT_2PI};
use crate::error::{Error, Result};
use crate::model::{Assignment, BayesNet, Family, GeneratorKind, ParamShape, ParamTensor, ParameterStore, VarKind};

/// Uniform auxiliary draws are clamped into this closed interval before the
/// quantile, so optimizer steps that graze the boundary stay evaluable.
pub const EPSILON_CLAMP: f64 = 1e-12;

/// Which adjoints the backward pass accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    All,
    ValuesOnly,
    ParamsOnly,
}

/// Gradients of a scalar log density: per-variable matrices for the
/// differentiated value slots and per-name tensors for parameters.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub wrt_values: BTreeMap<String, Array2<f64>>,
    pub wrt_params: BTreeMap<String, ParamTensor>,
}

impl Gradient {
    /// Flatten parameter gradients in store name order.
    pub fn flatten_params(&self, params: &ParameterStore) -> Array1<f64> {
        let mut out = Vec::with_capacity(params.flat_len());
        for name in params.names() {
            match self.wrt_params.get(name) {
                Some(t) => out.extend(t.iter().copied()),
                None => out.extend(std::iter::repeat(0.0).take(params.get(name).unwrap().len())),
            }
        }
        Array1::from(out)
    }

    /// Flatten value gradients for the given names, row-major.
    pub fn flatten_values(&self, names: &[String]) -> Array1<f64> {
        let mut out = Vec::new();
        for n in names {
            if let Some(m) = self.wrt_values.get(n) {
                out.extend(m.iter().copied());
            }
        }
        Array1::from(out)
    }
}

/// Where a value-node input comes from.
#[derive(Debug, Clone, Copy)]
enum Source {
    /// Input slot filled from an assignment.
    Var(usize),
    /// Output of an earlier node.
    Node(usize),
}

#[derive(Debug, Clone)]
enum ValueOp {
    /// nonlin(sum_i input_i W_i^T + b), weights indexed per input
    Affine {
        inputs: Vec<Source>,
        weights: Vec<usize>,
        bias: usize,
        nonlin: Nonlin,
    },
    /// mean + exp(log_sigma) * eps, mean None means zero
    LocationScale {
        mean: Option<Source>,
        log_sigma: usize,
        eps: Source,
    },
    /// standard normal quantile, elementwise
    NormInvCdf { input: Source },
}

#[derive(Debug, Clone)]
enum ContribOp {
    Gaussian {
        x: Source,
        mean: Option<Source>,
        log_sigma: usize,
    },
    Bernoulli { x: Source, prob: Source },
    StdNormal { x: Source },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotFill {
    /// value taken from the primary assignment (original form: everything;
    /// auxiliary form: observed variables)
    Primary,
    /// value taken from the auxiliary-root assignment
    Epsilon,
}

/// A network compiled to a flat evaluation program.
#[derive(Debug, Clone)]
pub(crate) struct Program {
    var_names: Vec<String>,
    var_dims: Vec<usize>,
    var_fill: Vec<SlotFill>,
    /// slots whose adjoints are exported in wrt_values
    grad_vars: Vec<usize>,
    param_names: Vec<String>,
    param_shapes: Vec<ParamShape>,
    values: Vec<ValueOp>,
    node_dims: Vec<usize>,
    contribs: Vec<ContribOp>,
    /// generated latent values: (latent name, node id), topological order
    latent_nodes: Vec<(String, usize)>,
}

/// Forward record: every node value plus the per-contribution scalars that
/// sum to the total, in evaluation order.
#[derive(Debug, Clone)]
pub struct EvalTrace {
    pub node_values: Vec<Array2<f64>>,
    pub contributions: Vec<f64>,
    pub total: f64,
}

struct Inputs<'a> {
    vars: Vec<&'a Array2<f64>>,
    params: Vec<&'a ParamTensor>,
    rows: usize,
}

impl Program {
    fn param_slot(names: &mut Vec<String>, shapes: &mut Vec<ParamShape>, map: &mut BTreeMap<String, usize>, name: &str, shape: ParamShape) -> usize {
        if let Some(&i) = map.get(name) {
            return i;
        }
        let i = names.len();
        names.push(name.to_string());
        shapes.push(shape);
        map.insert(name.to_string(), i);
        i
    }

    /// Compile the original form: every variable is an input slot, each
    /// conditional contributes its log density at the assigned values.
    pub(crate) fn original(net: &BayesNet) -> Program {
        let mut p = Program {
            var_names: Vec::new(),
            var_dims: Vec::new(),
            var_fill: Vec::new(),
            grad_vars: Vec::new(),
            param_names: Vec::new(),
            param_shapes: Vec::new(),
            values: Vec::new(),
            node_dims: Vec::new(),
            contribs: Vec::new(),
            latent_nodes: Vec::new(),
        };
        let mut pmap = BTreeMap::new();
        let mut slot_of = vec![usize::MAX; net.variables().len()];
        for &v in net.topo_order() {
            let decl = net.var(v);
            slot_of[v] = p.var_names.len();
            p.var_names.push(decl.name.clone());
            p.var_dims.push(decl.dim);
            p.var_fill.push(SlotFill::Primary);
            if decl.kind == VarKind::LatentContinuous {
                p.grad_vars.push(slot_of[v]);
            }
        }
        for &v in net.topo_order() {
            let cond = net.conditional_for(v);
            let dim = net.var(v).dim;
            let x = Source::Var(slot_of[v]);
            match cond.family {
                Family::GaussianIsotropicPrior => {
                    let ls = Self::param_slot(
                        &mut p.param_names,
                        &mut p.param_shapes,
                        &mut pmap,
                        cond.params.log_sigma.as_ref().unwrap(),
                        ParamShape::Vector(dim),
                    );
                    p.contribs.push(ContribOp::Gaussian {
                        x,
                        mean: None,
                        log_sigma: ls,
                    });
                }
                fam => {
                    let inputs: Vec<Source> = net
                        .parent_indices(v)
                        .iter()
                        .map(|&pi| Source::Var(slot_of[pi]))
                        .collect();
                    let weights: Vec<usize> = cond
                        .params
                        .weights
                        .iter()
                        .zip(net.parent_indices(v))
                        .map(|(w, &pi)| {
                            Self::param_slot(
                                &mut p.param_names,
                                &mut p.param_shapes,
                                &mut pmap,
                                w,
                                ParamShape::Matrix(dim, net.var(pi).dim),
                            )
                        })
                        .collect();
                    let bias = Self::param_slot(
                        &mut p.param_names,
                        &mut p.param_shapes,
                        &mut pmap,
                        cond.params.bias.as_ref().unwrap(),
                        ParamShape::Vector(dim),
                    );
                    let node = p.values.len();
                    p.values.push(ValueOp::Affine {
                        inputs,
                        weights,
                        bias,
                        nonlin: fam.nonlinearity(),
                    });
                    p.node_dims.push(dim);
                    if fam.is_gaussian() {
                        let ls = Self::param_slot(
                            &mut p.param_names,
                            &mut p.param_shapes,
                            &mut pmap,
                            cond.params.log_sigma.as_ref().unwrap(),
                            ParamShape::Vector(dim),
                        );
                        p.contribs.push(ContribOp::Gaussian {
                            x,
                            mean: Some(Source::Node(node)),
                            log_sigma: ls,
                        });
                    } else {
                        p.contribs.push(ContribOp::Bernoulli {
                            x,
                            prob: Source::Node(node),
                        });
                    }
                }
            }
        }
        p
    }

    /// Compile the auxiliary form: observed variables and auxiliary roots are
    /// the input slots, generated latents are recursive location-scale nodes,
    /// and only observed factors plus root densities contribute.
    pub(crate) fn auxiliary(aux: &AuxiliaryNet) -> Program {
        let net = aux.base();
        let mut p = Program {
            var_names: Vec::new(),
            var_dims: Vec::new(),
            var_fill: Vec::new(),
            grad_vars: Vec::new(),
            param_names: Vec::new(),
            param_shapes: Vec::new(),
            values: Vec::new(),
            node_dims: Vec::new(),
            contribs: Vec::new(),
            latent_nodes: Vec::new(),
        };
        let mut pmap = BTreeMap::new();
        // observed slots
        let mut slot_of = vec![usize::MAX; net.variables().len()];
        for &v in net.topo_order() {
            if net.var(v).kind == VarKind::Observed {
                slot_of[v] = p.var_names.len();
                p.var_names.push(net.var(v).name.clone());
                p.var_dims.push(net.var(v).dim);
                p.var_fill.push(SlotFill::Primary);
            }
        }
        // auxiliary-root slots, one per latent, latent topological order
        let mut root_slot = BTreeMap::new();
        for gen in aux.generators() {
            let slot = p.var_names.len();
            p.var_names.push(gen.root_name.clone());
            p.var_dims.push(net.var(gen.latent).dim);
            p.var_fill.push(SlotFill::Epsilon);
            p.grad_vars.push(slot);
            root_slot.insert(gen.latent, slot);
        }

        // generated latents in topological order
        let mut latent_source: BTreeMap<usize, Source> = BTreeMap::new();
        let source_of = |v: usize, slot_of: &[usize], latent_source: &BTreeMap<usize, Source>| {
            if slot_of[v] != usize::MAX {
                Source::Var(slot_of[v])
            } else {
                *latent_source.get(&v).expect("parent precedes child in topo order")
            }
        };
        for gen in aux.generators() {
            let v = gen.latent;
            let cond = net.conditional_for(v);
            let dim = net.var(v).dim;
            let mean = match cond.family {
                Family::GaussianIsotropicPrior => None,
                fam => {
                    let inputs: Vec<Source> = net
                        .parent_indices(v)
                        .iter()
                        .map(|&pi| source_of(pi, &slot_of, &latent_source))
                        .collect();
                    let weights: Vec<usize> = cond
                        .params
                        .weights
                        .iter()
                        .zip(net.parent_indices(v))
                        .map(|(w, &pi)| {
                            Self::param_slot(
                                &mut p.param_names,
                                &mut p.param_shapes,
                                &mut pmap,
                                w,
                                ParamShape::Matrix(dim, net.var(pi).dim),
                            )
                        })
                        .collect();
                    let bias = Self::param_slot(
                        &mut p.param_names,
                        &mut p.param_shapes,
                        &mut pmap,
                        cond.params.bias.as_ref().unwrap(),
                        ParamShape::Vector(dim),
                    );
                    let node = p.values.len();
                    p.values.push(ValueOp::Affine {
                        inputs,
                        weights,
                        bias,
                        nonlin: fam.nonlinearity(),
                    });
                    p.node_dims.push(dim);
                    Some(Source::Node(node))
                }
            };
            let ls = Self::param_slot(
                &mut p.param_names,
                &mut p.param_shapes,
                &mut pmap,
                cond.params.log_sigma.as_ref().unwrap(),
                ParamShape::Vector(dim),
            );
            let eps_slot = root_slot[&v];
            let eps = match gen.kind {
                GeneratorKind::LocationScale => Source::Var(eps_slot),
                GeneratorKind::InverseCdf => {
                    let node = p.values.len();
                    p.values.push(ValueOp::NormInvCdf {
                        input: Source::Var(eps_slot),
                    });
                    p.node_dims.push(dim);
                    Source::Node(node)
                }
            };
            let node = p.values.len();
            p.values.push(ValueOp::LocationScale {
                mean,
                log_sigma: ls,
                eps,
            });
            p.node_dims.push(dim);
            latent_source.insert(v, Source::Node(node));
            p.latent_nodes.push((net.var(v).name.clone(), node));
            if gen.kind == GeneratorKind::LocationScale {
                p.contribs.push(ContribOp::StdNormal {
                    x: Source::Var(eps_slot),
                });
            }
        }

        // observed factors with generated latents substituted for latent parents
        for &v in net.topo_order() {
            if net.var(v).kind != VarKind::Observed {
                continue;
            }
            let cond = net.conditional_for(v);
            let dim = net.var(v).dim;
            let x = Source::Var(slot_of[v]);
            match cond.family {
                Family::GaussianIsotropicPrior => {
                    let ls = Self::param_slot(
                        &mut p.param_names,
                        &mut p.param_shapes,
                        &mut pmap,
                        cond.params.log_sigma.as_ref().unwrap(),
                        ParamShape::Vector(dim),
                    );
                    p.contribs.push(ContribOp::Gaussian {
                        x,
                        mean: None,
                        log_sigma: ls,
                    });
                }
                fam => {
                    let inputs: Vec<Source> = net
                        .parent_indices(v)
                        .iter()
                        .map(|&pi| source_of(pi, &slot_of, &latent_source))
                        .collect();
                    let weights: Vec<usize> = cond
                        .params
                        .weights
                        .iter()
                        .zip(net.parent_indices(v))
                        .map(|(w, &pi)| {
                            Self::param_slot(
                                &mut p.param_names,
                                &mut p.param_shapes,
                                &mut pmap,
                                w,
                                ParamShape::Matrix(dim, net.var(pi).dim),
                            )
                        })
                        .collect();
                    let bias = Self::param_slot(
                        &mut p.param_names,
                        &mut p.param_shapes,
                        &mut pmap,
                        cond.params.bias.as_ref().unwrap(),
                        ParamShape::Vector(dim),
                    );
                    let node = p.values.len();
                    p.values.push(ValueOp::Affine {
                        inputs,
                        weights,
                        bias,
                        nonlin: fam.nonlinearity(),
                    });
                    p.node_dims.push(dim);
                    if fam.is_gaussian() {
                        let ls = Self::param_slot(
                            &mut p.param_names,
                            &mut p.param_shapes,
                            &mut pmap,
                            cond.params.log_sigma.as_ref().unwrap(),
                            ParamShape::Vector(dim),
                        );
                        p.contribs.push(ContribOp::Gaussian {
                            x,
                            mean: Some(Source::Node(node)),
                            log_sigma: ls,
                        });
                    } else {
                        p.contribs.push(ContribOp::Bernoulli {
                            x,
                            prob: Source::Node(node),
                        });
                    }
                }
            }
        }
        p
    }

    fn gather<'a>(
        &self,
        primary: &'a Assignment,
        epsilon: Option<&'a Assignment>,
        params: &'a ParameterStore,
    ) -> Result<Inputs<'a>> {
        let rows = primary.rows();
        if let Some(e) = epsilon {
            if e.rows() != rows {
                return Err(Error::Shape(format!(
                    "epsilon assignment has {} rows, data has {rows}",
                    e.rows()
                )));
            }
        }
        let mut vars = Vec::with_capacity(self.var_names.len());
        for (i, name) in self.var_names.iter().enumerate() {
            let m = match self.var_fill[i] {
                SlotFill::Primary => primary.get(name)?,
                SlotFill::Epsilon => epsilon
                    .ok_or_else(|| Error::UnknownVariable(name.clone()))?
                    .get(name)?,
            };
            if m.ncols() != self.var_dims[i] {
                return Err(Error::Shape(format!(
                    "variable {name} has dim {}, expected {}",
                    m.ncols(),
                    self.var_dims[i]
                )));
            }
            vars.push(m);
        }
        let mut ptensors = Vec::with_capacity(self.param_names.len());
        for (name, shape) in self.param_names.iter().zip(&self.param_shapes) {
            let t = params.get(name)?;
            if t.shape() != *shape {
                return Err(Error::Shape(format!("parameter {name} has wrong shape")));
            }
            ptensors.push(t);
        }
        Ok(Inputs {
            vars,
            params: ptensors,
            rows,
        })
    }

    fn value<'a>(&self, inputs: &'a Inputs, nodes: &'a [Array2<f64>], s: Source) -> &'a Array2<f64> {
        match s {
            Source::Var(i) => inputs.vars[i],
            Source::Node(i) => &nodes[i],
        }
    }

    fn pmatrix<'a>(&self, inputs: &'a Inputs, slot: usize) -> &'a Array2<f64> {
        match inputs.params[slot] {
            ParamTensor::Matrix(m) => m,
            ParamTensor::Vector(_) => unreachable!("weight slots hold matrices"),
        }
    }

    fn pvector<'a>(&self, inputs: &'a Inputs, slot: usize) -> &'a Array1<f64> {
        match inputs.params[slot] {
            ParamTensor::Vector(v) => v,
            ParamTensor::Matrix(_) => unreachable!("bias and scale slots hold vectors"),
        }
    }

    fn forward(&self, inputs: &Inputs) -> Result<EvalTrace> {
        let rows = inputs.rows;
        let mut nodes: Vec<Array2<f64>> = Vec::with_capacity(self.values.len());
        for op in &self.values {
            let out = match op {
                ValueOp::Affine {
                    inputs: srcs,
                    weights,
                    bias,
                    nonlin,
                } => {
                    let b = self.pvector(inputs, *bias);
                    let dim = b.len();
                    let mut pre = b
                        .broadcast((rows, dim))
                        .expect("bias broadcasts over rows")
                        .to_owned();
                    for (s, w) in srcs.iter().zip(weights) {
                        let v = self.value(inputs, &nodes, *s);
                        let wm = self.pmatrix(inputs, *w);
                        pre = pre + v.dot(&wm.t());
                    }
                    match nonlin {
                        Nonlin::None => pre,
                        Nonlin::Tanh => pre.mapv(f64::tanh),
                        Nonlin::Sigmoid => pre.mapv(crate::dist::sigmoid),
                    }
                }
                ValueOp::LocationScale {
                    mean,
                    log_sigma,
                    eps,
                } => {
                    let sig = self.pvector(inputs, *log_sigma).mapv(f64::exp);
                    let e = self.value(inputs, &nodes, *eps);
                    let mut out = e * &sig.broadcast((rows, sig.len())).unwrap();
                    if let Some(m) = mean {
                        out = out + self.value(inputs, &nodes, *m);
                    }
                    out
                }
                ValueOp::NormInvCdf { input } => {
                    let u = self.value(inputs, &nodes, *input);
                    let mut out = Array2::zeros(u.raw_dim());
                    for (o, &uv) in out.iter_mut().zip(u.iter()) {
                        if !(uv > 0.0 && uv < 1.0) {
                            return Err(Error::Domain(format!(
                                "uniform auxiliary value {uv} outside (0, 1)"
                            )));
                        }
                        let c = uv.clamp(EPSILON_CLAMP, 1.0 - EPSILON_CLAMP);
                        *o = crate::dist::gaussian_inverse_cdf(c)?;
                    }
                    out
                }
            };
            nodes.push(out);
        }

        let mut contributions = Vec::with_capacity(self.contribs.len());
        let mut total = 0.0;
        for c in &self.contribs {
            let val = match c {
                ContribOp::Gaussian { x, mean, log_sigma } => {
                    let xv = self.value(inputs, &nodes, *x);
                    let ls = self.pvector(inputs, *log_sigma);
                    let w = ls.mapv(|v| (-2.0 * v).exp());
                    let mut acc = 0.0;
                    match mean {
                        Some(m) => {
                            let mv = self.value(inputs, &nodes, *m);
                            for mi in 0..rows {
                                for d in 0..ls.len() {
                                    let r = xv[[mi, d]] - mv[[mi, d]];
                                    acc += -0.5 * LN_2PI - ls[d] - 0.5 * r * r * w[d];
                                }
                            }
                        }
                        None => {
                            for mi in 0..rows {
                                for d in 0..ls.len() {
                                    let r = xv[[mi, d]];
                                    acc += -0.5 * LN_2PI - ls[d] - 0.5 * r * r * w[d];
                                }
                            }
                        }
                    }
                    acc
                }
                ContribOp::Bernoulli { x, prob } => {
                    let xv = self.value(inputs, &nodes, *x);
                    let av = self.value(inputs, &nodes, *prob);
                    let mut acc = 0.0;
                    for (xe, ae) in xv.iter().zip(av.iter()) {
                        let a = ae.clamp(
                            crate::dist::BERNOULLI_PROB_MIN,
                            crate::dist::BERNOULLI_PROB_MAX,
                        );
                        acc += xe * a.ln() + (1.0 - xe) * (1.0 - a).ln();
                    }
                    acc
                }
                ContribOp::StdNormal { x } => {
                    let xv = self.value(inputs, &nodes, *x);
                    let mut acc = 0.0;
                    for &e in xv.iter() {
                        acc += -0.5 * LN_2PI - 0.5 * e * e;
                    }
                    acc
                }
            };
            contributions.push(val);
            total += val;
        }
        if !total.is_finite() {
            return Err(Error::NonFinite);
        }
        Ok(EvalTrace {
            node_values: nodes,
            contributions,
            total,
        })
    }

    fn backward(&self, inputs: &Inputs, trace: &EvalTrace, mode: GradMode) -> Gradient {
        let rows = inputs.rows;
        let want_params = mode != GradMode::ValuesOnly;
        let nodes = &trace.node_values;

        let mut node_adj: Vec<Array2<f64>> = self
            .node_dims
            .iter()
            .map(|&d| Array2::zeros((rows, d)))
            .collect();
        let mut var_adj: Vec<Array2<f64>> = self
            .var_dims
            .iter()
            .map(|&d| Array2::zeros((rows, d)))
            .collect();
        let mut param_adj: Vec<ParamTensor> = self
            .param_shapes
            .iter()
            .map(|&s| ParamTensor::zeros(s))
            .collect();

        let add_to = |adj_nodes: &mut Vec<Array2<f64>>, adj_vars: &mut Vec<Array2<f64>>, s: Source, delta: &Array2<f64>| match s {
            Source::Var(i) => adj_vars[i] += delta,
            Source::Node(i) => adj_nodes[i] += delta,
        };

        // contribution adjoints seed with weight 1, processed in reverse
        for c in self.contribs.iter().rev() {
            match c {
                ContribOp::Gaussian { x, mean, log_sigma } => {
                    let xv = self.value(inputs, nodes, *x);
                    let ls = self.pvector(inputs, *log_sigma);
                    let w = ls.mapv(|v| (-2.0 * v).exp());
                    let r = match mean {
                        Some(m) => xv - self.value(inputs, nodes, *m),
                        None => xv.to_owned(),
                    };
                    let rw = &r * &w.broadcast((rows, w.len())).unwrap();
                    add_to(&mut node_adj, &mut var_adj, *x, &(-&rw));
                    if let Some(m) = mean {
                        add_to(&mut node_adj, &mut var_adj, *m, &rw);
                    }
                    if want_params {
                        let dls = (&rw * &r).sum_axis(Axis(0)) - rows as f64;
                        if let ParamTensor::Vector(v) = &mut param_adj[*log_sigma] {
                            *v += &dls;
                        }
                    }
                }
                ContribOp::Bernoulli { x, prob } => {
                    let xv = self.value(inputs, nodes, *x);
                    let av = self.value(inputs, nodes, *prob);
                    let mut da = Array2::zeros(av.raw_dim());
                    for ((d, &xe), &ae) in da.iter_mut().zip(xv.iter()).zip(av.iter()) {
                        if ae > crate::dist::BERNOULLI_PROB_MIN
                            && ae < crate::dist::BERNOULLI_PROB_MAX
                        {
                            *d = xe / ae - (1.0 - xe) / (1.0 - ae);
                        }
                    }
                    add_to(&mut node_adj, &mut var_adj, *prob, &da);
                }
                ContribOp::StdNormal { x } => {
                    let xv = self.value(inputs, nodes, *x);
                    add_to(&mut node_adj, &mut var_adj, *x, &(-xv));
                }
            }
        }

        // value nodes in reverse order
        for (i, op) in self.values.iter().enumerate().rev() {
            let go = std::mem::replace(&mut node_adj[i], Array2::zeros((0, 0)));
            match op {
                ValueOp::Affine {
                    inputs: srcs,
                    weights,
                    bias,
                    nonlin,
                } => {
                    let out = &nodes[i];
                    let dpre = match nonlin {
                        Nonlin::None => go,
                        Nonlin::Tanh => &go * &out.mapv(|y| 1.0 - y * y),
                        Nonlin::Sigmoid => &go * &out.mapv(|y| y * (1.0 - y)),
                    };
                    for (s, w) in srcs.iter().zip(weights) {
                        let wm = self.pmatrix(inputs, *w);
                        add_to(&mut node_adj, &mut var_adj, *s, &dpre.dot(wm));
                        if want_params {
                            let v = self.value(inputs, nodes, *s);
                            if let ParamTensor::Matrix(m) = &mut param_adj[*w] {
                                *m += &dpre.t().dot(v);
                            }
                        }
                    }
                    if want_params {
                        if let ParamTensor::Vector(b) = &mut param_adj[*bias] {
                            *b += &dpre.sum_axis(Axis(0));
                        }
                    }
                }
                ValueOp::LocationScale {
                    mean,
                    log_sigma,
                    eps,
                } => {
                    let sig = self.pvector(inputs, *log_sigma).mapv(f64::exp);
                    let e = self.value(inputs, nodes, *eps);
                    if let Some(m) = mean {
                        add_to(&mut node_adj, &mut var_adj, *m, &go);
                    }
                    let dsige = &go * &sig.broadcast((rows, sig.len())).unwrap();
                    add_to(&mut node_adj, &mut var_adj, *eps, &dsige);
                    if want_params {
                        let dls = (&dsige * e).sum_axis(Axis(0));
                        if let ParamTensor::Vector(v) = &mut param_adj[*log_sigma] {
                            *v += &dls;
                        }
                    }
                }
                ValueOp::NormInvCdf { input } => {
                    let u = self.value(inputs, nodes, *input);
                    let out = &nodes[i];
                    let mut du = Array2::zeros(u.raw_dim());
                    for ((d, &uv), (&ov, &g)) in du
                        .iter_mut()
                        .zip(u.iter())
                        .zip(out.iter().zip(go.iter()))
                    {
                        if uv > EPSILON_CLAMP && uv < 1.0 - EPSILON_CLAMP {
                            *d = g * SQRT_2PI * (0.5 * ov * ov).exp();
                        }
                    }
                    add_to(&mut node_adj, &mut var_adj, *input, &du);
                }
            }
        }

        let mut wrt_values = BTreeMap::new();
        if mode != GradMode::ParamsOnly {
            for &slot in &self.grad_vars {
                wrt_values.insert(
                    self.var_names[slot].clone(),
                    std::mem::replace(&mut var_adj[slot], Array2::zeros((0, 0))),
                );
            }
        }
        let mut wrt_params = BTreeMap::new();
        if want_params {
            for (name, adj) in self.param_names.iter().zip(param_adj) {
                wrt_params.insert(name.clone(), adj);
            }
        }
        Gradient {
            wrt_values,
            wrt_params,
        }
    }
}

/// Precompiled evaluator for one network form; reuse it across iterations to
/// avoid recompiling the program.
#[derive(Debug, Clone)]
pub struct Compiled {
    prog: Program,
}

impl Compiled {
    pub fn original(net: &BayesNet) -> Compiled {
        Compiled {
            prog: Program::original(net),
        }
    }

    pub fn auxiliary(aux: &AuxiliaryNet) -> Compiled {
        Compiled {
            prog: Program::auxiliary(aux),
        }
    }

    pub fn value(
        &self,
        primary: &Assignment,
        epsilon: Option<&Assignment>,
        params: &ParameterStore,
    ) -> Result<f64> {
        let inputs = self.prog.gather(primary, epsilon, params)?;
        Ok(self.prog.forward(&inputs)?.total)
    }

    pub fn trace(
        &self,
        primary: &Assignment,
        epsilon: Option<&Assignment>,
        params: &ParameterStore,
    ) -> Result<EvalTrace> {
        let inputs = self.prog.gather(primary, epsilon, params)?;
        self.prog.forward(&inputs)
    }

    pub fn value_grad(
        &self,
        primary: &Assignment,
        epsilon: Option<&Assignment>,
        params: &ParameterStore,
        mode: GradMode,
    ) -> Result<(f64, Gradient)> {
        let inputs = self.prog.gather(primary, epsilon, params)?;
        let trace = self.prog.forward(&inputs)?;
        let grad = self.prog.backward(&inputs, &trace, mode);
        Ok((trace.total, grad))
    }

    /// Generated latent matrices recorded during a forward pass, in latent
    /// topological order.
    pub fn generated_latents(&self, trace: &EvalTrace) -> Vec<(String, Array2<f64>)> {
        self.prog
            .latent_nodes
            .iter()
            .map(|(name, node)| (name.clone(), trace.node_values[*node].clone()))
            .collect()
    }
}

pub(crate) fn log_joint_value(
    net: &BayesNet,
    assignment: &Assignment,
    params: &ParameterStore,
) -> Result<f64> {
    Compiled::original(net).value(assignment, None, params)
}

/// Log joint and its exact gradient in the original form. The returned value
/// is bitwise identical to `BayesNet::log_joint`.
pub fn grad_original(
    net: &BayesNet,
    assignment: &Assignment,
    params: &ParameterStore,
) -> Result<(f64, Gradient)> {
    Compiled::original(net).value_grad(assignment, None, params, GradMode::All)
}

/// Auxiliary-form log joint and its exact gradient with respect to the
/// auxiliary roots and parameters. Bitwise identical in value to
/// `AuxiliaryNet::log_joint`.
pub fn grad_auxiliary(
    aux: &AuxiliaryNet,
    observed: &Assignment,
    epsilon: &Assignment,
    params: &ParameterStore,
) -> Result<(f64, Gradient)> {
    Compiled::auxiliary(aux).value_grad(observed, Some(epsilon), params, GradMode::All)
}

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
pub fn finite_diff_check<F: FnMut(&Array1<f64>) -> f64>(
    mut f: F,
    point: &Array1<f64>,
    analytic: &Array1<f64>,
    h: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len());
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut up = point.clone();
        up[i] += h;
        let mut dn = point.clone();
        dn[i] -= h;
        let fd = (f(&up) - f(&dn)) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
