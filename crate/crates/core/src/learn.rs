//! Learning drivers that run identically over both network forms: Monte
//! Carlo EM (HMC over the latent coordinates, Adagrad over the parameters),
//! joint MAP ascent over latents and parameters together, and full Bayes,
//! where one chain samples latents and parameters jointly. Every driver
//! reports the same objective, log p(data, latents | theta) + log p(theta),
//! into an append-only CSV trace, one row per outer iteration.
//!
//! The parameter initialization is drawn before anything else, so two runs
//! that differ only in form start from identical parameters.

use std::io::Write;
use std::time::Instant;

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auxform::{to_auxiliary, AuxiliaryNet};
use crate::error::{Error, Result};
use crate::grad::{Compiled, GradMode, Gradient};
use crate::infer::{hmc_step, Adagrad, ChainState, HmcConfig};
use crate::model::{Assignment, BayesNet, GeneratorKind, ParameterStore, VarKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Form {
    #[serde(rename = "original")]
    Original,
    #[serde(rename = "auxiliary")]
    Auxiliary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "mcem")]
    Mcem,
    #[serde(rename = "joint-map")]
    JointMap,
    #[serde(rename = "full-bayes")]
    FullBayes,
}

fn default_m_steps() -> usize {
    5
}

fn default_learning_rate() -> f64 {
    0.1
}

fn default_init_std() -> f64 {
    0.1
}

fn default_check_every() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnConfig {
    pub algorithm: Algorithm,
    pub form: Form,
    pub iterations: usize,
    pub seed: u64,
    #[serde(default)]
    pub hmc: HmcConfig,
    /// Adagrad updates per outer iteration (MCEM only).
    #[serde(default = "default_m_steps")]
    pub m_steps_per_iter: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    /// Standard deviation of the parameter initialization draw.
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Every this many iterations an auxiliary-form run with only
    /// location-scale generators cross-checks its objective against the
    /// original form; zero disables the check.
    #[serde(default = "default_check_every")]
    pub consistency_check_every: usize,
    /// Iterations discarded before collecting parameter samples (full
    /// Bayes only).
    #[serde(default)]
    pub burn_in: usize,
}

impl LearnConfig {
    /// A config with the given essentials and every tuning knob at its
    /// default.
    pub fn new(algorithm: Algorithm, form: Form, iterations: usize, seed: u64) -> Self {
        Self {
            algorithm,
            form,
            iterations,
            seed,
            hmc: HmcConfig::default(),
            m_steps_per_iter: default_m_steps(),
            learning_rate: default_learning_rate(),
            init_std: default_init_std(),
            consistency_check_every: default_check_every(),
            burn_in: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Document(
                "learn config needs at least one iteration".into(),
            ));
        }
        if !(self.hmc.step_size > 0.0) || self.hmc.leapfrog_steps == 0 {
            return Err(Error::Document(
                "hmc needs a positive step size and at least one leapfrog step".into(),
            ));
        }
        if self.algorithm == Algorithm::FullBayes && self.burn_in >= self.iterations {
            return Err(Error::Document(
                "burn-in must leave at least one retained iteration".into(),
            ));
        }
        Ok(())
    }
}

pub const TRACE_HEADER: &str = "iter,wall_s,log_joint,accept_rate,grad_norm_latent,grad_norm_param";

/// One trace line. Floats are written with the shortest representation that
/// round-trips, so reruns with identical arithmetic produce identical text
/// everywhere except `wall_s`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: u64,
    pub wall_s: f64,
    pub log_joint: f64,
    pub accept_rate: f64,
    pub grad_norm_latent: f64,
    pub grad_norm_param: f64,
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter,
            self.wall_s,
            self.log_joint,
            self.accept_rate,
            self.grad_norm_latent,
            self.grad_norm_param
        )
    }

    pub fn from_csv_line(line: &str) -> Result<TraceRow> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Document(format!(
                "trace row has {} fields, expected 6: {line}",
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Document(format!("bad {what} in trace row: {line}"));
        Ok(TraceRow {
            iter: fields[0].parse().map_err(|_| bad("iter"))?,
            wall_s: fields[1].parse().map_err(|_| bad("wall_s"))?,
            log_joint: fields[2].parse().map_err(|_| bad("log_joint"))?,
            accept_rate: fields[3].parse().map_err(|_| bad("accept_rate"))?,
            grad_norm_latent: fields[4].parse().map_err(|_| bad("grad_norm_latent"))?,
            grad_norm_param: fields[5].parse().map_err(|_| bad("grad_norm_param"))?,
        })
    }
}

/// Receives rows as they are produced; file-backed sinks flush per row so a
/// killed run still leaves a valid prefix on disk.
pub trait TraceSink {
    fn row(&mut self, row: &TraceRow) -> Result<()>;
}

pub struct CsvTraceWriter<W: Write> {
    out: W,
}

impl<W: Write> CsvTraceWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{TRACE_HEADER}")?;
        out.flush()?;
        Ok(CsvTraceWriter { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> TraceSink for CsvTraceWriter<W> {
    fn row(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn push(&mut self, row: TraceRow) {
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv_line());
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == TRACE_HEADER => {}
            other => {
                return Err(Error::Document(format!(
                    "trace header mismatch: got {other:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            rows.push(TraceRow::from_csv_line(line)?);
        }
        Ok(ConvergenceTrace { rows })
    }

    pub fn final_log_joint(&self) -> Option<f64> {
        self.rows.last().map(|r| r.log_joint)
    }
}

/// Result of a learning run: the fitted parameters, the final latent state
/// (generated from the final roots, in the auxiliary form), the roots
/// themselves when applicable, parameter samples for full Bayes, the trace,
/// and the iteration at which a numerical failure stopped the run early.
#[derive(Debug, Clone)]
pub struct Fit {
    pub params: ParameterStore,
    pub latents: Assignment,
    pub epsilon: Option<Assignment>,
    pub theta_samples: Vec<Array1<f64>>,
    pub trace: ConvergenceTrace,
    pub aborted_at: Option<u64>,
}

/// Shared evaluation state for one run: the compiled program of the chosen
/// form, the parameter store, and the mutable coordinate assignment (latent
/// values in the original form, root noise in the auxiliary form).
struct Engine<'a> {
    aux: Option<AuxiliaryNet>,
    compiled: Compiled,
    compiled_orig: Option<Compiled>,
    data: &'a Assignment,
    params: ParameterStore,
    /// original form: observed data plus current latents; auxiliary form:
    /// observed data only
    primary: Assignment,
    epsilon: Option<Assignment>,
    value_names: Vec<String>,
    value_len: usize,
    latent_ls_names: Vec<String>,
    all_location_scale: bool,
}

impl<'a> Engine<'a> {
    fn new(
        net: &'a BayesNet,
        template: &ParameterStore,
        data: &'a Assignment,
        config: &LearnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Engine<'a>> {
        template.check_against(net)?;
        for v in net.variables() {
            match v.kind {
                VarKind::Observed => {
                    if !data.contains(&v.name) {
                        return Err(Error::UnknownVariable(format!(
                            "data is missing observed variable {}",
                            v.name
                        )));
                    }
                }
                _ => {
                    if data.contains(&v.name) {
                        return Err(Error::Shape(format!(
                            "data contains non-observed variable {}",
                            v.name
                        )));
                    }
                }
            }
        }
        let mut params = template.clone();
        params.init_gaussian(config.init_std, rng);

        let latent_ls_names: Vec<String> = net
            .topo_order()
            .iter()
            .filter(|&&v| net.var(v).kind == VarKind::LatentContinuous)
            .filter_map(|&v| net.conditional_for(v).params.log_sigma.clone())
            .collect();

        let engine = match config.form {
            Form::Original => {
                let latents = net.sample_latents_given(data, &params, rng)?;
                let value_names: Vec<String> = net
                    .topo_order()
                    .iter()
                    .filter(|&&v| net.var(v).kind == VarKind::LatentContinuous)
                    .map(|&v| net.var(v).name.clone())
                    .collect();
                let mut primary = data.clone();
                for (name, m) in latents.iter() {
                    primary.insert(name.clone(), m.clone())?;
                }
                Engine {
                    aux: None,
                    compiled: Compiled::original(net),
                    compiled_orig: None,
                    data,
                    params,
                    primary,
                    epsilon: None,
                    value_names,
                    value_len: 0,
                    latent_ls_names,
                    all_location_scale: false,
                }
            }
            Form::Auxiliary => {
                let aux = to_auxiliary(net)?;
                let epsilon = aux.sample_epsilon(data.rows(), rng);
                let value_names = aux.root_names().to_vec();
                let all_location_scale = aux
                    .generators()
                    .iter()
                    .all(|g| g.kind == GeneratorKind::LocationScale);
                Engine {
                    compiled: Compiled::auxiliary(&aux),
                    compiled_orig: Some(Compiled::original(net)),
                    aux: Some(aux),
                    data,
                    params,
                    primary: data.clone(),
                    epsilon: Some(epsilon),
                    value_names,
                    value_len: 0,
                    latent_ls_names,
                    all_location_scale,
                }
            }
        };
        let mut engine = engine;
        engine.value_len = engine.values_flat()?.len();
        Ok(engine)
    }

    fn values_flat(&self) -> Result<Array1<f64>> {
        match &self.epsilon {
            Some(e) => e.flatten_names(&self.value_names),
            None => self.primary.flatten_names(&self.value_names),
        }
    }

    fn set_values_flat(&mut self, flat: &Array1<f64>) -> Result<()> {
        match &mut self.epsilon {
            Some(e) => e.unflatten_names(&self.value_names, flat),
            None => self.primary.unflatten_names(&self.value_names, flat),
        }
    }

    /// Objective value (log joint plus parameter log prior) and gradient.
    fn eval(&self, mode: GradMode) -> Result<(f64, Gradient)> {
        let (v, g) =
            self.compiled
                .value_grad(&self.primary, self.epsilon.as_ref(), &self.params, mode)?;
        Ok((v + self.params.log_prior(), g))
    }

    fn latent_flat(&self, grad: &Gradient) -> Array1<f64> {
        grad.flatten_values(&self.value_names)
    }

    fn param_flat(&self, grad: &Gradient) -> Array1<f64> {
        grad.flatten_params(&self.params) + self.params.grad_log_prior()
    }

    /// The latents this run currently implies: the stored values in the
    /// original form, the generated values in the auxiliary form.
    fn current_latents(&self) -> Result<Assignment> {
        match (&self.aux, &self.epsilon) {
            (Some(aux), Some(eps)) => aux.generate_latents(self.data, eps, &self.params),
            _ => {
                let mut out = Assignment::new(self.primary.rows());
                for n in &self.value_names {
                    out.insert(n.clone(), self.primary.get(n)?.clone())?;
                }
                Ok(out)
            }
        }
    }

    /// Auxiliary-vs-original agreement: with location-scale generators the
    /// two objectives must differ by exactly the summed log scales of the
    /// latent entries. A violation means the forms have drifted apart.
    fn consistency_check(&self, iter: u64) -> Result<()> {
        let (aux, eps, orig) = match (&self.aux, &self.epsilon, &self.compiled_orig) {
            (Some(a), Some(e), Some(o)) => (a, e, o),
            _ => return Ok(()),
        };
        let auxv = self.compiled.value(&self.primary, Some(eps), &self.params)?;
        let z = aux.generate_latents(self.data, eps, &self.params)?;
        let mut full = self.data.clone();
        for (name, m) in z.iter() {
            full.insert(name.clone(), m.clone())?;
        }
        let origv = orig.value(&full, None, &self.params)?;
        let rows = self.data.rows() as f64;
        let mut ls_sum = 0.0;
        for name in &self.latent_ls_names {
            ls_sum += rows * self.params.vector(name)?.sum();
        }
        let diff = (auxv - origv - ls_sum).abs();
        let tol = 1e-6 * auxv.abs().max(1.0);
        if diff > tol {
            return Err(Error::Consistency(format!(
                "iteration {iter}: auxiliary {auxv} vs original {origv} + log scales {ls_sum} differ by {diff}"
            )));
        }
        Ok(())
    }
}

fn l2(v: &Array1<f64>) -> f64 {
    v.dot(v).sqrt()
}

fn is_numerical(e: &Error) -> bool {
    matches!(e, Error::NonFinite | Error::Domain(_))
}

fn emit(
    trace: &mut ConvergenceTrace,
    sink: &mut Option<&mut dyn TraceSink>,
    row: TraceRow,
) -> Result<()> {
    if let Some(s) = sink.as_deref_mut() {
        s.row(&row)?;
    }
    trace.push(row);
    Ok(())
}

fn finish(engine: Engine, trace: ConvergenceTrace, theta: Vec<Array1<f64>>, aborted_at: Option<u64>) -> Result<Fit> {
    let latents = engine.current_latents().unwrap_or_else(|_| Assignment::new(engine.data.rows()));
    Ok(Fit {
        params: engine.params,
        latents,
        epsilon: engine.epsilon,
        theta_samples: theta,
        trace,
        aborted_at,
    })
}

/// Monte Carlo EM: each outer iteration takes one HMC step over the latent
/// coordinates, then several Adagrad steps on the parameters at the sampled
/// latents, then re-evaluates the objective for the trace.
pub fn mcem_fit(
    net: &BayesNet,
    template: &ParameterStore,
    data: &Assignment,
    config: &LearnConfig,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<Fit> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut engine = Engine::new(net, template, data, config, &mut rng)?;
    let mut trace = ConvergenceTrace::default();
    let mut adagrad = Adagrad::new(engine.params.flat_len(), config.learning_rate);
    let mut aborted_at = None;

    let init = engine.values_flat()?;
    let has_latents = engine.value_len > 0;
    let mut chain = {
        let engine = &mut engine;
        let mut obj = |q: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
            engine.set_values_flat(q)?;
            let (v, g) = engine.eval(GradMode::ValuesOnly)?;
            Ok((v, engine.latent_flat(&g)))
        };
        ChainState::new(init, &mut obj)?
    };

    'outer: for iter in 1..=config.iterations as u64 {
        if has_latents {
            {
                let engine = &mut engine;
                let mut obj = |q: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
                    engine.set_values_flat(q)?;
                    let (v, g) = engine.eval(GradMode::ValuesOnly)?;
                    Ok((v, engine.latent_flat(&g)))
                };
                hmc_step(&mut chain, &config.hmc, &mut obj, &mut rng)?;
            }
            // the trajectory may have been rejected; pin the engine back to
            // the chain's position
            let pos = chain.position().clone();
            engine.set_values_flat(&pos)?;
        }

        for _ in 0..config.m_steps_per_iter {
            match engine.eval(GradMode::ParamsOnly) {
                Ok((_, g)) => {
                    let pg = engine.param_flat(&g);
                    let mut flat = engine.params.flatten();
                    adagrad.step(&mut flat, &pg);
                    engine.params.unflatten_from(&flat)?;
                }
                Err(e) if is_numerical(&e) => {
                    aborted_at = Some(iter);
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        }

        match engine.eval(GradMode::All) {
            Ok((v, g)) => {
                let lat = engine.latent_flat(&g);
                let par = engine.param_flat(&g);
                chain.install(v, lat.clone());
                let row = TraceRow {
                    iter,
                    wall_s: start.elapsed().as_secs_f64(),
                    log_joint: v,
                    accept_rate: chain.accept_rate(),
                    grad_norm_latent: l2(&lat),
                    grad_norm_param: l2(&par),
                };
                emit(&mut trace, &mut sink, row)?;
            }
            Err(e) if is_numerical(&e) => {
                aborted_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        }

        if engine.all_location_scale
            && config.consistency_check_every > 0
            && iter % config.consistency_check_every as u64 == 0
        {
            engine.consistency_check(iter)?;
        }
    }

    finish(engine, trace, Vec::new(), aborted_at)
}

/// Joint MAP: Adagrad ascent over latents and parameters together. Rows
/// report the freshly updated state.
pub fn joint_map_fit(
    net: &BayesNet,
    template: &ParameterStore,
    data: &Assignment,
    config: &LearnConfig,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<Fit> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut engine = Engine::new(net, template, data, config, &mut rng)?;
    let mut trace = ConvergenceTrace::default();
    let n_values = engine.value_len;
    let n_params = engine.params.flat_len();
    let mut adagrad = Adagrad::new(n_values + n_params, config.learning_rate);
    let mut aborted_at = None;

    let (_, g) = engine.eval(GradMode::All)?;
    let mut lat_g = engine.latent_flat(&g);
    let mut par_g = engine.param_flat(&g);

    for iter in 1..=config.iterations as u64 {
        let mut point = Array1::zeros(n_values + n_params);
        point.slice_mut(ndarray::s![..n_values]).assign(&engine.values_flat()?);
        point.slice_mut(ndarray::s![n_values..]).assign(&engine.params.flatten());
        let mut grad = Array1::zeros(n_values + n_params);
        grad.slice_mut(ndarray::s![..n_values]).assign(&lat_g);
        grad.slice_mut(ndarray::s![n_values..]).assign(&par_g);

        adagrad.step(&mut point, &grad);
        engine.set_values_flat(&point.slice(ndarray::s![..n_values]).to_owned())?;
        engine
            .params
            .unflatten_from(&point.slice(ndarray::s![n_values..]).to_owned())?;

        match engine.eval(GradMode::All) {
            Ok((v, g)) => {
                lat_g = engine.latent_flat(&g);
                par_g = engine.param_flat(&g);
                let row = TraceRow {
                    iter,
                    wall_s: start.elapsed().as_secs_f64(),
                    log_joint: v,
                    accept_rate: 1.0,
                    grad_norm_latent: l2(&lat_g),
                    grad_norm_param: l2(&par_g),
                };
                emit(&mut trace, &mut sink, row)?;
            }
            Err(e) if is_numerical(&e) => {
                aborted_at = Some(iter);
                break;
            }
            Err(e) => return Err(e),
        }
    }

    finish(engine, trace, Vec::new(), aborted_at)
}

/// Full Bayes: one HMC chain over latents and parameters jointly. Parameter
/// samples after burn-in are returned flattened, in store name order.
pub fn full_bayes_sample(
    net: &BayesNet,
    template: &ParameterStore,
    data: &Assignment,
    config: &LearnConfig,
    mut sink: Option<&mut dyn TraceSink>,
) -> Result<Fit> {
    config.validate()?;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut engine = Engine::new(net, template, data, config, &mut rng)?;
    let mut trace = ConvergenceTrace::default();
    let n_values = engine.value_len;
    let n_params = engine.params.flat_len();
    let mut theta = Vec::new();

    let mut init = Array1::zeros(n_values + n_params);
    init.slice_mut(ndarray::s![..n_values]).assign(&engine.values_flat()?);
    init.slice_mut(ndarray::s![n_values..]).assign(&engine.params.flatten());

    let mut chain = {
        let engine = &mut engine;
        let mut obj = |q: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
            engine.set_values_flat(&q.slice(ndarray::s![..n_values]).to_owned())?;
            engine
                .params
                .unflatten_from(&q.slice(ndarray::s![n_values..]).to_owned())?;
            let (v, g) = engine.eval(GradMode::All)?;
            let mut grad = Array1::zeros(n_values + n_params);
            grad.slice_mut(ndarray::s![..n_values])
                .assign(&engine.latent_flat(&g));
            grad.slice_mut(ndarray::s![n_values..])
                .assign(&engine.param_flat(&g));
            Ok((v, grad))
        };
        ChainState::new(init, &mut obj)?
    };

    for iter in 1..=config.iterations as u64 {
        {
            let engine = &mut engine;
            let mut obj = |q: &Array1<f64>| -> Result<(f64, Array1<f64>)> {
                engine.set_values_flat(&q.slice(ndarray::s![..n_values]).to_owned())?;
                engine
                    .params
                    .unflatten_from(&q.slice(ndarray::s![n_values..]).to_owned())?;
                let (v, g) = engine.eval(GradMode::All)?;
                let mut grad = Array1::zeros(n_values + n_params);
                grad.slice_mut(ndarray::s![..n_values])
                    .assign(&engine.latent_flat(&g));
                grad.slice_mut(ndarray::s![n_values..])
                    .assign(&engine.param_flat(&g));
                Ok((v, grad))
            };
            hmc_step(&mut chain, &config.hmc, &mut obj, &mut rng)?;
        }
        // the trajectory may end anywhere; pin the engine to the chain
        let pos = chain.position().clone();
        engine.set_values_flat(&pos.slice(ndarray::s![..n_values]).to_owned())?;
        engine
            .params
            .unflatten_from(&pos.slice(ndarray::s![n_values..]).to_owned())?;

        if iter > config.burn_in as u64 {
            theta.push(pos.slice(ndarray::s![n_values..]).to_owned());
        }
        let g = chain.grad();
        let row = TraceRow {
            iter,
            wall_s: start.elapsed().as_secs_f64(),
            log_joint: chain.log_density(),
            accept_rate: chain.accept_rate(),
            grad_norm_latent: l2(&g.slice(ndarray::s![..n_values]).to_owned()),
            grad_norm_param: l2(&g.slice(ndarray::s![n_values..]).to_owned()),
        };
        emit(&mut trace, &mut sink, row)?;
    }

    finish(engine, trace, theta, None)
}

/// Dispatch on the configured algorithm.
pub fn fit(
    net: &BayesNet,
    template: &ParameterStore,
    data: &Assignment,
    config: &LearnConfig,
    sink: Option<&mut dyn TraceSink>,
) -> Result<Fit> {
    match config.algorithm {
        Algorithm::Mcem => mcem_fit(net, template, data, config, sink),
        Algorithm::JointMap => joint_map_fit(net, template, data, config, sink),
        Algorithm::FullBayes => full_bayes_sample(net, template, data, config, sink),
    }
}
