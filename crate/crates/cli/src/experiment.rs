//! Experiment configuration and the two-form comparison driver.
//!
//! An experiment names a model document, a data source, a pair of learning
//! configs (one per output slot), and an output directory. Running the
//! comparison writes one convergence-trace CSV per slot plus a JSON report
//! with plateau statistics and the iteration-speedup ratio.

use crate::data::{generate_dbn_data, load_mnist_idx, Dataset, DbnSpec};
use crate::report::{comparison, ComparisonReport};
use crate::{Error, Result};
use auxinfer_core::{
    grad_auxiliary, grad_original, to_auxiliary, Assignment, BayesNet, CsvTraceWriter, Fit, Form,
    LearnConfig, ModelDocument, ParameterStore,
};
use ndarray::{s, Array1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

fn default_threshold() -> f64 {
    0.5
}

/// Where the observed rows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// IDX image file, binarized, random subset.
    Mnist {
        /// Path to the IDX file, relative to the config file.
        path: String,
        subset: usize,
        /// Binarization cut as a fraction of the byte range.
        #[serde(default = "default_threshold")]
        threshold: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Synthetic sequences sampled from a ground-truth dynamical network.
    DbnSynthetic(DbnSpec),
}

/// The two learning configs of a comparison. The slot names label the
/// output files (`trace_original.csv`, `trace_auxiliary.csv`); each slot's
/// config carries the parameterization it actually runs, so a control
/// experiment may run the same form in both slots.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnPair {
    pub original: LearnConfig,
    pub auxiliary: LearnConfig,
}

/// A complete experiment description, loadable from JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Path to the model document JSON, relative to the config file.
    pub model: String,
    pub data: DataSource,
    pub learn: LearnPair,
    /// Output directory, relative to the config file.
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Parse a config file; the returned base directory anchors the
    /// config's relative paths.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = fs::read_to_string(path)?;
        let cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        Ok((cfg, base))
    }

    /// A comparison is meaningful only when both slots share everything
    /// except the parameterization: same seed, same initialization scale,
    /// same algorithm, same iteration budget.
    pub fn validate(&self) -> Result<()> {
        match &self.data {
            DataSource::Mnist { subset, .. } if *subset == 0 => {
                return Err(Error::Range("subset size must be at least 1".into()));
            }
            DataSource::DbnSynthetic(spec) => spec.validate()?,
            _ => {}
        }
        let (o, a) = (&self.learn.original, &self.learn.auxiliary);
        o.validate()?;
        a.validate()?;
        if o.seed != a.seed {
            return Err(Error::Config(format!(
                "slots must share the seed, got {} and {}",
                o.seed, a.seed
            )));
        }
        if o.algorithm != a.algorithm {
            return Err(Error::Config("slots must share the algorithm".into()));
        }
        if o.iterations != a.iterations {
            return Err(Error::Config(format!(
                "slots must share the iteration budget, got {} and {}",
                o.iterations, a.iterations
            )));
        }
        if o.init_std != a.init_std {
            return Err(Error::Config(format!(
                "slots must share the initialization scale, got {} and {}",
                o.init_std, a.init_std
            )));
        }
        Ok(())
    }
}

/// Stock comparison at the dynamical-network experiment's scale: chains of
/// length 10, state and observation width 10, 100 sequences, MCEM with a
/// 2000-iteration budget. Paths are relative to the `configs/` directory.
pub fn dbn_experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        model: "dbn_model.json".into(),
        data: DataSource::DbnSynthetic(DbnSpec {
            length: 10,
            latent_dim: 10,
            obs_dim: 10,
            rows: 100,
            seed: 424242,
        }),
        learn: LearnPair {
            original: LearnConfig::new(
                auxinfer_core::Algorithm::Mcem,
                Form::Original,
                2000,
                7,
            ),
            auxiliary: LearnConfig::new(
                auxinfer_core::Algorithm::Mcem,
                Form::Auxiliary,
                2000,
                7,
            ),
        },
        out_dir: "../out/dbn".into(),
    }
}

/// Stock desk-scale comparison on binarized digits: 1000 images, two
/// latent layers of width 16, MCEM. Paths are relative to the `configs/`
/// directory.
pub fn mnist_experiment_config() -> ExperimentConfig {
    ExperimentConfig {
        model: "mnist_model.json".into(),
        data: DataSource::Mnist {
            path: "../data/digits-images-idx3-ubyte".into(),
            subset: 1000,
            threshold: 0.5,
            seed: 99,
        },
        learn: LearnPair {
            original: LearnConfig::new(
                auxinfer_core::Algorithm::Mcem,
                Form::Original,
                600,
                7,
            ),
            auxiliary: LearnConfig::new(
                auxinfer_core::Algorithm::Mcem,
                Form::Auxiliary,
                600,
                7,
            ),
        },
        out_dir: "../out/mnist".into(),
    }
}

/// A validated, loaded experiment: network, zeroed parameter template with
/// priors, dataset, learning pair, and resolved output directory.
pub struct Experiment {
    pub net: BayesNet,
    pub template: ParameterStore,
    pub dataset: Dataset,
    pub learn: LearnPair,
    pub out_dir: PathBuf,
}

/// Load the model document and the dataset an experiment config points at,
/// checking that they agree on the observed variables.
pub fn prepare(config: &ExperimentConfig, base: &Path) -> Result<Experiment> {
    config.validate()?;
    let model_text = fs::read_to_string(base.join(&config.model))?;
    let (net, template) = ModelDocument::from_json(&model_text)?.build()?;
    let dataset = match &config.data {
        DataSource::Mnist {
            path,
            subset,
            threshold,
            seed,
        } => load_mnist_idx(&base.join(path), *subset, *threshold, *seed)?,
        DataSource::DbnSynthetic(spec) => generate_dbn_data(spec)?.0,
    };
    dataset.check_matches(&net)?;
    Ok(Experiment {
        net,
        template,
        dataset,
        learn: config.learn.clone(),
        out_dir: base.join(&config.out_dir),
    })
}

/// Trace file for a slot.
pub fn trace_path(out_dir: &Path, slot: Form) -> PathBuf {
    out_dir.join(match slot {
        Form::Original => "trace_original.csv",
        Form::Auxiliary => "trace_auxiliary.csv",
    })
}

/// Report file of a comparison.
pub fn report_path(out_dir: &Path) -> PathBuf {
    out_dir.join("report.json")
}

/// Run one slot's config, streaming its trace to the slot's CSV file. The
/// file is flushed per iteration, so a failed or interrupted run leaves a
/// valid prefix on disk.
pub fn run_slot(exp: &Experiment, slot: Form) -> Result<Fit> {
    fs::create_dir_all(&exp.out_dir)?;
    let cfg = match slot {
        Form::Original => &exp.learn.original,
        Form::Auxiliary => &exp.learn.auxiliary,
    };
    let file = fs::File::create(trace_path(&exp.out_dir, slot))?;
    let mut sink = CsvTraceWriter::new(BufWriter::new(file))?;
    let fit = auxinfer_core::fit(
        &exp.net,
        &exp.template,
        &exp.dataset.observed,
        cfg,
        Some(&mut sink),
    )?;
    Ok(fit)
}

/// Run both slots and write the comparison report. Returns the report and
/// both fits (original slot first).
pub fn run_comparison(exp: &Experiment) -> Result<(ComparisonReport, Fit, Fit)> {
    let original = run_slot(exp, Form::Original)?;
    let auxiliary = run_slot(exp, Form::Auxiliary)?;
    let report = comparison(&original.trace, &auxiliary.trace)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(report_path(&exp.out_dir), json + "\n")?;
    Ok((report, original, auxiliary))
}

/// Central finite-difference step for gradient spot checks.
pub const GRAD_CHECK_H: f64 = 1e-5;
/// Relative error above which a spot check counts as failed.
pub const GRAD_CHECK_TOL: f64 = 1e-4;

/// Worst relative gradient error per route.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub original: f64,
    pub auxiliary: f64,
    /// Coordinates checked per route.
    pub coords: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.original < GRAD_CHECK_TOL && self.auxiliary < GRAD_CHECK_TOL
    }
}

fn concat(a: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend(a.iter().copied());
    v.extend(b.iter().copied());
    Array1::from(v)
}

fn pick_coords<R: Rng>(len: usize, max: usize, rng: &mut R) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..max {
        let j = rng.gen_range(i..len);
        idx.swap(i, j);
    }
    idx.truncate(max);
    idx
}

fn fd_spot<F: FnMut(&Array1<f64>) -> Result<f64>>(
    mut f: F,
    point: &Array1<f64>,
    analytic: &Array1<f64>,
    coords: &[usize],
    h: f64,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &i in coords {
        let mut p = point.clone();
        p[i] = point[i] + h;
        let up = f(&p)?;
        p[i] = point[i] - h;
        let down = f(&p)?;
        let fd = (up - down) / (2.0 * h);
        let rel = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn split_point(
    q: &Array1<f64>,
    names: &[String],
    values: &mut Assignment,
    params: &mut ParameterStore,
) -> Result<()> {
    let n_params = params.flat_len();
    let n_values = q.len() - n_params;
    values.unflatten_names(names, &q.slice(s![..n_values]).to_owned())?;
    params.unflatten_from(&q.slice(s![n_values..]).to_owned())?;
    Ok(())
}

/// Spot-check both gradient routes against central finite differences of
/// the corresponding objectives at a random point near the initialization.
/// Uses at most `max_rows` datapoints and `max_coords` coordinates per
/// route, both drawn deterministically from the experiment's seed.
pub fn check_gradients(
    exp: &Experiment,
    max_rows: usize,
    max_coords: usize,
) -> Result<GradCheckReport> {
    let rows = exp.dataset.rows.min(max_rows.max(1));
    let mut data = Assignment::new(rows);
    for (name, m) in exp.dataset.observed.iter() {
        data.insert(name.clone(), m.slice(s![..rows, ..]).to_owned())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(exp.learn.original.seed);
    let mut params = exp.template.clone();
    params.init_gaussian(exp.learn.original.init_std, &mut rng);

    // original route: objective over (latents, parameters)
    let latents = exp.net.sample_latents_given(&data, &params, &mut rng)?;
    let latent_names: Vec<String> = latents.names().cloned().collect();
    let mut asg = data.clone();
    for n in &latent_names {
        asg.insert(n.clone(), latents.get(n)?.clone())?;
    }
    let point = concat(&asg.flatten_names(&latent_names)?, &params.flatten());
    let (_, g) = grad_original(&exp.net, &asg, &params)?;
    let analytic = concat(
        &g.flatten_values(&latent_names),
        &(g.flatten_params(&params) + params.grad_log_prior()),
    );
    let coords = pick_coords(point.len(), max_coords, &mut rng);
    let net = &exp.net;
    let worst_original = {
        let base_asg = asg.clone();
        let base_params = params.clone();
        fd_spot(
            move |q| {
                let mut a = base_asg.clone();
                let mut p = base_params.clone();
                split_point(q, &latent_names, &mut a, &mut p)?;
                Ok(net.log_joint(&a, &p)? + p.log_prior())
            },
            &point,
            &analytic,
            &coords,
            GRAD_CHECK_H,
        )?
    };

    // auxiliary route: objective over (root noise, parameters)
    let aux = to_auxiliary(&exp.net)?;
    let eps = aux.sample_epsilon(rows, &mut rng);
    let root_names: Vec<String> = aux.root_names().to_vec();
    let point = concat(&eps.flatten_names(&root_names)?, &params.flatten());
    let (_, g) = grad_auxiliary(&aux, &data, &eps, &params)?;
    let analytic = concat(
        &g.flatten_values(&root_names),
        &(g.flatten_params(&params) + params.grad_log_prior()),
    );
    let coords = pick_coords(point.len(), max_coords, &mut rng);
    let n_coords = coords.len();
    let worst_auxiliary = {
        let base_eps = eps.clone();
        let base_params = params.clone();
        let aux_ref = &aux;
        let data_ref = &data;
        fd_spot(
            move |q| {
                let mut e = base_eps.clone();
                let mut p = base_params.clone();
                split_point(q, &root_names, &mut e, &mut p)?;
                Ok(aux_ref.log_joint(data_ref, &e, &p)? + p.log_prior())
            },
            &point,
            &analytic,
            &coords,
            GRAD_CHECK_H,
        )?
    };

    Ok(GradCheckReport {
        original: worst_original,
        auxiliary: worst_auxiliary,
        coords: n_coords,
    })
}
