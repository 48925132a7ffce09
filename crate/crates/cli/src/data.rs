//! Dataset ingestion: IDX image files (the classic handwritten-digit
//! format) and synthetic dynamical-network sequences sampled from a
//! ground-truth model.

use crate::models::dbn_chain_model;
use crate::{Error, Result};
use auxinfer_core::{Assignment, BayesNet, ParamTensor, ParameterStore};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

/// Magic number of an IDX file holding unsigned-byte images.
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
/// Required image side length; rows are flattened to `SIDE * SIDE` pixels.
pub const IMAGE_SIDE: usize = 28;
/// Flattened image length.
pub const IMAGE_PIXELS: usize = IMAGE_SIDE * IMAGE_SIDE;

/// Observed data plus provenance metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub observed: Assignment,
    /// Where the rows came from: `"mnist"` or `"dbn-synthetic"`.
    pub source: String,
    pub rows: usize,
    /// Observed variable name -> column count.
    pub dims: BTreeMap<String, usize>,
    /// Seed the rows were drawn with.
    pub seed: u64,
}

impl Dataset {
    /// Every observed variable of the network present with the right
    /// width, and nothing else.
    pub fn check_matches(&self, net: &BayesNet) -> Result<()> {
        let mut expected = BTreeMap::new();
        for v in net.variables() {
            if v.kind == auxinfer_core::VarKind::Observed {
                expected.insert(v.name.clone(), v.dim);
            }
        }
        if self.dims != expected {
            return Err(Error::Config(format!(
                "dataset variables {:?} do not match the model's observed variables {:?}",
                self.dims, expected
            )));
        }
        for (name, &dim) in &self.dims {
            let m = self.observed.get(name)?;
            if m.ncols() != dim || m.nrows() != self.rows {
                return Err(Error::Config(format!(
                    "dataset variable {name} has shape {}x{}, expected {}x{dim}",
                    m.nrows(),
                    m.ncols(),
                    self.rows
                )));
            }
        }
        Ok(())
    }

    /// True when every value is exactly 0.0 or 1.0.
    pub fn is_binary(&self) -> bool {
        self.observed
            .iter()
            .all(|(_, m)| m.iter().all(|&v| v == 0.0 || v == 1.0))
    }
}

/// Load an IDX image file, binarize, and keep a seeded random subset.
///
/// `threshold` is a fraction of the byte range: a pixel becomes 1.0 when
/// its value exceeds `threshold * 255`. The subset of `subset` images is
/// drawn without replacement using `seed` and kept in file order. The
/// result holds one observed variable `"x"` with 784 binary columns.
pub fn load_mnist_idx(path: &Path, subset: usize, threshold: f64, seed: u64) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Format(format!(
            "{}: {} bytes is too short for an IDX header",
            path.display(),
            bytes.len()
        )));
    }
    let be = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let magic = be(0) as u32;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Format(format!(
            "{}: magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}",
            path.display()
        )));
    }
    let count = be(4);
    let (height, width) = (be(8), be(12));
    if height != IMAGE_SIDE || width != IMAGE_SIDE {
        return Err(Error::Format(format!(
            "{}: images are {height}x{width}, expected {IMAGE_SIDE}x{IMAGE_SIDE}",
            path.display()
        )));
    }
    let need = 16 + count * IMAGE_PIXELS;
    if bytes.len() != need {
        return Err(Error::Format(format!(
            "{}: {} bytes for {count} images, expected {need}",
            path.display(),
            bytes.len()
        )));
    }
    if subset == 0 {
        return Err(Error::Range("subset size must be at least 1".into()));
    }
    if subset > count {
        return Err(Error::Range(format!(
            "subset {subset} exceeds the {count} available images"
        )));
    }

    // partial Fisher-Yates: the first `subset` entries are a uniform
    // draw without replacement
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..count).collect();
    for i in 0..subset {
        let j = rng.gen_range(i..count);
        indices.swap(i, j);
    }
    let mut picked = indices[..subset].to_vec();
    picked.sort_unstable();

    let cut = threshold * 255.0;
    let mut out = Array2::zeros((subset, IMAGE_PIXELS));
    for (r, &img) in picked.iter().enumerate() {
        let off = 16 + img * IMAGE_PIXELS;
        for d in 0..IMAGE_PIXELS {
            out[[r, d]] = if f64::from(bytes[off + d]) > cut {
                1.0
            } else {
                0.0
            };
        }
    }

    let mut observed = Assignment::new(subset);
    observed.insert("x".into(), out)?;
    let mut dims = BTreeMap::new();
    dims.insert("x".to_string(), IMAGE_PIXELS);
    Ok(Dataset {
        observed,
        source: "mnist".into(),
        rows: subset,
        dims,
        seed,
    })
}

/// Shape of a synthetic dynamical-network dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbnSpec {
    /// Number of timesteps.
    pub length: usize,
    pub latent_dim: usize,
    pub obs_dim: usize,
    /// Independent sequences (datapoints).
    pub rows: usize,
    /// Seed for the ground-truth parameters and the sampled sequences.
    pub seed: u64,
}

impl DbnSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length < 2 {
            return Err(Error::Range(format!(
                "chain length {} is too short, need at least 2 timesteps",
                self.length
            )));
        }
        if self.latent_dim == 0 || self.obs_dim == 0 || self.rows == 0 {
            return Err(Error::Range(
                "latent_dim, obs_dim, and rows must all be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sample a synthetic dataset from a homogeneous dynamical network.
///
/// Ground-truth parameter entries are drawn from a standard normal, except
/// the initial state's log-scale, which is zero so that `z_t0 ~ N(0, I)`.
/// Returns the observations (latents discarded) together with the
/// ground-truth parameters that generated them.
pub fn generate_dbn_data(spec: &DbnSpec) -> Result<(Dataset, ParameterStore)> {
    spec.validate()?;
    let (net, template) = dbn_chain_model(spec.length, spec.latent_dim, spec.obs_dim).build()?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut truth = template;
    truth.init_gaussian(1.0, &mut rng);
    truth.set("ls_z0", ParamTensor::Vector(Array1::zeros(spec.latent_dim)))?;

    let full = net.sample_forward(&truth, spec.rows, &mut rng)?;
    let mut observed = Assignment::new(spec.rows);
    let mut dims = BTreeMap::new();
    for t in 0..spec.length {
        let name = format!("x_t{t}");
        observed.insert(name.clone(), full.get(&name)?.clone())?;
        dims.insert(name, spec.obs_dim);
    }
    Ok((
        Dataset {
            observed,
            source: "dbn-synthetic".into(),
            rows: spec.rows,
            dims,
            seed: spec.seed,
        },
        truth,
    ))
}

/// Write a synthetic dataset as CSV: one row per datapoint, one column per
/// observed coordinate, header `x_t{t}_d{d}`.
pub fn write_dbn_csv<W: Write>(dataset: &Dataset, spec: &DbnSpec, mut w: W) -> Result<()> {
    let mut header = Vec::with_capacity(spec.length * spec.obs_dim);
    for t in 0..spec.length {
        for d in 0..spec.obs_dim {
            header.push(format!("x_t{t}_d{d}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    let mut columns = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        columns.push(dataset.observed.get(&format!("x_t{t}"))?);
    }
    let mut line = String::new();
    for r in 0..dataset.rows {
        line.clear();
        for m in &columns {
            for d in 0..spec.obs_dim {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&m[[r, d]].to_string());
            }
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// A minimal in-memory IDX file holding `images` 28x28 frames whose pixel
/// `p` of image `i` is `(i + p) % 256`. Test fixture shared across the
/// crate's test modules.
#[cfg(test)]
pub(crate) fn idx_fixture(images: usize) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(16 + images * IMAGE_PIXELS);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images as u32).to_be_bytes());
    bytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    bytes.extend_from_slice(&(IMAGE_SIDE as u32).to_be_bytes());
    for i in 0..images {
        for p in 0..IMAGE_PIXELS {
            bytes.push(((i + p) % 256) as u8);
        }
    }
    bytes
}
