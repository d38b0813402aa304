//! Synthetic conditionally Gaussian data pushed through a random RNVP mixer.
//!
//! Each class draws a mean uniformly from `mean_range` and a variance from
//! `variance_range` for every informative latent dimension. The remaining
//! dimensions carry small isotropic noise. The latent sample is then mixed by
//! a randomly initialised RNVP flow to give the observations.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::flow::{build_random_mixer, FlowModel};
use crate::latent::check_labels;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GINDATA1";
const FORMAT_VERSION: u32 = 1;
/// Mixers whose output exceeds this magnitude on the probe batch are rejected.
pub const MIXER_REJECT_ABS: f64 = 1e6;
const MAX_MIXER_ATTEMPTS: u64 = 64;
const PROBE_ROWS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundTruthSpec {
    pub n_classes: usize,
    pub n_informative: usize,
    pub dim: usize,
    pub n_samples: usize,
    pub mean_range: [f64; 2],
    pub variance_range: [f64; 2],
    pub noise_scale: f64,
    pub mixer_blocks: usize,
    pub mixer_hidden: Vec<usize>,
    pub data_seed: u64,
    pub mixer_seed: u64,
}

impl Default for GroundTruthSpec {
    /// Five clusters in two informative dims, eight noise dims, 100k samples.
    fn default() -> Self {
        Self {
            n_classes: 5,
            n_informative: 2,
            dim: 10,
            n_samples: 100_000,
            mean_range: [-5.0, 5.0],
            variance_range: [0.5, 3.0],
            noise_scale: 0.01,
            mixer_blocks: 8,
            mixer_hidden: vec![10, 10],
            data_seed: 1,
            mixer_seed: 16,
        }
    }
}

impl GroundTruthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_classes == 0 {
            return bad("n_classes must be positive");
        }
        if self.n_informative == 0 || self.n_informative > self.dim {
            return bad("need 1 <= n_informative <= dim");
        }
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if self.n_samples == 0 {
            return bad("n_samples must be positive");
        }
        if !(self.mean_range[0] <= self.mean_range[1]) {
            return bad("mean_range is not an interval");
        }
        if !(self.variance_range[0] > 0.0 && self.variance_range[0] <= self.variance_range[1]) {
            return bad("variance_range must be a positive interval");
        }
        if !(self.noise_scale > 0.0) {
            return bad("noise_scale must be positive");
        }
        if self.mixer_blocks == 0 || self.mixer_hidden.contains(&0) {
            return bad("mixer needs at least one block and positive widths");
        }
        Ok(())
    }
}

/// Per-class Gaussian parameters of the informative latent dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// `n_classes × n_informative`
    pub means: Vec<Vec<f64>>,
    /// `n_classes × n_informative`
    pub variances: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub spec: GroundTruthSpec,
    pub clusters: ClusterParams,
    pub mixer_seed_used: u64,
    pub rejected_mixer_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    /// Ground-truth latents, kept only for evaluation.
    pub z: Option<Tensor>,
    pub provenance: Option<Provenance>,
}

impl LabeledDataset {
    pub fn new(x: Tensor, labels: Vec<usize>, n_classes: usize, z: Option<Tensor>) -> Result<Self> {
        let (rows, cols) = x.dims2()?;
        if labels.len() != rows {
            return Err(Error::dim("dataset", format!("{rows} rows vs {} labels", labels.len())));
        }
        check_labels(&labels, n_classes)?;
        if let Some(z) = &z {
            if z.dims2()? != (rows, cols) {
                return Err(Error::dim("dataset", "latents do not match observations"));
            }
        }
        Ok(Self {
            x,
            labels,
            n_classes,
            z,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.shape()[1]
    }

    /// The first `n_informative` ground-truth columns, if latents are present.
    pub fn informative_latents(&self) -> Option<Tensor> {
        let z = self.z.as_ref()?;
        let n = self.provenance.as_ref().map_or(z.shape()[1], |p| p.spec.n_informative);
        z.slice_cols(0, n).ok()
    }
}

/// Draws cluster parameters, labels and latents. Labels are balanced across classes.
pub fn gen_latents(spec: &GroundTruthSpec) -> Result<(Tensor, Vec<usize>, ClusterParams)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.data_seed);
    let (m, n_inf, d) = (spec.n_classes, spec.n_informative, spec.dim);
    let uniform = |rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]| lo + (hi - lo) * rng.random::<f64>();

    let means: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n_inf).map(|_| uniform(&mut rng, spec.mean_range)).collect())
        .collect();
    let variances: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n_inf).map(|_| uniform(&mut rng, spec.variance_range)).collect())
        .collect();

    let mut labels: Vec<usize> = (0..spec.n_samples).map(|i| i % m).collect();
    labels.shuffle(&mut rng);

    let mut z = Vec::with_capacity(spec.n_samples * d);
    for &u in &labels {
        for j in 0..n_inf {
            let e: f64 = rng.sample(StandardNormal);
            z.push(means[u][j] + variances[u][j].sqrt() * e);
        }
        for _ in n_inf..d {
            let e: f64 = rng.sample(StandardNormal);
            z.push(spec.noise_scale * e);
        }
    }
    Ok((
        Tensor::matrix(spec.n_samples, d, z)?,
        labels,
        ClusterParams { means, variances },
    ))
}

/// `x = f(z)` through the mixer.
pub fn mix(z: &Tensor, mixer: &FlowModel) -> Result<Tensor> {
    if z.dims2()?.1 != mixer.dim() {
        return Err(Error::dim("mix", format!("latent width vs mixer dim {}", mixer.dim())));
    }
    let (x, _) = mixer.forward(z)?;
    x.check_finite("mixer output")?;
    Ok(x)
}

fn mixer_ok(x: &Result<Tensor>) -> bool {
    matches!(x, Ok(t) if t.all_finite() && t.max_abs() <= MIXER_REJECT_ABS)
}

/// Full generation: latents, an accepted mixer, and observations.
pub fn generate(spec: &GroundTruthSpec) -> Result<(LabeledDataset, FlowModel)> {
    let (z, labels, clusters) = gen_latents(spec)?;
    let probe = z.slice_cols(0, spec.dim)?.select_rows(&(0..PROBE_ROWS.min(spec.n_samples)).collect::<Vec<_>>())?;
    let mut rejected = Vec::new();
    for attempt in 0..MAX_MIXER_ATTEMPTS {
        let seed = spec.mixer_seed.wrapping_add(attempt);
        let mixer = build_random_mixer_with(spec, seed)?;
        if !mixer_ok(&mix(&probe, &mixer)) {
            rejected.push(seed);
            continue;
        }
        let x = mix(&z, &mixer);
        if !mixer_ok(&x) {
            rejected.push(seed);
            continue;
        }
        let mut ds = LabeledDataset::new(x?, labels, spec.n_classes, Some(z))?;
        ds.provenance = Some(Provenance {
            spec: spec.clone(),
            clusters,
            mixer_seed_used: seed,
            rejected_mixer_seeds: rejected,
        });
        return Ok((ds, mixer));
    }
    Err(Error::InvalidArgument(format!(
        "no acceptable mixer in {MAX_MIXER_ATTEMPTS} seeds starting at {}",
        spec.mixer_seed
    )))
}

/// The mixer a spec would use for a given seed.
pub fn build_random_mixer_with(spec: &GroundTruthSpec, seed: u64) -> Result<FlowModel> {
    let mut mixer = build_random_mixer(spec.dim, spec.mixer_blocks, seed)?;
    if spec.mixer_hidden != mixer.config().hidden {
        let config = crate::flow::FlowConfig {
            hidden: spec.mixer_hidden.clone(),
            ..mixer.config().clone()
        };
        mixer = FlowModel::new(config, seed, crate::flow::FinalLayerInit::Random)?;
    }
    Ok(mixer)
}

/// Adds fresh `N(0, sigma²)` noise to every element.
pub fn augment<R: Rng>(x: &Tensor, sigma: f64, rng: &mut R) -> Result<Tensor> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .map(|&v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    version: u32,
    n_samples: usize,
    dim: usize,
    n_classes: usize,
    has_latents: bool,
    provenance: Option<Provenance>,
}

impl LabeledDataset {
    pub fn to_container(&self) -> Result<Container> {
        let header = DatasetHeader {
            format: "gin-dataset".into(),
            version: FORMAT_VERSION,
            n_samples: self.len(),
            dim: self.dim(),
            n_classes: self.n_classes,
            has_latents: self.z.is_some(),
            provenance: self.provenance.clone(),
        };
        let mut c = Container::new(serde_json::to_vec(&header)?);
        c.push("x", Blob::F64(self.x.data().to_vec()));
        c.push("u", Blob::U32(self.labels.iter().map(|&u| u as u32).collect()));
        if let Some(z) = &self.z {
            c.push("z", Blob::F64(z.data().to_vec()));
        }
        Ok(c)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(self.to_container()?.encode(MAGIC))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::decode(MAGIC, bytes)?;
        let header: DatasetHeader = serde_json::from_slice(&c.header)
            .map_err(|e| Error::Corrupt(format!("dataset header: {e}")))?;
        if header.format != "gin-dataset" || header.version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let (n, d) = (header.n_samples, header.dim);
        let x = c.take_f64("x")?;
        let u = c.take_u32("u")?;
        if x.len() != n * d || u.len() != n {
            return Err(Error::Corrupt("payload length disagrees with header".into()));
        }
        let z = if header.has_latents {
            let z = c.take_f64("z")?;
            if z.len() != n * d {
                return Err(Error::Corrupt("latent payload length disagrees with header".into()));
            }
            Some(Tensor::matrix(n, d, z)?)
        } else {
            None
        };
        let mut ds = LabeledDataset::new(
            Tensor::matrix(n, d, x)?,
            u.into_iter().map(|v| v as usize).collect(),
            header.n_classes,
            z,
        )
        .map_err(|e| Error::Corrupt(e.to_string()))?;
        ds.provenance = header.provenance;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
