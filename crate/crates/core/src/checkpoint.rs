//! Flow checkpoints: architecture, weights and optional optimizer state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Blob, Container};
use crate::error::{Error, Result};
use crate::flow::{FlowHeader, FlowModel};
use crate::latent::MixtureParams;
use crate::tensor::Tensor;
use crate::train::{AdamState, TrainState};

const MAGIC: &[u8; 8] = b"GINCKPT1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub train_state: Option<TrainState>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    step: u64,
    phase: u8,
    epoch_in_phase: usize,
    epoch_losses: Vec<f64>,
    capped: Vec<bool>,
    finished: bool,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_t: u64,
    n_classes: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    format: String,
    version: u32,
    flow: FlowHeader,
    train: Option<StateHeader>,
}

impl Checkpoint {
    pub fn new(model: FlowModel, train_state: Option<TrainState>) -> Self {
        Self { model, train_state }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let train = self.train_state.as_ref().map(|s| StateHeader {
            step: s.step,
            phase: s.phase,
            epoch_in_phase: s.epoch_in_phase,
            epoch_losses: s.epoch_losses.clone(),
            capped: s.capped.clone(),
            finished: s.finished,
            adam_beta1: s.adam.beta1,
            adam_beta2: s.adam.beta2,
            adam_eps: s.adam.eps,
            adam_t: s.adam.t,
            n_classes: s.mixture.n_classes(),
        });
        let header = CheckpointHeader {
            format: "gin-checkpoint".into(),
            version: FORMAT_VERSION,
            flow: self.model.header(),
            train,
        };
        let mut c = Container::new(serde_json::to_vec(&header)?);
        c.push("flow.weights", Blob::F64(self.model.params().to_flat()));
        if let Some(s) = &self.train_state {
            c.push("adam.m", Blob::F64(s.adam.m.clone()));
            c.push("adam.v", Blob::F64(s.adam.v.clone()));
            c.push("mixture.means", Blob::F64(s.mixture.means().data().to_vec()));
            c.push("mixture.variances", Blob::F64(s.mixture.variances().data().to_vec()));
        }
        Ok(c.encode(MAGIC))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut c = Container::decode(MAGIC, bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&c.header)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        if header.format != "gin-checkpoint" || header.version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint format {} v{}",
                header.format, header.version
            )));
        }
        let weights = c.take_f64("flow.weights")?;
        let model = FlowModel::from_header(&header.flow, &weights)?;
        let train_state = match header.train {
            None => None,
            Some(h) => {
                let m = c.take_f64("adam.m")?;
                let v = c.take_f64("adam.v")?;
                if m.len() != weights.len() || v.len() != weights.len() {
                    return Err(Error::Corrupt("optimizer moments do not match the weights".into()));
                }
                let d = model.dim();
                let shape = |data: Vec<f64>| {
                    Tensor::matrix(h.n_classes, d, data)
                        .map_err(|_| Error::Corrupt("mixture payload has the wrong size".into()))
                };
                let mixture = MixtureParams::new(
                    shape(c.take_f64("mixture.means")?)?,
                    shape(c.take_f64("mixture.variances")?)?,
                )
                .map_err(|e| Error::Corrupt(e.to_string()))?;
                if !(1..=2).contains(&h.phase) {
                    return Err(Error::Corrupt(format!("phase {} out of range", h.phase)));
                }
                Some(TrainState {
                    step: h.step,
                    phase: h.phase,
                    epoch_in_phase: h.epoch_in_phase,
                    epoch_losses: h.epoch_losses,
                    capped: h.capped,
                    finished: h.finished,
                    adam: AdamState {
                        beta1: h.adam_beta1,
                        beta2: h.adam_beta2,
                        eps: h.adam_eps,
                        t: h.adam_t,
                        m,
                        v,
                    },
                    mixture,
                })
            }
        };
        if let Some((name, _)) = c.blobs.first() {
            return Err(Error::Corrupt(format!("unexpected blob {name}")));
        }
        Ok(Self { model, train_state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
