use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::flow::coupling::{invert_permutation, permute, CouplingBlock, FlowMode, ScaleConstraint};
use crate::flow::subnet::{FinalLayerInit, WeightInit};
use crate::tensor::Tensor;

/// Architecture of a fully connected coupling flow.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub dim: usize,
    pub n_blocks: usize,
    /// Hidden widths of every coupling subnet.
    pub hidden: Vec<usize>,
    pub mode: FlowMode,
    #[serde(default)]
    pub constraint: ScaleConstraint,
    #[serde(default)]
    pub init: WeightInit,
}

impl FlowConfig {
    /// Eight GIN blocks with `d → 10 → 10 → 2(D-d)` subnets.
    pub fn gin(dim: usize) -> Self {
        Self {
            dim,
            n_blocks: 8,
            hidden: vec![10, 10],
            mode: FlowMode::Gin,
            constraint: ScaleConstraint::NegativeSumLast,
            init: WeightInit::HeNormal,
        }
    }

    pub fn rnvp(dim: usize) -> Self {
        Self {
            mode: FlowMode::Rnvp,
            ..Self::gin(dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::InvalidArgument(format!("flow needs D >= 2, got {}", self.dim)));
        }
        if self.n_blocks == 0 {
            return Err(Error::InvalidArgument("flow needs at least one block".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Stack of coupling blocks, each preceded by a fixed column permutation.
///
/// The model maps data to latent space (`w = g⁻¹(x)`); [`FlowModel::inverse`]
/// maps latents back to data.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    config: FlowConfig,
    seed: u64,
    permutations: Vec<Vec<usize>>,
    inverse_permutations: Vec<Vec<usize>>,
    blocks: Vec<CouplingBlock>,
    params: ParamStore,
}

impl FlowModel {
    /// Random permutations and fan-in scaled hidden weights drawn from `seed`.
    pub fn new(config: FlowConfig, seed: u64, final_init: FinalLayerInit) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut permutations = Vec::with_capacity(config.n_blocks);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for k in 0..config.n_blocks {
            let mut perm: Vec<usize> = (0..config.dim).collect();
            perm.shuffle(&mut rng);
            permutations.push(perm);
            blocks.push(CouplingBlock::init(
                config.dim,
                &config.hidden,
                config.mode,
                config.constraint,
                &format!("block{k}"),
                &mut params,
                config.init,
                final_init,
                &mut rng,
            )?);
        }
        let inverse_permutations = permutations.iter().map(|p| invert_permutation(p)).collect();
        Ok(Self {
            config,
            seed,
            permutations,
            inverse_permutations,
            blocks,
            params,
        })
    }

    /// Estimating model: every block starts as the identity.
    pub fn new_identity_init(config: FlowConfig, seed: u64) -> Result<Self> {
        Self::new(config, seed, FinalLayerInit::Zero)
    }

    /// Rebuilds a model from stored permutations and flat weights.
    pub fn from_parts(
        config: FlowConfig,
        seed: u64,
        permutations: Vec<Vec<usize>>,
        weights: &[f64],
    ) -> Result<Self> {
        config.validate()?;
        if permutations.len() != config.n_blocks
            || permutations
                .iter()
                .any(|p| p.len() != config.dim || !crate::diff::is_permutation(p))
        {
            return Err(Error::Corrupt("permutations do not match the flow config".into()));
        }
        // Same seed and config reproduce the parameter layout; weights are then overwritten.
        let mut model = Self::new(config, seed, FinalLayerInit::Zero)?;
        model.params.load_flat(weights)?;
        model.inverse_permutations = permutations.iter().map(|p| invert_permutation(p)).collect();
        model.permutations = permutations;
        Ok(model)
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn mode(&self) -> FlowMode {
        self.config.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        let (rows, cols) = x.dims2()?;
        if cols != self.config.dim {
            return Err(Error::dim(
                "flow",
                format!("model dim {} vs input width {cols}", self.config.dim),
            ));
        }
        Ok(rows)
    }

    /// Records the forward pass on `g` using `store` for the weights.
    ///
    /// Returns the latent node and the per-sample log-determinant `[B]`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let mut h = x;
        let mut logdet: Option<NodeId> = None;
        for (k, (block, perm)) in self.blocks.iter().zip(&self.permutations).enumerate() {
            let p = permute(g, h, perm)?;
            let (y, ld) = block.forward(g, store, p)?;
            if !g.value(y).all_finite() {
                return Err(Error::NonFiniteBlock { block: k });
            }
            h = y;
            logdet = Some(match logdet {
                None => ld,
                Some(acc) => g.add(acc, ld)?,
            });
        }
        Ok((h, logdet.expect("at least one block")))
    }

    /// `w = g⁻¹(x)` with the per-sample log-determinant.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_input(x)?;
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let (w, ld) = self.forward_graph(&mut g, &self.params, xn)?;
        Ok((g.value(w).clone(), g.value(ld).data().to_vec()))
    }

    /// `x = g(w)`: inverse couplings and inverse permutations in reverse order.
    pub fn inverse(&self, w: &Tensor) -> Result<Tensor> {
        self.check_input(w)?;
        let mut g = Graph::inference();
        let mut h = g.constant(w.clone());
        for (k, (block, inv)) in self
            .blocks
            .iter()
            .zip(&self.inverse_permutations)
            .enumerate()
            .rev()
        {
            let x = block.inverse(&mut g, &self.params, h)?;
            if !g.value(x).all_finite() {
                return Err(Error::NonFiniteBlock { block: k });
            }
            h = permute(&mut g, x, inv)?;
        }
        Ok(g.value(h).clone())
    }

    /// Row-wise effective scales of every coupling function along the forward pass.
    pub fn scale_rows(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(2 * self.blocks.len());
        let mut h = x.clone();
        for (block, perm) in self.blocks.iter().zip(&self.permutations) {
            let p = h.select_cols(perm);
            let (s1, s2) = block.scales(&self.params, &p)?;
            out.push(s1);
            out.push(s2);
            let mut g = Graph::inference();
            let pn = g.constant(p);
            let (y, _) = block.forward(&mut g, &self.params, pn)?;
            h = g.value(y).clone();
        }
        Ok(out)
    }
}

/// Ground-truth nonlinear mixer: an RNVP flow with random weights in every layer.
pub fn build_random_mixer(dim: usize, n_blocks: usize, seed: u64) -> Result<FlowModel> {
    let config = FlowConfig {
        n_blocks,
        init: WeightInit::FanInUniform,
        ..FlowConfig::rnvp(dim)
    };
    FlowModel::new(config, seed, FinalLayerInit::Random)
}

/// Serializable description of a flow; weights travel separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowHeader {
    pub config: FlowConfig,
    pub seed: u64,
    pub split: usize,
    pub subnet_widths: Vec<Vec<usize>>,
    pub permutations: Vec<Vec<usize>>,
    pub num_weights: usize,
}

impl FlowModel {
    pub fn header(&self) -> FlowHeader {
        let (a, b) = CouplingBlock::subnet_specs(self.config.dim, &self.config.hidden)
            .expect("validated config");
        FlowHeader {
            config: self.config.clone(),
            seed: self.seed,
            split: self.config.dim / 2,
            subnet_widths: vec![a.layer_widths, b.layer_widths],
            permutations: self.permutations.clone(),
            num_weights: self.num_params(),
        }
    }

    pub fn from_header(header: &FlowHeader, weights: &[f64]) -> Result<Self> {
        if header.num_weights != weights.len() {
            return Err(Error::Corrupt(format!(
                "header declares {} weights, payload has {}",
                header.num_weights,
                weights.len()
            )));
        }
        let model = Self::from_parts(
            header.config.clone(),
            header.seed,
            header.permutations.clone(),
            weights,
        )?;
        if model.header() != *header {
            return Err(Error::Corrupt("flow header is inconsistent with its config".into()));
        }
        Ok(model)
    }
}
