use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Layer widths of a fully connected subnet, input first, output last.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubnetSpec {
    pub layer_widths: Vec<usize>,
}

impl SubnetSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        if layer_widths.len() < 2 || layer_widths.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "subnet needs at least input and output widths, all positive: {layer_widths:?}"
            )));
        }
        Ok(Self { layer_widths })
    }

    pub fn input_width(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// How the last layer of a subnet starts out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FinalLayerInit {
    /// All zeros, so the coupling starts as the identity.
    Zero,
    /// Fan-in scaled normal, like the hidden layers.
    Random,
    /// Like `Random`, multiplied by the gain.
    Scaled(f64),
}

/// Distribution of the random weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `N(0, 2/fan_in)` weights, zero biases.
    #[default]
    HeNormal,
    /// Weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
}

/// Dense layers with ReLU between them and no activation on the output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: SubnetSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn init<R: Rng>(
        spec: SubnetSpec,
        prefix: &str,
        store: &mut ParamStore,
        weight_init: WeightInit,
        final_init: FinalLayerInit,
        rng: &mut R,
    ) -> Self {
        let n_layers = spec.layer_widths.len() - 1;
        let mut layers = Vec::with_capacity(n_layers);
        for (l, w) in spec.layer_widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 1 == n_layers;
            let zero = last && final_init == FinalLayerInit::Zero;
            let mut draw = |n: usize| -> Vec<f64> {
                match weight_init {
                    WeightInit::HeNormal => {
                        let std = (2.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                    }
                    WeightInit::FanInUniform => {
                        let bound = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                }
            };
            let gain = match final_init {
                FinalLayerInit::Scaled(g) if last => g,
                _ => 1.0,
            };
            let mut data = if zero { vec![0.0; fan_in * fan_out] } else { draw(fan_in * fan_out) };
            let mut bias_data = if zero || weight_init == WeightInit::HeNormal {
                vec![0.0; fan_out]
            } else {
                draw(fan_out)
            };
            for v in data.iter_mut().chain(bias_data.iter_mut()) {
                *v *= gain;
            }
            let weight = store.add(
                format!("{prefix}.layer{l}.weight"),
                Tensor::from_parts(vec![fan_in, fan_out], data),
            );
            let bias = store.add(
                format!("{prefix}.layer{l}.bias"),
                Tensor::from_parts(vec![fan_out], bias_data),
            );
            layers.push((weight, bias));
        }
        Self { spec, layers }
    }

    pub fn spec(&self) -> &SubnetSpec {
        &self.spec
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let n = self.layers.len();
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let wn = g.param(store, w);
            let bn = g.param(store, b);
            let z = g.matmul(h, wn)?;
            h = g.add(z, bn)?;
            if l + 1 < n {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn artificial_data_subnet_parameter_count() {
        let spec = SubnetSpec::new(vec![5, 10, 10, 10]).unwrap();
        // 16 coupling functions of this shape give the 4,480 weights of the reference net.
        assert_eq!(spec.num_params() * 16, 4480);
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = SubnetSpec::new(vec![3, 4, 2]).unwrap();
        let mlp = Mlp::init(spec, "f", &mut store, WeightInit::HeNormal, FinalLayerInit::Zero, &mut rng);
        let mut g = Graph::inference();
        let x = g.constant(Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0.1, -4.]).unwrap());
        let y = mlp.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 2]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(SubnetSpec::new(vec![5]).is_err());
        assert!(SubnetSpec::new(vec![5, 0, 3]).is_err());
    }
}
