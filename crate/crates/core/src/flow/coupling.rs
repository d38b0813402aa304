//! Affine coupling blocks.
//!
//! A block splits its input at `d` into a lower half `a = x[..d]` and an upper
//! half `b = x[d..]`, then applies two coupling functions in turn:
//!
//! ```text
//! b' = b ⊙ exp(s₁(a))  + t₁(a)
//! a' = a ⊙ exp(s₂(b')) + t₂(b')
//! ```
//!
//! Each subnet emits `[raw_s | t]`. The raw scale goes through a `2·tanh`
//! clamp; in GIN mode the clamped scale is then forced to sum to zero per row,
//! which makes every block volume preserving.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::flow::subnet::{FinalLayerInit, Mlp, SubnetSpec, WeightInit};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Zero-sum scale: unit Jacobian determinant.
    Gin,
    /// Free clamped scale.
    Rnvp,
}

/// How GIN mode turns clamped scales into a zero-sum vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleConstraint {
    /// Clamp components `1..m-1`, set the last to minus their sum.
    #[default]
    NegativeSumLast,
    /// Clamp everything, then subtract the row mean.
    SubtractMean,
}

/// Builds the effective scale from raw subnet output `[B×m]`.
pub fn effective_scale(
    g: &mut Graph,
    raw: NodeId,
    mode: FlowMode,
    constraint: ScaleConstraint,
) -> Result<NodeId> {
    let (rows, m) = g.value(raw).dims2()?;
    match (mode, constraint) {
        (FlowMode::Rnvp, _) => {
            let t = g.tanh(raw);
            Ok(g.scale(t, 2.0))
        }
        (FlowMode::Gin, _) if m == 1 => Ok(g.constant(Tensor::zeros(&[rows, 1]))),
        (FlowMode::Gin, ScaleConstraint::NegativeSumLast) => {
            let head = g.slice_cols(raw, 0, m - 1)?;
            let t = g.tanh(head);
            let clamped = g.scale(t, 2.0);
            let total = g.reduce(crate::diff::ReduceKind::Sum, clamped, Some(1))?;
            let col = g.reshape(total, vec![rows, 1])?;
            let last = g.neg(col);
            g.concat(&[clamped, last])
        }
        (FlowMode::Gin, ScaleConstraint::SubtractMean) => {
            let t = g.tanh(raw);
            let clamped = g.scale(t, 2.0);
            let mut centering = Tensor::full(&[m, m], -1.0 / m as f64);
            for i in 0..m {
                centering.data_mut()[i * m + i] += 1.0;
            }
            let c = g.constant(centering);
            g.matmul(clamped, c)
        }
    }
}

/// Plain-tensor wrapper around [`effective_scale`].
pub fn effective_scale_values(
    raw: &Tensor,
    mode: FlowMode,
    constraint: ScaleConstraint,
) -> Result<Tensor> {
    let mut g = Graph::inference();
    let r = g.constant(raw.clone());
    let s = effective_scale(&mut g, r, mode, constraint)?;
    Ok(g.value(s).clone())
}

/// Output of one coupling function applied to the active half.
struct Coupled {
    active: NodeId,
    scale: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock {
    dim: usize,
    split: usize,
    mode: FlowMode,
    constraint: ScaleConstraint,
    /// Conditions on `x[..split]`, transforms `x[split..]`.
    lower_to_upper: Mlp,
    /// Conditions on `x[split..]`, transforms `x[..split]`.
    upper_to_lower: Mlp,
}

impl CouplingBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng>(
        dim: usize,
        hidden: &[usize],
        mode: FlowMode,
        constraint: ScaleConstraint,
        prefix: &str,
        store: &mut ParamStore,
        weight_init: WeightInit,
        final_init: FinalLayerInit,
        rng: &mut R,
    ) -> Result<Self> {
        let (first, second) = Self::subnet_specs(dim, hidden)?;
        let lower_to_upper = Mlp::init(first, &format!("{prefix}.f0"), store, weight_init, final_init, rng);
        let upper_to_lower = Mlp::init(second, &format!("{prefix}.f1"), store, weight_init, final_init, rng);
        Ok(Self {
            dim,
            split: dim / 2,
            mode,
            constraint,
            lower_to_upper,
            upper_to_lower,
        })
    }

    /// Subnet shapes for split `d = ⌊D/2⌋`: `d → hidden → 2(D-d)` and `(D-d) → hidden → 2d`.
    pub fn subnet_specs(dim: usize, hidden: &[usize]) -> Result<(SubnetSpec, SubnetSpec)> {
        if dim < 2 {
            return Err(Error::InvalidArgument(format!("coupling needs D >= 2, got {dim}")));
        }
        let d = dim / 2;
        let widths = |input: usize, active: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(2 * active);
            SubnetSpec::new(w)
        };
        Ok((widths(d, dim - d)?, widths(dim - d, d)?))
    }

    pub fn num_params(&self) -> usize {
        self.lower_to_upper.spec().num_params() + self.upper_to_lower.spec().num_params()
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn mode(&self) -> FlowMode {
        self.mode
    }

    fn scale_and_shift(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        net: &Mlp,
        cond: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let out = net.forward(g, store, cond)?;
        let m = net.spec().output_width() / 2;
        let raw = g.slice_cols(out, 0, m)?;
        let shift = g.slice_cols(out, m, 2 * m)?;
        let scale = effective_scale(g, raw, self.mode, self.constraint)?;
        Ok((scale, shift))
    }

    fn couple(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        net: &Mlp,
        cond: NodeId,
        active: NodeId,
    ) -> Result<Coupled> {
        let (scale, shift) = self.scale_and_shift(g, store, net, cond)?;
        let e = g.exp(scale);
        let scaled = g.mul(active, e)?;
        let active = g.add(scaled, shift)?;
        Ok(Coupled { active, scale })
    }

    fn uncouple(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        net: &Mlp,
        cond: NodeId,
        active: NodeId,
    ) -> Result<NodeId> {
        let (scale, shift) = self.scale_and_shift(g, store, net, cond)?;
        let centered = g.sub(active, shift)?;
        let neg = g.neg(scale);
        let e = g.exp(neg);
        g.mul(centered, e)
    }

    /// Forward pass; returns `(y, logdet)` with `logdet: [B]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let cols = g.value(x).dims2()?.1;
        if cols != self.dim {
            return Err(Error::dim("couple_forward", format!("block dim {} vs input {cols}", self.dim)));
        }
        let lower = g.slice_cols(x, 0, self.split)?;
        let upper = g.slice_cols(x, self.split, self.dim)?;
        let c1 = self.couple(g, store, &self.lower_to_upper, lower, upper)?;
        let c2 = self.couple(g, store, &self.upper_to_lower, c1.active, lower)?;
        let y = g.concat(&[c2.active, c1.active])?;
        let both = g.concat(&[c1.scale, c2.scale])?;
        let logdet = g.reduce(crate::diff::ReduceKind::Sum, both, Some(1))?;
        Ok((y, logdet))
    }

    pub fn inverse(&self, g: &mut Graph, store: &ParamStore, y: NodeId) -> Result<NodeId> {
        let cols = g.value(y).dims2()?.1;
        if cols != self.dim {
            return Err(Error::dim("couple_inverse", format!("block dim {} vs input {cols}", self.dim)));
        }
        let lower = g.slice_cols(y, 0, self.split)?;
        let upper = g.slice_cols(y, self.split, self.dim)?;
        let lower = self.uncouple(g, store, &self.upper_to_lower, upper, lower)?;
        let upper = self.uncouple(g, store, &self.lower_to_upper, lower, upper)?;
        g.concat(&[lower, upper])
    }

    /// Effective scale rows of both coupling functions for input `x`.
    pub fn scales(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::inference();
        let xn = g.constant(x.clone());
        let lower = g.slice_cols(xn, 0, self.split)?;
        let upper = g.slice_cols(xn, self.split, self.dim)?;
        let c1 = self.couple(&mut g, store, &self.lower_to_upper, lower, upper)?;
        let c2 = self.couple(&mut g, store, &self.upper_to_lower, c1.active, lower)?;
        Ok((g.value(c1.scale).clone(), g.value(c2.scale).clone()))
    }
}

pub(crate) fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    inv
}

pub(crate) fn permute(g: &mut Graph, x: NodeId, perm: &[usize]) -> Result<NodeId> {
    g.permute_cols(x, Rc::from(perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn gin_last_component_is_negative_sum() {
        let (a, b) = (0.3_f64, -1.1_f64);
        let s = effective_scale_values(
            &raw(&[vec![a, b, 123.0]]),
            FlowMode::Gin,
            ScaleConstraint::NegativeSumLast,
        )
        .unwrap();
        let expected_last = -(2.0 * a.tanh() + 2.0 * b.tanh());
        assert_eq!(s.data()[2], expected_last);
        assert_eq!(s.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn gin_two_components() {
        let s = effective_scale_values(
            &raw(&[vec![0.0, 7.0]]),
            FlowMode::Gin,
            ScaleConstraint::NegativeSumLast,
        )
        .unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gin_single_component_is_zero() {
        let s = effective_scale_values(&raw(&[vec![5.0], vec![-3.0]]), FlowMode::Gin, ScaleConstraint::NegativeSumLast)
            .unwrap();
        assert_eq!(s.data(), &[0.0, 0.0]);
    }

    #[test]
    fn rnvp_clamp_ceiling() {
        let s = effective_scale_values(&raw(&[vec![1e3, -1e3, 0.0]]), FlowMode::Rnvp, ScaleConstraint::default())
            .unwrap();
        assert_eq!(s.data(), &[2.0, -2.0, 0.0]);
    }

    #[test]
    fn subtract_mean_variant_is_centered() {
        let s = effective_scale_values(&raw(&[vec![0.2, 1.5, -0.4, 3.0]]), FlowMode::Gin, ScaleConstraint::SubtractMean)
            .unwrap();
        assert!(s.data().iter().sum::<f64>().abs() < 1e-15);
    }

    #[test]
    fn subnet_shapes_for_odd_dim() {
        let (a, b) = CouplingBlock::subnet_specs(5, &[8]).unwrap();
        assert_eq!(a.layer_widths, vec![2, 8, 6]);
        assert_eq!(b.layer_widths, vec![3, 8, 4]);
        assert!(CouplingBlock::subnet_specs(1, &[8]).is_err());
    }

    #[test]
    fn permutation_inverse() {
        let p = vec![3, 0, 2, 1];
        let inv = invert_permutation(&p);
        for j in 0..4 {
            assert_eq!(inv[p[j]], j);
        }
    }
}
