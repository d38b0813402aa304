//! Self-checks shared by the `selftest` command and the test suites:
//! per-op gradient checks, numerical Jacobians and round trips.

use std::rc::Rc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::diff::{GradCheck, GradFault, Graph, NodeId, ParamId, ParamStore, ReduceKind};
use crate::error::{Error, Result};
use crate::flow::{FinalLayerInit, FlowConfig, FlowModel};
use crate::latent::{nll, nll_batch_stats, update_from_batch, MixtureParams, VarianceDivisor};
use crate::tensor::Tensor;

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

/// Normal draws pushed at least `gap` away from zero, so kinks stay out of reach.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    normal_tensor(rng, shape).map(|v| if v.abs() < gap { v.signum() * gap + v } else { v })
}

/// Reduces any node to a scalar with fixed random weights.
fn weighted_sum(g: &mut Graph, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let wn = g.constant(weights.clone());
    let p = g.mul(x, wn)?;
    Ok(g.sum(p))
}

type Build = Box<dyn Fn(&mut Graph, &ParamStore, &[ParamId]) -> Result<NodeId>>;

struct OpCase {
    name: &'static str,
    params: Vec<Tensor>,
    build: Build,
}

fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let w34 = normal_tensor(r, &[3, 4]);
    let w32 = normal_tensor(r, &[3, 2]);
    let w4 = normal_tensor(r, &[4]);
    let w2x5 = normal_tensor(r, &[2, 5]);
    let w43 = normal_tensor(r, &[4, 3]);
    let w12 = normal_tensor(r, &[12]);
    let perm: Rc<[usize]> = Rc::from(vec![2, 0, 3, 1]);
    let gather: Rc<[usize]> = Rc::from(vec![1, 1, 0, 2]);
    let seg: Rc<[usize]> = Rc::from(vec![1, 0, 1]);

    let unary = |name: &'static str, x: Tensor, w: Tensor, f: fn(&mut Graph, NodeId) -> NodeId| OpCase {
        name,
        params: vec![x],
        build: Box::new(move |g, s, ids| {
            let a = g.param(s, ids[0]);
            let y = f(g, a);
            weighted_sum(g, y, &w)
        }),
    };

    vec![
        OpCase {
            name: "matmul",
            params: vec![normal_tensor(r, &[3, 4]), normal_tensor(r, &[4, 2])],
            build: Box::new({
                let w = w32.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let b = g.param(s, ids[1]);
                    let y = g.matmul(a, b)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "add_broadcast",
            params: vec![normal_tensor(r, &[3, 4]), normal_tensor(r, &[4])],
            build: Box::new({
                let w = w34.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let b = g.param(s, ids[1]);
                    let y = g.add(a, b)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "mul",
            params: vec![normal_tensor(r, &[3, 4]), normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w34.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let b = g.param(s, ids[1]);
                    let y = g.mul(a, b)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "sub",
            params: vec![normal_tensor(r, &[3, 4]), normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w34.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let b = g.param(s, ids[1]);
                    let y = g.sub(a, b)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        unary("relu", away_from_zero(r, &[3, 4], 1e-2), w34.clone(), |g, a| g.relu(a)),
        unary("tanh", normal_tensor(r, &[3, 4]), w34.clone(), |g, a| g.tanh(a)),
        unary("exp", normal_tensor(r, &[3, 4]), w34.clone(), |g, a| g.exp(a)),
        unary("log", normal_tensor(r, &[3, 4]).map(|v| v.abs() + 0.5), w34.clone(), |g, a| g.log(a)),
        unary("recip", normal_tensor(r, &[3, 4]).map(|v| v.abs() + 0.5), w34.clone(), |g, a| g.recip(a)),
        unary("neg", normal_tensor(r, &[3, 4]), w34.clone(), |g, a| g.neg(a)),
        unary("scale", normal_tensor(r, &[3, 4]), w34.clone(), |g, a| g.scale(a, -2.5)),
        unary("clamp_min", away_from_zero(r, &[3, 4], 1e-2), w34.clone(), |g, a| g.clamp_min(a, 0.0)),
        OpCase {
            name: "sum",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new(|g, s, ids| {
                let a = g.param(s, ids[0]);
                let sq = g.mul(a, a)?;
                Ok(g.sum(sq))
            }),
        },
        OpCase {
            name: "mean",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new(|g, s, ids| {
                let a = g.param(s, ids[0]);
                let t = g.tanh(a);
                Ok(g.mean(t))
            }),
        },
        OpCase {
            name: "reduce_rows",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w4.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let y = g.reduce(ReduceKind::Sum, a, Some(0))?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "reduce_cols_mean",
            params: vec![normal_tensor(r, &[4, 3])],
            build: Box::new({
                let w = w4.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let y = g.reduce(ReduceKind::Mean, a, Some(1))?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "split_concat",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w34.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let parts = g.split_cols(a, &[1, 3])?;
                    let t = g.tanh(parts[1]);
                    let y = g.concat(&[parts[2], t, parts[0]])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "permute_cols",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w34.clone();
                let perm = perm.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let y = g.permute_cols(a, perm.clone())?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "gather_rows",
            params: vec![normal_tensor(r, &[3, 3])],
            build: Box::new({
                let w = w43.clone();
                let gather = gather.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let y = g.gather_rows(a, gather.clone())?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "segment_sum",
            params: vec![normal_tensor(r, &[3, 5])],
            build: Box::new({
                let w = w2x5.clone();
                let seg = seg.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let y = g.segment_sum(a, seg.clone(), 2)?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "reshape",
            params: vec![normal_tensor(r, &[3, 4])],
            build: Box::new({
                let w = w12.clone();
                move |g, s, ids| {
                    let a = g.param(s, ids[0]);
                    let t = g.exp(a);
                    let y = g.reshape(t, vec![12])?;
                    weighted_sum(g, y, &w)
                }
            }),
        },
        OpCase {
            name: "mlp_loss",
            params: vec![
                normal_tensor(r, &[4, 3]),
                normal_tensor(r, &[3, 5]),
                normal_tensor(r, &[5]),
                normal_tensor(r, &[5, 2]),
                normal_tensor(r, &[2]),
            ],
            build: Box::new({
                let target = normal_tensor(r, &[4, 2]);
                move |g, s, ids| {
                    let x = g.param(s, ids[0]);
                    let w1 = g.param(s, ids[1]);
                    let b1 = g.param(s, ids[2]);
                    let w2 = g.param(s, ids[3]);
                    let b2 = g.param(s, ids[4]);
                    let h = g.matmul(x, w1)?;
                    let h = g.add(h, b1)?;
                    let h = g.tanh(h);
                    let y = g.matmul(h, w2)?;
                    let y = g.add(y, b2)?;
                    let t = g.constant(target.clone());
                    let d = g.sub(y, t)?;
                    let sq = g.mul(d, d)?;
                    Ok(g.mean(sq))
                }
            }),
        },
    ]
}

fn check_case(case: OpCase, fault: Option<GradFault>) -> Result<CheckOutcome> {
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> = case
        .params
        .into_iter()
        .enumerate()
        .map(|(k, t)| store.add(format!("{}.p{k}", case.name), t))
        .collect();
    let mut gc = GradCheck::new(GRADCHECK_STEP)?;
    if let Some(f) = fault {
        gc = gc.with_fault(f);
    }
    let build = case.build;
    let report = gc.run(&mut store, |g, s| build(g, s, &ids))?;
    Ok(CheckOutcome {
        name: format!("gradient/{}", case.name),
        passed: report.max_rel_error < GRADCHECK_TOLERANCE,
        detail: format!(
            "max rel error {:.2e} over {} entries",
            report.max_rel_error, report.entries_checked
        ),
    })
}

/// Every differentiable op and a small MLP loss against central differences.
pub fn op_gradient_checks(seed: u64, fault: Option<GradFault>) -> Result<Vec<CheckOutcome>> {
    op_cases(seed).into_iter().map(|c| check_case(c, fault)).collect()
}

/// Mixture loss through a small flow, checked over all flow weights.
pub fn flow_loss_gradient_check(
    config: FlowConfig,
    seed: u64,
    batch_stats: bool,
    fault: Option<GradFault>,
) -> Result<CheckOutcome> {
    let mut model = FlowModel::new(config, seed, FinalLayerInit::Random)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let d = model.dim();
    let rows = 12;
    let x = normal_tensor(&mut rng, &[rows, d]);
    let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
    let mut mixture = MixtureParams::standard(3, d)?;
    update_from_batch(&model.forward(&x)?.0, &labels, &mut mixture, VarianceDivisor::Unbiased)?;
    let mode = model.mode();
    let mut gc = GradCheck::new(GRADCHECK_STEP)?;
    if let Some(f) = fault {
        gc = gc.with_fault(f);
    }
    let shell = model.clone();
    let report = gc.run(model.params_mut(), |g, s| {
        let xn = g.constant(x.clone());
        let (w, logdet) = shell.forward_graph(g, s, xn)?;
        let loss = if batch_stats {
            nll_batch_stats(g, w, &labels, &mixture, VarianceDivisor::Unbiased)?
        } else {
            nll(g, w, &labels, &mixture)?
        };
        if mode == crate::flow::FlowMode::Rnvp {
            let m = g.mean(logdet);
            let m = g.scale(m, -1.0 / d as f64);
            g.add(loss, m)
        } else {
            Ok(loss)
        }
    })?;
    Ok(CheckOutcome {
        name: format!(
            "gradient/flow_{:?}_{}",
            mode,
            if batch_stats { "batch_stats" } else { "fixed_stats" }
        )
        .to_lowercase(),
        passed: report.max_rel_error < GRADCHECK_TOLERANCE,
        detail: format!(
            "max rel error {:.2e} over {} entries, worst {}",
            report.max_rel_error,
            report.entries_checked,
            report.worst_param.unwrap_or_default()
        ),
    })
}

/// Central-difference Jacobian of a map `R^d → R^d`.
pub fn numerical_jacobian(
    f: impl Fn(&[f64]) -> Result<Vec<f64>>,
    x: &[f64],
    eps: f64,
) -> Result<DMatrix<f64>> {
    let d = x.len();
    let mut jac = DMatrix::zeros(d, d);
    let mut probe = x.to_vec();
    for j in 0..d {
        probe[j] = x[j] + eps;
        let plus = f(&probe)?;
        probe[j] = x[j] - eps;
        let minus = f(&probe)?;
        probe[j] = x[j];
        if plus.len() != d || minus.len() != d {
            return Err(Error::dim("numerical_jacobian", "map must be square"));
        }
        for i in 0..d {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    Ok(jac)
}

/// `log |det J|` through an LU factorisation.
pub fn log_abs_det(jac: &DMatrix<f64>) -> f64 {
    let lu = jac.clone().lu();
    lu.u().diagonal().iter().map(|v| v.abs().ln()).sum()
}

/// `log |det ∂w/∂x|` of the model at one point, by central differences.
pub fn numerical_logdet(model: &FlowModel, x: &[f64], eps: f64) -> Result<f64> {
    let jac = numerical_jacobian(
        |p| {
            let t = Tensor::matrix(1, p.len(), p.to_vec())?;
            Ok(model.forward(&t)?.0.into_data())
        },
        x,
        eps,
    )?;
    Ok(log_abs_det(&jac))
}

/// `max |inverse(forward(x)) - x|` over the rows of `x`.
pub fn round_trip_error(model: &FlowModel, x: &Tensor) -> Result<f64> {
    let (w, _) = model.forward(x)?;
    let back = model.inverse(&w)?;
    Ok(back.zip_map(x, |a, b| (a - b).abs())?.max_abs())
}

/// Gain on the last subnet layer of [`perturbed_flow`].
pub const PERTURBED_GAIN: f64 = 0.3;

/// A random flow that is neither the identity nor numerically wild: uniform
/// fan-in weights with the last subnet layer scaled by [`PERTURBED_GAIN`].
pub fn perturbed_flow(mut config: FlowConfig, seed: u64) -> Result<FlowModel> {
    config.init = crate::flow::WeightInit::FanInUniform;
    FlowModel::new(config, seed, FinalLayerInit::Scaled(PERTURBED_GAIN))
}

/// Draws `rows × dim` standard normal points.
pub fn random_points(rows: usize, dim: usize, seed: u64) -> Tensor {
    normal_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &[rows, dim])
}
