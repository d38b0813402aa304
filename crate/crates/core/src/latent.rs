//! Class-conditional factorial Gaussian over the flow output.
//!
//! Each class `u` owns a mean and a diagonal variance per latent dimension.
//! The training loss is the Gaussian negative log-likelihood of `w = g⁻¹(x)`
//! averaged over the batch and divided by the latent dimension; there is no
//! Jacobian term because the flow is volume preserving.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Divisor used for per-class batch variances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceDivisor {
    /// `n - 1`
    #[default]
    Unbiased,
    /// `n`, the maximum-likelihood estimate.
    Biased,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureParams {
    means: Tensor,
    variances: Tensor,
}

impl MixtureParams {
    /// Zero means and unit variances.
    pub fn standard(n_classes: usize, dim: usize) -> Result<Self> {
        if n_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("mixture needs at least one class and dim".into()));
        }
        Ok(Self {
            means: Tensor::zeros(&[n_classes, dim]),
            variances: Tensor::ones(&[n_classes, dim]),
        })
    }

    pub fn new(means: Tensor, variances: Tensor) -> Result<Self> {
        means.dims2()?;
        if means.shape() != variances.shape() {
            return Err(Error::dim(
                "mixture",
                format!("means {:?} vs variances {:?}", means.shape(), variances.shape()),
            ));
        }
        let p = Self { means, variances };
        p.check_floor()?;
        Ok(p)
    }

    pub fn n_classes(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    pub fn means(&self) -> &Tensor {
        &self.means
    }

    pub fn variances(&self) -> &Tensor {
        &self.variances
    }

    pub fn mean(&self, class: usize, dim: usize) -> f64 {
        self.means.get2(class, dim)
    }

    pub fn variance(&self, class: usize, dim: usize) -> f64 {
        self.variances.get2(class, dim)
    }

    fn check_floor(&self) -> Result<()> {
        let d = self.dim();
        for (k, &v) in self.variances.data().iter().enumerate() {
            if !(v >= VARIANCE_FLOOR) {
                return Err(Error::VarianceBelowFloor {
                    class: k / d,
                    dim: k % d,
                    value: v,
                    floor: VARIANCE_FLOOR,
                });
            }
        }
        Ok(())
    }

    fn check_batch(&self, w: &Tensor, labels: &[usize]) -> Result<usize> {
        let (rows, cols) = w.dims2()?;
        if cols != self.dim() {
            return Err(Error::dim("nll", format!("latent width {cols} vs mixture dim {}", self.dim())));
        }
        if rows != labels.len() {
            return Err(Error::dim("nll", format!("{rows} rows vs {} labels", labels.len())));
        }
        check_labels(labels, self.n_classes())?;
        Ok(rows)
    }

    /// Loss value without building a graph.
    pub fn nll_value(&self, w: &Tensor, labels: &[usize]) -> Result<f64> {
        let rows = self.check_batch(w, labels)?;
        self.check_floor()?;
        let d = self.dim();
        let mut total = 0.0;
        for (i, &u) in labels.iter().enumerate() {
            let mu = self.means.row(u);
            let var = self.variances.row(u);
            let mut per_sample = 0.0;
            for j in 0..d {
                let diff = w.data()[i * d + j] - mu[j];
                per_sample += diff * diff / (2.0 * var[j]) + 0.5 * var[j].ln();
            }
            total += per_sample;
        }
        Ok(total / (rows * d) as f64)
    }
}

pub(crate) fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    match labels.iter().find(|&&u| u >= n_classes) {
        Some(&label) => Err(Error::UnknownLabel { label, n_classes }),
        None => Ok(()),
    }
}

/// Records the loss with the mixture parameters held constant.
pub fn nll(g: &mut Graph, w: NodeId, labels: &[usize], params: &MixtureParams) -> Result<NodeId> {
    let rows = params.check_batch(g.value(w), labels)?;
    params.check_floor()?;
    let d = params.dim();
    let mu = params.means.select_rows(labels)?;
    let var = params.variances.select_rows(labels)?;
    let log_sigma: f64 = var.data().iter().map(|v| 0.5 * v.ln()).sum();
    let inv_two_var = var.map(|v| 0.5 / v);

    let mu = g.constant(mu);
    let inv = g.constant(inv_two_var);
    let diff = g.sub(w, mu)?;
    let sq = g.mul(diff, diff)?;
    let q = g.mul(sq, inv)?;
    let quad = g.sum(q);
    let ls = g.constant(Tensor::scalar(log_sigma));
    let total = g.add(quad, ls)?;
    Ok(g.scale(total, 1.0 / (rows * d) as f64))
}

/// Records the loss with means and variances recomputed from the batch inside
/// the graph, so gradients also flow through the batch statistics.
///
/// Classes with fewer than two rows fall back to the values in `prior`.
pub fn nll_batch_stats(
    g: &mut Graph,
    w: NodeId,
    labels: &[usize],
    prior: &MixtureParams,
    divisor: VarianceDivisor,
) -> Result<NodeId> {
    let rows = prior.check_batch(g.value(w), labels)?;
    let (m, d) = (prior.n_classes(), prior.dim());
    let counts = class_counts(labels, m);

    let mut inv_n = Tensor::zeros(&[m, d]);
    let mut inv_div = Tensor::zeros(&[m, d]);
    let mut fallback_mu = Tensor::zeros(&[m, d]);
    let mut fallback_var = Tensor::zeros(&[m, d]);
    for c in 0..m {
        let n = counts[c];
        for j in 0..d {
            let k = c * d + j;
            if n >= 2 {
                inv_n.data_mut()[k] = 1.0 / n as f64;
                inv_div.data_mut()[k] = 1.0 / divisor_for(n, divisor);
            } else {
                fallback_mu.data_mut()[k] = prior.mean(c, j);
                fallback_var.data_mut()[k] = prior.variance(c, j);
            }
        }
    }
    let seg: Rc<[usize]> = Rc::from(labels);

    let sums = g.segment_sum(w, seg.clone(), m)?;
    let inv_n = g.constant(inv_n);
    let scaled = g.mul(sums, inv_n)?;
    let fb_mu = g.constant(fallback_mu);
    let mu_class = g.add(scaled, fb_mu)?;
    let mu_rows = g.gather_rows(mu_class, seg.clone())?;

    let diff = g.sub(w, mu_rows)?;
    let sq = g.mul(diff, diff)?;
    let sq_sums = g.segment_sum(sq, seg.clone(), m)?;
    let inv_div = g.constant(inv_div);
    let var_scaled = g.mul(sq_sums, inv_div)?;
    let fb_var = g.constant(fallback_var);
    let var_raw = g.add(var_scaled, fb_var)?;
    let var_class = g.clamp_min(var_raw, VARIANCE_FLOOR);
    let var_rows = g.gather_rows(var_class, seg)?;

    let two_var = g.scale(var_rows, 2.0);
    let inv = g.recip(two_var);
    let q = g.mul(sq, inv)?;
    let quad = g.sum(q);
    let lv = g.log(var_rows);
    let half = g.scale(lv, 0.5);
    let log_sigma = g.sum(half);
    let total = g.add(quad, log_sigma)?;
    Ok(g.scale(total, 1.0 / (rows * d) as f64))
}

fn class_counts(labels: &[usize], n_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; n_classes];
    for &u in labels {
        counts[u] += 1;
    }
    counts
}

fn divisor_for(n: usize, divisor: VarianceDivisor) -> f64 {
    match divisor {
        VarianceDivisor::Unbiased => (n - 1) as f64,
        VarianceDivisor::Biased => n as f64,
    }
}

/// Which classes a batch update touched.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UpdateStats {
    pub updated: usize,
    /// Classes present with a single row; their parameters were left alone.
    pub skipped: usize,
}

/// Replaces each class's mean and variance with the statistics of its rows in
/// the batch. Classes with fewer than two rows keep their previous values.
pub fn update_from_batch(
    w: &Tensor,
    labels: &[usize],
    params: &mut MixtureParams,
    divisor: VarianceDivisor,
) -> Result<UpdateStats> {
    params.check_batch(w, labels)?;
    let (m, d) = (params.n_classes(), params.dim());
    let counts = class_counts(labels, m);
    let mut sums = vec![0.0; m * d];
    for (i, &u) in labels.iter().enumerate() {
        for (s, x) in sums[u * d..(u + 1) * d].iter_mut().zip(w.row(i)) {
            *s += x;
        }
    }
    let mut means = sums;
    for c in 0..m {
        if counts[c] >= 2 {
            for s in &mut means[c * d..(c + 1) * d] {
                *s /= counts[c] as f64;
            }
        }
    }
    let mut sq = vec![0.0; m * d];
    for (i, &u) in labels.iter().enumerate() {
        for j in 0..d {
            let diff = w.data()[i * d + j] - means[u * d + j];
            sq[u * d + j] += diff * diff;
        }
    }

    let mut stats = UpdateStats::default();
    for c in 0..m {
        match counts[c] {
            0 => {}
            1 => stats.skipped += 1,
            n => {
                stats.updated += 1;
                let div = divisor_for(n, divisor);
                for j in 0..d {
                    let k = c * d + j;
                    params.means.data_mut()[k] = means[k];
                    params.variances.data_mut()[k] = (sq[k] / div).max(VARIANCE_FLOOR);
                }
            }
        }
    }
    Ok(stats)
}

/// Draws `count` latents from class `label` with standard deviation scaled by `temperature`.
pub fn sample_latent<R: Rng>(
    params: &MixtureParams,
    label: usize,
    count: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Tensor> {
    check_labels(&[label], params.n_classes())?;
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {temperature}")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be positive".into()));
    }
    let d = params.dim();
    let mu = params.means.row(label);
    let var = params.variances.row(label);
    let mut out = Vec::with_capacity(count * d);
    for _ in 0..count {
        for j in 0..d {
            let e: f64 = rng.sample(StandardNormal);
            out.push(mu[j] + temperature * var[j].sqrt() * e);
        }
    }
    Tensor::matrix(count, d, out)
}
