//! Fast invariant suite run by `gin selftest`.

use std::time::{Duration, Instant};

use gin_core::checkpoint::Checkpoint;
use gin_core::diff::GradFault;
use gin_core::flow::{build_random_mixer, FinalLayerInit, FlowConfig, FlowModel};
use gin_core::latent::MixtureParams;
use gin_core::verify::{
    flow_loss_gradient_check, numerical_logdet, op_gradient_checks, perturbed_flow, random_points,
    round_trip_error, CheckOutcome,
};
use gin_core::Tensor;

use crate::CliResult;

const GRADIENT_SEEDS: u64 = 3;
const ROUND_TRIP_POINTS: usize = 1000;
const ROUND_TRIP_TOL: f64 = 1e-6;
const LOGDET_POINTS: usize = 20;
// Small enough that a stencil rarely straddles a ReLU kink.
const LOGDET_STEP: f64 = 1e-6;
const VOLUME_TOL: f64 = 1e-3;
const RNVP_LOGDET_TOL: f64 = 1e-4;
const NLL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InjectFault {
    /// Wrong tanh derivative.
    Tanh,
    /// Matmul drops the gradient of its right operand.
    Matmul,
}

impl From<InjectFault> for GradFault {
    fn from(f: InjectFault) -> Self {
        match f {
            InjectFault::Tanh => GradFault::TanhDerivative,
            InjectFault::Matmul => GradFault::MatmulRight,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
    pub elapsed: Duration,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn small_flow(mut config: FlowConfig) -> FlowConfig {
    config.n_blocks = 2;
    config.hidden = vec![6];
    config
}

fn gradient_checks(fault: Option<GradFault>, out: &mut Vec<CheckOutcome>) -> CliResult<()> {
    for seed in 0..GRADIENT_SEEDS {
        for mut c in op_gradient_checks(seed, fault)? {
            c.name = format!("{} (seed {seed})", c.name);
            out.push(c);
        }
    }
    for config in [FlowConfig::gin(4), FlowConfig::rnvp(4)] {
        for batch_stats in [false, true] {
            out.push(flow_loss_gradient_check(small_flow(config.clone()), 11, batch_stats, fault)?);
        }
    }
    Ok(())
}

fn bijectivity(out: &mut Vec<CheckOutcome>) -> CliResult<()> {
    let gin = perturbed_flow(FlowConfig::gin(10), 3)?;
    let mixer = build_random_mixer(10, 8, 3)?;
    let x = random_points(ROUND_TRIP_POINTS, 10, 4);
    for (name, model) in [("bijectivity/gin", &gin), ("bijectivity/rnvp_mixer", &mixer)] {
        let err = round_trip_error(model, &x)?;
        out.push(outcome(
            name,
            err < ROUND_TRIP_TOL,
            format!("max round-trip error {err:.2e} over {ROUND_TRIP_POINTS} points"),
        ));
    }
    Ok(())
}

fn volume(out: &mut Vec<CheckOutcome>) -> CliResult<()> {
    let gin = perturbed_flow(FlowConfig::gin(10), 5)?;
    let x = random_points(LOGDET_POINTS, 10, 6);
    let mut worst: f64 = 0.0;
    for i in 0..LOGDET_POINTS {
        worst = worst.max(numerical_logdet(&gin, x.row(i), LOGDET_STEP)?.abs());
    }
    out.push(outcome(
        "volume/gin_logdet",
        worst < VOLUME_TOL,
        format!("max |log det J| {worst:.2e} at {LOGDET_POINTS} points"),
    ));

    let mut worst_sum: f64 = 0.0;
    for scales in gin.scale_rows(&x)? {
        let (rows, _) = scales.dims2()?;
        for r in 0..rows {
            worst_sum = worst_sum.max(scales.row(r).iter().sum::<f64>().abs());
        }
    }
    out.push(outcome(
        "volume/gin_scale_sum",
        worst_sum < 1e-12,
        format!("max |row sum of scales| {worst_sum:.2e}"),
    ));

    let rnvp = perturbed_flow(FlowConfig::rnvp(10), 7)?;
    let (_, logdet) = rnvp.forward(&x)?;
    let mut worst_rnvp: f64 = 0.0;
    for (i, ld) in logdet.iter().enumerate() {
        let numeric = numerical_logdet(&rnvp, x.row(i), LOGDET_STEP)?;
        worst_rnvp = worst_rnvp.max((numeric - ld).abs());
    }
    out.push(outcome(
        "volume/rnvp_logdet",
        worst_rnvp < RNVP_LOGDET_TOL,
        format!("max |analytic - numerical log det| {worst_rnvp:.2e}"),
    ));
    Ok(())
}

/// Per-sample, per-dimension loop, written independently of the library loss.
pub fn naive_nll(w: &Tensor, labels: &[usize], means: &Tensor, variances: &Tensor) -> f64 {
    let (n, d) = (w.shape()[0], w.shape()[1]);
    let mut total = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let mut per_sample = 0.0;
        for j in 0..d {
            let mu = means.data()[c * d + j];
            let var = variances.data()[c * d + j];
            let diff = w.data()[i * d + j] - mu;
            per_sample += diff * diff / (2.0 * var) + 0.5 * var.ln();
        }
        total += per_sample / d as f64;
    }
    total / n as f64
}

fn loss_oracle(out: &mut Vec<CheckOutcome>) -> CliResult<()> {
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let (n, d, m) = (64, 6, 4);
        let w = random_points(n, d, 100 + seed).map(|v| 3.0 * v);
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % m).collect();
        let means = random_points(m, d, 200 + seed);
        let variances = random_points(m, d, 300 + seed).map(|v| (0.5 * v).exp());
        let mixture = MixtureParams::new(means.clone(), variances.clone())?;
        let fast = mixture.nll_value(&w, &labels)?;
        worst = worst.max((fast - naive_nll(&w, &labels, &means, &variances)).abs());
    }
    out.push(outcome(
        "loss/nll_oracle",
        worst < NLL_TOL,
        format!("max |nll - naive| {worst:.2e}"),
    ));
    Ok(())
}

fn checkpoint_round_trip(out: &mut Vec<CheckOutcome>) -> CliResult<()> {
    let model = FlowModel::new(FlowConfig::gin(6), 8, FinalLayerInit::Random)?;
    let bytes = Checkpoint::new(model, None).to_bytes()?;
    let again = Checkpoint::from_bytes(&bytes)?.to_bytes()?;
    out.push(outcome(
        "io/checkpoint_round_trip",
        again == bytes,
        format!("{} bytes", bytes.len()),
    ));
    Ok(())
}

/// Runs every check. `fault` corrupts one backward rule to prove the checks bite.
pub fn selftest(fault: Option<InjectFault>) -> CliResult<SelftestReport> {
    let start = Instant::now();
    let mut checks = Vec::new();
    gradient_checks(fault.map(GradFault::from), &mut checks)?;
    bijectivity(&mut checks)?;
    volume(&mut checks)?;
    loss_oracle(&mut checks)?;
    checkpoint_round_trip(&mut checks)?;
    Ok(SelftestReport {
        checks,
        elapsed: start.elapsed(),
    })
}
