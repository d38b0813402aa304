//! Maximum-likelihood training: Adam on the flow weights, per-batch mixture
//! statistics and a two-phase learning-rate schedule.

use std::io::{Read, Write};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{augment, LabeledDataset};
use crate::diff::{Graph, ParamStore};
use crate::error::{Error, Result};
use crate::flow::{FlowMode, FlowModel};
use crate::latent::{nll, nll_batch_stats, update_from_batch, MixtureParams, VarianceDivisor};
use crate::tensor::Tensor;

pub const PHASE_CHANGE_EVENT: &str = "phase_change";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_initial: f64,
    /// Phase two runs at `lr_initial / lr_decay_factor`.
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Convergence window in epochs.
    pub window: usize,
    /// Relative improvement between consecutive windows below which a phase ends.
    pub tolerance: f64,
    pub max_epochs_per_phase: usize,
    pub augment_sigma: f64,
    /// Seeds weight init, shuffling and augmentation.
    pub seed: u64,
    /// Treat the per-batch mixture statistics as constants in the gradient.
    pub stop_gradient: bool,
    pub variance_divisor: VarianceDivisor,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 1e-2,
            lr_decay_factor: 10.0,
            batch_size: 1000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            window: 20,
            tolerance: 1e-3,
            max_epochs_per_phase: 500,
            augment_sigma: 0.01,
            seed: 0,
            stop_gradient: true,
            variance_divisor: VarianceDivisor::Unbiased,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_initial > 0.0 && self.lr_initial.is_finite()) {
            return bad(format!("lr_initial must be positive, got {}", self.lr_initial));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return bad(format!("lr_decay_factor must be >= 1, got {}", self.lr_decay_factor));
        }
        if self.batch_size < 2 * n_classes {
            return bad(format!(
                "batch_size {} is below 2 x {n_classes} classes",
                self.batch_size
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return bad("adam eps must be positive".into());
        }
        if self.window == 0 || self.max_epochs_per_phase == 0 {
            return bad("window and max_epochs_per_phase must be positive".into());
        }
        if !(self.tolerance >= 0.0) || !(self.augment_sigma >= 0.0) {
            return bad("tolerance and augment_sigma must be non-negative".into());
        }
        Ok(())
    }

    pub fn lr_for_phase(&self, phase: u8) -> f64 {
        if phase <= 1 {
            self.lr_initial
        } else {
            self.lr_initial / self.lr_decay_factor
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates taken so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

/// One bias-corrected Adam update. Missing gradients count as zero.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.num_scalars() || state.v.len() != state.m.len() {
        return Err(Error::dim(
            "adam_step",
            format!("{} moment slots for {} parameters", state.m.len(), params.num_scalars()),
        ));
    }
    let step = state.t + 1;
    for g in grads.iter().flatten() {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { step });
        }
    }
    state.t = step;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(step.min(i32::MAX as u64) as i32);
    let c2 = 1.0 - b2.powi(step.min(i32::MAX as u64) as i32);
    let mut offset = 0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let p = params.get_mut(id);
        let n = p.numel();
        let grad = grads.get(id.0).and_then(Option::as_ref);
        if let Some(g) = grad {
            if g.shape() != p.shape() {
                return Err(Error::dim(
                    "adam_step",
                    format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                ));
            }
        }
        let m = &mut state.m[offset..offset + n];
        let v = &mut state.v[offset..offset + n];
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = grad.map_or(0.0, |g| g.data()[k]);
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= lr * mhat / (vhat.sqrt() + state.eps);
        }
        offset += n;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken over the whole run.
    pub step: u64,
    /// 1 or 2.
    pub phase: u8,
    /// Completed epochs in the current phase.
    pub epoch_in_phase: usize,
    /// Mean batch loss of each completed epoch in the current phase.
    pub epoch_losses: Vec<f64>,
    /// Whether each finished phase stopped on the epoch cap instead of converging.
    pub capped: Vec<bool>,
    pub finished: bool,
    pub adam: AdamState,
    pub mixture: MixtureParams,
}

impl TrainState {
    pub fn new(model: &FlowModel, n_classes: usize, config: &TrainConfig) -> Result<Self> {
        Ok(Self {
            step: 0,
            phase: 1,
            epoch_in_phase: 0,
            epoch_losses: Vec::new(),
            capped: Vec::new(),
            finished: false,
            adam: AdamState::new(model.num_params(), config.beta1, config.beta2, config.eps),
            mixture: MixtureParams::standard(n_classes, model.dim())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub phase: u8,
    pub lr: f64,
    pub batch_loss: f64,
    pub wall_ms: u64,
    pub event: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub records: Vec<HistoryRecord>,
}

impl History {
    pub fn phase_changes(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.event.as_deref() == Some(PHASE_CHANGE_EVENT))
            .count()
    }

    pub fn write_csv<W: Write>(&self, out: W, with_header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(with_header).from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::InvalidArgument(format!("history write: {e}")))?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let records = r.deserialize().collect::<std::result::Result<Vec<_>, _>>().map_err(csv_err)?;
        Ok(Self { records })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Corrupt(format!("history csv: {e}"))
}

/// Deterministic per-epoch generator so a run resumed at an epoch boundary
/// replays the same shuffles and noise.
pub fn epoch_rng(seed: u64, phase: u8, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + ((phase as u64) << 32 | epoch as u64));
    rng
}

/// One pass over the data in shuffled batches. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut FlowModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    state: &mut TrainState,
    lr: f64,
    history: &mut History,
    clock: &Instant,
) -> Result<f64> {
    if data.dim() != model.dim() {
        return Err(Error::dim("train", format!("data dim {} vs model dim {}", data.dim(), model.dim())));
    }
    if data.n_classes != state.mixture.n_classes() {
        return Err(Error::dim("train", "dataset classes differ from mixture classes"));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut rng = epoch_rng(config.seed, state.phase, state.epoch_in_phase);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let d = model.dim() as f64;
    let mut total = 0.0;
    let mut n_batches = 0usize;
    for idx in order.chunks(config.batch_size) {
        let xb = augment(&data.x.select_rows(idx)?, config.augment_sigma, &mut rng)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut g = Graph::new();
        let xn = g.constant(xb);
        let (w, logdet) = model.forward_graph(&mut g, model.params(), xn)?;
        let mut loss = if config.stop_gradient {
            update_from_batch(g.value(w), &labels, &mut state.mixture, config.variance_divisor)?;
            nll(&mut g, w, &labels, &state.mixture)?
        } else {
            let loss = nll_batch_stats(&mut g, w, &labels, &state.mixture, config.variance_divisor)?;
            update_from_batch(g.value(w), &labels, &mut state.mixture, config.variance_divisor)?;
            loss
        };
        if model.mode() == FlowMode::Rnvp {
            let mean_ld = g.mean(logdet);
            let scaled = g.scale(mean_ld, -1.0 / d);
            loss = g.add(loss, scaled)?;
        }
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("batch loss at step {}", state.step + 1)));
        }
        g.backward(loss)?;
        let grads = g.take_param_grads();
        adam_step(model.params_mut(), &grads, &mut state.adam, lr)?;
        state.step += 1;
        let event = (state.phase == 2 && state.epoch_in_phase == 0 && n_batches == 0)
            .then(|| PHASE_CHANGE_EVENT.to_string());
        history.records.push(HistoryRecord {
            step: state.step,
            phase: state.phase,
            lr,
            batch_loss: value,
            wall_ms: clock.elapsed().as_millis() as u64,
            event,
        });
        total += value;
        n_batches += 1;
    }
    Ok(total / n_batches as f64)
}

/// True once the mean loss of the last `window` epochs improved on the
/// window before it by less than `tolerance`, relative to `max(|prev|, 1)`.
pub fn has_converged(epoch_losses: &[f64], window: usize, tolerance: f64) -> bool {
    let n = epoch_losses.len();
    if window == 0 || n < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&epoch_losses[n - 2 * window..n - window]);
    let cur = mean(&epoch_losses[n - window..]);
    (prev - cur) / prev.abs().max(1.0) < tolerance
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub finished: bool,
    /// Per finished phase, whether it hit the epoch cap.
    pub capped: Vec<bool>,
    pub steps: u64,
    /// Loss on the clean data with mixture statistics from the same full pass.
    pub full_pass_loss: Option<f64>,
}

/// Runs both phases to convergence, starting from `state`.
///
/// `on_epoch` sees the model and state after every epoch and can stop the run
/// early; stopping leaves `state` resumable.
pub fn run_schedule(
    model: &mut FlowModel,
    data: &LabeledDataset,
    config: &TrainConfig,
    state: &mut TrainState,
    history: &mut History,
    mut on_epoch: impl FnMut(&FlowModel, &TrainState) -> Result<Control>,
) -> Result<TrainOutcome> {
    config.validate(data.n_classes)?;
    if state.adam.m.len() != model.num_params() {
        return Err(Error::dim("run_schedule", "optimizer state does not match the model"));
    }
    let clock = Instant::now();
    while !state.finished {
        let lr = config.lr_for_phase(state.phase);
        let loss = train_epoch(model, data, config, state, lr, history, &clock)?;
        state.epoch_losses.push(loss);
        state.epoch_in_phase += 1;
        let converged = has_converged(&state.epoch_losses, config.window, config.tolerance);
        if converged || state.epoch_in_phase >= config.max_epochs_per_phase {
            state.capped.push(!converged);
            if state.phase >= 2 {
                state.finished = true;
            } else {
                state.phase += 1;
                state.epoch_in_phase = 0;
                state.epoch_losses.clear();
            }
        }
        if on_epoch(model, state)? == Control::Stop && !state.finished {
            return Ok(TrainOutcome {
                finished: false,
                capped: state.capped.clone(),
                steps: state.step,
                full_pass_loss: None,
            });
        }
    }
    let full_pass_loss = Some(refresh_mixture(model, data, state, config.variance_divisor)?);
    Ok(TrainOutcome {
        finished: true,
        capped: state.capped.clone(),
        steps: state.step,
        full_pass_loss,
    })
}

/// Recomputes the mixture statistics from one pass over the clean data and
/// returns the loss under them.
pub fn refresh_mixture(
    model: &FlowModel,
    data: &LabeledDataset,
    state: &mut TrainState,
    divisor: VarianceDivisor,
) -> Result<f64> {
    let (w, _) = model.forward(&data.x)?;
    update_from_batch(&w, &data.labels, &mut state.mixture, divisor)?;
    state.mixture.nll_value(&w, &data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, GroundTruthSpec};
    use crate::flow::FlowConfig;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::vector(values.to_vec()).unwrap());
        s
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_the_sign() {
        let mut store = store_with(&[1.0, -2.0, 0.5]);
        let grads = vec![Some(Tensor::vector(vec![3.0, -0.2, 1e-3]).unwrap())];
        let mut adam = AdamState::new(3, 0.9, 0.999, 1e-8);
        adam_step(&mut store, &grads, &mut adam, 0.01).unwrap();
        let p = store.get(crate::diff::ParamId(0)).data();
        for (after, (before, g)) in p.iter().zip([(1.0, 3.0), (-2.0, -0.2), (0.5, 1e-3)]) {
            let expected = before - 0.01 * f64::signum(g);
            assert!((after - expected).abs() < 1e-7, "{after} vs {expected}");
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = store_with(&[1.0, 2.0]);
        let mut adam = AdamState::new(2, 0.9, 0.999, 1e-8);
        adam_step(&mut store, &[Some(Tensor::zeros(&[2]))], &mut adam, 0.1).unwrap();
        adam_step(&mut store, &[None], &mut adam, 0.1).unwrap();
        assert_eq!(store.get(crate::diff::ParamId(0)).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut store = store_with(&[1.0]);
        let mut adam = AdamState::new(1, 0.9, 0.999, 1e-8);
        adam_step(&mut store, &[Some(Tensor::vector(vec![1.0]).unwrap())], &mut adam, 0.1).unwrap();
        let err = adam_step(&mut store, &[Some(Tensor::vector(vec![f64::NAN]).unwrap())], &mut adam, 0.1);
        assert!(matches!(err, Err(Error::NonFiniteGradient { step: 2 })));
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn convergence_rule() {
        assert!(!has_converged(&[1.0; 39], 20, 1e-3));
        assert!(has_converged(&[1.0; 40], 20, 1e-3));
        let falling: Vec<f64> = (0..40).map(|i| 10.0 - i as f64 * 0.1).collect();
        assert!(!has_converged(&falling, 20, 1e-3));
        // Rising loss is not an improvement either.
        let rising: Vec<f64> = (0..40).map(|i| i as f64).collect();
        assert!(has_converged(&rising, 20, 1e-3));
    }

    #[test]
    fn config_validation() {
        let c = TrainConfig::default();
        assert!(c.validate(5).is_ok());
        assert!(TrainConfig { batch_size: 9, ..c.clone() }.validate(5).is_err());
        assert!(TrainConfig { lr_initial: 0.0, ..c.clone() }.validate(5).is_err());
        assert!(TrainConfig { beta2: 1.0, ..c.clone() }.validate(5).is_err());
        assert_eq!(c.lr_for_phase(2), 1e-3);
    }

    fn tiny() -> (LabeledDataset, FlowModel, TrainConfig) {
        let spec = GroundTruthSpec {
            n_samples: 400,
            dim: 4,
            n_classes: 3,
            ..GroundTruthSpec::default()
        };
        let (ds, _) = generate(&spec).unwrap();
        let cfg = TrainConfig {
            batch_size: 100,
            window: 2,
            max_epochs_per_phase: 3,
            ..TrainConfig::default()
        };
        let model = FlowModel::new_identity_init(
            FlowConfig {
                n_blocks: 2,
                ..FlowConfig::gin(4)
            },
            cfg.seed,
        )
        .unwrap();
        (ds, model, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (ds, mut model, cfg) = tiny();
        let before = model.params().to_flat();
        let mut state = TrainState::new(&model, ds.n_classes, &cfg).unwrap();
        let mut h = History::default();
        train_epoch(&mut model, &ds, &cfg, &mut state, 0.0, &mut h, &Instant::now()).unwrap();
        assert_eq!(model.params().to_flat(), before);
        assert_eq!(h.records.len(), 4);
    }

    #[test]
    fn schedule_records_one_phase_change_and_history_round_trips() {
        let (ds, mut model, cfg) = tiny();
        let mut state = TrainState::new(&model, ds.n_classes, &cfg).unwrap();
        let mut h = History::default();
        let out = run_schedule(&mut model, &ds, &cfg, &mut state, &mut h, |_, _| Ok(Control::Continue)).unwrap();
        assert!(out.finished);
        assert_eq!(out.capped.len(), 2);
        assert_eq!(h.phase_changes(), 1);
        let first_p2 = h.records.iter().position(|r| r.phase == 2).unwrap();
        assert_eq!(h.records[first_p2].event.as_deref(), Some(PHASE_CHANGE_EVENT));
        assert_eq!(h.records[first_p2].lr, cfg.lr_initial / 10.0);

        let mut buf = Vec::new();
        h.write_csv(&mut buf, true).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("step,phase,lr,batch_loss,wall_ms,event"));
        assert_eq!(History::read_csv(&buf[..]).unwrap(), h);
    }

    #[test]
    fn same_seed_same_weights() {
        let run = || {
            let (ds, mut model, cfg) = tiny();
            let mut state = TrainState::new(&model, ds.n_classes, &cfg).unwrap();
            run_schedule(&mut model, &ds, &cfg, &mut state, &mut History::default(), |_, _| {
                Ok(Control::Continue)
            })
            .unwrap();
            model.params().to_flat()
        };
        assert_eq!(run(), run());
    }
}
