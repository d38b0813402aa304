use gin_core::checkpoint::Checkpoint;
use gin_core::datagen::{generate, GroundTruthSpec, LabeledDataset};
use gin_core::flow::{FlowConfig, FlowModel};
use gin_core::train::{run_schedule, Control, History, TrainConfig, TrainState, PHASE_CHANGE_EVENT};
use gin_core::verify::numerical_logdet;

fn small_data(n_classes: usize, n_samples: usize, seed: u64) -> LabeledDataset {
    let spec = GroundTruthSpec {
        n_classes,
        dim: 4,
        n_samples,
        mixer_blocks: 2,
        data_seed: seed,
        mixer_seed: seed,
        ..Default::default()
    };
    generate(&spec).unwrap().0
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 500,
        window: 4,
        max_epochs_per_phase: 12,
        seed,
        ..Default::default()
    }
}

fn fresh(data: &LabeledDataset, cfg: &TrainConfig) -> (FlowModel, TrainState) {
    let model = FlowModel::new_identity_init(FlowConfig::gin(data.dim()), cfg.seed).unwrap();
    let state = TrainState::new(&model, data.n_classes, cfg).unwrap();
    (model, state)
}

#[test]
fn trained_gin_is_still_volume_preserving() {
    let data = small_data(3, 3000, 2);
    let cfg = small_config(1);
    let (mut model, mut state) = fresh(&data, &cfg);
    run_schedule(&mut model, &data, &cfg, &mut state, &mut History::default(), |_, _| Ok(Control::Continue)).unwrap();
    let x = data.x.select_rows(&(0..50).collect::<Vec<_>>()).unwrap();
    for scales in model.scale_rows(&x).unwrap() {
        for r in 0..scales.shape()[0] {
            assert!(scales.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }
    for i in 0..10 {
        assert!(numerical_logdet(&model, x.row(i), 1e-6).unwrap().abs() < 1e-3);
    }
}

#[test]
fn history_marks_a_single_phase_change() {
    let data = small_data(3, 2000, 3);
    let cfg = small_config(0);
    let (mut model, mut state) = fresh(&data, &cfg);
    let mut history = History::default();
    let out = run_schedule(&mut model, &data, &cfg, &mut state, &mut history, |_, _| Ok(Control::Continue)).unwrap();
    assert!(out.finished);
    assert_eq!(history.phase_changes(), 1);
    let k = history.records.iter().position(|r| r.event.as_deref() == Some(PHASE_CHANGE_EVENT)).unwrap();
    assert_eq!(history.records[k].phase, 2);
    assert!(history.records[..k].iter().all(|r| r.phase == 1 && r.lr == cfg.lr_initial));
    assert!(history.records[k..].iter().all(|r| r.phase == 2 && r.lr == cfg.lr_initial / 10.0));
    assert_eq!(history.records.len() as u64, out.steps);
}

fn run_to_end(data: &LabeledDataset, cfg: &TrainConfig, stop_at: &[usize]) -> (FlowModel, TrainState, History) {
    let (mut model, mut state) = fresh(data, cfg);
    let mut history = History::default();
    let mut epochs = 0usize;
    loop {
        let out = run_schedule(&mut model, data, cfg, &mut state, &mut history, |_, _| {
            epochs += 1;
            Ok(if stop_at.contains(&epochs) { Control::Stop } else { Control::Continue })
        })
        .unwrap();
        if out.finished {
            return (model, state, history);
        }
        // Resume through a serialized checkpoint, as the CLI does.
        let bytes = Checkpoint::new(model, Some(state)).to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        model = ck.model;
        state = ck.train_state.unwrap();
    }
}

#[test]
fn resuming_from_a_checkpoint_is_deterministic() {
    let data = small_data(3, 2000, 4);
    let cfg = small_config(9);
    let (m1, s1, h1) = run_to_end(&data, &cfg, &[]);
    let phase1_epochs = s1.capped.len();
    assert!(phase1_epochs >= 1);
    let (m2, s2, h2) = run_to_end(&data, &cfg, &[1, 3, 12, 13, 17]);
    assert_eq!(m1.params().to_flat(), m2.params().to_flat());
    assert_eq!(s1, s2);
    let losses = |h: &History| h.records.iter().map(|r| r.batch_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&h1), losses(&h2));
}

#[test]
fn different_seeds_train_differently() {
    let data = small_data(3, 2000, 4);
    let (a, _, _) = run_to_end(&data, &small_config(1), &[]);
    let (b, _, _) = run_to_end(&data, &small_config(2), &[]);
    assert_ne!(a.params().to_flat(), b.params().to_flat());
}

#[test]
fn full_pass_loss_splits_into_quadratic_and_log_sigma_terms() {
    let data = small_data(4, 3000, 5);
    let cfg = small_config(3);
    let (mut model, mut state) = fresh(&data, &cfg);
    let out = run_schedule(&mut model, &data, &cfg, &mut state, &mut History::default(), |_, _| Ok(Control::Continue)).unwrap();
    let full = out.full_pass_loss.unwrap();

    // With statistics from the same pass and an (n-1) divisor, the quadratic
    // term of each class sums to exactly D(n_c - 1)/2.
    let (n, d, m) = (data.len() as f64, data.dim(), data.n_classes);
    let mut counts = vec![0usize; m];
    data.labels.iter().for_each(|&c| counts[c] += 1);
    let log_sigma: f64 = (0..m)
        .map(|c| {
            let per_dim: f64 = (0..d).map(|j| 0.5 * state.mixture.variance(c, j).ln()).sum();
            counts[c] as f64 * per_dim / d as f64
        })
        .sum::<f64>()
        / n;
    let expected = (n - m as f64) / (2.0 * n) + log_sigma;
    assert!((full - expected).abs() < 1e-9, "{full} vs {expected}");
    assert!(full > log_sigma);

    let last_epoch = *state.epoch_losses.last().unwrap();
    assert!((last_epoch - full).abs() <= 0.1 * full.abs(), "{last_epoch} vs {full}");
}

#[test]
fn smoothed_loss_does_not_rise_across_the_phase_change() {
    let data = small_data(3, 3000, 6);
    let cfg = small_config(5);
    let (mut model, mut state) = fresh(&data, &cfg);
    let mut history = History::default();
    run_schedule(&mut model, &data, &cfg, &mut state, &mut history, |_, _| Ok(Control::Continue)).unwrap();
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let span = cfg.window * per_epoch;
    let k = history.records.iter().position(|r| r.phase == 2).unwrap();
    let mean = |r: &[gin_core::train::HistoryRecord]| r.iter().map(|x| x.batch_loss).sum::<f64>() / r.len() as f64;
    let before = mean(&history.records[k - span..k]);
    let after = mean(&history.records[history.records.len() - span..]);
    assert!(after <= before, "{after} > {before}");
}
