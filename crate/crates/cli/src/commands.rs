use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use gin_core::analysis::{analyze as analyze_model, emit_report, AnalysisReport, Thresholds};
use gin_core::checkpoint::Checkpoint;
use gin_core::datagen::{generate, LabeledDataset};
use gin_core::flow::FlowModel;
use gin_core::train::{run_schedule, Control, History, TrainOutcome, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Expectation};
use crate::{CliError, CliResult};

pub const DATASET_FILE: &str = "dataset.bin";
pub const MIXER_FILE: &str = "mixer.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SUMMARY_VERSION: u32 = 1;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn provenance_summary(data: &LabeledDataset) -> String {
    let mut s = format!(
        "{} records, D={}, {} classes",
        data.len(),
        data.dim(),
        data.n_classes
    );
    if let Some(p) = &data.provenance {
        s.push_str(&format!(
            ", {} informative dims, data seed {}, mixer seed {}",
            p.spec.n_informative, p.spec.data_seed, p.mixer_seed_used
        ));
        if !p.rejected_mixer_seeds.is_empty() {
            s.push_str(&format!(" (rejected {:?})", p.rejected_mixer_seeds));
        }
        for (c, (m, v)) in p.clusters.means.iter().zip(&p.clusters.variances).enumerate() {
            let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
            s.push_str(&format!("\n  class {c}: mean [{}] var [{}]", fmt(m), fmt(v)));
        }
    }
    s
}

/// Generates the dataset and writes it, with the mixer, into `out_dir`.
pub fn gen_data(config: &ExperimentConfig, out_dir: &Path) -> CliResult<(LabeledDataset, FlowModel)> {
    config.validate()?;
    create_dir(out_dir)?;
    let (data, mixer) = generate(&config.data)?;
    data.save(&out_dir.join(DATASET_FILE))?;
    Checkpoint::new(mixer.clone(), None).save(&out_dir.join(MIXER_FILE))?;
    Ok((data, mixer))
}

pub struct TrainRequest<'a> {
    pub config: &'a ExperimentConfig,
    pub dataset: &'a Path,
    pub out_dir: &'a Path,
    pub seed: u64,
    pub resume: Option<&'a Path>,
    /// Stop after this many epochs in this invocation, leaving a resumable checkpoint.
    pub max_epochs: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub outcome: TrainOutcome,
    pub model: FlowModel,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub phase_changes: usize,
    pub last_epoch_loss: Option<f64>,
}

pub fn train(req: &TrainRequest<'_>) -> CliResult<TrainResult> {
    let data = LabeledDataset::load(req.dataset)?;
    let resume = req.resume.map(Checkpoint::load).transpose()?;
    train_on(req.config, &data, req.seed, resume, req.out_dir, req.max_epochs)
}

fn train_on(
    config: &ExperimentConfig,
    data: &LabeledDataset,
    seed: u64,
    resume: Option<Checkpoint>,
    out_dir: &Path,
    max_epochs: Option<usize>,
) -> CliResult<TrainResult> {
    config.validate()?;
    let train_cfg = config.train_for_seed(seed);
    train_cfg
        .validate(data.n_classes)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    create_dir(out_dir)?;
    let resuming = resume.is_some();
    let (mut model, mut state) = match resume {
        Some(ck) => {
            let state = ck.train_state.ok_or_else(|| {
                CliError::Usage("checkpoint has no training state to resume from".into())
            })?;
            if ck.model.dim() != data.dim() || state.mixture.n_classes() != data.n_classes {
                return Err(CliError::Usage(format!(
                    "checkpoint (D={}, {} classes) does not match the dataset (D={}, {} classes)",
                    ck.model.dim(),
                    state.mixture.n_classes(),
                    data.dim(),
                    data.n_classes
                )));
            }
            (ck.model, state)
        }
        None => {
            let model = FlowModel::new(
                config.model.flow_config(data.dim()),
                seed,
                config.model.final_init(),
            )?;
            let state = TrainState::new(&model, data.n_classes, &train_cfg)?;
            (model, state)
        }
    };

    let checkpoint = out_dir.join(CHECKPOINT_FILE);
    let every = train_cfg.checkpoint_every;
    let mut epochs = 0usize;
    let mut history = History::default();
    let outcome = run_schedule(&mut model, data, &train_cfg, &mut state, &mut history, |m, s| {
        epochs += 1;
        if every > 0 && epochs % every == 0 {
            Checkpoint::new(m.clone(), Some(s.clone())).save(&checkpoint)?;
        }
        Ok(match max_epochs {
            Some(limit) if epochs >= limit => Control::Stop,
            _ => Control::Continue,
        })
    })?;
    let last_epoch_loss = state.epoch_losses.last().copied();
    Checkpoint::new(model.clone(), Some(state)).save(&checkpoint)?;

    let history_path = out_dir.join(HISTORY_FILE);
    let append = resuming && history_path.exists();
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&history_path)
        .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", history_path.display())))?;
    history.write_csv(file, !append)?;

    Ok(TrainResult {
        outcome,
        model,
        checkpoint,
        history: history_path,
        phase_changes: history.phase_changes(),
        last_epoch_loss,
    })
}

/// Analyzes a checkpoint against a dataset and writes the report bundle.
pub fn analyze(
    thresholds: &Thresholds,
    checkpoint: &Path,
    dataset: &Path,
    out_dir: &Path,
) -> CliResult<AnalysisReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let data = LabeledDataset::load(dataset)?;
    analyze_loaded(thresholds, &ck.model, &data, out_dir)
}

fn analyze_loaded(
    thresholds: &Thresholds,
    model: &FlowModel,
    data: &LabeledDataset,
    out_dir: &Path,
) -> CliResult<AnalysisReport> {
    if model.dim() != data.dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects D={} but the dataset has D={}",
            model.dim(),
            data.dim()
        )));
    }
    let analysis = analyze_model(model, data, thresholds)?;
    emit_report(&analysis.report, &analysis.w, &data.labels, out_dir)?;
    Ok(analysis.report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub train_seed: u64,
    pub dir: String,
    pub finished: bool,
    pub capped: Vec<bool>,
    pub steps: u64,
    pub full_pass_loss: Option<f64>,
    pub informative_count: usize,
    pub gap_ratio: Option<f64>,
    pub min_abs_r: Option<f64>,
    pub min_dominance: Option<f64>,
    pub max_quadratic_mass: Option<f64>,
    pub recovered: bool,
    /// Informative count off, or a matched correlation below threshold.
    pub degraded: bool,
    pub structure_ok: Option<bool>,
    pub meets_expectation: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub version: u32,
    pub name: String,
    pub expectation: Expectation,
    pub n_classes: usize,
    pub n_samples: usize,
    pub dim: usize,
    pub mixer_seed_used: Option<u64>,
    pub l_matrix_rank: Option<usize>,
    pub l_matrix_full_rank: Option<bool>,
    pub enough_conditions: Option<bool>,
    pub attempts: Vec<AttemptSummary>,
    pub successes: usize,
    pub required: usize,
    pub passed: bool,
}

impl ExperimentSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("bad summary: {e}")))
    }

    /// The first attempt meeting the expectation, in seed order.
    pub fn first_success(&self) -> Option<&AttemptSummary> {
        self.attempts.iter().find(|a| a.meets_expectation)
    }
}

pub fn attempt_dir_name(seed: u64) -> String {
    format!("seed-{seed}")
}

/// Generate, train every attempt, analyze, and judge against the expectation.
///
/// Attempts run in seed order and stop as soon as the verdict is settled.
pub fn full_experiment(
    config: &ExperimentConfig,
    mut progress: impl FnMut(&str),
) -> CliResult<ExperimentSummary> {
    config.validate()?;
    let out = &config.output_dir;
    create_dir(out)?;
    std::fs::write(out.join("config.json"), config.to_json())
        .map_err(|e| CliError::Usage(format!("cannot write config: {e}")))?;
    let (data, _) = gen_data(config, out)?;
    progress(&format!("data: {}", provenance_summary(&data)));

    let required = config.attempts.required;
    let total = config.attempts.train_seeds.len();
    let mut attempts: Vec<AttemptSummary> = Vec::new();
    let mut l_matrix = None;
    for (k, &seed) in config.attempts.train_seeds.iter().enumerate() {
        let successes = attempts.iter().filter(|a| a.meets_expectation).count();
        if successes >= required || successes + (total - k) < required {
            break;
        }
        let dir_name = attempt_dir_name(seed);
        let dir = out.join(&dir_name);
        progress(&format!("training seed {seed}"));
        let result = train_on(config, &data, seed, None, &dir, None)?;
        let report = analyze_loaded(&config.analysis, &result.model, &data, &dir)?;
        let v = &report.verdict;
        let degraded = !v.informative_count_ok || v.correlation_ok == Some(false);
        let meets_expectation = match config.expectation {
            Expectation::Recover => v.recovered,
            Expectation::Degrade => degraded,
        };
        let a = AttemptSummary {
            train_seed: seed,
            dir: dir_name,
            finished: result.outcome.finished,
            capped: result.outcome.capped.clone(),
            steps: result.outcome.steps,
            full_pass_loss: result.outcome.full_pass_loss,
            informative_count: report.spectrum.informative_count,
            gap_ratio: report.spectrum.gap_ratio,
            min_abs_r: report.recovery.as_ref().and_then(|r| r.min_abs_r()),
            min_dominance: report.stat_fit.as_ref().map(|f| f.min_dominance()),
            max_quadratic_mass: report.stat_fit.as_ref().map(|f| f.max_quadratic_mass()),
            recovered: v.recovered,
            degraded,
            structure_ok: v.structure_ok,
            meets_expectation,
        };
        progress(&format!(
            "seed {seed}: informative {} gap {} min |r| {} recovered {} degraded {}",
            a.informative_count,
            fmt_opt(a.gap_ratio),
            fmt_opt(a.min_abs_r),
            a.recovered,
            a.degraded
        ));
        l_matrix = report.l_matrix;
        attempts.push(a);
    }

    let successes = attempts.iter().filter(|a| a.meets_expectation).count();
    let summary = ExperimentSummary {
        version: SUMMARY_VERSION,
        name: config.name.clone(),
        expectation: config.expectation,
        n_classes: data.n_classes,
        n_samples: data.len(),
        dim: data.dim(),
        mixer_seed_used: data.provenance.as_ref().map(|p| p.mixer_seed_used),
        l_matrix_rank: l_matrix.as_ref().map(|l| l.rank),
        l_matrix_full_rank: l_matrix.as_ref().map(|l| l.full_rank),
        enough_conditions: l_matrix.as_ref().map(|l| l.enough_conditions),
        attempts,
        successes,
        required,
        passed: successes >= required,
    };
    std::fs::write(out.join(SUMMARY_FILE), summary.to_json())
        .map_err(|e| CliError::Usage(format!("cannot write summary: {e}")))?;
    Ok(summary)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |x| format!("{x:.4}"))
}
