//! Identifiability diagnostics for a trained flow.

mod lmatrix;
mod matching;
mod report;
mod spectrum;
mod statfit;

pub use lmatrix::{check_l_matrix, natural_parameters, LMatrixReport, STATS_PER_DIM};
pub use matching::{best_assignment, match_latents, MatchedPair, RecoveryReport, EXACT_SEARCH_MAX};
pub use report::{
    analyze, analyze_latents, emit_report, evaluate, per_class_csv, scatter_svg, spectrum_csv,
    Analysis, AnalysisReport, Thresholds, Verdict, REPORT_VERSION,
};
pub use spectrum::{column_stds, informative_count, spectrum_of, SpectrumEntry, SpectrumReport};
pub use statfit::{affine_stat_fit, AffineStatFit, SAMPLES_PER_COEFFICIENT};
