use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::lmatrix::{check_l_matrix, LMatrixReport};
use super::matching::{match_latents, RecoveryReport};
use super::spectrum::{spectrum_of, SpectrumReport};
use super::statfit::{affine_stat_fit, AffineStatFit};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::tensor::Tensor;

pub const REPORT_VERSION: u32 = 1;
const SCATTER_MAX_POINTS: usize = 2000;
const SCATTER_SIZE: f64 = 480.0;
const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Pass criteria for a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub expected_informative: usize,
    pub min_gap_ratio: f64,
    pub min_abs_r: f64,
    pub min_dominance: f64,
    pub max_quadratic_mass: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            expected_informative: 2,
            min_gap_ratio: 5.0,
            min_abs_r: 0.95,
            min_dominance: 10.0,
            max_quadratic_mass: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub informative_count_ok: bool,
    pub gap_ok: bool,
    /// `None` without ground-truth latents.
    pub correlation_ok: Option<bool>,
    pub dominance_ok: Option<bool>,
    pub quadratic_mass_ok: Option<bool>,
    /// Count, gap and correlation criteria together.
    pub recovered: bool,
    /// Dominance and quadratic-mass criteria together.
    pub structure_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub version: u32,
    pub n_records: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub spectrum: SpectrumReport,
    pub recovery: Option<RecoveryReport>,
    pub stat_fit: Option<AffineStatFit>,
    /// Why the statistic fit was skipped, if it was.
    pub stat_fit_note: Option<String>,
    pub l_matrix: Option<LMatrixReport>,
    pub thresholds: Thresholds,
    pub verdict: Verdict,
}

pub fn evaluate(
    spectrum: &SpectrumReport,
    recovery: Option<&RecoveryReport>,
    fit: Option<&AffineStatFit>,
    n_true: Option<usize>,
    t: &Thresholds,
) -> Verdict {
    let informative_count_ok = spectrum.informative_count == t.expected_informative;
    let gap_ok = spectrum.informative_count > 0
        && spectrum.gap_ratio.is_none_or(|g| g >= t.min_gap_ratio);
    let correlation_ok = recovery.map(|r| {
        r.pairs.len() == n_true.unwrap_or(r.pairs.len())
            && !r.pairs.is_empty()
            && r.pairs.iter().all(|p| p.abs_r >= t.min_abs_r)
    });
    let dominance_ok = fit.map(|f| f.min_dominance() >= t.min_dominance);
    let quadratic_mass_ok = fit.map(|f| f.max_quadratic_mass() <= t.max_quadratic_mass);
    Verdict {
        informative_count_ok,
        gap_ok,
        correlation_ok,
        dominance_ok,
        quadratic_mass_ok,
        recovered: informative_count_ok && gap_ok && correlation_ok != Some(false),
        structure_ok: match (dominance_ok, quadratic_mass_ok) {
            (Some(a), Some(b)) => Some(a && b),
            _ => None,
        },
    }
}

/// Everything the report needs, computed from `w = g⁻¹(x)`.
pub struct Analysis {
    pub report: AnalysisReport,
    pub w: Tensor,
}

pub fn analyze(model: &FlowModel, data: &LabeledDataset, thresholds: &Thresholds) -> Result<Analysis> {
    if model.dim() != data.dim() {
        return Err(Error::dim(
            "analyze",
            format!("model dim {} vs dataset dim {}", model.dim(), data.dim()),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let (w, _) = model.forward(&data.x)?;
    let report = analyze_latents(&w, data, thresholds)?;
    Ok(Analysis { report, w })
}

pub fn analyze_latents(w: &Tensor, data: &LabeledDataset, thresholds: &Thresholds) -> Result<AnalysisReport> {
    let z_inf = data.informative_latents();
    let spectrum = spectrum_of(w, Some((&data.labels, data.n_classes)), data.z.as_ref())?;
    let recovery = z_inf.as_ref().map(|z| match_latents(z, w)).transpose()?;
    let (stat_fit, stat_fit_note) = match &z_inf {
        Some(z) => match affine_stat_fit(z, w) {
            Ok(f) => (Some(f), None),
            Err(Error::InvalidArgument(msg)) => (None, Some(msg)),
            Err(e) => return Err(e),
        },
        None => (None, Some("no ground-truth latents".into())),
    };
    let l_matrix = match &data.provenance {
        Some(p) if p.spec.n_classes >= 2 => {
            Some(check_l_matrix(&p.clusters.means, &p.clusters.variances)?)
        }
        _ => None,
    };
    let verdict = evaluate(
        &spectrum,
        recovery.as_ref(),
        stat_fit.as_ref(),
        z_inf.as_ref().map(|z| z.shape()[1]),
        thresholds,
    );
    Ok(AnalysisReport {
        version: REPORT_VERSION,
        n_records: data.len(),
        dim: data.dim(),
        n_classes: data.n_classes,
        spectrum,
        recovery,
        stat_fit,
        stat_fit_note,
        l_matrix,
        thresholds: thresholds.clone(),
        verdict,
    })
}

impl AnalysisReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.version != REPORT_VERSION {
            return Err(Error::Corrupt(format!("unsupported report version {}", r.version)));
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn spectrum_csv(s: &SpectrumReport) -> String {
    let mut out = String::from("rank,dim,std,ground_truth_std\n");
    for (k, e) in s.entries.iter().enumerate() {
        let gt = s
            .ground_truth_stds
            .as_ref()
            .and_then(|g| g.get(k))
            .map_or(String::new(), |v| v.to_string());
        let _ = writeln!(out, "{k},{},{},{gt}", e.dim, e.std);
    }
    out
}

pub fn per_class_csv(s: &SpectrumReport) -> String {
    let mut out = String::from("class,dim,std\n");
    for (c, row) in s.per_class.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let _ = writeln!(out, "{c},{j},{v}");
        }
    }
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let k = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[k]
}

/// Scatter of the two widest estimated dimensions, coloured by class.
pub fn scatter_svg(w: &Tensor, labels: &[usize], dims: (usize, usize)) -> Result<String> {
    let (n, d) = w.dims2()?;
    if dims.0 >= d || dims.1 >= d || labels.len() != n {
        return Err(Error::dim("scatter_svg", "dims or labels out of range"));
    }
    let stride = n.div_ceil(SCATTER_MAX_POINTS).max(1);
    let rows: Vec<usize> = (0..n).step_by(stride).collect();
    let axis = |j: usize| {
        let mut v: Vec<f64> = rows.iter().map(|&i| w.get2(i, j)).collect();
        v.sort_by(f64::total_cmp);
        let (lo, hi) = (quantile(&v, 0.005), quantile(&v, 0.995));
        if hi > lo {
            (lo, hi)
        } else {
            (lo - 1.0, lo + 1.0)
        }
    };
    let (xr, yr) = (axis(dims.0), axis(dims.1));
    let margin = 30.0;
    let span = SCATTER_SIZE - 2.0 * margin;
    let px = |v: f64, (lo, hi): (f64, f64)| margin + span * ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SCATTER_SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{margin}" y="20" font-size="12" font-family="sans-serif">w{} vs w{}</text>"#,
        dims.0, dims.1
    );
    for &i in &rows {
        let x = px(w.get2(i, dims.0), xr);
        let y = SCATTER_SIZE - px(w.get2(i, dims.1), yr);
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="1.5" fill="{}" fill-opacity="0.6"/>"#,
            PALETTE[labels[i] % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `report.json`, `spectrum.csv`, `per_class_spectrum.csv` and `scatter.svg`.
pub fn emit_report(report: &AnalysisReport, w: &Tensor, labels: &[usize], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let top = report.spectrum.top_dims(2);
    let dims = (top[0], *top.get(1).unwrap_or(&top[0]));
    let files = [
        ("report.json", report.to_json()? + "\n"),
        ("spectrum.csv", spectrum_csv(&report.spectrum)),
        ("per_class_spectrum.csv", per_class_csv(&report.spectrum)),
        ("scatter.svg", scatter_svg(w, labels, dims)?),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
