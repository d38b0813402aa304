use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    /// Column index in the latent space.
    pub dim: usize,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Sorted by descending std.
    pub entries: Vec<SpectrumEntry>,
    /// Sorted stds of the generating latents, when known.
    pub ground_truth_stds: Option<Vec<f64>>,
    pub informative_count: usize,
    /// `std[k-1] / std[k]` at the chosen cut; `None` when the next std is zero
    /// or nothing is informative.
    pub gap_ratio: Option<f64>,
    /// `per_class[c][j]`: std of column `j` within class `c`.
    pub per_class: Vec<Vec<f64>>,
}

impl SpectrumReport {
    pub fn sorted_stds(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.std).collect()
    }

    /// Column indices of the `k` widest dimensions.
    pub fn top_dims(&self, k: usize) -> Vec<usize> {
        self.entries.iter().take(k).map(|e| e.dim).collect()
    }
}

/// Population standard deviation of every column.
pub fn column_stds(x: &Tensor) -> Result<Vec<f64>> {
    let (n, d) = x.dims2()?;
    let mut mean = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks_exact(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    Ok(var.into_iter().map(|s| (s / n as f64).sqrt()).collect())
}

/// Cuts a descending spectrum at its largest consecutive ratio.
///
/// Returns the number of dimensions before the cut and the ratio there.
pub fn informative_count(sorted_stds: &[f64]) -> (usize, Option<f64>) {
    if sorted_stds.first().is_none_or(|&s| s <= 0.0) {
        return (0, None);
    }
    let mut best = (sorted_stds.len(), None::<f64>, 1.0f64);
    let mut found = false;
    for k in 0..sorted_stds.len().saturating_sub(1) {
        let (a, b) = (sorted_stds[k], sorted_stds[k + 1]);
        if a <= 0.0 {
            break;
        }
        if b <= 0.0 {
            return (k + 1, None);
        }
        let r = a / b;
        if !found || r > best.2 {
            best = (k + 1, Some(r), r);
            found = true;
        }
    }
    (best.0, best.1)
}

pub fn spectrum_of(
    w: &Tensor,
    labels: Option<(&[usize], usize)>,
    ground_truth: Option<&Tensor>,
) -> Result<SpectrumReport> {
    let (n, d) = w.dims2()?;
    if n == 0 {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let stds = column_stds(w)?;
    let mut entries: Vec<SpectrumEntry> = stds
        .iter()
        .enumerate()
        .map(|(dim, &std)| SpectrumEntry { dim, std })
        .collect();
    entries.sort_by(|a, b| b.std.total_cmp(&a.std).then(a.dim.cmp(&b.dim)));
    let sorted: Vec<f64> = entries.iter().map(|e| e.std).collect();
    let (informative_count, gap_ratio) = informative_count(&sorted);

    let ground_truth_stds = match ground_truth {
        Some(z) => {
            let mut s = column_stds(z)?;
            s.sort_by(|a, b| b.total_cmp(a));
            Some(s)
        }
        None => None,
    };

    let per_class = match labels {
        Some((labels, n_classes)) => {
            if labels.len() != n {
                return Err(Error::dim("spectrum", "labels do not match rows"));
            }
            (0..n_classes)
                .map(|c| {
                    let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
                    if rows.is_empty() {
                        Ok(vec![0.0; d])
                    } else {
                        column_stds(&w.select_rows(&rows)?)
                    }
                })
                .collect::<Result<_>>()?
        }
        None => Vec::new(),
    };

    Ok(SpectrumReport {
        entries,
        ground_truth_stds,
        informative_count,
        gap_ratio,
        per_class,
    })
}
