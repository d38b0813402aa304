use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest problem solved by enumerating every injective assignment.
pub const EXACT_SEARCH_MAX: usize = 4;
const WEIGHT_SCALE: f64 = 1e12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub true_dim: usize,
    pub est_dim: usize,
    pub abs_r: f64,
    /// `z ≈ slope · w + intercept`
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub pairs: Vec<MatchedPair>,
    /// `abs_r[i][j]`; `None` where either column has zero variance.
    pub abs_r: Vec<Vec<Option<f64>>>,
    /// Estimated dimensions left unassigned; these carry noise.
    pub noise_dims: Vec<usize>,
    pub excluded_true: Vec<usize>,
    pub excluded_est: Vec<usize>,
    pub method: String,
}

impl RecoveryReport {
    pub fn min_abs_r(&self) -> Option<f64> {
        self.pairs.iter().map(|p| p.abs_r).reduce(f64::min)
    }
}

struct Moments {
    mean: Vec<f64>,
    centered: Vec<Vec<f64>>,
    norm: Vec<f64>,
}

fn moments(x: &Tensor) -> Result<Moments> {
    let (n, d) = x.dims2()?;
    let mut mean = vec![0.0; d];
    let mut centered = vec![vec![0.0; n]; d];
    for j in 0..d {
        let col = x.column(j);
        let m = col.iter().sum::<f64>() / n as f64;
        mean[j] = m;
        centered[j] = col.iter().map(|v| v - m).collect();
    }
    let norm = centered
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    Ok(Moments { mean, centered, norm })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Injective assignment of rows to columns maximising total weight.
/// `None` entries cannot be assigned.
pub fn best_assignment(weights: &[Vec<Option<f64>>]) -> (Vec<Option<usize>>, &'static str) {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows <= EXACT_SEARCH_MAX {
        (exact_assignment(weights, cols), "exact")
    } else {
        (hungarian(weights, rows, cols), "hungarian")
    }
}

fn exact_assignment(weights: &[Vec<Option<f64>>], cols: usize) -> Vec<Option<usize>> {
    fn go(
        weights: &[Vec<Option<f64>>],
        cols: usize,
        i: usize,
        used: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        score: f64,
        best: &mut (f64, Vec<Option<usize>>),
    ) {
        if i == weights.len() {
            if score > best.0 {
                *best = (score, current.clone());
            }
            return;
        }
        for j in 0..cols {
            if let (false, Some(w)) = (used[j], weights[i][j]) {
                used[j] = true;
                current.push(Some(j));
                go(weights, cols, i + 1, used, current, score + w, best);
                current.pop();
                used[j] = false;
            }
        }
        current.push(None);
        go(weights, cols, i + 1, used, current, score, best);
        current.pop();
    }
    let mut best = (f64::NEG_INFINITY, vec![None; weights.len()]);
    go(weights, cols, 0, &mut vec![false; cols], &mut Vec::new(), 0.0, &mut best);
    best.1
}

fn hungarian(weights: &[Vec<Option<f64>>], rows: usize, cols: usize) -> Vec<Option<usize>> {
    // Pad to a square so rectangular inputs and forbidden cells share one path;
    // a forbidden or padded cell weighs -1, below any real |r|.
    let n = rows.max(cols);
    let forbidden = -(WEIGHT_SCALE as i64);
    let mut data = vec![forbidden; n * n];
    for (i, row) in weights.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            if let Some(w) = w {
                data[i * n + j] = (w * WEIGHT_SCALE).round() as i64;
            }
        }
    }
    let m = Matrix::from_vec(n, n, data).expect("square matrix");
    let (_, assign) = kuhn_munkres(&m);
    (0..rows)
        .map(|i| {
            let j = assign[i];
            (j < cols && weights[i][j].is_some()).then_some(j)
        })
        .collect()
}

/// Pairs each true latent with one estimated latent by maximal total `|r|`.
pub fn match_latents(z: &Tensor, w: &Tensor) -> Result<RecoveryReport> {
    let (n, n_true) = z.dims2()?;
    let (nw, n_est) = w.dims2()?;
    if n != nw {
        return Err(Error::dim("match_latents", format!("{n} vs {nw} records")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two records".into()));
    }
    let mz = moments(z)?;
    let mw = moments(w)?;
    let excluded_true: Vec<usize> = (0..n_true).filter(|&i| !(mz.norm[i] > 0.0)).collect();
    let excluded_est: Vec<usize> = (0..n_est).filter(|&j| !(mw.norm[j] > 0.0)).collect();

    let abs_r: Vec<Vec<Option<f64>>> = (0..n_true)
        .map(|i| {
            (0..n_est)
                .map(|j| {
                    if mz.norm[i] > 0.0 && mw.norm[j] > 0.0 {
                        let r = dot(&mz.centered[i], &mw.centered[j]) / (mz.norm[i] * mw.norm[j]);
                        Some(r.abs().min(1.0))
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect();

    let (assignment, method) = best_assignment(&abs_r);
    let mut pairs = Vec::new();
    for (i, j) in assignment.iter().enumerate() {
        let Some(j) = *j else { continue };
        let cov = dot(&mz.centered[i], &mw.centered[j]);
        let slope = cov / (mw.norm[j] * mw.norm[j]);
        let intercept = mz.mean[i] - slope * mw.mean[j];
        let sse: f64 = mz.centered[i]
            .iter()
            .zip(&mw.centered[j])
            .map(|(a, b)| (a - slope * b).powi(2))
            .sum();
        pairs.push(MatchedPair {
            true_dim: i,
            est_dim: j,
            abs_r: abs_r[i][j].unwrap_or(0.0),
            slope,
            intercept,
            residual_rms: (sse / n as f64).sqrt(),
        });
    }
    let used: Vec<usize> = pairs.iter().map(|p| p.est_dim).collect();
    let noise_dims = (0..n_est)
        .filter(|j| !used.contains(j) && !excluded_est.contains(j))
        .collect();
    Ok(RecoveryReport {
        pairs,
        abs_r,
        noise_dims,
        excluded_true,
        excluded_est,
        method: method.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> Tensor {
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let t = i as f64;
                vec![(t * 0.37).sin() * 3.0, (t * 0.11).cos() + 0.02 * t]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn identity_match() {
        let z = sample(200);
        let r = match_latents(&z, &z).unwrap();
        for (k, p) in r.pairs.iter().enumerate() {
            assert_eq!((p.true_dim, p.est_dim), (k, k));
            assert!((p.abs_r - 1.0).abs() < 1e-12);
            assert!((p.slope - 1.0).abs() < 1e-12 && p.intercept.abs() < 1e-12);
            assert!(p.residual_rms < 1e-12);
        }
    }

    #[test]
    fn affine_images_recover_slope_and_intercept() {
        let z = sample(200);
        // w = -3 z + 7  gives  z = w / -3 + 7/3
        let w = z.map(|v| -3.0 * v + 7.0);
        let r = match_latents(&z, &w).unwrap();
        for p in &r.pairs {
            assert_eq!(p.true_dim, p.est_dim);
            assert!((p.abs_r - 1.0).abs() < 1e-12);
            assert!((p.slope + 1.0 / 3.0).abs() < 1e-12);
            assert!((p.intercept - 7.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_variance_columns_are_excluded() {
        let z = sample(50);
        let mut rows: Vec<Vec<f64>> = (0..50).map(|i| z.row(i).to_vec()).collect();
        rows.iter_mut().for_each(|r| r.push(4.0));
        let w = Tensor::from_rows(&rows).unwrap();
        let r = match_latents(&z, &w).unwrap();
        assert_eq!(r.excluded_est, vec![2]);
        assert!(r.noise_dims.is_empty());
        assert!(r.abs_r[0][2].is_none());
    }

    #[test]
    fn exact_and_hungarian_agree() {
        let weights = vec![
            vec![Some(0.9), Some(0.8), Some(0.1)],
            vec![Some(0.85), Some(0.1), Some(0.2)],
            vec![Some(0.3), Some(0.7), None],
        ];
        let exact = exact_assignment(&weights, 3);
        // 0.9 + 0.2 + 0.7 beats 0.85 + 0.1 + 0.7
        assert_eq!(exact, vec![Some(0), Some(2), Some(1)]);
        assert_eq!(hungarian(&weights, 3, 3), exact);
    }

    #[test]
    fn more_true_than_estimated() {
        let weights = vec![vec![Some(0.2)], vec![Some(0.9)], vec![None]];
        assert_eq!(exact_assignment(&weights, 1), vec![None, Some(0), None]);
        assert_eq!(hungarian(&weights, 3, 1), vec![None, Some(0), None]);
    }
}
