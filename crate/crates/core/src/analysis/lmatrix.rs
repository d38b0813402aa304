use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sufficient statistics per latent dimension of a Gaussian: `z` and `z²`.
pub const STATS_PER_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LMatrixReport {
    pub n_classes: usize,
    pub n_latent: usize,
    /// `n · k`
    pub nk: usize,
    /// `nk × (M-1)`, columns `λ(u_m) - λ(u_0)`.
    pub l: Vec<Vec<f64>>,
    pub singular_values: Vec<f64>,
    pub rank: usize,
    pub full_rank: bool,
    /// Largest over smallest singular value; `None` if the smallest is zero.
    pub condition_number: Option<f64>,
    /// Whether `M >= nk + 1`.
    pub enough_conditions: bool,
}

/// Natural parameters `(μ/σ², -1/(2σ²))` per latent dimension.
pub fn natural_parameters(means: &[f64], variances: &[f64]) -> Vec<f64> {
    means
        .iter()
        .zip(variances)
        .flat_map(|(&m, &v)| [m / v, -0.5 / v])
        .collect()
}

pub fn check_l_matrix(means: &[Vec<f64>], variances: &[Vec<f64>]) -> Result<LMatrixReport> {
    let m = means.len();
    if m < 2 {
        return Err(Error::InvalidArgument("need at least two classes".into()));
    }
    if variances.len() != m {
        return Err(Error::dim("check_l_matrix", "means and variances disagree on classes"));
    }
    let n = means[0].len();
    if n == 0 || means.iter().chain(variances).any(|r| r.len() != n) {
        return Err(Error::dim("check_l_matrix", "ragged parameter rows"));
    }
    if let Some(v) = variances.iter().flatten().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::InvalidArgument(format!("degenerate variance {v}")));
    }
    let lambdas: Vec<Vec<f64>> = means
        .iter()
        .zip(variances)
        .map(|(mu, var)| natural_parameters(mu, var))
        .collect();
    let nk = n * STATS_PER_DIM;
    let l = DMatrix::from_fn(nk, m - 1, |r, c| lambdas[c + 1][r] - lambdas[0][r]);
    let sv = l.clone().svd(false, false).singular_values;
    let mut singular_values: Vec<f64> = sv.iter().copied().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let tol = smax * (nk.max(m - 1) as f64) * f64::EPSILON;
    let rank = if smax > 0.0 {
        singular_values.iter().filter(|&&s| s > tol).count()
    } else {
        0
    };
    let smin = singular_values.last().copied().unwrap_or(0.0);
    Ok(LMatrixReport {
        n_classes: m,
        n_latent: n,
        nk,
        l: (0..nk).map(|r| (0..m - 1).map(|c| l[(r, c)]).collect()).collect(),
        singular_values,
        rank,
        full_rank: rank == nk,
        condition_number: (rank > 0 && smin > tol).then(|| smax / smin),
        enough_conditions: m > nk,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_classes_have_rank_zero() {
        let means = vec![vec![1.0, 2.0]; 4];
        let vars = vec![vec![0.5, 3.0]; 4];
        let r = check_l_matrix(&means, &vars).unwrap();
        assert_eq!(r.rank, 0);
        assert!(r.condition_number.is_none());
    }

    #[test]
    fn three_classes_are_too_few_for_two_gaussian_dims() {
        let means = vec![vec![1.0, -2.0], vec![0.3, 4.0], vec![-3.0, 1.0]];
        let vars = vec![vec![0.5, 1.0], vec![2.0, 2.5], vec![1.2, 0.7]];
        let r = check_l_matrix(&means, &vars).unwrap();
        assert_eq!(r.nk, 4);
        assert!(!r.enough_conditions);
        assert_eq!(r.rank, 2);
        assert!(!r.full_rank);
    }

    #[test]
    fn natural_parameter_columns() {
        let means = vec![vec![0.0], vec![2.0]];
        let vars = vec![vec![1.0], vec![4.0]];
        let r = check_l_matrix(&means, &vars).unwrap();
        // λ0 = (0, -0.5), λ1 = (0.5, -0.125)
        assert_eq!(r.l, vec![vec![0.5], vec![0.375]]);
    }

    #[test]
    fn rejects_bad_variances() {
        let means = vec![vec![0.0], vec![1.0]];
        assert!(check_l_matrix(&means, &[vec![1.0], vec![0.0]]).is_err());
        assert!(check_l_matrix(&means[..1], &[vec![1.0]]).is_err());
    }
}
