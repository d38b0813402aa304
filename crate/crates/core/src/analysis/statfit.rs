use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Minimum records per fitted coefficient.
pub const SAMPLES_PER_COEFFICIENT: usize = 10;

/// Least-squares fit of `(z, z²)` on `(w, w², 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineStatFit {
    pub n_true: usize,
    pub n_est: usize,
    /// `2n × 2d`, rows `(z, z²)`, columns `(w, w²)`.
    pub a: Vec<Vec<f64>>,
    /// `2n`
    pub c: Vec<f64>,
    /// Per true dim: largest quadratic contribution `|A2_ij|·sd((w_j-m_j)²)`
    /// over the largest linear one `|A1_ij|·sd(w_j)`. Coefficients are taken
    /// in the centered basis `(w-m, (w-m)²)`.
    pub quadratic_mass: Vec<f64>,
    /// Per true dim: summed quadratic contributions over all contributions.
    pub quadratic_share: Vec<f64>,
    /// Per true dim: largest over second largest `|A1_ij|·sd(w_j)`, centered basis;
    /// `None` when only one term is nonzero.
    pub dominance: Vec<Option<f64>>,
    /// Per true dim: share of linear mass outside the dominant column.
    pub off_structure_mass: Vec<f64>,
    /// Largest raw `|A2|` entry in the rows for `z`.
    pub a2_max_abs: f64,
    /// Residual RMS per target row.
    pub residual_rms: Vec<f64>,
    pub rank: usize,
    pub rank_deficient: bool,
}

impl AffineStatFit {
    pub fn max_quadratic_mass(&self) -> f64 {
        self.quadratic_mass.iter().copied().fold(0.0, f64::max)
    }

    /// Smallest dominance over the rows; infinite dominance counts as `f64::INFINITY`.
    pub fn min_dominance(&self) -> f64 {
        self.dominance
            .iter()
            .map(|d| d.unwrap_or(f64::INFINITY))
            .fold(f64::INFINITY, f64::min)
    }
}

fn std_of(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    (v.map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub fn affine_stat_fit(z: &Tensor, w: &Tensor) -> Result<AffineStatFit> {
    let (n, nt) = z.dims2()?;
    let (nw, d) = w.dims2()?;
    if n != nw {
        return Err(Error::dim("affine_stat_fit", format!("{n} vs {nw} records")));
    }
    let n_coef = (2 * d + 1) * 2 * nt;
    if n < SAMPLES_PER_COEFFICIENT * n_coef {
        return Err(Error::InvalidArgument(format!(
            "{n} records for {n_coef} coefficients; need {}x as many",
            SAMPLES_PER_COEFFICIENT
        )));
    }
    let p = 2 * d + 1;
    // Fit on centered columns: with raw `w`, a dim far from zero makes `w`
    // and `w²` nearly collinear and the split between A1 and A2 arbitrary.
    let mean_w: Vec<f64> = (0..d).map(|j| (0..n).map(|i| w.get2(i, j)).sum::<f64>() / n as f64).collect();
    let design = DMatrix::from_fn(n, p, |i, k| {
        if k < d {
            w.get2(i, k) - mean_w[k]
        } else if k < 2 * d {
            (w.get2(i, k - d) - mean_w[k - d]).powi(2)
        } else {
            1.0
        }
    });
    let targets = DMatrix::from_fn(n, 2 * nt, |i, r| {
        if r < nt {
            z.get2(i, r)
        } else {
            z.get2(i, r - nt).powi(2)
        }
    });
    // Equilibrate the columns before the SVD; undone on the coefficients.
    let scales: Vec<f64> = (0..p)
        .map(|k| {
            let rms = (design.column(k).norm_squared() / n as f64).sqrt();
            if rms > 0.0 {
                rms
            } else {
                1.0
            }
        })
        .collect();
    let mut scaled = design.clone();
    for (k, s) in scales.iter().enumerate() {
        scaled.column_mut(k).unscale_mut(*s);
    }
    let svd = scaled.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (n.max(p) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let mut coef = svd
        .solve(&targets, tol)
        .map_err(|e| Error::InvalidArgument(format!("least squares failed: {e}")))?;
    for (k, s) in scales.iter().enumerate() {
        coef.row_mut(k).unscale_mut(*s);
    }
    let resid = &targets - &design * &coef;
    let residual_rms = (0..2 * nt)
        .map(|r| (resid.column(r).norm_squared() / n as f64).sqrt())
        .collect();

    // Back to raw coordinates: α(w-m) + β(w-m)² = (α - 2βm)w + βw² + (βm² - αm).
    let a: Vec<Vec<f64>> = (0..2 * nt)
        .map(|r| {
            let lin = (0..d).map(|j| coef[(j, r)] - 2.0 * coef[(d + j, r)] * mean_w[j]);
            let quad = (0..d).map(|j| coef[(d + j, r)]);
            lin.chain(quad).collect()
        })
        .collect();
    let c: Vec<f64> = (0..2 * nt)
        .map(|r| {
            coef[(2 * d, r)]
                + (0..d)
                    .map(|j| coef[(d + j, r)] * mean_w[j].powi(2) - coef[(j, r)] * mean_w[j])
                    .sum::<f64>()
        })
        .collect();

    let sd_w: Vec<f64> = (0..d).map(|j| std_of((0..n).map(|i| w.get2(i, j)))).collect();
    let sd_w2: Vec<f64> = (0..d)
        .map(|j| std_of((0..n).map(|i| (w.get2(i, j) - mean_w[j]).powi(2))))
        .collect();
    let centered: Vec<Vec<f64>> = (0..nt)
        .map(|r| (0..2 * d).map(|k| coef[(k, r)]).collect())
        .collect();

    let mut quadratic_mass = Vec::with_capacity(nt);
    let mut quadratic_share = Vec::with_capacity(nt);
    let mut dominance = Vec::with_capacity(nt);
    let mut off_structure_mass = Vec::with_capacity(nt);
    let mut a2_max_abs: f64 = 0.0;
    for row in &centered {
        let lin: Vec<f64> = (0..d).map(|j| row[j].abs() * sd_w[j]).collect();
        let quad: Vec<f64> = (0..d).map(|j| row[d + j].abs() * sd_w2[j]).collect();
        a2_max_abs = (0..d).map(|j| row[d + j].abs()).fold(a2_max_abs, f64::max);
        let lin_total: f64 = lin.iter().sum();
        let quad_total: f64 = quad.iter().sum();
        let total = lin_total + quad_total;
        quadratic_share.push(if total > 0.0 { quad_total / total } else { 0.0 });
        let mut sorted = lin.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        let (first, second) = (sorted[0], sorted.get(1).copied().unwrap_or(0.0));
        let quad_max = quad.iter().copied().fold(0.0, f64::max);
        quadratic_mass.push(if first > 0.0 { quad_max / first } else { f64::INFINITY });
        dominance.push((second > 0.0).then(|| first / second));
        off_structure_mass.push(if lin_total > 0.0 { 1.0 - first / lin_total } else { 0.0 });
    }

    Ok(AffineStatFit {
        n_true: nt,
        n_est: d,
        a,
        c,
        quadratic_mass,
        quadratic_share,
        dominance,
        off_structure_mass,
        a2_max_abs,
        residual_rms,
        rank,
        rank_deficient: rank < p,
    })
}
