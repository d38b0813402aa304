use gin_core::analysis::{check_l_matrix, informative_count, match_latents, spectrum_of};
use gin_core::flow::{FlowConfig, FlowMode};
use gin_core::latent::{update_from_batch, MixtureParams, VarianceDivisor};
use gin_core::verify::{numerical_logdet, perturbed_flow, random_points, round_trip_error};
use gin_core::Tensor;
use proptest::prelude::*;

fn flow_config(mode: FlowMode, dim: usize, blocks: usize) -> FlowConfig {
    FlowConfig {
        n_blocks: blocks,
        hidden: vec![8],
        ..match mode {
            FlowMode::Gin => FlowConfig::gin(dim),
            FlowMode::Rnvp => FlowConfig::rnvp(dim),
        }
    }
}

fn mode() -> impl Strategy<Value = FlowMode> {
    prop_oneof![Just(FlowMode::Gin), Just(FlowMode::Rnvp)]
}

/// Mean NLL by explicit loops over samples and dimensions.
fn naive_nll(w: &Tensor, labels: &[usize], means: &Tensor, vars: &Tensor) -> f64 {
    let (n, d) = (w.shape()[0], w.shape()[1]);
    let mut total = 0.0;
    for i in 0..n {
        let c = labels[i];
        let mut s = 0.0;
        for j in 0..d {
            let var = vars.get2(c, j);
            s += (w.get2(i, j) - means.get2(c, j)).powi(2) / (2.0 * var) + 0.5 * var.ln();
        }
        total += s / d as f64;
    }
    total / n as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn flows_invert(mode in mode(), dim in 2usize..9, blocks in 1usize..5, seed in 0u64..1000) {
        let model = perturbed_flow(flow_config(mode, dim, blocks), seed).unwrap();
        let x = random_points(64, dim, seed + 1);
        prop_assert!(round_trip_error(&model, &x).unwrap() < 1e-8);
    }

    #[test]
    fn analytic_logdet_matches_numerical(mode in mode(), dim in 2usize..7, seed in 0u64..1000) {
        let model = perturbed_flow(flow_config(mode, dim, 3), seed).unwrap();
        let x = random_points(4, dim, seed + 7);
        let (_, logdet) = model.forward(&x).unwrap();
        for (i, ld) in logdet.iter().enumerate() {
            let numeric = numerical_logdet(&model, x.row(i), 1e-6).unwrap();
            prop_assert!((numeric - ld).abs() < 1e-4, "{numeric} vs {ld}");
            if mode == FlowMode::Gin {
                prop_assert_eq!(*ld, 0.0);
            }
        }
    }

    #[test]
    fn gin_scales_sum_to_zero(dim in 2usize..12, seed in 0u64..1000) {
        let model = perturbed_flow(flow_config(FlowMode::Gin, dim, 4), seed).unwrap();
        let x = random_points(32, dim, seed).map(|v| 5.0 * v);
        for scales in model.scale_rows(&x).unwrap() {
            for r in 0..scales.shape()[0] {
                prop_assert!(scales.row(r).iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nll_matches_the_naive_loop(n in 1usize..40, d in 1usize..6, m in 1usize..5, seed in 0u64..1000) {
        let w = random_points(n, d, seed).map(|v| 4.0 * v);
        let labels: Vec<usize> = (0..n).map(|i| (i * 3 + seed as usize) % m).collect();
        let means = random_points(m, d, seed + 1);
        let vars = random_points(m, d, seed + 2).map(|v| v.exp());
        let mixture = MixtureParams::new(means.clone(), vars.clone()).unwrap();
        let fast = mixture.nll_value(&w, &labels).unwrap();
        prop_assert!((fast - naive_nll(&w, &labels, &means, &vars)).abs() < 1e-12);
    }

    #[test]
    fn batch_statistics_match_per_class_moments(n in 6usize..50, seed in 0u64..1000) {
        let (d, m) = (3, 3);
        let w = random_points(n, d, seed);
        let labels: Vec<usize> = (0..n).map(|i| i % m).collect();
        let mut mixture = MixtureParams::standard(m, d).unwrap();
        update_from_batch(&w, &labels, &mut mixture, VarianceDivisor::Unbiased).unwrap();
        for c in 0..m {
            let rows: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            let k = rows.len() as f64;
            for j in 0..d {
                let mean = rows.iter().map(|&i| w.get2(i, j)).sum::<f64>() / k;
                let var = rows.iter().map(|&i| (w.get2(i, j) - mean).powi(2)).sum::<f64>() / (k - 1.0);
                prop_assert!((mixture.mean(c, j) - mean).abs() < 1e-12);
                prop_assert!((mixture.variance(c, j) - var.max(1e-6)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matching_ignores_affine_rescaling_and_column_order(
        scales in prop::collection::vec(prop_oneof![-50.0f64..-0.01, 0.01f64..50.0], 4),
        shifts in prop::collection::vec(-10.0f64..10.0, 4),
        seed in 0u64..1000,
    ) {
        let z = random_points(300, 2, seed);
        let noise = random_points(300, 2, seed + 1);
        // w columns: noisy copies of z1 and z0, then two pure-noise columns.
        let base: Vec<Vec<f64>> = (0..300)
            .map(|i| vec![z.get2(i, 1) + 0.1 * noise.get2(i, 0), noise.get2(i, 1), z.get2(i, 0), noise.get2(i, 0)])
            .collect();
        let w = Tensor::from_rows(&base).unwrap();
        let moved: Vec<Vec<f64>> = base
            .iter()
            .map(|r| {
                let t: Vec<f64> = r.iter().enumerate().map(|(j, v)| scales[j] * v + shifts[j]).collect();
                vec![t[3], t[2], t[1], t[0]]
            })
            .collect();
        let a = match_latents(&z, &w).unwrap();
        let b = match_latents(&z, &Tensor::from_rows(&moved).unwrap()).unwrap();
        for (pa, pb) in a.pairs.iter().zip(&b.pairs) {
            prop_assert_eq!(pa.true_dim, pb.true_dim);
            prop_assert_eq!(3 - pa.est_dim, pb.est_dim);
            prop_assert!((pa.abs_r - pb.abs_r).abs() < 1e-9);
        }
        prop_assert_eq!(a.pairs.iter().map(|p| p.est_dim).collect::<Vec<_>>(), vec![2, 0]);
    }

    #[test]
    fn l_matrix_rank_ignores_class_order(m in 2usize..7, n in 1usize..4, seed in 0u64..1000, rot in 0usize..7) {
        let means = random_points(m, n, seed);
        let vars = random_points(m, n, seed + 1).map(|v| 0.5 + v.abs());
        let rows = |t: &Tensor| (0..m).map(|c| t.row(c).to_vec()).collect::<Vec<_>>();
        let (mu, var) = (rows(&means), rows(&vars));
        let a = check_l_matrix(&mu, &var).unwrap();
        let mut mu2 = mu.clone();
        let mut var2 = var.clone();
        mu2.rotate_left(rot % m);
        var2.rotate_left(rot % m);
        mu2.reverse();
        var2.reverse();
        let b = check_l_matrix(&mu2, &var2).unwrap();
        prop_assert_eq!(a.rank, b.rank);
        prop_assert_eq!(a.enough_conditions, b.enough_conditions);
        prop_assert!(a.rank <= (m - 1).min(2 * n));
    }

    #[test]
    fn spectrum_is_deterministic_and_order_free(seed in 0u64..1000, k in 1usize..5) {
        let mut w = random_points(200, 6, seed);
        for v in w.data_mut().chunks_exact_mut(6) {
            for (j, x) in v.iter_mut().enumerate() {
                *x *= if j < k { 3.0 + j as f64 } else { 0.01 };
            }
        }
        let a = spectrum_of(&w, None, None).unwrap();
        prop_assert_eq!(&a, &spectrum_of(&w, None, None).unwrap());
        prop_assert_eq!(a.informative_count, k);
        let reversed = w.select_cols(&[5, 4, 3, 2, 1, 0]);
        let b = spectrum_of(&reversed, None, None).unwrap();
        prop_assert_eq!(a.sorted_stds(), b.sorted_stds());
    }

    #[test]
    fn gap_estimator_finds_the_largest_ratio(
        top in prop::collection::vec(1.0f64..10.0, 1..5),
        bottom in prop::collection::vec(0.001f64..0.05, 1..8),
    ) {
        let mut s: Vec<f64> = top.iter().chain(&bottom).copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        let (count, gap) = informative_count(&s);
        let best = (0..s.len() - 1).map(|k| s[k] / s[k + 1]).fold(0.0, f64::max);
        prop_assert!((gap.unwrap() - best).abs() < 1e-12 * best);
        prop_assert!((s[count - 1] / s[count] - best).abs() < 1e-12 * best);
    }
}
