//! Simulator properties: sampling moments, slope recovery against
//! closed-form OLS, arc-count statistics, and loadable round-trips.

use adbn::data::{load_dataset, ConstraintSpec, Dataset, DistributionKind};
use adbn::fit::{fit_dag, PvalueAdjustment};
use adbn::sim::{confusion, random_dag, simulate_data, ComparisonMode};
use std::collections::BTreeMap;

#[test]
fn arc_count_mean_matches_binomial_over_500_seeds() {
    let k = 10;
    let density = 0.2;
    let pairs = (k * (k - 1) / 2) as f64;
    let dists = vec![DistributionKind::Gaussian; k];
    let mut total = 0usize;
    let reps = 500;
    for seed in 0..reps {
        let gt = random_dag::<f64>(k, density, &dists, seed).unwrap();
        total += gt.dag.arc_count();
    }
    let mean = total as f64 / reps as f64;
    let expected = density * pairs;
    let se = (pairs * density * (1.0 - density) / reps as f64).sqrt();
    assert!(
        (mean - expected).abs() < 3.0 * se,
        "mean {mean} vs expected {expected} (se {se})"
    );
}

#[test]
fn empty_dag_gaussian_columns_have_unit_moments() {
    let k = 4;
    let n = 4000;
    let mut gt = random_dag::<f64>(k, 0.0, &vec![DistributionKind::Gaussian; k], 7).unwrap();
    for ints in gt.intercepts.iter_mut() {
        ints[0] = 0.0;
    }
    let ds = simulate_data(&gt, n, 11).unwrap();
    let band = 4.0 / (n as f64).sqrt();
    for j in 0..k {
        let col = ds.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < band, "column {j} mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * band, "column {j} variance {var}");
    }
}

#[test]
fn single_arc_slope_recovered_by_ols() {
    // x0 → x1 with a known coefficient; the sample regression slope of
    // x1 on x0 must sit within 4·sd/(√n·sd_x) of it.
    let dists = vec![DistributionKind::Gaussian; 2];
    let gt = random_dag::<f64>(2, 1.0, &dists, 3).unwrap();
    let beta = gt.coefficients[0].values.get(0, 0);
    let n = 5000;
    let ds = simulate_data(&gt, n, 5).unwrap();
    let (child, parent) = (gt.coefficients[0].child, gt.coefficients[0].parent);
    let x = ds.column(parent);
    let y = ds.column(child);
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(&xv, &yv)| (xv - mx) * (yv - my)).sum();
    let slope = sxy / sxx;
    let sd_x = (sxx / n as f64).sqrt();
    let band = 4.0 / ((n as f64).sqrt() * sd_x);
    assert!(
        (slope - beta).abs() < band,
        "slope {slope} vs truth {beta} (band {band})"
    );
}

#[test]
fn binomial_child_refit_recovers_strong_coefficient() {
    // One gaussian parent driving a binomial child with β = 2; a refit of
    // the true structure recovers it within 3 standard errors.
    let dists = vec![DistributionKind::Gaussian, DistributionKind::Binomial];
    let mut gt = random_dag::<f64>(2, 1.0, &dists, 41).unwrap();
    // Orient deterministically: need the binomial node as the child.
    if gt.coefficients[0].child != 1 {
        // Re-seed until the sampled order puts the gaussian node first.
        for seed in 42.. {
            gt = random_dag::<f64>(2, 1.0, &dists, seed).unwrap();
            if gt.coefficients[0].child == 1 {
                break;
            }
        }
    }
    gt.coefficients[0].values.set(0, 0, 2.0);
    let ds = simulate_data(&gt, 10_000, 43).unwrap();
    let cs = ConstraintSpec::unconstrained(2, 1);
    let fr = fit_dag(&gt.dag, &ds, &cs, PvalueAdjustment::None).unwrap();
    let node = fr.nodes.iter().find(|nf| nf.node == "x1").unwrap();
    let coef = node.coefficients.iter().find(|c| c.label == "x0").unwrap();
    assert!(
        (coef.estimate - 2.0).abs() < 3.0 * coef.se,
        "estimate {} (se {})",
        coef.estimate,
        coef.se
    );
}

#[test]
fn simulated_mixed_data_round_trips_through_csv() {
    let dists = vec![
        DistributionKind::Gaussian,
        DistributionKind::Binomial,
        DistributionKind::Poisson,
        DistributionKind::Multinomial { levels: 3 },
        DistributionKind::Gaussian,
    ];
    let gt = random_dag::<f64>(5, 0.4, &dists, 17).unwrap();
    let ds = simulate_data(&gt, 400, 19).unwrap();
    let spec: BTreeMap<String, DistributionKind> = ds
        .names()
        .iter()
        .cloned()
        .zip(ds.dists().iter().copied())
        .collect();
    let reloaded: Dataset<f64> = load_dataset(ds.to_csv().as_bytes(), &spec).unwrap();
    assert_eq!(reloaded, ds);
}

#[test]
fn confusion_totals_partition_truth_arcs() {
    for seed in 0..20u64 {
        let dists = vec![DistributionKind::Gaussian; 6];
        let truth = random_dag::<f64>(6, 0.3, &dists, seed).unwrap();
        let learned = random_dag::<f64>(6, 0.3, &dists, seed + 1000).unwrap();
        for mode in [ComparisonMode::Directed, ComparisonMode::Skeleton] {
            let c = confusion(&learned.dag, &truth.dag, mode).unwrap();
            let truth_arcs = match mode {
                ComparisonMode::Directed => truth.dag.arc_count(),
                ComparisonMode::Skeleton => {
                    let k = truth.dag.k();
                    (0..k)
                        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
                        .filter(|&(i, j)| truth.dag.has_arc(i, j) || truth.dag.has_arc(j, i))
                        .count()
                }
            };
            assert_eq!(c.tp + c.fn_count, truth_arcs, "seed {seed} {mode:?}");
        }
    }
}
