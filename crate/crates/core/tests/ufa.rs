mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use ufm::rank::warm_start_for;
use ufm::simlab::{adjusted_r2, gen_dgp};
use ufm::ufa::{normalize, ufa_fit};
use ufm::{EstimatorConfig, PanelMatrix, QuantileGrid, UfmError};

use common::rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalization_holds_for_any_factorization(seed in 0u64..10_000, r in 1usize..4, m_count in 1usize..5) {
        let mut g = rng(seed);
        let (n, t) = (9, 11);
        let f = DMatrix::from_fn(t, r, |_, _| rand::Rng::random_range(&mut g, -2.0..2.0));
        let loads: Vec<DMatrix<f64>> = (0..m_count)
            .map(|_| DMatrix::from_fn(n, r, |_, _| rand::Rng::random_range(&mut g, -2.0..2.0)))
            .collect();
        let est = normalize(&loads, &f).unwrap();
        prop_assert!(est.factor_orthonormality_error() < 1e-10);
        let gram = est.loading_gram();
        for j in 0..r {
            for k in 0..r {
                if j != k {
                    prop_assert!(gram[(j, k)].abs() < 1e-9 * (1.0 + gram[(j, j)]));
                }
            }
            if j + 1 < r {
                prop_assert!(gram[(j, j)] >= gram[(j + 1, j + 1)] - 1e-12);
            }
            prop_assert!(est.factors.column(j).sum() >= 0.0);
        }
        for m in 0..m_count {
            let before = &loads[m] * f.transpose();
            let after = est.common_component(m);
            prop_assert!((before - after).amax() < 1e-9 * (1.0 + loads[m].amax() * f.amax()));
        }
    }
}

#[test]
fn recovers_the_factor_space_of_the_simulated_design() {
    let draw = gen_dgp(40, 40, 21).unwrap();
    let grid = QuantileGrid::new(9, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(1);
    let init = warm_start_for(draw.panel.values(), &grid, &config, 1).unwrap();
    let est = ufa_fit(&draw.panel, &grid, &config, &init, None).unwrap();
    assert!(est.diagnostics.converged);
    assert!(est.factor_orthonormality_error() < 1e-10);
    let r2 = adjusted_r2(&draw.true_factor(), &est.factors).unwrap();
    assert!(r2 > 0.85, "adjusted R2 {r2}");
}

#[test]
fn median_of_an_exact_rank_one_panel() {
    let mut g = rng(6);
    let f: Vec<f64> = (0..30).map(|_| rand::Rng::random_range(&mut g, 0.5..1.5)).collect();
    let l: Vec<f64> = (0..30).map(|_| rand::Rng::random_range(&mut g, 0.5..1.5)).collect();
    let y = DMatrix::from_fn(30, 30, |i, t| l[i] * f[t]);
    let panel = PanelMatrix::from_matrix(y.clone()).unwrap();
    let grid = QuantileGrid::new(1, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(1);
    let init = warm_start_for(&y, &grid, &config, 1).unwrap();
    let est = ufa_fit(&panel, &grid, &config, &init, None).unwrap();
    let fit = est.common_component(0);
    let rel = (&fit - &y).norm() / y.norm();
    assert!(rel < 1e-3, "relative error {rel}");
}

#[test]
fn too_many_factors_are_rejected() {
    let draw = gen_dgp(10, 10, 1).unwrap();
    let grid = QuantileGrid::new(3, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(5);
    let init = ufm::FactorEstimate {
        factors: DMatrix::zeros(10, 5),
        loadings: vec![DMatrix::zeros(10, 5); 3],
        eigenvalues: vec![0.0; 5],
        diagnostics: Default::default(),
    };
    assert!(matches!(
        ufa_fit(&draw.panel, &grid, &config, &init, None),
        Err(UfmError::RankTooLarge { .. })
    ));
}
