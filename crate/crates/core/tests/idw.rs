mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use ufm::idw::{
    crossfit_estimates, fpdf_derivative, quadrant_weights_from_source, raw_weights, split_panel, WeightTensor,
};
use ufm::panel::Stencil;
use ufm::rank::warm_start_for;
use ufm::simlab::gen_dgp;
use ufm::ufa::ufa_fit;
use ufm::{EstimatorConfig, QuantileGrid};

use common::{rng, TracingPanel};

fn stencil_values(stencil: Stencil, h: f64, x: f64, f: impl Fn(f64) -> f64) -> Vec<Vec<f64>> {
    stencil.offsets().iter().map(|&k| vec![f(x + k as f64 * h)]).collect()
}

fn fpdf_at(stencil: Stencil, h: f64, x: f64, f: impl Fn(f64) -> f64) -> f64 {
    let vals = stencil_values(stencil, h, x, f);
    let refs: Vec<&[f64]> = vals.iter().map(Vec::as_slice).collect();
    fpdf_derivative(&refs, h, stencil)[0]
}

#[test]
fn five_point_quotients_are_fourth_order() {
    for stencil in [Stencil::Central, Stencil::Forward, Stencil::Backward] {
        let hs = [0.04, 0.02, 0.01];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| (fpdf_at(stencil, h, 0.5, |x| x.powi(5)) - 5.0 * 0.5f64.powi(4)).abs())
            .collect();
        for w in 0..2 {
            let slope = (errs[w] / errs[w + 1]).ln() / (hs[w] / hs[w + 1]).ln();
            assert!((slope - 4.0).abs() <= 0.2, "{stencil:?}: slope {slope}");
        }
        for deg in 0..=4 {
            let d = fpdf_at(stencil, 0.04, 0.5, |x| x.powi(deg));
            let exact = if deg == 0 { 0.0 } else { deg as f64 * 0.5f64.powi(deg - 1) };
            assert!((d - exact).abs() <= 1e-10, "{stencil:?} degree {deg}: {d} vs {exact}");
        }
    }
}

#[test]
fn quadrant_weights_never_read_their_own_quadrant() {
    let draw = gen_dgp(8, 8, 31).unwrap();
    let grid = QuantileGrid::new(3, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(1);
    let split = split_panel(&draw.panel).unwrap();
    let crossfit = crossfit_estimates(&draw.panel, &grid, &config, &split).unwrap();
    let full = raw_weights(&crossfit, &grid, 8, 8);
    for a in 1..=2 {
        for b in 1..=2 {
            let tracer = TracingPanel::new(draw.panel.values().clone());
            let blocks = quadrant_weights_from_source(&tracer, &grid, &config, &split, a, b).unwrap();
            assert!(tracer.reads() > 0);
            for &i in split.rows(a) {
                for &t in split.cols(b) {
                    assert!(!tracer.was_read(i, t), "quadrant ({a},{b}) read its own cell ({i},{t})");
                }
            }
            for (m, blk) in blocks.iter().enumerate() {
                for (p, &i) in split.rows(a).iter().enumerate() {
                    for (q, &t) in split.cols(b).iter().enumerate() {
                        assert_eq!(blk[(p, q)], full[(m * 8 + i) * 8 + t]);
                    }
                }
            }
        }
    }
}

#[test]
fn weighted_fit_ignores_the_weight_scale() {
    let draw = gen_dgp(24, 24, 8).unwrap();
    let grid = QuantileGrid::new(5, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(1);
    let init = warm_start_for(draw.panel.values(), &grid, &config, 1).unwrap();
    let mut g = rng(4);
    let w: Vec<f64> = (0..5 * 24 * 24).map(|_| rand::Rng::random_range(&mut g, 0.5..2.0)).collect();
    let base = WeightTensor::from_values(5, 24, 24, w).unwrap();
    let a = ufa_fit(&draw.panel, &grid, &config, &init, Some(&base)).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let b = ufa_fit(&draw.panel, &grid, &config, &init, Some(&base.scaled(c))).unwrap();
        let diff = (&a.factors - &b.factors).amax();
        assert!(diff < 1e-8, "scale {c}: factor change {diff}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_weights_respect_their_bounds(raw in prop::collection::vec(-5.0f64..50.0, 16)) {
        let (w, _) = WeightTensor::from_raw(1, 4, 4, raw).unwrap();
        prop_assert!(w.values().iter().all(|&v| v >= w.clip_lo && v <= w.clip_hi));
        prop_assert!(w.values().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn linear_paths_have_exact_slopes(a in -3.0f64..3.0, b in -3.0f64..3.0) {
        for stencil in [Stencil::Central, Stencil::Forward, Stencil::Backward] {
            let d = fpdf_at(stencil, 0.04, 0.5, |x| a + b * x);
            prop_assert!((d - b).abs() < 1e-10);
        }
    }
}

#[test]
fn unit_weights_reproduce_the_unweighted_fit() {
    let draw = gen_dgp(20, 20, 12).unwrap();
    let grid = QuantileGrid::new(5, 0.04).unwrap();
    let config = EstimatorConfig::default().with_rank(1);
    let init = warm_start_for(draw.panel.values(), &grid, &config, 1).unwrap();
    let a = ufa_fit(&draw.panel, &grid, &config, &init, None).unwrap();
    let ones = WeightTensor::ones(5, 20, 20);
    let b = ufa_fit(&draw.panel, &grid, &config, &init, Some(&ones)).unwrap();
    let d: DMatrix<f64> = &a.factors - &b.factors;
    assert!(d.amax() < 1e-12);
}
