mod common;

use ufm::inference::{mean_loadings, plugin_covariances, standard_errors, SeTarget};
use ufm::{QuantileGrid, UfmError};

use common::{phi_oracle, random_estimate, random_weights, rng, sigma_f_oracle, sigma_l_oracle, sigma_mean_oracle};

#[test]
fn plug_ins_equal_literal_sums() {
    let mut g = rng(17);
    for (n, t, r, m_count) in [(8, 8, 2, 3), (5, 7, 1, 5), (6, 4, 2, 1), (8, 6, 1, 9)] {
        let est = random_estimate(&mut g, n, t, r, m_count);
        let grid = QuantileGrid::new(m_count, 0.01).unwrap();
        let w = random_weights(&mut g, m_count, n, t);
        let y = nalgebra::DMatrix::from_fn(n, t, |_, _| rand::Rng::random_range(&mut g, -2.0..2.0));
        let ml = mean_loadings(&y, &est).unwrap();
        let covs = plugin_covariances(&est, &grid, &w, Some(&ml)).unwrap();
        let sm = covs.sigma_mean.as_ref().unwrap();
        for j in 0..r {
            for k in 0..r {
                assert!((covs.phi[(j, k)] - phi_oracle(&est, j, k)).abs() <= 1e-12);
                for s in 0..t {
                    let o = sigma_f_oracle(&est, grid.levels(), &w, s, j, k);
                    assert!((covs.sigma_f[s][(j, k)] - o).abs() <= 1e-12, "sigma_f t={s}");
                }
                for m in 0..m_count {
                    for i in 0..n {
                        let o = sigma_l_oracle(&est, grid.levels()[m], &w, m, i, j, k);
                        assert!((covs.sigma_l[m][i][(j, k)] - o).abs() <= 1e-12);
                    }
                }
                for i in 0..n {
                    assert!((sm[i][(j, k)] - sigma_mean_oracle(&y, &est, i, j, k)).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn common_component_se_combines_both_parts() {
    let mut g = rng(3);
    let est = random_estimate(&mut g, 6, 6, 2, 3);
    let grid = QuantileGrid::new(3, 0.01).unwrap();
    let w = random_weights(&mut g, 3, 6, 6);
    let covs = plugin_covariances(&est, &grid, &w, None).unwrap();
    let (m, i, t) = (1, 2, 4);
    let lam = est.loadings[m].row(i).transpose();
    let f = est.factors.row(t).transpose();
    let fv = &covs.phi_inv * &covs.sigma_f[t] * &covs.phi_inv;
    let var = (lam.transpose() * &fv * &lam)[(0, 0)] / 6.0 + (f.transpose() * &covs.sigma_l[m][i] * &f)[(0, 0)] / 6.0;
    let se = standard_errors(&est, &covs, None, SeTarget::Common { m, i, t }).unwrap();
    assert!((se[0] - var.sqrt()).abs() < 1e-14);
    let fse = standard_errors(&est, &covs, None, SeTarget::Factor { t }).unwrap();
    for j in 0..2 {
        assert!((fse[j] - (fv[(j, j)] / 6.0).sqrt()).abs() < 1e-14);
    }
}

#[test]
fn collinear_loadings_are_refused() {
    let mut g = rng(5);
    let mut est = random_estimate(&mut g, 6, 6, 2, 2);
    for l in &mut est.loadings {
        let c0 = l.column(0).clone_owned();
        l.set_column(1, &(c0 * 2.0));
    }
    let grid = QuantileGrid::new(2, 0.01).unwrap();
    let w = random_weights(&mut g, 2, 6, 6);
    assert!(matches!(plugin_covariances(&est, &grid, &w, None), Err(UfmError::SingularPhi(_))));
}
