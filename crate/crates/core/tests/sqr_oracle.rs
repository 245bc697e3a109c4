mod common;

use proptest::prelude::*;
use ufm::kernel::{smoothed_grad, SmoothKernel};
use ufm::sqr::{solve_sqr, sqr_objective, SqrObservation};

use common::{lattice_argmin, random_sqr_instance, rng};

#[test]
fn solver_agrees_with_lattice_search() {
    let kernel = SmoothKernel::order14();
    let mut g = rng(2024);
    for case in 0..6 {
        let r = 1 + case % 2;
        let (obs, _) = random_sqr_instance(&mut g, r, 40);
        let sol = solve_sqr(&obs, &kernel, 0.5, 3.0, &vec![0.0; r], 1e-10, 200).unwrap();
        let (lat, lat_val) = lattice_argmin(&obs, &kernel, 0.5, r, 2.0, 1e-2);
        let dist = sol.theta.iter().zip(&lat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(dist <= 1e-2, "case {case}: solver {:?} lattice {:?}", sol.theta, lat);
        assert!(sqr_objective(&obs, &kernel, 0.5, &sol.theta) <= lat_val + 1e-12);
    }
}

#[test]
fn objective_gradient_matches_differences() {
    let kernel = SmoothKernel::order14();
    let mut g = rng(99);
    for _ in 0..10 {
        let (obs, truth) = random_sqr_instance(&mut g, 2, 30);
        let theta: Vec<f64> = truth.iter().map(|v| v + 0.3).collect();
        let analytic: Vec<f64> = (0..2)
            .map(|j| {
                obs.iter()
                    .map(|o| {
                        let c: f64 = o.x.iter().zip(&theta).map(|(a, b)| a * b).sum();
                        o.weight * smoothed_grad(&kernel, 0.5, o.tau, c, o.y) * o.x[j]
                    })
                    .sum::<f64>()
                    / obs.len() as f64
            })
            .collect();
        let norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
        for j in 0..2 {
            let e = 1e-6;
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += e;
            dn[j] -= e;
            let fd = (sqr_objective(&obs, &kernel, 0.5, &up) - sqr_objective(&obs, &kernel, 0.5, &dn)) / (2.0 * e);
            assert!((fd - analytic[j]).abs() <= 1e-5 * norm, "{fd} vs {}", analytic[j]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn permuting_observations_leaves_the_solution_unchanged(seed in 0u64..1000, rot in 1usize..39) {
        let kernel = SmoothKernel::order14();
        let (obs, _) = random_sqr_instance(&mut rng(seed), 2, 40);
        let mut shuffled: Vec<SqrObservation> = obs.clone();
        shuffled.rotate_left(rot);
        shuffled.reverse();
        let a = solve_sqr(&obs, &kernel, 0.5, 3.0, &[0.0, 0.0], 1e-10, 200).unwrap();
        let b = solve_sqr(&shuffled, &kernel, 0.5, 3.0, &[0.0, 0.0], 1e-10, 200).unwrap();
        prop_assert_eq!(a.theta, b.theta);
    }

    #[test]
    fn solution_stays_in_the_box(seed in 0u64..1000, bound in 0.05f64..2.0) {
        let kernel = SmoothKernel::order14();
        let (obs, _) = random_sqr_instance(&mut rng(seed), 2, 30);
        let sol = solve_sqr(&obs, &kernel, 0.5, bound, &[0.0, 0.0], 1e-9, 200).unwrap();
        prop_assert!(sol.theta.iter().all(|v| v.abs() <= bound));
    }
}
