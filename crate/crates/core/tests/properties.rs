//! Property tests for invariants of the constants, cut-off, slope fit and Rothe update.

use homog_core::coefficients::{CoefficientSet, SampleGrid};
use homog_core::constants::{compute_constants, sample_norms, EtaChoices};
use homog_core::corrector::{build_cutoff, fit_slope};
use homog_core::mesh::Mesh;
use homog_core::pde::rothe_step;
use proptest::prelude::*;

fn coefficients(m: f64, k: f64, l: f64, g: f64, h: f64) -> CoefficientSet {
    let f = |v: f64| format!("{v:.17e}");
    CoefficientSet::from_entries(
        1,
        [
            ("M.11", f(m)),
            ("E.11", "1".to_string()),
            ("E.22", "1".to_string()),
            ("H.1", f(h)),
            ("K.11", f(k)),
            ("L.11", f(l)),
            ("G.11", f(g)),
        ]
        .iter()
        .map(|(a, b)| (*a, b.as_str())),
    )
    .unwrap()
}

const GRID: SampleGrid = SampleGrid { t_end: 1.0, points_per_axis: 5 };

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn growth_constants_are_non_negative(
        m in 0.5f64..4.0, k in -2.0f64..2.0, l in -3.0f64..3.0, g in -2.0f64..2.0, h in 0.0f64..2.0,
    ) {
        let nb = sample_norms(&coefficients(m, k, l, g, h), &GRID).unwrap();
        let bc = compute_constants(&nb, &EtaChoices::defaults(&nb)).unwrap();
        prop_assert!(bc.lambda >= 0.0);
        prop_assert!(bc.l >= 0.0);
        prop_assert!(bc.mu >= 0.0);
        prop_assert!(bc.m > 0.0 && bc.m <= 1.0);
    }

    #[test]
    fn reaction_scaling(m in 0.5f64..4.0, k in 0.05f64..2.0, l in -3.0f64..3.0, g in 0.1f64..2.0) {
        let nb1 = sample_norms(&coefficients(m, k, l, g, 1.0), &GRID).unwrap();
        let nb2 = sample_norms(&coefficients(m, 2.0 * k, l, g, 1.0), &GRID).unwrap();
        let eta = EtaChoices::defaults(&nb1);
        let (b1, b2) = (compute_constants(&nb1, &eta).unwrap(), compute_constants(&nb2, &eta).unwrap());
        prop_assert!((b2.kappa - 2.0 * b1.kappa).abs() <= 1e-12 * b2.kappa);
        prop_assert!((b2.mu - 4.0 * b1.mu).abs() <= 1e-10 * b2.mu);
    }

    #[test]
    fn cutoff_stays_in_unit_interval(eps in 0.02f64..0.4, mult in 0.1f64..1.2, n in 4usize..20) {
        let mesh = Mesh::unit_square(n).unwrap();
        match build_cutoff(&mesh, eps, mult) {
            Ok(c) => {
                prop_assert!(c.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
                prop_assert!(c.max_scaled_gradient.is_finite());
            }
            Err(_) => prop_assert!(mult * eps >= 0.5),
        }
    }

    #[test]
    fn slope_fit_recovers_power_laws(rate in 0.1f64..3.0, scale in 1e-3f64..1e3) {
        let pts: Vec<(f64, f64)> = [0.5, 0.25, 0.125, 0.0625].iter().map(|&e: &f64| (e, scale * e.powf(rate))).collect();
        let s = fit_slope(&pts, 0.0).slope().unwrap();
        prop_assert!((s - rate).abs() <= 1e-9);
    }

    #[test]
    fn rothe_update_is_linear(
        u1 in prop::collection::vec(-5.0f64..5.0, 6), u2 in prop::collection::vec(-5.0f64..5.0, 6),
        v1 in prop::collection::vec(-5.0f64..5.0, 6), v2 in prop::collection::vec(-5.0f64..5.0, 6),
        dt in 0.001f64..0.5, s in -3.0f64..3.0,
    ) {
        let nodes = [[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]];
        let l = |node: usize| vec![1.0 + node as f64, 0.2, -0.1, 0.5];
        let g = |node: usize| vec![0.3, node as f64, 0.0, 1.0];
        let a = rothe_step(&nodes, 2, &u1, &v1, dt, l, g).unwrap();
        let b = rothe_step(&nodes, 2, &u2, &v2, dt, l, g).unwrap();
        let uc: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| x + s * y).collect();
        let vc: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| x + s * y).collect();
        let c = rothe_step(&nodes, 2, &uc, &vc, dt, l, g).unwrap();
        for i in 0..6 {
            prop_assert!((c[i] - a[i] - s * b[i]).abs() <= 1e-10 * (1.0 + c[i].abs()));
        }
    }
}
