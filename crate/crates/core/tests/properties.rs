mod common;

use common::{c, raw_model};
use num_complex::Complex64;
use proptest::prelude::*;
use spde_lyap::simulate::{path_rng, AmplitudeState, IntegratorConfig, Scheme, Stepper};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn xi_gamma_is_a_complex_square(raw in raw_model(), phi in 0.0..6.3f64,
                                    e in prop::collection::vec(-1.0..1.0f64, 4)) {
        let m = raw.build();
        let eta = vec![c(0.0, 0.0), c(e[0], e[1]), c(e[2], e[3])];
        let psi = m.critical_row(phi, &eta).unwrap();
        let (xi, gamma) = m.eval_xi_gamma(phi, &eta).unwrap();
        let sq: Complex64 = psi.iter().map(|p| p * p).sum();
        let expect = -0.5 * Complex64::from_polar(1.0, -2.0 * phi) * sq;
        let scale: f64 = psi.iter().map(|p| p.norm_sqr()).sum::<f64>().max(1e-300);
        prop_assert!((c(xi, gamma) - expect).norm() <= 1e-12 * scale);
    }

    #[test]
    fn step_is_linear_in_the_state(raw in raw_model(), seed in any::<u64>(), s in -3.0..3.0f64,
                                   x in prop::collection::vec(-1.0..1.0f64, 6),
                                   y in prop::collection::vec(-1.0..1.0f64, 6)) {
        let m = raw.build();
        for scheme in [Scheme::StrangWeak2, Scheme::ExponentialMidpoint, Scheme::ExponentialEuler] {
            let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, 0.3).with_scheme(scheme)).unwrap();
            let mut ws = stepper.workspace();
            stepper.sample_increment(&mut path_rng(seed, 0), &mut ws);
            let mut sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + s * b).collect();
            let (mut xa, mut ya) = (x.clone(), y.clone());
            stepper.step(&mut xa, &mut ws);
            stepper.step(&mut ya, &mut ws);
            stepper.step(&mut sum, &mut ws);
            for i in 0..6 {
                prop_assert!((sum[i] - xa[i] - s * ya[i]).abs() < 1e-12, "{:?}", scheme);
            }
        }
    }

    #[test]
    fn q_depends_only_on_the_direction(raw in raw_model(), scale in 0.01..100.0f64,
                                       x in prop::collection::vec(-1.0..1.0f64, 6)) {
        prop_assume!(x[0].hypot(x[1]) > 1e-3);
        let m = raw.build();
        let stepper = Stepper::new(&m, IntegratorConfig::new(1e-3, 0.3)).unwrap();
        let scaled: Vec<f64> = x.iter().map(|v| v * scale).collect();
        let (q0, q1) = (stepper.q_at(&x), stepper.q_at(&scaled));
        prop_assert!((q0 - q1).abs() <= 1e-12 * (1.0 + q0.abs()));
    }

    #[test]
    fn polar_round_trip(z in (-2.0..2.0f64, -2.0..2.0f64),
                        y in prop::collection::vec(-1.0..1.0f64, 4)) {
        prop_assume!(z.0.hypot(z.1) > 1e-3);
        let s = AmplitudeState::new(c(z.0, z.1), vec![c(y[0], y[1]), c(y[2], y[3])]);
        let back = s.to_polar().to_amplitude();
        let r = back.log_accum.exp();
        prop_assert!((back.z * r - s.z).norm() < 1e-12);
        for (a, b) in back.y.iter().zip(&s.y) {
            prop_assert!((a * r - b).norm() < 1e-12);
        }
        prop_assert!((back.log_radius() - s.log_radius()).abs() < 1e-12);
    }
}
