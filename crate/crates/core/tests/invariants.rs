use proptest::prelude::*;
use resolvent_core::io::fmt_f64;
use resolvent_core::level_curves::{curve_state, kernel_mass_between, orbit_mass, phase_state_on, CurveState};
use resolvent_core::resolvent_grid::{solve_momentum_resolvent, MomentumGrid};
use resolvent_core::sampling::{momentum_from_offset, offset_from_momentum, sample_post_collision, RandomStream};
use resolvent_core::stats::batch_means;
use resolvent_core::*;

fn lambda() -> impl Strategy<Value = f64> {
    0.01f64..0.99
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn detailed_balance_holds(l in lambda(), p in -40.0f64..40.0, q in -40.0f64..40.0) {
        let scale = (-0.5 * l * p * p).exp() * jump_kernel(l, p, q) + 1e-300;
        prop_assert!(detailed_balance_residual(l, p, q).abs() <= 1e-12 * scale.max(1e-300) + 1e-300);
    }

    #[test]
    fn kernel_is_dominated_by_the_flat_kernel(l in lambda(), p in -20.0f64..20.0, q in -20.0f64..20.0) {
        let bound = (1.0 + l) * (0.25 * l * (p * p - q * q)).exp() * jump_kernel(0.0, p, q);
        prop_assert!(db_inequality_margin(l, p, q) >= -1e-12 * bound.max(1.0));
    }

    #[test]
    fn kernel_mass_matches_escape_rate(l in lambda(), p in -30.0f64..30.0) {
        let total = kernel_mass_between(l, p, -1e3, 1e3);
        let rate = escape_rate(l, p);
        prop_assert!((total - rate).abs() <= 1e-10 * rate);
        let split = kernel_mass_between(l, p, -1e3, p) + kernel_mass_between(l, p, p, 1e3);
        prop_assert!((split - rate).abs() <= 1e-10 * rate);
    }

    #[test]
    fn escape_rate_is_even_and_increasing(l in lambda(), p in 0.0f64..50.0, dp in 0.01f64..5.0) {
        prop_assert_eq!(escape_rate(l, p), escape_rate(l, -p));
        prop_assert!(escape_rate(l, p + dp) > escape_rate(l, p));
        prop_assert!(escape_rate(l, p) >= 8.0 / (1.0 + l) - 1e-12);
    }

    #[test]
    fn substitution_is_an_involution(l in lambda(), p in -50.0f64..50.0, u in -10.0f64..10.0) {
        let q = momentum_from_offset(l, p, u);
        prop_assert!((offset_from_momentum(l, p, q) - u).abs() <= 1e-12 * (1.0 + u.abs() + p.abs()));
    }

    #[test]
    fn sampler_is_deterministic_per_stream(l in lambda(), p in -20.0f64..20.0, seed in any::<u64>(), id in 0u64..1000) {
        let a = sample_post_collision(l, p, &mut RandomStream::new(seed, id)).unwrap();
        let b = sample_post_collision(l, p, &mut RandomStream::new(seed, id)).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(a.is_finite());
    }

    #[test]
    fn wrap_lands_in_unit_interval(x in -1e6f64..1e6) {
        let w = wrap(x);
        prop_assert!((0.0..1.0).contains(&w));
        prop_assert!(((x - w) - (x - w).round()).abs() < 1e-6);
    }

    #[test]
    fn revolving_orbits_round_trip(x in 0.0f64..1.0, p in prop_oneof![-30.0f64..-2.0, 2.0f64..30.0]) {
        let params = ModelParams::new(0.5, Potential::cosine(1.0).unwrap()).unwrap();
        let s = PhaseState::new(x, p);
        let g = curve_state(&s, &params).unwrap();
        prop_assert!((hamiltonian(&s, &params.potential) - g.energy()).abs() <= 1e-12 * g.energy());
        let back = phase_state_on(&g, x, &params).unwrap();
        prop_assert!((back.p - p).abs() <= 1e-10 * p.abs());
    }

    #[test]
    fn fmt_f64_round_trips(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        prop_assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn batch_means_of_constant_has_no_spread(c in -1e3f64..1e3, n in 64usize..512) {
        let (mean, se) = batch_means(&vec![c; n], 32);
        prop_assert!((mean - c).abs() <= 1e-12 * (1.0 + c.abs()));
        prop_assert!(se.abs() <= 1e-9 * (1.0 + c.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn resolvent_is_linear_and_monotone(l in 0.2f64..0.9, lo in -3.0f64..0.0, w in 0.5f64..3.0, c in 0.1f64..5.0) {
        let h = Modulator::standard(&ModelParams::new(l, Potential::zero()).unwrap());
        let narrow = Payoff::IndicatorBand { lo, hi: lo + w };
        let wide = Payoff::IndicatorBand { lo: lo - 1.0, hi: lo + w + 1.0 };
        let grid = MomentumGrid::for_problem(l, &h, &[narrow.clone(), wide.clone(), Payoff::Constant(c)]).unwrap();
        let un = solve_momentum_resolvent(l, &h, &narrow, &grid).unwrap();
        let uw = solve_momentum_resolvent(l, &h, &wide, &grid).unwrap();
        let uc = solve_momentum_resolvent(l, &h, &Payoff::Constant(c), &grid).unwrap();
        let u1 = solve_momentum_resolvent(l, &h, &Payoff::Constant(1.0), &grid).unwrap();
        for p in [-4.0, -1.0, 0.0, 0.7, 2.5, 6.0] {
            let (n, wv) = (un.eval(0, p), uw.eval(0, p));
            prop_assert!(n >= -1e-12 && n <= wv + 1e-10);
            prop_assert!((uc.eval(0, p) - c * u1.eval(0, p)).abs() <= 1e-9 * c);
            prop_assert!(u1.eval(0, p) >= wv - 1e-10);
        }
    }

    #[test]
    fn orbit_mass_is_positive_and_shrinks_with_energy(r in 1.6f64..10.0, dr in 0.5f64..5.0) {
        let params = ModelParams::new(0.5, Potential::cosine(1.0).unwrap()).unwrap();
        let a = orbit_mass(&CurveState::new(r, 1), &params).unwrap();
        let b = orbit_mass(&CurveState::new(r + dr, 1), &params).unwrap();
        prop_assert!(a > 0.0 && b > 0.0 && b < a);
    }
}
