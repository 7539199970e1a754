use std::path::Path;

use proptest::prelude::*;

use snapchain::dynamics::{integrate, ChainConfig, ChainState, IntegrateOptions, RateSchedule, Segment, StopCondition};
use snapchain::equilibria::{enumerate_equilibria, Stability};
use snapchain::io::{parse_config, RunConfig};
use snapchain::planner::StateLabel;
use snapchain::profiles::{compose_series_spring, trilinear_from_critical, CriticalPoints, ForceProfile, Phase};

/// Ordered trilinear chain: element i+1 has a higher `f_max` and a lower
/// `f_min` than element i.
fn chain_strategy(max_n: usize) -> impl Strategy<Value = ChainConfig> {
    (1..=max_n, 0.5f64..3.0, 0.01f64..0.1, 0.3f64..2.0, 0.005f64..0.05).prop_map(|(n, f0, step, k1, c)| {
        let els = (0..n)
            .map(|i| {
                let fmax = f0 * (1.0 + step * i as f64);
                let fmin = 0.4 * f0 * (1.0 - step * i as f64);
                let cp = CriticalPoints::new(3.0, fmax, 6.0, fmin).unwrap();
                trilinear_from_critical(cp, k1).unwrap()
            })
            .collect();
        ChainConfig::new(els, c, "generated").unwrap()
    })
}

fn phase() -> impl Strategy<Value = Phase> {
    prop_oneof![Just(Phase::Zero), Just(Phase::Spinodal), Just(Phase::One)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn series_spring_keeps_force_and_shifts_strain(
        fmax in 0.5f64..5.0, drop in 0.1f64..0.9, k1 in 0.2f64..3.0, extra in 1.05f64..4.0, x in -1.0f64..12.0,
    ) {
        let cp = CriticalPoints::new(2.0, fmax, 5.0, fmax * (1.0 - drop)).unwrap();
        let base = trilinear_from_critical(cp, k1).unwrap();
        let (_, ks, _) = base.trilinear_stiffnesses().unwrap();
        let kl = -ks * extra;
        let composite = compose_series_spring(&base, kl).unwrap();
        let f = base.force(x).unwrap();
        let g = composite.force(x + f / kl).unwrap();
        prop_assert!((f - g).abs() < 1e-9 * f.abs().max(1.0));
        let c = composite.critical_points();
        prop_assert_eq!(c.f_max, cp.f_max);
        prop_assert_eq!(c.f_min, cp.f_min);
    }

    #[test]
    fn soft_series_spring_is_rejected(fmax in 0.5f64..5.0, drop in 0.1f64..0.9, k1 in 0.2f64..3.0, frac in 0.05f64..1.0) {
        let cp = CriticalPoints::new(2.0, fmax, 5.0, fmax * (1.0 - drop)).unwrap();
        let base = trilinear_from_critical(cp, k1).unwrap();
        let (_, ks, _) = base.trilinear_stiffnesses().unwrap();
        prop_assert!(compose_series_spring(&base, -ks * frac).is_err());
    }

    #[test]
    fn length_follows_input(cfg in chain_strategy(4), rates in prop::collection::vec(-40.0f64..40.0, 1..5), dt in 0.05f64..0.4) {
        let segs = rates.iter().map(|&v| Segment::new(v, StopCondition::Duration { seconds: dt })).collect();
        let start = ChainState::at_rest(&cfg);
        let tr = integrate(&cfg, &start, &RateSchedule::new(segs), &IntegrateOptions::default()).unwrap();
        for s in &tr.samples {
            let input: f64 = tr.segments.iter().map(|g| g.v * (s.t.min(g.t_end) - g.t_start).max(0.0)).sum();
            prop_assert!((s.eps.iter().sum::<f64>() - input).abs() < 1e-6);
            prop_assert!((s.length - input).abs() < 1e-6);
        }
    }

    #[test]
    fn equilibria_balance_force(cfg in chain_strategy(4), frac in 0.05f64..1.2) {
        let l = frac * 7.0 * cfg.len() as f64;
        for p in enumerate_equilibria(&cfg, l) {
            prop_assert!((p.length() - l).abs() < 1e-8);
            for (i, e) in p.eps.iter().enumerate() {
                prop_assert!((cfg.element(i).force(*e).unwrap() - p.force).abs() < 1e-8);
            }
            let spinodal = p.phases.iter().filter(|&&ph| ph == Phase::Spinodal).count();
            if spinodal == 0 {
                prop_assert_eq!(p.stability, Stability::Stable);
            }
            if spinodal >= 2 {
                prop_assert_eq!(p.stability, Stability::Unstable);
            }
        }
    }

    #[test]
    fn labels_round_trip(phases in prop::collection::vec(phase(), 1..8)) {
        let label = StateLabel(phases);
        let text = label.to_string();
        prop_assert_eq!(text.parse::<StateLabel>().unwrap(), label.clone());
        prop_assert_eq!(format!("({text})").parse::<StateLabel>().unwrap(), label);
    }

    #[test]
    fn config_json_round_trips(cfg in chain_strategy(5), seed in any::<u64>()) {
        let mut rc = RunConfig::from_chain(cfg);
        rc.seed = seed;
        let text = rc.to_json().unwrap();
        let back = parse_config(&text, "generated", Path::new(".")).unwrap();
        prop_assert_eq!(back.to_json().unwrap(), text);
        prop_assert_eq!(back.chain, rc.chain);
    }
}

#[test]
fn trilinear_profile_is_continuous_at_critical_points() {
    let cp = CriticalPoints::new(4.0, 2.0, 7.0, 0.5).unwrap();
    let p: ForceProfile = trilinear_from_critical(cp, 0.5).unwrap();
    for (e, f) in [(4.0, 2.0), (7.0, 0.5)] {
        for d in [-1e-9, 1e-9] {
            assert!((p.force(e + d).unwrap() - f).abs() < 1e-8);
        }
    }
}
