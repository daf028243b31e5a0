use physrec_core::signal::{decimate, encode_events, fractional_shift, periodogram, Event, EventList, Trace};
use proptest::prelude::*;

fn l1(a: &[f64]) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

proptest! {
    #[test]
    fn periodogram_power_sums_to_mean_square(x in proptest::collection::vec(-10.0f64..10.0, 4..300)) {
        let (_, power) = periodogram(&x, 7.0).unwrap();
        let total: f64 = power.iter().sum();
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        prop_assert!((total - ms).abs() <= 1e-9 * ms.max(1e-300), "{total} vs {ms}");
    }

    #[test]
    fn shift_conserves_mass_without_spill(
        body in proptest::collection::vec(0.0f64..5.0, 1..40),
        s in 0.0f64..10.0,
    ) {
        let mut row = body.clone();
        row.extend(std::iter::repeat_n(0.0, 12));
        let out = fractional_shift(&row, s).unwrap();
        let (a, b): (f64, f64) = (row.iter().sum(), out.iter().sum());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn shift_is_lipschitz_in_s(
        row in proptest::collection::vec(-5.0f64..5.0, 2..50),
        s in 0.0f64..20.0,
        eps in 0.0001f64..0.9999,
    ) {
        prop_assume!(s + eps < row.len() as f64);
        let a = fractional_shift(&row, s).unwrap();
        let b = fractional_shift(&row, s + eps).unwrap();
        let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        prop_assert!(l1(&diff) <= 2.0 * l1(&row) * eps + 1e-12);
    }

    #[test]
    fn decimation_composes(k in 10usize..200, f1 in 1usize..5, f2 in 1usize..5) {
        prop_assume!((k - 1) / (f1 * f2) >= 1);
        let y: Vec<f64> = (0..k).map(|j| j as f64).collect();
        let tr = Trace::unlabeled(0.0, 0.1, vec![y], vec![]).unwrap();
        let twice = decimate(&decimate(&tr, f1).unwrap(), f2).unwrap();
        let once = decimate(&tr, f1 * f2).unwrap();
        prop_assert_eq!(&twice.y, &once.y);
        prop_assert!((twice.dt - once.dt).abs() < 1e-12);
    }

    #[test]
    fn integer_shift_equals_delayed_encoding(
        times in proptest::collection::vec(0usize..60, 1..6),
        mags in proptest::collection::vec(0.1f64..5.0, 6),
        s in 0usize..30,
    ) {
        let (k, dt) = (60usize, 0.25);
        let events: Vec<Event> = times.iter().zip(&mags).map(|(&j, &m)| Event { channel: 0, t: j as f64 * dt, magnitude: m }).collect();
        let ev = EventList::new(events.clone());
        let shifted = fractional_shift(&encode_events(&ev, 1, 0.0, dt, k).unwrap()[0], s as f64).unwrap();
        let kept: Vec<Event> = events
            .iter()
            .filter(|e| ((e.t / dt).round() as usize + s) < k)
            .map(|e| Event { t: e.t + s as f64 * dt, ..*e })
            .collect();
        let direct = encode_events(&EventList::new(kept), 1, 0.0, dt, k).unwrap();
        for (a, b) in shifted.iter().zip(&direct[0]) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
