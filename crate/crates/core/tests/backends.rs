//! Cross-checks between the three ways of advancing the same flow.

use coarse1d::config::{BoundarySpec, Configuration};
use coarse1d::flow::stepper::{integrate, StepperOptions};
use coarse1d::flow::{evolve, evolve_until, propagate_exact, FlowOptions, LocalEngine, LocalOptions, Recorder};
use coarse1d::init::{replica_rng, sample_poisson_voronoi, sample_uniform_n};

fn circular_gap(a: &Configuration, b: &Configuration) -> f64 {
    let BoundarySpec::Periodic { length } = a.boundary() else { unreachable!() };
    let (x, y) = (a.positions(), b.positions());
    assert_eq!(x.len(), y.len());
    let n = x.len();
    // A particle may sit on either side of the seam; try small rotations.
    (-2i64..=2)
        .map(|s| {
            (0..n)
                .map(|i| {
                    let d = (x[i] - y[(i as i64 + s).rem_euclid(n as i64) as usize]).abs();
                    d.min(length - d)
                })
                .fold(0.0, f64::max)
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn local_engine_matches_spectral_evolution() {
    for (seed, n) in [(1u64, 600usize), (2, 1500)] {
        let x0 = sample_poisson_voronoi(n, &mut replica_rng(seed, 0)).unwrap();
        let opts = LocalOptions {
            fallback_below: 64,
            ..LocalOptions::default()
        };
        let mut engine = LocalEngine::new(&x0, opts).unwrap();
        let mut a = Recorder::counting(x0.boundary());
        engine.advance_until(0.6, None, &mut a).unwrap();
        let mut b = Recorder::counting(x0.boundary());
        let spectral = evolve(&x0, 0.6, &mut b).unwrap();
        let local = engine.configuration();
        assert_eq!(local.len(), spectral.len(), "n = {n}");
        assert_eq!(a.n_events, b.n_events);
        assert!(a.violations.is_empty() && b.violations.is_empty());
        let err = circular_gap(&local, &spectral);
        assert!(err < 1e-8, "n = {n}: {err:e}");
    }
}

#[test]
fn local_engine_stops_on_count() {
    let x0 = sample_poisson_voronoi(3000, &mut replica_rng(3, 0)).unwrap();
    let mut engine = LocalEngine::new(&x0, LocalOptions::default()).unwrap();
    let mut rec = Recorder::counting(x0.boundary());
    engine.advance_until(50.0, Some(1500), &mut rec).unwrap();
    assert!(engine.len() <= 1500 && engine.len() >= 1490);
    let mut rec2 = Recorder::counting(x0.boundary());
    let spectral = evolve_until(&x0, 50.0, Some(1500), &mut rec2, &FlowOptions::default()).unwrap();
    // The local engine cuts its last step between events, so it stops a
    // little after the merge; flowing the spectral state on must agree.
    assert_eq!(engine.len(), spectral.len());
    assert!(engine.time() >= spectral.time());
    let mut rec3 = Recorder::counting(x0.boundary());
    let caught_up = evolve(&spectral, engine.time(), &mut rec3).unwrap();
    assert_eq!(rec3.n_events, 0);
    assert!(circular_gap(&engine.configuration(), &caught_up) < 1e-8);
    assert!(LocalEngine::new(&Configuration::empty(BoundarySpec::unit_interval()), LocalOptions::default()).is_err());
}

#[test]
fn spectral_flow_matches_the_integrator_on_both_boundaries() {
    let mut rng = replica_rng(4, 0);
    for boundary in [BoundarySpec::unit_interval(), BoundarySpec::Periodic { length: 3.0 }] {
        for n in [2usize, 7, 40, 90] {
            let c = sample_uniform_n(n, boundary, &mut rng).unwrap();
            // Short enough that no gap closes.
            let g = c.gaps().as_slice().iter().copied().fold(f64::INFINITY, f64::min);
            let dt = (g / 10.0).min(0.05);
            let a = propagate_exact(&c, dt).unwrap();
            let raw = integrate(boundary, c.positions(), dt, StepperOptions::default());
            let b = Configuration::from_raw(boundary, raw, dt);
            let b = b.positions();
            let err = a.positions().iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "{boundary:?} n = {n}: {err:e}");
        }
    }
}
