use proptest::prelude::*;

use super::*;

fn truth() -> LawParams {
    LawParams {
        l0: 2.0,
        a: 5.0,
        b: 8.0,
        c: 40.0,
        alpha: 0.8,
        beta: 0.6,
        gamma: 0.3,
    }
}

fn grid(p: &LawParams, ns: &[f64]) -> Vec<ScalingPoint> {
    let mut out = Vec::new();
    for &d in &[2.0, 3.0, 4.0, 6.0, 8.0] {
        for &w in &[32.0, 48.0, 64.0, 96.0] {
            for &n in ns {
                out.push(ScalingPoint {
                    depth: d,
                    width: w,
                    tokens: n,
                    loss: p.predict(d, w, n),
                });
            }
        }
    }
    out
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn noiseless_fit_recovers_all_seven() {
    let t = truth();
    let f = fit(&grid(&t, &[1e5, 1e6, 1e7]), &FitOptions::default()).unwrap();
    let p = f.params;
    for (got, want) in [
        (p.l0, t.l0),
        (p.a, t.a),
        (p.b, t.b),
        (p.c, t.c),
        (p.alpha, t.alpha),
        (p.beta, t.beta),
        (p.gamma, t.gamma),
    ] {
        assert!(rel(got, want) <= 0.01, "{p:?}");
    }
    assert!(f.residual < 1e-8);
}

#[test]
fn data_free_law_recovers_depth_width_terms() {
    // c = 0: the data term vanishes, the rest must still come back.
    let t = LawParams { c: 0.0, ..truth() };
    let f = fit(&grid(&t, &[1e5, 1e7]), &FitOptions::default()).unwrap();
    let p = f.params;
    for (got, want) in [
        (p.l0, t.l0),
        (p.a, t.a),
        (p.b, t.b),
        (p.alpha, t.alpha),
        (p.beta, t.beta),
    ] {
        assert!(rel(got, want) <= 0.01, "{p:?}");
    }
    assert!(p.c < 1e-3, "{p:?}");
}

#[test]
fn constant_loss_collapses_to_l0() {
    let pts = grid(
        &LawParams {
            a: 0.0,
            b: 0.0,
            c: 0.0,
            ..truth()
        },
        &[1e5, 1e7],
    );
    let f = fit(&pts, &FitOptions::default()).unwrap();
    for d in [2.0, 5.0, 100.0] {
        assert!((f.predict(d, 40.0, 1e6).unwrap() - 2.0).abs() <= 1e-6);
    }
    assert!((f.params.l0 - 2.0).abs() <= 1e-6, "{:?}", f.params);
}

#[test]
fn fixed_n_fit_agrees_with_full_fit() {
    let t = truth();
    let full = fit(&grid(&t, &[1e5, 1e6, 1e7]), &FitOptions::default()).unwrap().params;
    let fixed = fit_fixed_n(&grid(&t, &[1e6]), &FitOptions::default()).unwrap();
    assert_eq!(fixed.method, FitMethod::FixedN);
    let p = fixed.params;
    for (got, want) in [(p.a, full.a), (p.alpha, full.alpha), (p.b, full.b), (p.beta, full.beta)] {
        assert!(rel(got, want) <= 0.02, "{p:?} vs {full:?}");
    }
    // L0 absorbs the data term at that N
    assert!(rel(p.l0, t.l0 + t.c * 1e6f64.powf(-t.gamma)) <= 0.01);
}

#[test]
fn degenerate_grids_rejected() {
    let t = truth();
    let one_depth: Vec<_> = grid(&t, &[1e5, 1e6]).into_iter().filter(|p| p.depth == 2.0).collect();
    assert!(matches!(
        fit(&one_depth, &FitOptions::default()),
        Err(Error::GridCoverage(_))
    ));
    let few: Vec<_> = grid(&t, &[1e5]).into_iter().take(6).collect();
    assert!(matches!(fit(&few, &FitOptions::default()), Err(Error::GridCoverage(_))));
    assert!(matches!(
        fit(&grid(&t, &[1e5]), &FitOptions::default()),
        Err(Error::GridCoverage(_))
    ));
}

#[test]
fn fit_is_deterministic_across_execution_modes() {
    let mut pts = grid(&truth(), &[1e5, 1e7]);
    // a little structured noise so the optimum is not exact
    for (i, p) in pts.iter_mut().enumerate() {
        p.loss *= 1.0 + 0.01 * ((i * 37 % 11) as f64 - 5.0) / 5.0;
    }
    let par = fit(
        &pts,
        &FitOptions {
            exec: Execution::Parallel,
            ..FitOptions::default()
        },
    )
    .unwrap();
    let seq = fit(
        &pts,
        &FitOptions {
            exec: Execution::Sequential,
            ..FitOptions::default()
        },
    )
    .unwrap();
    assert_eq!(par.points, pts);
    assert_eq!(seq.points, pts);
    assert_eq!(par, seq);
    let js = par.to_json().unwrap();
    assert!(js.contains("\"L0\""));
    assert_eq!(ScalingLawFit::from_json(&js).unwrap(), par);
}

#[test]
fn prediction_algebra() {
    let f = ScalingLawFit {
        params: truth(),
        residual: 0.0,
        points: vec![],
        seed: 0,
        method: FitMethod::Full,
    };
    let big = f.predict(1e12, 1e12, 1e30).unwrap();
    assert!((big - 2.0).abs() < 1e-4);
    let p = truth();
    let term = |d: f64| p.a * d.powf(-p.alpha);
    assert!((term(6.0) / term(3.0) - 2f64.powf(-p.alpha)).abs() < 1e-15);
    assert!(f.predict(0.0, 1.0, 1.0).is_err());
    assert!(f.predict(1.0, -1.0, 1.0).is_err());
}

fn law(p: LawParams) -> ScalingLawFit {
    ScalingLawFit {
        params: p,
        residual: 0.0,
        points: vec![],
        seed: 0,
        method: FitMethod::Full,
    }
}

fn toy_latency(d: usize, w: usize) -> Result<f64> {
    Ok(d as f64 * (1.0 + w as f64 / 32.0))
}

fn cells() -> Vec<(usize, usize)> {
    let mut v = Vec::new();
    for d in [2, 4, 6, 8] {
        for w in [32, 48, 64, 96] {
            v.push((d, w));
        }
    }
    v
}

#[test]
fn tight_budget_is_infeasible() {
    let r = sweet_spot(&law(truth()), toy_latency, 1.0, &cells(), 1e6).unwrap();
    assert_eq!(
        r,
        SweetSpotResult::Infeasible {
            budget: 1.0,
            min_latency: 4.0
        }
    );
}

#[test]
fn width_only_law_picks_widest_feasible() {
    let f = law(LawParams { a: 0.0, ..truth() });
    match sweet_spot(&f, toy_latency, 10.0, &cells(), 1e6).unwrap() {
        SweetSpotResult::Feasible(s) => {
            assert_eq!(s.width, 96);
            // latency tie-break then smaller depth
            assert_eq!(s.depth, 2);
            assert!(s.latency <= 10.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn sweet_spot_matches_exhaustive_search() {
    let f = law(truth());
    for budget in [5.0, 9.0, 14.0, 30.0, 100.0] {
        let mut best: Option<(f64, usize, usize)> = None;
        for (d, w) in cells() {
            if toy_latency(d, w).unwrap() <= budget {
                let l = f.params.predict(d as f64, w as f64, 1e6);
                if best.is_none_or(|(b, _, _)| l < b) {
                    best = Some((l, d, w));
                }
            }
        }
        let (_, d, w) = best.unwrap();
        match sweet_spot(&f, toy_latency, budget, &cells(), 1e6).unwrap() {
            SweetSpotResult::Feasible(s) => assert_eq!((s.depth, s.width), (d, w), "budget {budget}"),
            other => panic!("{other:?}"),
        }
    }
}

proptest! {
    #[test]
    fn prediction_decreases_in_each_factor(
        a in 0.1f64..10.0, b in 0.1f64..10.0, c in 0.1f64..10.0,
        al in 0.1f64..2.0, be in 0.1f64..2.0, ga in 0.1f64..2.0,
        d in 1.0f64..50.0, w in 8.0f64..4096.0, n in 1e3f64..1e6,
    ) {
        let p = LawParams { l0: 1.0, a, b, c, alpha: al, beta: be, gamma: ga };
        let base = p.predict(d, w, n);
        prop_assert!(p.predict(d * 1.5, w, n) < base);
        prop_assert!(p.predict(d, w * 1.5, n) < base);
        prop_assert!(p.predict(d, w, n * 1.5) < base);
        prop_assert!(base >= p.l0);
    }

    #[test]
    fn sweet_spot_ignores_grid_order(seed in 0u64..1000, budget in 4.0f64..60.0) {
        let mut g = cells();
        let base = sweet_spot(&law(truth()), toy_latency, budget, &g, 1e6).unwrap();
        // deterministic shuffle
        let n = g.len();
        for i in 0..n {
            let j = (seed as usize * 31 + i * 17) % n;
            g.swap(i, j);
        }
        let shuffled = sweet_spot(&law(truth()), toy_latency, budget, &g, 1e6).unwrap();
        prop_assert_eq!(base, shuffled);
    }
}
