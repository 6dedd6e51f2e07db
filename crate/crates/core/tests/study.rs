use bps_core::bps::BpsConfig;
use bps_core::simlab::{self, DgpConfig, Method, StudyConfig};
use bps_core::statdist::{ForecastDensity, RandomStream};

fn quick_study() -> StudyConfig {
    StudyConfig {
        bps: BpsConfig {
            burn_in: 30,
            kept_draws: 40,
            warm_start_burn: 5,
            ..BpsConfig::default()
        },
        ..StudyConfig::default()
    }
}

fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n;
    let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n;
    let cov = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / n;
    (va, vb, cov / (va * vb).sqrt())
}

#[test]
fn dgp_regressor_moments() {
    let cfg = DgpConfig {
        total_after_burn: 100_000,
        ..DgpConfig::default()
    };
    let path = simlab::generate_path(&cfg, &mut RandomStream::new(1, 1)).unwrap();
    assert_eq!(path.len(), 100_000);
    let (v1, v3, corr) = moments(&path.xi1, &path.xi3);
    let expected_corr = cfg.coef13 / (cfg.coef13 * cfg.coef13 + 2.0 / 3.0).sqrt();
    assert!(
        (corr - expected_corr).abs() < 0.01,
        "corr {corr} vs {expected_corr}"
    );
    let expected_v1 = cfg.coef13 * cfg.coef13 * cfg.noise_var + cfg.var1;
    assert!(
        (v1 / expected_v1 - 1.0).abs() < 0.03,
        "var {v1} vs {expected_v1}"
    );
    assert!((v3 / cfg.noise_var - 1.0).abs() < 0.03);
    let (_, _, corr2) = moments(&path.xi2, &path.xi3);
    let expected2 = cfg.coef23 / (cfg.coef23 * cfg.coef23 + 4.0 / 5.0).sqrt();
    assert!((corr2 - expected2).abs() < 0.01);
}

#[test]
fn replication_is_reproducible_and_aligned() {
    let cfg = quick_study();
    let a = simlab::run_replication(3, &cfg, 99).unwrap();
    let b = simlab::run_replication(3, &cfg, 99).unwrap();
    for m in Method::ALL {
        assert_eq!(a.forecast(m), b.forecast(m));
        assert_eq!(a.forecast(m).len(), 300);
    }
    assert_eq!(a.realized.len(), 300);
    assert_eq!(a.bps_coefficients, b.bps_coefficients);
    let other = simlab::run_replication(4, &cfg, 99).unwrap();
    assert_ne!(a.realized, other.realized);
}

#[test]
fn single_replication_report_is_its_own_values() {
    let cfg = quick_study();
    let rep = simlab::run_replication(0, &cfg, 5).unwrap();
    let report = simlab::aggregate(std::slice::from_ref(&rep), &cfg.checkpoints).unwrap();
    for m in Method::ALL {
        for &cp in &cfg.checkpoints {
            assert_eq!(report.msfe(m, cp).unwrap(), rep.msfe(m, cp));
            let r = 100.0 * rep.msfe(Method::Bps, cp) / rep.msfe(m, cp);
            assert!((report.ratio(m, cp).unwrap() - r).abs() < 1e-12);
        }
    }
    let mut csv = Vec::new();
    simlab::write_msfe_report(&report, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
    assert_eq!(
        text.lines().next().unwrap(),
        "method,checkpoint,msfe,ratio_vs_bps_pct"
    );
}

#[test]
fn oracle_agents_give_vanishing_errors() {
    let cfg = quick_study();
    let path = simlab::generate_path(&cfg.dgp, &mut RandomStream::new(8, 1)).unwrap();
    let h: Vec<Vec<ForecastDensity>> = path
        .y
        .iter()
        .map(|&y| vec![ForecastDensity::new(y, 1e-14, 30.0).unwrap(); 2])
        .collect();
    let out = simlab::run_on_panel(0, &path.y, &h, &cfg, &RandomStream::new(8, 2)).unwrap();
    for m in [Method::Ew, Method::Bma, Method::Cp] {
        assert!(out.msfe(m, 300) < 1e-20, "{:?}", m);
    }
    // Versus ~1 for the real agents.
    assert!(
        out.msfe(Method::Bps, 300) < 1e-3,
        "BPS {}",
        out.msfe(Method::Bps, 300)
    );
}

#[test]
fn traces_respect_the_simplex() {
    let cfg = quick_study();
    let rep = simlab::run_replication(1, &cfg, 17).unwrap();
    for w in rep.bma_weights.iter().chain(&rep.cp_weights) {
        assert_eq!(w.len(), 2);
        assert!(w.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let rows = simlab::coefficient_trace(&rep);
    assert_eq!(rows.len(), 300 * (2 + 2 + 3));
    for t in 0..300 {
        for m in [Method::Bma, Method::Cp] {
            let s: f64 = rows
                .iter()
                .filter(|r| r.t == t + 1 && r.method == m)
                .map(|r| r.value)
                .sum();
            assert!((s - 1.0).abs() < 1e-12, "{:?} at {t}: {s}", m);
        }
    }
    let (icpt, coef) = simlab::intercept_prominence(&rep);
    assert!(icpt.is_finite() && coef.is_finite());
}

#[test]
fn study_does_not_depend_on_thread_count() {
    let cfg = quick_study();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simlab::run_study(&cfg, 2024, 3).unwrap())
    };
    let (a, b) = (run(1), run(3));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.rep_id, y.rep_id);
        for m in Method::ALL {
            assert_eq!(x.forecast(m), y.forecast(m));
        }
    }
}
