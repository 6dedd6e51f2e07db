#![allow(clippy::needless_range_loop)]

use bps_core::bps::{self, BpsConfig, Protocol};
use bps_core::dlm::{self, Discounts};
use bps_core::simlab::{self, AgentConfig, DgpConfig};
use bps_core::statdist::{ForecastDensity, RandomStream};

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean of a correlated chain by batch means.
fn batch_se(v: &[f64]) -> f64 {
    let b = 20;
    let size = v.len() / b;
    let means: Vec<f64> = (0..b).map(|i| mean(&v[i * size..(i + 1) * size])).collect();
    let m = mean(&means);
    let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}

fn cfg(burn: usize, kept: usize, warm: usize) -> BpsConfig {
    BpsConfig {
        burn_in: burn,
        kept_draws: kept,
        warm_start_burn: warm,
        ..BpsConfig::default()
    }
}

fn toy_panel(n: usize, seed: u64) -> (Vec<f64>, Vec<Vec<ForecastDensity>>) {
    let mut rng = RandomStream::new(seed, 0);
    let mut y = Vec::with_capacity(n);
    let mut h = Vec::with_capacity(n);
    for _ in 0..n {
        let f1 = 0.1 * rng.standard_normal();
        let f2 = 0.1 * rng.standard_normal();
        y.push(0.02 + 0.6 * f1 + 0.3 * f2 + 0.05 * rng.standard_normal());
        h.push(vec![
            ForecastDensity::new(f1, 0.002, 12.0).unwrap(),
            ForecastDensity::new(f2, 0.004, 8.0).unwrap(),
        ]);
    }
    (y, h)
}

#[test]
fn degenerate_agents_reduce_to_the_dlm_posterior() {
    let (y, h) = toy_panel(40, 5);
    let tight: Vec<Vec<ForecastDensity>> = h
        .iter()
        .map(|row| {
            row.iter()
                .map(|d| ForecastDensity::new(d.location, 1e-12, d.dof).unwrap())
                .collect()
        })
        .collect();
    let c = cfg(50, 4000, 0);
    let draws = bps::gibbs_run(&y, &tight, &c, &mut RandomStream::new(5, 1)).unwrap();

    let regs: Vec<f64> = tight
        .iter()
        .flat_map(|r| [1.0, r[0].location, r[1].location])
        .collect();
    let hist = dlm::filter(&y, &regs, &c.prior(2).unwrap(), c.discounts).unwrap();
    let t = y.len();
    let (m, cs, n) = (
        hist.posterior_mean(t),
        hist.posterior_scale(t),
        hist.posterior_dof(t),
    );
    for i in 0..3 {
        let xs: Vec<f64> = (0..draws.n_draws())
            .map(|k| draws.terminal_theta(k)[i])
            .collect();
        // Given fixed regressors every sweep is an exact independent draw.
        let sd = (cs[i * 3 + i] * n / (n - 2.0)).sqrt();
        let se = sd / (xs.len() as f64).sqrt();
        assert!(
            (mean(&xs) - m[i]).abs() < 3.0 * se,
            "coef {i}: {} vs {}",
            mean(&xs),
            m[i]
        );
        let sample_var =
            xs.iter().map(|x| (x - mean(&xs)).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(
            (sample_var / (sd * sd) - 1.0).abs() < 0.1,
            "coef {i} variance"
        );
    }
    for k in (0..draws.n_draws()).step_by(500) {
        for s in 1..=t {
            for i in 0..2 {
                assert!((draws.x(k, s)[i] - tight[s - 1][i].location).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn constant_target_with_silent_agent_is_learned_by_the_intercept() {
    let n = 60;
    let c0 = 0.7;
    let y = vec![c0; n];
    let h = vec![vec![ForecastDensity::new(0.0, 1e-12, 30.0).unwrap()]; n];
    let c = cfg(200, 2000, 0);
    let draws = bps::gibbs_run(&y, &h, &c, &mut RandomStream::new(9, 1)).unwrap();
    let icpt: Vec<f64> = (0..draws.n_draws())
        .map(|k| draws.terminal_theta(k)[0])
        .collect();
    let se = batch_se(&icpt);
    assert!(
        (mean(&icpt) - c0).abs() < 3.0 * se.max(1e-4),
        "{} vs {c0}",
        mean(&icpt)
    );

    let (point, samples) =
        bps::predict_next(&draws, &h[0], c.discounts, &mut RandomStream::new(9, 2)).unwrap();
    let sd =
        (samples.iter().map(|s| (s - point).powi(2)).sum::<f64>() / samples.len() as f64).sqrt();
    assert!((point - c0).abs() < 3.0 * sd / (samples.len() as f64).sqrt() + 3.0 * se.max(1e-4));
}

#[test]
fn every_kept_draw_is_finite_with_positive_variance() {
    let (y, h) = toy_panel(30, 6);
    let draws = bps::gibbs_run(&y, &h, &cfg(100, 300, 0), &mut RandomStream::new(6, 1)).unwrap();
    for k in 0..draws.n_draws() {
        for t in 1..=y.len() {
            assert!(draws.v(k, t) > 0.0 && draws.v(k, t).is_finite());
            assert!(draws.theta(k, t).iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn predictive_spread_covers_observation_variance() {
    let (y, h) = toy_panel(40, 8);
    let c = cfg(200, 10_000, 0);
    let draws = bps::gibbs_run(&y, &h, &c, &mut RandomStream::new(8, 1)).unwrap();
    let (point, samples) =
        bps::predict_next(&draws, &h[0], c.discounts, &mut RandomStream::new(8, 2)).unwrap();
    let var = samples.iter().map(|s| (s - point).powi(2)).sum::<f64>() / (samples.len() - 1) as f64;
    let mean_v = mean(
        &(0..draws.n_draws())
            .map(|k| draws.terminal_v(k))
            .collect::<Vec<_>>(),
    );
    // The one-step volatility is the terminal one inflated by the beta
    // discount in expectation, so the terminal mean is a lower bound.
    assert!(var >= mean_v, "{var} < {mean_v}");
}

#[test]
fn warm_start_and_full_rerun_agree() {
    let (y, h) = toy_panel(60, 7);
    let c = cfg(300, 2000, 100);
    let first = 45;
    let stream = RandomStream::new(7, 10);
    let warm = bps::sequential_bps(&y, &h, first, &c, Protocol::WarmStart, &stream).unwrap();
    let full = bps::sequential_bps(&y, &h, first, &c, Protocol::FullRerun, &stream).unwrap();
    assert_eq!(warm.points.len(), h.len() - first);
    for (i, t) in (first..h.len()).enumerate() {
        // MC error of each point forecast from an independent reference chain.
        let mut s = RandomStream::new(70, t as u64);
        let draws = bps::gibbs_run(&y[..t], &h[..t], &c, &mut s).unwrap();
        let (_, samples) = bps::predict_next(&draws, &h[t], c.discounts, &mut s).unwrap();
        let se = batch_se(&samples);
        let pooled = (2.0f64).sqrt() * se;
        assert!(
            (warm.points[i] - full.points[i]).abs() < 3.0 * pooled,
            "origin {t}: {} vs {} (s.e. {se})",
            warm.points[i],
            full.points[i]
        );
    }
}

#[test]
fn permuting_agents_permutes_coefficients() {
    let (y, h) = toy_panel(50, 12);
    let swapped: Vec<Vec<ForecastDensity>> = h.iter().map(|r| vec![r[1], r[0]]).collect();
    let c = cfg(300, 4000, 0);
    let a = bps::gibbs_run(&y, &h, &c, &mut RandomStream::new(12, 1)).unwrap();
    let b = bps::gibbs_run(&y, &swapped, &c, &mut RandomStream::new(12, 2)).unwrap();
    let t = y.len();
    let col = |d: &bps::SynthesisDraws, i: usize| -> Vec<f64> {
        (0..d.n_draws()).map(|k| d.theta(k, t)[i]).collect()
    };
    for (ia, ib) in [(0, 0), (1, 2), (2, 1)] {
        let (xa, xb) = (col(&a, ia), col(&b, ib));
        let pooled = (batch_se(&xa).powi(2) + batch_se(&xb).powi(2)).sqrt();
        assert!(
            (mean(&xa) - mean(&xb)).abs() < 3.0 * pooled,
            "coef {ia}: {} vs {}",
            mean(&xa),
            mean(&xb)
        );
    }
}

#[test]
fn intercept_absorbs_agent_bias() {
    let dgp = DgpConfig::default();
    let path = simlab::generate_path(&dgp, &mut RandomStream::new(21, 1)).unwrap();
    let agents = AgentConfig::default();
    let biased = simlab::agent_panel(&path, &agents).unwrap();
    // Same spreads, but centered on the noiseless conditional mean.
    let fair: Vec<Vec<ForecastDensity>> = biased
        .iter()
        .enumerate()
        .map(|(t, row)| {
            let truth = path.a[t]
                + path.theta_dgp[t][0] * path.xi1[t]
                + path.theta_dgp[t][1] * path.xi2[t]
                + path.theta_dgp[t][2] * path.xi3[t];
            row.iter()
                .map(|d| ForecastDensity::new(truth, d.scale, d.dof).unwrap())
                .collect()
        })
        .collect();
    let (start, end) = (25, 175);
    let y = &path.y[start..end];
    let c = cfg(300, 2000, 0);
    let stat = |h: &[Vec<ForecastDensity>], seed: u64| -> (f64, f64) {
        let d = bps::gibbs_run(y, &h[start..end], &c, &mut RandomStream::new(seed, 1)).unwrap();
        // Pooled |posterior mean intercept| per batch of draws.
        let b = 20;
        let size = d.n_draws() / b;
        let per_batch: Vec<f64> = (0..b)
            .map(|i| {
                (1..=y.len())
                    .map(|t| {
                        mean(
                            &(i * size..(i + 1) * size)
                                .map(|k| d.theta(k, t)[0])
                                .collect::<Vec<_>>(),
                        )
                        .abs()
                    })
                    .sum::<f64>()
                    / y.len() as f64
            })
            .collect();
        let m = mean(&per_batch);
        let se =
            (per_batch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((b - 1) * b) as f64).sqrt();
        (m, se)
    };
    let (mb, sb) = stat(&biased, 31);
    let (mf, sf) = stat(&fair, 32);
    assert!(
        mb - mf > 1.645 * (sb * sb + sf * sf).sqrt(),
        "biased {mb} (s.e. {sb}) vs fair {mf} (s.e. {sf})"
    );
}

#[test]
fn discounts_reject_out_of_range() {
    assert!(Discounts::new(0.0, 0.9).is_err());
    assert!(Discounts::new(0.9, 1.1).is_err());
    assert!(Discounts::new(1.0, 1.0).is_ok());
}
