use bps_core::statdist::{kl_normal, RandomStream};
use bps_core::theorylab::{
    self, kl_quadrature, IncrementModel, LevelsPath, Predictive, Shift, StateDynamics,
    ToyModelConfig,
};

#[test]
fn toy_model_closed_form() {
    let cfg = ToyModelConfig::default();
    let g = theorylab::theorem2_gap(&cfg, &mut RandomStream::new(1, 1)).unwrap();
    assert!(
        (g.weights[0] - 1.0).abs() < 0.01 && (g.weights[1] - 1.0).abs() < 0.01,
        "{:?}",
        g.weights
    );
    // Omitting the drift costs mu^2 on top of the unit martingale residual.
    assert!((g.mse_linear - 1.25).abs() < 0.01);
    assert!((g.mse_with_intercept - 1.0).abs() < 0.01);
    assert!((g.gap - 0.25).abs() < 0.01);
}

#[test]
fn matched_drift_and_martingale_cases_have_no_gap() {
    for (mu, mu1, mu2) in [(0.3, 0.1, 0.2), (0.0, 0.0, 0.0)] {
        let cfg = ToyModelConfig {
            mu,
            mu1,
            mu2,
            n_samples: 200_000,
            ..ToyModelConfig::default()
        };
        let g = theorylab::theorem2_gap(&cfg, &mut RandomStream::new(2, 1)).unwrap();
        assert!(
            g.gap.abs() < 3.0 * g.gap_se,
            "gap {} s.e. {}",
            g.gap,
            g.gap_se
        );
        assert!(g.mu_star.abs() < 3.0 * g.mu_star_se);
    }
}

#[test]
fn gap_is_nonnegative_on_random_configs() {
    let mut pick = RandomStream::new(3, 0);
    for i in 0..100 {
        let mut u = || 2.0 * pick.uniform() - 1.0;
        let cfg = ToyModelConfig {
            mu: u(),
            mu1: u(),
            mu2: u(),
            n_samples: 20_000,
            ..ToyModelConfig::default()
        };
        let g = theorylab::theorem2_gap(&cfg, &mut RandomStream::new(3, i + 1)).unwrap();
        assert!(g.gap >= -3.0 * g.gap_se, "{cfg:?}: {g:?}");
    }
}

#[test]
fn independent_target_gets_zero_weights() {
    let mut s = RandomStream::new(4, 0);
    let n = 100_000;
    let dx: Vec<[f64; 2]> = (0..n)
        .map(|_| [s.standard_normal(), s.standard_normal()])
        .collect();
    let dy: Vec<f64> = (0..n).map(|_| s.standard_normal()).collect();
    let w = theorylab::optimal_linear_weights(&dy, &dx).unwrap();
    let se = 1.0 / (n as f64).sqrt();
    assert!(w.iter().all(|v| v.abs() < 4.0 * se), "{w:?}");
}

#[test]
fn quadrature_kl_against_closed_form() {
    let q = Predictive::Normal {
        mean: 1.0,
        var: 1.0,
    };
    assert!((kl_quadrature(0.0, 1.0, &q).unwrap() - 0.5).abs() < 1e-6);
    let self_kl = kl_quadrature(
        0.3,
        0.7,
        &Predictive::Normal {
            mean: 0.3,
            var: 0.7,
        },
    )
    .unwrap();
    assert!(self_kl.abs() < 1e-10);
    let wide = kl_quadrature(
        -2.0,
        0.04,
        &Predictive::Normal {
            mean: 3.0,
            var: 9.0,
        },
    )
    .unwrap();
    assert!((wide - kl_normal(-2.0, 0.04, 3.0, 9.0).unwrap()).abs() < 1e-6);
    assert_eq!(
        kl_quadrature(0.0, 1.0, &Predictive::Improper).unwrap(),
        f64::INFINITY
    );
}

#[test]
fn lemma2_constancy_and_its_stationary_counterexample() {
    let model = IncrementModel::default();
    let shifts = [
        Shift {
            a: 0.0,
            theta: [0.0, 0.0],
        },
        Shift {
            a: 1.0,
            theta: [2.0, -1.0],
        },
        Shift {
            a: -0.5,
            theta: [0.3, 1.5],
        },
    ];
    let s = RandomStream::new(5, 0);
    let rw =
        theorylab::lemma2_constancy(&shifts, StateDynamics::RandomWalk, &model, 500, &s).unwrap();
    assert!(rw.is_constant(3.0), "max z {}", rw.max_z);
    assert!(rw
        .risks
        .iter()
        .all(|r| r.value > 0.0 && r.std_error > 0.0 && r.n_paths == 500));
    let st = theorylab::lemma2_constancy(
        &shifts[..2],
        StateDynamics::Stationary { phi: 0.5 },
        &model,
        500,
        &s,
    )
    .unwrap();
    assert!(!st.is_constant(3.0), "max z {}", st.max_z);

    let single =
        theorylab::lemma2_constancy(&shifts[..1], StateDynamics::RandomWalk, &model, 50, &s)
            .unwrap();
    assert!(single.is_constant(3.0));
}

#[test]
fn flat_prior_limit_on_a_ten_step_path() {
    let path = LevelsPath::simulate(10, &mut RandomStream::new(6, 0));
    let sigmas = [1.0, 10.0, 100.0, 1e4, 1e6];
    let grid = theorylab::default_eval_grid(&path, &sigmas, 2001).unwrap();
    let d = theorylab::corollary2_convergence(&sigmas, &path, &grid).unwrap();
    for w in d[..4].windows(2) {
        assert!(w[1] < w[0], "{d:?}");
    }
    assert!(d[4] < 1e-6);
    assert!(d[4] <= d[3] + 1e-12);
}

#[test]
fn empty_path_gap_is_the_prior_predictive_gap() {
    // No data: the flat-prior predictive is improper, so compare two proper
    // priors against the closed-form prior predictives.
    let mut path = LevelsPath::simulate(0, &mut RandomStream::new(7, 0));
    path.x_next = 0.5;
    assert!(matches!(
        path.predictive(None).unwrap(),
        Predictive::Improper
    ));
    let (s2, w, v) = (4.0, path.state_var, path.noise_var);
    let fvar = (s2 + w) * (1.0 + 0.25) + v;
    match path.predictive(Some(s2)).unwrap() {
        Predictive::Normal { mean, var } => {
            assert!(mean.abs() < 1e-12);
            assert!((var - fvar).abs() < 1e-12 * fvar);
        }
        Predictive::Improper => panic!("proper prior gave improper predictive"),
    }
}
