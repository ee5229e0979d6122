use bjq_core::base_learners::{componentwise_ls_fit, tree_fit, tree_predict, Standardization};
use bjq_core::bj_boost::{
    bj_boost_fit, bj_impute, bj_linear_fit, cv_tune, BoostConfig, InitMode, LearnerKind,
};
use bjq_core::kaplan_meier::km_fit;
use bjq_core::simulation::{gen_single_stage, DgpConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

struct Data {
    x: DMatrix<f64>,
    y: Vec<f64>,
}

fn random_data(seed: u64, n: usize, p: usize) -> Data {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x = DMatrix::from_fn(n, p, |_, _| normal.sample(&mut rng));
    let y = (0..n)
        .map(|i| 5.0 + x.row(i).iter().enumerate().map(|(j, v)| (j as f64 - 1.0) * v).sum::<f64>() + normal.sample(&mut rng))
        .collect();
    Data { x, y }
}

fn row(x: &DMatrix<f64>, i: usize) -> Vec<f64> {
    x.row(i).iter().copied().collect()
}

/// Plain L2 boosting on fully observed targets.
fn l2_boost_oracle(data: &Data, config: &BoostConfig) -> Vec<f64> {
    let z = Standardization::fit(&data.x).apply(&data.x);
    let rows: Vec<Vec<f64>> = (0..z.nrows()).map(|i| row(&z, i)).collect();
    let mean = data.y.iter().sum::<f64>() / data.y.len() as f64;
    let run = |candidates: Option<&[usize]>, selected: &mut Vec<usize>| {
        let mut f = vec![mean; data.y.len()];
        for _ in 0..config.iterations {
            let u: Vec<f64> = data.y.iter().zip(&f).map(|(y, f)| y - f).collect();
            match config.learner {
                LearnerKind::ComponentwiseLs => {
                    let term = componentwise_ls_fit(&z, &u, candidates).unwrap();
                    if !selected.contains(&term.covariate_index) {
                        selected.push(term.covariate_index);
                    }
                    for (fi, r) in f.iter_mut().zip(&rows) {
                        *fi += config.learning_rate * term.predict(r).unwrap();
                    }
                }
                LearnerKind::Tree => {
                    let tree = tree_fit(&z, &u, config.max_depth, config.min_leaf).unwrap();
                    for (fi, r) in f.iter_mut().zip(&rows) {
                        *fi += config.learning_rate * tree_predict(&tree, r).unwrap();
                    }
                }
            }
        }
        f
    };
    let mut selected = Vec::new();
    let first = run(None, &mut selected);
    if config.twin && config.learner == LearnerKind::ComponentwiseLs {
        run(Some(&selected), &mut Vec::new())
    } else {
        first
    }
}

fn ols(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(y);
    xtx.cholesky().unwrap().solve(&xty).iter().copied().collect()
}

#[test]
fn uncensored_imputation_is_identity() {
    for seed in 0..100 {
        let data = random_data(seed, 10 + seed as usize % 50, 3);
        let events = vec![true; data.y.len()];
        let fitted: Vec<f64> = data.y.iter().map(|v| v * 0.5).collect();
        let resid: Vec<f64> = data.y.iter().zip(&fitted).map(|(a, b)| a - b).collect();
        let curve = km_fit(&resid, &events).unwrap();
        assert_eq!(bj_impute(&data.y, &events, &fitted, &curve), data.y);
    }
}

#[test]
fn uncensored_linear_fit_is_ols() {
    for seed in 0..100 {
        let data = random_data(seed, 20 + seed as usize % 80, 1 + seed as usize % 4);
        let events = vec![true; data.y.len()];
        let fit = bj_linear_fit(&data.x, &data.y, &events, 50, 1e-9).unwrap();
        let expected = ols(&data.x, &data.y);
        assert!((fit.model.intercept - expected[0]).abs() < 1e-10);
        for (a, b) in fit.model.coefficients.iter().zip(&expected[1..]) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fit.converged);
        assert!(fit.iterations <= 2);
    }
}

#[test]
fn uncensored_boosting_is_l2_boosting_bitwise() {
    let configs = [
        BoostConfig { iterations: 40, ..BoostConfig::tree() },
        BoostConfig { iterations: 40, twin: false, ..BoostConfig::componentwise() },
        BoostConfig { iterations: 40, ..BoostConfig::componentwise() },
    ];
    for seed in 0..100 {
        let data = random_data(seed, 10 + seed as usize % 60, 1 + seed as usize % 5);
        let events = vec![true; data.y.len()];
        for config in &configs {
            let model = bj_boost_fit(&data.x, &data.y, &events, config).unwrap();
            let oracle = l2_boost_oracle(&data, config);
            for (i, expected) in oracle.iter().enumerate() {
                let got = model.predict(&row(&data.x, i)).unwrap();
                assert_eq!(got.to_bits(), expected.to_bits(), "seed {seed}, row {i}");
            }
        }
    }
}

#[test]
fn long_componentwise_run_reaches_least_squares() {
    let n = 64;
    // Two orthonormal columns.
    let x = DMatrix::from_fn(n, 2, |i, j| {
        let s = if j == 0 { if i % 2 == 0 { 1.0 } else { -1.0 } } else if (i / 2) % 2 == 0 { 1.0 } else { -1.0 };
        s / (n as f64).sqrt()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..n)
        .map(|i| 1.0 + 4.0 * x[(i, 0)] - 2.0 * x[(i, 1)] + rng.random_range(-0.5..0.5))
        .collect();
    let config = BoostConfig { iterations: 2000, learning_rate: 0.1, twin: false, ..BoostConfig::componentwise() };
    let model = bj_boost_fit(&x, &y, &vec![true; n], &config).unwrap();
    let beta = ols(&x, &y);
    for i in 0..n {
        let expected = beta[0] + beta[1] * x[(i, 0)] + beta[2] * x[(i, 1)];
        assert!((model.predict(&row(&x, i)).unwrap() - expected).abs() < 1e-3);
    }
}

#[test]
fn vanishing_step_stays_at_the_mean() {
    let data = random_data(5, 40, 2);
    let config = BoostConfig { iterations: 1, learning_rate: 1e-12, ..BoostConfig::tree() };
    let model = bj_boost_fit(&data.x, &data.y, &[true; 40], &config).unwrap();
    let mean = data.y.iter().sum::<f64>() / 40.0;
    for i in 0..40 {
        assert!((model.predict(&row(&data.x, i)).unwrap() - mean).abs() < 1e-9);
    }
}

#[test]
fn least_squares_start_is_ols() {
    let data = random_data(8, 50, 3);
    let config = BoostConfig { iterations: 1, learning_rate: 1e-15, init_mode: InitMode::LeastSquares, ..BoostConfig::componentwise() };
    let model = bj_boost_fit(&data.x, &data.y, &[true; 50], &config).unwrap();
    let beta = ols(&data.x, &data.y);
    for i in 0..50 {
        let expected = beta[0] + (0..3).map(|j| beta[j + 1] * data.x[(i, j)]).sum::<f64>();
        assert!((model.predict(&row(&data.x, i)).unwrap() - expected).abs() < 1e-9);
    }
}

#[test]
fn intercept_only_fixed_point_matches_grid_scan() {
    let x = DMatrix::<f64>::zeros(3, 0);
    let y = [1.0, 2.0, 3.0];
    let d = [true, false, true];
    let fit = bj_linear_fit(&x, &y, &d, 100, 1e-12).unwrap();

    let step = 1e-4;
    let update = |mu: f64| {
        let fitted = [mu; 3];
        let resid: Vec<f64> = y.iter().map(|v| v - mu).collect();
        let curve = km_fit(&resid, &d).unwrap();
        bj_impute(&y, &d, &fitted, &curve).iter().sum::<f64>() / 3.0
    };
    let fixed = (0..=40_000)
        .map(|k| k as f64 * step)
        .min_by(|a, b| (update(*a) - a).abs().total_cmp(&(update(*b) - b).abs()))
        .unwrap();
    assert!((fit.model.intercept - fixed).abs() <= step);
    assert!((fit.model.intercept - 7.0 / 3.0).abs() < 1e-12);
}

#[test]
fn linear_fit_recovers_coefficients_under_censoring() {
    let truth = [2.0, 1.0, -0.5];
    let n = 500;
    let estimates: Vec<Vec<f64>> = (0..20)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let x = DMatrix::from_fn(n, 2, |_, _| normal.sample(&mut rng));
            let mut y = Vec::with_capacity(n);
            let mut d = Vec::with_capacity(n);
            for i in 0..n {
                let t: f64 = truth[0] + truth[1] * x[(i, 0)] + truth[2] * x[(i, 1)] + normal.sample(&mut rng);
                let c = 3.2 + 1.5 * normal.sample(&mut rng);
                y.push(t.min(c));
                d.push(t <= c);
            }
            let rate = d.iter().filter(|e| !**e).count() as f64 / n as f64;
            assert!((0.2..0.4).contains(&rate), "censoring rate {rate}");
            let fit = bj_linear_fit(&x, &y, &d, 200, 1e-8).unwrap();
            std::iter::once(fit.model.intercept).chain(fit.model.coefficients).collect()
        })
        .collect();
    for j in 0..3 {
        let vals: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let se = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt();
        for v in &vals {
            assert!((v - truth[j]).abs() < 3.0 * se.max(0.02), "coefficient {j}: {v} vs {}", truth[j]);
        }
    }
}

fn trial_matrix(seed: u64, n: usize) -> (DMatrix<f64>, Vec<f64>, Vec<bool>, Vec<f64>) {
    let sim = gen_single_stage(n, seed, &DgpConfig::default()).unwrap();
    let subjects = &sim.dataset.subjects;
    let p = subjects[0].stages[0].history.len();
    let x = DMatrix::from_fn(n, p + 1, |i, j| {
        let rec = &subjects[i].stages[0];
        if j < p { rec.history.values[j] } else { f64::from(rec.treatment.0) }
    });
    let y = subjects.iter().map(|s| s.stages[0].observed_time).collect();
    let d = subjects.iter().map(|s| s.stages[0].event).collect();
    let truth = subjects
        .iter()
        .zip(&sim.oracle)
        .map(|(s, q)| q.iter().find(|(k, _)| k.0[0] == s.stages[0].treatment).map(|(_, v)| *v).unwrap())
        .collect();
    (x, y, d, truth)
}

#[test]
fn trees_beat_componentwise_on_the_interaction_model() {
    let mut tree_wins = 0;
    for seed in 0..20 {
        let (x, y, d, _) = trial_matrix(seed, 500);
        let (xt, _, _, truth) = trial_matrix(1000 + seed, 500);
        let mse = |config: &BoostConfig| {
            let model = bj_boost_fit(&x, &y, &d, config).unwrap();
            (0..xt.nrows())
                .map(|i| (model.predict(&row(&xt, i)).unwrap() - truth[i]).powi(2))
                .sum::<f64>()
                / xt.nrows() as f64
        };
        if mse(&BoostConfig::tree()) < mse(&BoostConfig::componentwise()) {
            tree_wins += 1;
        }
    }
    assert!(tree_wins > 10, "tree won {tree_wins} of 20");
}

#[test]
fn cross_validation_prefers_more_iterations() {
    let grid = [
        BoostConfig { iterations: 50, ..BoostConfig::tree() },
        BoostConfig { iterations: 500, ..BoostConfig::tree() },
    ];
    let mut picks_500 = 0;
    for seed in 0..20 {
        let (x, y, d, _) = trial_matrix(seed, 500);
        if cv_tune(&x, &y, &d, &grid, 5, seed).unwrap().iterations == 500 {
            picks_500 += 1;
        }
    }
    assert!(picks_500 > 10, "M = 500 chosen {picks_500} of 20");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raising_a_censored_value_never_lowers_its_imputation(
        resid in prop::collection::vec(-5.0f64..5.0, 5..40),
        flags in prop::collection::vec(any::<bool>(), 40),
        bump in 0.0f64..3.0,
    ) {
        let events: Vec<bool> = flags[..resid.len()].to_vec();
        let Some(k) = events.iter().position(|e| !e) else { return Ok(()) };
        let fitted = vec![10.0; resid.len()];
        let observed: Vec<f64> = resid.iter().map(|r| r + 10.0).collect();
        let curve = km_fit(&resid, &events).unwrap();
        let base = bj_impute(&observed, &events, &fitted, &curve)[k];
        let mut raised = observed.clone();
        raised[k] += bump;
        let max_jump = *curve.jump_times().last().unwrap();
        prop_assume!(raised[k] - 10.0 < max_jump);
        let after = bj_impute(&raised, &events, &fitted, &curve)[k];
        prop_assert!(after >= base);
        prop_assert!(after >= raised[k]);
    }
}
