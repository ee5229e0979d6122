use bjq_core::cox_baseline::{cox_fit, cox_fit_traced, cox_rmst, CoxError};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};

fn two_group(seed: u64, n: usize) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, 1, |i, _| (i % 2) as f64);
    let t = (0..n)
        .map(|i| Exp::new(0.5 * 2f64.powf(x[(i, 0)])).unwrap().sample(&mut rng))
        .collect();
    (x, t)
}

fn nondecreasing(path: &[f64]) -> bool {
    path.windows(2).all(|w| w[1] >= w[0])
}

#[test]
fn hazard_ratio_two_is_recovered() {
    let mut estimates: Vec<f64> = (0..20)
        .map(|seed| {
            let (x, t) = two_group(seed, 2000);
            let (model, trace) = cox_fit_traced(&x, &t, &vec![true; 2000]).unwrap();
            assert!(nondecreasing(&trace.log_likelihood));
            model.raw_coefficients()[0]
        })
        .collect();
    estimates.sort_by(f64::total_cmp);
    let median = 0.5 * (estimates[9] + estimates[10]);
    assert!((median - 2f64.ln()).abs() < 0.1, "median log hazard ratio {median}");
}

#[test]
fn null_effect_is_within_three_standard_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let n = 1500;
    let x = DMatrix::from_fn(n, 1, |_, _| normal.sample(&mut rng));
    let t: Vec<f64> = (0..n).map(|_| Exp::new(1.0).unwrap().sample(&mut rng)).collect();
    let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let (model, trace) = cox_fit_traced(&x, &t, &d).unwrap();
    assert!(nondecreasing(&trace.log_likelihood));
    assert!(model.coefficients[0].abs() < 3.0 * trace.standard_errors[0]);
}

#[test]
fn coefficients_are_invariant_to_affine_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let normal = Normal::<f64>::new(0.0, 1.0).unwrap();
    let n = 400;
    let x = DMatrix::from_fn(n, 2, |_, _| normal.sample(&mut rng));
    let t: Vec<f64> = (0..n)
        .map(|i| Exp::new((0.5 * x[(i, 0)] - 0.3 * x[(i, 1)]).exp()).unwrap().sample(&mut rng))
        .collect();
    let d = vec![true; n];
    let scaled = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 3.0 * x[(i, j)] + 7.0 } else { x[(i, j)] - 2.0 });
    let a = cox_fit(&x, &t, &d).unwrap();
    let b = cox_fit(&scaled, &t, &d).unwrap();
    for (u, v) in a.coefficients.iter().zip(&b.coefficients) {
        assert!((u - v).abs() < 1e-6);
    }
    let row = [0.4, -1.1];
    let row_scaled = [3.0 * 0.4 + 7.0, -1.1 - 2.0];
    let h = a.train_horizon;
    assert!((cox_rmst(&a, &row, h).unwrap() - cox_rmst(&b, &row_scaled, h).unwrap()).abs() < 1e-6);
}

#[test]
fn rmst_orders_subjects_by_risk() {
    let (x, t) = two_group(3, 600);
    let model = cox_fit(&x, &t, &vec![true; 600]).unwrap();
    let h = model.train_horizon;
    let low = cox_rmst(&model, &[0.0], h).unwrap();
    let high = cox_rmst(&model, &[1.0], h).unwrap();
    assert!(high < low);
    assert!(low <= h && high >= 0.0);
}

#[test]
fn separated_groups_are_reported() {
    let x = DMatrix::from_fn(10, 1, |i, _| if i < 5 { 1.0 } else { 0.0 });
    let t: Vec<f64> = (1..=10).map(f64::from).collect();
    assert!(matches!(cox_fit(&x, &t, &[true; 10]), Err(CoxError::Separation { .. })));
}
