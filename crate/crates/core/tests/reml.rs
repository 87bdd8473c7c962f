mod support;

use fairboard_core::lme::*;
use nalgebra::DMatrix;

fn fit(d: &support::CrossedData, with_age: bool) -> LmeFit {
    let n = d.y.len();
    let (x, names) = if with_age {
        (
            DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { d.age[i] }),
            vec!["Intercept".to_string(), "Age".to_string()],
        )
    } else {
        (DMatrix::from_element(n, 1, 1.0), vec!["Intercept".to_string()])
    };
    fit_crossed_lme(&d.y, &x, &names, &d.patients, &d.models).unwrap()
}

#[test]
fn balanced_design_matches_anova_estimates() {
    // balanced crossed REML equals the expected-mean-squares solution when
    // that solution is interior
    for seed in 0..3 {
        let d = support::crossed_design(seed, 40, 6, [1.0, 0.5, 0.3], 0.0);
        let f = fit(&d, false);
        let (vp, vm, ve) = support::anova_components(&d.y, 40, 6);
        assert!(vp > 0.0 && vm > 0.0);
        for (got, want) in [(f.var_patient, vp), (f.var_model, vm), (f.var_resid, ve)] {
            assert!((got - want).abs() < 1e-4 * want.max(0.1), "seed {seed}: {got} vs {want}");
        }
    }
}

#[test]
fn recovers_components_at_full_scale() {
    for seed in 0..2 {
        let d = support::crossed_design(1000 + seed, 500, 18, [1.0, 0.25, 0.25], 0.3);
        let f = fit(&d, true);
        assert!(f.converged, "{:?}", (f.var_patient, f.var_model, f.var_resid, f.trace.len()));
        for (got, want) in [(f.var_patient, 1.0), (f.var_model, 0.25), (f.var_resid, 0.25)] {
            assert!((got / want - 1.0).abs() <= 0.10, "seed {seed}: {got} vs {want}");
        }
        assert!((f.coefficient("Age").unwrap().0 - 0.3).abs() <= 0.05);
        let x = DMatrix::from_fn(d.y.len(), 2, |i, j| if j == 0 { 1.0 } else { d.age[i] });
        assert_eq!((f.icc_patient, f.icc_model), icc(f.var_patient, f.var_model, f.var_resid));
        assert_eq!(
            (f.r2_marginal, f.r2_conditional),
            r2_nakagawa(&x, &f.beta, f.var_patient, f.var_model, f.var_resid)
        );
        assert!(f.r2_marginal <= f.r2_conditional);
    }
}

#[test]
fn trace_is_monotone() {
    let d = support::crossed_design(9, 60, 5, [0.5, 0.2, 0.4], 0.1);
    let f = fit(&d, true);
    assert!(f.trace.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*f.trace.last().unwrap(), f.reml_loglik);
}
