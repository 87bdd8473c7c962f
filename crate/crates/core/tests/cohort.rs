use fairboard_core::cohort::Resection;
use fairboard_core::lme::run_cohort_suite;
use fairboard_core::metrics::{Metric, MetricRecord, Outcome};
use fairboard_core::stats::bootstrap::bootstrap_gap_ci;
use fairboard_core::stats::rng::rng;
use fairboard_core::synthetic::synthetic_cohort;
use fairboard_core::volume::Compartment;
use rand::Rng as _;
use rand_distr::{Normal, StandardNormal};

#[test]
fn biopsy_deficit_is_detected_with_negative_sign() {
    let cohort = synthetic_cohort(300, 21);
    let mut r = rng(8);
    let wt_dice = Outcome::new(Compartment::WT, Metric::Dice);
    let model_shift: Vec<f64> = (0..5).map(|_| 0.3 * r.sample::<f64, _>(StandardNormal)).collect();
    let mut records = Vec::new();
    for row in &cohort {
        let patient: f64 = 0.6 * r.sample::<f64, _>(StandardNormal);
        let deficit = if row.resection == Some(Resection::Biopsy) { -0.5 } else { 0.0 };
        for (m, shift) in model_shift.iter().enumerate() {
            let mut rec = MetricRecord::empty(row.patient_id.clone(), format!("m{m}"));
            let e: f64 = 0.6 * r.sample::<f64, _>(StandardNormal);
            rec.set(wt_dice, Some(deficit + patient + shift + e));
            records.push(rec);
        }
    }
    let suite = run_cohort_suite(&records, &cohort, 0.05);
    let row = suite
        .coefficients
        .iter()
        .find(|c| c.dv == wt_dice.column() && c.term == "Resection[Biopsy]")
        .unwrap();
    assert!(row.fdr_significant, "{row:?}");
    assert!(row.beta.unwrap() < 0.0);
    let other = suite.coefficients.iter().find(|c| c.dv == wt_dice.column() && c.term == "Sex[M]").unwrap();
    assert!(!other.fdr_significant);
    // the other fifteen outcomes have no data and are reported, not fatal
    assert_eq!(suite.fits.iter().filter(|f| f.fit.is_none()).count(), 15);
}

#[test]
fn bootstrap_interval_covers_true_gap() {
    let na = Normal::new(1.0, 0.1).unwrap();
    let nb = Normal::new(0.0, 0.1).unwrap();
    let mut covered = 0;
    for seed in 0..100 {
        let mut r = rng(seed);
        let a: Vec<f64> = (0..200).map(|_| r.sample(na)).collect();
        let b: Vec<f64> = (0..200).map(|_| r.sample(nb)).collect();
        let ci = bootstrap_gap_ci(&a, &b, 1000, seed + 1000).unwrap();
        if ci.lo <= 1.0 && 1.0 <= ci.hi {
            covered += 1;
        }
    }
    assert!(covered >= 93, "{covered}/100");
}
