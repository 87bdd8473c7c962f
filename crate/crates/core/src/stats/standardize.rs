use crate::error::{Error, Result};

/// Z-score to mean 0 and population sd 1.
pub fn zscore(values: &[f64]) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::TooFewValues {
            needed: 2,
            got: values.len(),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if !(sd > 0.0) || sd <= f64::EPSILON * mean.abs() {
        return Err(Error::ZeroVariance);
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Z-score the present entries; missing ones pass through untouched.
pub fn zscore_opt(values: &[Option<f64>]) -> Result<Vec<Option<f64>>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let z = zscore(&present)?;
    let mut it = z.into_iter();
    Ok(values
        .iter()
        .map(|v| v.map(|_| it.next().expect("one z per present value")))
        .collect())
}
