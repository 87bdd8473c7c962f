use super::descriptive::{mean, variance_sample};

/// Cohen's d with the (n-1)-weighted pooled sd. `None` when either group has
/// fewer than two values or the pooled sd is zero.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * variance_sample(a) + (nb - 1.0) * variance_sample(b)) / (na + nb - 2.0)).sqrt();
    if !(pooled > 0.0) {
        return None;
    }
    Some((mean(a) - mean(b)) / pooled)
}
