//! Logit link helpers.

pub fn logit(mu: f64) -> f64 {
    (mu / (1.0 - mu)).ln()
}

/// Inverse logit, evaluated without overflow for large |eta|.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}
