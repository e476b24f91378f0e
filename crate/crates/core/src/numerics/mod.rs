//! Stochastic and diagnostic primitives shared by every other module.

mod beta;
mod gini;
mod gradcheck;
mod rng;
mod special;

pub use beta::{beta_log_pdf, beta_log_pdf_grad, beta_sample, BetaLogPdfGrad, BetaParams, EDGE_EPS};
pub use gini::gini;
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport};
pub use rng::RandomStream;
pub use special::{digamma, ln_beta, ln_gamma, sigmoid, softplus};

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}
