use super::rng::RandomStream;
use super::special::{digamma, ln_beta};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Latent draws are kept this far from the endpoints of (0, 1).
pub const EDGE_EPS: f64 = 1e-6;

/// Shape parameters of a Beta distribution, both strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    alpha: f64,
    beta: f64,
}

impl BetaParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(Error::domain(format!(
                "beta parameters must be finite, got ({alpha}, {beta})"
            )));
        }
        if alpha <= 0.0 || beta <= 0.0 {
            return Err(Error::domain(format!(
                "beta parameters must be positive, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn variance(&self) -> f64 {
        let s = self.alpha + self.beta;
        self.alpha * self.beta / (s * s * (s + 1.0))
    }

    pub fn concentration(&self) -> f64 {
        self.alpha + self.beta
    }
}

/// Partial derivatives of `ln Beta(a; alpha, beta)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BetaLogPdfGrad {
    pub d_alpha: f64,
    pub d_beta: f64,
    pub d_a: f64,
}

/// Natural log of a Gamma(shape, 1) variate via Marsaglia–Tsang. Shapes below
/// one use the `U^(1/shape)` boost, evaluated in log space so tiny shapes do
/// not underflow.
fn ln_gamma_variate(shape: f64, rng: &mut RandomStream) -> f64 {
    if shape < 1.0 {
        let boost = rng.uniform_open().ln() / shape;
        return ln_gamma_variate(shape + 1.0, rng) + boost;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x = rng.standard_normal();
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u = rng.uniform_open();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d.ln() + v.ln();
        }
    }
}

/// One draw from `Beta(alpha, beta)` as the ratio `X / (X + Y)` of two Gamma
/// variates, kept within `[EDGE_EPS, 1 - EDGE_EPS]`.
pub fn beta_sample(params: BetaParams, rng: &mut RandomStream) -> f64 {
    let ln_x = ln_gamma_variate(params.alpha, rng);
    let ln_y = ln_gamma_variate(params.beta, rng);
    // x / (x + y) = sigmoid(ln x - ln y)
    let a = crate::numerics::sigmoid(ln_x - ln_y);
    a.clamp(EDGE_EPS, 1.0 - EDGE_EPS)
}

fn check_unit_open(a: f64) -> Result<()> {
    if a > 0.0 && a < 1.0 {
        Ok(())
    } else {
        Err(Error::domain(format!(
            "beta support is the open interval (0, 1), got {a}"
        )))
    }
}

pub fn beta_log_pdf(a: f64, params: BetaParams) -> Result<f64> {
    check_unit_open(a)?;
    let BetaParams { alpha, beta } = params;
    Ok((alpha - 1.0) * a.ln() + (beta - 1.0) * (-a).ln_1p() - ln_beta(alpha, beta))
}

pub fn beta_log_pdf_grad(a: f64, params: BetaParams) -> Result<BetaLogPdfGrad> {
    check_unit_open(a)?;
    let BetaParams { alpha, beta } = params;
    let psi_sum = digamma(alpha + beta);
    Ok(BetaLogPdfGrad {
        d_alpha: a.ln() - digamma(alpha) + psi_sum,
        d_beta: (-a).ln_1p() - digamma(beta) + psi_sum,
        d_a: (alpha - 1.0) / a - (beta - 1.0) / (1.0 - a),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bp(a: f64, b: f64) -> BetaParams {
        BetaParams::new(a, b).unwrap()
    }

    fn moments(params: BetaParams, seed: u64, n: usize) -> (f64, f64) {
        let mut rng = RandomStream::new(seed, 0);
        let draws: Vec<f64> = (0..n).map(|_| beta_sample(params, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var)
    }

    #[test]
    fn construction_rejects_bad_parameters() {
        assert!(BetaParams::new(0.0, 1.0).is_err());
        assert!(BetaParams::new(1.0, -2.0).is_err());
        assert!(matches!(BetaParams::new(f64::NAN, 1.0), Err(Error::Domain(_))));
        assert!(BetaParams::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn uniform_sampler_mean() {
        let (mean, _) = moments(bp(1.0, 1.0), 1, 100_000);
        assert!((mean - 0.5).abs() < 0.005, "mean = {mean}");
    }

    #[test]
    fn symmetric_sampler_moments() {
        let (mean, var) = moments(bp(2.0, 2.0), 2, 100_000);
        assert!((mean - 0.5).abs() < 0.005);
        assert!((var - 0.05).abs() < 0.002, "var = {var}");
    }

    #[test]
    fn skewed_sampler_within_three_standard_errors() {
        let p = bp(5.0, 1.0);
        let n = 100_000;
        let (mean, _) = moments(p, 3, n);
        let se = (p.variance() / n as f64).sqrt();
        assert!((mean - 5.0 / 6.0).abs() < 3.0 * se, "mean = {mean}");
    }

    #[test]
    fn skewed_sampler_agrees_with_reference_sampler() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let n = 100_000;
        let reference = rand_distr::Beta::new(5.0, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let ref_mean = (0..n).map(|_| reference.sample(&mut rng)).sum::<f64>() / n as f64;
        let (mean, _) = moments(bp(5.0, 1.0), 4, n);
        assert!((mean - ref_mean).abs() < 0.005, "{mean} vs {ref_mean}");
        assert!((mean - 5.0 / 6.0).abs() < 0.005);
    }

    #[test]
    fn tiny_shapes_stay_inside_the_support() {
        let mut rng = RandomStream::new(9, 9);
        for _ in 0..1000 {
            let a = beta_sample(bp(0.01, 0.02), &mut rng);
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn log_pdf_closed_forms() {
        assert!(beta_log_pdf(0.5, bp(1.0, 1.0)).unwrap().abs() < 1e-14);
        assert!((beta_log_pdf(0.5, bp(2.0, 2.0)).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        assert!((beta_log_pdf(0.25, bp(3.0, 1.0)).unwrap() - 0.1875f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_rejects_boundary() {
        for a in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(beta_log_pdf(a, bp(2.0, 2.0)), Err(Error::Domain(_))));
            assert!(beta_log_pdf_grad(a, bp(2.0, 2.0)).is_err());
        }
    }

    #[test]
    fn grad_at_symmetric_points() {
        assert_eq!(beta_log_pdf_grad(0.5, bp(1.0, 1.0)).unwrap().d_a, 0.0);
        assert_eq!(beta_log_pdf_grad(0.5, bp(2.0, 2.0)).unwrap().d_a, 0.0);
    }

    fn central(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn grad_matches_finite_differences() {
        let (a, al, be) = (0.3, 2.0, 3.0);
        let g = beta_log_pdf_grad(a, bp(al, be)).unwrap();
        let h = 1e-6;
        let fa = central(|x| beta_log_pdf(a, bp(x, be)).unwrap(), al, h);
        let fb = central(|x| beta_log_pdf(a, bp(al, x)).unwrap(), be, h);
        let fx = central(|x| beta_log_pdf(x, bp(al, be)).unwrap(), a, h);
        assert!(rel(g.d_alpha, fa) < 1e-5);
        assert!(rel(g.d_beta, fb) < 1e-5);
        assert!(rel(g.d_a, fx) < 1e-5);
    }

    #[test]
    fn density_integrates_to_one() {
        // composite Simpson on 10^4 panels; shapes >= 1 keep the integrand bounded
        for &(al, be) in &[(1.0, 1.0), (2.0, 3.0), (5.0, 1.5), (1.2, 8.0), (9.5, 9.5)] {
            let p = bp(al, be);
            let n = 10_000;
            let h = 1.0 / n as f64;
            let f = |x: f64| {
                if x <= 0.0 || x >= 1.0 {
                    // limits of the density at the closed endpoints
                    let inner = x.clamp(1e-12, 1.0 - 1e-12);
                    beta_log_pdf(inner, p).unwrap().exp()
                } else {
                    beta_log_pdf(x, p).unwrap().exp()
                }
            };
            let mut acc = f(0.0) + f(1.0);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * f(i as f64 * h);
            }
            let integral = acc * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-4, "({al},{be}) -> {integral}");
        }
    }

    proptest! {
        #[test]
        fn grad_matches_fd_on_random_grid(a in 0.05f64..0.95, al in 0.5f64..10.0, be in 0.5f64..10.0) {
            let g = beta_log_pdf_grad(a, bp(al, be)).unwrap();
            let h = 1e-6;
            let fa = central(|x| beta_log_pdf(a, bp(x, be)).unwrap(), al, h);
            let fb = central(|x| beta_log_pdf(a, bp(al, x)).unwrap(), be, h);
            let fx = central(|x| beta_log_pdf(x, bp(al, be)).unwrap(), a, h);
            prop_assert!((g.d_alpha - fa).abs() <= 1e-5 * fa.abs().max(1.0));
            prop_assert!((g.d_beta - fb).abs() <= 1e-5 * fb.abs().max(1.0));
            prop_assert!((g.d_a - fx).abs() <= 1e-5 * fx.abs().max(1.0));
        }

        #[test]
        fn sampling_is_bit_deterministic(seed in any::<u64>(), stream in any::<u64>(), al in 0.1f64..20.0, be in 0.1f64..20.0) {
            let mut r1 = RandomStream::new(seed, stream);
            let mut r2 = RandomStream::new(seed, stream);
            for _ in 0..8 {
                prop_assert_eq!(beta_sample(bp(al, be), &mut r1).to_bits(), beta_sample(bp(al, be), &mut r2).to_bits());
            }
        }
    }
}
