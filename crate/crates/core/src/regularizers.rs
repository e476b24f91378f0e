//! Temporal-similarity and concentration penalties on an allocation.

use crate::error::{Error, Result};
use crate::numerics::{cosine, sigmoid};
use crate::policy::BetaField;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegConfig {
    /// Margin on `ln s_t + ln s_{t+1}`.
    pub eta_sim: f64,
    /// Cosine level at which the similarity gate is half open.
    pub tau_sim: f64,
    pub gamma_sim: f64,
    /// Cap on `alpha + beta` per frame.
    pub kappa_max: f64,
    pub lambda_sim: f64,
    pub lambda_con: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            eta_sim: 0.2,
            tau_sim: 0.85,
            gamma_sim: 0.05,
            kappa_max: 20.0,
            lambda_sim: 0.1,
            lambda_con: 0.01,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::config(format!("{what} = {v} is out of range")));
        if !self.eta_sim.is_finite() {
            return bad("eta_sim", self.eta_sim);
        }
        // tau_sim = 1 is allowed so a gate can sit exactly at its midpoint for identical frames
        if !(self.tau_sim > 0.0 && self.tau_sim <= 1.0) {
            return bad("tau_sim", self.tau_sim);
        }
        if !(self.gamma_sim > 0.0 && self.gamma_sim.is_finite()) {
            return bad("gamma_sim", self.gamma_sim);
        }
        if !(self.kappa_max > 0.0 && self.kappa_max.is_finite()) {
            return bad("kappa_max", self.kappa_max);
        }
        if !(self.lambda_sim >= 0.0 && self.lambda_sim.is_finite()) {
            return bad("lambda_sim", self.lambda_sim);
        }
        if !(self.lambda_con >= 0.0 && self.lambda_con.is_finite()) {
            return bad("lambda_con", self.lambda_con);
        }
        Ok(())
    }
}

pub fn similarity_gate(f_t: &[f64], f_next: &[f64], cfg: &RegConfig) -> Result<f64> {
    let cos = cosine(f_t, f_next)
        .ok_or_else(|| Error::domain("cosine similarity of a zero or mismatched feature vector"))?;
    Ok(sigmoid((cos - cfg.tau_sim) / cfg.gamma_sim))
}

/// Gates for every adjacent pair of frames.
pub fn similarity_gates(features: &[Vec<f64>], cfg: &RegConfig) -> Result<Vec<f64>> {
    features
        .windows(2)
        .map(|w| similarity_gate(&w[0], &w[1], cfg))
        .collect()
}

/// Temporal-similarity loss and its gradient with respect to the scales.
pub fn temporal_similarity_loss(
    scales: &[f64],
    features: &[Vec<f64>],
    cfg: &RegConfig,
) -> Result<(f64, Vec<f64>)> {
    if scales.len() != features.len() {
        return Err(Error::contract(format!(
            "{} scales for {} frames of features",
            scales.len(),
            features.len()
        )));
    }
    let gates = similarity_gates(features, cfg)?;
    loss_with_gates(scales, &gates, cfg.eta_sim)
}

/// [`temporal_similarity_loss`] for precomputed pair gates.
pub fn loss_with_gates(scales: &[f64], gates: &[f64], eta: f64) -> Result<(f64, Vec<f64>)> {
    let t = scales.len();
    if t < 2 {
        return Err(Error::domain(format!("similarity loss needs T >= 2, got {t}")));
    }
    if gates.len() != t - 1 {
        return Err(Error::contract(format!("{} gates for {t} frames", gates.len())));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::domain(format!("scale {s} has no logarithm")));
    }
    let norm = 1.0 / (t - 1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; t];
    for (i, &w) in gates.iter().enumerate() {
        let margin = scales[i].ln() + scales[i + 1].ln() + eta;
        if margin > 0.0 {
            loss += w * margin;
            grad[i] += norm * w / scales[i];
            grad[i + 1] += norm * w / scales[i + 1];
        }
    }
    Ok((loss * norm, grad))
}

/// Concentration loss and its gradients with respect to `(alpha_t, beta_t)`;
/// the two gradient vectors are identical.
pub fn concentration_loss(field: &BetaField, kappa_max: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let t = field.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; field.len()];
    for (g, p) in grad.iter_mut().zip(&field.per_frame) {
        let excess = p.concentration() - kappa_max;
        if excess > 0.0 {
            loss += excess;
            *g = 1.0 / t;
        }
    }
    (loss / t, grad.clone(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, BetaParams};
    use proptest::prelude::*;

    fn field(pairs: &[(f64, f64)]) -> BetaField {
        BetaField {
            per_frame: pairs.iter().map(|&(a, b)| BetaParams::new(a, b).unwrap()).collect(),
        }
    }

    #[test]
    fn gate_examples() {
        let v = vec![1.0, 2.0, 3.0];
        let cfg = RegConfig { tau_sim: 1.0, ..RegConfig::default() };
        assert!((similarity_gate(&v, &v, &cfg).unwrap() - 0.5).abs() < 1e-12);
        let cfg = RegConfig { tau_sim: 0.8, gamma_sim: 0.05, ..RegConfig::default() };
        let w = similarity_gate(&[1.0, 0.0], &[0.0, 1.0], &cfg).unwrap();
        assert!(w < 1e-6 && w > 0.0);
        let a = [1.0, 0.0];
        let b = [0.6, 0.8];
        for gamma in [0.01, 0.3, 2.0] {
            let cfg = RegConfig { tau_sim: 0.6, gamma_sim: gamma, ..RegConfig::default() };
            assert!((similarity_gate(&a, &b, &cfg).unwrap() - 0.5).abs() < 1e-12);
        }
        assert!(similarity_gate(&[0.0, 0.0], &a, &RegConfig::default()).is_err());
    }

    #[test]
    fn sim_loss_examples() {
        let cfg = RegConfig::default();
        let s_edge = (-cfg.eta_sim / 2.0).exp();
        let feats = vec![vec![1.0, 0.5]; 4];
        let (loss, _) = temporal_similarity_loss(&[s_edge; 4], &feats, &cfg).unwrap();
        assert!(loss.abs() < 1e-12);

        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let (loss, _) = temporal_similarity_loss(&[1.8, 1.8, 1.8], &ortho, &cfg).unwrap();
        assert!(loss < 1e-6);

        let cfg = RegConfig { tau_sim: 0.9, gamma_sim: 0.05, eta_sim: 0.2, ..RegConfig::default() };
        let same = vec![vec![0.3, -1.0, 2.0]; 2];
        let (loss, grad) = temporal_similarity_loss(&[1.0, 1.0], &same, &cfg).unwrap();
        assert!((loss - sigmoid(2.0) * 0.2).abs() < 1e-12);
        assert!((loss - 0.17616).abs() < 1e-5);
        let rep = finite_diff_check(
            |s| temporal_similarity_loss(s, &same, &cfg).unwrap().0,
            |_| grad.clone(),
            &[1.0, 1.0],
            1e-6,
        )
        .unwrap();
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn sim_loss_domain_errors() {
        let cfg = RegConfig::default();
        assert!(temporal_similarity_loss(&[1.0], &[vec![1.0]], &cfg).is_err());
        assert!(temporal_similarity_loss(&[1.0, 0.0], &[vec![1.0], vec![1.0]], &cfg).is_err());
        assert!(temporal_similarity_loss(&[1.0, -0.5], &[vec![1.0], vec![1.0]], &cfg).is_err());
    }

    #[test]
    fn concentration_examples() {
        let k = 20.0;
        assert_eq!(concentration_loss(&field(&[(3.0, 4.0), (10.0, 10.0)]), k).0, 0.0);
        let (loss, ga, gb) = concentration_loss(&field(&[(10.0, 11.0)]), k);
        assert!((loss - 1.0).abs() < 1e-12);
        assert_eq!((ga[0], gb[0]), (1.0, 1.0));
        let (loss, ga, _) = concentration_loss(
            &field(&[(9.0, 10.0), (10.0, 10.0), (11.0, 11.0), (10.0, 10.5)]),
            k,
        );
        assert!((loss - 0.625).abs() < 1e-12);
        assert_eq!(ga, vec![0.0, 0.0, 0.25, 0.25]);
    }

    fn away_from_kinks(scales: &[f64], gates: usize, eta: f64) -> bool {
        (0..gates).all(|i| (scales[i].ln() + scales[i + 1].ln() + eta).abs() > 1e-3)
    }

    proptest! {
        #[test]
        fn sim_gradient_matches_fd(
            scales in prop::collection::vec(0.2f64..1.8, 2..8),
            seed in 0u64..1000,
        ) {
            let cfg = RegConfig::default();
            prop_assume!(away_from_kinks(&scales, scales.len() - 1, cfg.eta_sim));
            let mut rng = crate::numerics::RandomStream::new(seed, 0);
            let base: Vec<f64> = (0..3).map(|_| rng.standard_normal()).collect();
            let feats: Vec<Vec<f64>> = (0..scales.len())
                .map(|_| base.iter().map(|b| b + 0.3 * rng.standard_normal()).collect())
                .collect();
            let (_, grad) = temporal_similarity_loss(&scales, &feats, &cfg).unwrap();
            let rep = finite_diff_check(
                |s| temporal_similarity_loss(s, &feats, &cfg).unwrap().0,
                |_| grad.clone(),
                &scales,
                1e-6,
            ).unwrap();
            prop_assert!(rep.passes(1e-5), "{:?}", rep);
        }

        #[test]
        fn sim_loss_nonnegative_monotone_and_pair_symmetric(
            scales in prop::collection::vec(0.2f64..1.8, 2..8),
            gates in prop::collection::vec(0.0f64..1.0, 7),
            idx in 0usize..8,
            bump in 0.0f64..0.5,
        ) {
            let g = &gates[..scales.len() - 1];
            let (loss, _) = loss_with_gates(&scales, g, 0.2).unwrap();
            prop_assert!(loss >= 0.0);
            let mut up = scales.clone();
            let i = idx % scales.len();
            up[i] += bump;
            prop_assert!(loss_with_gates(&up, g, 0.2).unwrap().0 >= loss - 1e-15);
            let pair = [scales[0], scales[1]];
            let swapped = [scales[1], scales[0]];
            prop_assert_eq!(
                loss_with_gates(&pair, &g[..1], 0.2).unwrap().0,
                loss_with_gates(&swapped, &g[..1], 0.2).unwrap().0
            );
        }

        #[test]
        fn gate_increases_with_cosine(theta1 in 0.0f64..3.0, d in 1e-3f64..0.1) {
            let cfg = RegConfig { gamma_sim: 0.5, ..RegConfig::default() };
            let e = [1.0, 0.0];
            let theta2 = theta1 + d;
            let w1 = similarity_gate(&e, &[theta1.cos(), theta1.sin()], &cfg).unwrap();
            let w2 = similarity_gate(&e, &[theta2.cos(), theta2.sin()], &cfg).unwrap();
            prop_assert!(w1 > w2);
        }

        #[test]
        fn concentration_gradient_matches_fd(
            pairs in prop::collection::vec((0.5f64..15.0, 0.5f64..15.0), 1..6),
        ) {
            let kappa = 20.0;
            prop_assume!(pairs.iter().all(|(a, b)| (a + b - kappa).abs() > 1e-3));
            let flat: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            let eval = |x: &[f64]| {
                let ps: Vec<(f64, f64)> = x.chunks(2).map(|c| (c[0], c[1])).collect();
                concentration_loss(&field(&ps), kappa).0
            };
            let (loss, ga, gb) = concentration_loss(&field(&pairs), kappa);
            prop_assert!(loss >= 0.0);
            let grad: Vec<f64> = ga.iter().zip(&gb).flat_map(|(a, b)| [*a, *b]).collect();
            let rep = finite_diff_check(eval, |_| grad.clone(), &flat, 1e-6).unwrap();
            prop_assert!(rep.passes(1e-5), "{:?}", rep);
        }
    }
}
