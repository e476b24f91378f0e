//! Token accounting and the analytic compute model.
//!
//! A frame of `H x W` pixels resized by `s` is patchified into
//! `ceil(sH/P) * ceil(sW/P)` tokens. The retention ratio reported everywhere is
//! the exact-ceiling ratio against the unscaled token count; the optimizer only
//! sees the affine proxy cost of the mean scale.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type FrameDims = (u32, u32);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub patch_size: u32,
    pub s_min: f64,
    pub s_max: f64,
    pub base_dims: FrameDims,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            patch_size: 14,
            s_min: 0.2,
            s_max: 1.8,
            base_dims: (448, 448),
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::config("patch_size must be at least 1"));
        }
        check_bounds(self.s_min, self.s_max)?;
        if self.base_dims.0 == 0 || self.base_dims.1 == 0 {
            return Err(Error::config("base_dims must be positive"));
        }
        Ok(())
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }
}

pub(crate) fn check_bounds(s_min: f64, s_max: f64) -> Result<()> {
    if !(s_min.is_finite() && s_max.is_finite()) || s_min <= 0.0 || s_min >= s_max {
        return Err(Error::config(format!(
            "scale bounds must satisfy 0 < s_min < s_max, got ({s_min}, {s_max})"
        )));
    }
    Ok(())
}

/// Architecture constants of the backbone and the allocator for the FLOPs model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComplexityConfig {
    pub l_mllm: u32,
    pub d_mllm: u32,
    pub l_pred: u32,
    pub d_pred: u32,
    pub patch: u32,
    pub coarse_stride: u32,
}

impl Default for ComplexityConfig {
    fn default() -> Self {
        Self {
            l_mllm: 28,
            d_mllm: 3584,
            l_pred: 4,
            d_pred: 1024,
            patch: 14,
            coarse_stride: 14,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub per_frame_tokens: Vec<u64>,
    pub total_tokens: u64,
    pub retention_ratio: f64,
    pub proxy_cost: f64,
    pub mean_scale: f64,
}

fn tokens_along(scale: f64, pixels: u32, patch: u32) -> u64 {
    // the 1e-9 guard keeps exact multiples such as 0.5 * 448 / 14 from
    // rounding up because of representation error in the product
    let cells = scale * pixels as f64 / patch as f64;
    ((cells - 1e-9).ceil() as u64).max(1)
}

pub fn frame_token_count(dims: FrameDims, scale: f64, patch: u32) -> Result<u64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::domain(format!("scale must be positive, got {scale}")));
    }
    if dims.0 == 0 || dims.1 == 0 || patch == 0 {
        return Err(Error::domain(format!(
            "frame dims and patch must be positive, got {dims:?} with P = {patch}"
        )));
    }
    Ok(tokens_along(scale, dims.0, patch) * tokens_along(scale, dims.1, patch))
}

pub fn retention_ratio(scales: &[f64], dims: &[FrameDims], patch: u32) -> Result<f64> {
    if scales.is_empty() {
        return Err(Error::domain("retention ratio of an empty allocation"));
    }
    if scales.len() != dims.len() {
        return Err(Error::contract(format!(
            "{} scales but {} frame dims",
            scales.len(),
            dims.len()
        )));
    }
    let mut kept = 0u64;
    let mut full = 0u64;
    for (&s, &d) in scales.iter().zip(dims) {
        kept += frame_token_count(d, s, patch)?;
        full += frame_token_count(d, 1.0, patch)?;
    }
    Ok(kept as f64 / full as f64)
}

pub fn mean_scale(scales: &[f64]) -> f64 {
    scales.iter().sum::<f64>() / scales.len() as f64
}

/// `(mean(s) - s_min) / (s_max - s_min)`.
pub fn proxy_cost(scales: &[f64], bounds: (f64, f64)) -> Result<f64> {
    let (s_min, s_max) = bounds;
    check_bounds(s_min, s_max)?;
    if scales.is_empty() {
        return Err(Error::domain("proxy cost of an empty allocation"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s >= s_min && **s <= s_max)) {
        return Err(Error::domain(format!(
            "scale {s} outside [{s_min}, {s_max}]"
        )));
    }
    Ok((mean_scale(scales) - s_min) / (s_max - s_min))
}

pub fn budget_report(
    scales: &[f64],
    dims: &[FrameDims],
    cfg: &BudgetConfig,
) -> Result<BudgetReport> {
    let per_frame_tokens = scales
        .iter()
        .zip(dims)
        .map(|(&s, &d)| frame_token_count(d, s, cfg.patch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(BudgetReport {
        total_tokens: per_frame_tokens.iter().sum(),
        per_frame_tokens,
        retention_ratio: retention_ratio(scales, dims, cfg.patch_size)?,
        proxy_cost: proxy_cost(scales, cfg.bounds())?,
        mean_scale: mean_scale(scales),
    })
}

/// Backbone attention speedup `1 / rho^2` at retention `rho`.
pub fn speedup_model(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::domain(format!("retention must lie in (0, 1], got {rho}")));
    }
    Ok(1.0 / (rho * rho))
}

/// Allocator-to-backbone FLOPs ratio `(L_pred D_pred)/(L_mllm D_mllm) (P/P_c)^4`.
pub fn overhead_model(cfg: &ComplexityConfig) -> Result<f64> {
    let fields = [
        cfg.l_mllm,
        cfg.d_mllm,
        cfg.l_pred,
        cfg.d_pred,
        cfg.patch,
        cfg.coarse_stride,
    ];
    if fields.contains(&0) {
        return Err(Error::config("complexity constants must be positive"));
    }
    let width_ratio =
        (cfg.l_pred as f64 * cfg.d_pred as f64) / (cfg.l_mllm as f64 * cfg.d_mllm as f64);
    Ok(width_ratio * (cfg.patch as f64 / cfg.coarse_stride as f64).powi(4))
}

/// Frames that fit in a token budget at full resolution and after adaptive
/// resizing at retention `rho`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalCapacity {
    pub base_frames: u64,
    pub adaptive_frames: u64,
}

pub fn temporal_capacity(
    token_budget: u64,
    dims: FrameDims,
    patch: u32,
    rho: f64,
) -> Result<TemporalCapacity> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::domain(format!("retention must lie in (0, 1], got {rho}")));
    }
    if dims.0 == 0 || dims.1 == 0 || patch == 0 {
        return Err(Error::domain("frame dims and patch must be positive"));
    }
    let pixels = dims.0 as u64 * dims.1 as u64;
    let base_frames = token_budget * (patch as u64 * patch as u64) / pixels;
    if base_frames == 0 {
        return Err(Error::domain(format!(
            "budget of {token_budget} tokens is below one full-resolution frame"
        )));
    }
    let adaptive = base_frames as f64 / rho;
    // snap values within rounding noise of an integer before flooring
    let adaptive_frames = if (adaptive - adaptive.round()).abs() < 1e-9 {
        adaptive.round()
    } else {
        adaptive.floor()
    } as u64;
    Ok(TemporalCapacity {
        base_frames,
        adaptive_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Integer-only ceiling arithmetic for scales given as rationals `num/den`.
    fn ceil_tokens(h: u64, w: u64, num: u64, den: u64, p: u64) -> u64 {
        let along = |x: u64| (num * x).div_ceil(den * p).max(1);
        along(h) * along(w)
    }

    #[test]
    fn token_counts() {
        assert_eq!(frame_token_count((448, 448), 1.0, 14).unwrap(), 1024);
        assert_eq!(frame_token_count((448, 448), 0.5, 14).unwrap(), 256);
        assert_eq!(frame_token_count((450, 300), 0.7, 14).unwrap(), 345);
        assert_eq!(ceil_tokens(450, 300, 7, 10, 14), 345);
        assert_eq!(frame_token_count((448, 448), 0.2, 14).unwrap(), 49);
        assert_eq!(frame_token_count((448, 448), 1.8, 14).unwrap(), 3364);
        assert_eq!(frame_token_count((10, 10), 0.01, 14).unwrap(), 1);
    }

    #[test]
    fn token_count_domain() {
        assert!(frame_token_count((448, 448), 0.0, 14).is_err());
        assert!(frame_token_count((0, 448), 1.0, 14).is_err());
        assert!(frame_token_count((448, 448), -1.0, 14).is_err());
    }

    #[test]
    fn retention_examples() {
        let d = vec![(448, 448); 3];
        assert_eq!(retention_ratio(&[1.0; 3], &d, 14).unwrap(), 1.0);
        assert_eq!(retention_ratio(&[0.5; 3], &d, 14).unwrap(), 0.25);
        assert_eq!(retention_ratio(&[0.5, 1.0], &d[..2], 14).unwrap(), 0.625);
        assert!(retention_ratio(&[], &[], 14).is_err());
    }

    #[test]
    fn proxy_cost_examples() {
        let b = (0.2, 1.8);
        assert_eq!(proxy_cost(&[0.2, 0.2], b).unwrap(), 0.0);
        assert_eq!(proxy_cost(&[1.8, 1.8], b).unwrap(), 1.0);
        assert!((proxy_cost(&[0.6, 1.4], b).unwrap() - 0.5).abs() < 1e-15);
        assert!(proxy_cost(&[0.1], b).is_err());
    }

    #[test]
    fn complexity_examples() {
        assert_eq!(speedup_model(1.0).unwrap(), 1.0);
        assert_eq!(speedup_model(0.5).unwrap(), 4.0);
        assert!((speedup_model(0.11).unwrap() - 82.644_628_099).abs() < 1e-6);
        assert!(speedup_model(0.0).is_err());

        let same = ComplexityConfig {
            l_mllm: 4,
            d_mllm: 64,
            l_pred: 4,
            d_pred: 64,
            patch: 14,
            coarse_stride: 14,
        };
        assert_eq!(overhead_model(&same).unwrap(), 1.0);
        let half = ComplexityConfig {
            coarse_stride: 28,
            ..same
        };
        assert_eq!(overhead_model(&half).unwrap(), 1.0 / 16.0);
        let quoted = overhead_model(&ComplexityConfig::default()).unwrap();
        assert!((quoted - 4096.0 / 100_352.0).abs() < 1e-12);
    }

    #[test]
    fn temporal_capacity_examples() {
        let c = temporal_capacity(32 * 1024, (448, 448), 14, 1.0).unwrap();
        assert_eq!((c.base_frames, c.adaptive_frames), (32, 32));
        let c = temporal_capacity(32 * 1024, (448, 448), 14, 0.25).unwrap();
        assert_eq!(c.adaptive_frames, 128);
        let c = temporal_capacity(8 * 1024, (448, 448), 14, 0.0625).unwrap();
        assert_eq!((c.base_frames, c.adaptive_frames), (8, 128));
        assert!(temporal_capacity(100, (448, 448), 14, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn retention_is_monotone(scales in prop::collection::vec(0.2f64..1.8, 1..12), idx in 0usize..12, bump in 0.0f64..0.5) {
            let d = vec![(450u32, 300u32); scales.len()];
            let i = idx % scales.len();
            let mut up = scales.clone();
            up[i] += bump;
            prop_assert!(retention_ratio(&up, &d, 14).unwrap() >= retention_ratio(&scales, &d, 14).unwrap());
        }

        #[test]
        fn retention_near_mean_square(scales in prop::collection::vec(0.2f64..1.8, 1..12)) {
            let (h, w, p) = (448.0, 448.0, 14.0);
            let d = vec![(448u32, 448u32); scales.len()];
            let rho = retention_ratio(&scales, &d, 14).unwrap();
            let ms = scales.iter().map(|s| s * s).sum::<f64>() / scales.len() as f64;
            let slack = (2.0 * p * (h + w) + 2.0 * p * p) / (h * w);
            prop_assert!((rho - ms).abs() <= slack);
        }

        #[test]
        fn retention_equals_mean_square_on_grid(ks in prop::collection::vec(1u32..=57, 1..12)) {
            // s = k / 32 makes s * 448 / 14 = k integral
            let scales: Vec<f64> = ks.iter().map(|&k| k as f64 / 32.0).collect();
            let d = vec![(448u32, 448u32); scales.len()];
            let rho = retention_ratio(&scales, &d, 14).unwrap();
            let ms = scales.iter().map(|s| s * s).sum::<f64>() / scales.len() as f64;
            prop_assert!((rho - ms).abs() < 1e-12);
        }

        #[test]
        fn proxy_cost_is_affine(scales in prop::collection::vec(0.3f64..1.5, 1..12), delta in -0.1f64..0.3) {
            let b = (0.2, 1.8);
            let shifted: Vec<f64> = scales.iter().map(|s| s + delta).collect();
            let diff = proxy_cost(&shifted, b).unwrap() - proxy_cost(&scales, b).unwrap();
            prop_assert!((diff - delta / 1.6).abs() < 1e-12);
        }

        #[test]
        fn speedup_times_square_is_one(scales in prop::collection::vec(0.2f64..1.0, 1..12)) {
            let d = vec![(448u32, 448u32); scales.len()];
            let rho = retention_ratio(&scales, &d, 14).unwrap();
            prop_assert!((speedup_model(rho).unwrap() * rho * rho - 1.0).abs() < 1e-12);
        }
    }
}
