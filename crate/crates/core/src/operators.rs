//! Budget operators that realise an allocation: per-frame resize plans and
//! frame selection driven by the predicted scales.

use crate::budget::{budget_report, frame_token_count, BudgetConfig, BudgetReport, FrameDims};
use crate::error::{Error, Result};
use crate::policy::{AllocationSample, EpisodeContext};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResize {
    pub frame_index: usize,
    pub scale: f64,
    pub target_dims: FrameDims,
    pub tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizePlan {
    pub per_frame: Vec<FrameResize>,
    pub report: BudgetReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionPlan {
    pub kept_indices: Vec<usize>,
    pub kept_scales: Vec<f64>,
    /// Set by [`SelectionPlan::with_budget`]; selection alone knows no frame sizes.
    pub budget: Option<BudgetReport>,
}

fn target_len(scale: f64, pixels: u32) -> u32 {
    ((scale * pixels as f64).round() as u32).max(1)
}

pub fn resize_frames(scales: &[f64], dims: &[FrameDims], cfg: &BudgetConfig) -> Result<ResizePlan> {
    cfg.validate()?;
    if scales.len() != dims.len() {
        return Err(Error::contract(format!(
            "{} scales for {} frames",
            scales.len(),
            dims.len()
        )));
    }
    let (lo, hi) = cfg.bounds();
    if let Some(s) = scales.iter().find(|s| !(**s >= lo && **s <= hi)) {
        return Err(Error::domain(format!("scale {s} outside [{lo}, {hi}]")));
    }
    let per_frame = scales
        .iter()
        .zip(dims)
        .enumerate()
        .map(|(i, (&s, &d))| {
            Ok(FrameResize {
                frame_index: i,
                scale: s,
                target_dims: (target_len(s, d.0), target_len(s, d.1)),
                tokens: frame_token_count(d, s, cfg.patch_size)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ResizePlan {
        per_frame,
        report: budget_report(scales, dims, cfg)?,
    })
}

pub fn build_resize_plan(
    sample: &AllocationSample,
    ctx: &EpisodeContext,
    cfg: &BudgetConfig,
) -> Result<ResizePlan> {
    if sample.num_frames() != ctx.num_frames() {
        return Err(Error::contract(format!(
            "sample has {} frames, context has {}",
            sample.num_frames(),
            ctx.num_frames()
        )));
    }
    resize_frames(&sample.scales, ctx.frame_dims(), cfg)
}

impl ResizePlan {
    /// One `frame_index scale height width tokens` line per frame.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# frame_index scale height width tokens\n");
        for f in &self.per_frame {
            let _ = writeln!(
                out,
                "{} {} {} {} {}",
                f.frame_index, f.scale, f.target_dims.0, f.target_dims.1, f.tokens
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Vec<FrameResize>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(n, l)| {
                let bad = |what: &str| Error::Parse(format!("plan line {}: bad {what}", n + 1));
                let cols: Vec<&str> = l.split_whitespace().collect();
                if cols.len() != 5 {
                    return Err(bad("field count"));
                }
                Ok(FrameResize {
                    frame_index: cols[0].parse().map_err(|_| bad("frame index"))?,
                    scale: cols[1].parse().map_err(|_| bad("scale"))?,
                    target_dims: (
                        cols[2].parse().map_err(|_| bad("height"))?,
                        cols[3].parse().map_err(|_| bad("width"))?,
                    ),
                    tokens: cols[4].parse().map_err(|_| bad("token count"))?,
                })
            })
            .collect()
    }
}

fn plan_from_indices(mut kept: Vec<usize>, scales: &[f64]) -> SelectionPlan {
    kept.sort_unstable();
    SelectionPlan {
        kept_scales: kept.iter().map(|&i| scales[i]).collect(),
        kept_indices: kept,
        budget: None,
    }
}

fn check_scales(scales: &[f64]) -> Result<()> {
    if scales.is_empty() {
        return Err(Error::domain("selection over zero frames"));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::domain(format!("selection score {s} is not positive")));
    }
    Ok(())
}

/// Keeps the `k` largest scales, ties to the lower index, in temporal order.
pub fn topk_select(scales: &[f64], k: usize) -> Result<SelectionPlan> {
    check_scales(scales)?;
    if k == 0 || k > scales.len() {
        return Err(Error::domain(format!(
            "K = {k} outside [1, {}]",
            scales.len()
        )));
    }
    let mut order: Vec<usize> = (0..scales.len()).collect();
    order.sort_by(|&a, &b| scales[b].total_cmp(&scales[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(plan_from_indices(order, scales))
}

/// Keeps every frame with scale at least `threshold`, or the first argmax
/// frame when none qualify.
pub fn threshold_select(scales: &[f64], threshold: f64) -> Result<SelectionPlan> {
    check_scales(scales)?;
    let mut kept: Vec<usize> = (0..scales.len()).filter(|&i| scales[i] >= threshold).collect();
    if kept.is_empty() {
        let best = (0..scales.len())
            .reduce(|a, b| if scales[b] > scales[a] { b } else { a })
            .unwrap_or(0);
        kept.push(best);
    }
    Ok(plan_from_indices(kept, scales))
}

impl SelectionPlan {
    /// Attaches the budget of the kept frames at their original scales.
    pub fn with_budget(mut self, dims: &[FrameDims], cfg: &BudgetConfig) -> Result<Self> {
        let kept_dims = self
            .kept_indices
            .iter()
            .map(|&i| {
                dims.get(i)
                    .copied()
                    .ok_or_else(|| Error::contract(format!("kept frame {i} has no dims")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.budget = Some(budget_report(&self.kept_scales, &kept_dims, cfg)?);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::retention_ratio;
    use proptest::prelude::*;

    const D: FrameDims = (448, 448);

    #[test]
    fn resize_examples() {
        let cfg = BudgetConfig::default();
        let plan = resize_frames(&[1.0; 3], &[D; 3], &cfg).unwrap();
        assert!(plan.per_frame.iter().all(|f| f.target_dims == D));
        assert_eq!(plan.report.retention_ratio, 1.0);

        let plan = resize_frames(&[0.2; 4], &[D; 4], &cfg).unwrap();
        assert_eq!(plan.report.retention_ratio, 49.0 / 1024.0);

        let plan = resize_frames(&[0.2, 1.0, 1.8], &[D; 3], &cfg).unwrap();
        let tokens: Vec<u64> = plan.per_frame.iter().map(|f| f.tokens).collect();
        assert_eq!(tokens, vec![49, 1024, 3364]);
        assert_eq!(plan.per_frame[0].target_dims, (90, 90));
        assert_eq!(plan.per_frame[2].target_dims, (806, 806));

        assert!(resize_frames(&[1.9], &[D], &cfg).is_err());
        assert!(resize_frames(&[0.1], &[D], &cfg).is_err());
    }

    #[test]
    fn plan_text_round_trip() {
        let plan = resize_frames(&[0.2, 1.0, 1.8], &[D, (224, 336), D], &BudgetConfig::default())
            .unwrap();
        assert_eq!(ResizePlan::from_text(&plan.to_text()).unwrap(), plan.per_frame);
        assert!(ResizePlan::from_text("0 1.0 2 3").is_err());
    }

    #[test]
    fn selection_examples() {
        let s = [0.7, 0.2, 1.1, 0.4];
        assert_eq!(topk_select(&s, 4).unwrap().kept_indices, vec![0, 1, 2, 3]);
        assert_eq!(topk_select(&[0.3, 0.9, 0.3], 1).unwrap().kept_indices, vec![1]);
        assert_eq!(topk_select(&[0.5, 0.5, 0.4], 1).unwrap().kept_indices, vec![0]);
        assert!(topk_select(&s, 0).is_err());
        assert!(topk_select(&s, 5).is_err());

        assert_eq!(threshold_select(&s, 0.2).unwrap().kept_indices, vec![0, 1, 2, 3]);
        assert_eq!(threshold_select(&s, 5.0).unwrap().kept_indices, vec![2]);
        assert_eq!(threshold_select(&[0.2, 0.8, 0.5], 0.5).unwrap().kept_indices, vec![1, 2]);
        let plan = threshold_select(&[0.2, 0.8, 0.5], 0.5).unwrap();
        assert_eq!(plan.kept_scales, vec![0.8, 0.5]);
    }

    #[test]
    fn selection_budget_covers_kept_frames_only() {
        let cfg = BudgetConfig::default();
        let plan = topk_select(&[0.2, 1.8, 1.0], 2)
            .unwrap()
            .with_budget(&[D; 3], &cfg)
            .unwrap();
        let b = plan.budget.unwrap();
        assert_eq!(b.per_frame_tokens, vec![3364, 1024]);
        assert_eq!(b.retention_ratio, (3364.0 + 1024.0) / 2048.0);
    }

    proptest! {
        #[test]
        fn topk_matches_full_sort(
            scales in prop::collection::vec(prop::sample::select(vec![0.2, 0.5, 0.9, 1.3, 1.8]), 1..=12),
            k_seed in 0usize..100,
        ) {
            let k = 1 + k_seed % scales.len();
            let plan = topk_select(&scales, k).unwrap();
            let mut ranked: Vec<(f64, usize)> = scales.iter().copied().zip(0..).collect();
            ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut want: Vec<usize> = ranked[..k].iter().map(|p| p.1).collect();
            want.sort();
            prop_assert_eq!(&plan.kept_indices, &want);
            prop_assert!(plan.kept_indices.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn threshold_is_ordered_and_nonempty(
            scales in prop::collection::vec(0.2f64..1.8, 1..16),
            thr in 0.0f64..2.0,
        ) {
            let plan = threshold_select(&scales, thr).unwrap();
            prop_assert!(!plan.is_empty());
            prop_assert!(plan.kept_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(plan.kept_indices.iter().all(|&i| i < scales.len()));
        }

        #[test]
        fn plan_ratio_is_bit_exact(scales in prop::collection::vec(0.2f64..1.8, 1..10)) {
            let cfg = BudgetConfig::default();
            let dims = vec![D; scales.len()];
            let plan = resize_frames(&scales, &dims, &cfg).unwrap();
            prop_assert_eq!(
                plan.report.retention_ratio.to_bits(),
                retention_ratio(&scales, &dims, cfg.patch_size).unwrap().to_bits()
            );
            for f in &plan.per_frame {
                prop_assert_eq!(f.tokens, frame_token_count(D, f.scale, 14).unwrap());
            }
        }
    }
}
