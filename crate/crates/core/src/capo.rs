//! Cost-aware advantage shaping.
//!
//! For one prompt group of `M` allocations with `N` rollouts each, the engine
//! runs, in order: group-normalised base advantages, the dynamic cost pivot,
//! correctness-gated sigmoid shaping, residual cost pressure, the floor on
//! correct rollouts, and the per-allocation mean.

use crate::error::{Error, Result};
use crate::numerics::sigmoid;
use crate::rewards::TaskKind;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Rewards at or above this value count as correct for continuous metrics.
pub const CORRECTNESS_THRESHOLD: f64 = 0.35;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapoConfig {
    pub kappa_mix: f64,
    pub tau_fix: f64,
    pub tau_s: f64,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
    /// Weight of the shaping term. Zero switches shaping off.
    pub lambda_capo: f64,
    pub gamma: f64,
    pub eps_plus: f64,
    pub group_norm_eps: f64,
}

impl Default for CapoConfig {
    fn default() -> Self {
        Self {
            kappa_mix: 0.5,
            tau_fix: 0.35,
            tau_s: 0.1,
            lambda_plus: 0.3,
            lambda_minus: 0.6,
            lambda_capo: 1.0,
            gamma: 0.05,
            eps_plus: 0.05,
            group_norm_eps: 1e-6,
        }
    }
}

impl CapoConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.kappa_mix) {
            return Err(Error::config("capo.kappa_mix must lie in [0, 1]"));
        }
        if !unit(self.tau_fix) {
            return Err(Error::config("capo.tau_fix must lie in [0, 1]"));
        }
        if !(self.tau_s > 0.0) {
            return Err(Error::config("capo.tau_s must be positive"));
        }
        if !(self.lambda_minus > self.lambda_plus && self.lambda_plus > 0.0) {
            return Err(Error::config(
                "capo requires lambda_minus > lambda_plus > 0",
            ));
        }
        if !(self.lambda_capo >= 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::config("capo.lambda_capo and capo.gamma must be nonnegative"));
        }
        if !(self.eps_plus > 0.0) || !(self.group_norm_eps > 0.0) {
            return Err(Error::config("capo.eps_plus and capo.group_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Result of one rollout as seen by the advantage engine.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutOutcome {
    pub task_reward: f64,
    pub correct: bool,
    pub allocation_index: usize,
    pub rollout_index: usize,
}

/// All intermediate advantage quantities of one prompt group, indexed `[m][n]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageBundle {
    pub base: Vec<Vec<f64>>,
    pub shaping: Vec<Vec<f64>>,
    pub pre_floor: Vec<Vec<f64>>,
    pub final_adv: Vec<Vec<f64>>,
    pub per_allocation: Vec<f64>,
    pub pivot: f64,
    pub group_mean_cost: f64,
}

fn check_grid(grid: &[Vec<f64>], name: &str) -> Result<(usize, usize)> {
    let m = grid.len();
    let n = grid.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || grid.iter().any(|row| row.len() != n) {
        return Err(Error::contract(format!("{name} must be a non-empty M x N grid")));
    }
    Ok((m, n))
}

/// `(R - mean) / (std + eps)` with population statistics over the whole group.
pub fn base_advantage(rewards: &[Vec<f64>], eps: f64) -> Result<Vec<Vec<f64>>> {
    let count: usize = rewards.iter().map(Vec::len).sum();
    if count < 2 {
        return Err(Error::domain(format!(
            "group normalisation needs at least 2 rollouts, got {count}"
        )));
    }
    check_grid(rewards, "rewards")?;
    let n = count as f64;
    let mean = rewards.iter().flatten().sum::<f64>() / n;
    let var = rewards.iter().flatten().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards
        .iter()
        .map(|row| row.iter().map(|r| (r - mean) / denom).collect())
        .collect())
}

/// `(tau_dyn, c_bar)` with `tau_dyn = kappa c_bar + (1 - kappa) tau_fix`.
pub fn dynamic_pivot(costs: &[f64], cfg: &CapoConfig) -> Result<(f64, f64)> {
    if costs.is_empty() {
        return Err(Error::domain("dynamic pivot of an empty group"));
    }
    let c_bar = costs.iter().sum::<f64>() / costs.len() as f64;
    Ok((cfg.kappa_mix * c_bar + (1.0 - cfg.kappa_mix) * cfg.tau_fix, c_bar))
}

pub fn shaping_signal(cost: f64, correct: bool, pivot: f64, cfg: &CapoConfig) -> f64 {
    if correct {
        cfg.lambda_plus * sigmoid((pivot - cost) / cfg.tau_s)
    } else {
        -cfg.lambda_minus * sigmoid((cost - pivot) / cfg.tau_s)
    }
}

/// Shaping grid for a group: one signal per rollout, using its allocation's cost.
pub fn shaping_grid(
    costs: &[f64],
    correct: &[Vec<bool>],
    pivot: f64,
    cfg: &CapoConfig,
) -> Result<Vec<Vec<f64>>> {
    if costs.len() != correct.len() {
        return Err(Error::contract(format!(
            "{} costs for {} allocations",
            costs.len(),
            correct.len()
        )));
    }
    Ok(costs
        .iter()
        .zip(correct)
        .map(|(&c, row)| row.iter().map(|&u| shaping_signal(c, u, pivot, cfg)).collect())
        .collect())
}

/// `A~ = A_base + lambda_capo S - gamma c_m`, floored at `eps_plus` on correct
/// rollouts, plus per-allocation means.
pub fn final_advantage(
    base: &[Vec<f64>],
    shaping: &[Vec<f64>],
    costs: &[f64],
    correct: &[Vec<bool>],
    cfg: &CapoConfig,
) -> Result<AdvantageBundle> {
    let (m, n) = check_grid(base, "base advantages")?;
    let same = |g: usize, h: usize| g == m && h == n;
    let (sm, sn) = check_grid(shaping, "shaping")?;
    let um = correct.len();
    if !same(sm, sn) || um != m || correct.iter().any(|r| r.len() != n) || costs.len() != m {
        return Err(Error::contract(format!(
            "advantage inputs disagree: base {m}x{n}, shaping {sm}x{sn}, correctness {um} rows, {} costs",
            costs.len()
        )));
    }
    let (pivot, group_mean_cost) = dynamic_pivot(costs, cfg)?;
    let mut pre_floor = vec![vec![0.0; n]; m];
    let mut final_adv = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let a = base[i][j] + cfg.lambda_capo * shaping[i][j] - cfg.gamma * costs[i];
            pre_floor[i][j] = a;
            final_adv[i][j] = if correct[i][j] { a.max(cfg.eps_plus) } else { a };
        }
    }
    let per_allocation = final_adv
        .iter()
        .map(|row| row.iter().sum::<f64>() / n as f64)
        .collect();
    Ok(AdvantageBundle {
        base: base.to_vec(),
        shaping: shaping.to_vec(),
        pre_floor,
        final_adv,
        per_allocation,
        pivot,
        group_mean_cost,
    })
}

/// The full pipeline for one prompt group.
pub fn capo_advantages(
    rewards: &[Vec<f64>],
    correct: &[Vec<bool>],
    costs: &[f64],
    cfg: &CapoConfig,
) -> Result<AdvantageBundle> {
    let base = base_advantage(rewards, cfg.group_norm_eps)?;
    let (pivot, _) = dynamic_pivot(costs, cfg)?;
    let shaping = shaping_grid(costs, correct, pivot, cfg)?;
    final_advantage(&base, &shaping, costs, correct, cfg)
}

/// Baseline without shaping or floor: the cost enters the reward as
/// `R - gamma c_m` before group normalisation.
pub fn lagrangian_advantages(
    rewards: &[Vec<f64>],
    costs: &[f64],
    cfg: &CapoConfig,
) -> Result<AdvantageBundle> {
    let (m, n) = check_grid(rewards, "rewards")?;
    if costs.len() != m {
        return Err(Error::contract(format!("{} costs for {m} allocations", costs.len())));
    }
    let penalised: Vec<Vec<f64>> = rewards
        .iter()
        .zip(costs)
        .map(|(row, &c)| row.iter().map(|r| r - cfg.gamma * c).collect())
        .collect();
    let base = base_advantage(&penalised, cfg.group_norm_eps)?;
    let (pivot, group_mean_cost) = dynamic_pivot(costs, cfg)?;
    let per_allocation = base.iter().map(|row| row.iter().sum::<f64>() / n as f64).collect();
    Ok(AdvantageBundle {
        shaping: vec![vec![0.0; n]; m],
        pre_floor: base.clone(),
        final_adv: base.clone(),
        base,
        per_allocation,
        pivot,
        group_mean_cost,
    })
}

/// Binary success indicator: exact-match kinds pass their outcome through,
/// continuous kinds threshold at [`CORRECTNESS_THRESHOLD`].
pub fn correctness_from_reward(task_reward: f64, kind: TaskKind) -> Result<bool> {
    if !task_reward.is_finite() {
        return Err(Error::domain(format!("task reward must be finite, got {task_reward}")));
    }
    Ok(match kind {
        TaskKind::Choice | TaskKind::Exact | TaskKind::Numeric => task_reward >= 1.0,
        TaskKind::Generation | TaskKind::TemporalGrounding | TaskKind::GroundingQa => {
            task_reward >= CORRECTNESS_THRESHOLD
        }
    })
}

/// Like [`correctness_from_reward`] for a kind given by name.
pub fn correctness_from_named_reward(task_reward: f64, kind: &str) -> Result<bool> {
    let kind: TaskKind = kind
        .parse()
        .map_err(|_| Error::contract(format!("unknown task kind `{kind}`")))?;
    correctness_from_reward(task_reward, kind)
}

impl AdvantageBundle {
    pub fn num_allocations(&self) -> usize {
        self.final_adv.len()
    }

    pub fn rollouts_per_allocation(&self) -> usize {
        self.final_adv.first().map_or(0, Vec::len)
    }

    /// One CSV row per rollout.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "allocation,rollout,base,shaping,pre_floor,final,per_allocation,pivot,group_mean_cost\n",
        );
        for (m, row) in self.final_adv.iter().enumerate() {
            for n in 0..row.len() {
                let _ = writeln!(
                    out,
                    "{m},{n},{},{},{},{},{},{},{}",
                    self.base[m][n],
                    self.shaping[m][n],
                    self.pre_floor[m][n],
                    self.final_adv[m][n],
                    self.per_allocation[m],
                    self.pivot,
                    self.group_mean_cost
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn base_advantage_examples() {
        let a = base_advantage(&[vec![1.0], vec![0.0]], 1e-6).unwrap();
        assert!(close(a[0][0], 1.0, 1e-5) && close(a[1][0], -1.0, 1e-5));
        let z = base_advantage(&[vec![0.7, 0.7], vec![0.7, 0.7]], 1e-6).unwrap();
        assert!(z.iter().flatten().all(|x| *x == 0.0));
        let a = base_advantage(&[vec![2.0, 1.0, 0.0]], 1e-6).unwrap();
        let expected = 1.0 / (2.0f64 / 3.0).sqrt();
        assert!(close(a[0][0], expected, 1e-5) && a[0][1] == 0.0 && close(a[0][2], -expected, 1e-5));
        assert!(base_advantage(&[vec![1.0]], 1e-6).is_err());
    }

    #[test]
    fn pivot_examples() {
        let mut cfg = CapoConfig {
            kappa_mix: 0.0,
            tau_fix: 0.3,
            ..CapoConfig::default()
        };
        assert_eq!(dynamic_pivot(&[0.2, 0.6], &cfg).unwrap().0, 0.3);
        cfg.kappa_mix = 1.0;
        assert!(close(dynamic_pivot(&[0.2, 0.6], &cfg).unwrap().0, 0.4, 1e-15));
        cfg.kappa_mix = 0.5;
        assert!(close(dynamic_pivot(&[0.2, 0.6], &cfg).unwrap().0, 0.35, 1e-15));
        assert!(dynamic_pivot(&[], &cfg).is_err());
    }

    #[test]
    fn shaping_examples() {
        let cfg = CapoConfig::default();
        assert_eq!(shaping_signal(0.4, true, 0.4, &cfg), 0.5 * cfg.lambda_plus);
        assert_eq!(shaping_signal(0.4, false, 0.4, &cfg), -0.5 * cfg.lambda_minus);
        let s = shaping_signal(0.4 + 10.0 * cfg.tau_s, false, 0.4, &cfg);
        assert!(close(s, -cfg.lambda_minus, 1e-4));
    }

    #[test]
    fn floor_examples() {
        let cfg = CapoConfig::default();
        let base = vec![vec![cfg.eps_plus / 2.0, -0.3]];
        let zero = vec![vec![0.0, 0.0]];
        let b = final_advantage(
            &base,
            &zero,
            &[0.0],
            &[vec![true, false]],
            &CapoConfig {
                gamma: 0.0,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(b.final_adv[0][0], cfg.eps_plus);
        assert_eq!(b.final_adv[0][1], b.pre_floor[0][1]);
        assert!(final_advantage(&base, &zero, &[0.0, 1.0], &[vec![true, false]], &cfg).is_err());
    }

    /// Hand-ordered evaluation of the worked group M = 2, N = 1.
    #[test]
    fn worked_two_allocation_group() {
        let cfg = CapoConfig {
            kappa_mix: 0.5,
            tau_fix: 0.5,
            tau_s: 0.1,
            lambda_plus: 0.3,
            lambda_minus: 0.6,
            lambda_capo: 1.0,
            gamma: 0.1,
            eps_plus: 0.05,
            group_norm_eps: 1e-6,
        };
        let b = capo_advantages(
            &[vec![1.0], vec![0.0]],
            &[vec![true], vec![false]],
            &[0.3, 0.7],
            &cfg,
        )
        .unwrap();
        // pivot = 0.5 * 0.5 + 0.5 * 0.5
        assert!(close(b.pivot, 0.5, 1e-12));
        let base = 0.5 / (0.5 + 1e-6);
        let sig2 = 1.0 / (1.0 + (-2.0f64).exp());
        let s0 = 0.3 * sig2;
        let s1 = -0.6 * sig2;
        let a0 = base + s0 - 0.1 * 0.3;
        let a1 = -base + s1 - 0.1 * 0.7;
        assert!(close(b.shaping[0][0], s0, 1e-9) && close(b.shaping[1][0], s1, 1e-9));
        assert!(close(b.final_adv[0][0], a0.max(0.05), 1e-9));
        assert!(close(b.final_adv[1][0], a1, 1e-9));
        assert_eq!(b.per_allocation, vec![b.final_adv[0][0], b.final_adv[1][0]]);
    }

    #[test]
    fn correctness_threshold() {
        assert!(correctness_from_reward(1.0, TaskKind::Exact).unwrap());
        assert!(!correctness_from_reward(0.0, TaskKind::Choice).unwrap());
        assert!(correctness_from_reward(0.40, TaskKind::Generation).unwrap());
        assert!(correctness_from_reward(0.35, TaskKind::TemporalGrounding).unwrap());
        assert!(!correctness_from_reward(0.30, TaskKind::GroundingQa).unwrap());
        assert!(matches!(
            correctness_from_named_reward(0.5, "poetry"),
            Err(Error::Contract(_))
        ));
        assert!(correctness_from_named_reward(0.5, "generation").unwrap());
    }

    #[test]
    fn csv_has_one_row_per_rollout() {
        let b = capo_advantages(
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            &[vec![true, false], vec![false, true], vec![true, true]],
            &[0.2, 0.5, 0.9],
            &CapoConfig::default(),
        )
        .unwrap();
        let csv = b.to_csv();
        assert_eq!(csv.lines().count(), 1 + 6);
        assert!(csv.lines().all(|l| l.split(',').count() == 9));
    }

    proptest! {
        #[test]
        fn base_advantage_is_shift_invariant(r in prop::collection::vec(0.0f64..2.0, 2..24), shift in -50.0f64..50.0) {
            let grid: Vec<Vec<f64>> = r.iter().map(|x| vec![*x]).collect();
            let moved: Vec<Vec<f64>> = r.iter().map(|x| vec![x + shift]).collect();
            let a = base_advantage(&grid, 1e-6).unwrap();
            let b = base_advantage(&moved, 1e-6).unwrap();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-9 * x.abs().max(1.0));
            }
        }

        #[test]
        fn shaping_decreases_with_cost(c in 0.0f64..1.0, dc in 1e-3f64..0.5, pivot in 0.0f64..1.0, u in any::<bool>()) {
            let cfg = CapoConfig::default();
            prop_assert!(shaping_signal(c + dc, u, pivot, &cfg) < shaping_signal(c, u, pivot, &cfg));
        }

        #[test]
        fn shaping_sign_follows_correctness(c in 0.0f64..1.0, pivot in 0.0f64..1.0) {
            let cfg = CapoConfig::default();
            prop_assert!(shaping_signal(c, true, pivot, &cfg) > 0.0);
            prop_assert!(shaping_signal(c, false, pivot, &cfg) < 0.0);
        }

        #[test]
        fn correct_rollouts_keep_the_floor(
            rewards in prop::collection::vec(0.0f64..1.0, 8),
            flags in prop::collection::vec(any::<bool>(), 8),
            costs in prop::collection::vec(0.0f64..1.0, 4),
        ) {
            let cfg = CapoConfig::default();
            let r: Vec<Vec<f64>> = rewards.chunks(2).map(<[f64]>::to_vec).collect();
            let u: Vec<Vec<bool>> = flags.chunks(2).map(<[bool]>::to_vec).collect();
            let b = capo_advantages(&r, &u, &costs, &cfg).unwrap();
            for m in 0..4 {
                for n in 0..2 {
                    if u[m][n] {
                        prop_assert!(b.final_adv[m][n] >= cfg.eps_plus);
                    } else {
                        prop_assert_eq!(b.final_adv[m][n], b.pre_floor[m][n]);
                    }
                }
                prop_assert_eq!(b.per_allocation[m], (b.final_adv[m][0] + b.final_adv[m][1]) / 2.0);
            }
        }

        #[test]
        fn pivot_lies_between_anchors(costs in prop::collection::vec(0.0f64..1.0, 1..10), kappa in 0.01f64..0.99, tau in 0.0f64..1.0) {
            let cfg = CapoConfig { kappa_mix: kappa, tau_fix: tau, ..CapoConfig::default() };
            let (p, c_bar) = dynamic_pivot(&costs, &cfg).unwrap();
            prop_assert!(p >= c_bar.min(tau) - 1e-15 && p <= c_bar.max(tau) + 1e-15);
            if (c_bar - tau).abs() > 1e-9 {
                prop_assert!(p > c_bar.min(tau) && p < c_bar.max(tau));
            }
        }
    }
}
