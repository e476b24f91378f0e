//! One training iteration: sample `M` allocations per episode, roll out `N`
//! answers per allocation, shape advantages, step the allocator on the
//! clipped per-frame surrogate plus regularizers, then optionally step the
//! backbone surrogate on its token-level objective.

use crate::budget::{mean_scale, proxy_cost, retention_ratio, BudgetConfig};
use crate::capo::{capo_advantages, lagrangian_advantages, AdvantageBundle, CapoConfig};
use crate::env::{
    backbone_log_prob_at, backbone_log_prob_grad, correct_probability, episode_at,
    oracle_rollout, perception_signal, surrogate_rollout, BackboneSurrogate, EnvConfig, Rollout,
    SurrogateMode, SyntheticEpisode,
};
use crate::error::{ensure_finite, Error, Result};
use crate::numerics::{beta_log_pdf, beta_log_pdf_grad, gini, mean_std, RandomStream};
use crate::operators::topk_select;
use crate::policy::{
    allocation_log_prob, allocator_backward, allocator_forward, allocator_forward_cached,
    density_ratio, sample_allocation, AllocationSample, AllocatorParams, AllocatorShape,
    BetaField, EpisodeContext,
};
use crate::regularizers::{concentration_loss, loss_with_gates, similarity_gates, RegConfig};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

const SAMPLE_LABEL: u64 = 0x0061_6c6c_6f63;
const INIT_LABEL: u64 = 0x696e_6974;
/// Held-out episodes are drawn from indices at and above this offset.
pub const HELD_OUT_BASE: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorConfig {
    pub hidden: usize,
    pub temporal_cue: bool,
    pub alpha_floor: f64,
}

impl Default for AllocatorConfig {
    fn default() -> Self {
        Self { hidden: 32, temporal_cue: false, alpha_floor: 0.05 }
    }
}

/// How rollout outcomes and costs become advantages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageScheme {
    /// Cost-aware shaping with pivot, residual cost and floor.
    Capo,
    /// Group-normalised `R - gamma c` with no shaping and no floor.
    Lagrangian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_episodes: usize,
    /// `M`: allocations sampled per episode.
    pub allocations_per_prompt: usize,
    /// `N`: rollouts per allocation.
    pub rollouts_per_allocation: usize,
    pub clip_eps: f64,
    pub lr_alloc: f64,
    pub lr_backbone: f64,
    pub update_backbone: bool,
    pub sequential_correction: bool,
    pub backbone: SurrogateMode,
    /// Initial evidence gain of a trainable backbone surrogate.
    pub backbone_gain: f64,
    pub advantage: AdvantageScheme,
    pub allocator: AllocatorConfig,
    pub capo: CapoConfig,
    pub reg: RegConfig,
    pub budget: BudgetConfig,
    pub env: EnvConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            iterations: 500,
            batch_episodes: 32,
            allocations_per_prompt: 8,
            rollouts_per_allocation: 1,
            clip_eps: 0.2,
            lr_alloc: 1e-2,
            lr_backbone: 1e-2,
            update_backbone: false,
            sequential_correction: false,
            backbone: SurrogateMode::Oracle,
            backbone_gain: 2.0,
            advantage: AdvantageScheme::Capo,
            allocator: AllocatorConfig::default(),
            capo: CapoConfig::default(),
            reg: RegConfig::default(),
            budget: BudgetConfig::default(),
            env: EnvConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.allocations_per_prompt == 0 || self.rollouts_per_allocation == 0 {
            return Err(Error::config("M and N must be at least 1"));
        }
        if self.allocations_per_prompt * self.rollouts_per_allocation < 2 {
            return Err(Error::config("a prompt group needs at least two rollouts (M N >= 2)"));
        }
        if self.batch_episodes == 0 {
            return Err(Error::config("batch_episodes must be at least 1"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config(format!("clip_eps = {} must lie in (0, 1)", self.clip_eps)));
        }
        for (name, lr) in [("lr_alloc", self.lr_alloc), ("lr_backbone", self.lr_backbone)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.update_backbone && self.backbone != SurrogateMode::Trainable {
            return Err(Error::config("update_backbone needs backbone = \"trainable\""));
        }
        if !self.backbone_gain.is_finite() {
            return Err(Error::config("backbone_gain must be finite"));
        }
        if self.allocator.hidden == 0 || !(self.allocator.alpha_floor > 0.0) {
            return Err(Error::config("allocator.hidden and allocator.alpha_floor must be positive"));
        }
        self.capo.validate()?;
        self.reg.validate()?;
        self.budget.validate()?;
        self.env.validate(self.budget.bounds())
    }

    pub fn allocator_shape(&self) -> AllocatorShape {
        AllocatorShape {
            feature_dim: self.env.feature_dim,
            hidden: self.allocator.hidden,
            temporal_cue: self.allocator.temporal_cue,
        }
    }
}

/// Adaptive moment estimation without weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {} and a gradient of {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        if let Some((i, g)) = grad.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient coordinate {i}"), value: *g });
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Clipped surrogate term `min(r A, clip(r) A)` and its derivative in `r`.
fn clipped_term(r: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = r * adv;
    let clipped = r.clamp(1.0 - eps, 1.0 + eps) * adv;
    if unclipped <= clipped {
        (unclipped, adv)
    } else {
        (clipped, 0.0)
    }
}

/// Per-frame clipped surrogate of one episode with its gradient in
/// `(alpha_t, beta_t)`, unnormalised (summed over `m` and `t`).
fn ppo_frame_terms(
    field: &BetaField,
    samples: &[AllocationSample],
    advantages: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let t_count = field.len();
    let mut total = 0.0;
    let mut d_alpha = vec![0.0; t_count];
    let mut d_beta = vec![0.0; t_count];
    for (m, (sample, &adv)) in samples.iter().zip(advantages).enumerate() {
        if sample.num_frames() != t_count {
            return Err(Error::contract("sample length differs from the field"));
        }
        for t in 0..t_count {
            let a = sample.latents[t];
            let p = field.per_frame[t];
            let lp = beta_log_pdf(a, p)?;
            let r = density_ratio(lp, sample.log_probs[t], || {
                format!("allocator ratio at allocation {m}, frame {t}")
            })?;
            let (term, d_r) = clipped_term(r, adv, eps);
            total += term;
            if d_r != 0.0 {
                let g = beta_log_pdf_grad(a, p)?;
                d_alpha[t] += d_r * r * g.d_alpha;
                d_beta[t] += d_r * r * g.d_beta;
            }
        }
    }
    Ok((total, d_alpha, d_beta))
}

/// `-(1/(M T)) sum_{m,t} min(r A_m, clip(r, 1-eps, 1+eps) A_m)` with `r` the
/// per-frame latent density ratio against the densities stored in the samples.
pub fn allocator_ppo_loss(
    params: &AllocatorParams,
    old_params: &AllocatorParams,
    ctx: &EpisodeContext,
    samples: &[AllocationSample],
    advantages: &[f64],
    eps: f64,
) -> Result<(f64, Vec<f64>)> {
    check_samples(old_params, ctx, samples, advantages)?;
    let (field, cache) = allocator_forward_cached(params, ctx)?;
    let norm = -1.0 / (samples.len() * ctx.num_frames()) as f64;
    let (sum, mut da, mut db) = ppo_frame_terms(&field, samples, advantages, eps)?;
    da.iter_mut().chain(db.iter_mut()).for_each(|g| *g *= norm);
    let grad = allocator_backward(params, &cache, &da, &db)?;
    Ok((ensure_finite(sum * norm, || "allocator surrogate".into())?, grad))
}

fn check_samples(
    old_params: &AllocatorParams,
    ctx: &EpisodeContext,
    samples: &[AllocationSample],
    advantages: &[f64],
) -> Result<()> {
    if samples.is_empty() || samples.len() != advantages.len() {
        return Err(Error::contract(format!(
            "{} samples with {} advantages",
            samples.len(),
            advantages.len()
        )));
    }
    let old = allocator_forward(old_params, ctx)?;
    for (m, s) in samples.iter().enumerate() {
        let (lp, _) = allocation_log_prob(&old, s)?;
        if lp != s.log_probs {
            return Err(Error::contract(format!(
                "sample {m} was not drawn under the given old parameters"
            )));
        }
    }
    Ok(())
}

/// `exp(sum_t log q_new(a_t) - log q_old(a_t))` for one sampled allocation.
pub fn importance_weight(
    new_params: &AllocatorParams,
    old_params: &AllocatorParams,
    ctx: &EpisodeContext,
    sample: &AllocationSample,
) -> Result<f64> {
    let (_, new_lp) = allocation_log_prob(&allocator_forward(new_params, ctx)?, sample)?;
    let (_, old_lp) = allocation_log_prob(&allocator_forward(old_params, ctx)?, sample)?;
    density_ratio(new_lp, old_lp, || "sequential importance weight".into())
}

/// One rollout of the backbone together with its behaviour log-probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneRollout {
    pub rollout: Rollout,
    pub old_log_prob: f64,
}

/// `-(1/(M N)) sum_{m,n} min(r w_m A, clip(r) w_m A)` for single-token
/// responses, with gradient in [`BackboneSurrogate::params`] layout.
pub fn backbone_ppo_loss(
    surrogate: &BackboneSurrogate,
    episode: &SyntheticEpisode,
    rollouts: &[Vec<BackboneRollout>],
    advantages: &[Vec<f64>],
    eps: f64,
    weights: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let m_count = rollouts.len();
    let n_count = rollouts.first().map_or(0, Vec::len);
    if m_count == 0
        || n_count == 0
        || advantages.len() != m_count
        || rollouts.iter().zip(advantages).any(|(r, a)| r.len() != n_count || a.len() != n_count)
        || weights.is_some_and(|w| w.len() != m_count)
    {
        return Err(Error::contract("backbone loss inputs must share an M x N shape"));
    }
    let norm = -1.0 / (m_count * n_count) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; surrogate.num_params()];
    for m in 0..m_count {
        let w = weights.map_or(1.0, |w| w[m]);
        for n in 0..n_count {
            let br = &rollouts[m][n];
            let e = br.rollout.perception;
            let o = br.rollout.emitted_option;
            let lp = backbone_log_prob_at(surrogate, e, episode, o)?;
            let r = density_ratio(lp, br.old_log_prob, || {
                format!("backbone ratio at allocation {m}, rollout {n}")
            })?;
            let (term, d_r) = clipped_term(r, w * advantages[m][n], eps);
            loss += term;
            if d_r != 0.0 {
                let g = backbone_log_prob_grad(surrogate, e, episode, o)?;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += norm * d_r * r * gi;
                }
            }
        }
    }
    Ok((ensure_finite(loss * norm, || "backbone surrogate".into())?, grad))
}

/// Everything sampled for one episode during an iteration.
#[derive(Clone, Debug)]
pub struct EpisodeRollouts<'a> {
    pub episode: &'a SyntheticEpisode,
    pub old_field: BetaField,
    pub samples: Vec<AllocationSample>,
    pub rollouts: Vec<Vec<BackboneRollout>>,
    pub costs: Vec<f64>,
    pub bundle: AdvantageBundle,
}

/// Allocator loss split into its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AllocLoss {
    pub theta: f64,
    pub sim: f64,
    pub con: f64,
    pub total: f64,
}

/// Total allocator loss `L_theta + lambda_sim L_sim + lambda_con L_con`
/// averaged over the batch, with its gradient. Samples are held fixed; the
/// similarity term follows each latent as `a + mu_theta - mu_old`.
pub fn allocator_loss(
    params: &AllocatorParams,
    batch: &[EpisodeRollouts<'_>],
    cfg: &TrainConfig,
) -> Result<(AllocLoss, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::contract("allocator loss over an empty batch"));
    }
    let (lo, hi) = cfg.budget.bounds();
    let width = hi - lo;
    let reg = &cfg.reg;
    let mut parts = AllocLoss::default();
    let mut grad = vec![0.0; params.as_flat().len()];
    let b_norm = 1.0 / batch.len() as f64;
    for (b, item) in batch.iter().enumerate() {
        let ctx = &item.episode.ctx;
        let t_count = ctx.num_frames();
        let m_count = item.samples.len();
        let (field, cache) = allocator_forward_cached(params, ctx)?;
        let adv = &item.bundle.per_allocation;

        let (sum, mut da, mut db) = ppo_frame_terms(&field, &item.samples, adv, cfg.clip_eps)?;
        let theta_norm = -1.0 / (m_count * t_count) as f64;
        da.iter_mut().chain(db.iter_mut()).for_each(|g| *g *= theta_norm);
        let theta = sum * theta_norm;

        let mut sim = 0.0;
        if t_count >= 2 && reg.lambda_sim > 0.0 {
            let gates = similarity_gates(ctx.frame_features(), reg)?;
            let shift: Vec<f64> = field
                .per_frame
                .iter()
                .zip(&item.old_field.per_frame)
                .map(|(p, q)| p.mean() - q.mean())
                .collect();
            let mut ds = vec![0.0; t_count];
            for s in &item.samples {
                let scales: Vec<f64> = s
                    .latents
                    .iter()
                    .zip(&shift)
                    .map(|(a, d)| lo + (a + d) * width)
                    .collect();
                let (l, g) = loss_with_gates(&scales, &gates, reg.eta_sim)?;
                sim += l / m_count as f64;
                for (acc, gi) in ds.iter_mut().zip(g) {
                    *acc += gi / m_count as f64;
                }
            }
            for t in 0..t_count {
                let p = field.per_frame[t];
                let k = p.concentration();
                let scale = reg.lambda_sim * ds[t] * width / (k * k);
                da[t] += scale * p.beta();
                db[t] -= scale * p.alpha();
            }
        }

        let (con, ca, cb) = concentration_loss(&field, reg.kappa_max);
        if reg.lambda_con > 0.0 {
            for t in 0..t_count {
                da[t] += reg.lambda_con * ca[t];
                db[t] += reg.lambda_con * cb[t];
            }
        }

        let g = allocator_backward(params, &cache, &da, &db)?;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += b_norm * gi;
        }
        let total = theta + reg.lambda_sim * sim + reg.lambda_con * con;
        ensure_finite(total, || format!("allocator loss of batch item {b}"))?;
        parts.theta += b_norm * theta;
        parts.sim += b_norm * sim;
        parts.con += b_norm * con;
        parts.total += b_norm * total;
    }
    Ok((parts, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub params: AllocatorParams,
    pub surrogate: BackboneSurrogate,
    pub alloc_opt: Adam,
    pub backbone_opt: Adam,
    pub iteration: usize,
}

impl TrainerState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = RandomStream::new(cfg.seed, 0).derive(&[INIT_LABEL]);
        let params = AllocatorParams::init(cfg.allocator_shape(), cfg.allocator.alpha_floor, &mut rng)?;
        let k = cfg.env.num_options;
        let surrogate = match cfg.backbone {
            SurrogateMode::Oracle => BackboneSurrogate::oracle(k),
            SurrogateMode::Trainable => BackboneSurrogate::trainable(k, cfg.backbone_gain),
        };
        Ok(Self {
            alloc_opt: Adam::new(cfg.lr_alloc, params.as_flat().len()),
            backbone_opt: Adam::new(cfg.lr_backbone, surrogate.num_params()),
            params,
            surrogate,
            iteration: 0,
        })
    }
}

/// Per-iteration training diagnostics, all measured on the sampled allocations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_scale: f64,
    pub retention: f64,
    pub proxy_cost: f64,
    pub accuracy: f64,
    pub loss_theta: f64,
    pub loss_sim: f64,
    pub loss_con: f64,
    pub loss_alloc: f64,
    pub loss_phi: f64,
    pub mean_abs_adv: f64,
    pub scale_std: f64,
    pub gini: f64,
    pub decisive_scale: f64,
    pub other_scale: f64,
}

pub const METRICS_HEADER: &str = "iteration,mean_scale,retention,proxy_cost,accuracy,loss_theta,loss_sim,loss_con,loss_alloc,loss_phi,mean_abs_adv,scale_std,gini,decisive_scale,other_scale";

impl IterationMetrics {
    fn values(&self) -> [f64; 14] {
        [
            self.mean_scale,
            self.retention,
            self.proxy_cost,
            self.accuracy,
            self.loss_theta,
            self.loss_sim,
            self.loss_con,
            self.loss_alloc,
            self.loss_phi,
            self.mean_abs_adv,
            self.scale_std,
            self.gini,
            self.decisive_scale,
            self.other_scale,
        ]
    }

    fn check_finite(&self) -> Result<()> {
        for (name, v) in METRICS_HEADER.split(',').skip(1).zip(self.values()) {
            ensure_finite(v, || format!("metric {name} at iteration {}", self.iteration))?;
        }
        Ok(())
    }
}

/// CSV with [`METRICS_HEADER`] and one row per iteration.
pub fn metrics_csv(history: &[IterationMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in history {
        let _ = write!(out, "{}", m.iteration);
        for v in m.values() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Training episodes of iteration `iteration`.
pub fn training_batch(cfg: &TrainConfig, iteration: usize) -> Result<Vec<SyntheticEpisode>> {
    let start = (iteration * cfg.batch_episodes) as u64;
    (0..cfg.batch_episodes as u64)
        .map(|i| episode_at(&cfg.env, cfg.seed, start + i))
        .collect()
}

/// Samples allocations and rollouts for every episode and computes advantages.
pub fn collect_rollouts<'a>(
    state: &TrainerState,
    episodes: &'a [SyntheticEpisode],
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeRollouts<'a>>> {
    let bounds = cfg.budget.bounds();
    let root = RandomStream::new(cfg.seed, 0);
    episodes
        .iter()
        .enumerate()
        .map(|(b, episode)| {
            let old_field = allocator_forward(&state.params, &episode.ctx)?;
            let mut samples = Vec::with_capacity(cfg.allocations_per_prompt);
            let mut rollouts = Vec::with_capacity(cfg.allocations_per_prompt);
            for m in 0..cfg.allocations_per_prompt {
                let mut rng =
                    root.derive(&[SAMPLE_LABEL, state.iteration as u64, b as u64, m as u64]);
                let sample = sample_allocation(&old_field, bounds, &mut rng)?;
                let row = (0..cfg.rollouts_per_allocation)
                    .map(|_| match state.surrogate.mode {
                        SurrogateMode::Oracle => {
                            let r = oracle_rollout(&sample.scales, episode, &cfg.env, &mut rng)?;
                            let old = backbone_log_prob_at(&state.surrogate, r.perception, episode, r.emitted_option)?;
                            Ok(BackboneRollout { rollout: r, old_log_prob: old })
                        }
                        SurrogateMode::Trainable => {
                            let (r, old) = surrogate_rollout(&state.surrogate, &sample.scales, episode, &cfg.env, &mut rng)?;
                            Ok(BackboneRollout { rollout: r, old_log_prob: old })
                        }
                    })
                    .collect::<Result<Vec<_>>>()?;
                samples.push(sample);
                rollouts.push(row);
            }
            let rewards: Vec<Vec<f64>> = rollouts
                .iter()
                .map(|row| row.iter().map(|r| r.rollout.scalar_reward).collect())
                .collect();
            let correct: Vec<Vec<bool>> = rollouts
                .iter()
                .map(|row| row.iter().map(|r| r.rollout.correct).collect())
                .collect();
            let costs = samples
                .iter()
                .map(|s| proxy_cost(&s.scales, bounds))
                .collect::<Result<Vec<_>>>()?;
            let bundle = match cfg.advantage {
                AdvantageScheme::Capo => capo_advantages(&rewards, &correct, &costs, &cfg.capo)?,
                AdvantageScheme::Lagrangian => lagrangian_advantages(&rewards, &costs, &cfg.capo)?,
            };
            Ok(EpisodeRollouts { episode, old_field, samples, rollouts, costs, bundle })
        })
        .collect()
}

fn batch_metrics(
    batch: &[EpisodeRollouts<'_>],
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<IterationMetrics> {
    let mut scale = 0.0;
    let mut retention = 0.0;
    let mut cost = 0.0;
    let mut std = 0.0;
    let mut gini_sum = 0.0;
    let mut samples = 0usize;
    let (mut dec, mut dec_n, mut other, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut hits, mut count, mut abs_adv) = (0usize, 0usize, 0.0);
    for item in batch {
        let dims = item.episode.ctx.frame_dims();
        for (s, &c) in item.samples.iter().zip(&item.costs) {
            scale += mean_scale(&s.scales);
            retention += retention_ratio(&s.scales, dims, cfg.budget.patch_size)?;
            cost += c;
            std += mean_std(&s.scales).1;
            gini_sum += gini(&s.scales)?;
            samples += 1;
            for (t, &v) in s.scales.iter().enumerate() {
                if item.episode.is_decisive(t) {
                    dec += v;
                    dec_n += 1;
                } else {
                    other += v;
                    other_n += 1;
                }
            }
        }
        for row in &item.rollouts {
            for r in row {
                hits += usize::from(r.rollout.correct);
                count += 1;
            }
        }
        abs_adv += item.bundle.final_adv.iter().flatten().map(|a| a.abs()).sum::<f64>();
    }
    let per = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
    Ok(IterationMetrics {
        iteration,
        mean_scale: per(scale, samples),
        retention: per(retention, samples),
        proxy_cost: per(cost, samples),
        accuracy: per(hits as f64, count),
        loss_theta: 0.0,
        loss_sim: 0.0,
        loss_con: 0.0,
        loss_alloc: 0.0,
        loss_phi: 0.0,
        mean_abs_adv: per(abs_adv, count),
        scale_std: per(std, samples),
        gini: per(gini_sum, samples),
        decisive_scale: per(dec, dec_n),
        other_scale: per(other, other_n),
    })
}

/// One Algorithm-style iteration over `episodes`: collect, shape, update.
pub fn run_iteration(
    state: &mut TrainerState,
    episodes: &[SyntheticEpisode],
    cfg: &TrainConfig,
) -> Result<IterationMetrics> {
    let old_params = state.params.snapshot();
    let batch = collect_rollouts(state, episodes, cfg)?;
    let mut metrics = batch_metrics(&batch, cfg, state.iteration)?;

    let (loss, grad) = allocator_loss(&state.params, &batch, cfg)?;
    state.alloc_opt.step(state.params.as_flat_mut(), &grad)?;
    metrics.loss_theta = loss.theta;
    metrics.loss_sim = loss.sim;
    metrics.loss_con = loss.con;
    metrics.loss_alloc = loss.total;

    if cfg.update_backbone {
        let mut total = 0.0;
        let mut grad = vec![0.0; state.surrogate.num_params()];
        for item in &batch {
            let weights = if cfg.sequential_correction {
                Some(
                    item.samples
                        .iter()
                        .map(|s| importance_weight(&state.params, &old_params, &item.episode.ctx, s))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            let (l, g) = backbone_ppo_loss(
                &state.surrogate,
                item.episode,
                &item.rollouts,
                &item.bundle.final_adv,
                cfg.clip_eps,
                weights.as_deref(),
            )?;
            total += l / batch.len() as f64;
            for (acc, gi) in grad.iter_mut().zip(g) {
                *acc += gi / batch.len() as f64;
            }
        }
        let mut values = state.surrogate.params();
        state.backbone_opt.step(&mut values, &grad)?;
        state.surrogate.set_params(&values)?;
        metrics.loss_phi = total;
    }
    metrics.check_finite()?;
    state.iteration += 1;
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<IterationMetrics>,
    pub state: TrainerState,
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    run_training_with(cfg, |_| {})
}

/// [`run_training`] with a callback after every iteration.
pub fn run_training_with(
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<TrainOutcome> {
    let mut state = TrainerState::new(cfg)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let episodes = training_batch(cfg, it)?;
        let m = run_iteration(&mut state, &episodes, cfg)?;
        on_iteration(&m);
        history.push(m);
    }
    Ok(TrainOutcome { history, state })
}

/// Mean of `f` over the last `frac` of `history`, and over the block before it.
pub fn tail_means(history: &[IterationMetrics], frac: f64, f: impl Fn(&IterationMetrics) -> f64) -> (f64, f64) {
    let n = history.len();
    let k = ((n as f64 * frac).round() as usize).clamp(1, n.max(1));
    let mean = |s: &[IterationMetrics]| {
        if s.is_empty() { f64::NAN } else { s.iter().map(&f).sum::<f64>() / s.len() as f64 }
    };
    let last = &history[n.saturating_sub(k)..];
    let prev = &history[n.saturating_sub(2 * k)..n.saturating_sub(k)];
    (mean(last), mean(prev))
}

/// Held-out behaviour of the deterministic (Beta-mean) allocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub mean_scale: f64,
    pub proxy_cost: f64,
    pub retention: f64,
    pub decisive_scale: f64,
    pub other_scale: f64,
    /// Expected oracle accuracy of the policy's allocations.
    pub accuracy: f64,
    /// Expected accuracy of a uniform allocation at the policy's mean scale.
    pub fixed_scale_accuracy: f64,
    pub median_scale_std: f64,
    /// Fraction of decisive frames recovered by top-`n_decisive` selection.
    pub topk_recall: f64,
    /// Expected recall of choosing `n_decisive` frames uniformly at random.
    pub random_recall: f64,
    pub per_episode_scales: Vec<Vec<f64>>,
}

pub fn held_out_episodes(cfg: &TrainConfig, count: usize) -> Result<Vec<SyntheticEpisode>> {
    (0..count as u64)
        .map(|i| episode_at(&cfg.env, cfg.seed, HELD_OUT_BASE + i))
        .collect()
}

pub fn evaluate_policy(
    params: &AllocatorParams,
    episodes: &[SyntheticEpisode],
    cfg: &TrainConfig,
) -> Result<EvalReport> {
    if episodes.is_empty() {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let bounds = cfg.budget.bounds();
    let mut per_episode_scales = Vec::with_capacity(episodes.len());
    let (mut acc, mut cost, mut ret) = (0.0, 0.0, 0.0);
    let (mut dec, mut dec_n, mut other, mut other_n) = (0.0, 0usize, 0.0, 0usize);
    let (mut found, mut wanted) = (0usize, 0usize);
    let mut stds = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let scales = allocator_forward(params, &ep.ctx)?.mean_scales(bounds);
        acc += correct_probability(perception_signal(&scales, ep, &cfg.env)?, &cfg.env);
        cost += proxy_cost(&scales, bounds)?;
        ret += retention_ratio(&scales, ep.ctx.frame_dims(), cfg.budget.patch_size)?;
        stds.push(mean_std(&scales).1);
        for (t, &s) in scales.iter().enumerate() {
            if ep.is_decisive(t) {
                dec += s;
                dec_n += 1;
            } else {
                other += s;
                other_n += 1;
            }
        }
        let k = ep.decisive_indices.len();
        if k > 0 {
            let kept = topk_select(&scales, k)?;
            found += kept.kept_indices.iter().filter(|&&i| ep.is_decisive(i)).count();
            wanted += k;
        }
        per_episode_scales.push(scales);
    }
    let n = episodes.len() as f64;
    let all: Vec<f64> = per_episode_scales.iter().flatten().copied().collect();
    let s_bar = mean_scale(&all);
    let fixed_acc = episodes
        .iter()
        .map(|ep| {
            let uniform = vec![s_bar; ep.num_frames()];
            Ok(correct_probability(perception_signal(&uniform, ep, &cfg.env)?, &cfg.env))
        })
        .sum::<Result<f64>>()?
        / n;
    stds.sort_by(f64::total_cmp);
    let t = cfg.env.num_frames as f64;
    let per = |x: f64, c: usize| if c == 0 { 0.0 } else { x / c as f64 };
    Ok(EvalReport {
        episodes: episodes.len(),
        mean_scale: s_bar,
        proxy_cost: cost / n,
        retention: ret / n,
        decisive_scale: per(dec, dec_n),
        other_scale: per(other, other_n),
        accuracy: acc / n,
        fixed_scale_accuracy: fixed_acc,
        median_scale_std: median(&stds),
        topk_recall: per(found as f64, wanted),
        random_recall: cfg.env.n_decisive as f64 / t,
        per_episode_scales,
    })
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            batch_episodes: 4,
            allocations_per_prompt: 4,
            env: EnvConfig { num_frames: 6, feature_dim: 5, ..EnvConfig::default() },
            allocator: AllocatorConfig { hidden: 6, ..AllocatorConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn clipped_term_cases() {
        assert_eq!(clipped_term(1.0, 2.0, 0.2), (2.0, 2.0));
        assert_eq!(clipped_term(1.4, 2.0, 0.2), (1.2 * 2.0, 0.0));
        assert_eq!(clipped_term(0.5, 2.0, 0.2), (1.0, 2.0));
        assert_eq!(clipped_term(0.5, -2.0, 0.2), (-1.6, 0.0));
        assert_eq!(clipped_term(1.5, -2.0, 0.2), (-3.0, -2.0));
    }

    #[test]
    fn unit_ratio_loss_is_negative_mean_advantage() {
        let cfg = small_cfg();
        let state = TrainerState::new(&cfg).unwrap();
        let eps = training_batch(&cfg, 0).unwrap();
        let batch = collect_rollouts(&state, &eps, &cfg).unwrap();
        for item in &batch {
            let adv = &item.bundle.per_allocation;
            let (loss, _) = allocator_ppo_loss(
                &state.params, &state.params, &item.episode.ctx, &item.samples, adv, 0.2,
            )
            .unwrap();
            let mean = adv.iter().sum::<f64>() / adv.len() as f64;
            assert!((loss + mean).abs() < 1e-12);
            let zeros = vec![0.0; adv.len()];
            let (l0, g0) = allocator_ppo_loss(
                &state.params, &state.params, &item.episode.ctx, &item.samples, &zeros, 0.2,
            )
            .unwrap();
            assert_eq!(l0, 0.0);
            assert!(g0.iter().all(|g| *g == 0.0));
        }
    }

    #[test]
    fn smoke_and_determinism() {
        let cfg = TrainConfig { allocations_per_prompt: 2, ..small_cfg() };
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
        assert_eq!(a.history.len(), 3);
        let none = run_training(&TrainConfig { iterations: 0, ..cfg.clone() }).unwrap();
        assert!(none.history.is_empty());
        assert_eq!(none.state.params, TrainerState::new(&cfg).unwrap().params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Adam::new(0.1, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        assert!(opt.step(&mut p, &[f64::NAN, 0.0]).is_err());
    }
}
