//! Synthetic bandit environment.
//!
//! Every episode hides a few decisive frames among near-duplicates and
//! distractors. The chance of answering correctly rises with the scale given
//! to the best decisive frame: `e = max_t sigmoid((s_t - s_req) / kappa_env)`,
//! then `p = p_min + (p_max - p_min) e`. Each episode carries `K` candidate
//! answers, and candidate `correct_option` is the correct one.

use crate::budget::FrameDims;
use crate::capo::{correctness_from_reward, RolloutOutcome};
use crate::error::{Error, Result};
use crate::numerics::{sigmoid, RandomStream};
use crate::policy::EpisodeContext;
use crate::rewards::{
    combined_scalar_reward, task_reward, Prediction, Segment, TaskKind, TaskSpec,
    DEFAULT_FORMAT_WEIGHT,
};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};

const EPISODE_LABEL: u64 = 0x0065_7069_736f_6465;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub num_frames: usize,
    pub feature_dim: usize,
    pub num_options: usize,
    pub n_decisive: usize,
    pub s_req: f64,
    pub kappa_env: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub redundancy_rate: f64,
    /// Relative weights of task kinds; normalised on use.
    pub task_mix: BTreeMap<TaskKind, f64>,
    /// Cosine between a decisive frame's evidence direction and the query.
    pub evidence_strength: f64,
    /// Relative norm of the perturbation added to a near-duplicate frame.
    pub copy_noise: f64,
    /// Lets decisive frames be chosen among near-duplicates as well.
    pub decisive_among_copies: bool,
    pub frame_dims: FrameDims,
    pub format_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            num_frames: 16,
            feature_dim: 16,
            num_options: 4,
            n_decisive: 1,
            s_req: 1.2,
            kappa_env: 0.15,
            p_min: 0.1,
            p_max: 0.95,
            redundancy_rate: 0.5,
            task_mix: TaskKind::ALL.iter().map(|&k| (k, 1.0)).collect(),
            evidence_strength: 0.8,
            copy_noise: 0.1,
            decisive_among_copies: false,
            frame_dims: (448, 448),
            format_weight: DEFAULT_FORMAT_WEIGHT,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self, bounds: (f64, f64)) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.num_frames == 0 || self.feature_dim == 0 {
            return fail("env needs at least one frame and one feature".into());
        }
        if self.num_options < 2 {
            return fail(format!("env.num_options = {} leaves no wrong answer", self.num_options));
        }
        if self.n_decisive > self.num_frames {
            return fail(format!(
                "env.n_decisive = {} exceeds {} frames",
                self.n_decisive, self.num_frames
            ));
        }
        if !(bounds.0 < self.s_req && self.s_req < bounds.1) {
            return fail(format!(
                "env.s_req = {} must lie strictly inside ({}, {})",
                self.s_req, bounds.0, bounds.1
            ));
        }
        if !(self.kappa_env > 0.0 && self.kappa_env.is_finite()) {
            return fail("env.kappa_env must be positive".into());
        }
        if !(0.0 <= self.p_min && self.p_min < self.p_max && self.p_max <= 1.0) {
            return fail(format!(
                "env requires 0 <= p_min < p_max <= 1, got {} and {}",
                self.p_min, self.p_max
            ));
        }
        if !(0.0..=1.0).contains(&self.redundancy_rate) {
            return fail("env.redundancy_rate must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.evidence_strength) {
            return fail("env.evidence_strength must lie in [0, 1]".into());
        }
        if !(self.copy_noise >= 0.0 && self.copy_noise <= 0.3) {
            return fail("env.copy_noise must lie in [0, 0.3]".into());
        }
        if self.task_mix.values().any(|w| !(*w >= 0.0 && w.is_finite()))
            || self.task_mix.values().sum::<f64>() <= 0.0
        {
            return fail("env.task_mix needs nonnegative weights with a positive sum".into());
        }
        if self.frame_dims.0 == 0 || self.frame_dims.1 == 0 {
            return fail("env.frame_dims must be positive".into());
        }
        if !(self.format_weight >= 0.0 && self.format_weight.is_finite()) {
            return fail("env.format_weight must be nonnegative".into());
        }
        Ok(())
    }

    fn sample_kind(&self, rng: &mut RandomStream) -> TaskKind {
        let total: f64 = self.task_mix.values().sum();
        let mut u = rng.uniform() * total;
        let mut last = TaskKind::Choice;
        for (&kind, &w) in &self.task_mix {
            if w <= 0.0 {
                continue;
            }
            last = kind;
            if u < w {
                return kind;
            }
            u -= w;
        }
        last
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEpisode {
    pub ctx: EpisodeContext,
    pub decisive_indices: Vec<usize>,
    pub task: TaskSpec,
    pub correct_option: usize,
    pub candidates: Vec<Prediction>,
}

impl SyntheticEpisode {
    pub fn num_frames(&self) -> usize {
        self.ctx.num_frames()
    }

    pub fn is_decisive(&self, t: usize) -> bool {
        self.decisive_indices.contains(&t)
    }

    pub fn num_options(&self) -> usize {
        self.candidates.len()
    }

    fn validate(&self) -> Result<()> {
        let t = self.num_frames();
        if self.decisive_indices.iter().any(|&i| i >= t)
            || self.decisive_indices.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::contract("decisive indices must be increasing and in range"));
        }
        if self.correct_option >= self.candidates.len() {
            return Err(Error::contract(format!(
                "correct option {} of {} candidates",
                self.correct_option,
                self.candidates.len()
            )));
        }
        Ok(())
    }
}

fn gaussian(d: usize, rng: &mut RandomStream) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v).max(f64::MIN_POSITIVE);
    v.into_iter().map(|x| x / n).collect()
}

/// `k` distinct indices from `pool`, sorted increasingly.
fn choose(pool: &[usize], k: usize, rng: &mut RandomStream) -> Vec<usize> {
    let mut pool = pool.to_vec();
    for i in 0..k {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    let mut out = pool[..k].to_vec();
    out.sort_unstable();
    out
}

const WORDS: [&str; 24] = [
    "red", "blue", "green", "dog", "cat", "car", "tree", "river", "house", "ball", "chair",
    "lamp", "boat", "bird", "horse", "train", "apple", "clock", "phone", "cup", "door", "kite",
    "shoe", "book",
];
const FILLER: [&str; 12] = [
    "then", "slowly", "near", "under", "after", "quietly", "beside", "over", "again", "while",
    "across", "inside",
];

fn letter(k: usize) -> String {
    char::from(b'A' + (k % 26) as u8).to_string()
}

fn segment(a: f64, b: f64) -> Segment {
    Segment { start: a, end: b }
}

/// A gold segment around the first decisive frame, a near-miss and
/// `wrong` segments far from the gold one.
fn segments(
    num_frames: usize,
    anchor: usize,
    wrong: usize,
    rng: &mut RandomStream,
) -> (Segment, Segment, Vec<Segment>) {
    let t = num_frames as f64;
    let start = (anchor as f64 - 1.0).max(0.0);
    let gold = segment(start, (anchor as f64 + 2.0).min(t.max(start + 1.0)));
    let len = gold.length();
    let near = segment(gold.start + 0.25 * len, gold.end + 0.25 * len);
    let far: Vec<f64> = (0..num_frames)
        .map(|s| s as f64)
        .filter(|&s| s + len <= gold.start || s >= gold.end)
        .filter(|&s| s + len <= t)
        .collect();
    let wrong = (0..wrong)
        .map(|i| {
            if far.is_empty() {
                // clips too short for a disjoint window get one past the end
                segment(t + 1.0 + i as f64, t + 1.0 + i as f64 + len)
            } else {
                let s = far[rng.below(far.len())];
                segment(s, s + len)
            }
        })
        .collect();
    (gold, near, wrong)
}

fn build_task(
    kind: TaskKind,
    k: usize,
    correct: usize,
    num_frames: usize,
    anchor: usize,
    rng: &mut RandomStream,
) -> (TaskSpec, Vec<Prediction>) {
    let pred = |text: String, segs: Vec<Segment>| Prediction {
        answer_text: text,
        predicted_segments: segs,
        format_ok: true,
    };
    let others: Vec<usize> = (0..k).filter(|&i| i != correct).collect();
    let mut slots: Vec<Option<Prediction>> = vec![None; k];
    let spec = match kind {
        TaskKind::Choice => {
            for (i, s) in slots.iter_mut().enumerate() {
                *s = Some(pred(format!("({})", letter(i)), vec![]));
            }
            TaskSpec { kind, gold_answer: letter(correct), gold_segments: vec![] }
        }
        TaskKind::Exact | TaskKind::GroundingQa => {
            let picks = choose(&(0..WORDS.len()).collect::<Vec<_>>(), k, rng);
            let gold = WORDS[picks[0]].to_string();
            let (gold_seg, near, far) = segments(num_frames, anchor, k - 1, rng);
            let grounded = kind == TaskKind::GroundingQa;
            let segs = |s: Segment| if grounded { vec![s] } else { vec![] };
            slots[correct] = Some(pred(gold.to_uppercase(), segs(near)));
            for (j, &o) in others.iter().enumerate() {
                slots[o] = Some(pred(WORDS[picks[j + 1]].to_string(), segs(far[j])));
            }
            TaskSpec { kind, gold_answer: gold, gold_segments: segs(gold_seg) }
        }
        TaskKind::Numeric => {
            let gold = (rng.uniform() * 10_000.0).round() / 100.0;
            let jitter = if rng.bernoulli(0.5) { 0.004 } else { -0.004 };
            slots[correct] = Some(pred(format!("{:.3}", gold + jitter), vec![]));
            for (j, &o) in others.iter().enumerate() {
                let off = (j as f64 + 1.0) * if rng.bernoulli(0.5) { 1.5 } else { -1.5 };
                slots[o] = Some(pred(format!("{:.2}", gold + off), vec![]));
            }
            TaskSpec { kind, gold_answer: format!("{gold:.2}"), gold_segments: vec![] }
        }
        TaskKind::Generation => {
            let words: Vec<&str> = (0..8).map(|_| WORDS[rng.below(WORDS.len())]).collect();
            let mut near = words.clone();
            let swap = rng.below(near.len());
            near[swap] = "something";
            slots[correct] = Some(pred(near.join(" "), vec![]));
            for &o in &others {
                let filler: Vec<&str> = (0..8).map(|_| FILLER[rng.below(FILLER.len())]).collect();
                slots[o] = Some(pred(filler.join(" "), vec![]));
            }
            TaskSpec { kind, gold_answer: words.join(" "), gold_segments: vec![] }
        }
        TaskKind::TemporalGrounding => {
            let (gold_seg, near, far) = segments(num_frames, anchor, k - 1, rng);
            slots[correct] = Some(pred(String::new(), vec![near]));
            for (j, &o) in others.iter().enumerate() {
                slots[o] = Some(pred(String::new(), vec![far[j]]));
            }
            TaskSpec { kind, gold_answer: String::new(), gold_segments: vec![gold_seg] }
        }
    };
    (spec, slots.into_iter().map(|s| s.expect("every option filled")).collect())
}

/// Draws one episode from `rng`.
pub fn generate_episode(cfg: &EnvConfig, rng: &mut RandomStream) -> Result<SyntheticEpisode> {
    let t_count = cfg.num_frames;
    let d = cfg.feature_dim;
    let query = gaussian(d, rng);
    let q_hat = unit(query.clone());

    // copy structure first so decisive frames can avoid (or join) duplicates
    let copies: Vec<bool> = (0..t_count)
        .map(|t| t > 0 && rng.bernoulli(cfg.redundancy_rate))
        .collect();
    let all: Vec<usize> = (0..t_count).collect();
    let decisive = if cfg.decisive_among_copies {
        choose(&all, cfg.n_decisive, rng)
    } else {
        let fresh: Vec<usize> = all.iter().copied().filter(|&t| !copies[t]).collect();
        let mut picked = choose(&fresh, cfg.n_decisive.min(fresh.len()), rng);
        if picked.len() < cfg.n_decisive {
            let rest: Vec<usize> = all.iter().copied().filter(|t| !picked.contains(t)).collect();
            picked.extend(choose(&rest, cfg.n_decisive - picked.len(), rng));
            picked.sort_unstable();
        }
        picked
    };
    let is_decisive = |t: usize| decisive.binary_search(&t).is_ok();

    let mut features: Vec<Vec<f64>> = Vec::with_capacity(t_count);
    for t in 0..t_count {
        let copy_ok = copies[t]
            && (cfg.decisive_among_copies || (!is_decisive(t) && !is_decisive(t - 1)));
        let mut f = if copy_ok {
            let prev = &features[t - 1];
            let noise = unit(gaussian(d, rng));
            let scale = cfg.copy_noise * norm(prev);
            prev.iter().zip(&noise).map(|(p, n)| p + scale * n).collect()
        } else {
            gaussian(d, rng)
        };
        if is_decisive(t) && cfg.evidence_strength > 0.0 {
            let mu = cfg.evidence_strength;
            let r = norm(&f);
            let dir = unit(f.clone());
            f = dir
                .iter()
                .zip(&q_hat)
                .map(|(x, q)| r * ((1.0 - mu * mu).sqrt() * x + mu * q))
                .collect();
        }
        features.push(f);
    }

    let kind = cfg.sample_kind(rng);
    let correct_option = rng.below(cfg.num_options);
    let anchor = decisive.first().copied().unwrap_or(t_count / 2);
    let (task, candidates) =
        build_task(kind, cfg.num_options, correct_option, t_count, anchor, rng);
    let ctx = EpisodeContext::new(features, query, vec![cfg.frame_dims; t_count])?;
    Ok(SyntheticEpisode {
        ctx,
        decisive_indices: decisive,
        task,
        correct_option,
        candidates,
    })
}

/// Episode `index` of the deterministic stream rooted at `seed`.
pub fn episode_at(cfg: &EnvConfig, seed: u64, index: u64) -> Result<SyntheticEpisode> {
    let mut rng = RandomStream::new(seed, 0).derive(&[EPISODE_LABEL, index]);
    generate_episode(cfg, &mut rng)
}

pub fn perception_signal(scales: &[f64], episode: &SyntheticEpisode, cfg: &EnvConfig) -> Result<f64> {
    if scales.len() != episode.num_frames() {
        return Err(Error::contract(format!(
            "{} scales for an episode of {} frames",
            scales.len(),
            episode.num_frames()
        )));
    }
    Ok(episode
        .decisive_indices
        .iter()
        .map(|&t| sigmoid((scales[t] - cfg.s_req) / cfg.kappa_env))
        .fold(0.0, f64::max))
}

/// `p_min + (p_max - p_min) e`.
pub fn correct_probability(e: f64, cfg: &EnvConfig) -> f64 {
    cfg.p_min + (cfg.p_max - cfg.p_min) * e
}

/// One backbone response, scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub emitted_option: usize,
    pub task_reward: f64,
    /// Task reward after the format penalty; the quantity normalised by GRPO.
    pub scalar_reward: f64,
    pub correct: bool,
    pub perception: f64,
}

impl Rollout {
    pub fn outcome(&self, allocation_index: usize, rollout_index: usize) -> RolloutOutcome {
        RolloutOutcome {
            task_reward: self.task_reward,
            correct: self.correct,
            allocation_index,
            rollout_index,
        }
    }
}

/// Scores candidate `option` of `episode`.
pub fn score_option(
    episode: &SyntheticEpisode,
    option: usize,
    perception: f64,
    cfg: &EnvConfig,
) -> Result<Rollout> {
    let pred = episode.candidates.get(option).ok_or_else(|| {
        Error::contract(format!("option {option} of {} candidates", episode.num_options()))
    })?;
    let r = task_reward(pred, &episode.task)?;
    Ok(Rollout {
        emitted_option: option,
        task_reward: r,
        scalar_reward: combined_scalar_reward(r, pred.format_ok, cfg.format_weight),
        correct: correctness_from_reward(r, episode.task.kind)?,
        perception,
    })
}

/// Oracle backbone: correct with probability `p(e)`, otherwise a uniformly
/// chosen wrong option.
pub fn oracle_rollout(
    scales: &[f64],
    episode: &SyntheticEpisode,
    cfg: &EnvConfig,
    rng: &mut RandomStream,
) -> Result<Rollout> {
    let e = perception_signal(scales, episode, cfg)?;
    let option = if rng.bernoulli(correct_probability(e, cfg)) {
        episode.correct_option
    } else {
        let k = episode.num_options();
        let j = rng.below(k - 1);
        if j >= episode.correct_option { j + 1 } else { j }
    };
    score_option(episode, option, e, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    Oracle,
    Trainable,
}

/// One-token categorical stand-in for the backbone policy:
/// `logit_k = bias_k + g e [k = correct]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSurrogate {
    pub mode: SurrogateMode,
    pub option_bias: Vec<f64>,
    pub evidence_gain: f64,
}

impl BackboneSurrogate {
    pub fn oracle(k: usize) -> Self {
        Self { mode: SurrogateMode::Oracle, option_bias: vec![0.0; k], evidence_gain: 0.0 }
    }

    pub fn trainable(k: usize, evidence_gain: f64) -> Self {
        Self { mode: SurrogateMode::Trainable, option_bias: vec![0.0; k], evidence_gain }
    }

    pub fn num_params(&self) -> usize {
        self.option_bias.len() + 1
    }

    /// `[bias_0, .., bias_{K-1}, g]`.
    pub fn params(&self) -> Vec<f64> {
        let mut v = self.option_bias.clone();
        v.push(self.evidence_gain);
        v
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::contract(format!(
                "surrogate has {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "backbone surrogate update".into(),
                value: values.iter().copied().find(|v| !v.is_finite()).unwrap_or(f64::NAN),
            });
        }
        let k = self.option_bias.len();
        self.option_bias.copy_from_slice(&values[..k]);
        self.evidence_gain = values[k];
        Ok(())
    }

    fn log_softmax(&self, e: f64, correct: usize) -> Vec<f64> {
        let logits: Vec<f64> = self
            .option_bias
            .iter()
            .enumerate()
            .map(|(k, b)| b + if k == correct { self.evidence_gain * e } else { 0.0 })
            .collect();
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + logits.iter().map(|l| (l - top).exp()).sum::<f64>().ln();
        logits.into_iter().map(|l| l - lse).collect()
    }

    fn check(&self, episode: &SyntheticEpisode, option: usize) -> Result<()> {
        if self.option_bias.len() != episode.num_options() {
            return Err(Error::contract(format!(
                "surrogate over {} options, episode has {}",
                self.option_bias.len(),
                episode.num_options()
            )));
        }
        if option >= self.option_bias.len() {
            return Err(Error::contract(format!(
                "option {option} out of range for {} options",
                self.option_bias.len()
            )));
        }
        Ok(())
    }
}

/// Log-probability of emitting `option` given perception `e`.
pub fn backbone_log_prob_at(
    surrogate: &BackboneSurrogate,
    e: f64,
    episode: &SyntheticEpisode,
    option: usize,
) -> Result<f64> {
    surrogate.check(episode, option)?;
    Ok(surrogate.log_softmax(e, episode.correct_option)[option])
}

pub fn backbone_log_prob(
    surrogate: &BackboneSurrogate,
    scales: &[f64],
    episode: &SyntheticEpisode,
    option: usize,
    cfg: &EnvConfig,
) -> Result<f64> {
    let e = perception_signal(scales, episode, cfg)?;
    backbone_log_prob_at(surrogate, e, episode, option)
}

/// Gradient of [`backbone_log_prob_at`] in the [`BackboneSurrogate::params`] layout.
pub fn backbone_log_prob_grad(
    surrogate: &BackboneSurrogate,
    e: f64,
    episode: &SyntheticEpisode,
    option: usize,
) -> Result<Vec<f64>> {
    surrogate.check(episode, option)?;
    let c = episode.correct_option;
    let probs: Vec<f64> = surrogate.log_softmax(e, c).into_iter().map(f64::exp).collect();
    let mut grad: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, p)| f64::from(u8::from(k == option)) - p)
        .collect();
    grad.push(e * (f64::from(u8::from(option == c)) - probs[c]));
    Ok(grad)
}

/// Samples an option from the trainable surrogate and scores it.
pub fn surrogate_rollout(
    surrogate: &BackboneSurrogate,
    scales: &[f64],
    episode: &SyntheticEpisode,
    cfg: &EnvConfig,
    rng: &mut RandomStream,
) -> Result<(Rollout, f64)> {
    let e = perception_signal(scales, episode, cfg)?;
    surrogate.check(episode, 0)?;
    let logp = surrogate.log_softmax(e, episode.correct_option);
    let u = rng.uniform();
    let mut acc = 0.0;
    let mut option = logp.len() - 1;
    for (k, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            option = k;
            break;
        }
    }
    Ok((score_option(episode, option, e, cfg)?, logp[option]))
}

/// Writes one JSON object per line.
pub fn dump_episodes<W: Write>(episodes: &[SyntheticEpisode], mut out: W) -> Result<()> {
    for ep in episodes {
        let line = serde_json::to_string(ep).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<episode stream>", e))?;
    }
    Ok(())
}

pub fn load_episodes<R: BufRead>(input: R) -> Result<Vec<SyntheticEpisode>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<episode stream>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep: SyntheticEpisode = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("episode line {}: {e}", n + 1)))?;
        // re-run constructor checks that deserialisation skipped
        let ctx = EpisodeContext::new(
            ep.ctx.frame_features().to_vec(),
            ep.ctx.query().to_vec(),
            ep.ctx.frame_dims().to_vec(),
        )?;
        let ep = SyntheticEpisode { ctx, ..ep };
        ep.validate()?;
        out.push(ep);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, finite_diff_check};
    use proptest::prelude::*;

    const BOUNDS: (f64, f64) = (0.2, 1.8);

    #[test]
    fn default_config_is_valid() {
        EnvConfig::default().validate(BOUNDS).unwrap();
        let bad = EnvConfig { p_min: 0.9, p_max: 0.5, ..EnvConfig::default() };
        assert!(bad.validate(BOUNDS).is_err());
        let bad = EnvConfig { s_req: 1.8, ..EnvConfig::default() };
        assert!(bad.validate(BOUNDS).is_err());
    }

    #[test]
    fn full_redundancy_gives_similar_neighbours() {
        let cfg = EnvConfig { redundancy_rate: 1.0, n_decisive: 0, ..EnvConfig::default() };
        for i in 0..20 {
            let ep = episode_at(&cfg, 3, i).unwrap();
            assert!(ep.decisive_indices.is_empty());
            for w in ep.ctx.frame_features().windows(2) {
                assert!(cosine(&w[0], &w[1]).unwrap() >= 0.95);
            }
        }
    }

    #[test]
    fn one_decisive_frame_and_determinism() {
        let cfg = EnvConfig::default();
        for i in 0..50 {
            let ep = episode_at(&cfg, 11, i).unwrap();
            assert_eq!(ep.decisive_indices.len(), 1);
            assert_eq!(ep, episode_at(&cfg, 11, i).unwrap());
        }
        assert_ne!(episode_at(&cfg, 11, 0).unwrap(), episode_at(&cfg, 11, 1).unwrap());
    }

    #[test]
    fn candidates_score_as_labelled() {
        let cfg = EnvConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..300 {
            let ep = episode_at(&cfg, 5, i).unwrap();
            seen.insert(ep.task.kind);
            for k in 0..ep.num_options() {
                let r = score_option(&ep, k, 1.0, &cfg).unwrap();
                assert_eq!(r.correct, k == ep.correct_option, "{:?} option {k}", ep.task);
                assert_eq!(r.scalar_reward, r.task_reward);
            }
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn perception_examples() {
        let cfg = EnvConfig::default();
        let mut ep = episode_at(&cfg, 1, 0).unwrap();
        let d = ep.decisive_indices[0];
        let mut s = vec![0.2; 16];
        s[d] = cfg.s_req;
        assert!((perception_signal(&s, &ep, &cfg).unwrap() - 0.5).abs() < 1e-15);
        let sharp = EnvConfig { kappa_env: 0.01, ..cfg.clone() };
        s[d] = 1.8;
        assert!(perception_signal(&s, &ep, &sharp).unwrap() > 1.0 - 1e-12);

        let other = (d + 1) % 16;
        ep.decisive_indices = vec![d.min(other), d.max(other)];
        let z = |sig: f64| cfg.s_req + cfg.kappa_env * (sig / (1.0 - sig)).ln();
        s[ep.decisive_indices[0]] = z(0.3);
        s[ep.decisive_indices[1]] = z(0.7);
        assert!((perception_signal(&s, &ep, &cfg).unwrap() - 0.7).abs() < 1e-12);
        ep.decisive_indices.clear();
        assert_eq!(perception_signal(&s, &ep, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn oracle_limits_and_binomial_rate() {
        let base = EnvConfig { task_mix: [(TaskKind::Exact, 1.0)].into(), ..EnvConfig::default() };
        let ep = episode_at(&base, 2, 0).unwrap();
        let d = ep.decisive_indices[0];
        let mut rng = RandomStream::new(9, 1);
        let always = EnvConfig { p_min: 0.0, p_max: 1.0, kappa_env: 1e-3, ..base.clone() };
        let mut s = vec![1.0; 16];
        s[d] = 1.8;
        for _ in 0..200 {
            let r = oracle_rollout(&s, &ep, &always, &mut rng).unwrap();
            assert!(r.correct);
            assert_eq!(r.task_reward, 1.0);
        }
        s[d] = 0.2;
        for _ in 0..200 {
            assert!(!oracle_rollout(&s, &ep, &always, &mut rng).unwrap().correct);
        }
        // p = 0.1 + 0.85 * 0.5 = 0.525 when the decisive frame sits at s_req
        s[d] = base.s_req;
        let n = 10_000;
        let hits = (0..n)
            .filter(|_| oracle_rollout(&s, &ep, &base, &mut rng).unwrap().correct)
            .count();
        let p = 0.525;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn surrogate_log_prob_examples() {
        let cfg = EnvConfig::default();
        let ep = episode_at(&cfg, 4, 0).unwrap();
        let flat = BackboneSurrogate::trainable(4, 0.0);
        for k in 0..4 {
            let lp = backbone_log_prob_at(&flat, 0.7, &ep, k).unwrap();
            assert!((lp - 0.25f64.ln()).abs() < 1e-12);
        }
        let sharp = BackboneSurrogate::trainable(4, 200.0);
        assert!(backbone_log_prob_at(&sharp, 0.5, &ep, ep.correct_option).unwrap() > -1e-12);
        assert!(backbone_log_prob_at(&flat, 0.5, &ep, 4).is_err());
    }

    proptest! {
        #[test]
        fn surrogate_gradient_and_normalisation(
            bias in prop::collection::vec(-2.0f64..2.0, 4),
            g in -3.0f64..6.0,
            e in 0.0f64..1.0,
            option in 0usize..4,
            idx in 0u64..50,
        ) {
            let ep = episode_at(&EnvConfig::default(), 8, idx).unwrap();
            let s = BackboneSurrogate { mode: SurrogateMode::Trainable, option_bias: bias, evidence_gain: g };
            let total: f64 = (0..4).map(|k| backbone_log_prob_at(&s, e, &ep, k).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let eval = |p: &[f64]| {
                let mut t = s.clone();
                t.set_params(p).unwrap();
                backbone_log_prob_at(&t, e, &ep, option).unwrap()
            };
            let grad = backbone_log_prob_grad(&s, e, &ep, option).unwrap();
            let rep = finite_diff_check(eval, |_| grad.clone(), &s.params(), 1e-6).unwrap();
            prop_assert!(rep.passes(1e-5), "{:?}", rep);
        }

        #[test]
        fn perception_depends_only_on_decisive_scales(
            scales in prop::collection::vec(0.2f64..1.8, 16),
            t in 0usize..16,
            bump in 0.0f64..0.5,
            idx in 0u64..100,
        ) {
            let cfg = EnvConfig { n_decisive: 2, ..EnvConfig::default() };
            let ep = episode_at(&cfg, 6, idx).unwrap();
            let before = perception_signal(&scales, &ep, &cfg).unwrap();
            let mut up = scales.clone();
            up[t] += bump;
            let after = perception_signal(&up, &ep, &cfg).unwrap();
            if ep.is_decisive(t) {
                prop_assert!(after >= before);
            } else {
                prop_assert_eq!(after, before);
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = EnvConfig::default();
        let eps: Vec<_> = (0..5).map(|i| episode_at(&cfg, 7, i).unwrap()).collect();
        let mut buf = Vec::new();
        dump_episodes(&eps, &mut buf).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 5);
        assert_eq!(load_episodes(buf.as_slice()).unwrap(), eps);
        assert!(load_episodes("{\"nope\": 1}\n".as_bytes()).is_err());
    }
}
