//! The allocator: a per-frame fusion MLP emitting Beta parameters over latent
//! scale actions.
//!
//! Each frame sees `z_t = [f_t ; q ; mean f ; cos(f_t, q)]`, optionally
//! followed by `cos(f_t, f_{t-1})` when the adjacent-frame cue is enabled.
//! One tanh hidden layer feeds two softplus heads:
//! `alpha_t = softplus(w_a . h_t + b_a) + floor`, and likewise for `beta_t`.

use crate::budget::{check_bounds, FrameDims};
use crate::error::{ensure_finite, Error, Result};
use crate::numerics::{
    beta_log_pdf, beta_log_pdf_grad, beta_sample, cosine, sigmoid, softplus, BetaParams,
    RandomStream,
};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One bandit context: per-frame coarse features, the query embedding and the
/// native frame sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeContext {
    frame_features: Vec<Vec<f64>>,
    query: Vec<f64>,
    frame_dims: Vec<FrameDims>,
}

impl EpisodeContext {
    pub fn new(
        frame_features: Vec<Vec<f64>>,
        query: Vec<f64>,
        frame_dims: Vec<FrameDims>,
    ) -> Result<Self> {
        if frame_features.is_empty() {
            return Err(Error::contract("an episode needs at least one frame"));
        }
        let d = query.len();
        if d == 0 {
            return Err(Error::contract("query embedding is empty"));
        }
        if let Some((t, row)) = frame_features.iter().enumerate().find(|(_, r)| r.len() != d) {
            return Err(Error::contract(format!(
                "frame {t} has feature dimension {}, query has {d}",
                row.len()
            )));
        }
        if frame_dims.len() != frame_features.len() {
            return Err(Error::contract(format!(
                "{} frame dims for {} frames",
                frame_dims.len(),
                frame_features.len()
            )));
        }
        if frame_dims.iter().any(|&(h, w)| h == 0 || w == 0) {
            return Err(Error::contract("frame dims must be positive"));
        }
        let finite = frame_features.iter().flatten().chain(&query).all(|x| x.is_finite());
        if !finite {
            return Err(Error::contract("features must be finite"));
        }
        Ok(Self {
            frame_features,
            query,
            frame_dims,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frame_features.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.query.len()
    }

    pub fn frame_features(&self) -> &[Vec<f64>] {
        &self.frame_features
    }

    pub fn query(&self) -> &[f64] {
        &self.query
    }

    pub fn frame_dims(&self) -> &[FrameDims] {
        &self.frame_dims
    }

    /// The same episode with frames reordered by `order` (a permutation).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.num_frames()];
        for &i in order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::contract("order is not a permutation"));
            }
        }
        if order.len() != seen.len() {
            return Err(Error::contract("order is not a permutation"));
        }
        Self::new(
            order.iter().map(|&i| self.frame_features[i].clone()).collect(),
            self.query.clone(),
            order.iter().map(|&i| self.frame_dims[i]).collect(),
        )
    }

    /// Fusion input rows, one per frame.
    fn fusion_inputs(&self, temporal_cue: bool) -> Vec<Vec<f64>> {
        let t_count = self.num_frames();
        let d = self.feature_dim();
        let mut pooled = vec![0.0; d];
        for row in &self.frame_features {
            for (p, x) in pooled.iter_mut().zip(row) {
                *p += x / t_count as f64;
            }
        }
        (0..t_count)
            .map(|t| {
                let f = &self.frame_features[t];
                let mut z = Vec::with_capacity(3 * d + 2);
                z.extend_from_slice(f);
                z.extend_from_slice(&self.query);
                z.extend_from_slice(&pooled);
                z.push(cosine(f, &self.query).unwrap_or(0.0));
                if temporal_cue {
                    let prev = t
                        .checked_sub(1)
                        .and_then(|p| cosine(f, &self.frame_features[p]))
                        .unwrap_or(0.0);
                    z.push(prev);
                }
                z
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AllocatorShape {
    pub feature_dim: usize,
    pub hidden: usize,
    /// Appends the cosine to the previous frame to each fusion input.
    pub temporal_cue: bool,
}

impl Default for AllocatorShape {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            hidden: 32,
            temporal_cue: false,
        }
    }
}

impl AllocatorShape {
    pub fn input_dim(&self) -> usize {
        3 * self.feature_dim + 1 + usize::from(self.temporal_cue)
    }

    pub fn num_params(&self) -> usize {
        let h = self.hidden;
        self.input_dim() * h + h + 2 * (h + 1)
    }

    // offsets into the flat parameter vector
    fn fusion_bias_at(&self) -> usize {
        self.input_dim() * self.hidden
    }
    fn head_alpha_at(&self) -> usize {
        self.fusion_bias_at() + self.hidden
    }
    fn head_beta_at(&self) -> usize {
        self.head_alpha_at() + self.hidden + 1
    }
}

/// Allocator weights stored as one flat vector:
/// `fusion (input_dim x hidden, row-major) | fusion bias | w_alpha | b_alpha | w_beta | b_beta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocatorParams {
    shape: AllocatorShape,
    alpha_floor: f64,
    values: Vec<f64>,
}

/// Initial head bias giving `alpha = beta = 1.5` with the default floor.
const INITIAL_CONCENTRATION: f64 = 1.5;

impl AllocatorParams {
    /// Glorot-uniform fusion weights, zero biases, zero head weights, and head
    /// biases chosen so every frame starts at `Beta(1.5, 1.5)`.
    pub fn init(shape: AllocatorShape, alpha_floor: f64, rng: &mut RandomStream) -> Result<Self> {
        let mut p = Self::zeros(shape, alpha_floor)?;
        let limit = (6.0 / (shape.input_dim() + shape.hidden) as f64).sqrt();
        for w in p.fusion_weights_mut() {
            *w = limit * (2.0 * rng.uniform() - 1.0);
        }
        let target = (INITIAL_CONCENTRATION - alpha_floor).max(1e-3);
        // inverse softplus
        let bias = target.exp_m1().ln();
        p.values[shape.head_alpha_at() + shape.hidden] = bias;
        p.values[shape.head_beta_at() + shape.hidden] = bias;
        Ok(p)
    }

    pub fn zeros(shape: AllocatorShape, alpha_floor: f64) -> Result<Self> {
        if shape.feature_dim == 0 || shape.hidden == 0 {
            return Err(Error::config("allocator dimensions must be positive"));
        }
        if !(alpha_floor > 0.0 && alpha_floor.is_finite()) {
            return Err(Error::config(format!(
                "alpha_floor must be positive, got {alpha_floor}"
            )));
        }
        Ok(Self {
            shape,
            alpha_floor,
            values: vec![0.0; shape.num_params()],
        })
    }

    pub fn from_flat(shape: AllocatorShape, alpha_floor: f64, values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(shape, alpha_floor)?;
        if values.len() != p.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                p.values.len(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("allocator parameters must be finite"));
        }
        p.values = values;
        Ok(p)
    }

    pub fn shape(&self) -> AllocatorShape {
        self.shape
    }

    pub fn alpha_floor(&self) -> f64 {
        self.alpha_floor
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn fusion_weights(&self) -> &[f64] {
        &self.values[..self.shape.fusion_bias_at()]
    }

    pub fn fusion_weights_mut(&mut self) -> &mut [f64] {
        let end = self.shape.fusion_bias_at();
        &mut self.values[..end]
    }

    pub fn fusion_bias(&self) -> &[f64] {
        &self.values[self.shape.fusion_bias_at()..self.shape.head_alpha_at()]
    }

    /// `(weights, bias)` of the alpha head.
    pub fn head_alpha(&self) -> (&[f64], f64) {
        let at = self.shape.head_alpha_at();
        let h = self.shape.hidden;
        (&self.values[at..at + h], self.values[at + h])
    }

    pub fn head_beta(&self) -> (&[f64], f64) {
        let at = self.shape.head_beta_at();
        let h = self.shape.hidden;
        (&self.values[at..at + h], self.values[at + h])
    }

    /// Frozen value copy used as the behaviour policy for importance ratios.
    pub fn snapshot(&self) -> AllocatorParams {
        self.clone()
    }

    fn check_context(&self, ctx: &EpisodeContext) -> Result<()> {
        if ctx.feature_dim() != self.shape.feature_dim {
            return Err(Error::contract(format!(
                "context feature dimension {} does not match allocator feature_dim {}",
                ctx.feature_dim(),
                self.shape.feature_dim
            )));
        }
        Ok(())
    }
}

/// Per-frame Beta parameters emitted by the allocator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaField {
    pub per_frame: Vec<BetaParams>,
}

impl BetaField {
    pub fn len(&self) -> usize {
        self.per_frame.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_frame.is_empty()
    }

    /// Deterministic scales at the Beta means.
    pub fn mean_scales(&self, bounds: (f64, f64)) -> Vec<f64> {
        let (lo, hi) = bounds;
        self.per_frame.iter().map(|p| lo + p.mean() * (hi - lo)).collect()
    }
}

/// Intermediate values of one forward pass, reused by the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    alpha_logits: Vec<f64>,
    beta_logits: Vec<f64>,
}

pub fn allocator_forward(params: &AllocatorParams, ctx: &EpisodeContext) -> Result<BetaField> {
    Ok(allocator_forward_cached(params, ctx)?.0)
}

pub fn allocator_forward_cached(
    params: &AllocatorParams,
    ctx: &EpisodeContext,
) -> Result<(BetaField, ForwardCache)> {
    params.check_context(ctx)?;
    let shape = params.shape;
    let h_dim = shape.hidden;
    let inputs = ctx.fusion_inputs(shape.temporal_cue);
    let w = params.fusion_weights();
    let b = params.fusion_bias();
    let (wa, ba) = params.head_alpha();
    let (wb, bb) = params.head_beta();

    let mut hidden = Vec::with_capacity(inputs.len());
    let mut alpha_logits = Vec::with_capacity(inputs.len());
    let mut beta_logits = Vec::with_capacity(inputs.len());
    let mut per_frame = Vec::with_capacity(inputs.len());
    for z in &inputs {
        let mut pre = b.to_vec();
        for (i, &zi) in z.iter().enumerate() {
            if zi == 0.0 {
                continue;
            }
            let row = &w[i * h_dim..(i + 1) * h_dim];
            for (p, &wij) in pre.iter_mut().zip(row) {
                *p += zi * wij;
            }
        }
        let h: Vec<f64> = pre.iter().map(|x| x.tanh()).collect();
        let la = ba + h.iter().zip(wa).map(|(x, y)| x * y).sum::<f64>();
        let lb = bb + h.iter().zip(wb).map(|(x, y)| x * y).sum::<f64>();
        let alpha = softplus(la) + params.alpha_floor;
        let beta = softplus(lb) + params.alpha_floor;
        per_frame.push(BetaParams::new(alpha, beta)?);
        hidden.push(h);
        alpha_logits.push(la);
        beta_logits.push(lb);
    }
    Ok((
        BetaField { per_frame },
        ForwardCache {
            inputs,
            hidden,
            alpha_logits,
            beta_logits,
        },
    ))
}

/// Pulls per-frame `dL/dalpha_t`, `dL/dbeta_t` back to a flat parameter
/// gradient laid out like [`AllocatorParams::as_flat`].
pub fn allocator_backward(
    params: &AllocatorParams,
    cache: &ForwardCache,
    d_alpha: &[f64],
    d_beta: &[f64],
) -> Result<Vec<f64>> {
    let t_count = cache.inputs.len();
    if d_alpha.len() != t_count || d_beta.len() != t_count {
        return Err(Error::contract(format!(
            "upstream gradients have {} and {} frames, forward had {t_count}",
            d_alpha.len(),
            d_beta.len()
        )));
    }
    let shape = params.shape;
    let h_dim = shape.hidden;
    let (wa, _) = params.head_alpha();
    let (wb, _) = params.head_beta();
    let mut grad = vec![0.0; shape.num_params()];
    let (fusion_g, rest) = grad.split_at_mut(shape.fusion_bias_at());
    let (bias_g, heads_g) = rest.split_at_mut(h_dim);
    let (alpha_g, beta_g) = heads_g.split_at_mut(h_dim + 1);

    let mut d_pre = vec![0.0; h_dim];
    for t in 0..t_count {
        let dla = d_alpha[t] * sigmoid(cache.alpha_logits[t]);
        let dlb = d_beta[t] * sigmoid(cache.beta_logits[t]);
        if dla == 0.0 && dlb == 0.0 {
            continue;
        }
        let h = &cache.hidden[t];
        for j in 0..h_dim {
            alpha_g[j] += dla * h[j];
            beta_g[j] += dlb * h[j];
            d_pre[j] = (dla * wa[j] + dlb * wb[j]) * (1.0 - h[j] * h[j]);
            bias_g[j] += d_pre[j];
        }
        alpha_g[h_dim] += dla;
        beta_g[h_dim] += dlb;
        for (i, &zi) in cache.inputs[t].iter().enumerate() {
            if zi == 0.0 {
                continue;
            }
            let row = &mut fusion_g[i * h_dim..(i + 1) * h_dim];
            for (g, &dp) in row.iter_mut().zip(&d_pre) {
                *g += zi * dp;
            }
        }
    }
    Ok(grad)
}

/// One sampled allocation: latents, their scales and per-frame log densities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocationSample {
    pub latents: Vec<f64>,
    pub scales: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub s_min: f64,
    pub s_max: f64,
}

impl AllocationSample {
    /// Builds a sample from given latents, evaluating log densities under `field`.
    pub fn from_latents(field: &BetaField, latents: Vec<f64>, bounds: (f64, f64)) -> Result<Self> {
        let (s_min, s_max) = bounds;
        check_bounds(s_min, s_max)?;
        if latents.len() != field.len() {
            return Err(Error::contract(format!(
                "{} latents for a field of {} frames",
                latents.len(),
                field.len()
            )));
        }
        let log_probs = latents
            .iter()
            .zip(&field.per_frame)
            .map(|(&a, &p)| beta_log_pdf(a, p))
            .collect::<Result<Vec<_>>>()?;
        let scales = latents.iter().map(|a| latent_to_scale(*a, bounds)).collect();
        Ok(Self {
            latents,
            scales,
            log_probs,
            s_min,
            s_max,
        })
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.s_min, self.s_max)
    }

    pub fn num_frames(&self) -> usize {
        self.latents.len()
    }
}

pub fn latent_to_scale(a: f64, (s_min, s_max): (f64, f64)) -> f64 {
    s_min + a * (s_max - s_min)
}

pub fn scale_to_latent(s: f64, (s_min, s_max): (f64, f64)) -> f64 {
    (s - s_min) / (s_max - s_min)
}

pub fn sample_allocation(
    field: &BetaField,
    bounds: (f64, f64),
    rng: &mut RandomStream,
) -> Result<AllocationSample> {
    check_bounds(bounds.0, bounds.1)?;
    let latents = field.per_frame.iter().map(|&p| beta_sample(p, rng)).collect();
    AllocationSample::from_latents(field, latents, bounds)
}

/// Per-frame latent log densities of `sample` under `field`, and their sum.
pub fn allocation_log_prob(field: &BetaField, sample: &AllocationSample) -> Result<(Vec<f64>, f64)> {
    if field.len() != sample.num_frames() {
        return Err(Error::contract(format!(
            "field has {} frames, sample has {}",
            field.len(),
            sample.num_frames()
        )));
    }
    let per_frame = sample
        .latents
        .iter()
        .zip(&field.per_frame)
        .map(|(&a, &p)| beta_log_pdf(a, p))
        .collect::<Result<Vec<f64>>>()?;
    let total = per_frame.iter().sum();
    Ok((per_frame, total))
}

/// Log density of the scales themselves: the latent density plus the
/// log-Jacobian `-T ln(s_max - s_min)` of the affine map.
pub fn scale_log_prob(field: &BetaField, scales: &[f64], bounds: (f64, f64)) -> Result<f64> {
    if field.len() != scales.len() {
        return Err(Error::contract("field and scale lengths differ"));
    }
    let log_jac = (bounds.1 - bounds.0).ln();
    scales
        .iter()
        .zip(&field.per_frame)
        .map(|(&s, &p)| Ok(beta_log_pdf(scale_to_latent(s, bounds), p)? - log_jac))
        .sum()
}

/// `d/dtheta sum_t ln Beta(a_t; alpha_t(theta), beta_t(theta))`.
pub fn policy_grad_log_prob(
    params: &AllocatorParams,
    ctx: &EpisodeContext,
    sample: &AllocationSample,
) -> Result<Vec<f64>> {
    let (field, cache) = allocator_forward_cached(params, ctx)?;
    if field.len() != sample.num_frames() {
        return Err(Error::contract("sample length differs from context frame count"));
    }
    let mut d_alpha = Vec::with_capacity(field.len());
    let mut d_beta = Vec::with_capacity(field.len());
    for (&a, &p) in sample.latents.iter().zip(&field.per_frame) {
        let g = beta_log_pdf_grad(a, p)?;
        d_alpha.push(g.d_alpha);
        d_beta.push(g.d_beta);
    }
    allocator_backward(params, &cache, &d_alpha, &d_beta)
}

/// Header line of the text parameter format.
pub const PARAMS_MAGIC: &str = "framebudget-allocator v1";

impl AllocatorParams {
    /// Shape-tagged text dump; see the repository README for the grammar.
    pub fn to_text(&self) -> String {
        let s = self.shape;
        let mut out = String::new();
        let _ = writeln!(out, "{PARAMS_MAGIC}");
        let _ = writeln!(out, "feature_dim {}", s.feature_dim);
        let _ = writeln!(out, "hidden {}", s.hidden);
        let _ = writeln!(out, "temporal_cue {}", u8::from(s.temporal_cue));
        let _ = writeln!(out, "alpha_floor {}", self.alpha_floor);
        let h = s.hidden;
        let (wa, ba) = self.head_alpha();
        let (wb, bb) = self.head_beta();
        let tensors: [(&str, usize, usize, &[f64]); 6] = [
            ("fusion_weights", s.input_dim(), h, self.fusion_weights()),
            ("fusion_bias", 1, h, self.fusion_bias()),
            ("head_alpha_weights", 1, h, wa),
            ("head_alpha_bias", 1, 1, std::slice::from_ref(&ba)),
            ("head_beta_weights", 1, h, wb),
            ("head_beta_bias", 1, 1, std::slice::from_ref(&bb)),
        ];
        for (name, rows, cols, data) in tensors {
            let _ = writeln!(out, "tensor {name} {rows} {cols}");
            for row in data.chunks(cols).take(rows) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        let _ = writeln!(out, "end");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let bad = |m: String| Error::Parse(format!("allocator params: {m}"));
        if lines.next().map(str::trim) != Some(PARAMS_MAGIC) {
            return Err(bad(format!("missing header `{PARAMS_MAGIC}`")));
        }
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(k), Some(v)) if k == key => Ok(v.to_string()),
                _ => Err(bad(format!("expected `{key} <value>`, got `{line}`"))),
            }
        };
        let num = |v: String| v.parse::<usize>().map_err(|e| bad(e.to_string()));
        let feature_dim = num(header("feature_dim")?)?;
        let hidden = num(header("hidden")?)?;
        let temporal_cue = match header("temporal_cue")?.as_str() {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("temporal_cue must be 0 or 1, got {other}"))),
        };
        let alpha_floor = header("alpha_floor")?
            .parse::<f64>()
            .map_err(|e| bad(e.to_string()))?;
        let shape = AllocatorShape {
            feature_dim,
            hidden,
            temporal_cue,
        };
        let expected = [
            ("fusion_weights", shape.input_dim(), hidden),
            ("fusion_bias", 1, hidden),
            ("head_alpha_weights", 1, hidden),
            ("head_alpha_bias", 1, 1),
            ("head_beta_weights", 1, hidden),
            ("head_beta_bias", 1, 1),
        ];
        let mut values = Vec::with_capacity(shape.num_params());
        for (name, rows, cols) in expected {
            let tag = lines.next().ok_or_else(|| bad(format!("missing tensor {name}")))?;
            let want = format!("tensor {name} {rows} {cols}");
            if tag.split_whitespace().collect::<Vec<_>>().join(" ") != want {
                return Err(bad(format!("expected `{want}`, got `{tag}`")));
            }
            for r in 0..rows {
                let row = lines.next().ok_or_else(|| bad(format!("{name}: missing row {r}")))?;
                let parsed = row
                    .split_whitespace()
                    .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{name}: {e}"))))
                    .collect::<Result<Vec<_>>>()?;
                if parsed.len() != cols {
                    return Err(bad(format!("{name}: row {r} has {} values", parsed.len())));
                }
                values.extend(parsed);
            }
        }
        if lines.next().map(str::trim) != Some("end") {
            return Err(bad("missing `end`".into()));
        }
        Self::from_flat(shape, alpha_floor, values)
    }
}

/// `exp(new - old)`; errors when the ratio is not finite.
pub(crate) fn density_ratio(new_lp: f64, old_lp: f64, context: impl FnOnce() -> String) -> Result<f64> {
    ensure_finite((new_lp - old_lp).exp(), context)
}
