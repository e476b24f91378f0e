//! Experiment scenarios run by the command-line tool: training, the
//! reward-regime and similarity-loss ablations, operator transfer, the
//! complexity calculator and the gradient-check suite. Every scenario writes
//! CSV artifacts into an output directory together with `summary.txt` and
//! `manifest.json`, and reports named pass/fail checks.

use crate::budget::{overhead_model, speedup_model, temporal_capacity, ComplexityConfig};
use crate::config::ExperimentConfig;
use crate::env::{backbone_log_prob_at, backbone_log_prob_grad, episode_at, BackboneSurrogate, EnvConfig};
use crate::error::{Error, Result};
use crate::numerics::{
    beta_log_pdf, beta_log_pdf_grad, finite_diff_check, BetaParams, RandomStream,
};
use crate::policy::{
    allocation_log_prob, allocator_forward, policy_grad_log_prob, sample_allocation,
    AllocatorParams, AllocatorShape, BetaField, EpisodeContext,
};
use crate::regularizers::{concentration_loss, similarity_gates, temporal_similarity_loss, RegConfig};
use crate::report::ScaleProfileReport;
use crate::trainer::{
    allocator_loss, collect_rollouts, evaluate_policy, held_out_episodes, metrics_csv,
    run_training, tail_means, AdvantageScheme, EvalReport, IterationMetrics, TrainConfig,
    TrainerState,
};
use serde::{Deserialize, Serialize};
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Train,
    RewardAblation,
    SimAblation,
    OperatorTransfer,
    ComplexityCalc,
    GradcheckSuite,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Train,
        Scenario::RewardAblation,
        Scenario::SimAblation,
        Scenario::OperatorTransfer,
        Scenario::ComplexityCalc,
        Scenario::GradcheckSuite,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Train => "train",
            Scenario::RewardAblation => "reward_ablation",
            Scenario::SimAblation => "sim_ablation",
            Scenario::OperatorTransfer => "operator_transfer",
            Scenario::ComplexityCalc => "complexity_calc",
            Scenario::GradcheckSuite => "gradcheck_suite",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown scenario `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// A named assertion made by a scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub checks: Vec<Check>,
    /// Artifact paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub summary: String,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: Scenario,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<String>,
    pub checks: Vec<Check>,
    pub passed: bool,
    /// Full configuration with defaults, as TOML.
    pub config: String,
}

/// Collects files written into one output directory.
struct Artifacts<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, names: Vec::new() }
    }

    fn write(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        self.names.push(name.to_string());
        Ok(())
    }

    fn profile(&mut self, stem: &str, profiles: Vec<Vec<f64>>) -> Result<ScaleProfileReport> {
        let report = ScaleProfileReport::new(profiles)?;
        for path in report.write(self.dir, stem)? {
            let name = path.strip_prefix(self.dir).unwrap_or(&path).to_string_lossy().into_owned();
            self.names.push(name);
        }
        Ok(report)
    }
}

/// Runs `f` on every item on its own thread and returns results in input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = items.iter().map(|item| scope.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}

/// Seeds that must pass for a "most seeds" claim: four of five, rounded up.
pub fn required_passes(seeds: usize) -> usize {
    (4 * seeds).div_ceil(5)
}

/// Runs `scenario` for every seed and writes its artifacts, summary and
/// manifest into `out_dir`.
pub fn run_scenario(
    scenario: Scenario,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out_dir: &Path,
) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let needs_seeds = !matches!(scenario, Scenario::ComplexityCalc);
    if needs_seeds && seeds.is_empty() {
        return Err(Error::config("at least one seed is required"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut art = Artifacts::new(out_dir);
    let (checks, summary) = match scenario {
        Scenario::Train => scenario_train(cfg, seeds, &mut art)?,
        Scenario::RewardAblation => scenario_reward_ablation(cfg, seeds, &mut art)?,
        Scenario::SimAblation => scenario_sim_ablation(cfg, seeds, &mut art)?,
        Scenario::OperatorTransfer => scenario_operator_transfer(cfg, seeds, &mut art)?,
        Scenario::ComplexityCalc => scenario_complexity(cfg, &mut art)?,
        Scenario::GradcheckSuite => scenario_gradcheck(seeds.first().copied().unwrap_or(0), &mut art)?,
    };
    let mut text = format!("scenario {scenario}\n\n{summary}\n");
    for c in &checks {
        let _ = writeln!(text, "{c}");
    }
    art.write("summary.txt", &text)?;
    let mut outcome = ScenarioOutcome { scenario, checks, artifacts: Vec::new(), summary: text };
    let manifest = Manifest {
        scenario,
        config_hash: cfg.hash()?,
        seeds: seeds.to_vec(),
        artifacts: art.names.clone(),
        checks: outcome.checks.clone(),
        passed: outcome.passed(),
        config: cfg.to_toml()?,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Parse(format!("manifest: {e}")))?;
    art.write("manifest.json", &format!("{json}\n"))?;
    outcome.artifacts = art.names;
    Ok(outcome)
}

/// Tail mean and drift of a metric over the last fraction of a history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalValue {
    pub value: f64,
    pub drift: f64,
}

pub fn final_value(history: &[IterationMetrics], frac: f64, f: impl Fn(&IterationMetrics) -> f64) -> FinalValue {
    let (last, prev) = tail_means(history, frac, f);
    FinalValue { value: last, drift: (last - prev).abs() }
}

// ---------------------------------------------------------------- train

fn scenario_train(cfg: &ExperimentConfig, seeds: &[u64], art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let runs = parallel_map(seeds, |&seed| -> Result<_> {
        let train = TrainConfig { seed, ..cfg.train.clone() };
        let out = run_training(&train)?;
        let eval = if out.history.is_empty() {
            None
        } else {
            let episodes = held_out_episodes(&train, cfg.eval.held_out_episodes)?;
            Some(evaluate_policy(&out.state.params, &episodes, &train)?)
        };
        Ok((seed, out, eval))
    });
    let mut summary = String::from("seed,iterations,final_mean_scale,drift,final_proxy_cost,final_accuracy\n");
    for run in runs {
        let (seed, out, eval) = run?;
        art.write(&format!("train_seed{seed}_metrics.csv"), &metrics_csv(&out.history))?;
        art.write(&format!("train_seed{seed}_params.txt"), &out.state.params.to_text())?;
        if let Some(eval) = eval {
            art.profile(&format!("train_seed{seed}_profile"), eval.per_episode_scales)?;
        }
        let s = final_value(&out.history, cfg.eval.tail_fraction, |m| m.mean_scale);
        let c = final_value(&out.history, cfg.eval.tail_fraction, |m| m.proxy_cost);
        let a = final_value(&out.history, cfg.eval.tail_fraction, |m| m.accuracy);
        let _ = writeln!(
            summary,
            "{seed},{},{:.6},{:.6},{:.6},{:.6}",
            out.history.len(),
            s.value,
            s.drift,
            c.value,
            a.value
        );
    }
    art.write("train_summary.csv", &summary)?;
    Ok((Vec::new(), summary))
}

// ------------------------------------------------------- reward ablation

/// Reward designs compared by the reward ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardRegime {
    /// Cost subtracted from the reward before group normalisation, `gamma = 1`.
    DirectCost,
    /// Task reward only: no cost term, no shaping, no similarity penalty.
    AccuracyOnly,
    /// Full cost-aware shaping with the configured constants.
    Capo,
}

impl RewardRegime {
    pub const ALL: [RewardRegime; 3] = [RewardRegime::DirectCost, RewardRegime::AccuracyOnly, RewardRegime::Capo];

    pub fn name(self) -> &'static str {
        match self {
            RewardRegime::DirectCost => "direct_cost",
            RewardRegime::AccuracyOnly => "accuracy_only",
            RewardRegime::Capo => "capo",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            RewardRegime::DirectCost => {
                cfg.advantage = AdvantageScheme::Lagrangian;
                cfg.capo.gamma = 1.0;
            }
            RewardRegime::AccuracyOnly => {
                cfg.advantage = AdvantageScheme::Lagrangian;
                cfg.capo.gamma = 0.0;
                cfg.reg.lambda_sim = 0.0;
            }
            RewardRegime::Capo => cfg.advantage = AdvantageScheme::Capo,
        }
        cfg
    }

    /// Whether a run's final mean scale lands where this regime should.
    pub fn accepts(self, run: &FinalValue, (s_min, s_max): (f64, f64)) -> bool {
        match self {
            RewardRegime::DirectCost => run.value <= s_min + 0.1,
            RewardRegime::AccuracyOnly => run.value >= s_max - 0.2,
            RewardRegime::Capo => {
                run.value > s_min + 0.15 && run.value < s_max - 0.15 && run.drift <= 0.05
            }
        }
    }

    fn requirement(self, (s_min, s_max): (f64, f64)) -> String {
        match self {
            RewardRegime::DirectCost => format!("s <= {:.2}", s_min + 0.1),
            RewardRegime::AccuracyOnly => format!("s >= {:.2}", s_max - 0.2),
            RewardRegime::Capo => {
                format!("{:.2} < s < {:.2}, drift <= 0.05", s_min + 0.15, s_max - 0.15)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeRun {
    pub regime: RewardRegime,
    pub seed: u64,
    pub mean_scale: FinalValue,
    pub accepted: bool,
    pub history: Vec<IterationMetrics>,
}

pub fn reward_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<RegimeRun>> {
    let bounds = cfg.train.budget.bounds();
    let jobs: Vec<(RewardRegime, u64)> = RewardRegime::ALL
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    parallel_map(&jobs, |&(regime, seed)| {
        let train = TrainConfig { seed, ..regime.apply(&cfg.train) };
        let out = run_training(&train)?;
        let mean_scale = final_value(&out.history, cfg.eval.tail_fraction, |m| m.mean_scale);
        Ok(RegimeRun {
            regime,
            seed,
            mean_scale,
            accepted: regime.accepts(&mean_scale, bounds),
            history: out.history,
        })
    })
    .into_iter()
    .collect()
}

/// One check per regime: at least four of five seeds must land in range.
pub fn reward_ablation_checks(runs: &[RegimeRun], bounds: (f64, f64)) -> Vec<Check> {
    RewardRegime::ALL
        .iter()
        .map(|&regime| {
            let mine: Vec<&RegimeRun> = runs.iter().filter(|r| r.regime == regime).collect();
            let ok = mine.iter().filter(|r| r.accepted).count();
            let need = required_passes(mine.len());
            let finals: Vec<String> = mine.iter().map(|r| format!("{:.3}", r.mean_scale.value)).collect();
            Check::new(
                format!("reward regime {}", regime.name()),
                !mine.is_empty() && ok >= need,
                format!(
                    "{ok}/{} seeds with {} (need {need}); final s = [{}]",
                    mine.len(),
                    regime.requirement(bounds),
                    finals.join(", ")
                ),
            )
        })
        .collect()
}

fn scenario_reward_ablation(cfg: &ExperimentConfig, seeds: &[u64], art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let runs = reward_ablation(cfg, seeds)?;
    let mut summary = String::from("regime,seed,final_mean_scale,drift,accepted\n");
    for r in &runs {
        art.write(&format!("reward_{}_seed{}.csv", r.regime.name(), r.seed), &metrics_csv(&r.history))?;
        let _ = writeln!(
            summary,
            "{},{},{:.6},{:.6},{}",
            r.regime.name(),
            r.seed,
            r.mean_scale.value,
            r.mean_scale.drift,
            u8::from(r.accepted)
        );
    }
    art.write("reward_ablation_summary.csv", &summary)?;
    Ok((reward_ablation_checks(&runs, cfg.train.budget.bounds()), summary))
}

// ---------------------------------------------------------- sim ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimArm {
    pub lambda_sim: f64,
    pub seed: u64,
    pub final_proxy_cost: f64,
    pub eval: EvalReport,
}

/// Trains with `lambda_sim = 0` and with the configured `lambda_sim` for every seed.
pub fn sim_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<SimArm>> {
    if !(cfg.train.reg.lambda_sim > 0.0) {
        return Err(Error::config("the similarity ablation needs a positive train.reg.lambda_sim"));
    }
    let jobs: Vec<(f64, u64)> = [0.0, cfg.train.reg.lambda_sim]
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    parallel_map(&jobs, |&(lambda_sim, seed)| {
        let mut train = TrainConfig { seed, ..cfg.train.clone() };
        train.reg.lambda_sim = lambda_sim;
        let out = run_training(&train)?;
        let episodes = held_out_episodes(&train, cfg.eval.held_out_episodes)?;
        Ok(SimArm {
            lambda_sim,
            seed,
            final_proxy_cost: final_value(&out.history, cfg.eval.tail_fraction, |m| m.proxy_cost).value,
            eval: evaluate_policy(&out.state.params, &episodes, &train)?,
        })
    })
    .into_iter()
    .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Pooled median per-episode scale std and mean final proxy cost of one arm.
pub fn sim_arm_stats(arms: &[SimArm], with_sim: bool) -> (f64, f64) {
    let mine: Vec<&SimArm> = arms.iter().filter(|a| (a.lambda_sim > 0.0) == with_sim).collect();
    let stds = mine
        .iter()
        .flat_map(|a| a.eval.per_episode_scales.iter())
        .map(|p| crate::numerics::mean_std(p).1)
        .collect();
    let cost = mine.iter().map(|a| a.final_proxy_cost).sum::<f64>() / mine.len().max(1) as f64;
    (median(stds), cost)
}

pub fn sim_ablation_checks(arms: &[SimArm]) -> Vec<Check> {
    let (std_off, cost_off) = sim_arm_stats(arms, false);
    let (std_on, cost_on) = sim_arm_stats(arms, true);
    vec![
        Check::new(
            "sim ablation: flat profiles without the similarity loss",
            std_off <= 0.03,
            format!("median per-episode std {std_off:.5} (need <= 0.03)"),
        ),
        Check::new(
            "sim ablation: variation restored with the similarity loss",
            std_on >= 3.0 * std_off,
            format!("median std {std_on:.5} vs {std_off:.5}, ratio {:.2} (need >= 3)", std_on / std_off),
        ),
        Check::new(
            "sim ablation: matched proxy cost",
            (cost_on - cost_off).abs() <= 0.05,
            format!("final proxy cost {cost_on:.4} vs {cost_off:.4} (need |diff| <= 0.05)"),
        ),
    ]
}

fn scenario_sim_ablation(cfg: &ExperimentConfig, seeds: &[u64], art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let arms = sim_ablation(cfg, seeds)?;
    let mut summary = String::from("lambda_sim,seed,final_proxy_cost,median_std,mean_scale\n");
    for a in &arms {
        let tag = if a.lambda_sim > 0.0 { "on" } else { "off" };
        art.profile(&format!("sim_{tag}_seed{}_profile", a.seed), a.eval.per_episode_scales.clone())?;
        let _ = writeln!(
            summary,
            "{},{},{:.6},{:.6},{:.6}",
            a.lambda_sim, a.seed, a.final_proxy_cost, a.eval.median_scale_std, a.eval.mean_scale
        );
    }
    art.write("sim_ablation_summary.csv", &summary)?;
    Ok((sim_ablation_checks(&arms), summary))
}

// ----------------------------------------------------- operator transfer

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferRun {
    pub seed: u64,
    pub eval: EvalReport,
}

/// Trains the configured policy per seed and scores it on held-out episodes.
pub fn operator_transfer(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<TransferRun>> {
    parallel_map(seeds, |&seed| {
        let train = TrainConfig { seed, ..cfg.train.clone() };
        let out = run_training(&train)?;
        let episodes = held_out_episodes(&train, cfg.eval.held_out_episodes)?;
        Ok(TransferRun { seed, eval: evaluate_policy(&out.state.params, &episodes, &train)? })
    })
    .into_iter()
    .collect()
}

pub fn operator_transfer_checks(runs: &[TransferRun]) -> Vec<Check> {
    let need = required_passes(runs.len());
    let active = runs
        .iter()
        .filter(|r| {
            r.eval.decisive_scale - r.eval.other_scale >= 0.2
                && r.eval.accuracy - r.eval.fixed_scale_accuracy >= 0.05
        })
        .count();
    let gaps: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:+.3}/{:+.3}",
                r.eval.decisive_scale - r.eval.other_scale,
                r.eval.accuracy - r.eval.fixed_scale_accuracy
            )
        })
        .collect();
    let n = runs.len().max(1) as f64;
    let recall = runs.iter().map(|r| r.eval.topk_recall).sum::<f64>() / n;
    let random = runs.iter().map(|r| r.eval.random_recall).sum::<f64>() / n;
    vec![
        Check::new(
            "active perception",
            !runs.is_empty() && active >= need,
            format!(
                "{active}/{} seeds with decisive-minus-other >= 0.2 and accuracy gain over matched fixed scale >= 0.05 (need {need}); gaps [{}]",
                runs.len(),
                gaps.join(", ")
            ),
        ),
        Check::new(
            "operator transfer",
            recall >= 0.8 && recall > random,
            format!("top-k recall {recall:.3} vs random {random:.4} (need >= 0.8)"),
        ),
    ]
}

fn scenario_operator_transfer(cfg: &ExperimentConfig, seeds: &[u64], art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let runs = operator_transfer(cfg, seeds)?;
    let mut summary = String::from(
        "seed,decisive_scale,other_scale,accuracy,fixed_scale_accuracy,topk_recall,random_recall,proxy_cost\n",
    );
    for r in &runs {
        let e = &r.eval;
        art.profile(&format!("transfer_seed{}_profile", r.seed), e.per_episode_scales.clone())?;
        let _ = writeln!(
            summary,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.seed,
            e.decisive_scale,
            e.other_scale,
            e.accuracy,
            e.fixed_scale_accuracy,
            e.topk_recall,
            e.random_recall,
            e.proxy_cost
        );
    }
    art.write("operator_transfer_summary.csv", &summary)?;
    Ok((operator_transfer_checks(&runs), summary))
}

// ------------------------------------------------------------ complexity

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub retention: f64,
    pub speedup: f64,
    pub base_frames: u64,
    pub adaptive_frames: u64,
}

pub fn complexity_table(cfg: &ExperimentConfig) -> Result<(Vec<ComplexityRow>, f64)> {
    let c = &cfg.complexity;
    let dims = (c.frame_height, c.frame_width);
    let rows = c
        .retentions
        .iter()
        .map(|&rho| {
            let cap = temporal_capacity(c.token_budget, dims, c.model.patch, rho)?;
            Ok(ComplexityRow {
                retention: rho,
                speedup: speedup_model(rho)?,
                base_frames: cap.base_frames,
                adaptive_frames: cap.adaptive_frames,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((rows, overhead_model(&c.model)?))
}

/// Reference checks of the complexity model at the published constants.
pub fn complexity_checks() -> Result<Vec<Check>> {
    let model = ComplexityConfig::default();
    let speedup = speedup_model(0.11)?;
    let cap = temporal_capacity(16384, (448, 448), model.patch, 0.0625)?;
    let expansion = cap.adaptive_frames as f64 / cap.base_frames as f64;
    let overhead = overhead_model(&model)?;
    let expected = 4096.0 / 100352.0;
    Ok(vec![
        Check::new(
            "complexity: speedup at retention 0.11",
            (82.0..=83.5).contains(&speedup),
            format!("{speedup:.4} (need [82, 83.5])"),
        ),
        Check::new(
            "complexity: temporal capacity at retention 0.0625",
            expansion == 16.0,
            format!("{} -> {} frames, {expansion}x (need 16x)", cap.base_frames, cap.adaptive_frames),
        ),
        Check::new(
            "complexity: allocator overhead",
            (overhead - expected).abs() <= 1e-12,
            format!("{overhead:.12} vs 4096/100352 = {expected:.12}"),
        ),
    ])
}

fn scenario_complexity(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let (rows, overhead) = complexity_table(cfg)?;
    let mut csv = String::from("retention,speedup,base_frames,adaptive_frames,frame_expansion\n");
    let mut text = format!(
        "{:>10} {:>10} {:>12} {:>16} {:>10}\n",
        "retention", "speedup", "base_frames", "adaptive_frames", "expansion"
    );
    for r in &rows {
        let expansion = r.adaptive_frames as f64 / r.base_frames as f64;
        let _ = writeln!(csv, "{},{:.6},{},{},{:.6}", r.retention, r.speedup, r.base_frames, r.adaptive_frames, expansion);
        let _ = writeln!(
            text,
            "{:>10.4} {:>10.3} {:>12} {:>16} {:>9.2}x",
            r.retention, r.speedup, r.base_frames, r.adaptive_frames, expansion
        );
    }
    let _ = writeln!(text, "\nallocator overhead {overhead:.6} ({:.3}% of backbone FLOPs)", 100.0 * overhead);
    art.write("complexity.csv", &csv)?;
    Ok((complexity_checks()?, text))
}

// ------------------------------------------------------- gradient checks

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteEntry {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradSuiteEntry {
    pub fn passed(&self) -> bool {
        self.points > 0 && self.max_rel_error <= self.tolerance
    }
}

const FD_STEP: f64 = 1e-5;
/// Minimum distance from any hinge or clip boundary for a test point.
const KINK_MARGIN: f64 = 1e-3;

fn gaussian(n: usize, scale: f64, rng: &mut RandomStream) -> Vec<f64> {
    (0..n).map(|_| scale * rng.standard_normal()).collect()
}

fn uniform(lo: f64, hi: f64, rng: &mut RandomStream) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn random_ctx(t: usize, d: usize, copy_rate: f64, rng: &mut RandomStream) -> Result<EpisodeContext> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(t);
    for i in 0..t {
        let row = if i > 0 && rng.bernoulli(copy_rate) {
            let noise = gaussian(d, 0.05, rng);
            rows[i - 1].iter().zip(noise).map(|(p, n)| p + n).collect()
        } else {
            gaussian(d, 1.0, rng)
        };
        rows.push(row);
    }
    EpisodeContext::new(rows, gaussian(d, 1.0, rng), vec![(448, 448); t])
}

fn random_params(shape: AllocatorShape, rng: &mut RandomStream) -> Result<AllocatorParams> {
    let mut p = AllocatorParams::init(shape, 0.05, rng)?;
    for v in p.as_flat_mut() {
        *v += 0.5 * rng.standard_normal();
    }
    Ok(p)
}

fn worst(errors: impl IntoIterator<Item = Result<f64>>) -> Result<f64> {
    errors.into_iter().try_fold(0.0f64, |acc, e| Ok(acc.max(e?)))
}

fn check_beta_pdf(points: usize, rng: &mut RandomStream) -> Result<f64> {
    worst((0..points).map(|_| {
        let a = uniform(0.02, 0.98, rng);
        let x = [uniform(0.3, 20.0, rng), uniform(0.3, 20.0, rng)];
        let f = |p: &[f64]| BetaParams::new(p[0], p[1]).and_then(|b| beta_log_pdf(a, b)).unwrap_or(f64::NAN);
        let g = |p: &[f64]| {
            BetaParams::new(p[0], p[1])
                .and_then(|b| beta_log_pdf_grad(a, b))
                .map_or(vec![f64::NAN; 2], |g| vec![g.d_alpha, g.d_beta])
        };
        Ok(finite_diff_check(f, g, &x, FD_STEP)?.max_rel_error)
    }))
}

fn check_policy_grad(points: usize, rng: &mut RandomStream) -> Result<f64> {
    worst((0..points).map(|i| {
        let shape = AllocatorShape { feature_dim: 3, hidden: 5, temporal_cue: i % 2 == 1 };
        let params = random_params(shape, rng)?;
        let ctx = random_ctx(5, 3, 0.3, rng)?;
        let field = allocator_forward(&params, &ctx)?;
        let sample = sample_allocation(&field, (0.2, 1.8), rng)?;
        let f = |theta: &[f64]| {
            AllocatorParams::from_flat(shape, 0.05, theta.to_vec())
                .and_then(|p| allocation_log_prob(&allocator_forward(&p, &ctx)?, &sample))
                .map_or(f64::NAN, |(_, s)| s)
        };
        let g = |theta: &[f64]| {
            AllocatorParams::from_flat(shape, 0.05, theta.to_vec())
                .and_then(|p| policy_grad_log_prob(&p, &ctx, &sample))
                .unwrap_or_else(|_| vec![f64::NAN; theta.len()])
        };
        Ok(finite_diff_check(f, g, params.as_flat(), FD_STEP)?.max_rel_error)
    }))
}

fn check_similarity(points: usize, rng: &mut RandomStream) -> Result<f64> {
    let cfg = RegConfig::default();
    let mut errors = Vec::with_capacity(points);
    while errors.len() < points {
        let ctx = random_ctx(6, 4, 0.6, rng)?;
        let features = ctx.frame_features().to_vec();
        let scales: Vec<f64> = (0..6).map(|_| uniform(0.3, 1.8, rng)).collect();
        let near_kink = scales
            .windows(2)
            .any(|w| (w[0].ln() + w[1].ln() + cfg.eta_sim).abs() < KINK_MARGIN);
        if near_kink {
            continue;
        }
        let f = |s: &[f64]| temporal_similarity_loss(s, &features, &cfg).map_or(f64::NAN, |r| r.0);
        let g = |s: &[f64]| {
            temporal_similarity_loss(s, &features, &cfg).map_or_else(|_| vec![f64::NAN; s.len()], |r| r.1)
        };
        errors.push(finite_diff_check(f, g, &scales, FD_STEP)?.max_rel_error);
    }
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn field_from(flat: &[f64]) -> Result<BetaField> {
    let per_frame = flat
        .chunks(2)
        .map(|c| BetaParams::new(c[0], c[1]))
        .collect::<Result<Vec<_>>>()?;
    Ok(BetaField { per_frame })
}

fn check_concentration(points: usize, rng: &mut RandomStream) -> Result<f64> {
    let kappa_max = 20.0;
    let mut errors = Vec::with_capacity(points);
    while errors.len() < points {
        let flat: Vec<f64> = (0..8).map(|_| uniform(0.5, 16.0, rng)).collect();
        if flat.chunks(2).any(|c| (c[0] + c[1] - kappa_max).abs() < KINK_MARGIN) {
            continue;
        }
        let f = |x: &[f64]| field_from(x).map_or(f64::NAN, |fl| concentration_loss(&fl, kappa_max).0);
        let g = |x: &[f64]| {
            field_from(x).map_or_else(
                |_| vec![f64::NAN; x.len()],
                |fl| {
                    let (_, da, db) = concentration_loss(&fl, kappa_max);
                    da.into_iter().zip(db).flat_map(|(a, b)| [a, b]).collect()
                },
            )
        };
        errors.push(finite_diff_check(f, g, &flat, FD_STEP)?.max_rel_error);
    }
    Ok(errors.into_iter().fold(0.0, f64::max))
}

fn check_backbone(points: usize, rng: &mut RandomStream) -> Result<f64> {
    let env = EnvConfig::default();
    worst((0..points).map(|i| {
        let episode = episode_at(&env, rng.below(1 << 20) as u64, i as u64)?;
        let k = episode.num_options();
        let mut surrogate = BackboneSurrogate::trainable(k, 0.0);
        surrogate.set_params(&gaussian(k + 1, 1.5, rng))?;
        let e = rng.uniform();
        let option = rng.below(k);
        let eval = |p: &[f64]| {
            let mut s = surrogate.clone();
            s.set_params(p).map(|_| s)
        };
        let f = |p: &[f64]| {
            eval(p).and_then(|s| backbone_log_prob_at(&s, e, &episode, option)).unwrap_or(f64::NAN)
        };
        let g = |p: &[f64]| {
            eval(p)
                .and_then(|s| backbone_log_prob_grad(&s, e, &episode, option))
                .unwrap_or_else(|_| vec![f64::NAN; p.len()])
        };
        Ok(finite_diff_check(f, g, &surrogate.params(), FD_STEP)?.max_rel_error)
    }))
}

fn grad_suite_config(seed: u64, cue: bool) -> TrainConfig {
    let mut cfg = TrainConfig { seed, batch_episodes: 2, allocations_per_prompt: 3, rollouts_per_allocation: 2, ..TrainConfig::default() };
    cfg.env.num_frames = 6;
    cfg.env.feature_dim = 4;
    cfg.env.redundancy_rate = 0.6;
    cfg.allocator.hidden = 5;
    cfg.allocator.temporal_cue = cue;
    cfg.reg.lambda_sim = 0.5;
    cfg.reg.lambda_con = 0.5;
    cfg.reg.kappa_max = 4.0;
    cfg
}

/// Smallest distance of any hinge or clip argument from its kink at `params`.
fn alloc_kink_distance(
    params: &AllocatorParams,
    batch: &[crate::trainer::EpisodeRollouts<'_>],
    cfg: &TrainConfig,
) -> Result<f64> {
    let (lo, hi) = cfg.budget.bounds();
    let mut dist = f64::INFINITY;
    for item in batch {
        let field = allocator_forward(params, &item.episode.ctx)?;
        let gates = similarity_gates(item.episode.ctx.frame_features(), &cfg.reg)?;
        for p in &field.per_frame {
            dist = dist.min((p.concentration() - cfg.reg.kappa_max).abs());
        }
        for s in &item.samples {
            for (t, (&a, p)) in s.latents.iter().zip(&field.per_frame).enumerate() {
                let r = (beta_log_pdf(a, *p)? - s.log_probs[t]).exp();
                dist = dist.min((r - 1.0 - cfg.clip_eps).abs()).min((r - 1.0 + cfg.clip_eps).abs());
            }
            let scales: Vec<f64> = s
                .latents
                .iter()
                .zip(field.per_frame.iter().zip(&item.old_field.per_frame))
                .map(|(a, (p, q))| lo + (a + p.mean() - q.mean()) * (hi - lo))
                .collect();
            if scales.iter().any(|&x| x <= 0.0) {
                return Ok(0.0);
            }
            for (w, pair) in gates.iter().zip(scales.windows(2)) {
                if *w > 1e-12 {
                    dist = dist.min((pair[0].ln() + pair[1].ln() + cfg.reg.eta_sim).abs());
                }
            }
        }
    }
    Ok(dist)
}

fn check_alloc_loss(points: usize, rng: &mut RandomStream) -> Result<f64> {
    let mut errors = Vec::with_capacity(points);
    let mut attempt = 0u64;
    while errors.len() < points {
        attempt += 1;
        if attempt > 50 * points as u64 {
            return Err(Error::domain("could not find enough kink-free points for the allocator loss"));
        }
        let cfg = grad_suite_config(rng.below(1 << 30) as u64, attempt.is_multiple_of(2));
        let mut state = TrainerState::new(&cfg)?;
        state.params = random_params(cfg.allocator_shape(), rng)?;
        let episodes: Vec<_> = (0..cfg.batch_episodes as u64)
            .map(|i| episode_at(&cfg.env, cfg.seed, i))
            .collect::<Result<_>>()?;
        let batch = collect_rollouts(&state, &episodes, &cfg)?;
        let mut theta = state.params.as_flat().to_vec();
        for v in &mut theta {
            *v += 0.05 * rng.standard_normal();
        }
        let shape = cfg.allocator_shape();
        let at = |x: &[f64]| AllocatorParams::from_flat(shape, cfg.allocator.alpha_floor, x.to_vec());
        if alloc_kink_distance(&at(&theta)?, &batch, &cfg)? < KINK_MARGIN {
            continue;
        }
        let f = |x: &[f64]| at(x).and_then(|p| allocator_loss(&p, &batch, &cfg)).map_or(f64::NAN, |r| r.0.total);
        let g = |x: &[f64]| {
            at(x)
                .and_then(|p| allocator_loss(&p, &batch, &cfg))
                .map_or_else(|_| vec![f64::NAN; x.len()], |r| r.1)
        };
        errors.push(finite_diff_check(f, g, &theta, FD_STEP)?.max_rel_error);
    }
    Ok(errors.into_iter().fold(0.0, f64::max))
}

/// All registered gradient checks at `points` random points each.
pub fn gradient_suite(points: usize, seed: u64) -> Result<Vec<GradSuiteEntry>> {
    type CheckFn = fn(usize, &mut RandomStream) -> Result<f64>;
    let checks: [(&str, CheckFn, f64); 6] = [
        ("beta_log_pdf_grad", check_beta_pdf, 1e-5),
        ("policy_grad_log_prob", check_policy_grad, 1e-5),
        ("temporal_similarity_loss", check_similarity, 1e-5),
        ("concentration_loss", check_concentration, 1e-5),
        ("backbone_log_prob", check_backbone, 1e-5),
        ("allocator_loss", check_alloc_loss, 1e-4),
    ];
    let root = RandomStream::new(seed, 0);
    parallel_map(&checks, |&(name, check, tolerance)| {
        let mut rng = root.derive(&[name.len() as u64, name.bytes().map(u64::from).sum()]);
        Ok(GradSuiteEntry { name: name.to_string(), points, max_rel_error: check(points, &mut rng)?, tolerance })
    })
    .into_iter()
    .collect()
}

fn scenario_gradcheck(seed: u64, art: &mut Artifacts) -> Result<(Vec<Check>, String)> {
    let entries = gradient_suite(100, seed)?;
    let mut csv = String::from("name,points,max_rel_error,tolerance,passed\n");
    let mut checks = Vec::with_capacity(entries.len());
    for e in &entries {
        let _ = writeln!(csv, "{},{},{:e},{:e},{}", e.name, e.points, e.max_rel_error, e.tolerance, u8::from(e.passed()));
        checks.push(Check::new(
            format!("gradient {}", e.name),
            e.passed(),
            format!("max relative error {:.3e} over {} points (tolerance {:e})", e.max_rel_error, e.points, e.tolerance),
        ));
    }
    art.write("gradcheck.csv", &csv)?;
    Ok((checks, csv))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("nope".parse::<Scenario>().is_err());
    }

    #[test]
    fn required_passes_is_four_fifths_rounded_up() {
        assert_eq!(required_passes(5), 4);
        assert_eq!(required_passes(3), 3);
        assert_eq!(required_passes(1), 1);
        assert_eq!(required_passes(10), 8);
    }

    #[test]
    fn regimes_set_the_advantage_scheme() {
        let base = TrainConfig::default();
        let d = RewardRegime::DirectCost.apply(&base);
        assert_eq!((d.advantage, d.capo.gamma), (AdvantageScheme::Lagrangian, 1.0));
        let a = RewardRegime::AccuracyOnly.apply(&base);
        assert_eq!((a.capo.gamma, a.reg.lambda_sim), (0.0, 0.0));
        assert_eq!(RewardRegime::Capo.apply(&base), base);
    }

    #[test]
    fn regime_acceptance_bounds() {
        let b = (0.2, 1.8);
        let v = |value, drift| FinalValue { value, drift };
        assert!(RewardRegime::DirectCost.accepts(&v(0.3, 0.0), b));
        assert!(!RewardRegime::DirectCost.accepts(&v(0.31, 0.0), b));
        assert!(RewardRegime::AccuracyOnly.accepts(&v(1.6, 0.0), b));
        assert!(RewardRegime::Capo.accepts(&v(1.0, 0.05), b));
        assert!(!RewardRegime::Capo.accepts(&v(1.0, 0.06), b));
        assert!(!RewardRegime::Capo.accepts(&v(0.35, 0.0), b));
    }

    #[test]
    fn small_gradient_suite_passes() {
        for e in gradient_suite(5, 3).unwrap() {
            assert!(e.passed(), "{e:?}");
        }
    }
}
