//! Scale-profile reports: per-frame scales, per-episode summaries and the
//! mean scale at each frame position, as aligned text and CSV. Reals in the
//! CSVs carry nine significant digits.

use crate::error::{Error, Result};
use crate::numerics::{gini, mean_std};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const FRAMES_HEADER: &str = "episode,frame,scale,is_argmax";
pub const EPISODES_HEADER: &str = "episode,frames,mean,std,gini,argmax";
pub const POSITIONS_HEADER: &str = "frame,episodes,mean_scale";

/// `x` with nine significant digits in scientific notation.
pub fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

/// `x` rounded to nine significant digits.
pub fn round_sig9(x: f64) -> f64 {
    sig9(x).parse().expect("formatted float parses")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub episode: usize,
    pub frames: usize,
    pub mean: f64,
    pub std: f64,
    pub gini: f64,
    /// Highest-scale frame, or `None` when every frame has the same scale.
    pub argmax: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionSummary {
    pub frame: usize,
    pub episodes: usize,
    pub mean_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleProfileReport {
    pub profiles: Vec<Vec<f64>>,
    pub episodes: Vec<EpisodeSummary>,
    pub positions: Vec<PositionSummary>,
}

fn summarize(episode: usize, scales: &[f64]) -> Result<EpisodeSummary> {
    let (mean, std) = mean_std(scales);
    let (lo, hi) = scales
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    // first maximum, matching the tie rule of top-k selection
    let argmax = (hi > lo).then(|| scales.iter().position(|&s| s == hi)).flatten();
    let flat = argmax.is_none();
    Ok(EpisodeSummary {
        episode,
        frames: scales.len(),
        mean: if flat { hi } else { mean },
        std: if flat { 0.0 } else { std },
        gini: if flat { 0.0 } else { gini(scales)? },
        argmax,
    })
}

impl ScaleProfileReport {
    pub fn new(profiles: Vec<Vec<f64>>) -> Result<Self> {
        if profiles.is_empty() || profiles.iter().any(Vec::is_empty) {
            return Err(Error::domain("a scale profile needs at least one nonempty episode"));
        }
        if let Some(s) = profiles.iter().flatten().find(|s| !s.is_finite()) {
            return Err(Error::NonFinite { context: "scale profile".into(), value: *s });
        }
        let episodes = profiles
            .iter()
            .enumerate()
            .map(|(e, p)| summarize(e, p))
            .collect::<Result<Vec<_>>>()?;
        let longest = profiles.iter().map(Vec::len).max().unwrap_or(0);
        let positions = (0..longest)
            .map(|t| {
                let column: Vec<f64> = profiles.iter().filter_map(|p| p.get(t).copied()).collect();
                PositionSummary {
                    frame: t,
                    episodes: column.len(),
                    mean_scale: column.iter().sum::<f64>() / column.len() as f64,
                }
            })
            .collect();
        Ok(Self { profiles, episodes, positions })
    }

    pub fn median_std(&self) -> f64 {
        let mut stds: Vec<f64> = self.episodes.iter().map(|e| e.std).collect();
        stds.sort_by(f64::total_cmp);
        let n = stds.len();
        if n % 2 == 1 {
            stds[n / 2]
        } else {
            0.5 * (stds[n / 2 - 1] + stds[n / 2])
        }
    }

    pub fn frames_csv(&self) -> String {
        let mut out = format!("{FRAMES_HEADER}\n");
        for (summary, scales) in self.episodes.iter().zip(&self.profiles) {
            for (t, &s) in scales.iter().enumerate() {
                let flag = u8::from(summary.argmax == Some(t));
                let _ = writeln!(out, "{},{t},{},{flag}", summary.episode, sig9(s));
            }
        }
        out
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = format!("{EPISODES_HEADER}\n");
        for e in &self.episodes {
            let argmax = e.argmax.map_or_else(|| "-1".to_string(), |t| t.to_string());
            let _ = writeln!(
                out,
                "{},{},{},{},{},{argmax}",
                e.episode,
                e.frames,
                sig9(e.mean),
                sig9(e.std),
                sig9(e.gini)
            );
        }
        out
    }

    pub fn positions_csv(&self) -> String {
        let mut out = format!("{POSITIONS_HEADER}\n");
        for p in &self.positions {
            let _ = writeln!(out, "{},{},{}", p.frame, p.episodes, sig9(p.mean_scale));
        }
        out
    }

    /// Aligned table: one row per episode with its summary and every frame's
    /// scale; the argmax frame is marked with `*`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>7} {:>7} {:>7} {:>7} {:>6}  scales", "episode", "mean", "std", "gini", "argmax");
        for (e, scales) in self.episodes.iter().zip(&self.profiles) {
            let argmax = e.argmax.map_or_else(|| "-".to_string(), |t| t.to_string());
            let _ = write!(
                out,
                "{:>7} {:>7.4} {:>7.4} {:>7.4} {:>6} ",
                e.episode, e.mean, e.std, e.gini, argmax
            );
            for (t, s) in scales.iter().enumerate() {
                let mark = if e.argmax == Some(t) { '*' } else { ' ' };
                let _ = write!(out, " {s:>6.3}{mark}");
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = writeln!(out, "{:>7} {:>8} {:>10}", "frame", "episodes", "mean_scale");
        for p in &self.positions {
            let _ = writeln!(out, "{:>7} {:>8} {:>10.4}", p.frame, p.episodes, p.mean_scale);
        }
        let _ = writeln!(out, "\nmedian per-episode std {:.6}", self.median_std());
        out
    }

    /// Writes `<stem>.txt`, `<stem>_frames.csv`, `<stem>_episodes.csv` and
    /// `<stem>_positions.csv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
        let files = [
            (format!("{stem}.txt"), self.to_text()),
            (format!("{stem}_frames.csv"), self.frames_csv()),
            (format!("{stem}_episodes.csv"), self.episodes_csv()),
            (format!("{stem}_positions.csv"), self.positions_csv()),
        ];
        files
            .into_iter()
            .map(|(name, body)| {
                let path = dir.join(name);
                std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                Ok(path)
            })
            .collect()
    }
}

/// Builds the report for `profiles` and writes it under `dir` with file stem `stem`.
pub fn emit_scale_profile(profiles: Vec<Vec<f64>>, dir: &Path, stem: &str) -> Result<ScaleProfileReport> {
    let report = ScaleProfileReport::new(profiles)?;
    report.write(dir, stem)?;
    Ok(report)
}

/// Reads back an episodes CSV produced by [`ScaleProfileReport::episodes_csv`].
pub fn parse_episodes_csv(text: &str) -> Result<Vec<EpisodeSummary>> {
    let mut lines = text.lines();
    if lines.next() != Some(EPISODES_HEADER) {
        return Err(Error::Parse("episodes csv: unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| Error::Parse(format!("episodes csv row {}: {what}", i + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(bad("expected 6 columns"));
            }
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad("bad real"));
            let count = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            let argmax: i64 = cols[5].parse().map_err(|_| bad("bad argmax"))?;
            Ok(EpisodeSummary {
                episode: count(cols[0])?,
                frames: count(cols[1])?,
                mean: real(cols[2])?,
                std: real(cols[3])?,
                gini: real(cols[4])?,
                argmax: usize::try_from(argmax).ok(),
            })
        })
        .collect()
}

/// Reads back a frames CSV as one scale vector per episode.
pub fn parse_frames_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    if lines.next() != Some(FRAMES_HEADER) {
        return Err(Error::Parse("frames csv: unexpected header".into()));
    }
    let mut profiles: Vec<Vec<f64>> = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = || Error::Parse(format!("frames csv row {}", i + 1));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        let episode: usize = cols[0].parse().map_err(|_| bad())?;
        let frame: usize = cols[1].parse().map_err(|_| bad())?;
        let scale: f64 = cols[2].parse().map_err(|_| bad())?;
        if episode == profiles.len() {
            profiles.push(Vec::new());
        }
        match profiles.get_mut(episode) {
            Some(p) if p.len() == frame => p.push(scale),
            _ => return Err(bad()),
        }
    }
    Ok(profiles)
}
