//! Run manifests and report emitters.
//!
//! Every report carries the manifest that produced it. Rendering is pure:
//! floats use the shortest representation that round-trips, and nothing
//! depends on wall clock or environment, so a manifest reproduces its
//! report byte for byte.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::pipeline::{self, median, RankReport, TrajectorySpec};
use crate::scalar::Element;
use crate::spectral::frobenius_distance;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const RANK_CSV_HEADER: &str = "timestep,window_multiple,seed,effective_rank";
pub const SUMMARY_CSV_HEADER: &str = "timestep,window_multiple,count,mean_effective_rank,std_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Parameter(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Everything needed to rerun a command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub fusion: FusionConfig,
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub window_multiples: Vec<usize>,
    #[serde(default)]
    pub modes: Vec<FusionMode>,
}

impl RunManifest {
    pub fn new(command: &str, precision: Precision) -> Self {
        Self {
            command: command.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            precision,
            seeds: vec![0],
            fusion: FusionConfig::default(),
            trajectory: TrajectorySpec::default(),
            window_multiples: vec![1],
            modes: Vec::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        to_pretty_json(self)
    }
}

fn to_pretty_json<S: Serialize>(value: &S) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Shortest round-trip decimal, always with a decimal point or exponent.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn rank_csv(report: &RankReport) -> String {
    let mut out = String::with_capacity(64 * (report.rows.len() + 1));
    out.push_str(RANK_CSV_HEADER);
    out.push('\n');
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            format_f64(r.timestep),
            r.window_multiple,
            r.seed,
            format_f64(r.effective_rank)
        );
    }
    out
}

pub fn summary_csv(report: &RankReport) -> String {
    let mut out = String::new();
    out.push_str(SUMMARY_CSV_HEADER);
    out.push('\n');
    for s in &report.summary {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            format_f64(s.timestep),
            s.window_multiple,
            s.count,
            format_f64(s.mean),
            format_f64(s.std_error)
        );
    }
    out
}

/// Parses a CSV produced by [`rank_csv`] back into `(timestep, multiple, seed, rank)`.
pub fn parse_rank_csv(text: &str) -> Result<Vec<(f64, usize, u64, f64)>> {
    let mut lines = text.lines();
    if lines.next() != Some(RANK_CSV_HEADER) {
        return Err(Error::Shape("missing effective-rank CSV header".into()));
    }
    lines
        .map(|line| {
            let bad = || Error::Shape(format!("malformed CSV row {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok((
                f[0].parse().map_err(|_| bad())?,
                f[1].parse().map_err(|_| bad())?,
                f[2].parse().map_err(|_| bad())?,
                f[3].parse().map_err(|_| bad())?,
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepEntry {
    pub timestep: f64,
    pub mean_effective_rank: f64,
    pub mean_distance_to_local_only: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: FusionMode,
    /// Trajectory-mean output effective rank, averaged over seeds.
    pub mean_effective_rank: f64,
    /// Median over seeds of the trajectory-mean effective rank.
    pub median_effective_rank: f64,
    pub seed_mean_effective_rank: Vec<f64>,
    pub mean_distance_to_local_only: f64,
    pub timesteps: Vec<TimestepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoReport {
    pub manifest: RunManifest,
    pub modes: Vec<ModeSummary>,
}

impl DemoReport {
    pub fn mode(&self, mode: FusionMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn to_json(&self) -> Result<String> {
        to_pretty_json(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Runs every mode in `manifest.modes` over every seed and summarizes the
/// output effective ranks and the distance of each output to the
/// `LOCAL_ONLY` output on the same trajectory.
pub fn run_demo(manifest: &RunManifest) -> Result<DemoReport> {
    match manifest.precision {
        Precision::F32 => run_demo_typed::<f32>(manifest),
        Precision::F64 => run_demo_typed::<f64>(manifest),
    }
}

fn run_demo_typed<T: Element>(manifest: &RunManifest) -> Result<DemoReport> {
    use rayon::prelude::*;

    if manifest.modes.is_empty() {
        return Err(Error::Parameter("no fusion modes given".into()));
    }
    if manifest.seeds.is_empty() {
        return Err(Error::Parameter("no seeds given".into()));
    }
    let multiple = match manifest.window_multiples[..] {
        [m] => m,
        _ => {
            return Err(Error::Parameter(
                "the demo uses exactly one window multiple".into(),
            ))
        }
    };
    let spec = &manifest.trajectory;
    let win = spec.window(multiple)?;
    let local_cfg = manifest.fusion.with_mode(FusionMode::LocalOnly);

    // per_seed[seed][mode] = (per-step ranks, per-step distances)
    let per_seed: Vec<Vec<(Vec<f64>, Vec<f64>)>> = manifest
        .seeds
        .par_iter()
        .map(|&seed| {
            let spec = spec.with_seed(seed);
            let local = pipeline::run_mode::<T>(&spec, &local_cfg, win)?;
            manifest
                .modes
                .iter()
                .map(|&mode| {
                    let run = if mode == FusionMode::LocalOnly {
                        local.clone()
                    } else {
                        pipeline::run_mode::<T>(&spec, &manifest.fusion.with_mode(mode), win)?
                    };
                    let ranks = run.report.rows.iter().map(|r| r.effective_rank).collect();
                    let dists = run
                        .outputs
                        .iter()
                        .zip(&local.outputs)
                        .map(|((_, a), (_, b))| frobenius_distance(a, b))
                        .collect();
                    Ok((ranks, dists))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let seeds = manifest.seeds.len() as f64;
    let steps = spec.timesteps.len();
    let modes = manifest
        .modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let timesteps = spec
                .timesteps
                .iter()
                .enumerate()
                .map(|(si, &t)| TimestepEntry {
                    timestep: t,
                    mean_effective_rank: per_seed.iter().map(|s| s[mi].0[si]).sum::<f64>() / seeds,
                    mean_distance_to_local_only: per_seed.iter().map(|s| s[mi].1[si]).sum::<f64>()
                        / seeds,
                })
                .collect::<Vec<_>>();
            let seed_mean_effective_rank: Vec<f64> = per_seed
                .iter()
                .map(|s| s[mi].0.iter().sum::<f64>() / steps as f64)
                .collect();
            ModeSummary {
                mode,
                mean_effective_rank: seed_mean_effective_rank.iter().sum::<f64>() / seeds,
                median_effective_rank: median(&seed_mean_effective_rank),
                seed_mean_effective_rank,
                mean_distance_to_local_only: timesteps
                    .iter()
                    .map(|e| e.mean_distance_to_local_only)
                    .sum::<f64>()
                    / steps as f64,
                timesteps,
            }
        })
        .collect();
    Ok(DemoReport {
        manifest: manifest.clone(),
        modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{linspace_timesteps, RankRow};

    fn small_manifest(modes: Vec<FusionMode>) -> RunManifest {
        RunManifest {
            seeds: vec![0, 1],
            modes,
            trajectory: TrajectorySpec {
                frames: 8,
                spatial_tokens: 4,
                channels: 8,
                native_frames: 2,
                timesteps: linspace_timesteps(1.0, 20),
                signal_rank: 2,
                ..Default::default()
            },
            ..RunManifest::new("demo", Precision::F64)
        }
    }

    #[test]
    fn float_rendering_round_trips() {
        for x in [4.0, 0.1, 1.0 / 3.0, 2.0f64.sqrt(), 1e-7, 123456789.125] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(format_f64(4.0), "4.0");
    }

    #[test]
    fn csv_layout() {
        let report = RankReport::from_rows(vec![
            RankRow {
                timestep: 0.5,
                window_multiple: 1,
                seed: 0,
                effective_rank: 4.0,
                per_head: vec![4.0],
            },
            RankRow {
                timestep: 1.0,
                window_multiple: 2,
                seed: 0,
                effective_rank: 2.5,
                per_head: vec![2.5],
            },
        ]);
        let csv = rank_csv(&report);
        assert_eq!(
            csv,
            "timestep,window_multiple,seed,effective_rank\n1.0,2,0,2.5\n0.5,1,0,4.0\n"
        );
        let parsed = parse_rank_csv(&csv).unwrap();
        assert_eq!(parsed[1], (0.5, 1, 0, 4.0));
        assert!(summary_csv(&report).starts_with(SUMMARY_CSV_HEADER));
        assert!(parse_rank_csv("a,b\n").is_err());
    }

    #[test]
    fn local_only_distance_is_zero() {
        let report = run_demo(&small_manifest(vec![FusionMode::LocalOnly])).unwrap();
        let m = report.mode(FusionMode::LocalOnly).unwrap();
        assert_eq!(m.mean_distance_to_local_only, 0.0);
        assert!(m
            .timesteps
            .iter()
            .all(|e| e.mean_distance_to_local_only == 0.0));
    }

    #[test]
    fn demo_is_reproducible_from_its_manifest() {
        let report = run_demo(&small_manifest(vec![
            FusionMode::FreeSpec,
            FusionMode::GlobalOnly,
        ]))
        .unwrap();
        let json = report.to_json().unwrap();
        let parsed = DemoReport::from_json(&json).unwrap();
        assert_eq!(parsed, report);
        let again = run_demo(&parsed.manifest).unwrap();
        assert_eq!(again.to_json().unwrap(), json);
    }

    #[test]
    fn demo_rejects_empty_inputs() {
        assert!(run_demo(&small_manifest(vec![])).is_err());
        let mut m = small_manifest(vec![FusionMode::FreeSpec]);
        m.seeds.clear();
        assert!(run_demo(&m).is_err());
    }
}
