//! Seeded surrogate denoising trajectories and the experiments run on them.
//!
//! The surrogate latent at timestep `t` is
//!
//! ```text
//! X_t = (1 - lambda(t)) S + lambda(t) E_t
//! ```
//!
//! where `S` is a fixed low-rank token x channel signal whose temporal
//! factors vary smoothly across frames and `E_t` is fresh unit-variance
//! noise. Queries, keys and values are three fixed linear maps of `X_t`.
//! Every random draw is derived from the spec seed and a purpose tag, so a
//! trajectory is a pure function of its spec.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{self, split_heads, AttentionInputs, WindowSpec};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionConfig};
use crate::scalar::Element;
use crate::spectral;

/// Noise level `lambda(t)` as a function of `t / T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSchedule {
    /// `lambda = t / T`.
    Linear,
    /// `lambda = (t / T)^exponent`.
    Power { exponent: f64 },
}

impl NoiseSchedule {
    pub fn level(self, t: f64, t_max: f64) -> f64 {
        let x = (t / t_max).clamp(0.0, 1.0);
        match self {
            NoiseSchedule::Linear => x,
            NoiseSchedule::Power { exponent } => x.powf(exponent),
        }
    }
}

/// `n + 1` evenly spaced timesteps from `t_max` down to zero.
pub fn linspace_timesteps(t_max: f64, n: usize) -> Vec<f64> {
    if n == 0 {
        return vec![t_max];
    }
    (0..=n).map(|i| t_max * (n - i) as f64 / n as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    /// Temporal extent `F` of the long sequence.
    pub frames: usize,
    /// Tokens per frame, `h * w`.
    pub spatial_tokens: usize,
    pub channels: usize,
    /// Native temporal extent `f`; the native window is `f * h * w` tokens.
    pub native_frames: usize,
    /// Descending timesteps visited by the trajectory.
    pub timesteps: Vec<f64>,
    pub max_timestep: f64,
    pub seed: u64,
    pub signal_rank: usize,
    pub noise: NoiseSchedule,
    pub heads: usize,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            frames: 16,
            spatial_tokens: 16,
            channels: 32,
            native_frames: 4,
            timesteps: linspace_timesteps(1.0, 50),
            max_timestep: 1.0,
            seed: 0,
            signal_rank: 4,
            noise: NoiseSchedule::Linear,
            heads: 1,
        }
    }
}

impl TrajectorySpec {
    pub fn tokens(&self) -> usize {
        self.frames * self.spatial_tokens
    }

    pub fn native_window(&self) -> usize {
        self.native_frames * self.spatial_tokens
    }

    pub fn window(&self, multiple: usize) -> Result<WindowSpec> {
        WindowSpec::new(self.native_window(), multiple)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn noise_level(&self, t: f64) -> f64 {
        self.noise.level(t, self.max_timestep)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        if self.frames == 0 || self.spatial_tokens == 0 || self.channels == 0 {
            return bad(format!(
                "trajectory shape must be positive, got F = {}, h*w = {}, d = {}",
                self.frames, self.spatial_tokens, self.channels
            ));
        }
        if self.native_frames == 0 || self.frames % self.native_frames != 0 {
            return bad(format!(
                "F = {} must be a positive multiple of f = {}",
                self.frames, self.native_frames
            ));
        }
        if self.signal_rank == 0 || self.signal_rank > self.channels.min(self.tokens()) {
            return bad(format!("signal rank {} out of range", self.signal_rank));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "{} channels cannot be split into {} heads",
                self.channels, self.heads
            ));
        }
        if !(self.max_timestep > 0.0) || !self.max_timestep.is_finite() {
            return bad(format!(
                "max timestep must be > 0, got {}",
                self.max_timestep
            ));
        }
        if self.timesteps.is_empty() {
            return bad("trajectory needs at least one timestep".into());
        }
        if self
            .timesteps
            .iter()
            .any(|&t| !(0.0..=self.max_timestep).contains(&t))
        {
            return bad(format!("timesteps must lie in [0, {}]", self.max_timestep));
        }
        if self.timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return bad("timesteps must be strictly descending".into());
        }
        if let NoiseSchedule::Power { exponent } = self.noise {
            if !(exponent > 0.0) || !exponent.is_finite() {
                return bad(format!("noise exponent must be > 0, got {exponent}"));
            }
        }
        Ok(())
    }
}

// Purpose tags for derived seeds.
const TAG_SIGNAL: u64 = fnv1a(b"signal");
const TAG_QUERY: u64 = fnv1a(b"proj-q");
const TAG_KEY: u64 = fnv1a(b"proj-k");
const TAG_VALUE: u64 = fnv1a(b"proj-v");
const TAG_NOISE: u64 = fnv1a(b"noise");

const fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
        i += 1;
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// `seed XOR hash(index, tag)`.
pub fn derive_seed(seed: u64, index: u64, tag: u64) -> u64 {
    seed ^ splitmix64(splitmix64(index) ^ tag)
}

fn rng_for(seed: u64, index: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, index, tag))
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng, std: f64) -> DMatrix<f64> {
    // Filled row-major so the draw order does not depend on storage layout.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let z: f64 = rng.sample(StandardNormal);
            m[(i, j)] = std * z;
        }
    }
    m
}

/// Low-rank signal with unit mean square. Component `k` has a spatial
/// profile modulated by a slow cosine over frames.
fn signal_matrix(spec: &TrajectorySpec) -> DMatrix<f64> {
    let mut rng = rng_for(spec.seed, 0, TAG_SIGNAL);
    let (frames, spatial, r) = (spec.frames, spec.spatial_tokens, spec.signal_rank);
    let profiles = gaussian(spatial, r, &mut rng, 1.0);
    let channel_factors = gaussian(spec.channels, r, &mut rng, 1.0);
    let mut temporal = Vec::with_capacity(r);
    for _ in 0..r {
        let cycles: f64 = rng.random_range(0.25..1.5);
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        temporal.push((cycles, phase));
    }
    let token_factors = DMatrix::from_fn(frames * spatial, r, |token, k| {
        let (frame, s) = (token / spatial, token % spatial);
        let (cycles, phase) = temporal[k];
        let angle = std::f64::consts::TAU * cycles * frame as f64 / frames as f64 + phase;
        profiles[(s, k)] * angle.cos()
    });
    let s = token_factors * channel_factors.transpose();
    let rms = (s.iter().map(|x| x * x).sum::<f64>() / s.len() as f64).sqrt();
    if rms > 0.0 {
        s / rms
    } else {
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryStep<T: Element = f64> {
    pub t: f64,
    pub noise_level: f64,
    pub latent: DMatrix<T>,
    pub inputs: AttentionInputs<T>,
}

#[derive(Debug, Clone)]
pub struct Trajectory<T: Element = f64> {
    pub spec: TrajectorySpec,
    pub signal: DMatrix<T>,
    pub steps: Vec<TrajectoryStep<T>>,
}

pub fn make_trajectory<T: Element>(spec: &TrajectorySpec) -> Result<Trajectory<T>> {
    spec.validate()?;
    let d = spec.channels;
    let n = spec.tokens();
    let signal = signal_matrix(spec);
    let proj_std = 1.0 / (d as f64).sqrt();
    let w_q = gaussian(d, d, &mut rng_for(spec.seed, 0, TAG_QUERY), proj_std);
    let w_k = gaussian(d, d, &mut rng_for(spec.seed, 0, TAG_KEY), proj_std);
    let w_v = gaussian(d, d, &mut rng_for(spec.seed, 0, TAG_VALUE), proj_std);
    let cast = |m: &DMatrix<f64>| m.map(T::from_wide);

    let steps = spec
        .timesteps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let lambda = spec.noise_level(t);
            let noise = gaussian(n, d, &mut rng_for(spec.seed, i as u64, TAG_NOISE), 1.0);
            let latent = &signal * (1.0 - lambda) + noise * lambda;
            let inputs = AttentionInputs::new(
                cast(&(&latent * &w_q)),
                cast(&(&latent * &w_k)),
                cast(&(&latent * &w_v)),
            )?;
            Ok(TrajectoryStep {
                t,
                noise_level: lambda,
                latent: cast(&latent),
                inputs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory {
        spec: spec.clone(),
        signal: cast(&signal),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub timestep: f64,
    pub window_multiple: usize,
    pub seed: u64,
    /// Mean over heads.
    pub effective_rank: f64,
    pub per_head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub timestep: f64,
    pub window_multiple: usize,
    pub count: usize,
    pub mean: f64,
    pub std_error: f64,
}

impl RankSummary {
    fn from_values(timestep: f64, window_multiple: usize, values: &[f64]) -> Self {
        let (mean, std_error) = mean_and_std_error(values);
        Self {
            timestep,
            window_multiple,
            count: values.len(),
            mean,
            std_error,
        }
    }
}

/// Sample mean and standard error (`n - 1` denominator); zero error for one value.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Effective-rank table, sorted by timestep (descending), window multiple
/// and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
    pub summary: Vec<RankSummary>,
}

fn sort_rows(rows: &mut [RankRow]) {
    rows.sort_by(|a, b| {
        b.timestep
            .total_cmp(&a.timestep)
            .then(a.window_multiple.cmp(&b.window_multiple))
            .then(a.seed.cmp(&b.seed))
    });
}

fn sort_summary(summary: &mut [RankSummary]) {
    summary.sort_by(|a, b| {
        b.timestep
            .total_cmp(&a.timestep)
            .then(a.window_multiple.cmp(&b.window_multiple))
    });
}

impl RankReport {
    /// Sorts `rows` and summarizes each distinct `(timestep, window_multiple)`.
    pub fn from_rows(mut rows: Vec<RankRow>) -> Self {
        sort_rows(&mut rows);
        let mut summary = Vec::new();
        let mut start = 0;
        while start < rows.len() {
            let key = (rows[start].timestep, rows[start].window_multiple);
            let end = rows[start..]
                .iter()
                .position(|r| (r.timestep, r.window_multiple) != key)
                .map_or(rows.len(), |p| start + p);
            let values: Vec<f64> = rows[start..end].iter().map(|r| r.effective_rank).collect();
            summary.push(RankSummary::from_values(key.0, key.1, &values));
            start = end;
        }
        Self { rows, summary }
    }

    pub fn summary_for(&self, timestep: f64, window_multiple: usize) -> Option<&RankSummary> {
        self.summary
            .iter()
            .find(|s| s.timestep == timestep && s.window_multiple == window_multiple)
    }
}

fn per_head_ranks<T: Element>(out: &DMatrix<T>, heads: usize) -> Result<Vec<f64>> {
    split_heads(out, heads)?
        .iter()
        .map(spectral::matrix_effective_rank)
        .collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Effective rank of banded attention outputs for every
/// `(timestep, window multiple, seed)`.
///
/// Each entry of `multiples` gets its own summary line, so a repeated
/// multiple yields repeated statistics.
pub fn sweep_windows<T: Element>(
    spec: &TrajectorySpec,
    multiples: &[usize],
    seeds: &[u64],
) -> Result<RankReport> {
    spec.validate()?;
    if multiples.is_empty() {
        return Err(Error::Parameter("no window multiples given".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Parameter("no seeds given".into()));
    }
    for &m in multiples {
        if m == 0 {
            return Err(Error::Parameter("window multiple must be >= 1".into()));
        }
        if m * spec.native_frames > spec.frames {
            return Err(Error::WindowExceedsSequence {
                multiple: m,
                frames: m * spec.native_frames,
                total: spec.frames,
            });
        }
    }

    // rows_by_seed[seed][step][multiple entry]
    let rows_by_seed: Vec<Vec<Vec<RankRow>>> = seeds
        .par_iter()
        .map(|&seed| {
            let traj = make_trajectory::<T>(&spec.with_seed(seed))?;
            traj.steps
                .iter()
                .map(|step| {
                    let heads = step.inputs.split_heads(spec.heads)?;
                    multiples
                        .iter()
                        .map(|&m| {
                            let win = spec.window(m)?;
                            let per_head = heads
                                .iter()
                                .map(|h| {
                                    spectral::matrix_effective_rank(&attention::local_branch(
                                        h, win,
                                    )?)
                                })
                                .collect::<Result<Vec<_>>>()?;
                            Ok(RankRow {
                                timestep: step.t,
                                window_multiple: m,
                                seed,
                                effective_rank: mean(&per_head),
                                per_head,
                            })
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    for (step_idx, &t) in spec.timesteps.iter().enumerate() {
        for (entry, &m) in multiples.iter().enumerate() {
            let values: Vec<f64> = rows_by_seed
                .iter()
                .map(|s| s[step_idx][entry].effective_rank)
                .collect();
            summary.push(RankSummary::from_values(t, m, &values));
        }
    }
    sort_summary(&mut summary);
    let mut rows: Vec<RankRow> = rows_by_seed.into_iter().flatten().flatten().collect();
    sort_rows(&mut rows);
    Ok(RankReport { rows, summary })
}

/// Outputs of one fusion mode along a trajectory.
#[derive(Debug, Clone)]
pub struct ModeRun<T: Element = f64> {
    /// `(t, Z^o_t)` in trajectory order.
    pub outputs: Vec<(f64, DMatrix<T>)>,
    pub report: RankReport,
}

impl<T: Element> ModeRun<T> {
    pub fn mean_effective_rank(&self) -> f64 {
        mean(
            &self
                .report
                .rows
                .iter()
                .map(|r| r.effective_rank)
                .collect::<Vec<_>>(),
        )
    }
}

/// Applies the fusion operator with `cfg.mode` at every timestep, from `T`
/// down to 0.
pub fn run_mode<T: Element>(
    spec: &TrajectorySpec,
    cfg: &FusionConfig,
    win: WindowSpec,
) -> Result<ModeRun<T>> {
    cfg.validate()?;
    spec.validate()?;
    if let Some(&t) = spec.timesteps.iter().find(|&&t| t > cfg.t_max) {
        return Err(Error::Parameter(format!(
            "timestep {t} exceeds T = {}",
            cfg.t_max
        )));
    }
    let traj = make_trajectory::<T>(spec)?;
    let mut outputs = Vec::with_capacity(traj.steps.len());
    let mut rows = Vec::with_capacity(traj.steps.len());
    for step in &traj.steps {
        let out = fusion::freespec_attention_heads(&step.inputs, spec.heads, win, step.t, cfg)?;
        let per_head = per_head_ranks(&out, spec.heads)?;
        rows.push(RankRow {
            timestep: step.t,
            window_multiple: win.multiple,
            seed: spec.seed,
            effective_rank: mean(&per_head),
            per_head,
        });
        outputs.push((step.t, out));
    }
    Ok(ModeRun {
        outputs,
        report: RankReport::from_rows(rows),
    })
}
