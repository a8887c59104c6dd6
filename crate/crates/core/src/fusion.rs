//! Spectrum fusion of the local and global attention branches.
//!
//! For `tau < t <= T` both branch outputs are decomposed, their singular
//! values are blended per rank with coefficients
//!
//! ```text
//! p      = (T - t) / (T - tau)
//! w_l    = (1 - exp(-alpha p)) / (1 - exp(-alpha)),   w_g = 1 - w_l
//! gamma_k = w_g exp(-beta k / r),                      k = 1..r
//! s_k    = gamma_k s^g_k + (1 - gamma_k) s^l_k
//! ```
//!
//! the blend is rebuilt under the local singular basis, and a residual
//! `a = a0 + a1 w_g` of the global output is mixed back in. For `t <= tau`
//! the local branch is returned untouched.
//!
//! All schedule arithmetic is done in `f64` whatever the feature type.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attention::{self, merge_heads, AttentionInputs, WindowSpec};
use crate::error::{Error, Result};
use crate::scalar::Element;
use crate::spectral::{self, reconstruct_with};

/// Which parts of the operator are active. The names follow the ablation
/// axes: global vs local reconstruction basis (GB / LB), rank-aware (RA)
/// and timestep-aware (TA) modulation, fixed (F-GR) or timestep-aware
/// (T-GR) global residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "FREESPEC")]
    FreeSpec,
    #[serde(rename = "GLOBAL_BASIS")]
    GlobalBasis,
    #[serde(rename = "LOCAL_BASIS_FIXED")]
    LocalBasisFixed,
    #[serde(rename = "LB_RA")]
    LbRa,
    #[serde(rename = "LB_TA")]
    LbTa,
    #[serde(rename = "LB_RA_TA")]
    LbRaTa,
    #[serde(rename = "LB_RA_TA_FGR")]
    LbRaTaFgr,
    #[serde(rename = "LB_RA_TA_TGR")]
    LbRaTaTgr,
    #[serde(rename = "LOCAL_ONLY")]
    LocalOnly,
    #[serde(rename = "GLOBAL_ONLY")]
    GlobalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Basis {
    Local,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Residual {
    None,
    Fixed,
    TimestepAware,
}

impl FusionMode {
    pub const ALL: [FusionMode; 10] = [
        FusionMode::FreeSpec,
        FusionMode::GlobalBasis,
        FusionMode::LocalBasisFixed,
        FusionMode::LbRa,
        FusionMode::LbTa,
        FusionMode::LbRaTa,
        FusionMode::LbRaTaFgr,
        FusionMode::LbRaTaTgr,
        FusionMode::LocalOnly,
        FusionMode::GlobalOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::FreeSpec => "FREESPEC",
            FusionMode::GlobalBasis => "GLOBAL_BASIS",
            FusionMode::LocalBasisFixed => "LOCAL_BASIS_FIXED",
            FusionMode::LbRa => "LB_RA",
            FusionMode::LbTa => "LB_TA",
            FusionMode::LbRaTa => "LB_RA_TA",
            FusionMode::LbRaTaFgr => "LB_RA_TA_FGR",
            FusionMode::LbRaTaTgr => "LB_RA_TA_TGR",
            FusionMode::LocalOnly => "LOCAL_ONLY",
            FusionMode::GlobalOnly => "GLOBAL_ONLY",
        }
    }

    pub fn basis(self) -> Basis {
        match self {
            FusionMode::GlobalBasis | FusionMode::GlobalOnly => Basis::Global,
            _ => Basis::Local,
        }
    }

    pub fn residual(self) -> Residual {
        match self {
            FusionMode::FreeSpec | FusionMode::LbRaTaTgr => Residual::TimestepAware,
            FusionMode::LbRaTaFgr => Residual::Fixed,
            _ => Residual::None,
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(FusionMode::name).join(", ")
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim().to_ascii_uppercase().replace('-', "_");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == wanted)
            .ok_or_else(|| {
                Error::Parameter(format!(
                    "unknown fusion mode {s:?}; valid modes: {}",
                    FusionMode::valid_names()
                ))
            })
    }
}

/// Scalar knobs of the operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Maximum timestep `T`.
    pub t_max: f64,
    /// Split timestep; fusion runs only for `tau < t <= T`.
    pub tau: f64,
    /// Transition speed of the branch-weight schedule.
    pub alpha: f64,
    /// Decay of the global coefficient along the spectrum.
    pub beta: f64,
    pub a0: f64,
    pub a1: f64,
    pub mode: FusionMode,
    /// `w_g` used by `LB_RA`, which has no timestep term.
    pub ra_weight: f64,
    /// Constant coefficient used by `LOCAL_BASIS_FIXED` and `GLOBAL_BASIS`.
    pub fixed_gamma: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            t_max: 1.0,
            tau: 0.9,
            alpha: 5.0,
            beta: 5.0,
            a0: 0.15,
            a1: 0.2,
            mode: FusionMode::FreeSpec,
            ra_weight: 0.5,
            fixed_gamma: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn with_mode(mut self, mode: FusionMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.t_max,
            self.tau,
            self.alpha,
            self.beta,
            self.a0,
            self.a1,
            self.ra_weight,
            self.fixed_gamma,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::Parameter("fusion parameters must be finite".into()));
        }
        if !(0.0 <= self.tau && self.tau < self.t_max) {
            return Err(Error::Parameter(format!(
                "need 0 <= tau < T, got tau = {}, T = {}",
                self.tau, self.t_max
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Parameter(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Parameter(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if self.a0 < 0.0 || self.a1 < 0.0 || self.a0 + self.a1 > 1.0 {
            return Err(Error::Parameter(format!(
                "need a0, a1 >= 0 and a0 + a1 <= 1, got a0 = {}, a1 = {}",
                self.a0, self.a1
            )));
        }
        for (name, x) in [
            ("ra_weight", self.ra_weight),
            ("fixed_gamma", self.fixed_gamma),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Parameter(format!(
                    "{name} must lie in [0, 1], got {x}"
                )));
            }
        }
        Ok(())
    }

    /// True when `t` falls in the fusion stage `(tau, T]`.
    pub fn in_fusion_stage(&self, t: f64) -> bool {
        t > self.tau && t <= self.t_max
    }
}

/// Schedule values at one timestep of the fusion stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScheduleState {
    pub t: f64,
    pub progress: f64,
    pub w_l: f64,
    pub w_g: f64,
}

impl ScheduleState {
    pub fn at(t: f64, cfg: &FusionConfig) -> Result<Self> {
        let progress = progress(t, cfg)?;
        let (w_l, w_g) = branch_weights(progress, cfg.alpha)?;
        Ok(Self {
            t,
            progress,
            w_l,
            w_g,
        })
    }
}

/// `(T - t) / (T - tau)`; only defined inside the fusion stage.
pub fn progress(t: f64, cfg: &FusionConfig) -> Result<f64> {
    if !cfg.in_fusion_stage(t) {
        return Err(Error::OutOfStage {
            t,
            tau: cfg.tau,
            t_max: cfg.t_max,
        });
    }
    Ok((cfg.t_max - t) / (cfg.t_max - cfg.tau))
}

/// `(w_l, w_g)` of the exponential schedule.
pub fn branch_weights(p: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::Parameter(format!("alpha must be > 0, got {alpha}")));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Parameter(format!(
            "progress must lie in [0, 1], got {p}"
        )));
    }
    // expm1 keeps precision for small alpha * p.
    let w_l = ((-alpha * p).exp_m1() / (-alpha).exp_m1()).clamp(0.0, 1.0);
    Ok((w_l, 1.0 - w_l))
}

/// `gamma_k = w_g exp(-beta k / r)` for `k = 1..=r`.
pub fn rank_coefficients(w_g: f64, beta: f64, r: usize) -> Result<Vec<f64>> {
    if r == 0 {
        return Err(Error::Parameter("rank count must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&w_g) {
        return Err(Error::Parameter(format!(
            "w_g must lie in [0, 1], got {w_g}"
        )));
    }
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Parameter(format!("beta must be >= 0, got {beta}")));
    }
    let r_f = r as f64;
    Ok((1..=r)
        .map(|k| w_g * (-beta * k as f64 / r_f).exp())
        .collect())
}

/// Per-rank convex blend `gamma_k s^g_k + (1 - gamma_k) s^l_k`.
pub fn fuse_spectrum(gamma: &[f64], sigma_g: &[f64], sigma_l: &[f64]) -> Result<Vec<f64>> {
    if gamma.len() != sigma_g.len() || gamma.len() != sigma_l.len() {
        return Err(Error::Shape(format!(
            "gamma has {} entries, spectra have {} and {}",
            gamma.len(),
            sigma_g.len(),
            sigma_l.len()
        )));
    }
    if gamma.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(Error::Parameter("coefficients must lie in [0, 1]".into()));
    }
    if sigma_g.iter().chain(sigma_l).any(|s| !(*s >= 0.0)) {
        return Err(Error::Parameter("spectra must be non-negative".into()));
    }
    Ok(gamma
        .iter()
        .zip(sigma_g.iter().zip(sigma_l))
        .map(|(&g, (&sg, &sl))| {
            let blended = g * sg + (1.0 - g) * sl;
            // Pin the blend inside its operands against rounding.
            blended.clamp(sg.min(sl), sg.max(sl))
        })
        .collect())
}

/// `U diag(sigma_hat) V^T` under the given basis.
pub fn reconstruct_local_basis<T: Element>(
    u: &DMatrix<T>,
    v: &DMatrix<T>,
    sigma_hat: &[f64],
) -> Result<DMatrix<T>> {
    let r = sigma_hat.len();
    if u.ncols() != r || v.ncols() != r {
        return Err(Error::Shape(format!(
            "U is {:?}, V is {:?}, spectrum has {r} entries",
            u.shape(),
            v.shape()
        )));
    }
    let sigma: Vec<T> = sigma_hat.iter().map(|&s| T::from_wide(s)).collect();
    Ok(reconstruct_with(u, &sigma, v))
}

/// Residual weight `a_t`: `a0 + a1 w_g`, or `a0` alone for a fixed residual.
pub fn residual_weight(w_g: f64, cfg: &FusionConfig) -> f64 {
    match cfg.mode.residual() {
        Residual::Fixed => cfg.a0,
        _ => cfg.a0 + cfg.a1 * w_g,
    }
}

/// `(1 - a_t) Z_hat + a_t Z^g`.
pub fn global_residual<T: Element>(
    z_hat: &DMatrix<T>,
    z_g: &DMatrix<T>,
    w_g: f64,
    cfg: &FusionConfig,
) -> Result<DMatrix<T>> {
    if z_hat.shape() != z_g.shape() {
        return Err(Error::Shape(format!(
            "reconstruction is {:?}, global branch is {:?}",
            z_hat.shape(),
            z_g.shape()
        )));
    }
    cfg.validate()?;
    let a = T::from_wide(residual_weight(w_g, cfg));
    // Written as Z_hat + a (Z^g - Z_hat) so that a = 0 and Z_hat = Z^g are exact.
    Ok(z_hat.zip_map(z_g, |h, g| h + a * (g - h)))
}

/// Coefficients for the active mode and schedule.
pub fn mode_coefficients(cfg: &FusionConfig, state: &ScheduleState, r: usize) -> Result<Vec<f64>> {
    match cfg.mode {
        FusionMode::LocalBasisFixed | FusionMode::GlobalBasis => {
            if r == 0 {
                return Err(Error::Parameter("rank count must be >= 1".into()));
            }
            Ok(vec![cfg.fixed_gamma; r])
        }
        FusionMode::LbRa => rank_coefficients(cfg.ra_weight, cfg.beta, r),
        FusionMode::LbTa => rank_coefficients(state.w_g, 0.0, r),
        _ => rank_coefficients(state.w_g, cfg.beta, r),
    }
}

/// What the operator did at one call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Stage {
    /// `t <= tau` or `LOCAL_ONLY`: the local branch was returned.
    LocalOnly,
    /// `GLOBAL_ONLY`: the global branch was returned.
    GlobalOnly,
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutcome<T: Element = f64> {
    pub output: DMatrix<T>,
    pub stage: Stage,
    pub schedule: Option<ScheduleState>,
    /// `a_t` when a residual was applied, otherwise 0.
    pub residual_weight: f64,
}

impl<T: Element> FusionOutcome<T> {
    fn passthrough(output: DMatrix<T>, stage: Stage) -> Self {
        Self {
            output,
            stage,
            schedule: None,
            residual_weight: 0.0,
        }
    }
}

fn check_timestep(t: f64, cfg: &FusionConfig) -> Result<()> {
    if !(0.0..=cfg.t_max).contains(&t) {
        return Err(Error::Parameter(format!(
            "timestep {t} outside [0, {}]",
            cfg.t_max
        )));
    }
    Ok(())
}

/// The fusion operator on precomputed branch outputs.
pub fn fuse_branches<T: Element>(
    z_local: &DMatrix<T>,
    z_global: &DMatrix<T>,
    t: f64,
    cfg: &FusionConfig,
) -> Result<FusionOutcome<T>> {
    cfg.validate()?;
    check_timestep(t, cfg)?;
    if z_local.shape() != z_global.shape() {
        return Err(Error::Shape(format!(
            "local branch is {:?}, global branch is {:?}",
            z_local.shape(),
            z_global.shape()
        )));
    }
    match cfg.mode {
        FusionMode::GlobalOnly => {
            return Ok(FusionOutcome::passthrough(
                z_global.clone(),
                Stage::GlobalOnly,
            ))
        }
        FusionMode::LocalOnly => {
            return Ok(FusionOutcome::passthrough(
                z_local.clone(),
                Stage::LocalOnly,
            ))
        }
        _ if !cfg.in_fusion_stage(t) => {
            return Ok(FusionOutcome::passthrough(
                z_local.clone(),
                Stage::LocalOnly,
            ))
        }
        _ => {}
    }

    let state = ScheduleState::at(t, cfg)?;
    let dec_l = spectral::svd(z_local)?;
    let dec_g = spectral::svd(z_global)?;
    let gamma = mode_coefficients(cfg, &state, dec_l.rank())?;
    let sigma_hat = fuse_spectrum(&gamma, &dec_g.sigma_f64(), &dec_l.sigma_f64())?;
    let (u, v) = match cfg.mode.basis() {
        Basis::Local => (dec_l.u(), dec_l.v()),
        Basis::Global => (dec_g.u(), dec_g.v()),
    };
    let z_hat = reconstruct_local_basis(u, v, &sigma_hat)?;
    let (output, residual_weight) = match cfg.mode.residual() {
        Residual::None => (z_hat, 0.0),
        _ => (
            global_residual(&z_hat, z_global, state.w_g, cfg)?,
            residual_weight(state.w_g, cfg),
        ),
    };
    Ok(FusionOutcome {
        output,
        stage: Stage::Fused,
        schedule: Some(state),
        residual_weight,
    })
}

/// End-to-end single-head operator: attention branches, then fusion.
///
/// Outside the fusion stage only the branch that is returned is computed.
pub fn freespec_attention<T: Element>(
    inp: &AttentionInputs<T>,
    win: WindowSpec,
    t: f64,
    cfg: &FusionConfig,
) -> Result<FusionOutcome<T>> {
    cfg.validate()?;
    check_timestep(t, cfg)?;
    match cfg.mode {
        FusionMode::GlobalOnly => Ok(FusionOutcome::passthrough(
            attention::global_branch(inp)?,
            Stage::GlobalOnly,
        )),
        FusionMode::LocalOnly => Ok(FusionOutcome::passthrough(
            attention::local_branch(inp, win)?,
            Stage::LocalOnly,
        )),
        _ if !cfg.in_fusion_stage(t) => Ok(FusionOutcome::passthrough(
            attention::local_branch(inp, win)?,
            Stage::LocalOnly,
        )),
        _ => {
            let branches = attention::dual_branch(inp, win)?;
            fuse_branches(&branches.local, &branches.global, t, cfg)
        }
    }
}

/// Runs [`freespec_attention`] independently on each head and concatenates
/// the outputs along channels.
pub fn freespec_attention_heads<T: Element>(
    inp: &AttentionInputs<T>,
    heads: usize,
    win: WindowSpec,
    t: f64,
    cfg: &FusionConfig,
) -> Result<DMatrix<T>> {
    if heads == 1 {
        return Ok(freespec_attention(inp, win, t, cfg)?.output);
    }
    let outputs = inp
        .split_heads(heads)?
        .iter()
        .map(|h| freespec_attention(h, win, t, cfg).map(|o| o.output))
        .collect::<Result<Vec<_>>>()?;
    merge_heads(&outputs)
}
