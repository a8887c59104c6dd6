//! `freespec` command-line tool.
//!
//! Exit codes: 0 success, 2 usage, 3 file or parse failure, 4 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use freespec::attention::local_branch;
use freespec::attention::{merge_heads, AttentionInputs, WindowSpec};
use freespec::fusion::{
    freespec_attention, fuse_branches, FusionConfig, FusionMode, FusionOutcome, Stage,
};
use freespec::pipeline::{linspace_timesteps, sweep_windows, RankReport, RankRow, TrajectorySpec};
use freespec::report::{rank_csv, run_demo, summary_csv, Precision, RunManifest};
use freespec::spectral::{matrix_effective_rank, retained_rank, svd, tail_norm};
use freespec::tensor_io::{read_tensor, write_tensor, Tensor};
use freespec::{Element, Error, ErrorKind, Result};

#[derive(Parser)]
#[command(
    name = "freespec",
    version,
    about = "Singular-spectrum fusion of local and global attention"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse local and global attention branches into one output tensor.
    Fuse(FuseArgs),
    /// Effective rank of banded attention outputs across windows and timesteps.
    Effrank(EffrankArgs),
    /// Run fusion modes along surrogate trajectories and report output ranks.
    Demo(DemoArgs),
    /// Best low-rank reconstruction of a matrix.
    Truncate(TruncateArgs),
}

#[derive(Args, Clone)]
struct FusionFlags {
    /// Split timestep; fusion runs only for tau < t <= T.
    #[arg(long, default_value_t = 0.9)]
    tau: f64,
    /// Maximum timestep.
    #[arg(long = "T", default_value_t = 1.0)]
    t_max: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    #[arg(long, default_value_t = 5.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.15)]
    a0: f64,
    #[arg(long, default_value_t = 0.2)]
    a1: f64,
    /// Global weight used by LB_RA.
    #[arg(long, default_value_t = 0.5)]
    ra_weight: f64,
    /// Constant coefficient used by LOCAL_BASIS_FIXED and GLOBAL_BASIS.
    #[arg(long, default_value_t = 0.5)]
    fixed_gamma: f64,
}

impl FusionFlags {
    fn config(&self, mode: FusionMode) -> FusionConfig {
        FusionConfig {
            t_max: self.t_max,
            tau: self.tau,
            alpha: self.alpha,
            beta: self.beta,
            a0: self.a0,
            a1: self.a1,
            mode,
            ra_weight: self.ra_weight,
            fixed_gamma: self.fixed_gamma,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<FusionMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args)]
struct FuseArgs {
    /// Query tensor (tokens x channels).
    #[arg(long, requires_all = ["k", "v"], conflicts_with_all = ["local", "global"])]
    q: Option<PathBuf>,
    #[arg(long)]
    k: Option<PathBuf>,
    #[arg(long)]
    v: Option<PathBuf>,
    /// Precomputed local-branch output; skips attention.
    #[arg(long, requires = "global")]
    local: Option<PathBuf>,
    /// Precomputed global-branch output.
    #[arg(long, requires = "local")]
    global: Option<PathBuf>,
    /// Denoising timestep.
    #[arg(long)]
    t: f64,
    #[command(flatten)]
    fusion: FusionFlags,
    #[arg(long, default_value = "FREESPEC", value_parser = parse_mode)]
    mode: FusionMode,
    /// Native window half-width in tokens [default: a quarter of the tokens].
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, default_value_t = 1)]
    window_multiple: usize,
    /// Attention heads; channels are split evenly.
    #[arg(long, default_value_t = 1)]
    heads: usize,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EffrankArgs {
    /// FST1 tensor, or a JSON trajectory spec [default: the standard surrogate].
    #[arg(long)]
    input: Option<PathBuf>,
    /// Window multiples, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    windows: Vec<usize>,
    /// Timesteps visited by the trajectory, comma separated.
    #[arg(long, value_delimiter = ',')]
    timesteps: Option<Vec<f64>>,
    /// Number of seeds; seeds are 0..n.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Timestep recorded for a tensor input.
    #[arg(long, default_value_t = 1.0)]
    t: f64,
    /// Native window half-width for a tensor input (0 = each token attends
    /// only to itself, so the rank is that of the tensor).
    #[arg(long, default_value_t = 0)]
    native_window: usize,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    /// Rerun the sweep recorded in a manifest; other flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Per-row CSV; the summary and manifest are written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemoArgs {
    /// Fusion modes, comma separated [default: all].
    #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
    modes: Option<Vec<FusionMode>>,
    /// Number of seeds; seeds are 0..n.
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// JSON trajectory spec; the shape flags below override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    spatial_tokens: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    native_frames: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    signal_rank: Option<usize>,
    /// Number of timestep intervals between T and 0.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    window_multiple: usize,
    #[command(flatten)]
    fusion: FusionFlags,
    #[arg(long, default_value = "f64", value_parser = parse_precision)]
    precision: Precision,
    /// Rerun a manifest (or the manifest embedded in a demo report).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Report path [default: standard output].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TruncateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Fraction of the spectrum to keep, in (0, 1].
    #[arg(long)]
    keep_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 2,
        ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("FREESPEC_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::Parameter(format!(
            "FREESPEC_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    // Fails only if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Fuse(a) => fuse(&a),
        Command::Effrank(a) => effrank(&a),
        Command::Demo(a) => demo(&a),
        Command::Truncate(a) => truncate(&a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("freespec: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_matrix_as<T: Element>(path: &Path) -> Result<DMatrix<T>> {
    read_tensor(path)?.to_matrix()
}

// ---- fuse ----

fn fuse(a: &FuseArgs) -> Result<()> {
    match a.precision {
        Precision::F32 => fuse_typed::<f32>(a),
        Precision::F64 => fuse_typed::<f64>(a),
    }
}

fn fuse_typed<T: Element>(a: &FuseArgs) -> Result<()> {
    let cfg = a.fusion.config(a.mode);
    let (out, outcome) = if let (Some(l), Some(g)) = (&a.local, &a.global) {
        let outcome = fuse_branches(
            &read_matrix_as::<T>(l)?,
            &read_matrix_as::<T>(g)?,
            a.t,
            &cfg,
        )?;
        (outcome.output.clone(), outcome)
    } else {
        let (Some(q), Some(k), Some(v)) = (&a.q, &a.k, &a.v) else {
            return Err(Error::Parameter(
                "give either --q/--k/--v or --local/--global".into(),
            ));
        };
        let inp = AttentionInputs::new(read_matrix_as(q)?, read_matrix_as(k)?, read_matrix_as(v)?)?;
        let native = a.window.unwrap_or(inp.tokens() / 4);
        let win = WindowSpec::new(native, a.window_multiple)?;
        let outcomes = inp
            .split_heads(a.heads)?
            .iter()
            .map(|h| freespec_attention(h, win, a.t, &cfg))
            .collect::<Result<Vec<_>>>()?;
        let parts: Vec<_> = outcomes.iter().map(|o| o.output.clone()).collect();
        let merged = if parts.len() == 1 {
            parts[0].clone()
        } else {
            merge_heads(&parts)?
        };
        (
            merged,
            outcomes.into_iter().next().expect("at least one head"),
        )
    };
    write_tensor(&a.out, &Tensor::from_matrix(&out))?;
    println!("{}", fuse_summary(&out, &outcome, a));
    Ok(())
}

fn fuse_summary<T: Element>(out: &DMatrix<T>, outcome: &FusionOutcome<T>, a: &FuseArgs) -> String {
    let stage = match outcome.stage {
        Stage::LocalOnly => "local",
        Stage::GlobalOnly => "global",
        Stage::Fused => "fused",
    };
    let w_g = outcome.schedule.map_or(0.0, |s| s.w_g);
    format!(
        "shape={}x{} mode={} stage={stage} t={} w_g={w_g:.6} a_t={:.6} out={}",
        out.nrows(),
        out.ncols(),
        a.mode,
        a.t,
        outcome.residual_weight,
        a.out.display()
    )
}

// ---- effrank ----

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn write_rank_report(out: &Path, report: &RankReport) -> Result<()> {
    write_text(out, &rank_csv(report))?;
    write_text(&sibling(out, ".summary.csv"), &summary_csv(report))
}

fn effrank(a: &EffrankArgs) -> Result<()> {
    let manifest = if let Some(path) = &a.manifest {
        read_json::<RunManifest>(path)?
    } else {
        match &a.input {
            Some(p) if p.extension().is_some_and(|e| e == "json") => {
                effrank_manifest(a, read_json(p)?)
            }
            Some(p) => return effrank_tensor(a, p),
            None => effrank_manifest(a, TrajectorySpec::default()),
        }
    };
    let report = match manifest.precision {
        Precision::F32 => sweep_windows::<f32>(
            &manifest.trajectory,
            &manifest.window_multiples,
            &manifest.seeds,
        )?,
        Precision::F64 => sweep_windows::<f64>(
            &manifest.trajectory,
            &manifest.window_multiples,
            &manifest.seeds,
        )?,
    };
    write_rank_report(&a.out, &report)?;
    write_text(&sibling(&a.out, ".manifest.json"), &manifest.to_json()?)?;
    println!("{} rows -> {}", report.rows.len(), a.out.display());
    Ok(())
}

fn effrank_manifest(a: &EffrankArgs, mut spec: TrajectorySpec) -> RunManifest {
    if let Some(ts) = &a.timesteps {
        spec.timesteps = ts.clone();
    }
    RunManifest {
        seeds: (0..a.seeds).collect(),
        trajectory: spec,
        window_multiples: a.windows.clone(),
        ..RunManifest::new("effrank", a.precision)
    }
}

/// One row per window multiple: banded self-attention with `Q = K = V` set
/// to the tensor.
fn effrank_tensor(a: &EffrankArgs, path: &Path) -> Result<()> {
    let tensor = read_tensor(path)?;
    let rows = a
        .windows
        .iter()
        .map(|&m| {
            let win = WindowSpec::new(a.native_window, m)?;
            let rank = match a.precision {
                Precision::F32 => self_attention_rank(tensor.to_matrix::<f32>()?, win)?,
                Precision::F64 => self_attention_rank(tensor.to_matrix::<f64>()?, win)?,
            };
            Ok(RankRow {
                timestep: a.t,
                window_multiple: m,
                seed: 0,
                effective_rank: rank,
                per_head: vec![rank],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = RankReport::from_rows(rows);
    write_rank_report(&a.out, &report)?;
    println!("{} rows -> {}", report.rows.len(), a.out.display());
    Ok(())
}

fn self_attention_rank<T: Element>(z: DMatrix<T>, win: WindowSpec) -> Result<f64> {
    let inp = AttentionInputs::new(z.clone(), z.clone(), z)?;
    matrix_effective_rank(&local_branch(&inp, win)?)
}

// ---- demo ----

fn demo(a: &DemoArgs) -> Result<()> {
    let manifest = match &a.manifest {
        Some(path) => load_demo_manifest(path)?,
        None => demo_manifest(a)?,
    };
    let json = run_demo(&manifest)?.to_json()?;
    match &a.out {
        Some(out) => {
            write_text(out, &json)?;
            println!(
                "{} modes x {} seeds -> {}",
                manifest.modes.len(),
                manifest.seeds.len(),
                out.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn load_demo_manifest(path: &Path) -> Result<RunManifest> {
    let value: serde_json::Value = read_json(path)?;
    let manifest = value.get("manifest").cloned().unwrap_or(value);
    serde_json::from_value(manifest)
        .map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
}

fn demo_manifest(a: &DemoArgs) -> Result<RunManifest> {
    let mut spec: TrajectorySpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => TrajectorySpec::default(),
    };
    let overrides = [
        (&mut spec.frames, a.frames),
        (&mut spec.spatial_tokens, a.spatial_tokens),
        (&mut spec.channels, a.channels),
        (&mut spec.native_frames, a.native_frames),
        (&mut spec.heads, a.heads),
        (&mut spec.signal_rank, a.signal_rank),
    ];
    for (field, value) in overrides {
        if let Some(v) = value {
            *field = v;
        }
    }
    if let Some(n) = a.steps {
        if n == 0 {
            return Err(Error::Parameter("--steps must be >= 1".into()));
        }
        spec.timesteps = linspace_timesteps(spec.max_timestep, n);
    }
    let modes = a.modes.clone().unwrap_or_else(|| FusionMode::ALL.to_vec());
    Ok(RunManifest {
        seeds: (0..a.seeds).collect(),
        fusion: a.fusion.config(FusionMode::FreeSpec),
        trajectory: spec,
        window_multiples: vec![a.window_multiple],
        modes,
        ..RunManifest::new("demo", a.precision)
    })
}

// ---- truncate ----

fn truncate(a: &TruncateArgs) -> Result<()> {
    let tensor = read_tensor(&a.input)?;
    match tensor.dtype() {
        freespec::DType::F32 => truncate_typed::<f32>(a, &tensor),
        freespec::DType::F64 => truncate_typed::<f64>(a, &tensor),
    }
}

fn truncate_typed<T: Element>(a: &TruncateArgs, tensor: &Tensor) -> Result<()> {
    let z = tensor.to_matrix::<T>()?;
    let dec = svd(&z)?;
    let k = retained_rank(dec.rank(), a.keep_fraction)?;
    let out = dec.reconstruct_top(k);
    write_tensor(&a.out, &Tensor::from_matrix(&out))?;
    println!(
        "kept k={k} of r={} tail_error={} out={}",
        dec.rank(),
        freespec::report::format_f64(tail_norm(&dec.sigma_f64(), k)),
        a.out.display()
    );
    Ok(())
}
