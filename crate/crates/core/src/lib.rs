//! Training-free singular-spectrum fusion for long-sequence attention.
//!
//! A long token sequence is attended twice: once with a sliding band of
//! the native window (the local branch) and once over the whole sequence
//! (the global branch). Both outputs are decomposed with a thin SVD, their
//! spectra are blended per rank with timestep- and rank-dependent
//! coefficients, the blend is rebuilt under the local singular basis and a
//! small global residual is added back.
//!
//! Modules, bottom up:
//!
//! * [`tensor_io`]: the `FST1` binary tensor format.
//! * [`attention`]: banded and full masked attention, the two branches.
//! * [`spectral`]: SVD, effective rank, truncated reconstruction.
//! * [`fusion`]: schedule, spectrum modulation and the end-to-end operator.
//! * [`pipeline`]: a seeded surrogate denoising trajectory and the sweeps
//!   run over it.
//! * [`report`]: run manifests and the CSV / JSON report emitters.

pub mod attention;
pub mod error;
pub mod fusion;
pub mod pipeline;
pub mod report;
pub mod scalar;
pub mod spectral;
pub mod tensor_io;

pub use attention::{AttentionInputs, AttentionMask, BranchOutputs, WindowSpec};
pub use error::{Error, ErrorKind, Result};
pub use fusion::{FusionConfig, FusionMode, FusionOutcome, ScheduleState};
pub use pipeline::{NoiseSchedule, RankReport, RankRow, TrajectorySpec};
pub use scalar::Element;
pub use spectral::SpectralDecomposition;
pub use tensor_io::{DType, Tensor, TensorData};

/// Dense feature matrix, rows are tokens and columns are channels.
pub type FeatureMatrix<T = f64> = nalgebra::DMatrix<T>;
