use std::fmt::Debug;

use nalgebra::RealField;

use crate::tensor_io::DType;

/// Floating-point element type a [`FeatureMatrix`](crate::FeatureMatrix) may hold.
pub trait Element: RealField + Copy + Debug + Default + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_wide(x: f64) -> Self;
    fn to_wide(self) -> f64;
    /// Machine epsilon of the type, widened.
    fn epsilon_f64() -> f64;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn from_wide(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self as f64
    }
    fn epsilon_f64() -> f64 {
        f32::EPSILON as f64
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn from_wide(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_wide(self) -> f64 {
        self
    }
    fn epsilon_f64() -> f64 {
        f64::EPSILON
    }
}
