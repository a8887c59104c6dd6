//! `FST1` tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   b"FST1"
//! offset 4   dtype code (0 = f32, 1 = f64)
//! offset 5   ndim (>= 1)
//! offset 6   two zero bytes
//! offset 8   ndim x u64 extents
//! then       row-major payload
//! ```

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Element;

pub const MAGIC: [u8; 4] = *b"FST1";
pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::BadDtype(other)),
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }

    fn get_wide(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
        }
    }
}

/// A dense row-major tensor as stored in an `FST1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ZeroNdim);
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("ndim {} exceeds 255", dims.len())));
        }
        if let Some((axis, _)) = dims.iter().enumerate().find(|(_, &e)| e == 0) {
            return Err(Error::BadExtent { axis, extent: 0 });
        }
        let count = element_count(&dims)?;
        if count != data.len() {
            return Err(Error::Shape(format!(
                "dims {dims:?} need {count} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    /// Row-major 2-D tensor from a matrix, stored with `T`'s dtype.
    pub fn from_matrix<T: Element>(m: &DMatrix<T>) -> Self {
        let (rows, cols) = m.shape();
        let mut flat = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                flat.push(m[(i, j)].to_wide());
            }
        }
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(flat.into_iter().map(|x| x as f32).collect()),
            DType::F64 => TensorData::F64(flat),
        };
        Self {
            dims: vec![rows, cols],
            data,
        }
    }

    /// Interprets a 2-D tensor as a matrix, converting the dtype if needed.
    pub fn to_matrix<T: Element>(&self) -> Result<DMatrix<T>> {
        let [rows, cols] = self.dims[..] else {
            return Err(Error::Shape(format!(
                "expected a 2-D tensor, got dims {:?}",
                self.dims
            )));
        };
        Ok(DMatrix::from_fn(rows, cols, |i, j| {
            T::from_wide(self.data.get_wide(i * cols + j))
        }))
    }

    /// Size in bytes of the encoded file.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 8 * self.dims.len() + self.dtype().size_of() * self.data.len()
    }
}

fn element_count(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::Shape(format!("element count of {dims:?} overflows")))
    })
}

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(t.encoded_len());
    out.extend_from_slice(&MAGIC);
    out.push(t.dtype().code());
    out.push(t.dims.len() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in &t.dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match &t.data {
        TensorData::F32(v) => {
            for (index, x) in v.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite { index });
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        TensorData::F64(v) => {
            for (index, x) in v.iter().enumerate() {
                if !x.is_finite() {
                    return Err(Error::NonFinite { index });
                }
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let found = bytes.len() as u64;
    if bytes.len() < HEADER_LEN {
        // Report a wrong prefix before a short header.
        if bytes.len() >= 4 && bytes[..4] != MAGIC {
            return Err(Error::BadMagic {
                found: bytes[..4].try_into().unwrap(),
            });
        }
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            found,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let dtype = DType::from_code(bytes[4])?;
    let ndim = bytes[5] as usize;
    if ndim == 0 {
        return Err(Error::ZeroNdim);
    }
    if bytes[6] != 0 || bytes[7] != 0 {
        return Err(Error::BadPadding([bytes[6], bytes[7]]));
    }
    let dims_end = HEADER_LEN + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Truncated {
            expected: dims_end as u64,
            found,
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for (axis, chunk) in bytes[HEADER_LEN..dims_end].chunks_exact(8).enumerate() {
        let extent = u64::from_le_bytes(chunk.try_into().unwrap());
        if extent == 0 || extent > usize::MAX as u64 {
            return Err(Error::BadExtent { axis, extent });
        }
        dims.push(extent as usize);
    }
    let count = element_count(&dims)?;
    let expected = count
        .checked_mul(dtype.size_of())
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| Error::Shape(format!("payload size of {dims:?} overflows")))?
        as u64;
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::TrailingBytes { expected, found });
    }
    let payload = &bytes[dims_end..];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    Ok(Tensor { dims, data })
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn write_matrix<T: Element>(path: impl AsRef<Path>, m: &DMatrix<T>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m))
}

pub fn read_matrix<T: Element>(path: impl AsRef<Path>) -> Result<DMatrix<T>> {
    read_tensor(path)?.to_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f32_matrix() -> Tensor {
        Tensor::new(
            vec![2, 3],
            TensorData::F32(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        )
        .unwrap()
    }

    #[test]
    fn f32_matrix_layout() {
        let t = f32_matrix();
        let bytes = encode(&t).unwrap();
        assert_eq!(&bytes[..4], b"FST1");
        assert_eq!(bytes[4], 0);
        assert_eq!(bytes[5], 2);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 3);
        assert_eq!(bytes.len() - 24, 24);
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn f64_vector_layout() {
        let t = Tensor::new(vec![1], TensorData::F64(vec![7.0])).unwrap();
        let bytes = encode(&t).unwrap();
        assert_eq!(bytes[4], 1);
        assert_eq!(bytes[5], 1);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 8);
        assert_eq!(&bytes[16..], &7.0f64.to_le_bytes());
    }

    #[test]
    fn nan_is_rejected() {
        let t = Tensor::new(vec![2], TensorData::F32(vec![1.0, f32::NAN])).unwrap();
        assert!(matches!(encode(&t), Err(Error::NonFinite { index: 1 })));
        let t = Tensor::new(vec![1], TensorData::F64(vec![f64::INFINITY])).unwrap();
        assert!(matches!(encode(&t), Err(Error::NonFinite { index: 0 })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fst");
        let t = Tensor::new(vec![2, 2], TensorData::F64(vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 16 + 32);
    }

    #[test]
    fn parse_errors_are_distinct() {
        let good = encode(&f32_matrix()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic { .. })));

        let short = &good[..good.len() - 1];
        assert!(matches!(decode(short), Err(Error::Truncated { .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::BadDtype(2))));

        let mut bad = good.clone();
        bad[5] = 0;
        assert!(matches!(decode(&bad), Err(Error::ZeroNdim)));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(Error::TrailingBytes { .. })));

        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert!(matches!(
            decode(&bad),
            Err(Error::BadExtent { axis: 0, .. })
        ));

        assert!(matches!(decode(b"FST"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn matrix_conversion_is_row_major() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = Tensor::from_matrix(&m);
        assert_eq!(t.dims(), &[2, 3]);
        assert_eq!(
            t.data(),
            &TensorData::F64(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        );
        assert_eq!(t.to_matrix::<f64>().unwrap(), m);
        let v = Tensor::new(vec![3], TensorData::F64(vec![1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(v.to_matrix::<f64>(), Err(Error::Shape(_))));
    }

    #[test]
    fn signed_zero_survives() {
        let t = Tensor::new(vec![2], TensorData::F64(vec![-0.0, 0.0])).unwrap();
        let back = decode(&encode(&t).unwrap()).unwrap();
        let TensorData::F64(v) = back.data() else {
            panic!()
        };
        assert_eq!(v[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(v[1].to_bits(), 0.0f64.to_bits());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        (prop::collection::vec(1usize..5, 1..4), any::<bool>()).prop_flat_map(|(dims, wide)| {
            let n: usize = dims.iter().product();
            if wide {
                prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, n)
                    .prop_map(move |v| Tensor::new(dims.clone(), TensorData::F64(v)).unwrap())
                    .boxed()
            } else {
                prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, n)
                    .prop_map(move |v| Tensor::new(dims.clone(), TensorData::F32(v)).unwrap())
                    .boxed()
            }
        })
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(t in arb_tensor()) {
            let bytes = encode(&t).unwrap();
            prop_assert_eq!(bytes.len(), t.encoded_len());
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.dims(), t.dims());
            // Compare bit patterns so that -0.0 and 0.0 stay distinct.
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
