//! Masked scaled-dot-product attention and the local / global branches.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Element;

/// Single-head query, key and value features, `N` tokens by `d` channels.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs<T: Element = f64> {
    q: DMatrix<T>,
    k: DMatrix<T>,
    v: DMatrix<T>,
    scale: T,
}

impl<T: Element> AttentionInputs<T> {
    /// Inputs with the default logit scale `1/sqrt(d)`.
    pub fn new(q: DMatrix<T>, k: DMatrix<T>, v: DMatrix<T>) -> Result<Self> {
        let (n, d) = q.shape();
        if n == 0 || d == 0 {
            return Err(Error::InvalidSize(format!("attention inputs are {n}x{d}")));
        }
        if k.shape() != (n, d) || v.shape() != (n, d) {
            return Err(Error::Shape(format!(
                "Q is {n}x{d}, K is {:?}, V is {:?}",
                k.shape(),
                v.shape()
            )));
        }
        let scale = T::from_wide(1.0 / (d as f64).sqrt());
        Ok(Self { q, k, v, scale })
    }

    pub fn with_scale(mut self, scale: T) -> Result<Self> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::Parameter(format!(
                "attention scale must be positive, got {scale:?}"
            )));
        }
        self.scale = scale;
        Ok(self)
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }
    pub fn k(&self) -> &DMatrix<T> {
        &self.k
    }
    pub fn v(&self) -> &DMatrix<T> {
        &self.v
    }
    pub fn scale(&self) -> T {
        self.scale
    }
    pub fn tokens(&self) -> usize {
        self.q.nrows()
    }
    pub fn channels(&self) -> usize {
        self.q.ncols()
    }

    /// Splits channels into `heads` contiguous groups, each with the default
    /// scale of its own width.
    pub fn split_heads(&self, heads: usize) -> Result<Vec<AttentionInputs<T>>> {
        let qs = split_heads(&self.q, heads)?;
        let ks = split_heads(&self.k, heads)?;
        let vs = split_heads(&self.v, heads)?;
        qs.into_iter()
            .zip(ks)
            .zip(vs)
            .map(|((q, k), v)| AttentionInputs::new(q, k, v))
            .collect()
    }
}

/// Splits the columns of `m` into `heads` equal contiguous blocks.
pub fn split_heads<T: Element>(m: &DMatrix<T>, heads: usize) -> Result<Vec<DMatrix<T>>> {
    let d = m.ncols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Parameter(format!(
            "{d} channels cannot be split into {heads} heads"
        )));
    }
    let width = d / heads;
    Ok((0..heads)
        .map(|h| m.columns(h * width, width).into_owned())
        .collect())
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Element>(parts: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    let Some(first) = parts.first() else {
        return Err(Error::InvalidSize("no heads to merge".into()));
    };
    let (n, width) = first.shape();
    if parts.iter().any(|p| p.shape() != (n, width)) {
        return Err(Error::Shape("heads differ in shape".into()));
    }
    let mut out = DMatrix::zeros(n, width * parts.len());
    for (h, p) in parts.iter().enumerate() {
        out.columns_mut(h * width, width).copy_from(p);
    }
    Ok(out)
}

/// Native token window `W = f*h*w` and the multiple it is extended by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub native: usize,
    pub multiple: usize,
}

impl WindowSpec {
    /// `native = 0` is accepted and gives a self-only band.
    pub fn new(native: usize, multiple: usize) -> Result<Self> {
        if multiple == 0 {
            return Err(Error::Parameter("window multiple must be >= 1".into()));
        }
        Ok(Self { native, multiple })
    }

    pub fn native(native: usize) -> Self {
        Self {
            native,
            multiple: 1,
        }
    }

    /// Half-width of the band in tokens.
    pub fn effective(&self) -> usize {
        self.native.saturating_mul(self.multiple)
    }
}

/// Row-major `N x N` admissibility matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Result<Self> {
        Self::from_fn(n, |_, _| true)
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidSize("mask over zero tokens".into()));
        }
        let mut bits = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                bits.push(f(i, j));
            }
        }
        Ok(Self { n, bits })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn is_admissible(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.n..(i + 1) * self.n]
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }
}

/// Band mask: `(i, j)` admissible iff `|i - j| <= window`.
pub fn band_mask(n: usize, window: usize) -> Result<AttentionMask> {
    AttentionMask::from_fn(n, |i, j| i.abs_diff(j) <= window)
}

/// Row-wise softmax of `logits` restricted to admissible entries.
///
/// Rows are shifted by their admissible maximum before exponentiation.
/// Inadmissible entries get weight exactly zero.
pub fn masked_softmax<T: Element>(logits: &DMatrix<T>, mask: &AttentionMask) -> Result<DMatrix<T>> {
    let (n, m) = logits.shape();
    if n != mask.size() || m != mask.size() {
        return Err(Error::Shape(format!(
            "logits are {n}x{m}, mask is {0}x{0}",
            mask.size()
        )));
    }
    let mut weights = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        let row = mask.row(i);
        let mut max = None::<T>;
        for (j, _) in row.iter().enumerate().filter(|(_, &ok)| ok) {
            let x = logits[(i, j)];
            max = Some(match max {
                Some(mx) if mx >= x => mx,
                _ => x,
            });
        }
        let Some(max) = max else {
            return Err(Error::InvalidMask { row: i });
        };
        let mut sum = T::zero();
        for (j, _) in row.iter().enumerate().filter(|(_, &ok)| ok) {
            let e = (logits[(i, j)] - max).exp();
            weights[(i, j)] = e;
            sum += e;
        }
        for j in 0..n {
            weights[(i, j)] /= sum;
        }
    }
    Ok(weights)
}

/// Scaled logits `Q K^T * scale`.
pub fn attention_logits<T: Element>(inp: &AttentionInputs<T>) -> DMatrix<T> {
    (&inp.q * inp.k.transpose()) * inp.scale
}

pub fn attention_weights<T: Element>(
    inp: &AttentionInputs<T>,
    mask: &AttentionMask,
) -> Result<DMatrix<T>> {
    masked_softmax(&attention_logits(inp), mask)
}

pub fn masked_attention<T: Element>(
    inp: &AttentionInputs<T>,
    mask: &AttentionMask,
) -> Result<DMatrix<T>> {
    Ok(attention_weights(inp, mask)? * &inp.v)
}

/// The two branch outputs `Z^l` and `Z^g`.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs<T: Element = f64> {
    pub local: DMatrix<T>,
    pub global: DMatrix<T>,
}

fn local_mask(n: usize, win: WindowSpec) -> Result<AttentionMask> {
    if win.effective().saturating_add(1) >= n {
        AttentionMask::full(n)
    } else {
        band_mask(n, win.effective())
    }
}

/// `Z^l`: attention restricted to the band `|i - j| <= W * multiple`.
pub fn local_branch<T: Element>(inp: &AttentionInputs<T>, win: WindowSpec) -> Result<DMatrix<T>> {
    masked_attention(inp, &local_mask(inp.tokens(), win)?)
}

/// `Z^g`: attention over the whole sequence.
pub fn global_branch<T: Element>(inp: &AttentionInputs<T>) -> Result<DMatrix<T>> {
    masked_attention(inp, &AttentionMask::full(inp.tokens())?)
}

/// Both branches from one logit evaluation. Each output is bit-equal to
/// [`local_branch`] / [`global_branch`] on the same inputs.
pub fn dual_branch<T: Element>(
    inp: &AttentionInputs<T>,
    win: WindowSpec,
) -> Result<BranchOutputs<T>> {
    let n = inp.tokens();
    let logits = attention_logits(inp);
    let full = AttentionMask::full(n)?;
    let global = masked_softmax(&logits, &full)? * &inp.v;
    let mask = local_mask(n, win)?;
    let local = if mask.is_full() {
        global.clone()
    } else {
        masked_softmax(&logits, &mask)? * &inp.v
    };
    Ok(BranchOutputs { local, global })
}
