use serde::{Deserialize, Serialize};

use super::{Result, TensorError};

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn(a: &[f64], b: &[f64], c: &mut [f64], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &aki) in a[kk * m..(kk + 1) * m].iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

/// Shape bookkeeping for a 2-D cross-correlation over `H×W×C` inputs with
/// a `kh×kw×C×F` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub filters: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn output_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(TensorError::Dimension(format!(
                    "kernel extent {kernel} exceeds input extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = (out - 1) * stride + kernel;
            let total = needed.saturating_sub(input);
            if kernel > input + total {
                return Err(TensorError::Dimension(format!(
                    "kernel extent {kernel} exceeds padded input extent {}",
                    input + total
                )));
            }
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        input: [usize; 3],
        kernel: [usize; 2],
        filters: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        let [in_h, in_w, in_c] = input;
        let [kh, kw] = kernel;
        if stride == 0 || kh == 0 || kw == 0 || filters == 0 || in_c == 0 {
            return Err(TensorError::Argument(
                "stride, kernel extents, filters and channels must be positive".into(),
            ));
        }
        let (out_h, pad_top) = output_extent(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = output_extent(in_w, kw, stride, padding)?;
        Ok(Self {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            filters,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    /// Receptive-field length `kh·kw·C`: rows of the unrolled matrix.
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    /// Number of output positions `H'·W'`: columns of the unrolled matrix.
    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn input_len(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    pub fn output_len(&self) -> usize {
        self.positions() * self.filters
    }

    /// Input element feeding row `r` of column `p`, or `None` for padding.
    #[inline]
    fn source(&self, r: usize, p: usize) -> Option<usize> {
        let c = r % self.in_c;
        let tap = r / self.in_c;
        let (dy, dx) = (tap / self.kw, tap % self.kw);
        let (oy, ox) = (p / self.out_w, p % self.out_w);
        let y = (oy * self.stride + dy).checked_sub(self.pad_top)?;
        let x = (ox * self.stride + dx).checked_sub(self.pad_left)?;
        if y >= self.in_h || x >= self.in_w {
            return None;
        }
        Some((y * self.in_w + x) * self.in_c + c)
    }
}

/// Unrolls one `H×W×C` sample into a `(kh·kw·C) × (H'·W')` matrix.
///
/// Row `r = (dy·kw + dx)·C + c` holds receptive-field element `(dy, dx, c)`;
/// column `p = oy·W' + ox` holds output position `(oy, ox)`. Padded taps are
/// zero. A `kh×kw×C×F` kernel read row-major is exactly the matching
/// `(kh·kw·C) × F` matrix, and each column is one crossbar input vector.
pub fn im2col(sample: &[f64], g: &ConvGeometry) -> Vec<f64> {
    debug_assert_eq!(sample.len(), g.input_len());
    let (rows, cols) = (g.patch_len(), g.positions());
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &mut out[r * cols..(r + 1) * cols];
        for (p, slot) in row.iter_mut().enumerate() {
            if let Some(src) = g.source(r, p) {
                *slot = sample[src];
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (rows, ncols) = (g.patch_len(), g.positions());
    debug_assert_eq!(cols.len(), rows * ncols);
    debug_assert_eq!(dx.len(), g.input_len());
    for r in 0..rows {
        for p in 0..ncols {
            if let Some(src) = g.source(r, p) {
                dx[src] += cols[r * ncols + p];
            }
        }
    }
}
