//! Dense row-major `f64` tensors and the raw kernels behind the graph ops.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by tensor construction and graph operators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid input to {op}: {detail}")]
    Input { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape {
        op,
        detail: detail.into(),
    }
}

/// An n-dimensional buffer of `f64` values with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) {
            return Err(shape_err("tensor", format!("zero extent in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("from_rows", "ragged rows"));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub(crate) fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Index of the largest value in each row of a 2-D tensor (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap_or(&1);
        self.data
            .chunks(cols)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// kernels
// ---------------------------------------------------------------------------

/// `out (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out (+)= a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with four independent partial sums so the loop vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out (+)= a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// Geometry of a 2-D convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let out_h = conv_out_extent(height, kernel_h, stride, padding)?;
        let out_w = conv_out_extent(width, kernel_w, stride, padding)?;
        Ok(Self {
            channels,
            height,
            width,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Output columns `[lo, hi)` whose input column `ox·stride + kx − padding` lies inside the image.
    fn valid_span(&self, k: usize, out: usize, extent: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // smallest o with o·s + k ≥ p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o·s + k − p < extent
        let hi = if extent + p > k {
            ((extent + p - k - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Unfolds one `C×H×W` image into a `(C·kh·kw) × (H'·W')` column matrix.
    #[cfg(test)]
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        self.im2col_strided(image, cols, self.out_positions());
    }

    /// [`im2col`](Self::im2col) writing row `r` at `cols[r·row_stride..]`, so
    /// a batch of images can share one wide column matrix.
    pub fn im2col_strided(&self, image: &[f64], cols: &mut [f64], row_stride: usize) {
        let positions = self.out_positions();
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_span(ky, self.out_h, self.height);
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * row_stride..row * row_stride + positions];
                    let (ox_lo, ox_hi) = self.valid_span(kx, self.out_w, self.width);
                    dst[..oy_lo * self.out_w].fill(0.0);
                    dst[oy_hi * self.out_w..].fill(0.0);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let src = &plane[iy * self.width..(iy + 1) * self.width];
                        let out = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        out[..ox_lo].fill(0.0);
                        out[ox_hi..].fill(0.0);
                        if self.stride == 1 {
                            let start = ox_lo + kx - self.padding;
                            out[ox_lo..ox_hi].copy_from_slice(&src[start..start + ox_hi - ox_lo]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                out[ox] = src[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters column gradients back onto the image.
    #[cfg(test)]
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.col2im_strided(cols, image, self.out_positions());
    }

    /// Adjoint of [`im2col_strided`](Self::im2col_strided).
    pub fn col2im_strided(&self, cols: &[f64], image: &mut [f64], row_stride: usize) {
        let positions = self.out_positions();
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..self.kernel_h {
                let (oy_lo, oy_hi) = self.valid_span(ky, self.out_h, self.height);
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * row_stride..row * row_stride + positions];
                    let (ox_lo, ox_hi) = self.valid_span(kx, self.out_w, self.width);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let dst = &mut plane[iy * self.width..(iy + 1) * self.width];
                        let grad = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        if self.stride == 1 {
                            let start = ox_lo + kx - self.padding;
                            for (d, g) in dst[start..start + ox_hi - ox_lo]
                                .iter_mut()
                                .zip(&grad[ox_lo..ox_hi])
                            {
                                *d += g;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dst[ox * self.stride + kx - self.padding] += grad[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output extent `(input + 2·padding − kernel) / stride + 1`, rejecting non-integral results.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    if stride == 0 {
        return Err(shape_err("conv2d", "stride must be positive"));
    }
    let padded = input + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kernel} does not fit padded extent {padded}"),
        ));
    }
    let span = padded - kernel;
    if !span.is_multiple_of(stride) {
        return Err(shape_err(
            "conv2d",
            format!("({input} + 2·{padding} − {kernel}) is not divisible by stride {stride}"),
        ));
    }
    Ok(span / stride + 1)
}
