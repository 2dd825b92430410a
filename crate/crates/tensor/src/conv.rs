//! Convolution and pooling kernels (im2col + GEMM).

use crate::error::{mismatch, Result, TensorError};
use crate::scalar::{gemm, MatView, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; odd padding puts the extra pixel bottom/right.
    Same,
    Valid,
}

/// Resolved geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(mismatch("conv2d", format!("input {input:?} / kernel {kernel:?} must be rank 4")));
        }
        if input.iter().any(|&d| d == 0) {
            return Err(TensorError::EmptyInput { op: "conv2d", shape: input.to_vec() });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride 0".into()));
        }
        let [batch, in_channels, in_h, in_w] = [input[0], input[1], input[2], input[3]];
        let [out_channels, kc, kh, kw] = [kernel[0], kernel[1], kernel[2], kernel[3]];
        if kc != in_channels {
            return Err(mismatch("conv2d", format!("input has {in_channels} channels, kernel expects {kc}")));
        }
        if out_channels == 0 || kh == 0 || kw == 0 {
            return Err(TensorError::EmptyInput { op: "conv2d", shape: kernel.to_vec() });
        }
        let (out_h, pad_top) = out_extent(in_h, kh, stride, padding)
            .ok_or_else(|| mismatch("conv2d", format!("valid conv of {in_h} rows with {kh}-tall kernel")))?;
        let (out_w, pad_left) = out_extent(in_w, kw, stride, padding)
            .ok_or_else(|| mismatch("conv2d", format!("valid conv of {in_w} cols with {kw}-wide kernel")))?;
        Ok(ConvGeometry {
            batch,
            in_channels,
            in_h,
            in_w,
            out_channels,
            kh,
            kw,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate for an output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }

    /// Output columns `lo..hi` whose input column `ox*stride + kj - pad_left` is in range.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let off = kj as isize - self.pad_left as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off + s - 1) / s) as usize };
        let last = self.in_w as isize - 1 - off;
        let hi = if last < 0 { 0 } else { ((last / s) as usize + 1).min(self.out_w) };
        (lo.min(hi), hi)
    }

    /// Writes one sample's patches into columns `off..off + out_plane` of a row-major
    /// `[C*kh*kw, ld]` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, off: usize) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let xc = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * ld + off..row * ld + off + plane];
                    let (lo, hi) = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let d = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        let Some(iy) = self.source(oy, ki, self.pad_top, self.in_h) else {
                            d.fill(T::zero());
                            continue;
                        };
                        d[..lo].fill(T::zero());
                        d[hi..].fill(T::zero());
                        let xr = &xc[iy * self.in_w..(iy + 1) * self.in_w];
                        let start = (lo * self.stride + kj) - self.pad_left;
                        if self.stride == 1 {
                            d[lo..hi].copy_from_slice(&xr[start..start + hi - lo]);
                        } else {
                            for (j, v) in d[lo..hi].iter_mut().enumerate() {
                                *v = xr[start + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<T: Scalar>(&self, cols: &[T], ld: usize, off: usize, dx: &mut [T]) {
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * ld + off..row * ld + off + plane];
                    let (lo, hi) = self.valid_cols(kj);
                    if lo >= hi {
                        continue;
                    }
                    let start = (lo * self.stride + kj) - self.pad_left;
                    for oy in 0..self.out_h {
                        let Some(iy) = self.source(oy, ki, self.pad_top, self.in_h) else { continue };
                        let xr = &mut dxc[iy * self.in_w..(iy + 1) * self.in_w];
                        let sr = &src[oy * self.out_w + lo..oy * self.out_w + hi];
                        if self.stride == 1 {
                            for (d, &v) in xr[start..start + hi - lo].iter_mut().zip(sr) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in sr.iter().enumerate() {
                                xr[start + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// Samples per im2col chunk, keeping the column buffer near `COL_BUDGET` elements.
    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.out_plane()).max(1)).clamp(1, self.batch)
    }
}

const COL_BUDGET: usize = 1 << 21;

/// Copies `[C, n*plane]` (sample-interleaved columns) to/from `n` consecutive `[C, plane]` blocks.
fn unpack<T: Scalar>(wide: &[T], channels: usize, n: usize, plane: usize, out: &mut [T]) {
    for s in 0..n {
        for c in 0..channels {
            out[(s * channels + c) * plane..(s * channels + c + 1) * plane]
                .copy_from_slice(&wide[c * n * plane + s * plane..c * n * plane + (s + 1) * plane]);
        }
    }
}

fn pack<T: Scalar>(blocks: &[T], channels: usize, n: usize, plane: usize, wide: &mut [T]) {
    for s in 0..n {
        for c in 0..channels {
            wide[c * n * plane + s * plane..c * n * plane + (s + 1) * plane]
                .copy_from_slice(&blocks[(s * channels + c) * plane..(s * channels + c + 1) * plane]);
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let (pl, plane) = (g.patch_len(), g.out_plane());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * plane;
    let mut out = vec![T::zero(); g.batch * out_size];
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); pl * plane * chunk];
    let mut wide = vec![T::zero(); g.out_channels * plane * chunk];
    let kmat = MatView::new(k.data(), g.out_channels, pl);
    for b0 in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - b0);
        let ld = n * plane;
        for s in 0..n {
            let b = b0 + s;
            g.im2col(&x.data()[b * in_size..(b + 1) * in_size], &mut cols, ld, s * plane);
        }
        gemm(kmat, MatView::new(&cols[..pl * ld], pl, ld), T::zero(), &mut wide[..g.out_channels * ld]);
        unpack(&wide, g.out_channels, n, plane, &mut out[b0 * out_size..(b0 + n) * out_size]);
    }
    Tensor::new(g.output_shape(), out).expect("conv output shape")
}

/// Gradients of a convolution with respect to its input and kernel.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    k: &Tensor<T>,
    dout: &Tensor<T>,
    g: &ConvGeometry,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (pl, plane) = (g.patch_len(), g.out_plane());
    let in_size = g.in_channels * g.in_h * g.in_w;
    let out_size = g.out_channels * plane;
    let mut dx = want_dx.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_dk.then(|| vec![T::zero(); k.len()]);
    let chunk = g.chunk();
    let mut cols = vec![T::zero(); pl * plane * chunk];
    let mut wide = vec![T::zero(); g.out_channels * plane * chunk];
    let kmat = MatView::new(k.data(), g.out_channels, pl);
    for b0 in (0..g.batch).step_by(chunk) {
        let n = chunk.min(g.batch - b0);
        let ld = n * plane;
        pack(&dout.data()[b0 * out_size..(b0 + n) * out_size], g.out_channels, n, plane, &mut wide);
        let dmat = MatView::new(&wide[..g.out_channels * ld], g.out_channels, ld);
        if let Some(dk) = dk.as_mut() {
            for s in 0..n {
                let b = b0 + s;
                g.im2col(&x.data()[b * in_size..(b + 1) * in_size], &mut cols, ld, s * plane);
            }
            gemm(dmat, MatView::new(&cols[..pl * ld], pl, ld).t(), T::one(), dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(kmat.t(), dmat, T::zero(), &mut cols[..pl * ld]);
            for s in 0..n {
                let b = b0 + s;
                g.col2im_add(&cols, ld, s * plane, &mut dx[b * in_size..(b + 1) * in_size]);
            }
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dk.map(|d| Tensor::new(k.shape().to_vec(), d).unwrap()),
    )
}

/// Non-overlapping max pooling; trailing rows/columns that do not fill a window are dropped.
/// Returns the pooled tensor and, per output element, the flat input index of its maximum.
pub(crate) fn max_pool_forward<T: Scalar>(x: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(mismatch("max_pool2d", format!("input {:?} must be rank 4", x.shape())));
    }
    let [b, c, h, w] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if size == 0 || h < size || w < size {
        return Err(mismatch("max_pool2d", format!("window {size} on {h}x{w}")));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut arg = Vec::with_capacity(b * c * oh * ow);
    let xd = x.data();
    for bc in 0..b * c {
        let base = bc * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([b, c, oh, ow], out)?, arg))
}
