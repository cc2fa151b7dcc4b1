use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

// Below this many multiply-adds the rayon split costs more than it saves.
const PAR_THRESHOLD: usize = 1 << 18;

/// `out[m,n] = a[m,k] · b[k,n]`, all row-major. `out` is overwritten.
///
/// Every output row is produced by the same sequential loop whether or not the
/// rows are spread over threads, so results are bitwise independent of the
/// thread count.
pub fn matmul_raw<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let row = |(i, out_row): (usize, &mut [S])| {
        out_row.iter_mut().for_each(|x| *x = S::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose<S: Scalar>(a: &[S], m: usize, n: usize) -> Vec<S> {
    let mut t = vec![S::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Output extent and leading pad for one spatial axis.
pub fn conv_output_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out.max(1) - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if input < kernel {
                return Err(Error::InvalidArgument(format!(
                    "valid conv needs input extent >= {kernel}, got {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn new(
        x_shape: &[usize],
        k_shape: &[usize],
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if x_shape.len() != 4 || k_shape.len() != 4 || x_shape[3] != k_shape[2] {
            return Err(Error::shape("conv2d", x_shape, k_shape));
        }
        if k_shape[0] != 3 || k_shape[1] != 3 {
            return Err(Error::Unsupported(format!(
                "conv2d kernel {}x{} (only 3x3)",
                k_shape[0], k_shape[1]
            )));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Unsupported(format!("conv2d stride {stride}")));
        }
        let (out_h, pad_top) = conv_output_extent(x_shape[1], 3, stride, padding)?;
        let (out_w, pad_left) = conv_output_extent(x_shape[2], 3, stride, padding)?;
        Ok(ConvGeometry {
            batch: x_shape[0],
            height: x_shape[1],
            width: x_shape[2],
            channels: x_shape[3],
            kh: 3,
            kw: 3,
            out_channels: k_shape[3],
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.channels
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_h, self.out_w, self.out_channels]
    }

    fn source(&self, o: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Unfold `x` into `[positions, kh*kw*c]` patches (zero outside the image).
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeometry) -> Vec<S> {
    let pl = g.patch_len();
    let mut cols = vec![S::zero(); g.out_positions() * pl];
    let c = g.channels;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * pl;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.width) else {
                            continue;
                        };
                        let src = ((b * g.height + iy) * g.width + ix) * c;
                        let dst = row + (ky * g.kw + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub(crate) fn col2im<S: Scalar>(cols: &[S], g: &ConvGeometry) -> Vec<S> {
    let pl = g.patch_len();
    let c = g.channels;
    let mut x = vec![S::zero(); g.batch * g.height * g.width * c];
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * pl;
                for ky in 0..g.kh {
                    let Some(iy) = g.source(oy, ky, g.pad_top, g.height) else {
                        continue;
                    };
                    for kx in 0..g.kw {
                        let Some(ix) = g.source(ox, kx, g.pad_left, g.width) else {
                            continue;
                        };
                        let dst = ((b * g.height + iy) * g.width + ix) * c;
                        let src = row + (ky * g.kw + kx) * c;
                        for ci in 0..c {
                            x[dst + ci] = x[dst + ci] + cols[src + ci];
                        }
                    }
                }
            }
        }
    }
    x
}
