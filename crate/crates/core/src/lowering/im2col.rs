use crate::error::{Error, Result};
use crate::ir::conv_output_hw;

/// Marks a patch entry that falls in the zero padding.
pub const PAD: usize = usize::MAX;

/// Gather map turning an NCHW tensor into the patch matrix of a convolution.
///
/// Row `(n, oy, ox)` holds the receptive field of one output pixel; column
/// `(c, ky, kx)` picks one input channel and kernel tap. With the filters
/// reshaped to `[C * k * k, F]`, the product of the two matrices is the
/// convolution output laid out as `[N * Ho * Wo, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Im2colMap {
    pub rows: usize,
    pub cols: usize,
    pub out_h: usize,
    pub out_w: usize,
    /// Source offset of every patch entry, row-major, or [`PAD`].
    pub index: Vec<usize>,
}

impl Im2colMap {
    /// `(M, K, N)` of the GEMM for `filters` output channels.
    pub fn gemm_dims(&self, filters: usize) -> (usize, usize, usize) {
        (self.rows, self.cols, filters)
    }

    /// Output shape after reshaping the GEMM result back to NCHW.
    pub fn output_shape(&self, batch: usize, filters: usize) -> Vec<usize> {
        vec![batch, filters, self.out_h, self.out_w]
    }

    pub fn apply<T: Copy + num_traits::Zero>(&self, src: &[T]) -> Vec<T> {
        self.index
            .iter()
            .map(|&i| if i == PAD { T::zero() } else { src[i] })
            .collect()
    }
}

pub fn im2col(shape: &[usize], kernel: usize, stride: usize, pad: usize) -> Result<Im2colMap> {
    if shape.len() != 4 {
        return Err(Error::arg(format!("im2col needs an NCHW shape, got {shape:?}")));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (out_h, out_w) = conv_output_hw(h, w, kernel, stride, pad).ok_or_else(|| {
        Error::arg(format!(
            "kernel {kernel} with stride {stride} and pad {pad} does not fit input {shape:?}"
        ))
    })?;
    let rows = n * out_h * out_w;
    let cols = c * kernel * kernel;
    let mut index = Vec::with_capacity(rows * cols);
    for img in 0..n {
        for oy in 0..out_h {
            for ox in 0..out_w {
                for ci in 0..c {
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                index.push(PAD);
                            } else {
                                index.push(((img * c + ci) * h + iy as usize) * w + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Im2colMap {
        rows,
        cols,
        out_h,
        out_w,
        index,
    })
}
