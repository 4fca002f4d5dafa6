//! im2col convolution kernels on NCHW buffers (cross-correlation, no flip).

use crate::error::{Error, Result};

/// Shape bookkeeping for one `conv2d` call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::shape(format!(
                "conv2d expects N×C×H×W input and O×C×kh×kw kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, kc, kernel_h, kernel_w) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_channels {
            return Err(Error::shape(format!(
                "conv2d kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        let padded_h = height + 2 * padding;
        let padded_w = width + 2 * padding;
        if kernel_h > padded_h || kernel_w > padded_w {
            return Err(Error::shape(format!(
                "conv2d kernel {kernel_h}×{kernel_w} exceeds padded input {padded_h}×{padded_w}"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (padded_h - kernel_h) / stride + 1,
            out_w: (padded_w - kernel_w) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_sample_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Source pixel for output row/col and kernel offset, if inside the input.
    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = out * self.stride + k;
        if pos < self.padding || pos - self.padding >= extent {
            None
        } else {
            Some(pos - self.padding)
        }
    }

    /// Unfolds one sample into a `patch_len × out_pixels` column matrix.
    fn im2col(&self, sample: &[f64], cols: &mut [f64]) {
        let pixels = self.out_pixels();
        for c in 0..self.in_channels {
            let plane = &sample[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let dst = &mut cols[row * pixels..][..pixels];
                    for oy in 0..self.out_h {
                        let src_y = self.source(oy, ki, self.height);
                        for ox in 0..self.out_w {
                            dst[oy * self.out_w + ox] = match (src_y, self.source(ox, kj, self.width)) {
                                (Some(y), Some(x)) => plane[y * self.width + x],
                                _ => 0.0,
                            };
                        }
                    }
                }
            }
        }
    }

    /// Folds a column matrix back onto one sample, summing overlaps.
    fn col2im(&self, cols: &[f64], sample: &mut [f64]) {
        let pixels = self.out_pixels();
        for c in 0..self.in_channels {
            let plane = &mut sample[c * self.height * self.width..][..self.height * self.width];
            for ki in 0..self.kernel_h {
                for kj in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ki) * self.kernel_w + kj;
                    let src = &cols[row * pixels..][..pixels];
                    for oy in 0..self.out_h {
                        let Some(y) = self.source(oy, ki, self.height) else {
                            continue;
                        };
                        for ox in 0..self.out_w {
                            if let Some(x) = self.source(ox, kj, self.width) {
                                plane[y * self.width + x] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(geom: &ConvGeometry, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let pixels = geom.out_pixels();
    let patch = geom.patch_len();
    let mut out = vec![0.0; geom.batch * geom.out_channels * pixels];
    let mut cols = vec![0.0; patch * pixels];
    for n in 0..geom.batch {
        geom.im2col(&input[n * geom.in_sample_len()..][..geom.in_sample_len()], &mut cols);
        let out_n = &mut out[n * geom.out_channels * pixels..][..geom.out_channels * pixels];
        for o in 0..geom.out_channels {
            let dst = &mut out_n[o * pixels..][..pixels];
            for (p, &w) in kernel[o * patch..][..patch].iter().enumerate() {
                let src = &cols[p * pixels..][..pixels];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)` for upstream gradient `grad_out`.
pub(crate) fn backward(
    geom: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_kernel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let pixels = geom.out_pixels();
    let patch = geom.patch_len();
    let mut grad_in = if need_input { vec![0.0; input.len()] } else { Vec::new() };
    let mut grad_k = if need_kernel {
        vec![0.0; kernel.len()]
    } else {
        Vec::new()
    };
    let mut cols = vec![0.0; patch * pixels];
    for n in 0..geom.batch {
        let g_n = &grad_out[n * geom.out_channels * pixels..][..geom.out_channels * pixels];
        if need_kernel {
            geom.im2col(&input[n * geom.in_sample_len()..][..geom.in_sample_len()], &mut cols);
            for o in 0..geom.out_channels {
                let g_row = &g_n[o * pixels..][..pixels];
                for p in 0..patch {
                    let c_row = &cols[p * pixels..][..pixels];
                    let dot: f64 = g_row.iter().zip(c_row).map(|(a, b)| a * b).sum();
                    grad_k[o * patch + p] += dot;
                }
            }
        }
        if need_input {
            cols.iter_mut().for_each(|c| *c = 0.0);
            for o in 0..geom.out_channels {
                let g_row = &g_n[o * pixels..][..pixels];
                for (p, &w) in kernel[o * patch..][..patch].iter().enumerate() {
                    let dst = &mut cols[p * pixels..][..pixels];
                    dst.iter_mut().zip(g_row).for_each(|(d, g)| *d += w * g);
                }
            }
            let len = geom.in_sample_len();
            geom.col2im(&cols, &mut grad_in[n * len..][..len]);
        }
    }
    (grad_in, grad_k)
}
