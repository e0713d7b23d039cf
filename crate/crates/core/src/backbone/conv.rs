//! Direct 2-D convolution with square kernels and symmetric zero padding.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn in_index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.in_channels + c) * self.in_h + y) * self.in_w + x
    }

    fn w_index(&self, o: usize, c: usize, ky: usize, kx: usize) -> usize {
        ((o * self.in_channels + c) * self.kernel + ky) * self.kernel + kx
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Convolution layer; `weight` is `[out, in, k, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Tensor<F>,
    pub bias: Vec<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn geometry(&self, batch: usize, in_h: usize, in_w: usize) -> ConvGeometry {
        ConvGeometry {
            batch,
            in_channels: self.in_channels(),
            in_h,
            in_w,
            out_channels: self.out_channels(),
            kernel: self.kernel(),
            stride: self.stride,
            pad: self.pad,
        }
    }
}

/// Output layout is `[batch, out, out_h, out_w]`.
pub fn conv2d_forward<F: Scalar>(g: &ConvGeometry, input: &[F], weight: &[F], bias: &[F]) -> Vec<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![F::zero(); g.batch * g.out_channels * oh * ow];
    let mut idx = 0;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.kernel {
                                let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                                acc += weight[g.w_index(o, c, ky, kx)] * input[g.in_index(n, c, iy, ix)];
                            }
                        }
                    }
                    out[idx] = acc;
                    idx += 1;
                }
            }
        }
    }
    out
}

pub struct ConvGrads<F> {
    pub weight: Vec<F>,
    pub bias: Vec<F>,
    pub input: Option<Vec<F>>,
}

/// Gradients of a convolution given the upstream gradient of its output.
/// The input gradient is skipped when `want_input` is false (first layer).
pub fn conv2d_backward<F: Scalar>(
    g: &ConvGeometry,
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    want_input: bool,
) -> ConvGrads<F> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut gw = vec![F::zero(); weight.len()];
    let mut gb = vec![F::zero(); g.out_channels];
    let mut gx = want_input.then(|| vec![F::zero(); input.len()]);
    let mut idx = 0;
    for n in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let go = grad_out[idx];
                    idx += 1;
                    if go == F::zero() {
                        continue;
                    }
                    gb[o] += go;
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            let Some(iy) = g.source(oy, ky, g.in_h) else { continue };
                            for kx in 0..g.kernel {
                                let Some(ix) = g.source(ox, kx, g.in_w) else { continue };
                                let wi = g.w_index(o, c, ky, kx);
                                let xi = g.in_index(n, c, iy, ix);
                                gw[wi] += go * input[xi];
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] += go * weight[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    ConvGrads {
        weight: gw,
        bias: gb,
        input: gx,
    }
}
