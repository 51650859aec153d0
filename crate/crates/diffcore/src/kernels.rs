//! Loop kernels for the convolution family. Layouts are channel-major
//! (`[C, H, W]`) for images and time-major (`[T, C]`) for sequences.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// Range of output indices `o` for which `o * stride + k - pad` lands in `0..len`.
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let (k, stride, pad, len) = (k as isize, stride as isize, pad as isize, len as isize);
    // o*stride >= pad - k
    let lo_num = pad - k;
    let lo = if lo_num <= 0 { 0 } else { (lo_num + stride - 1) / stride };
    // o*stride <= len - 1 + pad - k
    let hi_num = len - 1 + pad - k;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / stride + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub fn conv2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let k = g.kernel;
    let mut out = vec![0.0; g.out_channels * out_plane];
    for o in 0..g.out_channels {
        let dst = &mut out[o * out_plane..(o + 1) * out_plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for c in 0..g.in_channels {
            let src = &x[c * in_plane..(c + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
                for kx in 0..k {
                    let wv = w[((o * g.in_channels + c) * k + ky) * k + kx];
                    let (ox0, ox1) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        for ox in ox0..ox1 {
                            drow[ox] += wv * row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let k = g.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for o in 0..g.out_channels {
        let go = &gout[o * out_plane..(o + 1) * out_plane];
        gb[o] = go.iter().sum();
        for c in 0..g.in_channels {
            let src = &x[c * in_plane..(c + 1) * in_plane];
            let gsrc = &mut gx[c * in_plane..(c + 1) * in_plane];
            for ky in 0..k {
                let (oy0, oy1) = valid_range(g.out_h, g.in_h, ky, g.stride, g.pad);
                for kx in 0..k {
                    let widx = ((o * g.in_channels + c) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (ox0, ox1) = valid_range(g.out_w, g.in_w, kx, g.stride, g.pad);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let grow = &go[oy * g.out_w..(oy + 1) * g.out_w];
                        let base = iy * g.in_w;
                        for ox in ox0..ox1 {
                            let ix = base + ox * g.stride + kx - g.pad;
                            acc += grow[ox] * src[ix];
                            gsrc[ix] += grow[ox] * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution; `w` has layout `[in, out, k, k]`.
pub fn conv_transpose2d_forward(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let k = g.kernel;
    let mut out = vec![0.0; g.out_channels * out_plane];
    for o in 0..g.out_channels {
        out[o * out_plane..(o + 1) * out_plane]
            .iter_mut()
            .for_each(|v| *v = b[o]);
    }
    for c in 0..g.in_channels {
        let src = &x[c * in_plane..(c + 1) * in_plane];
        for o in 0..g.out_channels {
            let dst = &mut out[o * out_plane..(o + 1) * out_plane];
            for ky in 0..k {
                // input row iy maps to output row iy*stride + ky - pad
                let (iy0, iy1) = valid_range(g.in_h, g.out_h, ky, g.stride, g.pad);
                for kx in 0..k {
                    let wv = w[((c * g.out_channels + o) * k + ky) * k + kx];
                    let (ix0, ix1) = valid_range(g.in_w, g.out_w, kx, g.stride, g.pad);
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        let row = &src[iy * g.in_w..(iy + 1) * g.in_w];
                        let base = oy * g.out_w;
                        for ix in ix0..ix1 {
                            dst[base + ix * g.stride + kx - g.pad] += wv * row[ix];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_transpose2d_backward(
    g: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let k = g.kernel;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let gb = (0..g.out_channels)
        .map(|o| gout[o * out_plane..(o + 1) * out_plane].iter().sum())
        .collect();
    for c in 0..g.in_channels {
        let src = &x[c * in_plane..(c + 1) * in_plane];
        let gsrc = &mut gx[c * in_plane..(c + 1) * in_plane];
        for o in 0..g.out_channels {
            let go = &gout[o * out_plane..(o + 1) * out_plane];
            for ky in 0..k {
                let (iy0, iy1) = valid_range(g.in_h, g.out_h, ky, g.stride, g.pad);
                for kx in 0..k {
                    let widx = ((c * g.out_channels + o) * k + ky) * k + kx;
                    let wv = w[widx];
                    let (ix0, ix1) = valid_range(g.in_w, g.out_w, kx, g.stride, g.pad);
                    let mut acc = 0.0;
                    for iy in iy0..iy1 {
                        let oy = iy * g.stride + ky - g.pad;
                        let base = oy * g.out_w;
                        for ix in ix0..ix1 {
                            let gv = go[base + ix * g.stride + kx - g.pad];
                            let xi = iy * g.in_w + ix;
                            acc += gv * src[xi];
                            gsrc[xi] += gv * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemporalGeom {
    pub len: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl TemporalGeom {
    /// Input time index read by output step `t` at tap `m`, if inside the sequence.
    fn source(&self, t: usize, m: usize) -> Option<usize> {
        let half = (self.kernel / 2) as isize;
        let s = t as isize + (m as isize - half) * self.dilation as isize;
        (0..self.len as isize).contains(&s).then_some(s as usize)
    }
}

/// Zero-padded, length-preserving temporal convolution; `w` is `[out, in, k]`.
pub fn temporal_conv_forward(g: &TemporalGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.len * g.out_channels];
    for t in 0..g.len {
        let row = &mut out[t * g.out_channels..(t + 1) * g.out_channels];
        row.copy_from_slice(b);
        for m in 0..g.kernel {
            let Some(s) = g.source(t, m) else { continue };
            let xin = &x[s * g.in_channels..(s + 1) * g.in_channels];
            for (o, r) in row.iter_mut().enumerate() {
                let wrow = &w[o * g.in_channels * g.kernel..];
                let mut acc = 0.0;
                for (c, xv) in xin.iter().enumerate() {
                    acc += wrow[c * g.kernel + m] * xv;
                }
                *r += acc;
            }
        }
    }
    out
}

pub fn temporal_conv_backward(
    g: &TemporalGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.out_channels];
    for t in 0..g.len {
        let grow = &gout[t * g.out_channels..(t + 1) * g.out_channels];
        for (o, gv) in grow.iter().enumerate() {
            gb[o] += gv;
        }
        for m in 0..g.kernel {
            let Some(s) = g.source(t, m) else { continue };
            for (o, &gv) in grow.iter().enumerate() {
                for c in 0..g.in_channels {
                    let widx = (o * g.in_channels + c) * g.kernel + m;
                    gw[widx] += gv * x[s * g.in_channels + c];
                    gx[s * g.in_channels + c] += gv * w[widx];
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct definition with explicit bounds checks.
    fn conv2d_naive(g: &Conv2dGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_channels * g.out_h * g.out_w];
        for o in 0..g.out_channels {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut acc = b[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                acc += w[((o * g.in_channels + c) * g.kernel + ky) * g.kernel + kx]
                                    * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.out_h + oy) * g.out_w + ox] = acc;
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919) % 13) as f64 * scale - 0.5).collect()
    }

    #[test]
    fn conv2d_matches_naive_definition() {
        for &(stride, pad, kernel, h) in &[(1, 1, 3, 5), (2, 1, 3, 8), (2, 0, 3, 7), (1, 0, 1, 4)] {
            let out_h = (h + 2 * pad - kernel) / stride + 1;
            let g = Conv2dGeom {
                in_channels: 2,
                out_channels: 3,
                in_h: h,
                in_w: h,
                out_h,
                out_w: out_h,
                kernel,
                stride,
                pad,
            };
            let x = ramp(2 * h * h, 0.1);
            let w = ramp(3 * 2 * kernel * kernel, 0.07);
            let b = vec![0.1, -0.2, 0.3];
            let fast = conv2d_forward(&g, &x, &w, &b);
            let slow = conv2d_naive(&g, &x, &w, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> with shared weights and zero bias.
        let g = Conv2dGeom {
            in_channels: 2,
            out_channels: 3,
            in_h: 8,
            in_w: 8,
            out_h: 4,
            out_w: 4,
            kernel: 4,
            stride: 2,
            pad: 1,
        };
        let gt = Conv2dGeom {
            in_channels: 3,
            out_channels: 2,
            in_h: 4,
            in_w: 4,
            out_h: 8,
            out_w: 8,
            ..g
        };
        let x = ramp(2 * 64, 0.1);
        let y = ramp(3 * 16, 0.3);
        // conv weight [3, 2, k, k]; as transposed weight the layout [in=3, out=2, k, k] is identical
        let w = ramp(3 * 2 * 16, 0.05);
        let cx = conv2d_forward(&g, &x, &w, &[0.0; 3]);
        let ty = conv_transpose2d_forward(&gt, &y, &w, &[0.0; 2]);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&ty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn temporal_conv_respects_dilation() {
        let g = TemporalGeom {
            len: 9,
            in_channels: 1,
            out_channels: 1,
            kernel: 3,
            dilation: 3,
        };
        let mut x = vec![0.0; 9];
        x[1] = 1.0;
        let w = vec![1.0, 10.0, 100.0];
        let out = temporal_conv_forward(&g, &x, &w, &[0.0]);
        // output 4 reads inputs 1, 4, 7 with taps 0, 1, 2
        assert_eq!(out[4], 1.0);
        assert_eq!(out[1], 10.0);
        assert_eq!(out[0], 0.0);
    }
}
