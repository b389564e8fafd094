//! Raw numeric kernels shared by the tape and the inference path.
//!
//! Every loop runs in a fixed order so results are bit-reproducible.

use crate::error::{Error, Result};

/// Resolved geometry of a 2-d convolution over a `[cin, h, w]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || input[0] != kernel[1] {
            return Err(Error::Shape {
                op: "conv2d",
                expected: kernel.to_vec(),
                found: input.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (cin, h, w) = (input[0], input[1], input[2]);
        let (cout, kh, kw) = (kernel[0], kernel[2], kernel[3]);
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::Shape {
                op: "conv2d",
                expected: kernel.to_vec(),
                found: input.to_vec(),
            });
        }
        Ok(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.cout, self.oh, self.ow]
    }

    /// Output columns `ox` whose source column `ox*stride + kx - padding` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let p = self.padding;
        let lo = if kx >= p { 0 } else { (p - kx).div_ceil(self.stride) };
        let hi = if self.w + p > kx {
            ((self.w - 1 + p - kx) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unfolds the input into a `[cin * kh * kw, oh * ow]` matrix (zeros where the
/// window hangs over the padding).
fn im2col(g: &ConvGeometry, input: &[f64]) -> Vec<f64> {
    let (s, p, plane) = (g.stride, g.padding, g.oh * g.ow);
    let mut col = vec![0.0; g.cin * g.kh * g.kw * plane];
    for ci in 0..g.cin {
        let in_c = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                    let row_out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        row_out[ox] = row_in[ox * s + kx - p];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column-matrix gradient back onto the input.
fn col2im_add(g: &ConvGeometry, col: &[f64], grad_input: &mut [f64]) {
    let (s, p, plane) = (g.stride, g.padding, g.oh * g.ow);
    for ci in 0..g.cin {
        let gi_c = &mut grad_input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[r * plane..(r + 1) * plane];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.oh {
                    let Some(iy) = g.src_row(oy, ky) else { continue };
                    let row_in = &mut gi_c[iy * g.w..(iy + 1) * g.w];
                    let row_src = &src[oy * g.ow..(oy + 1) * g.ow];
                    for ox in lo..hi {
                        row_in[ox * s + kx - p] += row_src[ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward(g: &ConvGeometry, input: &[f64], kernel: &[f64], out: &mut [f64]) {
    let col = im2col(g, input);
    let (rows, plane) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    out.iter_mut().for_each(|v| *v = 0.0);
    for co in 0..g.cout {
        let out_c = &mut out[co * plane..(co + 1) * plane];
        let k_c = &kernel[co * rows..(co + 1) * rows];
        for (r, &wv) in k_c.iter().enumerate() {
            let src = &col[r * plane..(r + 1) * plane];
            for (o, &x) in out_c.iter_mut().zip(src) {
                *o += wv * x;
            }
        }
    }
}

/// Accumulates gradients of a convolution into `grad_input` and/or `grad_kernel`.
pub fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let (rows, plane) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    if let Some(gk) = grad_kernel {
        let col = im2col(g, input);
        for co in 0..g.cout {
            let go_c = &grad_out[co * plane..(co + 1) * plane];
            for r in 0..rows {
                let src = &col[r * plane..(r + 1) * plane];
                gk[co * rows + r] += go_c.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    if let Some(gi) = grad_input {
        let mut gcol = vec![0.0; rows * plane];
        for co in 0..g.cout {
            let go_c = &grad_out[co * plane..(co + 1) * plane];
            let k_c = &kernel[co * rows..(co + 1) * rows];
            for (r, &wv) in k_c.iter().enumerate() {
                let dst = &mut gcol[r * plane..(r + 1) * plane];
                for (d, &go) in dst.iter_mut().zip(go_c) {
                    *d += wv * go;
                }
            }
        }
        col2im_add(g, &gcol, gi);
    }
}

/// `out[c] = bias[c] + sum_k x[k] * weight[k, c]` with `weight` stored `[k, n]`.
pub fn dense_forward(x: &[f64], weight: &[f64], bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    out.copy_from_slice(bias);
    for (k, &xk) in x.iter().enumerate() {
        let row = &weight[k * n..(k + 1) * n];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xk * w;
        }
    }
}

/// Per-channel arithmetic mean of a `[c, h, w]` tensor.
pub fn global_avg_pool(x: &[f64], channels: usize) -> Vec<f64> {
    let hw = x.len() / channels;
    x.chunks_exact(hw)
        .map(|c| c.iter().sum::<f64>() / hw as f64)
        .collect()
}

pub fn relu_inplace(x: &mut [f64]) {
    for v in x {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Returns `(loss, probabilities)` for `-log softmax(logits)[label]`.
///
/// Uses max subtraction so saturated logits do not overflow.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::ClassOutOfRange {
            index: label,
            count: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let probs = logits.iter().map(|&z| (z - lse).exp()).collect();
    Ok((lse - logits[label], probs))
}

/// `lambda * sum_j |w_j|` over every parameter.
pub fn l1_penalty<'a>(params: impl IntoIterator<Item = &'a [f64]>, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("l1 lambda must be >= 0, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = params
        .into_iter()
        .map(|p| p.iter().map(|w| w.abs()).sum::<f64>())
        .sum();
    Ok(lambda * total)
}

/// Subgradient of |w| with sign(0) = 0.
#[inline]
pub fn sign(w: f64) -> f64 {
    if w > 0.0 {
        1.0
    } else if w < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_extent() {
        let g = ConvGeometry::new(&[1, 28, 28], &[8, 1, 3, 3], 2, 1).unwrap();
        assert_eq!(g.output_shape(), [8, 14, 14]);
        let g = ConvGeometry::new(&[3, 5, 5], &[2, 3, 3, 3], 1, 0).unwrap();
        assert_eq!(g.output_shape(), [2, 3, 3]);
        let g = ConvGeometry::new(&[2, 7, 6], &[4, 2, 3, 2], 3, 2).unwrap();
        assert_eq!(g.output_shape(), [4, (7 + 4 - 3) / 3 + 1, (6 + 4 - 2) / 3 + 1]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let err = ConvGeometry::new(&[2, 4, 4], &[3, 1, 3, 3], 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[3, 1, 3, 3]") && msg.contains("[2, 4, 4]"), "{msg}");
        assert!(ConvGeometry::new(&[1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(ConvGeometry::new(&[1, 4, 4], &[1, 1, 3, 3], 0, 0).is_err());
    }

    #[test]
    fn conv_matches_naive_definition() {
        // Direct padded-sum definition, written independently of the strided row loops.
        let g = ConvGeometry::new(&[2, 5, 6], &[3, 2, 3, 2], 2, 1).unwrap();
        let input: Vec<f64> = (0..60).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let kernel: Vec<f64> = (0..36).map(|i| ((i * 17) % 7) as f64 * 0.25 - 0.7).collect();
        let mut out = vec![0.0; 3 * g.oh * g.ow];
        conv2d_forward(&g, &input, &kernel, &mut out);
        for co in 0..3 {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..2 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                acc += kernel[((co * 2 + ci) * 3 + ky) * 2 + kx]
                                    * input[(ci * 5 + iy as usize) * 6 + ix as usize];
                            }
                        }
                    }
                    let got = out[(co * g.oh + oy) * g.ow + ox];
                    assert!((got - acc).abs() < 1e-12, "{co},{oy},{ox}: {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let (loss, _) = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        let (loss, probs) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12 && loss.is_finite());
        assert!(probs.iter().all(|p| p.is_finite()));
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn l1_direct_sum() {
        let p = [0.5, -1.5];
        assert!((l1_penalty([&p[..]], 0.1).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(l1_penalty([&p[..]], 0.0).unwrap(), 0.0);
        assert!(l1_penalty([&p[..]], -1.0).is_err());
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }
}
