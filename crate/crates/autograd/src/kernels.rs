//! Raw numeric kernels: GEMM wrapper and convolution lowering.

/// Geometry of a 2-d convolution over one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the lowered column matrix.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with row-major operands.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Lowers one `[C, H, W]` image into a `[C*k*k, Ho*Wo]` column matrix.
pub fn im2col(img: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..g.channels {
        let src = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into a `[C, H, W]` image.
pub fn col2im(cols: &[f32], g: &ConvGeom, img: &mut [f32]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let plane = ho * wo;
    for c in 0..g.channels {
        let dst = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst_row[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `weight` is `[Cout, C, k, k]`.
pub fn conv2d_forward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_channels: usize,
    out: &mut [f32],
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    for b in 0..batch {
        im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
        gemm(
            out_channels,
            g.col_rows(),
            g.col_cols(),
            1.0,
            weight,
            false,
            &cols,
            false,
            0.0,
            &mut out[b * out_len..(b + 1) * out_len],
        );
    }
}

/// Gradients of [`conv2d_forward`]. Either output may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    out_channels: usize,
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_weight: Option<&mut [f32]>,
) {
    let in_len = g.channels * g.height * g.width;
    let out_len = out_channels * g.col_cols();
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..batch {
        let dy = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(&input[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(out_channels, ncols, rows, 1.0, dy, false, &cols, true, 1.0, gw);
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(rows, out_channels, ncols, 1.0, weight, true, dy, false, 0.0, &mut cols);
            col2im(&cols, g, &mut gi[b * in_len..(b + 1) * in_len]);
        }
    }
}

/// Transposed convolution. `weight` is `[Cin, Cout, k, k]`; `g` describes the
/// adjoint convolution mapping the `[Cout, Ho, Wo]` output back to the `[Cin, H, W]` input.
pub fn conv_transpose2d_forward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    in_channels: usize,
    out: &mut [f32],
) {
    let in_len = in_channels * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..batch {
        gemm(
            rows,
            in_channels,
            ncols,
            1.0,
            weight,
            true,
            &input[b * in_len..(b + 1) * in_len],
            false,
            0.0,
            &mut cols,
        );
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        dst.fill(0.0);
        col2im(&cols, g, dst);
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward(
    input: &[f32],
    batch: usize,
    g: &ConvGeom,
    weight: &[f32],
    in_channels: usize,
    grad_out: &[f32],
    mut grad_input: Option<&mut [f32]>,
    mut grad_weight: Option<&mut [f32]>,
) {
    let in_len = in_channels * g.col_cols();
    let out_len = g.channels * g.height * g.width;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..batch {
        im2col(&grad_out[b * out_len..(b + 1) * out_len], g, &mut cols);
        if let Some(gi) = grad_input.as_deref_mut() {
            gemm(
                in_channels,
                rows,
                ncols,
                1.0,
                weight,
                false,
                &cols,
                false,
                0.0,
                &mut gi[b * in_len..(b + 1) * in_len],
            );
        }
        if let Some(gw) = grad_weight.as_deref_mut() {
            gemm(
                in_channels,
                ncols,
                rows,
                1.0,
                &input[b * in_len..(b + 1) * in_len],
                false,
                &cols,
                true,
                1.0,
                gw,
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(input: &[f32], g: &ConvGeom, weight: &[f32], cout: usize) -> Vec<f32> {
        let (ho, wo) = (g.out_height(), g.out_width());
        let mut out = vec![0.0; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.channels {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                acc += input[(c * g.height + iy as usize) * g.width + ix as usize]
                                    * weight[((o * g.channels + c) * g.kernel + ky) * g.kernel + kx];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loop() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 6,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let input: Vec<f32> = (0..60).map(|i| (i as f32 * 0.37).sin()).collect();
        let weight: Vec<f32> = (0..54).map(|i| (i as f32 * 0.11).cos()).collect();
        let mut out = vec![0.0; 3 * g.col_cols()];
        conv2d_forward(&input, 1, &g, &weight, 3, &mut out);
        let expect = naive_conv(&input, &g, &weight, 3);
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 4,
            width: 4,
            kernel: 3,
            stride: 1,
            padding: 1,
        };
        let x: Vec<f32> = (0..32).map(|i| (i as f32).sin()).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f32 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; 32];
        col2im(&y, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
