//! im2col/col2im lowering and a row-major sgemm wrapper for convolution.

/// C(m x n) = alpha * A(m x k) * B(k x n) + beta * C, all row-major.
///
/// `at` / `bt` interpret A (resp. B) as the transpose of a stored row-major
/// matrix, i.e. `at = true` means A is stored as (k x m).
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm_rowmajor(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    at: bool,
    b: &[f32],
    bt: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if at { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if bt { (1, k as isize) } else { (n as isize, 1) };
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

/// Lower one image (C,H,W slice) into a (C*Kh*Kw) x (Hout*Wout) patch matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col(
    input: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(input.len(), channels * h * w);
    debug_assert_eq!(cols.len(), channels * kh * kw * h_out * w_out);
    let out_cells = h_out * w_out;
    for c in 0..channels {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * out_cells;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    let dst = &mut cols[row + oy * w_out..row + (oy + 1) * w_out];
                    if iy < 0 || iy as usize >= h {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        *d = if ix < 0 || ix as usize >= w {
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

/// Scatter-add a patch matrix back onto the (C,H,W) input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_acc(
    cols: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    h_out: usize,
    w_out: usize,
    grad: &mut [f32],
) {
    debug_assert_eq!(grad.len(), channels * h * w);
    let out_cells = h_out * w_out;
    for c in 0..channels {
        let plane = &mut grad[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((c * kh + ky) * kw + kx) * out_cells;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let src = &cols[row + oy * w_out..row + (oy + 1) * w_out];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                        if ix >= 0 && (ix as usize) < w {
                            plane[iy as usize * w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}
