//! Dense kernels behind the tape: GEMM and batched im2col convolution.

/// Output extent of a convolution along one axis, or `None` when the kernel
/// does not fit the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `c = a·b + beta·c` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`,
/// all row-major; `ta`/`tb` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Unfolds `x` into a `[cin·kh·kw, n·ho·wo]` matrix.
fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let (p, hw) = (g.p(), g.ho * g.wo);
    let mut col = vec![0.0; g.k() * p];
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for n in 0..g.n {
                    let plane = &x[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let out = &mut dst[n * hw + oy * g.wo..][..g.wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto `dx`.
fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let (p, hw) = (g.p(), g.ho * g.wo);
    for c in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                for n in 0..g.n {
                    let plane = &mut dx[(n * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let vals = &src[n * hw + oy * g.wo..][..g.wo];
                        for (ox, v) in vals.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (k, p, hw) = (g.k(), g.p(), g.ho * g.wo);
    let col = im2col(g, x);
    let mut mat = vec![0.0; g.cout * p];
    gemm(g.cout, k, p, w, false, &col, false, 0.0, &mut mat);
    let mut out = vec![0.0; g.n * g.cout * hw];
    for o in 0..g.cout {
        let bias = b.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &mat[o * p + n * hw..][..hw];
            let dst = &mut out[(n * g.cout + o) * hw..][..hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + bias;
            }
        }
    }
    out
}

/// Gradients of a convolution: `(dx, dw, db)` for upstream `dy`.
pub(crate) fn conv_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (k, p, hw) = (g.k(), g.p(), g.ho * g.wo);
    let mut dmat = vec![0.0; g.cout * p];
    let mut db = vec![0.0; g.cout];
    for o in 0..g.cout {
        for n in 0..g.n {
            let src = &dy[(n * g.cout + o) * hw..][..hw];
            dmat[o * p + n * hw..][..hw].copy_from_slice(src);
            db[o] += src.iter().sum::<f64>();
        }
    }
    let col = im2col(g, x);
    let mut dw = vec![0.0; g.cout * k];
    gemm(g.cout, p, k, &dmat, false, &col, true, 0.0, &mut dw);
    let mut dcol = vec![0.0; k * p];
    gemm(k, g.cout, p, w, true, &dmat, false, 0.0, &mut dcol);
    let mut dx = vec![0.0; x.len()];
    col2im(g, &dcol, &mut dx);
    (dx, dw, db)
}
