//! im2col convolution kernels over `[B, C, H, W]` buffers.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the column matrix: `c_in * k * k`.
    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    /// Columns of the column matrix: `batch * out_h * out_w`.
    pub fn cols(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }
}

/// Unfolds `x` into a `[patch, batch * out_h * out_w]` row-major matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = g.cols();
    let mut cols = vec![0.0; g.patch() * n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let src = &x[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * oh * ow..(b + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back into `dx`.
pub fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = g.cols();
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &dcols[row * n..(row + 1) * n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.c_in + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * oh * ow..(b + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = iy as usize * g.w;
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds of the highest addressed element of each operand.
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs
    };
    if k > 0 {
        assert!(last(m, k, rsa, csa) < a.len() as isize);
        assert!(last(k, n, rsb, csb) < b.len() as isize);
    }
    assert!(last(m, n, rsc, csc) < c.len() as isize);
    // SAFETY: the asserts above keep every strided access in bounds.
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
            rsc,
            csc,
        );
    }
}

impl ConvGeom {
    fn single(&self) -> ConvGeom {
        ConvGeom { batch: 1, ..*self }
    }
}

/// Forward convolution. Returns `(output [B, Co, Ho, Wo], columns)`.
///
/// Samples are processed one at a time so each column matrix stays small
/// enough to remain cache-resident; `columns` holds the per-sample matrices
/// back to back.
pub fn conv_forward(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> (Vec<f64>, Vec<f64>) {
    let one = g.single();
    let (kk, n) = (one.patch(), one.cols());
    let in_plane = g.c_in * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.c_out * n];
    let mut all_cols = Vec::with_capacity(g.batch * kk * n);
    for b in 0..g.batch {
        let cols = im2col(&x[b * in_plane..][..in_plane], &one);
        let dst = &mut out[b * g.c_out * n..][..g.c_out * n];
        for (co, row) in dst.chunks_exact_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm(g.c_out, kk, n, w, (kk as isize, 1), &cols, (n as isize, 1), 1.0, dst, (n as isize, 1));
        all_cols.extend_from_slice(&cols);
    }
    (out, all_cols)
}

/// Gradients of a convolution given the upstream gradient `dout`.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

/// `cols` is the buffer returned by [`conv_forward`]; it may be empty when
/// `need_w` is false.
pub fn conv_backward(
    dout: &[f64],
    w: &[f64],
    cols: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
) -> ConvGrads {
    let one = g.single();
    let (kk, n) = (one.patch(), one.cols());
    let in_plane = g.c_in * g.h * g.w;
    let mut dw = need_w.then(|| vec![0.0; g.c_out * kk]);
    let mut db = need_w.then(|| vec![0.0; g.c_out]);
    let mut dx = need_x.then(|| vec![0.0; g.batch * in_plane]);
    let mut dcols = if need_x { vec![0.0; kk * n] } else { Vec::new() };
    for b in 0..g.batch {
        // per-sample dout is already a row-major [Co, plane] matrix
        let dmat = &dout[b * g.c_out * n..][..g.c_out * n];
        if let (Some(dw), Some(db)) = (dw.as_mut(), db.as_mut()) {
            let c = &cols[b * kk * n..][..kk * n];
            // dW += dmat [Co, n] * cols^T [n, kk]
            gemm(g.c_out, n, kk, dmat, (n as isize, 1), c, (1, n as isize), 1.0, dw, (kk as isize, 1));
            for (co, row) in dmat.chunks_exact(n).enumerate() {
                db[co] += row.iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T [kk, Co] * dmat [Co, n]
            gemm(kk, g.c_out, n, w, (1, kk as isize), dmat, (n as isize, 1), 0.0, &mut dcols, (n as isize, 1));
            col2im(&dcols, &one, &mut dx[b * in_plane..][..in_plane]);
        }
    }
    ConvGrads { dx, dw, db }
}
