//! Low-level array kernels shared by the autograd graph and the reference
//! (graph-free) paths: strided GEMM, permutation, and im2col convolution.

/// Strided matrix view: element `(i, j)` lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        Self {
            data,
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a(m x k) * b(k x n) + beta * c`, with `c` row-major `m x n`.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: Mat,
    b: Mat,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the views index within their slices for all (i < m, p < k, j < n);
    // callers construct them from buffers of exactly those logical shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Generic axis permutation; returns the new shape and contiguous data.
pub(crate) fn permute(shape: &[usize], data: &[f64], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    assert_eq!(perm.len(), rank, "permutation rank mismatch");
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    // The innermost output axis is walked in a tight loop.
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance the odometer over the outer axes
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Geometry of a square-kernel 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one image `(cin, h, w)` into columns `(cin*k*k, oh*ow)`.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dx`.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. `x` is `(b, cin, h, w)`, `w` is
/// `(cout, cin, k, k)`; returns `(b, cout, oh, ow)` data.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    g: ConvGeom,
    w: &[f64],
    cout: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let kk = g.cin * g.k * g.k;
    let in_sz = g.cin * g.h * g.w;
    let mut out = vec![0.0; batch * cout * ohw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; kk * ohw]
    };
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let colv: &[f64] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        let ob = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        gemm(
            cout,
            kk,
            ohw,
            1.0,
            Mat::row_major(w, kk),
            Mat::row_major(colv, ohw),
            0.0,
            ob,
        );
        if let Some(bias) = bias {
            for (c, &bv) in bias.iter().enumerate() {
                for v in ob[c * ohw..(c + 1) * ohw].iter_mut() {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Batched convolution backward. Accumulates into whichever of `dx`, `dw`,
/// `db` are requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    g: ConvGeom,
    w: &[f64],
    cout: usize,
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (oh, ow) = g.out_hw();
    let ohw = oh * ow;
    let kk = g.cin * g.k * g.k;
    let in_sz = g.cin * g.h * g.w;
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise {
        Vec::new()
    } else {
        vec![0.0; kk * ohw]
    };
    let mut dcols = vec![0.0; kk * ohw];
    for b in 0..batch {
        let dob = &dout[b * cout * ohw..(b + 1) * cout * ohw];
        if let Some(dw) = dw.as_deref_mut() {
            let xb = &x[b * in_sz..(b + 1) * in_sz];
            let colv: &[f64] = if pointwise {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            // dw (cout x kk) += dout (cout x ohw) * cols^T (ohw x kk)
            gemm(
                cout,
                ohw,
                kk,
                1.0,
                Mat::row_major(dob, ohw),
                Mat::transposed(colv, ohw),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
            if pointwise {
                gemm(
                    kk,
                    cout,
                    ohw,
                    1.0,
                    Mat::transposed(w, kk),
                    Mat::row_major(dob, ohw),
                    1.0,
                    dxb,
                );
            } else {
                gemm(
                    kk,
                    cout,
                    ohw,
                    1.0,
                    Mat::transposed(w, kk),
                    Mat::row_major(dob, ohw),
                    0.0,
                    &mut dcols,
                );
                col2im(&dcols, g, dxb);
            }
        }
    }
    if let Some(db) = db {
        for b in 0..batch {
            for c in 0..cout {
                let off = (b * cout + c) * ohw;
                db[c] += dout[off..off + ohw].iter().sum::<f64>();
            }
        }
    }
}
