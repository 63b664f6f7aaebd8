//! Raw numeric kernels shared by the tape and by tape-free inference.
//!
//! Every kernel works on flat row-major slices; shape checking happens in the
//! callers.

/// Describes a strided view of a row-major matrix buffer.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    /// The transpose of the stored `rows x cols` matrix.
    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major `m x n`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm: inner dimensions differ");
    assert!(a.data.len() >= a.rows * a.cols);
    assert!(b.data.len() >= b.rows * b.cols);
    assert_eq!(c.len(), m * n, "gemm: output buffer has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index addressed through these
    // strides lies within the three buffers, and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into a `[C*kh*kw, out_h*out_w]` column matrix.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let src = &img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[iy * g.width + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.channels {
        let dst = &mut img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[iy * g.width + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution (cross-correlation) over a batch.
pub(crate) fn conv2d_forward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    out_ch: usize,
    bias: Option<&[f64]>,
    g: &ConvGeom,
) -> Vec<f64> {
    let in_len = g.channels * g.in_plane();
    let out_len = out_ch * g.out_plane();
    let mut out = vec![0.0; batch * out_len];
    let mut cols = vec![0.0; g.patch() * g.out_plane()];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (m, &bm) in bias.iter().enumerate() {
                dst[m * g.out_plane()..(m + 1) * g.out_plane()].fill(bm);
            }
        }
        gemm(
            MatRef::new(w, out_ch, g.patch()),
            MatRef::new(&cols, g.patch(), g.out_plane()),
            if bias.is_some() { 1.0 } else { 0.0 },
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Option<Vec<f64>>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    out_ch: usize,
    gout: &[f64],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_dx, need_dw, need_db) = need;
    let in_len = g.channels * g.in_plane();
    let out_len = out_ch * g.out_plane();
    let mut dx = need_dx.then(|| vec![0.0; batch * in_len]);
    let mut dw = need_dw.then(|| vec![0.0; out_ch * g.patch()]);
    let db = need_db.then(|| {
        let mut db = vec![0.0; out_ch];
        for b in 0..batch {
            for (m, acc) in db.iter_mut().enumerate() {
                let start = b * out_len + m * g.out_plane();
                *acc += gout[start..start + g.out_plane()].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; g.patch() * g.out_plane()];
    for b in 0..batch {
        let go = &gout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut cols);
            gemm(
                MatRef::new(go, out_ch, g.out_plane()),
                MatRef::new(&cols, g.patch(), g.out_plane()).t(),
                1.0,
                dw,
            );
        }
        if let Some(dx) = dx.as_mut() {
            gemm(
                MatRef::new(w, out_ch, g.patch()).t(),
                MatRef::new(go, out_ch, g.out_plane()),
                0.0,
                &mut cols,
            );
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Max pooling over `[B*C]` planes; returns the output and the flat argmax
/// of each output cell.
pub(crate) fn max_pool_forward(
    x: &[f64],
    planes: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
) -> (Vec<f64>, Vec<usize>, usize, usize) {
    let out_h = (height - kernel) / stride + 1;
    let out_w = (width - kernel) / stride + 1;
    let mut out = Vec::with_capacity(planes * out_h * out_w);
    let mut arg = Vec::with_capacity(planes * out_h * out_w);
    for p in 0..planes {
        let base = p * height * width;
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for ki in 0..kernel {
                    for kj in 0..kernel {
                        let at = base + (oy * stride + ki) * width + ox * stride + kj;
                        if x[at] > best {
                            best = x[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                arg.push(best_at);
            }
        }
    }
    (out, arg, out_h, out_w)
}

/// `out[b, :] = x[b, :] * w + bias` with `w` stored `[in, out]`.
pub(crate) fn dense_forward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    inputs: usize,
    outputs: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let mut out = vec![0.0; batch * outputs];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(outputs) {
            row.copy_from_slice(bias);
        }
    }
    gemm(
        MatRef::new(x, batch, inputs),
        MatRef::new(w, inputs, outputs),
        if bias.is_some() { 1.0 } else { 0.0 },
        &mut out,
    );
    out
}

/// Per-item `F F^T` (feature Gram) over `items` matrices of shape `rows x cols`.
pub(crate) fn gram_rows(f: &[f64], items: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; items * rows * rows];
    for i in 0..items {
        let fi = &f[i * rows * cols..(i + 1) * rows * cols];
        let m = MatRef::new(fi, rows, cols);
        gemm(m, m.t(), 0.0, &mut out[i * rows * rows..(i + 1) * rows * rows]);
    }
    symmetrize(&mut out, items, rows);
    out
}

/// Per-item `F^T F` (spatial Gram).
pub(crate) fn gram_cols(f: &[f64], items: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; items * cols * cols];
    for i in 0..items {
        let fi = &f[i * rows * cols..(i + 1) * rows * cols];
        let m = MatRef::new(fi, rows, cols);
        gemm(m.t(), m, 0.0, &mut out[i * cols * cols..(i + 1) * cols * cols]);
    }
    symmetrize(&mut out, items, cols);
    out
}

// Blocked gemm may sum (i,j) and (j,i) in different orders; copy the upper
// triangle down so the result is exactly symmetric.
fn symmetrize(g: &mut [f64], items: usize, n: usize) {
    for i in 0..items {
        let gi = &mut g[i * n * n..(i + 1) * n * n];
        for r in 0..n {
            for c in 0..r {
                gi[r * n + c] = gi[c * n + r];
            }
        }
    }
}
