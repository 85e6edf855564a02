//! Raw numeric kernels shared by the autodiff graph and the plain-array APIs.
//!
//! Everything here works on flat row-major slices; shape validation happens in
//! the callers.

/// `c = beta * c + op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
///
/// `a` is stored `m × k` (or `k × m` when `trans_a`), `b` is stored `k × n`
/// (or `n × k` when `trans_b`), `c` is `m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: a has wrong length");
    assert_eq!(b.len(), k * n, "gemm: b has wrong length");
    assert_eq!(c.len(), m * n, "gemm: c has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length asserts above guarantee every strided access lies
    // inside the slices, and `c` does not alias `a` or `b` (borrow rules).
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

/// Geometry of a 2-D convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad_h - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad_w - self.kernel_w) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel_h * self.kernel_w
    }

    pub fn out_positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.height + 2 * self.pad_h >= self.kernel_h
            && self.width + 2 * self.pad_w >= self.kernel_w
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C·kh·kw, Ho·Wo]` column matrix.
pub fn im2col(input: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let positions = oh * ow;
    debug_assert_eq!(cols.len(), geo.patch_len() * positions);
    for c in 0..geo.in_ch {
        let plane = &input[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad_h as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy as usize >= geo.height {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad_w as isize;
                        *d = if ix < 0 || ix as usize >= geo.width {
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

/// Scatter-adds a column matrix back onto a `[C, H, W]` gradient buffer.
pub fn col2im(cols: &[f64], geo: &ConvGeometry, output: &mut [f64]) {
    let (oh, ow) = (geo.out_height(), geo.out_width());
    let positions = oh * ow;
    for c in 0..geo.in_ch {
        let plane = &mut output[c * geo.height * geo.width..(c + 1) * geo.height * geo.width];
        for ki in 0..geo.kernel_h {
            for kj in 0..geo.kernel_w {
                let row = (c * geo.kernel_h + ki) * geo.kernel_w + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..oh {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad_h as isize;
                    if iy < 0 || iy as usize >= geo.height {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * geo.width..(iy as usize + 1) * geo.width];
                    for ox in 0..ow {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad_w as isize;
                        if ix >= 0 && (ix as usize) < geo.width {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `input` is `[N, C, H, W]`, `weight` is
/// `[Cout, C·kh·kw]`, returns `[N, Cout, Ho, Wo]` data.
pub fn conv_forward(
    input: &[f64],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
) -> Vec<f64> {
    let in_len = geo.in_ch * geo.height * geo.width;
    let positions = geo.out_positions();
    let k = geo.patch_len();
    let mut cols = vec![0.0; k * positions];
    let mut out = vec![0.0; batch * out_ch * positions];
    for n in 0..batch {
        im2col(&input[n * in_len..(n + 1) * in_len], geo, &mut cols);
        let dst = &mut out[n * out_ch * positions..(n + 1) * out_ch * positions];
        for (o, chunk) in dst.chunks_mut(positions).enumerate() {
            chunk.fill(bias[o]);
        }
        gemm(out_ch, k, positions, weight, false, &cols, false, 1.0, dst);
    }
    out
}

/// Batched convolution backward. Accumulates into `grad_input` (if given),
/// `grad_weight` and `grad_bias`.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward(
    input: &[f64],
    batch: usize,
    geo: &ConvGeometry,
    weight: &[f64],
    out_ch: usize,
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) {
    let in_len = geo.in_ch * geo.height * geo.width;
    let positions = geo.out_positions();
    let k = geo.patch_len();
    let mut cols = vec![0.0; k * positions];
    let mut dcols = vec![0.0; k * positions];
    for n in 0..batch {
        let go = &grad_out[n * out_ch * positions..(n + 1) * out_ch * positions];
        for (o, chunk) in go.chunks(positions).enumerate() {
            grad_bias[o] += chunk.iter().sum::<f64>();
        }
        im2col(&input[n * in_len..(n + 1) * in_len], geo, &mut cols);
        // dW[Cout, K] += dOut[Cout, P] · cols[K, P]^T
        gemm(out_ch, positions, k, go, false, &cols, true, 1.0, grad_weight);
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols[K, P] = W^T[K, Cout] · dOut[Cout, P]
            gemm(k, out_ch, positions, weight, true, go, false, 0.0, &mut dcols);
            col2im(&dcols, geo, &mut gi[n * in_len..(n + 1) * in_len]);
        }
    }
}

/// Row-wise softmax of an `rows × cols` matrix, stabilised by the row max.
pub fn softmax_rows(data: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    out
}

/// Softmax-rows backward given the forward output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for ((yr, dyr), dxr) in y.chunks(cols).zip(dy.chunks(cols)).zip(dx.chunks_mut(cols)) {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Softmax over the off-diagonal entries of each row of a square matrix; the
/// diagonal is pinned to zero.
pub fn offdiag_softmax(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = &data[i * n..(i + 1) * n];
        let max = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in 0..n {
            if j != i {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
        }
        for (j, d) in dst.iter_mut().enumerate() {
            if j != i {
                *d /= total;
            }
        }
    }
    out
}

/// `S_ij = -‖x_i − x_j‖₂` for the rows of an `n × k` matrix.
pub fn pairwise_neg_distance(x: &[f64], n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = x[i * k..(i + 1) * k]
                .iter()
                .zip(&x[j * k..(j + 1) * k])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let s = -d2.sqrt();
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
