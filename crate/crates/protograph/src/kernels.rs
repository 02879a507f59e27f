//! Dense f64 compute kernels: blocked matrix products and im2col convolution.
//!
//! Every kernel accumulates each output element in a fixed (k-ascending)
//! order, so results are bit-identical across runs and thread counts; the
//! blocking only decides which register tile computes an element, never the
//! order of its partial sums. Tiles are written so LLVM vectorizes the
//! independent output lanes.

/// Rows per register tile.
const MR: usize = 4;

/// c += a · b, with a: m×k, b: k×n, c: m×n, all row-major.
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k <= 12 && n >= 8 {
        // Short reductions drown in register-tile setup; stream whole c
        // rows instead (same k-ascending order per element).
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += av * brow[j];
                }
            }
        }
        return;
    }
    let mut i = 0;
    while i < m {
        let rows = (m - i).min(MR);
        let a_rows = &a[i * k..(i + rows) * k];
        let c_rows = &mut c[i * n..(i + rows) * n];
        match rows {
            4 => row_block::<4>(k, n, a_rows, b, c_rows),
            3 => row_block::<3>(k, n, a_rows, b, c_rows),
            2 => row_block::<2>(k, n, a_rows, b, c_rows),
            _ => row_block::<1>(k, n, a_rows, b, c_rows),
        }
        i += rows;
    }
}

/// One block of R full rows of c += a·b, tiled over columns in 16/8/4/1-wide
/// strips.
#[inline(always)]
fn row_block<const R: usize>(k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut j = 0;
    while j + 16 <= n {
        tile::<R, 16>(k, n, a, &b[j..], &mut c[j..]);
        j += 16;
    }
    if j + 8 <= n {
        tile::<R, 8>(k, n, a, &b[j..], &mut c[j..]);
        j += 8;
    }
    if j + 4 <= n {
        tile::<R, 4>(k, n, a, &b[j..], &mut c[j..]);
        j += 4;
    }
    while j < n {
        for r in 0..R {
            let arow = &a[r * k..(r + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * b[p * n + j];
            }
            c[r * n + j] += s;
        }
        j += 1;
    }
}

/// R×W register tile: c[0..R, 0..W] += a[0..R, :] · b[:, 0..W].
#[inline(always)]
fn tile<const R: usize, const W: usize>(k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    let mut acc = [[0.0f64; W]; R];
    for p in 0..k {
        let brow: &[f64; W] = b[p * n..p * n + W].try_into().unwrap();
        for r in 0..R {
            let av = unsafe { *a.get_unchecked(r * k + p) };
            for q in 0..W {
                acc[r][q] += av * brow[q];
            }
        }
    }
    for r in 0..R {
        let crow = &mut c[r * n..r * n + W];
        for q in 0..W {
            crow[q] += acc[r][q];
        }
    }
}

/// c += aᵀ · b, with a: m×k, b: m×n, c: k×n, all row-major.
///
/// a is transposed chunk-by-chunk into a scratch so the inner kernel runs on
/// contiguous rows. The reduction over m still proceeds in ascending order
/// for every output element (chunks are visited in order).
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    // Chunk height: keeps the packed transpose (IB·k) within L2 for typical k.
    const IB: usize = 128;
    let mut packed = vec![0.0f64; IB * k];
    let mut i0 = 0;
    while i0 < m {
        let ib = (m - i0).min(IB);
        // packed[p][ii] = a[i0+ii][p], transposed in 8x8 blocks
        let ablk = &a[i0 * k..(i0 + ib) * k];
        let mut pi = 0;
        while pi < ib {
            let ph = (ib - pi).min(8);
            let mut pj = 0;
            while pj < k {
                let pw = (k - pj).min(8);
                for ii in 0..ph {
                    for jj in 0..pw {
                        packed[(pj + jj) * ib + pi + ii] = ablk[(pi + ii) * k + pj + jj];
                    }
                }
                pj += pw;
            }
            pi += ph;
        }
        let bchunk = &b[i0 * n..(i0 + ib) * n];
        let mut p = 0;
        while p < k {
            let rows = (k - p).min(MR);
            let a_rows = &packed[p * ib..(p + rows) * ib];
            let c_rows = &mut c[p * n..(p + rows) * n];
            match rows {
                4 => row_block::<4>(ib, n, a_rows, bchunk, c_rows),
                3 => row_block::<3>(ib, n, a_rows, bchunk, c_rows),
                2 => row_block::<2>(ib, n, a_rows, bchunk, c_rows),
                _ => row_block::<1>(ib, n, a_rows, bchunk, c_rows),
            }
            p += rows;
        }
        i0 += ib;
    }
}

/// out = mᵀ for a rows×cols row-major matrix.
pub fn transpose(rows: usize, cols: usize, m: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        let row = &m[i * cols..(i + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
}

/// c += a · bᵀ, with a: m×n, b: k×n, c: m×k. b is transposed into scratch
/// first; intended for small/medium b (weight matrices).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    let mut bt = vec![0.0f64; n * k];
    transpose(k, n, b, &mut bt);
    gemm(m, n, k, a, &bt, c);
}

/// Spatial geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        in_c: usize,
        k_h: usize,
        k_w: usize,
        out_c: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let out_h = (in_h + 2 * pad - k_h) / stride + 1;
        let out_w = (in_w + 2 * pad - k_w) / stride + 1;
        ConvGeom { batch, in_h, in_w, in_c, k_h, k_w, out_c, stride, pad, out_h, out_w }
    }

    pub fn patch_len(&self) -> usize {
        self.k_h * self.k_w * self.in_c
    }

    pub fn out_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfold input patches into a (batch·out_h·out_w) × (k_h·k_w·in_c) matrix.
/// Out-of-bounds taps read as zero.
pub fn im2col(g: &ConvGeom, input: &[f64], col: &mut [f64]) {
    debug_assert_eq!(input.len(), g.batch * g.in_h * g.in_w * g.in_c);
    debug_assert_eq!(col.len(), g.out_rows() * g.patch_len());
    col.fill(0.0);
    let plen = g.patch_len();
    let img_stride = g.in_h * g.in_w * g.in_c;
    let row_stride = g.in_w * g.in_c;
    for b in 0..g.batch {
        let img = &input[b * img_stride..(b + 1) * img_stride];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * plen;
                let iy0 = (oy * g.stride) as isize - g.pad as isize;
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                for ky in 0..g.k_h {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = iy as usize * row_stride + ix as usize * g.in_c;
                        let dst = row + (ky * g.k_w + kx) * g.in_c;
                        col[dst..dst + g.in_c].copy_from_slice(&img[src..src + g.in_c]);
                    }
                }
            }
        }
    }
}

/// Fold a patch-gradient matrix back onto the input, accumulating overlaps.
pub fn col2im(g: &ConvGeom, col: &[f64], input_grad: &mut [f64]) {
    debug_assert_eq!(col.len(), g.out_rows() * g.patch_len());
    debug_assert_eq!(input_grad.len(), g.batch * g.in_h * g.in_w * g.in_c);
    let plen = g.patch_len();
    let img_stride = g.in_h * g.in_w * g.in_c;
    let row_stride = g.in_w * g.in_c;
    for b in 0..g.batch {
        let img = &mut input_grad[b * img_stride..(b + 1) * img_stride];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let row = ((b * g.out_h + oy) * g.out_w + ox) * plen;
                let iy0 = (oy * g.stride) as isize - g.pad as isize;
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                for ky in 0..g.k_h {
                    let iy = iy0 + ky as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.k_w {
                        let ix = ix0 + kx as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = iy as usize * row_stride + ix as usize * g.in_c;
                        let src = row + (ky * g.k_w + kx) * g.in_c;
                        for c in 0..g.in_c {
                            img[dst + c] += col[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// output = cross-correlation of input with kernels.
/// input: [batch, in_h, in_w, in_c]; kernels: [k_h, k_w, in_c, out_c];
/// output: [batch, out_h, out_w, out_c].
///
/// Returns the im2col patch matrix so the backward pass can reuse it.
pub fn conv2d_forward(g: &ConvGeom, input: &[f64], kernels: &[f64], output: &mut [f64]) -> Vec<f64> {
    let mut col = vec![0.0; g.out_rows() * g.patch_len()];
    im2col(g, input, &mut col);
    output.fill(0.0);
    gemm(g.out_rows(), g.patch_len(), g.out_c, &col, kernels, output);
    col
}

/// Gradients of conv2d_forward w.r.t. kernels and input.
/// `col` is the patch matrix returned by the forward pass.
/// Either destination may be None when that gradient is not needed.
pub fn conv2d_backward(
    g: &ConvGeom,
    col: &[f64],
    kernels: &[f64],
    out_grad: &[f64],
    kernel_grad: Option<&mut [f64]>,
    input_grad: Option<&mut [f64]>,
) {
    if let Some(kg) = kernel_grad {
        gemm_tn(g.out_rows(), g.patch_len(), g.out_c, col, out_grad, kg);
    }
    if let Some(ig) = input_grad {
        let plen = g.patch_len();
        let mut kt = vec![0.0; kernels.len()];
        transpose(plen, g.out_c, kernels, &mut kt);
        let mut dcol = vec![0.0; g.out_rows() * plen];
        gemm(g.out_rows(), g.out_c, plen, out_grad, &kt, &mut dcol);
        col2im(g, &dcol, ig);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gemm_matches_naive_on_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[
            (1, 1, 1),
            (5, 3, 17),
            (4, 16, 16),
            (13, 29, 37),
            (64, 72, 8),
            (7, 9, 1),
            (31, 5, 12),
        ] {
            let a = randv(&mut rng, m * k);
            let b = randv(&mut rng, k * n);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            let want = naive_gemm(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gemm_tn_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &(m, k, n) in &[(6, 5, 19), (33, 7, 16), (300, 18, 3), (129, 4, 8)] {
            let a = randv(&mut rng, m * k);
            let b = randv(&mut rng, m * n);
            let mut c = vec![0.0; k * n];
            gemm_tn(m, k, n, &a, &b, &mut c);
            let mut at = vec![0.0; k * m];
            transpose(m, k, &a, &mut at);
            let want = naive_gemm(k, m, n, &at, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_nt_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(m, k, n) in &[(6, 5, 19), (16, 7, 64), (9, 33, 10)] {
            let a = randv(&mut rng, m * n);
            let b = randv(&mut rng, k * n);
            let mut c = vec![0.0; m * k];
            gemm_nt(m, k, n, &a, &b, &mut c);
            let mut bt = vec![0.0; n * k];
            transpose(k, n, &b, &mut bt);
            let want = naive_gemm(m, n, k, &a, &bt);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    /// Direct quadruple-loop cross-correlation, the oracle for conv2d.
    pub(crate) fn naive_conv(g: &ConvGeom, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.out_rows() * g.out_c];
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for oc in 0..g.out_c {
                        let mut s = 0.0;
                        for ky in 0..g.k_h {
                            for kx in 0..g.k_w {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0
                                    || ix < 0
                                    || iy >= g.in_h as isize
                                    || ix >= g.in_w as isize
                                {
                                    continue;
                                }
                                for ic in 0..g.in_c {
                                    let iv = input[((b * g.in_h + iy as usize) * g.in_w
                                        + ix as usize)
                                        * g.in_c
                                        + ic];
                                    let kv =
                                        kernels[((ky * g.k_w + kx) * g.in_c + ic) * g.out_c + oc];
                                    s += iv * kv;
                                }
                            }
                        }
                        out[((b * g.out_h + oy) * g.out_w + ox) * g.out_c + oc] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for &(b, h, w, ic, kh, oc, stride, pad) in &[
            (1, 5, 5, 2, 3, 3, 1, 0),
            (2, 7, 6, 3, 3, 4, 2, 1),
            (1, 8, 8, 1, 1, 5, 1, 0),
            (3, 9, 5, 2, 3, 2, 2, 1),
        ] {
            let g = ConvGeom::new(b, h, w, ic, kh, kh, oc, stride, pad);
            let input = randv(&mut rng, b * h * w * ic);
            let kernels = randv(&mut rng, kh * kh * ic * oc);
            let mut out = vec![0.0; g.out_rows() * oc];
            conv2d_forward(&g, &input, &kernels, &mut out);
            let want = naive_conv(&g, &input, &kernels);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeom::new(2, 6, 5, 3, 3, 3, 4, 2, 1);
        let x = randv(&mut rng, g.batch * g.in_h * g.in_w * g.in_c);
        let y = randv(&mut rng, g.out_rows() * g.patch_len());
        let mut cx = vec![0.0; y.len()];
        im2col(&g, &x, &mut cx);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut xy = vec![0.0; x.len()];
        col2im(&g, &y, &mut xy);
        let rhs: f64 = x.iter().zip(&xy).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
