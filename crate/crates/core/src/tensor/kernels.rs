//! Numeric kernels shared by the tape ops.
//!
//! Every output element of [`gemm`] is accumulated over the inner dimension in
//! index order starting from `0.0`, so results match a naive triple loop bit
//! for bit regardless of the row/column blocking used here.

/// `c = a · b` for row-major `a: m×k`, `b: k×n`.
pub fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    if n == 0 {
        return c;
    }
    let mut blocks = c.chunks_exact_mut(4 * n);
    let mut i = 0;
    for block in &mut blocks {
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let ar = &a[i * k..(i + 4) * k];
        for p in 0..k {
            let (a0, a1, a2, a3) = (ar[p], ar[k + p], ar[2 * k + p], ar[3 * k + p]);
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for crow in blocks.into_remainder().chunks_exact_mut(n) {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
        i += 1;
    }
    c
}

pub fn transpose_2d(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a stride-1, unpadded square-kernel convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.width + 1 - self.kernel
    }

    /// Rows of the unfolded patch matrix: `in_channels · kernel²`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` sample into a `[C·k·k, Ho·Wo]` patch matrix.
pub fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    let mut cols = vec![0.0; g.patch_len() * p];
    for c in 0..g.in_channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for di in 0..k {
            for dj in 0..k {
                let r = (c * k + di) * k + dj;
                let dst = &mut cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let src = &plane[(y + di) * g.width + dj..(y + di) * g.width + dj + ow];
                    dst[y * ow..(y + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back into `out`.
pub fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let (oh, ow, k) = (g.out_h(), g.out_w(), g.kernel);
    let p = oh * ow;
    for c in 0..g.in_channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for di in 0..k {
            for dj in 0..k {
                let r = (c * k + di) * k + dj;
                let src = &cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let dst = &mut plane[(y + di) * g.width + dj..(y + di) * g.width + dj + ow];
                    for (d, s) in dst.iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
