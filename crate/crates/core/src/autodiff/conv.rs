//! 3×3 convolution, stride 1, zero padding 1, on N×C×H×W tensors.
//!
//! Lowered to matrix products: the input is unfolded into a
//! `(C·9) × (H·W)` patch matrix and multiplied by the `Cout × (C·9)` kernel
//! matrix. The products run through `matrixmultiply`, which is single
//! threaded and therefore deterministic.

use super::tensor::Tensor;

/// Valid output-row range for a tap offset `d` on an axis of length `n`.
#[inline]
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n.saturating_sub(d as usize) } else { n };
    (lo, hi.max(lo))
}

/// Unfolds one C×H×W image into the (C·9)×(H·W) patch matrix.
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, col: &mut [f64]) {
    let plane = h * w;
    col.fill(0.0);
    for ci in 0..cin {
        let src = &x[ci * plane..(ci + 1) * plane];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let (y0, y1) = valid_range(dy, h);
            let (x0, x1) = valid_range(dx, w);
            let dst = &mut col[(ci * 9 + k) * plane..(ci * 9 + k + 1) * plane];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                dst[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the image gradient (accumulating).
fn col2im(col: &[f64], cin: usize, h: usize, w: usize, gx: &mut [f64]) {
    let plane = h * w;
    for ci in 0..cin {
        let dst = &mut gx[ci * plane..(ci + 1) * plane];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let (y0, y1) = valid_range(dy, h);
            let (x0, x1) = valid_range(dx, w);
            let src = &col[(ci * 9 + k) * plane..(ci * 9 + k + 1) * plane];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let sx0 = (x0 as isize + dx) as usize;
                for (d, s) in dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)].iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                    *d += s;
                }
            }
        }
    }
}

/// `C (m×n) = alpha·A·B + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is inside the slices: A spans
    // (m-1)·rsa + (k-1)·csa, B spans (k-1)·rsb + (n-1)·csb, and C is a
    // dense row-major m×n block; the caller's shapes guarantee these bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let plane = h * wd;
    let kdim = cin * 9;
    let mut out = vec![0.0; n * cout * plane];
    let mut col = vec![0.0; kdim * plane];
    for bi in 0..n {
        im2col(&x.data()[bi * cin * plane..(bi + 1) * cin * plane], cin, h, wd, &mut col);
        let dst = &mut out[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(b) = b {
            for (co, chunk) in dst.chunks_exact_mut(plane).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        gemm(cout, kdim, plane, w.data(), (kdim, 1), &col, (plane, 1), 1.0, dst);
    }
    Tensor::from_parts(vec![n, cout, h, wd], out)
}

/// Returns (grad_x if requested, grad_w, grad_b if requested).
pub(crate) fn backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
    need_b: bool,
) -> (Option<Tensor>, Tensor, Option<Tensor>) {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let cout = w.shape()[0];
    let plane = h * wd;
    let kdim = cin * 9;
    let mut gw = vec![0.0; w.len()];
    let mut gx = if need_x { Some(vec![0.0; x.len()]) } else { None };
    let mut gb = if need_b { Some(vec![0.0; cout]) } else { None };
    let mut col = vec![0.0; kdim * plane];
    let mut gcol = if need_x { vec![0.0; kdim * plane] } else { Vec::new() };
    for bi in 0..n {
        let g_img = &g.data()[bi * cout * plane..(bi + 1) * cout * plane];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in g_img.chunks_exact(plane).enumerate() {
                gb[co] += super::graph::sum_f64(chunk);
            }
        }
        im2col(&x.data()[bi * cin * plane..(bi + 1) * cin * plane], cin, h, wd, &mut col);
        // gW (cout×kdim) += G (cout×plane) · colᵀ (plane×kdim)
        gemm(cout, plane, kdim, g_img, (plane, 1), &col, (1, plane), 1.0, &mut gw);
        if let Some(gx) = gx.as_mut() {
            // gcol (kdim×plane) = Wᵀ (kdim×cout) · G (cout×plane)
            gemm(kdim, cout, plane, w.data(), (1, kdim), g_img, (plane, 1), 0.0, &mut gcol);
            col2im(&gcol, cin, h, wd, &mut gx[bi * cin * plane..(bi + 1) * cin * plane]);
        }
    }
    (
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        Tensor::from_parts(w.shape().to_vec(), gw),
        gb.map(|d| Tensor::from_parts(vec![cout], d)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct seven-loop definition.
    fn reference(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
        let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
        let cout = w.shape()[0];
        let mut out = vec![0.0; cout * h * wd];
        for co in 0..cout {
            for y in 0..h as isize {
                for xx in 0..wd as isize {
                    let mut acc = b.data()[co];
                    for ci in 0..cin {
                        for ky in 0..3isize {
                            for kx in 0..3isize {
                                let (sy, sx) = (y + ky - 1, xx + kx - 1);
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                    continue;
                                }
                                acc += w.data()[((co * cin + ci) * 3 + ky as usize) * 3 + kx as usize]
                                    * x.data()[(ci * h + sy as usize) * wd + sx as usize];
                            }
                        }
                    }
                    out[(co * h + y as usize) * wd + xx as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_definition() {
        let x = Tensor::new(vec![1, 3, 5, 7], (0..105).map(|i| ((i * 37 % 11) as f64 - 5.0) / 4.0).collect()).unwrap();
        let w = Tensor::new(vec![2, 3, 3, 3], (0..54).map(|i| ((i * 13 % 7) as f64 - 3.0) / 8.0).collect()).unwrap();
        let b = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let fast = forward(&x, &w, Some(&b));
        let slow = reference(&x, &w, &b);
        for (a, r) in fast.data().iter().zip(&slow) {
            assert!((a - r).abs() < 1e-12);
        }
    }
}
