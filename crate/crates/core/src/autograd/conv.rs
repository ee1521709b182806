//! Same-padded, stride-1 2D convolution via im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, IxDyn};

use super::{Graph, Tensor, Var};

/// Unfolds `[n, c, h, w]` into a `[c*k*k, n*h*w]` column matrix with zero
/// padding of `k / 2` on every side.
pub fn im2col(x: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_len = n * hw;
    let mut cols = vec![0.0; c * k * k * cols_len];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * cols_len..(row + 1) * cols_len];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for b in 0..n {
                    let src_plane = &x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst = &mut dst_row[b * hw + y * w..b * hw + (y + 1) * w];
                        let sx_lo = (x_lo as isize + dx) as usize;
                        dst[x_lo..x_hi].copy_from_slice(&src[sx_lo..sx_lo + (x_hi - x_lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image.
pub fn col2im(cols: &[f64], n: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let cols_len = n * hw;
    let mut x = vec![0.0; n * c * hw];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * cols_len..(row + 1) * cols_len];
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for b in 0..n {
                    let dst_plane = &mut x[(b * c + ci) * hw..(b * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_row[b * hw + y * w + x_lo..b * hw + y * w + x_hi];
                        let sx_lo = (x_lo as isize + dx) as usize;
                        let dst = &mut dst_plane[sy as usize * w + sx_lo..sy as usize * w + sx_lo + src.len()];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>, out: ArrayViewMut2<f64>) {
    let mut out = out;
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
}

/// `[co, n*hw]` (channel-major) to `[n, co, h, w]`.
fn channel_major_to_nchw(src: &[f64], n: usize, co: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * co * hw];
    for o in 0..co {
        for b in 0..n {
            out[(b * co + o) * hw..(b * co + o + 1) * hw]
                .copy_from_slice(&src[o * n * hw + b * hw..o * n * hw + (b + 1) * hw]);
        }
    }
    out
}

fn nchw_to_channel_major(src: &[f64], n: usize, co: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * co * hw];
    for o in 0..co {
        for b in 0..n {
            out[o * n * hw + b * hw..o * n * hw + (b + 1) * hw]
                .copy_from_slice(&src[(b * co + o) * hw..(b * co + o + 1) * hw]);
        }
    }
    out
}

impl Graph {
    /// `x: [n, ci, h, w]`, `weight: [co, ci, k, k]` with odd `k`, optional
    /// `bias: [co]`. Output `[n, co, h, w]`.
    pub fn conv2d(&self, x: Var, weight: Var, bias: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(weight);
        let (xs, ws) = (xv.shape(), wv.shape());
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D, got {ws:?}");
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, wci, k) = (ws[0], ws[1], ws[2]);
        assert_eq!(ci, wci, "conv2d channel mismatch: input {ci}, weight {wci}");
        assert!(k % 2 == 1 && ws[3] == k, "conv2d kernel must be square and odd");
        let hw = h * w;
        let kk = ci * k * k;

        let cols = im2col(xv.as_slice().unwrap(), n, ci, h, w, k);
        let mut out_cm = vec![0.0; co * n * hw];
        matmul(
            ArrayView2::from_shape((co, kk), wv.as_slice().unwrap()).unwrap(),
            ArrayView2::from_shape((kk, n * hw), &cols).unwrap(),
            ArrayViewMut2::from_shape((co, n * hw), &mut out_cm).unwrap(),
        );
        if let Some(b) = bias {
            let bv = self.value(b);
            let bs = bv.as_slice().unwrap();
            assert_eq!(bs.len(), co, "conv2d bias length mismatch");
            for o in 0..co {
                for v in &mut out_cm[o * n * hw..(o + 1) * n * hw] {
                    *v += bs[o];
                }
            }
        }
        let out = Tensor::from_shape_vec(IxDyn(&[n, co, h, w]), channel_major_to_nchw(&out_cm, n, co, hw)).unwrap();

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let need_x = self.requires_grad(x);
        let has_bias = bias.is_some();
        self.push(out, &inputs, move || {
            Box::new(move |g: &Tensor| {
                let g_cm = nchw_to_channel_major(g.as_slice().unwrap(), n, co, hw);
                let g_view = ArrayView2::from_shape((co, n * hw), &g_cm).unwrap();
                let cols_view = ArrayView2::from_shape((kk, n * hw), &cols).unwrap();
                let mut dw = vec![0.0; co * kk];
                matmul(g_view, cols_view.t(), ArrayViewMut2::from_shape((co, kk), &mut dw).unwrap());
                let dx = need_x.then(|| {
                    let w2 = ArrayView2::from_shape((co, kk), wv.as_slice().unwrap()).unwrap();
                    let mut dcols = vec![0.0; kk * n * hw];
                    matmul(w2.t(), g_view, ArrayViewMut2::from_shape((kk, n * hw), &mut dcols).unwrap());
                    Tensor::from_shape_vec(IxDyn(&[n, ci, h, w]), col2im(&dcols, n, ci, h, w, k)).unwrap()
                });
                let mut grads = vec![dx, Some(Tensor::from_shape_vec(IxDyn(&[co, ci, k, k]), dw).unwrap())];
                if has_bias {
                    let db: Vec<f64> = (0..co).map(|o| g_cm[o * n * hw..(o + 1) * n * hw].iter().sum()).collect();
                    grads.push(Some(Tensor::from_shape_vec(IxDyn(&[co]), db).unwrap()));
                }
                grads
            })
        })
    }
}
