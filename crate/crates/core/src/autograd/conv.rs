//! 2-d convolution as im2col + GEMM, with the three mutually-adjoint
//! primitives (forward, input gradient, weight gradient) so that each one's
//! backward rule is expressed with the other two.

use super::ops::matmul_tensor;
use super::tensor::{Float, Tensor};
use super::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry { stride: 1, pad: 1 };
    pub const POINTWISE: ConvGeometry = ConvGeometry { stride: 1, pad: 0 };

    fn out_len(&self, len: usize, k: usize) -> usize {
        assert!(len + 2 * self.pad >= k, "kernel larger than padded input");
        (len + 2 * self.pad - k) / self.stride + 1
    }
}

struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn dims(x_shape: &[usize], w_shape: &[usize], geo: ConvGeometry) -> Dims {
    assert_eq!(x_shape.len(), 4, "conv input must be NCHW");
    assert_eq!(w_shape.len(), 4, "conv weight must be OCkk");
    assert_eq!(x_shape[1], w_shape[1], "conv channel mismatch: input {x_shape:?}, weight {w_shape:?}");
    let (kh, kw) = (w_shape[2], w_shape[3]);
    Dims {
        n: x_shape[0],
        c: x_shape[1],
        h: x_shape[2],
        w: x_shape[3],
        o: w_shape[0],
        kh,
        kw,
        ho: geo.out_len(x_shape[2], kh),
        wo: geo.out_len(x_shape[3], kw),
    }
}

/// Output positions `ow` whose input column `ow*s + j - p` lies in `0..w`.
fn valid_range(wo: usize, w: usize, s: usize, j: usize, p: usize) -> (usize, usize) {
    let lo = p.saturating_sub(j).div_ceil(s);
    let hi = if w + p > j { ((w + p - j - 1) / s + 1).min(wo) } else { 0 };
    (lo.min(hi), hi)
}

/// `[N,C,H,W]` -> columns `[C*kh*kw, N*Ho*Wo]`.
fn im2col<T: Float>(x: &[T], d: &Dims, geo: ConvGeometry) -> Vec<T> {
    let cols_n = d.n * d.ho * d.wo;
    if d.kh == 1 && d.kw == 1 && geo.stride == 1 && geo.pad == 0 {
        return batch_to_channel_major(x, d.n, d.c, d.h * d.w);
    }
    let mut cols = vec![T::zero(); d.c * d.kh * d.kw * cols_n];
    let (s, p) = (geo.stride, geo.pad);
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * cols_n;
                let (lo, hi) = valid_range(d.wo, d.w, s, j, p);
                for n in 0..d.n {
                    let xbase = (n * d.c + c) * d.h * d.w;
                    for oh in 0..d.ho {
                        let ih = (oh * s + i).wrapping_sub(p);
                        if ih >= d.h {
                            continue;
                        }
                        let dst = &mut cols[row + (n * d.ho + oh) * d.wo..][lo..hi];
                        let src = xbase + ih * d.w + lo * s + j - p;
                        if s == 1 {
                            dst.copy_from_slice(&x[src..src + (hi - lo)]);
                        } else {
                            for (k, v) in dst.iter_mut().enumerate() {
                                *v = x[src + k * s];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `[N,C,H,W]`.
fn col2im<T: Float>(cols: &[T], d: &Dims, geo: ConvGeometry) -> Vec<T> {
    let cols_n = d.n * d.ho * d.wo;
    if d.kh == 1 && d.kw == 1 && geo.stride == 1 && geo.pad == 0 {
        return channel_major_to_batch(cols, d.n, d.c, d.h * d.w);
    }
    let mut x = vec![T::zero(); d.n * d.c * d.h * d.w];
    let (s, p) = (geo.stride, geo.pad);
    for c in 0..d.c {
        for i in 0..d.kh {
            for j in 0..d.kw {
                let row = ((c * d.kh + i) * d.kw + j) * cols_n;
                let (lo, hi) = valid_range(d.wo, d.w, s, j, p);
                for n in 0..d.n {
                    let xbase = (n * d.c + c) * d.h * d.w;
                    for oh in 0..d.ho {
                        let ih = (oh * s + i).wrapping_sub(p);
                        if ih >= d.h {
                            continue;
                        }
                        let src = &cols[row + (n * d.ho + oh) * d.wo..][lo..hi];
                        let dst = xbase + ih * d.w + lo * s + j - p;
                        if s == 1 {
                            for (a, b) in x[dst..dst + (hi - lo)].iter_mut().zip(src) {
                                *a += *b;
                            }
                        } else {
                            for (k, v) in src.iter().enumerate() {
                                x[dst + k * s] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[N,O,S]` -> `[O,N*S]`.
fn batch_to_channel_major<T: Float>(t: &[T], n: usize, o: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for ni in 0..n {
        for oi in 0..o {
            let src = (ni * o + oi) * s;
            let dst = (oi * n + ni) * s;
            out[dst..dst + s].copy_from_slice(&t[src..src + s]);
        }
    }
    out
}

/// `[O,N*S]` -> `[N,O,S]`.
fn channel_major_to_batch<T: Float>(t: &[T], n: usize, o: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for oi in 0..o {
        for ni in 0..n {
            let src = (oi * n + ni) * s;
            let dst = (ni * o + oi) * s;
            out[dst..dst + s].copy_from_slice(&t[src..src + s]);
        }
    }
    out
}

pub(crate) fn conv2d_tensor<T: Float>(x: &Tensor<T>, w: &Tensor<T>, geo: ConvGeometry) -> Tensor<T> {
    let d = dims(x.shape(), w.shape(), geo);
    let s = d.ho * d.wo;
    let cols = Tensor::new([d.c * d.kh * d.kw, d.n * s], im2col(x.data(), &d, geo));
    let wm = w.reshape([d.o, d.c * d.kh * d.kw]);
    let out = matmul_tensor(&wm, &cols, false, false);
    Tensor::new([d.n, d.o, d.ho, d.wo], channel_major_to_batch(out.data(), d.n, d.o, s))
}

fn conv2d_input_grad_tensor<T: Float>(
    g: &Tensor<T>,
    w: &Tensor<T>,
    x_shape: &[usize],
    geo: ConvGeometry,
) -> Tensor<T> {
    let d = dims(x_shape, w.shape(), geo);
    let s = d.ho * d.wo;
    assert_eq!(g.shape(), &[d.n, d.o, d.ho, d.wo], "conv output-gradient shape");
    let gm = Tensor::new([d.o, d.n * s], batch_to_channel_major(g.data(), d.n, d.o, s));
    let wm = w.reshape([d.o, d.c * d.kh * d.kw]);
    let dcols = matmul_tensor(&wm, &gm, true, false);
    Tensor::new(x_shape.to_vec(), col2im(dcols.data(), &d, geo))
}

fn conv2d_weight_grad_tensor<T: Float>(
    x: &Tensor<T>,
    g: &Tensor<T>,
    w_shape: &[usize],
    geo: ConvGeometry,
) -> Tensor<T> {
    let d = dims(x.shape(), w_shape, geo);
    let s = d.ho * d.wo;
    assert_eq!(g.shape(), &[d.n, d.o, d.ho, d.wo], "conv output-gradient shape");
    let gm = Tensor::new([d.o, d.n * s], batch_to_channel_major(g.data(), d.n, d.o, s));
    let cols = Tensor::new([d.c * d.kh * d.kw, d.n * s], im2col(x.data(), &d, geo));
    matmul_tensor(&gm, &cols, false, true).reshape(w_shape.to_vec())
}

impl<T: Float> Var<T> {
    /// Cross-correlation of `[N,C,H,W]` input with `[O,C,kh,kw]` weights.
    pub fn conv2d(&self, w: &Var<T>, geo: ConvGeometry) -> Var<T> {
        let v = conv2d_tensor(self.value(), w.value(), geo);
        Var::from_op(v, vec![self.clone(), w.clone()], move |g, p, m| {
            let (x, w) = (&p[0], &p[1]);
            vec![
                m[0].then(|| g.conv2d_input_grad(w, x.shape(), geo)),
                m[1].then(|| x.conv2d_weight_grad(g, w.shape(), geo)),
            ]
        })
    }

    /// Gradient of `conv2d` w.r.t. its input, with `self` as the output
    /// gradient. Linear in both `self` and `w`.
    pub fn conv2d_input_grad(&self, w: &Var<T>, x_shape: &[usize], geo: ConvGeometry) -> Var<T> {
        let v = conv2d_input_grad_tensor(self.value(), w.value(), x_shape, geo);
        Var::from_op(v, vec![self.clone(), w.clone()], move |gg, p, m| {
            let (g, w) = (&p[0], &p[1]);
            vec![
                m[0].then(|| gg.conv2d(w, geo)),
                m[1].then(|| gg.conv2d_weight_grad(g, w.shape(), geo)),
            ]
        })
    }

    /// Gradient of `conv2d` w.r.t. its weights, with `self` as the input and
    /// `g` as the output gradient.
    pub fn conv2d_weight_grad(&self, g: &Var<T>, w_shape: &[usize], geo: ConvGeometry) -> Var<T> {
        let v = conv2d_weight_grad_tensor(self.value(), g.value(), w_shape, geo);
        Var::from_op(v, vec![self.clone(), g.clone()], move |gw, p, m| {
            let (x, g) = (&p[0], &p[1]);
            vec![
                m[0].then(|| g.conv2d_input_grad(gw, x.shape(), geo)),
                m[1].then(|| x.conv2d(gw, geo)),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, geo: ConvGeometry) -> Tensor<f64> {
        let d = dims(x.shape(), w.shape(), geo);
        let mut out = vec![0.0; d.n * d.o * d.ho * d.wo];
        for n in 0..d.n {
            for o in 0..d.o {
                for oh in 0..d.ho {
                    for ow in 0..d.wo {
                        let mut acc = 0.0;
                        for c in 0..d.c {
                            for i in 0..d.kh {
                                for j in 0..d.kw {
                                    let ih = (oh * geo.stride + i) as isize - geo.pad as isize;
                                    let iw = (ow * geo.stride + j) as isize - geo.pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < d.h && (iw as usize) < d.w {
                                        acc += x.data()[((n * d.c + c) * d.h + ih as usize) * d.w + iw as usize]
                                            * w.data()[((o * d.c + c) * d.kh + i) * d.kw + j];
                                    }
                                }
                            }
                        }
                        out[((n * d.o + o) * d.ho + oh) * d.wo + ow] = acc;
                    }
                }
            }
        }
        Tensor::new([d.n, d.o, d.ho, d.wo], out)
    }

    fn seq(shape: &[usize], a: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|i| (i as f64 * a).sin() * 1.3).collect())
    }

    #[test]
    fn im2col_gemm_matches_direct_loops() {
        for geo in [ConvGeometry::SAME3, ConvGeometry { stride: 2, pad: 1 }, ConvGeometry::POINTWISE] {
            let k = if geo == ConvGeometry::POINTWISE { 1 } else { 3 };
            let x = seq(&[2, 3, 7, 6], 0.37);
            let w = seq(&[4, 3, k, k], 0.91);
            let fast = conv2d_tensor(&x, &w, geo);
            let slow = naive_conv(&x, &w, geo);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "{geo:?}");
        }
    }

    #[test]
    fn input_and_weight_grads_are_adjoint() {
        // <conv(x, w), g> = <x, dX(g, w)> = <w, dW(x, g)>
        for geo in [ConvGeometry::SAME3, ConvGeometry { stride: 2, pad: 1 }, ConvGeometry::POINTWISE] {
            let k = if geo == ConvGeometry::POINTWISE { 1 } else { 3 };
            let x = seq(&[2, 3, 6, 5], 0.21);
            let w = seq(&[4, 3, k, k], 0.77);
            let y = conv2d_tensor(&x, &w, geo);
            let g = seq(y.shape(), 0.53);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &g);
            let dx = conv2d_input_grad_tensor(&g, &w, x.shape(), geo);
            let dw = conv2d_weight_grad_tensor(&x, &g, w.shape(), geo);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-10, "{geo:?}");
            assert!((lhs - dot(&w, &dw)).abs() < 1e-10, "{geo:?}");
        }
    }
}
