//! Separable bilinear resampling with half-pixel centers and edge clamping.
//! Downsampling by exactly 2 reduces to a 2x2 box average.

use super::tensor::{Float, Tensor};
use super::Var;

/// Per output index: the two source taps and their weights.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

fn resize_impl<T: Float>(x: &Tensor<T>, oh: usize, ow: usize, adjoint_of: Option<(usize, usize)>) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "resize expects NCHW");
    let planes = s[0] * s[1];
    let (h, w) = (s[2], s[3]);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * oh * ow];
    match adjoint_of {
        None => {
            let th = taps(h, oh);
            let tw = taps(w, ow);
            let mut rows = vec![T::zero(); h * ow];
            for p in 0..planes {
                let src = &xd[p * h * w..(p + 1) * h * w];
                for r in 0..h {
                    for (c, &(j0, j1, a, b)) in tw.iter().enumerate() {
                        rows[r * ow + c] = src[r * w + j0] * T::lit(a) + src[r * w + j1] * T::lit(b);
                    }
                }
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for (r, &(i0, i1, a, b)) in th.iter().enumerate() {
                    let (ta, tb) = (T::lit(a), T::lit(b));
                    for c in 0..ow {
                        dst[r * ow + c] = rows[i0 * ow + c] * ta + rows[i1 * ow + c] * tb;
                    }
                }
            }
        }
        Some((fh, fw)) => {
            // x is the gradient of a forward resize (oh, ow) -> (fh, fw); scatter back.
            assert_eq!((h, w), (fh, fw));
            let th = taps(oh, fh);
            let tw = taps(ow, fw);
            let mut rows = vec![T::zero(); oh * fw];
            for p in 0..planes {
                rows.iter_mut().for_each(|v| *v = T::zero());
                let src = &xd[p * h * w..(p + 1) * h * w];
                for (r, &(i0, i1, a, b)) in th.iter().enumerate() {
                    let (ta, tb) = (T::lit(a), T::lit(b));
                    for c in 0..fw {
                        let g = src[r * fw + c];
                        rows[i0 * fw + c] += g * ta;
                        rows[i1 * fw + c] += g * tb;
                    }
                }
                let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
                for r in 0..oh {
                    for (c, &(j0, j1, a, b)) in tw.iter().enumerate() {
                        let g = rows[r * fw + c];
                        dst[r * ow + j0] += g * T::lit(a);
                        dst[r * ow + j1] += g * T::lit(b);
                    }
                }
            }
        }
    }
    Tensor::new([s[0], s[1], oh, ow], out)
}

/// Bilinear resize of an NCHW tensor outside the autograd graph.
pub fn resize_tensor<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    if x.dim(2) == oh && x.dim(3) == ow {
        return x.clone();
    }
    resize_impl(x, oh, ow, None)
}

impl<T: Float> Var<T> {
    pub fn resize(&self, oh: usize, ow: usize) -> Var<T> {
        let (h, w) = (self.shape()[2], self.shape()[3]);
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let v = resize_impl(self.value(), oh, ow, None);
        Var::from_op(v, vec![self.clone()], move |g, _, _| vec![Some(g.resize_adjoint(h, w))])
    }

    /// Adjoint of `resize(.., H, W)` applied to a gradient of spatial size `H x W`.
    fn resize_adjoint(&self, ih: usize, iw: usize) -> Var<T> {
        let (fh, fw) = (self.shape()[2], self.shape()[3]);
        let v = resize_impl(self.value(), ih, iw, Some((fh, fw)));
        Var::from_op(v, vec![self.clone()], move |g, _, _| vec![Some(g.resize(fh, fw))])
    }

    pub fn upsample2x(&self) -> Var<T> {
        let (h, w) = (self.shape()[2], self.shape()[3]);
        self.resize(h * 2, w * 2)
    }

    pub fn downsample2x(&self) -> Var<T> {
        let (h, w) = (self.shape()[2], self.shape()[3]);
        self.resize(h / 2, w / 2)
    }
}
