use super::tensor::{binary_broadcast, broadcast_to, numel, sum_to, Float, Tensor};
use super::Var;

fn stable_sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn stable_softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Float> Var<T> {
    pub fn add(&self, o: &Var<T>) -> Var<T> {
        let v = binary_broadcast(self.value(), o.value(), |a, b| a + b);
        Var::from_op(v, vec![self.clone(), o.clone()], |g, p, m| {
            vec![
                m[0].then(|| g.sum_to(p[0].shape())),
                m[1].then(|| g.sum_to(p[1].shape())),
            ]
        })
    }

    pub fn sub(&self, o: &Var<T>) -> Var<T> {
        let v = binary_broadcast(self.value(), o.value(), |a, b| a - b);
        Var::from_op(v, vec![self.clone(), o.clone()], |g, p, m| {
            vec![
                m[0].then(|| g.sum_to(p[0].shape())),
                m[1].then(|| g.neg().sum_to(p[1].shape())),
            ]
        })
    }

    pub fn mul(&self, o: &Var<T>) -> Var<T> {
        let v = binary_broadcast(self.value(), o.value(), |a, b| a * b);
        Var::from_op(v, vec![self.clone(), o.clone()], |g, p, m| {
            vec![
                m[0].then(|| g.mul(&p[1]).sum_to(p[0].shape())),
                m[1].then(|| g.mul(&p[0]).sum_to(p[1].shape())),
            ]
        })
    }

    pub fn div(&self, o: &Var<T>) -> Var<T> {
        let v = binary_broadcast(self.value(), o.value(), |a, b| a / b);
        Var::from_op(v, vec![self.clone(), o.clone()], |g, p, m| {
            vec![
                m[0].then(|| g.div(&p[1]).sum_to(p[0].shape())),
                m[1].then(|| g.mul(&p[0]).div(&p[1].square()).neg().sum_to(p[1].shape())),
            ]
        })
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<T> {
        let cc = T::lit(c);
        let v = self.value().map(|x| x * cc);
        Var::from_op(v, vec![self.clone()], move |g, _, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<T> {
        let cc = T::lit(c);
        let v = self.value().map(|x| x + cc);
        Var::from_op(v, vec![self.clone()], |g, _, _| vec![Some(g.clone())])
    }

    /// Multiply by a tensor that never receives a gradient.
    pub fn mul_const(&self, c: &Tensor<T>) -> Var<T> {
        self.mul(&Var::constant(c.clone()))
    }

    pub fn exp(&self) -> Var<T> {
        let v = self.value().map(|x| x.exp());
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.mul(&p[0].exp()))])
    }

    pub fn log(&self) -> Var<T> {
        let v = self.value().map(|x| x.ln());
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.div(&p[0]))])
    }

    pub fn sqrt(&self) -> Var<T> {
        let v = self.value().map(|x| x.sqrt());
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.div(&p[0].sqrt().scale(2.0)))])
    }

    pub fn square(&self) -> Var<T> {
        let v = self.value().map(|x| x * x);
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.mul(&p[0]).scale(2.0))])
    }

    pub fn powf(&self, e: f64) -> Var<T> {
        let ee = T::lit(e);
        let v = self.value().map(|x| x.powf(ee));
        Var::from_op(v, vec![self.clone()], move |g, p, _| {
            vec![Some(g.mul(&p[0].powf(e - 1.0)).scale(e))]
        })
    }

    pub fn sigmoid(&self) -> Var<T> {
        let v = self.value().map(stable_sigmoid);
        Var::from_op(v, vec![self.clone()], |g, p, _| {
            let s = p[0].sigmoid();
            let one_minus = s.neg().add_scalar(1.0);
            vec![Some(g.mul(&s).mul(&one_minus))]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<T> {
        let v = self.value().map(stable_softplus);
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.mul(&p[0].sigmoid()))])
    }

    /// Leaky ReLU scaled by `gain`; the derivative mask is treated as constant.
    pub fn leaky_relu(&self, slope: f64, gain: f64) -> Var<T> {
        let (s, k) = (T::lit(slope * gain), T::lit(gain));
        let v = self.value().map(|x| if x >= T::zero() { x * k } else { x * s });
        Var::from_op(v, vec![self.clone()], move |g, p, _| {
            let mask = p[0].value().map(|x| if x >= T::zero() { k } else { s });
            vec![Some(g.mul_const(&mask))]
        })
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<T> {
        let v = self.value().reshape(shape.to_vec());
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.reshape(p[0].shape()))])
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = broadcast_to(self.value(), shape);
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.sum_to(p[0].shape()))])
    }

    /// Sum down to `shape` (the adjoint of broadcasting).
    pub fn sum_to(&self, shape: &[usize]) -> Var<T> {
        if self.shape() == shape {
            return self.clone();
        }
        let v = sum_to(self.value(), shape);
        Var::from_op(v, vec![self.clone()], |g, p, _| vec![Some(g.broadcast_to(p[0].shape()))])
    }

    /// Sum over `axes`, keeping them as size-1 dims.
    pub fn sum_axes(&self, axes: &[usize]) -> Var<T> {
        let mut shape = self.shape().to_vec();
        for &a in axes {
            shape[a] = 1;
        }
        self.sum_to(&shape)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Var<T> {
        let count: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes).scale(1.0 / count as f64)
    }

    pub fn sum_all(&self) -> Var<T> {
        self.sum_to(&[])
    }

    pub fn mean_all(&self) -> Var<T> {
        let n = numel(self.shape());
        self.sum_all().scale(1.0 / n as f64)
    }

    /// `op(a) @ op(b)` for 2-d operands, where `op` optionally transposes.
    pub fn matmul(&self, b: &Var<T>, ta: bool, tb: bool) -> Var<T> {
        let v = matmul_tensor(self.value(), b.value(), ta, tb);
        Var::from_op(v, vec![self.clone(), b.clone()], move |g, p, m| {
            let (a, b) = (&p[0], &p[1]);
            let ga = m[0].then(|| if ta { b.matmul(g, tb, true) } else { g.matmul(b, false, !tb) });
            let gb = m[1].then(|| if tb { g.matmul(a, true, ta) } else { a.matmul(g, !ta, false) });
            vec![ga, gb]
        })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<T> {
        let v = self.value().narrow(axis, start, len);
        let full = self.shape()[axis];
        Var::from_op(v, vec![self.clone()], move |g, _, _| vec![Some(g.pad_narrow(axis, start, full))])
    }

    /// Embed into zeros of extent `full` along `axis` (the adjoint of narrow).
    pub(crate) fn pad_narrow(&self, axis: usize, start: usize, full: usize) -> Var<T> {
        let len = self.shape()[axis];
        let mut parts = Vec::new();
        let mut shape = self.shape().to_vec();
        if start > 0 {
            shape[axis] = start;
            parts.push(Tensor::zeros(shape.clone()));
        }
        parts.push(self.value().clone());
        if start + len < full {
            shape[axis] = full - start - len;
            parts.push(Tensor::zeros(shape));
        }
        let v = Tensor::concat(&parts, axis);
        Var::from_op(v, vec![self.clone()], move |g, _, _| vec![Some(g.narrow(axis, start, len))])
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Var<T> {
        let vals: Vec<Tensor<T>> = parts.iter().map(|p| p.value().clone()).collect();
        let v = Tensor::concat(&vals, axis);
        Var::from_op(v, parts.to_vec(), move |g, p, m| {
            let mut start = 0;
            p.iter()
                .zip(m)
                .map(|(pi, &need)| {
                    let len = pi.shape()[axis];
                    let out = need.then(|| g.narrow(axis, start, len));
                    start += len;
                    out
                })
                .collect()
        })
    }
}

pub(crate) fn matmul_tensor<T: Float>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Tensor<T> {
    assert!(a.rank() == 2 && b.rank() == 2, "matmul needs 2-d operands");
    let (ar, ac) = (a.dim(0), a.dim(1));
    let (br, bc) = (b.dim(0), b.dim(1));
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac as isize) } else { (ar, ac, ac as isize, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc as isize) } else { (br, bc, bc as isize, 1) };
    assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", a.shape(), b.shape());
    let mut out = vec![T::zero(); m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: strides describe the contiguous buffers checked above.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data().as_ptr(),
                rsa,
                csa,
                b.data().as_ptr(),
                rsb,
                csb,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new([m, n], out)
}
