use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::{strides_of, Tensor};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed under the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output index of a broadcast with the matching input offsets.
fn zip_indices(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

type Partial<T> = fn(T, T, T) -> T;

impl<'g, T: Real> Var<'g, T> {
    /// Elementwise map with derivative `df(x, y)`.
    pub(crate) fn unary(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let value = self.value().map(f);
        self.graph().record(
            op,
            &[self],
            value,
            Box::new(move |g, inputs, out| {
                let x = inputs[0].data();
                let y = out.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| gi * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
            }),
        )
    }

    fn binary(
        self,
        other: Var<'g, T>,
        op: &'static str,
        f: fn(T, T) -> T,
        dfa: Partial<T>,
        dfb: Partial<T>,
    ) -> Result<Var<'g, T>> {
        if !self.same_graph(&other) {
            return Err(mismatch(op, "operands live on different graphs"));
        }
        let value = {
            let a = self.value();
            let b = other.value();
            let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                mismatch(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
            })?;
            if a.shape() == b.shape() {
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::new(&out, data)?
            } else {
                let sa = broadcast_strides(a.shape(), &out);
                let sb = broadcast_strides(b.shape(), &out);
                let mut res = Tensor::zeros(&out);
                let (ad, bd, rd) = (a.data(), b.data(), res.data_mut());
                zip_indices(&out, &sa, &sb, |i, ia, ib| rd[i] = f(ad[ia], bd[ib]));
                res
            }
        };
        self.graph().record(
            op,
            &[self, other],
            value,
            Box::new(move |g, inputs, out| {
                let (a, b) = (inputs[0], inputs[1]);
                let shape = out.shape();
                let (ad, bd, yd, gd) = (a.data(), b.data(), out.data(), g.data());
                if a.shape() == b.shape() {
                    let mut ga = Tensor::zeros(shape);
                    let mut gb = Tensor::zeros(shape);
                    {
                        let (gam, gbm) = (ga.data_mut(), gb.data_mut());
                        for i in 0..gd.len() {
                            gam[i] = gd[i] * dfa(ad[i], bd[i], yd[i]);
                            gbm[i] = gd[i] * dfb(ad[i], bd[i], yd[i]);
                        }
                    }
                    return vec![Some(ga), Some(gb)];
                }
                let sa = broadcast_strides(a.shape(), shape);
                let sb = broadcast_strides(b.shape(), shape);
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                {
                    let (gam, gbm) = (ga.data_mut(), gb.data_mut());
                    zip_indices(shape, &sa, &sb, |i, ia, ib| {
                        gam[ia] += gd[i] * dfa(ad[ia], bd[ib], yd[i]);
                        gbm[ib] += gd[i] * dfb(ad[ia], bd[ib], yd[i]);
                    });
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| T::one(), |_, _, _| T::one())
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| T::one(), |_, _, _| -T::one())
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(other, "div", |a, b| a / b, |_, b, _| T::one() / b, |_, b, y| -y / b)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'g, T>> {
        let c = T::of(factor);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, offset: f64) -> Result<Var<'g, T>> {
        let c = T::of(offset);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn relu(self) -> Result<Var<'g, T>> {
        self.unary(
            "relu",
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Result<Var<'g, T>> {
        self.unary("tanh", |x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Result<Var<'g, T>> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Result<Var<'g, T>> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        self.unary("square", |x| x * x, |x, _| T::of(2.0) * x)
    }

    pub fn abs(self) -> Result<Var<'g, T>> {
        self.unary(
            "abs",
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// Elementwise clamp into `[lo, hi]` (same shape as `self`). Gradient
    /// passes only strictly inside the bounds.
    pub fn clamp_between(self, lo: &Tensor<T>, hi: &Tensor<T>) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            if x.shape() != lo.shape() || x.shape() != hi.shape() {
                return Err(mismatch(
                    "clamp",
                    format!("{:?} vs bounds {:?}/{:?}", x.shape(), lo.shape(), hi.shape()),
                ));
            }
            let data = x
                .data()
                .iter()
                .zip(lo.data().iter().zip(hi.data()))
                .map(|(&v, (&l, &h))| v.max(l).min(h))
                .collect();
            Tensor::new(x.shape(), data)?
        };
        let (lo, hi) = (lo.clone(), hi.clone());
        self.graph().record(
            "clamp",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let x = inputs[0].data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        if x[i] > lo.data()[i] && x[i] < hi.data()[i] {
                            gi
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
            }),
        )
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[1, 3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[3])).unwrap();
        let y = x.sigmoid().unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn broadcast_gradient_reduces() {
        let g = Graph::<f64>::new();
        let a = g.leaf(Tensor::ones(&[2, 3])).unwrap();
        let b = g.leaf(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = a.mul(b).unwrap().sum_all().unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(b).data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.wrt(a).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn square_derivative_at_three() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0)).unwrap();
        let y = x.mul(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!((grads.wrt(x).item() - 6.0).abs() < 1e-9);
    }

    #[test]
    fn nan_input_trips() {
        let g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(-1.0)).unwrap();
        assert!(matches!(
            x.ln(),
            Err(crate::TensorError::NonFiniteValue { op: "ln" })
        ));
    }
}
