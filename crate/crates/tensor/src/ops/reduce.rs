use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::{split_axis, Tensor};

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(mismatch(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn kept(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[axis] = 1;
    s
}

impl<'g, T: Real> Var<'g, T> {
    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(self, axis: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            check_axis("sum", x.shape(), axis)?;
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut out = Tensor::zeros(&kept(x.shape(), axis));
            let od = out.data_mut();
            for o in 0..outer {
                for k in 0..n {
                    let row = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut od[o * inner..(o + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            out
        };
        self.graph().record(
            "sum",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let shape = inputs[0].shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let gd = g.data();
                let mut gx = Tensor::zeros(shape);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for k in 0..n {
                        gxd[(o * n + k) * inner..(o * n + k + 1) * inner]
                            .copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn mean(self, axis: usize) -> Result<Var<'g, T>> {
        let n = {
            let x = self.value();
            check_axis("mean", x.shape(), axis)?;
            x.shape()[axis]
        };
        self.sum(axis)?.scale(1.0 / n as f64)
    }

    /// Population variance along `axis`.
    pub fn variance(self, axis: usize) -> Result<Var<'g, T>> {
        let mu = self.mean(axis)?;
        self.sub(mu)?.square()?.mean(axis)
    }

    pub fn sum_all(self) -> Result<Var<'g, T>> {
        let value = Tensor::scalar(self.value().sum());
        self.graph().record(
            "sum_all",
            &[self],
            value,
            Box::new(|g, inputs, _| vec![Some(Tensor::full(inputs[0].shape(), g.item()))]),
        )
    }

    pub fn mean_all(self) -> Result<Var<'g, T>> {
        let n = self.value().len();
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Maximum along `axis` (kept with extent 1). Ties route the gradient to
    /// the first maximal element.
    pub fn max(self, axis: usize) -> Result<Var<'g, T>> {
        let (value, arg) = {
            let x = self.value();
            check_axis("max", x.shape(), axis)?;
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut out = Tensor::zeros(&kept(x.shape(), axis));
            let mut arg = vec![0usize; outer * inner];
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let mut best = xd[o * n * inner + i];
                    let mut best_k = 0;
                    for k in 1..n {
                        let v = xd[(o * n + k) * inner + i];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    od[o * inner + i] = best;
                    arg[o * inner + i] = best_k;
                }
            }
            (out, arg)
        };
        self.graph().record(
            "max",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let shape = inputs[0].shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let mut gx = Tensor::zeros(shape);
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i];
                        gxd[(o * n + k) * inner + i] = g.data()[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            check_axis("softmax", x.shape(), axis)?;
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let xd = x.data();
            let mut out = Tensor::zeros(x.shape());
            let od = out.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * n + k) * inner + i;
                    let m = (0..n).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                    let mut total = T::zero();
                    for k in 0..n {
                        let e = (xd[at(k)] - m).exp();
                        od[at(k)] = e;
                        total += e;
                    }
                    for k in 0..n {
                        od[at(k)] = od[at(k)] / total;
                    }
                }
            }
            out
        };
        self.graph().record(
            "softmax",
            &[self],
            value,
            Box::new(move |g, _, y| {
                let (outer, n, inner) = split_axis(y.shape(), axis);
                let (yd, gd) = (y.data(), g.data());
                let mut gx = Tensor::zeros(y.shape());
                let gxd = gx.data_mut();
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..n {
                            gxd[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Normalizes over the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let axis = self.shape().len() - 1;
        let mu = self.mean(axis)?;
        let centered = self.sub(mu)?;
        let denom = centered.square()?.mean(axis)?.add_scalar(eps)?.sqrt()?;
        centered.div(denom)
    }
}
