use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::{split_axis, strides_of, Tensor};

fn permute_data<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    // stride in the input for each output axis
    let src: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.len();
    let xd = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(xd[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves size")
}

impl<'g, T: Real> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let value = self.value().clone().reshape(shape)?;
        self.graph().record(
            "reshape",
            &[self],
            value,
            Box::new(|g, inputs, _| {
                vec![Some(g.clone().reshape(inputs[0].shape()).expect("same size"))]
            }),
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank() {
                return Err(mismatch("permute", format!("{axes:?} for {:?}", x.shape())));
            }
            for &a in axes {
                if a >= x.rank() || seen[a] {
                    return Err(mismatch("permute", format!("invalid axes {axes:?}")));
                }
                seen[a] = true;
            }
            permute_data(&x, axes)
        };
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.graph().record(
            "permute",
            &[self],
            value,
            Box::new(move |g, _, _| vec![Some(permute_data(g, &inverse))]),
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if rank < 2 {
            return Err(mismatch("transpose", "rank < 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 1, rank - 2);
        self.permute(&axes)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            if axis >= x.rank() || start + len > x.shape()[axis] {
                return Err(mismatch(
                    "slice",
                    format!("axis {axis} [{start}, {}) of {:?}", start + len, x.shape()),
                ));
            }
            let (outer, n, inner) = split_axis(x.shape(), axis);
            let mut shape = x.shape().to_vec();
            shape[axis] = len;
            let xd = x.data();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                out.extend_from_slice(&xd[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
            Tensor::new(&shape, out)?
        };
        self.graph().record(
            "slice",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let shape = inputs[0].shape();
                let (outer, n, inner) = split_axis(shape, axis);
                let mut gx = Tensor::zeros(shape);
                let gxd = gx.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    gxd[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Stacks `copies` copies of `self` along `axis`.
    pub fn repeat(self, axis: usize, copies: usize) -> Result<Var<'g, T>> {
        let parts = vec![self; copies];
        concat(&parts, axis)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g, T: Real>(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
    let first = parts
        .first()
        .ok_or_else(|| mismatch("concat", "no operands"))?;
    let graph = first.graph();
    let (value, extents) = {
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(mismatch("concat", format!("axis {axis} for {base:?}")));
        }
        let mut extents = Vec::with_capacity(parts.len());
        for (p, v) in parts.iter().zip(&values) {
            let s = v.shape();
            if !p.same_graph(first)
                || s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(mismatch("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            extents.push(s[axis]);
        }
        let total: usize = extents.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &n) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        (Tensor::new(&shape, out)?, extents)
    };
    graph.record(
        "concat",
        parts,
        value,
        Box::new(move |g, inputs, _| {
            let total: usize = extents.iter().sum();
            let (outer, _, inner) = split_axis(g.shape(), axis);
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(inputs.len());
            for (input, &n) in inputs.iter().zip(&extents) {
                let mut part = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    let start = (o * total + offset) * inner;
                    part.extend_from_slice(&gd[start..start + n * inner]);
                }
                grads.push(Some(Tensor::new(input.shape(), part).expect("same size")));
                offset += n;
            }
            grads
        }),
    )
}
