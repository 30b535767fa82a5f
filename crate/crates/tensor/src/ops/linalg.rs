use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

impl<'g, T: Real> Var<'g, T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (value, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if !self.same_graph(&other) || sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let mut out = Tensor::zeros(&[m, n]);
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                T::zero(),
                out.data_mut(),
                (n as isize, 1),
            );
            (out, m, k, n)
        };
        self.graph().record(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                // dA = G B^T, dB = A^T G
                let mut ga = Tensor::zeros(&[m, k]);
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    T::zero(),
                    ga.data_mut(),
                    (k as isize, 1),
                );
                let mut gb = Tensor::zeros(&[k, n]);
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    a.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    T::zero(),
                    gb.data_mut(),
                    (n as isize, 1),
                );
                vec![Some(ga), Some(gb)]
            }),
        )
    }

    /// Batched product `[b, m, k] x [b, k, n] -> [b, m, n]`.
    pub fn bmm(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (value, bs, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let (sa, sb) = (a.shape(), b.shape());
            if !self.same_graph(&other)
                || sa.len() != 3
                || sb.len() != 3
                || sa[0] != sb[0]
                || sa[2] != sb[1]
            {
                return Err(mismatch("bmm", format!("{sa:?} x {sb:?}")));
            }
            let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            let mut out = Tensor::zeros(&[bs, m, n]);
            for i in 0..bs {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &a.data()[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &b.data()[i * k * n..(i + 1) * k * n],
                    (n as isize, 1),
                    T::zero(),
                    &mut out.data_mut()[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
            (out, bs, m, k, n)
        };
        self.graph().record(
            "bmm",
            &[self, other],
            value,
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let mut ga = Tensor::zeros(&[bs, m, k]);
                let mut gb = Tensor::zeros(&[bs, k, n]);
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gi,
                        (n as isize, 1),
                        &b.data()[i * k * n..(i + 1) * k * n],
                        (1, n as isize),
                        T::zero(),
                        &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                        (k as isize, 1),
                    );
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        &a.data()[i * m * k..(i + 1) * m * k],
                        (1, k as isize),
                        gi,
                        (n as isize, 1),
                        T::zero(),
                        &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                        (n as isize, 1),
                    );
                }
                vec![Some(ga), Some(gb)]
            }),
        )
    }
}
