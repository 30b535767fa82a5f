//! Image-shaped ops on `[batch, height, width, channels]` tensors.

use crate::error::{mismatch, Result};
use crate::graph::Var;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.ci
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.ci..(ky * g.kw + kx + 1) * g.ci];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(T::zero());
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.ci;
                        dst.copy_from_slice(&x[src..src + g.ci]);
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let k = g.patch();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * k..(oy * g.wo + ox + 1) * k];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.ci..(ky * g.kw + kx + 1) * g.ci];
                    let dst = (iy as usize * g.w + ix as usize) * g.ci;
                    for (d, &s) in x[dst..dst + g.ci].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Bilinear interpolation weights for one coordinate with clamp-to-edge.
/// Returns `(i0, i1, frac, inside)` where `inside` is false when the
/// coordinate was clamped (zero gradient w.r.t. the coordinate).
#[inline]
fn lerp_index<T: Real>(x: T, extent: usize) -> (usize, usize, T, bool) {
    let max = T::of((extent - 1) as f64);
    let inside = x >= T::zero() && x <= max;
    let xc = x.max(T::zero()).min(max);
    if extent == 1 {
        return (0, 0, T::zero(), inside);
    }
    let mut i0 = xc.floor().to_usize().unwrap_or(0);
    if i0 >= extent - 1 {
        i0 = extent - 2;
    }
    (i0, i0 + 1, xc - T::of(i0 as f64), inside)
}

impl<'g, T: Real> Var<'g, T> {
    /// 2-D convolution. `self`: `[b, h, w, ci]`, `weight`: `[kh, kw, ci, co]`,
    /// optional `bias`: `[co]`.
    pub fn conv2d(
        self,
        weight: Var<'g, T>,
        bias: Option<Var<'g, T>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'g, T>> {
        let (value, geom, b, co) = {
            let x = self.value();
            let w = weight.value();
            let (sx, sw) = (x.shape(), w.shape());
            if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[2] || stride == 0 {
                return Err(mismatch("conv2d", format!("input {sx:?}, weight {sw:?}")));
            }
            if let Some(bias) = bias {
                if bias.shape() != [sw[3]] {
                    return Err(mismatch("conv2d", format!("bias {:?}", bias.shape())));
                }
            }
            let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
            let (kh, kw, co) = (sw[0], sw[1], sw[3]);
            if h + 2 * pad < kh || wd + 2 * pad < kw {
                return Err(mismatch("conv2d", "kernel larger than padded input"));
            }
            let geom = ConvGeom {
                h,
                w: wd,
                ci,
                kh,
                kw,
                stride,
                pad,
                ho: (h + 2 * pad - kh) / stride + 1,
                wo: (wd + 2 * pad - kw) / stride + 1,
            };
            let rows = geom.ho * geom.wo;
            let k = geom.patch();
            let mut cols = vec![T::zero(); rows * k];
            let mut out = Tensor::zeros(&[b, geom.ho, geom.wo, co]);
            let bias_vals = bias.map(|b| b.value().data().to_vec());
            for bi in 0..b {
                im2col(&x.data()[bi * h * wd * ci..(bi + 1) * h * wd * ci], &geom, &mut cols);
                let dst = &mut out.data_mut()[bi * rows * co..(bi + 1) * rows * co];
                if let Some(bv) = &bias_vals {
                    for row in dst.chunks_mut(co) {
                        row.copy_from_slice(bv);
                    }
                }
                T::gemm(
                    rows,
                    k,
                    co,
                    T::one(),
                    &cols,
                    (k as isize, 1),
                    w.data(),
                    (co as isize, 1),
                    if bias_vals.is_some() { T::one() } else { T::zero() },
                    dst,
                    (co as isize, 1),
                );
            }
            (out, geom, b, co)
        };
        let mut parents = vec![self, weight];
        parents.extend(bias);
        self.graph().record(
            "conv2d",
            &parents,
            value,
            Box::new(move |g, inputs, _| {
                let (x, w) = (inputs[0], inputs[1]);
                let rows = geom.ho * geom.wo;
                let k = geom.patch();
                let in_size = geom.h * geom.w * geom.ci;
                let mut cols = vec![T::zero(); rows * k];
                let mut gcols = vec![T::zero(); rows * k];
                let mut gx = Tensor::zeros(x.shape());
                let mut gw = Tensor::zeros(w.shape());
                for bi in 0..b {
                    let gb = &g.data()[bi * rows * co..(bi + 1) * rows * co];
                    im2col(&x.data()[bi * in_size..(bi + 1) * in_size], &geom, &mut cols);
                    // dW += cols^T G
                    T::gemm(
                        k,
                        rows,
                        co,
                        T::one(),
                        &cols,
                        (1, k as isize),
                        gb,
                        (co as isize, 1),
                        T::one(),
                        gw.data_mut(),
                        (co as isize, 1),
                    );
                    // dcols = G W^T
                    T::gemm(
                        rows,
                        co,
                        k,
                        T::one(),
                        gb,
                        (co as isize, 1),
                        w.data(),
                        (1, co as isize),
                        T::zero(),
                        &mut gcols,
                        (k as isize, 1),
                    );
                    col2im(
                        &gcols,
                        &geom,
                        &mut gx.data_mut()[bi * in_size..(bi + 1) * in_size],
                    );
                }
                let mut grads = vec![Some(gx), Some(gw)];
                if inputs.len() == 3 {
                    let mut gbias = Tensor::zeros(&[co]);
                    for row in g.data().chunks(co) {
                        for (d, &v) in gbias.data_mut().iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Some(gbias));
                }
                grads
            }),
        )
    }

    /// 2x2 average pooling with stride 2; odd extents round up and average
    /// only the cells that exist.
    pub fn avg_pool2(self) -> Result<Var<'g, T>> {
        let value = {
            let x = self.value();
            let s = x.shape();
            if s.len() != 4 {
                return Err(mismatch("avg_pool2", format!("{s:?}")));
            }
            let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
            let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = Tensor::zeros(&[b, ho, wo, c]);
            let (xd, od) = (x.data(), out.data_mut());
            for bi in 0..b {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let ys = (2 * oy)..(2 * oy + 2).min(h);
                        let xs = (2 * ox)..(2 * ox + 2).min(w);
                        let count = T::of((ys.len() * xs.len()) as f64);
                        let dst = ((bi * ho + oy) * wo + ox) * c;
                        for iy in ys {
                            for ix in xs.clone() {
                                let src = ((bi * h + iy) * w + ix) * c;
                                for ch in 0..c {
                                    od[dst + ch] += xd[src + ch];
                                }
                            }
                        }
                        for ch in 0..c {
                            od[dst + ch] = od[dst + ch] / count;
                        }
                    }
                }
            }
            out
        };
        self.graph().record(
            "avg_pool2",
            &[self],
            value,
            Box::new(|g, inputs, _| {
                let s = inputs[0].shape();
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
                let mut gx = Tensor::zeros(s);
                let gxd = gx.data_mut();
                for bi in 0..b {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let ys = (2 * oy)..(2 * oy + 2).min(h);
                            let xs = (2 * ox)..(2 * ox + 2).min(w);
                            let count = T::of((ys.len() * xs.len()) as f64);
                            let src = ((bi * ho + oy) * wo + ox) * c;
                            for iy in ys {
                                for ix in xs.clone() {
                                    let dst = ((bi * h + iy) * w + ix) * c;
                                    for ch in 0..c {
                                        gxd[dst + ch] += g.data()[src + ch] / count;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Bilinear sampling. `self`: `[b, h, w, c]` features, `points`:
    /// `[b, p, 2]` as `(x, y)` pixel coordinates with pixel centres on
    /// integers. Out-of-range coordinates clamp to the border. Output
    /// `[b, p, c]`, differentiable w.r.t. both features and points.
    pub fn bilinear_sample(self, points: Var<'g, T>) -> Result<Var<'g, T>> {
        let value = {
            let f = self.value();
            let pts = points.value();
            let (sf, sp) = (f.shape(), pts.shape());
            if sf.len() != 4 || sp.len() != 3 || sp[2] != 2 || sf[0] != sp[0] || !self.same_graph(&points) {
                return Err(mismatch("bilinear_sample", format!("features {sf:?}, points {sp:?}")));
            }
            let (b, h, w, c) = (sf[0], sf[1], sf[2], sf[3]);
            let p = sp[1];
            let mut out = Tensor::zeros(&[b, p, c]);
            let (fd, pd, od) = (f.data(), pts.data(), out.data_mut());
            for bi in 0..b {
                let base = bi * h * w * c;
                for pi in 0..p {
                    let q = (bi * p + pi) * 2;
                    let (x0, x1, fx, _) = lerp_index(pd[q], w);
                    let (y0, y1, fy, _) = lerp_index(pd[q + 1], h);
                    let w00 = (T::one() - fx) * (T::one() - fy);
                    let w01 = fx * (T::one() - fy);
                    let w10 = (T::one() - fx) * fy;
                    let w11 = fx * fy;
                    let dst = (bi * p + pi) * c;
                    let (a00, a01) = (base + (y0 * w + x0) * c, base + (y0 * w + x1) * c);
                    let (a10, a11) = (base + (y1 * w + x0) * c, base + (y1 * w + x1) * c);
                    for ch in 0..c {
                        od[dst + ch] = w00 * fd[a00 + ch]
                            + w01 * fd[a01 + ch]
                            + w10 * fd[a10 + ch]
                            + w11 * fd[a11 + ch];
                    }
                }
            }
            out
        };
        self.graph().record(
            "bilinear_sample",
            &[self, points],
            value,
            Box::new(|g, inputs, _| {
                let (f, pts) = (inputs[0], inputs[1]);
                let sf = f.shape();
                let (b, h, w, c) = (sf[0], sf[1], sf[2], sf[3]);
                let p = pts.shape()[1];
                let mut gf = Tensor::zeros(sf);
                let mut gp = Tensor::zeros(pts.shape());
                let (fd, pd, gd) = (f.data(), pts.data(), g.data());
                let gfd = gf.data_mut();
                let gpd = gp.data_mut();
                for bi in 0..b {
                    let base = bi * h * w * c;
                    for pi in 0..p {
                        let q = (bi * p + pi) * 2;
                        let (x0, x1, fx, in_x) = lerp_index(pd[q], w);
                        let (y0, y1, fy, in_y) = lerp_index(pd[q + 1], h);
                        let w00 = (T::one() - fx) * (T::one() - fy);
                        let w01 = fx * (T::one() - fy);
                        let w10 = (T::one() - fx) * fy;
                        let w11 = fx * fy;
                        let src = (bi * p + pi) * c;
                        let (a00, a01) = (base + (y0 * w + x0) * c, base + (y0 * w + x1) * c);
                        let (a10, a11) = (base + (y1 * w + x0) * c, base + (y1 * w + x1) * c);
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for ch in 0..c {
                            let gv = gd[src + ch];
                            gfd[a00 + ch] += w00 * gv;
                            gfd[a01 + ch] += w01 * gv;
                            gfd[a10 + ch] += w10 * gv;
                            gfd[a11 + ch] += w11 * gv;
                            let (v00, v01, v10, v11) =
                                (fd[a00 + ch], fd[a01 + ch], fd[a10 + ch], fd[a11 + ch]);
                            dx += gv * ((T::one() - fy) * (v01 - v00) + fy * (v11 - v10));
                            dy += gv * ((T::one() - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                        if in_x && w > 1 {
                            gpd[q] = dx;
                        }
                        if in_y && h > 1 {
                            gpd[q + 1] = dy;
                        }
                    }
                }
                vec![Some(gf), Some(gp)]
            }),
        )
    }

    /// Bilinear resize of `[b, h, w, c]` to `[b, out_h, out_w, c]` with
    /// half-pixel centres and edge clamping.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Result<Var<'g, T>> {
        let shape = self.shape();
        if shape.len() != 4 || out_h == 0 || out_w == 0 {
            return Err(mismatch("resize_bilinear", format!("{shape:?}")));
        }
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let taps = |out: usize, extent: usize| -> Vec<(usize, usize, T)> {
            (0..out)
                .map(|o| {
                    let src = (o as f64 + 0.5) * extent as f64 / out as f64 - 0.5;
                    let (i0, i1, f, _) = lerp_index(T::of(src), extent);
                    (i0, i1, f)
                })
                .collect()
        };
        let ty = taps(out_h, h);
        let tx = taps(out_w, w);
        let value = {
            let x = self.value();
            let xd = x.data();
            let mut out = Tensor::zeros(&[b, out_h, out_w, c]);
            let od = out.data_mut();
            for bi in 0..b {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let dst = ((bi * out_h + oy) * out_w + ox) * c;
                        let at = |y: usize, xx: usize| ((bi * h + y) * w + xx) * c;
                        let (a00, a01, a10, a11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                        for ch in 0..c {
                            od[dst + ch] = (T::one() - fy)
                                * ((T::one() - fx) * xd[a00 + ch] + fx * xd[a01 + ch])
                                + fy * ((T::one() - fx) * xd[a10 + ch] + fx * xd[a11 + ch]);
                        }
                    }
                }
            }
            out
        };
        self.graph().record(
            "resize_bilinear",
            &[self],
            value,
            Box::new(move |g, inputs, _| {
                let mut gx = Tensor::zeros(inputs[0].shape());
                let gxd = gx.data_mut();
                let gd = g.data();
                for bi in 0..b {
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let src = ((bi * out_h + oy) * out_w + ox) * c;
                            let at = |y: usize, xx: usize| ((bi * h + y) * w + xx) * c;
                            let (a00, a01, a10, a11) = (at(y0, x0), at(y0, x1), at(y1, x0), at(y1, x1));
                            for ch in 0..c {
                                let gv = gd[src + ch];
                                gxd[a00 + ch] += (T::one() - fy) * (T::one() - fx) * gv;
                                gxd[a01 + ch] += (T::one() - fy) * fx * gv;
                                gxd[a10 + ch] += fy * (T::one() - fx) * gv;
                                gxd[a11 + ch] += fy * fx * gv;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}
