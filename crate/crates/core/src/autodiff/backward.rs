use super::kernels::{axis_split, broadcast_for_each, col2im, im2col};
use super::{transpose_blocks, Binary, Graph, Op, Unary, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type Grads<T> = Vec<Option<Tensor<T>>>;

fn accumulate<T: Scalar>(grads: &mut Grads<T>, v: Var, delta: Tensor<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, &d) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn from_vec<T: Scalar>(shape: &[usize], data: Vec<T>) -> Tensor<T> {
    Tensor::new(shape, data).expect("adjoint shape matches its primal")
}

impl<T: Scalar> Graph<T> {
    /// Reverse sweep from a one-element `root`.
    ///
    /// Adjoints are accumulated into the `grad` of every leaf created with
    /// [`Graph::param`] and into the root itself; calling this twice without
    /// [`Graph::zero_grad`] doubles them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Grads<T> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad && idx != root.0 {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            if matches!(self.nodes[idx].op, Op::Leaf) || idx == root.0 {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += d;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut Grads<T>) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let two = T::lit(2.0);
                let half = T::lit(0.5);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(y.data())
                    .map(|((&gi, &xi), &yi)| match kind {
                        Unary::Neg => -gi,
                        Unary::Exp => gi * yi,
                        Unary::Ln => gi / xi,
                        Unary::Sqrt => gi * half / yi,
                        Unary::Square => gi * two * xi,
                        Unary::Tanh => gi * (T::one() - yi * yi),
                        Unary::Sigmoid => gi * yi * (T::one() - yi),
                        Unary::Relu => {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                    })
                    .collect();
                accumulate(grads, *x, from_vec(xv.shape(), data));
            }
            Op::Binary(kind, a, b) => self.propagate_binary(*kind, *a, *b, y.shape(), g, grads),
            Op::Scale(x, c) => accumulate(grads, *x, g.map(|v| v * *c)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::SumAll(x) => accumulate(grads, *x, Tensor::full(self.shape(*x), g.item())),
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = axis_split(shape, *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        data.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                accumulate(grads, *x, from_vec(shape, data));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.len() / k;
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        n,
                        1,
                        vb.data(),
                        1,
                        n,
                        T::zero(),
                        &mut ga,
                        k,
                        1,
                    );
                    accumulate(grads, *a, from_vec(va.shape(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        1,
                        k,
                        g.data(),
                        n,
                        1,
                        T::zero(),
                        &mut gb,
                        n,
                        1,
                    );
                    accumulate(grads, *b, from_vec(vb.shape(), gb));
                }
            }
            Op::Bmm(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                if self.rg(*a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g.data()[i * m * n..],
                            n,
                            1,
                            &vb.data()[i * k * n..],
                            1,
                            n,
                            T::zero(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            k,
                            1,
                        );
                    }
                    accumulate(grads, *a, from_vec(va.shape(), ga));
                }
                if self.rg(*b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &va.data()[i * m * k..],
                            1,
                            k,
                            &g.data()[i * m * n..],
                            n,
                            1,
                            T::zero(),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            n,
                            1,
                        );
                    }
                    accumulate(grads, *b, from_vec(vb.shape(), gb));
                }
            }
            Op::TransposeLast2(x) => {
                let shape = self.shape(*x);
                let r = shape.len();
                let (m, n) = (shape[r - 2], shape[r - 1]);
                accumulate(grads, *x, from_vec(shape, transpose_blocks(g.data(), n, m)));
            }
            Op::Reshape(x) => accumulate(grads, *x, from_vec(self.shape(*x), g.data().to_vec())),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + ext * inner]);
                        }
                        accumulate(grads, v, from_vec(self.shape(v), data));
                    }
                    offset += ext;
                }
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x);
                let (outer, dim, inner) = axis_split(shape, *axis);
                let len = y.shape()[*axis];
                let mut data = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(grads, *x, from_vec(shape, data));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let (yv, gv) = (y.data(), g.data());
                let mut data = vec![T::zero(); yv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: T = (0..len).map(|a| gv[at(a)] * yv[at(a)]).sum();
                        for a in 0..len {
                            data[at(a)] = yv[at(a)] * (gv[at(a)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, from_vec(y.shape(), data));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let width = self.shape(*gain)[0];
                let rows = inv_std.len();
                let gv = g.data();
                let gain_v = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); width];
                    let mut db = vec![T::zero(); width];
                    for r in 0..rows {
                        for j in 0..width {
                            let i = r * width + j;
                            dg[j] += gv[i] * normalized[i];
                            db[j] += gv[i];
                        }
                    }
                    if self.rg(*gain) {
                        accumulate(grads, *gain, from_vec(&[width], dg));
                    }
                    if self.rg(*bias) {
                        accumulate(grads, *bias, from_vec(&[width], db));
                    }
                }
                if self.rg(*x) {
                    let w = T::lit(width as f64);
                    let mut dx = vec![T::zero(); gv.len()];
                    for r in 0..rows {
                        let span = r * width..(r + 1) * width;
                        let xh = &normalized[span.clone()];
                        let dxh: Vec<T> = gv[span.clone()].iter().zip(gain_v).map(|(&a, &b)| a * b).collect();
                        let sum_d: T = dxh.iter().copied().sum();
                        let sum_dx: T = dxh.iter().zip(xh).map(|(&a, &b)| a * b).sum();
                        for j in 0..width {
                            dx[r * width + j] = inv_std[r] / w * (w * dxh[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, from_vec(self.shape(*x), dx));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let batch = xv.shape()[0];
                let c_out = wv.shape()[0];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let in_plane = geom.channels * geom.h * geom.w;
                let mut cols = vec![T::zero(); rows * p];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dx = vec![T::zero(); if self.rg(*x) { xv.len() } else { 0 }];
                for i in 0..batch {
                    let gi = &g.data()[i * c_out * p..(i + 1) * c_out * p];
                    if self.rg(*w) {
                        im2col(&xv.data()[i * in_plane..(i + 1) * in_plane], geom, &mut cols);
                        T::gemm(
                            c_out,
                            p,
                            rows,
                            T::one(),
                            gi,
                            p,
                            1,
                            &cols,
                            1,
                            p,
                            T::one(),
                            &mut dw,
                            rows,
                            1,
                        );
                    }
                    if self.rg(*x) {
                        T::gemm(
                            rows,
                            c_out,
                            p,
                            T::one(),
                            wv.data(),
                            1,
                            rows,
                            gi,
                            p,
                            1,
                            T::zero(),
                            &mut cols,
                            p,
                            1,
                        );
                        col2im(&cols, geom, &mut dx[i * in_plane..(i + 1) * in_plane]);
                    }
                }
                if self.rg(*w) {
                    accumulate(grads, *w, from_vec(wv.shape(), dw));
                }
                if self.rg(*x) {
                    accumulate(grads, *x, from_vec(xv.shape(), dx));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    accumulate(grads, b, channel_sums(g.data(), batch, c_out, p));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, c_in) = (xv.shape()[0], xv.shape()[1]);
                let c_out = wv.shape()[1];
                let (rows, p) = (geom.col_rows(), geom.col_cols());
                let out_plane = c_out * geom.h * geom.w;
                let mut cols = vec![T::zero(); rows * p];
                let mut dw = vec![T::zero(); wv.len()];
                let mut dx = vec![T::zero(); if self.rg(*x) { xv.len() } else { 0 }];
                for i in 0..batch {
                    im2col(&g.data()[i * out_plane..(i + 1) * out_plane], geom, &mut cols);
                    if self.rg(*x) {
                        T::gemm(
                            c_in,
                            rows,
                            p,
                            T::one(),
                            wv.data(),
                            rows,
                            1,
                            &cols,
                            p,
                            1,
                            T::zero(),
                            &mut dx[i * c_in * p..(i + 1) * c_in * p],
                            p,
                            1,
                        );
                    }
                    if self.rg(*w) {
                        T::gemm(
                            c_in,
                            p,
                            rows,
                            T::one(),
                            &xv.data()[i * c_in * p..],
                            p,
                            1,
                            &cols,
                            1,
                            p,
                            T::one(),
                            &mut dw,
                            rows,
                            1,
                        );
                    }
                }
                if self.rg(*w) {
                    accumulate(grads, *w, from_vec(wv.shape(), dw));
                }
                if self.rg(*x) {
                    accumulate(grads, *x, from_vec(xv.shape(), dx));
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    accumulate(grads, b, channel_sums(g.data(), batch, c_out, geom.h * geom.w));
                }
            }
        }
    }

    fn propagate_binary(&self, kind: Binary, a: Var, b: Var, out_shape: &[usize], g: &Tensor<T>, grads: &mut Grads<T>) {
        let (va, vb) = (self.value(a), self.value(b));
        let (want_a, want_b) = (self.rg(a), self.rg(b));
        let mut ga = vec![T::zero(); if want_a { va.len() } else { 0 }];
        let mut gb = vec![T::zero(); if want_b { vb.len() } else { 0 }];
        let (xa, xb, gv) = (va.data(), vb.data(), g.data());
        broadcast_for_each(out_shape, va.shape(), vb.shape(), |i, ia, ib| {
            let gi = gv[i];
            let (da, db) = match kind {
                Binary::Add => (gi, gi),
                Binary::Sub => (gi, -gi),
                Binary::Mul => (gi * xb[ib], gi * xa[ia]),
                Binary::Div => (gi / xb[ib], -gi * xa[ia] / (xb[ib] * xb[ib])),
            };
            if want_a {
                ga[ia] += da;
            }
            if want_b {
                gb[ib] += db;
            }
        });
        if want_a {
            accumulate(grads, a, from_vec(va.shape(), ga));
        }
        if want_b {
            accumulate(grads, b, from_vec(vb.shape(), gb));
        }
    }
}

fn channel_sums<T: Scalar>(g: &[T], batch: usize, channels: usize, plane: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); channels];
    for i in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let base = (i * channels + c) * plane;
            *o += g[base..base + plane].iter().copied().sum::<T>();
        }
    }
    from_vec(&[channels], out)
}
