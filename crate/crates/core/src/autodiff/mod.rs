//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert list: every primitive appends one node holding
//! its output value and the inputs it needs for the adjoint. Node ids only
//! grow, so the list is topologically ordered by construction and a
//! backward sweep is a single reverse scan.

mod backward;
mod kernels;

pub use kernels::ConvGeometry;

use kernels::{axis_split, broadcast_for_each, broadcast_shape, col2im, im2col};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Tanh,
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    StopGradient,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Computation graph recording primitive applications for one forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose adjoint is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated adjoint of a leaf (or of the root of a sweep).
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Value identical to `x`; contributes nothing to `x`'s adjoint.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient, false)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match kind {
            Unary::Neg => |a| -a,
            Unary::Exp => |a| a.exp(),
            Unary::Ln => |a| a.ln(),
            Unary::Sqrt => |a| a.sqrt(),
            Unary::Square => |a| a * a,
            Unary::Tanh => |a| a.tanh(),
            Unary::Sigmoid => |a| T::one() / (T::one() + (-a).exp()),
            Unary::Relu => |a| if a > T::zero() { a } else { T::zero() },
        };
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, Op::Unary(kind, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|a| a * c);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|a| a + c);
        let rg = self.rg(x);
        self.push(value, Op::AddScalar(x), rg)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let Some(out_shape) = broadcast_shape(sa, sb) else {
            return dim_err("broadcast", sa, sb);
        };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        let f: fn(T, T) -> T = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        if sa == sb {
            for ((o, &x), &y) in out.iter_mut().zip(va).zip(vb) {
                *o = f(x, y);
            }
        } else {
            broadcast_for_each(&out_shape, sa, sb, |i, ia, ib| out[i] = f(va[ia], vb[ib]));
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Sum over every element, producing a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err("sum_axis", &shape, &[axis]);
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let row = &src[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SumAxis { x, axis }, rg))
    }

    /// `a[.., m, k] · b[k, n]`: leading axes of `a` are treated as extra rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return dim_err("matmul", &sa, &sb);
        }
        let (k, n) = (sb[0], sb[1]);
        let m = numel(&sa) / k;
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        let mut out_shape = sa;
        *out_shape.last_mut().unwrap() = n;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Batched product `a[B, m, k] · b[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err("bmm", &sa, &sb);
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &va[i * m * k..],
                k,
                1,
                &vb[i * k * n..],
                n,
                1,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let value = Tensor::new(&[batch, m, n], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Bmm(a, b), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err("transpose", &shape, &[]);
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let value = Tensor::new(
            &{
                let mut s = shape.clone();
                s.swap(r - 2, r - 1);
                s
            },
            transpose_blocks(self.value(x).data(), m, n),
        )?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::TransposeLast2(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero inputs".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", &base, &[axis]);
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err("concat", &base, s);
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Sub-range `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err("narrow", &shape, &[axis, start, len]);
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Softmax along `axis` with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err("softmax", &shape, &[axis]);
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(out[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (out[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    out[at(a)] /= total;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        if self.shape(gain) != [width] || self.shape(bias) != [width] {
            return dim_err("layer_norm", &shape, self.shape(gain));
        }
        let rows = numel(&shape) / width;
        let src = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut normalized = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        let w = T::lit(width as f64);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..width {
                let xh = (row[j] - mean) * inv;
                normalized[r * width + j] = xh;
                out[r * width + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Batched cross-correlation: `x[B, C_in, H, W]`, `w[C_out, C_in, k, k]`,
    /// optional per-channel `b[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return dim_err("conv2d", &sx, &sw);
        }
        let (batch, c_out) = (sx[0], sw[0]);
        let Some(geom) = ConvGeometry::new(sx[1], sx[2], sx[3], sw[2], stride, padding) else {
            return dim_err("conv2d", &sx, &sw);
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return dim_err("conv2d bias", &sw, self.shape(b));
            }
        }
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); batch * c_out * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let in_plane = geom.channels * geom.h * geom.w;
        for i in 0..batch {
            im2col(&xv[i * in_plane..(i + 1) * in_plane], &geom, &mut cols);
            let dst = &mut out[i * c_out * p..(i + 1) * c_out * p];
            T::gemm(c_out, rows, p, T::one(), wv, rows, 1, &cols, p, 1, T::zero(), dst, p, 1);
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), p);
            }
        }
        let value = Tensor::new(&[batch, c_out, geom.ho, geom.wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Batched transposed convolution (adjoint of [`Graph::conv2d`]):
    /// `x[B, C_in, H, W]`, `w[C_in, C_out, k, k]`, output extent
    /// `(H - 1)·stride - 2·padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[0] != sx[1] || sw[2] != sw[3] {
            return dim_err("conv_transpose2d", &sx, &sw);
        }
        let (batch, c_in, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (c_out, k) = (sw[1], sw[2]);
        let full = |n: usize| ((n - 1) * stride + k + output_padding).checked_sub(2 * padding);
        let (Some(ho), Some(wo)) = (full(h), full(wd)) else {
            return dim_err("conv_transpose2d", &sx, &sw);
        };
        let geom = match ConvGeometry::new(c_out, ho, wo, k, stride, padding) {
            Some(g) if g.ho == h && g.wo == wd && output_padding < stride.max(1) => g,
            _ => return dim_err("conv_transpose2d", &sx, &sw),
        };
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return dim_err("conv_transpose2d bias", &sw, self.shape(b));
            }
        }
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let plane = ho * wo;
        let mut cols = vec![T::zero(); rows * p];
        let mut out = vec![T::zero(); batch * c_out * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..batch {
            // cols = wᵀ · x_i, with w viewed as [C_in, C_out·k·k].
            T::gemm(
                rows,
                c_in,
                p,
                T::one(),
                wv,
                1,
                rows,
                &xv[i * c_in * p..],
                p,
                1,
                T::zero(),
                &mut cols,
                p,
                1,
            );
            let dst = &mut out[i * c_out * plane..(i + 1) * c_out * plane];
            col2im(&cols, &geom, dst);
            if let Some(b) = b {
                add_channel_bias(dst, self.value(b).data(), plane);
            }
        }
        let value = Tensor::new(&[batch, c_out, ho, wo], out)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom }, rg))
    }
}

fn add_channel_bias<T: Scalar>(dst: &mut [T], bias: &[T], plane: usize) {
    for (c, &bv) in bias.iter().enumerate() {
        for v in &mut dst[c * plane..(c + 1) * plane] {
            *v += bv;
        }
    }
}

/// Transposes every trailing `m × n` block of a row-major buffer.
fn transpose_blocks<T: Scalar>(src: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (blk, dst) in src.chunks(m * n).zip(out.chunks_mut(m * n)) {
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = blk[i * n + j];
            }
        }
    }
    out
}
