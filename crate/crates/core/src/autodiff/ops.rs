use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{broadcast_index, broadcast_shape, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Neg,
    Log,
    Exp,
    Sigmoid,
    Relu,
}

impl<T: Real> Tape<T> {
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out_shape = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let data: Vec<T> = if sa == sb {
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let ia = broadcast_index(sa, &out_shape);
            let ib = broadcast_index(sb, &out_shape);
            ia.iter()
                .zip(&ib)
                .map(|(&i, &j)| f(va.data()[i], vb.data()[j]))
                .collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            UnaryKind::Neg => -v,
            UnaryKind::Log => v.ln(),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
        });
        self.push(value, Op::Unary { kind, x })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::MulScalar { x, c })
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let value = self.value(x).map(|v| v.max(lo).min(hi));
        self.push(value, Op::Clamp { x, lo, hi })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, k2, n) = match (sa, sb) {
            ([m, k], [k2, n]) => (*m, *k, *k2, *n),
            _ => {
                return Err(Error::ShapeMismatch {
                    lhs: sa.to_vec(),
                    rhs: sb.to_vec(),
                })
            }
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |k: usize| base + k * inner;
                let max = (0..len).fold(T::neg_infinity(), |m, k| m.max(src[at(k)]));
                let denom: T = (0..len).map(|k| (src[at(k)] - max).exp()).sum();
                let log_denom = denom.ln();
                for k in 0..len {
                    out[at(k)] = if log {
                        src[at(k)] - max - log_denom
                    } else {
                        (src[at(k)] - max).exp() / denom
                    };
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis, log }))
    }

    /// Sum of all elements, as a one-element tensor. Elements are added in
    /// sorted order, so the result does not depend on their arrangement.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(sorted_sum(self.value(x).data()));
        self.push(value, Op::Sum { x, scale: T::one() })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).expect("count fits");
        let scale = T::one() / n;
        let value = Tensor::scalar(sorted_sum(self.value(x).data()) * scale);
        self.push(value, Op::Sum { x, scale })
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// The sub-range `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, full, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > full {
            return Err(Error::InvalidShape {
                shape,
                reason: format!(
                    "narrow {start}..{} out of range on axis {axis}",
                    start + len
                ),
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Narrow { x, axis, start }))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of zero tensors".into()))?;
        let shape0 = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&shape0, axis)?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == shape0.len()
                && s.iter()
                    .zip(&shape0)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    lhs: shape0.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = shape0;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Broadcasts `x` to `shape` under trailing-dimension rules.
    pub fn expand(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let src_shape = self.shape(x).to_vec();
        if broadcast_shape(&src_shape, &shape).as_deref() != Some(shape.as_slice()) {
            return Err(Error::ShapeMismatch {
                lhs: src_shape,
                rhs: shape,
            });
        }
        let idx = broadcast_index(&src_shape, &shape);
        let src = self.value(x).data();
        let value = Tensor::new(shape, idx.iter().map(|&i| src[i]).collect())?;
        Ok(self.push(value, Op::Expand { x }))
    }
}

fn sorted_sum<T: Real>(data: &[T]) -> T {
    let mut v = data.to_vec();
    v.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    v.into_iter().sum()
}

pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `(outer, axis_len, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Sums `g` (over the broadcast output shape) back down to `src` shape and
/// accumulates `g * scale(i_out)` into `buf`.
fn reduce_into<T: Real>(
    buf: &mut [T],
    src_shape: &[usize],
    out_shape: &[usize],
    g: &[T],
    mut scale: impl FnMut(usize) -> T,
) {
    if src_shape == out_shape {
        for (i, (d, &gi)) in buf.iter_mut().zip(g).enumerate() {
            *d = *d + gi * scale(i);
        }
    } else {
        let idx = broadcast_index(src_shape, out_shape);
        for (i, (&j, &gi)) in idx.iter().zip(g).enumerate() {
            buf[j] = buf[j] + gi * scale(i);
        }
    }
}

pub(super) fn binary_backward<T: Real>(
    tape: &Tape<T>,
    kind: BinaryKind,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (sa, sb) = (tape.shape(a).to_vec(), tape.shape(b).to_vec());
    let out_shape = broadcast_shape(&sa, &sb).expect("validated in forward");
    let (va, vb) = (tape.value(a).data(), tape.value(b).data());
    let ia = (sa != out_shape).then(|| broadcast_index(&sa, &out_shape));
    let ib = (sb != out_shape).then(|| broadcast_index(&sb, &out_shape));
    let at = |v: &[T], idx: &Option<Vec<usize>>, i: usize| match idx {
        Some(idx) => v[idx[i]],
        None => v[i],
    };

    if let Some(buf) = tape.grad_buf(grads, a) {
        match kind {
            BinaryKind::Add | BinaryKind::Sub => reduce_into(buf, &sa, &out_shape, g, |_| T::one()),
            BinaryKind::Mul => reduce_into(buf, &sa, &out_shape, g, |i| at(vb, &ib, i)),
            BinaryKind::Div => reduce_into(buf, &sa, &out_shape, g, |i| T::one() / at(vb, &ib, i)),
        }
    }
    if let Some(buf) = tape.grad_buf(grads, b) {
        match kind {
            BinaryKind::Add => reduce_into(buf, &sb, &out_shape, g, |_| T::one()),
            BinaryKind::Sub => reduce_into(buf, &sb, &out_shape, g, |_| -T::one()),
            BinaryKind::Mul => reduce_into(buf, &sb, &out_shape, g, |i| at(va, &ia, i)),
            BinaryKind::Div => reduce_into(buf, &sb, &out_shape, g, |i| {
                let y = at(vb, &ib, i);
                -at(va, &ia, i) / (y * y)
            }),
        }
    }
}

pub(super) fn unary_backward<T: Real>(
    tape: &Tape<T>,
    kind: UnaryKind,
    x: Var,
    out: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let xv = tape.value(x).data();
    let yv = out.data();
    let Some(buf) = tape.grad_buf(grads, x) else {
        return;
    };
    for i in 0..buf.len() {
        let d = match kind {
            UnaryKind::Neg => -g[i],
            UnaryKind::Log => g[i] / xv[i],
            UnaryKind::Exp => g[i] * yv[i],
            UnaryKind::Sigmoid => g[i] * yv[i] * (T::one() - yv[i]),
            // Subgradient at 0 is 0.
            UnaryKind::Relu => {
                if xv[i] > T::zero() {
                    g[i]
                } else {
                    T::zero()
                }
            }
        };
        buf[i] = buf[i] + d;
    }
}

pub(super) fn matmul_backward<T: Real>(
    tape: &Tape<T>,
    a: Var,
    b: Var,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (m, k) = (tape.shape(a)[0], tape.shape(a)[1]);
    let n = tape.shape(b)[1];
    let (va, vb) = (tape.value(a).data(), tape.value(b).data());
    if let Some(buf) = tape.grad_buf(grads, a) {
        // dA = dC * B^T
        T::gemm(m, n, k, g, false, vb, true, buf, T::one());
    }
    if let Some(buf) = tape.grad_buf(grads, b) {
        // dB = A^T * dC
        T::gemm(k, m, n, va, true, g, false, buf, T::one());
    }
}

pub(super) fn softmax_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    axis: usize,
    log: bool,
    out: &Tensor<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let (outer, len, inner) = split_axis(out.shape(), axis).expect("validated in forward");
    let y = out.data();
    let Some(buf) = tape.grad_buf(grads, x) else {
        return;
    };
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let at = |k: usize| base + k * inner;
            if log {
                let gsum: T = (0..len).map(|k| g[at(k)]).sum();
                for k in 0..len {
                    let j = at(k);
                    buf[j] = buf[j] + g[j] - y[j].exp() * gsum;
                }
            } else {
                let dot: T = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                for k in 0..len {
                    let j = at(k);
                    buf[j] = buf[j] + y[j] * (g[j] - dot);
                }
            }
        }
    }
}

pub(super) fn narrow_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let full = tape.shape(x)[axis];
    let (outer, len, inner) = split_axis(out_shape, axis).expect("validated in forward");
    let Some(buf) = tape.grad_buf(grads, x) else {
        return;
    };
    for o in 0..outer {
        let dst = (o * full + start) * inner;
        let src = o * len * inner;
        for (d, &gi) in buf[dst..dst + len * inner]
            .iter_mut()
            .zip(&g[src..src + len * inner])
        {
            *d = *d + gi;
        }
    }
}

pub(super) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    xs: &[Var],
    axis: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let shape0 = tape.shape(xs[0]);
    let (outer, _, inner) = split_axis(shape0, axis).expect("validated in forward");
    let total: usize = xs.iter().map(|&v| tape.shape(v)[axis]).sum();
    let mut offset = 0;
    for &v in xs {
        let len = tape.shape(v)[axis] * inner;
        if let Some(buf) = tape.grad_buf(grads, v) {
            for o in 0..outer {
                let src = o * total * inner + offset;
                for (d, &gi) in buf[o * len..(o + 1) * len]
                    .iter_mut()
                    .zip(&g[src..src + len])
                {
                    *d = *d + gi;
                }
            }
        }
        offset += len;
    }
}

pub(super) fn expand_backward<T: Real>(
    tape: &Tape<T>,
    x: Var,
    out_shape: &[usize],
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    let src_shape = tape.shape(x).to_vec();
    if let Some(buf) = tape.grad_buf(grads, x) {
        reduce_into(buf, &src_shape, out_shape, g, |_| T::one());
    }
}
