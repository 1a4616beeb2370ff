use super::{for_each_chunk, numel, Element, Tensor};
use crate::error::{Error, Result};

/// Maps flat output indices to flat source indices under trailing-axis
/// broadcasting.
enum Bcast {
    Identity,
    Modulo(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(src: &[usize], out: &[usize]) -> Self {
        if src == out {
            return Bcast::Identity;
        }
        let n = numel(src);
        let first = src.iter().position(|&d| d != 1).unwrap_or(src.len());
        let trimmed = &src[first..];
        if trimmed.len() <= out.len() && trimmed == &out[out.len() - trimmed.len()..] {
            return Bcast::Modulo(n);
        }
        let offset = out.len() - src.len();
        let mut src_strides = vec![0usize; out.len()];
        let mut stride = 1;
        for (i, &d) in src.iter().enumerate().rev() {
            src_strides[offset + i] = if d == 1 { 0 } else { stride };
            stride *= d;
        }
        let total = numel(out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; out.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum());
            for ax in (0..out.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    fn idx(&self, i: usize) -> usize {
        match self {
            Bcast::Identity => i,
            Bcast::Modulo(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }

    /// Sums `g` (output-shaped) back onto a source of `len` elements.
    fn reduce<T: Element>(&self, g: &[T], len: usize, mut f: impl FnMut(usize) -> T) -> Vec<T> {
        match self {
            Bcast::Identity => (0..g.len()).map(|i| g[i] * f(i)).collect(),
            _ => {
                let mut acc = vec![T::zero(); len];
                for (i, &gi) in g.iter().enumerate() {
                    let j = self.idx(i);
                    acc[j] = acc[j] + gi * f(i);
                }
                acc
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[inline]
fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Element> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, kind: BinKind) -> Result<Tensor<T>> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let shape = broadcast_shape(name, self.shape(), rhs.shape())?;
        let ba = Bcast::new(self.shape(), &shape);
        let bb = Bcast::new(rhs.shape(), &shape);
        let (a, b) = (self.data(), rhs.data());
        let mut out = vec![T::zero(); numel(&shape)];
        const CHUNK: usize = 4096;
        for_each_chunk(&mut out, CHUNK, |ci, chunk| {
            let base = ci * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                let i = base + k;
                let (x, y) = (a[ba.idx(i)], b[bb.idx(i)]);
                *o = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                };
            }
        });
        let (lhs, rhs_t) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            name,
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let (a, b) = (lhs.data(), rhs_t.data());
                let (na, nb) = (a.len(), b.len());
                let want_a = lhs.requires_grad();
                let want_b = rhs_t.requires_grad();
                let ga = want_a.then(|| match kind {
                    BinKind::Add | BinKind::Sub => ba.reduce(g, na, |_| T::one()),
                    BinKind::Mul => ba.reduce(g, na, |i| b[bb.idx(i)]),
                    BinKind::Div => ba.reduce(g, na, |i| T::one() / b[bb.idx(i)]),
                });
                let gb = want_b.then(|| match kind {
                    BinKind::Add => bb.reduce(g, nb, |_| T::one()),
                    BinKind::Sub => bb.reduce(g, nb, |_| -T::one()),
                    BinKind::Mul => bb.reduce(g, nb, |i| a[ba.idx(i)]),
                    BinKind::Div => bb.reduce(g, nb, |i| {
                        let y = b[bb.idx(i)];
                        -a[ba.idx(i)] / (y * y)
                    }),
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Div)
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary<F, D>(&self, name: &'static str, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T + Send + Sync,
        D: Fn(T, T) -> T + 'static,
    {
        let src = self.data();
        let mut out = vec![T::zero(); src.len()];
        const CHUNK: usize = 4096;
        for_each_chunk(&mut out, CHUNK, |ci, chunk| {
            let base = ci * CHUNK;
            for (k, o) in chunk.iter_mut().enumerate() {
                *o = f(src[base + k]);
            }
        });
        let input = self.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y| {
                let x = input.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(y))
                        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                        .collect(),
                )]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::from_f64(c);
        self.unary("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn reciprocal(&self) -> Tensor<T> {
        self.unary("reciprocal", |x| x.recip(), |_, y| -(y * y))
    }

    pub fn square(&self) -> Tensor<T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    /// `|x|`, with derivative 0 at 0.
    pub fn abs(&self) -> Tensor<T> {
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

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`
    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Tensor<T> {
        const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
        self.unary(
            "gelu",
            |x| {
                let v = x.as_f64();
                T::from_f64(0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)))
            },
            |x, _| {
                let v = x.as_f64();
                let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                T::from_f64(cdf + v * FRAC_1_SQRT_2PI * (-0.5 * v * v).exp())
            },
        )
    }

    /// `ln(1 + e^x)`, linear above 20.
    pub fn softplus(&self) -> Tensor<T> {
        let threshold = T::from_f64(20.0);
        self.unary(
            "softplus",
            move |x| if x > threshold { x } else { x.exp().ln_1p() },
            |x, _| sigmoid(x),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel().max(1);
        let total = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let inv = T::one() / T::from_f64(n as f64);
        Tensor::from_op(
            "mean",
            Vec::new(),
            vec![total * inv],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0] * inv; n])]),
        )
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("sum_axis", self.shape(), axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &x[(o * len + a) * inner..][..inner];
                let dst = &mut out[o * inner..][..inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Ok(Tensor::from_op(
            "sum_axis",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        gx[(o * len + a) * inner..][..inner].copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("mean_axis", self.shape(), axis)?;
        let len = self.shape()[axis].max(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k, n) = match (self.shape(), rhs.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (a, b) => return Err(Error::shape("matmul", a, b)),
        };
        let mut out = vec![T::zero(); m * n];
        gemm_rows(m, k, n, self.data(), (k as isize, 1), rhs.data(), (n as isize, 1), &mut out);
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            "matmul",
            vec![m, n],
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| {
                    // g[m,n] @ b^T
                    let mut ga = vec![T::zero(); m * k];
                    gemm_rows(m, n, k, g, (n as isize, 1), b.data(), (1, n as isize), &mut ga);
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    // a^T @ g[m,n]
                    let mut gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x @ weight + bias` over the last axis; `weight` is `[in, out]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let shape = self.shape();
        let (Some(&fan_in), [w_in, w_out]) = (shape.last(), weight.shape()) else {
            return Err(Error::shape("linear", shape, weight.shape()));
        };
        if fan_in != *w_in {
            return Err(Error::shape("linear", shape, weight.shape()));
        }
        let rows = self.numel() / fan_in.max(1);
        let mut y = self.reshape(&[rows, fan_in])?.matmul(weight)?;
        if let Some(b) = bias {
            if b.shape() != [*w_out] {
                return Err(Error::shape("linear", weight.shape(), b.shape()));
            }
            y = y.add(b)?;
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = *w_out;
        y.reshape(&out_shape)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {} axes", shape.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let src_strides = strides(shape);
        let gather: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
        let index = permute_index(&out_shape, &gather);
        let x = self.data();
        let out: Vec<T> = index.iter().map(|&j| x[j]).collect();
        let n = out.len();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); n];
                for (i, &j) in index.iter().enumerate() {
                    gx[j] = g[i];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        check_axis("transpose", self.shape(), a.max(b))?;
        let mut perm: Vec<usize> = (0..self.ndim()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Result<Tensor<T>> {
        check_axis("slice", self.shape(), axis)?;
        let shape = self.shape().to_vec();
        if start > end || end > shape[axis] {
            return Err(Error::invalid("slice", format!("range {start}..{end} out of bounds for axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let width = (end - start) * inner;
        let x = self.data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * len + start) * inner..][..width]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        Ok(Tensor::from_op(
            "slice",
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    gx[(o * len + start) * inner..][..width].copy_from_slice(&g[o * width..][..width]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        check_axis("concat", first.shape(), axis)?;
        for p in &parts[1..] {
            let ok = p.ndim() == first.ndim()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let shape = first.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&p.data()[o * w..][..w]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = total / inner.max(1);
        Ok(Tensor::from_op(
            "concat",
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |g, _| {
                let mut grads: Vec<Vec<T>> = widths.iter().map(|&w| Vec::with_capacity(outer * w)).collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &w) in grads.iter_mut().zip(&widths) {
                        gp.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Reverses element order along `axis`.
    pub fn flip(&self, axis: usize) -> Result<Tensor<T>> {
        check_axis("flip", self.shape(), axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let flip = move |src: &[T]| {
            let mut out = Vec::with_capacity(src.len());
            for o in 0..outer {
                for a in (0..len).rev() {
                    out.extend_from_slice(&src[(o * len + a) * inner..][..inner]);
                }
            }
            out
        };
        let out = flip(self.data());
        Ok(Tensor::from_op(
            "flip",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(flip(g))]),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        let target = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if target != shape {
            return Err(Error::shape("broadcast_to", self.shape(), shape));
        }
        let map = Bcast::new(self.shape(), shape);
        let x = self.data();
        let out: Vec<T> = (0..numel(shape)).map(|i| x[map.idx(i)]).collect();
        let n = self.numel();
        Ok(Tensor::from_op(
            "broadcast_to",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(map.reduce(g, n, |_| T::one()))]),
        ))
    }
}

/// Flat source offsets for every output position of a strided gather.
fn permute_index(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let total = numel(out_shape);
    let mut index = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        index.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= gather[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    index
}

/// Row-blocked GEMM into a zeroed `[m, n]` output. The block size is fixed so
/// the result does not depend on thread count.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_rows<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    out: &mut [T],
) {
    const ROWS: usize = 128;
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for_each_chunk(out, ROWS * n, |ci, chunk| {
        let r0 = ci * ROWS;
        let rows = chunk.len() / n;
        let a_off = (r0 as isize * a_strides.0) as usize;
        T::gemm(rows, k, n, &a[a_off..], a_strides, b, b_strides, T::zero(), chunk);
    });
}
