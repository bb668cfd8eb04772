//! Operation set: forward evaluation, shape rules and vector-Jacobian products.

use std::fmt;
use std::str::FromStr;

use super::tensor::{axis_split, row_major_strides, Real, Tensor};
use super::AutodiffError;

/// Lower bound applied to every log argument.
pub const LOG_EPS: f64 = 1e-12;

/// Norm product below which a cosine similarity is defined as zero.
const COSINE_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Matmul,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Gelu,
    Mean,
    Sum,
    Reshape,
    Transpose,
    Concat,
    Softmax,
    LogSoftmax,
    LogClamped,
    Upsample2d,
    PatchMerge2d,
    Cosine,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Matmul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Gelu,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::Concat,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::LogClamped,
        OpKind::Upsample2d,
        OpKind::PatchMerge2d,
        OpKind::Cosine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Matmul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::LogClamped => "log_clamped",
            OpKind::Upsample2d => "upsample2d",
            OpKind::PatchMerge2d => "patch_merge2d",
            OpKind::Cosine => "cosine",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| AutodiffError::UnknownKind(s.to_string()))
    }
}

/// An operation together with its static attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// `[m, k] x [k, n] -> [m, n]`
    Matmul,
    Add,
    Sub,
    /// Element-wise product.
    Mul,
    /// Multiplication by a constant.
    Scale(f64),
    Relu,
    /// Tanh approximation of GELU.
    Gelu,
    /// Mean over the listed axes, which are removed from the shape.
    Mean(Vec<usize>),
    Sum(Vec<usize>),
    Reshape(Vec<usize>),
    /// Output axis `i` is input axis `perm[i]`.
    Transpose(Vec<usize>),
    Concat(usize),
    Softmax(usize),
    LogSoftmax(usize),
    /// `ln(max(x, LOG_EPS))`
    LogClamped,
    /// Nearest-neighbour upsampling of a `[h, w, c]` map.
    Upsample2d(usize),
    /// Space-to-depth on a `[h, w, c]` map: each `f x f` block becomes one
    /// position with channel index `(dy * f + dx) * c + ch`.
    PatchMerge2d(usize),
    /// Cosine similarity of two same-shaped tensors along an axis, which is
    /// removed from the shape. Zero-norm lines have similarity 0.
    Cosine(usize),
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Matmul => OpKind::Matmul,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Scale(_) => OpKind::Scale,
            Op::Relu => OpKind::Relu,
            Op::Gelu => OpKind::Gelu,
            Op::Mean(_) => OpKind::Mean,
            Op::Sum(_) => OpKind::Sum,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Concat(_) => OpKind::Concat,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LogSoftmax(_) => OpKind::LogSoftmax,
            Op::LogClamped => OpKind::LogClamped,
            Op::Upsample2d(_) => OpKind::Upsample2d,
            Op::PatchMerge2d(_) => OpKind::PatchMerge2d,
            Op::Cosine(_) => OpKind::Cosine,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Op::Matmul | Op::Add | Op::Sub | Op::Mul | Op::Cosine(_) => Some(2),
            Op::Concat(_) => None,
            _ => Some(1),
        }
    }

    fn attr_err(&self, detail: impl Into<String>) -> AutodiffError {
        AutodiffError::InvalidAttr {
            kind: self.kind(),
            detail: detail.into(),
        }
    }

    fn mismatch(&self, left: &[usize], right: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            kind: self.kind(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Evaluates the operation.
    pub fn forward<T: Real>(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError> {
        match self.arity() {
            Some(n) if inputs.len() != n => {
                return Err(AutodiffError::Arity {
                    kind: self.kind(),
                    expected: n,
                    got: inputs.len(),
                })
            }
            None if inputs.is_empty() => {
                return Err(AutodiffError::Arity {
                    kind: self.kind(),
                    expected: 1,
                    got: 0,
                })
            }
            _ => {}
        }
        match self {
            Op::Matmul => matmul(self, inputs[0], inputs[1]),
            Op::Add | Op::Sub | Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(self.mismatch(a.shape(), b.shape()));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| match self {
                        Op::Add => x + y,
                        Op::Sub => x - y,
                        _ => x * y,
                    })
                    .collect();
                Tensor::new(a.shape(), data)
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                Ok(inputs[0].map(|v| v * c))
            }
            Op::Relu => Ok(inputs[0].map(|v| if v.is_nan() { v } else { v.max(T::zero()) })),
            Op::Gelu => Ok(inputs[0].map(gelu)),
            Op::Mean(axes) | Op::Sum(axes) => {
                let x = inputs[0];
                let (out_shape, map) = reduce_map(self, x.shape(), axes)?;
                let mut out = Tensor::zeros(&out_shape);
                let o = out.data_mut();
                for (i, &v) in x.data().iter().enumerate() {
                    o[map[i]] = o[map[i]] + v;
                }
                if let Op::Mean(_) = self {
                    let count = T::from_f64((x.len() / o.len().max(1)) as f64);
                    o.iter_mut().for_each(|v| *v = *v / count);
                }
                Ok(out)
            }
            Op::Reshape(shape) => {
                let x = inputs[0];
                let n: usize = shape.iter().product();
                if n != x.len() || shape.contains(&0) {
                    return Err(self.mismatch(x.shape(), shape));
                }
                x.reshaped(shape)
            }
            Op::Transpose(perm) => {
                let x = inputs[0];
                check_perm(self, x.shape(), perm)?;
                Ok(transpose(x, perm))
            }
            Op::Concat(axis) => concat(self, inputs, *axis),
            Op::Softmax(axis) | Op::LogSoftmax(axis) => {
                let x = inputs[0];
                if *axis >= x.rank() {
                    return Err(self.attr_err(format!("axis {axis} out of range for {:?}", x.shape())));
                }
                let log = matches!(self, Op::LogSoftmax(_));
                Ok(softmax(x, *axis, log))
            }
            Op::LogClamped => {
                let eps = T::from_f64(LOG_EPS);
                // NaN must survive the clamp
                Ok(inputs[0].map(|v| if v.is_nan() { v } else { v.max(eps).ln() }))
            }
            Op::Upsample2d(f) => {
                let x = inputs[0];
                if x.rank() != 3 || *f == 0 {
                    return Err(self.attr_err(format!("needs [h, w, c] and factor > 0, got {:?} by {f}", x.shape())));
                }
                Ok(upsample(x, *f))
            }
            Op::PatchMerge2d(f) => {
                let x = inputs[0];
                if x.rank() != 3 || *f == 0 || !x.shape()[0].is_multiple_of(*f) || !x.shape()[1].is_multiple_of(*f) {
                    return Err(self.attr_err(format!(
                        "needs [h, w, c] with h and w divisible by {f}, got {:?}",
                        x.shape()
                    )));
                }
                Ok(patch_merge(x, *f))
            }
            Op::Cosine(axis) => {
                let (a, b) = (inputs[0], inputs[1]);
                if a.shape() != b.shape() {
                    return Err(self.mismatch(a.shape(), b.shape()));
                }
                if *axis >= a.rank() {
                    return Err(self.attr_err(format!("axis {axis} out of range for {:?}", a.shape())));
                }
                Ok(cosine_forward(a, b, *axis))
            }
        }
    }

    /// Vector-Jacobian product: gradients for each input given the output
    /// gradient `g`. `out` is the forward result.
    pub(crate) fn backward<T: Real>(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
    ) -> Vec<Tensor<T>> {
        match self {
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let mut ga = vec![T::zero(); m * k];
                let mut gb = vec![T::zero(); k * n];
                for i in 0..m {
                    let grow = &gd[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc = acc + grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                        let av = ad[i * k + p];
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] = gbrow[j] + av * grow[j];
                        }
                    }
                }
                vec![
                    Tensor::new(a.shape(), ga).expect("shape"),
                    Tensor::new(b.shape(), gb).expect("shape"),
                ]
            }
            Op::Add => vec![g.clone(), g.clone()],
            Op::Sub => vec![g.clone(), g.map(|v| -v)],
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                vec![zip(g, b, |x, y| x * y), zip(g, a, |x, y| x * y)]
            }
            Op::Scale(c) => {
                let c = T::from_f64(*c);
                vec![g.map(|v| v * c)]
            }
            Op::Relu => vec![zip(g, inputs[0], |gv, x| if x > T::zero() { gv } else { T::zero() })],
            Op::Gelu => vec![zip(g, inputs[0], |gv, x| gv * gelu_grad(x))],
            Op::Mean(axes) | Op::Sum(axes) => {
                let x = inputs[0];
                let (_, map) = reduce_map(self, x.shape(), axes).expect("validated in forward");
                let scale = match self {
                    Op::Mean(_) => T::one() / T::from_f64((x.len() / g.len().max(1)) as f64),
                    _ => T::one(),
                };
                let data = map.iter().map(|&o| g.data()[o] * scale).collect();
                vec![Tensor::new(x.shape(), data).expect("shape")]
            }
            Op::Reshape(_) => vec![g.reshaped(inputs[0].shape()).expect("shape")],
            Op::Transpose(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![transpose(g, &inv)]
            }
            Op::Concat(axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis];
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|x| {
                        let len = x.shape()[*axis];
                        let mut data = Vec::with_capacity(x.len());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        offset += len;
                        Tensor::new(x.shape(), data).expect("shape")
                    })
                    .collect()
            }
            Op::Softmax(axis) => {
                // dx = y * (g - sum(g * y))
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, j| acc + gd[idx(j)] * y[idx(j)]);
                        for j in 0..len {
                            dx[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                vec![Tensor::new(out.shape(), dx).expect("shape")]
            }
            Op::LogSoftmax(axis) => {
                // dx = g - softmax * sum(g)
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let (y, gd) = (out.data(), g.data());
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total = (0..len).fold(T::zero(), |acc, j| acc + gd[idx(j)]);
                        for j in 0..len {
                            dx[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                vec![Tensor::new(out.shape(), dx).expect("shape")]
            }
            Op::LogClamped => {
                let eps = T::from_f64(LOG_EPS);
                vec![zip(g, inputs[0], |gv, x| if x > eps || x.is_nan() { gv / x } else { T::zero() })]
            }
            Op::Upsample2d(f) => {
                let x = inputs[0];
                let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let wo = w * f;
                let mut dx = vec![T::zero(); x.len()];
                for y in 0..h * f {
                    for xx in 0..wo {
                        let src = ((y / f) * w + xx / f) * c;
                        let dst = (y * wo + xx) * c;
                        for ch in 0..c {
                            dx[src + ch] = dx[src + ch] + g.data()[dst + ch];
                        }
                    }
                }
                vec![Tensor::new(x.shape(), dx).expect("shape")]
            }
            Op::PatchMerge2d(f) => vec![g.patch_split_2d(*f).expect("shape")],
            Op::Cosine(axis) => {
                let (a, b) = (inputs[0], inputs[1]);
                let (outer, len, inner) = axis_split(a.shape(), *axis);
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let mut ga = vec![T::zero(); a.len()];
                let mut gb = vec![T::zero(); b.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let (dot, na2, nb2) = line_stats(ad, bd, len, idx);
                        let (na, nb) = (na2.sqrt(), nb2.sqrt());
                        if (na * nb).as_f64() <= COSINE_EPS {
                            continue;
                        }
                        let c = dot / (na * nb);
                        let gv = gd[o * inner + i];
                        for j in 0..len {
                            let (x, y) = (ad[idx(j)], bd[idx(j)]);
                            ga[idx(j)] = gv * (y / (na * nb) - c * x / na2);
                            gb[idx(j)] = gv * (x / (na * nb) - c * y / nb2);
                        }
                    }
                }
                vec![
                    Tensor::new(a.shape(), ga).expect("shape"),
                    Tensor::new(b.shape(), gb).expect("shape"),
                ]
            }
        }
    }
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(SQRT_2_OVER_PI) * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let s = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_C);
    let t = (s * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * s * (T::one() + T::from_f64(3.0) * c * x * x)
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn matmul<T: Real>(op: &Op, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, AutodiffError> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(op.mismatch(a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] = row[j] + av * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Output shape of a reduction and, for every input position, the flat
/// index of the output position it contributes to.
fn reduce_map(op: &Op, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>), AutodiffError> {
    let mut reduced = vec![false; shape.len()];
    for &ax in axes {
        if ax >= shape.len() || reduced[ax] {
            return Err(op.attr_err(format!("bad reduction axes {axes:?} for shape {shape:?}")));
        }
        reduced[ax] = true;
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, &r)| !r)
        .map(|(&d, _)| d)
        .collect();
    let out_strides = row_major_strides(&out_shape);
    // stride each input axis contributes to the output index (0 if reduced)
    let mut contrib = Vec::with_capacity(shape.len());
    let mut k = 0;
    for &r in &reduced {
        if r {
            contrib.push(0);
        } else {
            contrib.push(out_strides[k]);
            k += 1;
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut index = vec![0usize; shape.len()];
    for _ in 0..n {
        map.push(index.iter().zip(&contrib).map(|(i, s)| i * s).sum());
        for ax in (0..shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Ok((out_shape, map))
}

fn check_perm(op: &Op, shape: &[usize], perm: &[usize]) -> Result<(), AutodiffError> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(op.attr_err(format!("permutation {perm:?} does not match rank of {shape:?}")));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(op.attr_err(format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(())
}

fn transpose<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = row_major_strides(shape);
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut index = vec![0usize; out_shape.len()];
    for _ in 0..x.len() {
        let src: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(x.data()[src]);
        for ax in (0..out_shape.len()).rev() {
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permuted shape")
}

fn concat<T: Real>(op: &Op, inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>, AutodiffError> {
    let first = inputs[0].shape();
    if axis >= first.len() {
        return Err(op.attr_err(format!("axis {axis} out of range for {first:?}")));
    }
    for x in &inputs[1..] {
        let s = x.shape();
        let compatible = s.len() == first.len()
            && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(op.mismatch(first, s));
        }
    }
    let mut out_shape = first.to_vec();
    out_shape[axis] = inputs.iter().map(|x| x.shape()[axis]).sum();
    let (outer, _, inner) = axis_split(first, axis);
    let mut data = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for x in inputs {
            let chunk = x.shape()[axis] * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&out_shape, data)
}

fn softmax<T: Real>(x: &Tensor<T>, axis: usize, log: bool) -> Tensor<T> {
    let (outer, len, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xd[idx(j)]));
            let denom = (0..len).fold(T::zero(), |acc, j| acc + (xd[idx(j)] - max).exp());
            let log_denom = denom.ln();
            for j in 0..len {
                let shifted = xd[idx(j)] - max;
                out[idx(j)] = if log {
                    shifted - log_denom
                } else {
                    shifted.exp() / denom
                };
            }
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

fn upsample<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h * f, w * f);
    let mut out = Vec::with_capacity(ho * wo * c);
    for y in 0..ho {
        for xx in 0..wo {
            let src = ((y / f) * w + xx / f) * c;
            out.extend_from_slice(&x.data()[src..src + c]);
        }
    }
    Tensor::new(&[ho, wo, c], out).expect("upsampled shape")
}

fn patch_merge<T: Real>(x: &Tensor<T>, f: usize) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (hs, ws) = (h / f, w / f);
    let mut out = Vec::with_capacity(x.len());
    for ys in 0..hs {
        for xs in 0..ws {
            for dy in 0..f {
                for dx in 0..f {
                    let src = ((ys * f + dy) * w + xs * f + dx) * c;
                    out.extend_from_slice(&x.data()[src..src + c]);
                }
            }
        }
    }
    Tensor::new(&[hs, ws, f * f * c], out).expect("merged shape")
}

fn line_stats<T: Real>(a: &[T], b: &[T], len: usize, idx: impl Fn(usize) -> usize) -> (T, T, T) {
    (0..len).fold((T::zero(), T::zero(), T::zero()), |(d, na, nb), j| {
        let (x, y) = (a[idx(j)], b[idx(j)]);
        (d + x * y, na + x * x, nb + y * y)
    })
}

fn cosine_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_split(a.shape(), axis);
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * len + j) * inner + i;
            let (dot, na2, nb2) = line_stats(a.data(), b.data(), len, idx);
            let norm = na2.sqrt() * nb2.sqrt();
            out.push(if norm.as_f64() <= COSINE_EPS { T::zero() } else { dot / norm });
        }
    }
    let mut shape = a.shape().to_vec();
    shape.remove(axis);
    Tensor::new(&shape, out).expect("reduced shape")
}

/// Whether a cosine line has (numerically) zero norm on either side.
pub(crate) fn cosine_degenerate<T: Real>(a: &[T], b: &[T]) -> bool {
    let na = a.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    let nb = b.iter().fold(T::zero(), |acc, &x| acc + x * x).sqrt();
    (na * nb).as_f64() <= COSINE_EPS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, v).unwrap()
    }

    #[test]
    fn matmul_of_ones() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::<f64>::ones(&[3, 4]);
        let c = Op::Matmul.forward(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 4]);
        assert!(c.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn shape_mismatch_names_kind_and_shapes() {
        let a = Tensor::<f64>::ones(&[2, 3]);
        let b = Tensor::<f64>::ones(&[2, 3]);
        let err = Op::Matmul.forward(&[&a, &b]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        assert!(Op::Add.forward(&[&a, &Tensor::ones(&[3, 2])]).is_err());
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("conv2d".parse::<OpKind>(), Err(AutodiffError::UnknownKind(_))));
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
    }

    #[test]
    fn arity_checked() {
        let a = Tensor::<f64>::ones(&[2]);
        assert!(matches!(Op::Add.forward(&[&a]), Err(AutodiffError::Arity { .. })));
        assert!(matches!(Op::Concat(0).forward::<f64>(&[]), Err(AutodiffError::Arity { .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = Op::Softmax(0).forward(&[&t(&[3], &[0.0, 0.0, 0.0])]).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_clamped_floors_argument() {
        let y = Op::LogClamped.forward(&[&t(&[2], &[0.0, 1.0])]).unwrap();
        assert!((y.data()[0] - LOG_EPS.ln()).abs() < 1e-9);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn clamps_keep_nan() {
        let x = t(&[2], &[f64::NAN, -1.0]);
        for op in [Op::LogClamped, Op::Relu] {
            let y = op.forward(&[&x]).unwrap();
            assert!(y.data()[0].is_nan(), "{op:?}");
            assert!(y.data()[1].is_finite());
        }
    }

    #[test]
    fn patch_merge_by_index_arithmetic() {
        // 4x4x1 grid with value = 10*row + col
        let vals: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let x = t(&[4, 4, 1], &vals);
        let y = Op::PatchMerge2d(2).forward(&[&x]).unwrap();
        assert_eq!(y.shape(), &[2, 2, 4]);
        // channel 0: top-left pixel of each block
        let ch0: Vec<f64> = (0..4).map(|p| y.data()[p * 4]).collect();
        assert_eq!(ch0, vec![0.0, 2.0, 20.0, 22.0]);
        // block (1, 0) holds rows 2-3, cols 0-1 in (dy, dx) order
        assert_eq!(&y.data()[8..12], &[20.0, 21.0, 30.0, 31.0]);
        assert_eq!(y.patch_split_2d(2).unwrap(), x);
    }

    #[test]
    fn patch_merge_equals_reshape_transpose() {
        let vals: Vec<f64> = (0..4 * 6 * 3).map(|i| i as f64).collect();
        let x = t(&[4, 6, 3], &vals);
        let merged = Op::PatchMerge2d(2).forward(&[&x]).unwrap();
        let r = Op::Reshape(vec![2, 2, 3, 2, 3]).forward(&[&x]).unwrap();
        let p = Op::Transpose(vec![0, 2, 1, 3, 4]).forward(&[&r]).unwrap();
        let alt = Op::Reshape(vec![2, 3, 12]).forward(&[&p]).unwrap();
        assert_eq!(merged, alt);
    }

    #[test]
    fn reductions_drop_axes() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Op::Sum(vec![0]).forward(&[&x]).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(Op::Mean(vec![1]).forward(&[&x]).unwrap().data(), &[2.0, 5.0]);
        let all = Op::Sum(vec![0, 1]).forward(&[&x]).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.item(), Some(21.0));
        assert!(Op::Sum(vec![2]).forward(&[&x]).is_err());
        assert!(Op::Sum(vec![0, 0]).forward(&[&x]).is_err());
    }

    #[test]
    fn concat_and_transpose() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let c = Op::Concat(1).forward(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let tr = Op::Transpose(vec![1, 0]).forward(&[&c]).unwrap();
        assert_eq!(tr.shape(), &[3, 2]);
        assert_eq!(tr.data(), &[1.0, 2.0, 3.0, 5.0, 4.0, 6.0]);
        assert!(Op::Concat(0).forward(&[&a, &b]).is_err());
    }

    #[test]
    fn upsample_repeats_pixels() {
        let x = t(&[1, 2, 1], &[1.0, 2.0]);
        let y = Op::Upsample2d(2).forward(&[&x]).unwrap();
        assert_eq!(y.shape(), &[2, 4, 1]);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        let a = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let c = Op::Cosine(0).forward(&[&a, &b]).unwrap();
        assert_eq!(c.data()[0], 0.0);
        assert!((c.data()[1] - 1.0).abs() < 1e-15);
    }
}
