use crate::graph::Op;
use crate::{Graph, Real, Result, Tensor, TensorError, Var};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> TensorError {
    TensorError::InvalidShape {
        op,
        shape: shape.to_vec(),
        reason: reason.into(),
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(invalid(op, shape, "expected a rank-2 tensor")),
    }
}

fn last_axis_shape(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

/// Rows `t-1` and `t+1` of a same-padded kernel-3 window, when they exist
/// and belong to the same group as `t`.
fn conv_neighbors(t: usize, len: usize, group: Option<&[usize]>) -> (Option<usize>, Option<usize>) {
    let same = |u: usize| group.is_none_or(|g| g[u] == g[t]);
    let prev = (t > 0 && same(t - 1)).then(|| t - 1);
    let next = (t + 1 < len && same(t + 1)).then(|| t + 1);
    (prev, next)
}

fn im2col<T: Real>(x: &[T], len: usize, cin: usize, group: Option<&[usize]>) -> Vec<T> {
    let mut col = vec![T::zero(); len * 3 * cin];
    for t in 0..len {
        let (prev, next) = conv_neighbors(t, len, group);
        let dst = &mut col[t * 3 * cin..(t + 1) * 3 * cin];
        if let Some(p) = prev {
            dst[..cin].copy_from_slice(&x[p * cin..(p + 1) * cin]);
        }
        dst[cin..2 * cin].copy_from_slice(&x[t * cin..(t + 1) * cin]);
        if let Some(n) = next {
            dst[2 * cin..].copy_from_slice(&x[n * cin..(n + 1) * cin]);
        }
    }
    col
}

impl<T: Real> Graph<T> {
    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let out = Tensor::from_parts(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect());
        self.push_op(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.shape(a))?;
        let (k2, n) = matrix_dims("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        Ok(self.push_op(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        Ok(self.push_op(Tensor::from_parts(va.shape().to_vec(), data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        Ok(self.push_op(Tensor::from_parts(va.shape().to_vec(), data), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        Ok(self.push_op(Tensor::from_parts(va.shape().to_vec(), data), Op::Mul(a, b)))
    }

    /// `x[r, :] + bias` for every row of a rank-2 `x`; the only row
    /// broadcast the graph supports.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = matrix_dims("add_row", self.shape(x))?;
        if self.shape(bias) != [c] {
            return Err(mismatch("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v += bb);
        }
        Ok(self.push_op(Tensor::from_parts(vec![r, c], data), Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        Ok(self.map_unary(x, Op::Scale(x, s), |v| v * s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        Ok(self.map_unary(x, Op::AddScalar(x), |v| v + s))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let margin = self
            .value(x)
            .data()
            .iter()
            .map(|v| v.abs().as_f64())
            .fold(f64::INFINITY, f64::min);
        self.kink_margin = self.kink_margin.min(margin);
        // NaN passes through so divergence stays visible downstream
        Ok(self.map_unary(x, Op::Relu(x), |v| if v > T::zero() || v.is_nan() { v } else { T::zero() }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        Ok(self.map_unary(x, Op::Exp(x), |v| v.exp()))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, v)) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| **v <= T::zero())
        {
            return Err(TensorError::Domain {
                op: "log",
                index: i,
                value: v.as_f64(),
            });
        }
        Ok(self.map_unary(x, Op::Log(x), |v| v.ln()))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e = *e / z);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push_op(out, Op::Softmax(x)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&e| (e - m).exp()).sum::<T>().ln() + m;
            row.iter_mut().for_each(|e| *e -= lse);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push_op(out, Op::LogSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        Ok(self.push_op(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        Ok(self.push_op(Tensor::scalar(s), Op::Mean(x)))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().chunks(v.cols()).map(|r| r.iter().copied().sum()).collect();
        let out = Tensor::from_parts(last_axis_shape(v.shape()), data);
        Ok(self.push_op(out, Op::SumLast(x)))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| invalid("concat", &[], "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", &base, format!("axis {axis} out of range")));
        }
        let mut mid_total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            mid_total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * mid_total * inner);
        for o in 0..outer {
            for &v in inputs {
                let val = self.value(v);
                let block = val.shape()[axis] * inner;
                data.extend_from_slice(&val.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = mid_total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push_op(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(invalid(
                "slice",
                &shape,
                format!("axis {axis} range {start}..{} invalid", start + len),
            ));
        }
        let (outer, mid, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        Ok(self.push_op(out, Op::Slice { input: x, axis, start }))
    }

    /// Rows of a rank-2 tensor, in `index` order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = matrix_dims("gather_rows", self.shape(x))?;
        if index.is_empty() {
            return Err(invalid("gather_rows", &[r, c], "empty index"));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            if i >= r {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![index.len(), c], data);
        Ok(self.push_op(
            out,
            Op::GatherRows {
                input: x,
                index: index.to_vec(),
            },
        ))
    }

    /// Mean of the rows sharing a segment id: one scatter-add pass over the
    /// rows followed by a per-segment division. Every segment in
    /// `0..num_segments` must be non-empty.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let (r, c) = matrix_dims("segment_mean", self.shape(x))?;
        if segment.len() != r {
            return Err(mismatch("segment_mean", &[r, c], &[segment.len()]));
        }
        let mut counts = vec![0usize; num_segments];
        for &s in segment {
            if s >= num_segments {
                return Err(TensorError::IndexOutOfRange {
                    op: "segment_mean",
                    index: s,
                    len: num_segments,
                });
            }
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&n| n == 0) {
            return Err(invalid(
                "segment_mean",
                &[r, c],
                format!("segment {empty} has no rows"),
            ));
        }
        let src = self.value(x).data();
        let mut data = vec![T::zero(); num_segments * c];
        for (row, &s) in src.chunks(c).zip(segment) {
            data[s * c..(s + 1) * c]
                .iter_mut()
                .zip(row)
                .for_each(|(d, &v)| *d += v);
        }
        for (s, &n) in counts.iter().enumerate() {
            let inv = T::one() / T::lit(n as f64);
            data[s * c..(s + 1) * c].iter_mut().for_each(|d| *d *= inv);
        }
        let out = Tensor::from_parts(vec![num_segments, c], data);
        Ok(self.push_op(
            out,
            Op::SegmentMean {
                input: x,
                segment: segment.to_vec(),
                counts,
            },
        ))
    }

    fn check_nonzero_rows(&self, op: &'static str, x: Var) -> Result<()> {
        let v = self.value(x);
        for (i, row) in v.data().chunks(v.cols()).enumerate() {
            if row_norm(row) == T::zero() {
                return Err(TensorError::Domain {
                    op,
                    index: i * v.cols(),
                    value: 0.0,
                });
            }
        }
        Ok(())
    }

    /// Unit-normalizes along the last axis. Zero rows are a domain error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        self.check_nonzero_rows("l2_normalize", x)?;
        let v = self.value(x);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(v.cols()) {
            let n = row_norm(row);
            row.iter_mut().for_each(|e| *e = *e / n);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push_op(out, Op::L2Normalize(x)))
    }

    /// Cosine similarity along the last axis.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("cosine_similarity", a, b)?;
        self.check_nonzero_rows("cosine_similarity", a)?;
        self.check_nonzero_rows("cosine_similarity", b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| {
                let dot: T = x.iter().zip(y).map(|(&p, &q)| p * q).sum();
                dot / (row_norm(x) * row_norm(y))
            })
            .collect();
        let out = Tensor::from_parts(last_axis_shape(va.shape()), data);
        Ok(self.push_op(out, Op::Cosine(a, b)))
    }

    /// Dot product along the last axis.
    pub fn dot_last(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("dot_last", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let c = va.cols();
        let data = va
            .data()
            .chunks(c)
            .zip(vb.data().chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        let out = Tensor::from_parts(last_axis_shape(va.shape()), data);
        Ok(self.push_op(out, Op::DotLast(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.shape(x))?;
        let src = self.value(x).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push_op(Tensor::from_parts(vec![c, r], data), Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push_op(out, Op::Reshape(x)))
    }

    /// Identity forward; no gradient flows back through the result.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    /// Straight-through estimator: the forward value is exactly `hard`
    /// while the backward pass treats the node as `soft`, i.e. the node
    /// behaves as `soft + stop_gradient(hard - soft)` without the rounding
    /// that the explicit sum would introduce.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<T>) -> Result<Var> {
        if self.shape(soft) != hard.shape() {
            return Err(mismatch("straight_through", self.shape(soft), hard.shape()));
        }
        Ok(self.push_op(hard, Op::StraightThrough(soft)))
    }

    /// Kernel-3 convolution along rows with same padding: `x` is
    /// `[len, cin]`, `w` is `[3 * cin, cout]` with taps ordered
    /// (previous, current, next), `b` is `[cout]`. When `group` is given,
    /// rows with different group ids never see each other, which lets
    /// several sequences share one call.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, group: Option<&[usize]>) -> Result<Var> {
        let (len, cin) = matrix_dims("conv1d", self.shape(x))?;
        let (wk, cout) = matrix_dims("conv1d", self.shape(w))?;
        if wk != 3 * cin {
            return Err(mismatch("conv1d", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(mismatch("conv1d", self.shape(w), self.shape(b)));
        }
        if let Some(g) = group {
            if g.len() != len {
                return Err(mismatch("conv1d", &[len, cin], &[g.len()]));
            }
        }
        let col = im2col(self.value(x).data(), len, cin, group);
        let mut out = vec![T::zero(); len * cout];
        T::gemm(len, 3 * cin, cout, &col, false, self.value(w).data(), false, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            row.iter_mut().zip(bias).for_each(|(o, &bb)| *o += bb);
        }
        Ok(self.push_op(
            Tensor::from_parts(vec![len, cout], out),
            Op::Conv1d {
                x,
                w,
                b,
                group: group.map(|g| g.to_vec()),
            },
        ))
    }

    /// Maximum along the last axis; ties resolve to the lowest index.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let mut argmax = Vec::with_capacity(v.rows());
        let mut data = Vec::with_capacity(v.rows());
        let mut margin = f64::INFINITY;
        for row in v.data().chunks(c) {
            let mut best = 0;
            for (k, &e) in row.iter().enumerate() {
                if e > row[best] {
                    best = k;
                }
            }
            let runner_up = row
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != best)
                .map(|(_, &e)| e)
                .fold(T::neg_infinity(), T::max);
            if c > 1 {
                margin = margin.min((row[best] - runner_up).as_f64());
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let out = Tensor::from_parts(last_axis_shape(v.shape()), data);
        self.kink_margin = self.kink_margin.min(margin);
        Ok(self.push_op(out, Op::MaxLast { input: x, argmax }))
    }

    /// Layer normalization along the last axis, without affine terms.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        let eps_t = T::lit(eps);
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let (mu, sigma) = row_moments(row, eps_t);
            row.iter_mut().for_each(|e| *e = (*e - mu) / sigma);
        }
        let out = Tensor::from_parts(v.shape().to_vec(), data);
        Ok(self.push_op(out, Op::LayerNorm { input: x, eps: eps_t }))
    }

    /// Gradient contributions of node `i` to its inputs given the gradient
    /// `go` of the node's output.
    pub(crate) fn local_grads(&self, i: usize, go: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf | Op::Constant | Op::StopGradient => vec![],
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                let mut ga = Vec::new();
                if self.requires_grad(*a) {
                    ga = vec![T::zero(); m * k];
                    T::gemm(m, n, k, go, false, vb.data(), true, &mut ga, false);
                }
                let mut gb = Vec::new();
                if self.requires_grad(*b) {
                    gb = vec![T::zero(); k * n];
                    T::gemm(k, m, n, va.data(), true, go, false, &mut gb, false);
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, go.to_vec()), (*b, go.to_vec())],
            Op::Sub(a, b) => vec![(*a, go.to_vec()), (*b, go.iter().map(|&g| -g).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, go.iter().zip(vb).map(|(&g, &q)| g * q).collect()),
                    (*b, go.iter().zip(va).map(|(&g, &p)| g * p).collect()),
                ]
            }
            Op::AddRow(x, bias) => {
                let c = val(*bias).len();
                let mut gb = vec![T::zero(); c];
                for row in go.chunks(c) {
                    gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                }
                vec![(*x, go.to_vec()), (*bias, gb)]
            }
            Op::Scale(x, s) => vec![(*x, go.iter().map(|&g| g * *s).collect())],
            Op::AddScalar(x) | Op::Reshape(x) | Op::StraightThrough(x) => vec![(*x, go.to_vec())],
            Op::Relu(x) => {
                let vx = val(*x).data();
                let g = go
                    .iter()
                    .zip(vx)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, g)]
            }
            Op::Exp(x) => vec![(*x, go.iter().zip(y).map(|(&g, &e)| g * e).collect())],
            Op::Log(x) => {
                let vx = val(*x).data();
                vec![(*x, go.iter().zip(vx).map(|(&g, &v)| g / v).collect())]
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut gx = vec![T::zero(); go.len()];
                for ((gr, yr), out) in go.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    for k in 0..c {
                        out[k] = yr[k] * (gr[k] - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let c = node.value.cols();
                let mut gx = vec![T::zero(); go.len()];
                for ((gr, yr), out) in go.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: T = gr.iter().copied().sum();
                    for k in 0..c {
                        out[k] = gr[k] - yr[k].exp() * total;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![go[0]; val(*x).len()])],
            Op::Mean(x) => {
                let n = val(*x).len();
                vec![(*x, vec![go[0] / T::lit(n as f64); n])]
            }
            Op::SumLast(x) => {
                let c = val(*x).cols();
                vec![(*x, go.iter().flat_map(|&g| std::iter::repeat_n(g, c)).collect())]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, mid_total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let mid = val(v).shape()[*axis];
                    let mut g = Vec::with_capacity(outer * mid * inner);
                    for o in 0..outer {
                        let base = (o * mid_total + offset) * inner;
                        g.extend_from_slice(&go[base..base + mid * inner]);
                    }
                    offset += mid;
                    res.push((v, g));
                }
                res
            }
            Op::Slice { input, axis, start } => {
                let src_shape = val(*input).shape();
                let (outer, mid, inner) = split_axis(src_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut g = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
                }
                vec![(*input, g)]
            }
            Op::GatherRows { input, index } => {
                let c = val(*input).cols();
                let mut g = vec![T::zero(); val(*input).len()];
                for (k, &i) in index.iter().enumerate() {
                    g[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&go[k * c..(k + 1) * c])
                        .for_each(|(a, &b)| *a += b);
                }
                vec![(*input, g)]
            }
            Op::SegmentMean {
                input,
                segment,
                counts,
            } => {
                let c = val(*input).cols();
                let mut g = Vec::with_capacity(val(*input).len());
                for &s in segment {
                    let inv = T::one() / T::lit(counts[s] as f64);
                    g.extend(go[s * c..(s + 1) * c].iter().map(|&v| v * inv));
                }
                vec![(*input, g)]
            }
            Op::L2Normalize(x) => {
                let vx = val(*x).data();
                let c = node.value.cols();
                let mut g = vec![T::zero(); vx.len()];
                for r in 0..vx.len() / c {
                    let span = r * c..(r + 1) * c;
                    let n = row_norm(&vx[span.clone()]);
                    let yr = &y[span.clone()];
                    let gr = &go[span.clone()];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for k in 0..c {
                        g[r * c + k] = (gr[k] - yr[k] * dot) / n;
                    }
                }
                vec![(*x, g)]
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let c = val(*a).cols();
                let mut ga = vec![T::zero(); va.len()];
                let mut gb = vec![T::zero(); vb.len()];
                for r in 0..va.len() / c {
                    let span = r * c..(r + 1) * c;
                    let (xa, xb) = (&va[span.clone()], &vb[span.clone()]);
                    let (na, nb) = (row_norm(xa), row_norm(xb));
                    let cos = y[r];
                    for k in 0..c {
                        let (ua, ub) = (xa[k] / na, xb[k] / nb);
                        ga[r * c + k] = go[r] * (ub - cos * ua) / na;
                        gb[r * c + k] = go[r] * (ua - cos * ub) / nb;
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::DotLast(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                let c = val(*a).cols();
                let ga = vb
                    .iter()
                    .enumerate()
                    .map(|(i, &q)| go[i / c] * q)
                    .collect();
                let gb = va
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| go[i / c] * p)
                    .collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut g = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] = go[j * r + i];
                    }
                }
                vec![(*x, g)]
            }
            Op::Conv1d { x, w, b, group } => {
                let (len, cin) = (val(*x).shape()[0], val(*x).shape()[1]);
                let cout = val(*b).len();
                let group = group.as_deref();
                let mut res = Vec::with_capacity(3);
                if self.requires_grad(*w) {
                    let col = im2col(val(*x).data(), len, cin, group);
                    let mut gw = vec![T::zero(); 3 * cin * cout];
                    T::gemm(3 * cin, len, cout, &col, true, go, false, &mut gw, false);
                    res.push((*w, gw));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); cout];
                    for row in go.chunks(cout) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                    }
                    res.push((*b, gb));
                }
                if self.requires_grad(*x) {
                    let mut gcol = vec![T::zero(); len * 3 * cin];
                    T::gemm(len, cout, 3 * cin, go, false, val(*w).data(), true, &mut gcol, false);
                    let mut gx = vec![T::zero(); len * cin];
                    for t in 0..len {
                        let (prev, next) = conv_neighbors(t, len, group);
                        let src = &gcol[t * 3 * cin..(t + 1) * 3 * cin];
                        let taps = [(prev, 0), (Some(t), 1), (next, 2)];
                        for (row, tap) in taps {
                            if let Some(u) = row {
                                gx[u * cin..(u + 1) * cin]
                                    .iter_mut()
                                    .zip(&src[tap * cin..(tap + 1) * cin])
                                    .for_each(|(a, &g)| *a += g);
                            }
                        }
                    }
                    res.push((*x, gx));
                }
                res
            }
            Op::MaxLast { input, argmax } => {
                let c = val(*input).cols();
                let mut g = vec![T::zero(); val(*input).len()];
                for (r, &k) in argmax.iter().enumerate() {
                    g[r * c + k] = go[r];
                }
                vec![(*input, g)]
            }
            Op::LayerNorm { input, eps } => {
                let vx = val(*input).data();
                let c = node.value.cols();
                let inv_c = T::one() / T::lit(c as f64);
                let mut g = vec![T::zero(); vx.len()];
                for r in 0..vx.len() / c {
                    let span = r * c..(r + 1) * c;
                    let (_, sigma) = row_moments(&vx[span.clone()], *eps);
                    let (yr, gr) = (&y[span.clone()], &go[span.clone()]);
                    let mean_g = gr.iter().copied().sum::<T>() * inv_c;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                    for k in 0..c {
                        g[r * c + k] = (gr[k] - mean_g - yr[k] * mean_gy) / sigma;
                    }
                }
                vec![(*input, g)]
            }
        }
    }
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::lit(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
    (mu, (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn cosine_of_self_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let c = g.cosine_similarity(x, x).unwrap();
        assert!((g.value(c).item().unwrap() - 1.0).abs() < 1e-15);
        assert!(g.value(c).shape().is_empty());
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::vector(vec![1000.0, 999.0]));
        let s = g.softmax(x).unwrap();
        assert!(g.value(s).is_finite());
        let ls = g.log_softmax(x).unwrap();
        assert!((g.value(ls).data()[0] - (-(1.0f32 + (-1.0f32).exp()).ln())).abs() < 1e-4);
    }

    #[test]
    fn l2_normalize_three_four() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let n = g.l2_normalize(x).unwrap();
        assert!(close(g.value(n).data(), &[0.6, 0.8], 1e-15));
    }

    #[test]
    fn shape_errors_name_the_op_and_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(
            g.log(x),
            Err(TensorError::Domain { op: "log", index: 1, .. })
        ));
    }

    #[test]
    fn nan_propagates_instead_of_raising() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![f64::NAN, -1.0, 2.0, 1.0]).unwrap());
        let r = g.relu(x).unwrap();
        assert!(g.value(r).data()[0].is_nan());
        assert_eq!(&g.value(r).data()[1..], &[0.0, 2.0, 1.0]);
        let n = g.l2_normalize(x).unwrap();
        assert!(g.value(n).row(0).iter().all(|v| v.is_nan()));
        let l = g.log(x);
        assert!(matches!(l, Err(TensorError::Domain { index: 1, .. })));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss { .. })));
    }

    #[test]
    fn stop_gradient_blocks_and_preserves_value() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.1, 0.2, 0.3]));
        let s = g.stop_gradient(x);
        assert_eq!(g.value(s), g.value(x));
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(&g, x).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn straight_through_forward_hard_backward_soft() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::vector(vec![0.5, -1.5]));
        let soft = g.scale(x, 3.0).unwrap();
        let hard = Tensor::vector(vec![1.0, 0.0]);
        let h = g.straight_through(soft, hard.clone()).unwrap();
        assert_eq!(g.value(h), &hard);
        let loss = g.sum(h).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0]);

        // same thing spelled out with stop_gradient
        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(Tensor::vector(vec![0.5, -1.5]));
        let soft2 = g2.scale(x2, 3.0).unwrap();
        let hard2 = g2.constant(hard);
        let diff = g2.sub(hard2, soft2).unwrap();
        let sg = g2.stop_gradient(diff);
        let h2 = g2.add(soft2, sg).unwrap();
        assert!(close(g2.value(h2).data(), g.value(h).data(), 1e-15));
        let loss2 = g2.sum(h2).unwrap();
        let grads2 = g2.backward(loss2).unwrap();
        assert_eq!(grads2.get(x2).unwrap().data(), grads.get(x).unwrap().data());
    }

    #[test]
    fn conv_same_padding_keeps_length_and_respects_groups() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        // taps (prev, cur, next) = (1, 10, 100)
        let w = g.constant(Tensor::matrix(3, 1, vec![1.0, 10.0, 100.0]).unwrap());
        let b = g.constant(Tensor::vector(vec![0.0]));
        let y = g.conv1d(x, w, b, None).unwrap();
        assert_eq!(g.value(y).shape(), &[4, 1]);
        assert_eq!(g.value(y).data(), &[210.0, 321.0, 432.0, 43.0]);
        let y = g.conv1d(x, w, b, Some(&[0, 0, 1, 1])).unwrap();
        assert_eq!(g.value(y).data(), &[210.0, 21.0, 430.0, 43.0]);
    }

    #[test]
    fn max_last_ties_pick_lowest_index() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::matrix(1, 4, vec![0.0, 2.0, 1.0, 2.0]).unwrap());
        let m = g.max_last(x).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(g.kink_margin(), 0.0);
    }

    #[test]
    fn segment_mean_rejects_empty_segment() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3, 2]));
        assert!(g.segment_mean(x, &[0, 0, 2], 3).is_err());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
        let r = g.concat(&[a, a], 0).unwrap();
        assert_eq!(g.value(r).shape(), &[4, 2]);
    }
}
