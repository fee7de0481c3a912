use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    AddScalar { a: usize },
    MatMul(MatMulOp),
    Reshape { a: usize },
    Permute { a: usize, perm: Vec<usize> },
    Softmax { a: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu { a: usize },
    Softplus { a: usize },
    Log { a: usize },
    Square { a: usize },
    ClampMin { a: usize, floor: T },
    Sum { a: usize },
    Mean { a: usize },
    MeanRows { a: usize },
    Gather { src: usize, idx: Vec<usize> },
    Concat { parts: Vec<usize> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Clone, Copy)]
struct MatMulOp {
    a: usize,
    b: usize,
    trans_b: bool,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Node ids are assigned in creation order, so every operation's inputs
/// precede it and a single reverse sweep visits each node once.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// Strided batched GEMM: `c[b] (+)= op(a[b]) · op(b[b])` with `op(a)` of size m×k.
///
/// A zero batch stride broadcasts that operand across the batch.
#[allow(clippy::too_many_arguments)]
fn gemm_batched<T: Scalar>(
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_trans: bool,
    a_batch_stride: usize,
    b: &[T],
    b_trans: bool,
    b_batch_stride: usize,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    for i in 0..batch {
        let ao = i * a_batch_stride;
        let bo = i * b_batch_stride;
        let co = i * m * n;
        assert!(ao + m * k <= a.len() && bo + k * n <= b.len() && co + m * n <= c.len());
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a[ao..ao + m * k],
            rsa,
            csa,
            &b[bo..bo + k * n],
            rsb,
            csb,
            beta,
            &mut c[co..co + m * n],
            n as isize,
            1,
        );
    }
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            counter[ax] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    /// Number of recorded nodes (leaves and operations).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(mismatch(name, sa, sb));
        }
        let (da, db) = (self.data(a), self.data(b));
        let period = db.len();
        let data = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % period]))
            .collect();
        Ok((Tensor::new(sa, data)?, a.0, b.0))
    }

    /// Elementwise `a + b`; `b` broadcasts over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, a, b) = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let t = self.map(a, |x| x * factor);
        self.push("scale", t, Op::Scale { a: a.0, factor }, &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.map(a, |x| x + c);
        self.push("add_scalar", t, Op::AddScalar { a: a.0 }, &[a.0])
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(a);
        Tensor::from_fn(v.shape(), |i| f(v.data()[i]))
    }

    /// Matrix product.
    ///
    /// With a 2-D `b` of shape `[k, n]`, `a` is any `[.., k]` and the leading
    /// axes are flattened into rows. With 3-D operands `[N, m, k] × [N, k, n]`
    /// the product is taken per batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` of shape `[n, k]` (or `[N, n, k]`).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, n, out_shape) = match (sa.len(), sb.len()) {
            (_, 2) => {
                let k = *sa.last().unwrap();
                let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if k != kb {
                    return Err(mismatch(name, &sa, &sb));
                }
                let m = self.value(a).numel() / k;
                let mut out = sa.clone();
                *out.last_mut().unwrap() = n;
                (1, m, k, n, out)
            }
            (3, 3) => {
                let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != kb {
                    return Err(mismatch(name, &sa, &sb));
                }
                (sa[0], sa[1], sa[2], n, vec![sa[0], sa[1], n])
            }
            _ => return Err(mismatch(name, &sa, &sb)),
        };
        let mut out = vec![T::zero(); batch * m * n];
        let b_stride = if sb.len() == 2 { 0 } else { k * n };
        gemm_batched(
            batch,
            m,
            k,
            n,
            self.data(a),
            false,
            m * k,
            self.data(b),
            trans_b,
            b_stride,
            &mut out,
            false,
        );
        let op = MatMulOp {
            a: a.0,
            b: b.0,
            trans_b,
            batch,
            m,
            k,
            n,
        };
        self.push(name, Tensor::new(&out_shape, out)?, Op::MatMul(op), &[a.0, b.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape { a: a.0 }, &[a.0])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let (data, out_shape) = permute_data(self.data(a), &shape, perm);
        self.push(
            "permute",
            Tensor::new(&out_shape, data)?,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            &[a.0],
        )
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    ///
    /// `mask` (true = allowed) covers a suffix of the logits' shape and is
    /// repeated over the leading axes. Blocked positions come out exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(a);
        let cols = v.cols();
        if let Some(m) = mask {
            if m.is_empty() || m.len() % cols != 0 || v.numel() % m.len() != 0 {
                return Err(TensorError::InvalidShape {
                    op: "masked_softmax",
                    msg: format!("mask of {} elements does not tile logits {:?}", m.len(), v.shape()),
                });
            }
        }
        let mut out = vec![T::zero(); v.numel()];
        for (r, (row, dst)) in v.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let allowed = |j: usize| mask.map_or(true, |m| m[(r * cols + j) % m.len()]);
            let mut max = T::neg_infinity();
            for (j, &x) in row.iter().enumerate() {
                if allowed(j) && x > max {
                    max = x;
                }
            }
            if max == T::neg_infinity() {
                return Err(TensorError::FullyMasked { row: r });
            }
            let mut sum = T::zero();
            for (j, (&x, d)) in row.iter().zip(dst.iter_mut()).enumerate() {
                if allowed(j) {
                    *d = (x - max).exp();
                    sum += *d;
                }
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        self.push("masked_softmax", t, Op::Softmax { a: a.0 }, &[a.0])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let v = self.value(x);
        let d = v.cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", v.shape(), self.shape(gain)));
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = v.rows();
        let dt = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(v.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / dt;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(v.shape(), out)?;
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            xhat,
            rstd,
        };
        self.push("layer_norm", t, op, &[x.0, gain.0, bias.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| gelu_parts(x).0);
        self.push("gelu", t, Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, softplus);
        self.push("softplus", t, Op::Softplus { a: a.0 }, &[a.0])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.ln());
        self.push("log", t, Op::Log { a: a.0 }, &[a.0])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x * x);
        self.push("square", t, Op::Square { a: a.0 }, &[a.0])
    }

    /// Elementwise `max(a, floor)`; the gradient flows only where `a > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: T) -> Result<Var> {
        let t = self.map(a, |x| x.max(floor));
        self.push("clamp_min", t, Op::ClampMin { a: a.0, floor }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push("sum", Tensor::scalar(s), Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean { a: a.0 }, &[a.0])
    }

    /// Mean over all leading axes: `[.., c] -> [c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let c = v.cols();
        let inv = T::one() / T::lit(v.rows() as f64);
        let mut out = vec![T::zero(); c];
        for row in v.data().chunks(c) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_rows", Tensor::new(&[c], out)?, Op::MeanRows { a: a.0 }, &[a.0])
    }

    /// Selects entries along axis 0: output `i` is `src[idx[i]]`.
    pub fn gather(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(src);
        let rows = v.shape()[0];
        let width = v.numel() / rows;
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(&v.data()[i * width..(i + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = idx.len();
        let t = Tensor::new(&shape, out)?;
        self.push(
            "gather",
            t,
            Op::Gather {
                src: src.0,
                idx: idx.to_vec(),
            },
            &[src.0],
        )
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut width = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", &first, s));
            }
            width += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                out.extend_from_slice(v.row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::new(&shape, out)?;
        self.push("concat", t, Op::Concat { parts: ids.clone() }, &ids)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` row-wise.
    /// Rows whose target equals `ignore` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let v = self.value(logits);
        let vocab = v.cols();
        if v.rows() != targets.len() {
            return Err(mismatch("cross_entropy", v.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); v.numel()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, (row, p)) in v.data().chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
            let t = targets[r];
            if Some(t) == ignore {
                continue;
            }
            if t >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: vocab,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - max).exp();
                sum += *pi;
            }
            total += sum.ln() + max - row[t];
            p.iter_mut().for_each(|pi| *pi /= sum);
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                msg: "every target is ignored".into(),
            });
        }
        let loss = total / T::lit(count as f64);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            ignore,
            probs,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits.0])
    }

    /// Reverse sweep from a scalar `loss`; afterwards [`Tape::grad`] is populated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |j: usize| nodes[j].value.data();
        let wants = |j: usize| nodes[j].requires_grad;
        fn acc<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'g mut Vec<T> {
            let len = nodes[j].value.numel();
            grads[j].get_or_insert_with(|| vec![T::zero(); len])
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if wants(*a) {
                    acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    let p = gb.len();
                    for (k, &x) in g.iter().enumerate() {
                        gb[k % p] += sign * x;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (val(*a), val(*b));
                let p = db.len();
                if wants(*a) {
                    let ga = acc(grads, nodes, *a);
                    for (k, &x) in g.iter().enumerate() {
                        ga[k] += x * db[k % p];
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, nodes, *b);
                    for (k, &x) in g.iter().enumerate() {
                        gb[k % p] += x * da[k];
                    }
                }
            }
            Op::Scale { a, factor } => {
                acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &x)| *d += x * *factor);
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                acc(grads, nodes, *a).iter_mut().zip(g).for_each(|(d, &x)| *d += x);
            }
            Op::MatMul(mm) => {
                let MatMulOp {
                    a,
                    b,
                    trans_b,
                    batch,
                    m,
                    k,
                    n,
                } = *mm;
                let b_shared = nodes[b].value.shape().len() == 2;
                if wants(a) {
                    let bv = val(b);
                    let b_stride = if b_shared { 0 } else { k * n };
                    // dA = G · op(B)ᵀ
                    gemm_batched(batch, m, n, k, g, false, m * n, bv, !trans_b, b_stride, acc(grads, nodes, a), true);
                }
                if wants(b) {
                    let av = val(a);
                    let gb = acc(grads, nodes, b);
                    if trans_b {
                        // dB[n,k] = Gᵀ · A
                        if b_shared {
                            gemm_batched(1, n, batch * m, k, g, true, 0, av, false, 0, gb, true);
                        } else {
                            gemm_batched(batch, n, m, k, g, true, m * n, av, false, m * k, gb, true);
                        }
                    } else if b_shared {
                        // dB[k,n] = Aᵀ · G
                        gemm_batched(1, k, batch * m, n, av, true, 0, g, false, 0, gb, true);
                    } else {
                        gemm_batched(batch, k, m, n, av, true, m * k, g, false, m * n, gb, true);
                    }
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (o, &p) in perm.iter().enumerate() {
                    inv[p] = o;
                }
                let (back, _) = permute_data(g, nodes[i].value.shape(), &inv);
                acc(grads, nodes, *a).iter_mut().zip(&back).for_each(|(d, &x)| *d += x);
            }
            Op::Softmax { a } => {
                let y = val(i);
                let cols = nodes[i].value.cols();
                let ga = acc(grads, nodes, *a);
                for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                    for ((d, &y), &g) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += y * (g - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let d = gv.len();
                let dt = T::lit(d as f64);
                if wants(*x) {
                    let gx = acc(grads, nodes, *x);
                    for (r, ((gr, hr), dr)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= dt;
                        m2 /= dt;
                        for j in 0..d {
                            dr[j] += rstd[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = acc(grads, nodes, *gain);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc(grads, nodes, *bias);
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::Gelu { a } => {
                let x = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *d += gi * gelu_parts(xi).1;
                }
            }
            Op::Softplus { a } => {
                let x = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *d += gi * sigmoid(xi);
                }
            }
            Op::Log { a } => {
                let x = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *d += gi / xi;
                }
            }
            Op::Square { a } => {
                let x = val(*a);
                let two = T::lit(2.0);
                let ga = acc(grads, nodes, *a);
                for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    *d += gi * two * xi;
                }
            }
            Op::ClampMin { a, floor } => {
                let x = val(*a);
                let ga = acc(grads, nodes, *a);
                for ((d, &xi), &gi) in ga.iter_mut().zip(x).zip(g) {
                    if xi > *floor {
                        *d += gi;
                    }
                }
            }
            Op::Sum { a } => {
                acc(grads, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean { a } => {
                let ga = acc(grads, nodes, *a);
                let s = g[0] / T::lit(ga.len() as f64);
                ga.iter_mut().for_each(|d| *d += s);
            }
            Op::MeanRows { a } => {
                let ga = acc(grads, nodes, *a);
                let c = g.len();
                let inv = T::one() / T::lit((ga.len() / c) as f64);
                for row in ga.chunks_mut(c) {
                    row.iter_mut().zip(g).for_each(|(d, &x)| *d += x * inv);
                }
            }
            Op::Gather { src, idx } => {
                let gs = acc(grads, nodes, *src);
                let width = g.len() / idx.len().max(1);
                for (o, &r) in idx.iter().enumerate() {
                    let dst = &mut gs[r * width..(r + 1) * width];
                    dst.iter_mut().zip(&g[o * width..(o + 1) * width]).for_each(|(d, &x)| *d += x);
                }
            }
            Op::Concat { parts } => {
                let width = nodes[i].value.cols();
                let rows = g.len() / width;
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.cols();
                    if wants(p) {
                        let gp = acc(grads, nodes, p);
                        for r in 0..rows {
                            let src = &g[r * width + off..r * width + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(d, &x)| *d += x);
                        }
                    }
                    off += w;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let vocab = nodes[*logits].value.cols();
                let s = g[0] / T::lit(*count as f64);
                let gl = acc(grads, nodes, *logits);
                for (r, (dr, pr)) in gl.chunks_mut(vocab).zip(probs.chunks(vocab)).enumerate() {
                    let t = targets[r];
                    if Some(t) == *ignore {
                        continue;
                    }
                    for (d, &p) in dr.iter_mut().zip(pr) {
                        *d += s * p;
                    }
                    dr[t] -= s;
                }
            }
        }
    }
}
