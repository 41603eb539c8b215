use crate::error::{Result, VcaError};

use super::{flops, kernels, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct PoolGrid {
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    channels: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleBy(Var, Var),
    AddRow(Var, Var),
    Exp(Var),
    Sum(Var),
    Gelu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    AvgPool(Var, PoolGrid),
    Reshape(Var),
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Define-by-run record of differentiable operations.
///
/// Operations are appended in execution order; `backward` walks them in
/// reverse, visiting each recorded node at most once. Only leaves keep a
/// persistent gradient, and repeated `backward` calls add into it until
/// [`Tape::zero_grad`].
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(VcaError::NonFinite { op: op_name });
        }
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Gelu(a)
            | Op::Softmax(a)
            | Op::AvgPool(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Slice { x, .. } | Op::MeanRows { x, .. } => vec![*x],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(VcaError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    /// Matrix product `a * b`; counted by the multiply counter.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a)?;
        let (q2, r) = self.dims2(b)?;
        if q != q2 {
            return Err(VcaError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); p * r];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        flops::record(p, q, r);
        self.push("matmul", Tensor::new(vec![p, r], out)?, Op::MatMul(a, b))
    }

    /// Matrix product `a * b^T`; counted like the equivalent `matmul`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a)?;
        let (r, q2) = self.dims2(b)?;
        if q != q2 {
            return Err(VcaError::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); p * r];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, p, q, r);
        flops::record(p, q, r);
        self.push("matmul_nt", Tensor::new(vec![p, r], out)?, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push("scale", out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push("add_const", out, Op::AddConst(a))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(VcaError::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let out = self.value(a).map(|x| x * c);
        self.push("scale_by", out, Op::ScaleBy(a, s))
    }

    /// Adds the vector `b` to every row of `a` (last dimension must match).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.value(b).len() != c {
            return Err(VcaError::dim("add_row", self.shape(a), self.shape(b)));
        }
        let bias = self.value(b).data();
        let x = self.value(a);
        let data = x
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bias).map(|(&p, &q)| p + q))
            .collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow(a, b))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(T::exp);
        self.push("exp", out, Op::Exp(a))
    }

    /// Sum of all elements, as a single-element tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Inner product of two same-shaped tensors. Elementwise, so it is not
    /// counted as a matrix product.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push("gelu", out, Op::Gelu(a))
    }

    /// Row-wise softmax over the last dimension, with the row maximum
    /// subtracted before exponentiation.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("softmax_rows", out, Op::Softmax(a))
    }

    /// `gain * x / sqrt(mean(x^2) + eps)` over the last dimension, per row.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d {
            return Err(VcaError::dim("rmsnorm", self.shape(x), self.shape(gain)));
        }
        if eps <= T::zero() {
            return Err(VcaError::config("rmsnorm eps must be positive"));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut inv_rms = Vec::with_capacity(xv.len() / d);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::lit(d as f64);
            let r = (ms + eps).sqrt().recip();
            inv_rms.push(r);
            data.extend(row.iter().zip(g).map(|(&v, &gj)| gj * v * r));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("rmsnorm", out, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Standard layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(VcaError::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dn = T::lit(d as f64);
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(xv.len() / d);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let s = (var + eps).sqrt().recip();
            inv_std.push(s);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                data.push(g[j] * h + b[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Non-overlapping average pooling of an `H x W x d` field down to
    /// `h x w x d`, with window `(H/h) x (W/w)` and stride equal to the window.
    pub fn avg_pool_2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (height, width, channels) = match self.shape(x)[..] {
            [a, b, c] => (a, b, c),
            _ => return Err(VcaError::dim("avg_pool_2d", self.shape(x), &[0, 0, 0])),
        };
        if out_h == 0 || out_w == 0 || height % out_h != 0 || width % out_w != 0 {
            return Err(VcaError::config(format!(
                "avg_pool_2d needs H mod h == 0 and W mod w == 0, got H={height}, W={width}, h={out_h}, w={out_w}"
            )));
        }
        let grid = PoolGrid {
            height,
            width,
            out_h,
            out_w,
            channels,
        };
        let (kh, kw) = (height / out_h, width / out_w);
        let inv = T::lit(1.0 / (kh * kw) as f64);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); out_h * out_w * channels];
        for r in 0..height {
            for c in 0..width {
                let cell = (r / kh) * out_w + c / kw;
                let src_row = &src[(r * width + c) * channels..][..channels];
                let dst = &mut out[cell * channels..][..channels];
                for (o, &v) in dst.iter_mut().zip(src_row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![out_h, out_w, channels], out)?;
        self.push("avg_pool_2d", out, Op::AvgPool(x, grid))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x))
    }

    /// Rectangular block `rows x cols` of a rank-2 tensor.
    pub fn slice(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if rows.end > r || cols.end > c || rows.is_empty() || cols.is_empty() {
            return Err(VcaError::dim(
                "slice",
                self.shape(x),
                &[rows.start, rows.end, cols.start, cols.end],
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let out = Tensor::new(vec![rows.len(), cols.len()], data)?;
        self.push(
            "slice",
            out,
            Op::Slice {
                x,
                row0: rows.start,
                col0: cols.start,
            },
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(VcaError::Usage("concat of zero tensors".into()));
        };
        let (rows, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != rows {
                return Err(VcaError::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(VcaError::Usage("concat of zero tensors".into()));
        };
        let (_, cols) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != cols {
                return Err(VcaError::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean over consecutive groups of `group` rows: `[G*group x C] -> [G x C]`.
    pub fn mean_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if group == 0 || r % group != 0 {
            return Err(VcaError::dim("mean_rows", self.shape(x), &[group]));
        }
        let inv = T::lit(1.0 / group as f64);
        let src = self.value(x).data();
        let mut data = vec![T::zero(); (r / group) * c];
        for i in 0..r {
            let dst = &mut data[(i / group) * c..][..c];
            for (o, &v) in dst.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(vec![r / group, c], data)?;
        self.push("mean_rows", out, Op::MeanRows { x, group })
    }

    /// Mean softmax cross-entropy of `logits [B x K]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, k) = self.dims2(logits)?;
        if labels.len() != b {
            return Err(VcaError::dim("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(VcaError::Usage(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &label) in probs.chunks_mut(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / T::lit(b as f64));
        self.push(
            "cross_entropy",
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Reverse pass from a single-element `seed`. Leaf gradients accumulate
    /// across calls.
    pub fn backward(&mut self, seed: Var) -> Result<()> {
        if self.value(seed).len() != 1 {
            return Err(VcaError::Usage(format!(
                "backward seed must be a scalar, got shape {:?}",
                self.shape(seed)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=seed.0).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(self.shape(seed), T::one()));

        for id in (0..=seed.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }

        for (id, g) in grads.into_iter().enumerate() {
            let node = &mut self.nodes[id];
            if let (Op::Leaf, Some(g)) = (&node.op, g) {
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (p, q) = self.value(a).dims2().expect("rank 2");
                let r = self.value(b).last_dim();
                self.accumulate(grads, a, |da| {
                    kernels::matmul_nt_acc(gd, self.value(b).data(), da, p, r, q)
                });
                self.accumulate(grads, b, |db| {
                    kernels::matmul_tn_acc(self.value(a).data(), gd, db, q, p, r)
                });
            }
            &Op::MatMulNt(a, b) => {
                let (p, q) = self.value(a).dims2().expect("rank 2");
                let r = self.value(b).dims2().expect("rank 2").0;
                self.accumulate(grads, a, |da| {
                    kernels::matmul_acc(gd, self.value(b).data(), da, p, r, q)
                });
                self.accumulate(grads, b, |db| {
                    kernels::matmul_tn_acc(gd, self.value(a).data(), db, r, p, q)
                });
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, gd));
                self.accumulate(grads, b, |db| add_into(db, gd));
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, gd));
                self.accumulate(grads, b, |db| db.iter_mut().zip(gd).for_each(|(o, &v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                self.accumulate(grads, a, |da| {
                    for ((o, &v), &y) in da.iter_mut().zip(gd).zip(bv) {
                        *o += v * y;
                    }
                });
                self.accumulate(grads, b, |db| {
                    for ((o, &v), &x) in db.iter_mut().zip(gd).zip(av) {
                        *o += v * x;
                    }
                });
            }
            &Op::Scale(a, c) => {
                self.accumulate(grads, a, |da| da.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * c));
            }
            &Op::AddConst(a) => self.accumulate(grads, a, |da| add_into(da, gd)),
            &Op::ScaleBy(a, s) => {
                let c = self.value(s).item();
                let av = self.value(a).data();
                self.accumulate(grads, a, |da| da.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * c));
                self.accumulate(grads, s, |ds| {
                    ds[0] += gd.iter().zip(av).map(|(&v, &x)| v * x).sum::<T>()
                });
            }
            &Op::AddRow(a, b) => {
                self.accumulate(grads, a, |da| add_into(da, gd));
                let c = self.value(b).len();
                self.accumulate(grads, b, |db| {
                    for row in gd.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            &Op::Exp(a) => {
                let out = node.value.data();
                self.accumulate(grads, a, |da| {
                    for ((o, &v), &y) in da.iter_mut().zip(gd).zip(out) {
                        *o += v * y;
                    }
                });
            }
            &Op::Sum(a) => {
                let v = gd[0];
                self.accumulate(grads, a, |da| da.iter_mut().for_each(|o| *o += v));
            }
            &Op::Gelu(a) => {
                let (c, k) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xs = self.value(a).data();
                self.accumulate(grads, a, |da| {
                    for ((o, &v), &x) in da.iter_mut().zip(gd).zip(xs) {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (T::one() + three * k * x * x);
                        let deriv = half * (T::one() + t) + half * x * (T::one() - t * t) * du;
                        *o += v * deriv;
                    }
                });
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let c = node.value.last_dim();
                self.accumulate(grads, a, |da| {
                    for ((o_row, g_row), y_row) in da.chunks_mut(c).zip(gd.chunks(c)).zip(y.chunks(c)) {
                        let inner: T = g_row.iter().zip(y_row).map(|(&g, &y)| g * y).sum();
                        for ((o, &g), &y) in o_row.iter_mut().zip(g_row).zip(y_row) {
                            *o += y * (g - inner);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let d = self.value(gain).len();
                let dn = T::lit(d as f64);
                let xs = self.value(x).data();
                let gs = self.value(gain).data();
                self.accumulate(grads, x, |dx| {
                    for (((o_row, g_row), x_row), &r) in
                        dx.chunks_mut(d).zip(gd.chunks(d)).zip(xs.chunks(d)).zip(inv_rms)
                    {
                        let ux: T = g_row.iter().zip(gs).zip(x_row).map(|((&g, &w), &xv)| g * w * xv).sum();
                        let corr = r * r * r * ux / dn;
                        for (((o, &g), &w), &xv) in o_row.iter_mut().zip(g_row).zip(gs).zip(x_row) {
                            *o += r * g * w - corr * xv;
                        }
                    }
                });
                self.accumulate(grads, gain, |dg| {
                    for ((g_row, x_row), &r) in gd.chunks(d).zip(xs.chunks(d)).zip(inv_rms) {
                        for ((o, &g), &xv) in dg.iter_mut().zip(g_row).zip(x_row) {
                            *o += g * xv * r;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let d = self.value(gamma).len();
                let dn = T::lit(d as f64);
                let gs = self.value(gamma).data();
                self.accumulate(grads, x, |dx| {
                    for (((o_row, g_row), h_row), &s) in
                        dx.chunks_mut(d).zip(gd.chunks(d)).zip(xhat.chunks(d)).zip(inv_std)
                    {
                        let mut mean_u = T::zero();
                        let mut mean_uh = T::zero();
                        for ((&g, &w), &h) in g_row.iter().zip(gs).zip(h_row) {
                            mean_u += g * w;
                            mean_uh += g * w * h;
                        }
                        mean_u = mean_u / dn;
                        mean_uh = mean_uh / dn;
                        for (((o, &g), &w), &h) in o_row.iter_mut().zip(g_row).zip(gs).zip(h_row) {
                            *o += s * (g * w - mean_u - h * mean_uh);
                        }
                    }
                });
                self.accumulate(grads, gamma, |dg| {
                    for (g_row, h_row) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &g), &h) in dg.iter_mut().zip(g_row).zip(h_row) {
                            *o += g * h;
                        }
                    }
                });
                self.accumulate(grads, beta, |db| {
                    for g_row in gd.chunks(d) {
                        add_into(db, g_row);
                    }
                });
            }
            &Op::AvgPool(x, grid) => {
                let (kh, kw) = (grid.height / grid.out_h, grid.width / grid.out_w);
                let inv = T::lit(1.0 / (kh * kw) as f64);
                let ch = grid.channels;
                self.accumulate(grads, x, |dx| {
                    for r in 0..grid.height {
                        for c in 0..grid.width {
                            let cell = (r / kh) * grid.out_w + c / kw;
                            let dst = &mut dx[(r * grid.width + c) * ch..][..ch];
                            for (o, &v) in dst.iter_mut().zip(&gd[cell * ch..][..ch]) {
                                *o += v * inv;
                            }
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.accumulate(grads, x, |dx| add_into(dx, gd)),
            &Op::Slice { x, row0, col0 } => {
                let (rows, cols) = g.dims2().expect("rank 2");
                let src_cols = self.value(x).last_dim();
                self.accumulate(grads, x, |dx| {
                    for i in 0..rows {
                        let dst = &mut dx[(row0 + i) * src_cols + col0..][..cols];
                        add_into(dst, &gd[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = g.dims2().expect("rank 2");
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    self.accumulate(grads, p, |dp| {
                        for i in 0..rows {
                            add_into(&mut dp[i * w..(i + 1) * w], &gd[i * total + offset..][..w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, |dp| add_into(dp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            &Op::MeanRows { x, group } => {
                let c = g.last_dim();
                let inv = T::lit(1.0 / group as f64);
                self.accumulate(grads, x, |dx| {
                    for (i, row) in dx.chunks_mut(c).enumerate() {
                        let src = &gd[(i / group) * c..][..c];
                        row.iter_mut().zip(src).for_each(|(o, &v)| *o += v * inv);
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let scale = gd[0] / T::lit(labels.len() as f64);
                self.accumulate(grads, *logits, |dl| {
                    for (b, (o_row, p_row)) in dl.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for (j, (o, &p)) in o_row.iter_mut().zip(p_row).enumerate() {
                            let target = if j == labels[b] { T::one() } else { T::zero() };
                            *o += scale * (p - target);
                        }
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(slot.data_mut());
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &v)| *o += v);
}
