use super::gemm::{gemm, MatView};
use super::{strides_of, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        batches: usize,
        b_shared: bool,
        a_dims: (usize, usize),
        b_dims: (usize, usize),
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: T,
    },
    Gelu {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    Reshape {
        a: usize,
    },
    Permute {
        a: usize,
        perm: Vec<usize>,
    },
    Slice {
        a: usize,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
    MeanAxis {
        a: usize,
        axis: usize,
    },
    Gather {
        table: usize,
        indices: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; only ever allocated on leaves with gradient.
    grad: Option<Vec<T>>,
}

/// Append-only record of a differentiable computation.
///
/// Node ids are assigned in creation order, and every operation only refers
/// to earlier nodes, so creation order is a topological order.
#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(n),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that accumulates a gradient during [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Accumulated gradient of a leaf, if any backward pass has reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Drops every accumulated leaf gradient.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Ids of the inputs a node was computed from.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        let ids: Vec<usize> = match &self.nodes[v.0].op {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Scale { a, .. }
            | Op::Gelu { a }
            | Op::Softmax { a }
            | Op::LogSoftmax { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanAxis { a, .. } => vec![*a],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { table, .. } => vec![*table],
        };
        ids.into_iter().map(Var).collect()
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

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::contract(format!(
                "variable {} does not belong to this graph",
                v.0
            )));
        }
        Ok(())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes. See [`Graph::matmul_ex`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    /// Matrix product `op(a) · op(b)` where `op` optionally transposes the
    /// last two axes.
    ///
    /// A rank-2 `b` is shared by every leading index of `a`; otherwise `a`
    /// and `b` must have the same rank and identical leading (batch) axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim(format!(
                "matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"
            )));
        }
        let b_shared = sb.len() == 2;
        if !b_shared && (sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::dim(format!(
                "matmul batch axes disagree: {sa:?} and {sb:?}"
            )));
        }
        let (mut ar, ac) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let mut batches: usize = sa[..sa.len() - 2].iter().product();
        // A shared right operand lets all leading axes fold into the rows.
        if b_shared && !ta {
            ar *= batches;
            batches = 1;
        }
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::dim(format!(
                "matmul inner dimensions disagree: {sa:?}{} x {sb:?}{}",
                if ta { "ᵀ" } else { "" },
                if tb { "ᵀ" } else { "" }
            )));
        }
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        if b_shared && !ta {
            out_shape.push(sa[sa.len() - 2]);
        } else {
            out_shape.push(m);
        }
        out_shape.push(n);
        let total_rows = if b_shared && !ta { ar } else { m };
        debug_assert_eq!(total_rows * batches * n, out_shape.iter().product::<usize>());

        let av = MatView::dense_op(ar, ac, ta);
        let bv = MatView::dense_op(br, bc, tb);
        let a_data = self.value(a).data();
        let b_data = self.value(b).data();
        let mut out = vec![T::zero(); batches * m * n];
        for i in 0..batches {
            let a_off = i * ar * ac;
            let b_off = if b_shared { 0 } else { i * br * bc };
            gemm(
                T::one(),
                &a_data[a_off..a_off + ar * ac],
                av,
                &b_data[b_off..b_off + br * bc],
                bv,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                MatView::dense(m, n),
            );
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
                batches,
                b_shared,
                a_dims: (ar, ac),
                b_dims: (br, bc),
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`
    /// (its shape must be a suffix of `a`'s).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim(format!(
                "add: {sb:?} does not broadcast onto {sa:?}"
            )));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(bd.len()) {
            row.iter_mut().zip(bd).for_each(|(x, &y)| *x = *x + y);
        }
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a: a.0, b: b.0 }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale { a: a.0, factor }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).map(|x| gelu_fwd(x));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gelu { a: a.0 }, rg))
    }

    /// Normalizes over the last axis, then applies `gamma` and `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        if eps <= T::zero() {
            return Err(Error::contract("layernorm eps must be positive"));
        }
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("layernorm on a rank-0 tensor"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layernorm: gamma {:?} / beta {:?} do not match last axis of {sx:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let rows = xd.len() / d;
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bt[j];
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = softmax_rows(self.value(a), false)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { a: a.0 }, rg))
    }

    /// Log-softmax over the last axis: `z - max - ln Σ exp(z - max)`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let value = softmax_rows(self.value(a), true)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { a: a.0 }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape { a: a.0 }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!(
                "permute: {perm:?} is not a permutation of the axes of {shape:?}"
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![T::zero(); src.len()];
        for_each_permuted(&shape, perm, |o, i| out[o] = src[i]);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Permute {
                a: a.0,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// `len` consecutive entries along `axis`, starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(format!(
                "slice axis {axis} [{start}, {}) out of range for {shape:?}",
                start + len
            )));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Slice {
                a: a.0,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        for &p in parts {
            self.check(p)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {s:?} vs {base:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: parts.iter().map(|p| p.0).collect(),
                axis,
            },
            rg,
        ))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = T::lit(wide_sum(self.value(a).data()));
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg))
    }

    /// Mean of all entries as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let d = self.value(a).data();
        let s = T::lit(wide_sum(d) / d.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, rg))
    }

    /// Mean along one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!("mean_axis {axis} for shape {shape:?}")));
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let n = shape[axis];
        let inv = T::one() / T::lit(n as f64);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for r in 0..n {
                let row = &src[(o * n + r) * inner..(o * n + r + 1) * inner];
                for (x, &y) in acc.iter_mut().zip(row) {
                    *x = *x + y;
                }
            }
            for x in acc.iter_mut() {
                *x = *x * inv;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::MeanAxis { a: a.0, axis }, rg))
    }

    /// Rows of a `[V, d]` table selected by `indices`, giving `[n, d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        self.check(table)?;
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("gather_rows on shape {shape:?}")));
        }
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!(
                "gather index {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table: table.0,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a single-element root.
    ///
    /// Gradients accumulate into leaves created with [`Graph::leaf`]; call
    /// [`Graph::zero_grad`] to reset them.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let n = root.0 + 1;
        let mut adj: Vec<Option<Vec<T>>> = Vec::with_capacity(n);
        adj.resize_with(n, || None);
        adj[root.0] = Some(vec![T::one()]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(x, &y)| *x = *x + y),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batches,
                b_shared,
                a_dims: (ar, ac),
                b_dims: (br, bc),
            } => {
                let (ar, ac, br, bc) = (*ar, *ac, *br, *bc);
                let av = MatView::dense_op(ar, ac, *ta);
                let bv = MatView::dense_op(br, bc, *tb);
                let (m, n) = (av.rows, bv.cols);
                let a_val = nodes[*a].value.data();
                let b_val = nodes[*b].value.data();
                if let Some(da) = slot(adj, nodes, *a) {
                    // d op(A) = dC · op(B)ᵀ, written through op(A)'s view.
                    for t in 0..*batches {
                        let b_off = if *b_shared { 0 } else { t * br * bc };
                        gemm(
                            T::one(),
                            &g[t * m * n..(t + 1) * m * n],
                            MatView::dense(m, n),
                            &b_val[b_off..b_off + br * bc],
                            bv.t(),
                            T::one(),
                            &mut da[t * ar * ac..(t + 1) * ar * ac],
                            av,
                        );
                    }
                }
                if let Some(db) = slot(adj, nodes, *b) {
                    // d op(B) = op(A)ᵀ · dC, summed over batches when shared.
                    for t in 0..*batches {
                        let b_off = if *b_shared { 0 } else { t * br * bc };
                        gemm(
                            T::one(),
                            &a_val[t * ar * ac..(t + 1) * ar * ac],
                            av.t(),
                            &g[t * m * n..(t + 1) * m * n],
                            MatView::dense(m, n),
                            T::one(),
                            &mut db[b_off..b_off + br * bc],
                            bv,
                        );
                    }
                }
            }
            Op::Add { a, b } => {
                if let Some(da) = slot(adj, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
                if let Some(db) = slot(adj, nodes, *b) {
                    let blen = db.len();
                    for chunk in g.chunks(blen) {
                        db.iter_mut().zip(chunk).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if let Some(da) = slot(adj, nodes, *a) {
                    for ((x, &gy), &y) in da.iter_mut().zip(g).zip(bv) {
                        *x = *x + gy * y;
                    }
                }
                if let Some(db) = slot(adj, nodes, *b) {
                    for ((x, &gy), &y) in db.iter_mut().zip(g).zip(av) {
                        *x = *x + gy * y;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(da) = slot(adj, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *factor);
                }
            }
            Op::Gelu { a } => {
                let xv = nodes[*a].value.data();
                if let Some(da) = slot(adj, nodes, *a) {
                    for ((d, &gy), &x) in da.iter_mut().zip(g).zip(xv) {
                        *d = *d + gy * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = nodes[*gamma].value.data();
                let d = gv.len();
                if let Some(dg) = slot(adj, nodes, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] = dg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(dbeta) = slot(adj, nodes, *beta) {
                    for grow in g.chunks(d) {
                        dbeta.iter_mut().zip(grow).for_each(|(x, &y)| *x = *x + y);
                    }
                }
                if let Some(dx) = slot(adj, nodes, *x) {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rstd.len() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = grow[j] * gv[j];
                            m1 = m1 + dxhat[j];
                            m2 = m2 + dxhat[j] * hrow[j];
                        }
                        m1 = m1 * inv_d;
                        m2 = m2 * inv_d;
                        let out = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] = out[j] + rstd[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                if let Some(da) = slot(adj, nodes, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum::<T>();
                        for j in 0..c {
                            drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = node.value.data();
                let c = *node.value.shape().last().unwrap_or(&1);
                if let Some(da) = slot(adj, nodes, *a) {
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let total = grow.iter().copied().sum::<T>();
                        for j in 0..c {
                            drow[j] = drow[j] + grow[j] - yrow[j].fast_exp() * total;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(da) = slot(adj, nodes, *a) {
                    da.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                }
            }
            Op::Permute { a, perm } => {
                let shape = nodes[*a].value.shape().to_vec();
                if let Some(da) = slot(adj, nodes, *a) {
                    for_each_permuted(&shape, perm, |o, i| da[i] = da[i] + g[o]);
                }
            }
            Op::Slice { a, axis, start } => {
                let shape = nodes[*a].value.shape().to_vec();
                let len = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(&shape, *axis);
                if let Some(da) = slot(adj, nodes, *a) {
                    for o in 0..outer {
                        let base = (o * shape[*axis] + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        da[base..base + len * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in inputs {
                    let len = nodes[p].value.shape()[*axis] * inner;
                    if let Some(dp) = slot(adj, nodes, p) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            dp[o * len..(o + 1) * len]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x = *x + y);
                        }
                    }
                    offset += len;
                }
            }
            Op::Sum { a } => {
                if let Some(da) = slot(adj, nodes, *a) {
                    da.iter_mut().for_each(|x| *x = *x + g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(da) = slot(adj, nodes, *a) {
                    let share = g[0] / T::lit(da.len() as f64);
                    da.iter_mut().for_each(|x| *x = *x + share);
                }
            }
            Op::MeanAxis { a, axis } => {
                let shape = nodes[*a].value.shape().to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let n = shape[*axis];
                let inv = T::one() / T::lit(n as f64);
                if let Some(da) = slot(adj, nodes, *a) {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for r in 0..n {
                            let drow = &mut da[(o * n + r) * inner..(o * n + r + 1) * inner];
                            drow.iter_mut().zip(grow).for_each(|(x, &y)| *x = *x + y * inv);
                        }
                    }
                }
            }
            Op::Gather { table, indices } => {
                let d = nodes[*table].value.shape()[1];
                if let Some(dt) = slot(adj, nodes, *table) {
                    for (r, &i) in indices.iter().enumerate() {
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
        }
    }
}

/// Adjoint buffer for node `id`, zero-initialized on first use; `None` when
/// the node does not need a gradient.
fn slot<'a, T: Scalar>(
    adj: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'a mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(adj[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.len()]))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// Calls `f(out_flat, in_flat)` for every element of the permuted tensor.
fn for_each_permuted(shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = shape.len();
    if rank == 0 {
        f(0, 0);
        return;
    }
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    let mut o = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(o, base + j * inner_stride);
            o += 1;
        }
        // Odometer increment over the outer output axes.
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::dim("softmax on a rank-0 tensor"))?;
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(c) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        if log {
            let lse = row.iter().map(|&z| (z - max).fast_exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&z| z - max - lse));
        } else {
            let start = out.len();
            out.extend(row.iter().map(|&z| (z - max).fast_exp()));
            let inv = T::one() / out[start..].iter().copied().sum::<T>();
            out[start..].iter_mut().for_each(|v| *v = *v * inv);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

#[inline(always)]
fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

#[inline(always)]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).fast_tanh())
}

#[inline(always)]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).fast_tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Sum accumulated in f64, so long f32 reductions do not drift.
fn wide_sum<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).sum()
}
