use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
///
/// Handles carry the tape generation they were created in; using one after
/// the tape has been cleared is a state error rather than silent aliasing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    gen: u64,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param {
        slot: usize,
        name: String,
    },
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` is a single `[k, n]` matrix shared by every batch row.
        shared_b: bool,
    },
    Add {
        a: usize,
        b: usize,
        bias: bool,
    },
    MulScalar {
        a: usize,
        s: T,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        in_width: usize,
        offset: usize,
        width: usize,
    },
    Reshape {
        a: usize,
    },
    Embedding {
        table: usize,
        indices: Vec<usize>,
        dim: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        dim: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax {
        a: usize,
        dim: usize,
    },
    Relu {
        a: usize,
    },
    Dropout {
        a: usize,
        scale: Vec<T>,
    },
    MaskedFill {
        a: usize,
        mask: Vec<bool>,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Sum {
        a: usize,
    },
    Mse {
        a: usize,
        b: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Linear record of forward ops for reverse-mode differentiation.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, usize>,
    gen: u64,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), param_nodes: HashMap::new(), gen: 0, consumed: false }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node without computing gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.gen += 1;
        self.consumed = false;
    }

    fn check(&self, v: Var) -> Result<&Node<T>> {
        if v.gen != self.gen || v.idx >= self.nodes.len() {
            return Err(TensorError::State(
                "variable belongs to a cleared tape; run a new forward pass".into(),
            ));
        }
        Ok(&self.nodes[v.idx])
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.consumed = false;
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var { idx: self.nodes.len() - 1, gen: self.gen }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.check(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(&self.check(v)?.shape)
    }

    pub fn tensor(&self, v: Var) -> Result<Tensor<T>> {
        let node = self.check(v)?;
        Tensor::new(node.shape.clone(), node.value.clone())
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: Vec<usize>, values: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.constant(&t))
    }

    /// Records a parameter from `store`. Repeated calls for the same name
    /// within one pass return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let slot = store
            .index_of(name)
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))?;
        if let Some(&idx) = self.param_nodes.get(&slot) {
            return Ok(Var { idx, gen: self.gen });
        }
        let t = store.get(name).expect("slot resolved above");
        let v = self.push(
            t.shape().to_vec(),
            t.values().to_vec(),
            Op::Param { slot, name: name.to_string() },
            true,
        );
        self.param_nodes.insert(slot, v.idx);
        Ok(v)
    }

    /// Matrix product over the last two dimensions.
    ///
    /// `a: [.., m, k]` times `b: [k, n]` treats every leading index of `a`
    /// as extra rows. `a: [B, m, k]` times `b: [B, k, n]` is a batched product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa.len() < 2 || sb.len() < 2 || sb.len() > 3 {
            return Err(TensorError::shape("matmul", format!("unsupported ranks {sa:?} x {sb:?}")));
        }
        let k = sa[sa.len() - 1];
        let (batch, m, n, shared_b, out_shape) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(TensorError::shape(
                    "matmul",
                    format!("inner dimensions differ: {sa:?} x {sb:?}"),
                ));
            }
            let rows = numel(&sa[..sa.len() - 1]);
            let mut out = sa[..sa.len() - 1].to_vec();
            out.push(sb[1]);
            (1, rows, sb[1], true, out)
        } else {
            if sa.len() != 3 || sa[0] != sb[0] || sb[1] != k {
                return Err(TensorError::shape(
                    "matmul",
                    format!("batched operands do not conform: {sa:?} x {sb:?}"),
                ));
            }
            (sa[0], sa[1], sb[2], false, vec![sa[0], sa[1], sb[2]])
        };
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = &self.nodes[a.idx].value;
            let bv = &self.nodes[b.idx].value;
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                gemm(
                    &av[bi * m * k..(bi + 1) * m * k],
                    &bv[b_off..b_off + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, out, Op::MatMul { a: a.idx, b: b.idx, batch, m, k, n, shared_b }, rg))
    }

    /// Elementwise sum. When `b` is one-dimensional with the length of the
    /// last dimension of `a`, it is added to every row (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        let bias = if sa == sb {
            false
        } else if sb.len() == 1 && sa.last() == sb.first() {
            true
        } else {
            return Err(TensorError::shape("add", format!("cannot add {sb:?} to {sa:?}")));
        };
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let out: Vec<T> = if bias {
            let d = bv.len();
            av.chunks_exact(d)
                .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
                .collect()
        } else {
            av.iter().zip(bv).map(|(&x, &y)| x + y).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(sa, out, Op::Add { a: a.idx, b: b.idx, bias }, rg))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let node = self.check(a)?;
        let s = T::from_f64(s);
        let out = node.value.iter().map(|&x| x * s).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::MulScalar { a: a.idx, s }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let s0 = self.check(*first)?.shape.clone();
        if axis >= s0.len() {
            return Err(TensorError::shape("concat", format!("axis {axis} out of range for {s0:?}")));
        }
        let outer = numel(&s0[..axis]);
        let inner = numel(&s0[axis + 1..]);
        let mut widths = Vec::with_capacity(inputs.len());
        let mut axis_len = 0;
        for v in inputs {
            let s = &self.check(*v)?.shape;
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(TensorError::shape(
                    "concat",
                    format!("shape {s:?} does not conform to {s0:?} along axis {axis}"),
                ));
            }
            axis_len += s[axis];
            widths.push(s[axis] * inner);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[v.idx].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = s0;
        shape[axis] = axis_len;
        let rg = inputs.iter().any(|v| self.rg(*v));
        let idx = inputs.iter().map(|v| v.idx).collect();
        Ok(self.push(shape, out, Op::Concat { inputs: idx, outer, widths }, rg))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.check(a)?.shape.clone();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::shape(
                "slice",
                format!("range {start}..{} on axis {axis} invalid for {s:?}", start + len),
            ));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let in_width = s[axis] * inner;
        let offset = start * inner;
        let width = len * inner;
        let av = &self.nodes[a.idx].value;
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&av[o * in_width + offset..o * in_width + offset + width]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Slice { a: a.idx, outer, in_width, offset, width }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let node = self.check(a)?;
        if numel(&shape) != node.value.len() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", node.shape),
            ));
        }
        let value = node.value.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, value, Op::Reshape { a: a.idx }, rg))
    }

    /// Gathers rows of `table: [V, d]`. The output has shape
    /// `prefix ++ [d]` where `numel(prefix) == indices.len()`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize], prefix: &[usize]) -> Result<Var> {
        let s = self.check(table)?.shape.clone();
        if s.len() != 2 {
            return Err(TensorError::shape("embedding_lookup", format!("table must be 2-D, got {s:?}")));
        }
        if numel(prefix) != indices.len() || indices.is_empty() {
            return Err(TensorError::shape(
                "embedding_lookup",
                format!("prefix {prefix:?} does not hold {} indices", indices.len()),
            ));
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::shape(
                "embedding_lookup",
                format!("index {bad} out of range for table with {rows} rows"),
            ));
        }
        let tv = &self.nodes[table.idx].value;
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = prefix.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(shape, out, Op::Embedding { table: table.idx, indices: indices.to_vec(), dim }, rg))
    }

    /// Normalizes over the last dimension with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.check(x)?.shape.clone();
        let d = *s.last().expect("non-empty shape");
        for (name, p) in [("gain", gain), ("bias", bias)] {
            let sp = &self.check(p)?.shape;
            if sp.as_slice() != [d] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("{name} shape {sp:?} does not match last dimension {d}"),
                ));
            }
        }
        if !(eps >= 0.0) {
            return Err(TensorError::Parameter { op: "layer_norm", detail: format!("eps {eps} < 0") });
        }
        let xv = &self.nodes[x.idx].value;
        let gv = &self.nodes[gain.idx].value;
        let bv = &self.nodes[bias.idx].value;
        let rows = xv.len() / d;
        let dt = T::from_f64(d as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            s,
            out,
            Op::LayerNorm { x: x.idx, gain: gain.idx, bias: bias.idx, dim: d, xhat, inv_std },
            rg,
        ))
    }

    /// Softmax over the last dimension. A row that is entirely `-inf`
    /// (fully masked) produces all zeros.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let d = *node.shape.last().expect("non-empty shape");
        let mut out = vec![T::zero(); node.value.len()];
        for (src, dst) in node.value.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - max).exp();
                total += *o;
            }
            let inv = T::one() / total;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::Softmax { a: a.idx, dim: d }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let out = node.value.iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::Relu { a: a.idx }, rg))
    }

    /// Inverted dropout. Identity (no node recorded) when `train` is false
    /// or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        self.check(a)?;
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Parameter {
                op: "dropout",
                detail: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let node = &self.nodes[a.idx];
        let scale: Vec<T> = (0..node.value.len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = node.value.iter().zip(&scale).map(|(&x, &s)| x * s).collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::Dropout { a: a.idx, scale }, rg))
    }

    /// Replaces entries where `mask` is true with `value`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let node = self.check(a)?;
        if mask.len() != node.value.len() {
            return Err(TensorError::shape(
                "masked_fill",
                format!("mask length {} != tensor length {}", mask.len(), node.value.len()),
            ));
        }
        let fill = T::from_f64(value);
        let out = node
            .value
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let shape = node.shape.clone();
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::MaskedFill { a: a.idx, mask: mask.to_vec() }, rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let s = &node.shape;
        if s.len() < 2 {
            return Err(TensorError::shape("transpose_last2", format!("rank of {s:?} < 2")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = numel(&s[..s.len() - 2]);
        let mut out = vec![T::zero(); node.value.len()];
        for b in 0..batch {
            transpose_into(&node.value[b * rows * cols..(b + 1) * rows * cols], &mut out[b * rows * cols..(b + 1) * rows * cols], rows, cols);
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let rg = node.requires_grad;
        Ok(self.push(shape, out, Op::Transpose { a: a.idx, batch, rows, cols }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        let total = node.value.iter().copied().sum::<T>();
        let rg = node.requires_grad;
        Ok(self.push(vec![1], vec![total], Op::Sum { a: a.idx }, rg))
    }

    /// Mean over all elements of `(a - b)^2`.
    pub fn mean_squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = &self.check(a)?.shape;
        let sb = &self.check(b)?.shape;
        if sa != sb {
            return Err(TensorError::shape("mean_squared_error", format!("{sa:?} vs {sb:?}")));
        }
        let av = &self.nodes[a.idx].value;
        let bv = &self.nodes[b.idx].value;
        let n = T::from_f64(av.len() as f64);
        let total = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![total], Op::Mse { a: a.idx, b: b.idx }, rg))
    }

    /// Back-propagates from a scalar `loss` and stores gradients into
    /// `store`. Parameters not reached by the loss receive zero gradients.
    /// The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        if self.consumed {
            return Err(TensorError::State(
                "backward called twice without a new forward pass".into(),
            ));
        }
        let shape = self.check(loss)?.shape.clone();
        if shape != [1] {
            return Err(TensorError::Contract(format!("loss must have shape [1], got {shape:?}")));
        }
        for node in &self.nodes {
            if let Op::Param { slot, name } = &node.op {
                match store.get_index(*slot) {
                    Some((n, t)) if n == name && t.numel() == node.value.len() => {}
                    _ => {
                        return Err(TensorError::Contract(format!(
                            "parameter `{name}` recorded on the tape is not in the given store"
                        )))
                    }
                }
            }
        }
        store.zero_grad();

        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.idx).map(|_| None).collect();
        grads[loss.idx] = Some(vec![T::one()]);
        for i in (0..=loss.idx).rev() {
            let (lo, hi) = grads.split_at_mut(i);
            let Some(gy) = hi[0].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let wants = |j: usize| nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::Param { slot, .. } => {
                    let t = store.get_index_mut(*slot).expect("validated above");
                    t.set_grad(Some(gy))?;
                }
                &Op::MatMul { a, b, batch, m, k, n, shared_b } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        let mut bt = vec![T::zero(); k * n];
                        for bi in 0..batch {
                            let b_off = if shared_b { 0 } else { bi * k * n };
                            if bi == 0 || !shared_b {
                                transpose_into(&bv[b_off..b_off + k * n], &mut bt, k, n);
                            }
                            gemm(
                                &gy[bi * m * n..(bi + 1) * m * n],
                                &bt,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                                m,
                                n,
                                k,
                            );
                        }
                    }
                    if wants(b) {
                        let gb = slot(lo, nodes, b);
                        for bi in 0..batch {
                            let b_off = if shared_b { 0 } else { bi * k * n };
                            gemm_tn(
                                &av[bi * m * k..(bi + 1) * m * k],
                                &gy[bi * m * n..(bi + 1) * m * n],
                                &mut gb[b_off..b_off + k * n],
                                m,
                                k,
                                n,
                            );
                        }
                    }
                }
                &Op::Add { a, b, bias } => {
                    if wants(a) {
                        axpy(slot(lo, nodes, a), T::one(), &gy);
                    }
                    if wants(b) {
                        let gb = slot(lo, nodes, b);
                        if bias {
                            for row in gy.chunks_exact(gb.len()) {
                                axpy(gb, T::one(), row);
                            }
                        } else {
                            axpy(gb, T::one(), &gy);
                        }
                    }
                }
                &Op::MulScalar { a, s } => {
                    if wants(a) {
                        axpy(slot(lo, nodes, a), s, &gy);
                    }
                }
                Op::Concat { inputs, outer, widths } => {
                    let total: usize = widths.iter().sum();
                    let mut col = 0;
                    for (&j, &w) in inputs.iter().zip(widths) {
                        if wants(j) {
                            let gj = slot(lo, nodes, j);
                            for o in 0..*outer {
                                axpy(
                                    &mut gj[o * w..(o + 1) * w],
                                    T::one(),
                                    &gy[o * total + col..o * total + col + w],
                                );
                            }
                        }
                        col += w;
                    }
                }
                &Op::Slice { a, outer, in_width, offset, width } => {
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        for o in 0..outer {
                            let start = o * in_width + offset;
                            axpy(&mut ga[start..start + width], T::one(), &gy[o * width..(o + 1) * width]);
                        }
                    }
                }
                &Op::Reshape { a } => {
                    if wants(a) {
                        axpy(slot(lo, nodes, a), T::one(), &gy);
                    }
                }
                Op::Embedding { table, indices, dim } => {
                    if wants(*table) {
                        let gt = slot(lo, nodes, *table);
                        for (r, &ix) in indices.iter().enumerate() {
                            axpy(&mut gt[ix * dim..(ix + 1) * dim], T::one(), &gy[r * dim..(r + 1) * dim]);
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, dim, xhat, inv_std } => {
                    let d = *dim;
                    let gv = &nodes[*gain].value;
                    if wants(*gain) {
                        let gg = slot(lo, nodes, *gain);
                        for (row_g, row_h) in gy.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                gg[j] += row_g[j] * row_h[j];
                            }
                        }
                    }
                    if wants(*bias) {
                        let gb = slot(lo, nodes, *bias);
                        for row in gy.chunks_exact(d) {
                            axpy(gb, T::one(), row);
                        }
                    }
                    if wants(*x) {
                        let gx = slot(lo, nodes, *x);
                        let dt = T::from_f64(d as f64);
                        let mut dxhat = vec![T::zero(); d];
                        for (r, &inv) in inv_std.iter().enumerate() {
                            let rg = &gy[r * d..(r + 1) * d];
                            let rh = &xhat[r * d..(r + 1) * d];
                            let mut mean_d = T::zero();
                            let mut mean_dh = T::zero();
                            for j in 0..d {
                                dxhat[j] = rg[j] * gv[j];
                                mean_d += dxhat[j];
                                mean_dh += dxhat[j] * rh[j];
                            }
                            mean_d = mean_d / dt;
                            mean_dh = mean_dh / dt;
                            let out = &mut gx[r * d..(r + 1) * d];
                            for j in 0..d {
                                out[j] += inv * (dxhat[j] - mean_d - rh[j] * mean_dh);
                            }
                        }
                    }
                }
                &Op::Softmax { a, dim } => {
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        let y = &node.value;
                        for r in 0..y.len() / dim {
                            let yr = &y[r * dim..(r + 1) * dim];
                            let gr = &gy[r * dim..(r + 1) * dim];
                            let dot = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum::<T>();
                            let out = &mut ga[r * dim..(r + 1) * dim];
                            for j in 0..dim {
                                out[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                &Op::Relu { a } => {
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        for ((g, &x), &d) in ga.iter_mut().zip(&nodes[a].value).zip(&gy) {
                            if x > T::zero() {
                                *g += d;
                            }
                        }
                    }
                }
                Op::Dropout { a, scale } => {
                    if wants(*a) {
                        let ga = slot(lo, nodes, *a);
                        for ((g, &s), &d) in ga.iter_mut().zip(scale).zip(&gy) {
                            *g += s * d;
                        }
                    }
                }
                Op::MaskedFill { a, mask } => {
                    if wants(*a) {
                        let ga = slot(lo, nodes, *a);
                        for ((g, &m), &d) in ga.iter_mut().zip(mask).zip(&gy) {
                            if !m {
                                *g += d;
                            }
                        }
                    }
                }
                &Op::Transpose { a, batch, rows, cols } => {
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        let mut tmp = vec![T::zero(); rows * cols];
                        for b in 0..batch {
                            transpose_into(&gy[b * rows * cols..(b + 1) * rows * cols], &mut tmp, cols, rows);
                            axpy(&mut ga[b * rows * cols..(b + 1) * rows * cols], T::one(), &tmp);
                        }
                    }
                }
                &Op::Sum { a } => {
                    if wants(a) {
                        let g = gy[0];
                        slot(lo, nodes, a).iter_mut().for_each(|x| *x += g);
                    }
                }
                &Op::Mse { a, b } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let scale = gy[0] * T::from_f64(2.0 / av.len() as f64);
                    if wants(a) {
                        let ga = slot(lo, nodes, a);
                        for ((g, &x), &y) in ga.iter_mut().zip(av).zip(bv) {
                            *g += scale * (x - y);
                        }
                    }
                    if wants(b) {
                        let gb = slot(lo, nodes, b);
                        for ((g, &x), &y) in gb.iter_mut().zip(av).zip(bv) {
                            *g -= scale * (x - y);
                        }
                    }
                }
            }
        }
        self.nodes.clear();
        self.param_nodes.clear();
        self.gen += 1;
        self.consumed = true;
        Ok(())
    }
}

fn slot<'a, T: Scalar>(lo: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], j: usize) -> &'a mut Vec<T> {
    lo[j].get_or_insert_with(|| vec![T::zero(); nodes[j].value.len()])
}

/// `c += a · b` for row-major `a: [m, k]`, `b: [k, n]`.
fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            axpy(crow, aip, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `c += aᵀ · g` for `a: [m, k]`, `g: [m, n]`, `c: [k, n]`.
fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(&mut c[p * n..(p + 1) * n], a[i * k + p], grow);
        }
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn transpose_into<T: Scalar>(src: &[T], dst: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}
