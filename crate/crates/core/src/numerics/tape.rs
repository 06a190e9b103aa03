//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the tape in reverse from a
//! scalar loss and accumulates gradients into leaf nodes only, so calling it
//! twice adds the leaf gradients twice.

use rand::Rng;

use super::tensor::{check_finite, check_shape, Real, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var, n: usize },
    Scale { x: Var, c: T },
    Relu(Var),
    Exp(Var),
    Softmax { x: Var, layout: AxisLayout },
    LogSoftmax { x: Var, layout: AxisLayout },
    LayerNorm { x: Var, gamma: Var, beta: Var, n: usize, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    Concat { a: Var, b: Var, na: usize, nb: usize },
    MaxAxis { x: Var, argmax: Vec<usize> },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    RepeatAxis1 { x: Var, t: usize, d: usize },
    Sum(Var),
    WeightedSum { x: Var, w: Vec<T> },
}

/// Outer/axis/inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Result<Self, NumericsError> {
        if axis >= shape.len() {
            return Err(NumericsError::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn slice_start(&self, o: usize, i: usize) -> usize {
        o * self.len * self.inner + i
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of a forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node { value, shape, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a tensor onto the tape; it participates in gradients iff it requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var, NumericsError> {
        let t = Tensor::new(shape, data)?.requiring_grad();
        Ok(self.leaf(&t))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient accumulated into a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Returns the leaf's value as a tensor (no grad).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("tape shapes are valid")
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Matrix product of `a[.., k]` (leading extents flattened into rows) with `b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(NumericsError::Shape(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).len() / k;
        let mut out = vec![T::zero(); m * n];
        // SAFETY: buffers are sized m*k, k*n and m*n row-major.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.value(a).as_ptr(),
                k as isize,
                1,
                self.value(b).as_ptr(),
                n as isize,
                1,
                T::zero(),
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `a[B, m, k] x b[B, k, n]`, or `a x b^T` with `b[B, n, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NumericsError::Shape(format!("batch_matmul {:?} x {:?}", sa, sb)));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(NumericsError::Shape(format!("batch_matmul inner {k} vs {kb}")));
        }
        let (rsb, csb) = if transpose_b { (1isize, k as isize) } else { (n as isize, 1isize) };
        let mut out = vec![T::zero(); batch * m * n];
        let av = self.value(a);
        let bv = self.value(b);
        for bi in 0..batch {
            // SAFETY: each batch slice is a contiguous m*k, k*n (or n*k) and m*n block.
            unsafe {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    av.as_ptr().add(bi * m * k),
                    k as isize,
                    1,
                    bv.as_ptr().add(bi * k * n),
                    rsb,
                    csb,
                    T::zero(),
                    out.as_mut_ptr().add(bi * m * n),
                    n as isize,
                    1,
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![batch, m, n], Op::BatchMatMul { a, b, batch, m, k, n, transpose_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    /// `x[.., n] + bias[n]`, the only broadcast supported.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(bias) != [n] {
            return Err(NumericsError::Shape(format!(
                "bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let bv = self.value(bias);
        let out = self.value(x).chunks(n).flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b)).collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias { x, bias, n }, rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Scale { x, c }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.exp()).collect();
        let rg = self.rg(x);
        self.push(out, self.shape(x).to_vec(), Op::Exp(x), rg)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.softmax_masked(x, axis, None)
    }

    /// Softmax along `axis` where entries with `allowed[i] == false` get probability
    /// exactly zero. Every slice needs at least one allowed entry.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, allowed: Option<&[bool]>) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        check_finite(xv, "softmax input")?;
        if let Some(m) = allowed {
            if m.len() != xv.len() {
                return Err(NumericsError::Shape("softmax mask length".into()));
            }
        }
        let layout = AxisLayout::new(self.shape(x), axis)?;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let start = layout.slice_start(o, i);
                let idx = |j: usize| start + j * layout.inner;
                let ok = |j: usize| allowed.map_or(true, |m| m[idx(j)]);
                let mut max = T::neg_infinity();
                for j in 0..layout.len {
                    if ok(j) && xv[idx(j)] > max {
                        max = xv[idx(j)];
                    }
                }
                if max == T::neg_infinity() {
                    return Err(NumericsError::Contract("softmax slice has no allowed entries".into()));
                }
                let mut sum = T::zero();
                for j in 0..layout.len {
                    if ok(j) {
                        let e = (xv[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        sum += e;
                    }
                }
                for j in 0..layout.len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Softmax { x, layout }, rg))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let xv = self.value(x);
        check_finite(xv, "log_softmax input")?;
        let layout = AxisLayout::new(self.shape(x), axis)?;
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let start = layout.slice_start(o, i);
                let idx = |j: usize| start + j * layout.inner;
                let max = (0..layout.len).map(|j| xv[idx(j)]).fold(T::neg_infinity(), T::max);
                let lse = (0..layout.len).map(|j| (xv[idx(j)] - max).exp()).sum::<T>().ln() + max;
                for j in 0..layout.len {
                    out[idx(j)] = xv[idx(j)] - lse;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LogSoftmax { x, layout }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, NumericsError> {
        let n = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(NumericsError::Shape("layer_norm affine parameters".into()));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let nt = T::from_usize(n).unwrap();
        let rows = xv.len() / n;
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, self.shape(x).to_vec(), Op::LayerNorm { x, gamma, beta, n, xhat, rstd }, rg))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and rescales the rest.
    /// A zero rate returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<T> =
            (0..self.value(x).len()).map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Dropout { x, mask }, rg))
    }

    /// Gathers rows of `table[V, D]`; the output has shape `out_shape + [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var, NumericsError> {
        let ts = self.shape(table);
        if ts.len() != 2 {
            return Err(NumericsError::Shape("embedding table must be rank 2".into()));
        }
        let (vocab, dim) = (ts[0], ts[1]);
        if out_shape.iter().product::<usize>() != ids.len() {
            return Err(NumericsError::Shape("embedding ids do not fill out_shape".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(NumericsError::Contract(format!("token id {bad} >= vocabulary size {vocab}")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(out, shape, Op::Embedding { table, ids: ids.to_vec(), dim }, rg))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(NumericsError::Shape(format!("concat {:?} with {:?}", sa, sb)));
        }
        let na = sa[sa.len() - 1];
        let nb = sb[sb.len() - 1];
        let av = self.value(a);
        let bv = self.value(b);
        let rows = av.len() / na;
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for r in 0..rows {
            out.extend_from_slice(&av[r * na..(r + 1) * na]);
            out.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = na + nb;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Concat { a, b, na, nb }, rg))
    }

    /// Maximum over `axis`, recording the argmax (lowest index on ties).
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.max_axis_masked(x, axis, None)
    }

    /// Maximum over `axis` restricted to entries with `eligible[i] == true`.
    pub fn max_axis_masked(&mut self, x: Var, axis: usize, eligible: Option<&[bool]>) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let layout = AxisLayout::new(&shape, axis)?;
        let xv = self.value(x);
        if let Some(m) = eligible {
            if m.len() != xv.len() {
                return Err(NumericsError::Shape("max mask length".into()));
            }
        }
        let mut out = Vec::with_capacity(layout.outer * layout.inner);
        let mut argmax = Vec::with_capacity(layout.outer * layout.inner);
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let start = layout.slice_start(o, i);
                let mut best: Option<usize> = None;
                for j in 0..layout.len {
                    let p = start + j * layout.inner;
                    if eligible.map_or(true, |m| m[p]) && best.map_or(true, |b| xv[p] > xv[b]) {
                        best = Some(p);
                    }
                }
                let Some(b) = best else {
                    return Err(NumericsError::Contract("max over a slice with no eligible entries".into()));
                };
                out.push(xv[b]);
                argmax.push(b);
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(d, _)| d != axis).map(|(_, &e)| e).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(out, out_shape, Op::MaxAxis { x, argmax }, rg))
    }

    /// Axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(NumericsError::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x), &shape, perm);
        let rg = self.rg(x);
        Ok(self.push(out, out_shape, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NumericsError::Shape(format!("reshape {:?} to {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape.to_vec(), Op::Reshape(x), rg))
    }

    /// Repeats `x[B, D]` along a new time axis: `[B, t, D]`.
    pub fn repeat_axis1(&mut self, x: Var, t: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || t == 0 {
            return Err(NumericsError::Shape(format!("repeat_axis1 expects [B, D], got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * t * d);
        for bi in 0..b {
            for _ in 0..t {
                out.extend_from_slice(&xv[bi * d..(bi + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, vec![b, t, d], Op::RepeatAxis1 { x, t, d }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// `sum_i w[i] * x[i]` for constant weights.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<T>) -> Result<Var, NumericsError> {
        if w.len() != self.value(x).len() {
            return Err(NumericsError::Shape("weighted_sum weight length".into()));
        }
        let s = self.value(x).iter().zip(&w).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s], vec![1], Op::WeightedSum { x, w }, rg))
    }

    /// Accumulates d(loss)/d(leaf) into every gradient-requiring leaf reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if self.value(loss).len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        check_finite(self.value(loss), "loss")?;
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[v.0].requires_grad {
                    return;
                }
                let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(buf);
            };
            match &node.op {
                Op::Leaf => {
                    let buf = self.leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    // dA = dC B^T
                    acc(a, &mut |ga| unsafe {
                        T::gemm(m, n, k, T::one(), g.as_ptr(), n as isize, 1, bv.as_ptr(), 1, n as isize, T::one(), ga.as_mut_ptr(), k as isize, 1);
                    });
                    // dB = A^T dC
                    acc(b, &mut |gb| unsafe {
                        T::gemm(k, m, n, T::one(), av.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, T::one(), gb.as_mut_ptr(), n as isize, 1);
                    });
                }
                &Op::BatchMatMul { a, b, batch, m, k, n, transpose_b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(a, &mut |ga| {
                        for bi in 0..batch {
                            let (rsb, csb) = if transpose_b { (k as isize, 1) } else { (1, n as isize) };
                            // dA = dC B^T (or dC B when b is stored transposed)
                            unsafe {
                                T::gemm(m, n, k, T::one(), g.as_ptr().add(bi * m * n), n as isize, 1, bv.as_ptr().add(bi * k * n), rsb, csb, T::one(), ga.as_mut_ptr().add(bi * m * k), k as isize, 1);
                            }
                        }
                    });
                    acc(b, &mut |gb| {
                        for bi in 0..batch {
                            unsafe {
                                if transpose_b {
                                    // dB[n,k] = dC^T A
                                    T::gemm(n, m, k, T::one(), g.as_ptr().add(bi * m * n), 1, n as isize, av.as_ptr().add(bi * m * k), k as isize, 1, T::one(), gb.as_mut_ptr().add(bi * k * n), k as isize, 1);
                                } else {
                                    // dB[k,n] = A^T dC
                                    T::gemm(k, m, n, T::one(), av.as_ptr().add(bi * m * k), 1, k as isize, g.as_ptr().add(bi * m * n), n as isize, 1, T::one(), gb.as_mut_ptr().add(bi * k * n), n as isize, 1);
                                }
                            }
                        }
                    });
                }
                &Op::Add(a, b) => {
                    acc(a, &mut |ga| add_into(ga, &g));
                    acc(b, &mut |gb| add_into(gb, &g));
                }
                &Op::Sub(a, b) => {
                    acc(a, &mut |ga| add_into(ga, &g));
                    acc(b, &mut |gb| gb.iter_mut().zip(&g).for_each(|(d, &s)| *d -= s));
                }
                &Op::Mul(a, b) => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    acc(a, &mut |ga| ga.iter_mut().zip(g.iter().zip(bv)).for_each(|(d, (&s, &o))| *d += s * o));
                    acc(b, &mut |gb| gb.iter_mut().zip(g.iter().zip(av)).for_each(|(d, (&s, &o))| *d += s * o));
                }
                &Op::AddBias { x, bias, n } => {
                    acc(x, &mut |gx| add_into(gx, &g));
                    acc(bias, &mut |gb| {
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    });
                }
                &Op::Scale { x, c } => acc(x, &mut |gx| gx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s * c)),
                &Op::Relu(x) => {
                    let y = &node.value;
                    acc(x, &mut |gx| {
                        gx.iter_mut().zip(g.iter().zip(y)).for_each(|(d, (&s, &o))| {
                            if o > T::zero() {
                                *d += s
                            }
                        })
                    });
                }
                &Op::Exp(x) => {
                    let y = &node.value;
                    acc(x, &mut |gx| gx.iter_mut().zip(g.iter().zip(y)).for_each(|(d, (&s, &o))| *d += s * o));
                }
                &Op::Softmax { x, layout } => {
                    let y = &node.value;
                    acc(x, &mut |gx| {
                        for o in 0..layout.outer {
                            for i in 0..layout.inner {
                                let start = layout.slice_start(o, i);
                                let dot: T = (0..layout.len).map(|j| g[start + j * layout.inner] * y[start + j * layout.inner]).sum();
                                for j in 0..layout.len {
                                    let p = start + j * layout.inner;
                                    gx[p] += y[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
                &Op::LogSoftmax { x, layout } => {
                    let y = &node.value;
                    acc(x, &mut |gx| {
                        for o in 0..layout.outer {
                            for i in 0..layout.inner {
                                let start = layout.slice_start(o, i);
                                let total: T = (0..layout.len).map(|j| g[start + j * layout.inner]).sum();
                                for j in 0..layout.len {
                                    let p = start + j * layout.inner;
                                    gx[p] += g[p] - y[p].exp() * total;
                                }
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta, n, xhat, rstd } => {
                    let n = *n;
                    let gv = &nodes[gamma.0].value;
                    acc(*gamma, &mut |gg| {
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            gg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(d, (&s, &h))| *d += s * h);
                        }
                    });
                    acc(*beta, &mut |gb| {
                        for grow in g.chunks(n) {
                            add_into(gb, grow);
                        }
                    });
                    let nt = T::from_usize(n).unwrap();
                    acc(*x, &mut |gx| {
                        for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                            let mut mean_dh = T::zero();
                            let mut mean_dh_h = T::zero();
                            for j in 0..n {
                                let dh = grow[j] * gv[j];
                                mean_dh += dh;
                                mean_dh_h += dh * hrow[j];
                            }
                            mean_dh /= nt;
                            mean_dh_h /= nt;
                            for j in 0..n {
                                let dh = grow[j] * gv[j];
                                gx[r * n + j] += rstd[r] * (dh - mean_dh - hrow[j] * mean_dh_h);
                            }
                        }
                    });
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &mut |gx| gx.iter_mut().zip(g.iter().zip(mask)).for_each(|(d, (&s, &m))| *d += s * m));
                }
                Op::Embedding { table, ids, dim } => {
                    let dim = *dim;
                    acc(*table, &mut |gt| {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    });
                }
                &Op::Concat { a, b, na, nb } => {
                    let w = na + nb;
                    acc(a, &mut |ga| {
                        for (r, row) in g.chunks(w).enumerate() {
                            add_into(&mut ga[r * na..(r + 1) * na], &row[..na]);
                        }
                    });
                    acc(b, &mut |gb| {
                        for (r, row) in g.chunks(w).enumerate() {
                            add_into(&mut gb[r * nb..(r + 1) * nb], &row[na..]);
                        }
                    });
                }
                Op::MaxAxis { x, argmax } => {
                    acc(*x, &mut |gx| {
                        for (&p, &s) in argmax.iter().zip(&g) {
                            gx[p] += s;
                        }
                    });
                }
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (d, &p) in perm.iter().enumerate() {
                        inverse[p] = d;
                    }
                    let back = permute_data(&g, &node.shape, &inverse);
                    acc(*x, &mut |gx| add_into(gx, &back));
                }
                &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, &g)),
                &Op::RepeatAxis1 { x, t, d } => {
                    acc(x, &mut |gx| {
                        for (bt, row) in g.chunks(d).enumerate() {
                            let bi = bt / t;
                            add_into(&mut gx[bi * d..(bi + 1) * d], row);
                        }
                    });
                }
                &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d += g[0])),
                Op::WeightedSum { x, w } => {
                    acc(*x, &mut |gx| gx.iter_mut().zip(w).for_each(|(d, &wi)| *d += g[0] * wi));
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = t.matmul(i2, a).unwrap();
        assert_eq!(t.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let col = t.constant(vec![2, 1], vec![0.0, 1.0]).unwrap();
        let p = t.matmul(a, col).unwrap();
        assert_eq!(t.shape(p), &[2, 1]);
        assert_eq!(t.value(p), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let va = t.constant(vec![3, 4], a.clone()).unwrap();
        let vb = t.constant(vec![4, 2], b.clone()).unwrap();
        let p = t.matmul(va, vb).unwrap();
        for (x, y) in t.value(p).iter().zip(naive_matmul(&a, &b, 3, 4, 2)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(t.matmul(a, b), Err(NumericsError::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        for &v in t.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = t.constant(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!((t.value(s)[0] - 0.25).abs() < 1e-12);
        assert!((t.value(s)[1] - 0.75).abs() < 1e-12);
        let x = t.constant(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert!((t.value(s)[0] - 1.0).abs() < 1e-12);
        assert!(t.value(s)[1] >= 0.0 && t.value(s)[1] < 1e-300);
        let x = t.constant(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(t.softmax(x, 0), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![1, 3], vec![5.0, 1.0, 1.0]).unwrap();
        let s = t.softmax_masked(x, 1, Some(&[false, true, true])).unwrap();
        assert_eq!(t.value(s), &[0.0, 0.5, 0.5]);
        assert!(t.softmax_masked(x, 1, Some(&[false, false, false])).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut t = Tape::<f64>::new();
        let w = t.variable(vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let s = t.sum(w);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t = Tape::<f64>::new();
        let w = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        let sq = t.mul(w, w).unwrap();
        let s = t.sum(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[2.0, 4.0]);
        // second call accumulates
        t.backward(s).unwrap();
        assert_eq!(t.grad(w).unwrap(), &[4.0, 8.0]);
        t.zero_grads();
        assert!(t.grad(w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::<f64>::new();
        let w = t.variable(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.backward(w), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn max_ties_route_to_lowest_index() {
        let mut t = Tape::<f64>::new();
        let x = t.variable(vec![3, 2], vec![1.0, 4.0, 3.0, 4.0, 3.0, 0.0]).unwrap();
        let m = t.max_axis(x, 0).unwrap();
        assert_eq!(t.value(m), &[3.0, 4.0]);
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn permute_round_trip() {
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = t.constant(vec![2, 3, 4], data.clone()).unwrap();
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(t.shape(p), &[4, 2, 3]);
        // element [k, i, j] of the permuted tensor is x[i, j, k]
        assert_eq!(t.value(p)[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = t.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value(back), &data[..]);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::<f64>::new();
        let x = t.constant(vec![4], vec![1.0; 4]).unwrap();
        assert_eq!(t.dropout(x, 0.0, &mut rng).unwrap(), x);
        let d = t.dropout(x, 0.5, &mut rng).unwrap();
        assert!(t.value(d).iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(t.dropout(x, 1.0, &mut rng).is_err());
    }
}
