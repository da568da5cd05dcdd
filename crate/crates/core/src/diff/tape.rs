use super::Array;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SoftmaxLast(Var),
    LayerNormLast {
        src: Var,
        eps: f64,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    MaskedFill {
        src: Var,
        mask: Vec<bool>,
    },
    SumLast(Var),
    SumAll(Var),
}

struct Node {
    value: Array,
    op: Op,
    requires: bool,
    grad: Option<Vec<f64>>,
}

/// Arena-allocated computation graph. Nodes are appended in evaluation
/// order, so a single reverse sweep visits each node after all its users.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self, v: Var) -> Option<Array> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Array::new(node.value.shape().to_vec(), g.clone()))
    }

    fn push(&mut self, value: Array, op: Op, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise and broadcast ----

    /// `a + b`; `b` may equal `a`'s shape, be a scalar, or be a suffix of
    /// `a`'s shape (broadcast over leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip("add", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Add(a, b), req)
    }

    /// Elementwise `a * b` with the same broadcast rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = broadcast_zip("mul", &self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        let req = self.requires(a) || self.requires(b);
        self.push(out, Op::Mul(a, b), req)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = Array::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|v| v * c).collect(),
        );
        let req = self.requires(a);
        self.push(value, Op::Scale(a, c), req)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    // ---- linear algebra ----

    /// `a @ b` for `[n,m]x[m,p]`, batched `[b,n,m]x[b,m,p]`, or a shared
    /// right operand `[b,n,m]x[m,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (batch, n, m, p, shared) = matmul_dims("matmul", self.shape(a), self.shape(b), false);
        let mut out = vec![0.0; batch * n * p];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let bo = if shared { 0 } else { i * m * p };
            mm_nn(
                &da[i * n * m..(i + 1) * n * m],
                &db[bo..bo + m * p],
                n,
                m,
                p,
                &mut out[i * n * p..(i + 1) * n * p],
            );
        }
        let shape = out_shape(self.shape(a), n, p);
        let req = self.requires(a) || self.requires(b);
        self.push(Array::new(shape, out), Op::Matmul(a, b), req)
    }

    /// `a @ b^T` over the last two axes: `[..,n,m] x [..,p,m] -> [..,n,p]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (batch, n, m, p, shared) = matmul_dims("matmul_nt", self.shape(a), self.shape(b), true);
        let mut out = vec![0.0; batch * n * p];
        let (da, db) = (self.data(a), self.data(b));
        for i in 0..batch {
            let bo = if shared { 0 } else { i * p * m };
            mm_nt(
                &da[i * n * m..(i + 1) * n * m],
                &db[bo..bo + p * m],
                n,
                m,
                p,
                &mut out[i * n * p..(i + 1) * n * p],
            );
        }
        let shape = out_shape(self.shape(a), n, p);
        let req = self.requires(a) || self.requires(b);
        self.push(Array::new(shape, out), Op::MatmulNT(a, b), req)
    }

    /// Swaps two axes (materializing the permutation).
    pub fn transpose(&mut self, a: Var, ax1: usize, ax2: usize) -> Var {
        let value = transpose_array(&self.nodes[a.0].value, ax1, ax2);
        let req = self.requires(a);
        self.push(value, Op::Transpose(a, ax1, ax2), req)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.nodes[a.0].value.numel(),
            "reshape: {:?} -> {shape:?} changes element count",
            self.shape(a)
        );
        let value = Array::new(shape, self.data(a).to_vec());
        let req = self.requires(a);
        self.push(value, Op::Reshape(a), req)
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(a).to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice: range {start}..{} out of bounds for axis {axis} of {shape:?}",
            start + len
        );
        let (outer, mid, inner) = axis_split(&shape, axis);
        let src = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let req = self.requires(a);
        self.push(Array::new(new_shape, out), Op::Slice { src: a, axis, start }, req)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat: no inputs");
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0usize;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat: rank mismatch {s:?} vs {first:?}");
            for (ax, (l, r)) in first.iter().zip(s).enumerate() {
                assert!(
                    ax == axis || l == r,
                    "concat: shape mismatch {s:?} vs {first:?} at axis {ax}"
                );
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut shape = first;
        shape[axis] = total;
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let mid = self.shape(p)[axis];
            let src = self.data(p);
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                let sb = o * mid * inner;
                out[dst..dst + mid * inner].copy_from_slice(&src[sb..sb + mid * inner]);
            }
            offset += mid;
        }
        let req = parts.iter().any(|p| self.requires(*p));
        self.push(
            Array::new(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            req,
        )
    }

    // ---- nonlinearities ----

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = Array::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|v| v.tanh()).collect(),
        );
        let req = self.requires(a);
        self.push(value, Op::Tanh(a), req)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = Array::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|v| v.exp()).collect(),
        );
        let req = self.requires(a);
        self.push(value, Op::Exp(a), req)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = Array::new(
            self.shape(a).to_vec(),
            self.data(a).iter().map(|v| v.ln()).collect(),
        );
        let req = self.requires(a);
        self.push(value, Op::Log(a), req)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("softmax: rank >= 1");
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for row in 0..src.len() / cols {
            let s = &src[row * cols..(row + 1) * cols];
            let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, v) in s.iter().enumerate() {
                let e = (v - max).exp();
                out[row * cols + j] = e;
                denom += e;
            }
            for j in 0..cols {
                out[row * cols + j] /= denom;
            }
        }
        let req = self.requires(a);
        self.push(Array::new(shape, out), Op::SoftmaxLast(a), req)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("layer_norm: rank >= 1");
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for row in 0..src.len() / cols {
            let s = &src[row * cols..(row + 1) * cols];
            let mean = s.iter().sum::<f64>() / cols as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[row * cols + j] = (s[j] - mean) * inv;
            }
        }
        let req = self.requires(a);
        self.push(Array::new(shape, out), Op::LayerNormLast { src: a, eps }, req)
    }

    // ---- lookup / masking / reductions ----

    /// Embedding lookup: rows of `table` (`[v, d]`) selected by `indices`,
    /// reshaped to `prefix_shape + [d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize], prefix_shape: &[usize]) -> Var {
        let tshape = self.shape(table).to_vec();
        assert_eq!(tshape.len(), 2, "gather: table must be 2-d, got {tshape:?}");
        assert_eq!(
            prefix_shape.iter().product::<usize>(),
            indices.len(),
            "gather: prefix shape {prefix_shape:?} does not match {} indices",
            indices.len()
        );
        let d = tshape[1];
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            assert!(idx < tshape[0], "gather: index {idx} out of range {}", tshape[0]);
            out.extend_from_slice(&src[idx * d..(idx + 1) * d]);
        }
        let mut shape = prefix_shape.to_vec();
        shape.push(d);
        let req = self.requires(table);
        self.push(
            Array::new(shape, out),
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            req,
        )
    }

    /// Replaces masked positions with `fill`; the mask covers every element.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Var {
        assert_eq!(
            mask.len(),
            self.nodes[a.0].value.numel(),
            "masked_fill: mask length {} != {} elements",
            mask.len(),
            self.nodes[a.0].value.numel()
        );
        let value = Array::new(
            self.shape(a).to_vec(),
            self.data(a)
                .iter()
                .zip(mask)
                .map(|(v, m)| if *m { fill } else { *v })
                .collect(),
        );
        let req = self.requires(a);
        self.push(
            value,
            Op::MaskedFill {
                src: a,
                mask: mask.to_vec(),
            },
            req,
        )
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().expect("sum_last: rank >= 1");
        let src = self.data(a);
        let out: Vec<f64> = src.chunks(cols).map(|c| c.iter().sum()).collect();
        let req = self.requires(a);
        self.push(
            Array::new(shape[..shape.len() - 1].to_vec(), out),
            Op::SumLast(a),
            req,
        )
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: f64 = self.data(a).iter().sum();
        let req = self.requires(a);
        self.push(Array::scalar(total), Op::SumAll(a), req)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a scalar root; gradients accumulate on every node
    /// reachable through `requires_grad` inputs.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward: root must be a scalar"
        );
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires {
                continue;
            }
            let dy = self.nodes[i].grad.clone().expect("present");
            // Split borrows: take the op temporarily.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &dy);
            self.nodes[i].op = op;
        }
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.requires(v) {
            return;
        }
        let numel = self.nodes[v.0].value.numel();
        debug_assert_eq!(delta.len(), numel);
        let grad = self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    fn propagate(&mut self, node: usize, op: &Op, dy: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, dy);
                if self.requires(*b) {
                    let reduced = reduce_to(dy, self.nodes[b.0].value.numel());
                    self.accumulate(*b, &reduced);
                }
            }
            Op::Mul(a, b) => {
                let (an, bn) = (self.nodes[a.0].value.numel(), self.nodes[b.0].value.numel());
                if self.requires(*a) {
                    let bd = self.data(*b);
                    let da: Vec<f64> = dy
                        .iter()
                        .enumerate()
                        .map(|(i, d)| d * bd[i % bn])
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let ad = self.data(*a);
                    let prod: Vec<f64> = dy.iter().zip(ad).map(|(d, x)| d * x).collect();
                    let reduced = if bn == an { prod } else { reduce_to(&prod, bn) };
                    self.accumulate(*b, &reduced);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f64> = dy.iter().map(|d| d * c).collect();
                self.accumulate(*a, &da);
            }
            Op::Matmul(a, b) => {
                let (batch, n, m, p, shared) =
                    matmul_dims("matmul", self.shape(*a), self.shape(*b), false);
                if self.requires(*a) {
                    let bd = self.data(*b);
                    let mut da = vec![0.0; batch * n * m];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * m * p };
                        mm_nt(
                            &dy[i * n * p..(i + 1) * n * p],
                            &bd[bo..bo + m * p],
                            n,
                            p,
                            m,
                            &mut da[i * n * m..(i + 1) * n * m],
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let ad = self.data(*a);
                    let bn = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; bn];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * m * p };
                        mm_tn(
                            &ad[i * n * m..(i + 1) * n * m],
                            &dy[i * n * p..(i + 1) * n * p],
                            n,
                            m,
                            p,
                            &mut db[bo..bo + m * p],
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::MatmulNT(a, b) => {
                let (batch, n, m, p, shared) =
                    matmul_dims("matmul_nt", self.shape(*a), self.shape(*b), true);
                if self.requires(*a) {
                    let bd = self.data(*b);
                    let mut da = vec![0.0; batch * n * m];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * p * m };
                        mm_nn(
                            &dy[i * n * p..(i + 1) * n * p],
                            &bd[bo..bo + p * m],
                            n,
                            p,
                            m,
                            &mut da[i * n * m..(i + 1) * n * m],
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let ad = self.data(*a);
                    let bn = self.nodes[b.0].value.numel();
                    let mut db = vec![0.0; bn];
                    for i in 0..batch {
                        let bo = if shared { 0 } else { i * p * m };
                        mm_tn(
                            &dy[i * n * p..(i + 1) * n * p],
                            &ad[i * n * m..(i + 1) * n * m],
                            n,
                            p,
                            m,
                            &mut db[bo..bo + p * m],
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }
            Op::Transpose(a, ax1, ax2) => {
                let shape = self.shape(node_var(node)).to_vec();
                let dy_arr = Array::new(shape, dy.to_vec());
                let back = transpose_array(&dy_arr, *ax1, *ax2);
                self.accumulate(*a, back.data());
            }
            Op::Reshape(a) => self.accumulate(*a, dy),
            Op::Slice { src, axis, start } => {
                let src_shape = self.shape(*src).to_vec();
                let (outer, mid, inner) = axis_split(&src_shape, *axis);
                let len = self.shape(node_var(node))[*axis];
                let mut da = vec![0.0; self.nodes[src.0].value.numel()];
                for o in 0..outer {
                    let dst = o * mid * inner + start * inner;
                    let sb = o * len * inner;
                    da[dst..dst + len * inner].copy_from_slice(&dy[sb..sb + len * inner]);
                }
                self.accumulate(*src, &da);
            }
            Op::Concat { parts, axis } => {
                let out_shape = self.shape(node_var(node)).to_vec();
                let (outer, total, inner) = axis_split(&out_shape, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let mid = self.shape(p)[*axis];
                    let mut dp = vec![0.0; self.nodes[p.0].value.numel()];
                    for o in 0..outer {
                        let sb = o * total * inner + offset * inner;
                        let dst = o * mid * inner;
                        dp[dst..dst + mid * inner].copy_from_slice(&dy[sb..sb + mid * inner]);
                    }
                    offset += mid;
                    self.accumulate(p, &dp);
                }
            }
            Op::Tanh(a) => {
                let y = self.nodes[node].value.data();
                let da: Vec<f64> = dy.iter().zip(y).map(|(d, y)| d * (1.0 - y * y)).collect();
                self.accumulate(*a, &da);
            }
            Op::Exp(a) => {
                let y = self.nodes[node].value.data();
                let da: Vec<f64> = dy.iter().zip(y).map(|(d, y)| d * y).collect();
                self.accumulate(*a, &da);
            }
            Op::Log(a) => {
                let x = self.data(*a);
                let da: Vec<f64> = dy.iter().zip(x).map(|(d, x)| d / x).collect();
                self.accumulate(*a, &da);
            }
            Op::SoftmaxLast(a) => {
                let y = self.nodes[node].value.data();
                let cols = *self.nodes[node].value.shape().last().expect("rank");
                let mut da = vec![0.0; dy.len()];
                for row in 0..dy.len() / cols {
                    let yr = &y[row * cols..(row + 1) * cols];
                    let dr = &dy[row * cols..(row + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    for j in 0..cols {
                        da[row * cols + j] = yr[j] * (dr[j] - dot);
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::LayerNormLast { src, eps } => {
                let x = self.data(*src);
                let y = self.nodes[node].value.data();
                let cols = *self.nodes[node].value.shape().last().expect("rank");
                let mut da = vec![0.0; dy.len()];
                for row in 0..dy.len() / cols {
                    let xr = &x[row * cols..(row + 1) * cols];
                    let yr = &y[row * cols..(row + 1) * cols];
                    let dr = &dy[row * cols..(row + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                        / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_d = dr.iter().sum::<f64>() / cols as f64;
                    let mean_dy_y =
                        dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / cols as f64;
                    for j in 0..cols {
                        da[row * cols + j] = inv * (dr[j] - mean_d - yr[j] * mean_dy_y);
                    }
                }
                self.accumulate(*src, &da);
            }
            Op::Gather { table, indices } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.nodes[table.0].value.numel()];
                for (i, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += dy[i * d + j];
                    }
                }
                self.accumulate(*table, &dt);
            }
            Op::MaskedFill { src, mask } => {
                let da: Vec<f64> = dy
                    .iter()
                    .zip(mask)
                    .map(|(d, m)| if *m { 0.0 } else { *d })
                    .collect();
                self.accumulate(*src, &da);
            }
            Op::SumLast(a) => {
                let cols = *self.shape(*a).last().expect("rank");
                let mut da = vec![0.0; self.nodes[a.0].value.numel()];
                for (i, d) in dy.iter().enumerate() {
                    for j in 0..cols {
                        da[i * cols + j] = *d;
                    }
                }
                self.accumulate(*a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![dy[0]; self.nodes[a.0].value.numel()];
                self.accumulate(*a, &da);
            }
        }
    }
}

fn node_var(i: usize) -> Var {
    Var(i)
}

/// `(outer, mid, inner)` extents around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn out_shape(a_shape: &[usize], n: usize, p: usize) -> Vec<usize> {
    if a_shape.len() == 3 {
        vec![a_shape[0], n, p]
    } else {
        vec![n, p]
    }
}

/// Validates matmul operand shapes, returning `(batch, n, m, p, shared_rhs)`.
fn matmul_dims(
    op: &str,
    a: &[usize],
    b: &[usize],
    nt: bool,
) -> (usize, usize, usize, usize, bool) {
    let fail = || panic!("{op}: incompatible shapes {a:?} x {b:?}");
    match (a.len(), b.len()) {
        (2, 2) => {
            let (n, m) = (a[0], a[1]);
            let (p, check) = if nt { (b[0], b[1]) } else { (b[1], b[0]) };
            if check != m {
                fail();
            }
            (1, n, m, p, false)
        }
        (3, 3) => {
            let (batch, n, m) = (a[0], a[1], a[2]);
            let (p, check) = if nt { (b[1], b[2]) } else { (b[2], b[1]) };
            if b[0] != batch || check != m {
                fail();
            }
            (batch, n, m, p, false)
        }
        (3, 2) => {
            let (batch, n, m) = (a[0], a[1], a[2]);
            let (p, check) = if nt { (b[0], b[1]) } else { (b[1], b[0]) };
            if check != m {
                fail();
            }
            (batch, n, m, p, true)
        }
        _ => fail(),
    }
}

/// `out[n x p] += a[n x m] . b[m x p]`
fn mm_nn(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    for i in 0..n {
        for k in 0..m {
            let aik = a[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * p..(k + 1) * p];
            let orow = &mut out[i * p..(i + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// `out[n x p] += a[n x m] . b[p x m]^T`
fn mm_nt(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for j in 0..p {
            let brow = &b[j * m..(j + 1) * m];
            let mut acc = 0.0;
            for k in 0..m {
                acc += arow[k] * brow[k];
            }
            out[i * p + j] += acc;
        }
    }
}

/// `out[m x p] += a[n x m]^T . b[n x p]`
fn mm_tn(a: &[f64], b: &[f64], n: usize, m: usize, p: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let brow = &b[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = arow[k];
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[k * p..(k + 1) * p];
            for j in 0..p {
                orow[j] += aik * brow[j];
            }
        }
    }
}

fn broadcast_zip(op: &str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    let (an, bn) = (a.numel(), b.numel());
    let compatible = a.shape() == b.shape()
        || bn == 1
        || (a.shape().ends_with(b.shape()) && an % bn == 0);
    assert!(
        compatible,
        "{op}: incompatible shapes {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| f(*x, bd[i % bn]))
        .collect();
    Array::new(a.shape().to_vec(), data)
}

/// Sums `dy` over leading axes down to `numel` elements (suffix broadcast).
fn reduce_to(dy: &[f64], numel: usize) -> Vec<f64> {
    let mut out = vec![0.0; numel];
    for (i, d) in dy.iter().enumerate() {
        out[i % numel] += d;
    }
    out
}

fn transpose_array(a: &Array, ax1: usize, ax2: usize) -> Array {
    let shape = a.shape();
    assert!(
        ax1 < shape.len() && ax2 < shape.len(),
        "transpose: axes ({ax1},{ax2}) out of range for {shape:?}"
    );
    let mut new_shape = shape.to_vec();
    new_shape.swap(ax1, ax2);
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let mut new_strides = strides.clone();
    new_strides.swap(ax1, ax2);
    let mut out = vec![0.0; a.numel()];
    let src = a.data();
    let mut idx = vec![0usize; rank];
    for item in out.iter_mut() {
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            off += ix * new_strides[i];
        }
        *item = src[off];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < new_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    Array::new(new_shape, out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rand_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
        let n = shape.iter().product();
        Array::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Central-difference oracle: rebuilds the graph at perturbed inputs and
    /// compares analytic input gradients against (f(x+h)-f(x-h))/2h.
    fn fd_check(shapes: &[Vec<usize>], build: impl Fn(&mut Tape, &[Var]) -> Var, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Array> = shapes.iter().map(|s| rand_array(&mut rng, s)).collect();
        let eval = |vals: &[Array]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
            let out = build(&mut tape, &vars);
            tape.value(out).item()
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.backward(out);
        let h = 1e-5;
        for (vi, var) in vars.iter().enumerate() {
            let grad = tape.grad(*var).expect("input gradient");
            for e in 0..inputs[vi].numel() {
                let mut plus = inputs.clone();
                plus[vi].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[vi].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = grad.data()[e];
                assert!(
                    rel_err(analytic, numeric) < 1e-4,
                    "input {vi} elem {e}: analytic {analytic} vs numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::new(vec![2], vec![0.0, 0.0]), false);
        let y = tape.softmax(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array::scalar(0.0), true);
        let y = tape.tanh(x);
        let s = tape.sum_all(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn grad_add_mul_broadcast() {
        fd_check(&[vec![2, 3], vec![3]], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[1]);
            t.sum_all(m)
        }, 1);
        fd_check(&[vec![4], vec![1]], |t, v| {
            let s = t.mul(v[0], v[1]);
            t.sum_all(s)
        }, 2);
    }

    #[test]
    fn grad_matmul_all_cases() {
        fd_check(&[vec![2, 3], vec![3, 4]], |t, v| {
            let c = t.matmul(v[0], v[1]);
            t.sum_all(c)
        }, 3);
        fd_check(&[vec![2, 3, 4], vec![2, 4, 2]], |t, v| {
            let c = t.matmul(v[0], v[1]);
            t.sum_all(c)
        }, 4);
        fd_check(&[vec![2, 3, 4], vec![4, 2]], |t, v| {
            let c = t.matmul(v[0], v[1]);
            t.sum_all(c)
        }, 5);
        fd_check(&[vec![2, 3, 4], vec![2, 5, 4]], |t, v| {
            let c = t.matmul_nt(v[0], v[1]);
            t.sum_all(c)
        }, 6);
    }

    #[test]
    fn grad_unary_and_norms() {
        fd_check(&[vec![3, 4]], |t, v| {
            let a = t.tanh(v[0]);
            let b = t.softmax(a);
            t.sum_all(b)
        }, 7);
        fd_check(&[vec![2, 5]], |t, v| {
            let a = t.layer_norm(v[0], 1e-5);
            let b = t.mul(a, a);
            t.sum_all(b)
        }, 8);
        fd_check(&[vec![6]], |t, v| {
            let sq = t.mul(v[0], v[0]);
            let one = t.constant(Array::full(vec![6], 1.0));
            let pos = t.add(sq, one);
            let a = t.log(pos);
            let b = t.exp(a);
            t.sum_all(b)
        }, 9);
    }

    #[test]
    fn grad_shape_ops() {
        fd_check(&[vec![2, 4, 3]], |t, v| {
            let tr = t.transpose(v[0], 1, 2);
            let r = t.reshape(tr, vec![2, 12]);
            let s = t.slice(r, 1, 2, 6);
            t.sum_all(s)
        }, 10);
        fd_check(&[vec![2, 2, 3], vec![2, 1, 3]], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1);
            let m = t.mul(c, c);
            t.sum_all(m)
        }, 11);
    }

    #[test]
    fn grad_gather_masked_reductions() {
        fd_check(&[vec![5, 3]], |t, v| {
            let g = t.gather(v[0], &[0, 2, 2, 4], &[2, 2]);
            let s = t.sum_last(g);
            t.sum_all(s)
        }, 12);
        fd_check(&[vec![2, 3]], |t, v| {
            let mask = vec![false, true, false, true, false, false];
            let m = t.masked_fill(v[0], &mask, -5.0);
            let sm = t.softmax(m);
            t.sum_all(sm)
        }, 13);
    }

    #[test]
    fn grad_composite_graph() {
        // A small attention-like block exercises most primitives together.
        fd_check(&[vec![2, 4, 3], vec![3, 3], vec![3]], |t, v| {
            let q = t.matmul(v[0], v[1]);
            let q = t.add(q, v[2]);
            let scores = t.matmul_nt(q, v[0]);
            let scaled = t.scale(scores, 1.0 / (3.0f64).sqrt());
            let mut mask = vec![false; 2 * 4 * 4];
            for b in 0..2 {
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        mask[b * 16 + i * 4 + j] = true;
                    }
                }
            }
            let masked = t.masked_fill(scaled, &mask, f64::NEG_INFINITY);
            let w = t.softmax(masked);
            let out = t.matmul(w, v[0]);
            let n = t.layer_norm(out, 1e-5);
            t.mean_all(n)
        }, 14);
    }

    #[test]
    fn masked_softmax_blocks_future_gradient() {
        // Gradient from outputs at position i must not reach inputs at
        // positions > i through a causally masked attention.
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_array(&mut rng, &[1, 4, 3]);
        let xv = tape.leaf(x, true);
        let scores = tape.matmul_nt(xv, xv);
        let mut mask = vec![false; 16];
        for i in 0..4 {
            for j in (i + 1)..4 {
                mask[i * 4 + j] = true;
            }
        }
        let masked = tape.masked_fill(scores, &mask, f64::NEG_INFINITY);
        let w = tape.softmax(masked);
        let out = tape.matmul(w, xv);
        // loss reads only position 0 of the output
        let first = tape.slice(out, 1, 0, 1);
        let loss = tape.sum_all(first);
        tape.backward(loss);
        let grad = tape.grad(xv).unwrap();
        // positions 1..3 of the input receive exactly zero gradient
        for pos in 1..4 {
            for d in 0..3 {
                assert_eq!(grad.data()[pos * 3 + d], 0.0, "leak at pos {pos}");
            }
        }
    }

    #[test]
    #[should_panic(expected = "matmul")]
    fn shape_mismatch_names_the_primitive() {
        let mut tape = Tape::new();
        let a = tape.leaf(Array::zeros(vec![2, 3]), false);
        let b = tape.leaf(Array::zeros(vec![2, 3]), false);
        tape.matmul(a, b);
    }
}
