//! Reverse-mode differentiation on a flat tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is
//! already a reverse topological order and the backward pass visits each node
//! once. Values are dense row-major `f64` tensors. Shape violations are
//! programmer errors and panic; data-dependent failures return `Result` at
//! the call sites that own them (losses, FK, commands).
//!
//! Many layers are composites of the primitives here, so a finite-difference
//! check of each primitive (see `fdcheck`) covers most of the network; the
//! few hand-derived backwards (convolution, quaternion product, softmax,
//! normalization) are checked the same way.

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} values",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: Vec<usize>, f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: (0..n).map(f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor with at least one axis")
    }

    /// Product of all axes except the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

struct BackwardCtx<'a> {
    out_grad: &'a [f64],
    out_value: &'a Tensor,
    parents: Vec<&'a Tensor>,
}

type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Vec<f64>>>;

struct Node {
    value: Tensor,
    parents: Vec<TensorId>,
    backward: Option<BackwardFn>,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. node `id`; `None` when the node does not
    /// influence the loss.
    pub fn get(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

/// Append-only computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, vec![], None)
    }

    /// Insert a value that never needs gradients. Identical to `leaf` except
    /// in intent; gradients simply accumulate and are ignored.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, vec![], None)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let t = self.value(id);
        assert_eq!(t.numel(), 1, "expected a scalar, got shape {:?}", t.shape());
        t.data[0]
    }

    fn push(&mut self, value: Tensor, parents: Vec<TensorId>, backward: Option<BackwardFn>) -> TensorId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node { value, parents, backward });
        TensorId(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar node. Visits nodes once, newest to
    /// oldest; contributions accumulate by addition.
    pub fn backward(&self, loss: TensorId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else { continue };
            // parents always precede the node, so split keeps borrows disjoint
            let (before, at) = grads.split_at_mut(i);
            let ctx = BackwardCtx {
                out_grad: at[0].as_ref().expect("checked above"),
                out_value: &node.value,
                parents: node.parents.iter().map(|p| &self.nodes[p.0].value).collect(),
            };
            let contribs = backward(&ctx);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (p, c) in node.parents.iter().zip(contribs) {
                debug_assert_eq!(c.len(), self.nodes[p.0].value.numel());
                match &mut before[p.0] {
                    Some(g) => {
                        for (gi, ci) in g.iter_mut().zip(&c) {
                            *gi += ci;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        Gradients { grads }
    }

    /// Re-insert the value of `id` as a fresh leaf, cutting the gradient flow.
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let v = self.value(id).clone();
        self.leaf(v)
    }

    // ---- elementwise arithmetic ----

    fn same_shape(&self, a: TensorId, b: TensorId, op: &str) {
        assert_eq!(
            self.value(a).shape(),
            self.value(b).shape(),
            "{op}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "add");
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|ctx| vec![ctx.out_grad.to_vec(), ctx.out_grad.to_vec()])),
        )
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "sub");
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|ctx| {
                vec![
                    ctx.out_grad.to_vec(),
                    ctx.out_grad.iter().map(|g| -g).collect(),
                ]
            })),
        )
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "mul");
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|ctx| {
                let a = &ctx.parents[0].data;
                let b = &ctx.parents[1].data;
                vec![
                    ctx.out_grad.iter().zip(b.iter()).map(|(g, y)| g * y).collect(),
                    ctx.out_grad.iter().zip(a.iter()).map(|(g, x)| g * x).collect(),
                ]
            })),
        )
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "div");
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .zip(&self.value(b).data)
                .map(|(x, y)| x / y)
                .collect(),
        );
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|ctx| {
                let a = &ctx.parents[0].data;
                let b = &ctx.parents[1].data;
                let da = ctx.out_grad.iter().zip(b.iter()).map(|(g, y)| g / y).collect();
                let db = ctx
                    .out_grad
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                vec![da, db]
            })),
        )
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x * c).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(move |ctx| {
                vec![ctx.out_grad.iter().map(|g| g * c).collect()]
            })),
        )
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x + c).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(|ctx| vec![ctx.out_grad.to_vec()])),
        )
    }

    // ---- nonlinearities ----

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| sigmoid(*x)).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(|ctx| {
                vec![ctx
                    .out_grad
                    .iter()
                    .zip(&ctx.out_value.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect()]
            })),
        )
    }

    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| softplus(*x)).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(|ctx| {
                vec![ctx
                    .out_grad
                    .iter()
                    .zip(&ctx.parents[0].data)
                    .map(|(g, x)| g * sigmoid(*x))
                    .collect()]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a)
                .data
                .iter()
                .map(|&x| if x >= 0.0 { x } else { slope * x })
                .collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(move |ctx| {
                vec![ctx
                    .out_grad
                    .iter()
                    .zip(&ctx.parents[0].data)
                    .map(|(g, &x)| if x >= 0.0 { *g } else { g * slope })
                    .collect()]
            })),
        )
    }

    /// Elementwise square root; inputs must be positive.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let v = Tensor::new(
            self.value(a).shape.clone(),
            self.value(a).data.iter().map(|x| x.sqrt()).collect(),
        );
        self.push(
            v,
            vec![a],
            Some(Box::new(|ctx| {
                vec![ctx
                    .out_grad
                    .iter()
                    .zip(&ctx.out_value.data)
                    .map(|(g, y)| g * 0.5 / y)
                    .collect()]
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).data.iter().sum();
        let n = self.value(a).numel();
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |ctx| vec![vec![ctx.out_grad[0]; n]])),
        )
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.value(a).numel();
        let s = self.value(a).data.iter().sum::<f64>() / n as f64;
        self.push(
            Tensor::scalar(s),
            vec![a],
            Some(Box::new(move |ctx| vec![vec![ctx.out_grad[0] / n as f64; n]])),
        )
    }

    /// Mean over the last axis, keeping it with size 1.
    pub fn mean_lastdim(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        let (rows, d) = (t.rows(), t.last_dim());
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = 1;
        let data = (0..rows)
            .map(|r| t.data[r * d..(r + 1) * d].iter().sum::<f64>() / d as f64)
            .collect();
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    let gr = ctx.out_grad[r] / d as f64;
                    for v in &mut g[r * d..(r + 1) * d] {
                        *v = gr;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Repeat a `[... x 1]` tensor along its last axis.
    pub fn broadcast_lastdim(&mut self, a: TensorId, d: usize) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.last_dim(), 1, "broadcast_lastdim needs a trailing axis of 1");
        let rows = t.rows();
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = d;
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            for c in 0..d {
                data[r * d + c] = t.data[r];
            }
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let g = (0..rows)
                    .map(|r| ctx.out_grad[r * d..(r + 1) * d].iter().sum())
                    .collect();
                vec![g]
            })),
        )
    }

    /// Mean over all rows of a `[R x C]` tensor, producing `[1 x C]`.
    pub fn mean_over_rows(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 2, "mean_over_rows expects [R x C]");
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c] += t.data[r * cols + c];
            }
        }
        for v in &mut data {
            *v /= rows as f64;
        }
        self.push(
            Tensor::new(vec![1, cols], data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        g[r * cols + c] = ctx.out_grad[c] / rows as f64;
                    }
                }
                vec![g]
            })),
        )
    }

    /// Column-wise max over rows (adaptive max pool to one time step).
    /// Ties route the gradient to the earliest row.
    pub fn max_over_rows(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 2, "max_over_rows expects [R x C]");
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let mut data = vec![f64::NEG_INFINITY; cols];
        let mut arg = vec![0usize; cols];
        for r in 0..rows {
            for c in 0..cols {
                let v = t.data[r * cols + c];
                if v > data[c] {
                    data[c] = v;
                    arg[c] = r;
                }
            }
        }
        self.push(
            Tensor::new(vec![1, cols], data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * cols];
                for c in 0..cols {
                    g[arg[c] * cols + c] = ctx.out_grad[c];
                }
                vec![g]
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: TensorId, shape: Vec<usize>) -> TensorId {
        let t = self.value(a);
        assert_eq!(
            shape.iter().product::<usize>(),
            t.numel(),
            "reshape {:?} -> {shape:?}",
            t.shape
        );
        let v = Tensor::new(shape, t.data.clone());
        self.push(
            v,
            vec![a],
            Some(Box::new(|ctx| vec![ctx.out_grad.to_vec()])),
        )
    }

    /// Repeat a `[1 x C]` tensor to `[R x C]`.
    pub fn repeat_rows(&mut self, a: TensorId, rows: usize) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 2);
        assert_eq!(t.shape[0], 1, "repeat_rows expects [1 x C]");
        let cols = t.shape[1];
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(&t.data);
        }
        self.push(
            Tensor::new(vec![rows, cols], data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        g[c] += ctx.out_grad[r * cols + c];
                    }
                }
                vec![g]
            })),
        )
    }

    /// Select a contiguous row range of a 2D tensor.
    pub fn slice_rows(&mut self, a: TensorId, lo: usize, hi: usize) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 2);
        let cols = t.shape[1];
        assert!(lo < hi && hi <= t.shape[0], "row slice {lo}..{hi} of {:?}", t.shape);
        let data = t.data[lo * cols..hi * cols].to_vec();
        let total_rows = t.shape[0];
        self.push(
            Tensor::new(vec![hi - lo, cols], data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; total_rows * cols];
                g[lo * cols..hi * cols].copy_from_slice(ctx.out_grad);
                vec![g]
            })),
        )
    }

    /// Gather rows of a 2D tensor: `out[r] = a[idx[r]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, idx: Vec<usize>) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.shape.len(), 2);
        let (rows, cols) = (t.shape[0], t.shape[1]);
        assert!(idx.iter().all(|&i| i < rows), "gather index out of range");
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in &idx {
            data.extend_from_slice(&t.data[i * cols..(i + 1) * cols]);
        }
        let out_rows = idx.len();
        self.push(
            Tensor::new(vec![out_rows, cols], data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * cols];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..cols {
                        g[i * cols + c] += ctx.out_grad[r * cols + c];
                    }
                }
                vec![g]
            })),
        )
    }

    /// Select a range of the last axis.
    pub fn slice_lastdim(&mut self, a: TensorId, lo: usize, hi: usize) -> TensorId {
        let t = self.value(a);
        let d = t.last_dim();
        assert!(lo < hi && hi <= d, "lastdim slice {lo}..{hi} of {:?}", t.shape);
        let rows = t.rows();
        let w = hi - lo;
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = w;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.data[r * d + lo..r * d + hi]);
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    g[r * d + lo..r * d + hi].copy_from_slice(&ctx.out_grad[r * w..(r + 1) * w]);
                }
                vec![g]
            })),
        )
    }

    /// Concatenate along the last axis: `[... x d_i] -> [... x sum d_i]`.
    pub fn concat_lastdim(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = {
            let s = self.value(parts[0]).shape();
            s[..s.len() - 1].to_vec()
        };
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let t = self.value(p);
                assert_eq!(t.rows(), rows, "concat_lastdim: leading dims differ");
                t.last_dim()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut shape = lead;
        shape.push(total);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let t = self.value(p);
                data.extend_from_slice(&t.data[r * w..(r + 1) * w]);
            }
        }
        let widths_b = widths.clone();
        self.push(
            Tensor::new(shape, data),
            parts.to_vec(),
            Some(Box::new(move |ctx| {
                let mut out: Vec<Vec<f64>> =
                    widths_b.iter().map(|w| vec![0.0; rows * w]).collect();
                for r in 0..rows {
                    let mut off = 0;
                    for (g, &w) in out.iter_mut().zip(&widths_b) {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&ctx.out_grad[r * total + off..r * total + off + w]);
                        off += w;
                    }
                }
                out
            })),
        )
    }

    /// Stack N same-shape tensors along a new trailing axis:
    /// `N x [S] -> [S x N]`.
    pub fn stack_lastdim(&mut self, parts: &[TensorId]) -> TensorId {
        assert!(!parts.is_empty());
        let base = self.value(parts[0]).shape().to_vec();
        for &p in parts {
            assert_eq!(self.value(p).shape(), &base[..], "stack_lastdim: shapes differ");
        }
        let n = parts.len();
        let m = self.value(parts[0]).numel();
        let mut shape = base;
        shape.push(n);
        let mut data = vec![0.0; m * n];
        for (i, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            for e in 0..m {
                data[e * n + i] = t.data[e];
            }
        }
        self.push(
            Tensor::new(shape, data),
            parts.to_vec(),
            Some(Box::new(move |ctx| {
                (0..n)
                    .map(|i| (0..m).map(|e| ctx.out_grad[e * n + i]).collect())
                    .collect()
            })),
        )
    }

    /// Select index `i` of the trailing axis: `[S x N] -> [S]`.
    pub fn index_lastdim(&mut self, a: TensorId, i: usize) -> TensorId {
        let t = self.value(a);
        let n = t.last_dim();
        assert!(i < n);
        let m = t.rows();
        let shape = t.shape[..t.shape.len() - 1].to_vec();
        let data = (0..m).map(|e| t.data[e * n + i]).collect();
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; m * n];
                for e in 0..m {
                    g[e * n + i] = ctx.out_grad[e];
                }
                vec![g]
            })),
        )
    }

    /// Sum contiguous channel blocks: `[R x (H*dh)] -> [R x H]`.
    pub fn block_sum_lastdim(&mut self, a: TensorId, blocks: usize) -> TensorId {
        let t = self.value(a);
        let d = t.last_dim();
        assert_eq!(d % blocks, 0, "block_sum: {d} not divisible by {blocks}");
        let w = d / blocks;
        let rows = t.rows();
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = blocks;
        let mut data = vec![0.0; rows * blocks];
        for r in 0..rows {
            for b in 0..blocks {
                data[r * blocks + b] = t.data[r * d + b * w..r * d + (b + 1) * w].iter().sum();
            }
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    for b in 0..blocks {
                        let gb = ctx.out_grad[r * blocks + b];
                        for v in &mut g[r * d + b * w..r * d + (b + 1) * w] {
                            *v = gb;
                        }
                    }
                }
                vec![g]
            })),
        )
    }

    /// Repeat each channel `w` times: `[R x H] -> [R x (H*w)]`.
    pub fn block_broadcast_lastdim(&mut self, a: TensorId, w: usize) -> TensorId {
        let t = self.value(a);
        let h = t.last_dim();
        let rows = t.rows();
        let mut shape = t.shape.clone();
        *shape.last_mut().unwrap() = h * w;
        let mut data = vec![0.0; rows * h * w];
        for r in 0..rows {
            for b in 0..h {
                let v = t.data[r * h + b];
                for e in 0..w {
                    data[r * h * w + b * w + e] = v;
                }
            }
        }
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = vec![0.0; rows * h];
                for r in 0..rows {
                    for b in 0..h {
                        g[r * h + b] = ctx.out_grad[r * h * w + b * w..r * h * w + (b + 1) * w]
                            .iter()
                            .sum();
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- linear algebra ----

    /// `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape.len(), 2);
        assert_eq!(tb.shape.len(), 2);
        let (m, k) = (ta.shape[0], ta.shape[1]);
        let (k2, n) = (tb.shape[0], tb.shape[1]);
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ta.data[i * k..(i + 1) * k];
            let out = &mut data[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &tb.data[l * n..(l + 1) * n];
                for j in 0..n {
                    out[j] += av * brow[j];
                }
            }
        }
        self.push(
            Tensor::new(vec![m, n], data),
            vec![a, b],
            Some(Box::new(move |ctx| {
                let av = &ctx.parents[0].data;
                let bv = &ctx.parents[1].data;
                // dA = dC B^T
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for l in 0..k {
                        let brow = &bv[l * n..(l + 1) * n];
                        let crow = &ctx.out_grad[i * n..(i + 1) * n];
                        da[i * k + l] = brow.iter().zip(crow).map(|(x, y)| x * y).sum();
                    }
                }
                // dB = A^T dC
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let crow = &ctx.out_grad[i * n..(i + 1) * n];
                    for l in 0..k {
                        let av_il = av[i * k + l];
                        let out = &mut db[l * n..(l + 1) * n];
                        for j in 0..n {
                            out[j] += av_il * crow[j];
                        }
                    }
                }
                vec![da, db]
            })),
        )
    }

    // ---- temporal convolution ----

    /// Same-padded 1D cross-correlation over the row (time) axis.
    /// `x: [T x Cin]`, `w: [Cout x Cin x kw]` (kw odd), `b: [Cout]` -> `[T x Cout]`.
    pub fn conv1d(&mut self, x: TensorId, w: TensorId, b: TensorId) -> TensorId {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(tx.shape.len(), 2, "conv1d input must be [T x Cin]");
        assert_eq!(tw.shape.len(), 3, "conv1d kernel must be [Cout x Cin x kw]");
        let (t_len, c_in) = (tx.shape[0], tx.shape[1]);
        let (c_out, c_in2, kw) = (tw.shape[0], tw.shape[1], tw.shape[2]);
        assert_eq!(c_in, c_in2, "conv1d: channel mismatch");
        assert_eq!(kw % 2, 1, "conv1d: kernel width must be odd");
        assert_eq!(tb.shape(), &[c_out], "conv1d: bias shape");
        let half = kw / 2;
        let mut data = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            for o in 0..c_out {
                let mut acc = tb.data[o];
                for d in 0..kw {
                    let ti = t as isize + d as isize - half as isize;
                    if ti < 0 || ti >= t_len as isize {
                        continue;
                    }
                    let xrow = &tx.data[ti as usize * c_in..(ti as usize + 1) * c_in];
                    let wrow = &tw.data[(o * c_in) * kw + d..];
                    for c in 0..c_in {
                        acc += wrow[c * kw] * xrow[c];
                    }
                }
                data[t * c_out + o] = acc;
            }
        }
        self.push(
            Tensor::new(vec![t_len, c_out], data),
            vec![x, w, b],
            Some(Box::new(move |ctx| {
                let xv = &ctx.parents[0].data;
                let wv = &ctx.parents[1].data;
                let g = ctx.out_grad;
                let mut dx = vec![0.0; t_len * c_in];
                let mut dw = vec![0.0; c_out * c_in * kw];
                let mut db = vec![0.0; c_out];
                for t in 0..t_len {
                    for o in 0..c_out {
                        let go = g[t * c_out + o];
                        if go == 0.0 {
                            continue;
                        }
                        db[o] += go;
                        for d in 0..kw {
                            let ti = t as isize + d as isize - half as isize;
                            if ti < 0 || ti >= t_len as isize {
                                continue;
                            }
                            let ti = ti as usize;
                            for c in 0..c_in {
                                dx[ti * c_in + c] += go * wv[(o * c_in + c) * kw + d];
                                dw[(o * c_in + c) * kw + d] += go * xv[ti * c_in + c];
                            }
                        }
                    }
                }
                vec![dx, dw, db]
            })),
        )
    }

    // ---- row-structured nonlinear ops ----

    /// Softmax over the last axis.
    pub fn softmax_lastdim(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        let d = t.last_dim();
        let rows = t.rows();
        let mut data = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (x - m).exp();
                sum += *o;
            }
            for o in &mut data[r * d..(r + 1) * d] {
                *o /= sum;
            }
        }
        self.push(
            Tensor::new(t.shape.clone(), data),
            vec![a],
            Some(Box::new(move |ctx| {
                let y = &ctx.out_value.data;
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &ctx.out_grad[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        g[r * d + c] = yr[c] * (gr[c] - dot);
                    }
                }
                vec![g]
            })),
        )
    }

    /// Normalize each row of the last axis to unit Euclidean norm.
    pub fn normalize_lastdim(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        let d = t.last_dim();
        let rows = t.rows();
        let mut data = vec![0.0; rows * d];
        let mut norms = vec![0.0; rows];
        for r in 0..rows {
            let row = &t.data[r * d..(r + 1) * d];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            norms[r] = n;
            for (o, &x) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = x / n;
            }
        }
        self.push(
            Tensor::new(t.shape.clone(), data),
            vec![a],
            Some(Box::new(move |ctx| {
                let y = &ctx.out_value.data;
                let mut g = vec![0.0; rows * d];
                for r in 0..rows {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &ctx.out_grad[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        g[r * d + c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                vec![g]
            })),
        )
    }

    // ---- quaternion rows ----

    /// Row-wise Hamilton product of `[N x 4]` quaternion arrays.
    pub fn quat_mul_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.same_shape(a, b, "quat_mul_rows");
        let t = self.value(a);
        assert_eq!(t.last_dim(), 4, "quaternions are [N x 4]");
        let rows = t.rows();
        let av = &self.value(a).data;
        let bv = &self.value(b).data;
        let mut data = vec![0.0; rows * 4];
        for r in 0..rows {
            let (aw, ax, ay, az) = (av[r * 4], av[r * 4 + 1], av[r * 4 + 2], av[r * 4 + 3]);
            let (bw, bx, by, bz) = (bv[r * 4], bv[r * 4 + 1], bv[r * 4 + 2], bv[r * 4 + 3]);
            data[r * 4] = aw * bw - ax * bx - ay * by - az * bz;
            data[r * 4 + 1] = aw * bx + ax * bw + ay * bz - az * by;
            data[r * 4 + 2] = aw * by - ax * bz + ay * bw + az * bx;
            data[r * 4 + 3] = aw * bz + ax * by - ay * bx + az * bw;
        }
        let shape = t.shape.clone();
        self.push(
            Tensor::new(shape, data),
            vec![a, b],
            Some(Box::new(move |ctx| {
                let av = &ctx.parents[0].data;
                let bv = &ctx.parents[1].data;
                let g = ctx.out_grad;
                let mut da = vec![0.0; rows * 4];
                let mut db = vec![0.0; rows * 4];
                for r in 0..rows {
                    let (aw, ax, ay, az) = (av[r * 4], av[r * 4 + 1], av[r * 4 + 2], av[r * 4 + 3]);
                    let (bw, bx, by, bz) = (bv[r * 4], bv[r * 4 + 1], bv[r * 4 + 2], bv[r * 4 + 3]);
                    let (gw, gx, gy, gz) = (g[r * 4], g[r * 4 + 1], g[r * 4 + 2], g[r * 4 + 3]);
                    da[r * 4] = gw * bw + gx * bx + gy * by + gz * bz;
                    da[r * 4 + 1] = -gw * bx + gx * bw - gy * bz + gz * by;
                    da[r * 4 + 2] = -gw * by + gx * bz + gy * bw - gz * bx;
                    da[r * 4 + 3] = -gw * bz - gx * by + gy * bx + gz * bw;
                    db[r * 4] = gw * aw + gx * ax + gy * ay + gz * az;
                    db[r * 4 + 1] = -gw * ax + gx * aw + gy * az - gz * ay;
                    db[r * 4 + 2] = -gw * ay - gx * az + gy * aw + gz * ax;
                    db[r * 4 + 3] = -gw * az + gx * ay - gy * ax + gz * aw;
                }
                vec![da, db]
            })),
        )
    }

    /// Row-wise quaternion conjugate.
    pub fn quat_conj_rows(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        assert_eq!(t.last_dim(), 4);
        let rows = t.rows();
        let mut data = t.data.clone();
        for r in 0..rows {
            for c in 1..4 {
                data[r * 4 + c] = -data[r * 4 + c];
            }
        }
        let shape = t.shape.clone();
        self.push(
            Tensor::new(shape, data),
            vec![a],
            Some(Box::new(move |ctx| {
                let mut g = ctx.out_grad.to_vec();
                for r in 0..rows {
                    for c in 1..4 {
                        g[r * 4 + c] = -g[r * 4 + c];
                    }
                }
                vec![g]
            })),
        )
    }

    /// Rotate row vectors `v: [N x 3]` by unit quaternion rows `q: [N x 4]`,
    /// composed as q * (0, v) * conj(q).
    pub fn quat_rotate_rows(&mut self, q: TensorId, v: TensorId) -> TensorId {
        let rows = self.value(v).rows();
        assert_eq!(self.value(v).last_dim(), 3);
        assert_eq!(self.value(q).rows(), rows, "quat_rotate_rows: row mismatch");
        let zeros = self.constant(Tensor::zeros(vec![rows, 1]));
        let padded = self.concat_lastdim(&[zeros, v]);
        let qc = self.quat_conj_rows(q);
        let t1 = self.quat_mul_rows(q, padded);
        let t2 = self.quat_mul_rows(t1, qc);
        self.slice_lastdim(t2, 1, 4)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![2.0, 3.0]));
        let b = tape.leaf(Tensor::new(vec![2], vec![5.0, 7.0]));
        let p = tape.mul(a, b);
        let s = tape.add(p, a);
        let loss = tape.sum_all(s);
        assert_eq!(tape.scalar_value(loss), 2.0 * 5.0 + 2.0 + 3.0 * 7.0 + 3.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap(), &[6.0, 8.0]); // b + 1
        assert_eq!(grads.get(b).unwrap(), &[2.0, 3.0]); // a
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1], vec![3.0]));
        let d = tape.detach(a);
        let y = tape.mul(d, d);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(d).unwrap(), &[6.0]);
    }

    #[test]
    fn matmul_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn conv1d_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![5, 1], vec![1.0, -2.0, 3.0, 0.5, 4.0]));
        let w = tape.leaf(Tensor::new(vec![1, 1, 3], vec![0.0, 1.0, 0.0]));
        let b = tape.leaf(Tensor::zeros(vec![1]));
        let y = tape.conv1d(x, w, b);
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn conv1d_zero_kernel_is_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![4, 2], |i| i as f64));
        let w = tape.leaf(Tensor::zeros(vec![3, 2, 3]));
        let b = tape.leaf(Tensor::new(vec![3], vec![1.0, -1.0, 0.5]));
        let y = tape.conv1d(x, w, b);
        for t in 0..4 {
            assert_eq!(&tape.value(y).data()[t * 3..(t + 1) * 3], &[1.0, -1.0, 0.5]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let y = tape.softmax_lastdim(a);
        let d = tape.value(y).data();
        assert!((d[0..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((d[3..6].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quat_mul_rows_matches_scalar_quat() {
        let mut tape = Tape::new();
        let qa = crate::quat::normalize([0.9, 0.1, -0.3, 0.2]);
        let qb = crate::quat::normalize([0.2, 0.7, 0.1, -0.5]);
        let a = tape.leaf(Tensor::new(vec![1, 4], qa.to_vec()));
        let b = tape.leaf(Tensor::new(vec![1, 4], qb.to_vec()));
        let c = tape.quat_mul_rows(a, b);
        let expect = crate::quat::mul(qa, qb);
        for i in 0..4 {
            assert!((tape.value(c).data()[i] - expect[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn quat_rotate_rows_matches_scalar_rotate() {
        let mut tape = Tape::new();
        let q = crate::quat::normalize([0.6, -0.3, 0.5, 0.4]);
        let v = [0.3, -1.0, 2.0];
        let qt = tape.leaf(Tensor::new(vec![1, 4], q.to_vec()));
        let vt = tape.leaf(Tensor::new(vec![1, 3], v.to_vec()));
        let r = tape.quat_rotate_rows(qt, vt);
        let expect = crate::quat::rotate(q, v);
        for i in 0..3 {
            assert!((tape.value(r).data()[i] - expect[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn stack_and_index_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let s = tape.stack_lastdim(&[a, b]);
        assert_eq!(tape.value(s).shape(), &[2, 2, 2]);
        let a2 = tape.index_lastdim(s, 0);
        let b2 = tape.index_lastdim(s, 1);
        assert_eq!(tape.value(a2).data(), tape.value(a).data());
        assert_eq!(tape.value(b2).data(), tape.value(b).data());
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn mismatched_add_panics() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(vec![2]));
        let b = tape.leaf(Tensor::zeros(vec![3]));
        tape.add(a, b);
    }
}
