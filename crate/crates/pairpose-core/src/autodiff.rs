//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a define-by-run tape: every operation appends a node holding
//! the forward value and, when gradients are enabled, a backward closure that
//! routes the node's upstream gradient to its parents. Tapes are rebuilt each
//! forward pass and confined to one thread; distinct graphs are independent.
//!
//! All arithmetic is in `f64`. Loop orders inside every op are fixed, so a
//! given graph produces bitwise-identical values and gradients on every run.

use crate::error::{Error, Result};

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub(crate) usize);

/// A dense n-dimensional array of 64-bit reals with optional gradient.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Backward closure: receives the upstream gradient of its node and
/// accumulates contributions into parent gradients via
/// [`Graph::accumulate_grad`].
pub type BackwardFn = Box<dyn Fn(&[f64], &mut Graph)>;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mix64(h: u64, v: u64) -> u64 {
    let mut z = h ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Ordered record of operations; topological order is preserved by
/// construction (a node's parents always precede it on the tape).
pub struct Graph {
    nodes: Vec<Tensor>,
    backwards: Vec<Option<BackwardFn>>,
    /// Whether gradient flows through this node (requires_grad leaf or a
    /// descendant of one while recording was enabled).
    flows: Vec<bool>,
    grad_enabled: bool,
    branch_sig: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records backward closures for gradient-tracked leaves.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            backwards: Vec::new(),
            flows: Vec::new(),
            grad_enabled: true,
            branch_sig: 0x243F_6A88_85A3_08D3,
        }
    }

    /// Graph that never records backward closures. Forward values are
    /// bitwise-identical to a tracked graph.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every data-dependent branch taken during the forward pass
    /// (relu signs, pooling argmax rows, caller-noted selections). Two passes
    /// over the same graph structure agree iff no kink was crossed.
    pub fn branch_signature(&self) -> u64 {
        self.branch_sig
    }

    /// Fold caller-side data-dependent selections (e.g. nearest-point
    /// indices) into the branch signature.
    pub fn note_branch(&mut self, bits: u64) {
        self.branch_sig = mix64(self.branch_sig, bits);
    }

    fn note_sign_pattern(&mut self, values: &[f64]) {
        let mut acc = 0u64;
        for (i, v) in values.iter().enumerate() {
            acc = (acc << 1) | u64::from(*v > 0.0);
            if i % 64 == 63 {
                self.branch_sig = mix64(self.branch_sig, acc);
                acc = 0;
            }
        }
        self.branch_sig = mix64(self.branch_sig, acc ^ (values.len() as u64));
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Clears all gradients. Requires-grad leaves are re-populated by the
    /// next backward pass.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        flows: bool,
        backward: Option<BackwardFn>,
    ) -> TensorId {
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        });
        self.backwards.push(backward);
        self.flows.push(flows);
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a leaf tensor. Shape entries must be positive and their
    /// product must equal the data length.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::BadShape {
                op: "leaf",
                expected: "positive dimensions",
                got: shape.to_vec(),
            });
        }
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "leaf: shape {:?} implies {} elements, data has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        let flows = requires_grad && self.grad_enabled;
        Ok(self.push(shape.to_vec(), data, requires_grad, flows, None))
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    /// Scalar constant (shape `[]`).
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.push(Vec::new(), vec![value], false, false, None)
    }

    /// Appends a custom operation node. `backward` receives the upstream
    /// gradient and must accumulate into `parents` via
    /// [`Graph::accumulate_grad`]; it is only invoked when gradient flows.
    pub fn push_op(
        &mut self,
        parents: &[TensorId],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl FnOnce() -> BackwardFn,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let flows = self.grad_enabled && parents.iter().any(|p| self.flows[p.0]);
        let back = if flows { Some(backward()) } else { None };
        self.push(shape, data, false, flows, back)
    }

    /// Adds `contribution` into the gradient buffer of `id`, allocating a
    /// zero buffer on first touch. No-op for nodes gradient does not reach.
    pub fn accumulate_grad(&mut self, id: TensorId, contribution: &[f64]) {
        if !self.flows[id.0] {
            return;
        }
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(node.data.len(), contribution.len());
        let grad = node
            .grad
            .get_or_insert_with(|| vec![0.0; contribution.len()]);
        for (g, c) in grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar loss. Every `requires_grad` leaf on the
    /// tape ends up with a populated gradient (zeros when the loss does not
    /// depend on it). Gradients accumulate across calls until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.flows[loss.0] && !self.nodes[loss.0].requires_grad {
            return Err(Error::contract(
                "backward: loss is not connected to any gradient-tracked leaf",
            ));
        }
        for node in &mut self.nodes {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        self.accumulate_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.flows[i] || self.nodes[i].grad.is_none() {
                continue;
            }
            if let Some(back) = self.backwards[i].take() {
                let upstream = self.nodes[i].grad.clone().expect("grad present");
                back(&upstream, self);
                self.backwards[i] = Some(back);
            }
        }
        Ok(())
    }

    fn require_2d(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::BadShape {
                op,
                expected: "a 2-D tensor",
                got: self.shape(id).to_vec(),
            }),
        }
    }

    fn require_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// Matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.require_2d("matmul", a)?;
        let (kb, n) = self.require_2d("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                let row = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let aik = av[i * k + kk];
                    let brow = &bv[kk * n..(kk + 1) * n];
                    for (o, bb) in row.iter_mut().zip(brow) {
                        *o += aik * bb;
                    }
                }
            }
        }
        Ok(self.push_op(&[a, b], vec![m, n], out, || {
            Box::new(move |g, graph| {
                // dL/da = g · bᵀ
                let bv = graph.value(b).to_vec();
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for kk in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * bv[kk * n + j];
                        }
                        da[i * k + kk] = s;
                    }
                }
                graph.accumulate_grad(a, &da);
                // dL/db = aᵀ · g
                let av = graph.value(a).to_vec();
                let mut db = vec![0.0; k * n];
                for kk in 0..k {
                    for i in 0..m {
                        let aik = av[i * k + kk];
                        let grow = &g[i * n..(i + 1) * n];
                        let drow = &mut db[kk * n..(kk + 1) * n];
                        for (d, gg) in drow.iter_mut().zip(grow) {
                            *d += aik * gg;
                        }
                    }
                }
                graph.accumulate_grad(b, &db);
            })
        }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape("hadamard", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&[a, b], shape, out, || {
            Box::new(move |g, graph| {
                let da: Vec<f64> = g.iter().zip(graph.value(b)).map(|(gg, y)| gg * y).collect();
                graph.accumulate_grad(a, &da);
                let db: Vec<f64> = g.iter().zip(graph.value(a)).map(|(gg, x)| gg * x).collect();
                graph.accumulate_grad(b, &db);
            })
        }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&[a, b], shape, out, || {
            Box::new(move |g, graph| {
                graph.accumulate_grad(a, g);
                graph.accumulate_grad(b, g);
            })
        }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.require_same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&[a, b], shape, out, || {
            Box::new(move |g, graph| {
                graph.accumulate_grad(a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                graph.accumulate_grad(b, &neg);
            })
        }))
    }

    /// Multiplies every element by a compile-time constant.
    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&[a], shape, out, || {
            Box::new(move |g, graph| {
                let da: Vec<f64> = g.iter().map(|x| x * factor).collect();
                graph.accumulate_grad(a, &da);
            })
        })
    }

    /// Elementwise `max(x, 0)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let signs = self.value(a).to_vec();
        self.note_sign_pattern(&signs);
        self.push_op(&[a], shape, out, || {
            Box::new(move |g, graph| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(graph.value(a))
                    .map(|(gg, x)| if *x > 0.0 { *gg } else { 0.0 })
                    .collect();
                graph.accumulate_grad(a, &da);
            })
        })
    }

    /// Elementwise square root. Subgradient at 0 is defined as 0.
    pub fn sqrt(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(a).iter().map(|x| x.sqrt()).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(&[a], shape, out, || {
            Box::new(move |g, graph| {
                let da: Vec<f64> = g
                    .iter()
                    .zip(graph.value(a))
                    .map(|(gg, x)| {
                        let r = x.sqrt();
                        if r > 0.0 {
                            gg / (2.0 * r)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                graph.accumulate_grad(a, &da);
            })
        })
    }

    /// Mean over all elements, returned as a scalar.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.tensor(a).numel();
        let total: f64 = self.value(a).iter().sum();
        let out = total / n as f64;
        self.push_op(&[a], Vec::new(), vec![out], || {
            Box::new(move |g, graph| {
                let da = vec![g[0] / n as f64; n];
                graph.accumulate_grad(a, &da);
            })
        })
    }

    /// Sum over all elements, returned as a scalar.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let n = self.tensor(a).numel();
        let total: f64 = self.value(a).iter().sum();
        self.push_op(&[a], Vec::new(), vec![total], || {
            Box::new(move |g, graph| {
                let da = vec![g[0]; n];
                graph.accumulate_grad(a, &da);
            })
        })
    }

    /// Columnwise maximum of a `[P×d]` tensor. Gradient routes to the argmax
    /// row; ties break toward the lowest row index.
    pub fn max_pool_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("max_pool_rows", a)?;
        if rows == 0 {
            return Err(Error::EmptyInput("max_pool_rows"));
        }
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut argmax = vec![0usize; cols];
        for i in 0..rows {
            for j in 0..cols {
                let v = av[i * cols + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        for &i in &argmax {
            self.note_branch(i as u64);
        }
        Ok(self.push_op(&[a], vec![cols], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; rows * cols];
                for (j, &i) in argmax.iter().enumerate() {
                    da[i * cols + j] += g[j];
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Segment-wise columnwise maximum: rows `[bounds[s], bounds[s+1])` of a
    /// `[N×d]` tensor pool into output row `s`. Same tie rule as
    /// [`Graph::max_pool_rows`].
    pub fn max_pool_segments(&mut self, a: TensorId, bounds: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("max_pool_segments", a)?;
        if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != rows {
            return Err(Error::contract(format!(
                "max_pool_segments: bounds {:?} must start at 0 and end at {}",
                bounds, rows
            )));
        }
        let segs = bounds.len() - 1;
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; segs * cols];
        let mut argmax = vec![0usize; segs * cols];
        for s in 0..segs {
            let (lo, hi) = (bounds[s], bounds[s + 1]);
            if lo >= hi {
                return Err(Error::EmptyInput("max_pool_segments"));
            }
            for i in lo..hi {
                for j in 0..cols {
                    let v = av[i * cols + j];
                    if v > out[s * cols + j] {
                        out[s * cols + j] = v;
                        argmax[s * cols + j] = i;
                    }
                }
            }
        }
        for &i in &argmax {
            self.note_branch(i as u64);
        }
        Ok(self.push_op(&[a], vec![segs, cols], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; rows * cols];
                for (slot, &i) in argmax.iter().enumerate() {
                    let j = slot % cols;
                    da[i * cols + j] += g[slot];
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Row-wise concatenation of `[P×d1]` and `[P×d2]` into `[P×(d1+d2)]`.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (pa, d1) = self.require_2d("concat_cols", a)?;
        let (pb, d2) = self.require_2d("concat_cols", b)?;
        if pa != pb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(pa * (d1 + d2));
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..pa {
                out.extend_from_slice(&av[i * d1..(i + 1) * d1]);
                out.extend_from_slice(&bv[i * d2..(i + 1) * d2]);
            }
        }
        Ok(self.push_op(&[a, b], vec![pa, d1 + d2], out, || {
            Box::new(move |g, graph| {
                let d = d1 + d2;
                let mut da = vec![0.0; pa * d1];
                let mut db = vec![0.0; pa * d2];
                for i in 0..pa {
                    da[i * d1..(i + 1) * d1].copy_from_slice(&g[i * d..i * d + d1]);
                    db[i * d2..(i + 1) * d2].copy_from_slice(&g[i * d + d1..(i + 1) * d]);
                }
                graph.accumulate_grad(a, &da);
                graph.accumulate_grad(b, &db);
            })
        }))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice1d(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let n = match *self.shape(a) {
            [n] => n,
            _ => {
                return Err(Error::BadShape {
                    op: "slice1d",
                    expected: "a 1-D tensor",
                    got: self.shape(a).to_vec(),
                })
            }
        };
        if start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice1d",
                index: start + len,
                len: n,
            });
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.push_op(&[a], vec![len], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; n];
                da[start..start + len].copy_from_slice(g);
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Selects rows of a `[N×d]` tensor (duplicates allowed). The backward
    /// pass scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("gather_rows", a)?;
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&av[i * cols..(i + 1) * cols]);
        }
        let idx = indices.to_vec();
        Ok(self.push_op(&[a], vec![indices.len(), cols], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; rows * cols];
                for (k, &i) in idx.iter().enumerate() {
                    let src = &g[k * cols..(k + 1) * cols];
                    let dst = &mut da[i * cols..(i + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Adds a `[d]` vector to every row of a `[P×d]` tensor.
    pub fn add_row_broadcast(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("add_row_broadcast", a)?;
        if *self.shape(v) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let av = self.value(a);
        let vv = self.value(v);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(av[i * cols + j] + vv[j]);
            }
        }
        Ok(self.push_op(&[a, v], vec![rows, cols], out, || {
            Box::new(move |g, graph| {
                graph.accumulate_grad(a, g);
                let mut dv = vec![0.0; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dv[j] += g[i * cols + j];
                    }
                }
                graph.accumulate_grad(v, &dv);
            })
        }))
    }

    /// Divides every element of `a` by the scalar node `s`.
    pub fn div_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        if self.tensor(s).numel() != 1 {
            return Err(Error::BadShape {
                op: "div_scalar",
                expected: "a scalar divisor",
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s)[0];
        let out: Vec<f64> = self.value(a).iter().map(|x| x / sv).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(&[a, s], shape, out, || {
            Box::new(move |g, graph| {
                let sv = graph.value(s)[0];
                let da: Vec<f64> = g.iter().map(|gg| gg / sv).collect();
                graph.accumulate_grad(a, &da);
                let mut ds = 0.0;
                for (gg, x) in g.iter().zip(graph.value(a)) {
                    ds -= gg * x;
                }
                graph.accumulate_grad(s, &[ds / (sv * sv)]);
            })
        }))
    }

    /// Euclidean norm of each row of a `[P×d]` tensor, as a `[P]` vector.
    /// Subgradient at a zero row is 0.
    pub fn row_norms(&mut self, a: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("row_norms", a)?;
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut s = 0.0;
            for j in 0..cols {
                let x = av[i * cols + j];
                s += x * x;
            }
            out.push(s.sqrt());
        }
        let norms = out.clone();
        Ok(self.push_op(&[a], vec![rows], out, || {
            Box::new(move |g, graph| {
                let av = graph.value(a).to_vec();
                let mut da = vec![0.0; rows * cols];
                for i in 0..rows {
                    if norms[i] > 0.0 {
                        let f = g[i] / norms[i];
                        for j in 0..cols {
                            da[i * cols + j] = f * av[i * cols + j];
                        }
                    }
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Matrix transpose of a `[m×n]` tensor.
    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = self.require_2d("transpose", a)?;
        let av = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        Ok(self.push_op(&[a], vec![n, m], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.tensor(a).numel() {
            return Err(Error::BadShape {
                op: "reshape",
                expected: "matching element count",
                got: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push_op(&[a], shape.to_vec(), out, || {
            Box::new(move |g, graph| {
                graph.accumulate_grad(a, g);
            })
        }))
    }

    /// Mixes rows of a `[C×d]` tensor: output row `i` is the weighted sum of
    /// the listed source rows. Used by feature propagation to interpolate
    /// coarse features back onto fine points.
    pub fn interp_rows(&mut self, a: TensorId, mix: &[Vec<(usize, f64)>]) -> Result<TensorId> {
        let (rows, cols) = self.require_2d("interp_rows", a)?;
        for entry in mix {
            for &(i, _) in entry {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        op: "interp_rows",
                        index: i,
                        len: rows,
                    });
                }
            }
        }
        let av = self.value(a);
        let mut out = vec![0.0; mix.len() * cols];
        for (k, entry) in mix.iter().enumerate() {
            for &(i, w) in entry {
                let src = &av[i * cols..(i + 1) * cols];
                let dst = &mut out[k * cols..(k + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        let mix = mix.to_vec();
        Ok(self.push_op(&[a], vec![mix.len(), cols], out, || {
            Box::new(move |g, graph| {
                let mut da = vec![0.0; rows * cols];
                for (k, entry) in mix.iter().enumerate() {
                    for &(i, w) in entry {
                        let src = &g[k * cols..(k + 1) * cols];
                        let dst = &mut da[i * cols..(i + 1) * cols];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
                graph.accumulate_grad(a, &da);
            })
        }))
    }
}
