//! Single-use op graph for reverse-mode differentiation.
//!
//! A `Graph` records every forward op in topological (creation) order.
//! `backward` consumes the graph exactly once and returns gradients for
//! every registered parameter; parameters the loss never reached get
//! zeros. Every op validates shapes up front and rejects non-finite
//! outputs with an error naming the op.

use super::{Gradients, ParamId, ParamSet, Tensor, TensorError, TensorResult};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Public op vocabulary, used by the generic [`Graph::forward_op`] entry
/// point. The typed builder methods cover the same set.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Tanh,
    Sigmoid,
    /// Softmax over the last axis, row by row.
    Softmax,
    /// Layer normalization over the last axis; inputs are (x, gamma, beta).
    LayerNorm { eps: f64 },
    /// Concatenate rank-2 inputs along the row axis.
    Concat,
    SliceCols { start: usize, len: usize },
    SliceRows { start: usize, len: usize },
    Transpose,
    /// Elementwise max over the row (token) axis: [t, d] -> [d].
    MaxPool,
    /// Row gather from an embedding table.
    Embedding { ids: Vec<usize> },
    Sum,
    Mean,
    /// Numerically stable binary cross-entropy on a scalar logit.
    BceWithLogits { target: f64 },
}

#[derive(Debug, Clone)]
enum Step {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Relu { x: usize },
    Tanh { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { xs: Vec<usize> },
    SliceCols { x: usize, start: usize },
    SliceRows { x: usize, start: usize },
    Transpose { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    Embedding { table: usize, ids: Vec<usize> },
    Sum { x: usize },
    Mean { x: usize },
    BceWithLogits { z: usize, target: f64 },
}

pub struct Graph {
    steps: Vec<Step>,
    values: Vec<Tensor>,
    param_of: Vec<Option<usize>>,
    param_nodes: HashMap<usize, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Rows/cols of a rank-1 or rank-2 shape; rank-1 counts as a single row.
fn as_2d(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => panic!("rank > 2 unsupported: {shape:?}"),
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            steps: Vec::new(),
            values: Vec::new(),
            param_of: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Smallest distance of any recorded op to a non-differentiable
    /// point: relu inputs near zero and max-pool columns with close
    /// top-two values. Finite-difference checks redraw inputs whose
    /// margin is below the step size.
    pub fn min_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for (i, step) in self.steps.iter().enumerate() {
            match step {
                Step::Relu { x } => {
                    for v in self.values[*x].data() {
                        margin = margin.min(v.abs());
                    }
                }
                Step::MaxPool { x, .. } => {
                    let (rows, cols) = as_2d(self.values[*x].shape());
                    if rows < 2 {
                        continue;
                    }
                    let xv = self.values[*x].data();
                    for c in 0..cols {
                        let mut top = f64::NEG_INFINITY;
                        let mut second = f64::NEG_INFINITY;
                        for r in 0..rows {
                            let v = xv[r * cols + c];
                            if v > top {
                                second = top;
                                top = v;
                            } else if v > second {
                                second = v;
                            }
                        }
                        margin = margin.min(top - second);
                    }
                }
                _ => {}
            }
            let _ = i;
        }
        margin
    }

    fn push(&mut self, op: &'static str, step: Step, value: Tensor) -> TensorResult<NodeId> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op });
        }
        let id = NodeId(self.steps.len());
        self.steps.push(step);
        self.values.push(value);
        self.param_of.push(None);
        Ok(id)
    }

    /// Leaf node for a registered parameter; memoized so repeated uses of
    /// one parameter share a node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_nodes.get(&id.0) {
            return node;
        }
        let node = NodeId(self.steps.len());
        self.steps.push(Step::Leaf);
        self.values.push(params.get(id).clone());
        self.param_of.push(Some(id.0));
        self.param_nodes.insert(id.0, node);
        node
    }

    /// Leaf node carrying a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let node = NodeId(self.steps.len());
        self.steps.push(Step::Leaf);
        self.values.push(value);
        self.param_of.push(None);
        node
    }

    /// Generic dispatch over [`OpKind`].
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[NodeId]) -> TensorResult<NodeId> {
        match kind {
            OpKind::MatMul => self.matmul(inputs[0], inputs[1]),
            OpKind::Add => self.add(inputs[0], inputs[1]),
            OpKind::Sub => self.sub(inputs[0], inputs[1]),
            OpKind::Mul => self.mul(inputs[0], inputs[1]),
            OpKind::Scale(c) => self.scale(inputs[0], c),
            OpKind::Relu => self.relu(inputs[0]),
            OpKind::Tanh => self.tanh(inputs[0]),
            OpKind::Sigmoid => self.sigmoid(inputs[0]),
            OpKind::Softmax => self.softmax(inputs[0]),
            OpKind::LayerNorm { eps } => self.layer_norm(inputs[0], inputs[1], inputs[2], eps),
            OpKind::Concat => self.concat_rows(inputs),
            OpKind::SliceCols { start, len } => self.slice_cols(inputs[0], start, len),
            OpKind::SliceRows { start, len } => self.slice_rows(inputs[0], start, len),
            OpKind::Transpose => self.transpose(inputs[0]),
            OpKind::MaxPool => self.max_pool_rows(inputs[0]),
            OpKind::Embedding { ids } => self.embedding(inputs[0], &ids),
            OpKind::Sum => self.sum(inputs[0]),
            OpKind::Mean => self.mean(inputs[0]),
            OpKind::BceWithLogits { target } => self.bce_with_logits(inputs[0], target),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (m, k) = as_2d(self.values[a.0].shape());
        let (k2, n) = as_2d(self.values[b.0].shape());
        if k != k2 {
            return Err(mismatch(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.values[a.0].shape(),
                    self.values[b.0].shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(
            self.values[a.0].data(),
            self.values[b.0].data(),
            m,
            k,
            n,
            &mut out,
        );
        self.push(
            "matmul",
            Step::MatMul { a: a.0, b: b.0 },
            Tensor::new(vec![m, n], out),
        )
    }

    /// Elementwise add; a rank-1 right operand broadcasts across rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let sa = self.values[a.0].shape().to_vec();
        let sb = self.values[b.0].shape().to_vec();
        if sa == sb {
            let data: Vec<f64> = self.values[a.0]
                .data()
                .iter()
                .zip(self.values[b.0].data())
                .map(|(x, y)| x + y)
                .collect();
            return self.push(
                "add",
                Step::Add { a: a.0, b: b.0, broadcast: false },
                Tensor::new(sa, data),
            );
        }
        let (rows, cols) = as_2d(&sa);
        if sb.len() == 1 && sb[0] == cols {
            let bias = self.values[b.0].data();
            let mut data = self.values[a.0].data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += bias[c];
                }
            }
            return self.push(
                "add",
                Step::Add { a: a.0, b: b.0, broadcast: true },
                Tensor::new(sa, data),
            );
        }
        Err(mismatch("add", format!("{sa:?} + {sb:?}")))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let sa = self.values[a.0].shape().to_vec();
        if sa != self.values[b.0].shape() {
            return Err(mismatch(
                "sub",
                format!("{:?} - {:?}", sa, self.values[b.0].shape()),
            ));
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", Step::Sub { a: a.0, b: b.0 }, Tensor::new(sa, data))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let sa = self.values[a.0].shape().to_vec();
        if sa != self.values[b.0].shape() {
            return Err(mismatch(
                "mul",
                format!("{:?} * {:?}", sa, self.values[b.0].shape()),
            ));
        }
        let data: Vec<f64> = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", Step::Mul { a: a.0, b: b.0 }, Tensor::new(sa, data))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| v * c).collect();
        self.push("scale", Step::Scale { x: x.0, c }, Tensor::new(shape, data))
    }

    pub fn relu(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| v.max(0.0)).collect();
        self.push("relu", Step::Relu { x: x.0 }, Tensor::new(shape, data))
    }

    pub fn tanh(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let data: Vec<f64> = self.values[x.0].data().iter().map(|v| v.tanh()).collect();
        self.push("tanh", Step::Tanh { x: x.0 }, Tensor::new(shape, data))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let data: Vec<f64> = self.values[x.0]
            .data()
            .iter()
            .map(|v| sigmoid_stable(*v))
            .collect();
        self.push("sigmoid", Step::Sigmoid { x: x.0 }, Tensor::new(shape, data))
    }

    pub fn softmax(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let (rows, cols) = as_2d(&shape);
        let xv = self.values[x.0].data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum += e;
            }
            for c in 0..cols {
                data[r * cols + c] /= sum;
            }
        }
        self.push("softmax", Step::Softmax { x: x.0 }, Tensor::new(shape, data))
    }

    /// Per-row layer norm followed by elementwise affine. A constant row
    /// normalizes to zero before the affine; eps keeps the variance
    /// denominator positive.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> TensorResult<NodeId> {
        let shape = self.values[x.0].shape().to_vec();
        let (rows, cols) = as_2d(&shape);
        if self.values[gamma.0].numel() != cols || self.values[beta.0].numel() != cols {
            return Err(mismatch(
                "layer-norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.values[gamma.0].shape(),
                    self.values[beta.0].shape()
                ),
            ));
        }
        let xv = self.values[x.0].data();
        let g = self.values[gamma.0].data();
        let b = self.values[beta.0].data();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let xh = (row[c] - mean) * is;
                xhat[r * cols + c] = xh;
                data[r * cols + c] = xh * g[c] + b[c];
            }
        }
        self.push(
            "layer-norm",
            Step::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std },
            Tensor::new(shape, data),
        )
    }

    pub fn concat_rows(&mut self, xs: &[NodeId]) -> TensorResult<NodeId> {
        assert!(!xs.is_empty());
        let (_, cols) = as_2d(self.values[xs[0].0].shape());
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = as_2d(self.values[x.0].shape());
            if c != cols {
                return Err(mismatch(
                    "concat",
                    format!("column counts differ: {cols} vs {c}"),
                ));
            }
            rows += r;
            data.extend_from_slice(self.values[x.0].data());
        }
        self.push(
            "concat",
            Step::Concat { xs: xs.iter().map(|n| n.0).collect() },
            Tensor::new(vec![rows, cols], data),
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> TensorResult<NodeId> {
        let (rows, cols) = as_2d(self.values[x.0].shape());
        if start + len > cols {
            return Err(mismatch(
                "slice",
                format!("cols {start}..{} of {cols}", start + len),
            ));
        }
        let xv = self.values[x.0].data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        self.push(
            "slice",
            Step::SliceCols { x: x.0, start },
            Tensor::new(vec![rows, len], data),
        )
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> TensorResult<NodeId> {
        let (rows, cols) = as_2d(self.values[x.0].shape());
        if start + len > rows {
            return Err(mismatch(
                "slice",
                format!("rows {start}..{} of {rows}", start + len),
            ));
        }
        let data = self.values[x.0].data()[start * cols..(start + len) * cols].to_vec();
        self.push(
            "slice",
            Step::SliceRows { x: x.0, start },
            Tensor::new(vec![len, cols], data),
        )
    }

    pub fn transpose(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (rows, cols) = as_2d(self.values[x.0].shape());
        let xv = self.values[x.0].data();
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = xv[r * cols + c];
            }
        }
        self.push(
            "transpose",
            Step::Transpose { x: x.0 },
            Tensor::new(vec![cols, rows], data),
        )
    }

    /// Elementwise max over the row axis: [t, d] -> [d]. Gradient routes to
    /// the argmax row only; ties break toward the lowest row index.
    pub fn max_pool_rows(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (rows, cols) = as_2d(self.values[x.0].shape());
        if rows == 0 {
            return Err(mismatch("max-pool", "zero rows".to_string()));
        }
        let xv = self.values[x.0].data();
        let mut out = xv[..cols].to_vec();
        let mut argmax = vec![0usize; cols];
        for r in 1..rows {
            for c in 0..cols {
                let v = xv[r * cols + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        self.push(
            "max-pool",
            Step::MaxPool { x: x.0, argmax },
            Tensor::new(vec![cols], out),
        )
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> TensorResult<NodeId> {
        let (vocab, dim) = as_2d(self.values[table.0].shape());
        for &id in ids {
            if id >= vocab {
                return Err(mismatch(
                    "embedding-lookup",
                    format!("id {id} out of vocabulary {vocab}"),
                ));
            }
        }
        let tv = self.values[table.0].data();
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            data.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        self.push(
            "embedding-lookup",
            Step::Embedding { table: table.0, ids: ids.to_vec() },
            Tensor::new(vec![ids.len(), dim], data),
        )
    }

    pub fn sum(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let s: f64 = self.values[x.0].data().iter().sum();
        self.push("sum", Step::Sum { x: x.0 }, Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let n = self.values[x.0].numel() as f64;
        let s: f64 = self.values[x.0].data().iter().sum();
        self.push("mean", Step::Mean { x: x.0 }, Tensor::scalar(s / n))
    }

    /// max(z,0) - z*y + ln(1 + exp(-|z|)) on a scalar logit.
    pub fn bce_with_logits(&mut self, z: NodeId, target: f64) -> TensorResult<NodeId> {
        let zv = self.values[z.0].item();
        let loss = zv.max(0.0) - zv * target + (1.0 + (-zv.abs()).exp()).ln();
        self.push(
            "bce-with-logits",
            Step::BceWithLogits { z: z.0, target },
            Tensor::scalar(loss),
        )
    }

    /// Consume the graph, returning gradients for every parameter in
    /// `params` (zeros where the loss never reached).
    pub fn backward(self, loss: NodeId, params: &ParamSet) -> TensorResult<Gradients> {
        if self.values[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.values[loss.0].shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.steps.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.steps[i] {
                Step::Leaf => {
                    // restore for the parameter sweep below
                    grads[i] = Some(g);
                }
                Step::MatMul { a, b } => {
                    let (m, k) = as_2d(self.values[*a].shape());
                    let (_, n) = as_2d(self.values[*b].shape());
                    {
                        let da = ensure(&mut grads, *a, m * k);
                        // dA += dC . B^T
                        let bv = self.values[*b].data();
                        for r in 0..m {
                            let dcrow = &g[r * n..(r + 1) * n];
                            let darow = &mut da[r * k..(r + 1) * k];
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += dcrow[j] * brow[j];
                                }
                                darow[p] += s;
                            }
                        }
                    }
                    {
                        let db = ensure(&mut grads, *b, k * n);
                        // dB += A^T . dC
                        let av = self.values[*a].data();
                        for r in 0..m {
                            let arow = &av[r * k..(r + 1) * k];
                            let dcrow = &g[r * n..(r + 1) * n];
                            for p in 0..k {
                                let t = arow[p];
                                if t != 0.0 {
                                    let dbrow = &mut db[p * n..(p + 1) * n];
                                    for j in 0..n {
                                        dbrow[j] += t * dcrow[j];
                                    }
                                }
                            }
                        }
                    }
                }
                Step::Add { a, b, broadcast } => {
                    {
                        let da = ensure(&mut grads, *a, self.values[*a].numel());
                        for (x, y) in da.iter_mut().zip(g.iter()) {
                            *x += *y;
                        }
                    }
                    if *broadcast {
                        let cols = self.values[*b].numel();
                        let db = ensure(&mut grads, *b, cols);
                        for (j, y) in g.iter().enumerate() {
                            db[j % cols] += *y;
                        }
                    } else {
                        let db = ensure(&mut grads, *b, self.values[*b].numel());
                        for (x, y) in db.iter_mut().zip(g.iter()) {
                            *x += *y;
                        }
                    }
                }
                Step::Sub { a, b } => {
                    {
                        let da = ensure(&mut grads, *a, self.values[*a].numel());
                        for (x, y) in da.iter_mut().zip(g.iter()) {
                            *x += *y;
                        }
                    }
                    let db = ensure(&mut grads, *b, self.values[*b].numel());
                    for (x, y) in db.iter_mut().zip(g.iter()) {
                        *x -= *y;
                    }
                }
                Step::Mul { a, b } => {
                    {
                        let bv = self.values[*b].data();
                        let da = ensure(&mut grads, *a, self.values[*a].numel());
                        for j in 0..g.len() {
                            da[j] += g[j] * bv[j];
                        }
                    }
                    let av = self.values[*a].data();
                    let db = ensure(&mut grads, *b, self.values[*b].numel());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
                Step::Scale { x, c } => {
                    let dx = ensure(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * c;
                    }
                }
                Step::Relu { x } => {
                    let yv = self.values[i].data();
                    let dx = ensure(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        if yv[j] > 0.0 {
                            dx[j] += g[j];
                        }
                    }
                }
                Step::Tanh { x } => {
                    let yv = self.values[i].data();
                    let dx = ensure(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * (1.0 - yv[j] * yv[j]);
                    }
                }
                Step::Sigmoid { x } => {
                    let yv = self.values[i].data();
                    let dx = ensure(&mut grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * yv[j] * (1.0 - yv[j]);
                    }
                }
                Step::Softmax { x } => {
                    let yv = self.values[i].data();
                    let (rows, cols) = as_2d(self.values[i].shape());
                    let dx = ensure(&mut grads, *x, g.len());
                    for r in 0..rows {
                        let o = r * cols;
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += g[o + c] * yv[o + c];
                        }
                        for c in 0..cols {
                            dx[o + c] += yv[o + c] * (g[o + c] - dot);
                        }
                    }
                }
                Step::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let (rows, cols) = as_2d(self.values[i].shape());
                    let gv = self.values[*gamma].data().to_vec();
                    {
                        let dgamma = ensure(&mut grads, *gamma, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dgamma[c] += g[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                    }
                    {
                        let dbeta = ensure(&mut grads, *beta, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dbeta[c] += g[r * cols + c];
                            }
                        }
                    }
                    let dx = ensure(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        let o = r * cols;
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for c in 0..cols {
                            let dyh = g[o + c] * gv[c];
                            mean_dy += dyh;
                            mean_dy_xhat += dyh * xhat[o + c];
                        }
                        mean_dy /= cols as f64;
                        mean_dy_xhat /= cols as f64;
                        for c in 0..cols {
                            let dyh = g[o + c] * gv[c];
                            dx[o + c] +=
                                inv_std[r] * (dyh - mean_dy - xhat[o + c] * mean_dy_xhat);
                        }
                    }
                }
                Step::Concat { xs } => {
                    let mut offset = 0;
                    for &x in xs.clone().iter() {
                        let n = self.values[x].numel();
                        let dx = ensure(&mut grads, x, n);
                        for j in 0..n {
                            dx[j] += g[offset + j];
                        }
                        offset += n;
                    }
                }
                Step::SliceCols { x, start } => {
                    let (rows, len) = as_2d(self.values[i].shape());
                    let (_, cols) = as_2d(self.values[*x].shape());
                    let start = *start;
                    let dx = ensure(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..len {
                            dx[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Step::SliceRows { x, start } => {
                    let (len, cols) = as_2d(self.values[i].shape());
                    let start = *start;
                    let dx = ensure(&mut grads, *x, self.values[*x].numel());
                    for j in 0..len * cols {
                        dx[start * cols + j] += g[j];
                    }
                }
                Step::Transpose { x } => {
                    let (rows, cols) = as_2d(self.values[i].shape());
                    let dx = ensure(&mut grads, *x, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[c * rows + r] += g[r * cols + c];
                        }
                    }
                }
                Step::MaxPool { x, argmax } => {
                    let cols = g.len();
                    let argmax = argmax.clone();
                    let dx = ensure(&mut grads, *x, self.values[*x].numel());
                    for c in 0..cols {
                        dx[argmax[c] * cols + c] += g[c];
                    }
                }
                Step::Embedding { table, ids } => {
                    let (_, dim) = as_2d(self.values[*table].shape());
                    let ids = ids.clone();
                    let dt = ensure(&mut grads, *table, self.values[*table].numel());
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            dt[id * dim + c] += g[row * dim + c];
                        }
                    }
                }
                Step::Sum { x } => {
                    let dx = ensure(&mut grads, *x, self.values[*x].numel());
                    for v in dx.iter_mut() {
                        *v += g[0];
                    }
                }
                Step::Mean { x } => {
                    let n = self.values[*x].numel();
                    let dx = ensure(&mut grads, *x, n);
                    let s = g[0] / n as f64;
                    for v in dx.iter_mut() {
                        *v += s;
                    }
                }
                Step::BceWithLogits { z, target } => {
                    let zv = self.values[*z].item();
                    let target = *target;
                    let dx = ensure(&mut grads, *z, 1);
                    dx[0] += g[0] * (sigmoid_stable(zv) - target);
                }
            }
        }

        let mut by_param = params.zeros_like();
        for i in 0..=loss.0 {
            if let (Some(pid), Some(g)) = (self.param_of[i], grads[i].as_ref()) {
                let dst = by_param[pid].data_mut();
                for (x, y) in dst.iter_mut().zip(g.iter()) {
                    *x += *y;
                }
            }
        }
        Ok(Gradients { by_param })
    }
}

fn ensure<'a>(grads: &'a mut [Option<Vec<f64>>], i: usize, n: usize) -> &'a mut Vec<f64> {
    if grads[i].is_none() {
        grads[i] = Some(vec![0.0; n]);
    }
    grads[i].as_mut().unwrap()
}

#[inline]
pub(crate) fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out += a(m,k) . b(k,n), cache-friendly i-k-j order.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &ap) in arow.iter().enumerate() {
            if ap != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += ap * brow[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn rand_tensor(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.normal()).collect())
    }

    /// Loss = sum(w ⊙ out) for a random fixed w, so output grads are
    /// non-uniform.
    fn weighted_sum(g: &mut Graph, out: NodeId, w: &Tensor) -> NodeId {
        let wn = g.constant(w.clone());
        let prod = g.mul(out, wn).unwrap();
        g.sum(prod).unwrap()
    }

    fn check_unary<F>(seed: u64, shape: Vec<usize>, build: F)
    where
        F: Fn(&mut Graph, NodeId) -> NodeId,
    {
        let mut rng = Rng::new(seed);
        let mut params = ParamSet::new();
        let x = rand_tensor(&mut rng, shape.clone());
        let pid = params.register("x", x);
        // forward once to learn the output shape
        let mut g0 = Graph::new();
        let xn = g0.param(&params, pid);
        let out0 = build(&mut g0, xn);
        let w = rand_tensor(&mut rng, g0.value(out0).shape().to_vec());

        let mut g = Graph::new();
        let xn = g.param(&params, pid);
        let out = build(&mut g, xn);
        let loss = weighted_sum(&mut g, out, &w);
        let grads = g.backward(loss, &params).unwrap();

        let err = gradcheck::check(&params, &grads.by_param, |p| {
            let mut g = Graph::new();
            let xn = g.param(p, pid);
            let out = build(&mut g, xn);
            let loss = weighted_sum(&mut g, out, &w);
            g.value(loss).item()
        });
        assert!(err < gradcheck::DEFAULT_RTOL, "seed {seed}: rel err {err}");
    }

    #[test]
    fn gradcheck_relu() {
        for seed in 0..10 {
            // keep points away from the kink
            let mut rng = Rng::new(900 + seed);
            let mut params = ParamSet::new();
            let mut data: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
            for v in &mut data {
                if v.abs() < 1e-3 {
                    *v += 0.1;
                }
            }
            let pid = params.register("x", Tensor::new(vec![3, 4], data));
            let w = rand_tensor(&mut rng, vec![3, 4]);
            let mut g = Graph::new();
            let xn = g.param(&params, pid);
            let out = g.relu(xn).unwrap();
            let loss = weighted_sum(&mut g, out, &w);
            let grads = g.backward(loss, &params).unwrap();
            let err = gradcheck::check(&params, &grads.by_param, |p| {
                let mut g = Graph::new();
                let xn = g.param(p, pid);
                let out = g.relu(xn).unwrap();
                let loss = weighted_sum(&mut g, out, &w);
                g.value(loss).item()
            });
            assert!(err < gradcheck::DEFAULT_RTOL);
        }
    }

    #[test]
    fn gradcheck_tanh_sigmoid_softmax() {
        for seed in 0..10 {
            check_unary(seed, vec![2, 5], |g, x| g.tanh(x).unwrap());
            check_unary(100 + seed, vec![2, 5], |g, x| g.sigmoid(x).unwrap());
            check_unary(200 + seed, vec![3, 4], |g, x| g.softmax(x).unwrap());
            check_unary(300 + seed, vec![2, 6], |g, x| g.slice_cols(x, 1, 3).unwrap());
            check_unary(400 + seed, vec![4, 3], |g, x| g.slice_rows(x, 1, 2).unwrap());
            check_unary(700 + seed, vec![3, 5], |g, x| g.transpose(x).unwrap());
            check_unary(500 + seed, vec![3, 4], |g, x| g.mean(x).unwrap());
            check_unary(600 + seed, vec![3, 4], |g, x| g.scale(x, -1.7).unwrap());
        }
    }

    #[test]
    fn gradcheck_matmul_add_sub_mul() {
        for seed in 0..10 {
            let mut rng = Rng::new(42 + seed);
            let mut params = ParamSet::new();
            let a = params.register("a", rand_tensor(&mut rng, vec![3, 4]));
            let b = params.register("b", rand_tensor(&mut rng, vec![4, 2]));
            let bias = params.register("bias", rand_tensor(&mut rng, vec![2]));
            let c = params.register("c", rand_tensor(&mut rng, vec![3, 2]));
            let w = rand_tensor(&mut rng, vec![3, 2]);

            let build = |g: &mut Graph, p: &ParamSet| -> NodeId {
                let an = g.param(p, a);
                let bn = g.param(p, b);
                let biasn = g.param(p, bias);
                let cn = g.param(p, c);
                let mm = g.matmul(an, bn).unwrap();
                let plus = g.add(mm, biasn).unwrap();
                let minus = g.sub(plus, cn).unwrap();
                g.mul(minus, cn).unwrap()
            };
            let mut g = Graph::new();
            let out = build(&mut g, &params);
            let loss = weighted_sum(&mut g, out, &w);
            let grads = g.backward(loss, &params).unwrap();
            let err = gradcheck::check(&params, &grads.by_param, |p| {
                let mut g = Graph::new();
                let out = build(&mut g, p);
                let loss = weighted_sum(&mut g, out, &w);
                g.value(loss).item()
            });
            assert!(err < gradcheck::DEFAULT_RTOL, "rel err {err}");
        }
    }

    #[test]
    fn gradcheck_layer_norm() {
        for seed in 0..10 {
            let mut rng = Rng::new(7000 + seed);
            let mut params = ParamSet::new();
            let x = params.register("x", rand_tensor(&mut rng, vec![3, 5]));
            let gamma = params.register("gamma", rand_tensor(&mut rng, vec![5]));
            let beta = params.register("beta", rand_tensor(&mut rng, vec![5]));
            let w = rand_tensor(&mut rng, vec![3, 5]);
            let mut g = Graph::new();
            let (xn, gn, bn) = (g.param(&params, x), g.param(&params, gamma), g.param(&params, beta));
            let out = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
            let loss = weighted_sum(&mut g, out, &w);
            let grads = g.backward(loss, &params).unwrap();
            let err = gradcheck::check(&params, &grads.by_param, |p| {
                let mut g = Graph::new();
                let (xn, gn, bn) = (g.param(p, x), g.param(p, gamma), g.param(p, beta));
                let out = g.layer_norm(xn, gn, bn, 1e-5).unwrap();
                let loss = weighted_sum(&mut g, out, &w);
                g.value(loss).item()
            });
            assert!(err < gradcheck::DEFAULT_RTOL, "rel err {err}");
        }
    }

    #[test]
    fn gradcheck_maxpool_embedding_concat_bce() {
        for seed in 0..10 {
            let mut rng = Rng::new(8100 + seed);
            // max-pool: resample until per-column top-2 gap clears 10*h
            let mut params = ParamSet::new();
            let x = loop {
                let t = rand_tensor(&mut rng, vec![4, 3]);
                let mut ok = true;
                for c in 0..3 {
                    let mut col: Vec<f64> = (0..4).map(|r| t.data()[r * 3 + c]).collect();
                    col.sort_by(|p, q| q.partial_cmp(p).unwrap());
                    if col[0] - col[1] < 10.0 * gradcheck::DEFAULT_H {
                        ok = false;
                    }
                }
                if ok {
                    break t;
                }
            };
            let xp = params.register("x", x);
            let table = params.register("table", rand_tensor(&mut rng, vec![6, 3]));
            let logit = params.register("logit", rand_tensor(&mut rng, vec![1]));
            let w = rand_tensor(&mut rng, vec![3]);
            let catw = rand_tensor(&mut rng, vec![8, 3]);
            let ids = vec![2usize, 0, 5, 2];

            let build = |g: &mut Graph, p: &ParamSet| -> (NodeId, NodeId, NodeId) {
                let xn = g.param(p, xp);
                let tn = g.param(p, table);
                let ln = g.param(p, logit);
                let pooled = g.max_pool_rows(xn).unwrap();
                let emb = g.embedding(tn, &ids).unwrap();
                let cat = g.concat_rows(&[emb, xn]).unwrap();
                let bce = g.bce_with_logits(ln, 1.0).unwrap();
                (pooled, cat, bce)
            };
            let mut g = Graph::new();
            let (pooled, cat, bce) = build(&mut g, &params);
            let l1 = weighted_sum(&mut g, pooled, &w);
            let l2 = weighted_sum(&mut g, cat, &catw);
            let s1 = g.add(l1, l2).unwrap();
            let loss = g.add(s1, bce).unwrap();
            let grads = g.backward(loss, &params).unwrap();
            let err = gradcheck::check(&params, &grads.by_param, |p| {
                let mut g = Graph::new();
                let (pooled, cat, bce) = build(&mut g, p);
                let l1 = weighted_sum(&mut g, pooled, &w);
                let l2 = weighted_sum(&mut g, cat, &catw);
                let s1 = g.add(l1, l2).unwrap();
                let loss = g.add(s1, bce).unwrap();
                g.value(loss).item()
            });
            assert!(err < gradcheck::DEFAULT_RTOL, "rel err {err}");
        }
    }

    #[test]
    fn maxpool_forward_matches_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.0, 5.0, 3.0, 4.0]));
        let out = g.max_pool_rows(x).unwrap();
        assert_eq!(g.value(out).data(), &[3.0, 5.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![1, 3]));
        let b = g.constant(Tensor::new(vec![3, 2], vec![5.0, -1.0, 2.0, 9.0, 0.5, 7.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).data(), &[0.0, 0.0]);
        assert_eq!(g.value(out).shape(), &[1, 2]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero_before_affine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::filled(vec![1, 6], 4.2));
        let gamma = g.constant(Tensor::filled(vec![6], 1.0));
        let beta = g.constant(Tensor::zeros(vec![6]));
        let out = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert!(g.value(out).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_map_gradient_is_broadcast_of_input() {
        // loss = sum(W.x), x fixed -> dL/dW[i][j] = x[j]
        let mut params = ParamSet::new();
        let wp = params.register("W", Tensor::zeros(vec![3, 4]));
        let x = Tensor::new(vec![4, 1], vec![2.0, -1.0, 0.5, 3.0]);
        let mut g = Graph::new();
        let wn = g.param(&params, wp);
        let xn = g.constant(x.clone());
        let prod = g.matmul(wn, xn).unwrap();
        let loss = g.sum(prod).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(grads.by_param[0].data()[r * 4 + c], x.data()[c]);
            }
        }
    }

    #[test]
    fn maxpool_ties_route_to_lowest_row() {
        let mut params = ParamSet::new();
        let xp = params.register("x", Tensor::new(vec![3, 1], vec![7.0, 7.0, 1.0]));
        let mut g = Graph::new();
        let xn = g.param(&params, xp);
        let pooled = g.max_pool_rows(xn).unwrap();
        let loss = g.sum(pooled).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert_eq!(grads.by_param[0].data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut params = ParamSet::new();
        let a = params.register("a", Tensor::scalar(2.0));
        let _unused = params.register("unused", Tensor::new(vec![2], vec![1.0, 1.0]));
        let mut g = Graph::new();
        let an = g.param(&params, a);
        let loss = g.sum(an).unwrap();
        let grads = g.backward(loss, &params).unwrap();
        assert_eq!(grads.by_param[0].item(), 1.0);
        assert_eq!(grads.by_param[1].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let params = ParamSet::new();
        let x = g.constant(Tensor::zeros(vec![2, 2]));
        let err = g.backward(x, &params).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn non_finite_output_is_an_error_naming_the_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1.0));
        let err = g.scale(x, f64::INFINITY).unwrap_err();
        assert_eq!(err, TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let run = || -> Vec<u64> {
            let mut rng = Rng::new(31);
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, vec![4, 4]));
            let y = g.constant(rand_tensor(&mut rng, vec![4, 4]));
            let mm = g.matmul(x, y).unwrap();
            let sm = g.softmax(mm).unwrap();
            let t = g.tanh(sm).unwrap();
            g.value(t).data().iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn forward_op_dispatch_matches_typed_calls() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let via_kind = g.forward_op(OpKind::Tanh, &[x]).unwrap();
        let typed = g.tanh(x).unwrap();
        assert_eq!(g.value(via_kind).data(), g.value(typed).data());
    }
}
