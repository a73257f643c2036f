//! Reverse-mode automatic differentiation over tensors.
//!
//! A `Tape` is an append-only arena of nodes; op methods record enough
//! context to run the vector-Jacobian product in a match-based backward
//! pass. Node indices grow monotonically, so reverse insertion order is a
//! valid reverse topological order and every node is visited exactly once.
//!
//! `backward` flows gradients through a scratch buffer and only then
//! accumulates them into each node's persistent grad slot, so calling it
//! twice without zeroing doubles the stored gradients exactly.
//!
//! Reductions (sum, mean, mse, layer-norm statistics, softmax
//! denominators) accumulate in f64 regardless of the scalar type; matrix
//! products accumulate in the working precision.

use crate::error::{FloodError, Result};
use crate::num::scalar::{Scalar, EXP_CLAMP};
use crate::num::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// (m,k) x (k,n)
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    /// (r,c) + (c,): bias broadcast over the leading dim
    AddBias { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Exp { a: NodeId },
    Silu { a: NodeId },
    /// last-dim normalization with learned gain/bias
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    /// last-dim softmax
    Softmax { a: NodeId },
    Mse { a: NodeId, b: NodeId },
    Sum { a: NodeId },
    Mean { a: NodeId },
    SliceRows { a: NodeId, lo: usize },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, lo: usize, hi: usize },
    ConcatCols { parts: Vec<NodeId> },
    Transpose { a: NodeId },
    /// row gather (embedding lookup); backward scatter-adds
    GatherRows { a: NodeId, idx: Vec<usize> },
    Detach,
    /// strictly causal 1-D conv, stride 2, left edge padded by replicating
    /// the first input row; weight is (k*cin, cout) flat, bias (cout)
    CausalConvS2 { x: NodeId, w: NodeId, b: NodeId, k: usize },
    /// strictly causal transposed 1-D conv, stride 2, output cropped to
    /// 2*T rows; out[s] sums taps w[j] * in[(s-j)/2] for even (s-j)
    CausalTConvS2 { x: NodeId, w: NodeId, b: NodeId, k: usize },
}

struct NodeData<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<NodeData<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(NodeData {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn req(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(FloodError::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    // ---- op recording ------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 {
            return Err(FloodError::Shape("matmul wants 2-D operands".into()));
        }
        let (m, k) = (va.shape()[0], va.shape()[1]);
        let (k2, n) = (vb.shape()[0], vb.shape()[1]);
        if k != k2 {
            return Err(FloodError::Shape(format!(
                "matmul inner dims: ({m},{k}) x ({k2},{n})"
            )));
        }
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x + y)
                .collect(),
        )?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// (r, c) + (c,) broadcast over the leading dim.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let c = *va.shape().last().unwrap();
        if vb.shape() != [c] {
            return Err(FloodError::Shape(format!(
                "add_bias: {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let bd = vb.data().to_vec();
        let value = Tensor::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % c])
                .collect(),
        )?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::AddBias { a, b }, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x - y)
                .collect(),
        )?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .zip(self.value(b).data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64c(c);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|&x| x * cs).collect(),
        )
        .expect("scale preserves shape");
        let rg = self.req(a);
        self.push(value, Op::Scale { a, c }, rg)
    }

    /// exp with the input clamped to EXP_CLAMP from above.
    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let cap = S::from_f64c(EXP_CLAMP);
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .map(|&x| if x > cap { cap.exp() } else { x.exp() })
                .collect(),
        )
        .expect("exp preserves shape");
        let rg = self.req(a);
        self.push(value, Op::Exp { a }, rg)
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a)
                .data()
                .iter()
                .map(|&x| x * sigmoid(x))
                .collect(),
        )
        .expect("silu preserves shape");
        let rg = self.req(a);
        self.push(value, Op::Silu { a }, rg)
    }

    /// Last-dim layer norm with learned gain and bias (eps 1e-5).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let c = *va.shape().last().unwrap();
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(FloodError::Shape(format!(
                "layer_norm affine params want shape [{c}]"
            )));
        }
        let rows = va.len() / c;
        let mut out = vec![S::zero(); va.len()];
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        for r in 0..rows {
            let row = &va.data()[r * c..(r + 1) * c];
            let (mean, inv_std) = row_norm_stats(row);
            for i in 0..c {
                let xh = (row[i] - mean) * inv_std;
                out[r * c + i] = xh * g[i] + b[i];
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.req(a) || self.req(gain) || self.req(bias);
        Ok(self.push(value, Op::LayerNorm { a, gain, bias }, rg))
    }

    /// Softmax over the last dim.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let c = *va.shape().last().unwrap();
        if c == 0 {
            return Err(FloodError::Shape("softmax over empty dim".into()));
        }
        let rows = va.len() / c;
        let mut out = vec![S::zero(); va.len()];
        for r in 0..rows {
            let row = &va.data()[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = 0.0f64;
            for i in 0..c {
                let e = (row[i] - mx).exp();
                out[r * c + i] = e;
                denom += e.to_f64c();
            }
            let inv = S::from_f64c(1.0 / denom);
            for i in 0..c {
                out[r * c + i] = out[r * c + i] * inv;
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::Softmax { a }, rg))
    }

    /// Mean squared error over all elements; scalar output.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        let mut acc = 0.0f64;
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = (x - y).to_f64c();
            acc += d * d;
        }
        let value = Tensor::scalar(S::from_f64c(acc / n as f64));
        let rg = self.req(a) || self.req(b);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let acc: f64 = self.value(a).data().iter().map(|v| v.to_f64c()).sum();
        let value = Tensor::scalar(S::from_f64c(acc));
        let rg = self.req(a);
        self.push(value, Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len();
        let acc: f64 = self.value(a).data().iter().map(|v| v.to_f64c()).sum();
        let value = Tensor::scalar(S::from_f64c(acc / n as f64));
        let rg = self.req(a);
        self.push(value, Op::Mean { a }, rg)
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.rows();
        if lo > hi || hi > rows {
            return Err(FloodError::Shape(format!(
                "slice_rows [{lo},{hi}) of {rows} rows"
            )));
        }
        if lo == hi {
            return Err(FloodError::Shape("slice_rows over empty range".into()));
        }
        let w = va.row_len();
        let mut shape = va.shape().to_vec();
        shape[0] = hi - lo;
        let value = Tensor::new(shape, va.data()[lo * w..hi * w].to_vec())?;
        let rg = self.req(a);
        Ok(self.push(value, Op::SliceRows { a, lo }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(FloodError::Shape("concat_rows of nothing".into()));
        }
        let w = self.value(parts[0]).row_len();
        let mut shape = self.value(parts[0]).shape().to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.row_len() != w {
                return Err(FloodError::Shape("concat_rows row width mismatch".into()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        shape[0] = rows;
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(FloodError::Shape("slice_cols wants 2-D".into()));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        if lo >= hi || hi > c {
            return Err(FloodError::Shape(format!(
                "slice_cols [{lo},{hi}) of {c} cols"
            )));
        }
        let w = hi - lo;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * c + lo..i * c + hi]);
        }
        let value = Tensor::new(vec![r, w], data)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::SliceCols { a, lo, hi }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(FloodError::Shape("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).shape()[0];
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.shape()[0] != r {
                return Err(FloodError::Shape("concat_cols row count mismatch".into()));
            }
            total += v.shape()[1];
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[i * c..(i + 1) * c]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(FloodError::Shape("transpose wants 2-D".into()));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.req(a);
        Ok(self.push(value, Op::Transpose { a }, rg))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let va = self.value(a);
        let rows = va.rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(FloodError::Shape(format!(
                "gather_rows index {bad} out of {rows}"
            )));
        }
        if idx.is_empty() {
            return Err(FloodError::Shape("gather_rows with no indices".into()));
        }
        let w = va.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(va.row(i));
        }
        let mut shape = va.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::new(shape, data)?;
        let rg = self.req(a);
        Ok(self.push(
            value,
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Value copy with the gradient path severed.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    /// Causal strided conv; see `conv_forward` for the exact window geometry.
    pub fn causal_conv_s2(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.shape().len() != 2 || vw.shape().len() != 2 {
            return Err(FloodError::Shape("conv wants 2-D x and w".into()));
        }
        let cin = vx.shape()[1];
        if vw.shape()[0] != k * cin {
            return Err(FloodError::Shape(format!(
                "conv weight rows {} != k*cin {}",
                vw.shape()[0],
                k * cin
            )));
        }
        let cout = vw.shape()[1];
        if vb.shape() != [cout] {
            return Err(FloodError::Shape("conv bias shape".into()));
        }
        let value = conv_forward(vx, vw, vb, k)?;
        let rg = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, Op::CausalConvS2 { x, w, b, k }, rg))
    }

    pub fn causal_tconv_s2(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        if vx.shape().len() != 2 || vw.shape().len() != 2 {
            return Err(FloodError::Shape("tconv wants 2-D x and w".into()));
        }
        let cin = vx.shape()[1];
        if vw.shape()[0] != k * cin {
            return Err(FloodError::Shape(format!(
                "tconv weight rows {} != k*cin {}",
                vw.shape()[0],
                k * cin
            )));
        }
        let cout = vw.shape()[1];
        if vb.shape() != [cout] {
            return Err(FloodError::Shape("tconv bias shape".into()));
        }
        let value = tconv_forward(vx, vw, vb, k)?;
        let rg = self.req(x) || self.req(w) || self.req(b);
        Ok(self.push(value, Op::CausalTConvS2 { x, w, b, k }, rg))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulate d(loss)/d(node) into every reachable node's grad slot.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar_shape() {
            return Err(FloodError::Shape(format!(
                "backward wants a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut flow: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        flow[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match flow[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut flow)?;
            // persistent accumulation happens after the node's flow is final
            match &mut self.nodes[i].grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *a + *b;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn add_flow(&self, flow: &mut [Option<Tensor<S>>], id: NodeId, contrib: Tensor<S>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut flow[id.0] {
            Some(t) => {
                debug_assert_eq!(t.shape(), contrib.shape());
                for (a, b) in t.data_mut().iter_mut().zip(contrib.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, flow: &mut [Option<Tensor<S>>]) -> Result<()> {
        // clone op metadata cheaply to appease the borrow checker
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Detach => {}
            Op::Matmul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.req(a) {
                    // dA = dC * B^T
                    let da = matmul_bt_raw(g.data(), vb.data(), m, n, k);
                    self.add_flow(flow, a, Tensor::new(vec![m, k], da)?);
                }
                if self.req(b) {
                    // dB = A^T * dC
                    let db = matmul_at_raw(va.data(), g.data(), k, m, n);
                    self.add_flow(flow, b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add { a, b } => {
                if self.req(a) {
                    self.add_flow(flow, a, g.clone());
                }
                if self.req(b) {
                    self.add_flow(flow, b, g.clone());
                }
            }
            Op::AddBias { a, b } => {
                if self.req(a) {
                    self.add_flow(flow, a, g.clone());
                }
                if self.req(b) {
                    let c = self.value(b).len();
                    let mut acc = vec![0.0f64; c];
                    for (i, &v) in g.data().iter().enumerate() {
                        acc[i % c] += v.to_f64c();
                    }
                    let db = Tensor::new(vec![c], acc.iter().map(|&v| S::from_f64c(v)).collect())?;
                    self.add_flow(flow, b, db);
                }
            }
            Op::Sub { a, b } => {
                if self.req(a) {
                    self.add_flow(flow, a, g.clone());
                }
                if self.req(b) {
                    let neg = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| -v).collect(),
                    )?;
                    self.add_flow(flow, b, neg);
                }
            }
            Op::Mul { a, b } => {
                if self.req(a) {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&gv, &bv)| gv * bv)
                            .collect(),
                    )?;
                    self.add_flow(flow, a, da);
                }
                if self.req(b) {
                    let db = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &av)| gv * av)
                            .collect(),
                    )?;
                    self.add_flow(flow, b, db);
                }
            }
            Op::Scale { a, c } => {
                if self.req(a) {
                    let cs = S::from_f64c(c);
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data().iter().map(|&v| v * cs).collect(),
                    )?;
                    self.add_flow(flow, a, da);
                }
            }
            Op::Exp { a } => {
                if self.req(a) {
                    let cap = S::from_f64c(EXP_CLAMP);
                    let va = self.value(a);
                    let out = &self.nodes[i].value;
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(va.data().iter().zip(out.data()))
                            .map(|(&gv, (&xv, &yv))| {
                                if xv > cap {
                                    S::zero()
                                } else {
                                    gv * yv
                                }
                            })
                            .collect(),
                    )?;
                    self.add_flow(flow, a, da);
                }
            }
            Op::Silu { a } => {
                if self.req(a) {
                    let da = Tensor::new(
                        g.shape().to_vec(),
                        g.data()
                            .iter()
                            .zip(self.value(a).data())
                            .map(|(&gv, &xv)| {
                                let s = sigmoid(xv);
                                gv * s * (S::one() + xv * (S::one() - s))
                            })
                            .collect(),
                    )?;
                    self.add_flow(flow, a, da);
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let va = self.value(a);
                let c = *va.shape().last().unwrap();
                let rows = va.len() / c;
                let gv = self.value(gain).data().to_vec();
                let need_a = self.req(a);
                let need_g = self.req(gain);
                let need_b = self.req(bias);
                let mut da = vec![S::zero(); va.len()];
                let mut dg = vec![0.0f64; c];
                let mut db = vec![0.0f64; c];
                for r in 0..rows {
                    let row = &va.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let (mean, inv_std) = row_norm_stats(row);
                    // d = dL/dxhat, plus reductions for the affine params
                    let mut dsum = 0.0f64;
                    let mut dxsum = 0.0f64;
                    let mut d = vec![S::zero(); c];
                    for j in 0..c {
                        let xh = (row[j] - mean) * inv_std;
                        let dj = grow[j] * gv[j];
                        d[j] = dj;
                        dsum += dj.to_f64c();
                        dxsum += dj.to_f64c() * xh.to_f64c();
                        if need_g {
                            dg[j] += grow[j].to_f64c() * xh.to_f64c();
                        }
                        if need_b {
                            db[j] += grow[j].to_f64c();
                        }
                    }
                    if need_a {
                        let dmean = S::from_f64c(dsum / c as f64);
                        let dxmean = S::from_f64c(dxsum / c as f64);
                        for j in 0..c {
                            let xh = (row[j] - mean) * inv_std;
                            da[r * c + j] = (d[j] - dmean - xh * dxmean) * inv_std;
                        }
                    }
                }
                if need_a {
                    self.add_flow(flow, a, Tensor::new(va.shape().to_vec(), da)?);
                }
                if need_g {
                    self.add_flow(
                        flow,
                        gain,
                        Tensor::new(vec![c], dg.iter().map(|&v| S::from_f64c(v)).collect())?,
                    );
                }
                if need_b {
                    self.add_flow(
                        flow,
                        bias,
                        Tensor::new(vec![c], db.iter().map(|&v| S::from_f64c(v)).collect())?,
                    );
                }
            }
            Op::Softmax { a } => {
                if self.req(a) {
                    let out = &self.nodes[i].value;
                    let c = *out.shape().last().unwrap();
                    let rows = out.len() / c;
                    let mut da = vec![S::zero(); out.len()];
                    for r in 0..rows {
                        let yrow = &out.data()[r * c..(r + 1) * c];
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let mut dot = 0.0f64;
                        for j in 0..c {
                            dot += yrow[j].to_f64c() * grow[j].to_f64c();
                        }
                        let dots = S::from_f64c(dot);
                        for j in 0..c {
                            da[r * c + j] = yrow[j] * (grow[j] - dots);
                        }
                    }
                    self.add_flow(flow, a, Tensor::new(out.shape().to_vec(), da)?);
                }
            }
            Op::Mse { a, b } => {
                let scale = g.item() * S::from_f64c(2.0 / self.value(a).len() as f64);
                if self.req(a) {
                    let da = Tensor::new(
                        self.value(a).shape().to_vec(),
                        self.value(a)
                            .data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&x, &y)| scale * (x - y))
                            .collect(),
                    )?;
                    self.add_flow(flow, a, da);
                }
                if self.req(b) {
                    let db = Tensor::new(
                        self.value(b).shape().to_vec(),
                        self.value(a)
                            .data()
                            .iter()
                            .zip(self.value(b).data())
                            .map(|(&x, &y)| scale * (y - x))
                            .collect(),
                    )?;
                    self.add_flow(flow, b, db);
                }
            }
            Op::Sum { a } => {
                if self.req(a) {
                    let gv = g.item();
                    self.add_flow(flow, a, Tensor::full(self.value(a).shape(), gv));
                }
            }
            Op::Mean { a } => {
                if self.req(a) {
                    let gv = g.item() * S::from_f64c(1.0 / self.value(a).len() as f64);
                    self.add_flow(flow, a, Tensor::full(self.value(a).shape(), gv));
                }
            }
            Op::SliceRows { a, lo } => {
                if self.req(a) {
                    let va = self.value(a);
                    let w = va.row_len();
                    let mut da = Tensor::zeros(va.shape());
                    da.data_mut()[lo * w..lo * w + g.len()].copy_from_slice(g.data());
                    self.add_flow(flow, a, da);
                }
            }
            Op::ConcatRows { parts } => {
                let w = self.value(parts[0]).row_len();
                let mut off = 0;
                for &p in &parts {
                    let rows = self.value(p).rows();
                    if self.req(p) {
                        let dp = Tensor::new(
                            self.value(p).shape().to_vec(),
                            g.data()[off..off + rows * w].to_vec(),
                        )?;
                        self.add_flow(flow, p, dp);
                    }
                    off += rows * w;
                }
            }
            Op::SliceCols { a, lo, hi } => {
                if self.req(a) {
                    let va = self.value(a);
                    let (r, c) = (va.shape()[0], va.shape()[1]);
                    let w = hi - lo;
                    let mut da = Tensor::zeros(va.shape());
                    for i2 in 0..r {
                        da.data_mut()[i2 * c + lo..i2 * c + hi]
                            .copy_from_slice(&g.data()[i2 * w..(i2 + 1) * w]);
                    }
                    self.add_flow(flow, a, da);
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.value(parts[0]).shape()[0];
                let total: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
                let mut off = 0;
                for &p in &parts {
                    let c = self.value(p).shape()[1];
                    if self.req(p) {
                        let mut dp = Tensor::zeros(self.value(p).shape());
                        for i2 in 0..r {
                            dp.data_mut()[i2 * c..(i2 + 1) * c]
                                .copy_from_slice(&g.data()[i2 * total + off..i2 * total + off + c]);
                        }
                        self.add_flow(flow, p, dp);
                    }
                    off += c;
                }
            }
            Op::Transpose { a } => {
                if self.req(a) {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    let mut da = vec![S::zero(); r * c];
                    for i2 in 0..r {
                        for j in 0..c {
                            da[j * r + i2] = g.data()[i2 * c + j];
                        }
                    }
                    self.add_flow(flow, a, Tensor::new(vec![c, r], da)?);
                }
            }
            Op::GatherRows { a, idx } => {
                if self.req(a) {
                    let va = self.value(a);
                    let w = va.row_len();
                    let mut da = Tensor::zeros(va.shape());
                    for (row, &src) in idx.iter().enumerate() {
                        for j in 0..w {
                            let d = &mut da.data_mut()[src * w + j];
                            *d = *d + g.data()[row * w + j];
                        }
                    }
                    self.add_flow(flow, a, da);
                }
            }
            Op::CausalConvS2 { x, w, b, k } => {
                conv_backward(self, flow, g, x, w, b, k)?;
            }
            Op::CausalTConvS2 { x, w, b, k } => {
                tconv_backward(self, flow, g, x, w, b, k)?;
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    let cap = S::from_f64c(EXP_CLAMP);
    let nx = if -x > cap { cap } else { -x };
    S::one() / (S::one() + nx.exp())
}

/// Mean and 1/sqrt(var + eps) of a row, accumulated in f64.
fn row_norm_stats<S: Scalar>(row: &[S]) -> (S, S) {
    let c = row.len() as f64;
    let mut sum = 0.0f64;
    for &v in row {
        sum += v.to_f64c();
    }
    let mean = sum / c;
    let mut var = 0.0f64;
    for &v in row {
        let d = v.to_f64c() - mean;
        var += d * d;
    }
    var /= c;
    (S::from_f64c(mean), S::from_f64c(1.0 / (var + 1e-5).sqrt()))
}

/// Input row index for conv window position: tap j of output t' reads
/// input row 2t' - (k-1) + j, clamped to 0 (replicated first frame).
#[inline]
fn conv_src(t_out: usize, j: usize, k: usize) -> usize {
    let raw = 2 * t_out as isize - (k as isize - 1) + j as isize;
    raw.max(0) as usize
}

fn conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let t = x.shape()[0];
    let cin = x.shape()[1];
    let cout = w.shape()[1];
    let t_out = t.div_ceil(2);
    let mut out = vec![S::zero(); t_out * cout];
    for to in 0..t_out {
        let orow = &mut out[to * cout..(to + 1) * cout];
        orow.copy_from_slice(b.data());
        for j in 0..k {
            let src = conv_src(to, j, k).min(t - 1);
            let xrow = x.row(src);
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov = *ov + xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_out, cout], out)
}

fn conv_backward<S: Scalar>(
    tape: &Tape<S>,
    flow: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    k: usize,
) -> Result<()> {
    let vx = tape.value(x);
    let vw = tape.value(w);
    let t = vx.shape()[0];
    let cin = vx.shape()[1];
    let cout = vw.shape()[1];
    let t_out = t.div_ceil(2);
    let need_x = tape.req(x);
    let need_w = tape.req(w);
    let need_b = tape.req(b);
    let mut dx = Tensor::zeros(vx.shape());
    let mut dw = Tensor::zeros(vw.shape());
    let mut db = vec![0.0f64; cout];
    for to in 0..t_out {
        let grow = &g.data()[to * cout..(to + 1) * cout];
        if need_b {
            for (acc, &gv) in db.iter_mut().zip(grow) {
                *acc += gv.to_f64c();
            }
        }
        for j in 0..k {
            let src = conv_src(to, j, k).min(t - 1);
            for ci in 0..cin {
                let wrow = &vw.data()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                if need_x {
                    let mut acc = S::zero();
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        acc = acc + wv * gv;
                    }
                    let d = &mut dx.data_mut()[src * cin + ci];
                    *d = *d + acc;
                }
                if need_w {
                    let xv = vx.data()[src * cin + ci];
                    let dwrow = &mut dw.data_mut()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    for (dv, &gv) in dwrow.iter_mut().zip(grow) {
                        *dv = *dv + xv * gv;
                    }
                }
            }
        }
    }
    if need_x {
        tape.add_flow(flow, x, dx);
    }
    if need_w {
        tape.add_flow(flow, w, dw);
    }
    if need_b {
        tape.add_flow(
            flow,
            b,
            Tensor::new(vec![cout], db.iter().map(|&v| S::from_f64c(v)).collect())?,
        );
    }
    Ok(())
}

/// Taps of transposed-conv output row s: pairs (j, t_in) with s = 2*t_in + j.
#[inline]
pub(crate) fn tconv_taps(s: usize, k: usize, t_in: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).filter_map(move |j| {
        if s >= j && (s - j) % 2 == 0 {
            let t = (s - j) / 2;
            if t < t_in {
                return Some((j, t));
            }
        }
        None
    })
}

fn tconv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let t_in = x.shape()[0];
    let cin = x.shape()[1];
    let cout = w.shape()[1];
    let t_out = 2 * t_in;
    let mut out = vec![S::zero(); t_out * cout];
    for s in 0..t_out {
        let orow = &mut out[s * cout..(s + 1) * cout];
        orow.copy_from_slice(b.data());
        for (j, tin) in tconv_taps(s, k, t_in) {
            let xrow = x.row(tin);
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                for (ov, &wv) in orow.iter_mut().zip(wrow) {
                    *ov = *ov + xv * wv;
                }
            }
        }
    }
    Tensor::new(vec![t_out, cout], out)
}

fn tconv_backward<S: Scalar>(
    tape: &Tape<S>,
    flow: &mut [Option<Tensor<S>>],
    g: &Tensor<S>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    k: usize,
) -> Result<()> {
    let vx = tape.value(x);
    let vw = tape.value(w);
    let t_in = vx.shape()[0];
    let cin = vx.shape()[1];
    let cout = vw.shape()[1];
    let t_out = 2 * t_in;
    let need_x = tape.req(x);
    let need_w = tape.req(w);
    let need_b = tape.req(b);
    let mut dx = Tensor::zeros(vx.shape());
    let mut dw = Tensor::zeros(vw.shape());
    let mut db = vec![0.0f64; cout];
    for s in 0..t_out {
        let grow = &g.data()[s * cout..(s + 1) * cout];
        if need_b {
            for (acc, &gv) in db.iter_mut().zip(grow) {
                *acc += gv.to_f64c();
            }
        }
        for (j, tin) in tconv_taps(s, k, t_in) {
            for ci in 0..cin {
                let wrow = &vw.data()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                if need_x {
                    let mut acc = S::zero();
                    for (&wv, &gv) in wrow.iter().zip(grow) {
                        acc = acc + wv * gv;
                    }
                    let d = &mut dx.data_mut()[tin * cin + ci];
                    *d = *d + acc;
                }
                if need_w {
                    let xv = vx.data()[tin * cin + ci];
                    let dwrow = &mut dw.data_mut()[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                    for (dv, &gv) in dwrow.iter_mut().zip(grow) {
                        *dv = *dv + xv * gv;
                    }
                }
            }
        }
    }
    if need_x {
        tape.add_flow(flow, x, dx);
    }
    if need_w {
        tape.add_flow(flow, w, dw);
    }
    if need_b {
        tape.add_flow(
            flow,
            b,
            Tensor::new(vec![cout], db.iter().map(|&v| S::from_f64c(v)).collect())?,
        );
    }
    Ok(())
}
