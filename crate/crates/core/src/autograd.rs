//! Tape-based reverse-mode autodiff over [`Tensor`].
//!
//! Every forward op appends a node; `backward` walks the tape in reverse.
//! Ops are an enum rather than closures so the tape stays inspectable: the
//! loss registry and the detachment audit (which loss nodes couple which
//! token streams) read the recorded structure directly.
//!
//! Straight-through discretization sites are expressed as `AddOffset`: the
//! forward value is `input + c` where `c` is a constant computed from a
//! non-differentiable selection (nearest-neighbor or argmax), and the
//! gradient passes through unchanged. Recording/replaying those offsets lets
//! a finite-difference oracle differentiate exactly the surrogate function
//! the backward pass claims to differentiate.

use crate::tensor::Tensor;

pub type NodeId = usize;

/// Which discrete token stream a loss touches; used by the detachment audit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    /// Pre-MLLM morph tokens (output of the image encoder).
    MorphPre,
    /// Post-MLLM morph tokens (regenerated by the language model).
    MorphPost,
    /// Low-level pixel tokens.
    Pixel,
    /// Anything else (aux losses, codec reconstruction, probes).
    Other,
}

/// One loss node plus the token streams it couples.
#[derive(Clone, Debug)]
pub struct LossRecord {
    pub node: NodeId,
    pub predicted: TokenKind,
    pub target: TokenKind,
    pub label: String,
}

/// A recorded straight-through site: the discrete selection and the constant
/// offset that realizes it on the forward pass.
#[derive(Clone, Debug)]
pub struct StSite {
    pub ids: Vec<usize>,
    pub offset: Tensor,
}

enum StMode {
    /// Compute selections from current values and remember them.
    Record(Vec<StSite>),
    /// Reuse previously recorded selections (finite-difference oracle mode).
    Replay(Vec<StSite>, usize),
}

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, ta: bool, tb: bool },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    MulBias { a: NodeId, gain: NodeId },
    EMul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    RowSoftmax { a: NodeId },
    ColSoftmax { a: NodeId },
    RowNormalize { a: NodeId },
    RowL2Normalize { a: NodeId },
    LayerNorm { a: NodeId },
    Gelu { a: NodeId },
    Tanh { a: NodeId },
    Sigmoid { a: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    ConcatRows { parts: Vec<NodeId> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    MeanAll { a: NodeId },
    SumAll { a: NodeId },
    AddOffset { a: NodeId },
    Detach,
    MseLoss { a: NodeId, b: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Tensor>,
    needs_grad: bool,
    /// Forward intermediates needed by backward (softmax probs, layernorm rstd).
    aux: Vec<f64>,
}

pub struct Graph {
    nodes: Vec<Node>,
    st_mode: StMode,
    losses: Vec<LossRecord>,
}

const LN_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), st_mode: StMode::Record(Vec::new()), losses: Vec::new() }
    }

    /// Graph that replays previously recorded straight-through selections.
    pub fn replaying(sites: Vec<StSite>) -> Self {
        Graph { nodes: Vec::new(), st_mode: StMode::Replay(sites, 0), losses: Vec::new() }
    }

    /// The straight-through sites recorded during this build.
    pub fn take_st_sites(&mut self) -> Vec<StSite> {
        match &mut self.st_mode {
            StMode::Record(sites) => std::mem::take(sites),
            StMode::Replay(..) => Vec::new(),
        }
    }

    pub fn losses(&self) -> &[LossRecord] {
        &self.losses
    }

    /// Loss records that tie pre-MLLM morph ids to post-MLLM morph ids.
    /// Detached training must produce none of these.
    pub fn coupled_losses(&self) -> Vec<LossRecord> {
        self.losses
            .iter()
            .filter(|l| {
                (l.predicted == TokenKind::MorphPost && l.target == TokenKind::MorphPre)
                    || (l.predicted == TokenKind::MorphPre && l.target == TokenKind::MorphPost)
            })
            .cloned()
            .collect()
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.nodes[n].value
    }

    pub fn grad(&self, n: NodeId) -> Option<&Tensor> {
        self.nodes[n].grad.as_ref()
    }

    pub fn rows(&self, n: NodeId) -> usize {
        self.nodes[n].value.rows
    }

    pub fn cols(&self, n: NodeId) -> usize {
        self.nodes[n].value.cols
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, aux: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value, grad: None, needs_grad, aux });
        self.nodes.len() - 1
    }

    fn ng(&self, n: NodeId) -> bool {
        self.nodes[n].needs_grad
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, false, Vec::new())
    }

    /// Differentiable leaf (parameters, or probe inputs in gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t, true, Vec::new())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> NodeId {
        let v = Tensor::matmul(&self.nodes[a].value, ta, &self.nodes[b].value, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::MatMul { a, b, ta, tb }, v, ng, Vec::new())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut v = va.clone();
        for (x, y) in v.data.iter_mut().zip(vb.data.iter()) {
            *x += *y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::Add { a, b }, v, ng, Vec::new())
    }

    /// a (R x C) + bias (1 x C) broadcast over rows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[bias].value);
        assert_eq!(vb.rows, 1);
        assert_eq!(va.cols, vb.cols, "bias width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += vb.data[c];
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(Op::AddBias { a, bias }, v, ng, Vec::new())
    }

    /// a (R x C) * gain (1 x C) broadcast over rows.
    pub fn mul_bias(&mut self, a: NodeId, gain: NodeId) -> NodeId {
        let (va, vg) = (&self.nodes[a].value, &self.nodes[gain].value);
        assert_eq!(vg.rows, 1);
        assert_eq!(va.cols, vg.cols, "gain width mismatch");
        let mut v = va.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= vg.data[c];
            }
        }
        let ng = self.ng(a) || self.ng(gain);
        self.push(Op::MulBias { a, gain }, v, ng, Vec::new())
    }

    pub fn emul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "emul shape mismatch");
        let mut v = va.clone();
        for (x, y) in v.data.iter_mut().zip(vb.data.iter()) {
            *x *= *y;
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Op::EMul { a, b }, v, ng, Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data.iter_mut() {
            *x *= c;
        }
        let ng = self.ng(a);
        self.push(Op::Scale { a, c }, v, ng, Vec::new())
    }

    /// Softmax along each row (normalizes over columns).
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut v = va.clone();
        for r in 0..v.rows {
            softmax_inplace(&mut v.data[r * v.cols..(r + 1) * v.cols]);
        }
        let ng = self.ng(a);
        self.push(Op::RowSoftmax { a }, v, ng, Vec::new())
    }

    /// Softmax along each column (normalizes over rows). This is the
    /// query-axis normalization used by slot attention.
    pub fn col_softmax(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (rows, cols) = va.shape();
        let mut v = va.clone();
        let mut col = vec![0.0; rows];
        for c in 0..cols {
            for r in 0..rows {
                col[r] = v.data[r * cols + c];
            }
            softmax_inplace(&mut col);
            for r in 0..rows {
                v.data[r * cols + c] = col[r];
            }
        }
        let ng = self.ng(a);
        self.push(Op::ColSoftmax { a }, v, ng, Vec::new())
    }

    /// Divide each row by its sum. Inputs must be strictly positive.
    pub fn row_normalize(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut v = va.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let s: f64 = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let ng = self.ng(a);
        self.push(Op::RowNormalize { a }, v, ng, Vec::new())
    }

    /// Row-wise L2 normalization.
    pub fn row_l2_normalize(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let mut v = va.clone();
        let mut aux = Vec::with_capacity(v.rows);
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in row.iter_mut() {
                *x /= n;
            }
            aux.push(n);
        }
        let ng = self.ng(a);
        self.push(Op::RowL2Normalize { a }, v, ng, aux)
    }

    /// Per-row zero-mean unit-variance normalization (affine handled by
    /// `mul_bias`/`add_bias` on top).
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let (rows, cols) = va.shape();
        let mut v = va.clone();
        let mut aux = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut v.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            aux.push(rstd);
        }
        let ng = self.ng(a);
        self.push(Op::LayerNorm { a }, v, ng, aux)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data.iter_mut() {
            *x = gelu_fwd(*x);
        }
        let ng = self.ng(a);
        self.push(Op::Gelu { a }, v, ng, Vec::new())
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data.iter_mut() {
            *x = x.tanh();
        }
        let ng = self.ng(a);
        self.push(Op::Tanh { a }, v, ng, Vec::new())
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut v = self.nodes[a].value.clone();
        for x in v.data.iter_mut() {
            *x = 1.0 / (1.0 + (-*x).exp());
        }
        let ng = self.ng(a);
        self.push(Op::Sigmoid { a }, v, ng, Vec::new())
    }

    /// Select rows `ids` from `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let vt = &self.nodes[table].value;
        let mut v = Tensor::zeros(ids.len(), vt.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < vt.rows, "gather id {} out of range {}", id, vt.rows);
            v.row_mut(r).copy_from_slice(vt.row(id));
        }
        let ng = self.ng(table);
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, ng, Vec::new())
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let cols = self.cols(parts[0]);
        let rows: usize = parts.iter().map(|&p| self.rows(p)).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        let mut ng = false;
        for &p in parts {
            let vp = &self.nodes[p].value;
            assert_eq!(vp.cols, cols, "concat_rows width mismatch");
            v.data[off..off + vp.len()].copy_from_slice(&vp.data);
            off += vp.len();
            ng |= self.ng(p);
        }
        self.push(Op::ConcatRows { parts: parts.to_vec() }, v, ng, Vec::new())
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.rows, "slice_rows out of range");
        let v = Tensor::from_vec(
            len,
            va.cols,
            va.data[start * va.cols..(start + len) * va.cols].to_vec(),
        );
        let ng = self.ng(a);
        self.push(Op::SliceRows { a, start }, v, ng, Vec::new())
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let va = &self.nodes[a].value;
        assert!(start + len <= va.cols, "slice_cols out of range");
        let mut v = Tensor::zeros(va.rows, len);
        for r in 0..va.rows {
            v.row_mut(r).copy_from_slice(&va.row(r)[start..start + len]);
        }
        let ng = self.ng(a);
        self.push(Op::SliceCols { a, start }, v, ng, Vec::new())
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Tensor::scalar(va.data.iter().sum::<f64>() / va.len() as f64);
        let ng = self.ng(a);
        self.push(Op::MeanAll { a }, v, ng, Vec::new())
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a].value;
        let v = Tensor::scalar(va.data.iter().sum::<f64>());
        let ng = self.ng(a);
        self.push(Op::SumAll { a }, v, ng, Vec::new())
    }

    /// Stop-gradient: identity forward, no backward.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.clone();
        self.push(Op::Detach, v, false, Vec::new())
    }

    /// Mean squared error over all elements of two same-shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.mse_tagged(a, b, TokenKind::Other, TokenKind::Other, "mse")
    }

    pub fn mse_tagged(
        &mut self,
        a: NodeId,
        b: NodeId,
        predicted: TokenKind,
        target: TokenKind,
        label: &str,
    ) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mse shape mismatch");
        let n = va.len() as f64;
        let mut s = 0.0;
        for i in 0..va.len() {
            let d = va.data[i] - vb.data[i];
            s += d * d;
        }
        let ng = self.ng(a) || self.ng(b);
        let node = self.push(Op::MseLoss { a, b }, Tensor::scalar(s / n), ng, Vec::new());
        self.losses.push(LossRecord { node, predicted, target, label: label.to_string() });
        node
    }

    /// Mean negative log-likelihood of `targets[r]` under `softmax(logits[r])`,
    /// averaged over rows where `mask[r]` is true.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
        predicted: TokenKind,
        target_kind: TokenKind,
        label: &str,
    ) -> NodeId {
        let vl = &self.nodes[logits].value;
        assert_eq!(vl.rows, targets.len());
        assert_eq!(vl.rows, mask.len());
        let m = mask.iter().filter(|&&b| b).count();
        assert!(m > 0, "cross_entropy with empty mask");
        let cols = vl.cols;
        let mut aux = vec![0.0; vl.len()];
        let mut nll = 0.0;
        for r in 0..vl.rows {
            if !mask[r] {
                continue;
            }
            let row = vl.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..cols {
                let e = (row[c] - mx).exp();
                aux[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                aux[r * cols + c] /= z;
            }
            assert!(targets[r] < cols, "target out of vocab range");
            nll += -(aux[r * cols + targets[r]].max(1e-300)).ln();
        }
        let ng = self.ng(logits);
        let node = self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            Tensor::scalar(nll / m as f64),
            ng,
            aux,
        );
        self.losses.push(LossRecord {
            node,
            predicted,
            target: target_kind,
            label: label.to_string(),
        });
        node
    }

    /// Straight-through nearest-neighbor quantization of each row of `z`
    /// against `codebook` (a K x d value table). Forward returns the selected
    /// codebook rows; the gradient w.r.t. `z` is the downstream gradient
    /// unchanged. No gradient reaches the codebook through this node.
    pub fn st_quantize(&mut self, z: NodeId, codebook: &Tensor) -> (NodeId, Vec<usize>) {
        let site = match &mut self.st_mode {
            StMode::Replay(sites, cursor) => {
                let s = sites[*cursor].clone();
                *cursor += 1;
                s
            }
            StMode::Record(_) => {
                let vz = &self.nodes[z].value;
                assert!(vz.is_finite(), "st_quantize: non-finite input");
                assert_eq!(vz.cols, codebook.cols, "st_quantize dim mismatch");
                let mut ids = Vec::with_capacity(vz.rows);
                let mut offset = Tensor::zeros(vz.rows, vz.cols);
                for r in 0..vz.rows {
                    let id = nearest_row(codebook, vz.row(r));
                    ids.push(id);
                    for c in 0..vz.cols {
                        offset.data[r * vz.cols + c] = codebook.at(id, c) - vz.at(r, c);
                    }
                }
                let site = StSite { ids, offset };
                if let StMode::Record(sites) = &mut self.st_mode {
                    sites.push(site.clone());
                }
                site
            }
        };
        let va = &self.nodes[z].value;
        let mut v = va.clone();
        for i in 0..v.len() {
            v.data[i] += site.offset.data[i];
        }
        let ng = self.ng(z);
        let node = self.push(Op::AddOffset { a: z }, v, ng, Vec::new());
        (node, site.ids)
    }

    /// Straight-through argmax embedding: forward value is `emb[argmax(logits)]`
    /// per row; backward treats the output as `softmax(logits) @ emb` (the
    /// expected embedding), so gradient flows into both logits and table.
    pub fn st_argmax_embed(&mut self, logits: NodeId, emb: NodeId) -> (NodeId, Vec<usize>) {
        let p = self.row_softmax(logits);
        let expected = self.matmul(p, emb);
        let site = match &mut self.st_mode {
            StMode::Replay(sites, cursor) => {
                let s = sites[*cursor].clone();
                *cursor += 1;
                s
            }
            StMode::Record(_) => {
                let vl = &self.nodes[logits].value;
                let ve = &self.nodes[emb].value;
                let vx = &self.nodes[expected].value;
                let mut ids = Vec::with_capacity(vl.rows);
                let mut offset = Tensor::zeros(vx.rows, vx.cols);
                for r in 0..vl.rows {
                    let id = Tensor::argmax_slice(vl.row(r));
                    ids.push(id);
                    for c in 0..vx.cols {
                        offset.data[r * vx.cols + c] = ve.at(id, c) - vx.at(r, c);
                    }
                }
                let site = StSite { ids, offset };
                if let StMode::Record(sites) = &mut self.st_mode {
                    sites.push(site.clone());
                }
                site
            }
        };
        let va = &self.nodes[expected].value;
        let mut v = va.clone();
        for i in 0..v.len() {
            v.data[i] += site.offset.data[i];
        }
        let ng = self.ng(expected);
        let node = self.push(Op::AddOffset { a: expected }, v, ng, Vec::new());
        (node, site.ids)
    }

    /// Reverse pass from a scalar node. Accumulates into node grads.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.len(), 1, "backward from non-scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i);
        }
    }

    fn add_grad(&mut self, n: NodeId, g: Tensor) {
        if !self.nodes[n].needs_grad {
            return;
        }
        match &mut self.nodes[n].grad {
            Some(acc) => {
                for (x, y) in acc.data.iter_mut().zip(g.data.iter()) {
                    *x += *y;
                }
            }
            None => self.nodes[n].grad = Some(g),
        }
    }

    fn propagate(&mut self, i: NodeId) {
        let d = self.nodes[i].grad.clone().expect("grad present");
        // Ops are matched by value to satisfy the borrow checker; clones of id
        // lists are cheap relative to the matmuls.
        match &self.nodes[i].op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                if self.ng(a) {
                    let ga = match (ta, tb) {
                        (false, false) => Tensor::matmul(&d, false, &vb, true),
                        (false, true) => Tensor::matmul(&d, false, &vb, false),
                        (true, false) => Tensor::matmul(&vb, false, &d, true),
                        (true, true) => Tensor::matmul(&vb, true, &d, true),
                    };
                    self.add_grad(a, ga);
                }
                if self.ng(b) {
                    let gb = match (ta, tb) {
                        (false, false) => Tensor::matmul(&va, true, &d, false),
                        (true, false) => Tensor::matmul(&va, false, &d, false),
                        (false, true) => Tensor::matmul(&d, true, &va, false),
                        (true, true) => Tensor::matmul(&d, true, &va, true),
                    };
                    self.add_grad(b, gb);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.add_grad(a, d.clone());
                self.add_grad(b, d);
            }
            Op::AddBias { a, bias } => {
                let (a, bias) = (*a, *bias);
                let mut gb = Tensor::zeros(1, d.cols);
                for r in 0..d.rows {
                    for c in 0..d.cols {
                        gb.data[c] += d.at(r, c);
                    }
                }
                self.add_grad(a, d);
                self.add_grad(bias, gb);
            }
            Op::MulBias { a, gain } => {
                let (a, gain) = (*a, *gain);
                let va = self.nodes[a].value.clone();
                let vg = self.nodes[gain].value.clone();
                let mut ga = d.clone();
                for r in 0..ga.rows {
                    for c in 0..ga.cols {
                        ga.data[r * ga.cols + c] *= vg.data[c];
                    }
                }
                let mut gg = Tensor::zeros(1, d.cols);
                for r in 0..d.rows {
                    for c in 0..d.cols {
                        gg.data[c] += d.at(r, c) * va.at(r, c);
                    }
                }
                self.add_grad(a, ga);
                self.add_grad(gain, gg);
            }
            Op::EMul { a, b } => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                let mut ga = d.clone();
                let mut gb = d;
                for i in 0..ga.len() {
                    ga.data[i] *= vb.data[i];
                    gb.data[i] *= va.data[i];
                }
                self.add_grad(a, ga);
                self.add_grad(b, gb);
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let mut g = d;
                for x in g.data.iter_mut() {
                    *x *= c;
                }
                self.add_grad(a, g);
            }
            Op::RowSoftmax { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut g = d;
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = &mut g.data[r * y.cols..(r + 1) * y.cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        gr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_grad(a, g);
            }
            Op::ColSoftmax { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let (rows, cols) = y.shape();
                let mut g = d;
                for c in 0..cols {
                    let mut dot = 0.0;
                    for r in 0..rows {
                        dot += y.data[r * cols + c] * g.data[r * cols + c];
                    }
                    for r in 0..rows {
                        let yv = y.data[r * cols + c];
                        g.data[r * cols + c] = yv * (g.data[r * cols + c] - dot);
                    }
                }
                self.add_grad(a, g);
            }
            Op::RowNormalize { a } => {
                let a = *a;
                let va = self.nodes[a].value.clone();
                let y = self.nodes[i].value.clone();
                let mut g = d;
                for r in 0..y.rows {
                    let s: f64 = va.row(r).iter().sum();
                    let yr = y.row(r);
                    let gr = &mut g.data[r * y.cols..(r + 1) * y.cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        gr[c] = (gr[c] - dot) / s;
                    }
                }
                self.add_grad(a, g);
            }
            Op::RowL2Normalize { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let norms = self.nodes[i].aux.clone();
                let mut g = d;
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = &mut g.data[r * y.cols..(r + 1) * y.cols];
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for c in 0..y.cols {
                        gr[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.add_grad(a, g);
            }
            Op::LayerNorm { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let rstd = self.nodes[i].aux.clone();
                let cols = y.cols as f64;
                let mut g = d;
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = &mut g.data[r * y.cols..(r + 1) * y.cols];
                    let mean_g: f64 = gr.iter().sum::<f64>() / cols;
                    let mean_gy: f64 =
                        gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / cols;
                    for c in 0..y.cols {
                        gr[c] = rstd[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.add_grad(a, g);
            }
            Op::Gelu { a } => {
                let a = *a;
                let va = self.nodes[a].value.clone();
                let mut g = d;
                for (gx, &x) in g.data.iter_mut().zip(va.data.iter()) {
                    *gx *= gelu_bwd(x);
                }
                self.add_grad(a, g);
            }
            Op::Tanh { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut g = d;
                for (gx, &yv) in g.data.iter_mut().zip(y.data.iter()) {
                    *gx *= 1.0 - yv * yv;
                }
                self.add_grad(a, g);
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let y = self.nodes[i].value.clone();
                let mut g = d;
                for (gx, &yv) in g.data.iter_mut().zip(y.data.iter()) {
                    *gx *= yv * (1.0 - yv);
                }
                self.add_grad(a, g);
            }
            Op::GatherRows { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let vt = &self.nodes[table].value;
                let mut gt = Tensor::zeros(vt.rows, vt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..gt.cols {
                        gt.data[id * gt.cols + c] += d.at(r, c);
                    }
                }
                self.add_grad(table, gt);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let rows = self.rows(p);
                    let cols = self.cols(p);
                    let g = Tensor::from_vec(
                        rows,
                        cols,
                        d.data[off..off + rows * cols].to_vec(),
                    );
                    off += rows * cols;
                    self.add_grad(p, g);
                }
            }
            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let va = &self.nodes[a].value;
                let mut g = Tensor::zeros(va.rows, va.cols);
                g.data[start * g.cols..start * g.cols + d.len()].copy_from_slice(&d.data);
                self.add_grad(a, g);
            }
            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let va = &self.nodes[a].value;
                let mut g = Tensor::zeros(va.rows, va.cols);
                for r in 0..d.rows {
                    for c in 0..d.cols {
                        g.data[r * g.cols + start + c] = d.at(r, c);
                    }
                }
                self.add_grad(a, g);
            }
            Op::MeanAll { a } => {
                let a = *a;
                let va = &self.nodes[a].value;
                let g = Tensor::filled(va.rows, va.cols, d.item() / va.len() as f64);
                self.add_grad(a, g);
            }
            Op::SumAll { a } => {
                let a = *a;
                let va = &self.nodes[a].value;
                let g = Tensor::filled(va.rows, va.cols, d.item());
                self.add_grad(a, g);
            }
            Op::AddOffset { a } => {
                let a = *a;
                self.add_grad(a, d);
            }
            Op::MseLoss { a, b } => {
                let (a, b) = (*a, *b);
                let va = self.nodes[a].value.clone();
                let vb = self.nodes[b].value.clone();
                let scale = 2.0 * d.item() / va.len() as f64;
                let mut ga = Tensor::zeros(va.rows, va.cols);
                for i in 0..va.len() {
                    ga.data[i] = scale * (va.data[i] - vb.data[i]);
                }
                if self.ng(b) {
                    let mut gb = ga.clone();
                    for x in gb.data.iter_mut() {
                        *x = -*x;
                    }
                    self.add_grad(b, gb);
                }
                self.add_grad(a, ga);
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let logits = *logits;
                let targets = targets.clone();
                let mask = mask.clone();
                let probs = self.nodes[i].aux.clone();
                let vl = &self.nodes[logits].value;
                let m = mask.iter().filter(|&&b| b).count() as f64;
                let scale = d.item() / m;
                let mut g = Tensor::zeros(vl.rows, vl.cols);
                for r in 0..vl.rows {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..vl.cols {
                        let p = probs[r * vl.cols + c];
                        let y = if c == targets[r] { 1.0 } else { 0.0 };
                        g.data[r * vl.cols + c] = scale * (p - y);
                    }
                }
                self.add_grad(logits, g);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn softmax_inplace(xs: &mut [f64]) {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - mx).exp();
        z += *x;
    }
    for x in xs.iter_mut() {
        *x /= z;
    }
}

/// Nearest codebook row by squared Euclidean distance, lowest index on ties.
pub fn nearest_row(codebook: &Tensor, z: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for r in 0..codebook.rows {
        let d = Tensor::sq_dist(codebook.row(r), z);
        if d < best_d {
            best_d = d;
            best = r;
        }
    }
    best
}

fn gelu_fwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}
