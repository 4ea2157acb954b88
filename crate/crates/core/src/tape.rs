//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded eagerly on a [`Tape`]; [`Tape::backward`] walks the
//! recorded nodes once, in reverse, accumulating gradients. The op vocabulary
//! is deliberately fixed and broadcast-free: every fusion the model needs is
//! expressed with matrix products against explicit ones/constant leaves, which
//! rules out silent shape bugs.

use crate::tensor::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EwKind {
    Mul,
    Add,
    Sub,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActKind {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Elementwise { a: NodeId, b: NodeId, kind: EwKind },
    Activation { a: NodeId, kind: ActKind },
    Concat { parts: Vec<NodeId>, axis: usize },
    GatherRows { table: NodeId, indices: Vec<usize> },
    SumSquares { a: NodeId },
    Scale { a: NodeId, factor: f64 },
    AddN { parts: Vec<NodeId> },
    Reshape { a: NodeId },
    Detach,
    BceMean { pred: NodeId, labels: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Elementwise { .. } => "elementwise",
            Op::Activation { .. } => "activation",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumSquares { .. } => "sum_squares",
            Op::Scale { .. } => "scale",
            Op::AddN { .. } => "add_n",
            Op::Reshape { .. } => "reshape",
            Op::Detach => "detach",
            Op::BceMean { .. } => "bce_mean",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

const BCE_CLAMP: f64 = 1e-12;

/// Records a computation graph and replays it in reverse for gradients.
///
/// One tape per forward/backward pass; graph construction is single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    pub(crate) sigmoid_backward_sign: f64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            #[cfg(test)]
            sigmoid_backward_sign: 1.0,
        }
    }

    fn sigmoid_sign(&self) -> f64 {
        #[cfg(test)]
        {
            self.sigmoid_backward_sign
        }
        #[cfg(not(test))]
        {
            1.0
        }
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers a tensor as a graph input; its `requires_grad` flag decides
    /// whether backward accumulates a gradient for it.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let rg = t.requires_grad();
        self.push(Op::Leaf, t, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t.with_requires_grad(false), false)
    }

    fn child_requires_grad(&self, inputs: &[NodeId]) -> bool {
        inputs.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(TensorError::DimensionMismatch {
                context: "matmul inner dimensions",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = matmul_values(va, vb);
        let rg = self.child_requires_grad(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, value, rg))
    }

    /// Entrywise multiply/add/subtract of identically shaped tensors.
    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: EwKind) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::DimensionMismatch {
                context: "elementwise operands",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data: Vec<f64> = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| match kind {
                EwKind::Mul => x * y,
                EwKind::Add => x + y,
                EwKind::Sub => x - y,
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.child_requires_grad(&[a, b]);
        Ok(self.push(Op::Elementwise { a, b, kind }, value, rg))
    }

    pub fn activation(&mut self, a: NodeId, kind: ActKind) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va
            .data()
            .iter()
            .map(|&x| match kind {
                ActKind::Relu => x.max(0.0),
                ActKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.child_requires_grad(&[a]);
        self.push(Op::Activation { a, kind }, value, rg)
    }

    /// Concatenation along `axis` (0 = stack rows, 1 = extend columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat of zero parts".into()));
        }
        if axis > 1 {
            return Err(TensorError::Invalid(format!("concat axis {axis} out of range")));
        }
        let first = self.value(parts[0]).shape().to_vec();
        for &p in &parts[1..] {
            let s = self.value(p).shape();
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::DimensionMismatch {
                    context: "concat non-concat dimensions",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let value = if first.len() == 1 || axis == 0 {
            // stacking: contiguous append
            let mut data = Vec::new();
            let mut lead = 0usize;
            for &p in parts {
                let v = self.value(p);
                data.extend_from_slice(v.data());
                lead += if first.len() == 1 { v.len() } else { v.rows() };
            }
            let shape = if first.len() == 1 {
                vec![lead]
            } else {
                vec![lead, first[1]]
            };
            Tensor::new(shape, data)?
        } else {
            let rows = first[0];
            let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(rows * total_cols);
            for r in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(r));
                }
            }
            Tensor::new(vec![rows, total_cols], data)?
        };
        let rg = self.child_requires_grad(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            value,
            rg,
        ))
    }

    /// Selects rows of a 2-D table. Backward scatter-adds into the table, so
    /// only touched rows receive gradient.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let vt = self.value(table);
        let rows = vt.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::RowIndexOutOfRange { index: bad, rows });
        }
        let cols = vt.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(vt.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.child_requires_grad(&[table]);
        Ok(self.push(
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            value,
            rg,
        ))
    }

    /// Sum of squared entries, as a scalar node.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|x| x * x).sum();
        let rg = self.child_requires_grad(&[a]);
        self.push(Op::SumSquares { a }, Tensor::scalar(s), rg)
    }

    /// Multiplication by a compile-time constant factor.
    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = self.value(a);
        let data: Vec<f64> = va.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("shape preserved");
        let rg = self.child_requires_grad(&[a]);
        self.push(Op::Scale { a, factor }, value, rg)
    }

    /// Sum of identically shaped tensors.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("add_n of zero parts".into()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        for &p in &parts[1..] {
            if self.value(p).shape() != shape.as_slice() {
                return Err(TensorError::DimensionMismatch {
                    context: "add_n operands",
                    lhs: shape,
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let mut data = self.value(parts[0]).data().to_vec();
        for &p in &parts[1..] {
            for (d, x) in data.iter_mut().zip(self.value(p).data()) {
                *d += x;
            }
        }
        let value = Tensor::new(shape, data)?;
        let rg = self.child_requires_grad(parts);
        Ok(self.push(
            Op::AddN {
                parts: parts.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if shape.iter().product::<usize>() != va.len() {
            return Err(TensorError::BadReshape {
                from: va.shape().to_vec(),
                to: shape,
            });
        }
        let value = Tensor::new(shape, va.data().to_vec())?;
        let rg = self.child_requires_grad(&[a]);
        Ok(self.push(Op::Reshape { a }, value, rg))
    }

    /// Copies the value but blocks gradient flow into `a`.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).clone().with_requires_grad(false);
        let _ = a;
        self.push(Op::Detach, value, false)
    }

    /// Mean binary cross-entropy of predictions in (0,1) against fixed binary
    /// labels, with log arguments clamped at 1e-12.
    pub fn bce_mean(&mut self, pred: NodeId, labels: &[f64]) -> Result<NodeId, TensorError> {
        let vp = self.value(pred);
        if vp.is_empty() || labels.is_empty() {
            return Err(TensorError::Invalid("empty batch in bce_mean".into()));
        }
        if vp.len() != labels.len() {
            return Err(TensorError::DimensionMismatch {
                context: "bce_mean predictions vs labels",
                lhs: vp.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let n = labels.len() as f64;
        let loss = vp
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| {
                let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let rg = self.child_requires_grad(&[pred]);
        Ok(self.push(
            Op::BceMean {
                pred,
                labels: labels.to_vec(),
            },
            Tensor::scalar(loss),
            rg,
        ))
    }

    /// Scans all recorded values; names the first op that produced a
    /// non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some(format!("node {} ({})", i, n.op.name()))
            }
        })
    }

    /// Reverse pass from a scalar output. Visits each node exactly once in
    /// reverse topological order (construction order is topological).
    pub fn backward(&self, output: NodeId) -> Result<Gradients, TensorError> {
        let out_val = self.value(output);
        if out_val.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: out_val.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        // dL/da = g . b^T
                        let ga = matmul_bt(&g, vb);
                        accumulate(&mut grads, *a, ga);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dL/db = a^T . g
                        let gb = matmul_at(va, &g);
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Elementwise { a, b, kind } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.nodes[a.0].requires_grad {
                        let data: Vec<f64> = match kind {
                            EwKind::Mul => g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
                            EwKind::Add | EwKind::Sub => g.data().to_vec(),
                        };
                        accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data)?);
                    }
                    if self.nodes[b.0].requires_grad {
                        let data: Vec<f64> = match kind {
                            EwKind::Mul => g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect(),
                            EwKind::Add => g.data().to_vec(),
                            EwKind::Sub => g.data().iter().map(|x| -x).collect(),
                        };
                        accumulate(&mut grads, *b, Tensor::new(vb.shape().to_vec(), data)?);
                    }
                }
                Op::Activation { a, kind } => {
                    if self.nodes[a.0].requires_grad {
                        let va = self.value(*a);
                        let out = &self.nodes[i].value;
                        let data: Vec<f64> = match kind {
                            // subgradient at 0 defined as 0
                            ActKind::Relu => g
                                .data()
                                .iter()
                                .zip(va.data())
                                .map(|(gx, &x)| if x > 0.0 { *gx } else { 0.0 })
                                .collect(),
                            ActKind::Sigmoid => {
                                let sign = self.sigmoid_sign();
                                g.data()
                                    .iter()
                                    .zip(out.data())
                                    .map(|(gx, &s)| sign * gx * s * (1.0 - s))
                                    .collect()
                            }
                        };
                        accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data)?);
                    }
                }
                Op::Concat { parts, axis } => {
                    let ndim = self.value(parts[0]).shape().len();
                    if ndim == 1 || *axis == 0 {
                        let mut offset = 0usize;
                        for &p in parts {
                            let v = self.value(p);
                            let n = v.len();
                            if self.nodes[p.0].requires_grad {
                                let slice = g.data()[offset..offset + n].to_vec();
                                accumulate(&mut grads, p, Tensor::new(v.shape().to_vec(), slice)?);
                            }
                            offset += n;
                        }
                    } else {
                        let rows = self.value(parts[0]).rows();
                        let total_cols = g.cols();
                        let mut col_offset = 0usize;
                        for &p in parts {
                            let v = self.value(p);
                            let c = v.cols();
                            if self.nodes[p.0].requires_grad {
                                let mut data = Vec::with_capacity(rows * c);
                                for r in 0..rows {
                                    let start = r * total_cols + col_offset;
                                    data.extend_from_slice(&g.data()[start..start + c]);
                                }
                                accumulate(&mut grads, p, Tensor::new(vec![rows, c], data)?);
                            }
                            col_offset += c;
                        }
                    }
                }
                Op::GatherRows { table, indices } => {
                    if self.nodes[table.0].requires_grad {
                        let vt = self.value(*table);
                        let mut gt = Tensor::zeros(vt.shape().to_vec());
                        let cols = vt.cols();
                        for (pos, &row) in indices.iter().enumerate() {
                            let src = &g.data()[pos * cols..(pos + 1) * cols];
                            let dst = &mut gt.data_mut()[row * cols..(row + 1) * cols];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *table, gt);
                    }
                }
                Op::SumSquares { a } => {
                    if self.nodes[a.0].requires_grad {
                        let va = self.value(*a);
                        let gs = g.as_scalar()?;
                        let data: Vec<f64> = va.data().iter().map(|x| 2.0 * x * gs).collect();
                        accumulate(&mut grads, *a, Tensor::new(va.shape().to_vec(), data)?);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.nodes[a.0].requires_grad {
                        let data: Vec<f64> = g.data().iter().map(|x| x * factor).collect();
                        accumulate(
                            &mut grads,
                            *a,
                            Tensor::new(self.value(*a).shape().to_vec(), data)?,
                        );
                    }
                }
                Op::AddN { parts } => {
                    for &p in parts {
                        if self.nodes[p.0].requires_grad {
                            accumulate(&mut grads, p, g.clone());
                        }
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[a.0].requires_grad {
                        let target = self.value(*a).shape().to_vec();
                        accumulate(&mut grads, *a, Tensor::new(target, g.data().to_vec())?);
                    }
                }
                Op::Detach => {}
                Op::BceMean { pred, labels } => {
                    if self.nodes[pred.0].requires_grad {
                        let vp = self.value(*pred);
                        let gs = g.as_scalar()?;
                        let n = labels.len() as f64;
                        let data: Vec<f64> = vp
                            .data()
                            .iter()
                            .zip(labels)
                            .map(|(&p, &y)| {
                                if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                                    0.0 // clamped region: flat
                                } else {
                                    gs * (p - y) / (p * (1.0 - p)) / n
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *pred, Tensor::new(vp.shape().to_vec(), data)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (d, s) in existing.data_mut().iter_mut().zip(g.data()) {
                *d += s;
            }
        }
        slot => *slot = Some(g),
    }
}

/// Gradients per tape node, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a leaf, materializing zeros if it was never touched.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn matmul_values(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        for kk in 0..k {
            let aik = ad[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &bd[kk * n..(kk + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out).expect("consistent matmul shape")
}

/// g (m x n) . b^T (n x k) -> (m x k)
fn matmul_bt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (g.rows(), b.rows());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = g.row(i);
        for j in 0..k {
            let brow = b.row(j);
            out[i * k + j] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, k], out).expect("consistent matmul shape")
}

/// a^T (k x m) . g (m x n) -> (k x n)
fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), g.cols());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let arow = a.row(i);
        let grow = g.row(i);
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[j * n..(j + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::new(vec![k, n], out).expect("consistent matmul shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = leaf(&mut tape, vec![2, 1], vec![3.0, 7.0]);
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_hand_example() {
        // [[1,2],[3,4]] . [[1],[1]] = [[3],[7]]
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![1.0, 1.0]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_zero_case() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = leaf(&mut tape, vec![3, 4], (0..12).map(|v| v as f64).collect());
        let y = tape.matmul(z, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let ones = tape.constant(Tensor::ones(vec![2]));
        let zeros = tape.constant(Tensor::zeros(vec![2]));
        let m = tape.elementwise(a, ones, EwKind::Mul).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 2.0]);
        let s = tape.elementwise(a, zeros, EwKind::Add).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0, 2.0]);
        let b = leaf(&mut tape, vec![2], vec![3.0, 4.0]);
        let p = tape.elementwise(a, b, EwKind::Mul).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0, 8.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2], vec![0.0; 2]);
        let b = leaf(&mut tape, vec![3], vec![0.0; 3]);
        assert!(tape.elementwise(a, b, EwKind::Add).is_err());
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, -3.0, 2.0]);
        let s = tape.activation(x, ActKind::Sigmoid);
        let sv = tape.value(s).data();
        assert_eq!(sv[0], 0.5);
        assert!((sv[2] - 0.880797).abs() < 1e-6);
        let r = tape.activation(x, ActKind::Relu);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_strictly_in_open_interval() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-30.0, 0.0, 30.0]);
        let s = tape.activation(x, ActKind::Sigmoid);
        for &v in tape.value(s).data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn concat_single_part_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.concat(&[x], 0).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn concat_axis1_hand_example() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 1], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let y = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn concat_shape_arithmetic() {
        let mut tape = Tape::new();
        let parts: Vec<NodeId> = (0..4)
            .map(|_| leaf(&mut tape, vec![2, 5], vec![0.0; 10]))
            .collect();
        let y = tape.concat(&parts, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 20]);
    }

    #[test]
    fn gather_first_row() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.gather_rows(w, &[0]).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gather_duplicate_rows_accumulate() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![3, 2], vec![0.0; 6]);
        let g = tape.gather_rows(w, &[2, 2]).unwrap();
        let s = tape.sum_squares(g);
        // loss = sum of squares over gathered rows; at zeros grad is zero,
        // so use an elementwise path with a constant to get distinct grads.
        let _ = s;
        let c = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let prod = tape.elementwise(g, c, EwKind::Mul).unwrap();
        let flat = tape.reshape(prod, vec![1, 4]).unwrap();
        let ones = tape.constant(Tensor::ones(vec![4, 1]));
        let total = tape.matmul(flat, ones).unwrap();
        let grads = tape.backward(total).unwrap();
        let gw = grads.get(w).unwrap();
        // row 2 accumulates both per-copy gradients: [1+3, 2+4]
        assert_eq!(gw.row(2), &[4.0, 6.0]);
        assert_eq!(gw.row(0), &[0.0, 0.0]);
        assert_eq!(gw.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn gather_out_of_range_names_index_and_size() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![3, 2], vec![0.0; 6]);
        let err = tape.gather_rows(w, &[3]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains("3 rows"), "{msg}");
    }

    #[test]
    fn sum_squares_values_and_grad() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, vec![3], vec![0.0; 3]);
        let s0 = tape.sum_squares(z);
        assert_eq!(tape.value(s0).as_scalar().unwrap(), 0.0);

        let x = leaf(&mut tape, vec![3], vec![1.0, 0.0, -1.0]);
        let s = tape.sum_squares(x);
        assert_eq!(tape.value(s).as_scalar().unwrap(), 2.0);

        let y = leaf(&mut tape, vec![1], vec![3.0]);
        let sy = tape.sum_squares(y);
        let grads = tape.backward(sy).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[6.0]);
    }

    #[test]
    fn bce_mean_examples() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![1, 1], vec![0.5]);
        let l = tape.bce_mean(p, &[1.0]).unwrap();
        assert!((tape.value(l).as_scalar().unwrap() - 0.693147).abs() < 1e-6);

        let p2 = leaf(&mut tape, vec![2, 1], vec![0.5, 0.5]);
        let l2 = tape.bce_mean(p2, &[1.0, 0.0]).unwrap();
        assert!((tape.value(l2).as_scalar().unwrap() - 0.693147).abs() < 1e-6);

        let p3 = leaf(&mut tape, vec![1, 1], vec![1.0 - 1e-12]);
        let l3 = tape.bce_mean(p3, &[1.0]).unwrap();
        assert!(tape.value(l3).as_scalar().unwrap().abs() < 1e-9);
    }

    #[test]
    fn bce_mean_empty_batch_errors() {
        let mut tape = Tape::new();
        let p = leaf(&mut tape, vec![0, 1], vec![]);
        assert!(tape.bce_mean(p, &[]).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![2.0]);
        let d = tape.detach(x);
        let s = tape.sum_squares(d);
        let grads = tape.backward(s).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn untouched_gather_rows_get_exact_zero_grad() {
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![4, 3], (0..12).map(|v| v as f64).collect());
        let g = tape.gather_rows(w, &[1]).unwrap();
        let s = tape.sum_squares(g);
        let grads = tape.backward(s).unwrap();
        let gw = grads.get(w).unwrap();
        assert!(gw.row(0).iter().all(|&v| v == 0.0));
        assert!(gw.row(2).iter().all(|&v| v == 0.0));
        assert!(gw.row(3).iter().all(|&v| v == 0.0));
        assert!(gw.row(1).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn replay_determinism() {
        let run = || {
            let mut tape = Tape::new();
            let a = leaf(&mut tape, vec![2, 2], vec![0.1, -0.2, 0.3, 0.4]);
            let b = leaf(&mut tape, vec![2, 2], vec![1.5, 0.5, -0.5, 2.0]);
            let m = tape.matmul(a, b).unwrap();
            let s = tape.activation(m, ActKind::Sigmoid);
            let l = tape.sum_squares(s);
            let grads = tape.backward(l).unwrap();
            (
                tape.value(l).as_scalar().unwrap(),
                grads.get(a).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}
