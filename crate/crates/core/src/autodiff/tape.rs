//! Define-by-run tape for reverse-mode differentiation.
//!
//! Each recording call evaluates its op immediately and appends a node; node
//! ids are therefore topologically ordered. `backward` walks the nodes in
//! reverse and `replay` re-evaluates them front to back from the leaves.

use crate::attention::{entropy, entropy_grad, ActivationKind};
use crate::error::{Result, SdcError};
use crate::tensor::Tensor;

use super::linalg::gemm;
use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId, Vec<usize>),
    Activation(NodeId, ActivationKind),
    Entropy(NodeId),
    WeightedSum { weights: NodeId, features: NodeId },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Affine { x, w, b } => vec![*x, *w, *b],
            Op::Relu(a)
            | Op::Tanh(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a, _)
            | Op::Activation(a, _)
            | Op::Entropy(a) => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::WeightedSum { weights, features } => vec![*weights, *features],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients of one backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `node`, if the node influences it.
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads.get(node.0).and_then(Option::as_ref)
    }
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

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<NodeId> {
        let value = {
            let inputs: Vec<&Tensor> = op.inputs().iter().map(|i| &self.nodes[i.0].value).collect();
            forward(&op, &inputs)?
        };
        Ok(self.push(op, value))
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Records a parameter leaf, snapshotting its current value.
    pub fn param(&mut self, params: &ParamStore, id: ParamId) -> NodeId {
        self.push(Op::Param(id), params.value(id).clone())
    }

    /// `x W^T + b` for a vector `x` of length `in` or a batch `[n, in]`,
    /// with `W` of shape `[out, in]` and `b` of length `out`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Affine { x, w, b })
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Tanh(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Mean(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.record(Op::Reshape(a, shape))
    }

    /// Applies an attention activation to each row of `[n, m]` scores.
    pub fn activation(&mut self, a: NodeId, kind: ActivationKind) -> Result<NodeId> {
        self.record(Op::Activation(a, kind))
    }

    /// Row entropies of `[n, m]` probabilities, giving `[n]`.
    pub fn entropy(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Entropy(a))
    }

    /// For weights `[b, m]` and features `[b * m, p]` returns `[b, p]` with
    /// row `i` equal to `sum_j weights[i, j] * features[i * m + j]`.
    pub fn weighted_sum(&mut self, weights: NodeId, features: NodeId) -> Result<NodeId> {
        self.record(Op::WeightedSum { weights, features })
    }

    /// Softmax cross-entropy. Logits `[k]` give a scalar; logits `[n, k]`
    /// give one loss per row.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.record(Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
        })
    }

    /// Re-evaluates every non-leaf node from the recorded leaves and returns
    /// the fresh values in node order.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let value = match node.op {
                Op::Input | Op::Param(_) => node.value.clone(),
                ref op => {
                    let inputs: Vec<&Tensor> = op.inputs().iter().map(|i| &values[i.0]).collect();
                    forward(op, &inputs)?
                }
            };
            values.push(value);
        }
        Ok(values)
    }

    /// Gradients of a scalar `root` with respect to every node.
    pub fn gradients(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(SdcError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                root_value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut seed = Tensor::zeros(root_value.shape());
        seed.data_mut()[0] = 1.0;
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let inputs = node.op.inputs();
            if !inputs.is_empty() {
                let input_values: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                let local = backward(&node.op, &input_values, &node.value, &upstream)?;
                for (input, g) in inputs.into_iter().zip(local) {
                    let Some(g) = g else { continue };
                    match &mut grads[input.0] {
                        Some(existing) => existing
                            .data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(e, v)| *e += v),
                        slot @ None => *slot = Some(g),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Accumulates `d root / d theta` into the gradient slot of every
    /// parameter recorded on this tape.
    pub fn backward(&self, root: NodeId, params: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(root)?;
        for (idx, node) in self.nodes.iter().enumerate().take(root.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads.grads[idx].as_ref()) {
                params.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(SdcError::Dimension {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("same shape")
}

fn rows_of(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape().len() {
        1 | 2 => Ok(t.as_rows()),
        _ => Err(SdcError::Dimension {
            op,
            left: t.shape().to_vec(),
            right: vec![],
        }),
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn forward(op: &Op, inputs: &[&Tensor]) -> Result<Tensor> {
    match op {
        Op::Input | Op::Param(_) => unreachable!("leaves are not evaluated"),
        Op::Affine { .. } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if w.shape().len() != 2 || x.shape().len() > 2 || x.shape().is_empty() {
                return Err(SdcError::Dimension {
                    op: "affine",
                    left: w.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let (n, cols) = x.as_rows();
            if cols != in_dim {
                return Err(SdcError::Dimension {
                    op: "affine",
                    left: w.shape().to_vec(),
                    right: x.shape().to_vec(),
                });
            }
            if b.shape() != [out_dim] {
                return Err(SdcError::Dimension {
                    op: "affine bias",
                    left: w.shape().to_vec(),
                    right: b.shape().to_vec(),
                });
            }
            let mut out = Vec::with_capacity(n * out_dim);
            for _ in 0..n {
                out.extend_from_slice(b.data());
            }
            // out[n, out] += x[n, in] * w^T[in, out]
            gemm(n, in_dim, out_dim, x.data(), in_dim, 1, w.data(), 1, in_dim, &mut out, 1.0);
            let shape = if x.shape().len() == 1 { vec![out_dim] } else { vec![n, out_dim] };
            Tensor::new(shape, out)
        }
        Op::Relu(_) => Ok(map(inputs[0], |v| v.max(0.0))),
        Op::Tanh(_) => Ok(map(inputs[0], f64::tanh)),
        Op::Add(..) => {
            same_shape("add", inputs[0], inputs[1])?;
            Ok(zip_map(inputs[0], inputs[1], |a, b| a + b))
        }
        Op::Mul(..) => {
            same_shape("mul", inputs[0], inputs[1])?;
            Ok(zip_map(inputs[0], inputs[1], |a, b| a * b))
        }
        Op::Scale(_, c) => Ok(map(inputs[0], |v| v * c)),
        Op::Sum(_) => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        Op::Mean(_) => {
            let a = inputs[0];
            if a.is_empty() {
                return Err(SdcError::Contract("mean of an empty tensor".into()));
            }
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
        }
        Op::Reshape(_, shape) => inputs[0].reshape(shape.clone()),
        Op::Activation(_, kind) => {
            let a = inputs[0];
            let (rows, _) = rows_of(a, "activation")?;
            let mut out = Vec::with_capacity(a.len());
            for r in 0..rows {
                out.extend(kind.apply(a.row(r)));
            }
            Tensor::new(a.shape().to_vec(), out)
        }
        Op::Entropy(_) => {
            let a = inputs[0];
            let (rows, _) = rows_of(a, "entropy")?;
            let values: Vec<f64> = (0..rows).map(|r| entropy(a.row(r))).collect();
            if a.shape().len() == 1 {
                Ok(Tensor::scalar(values[0]))
            } else {
                Ok(Tensor::vector(values))
            }
        }
        Op::WeightedSum { .. } => {
            let (weights, features) = (inputs[0], inputs[1]);
            let (batch, m) = rows_of(weights, "weighted_sum")?;
            let (frows, p) = rows_of(features, "weighted_sum")?;
            if frows != batch * m || features.shape().len() != 2 {
                return Err(SdcError::Dimension {
                    op: "weighted_sum",
                    left: weights.shape().to_vec(),
                    right: features.shape().to_vec(),
                });
            }
            let mut out = vec![0.0; batch * p];
            for b in 0..batch {
                let dst = &mut out[b * p..(b + 1) * p];
                for (j, w) in weights.row(b).iter().enumerate() {
                    for (o, f) in dst.iter_mut().zip(features.row(b * m + j)) {
                        *o += w * f;
                    }
                }
            }
            let shape = if weights.shape().len() == 1 { vec![p] } else { vec![batch, p] };
            Tensor::new(shape, out)
        }
        Op::CrossEntropy { labels, .. } => {
            let logits = inputs[0];
            let (rows, k) = rows_of(logits, "cross_entropy")?;
            if labels.len() != rows {
                return Err(SdcError::Dimension {
                    op: "cross_entropy labels",
                    left: logits.shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            let mut losses = Vec::with_capacity(rows);
            for (r, &label) in labels.iter().enumerate() {
                if label >= k {
                    return Err(SdcError::Index {
                        what: "class logits",
                        index: label,
                        len: k,
                    });
                }
                let row = logits.row(r);
                losses.push(log_sum_exp(row) - row[label]);
            }
            if logits.shape().len() == 1 {
                Ok(Tensor::scalar(losses[0]))
            } else {
                Ok(Tensor::vector(losses))
            }
        }
    }
}

/// Local vector-Jacobian products, one optional gradient per op input.
fn backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
    Ok(match op {
        Op::Input | Op::Param(_) => Vec::new(),
        Op::Affine { .. } => {
            let (x, w) = (inputs[0], inputs[1]);
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let (n, _) = x.as_rows();
            let mut gx = vec![0.0; n * in_dim];
            // gx[n, in] = g[n, out] * w[out, in]
            gemm(n, out_dim, in_dim, g.data(), out_dim, 1, w.data(), in_dim, 1, &mut gx, 0.0);
            let mut gw = vec![0.0; out_dim * in_dim];
            // gw[out, in] = g^T[out, n] * x[n, in]
            gemm(out_dim, n, in_dim, g.data(), 1, out_dim, x.data(), in_dim, 1, &mut gw, 0.0);
            let mut gb = vec![0.0; out_dim];
            for r in 0..n {
                for (acc, v) in gb.iter_mut().zip(&g.data()[r * out_dim..(r + 1) * out_dim]) {
                    *acc += v;
                }
            }
            vec![
                Some(Tensor::new(x.shape().to_vec(), gx)?),
                Some(Tensor::new(w.shape().to_vec(), gw)?),
                Some(Tensor::vector(gb)),
            ]
        }
        // subgradient 0 at the kink
        Op::Relu(_) => vec![Some(zip_map(inputs[0], g, |x, g| if x > 0.0 { g } else { 0.0 }))],
        Op::Tanh(_) => vec![Some(zip_map(out, g, |y, g| g * (1.0 - y * y)))],
        Op::Add(..) => vec![Some(g.clone()), Some(g.clone())],
        Op::Mul(..) => vec![
            Some(zip_map(inputs[1], g, |b, g| b * g)),
            Some(zip_map(inputs[0], g, |a, g| a * g)),
        ],
        Op::Scale(_, c) => vec![Some(map(g, |v| v * c))],
        Op::Sum(_) => {
            let mut t = Tensor::zeros(inputs[0].shape());
            t.fill(g.item());
            vec![Some(t)]
        }
        Op::Mean(_) => {
            let mut t = Tensor::zeros(inputs[0].shape());
            t.fill(g.item() / inputs[0].len() as f64);
            vec![Some(t)]
        }
        Op::Reshape(..) => vec![Some(g.reshape(inputs[0].shape().to_vec())?)],
        Op::Activation(_, kind) => {
            let z = inputs[0];
            let (rows, _) = z.as_rows();
            let mut gz = Vec::with_capacity(z.len());
            for r in 0..rows {
                gz.extend(kind.backward(z.row(r), out.row(r), g.row(r)));
            }
            vec![Some(Tensor::new(z.shape().to_vec(), gz)?)]
        }
        Op::Entropy(_) => {
            let a = inputs[0];
            let (rows, _) = a.as_rows();
            let mut ga = Vec::with_capacity(a.len());
            for r in 0..rows {
                let scale = g.data()[r];
                ga.extend(entropy_grad(a.row(r)).into_iter().map(|v| v * scale));
            }
            vec![Some(Tensor::new(a.shape().to_vec(), ga)?)]
        }
        Op::WeightedSum { .. } => {
            let (weights, features) = (inputs[0], inputs[1]);
            let (batch, m) = weights.as_rows();
            let (_, p) = features.as_rows();
            let mut gw = vec![0.0; batch * m];
            let mut gf = vec![0.0; features.len()];
            for b in 0..batch {
                let gb = &g.data()[b * p..(b + 1) * p];
                for j in 0..m {
                    let row = b * m + j;
                    let f = features.row(row);
                    gw[b * m + j] = gb.iter().zip(f).map(|(x, y)| x * y).sum();
                    let w = weights.row(b)[j];
                    for (dst, v) in gf[row * p..(row + 1) * p].iter_mut().zip(gb) {
                        *dst = w * v;
                    }
                }
            }
            vec![
                Some(Tensor::new(weights.shape().to_vec(), gw)?),
                Some(Tensor::new(features.shape().to_vec(), gf)?),
            ]
        }
        Op::CrossEntropy { labels, .. } => {
            let logits = inputs[0];
            let (rows, _) = logits.as_rows();
            let mut gl = Vec::with_capacity(logits.len());
            for (r, &label) in labels.iter().enumerate().take(rows) {
                let row = logits.row(r);
                let lse = log_sum_exp(row);
                let scale = g.data()[r];
                gl.extend(row.iter().enumerate().map(|(c, v)| {
                    let p = (v - lse).exp();
                    scale * (p - if c == label { 1.0 } else { 0.0 })
                }));
            }
            vec![Some(Tensor::new(logits.shape().to_vec(), gl)?)]
        }
    })
}
