//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is an append-only tape of operations. Forward values are
//! computed eagerly as nodes are recorded; [`Graph::backward`] replays the
//! tape in reverse, accumulating gradients in a fixed deterministic order
//! (reverse topological = reverse insertion). Nodes created with
//! [`Graph::leaf`] are constants and never receive gradient; nodes created
//! with [`Graph::param`] are differentiable leaves.
//!
//! Subgradient convention: at a kink (ReLU input 0, pooling tie, clamp
//! boundary, |x| at 0) the inactive branch contributes derivative 0.
//!
//! Every kinked operation also mixes its branch decisions into a running
//! `branch_signature`; the finite-difference harness compares signatures
//! of perturbed evaluations to flag coordinates whose probes straddle a
//! kink, where a central difference is meaningless.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Div {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: f64,
    },
    Exp {
        x: NodeId,
    },
    Ln {
        x: NodeId,
    },
    Sqrt {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    ClampMin {
        x: NodeId,
        floor: f64,
    },
    Sum {
        x: NodeId,
    },
    Row {
        x: NodeId,
        index: usize,
    },
    Stack {
        parts: Vec<NodeId>,
    },
    Gather {
        x: NodeId,
        indices: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        pad: usize,
    },
    MaxPool2x2 {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Softmax {
        x: NodeId,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-channel batch statistics returned by the training-mode batch norm,
/// for the caller to fold into running statistics.
#[derive(Debug, Clone)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (1/M) variance.
    pub var: Vec<f64>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar w.r.t. `id`, if any flowed.
    /// Constant nodes are always absent.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }

    /// Like `get`, but materializes a zero tensor of the node's shape when
    /// no gradient flowed.
    pub fn get_or_zeros(&self, id: NodeId, graph: &Graph) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(graph.value(id).shape().to_vec()),
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_signature: u64,
}

fn mix(sig: &mut u64, bits: u64) {
    *sig = (*sig ^ bits).wrapping_mul(0x100000001b3);
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            branch_signature: 0xcbf29ce484222325,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every data-dependent branch taken while recording. Two
    /// forward passes of the same computation at nearby inputs share the
    /// signature iff no kink was crossed.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    /// Record a builder-level branch decision (e.g. the Huber regime),
    /// so it participates in kink detection like any built-in op.
    pub fn note_branch(&mut self, bits: u64) {
        mix(&mut self.branch_signature, bits);
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Constant leaf: never receives gradient.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, v: f64) -> NodeId {
        self.leaf(Tensor::scalar(v))
    }

    // ── elementwise binaries (same shape, or one side scalar) ────────────

    fn binary(&mut self, a: NodeId, b: NodeId, op: fn(f64, f64) -> f64, tag: Op) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (out_shape, numel) = broadcast_shape(va, vb);
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let x = va.data()[if va.is_scalar() { 0 } else { i }];
            let y = vb.data()[if vb.is_scalar() { 0 } else { i }];
            data.push(op(x, y));
        }
        let rg = self.any_grad(&[a, b]);
        self.push(
            Tensor::new(out_shape, data).expect("binary op shape"),
            tag,
            rg,
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, |x, y| x / y, Op::Div { a, b })
    }

    // ── elementwise unaries ──────────────────────────────────────────────

    fn unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, tag: Op) -> NodeId {
        let v = &self.nodes[x.0].value;
        let data = v.data().iter().map(|&e| f(e)).collect();
        let shape = v.shape().to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::new(shape, data).unwrap(), tag, rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.unary(x, |e| c * e, Op::Scale { x, c })
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::exp, Op::Exp { x })
    }

    /// Natural log; caller guarantees positive inputs (see `clamp_min`).
    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.unary(x, f64::ln, Op::Ln { x })
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let mut sig = self.branch_signature;
        for &e in self.nodes[x.0].value.data() {
            mix(&mut sig, (e > 0.0) as u64);
        }
        self.branch_signature = sig;
        self.unary(x, f64::sqrt, Op::Sqrt { x })
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let mut sig = self.branch_signature;
        for &e in self.nodes[x.0].value.data() {
            mix(&mut sig, (e >= 0.0) as u64);
        }
        self.branch_signature = sig;
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut sig = self.branch_signature;
        for &e in self.nodes[x.0].value.data() {
            mix(&mut sig, (e > 0.0) as u64);
        }
        self.branch_signature = sig;
        self.unary(x, |e| e.max(0.0), Op::Relu { x })
    }

    pub fn clamp_min(&mut self, x: NodeId, floor: f64) -> NodeId {
        let mut sig = self.branch_signature;
        for &e in self.nodes[x.0].value.data() {
            mix(&mut sig, (e > floor) as u64);
        }
        self.branch_signature = sig;
        self.unary(x, |e| e.max(floor), Op::ClampMin { x, floor })
    }

    // ── structure ────────────────────────────────────────────────────────

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Row `index` of a 2-D node.
    pub fn row(&mut self, x: NodeId, index: usize) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.shape().len(), 2, "row() needs a 2-D node");
        assert!(index < v.shape()[0], "row {} out of range", index);
        let value = v.row(index);
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::Row { x, index }, rg)
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "stack() of zero nodes");
        let data: Vec<f64> = parts
            .iter()
            .map(|&p| {
                let v = &self.nodes[p.0].value;
                assert!(v.is_scalar(), "stack() takes scalar nodes");
                v.item()
            })
            .collect();
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_vec(data),
            Op::Stack {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// One element per row of a 2-D node: `out[n] = x[n, indices[n]]`.
    pub fn gather(&mut self, x: NodeId, indices: &[usize]) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.shape().len(), 2, "gather() needs a 2-D node");
        let (n, k) = (v.shape()[0], v.shape()[1]);
        assert_eq!(indices.len(), n, "one index per row");
        assert!(indices.iter().all(|&i| i < k), "gather index out of range");
        let data: Vec<f64> = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| v.data()[r * k + c])
            .collect();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::from_vec(data),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> NodeId {
        let value = self.nodes[x.0]
            .value
            .reshaped(shape)
            .expect("reshape numel");
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, Op::Reshape { x }, rg)
    }

    // ── neural-network ops ───────────────────────────────────────────────

    /// `x [N,F] · wᵀ [M,F] + b [M] -> [N,M]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        assert_eq!(vx.shape().len(), 2, "linear input must be [N,F]");
        assert_eq!(vw.shape().len(), 2, "linear weight must be [M,F]");
        let (n, f) = (vx.shape()[0], vx.shape()[1]);
        let (m, fw) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(f, fw, "linear: input width {} vs weight fan-in {}", f, fw);
        assert_eq!(vb.shape(), &[m], "linear bias must be [M]");
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = vb.data()[j];
                for p in 0..f {
                    acc += vx.data()[i * f + p] * vw.data()[j * f + p];
                }
                data[i * m + j] = acc;
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(
            Tensor::new(vec![n, m], data).unwrap(),
            Op::Linear { x, w, b },
            rg,
        )
    }

    /// Cross-correlation conv: `x [N,C,H,W]`, `w [O,C,kh,kw]`, `b [O]`,
    /// zero padding `pad` on every spatial edge.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: usize) -> NodeId {
        let (vx, vw, vb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        assert_eq!(vx.shape().len(), 4, "conv input must be [N,C,H,W]");
        assert_eq!(vw.shape().len(), 4, "conv weight must be [O,C,kh,kw]");
        let (n, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (o, cw, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
        assert_eq!(
            c, cw,
            "conv: input channels {} vs weight channels {}",
            c, cw
        );
        assert_eq!(vb.shape(), &[o], "conv bias must be [O]");
        assert!(
            h + 2 * pad >= kh && wd + 2 * pad >= kw,
            "conv: {}x{} input (pad {}) smaller than {}x{} filter",
            h,
            wd,
            pad,
            kh,
            kw
        );
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let mut data = vec![0.0; n * o * oh * ow];
        let xd = vx.data();
        let wdat = vw.data();
        for ni in 0..n {
            for oi in 0..o {
                for p in 0..oh {
                    for q in 0..ow {
                        let mut acc = vb.data()[oi];
                        for ci in 0..c {
                            for r in 0..kh {
                                let ih = p + r;
                                if ih < pad || ih - pad >= h {
                                    continue;
                                }
                                let ih = ih - pad;
                                for s in 0..kw {
                                    let iw = q + s;
                                    if iw < pad || iw - pad >= wd {
                                        continue;
                                    }
                                    let iw = iw - pad;
                                    acc += wdat[((oi * c + ci) * kh + r) * kw + s]
                                        * xd[((ni * c + ci) * h + ih) * wd + iw];
                                }
                            }
                        }
                        data[((ni * o + oi) * oh + p) * ow + q] = acc;
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, w, b]);
        self.push(
            Tensor::new(vec![n, o, oh, ow], data).unwrap(),
            Op::Conv2d { x, w, b, pad },
            rg,
        )
    }

    /// Non-overlapping 2x2 max pooling, stride 2; odd trailing row/column
    /// dropped. Ties pick the first element in scan order.
    pub fn maxpool2x2(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.shape().len(), 4, "maxpool input must be [N,C,H,W]");
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        assert!(h >= 2 && w >= 2, "maxpool needs H,W >= 2, got {}x{}", h, w);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xd = v.data();
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..oh {
                    for q in 0..ow {
                        let mut best_idx = ((ni * c + ci) * h + 2 * p) * w + 2 * q;
                        let mut best = xd[best_idx];
                        for r in 0..2 {
                            for s in 0..2 {
                                let idx = ((ni * c + ci) * h + 2 * p + r) * w + 2 * q + s;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let out = ((ni * c + ci) * oh + p) * ow + q;
                        data[out] = best;
                        argmax[out] = best_idx;
                    }
                }
            }
        }
        let mut sig = self.branch_signature;
        for &a in &argmax {
            mix(&mut sig, a as u64);
        }
        self.branch_signature = sig;
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::new(vec![n, c, oh, ow], data).unwrap(),
            Op::MaxPool2x2 { x, argmax },
            rg,
        )
    }

    /// Row-wise softmax with a detached max shift. 1-D input is one row.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x.0].value;
        let (rows, k) = match v.shape() {
            [k] => (1, *k),
            [n, k] => (*n, *k),
            s => panic!("softmax needs a 1-D or 2-D node, got {:?}", s),
        };
        let mut data = vec![0.0; rows * k];
        for r in 0..rows {
            let row = &v.data()[r * k..(r + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &e) in row.iter().enumerate() {
                let ex = (e - m).exp();
                data[r * k + j] = ex;
                z += ex;
            }
            for j in 0..k {
                data[r * k + j] /= z;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            Op::Softmax { x },
            rg,
        )
    }

    /// Training-mode batch norm over `[N,C,H,W]` with per-channel batch
    /// statistics. Returns the output node and the batch moments for the
    /// caller's running-statistics update.
    pub fn batchnorm2d_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<(NodeId, BatchMoments)> {
        let v = &self.nodes[x.0].value;
        if v.shape().len() != 4 {
            return Err(Error::Shape(format!(
                "batchnorm2d input must be [N,C,H,W], got {:?}",
                v.shape()
            )));
        }
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let m = n * h * w;
        if m < 2 {
            return Err(Error::Contract(format!(
                "batchnorm2d training mode needs at least 2 values per channel, got {}",
                m
            )));
        }
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.shape(), &[c], "batchnorm gamma must be [C]");
        assert_eq!(bv.shape(), &[c], "batchnorm beta must be [C]");

        let xd = v.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut acc = 0.0;
            for ni in 0..n {
                for s in 0..h * w {
                    acc += xd[(ni * c + ci) * h * w + s];
                }
            }
            mean[ci] = acc / m as f64;
            let mut vacc = 0.0;
            for ni in 0..n {
                for s in 0..h * w {
                    let d = xd[(ni * c + ci) * h * w + s] - mean[ci];
                    vacc += d * d;
                }
            }
            var[ci] = vacc / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|&vv| 1.0 / (vv + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut data = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                for s in 0..h * w {
                    let idx = (ni * c + ci) * h * w + s;
                    let xh = (xd[idx] - mean[ci]) * inv_std[ci];
                    xhat[idx] = xh;
                    data[idx] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        let id = self.push(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: true,
            },
            rg,
        );
        Ok((id, BatchMoments { mean, var }))
    }

    /// Inference-mode batch norm using fixed running statistics.
    pub fn batchnorm2d_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> NodeId {
        let v = &self.nodes[x.0].value;
        assert_eq!(v.shape().len(), 4, "batchnorm2d input must be [N,C,H,W]");
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        assert_eq!(running_mean.len(), c);
        assert_eq!(running_var.len(), c);
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        assert_eq!(gv.shape(), &[c]);
        assert_eq!(bv.shape(), &[c]);
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|&vv| 1.0 / (vv + eps).sqrt())
            .collect();
        let xd = v.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut data = vec![0.0; xd.len()];
        for ni in 0..n {
            for ci in 0..c {
                for s in 0..h * w {
                    let idx = (ni * c + ci) * h * w + s;
                    let xh = (xd[idx] - running_mean[ci]) * inv_std[ci];
                    xhat[idx] = xh;
                    data[idx] = gv.data()[ci] * xh + bv.data()[ci];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor::new(v.shape().to_vec(), data).unwrap(),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: false,
            },
            rg,
        )
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar output. Gradients accumulate in
    /// reverse insertion order, so repeated runs are bit-identical.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out_val = &self.nodes[output.0].value;
        if !out_val.is_scalar() {
            return Err(Error::Contract(format!(
                "backward() needs a scalar output, got shape {:?}",
                out_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));

        for id in (0..=output.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let dy = grads[id].take().unwrap();
            self.accumulate(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        // Constants never carry gradient out.
        for (id, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(&self, id: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.add_broadcast_grad(*a, dy.data(), grads, |_, g| g);
                self.add_broadcast_grad(*b, dy.data(), grads, |_, g| g);
            }
            Op::Sub { a, b } => {
                self.add_broadcast_grad(*a, dy.data(), grads, |_, g| g);
                self.add_broadcast_grad(*b, dy.data(), grads, |_, g| -g);
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.add_broadcast_grad(*a, dy.data(), grads, |i, g| {
                    g * vb.data()[if vb.is_scalar() { 0 } else { i }]
                });
                self.add_broadcast_grad(*b, dy.data(), grads, |i, g| {
                    g * va.data()[if va.is_scalar() { 0 } else { i }]
                });
            }
            Op::Div { a, b } => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                self.add_broadcast_grad(*a, dy.data(), grads, |i, g| {
                    g / vb.data()[if vb.is_scalar() { 0 } else { i }]
                });
                self.add_broadcast_grad(*b, dy.data(), grads, |i, g| {
                    let x = va.data()[if va.is_scalar() { 0 } else { i }];
                    let y = vb.data()[if vb.is_scalar() { 0 } else { i }];
                    -g * x / (y * y)
                });
            }
            Op::Scale { x, c } => {
                self.add_elementwise_grad(*x, grads, |i| c * dy.data()[i]);
            }
            Op::Exp { x } => {
                let out = node.value.data();
                self.add_elementwise_grad(*x, grads, |i| dy.data()[i] * out[i]);
            }
            Op::Ln { x } => {
                let xin = self.nodes[x.0].value.data();
                self.add_elementwise_grad(*x, grads, |i| dy.data()[i] / xin[i]);
            }
            Op::Sqrt { x } => {
                let out = node.value.data();
                // 0-subgradient at sqrt(0): the kink contributes nothing.
                self.add_elementwise_grad(*x, grads, |i| {
                    if out[i] == 0.0 {
                        0.0
                    } else {
                        dy.data()[i] / (2.0 * out[i])
                    }
                });
            }
            Op::Abs { x } => {
                let xin = self.nodes[x.0].value.data();
                self.add_elementwise_grad(*x, grads, |i| {
                    if xin[i] > 0.0 {
                        dy.data()[i]
                    } else if xin[i] < 0.0 {
                        -dy.data()[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Relu { x } => {
                let xin = self.nodes[x.0].value.data();
                self.add_elementwise_grad(
                    *x,
                    grads,
                    |i| {
                        if xin[i] > 0.0 {
                            dy.data()[i]
                        } else {
                            0.0
                        }
                    },
                );
            }
            Op::ClampMin { x, floor } => {
                let xin = self.nodes[x.0].value.data();
                self.add_elementwise_grad(*x, grads, |i| {
                    if xin[i] > *floor {
                        dy.data()[i]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum { x } => {
                let g = dy.item();
                self.add_elementwise_grad(*x, grads, |_| g);
            }
            Op::Row { x, index } => {
                let k = dy.numel();
                let gx = self.grad_slot(*x, grads);
                for j in 0..k {
                    gx[index * k + j] += dy.data()[j];
                }
            }
            Op::Stack { parts } => {
                for (p, &part) in parts.iter().enumerate() {
                    if self.nodes[part.0].requires_grad {
                        self.grad_slot(part, grads)[0] += dy.data()[p];
                    }
                }
            }
            Op::Gather { x, indices } => {
                let k = self.nodes[x.0].value.shape()[1];
                let gx = self.grad_slot(*x, grads);
                for (r, &c) in indices.iter().enumerate() {
                    gx[r * k + c] += dy.data()[r];
                }
            }
            Op::Reshape { x } => {
                self.add_elementwise_grad(*x, grads, |i| dy.data()[i]);
            }
            Op::Linear { x, w, b } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (n, f) = (vx.shape()[0], vx.shape()[1]);
                let m = vw.shape()[0];
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_slot(*x, grads);
                    for i in 0..n {
                        for p in 0..f {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += dy.data()[i * m + j] * vw.data()[j * f + p];
                            }
                            gx[i * f + p] += acc;
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let gw = self.grad_slot(*w, grads);
                    for j in 0..m {
                        for p in 0..f {
                            let mut acc = 0.0;
                            for i in 0..n {
                                acc += dy.data()[i * m + j] * vx.data()[i * f + p];
                            }
                            gw[j * f + p] += acc;
                        }
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.grad_slot(*b, grads);
                    for (j, g) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for i in 0..n {
                            acc += dy.data()[i * m + j];
                        }
                        *g += acc;
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let vx = &self.nodes[x.0].value;
                let vw = &self.nodes[w.0].value;
                let (n, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
                let (o, _, kh, kw) = (vw.shape()[0], vw.shape()[1], vw.shape()[2], vw.shape()[3]);
                let (oh, ow) = (h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1);
                let pad = *pad;
                if self.nodes[b.0].requires_grad {
                    let gb = self.grad_slot(*b, grads);
                    for (oi, g) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for p in 0..oh {
                                for q in 0..ow {
                                    acc += dy.data()[((ni * o + oi) * oh + p) * ow + q];
                                }
                            }
                        }
                        *g += acc;
                    }
                }
                if self.nodes[w.0].requires_grad {
                    let gw = self.grad_slot(*w, grads);
                    for ni in 0..n {
                        for oi in 0..o {
                            for p in 0..oh {
                                for q in 0..ow {
                                    let g = dy.data()[((ni * o + oi) * oh + p) * ow + q];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for r in 0..kh {
                                            let ih = p + r;
                                            if ih < pad || ih - pad >= h {
                                                continue;
                                            }
                                            let ih = ih - pad;
                                            for s in 0..kw {
                                                let iw = q + s;
                                                if iw < pad || iw - pad >= wd {
                                                    continue;
                                                }
                                                let iw = iw - pad;
                                                gw[((oi * c + ci) * kh + r) * kw + s] += g * vx
                                                    .data()[((ni * c + ci) * h + ih) * wd + iw];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_slot(*x, grads);
                    for ni in 0..n {
                        for oi in 0..o {
                            for p in 0..oh {
                                for q in 0..ow {
                                    let g = dy.data()[((ni * o + oi) * oh + p) * ow + q];
                                    if g == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for r in 0..kh {
                                            let ih = p + r;
                                            if ih < pad || ih - pad >= h {
                                                continue;
                                            }
                                            let ih = ih - pad;
                                            for s in 0..kw {
                                                let iw = q + s;
                                                if iw < pad || iw - pad >= wd {
                                                    continue;
                                                }
                                                let iw = iw - pad;
                                                gx[((ni * c + ci) * h + ih) * wd + iw] += g * vw
                                                    .data()[((oi * c + ci) * kh + r) * kw + s];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2x2 { x, argmax } => {
                let gx = self.grad_slot(*x, grads);
                for (out, &src) in argmax.iter().enumerate() {
                    gx[src] += dy.data()[out];
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap();
                let rows = y.len() / k;
                let gx = self.grad_slot(*x, grads);
                for r in 0..rows {
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += dy.data()[r * k + j] * y[r * k + j];
                    }
                    for j in 0..k {
                        gx[r * k + j] += y[r * k + j] * (dy.data()[r * k + j] - dot);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let v = &self.nodes[x.0].value;
                let (n, c, hw) = (v.shape()[0], v.shape()[1], v.shape()[2] * v.shape()[3]);
                let m = (n * hw) as f64;
                let gv = self.nodes[gamma.0].value.data();
                if self.nodes[beta.0].requires_grad {
                    let gb = self.grad_slot(*beta, grads);
                    for (ci, g) in gb.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for s in 0..hw {
                                acc += dy.data()[(ni * c + ci) * hw + s];
                            }
                        }
                        *g += acc;
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    let gg = self.grad_slot(*gamma, grads);
                    for (ci, g) in gg.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for ni in 0..n {
                            for s in 0..hw {
                                let idx = (ni * c + ci) * hw + s;
                                acc += dy.data()[idx] * xhat[idx];
                            }
                        }
                        *g += acc;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_slot(*x, grads);
                    if *training {
                        for ci in 0..c {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for ni in 0..n {
                                for s in 0..hw {
                                    let idx = (ni * c + ci) * hw + s;
                                    let dxh = dy.data()[idx] * gv[ci];
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * xhat[idx];
                                }
                            }
                            for ni in 0..n {
                                for s in 0..hw {
                                    let idx = (ni * c + ci) * hw + s;
                                    let dxh = dy.data()[idx] * gv[ci];
                                    gx[idx] += inv_std[ci] / m
                                        * (m * dxh - sum_dxhat - xhat[idx] * sum_dxhat_xhat);
                                }
                            }
                        }
                    } else {
                        for ci in 0..c {
                            for ni in 0..n {
                                for s in 0..hw {
                                    let idx = (ni * c + ci) * hw + s;
                                    gx[idx] += dy.data()[idx] * gv[ci] * inv_std[ci];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Gradient buffer for `id`, created zeroed on first touch.
    fn grad_slot<'a>(&self, id: NodeId, grads: &'a mut [Option<Tensor>]) -> &'a mut [f64] {
        if grads[id.0].is_none() {
            grads[id.0] = Some(Tensor::zeros(self.nodes[id.0].value.shape().to_vec()));
        }
        grads[id.0].as_mut().unwrap().data_mut()
    }

    fn add_elementwise_grad(
        &self,
        id: NodeId,
        grads: &mut [Option<Tensor>],
        f: impl Fn(usize) -> f64,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let gx = self.grad_slot(id, grads);
        for (i, slot) in gx.iter_mut().enumerate() {
            *slot += f(i);
        }
    }

    /// Accumulate grad into `id`, summing when `id` was scalar-broadcast.
    fn add_broadcast_grad(
        &self,
        id: NodeId,
        dy: &[f64],
        grads: &mut [Option<Tensor>],
        f: impl Fn(usize, f64) -> f64,
    ) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let scalar = self.nodes[id.0].value.is_scalar();
        let gx = self.grad_slot(id, grads);
        if scalar && dy.len() > 1 {
            let mut acc = 0.0;
            for (i, &g) in dy.iter().enumerate() {
                acc += f(i, g);
            }
            gx[0] += acc;
        } else {
            for (i, &g) in dy.iter().enumerate() {
                gx[i] += f(i, g);
            }
        }
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> (Vec<usize>, usize) {
    if a.shape() == b.shape() {
        (a.shape().to_vec(), a.numel())
    } else if a.is_scalar() {
        (b.shape().to_vec(), b.numel())
    } else if b.is_scalar() {
        (a.shape().to_vec(), a.numel())
    } else {
        panic!(
            "incompatible shapes {:?} vs {:?} (only scalar broadcast supported)",
            a.shape(),
            b.shape()
        );
    }
}
