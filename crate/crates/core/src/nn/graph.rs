//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output. [`Graph::backward`] walks the
//! tape once in reverse, returns the parameter gradients and drops the tape;
//! a second call fails until a new forward pass is recorded.

use super::conv::{conv2d_backward_inner, conv2d_forward, gemm};
use super::{NnError, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(usize),
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Relu(usize),
    MaxPool2 {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Affine {
        x: usize,
        scale: f32,
    },
    Mse {
        pred: usize,
        target: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients for every registered parameter, in registration order. A
/// parameter that does not influence the loss gets zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    n_params: usize,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var, NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        if !value.all_finite() {
            return Err(NnError::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push(value, Op::Input, "input")
    }

    /// Registers a trainable tensor; gradients come back in the order of
    /// registration.
    pub fn param(&mut self, value: Tensor) -> Result<Var, NnError> {
        let id = self.n_params;
        self.n_params += 1;
        self.push(value, Op::Param(id), "parameter")
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NnError> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(
            out,
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Relu(x.0), "relu")
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(NnError::Shape(format!("max_pool2 needs [N,C,H>=2,W>=2], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        let d = v.data();
        for p in 0..planes {
            let base = p * h * w;
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = base + 2 * y * w + 2 * x;
                    for cand in [best + 1, best + w, best + w + 1] {
                        if d[cand] > d[best] {
                            best = cand;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let out = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.push(out, Op::MaxPool2 { x: x.0, argmax }, "max_pool2")
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 4 {
            return Err(NnError::Shape(format!("global_avg_pool needs 4-D input, got {s:?}")));
        }
        let area = s[2] * s[3];
        let data = v
            .data()
            .chunks(area)
            .map(|c| (c.iter().map(|&a| f64::from(a)).sum::<f64>() / area as f64) as f32)
            .collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        self.push(out, Op::GlobalAvgPool(x.0), "global_avg_pool")
    }

    /// `x [N, I] * w [I, O] + b [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NnError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bv.shape() != [ws[1]] {
            return Err(NnError::Shape(format!(
                "linear: input {xs:?}, weights {ws:?}, bias {:?}",
                bv.shape()
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out: Vec<f32> = (0..n).flat_map(|_| bv.data().iter().copied()).collect();
        gemm(n, i, o, xv.data(), false, wv.data(), false, 1.0, &mut out);
        let out = Tensor::new(vec![n, o], out)?;
        self.push(out, Op::Linear { x: x.0, w: w.0, b: b.0 }, "linear")
    }

    /// `scale * x + shift`, flattened to one value per batch row.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var, NnError> {
        let v = self.value(x);
        let data: Vec<f32> = v.data().iter().map(|&a| scale * a + shift).collect();
        let n = data.len();
        let out = Tensor::new(vec![n], data)?;
        self.push(out, Op::Affine { x: x.0, scale }, "affine")
    }

    /// Mean squared error against `target`, a scalar node.
    pub fn mse_loss(&mut self, pred: Var, target: &[f32]) -> Result<Var, NnError> {
        let p = self.value(pred);
        if target.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        if p.len() != target.len() {
            return Err(NnError::Shape(format!(
                "mse: {} predictions for {} targets",
                p.len(),
                target.len()
            )));
        }
        let sum: f64 = p
            .data()
            .iter()
            .zip(target)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum();
        let loss = Tensor::scalar((sum / target.len() as f64) as f32);
        self.push(
            loss,
            Op::Mse {
                pred: pred.0,
                target: target.to_vec(),
            },
            "mse_loss",
        )
    }

    /// Reverse sweep from a scalar `loss`. Frees the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NnError> {
        if self.consumed {
            return Err(NnError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NnError::Shape("backward needs a scalar loss".into()));
        }
        self.consumed = true;
        let nodes = std::mem::take(&mut self.nodes);
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let mut param_grads: Vec<Option<Tensor>> = (0..self.n_params).map(|_| None).collect();
        let mut param_shapes: Vec<Vec<usize>> = vec![Vec::new(); self.n_params];
        for node in &nodes {
            if let Op::Param(id) = node.op {
                param_shapes[id] = node.value.shape().to_vec();
            }
        }

        fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
            match slot {
                Some(t) => t.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => accumulate(&mut param_grads[*id], g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    let need_dx = !matches!(nodes[*x].op, Op::Input);
                    let (dx, dw, db) =
                        conv2d_backward_inner(&nodes[*x].value, &nodes[*w].value, *stride, *pad, &g, need_dx)?;
                    if let Some(dx) = dx {
                        accumulate(&mut grads[*x], dx);
                    }
                    accumulate(&mut grads[*w], dw);
                    accumulate(&mut grads[*b], db);
                }
                Op::Relu(x) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > 0.0 { gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads[*x], Tensor::new(g.shape().to_vec(), data)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(nodes[*x].value.shape());
                    let d = dx.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        d[src as usize] += gv;
                    }
                    accumulate(&mut grads[*x], dx);
                }
                Op::GlobalAvgPool(x) => {
                    let s = nodes[*x].value.shape();
                    let area = s[2] * s[3];
                    let inv = 1.0 / area as f32;
                    let data = g
                        .data()
                        .iter()
                        .flat_map(|&gv| std::iter::repeat_n(gv * inv, area))
                        .collect();
                    accumulate(&mut grads[*x], Tensor::new(s.to_vec(), data)?);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[*x].value, &nodes[*w].value);
                    let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[1]);
                    let mut dx = vec![0f32; n * i];
                    gemm(n, o, i, g.data(), false, wv.data(), true, 0.0, &mut dx);
                    let mut dw = vec![0f32; i * o];
                    gemm(i, n, o, xv.data(), true, g.data(), false, 0.0, &mut dw);
                    let mut db = vec![0f64; o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += f64::from(v);
                        }
                    }
                    accumulate(&mut grads[*x], Tensor::new(vec![n, i], dx)?);
                    accumulate(&mut grads[*w], Tensor::new(vec![i, o], dw)?);
                    let db = db.into_iter().map(|v| v as f32).collect();
                    accumulate(&mut grads[*b], Tensor::new(vec![o], db)?);
                }
                Op::Affine { x, scale } => {
                    let data = g.data().iter().map(|&gv| gv * scale).collect();
                    let shape = nodes[*x].value.shape().to_vec();
                    accumulate(&mut grads[*x], Tensor::new(shape, data)?);
                }
                Op::Mse { pred, target } => {
                    let p = &nodes[*pred].value;
                    let scale = 2.0 * f64::from(g.data()[0]) / target.len() as f64;
                    let data = p
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&a, &b)| (scale * (f64::from(a) - f64::from(b))) as f32)
                        .collect();
                    accumulate(&mut grads[*pred], Tensor::new(p.shape().to_vec(), data)?);
                }
            }
        }

        let tensors = param_grads
            .into_iter()
            .zip(param_shapes)
            .map(|(g, shape)| g.unwrap_or_else(|| Tensor::zeros(&shape)))
            .collect::<Vec<_>>();
        if tensors.iter().any(|t| !t.all_finite()) {
            return Err(NnError::NonFinite("backward"));
        }
        Ok(Gradients { tensors })
    }
}
