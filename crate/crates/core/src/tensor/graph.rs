use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding of `k / 2` so odd kernels preserve spatial size.
    Same,
    Valid,
}

/// Which statistics a batch-norm op normalizes with.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// The batch's own biased mean and variance.
    Batch { eps: f64 },
    /// Fixed statistics, typically running averages.
    Fixed {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

/// Per-channel statistics observed by a batch-statistics forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    MulScalar(usize, f64),
    Neg(usize),
    Square(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Softplus(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    MeanRows(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Narrow {
        x: usize,
        start: usize,
    },
    TileRows(usize),
    MatMul(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    MaxPool2d {
        x: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LogSumExp(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Operation tape. Node ids are assigned in execution order, which is a
/// topological order of the expression graph.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A gradient-tracking leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn unary(&self, x: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.requires(&[x]);
        self.push(out, op, rg)
    }

    fn binary(
        &self,
        name: &'static str,
        a: usize,
        b: usize,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'_>> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if vb.numel() == 1 {
            let y = vb.item();
            let data = va.data().iter().map(|&x| f(x, y)).collect();
            Tensor::new(va.shape().to_vec(), data)?
        } else if va.numel() == 1 {
            let x = va.item();
            let data = vb.data().iter().map(|&y| f(x, y)).collect();
            Tensor::new(vb.shape().to_vec(), data)?
        } else {
            return Err(shape_err(name, &va, &vb));
        };
        let rg = self.requires(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?
            .value();
        if first.rank() == 0 {
            return Err(Error::invalid("concat", "cannot concatenate scalars"));
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = p.value();
            if v.rank() != first.rank() || v.shape()[1..] != first.shape()[1..] {
                return Err(shape_err("concat", &first, &v));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = self.requires(&ids);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(ids), rg))
    }

    /// Stride-1 convolution. `x` is `[B, C, H, W]`, `w` is `[O, C, kh, kw]`,
    /// `bias` is `[O]`.
    pub fn conv2d<'g>(
        &'g self,
        x: Var<'g>,
        w: Var<'g>,
        bias: Option<Var<'g>>,
        padding: Padding,
    ) -> Result<Var<'g>> {
        let (vx, vw) = (x.value(), w.value());
        if vx.rank() != 4 || vw.rank() != 4 || vx.shape()[1] != vw.shape()[1] {
            return Err(shape_err("conv2d", &vx, &vw));
        }
        let (batch, c, h, wd) = (vx.shape()[0], vx.shape()[1], vx.shape()[2], vx.shape()[3]);
        let (oc, kh, kw) = (vw.shape()[0], vw.shape()[2], vw.shape()[3]);
        let pad = match padding {
            Padding::Same => {
                if kh != kw || kh % 2 == 0 {
                    return Err(Error::invalid(
                        "conv2d",
                        "same padding needs a square odd kernel",
                    ));
                }
                kh / 2
            }
            Padding::Valid => 0,
        };
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(shape_err("conv2d", &vx, &vw));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kh,
            kw,
            pad,
            out_h: h + 2 * pad - kh + 1,
            out_w: wd + 2 * pad - kw + 1,
        };
        let vb = match bias {
            Some(b) => {
                let vb = b.value();
                if vb.shape() != [oc] {
                    return Err(shape_err("conv2d", &vw, &vb));
                }
                Some(vb)
            }
            None => None,
        };
        let out = kernels::conv2d_forward(
            vx.data(),
            batch,
            &geom,
            vw.data(),
            oc,
            vb.as_ref().map(|t| t.data()),
        );
        let out = Tensor::new(vec![batch, oc, geom.out_h, geom.out_w], out)?;
        let mut ids = vec![x.id, w.id];
        ids.extend(bias.map(|b| b.id));
        let rg = self.requires(&ids);
        let op = Op::Conv2d {
            x: x.id,
            w: w.id,
            b: bias.map(|b| b.id),
            geom,
        };
        Ok(self.push(out, op, rg))
    }

    /// 2×2 max-pooling, stride 2, over the last two axes of a rank-4 input.
    pub fn max_pool2d<'g>(&'g self, x: Var<'g>) -> Result<Var<'g>> {
        let vx = x.value();
        if vx.rank() != 4 || vx.shape()[2] < 2 || vx.shape()[3] < 2 {
            return Err(Error::invalid(
                "max_pool2d",
                format!("needs [B, C, H>=2, W>=2], got {:?}", vx.shape()),
            ));
        }
        let s = vx.shape();
        let (out, argmax) = kernels::max_pool2x2(vx.data(), s[0] * s[1], s[2], s[3]);
        let out = Tensor::new(vec![s[0], s[1], s[2] / 2, s[3] / 2], out)?;
        let rg = self.requires(&[x.id]);
        Ok(self.push(out, Op::MaxPool2d { x: x.id, argmax }, rg))
    }

    /// Per-channel batch normalization over every axis except axis 1.
    /// Returns the batch statistics when they were used.
    pub fn batch_norm<'g>(
        &'g self,
        x: Var<'g>,
        gamma: Var<'g>,
        beta: Var<'g>,
        mode: BnMode<'_>,
    ) -> Result<(Var<'g>, Option<BnBatchStats>)> {
        let (vx, vg, vb) = (x.value(), gamma.value(), beta.value());
        if vx.rank() < 2 {
            return Err(Error::invalid("batch_norm", "needs at least [B, C]"));
        }
        let (batch, channels) = (vx.shape()[0], vx.shape()[1]);
        let spatial: usize = vx.shape()[2..].iter().product();
        if vg.shape() != [channels] || vb.shape() != [channels] {
            return Err(shape_err("batch_norm", &vx, &vg));
        }
        let (eps, stats, training) = match mode {
            BnMode::Batch { eps } => (eps, None, true),
            BnMode::Fixed { mean, var, eps } => {
                if mean.len() != channels || var.len() != channels {
                    return Err(Error::invalid(
                        "batch_norm",
                        format!("fixed statistics must have {channels} channels"),
                    ));
                }
                (eps, Some((mean, var)), false)
            }
        };
        let fwd = kernels::batch_norm_forward(
            vx.data(),
            batch,
            channels,
            spatial,
            vg.data(),
            vb.data(),
            eps,
            stats,
        );
        let out = Tensor::new(vx.shape().to_vec(), fwd.y)?;
        let rg = self.requires(&[x.id, gamma.id, beta.id]);
        let op = Op::BatchNorm {
            x: x.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat: fwd.xhat,
            inv_std: fwd.inv_std,
            training,
        };
        let batch_stats = training.then_some(BnBatchStats {
            mean: fwd.mean,
            var: fwd.var,
        });
        Ok((self.push(out, op, rg), batch_stats))
    }

    /// Reverse pass from a single-element `loss`. Gradients are added to
    /// whatever earlier `backward` calls left on the graph.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let finished = {
            let nodes = self.nodes.borrow();
            let root = &nodes[loss.id];
            if root.value.numel() != 1 {
                return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
            }
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
            grads[loss.id] = Some(vec![1.0]);
            let mut finished = Vec::new();
            for id in (0..=loss.id).rev() {
                let Some(g) = grads[id].take() else { continue };
                if !nodes[id].requires_grad {
                    continue;
                }
                propagate(&nodes, id, &g, &mut grads);
                finished.push((id, g));
            }
            finished
        };
        let mut nodes = self.nodes.borrow_mut();
        for (id, g) in finished {
            let node = &mut nodes[id];
            match node.grad.as_mut() {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    let target = nodes[id].value.numel();
    // A single-element operand broadcast against a larger one.
    let contrib = if contrib.len() != target && target == 1 {
        vec![contrib.iter().sum()]
    } else {
        contrib
    };
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

/// Reads operand `id` at output position `i`, honoring scalar broadcast.
fn at(t: &Tensor, i: usize) -> f64 {
    if t.numel() == 1 {
        t.item()
    } else {
        t.data()[i]
    }
}

fn propagate(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let out = &node.value;
    let val = |i: usize| &nodes[i].value;
    let map = |_x: usize, f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
        g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()
    };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.to_vec());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|v| -v).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, map(*a, &|i, gi| gi * at(vb, i)));
            accumulate(nodes, grads, *b, map(*b, &|i, gi| gi * at(va, i)));
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            accumulate(nodes, grads, *a, map(*a, &|i, gi| gi / at(vb, i)));
            accumulate(
                nodes,
                grads,
                *b,
                map(*b, &|i, gi| {
                    let d = at(vb, i);
                    -gi * at(va, i) / (d * d)
                }),
            );
        }
        Op::AddScalar(x) | Op::Reshape(x) => accumulate(nodes, grads, *x, g.to_vec()),
        Op::MulScalar(x, c) => accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect()),
        Op::Neg(x) => accumulate(nodes, grads, *x, g.iter().map(|v| -v).collect()),
        Op::Square(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, map(*x, &|i, gi| 2.0 * gi * vx.data()[i]));
        }
        Op::Exp(x) => {
            accumulate(nodes, grads, *x, map(*x, &|i, gi| gi * out.data()[i]));
        }
        Op::Log(x) => {
            let vx = val(*x);
            accumulate(nodes, grads, *x, map(*x, &|i, gi| gi / vx.data()[i]));
        }
        Op::Sqrt(x) => {
            // Undefined at 0: the product below is inf or NaN there, never 0.
            accumulate(nodes, grads, *x, map(*x, &|i, gi| gi * 0.5 / out.data()[i]));
        }
        Op::Relu(x) => {
            // A product rather than a select, so a non-finite upstream
            // gradient stays non-finite instead of being masked to 0.
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                map(*x, &|i, gi| gi * if vx.data()[i] > 0.0 { 1.0 } else { 0.0 }),
            );
        }
        Op::LeakyRelu(x, alpha) => {
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                map(*x, &|i, gi| if vx.data()[i] > 0.0 { gi } else { gi * alpha }),
            );
        }
        Op::Softplus(x) => {
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                map(*x, &|i, gi| gi / (1.0 + (-vx.data()[i]).exp())),
            );
        }
        Op::ClampMin(x, floor) => {
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                map(*x, &|i, gi| if vx.data()[i] > *floor { gi } else { 0.0 }),
            );
        }
        Op::Sum(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0]; n]);
        }
        Op::Mean(x) => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::SumRows(x) | Op::MeanRows(x) => {
            let vx = val(*x);
            let rows = vx.shape()[0];
            let scale = if matches!(node.op, Op::MeanRows(_)) {
                1.0 / rows as f64
            } else {
                1.0
            };
            let contrib = (0..rows)
                .flat_map(|_| g.iter().map(move |v| v * scale))
                .collect();
            accumulate(nodes, grads, *x, contrib);
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = val(p).numel();
                accumulate(nodes, grads, p, g[off..off + n].to_vec());
                off += n;
            }
        }
        Op::Narrow { x, start } => {
            let vx = val(*x);
            let row: usize = vx.shape()[1..].iter().product();
            let mut contrib = vec![0.0; vx.numel()];
            contrib[start * row..start * row + g.len()].copy_from_slice(g);
            accumulate(nodes, grads, *x, contrib);
        }
        Op::TileRows(x) => {
            let n = val(*x).numel();
            let mut contrib = vec![0.0; n];
            for chunk in g.chunks(n) {
                contrib.iter_mut().zip(chunk).for_each(|(c, v)| *c += v);
            }
            accumulate(nodes, grads, *x, contrib);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
            if nodes[*a].requires_grad {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g, (n, 1), vb.data(), (1, n), 0.0, &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[*b].requires_grad {
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, va.data(), (1, k), g, (n, 1), 0.0, &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Conv2d { x, w, b, geom } => {
            let (vx, vw) = (val(*x), val(*w));
            let need = (
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
                b.is_some_and(|b| nodes[b].requires_grad),
            );
            let oc = vw.shape()[0];
            let grads_c =
                kernels::conv2d_backward(vx.data(), vx.shape()[0], geom, vw.data(), oc, g, need);
            if let Some(dx) = grads_c.dx {
                accumulate(nodes, grads, *x, dx);
            }
            if let Some(dw) = grads_c.dw {
                accumulate(nodes, grads, *w, dw);
            }
            if let (Some(b), Some(db)) = (b, grads_c.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::MaxPool2d { x, argmax } => {
            let mut dx = vec![0.0; val(*x).numel()];
            for (&src, gi) in argmax.iter().zip(g) {
                dx[src] += gi;
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        } => {
            let vx = val(*x);
            let (batch, channels) = (vx.shape()[0], vx.shape()[1]);
            let spatial = vx.numel() / (batch * channels);
            let bn = kernels::batch_norm_backward(
                g,
                xhat,
                inv_std,
                val(*gamma).data(),
                batch,
                channels,
                spatial,
                *training,
            );
            accumulate(nodes, grads, *x, bn.dx);
            accumulate(nodes, grads, *gamma, bn.dgamma);
            accumulate(nodes, grads, *beta, bn.dbeta);
        }
        Op::Softmax(x) => {
            let y = out.data();
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            accumulate(
                nodes,
                grads,
                *x,
                y.iter().zip(g).map(|(yi, gi)| yi * (gi - dot)).collect(),
            );
        }
        Op::LogSoftmax(x) => {
            let gsum: f64 = g.iter().sum();
            accumulate(
                nodes,
                grads,
                *x,
                out.data()
                    .iter()
                    .zip(g)
                    .map(|(l, gi)| gi - l.exp() * gsum)
                    .collect(),
            );
        }
        Op::LogSumExp(x) => {
            let lse = out.item();
            let vx = val(*x);
            accumulate(
                nodes,
                grads,
                *x,
                vx.data().iter().map(|v| g[0] * (v - lse).exp()).collect(),
            );
        }
    }
}

fn stable_log_softmax(x: &[f64]) -> Vec<f64> {
    let lse = logsumexp(x);
    x.iter().map(|v| v - lse).collect()
}

fn logsumexp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

impl<'g> Var<'g> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(&[self.id])
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    pub fn add(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary("add", self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary("sub", self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary("mul", self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn div(self, rhs: Var<'g>) -> Result<Var<'g>> {
        self.graph
            .binary("div", self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| a / b)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::AddScalar(self.id), |a| a + c)
    }

    pub fn mul_scalar(self, c: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::MulScalar(self.id, c), |a| a * c)
    }

    pub fn neg(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Neg(self.id), |a| -a)
    }

    pub fn square(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Square(self.id), |a| a * a)
    }

    pub fn exp(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn log(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Log(self.id), f64::ln)
    }

    pub fn sqrt(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn relu(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Relu(self.id), |a| a.max(0.0))
    }

    pub fn leaky_relu(self, alpha: f64) -> Var<'g> {
        self.graph.unary(self.id, Op::LeakyRelu(self.id, alpha), |a| {
            if a > 0.0 {
                a
            } else {
                alpha * a
            }
        })
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Var<'g> {
        self.graph.unary(self.id, Op::Softplus(self.id), |a| {
            a.max(0.0) + (-a.abs()).exp().ln_1p()
        })
    }

    pub fn clamp_min(self, floor: f64) -> Var<'g> {
        self.graph
            .unary(self.id, Op::ClampMin(self.id, floor), |a| a.max(floor))
    }

    pub fn sum(self) -> Var<'g> {
        let s = self.value().data().iter().sum();
        let rg = self.requires_grad();
        self.graph.push(Tensor::scalar(s), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'g> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.requires_grad();
        self.graph.push(Tensor::scalar(m), Op::Mean(self.id), rg)
    }

    fn reduce_rows(self, mean: bool) -> Result<Var<'g>> {
        let v = self.value();
        if v.rank() == 0 {
            return Err(Error::invalid("sum_rows", "scalar has no rows"));
        }
        let rows = v.shape()[0];
        let width = v.numel() / rows;
        let mut acc = vec![0.0; width];
        for row in v.data().chunks(width) {
            acc.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let op = if mean {
            acc.iter_mut().for_each(|a| *a /= rows as f64);
            Op::MeanRows(self.id)
        } else {
            Op::SumRows(self.id)
        };
        let out = Tensor::new(v.shape()[1..].to_vec(), acc)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(out, op, rg))
    }

    /// Sum over axis 0.
    pub fn sum_rows(self) -> Result<Var<'g>> {
        self.reduce_rows(false)
    }

    /// Mean over axis 0.
    pub fn mean_rows(self) -> Result<Var<'g>> {
        self.reduce_rows(true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g>> {
        let out = (*self.value()).clone().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::Reshape(self.id), rg))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn narrow(self, start: usize, len: usize) -> Result<Var<'g>> {
        let v = self.value();
        if v.rank() == 0 || len == 0 || start + len > v.shape()[0] {
            return Err(Error::invalid(
                "narrow",
                format!("rows {start}..{} out of range for {:?}", start + len, v.shape()),
            ));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let out = Tensor::new(shape, v.data()[start * row..(start + len) * row].to_vec())?;
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::Narrow { x: self.id, start }, rg))
    }

    /// Repeats the whole tensor `times` times along a new leading axis.
    pub fn tile_rows(self, times: usize) -> Result<Var<'g>> {
        if times == 0 {
            return Err(Error::invalid("tile_rows", "times must be positive"));
        }
        let v = self.value();
        let mut shape = vec![times];
        shape.extend_from_slice(v.shape());
        let out = Tensor::new(shape, v.data().repeat(times))?;
        let rg = self.requires_grad();
        Ok(self.graph.push(out, Op::TileRows(self.id), rg))
    }

    pub fn matmul(self, rhs: Var<'g>) -> Result<Var<'g>> {
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", &a, &b));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut c);
        let rg = self.graph.requires(&[self.id, rhs.id]);
        Ok(self
            .graph
            .push(Tensor::new(vec![m, n], c)?, Op::MatMul(self.id, rhs.id), rg))
    }

    fn rank1(&self, op: &'static str) -> Result<Rc<Tensor>> {
        let v = self.value();
        if v.rank() != 1 {
            return Err(Error::invalid(op, format!("needs a vector, got {:?}", v.shape())));
        }
        Ok(v)
    }

    /// Softmax of a vector, shifted by its maximum before exponentiation.
    pub fn softmax(self) -> Result<Var<'g>> {
        let v = self.rank1("softmax")?;
        let y = stable_log_softmax(v.data()).into_iter().map(f64::exp).collect();
        let rg = self.requires_grad();
        Ok(self.graph.push(Tensor::vector(y), Op::Softmax(self.id), rg))
    }

    pub fn log_softmax(self) -> Result<Var<'g>> {
        let v = self.rank1("log_softmax")?;
        let y = stable_log_softmax(v.data());
        let rg = self.requires_grad();
        Ok(self.graph.push(Tensor::vector(y), Op::LogSoftmax(self.id), rg))
    }

    pub fn logsumexp(self) -> Result<Var<'g>> {
        let v = self.rank1("logsumexp")?;
        let s = logsumexp(v.data());
        let rg = self.requires_grad();
        Ok(self.graph.push(Tensor::scalar(s), Op::LogSumExp(self.id), rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec<'g>(g: &'g Graph, v: &[f64]) -> Var<'g> {
        g.param(Tensor::vector(v.to_vec()))
    }

    #[test]
    fn relu_and_leaky_values() {
        let g = Graph::new();
        let x = vec(&g, &[-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
        assert_eq!(x.leaky_relu(0.01).value().data(), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let g = Graph::new();
        let s = vec(&g, &[0.0, 0.0]).softmax().unwrap();
        assert_eq!(s.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn square_sum_gradient() {
        let g = Graph::new();
        let x = vec(&g, &[1.0, 2.0]);
        let loss = x.square().sum();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient_at_negative_input_is_zero() {
        let g = Graph::new();
        let x = vec(&g, &[-1.0, 2.0]);
        g.backward(x.relu().sum()).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn kink_conventions() {
        let g = Graph::new();
        let x = vec(&g, &[0.0]);
        g.backward(x.relu().add(x.leaky_relu(0.25)).unwrap().sum())
            .unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.25]);
    }

    #[test]
    fn relu_does_not_hide_an_undefined_gradient() {
        let g = Graph::new();
        let x = vec(&g, &[-1.0]);
        g.backward(x.relu().sqrt().clamp_min(1e-3).sum()).unwrap();
        assert!(x.grad().unwrap().data()[0].is_nan());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let g = Graph::new();
        let x = vec(&g, &[1.0, 2.0]);
        let loss = x.square().sum();
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        g.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = vec(&g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let g = Graph::new();
        let a = vec(&g, &[1.0, 2.0]);
        let b = vec(&g, &[1.0, 2.0, 3.0]);
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let g = Graph::new();
        let a = vec(&g, &[1.0, 2.0, 3.0]);
        let s = g.param(Tensor::scalar(2.0));
        let y = a.mul(s).unwrap().sum();
        g.backward(y).unwrap();
        assert_eq!(s.grad().unwrap().data(), &[6.0]);
        assert_eq!(a.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn sqrt_gradient_at_zero_is_not_finite() {
        let g = Graph::new();
        let x = vec(&g, &[0.0]);
        g.backward(x.sqrt().clamp_min(1e-3).sum()).unwrap();
        assert!(x.grad().unwrap().data()[0].is_nan());
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let x = vec(&g, &[3.0]);
        g.backward(c.mul(x).unwrap().sum()).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().data(), &[1.0]);
    }
}
