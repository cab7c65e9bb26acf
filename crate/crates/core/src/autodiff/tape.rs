use super::conv::{self, Conv2dParams, ConvGeometry};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Axes {
    All,
    List(Vec<usize>),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryOp,
        a: Var,
        b: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geo: ConvGeometry,
    },
    Sigmoid(Var),
    Relu(Var),
    Ln(Var),
    Abs(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Scale {
        input: Var,
        factor: f64,
    },
    AddScalar(Var),
    Reduce {
        input: Var,
        kind: ReduceOp,
        // flat output index for each input element
        map: Vec<usize>,
        count: usize,
    },
    Reshape(Var),
    UpsampleNearest {
        input: Var,
        factor: usize,
    },
    StackLast(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it and a reverse sweep visits each node after all its consumers.
#[derive(Debug, Default)]
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v` as a tensor, zeros when nothing reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = &self.nodes[v.0].value;
        match &self.nodes[v.0].grad {
            Some(g) => Tensor::new(value.shape().to_vec(), g.clone()).expect("grad matches value"),
            None => Tensor::zeros_like(value),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// Elementwise binary op with trailing-aligned broadcasting of size-1 dims.
    pub fn elementwise(&mut self, kind: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match kind {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else {
            let bc = Broadcast::new(ta.shape(), tb.shape())?;
            let mut data = Vec::with_capacity(bc.numel());
            bc.for_each(|_, ia, ib| data.push(f(ta.data()[ia], tb.data()[ib])));
            Tensor::new(bc.out_shape.clone(), data)?
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Binary { kind, a, b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::shape(format!(
                "matmul expects two matrices, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        conv::matmul_into(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, p: Conv2dParams) -> Result<Var> {
        let geo = ConvGeometry::resolve(self.shape(input), self.shape(kernel), p)?;
        if let Some(bias) = bias {
            if self.shape(bias) != [geo.cout] {
                return Err(Error::shape(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geo.cout,
                    self.shape(bias)
                )));
            }
        }
        let out = conv::forward(
            &geo,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(geo.output_shape(), out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(value, rg, Op::Conv2d { input, kernel, bias, geo }))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(input).map(f);
        let rg = self.requires_grad(input);
        self.push(value, rg, op)
    }

    pub fn sigmoid(&mut self, t: Var) -> Var {
        self.unary(t, sigmoid, Op::Sigmoid(t))
    }

    /// `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, t: Var) -> Var {
        self.unary(t, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(t))
    }

    pub fn ln(&mut self, t: Var) -> Var {
        self.unary(t, f64::ln, Op::Ln(t))
    }

    pub fn abs(&mut self, t: Var) -> Var {
        self.unary(t, f64::abs, Op::Abs(t))
    }

    pub fn clamp(&mut self, t: Var, lo: f64, hi: f64) -> Var {
        self.unary(t, |x| x.clamp(lo, hi), Op::Clamp { input: t, lo, hi })
    }

    pub fn scale(&mut self, t: Var, factor: f64) -> Var {
        self.unary(t, |x| x * factor, Op::Scale { input: t, factor })
    }

    pub fn add_scalar(&mut self, t: Var, c: f64) -> Var {
        self.unary(t, |x| x + c, Op::AddScalar(t))
    }

    pub fn sum(&mut self, t: Var, axes: Axes) -> Result<Var> {
        self.reduce(ReduceOp::Sum, t, axes)
    }

    pub fn mean(&mut self, t: Var, axes: Axes) -> Result<Var> {
        self.reduce(ReduceOp::Mean, t, axes)
    }

    /// Sums or averages over `axes`, dropping the reduced dimensions.
    pub fn reduce(&mut self, kind: ReduceOp, t: Var, axes: Axes) -> Result<Var> {
        let input = self.value(t);
        let shape = input.shape();
        let reduced: Vec<bool> = match &axes {
            Axes::All => vec![true; shape.len()],
            Axes::List(list) => {
                let mut flags = vec![false; shape.len()];
                for &ax in list {
                    if ax >= shape.len() {
                        return Err(Error::shape(format!(
                            "reduce axis {ax} out of range for shape {shape:?}"
                        )));
                    }
                    flags[ax] = true;
                }
                flags
            }
        };
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        let count: usize = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // output stride contributed by each input axis (0 when reduced)
        let out_strides = strides(&out_shape);
        let mut axis_strides = Vec::with_capacity(shape.len());
        let mut kept = 0;
        for &r in &reduced {
            if r {
                axis_strides.push(0);
            } else {
                axis_strides.push(out_strides[kept]);
                kept += 1;
            }
        }
        let map = flat_map(shape, &axis_strides);
        let mut out = vec![0.0; out_shape.iter().product()];
        for (&o, &v) in map.iter().zip(input.data()) {
            out[o] += v;
        }
        if kind == ReduceOp::Mean && count > 0 {
            let inv = count as f64;
            out.iter_mut().for_each(|v| *v /= inv);
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires_grad(t);
        Ok(self.push(value, rg, Op::Reduce { input: t, kind, map, count }))
    }

    pub fn reshape(&mut self, t: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(t).clone().reshape(shape)?;
        let rg = self.requires_grad(t);
        Ok(self.push(value, rg, Op::Reshape(t)))
    }

    /// Nearest-neighbour upsampling of the last two axes by an integer factor.
    pub fn upsample_nearest(&mut self, t: Var, factor: usize) -> Result<Var> {
        let input = self.value(t);
        let &[b, c, h, w] = input.shape() else {
            return Err(Error::shape(format!(
                "upsample expects [B,C,H,W], got {:?}",
                input.shape()
            )));
        };
        if factor == 0 {
            return Err(Error::shape("upsample factor must be positive"));
        }
        let value = Tensor::new(
            vec![b, c, h * factor, w * factor],
            upsample_nearest(input.data(), b * c, h, w, factor),
        )?;
        let rg = self.requires_grad(t);
        Ok(self.push(value, rg, Op::UpsampleNearest { input: t, factor }))
    }

    /// Stacks equally shaped tensors along a new trailing axis.
    pub fn stack_last(&mut self, items: &[Var]) -> Result<Var> {
        let first = *items
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty list"))?;
        let shape = self.shape(first).to_vec();
        for &v in items {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::shape(format!(
                    "stack needs equal shapes, got {shape:?} and {:?}",
                    self.shape(v)
                )));
            }
        }
        let k = items.len();
        let inner: usize = shape.iter().product();
        let mut data = vec![0.0; inner * k];
        for (j, &v) in items.iter().enumerate() {
            for (i, &x) in self.value(v).data().iter().enumerate() {
                data[i * k + j] = x;
            }
        }
        let mut out_shape = shape;
        out_shape.push(k);
        let value = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(items);
        Ok(self.push(value, rg, Op::StackLast(items.to_vec())))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// recomputed from scratch each time.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        accumulate(&mut self.nodes[loss.0], &[1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            self.propagate(idx, &grad);
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.propagate_op(idx, &op, g);
        self.nodes[idx].op = op;
    }

    fn propagate_op(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (ga, gb) = {
                    let ta = self.value(a);
                    let tb = self.value(b);
                    let want_a = self.wants(a);
                    let want_b = self.wants(b);
                    let mut ga = want_a.then(|| vec![0.0; ta.numel()]);
                    let mut gb = want_b.then(|| vec![0.0; tb.numel()]);
                    let mut step = |o: usize, ia: usize, ib: usize| {
                        let (da, db) = match kind {
                            BinaryOp::Add => (g[o], g[o]),
                            BinaryOp::Sub => (g[o], -g[o]),
                            BinaryOp::Mul => (g[o] * tb.data()[ib], g[o] * ta.data()[ia]),
                        };
                        if let Some(ga) = ga.as_mut() {
                            ga[ia] += da;
                        }
                        if let Some(gb) = gb.as_mut() {
                            gb[ib] += db;
                        }
                    };
                    if ta.shape() == tb.shape() {
                        (0..ta.numel()).for_each(|i| step(i, i, i));
                    } else {
                        Broadcast::new(ta.shape(), tb.shape())
                            .expect("validated in forward")
                            .for_each(step);
                    }
                    (ga, gb)
                };
                if let Some(ga) = ga {
                    accumulate(&mut self.nodes[a.0], &ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut self.nodes[b.0], &gb);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let mut ga = self.wants(a).then(|| vec![0.0; m * k]);
                let mut gb = self.wants(b).then(|| vec![0.0; k * n]);
                conv::matmul_backward(
                    m,
                    k,
                    n,
                    self.value(a).data(),
                    self.value(b).data(),
                    g,
                    ga.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(ga) = ga {
                    accumulate(&mut self.nodes[a.0], &ga);
                }
                if let Some(gb) = gb {
                    accumulate(&mut self.nodes[b.0], &gb);
                }
            }
            Op::Conv2d { input, kernel, bias, geo } => {
                let mut gx = self.wants(input).then(|| vec![0.0; self.value(input).numel()]);
                let mut gk = self.wants(kernel).then(|| vec![0.0; self.value(kernel).numel()]);
                let mut gbias = bias
                    .filter(|&b| self.wants(b))
                    .map(|_| vec![0.0; geo.cout]);
                conv::backward(
                    &geo,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    gx.as_deref_mut(),
                    gk.as_deref_mut(),
                    gbias.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    accumulate(&mut self.nodes[input.0], &gx);
                }
                if let Some(gk) = gk {
                    accumulate(&mut self.nodes[kernel.0], &gk);
                }
                if let (Some(b), Some(gb)) = (bias, gbias) {
                    accumulate(&mut self.nodes[b.0], &gb);
                }
            }
            Op::Sigmoid(t) => {
                let out = self.nodes[idx].value.data();
                let gi: Vec<f64> = out.iter().zip(g).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                self.accumulate_if_wanted(t, &gi);
            }
            Op::Relu(t) => {
                let x = self.value(t).data();
                let gi: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate_if_wanted(t, &gi);
            }
            Op::Ln(t) => {
                let x = self.value(t).data();
                let gi: Vec<f64> = x.iter().zip(g).map(|(&x, &g)| g / x).collect();
                self.accumulate_if_wanted(t, &gi);
            }
            Op::Abs(t) => {
                let x = self.value(t).data();
                let gi: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > 0.0 { g } else if x < 0.0 { -g } else { 0.0 })
                    .collect();
                self.accumulate_if_wanted(t, &gi);
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(input).data();
                let gi: Vec<f64> = x
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x >= lo && x <= hi { g } else { 0.0 })
                    .collect();
                self.accumulate_if_wanted(input, &gi);
            }
            Op::Scale { input, factor } => {
                let gi: Vec<f64> = g.iter().map(|&g| g * factor).collect();
                self.accumulate_if_wanted(input, &gi);
            }
            Op::AddScalar(t) | Op::Reshape(t) => self.accumulate_if_wanted(t, g),
            Op::Reduce { input, kind, ref map, count } => {
                let scale = match kind {
                    ReduceOp::Sum => 1.0,
                    ReduceOp::Mean => 1.0 / count.max(1) as f64,
                };
                let gi: Vec<f64> = map.iter().map(|&o| g[o] * scale).collect();
                self.accumulate_if_wanted(input, &gi);
            }
            Op::UpsampleNearest { input, factor } => {
                let &[b, c, h, w] = self.shape(input) else {
                    unreachable!("validated in forward")
                };
                let (hu, wu) = (h * factor, w * factor);
                let mut gi = vec![0.0; b * c * h * w];
                for p in 0..b * c {
                    for y in 0..hu {
                        for x in 0..wu {
                            gi[(p * h + y / factor) * w + x / factor] += g[(p * hu + y) * wu + x];
                        }
                    }
                }
                self.accumulate_if_wanted(input, &gi);
            }
            Op::StackLast(ref items) => {
                let k = items.len();
                for (j, &v) in items.iter().enumerate() {
                    if self.wants(v) {
                        let gi: Vec<f64> = g.iter().skip(j).step_by(k).copied().collect();
                        accumulate(&mut self.nodes[v.0], &gi);
                    }
                }
            }
        }
    }

    fn accumulate_if_wanted(&mut self, v: Var, g: &[f64]) {
        if self.wants(v) {
            accumulate(&mut self.nodes[v.0], g);
        }
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    match &mut node.grad {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        None => node.grad = Some(g.to_vec()),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Nearest-neighbour upsampling of `planes` row-major `h x w` planes.
pub fn upsample_nearest(data: &[f64], planes: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (hu, wu) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(planes * hu * wu);
    for p in 0..planes {
        for y in 0..hu {
            let row = &data[(p * h + y / factor) * w..(p * h + y / factor + 1) * w];
            out.extend((0..wu).map(|x| row[x / factor]));
        }
    }
    out
}

/// For each element of `shape`, the flat index obtained with `axis_strides`.
fn flat_map(shape: &[usize], axis_strides: &[usize]) -> Vec<usize> {
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            offset += axis_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            offset -= axis_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Index mapping for numpy-style broadcasting of two shapes.
struct Broadcast {
    out_shape: Vec<usize>,
    a_map: Vec<usize>,
    b_map: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out_shape.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => {
                    return Err(Error::shape(format!(
                        "shapes {a:?} and {b:?} are not broadcast-compatible"
                    )))
                }
            });
        }
        let bstrides = |p: &[usize]| -> Vec<usize> {
            strides(p)
                .into_iter()
                .zip(p)
                .map(|(s, &d)| if d == 1 { 0 } else { s })
                .collect()
        };
        let a_map = flat_map(&out_shape, &bstrides(&pa));
        let b_map = flat_map(&out_shape, &bstrides(&pb));
        Ok(Self {
            out_shape,
            a_map,
            b_map,
        })
    }

    fn numel(&self) -> usize {
        self.a_map.len()
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        for (o, (&ia, &ib)) in self.a_map.iter().zip(&self.b_map).enumerate() {
            f(o, ia, ib);
        }
    }
}
