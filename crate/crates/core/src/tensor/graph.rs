//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and `backward` simply walks it in reverse.

use super::array::Tensor;
use super::kernels::{self, ConvGeom};
use crate::error::{invalid, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// SAME-padded 2-D convolution. `input` is `[C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, k, k]` with odd `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (c_in, h, w) = self.value(input).dims3()?;
        let (c_out, kc, k) = match self.value(kernel).shape() {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => {
                return Err(invalid(format!(
                    "conv2d: kernel must be [C_out,C_in,k,k], got {s:?}"
                )))
            }
        };
        if kc != c_in {
            return Err(invalid(format!(
                "conv2d: kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if k % 2 == 0 {
            return Err(invalid(format!("conv2d: kernel size {k} must be odd")));
        }
        if dilation == 0 {
            return Err(invalid("conv2d: dilation must be >= 1"));
        }
        let geom = ConvGeom {
            c_in,
            c_out,
            h,
            w,
            k,
            dilation,
        };
        let out =
            kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), geom);
        let rg = self.needs(&[input, kernel]);
        Ok(self.push(
            Tensor::new(vec![c_out, h, w], out)?,
            Op::Conv2d {
                input,
                kernel,
                geom,
            },
            rg,
        ))
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if self.value(bias).len() != c {
            return Err(invalid(format!(
                "bias_add: {} biases for {c} channels",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).data().to_vec();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        let rg = self.needs(&[input, bias]);
        Ok(self.push(
            Tensor::new(vec![c, h, w], out)?,
            Op::BiasAdd { input, bias },
            rg,
        ))
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = self.value(input).dims3()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid(format!(
                "maxpool2: spatial size {h}x{w} must be even"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(input).data(), c, h, w);
        let rg = self.needs(&[input]);
        Ok(self.push(
            Tensor::new(vec![c, h / 2, w / 2], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(input).map(f);
        let rg = self.needs(&[input]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= 0.0) {
            return Err(invalid("log: non-positive input"));
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { input: x, lo, hi })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &str,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, name)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.len() as f64;
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn elementwise(&self, g: &Tensor, x: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let xv = self.value(x);
        let data = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&gi, &xi)| f(gi, xi))
            .collect();
        Tensor::new(xv.shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                if self.nodes[kernel.0].requires_grad {
                    let gk =
                        kernels::conv2d_grad_kernel(g.data(), self.value(*input).data(), *geom);
                    let shape = self.value(*kernel).shape().to_vec();
                    self.accumulate(grads, *kernel, Tensor::new(shape, gk)?);
                }
                if self.nodes[input.0].requires_grad {
                    let gi =
                        kernels::conv2d_grad_input(g.data(), self.value(*kernel).data(), *geom);
                    let shape = self.value(*input).shape().to_vec();
                    self.accumulate(grads, *input, Tensor::new(shape, gi)?);
                }
            }
            Op::BiasAdd { input, bias } => {
                let c = self.value(*bias).len();
                let plane = g.len() / c;
                let gb: Vec<f64> = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, gb)?);
                self.accumulate(grads, *input, g.clone());
            }
            Op::MaxPool2 { input, argmax } => {
                let mut gi = Tensor::zeros(self.value(*input).shape());
                let d = gi.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Relu(x) => {
                let d = self.elementwise(g, *x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                self.accumulate(grads, *x, d);
            }
            Op::Softplus(x) => {
                let d = self.elementwise(g, *x, |gi, xi| gi * sigmoid(xi));
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(a, b)| a * b)
                    .collect();
                self.accumulate(grads, *x, Tensor::new(node.value.shape().to_vec(), d)?);
            }
            Op::Log(x) => {
                let d = self.elementwise(g, *x, |gi, xi| gi / xi);
                self.accumulate(grads, *x, d);
            }
            Op::Clamp { input, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let d = self.elementwise(
                    g,
                    *input,
                    |gi, xi| if xi >= lo && xi <= hi { gi } else { 0.0 },
                );
                self.accumulate(grads, *input, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = self.elementwise(g, *b, |gi, bi| gi * bi);
                let db = self.elementwise(g, *a, |gi, ai| gi * ai);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Sum(x) => {
                let gv = g.item()?;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                let gv = g.item()? / n;
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
        }
        Ok(())
    }
}
