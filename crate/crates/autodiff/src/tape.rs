//! Wengert-list reverse mode.
//!
//! Every op appends one node; node indices are therefore a topological
//! order and `backward` simply walks the list in reverse. Leaves created
//! with [`Tape::constant`] never receive gradients, and neither does any
//! node whose inputs are all constant.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Spatial padding for [`Tape::conv2d`]. Stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(
    feature = "serde",
    derive(serde::Serialize, serde::Deserialize),
    serde(rename_all = "snake_case")
)]
pub enum Padding {
    #[default]
    Valid,
    /// Zero padding that keeps the spatial size; needs an odd kernel.
    Same,
}

impl Padding {
    fn offset(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            Padding::Same => (k - 1) / 2,
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        pad: Padding,
    },
    Relu(Var),
    Softplus(Var),
    Ln(Var),
    Square(Var),
    SpatialSum(Var),
    SumPool {
        x: Var,
        size: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar {
        x: Var,
        s: Var,
    },
    DivScalar {
        x: Var,
        s: Var,
    },
    Dot(Var, Var),
    Sum(Var),
    L1Norm(Var),
    L2Norm(Var),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar root with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` if the root does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, with zeros for unreachable nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn hwc(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(AutodiffError::InvalidArgument {
            op,
            reason: format!("expected an H×W×C tensor, got shape {:?}", t.shape()),
        }),
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

    /// A differentiable leaf (parameter or input of interest).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.node(v)?.value.item()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownVar(v.0))
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.node(x)?.value.map(f);
        self.push(op, out, &[x], name)
    }

    /// `w · x + b` for `x` of length k, `w` of shape m×k and `b` of length m.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (
            &self.node(x)?.value,
            &self.node(w)?.value,
            &self.node(b)?.value,
        );
        let k = xv.len();
        let m = match *wv.shape() {
            [m, kk] if kk == k => m,
            _ => {
                return Err(mismatch(
                    "dense",
                    &[wv.shape().first().copied().unwrap_or(0), k],
                    wv.shape(),
                ))
            }
        };
        if xv.rank() != 1 {
            return Err(mismatch("dense", &[k], xv.shape()));
        }
        if bv.shape() != [m] {
            return Err(mismatch("dense", &[m], bv.shape()));
        }
        let (xd, wd) = (xv.data(), wv.data());
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &wd[i * k..(i + 1) * k];
                row.iter().zip(xd).map(|(a, b)| a * b).sum::<f64>() + bv.data()[i]
            })
            .collect();
        self.push(
            Op::Dense { x, w, b },
            Tensor::from_parts(vec![m], out),
            &[x, w, b],
            "dense",
        )
    }

    /// Stride-1 cross-correlation of an H×W×C map with k×k×C×n kernels.
    pub fn conv2d(&mut self, x: Var, kernels: Var, bias: Var, pad: Padding) -> Result<Var> {
        let (xv, kv, bv) = (
            &self.node(x)?.value,
            &self.node(kernels)?.value,
            &self.node(bias)?.value,
        );
        let (h, w, c) = hwc("conv2d", xv)?;
        let (k, n) = match *kv.shape() {
            [k1, k2, kc, n] if k1 == k2 && kc == c => (k1, n),
            [_, _, kc, _] if kc != c => return Err(mismatch("conv2d channels", &[c], &[kc])),
            _ => {
                return Err(AutodiffError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("kernels must be k×k×C×n, got {:?}", kv.shape()),
                })
            }
        };
        if bv.shape() != [n] {
            return Err(mismatch("conv2d bias", &[n], bv.shape()));
        }
        if pad == Padding::Same && k % 2 == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                reason: format!("same padding needs an odd kernel, got k={k}"),
            });
        }
        if k > h || k > w {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel {k}×{k} larger than input {h}×{w}"),
            });
        }
        let (oh, ow) = match pad {
            Padding::Valid => (h - k + 1, w - k + 1),
            Padding::Same => (h, w),
        };
        let p = pad.offset(k);
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut out = vec![0.0; oh * ow * n];
        for oy in 0..oh {
            for ox in 0..ow {
                let o_base = (oy * ow + ox) * n;
                out[o_base..o_base + n].copy_from_slice(bd);
                for i in 0..k {
                    let iy = oy + i;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let iy = iy - p;
                    for j in 0..k {
                        let ix = ox + j;
                        if ix < p || ix - p >= w {
                            continue;
                        }
                        let ix = ix - p;
                        let x_base = (iy * w + ix) * c;
                        for ci in 0..c {
                            let xval = xd[x_base + ci];
                            if xval == 0.0 {
                                continue;
                            }
                            let k_base = ((i * k + j) * c + ci) * n;
                            let krow = &kd[k_base..k_base + n];
                            for (o, kw) in out[o_base..o_base + n].iter_mut().zip(krow) {
                                *o += xval * kw;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Op::Conv2d {
                x,
                k: kernels,
                b: bias,
                pad,
            },
            Tensor::from_parts(vec![oh, ow, n], out),
            &[x, kernels, bias],
            "conv2d",
        )
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "relu", Op::Relu(x), |v| v.max(0.0))
    }

    /// Elementwise `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "softplus", Op::Softplus(x), softplus)
    }

    /// Elementwise natural logarithm.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "ln", Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "square", Op::Square(x), |v| v * v)
    }

    /// Per-channel sum over both spatial axes of an H×W×C map.
    pub fn spatial_sum(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (_, _, c) = hwc("spatial_sum", xv)?;
        let mut out = vec![0.0; c];
        for px in xv.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(px) {
                *o += v;
            }
        }
        self.push(
            Op::SpatialSum(x),
            Tensor::from_parts(vec![c], out),
            &[x],
            "spatial_sum",
        )
    }

    /// Non-overlapping `size`×`size` sum pooling of an H×W×C map.
    pub fn sum_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let (h, w, c) = hwc("sum_pool", xv)?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "sum_pool",
                reason: format!("pool size {size} does not divide {h}×{w}"),
            });
        }
        let (ph, pw) = (h / size, w / size);
        let mut out = vec![0.0; ph * pw * c];
        let xd = xv.data();
        for y in 0..h {
            for xx in 0..w {
                let src = (y * w + xx) * c;
                let dst = ((y / size) * pw + xx / size) * c;
                for ci in 0..c {
                    out[dst + ci] += xd[src + ci];
                }
            }
        }
        self.push(
            Op::SumPool { x, size },
            Tensor::from_parts(vec![ph, pw, c], out),
            &[x],
            "sum_pool",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.node(x)?.value.reshape(shape)?;
        self.push(Op::Reshape(x), out, &[x], "reshape")
    }

    /// Flattens to one dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        self.reshape(x, &[n])
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(av.shape().to_vec(), out);
        self.push(op, out, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "scale", Op::Scale(x, c), |v| v * c)
    }

    /// Adds a fixed constant to every entry.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, "offset", Op::Offset(x), |v| v + c)
    }

    fn scalar_operand(&self, op: &'static str, s: Var) -> Result<f64> {
        let sv = &self.node(s)?.value;
        sv.item().map_err(|_| mismatch(op, &[1], sv.shape()))
    }

    /// Multiplies every entry of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("mul_scalar", s)?;
        let out = self.node(x)?.value.map(|v| v * sv);
        self.push(Op::MulScalar { x, s }, out, &[x, s], "mul_scalar")
    }

    /// Divides every entry of `x` by the one-element node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.scalar_operand("div_scalar", s)?;
        let out = self.node(x)?.value.map(|v| v / sv);
        self.push(Op::DivScalar { x, s }, out, &[x, s], "div_scalar")
    }

    /// Inner product; equals `sum(mul(a, b))` with the same summation order.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let s: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.push(Op::Dot(a, b), Tensor::scalar(s), &[a, b], "dot")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x], "sum")
    }

    pub fn l1norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.node(x)?.value.data().iter().map(|v| v.abs()).sum();
        self.push(Op::L1Norm(x), Tensor::scalar(s), &[x], "l1norm")
    }

    pub fn l2norm(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self
            .node(x)?
            .value
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        self.push(Op::L2Norm(x), Tensor::scalar(s), &[x], "l2norm")
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = self.node(root)?;
        if root_node.value.len() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: root_node.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_node.value.shape(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        // constants keep no gradient
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let gd = g.data();
        let elementwise = |x: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .zip(gd)
                    .map(|(&xv, &gv)| f(xv, gv))
                    .collect(),
            )
        };
        match *op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (m, k) = (wv.shape()[0], wv.shape()[1]);
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; k];
                    for (i, &gi) in gd.iter().enumerate() {
                        for (d, wij) in dx.iter_mut().zip(&wv.data()[i * k..(i + 1) * k]) {
                            *d += gi * wij;
                        }
                    }
                    self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![0.0; m * k];
                    for (i, &gi) in gd.iter().enumerate() {
                        for (d, xj) in dw[i * k..(i + 1) * k].iter_mut().zip(xv.data()) {
                            *d = gi * xj;
                        }
                    }
                    self.accumulate(grads, w, Tensor::from_parts(vec![m, k], dw));
                }
                self.accumulate(grads, b, g.clone());
            }
            Op::Conv2d { x, k: kv, b, pad } => {
                self.conv2d_backward(x, kv, b, pad, g, grads);
            }
            Op::Relu(x) => {
                let d = elementwise(val(x), &|xv, gv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, x, d);
            }
            Op::Softplus(x) => {
                let d = elementwise(val(x), &|xv, gv| gv * sigmoid(xv));
                self.accumulate(grads, x, d);
            }
            Op::Ln(x) => {
                let d = elementwise(val(x), &|xv, gv| gv / xv);
                self.accumulate(grads, x, d);
            }
            Op::Square(x) => {
                let d = elementwise(val(x), &|xv, gv| 2.0 * xv * gv);
                self.accumulate(grads, x, d);
            }
            Op::SpatialSum(x) => {
                let xv = val(x);
                let c = gd.len();
                let mut d = vec![0.0; xv.len()];
                for px in d.chunks_exact_mut(c) {
                    px.copy_from_slice(gd);
                }
                self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::SumPool { x, size } => {
                let xv = val(x);
                let (h, w, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let pw = w / size;
                let mut d = vec![0.0; xv.len()];
                for y in 0..h {
                    for xx in 0..w {
                        let dst = (y * w + xx) * c;
                        let src = ((y / size) * pw + xx / size) * c;
                        d[dst..dst + c].copy_from_slice(&gd[src..src + c]);
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(xv.shape().to_vec(), d));
            }
            Op::Reshape(x) => {
                let d = Tensor::from_parts(val(x).shape().to_vec(), gd.to_vec());
                self.accumulate(grads, x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = elementwise(val(b), &|bv, gv| bv * gv);
                let db = elementwise(val(a), &|av, gv| av * gv);
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::Scale(x, c) => self.accumulate(grads, x, g.map(|v| v * c)),
            Op::Offset(x) => self.accumulate(grads, x, g.clone()),
            Op::MulScalar { x, s } => {
                let sv = val(s).data()[0];
                let ds: f64 = val(x).data().iter().zip(gd).map(|(a, b)| a * b).sum();
                self.accumulate(grads, x, g.map(|v| v * sv));
                self.accumulate(grads, s, Tensor::scalar(ds));
            }
            Op::DivScalar { x, s } => {
                let sv = val(s).data()[0];
                let ds: f64 = -val(x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    / (sv * sv);
                self.accumulate(grads, x, g.map(|v| v / sv));
                self.accumulate(grads, s, Tensor::scalar(ds));
            }
            Op::Dot(a, b) => {
                let gv = gd[0];
                self.accumulate(grads, a, val(b).map(|v| v * gv));
                self.accumulate(grads, b, val(a).map(|v| v * gv));
            }
            Op::Sum(x) => {
                let gv = gd[0];
                self.accumulate(grads, x, Tensor::filled(val(x).shape(), gv));
            }
            Op::L1Norm(x) => {
                let gv = gd[0];
                let d = val(x).map(|v| {
                    if v > 0.0 {
                        gv
                    } else if v < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, d);
            }
            Op::L2Norm(x) => {
                let norm = out.data()[0];
                let gv = gd[0];
                let d = if norm > 0.0 {
                    val(x).map(|v| gv * v / norm)
                } else {
                    Tensor::zeros(val(x).shape())
                };
                self.accumulate(grads, x, d);
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        kv: Var,
        b: Var,
        pad: Padding,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (xt, kt) = (&self.nodes[x.0].value, &self.nodes[kv.0].value);
        let (h, w, c) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (k, n) = (kt.shape()[0], kt.shape()[3]);
        let (oh, ow) = (g.shape()[0], g.shape()[1]);
        let p = pad.offset(k);
        let (xd, kd, gd) = (xt.data(), kt.data(), g.data());
        let need_x = self.nodes[x.0].requires_grad;
        let need_k = self.nodes[kv.0].requires_grad;
        let mut dx = vec![0.0; if need_x { xd.len() } else { 0 }];
        let mut dk = vec![0.0; if need_k { kd.len() } else { 0 }];
        let mut db = vec![0.0; n];
        for oy in 0..oh {
            for ox in 0..ow {
                let g_base = (oy * ow + ox) * n;
                let grow = &gd[g_base..g_base + n];
                for (d, gv) in db.iter_mut().zip(grow) {
                    *d += gv;
                }
                for i in 0..k {
                    let iy = oy + i;
                    if iy < p || iy - p >= h {
                        continue;
                    }
                    let iy = iy - p;
                    for j in 0..k {
                        let ix = ox + j;
                        if ix < p || ix - p >= w {
                            continue;
                        }
                        let ix = ix - p;
                        let x_base = (iy * w + ix) * c;
                        for ci in 0..c {
                            let k_base = ((i * k + j) * c + ci) * n;
                            if need_x {
                                let krow = &kd[k_base..k_base + n];
                                dx[x_base + ci] +=
                                    krow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if need_k {
                                let xval = xd[x_base + ci];
                                for (d, gv) in dk[k_base..k_base + n].iter_mut().zip(grow) {
                                    *d += xval * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_parts(xt.shape().to_vec(), dx));
        }
        if need_k {
            self.accumulate(grads, kv, Tensor::from_parts(kt.shape().to_vec(), dk));
        }
        self.accumulate(grads, b, Tensor::from_parts(vec![n], db));
    }
}

/// Overflow-free `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
