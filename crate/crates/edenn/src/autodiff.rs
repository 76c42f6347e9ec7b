//! Tape-based reverse-mode differentiation over the tensor operations the
//! layer math needs.
//!
//! Operations are recorded in forward order on a [`Tape`]; [`Tape::backward`]
//! replays them in reverse, accumulating vector-Jacobian products. Node ids
//! only ever reference earlier nodes, so the graph is acyclic by
//! construction and reverse index order is a valid reverse topological order.
//!
//! A tape belongs to one forward/backward pass; leaves that receive no
//! gradient flow report zero through [`Gradients::get_or_zeros`].

use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_grads, dims2, dims3, dims4, Padding, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: VarId,
        kernel: VarId,
        stride: usize,
        padding: Padding,
    },
    Add {
        a: VarId,
        b: VarId,
    },
    Sub {
        a: VarId,
        b: VarId,
    },
    /// Elementwise product of same-shape tensors.
    Mul {
        a: VarId,
        b: VarId,
    },
    /// (W, H, C) tensor scaled per-cell by a (W, H) map shared across channels.
    MulBcastSpatial {
        a: VarId,
        m: VarId,
    },
    /// Tensor scaled by a scalar variable.
    ScaleVar {
        x: VarId,
        s: VarId,
    },
    ScaleConst {
        x: VarId,
        c: f64,
    },
    Tanh {
        x: VarId,
    },
    Relu {
        x: VarId,
    },
    Abs {
        x: VarId,
    },
    /// Full reduction to a scalar.
    Sum {
        x: VarId,
    },
    /// y = x @ w (+ b) with x: [n], w: [n, m], b: [m].
    Linear {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
    },
    /// (W, H, C) -> [C], mean over the spatial axes.
    GlobalAvgPool {
        x: VarId,
    },
    /// (Kw, Kh, Cin, Cout) -> [Cout], sum over all taps and input channels.
    KernelChannelSum {
        k: VarId,
    },
    /// Elementwise num / den, forced to zero where |den| < eps.
    DivGuard {
        num: VarId,
        den: VarId,
        eps: f64,
    },
    /// [C] -> (W, H, C).
    BcastChan {
        v: VarId,
        w: usize,
        h: usize,
    },
    /// (W, H) -> (W, H, C).
    BcastSpatial {
        m: VarId,
        c: usize,
    },
    /// Channel concatenation of two (W, H, *) tensors.
    ConcatChan {
        a: VarId,
        b: VarId,
    },
    /// Nearest-neighbour 2x spatial upsampling of a (W, H, C) tensor.
    UpsampleNearest2 {
        x: VarId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradient accumulators produced by [`Tape::backward`], indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient for `id`, or zeros of the given shape if no gradient flowed
    /// to it (a parameter disconnected from the loss).
    pub fn get_or_zeros(&self, id: VarId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    /// Register a leaf (input, constant, or parameter).
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> VarId {
        self.leaf(Tensor::scalar(value))
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn conv2d(
        &mut self,
        input: VarId,
        kernel: VarId,
        stride: usize,
        padding: Padding,
    ) -> Result<VarId> {
        let out = conv2d(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
        );
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::from_vec(
            ta.shape(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
        );
        Ok(self.push(out, Op::Sub { a, b }))
    }

    /// Hadamard product. `b` must either match `a`'s shape exactly or be a
    /// (W, H) map broadcast over the channel axis of a (W, H, C) tensor.
    pub fn hadamard(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            let out = Tensor::from_vec(
                &sa,
                self.value(a)
                    .data()
                    .iter()
                    .zip(self.value(b).data())
                    .map(|(x, y)| x * y)
                    .collect(),
            );
            return Ok(self.push(out, Op::Mul { a, b }));
        }
        if sa.len() == 3 && sb.len() == 2 && sa[0] == sb[0] && sa[1] == sb[1] {
            let (w, h, c) = (sa[0], sa[1], sa[2]);
            let mut out = Tensor::zeros(&sa);
            for x in 0..w {
                for y in 0..h {
                    let m = self.value(b).data()[x * h + y];
                    for ch in 0..c {
                        let i = (x * h + y) * c + ch;
                        out.data_mut()[i] = self.value(a).data()[i] * m;
                    }
                }
            }
            return Ok(self.push(out, Op::MulBcastSpatial { a, m: b }));
        }
        Err(Error::shape(
            "hadamard",
            format!("shapes {sa:?} and {sb:?} are not broadcastable"),
        ))
    }

    /// Multiply a tensor by a scalar variable.
    pub fn scale(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("scale", "scale factor must be scalar"));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        Ok(self.push(out, Op::ScaleVar { x, s }))
    }

    pub fn scale_const(&mut self, x: VarId, c: f64) -> VarId {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::ScaleConst { x, c })
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let out = self.value(x).map(f64::abs);
        self.push(out, Op::Abs { x })
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn linear(&mut self, x: VarId, w: VarId, b: Option<VarId>) -> Result<VarId> {
        let n = self.value(x).numel();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[0] != n {
            return Err(Error::shape(
                "linear",
                format!("weight {ws:?} incompatible with input of length {n}"),
            ));
        }
        let m = ws[1];
        if let Some(bias) = b {
            if self.shape(bias) != [m] {
                return Err(Error::shape("linear", "bias length mismatch"));
            }
        }
        let mut out = vec![0.0; m];
        for i in 0..n {
            let xi = self.value(x).data()[i];
            for (j, o) in out.iter_mut().enumerate() {
                *o += xi * self.value(w).data()[i * m + j];
            }
        }
        if let Some(bias) = b {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.value(bias).data()[j];
            }
        }
        Ok(self.push(Tensor::from_vec(&[m], out), Op::Linear { x, w, b }))
    }

    pub fn global_avg_pool(&mut self, x: VarId) -> Result<VarId> {
        let (w, h, c) = dims3(self.value(x), "global_avg_pool")?;
        let mut out = vec![0.0; c];
        for xi in 0..w {
            for yi in 0..h {
                for ci in 0..c {
                    out[ci] += self.value(x).at3(xi, yi, ci);
                }
            }
        }
        let scale = 1.0 / (w * h) as f64;
        out.iter_mut().for_each(|v| *v *= scale);
        Ok(self.push(Tensor::from_vec(&[c], out), Op::GlobalAvgPool { x }))
    }

    pub fn kernel_channel_sum(&mut self, k: VarId) -> Result<VarId> {
        let (kw, kh, cin, cout) = dims4(self.value(k), "kernel_channel_sum")?;
        let mut out = vec![0.0; cout];
        for i in 0..kw * kh * cin {
            for (co, o) in out.iter_mut().enumerate() {
                *o += self.value(k).data()[i * cout + co];
            }
        }
        Ok(self.push(Tensor::from_vec(&[cout], out), Op::KernelChannelSum { k }))
    }

    /// Elementwise division with a dead zone: zero wherever |den| < eps.
    pub fn div_guard(&mut self, num: VarId, den: VarId, eps: f64) -> Result<VarId> {
        if self.shape(num) != self.shape(den) {
            return Err(Error::shape(
                "div_guard",
                format!("{:?} vs {:?}", self.shape(num), self.shape(den)),
            ));
        }
        let out = Tensor::from_vec(
            self.shape(num),
            self.value(num)
                .data()
                .iter()
                .zip(self.value(den).data())
                .map(|(n, d)| if d.abs() < eps { 0.0 } else { n / d })
                .collect(),
        );
        Ok(self.push(out, Op::DivGuard { num, den, eps }))
    }

    pub fn bcast_chan(&mut self, v: VarId, w: usize, h: usize) -> Result<VarId> {
        let c = match self.shape(v) {
            [c] => *c,
            s => {
                return Err(Error::shape(
                    "bcast_chan",
                    format!("expected 1-D tensor, got {s:?}"),
                ))
            }
        };
        let mut out = Tensor::zeros(&[w, h, c]);
        for x in 0..w {
            for y in 0..h {
                for ci in 0..c {
                    out.set3(x, y, ci, self.value(v).data()[ci]);
                }
            }
        }
        Ok(self.push(out, Op::BcastChan { v, w, h }))
    }

    pub fn bcast_spatial(&mut self, m: VarId, c: usize) -> Result<VarId> {
        let (w, h) = dims2(self.value(m), "bcast_spatial")?;
        let mut out = Tensor::zeros(&[w, h, c]);
        for x in 0..w {
            for y in 0..h {
                let v = self.value(m).data()[x * h + y];
                for ci in 0..c {
                    out.set3(x, y, ci, v);
                }
            }
        }
        Ok(self.push(out, Op::BcastSpatial { m, c }))
    }

    pub fn concat_chan(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (wa, ha, ca) = dims3(self.value(a), "concat_chan")?;
        let (wb, hb, cb) = dims3(self.value(b), "concat_chan")?;
        if (wa, ha) != (wb, hb) {
            return Err(Error::shape(
                "concat_chan",
                format!("spatial dims {wa}x{ha} vs {wb}x{hb}"),
            ));
        }
        let mut out = Tensor::zeros(&[wa, ha, ca + cb]);
        for x in 0..wa {
            for y in 0..ha {
                for ci in 0..ca {
                    out.set3(x, y, ci, self.value(a).at3(x, y, ci));
                }
                for ci in 0..cb {
                    out.set3(x, y, ca + ci, self.value(b).at3(x, y, ci));
                }
            }
        }
        Ok(self.push(out, Op::ConcatChan { a, b }))
    }

    pub fn upsample_nearest2(&mut self, x: VarId) -> Result<VarId> {
        let (w, h, c) = dims3(self.value(x), "upsample_nearest2")?;
        let mut out = Tensor::zeros(&[2 * w, 2 * h, c]);
        for xo in 0..2 * w {
            for yo in 0..2 * h {
                for ci in 0..c {
                    out.set3(xo, yo, ci, self.value(x).at3(xo / 2, yo / 2, ci));
                }
            }
        }
        Ok(self.push(out, Op::UpsampleNearest2 { x }))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradient accumulators.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::arg(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |grads: &mut [Option<Tensor>], id: VarId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let (gin, gk) =
                    conv2d_grads(self.value(*input), self.value(*kernel), g, *stride, *padding);
                accum(grads, *input, gin);
                accum(grads, *kernel, gk);
            }
            Op::Add { a, b } => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                accum(grads, *a, g.clone());
                accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let ga = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                let gb = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .collect(),
                );
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::MulBcastSpatial { a, m } => {
                let (w, h, c) = (g.shape()[0], g.shape()[1], g.shape()[2]);
                let mut ga = Tensor::zeros(g.shape());
                let mut gm = Tensor::zeros(&[w, h]);
                for x in 0..w {
                    for y in 0..h {
                        let mv = self.value(*m).data()[x * h + y];
                        let mut s = 0.0;
                        for ci in 0..c {
                            let i = (x * h + y) * c + ci;
                            ga.data_mut()[i] = g.data()[i] * mv;
                            s += g.data()[i] * self.value(*a).data()[i];
                        }
                        gm.data_mut()[x * h + y] = s;
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *m, gm);
            }
            Op::ScaleVar { x, s } => {
                let sv = self.value(*s).item();
                let gx = g.map(|v| v * sv);
                let gs: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(a, b)| a * b)
                    .sum();
                accum(grads, *x, gx);
                accum(grads, *s, Tensor::scalar(gs));
            }
            Op::ScaleConst { x, c } => {
                accum(grads, *x, g.map(|v| v * c));
            }
            Op::Tanh { x } => {
                let y = &self.nodes[idx].value;
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect(),
                );
                accum(grads, *x, gx);
            }
            Op::Relu { x } => {
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                accum(grads, *x, gx);
            }
            Op::Abs { x } => {
                let gx = Tensor::from_vec(
                    g.shape(),
                    g.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gv, xv)| gv * xv.signum() * if *xv == 0.0 { 0.0 } else { 1.0 })
                        .collect(),
                );
                accum(grads, *x, gx);
            }
            Op::Sum { x } => {
                let gv = g.item();
                accum(grads, *x, Tensor::filled(self.value(*x).shape(), gv));
            }
            Op::Linear { x, w, b } => {
                let n = self.value(*x).numel();
                let m = g.numel();
                let mut gx = Tensor::zeros(&[n]);
                let mut gw = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    let xi = self.value(*x).data()[i];
                    let mut acc = 0.0;
                    for j in 0..m {
                        let gj = g.data()[j];
                        acc += gj * self.value(*w).data()[i * m + j];
                        gw.data_mut()[i * m + j] = xi * gj;
                    }
                    gx.data_mut()[i] = acc;
                }
                accum(grads, *x, gx);
                accum(grads, *w, gw);
                if let Some(bias) = b {
                    accum(grads, *bias, g.clone());
                }
            }
            Op::GlobalAvgPool { x } => {
                let (w, h, c) = (
                    self.value(*x).shape()[0],
                    self.value(*x).shape()[1],
                    self.value(*x).shape()[2],
                );
                let scale = 1.0 / (w * h) as f64;
                let mut gx = Tensor::zeros(&[w, h, c]);
                for xi in 0..w {
                    for yi in 0..h {
                        for ci in 0..c {
                            gx.set3(xi, yi, ci, g.data()[ci] * scale);
                        }
                    }
                }
                accum(grads, *x, gx);
            }
            Op::KernelChannelSum { k } => {
                let shape = self.value(*k).shape().to_vec();
                let cout = shape[3];
                let mut gk = Tensor::zeros(&shape);
                for i in 0..shape[0] * shape[1] * shape[2] {
                    for co in 0..cout {
                        gk.data_mut()[i * cout + co] = g.data()[co];
                    }
                }
                accum(grads, *k, gk);
            }
            Op::DivGuard { num, den, eps } => {
                let nv = self.value(*num);
                let dv = self.value(*den);
                let mut gn = Tensor::zeros(g.shape());
                let mut gd = Tensor::zeros(g.shape());
                for i in 0..g.numel() {
                    let d = dv.data()[i];
                    if d.abs() >= *eps {
                        gn.data_mut()[i] = g.data()[i] / d;
                        gd.data_mut()[i] = -g.data()[i] * nv.data()[i] / (d * d);
                    }
                }
                accum(grads, *num, gn);
                accum(grads, *den, gd);
            }
            Op::BcastChan { v, w, h } => {
                let c = self.value(*v).numel();
                let mut gv = Tensor::zeros(&[c]);
                for x in 0..*w {
                    for y in 0..*h {
                        for ci in 0..c {
                            gv.data_mut()[ci] += g.data()[(x * h + y) * c + ci];
                        }
                    }
                }
                accum(grads, *v, gv);
            }
            Op::BcastSpatial { m, c } => {
                let (w, h) = (self.value(*m).shape()[0], self.value(*m).shape()[1]);
                let mut gm = Tensor::zeros(&[w, h]);
                for x in 0..w {
                    for y in 0..h {
                        let mut s = 0.0;
                        for ci in 0..*c {
                            s += g.data()[(x * h + y) * c + ci];
                        }
                        gm.data_mut()[x * h + y] = s;
                    }
                }
                accum(grads, *m, gm);
            }
            Op::ConcatChan { a, b } => {
                let (w, h, ca) = (
                    self.value(*a).shape()[0],
                    self.value(*a).shape()[1],
                    self.value(*a).shape()[2],
                );
                let cb = self.value(*b).shape()[2];
                let mut ga = Tensor::zeros(&[w, h, ca]);
                let mut gb = Tensor::zeros(&[w, h, cb]);
                for x in 0..w {
                    for y in 0..h {
                        for ci in 0..ca {
                            ga.set3(x, y, ci, g.data()[(x * h + y) * (ca + cb) + ci]);
                        }
                        for ci in 0..cb {
                            gb.set3(x, y, ci, g.data()[(x * h + y) * (ca + cb) + ca + ci]);
                        }
                    }
                }
                accum(grads, *a, ga);
                accum(grads, *b, gb);
            }
            Op::UpsampleNearest2 { x } => {
                let (w, h, c) = (
                    self.value(*x).shape()[0],
                    self.value(*x).shape()[1],
                    self.value(*x).shape()[2],
                );
                let mut gx = Tensor::zeros(&[w, h, c]);
                for xo in 0..2 * w {
                    for yo in 0..2 * h {
                        for ci in 0..c {
                            let i = (xo * 2 * h + yo) * c + ci;
                            gx.data_mut()[(xo / 2 * h + yo / 2) * c + ci] += g.data()[i];
                        }
                    }
                }
                accum(grads, *x, gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central finite differences of a scalar function of one flat input.
    fn numeric_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            buf[i] = x[i] + h;
            let fp = f(&buf);
            buf[i] = x[i] - h;
            let fm = f(&buf);
            buf[i] = x[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
        out
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn grad_of_weighted_sum_is_the_other_factor() {
        let mut tape = Tape::new();
        let w = tape.leaf(Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]));
        let x = tape.leaf(Tensor::from_vec(&[3], vec![3.0, 4.0, 5.0]));
        let prod = tape.hadamard(w, x).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn hadamard_examples() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(Tensor::from_vec(&[3], vec![2.0, 0.0, 4.0]));
        let out = tape.hadamard(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 0.0, 12.0]);

        let ones = tape.leaf(Tensor::ones(&[3]));
        let same = tape.hadamard(a, ones).unwrap();
        assert_eq!(tape.value(same).data(), &[1.0, 2.0, 3.0]);

        let zeros = tape.leaf(Tensor::zeros(&[3]));
        let zeroed = tape.hadamard(a, zeros).unwrap();
        assert!(tape.value(zeroed).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hadamard_rejects_non_broadcastable() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 2, 1]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        assert!(tape.hadamard(a, b).is_err());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn disconnected_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let used = tape.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        let loss = tape.sum(used);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.get_or_zeros(unused, &[2]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn conv_kernel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let input = random_tensor(&mut rng, &[5, 5, 2]);
        let kernel0 = random_tensor(&mut rng, &[3, 3, 2, 2]);

        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let k = tape.leaf(kernel0.clone());
        let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();

        let mut f = |kd: &[f64]| -> f64 {
            let kt = Tensor::from_vec(kernel0.shape(), kd.to_vec());
            conv2d(&input, &kt, 1, Padding::Same)
                .unwrap()
                .data()
                .iter()
                .sum()
        };
        let fd = numeric_grad(&mut f, kernel0.data(), 1e-5);
        assert!(max_rel_err(grads.get(k).unwrap().data(), &fd) < 1e-4);
    }

    #[test]
    fn elementwise_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = random_tensor(&mut rng, &[6]);

        // loss = sum(|tanh(x)| + relu(x) * x)
        let eval = |xd: &[f64]| -> (f64, Option<Vec<f64>>) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(&[6], xd.to_vec()));
            let t = tape.tanh(x);
            let a = tape.abs(t);
            let r = tape.relu(x);
            let rx = tape.hadamard(r, x).unwrap();
            let s = tape.add(a, rx).unwrap();
            let loss = tape.sum(s);
            let v = tape.value(loss).item();
            let g = tape
                .backward(loss)
                .unwrap()
                .get(x)
                .map(|t| t.data().to_vec());
            (v, g)
        };
        let (_, g) = eval(x0.data());
        let mut f = |xd: &[f64]| eval(xd).0;
        let fd = numeric_grad(&mut f, x0.data(), 1e-5);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn three_op_composition_matches_finite_differences_end_to_end() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let input = random_tensor(&mut rng, &[6, 6, 1]);
        let k1 = random_tensor(&mut rng, &[3, 3, 1, 2]);
        let k2 = random_tensor(&mut rng, &[3, 3, 2, 2]);
        let w = random_tensor(&mut rng, &[2, 2]);

        let eval = |params: &[f64]| -> (f64, Option<Vec<f64>>) {
            let (k1d, rest) = params.split_at(k1.numel());
            let (k2d, wd) = rest.split_at(k2.numel());
            let mut tape = Tape::new();
            let x = tape.leaf(input.clone());
            let k1v = tape.leaf(Tensor::from_vec(k1.shape(), k1d.to_vec()));
            let k2v = tape.leaf(Tensor::from_vec(k2.shape(), k2d.to_vec()));
            let wv = tape.leaf(Tensor::from_vec(w.shape(), wd.to_vec()));
            let h1 = tape.conv2d(x, k1v, 2, Padding::Same).unwrap();
            let h1r = tape.relu(h1);
            let h2 = tape.conv2d(h1r, k2v, 1, Padding::Same).unwrap();
            let pooled = tape.global_avg_pool(h2).unwrap();
            let out = tape.linear(pooled, wv, None).unwrap();
            let loss = tape.sum(out);
            let v = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            let mut flat = Vec::new();
            for id in [k1v, k2v, wv] {
                flat.extend_from_slice(
                    grads
                        .get_or_zeros(id, tape.value(id).shape())
                        .data(),
                );
            }
            (v, Some(flat))
        };

        let mut p0 = Vec::new();
        p0.extend_from_slice(k1.data());
        p0.extend_from_slice(k2.data());
        p0.extend_from_slice(w.data());
        let (_, g) = eval(&p0);
        let mut f = |pd: &[f64]| eval(pd).0;
        let fd = numeric_grad(&mut f, &p0, 1e-5);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn div_guard_zeroes_dead_cells_and_differentiates_live_ones() {
        let mut tape = Tape::new();
        let num = tape.leaf(Tensor::from_vec(&[3], vec![2.0, 3.0, 4.0]));
        let den = tape.leaf(Tensor::from_vec(&[3], vec![4.0, 0.0, 2.0]));
        let q = tape.div_guard(num, den, 1e-12).unwrap();
        assert_eq!(tape.value(q).data(), &[0.5, 0.0, 2.0]);
        let loss = tape.sum(q);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(num).unwrap().data(), &[0.25, 0.0, 0.5]);
        assert_eq!(grads.get(den).unwrap().data(), &[-0.125, 0.0, -1.0]);
    }

    #[test]
    fn broadcast_and_upsample_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x0 = random_tensor(&mut rng, &[2, 3, 2]);
        let m0 = random_tensor(&mut rng, &[2, 3]);
        let v0 = random_tensor(&mut rng, &[2]);

        let eval = |params: &[f64]| -> (f64, Option<Vec<f64>>) {
            let (xd, rest) = params.split_at(x0.numel());
            let (md, vd) = rest.split_at(m0.numel());
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::from_vec(x0.shape(), xd.to_vec()));
            let m = tape.leaf(Tensor::from_vec(m0.shape(), md.to_vec()));
            let v = tape.leaf(Tensor::from_vec(v0.shape(), vd.to_vec()));
            let masked = tape.hadamard(x, m).unwrap();
            let vb = tape.bcast_chan(v, 2, 3).unwrap();
            let mixed = tape.hadamard(masked, vb).unwrap();
            let up = tape.upsample_nearest2(mixed).unwrap();
            let loss = tape.sum(up);
            let val = tape.value(loss).item();
            let grads = tape.backward(loss).unwrap();
            let mut flat = Vec::new();
            for id in [x, m, v] {
                flat.extend_from_slice(grads.get_or_zeros(id, tape.value(id).shape()).data());
            }
            (val, Some(flat))
        };

        let mut p0 = Vec::new();
        p0.extend_from_slice(x0.data());
        p0.extend_from_slice(m0.data());
        p0.extend_from_slice(v0.data());
        let (_, g) = eval(&p0);
        let mut f = |pd: &[f64]| eval(pd).0;
        let fd = numeric_grad(&mut f, &p0, 1e-5);
        assert!(max_rel_err(&g.unwrap(), &fd) < 1e-4);
    }
}
