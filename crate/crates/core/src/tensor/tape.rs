use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    Relu(Var),
    GlobalAvgPool(Var),
    AvgPool2(Var),
    Reshape(Var),
    LogSoftmax(Var),
    Gather(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MaxLast(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op,
}

/// Gradients of a scalar with respect to the differentiable leaves of a tape.
#[derive(Debug, Clone)]
pub struct GradientMap<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Float> GradientMap<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of a computation. Inputs of every node precede it, so
/// the graph is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        match vars.iter().find(|v| v.0 >= self.nodes.len()) {
            Some(v) => Err(Error::UnknownVar(v.0)),
            None => Ok(()),
        }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// `b` must equal `a`'s shape or one of its suffixes; it is then broadcast
    /// over the leading axes of `a`.
    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("cannot broadcast {sb:?} onto {sa:?}")));
        }
        Ok(())
    }

    fn binary_broadcast(&mut self, a: Var, b: Var, sign: f64, op: Op, name: &'static str) -> Result<Var> {
        self.check(&[a, b])?;
        self.broadcast_check(name, a, b)?;
        let sign = T::from_f(sign);
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, &y) in chunk.iter_mut().zip(bv) {
                *o += sign * y;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, 1.0, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast(a, b, -1.0, Op::Sub(a, b), "sub")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(&[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x / y).collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.check(&[a])?;
        let f = T::from_f(factor);
        let out = self.value(a).map(|v| v * f);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Scale(a, factor)))
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", format!("expected rank-2 operands, got {sa:?} and {sb:?}")));
        }
        if sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("inner dimension {} vs {}", sa[1], sb[0])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), out.data_mut(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::MatMul(a, b)))
    }

    /// Cross-correlation of `input` (`[n,cin,h,w]` or `[cin,h,w]`) with
    /// `kernel` (`[cout,cin,k,k]`) plus a per-channel `bias`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(&[input, kernel, bias])?;
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let sb = self.shape(bias).to_vec();
        let batched = match si.len() {
            4 => true,
            3 => false,
            r => return Err(Error::shape("conv2d", format!("input rank {r}, expected 3 or 4"))),
        };
        let (n, cin, h, w) = if batched { (si[0], si[1], si[2], si[3]) } else { (1, si[0], si[1], si[2]) };
        if sk.len() != 4 {
            return Err(Error::shape("conv2d", format!("kernel rank {}, expected 4", sk.len())));
        }
        if sk[1] != cin {
            return Err(Error::shape("conv2d", format!("input channels: input has {cin}, kernel expects {}", sk[1])));
        }
        if sk[2] != sk[3] {
            return Err(Error::shape("conv2d", format!("kernel height {} != kernel width {}", sk[2], sk[3])));
        }
        if sb != [sk[0]] {
            return Err(Error::shape("conv2d", format!("bias shape {sb:?}, expected [{}]", sk[0])));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let k = sk[2];
        if k > h + 2 * pad {
            return Err(Error::shape("conv2d", format!("height: kernel {k} exceeds padded input {}", h + 2 * pad)));
        }
        if k > w + 2 * pad {
            return Err(Error::shape("conv2d", format!("width: kernel {k} exceeds padded input {}", w + 2 * pad)));
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout: sk[0],
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        };
        let out_shape =
            if batched { vec![n, geom.cout, geom.oh, geom.ow] } else { vec![geom.cout, geom.oh, geom.ow] };
        let mut out = Tensor::zeros(&out_shape);
        kernels::conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
            out.data_mut(),
        );
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(out, rg, Op::Conv2d { input, kernel, bias, geom }))
    }

    /// Rectifier; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Relu(a)))
    }

    /// `[n,c,h,w] -> [n,c]`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("expected [n,c,h,w], got {s:?}")));
        }
        let plane = s[2] * s[3];
        if plane == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::from_f(1.0 / plane as f64);
        let data = self.value(a).data().chunks(plane).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::new(vec![s[0], s[1]], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::GlobalAvgPool(a)))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/cols are dropped.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::shape("avg_pool2", format!("expected [n,c,h>=2,w>=2], got {s:?}")));
        }
        let (h, w, oh, ow) = (s[2], s[3], s[2] / 2, s[3] / 2);
        let x = self.value(a).data();
        let quarter = T::from_f(0.25);
        let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
        for (p, o) in out.data_mut().chunks_mut(oh * ow).enumerate() {
            let src = &x[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y, xx) = (2 * oy, 2 * ox);
                    o[oy * ow + ox] =
                        (src[y * w + xx] + src[y * w + xx + 1] + src[(y + 1) * w + xx] + src[(y + 1) * w + xx + 1])
                            * quarter;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::AvgPool2(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Reshape(a)))
    }

    /// Row-wise log-softmax of a `[n,c]` tensor.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("log_softmax", format!("expected [n,c>0], got {s:?}")));
        }
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_mut(s[1]) {
            // log-sum-exp around the row max; the max term contributes exactly 1
            let top = row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best });
            let m = row[top];
            let rest: T = row.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, &v)| (v - m).exp()).sum();
            let lse = rest.ln_1p();
            row.iter_mut().for_each(|v| *v = (*v - m) - lse);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::LogSoftmax(a)))
    }

    /// Picks `a[i, index[i]]` from a `[n,c]` tensor.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            return Err(Error::shape("gather", format!("{} indices for tensor {s:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= s[1]) {
            return Err(Error::shape("gather", format!("index {bad} out of range for {} columns", s[1])));
        }
        let x = self.value(a);
        let data = index.iter().enumerate().map(|(i, &j)| x.data()[i * s[1] + j]).collect();
        let out = Tensor::new(vec![s[0]], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Gather(a, index.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).data().iter().copied().sum::<T>() / T::from_f(n as f64));
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::Mean(a)))
    }

    /// Row maximum of a `[n,c]` tensor; the gradient flows to the first
    /// maximal entry.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape("max", format!("expected [n,c>0], got {s:?}")));
        }
        let x = self.value(a).data();
        let argmax: Vec<usize> = x
            .chunks(s[1])
            .map(|row| row.iter().enumerate().fold(0, |best, (j, &v)| if v > row[best] { j } else { best }))
            .collect();
        let data = argmax.iter().enumerate().map(|(i, &j)| x[i * s[1] + j]).collect();
        let out = Tensor::new(vec![s[0]], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, rg, Op::MaxLast(a, argmax)))
    }

    /// Reverse-mode sweep from a scalar `loss`. The tape is not modified, so
    /// repeated calls return identical maps.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        self.check(&[loss])?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .filter_map(|(i, g)| {
                let node = &self.nodes[i];
                (matches!(node.op, Op::Leaf) && node.requires_grad).then(|| (Var(i), g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))))
            })
            .collect();
        Ok(GradientMap { grads })
    }

    /// Gradient slot of `v`, allocated on first use; `None` if `v` is not differentiable.
    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut())
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len().max(1);
                    for chunk in gd.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(o, &v)| *o += sign * v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += v * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, &v), &x) in gb.iter_mut().zip(gd).zip(av) {
                        *o += v * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &v), &y) in ga.iter_mut().zip(gd).zip(bv) {
                        *o += v / y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (((o, &v), &x), &y) in gb.iter_mut().zip(gd).zip(av).zip(bv) {
                        *o -= v * x / (y * y);
                    }
                }
            }
            Op::Scale(a, f) => {
                let f = T::from_f(*f);
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(o, &v)| *o += v * f);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_grad_a(gd, bv, ga, m, k, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_grad_b(av, gd, gb, m, k, n);
                }
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let wv = self.value(*kernel).data();
                if let Some(gi) = self.slot(grads, *input) {
                    kernels::conv_backward_input(geom, gd, wv, gi);
                }
                let xv = self.value(*input).data();
                if let Some(dw) = self.slot(grads, *kernel) {
                    kernels::conv_backward_params(geom, gd, xv, Some(dw), None);
                }
                if let Some(gbias) = self.slot(grads, *bias) {
                    kernels::conv_backward_params(geom, gd, xv, None, Some(gbias));
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &v), &x) in ga.iter_mut().zip(gd).zip(av) {
                        if x > T::zero() {
                            *o += v;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                let s = self.shape(*a);
                let plane = s[2] * s[3];
                let inv = T::from_f(1.0 / plane as f64);
                if let Some(ga) = self.slot(grads, *a) {
                    for (chunk, &v) in ga.chunks_mut(plane).zip(gd) {
                        chunk.iter_mut().for_each(|o| *o += v * inv);
                    }
                }
            }
            Op::AvgPool2(a) => {
                let s = self.shape(*a);
                let (h, w, oh, ow) = (s[2], s[3], s[2] / 2, s[3] / 2);
                let quarter = T::from_f(0.25);
                if let Some(ga) = self.slot(grads, *a) {
                    for (p, gsrc) in gd.chunks(oh * ow).enumerate() {
                        let dst = &mut ga[p * h * w..(p + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let v = gsrc[oy * ow + ox] * quarter;
                                let (y, x) = (2 * oy, 2 * ox);
                                dst[y * w + x] += v;
                                dst[y * w + x + 1] += v;
                                dst[(y + 1) * w + x] += v;
                                dst[(y + 1) * w + x + 1] += v;
                            }
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(gd).for_each(|(o, &v)| *o += v);
                }
            }
            Op::LogSoftmax(a) => {
                let c = self.shape(*a)[1];
                let out = node.value.data();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((grow, orow), dst) in gd.chunks(c).zip(out.chunks(c)).zip(ga.chunks_mut(c)) {
                        let total: T = grow.iter().copied().sum();
                        for ((d, &gv), &lp) in dst.iter_mut().zip(grow).zip(orow) {
                            *d += gv - lp.exp() * total;
                        }
                    }
                }
            }
            Op::Gather(a, index) | Op::MaxLast(a, index) => {
                let c = self.shape(*a)[1];
                if let Some(ga) = self.slot(grads, *a) {
                    for (i, (&j, &v)) in index.iter().zip(gd).enumerate() {
                        ga[i * c + j] += v;
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let n = self.value(*a).numel();
                let v = if matches!(node.op, Op::Mean(_)) { gd[0] / T::from_f(n as f64) } else { gd[0] };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|o| *o += v);
                }
            }
        }
    }
}
