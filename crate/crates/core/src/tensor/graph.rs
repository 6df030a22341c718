use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

/// Elementwise maps with a registered derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pointwise {
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    Sigmoid,
    Exp,
    /// Strictly positive inputs only.
    Log,
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Conv3d { x: Var, k: Var, geom: ConvGeom },
    Conv1x1 { x: Var, w: Var },
    Map(Var, Pointwise),
    Add(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias { x: Var, b: Var, axis: usize },
    Concat(Var, Var),
    Upsample2x(Var),
    Reshape(Var),
    Sum(Var),
    ChannelSum(Var),
    LogSoftmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op,
}

/// A recorded computation. Nodes are stored in creation order, so every
/// node's inputs precede it and a reverse sweep is a topological traversal.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Splits `[B, C, rest...]` into `(B, C, prod(rest))`.
fn bcs(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, inputs: &[Var], recorded: Op) -> Result<Var> {
        check_finite(op, &value)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, requires_grad, op: recorded });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        check_finite("leaf", &value)?;
        self.nodes.push(Node { value, requires_grad, op: Op::Leaf });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: &Tensor<T>) -> Result<Var> {
        self.leaf(value.clone(), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Clears all gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let t = Tensor::new(vec![m, n], out)?;
        self.push("matmul", t, &[a, b], Op::Matmul(a, b))
    }

    /// 3x3x3 cross-correlation with zero padding.
    pub fn conv3d(&mut self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sk.len() != 5 || sk[2..] != [3, 3, 3] {
            return Err(Error::KernelSize(sk));
        }
        if sx.len() != 5 || sx[1] != sk[1] {
            return Err(Error::shape("conv3d", format!("input {:?} vs kernel {:?}", sx, sk)));
        }
        if stride == 0 {
            return Err(Error::shape("conv3d", "stride must be positive"));
        }
        let mut out = [0; 3];
        for a in 0..3 {
            out[a] = kernels::conv_out_extent(sx[2 + a], stride, padding).ok_or_else(|| Error::shape("conv3d", format!("input {:?} too small", sx)))?;
        }
        let geom = ConvGeom { batch: sx[0], cin: sx[1], cout: sk[0], dims: [sx[2], sx[3], sx[4]], out, stride, pad: padding };
        let data = kernels::conv3d_forward(&geom, self.value(x).data(), self.value(k).data());
        let t = Tensor::new(vec![sx[0], sk[0], out[0], out[1], out[2]], data)?;
        self.push("conv3d", t, &[x, k], Op::Conv3d { x, k, geom })
    }

    /// Channel mixing: `x` is `[B, Cin, ...]`, `w` is `[Cout, Cin]` or `[Cout, Cin, 1, 1, 1]`.
    pub fn conv1x1(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let square = sw.len() == 2 || (sw.len() == 5 && sw[2..] == [1, 1, 1]);
        if !square || sx.len() < 2 || sw[1] != sx[1] {
            return Err(Error::shape("conv1x1", format!("input {:?} vs weight {:?}", sx, sw)));
        }
        let (b, cin, s) = bcs(&sx);
        let data = kernels::conv1x1_forward(b, cin, sw[0], s, self.value(x).data(), self.value(w).data());
        let mut shape = sx.clone();
        shape[1] = sw[0];
        let t = Tensor::new(shape, data)?;
        self.push("conv1x1", t, &[x, w], Op::Conv1x1 { x, w })
    }

    pub fn map(&mut self, x: Var, kind: Pointwise) -> Result<Var> {
        let v = self.value(x);
        let t = match kind {
            Pointwise::Relu => v.map(|a| if a > T::zero() { a } else { T::zero() }),
            Pointwise::LeakyRelu => {
                let s = T::of(LEAKY_SLOPE);
                v.map(|a| if a > T::zero() { a } else { s * a })
            }
            Pointwise::Sigmoid => v.map(|a| T::one() / (T::one() + (-a).exp())),
            Pointwise::Exp => v.map(|a| a.exp()),
            Pointwise::Log => {
                if let Some(bad) = v.data().iter().find(|&&a| a <= T::zero()) {
                    return Err(Error::Domain { op: "log", detail: format!("argument {:?} <= 0", bad) });
                }
                v.map(|a| a.ln())
            }
            Pointwise::Scale(c) => {
                let c = T::of(c);
                v.map(|a| a * c)
            }
            Pointwise::AddScalar(c) => {
                let c = T::of(c);
                v.map(|a| a + c)
            }
        };
        self.push("pointwise", t, &[x], Op::Map(x, kind))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::Relu)
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Pointwise::LeakyRelu)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Pointwise::Scale(c))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        self.push("add", t, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        self.push("mul", t, &[a, b], Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| x / y)?;
        self.push("div", t, &[a, b], Op::Div(a, b))
    }

    /// Adds a vector along `axis` (broadcast over every other axis).
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(Error::shape("add_bias", format!("{:?} + {:?} on axis {}", sx, sb, axis)));
        }
        let inner: usize = sx[axis + 1..].iter().product();
        let n = sx[axis];
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = bias[i % n];
            chunk.iter_mut().for_each(|v| *v = *v + bv);
        }
        let t = Tensor::new(sx, data)?;
        self.push("add_bias", t, &[x, b], Op::AddBias { x, b, axis })
    }

    /// Concatenation along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", sa, sb)));
        }
        let (batch, ca, s) = bcs(&sa);
        let cb = sb[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(batch * (ca + cb) * s);
        for i in 0..batch {
            data.extend_from_slice(&va[i * ca * s..(i + 1) * ca * s]);
            data.extend_from_slice(&vb[i * cb * s..(i + 1) * cb * s]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        let t = Tensor::new(shape, data)?;
        self.push("concat_channels", t, &[a, b], Op::Concat(a, b))
    }

    /// Trilinear doubling of the three trailing axes of `[B, C, D, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 5 || sx[2..].iter().any(|&n| n == 0) {
            return Err(Error::shape("upsample_trilinear", format!("{:?}", sx)));
        }
        let dims = [sx[2], sx[3], sx[4]];
        let new = [2 * sx[2], 2 * sx[3], 2 * sx[4]];
        let data = kernels::resize3(self.value(x).data(), sx[0] * sx[1], dims, new);
        let t = Tensor::new(vec![sx[0], sx[1], new[0], new[1], new[2]], data)?;
        self.push("upsample_trilinear", t, &[x], Op::Upsample2x(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push("reshape", t, &[x], Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push("sum", Tensor::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// `[B, C, ...] -> [C]`, summing over batch and trailing axes.
    pub fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("channel_sum", format!("{:?}", sx)));
        }
        let (batch, c, s) = bcs(&sx);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); c];
        for b in 0..batch {
            for (k, o) in out.iter_mut().enumerate() {
                let row = &v[(b * c + k) * s..(b * c + k + 1) * s];
                *o = *o + row.iter().fold(T::zero(), |a, &x| a + x);
            }
        }
        self.push("channel_sum", Tensor::new(vec![c], out)?, &[x], Op::ChannelSum(x))
    }

    /// Log-softmax over axis 1.
    pub fn log_softmax_channels(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(Error::shape("log_softmax", format!("{:?}", sx)));
        }
        let (batch, c, s) = bcs(&sx);
        let v = self.value(x).data();
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            let base = b * c * s;
            for i in 0..s {
                let mut m = T::neg_infinity();
                for k in 0..c {
                    m = m.max(v[base + k * s + i]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    z = z + (v[base + k * s + i] - m).exp();
                }
                let lse = m + z.ln();
                for k in 0..c {
                    out[base + k * s + i] = v[base + k * s + i] - lse;
                }
            }
        }
        self.push("log_softmax", Tensor::new(sx, out)?, &[x], Op::LogSoftmax(x))
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// into every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(&mut self, v: Var, g: Tensor<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(a) {
                    let bv = self.value(b).data();
                    let mut ga = vec![T::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            ga[r * k + p] = kernels::dot(&gd[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(a, Tensor::new(sa, ga)?);
                }
                if self.wants(b) {
                    let av = self.value(a).data();
                    let mut gb = vec![T::zero(); k * n];
                    for r in 0..m {
                        for p in 0..k {
                            kernels::axpy(&mut gb[p * n..(p + 1) * n], av[r * k + p], &gd[r * n..(r + 1) * n]);
                        }
                    }
                    self.accumulate(b, Tensor::new(sb, gb)?);
                }
            }
            Op::Conv3d { x, k, geom } => {
                if self.wants(x) {
                    let gx = kernels::conv3d_backward_input(&geom, gd, self.value(k).data());
                    let shape = self.shape(x).to_vec();
                    self.accumulate(x, Tensor::new(shape, gx)?);
                }
                if self.wants(k) {
                    let gk = kernels::conv3d_backward_kernel(&geom, gd, self.value(x).data());
                    let shape = self.shape(k).to_vec();
                    self.accumulate(k, Tensor::new(shape, gk)?);
                }
            }
            Op::Conv1x1 { x, w } => {
                let sx = self.shape(x).to_vec();
                let sw = self.shape(w).to_vec();
                let (b, cin, s) = bcs(&sx);
                let (gx, gw) = kernels::conv1x1_backward(b, cin, sw[0], s, self.value(x).data(), self.value(w).data(), gd, self.wants(x), self.wants(w));
                if let Some(gx) = gx {
                    self.accumulate(x, Tensor::new(sx, gx)?);
                }
                if let Some(gw) = gw {
                    self.accumulate(w, Tensor::new(sw, gw)?);
                }
            }
            Op::Map(x, kind) => {
                let xv = self.value(x).data();
                let yv = self.nodes[i].value.data();
                let d: Vec<T> = match kind {
                    Pointwise::Relu => xv.iter().zip(gd).map(|(&a, &g)| if a > T::zero() { g } else { T::zero() }).collect(),
                    Pointwise::LeakyRelu => {
                        let s = T::of(LEAKY_SLOPE);
                        xv.iter().zip(gd).map(|(&a, &g)| if a > T::zero() { g } else { s * g }).collect()
                    }
                    Pointwise::Sigmoid => yv.iter().zip(gd).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                    Pointwise::Exp => yv.iter().zip(gd).map(|(&y, &g)| g * y).collect(),
                    Pointwise::Log => xv.iter().zip(gd).map(|(&a, &g)| g / a).collect(),
                    Pointwise::Scale(c) => {
                        let c = T::of(c);
                        gd.iter().map(|&g| g * c).collect()
                    }
                    Pointwise::AddScalar(_) => gd.to_vec(),
                };
                let shape = self.shape(x).to_vec();
                self.accumulate(x, Tensor::new(shape, d)?);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let t = self.value(b).data().iter().zip(gd).map(|(&y, &g)| g * y).collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), t)?);
                }
                if self.wants(b) {
                    let t = self.value(a).data().iter().zip(gd).map(|(&x, &g)| g * x).collect();
                    self.accumulate(b, Tensor::new(g.shape().to_vec(), t)?);
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    let t = self.value(b).data().iter().zip(gd).map(|(&y, &g)| g / y).collect();
                    self.accumulate(a, Tensor::new(g.shape().to_vec(), t)?);
                }
                if self.wants(b) {
                    let (av, bv) = (self.value(a).data(), self.value(b).data());
                    let t = av.iter().zip(bv).zip(gd).map(|((&x, &y), &g)| -g * x / (y * y)).collect();
                    self.accumulate(b, Tensor::new(g.shape().to_vec(), t)?);
                }
            }
            Op::AddBias { x, b, axis } => {
                self.accumulate(x, g.clone());
                if self.wants(b) {
                    let sx = g.shape();
                    let inner: usize = sx[axis + 1..].iter().product();
                    let n = sx[axis];
                    let mut gb = vec![T::zero(); n];
                    for (j, chunk) in gd.chunks(inner).enumerate() {
                        gb[j % n] = gb[j % n] + chunk.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    self.accumulate(b, Tensor::new(vec![n], gb)?);
                }
            }
            Op::Concat(a, b) => {
                let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
                let (batch, ca, s) = bcs(&sa);
                let cb = sb[1];
                let mut ga = Vec::with_capacity(batch * ca * s);
                let mut gb = Vec::with_capacity(batch * cb * s);
                for n in 0..batch {
                    let base = n * (ca + cb) * s;
                    ga.extend_from_slice(&gd[base..base + ca * s]);
                    gb.extend_from_slice(&gd[base + ca * s..base + (ca + cb) * s]);
                }
                self.accumulate(a, Tensor::new(sa, ga)?);
                self.accumulate(b, Tensor::new(sb, gb)?);
            }
            Op::Upsample2x(x) => {
                let sx = self.shape(x).to_vec();
                let dims = [sx[2], sx[3], sx[4]];
                let new = [2 * sx[2], 2 * sx[3], 2 * sx[4]];
                let gx = kernels::resize3_adjoint(gd, sx[0] * sx[1], dims, new);
                self.accumulate(x, Tensor::new(sx, gx)?);
            }
            Op::Reshape(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, g.clone().reshape(&shape)?);
            }
            Op::Sum(x) => {
                let shape = self.shape(x).to_vec();
                self.accumulate(x, Tensor::full(&shape, gd[0]));
            }
            Op::ChannelSum(x) => {
                let sx = self.shape(x).to_vec();
                let (batch, c, s) = bcs(&sx);
                let mut gx = Vec::with_capacity(batch * c * s);
                for _ in 0..batch {
                    for &gk in gd.iter().take(c) {
                        gx.extend(std::iter::repeat_n(gk, s));
                    }
                }
                self.accumulate(x, Tensor::new(sx, gx)?);
            }
            Op::LogSoftmax(x) => {
                let sx = self.shape(x).to_vec();
                let (batch, c, s) = bcs(&sx);
                let y = self.nodes[i].value.data();
                let mut gx = vec![T::zero(); y.len()];
                for b in 0..batch {
                    let base = b * c * s;
                    for v in 0..s {
                        let mut total = T::zero();
                        for k in 0..c {
                            total = total + gd[base + k * s + v];
                        }
                        for k in 0..c {
                            let j = base + k * s + v;
                            gx[j] = gd[j] - y[j].exp() * total;
                        }
                    }
                }
                self.accumulate(x, Tensor::new(sx, gx)?);
            }
        }
        Ok(())
    }
}
