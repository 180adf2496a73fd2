//! The computation tape. Every operation appends a node holding its forward
//! value and enough saved state to run its vector-Jacobian product; nodes are
//! only ever appended, so creation order is a topological order and
//! [`Tape::backward`] visits them in reverse.

use crate::conv::{self, ConvSpec, Needs, PaddingMode};
use crate::error::AutodiffError;
use crate::norm::{self, GrnSaved, LayerNormSaved};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Depthwise { x: Var, w: Var, b: Option<Var>, mode: PaddingMode },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: LayerNormSaved<T> },
    Grn { x: Var, gamma: Var, beta: Var, saved: GrnSaved<T> },
    Gelu { x: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, T),
    MulSample { x: Var, s: Var },
    Plane { s: Var },
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    MeanSquare(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    /// Accumulated gradients of `requires_grad` leaves.
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(a: Shape, b: Shape, what: &str) -> Result<(), AutodiffError> {
    if a != b {
        return Err(AutodiffError::Shape(format!("{what}: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * half).exp();
    cdf + x * pdf
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), leaf_grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.rg(v))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or zeros when it was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<T> {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, AutodiffError> {
        let out = conv::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.rg(x) || self.rg(w) || self.rg_opt(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }, rg))
    }

    /// Channel mixing at every pixel: `w` is `[out, in, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let ws = self.shape(w);
        if ws[2] != 1 || ws[3] != 1 {
            return Err(AutodiffError::Shape(format!("linear weight must be [out, in, 1, 1], got {ws:?}")));
        }
        self.conv2d(x, w, b, ConvSpec { stride: 1, padding: 0, mode: PaddingMode::Zero })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var, AutodiffError> {
        let out = conv::conv_transpose2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        let rg = self.rg(x) || self.rg(w) || self.rg_opt(b);
        Ok(self.push(out, Op::ConvTranspose2d { x, w, b, spec }, rg))
    }

    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, mode: PaddingMode) -> Result<Var, AutodiffError> {
        let out = conv::depthwise_conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), mode)?;
        let rg = self.rg(x) || self.rg(w) || self.rg_opt(b);
        Ok(self.push(out, Op::Depthwise { x, w, b, mode }, rg))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (out, saved) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, saved }, rg))
    }

    pub fn grn(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, AutodiffError> {
        let (out, saved) = norm::grn(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::Grn { x, gamma, beta, saved }, rg))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = Tensor::from_vec(src.shape(), src.data().iter().map(|&v| gelu(v)).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Gelu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::from_vec(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let src = self.value(x);
        let out = Tensor::from_vec(src.shape(), src.data().iter().map(|&v| v * c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Multiply every value of sample `b` by `s[b]`; `s` has shape `[B, 1, 1, 1]`.
    pub fn mul_per_sample(&mut self, x: Var, s: Var) -> Result<Var, AutodiffError> {
        let xs = self.shape(x);
        let ss = self.shape(s);
        if ss != [xs[0], 1, 1, 1] {
            return Err(AutodiffError::Shape(format!("per-sample scale {ss:?} for input {xs:?}")));
        }
        let src = self.value(x);
        let sl = src.sample_len();
        let sv = self.value(s).data();
        let data = src.data().iter().enumerate().map(|(i, &v)| v * sv[i / sl]).collect();
        let out = Tensor::from_vec(xs, data)?;
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, Op::MulSample { x, s }, rg))
    }

    /// Broadcast scalars to constant planes: `s` is `[B, 1, 1, 1]` or
    /// `[1, 1, 1, 1]`; the result is `[batch, 1, h, w]`.
    pub fn plane(&mut self, s: Var, batch: usize, h: usize, w: usize) -> Result<Var, AutodiffError> {
        let ss = self.shape(s);
        if ss[1..] != [1, 1, 1] || (ss[0] != 1 && ss[0] != batch) {
            return Err(AutodiffError::Shape(format!("cannot broadcast {ss:?} to batch {batch}")));
        }
        let sv = self.value(s).data();
        let plane = h * w;
        let mut data = Vec::with_capacity(batch * plane);
        for b in 0..batch {
            let v = if ss[0] == 1 { sv[0] } else { sv[b] };
            data.extend(std::iter::repeat_n(v, plane));
        }
        let out = Tensor::from_vec([batch, 1, h, w], data)?;
        let rg = self.rg(s);
        Ok(self.push(out, Op::Plane { s }, rg))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = parts.first().ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?;
        let [bs, _, h, w] = self.shape(*first);
        let mut channels = 0;
        for &p in parts {
            let [pb, pc, ph, pw] = self.shape(p);
            if (pb, ph, pw) != (bs, h, w) {
                return Err(AutodiffError::Shape(format!("concat part {:?} vs [{bs}, _, {h}, {w}]", self.shape(p))));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(bs * channels * h * w);
        for b in 0..bs {
            for &p in parts {
                data.extend_from_slice(self.value(p).sample(b));
            }
        }
        let out = Tensor::from_vec([bs, channels, h, w], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let [bs, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(AutodiffError::Shape(format!("channel slice {start}..{} of {c}", start + len)));
        }
        let src = self.value(x);
        let plane = h * w;
        let mut data = Vec::with_capacity(bs * len * plane);
        for b in 0..bs {
            data.extend_from_slice(&src.sample(b)[start * plane..(start + len) * plane]);
        }
        let out = Tensor::from_vec([bs, len, h, w], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, start }, rg))
    }

    /// Mean of squared values, as a scalar.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.len().max(1);
        let s: f64 = src.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        let out = Tensor::scalar(T::from_f64(s / n as f64));
        let rg = self.rg(x);
        self.push(out, Op::MeanSquare(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar. Gradients of `requires_grad` leaves are
    /// added to whatever earlier passes left there.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let shape = self.shape(loss);
        if shape != [1, 1, 1, 1] {
            return Err(AutodiffError::NonScalarLoss(shape));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let gt = Tensor::from_vec(node.value.shape(), g)?;
            self.node_backward(i, gt, &mut grads)?;
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, x)| *a += x),
            slot => *slot = Some(g),
        }
    }

    fn node_backward(&mut self, i: usize, g: Tensor<T>, grads: &mut [Option<Vec<T>>]) -> Result<(), AutodiffError> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &x)| *a += x),
                        slot => *slot = Some(g),
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let needs = Needs { input: self.rg(*x), weight: self.rg(*w), bias: self.rg_opt(*b) };
                let r = conv::conv2d_backward(self.value(*x), self.value(*w), &g, *spec, needs)?;
                self.scatter(grads, *x, *w, *b, r);
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let needs = Needs { input: self.rg(*x), weight: self.rg(*w), bias: self.rg_opt(*b) };
                let r = conv::conv_transpose2d_backward(self.value(*x), self.value(*w), &g, *spec, needs)?;
                self.scatter(grads, *x, *w, *b, r);
            }
            Op::Depthwise { x, w, b, mode } => {
                let needs = Needs { input: self.rg(*x), weight: self.rg(*w), bias: self.rg_opt(*b) };
                let r = conv::depthwise_conv2d_backward(self.value(*x), self.value(*w), &g, *mode, needs)?;
                self.scatter(grads, *x, *w, *b, r);
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::layer_norm_backward(self.shape(*x), self.value(*gamma), saved, &g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Grn { x, gamma, beta, saved } => {
                let (dx, dg, db) = norm::grn_backward(self.value(*x), self.value(*gamma), saved, &g);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::Gelu { x } => {
                let dx = g.data().iter().zip(self.value(*x).data()).map(|(&d, &v)| d * gelu_grad(v)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.into_data());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.data().iter().map(|&v| -v).collect());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.data().iter().map(|&v| v * c).collect());
            }
            Op::MulSample { x, s } => {
                let xv = self.value(*x);
                let sl = xv.sample_len();
                let sv = self.value(*s).data();
                if self.rg(*x) {
                    let dx = g.data().iter().enumerate().map(|(k, &d)| d * sv[k / sl]).collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.rg(*s) {
                    let ds = (0..sv.len())
                        .map(|b| g.sample(b).iter().zip(xv.sample(b)).map(|(&d, &v)| d * v).sum::<T>())
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Plane { s } => {
                let ns = self.value(*s).len();
                let mut ds = vec![T::zero(); ns];
                for b in 0..g.shape()[0] {
                    let part: T = g.sample(b).iter().copied().sum();
                    ds[if ns == 1 { 0 } else { b }] += part;
                }
                self.accumulate(grads, *s, ds);
            }
            Op::Concat(parts) => {
                let bs = g.shape()[0];
                let plane = g.plane_len();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(bs * pc * plane);
                        for b in 0..bs {
                            dp.extend_from_slice(&g.sample(b)[offset * plane..(offset + pc) * plane]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += pc;
                }
            }
            Op::Slice { x, start } => {
                let [bs, c, h, w] = self.shape(*x);
                let plane = h * w;
                let len = g.shape()[1];
                let mut dx = vec![T::zero(); bs * c * plane];
                for b in 0..bs {
                    let dst = &mut dx[(b * c + start) * plane..(b * c + start + len) * plane];
                    dst.copy_from_slice(g.sample(b));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanSquare(x) => {
                let xv = self.value(*x);
                let c = g.data()[0] * T::from_f64(2.0 / xv.len().max(1) as f64);
                self.accumulate(grads, *x, xv.data().iter().map(|&v| v * c).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g.data()[0]; n]);
            }
        }
        Ok(())
    }

    fn scatter(&self, grads: &mut [Option<Vec<T>>], x: Var, w: Var, b: Option<Var>, r: conv::Grads<T>) {
        if let Some(dx) = r.input {
            self.accumulate(grads, x, dx);
        }
        if let Some(dw) = r.weight {
            self.accumulate(grads, w, dw);
        }
        if let (Some(b), Some(db)) = (b, r.bias) {
            self.accumulate(grads, b, db);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec([1, 2, 2, 2], (0..8).map(f64::from).collect()).unwrap(), true);
        let y = tape.scale(x, 3.0);
        let z = tape.scale(y, 1.0 / 3.0);
        let s = tape.sum(z);
        tape.backward(s).unwrap();
        for &g in tape.grad(x).unwrap().data() {
            assert!((g - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn disconnected_leaf_stays_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let y = tape.leaf(Tensor::full([1, 1, 2, 2], 2.0), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(y).is_none());
        assert!(tape.grad_or_zeros(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 0.5), true);
        let y = tape.gelu(x);
        let l = tape.mean_square(y);
        tape.backward(l).unwrap();
        let once = tape.grad(x).unwrap().clone();
        tape.backward(l).unwrap();
        for (a, b) in tape.grad(x).unwrap().data().iter().zip(once.data()) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.8413447460685429).abs() < 1e-12);
        assert!((gelu(-1.0f64) + 0.15865525393145707).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros([1, 1, 2, 3]));
        assert!(tape.add(a, b).is_err());
        let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
        assert!(tape.conv2d(a, w, None, ConvSpec::same(3, PaddingMode::Zero)).is_err());
    }
}
