//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Domain crates add their own differentiable
//! operations through [`CustomOp`].

use crate::kernels::{self, ConvSpec};
use crate::{ParamStore, Scalar, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation evaluated outside the tape.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input; entries may be `None` when
    /// `needs_grad[i]` is false or the input is not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs_grad: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: ConvSpec },
    Deconv2x2 { x: Var, w: Var, b: Var },
    Linear { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, arg: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { parts: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, k: T },
    Abs { x: Var },
    Square { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    Reshape { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Leaf variables created for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var(&self, id: crate::ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradients for each parameter of a binding, in store order.
    pub fn for_binding(&mut self, binding: &Binding) -> Vec<Option<Tensor<T>>> {
        binding.vars.iter().map(|&v| self.take(v)).collect()
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copies `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Adds every parameter of `store` as a leaf. Frozen stores get
    /// constants, so no gradient is ever computed for them.
    pub fn bind(&mut self, store: &ParamStore<T>, trainable: bool) -> Binding {
        let vars = store
            .tensors()
            .iter()
            .map(|t| self.push(t.clone(), Op::Leaf, trainable))
            .collect();
        Binding { vars }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Var {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec);
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    pub fn deconv2x2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = kernels::deconv2x2_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.any_grad(&[x, w, b]);
        self.push(out, Op::Deconv2x2 { x, w, b }, rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b));
        let rg = self.any_grad(&[x, w, b]);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (out, arg) = kernels::maxpool2_forward(self.value(x));
        let rg = self.requires_grad(x);
        self.push(out, Op::MaxPool2 { x, arg }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let rg = self.requires_grad(x);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Concatenates NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat_channels: spatial/batch mismatch");
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let plane = h * w;
        let mut out = Tensor::zeros(&[n, total, h, w]);
        {
            let od = out.data_mut();
            for s in 0..n {
                let mut off = s * total * plane;
                for (&p, &c) in parts.iter().zip(&chans) {
                    let src = &self.nodes[p.0].value.data()[s * c * plane..(s + 1) * c * plane];
                    od[off..off + c * plane].copy_from_slice(src);
                    off += c * plane;
                }
            }
        }
        let rg = self.any_grad(parts);
        self.push(out, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        self.push(out, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        let rg = self.requires_grad(x);
        self.push(out, Op::Scale { x, k }, rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.abs());
        let rg = self.requires_grad(x);
        self.push(out, Op::Abs { x }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.requires_grad(x);
        self.push(out, Op::Square { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.requires_grad(x);
        self.push(out, Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / T::lit(v.numel() as f64));
        let rg = self.requires_grad(x);
        self.push(out, Op::Mean { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.requires_grad(x);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Records an externally evaluated operation together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let acc = |v: Var, t: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { x, w, b, spec } => {
                    let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), *spec, &g, rg(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    if let Some(b) = b {
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Deconv2x2 { x, w, b } => {
                    let (dx, dw, db) = kernels::deconv2x2_backward(val(*x), val(*w), &g, rg(*x));
                    if let Some(dx) = dx {
                        acc(*x, dx, &mut grads);
                    }
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = kernels::linear_backward(val(*x), val(*w), &g);
                    acc(*x, dx, &mut grads);
                    acc(*w, dw, &mut grads);
                    acc(*b, db, &mut grads);
                }
                Op::MaxPool2 { x, arg } => {
                    let dx = kernels::maxpool2_backward(val(*x).shape(), arg, &g);
                    acc(*x, dx, &mut grads);
                }
                Op::Relu { x } => {
                    let dx = val(*x).zip_map(&g, |v, gv| if v > T::zero() { gv } else { T::zero() });
                    acc(*x, dx, &mut grads);
                }
                Op::Sigmoid { x } => {
                    let dx = node.value.zip_map(&g, |s, gv| gv * s * (T::one() - s));
                    acc(*x, dx, &mut grads);
                }
                Op::Concat { parts } => {
                    let (n, total, h, w) = node.value.dims4();
                    let plane = h * w;
                    let mut off_c = 0;
                    for &p in parts {
                        let c = val(p).shape()[1];
                        if rg(p) {
                            let mut d = Tensor::zeros(val(p).shape());
                            for s in 0..n {
                                let src = &g.data()[(s * total + off_c) * plane..][..c * plane];
                                d.data_mut()[s * c * plane..(s + 1) * c * plane].copy_from_slice(src);
                            }
                            acc(p, d, &mut grads);
                        }
                        off_c += c;
                    }
                }
                Op::Add { a, b } => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g, &mut grads);
                }
                Op::Sub { a, b } => {
                    acc(*b, g.map(|v| -v), &mut grads);
                    acc(*a, g, &mut grads);
                }
                Op::Mul { a, b } => {
                    acc(*a, g.zip_map(val(*b), |gv, bv| gv * bv), &mut grads);
                    acc(*b, g.zip_map(val(*a), |gv, av| gv * av), &mut grads);
                }
                Op::Scale { x, k } => {
                    let k = *k;
                    acc(*x, g.map(|v| v * k), &mut grads);
                }
                Op::Abs { x } => {
                    let dx = val(*x).zip_map(&g, |v, gv| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    });
                    acc(*x, dx, &mut grads);
                }
                Op::Square { x } => {
                    let dx = val(*x).zip_map(&g, |v, gv| T::lit(2.0) * v * gv);
                    acc(*x, dx, &mut grads);
                }
                Op::Sum { x } => {
                    let gv = g.item();
                    acc(*x, Tensor::full(val(*x).shape(), gv), &mut grads);
                }
                Op::Mean { x } => {
                    let n = T::lit(val(*x).numel() as f64);
                    let gv = g.item() / n;
                    acc(*x, Tensor::full(val(*x).shape(), gv), &mut grads);
                }
                Op::Reshape { x } => {
                    let shape = val(*x).shape().to_vec();
                    acc(*x, g.reshape(&shape), &mut grads);
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| rg(v)).collect();
                    let outs = op.backward(&ins, &node.value, &g, &needs);
                    assert_eq!(outs.len(), inputs.len(), "{}: wrong gradient count", op.name());
                    for (&v, d) in inputs.iter().zip(outs) {
                        if let Some(d) = d {
                            assert_eq!(d.shape(), val(v).shape(), "{}: gradient shape", op.name());
                            acc(v, d, &mut grads);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Tensor<f64> {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn small_net(g: &mut Graph<f64>, x: Var, w1: Var, w2: Var, b2: Var) -> Var {
        let h = g.conv2d(x, w1, None, ConvSpec::SAME3);
        let h = g.sigmoid(h);
        let p = g.maxpool2(h);
        let d = g.deconv2x2(p, w2, b2);
        let cat = g.concat_channels(&[d, h]);
        let sq = g.square(cat);
        let s = g.scale(sq, 0.5);
        g.mean(s)
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let x = Tensor::from_vec(&[1, 2, 4, 4], (0..32).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect());
        let w1 = Tensor::from_vec(&[2, 2, 3, 3], (0..36).map(|i| ((i * 13 % 7) as f64 - 3.0) / 9.0).collect());
        let w2 = Tensor::from_vec(&[2, 1, 2, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.6]);
        let b2 = Tensor::from_vec(&[1], vec![0.05]);
        let eval = |x: &Tensor<f64>, w1: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, w1v) = (g.leaf(x.clone()), g.leaf(w1.clone()));
            let (w2v, b2v) = (g.constant(w2.clone()), g.constant(b2.clone()));
            let l = small_net(&mut g, xv, w1v, w2v, b2v);
            (g, l, xv, w1v)
        };
        let (g, l, xv, w1v) = eval(&x, &w1);
        let grads = g.backward(l);
        let nx = numeric_grad(|t| { let (g, l, ..) = eval(t, &w1); g.value(l).item() }, &x);
        let nw = numeric_grad(|t| { let (g, l, ..) = eval(&x, t); g.value(l).item() }, &w1);
        assert!(rel_err(grads.get(xv).unwrap(), &nx) < 1e-5);
        assert!(rel_err(grads.get(w1v).unwrap(), &nw) < 1e-5);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::full(&[3], 2.0));
        let b = g.leaf(Tensor::full(&[3], 1.0));
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn linear_and_abs_gradients() {
        let x = Tensor::from_vec(&[2, 3], vec![0.1, -0.4, 0.9, 0.3, 0.2, -0.8]);
        let w = Tensor::from_vec(&[2, 3], vec![0.5, -0.1, 0.2, 0.3, 0.7, -0.6]);
        let b = Tensor::from_vec(&[2], vec![0.01, -0.02]);
        let f = |w: &Tensor<f64>| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.leaf(w.clone()), g.constant(b.clone()));
            let y = g.linear(xv, wv, bv);
            let a = g.abs(y);
            let l = g.sum(a);
            (g, l, wv)
        };
        let (g, l, wv) = f(&w);
        let grads = g.backward(l);
        let nw = numeric_grad(|t| { let (g, l, _) = f(t); g.value(l).item() }, &w);
        assert!(rel_err(grads.get(wv).unwrap(), &nw) < 1e-6);
    }
}
