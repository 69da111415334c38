use std::collections::BTreeMap;

use super::tape::{im2col, Op, Tape, Var};
use super::{Scalar, Tensor, TensorError};

/// Gradients produced by one call to [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a node, or `None` if it does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a node; zeros when it was unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient of every named parameter on the tape. Parameters the loss
    /// does not depend on map to exact zeros.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<T>> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .map(|(name, v)| {
                let g = self.grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]));
                (name, g)
            })
            .collect()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, shape: &[usize], f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape));
    f(g.data_mut());
}

impl<T: Scalar> Tape<T> {
    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Each recorded node is visited once, in reverse execution order.
    /// Gradients from multiple uses of a value are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        self.check(loss)?;
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        if self.requires_grad(loss) {
            grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        }
        for idx in (0..=loss.0).rev() {
            let op = match &self.nodes[idx].op {
                Some(op) if !matches!(op, Op::Leaf) => op,
                _ => continue,
            };
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // Only nodes that require a gradient report one.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !self.nodes[idx].requires_grad() {
                *slot = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, idx: usize, op: &Op, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[idx].value;
        let gd = g.data();
        let wants = |v: &Var| self.nodes[v.0].requires_grad();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(a) {
                    let bv = self.value(*b).data();
                    accumulate(&mut grads[a.0], sa, |ga| T::gemm(m, n, k, gd, false, bv, true, ga, true));
                }
                if wants(b) {
                    let av = self.value(*a).data();
                    accumulate(&mut grads[b.0], sb, |gb| T::gemm(k, m, n, av, true, gd, false, gb, true));
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += gd[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        accumulate(&mut grads[v.0], self.shape(*v), |gv| add_into(gv, gd));
                    }
                }
            }
            Op::AddRow(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| add_into(ga, gd));
                }
                if wants(b) {
                    let w = self.shape(*b)[0];
                    accumulate(&mut grads[b.0], self.shape(*b), |gb| {
                        for row in gd.chunks(w) {
                            add_into(gb, row);
                        }
                    });
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| add_into(ga, gd));
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], self.shape(*b), |gb| {
                        gb.iter_mut().zip(gd).for_each(|(x, &y)| *x -= y)
                    });
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(a) {
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| {
                        for i in 0..ga.len() {
                            ga[i] += gd[i] * bv[i];
                        }
                    });
                }
                if wants(b) {
                    accumulate(&mut grads[b.0], self.shape(*b), |gb| {
                        for i in 0..gb.len() {
                            gb[i] += gd[i] * av[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                let k = T::of_f64(*c);
                self.unary(grads, *a, |i| gd[i] * k);
            }
            Op::Exp(a) => {
                let y = out.data();
                self.unary(grads, *a, |i| gd[i] * y[i]);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                self.unary(grads, *a, |i| gd[i] / x[i]);
            }
            Op::LogFloor(a, floor) => {
                let x = self.value(*a).data();
                let fl = T::of_f64(*floor);
                self.unary(grads, *a, |i| if x[i] > fl { gd[i] / x[i] } else { T::zero() });
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.unary(grads, *a, |i| gd[i] * (T::one() - y[i] * y[i]));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                self.unary(grads, *a, |i| gd[i] * y[i] * (T::one() - y[i]));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                self.unary(grads, *a, |i| if x[i] > T::zero() { gd[i] } else { T::zero() });
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                self.unary(grads, *a, |i| gd[i] * super::tape::sigmoid(-x[i]));
            }
            Op::Softmax(a) => {
                if wants(a) {
                    let n = *out.shape().last().unwrap();
                    let y = out.data();
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| {
                        for ((gr, yr), gar) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                            let dot: T = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum();
                            for j in 0..n {
                                gar[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LogSoftmax(a) => {
                if wants(a) {
                    let n = *out.shape().last().unwrap();
                    let y = out.data();
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| {
                        for ((gr, yr), gar) in gd.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                            let total: T = gr.iter().copied().sum();
                            for j in 0..n {
                                gar[j] += gr[j] - yr[j].exp() * total;
                            }
                        }
                    });
                }
            }
            Op::Sum(a) => {
                let g0 = gd[0];
                self.unary(grads, *a, |_| g0);
            }
            Op::Mean(a) => {
                let g0 = gd[0] / T::of_f64(self.value(*a).numel() as f64);
                self.unary(grads, *a, |_| g0);
            }
            Op::SumAxis(a, axis) => {
                if wants(a) {
                    let shape = self.shape(*a);
                    let outer: usize = shape[..*axis].iter().product();
                    let len = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    accumulate(&mut grads[a.0], shape, |ga| {
                        for o in 0..outer {
                            for l in 0..len {
                                let base = (o * len + l) * inner;
                                for i in 0..inner {
                                    ga[base + i] += gd[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = out.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if wants(p) {
                        accumulate(&mut grads[p.0], self.shape(*p), |gp| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                add_into(&mut gp[dst..dst + len * inner], &gd[src..src + len * inner]);
                            }
                        });
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                if wants(input) {
                    let shape = self.shape(*input);
                    let outer: usize = shape[..*axis].iter().product();
                    let full = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = out.shape()[*axis];
                    accumulate(&mut grads[input.0], shape, |gi| {
                        for o in 0..outer {
                            let dst = (o * full + start) * inner;
                            let src = o * len * inner;
                            add_into(&mut gi[dst..dst + len * inner], &gd[src..src + len * inner]);
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if wants(a) {
                    accumulate(&mut grads[a.0], self.shape(*a), |ga| add_into(ga, gd));
                }
            }
            Op::L2Norm(a) => {
                let norm = out.data()[0];
                let x = self.value(*a).data();
                let g0 = gd[0];
                self.unary(grads, *a, |i| {
                    if norm > T::zero() {
                        g0 * x[i] / norm
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Conv1d { input, weight, bias, window } => {
                let in_shape = self.shape(*input);
                let (b, t, c) = match *in_shape {
                    [t, c] => (1, t, c),
                    [b, t, c] => (b, t, c),
                    _ => unreachable!("checked in forward"),
                };
                let o = self.shape(*weight)[1];
                let l = t - window + 1;
                let width = window * c;
                if wants(bias) {
                    accumulate(&mut grads[bias.0], &[o], |gb| {
                        for row in gd.chunks(o) {
                            add_into(gb, row);
                        }
                    });
                }
                if wants(weight) {
                    let cols = im2col(self.value(*input).data(), b, t, c, *window);
                    accumulate(&mut grads[weight.0], self.shape(*weight), |gw| {
                        T::gemm(width, b * l, o, &cols, true, gd, false, gw, true)
                    });
                }
                if wants(input) {
                    let mut dcols = vec![T::zero(); b * l * width];
                    T::gemm(b * l, o, width, gd, false, self.value(*weight).data(), true, &mut dcols, false);
                    accumulate(&mut grads[input.0], in_shape, |gi| {
                        for bi in 0..b {
                            for ti in 0..l {
                                let dst = (bi * t + ti) * c;
                                let src = (bi * l + ti) * width;
                                add_into(&mut gi[dst..dst + width], &dcols[src..src + width]);
                            }
                        }
                    });
                }
            }
            Op::MaxOverTime { input, argmax } => {
                if wants(input) {
                    let shape = self.shape(*input);
                    let (t, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                    accumulate(&mut grads[input.0], shape, |gi| {
                        for (k, &ti) in argmax.iter().enumerate() {
                            let (bi, ci) = (k / c, k % c);
                            gi[(bi * t + ti) * c + ci] += gd[k];
                        }
                    });
                }
            }
        }
    }

    fn unary(&self, grads: &mut [Option<Tensor<T>>], a: Var, f: impl Fn(usize) -> T) {
        if self.nodes[a.0].requires_grad() {
            accumulate(&mut grads[a.0], self.shape(a), |ga| {
                for (i, x) in ga.iter_mut().enumerate() {
                    *x += f(i);
                }
            });
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
}
