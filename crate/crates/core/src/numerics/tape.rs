//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. Calling
//! [`Var::backward`] on a scalar walks the record in reverse and accumulates
//! `∂loss/∂leaf` into every leaf created with `requires_grad = true`. Leaf
//! gradients accumulate across repeated backward calls until
//! [`Tape::zero_grad`] is called.
//!
//! Operations whose inputs are all untracked store no backward closure, so the
//! same model code serves inference (no gradients) and training.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Arguments handed to a backward closure.
pub struct BackwardArgs<'a> {
    pub inputs: &'a [Rc<Tensor>],
    pub output: &'a Tensor,
    pub grad: &'a Tensor,
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// closure may return `None` for it.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    requires_grad: bool,
    is_leaf: bool,
    grad: Option<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Gradient tape. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            is_leaf: true,
            grad: None,
            parents: Vec::new(),
            backward: None,
        })
    }

    /// Untracked constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records the result of a custom operation. `backward` is only kept when
    /// at least one input requires a gradient.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        debug_assert!(inputs.iter().all(|v| std::ptr::eq(v.tape, self)));
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        self.push(Node {
            value: Rc::new(value),
            requires_grad,
            is_leaf: false,
            grad: None,
            parents: inputs.iter().map(|v| v.id).collect(),
            backward: requires_grad.then_some(backward),
        })
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn backward_from(&self, loss: usize) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss].value.shape()
            )));
        }
        if !nodes[loss].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss + 1];
        grads[loss] = Some(Tensor::full(nodes[loss].value.shape(), 1.0));
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.is_leaf {
                grads[id] = Some(g);
                continue;
            }
            let Some(backward) = node.backward.as_ref() else { continue };
            let inputs: Vec<Rc<Tensor>> = node.parents.iter().map(|&p| nodes[p].value.clone()).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
            let parent_grads = backward(&BackwardArgs {
                inputs: &inputs,
                output: &node.value,
                grad: &g,
                needs: &needs,
            });
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                if !need {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.axpy(1.0, &pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let node = &mut nodes[id];
                if node.is_leaf && node.requires_grad {
                    match &mut node.grad {
                        Some(acc) => acc.axpy(1.0, &g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn unary<'t>(x: Var<'t>, value: Tensor, backward: BackwardFn) -> Var<'t> {
    x.tape.custom(&[x], value, backward)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Copy of the value.
    pub fn tensor(&self) -> Tensor {
        (*self.value()).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a tracked leaf; `None` for untracked values.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Accumulates `∂self/∂leaf` into every tracked leaf.
    pub fn backward(&self) -> Result<()> {
        self.tape.backward_from(self.id)
    }

    fn binary_same(self, other: Var<'t>, op: &'static str) -> Result<(Rc<Tensor>, Rc<Tensor>)> {
        let (a, b) = (self.value(), other.value());
        a.same_shape(&b, op)?;
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "add")?;
        let value = a.add(&b)?;
        Ok(self.tape.custom(
            &[self, other],
            value,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.clone())]),
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "sub")?;
        let value = a.sub(&b)?;
        Ok(self.tape.custom(
            &[self, other],
            value,
            Box::new(|args| vec![Some(args.grad.clone()), Some(args.grad.scale(-1.0))]),
        ))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.binary_same(other, "mul")?;
        let value = a.mul(&b)?;
        Ok(self.tape.custom(
            &[self, other],
            value,
            Box::new(|args| {
                let g = args.grad;
                vec![
                    args.needs[0].then(|| g.mul(&args.inputs[1]).expect("shape")),
                    args.needs[1].then(|| g.mul(&args.inputs[0]).expect("shape")),
                ]
            }),
        ))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.value().scale(c);
        unary(self, value, Box::new(move |args| vec![Some(args.grad.scale(c))]))
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let value = self.value().map(|v| v + c);
        unary(self, value, Box::new(|args| vec![Some(args.grad.clone())]))
    }

    /// Multiplies by a scalar held in a one-element variable.
    pub fn mul_scalar_var(self, s: Var<'t>) -> Result<Var<'t>> {
        let sv = s.value();
        if !sv.is_scalar() {
            return Err(Error::dim("mul_scalar_var", &s.shape(), &[1]));
        }
        let c = sv.item();
        let value = self.value().scale(c);
        Ok(self.tape.custom(
            &[self, s],
            value,
            Box::new(move |args| {
                let x = &args.inputs[0];
                vec![
                    args.needs[0].then(|| args.grad.scale(c)),
                    args.needs[1].then(|| Tensor::scalar(args.grad.dot(x).expect("shape"))),
                ]
            }),
        ))
    }

    pub fn square(self) -> Var<'t> {
        let value = self.value().map(|v| v * v);
        unary(
            self,
            value,
            Box::new(|args| {
                vec![Some(args.grad.zip_map(&args.inputs[0], "square", |g, x| 2.0 * g * x).expect("shape"))]
            }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        let value = self.value().map(f64::exp);
        unary(
            self,
            value,
            Box::new(|args| vec![Some(args.grad.mul(args.output).expect("shape"))]),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        let value = self.value().map(f64::tanh);
        unary(
            self,
            value,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(args.output, "tanh", |g, y| g * (1.0 - y * y))
                        .expect("shape"),
                )]
            }),
        )
    }

    /// x·σ(x), smooth everywhere.
    pub fn silu(self) -> Var<'t> {
        let value = self.value().map(|x| x / (1.0 + (-x).exp()));
        unary(
            self,
            value,
            Box::new(|args| {
                vec![Some(
                    args.grad
                        .zip_map(&args.inputs[0], "silu", |g, x| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            g * (s + x * s * (1.0 - s))
                        })
                        .expect("shape"),
                )]
            }),
        )
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        unary(
            self,
            value,
            Box::new(|args| vec![Some(Tensor::full(args.inputs[0].shape(), args.grad.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of squares.
    pub fn sum_sq(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().data().iter().map(|v| v * v).sum());
        unary(
            self,
            value,
            Box::new(|args| vec![Some(args.inputs[0].scale(2.0 * args.grad.item()))]),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let orig = self.shape();
        Ok(unary(
            self,
            value,
            Box::new(move |args| vec![Some(args.grad.reshape(&orig).expect("shape"))]),
        ))
    }

    /// Matrix product of two rank-2 values.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix("matmul")?;
        let (k2, n) = b.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let value = a.matmul(&b)?;
        Ok(self.tape.custom(
            &[self, other],
            value,
            Box::new(move |args| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    kernels::matmul_nt(g.data(), b.data(), &mut out, m, n, k);
                    Tensor::new(&[m, k], out).expect("shape")
                });
                let gb = args.needs[1].then(|| {
                    let mut out = vec![0.0; k * n];
                    kernels::matmul_tn(a.data(), g.data(), &mut out, m, k, n);
                    Tensor::new(&[k, n], out).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `self[m×k] · other[n×k]ᵀ`, the row-batched linear layer.
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let (m, k) = a.as_matrix("matmul_nt")?;
        let (n, k2) = b.as_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", a.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(a.data(), b.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.tape.custom(
            &[self, other],
            value,
            Box::new(move |args| {
                let (a, b, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let ga = args.needs[0].then(|| {
                    let mut out = vec![0.0; m * k];
                    kernels::matmul(g.data(), b.data(), &mut out, m, n, k);
                    Tensor::new(&[m, k], out).expect("shape")
                });
                let gb = args.needs[1].then(|| {
                    let mut out = vec![0.0; n * k];
                    kernels::matmul_tn(g.data(), a.data(), &mut out, m, n, k);
                    Tensor::new(&[n, k], out).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.value().transpose()?;
        Ok(unary(
            self,
            value,
            Box::new(|args| vec![Some(args.grad.transpose().expect("rank 2"))]),
        ))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; x.len()];
        let xd = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..len {
                    m = m.max(xd[base + j * inner]);
                }
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xd[base + j * inner] - m).exp();
                    out[base + j * inner] = e;
                    s += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= s;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(unary(
            self,
            value,
            Box::new(move |args| {
                let (y, g) = (args.output.data(), args.grad.data());
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(Tensor::new(args.output.shape(), gx).expect("shape"))]
            }),
        ))
    }

    /// `out[i] = self.flat[index[i]]`, shaped `shape`. Covers slicing,
    /// permutations, broadcasting and embedding lookups.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if index.len() != shape.iter().product::<usize>() {
            return Err(Error::dim("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.len()) {
            return Err(Error::contract(format!("gather index {bad} out of bounds for {}", x.len())));
        }
        let xd = x.data();
        let value = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        let in_shape = x.shape().to_vec();
        Ok(unary(
            self,
            value,
            Box::new(move |args| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for (&i, &g) in index.iter().zip(args.grad.data()) {
                    gd[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[C, H, W]` → `[C·f², H/f, W/f]`; output channel `c·f² + dy·f + dx`
    /// holds input pixel `(y·f + dy, x·f + dx)` of channel `c`.
    pub fn space_to_depth(self, f: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || f == 0 || s[1] % f != 0 || s[2] % f != 0 {
            return Err(Error::dim("space_to_depth", &s, &[0, f, f]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / f, w / f);
        let index: Vec<usize> = (0..c * f * f * ho * wo)
            .map(|i| {
                let (oc, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
                let (ch, dy, dx) = (oc / (f * f), (oc / f) % f, oc % f);
                ch * h * w + (y * f + dy) * w + x * f + dx
            })
            .collect();
        self.gather(Rc::new(index), &[c * f * f, ho, wo])
    }

    /// Inverse of [`Var::space_to_depth`].
    pub fn depth_to_space(self, f: usize) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 || f == 0 || s[0] % (f * f) != 0 {
            return Err(Error::dim("depth_to_space", &s, &[f * f, 0, 0]));
        }
        let (c, h, w) = (s[0] / (f * f), s[1], s[2]);
        let (ho, wo) = (h * f, w * f);
        let index: Vec<usize> = (0..c * ho * wo)
            .map(|i| {
                let (ch, y, x) = (i / (ho * wo), (i / wo) % ho, i % wo);
                let oc = ch * f * f + (y % f) * f + x % f;
                oc * h * w + (y / f) * w + x / f
            })
            .collect();
        self.gather(Rc::new(index), &[c, ho, wo])
    }

    /// Concatenates along the leading axis.
    pub fn concat0(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of zero parts"))?;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim("concat0", first.shape().as_slice(), v.shape()));
            }
            lead += v.shape()[0];
            sizes.push(v.len());
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        Ok(first.tape.custom(
            parts,
            value,
            Box::new(move |args| {
                let mut off = 0;
                let gd = args.grad.data();
                args.inputs
                    .iter()
                    .zip(&sizes)
                    .zip(args.needs)
                    .map(|((inp, &n), &need)| {
                        let g = need.then(|| Tensor::new(inp.shape(), gd[off..off + n].to_vec()).expect("shape"));
                        off += n;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Adds `bias[C]` to every spatial position of a `[C, H, W]` map.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let s = x.shape();
        if s.len() != 3 || b.shape() != [s[0]] {
            return Err(Error::dim("add_channel_bias", s, b.shape()));
        }
        let hw = s[1] * s[2];
        let mut out = x.data().to_vec();
        for (c, &bv) in b.data().iter().enumerate() {
            for v in &mut out[c * hw..(c + 1) * hw] {
                *v += bv;
            }
        }
        let value = Tensor::new(s, out)?;
        let c = s[0];
        Ok(self.tape.custom(
            &[self, bias],
            value,
            Box::new(move |args| {
                let g = args.grad;
                let gb = args.needs[1].then(|| {
                    Tensor::from_fn(&[c], |ch| g.data()[ch * hw..(ch + 1) * hw].iter().sum())
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    /// Same-padded stride-1 convolution of a `[C, H, W]` map with `[O, C, k, k]`
    /// weights and an optional `[O]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, dilation: usize) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(Error::dim("conv2d", xs, ws));
        }
        let geom = ConvGeom {
            cin: xs[0],
            cout: ws[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            dilation: dilation.max(1),
        };
        let bias_val = match &bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [geom.cout] {
                    return Err(Error::dim("conv2d bias", bv.shape(), &[geom.cout]));
                }
                Some(bv)
            }
            None => None,
        };
        let mut out = vec![0.0; geom.cout * geom.h * geom.w];
        kernels::conv2d(x.data(), w.data(), bias_val.as_ref().map(|b| b.data()), &mut out, geom);
        let value = Tensor::new(&[geom.cout, geom.h, geom.w], out)?;
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let hw = geom.h * geom.w;
        Ok(self.tape.custom(
            &inputs,
            value,
            Box::new(move |args| {
                let (x, w, g) = (&args.inputs[0], &args.inputs[1], args.grad);
                let gx = args.needs[0].then(|| {
                    let mut gin = vec![0.0; x.len()];
                    kernels::conv2d_grad_input(g.data(), w.data(), &mut gin, geom);
                    Tensor::new(x.shape(), gin).expect("shape")
                });
                let gw = args.needs[1].then(|| {
                    let mut gw = vec![0.0; w.len()];
                    kernels::conv2d_grad_weight(g.data(), x.data(), &mut gw, geom);
                    Tensor::new(w.shape(), gw).expect("shape")
                });
                let mut grads = vec![gx, gw];
                if args.inputs.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        Tensor::from_fn(&[geom.cout], |o| g.data()[o * hw..(o + 1) * hw].iter().sum())
                    }));
                }
                grads
            }),
        ))
    }

    /// 2×2 average pooling of a `[C, H, W]` map (H, W even).
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::dim("avg_pool2", &s, &[0, 2, 2]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / 2, w / 2);
        let xd = x.data();
        let value = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, y, xx) = (i / (ho * wo), (i / wo) % ho, i % wo);
            let b = ch * h * w + 2 * y * w + 2 * xx;
            0.25 * (xd[b] + xd[b + 1] + xd[b + w] + xd[b + w + 1])
        });
        Ok(unary(
            self,
            value,
            Box::new(move |args| {
                let g = args.grad.data();
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                    0.25 * g[ch * ho * wo + (y / 2) * wo + xx / 2]
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbour 2× upsampling of a `[C, H, W]` map.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::dim("upsample2", &s, &[0, 0, 0]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let xd = x.data();
        let value = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, y, xx) = (i / (ho * wo), (i / wo) % ho, i % wo);
            xd[ch * h * w + (y / 2) * w + xx / 2]
        });
        Ok(unary(
            self,
            value,
            Box::new(move |args| {
                let g = args.grad.data();
                let gx = Tensor::from_fn(&[c, h, w], |i| {
                    let (ch, y, xx) = (i / (h * w), (i / w) % h, i % w);
                    let b = ch * ho * wo + 2 * y * wo + 2 * xx;
                    g[b] + g[b + 1] + g[b + wo] + g[b + wo + 1]
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `self` holds queries `[N, D]`, `keys` and `values` are `[M, D]`; `D`
    /// is split into `heads` equal slices. Returns `[N, D]`.
    pub fn attention(self, keys: Var<'t>, values: Var<'t>, heads: usize) -> Result<Var<'t>> {
        let (q, k, v) = (self.value(), keys.value(), values.value());
        let (n, d) = q.as_matrix("attention")?;
        let (m, dk) = k.as_matrix("attention")?;
        let (mv, dv) = v.as_matrix("attention")?;
        if dk != d || dv != d || mv != m {
            return Err(Error::dim("attention", q.shape(), k.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        // probs[h][n][m]
        let mut probs = vec![0.0; heads * n * m];
        let mut out = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut probs[(h * n + i) * m..(h * n + i + 1) * m];
                let mut mx = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    mx = mx.max(*r);
                }
                let mut s = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - mx).exp();
                    s += *r;
                }
                for r in row.iter_mut() {
                    *r /= s;
                }
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.tape.custom(
            &[self, keys, values],
            value,
            Box::new(move |args| {
                let (qd, kd, vd) = (args.inputs[0].data(), args.inputs[1].data(), args.inputs[2].data());
                let g = args.grad.data();
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; m * d];
                let mut gv = vec![0.0; m * d];
                let mut ds = vec![0.0; m];
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[(h * n + i) * m..(h * n + i + 1) * m];
                        let gi = &g[i * d + off..i * d + off + dh];
                        let mut dot = 0.0;
                        for j in 0..m {
                            let vj = &vd[j * d + off..j * d + off + dh];
                            let da: f64 = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                            ds[j] = da;
                            dot += p[j] * da;
                            let gvj = &mut gv[j * d + off..j * d + off + dh];
                            for (o, &gg) in gvj.iter_mut().zip(gi) {
                                *o += p[j] * gg;
                            }
                        }
                        for j in 0..m {
                            let s = p[j] * (ds[j] - dot) * scale;
                            if s == 0.0 {
                                continue;
                            }
                            for t in 0..dh {
                                gq[i * d + off + t] += s * kd[j * d + off + t];
                                gk[j * d + off + t] += s * qd[i * d + off + t];
                            }
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, d], gq).expect("shape")),
                    Some(Tensor::new(&[m, d], gk).expect("shape")),
                    Some(Tensor::new(&[m, d], gv).expect("shape")),
                ]
            }),
        ))
    }
}
