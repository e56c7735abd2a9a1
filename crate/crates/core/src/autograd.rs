//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar walks the tape in reverse and returns the
//! gradients of all leaves created with [`Tape::param`]. Nodes that cannot
//! reach a parameter carry no backward closure and cost nothing on the way
//! back.

use std::cell::RefCell;
use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use crate::conv::{self, Conv2dSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

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
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf. `None` if the leaf is a constant or did not
    /// influence the loss.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
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

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn record<F>(&self, value: impl Into<Rc<Tensor>>, parents: &[Var<'_>], backward: F) -> Var<'_>
    where
        F: Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>> + 'static,
    {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| {
            assert!(std::ptr::eq(p.tape, self), "vars from different tapes");
            nodes[p.id].requires_grad
        });
        nodes.push(Node {
            value: value.into(),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::validation(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        }
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mask: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&g, &mask);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for ((&p, pg), needed) in node.parents.iter().zip(parent_grads).zip(mask) {
                let (Some(pg), true) = (pg, needed) else {
                    continue;
                };
                match grads[p].as_mut() {
                    Some(acc) => acc.add_assign(&pg),
                    None => grads[p] = Some(pg),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn stack_scalars_impl<'t>(tape: &'t Tape, items: &[Var<'t>]) -> Var<'t> {
    let data = items.iter().map(|v| v.value().item()).collect();
    let n = items.len();
    tape.record(Tensor::vector(data), items, move |g, _| {
        (0..n).map(|i| Some(Tensor::scalar(g.data()[i]))).collect()
    })
}

/// Stacks scalar vars into a vector.
pub fn stack<'t>(items: &[Var<'t>]) -> Var<'t> {
    assert!(!items.is_empty(), "stack of zero vars");
    stack_scalars_impl(items[0].tape, items)
}

/// Concatenates along the leading axis.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::validation("concat of zero vars"))?;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
    let out = Tensor::concat(&refs)?;
    let pieces: Vec<(usize, Vec<usize>)> = values
        .iter()
        .scan(0, |off, v| {
            let start = *off;
            *off += v.numel();
            Some((start, v.shape().to_vec()))
        })
        .collect();
    Ok(first.tape.record(out, parts, move |g, need| {
        pieces
            .iter()
            .zip(need)
            .map(|((start, shape), &n)| {
                n.then(|| {
                    let len: usize = shape.iter().product();
                    Tensor::from_parts(shape.clone(), g.data()[*start..start + len].to_vec())
                })
            })
            .collect()
    }))
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
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

    /// A constant copy cut off from the graph.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary<F, B>(&self, f: F, back: B) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        B: Fn(f64, f64, f64) -> f64 + 'static,
    {
        // back(x, y, g) -> dx
        let x = self.value();
        let y = Rc::new(x.map(f));
        let (xc, yc) = (Rc::clone(&x), Rc::clone(&y));
        self.tape.record(y, &[*self], move |g, _| {
            let data = xc
                .data()
                .iter()
                .zip(yc.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| back(x, y, g))
                .collect();
            vec![Some(Tensor::from_parts(xc.shape().to_vec(), data))]
        })
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.tape.record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.tape.record(out, &[self, other], |g, _| {
            vec![Some(g.clone()), Some(g.scale(-1.0))]
        })
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y)),
                need[1].then(|| g.zip_map(&a, |g, x| g * x)),
            ]
        })
    }

    /// Multiplies every element by a scalar var.
    pub fn mul_scalar(&self, s: Var<'t>) -> Var<'t> {
        let (x, sv) = (self.value(), s.value());
        let sval = sv.item();
        let out = x.scale(sval);
        self.tape.record(out, &[*self, s], move |g, need| {
            vec![
                need[0].then(|| g.scale(sval)),
                need[1].then(|| Tensor::scalar(g.dot(&x))),
            ]
        })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape
            .record(out, &[*self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        let out = self.value().map(|x| x + s);
        self.tape
            .record(out, &[*self], |g, _| vec![Some(g.clone())])
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _, g| if x > 0.0 { g } else { 0.0 })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _, g| if x > 0.0 { g } else { slope * g },
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y, g| g * (1.0 - y * y))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y, g| g * y * (1.0 - y),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y, g| g * y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _, g| g / x)
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(f64::abs, |x, _, g| {
            if x > 0.0 {
                g
            } else if x < 0.0 {
                -g
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _, g| 2.0 * x * g)
    }

    /// Clamps into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _, g| if x > lo && x < hi { g } else { 0.0 },
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record(Tensor::scalar(x.sum()), &[*self], move |g, _| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = x.reshape(shape)?;
        Ok(self.tape.record(out, &[*self], move |g, _| {
            vec![Some(Tensor::from_parts(old.clone(), g.data().to_vec()))]
        }))
    }

    /// Contiguous flat range `[start, start+numel(shape))` reshaped to `shape`.
    pub fn slice_flat(&self, start: usize, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let len: usize = shape.iter().product();
        if start + len > x.numel() {
            return Err(Error::validation(format!(
                "slice [{start}, {}) out of bounds for {} elements",
                start + len,
                x.numel()
            )));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data()[start..start + len].to_vec());
        let full = x.shape().to_vec();
        Ok(self.tape.record(out, &[*self], move |g, _| {
            let mut dx = Tensor::zeros(&full);
            dx.data_mut()[start..start + len].copy_from_slice(g.data());
            vec![Some(dx)]
        }))
    }

    /// Element at flat index `i` as a scalar.
    pub fn index(&self, i: usize) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape
            .record(Tensor::scalar(x.data()[i]), &[*self], move |g, _| {
                let mut dx = Tensor::zeros(&shape);
                dx.data_mut()[i] = g.item();
                vec![Some(dx)]
            })
    }

    /// Grouped 2D convolution of a `C×H×W` input.
    pub fn conv2d(
        &self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        spec: Conv2dSpec,
    ) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|b| b.value());
        let out = conv::conv2d_forward(&x, &w, b.as_deref(), spec)?;
        let mut parents = vec![*self, weight];
        parents.extend(bias);
        Ok(self.tape.record(out, &parents, move |g, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let grads = conv::conv2d_backward(&x, &w, g, spec, [need[0], need[1], need_b])
                .expect("shapes were validated in forward");
            let mut v = vec![grads.input, grads.weight];
            if need.len() == 3 {
                v.push(grads.bias);
            }
            v
        }))
    }

    /// Nearest-neighbour ×2 upsampling of `C×H×W`.
    pub fn upsample_nearest2x(&self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        self.tape.record(
            Tensor::from_parts(vec![c, 2 * h, 2 * w], out),
            &[*self],
            move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dx[(ch * h + y / 2) * w + xx / 2] +=
                                g.data()[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            },
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2x2(&self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; c * ho * wo];
        let mut arg = vec![0usize; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if x.data()[i] > best {
                            best = x.data()[i];
                            best_i = i;
                        }
                    }
                    let o = (ch * ho + oy) * wo + ox;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
        let n = x.numel();
        self.tape.record(
            Tensor::from_parts(vec![c, ho, wo], out),
            &[*self],
            move |g, _| {
                let mut dx = vec![0.0; n];
                for (o, &i) in arg.iter().enumerate() {
                    dx[i] += g.data()[o];
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            },
        )
    }

    /// Per-channel standardization over the spatial dims, no affine.
    pub fn instance_norm(&self, eps: f64) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x);
        self.normalize_groups(c, h * w, eps)
    }

    /// Standardization over all elements, no affine.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let n = self.value().numel();
        self.normalize_groups(1, n, eps)
    }

    fn normalize_groups(&self, groups: usize, len: usize, eps: f64) -> Var<'t> {
        let x = self.value();
        let mut y = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; groups];
        for gi in 0..groups {
            let xs = &x.data()[gi * len..][..len];
            let mu = xs.iter().sum::<f64>() / len as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[gi] = s;
            for (o, v) in y[gi * len..][..len].iter_mut().zip(xs) {
                *o = (v - mu) * s;
            }
        }
        let y = Rc::new(Tensor::from_parts(x.shape().to_vec(), y));
        let yc = Rc::clone(&y);
        self.tape.record(y, &[*self], move |g, _| {
            let mut dx = vec![0.0; yc.numel()];
            for gi in 0..groups {
                let gs = &g.data()[gi * len..][..len];
                let ys = &yc.data()[gi * len..][..len];
                let mg = gs.iter().sum::<f64>() / len as f64;
                let mgy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / len as f64;
                for ((d, &gv), &yv) in dx[gi * len..][..len].iter_mut().zip(gs).zip(ys) {
                    *d = inv_std[gi] * (gv - mg - yv * mgy);
                }
            }
            vec![Some(Tensor::from_parts(yc.shape().to_vec(), dx))]
        })
    }

    /// `C×H×W → C` spatial mean.
    pub fn global_avg_pool(&self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = chw(&x);
        let n = (h * w) as f64;
        let out = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        self.tape
            .record(Tensor::vector(out), &[*self], move |g, _| {
                let mut dx = Vec::with_capacity(c * h * w);
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / n, h * w));
                }
                vec![Some(Tensor::from_parts(vec![c, h, w], dx))]
            })
    }

    /// Generalized-mean pooling `(mean_hw max(x, eps)^p)^(1/p)` per channel,
    /// with a trainable scalar exponent `p`.
    pub fn gem_pool(&self, p: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let pv = p.value();
        if pv.numel() != 1 {
            return Err(Error::validation("GeM exponent must be a scalar"));
        }
        let pe = pv.item();
        if !(pe > 0.0 && pe.is_finite()) {
            return Err(Error::validation(format!(
                "GeM exponent must be positive, got {pe}"
            )));
        }
        let (c, h, w) = chw(&x);
        let n = (h * w) as f64;
        // Per channel: m = mean(x̃^p), y = m^(1/p), s = mean(x̃^p ln x̃).
        let mut ms = vec![0.0; c];
        let mut ss = vec![0.0; c];
        let mut ys = vec![0.0; c];
        for ch in 0..c {
            let plane = &x.data()[ch * h * w..][..h * w];
            let (mut m, mut s) = (0.0, 0.0);
            for &v in plane {
                let xc = v.max(eps);
                let xp = xc.powf(pe);
                m += xp;
                s += xp * xc.ln();
            }
            ms[ch] = m / n;
            ss[ch] = s / n;
            ys[ch] = ms[ch].powf(1.0 / pe);
        }
        let out = Tensor::vector(ys.clone());
        Ok(self.tape.record(out, &[*self, p], move |g, need| {
            let dx = need[0].then(|| {
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    let coef = g.data()[ch] * ms[ch].powf(1.0 / pe - 1.0) / n;
                    let plane = &x.data()[ch * h * w..][..h * w];
                    for (d, &v) in dx[ch * h * w..][..h * w].iter_mut().zip(plane) {
                        if v >= eps {
                            *d = coef * v.powf(pe - 1.0);
                        }
                    }
                }
                Tensor::from_parts(vec![c, h, w], dx)
            });
            let dp = need[1].then(|| {
                let total: f64 = (0..c)
                    .map(|ch| {
                        let dydp = ys[ch] * (-ms[ch].ln() / (pe * pe) + ss[ch] / (pe * ms[ch]));
                        g.data()[ch] * dydp
                    })
                    .sum();
                Tensor::scalar(total)
            });
            vec![dx, dp]
        }))
    }

    /// `W·x + b` for a vector `x`, `W: out×in`; `W·x` without a bias.
    pub fn linear(&self, weight: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
        let (x, w) = (self.value(), weight.value());
        let b = bias.map(|v| v.value());
        let (n_out, n_in) = match w.shape() {
            [o, i] => (*o, *i),
            s => {
                return Err(Error::validation(format!(
                    "linear weight must be 2-D, got {s:?}"
                )))
            }
        };
        if x.numel() != n_in || b.as_ref().is_some_and(|b| b.numel() != n_out) {
            return Err(Error::validation(format!(
                "linear shape mismatch: x {:?}, W {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.as_ref().map(|b| b.shape().to_vec())
            )));
        }
        let out: Vec<f64> = (0..n_out)
            .map(|o| {
                let row = &w.data()[o * n_in..][..n_in];
                let dot = row.iter().zip(x.data()).map(|(a, v)| a * v).sum::<f64>();
                b.as_ref().map_or(dot, |b| b.data()[o] + dot)
            })
            .collect();
        let mut inputs = vec![*self, weight];
        inputs.extend(bias);
        Ok(self
            .tape
            .record(Tensor::vector(out), &inputs, move |g, need| {
                let dx = need[0].then(|| {
                    let mut dx = vec![0.0; n_in];
                    for (o, &gv) in g.data().iter().enumerate() {
                        let row = &w.data()[o * n_in..][..n_in];
                        for (d, &wv) in dx.iter_mut().zip(row) {
                            *d += gv * wv;
                        }
                    }
                    Tensor::from_parts(x.shape().to_vec(), dx)
                });
                let dw = need[1].then(|| {
                    let mut dw = Vec::with_capacity(n_out * n_in);
                    for &gv in g.data() {
                        dw.extend(x.data().iter().map(|&v| gv * v));
                    }
                    Tensor::from_parts(vec![n_out, n_in], dw)
                });
                let mut grads = vec![dx, dw];
                if let Some(b) = &b {
                    grads.push(
                        need[2].then(|| Tensor::from_parts(b.shape().to_vec(), g.data().to_vec())),
                    );
                }
                grads
            }))
    }

    /// `x / ‖x‖₂` over all elements.
    pub fn l2_normalize(&self) -> Result<Var<'t>> {
        let x = self.value();
        let norm = x.norm();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::validation(format!(
                "cannot normalize vector of norm {norm}"
            )));
        }
        let y = Rc::new(x.scale(1.0 / norm));
        let yc = Rc::clone(&y);
        Ok(self.tape.record(y, &[*self], move |g, _| {
            let proj = yc.dot(g);
            vec![Some(g.zip_map(&yc, |gv, yv| (gv - yv * proj) / norm))]
        }))
    }

    pub fn dot(&self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.numel(), b.numel(), "dot length mismatch");
        let out = Tensor::scalar(a.dot(&b));
        self.tape.record(out, &[*self, other], move |g, need| {
            let gv = g.item();
            vec![need[0].then(|| b.scale(gv)), need[1].then(|| a.scale(gv))]
        })
    }

    /// Cosine of the angle between the flattened tensors.
    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.numel() != b.numel() {
            return Err(Error::validation("cosine similarity length mismatch"));
        }
        let (na, nb) = (a.norm(), b.norm());
        if na == 0.0 || nb == 0.0 {
            return Err(Error::validation("cosine similarity of a zero-norm tensor"));
        }
        let cos = a.dot(&b) / (na * nb);
        Ok(self
            .tape
            .record(Tensor::scalar(cos), &[*self, other], move |g, need| {
                let gv = g.item();
                let grad = |u: &Tensor, v: &Tensor, nu: f64| {
                    u.zip_map(v, |uu, vv| gv * (vv / (na * nb) - cos * uu / (nu * nu)))
                };
                vec![
                    need[0].then(|| grad(&a, &b, na)),
                    need[1].then(|| grad(&b, &a, nb)),
                ]
            }))
    }

    /// Numerically stable `ln Σ exp(x_i)` over all elements.
    pub fn logsumexp(&self) -> Var<'t> {
        let x = self.value();
        let m = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.data().iter().map(|v| (v - m).exp()).sum();
        let lse = m + (s - 1.0).ln_1p();
        self.tape
            .record(Tensor::scalar(lse), &[*self], move |g, _| {
                let gv = g.item();
                vec![Some(x.map(|v| gv * (v - lse).exp()))]
            })
    }
}

fn chw(x: &Tensor) -> (usize, usize, usize) {
    match x.shape() {
        [c, h, w] => (*c, *h, *w),
        s => panic!("expected C×H×W tensor, got {s:?}"),
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        Var::add(self, rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        Var::sub(self, rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule_through_shared_input() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![2.0, -3.0]));
        let y = x.mul(x).sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, -6.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
        let loss = c.mul(p).sum();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let p = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(p.relu()).is_err());
    }

    #[test]
    fn linear_with_and_without_bias() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let w = tape.param(Tensor::from_parts(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(Tensor::vector(vec![0.5, -0.5]));
        let with = x.linear(w, Some(b)).unwrap();
        let without = x.linear(w, None).unwrap();
        assert_eq!(with.value().data(), &[-2.5, -5.5]);
        assert_eq!(without.value().data(), &[-3.0, -5.0]);
        let grads = tape.backward(without.sum()).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 1.0, -2.0]);
        assert!(grads.get(b).is_none());
        assert!(x.linear(w, Some(x.sum())).is_err());
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let p = tape.param(Tensor::scalar(3.0));
        let loss = p.mul(p.detach());
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().item(), 3.0);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let v = x.logsumexp().item();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn instance_norm_standardizes_channels() {
        let tape = Tape::new();
        let x = tape.constant(
            Tensor::new(&[2, 1, 4], vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 14.0]).unwrap(),
        );
        let y = x.instance_norm(0.0).value();
        for ch in y.data().chunks(4) {
            let mean: f64 = ch.iter().sum::<f64>() / 4.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }
}
