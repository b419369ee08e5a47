//! Recorded computation graph and reverse-mode gradients.
//!
//! A [`Graph`] is a tape of operations. Recording graphs store one node per
//! produced tensor; `no_grad` graphs run the same kernels without keeping a
//! tape. Backward visits nodes in reverse insertion order (a topological
//! order by construction), accumulating gradients where a value is used more
//! than once. Gradient propagation stops at leaves created with
//! `requires_grad = false`, so frozen weights never receive gradients.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvDims};
use super::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// Guard added to the sqrt backward denominator so a zero-valued term (e.g.
/// the smoothness penalty of a constant image) produces a finite gradient
/// instead of a division by zero.
const SQRT_GRAD_GUARD: f64 = 1e-12;

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Square(usize),
    Sqrt(usize),
    ScalarMul(usize, T),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
        dims: Box<ConvDims>,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor<T>,
        istd: Vec<T>,
        train: bool,
    },
    Reduce {
        input: usize,
        mask: Vec<bool>,
        mean: bool,
    },
    ReduceAll {
        input: usize,
        mean: bool,
    },
    Crop2d {
        input: usize,
        h0: usize,
        h1: usize,
        w0: usize,
        w1: usize,
    },
    AvgPool2 {
        input: usize,
    },
}

struct Node<T: Scalar> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    recording: bool,
    backward_done: bool,
}

/// Handle to a computation tape. Clones share the same tape. Recording and
/// backward are single-threaded; kernels may parallelize internally.
pub struct Graph<T: Scalar> {
    inner: Rc<RefCell<Tape<T>>>,
}

impl<T: Scalar> Clone for Graph<T> {
    fn clone(&self) -> Self {
        Graph {
            inner: Rc::clone(&self.inner),
        }
    }
}

/// A tensor value bound to a graph.
pub struct Var<T: Scalar> {
    graph: Graph<T>,
    id: Option<usize>,
    value: Tensor<T>,
}

impl<T: Scalar> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            graph: self.graph.clone(),
            id: self.id,
            value: self.value.clone(),
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backward.
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                recording: true,
                backward_done: false,
            })),
        }
    }

    /// A graph that evaluates values only; backward is unavailable.
    pub fn no_grad() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(Tape {
                nodes: Vec::new(),
                recording: false,
                backward_done: false,
            })),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    fn same_as(&self, other: &Graph<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Register an input value. Gradients are only propagated into leaves
    /// with `requires_grad = true`.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Result<Var<T>> {
        value.ensure_finite("leaf")?;
        let id = self.push(Op::Leaf, value.clone(), requires_grad);
        Ok(Var {
            graph: self.clone(),
            id,
            value,
        })
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Result<Var<T>> {
        self.leaf(value, false)
    }

    fn push(&self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Option<usize> {
        let mut tape = self.inner.borrow_mut();
        if !tape.recording {
            return None;
        }
        tape.nodes.push(Node {
            op,
            value,
            needs_grad,
            grad: None,
        });
        Some(tape.nodes.len() - 1)
    }

    fn needs_grad(&self, id: Option<usize>) -> bool {
        match id {
            Some(i) => self.inner.borrow().nodes[i].needs_grad,
            None => false,
        }
    }

    /// Compute gradients of a scalar loss for every node that can reach a
    /// trainable leaf. Gradient slots from any previous backward on other
    /// graphs are untouched; calling backward twice on the same graph is an
    /// error.
    pub fn backward(&self, loss: &Var<T>) -> Result<()> {
        if !self.same_as(&loss.graph) {
            return Err(Error::GraphMismatch);
        }
        if loss.value.numel() != 1 {
            return Err(Error::BackwardNonScalar {
                numel: loss.value.numel(),
            });
        }
        let mut tape = self.inner.borrow_mut();
        if !tape.recording {
            return Err(Error::BackwardWithoutRecording);
        }
        if tape.backward_done {
            return Err(Error::BackwardConsumed);
        }
        let root = loss.id.expect("recording graph vars carry ids");

        let n = tape.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.value.shape().dims(), T::one())?);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let keep = tape.nodes[id].needs_grad;
            if keep {
                Self::propagate(&tape.nodes, id, &g, &mut grads)?;
                tape.nodes[id].grad = Some(g);
            }
        }
        tape.backward_done = true;
        Ok(())
    }

    fn propagate(
        nodes: &[Node<T>],
        id: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let add_into = |grads: &mut [Option<Tensor<T>>], idx: usize, delta: Tensor<T>| {
            if !nodes[idx].needs_grad {
                return;
            }
            grads[idx] = Some(match grads[idx].take() {
                Some(existing) => zip_tensors(&existing, &delta, |a, b| a + b),
                None => delta,
            });
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if nodes[*a].needs_grad {
                    add_into(grads, *a, zip_tensors(g, &nodes[*b].value, |gi, bi| gi * bi));
                }
                if nodes[*b].needs_grad {
                    add_into(grads, *b, zip_tensors(g, &nodes[*a].value, |gi, ai| gi * ai));
                }
            }
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                add_into(
                    grads,
                    *a,
                    zip_tensors(g, &nodes[*a].value, |gi, xi| two * xi * gi),
                );
            }
            Op::Sqrt(a) => {
                let guard = T::from_f64(SQRT_GRAD_GUARD);
                let two = T::from_f64(2.0);
                // nodes[id].value holds sqrt(x)
                add_into(
                    grads,
                    *a,
                    zip_tensors(g, &nodes[id].value, |gi, yi| gi / (two * yi + guard)),
                );
            }
            Op::ScalarMul(a, c) => {
                let c = *c;
                add_into(grads, *a, g.map(|gi| gi * c));
            }
            Op::Relu(a) => {
                // subgradient at exactly zero is zero
                add_into(
                    grads,
                    *a,
                    zip_tensors(g, &nodes[*a].value, |gi, xi| {
                        if xi > T::zero() {
                            gi
                        } else {
                            T::zero()
                        }
                    }),
                );
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let x = &nodes[*input].value;
                let k = &nodes[*kernel].value;
                if nodes[*input].needs_grad {
                    let gin = kernels::conv2d_backward_input(k.data(), g.data(), dims);
                    add_into(grads, *input, Tensor::from_shape_vec(x.shape().clone(), gin));
                }
                if nodes[*kernel].needs_grad {
                    let gk = kernels::conv2d_backward_kernel(x.data(), g.data(), dims);
                    add_into(grads, *kernel, Tensor::from_shape_vec(k.shape().clone(), gk));
                }
                if nodes[*bias].needs_grad {
                    let gb = kernels::conv2d_backward_bias(g.data(), dims);
                    add_into(
                        grads,
                        *bias,
                        Tensor::from_shape_vec(nodes[*bias].value.shape().clone(), gb),
                    );
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                istd,
                train,
            } => {
                let (b, c, h, w) = nodes[*input].value.shape().dims4()?;
                let gamma_v = nodes[*gamma].value.data();
                let m = (b * h * w) as f64;
                let plane = h * w;

                // per-channel sums of g and g*xhat, fixed (b, h, w) order
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * plane;
                        let gs = &g.data()[base..base + plane];
                        let xs = &xhat.data()[base..base + plane];
                        for (gi, xi) in gs.iter().zip(xs.iter()) {
                            sum_g[ci] += *gi;
                            sum_gx[ci] += *gi * *xi;
                        }
                    }
                }
                if nodes[*gamma].needs_grad {
                    add_into(
                        grads,
                        *gamma,
                        Tensor::from_shape_vec(nodes[*gamma].value.shape().clone(), sum_gx.clone()),
                    );
                }
                if nodes[*beta].needs_grad {
                    add_into(
                        grads,
                        *beta,
                        Tensor::from_shape_vec(nodes[*beta].value.shape().clone(), sum_g.clone()),
                    );
                }
                if nodes[*input].needs_grad {
                    let mut gin = vec![T::zero(); b * c * plane];
                    let m_t = T::from_f64(m);
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let gs = &g.data()[base..base + plane];
                            let xs = &xhat.data()[base..base + plane];
                            let out = &mut gin[base..base + plane];
                            let scale = gamma_v[ci] * istd[ci];
                            if *train {
                                // through the batch statistics
                                let k = scale / m_t;
                                for ((o, gi), xi) in out.iter_mut().zip(gs).zip(xs) {
                                    *o = k * (m_t * *gi - sum_g[ci] - *xi * sum_gx[ci]);
                                }
                            } else {
                                for (o, gi) in out.iter_mut().zip(gs) {
                                    *o = scale * *gi;
                                }
                            }
                        }
                    }
                    add_into(
                        grads,
                        *input,
                        Tensor::from_shape_vec(nodes[*input].value.shape().clone(), gin),
                    );
                }
            }
            Op::Reduce { input, mask, mean } => {
                let dims = nodes[*input].value.shape().dims();
                let count: usize = dims
                    .iter()
                    .zip(mask.iter())
                    .filter(|(_, &r)| r)
                    .map(|(&d, _)| d)
                    .product();
                let scale = if *mean {
                    T::from_f64(1.0 / count as f64)
                } else {
                    T::one()
                };
                let gin = kernels::broadcast_reduced(g.data(), dims, mask, scale);
                add_into(
                    grads,
                    *input,
                    Tensor::from_shape_vec(nodes[*input].value.shape().clone(), gin),
                );
            }
            Op::ReduceAll { input, mean } => {
                let n = nodes[*input].value.numel();
                let scale = if *mean {
                    T::from_f64(1.0 / n as f64)
                } else {
                    T::one()
                };
                let gv = g.item() * scale;
                add_into(
                    grads,
                    *input,
                    Tensor::from_shape_vec(nodes[*input].value.shape().clone(), vec![gv; n]),
                );
            }
            Op::Crop2d {
                input,
                h0,
                h1,
                w0,
                w1,
            } => {
                let (b, c, h, w) = nodes[*input].value.shape().dims4()?;
                let gin = kernels::crop2d_backward(g.data(), b, c, h, w, *h0, *h1, *w0, *w1);
                add_into(
                    grads,
                    *input,
                    Tensor::from_shape_vec(nodes[*input].value.shape().clone(), gin),
                );
            }
            Op::AvgPool2 { input } => {
                let (b, c, h, w) = nodes[*input].value.shape().dims4()?;
                let gin = kernels::avg_pool2_backward(g.data(), b, c, h, w);
                add_into(
                    grads,
                    *input,
                    Tensor::from_shape_vec(nodes[*input].value.shape().clone(), gin),
                );
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn zip_tensors<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::from_shape_vec(
        a.shape().clone(),
        a.data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect(),
    )
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &Shape {
        self.value.shape()
    }

    pub fn graph(&self) -> &Graph<T> {
        &self.graph
    }

    /// Scalar payload of a one-element var.
    pub fn item(&self) -> T {
        self.value.item()
    }

    /// Gradient filled in by the last backward pass, if this node received one.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let id = self.id?;
        self.graph.inner.borrow().nodes[id].grad.clone()
    }

    fn unary(&self, op: impl FnOnce(usize) -> Op<T>, value: Tensor<T>, name: &str) -> Result<Var<T>> {
        value.ensure_finite(name)?;
        let needs = self.graph.needs_grad(self.id);
        let id = match self.id {
            Some(i) => self.graph.push(op(i), value.clone(), needs),
            None => None,
        };
        Ok(Var {
            graph: self.graph.clone(),
            id,
            value,
        })
    }

    fn binary(
        &self,
        rhs: &Var<T>,
        op: impl FnOnce(usize, usize) -> Op<T>,
        value: Tensor<T>,
        name: &str,
    ) -> Result<Var<T>> {
        if !self.graph.same_as(&rhs.graph) {
            return Err(Error::GraphMismatch);
        }
        value.ensure_finite(name)?;
        let needs = self.graph.needs_grad(self.id) || self.graph.needs_grad(rhs.id);
        let id = match (self.id, rhs.id) {
            (Some(a), Some(b)) => self.graph.push(op(a, b), value.clone(), needs),
            _ => None,
        };
        Ok(Var {
            graph: self.graph.clone(),
            id,
            value,
        })
    }

    fn check_same_shape(&self, rhs: &Var<T>, context: &str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape_mismatch(context, self.shape(), rhs.shape()));
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.check_same_shape(rhs, "add")?;
        let v = zip_tensors(&self.value, &rhs.value, |a, b| a + b);
        self.binary(rhs, Op::Add, v, "add")
    }

    pub fn sub(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.check_same_shape(rhs, "subtract")?;
        let v = zip_tensors(&self.value, &rhs.value, |a, b| a - b);
        self.binary(rhs, Op::Sub, v, "subtract")
    }

    pub fn mul(&self, rhs: &Var<T>) -> Result<Var<T>> {
        self.check_same_shape(rhs, "multiply")?;
        let v = zip_tensors(&self.value, &rhs.value, |a, b| a * b);
        self.binary(rhs, Op::Mul, v, "multiply")
    }

    pub fn square(&self) -> Result<Var<T>> {
        let v = self.value.map(|x| x * x);
        self.unary(Op::Square, v, "square")
    }

    pub fn sqrt(&self) -> Result<Var<T>> {
        let min = self
            .value
            .data()
            .iter()
            .fold(T::infinity(), |m, &x| m.min(x));
        if min < T::zero() {
            return Err(Error::SqrtNegative { min: min.as_f64() });
        }
        let v = self.value.map(|x| x.sqrt());
        self.unary(Op::Sqrt, v, "sqrt")
    }

    pub fn scalar_mul(&self, c: T) -> Result<Var<T>> {
        let v = self.value.map(|x| x * c);
        self.unary(|i| Op::ScalarMul(i, c), v, "scalar_mul")
    }

    pub fn relu(&self) -> Result<Var<T>> {
        let v = self.value.map(|x| if x > T::zero() { x } else { T::zero() });
        self.unary(Op::Relu, v, "relu")
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Var<T>> {
        let v = Tensor::scalar(kernels::sum_all(self.value.data()));
        self.unary(|i| Op::ReduceAll { input: i, mean: false }, v, "sum")
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn mean_all(&self) -> Result<Var<T>> {
        let n = T::from_f64(self.value.numel() as f64);
        let v = Tensor::scalar(kernels::sum_all(self.value.data()) / n);
        self.unary(|i| Op::ReduceAll { input: i, mean: true }, v, "mean")
    }

    pub fn sum_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        self.reduce_axes(axes, false)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Var<T>> {
        self.reduce_axes(axes, true)
    }

    /// Reduce over the listed axes; reduced extents stay in the shape as 1.
    fn reduce_axes(&self, axes: &[usize], mean: bool) -> Result<Var<T>> {
        let rank = self.value.rank();
        let mut mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::InvalidAxis { axis: a, rank });
            }
            mask[a] = true;
        }
        let dims = self.value.shape().dims();
        let mut data = kernels::sum_axes(self.value.data(), dims, &mask);
        if mean {
            let count: usize = dims
                .iter()
                .zip(mask.iter())
                .filter(|(_, &r)| r)
                .map(|(&d, _)| d)
                .product();
            let inv = T::from_f64(1.0 / count as f64);
            for x in &mut data {
                *x *= inv;
            }
        }
        let out_dims: Vec<usize> = dims
            .iter()
            .zip(mask.iter())
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let v = Tensor::from_vec(&out_dims, data)?;
        self.unary(
            |i| Op::Reduce {
                input: i,
                mask,
                mean,
            },
            v,
            "reduce",
        )
    }

    /// Spatial crop `[h0, h1) x [w0, w1)` of a rank-4 tensor.
    pub fn crop2d(&self, h0: usize, h1: usize, w0: usize, w1: usize) -> Result<Var<T>> {
        let (b, c, h, w) = self.shape().dims4()?;
        if h1 > h || w1 > w || h0 >= h1 || w0 >= w1 {
            return Err(Error::InvalidArgument(format!(
                "crop [{h0},{h1})x[{w0},{w1}) out of bounds for {}",
                self.shape()
            )));
        }
        let data = kernels::crop2d_forward(self.value.data(), b, c, h, w, h0, h1, w0, w1);
        let v = Tensor::from_vec(&[b, c, h1 - h0, w1 - w0], data)?;
        self.unary(
            |i| Op::Crop2d {
                input: i,
                h0,
                h1,
                w0,
                w1,
            },
            v,
            "crop2d",
        )
    }

    /// 2x2 average pooling with stride 2; extents must be even.
    pub fn avg_pool2(&self) -> Result<Var<T>> {
        let (b, c, h, w) = self.shape().dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "avg_pool2 needs even spatial extents, got {}",
                self.shape()
            )));
        }
        let data = kernels::avg_pool2_forward(self.value.data(), b, c, h, w);
        let v = Tensor::from_vec(&[b, c, h / 2, w / 2], data)?;
        self.unary(|i| Op::AvgPool2 { input: i }, v, "avg_pool2")
    }
}

/// Zero-padded cross-correlation of `input [B,Cin,H,W]` with
/// `kernel [Cout,Cin,k,k]` plus per-channel `bias [Cout]`.
pub fn conv2d<T: Scalar>(
    input: &Var<T>,
    kernel: &Var<T>,
    bias: &Var<T>,
    padding: usize,
    stride: usize,
) -> Result<Var<T>> {
    if !input.graph.same_as(&kernel.graph) || !input.graph.same_as(&bias.graph) {
        return Err(Error::GraphMismatch);
    }
    let (batch, c_in, h_in, w_in) = input.shape().dims4()?;
    let kd = kernel.shape().dims();
    if kernel.shape().rank() != 4 || kd[2] != kd[3] {
        return Err(Error::shape_mismatch(
            "conv2d kernel [Cout,Cin,k,k]",
            kernel.shape(),
            "square rank-4 kernel",
        ));
    }
    let (c_out, kc_in, k) = (kd[0], kd[1], kd[2]);
    if kc_in != c_in {
        return Err(Error::shape_mismatch(
            "conv2d input channels",
            c_in,
            kc_in,
        ));
    }
    if bias.shape().rank() != 1 || bias.shape().dim(0) != c_out {
        return Err(Error::shape_mismatch(
            "conv2d bias",
            bias.shape(),
            format!("[{c_out}]"),
        ));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
    }
    let out_extent = |extent: usize| -> Result<usize> {
        let span = extent + 2 * padding;
        if span < k || (span - k) % stride != 0 {
            return Err(Error::NonIntegralOutput {
                input: extent,
                padding,
                kernel: k,
                stride,
            });
        }
        Ok((span - k) / stride + 1)
    };
    let h_out = out_extent(h_in)?;
    let w_out = out_extent(w_in)?;

    let dims = ConvDims {
        batch,
        c_in,
        h_in,
        w_in,
        c_out,
        k,
        padding,
        stride,
        h_out,
        w_out,
    };
    let data = kernels::conv2d_forward(input.value.data(), kernel.value.data(), bias.value.data(), &dims);
    let value = Tensor::from_vec(&[batch, c_out, h_out, w_out], data)?;
    value.ensure_finite("conv2d")?;

    let needs = input.graph.needs_grad(input.id)
        || input.graph.needs_grad(kernel.id)
        || input.graph.needs_grad(bias.id);
    let id = match (input.id, kernel.id, bias.id) {
        (Some(i), Some(kid), Some(bid)) => input.graph.push(
            Op::Conv2d {
                input: i,
                kernel: kid,
                bias: bid,
                dims: Box::new(dims),
            },
            value.clone(),
            needs,
        ),
        _ => None,
    };
    Ok(Var {
        graph: input.graph.clone(),
        id,
        value,
    })
}

/// Normalization mode: batch statistics (train) or running statistics (infer).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics consumed in infer mode and refreshed during training.
#[derive(Debug, Clone)]
pub struct BnStats<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnStats<T> {
    /// Fresh statistics: mean 0, variance 1.
    pub fn init(channels: usize) -> Result<Self> {
        Ok(BnStats {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::ones(&[channels])?,
        })
    }

    /// Exponential moving average update; `momentum` weighs the new batch.
    /// The running variance tracks the unbiased batch variance.
    pub fn ema_update(&mut self, batch: &BnBatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::one() - m;
        let mean: Vec<T> = self
            .mean
            .data()
            .iter()
            .zip(batch.mean.iter())
            .map(|(&old, &new)| keep * old + m * new)
            .collect();
        let var: Vec<T> = self
            .var
            .data()
            .iter()
            .zip(batch.var_unbiased.iter())
            .map(|(&old, &new)| keep * old + m * new)
            .collect();
        self.mean = Tensor::from_shape_vec(self.mean.shape().clone(), mean);
        self.var = Tensor::from_shape_vec(self.var.shape().clone(), var);
    }
}

/// Per-channel statistics of one batch, reported by train-mode batch_norm.
#[derive(Debug, Clone)]
pub struct BnBatchStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var_biased: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Per-channel batch normalization with affine parameters.
///
/// Train mode normalizes by the current batch statistics and reports them so
/// the caller can fold them into its running statistics; infer mode uses
/// `running`. Differentiable through the batch statistics in train mode.
pub fn batch_norm<T: Scalar>(
    input: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: &BnStats<T>,
    mode: BnMode,
    epsilon: f64,
) -> Result<(Var<T>, Option<BnBatchStats<T>>)> {
    if !input.graph.same_as(&gamma.graph) || !input.graph.same_as(&beta.graph) {
        return Err(Error::GraphMismatch);
    }
    if epsilon <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "batch_norm epsilon must be positive, got {epsilon}"
        )));
    }
    let (b, c, h, w) = input.shape().dims4()?;
    for (name, t) in [("gamma", &gamma.value), ("beta", &beta.value)] {
        if t.rank() != 1 || t.shape().dim(0) != c {
            return Err(Error::shape_mismatch(
                format!("batch_norm {name}"),
                t.shape(),
                format!("[{c}]"),
            ));
        }
    }
    let m = b * h * w;
    let plane = h * w;
    let eps = T::from_f64(epsilon);
    let x = input.value.data();
    let gamma_v = gamma.value.data();
    let beta_v = beta.value.data();

    let (mean, var_biased, var_unbiased) = match mode {
        BnMode::Train => {
            if m < 2 {
                return Err(Error::InvalidArgument(
                    "batch_norm train mode needs at least 2 elements per channel".into(),
                ));
            }
            let mut mean = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for &xi in &x[base..base + plane] {
                        mean[ci] += xi;
                    }
                }
            }
            let inv_m = T::from_f64(1.0 / m as f64);
            for mu in &mut mean {
                *mu *= inv_m;
            }
            let mut var = vec![T::zero(); c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * plane;
                    for &xi in &x[base..base + plane] {
                        let d = xi - mean[ci];
                        var[ci] += d * d;
                    }
                }
            }
            let inv_m1 = T::from_f64(1.0 / (m - 1) as f64);
            let var_unbiased: Vec<T> = var.iter().map(|&s| s * inv_m1).collect();
            for v in &mut var {
                *v *= inv_m;
            }
            (mean, var.clone(), var_unbiased)
        }
        BnMode::Infer => {
            let mean = running.mean.data().to_vec();
            let var = running.var.data().to_vec();
            (mean, var.clone(), var)
        }
    };

    let istd: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], istd[ci], gamma_v[ci], beta_v[ci]);
            for j in base..base + plane {
                let xh = (x[j] - mu) * is;
                xhat[j] = xh;
                out[j] = ga * xh + be;
            }
        }
    }
    let xhat = Tensor::from_shape_vec(input.value.shape().clone(), xhat);
    let value = Tensor::from_shape_vec(input.value.shape().clone(), out);
    value.ensure_finite("batch_norm")?;

    let batch_stats = match mode {
        BnMode::Train => Some(BnBatchStats {
            mean,
            var_biased,
            var_unbiased,
        }),
        BnMode::Infer => None,
    };

    let needs = input.graph.needs_grad(input.id)
        || input.graph.needs_grad(gamma.id)
        || input.graph.needs_grad(beta.id);
    let id = match (input.id, gamma.id, beta.id) {
        (Some(i), Some(gi), Some(bi)) => input.graph.push(
            Op::BatchNorm {
                input: i,
                gamma: gi,
                beta: bi,
                xhat,
                istd,
                train: mode == BnMode::Train,
            },
            value.clone(),
            needs,
        ),
        _ => None,
    };
    Ok((
        Var {
            graph: input.graph.clone(),
            id,
            value,
        },
        batch_stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random::<f64>() * 2.0 - 1.0).unwrap()
    }

    /// Direct per-output-element convolution, independent of the kernels module.
    fn conv_oracle(
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: &[f64],
        pad: usize,
        stride: usize,
    ) -> Tensor<f64> {
        let (b, c_in, h, w) = x.shape().dims4().unwrap();
        let kd = k.shape().dims();
        let (c_out, ksz) = (kd[0], kd[2]);
        let h_out = (h + 2 * pad - ksz) / stride + 1;
        let w_out = (w + 2 * pad - ksz) / stride + 1;
        let mut out = vec![0.0; b * c_out * h_out * w_out];
        for bi in 0..b {
            for co in 0..c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bias[co];
                        for ci in 0..c_in {
                            for kh in 0..ksz {
                                for kw in 0..ksz {
                                    let ih = (oh * stride + kh) as isize - pad as isize;
                                    let iw = (ow * stride + kw) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        acc += x.at4(bi, ci, ih as usize, iw as usize)
                                            * k.at4(co, ci, kh, kw);
                                    }
                                }
                            }
                        }
                        out[((bi * c_out + co) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(&[b, c_out, h_out, w_out], out).unwrap()
    }

    fn conv_consts(
        g: &Graph<f64>,
        x: &Tensor<f64>,
        k: &Tensor<f64>,
        bias: &Tensor<f64>,
        pad: usize,
        stride: usize,
    ) -> Var<f64> {
        let xv = g.constant(x.clone()).unwrap();
        let kv = g.constant(k.clone()).unwrap();
        let bv = g.constant(bias.clone()).unwrap();
        conv2d(&xv, &kv, &bv, pad, stride).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[2, 1, 6, 5]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let k = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let g = Graph::no_grad();
        let y = conv_consts(&g, &x, &k, &bias, 1, 1);
        assert!(y.value().bit_eq(&x));
    }

    #[test]
    fn conv2d_all_ones_2x2_kernel_sums_elements() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2]).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let g = Graph::no_grad();
        let y = conv_consts(&g, &x, &k, &bias, 0, 1);
        assert_eq!(y.shape().dims(), &[1, 1, 1, 1]);
        assert_eq!(y.value().data()[0], 10.0);
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[1, 2, 5, 5]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = random_tensor(&mut rng, &[3]);
        for (pad, stride) in [(0usize, 1usize), (1, 1), (2, 1), (1, 2)] {
            let g = Graph::no_grad();
            let got = conv_consts(&g, &x, &k, &bias, pad, stride);
            let want = conv_oracle(&x, &k, bias.data(), pad, stride);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.value().data().iter().zip(want.data()) {
                let rel = (a - b).abs() / b.abs().max(1.0);
                assert!(rel < 1e-12, "pad {pad} stride {stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_rejects_non_integral_output() {
        let x = Tensor::zeros(&[1, 1, 4, 4]).unwrap();
        let k = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        let bias = Tensor::zeros(&[1]).unwrap();
        let g = Graph::no_grad();
        let xv = g.constant(x).unwrap();
        let kv = g.constant(k).unwrap();
        let bv = g.constant(bias).unwrap();
        let err = conv2d(&xv, &kv, &bv, 0, 2).unwrap_err();
        assert!(matches!(err, Error::NonIntegralOutput { .. }));
    }

    #[test]
    fn conv2d_rejects_channel_mismatch() {
        let g = Graph::no_grad();
        let xv = g.constant(Tensor::zeros(&[1, 2, 4, 4]).unwrap()).unwrap();
        let kv = g.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap()).unwrap();
        let bv = g.constant(Tensor::zeros(&[1]).unwrap()).unwrap();
        assert!(matches!(
            conv2d(&xv, &kv, &bv, 1, 1).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[2, 2, 5, 5]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = random_tensor(&mut rng, &[3]);

        // with respect to the input
        let (kc, bc) = (k.clone(), bias.clone());
        let rep = grad_check(
            move |g, xv| {
                let kv = g.constant(kc.clone())?;
                let bv = g.constant(bc.clone())?;
                conv2d(xv, &kv, &bv, 1, 1)?.square()?.sum_all()
            },
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "input grad rel err {}", rep.max_rel_err);

        // with respect to the kernel
        let (xc, bc) = (x.clone(), bias.clone());
        let rep = grad_check(
            move |g, kv| {
                let xv = g.constant(xc.clone())?;
                let bv = g.constant(bc.clone())?;
                conv2d(&xv, kv, &bv, 1, 1)?.square()?.sum_all()
            },
            &k,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "kernel grad rel err {}", rep.max_rel_err);

        // with respect to the bias
        let (xc, kc) = (x.clone(), k.clone());
        let rep = grad_check(
            move |g, bv| {
                let xv = g.constant(xc.clone())?;
                let kv = g.constant(kc.clone())?;
                conv2d(&xv, &kv, bv, 1, 1)?.square()?.sum_all()
            },
            &bias,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "bias grad rel err {}", rep.max_rel_err);
    }

    #[test]
    fn batch_norm_infer_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
        let g = Graph::no_grad();
        let xv = g.constant(x.clone()).unwrap();
        let gamma = g.constant(Tensor::ones(&[3]).unwrap()).unwrap();
        let beta = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let running = BnStats::init(3).unwrap();
        let (y, stats) = batch_norm(&xv, &gamma, &beta, &running, BnMode::Infer, 1e-9).unwrap();
        assert!(stats.is_none());
        assert!(y.value().max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn batch_norm_train_normalizes_per_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[4, 3, 5, 5], |_| rng.random::<f64>() * 3.0 + 2.0).unwrap();
        let g = Graph::no_grad();
        let xv = g.constant(x).unwrap();
        let gamma = g.constant(Tensor::ones(&[3]).unwrap()).unwrap();
        let beta = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        let running = BnStats::init(3).unwrap();
        let (y, stats) = batch_norm(&xv, &gamma, &beta, &running, BnMode::Train, 1e-12).unwrap();
        let stats = stats.unwrap();
        let (b, c, h, w) = y.shape().dims4().unwrap();
        let m = (b * h * w) as f64;
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        let v = y.value().at4(bi, ci, hi, wi);
                        sum += v;
                        sum_sq += v * v;
                    }
                }
            }
            let mean = sum / m;
            let var = sum_sq / m - mean * mean;
            assert!(mean.abs() < 1e-10, "channel {ci} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {ci} var {var}");
            assert!(stats.var_unbiased[ci] > stats.var_biased[ci]);
        }
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_tensor(&mut rng, &[2, 3, 4, 4]);
        let gamma = Tensor::from_fn(&[3], |_| rng.random::<f64>() + 0.5).unwrap();
        let beta = random_tensor(&mut rng, &[3]);
        let running = BnStats::init(3).unwrap();

        for mode in [BnMode::Train, BnMode::Infer] {
            let (gc, bc, rc) = (gamma.clone(), beta.clone(), running.clone());
            let rep = grad_check(
                move |g, xv| {
                    let gv = g.constant(gc.clone())?;
                    let bv = g.constant(bc.clone())?;
                    let (y, _) = batch_norm(xv, &gv, &bv, &rc, mode, 1e-5)?;
                    y.square()?.sum_all()
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(rep.passed, "{mode:?} input grad rel err {}", rep.max_rel_err);
        }

        let (xc, bc, rc) = (x.clone(), beta.clone(), running.clone());
        let rep = grad_check(
            move |g, gv| {
                let xv = g.constant(xc.clone())?;
                let bv = g.constant(bc.clone())?;
                let (y, _) = batch_norm(&xv, gv, &bv, &rc, BnMode::Train, 1e-5)?;
                y.square()?.sum_all()
            },
            &gamma,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "gamma grad rel err {}", rep.max_rel_err);

        let (xc, gc, rc) = (x.clone(), gamma.clone(), running.clone());
        let rep = grad_check(
            move |g, bv| {
                let xv = g.constant(xc.clone())?;
                let gv = g.constant(gc.clone())?;
                let (y, _) = batch_norm(&xv, &gv, bv, &rc, BnMode::Train, 1e-5)?;
                y.square()?.sum_all()
            },
            &beta,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "beta grad rel err {}", rep.max_rel_err);
    }

    #[test]
    fn batch_norm_rejects_bad_epsilon_and_tiny_batch() {
        let g = Graph::no_grad();
        let xv = g.constant(Tensor::zeros(&[1, 2, 1, 1]).unwrap()).unwrap();
        let gamma = g.constant(Tensor::ones(&[2]).unwrap()).unwrap();
        let beta = g.constant(Tensor::zeros(&[2]).unwrap()).unwrap();
        let running = BnStats::init(2).unwrap();
        assert!(batch_norm(&xv, &gamma, &beta, &running, BnMode::Train, 0.0).is_err());
        assert!(batch_norm(&xv, &gamma, &beta, &running, BnMode::Train, 1e-5).is_err());
        // infer mode is fine with one element per channel
        assert!(batch_norm(&xv, &gamma, &beta, &running, BnMode::Infer, 1e-5).is_ok());
    }

    #[test]
    fn relu_basic_and_gradient() {
        let g = Graph::no_grad();
        let x = g
            .constant(Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 0.0, 2.0]);

        let pos = g
            .constant(Tensor::from_vec(&[3], vec![0.5, 1.0, 7.0]).unwrap())
            .unwrap();
        assert_eq!(pos.relu().unwrap().value().data(), &[0.5, 1.0, 7.0]);

        // elements bounded away from the kink
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[2, 1, 4, 4], |_| {
            let mag = 0.1 + 0.9 * rng.random::<f64>();
            if rng.random::<f64>() < 0.5 {
                mag
            } else {
                -mag
            }
        })
        .unwrap();
        let rep = grad_check(|_, xv| xv.relu()?.square()?.sum_all(), &x, 1e-5, 1e-4).unwrap();
        assert!(rep.passed, "relu grad rel err {}", rep.max_rel_err);
    }

    #[test]
    fn elementwise_examples() {
        let g = Graph::no_grad();
        let x = g
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap())
            .unwrap();
        let zero = x.sub(&x).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));

        let s = g
            .constant(Tensor::from_vec(&[2], vec![4.0, 9.0]).unwrap())
            .unwrap();
        assert_eq!(s.sqrt().unwrap().value().data(), &[2.0, 3.0]);

        let neg = g
            .constant(Tensor::from_vec(&[2], vec![1.0, -0.1]).unwrap())
            .unwrap();
        assert!(matches!(
            neg.sqrt().unwrap_err(),
            Error::SqrtNegative { .. }
        ));

        let short = g.constant(Tensor::zeros(&[3]).unwrap()).unwrap();
        assert!(matches!(
            x.add(&short).unwrap_err(),
            Error::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn composite_sqrt_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_tensor(&mut rng, &[2, 1, 3, 3]);
        // keep b far from a so the norm is bounded away from zero
        let b = a.map(|v| v + 2.0);
        let rep = grad_check(
            move |g, av| {
                let bv = g.constant(b.clone())?;
                av.sub(&bv)?.square()?.sum_all()?.sqrt()
            },
            &a,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "rel err {}", rep.max_rel_err);
    }

    /// Pairwise-tree summation, the second independent reduction oracle.
    fn pairwise_sum(v: &[f64]) -> f64 {
        match v.len() {
            0 => 0.0,
            1 => v[0],
            2 => v[0] + v[1],
            n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
        }
    }

    #[test]
    fn reductions_match_oracles() {
        let g = Graph::no_grad();
        let ones = g.constant(Tensor::ones(&[2, 2]).unwrap()).unwrap();
        assert_eq!(ones.sum_all().unwrap().item(), 4.0);

        let v = g
            .constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        assert_eq!(v.mean_all().unwrap().item(), 2.5);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let big = Tensor::from_fn(&[100_000], |_| rng.random::<f64>()).unwrap();
        let sequential: f64 = {
            let mut acc = 0.0;
            for &x in big.data() {
                acc += x;
            }
            acc
        };
        let tree = pairwise_sum(big.data());
        let got = g.constant(big.clone()).unwrap().sum_all().unwrap().item();
        assert!((got - sequential).abs() / sequential.abs() < 1e-12);
        assert!((got - tree).abs() / tree.abs() < 1e-12);

        // determinism: identical input, bit-identical output
        let again = g.constant(big).unwrap().sum_all().unwrap().item();
        assert_eq!(got.to_bits(), again.to_bits());
    }

    #[test]
    fn reduce_axes_and_errors() {
        let g = Graph::no_grad();
        let t = g
            .constant(Tensor::from_vec(&[2, 1, 2, 2], vec![1., 2., 3., 4., 10., 20., 30., 40.]).unwrap())
            .unwrap();
        let per_image = t.sum_axes(&[1, 2, 3]).unwrap();
        assert_eq!(per_image.shape().dims(), &[2, 1, 1, 1]);
        assert_eq!(per_image.value().data(), &[10.0, 100.0]);

        let mean = t.mean_axes(&[1, 2, 3]).unwrap();
        assert_eq!(mean.value().data(), &[2.5, 25.0]);

        assert!(matches!(
            t.sum_axes(&[4]).unwrap_err(),
            Error::InvalidAxis { .. }
        ));
    }

    #[test]
    fn reduce_axes_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random_tensor(&mut rng, &[2, 2, 3, 3]);
        let rep = grad_check(
            |_, xv| xv.sum_axes(&[1, 2, 3])?.square()?.sum_all(),
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "sum_axes rel err {}", rep.max_rel_err);
        let rep = grad_check(
            |_, xv| xv.mean_axes(&[0, 2])?.square()?.sum_all(),
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "mean_axes rel err {}", rep.max_rel_err);
    }

    #[test]
    fn crop_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_tensor(&mut rng, &[1, 2, 6, 6]);
        let rep = grad_check(
            |_, xv| xv.crop2d(1, 5, 0, 4)?.square()?.sum_all(),
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "crop rel err {}", rep.max_rel_err);
        let rep = grad_check(
            |_, xv| xv.avg_pool2()?.square()?.sum_all(),
            &x,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(rep.passed, "pool rel err {}", rep.max_rel_err);
    }

    #[test]
    fn crop_values_and_bounds() {
        let g = Graph::no_grad();
        let t = g
            .constant(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64).unwrap())
            .unwrap();
        let c = t.crop2d(1, 3, 1, 3).unwrap();
        assert_eq!(c.value().data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(t.crop2d(0, 4, 0, 3).is_err());
        assert!(t.crop2d(2, 2, 0, 3).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let g = Graph::new();
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap();
        let x = g.leaf(t.clone(), true).unwrap();
        let loss = x.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0; 6]);

        let g = Graph::new();
        let x = g.leaf(t.clone(), true).unwrap();
        let loss = x.square().unwrap().sum_all().unwrap();
        g.backward(&loss).unwrap();
        let want: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(x.grad().unwrap().data(), &want[..]);
    }

    #[test]
    fn backward_accumulates_across_reuse() {
        let g = Graph::new();
        let x = g
            .leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap(), true)
            .unwrap();
        // loss = sum(x * x + x) -> grad = 2x + 1
        let loss = x.mul(&x).unwrap().add(&x).unwrap().sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn backward_errors() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 2]).unwrap(), true).unwrap();
        let y = x.square().unwrap();
        assert!(matches!(
            g.backward(&y).unwrap_err(),
            Error::BackwardNonScalar { .. }
        ));
        let loss = y.sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert!(matches!(
            g.backward(&loss).unwrap_err(),
            Error::BackwardConsumed
        ));

        let ng = Graph::no_grad();
        let x = ng.leaf(Tensor::ones(&[1]).unwrap(), true).unwrap();
        let loss = x.sum_all().unwrap();
        assert!(matches!(
            ng.backward(&loss).unwrap_err(),
            Error::BackwardWithoutRecording
        ));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = random_tensor(&mut rng, &[2, 2, 4, 4]);

        let grad_of = |combined: bool| -> Vec<f64> {
            let g = Graph::new();
            let x = g.leaf(t.clone(), true).unwrap();
            let f = x.sum_all().unwrap();
            let q = x.square().unwrap().sum_all().unwrap();
            if combined {
                let loss = f.add(&q).unwrap();
                g.backward(&loss).unwrap();
                x.grad().unwrap().data().to_vec()
            } else {
                g.backward(&f).unwrap();
                let gf = x.grad().unwrap().data().to_vec();
                let g2 = Graph::new();
                let x2 = g2.leaf(t.clone(), true).unwrap();
                let q2 = x2.square().unwrap().sum_all().unwrap();
                g2.backward(&q2).unwrap();
                gf.iter()
                    .zip(x2.grad().unwrap().data())
                    .map(|(a, b)| a + b)
                    .collect()
            }
        };
        let combined = grad_of(true);
        let separate = grad_of(false);
        for (a, b) in combined.iter().zip(separate.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]).unwrap(), true).unwrap();
        let frozen = g.leaf(Tensor::ones(&[2]).unwrap(), false).unwrap();
        let loss = x.mul(&frozen).unwrap().sum_all().unwrap();
        g.backward(&loss).unwrap();
        assert!(x.grad().is_some());
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn nan_input_is_rejected() {
        let g = Graph::no_grad();
        let bad = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(
            g.leaf(bad, false).unwrap_err(),
            Error::NonFinite { .. }
        ));
    }
}
