//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles; calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! accumulates `f64` gradients for every variable that requires them.
//! The engine is deliberately small: dense f64 arrays, single-threaded,
//! deterministic evaluation order, no fancy kernel fusion. That is enough
//! for desk-scale video models and makes finite-difference validation and
//! byte-level reproducibility straightforward.

pub mod conv;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod pool;
pub mod sample;

use ndarray::{ArrayD, Axis, IxDyn};
use thiserror::Error;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    /// Elementwise with numpy-style broadcasting.
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Relu(Var),
    Gelu(Var),
    MinElem(Var, Var),
    MaxElem(Var, Var),
    MatMul(Var, Var),
    Transpose2(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, Vec<(usize, usize)>),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: ArrayD<f64>,
        inv_std: ArrayD<f64>,
    },
    CeWithLogits {
        logits: Var,
        targets: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: ArrayD<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        cols: ArrayD<f64>,
    },
    AvgPoolGrid {
        x: Var,
        stride: [usize; 3],
    },
    BilinearSample {
        map: Var,
        locs: Var,
    },
    Detach,
}

pub(crate) struct Node {
    pub value: ArrayD<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Records a computation as a flat sequence of nodes.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub(crate) fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record a constant leaf; gradients never flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Record a leaf that accumulates gradients (a trainable parameter).
    pub fn leaf(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    // ---- elementwise -------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Div(a, b), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        let rg = self.rg(a);
        self.push(v, Op::Neg(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        let rg = self.rg(a);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    /// Elementwise minimum; ties route the gradient to the first argument.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), f64::min);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MinElem(a, b), rg)
    }

    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let v = broadcast_binop(self.value(a), self.value(b), f64::max);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MaxElem(a, b), rg)
    }

    /// Stop-gradient: value passes through, backward stops here.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.push(v, Op::Detach, false)
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-D matrix product `(m,k) x (k,n) -> (m,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(
            av.shape()[1],
            bv.shape()[0],
            "matmul inner dims: {:?} x {:?}",
            av.shape(),
            bv.shape()
        );
        let v = av.dot(&bv).into_dyn();
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// 2-D transpose.
    pub fn transpose2(&mut self, a: Var) -> Var {
        let v = as2(self.value(a)).t().to_owned().into_dyn();
        let rg = self.rg(a);
        self.push(v, Op::Transpose2(a), rg)
    }

    /// Axis permutation for arbitrary rank.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Permute(a, axes.to_vec()), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = self
            .value(a)
            .view()
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum over one axis (the axis is removed).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let v = self.value(a).sum_axis(Axis(axis));
        let rg = self.rg(a);
        self.push(v, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let n = self.value(a).shape()[axis] as f64;
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(v, Op::Concat(parts.to_vec(), axis), rg)
    }

    /// Contiguous range slice per axis, `[(start, end)); ...]`, rank preserved.
    pub fn slice(&mut self, a: Var, ranges: &[(usize, usize)]) -> Var {
        let val = self.value(a);
        assert_eq!(ranges.len(), val.ndim(), "slice: rank mismatch");
        let info: Vec<ndarray::SliceInfoElem> = ranges
            .iter()
            .map(|&(s, e)| ndarray::SliceInfoElem::Slice {
                start: s as isize,
                end: Some(e as isize),
                step: 1,
            })
            .collect();
        let v = val
            .slice(info.as_slice())
            .as_standard_layout()
            .to_owned();
        let rg = self.rg(a);
        self.push(v, Op::Slice(a, ranges.to_vec()), rg)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a scalar output. Panics if `loss` is not scalar.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(
            self.value(loss).len() == 1,
            "backward requires a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            // keep the gradient available for callers (leaves and intermediates)
            grads[idx] = Some(gout);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], v: Var, g: ArrayD<f64>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => {
                // Matmul/transpose backward can yield F-order arrays; store
                // standard layout so callers can always take flat slices.
                let g = if g.is_standard_layout() {
                    g
                } else {
                    g.as_standard_layout().to_owned()
                };
                *slot = Some(g);
            }
        }
    }

    fn backprop_node(&self, idx: usize, gout: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, unbroadcast(gout.clone(), self.shape(*a)));
                self.accum(grads, *b, unbroadcast(gout.clone(), self.shape(*b)));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, unbroadcast(gout.clone(), self.shape(*a)));
                self.accum(grads, *b, unbroadcast(gout.mapv(|x| -x), self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let ga = broadcast_binop(gout, self.value(*b), |g, y| g * y);
                let gb = broadcast_binop(gout, self.value(*a), |g, x| g * x);
                self.accum(grads, *a, unbroadcast(ga, self.shape(*a)));
                self.accum(grads, *b, unbroadcast(gb, self.shape(*b)));
            }
            Op::Div(a, b) => {
                let ga = broadcast_binop(gout, self.value(*b), |g, y| g / y);
                self.accum(grads, *a, unbroadcast(ga, self.shape(*a)));
                let bv = self.value(*b);
                let av = self.value(*a);
                let gb_full = {
                    let num = broadcast_binop(gout, av, |g, x| g * x);
                    let den = broadcast_binop(&num, bv, |n, y| -n / (y * y));
                    den
                };
                self.accum(grads, *b, unbroadcast(gb_full, self.shape(*b)));
            }
            Op::Neg(a) => self.accum(grads, *a, gout.mapv(|x| -x)),
            Op::Scale(a, c) => self.accum(grads, *a, gout.mapv(|x| x * c)),
            Op::AddScalar(a) => self.accum(grads, *a, gout.clone()),
            Op::Exp(a) => {
                let g = gout * &node.value;
                self.accum(grads, *a, g);
            }
            Op::Ln(a) => {
                let g = gout / self.value(*a);
                self.accum(grads, *a, g);
            }
            Op::Abs(a) => {
                let g = gout
                    * &self
                        .value(*a)
                        .mapv(|x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 });
                self.accum(grads, *a, g);
            }
            Op::Sigmoid(a) => {
                let g = gout * &node.value.mapv(|s| s * (1.0 - s));
                self.accum(grads, *a, g);
            }
            Op::Relu(a) => {
                let g = gout * &self.value(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                self.accum(grads, *a, g);
            }
            Op::Gelu(a) => {
                let g = gout * &self.value(*a).mapv(gelu_deriv);
                self.accum(grads, *a, g);
            }
            Op::MinElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let pick_a = broadcast_binop(av, bv, |x, y| if x <= y { 1.0 } else { 0.0 });
                let ga = gout * &pick_a;
                let gb = gout * &pick_a.mapv(|m| 1.0 - m);
                self.accum(grads, *a, unbroadcast(ga, self.shape(*a)));
                self.accum(grads, *b, unbroadcast(gb, self.shape(*b)));
            }
            Op::MaxElem(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let pick_a = broadcast_binop(av, bv, |x, y| if x >= y { 1.0 } else { 0.0 });
                let ga = gout * &pick_a;
                let gb = gout * &pick_a.mapv(|m| 1.0 - m);
                self.accum(grads, *a, unbroadcast(ga, self.shape(*a)));
                self.accum(grads, *b, unbroadcast(gb, self.shape(*b)));
            }
            Op::MatMul(a, b) => {
                let g2 = as2(gout);
                let av = as2(self.value(*a));
                let bv = as2(self.value(*b));
                if self.rg(*a) {
                    let ga = g2.dot(&bv.t()).into_dyn();
                    self.accum(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = av.t().dot(&g2).into_dyn();
                    self.accum(grads, *b, gb);
                }
            }
            Op::Transpose2(a) => {
                let g = as2(gout).t().to_owned().into_dyn();
                self.accum(grads, *a, g);
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let g = gout
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                self.accum(grads, *a, g);
            }
            Op::Reshape(a) => {
                let g = gout
                    .view()
                    .as_standard_layout()
                    .to_owned()
                    .into_shape_with_order(IxDyn(self.shape(*a)))
                    .expect("reshape backward");
                self.accum(grads, *a, g);
            }
            Op::SumAll(a) => {
                let g0 = gout[[]];
                let g = ArrayD::from_elem(IxDyn(self.shape(*a)), g0);
                self.accum(grads, *a, g);
            }
            Op::SumAxis(a, axis) => {
                let mut g = gout.clone().insert_axis(Axis(*axis));
                let target = self.shape(*a);
                g = broadcast_binop(&g, &ArrayD::zeros(IxDyn(target)), |x, _| x);
                self.accum(grads, *a, g);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0usize;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    let ranges: Vec<(usize, usize)> = gout
                        .shape()
                        .iter()
                        .enumerate()
                        .map(|(i, &d)| if i == *axis { (offset, offset + len) } else { (0, d) })
                        .collect();
                    let info: Vec<ndarray::SliceInfoElem> = ranges
                        .iter()
                        .map(|&(s, e)| ndarray::SliceInfoElem::Slice {
                            start: s as isize,
                            end: Some(e as isize),
                            step: 1,
                        })
                        .collect();
                    let g = gout.slice(info.as_slice()).as_standard_layout().to_owned();
                    self.accum(grads, *p, g);
                    offset += len;
                }
            }
            Op::Slice(a, ranges) => {
                let mut g = ArrayD::<f64>::zeros(IxDyn(self.shape(*a)));
                let info: Vec<ndarray::SliceInfoElem> = ranges
                    .iter()
                    .map(|&(s, e)| ndarray::SliceInfoElem::Slice {
                        start: s as isize,
                        end: Some(e as isize),
                        step: 1,
                    })
                    .collect();
                g.slice_mut(info.as_slice()).assign(gout);
                self.accum(grads, *a, g);
            }
            Op::SoftmaxLast(a) => {
                let s = &node.value;
                let g = nn::softmax_backward(s, gout);
                self.accum(grads, *a, g);
            }
            Op::LogSoftmaxLast(a) => {
                let g = nn::log_softmax_backward(&node.value, gout);
                self.accum(grads, *a, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (gx, gg, gb) =
                    nn::layer_norm_backward(self.value(*x), self.value(*gamma), mean, inv_std, gout);
                self.accum(grads, *x, gx);
                self.accum(grads, *gamma, gg);
                self.accum(grads, *beta, gb);
            }
            Op::CeWithLogits { logits, targets } => {
                let g = nn::ce_backward(self.value(*logits), targets, gout);
                self.accum(grads, *logits, g);
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let g = ndarray::Zip::from(lv)
                    .and(targets)
                    .and(gout)
                    .map_collect(|&x, &t, &go| (sigmoid(x) - t) * go);
                self.accum(grads, *logits, g);
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                cols,
            } => {
                conv::conv2d_backward(self, *x, *w, *b, *stride, *pad, cols, gout, grads);
            }
            Op::AvgPoolGrid { x, stride } => {
                pool::avg_pool_grid_backward(self, *x, *stride, gout, grads);
            }
            Op::BilinearSample { map, locs } => {
                sample::bilinear_backward(self, *map, *locs, gout, grads);
            }
            Op::Detach => {}
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected a 2-D array")
}

/// Apply a binary op with numpy-style broadcasting.
pub(crate) fn broadcast_binop<F: Fn(f64, f64) -> f64>(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: F,
) -> ArrayD<f64> {
    if a.shape() == b.shape() {
        return ndarray::Zip::from(a).and(b).map_collect(|&x, &y| f(x, y));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape());
    let av = a
        .broadcast(IxDyn(&out_shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", a.shape(), out_shape));
    let bv = b
        .broadcast(IxDyn(&out_shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", b.shape(), out_shape));
    ndarray::Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast: {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

/// Reduce a broadcast gradient back to the original operand shape.
pub(crate) fn unbroadcast(mut g: ArrayD<f64>, target: &[usize]) -> ArrayD<f64> {
    while g.ndim() > target.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, (&gd, &td)) in g.shape().to_vec().iter().zip(target.iter()).enumerate() {
        if gd != td {
            debug_assert_eq!(td, 1, "unbroadcast: {:?} -> {:?}", g.shape(), target);
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    #[test]
    fn add_broadcast_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![10.0, 20.0]).unwrap());
        let c = t.add(a, b);
        assert_eq!(t.value(c).as_slice().unwrap(), &[11.0, 22.0, 13.0, 24.0]);
        let s = t.sum_all(c);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_matches_manual() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(t.value(c).as_slice().unwrap(), &[19.0, 22.0, 43.0, 50.0]);
        let s = t.sum_all(c);
        let g = t.backward(s);
        // d/dA (sum A B) = ones * B^T
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).into_dyn());
        let left = t.slice(a, &[(0, 2), (0, 1)]);
        let right = t.slice(a, &[(0, 2), (1, 3)]);
        let back = t.concat(&[left, right], 1);
        assert_eq!(t.value(back), t.value(a));
        let s = t.sum_all(back);
        let g = t.backward(s);
        assert!(g.get(a).unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let a = t.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let d = t.detach(a);
        let b = t.mul(a, d);
        let s = t.sum_all(b);
        let g = t.backward(s);
        // only the non-detached path contributes: d(sum a*const)/da = const = 2
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn min_max_route_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 5.0]).unwrap());
        let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, 2.0]).unwrap());
        let mn = t.min_elem(a, b);
        let s = t.sum_all(mn);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[1.0, 0.0]);
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
    }
}
