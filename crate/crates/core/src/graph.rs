//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough context to push gradients back to its inputs. Forward passes
//! build a fresh graph per example; [`Graph::backward`] walks the tape once
//! in reverse.

use std::cell::RefCell;
use std::rc::Rc;

use crate::scalar::Scalar;
use crate::tensor::{permute_map, Tensor};

/// Sentinel in gather/scatter maps: "no source" (gather) or "dropped" (scatter).
pub const NONE: u32 = u32::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Prelu {
        x: Var,
        slope: Var,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gather {
        x: Var,
        map: Rc<Vec<u32>>,
    },
    Scatter {
        x: Var,
        map: Rc<Vec<u32>>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: Vec<usize>,
    },
    Sum(Var),
    SiSnr {
        est: Var,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `c (+)= op(a) * op(b)` where `op(a)` is `m x k` and `op(b)` is `k x n`.
///
/// A transposed operand is stored with its logical dimensions swapped.
#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "node is not a scalar");
        value.data()[0]
    }

    fn elementwise(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let v = self.elementwise(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let v = self.elementwise(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let v = self.elementwise(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), ng)
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let width = *vx.shape().last().expect("rank >= 1");
        assert_eq!(vb.len(), width, "bias width mismatch");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(width) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(out, Op::AddBias { x, bias }, ng)
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands sharing the leading batch dimension. `ta`/`tb` transpose the
    /// trailing two axes.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), sb.len(), "matmul rank mismatch");
        let (batch, ra, rb) = match sa.len() {
            2 => (1, [sa[0], sa[1]], [sb[0], sb[1]]),
            3 => {
                assert_eq!(sa[0], sb[0], "matmul batch mismatch");
                (sa[0], [sa[1], sa[2]], [sb[1], sb[2]])
            }
            r => panic!("matmul supports rank 2 or 3, got {r}"),
        };
        let (m, k) = if ta { (ra[1], ra[0]) } else { (ra[0], ra[1]) };
        let (k2, n) = if tb { (rb[1], rb[0]) } else { (rb[0], rb[1]) };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {sa:?} x {sb:?}");
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &va.data()[bi * m * k..(bi + 1) * m * k],
                ta,
                &vb.data()[bi * k * n..(bi + 1) * k * n],
                tb,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let ng = self.needs(a) || self.needs(b);
        drop((va, vb));
        self.push(
            Tensor::new(&shape, out).expect("matmul shape"),
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                batch,
                m,
                k,
                n,
            },
            ng,
        )
    }

    pub fn relu(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.needs(x);
        self.push(out, Op::Tanh(x), ng)
    }

    /// Parametric ReLU with a single learned slope for negative inputs.
    pub fn prelu(&self, x: Var, slope: Var) -> Var {
        let a = self.scalar(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        let ng = self.needs(x) || self.needs(slope);
        self.push(out, Op::Prelu { x, slope }, ng)
    }

    /// Softmax along the last axis.
    pub fn softmax(&self, x: Var) -> Var {
        let vx = self.value(x);
        let width = *vx.shape().last().expect("rank >= 1");
        let mut out = (*vx).clone();
        for row in out.data_mut().chunks_mut(width) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.needs(x);
        drop(vx);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Layer normalisation over the last axis with elementwise gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: T) -> Var {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gain), self.value(bias));
        let width = *vx.shape().last().expect("rank >= 1");
        assert_eq!(vg.len(), width, "layer-norm gain width mismatch");
        assert_eq!(vb.len(), width, "layer-norm bias width mismatch");
        let w = T::from_usize(width).expect("width as scalar");
        let rows = vx.len() / width;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(width) {
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (i, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * vg.data()[i] + vb.data()[i]);
            }
        }
        let shape = vx.shape().to_vec();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        drop((vx, vg, vb));
        self.push(
            Tensor::new(&shape, out).expect("layer-norm shape"),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i] == NONE`.
    pub fn gather(&self, x: Var, map: Rc<Vec<u32>>, shape: &[usize]) -> Var {
        assert_eq!(map.len(), shape.iter().product::<usize>(), "gather map size");
        let vx = self.value(x);
        let src = vx.data();
        let data = map
            .iter()
            .map(|&i| if i == NONE { T::zero() } else { src[i as usize] })
            .collect();
        let ng = self.needs(x);
        drop(vx);
        self.push(
            Tensor::new(shape, data).expect("gather shape"),
            Op::Gather { x, map },
            ng,
        )
    }

    /// `out[map[i]] += x[i]`, skipping entries where `map[i] == NONE`.
    pub fn scatter_add(&self, x: Var, map: Rc<Vec<u32>>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(map.len(), vx.len(), "scatter map size");
        let mut out = Tensor::zeros(shape);
        {
            let dst = out.data_mut();
            for (&i, &v) in map.iter().zip(vx.data()) {
                if i != NONE {
                    dst[i as usize] += v;
                }
            }
        }
        let ng = self.needs(x);
        drop(vx);
        self.push(out, Op::Scatter { x, map }, ng)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.value(x))
            .clone()
            .reshape(shape)
            .expect("reshape preserves element count");
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Var {
        let shape = self.shape(x);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let map = permute_map(&shape, axes);
        self.gather(x, Rc::new(map), &out_shape)
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let shape = self.shape(x);
        assert!(start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut map = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            map.extend((0..len * inner).map(|i| (base + i) as u32));
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, Rc::new(map), &out_shape)
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p)).collect();
        let first = &shapes[0];
        for s in &shapes[1..] {
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in s.iter().zip(first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let inner: Vec<usize> = shapes.iter().map(|s| s[axis] * tail).collect();
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|&p| self.value(p)).collect();
        let mut out = Vec::with_capacity(outer * inner.iter().sum::<usize>());
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&inner) {
                out.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        let ng = parts.iter().any(|&p| self.needs(p));
        drop(values);
        self.push(
            Tensor::new(&shape, out).expect("concat shape"),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
            },
            ng,
        )
    }

    pub fn sum(&self, x: Var) -> Var {
        let total = self.value(x).sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(total), Op::Sum(x), ng)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).expect("length as scalar");
        let s = self.sum(x);
        self.scale(s, T::one() / n)
    }

    /// Scale-invariant SNR (dB) of `est` against a fixed reference.
    ///
    /// Both signals are zero-meaned; `eps` guards the projection and both
    /// energies. The value is uncapped so the gradient never vanishes.
    pub fn si_snr(&self, est: Var, reference: &[T], eps: f64) -> Var {
        let ve = self.value(est);
        assert_eq!(ve.len(), reference.len(), "si-snr length mismatch");
        let n = reference.len() as f64;
        let e: Vec<f64> = ve.data().iter().map(|v| v.as_f64()).collect();
        let s: Vec<f64> = reference.iter().map(|v| v.as_f64()).collect();
        let me = e.iter().sum::<f64>() / n;
        let ms = s.iter().sum::<f64>() / n;
        let e0: Vec<f64> = e.iter().map(|v| v - me).collect();
        let s0: Vec<f64> = s.iter().map(|v| v - ms).collect();
        let ss = s0.iter().map(|v| v * v).sum::<f64>() + eps;
        let es: f64 = e0.iter().zip(&s0).map(|(a, b)| a * b).sum();
        let alpha = es / ss;
        let noise: Vec<f64> = e0.iter().zip(&s0).map(|(a, b)| a - alpha * b).collect();
        let target_energy = alpha * alpha * (ss - eps);
        let noise_energy: f64 = noise.iter().map(|v| v * v).sum();
        let a_eps = target_energy + eps;
        let b_eps = noise_energy + eps;
        let value = 10.0 * (a_eps / b_eps).log10();

        // d/de0 of the target energy and of the noise energy, then project
        // out the mean (the zero-mean step is linear).
        let c = 10.0 / std::f64::consts::LN_10;
        let ns: f64 = noise.iter().zip(&s0).map(|(a, b)| a * b).sum();
        let d_target = 2.0 * alpha * (ss - eps) / ss;
        let mut grad0: Vec<f64> = noise
            .iter()
            .zip(&s0)
            .map(|(&nv, &sv)| {
                let da = d_target * sv;
                let db = 2.0 * nv - 2.0 * ns * sv / ss;
                c * (da / a_eps - db / b_eps)
            })
            .collect();
        let gm = grad0.iter().sum::<f64>() / n;
        for g in &mut grad0 {
            *g -= gm;
        }
        let grad = grad0.into_iter().map(T::lit).collect();
        let ng = self.needs(est);
        drop(ve);
        self.push(
            Tensor::scalar(T::lit(value)),
            Op::SiSnr { est, grad },
            ng,
        )
    }

    /// Gradients of `root` (seeded with ones) with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(nodes[root.0].value.shape()));

        fn accum<T: Scalar>(
            grads: &mut [Option<Tensor<T>>],
            nodes: &[Node<T>],
            v: Var,
            g: Tensor<T>,
        ) {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    accum(&mut grads, &nodes, *b, g.clone());
                    accum(&mut grads, &nodes, *a, g);
                }
                Op::Sub(a, b) => {
                    accum(&mut grads, &nodes, *b, g.map(|v| -v));
                    accum(&mut grads, &nodes, *a, g);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let ga = Tensor::from_fn(g.shape(), |j| g.data()[j] * vb.data()[j]);
                    let gb = Tensor::from_fn(g.shape(), |j| g.data()[j] * va.data()[j]);
                    accum(&mut grads, &nodes, *a, ga);
                    accum(&mut grads, &nodes, *b, gb);
                }
                Op::AddBias { x, bias } => {
                    let width = nodes[bias.0].value.len();
                    let mut gb = vec![T::zero(); width];
                    for row in g.data().chunks(width) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    let bshape = nodes[bias.0].value.shape().to_vec();
                    accum(&mut grads, &nodes, *bias, Tensor::new(&bshape, gb).unwrap());
                    accum(&mut grads, &nodes, *x, g);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    accum(&mut grads, &nodes, *x, g.map(|v| v * f));
                }
                Op::MatMul {
                    a,
                    b,
                    ta,
                    tb,
                    batch,
                    m,
                    k,
                    n,
                } => {
                    let (ta, tb, batch, m, k, n) = (*ta, *tb, *batch, *m, *k, *n);
                    let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                    if nodes[a.0].needs_grad {
                        let mut ga = Tensor::zeros(va.shape());
                        for bi in 0..batch {
                            let dc = &g.data()[bi * m * n..(bi + 1) * m * n];
                            let bm = &vb.data()[bi * k * n..(bi + 1) * k * n];
                            let out = &mut ga.data_mut()[bi * m * k..(bi + 1) * m * k];
                            if ta {
                                gemm(k, n, m, bm, tb, dc, true, out, false);
                            } else {
                                gemm(m, n, k, dc, false, bm, !tb, out, false);
                            }
                        }
                        accum(&mut grads, &nodes, *a, ga);
                    }
                    if nodes[b.0].needs_grad {
                        let mut gb = Tensor::zeros(vb.shape());
                        for bi in 0..batch {
                            let dc = &g.data()[bi * m * n..(bi + 1) * m * n];
                            let am = &va.data()[bi * m * k..(bi + 1) * m * k];
                            let out = &mut gb.data_mut()[bi * k * n..(bi + 1) * k * n];
                            if tb {
                                gemm(n, m, k, dc, true, am, ta, out, false);
                            } else {
                                gemm(k, m, n, am, !ta, dc, false, out, false);
                            }
                        }
                        accum(&mut grads, &nodes, *b, gb);
                    }
                }
                Op::Relu(x) => {
                    let vx = &nodes[x.0].value;
                    let gx = Tensor::from_fn(g.shape(), |j| {
                        if vx.data()[j] > T::zero() {
                            g.data()[j]
                        } else {
                            T::zero()
                        }
                    });
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(g.shape(), |j| {
                        let s = y.data()[j];
                        g.data()[j] * s * (T::one() - s)
                    });
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = Tensor::from_fn(g.shape(), |j| {
                        let t = y.data()[j];
                        g.data()[j] * (T::one() - t * t)
                    });
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::Prelu { x, slope } => {
                    let vx = &nodes[x.0].value;
                    let a = nodes[slope.0].value.data()[0];
                    let mut ga = T::zero();
                    let gx = Tensor::from_fn(g.shape(), |j| {
                        let v = vx.data()[j];
                        if v > T::zero() {
                            g.data()[j]
                        } else {
                            ga += g.data()[j] * v;
                            g.data()[j] * a
                        }
                    });
                    let sshape = nodes[slope.0].value.shape().to_vec();
                    accum(&mut grads, &nodes, *slope, Tensor::full(&sshape, ga));
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let width = *y.shape().last().unwrap();
                    let mut gx = g.clone();
                    for (row_g, row_y) in gx.data_mut().chunks_mut(width).zip(y.data().chunks(width))
                    {
                        let dot: T = row_g.iter().zip(row_y).map(|(&a, &b)| a * b).sum();
                        for (gv, &yv) in row_g.iter_mut().zip(row_y) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let vg = &nodes[gain.0].value;
                    let width = vg.len();
                    let w = T::from_usize(width).unwrap();
                    let mut ggain = vec![T::zero(); width];
                    let mut gbias = vec![T::zero(); width];
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, ((row_g, row_h), out)) in g
                        .data()
                        .chunks(width)
                        .zip(xhat.chunks(width))
                        .zip(gx.chunks_mut(width))
                        .enumerate()
                    {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..width {
                            ggain[j] += row_g[j] * row_h[j];
                            gbias[j] += row_g[j];
                            let d = row_g[j] * vg.data()[j];
                            mean_d += d;
                            mean_dh += d * row_h[j];
                        }
                        mean_d /= w;
                        mean_dh /= w;
                        for j in 0..width {
                            let d = row_g[j] * vg.data()[j];
                            out[j] = rstd[r] * (d - mean_d - row_h[j] * mean_dh);
                        }
                    }
                    let gshape = vg.shape().to_vec();
                    let bshape = nodes[bias.0].value.shape().to_vec();
                    accum(&mut grads, &nodes, *gain, Tensor::new(&gshape, ggain).unwrap());
                    accum(&mut grads, &nodes, *bias, Tensor::new(&bshape, gbias).unwrap());
                    let xshape = g.shape().to_vec();
                    accum(&mut grads, &nodes, *x, Tensor::new(&xshape, gx).unwrap());
                }
                Op::Gather { x, map } => {
                    let mut gx = Tensor::zeros(nodes[x.0].value.shape());
                    {
                        let dst = gx.data_mut();
                        for (&src, &v) in map.iter().zip(g.data()) {
                            if src != NONE {
                                dst[src as usize] += v;
                            }
                        }
                    }
                    accum(&mut grads, &nodes, *x, gx);
                }
                Op::Scatter { x, map } => {
                    let data = map
                        .iter()
                        .map(|&dst| if dst == NONE { T::zero() } else { g.data()[dst as usize] })
                        .collect();
                    let xshape = nodes[x.0].value.shape().to_vec();
                    accum(&mut grads, &nodes, *x, Tensor::new(&xshape, data).unwrap());
                }
                Op::Reshape(x) => {
                    let xshape = nodes[x.0].value.shape().to_vec();
                    accum(&mut grads, &nodes, *x, g.reshape(&xshape).unwrap());
                }
                Op::Concat {
                    parts,
                    outer,
                    inner,
                } => {
                    let total: usize = inner.iter().sum();
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(inner) {
                        if nodes[p.0].needs_grad {
                            let mut data = Vec::with_capacity(outer * w);
                            for o in 0..*outer {
                                let start = o * total + offset;
                                data.extend_from_slice(&g.data()[start..start + w]);
                            }
                            let pshape = nodes[p.0].value.shape().to_vec();
                            accum(&mut grads, &nodes, p, Tensor::new(&pshape, data).unwrap());
                        }
                        offset += w;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accum(&mut grads, &nodes, *x, Tensor::full(nodes[x.0].value.shape(), gv));
                }
                Op::SiSnr { est, grad } => {
                    let gv = g.data()[0];
                    let eshape = nodes[est.0].value.shape().to_vec();
                    let data = grad.iter().map(|&d| d * gv).collect();
                    accum(&mut grads, &nodes, *est, Tensor::new(&eshape, data).unwrap());
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of d(sum(w * f(x)))/dx for a unary graph builder.
    fn check_unary(build: impl Fn(&Graph<f64>, Var) -> Var, shape: &[usize]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&g, x);
        let w = Tensor::<f64>::randn(&g.shape(y), 1.0, &mut rng);
        let wv = g.constant(w.clone());
        let loss = g.sum(g.mul(y, wv));
        let grads = g.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let f = |xt: &Tensor<f64>| {
            let g = Graph::new();
            let x = g.constant(xt.clone());
            let y = build(&g, x);
            let wv = g.constant(w.clone());
            g.scalar(g.sum(g.mul(y, wv)))
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let numeric = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + a.abs()),
                "coordinate {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_gradients_all_transpose_modes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let bshape = if tb { [4, 3] } else { [3, 4] };
            let bmat = Tensor::<f64>::randn(&bshape, 1.0, &mut rng);
            let ashape: &[usize] = if ta { &[3, 2] } else { &[2, 3] };
            check_unary(
                |g, x| {
                    let b = g.constant(bmat.clone());
                    g.matmul(x, b, ta, tb)
                },
                ashape,
            );
            let amat = Tensor::<f64>::randn(if ta { &[3, 2] } else { &[2, 3] }, 1.0, &mut rng);
            check_unary(
                |g, x| {
                    let a = g.constant(amat.clone());
                    g.matmul(a, x, ta, tb)
                },
                &bshape,
            );
        }
    }

    #[test]
    fn batched_matmul_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let other = Tensor::<f64>::randn(&[2, 4, 3], 1.0, &mut rng);
        check_unary(
            |g, x| {
                let o = g.constant(other.clone());
                g.matmul(x, o, false, true)
            },
            &[2, 5, 3],
        );
    }

    #[test]
    fn nonlinearity_gradients() {
        check_unary(|g, x| g.sigmoid(x), &[3, 4]);
        check_unary(|g, x| g.tanh(x), &[3, 4]);
        check_unary(|g, x| g.softmax(x), &[3, 5]);
        check_unary(|g, x| g.relu(x), &[7]);
    }

    #[test]
    fn layer_norm_gradient() {
        check_unary(
            |g, x| {
                let gain = g.constant(Tensor::from_fn(&[4], |i| 0.5 + i as f64));
                let bias = g.constant(Tensor::from_fn(&[4], |i| i as f64 * 0.1));
                g.layer_norm(x, gain, bias, 1e-5)
            },
            &[3, 4],
        );
    }

    #[test]
    fn structural_op_gradients() {
        check_unary(|g, x| g.permute(x, &[2, 0, 1]), &[2, 3, 4]);
        check_unary(|g, x| g.narrow(x, 1, 1, 2), &[2, 3, 4]);
        check_unary(
            |g, x| {
                let y = g.scale(x, 2.0);
                g.concat(&[x, y], 1)
            },
            &[2, 3],
        );
        check_unary(
            |g, x| g.scatter_add(x, Rc::new(vec![0, 1, 1, NONE, 0, 2]), &[3]),
            &[6],
        );
    }

    #[test]
    fn si_snr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reference = Tensor::<f64>::randn(&[32], 1.0, &mut rng).into_data();
        check_unary(|g, x| g.si_snr(x, &reference, 1e-8), &[32]);
    }

    #[test]
    fn prelu_slope_gradient() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(&[3], vec![-2.0, 1.0, -0.5]).unwrap());
        let a = g.param(Tensor::scalar(0.25));
        let y = g.sum(g.prelu(x, a));
        let grads = g.backward(y);
        assert_eq!(grads.get(a).unwrap().data()[0], -2.5);
    }
}
