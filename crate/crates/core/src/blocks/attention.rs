use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `softmax(Q Kᵀ / sqrt(d)) V` on `[B, n, d]` query, `[B, m, d]` key and
/// `[B, m, dv]` value nodes; softmax runs over keys.
pub fn attend<T: Scalar>(g: &Graph<T>, q: Var, k: Var, v: Var) -> Var {
    let d = *g.shape(q).last().expect("rank 3");
    let scores = g.matmul(q, k, false, true);
    let scores = g.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let weights = g.softmax(scores);
    g.matmul(weights, v, false, false)
}

/// Single-head attention on plain `[n, d]`, `[m, d]`, `[m, dv]` matrices.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<Tensor<T>> {
    for (name, t) in [("query", q), ("key", k), ("value", v)] {
        if t.rank() != 2 {
            return Err(Error::invalid(format!("{name} must be a matrix, got {:?}", t.shape())));
        }
        if !t.all_finite() {
            return Err(Error::Numeric(format!("{name} contains non-finite values")));
        }
    }
    if q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0] {
        return Err(Error::invalid(format!(
            "attention shapes do not line up: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let g = Graph::new();
    let lift = |t: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(t.shape());
        g.constant(t.clone().reshape(&shape).expect("same length"))
    };
    let out = attend(&g, lift(q), lift(k), lift(v));
    let value = (*g.value(out)).clone();
    let rows = value.shape()[1];
    let cols = value.shape()[2];
    value.reshape(&[rows, cols])
}

/// Multi-head self-attention with per-head projections held as one
/// `[D, D]` matrix per role.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, init, &format!("{name}.query"), dim, dim, true),
            key: Linear::new(store, init, &format!("{name}.key"), dim, dim, true),
            value: Linear::new(store, init, &format!("{name}.value"), dim, dim, true),
            output: Linear::new(store, init, &format!("{name}.output"), dim, dim, true),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_count(&self) -> usize {
        [&self.query, &self.key, &self.value, &self.output]
            .iter()
            .map(|l| l.param_count())
            .sum()
    }

    /// `[B, n, D]` to `[B, n, D]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let shape = g.shape(x);
        let (batch, n) = (shape[0], shape[1]);
        let (j, dh) = (self.heads, self.head_dim());
        let split = |y: Var| {
            let y = g.reshape(y, &[batch, n, j, dh]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[batch * j, n, dh])
        };
        let q = split(self.query.forward(g, p, x));
        let k = split(self.key.forward(g, p, x));
        let v = split(self.value.forward(g, p, x));
        let heads = attend(g, q, k, v);
        let heads = g.reshape(heads, &[batch, j, n, dh]);
        let merged = g.permute(heads, &[0, 2, 1, 3]);
        let merged = g.reshape(merged, &[batch, n, self.dim]);
        self.output.forward(g, p, merged)
    }
}
