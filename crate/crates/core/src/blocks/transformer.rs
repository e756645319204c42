use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::layers::{LayerNorm, Linear};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::attention::MultiHeadAttention;

/// Post-norm encoder layer: `LN(X + MHA(X))`, then `LN(Y + FFN(Y))`.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub norm2: LayerNorm,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            attention: MultiHeadAttention::new(store, init, &format!("{name}.mha"), dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn_in: Linear::new(store, init, &format!("{name}.ffn_in"), dim, ffn_dim, true),
            ffn_out: Linear::new(store, init, &format!("{name}.ffn_out"), ffn_dim, dim, true),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        })
    }

    pub fn param_count(&self) -> usize {
        self.attention.param_count()
            + self.ffn_in.param_count()
            + self.ffn_out.param_count()
            + 4 * self.norm1.dim
    }

    /// `[B, n, D]` to `[B, n, D]`.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Var {
        let attended = self.attention.forward(g, p, x);
        let y = self.norm1.forward(g, p, g.add(x, attended));
        let hidden = g.relu(self.ffn_in.forward(g, p, y));
        let ffn = self.ffn_out.forward(g, p, hidden);
        self.norm2.forward(g, p, g.add(y, ffn))
    }
}

/// Sinusoidal encoding, `[len, dim]`.
pub fn positional_encoding<T: Scalar>(len: usize, dim: usize) -> Tensor<T> {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, c) = ((i / dim) as f64, i % dim);
        let rate = 10000f64.powf(-((c - c % 2) as f64) / dim as f64);
        T::lit(if c % 2 == 0 {
            (pos * rate).sin()
        } else {
            (pos * rate).cos()
        })
    })
}

/// Adds the encoding for axis 1 of a `[B, n, D]` node to every batch entry.
pub(crate) fn add_positional<T: Scalar>(g: &Graph<T>, x: Var) -> Var {
    let shape = g.shape(x);
    let pe = positional_encoding::<T>(shape[1], shape[2]);
    let tiled = Tensor::from_fn(&shape, |i| pe.data()[i % pe.len()]);
    g.add(x, g.constant(tiled))
}

/// Intra-chunk stack along K, then inter-chunk stack along S.
#[derive(Clone, Debug)]
pub struct SsTransformer {
    pub intra: Vec<TransformerLayer>,
    pub inter: Vec<TransformerLayer>,
    pub positional_encoding: bool,
}

impl SsTransformer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        n_intra: usize,
        n_inter: usize,
        positional_encoding: bool,
    ) -> Result<Self> {
        let stack = |store: &mut ParamStore<T>, init: &mut Init, which: &str, n: usize| {
            (0..n)
                .map(|i| {
                    TransformerLayer::new(store, init, &format!("{name}.{which}{i}"), dim, heads, ffn_dim)
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok(SsTransformer {
            intra: stack(store, init, "intra", n_intra)?,
            inter: stack(store, init, "inter", n_inter)?,
            positional_encoding,
        })
    }

    pub fn param_count(&self) -> usize {
        self.intra.iter().chain(&self.inter).map(|l| l.param_count()).sum()
    }

    /// Runs a stack over axis 1 of a `[B, n, D]` node.
    fn stack<T: Scalar>(&self, g: &Graph<T>, p: &Bound, layers: &[TransformerLayer], x: Var) -> Var {
        let mut h = if self.positional_encoding {
            add_positional(g, x)
        } else {
            x
        };
        for layer in layers {
            h = layer.forward(g, p, h);
        }
        h
    }

    /// The intra stage alone, `[S, K, D]` to `[S, K, D]`.
    pub fn forward_intra<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        self.stack(g, p, &self.intra, z)
    }

    /// The inter stage alone, `[S, K, D]` to `[S, K, D]`.
    pub fn forward_inter<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let across = g.permute(z, &[1, 0, 2]);
        let out = self.stack(g, p, &self.inter, across);
        g.permute(out, &[1, 0, 2])
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let local = self.forward_intra(g, p, z);
        self.forward_inter(g, p, local)
    }
}
