//! Per-path dual-path blocks. Every block maps a `[S, K, D]` chunk tensor to
//! a tensor of the same shape.

mod attention;
mod recurrent;
mod transformer;

pub use attention::{attend, scaled_dot_attention, MultiHeadAttention};
pub use recurrent::{Lstm, RecurrentBlock, RecurrentLayer};
pub use transformer::{positional_encoding, SsTransformer, TransformerLayer};

use crate::config::{BlockKind, SeparatorConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub kind: BlockKind,
    pub n_intra: usize,
    pub n_inter: usize,
    pub positional_encoding: bool,
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl BlockConfig {
    pub fn from_separator(cfg: &SeparatorConfig) -> Self {
        BlockConfig {
            kind: cfg.block,
            n_intra: cfg.n_intra,
            n_inter: cfg.n_inter,
            positional_encoding: cfg.positional_encoding,
            dim: cfg.feature_dim,
            heads: cfg.heads,
            ffn_dim: cfg.ffn_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_intra == 0 || self.n_inter == 0 {
            return Err(Error::invalid("blocks need at least one intra and one inter layer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Transformer(SsTransformer),
    Recurrent(RecurrentBlock),
}

impl Block {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cfg: &BlockConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            BlockKind::Transformer => Block::Transformer(SsTransformer::new(
                store,
                init,
                name,
                cfg.dim,
                cfg.heads,
                cfg.ffn_dim,
                cfg.n_intra,
                cfg.n_inter,
                cfg.positional_encoding,
            )?),
            BlockKind::Recurrent => Block::Recurrent(RecurrentBlock::new(
                store,
                init,
                name,
                cfg.dim,
                cfg.n_intra,
                cfg.n_inter,
            )),
        })
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Transformer(b) => b.param_count(),
            Block::Recurrent(b) => b.param_count(),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        match self {
            Block::Transformer(b) => b.forward(g, p, z),
            Block::Recurrent(b) => b.forward(g, p, z),
        }
    }
}
