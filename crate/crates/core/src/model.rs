//! The full separator: encoder, projection, chunking, multi-path network,
//! mask head and decoder, with its parameters.

use crate::chunking::{segment_graph, ChunkSpec};
use crate::config::SeparatorConfig;
use crate::error::{Error, Result};
use crate::frontend::{decode_graph, encode_graph};
use crate::fusion::{MaskHead, Network, Trace};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// One `[T]` waveform per source.
    pub estimates: Vec<Var>,
    /// Masked encoder features `[L, E]`, one per source.
    pub masked: Vec<Var>,
    /// Encoded mixture `[L, E]`.
    pub encoded: Var,
    pub trace: Trace,
}

#[derive(Clone, Debug)]
pub struct Separator<T> {
    config: SeparatorConfig,
    store: ParamStore<T>,
    pub encoder: ParamId,
    pub decoder: ParamId,
    pub projection: Linear,
    pub network: Network,
    pub mask_head: MaskHead,
}

impl<T: Scalar> Separator<T> {
    /// Builds a separator with freshly initialised parameters.
    pub fn new(config: &SeparatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let (e, m, d) = (config.encoder_dim, config.window, config.feature_dim);
        let encoder = store.add("encoder.basis", init.glorot(e, m));
        let projection = Linear::new(&mut store, &mut init, "encoder.proj", e, d, false);
        let network = Network::new(&mut store, &mut init, config)?;
        let mask_head = MaskHead::new(
            &mut store,
            &mut init,
            "mask",
            d,
            config.sources,
            e,
            config.mask_activation,
        )?;
        let decoder = store.add("decoder.basis", init.glorot(e, m));
        Ok(Separator {
            config: config.clone(),
            store,
            encoder,
            decoder,
            projection,
            network,
            mask_head,
        })
    }

    pub fn config(&self) -> &SeparatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn chunk_spec(&self) -> ChunkSpec {
        ChunkSpec {
            size: self.config.chunk_size,
            hop: self.config.chunk_hop,
        }
    }

    /// Encoder-domain features `[L, E]` of a waveform, used as MSE targets.
    pub fn encode(&self, g: &Graph<T>, p: &Bound, wave: &[T]) -> Result<Var> {
        let w = g.constant(Tensor::new(&[wave.len()], wave.to_vec())?);
        Ok(encode_graph(
            g,
            w,
            p.var(self.encoder),
            self.config.stride,
            self.config.encoder_activation,
        ))
    }

    pub fn forward(&self, g: &Graph<T>, p: &Bound, mixture: &[T]) -> Result<Forward> {
        if mixture.len() < self.config.window {
            return Err(Error::invalid(format!(
                "mixture of {} samples is shorter than one encoder window ({})",
                mixture.len(),
                self.config.window
            )));
        }
        let encoded = self.encode(g, p, mixture)?;
        let frames = g.shape(encoded)[0];
        let features = self.projection.forward(g, p, encoded);
        let spec = self.chunk_spec();
        let chunks = segment_graph(g, features, spec);
        let (fused, trace) = self.network.forward(g, p, chunks)?;
        let masks = self.mask_head.forward(g, p, fused, spec, frames);
        let masked: Vec<Var> = masks.iter().map(|&m| g.mul(encoded, m)).collect();
        let estimates = masked
            .iter()
            .map(|&d| decode_graph(g, d, p.var(self.decoder), self.config.stride, mixture.len()))
            .collect();
        Ok(Forward {
            estimates,
            masked,
            encoded,
            trace,
        })
    }

    /// Inference-only pass; returns one waveform per source, input length.
    pub fn separate(&self, mixture: &[T]) -> Result<Vec<Vec<T>>> {
        let g = Graph::new();
        let p = self.store.bind_frozen(&g);
        let out = self.forward(&g, &p, mixture)?;
        let waves: Vec<Vec<T>> = out.estimates.iter().map(|&v| g.value(v).data().to_vec()).collect();
        if waves.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("separator produced non-finite samples".into()));
        }
        Ok(waves)
    }
}

/// Parameter count of a separator derived from its configuration alone.
pub fn expected_param_count(cfg: &SeparatorConfig) -> usize {
    use crate::config::{BlockKind, FusionMode, Variant};
    let (e, m, d, f) = (cfg.encoder_dim, cfg.window, cfg.feature_dim, cfg.ffn_dim);
    let linear = |i: usize, o: usize| i * o + o;
    let block = match cfg.block {
        BlockKind::Transformer => {
            let layer = 4 * linear(d, d) + linear(d, f) + linear(f, d) + 4 * d;
            (cfg.n_intra + cfg.n_inter) * layer
        }
        BlockKind::Recurrent => {
            let lstm = linear(d, 4 * d) + 4 * d * d;
            let layer = 2 * lstm + linear(2 * d, d) + 2 * d;
            (cfg.n_intra + cfg.n_inter) * layer
        }
    };
    let ds = linear(2 * d, d);
    let us = linear(d, 2 * d);
    let n = cfg.stages;
    let body = match cfg.variant {
        Variant::SinglePath => n * block,
        Variant::Msfft2p => {
            let fuse = match cfg.fusion {
                FusionMode::Concat => (n / 2) * linear(2 * d, d),
                FusionMode::Sum => linear(d, d),
            };
            2 * n * block + ds + (n / 2) * (ds + us) + (n / 2) * us + fuse
        }
        Variant::Msfft3p => {
            let x = cfg.exchange_stage;
            (2 * x + 3 * (n - x)) * block + ds + (us + 4 * ds) + 3 * us + linear(d, d)
        }
    };
    let head = 1 + linear(d, cfg.sources * d) + 2 * linear(d, d) + d * e;
    2 * e * m + e * d + body + head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{FusionMode, MaskActivation, Preset, Variant};

    fn tiny() -> SeparatorConfig {
        SeparatorConfig {
            encoder_dim: 8,
            feature_dim: 4,
            heads: 2,
            chunk_size: 8,
            chunk_hop: 4,
            ffn_dim: 8,
            window: 4,
            stride: 2,
            ..Preset::Msfft2pTiny.separator()
        }
    }

    #[test]
    fn outputs_match_source_count_and_length() {
        let sep = Separator::<f64>::new(&tiny(), 0).unwrap();
        let mix: Vec<f64> = Init::new(1).uniform::<f64>(&[37], 1.0).into_data();
        let out = sep.separate(&mix).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|w| w.len() == 37));
        assert_eq!(out, sep.separate(&mix).unwrap());
    }

    #[test]
    fn too_short_input_is_rejected() {
        let sep = Separator::<f32>::new(&tiny(), 0).unwrap();
        assert!(matches!(sep.separate(&[0.1, 0.2]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn param_count_matches_enumeration_for_every_preset_shape() {
        let mut configs: Vec<SeparatorConfig> = Preset::ALL.iter().map(|p| p.separator()).collect();
        let mut sum = Preset::Msfft2pTiny.separator();
        sum.fusion = FusionMode::Sum;
        configs.push(sum);
        let mut single = Preset::Msfft2pTiny.separator();
        single.variant = Variant::SinglePath;
        single.stages = 3;
        configs.push(single);
        let mut three = Preset::Msfft3pTiny.separator();
        three.sources = 3;
        three.mask_activation = MaskActivation::Softmax;
        configs.push(three);
        for cfg in configs {
            if cfg.encoder_dim > 300 {
                continue;
            }
            let sep = Separator::<f32>::new(&cfg, 0).unwrap();
            assert_eq!(sep.param_count(), expected_param_count(&cfg), "{cfg:?}");
        }
    }
}
