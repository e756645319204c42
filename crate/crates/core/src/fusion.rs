//! Multi-path topologies: resampling between resolutions, per-stage exchange
//! and fusion, the staged separator network and the mask head.
//!
//! Path `p` (1-based) carries chunks of length `K / 2^(p-1)`; every path keeps
//! the same chunk count S and feature width D.

use crate::blocks::{Block, BlockConfig};
use crate::chunking::{overlap_add_graph, ChunkSpec};
use crate::config::{FusionMode, MaskActivation, SeparatorConfig, Variant};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::Linear;
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Kernel-2, stride-2 convolution along K: `[S, K, D]` to `[S, K/2, D]`.
///
/// The weight is `[2D, D]`: rows `0..D` act on even positions, `D..2D` on odd.
#[derive(Clone, Debug)]
pub struct Downsample {
    pub linear: Linear,
}

impl Downsample {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        Downsample {
            linear: Linear::new(store, init, name, 2 * dim, dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let shape = g.shape(z);
        let (s, k, d) = (shape[0], shape[1], shape[2]);
        if k % 2 != 0 {
            return Err(Error::invalid(format!("cannot halve odd chunk length {k}")));
        }
        let pairs = g.reshape(z, &[s, k / 2, 2 * d]);
        Ok(self.linear.forward(g, p, pairs))
    }
}

/// Kernel-2, stride-2 transposed convolution along K: `[S, K, D]` to
/// `[S, 2K, D]`. Weight columns `0..D` produce even outputs, `D..2D` odd ones.
#[derive(Clone, Debug)]
pub struct Upsample {
    pub linear: Linear,
}

impl Upsample {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, dim: usize) -> Self {
        Upsample {
            linear: Linear::new(store, init, name, dim, 2 * dim, true),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Var {
        let shape = g.shape(z);
        let (s, k, d) = (shape[0], shape[1], shape[2]);
        let wide = self.linear.forward(g, p, z);
        g.reshape(wide, &[s, 2 * k, d])
    }
}

/// One tensor per active path.
#[derive(Clone, Debug)]
pub struct PathState {
    pub paths: Vec<Var>,
}

impl PathState {
    /// Checks the resolution ladder: path p at `base / 2^p`, shared S and D.
    pub fn check_ladder<T: Scalar>(&self, g: &Graph<T>, base: usize) -> Result<Vec<usize>> {
        let first = g.shape(self.paths[0]);
        let mut lengths = Vec::with_capacity(self.paths.len());
        for (i, &v) in self.paths.iter().enumerate() {
            let shape = g.shape(v);
            let want = base >> i;
            if shape.len() != 3 || shape[1] != want || shape[0] != first[0] || shape[2] != first[2] {
                return Err(Error::Internal(format!(
                    "path {} has shape {shape:?}, expected [{}, {want}, {}]",
                    i + 1,
                    first[0],
                    first[2]
                )));
            }
            lengths.push(shape[1]);
        }
        Ok(lengths)
    }
}

/// Resampling weights of one two-path sum exchange.
#[derive(Clone, Debug)]
pub struct Exchange2p {
    pub down: Downsample,
    pub up: Upsample,
}

/// `X¹ = Y¹ + US(Y²)`, `X² = Y² + DS(Y¹)`.
pub fn exchange_2p<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    site: &Exchange2p,
    y: &PathState,
) -> Result<PathState> {
    let (y1, y2) = (y.paths[0], y.paths[1]);
    let x1 = g.add(y1, site.up.forward(g, p, y2));
    let x2 = g.add(y2, site.down.forward(g, p, y1)?);
    Ok(PathState { paths: vec![x1, x2] })
}

/// Two-path fusion after an even stage.
#[derive(Clone, Debug)]
pub struct Fuse2p {
    pub up: Upsample,
    pub mode: FusionMode,
    /// `[2D, D]` in concat mode; `[D, D]` in sum mode (terminal stage only).
    pub projection: Option<Linear>,
}

/// Concat mode: `proj([Y¹ ; US(Y²)])`. Sum mode: `Y¹ + US(Y²)`, projected
/// only when a projection is present.
pub fn fuse_2p<T: Scalar>(g: &Graph<T>, p: &Bound, site: &Fuse2p, y: &PathState) -> Var {
    let (y1, y2) = (y.paths[0], y.paths[1]);
    let up = site.up.forward(g, p, y2);
    let merged = match site.mode {
        FusionMode::Concat => g.concat(&[y1, up], 2),
        FusionMode::Sum => g.add(y1, up),
    };
    match &site.projection {
        Some(proj) => proj.forward(g, p, merged),
        None => merged,
    }
}

/// Resampling weights of the three-path exchange.
#[derive(Clone, Debug)]
pub struct Exchange3p {
    pub up21: Upsample,
    pub down12: Downsample,
    pub down13a: Downsample,
    pub down13b: Downsample,
    pub down23: Downsample,
}

/// `X¹ = Y¹ + US(Y²)`, `X² = Y² + DS(Y¹)`, `X³ = DS(DS(Y¹)) + DS(Y²)`.
pub fn exchange_3p<T: Scalar>(
    g: &Graph<T>,
    p: &Bound,
    site: &Exchange3p,
    y: &PathState,
) -> Result<PathState> {
    let (y1, y2) = (y.paths[0], y.paths[1]);
    let x1 = g.add(y1, site.up21.forward(g, p, y2));
    let x2 = g.add(y2, site.down12.forward(g, p, y1)?);
    let quarter = site.down13b.forward(g, p, site.down13a.forward(g, p, y1)?)?;
    let x3 = g.add(quarter, site.down23.forward(g, p, y2)?);
    let out = PathState {
        paths: vec![x1, x2, x3],
    };
    let base = g.shape(y1)[1];
    out.check_ladder(g, base)?;
    Ok(out)
}

/// Terminal three-path fusion: `proj(Y¹ + US(Y²) + US(US(Y³)))`.
#[derive(Clone, Debug)]
pub struct Fuse3p {
    pub up2: Upsample,
    pub up3a: Upsample,
    pub up3b: Upsample,
    pub projection: Linear,
}

#[derive(Clone, Debug)]
enum Site {
    Nothing,
    Exchange2(Exchange2p),
    Fuse2(Fuse2p),
    Exchange3(Exchange3p),
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<Block>,
    after: Site,
}

/// Per-stage chunk lengths of the active paths, recorded after each
/// stage's exchange.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub stages: Vec<Vec<usize>>,
}

/// The staged multi-path separator body.
#[derive(Clone, Debug)]
pub struct Network {
    pub variant: Variant,
    pub chunk_size: usize,
    stages: Vec<Stage>,
    open_path2: Option<Downsample>,
    terminal3: Option<Fuse3p>,
}

impl Network {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, cfg: &SeparatorConfig) -> Result<Self> {
        cfg.validate()?;
        let block_cfg = BlockConfig::from_separator(cfg);
        let d = cfg.feature_dim;
        let n = cfg.stages;
        let exchange_at = cfg.exchange_stage;
        let mut stages = Vec::with_capacity(n);
        for s in 1..=n {
            let name = format!("sep.stage{s}");
            let paths = match cfg.variant {
                Variant::SinglePath => 1,
                Variant::Msfft2p => 2,
                Variant::Msfft3p if s > exchange_at => 3,
                Variant::Msfft3p => 2,
            };
            let blocks = (1..=paths)
                .map(|p| Block::new(store, init, &format!("{name}.path{p}"), &block_cfg))
                .collect::<Result<Vec<_>>>()?;
            let after = match cfg.variant {
                Variant::SinglePath => Site::Nothing,
                Variant::Msfft2p if s % 2 == 1 => Site::Exchange2(Exchange2p {
                    down: Downsample::new(store, init, &format!("{name}.ds12"), d),
                    up: Upsample::new(store, init, &format!("{name}.us21"), d),
                }),
                Variant::Msfft2p => {
                    let projection = match cfg.fusion {
                        FusionMode::Concat => Some(Linear::new(store, init, &format!("{name}.fuse"), 2 * d, d, true)),
                        FusionMode::Sum if s == n => Some(Linear::new(store, init, &format!("{name}.fuse"), d, d, true)),
                        FusionMode::Sum => None,
                    };
                    Site::Fuse2(Fuse2p {
                        up: Upsample::new(store, init, &format!("{name}.us21"), d),
                        mode: cfg.fusion,
                        projection,
                    })
                }
                Variant::Msfft3p if s == exchange_at => Site::Exchange3(Exchange3p {
                    up21: Upsample::new(store, init, &format!("{name}.us21"), d),
                    down12: Downsample::new(store, init, &format!("{name}.ds12"), d),
                    down13a: Downsample::new(store, init, &format!("{name}.ds13a"), d),
                    down13b: Downsample::new(store, init, &format!("{name}.ds13b"), d),
                    down23: Downsample::new(store, init, &format!("{name}.ds23"), d),
                }),
                Variant::Msfft3p => Site::Nothing,
            };
            stages.push(Stage { blocks, after });
        }
        let open_path2 = (cfg.variant != Variant::SinglePath)
            .then(|| Downsample::new(store, init, "sep.open2", d));
        let terminal3 = (cfg.variant == Variant::Msfft3p).then(|| Fuse3p {
            up2: Upsample::new(store, init, "sep.out.us2", d),
            up3a: Upsample::new(store, init, "sep.out.us3a", d),
            up3b: Upsample::new(store, init, "sep.out.us3b", d),
            projection: Linear::new(store, init, "sep.out.proj", d, d, true),
        });
        Ok(Network {
            variant: cfg.variant,
            chunk_size: cfg.chunk_size,
            stages,
            open_path2,
            terminal3,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Active paths during stage `s` (1-based).
    pub fn paths_in_stage(&self, s: usize) -> usize {
        self.stages[s - 1].blocks.len()
    }

    /// The blocks of stage `s` (1-based), path order.
    pub fn stage_blocks(&self, s: usize) -> &[Block] {
        &self.stages[s - 1].blocks
    }

    /// `[S, K, D]` to the fused `[S, K, D]` tensor Z'.
    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Result<(Var, Trace)> {
        let k = g.shape(z)[1];
        let ladder = 1usize << (self.variant.paths() - 1);
        if k != self.chunk_size || k % ladder != 0 {
            return Err(Error::invalid(format!(
                "chunk length {k} does not match the configured {} (divisible by {ladder})",
                self.chunk_size
            )));
        }
        let mut trace = Trace::default();
        let mut state = PathState { paths: vec![z] };
        for (i, stage) in self.stages.iter().enumerate() {
            // Stage outputs; stage 1 opens path 2 from path 1's output.
            let mut y = Vec::with_capacity(stage.blocks.len());
            y.push(stage.blocks[0].forward(g, p, state.paths[0]));
            for (pi, block) in stage.blocks.iter().enumerate().skip(1) {
                let input = if pi < state.paths.len() {
                    state.paths[pi]
                } else if pi == 1 {
                    let open = self.open_path2.as_ref().expect("multi-path network");
                    open.forward(g, p, y[0])?
                } else {
                    return Err(Error::Internal(format!("path {} has no input", pi + 1)));
                };
                y.push(block.forward(g, p, input));
            }
            let y = PathState { paths: y };
            y.check_ladder(g, k)?;
            state = match &stage.after {
                Site::Nothing => y,
                Site::Exchange2(site) => exchange_2p(g, p, site, &y)?,
                Site::Exchange3(site) => exchange_3p(g, p, site, &y)?,
                Site::Fuse2(site) => {
                    let fused = fuse_2p(g, p, site, &y);
                    if i + 1 == self.stages.len() {
                        PathState { paths: vec![fused] }
                    } else {
                        PathState {
                            paths: vec![fused, y.paths[1]],
                        }
                    }
                }
            };
            trace.stages.push(state.check_ladder(g, k)?);
        }
        let out = match (&self.terminal3, state.paths.len()) {
            (_, 1) => state.paths[0],
            (Some(t), 3) => {
                let two = t.up2.forward(g, p, state.paths[1]);
                let three = t.up3b.forward(g, p, t.up3a.forward(g, p, state.paths[2]));
                let sum = g.add(g.add(state.paths[0], two), three);
                t.projection.forward(g, p, sum)
            }
            (_, n) => {
                return Err(Error::Internal(format!("{n} paths remain after the last stage")));
            }
        };
        Ok((out, trace))
    }
}

/// Free-function form of [`Network::forward`].
pub fn run_separator<T: Scalar>(g: &Graph<T>, p: &Bound, net: &Network, z: Var) -> Result<(Var, Trace)> {
    net.forward(g, p, z)
}

/// Masks from Z': PReLU, 1x1 expansion to C·D, per-source overlap-add,
/// tanh/sigmoid gate and a bias-free projection to the mask width.
#[derive(Clone, Debug)]
pub struct MaskHead {
    pub slope: ParamId,
    pub expand: Linear,
    pub gate_tanh: Linear,
    pub gate_sigmoid: Linear,
    pub output: Linear,
    pub sources: usize,
    pub dim: usize,
    pub activation: MaskActivation,
}

impl MaskHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        dim: usize,
        sources: usize,
        mask_dim: usize,
        activation: MaskActivation,
    ) -> Result<Self> {
        if sources < 2 {
            return Err(Error::invalid(format!("need at least two sources, got {sources}")));
        }
        Ok(MaskHead {
            slope: store.add(format!("{name}.prelu"), Tensor::full(&[1], T::lit(0.25))),
            expand: Linear::new(store, init, &format!("{name}.expand"), dim, sources * dim, true),
            gate_tanh: Linear::new(store, init, &format!("{name}.tanh"), dim, dim, true),
            gate_sigmoid: Linear::new(store, init, &format!("{name}.sigmoid"), dim, dim, true),
            output: Linear::new(store, init, &format!("{name}.out"), dim, mask_dim, false),
            sources,
            dim,
            activation,
        })
    }

    /// One `[frames, mask_dim]` mask per source.
    pub fn forward<T: Scalar>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        zprime: Var,
        spec: ChunkSpec,
        frames: usize,
    ) -> Vec<Var> {
        let act = g.prelu(zprime, p.var(self.slope));
        let wide = self.expand.forward(g, p, act);
        let raw: Vec<Var> = (0..self.sources)
            .map(|c| {
                let part = g.narrow(wide, 2, c * self.dim, self.dim);
                let seq = overlap_add_graph(g, part, spec, frames);
                let gate = g.mul(
                    g.tanh(self.gate_tanh.forward(g, p, seq)),
                    g.sigmoid(self.gate_sigmoid.forward(g, p, seq)),
                );
                self.output.forward(g, p, gate)
            })
            .collect();
        match self.activation {
            MaskActivation::Relu => raw.into_iter().map(|m| g.relu(m)).collect(),
            MaskActivation::Sigmoid => raw.into_iter().map(|m| g.sigmoid(m)).collect(),
            MaskActivation::Softmax => {
                let shape = g.shape(raw[0]);
                let mut lifted = shape.clone();
                lifted.push(1);
                let stacked: Vec<Var> = raw.iter().map(|&m| g.reshape(m, &lifted)).collect();
                let probs = g.softmax(g.concat(&stacked, 2));
                (0..self.sources)
                    .map(|c| g.reshape(g.narrow(probs, 2, c, 1), &shape))
                    .collect()
            }
        }
    }
}
