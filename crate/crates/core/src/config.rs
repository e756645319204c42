//! Separator and training configuration, named presets and the run-config file.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Three paths, element-wise sums throughout, one exchange.
    Msfft3p,
    /// Two paths, sum exchanges after odd stages, fusion after even stages.
    Msfft2p,
    /// One path, plain stacked dual-path blocks.
    SinglePath,
}

impl Variant {
    pub fn paths(self) -> usize {
        match self {
            Variant::Msfft3p => 3,
            Variant::Msfft2p => 2,
            Variant::SinglePath => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Transformer,
    Recurrent,
}

/// Fusion rule applied by the two-path variant after even stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskActivation {
    Relu,
    Sigmoid,
    /// Softmax across sources at every (channel, frame).
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Utterance-level PIT over negative SI-SNR of decoded waveforms.
    SiSnr,
    /// Utterance-level PIT over encoder-domain mean squared error.
    Mse,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparatorConfig {
    pub variant: Variant,
    pub block: BlockKind,
    /// Encoder filters (E).
    pub encoder_dim: usize,
    /// Separator feature width (D).
    pub feature_dim: usize,
    pub n_intra: usize,
    pub n_inter: usize,
    /// Number of stages (N).
    pub stages: usize,
    /// Encoder window in samples (M).
    pub window: usize,
    pub stride: usize,
    /// Attention heads (J).
    pub heads: usize,
    /// Chunk length in frames (K).
    pub chunk_size: usize,
    /// Chunk hop in frames (P).
    pub chunk_hop: usize,
    /// Feed-forward width (DFF).
    pub ffn_dim: usize,
    /// Number of sources to separate (C).
    pub sources: usize,
    pub fusion: FusionMode,
    /// Stage after which the three-path variant exchanges and opens path 3.
    pub exchange_stage: usize,
    pub positional_encoding: bool,
    pub encoder_activation: Nonlinearity,
    pub mask_activation: MaskActivation,
    pub sample_rate: u32,
}

impl SeparatorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.encoder_dim == 0 || self.feature_dim == 0 {
            return fail("encoder_dim and feature_dim must be positive".into());
        }
        if self.feature_dim >= self.encoder_dim {
            return fail(format!(
                "feature_dim ({}) must be smaller than encoder_dim ({})",
                self.feature_dim, self.encoder_dim
            ));
        }
        if self.window == 0 || self.stride == 0 || self.stride > self.window {
            return fail(format!(
                "need 0 < stride ({}) <= window ({})",
                self.stride, self.window
            ));
        }
        if self.chunk_hop == 0
            || self.chunk_hop > self.chunk_size
            || self.chunk_size % self.chunk_hop != 0
        {
            return fail(format!(
                "chunk_hop ({}) must divide chunk_size ({})",
                self.chunk_hop, self.chunk_size
            ));
        }
        let ladder = 1usize << (self.variant.paths() - 1);
        if self.chunk_size % ladder != 0 || self.chunk_size / ladder < 1 {
            return fail(format!(
                "chunk_size ({}) must be divisible by {ladder} for {:?}",
                self.chunk_size, self.variant
            ));
        }
        if self.stages == 0 {
            return fail("stages must be positive".into());
        }
        match self.variant {
            Variant::Msfft2p if self.stages % 2 != 0 => {
                return fail(format!(
                    "the two-path variant needs an even number of stages, got {}",
                    self.stages
                ));
            }
            Variant::Msfft3p if self.exchange_stage == 0 || self.exchange_stage > self.stages => {
                return fail(format!(
                    "exchange_stage ({}) must lie in 1..={}",
                    self.exchange_stage, self.stages
                ));
            }
            _ => {}
        }
        if self.n_intra == 0 || self.n_inter == 0 {
            return fail("n_intra and n_inter must be at least 1".into());
        }
        if self.block == BlockKind::Transformer {
            if self.heads == 0 || self.feature_dim % self.heads != 0 {
                return fail(format!(
                    "feature_dim ({}) must be divisible by heads ({})",
                    self.feature_dim, self.heads
                ));
            }
            if self.ffn_dim == 0 {
                return fail("ffn_dim must be positive".into());
            }
        }
        if !(2..=4).contains(&self.sources) {
            return fail(format!("sources must be in 2..=4, got {}", self.sources));
        }
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        Ok(())
    }

    /// `(E, D, N_intra, N_inter, N, M, stride, J, K, DFF)`.
    pub fn table_row(&self) -> [usize; 10] {
        [
            self.encoder_dim,
            self.feature_dim,
            self.n_intra,
            self.n_inter,
            self.stages,
            self.window,
            self.stride,
            self.heads,
            self.chunk_size,
            self.ffn_dim,
        ]
    }

    /// Stable digest of the architecture, stored in checkpoints.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDecay {
    /// First epoch (0-based) at which stagnation is counted.
    pub start_epoch: usize,
    pub patience: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub objective: Objective,
    pub lr_decay: LrDecay,
    /// Training crop length in seconds.
    pub crop_seconds: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm must be positive"));
        }
        if self.lr_decay.patience == 0 {
            return Err(Error::invalid("lr_decay.patience must be at least 1"));
        }
        if !(self.lr_decay.factor > 0.0 && self.lr_decay.factor <= 1.0) {
            return Err(Error::invalid("lr_decay.factor must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::invalid("crop_seconds must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_manifest: Option<PathBuf>,
}

/// Everything a run needs: architecture, optimisation and data locations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub separator: SeparatorConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
}

/// Named presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Msfft2pPaper,
    Msfft3pPaper,
    Msfft2pTiny,
    Msfft3pTiny,
    DprnnMsff2p,
    DprnnMsff3p,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::Msfft2pPaper,
        Preset::Msfft3pPaper,
        Preset::Msfft2pTiny,
        Preset::Msfft3pTiny,
        Preset::DprnnMsff2p,
        Preset::DprnnMsff3p,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Msfft2pPaper => "msfft2p-paper",
            Preset::Msfft3pPaper => "msfft3p-paper",
            Preset::Msfft2pTiny => "msfft2p-tiny",
            Preset::Msfft3pTiny => "msfft3p-tiny",
            Preset::DprnnMsff2p => "dprnn-msff2p",
            Preset::DprnnMsff3p => "dprnn-msff3p",
        }
    }

    pub fn separator(self) -> SeparatorConfig {
        let full = SeparatorConfig {
            variant: Variant::Msfft2p,
            block: BlockKind::Transformer,
            encoder_dim: 512,
            feature_dim: 128,
            n_intra: 4,
            n_inter: 4,
            stages: 2,
            window: 16,
            stride: 8,
            heads: 16,
            chunk_size: 256,
            chunk_hop: 128,
            ffn_dim: 2048,
            sources: 2,
            fusion: FusionMode::Concat,
            exchange_stage: 4,
            positional_encoding: true,
            encoder_activation: Nonlinearity::Relu,
            mask_activation: MaskActivation::Relu,
            sample_rate: crate::signals::DEFAULT_SAMPLE_RATE,
        };
        let tiny = SeparatorConfig {
            encoder_dim: 64,
            feature_dim: 16,
            n_intra: 1,
            n_inter: 1,
            heads: 4,
            chunk_size: 32,
            chunk_hop: 16,
            ffn_dim: 64,
            ..full.clone()
        };
        match self {
            Preset::Msfft2pPaper => full,
            Preset::Msfft3pPaper => SeparatorConfig {
                variant: Variant::Msfft3p,
                n_intra: 2,
                n_inter: 2,
                stages: 6,
                ..full
            },
            Preset::Msfft2pTiny => tiny,
            Preset::Msfft3pTiny => SeparatorConfig {
                variant: Variant::Msfft3p,
                stages: 6,
                ..tiny
            },
            Preset::DprnnMsff2p => SeparatorConfig {
                variant: Variant::Msfft2p,
                block: BlockKind::Recurrent,
                encoder_dim: 256,
                feature_dim: 64,
                n_intra: 1,
                n_inter: 1,
                stages: 6,
                window: 8,
                stride: 4,
                heads: 4,
                chunk_size: 128,
                chunk_hop: 64,
                ..full
            },
            Preset::DprnnMsff3p => SeparatorConfig {
                variant: Variant::Msfft3p,
                block: BlockKind::Recurrent,
                encoder_dim: 256,
                feature_dim: 64,
                n_intra: 1,
                n_inter: 1,
                stages: 6,
                window: 4,
                stride: 2,
                heads: 4,
                chunk_size: 256,
                chunk_hop: 128,
                ..full
            },
        }
    }

    pub fn train(self) -> TrainConfig {
        let full_scale = TrainConfig {
            lr: 4e-4,
            clip_norm: 5.0,
            epochs: 200,
            batch_size: 1,
            seed: 0,
            precision: Precision::F32,
            objective: Objective::SiSnr,
            lr_decay: LrDecay {
                start_epoch: 85,
                patience: 3,
                factor: 0.5,
            },
            crop_seconds: 4.0,
        };
        match self {
            Preset::Msfft2pTiny | Preset::Msfft3pTiny => TrainConfig {
                lr: 5e-3,
                epochs: 20,
                batch_size: 5,
                lr_decay: LrDecay {
                    start_epoch: 10,
                    ..full_scale.lr_decay.clone()
                },
                crop_seconds: 1.0,
                ..full_scale
            },
            _ => full_scale,
        }
    }

    pub fn run_config(self) -> RunConfig {
        RunConfig {
            preset: Some(self.name().to_string()),
            separator: self.separator(),
            train: self.train(),
            data: DataConfig::default(),
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::invalid(format!("unknown preset {s}; known: {}", names.join(", ")))
            })
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.separator.validate()?;
        self.train.validate()
    }

    /// Parses a config document. A top-level `preset` key supplies defaults
    /// (otherwise `msfft2p-tiny`); every other key overrides it. Unknown keys
    /// are rejected.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let doc: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::format(e.to_string()))?;
        let preset: Preset = match doc.get("preset") {
            Some(toml::Value::String(name)) => name.parse()?,
            Some(_) => return Err(Error::format("preset must be a string")),
            None => Preset::Msfft2pTiny,
        };
        let mut base =
            toml::Value::try_from(preset.run_config()).map_err(|e| Error::format(e.to_string()))?;
        merge(&mut base, doc);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises to toml")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for p in Preset::ALL {
            let cfg = p.run_config();
            cfg.validate().unwrap_or_else(|e| panic!("{p}: {e}"));
            let text = cfg.to_toml_string();
            assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg, "{p}");
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_str("preset = \"msfft2p-tiny\"\n[separator]\nwidth = 3\n");
        assert!(matches!(err, Err(Error::Format(_))));
        assert!(RunConfig::from_toml_str("colour = 1\n").is_err());
    }

    #[test]
    fn overrides_apply_on_top_of_preset() {
        let cfg = RunConfig::from_toml_str(
            "preset = \"msfft2p-paper\"\n[separator]\nstages = 4\n[train]\nlr = 1e-3\n",
        )
        .unwrap();
        assert_eq!(cfg.separator.stages, 4);
        assert_eq!(cfg.separator.encoder_dim, 512);
        assert_eq!(cfg.train.lr, 1e-3);
    }

    #[test]
    fn odd_stage_count_is_rejected_for_two_paths() {
        let mut s = Preset::Msfft2pTiny.separator();
        s.stages = 3;
        assert!(s.validate().is_err());
        s.variant = Variant::SinglePath;
        assert!(s.validate().is_ok());
    }

    #[test]
    fn digest_tracks_architecture() {
        let a = Preset::Msfft2pTiny.separator();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.ffn_dim += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
