//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, `u64` header
//! length, a JSON header, then every tensor's values back to back in
//! little-endian order at the precision named in the header.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{SeparatorConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Separator;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::trainer::optim::Adam;
use crate::trainer::schedule::PlateauSchedule;

pub const MAGIC: &[u8; 8] = b"MSFFTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
}

/// Metadata stored ahead of the raw tensor data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub dtype: String,
    pub config: SeparatorConfig,
    pub config_digest: String,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub best_valid_si_snri: Option<f64>,
    pub optimizer: Option<OptimizerMeta>,
    pub schedule: Option<PlateauSchedule>,
    pub note: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

impl CheckpointHeader {
    /// Reads only the header, e.g. to pick the precision before a full load.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(parse(&bytes)?.0)
    }

    /// Refuses a configuration whose digest differs from the stored one.
    pub fn check_config(&self, cfg: &SeparatorConfig) -> Result<()> {
        let digest = cfg.digest();
        if digest != self.config_digest {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint was trained with config {} but {} was requested; \
                 use the checkpoint's own config or retrain",
                short(&self.config_digest),
                short(&digest)
            )));
        }
        Ok(())
    }
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub separator: Separator<T>,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub best_valid_si_snri: Option<f64>,
    pub optimizer: Option<Adam<T>>,
    pub schedule: Option<PlateauSchedule>,
    pub note: Option<String>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(separator: Separator<T>) -> Self {
        Checkpoint {
            separator,
            train: None,
            epoch: 0,
            step: 0,
            best_valid_si_snri: None,
            optimizer: None,
            schedule: None,
            note: None,
        }
    }

    pub fn config(&self) -> &SeparatorConfig {
        self.separator.config()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.separator.params();
        let mut tensors: Vec<(String, &Tensor<T>)> =
            store.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            for (i, name) in store.names().enumerate() {
                tensors.push((format!("adam.m/{name}"), &opt.m[i]));
                tensors.push((format!("adam.v/{name}"), &opt.v[i]));
            }
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE.to_string(),
            config: self.config().clone(),
            config_digest: self.config().digest(),
            train: self.train.clone(),
            epoch: self.epoch,
            step: self.step,
            best_valid_si_snri: self.best_valid_si_snri,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                step: o.step,
            }),
            schedule: self.schedule.clone(),
            note: self.note.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + 20 + store.count() * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, mut data) = parse(bytes)?;
        if header.dtype != T::DTYPE {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint stores {} values but {} was requested",
                header.dtype,
                T::DTYPE
            )));
        }
        if header.config.digest() != header.config_digest {
            return Err(Error::format("checkpoint config does not match its stored digest"));
        }
        let mut separator = Separator::<T>::new(&header.config, 0)?;
        let mut read = |entry: &TensorEntry| -> Result<Tensor<T>> {
            let n: usize = entry.shape.iter().product();
            let bytes = n * T::BYTES;
            if data.len() < bytes {
                return Err(Error::format(format!("checkpoint truncated in tensor {}", entry.name)));
            }
            let values = data[..bytes].chunks_exact(T::BYTES).map(T::read_le).collect();
            data = &data[bytes..];
            Tensor::new(&entry.shape, values)
        };
        let mut moments: Vec<(String, Tensor<T>)> = Vec::new();
        for entry in &header.tensors {
            let t = read(entry)?;
            if entry.name.starts_with("adam.") {
                moments.push((entry.name.clone(), t));
            } else {
                separator.params_mut().set(&entry.name, t)?;
            }
        }
        if !data.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint tensors"));
        }
        let params = header.tensors.iter().filter(|e| !e.name.starts_with("adam.")).count();
        if params != separator.params().len() {
            return Err(Error::format(format!(
                "checkpoint holds {params} parameter tensors, model needs {}",
                separator.params().len()
            )));
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(meta) => {
                let mut opt = Adam::new(separator.params(), meta.lr);
                opt.beta1 = meta.beta1;
                opt.beta2 = meta.beta2;
                opt.eps = meta.eps;
                opt.step = meta.step;
                let names: Vec<String> = separator.params().names().map(str::to_string).collect();
                let find = |key: String| {
                    moments
                        .iter()
                        .find(|(n, _)| *n == key)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::format(format!("checkpoint lacks optimizer tensor {key}")))
                };
                for (i, name) in names.iter().enumerate() {
                    opt.m[i] = find(format!("adam.m/{name}"))?;
                    opt.v[i] = find(format!("adam.v/{name}"))?;
                }
                Some(opt)
            }
        };
        Ok(Checkpoint {
            separator,
            train: header.train,
            epoch: header.epoch,
            step: header.step,
            best_valid_si_snri: header.best_valid_si_snri,
            optimizer,
            schedule: header.schedule,
            note: header.note,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "checkpoint format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let rest = &bytes[20..];
    if rest.len() < len {
        return Err(Error::format("checkpoint header truncated"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&rest[..len]).map_err(|e| Error::format(format!("checkpoint header: {e}")))?;
    if header.format_version != version {
        return Err(Error::format("checkpoint header disagrees with its version field"));
    }
    Ok((header, &rest[len..]))
}
