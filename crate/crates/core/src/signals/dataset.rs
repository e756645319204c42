use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{load_wav, mix_sources, save_wav, synth_source, MixtureExample, SourceKind, WavEncoding};
use crate::error::{Error, Result};

const MANIFEST_FORMAT: &str = "msfft-manifest";
const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other}"))),
        }
    }
}

/// What to synthesise.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_examples: usize,
    pub sources: usize,
    pub snr_range_db: (f64, f64),
    /// Each source's duration is drawn from this range; mixtures are
    /// truncated to the shortest source.
    pub duration_s: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
    pub split: Split,
    pub kind: SourceKind,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_examples: 8,
            sources: 2,
            snr_range_db: (-5.0, 5.0),
            duration_s: (1.0, 1.0),
            sample_rate: super::DEFAULT_SAMPLE_RATE,
            seed: 0,
            split: Split::Train,
            kind: SourceKind::Speechlike,
        }
    }
}

impl DatasetSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.sources) {
            return Err(Error::invalid(format!(
                "sources must be 2 or 3, got {}",
                self.sources
            )));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::invalid(format!("invalid snr range ({lo}, {hi})")));
        }
        let (dlo, dhi) = self.duration_s;
        if !(dlo > 0.0 && dlo <= dhi && dhi.is_finite()) {
            return Err(Error::invalid(format!(
                "invalid duration range ({dlo}, {dhi})"
            )));
        }
        if self.n_examples == 0 {
            return Err(Error::invalid("n_examples must be positive"));
        }
        Ok(())
    }

    /// Synthesises example `index` in memory.
    pub fn example(&self, index: usize) -> Result<MixtureExample> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(example_seed(self.seed, index));
        let (lo, hi) = self.snr_range_db;
        let snr = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
        let (dlo, dhi) = self.duration_s;
        let sources = (0..self.sources)
            .map(|_| {
                let duration = if dlo < dhi { rng.gen_range(dlo..=dhi) } else { dlo };
                let seed: u64 = rng.gen();
                synth_source(self.kind, duration, seed, self.sample_rate)
            })
            .collect::<Result<Vec<_>>>()?;
        mix_sources(&sources, snr)
    }
}

/// Seed for one example, a pure function of the global seed and index.
fn example_seed(seed: u64, index: usize) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub mixture: PathBuf,
    pub sources: Vec<PathBuf>,
    pub snr_db: f64,
    pub duration: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    format: String,
    version: u32,
    split: Split,
    seed: u64,
    sample_rate: u32,
    sources: usize,
    count: usize,
}

/// A list of examples stored next to the manifest file.
///
/// On disk: a header record followed by one JSON record per example; all
/// paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub sample_rate: u32,
    pub sources: usize,
    pub entries: Vec<ManifestEntry>,
    base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            split: self.split,
            seed: self.seed,
            sample_rate: self.sample_rate,
            sources: self.sources,
            count: self.entries.len(),
        };
        let mut out = serde_json::to_string(&header).expect("header serialises");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serialises"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path.as_ref())?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format(format!("{}: empty manifest", path.display())))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "{}: unsupported manifest {} v{}",
                path.display(),
                header.format,
                header.version
            )));
        }
        let mut entries = Vec::with_capacity(header.count);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)?;
            if entry.sources.len() != header.sources {
                return Err(Error::format(format!(
                    "{}: entry lists {} sources, header says {}",
                    path.display(),
                    entry.sources.len(),
                    header.sources
                )));
            }
            entries.push(entry);
        }
        if entries.len() != header.count {
            return Err(Error::format(format!(
                "{}: header announces {} entries, found {}",
                path.display(),
                header.count,
                entries.len()
            )));
        }
        Ok(DatasetManifest {
            split: header.split,
            seed: header.seed,
            sample_rate: header.sample_rate,
            sources: header.sources,
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    /// Reads every example's audio.
    pub fn examples(&self) -> Result<Vec<MixtureExample>> {
        self.entries.iter().map(|e| self.example(e)).collect()
    }

    pub fn example(&self, entry: &ManifestEntry) -> Result<MixtureExample> {
        let mixture = load_wav(self.base_dir.join(&entry.mixture))?;
        let sources = entry
            .sources
            .iter()
            .map(|p| load_wav(self.base_dir.join(p)))
            .collect::<Result<Vec<_>>>()?;
        if sources.iter().any(|s| s.len() != mixture.len()) {
            return Err(Error::format(format!(
                "{}: source lengths differ from the mixture",
                entry.mixture.display()
            )));
        }
        Ok(MixtureExample {
            mixture,
            sources,
            snr_db: entry.snr_db,
        })
    }
}

/// Synthesises a dataset under `out_dir` and writes `<split>.jsonl` there.
pub fn generate_dataset(spec: &DatasetSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let split = spec.split.to_string();
    let mix_dir = Path::new(&split).join("mix");
    fs::create_dir_all(out_dir.join(&mix_dir))?;
    for c in 0..spec.sources {
        fs::create_dir_all(out_dir.join(&split).join(format!("s{}", c + 1)))?;
    }
    let mut entries = Vec::with_capacity(spec.n_examples);
    for index in 0..spec.n_examples {
        let example = spec.example(index)?;
        let name = format!("{index:05}.wav");
        let mixture = mix_dir.join(&name);
        save_wav(&example.mixture, out_dir.join(&mixture), WavEncoding::Float32)?;
        let mut sources = Vec::with_capacity(spec.sources);
        for (c, s) in example.sources.iter().enumerate() {
            let p = Path::new(&split).join(format!("s{}", c + 1)).join(&name);
            save_wav(s, out_dir.join(&p), WavEncoding::Float32)?;
            sources.push(p);
        }
        entries.push(ManifestEntry {
            mixture,
            sources,
            snr_db: example.snr_db,
            duration: example.mixture.duration_s(),
        });
    }
    let manifest = DatasetManifest {
        split: spec.split,
        seed: spec.seed,
        sample_rate: spec.sample_rate,
        sources: spec.sources,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.write(out_dir.join(format!("{split}.jsonl")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sources: usize) -> DatasetSpec {
        DatasetSpec {
            n_examples: 4,
            sources,
            duration_s: (0.2, 0.3),
            seed,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn manifests_are_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_dataset(&small(7, 2), a.path()).unwrap();
        generate_dataset(&small(7, 2), b.path()).unwrap();
        let ta = fs::read(a.path().join("train.jsonl")).unwrap();
        let tb = fs::read(b.path().join("train.jsonl")).unwrap();
        assert_eq!(ta, tb);
        let wa = fs::read(a.path().join("train/mix/00003.wav")).unwrap();
        let wb = fs::read(b.path().join("train/mix/00003.wav")).unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn entries_respect_source_count_and_snr_range() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_dataset(&small(7, 2), dir.path()).unwrap();
        assert_eq!(m.len(), 4);
        for e in &m.entries {
            assert_eq!(e.sources.len(), 2);
            assert!((-5.0..=5.0).contains(&e.snr_db));
        }
        let m3 = generate_dataset(
            &DatasetSpec {
                split: Split::Test,
                ..small(8, 3)
            },
            dir.path(),
        )
        .unwrap();
        assert!(m3.entries.iter().all(|e| e.sources.len() == 3));
    }

    #[test]
    fn reload_matches_and_snr_is_exact_on_stored_audio() {
        let dir = tempfile::tempdir().unwrap();
        let written = generate_dataset(&small(3, 2), dir.path()).unwrap();
        let loaded = DatasetManifest::load(dir.path().join("train.jsonl")).unwrap();
        assert_eq!(loaded, written);
        for ex in loaded.examples().unwrap() {
            let measured = 10.0 * (ex.sources[0].energy() / ex.sources[1].energy()).log10();
            assert!((measured - ex.snr_db).abs() < 1e-6);
            for (t, &v) in ex.mixture.samples().iter().enumerate() {
                assert_eq!(v, ex.sources[0].samples()[t] + ex.sources[1].samples()[t]);
            }
        }
    }

    #[test]
    fn different_seeds_give_different_data() {
        let a = small(1, 2).example(0).unwrap();
        let b = small(2, 2).example(0).unwrap();
        assert_ne!(a.mixture, b.mixture);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&small(1, 5), dir.path()).is_err());
        let bad = DatasetSpec {
            snr_range_db: (5.0, -5.0),
            ..small(1, 2)
        };
        assert!(generate_dataset(&bad, dir.path()).is_err());
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("occupied");
        fs::write(&file, b"x").unwrap();
        let err = generate_dataset(&small(1, 2), file.join("sub")).unwrap_err();
        assert!(matches!(err, Error::Io(_)), "{err:?}");
    }
}
