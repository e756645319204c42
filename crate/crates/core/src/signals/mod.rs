//! Waveforms, synthetic sources, mixing and on-disk datasets.

mod dataset;
mod synth;
mod wav;

pub use dataset::{generate_dataset, DatasetManifest, DatasetSpec, ManifestEntry, Split};
pub use synth::{synth_source, SourceKind};
pub use wav::{load_wav, save_wav, WavEncoding};

use crate::error::{Error, Result};

/// Default sample rate (Hz).
pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

/// Peak level used when a mixture would clip.
const CLIP_PEAK: f32 = 0.99;

/// A mono sampled signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("waveform must hold at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squares, accumulated in double precision.
    pub fn energy(&self) -> f64 {
        energy(&self.samples)
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn truncated(&self, len: usize) -> Waveform {
        Waveform {
            samples: self.samples[..len.min(self.samples.len())].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    fn scaled(&self, gain: f64) -> Waveform {
        Waveform {
            samples: self
                .samples
                .iter()
                .map(|&v| (v as f64 * gain) as f32)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

pub(crate) fn energy(samples: &[f32]) -> f64 {
    samples.iter().map(|&v| (v as f64) * (v as f64)).sum()
}

/// Energy ratio `E_a / E_b` in dB.
pub fn energy_ratio_db(a: &Waveform, b: &Waveform) -> f64 {
    10.0 * (a.energy() / b.energy()).log10()
}

/// A mixture together with the sources that sum to it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform,
    pub sources: Vec<Waveform>,
    /// Energy ratio of the first source to the second, as stored.
    pub snr_db: f64,
}

impl MixtureExample {
    /// Builds an example from stored sources; the mixture is their sample-wise sum.
    pub fn from_sources(sources: Vec<Waveform>) -> Result<Self> {
        if sources.len() < 2 {
            return Err(Error::invalid("a mixture needs at least two sources"));
        }
        let rate = sources[0].sample_rate;
        let len = sources[0].len();
        if sources.iter().any(|s| s.len() != len || s.sample_rate != rate) {
            return Err(Error::invalid(
                "sources must share length and sample rate",
            ));
        }
        let mixture = sum_sources(&sources);
        let snr_db = energy_ratio_db(&sources[0], &sources[1]);
        Ok(MixtureExample {
            mixture: Waveform::new(mixture, rate)?,
            sources,
            snr_db,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }
}

fn sum_sources(sources: &[Waveform]) -> Vec<f32> {
    let mut out = vec![0.0f32; sources[0].len()];
    for s in sources {
        for (o, &v) in out.iter_mut().zip(&s.samples) {
            *o += v;
        }
    }
    out
}

/// Rescales `interferer` so that `E_target / E_interferer == 10^(snr_db/10)`
/// and mixes the two.
pub fn mix_at_snr(target: &Waveform, interferer: &Waveform, snr_db: f64) -> Result<MixtureExample> {
    mix_sources(&[target.clone(), interferer.clone()], snr_db)
}

/// Mixes `C >= 2` sources: every source after the first is rescaled to sit
/// `snr_db` below the first. Sources of unequal length are truncated to the
/// shortest. If the mixture would exceed full scale, mixture and sources are
/// attenuated together.
pub fn mix_sources(sources: &[Waveform], snr_db: f64) -> Result<MixtureExample> {
    if sources.len() < 2 {
        return Err(Error::invalid("a mixture needs at least two sources"));
    }
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr must be finite"));
    }
    let rate = sources[0].sample_rate;
    if sources.iter().any(|s| s.sample_rate != rate) {
        return Err(Error::invalid("sources must share a sample rate"));
    }
    let len = sources.iter().map(Waveform::len).min().unwrap_or(0);
    let trimmed: Vec<Waveform> = sources.iter().map(|s| s.truncated(len)).collect();
    if let Some(i) = trimmed.iter().position(|s| s.energy() <= 0.0) {
        return Err(Error::invalid(format!("source {i} has zero energy")));
    }
    let target_energy = trimmed[0].energy();
    let wanted = 10f64.powf(snr_db / 10.0);
    let mut scaled = vec![trimmed[0].clone()];
    for s in &trimmed[1..] {
        let gain = (target_energy / (s.energy() * wanted)).sqrt();
        scaled.push(s.scaled(gain));
    }
    let peak = sum_sources(&scaled)
        .iter()
        .fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        let gain = (CLIP_PEAK / peak) as f64;
        scaled = scaled.iter().map(|s| s.scaled(gain)).collect();
    }
    MixtureExample::from_sources(scaled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wave(samples: Vec<f32>) -> Waveform {
        Waveform::new(samples, 8000).unwrap()
    }

    /// Independent energy-ratio measurement.
    fn measured_snr(a: &[f32], b: &[f32]) -> f64 {
        let ea: f64 = a.iter().map(|&v| (v as f64).powi(2)).sum();
        let eb: f64 = b.iter().map(|&v| (v as f64).powi(2)).sum();
        10.0 * ea.log10() - 10.0 * eb.log10()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::new(vec![], 8000).is_err());
        assert!(Waveform::new(vec![0.0, f32::NAN], 8000).is_err());
    }

    #[test]
    fn equal_energy_at_zero_db_keeps_interferer_gain() {
        let t = wave(vec![0.5, -0.5, 0.5, -0.5]);
        let i = wave(vec![-0.5, -0.5, 0.5, 0.5]);
        let m = mix_at_snr(&t, &i, 0.0).unwrap();
        assert_eq!(m.sources[1], i);
        assert_eq!(m.sources[0], t);
    }

    #[test]
    fn five_db_scales_interferer_energy() {
        let t = wave(vec![0.3, -0.2, 0.1, 0.25]);
        let i = wave(vec![0.1, 0.3, -0.25, -0.2]);
        assert!((t.energy() - i.energy()).abs() < 1e-9);
        let m = mix_at_snr(&t, &i, 5.0).unwrap();
        let ratio = m.sources[1].energy() / i.energy();
        assert!((ratio - 10f64.powf(-0.5)).abs() < 1e-6, "{ratio}");
    }

    #[test]
    fn measured_snr_matches_request() {
        let a = synth_source(SourceKind::Speechlike, 0.5, 1, 8000).unwrap();
        let b = synth_source(SourceKind::Speechlike, 0.5, 2, 8000).unwrap();
        for snr in [-5.0, -2.5, 0.0, 1.7, 5.0] {
            let m = mix_at_snr(&a, &b, snr).unwrap();
            let got = measured_snr(m.sources[0].samples(), m.sources[1].samples());
            assert!((got - snr).abs() < 1e-6, "requested {snr}, measured {got}");
            assert!((m.snr_db - got).abs() < 1e-9);
        }
    }

    #[test]
    fn mixture_is_sum_of_sources() {
        let a = synth_source(SourceKind::Tone, 0.1, 4, 8000).unwrap();
        let b = synth_source(SourceKind::Noise, 0.1, 5, 8000).unwrap();
        let m = mix_at_snr(&a, &b, -3.0).unwrap();
        for (t, &v) in m.mixture.samples().iter().enumerate() {
            assert_eq!(v, m.sources[0].samples()[t] + m.sources[1].samples()[t]);
        }
    }

    #[test]
    fn loud_mixture_is_rescaled_jointly() {
        let a = wave(vec![0.9, 0.9, -0.9, 0.1]);
        let b = wave(vec![0.9, 0.9, -0.9, 0.1]);
        let m = mix_at_snr(&a, &b, 0.0).unwrap();
        assert!(m.mixture.peak() <= 1.0);
        assert!((m.snr_db).abs() < 1e-6);
        let direct: Vec<f32> = m.sources[0]
            .samples()
            .iter()
            .zip(m.sources[1].samples())
            .map(|(x, y)| x + y)
            .collect();
        assert_eq!(m.mixture.samples(), direct.as_slice());
    }

    #[test]
    fn zero_energy_source_is_rejected() {
        let a = wave(vec![0.1, 0.2]);
        let z = wave(vec![0.0, 0.0]);
        assert!(matches!(mix_at_snr(&a, &z, 0.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn unequal_lengths_truncate_to_shortest() {
        let a = wave(vec![0.1, 0.2, 0.3, 0.4]);
        let b = wave(vec![0.3, -0.1, 0.2]);
        let m = mix_at_snr(&a, &b, 0.0).unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn three_sources_each_relative_to_first() {
        let s: Vec<Waveform> = (0..3)
            .map(|i| synth_source(SourceKind::Speechlike, 0.25, 10 + i, 8000).unwrap())
            .collect();
        let m = mix_sources(&s, 2.0).unwrap();
        for c in 1..3 {
            let got = measured_snr(m.sources[0].samples(), m.sources[c].samples());
            assert!((got - 2.0).abs() < 1e-6);
        }
    }
}
