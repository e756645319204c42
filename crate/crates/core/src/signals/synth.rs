use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

const PEAK: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    /// Harmonic voice-like signal with a wandering pitch, formant colouring,
    /// syllabic amplitude envelope and pauses.
    Speechlike,
    Tone,
    Noise,
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speechlike" => Ok(SourceKind::Speechlike),
            "tone" => Ok(SourceKind::Tone),
            "noise" => Ok(SourceKind::Noise),
            other => Err(Error::invalid(format!("unknown source kind {other}"))),
        }
    }
}

/// Deterministic synthetic source, peak-normalised to 0.9.
pub fn synth_source(
    kind: SourceKind,
    duration_s: f64,
    seed: u64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::invalid(format!(
            "duration must be positive, got {duration_s}"
        )));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let n = ((duration_s * sample_rate as f64).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind_salt(kind));
    let fs = sample_rate as f64;
    let raw = match kind {
        SourceKind::Tone => {
            let freq = rng.gen_range(150.0..0.35 * fs);
            let phase = rng.gen_range(0.0..TAU);
            (0..n)
                .map(|t| (TAU * freq * t as f64 / fs + phase).sin())
                .collect()
        }
        SourceKind::Noise => {
            let dist = Normal::new(0.0, 1.0).unwrap();
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        }
        SourceKind::Speechlike => speechlike(&mut rng, n, fs),
    };
    Waveform::new(normalize(raw), sample_rate)
}

fn kind_salt(kind: SourceKind) -> u64 {
    match kind {
        SourceKind::Speechlike => 0x5bd1_e995,
        SourceKind::Tone => 0x27d4_eb2f,
        SourceKind::Noise => 0x1656_67b1,
    }
}

fn normalize(raw: Vec<f64>) -> Vec<f32> {
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return raw.into_iter().map(|v| v as f32).collect();
    }
    raw.into_iter().map(|v| (v * PEAK / peak) as f32).collect()
}

/// Piecewise-linear random walk sampled at `n` points, knots every `step` samples.
fn random_contour(rng: &mut ChaCha8Rng, n: usize, step: usize, spread: f64) -> Vec<f64> {
    let knots = n / step + 2;
    let mut values = Vec::with_capacity(knots);
    let mut v = 0.0f64;
    for _ in 0..knots {
        values.push(v);
        v = (v + rng.gen_range(-spread..spread)).clamp(-2.0 * spread, 2.0 * spread);
    }
    (0..n)
        .map(|t| {
            let k = t / step;
            let frac = (t % step) as f64 / step as f64;
            values[k] * (1.0 - frac) + values[k + 1] * frac
        })
        .collect()
}

fn speechlike(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let f0 = rng.gen_range(90.0..260.0);
    let vibrato_rate = rng.gen_range(3.0..7.0);
    let vibrato_depth = rng.gen_range(0.01..0.04);
    let vibrato_phase = rng.gen_range(0.0..TAU);
    let glide = random_contour(rng, n, (0.12 * fs) as usize + 1, 0.08);

    // Two formant bumps colour the harmonic amplitudes.
    let formants = [
        (rng.gen_range(300.0..900.0), rng.gen_range(80.0..200.0)),
        (rng.gen_range(900.0..2500.0), rng.gen_range(120.0..300.0)),
    ];
    let colour = |f: f64| {
        0.15 + formants
            .iter()
            .map(|&(c, bw): &(f64, f64)| (-((f - c) / bw).powi(2)).exp())
            .sum::<f64>()
    };

    let envelope = syllable_envelope(rng, n, fs);
    let nyquist = 0.45 * fs;
    let max_harmonics = (nyquist / (f0 * 0.8)) as usize;
    let harmonic_phase: Vec<f64> = (0..max_harmonics).map(|_| rng.gen_range(0.0..TAU)).collect();

    let mut out = vec![0.0f64; n];
    let mut phase = 0.0f64;
    for t in 0..n {
        let time = t as f64 / fs;
        let pitch = f0
            * (1.0 + glide[t])
            * (1.0 + vibrato_depth * (TAU * vibrato_rate * time + vibrato_phase).sin());
        phase += TAU * pitch / fs;
        let mut sample = 0.0;
        for (h, &hp) in harmonic_phase.iter().enumerate() {
            let order = (h + 1) as f64;
            let freq = order * pitch;
            if freq >= nyquist {
                break;
            }
            sample += colour(freq) / order.sqrt() * (order * phase + hp).sin();
        }
        out[t] = sample * envelope[t];
    }
    out
}

/// Raised-sine syllables of random length separated by occasional pauses.
fn syllable_envelope(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut env = vec![0.0f64; n];
    let mut t = (rng.gen_range(0.0..0.05) * fs) as usize;
    while t < n {
        let len = (rng.gen_range(0.08..0.25) * fs) as usize + 1;
        let level = rng.gen_range(0.5..1.0);
        for i in 0..len.min(n - t) {
            let x = (i as f64 + 0.5) / len as f64;
            env[t + i] = level * (std::f64::consts::PI * x).sin().powf(0.6);
        }
        t += len;
        if rng.gen_bool(0.3) {
            t += (rng.gen_range(0.04..0.18) * fs) as usize;
        }
    }
    env
}
