//! Learned waveform encoder, feature projection, masking and the
//! transposed-convolution decoder.
//!
//! Feature maps are stored time-major (`[frames, channels]`), so one frame is
//! a contiguous row.

use std::rc::Rc;

use crate::config::{MaskActivation, Nonlinearity};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var, NONE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A channels × frames feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// Wraps a `[frames, channels]` tensor.
    pub fn from_frames(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 2 || values.is_empty() {
            return Err(Error::invalid(format!(
                "feature map must be a non-empty [frames, channels] array, got {:?}",
                values.shape()
            )));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(FeatureMap { values })
    }

    pub fn zeros(channels: usize, frames: usize) -> Self {
        FeatureMap {
            values: Tensor::zeros(&[frames, channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn at(&self, channel: usize, frame: usize) -> T {
        self.values.at(&[frame, channel])
    }

    pub fn set(&mut self, channel: usize, frame: usize, value: T) {
        self.values.set(&[frame, channel], value);
    }

    /// The underlying `[frames, channels]` tensor.
    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.values
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    /// `[E, M]` filterbank.
    pub basis: Tensor<T>,
    pub stride: usize,
    pub nonlinearity: Nonlinearity,
}

#[derive(Clone, Debug)]
pub struct DecoderParams<T> {
    /// `[E, M]` synthesis filters.
    pub basis: Tensor<T>,
    pub stride: usize,
}

/// C masks, each shaped like the feature map they are applied to.
#[derive(Clone, Debug)]
pub struct MaskSet<T> {
    pub masks: Vec<FeatureMap<T>>,
    pub activation: MaskActivation,
}

fn check_window(window: usize, stride: usize) -> Result<()> {
    if window == 0 || stride == 0 || stride > window {
        return Err(Error::invalid(format!(
            "need 0 < stride ({stride}) <= window ({window})"
        )));
    }
    Ok(())
}

/// Frame count after right-padding `samples` so `(T - M)` divides by the stride.
pub fn frame_count(samples: usize, window: usize, stride: usize) -> usize {
    if samples <= window {
        1
    } else {
        (samples - window).div_ceil(stride) + 1
    }
}

/// Length of the transposed-convolution output for `frames` frames.
pub fn synthesis_len(frames: usize, window: usize, stride: usize) -> usize {
    (frames - 1) * stride + window
}

/// Gather map slicing a `[samples]` signal into `[frames, window]` rows,
/// reading zeros past the end.
fn framing_map(samples: usize, frames: usize, window: usize, stride: usize) -> Vec<u32> {
    let mut map = Vec::with_capacity(frames * window);
    for t in 0..frames {
        for m in 0..window {
            let i = t * stride + m;
            map.push(if i < samples { i as u32 } else { NONE });
        }
    }
    map
}

/// Encodes a `[T]` waveform node into a `[L, E]` feature node.
pub fn encode_graph<T: Scalar>(
    g: &Graph<T>,
    wave: Var,
    basis: Var,
    stride: usize,
    nonlinearity: Nonlinearity,
) -> Var {
    let samples = g.shape(wave)[0];
    let window = g.shape(basis)[1];
    let frames = frame_count(samples, window, stride);
    let map = framing_map(samples, frames, window, stride);
    let framed = g.gather(wave, Rc::new(map), &[frames, window]);
    let feats = g.matmul(framed, basis, false, true);
    match nonlinearity {
        Nonlinearity::Relu => g.relu(feats),
        Nonlinearity::None => feats,
    }
}

/// Transposed convolution of a `[L, E]` node with `[E, M]` filters, trimmed
/// to `samples`.
pub fn decode_graph<T: Scalar>(
    g: &Graph<T>,
    feats: Var,
    basis: Var,
    stride: usize,
    samples: usize,
) -> Var {
    let frames = g.shape(feats)[0];
    let window = g.shape(basis)[1];
    let pieces = g.matmul(feats, basis, false, false);
    let map = framing_map(samples, frames, window, stride);
    g.scatter_add(pieces, Rc::new(map), &[samples])
}

/// Frames `w` with the learned basis. Inputs whose `(T - M)` is not a
/// multiple of the stride are zero-padded on the right.
pub fn encode<T: Scalar>(w: &[T], p: &EncoderParams<T>) -> Result<FeatureMap<T>> {
    if p.basis.rank() != 2 || p.basis.is_empty() {
        return Err(Error::invalid("encoder basis must be a non-empty [E, M] array"));
    }
    let window = p.basis.shape()[1];
    check_window(window, p.stride)?;
    if w.len() < window {
        return Err(Error::invalid(format!(
            "input of {} samples is shorter than one window ({window})",
            w.len()
        )));
    }
    let g = Graph::new();
    let wave = g.constant(Tensor::new(&[w.len()], w.to_vec())?);
    let basis = g.constant(p.basis.clone());
    let out = encode_graph(&g, wave, basis, p.stride, p.nonlinearity);
    FeatureMap::from_frames((*g.value(out)).clone())
}

/// Per-frame linear map with `W` given as `[D, E]`.
pub fn project<T: Scalar>(x: &FeatureMap<T>, w: &Tensor<T>) -> Result<FeatureMap<T>> {
    if w.rank() != 2 || w.shape()[1] != x.channels() {
        return Err(Error::invalid(format!(
            "projection weights {:?} do not match {} input channels",
            w.shape(),
            x.channels()
        )));
    }
    if w.shape()[0] >= x.channels() {
        return Err(Error::invalid(format!(
            "projected width {} must be smaller than the encoder width {}",
            w.shape()[0],
            x.channels()
        )));
    }
    let g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let wv = g.constant(w.clone());
    let out = g.matmul(xv, wv, false, true);
    FeatureMap::from_frames((*g.value(out)).clone())
}

pub fn apply_masks<T: Scalar>(x: &FeatureMap<T>, m: &MaskSet<T>) -> Result<Vec<FeatureMap<T>>> {
    m.masks
        .iter()
        .enumerate()
        .map(|(i, mask)| {
            if mask.tensor().shape() != x.tensor().shape() {
                return Err(Error::invalid(format!(
                    "mask {i} is {}x{}, features are {}x{}",
                    mask.channels(),
                    mask.frames(),
                    x.channels(),
                    x.frames()
                )));
            }
            let data = x
                .tensor()
                .data()
                .iter()
                .zip(mask.tensor().data())
                .map(|(&a, &b)| a * b)
                .collect();
            FeatureMap::from_frames(Tensor::new(x.tensor().shape(), data)?)
        })
        .collect()
}

/// Transposed convolution back to `(L - 1) * stride + M` samples.
pub fn decode<T: Scalar>(d: &FeatureMap<T>, p: &DecoderParams<T>) -> Result<Vec<T>> {
    if p.basis.rank() != 2 || p.basis.shape()[0] != d.channels() {
        return Err(Error::invalid(format!(
            "decoder basis {:?} does not match {} channels",
            p.basis.shape(),
            d.channels()
        )));
    }
    let window = p.basis.shape()[1];
    check_window(window, p.stride)?;
    let samples = synthesis_len(d.frames(), window, p.stride);
    let g = Graph::new();
    let feats = g.constant(d.tensor().clone());
    let basis = g.constant(p.basis.clone());
    let out = decode_graph(&g, feats, basis, p.stride, samples);
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(e: usize, m: usize, stride: usize, seed: u64) -> EncoderParams<f64> {
        EncoderParams {
            basis: Init::new(seed).uniform(&[e, m], 1.0),
            stride,
            nonlinearity: Nonlinearity::Relu,
        }
    }

    /// Window placements that fit inside a padded signal, counted one by one.
    fn enumerate_placements(samples: usize, window: usize, stride: usize) -> usize {
        let mut padded = samples;
        while padded < window || (padded - window) % stride != 0 {
            padded += 1;
        }
        (0..padded).filter(|s| s % stride == 0 && s + window <= padded).count()
    }

    #[test]
    fn frame_count_matches_enumeration() {
        assert_eq!(frame_count(32, 16, 8), 3);
        for samples in 1..80 {
            for window in 1..12 {
                for stride in 1..=window {
                    assert_eq!(
                        frame_count(samples, window, stride),
                        enumerate_placements(samples, window, stride),
                        "T={samples} M={window} s={stride}"
                    );
                }
            }
        }
    }

    #[test]
    fn synthesis_length_matches_explicit_overlap_add() {
        assert_eq!(synthesis_len(3, 16, 8), 32);
        for frames in 1..6 {
            for (window, stride) in [(16, 8), (4, 2), (5, 3), (7, 7)] {
                let mut end = 0;
                for t in 0..frames {
                    end = end.max(t * stride + window);
                }
                assert_eq!(synthesis_len(frames, window, stride), end);
            }
        }
    }

    #[test]
    fn zero_waveform_encodes_to_zero() {
        let x = encode(&[0.0f64; 40], &enc(8, 16, 8, 1)).unwrap();
        assert!(x.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_width_follows_basis() {
        let p = EncoderParams::<f32> {
            basis: Init::new(0).uniform(&[512, 16], 0.1),
            stride: 8,
            nonlinearity: Nonlinearity::Relu,
        };
        let x = encode(&[0.1f32; 32], &p).unwrap();
        assert_eq!((x.channels(), x.frames()), (512, 3));
    }

    #[test]
    fn frame_equals_basis_times_window() {
        let p = enc(6, 4, 2, 3);
        let w: Vec<f64> = (0..11).map(|i| (i as f64 * 0.7).sin()).collect();
        let x = encode(&w, &p).unwrap();
        assert_eq!(x.frames(), 5);
        for t in 0..x.frames() {
            for e in 0..6 {
                let mut acc = 0.0;
                for m in 0..4 {
                    acc += p.basis.at(&[e, m]) * w.get(t * 2 + m).copied().unwrap_or(0.0);
                }
                assert!((x.at(e, t) - acc.max(0.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn short_input_is_rejected() {
        let err = encode(&[1.0f64; 10], &enc(4, 16, 8, 0)).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn positive_homogeneity() {
        let p = enc(8, 16, 8, 2);
        let w: Vec<f64> = (0..64).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let base = encode(&w, &p).unwrap();
        for a in [0.0, 0.5, 3.0] {
            let scaled: Vec<f64> = w.iter().map(|v| v * a).collect();
            let x = encode(&scaled, &p).unwrap();
            let expect = base.tensor().map(|v| v * a);
            assert!(x.tensor().max_abs_diff(&expect) < 1e-12);
        }
    }

    #[test]
    fn project_selects_leading_channels_with_identity_rows() {
        let x = FeatureMap::from_frames(Tensor::from_fn(&[5, 6], |i| i as f64)).unwrap();
        let w = Tensor::from_fn(&[3, 6], |i| if i % 6 == i / 6 { 1.0 } else { 0.0 });
        let y = project(&x, &w).unwrap();
        for t in 0..5 {
            for d in 0..3 {
                assert_eq!(y.at(d, t), x.at(d, t));
            }
        }
        let zero = project(&FeatureMap::zeros(6, 5), &w).unwrap();
        assert!(zero.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn project_rejects_bad_shapes() {
        let x = FeatureMap::<f64>::zeros(6, 5);
        assert!(project(&x, &Tensor::zeros(&[3, 5])).is_err());
        assert!(project(&x, &Tensor::zeros(&[6, 6])).is_err());
    }

    #[test]
    fn masks_behave_elementwise() {
        let x = FeatureMap::from_frames(Tensor::from_fn(&[4, 3], |i| i as f64 - 5.0)).unwrap();
        let ones = FeatureMap::from_frames(Tensor::ones(&[4, 3])).unwrap();
        let zeros = FeatureMap::zeros(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let half = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut rng).map(|v| 1.0 / (1.0 + (-v).exp()));
        let other = half.map(|v| 1.0 - v);
        let set = MaskSet {
            masks: vec![
                ones,
                zeros,
                FeatureMap::from_frames(half).unwrap(),
                FeatureMap::from_frames(other).unwrap(),
            ],
            activation: MaskActivation::Softmax,
        };
        let out = apply_masks(&x, &set).unwrap();
        assert_eq!(out[0], x);
        assert!(out[1].tensor().data().iter().all(|&v| v == 0.0));
        let mut sum = out[2].tensor().clone();
        sum.add_assign(out[3].tensor());
        assert!(sum.max_abs_diff(x.tensor()) < 1e-6);

        let bad = MaskSet {
            masks: vec![FeatureMap::zeros(3, 5)],
            activation: MaskActivation::Relu,
        };
        assert!(apply_masks(&x, &bad).is_err());
    }

    #[test]
    fn decoder_impulse_reproduces_filter() {
        let basis: Tensor<f64> = Init::new(4).uniform(&[5, 16], 1.0);
        let p = DecoderParams { basis: basis.clone(), stride: 8 };
        for k in 0..5 {
            let mut d = FeatureMap::zeros(5, 3);
            d.set(k, 0, 1.0);
            let w = decode(&d, &p).unwrap();
            assert_eq!(w.len(), 32);
            for m in 0..16 {
                assert_eq!(w[m], basis.at(&[k, m]));
            }
            assert!(w[16..].iter().all(|&v| v == 0.0));
        }
        let zero = decode(&FeatureMap::zeros(5, 3), &p).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_decoder_weight_gradients_match_finite_differences() {
        let (samples, e, m, stride) = (64, 8, 16, 8);
        let mut init = Init::new(17);
        let u: Tensor<f64> = init.uniform(&[e, m], 0.5);
        let v: Tensor<f64> = init.uniform(&[e, m], 0.5);
        let wave: Tensor<f64> = init.uniform(&[samples], 1.0);
        let target: Vec<f64> = init.uniform::<f64>(&[samples], 1.0).into_data();
        let loss = |u: &Tensor<f64>, v: &Tensor<f64>| {
            let g = Graph::new();
            let (uv, vv) = (g.param(u.clone()), g.param(v.clone()));
            let x = g.constant(wave.clone());
            let feats = encode_graph(&g, x, uv, stride, Nonlinearity::Relu);
            let y = decode_graph(&g, feats, vv, stride, samples);
            let t = g.constant(Tensor::new(&[samples], target.clone()).unwrap());
            let diff = g.sub(y, t);
            let sq = g.mul(diff, diff);
            let l = g.sum(sq);
            (g.scalar(l), g.backward(l).get(uv).cloned(), g.backward(l).get(vv).cloned())
        };
        let (_, gu, gv) = loss(&u, &v);
        let (gu, gv) = (gu.unwrap(), gv.unwrap());
        let h = 1e-6;
        for (which, analytic) in [(0, &gu), (1, &gv)] {
            for i in 0..e * m {
                let mut plus = if which == 0 { u.clone() } else { v.clone() };
                let mut minus = plus.clone();
                plus.data_mut()[i] += h;
                minus.data_mut()[i] -= h;
                let (lp, lm) = if which == 0 {
                    (loss(&plus, &v).0, loss(&minus, &v).0)
                } else {
                    (loss(&u, &plus).0, loss(&u, &minus).0)
                };
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-4, "param {which}[{i}]: {a} vs {numeric}");
            }
        }
    }
}
