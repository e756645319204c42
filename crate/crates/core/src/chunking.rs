//! Overlapped chunking of feature maps and its overlap-add inverse.
//!
//! Chunk tensors are stored chunk-major, `[S, K, D]`, which makes both the
//! intra-chunk pass (batch over S) and the down/up-sampling reshapes
//! contiguous.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::frontend::FeatureMap;
use crate::graph::{Graph, Var, NONE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkSpec {
    /// Chunk length K in frames.
    pub size: usize,
    /// Hop P in frames.
    pub hop: usize,
}

impl ChunkSpec {
    pub fn new(size: usize, hop: usize) -> Result<Self> {
        let spec = ChunkSpec { size, hop };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.size || self.size % self.hop != 0 {
            return Err(Error::invalid(format!(
                "chunk hop {} must be positive and divide chunk size {}",
                self.hop, self.size
            )));
        }
        Ok(())
    }

    /// Zero frames prepended before the first original frame.
    pub fn front_pad(&self) -> usize {
        self.size - self.hop
    }

    pub fn chunk_count(&self, frames: usize) -> usize {
        (frames + self.front_pad()).div_ceil(self.hop)
    }

    /// Length of the padded sequence the chunks tile.
    pub fn padded_len(&self, frames: usize) -> usize {
        (self.chunk_count(frames) - 1) * self.hop + self.size
    }

    /// Number of chunks covering every padded position.
    pub fn coverage(&self) -> usize {
        self.size / self.hop
    }

    /// For each `(s, k)` slot, the original frame it reads, or `NONE` in padding.
    fn slot_map(&self, frames: usize) -> Vec<u32> {
        let chunks = self.chunk_count(frames);
        let pad = self.front_pad();
        let mut map = Vec::with_capacity(chunks * self.size);
        for s in 0..chunks {
            for k in 0..self.size {
                let p = s * self.hop + k;
                map.push(if p >= pad && p - pad < frames {
                    (p - pad) as u32
                } else {
                    NONE
                });
            }
        }
        map
    }

    /// Slot map widened to whole rows of `width` features.
    fn element_map(&self, frames: usize, width: usize) -> Vec<u32> {
        let slots = self.slot_map(frames);
        let mut map = Vec::with_capacity(slots.len() * width);
        for &f in &slots {
            if f == NONE {
                map.extend(std::iter::repeat(NONE).take(width));
            } else {
                let base = f as usize * width;
                map.extend((base..base + width).map(|i| i as u32));
            }
        }
        map
    }
}

/// A D × K × S tensor of overlapped chunks, stored `[S, K, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkTensor<T> {
    values: Tensor<T>,
    spec: ChunkSpec,
    original_frames: usize,
}

impl<T: Scalar> ChunkTensor<T> {
    pub fn new(values: Tensor<T>, spec: ChunkSpec, original_frames: usize) -> Result<Self> {
        spec.validate()?;
        let shape = values.shape();
        if shape.len() != 3 || shape[1] != spec.size {
            return Err(Error::invalid(format!(
                "chunk tensor must be [S, {}, D], got {shape:?}",
                spec.size
            )));
        }
        if original_frames == 0 || spec.chunk_count(original_frames) != shape[0] {
            return Err(Error::invalid(format!(
                "{} chunks are inconsistent with {original_frames} original frames",
                shape[0]
            )));
        }
        Ok(ChunkTensor {
            values,
            spec,
            original_frames,
        })
    }

    pub fn spec(&self) -> ChunkSpec {
        self.spec
    }

    pub fn original_frames(&self) -> usize {
        self.original_frames
    }

    pub fn chunks(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Value at feature `d`, intra-chunk position `k`, chunk `s`.
    pub fn at(&self, d: usize, k: usize, s: usize) -> T {
        self.values.at(&[s, k, d])
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }
}

/// Splits a `[L, D]` node into a `[S, K, D]` node.
pub fn segment_graph<T: Scalar>(g: &Graph<T>, x: Var, spec: ChunkSpec) -> Var {
    let shape = g.shape(x);
    let (frames, width) = (shape[0], shape[1]);
    let map = spec.element_map(frames, width);
    let chunks = spec.chunk_count(frames);
    g.gather(x, Rc::new(map), &[chunks, spec.size, width])
}

/// Sums a `[S, K, D]` node back onto `frames` frames and divides out the
/// coverage factor K/P.
pub fn overlap_add_graph<T: Scalar>(g: &Graph<T>, z: Var, spec: ChunkSpec, frames: usize) -> Var {
    let width = g.shape(z)[2];
    let map = spec.element_map(frames, width);
    let summed = g.scatter_add(z, Rc::new(map), &[frames, width]);
    g.scale(summed, T::one() / T::from_usize(spec.coverage()).expect("coverage"))
}

pub fn segment<T: Scalar>(x: &FeatureMap<T>, spec: ChunkSpec) -> Result<ChunkTensor<T>> {
    spec.validate()?;
    let g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let z = segment_graph(&g, xv, spec);
    ChunkTensor::new((*g.value(z)).clone(), spec, x.frames())
}

pub fn overlap_add<T: Scalar>(z: &ChunkTensor<T>) -> Result<FeatureMap<T>> {
    let g = Graph::new();
    let zv = g.constant(z.tensor().clone());
    let out = overlap_add_graph(&g, zv, z.spec, z.original_frames);
    FeatureMap::from_frames((*g.value(out)).clone())
}

/// Raw per-frame coverage counts (before normalisation) over the padded
/// sequence, used to check the uniform-coverage property.
pub fn coverage_counts(frames: usize, spec: ChunkSpec) -> Vec<usize> {
    let mut counts = vec![0usize; spec.padded_len(frames)];
    for s in 0..spec.chunk_count(frames) {
        for k in 0..spec.size {
            counts[s * spec.hop + k] += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(frames: usize, width: usize) -> FeatureMap<f64> {
        FeatureMap::from_frames(Tensor::from_fn(&[frames, width], |i| i as f64 + 1.0)).unwrap()
    }

    /// Brute force: how many chunks read original frame `f`.
    fn occurrences(z: &ChunkTensor<f64>, x: &FeatureMap<f64>, f: usize) -> usize {
        let mut n = 0;
        for s in 0..z.chunks() {
            for k in 0..z.spec().size {
                if z.at(0, k, s) == x.at(0, f) {
                    n += 1;
                }
            }
        }
        n
    }

    #[test]
    fn worked_example_k4_p2_l6() {
        let spec = ChunkSpec::new(4, 2).unwrap();
        let x = ramp(6, 1);
        let z = segment(&x, spec).unwrap();
        assert_eq!(spec.front_pad(), 2);
        assert_eq!(z.chunks(), 4);
        for f in 0..6 {
            assert_eq!(occurrences(&z, &x, f), 2, "frame {f}");
        }
        // chunk 0 is two padding frames then frames 0 and 1
        let first: Vec<f64> = (0..4).map(|k| z.at(0, k, 0)).collect();
        assert_eq!(first, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn no_overlap_single_chunk_is_identity() {
        let spec = ChunkSpec::new(5, 5).unwrap();
        let x = ramp(5, 3);
        let z = segment(&x, spec).unwrap();
        assert_eq!(z.chunks(), 1);
        assert_eq!(z.tensor().data(), x.tensor().data());
        assert_eq!(overlap_add(&z).unwrap(), x);
    }

    #[test]
    fn all_ones_chunks_sum_to_coverage() {
        let spec = ChunkSpec::new(4, 2).unwrap();
        let counts = coverage_counts(6, spec);
        assert!(counts[2..counts.len() - 2].iter().all(|&c| c == 2));
        let z = ChunkTensor::new(Tensor::<f64>::ones(&[4, 4, 1]), spec, 6).unwrap();
        let y = overlap_add(&z).unwrap();
        assert!(y.tensor().data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn invalid_specs_and_frame_counts_are_rejected() {
        assert!(ChunkSpec::new(4, 3).is_err());
        assert!(ChunkSpec::new(4, 0).is_err());
        assert!(ChunkSpec::new(2, 4).is_err());
        let spec = ChunkSpec::new(4, 2).unwrap();
        assert!(matches!(
            ChunkTensor::new(Tensor::<f64>::ones(&[4, 4, 1]), spec, 20),
            Err(Error::InvalidArgument(_))
        ));
    }

    proptest! {
        #[test]
        fn round_trip_is_exact(frames in 1usize..60, width in 1usize..5, hop in 1usize..6, ratio in 1usize..4, seed in 0u64..1000) {
            let spec = ChunkSpec::new(hop * ratio, hop).unwrap();
            let x = FeatureMap::from_frames(crate::params::Init::new(seed).uniform::<f64>(&[frames, width], 1.0)).unwrap();
            let y = overlap_add(&segment(&x, spec).unwrap()).unwrap();
            prop_assert!(y.tensor().max_abs_diff(x.tensor()) < 1e-12);
        }

        #[test]
        fn every_frame_is_covered_k_over_p_times(frames in 1usize..60, hop in 1usize..6, ratio in 1usize..4) {
            let spec = ChunkSpec::new(hop * ratio, hop).unwrap();
            let counts = coverage_counts(frames, spec);
            let pad = spec.front_pad();
            for f in 0..frames {
                prop_assert_eq!(counts[pad + f], ratio);
            }
        }

        #[test]
        fn segment_is_linear(frames in 1usize..30, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let spec = ChunkSpec::new(4, 2).unwrap();
            let mut init = crate::params::Init::new(seed);
            let x: Tensor<f64> = init.uniform(&[frames, 2], 1.0);
            let y: Tensor<f64> = init.uniform(&[frames, 2], 1.0);
            let combo = Tensor::new(&[frames, 2], x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect()).unwrap();
            let zx = segment(&FeatureMap::from_frames(x).unwrap(), spec).unwrap();
            let zy = segment(&FeatureMap::from_frames(y).unwrap(), spec).unwrap();
            let zc = segment(&FeatureMap::from_frames(combo).unwrap(), spec).unwrap();
            for ((c, p), q) in zc.tensor().data().iter().zip(zx.tensor().data()).zip(zy.tensor().data()) {
                prop_assert!((c - (a * p + b * q)).abs() < 1e-12);
            }
        }
    }
}
