//! Separation metrics and permutation-invariant training losses.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::frontend::FeatureMap;
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

/// Guard added to every energy in a ratio.
pub const EPS: f64 = 1e-8;
/// Reported metrics are clamped to `[-CAP_DB, CAP_DB]`.
pub const CAP_DB: f64 = 60.0;
/// Largest source count for the exhaustive permutation search.
pub const MAX_PIT_SOURCES: usize = 4;

fn check_pair<T: Scalar>(est: &[T], reference: &[T]) -> Result<(Vec<f64>, Vec<f64>)> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::invalid(format!(
            "estimate and reference lengths differ or are empty ({} vs {})",
            est.len(),
            reference.len()
        )));
    }
    Ok((
        est.iter().map(|v| v.as_f64()).collect(),
        reference.iter().map(|v| v.as_f64()).collect(),
    ))
}

fn zero_mean(x: &mut [f64]) {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|v| *v -= m);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cap(db: f64) -> f64 {
    db.clamp(-CAP_DB, CAP_DB)
}

/// Uncapped SI-SNR in dB, same arithmetic as the training-graph operator.
pub fn si_snr_uncapped<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let (mut e, mut s) = check_pair(est, reference)?;
    zero_mean(&mut e);
    zero_mean(&mut s);
    let ref_energy = dot(&s, &s);
    if ref_energy <= EPS {
        return Err(Error::invalid("reference has (near) zero energy"));
    }
    let alpha = dot(&e, &s) / (ref_energy + EPS);
    let target = alpha * alpha * ref_energy;
    let noise: f64 = e.iter().zip(&s).map(|(a, b)| (a - alpha * b).powi(2)).sum();
    Ok(10.0 * ((target + EPS) / (noise + EPS)).log10())
}

/// Scale-invariant SNR in dB, capped at ±60 dB.
pub fn si_snr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    si_snr_uncapped(est, reference).map(cap)
}

/// Plain (scale-variant) SNR `10 log10(|s|² / |s - ŝ|²)`, capped.
pub fn sdr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    let (e, s) = check_pair(est, reference)?;
    let ref_energy = dot(&s, &s);
    if ref_energy <= EPS {
        return Err(Error::invalid("reference has (near) zero energy"));
    }
    let err: f64 = e.iter().zip(&s).map(|(a, b)| (b - a).powi(2)).sum();
    Ok(cap(10.0 * ((ref_energy + EPS) / (err + EPS)).log10()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    SiSnr,
    Sdr,
}

impl Metric {
    pub fn eval<T: Scalar>(self, est: &[T], reference: &[T]) -> Result<f64> {
        match self {
            Metric::SiSnr => si_snr(est, reference),
            Metric::Sdr => sdr(est, reference),
        }
    }
}

/// `metric(est, ref) - metric(mixture, ref)`.
pub fn improvement<T: Scalar>(metric: Metric, est: &[T], reference: &[T], mixture: &[T]) -> Result<f64> {
    if mixture.len() != reference.len() {
        return Err(Error::invalid("mixture length differs from reference"));
    }
    Ok(metric.eval(est, reference)? - metric.eval(mixture, reference)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PitResult {
    pub loss: f64,
    /// `best_perm[c]` is the estimate assigned to reference `c`.
    pub best_perm: Vec<usize>,
    /// `per_pair[c][k]` is the loss of estimate `k` against reference `c`.
    pub per_pair: Vec<Vec<f64>>,
}

/// Minimum over all permutations of the mean assigned pair loss.
pub fn best_assignment(per_pair: &[Vec<f64>]) -> Result<(f64, Vec<usize>)> {
    let c = per_pair.len();
    if c == 0 || per_pair.iter().any(|row| row.len() != c) {
        return Err(Error::invalid("pair-loss matrix must be square and non-empty"));
    }
    if c > MAX_PIT_SOURCES {
        return Err(Error::Unsupported(format!(
            "exhaustive permutation search is limited to {MAX_PIT_SOURCES} sources, got {c}"
        )));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..c).permutations(c) {
        let mean = perm.iter().enumerate().map(|(r, &k)| per_pair[r][k]).sum::<f64>() / c as f64;
        if best.as_ref().is_none_or(|(b, _)| mean < *b) {
            best = Some((mean, perm));
        }
    }
    Ok(best.expect("at least one permutation"))
}

/// Utterance-level PIT with an arbitrary pair loss, evaluated once per pair.
pub fn pit_loss<E: AsRef<[T]>, T: Scalar>(
    ests: &[E],
    refs: &[E],
    pairwise: impl Fn(&[T], &[T]) -> Result<f64>,
) -> Result<PitResult> {
    if ests.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} references",
            ests.len(),
            refs.len()
        )));
    }
    if ests.len() > MAX_PIT_SOURCES {
        return Err(Error::Unsupported(format!(
            "exhaustive permutation search is limited to {MAX_PIT_SOURCES} sources, got {}",
            ests.len()
        )));
    }
    let per_pair = refs
        .iter()
        .map(|r| ests.iter().map(|e| pairwise(e.as_ref(), r.as_ref())).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (loss, best_perm) = best_assignment(&per_pair)?;
    Ok(PitResult {
        loss,
        best_perm,
        per_pair,
    })
}

/// Negative uncapped SI-SNR, the default training pair loss.
pub fn neg_si_snr<T: Scalar>(est: &[T], reference: &[T]) -> Result<f64> {
    si_snr_uncapped(est, reference).map(|v| -v)
}

/// Mean squared difference over all frames and channels.
pub fn feature_mse<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<f64> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::invalid(format!(
            "feature maps differ in shape: {:?} vs {:?}",
            a.tensor().shape(),
            b.tensor().shape()
        )));
    }
    let n = a.tensor().len() as f64;
    Ok(a.tensor()
        .data()
        .iter()
        .zip(b.tensor().data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n)
}

/// PIT over encoder-domain MSE. Each pair is normalised by frames × channels
/// and the assignment mean divides by C, giving the overall `1/(T·F·C)`.
pub fn mse_pit_loss<T: Scalar>(masked: &[FeatureMap<T>], refs: &[FeatureMap<T>]) -> Result<PitResult> {
    if masked.len() != refs.len() {
        return Err(Error::invalid(format!(
            "{} masked features for {} references",
            masked.len(),
            refs.len()
        )));
    }
    let per_pair = refs
        .iter()
        .map(|r| masked.iter().map(|m| feature_mse(m, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let (loss, best_perm) = best_assignment(&per_pair)?;
    Ok(PitResult {
        loss,
        best_perm,
        per_pair,
    })
}

fn select<T: Scalar>(g: &Graph<T>, pair_vars: &[Vec<Var>], perm: &[usize]) -> Var {
    let chosen: Vec<Var> = perm.iter().enumerate().map(|(r, &k)| pair_vars[r][k]).collect();
    let mut total = chosen[0];
    for &v in &chosen[1..] {
        total = g.add(total, v);
    }
    g.scale(total, T::one() / T::lit(perm.len() as f64))
}

/// Training-graph PIT over negative SI-SNR of `[T]` estimate nodes. The
/// returned node carries gradients through the selected assignment only.
pub fn pit_si_snr_graph<T: Scalar>(g: &Graph<T>, ests: &[Var], refs: &[Vec<T>]) -> Result<(Var, PitResult)> {
    if ests.len() != refs.len() || ests.len() > MAX_PIT_SOURCES {
        return Err(Error::invalid(format!(
            "need matching estimate/reference counts up to {MAX_PIT_SOURCES}, got {} and {}",
            ests.len(),
            refs.len()
        )));
    }
    let pair_vars: Vec<Vec<Var>> = refs
        .iter()
        .map(|r| ests.iter().map(|&e| g.scale(g.si_snr(e, r, EPS), -T::one())).collect())
        .collect();
    let per_pair: Vec<Vec<f64>> = pair_vars
        .iter()
        .map(|row| row.iter().map(|&v| g.scalar(v).as_f64()).collect())
        .collect();
    let (loss, best_perm) = best_assignment(&per_pair)?;
    let node = select(g, &pair_vars, &best_perm);
    Ok((
        node,
        PitResult {
            loss,
            best_perm,
            per_pair,
        },
    ))
}

/// Training-graph PIT over encoder-domain MSE between `[L, E]` nodes.
pub fn pit_mse_graph<T: Scalar>(g: &Graph<T>, masked: &[Var], refs: &[Var]) -> Result<(Var, PitResult)> {
    if masked.len() != refs.len() || masked.len() > MAX_PIT_SOURCES {
        return Err(Error::invalid("need matching masked/reference counts"));
    }
    let pair_vars: Vec<Vec<Var>> = refs
        .iter()
        .map(|&r| {
            masked
                .iter()
                .map(|&m| {
                    let d = g.sub(m, r);
                    g.mean(g.mul(d, d))
                })
                .collect()
        })
        .collect();
    let per_pair: Vec<Vec<f64>> = pair_vars
        .iter()
        .map(|row| row.iter().map(|&v| g.scalar(v).as_f64()).collect())
        .collect();
    let (loss, best_perm) = best_assignment(&per_pair)?;
    let node = select(g, &pair_vars, &best_perm);
    Ok((
        node,
        PitResult {
            loss,
            best_perm,
            per_pair,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn randv(n: usize, seed: u64) -> Vec<f64> {
        Init::new(seed).uniform::<f64>(&[n], 1.0).into_data()
    }

    #[test]
    fn perfect_estimate_hits_the_cap() {
        let r = randv(200, 1);
        assert_eq!(si_snr(&r, &r).unwrap(), CAP_DB);
        assert_eq!(sdr(&r, &r).unwrap(), CAP_DB);
        let scaled: Vec<f64> = r.iter().map(|v| 3.5 * v).collect();
        assert_eq!(si_snr(&scaled, &r).unwrap(), CAP_DB);
    }

    #[test]
    fn orthogonal_equal_energy_noise_is_zero_db() {
        let n = 64;
        let r: Vec<f64> = (0..n).map(|t| (std::f64::consts::TAU * 3.0 * t as f64 / n as f64).sin()).collect();
        let noise: Vec<f64> = (0..n).map(|t| (std::f64::consts::TAU * 5.0 * t as f64 / n as f64).sin()).collect();
        let est: Vec<f64> = r.iter().zip(&noise).map(|(a, b)| a + b).collect();
        assert!(si_snr(&est, &r).unwrap().abs() < 1e-6);
    }

    #[test]
    fn sdr_is_scale_variant() {
        let r = randv(100, 2);
        assert!(sdr(&vec![0.0; 100], &r).unwrap().abs() < 1e-6);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        assert!(sdr(&doubled, &r).unwrap().abs() < 1e-6);
    }

    #[test]
    fn zero_reference_is_rejected() {
        let z = vec![0.0f64; 10];
        assert!(matches!(si_snr(&randv(10, 1), &z), Err(Error::InvalidArgument(_))));
        assert!(matches!(sdr(&randv(10, 1), &z), Err(Error::InvalidArgument(_))));
        assert!(si_snr(&[1.0f64, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn improvement_definitions() {
        let r = randv(100, 3);
        let mix: Vec<f64> = r.iter().zip(randv(100, 4)).map(|(a, b)| a + b).collect();
        for metric in [Metric::SiSnr, Metric::Sdr] {
            assert_eq!(improvement(metric, &mix, &r, &mix).unwrap(), 0.0);
            let best = improvement(metric, &r, &r, &mix).unwrap();
            assert!((best - (CAP_DB - metric.eval(&mix, &r).unwrap())).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_operator_matches_metric() {
        let (e, r) = (randv(50, 5), randv(50, 6));
        let g = Graph::<f64>::new();
        let v = g.si_snr(g.constant(Tensor::new(&[50], e.clone()).unwrap()), &r, EPS);
        assert!((g.scalar(v) - si_snr_uncapped(&e, &r).unwrap()).abs() < 1e-12);
    }

    /// Independent oracle: walk every permutation by recursion, recomputing
    /// each pair loss from scratch.
    fn brute_force(ests: &[Vec<f64>], refs: &[Vec<f64>]) -> (f64, Vec<usize>) {
        fn rec(
            ests: &[Vec<f64>],
            refs: &[Vec<f64>],
            used: &mut Vec<bool>,
            perm: &mut Vec<usize>,
            best: &mut (f64, Vec<usize>),
        ) {
            if perm.len() == refs.len() {
                let total: f64 = perm
                    .iter()
                    .enumerate()
                    .map(|(c, &k)| -si_snr_uncapped(&ests[k], &refs[c]).unwrap())
                    .sum::<f64>()
                    / refs.len() as f64;
                if total < best.0 {
                    *best = (total, perm.clone());
                }
                return;
            }
            for k in 0..ests.len() {
                if !used[k] {
                    used[k] = true;
                    perm.push(k);
                    rec(ests, refs, used, perm, best);
                    perm.pop();
                    used[k] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, vec![]);
        rec(ests, refs, &mut vec![false; ests.len()], &mut vec![], &mut best);
        best
    }

    #[test]
    fn identity_and_swap() {
        let refs = vec![randv(80, 1), randv(80, 2)];
        let same = pit_loss(&refs, &refs, neg_si_snr).unwrap();
        assert_eq!(same.best_perm, vec![0, 1]);
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let sw = pit_loss(&swapped, &refs, neg_si_snr).unwrap();
        assert_eq!(sw.best_perm, vec![1, 0]);
        assert_eq!(sw.loss, same.loss);
    }

    #[test]
    fn five_sources_are_unsupported() {
        let refs: Vec<Vec<f64>> = (0..5).map(|i| randv(10, i)).collect();
        assert!(matches!(pit_loss(&refs, &refs, neg_si_snr), Err(Error::Unsupported(_))));
    }

    #[test]
    fn pair_losses_are_evaluated_once_each() {
        let refs: Vec<Vec<f64>> = (0..3).map(|i| randv(20, i)).collect();
        let calls = std::cell::Cell::new(0);
        pit_loss(&refs, &refs, |a, b| {
            calls.set(calls.get() + 1);
            neg_si_snr(a, b)
        })
        .unwrap();
        assert_eq!(calls.get(), 9);
    }

    #[test]
    fn mse_pit_cases() {
        let x = |seed| FeatureMap::from_frames(Init::new(seed).uniform::<f64>(&[6, 4], 1.0)).unwrap();
        let refs = vec![x(1), x(2)];
        assert!(mse_pit_loss(&refs, &refs).unwrap().loss < 1e-15);
        let zeros = vec![FeatureMap::zeros(4, 6), FeatureMap::zeros(4, 6)];
        let energy: f64 = refs
            .iter()
            .map(|r| r.tensor().sq_norm() / 24.0)
            .sum::<f64>()
            / 2.0;
        assert!((mse_pit_loss(&zeros, &refs).unwrap().loss - energy).abs() < 1e-12);
        let swapped = vec![refs[1].clone(), refs[0].clone()];
        let r = mse_pit_loss(&swapped, &refs).unwrap();
        assert_eq!(r.best_perm, vec![1, 0]);
        assert!(r.loss < 1e-15);
    }

    #[test]
    fn graph_pit_picks_same_assignment_and_differentiates() {
        let refs: Vec<Vec<f64>> = (0..3).map(|i| randv(40, i + 10)).collect();
        let ests: Vec<Vec<f64>> = vec![
            refs[2].iter().zip(randv(40, 1)).map(|(a, b)| a + 0.3 * b).collect(),
            refs[0].iter().zip(randv(40, 2)).map(|(a, b)| a + 0.3 * b).collect(),
            refs[1].iter().zip(randv(40, 3)).map(|(a, b)| a + 0.3 * b).collect(),
        ];
        let plain = pit_loss(&ests, &refs, neg_si_snr).unwrap();
        let g = Graph::<f64>::new();
        let vars: Vec<Var> = ests.iter().map(|e| g.param(Tensor::new(&[40], e.clone()).unwrap())).collect();
        let (node, res) = pit_si_snr_graph(&g, &vars, &refs).unwrap();
        assert_eq!(res.best_perm, vec![1, 2, 0]);
        assert_eq!(res.best_perm, plain.best_perm);
        assert!((g.scalar(node) - plain.loss).abs() < 1e-12);
        let grads = g.backward(node);
        assert!(vars.iter().all(|&v| grads.get(v).is_some()));
    }

    proptest! {
        #[test]
        fn si_snr_is_scale_invariant(seed in 0u64..10_000, alpha in 0.1f64..10.0) {
            let r = randv(128, seed);
            let e: Vec<f64> = r.iter().zip(randv(128, seed + 1)).map(|(a, b)| a + 0.5 * b).collect();
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            prop_assert!((si_snr(&scaled, &r).unwrap() - si_snr(&e, &r).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn pit_matches_oracle_and_is_permutation_invariant(seed in 0u64..10_000, c in 2usize..4) {
            let refs: Vec<Vec<f64>> = (0..c).map(|i| randv(64, seed * 7 + i as u64)).collect();
            let ests: Vec<Vec<f64>> = (0..c).map(|i| randv(64, seed * 7 + 100 + i as u64)).collect();
            let res = pit_loss(&ests, &refs, neg_si_snr).unwrap();
            let (oracle_loss, oracle_perm) = brute_force(&ests, &refs);
            prop_assert!((res.loss - oracle_loss).abs() < 1e-12);
            prop_assert_eq!(&res.best_perm, &oracle_perm);

            let identity: f64 = (0..c).map(|i| res.per_pair[i][i]).sum::<f64>() / c as f64;
            prop_assert!(res.loss <= identity + 1e-12);

            // Shuffle the estimates with a fixed rotation: value stays, and
            // the chosen estimate indices rotate with it.
            let rotated: Vec<Vec<f64>> = (0..c).map(|i| ests[(i + 1) % c].clone()).collect();
            let rot = pit_loss(&rotated, &refs, neg_si_snr).unwrap();
            prop_assert!((rot.loss - res.loss).abs() < 1e-12);
            for r in 0..c {
                prop_assert_eq!((rot.best_perm[r] + 1) % c, res.best_perm[r]);
            }
        }
    }
}
