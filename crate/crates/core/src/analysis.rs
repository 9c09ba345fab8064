//! Closed-form magnitude/recognition-rate theory and its Monte-Carlo
//! Perceptron oracle.
//!
//! For a trigger of magnitude `m` with `M` perturbed cells on images whose
//! pixels are i.i.d. uniform on [0, 255], a linear detector with weights
//! equal to the trigger and bias `-m^2 M / 2` recognizes poisoned inputs
//! with probability `1 - Q((m/2) sqrt(M/C))`, where `C` is the second raw
//! moment of the pixel distribution and `Q` the standard normal upper tail.
//! Inverting the relation gives the minimum per-pixel magnitude for a target
//! recognition rate; repetition and mirroring divide the requirement by
//! `sqrt(s * R_H * R_V)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

use crate::trigger::{compute_layout, TriggerError, TriggerSpec};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("probability {0} outside (0, 1)")]
    BadProbability(f64),
    #[error("target rate {0} outside (0.5, 1)")]
    BadEta(f64),
    #[error("need at least 1000 trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Trigger(#[from] TriggerError),
}

/// Second raw moment `E[x]^2 + Var[x]` of pixels uniform on [0, 255]:
/// (255/2)^2 + 255^2/12 = 21675.
pub const CAPACITY_UNIFORM_255: f64 = 21675.0;

/// `E[x]^2 + Var[x]` from explicit moments. The uniform-[0,255] default is
/// [`CAPACITY_UNIFORM_255`]; other distributions plug in here.
pub fn capacity_constant(mean: f64, variance: f64) -> f64 {
    mean * mean + variance
}

/// Capacity constant for pixels uniform on [lo, hi].
pub fn capacity_uniform(lo: f64, hi: f64) -> f64 {
    let mean = (lo + hi) / 2.0;
    let var = (hi - lo) * (hi - lo) / 12.0;
    capacity_constant(mean, var)
}

/// Standard normal upper-tail probability.
pub fn q_function(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

/// Inverse of [`q_function`] by bisection; `|Q(q_inverse(p)) - p| <= 1e-10`.
pub fn q_inverse(p: f64) -> Result<f64, AnalysisError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(AnalysisError::BadProbability(p));
    }
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    // Q is decreasing: Q(lo) ~ 1, Q(hi) ~ 0
    while hi - lo > 1e-13 {
        let mid = 0.5 * (lo + hi);
        if q_function(mid) > p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Recognition rate of the constructed detector: `1 - Q((m/2) sqrt(M/C))`.
pub fn predict_asr(m: f64, m_effective: usize, capacity: f64) -> f64 {
    1.0 - q_function(m / 2.0 * (m_effective as f64 / capacity).sqrt())
}

/// Inputs for the magnitude lower bound.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundQuery {
    /// Target recognition rate, in (0.5, 1).
    pub eta: f64,
    /// Total perturbed cells.
    pub m_effective: usize,
    pub reps_h: usize,
    pub reps_v: usize,
    /// Mirror multiplicity: 1, 2, or 4.
    pub symmetry_factor: usize,
    pub capacity: f64,
}

/// Minimum per-pixel magnitude for the queried rate:
/// `m = 2 z_eta / sqrt(s R_H R_V) * sqrt(C / M)` with `z_eta = Q^{-1}(1 - eta)`
/// (the standard normal quantile of eta, which is positive for eta > 0.5).
pub fn magnitude_bound(query: &BoundQuery) -> Result<f64, AnalysisError> {
    if !(query.eta > 0.5 && query.eta < 1.0) {
        return Err(AnalysisError::BadEta(query.eta));
    }
    let z = q_inverse(1.0 - query.eta)?;
    let group = (query.symmetry_factor * query.reps_h * query.reps_v) as f64;
    Ok(2.0 * z / group.sqrt() * (query.capacity / query.m_effective as f64).sqrt())
}

/// Monte-Carlo check of the closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    /// Fraction of poisoned inputs the detector scored positive.
    pub empirical_asr: f64,
    /// Fraction of clean inputs the detector scored negative.
    pub clean_rejection: f64,
    pub predicted_asr: f64,
    pub trials: usize,
    pub with_truncation: bool,
}

/// One oracle trial: detector scores for the clean and poisoned versions of
/// a fresh uniform image under a fresh trigger realization. Equivalent to
/// realizing the trigger tensor and scoring with the constructed detector,
/// but fused over the perturbed region (the margin contributes nothing).
pub(crate) fn oracle_trial_scores(
    spec: &TriggerSpec,
    layout: &crate::trigger::Layout,
    trigger_seed: &[u8; 32],
    pixel_seed: u64,
    with_truncation: bool,
) -> (f64, f64) {
    let m = spec.magnitude_m;
    let bias = -m * m * layout.m_effective as f64 / 2.0;
    let m_round = (m + 0.5).floor(); // half-away-from-zero for positive m

    let h_mirror = matches!(spec.symmetry, crate::trigger::Symmetry::Horizontal | crate::trigger::Symmetry::Both);
    let v_mirror = matches!(spec.symmetry, crate::trigger::Symmetry::Vertical | crate::trigger::Symmetry::Both);
    let block_w = spec.reps_h * layout.t_h;
    let block_h = spec.reps_v * layout.t_v;

    let signs = crate::trigger::base_signs(trigger_seed, layout.base_count);
    let mut pixel_rng = ChaCha20Rng::seed_from_u64(pixel_seed);

    let mut dot_clean = 0.0f64;
    let mut dot_poisoned = 0.0f64;
    for ch in 0..spec.channels {
        for ry in 0..layout.region_h {
            let by = if v_mirror && ry >= block_h { layout.region_h - 1 - ry } else { ry };
            let base_row = by / spec.reps_v;
            for rx in 0..layout.region_w {
                let bx = if h_mirror && rx >= block_w { layout.region_w - 1 - rx } else { rx };
                let base_col = bx / spec.reps_h;
                let sign = signs[(ch * layout.t_v + base_row) * layout.t_h + base_col] as f64;
                let weight = sign * m;
                let x = pixel_rng.gen::<u8>() as f64;
                dot_clean += x * weight;
                let poisoned = if with_truncation {
                    (x + sign * m_round).clamp(0.0, 255.0)
                } else {
                    x + sign * m
                };
                dot_poisoned += poisoned * weight;
            }
        }
    }
    (dot_clean + bias, dot_poisoned + bias)
}

/// Runs `trials` independent experiments. Each trial draws a fresh trigger
/// realization (the closed form averages over the sign pattern) and a fresh
/// image with i.i.d. uniform {0..255} pixels, then scores the poisoned and
/// clean versions with the matched linear detector. `with_truncation`
/// applies the 8-bit rounding and clamp the derivation ignores.
pub fn perceptron_oracle(
    spec: &TriggerSpec,
    trials: usize,
    with_truncation: bool,
    rng_seed: u64,
) -> Result<OracleReport, AnalysisError> {
    if trials < 1000 {
        return Err(AnalysisError::TooFewTrials(trials));
    }
    let layout = compute_layout(spec)?;
    let mut master = ChaCha20Rng::seed_from_u64(rng_seed);
    let mut hits_poisoned = 0usize;
    let mut hits_clean = 0usize;
    for _ in 0..trials {
        let mut trigger_seed = [0u8; 32];
        master.fill_bytes(&mut trigger_seed);
        let pixel_seed: u64 = master.gen();
        let (clean, poisoned) =
            oracle_trial_scores(spec, &layout, &trigger_seed, pixel_seed, with_truncation);
        if poisoned > 0.0 {
            hits_poisoned += 1;
        }
        if clean < 0.0 {
            hits_clean += 1;
        }
    }
    Ok(OracleReport {
        empirical_asr: hits_poisoned as f64 / trials as f64,
        clean_rejection: hits_clean as f64 / trials as f64,
        predicted_asr: predict_asr(spec.magnitude_m, layout.m_effective, CAPACITY_UNIFORM_255),
        trials,
        with_truncation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trigger::Symmetry;

    /// Spec with margin 0, no repetition or mirroring: the base block covers
    /// the whole image and `m_effective` equals `side^2`.
    pub(crate) fn plain_spec(side: usize, m: f64, seed_byte: u8) -> TriggerSpec {
        TriggerSpec {
            seed: [seed_byte; 32],
            magnitude_m: m,
            reps_h: 1,
            reps_v: 1,
            margin: 0,
            symmetry: Symmetry::None,
            channels: 1,
            image_h: side,
            image_w: side,
        }
    }

    /// Independent high-precision erfc oracle: Taylor series of erf for
    /// small |x|, continued fraction for large |x|.
    fn erfc_oracle(x: f64) -> f64 {
        if x < 0.0 {
            return 2.0 - erfc_oracle(-x);
        }
        if x < 3.0 {
            // erf(x) = 2/sqrt(pi) * sum_{n>=0} (-1)^n x^(2n+1) / (n! (2n+1))
            let mut term = x;
            let mut sum = x;
            let x2 = x * x;
            for n in 1..200 {
                term *= -x2 / n as f64;
                sum += term / (2 * n + 1) as f64;
                if term.abs() < 1e-18 {
                    break;
                }
            }
            1.0 - 2.0 / std::f64::consts::PI.sqrt() * sum
        } else {
            // erfc(x) = exp(-x^2)/(x sqrt(pi)) * 1/(1 + 1/(2x^2 + 2/(1 + 3/(2x^2 + ...))))
            let mut f = 0.0;
            for k in (1..=60).rev() {
                f = k as f64 / 2.0 / (x + f);
            }
            (-x * x).exp() / ((x + f) * std::f64::consts::PI.sqrt())
        }
    }

    fn q_oracle(x: f64) -> f64 {
        0.5 * erfc_oracle(x / std::f64::consts::SQRT_2)
    }

    #[test]
    fn q_matches_independent_series() {
        for x in [-5.0, -2.3, -0.7, 0.0, 0.4347, 1.0, 2.3263, 3.0902, 5.5] {
            let got = q_function(x);
            let want = q_oracle(x);
            // statrs's erfc is a minimax approximation, good to ~1e-10
            assert!((got - want).abs() <= 1e-8 * want.max(1e-6), "x={x}: {got} vs {want}");
        }
    }

    #[test]
    fn q_at_zero_and_reflection() {
        assert_eq!(q_function(0.0), 0.5);
        for x in [0.1, 0.9, 1.7, 3.3] {
            assert!((q_function(-x) - (1.0 - q_function(x))).abs() < 1e-14);
        }
    }

    #[test]
    fn q_inverse_known_quantile() {
        let z = q_inverse(0.001).unwrap();
        assert!((z - 3.0902).abs() < 1e-4, "{z}");
        assert!(q_inverse(0.0).is_err());
        assert!(q_inverse(1.0).is_err());
    }

    #[test]
    fn q_inverse_round_trip() {
        for x in [-6.0, -3.1, -0.5, 0.0, 0.8, 2.9, 6.0] {
            let back = q_inverse(q_function(x)).unwrap();
            assert!((back - x).abs() < 1e-8, "x={x} back={back}");
        }
    }

    #[test]
    fn capacity_values() {
        assert_eq!(capacity_uniform(0.0, 255.0), CAPACITY_UNIFORM_255);
        assert_eq!(capacity_constant(0.0, 0.0), 0.0);
        assert!((capacity_uniform(0.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn capacity_matches_monte_carlo_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 1_000_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..n {
            let x = rng.gen::<f64>() * 255.0;
            sum += x;
            sum_sq += x * x;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let mc = capacity_constant(mean, var);
        assert!((mc - CAPACITY_UNIFORM_255).abs() / CAPACITY_UNIFORM_255 < 0.005);
    }

    #[test]
    fn predict_asr_reference_points() {
        assert_eq!(predict_asr(0.0, 1024, CAPACITY_UNIFORM_255), 0.5);
        let p = predict_asr(4.0, 1024, CAPACITY_UNIFORM_255);
        assert!((p - 0.668).abs() < 1e-3, "{p}");
        assert!(predict_asr(200.0, 1024, CAPACITY_UNIFORM_255) > 0.999_999);
        // monotone in m
        let mut last = 0.0;
        for m in 1..40 {
            let v = predict_asr(m as f64, 1024, CAPACITY_UNIFORM_255);
            assert!(v > last);
            last = v;
        }
    }

    fn base_query() -> BoundQuery {
        BoundQuery {
            eta: 0.99,
            m_effective: 784,
            reps_h: 1,
            reps_v: 1,
            symmetry_factor: 1,
            capacity: CAPACITY_UNIFORM_255,
        }
    }

    #[test]
    fn bound_reference_values() {
        let m = magnitude_bound(&base_query()).unwrap();
        assert!((m - 24.46).abs() < 0.01, "{m}");

        let grouped = BoundQuery {
            reps_h: 4,
            reps_v: 4,
            symmetry_factor: 2,
            ..base_query()
        };
        let mg = magnitude_bound(&grouped).unwrap();
        assert!((mg - 24.46 / 32f64.sqrt()).abs() < 0.01, "{mg}");
    }

    #[test]
    fn bound_limits_and_monotonicity() {
        let near_half = BoundQuery { eta: 0.500001, ..base_query() };
        assert!(magnitude_bound(&near_half).unwrap() < 0.01);
        assert!(magnitude_bound(&BoundQuery { eta: 0.5, ..base_query() }).is_err());

        // increasing in eta, decreasing in M and in the group size
        let etas = [0.6, 0.75, 0.9, 0.99, 0.999];
        let bounds: Vec<f64> = etas
            .iter()
            .map(|&eta| magnitude_bound(&BoundQuery { eta, ..base_query() }).unwrap())
            .collect();
        assert!(bounds.windows(2).all(|w| w[0] < w[1]));

        let ms = [64, 256, 1024, 4096];
        let by_m: Vec<f64> = ms
            .iter()
            .map(|&m_eff| magnitude_bound(&BoundQuery { m_effective: m_eff, ..base_query() }).unwrap())
            .collect();
        assert!(by_m.windows(2).all(|w| w[0] > w[1]));

        let groups = [(1, 1, 1), (2, 2, 1), (4, 4, 2), (4, 4, 4)];
        let by_g: Vec<f64> = groups
            .iter()
            .map(|&(rh, rv, s)| {
                magnitude_bound(&BoundQuery {
                    reps_h: rh,
                    reps_v: rv,
                    symmetry_factor: s,
                    ..base_query()
                })
                .unwrap()
            })
            .collect();
        assert!(by_g.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn bound_and_prediction_invert() {
        for eta in [0.9, 0.99, 0.999] {
            let q = BoundQuery { eta, ..base_query() };
            let m = magnitude_bound(&q).unwrap();
            let back = predict_asr(m, q.m_effective, q.capacity);
            assert!((back - eta).abs() < 1e-6, "eta={eta} back={back}");
        }
    }

    #[test]
    fn oracle_saturates_at_large_magnitude() {
        let spec = plain_spec(16, 200.0, 1);
        let rep = perceptron_oracle(&spec, 2000, false, 7).unwrap();
        assert!(rep.empirical_asr > 0.999, "{}", rep.empirical_asr);
    }

    #[test]
    fn oracle_matches_prediction_m4_m1024() {
        let spec = plain_spec(32, 4.0, 1);
        let rep = perceptron_oracle(&spec, 20_000, false, 11).unwrap();
        assert!((rep.empirical_asr - 0.668).abs() < 0.02, "{}", rep.empirical_asr);
        // both sides of the closed form agree
        assert!((rep.clean_rejection - rep.empirical_asr).abs() < 0.02);
    }

    #[test]
    fn oracle_rejects_tiny_trials() {
        assert!(matches!(
            perceptron_oracle(&plain_spec(8, 4.0, 1), 10, false, 0),
            Err(AnalysisError::TooFewTrials(10))
        ));
    }

    /// The fused oracle trial must score exactly like realizing the trigger
    /// tensor and running the constructed detector on the full image.
    #[test]
    fn oracle_trial_matches_detector_construction() {
        use crate::nn::PerceptronDetector;
        use crate::trigger::generate_trigger;

        let spec = TriggerSpec {
            seed: [0; 32],
            magnitude_m: 6.0,
            reps_h: 2,
            reps_v: 2,
            margin: 2,
            symmetry: Symmetry::Horizontal,
            channels: 1,
            image_h: 16,
            image_w: 16,
        };
        let layout = compute_layout(&spec).unwrap();

        for trial in 0..20u64 {
            let mut trigger_seed = [0u8; 32];
            trigger_seed[..8].copy_from_slice(&trial.to_le_bytes());
            let pixel_seed = trial.wrapping_mul(977) + 13;

            let (fused_clean, fused_poisoned) =
                oracle_trial_scores(&spec, &layout, &trigger_seed, pixel_seed, true);

            // reference path: realized tensor + detector on a full image whose
            // region pixels come from the same stream (margins are arbitrary
            // since the detector weights there are zero)
            let trial_spec = TriggerSpec { seed: trigger_seed, ..spec.clone() };
            let tensor = generate_trigger(&trial_spec).unwrap();
            let detector = PerceptronDetector::from_trigger(&tensor);

            let mut pixel_rng = ChaCha20Rng::seed_from_u64(pixel_seed);
            let mut image = crate::data::ImageTensor::zeros(16, 16, 1);
            for ry in 0..layout.region_h {
                for rx in 0..layout.region_w {
                    image.set(layout.y0 + ry, layout.x0 + rx, 0, pixel_rng.gen::<u8>());
                }
            }
            let clean_score = detector.score_u8(&image.pixels);
            let poisoned = crate::poison::poison_image(&image, &tensor).unwrap();
            let poisoned_score = detector.score_u8(&poisoned.pixels);

            assert!((fused_clean - clean_score).abs() < 1e-6, "trial {trial}");
            assert!((fused_poisoned - poisoned_score).abs() < 1e-6, "trial {trial}");
        }
    }

    #[test]
    fn oracle_is_deterministic() {
        let spec = plain_spec(16, 4.0, 1);
        let a = perceptron_oracle(&spec, 2000, true, 5).unwrap();
        let b = perceptron_oracle(&spec, 2000, true, 5).unwrap();
        assert_eq!(a.empirical_asr, b.empirical_asr);
        assert_eq!(a.clean_rejection, b.clean_rejection);
    }
}
