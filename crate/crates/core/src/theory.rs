//! Closed-form detection theory and the normal-distribution primitives it
//! needs.
//!
//! The normal CDF and quantile are implemented locally (Cody's rational
//! Chebyshev erfc and Acklam's rational inverse with a Newton polish) so the
//! crate carries no external math dependency and golden values are portable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::hash::{mix64, unit_open};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF. Absolute error below 1e-15 on [-8, 8].
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Complementary error function, Cody's rational Chebyshev approximation.
fn erfc(x: f64) -> f64 {
    const A: [f64; 5] = [
        3.161_123_743_870_565_6e0,
        1.138_641_541_510_501_56e2,
        3.774_852_376_853_020_2e2,
        3.209_377_589_138_469_4e3,
        1.857_777_061_846_031_5e-1,
    ];
    const B: [f64; 4] = [
        2.360_129_095_234_412_1e1,
        2.440_246_379_344_441_7e2,
        1.282_616_526_077_372_3e3,
        2.844_236_833_439_170_6e3,
    ];
    const C: [f64; 9] = [
        5.641_884_969_886_700_9e-1,
        8.883_149_794_388_376e0,
        6.611_919_063_714_163e1,
        2.986_351_381_974_001_3e2,
        8.819_522_212_417_691e2,
        1.712_047_612_634_070_6e3,
        2.051_078_377_826_071_5e3,
        1.230_339_354_797_997_2e3,
        2.153_115_354_744_038_5e-8,
    ];
    const D: [f64; 8] = [
        1.574_492_611_070_983_5e1,
        1.176_939_508_913_125e2,
        5.371_811_018_620_098_6e2,
        1.621_389_574_566_690_2e3,
        3.290_799_235_733_459_7e3,
        4.362_619_090_143_247e3,
        3.439_367_674_143_721_6e3,
        1.230_339_354_803_749_4e3,
    ];
    const P: [f64; 6] = [
        3.053_266_349_612_323_4e-1,
        3.603_448_999_498_044_4e-1,
        1.257_817_261_112_292_5e-1,
        1.608_378_514_874_227_7e-2,
        6.587_491_615_298_378e-4,
        1.631_538_713_730_209_8e-2,
    ];
    const Q: [f64; 5] = [
        2.568_520_192_289_822_4e0,
        1.872_952_849_923_460_5e0,
        5.279_051_029_514_284e-1,
        6.051_834_131_244_132e-2,
        2.335_204_976_268_691_8e-3,
    ];
    const INV_SQRT_PI: f64 = 5.641_895_835_477_562_9e-1;

    let y = x.abs();
    let result = if y <= 0.46875 {
        let z = if y > 6.569e-9 { y * y } else { 0.0 };
        let mut num = A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + A[i]) * z;
            den = (den + B[i]) * z;
        }
        let erf = x * (num + A[3]) / (den + B[3]);
        return 1.0 - erf;
    } else if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        let r = (num + C[7]) / (den + D[7]);
        scaled_exp(y) * r
    } else if y < 26.5 {
        let z = 1.0 / (y * y);
        let mut num = P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + P[i]) * z;
            den = (den + Q[i]) * z;
        }
        let r = z * (num + P[4]) / (den + Q[4]);
        scaled_exp(y) * (INV_SQRT_PI - r) / y
    } else {
        0.0
    };
    if x < 0.0 {
        2.0 - result
    } else {
        result
    }
}

/// exp(-y^2) evaluated as exp(-t^2)*exp(-(y-t)(y+t)) with t = y rounded to
/// 1/16, which keeps the argument of each exp small enough to avoid the
/// cancellation Cody's scheme guards against.
#[inline]
fn scaled_exp(y: f64) -> f64 {
    let t = (y * 16.0).trunc() / 16.0;
    let del = (y - t) * (y + t);
    (-t * t).exp() * (-del).exp()
}

/// Standard normal quantile, the functional inverse of [`normal_cdf`].
///
/// Rational initial guess refined by one Newton step; absolute error below
/// 1e-12 across (0, 1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }
    let x = rational_quantile(p);
    Ok(x - (normal_cdf(x) - p) / normal_pdf(x))
}

/// Acklam's rational approximation of the normal quantile (max absolute
/// error ~4e-9). Used directly in the synthetic-LM hot path where that
/// accuracy is already far beyond what logit generation needs.
#[inline]
pub(crate) fn rational_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239e0,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838e0,
        -2.549_732_539_343_734e0,
        4.374_664_141_464_968e0,
        2.938_163_982_698_783e0,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996e0,
        3.754_408_661_907_416e0,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Probability that a blind forgery triggers exactly one of `r` detectors
/// that each fire independently with probability `alpha`.
pub fn blind_success(r: usize, alpha: f64) -> Result<f64> {
    if r < 1 {
        return Err(Error::invalid("blind_success requires r >= 1"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!(
            "blind_success requires alpha in (0,1), got {alpha}"
        )));
    }
    Ok(r as f64 * alpha * (1.0 - alpha).powi(r as i32 - 1))
}

/// Upper bound of [`blind_success`] over alpha: `(1 - 1/r)^(r-1)`, attained
/// at `alpha = 1/r`. For `r = 1` the empty product gives 1.
pub fn blind_bound(r: usize) -> Result<f64> {
    if r < 1 {
        return Err(Error::invalid("blind_bound requires r >= 1"));
    }
    Ok((1.0 - 1.0 / r as f64).powi(r as i32 - 1))
}

/// Upper bound on the false negative rate of the exactly-one rule when the
/// r-1 unused detectors have standard normal scores: `1 - Phi(tau)^(r-1)`.
pub fn fnr_bound(tau: f64, r: usize) -> Result<f64> {
    if r < 1 {
        return Err(Error::invalid("fnr_bound requires r >= 1"));
    }
    Ok(1.0 - normal_cdf(tau).powi(r as i32 - 1))
}

/// Bernoulli idealization of a bank of per-key detectors: each fires with
/// probability `alpha` on content not watermarked with its key and with
/// probability `beta` on content that is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub r: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl DetectorModel {
    pub fn new(r: usize, alpha: f64, beta: f64) -> Result<Self> {
        if r < 1 {
            return Err(Error::invalid("detector model requires r >= 1"));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid("detector model requires alpha in (0,1)"));
        }
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::invalid("detector model requires beta in (0,1]"));
        }
        Ok(Self { r, alpha, beta })
    }
}

/// Which side of the game a simulated trial draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialCondition {
    /// No key is present; all indicators are Bernoulli(alpha).
    Null,
    /// Content watermarked with key `j`; indicator `j` is Bernoulli(beta).
    Watermarked(usize),
}

/// Empirical distribution of the indicator sum over simulated trials.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorSim {
    /// `histogram[k]` counts trials with exactly `k` indicators firing.
    pub histogram: Vec<u64>,
    pub trials: u64,
}

impl DetectorSim {
    /// Fraction of trials in which exactly one indicator fired.
    pub fn exactly_one_rate(&self) -> f64 {
        self.rate(1)
    }

    /// Fraction of trials with indicator sum `k`.
    pub fn rate(&self, k: usize) -> f64 {
        if self.trials == 0 {
            return 0.0;
        }
        self.histogram.get(k).copied().unwrap_or(0) as f64 / self.trials as f64
    }

    /// Fraction of trials with at least one indicator firing.
    pub fn any_rate(&self) -> f64 {
        1.0 - self.rate(0)
    }
}

/// Monte Carlo draw of the detector model under the given condition.
///
/// Trials are indexed deterministically from `seed`, so the result is a pure
/// function of the arguments regardless of worker count.
pub fn simulate_detector_model(
    model: &DetectorModel,
    condition: TrialCondition,
    trials: u64,
    seed: u64,
) -> Result<DetectorSim> {
    if let TrialCondition::Watermarked(j) = condition {
        if j >= model.r {
            return Err(Error::invalid(format!(
                "watermarked index {j} out of range for r = {}",
                model.r
            )));
        }
    }
    let r = model.r;
    let chunk = 8192u64;
    let n_chunks = trials.div_ceil(chunk).max(1);
    let partials = exec::map_indexed(n_chunks as usize, |c| {
        let lo = c as u64 * chunk;
        let hi = (lo + chunk).min(trials);
        let mut hist = vec![0u64; r + 1];
        for trial in lo..hi {
            let base = mix64(seed ^ mix64(trial.wrapping_add(1)));
            let mut fired = 0usize;
            for i in 0..r {
                let p = match condition {
                    TrialCondition::Watermarked(j) if j == i => model.beta,
                    _ => model.alpha,
                };
                if unit_open(mix64(base ^ (i as u64 + 1))) < p {
                    fired += 1;
                }
            }
            hist[fired] += 1;
        }
        hist
    });
    let mut histogram = vec![0u64; r + 1];
    for h in partials {
        for (acc, v) in histogram.iter_mut().zip(h) {
            *acc += v;
        }
    }
    Ok(DetectorSim { histogram, trials })
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values computed with mpmath at 30 significant digits.
    const CDF_GOLDEN: [(f64, f64); 17] = [
        (-8.0, 6.220_960_574_271_784_1e-16),
        (-6.0, 9.865_876_450_376_981_4e-10),
        (-5.0, 2.866_515_718_791_939_1e-7),
        (-4.0, 3.167_124_183_311_992_1e-5),
        (-3.0, 1.349_898_031_630_094_5e-3),
        (-2.326, 1.000_927_534_086_766_7e-2),
        (-2.0, 2.275_013_194_817_920_7e-2),
        (-1.0, 0.158_655_253_931_457_05),
        (-0.5, 0.308_537_538_725_986_9),
        (0.0, 0.5),
        (0.5, 0.691_462_461_274_013_1),
        (1.0, 0.841_344_746_068_542_95),
        (2.0, 0.977_249_868_051_820_79),
        (2.326, 0.989_990_724_659_132_33),
        (3.0, 0.998_650_101_968_369_91),
        (5.0, 0.999_999_713_348_428_12),
        (8.0, 0.999_999_999_999_999_38),
    ];

    #[test]
    fn cdf_matches_reference_within_1e_minus_9() {
        for &(x, phi) in &CDF_GOLDEN {
            let got = normal_cdf(x);
            assert!(
                (got - phi).abs() <= 1e-9,
                "Phi({x}) = {got}, reference {phi}"
            );
        }
    }

    #[test]
    fn cdf_is_symmetric_and_monotone() {
        let mut prev = 0.0;
        for i in -800..=800 {
            let x = i as f64 / 100.0;
            let v = normal_cdf(x);
            assert!(v >= prev);
            assert!((v + normal_cdf(-x) - 1.0).abs() < 1e-14);
            prev = v;
        }
    }

    #[test]
    fn quantile_golden_values() {
        // mpmath: sqrt(2) * erfinv(2p - 1)
        let cases = [
            (0.001, -3.090_232_306_167_813_5),
            (0.01, -2.326_347_874_040_841_1),
            (0.25, -0.674_489_750_196_081_74),
            (0.5, 0.0),
            (0.9, 1.281_551_565_544_600_5),
            (0.99, 2.326_347_874_040_841_1),
            (0.9974906, 2.805_824_621_603_176_3),
            (0.9999, 3.719_016_485_455_680_6),
        ];
        for (p, q) in cases {
            let got = normal_quantile(p).unwrap();
            assert!((got - q).abs() <= 1e-8, "quantile({p}) = {got}, want {q}");
        }
    }

    #[test]
    fn quantile_of_099_matches_tabled_tau() {
        let q = normal_quantile(0.99).unwrap();
        assert!((q - 2.3263).abs() <= 1e-3);
    }

    #[test]
    fn quantile_round_trip() {
        let mut x = 0x9e37u64;
        for _ in 0..1000 {
            x = mix64(x);
            let p = unit_open(x);
            let q = normal_quantile(p).unwrap();
            assert!((normal_cdf(q) - p).abs() <= 1e-6, "round trip failed at p={p}");
        }
    }

    #[test]
    fn quantile_rejects_out_of_domain() {
        assert!(normal_quantile(0.0).is_err());
        assert!(normal_quantile(1.0).is_err());
        assert!(normal_quantile(-0.5).is_err());
        assert!(normal_quantile(f64::NAN).is_err());
    }

    #[test]
    fn blind_success_direct_values() {
        assert!((blind_success(2, 0.5).unwrap() - 0.5).abs() < 1e-12);
        assert!((blind_success(4, 0.25).unwrap() - 0.421_875).abs() < 1e-12);
        assert!(blind_success(4, 1e-9).unwrap() < 1e-8);
        assert!(blind_success(0, 0.5).is_err());
        assert!(blind_success(4, 0.0).is_err());
    }

    #[test]
    fn blind_bound_values_and_limit() {
        assert!((blind_bound(1).unwrap() - 1.0).abs() < 1e-12);
        assert!((blind_bound(4).unwrap() - 0.421_875).abs() < 1e-12);
        let b1000 = blind_bound(1000).unwrap();
        assert!((b1000 - 0.368).abs() < 1e-3);
        assert!((b1000 - (-1.0f64).exp()).abs() < 1e-3);
    }

    #[test]
    fn blind_success_never_exceeds_bound() {
        for r in 2..=8 {
            let bound = blind_bound(r).unwrap();
            for i in 1..1000 {
                let alpha = i as f64 / 1000.0;
                let s = blind_success(r, alpha).unwrap();
                assert!(
                    s <= bound + 1e-12,
                    "blind_success({r},{alpha}) = {s} exceeds bound {bound}"
                );
            }
            // The bound is attained exactly at alpha = 1/r.
            let at_max = blind_success(r, 1.0 / r as f64).unwrap();
            assert!((at_max - bound).abs() <= 1e-12);
        }
    }

    #[test]
    fn fnr_bound_values() {
        assert_eq!(fnr_bound(5.0, 1).unwrap(), 0.0);
        assert_eq!(fnr_bound(-3.0, 1).unwrap(), 0.0);
        let v = fnr_bound(2.326, 5).unwrap();
        assert!((v - 0.039_44).abs() <= 5e-4, "fnr_bound(2.326,5) = {v}");
    }

    #[test]
    fn fnr_bound_monotone_in_r_and_tau() {
        for r in 1..6 {
            assert!(fnr_bound(2.0, r).unwrap() <= fnr_bound(2.0, r + 1).unwrap());
        }
        for i in 0..40 {
            let tau = i as f64 / 10.0;
            assert!(fnr_bound(tau, 4).unwrap() >= fnr_bound(tau + 0.1, 4).unwrap());
        }
    }

    #[test]
    fn simulated_null_histogram_matches_binomial_pmf() {
        let model = DetectorModel::new(4, 0.25, 1.0).unwrap();
        let sim = simulate_detector_model(&model, TrialCondition::Null, 100_000, 11).unwrap();
        // Closed-form Binomial(4, 0.25) pmf as the oracle.
        let pmf = |k: u32| {
            let choose = [1.0, 4.0, 6.0, 4.0, 1.0][k as usize];
            choose * 0.25f64.powi(k as i32) * 0.75f64.powi(4 - k as i32)
        };
        let tv: f64 = (0..=4)
            .map(|k| (sim.rate(k as usize) - pmf(k)).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv <= 0.01, "total variation {tv} too large");
    }

    #[test]
    fn simulated_exactly_one_tracks_closed_form_on_grid() {
        let trials = 20_000u64;
        for r in 2..=5 {
            for &alpha in &[0.1, 0.25, 0.5, 0.75] {
                let model = DetectorModel::new(r, alpha, 1.0).unwrap();
                let sim =
                    simulate_detector_model(&model, TrialCondition::Null, trials, 97).unwrap();
                let p = blind_success(r, alpha).unwrap();
                let band = 4.0 * (p * (1.0 - p) / trials as f64).sqrt();
                assert!(
                    (sim.exactly_one_rate() - p).abs() <= band,
                    "r={r} alpha={alpha}: {} vs {p}",
                    sim.exactly_one_rate()
                );
            }
        }
    }

    #[test]
    fn perfect_detector_always_wins() {
        let model = DetectorModel::new(4, 1e-9, 1.0).unwrap();
        let sim =
            simulate_detector_model(&model, TrialCondition::Watermarked(0), 10_000, 3).unwrap();
        assert!(sim.exactly_one_rate() > 0.999);
    }

    #[test]
    fn simulation_is_deterministic_and_chunk_independent() {
        let model = DetectorModel::new(3, 0.3, 0.9).unwrap();
        let a = simulate_detector_model(&model, TrialCondition::Null, 50_000, 5).unwrap();
        let b = simulate_detector_model(&model, TrialCondition::Null, 50_000, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn watermarked_index_validated() {
        let model = DetectorModel::new(2, 0.1, 0.9).unwrap();
        assert!(simulate_detector_model(&model, TrialCondition::Watermarked(2), 10, 1).is_err());
    }
}
