//! Multi-key generation, detection, and threshold calibration.
//!
//! Generation samples one ensemble member uniformly per response. Detection
//! runs every member's single-key test, thresholds each z-score at a shared
//! tau, and classifies by indicator count: none fired means unwatermarked,
//! exactly one means genuine, two or more means forged. The gap between the
//! two highest z-scores is kept as a confidence score.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::hash::stream_seed;
use crate::lm::{random_prompt, GenParams, LmSpec, TokenSequence};
use crate::scheme::{detect, embed, SchemeConfig, WatermarkKey};
use crate::theory::normal_quantile;

/// An ordered collection of pairwise-distinct secret keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KeySet {
    keys: Vec<WatermarkKey>,
}

impl KeySet {
    pub fn new(keys: Vec<WatermarkKey>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::invalid("key set must hold at least one key"));
        }
        let mut seen = std::collections::HashSet::new();
        for k in &keys {
            if !seen.insert(k.0) {
                return Err(Error::invalid("key set holds duplicate keys"));
            }
        }
        Ok(Self { keys })
    }

    /// Draws `r` distinct keys from the random stream.
    pub fn generate(r: usize, rng: &mut impl Rng) -> Result<Self> {
        if r < 1 {
            return Err(Error::invalid("key count must be at least 1"));
        }
        let mut seen = std::collections::HashSet::new();
        let mut keys = Vec::with_capacity(r);
        while keys.len() < r {
            let k: u64 = rng.gen();
            if seen.insert(k) {
                keys.push(WatermarkKey(k));
            }
        }
        Ok(Self { keys })
    }

    pub fn keys(&self) -> &[WatermarkKey] {
        &self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

/// One detector in the ensemble: a scheme configuration bound to a key.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub scheme: SchemeConfig,
    pub key: WatermarkKey,
}

/// The deployed bank of watermarks. Plain multi-key uses one scheme for all
/// members; the mixed defense varies the scheme per member.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    members: Vec<EnsembleMember>,
}

impl Ensemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::invalid("ensemble must hold at least one member"));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &members {
            if !seen.insert(m.key.0) {
                return Err(Error::invalid("ensemble members must use distinct keys"));
            }
        }
        Ok(Self { members })
    }

    /// Every key under one shared scheme.
    pub fn uniform(scheme: SchemeConfig, keys: &KeySet) -> Self {
        Self {
            members: keys
                .keys()
                .iter()
                .map(|&key| EnsembleMember { scheme, key })
                .collect(),
        }
    }

    /// Keys cycled over the given scheme list (the mixed defense).
    pub fn mixed(schemes: &[SchemeConfig], keys: &KeySet) -> Result<Self> {
        if schemes.is_empty() {
            return Err(Error::invalid("mixed ensemble needs at least one scheme"));
        }
        Self::new(
            keys.keys()
                .iter()
                .enumerate()
                .map(|(i, &key)| EnsembleMember {
                    scheme: schemes[i % schemes.len()],
                    key,
                })
                .collect(),
        )
    }

    pub fn members(&self) -> &[EnsembleMember] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Largest context window among members; texts need at least this much
    /// scorable material for every detector to run.
    pub fn max_context_window(&self) -> usize {
        self.members.iter().map(|m| m.scheme.h).max().unwrap_or(0)
    }
}

/// Secret key file: keys plus the scheme they are deployed with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeyFile {
    pub keys: Vec<WatermarkKey>,
    pub scheme: SchemeConfig,
}

impl KeyFile {
    pub fn ensemble(&self) -> Result<Ensemble> {
        let keys = KeySet::new(self.keys.clone())?;
        Ok(Ensemble::uniform(self.scheme, &keys))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// How a threshold was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    Analytic,
    Empirical,
}

/// Per-key detection threshold under a family-wise false-positive budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// Family-wise false-positive budget across all keys.
    pub alpha_fw: f64,
    pub r: usize,
    /// Per-key false-positive rate after the Sidak correction.
    pub alpha: f64,
    /// Shared per-key threshold on z.
    pub tau: f64,
    /// Measured per-key true-positive rate, when available.
    pub beta: Option<f64>,
    pub source: CalibrationSource,
}

impl Calibration {
    pub fn with_measured_beta(mut self, beta: f64) -> Self {
        self.beta = Some(beta);
        self
    }

    /// Family-wise false-positive rate implied by a measured per-key rate.
    pub fn family_fpr(&self, measured_alpha: f64) -> Result<f64> {
        family_fpr(measured_alpha, self.r)
    }
}

/// Sidak correction: the per-key budget that keeps `r` independent tests
/// within a family-wise budget, `alpha = 1 - (1 - alpha_fw)^(1/r)`.
pub fn sidak_alpha(alpha_fw: f64, r: usize) -> Result<f64> {
    if !(alpha_fw > 0.0 && alpha_fw < 1.0) {
        return Err(Error::invalid(format!(
            "alpha_fw must be in (0,1), got {alpha_fw}"
        )));
    }
    if r < 1 {
        return Err(Error::invalid("sidak correction requires r >= 1"));
    }
    Ok(1.0 - (1.0 - alpha_fw).powf(1.0 / r as f64))
}

/// Family-wise false-positive rate of `r` independent per-key tests:
/// `1 - (1 - alpha)^r`.
pub fn family_fpr(alpha: f64, r: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "per-key alpha must be in [0,1), got {alpha}"
        )));
    }
    if r < 1 {
        return Err(Error::invalid("family_fpr requires r >= 1"));
    }
    Ok(1.0 - (1.0 - alpha).powi(r as i32))
}

/// Threshold from the standard-normal null approximation:
/// `tau = Phi^-1(1 - sidak_alpha)`.
pub fn calibrate_analytic(alpha_fw: f64, r: usize) -> Result<Calibration> {
    let alpha = sidak_alpha(alpha_fw, r)?;
    Ok(Calibration {
        alpha_fw,
        r,
        alpha,
        tau: normal_quantile(1.0 - alpha)?,
        beta: None,
        source: CalibrationSource::Analytic,
    })
}

/// Empirical `1 - alpha` quantile of a pooled null-score sample, with linear
/// interpolation between order statistics (inclusive method).
pub fn tau_from_null_scores(scores: &[f64], alpha: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::invalid("empirical quantile needs at least one score"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must be in (0,1), got {alpha}")));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = 1.0 - alpha;
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Pooled per-member z-scores of a null (unwatermarked) corpus.
pub fn null_zscores(ensemble: &Ensemble, texts: &[TokenSequence]) -> Result<Vec<f64>> {
    let mut pool = Vec::with_capacity(texts.len() * ensemble.len());
    for text in texts {
        for (idx, member) in ensemble.members().iter().enumerate() {
            let z = detect(member.key, &member.scheme, text)
                .map_err(|e| Error::for_member(idx, e))?;
            pool.push(z.value);
        }
    }
    Ok(pool)
}

/// Calibration from an existing null corpus: tau is the empirical
/// `1 - alpha` quantile of the pooled per-member null z-scores.
pub fn calibrate_from_null_texts(
    ensemble: &Ensemble,
    alpha_fw: f64,
    texts: &[TokenSequence],
) -> Result<Calibration> {
    let alpha = sidak_alpha(alpha_fw, ensemble.len())?;
    let pool = null_zscores(ensemble, texts)?;
    Ok(Calibration {
        alpha_fw,
        r: ensemble.len(),
        alpha,
        tau: tau_from_null_scores(&pool, alpha)?,
        beta: None,
        source: CalibrationSource::Empirical,
    })
}

/// Empirical calibration: generates `n_null` unwatermarked texts from the
/// model and sets tau from their pooled z-scores. Callers should prefer
/// `n_null >= 1000`; below that the tail quantile is noisy.
pub fn calibrate_empirical(
    ensemble: &Ensemble,
    spec: &LmSpec,
    alpha_fw: f64,
    n_null: usize,
    params: &GenParams,
    seed: u64,
) -> Result<Calibration> {
    if n_null < 1 {
        return Err(Error::invalid("empirical calibration needs n_null >= 1"));
    }
    let texts = sample_null_corpus(spec, n_null, params, seed)?;
    calibrate_from_null_texts(ensemble, alpha_fw, &texts)
}

/// Unwatermarked corpus with one independent random stream per text.
pub fn sample_null_corpus(
    spec: &LmSpec,
    n: usize,
    params: &GenParams,
    seed: u64,
) -> Result<Vec<TokenSequence>> {
    let vocab = spec.vocab();
    exec::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64));
        let prompt = random_prompt(vocab, params.prompt_len, &mut rng);
        spec.sample_sequence(&prompt, params.length, params.temperature, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Ternary multi-key decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Unwatermarked,
    /// Exactly one member fired; its index identifies the key.
    Genuine(usize),
    Forged,
}

impl Decision {
    pub fn is_genuine(&self) -> bool {
        matches!(self, Decision::Genuine(_))
    }
}

/// Outcome of a multi-key detection sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "ReportWire", try_from = "ReportWire")]
pub struct DetectionReport {
    /// Per-member z-scores in ensemble order.
    pub z: Vec<f64>,
    /// `z[i] > tau` per member.
    pub indicators: Vec<bool>,
    /// Highest minus second-highest z; only defined for two or more members.
    pub gap: Option<f64>,
    pub decision: Decision,
    pub tau: f64,
}

#[derive(Serialize, Deserialize)]
struct ReportWire {
    z: Vec<f64>,
    indicators: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gap: Option<f64>,
    decision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    member: Option<usize>,
    tau: f64,
}

impl From<DetectionReport> for ReportWire {
    fn from(r: DetectionReport) -> Self {
        let (decision, member) = match r.decision {
            Decision::Unwatermarked => ("Unwatermarked".to_string(), None),
            Decision::Genuine(i) => ("Genuine".to_string(), Some(i)),
            Decision::Forged => ("Forged".to_string(), None),
        };
        ReportWire {
            z: r.z,
            indicators: r.indicators,
            gap: r.gap,
            decision,
            member,
            tau: r.tau,
        }
    }
}

impl TryFrom<ReportWire> for DetectionReport {
    type Error = Error;
    fn try_from(w: ReportWire) -> Result<Self> {
        let decision = match (w.decision.as_str(), w.member) {
            ("Unwatermarked", None) => Decision::Unwatermarked,
            ("Genuine", Some(i)) => Decision::Genuine(i),
            ("Forged", None) => Decision::Forged,
            _ => {
                return Err(Error::invalid(format!(
                    "inconsistent decision '{}' / member {:?}",
                    w.decision, w.member
                )))
            }
        };
        Ok(DetectionReport {
            z: w.z,
            indicators: w.indicators,
            gap: w.gap,
            decision,
            tau: w.tau,
        })
    }
}

impl DetectionReport {
    /// Classifies a vector of per-member z-scores at threshold `tau`.
    pub fn from_scores(z: Vec<f64>, tau: f64) -> Self {
        let indicators: Vec<bool> = z.iter().map(|&v| v > tau).collect();
        let fired = indicators.iter().filter(|&&b| b).count();
        let decision = match fired {
            0 => Decision::Unwatermarked,
            1 => Decision::Genuine(indicators.iter().position(|&b| b).unwrap()),
            _ => Decision::Forged,
        };
        let gap = if z.len() >= 2 {
            let mut sorted = z.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            Some(sorted[0] - sorted[1])
        } else {
            None
        };
        DetectionReport {
            z,
            indicators,
            gap,
            decision,
            tau,
        }
    }
}

/// Algorithm-level generation: samples one member uniformly and embeds with
/// it. The chosen index is experiment bookkeeping; it must never reach
/// attacker code paths.
pub fn mk_generate(
    spec: &LmSpec,
    ensemble: &Ensemble,
    prompt: &TokenSequence,
    length: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<(TokenSequence, usize)> {
    let idx = rng.gen_range(0..ensemble.len());
    let member = &ensemble.members()[idx];
    let out = embed(spec, member.key, &member.scheme, prompt, length, temperature, rng)?;
    Ok((out.text, idx))
}

/// Algorithm-level detection: per-member z-scores, indicators at the
/// calibrated tau, gap score, and the ternary decision.
pub fn mk_detect(
    ensemble: &Ensemble,
    calib: &Calibration,
    text: &TokenSequence,
) -> Result<DetectionReport> {
    if calib.r != ensemble.len() {
        return Err(Error::Config(format!(
            "calibration is for r = {} but ensemble has {} members",
            calib.r,
            ensemble.len()
        )));
    }
    let mut z = Vec::with_capacity(ensemble.len());
    for (idx, member) in ensemble.members().iter().enumerate() {
        let score =
            detect(member.key, &member.scheme, text).map_err(|e| Error::for_member(idx, e))?;
        z.push(score.value);
    }
    Ok(DetectionReport::from_scores(z, calib.tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::Vocabulary;
    use crate::scheme::Variant;

    #[test]
    fn keyset_rejects_duplicates_and_empty() {
        assert!(KeySet::new(vec![]).is_err());
        assert!(KeySet::new(vec![WatermarkKey(1), WatermarkKey(1)]).is_err());
        assert!(KeySet::new(vec![WatermarkKey(1), WatermarkKey(2)]).is_ok());
    }

    #[test]
    fn generated_keys_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ks = KeySet::generate(64, &mut rng).unwrap();
        assert_eq!(ks.len(), 64);
    }

    #[test]
    fn sidak_examples() {
        assert!((sidak_alpha(0.01, 1).unwrap() - 0.01).abs() < 1e-15);
        let a4 = sidak_alpha(0.01, 4).unwrap();
        assert!((a4 - 0.0025094).abs() <= 1e-6, "sidak(0.01,4) = {a4}");
        assert!(sidak_alpha(0.0, 4).is_err());
        assert!(sidak_alpha(1.0, 4).is_err());
        assert!(sidak_alpha(0.01, 0).is_err());
    }

    #[test]
    fn sidak_series_limit() {
        // r * alpha -> -ln(1 - a) as r grows; at r = 1e4 the difference is
        // below 1e-5 for a = 0.01.
        let r = 10_000usize;
        let a = sidak_alpha(0.01, r).unwrap();
        assert!((r as f64 * a - 0.010_050_3).abs() <= 1e-5);
    }

    #[test]
    fn analytic_calibration_values() {
        let c1 = calibrate_analytic(0.01, 1).unwrap();
        assert!((c1.tau - 2.3263).abs() <= 1e-3);
        assert_eq!(c1.source, CalibrationSource::Analytic);
        // Quantile of 1 - sidak_alpha(0.01, 4) = 0.99749057, cross-checked
        // against mpmath: 2.8058.
        let c4 = calibrate_analytic(0.01, 4).unwrap();
        assert!((c4.tau - 2.805_82).abs() <= 2e-3, "tau = {}", c4.tau);
        assert!(calibrate_analytic(1.0, 4).is_err());
    }

    #[test]
    fn family_fpr_examples() {
        assert!((family_fpr(0.0025094300663189, 4).unwrap() - 0.01).abs() <= 1e-6);
        assert_eq!(family_fpr(0.0, 7).unwrap(), 0.0);
        assert!((family_fpr(0.01, 2).unwrap() - 0.0199).abs() <= 1e-12);
    }

    #[test]
    fn empirical_quantile_from_injected_standard_normal() {
        // Null-score test double: 10^4 draws mapped through the quantile.
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let scores: Vec<f64> = (0..10_000)
            .map(|_| normal_quantile(rng.gen_range(1e-12..1.0)).unwrap())
            .collect();
        let tau = tau_from_null_scores(&scores, 0.01).unwrap();
        assert!((tau - 2.326).abs() <= 0.1, "tau = {tau}");
    }

    #[test]
    fn empirical_quantile_of_constant_pool() {
        let tau = tau_from_null_scores(&[1.5; 64], 0.05).unwrap();
        assert_eq!(tau, 1.5);
    }

    #[test]
    fn report_examples_from_scores() {
        let r = DetectionReport::from_scores(vec![7.97, 0.89], 2.326);
        assert_eq!(r.decision, Decision::Genuine(0));
        assert!((r.gap.unwrap() - 7.08).abs() < 1e-9);
        assert_eq!(r.indicators, vec![true, false]);

        let r = DetectionReport::from_scores(vec![4.93, 3.59], 2.326);
        assert_eq!(r.decision, Decision::Forged);
        assert!((r.gap.unwrap() - 1.34).abs() < 1e-9);

        let r = DetectionReport::from_scores(vec![1.75, 1.25], 2.326);
        assert_eq!(r.decision, Decision::Unwatermarked);
    }

    #[test]
    fn duplicate_max_gives_zero_gap() {
        let r = DetectionReport::from_scores(vec![3.0, 3.0, 1.0], 2.0);
        assert_eq!(r.gap, Some(0.0));
        assert_eq!(r.decision, Decision::Forged);
    }

    #[test]
    fn single_member_report_has_no_gap_and_never_forges() {
        let r = DetectionReport::from_scores(vec![5.0], 2.326);
        assert_eq!(r.decision, Decision::Genuine(0));
        assert_eq!(r.gap, None);
        let r = DetectionReport::from_scores(vec![1.0], 2.326);
        assert_eq!(r.decision, Decision::Unwatermarked);
    }

    #[test]
    fn report_json_round_trip() {
        let r = DetectionReport::from_scores(vec![4.2, 0.1, 1.3], 2.8);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"decision\":\"Genuine\""));
        assert!(json.contains("\"member\":0"));
        let back: DetectionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn mk_generate_uniform_member_choice() {
        let vocab = Vocabulary::new(16).unwrap();
        let spec = LmSpec::hash_synthetic(vocab, 1.0, 1, 3).unwrap();
        let keys = KeySet::generate(4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Soft), &keys);
        let prompt = TokenSequence::prompt(vec![1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut counts = [0u32; 4];
        for _ in 0..10_000 {
            let (_, idx) = mk_generate(&spec, &ensemble, &prompt, 1, 1.0, &mut rng).unwrap();
            counts[idx] += 1;
        }
        for c in counts {
            assert!(
                (2300..=2700).contains(&c),
                "member count {c} outside 2500 +- 200"
            );
        }
    }

    #[test]
    fn single_member_ensemble_always_picks_zero() {
        let vocab = Vocabulary::new(16).unwrap();
        let spec = LmSpec::hash_synthetic(vocab, 1.0, 1, 3).unwrap();
        let keys = KeySet::new(vec![WatermarkKey(9)]).unwrap();
        let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Unigram), &keys);
        let prompt = TokenSequence::prompt(vec![1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (_, idx) = mk_generate(&spec, &ensemble, &prompt, 2, 1.0, &mut rng).unwrap();
            assert_eq!(idx, 0);
        }
    }

    #[test]
    fn mk_detect_validates_calibration_arity() {
        let keys = KeySet::generate(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Soft), &keys);
        let calib = calibrate_analytic(0.01, 2).unwrap();
        let text = TokenSequence::new(vec![1, 2, 3, 4], 0).unwrap();
        assert!(matches!(
            mk_detect(&ensemble, &calib, &text),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mk_detect_names_failing_member() {
        let keys = KeySet::generate(2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::SelfHash), &keys);
        let calib = calibrate_analytic(0.01, 2).unwrap();
        // Too short for h = 3: every member fails, the error names member 0.
        let text = TokenSequence::new(vec![1, 2], 0).unwrap();
        match mk_detect(&ensemble, &calib, &text) {
            Err(Error::Member { member: 0, .. }) => {}
            other => panic!("expected member error, got {other:?}"),
        }
    }

    #[test]
    fn ensemble_construction_rules() {
        let keys = KeySet::generate(4, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let schemes: Vec<SchemeConfig> =
            Variant::ALL.iter().map(|&v| SchemeConfig::default_for(v)).collect();
        let mixed = Ensemble::mixed(&schemes, &keys).unwrap();
        assert_eq!(mixed.len(), 4);
        assert_eq!(mixed.max_context_window(), 3);
        assert!(Ensemble::new(vec![]).is_err());
        assert!(Ensemble::mixed(&[], &keys).is_err());
    }
}
