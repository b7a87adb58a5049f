//! Statistical invariants that need real Monte Carlo mass: null behavior of
//! the z statistic, cross-key independence, watermark strength, signal
//! stealing quality, and key-cluster separability.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mkwm_core::attack::{
    cluster_by_key, signal_membership_correlation, steal, ClusterFeature, DEFAULT_PSEUDO_COUNT,
};
use mkwm_core::hash::stream_seed;
use mkwm_core::lm::{random_prompt, GenParams, LmSpec, TokenSequence, Vocabulary};
use mkwm_core::multikey::{
    calibrate_analytic, calibrate_from_null_texts, mk_generate, sample_null_corpus, Ensemble,
    KeySet,
};
use mkwm_core::scheme::{detect, embed, is_green, SchemeConfig, Variant, WatermarkKey};

fn default_spec() -> LmSpec {
    LmSpec::hash_synthetic(Vocabulary::new(1024).unwrap(), 1.0, 2, 7).unwrap()
}

fn params() -> GenParams {
    GenParams {
        length: 256,
        prompt_len: 8,
        temperature: 1.0,
    }
}

/// 10^4 unwatermarked texts shared by the null-distribution tests.
fn shared_null_corpus() -> &'static [TokenSequence] {
    static CORPUS: OnceLock<Vec<TokenSequence>> = OnceLock::new();
    CORPUS.get_or_init(|| sample_null_corpus(&default_spec(), 10_000, &params(), 0x9e11).unwrap())
}

#[test]
fn null_z_rarely_exceeds_single_key_threshold() {
    // Unwatermarked text scored under a random key: the fraction with
    // z > 2.326 should sit near the nominal 1%.
    let cfg = SchemeConfig::default_for(Variant::Soft);
    let key = WatermarkKey(0xD15C);
    let mut fired = 0usize;
    let corpus = shared_null_corpus();
    for text in corpus {
        if detect(key, &cfg, text).unwrap().value > 2.326 {
            fired += 1;
        }
    }
    let frac = fired as f64 / corpus.len() as f64;
    assert!(
        (0.005..=0.02).contains(&frac),
        "null z > 2.326 fraction = {frac}"
    );
}

#[test]
fn empirical_and_analytic_tau_agree_for_context_windowed_null() {
    // Soft-variant null z-scores are close to standard normal, so the
    // empirical quantile lands near the analytic threshold.
    let keys = KeySet::generate(4, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Soft), &keys);
    let nulls = &shared_null_corpus()[..5000];
    let empirical = calibrate_from_null_texts(&ensemble, 0.01, nulls).unwrap();
    let analytic = calibrate_analytic(0.01, 4).unwrap();
    let diff = (empirical.tau - analytic.tau).abs();
    assert!(
        diff <= 0.15,
        "empirical tau {} vs analytic {} differ by {diff}",
        empirical.tau,
        analytic.tau
    );
}

#[test]
fn selfhash_wrong_key_scores_are_standard_normal() {
    let spec = default_spec();
    let p = params();
    let cfg = SchemeConfig::default_for(Variant::SelfHash);
    let generating = WatermarkKey(0x1111);
    let wrong = WatermarkKey(0x2222);
    let n = 1000usize;
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x5e1f, i as u64));
        let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
        let out = embed(&spec, generating, &cfg, &prompt, p.length, 1.0, &mut rng).unwrap();
        zs.push(detect(wrong, &cfg, &out.text).unwrap().value);
    }
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 0.1, "mean {mean}");
    assert!((0.8..=1.2).contains(&var), "variance {var}");
}

#[test]
fn unigram_wrong_key_variance_reflects_token_repetition() {
    // With a fixed green set and a 1024-token vocabulary, a 256-token
    // watermarked text repeats tokens, so wrong-key z-scores stay centered
    // over random key pairs but spread wider than standard normal. This is
    // the desk-scale effect the empirical calibration absorbs.
    let spec = default_spec();
    let p = params();
    let cfg = SchemeConfig::default_for(Variant::Unigram);
    let n = 1000usize;
    let mut zs = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x0411, i as u64));
        let generating = WatermarkKey(rng.gen());
        let wrong = WatermarkKey(rng.gen());
        let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
        let out = embed(&spec, generating, &cfg, &prompt, p.length, 1.0, &mut rng).unwrap();
        zs.push(detect(wrong, &cfg, &out.text).unwrap().value);
    }
    let mean = zs.iter().sum::<f64>() / n as f64;
    let var = zs.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 0.15, "mean {mean}");
    assert!(
        (1.0..=3.0).contains(&var),
        "expected repetition-inflated variance, got {var}"
    );
}

#[test]
fn soft_watermark_green_fraction_exceeds_half() {
    let spec = default_spec();
    let p = params();
    let cfg = SchemeConfig::default_for(Variant::Soft);
    let mut total_green = 0u64;
    let mut total_scored = 0u64;
    for i in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x50f7, i));
        let key = WatermarkKey(rng.gen());
        let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
        let out = embed(&spec, key, &cfg, &prompt, p.length, 1.0, &mut rng).unwrap();
        let z = detect(key, &cfg, &out.text).unwrap();
        total_green += z.green_count;
        total_scored += z.scored_count;
    }
    let fraction = total_green as f64 / total_scored as f64;
    assert!(fraction >= 0.5, "green fraction {fraction}");
    // Golden value for this seeded run, frozen at implementation time.
    assert!(
        (fraction - 0.955).abs() < 0.02,
        "green fraction drifted from its golden value: {fraction}"
    );
}

#[test]
fn stolen_unigram_signal_ranks_green_tokens_first() {
    let spec = default_spec();
    let p = params();
    let cfg = SchemeConfig::default_for(Variant::Unigram);
    let key = WatermarkKey(0xF00F);
    let n = 1000usize;
    let samples: Vec<TokenSequence> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x57ea, i as u64));
            let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
            embed(&spec, key, &cfg, &prompt, p.length, 1.0, &mut rng)
                .unwrap()
                .text
        })
        .collect();
    let signal = steal(&samples, &spec, 0, DEFAULT_PSEUDO_COUNT).unwrap();

    // Evaluation-only oracle: the true green set of the victim key.
    let green: Vec<bool> = (0..1024u32)
        .map(|t| is_green(key, &cfg, &[], t))
        .collect();
    let rho = signal_membership_correlation(&signal, &green);
    assert!(rho >= 0.6, "rank correlation {rho}");
}

#[test]
fn unigram_keys_are_separable_by_frequency_clustering() {
    // 500 samples per key across 4 unigram keys.
    let spec = default_spec();
    let p = params();
    let keys = KeySet::generate(4, &mut ChaCha8Rng::seed_from_u64(77)).unwrap();
    let ensemble = Ensemble::uniform(SchemeConfig::default_for(Variant::Unigram), &keys);
    let n = 2000usize;
    let mut samples = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0xc1a5, i as u64));
        let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
        let (text, idx) = mk_generate(&spec, &ensemble, &prompt, p.length, 1.0, &mut rng).unwrap();
        samples.push(text);
        truth.push(idx);
    }
    let assignment = cluster_by_key(
        &samples,
        spec.vocab(),
        4,
        ClusterFeature::TokenFrequency,
        25,
        9,
        Some(&truth),
    )
    .unwrap();
    let acc = assignment.accuracy.unwrap();
    assert!(acc >= 0.6, "clustering accuracy {acc}");
}

#[test]
fn single_key_samples_form_one_tight_cluster() {
    let spec = default_spec();
    let p = params();
    let cfg = SchemeConfig::default_for(Variant::Unigram);
    let key = WatermarkKey(0xAAAA);
    let n = 200usize;
    let samples: Vec<TokenSequence> = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(0x0171, i as u64));
            let prompt = random_prompt(spec.vocab(), p.prompt_len, &mut rng);
            embed(&spec, key, &cfg, &prompt, p.length, 1.0, &mut rng)
                .unwrap()
                .text
        })
        .collect();
    let truth = vec![0usize; n];
    let assignment = cluster_by_key(
        &samples,
        spec.vocab(),
        2,
        ClusterFeature::TokenFrequency,
        25,
        3,
        Some(&truth),
    )
    .unwrap();
    let acc = assignment.accuracy.unwrap();
    // Permutation matching maps the dominant cluster onto the single true
    // class; splitting a homogeneous blob caps how low this can go.
    assert!(acc >= 0.5, "single-cluster accuracy {acc}");
}
