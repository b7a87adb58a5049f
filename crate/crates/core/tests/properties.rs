//! Property-based invariants.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mkwm_core::lm::{softmax, LmSpec, TokenSequence, Vocabulary};
use mkwm_core::multikey::{family_fpr, sidak_alpha, Decision, DetectionReport};
use mkwm_core::scheme::{detect, is_green, SchemeConfig, Variant, WatermarkKey};
use mkwm_core::theory::{normal_cdf, normal_quantile};

fn variant_strategy() -> impl Strategy<Value = Variant> {
    prop_oneof![
        Just(Variant::Soft),
        Just(Variant::Hard),
        Just(Variant::SelfHash),
        Just(Variant::Unigram),
    ]
}

proptest! {
    /// Softmax of any finite logits vector sums to one.
    #[test]
    fn softmax_normalizes(logits in prop::collection::vec(-30.0f64..30.0, 2..256)) {
        let p = softmax(&logits);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-9, "softmax total {total}");
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    /// The Sidak correction inverts the family-wise rate exactly.
    #[test]
    fn sidak_and_family_fpr_are_inverse(
        alpha_fw in 1e-6f64..0.999,
        r in 1usize..64,
    ) {
        let alpha = sidak_alpha(alpha_fw, r).unwrap();
        let back = family_fpr(alpha, r).unwrap();
        prop_assert!((back - alpha_fw).abs() < 1e-9, "{alpha_fw} -> {alpha} -> {back}");
    }

    /// Quantile round trip within the spec tolerance.
    #[test]
    fn quantile_round_trip(p in 1e-9f64..0.999_999_999) {
        let q = normal_quantile(p).unwrap();
        prop_assert!((normal_cdf(q) - p).abs() <= 1e-6);
    }

    /// Decision trichotomy: exactly one decision class holds, and Genuine
    /// points at the unique firing indicator.
    #[test]
    fn decision_trichotomy(
        z in prop::collection::vec(-6.0f64..10.0, 1..8),
        tau in -1.0f64..5.0,
    ) {
        let report = DetectionReport::from_scores(z, tau);
        let fired = report.indicators.iter().filter(|&&b| b).count();
        match report.decision {
            Decision::Unwatermarked => prop_assert_eq!(fired, 0),
            Decision::Genuine(i) => {
                prop_assert_eq!(fired, 1);
                prop_assert!(report.indicators[i]);
            }
            Decision::Forged => prop_assert!(fired >= 2),
        }
        if report.z.len() >= 2 {
            prop_assert!(report.gap.is_some());
        } else {
            // The forged branch is unreachable for a single member.
            prop_assert!(report.decision != Decision::Forged);
            prop_assert!(report.gap.is_none());
        }
    }

    /// Permuting the score vector permutes Genuine's index but never changes
    /// the decision class or the gap.
    #[test]
    fn decision_is_permutation_invariant(
        z in prop::collection::vec(-6.0f64..10.0, 2..8),
        tau in -1.0f64..5.0,
        rotation in 0usize..8,
    ) {
        let base = DetectionReport::from_scores(z.clone(), tau);
        let k = rotation % z.len();
        let mut rotated = z.clone();
        rotated.rotate_left(k);
        let perm = DetectionReport::from_scores(rotated, tau);
        prop_assert_eq!(perm.gap, base.gap);
        match (base.decision, perm.decision) {
            (Decision::Unwatermarked, Decision::Unwatermarked) => {}
            (Decision::Forged, Decision::Forged) => {}
            (Decision::Genuine(i), Decision::Genuine(j)) => {
                // Rotating left by k moves index i to (i - k) mod n.
                prop_assert_eq!(j, (i + z.len() - k) % z.len());
            }
            (a, b) => prop_assert!(false, "decision class changed: {a:?} vs {b:?}"),
        }
    }

    /// Green membership is deterministic and context-window sized; the
    /// unigram variant ignores context entirely.
    #[test]
    fn green_membership_determinism(
        key in any::<u64>(),
        variant in variant_strategy(),
        ctx in prop::collection::vec(0u32..1024, 3),
        candidate in 0u32..1024,
    ) {
        let cfg = SchemeConfig::default_for(variant);
        let window = &ctx[ctx.len() - cfg.h..];
        let a = is_green(WatermarkKey(key), &cfg, window, candidate);
        let b = is_green(WatermarkKey(key), &cfg, window, candidate);
        prop_assert_eq!(a, b);
        if variant == Variant::Unigram {
            prop_assert_eq!(a, is_green(WatermarkKey(key), &cfg, &[], candidate));
        }
    }

    /// detect() agrees with a naive recount on arbitrary token material.
    #[test]
    fn detect_matches_naive_recount(
        variant in variant_strategy(),
        key in any::<u64>(),
        tokens in prop::collection::vec(0u32..512, 8..96),
        prompt_len in 0usize..8,
    ) {
        let cfg = SchemeConfig::default_for(variant);
        let text = TokenSequence::new(tokens.clone(), prompt_len).unwrap();
        let key = WatermarkKey(key);
        let mut g = 0u64;
        let mut t = 0u64;
        for i in prompt_len.max(cfg.h)..tokens.len() {
            if is_green(key, &cfg, &tokens[i - cfg.h..i], tokens[i]) {
                g += 1;
            }
            t += 1;
        }
        let got = detect(key, &cfg, &text).unwrap();
        prop_assert_eq!(got.green_count, g);
        prop_assert_eq!(got.scored_count, t);
    }

    /// Corpus lines round-trip through the text format.
    #[test]
    fn corpus_line_round_trip(tokens in prop::collection::vec(0u32..100_000, 1..64)) {
        let line = tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
        let parsed = mkwm_core::corpus::parse_line(&line, 1).unwrap();
        prop_assert_eq!(parsed.tokens, tokens);
    }
}

/// Hash-synthetic models are pure: rebuilding the spec reproduces logits.
#[test]
fn rebuilt_spec_reproduces_logits() {
    let v = Vocabulary::new(256).unwrap();
    let a = LmSpec::hash_synthetic(v, 1.3, 2, 99).unwrap();
    let b = LmSpec::hash_synthetic(v, 1.3, 2, 99).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..32 {
        let ctx = mkwm_core::lm::random_prompt(v, 5, &mut rng);
        assert_eq!(a.logits(&ctx.tokens).unwrap(), b.logits(&ctx.tokens).unwrap());
    }
}
