//! Green/red-list watermark embedding and detection.
//!
//! Four variants share one PRF construction: a per-step seed is derived from
//! the secret key and the last `h` context tokens (plus the candidate token
//! itself when self-seeding), and a candidate is green when its mixed hash
//! falls below `gamma * 2^64`. Soft variants add `delta` to green logits
//! before sampling; the hard variant masks red tokens entirely. Detection
//! recomputes the same memberships and standardizes the green count.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::lm::{sample_with_scratch, LmSpec, TokenId, TokenSequence};

/// Secret 64-bit watermarking key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WatermarkKey(pub u64);

/// Watermark scheme variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Soft,
    Hard,
    SelfHash,
    Unigram,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Soft, Variant::Hard, Variant::SelfHash, Variant::Unigram];

    /// Context window size forced by the variant.
    pub fn context_window(self) -> usize {
        match self {
            Variant::Unigram => 0,
            Variant::Soft | Variant::Hard => 1,
            Variant::SelfHash => 3,
        }
    }

    /// Whether the candidate token participates in its own seed.
    pub fn self_seeding(self) -> bool {
        matches!(self, Variant::SelfHash)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Soft => "soft",
            Variant::Hard => "hard",
            Variant::SelfHash => "selfhash",
            Variant::Unigram => "unigram",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" => Ok(Variant::Soft),
            "hard" => Ok(Variant::Hard),
            "selfhash" | "self-hash" => Ok(Variant::SelfHash),
            "unigram" => Ok(Variant::Unigram),
            other => Err(Error::invalid(format!("unknown scheme variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const DEFAULT_GAMMA: f64 = 0.25;
pub const DEFAULT_DELTA: f64 = 4.0;

/// Scheme hyperparameters. `h` and `self_seeding` are forced by the variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemeConfigRaw")]
pub struct SchemeConfig {
    pub variant: Variant,
    /// Green fraction of the vocabulary, in (0, 1).
    pub gamma: f64,
    /// Additive logit bias for green tokens (ignored by the hard variant).
    pub delta: f64,
    /// Context window size.
    pub h: usize,
    pub self_seeding: bool,
}

#[derive(Deserialize)]
struct SchemeConfigRaw {
    variant: Variant,
    #[serde(default)]
    gamma: Option<f64>,
    #[serde(default)]
    delta: Option<f64>,
    #[serde(default)]
    h: Option<usize>,
    #[serde(default)]
    self_seeding: Option<bool>,
}

impl TryFrom<SchemeConfigRaw> for SchemeConfig {
    type Error = Error;
    fn try_from(raw: SchemeConfigRaw) -> Result<Self> {
        let cfg = SchemeConfig::new(
            raw.variant,
            raw.gamma.unwrap_or(DEFAULT_GAMMA),
            raw.delta.unwrap_or(DEFAULT_DELTA),
        )?;
        if let Some(h) = raw.h {
            if h != cfg.h {
                return Err(Error::invalid(format!(
                    "variant {} forces h = {}, got {h}",
                    cfg.variant, cfg.h
                )));
            }
        }
        if let Some(ss) = raw.self_seeding {
            if ss != cfg.self_seeding {
                return Err(Error::invalid(format!(
                    "variant {} forces self_seeding = {}",
                    cfg.variant, cfg.self_seeding
                )));
            }
        }
        Ok(cfg)
    }
}

impl SchemeConfig {
    pub fn new(variant: Variant, gamma: f64, delta: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0,1), got {gamma}")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!(
                "delta must be a finite non-negative real, got {delta}"
            )));
        }
        Ok(Self {
            variant,
            gamma,
            delta,
            h: variant.context_window(),
            self_seeding: variant.self_seeding(),
        })
    }

    /// Paper defaults: gamma 0.25, delta 4.0.
    pub fn default_for(variant: Variant) -> Self {
        Self::new(variant, DEFAULT_GAMMA, DEFAULT_DELTA).expect("defaults are valid")
    }

    #[inline]
    fn green_threshold(&self) -> u128 {
        (self.gamma * 18_446_744_073_709_551_616.0) as u128
    }
}

/// Min-aggregation of per-token mixed hashes over the context window; the
/// empty window (unigram) aggregates to zero.
#[inline]
fn aggregate_context(context: &[TokenId]) -> u64 {
    context
        .iter()
        .map(|&t| mix64(u64::from(t)))
        .min()
        .unwrap_or(0)
}

#[inline]
fn green_hash(key: WatermarkKey, cfg: &SchemeConfig, agg: u64, candidate: TokenId) -> u64 {
    let cand = mix64(u64::from(candidate));
    let self_part = if cfg.self_seeding { cand } else { 0 };
    let step = mix64(key.0 ^ agg ^ self_part);
    mix64(step ^ cand)
}

/// Whether `candidate` is green for the key under the last-`h`-token context.
#[inline]
pub fn is_green(key: WatermarkKey, cfg: &SchemeConfig, context: &[TokenId], candidate: TokenId) -> bool {
    let agg = aggregate_context(context);
    u128::from(green_hash(key, cfg, agg, candidate)) < cfg.green_threshold()
}

/// Green membership over a whole vocabulary for one (key, context) step.
#[derive(Debug, Clone)]
pub struct GreenMask {
    bits: Vec<bool>,
}

impl GreenMask {
    pub fn compute(key: WatermarkKey, cfg: &SchemeConfig, context: &[TokenId], vocab_size: usize) -> Self {
        let agg = aggregate_context(context);
        let threshold = cfg.green_threshold();
        let bits = (0..vocab_size as u32)
            .map(|t| u128::from(green_hash(key, cfg, agg, t)) < threshold)
            .collect();
        Self { bits }
    }

    #[inline]
    pub fn is_green(&self, token: TokenId) -> bool {
        self.bits[token as usize]
    }

    pub fn green_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Standardized green-count statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScore {
    pub value: f64,
    pub green_count: u64,
    pub scored_count: u64,
}

impl ZScore {
    pub fn new(green_count: u64, scored_count: u64, gamma: f64) -> Result<Self> {
        if scored_count == 0 {
            return Err(Error::InsufficientTokens);
        }
        if green_count > scored_count {
            return Err(Error::invalid("green count exceeds scored count"));
        }
        let t = scored_count as f64;
        let value = (green_count as f64 - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt();
        Ok(Self {
            value,
            green_count,
            scored_count,
        })
    }
}

/// Watermarked generation output. `degenerate_steps` counts hard-variant
/// steps where every candidate was red and sampling fell back to unbiased.
#[derive(Debug, Clone)]
pub struct EmbedOutput {
    pub text: TokenSequence,
    pub degenerate_steps: usize,
}

/// Extends `prompt` with `length` watermarked tokens.
///
/// Positions whose running context is shorter than `h` are sampled without
/// bias, mirroring the detection-side skip so generation and detection see
/// identical green masks.
pub fn embed(
    spec: &LmSpec,
    key: WatermarkKey,
    cfg: &SchemeConfig,
    prompt: &TokenSequence,
    length: usize,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<EmbedOutput> {
    if length < 1 {
        return Err(Error::invalid("generation length must be at least 1"));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let vocab = spec.vocab();
    vocab.validate(&prompt.tokens)?;
    let mut tokens = prompt.tokens.clone();
    let mut logits = Vec::new();
    let mut weights = Vec::new();
    let mut degenerate_steps = 0usize;
    let threshold = cfg.green_threshold();
    // Candidate hashes are step-independent; computing them once makes the
    // per-step mask a single mix.
    let token_hashes: Vec<u64> = (0..vocab.size() as u32)
        .map(|t| mix64(u64::from(t)))
        .collect();
    for _ in 0..length {
        spec.logits_into(&tokens, &mut logits)?;
        let i = tokens.len();
        if i >= cfg.h {
            let agg = aggregate_context(&tokens[i - cfg.h..]);
            match cfg.variant {
                Variant::Hard => {
                    let step = mix64(key.0 ^ agg);
                    let mut any_green = false;
                    for (l, &th) in logits.iter_mut().zip(&token_hashes) {
                        let green = u128::from(mix64(step ^ th)) < threshold;
                        any_green |= green;
                        *l = if green { *l } else { f64::NEG_INFINITY };
                    }
                    if !any_green {
                        // All candidates red: restore and sample unbiased.
                        spec.logits_into(&tokens, &mut logits)?;
                        degenerate_steps += 1;
                    }
                }
                _ if cfg.self_seeding => {
                    for (l, &th) in logits.iter_mut().zip(&token_hashes) {
                        let step = mix64(key.0 ^ agg ^ th);
                        let green = u128::from(mix64(step ^ th)) < threshold;
                        *l += cfg.delta * f64::from(u8::from(green));
                    }
                }
                _ => {
                    let step = mix64(key.0 ^ agg);
                    for (l, &th) in logits.iter_mut().zip(&token_hashes) {
                        let green = u128::from(mix64(step ^ th)) < threshold;
                        *l += cfg.delta * f64::from(u8::from(green));
                    }
                }
            }
        }
        tokens.push(sample_with_scratch(&logits, temperature, rng, &mut weights)?);
    }
    Ok(EmbedOutput {
        text: TokenSequence::new(tokens, prompt.tokens.len())?,
        degenerate_steps,
    })
}

/// Scores the generated region of `text` against one key.
///
/// Every generated position with a full `h`-token context is scored; prompt
/// tokens serve as context but are never scored themselves.
pub fn detect(key: WatermarkKey, cfg: &SchemeConfig, text: &TokenSequence) -> Result<ZScore> {
    let start = text.prompt_len.max(cfg.h);
    let mut green = 0u64;
    let mut scored = 0u64;
    for i in start..text.tokens.len() {
        let ctx = &text.tokens[i - cfg.h..i];
        if is_green(key, cfg, ctx, text.tokens[i]) {
            green += 1;
        }
        scored += 1;
    }
    ZScore::new(green, scored, cfg.gamma)
}
