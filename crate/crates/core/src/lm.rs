//! Deterministic toy token-probability models.
//!
//! Two kinds stand in for the provider and surrogate models: a hash-synthetic
//! model whose logits are pure functions of (seed, context, token) with
//! tunable sharpness, and an n-gram model trained on a token corpus. Both are
//! immutable after construction and safe to share across workers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{chain_hash, mix64, unit_open};
use crate::theory::rational_quantile;

/// Token ids are dense integers in `[0, vocab.size())`.
pub type TokenId = u32;

/// Below this temperature, sampling degenerates to argmax with lowest-id
/// tie-breaking.
pub const GREEDY_EPSILON: f64 = 1e-6;

const CONTEXT_CHAIN_INIT: u64 = 0x5bf0_3635_16f5_11a7;

/// A dense integer vocabulary of at least two tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        Ok(Self { size })
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn validate(&self, tokens: &[TokenId]) -> Result<()> {
        for &t in tokens {
            if !self.contains(t) {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab: self.size,
                });
            }
        }
        Ok(())
    }
}

/// A token sequence with a marker separating the prompt prefix from
/// generated content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>, prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::invalid(format!(
                "prompt_len {prompt_len} exceeds sequence length {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, prompt_len })
    }

    /// A sequence that is entirely prompt.
    pub fn prompt(tokens: Vec<TokenId>) -> Self {
        let prompt_len = tokens.len();
        Self { tokens, prompt_len }
    }

    #[inline]
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Uniform random prompt of the given length.
pub fn random_prompt(vocab: Vocabulary, len: usize, rng: &mut impl Rng) -> TokenSequence {
    let tokens = (0..len)
        .map(|_| rng.gen_range(0..vocab.size() as u32))
        .collect();
    TokenSequence::prompt(tokens)
}

/// Shared sampling parameters for batch generation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub length: usize,
    pub prompt_len: usize,
    pub temperature: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            length: 256,
            prompt_len: 8,
            temperature: 1.0,
        }
    }
}

/// A token-probability model: hash-synthetic or n-gram counts.
#[derive(Debug, Clone)]
pub enum LmSpec {
    HashSynthetic(HashLm),
    NgramCounts(NgramLm),
}

impl LmSpec {
    pub fn hash_synthetic(
        vocab: Vocabulary,
        entropy_scale: f64,
        order: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(entropy_scale >= 0.0 && entropy_scale.is_finite()) {
            return Err(Error::invalid(format!(
                "entropy_scale must be a finite non-negative real, got {entropy_scale}"
            )));
        }
        Ok(LmSpec::HashSynthetic(HashLm {
            vocab,
            entropy_scale,
            order,
            seed,
            token_hash: (0..vocab.size() as u32).map(|t| mix64(u64::from(t))).collect(),
        }))
    }

    #[inline]
    pub fn vocab(&self) -> Vocabulary {
        match self {
            LmSpec::HashSynthetic(m) => m.vocab,
            LmSpec::NgramCounts(m) => m.vocab,
        }
    }

    #[inline]
    pub fn order(&self) -> usize {
        match self {
            LmSpec::HashSynthetic(m) => m.order,
            LmSpec::NgramCounts(m) => m.order,
        }
    }

    /// Next-token logits for the given context, one per vocabulary entry.
    pub fn logits(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.logits_into(context, &mut out)?;
        Ok(out)
    }

    /// As [`Self::logits`] but reusing the output buffer.
    pub fn logits_into(&self, context: &[TokenId], out: &mut Vec<f64>) -> Result<()> {
        self.vocab().validate(context)?;
        match self {
            LmSpec::HashSynthetic(m) => m.logits_into(context, out),
            LmSpec::NgramCounts(m) => m.logits_into(context, out),
        }
        Ok(())
    }

    /// Samples the next token from `softmax(logits / temperature)`.
    pub fn sample_next(
        &self,
        context: &[TokenId],
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenId> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let mut buf = Vec::new();
        self.logits_into(context, &mut buf)?;
        sample_from_logits(&buf, temperature, rng)
    }

    /// Extends `prompt` by `length` tokens of plain (unwatermarked) sampling.
    pub fn sample_sequence(
        &self,
        prompt: &TokenSequence,
        length: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<TokenSequence> {
        let mut tokens = prompt.tokens.clone();
        let mut buf = Vec::new();
        let mut weights = Vec::new();
        for _ in 0..length {
            self.logits_into(&tokens, &mut buf)?;
            tokens.push(sample_with_scratch(&buf, temperature, rng, &mut weights)?);
        }
        TokenSequence::new(tokens, prompt.prompt_len)
    }
}

/// Hash-synthetic model: `logit[t] = entropy_scale * G(mix(seed, ctx, t))`
/// where `G` maps the 64-bit hash through its uniform embedding into the
/// standard normal quantile.
#[derive(Debug, Clone)]
pub struct HashLm {
    vocab: Vocabulary,
    entropy_scale: f64,
    order: usize,
    seed: u64,
    token_hash: Vec<u64>,
}

impl HashLm {
    fn logits_into(&self, context: &[TokenId], out: &mut Vec<f64>) {
        let tail_start = context.len().saturating_sub(self.order);
        let ctx_hash = chain_hash(CONTEXT_CHAIN_INIT, &context[tail_start..]);
        let step = mix64(self.seed ^ ctx_hash);
        out.clear();
        out.extend(self.token_hash.iter().map(|&th| {
            self.entropy_scale * rational_quantile(unit_open(mix64(step ^ th)))
        }));
    }
}

/// N-gram counts model: `logit[t] = ln(count(ctx, t) + smoothing)`.
/// Contexts never seen in training fall back to the uniform smoothed
/// distribution.
#[derive(Debug, Clone)]
pub struct NgramLm {
    vocab: Vocabulary,
    order: usize,
    smoothing: f64,
    counts: HashMap<Box<[TokenId]>, HashMap<TokenId, u32>>,
}

impl NgramLm {
    fn logits_into(&self, context: &[TokenId], out: &mut Vec<f64>) {
        let base = self.smoothing.ln();
        out.clear();
        out.resize(self.vocab.size(), base);
        if context.len() < self.order {
            return;
        }
        let key = &context[context.len() - self.order..];
        if let Some(row) = self.counts.get(key) {
            for (&t, &c) in row {
                out[t as usize] = (f64::from(c) + self.smoothing).ln();
            }
        }
    }

    /// Smoothed conditional probability, exposed for count-level tests.
    pub fn probability(&self, context: &[TokenId], token: TokenId) -> f64 {
        let v = self.vocab.size() as f64;
        let (count, total) = match self
            .counts
            .get(context.get(context.len().saturating_sub(self.order)..).unwrap_or(&[]))
        {
            Some(row) => (
                f64::from(row.get(&token).copied().unwrap_or(0)),
                row.values().map(|&c| f64::from(c)).sum::<f64>(),
            ),
            None => (0.0, 0.0),
        };
        (count + self.smoothing) / (total + self.smoothing * v)
    }
}

/// Builds an n-gram model from a corpus. Positions with fewer than `order`
/// predecessors are skipped.
pub fn train_ngram(
    corpus: &[TokenSequence],
    vocab: Vocabulary,
    order: usize,
    smoothing: f64,
) -> Result<LmSpec> {
    if corpus.is_empty() {
        return Err(Error::invalid("n-gram training requires a non-empty corpus"));
    }
    if !(smoothing > 0.0) {
        return Err(Error::invalid(format!(
            "smoothing must be positive, got {smoothing}"
        )));
    }
    let mut counts: HashMap<Box<[TokenId]>, HashMap<TokenId, u32>> = HashMap::new();
    for seq in corpus {
        vocab.validate(&seq.tokens)?;
        for i in order..seq.tokens.len() {
            let ctx = seq.tokens[i - order..i].to_vec().into_boxed_slice();
            *counts.entry(ctx).or_default().entry(seq.tokens[i]).or_insert(0) += 1;
        }
    }
    Ok(LmSpec::NgramCounts(NgramLm {
        vocab,
        order,
        smoothing,
        counts,
    }))
}

/// Softmax of a logits vector; sums to 1 up to floating-point rounding.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

/// Polynomial `exp` for non-positive arguments (relative error under 1e-8),
/// used in the vocabulary-wide weight passes where it is measurably faster
/// than the libm call. Arguments below the underflow cutoff return 0.
#[inline]
pub(crate) fn fast_exp_neg(x: f64) -> f64 {
    const LOG2_E: f64 = std::f64::consts::LOG2_E;
    const LN_2: f64 = std::f64::consts::LN_2;
    if x < -700.0 {
        return 0.0;
    }
    let t = x * LOG2_E;
    let k = t.round();
    let r = (t - k) * LN_2;
    // exp(r) for |r| <= ln(2)/2, Horner degree 7.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0 + r * (1.0 / 720.0 + r * (1.0 / 5040.0)))))));
    let two_k = f64::from_bits(((k as i64 + 1023) as u64) << 52);
    p * two_k
}

/// Samples a token index from `softmax(logits / temperature)`, falling back
/// to deterministic argmax below [`GREEDY_EPSILON`].
pub fn sample_from_logits(
    logits: &[f64],
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<TokenId> {
    let mut weights = Vec::with_capacity(logits.len());
    sample_with_scratch(logits, temperature, rng, &mut weights)
}

/// As [`sample_from_logits`] but reusing a weight buffer across calls.
pub(crate) fn sample_with_scratch(
    logits: &[f64],
    temperature: f64,
    rng: &mut impl Rng,
    weights: &mut Vec<f64>,
) -> Result<TokenId> {
    if temperature < GREEDY_EPSILON {
        if logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::NonFiniteLogits);
        }
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return Ok(best as TokenId);
    }
    let inv_t = 1.0 / temperature;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return Err(Error::NonFiniteLogits);
    }
    weights.clear();
    let mut total = 0.0;
    for &l in logits {
        let w = fast_exp_neg((l - max) * inv_t);
        total += w;
        weights.push(w);
    }
    // A NaN logit poisons the total through the weight polynomial.
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::NonFiniteLogits);
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = i;
        }
        acc += w;
        if target < acc {
            return Ok(i as TokenId);
        }
    }
    Ok(last_positive as TokenId)
}

/// Shannon entropy (nats) of the next-token distribution.
pub fn next_token_entropy(spec: &LmSpec, context: &[TokenId]) -> Result<f64> {
    let probs = softmax(&spec.logits(context)?);
    Ok(probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum())
}
