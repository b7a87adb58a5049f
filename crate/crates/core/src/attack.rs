//! Forgery adversaries.
//!
//! Everything here sees only token sequences and a base language model —
//! never watermarking keys. The averaging attacker estimates which tokens a
//! watermark over-produces by comparing observed frequencies against the
//! base model's expectations accumulated over the same contexts, then biases
//! its own sampling with that estimate. The clustering attacker first groups
//! collected samples by their (unknown) generating key and trains on the
//! largest group.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::mix64;
use crate::lm::{fast_exp_neg, sample_with_scratch, LmSpec, TokenId, TokenSequence, Vocabulary};

/// Pseudo-count used when turning frequency ratios into scores.
pub const DEFAULT_PSEUDO_COUNT: f64 = 0.5;

/// Per-(context-bucket, token) log-ratio of observed to expected frequency.
/// Positive scores mark tokens the watermark over-produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "SignalWire", try_from = "SignalWire")]
pub struct StolenSignal {
    order: usize,
    vocab_size: usize,
    n_samples: usize,
    table: HashMap<Box<[TokenId]>, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SignalWire {
    order: usize,
    vocab_size: usize,
    n_samples: usize,
    buckets: Vec<BucketWire>,
}

#[derive(Serialize, Deserialize)]
struct BucketWire {
    context: Vec<TokenId>,
    scores: Vec<f64>,
}

impl From<StolenSignal> for SignalWire {
    fn from(s: StolenSignal) -> Self {
        let mut buckets: Vec<BucketWire> = s
            .table
            .into_iter()
            .map(|(context, scores)| BucketWire {
                context: context.into_vec(),
                scores,
            })
            .collect();
        buckets.sort_by(|a, b| a.context.cmp(&b.context));
        SignalWire {
            order: s.order,
            vocab_size: s.vocab_size,
            n_samples: s.n_samples,
            buckets,
        }
    }
}

impl TryFrom<SignalWire> for StolenSignal {
    type Error = Error;
    fn try_from(w: SignalWire) -> Result<Self> {
        let mut table = HashMap::with_capacity(w.buckets.len());
        for b in w.buckets {
            if b.scores.len() != w.vocab_size {
                return Err(Error::invalid("signal bucket width mismatch"));
            }
            table.insert(b.context.into_boxed_slice(), b.scores);
        }
        if !table.contains_key(&[][..]) {
            return Err(Error::invalid("signal is missing its pooled bucket"));
        }
        Ok(StolenSignal {
            order: w.order,
            vocab_size: w.vocab_size,
            n_samples: w.n_samples,
            table,
        })
    }
}

impl StolenSignal {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Scores for the bucket matching the end of `context`. Buckets never
    /// seen in training fall back to the pooled (order-0) bucket.
    pub fn scores_for(&self, context: &[TokenId]) -> &[f64] {
        if self.order > 0 && context.len() >= self.order {
            let key = &context[context.len() - self.order..];
            if let Some(scores) = self.table.get(key) {
                return scores;
            }
        }
        self.table
            .get(&[][..])
            .expect("pooled bucket always present")
    }

    /// Pooled (order-0) scores.
    pub fn pooled_scores(&self) -> &[f64] {
        self.table.get(&[][..]).expect("pooled bucket always present")
    }
}

fn softmax_into(logits: &[f64], out: &mut Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    let mut total = 0.0;
    for &l in logits {
        let w = fast_exp_neg(l - max);
        total += w;
        out.push(w);
    }
    let inv = 1.0 / total;
    for p in out.iter_mut() {
        *p *= inv;
    }
}

/// Learns over-produced tokens from collected watermarked samples.
///
/// For every generated position the observed token count and the base
/// model's full next-token distribution are accumulated per context bucket
/// (the last `order` tokens; order 0 pools everything), and the score is
/// `ln((observed + s) / (expected + s))` with pseudo-count `s`.
pub fn steal(
    samples: &[TokenSequence],
    base: &LmSpec,
    order: usize,
    pseudo_count: f64,
) -> Result<StolenSignal> {
    if samples.is_empty() {
        return Err(Error::invalid("averaging attack needs at least one sample"));
    }
    if !(pseudo_count > 0.0) {
        return Err(Error::invalid("pseudo-count must be positive"));
    }
    let v = base.vocab().size();
    struct Row {
        obs: Vec<f64>,
        exp: Vec<f64>,
    }
    let mut buckets: HashMap<Box<[TokenId]>, Row> = HashMap::new();
    // Positions without a full-order context land in the pooled bucket
    // directly; bucketed counts are folded into it at the end.
    let mut pooled = Row {
        obs: vec![0.0; v],
        exp: vec![0.0; v],
    };

    let mut logits = Vec::new();
    let mut probs = Vec::new();
    for sample in samples {
        base.vocab().validate(&sample.tokens)?;
        for i in sample.prompt_len..sample.tokens.len() {
            base.logits_into(&sample.tokens[..i], &mut logits)?;
            softmax_into(&logits, &mut probs);
            let token = sample.tokens[i] as usize;
            let row = if order > 0 && i >= order {
                let bucket = &sample.tokens[i - order..i];
                if !buckets.contains_key(bucket) {
                    buckets.insert(
                        Box::from(bucket),
                        Row {
                            obs: vec![0.0; v],
                            exp: vec![0.0; v],
                        },
                    );
                }
                buckets.get_mut(bucket).unwrap()
            } else {
                &mut pooled
            };
            row.obs[token] += 1.0;
            for (e, &p) in row.exp.iter_mut().zip(&probs) {
                *e += p;
            }
        }
    }

    for row in buckets.values() {
        for (acc, &x) in pooled.obs.iter_mut().zip(&row.obs) {
            *acc += x;
        }
        for (acc, &x) in pooled.exp.iter_mut().zip(&row.exp) {
            *acc += x;
        }
    }

    let scores_of = |row: &Row| -> Vec<f64> {
        row.obs
            .iter()
            .zip(&row.exp)
            .map(|(&oc, &ec)| ((oc + pseudo_count) / (ec + pseudo_count)).ln())
            .collect()
    };
    let mut table: HashMap<Box<[TokenId]>, Vec<f64>> = buckets
        .iter()
        .map(|(bucket, row)| (bucket.clone(), scores_of(row)))
        .collect();
    table.insert(Box::from(&[][..]), scores_of(&pooled));
    Ok(StolenSignal {
        order,
        vocab_size: v,
        n_samples: samples.len(),
        table,
    })
}

/// Generates a forgery by sampling from
/// `softmax(base logits + strength * scores)` at temperature 1.
pub fn forge(
    signal: &StolenSignal,
    base: &LmSpec,
    prompt: &TokenSequence,
    length: usize,
    strength: f64,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    if signal.vocab_size != base.vocab().size() {
        return Err(Error::invalid(format!(
            "signal was stolen over a vocabulary of {} tokens, base model has {}",
            signal.vocab_size,
            base.vocab().size()
        )));
    }
    base.vocab().validate(&prompt.tokens)?;
    let mut tokens = prompt.tokens.clone();
    let mut logits = Vec::new();
    let mut weights = Vec::new();
    for _ in 0..length {
        base.logits_into(&tokens, &mut logits)?;
        if strength != 0.0 {
            let scores = signal.scores_for(&tokens);
            for (l, &s) in logits.iter_mut().zip(scores) {
                *l += strength * s;
            }
        }
        tokens.push(sample_with_scratch(&logits, 1.0, rng, &mut weights)?);
    }
    TokenSequence::new(tokens, prompt.prompt_len)
}

/// Feature extraction for key clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterFeature {
    /// Normalized token frequency over the full vocabulary.
    TokenFrequency,
    /// Token frequency projected onto the top-k dimensions by variance.
    TokenFrequencyTopK(usize),
}

/// Sample-to-cluster assignment produced by the clustering attacker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub r_hat: usize,
    /// Best-permutation agreement with oracle labels, when those were
    /// supplied for evaluation.
    pub accuracy: Option<f64>,
}

impl ClusterAssignment {
    /// Assignment taken directly from ground-truth labels (the strongest
    /// adaptive attacker the experiments consider).
    pub fn from_oracle(labels: Vec<usize>, r_hat: usize) -> Result<Self> {
        if labels.iter().any(|&l| l >= r_hat) {
            return Err(Error::invalid("oracle label out of range"));
        }
        Ok(Self {
            labels,
            r_hat,
            accuracy: Some(1.0),
        })
    }

    /// Indices of the largest cluster's samples (ties break to the lowest
    /// cluster id).
    pub fn largest_cluster(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.r_hat];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let best = counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.labels
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == best)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Groups samples by normalized token-frequency features with seeded
/// k-means (farthest-point initialization, fixed iteration count).
///
/// `oracle_labels`, when supplied, are used only to score the assignment;
/// they never influence the clustering itself.
pub fn cluster_by_key(
    samples: &[TokenSequence],
    vocab: Vocabulary,
    r_hat: usize,
    feature: ClusterFeature,
    iters: usize,
    seed: u64,
    oracle_labels: Option<&[usize]>,
) -> Result<ClusterAssignment> {
    if r_hat < 2 {
        return Err(Error::invalid("clustering requires r_hat >= 2"));
    }
    if samples.len() < r_hat {
        return Err(Error::invalid(format!(
            "cannot split {} samples into {r_hat} clusters",
            samples.len()
        )));
    }
    if let Some(oracle) = oracle_labels {
        if oracle.len() != samples.len() {
            return Err(Error::invalid("oracle label count must match sample count"));
        }
    }

    let mut features: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| {
            vocab.validate(&s.tokens)?;
            let mut f = vec![0.0; vocab.size()];
            let gen = s.generated();
            if !gen.is_empty() {
                let inv = 1.0 / gen.len() as f64;
                for &t in gen {
                    f[t as usize] += inv;
                }
            }
            Ok(f)
        })
        .collect::<Result<_>>()?;

    if let ClusterFeature::TokenFrequencyTopK(k) = feature {
        features = project_top_variance(&features, k);
    }

    let labels = kmeans(&features, r_hat, iters, seed);
    let accuracy = oracle_labels.map(|oracle| permutation_accuracy(&labels, oracle, r_hat));
    Ok(ClusterAssignment {
        labels,
        r_hat,
        accuracy,
    })
}

fn project_top_variance(features: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let dims = features[0].len();
    let k = k.min(dims).max(1);
    let n = features.len() as f64;
    let mut mean = vec![0.0; dims];
    for f in features {
        for (m, &x) in mean.iter_mut().zip(f) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dims];
    for f in features {
        for ((v, &x), &m) in var.iter_mut().zip(f).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let mut order: Vec<usize> = (0..dims).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    let keep = &order[..k];
    features
        .iter()
        .map(|f| keep.iter().map(|&d| f[d]).collect())
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

fn kmeans(features: &[Vec<f64>], k: usize, iters: usize, seed: u64) -> Vec<usize> {
    let n = features.len();
    // Farthest-point initialization: seeded first pick, then repeatedly the
    // sample farthest from its nearest chosen centroid.
    let first = (mix64(seed) % n as u64) as usize;
    let mut centroids: Vec<Vec<f64>> = vec![features[first].clone()];
    let mut nearest: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < k {
        let mut best = 0usize;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        centroids.push(features[best].clone());
        let c = centroids.last().unwrap();
        for (d, f) in nearest.iter_mut().zip(features) {
            let nd = sq_dist(f, c);
            if nd < *d {
                *d = nd;
            }
        }
    }

    let dims = features[0].len();
    let mut labels = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = sq_dist(f, &centroids[0]);
            for (c, centroid) in centroids.iter().enumerate().skip(1) {
                let d = sq_dist(f, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (f, &l) in features.iter().zip(&labels) {
            counts[l] += 1;
            for (s, &x) in sums[l].iter_mut().zip(f) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (ctr, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Best-relabeling agreement between predicted and oracle labels:
/// exhaustive over permutations up to 6 classes, greedy matching beyond.
pub fn permutation_accuracy(labels: &[usize], oracle: &[usize], r_hat: usize) -> f64 {
    let classes = r_hat
        .max(oracle.iter().map(|&l| l + 1).max().unwrap_or(1))
        .max(labels.iter().map(|&l| l + 1).max().unwrap_or(1));
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&p, &t) in labels.iter().zip(oracle) {
        confusion[p][t] += 1;
    }
    let matched = if classes <= 6 {
        let mut perm: Vec<usize> = (0..classes).collect();
        let mut best = 0usize;
        permute(&mut perm, 0, &mut |perm| {
            let score: usize = perm.iter().enumerate().map(|(p, &t)| confusion[p][t]).sum();
            if score > best {
                best = score;
            }
        });
        best
    } else {
        let mut used_p = vec![false; classes];
        let mut used_t = vec![false; classes];
        let mut total = 0usize;
        for _ in 0..classes {
            let mut best = (0usize, 0usize, 0usize);
            for p in 0..classes {
                if used_p[p] {
                    continue;
                }
                for t in 0..classes {
                    if !used_t[t] && confusion[p][t] >= best.2 {
                        best = (p, t, confusion[p][t]);
                    }
                }
            }
            used_p[best.0] = true;
            used_t[best.1] = true;
            total += best.2;
        }
        total
    };
    matched as f64 / n as f64
}

fn permute(perm: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == perm.len() {
        visit(perm);
        return;
    }
    for i in k..perm.len() {
        perm.swap(k, i);
        permute(perm, k + 1, visit);
        perm.swap(k, i);
    }
}

/// Steal-and-forge restricted to the largest identified cluster.
#[allow(clippy::too_many_arguments)]
pub fn adaptive_forge(
    samples: &[TokenSequence],
    assignment: &ClusterAssignment,
    base: &LmSpec,
    order: usize,
    pseudo_count: f64,
    prompt: &TokenSequence,
    length: usize,
    strength: f64,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    if assignment.labels.len() != samples.len() {
        return Err(Error::invalid(
            "assignment labels must match the sample count",
        ));
    }
    let subset: Vec<TokenSequence> = assignment
        .largest_cluster()
        .into_iter()
        .map(|i| samples[i].clone())
        .collect();
    let signal = steal(&subset, base, order, pseudo_count)?;
    forge(&signal, base, prompt, length, strength, rng)
}

/// The attacker's own estimate of the green set: the top `gamma * V` tokens
/// of the pooled stolen scores (ties break to the lower token id).
pub fn pseudo_green_set(signal: &StolenSignal, gamma: f64) -> Vec<bool> {
    let scores = signal.pooled_scores();
    let k = ((gamma * scores.len() as f64).floor() as usize).clamp(1, scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut mask = vec![false; scores.len()];
    for &t in &order[..k] {
        mask[t] = true;
    }
    mask
}

/// Key-blind self-scoring: the green-count z statistic of a text against the
/// attacker's estimated green set. The detection API is closed to the
/// attacker, so strength tuning maximizes this proxy instead.
pub fn pseudo_detection_z(text: &TokenSequence, green: &[bool], gamma: f64) -> f64 {
    let gen = text.generated();
    if gen.is_empty() {
        return 0.0;
    }
    let g = gen.iter().filter(|&&t| green[t as usize]).count() as f64;
    let t = gen.len() as f64;
    (g - gamma * t) / (t * gamma * (1.0 - gamma)).sqrt()
}

/// Spearman rank correlation; ties receive average ranks. Used by tests and
/// experiment reports to compare a stolen signal against a reference set.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let n = x.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank correlation between pooled stolen scores and a reference membership
/// indicator over the vocabulary (evaluation-only; the reference set comes
/// from the harness, never from attack code).
pub fn signal_membership_correlation(signal: &StolenSignal, reference: &[bool]) -> f64 {
    let scores = signal.pooled_scores();
    let indicator: Vec<f64> = reference.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    spearman(scores, &indicator)
}
