//! Monte Carlo security-game harness.
//!
//! A run sweeps a grid of cells (scheme variant x key count x attacker
//! sample budget). Per cell and seed the provider builds an ensemble,
//! calibrates a threshold, measures its own utility (false negatives on
//! genuine texts, family-wise false positives on null texts), then the
//! attacker collects exactly N watermarked samples, builds a forgery model,
//! and submits forgeries; a forgery wins when the detector returns Genuine.
//!
//! Random streams are derived per (seed, phase, cell, item), so results are
//! pure functions of the config and identical under any worker count.
//! Phases that are shared across comparable cells (training prefixes,
//! forgery prompts) reuse streams, which pairs the Monte Carlo noise in
//! cross-cell comparisons.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{
    cluster_by_key, forge, pseudo_detection_z, pseudo_green_set, steal, ClusterAssignment,
    ClusterFeature, StolenSignal, DEFAULT_PSEUDO_COUNT,
};
use crate::corpus::read_corpus;
use crate::error::{Error, Result};
use crate::exec;
use crate::hash::{mix64, stream_seed};
use crate::lm::{random_prompt, train_ngram, GenParams, LmSpec, TokenSequence, Vocabulary};
use crate::multikey::{
    calibrate_analytic, calibrate_from_null_texts, mk_detect, mk_generate, sample_null_corpus,
    Calibration, Decision, Ensemble, KeySet,
};
use crate::scheme::{SchemeConfig, Variant, DEFAULT_DELTA, DEFAULT_GAMMA};
use crate::theory::{simulate_detector_model, DetectorModel, TrialCondition};

const SALT_KEYS: u64 = 0x6b65_79730d00_0001;
const SALT_NULL: u64 = 0x6e75_6c6c0d00_0002;
const SALT_FNR: u64 = 0x666e_72000d00_0003;
const SALT_TRAIN: u64 = 0x7472_61690d00_0004;
const SALT_TUNE: u64 = 0x7475_6e650d00_0005;
const SALT_FORGE: u64 = 0x666f_72670d00_0006;
const SALT_CLUSTER: u64 = 0x636c_75730d00_0007;
const SALT_SIM: u64 = 0x7369_6d000d00_0008;

/// Language-model description as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    #[serde(default = "LmConfig::default_kind")]
    pub kind: LmKind,
    #[serde(default = "LmConfig::default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "LmConfig::default_entropy_scale")]
    pub entropy_scale: f64,
    #[serde(default = "LmConfig::default_order")]
    pub order: usize,
    #[serde(default = "LmConfig::default_lm_seed")]
    pub lm_seed: u64,
    #[serde(default)]
    pub counts_source: Option<PathBuf>,
    #[serde(default = "LmConfig::default_smoothing")]
    pub smoothing: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmKind {
    HashSynthetic,
    NgramCounts,
}

impl LmConfig {
    fn default_kind() -> LmKind {
        LmKind::HashSynthetic
    }
    fn default_vocab_size() -> usize {
        1024
    }
    fn default_entropy_scale() -> f64 {
        1.0
    }
    fn default_order() -> usize {
        2
    }
    fn default_lm_seed() -> u64 {
        7
    }
    fn default_smoothing() -> f64 {
        0.5
    }

    pub fn build(&self) -> Result<LmSpec> {
        let vocab = Vocabulary::new(self.vocab_size)?;
        match self.kind {
            LmKind::HashSynthetic => {
                LmSpec::hash_synthetic(vocab, self.entropy_scale, self.order, self.lm_seed)
            }
            LmKind::NgramCounts => {
                let path = self.counts_source.as_ref().ok_or_else(|| {
                    Error::Config("ngram-counts model requires counts_source".into())
                })?;
                let corpus = read_corpus(path)?;
                train_ngram(&corpus, vocab, self.order, self.smoothing)
            }
        }
    }
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            kind: Self::default_kind(),
            vocab_size: Self::default_vocab_size(),
            entropy_scale: Self::default_entropy_scale(),
            order: Self::default_order(),
            lm_seed: Self::default_lm_seed(),
            counts_source: None,
            smoothing: Self::default_smoothing(),
        }
    }
}

/// Ensemble grid: which variants, which key counts, shared gamma/delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default)]
    pub variants: Vec<Variant>,
    pub r_values: Vec<usize>,
    #[serde(default = "EnsembleConfig::default_gamma")]
    pub gamma: f64,
    #[serde(default = "EnsembleConfig::default_delta")]
    pub delta: f64,
    /// When set, all listed variants are combined into one mixed ensemble
    /// per key count instead of one cell per variant.
    #[serde(default)]
    pub mixed: bool,
}

impl EnsembleConfig {
    fn default_gamma() -> f64 {
        DEFAULT_GAMMA
    }
    fn default_delta() -> f64 {
        DEFAULT_DELTA
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackerKind {
    BlindAvg,
    AdaptiveCluster,
    BernoulliAbstract,
}

impl AttackerKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackerKind::BlindAvg => "blind-avg",
            AttackerKind::AdaptiveCluster => "adaptive-cluster",
            AttackerKind::BernoulliAbstract => "bernoulli-abstract",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum CalibrationConfig {
    Analytic,
    Empirical { n_null: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiMethod {
    Normal,
    Wilson,
}

/// How the attacker tunes its boost strength on held-out forgeries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TuningObjective {
    /// Distillation-style self-scoring: forgeries should score like the
    /// collected watermarked samples under the attacker's own estimated
    /// green set (the detection API is closed to the attacker, so this is
    /// the strongest key-blind signal available). Overshooting the target
    /// marks the forgery as an exaggeration, undershooting as unwatermarked.
    PseudoDetector,
    /// Genuine rate under the real detector. Deliberately exceeds the threat
    /// model; used to probe how close an optimally calibrated blind attacker
    /// gets to the theoretical ceiling.
    DetectorOracle,
}

/// Full experiment description; the config file (TOML or JSON) uses these
/// field names verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lm: LmConfig,
    #[serde(default)]
    pub surrogate_lm: Option<LmConfig>,
    pub ensemble: EnsembleConfig,
    #[serde(default = "ExperimentConfig::default_alpha_fw")]
    pub alpha_fw: f64,
    pub n_grid: Vec<usize>,
    pub n_forgeries: usize,
    #[serde(default = "ExperimentConfig::default_length")]
    pub length: usize,
    #[serde(default = "ExperimentConfig::default_prompt_len")]
    pub prompt_len: usize,
    pub attacker: AttackerKind,
    /// Adaptive attacker builds its clusters from ground-truth labels (the
    /// strongest attacker the experiments consider) instead of k-means.
    #[serde(default)]
    pub oracle_labels: bool,
    /// Per-key firing probability for the bernoulli-abstract attacker.
    #[serde(default)]
    pub bernoulli_alpha: Option<f64>,
    #[serde(default = "ExperimentConfig::default_bernoulli_beta")]
    pub bernoulli_beta: f64,
    #[serde(default = "ExperimentConfig::default_calibration")]
    pub calibration: CalibrationConfig,
    /// Context order of the stolen signal; defaults to min(h, 1) of the
    /// cell's scheme.
    #[serde(default)]
    pub attack_order: Option<usize>,
    #[serde(default = "ExperimentConfig::default_pseudo_count")]
    pub pseudo_count: f64,
    #[serde(default = "ExperimentConfig::default_strength_grid")]
    pub strength_grid: Vec<f64>,
    /// Held-out forgeries per strength-grid point.
    #[serde(default = "ExperimentConfig::default_n_tuning")]
    pub n_tuning: usize,
    #[serde(default = "ExperimentConfig::default_tuning_objective")]
    pub tuning_objective: TuningObjective,
    /// Null texts per seed used to measure family-wise FPR (and reused for
    /// empirical calibration).
    #[serde(default = "ExperimentConfig::default_n_null_eval")]
    pub n_null_eval: usize,
    #[serde(default = "ExperimentConfig::default_ci")]
    pub ci: CiMethod,
}

impl ExperimentConfig {
    fn default_alpha_fw() -> f64 {
        0.01
    }
    fn default_length() -> usize {
        256
    }
    fn default_prompt_len() -> usize {
        8
    }
    fn default_bernoulli_beta() -> f64 {
        1.0
    }
    fn default_calibration() -> CalibrationConfig {
        CalibrationConfig::Empirical { n_null: 1000 }
    }
    fn default_pseudo_count() -> f64 {
        DEFAULT_PSEUDO_COUNT
    }
    fn default_strength_grid() -> Vec<f64> {
        vec![1.0, 2.0, 4.0, 8.0]
    }
    fn default_n_tuning() -> usize {
        50
    }
    fn default_tuning_objective() -> TuningObjective {
        TuningObjective::PseudoDetector
    }
    fn default_n_null_eval() -> usize {
        1000
    }
    fn default_ci() -> CiMethod {
        CiMethod::Normal
    }

    /// Loads TOML or JSON depending on what parses.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_any(&text)
    }

    pub fn from_str_any(text: &str) -> Result<Self> {
        let trimmed = text.trim_start();
        if trimmed.starts_with('{') {
            Ok(serde_json::from_str(text)?)
        } else {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
        }
    }

    /// Number of result rows a run of this config produces.
    pub fn cell_count(&self) -> Result<usize> {
        Ok(self.groups()?.len() * self.n_grid.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(Error::Config("seeds must be distinct".into()));
            }
        }
        if !(self.alpha_fw > 0.0 && self.alpha_fw < 1.0) {
            return Err(Error::Config("alpha_fw must be in (0,1)".into()));
        }
        if self.n_forgeries == 0 {
            return Err(Error::Config("n_forgeries must be positive".into()));
        }
        if self.length == 0 {
            return Err(Error::Config("length must be positive".into()));
        }
        if self.n_grid.is_empty() {
            return Err(Error::Config("n_grid must not be empty".into()));
        }
        if self.ensemble.r_values.is_empty() {
            return Err(Error::Config("r_values must not be empty".into()));
        }
        if self.ensemble.r_values.iter().any(|&r| r == 0) {
            return Err(Error::Config("key counts must be at least 1".into()));
        }
        match self.attacker {
            AttackerKind::BernoulliAbstract => {
                let a = self.bernoulli_alpha.ok_or_else(|| {
                    Error::Config("bernoulli-abstract attacker requires bernoulli_alpha".into())
                })?;
                if !(a > 0.0 && a < 1.0) {
                    return Err(Error::Config("bernoulli_alpha must be in (0,1)".into()));
                }
            }
            _ => {
                if self.ensemble.variants.is_empty() {
                    return Err(Error::Config("ensemble.variants must not be empty".into()));
                }
                if self.n_grid.iter().any(|&n| n == 0) {
                    return Err(Error::Config(
                        "attacker sample counts must be positive".into(),
                    ));
                }
                if self.strength_grid.is_empty() {
                    return Err(Error::Config("strength_grid must not be empty".into()));
                }
                if self.attacker == AttackerKind::AdaptiveCluster
                    && self.ensemble.r_values.iter().any(|&r| r < 2)
                {
                    return Err(Error::Config(
                        "adaptive clustering requires r >= 2 in every cell".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn gen_params(&self) -> GenParams {
        GenParams {
            length: self.length,
            prompt_len: self.prompt_len,
            temperature: 1.0,
        }
    }

    /// Cell groups in deterministic order: variants (or one mixed/abstract
    /// label) x key counts, each carrying the full N grid.
    fn groups(&self) -> Result<Vec<GroupSpec>> {
        let mut groups = Vec::new();
        let labels: Vec<(String, Vec<SchemeConfig>)> = match self.attacker {
            AttackerKind::BernoulliAbstract => vec![("abstract".to_string(), Vec::new())],
            _ if self.ensemble.mixed => {
                let schemes = self
                    .ensemble
                    .variants
                    .iter()
                    .map(|&v| SchemeConfig::new(v, self.ensemble.gamma, self.ensemble.delta))
                    .collect::<Result<Vec<_>>>()?;
                vec![("mixed".to_string(), schemes)]
            }
            _ => self
                .ensemble
                .variants
                .iter()
                .map(|&v| {
                    Ok((
                        v.name().to_string(),
                        vec![SchemeConfig::new(v, self.ensemble.gamma, self.ensemble.delta)?],
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
        };
        for (label, schemes) in labels {
            for &r in &self.ensemble.r_values {
                groups.push(GroupSpec {
                    label: label.clone(),
                    schemes: schemes.clone(),
                    r,
                    ns: self.n_grid.clone(),
                });
            }
        }
        Ok(groups)
    }
}

#[derive(Debug, Clone)]
struct GroupSpec {
    label: String,
    schemes: Vec<SchemeConfig>,
    r: usize,
    ns: Vec<usize>,
}

impl GroupSpec {
    fn tag(&self) -> u64 {
        let mut h = 0xce11_0000u64;
        for b in self.label.bytes() {
            h = mix64(h ^ u64::from(b));
        }
        mix64(h ^ mix64(self.r as u64))
    }
}

/// Provider-side generation endpoint with a query counter; the attacker's
/// collection phase is budgeted against it.
pub struct Provider<'a> {
    spec: &'a LmSpec,
    ensemble: &'a Ensemble,
    params: GenParams,
    queries: AtomicU64,
}

impl<'a> Provider<'a> {
    pub fn new(spec: &'a LmSpec, ensemble: &'a Ensemble, params: GenParams) -> Self {
        Self {
            spec,
            ensemble,
            params,
            queries: AtomicU64::new(0),
        }
    }

    /// Answers one query with a watermarked sample. The chosen member index
    /// is returned for harness bookkeeping only.
    pub fn respond(&self, phase_seed: u64, index: u64) -> Result<(TokenSequence, usize)> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(phase_seed, index));
        let prompt = random_prompt(self.spec.vocab(), self.params.prompt_len, &mut rng);
        mk_generate(
            self.spec,
            self.ensemble,
            &prompt,
            self.params.length,
            self.params.temperature,
            &mut rng,
        )
    }

    pub fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}

/// One row of the sweep: rates with binomial confidence intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameResult {
    pub variant: String,
    pub r: usize,
    pub n: usize,
    pub attacker: String,
    pub forgery_wins: u64,
    pub forgery_trials: u64,
    pub forgery_success: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Fraction of genuine provider texts that failed the Genuine decision.
    pub fnr: f64,
    /// Fraction of null texts with at least one indicator firing.
    pub fpr_fw: f64,
    pub seed_count: usize,
    /// Measured per-key true-positive rate on the generating key.
    pub beta: Option<f64>,
    /// Mean calibrated threshold across seeds.
    pub tau_mean: Option<f64>,
    /// Mean best-permutation clustering accuracy (adaptive attacker with
    /// k-means clusters only).
    pub clustering_accuracy: Option<f64>,
    /// Strength-grid choice per seed after held-out tuning.
    pub tuned_strengths: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
struct UtilityCounts {
    fnr_misses: u64,
    fnr_trials: u64,
    beta_hits: u64,
    fpr_hits: u64,
    fpr_trials: u64,
}

struct SeedContext {
    ensemble: Ensemble,
    calib: Calibration,
    utility: UtilityCounts,
}

/// Binomial confidence interval at 95%.
fn binomial_ci(wins: u64, trials: u64, method: CiMethod) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 0.0);
    }
    let z = 1.959_963_984_540_054; // Phi^-1(0.975)
    let n = trials as f64;
    let p = wins as f64 / n;
    match method {
        CiMethod::Normal => {
            let half = z * (p * (1.0 - p) / n).sqrt();
            ((p - half).max(0.0), (p + half).min(1.0))
        }
        CiMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / n;
            let center = (p + z2 / (2.0 * n)) / denom;
            let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
            ((center - half).max(0.0), (center + half).min(1.0))
        }
    }
}

/// Runs the full sweep described by the config.
pub fn run(config: &ExperimentConfig) -> Result<Vec<GameResult>> {
    config.validate()?;
    let groups = config.groups()?;
    if config.attacker == AttackerKind::BernoulliAbstract {
        return run_abstract(config, &groups);
    }

    let spec = config.lm.build()?;
    let base = match &config.surrogate_lm {
        Some(cfg) => cfg.build()?,
        None => spec.clone(),
    };
    let params = config.gen_params();

    // One null corpus per seed, shared by every cell: used for empirical
    // calibration and the family-wise FPR measurement.
    let n_null_needed = match config.calibration {
        CalibrationConfig::Empirical { n_null } => n_null.max(config.n_null_eval),
        CalibrationConfig::Analytic => config.n_null_eval,
    };
    let null_corpora: Vec<Vec<TokenSequence>> = config
        .seeds
        .iter()
        .map(|&seed| {
            sample_null_corpus(&spec, n_null_needed, &params, mix64(seed ^ SALT_NULL))
        })
        .collect::<Result<_>>()?;

    let mut results = Vec::new();
    for group in &groups {
        let contexts: Vec<SeedContext> = config
            .seeds
            .iter()
            .zip(&null_corpora)
            .map(|(&seed, nulls)| seed_context(config, group, &spec, seed, nulls))
            .collect::<Result<_>>()?;

        for &n in &group.ns {
            let mut wins = 0u64;
            let mut trials = 0u64;
            let mut strengths = Vec::new();
            let mut accuracies = Vec::new();
            for (&seed, ctx) in config.seeds.iter().zip(&contexts) {
                let outcome = run_attack(config, group, &spec, &base, ctx, seed, n)?;
                wins += outcome.wins;
                trials += outcome.trials;
                strengths.push(outcome.strength);
                if let Some(a) = outcome.clustering_accuracy {
                    accuracies.push(a);
                }
            }
            results.push(assemble_result(
                config, group, n, wins, trials, &contexts, strengths, &accuracies,
            ));
        }
    }
    Ok(results)
}

fn assemble_result(
    config: &ExperimentConfig,
    group: &GroupSpec,
    n: usize,
    wins: u64,
    trials: u64,
    contexts: &[SeedContext],
    tuned_strengths: Vec<f64>,
    accuracies: &[f64],
) -> GameResult {
    let utility = contexts.iter().fold(UtilityCounts::default(), |mut acc, c| {
        acc.fnr_misses += c.utility.fnr_misses;
        acc.fnr_trials += c.utility.fnr_trials;
        acc.beta_hits += c.utility.beta_hits;
        acc.fpr_hits += c.utility.fpr_hits;
        acc.fpr_trials += c.utility.fpr_trials;
        acc
    });
    let success = if trials > 0 { wins as f64 / trials as f64 } else { 0.0 };
    let (ci_lo, ci_hi) = binomial_ci(wins, trials, config.ci);
    let tau_mean = if contexts.is_empty() {
        None
    } else {
        Some(contexts.iter().map(|c| c.calib.tau).sum::<f64>() / contexts.len() as f64)
    };
    GameResult {
        variant: group.label.clone(),
        r: group.r,
        n,
        attacker: config.attacker.name().to_string(),
        forgery_wins: wins,
        forgery_trials: trials,
        forgery_success: success,
        ci_lo,
        ci_hi,
        fnr: if utility.fnr_trials > 0 {
            utility.fnr_misses as f64 / utility.fnr_trials as f64
        } else {
            0.0
        },
        fpr_fw: if utility.fpr_trials > 0 {
            utility.fpr_hits as f64 / utility.fpr_trials as f64
        } else {
            0.0
        },
        seed_count: config.seeds.len(),
        beta: if utility.fnr_trials > 0 {
            Some(utility.beta_hits as f64 / utility.fnr_trials as f64)
        } else {
            None
        },
        tau_mean,
        clustering_accuracy: if accuracies.is_empty() {
            None
        } else {
            Some(accuracies.iter().sum::<f64>() / accuracies.len() as f64)
        },
        tuned_strengths,
    }
}

/// Builds the per-seed ensemble, calibration, and provider-utility counts.
fn seed_context(
    config: &ExperimentConfig,
    group: &GroupSpec,
    spec: &LmSpec,
    seed: u64,
    nulls: &[TokenSequence],
) -> Result<SeedContext> {
    let tag = group.tag();
    let mut key_rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ SALT_KEYS ^ tag));
    let keys = KeySet::generate(group.r, &mut key_rng)?;
    let ensemble = Ensemble::mixed(&group.schemes, &keys)?;

    let calib = match config.calibration {
        CalibrationConfig::Analytic => calibrate_analytic(config.alpha_fw, group.r)?,
        CalibrationConfig::Empirical { n_null } => {
            calibrate_from_null_texts(&ensemble, config.alpha_fw, &nulls[..n_null.min(nulls.len())])?
        }
    };

    // Provider utility: round-trip FNR and per-key TPR.
    let params = config.gen_params();
    let fnr_seed = mix64(seed ^ SALT_FNR ^ tag);
    let provider = Provider::new(spec, &ensemble, params);
    let round_trips = exec::map_indexed(config.n_forgeries, |i| provider.respond(fnr_seed, i as u64));
    let mut utility = UtilityCounts::default();
    for rt in round_trips {
        let (text, chosen) = rt?;
        let report = mk_detect(&ensemble, &calib, &text)?;
        utility.fnr_trials += 1;
        if report.decision != Decision::Genuine(chosen) {
            utility.fnr_misses += 1;
        }
        if report.indicators[chosen] {
            utility.beta_hits += 1;
        }
    }

    // Family-wise FPR on the shared null corpus.
    let eval = &nulls[..config.n_null_eval.min(nulls.len())];
    for text in eval {
        let report = mk_detect(&ensemble, &calib, text)?;
        utility.fpr_trials += 1;
        if report.decision != Decision::Unwatermarked {
            utility.fpr_hits += 1;
        }
    }

    Ok(SeedContext {
        ensemble,
        calib,
        utility,
    })
}

struct AttackOutcome {
    wins: u64,
    trials: u64,
    strength: f64,
    clustering_accuracy: Option<f64>,
}

/// Collects N samples, builds the attacker's signal, tunes strength on a
/// held-out batch, and submits the main forgery batch.
fn run_attack(
    config: &ExperimentConfig,
    group: &GroupSpec,
    spec: &LmSpec,
    base: &LmSpec,
    ctx: &SeedContext,
    seed: u64,
    n: usize,
) -> Result<AttackOutcome> {
    let tag = group.tag();
    let params = config.gen_params();

    // Query phase: exactly N provider generations, counted.
    let provider = Provider::new(spec, &ctx.ensemble, params);
    let train_seed = mix64(seed ^ SALT_TRAIN ^ tag);
    let collected = exec::map_indexed(n, |i| provider.respond(train_seed, i as u64))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    assert_eq!(
        provider.queries(),
        n as u64,
        "attacker query budget accounting is broken"
    );
    let (samples, true_members): (Vec<TokenSequence>, Vec<usize>) =
        collected.into_iter().unzip();

    let order = config.attack_order.unwrap_or_else(|| {
        group
            .schemes
            .iter()
            .map(|s| s.h.min(1))
            .max()
            .unwrap_or(0)
    });

    let mut clustering_accuracy = None;
    let (signal, cluster_subset): (StolenSignal, Option<Vec<TokenSequence>>) = match config
        .attacker
    {
        AttackerKind::BlindAvg => (steal(&samples, base, order, config.pseudo_count)?, None),
        AttackerKind::AdaptiveCluster => {
            let assignment = if config.oracle_labels {
                ClusterAssignment::from_oracle(true_members.clone(), group.r)?
            } else {
                // True member indices are passed only as the accuracy oracle.
                cluster_by_key(
                    &samples,
                    spec.vocab(),
                    group.r,
                    ClusterFeature::TokenFrequency,
                    25,
                    mix64(seed ^ SALT_CLUSTER ^ tag),
                    Some(&true_members),
                )?
            };
            clustering_accuracy = assignment.accuracy;
            let subset: Vec<TokenSequence> = assignment
                .largest_cluster()
                .into_iter()
                .map(|i| samples[i].clone())
                .collect();
            (
                steal(&subset, base, order, config.pseudo_count)?,
                Some(subset),
            )
        }
        AttackerKind::BernoulliAbstract => unreachable!("handled by run_abstract"),
    };
    let training_samples: &[TokenSequence] = cluster_subset.as_deref().unwrap_or(&samples);

    // Held-out strength tuning; ties break to the lower strength.
    let strength = if config.strength_grid.len() == 1 {
        config.strength_grid[0]
    } else {
        let tune_seed = mix64(seed ^ SALT_TUNE);
        match config.tuning_objective {
            TuningObjective::PseudoDetector => {
                let gamma = config.ensemble.gamma;
                let green = pseudo_green_set(&signal, gamma);
                let mean_z = |texts: &[TokenSequence]| {
                    texts
                        .iter()
                        .map(|t| pseudo_detection_z(t, &green, gamma))
                        .sum::<f64>()
                        / texts.len().max(1) as f64
                };
                // Distillation target: how watermarked the provider's own
                // outputs look to the attacker.
                let target = mean_z(training_samples);
                let mut best = (config.strength_grid[0], f64::INFINITY);
                for (si, &s) in config.strength_grid.iter().enumerate() {
                    let texts = forge_batch(
                        config,
                        base,
                        &signal,
                        s,
                        config.n_tuning,
                        tune_seed,
                        (si * config.n_tuning) as u64,
                    )?;
                    let gap = (mean_z(&texts) - target).abs();
                    if gap < best.1 {
                        best = (s, gap);
                    }
                }
                best.0
            }
            TuningObjective::DetectorOracle => {
                let mut best = (config.strength_grid[0], 0u64);
                for (si, &s) in config.strength_grid.iter().enumerate() {
                    let texts = forge_batch(
                        config,
                        base,
                        &signal,
                        s,
                        config.n_tuning,
                        tune_seed,
                        (si * config.n_tuning) as u64,
                    )?;
                    let wins = count_genuine(ctx, &texts)?;
                    if wins > best.1 {
                        best = (s, wins);
                    }
                }
                best.0
            }
        }
    };

    let forge_seed = mix64(seed ^ SALT_FORGE);
    let forgeries = forge_batch(
        config,
        base,
        &signal,
        strength,
        config.n_forgeries,
        forge_seed,
        0,
    )?;
    let wins = count_genuine(ctx, &forgeries)?;
    Ok(AttackOutcome {
        wins,
        trials: config.n_forgeries as u64,
        strength,
        clustering_accuracy,
    })
}

fn forge_batch(
    config: &ExperimentConfig,
    base: &LmSpec,
    signal: &StolenSignal,
    strength: f64,
    count: usize,
    phase_seed: u64,
    index_offset: u64,
) -> Result<Vec<TokenSequence>> {
    exec::map_indexed(count, |i| {
        let mut rng =
            ChaCha8Rng::seed_from_u64(stream_seed(phase_seed, index_offset + i as u64));
        let prompt = random_prompt(base.vocab(), config.prompt_len, &mut rng);
        forge(signal, base, &prompt, config.length, strength, &mut rng)
    })
    .into_iter()
    .collect()
}

fn count_genuine(ctx: &SeedContext, texts: &[TokenSequence]) -> Result<u64> {
    let verdicts = exec::map_indexed(texts.len(), |i| {
        mk_detect(&ctx.ensemble, &ctx.calib, &texts[i]).map(|r| r.decision.is_genuine())
    });
    let mut wins = 0u64;
    for v in verdicts {
        if v? {
            wins += 1;
        }
    }
    Ok(wins)
}

/// Bernoulli-abstract game: indicators are drawn directly from the detector
/// model, no text machinery involved.
fn run_abstract(config: &ExperimentConfig, groups: &[GroupSpec]) -> Result<Vec<GameResult>> {
    let alpha = config.bernoulli_alpha.expect("validated");
    let mut results = Vec::new();
    for group in groups {
        let model = DetectorModel::new(group.r, alpha, config.bernoulli_beta)?;
        for &n in &group.ns {
            let mut wins = 0u64;
            let mut trials = 0u64;
            let mut fnr_misses = 0u64;
            let mut fpr_hits = 0u64;
            let mut beta_hits = 0u64;
            for &seed in &config.seeds {
                let sim_seed = mix64(seed ^ SALT_SIM ^ group.tag() ^ mix64(n as u64));
                let null = simulate_detector_model(
                    &model,
                    TrialCondition::Null,
                    config.n_forgeries as u64,
                    sim_seed,
                )?;
                wins += null.histogram[1];
                trials += null.trials;
                fpr_hits += null.trials - null.histogram[0];
                let wm = simulate_detector_model(
                    &model,
                    TrialCondition::Watermarked(0),
                    config.n_forgeries as u64,
                    mix64(sim_seed ^ 0x1),
                )?;
                fnr_misses += wm.trials - wm.histogram[1];
                beta_hits += (wm.exactly_one_rate() * wm.trials as f64).round() as u64;
            }
            let success = wins as f64 / trials as f64;
            let (ci_lo, ci_hi) = binomial_ci(wins, trials, config.ci);
            results.push(GameResult {
                variant: group.label.clone(),
                r: group.r,
                n,
                attacker: config.attacker.name().to_string(),
                forgery_wins: wins,
                forgery_trials: trials,
                forgery_success: success,
                ci_lo,
                ci_hi,
                fnr: fnr_misses as f64 / trials as f64,
                fpr_fw: fpr_hits as f64 / trials as f64,
                seed_count: config.seeds.len(),
                beta: Some(beta_hits as f64 / trials as f64),
                tau_mean: None,
                clustering_accuracy: None,
                tuned_strengths: Vec::new(),
            });
        }
    }
    Ok(results)
}
