//! `mkwm` — multi-key watermarking workflows from the command line.
//!
//! Subcommands: `keygen`, `generate`, `detect`, `calibrate`, `attack`,
//! `simulate`, `theory`, `report`. Data goes to stdout; diagnostics and the
//! resolved configuration go to stderr. Exit codes: 0 success, 1 data
//! error, 2 usage error.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mkwm_core::corpus;
use mkwm_core::game::{ExperimentConfig, LmConfig, LmKind};
use mkwm_core::lm::{random_prompt, GenParams, LmSpec};
use mkwm_core::multikey::{
    calibrate_analytic, calibrate_empirical, mk_detect, mk_generate, Calibration, KeyFile, KeySet,
};
use mkwm_core::report::{self, Manifest};
use mkwm_core::scheme::{SchemeConfig, Variant, DEFAULT_DELTA, DEFAULT_GAMMA};
use mkwm_core::theory;
use mkwm_core::{attack, exec};

#[derive(Parser)]
#[command(name = "mkwm", version, about = "Multi-key content watermarking harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a secret key file.
    Keygen(KeygenArgs),
    /// Generate watermarked (or plain) token sequences.
    Generate(GenerateArgs),
    /// Run multi-key detection over a corpus, one JSON report per line.
    Detect(DetectArgs),
    /// Compute a detection threshold for a key file.
    Calibrate(CalibrateArgs),
    /// Steal a watermark signal from samples and emit forgeries.
    Attack(AttackArgs),
    /// Run a security-game sweep from a config file.
    Simulate(SimulateArgs),
    /// Evaluate closed-form quantities.
    Theory(TheoryArgs),
    /// Re-render result artifacts from a saved manifest.
    Report(ReportArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Soft,
    Hard,
    Selfhash,
    Unigram,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Variant {
        match v {
            VariantArg::Soft => Variant::Soft,
            VariantArg::Hard => Variant::Hard,
            VariantArg::Selfhash => Variant::SelfHash,
            VariantArg::Unigram => Variant::Unigram,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LmKindArg {
    HashSynthetic,
    NgramCounts,
}

#[derive(Args)]
struct LmArgs {
    #[arg(long, value_enum, default_value = "hash-synthetic")]
    lm_kind: LmKindArg,
    #[arg(long, default_value_t = 1024)]
    vocab_size: usize,
    #[arg(long, default_value_t = 1.0)]
    entropy_scale: f64,
    #[arg(long, default_value_t = 2)]
    lm_order: usize,
    #[arg(long, default_value_t = 7)]
    lm_seed: u64,
    /// Training corpus for the ngram-counts kind.
    #[arg(long)]
    lm_corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    smoothing: f64,
}

impl LmArgs {
    fn config(&self) -> LmConfig {
        LmConfig {
            kind: match self.lm_kind {
                LmKindArg::HashSynthetic => LmKind::HashSynthetic,
                LmKindArg::NgramCounts => LmKind::NgramCounts,
            },
            vocab_size: self.vocab_size,
            entropy_scale: self.entropy_scale,
            order: self.lm_order,
            lm_seed: self.lm_seed,
            counts_source: self.lm_corpus.clone(),
            smoothing: self.smoothing,
        }
    }

    fn build(&self) -> Result<LmSpec, CliError> {
        Ok(self.config().build()?)
    }
}

#[derive(Args)]
struct KeygenArgs {
    /// Number of keys.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    r: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "soft")]
    scheme: VariantArg,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f64,
    #[arg(long, default_value_t = DEFAULT_DELTA)]
    delta: f64,
    #[arg(long)]
    out: PathBuf,
    /// Overwrite an existing key file.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct GenerateArgs {
    /// Key file; omit together with --unwatermarked for plain sampling.
    #[arg(long, required_unless_present = "unwatermarked", conflicts_with = "unwatermarked")]
    keys: Option<PathBuf>,
    #[arg(long)]
    unwatermarked: bool,
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON sidecar labeling each line with its generating member.
    #[arg(long)]
    sidecar: Option<PathBuf>,
    #[command(flatten)]
    lm: LmArgs,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    alpha_fw: f64,
    /// Override the calibrated threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    keys: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    alpha_fw: f64,
    /// Estimate tau from generated null texts instead of the normal
    /// approximation.
    #[arg(long)]
    empirical: bool,
    #[arg(long, default_value_t = 2000)]
    n_null: usize,
    #[arg(long, default_value_t = 256)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    lm: LmArgs,
}

#[derive(Args)]
struct AttackArgs {
    /// Collected watermarked samples (corpus format).
    #[arg(long)]
    input: PathBuf,
    /// Context order of the stolen signal.
    #[arg(long, default_value_t = 0)]
    order: usize,
    #[arg(long, default_value_t = 4.0)]
    strength: f64,
    #[arg(long, default_value_t = 0.5)]
    pseudo_count: f64,
    /// Number of forgeries to emit.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 256)]
    length: usize,
    #[arg(long, default_value_t = 8)]
    prompt_len: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Save the stolen signal as JSON.
    #[arg(long)]
    signal_out: Option<PathBuf>,
    #[command(flatten)]
    lm: LmArgs,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Also emit SVG line charts.
    #[arg(long)]
    svg: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TheoryFn {
    BlindBound,
    BlindSuccess,
    FnrBound,
    Sidak,
}

#[derive(Args)]
struct TheoryArgs {
    #[arg(long = "fn", value_enum)]
    func: TheoryFn,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    alpha_fw: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    svg: bool,
}

enum CliError {
    Usage(String),
    Data(String),
}

impl From<mkwm_core::Error> for CliError {
    fn from(e: mkwm_core::Error) -> Self {
        let mut msg = e.to_string();
        let mut source = std::error::Error::source(&e);
        while let Some(s) = source {
            msg.push_str(": ");
            msg.push_str(&s.to_string());
            source = s.source();
        }
        CliError::Data(msg)
    }
}

fn main() {
    if let Ok(v) = std::env::var("MKWM_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                exec::configure_threads(n);
            }
            _ => {
                eprintln!("warning: ignoring invalid MKWM_THREADS value '{v}'");
            }
        }
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}

fn echo_config(cmd: &str, fields: serde_json::Value) {
    eprintln!("{cmd} config: {fields}");
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Keygen(args) => keygen(args),
        Command::Generate(args) => generate(args),
        Command::Detect(args) => detect(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Attack(args) => attack_cmd(args),
        Command::Simulate(args) => simulate(args),
        Command::Theory(args) => theory_cmd(args),
        Command::Report(args) => report_cmd(args),
    }
}

fn keygen(args: KeygenArgs) -> Result<(), CliError> {
    let scheme = SchemeConfig::new(args.scheme.into(), args.gamma, args.delta)?;
    echo_config(
        "keygen",
        serde_json::json!({
            "r": args.r, "seed": args.seed, "scheme": scheme, "out": args.out,
        }),
    );
    if args.out.exists() && !args.force {
        return Err(CliError::Data(format!(
            "refusing to overwrite {} without --force",
            args.out.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let keys = KeySet::generate(args.r as usize, &mut rng)?;
    let file = KeyFile {
        keys: keys.keys().to_vec(),
        scheme,
    };
    file.save(&args.out)?;
    eprintln!("wrote {} keys to {}", args.r, args.out.display());
    Ok(())
}

fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let spec = args.lm.build()?;
    let params = GenParams {
        length: args.length,
        prompt_len: args.prompt_len,
        temperature: 1.0,
    };
    echo_config(
        "generate",
        serde_json::json!({
            "keys": args.keys, "unwatermarked": args.unwatermarked, "n": args.n,
            "length": args.length, "prompt_len": args.prompt_len, "seed": args.seed,
            "lm": args.lm.config(), "out": args.out,
        }),
    );
    if args.unwatermarked {
        let texts = mkwm_core::multikey::sample_null_corpus(&spec, args.n, &params, args.seed)?;
        corpus::write_corpus(&args.out, &texts)?;
        if args.sidecar.is_some() {
            return Err(CliError::Usage(
                "--sidecar requires watermarked generation".into(),
            ));
        }
    } else {
        let key_file = KeyFile::load(args.keys.as_ref().expect("clap enforces presence"))?;
        let ensemble = key_file.ensemble()?;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let mut texts = Vec::with_capacity(args.n);
        let mut entries = Vec::with_capacity(args.n);
        for _ in 0..args.n {
            let prompt = random_prompt(spec.vocab(), args.prompt_len, &mut rng);
            let (text, idx) =
                mk_generate(&spec, &ensemble, &prompt, args.length, 1.0, &mut rng)?;
            entries.push(corpus::SidecarEntry {
                key_index: idx,
                scheme: key_file.scheme.variant,
                gamma: key_file.scheme.gamma,
                delta: key_file.scheme.delta,
            });
            texts.push(text);
        }
        corpus::write_corpus(&args.out, &texts)?;
        if let Some(sidecar) = &args.sidecar {
            corpus::write_sidecar(sidecar, &entries)?;
        }
    }
    eprintln!("wrote {} sequences to {}", args.n, args.out.display());
    Ok(())
}

fn detect(args: DetectArgs) -> Result<(), CliError> {
    let key_file = KeyFile::load(&args.keys)?;
    let ensemble = key_file.ensemble()?;
    let calib = match args.tau {
        Some(tau) => {
            let mut c = calibrate_analytic(args.alpha_fw, ensemble.len())?;
            c.tau = tau;
            c
        }
        None => calibrate_analytic(args.alpha_fw, ensemble.len())?,
    };
    echo_config(
        "detect",
        serde_json::json!({
            "keys": args.keys, "alpha_fw": args.alpha_fw, "tau": calib.tau,
            "input": args.input,
        }),
    );
    let texts = corpus::read_corpus(&args.input)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for text in &texts {
        let report = mk_detect(&ensemble, &calib, text)?;
        use std::io::Write;
        writeln!(out, "{}", serde_json::to_string(&report).map_err(mkwm_core::Error::from)?)
            .map_err(mkwm_core::Error::from)?;
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs) -> Result<(), CliError> {
    let key_file = KeyFile::load(&args.keys)?;
    let ensemble = key_file.ensemble()?;
    echo_config(
        "calibrate",
        serde_json::json!({
            "keys": args.keys, "alpha_fw": args.alpha_fw, "empirical": args.empirical,
            "n_null": args.n_null, "seed": args.seed,
        }),
    );
    let calib: Calibration = if args.empirical {
        if args.n_null < 1000 {
            eprintln!(
                "warning: n_null = {} is small; the tail quantile will be noisy",
                args.n_null
            );
        }
        let spec = args.lm.build()?;
        let params = GenParams {
            length: args.length,
            prompt_len: args.prompt_len,
            temperature: 1.0,
        };
        calibrate_empirical(&ensemble, &spec, args.alpha_fw, args.n_null, &params, args.seed)?
    } else {
        calibrate_analytic(args.alpha_fw, ensemble.len())?
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&calib).map_err(mkwm_core::Error::from)?
    );
    Ok(())
}

fn attack_cmd(args: AttackArgs) -> Result<(), CliError> {
    let base = args.lm.build()?;
    echo_config(
        "attack",
        serde_json::json!({
            "input": args.input, "order": args.order, "strength": args.strength,
            "n": args.n, "length": args.length, "seed": args.seed,
            "lm": args.lm.config(), "out": args.out,
        }),
    );
    let samples = corpus::read_corpus(&args.input)?;
    let signal = attack::steal(&samples, &base, args.order, args.pseudo_count)?;
    if let Some(path) = &args.signal_out {
        std::fs::write(
            path,
            serde_json::to_string(&signal).map_err(mkwm_core::Error::from)?,
        )
        .map_err(mkwm_core::Error::from)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut forgeries = Vec::with_capacity(args.n);
    for _ in 0..args.n {
        let prompt = random_prompt(base.vocab(), args.prompt_len, &mut rng);
        forgeries.push(attack::forge(
            &signal,
            &base,
            &prompt,
            args.length,
            args.strength,
            &mut rng,
        )?);
    }
    corpus::write_corpus(&args.out, &forgeries)?;
    eprintln!("wrote {} forgeries to {}", args.n, args.out.display());
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    if !args.config.exists() {
        return Err(CliError::Usage(format!(
            "config file {} does not exist",
            args.config.display()
        )));
    }
    let config = ExperimentConfig::from_path(&args.config)?;
    echo_config(
        "simulate",
        serde_json::json!({
            "config": args.config, "out_dir": args.out_dir, "svg": args.svg,
            "resolved": &config,
        }),
    );
    let results = mkwm_core::game::run(&config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(mkwm_core::Error::from)?;
    let csv_path = args.out_dir.join("results.csv");
    report::write_csv(&csv_path, &results)?;
    let manifest = Manifest::new(&config, results.clone())?;
    manifest.save(&args.out_dir.join("manifest.json"))?;
    if args.svg {
        write_charts(&args.out_dir, &results)?;
    }
    eprintln!(
        "wrote {} cells to {} (config hash {})",
        results.len(),
        csv_path.display(),
        manifest.config_hash
    );
    Ok(())
}

fn write_charts(dir: &std::path::Path, results: &[mkwm_core::game::GameResult]) -> Result<(), CliError> {
    std::fs::write(dir.join("success_vs_r.svg"), report::svg_success_vs_r(results))
        .map_err(mkwm_core::Error::from)?;
    std::fs::write(dir.join("success_vs_n.svg"), report::svg_success_vs_n(results))
        .map_err(mkwm_core::Error::from)?;
    Ok(())
}

fn theory_cmd(args: TheoryArgs) -> Result<(), CliError> {
    let need = |opt: Option<f64>, name: &str| {
        opt.ok_or_else(|| CliError::Usage(format!("this function requires --{name}")))
    };
    let need_r = || {
        args.r
            .ok_or_else(|| CliError::Usage("this function requires --r".into()))
    };
    let value = match args.func {
        TheoryFn::BlindBound => theory::blind_bound(need_r()?)?,
        TheoryFn::BlindSuccess => theory::blind_success(need_r()?, need(args.alpha, "alpha")?)?,
        TheoryFn::FnrBound => theory::fnr_bound(need(args.tau, "tau")?, need_r()?)?,
        TheoryFn::Sidak => {
            mkwm_core::multikey::sidak_alpha(need(args.alpha_fw, "alpha-fw")?, need_r()?)?
        }
    };
    println!("{value}");
    Ok(())
}

fn report_cmd(args: ReportArgs) -> Result<(), CliError> {
    let manifest = Manifest::load(&args.manifest)?;
    echo_config(
        "report",
        serde_json::json!({
            "manifest": args.manifest, "out_dir": args.out_dir,
            "config_hash": manifest.config_hash,
        }),
    );
    std::fs::create_dir_all(&args.out_dir).map_err(mkwm_core::Error::from)?;
    report::write_csv(&args.out_dir.join("results.csv"), &manifest.results)?;
    if args.svg {
        write_charts(&args.out_dir, &manifest.results)?;
    }
    Ok(())
}
