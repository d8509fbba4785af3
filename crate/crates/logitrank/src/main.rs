//! Command-line driver: model generation, learning runs, sampling,
//! total-variation evaluation, rank probes, and the boolean-function demo.
//!
//! Every output file embeds the fully resolved run configuration: JSON
//! outputs carry it as a `run_config` field, CSV and line outputs as a
//! leading `# config: {...}` comment above the header. Re-running with
//! `--config <output file>` extracts that configuration and reproduces the
//! output bit-exactly.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 learner epoch
//! budget exhausted, 4 internal numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use logitrank::eval::{
    build_logit_matrix, estimate_eps_avg, rank_profile, tv_exact, write_rank_profile_csv,
    EvalError,
};
use logitrank::isan::{isan_from_sparse_fn, IsanError, IsanModel, SparseBoolFn};
use logitrank::km::{km_learn, sparse_fn_oracle, KmError};
use logitrank::learner::{
    default_params, learn, write_run_log_csv, LearnOutcome, LearnedModel, LearnerConfig,
    LearnerError,
};
use logitrank::lp::LpError;
use logitrank::oracle::{
    temperature_oracle, EmpiricalBackend, ExactIsan, NoiseMode, NoiseSpec, NoisyBackend, Oracle,
    OracleError,
};
use logitrank::prob::{csv_f64, seq_from_rank, ProbError, Seq};
use logitrank::sampler::{SampleSession, SamplerError, ENUM_GUARD};
use logitrank::spanner::SpannerError;

#[derive(Parser, Debug)]
#[command(name = "logitrank", version, about = "Query learning of low logit rank sequence models")]
struct Cli {
    /// RNG seed; recorded in every output
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON run config; replaces subcommand flags. Accepts a bare config or
    /// any output file that embeds one.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file path
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress log output
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug, Clone)]
enum Command {
    /// Generate a model file
    GenModel(GenModelCfg),
    /// Learn a model through a logit oracle
    Learn(LearnCfg),
    /// Draw sequences from a learned model
    Sample(SampleCfg),
    /// Exact total variation between a model and a learned model
    EvalTv(EvalTvCfg),
    /// Low-rank approximation error of logit matrices
    RankProbe(RankProbeCfg),
    /// Learn a sparse boolean function from value queries
    KmDemo(KmDemoCfg),
}

/// The resolved parameters of one run, embedded in every output.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunConfig {
    seed: u64,
    #[serde(flatten)]
    command: CommandConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
enum CommandConfig {
    GenModel(GenModelCfg),
    Learn(LearnCfg),
    Sample(SampleCfg),
    EvalTv(EvalTvCfg),
    RankProbe(RankProbeCfg),
    KmDemo(KmDemoCfg),
}

impl Command {
    fn into_config(self) -> CommandConfig {
        match self {
            Command::GenModel(c) => CommandConfig::GenModel(c),
            Command::Learn(c) => CommandConfig::Learn(c),
            Command::Sample(c) => CommandConfig::Sample(c),
            Command::EvalTv(c) => CommandConfig::EvalTv(c),
            Command::RankProbe(c) => CommandConfig::RankProbe(c),
            Command::KmDemo(c) => CommandConfig::KmDemo(c),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Command::GenModel(_) => "gen-model",
            Command::Learn(_) => "learn",
            Command::Sample(_) => "sample",
            Command::EvalTv(_) => "eval-tv",
            Command::RankProbe(_) => "rank-probe",
            Command::KmDemo(_) => "km-demo",
        }
    }
}

impl CommandConfig {
    fn kind(&self) -> &'static str {
        match self {
            CommandConfig::GenModel(_) => "gen-model",
            CommandConfig::Learn(_) => "learn",
            CommandConfig::Sample(_) => "sample",
            CommandConfig::EvalTv(_) => "eval-tv",
            CommandConfig::RankProbe(_) => "rank-probe",
            CommandConfig::KmDemo(_) => "km-demo",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct GenModelCfg {
    /// Generator: random | product | sparse-fn
    #[arg(long, default_value = "random")]
    kind: String,
    /// Sequence length
    #[arg(long, default_value_t = 5)]
    t: usize,
    /// Alphabet size
    #[arg(long, default_value_t = 3)]
    sigma: usize,
    /// State dimension
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Parameter range half-width
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// sparse-fn: input arity
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// sparse-fn: term list like "1,2:0.5;3:0.5"
    #[arg(long = "fn", default_value = "")]
    #[serde(rename = "fn")]
    fn_spec: String,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct LearnCfg {
    /// Model file from gen-model
    #[arg(long)]
    model: Option<PathBuf>,
    /// Oracle: exact | noisy | empirical | temperature
    #[arg(long, default_value = "exact")]
    oracle: String,
    /// noisy: worst-case logit perturbation
    #[arg(long, default_value_t = 1e-3)]
    noise_eps: f64,
    /// noisy: adversarial | uniform
    #[arg(long, default_value = "adversarial")]
    noise_mode: String,
    /// empirical: logit magnitude bound
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// empirical: per-entry accuracy
    #[arg(long, default_value_t = 0.05)]
    emp_eps: f64,
    /// empirical: per-query failure probability
    #[arg(long, default_value_t = 0.01)]
    emp_delta: f64,
    /// temperature: logit divisor
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Assumed logit rank (0: read off the model file)
    #[arg(long, default_value_t = 0)]
    d: usize,
    /// Logit magnitude bound
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Target total variation
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Failure probability
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Oracle approximation level in the schedule
    #[arg(long, default_value_t = 1e-6)]
    eps_apx: f64,
    /// Epoch cap override (0: schedule value)
    #[arg(long, default_value_t = 0)]
    k_epochs: usize,
    /// Trajectories per epoch override (0: schedule value)
    #[arg(long, default_value_t = 0)]
    n_samples: usize,
    /// Spanner accuracy override (0: schedule value)
    #[arg(long, default_value_t = 0.0)]
    eta: f64,
    /// Spanner draw cap override (0: keep default)
    #[arg(long, default_value_t = 0)]
    m_max: usize,
    /// Run log CSV path (default: output path with .log.csv extension)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none", default)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct SampleCfg {
    /// Learned-model file from learn
    #[arg(long)]
    learned: Option<PathBuf>,
    /// Number of sequences to draw
    #[arg(long, default_value_t = 10)]
    count: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct EvalTvCfg {
    /// Model file from gen-model
    #[arg(long)]
    model: Option<PathBuf>,
    /// Learned-model file from learn
    #[arg(long)]
    learned: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct RankProbeCfg {
    /// Model file from gen-model
    #[arg(long)]
    model: Option<PathBuf>,
    /// Probe: matrix | eps-avg
    #[arg(long, default_value = "matrix")]
    mode: String,
    /// History length of the split
    #[arg(long, default_value_t = 2)]
    split: usize,
    /// matrix: future context length (0: longest that fits)
    #[arg(long, default_value_t = 0)]
    future_len: usize,
    /// matrix: comma-separated ranks to fit
    #[arg(long, default_value = "1,2,3,4")]
    ranks: String,
    /// eps-avg: rank to fit
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// eps-avg: column step (0: horizon)
    #[arg(long, default_value_t = 0)]
    t_end: usize,
    /// eps-avg: sampled histories
    #[arg(long, default_value_t = 200)]
    rows: usize,
    /// eps-avg: sampled futures
    #[arg(long, default_value_t = 50)]
    cols: usize,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
struct KmDemoCfg {
    /// Input arity
    #[arg(long, default_value_t = 6)]
    n: usize,
    /// Term count bound passed to the learner
    #[arg(long, default_value_t = 1)]
    d: usize,
    /// Target function, term list like "1,2:0.5;3:0.5"
    #[arg(long = "fn", default_value = "1,2:1.0")]
    #[serde(rename = "fn")]
    fn_spec: String,
    /// Target mean squared error scale
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Failure probability
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Budget(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Budget(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Budget(m) | CliError::Numeric(m) => m,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn from_isan(e: IsanError) -> CliError {
    match e {
        IsanError::NonFinite => CliError::Numeric(e.to_string()),
        _ => usage(e.to_string()),
    }
}

fn from_prob(e: ProbError) -> CliError {
    match e {
        ProbError::NonFinite => CliError::Numeric(e.to_string()),
        _ => usage(e.to_string()),
    }
}

fn from_lp(e: LpError) -> CliError {
    match e {
        LpError::Param(_) => usage(e.to_string()),
        LpError::Consistency(_) | LpError::Numeric(_) => CliError::Numeric(e.to_string()),
    }
}

fn from_oracle(e: OracleError) -> CliError {
    match e {
        OracleError::Model(m) => from_isan(m),
        _ => usage(e.to_string()),
    }
}

fn from_learner(e: LearnerError) -> CliError {
    match e {
        LearnerError::Internal(_) => CliError::Numeric(e.to_string()),
        LearnerError::Lp(inner) => from_lp(inner),
        LearnerError::Oracle(inner) => from_oracle(inner),
        LearnerError::Model(inner) => from_isan(inner),
        LearnerError::Spanner(SpannerError::Oracle(inner)) => from_oracle(inner),
        LearnerError::Spanner(_) | LearnerError::Param(_) => usage(e.to_string()),
    }
}

fn from_sampler(e: SamplerError) -> CliError {
    match e {
        SamplerError::Lp(inner) => from_lp(inner),
        SamplerError::Prob(inner) => from_prob(inner),
        _ => usage(e.to_string()),
    }
}

fn from_eval(e: EvalError) -> CliError {
    match e {
        EvalError::Model(inner) => from_isan(inner),
        EvalError::Sampler(inner) => from_sampler(inner),
        EvalError::Prob(inner) => from_prob(inner),
        _ => usage(e.to_string()),
    }
}

fn from_km(e: KmError) -> CliError {
    match e {
        KmError::Budget { epochs } => {
            CliError::Budget(format!("epoch budget exhausted after {epochs}"))
        }
        KmError::Learner(inner) => from_learner(inner),
        KmError::Sampler(inner) => from_sampler(inner),
        KmError::Oracle(inner) => from_oracle(inner),
        KmError::Isan(inner) => from_isan(inner),
        _ => usage(e.to_string()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut logger = env_logger::Builder::new();
    logger.filter_level(log::LevelFilter::Warn);
    logger.parse_default_env();
    if cli.quiet {
        logger.filter_level(log::LevelFilter::Off);
    }
    let _ = logger.try_init();

    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("error: internal numerical failure: {msg}");
            ExitCode::from(4)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let rc = resolve_run_config(&cli)?;
    match rc.command.clone() {
        CommandConfig::GenModel(c) => cmd_gen_model(rc, c, cli.out),
        CommandConfig::Learn(c) => cmd_learn(rc, c, cli.out),
        CommandConfig::Sample(c) => cmd_sample(rc, c, cli.out),
        CommandConfig::EvalTv(c) => cmd_eval_tv(rc, c, cli.out),
        CommandConfig::RankProbe(c) => cmd_rank_probe(rc, c, cli.out),
        CommandConfig::KmDemo(c) => cmd_km_demo(rc, c, cli.out),
    }
}

/// Merge the config file (if any) with command-line arguments. An explicit
/// `--seed` always wins; a subcommand given alongside `--config` must match
/// the configured one, and its flags are ignored.
fn resolve_run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        // CSV and line outputs carry the config in a leading comment
        let json_text = match text.strip_prefix("# config: ") {
            Some(rest) => rest.lines().next().unwrap_or(""),
            None => text.as_str(),
        };
        let value: serde_json::Value = serde_json::from_str(json_text)
            .map_err(|e| usage(format!("config {} is not JSON: {e}", path.display())))?;
        let embedded = value.get("run_config").cloned().unwrap_or(value);
        let mut rc: RunConfig = serde_json::from_value(embedded)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        if let Some(cmd) = &cli.command {
            if cmd.kind() != rc.command.kind() {
                return Err(usage(format!(
                    "--config runs `{}` but the command line says `{}`",
                    rc.command.kind(),
                    cmd.kind()
                )));
            }
        }
        if let Some(seed) = cli.seed {
            rc.seed = seed;
        }
        Ok(rc)
    } else {
        let cmd = cli
            .command
            .clone()
            .ok_or_else(|| usage("need a subcommand or --config"))?;
        Ok(RunConfig {
            seed: cli.seed.unwrap_or(0),
            command: cmd.into_config(),
        })
    }
}

fn config_comment(rc: &RunConfig) -> Result<String, CliError> {
    let json = serde_json::to_string(rc)
        .map_err(|e| CliError::Numeric(format!("config serialization: {e}")))?;
    Ok(format!("# config: {json}"))
}

fn write_output(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content)
        .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))
}

fn require_out(out: Option<PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    out.ok_or_else(|| usage(format!("{what} needs --out <path>")))
}

fn load_json_field(path: &Path, field: &str) -> Result<serde_json::Value, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| usage(format!("{} is not JSON: {e}", path.display())))?;
    value
        .get(field)
        .cloned()
        .ok_or_else(|| usage(format!("{} has no `{field}` field", path.display())))
}

fn load_model(path: &Path) -> Result<IsanModel, CliError> {
    let value = load_json_field(path, "model")?;
    let m: IsanModel = serde_json::from_value(value)
        .map_err(|e| usage(format!("{}: bad model: {e}", path.display())))?;
    m.validate().map_err(from_isan)?;
    Ok(m)
}

fn load_learned(path: &Path) -> Result<LearnedModel, CliError> {
    let value = load_json_field(path, "learned")?;
    serde_json::from_value(value)
        .map_err(|e| usage(format!("{}: bad learned model: {e}", path.display())))
}

fn cmd_gen_model(rc: RunConfig, c: GenModelCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out, "gen-model")?;
    let model = match c.kind.as_str() {
        "random" => IsanModel::random(c.t, c.sigma, c.d, c.scale, rc.seed).map_err(from_isan)?,
        "product" => {
            IsanModel::random_product(c.t, c.sigma, c.scale, rc.seed).map_err(from_isan)?
        }
        "sparse-fn" => {
            let f = SparseBoolFn::parse(&c.fn_spec, c.n).map_err(from_isan)?;
            isan_from_sparse_fn(&f, c.scale).map_err(from_isan)?
        }
        other => return Err(usage(format!("unknown generator kind `{other}`"))),
    };
    let doc = serde_json::json!({ "run_config": rc, "model": model });
    write_output(&out, &pretty(&doc)?)?;
    println!(
        "wrote model T={} sigma={} d={} to {}",
        model.horizon,
        model.sigma,
        model.d,
        out.display()
    );
    Ok(())
}

/// Resolve schedule-derived learner parameters, then apply nonzero overrides.
/// The returned config is what the run executes and what gets embedded.
fn resolve_learner_config(c: &LearnCfg, m: &IsanModel, seed: u64) -> Result<LearnerConfig, CliError> {
    let d = if c.d == 0 { m.d } else { c.d };
    let mut config = default_params(m.horizon, m.sigma, d, c.alpha, c.eps, c.delta, c.eps_apx)
        .map_err(from_learner)?;
    if c.k_epochs > 0 {
        config.k_epochs = c.k_epochs;
    }
    if c.n_samples > 0 {
        config.n_samples = c.n_samples;
    }
    if c.eta > 0.0 {
        config.eta = c.eta;
    }
    if c.m_max > 0 {
        config.m_max = c.m_max;
    }
    config.seed = seed;
    config.validate().map_err(from_learner)?;
    Ok(config)
}

fn cmd_learn(rc: RunConfig, c: LearnCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    let out = require_out(out, "learn")?;
    let model_path = c.model.clone().ok_or_else(|| usage("learn needs --model"))?;
    let model = load_model(&model_path)?;
    let config = resolve_learner_config(&c, &model, rc.seed)?;

    // the trajectory source is the model the oracle answers for
    let report = match c.oracle.as_str() {
        "exact" => {
            let mut oracle = Oracle::new(ExactIsan::new(model.clone()));
            learn(&mut oracle, &model, &config).map_err(from_learner)?
        }
        "noisy" => {
            let mode = match c.noise_mode.as_str() {
                "adversarial" => NoiseMode::AdversarialRoundoff,
                "uniform" => NoiseMode::UniformBounded,
                other => return Err(usage(format!("unknown noise mode `{other}`"))),
            };
            let spec = NoiseSpec {
                eps_apx: c.noise_eps,
                mode,
                seed: rc.seed,
            };
            let backend =
                NoisyBackend::new(ExactIsan::new(model.clone()), spec).map_err(from_oracle)?;
            let mut oracle = Oracle::new(backend);
            learn(&mut oracle, &model, &config).map_err(from_learner)?
        }
        "empirical" => {
            let backend =
                EmpiricalBackend::new(model.clone(), c.lambda, c.emp_eps, c.emp_delta, rc.seed)
                    .map_err(from_oracle)?;
            let mut oracle = Oracle::new(backend);
            learn(&mut oracle, &model, &config).map_err(from_learner)?
        }
        "temperature" => {
            let tempered = model.temperature(c.tau).map_err(from_isan)?;
            let mut oracle = Oracle::new(temperature_oracle(&model, c.tau).map_err(from_oracle)?);
            learn(&mut oracle, &tempered, &config).map_err(from_learner)?
        }
        other => return Err(usage(format!("unknown oracle kind `{other}`"))),
    };

    // resolved values go into the embedded config so a rerun replays them
    let resolved = LearnCfg {
        d: config.d,
        k_epochs: config.k_epochs,
        n_samples: config.n_samples,
        eta: config.eta,
        m_max: config.m_max,
        log: None,
        ..c.clone()
    };
    let rc = RunConfig {
        seed: rc.seed,
        command: CommandConfig::Learn(resolved),
    };

    let log_path = c
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("log.csv"));
    let mut log_text = Vec::new();
    write_run_log_csv(&report.log, &mut log_text)
        .map_err(|e| usage(format!("cannot render run log: {e}")))?;
    let log_content = format!(
        "{}\n{}",
        config_comment(&rc)?,
        String::from_utf8_lossy(&log_text)
    );
    write_output(&log_path, &log_content)?;

    match report.outcome {
        LearnOutcome::Learned(lm) => {
            let doc = serde_json::json!({
                "run_config": rc,
                "learner_config": config,
                "stats": report.stats,
                "learned": lm,
            });
            write_output(&out, &pretty(&doc)?)?;
            println!(
                "learned in {} epochs, {} queries, dstar={}; model at {}, log at {}",
                report.stats.epochs_used,
                report.stats.queries,
                report.stats.dstar_final,
                out.display(),
                log_path.display()
            );
            Ok(())
        }
        LearnOutcome::BudgetExhausted => Err(CliError::Budget(format!(
            "no epoch finished clean within k={}; log at {}",
            config.k_epochs,
            log_path.display()
        ))),
    }
}

fn cmd_sample(rc: RunConfig, c: SampleCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    if c.count == 0 {
        return Err(usage("need --count >= 1"));
    }
    let learned_path = c.learned.clone().ok_or_else(|| usage("sample needs --learned"))?;
    let lm = load_learned(&learned_path)?;
    let mut session = SampleSession::new(&lm).map_err(from_sampler)?;
    let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(rc.seed);
    let mut lines = Vec::with_capacity(c.count);
    for _ in 0..c.count {
        let outcome = session.sample(&mut rng).map_err(from_sampler)?;
        lines.push(outcome.render_line());
    }
    match out {
        Some(path) => {
            let content = format!("{}\n{}\n", config_comment(&rc)?, lines.join("\n"));
            write_output(&path, &content)?;
            println!("wrote {} sequences to {}", c.count, path.display());
        }
        None => {
            for line in &lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}

fn cmd_eval_tv(rc: RunConfig, c: EvalTvCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    let model_path = c.model.clone().ok_or_else(|| usage("eval-tv needs --model"))?;
    let learned_path = c.learned.clone().ok_or_else(|| usage("eval-tv needs --learned"))?;
    let model = load_model(&model_path)?;
    let lm = load_learned(&learned_path)?;
    let tv = tv_exact(&model, &lm).map_err(from_eval)?;
    let fail_mass = logitrank::sampler::enumerate_learned_dist(&lm)
        .map_err(from_sampler)?
        .fail_mass;
    println!("tv={} fail_mass={}", csv_f64(tv), csv_f64(fail_mass));
    if let Some(path) = out {
        let doc = serde_json::json!({ "run_config": rc, "tv": tv, "fail_mass": fail_mass });
        write_output(&path, &pretty(&doc)?)?;
    }
    Ok(())
}

fn enumerate_seqs(sigma: usize, len: usize) -> Result<Vec<Seq>, CliError> {
    let count = (sigma as f64).powi(len as i32);
    if count > ENUM_GUARD as f64 {
        return Err(usage(format!(
            "sigma^{len} = {count} exceeds the enumeration guard {ENUM_GUARD}"
        )));
    }
    Ok((0..count as usize)
        .map(|r| seq_from_rank(r, sigma, len))
        .collect())
}

fn cmd_rank_probe(rc: RunConfig, c: RankProbeCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    let model_path = c.model.clone().ok_or_else(|| usage("rank-probe needs --model"))?;
    let model = load_model(&model_path)?;
    match c.mode.as_str() {
        "matrix" => {
            let out = require_out(out, "rank-probe")?;
            if c.split + 1 > model.horizon {
                return Err(usage(format!(
                    "split {} leaves no columns at horizon {}",
                    c.split, model.horizon
                )));
            }
            let future_len = if c.future_len == 0 {
                model.horizon - 1 - c.split
            } else {
                c.future_len
            };
            let mut ranks = parse_ranks(&c.ranks)?;
            if ranks.windows(2).any(|w| w[0] > w[1]) {
                log::warn!("rank list {:?} is unsorted; sorting", ranks);
                ranks.sort_unstable();
            }
            let histories = enumerate_seqs(model.sigma, c.split)?;
            let futures = enumerate_seqs(model.sigma, future_len)?;
            if histories.len() * futures.len() * model.sigma > ENUM_GUARD {
                return Err(usage(format!(
                    "matrix of {}x{} entries exceeds the enumeration guard",
                    histories.len(),
                    futures.len() * model.sigma
                )));
            }
            let mat = build_logit_matrix(&model, &histories, &futures).map_err(from_eval)?;
            let profile = rank_profile(&mat, &ranks).map_err(from_eval)?;

            let resolved = RankProbeCfg {
                future_len,
                ranks: ranks
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(","),
                ..c.clone()
            };
            let rc = RunConfig {
                seed: rc.seed,
                command: CommandConfig::RankProbe(resolved),
            };
            let mut csv = Vec::new();
            write_rank_profile_csv(&profile, &mut csv)
                .map_err(|e| usage(format!("cannot render profile: {e}")))?;
            let content = format!(
                "{}\n{}",
                config_comment(&rc)?,
                String::from_utf8_lossy(&csv)
            );
            write_output(&out, &content)?;
            let last = profile.fits.last().expect("nonempty rank list");
            println!(
                "probed {} ranks on a {}x{} matrix; final frobenius error {} at rank {}; wrote {}",
                profile.fits.len(),
                profile.rows,
                profile.cols,
                csv_f64(last.frobenius_error),
                last.rank,
                out.display()
            );
            Ok(())
        }
        "eps-avg" => {
            let t_end = if c.t_end == 0 { model.horizon } else { c.t_end };
            let resolved = RankProbeCfg { t_end, ..c.clone() };
            let rc = RunConfig {
                seed: rc.seed,
                command: CommandConfig::RankProbe(resolved),
            };
            let value = estimate_eps_avg(&model, c.d, c.split, t_end, c.rows, c.cols, rc.seed)
                .map_err(from_eval)?;
            println!("eps_avg={}", csv_f64(value));
            if let Some(path) = out {
                let content = format!(
                    "{}\nd,s,t,rows,cols,eps_avg\n{},{},{},{},{},{}\n",
                    config_comment(&rc)?,
                    c.d,
                    c.split,
                    t_end,
                    c.rows,
                    c.cols,
                    csv_f64(value)
                );
                write_output(&path, &content)?;
            }
            Ok(())
        }
        other => Err(usage(format!("unknown probe mode `{other}`"))),
    }
}

fn cmd_km_demo(rc: RunConfig, c: KmDemoCfg, out: Option<PathBuf>) -> Result<(), CliError> {
    let f = SparseBoolFn::parse(&c.fn_spec, c.n).map_err(from_isan)?;
    let oracle = sparse_fn_oracle(&f).map_err(from_km)?;
    let lb = km_learn(&oracle, c.n, c.d, c.eps, c.delta, rc.seed).map_err(from_km)?;
    let mse = lb.mse_vs_f.unwrap_or(f64::NAN);
    println!(
        "mse={} f_queries={} epochs={}",
        csv_f64(mse),
        lb.f_queries,
        lb.epochs
    );
    if let Some(path) = out {
        let content = format!(
            "{}\nn,d,terms,eps_target,mse,f_queries,epochs\n{},{},{},{},{},{},{}\n",
            config_comment(&rc)?,
            lb.n,
            c.d,
            csv_quote(&c.fn_spec),
            csv_f64(c.eps),
            csv_f64(mse),
            lb.f_queries,
            lb.epochs
        );
        write_output(&path, &content)?;
    }
    Ok(())
}

fn parse_ranks(spec: &str) -> Result<Vec<usize>, CliError> {
    let ranks: Result<Vec<usize>, _> = spec
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect();
    let ranks = ranks.map_err(|e| usage(format!("bad rank list `{spec}`: {e}")))?;
    if ranks.is_empty() {
        return Err(usage("empty rank list"));
    }
    Ok(ranks)
}

fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn pretty(doc: &serde_json::Value) -> Result<String, CliError> {
    serde_json::to_string_pretty(doc)
        .map_err(|e| CliError::Numeric(format!("output serialization: {e}")))
        .map(|mut s| {
            s.push('\n');
            s
        })
}
