//! Command implementations behind the `vcq` binary.
//!
//! Every command writes its table (or JSON with `--json`) to the given
//! writer, or atomically to `--out` when that names a file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use num_bigint::BigUint;
use serde::Serialize;
use serde_json::json;

use vcq::entropy::{analyze, DEFAULT_CLIFF_THRESHOLD};
use vcq::format::{load_codebook, load_corpus, save_codebook, save_corpus, write_atomic};
use vcq::generation::{memorization_report, sample_corpus, CountModel, CountModelConfig, GuidancePolicy};
use vcq::quantizer::{fit_codebook, FitConfig};
use vcq::schedule::{capacity_report, data_threshold, tstar_uniform, Preset, DEFAULT_PIXEL_COUNT};
use vcq::toylab::{
    encode_dataset, fit_encoder, generate_dataset, reconstruction_metrics, run_cliff_experiment,
    tokenize_dataset, write_report, ExperimentConfig, NamedSchedule,
};
use vcq::{Execution, Family, Schedule};

#[derive(Debug, Parser)]
#[command(name = "vcq", version, about = "Variable codebook-size quantization laboratory")]
pub struct Cli {
    /// Seed for every randomized command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print JSON instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Output file (or directory for `experiment`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Codebook-size schedule summary, per-position curve or config.
    Schedule(ScheduleCmd),
    /// Entropy-cliff positions for uniform codebooks.
    Tstar(TstarCmd),
    /// Fit a codebook on the synthetic dataset of an experiment config.
    Fit(FitCmd),
    /// Tokenize the synthetic dataset of an experiment config.
    Tokenize(TokenizeCmd),
    /// Conditional entropy profile of a token corpus.
    Analyze(AnalyzeCmd),
    /// Sample token sequences from a count model of a labelled corpus.
    Generate(GenerateCmd),
    /// Verbatim-copy statistics of generated against training sequences.
    Memorization(MemorizationCmd),
    /// Constant-versus-variable schedule experiment.
    Experiment(ExperimentCmd),
}

#[derive(Debug, Default, Args)]
pub struct ScheduleArgs {
    /// One of constant16k, constant8k, linear, cosine, power2.5, cosine-l.
    #[arg(long, conflicts_with_all = ["schedule", "family"])]
    pub preset: Option<String>,
    /// Schedule JSON file.
    #[arg(long, conflicts_with = "family")]
    pub schedule: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub k_min: Option<u32>,
    #[arg(long)]
    pub k_max: Option<u32>,
    #[arg(long)]
    pub length: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScheduleCmd {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Dataset size for t* and the remaining budget.
    #[arg(long, default_value_t = 1_281_167)]
    pub n: u64,
    /// Pixels per image for BPP.
    #[arg(long, default_value_t = DEFAULT_PIXEL_COUNT)]
    pub pixels: u64,
    /// Emit the per-position curve as CSV.
    #[arg(long)]
    pub csv: bool,
    /// Emit the schedule as a JSON config.
    #[arg(long, conflicts_with = "csv")]
    pub emit_config: bool,
}

#[derive(Debug, Args)]
pub struct TstarCmd {
    /// A single dataset size instead of the built-in table.
    #[arg(long)]
    pub n: Option<u64>,
    #[arg(long, default_value_t = 16384)]
    pub k: u64,
    /// Dataset-size thresholds K^(m-1) for an inclusive range of m, e.g. `2..5`.
    #[arg(long)]
    pub thresholds: Option<String>,
}

#[derive(Debug, Args)]
pub struct FitCmd {
    /// Experiment config JSON; the built-in desk config when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Schedule name within the config; the first when absent.
    #[arg(long)]
    pub name: Option<String>,
}

#[derive(Debug, Args)]
pub struct TokenizeCmd {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub codebook: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeCmd {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = DEFAULT_CLIFF_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GenerateCmd {
    /// Labelled training corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    /// Guidance policy: inline JSON, `@file.json` or a preset name.
    #[arg(long, default_value = "{}")]
    pub policy: String,
    #[arg(long, default_value_t = 10)]
    pub samples_per_class: usize,
    #[arg(long, default_value_t = CountModelConfig::default().max_order)]
    pub max_order: usize,
    #[arg(long, default_value_t = CountModelConfig::default().smoothing)]
    pub smoothing: f64,
}

#[derive(Debug, Args)]
pub struct MemorizationCmd {
    #[arg(long)]
    pub generated: PathBuf,
    #[arg(long)]
    pub training: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExperimentCmd {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the built-in desk config and exit.
    #[arg(long)]
    pub write_default_config: bool,
}

/// A failed command: bad flags (exit 1) or bad data (exit 2).
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Data(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Data(e)
    }
}

impl From<vcq::VcqError> for Failure {
    fn from(e: vcq::VcqError) -> Self {
        Failure::Data(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

impl ScheduleArgs {
    /// `None` when no schedule flag was given.
    pub fn resolve(&self) -> Result<Option<Schedule>, Failure> {
        if let Some(p) = &self.preset {
            let preset = Preset::from_str(p).map_err(|e| Failure::Usage(e.into()))?;
            return Ok(Some(preset.schedule()));
        }
        if let Some(path) = &self.schedule {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let s: Schedule =
                serde_json::from_str(&text).with_context(|| format!("parsing schedule {}", path.display()))?;
            return Ok(Some(s));
        }
        let Some(family) = &self.family else {
            return Ok(None);
        };
        let family = Family::from_str(family).map_err(|e| Failure::Usage(e.into()))?;
        let k_max = self.k_max.ok_or_else(|| usage("--family needs --k-max"))?;
        let length = self.length.ok_or_else(|| usage("--family needs --length"))?;
        let k_min = match family {
            Family::Constant => self.k_min.unwrap_or(k_max),
            _ => self.k_min.ok_or_else(|| usage("--family needs --k-min"))?,
        };
        let alpha = match family {
            Family::Power => Some(self.alpha.ok_or_else(|| usage("--family power needs --alpha"))?),
            _ => None,
        };
        Schedule::new(family, k_min, k_max, length, alpha).map(Some).map_err(|e| Failure::Usage(e.into()))
    }

    fn require(&self) -> Result<Schedule, Failure> {
        self.resolve()?.ok_or_else(|| usage("a schedule is required (--preset, --schedule or --family)"))
    }
}

fn require_seed(cli: &Cli) -> Result<u64, Failure> {
    cli.seed.ok_or_else(|| usage("this command is randomized and needs --seed"))
}

fn require_out(cli: &Cli) -> Result<&Path, Failure> {
    cli.out.as_deref().ok_or_else(|| usage("this command needs --out"))
}

/// Sends text to `--out` when given, otherwise to `stdout`.
fn emit(cli: &Cli, stdout: &mut dyn Write, text: &str) -> CmdResult {
    match &cli.out {
        Some(path) => write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))?,
        None => stdout.write_all(text.as_bytes()).context("writing to stdout")?,
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).context("serializing JSON")?;
    s.push('\n');
    Ok(s)
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CmdResult {
    match &cli.command {
        Command::Schedule(c) => cmd_schedule(cli, c, stdout),
        Command::Tstar(c) => cmd_tstar(cli, c, stdout),
        Command::Fit(c) => cmd_fit(cli, c, stdout),
        Command::Tokenize(c) => cmd_tokenize(cli, c, stdout),
        Command::Analyze(c) => cmd_analyze(cli, c, stdout),
        Command::Generate(c) => cmd_generate(cli, c, stdout),
        Command::Memorization(c) => cmd_memorization(cli, c, stdout),
        Command::Experiment(c) => cmd_experiment(cli, c, stdout),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ScheduleRow {
    pub name: String,
    pub k_min: u32,
    pub k_max: u32,
    pub mean_codebook: f64,
    pub bpp: f64,
    pub tstar_vcq: usize,
}

fn schedule_row(name: &str, s: &Schedule, n: u64, pixels: u64) -> vcq::Result<ScheduleRow> {
    let r = capacity_report(s, n, pixels)?;
    Ok(ScheduleRow {
        name: name.to_string(),
        k_min: s.effective_k_min(),
        k_max: s.k_max(),
        mean_codebook: r.mean_codebook,
        bpp: r.bpp,
        tstar_vcq: r.tstar_vcq,
    })
}

/// Summary rows of the six preset schedules.
pub fn preset_rows(n: u64, pixels: u64) -> vcq::Result<Vec<ScheduleRow>> {
    Preset::ALL.iter().map(|p| schedule_row(p.name(), &p.schedule(), n, pixels)).collect()
}

fn schedule_table(rows: &[ScheduleRow]) -> String {
    let mut s = format!("{:<14} {:>6} {:>6} {:>10} {:>8} {:>8}\n", "schedule", "K_min", "K_max", "K_bar", "BPP", "t*_vcq");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:>6} {:>6} {:>10.1} {:>8.4} {:>8}",
            r.name, r.k_min, r.k_max, r.mean_codebook, r.bpp, r.tstar_vcq
        );
    }
    s
}

fn cmd_schedule(cli: &Cli, c: &ScheduleCmd, stdout: &mut dyn Write) -> CmdResult {
    if c.pixels == 0 {
        return Err(usage("--pixels must be positive"));
    }
    let Some(schedule) = c.schedule.resolve()? else {
        if c.csv || c.emit_config {
            return Err(usage("--csv and --emit-config need a single schedule"));
        }
        let rows = preset_rows(c.n, c.pixels)?;
        let text = if cli.json { to_json(&rows)? } else { schedule_table(&rows) };
        return emit(cli, stdout, &text);
    };
    if c.emit_config {
        return emit(cli, stdout, &to_json(&schedule)?);
    }
    if c.csv {
        let mut buf = Vec::new();
        capacity_report(&schedule, c.n, c.pixels)?.write_csv(&mut buf)?;
        return emit(cli, stdout, &String::from_utf8(buf).context("CSV is UTF-8")?);
    }
    let name = c.schedule.preset.clone().unwrap_or_else(|| schedule.family().to_string());
    let row = schedule_row(&name, &schedule, c.n, c.pixels)?;
    let text = if cli.json { to_json(&row)? } else { schedule_table(&[row]) };
    emit(cli, stdout, &text)
}

/// Dataset sizes of the reference table.
pub const DATASETS: [(&str, u64); 6] = [
    ("CIFAR-10/100", 50_000),
    ("COCO", 118_287),
    ("ImageNet-1K", 1_281_167),
    ("CC12M", 12_000_000),
    ("LAION-400M", 400_000_000),
    ("LAION-5B", 5_000_000_000),
];

#[derive(Clone, Debug, Serialize)]
pub struct DatasetRow {
    pub name: String,
    pub n: u64,
    pub log2_n: f64,
    pub tstar: u32,
}

#[derive(Clone, Debug, Serialize)]
pub struct ThresholdRow {
    pub tstar: u32,
    /// Decimal, since it may exceed 64 bits.
    pub n: String,
    pub log2_n: f64,
}

pub fn dataset_rows(k: u64) -> vcq::Result<Vec<DatasetRow>> {
    DATASETS
        .iter()
        .map(|&(name, n)| {
            Ok(DatasetRow { name: name.into(), n, log2_n: (n as f64).log2(), tstar: tstar_uniform(n, k)? })
        })
        .collect()
}

pub fn threshold_rows(k: u64, from: u32, to: u32) -> vcq::Result<Vec<ThresholdRow>> {
    (from..=to)
        .map(|m| {
            let n: BigUint = data_threshold(k, m)?;
            Ok(ThresholdRow { tstar: m, log2_n: (m as f64 - 1.0) * (k as f64).log2(), n: n.to_string() })
        })
        .collect()
}

fn parse_range(s: &str) -> Result<(u32, u32), Failure> {
    let bad = || usage(format!("expected a range like 2..5, got {s:?}"));
    let (a, b) = match s.split_once("..") {
        Some((a, b)) => (a, b.trim_start_matches('=')),
        None => (s, s),
    };
    let a: u32 = a.trim().parse().map_err(|_| bad())?;
    let b: u32 = b.trim().parse().map_err(|_| bad())?;
    if a == 0 || b < a {
        return Err(bad());
    }
    Ok((a, b))
}

fn cmd_tstar(cli: &Cli, c: &TstarCmd, stdout: &mut dyn Write) -> CmdResult {
    if c.k < 2 {
        return Err(usage("--k must be at least 2"));
    }
    if let Some(spec) = &c.thresholds {
        let (a, b) = parse_range(spec)?;
        let rows = threshold_rows(c.k, a, b)?;
        let text = if cli.json {
            to_json(&rows)?
        } else {
            let mut s = format!("{:>4} {:>24} {:>8}\n", "t*", "N", "log2 N");
            for r in &rows {
                let _ = writeln!(s, "{:>4} {:>24} {:>8.1}", r.tstar, r.n, r.log2_n);
            }
            s
        };
        return emit(cli, stdout, &text);
    }
    if let Some(n) = c.n {
        let t = tstar_uniform(n, c.k)?;
        let text = if cli.json {
            to_json(&json!({ "n": n, "k": c.k, "tstar": t }))?
        } else {
            format!("{t}\n")
        };
        return emit(cli, stdout, &text);
    }
    let datasets = dataset_rows(c.k)?;
    let thresholds = threshold_rows(c.k, 2, 5)?;
    let text = if cli.json {
        to_json(&json!({ "k": c.k, "datasets": datasets, "thresholds": thresholds }))?
    } else {
        let mut s = format!("{:<14} {:>24} {:>8} {:>4}\n", "dataset", "N", "log2 N", "t*");
        for r in &datasets {
            let _ = writeln!(s, "{:<14} {:>24} {:>8.1} {:>4}", r.name, r.n, r.log2_n, r.tstar);
        }
        for r in &thresholds {
            let name = format!("threshold t*={}", r.tstar);
            let _ = writeln!(s, "{:<14} {:>24} {:>8.1} {:>4}", name, r.n, r.log2_n, r.tstar);
        }
        s
    };
    emit(cli, stdout, &text)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    let config = match path {
        None => ExperimentConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
        }
    };
    config.validate()?;
    Ok(config)
}

fn pick_schedule<'a>(config: &'a ExperimentConfig, name: Option<&str>) -> Result<&'a NamedSchedule, Failure> {
    match name {
        None => Ok(&config.schedules[0]),
        Some(n) => config
            .schedules
            .iter()
            .find(|s| s.name == n)
            .ok_or_else(|| usage(format!("no schedule named {n:?} in the config"))),
    }
}

fn cmd_fit(cli: &Cli, c: &FitCmd, stdout: &mut dyn Write) -> CmdResult {
    let seed = require_seed(cli)?;
    let out = require_out(cli)?;
    let config = load_config(c.config.as_deref())?.with_seed(seed);
    let named = pick_schedule(&config, c.name.as_deref())?;
    let exec = Execution::default();
    let images = generate_dataset(&config.dataset)?;
    let encoder = fit_encoder(&images, &config.encoder)?;
    let latents = encode_dataset(&images, &encoder, exec)?;
    let fit = FitConfig {
        k_max: named.schedule.k_max() as usize,
        epochs: config.fitting.epochs,
        decay: config.fitting.decay,
        seed,
    };
    let codebook = fit_codebook(&latents, &named.schedule, encoder.dim(), &fit, exec)?;
    save_codebook(out, &codebook)?;
    let summary = json!({
        "schedule": named.name,
        "entries": codebook.k_max(),
        "dim": codebook.dim(),
        "codebook": out.display().to_string(),
    });
    let text = if cli.json {
        to_json(&summary)?
    } else {
        format!("fitted {} entries of dimension {} for {}\n", codebook.k_max(), codebook.dim(), named.name)
    };
    stdout.write_all(text.as_bytes()).context("writing to stdout")?;
    Ok(())
}

fn cmd_tokenize(cli: &Cli, c: &TokenizeCmd, stdout: &mut dyn Write) -> CmdResult {
    let seed = require_seed(cli)?;
    let out = require_out(cli)?;
    let config = load_config(c.config.as_deref())?.with_seed(seed);
    let named = pick_schedule(&config, c.name.as_deref())?;
    let codebook = load_codebook(&c.codebook)?;
    let exec = Execution::default();
    let images = generate_dataset(&config.dataset)?;
    let encoder = fit_encoder(&images, &config.encoder)?;
    let corpus = tokenize_dataset(&images, &encoder, &named.schedule, &codebook, exec)?;
    let recon = reconstruction_metrics(&images, &corpus, &encoder, &codebook)?;
    save_corpus(out, &corpus)?;
    let text = if cli.json {
        to_json(&json!({
            "schedule": named.name,
            "n_samples": corpus.n_samples(),
            "length": corpus.length(),
            "mse": recon.mse,
            "psnr": recon.psnr,
        }))?
    } else {
        format!(
            "{} sequences of length {} ({}); mse {:.6}, psnr {:.2} dB\n",
            corpus.n_samples(),
            corpus.length(),
            named.name,
            recon.mse,
            recon.psnr
        )
    };
    stdout.write_all(text.as_bytes()).context("writing to stdout")?;
    Ok(())
}

fn cmd_analyze(cli: &Cli, c: &AnalyzeCmd, stdout: &mut dyn Write) -> CmdResult {
    if c.threshold.is_nan() || c.threshold <= 0.0 {
        return Err(usage("--threshold must be positive"));
    }
    let schedule = c.schedule.require()?;
    let corpus = load_corpus(&c.corpus)?;
    let profile = analyze(&corpus, &schedule, c.threshold, Execution::default())?;
    let text = if cli.json {
        to_json(&profile)?
    } else {
        let mut buf = Vec::new();
        profile.write_csv(&mut buf)?;
        String::from_utf8(buf).context("CSV is UTF-8")?
    };
    emit(cli, stdout, &text)
}

fn parse_policy(spec: &str) -> Result<GuidancePolicy, Failure> {
    let trimmed = spec.trim();
    if let Some(path) = trimmed.strip_prefix('@') {
        let text = fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        return serde_json::from_str(&text).map_err(|e| Failure::Usage(anyhow!("policy {path}: {e}")));
    }
    if trimmed.starts_with('{') {
        return serde_json::from_str(trimmed).map_err(|e| Failure::Usage(anyhow!("policy: {e}")));
    }
    GuidancePolicy::preset(trimmed).map_err(|e| Failure::Usage(e.into()))
}

fn cmd_generate(cli: &Cli, c: &GenerateCmd, stdout: &mut dyn Write) -> CmdResult {
    let seed = require_seed(cli)?;
    let out = require_out(cli)?;
    let policy = parse_policy(&c.policy)?;
    if c.samples_per_class == 0 {
        return Err(usage("--samples-per-class must be positive"));
    }
    let schedule = c.schedule.require()?;
    let training = load_corpus(&c.corpus)?;
    let config = CountModelConfig { max_order: c.max_order, smoothing: c.smoothing };
    let model = CountModel::fit(&training, &schedule, &config)?;
    let classes: Vec<Option<u32>> = (0..model.n_classes() as u32)
        .flat_map(|k| std::iter::repeat_n(Some(k), c.samples_per_class))
        .collect();
    let generated = sample_corpus(&model, &classes, &policy, seed, Execution::default())?;
    save_corpus(out, &generated)?;
    let report = memorization_report(&generated, &training)?;
    let text = if cli.json {
        to_json(&json!({ "n_generated": generated.n_samples(), "memorization": report }))?
    } else {
        format!(
            "{} sequences; exact-match rate {:.4}, mean longest prefix {:.2}\n",
            generated.n_samples(),
            report.exact_match_rate,
            report.mean_longest_prefix
        )
    };
    stdout.write_all(text.as_bytes()).context("writing to stdout")?;
    Ok(())
}

fn cmd_memorization(cli: &Cli, c: &MemorizationCmd, stdout: &mut dyn Write) -> CmdResult {
    let generated = load_corpus(&c.generated)?;
    let training = load_corpus(&c.training)?;
    let report = memorization_report(&generated, &training)?;
    let text = if cli.json {
        to_json(&report)?
    } else {
        format!(
            "{:<20} {:>10}\n{:<20} {:>10.4}\n{:<20} {:>10.2}\n",
            "n_generated",
            generated.n_samples(),
            "exact_match_rate",
            report.exact_match_rate,
            "mean_longest_prefix",
            report.mean_longest_prefix
        )
    };
    emit(cli, stdout, &text)
}

fn cmd_experiment(cli: &Cli, c: &ExperimentCmd, stdout: &mut dyn Write) -> CmdResult {
    if c.write_default_config {
        return emit(cli, stdout, &to_json(&ExperimentConfig::default())?);
    }
    let seed = require_seed(cli)?;
    let out = require_out(cli)?;
    let config = load_config(c.config.as_deref())?.with_seed(seed);
    let run = run_cliff_experiment(&config, Execution::default())?;
    write_report(&run, out)?;
    let report = &run.report;
    let text = if cli.json {
        to_json(report)?
    } else {
        let mut s = format!(
            "{:<12} {:>6} {:>7} {:>10} {:>9} {:>12} {:>9}\n",
            "schedule", "cliff", "t*_vcq", "joint_bits", "psnr_dB", "exact_match", "mean_lcp"
        );
        for r in &report.schedules {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>7} {:>10.3} {:>9.2} {:>12.4} {:>9.2}",
                r.name,
                r.entropy.cliff_position,
                r.tstar_vcq,
                r.entropy.joint_bits,
                r.reconstruction.psnr,
                r.memorization.exact_match_rate,
                r.memorization.mean_longest_prefix
            );
        }
        let _ = writeln!(s, "report written to {}", out.display());
        s
    };
    stdout.write_all(text.as_bytes()).context("writing to stdout")?;
    Ok(())
}
