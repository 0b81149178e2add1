//! Command-line front end.
//!
//! Every numeric option can also come from a `key = value` config file
//! passed with `--config`; keys are the long flag names. A flag on the
//! command line wins over the file, the file wins over the built-in default.
//!
//! Exit codes: 0 success, 1 usage, 2 data or validation, 3 numeric or
//! training failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::data::{self, DataError, DomainDataset, EpisodeConfig, Regime, SplitKind, SyntheticSpec};
use crate::eval::{self, Classifier, ClassifierKind, EvalError, Ridge};
use crate::losses::{self, Bandwidth, KernelSpec, LossError};
use crate::nets::{Backbone, MultiDomainModel, NetError, SingleDomainNet, TeacherBank};
use crate::tensor::Tensor;
use crate::train::{self, DistillConfig, FeatureLoss, ModelConfig, TrainConfig, TrainError, TrainOutcome};

#[derive(Error, Debug)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<NetError> for CliError {
    fn from(e: NetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(format!("i/o error: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            EvalError::Data(d) => d.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<LossError> for CliError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::DegenerateCka | LossError::DegenerateBandwidth | LossError::Tensor(_) => {
                CliError::Numeric(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "unirep", version, about = "Multi-domain few-shot representations distilled from single-domain teachers")]
pub struct Cli {
    /// `key = value` file supplying defaults for any long option.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    Gen(GenArgs),
    /// Train a single-domain teacher.
    TrainSdl(TrainSdlArgs),
    /// Train the multi-domain baseline.
    TrainMdl(TrainMdlArgs),
    /// Train a multi-domain student distilled from teachers.
    TrainUrl(TrainUrlArgs),
    /// Evaluate few-shot episodes on the test splits.
    Eval(EvalArgs),
    /// Recall@k on the test splits.
    Retrieval(RetrievalArgs),
    /// CKA dissimilarity between two feature files.
    Cka(CkaArgs),
    /// Export backbone features of one split as a feature file.
    Features(FeaturesArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    domains: Option<usize>,
    #[arg(long)]
    train_classes: Option<usize>,
    #[arg(long)]
    val_classes: Option<usize>,
    #[arg(long)]
    test_classes: Option<usize>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    input_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainOpts {
    /// Benchmark directory written by `gen`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Cosine restart period, also the validation interval.
    #[arg(long)]
    anneal_every: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Comma-separated integer batch multipliers, one per domain.
    #[arg(long)]
    batch_weights: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    /// Return the final weights instead of the best validation snapshot.
    #[arg(long)]
    no_early_stopping: bool,
    /// Write the loss trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainSdlArgs {
    #[arg(long)]
    domain: String,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct TrainMdlArgs {
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args, Debug)]
struct TrainUrlArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Teacher checkpoints, comma-separated.
    #[arg(long)]
    teachers: String,
    #[arg(long, value_parser = FeatureLoss::from_str)]
    feature_loss: Option<FeatureLoss>,
    /// Add the prediction (KL) matching term.
    #[arg(long)]
    kl: bool,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelSpec>,
    #[arg(long)]
    lambda_p: Option<f64>,
    #[arg(long)]
    lambda_f: Option<f64>,
    /// Annealing horizon in iterations (defaults to the iteration count).
    #[arg(long)]
    horizon: Option<usize>,
    /// `domain:multiplier` for the anchor domain's weights.
    #[arg(long)]
    anchor: Option<String>,
}

#[derive(Args, Debug)]
struct ModelInput {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint of a teacher or a multi-domain model.
    #[arg(long)]
    model: PathBuf,
    /// Restrict to one domain.
    #[arg(long)]
    domain: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_parser = ClassifierKind::from_str)]
    classifier: Option<ClassifierKind>,
    #[arg(long, value_parser = Regime::from_str)]
    regime: Option<Regime>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Adaptation learning rate.
    #[arg(long)]
    adapt_lr: Option<f64>,
    #[arg(long)]
    adapt_iters: Option<usize>,
    /// Report CSV path; the table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrievalArgs {
    #[command(flatten)]
    input: ModelInput,
    /// Comma-separated neighbour counts.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CkaArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelSpec>,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[command(flatten)]
    input: ModelInput,
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitKind>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_kernel(s: &str) -> std::result::Result<KernelSpec, String> {
    match s {
        "linear" => Ok(KernelSpec::Linear),
        "rbf" => Ok(KernelSpec::default()),
        _ => Err(format!("unknown kernel {s:?} (expected linear or rbf)")),
    }
}

fn parse_split(s: &str) -> std::result::Result<SplitKind, String> {
    SplitKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("unknown split {s:?} (expected train, val or test)"))
}

fn parse_list<T: FromStr>(key: &str, s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("--{key}: cannot parse {p:?}"))))
        .collect()
}

/// Values from a `key = value` file. Blank lines and `#` comments are
/// skipped; underscores in keys read as dashes.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key = value", i + 1)))?;
            values.insert(k.trim().replace('_', "-"), v.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Flag value, else file value, else `None`.
    pub fn opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        self.raw(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::Usage(format!("config key {key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    pub fn get<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        Ok(self.opt(flag, key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T> {
        self.opt(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("--{key} is required (flag or config file)")))
    }
}

/// Writes a feature matrix: a text line `"n d\n"` followed by `n * d`
/// little-endian `f64` values.
pub fn write_feature_file(path: &Path, feats: &Tensor) -> std::io::Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{} {}", feats.rows(), feats.cols())?;
    for v in feats.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()
}

pub fn read_feature_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let bad = |d: &str| CliError::Data(format!("{}: {d}", path.display()));
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| bad("header is not text"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("header must be \"n d\"")))
        .collect::<Result<_>>()?;
    let [n, d] = dims[..] else {
        return Err(bad("header must be \"n d\""));
    };
    let payload = &bytes[nl + 1..];
    if payload.len() != n * d * 8 {
        return Err(bad(&format!("expected {} payload bytes, found {}", n * d * 8, payload.len())));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
    Tensor::new(&[n, d], data).map_err(|e| bad(&e.to_string()))
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    match MultiDomainModel::load(path) {
        Ok(m) => Ok(m.backbone),
        Err(NetError::Layout(_)) => Ok(SingleDomainNet::load(path)?.backbone),
        Err(e) => Err(e.into()),
    }
}

fn select_domains(all: Vec<DomainDataset>, only: Option<&str>) -> Result<Vec<DomainDataset>> {
    match only {
        None => Ok(all),
        Some(name) => {
            let picked: Vec<_> = all.into_iter().filter(|d| d.name == name).collect();
            if picked.is_empty() {
                return Err(CliError::Data(format!("no domain named {name}")));
            }
            Ok(picked)
        }
    }
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body)?;
    Ok(())
}

struct TrainSetup {
    seed: u64,
    model: ModelConfig,
    train: TrainConfig,
}

fn train_setup(cfg: &ConfigFile, o: &TrainOpts) -> Result<TrainSetup> {
    let dm = ModelConfig::default();
    let dt = TrainConfig::default();
    let hidden = match cfg.opt(o.hidden.clone(), "hidden")? {
        Some(s) => parse_list("hidden", &s)?,
        None => dm.hidden,
    };
    let batch_weights = match cfg.opt(o.batch_weights.clone(), "batch-weights")? {
        Some(s) => parse_list("batch-weights", &s)?,
        None => dt.batch_weights,
    };
    let early_stopping = !o.no_early_stopping && cfg.get(None, "early-stopping", dt.early_stopping)?;
    let train = TrainConfig {
        sgd: train::SgdConfig {
            lr: cfg.get(o.lr, "lr", dt.sgd.lr)?,
            momentum: cfg.get(o.momentum, "momentum", dt.sgd.momentum)?,
            weight_decay: cfg.get(o.weight_decay, "weight-decay", dt.sgd.weight_decay)?,
            anneal_every: cfg.get(o.anneal_every, "anneal-every", dt.sgd.anneal_every)?,
            max_iters: cfg.get(o.iters, "iters", dt.sgd.max_iters)?,
        },
        batch_size: cfg.get(o.batch_size, "batch-size", dt.batch_size)?,
        batch_weights,
        early_stopping,
    };
    train.sgd.validate()?;
    if train.batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    Ok(TrainSetup {
        seed: cfg.required(o.seed, "seed")?,
        model: ModelConfig {
            hidden,
            feature_dim: cfg.get(o.feature_dim, "feature-dim", dm.feature_dim)?,
        },
        train,
    })
}

fn write_trace<M>(path: Option<&PathBuf>, out: &TrainOutcome<M>) -> Result<()> {
    if let Some(p) = path {
        let mut buf = Vec::new();
        train::write_trace_csv(&out.trace, &mut buf)?;
        write_file(p, &buf)?;
    }
    Ok(())
}

fn report_training<M>(what: &str, out: &TrainOutcome<M>) {
    match out.validation.iter().find(|(it, _)| *it == out.best_iteration) {
        Some((_, acc)) => println!(
            "{what}: kept iteration {} (validation accuracy {:.4})",
            out.best_iteration, acc
        ),
        None => println!("{what}: trained {} iterations", out.best_iteration),
    }
}

fn cmd_gen(cfg: &ConfigFile, a: &GenArgs) -> Result<()> {
    let d = SyntheticSpec::default();
    let spec = SyntheticSpec {
        domains: cfg.get(a.domains, "domains", d.domains)?,
        train_classes: cfg.get(a.train_classes, "train-classes", d.train_classes)?,
        val_classes: cfg.get(a.val_classes, "val-classes", d.val_classes)?,
        test_classes: cfg.get(a.test_classes, "test-classes", d.test_classes)?,
        samples_per_class: cfg.get(a.samples_per_class, "samples-per-class", d.samples_per_class)?,
        latent_dim: cfg.get(a.latent_dim, "latent-dim", d.latent_dim)?,
        input_dim: cfg.get(a.input_dim, "input-dim", d.input_dim)?,
        noise: cfg.get(a.noise, "noise", d.noise)?,
    };
    let seed = cfg.get(a.seed, "seed", 0)?;
    let datasets = data::generate_synthetic(&spec, seed).map_err(|e| match e {
        DataError::InvalidSpec(m) => CliError::Usage(m),
        e => e.into(),
    })?;
    data::save_benchmark(&datasets, &a.out)?;
    for ds in &datasets {
        println!(
            "{}: {} train / {} val / {} test samples",
            ds.name,
            ds.train.len(),
            ds.val.len(),
            ds.test.len()
        );
    }
    Ok(())
}

fn cmd_train_sdl(cfg: &ConfigFile, a: &TrainSdlArgs) -> Result<()> {
    let setup = train_setup(cfg, &a.opts)?;
    let all = data::load_benchmark(&a.opts.data)?;
    let ds = select_domains(all, Some(&a.domain))?.remove(0);
    let out = train::train_single_domain(&ds, &setup.model, &setup.train, setup.seed)?;
    out.model.save(&a.opts.out)?;
    write_trace(a.opts.trace.as_ref(), &out)?;
    report_training(&format!("teacher {}", ds.name), &out);
    Ok(())
}

fn cmd_train_mdl(cfg: &ConfigFile, a: &TrainMdlArgs) -> Result<()> {
    let setup = train_setup(cfg, &a.opts)?;
    let all = data::load_benchmark(&a.opts.data)?;
    let refs: Vec<&DomainDataset> = all.iter().collect();
    let out = train::train_mdl(&refs, &setup.model, &setup.train, setup.seed)?;
    out.model.save(&a.opts.out)?;
    write_trace(a.opts.trace.as_ref(), &out)?;
    report_training("multi-domain model", &out);
    Ok(())
}

fn cmd_train_url(cfg: &ConfigFile, a: &TrainUrlArgs) -> Result<()> {
    let setup = train_setup(cfg, &a.opts)?;
    let all = data::load_benchmark(&a.opts.data)?;
    let refs: Vec<&DomainDataset> = all.iter().collect();
    let teacher_paths = cfg.required(Some(a.teachers.clone()), "teachers")?;
    let teachers = TeacherBank::new(
        teacher_paths
            .split(',')
            .map(|p| SingleDomainNet::load(Path::new(p.trim())))
            .collect::<std::result::Result<Vec<_>, _>>()?,
    );
    let kind = cfg.get(a.feature_loss, "feature-loss", FeatureLoss::Cka)?;
    let use_kl = a.kl || cfg.get(None, "kl", false)?;
    let base = DistillConfig::with_losses(kind, use_kl);
    let kernel = match cfg.opt(None::<String>, "kernel")? {
        _ if a.kernel.is_some() => a.kernel.expect("checked"),
        Some(k) => parse_kernel(&k).map_err(CliError::Usage)?,
        None => base.kernel,
    };
    let anchor = match cfg.opt(a.anchor.clone(), "anchor")? {
        None => None,
        Some(s) => {
            let (name, m) = s
                .split_once(':')
                .ok_or_else(|| CliError::Usage("--anchor expects domain:multiplier".into()))?;
            let m: f64 = m.parse().map_err(|_| CliError::Usage(format!("--anchor: bad multiplier {m:?}")))?;
            Some((name.to_string(), m))
        }
    };
    let distill = DistillConfig {
        lambda_p: cfg.get(a.lambda_p, "lambda-p", base.lambda_p)?,
        lambda_f: cfg.get(a.lambda_f, "lambda-f", base.lambda_f)?,
        anchor,
        horizon: cfg.get(a.horizon, "horizon", setup.train.sgd.max_iters.max(1))?,
        kernel,
        ..base
    };
    distill.validate()?;
    let out = train::train_url(&refs, &teachers, &setup.model, &distill, &setup.train, setup.seed)?;
    out.model.save(&a.opts.out)?;
    write_trace(a.opts.trace.as_ref(), &out)?;
    report_training(&format!("distilled model ({kind}{})", if use_kl { "+kl" } else { "" }), &out);
    Ok(())
}

fn cmd_eval(cfg: &ConfigFile, a: &EvalArgs) -> Result<()> {
    let episodes = cfg.get(a.episodes, "episodes", 600)?;
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be at least 1".into()));
    }
    let seed = cfg.required(a.seed, "seed")?;
    let kind = cfg.get(a.classifier, "classifier", ClassifierKind::Ncc)?;
    let regime = cfg.get(a.regime, "regime", Regime::Varying)?;
    let mut classifier = Classifier::new(kind);
    classifier.adapt.optimizer.lr = cfg.get(a.adapt_lr, "adapt-lr", classifier.adapt.optimizer.lr)?;
    classifier.adapt.iterations = cfg.get(a.adapt_iters, "adapt-iters", classifier.adapt.iterations)?;
    classifier.ridge = Ridge::default();

    let backbone = load_backbone(&a.input.model)?;
    let all = select_domains(data::load_benchmark(&a.input.data)?, a.input.domain.as_deref())?;
    let mut reports = Vec::new();
    for ds in &all {
        let r = eval::evaluate_episodes(
            &ds.name,
            &ds.test,
            &backbone,
            &classifier,
            regime,
            episodes,
            &EpisodeConfig::default(),
            seed,
        )?;
        reports.push(r);
    }
    print!("{}", eval::format_report_table(&reports));
    if let Some(p) = &a.out {
        let mut buf = Vec::new();
        eval::write_report_csv(&reports, &mut buf)?;
        write_file(p, &buf)?;
    }
    Ok(())
}

fn cmd_retrieval(cfg: &ConfigFile, a: &RetrievalArgs) -> Result<()> {
    let ks: Vec<usize> = parse_list("k", &cfg.get(a.k.clone(), "k", "1,2,4,8".to_string())?)?;
    if ks.contains(&0) {
        return Err(CliError::Usage("--k values must be positive".into()));
    }
    let backbone = load_backbone(&a.input.model)?;
    let all = select_domains(data::load_benchmark(&a.input.data)?, a.input.domain.as_deref())?;
    let mut csv = String::from("dataset,k,recall\n");
    for ds in &all {
        let feats = backbone.forward_features(&ds.test.x)?;
        let r = eval::recall_at_k(&feats, &ds.test.labels, &ks)?;
        let cells: Vec<String> = r.iter().map(|(k, v)| format!("R@{k} {:.1}", 100.0 * v)).collect();
        println!("{}  {}", ds.name, cells.join("  "));
        for (k, v) in &r {
            csv.push_str(&format!("{},{k},{v:.6}\n", ds.name));
        }
    }
    if let Some(p) = &a.out {
        write_file(p, csv.as_bytes())?;
    }
    Ok(())
}

fn cmd_cka(cfg: &ConfigFile, a: &CkaArgs) -> Result<()> {
    let kernel = match a.kernel {
        Some(k) => k,
        None => match cfg.opt(None::<String>, "kernel")? {
            Some(k) => parse_kernel(&k).map_err(CliError::Usage)?,
            None => KernelSpec::Rbf(Bandwidth::MedianFraction(0.5)),
        },
    };
    let x = read_feature_file(&a.a)?;
    let y = read_feature_file(&a.b)?;
    println!("{:.6}", losses::cka_dissimilarity(&x, &y, kernel)?);
    Ok(())
}

fn cmd_features(cfg: &ConfigFile, a: &FeaturesArgs) -> Result<()> {
    let split = match a.split {
        Some(s) => s,
        None => match cfg.opt(None::<String>, "split")? {
            Some(s) => parse_split(&s).map_err(CliError::Usage)?,
            None => SplitKind::Test,
        },
    };
    let backbone = load_backbone(&a.input.model)?;
    let all = select_domains(data::load_benchmark(&a.input.data)?, a.input.domain.as_deref())?;
    let [ds] = &all[..] else {
        return Err(CliError::Usage("--domain is required when the benchmark has several domains".into()));
    };
    let feats = backbone.forward_features(&ds.split(split).x)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_feature_file(&a.out, &feats)?;
    println!("{}: wrote {} x {} features", ds.name, feats.rows(), feats.cols());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match &cli.command {
        Command::Gen(a) => cmd_gen(&cfg, a),
        Command::TrainSdl(a) => cmd_train_sdl(&cfg, a),
        Command::TrainMdl(a) => cmd_train_mdl(&cfg, a),
        Command::TrainUrl(a) => cmd_train_url(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Retrieval(a) => cmd_retrieval(&cfg, a),
        Command::Cka(a) => cmd_cka(&cfg, a),
        Command::Features(a) => cmd_features(&cfg, a),
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_precedence() {
        let cfg = ConfigFile::parse("# defaults\nlr = 0.5\nbatch_size=8\n\n").unwrap();
        assert_eq!(cfg.get(Some(0.1), "lr", 0.02).unwrap(), 0.1);
        assert_eq!(cfg.get(None, "lr", 0.02).unwrap(), 0.5);
        assert_eq!(cfg.get::<usize>(None, "batch-size", 32).unwrap(), 8);
        assert_eq!(cfg.get::<usize>(None, "iters", 7).unwrap(), 7);
        assert!(matches!(cfg.get::<usize>(None, "lr", 1), Err(CliError::Usage(_))));
        assert!(ConfigFile::parse("lr 0.5").is_err());
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let t = Tensor::new(&[3, 2], vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        write_feature_file(&p, &t).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"3 2\n"));
        assert_eq!(bytes.len(), 4 + 48);
        assert_eq!(read_feature_file(&p).unwrap(), t);
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_feature_file(&p), Err(CliError::Data(_))));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["unirep", "eval", "--bogus"]), 1);
        assert_eq!(run(["unirep"]), 1);
        assert_eq!(run(["unirep", "--help"]), 0);
        assert_eq!(
            run(["unirep", "eval", "--data", "x", "--model", "y", "--episodes", "0", "--seed", "1"]),
            1
        );
        assert_eq!(run(["unirep", "eval", "--data", "x", "--model", "y", "--classifier", "svm"]), 1);
    }

    #[test]
    fn error_classes_map_to_codes() {
        let e: CliError = TrainError::Diverged {
            iteration: 3,
            detail: "nan".into(),
        }
        .into();
        assert_eq!(e.exit_code(), 3);
        let e: CliError = DataError::EmptyDataset("x".into()).into();
        assert_eq!(e.exit_code(), 2);
        let e: CliError = TrainError::Config("bad".into()).into();
        assert_eq!(e.exit_code(), 1);
        let e: CliError = EvalError::Singular.into();
        assert_eq!(e.exit_code(), 3);
    }
}
