use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use skelcomp::data::ntu::{ingest_directory, Part, Split};
use skelcomp::data::skd::{read_dataset, write_dataset};
use skelcomp::data::{synth_generate, Dataset, ModalitySet, SynthConfig};
use skelcomp::eval::{
    append_csv, extract_bank, knn_retrieve, linear_probe, semi_supervised, transfer, write_bank, FinetuneConfig,
    ProbeConfig, ResultRow,
};
use skelcomp::train::{load_model, Checkpoint, MetricsLog, TrainConfig, Trainer};

const DATA_DIR_ENV: &str = "DCC_DATA_DIR";

#[derive(Parser)]
#[command(name = "skelcomp", version, about = "Multimodal skeleton representation learning")]
struct Cli {
    /// Worker threads for data-parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-view dataset.
    Synth(SynthArgs),
    /// Convert a directory of NTU RGB+D `.skeleton` files.
    IngestNtu(IngestArgs),
    /// Self-supervised pretraining.
    Pretrain(PretrainArgs),
    /// Downstream evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Write a feature bank.
    Export(ExportArgs),
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 600)]
    performances: usize,
    #[arg(long, default_value_t = 2)]
    views: usize,
    #[arg(long, default_value_t = 11)]
    joints: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// First class program; datasets sharing programs share motions.
    #[arg(long, default_value_t = 0)]
    class_offset: u32,
    #[arg(long, default_value = "synth.skd")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct IngestArgs {
    /// Directory of `.skeleton` files; defaults to $DCC_DATA_DIR.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value = "xsub")]
    split: String,
    #[arg(long, default_value = "train")]
    part: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PretrainArgs {
    /// TOML or JSON document with TrainConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration used when --config is absent.
    #[arg(long, default_value = "desk", conflicts_with = "config")]
    preset: String,
    #[arg(long, default_value = "synth.skd")]
    data: PathBuf,
    #[arg(long, default_value = "runs/pretrain")]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    multiview: Option<bool>,
    #[arg(long)]
    modalities: Option<ModalitySet>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_steps: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Protocol {
    Linear,
    Knn,
    Semi,
    Transfer,
}

impl Protocol {
    fn name(self) -> &'static str {
        match self {
            Protocol::Linear => "linear",
            Protocol::Knn => "knn",
            Protocol::Semi => "semi",
            Protocol::Transfer => "transfer",
        }
    }
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    protocol: Protocol,
    /// Training split. Without --test, performances with id % 3 == 2 are held
    /// out as the test split.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "J,B,M")]
    modalities: ModalitySet,
    /// Labeled fraction for the semi protocol.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probe or fine-tuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Comma-separated dataset joint index for every model joint (transfer).
    #[arg(long)]
    joint_map: Option<String>,
    /// Name recorded in the results file; defaults to the train file stem.
    #[arg(long)]
    dataset_name: Option<String>,
    #[arg(long, default_value = "results.csv")]
    results: PathBuf,
}

#[derive(Args, Serialize)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "J,B,M")]
    modalities: ModalitySet,
    #[arg(long, default_value = "all")]
    split: String,
    #[arg(long)]
    out: PathBuf,
}

/// Invalid invocation detected after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    seed: u64,
    code_version: &'static str,
    started_at: u64,
    finished_at: u64,
    outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_manifest<C: Serialize>(path: &Path, command: &str, config: &C, seed: u64, started_at: u64, outputs: &[&Path]) -> Result<()> {
    let m = RunManifest {
        command,
        config,
        seed,
        code_version: env!("CARGO_PKG_VERSION"),
        started_at,
        finished_at: now(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    };
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(&m)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Resolves an input path, falling back to $DCC_DATA_DIR for relative paths
/// that do not exist.
fn input_path(p: &Path) -> Result<PathBuf> {
    if p.exists() {
        return Ok(p.to_path_buf());
    }
    if p.is_relative() {
        if let Some(root) = std::env::var_os(DATA_DIR_ENV) {
            let alt = Path::new(&root).join(p);
            if alt.exists() {
                return Ok(alt);
            }
        }
    }
    Err(usage(format!("input file {} not found", p.display())))
}

fn load_dataset(p: &Path) -> Result<Dataset> {
    let path = input_path(p)?;
    read_dataset(&path).with_context(|| format!("reading {}", path.display()))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let started = now();
    let cfg = SynthConfig {
        n_classes: a.classes,
        n_performances: a.performances,
        n_views: a.views,
        n_joints: a.joints,
        n_frames: a.frames,
        noise_sd: a.noise,
        seed: a.seed,
        class_offset: a.class_offset,
        ..SynthConfig::default()
    };
    if a.views == 0 || a.classes < 2 || a.performances == 0 || a.joints < 2 || a.frames < 2 {
        return Err(usage("need --views >= 1, --classes >= 2, --performances >= 1, --joints >= 2, --frames >= 2"));
    }
    let ds = synth_generate(&cfg).map_err(|e| usage(e.to_string()))?;
    write_dataset(&ds, &a.out)?;
    println!("wrote {} sequences to {}", ds.len(), a.out.display());
    write_manifest(&manifest_path(&a.out), "synth", &cfg, a.seed, started, &[&a.out])
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let started = now();
    let split: Split = a.split.parse().map_err(|e: skelcomp::Error| usage(e.to_string()))?;
    let part: Part = a.part.parse().map_err(|e: skelcomp::Error| usage(e.to_string()))?;
    let dir = match &a.input {
        Some(d) => d.clone(),
        None => std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| usage(format!("no --input given and {DATA_DIR_ENV} is unset")))?,
    };
    if !dir.is_dir() {
        return Err(usage(format!("{} is not a directory", dir.display())));
    }
    let (ds, report) = ingest_directory(&dir, split, part)?;
    write_dataset(&ds, &a.out)?;
    println!(
        "ingested {} clips ({} skipped: unrecognized names {}, no bodies {}) into {}",
        report.ingested,
        report.skipped_names.len() + report.skipped_empty.len(),
        report.skipped_names.len(),
        report.skipped_empty.len(),
        a.out.display()
    );
    write_manifest(&manifest_path(&a.out), "ingest-ntu", a, 0, started, &[&a.out])
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    let path = input_path(path)?;
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    } else {
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
    };
    Ok(cfg)
}

fn resolve_train_config(a: &PretrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::preset(&a.preset).map_err(|e| usage(e.to_string()))?,
    };
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
        if cfg.drop_epoch > e {
            cfg.drop_epoch = ((e as f64 * 0.8).round() as usize).max(1);
        }
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(v) = a.alpha {
        cfg.loss.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.loss.beta = v;
    }
    if let Some(v) = a.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = a.multiview {
        cfg.multiview = v;
    }
    if let Some(m) = &a.modalities {
        cfg.model.modalities = m.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.log_steps {
        cfg.log_steps = true;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_pretrain(a: &PretrainArgs) -> Result<()> {
    let started = now();
    let cfg = resolve_train_config(a)?;
    let data = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let config_path = a.out_dir.join("config.toml");
    let ckpt_path = a.out_dir.join("checkpoint.dcc");
    let metrics_path = a.out_dir.join("metrics.jsonl");
    fs::write(&config_path, toml::to_string(&cfg)?)?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(&cfg, &Checkpoint::load(input_path(p)?)?)?,
        None => {
            // A fresh run starts a fresh log.
            if metrics_path.exists() {
                fs::remove_file(&metrics_path)?;
            }
            Trainer::new(&cfg)?
        }
    };
    let mut log = MetricsLog::to_file(&metrics_path)?;
    trainer.fit(&data, &mut log, Some(&ckpt_path))?;
    if let Some(last) = log.epochs().last() {
        println!("epoch {} total loss {:.6}", trainer.epoch - 1, last.total());
    }
    println!("checkpoint {}", ckpt_path.display());
    write_manifest(
        &a.out_dir.join("run_manifest.json"),
        "pretrain",
        &cfg,
        cfg.seed,
        started,
        &[&config_path, &ckpt_path, &metrics_path],
    )
}

fn parse_joint_map(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| usage(format!("bad joint map entry {t:?}"))))
        .collect()
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let started = now();
    if a.fraction.is_some() && a.protocol != Protocol::Semi {
        return Err(usage("--fraction only applies to --protocol semi"));
    }
    if a.k.is_some() && a.protocol != Protocol::Knn {
        return Err(usage("--k only applies to --protocol knn"));
    }
    if a.joint_map.is_some() && a.protocol != Protocol::Transfer {
        return Err(usage("--joint-map only applies to --protocol transfer"));
    }
    let fraction = match a.protocol {
        Protocol::Semi => {
            let f = a.fraction.ok_or_else(|| usage("--protocol semi requires --fraction"))?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(usage(format!("--fraction {f} outside (0, 1]")));
            }
            Some(f)
        }
        _ => None,
    };
    let model = load_model(input_path(&a.checkpoint)?)?;
    let train_all = load_dataset(&a.train)?;
    let (train, test) = match &a.test {
        Some(p) => (train_all, load_dataset(p)?),
        None => train_all.split_by_performance(|p| p % 3 != 2),
    };
    let subset = &a.modalities;
    let ft = FinetuneConfig {
        epochs: a.epochs.unwrap_or(FinetuneConfig::default().epochs),
        seed: a.seed,
        modalities: subset.clone(),
        ..FinetuneConfig::default()
    };
    let accuracy = match a.protocol {
        Protocol::Linear | Protocol::Knn => {
            let tr = extract_bank(&model, &train, subset, "train")?;
            let te = extract_bank(&model, &test, subset, "test")?;
            if a.protocol == Protocol::Linear {
                let probe = ProbeConfig {
                    epochs: a.epochs.unwrap_or(ProbeConfig::default().epochs),
                    ..ProbeConfig::default()
                };
                linear_probe(&tr, &te, &probe)?
            } else {
                knn_retrieve(&tr, &te, a.k.unwrap_or(1))?
            }
        }
        Protocol::Semi => semi_supervised(model, &train, &test, fraction.unwrap_or(1.0), &ft)?,
        Protocol::Transfer => {
            let map = a.joint_map.as_deref().map(parse_joint_map).transpose()?;
            transfer(model, &train, &test, map.as_deref(), &ft)?
        }
    };
    let dataset = a.dataset_name.clone().unwrap_or_else(|| {
        a.train
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let row = ResultRow {
        protocol: a.protocol.name().into(),
        dataset,
        modality_subset: subset.to_string(),
        fraction,
        seed: a.seed,
        accuracy,
    };
    println!(
        "protocol={} dataset={} modalities={} accuracy={:.4}",
        row.protocol, row.dataset, row.modality_subset, row.accuracy
    );
    append_csv(&a.results, &[row])?;
    write_manifest(&manifest_path(&a.results), "eval", a, a.seed, started, &[&a.results])
}

fn cmd_export(a: &ExportArgs) -> Result<()> {
    let started = now();
    let model = load_model(input_path(&a.checkpoint)?)?;
    let data = load_dataset(&a.data)?;
    let bank = extract_bank(&model, &data, &a.modalities, &a.split)?;
    write_bank(&bank, &a.out)?;
    println!("wrote {} x {} features to {}", bank.len(), bank.width(), a.out.display());
    write_manifest(&manifest_path(&a.out), "export", a, 0, started, &[&a.out])
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use skelcomp::Error as E;
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 2,
                E::Numerical(_) => 4,
                E::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
                _ => 3,
            };
        }
        if cause.downcast_ref::<toml::ser::Error>().is_some() {
            return 3;
        }
    }
    3
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    skelcomp::exec::set_worker_threads(cli.workers.max(1));
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::IngestNtu(a) => cmd_ingest(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
