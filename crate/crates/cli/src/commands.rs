use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::index;

use osuda_core::augmentation::Variant;
use osuda_core::data::{load_image_folder, make_synthetic_corpus, select_targets, DomainDataset, SynthConfig};
use osuda_core::evaluation::{aggregate_runs, evaluate, render_table, AggregateReport, MeanStd, MetricsReport, TableFormat};
use osuda_core::rng;
use osuda_core::trainer::{self, Checkpoint, RunData, TrainConfig};
use osuda_core::Error;

use crate::grid::side_by_side;
use crate::manifest::{write_json, write_new_json, RunComplete, RunManifest, COMPLETE_FILE, MANIFEST_FILE};

#[derive(Debug, Parser)]
#[command(name = "osuda", version, about = "One-shot domain adaptation with learned target-styled augmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier and augmenter; all artifacts go to a new run directory.
    Train {
        /// Config file of `key = value` lines. Unset keys keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key; repeatable, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Parent directory of the run directory.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Training seed (overrides `train_seed`).
        #[arg(long)]
        seed: Option<u64>,
        /// Continue the run that wrote this checkpoint, in its own directory.
        #[arg(long, conflicts_with_all = ["config", "set", "seed"])]
        resume: Option<PathBuf>,
    },
    /// Score one or more checkpoints on a class-folder dataset.
    Eval {
        /// Repeat to aggregate several runs into mean ± std.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Labeled evaluation tree.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
        /// Also write the table and reports here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
    },
    /// Write source | target | augmented PNG strips from a trained checkpoint.
    AugmentDump {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        n_samples: usize,
        #[arg(long)]
        out: PathBuf,
        /// Sample-choice seed (default: the run's training seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Source tree (default: the run's `source_root`).
        #[arg(long)]
        source: Option<PathBuf>,
        /// Target tree (default: the run's `target_root`).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Generate the synthetic shapes corpus (`source/` and `target/` trees).
    MakeSynth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_per_class: usize,
        #[arg(long, default_value_t = 4)]
        n_classes: usize,
        #[arg(long, default_value_t = 32)]
        image_size: usize,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Csv,
    Markdown,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Csv => TableFormat::Csv,
            Format::Markdown => TableFormat::Markdown,
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::Config(_) | Error::Usage(_) => CliError::Usage(m),
            Error::NonFinite { .. } => CliError::Runtime(m),
            _ => CliError::Data(m),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            set,
            out,
            seed,
            resume,
        } => match resume {
            Some(ckpt) => cmd_resume(&ckpt),
            None => cmd_train(config.as_deref(), &set, &out, seed),
        },
        Command::Eval {
            checkpoint,
            data,
            format,
            out,
            batch_size,
        } => cmd_eval(&checkpoint, &data, format.into(), out.as_deref(), batch_size),
        Command::AugmentDump {
            checkpoint,
            n_samples,
            out,
            seed,
            source,
            target,
        } => cmd_augment_dump(&checkpoint, n_samples, &out, seed, source, target),
        Command::MakeSynth {
            seed,
            out,
            n_per_class,
            n_classes,
            image_size,
        } => cmd_make_synth(seed, &out, n_per_class, n_classes, image_size),
    }
}

/// Config file, then `--set` overrides in order, then `--seed`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::from_file(p).map_err(|e| match e {
            Error::Path { .. } => CliError::Usage(e.to_string()),
            e => e.into(),
        })?,
        None => TrainConfig::default(),
    };
    for kv in overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(s) = seed {
        cfg.train_seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_root(root: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
    root.clone()
        .ok_or_else(|| CliError::Usage(format!("`{key}` is not set (use --set {key}=PATH)")))
}

struct Datasets {
    source: DomainDataset,
    target: DomainDataset,
    eval: DomainDataset,
}

fn load_datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let source_root = required_root(&cfg.source_root, "source_root")?;
    let target_root = required_root(&cfg.target_root, "target_root")?;
    let source = load_image_folder(source_root)?;
    let target = load_image_folder(&target_root)?;
    let eval = match &cfg.eval_root {
        Some(r) if *r != target_root => load_image_folder(r)?,
        _ => target.clone(),
    };
    if source.class_names != eval.class_names {
        return Err(CliError::Data(format!(
            "source classes {:?} differ from evaluation classes {:?}",
            source.class_names, eval.class_names
        )));
    }
    Ok(Datasets { source, target, eval })
}

fn now() -> String {
    chrono::Local::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, false)
}

/// `<out>/<timestamp>_<label>_seed<seed>`, with a numeric suffix if taken.
fn fresh_run_dir(out: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{stamp}_{}_seed{}", cfg.label(), cfg.train_seed);
    fs::create_dir_all(out).map_err(io_err(out))?;
    for i in 0.. {
        let name = if i == 0 { base.clone() } else { format!("{base}-{i}") };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

fn finish(dir: &Path, started_at: String, outcome: &trainer::TrainOutcome) -> Result<()> {
    let done = RunComplete {
        started_at,
        finished_at: now(),
        batches_done: outcome.checkpoint.progress.batches_done,
        mean_accuracy: outcome.report.mean_accuracy,
        overall_accuracy: outcome.report.overall_accuracy,
    };
    let path = dir.join(COMPLETE_FILE);
    write_json(&path, &done).map_err(io_err(&path))?;
    println!(
        "{}: class-mean accuracy {:.2}, overall {:.2} ({} samples)",
        outcome.checkpoint.config.label(),
        outcome.report.mean_accuracy,
        outcome.report.overall_accuracy,
        outcome.report.n_samples
    );
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn cmd_train(config: Option<&Path>, overrides: &[String], out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = resolve_config(config, overrides, seed)?;
    let data = load_datasets(&cfg)?;
    let targets = select_targets(&data.target, cfg.k_targets, cfg.target_seed, cfg.input_size)?;
    let dir = fresh_run_dir(out, &cfg)?;
    let mut digests = BTreeMap::new();
    digests.insert("source".to_string(), data.source.digest()?);
    digests.insert("target".to_string(), data.target.digest()?);
    digests.insert("eval".to_string(), data.eval.digest()?);
    let manifest = RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        label: cfg.label(),
        config: cfg.entries().into_iter().collect(),
        config_digest: cfg.digest(),
        train_seed: cfg.train_seed,
        target_seed: cfg.target_seed,
        target_indices: targets.indices.clone(),
        dataset_digests: digests,
        started_at: now(),
    };
    let path = dir.join(MANIFEST_FILE);
    write_new_json(&path, &manifest).map_err(io_err(&path))?;
    log::info!("training {} into {}", manifest.label, dir.display());
    let outcome = trainer::train(
        cfg,
        RunData {
            source: &data.source,
            targets: &targets,
            eval: &data.eval,
        },
        &dir,
    )?;
    finish(&dir, manifest.started_at, &outcome)
}

pub fn cmd_resume(ckpt: &Path) -> Result<()> {
    let cfg = Checkpoint::load(ckpt)?.config;
    let dir = ckpt.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    let manifest_path = dir.join(MANIFEST_FILE);
    let started_at = fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .map(|m| m.started_at)
        .unwrap_or_else(now);
    let data = load_datasets(&cfg)?;
    let targets = select_targets(&data.target, cfg.k_targets, cfg.target_seed, cfg.input_size)?;
    let outcome = trainer::resume(
        ckpt,
        RunData {
            source: &data.source,
            targets: &targets,
            eval: &data.eval,
        },
        &dir,
    )?;
    finish(&dir, started_at, &outcome)
}

fn single_run(r: &MetricsReport) -> AggregateReport {
    let one = |v: f64| MeanStd { mean: v, std: 0.0 };
    AggregateReport {
        class_names: r.class_names().iter().map(|s| s.to_string()).collect(),
        per_class: r.per_class_accuracy.iter().map(|c| one(c.accuracy)).collect(),
        mean: one(r.mean_accuracy),
        overall: one(r.overall_accuracy),
        n_runs: 1,
        std_kind: "population".into(),
    }
}

pub fn cmd_eval(
    checkpoints: &[PathBuf],
    data: &Path,
    format: TableFormat,
    out: Option<&Path>,
    batch_size: usize,
) -> Result<()> {
    if batch_size == 0 {
        return Err(CliError::Usage("--batch-size must be positive".into()));
    }
    let ds = load_image_folder(data)?;
    let mut reports = Vec::new();
    for path in checkpoints {
        let c = Checkpoint::load(path)?;
        if c.cm.num_classes() != ds.num_classes() {
            return Err(CliError::Data(format!(
                "{} was trained for {} classes but {} has {}",
                path.display(),
                c.cm.num_classes(),
                data.display(),
                ds.num_classes()
            )));
        }
        reports.push(evaluate(&c.cm, &ds, batch_size, c.config.train_seed)?);
    }
    let agg = if reports.len() == 1 {
        single_run(&reports[0])
    } else {
        aggregate_runs(&reports)?
    };
    let table = render_table(std::slice::from_ref(&agg), format)?;
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let ext = match format {
            TableFormat::Csv => "csv",
            TableFormat::Markdown => "md",
        };
        let p = dir.join(format!("table.{ext}"));
        fs::write(&p, &table).map_err(io_err(&p))?;
        let p = dir.join("reports.json");
        write_json(&p, &reports).map_err(io_err(&p))?;
        if reports.len() > 1 {
            let p = dir.join("aggregate.json");
            write_json(&p, &agg).map_err(io_err(&p))?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct DumpEntry {
    file: String,
    source_index: usize,
    target_index: usize,
    lambda: Option<f64>,
}

pub fn cmd_augment_dump(
    ckpt: &Path,
    n: usize,
    out: &Path,
    seed: Option<u64>,
    source: Option<PathBuf>,
    target: Option<PathBuf>,
) -> Result<()> {
    let c = Checkpoint::load(ckpt)?;
    if c.progress.augmenter_updates == 0 {
        return Err(CliError::Data(format!(
            "{} holds an untrained augmenter (no augmenter updates yet)",
            ckpt.display()
        )));
    }
    let cfg = &c.config;
    let source = load_image_folder(source.map_or_else(|| required_root(&cfg.source_root, "source_root"), Ok)?)?;
    let target = load_image_folder(target.map_or_else(|| required_root(&cfg.target_root, "target_root"), Ok)?)?;
    if n == 0 || n > source.len() {
        return Err(CliError::Usage(format!("--n-samples must be in 1..={}", source.len())));
    }
    let targets = select_targets(&target, cfg.k_targets, cfg.target_seed, cfg.input_size)?;
    let mut rng = rng::stream(seed.unwrap_or(cfg.train_seed), rng::DUMP);
    let picks = index::sample(&mut rng, source.len(), n).into_vec();
    let mixup = cfg.mixup()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut entries = Vec::new();
    for (i, &s) in picks.iter().enumerate() {
        let x_s = source.load_batch(&[s], cfg.input_size)?;
        let t = i % targets.images.len();
        let x_t = targets.batch(t)?;
        let lambda = match cfg.variant {
            Variant::SharedEncoder => Some(mixup.sample(&mut rng)),
            Variant::DisentangledEncoders => None,
        };
        let aug = c.aum.augment_images(&x_s, &x_t, lambda)?;
        let img = side_by_side(&[x_s.image(0), x_t.image(0), aug.image(0)]);
        let file = format!("grid_{i:03}.png");
        let path = out.join(&file);
        img.save(&path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        entries.push(DumpEntry {
            file,
            source_index: s,
            target_index: targets.indices[t],
            lambda,
        });
    }
    let p = out.join("grids.json");
    write_json(&p, &entries).map_err(io_err(&p))?;
    println!("wrote {n} grids to {}", out.display());
    Ok(())
}

pub fn cmd_make_synth(seed: u64, out: &Path, n_per_class: usize, n_classes: usize, image_size: usize) -> Result<()> {
    let cfg = SynthConfig {
        seed,
        n_per_class,
        n_classes,
        image_size,
    };
    let (s, t) = make_synthetic_corpus(&cfg, out)?;
    println!(
        "wrote {} source and {} target images to {}",
        s.len(),
        t.len(),
        out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_win_over_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.conf");
        fs::write(&p, "epochs = 3\nbatch_size = 4\n").unwrap();
        let cfg = resolve_config(Some(&p), &["epochs=7".into()], Some(9)).unwrap();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.train_seed), (7, 4, 9));
    }

    #[test]
    fn unknown_key_is_a_usage_error_naming_it() {
        let e = resolve_config(None, &["epochz=1".into()], None).unwrap_err();
        assert!(matches!(&e, CliError::Usage(m) if m.contains("epochz")), "{e}");
    }

    #[test]
    fn best_configuration_label() {
        let cfg = resolve_config(None, &["variant=DE".into(), "use_rec_loss=true".into()], None).unwrap();
        assert_eq!(cfg.label(), "DE+RL");
    }
}
