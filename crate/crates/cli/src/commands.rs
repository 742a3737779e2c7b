use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Subcommand, ValueEnum};

use pmm_synth::checkpoint::Checkpoint;
use pmm_synth::datamodel::{
    make_mask, read_slice, union_coverage, validate_sample, write_slice, Corpus, DatasetRegistry, Modality,
    ModalityMask, MultiModalSample, Split,
};
use pmm_synth::losses::mask_input;
use pmm_synth::metrics::{psnr, ssim, write_metrics_csv, SsimParams, SynthesisTask};
use pmm_synth::montage::{abs_error, write_montage, Tile};
use pmm_synth::network::forward_generator;
use pmm_synth::phantom::{generate_phantom_corpus, PhantomManifest, PhantomSpec, MANIFEST_FILE};
use pmm_synth::trainer::{
    evaluate_model, prepare_output_dir, run_ablation, train, Arm, EpochSummary, TrainConfig, TrainOptions,
};
use pmm_synth::{Error, Tensor};

#[derive(Subcommand)]
pub enum Command {
    /// Render a deterministic phantom corpus from a spec document.
    GeneratePhantom {
        /// Phantom spec (TOML); also usable as the registry file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace a non-empty output directory.
        #[arg(long)]
        overwrite: bool,
    },
    /// Train a model and score the configured tasks on the test split.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from a checkpoint (registry and corpus must match).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize target modalities for one slice directory.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Slice directory (meta.json plus rasters).
        #[arg(long)]
        input: PathBuf,
        /// Source modalities, e.g. `T1,T2,FLAIR`.
        #[arg(long, value_delimiter = ',', required = true)]
        sources: Vec<String>,
        /// Target modalities, e.g. `T1C,DWI,ADC`.
        #[arg(long, value_delimiter = ',', required = true)]
        targets: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write `montage.png`.
        #[arg(long)]
        montage: bool,
        #[arg(long)]
        overwrite: bool,
    },
    /// Score a checkpoint on a corpus split and write metrics.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Task such as `T1->T2` or `T1,T2->FLAIR`; repeatable.
        #[arg(long = "task")]
        tasks: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train matched-seed ablation arms and compare them.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Arms to train, e.g. `full,no-pfm,no-mcbs`.
        #[arg(long, value_delimiter = ',')]
        arms: Option<Vec<String>>,
        /// Repetition seeds, e.g. `1,2,3`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Load and validate every slice of a corpus.
    ValidateCorpus {
        #[arg(long)]
        corpus: PathBuf,
        /// Registry document; defaults to the corpus's phantom manifest.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn enabled(self) -> bool {
        matches!(self, Toggle::On)
    }
}

#[derive(Args)]
pub struct RunArgs {
    /// Training config (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Corpus root (overrides `data.corpus`).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Registry document (overrides `data.registry`).
    #[arg(long)]
    registry: Option<PathBuf>,
    /// Dataset-conditioned modulation.
    #[arg(long, value_enum)]
    pfm: Option<Toggle>,
    /// Modality-consistent batching; `off` forces batch size 1.
    #[arg(long, value_enum)]
    mcbs: Option<Toggle>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
    #[arg(long)]
    overwrite: bool,
}

impl RunArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::from_file(&self.config)?;
        if let Some(p) = &self.corpus {
            cfg.data.corpus = Some(p.clone());
        }
        if let Some(p) = &self.registry {
            cfg.data.registry = Some(p.clone());
        }
        if let Some(t) = self.pfm {
            cfg.model.pfm_enabled = t.enabled();
        }
        if let Some(t) = self.mcbs {
            cfg.train.mcbs_enabled = t.enabled();
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            cfg.train.lr_plateau_epochs = cfg.train.lr_plateau_epochs.min(e);
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(s) = self.seed {
            cfg.seeds.global = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Registry from an explicit document, else from the corpus's phantom manifest.
fn load_registry(explicit: Option<&Path>, corpus: &Path) -> Result<DatasetRegistry> {
    if let Some(p) = explicit {
        return Ok(DatasetRegistry::from_file(p)?);
    }
    let manifest = corpus.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(Error::Validation(format!(
            "no registry given and {} has no {MANIFEST_FILE}",
            corpus.display()
        ))
        .into());
    }
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let m: PhantomManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest.clone(),
        message: e.to_string(),
    })?;
    Ok(m.spec.registry()?)
}

fn load_inputs(cfg: &TrainConfig) -> Result<(DatasetRegistry, Corpus)> {
    let root = cfg
        .data
        .corpus
        .as_deref()
        .ok_or_else(|| Error::field("data.corpus", "no corpus given (set it or pass --corpus)"))?;
    if !root.is_dir() {
        return Err(Error::Validation(format!("corpus directory {} does not exist", root.display())).into());
    }
    let registry = load_registry(cfg.data.registry.as_deref(), root)?;
    let corpus = Corpus::load(root, &registry)?;
    Ok((registry, corpus))
}

/// Records the invocation before any heavy work starts.
fn write_invocation(dir: &Path, command: &str, details: serde_json::Value) -> Result<()> {
    let record = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "args": std::env::args().collect::<Vec<_>>(),
        "details": details,
    });
    let path = dir.join("invocation.json");
    fs::write(&path, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn progress(quiet: bool, total: usize) -> impl FnMut(&EpochSummary) {
    move |s: &EpochSummary| {
        if !quiet {
            eprintln!(
                "epoch {:>3}/{total}  L_G {:>9.4}  (syn {:.4} rec {:.4} adv {:.4})  L_D {:.4}  lr {:.2e}  {:.1}s",
                s.epoch + 1,
                s.mean_total,
                s.mean_syn,
                s.mean_rec,
                s.mean_adv,
                s.mean_d_loss,
                s.lr,
                s.wall_clock_s
            );
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GeneratePhantom { spec, out, overwrite } => generate(&spec, &out, overwrite),
        Command::Train { run, resume } => cmd_train(&run, resume.as_deref()),
        Command::Synthesize {
            checkpoint,
            input,
            sources,
            targets,
            out,
            montage,
            overwrite,
        } => synthesize(&checkpoint, &input, &sources, &targets, &out, montage, overwrite),
        Command::Evaluate {
            checkpoint,
            corpus,
            tasks,
            split,
            out,
            overwrite,
        } => evaluate(&checkpoint, &corpus, &tasks, &split, &out, overwrite),
        Command::Ablate { run, arms, seeds } => ablate(&run, arms, seeds),
        Command::ValidateCorpus { corpus, registry } => validate_corpus(&corpus, registry.as_deref()),
    }
}

fn generate(spec: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let spec = PhantomSpec::from_file(spec)?;
    let manifest = generate_phantom_corpus(&spec, out, overwrite)?;
    let slices: usize = manifest.cases.iter().map(|c| c.slices.len()).sum();
    println!(
        "wrote {} cases ({slices} slices) across {} datasets to {}",
        manifest.cases.len(),
        spec.datasets.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: &RunArgs, resume: Option<&Path>) -> Result<()> {
    let cfg = args.config()?;
    let (registry, corpus) = load_inputs(&cfg)?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    prepare_output_dir(&args.out, args.overwrite)?;
    write_invocation(&args.out, "train", cfg.to_json())?;
    let mut hook = progress(args.quiet, cfg.train.epochs);
    let outcome = train(
        &cfg,
        &registry,
        &corpus,
        TrainOptions {
            out: Some(args.out.clone()),
            resume,
            on_epoch: Some(&mut hook),
        },
    )?;
    for row in &outcome.manifest.metrics {
        println!("{row}");
    }
    println!("run written to {}", args.out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn synthesize(
    checkpoint: &Path,
    input: &Path,
    sources: &[String],
    targets: &[String],
    out: &Path,
    montage: bool,
    overwrite: bool,
) -> Result<()> {
    let sources = make_mask(sources)?;
    let targets = make_mask(targets)?;
    let overlap = sources.intersect(targets);
    if !overlap.is_empty() {
        return Err(Error::InvalidTask(format!("{} requested as both source and target", overlap.names())).into());
    }
    if targets.is_empty() {
        return Err(Error::InvalidTask("no target modality".into()).into());
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let generator = &ckpt.generator;
    let (sample, split) = read_slice(input, &ckpt.registry)?;
    if !sources.is_subset_of(sample.availability) {
        return Err(Error::InvalidTask(format!(
            "sources {} not all available in the input (available: {})",
            sources.names(),
            sample.availability.names()
        ))
        .into());
    }
    if !targets.is_subset_of(generator.coverage) {
        return Err(Error::InvalidTask(format!(
            "targets {} outside the model's coverage {}",
            targets.names(),
            generator.coverage.names()
        ))
        .into());
    }
    prepare_output_dir(out, overwrite)?;
    write_invocation(
        out,
        "synthesize",
        serde_json::json!({ "sources": sources.names(), "targets": targets.names() }),
    )?;

    let x = mask_input(&sample.images, sample.availability, sources)?;
    let y = forward_generator(&x, sources, sample.dataset_id, generator)?;
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let mut images = Tensor::zeros(&[6, h, w]);
    for m in targets.modalities() {
        let i = m.index();
        images.data_mut()[i * plane..][..plane].copy_from_slice(&y.data()[i * plane..][..plane]);
    }
    let synthetic = MultiModalSample {
        images,
        availability: targets,
        dataset_id: sample.dataset_id,
        case_id: sample.case_id.clone(),
        slice_index: sample.slice_index,
    };
    let synthetic = validate_sample(synthetic, &synthetic_registry(&ckpt.registry)?)?;
    let dataset = &ckpt.registry.datasets()[sample.dataset_id].name;
    let written = write_slice(out, dataset, &synthetic, split)?;
    println!("wrote {} to {}", targets.names(), written.display());

    for m in targets.modalities().filter(|m| sample.availability.contains(*m)) {
        let p = psnr(sample.channel(m), synthetic.channel(m), 1.0)?;
        let s = ssim(sample.channel(m), synthetic.channel(m), h, w, &SsimParams::default()).ok();
        match s {
            Some(s) => println!("{m}: PSNR {p:.2} dB  SSIM {s:.4} against the input's ground truth"),
            None => println!("{m}: PSNR {p:.2} dB against the input's ground truth"),
        }
    }
    if montage {
        write_slice_montage(&sample, &synthetic, sources, targets, &out.join("montage.png"))?;
    }
    Ok(())
}

/// Same datasets with every coverage widened to the union, so synthesized
/// channels count as available.
fn synthetic_registry(registry: &DatasetRegistry) -> Result<DatasetRegistry> {
    let all = union_coverage(registry)?;
    Ok(DatasetRegistry::new(
        registry.datasets().iter().map(|d| (d.name.clone(), all, d.profile)).collect(),
    )?)
}

fn write_slice_montage(
    real: &MultiModalSample,
    synthetic: &MultiModalSample,
    sources: ModalityMask,
    targets: ModalityMask,
    path: &Path,
) -> Result<()> {
    let (h, w) = (real.height(), real.width());
    let blank = vec![0.0; h * w];
    let errors: Vec<(Modality, Vec<f64>)> = targets
        .modalities()
        .map(|m| {
            let err = if real.availability.contains(m) {
                abs_error(real.channel(m), synthetic.channel(m))
            } else {
                blank.clone()
            };
            (m, err)
        })
        .collect();
    let rows: Vec<Vec<Tile<'_>>> = errors
        .iter()
        .map(|(m, err)| {
            let mut row: Vec<Tile<'_>> = sources.modalities().map(|s| Tile { pixels: real.channel(s) }).collect();
            row.push(Tile {
                pixels: synthetic.channel(*m),
            });
            row.push(Tile {
                pixels: real.channel(*m),
            });
            row.push(Tile { pixels: err });
            row
        })
        .collect();
    write_montage(path, &rows, h, w)?;
    Ok(())
}

fn evaluate(checkpoint: &Path, corpus: &Path, tasks: &[String], split: &str, out: &Path, overwrite: bool) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::EmptyTask("pass at least one --task".into()).into());
    }
    let tasks = tasks
        .iter()
        .map(|t| SynthesisTask::parse(t))
        .collect::<pmm_synth::Result<Vec<_>>>()?;
    let split: Split = split.parse()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let corpus = Corpus::load(corpus, &ckpt.registry)?;
    prepare_output_dir(out, overwrite)?;
    write_invocation(
        out,
        "evaluate",
        serde_json::json!({ "tasks": tasks.iter().map(|t| t.label()).collect::<Vec<_>>(), "split": split.to_string() }),
    )?;
    let rows = evaluate_model(&ckpt.generator, &ckpt.registry, &corpus, split, &tasks)?;
    write_metrics_csv(&out.join("metrics.csv"), &rows)?;
    for row in &rows {
        println!("{row}");
    }
    Ok(())
}

fn parse_arm(name: &str) -> Result<Arm> {
    match name.trim() {
        "full" => Ok(Arm::Full),
        "no-pfm" => Ok(Arm::NoPfm),
        "no-mcbs" => Ok(Arm::NoMcbs),
        other => Err(Error::field("ablation.arms", format!("unknown arm `{other}`")).into()),
    }
}

fn ablate(args: &RunArgs, arms: Option<Vec<String>>, seeds: Option<Vec<u64>>) -> Result<()> {
    let mut cfg = args.config()?;
    if let Some(arms) = arms {
        cfg.ablation.arms = arms.iter().map(|a| parse_arm(a)).collect::<Result<_>>()?;
    }
    if let Some(seeds) = seeds {
        cfg.ablation.seeds = seeds;
    }
    let (registry, corpus) = load_inputs(&cfg)?;
    prepare_output_dir(&args.out, args.overwrite)?;
    write_invocation(&args.out, "ablate", cfg.to_json())?;
    let quiet = args.quiet;
    let report = run_ablation(&cfg, &registry, &corpus, Some(&args.out), &mut |arm, seed, m| {
        if !quiet {
            let last = m.epochs.last();
            eprintln!(
                "arm {:<8} seed {seed}: final L_G {:.4}, {:.2}s/epoch",
                arm.name(),
                last.map_or(f64::NAN, |e| e.mean_total),
                m.mean_epoch_seconds()
            );
        }
    })
    .context("ablation failed")?;

    let mut summary = serde_json::Map::new();
    for &seed in &cfg.ablation.seeds {
        for &arm in &cfg.ablation.arms {
            for (dataset, p) in report.dataset_psnr(arm, seed) {
                println!("seed {seed}  {:<8} {dataset:<12} mean PSNR {p:.3} dB", arm.name());
            }
        }
    }
    let arms = &cfg.ablation.arms;
    if arms.contains(&Arm::Full) && arms.contains(&Arm::NoPfm) {
        let (won, total) = report.wins(Arm::Full, Arm::NoPfm);
        println!("full >= no-pfm on every dataset in {won}/{total} repetitions");
        summary.insert("full_vs_no_pfm".into(), serde_json::json!({ "wins": won, "repetitions": total }));
    }
    for &arm in arms {
        if let Some(t) = report.mean_epoch_seconds(arm) {
            println!("{:<8} mean epoch wall-clock {t:.3}s", arm.name());
            summary.insert(format!("epoch_seconds.{}", arm.name()), t.into());
        }
    }
    let path = args.out.join("summary.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn validate_corpus(root: &Path, registry: Option<&Path>) -> Result<()> {
    let registry = load_registry(registry, root)?;
    let corpus = Corpus::load(root, &registry)?;
    println!("{} slices valid", corpus.len());
    for ds in registry.datasets() {
        for split in [Split::Train, Split::Test] {
            let n = corpus
                .entries
                .iter()
                .filter(|e| e.sample.dataset_id == ds.id && e.split == split)
                .count();
            if n > 0 {
                println!("  {:<12} {split:<5} {n}", ds.name);
            }
        }
    }
    println!("content hash {}", corpus.content_hash());
    Ok(())
}
