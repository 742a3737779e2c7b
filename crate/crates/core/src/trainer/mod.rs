//! Optimisation loop: per-epoch batch plans, one synthesis condition per
//! batch, a generator step then a discriminator step, checkpoints and a
//! run manifest.

mod ablation;
mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

pub use ablation::{run_ablation, AblationReport, AblationRow, ArmTiming};
pub use config::{
    lr_at_epoch, AblationConfig, Arm, DataConfig, EvalConfig, LrSchedule, SeedConfig, TrainConfig, TrainSection,
};

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::datamodel::{Corpus, DatasetRegistry, Modality, ModalityMask, MultiModalSample, Split, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::losses::{
    discriminator_step_objective, generator_objective, mask_input, sample_condition, targets, LossLogRow,
    LOSS_LOG_HEADER,
};
use crate::metrics::{evaluate_task, write_metrics_csv, MetricRow, SsimParams, SynthesisTask};
use crate::montage::{abs_error, write_montage, Tile};
use crate::network::{DiscriminatorBank, GeneratorState};
use crate::optim::Adam;
use crate::scheduler::{build_epoch_plan, epoch_seed, group_refs, Batch, GroupKey, SampleRef};
use crate::seed::stream_indexed;
use crate::tensor::Tensor;

pub const RUN_MANIFEST_FILE: &str = "manifest.json";
pub const LOSS_LOG_FILE: &str = "losses.csv";
pub const PLAN_LOG_FILE: &str = "batch_plans.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Distinct training slices seen this epoch.
    pub samples: usize,
    /// Duplicates added to fill incomplete batches.
    pub padded: usize,
    /// Single-modality slices that admit no synthesis condition.
    pub skipped_single_modality: usize,
    pub mean_total: f64,
    pub mean_syn: f64,
    pub mean_rec: f64,
    pub mean_adv: f64,
    pub mean_d_loss: f64,
    pub wall_clock_s: f64,
    /// Gradient-audit findings (must stay zero).
    pub audit_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunManifest {
    pub version: String,
    pub config: serde_json::Value,
    pub registry_hash: String,
    pub dataset_ids: Vec<(String, usize)>,
    pub corpus_root: PathBuf,
    pub corpus_hash: String,
    pub effective_batch_size: usize,
    pub parameters: usize,
    pub resumed_from_epoch: Option<usize>,
    pub status: String,
    pub epochs: Vec<EpochSummary>,
    pub metrics: Vec<MetricRow>,
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Mean of all epochs' wall-clock time.
    pub fn mean_epoch_seconds(&self) -> f64 {
        let n = self.epochs.len().max(1) as f64;
        self.epochs.iter().map(|e| e.wall_clock_s).sum::<f64>() / n
    }
}

/// Refuses to reuse a non-empty directory unless `overwrite` is set.
pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if crate::phantom::dir_is_nonempty(dir) {
        if !overwrite {
            return Err(Error::Validation(format!(
                "output directory {} is not empty; pass the overwrite flag to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Everything a training run owns.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub registry: &'a DatasetRegistry,
    pub corpus: &'a Corpus,
    pub generator: GeneratorState,
    pub discriminator: DiscriminatorBank,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    corpus_hash: String,
    resumed_from: Option<usize>,
}

struct TrainSet<'a> {
    samples: Vec<&'a MultiModalSample>,
    skipped: usize,
}

fn train_set(corpus: &Corpus) -> Result<TrainSet<'_>> {
    let all: Vec<&MultiModalSample> = corpus.samples(Split::Train).collect();
    let samples: Vec<&MultiModalSample> = all.iter().copied().filter(|s| s.availability.count() >= 2).collect();
    if samples.is_empty() {
        return Err(Error::Untrainable(
            "no training slice has two or more modalities".into(),
        ));
    }
    Ok(TrainSet {
        skipped: all.len() - samples.len(),
        samples,
    })
}

fn stack_batch(set: &TrainSet<'_>, batch: &Batch) -> Tensor {
    let images: Vec<Tensor> = batch.members.iter().map(|r| set.samples[r.0].images.clone()).collect();
    Tensor::stack(&images)
}

#[derive(Default)]
struct StepLosses {
    total: f64,
    syn: f64,
    rec: f64,
    adv: f64,
    d: f64,
    audit: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, registry: &'a DatasetRegistry, corpus: &'a Corpus) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorState::new(config.model.clone(), registry, config.seeds.init())?;
        let discriminator = DiscriminatorBank::new(
            config.model.clone(),
            generator.coverage,
            crate::seed::derive_seed(config.seeds.init(), "discriminator"),
        )?;
        Ok(Trainer {
            opt_g: Adam::new(config.optimizer),
            opt_d: Adam::new(config.optimizer),
            config,
            registry,
            corpus,
            generator,
            discriminator,
            epoch: 0,
            corpus_hash: corpus.content_hash(),
            resumed_from: None,
        })
    }

    /// Continues from `ckpt`, refusing a different registry or corpus.
    pub fn resume(
        config: TrainConfig,
        registry: &'a DatasetRegistry,
        corpus: &'a Corpus,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        ckpt.verify_registry(registry)?;
        let corpus_hash = corpus.content_hash();
        if ckpt.corpus_hash.as_deref() != Some(corpus_hash.as_str()) {
            return Err(Error::Checkpoint(format!(
                "corpus hash mismatch: checkpoint {:?}, current {corpus_hash}",
                ckpt.corpus_hash
            )));
        }
        if ckpt.generator.config != config.model {
            return Err(Error::Checkpoint("model section differs from the checkpoint".into()));
        }
        if ckpt.epoch > config.train.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at epoch {} but the run has only {}",
                ckpt.epoch, config.train.epochs
            )));
        }
        let discriminator = ckpt
            .discriminator
            .ok_or_else(|| Error::Checkpoint("checkpoint has no discriminator state".into()))?;
        Ok(Trainer {
            opt_g: ckpt.opt_g.unwrap_or_else(|| Adam::new(config.optimizer)),
            opt_d: ckpt.opt_d.unwrap_or_else(|| Adam::new(config.optimizer)),
            config,
            registry,
            corpus,
            generator: ckpt.generator,
            discriminator,
            epoch: ckpt.epoch,
            corpus_hash,
            resumed_from: Some(ckpt.epoch),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            registry: self.registry.clone(),
            corpus_hash: Some(self.corpus_hash.clone()),
            train_config: self.config.to_json(),
            generator: self.generator.clone(),
            discriminator: Some(self.discriminator.clone()),
            opt_g: Some(self.opt_g.clone()),
            opt_d: Some(self.opt_d.clone()),
        }
    }

    pub fn manifest(&self, status: &str) -> RunManifest {
        RunManifest {
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.to_json(),
            registry_hash: self.registry.hash(),
            dataset_ids: self.registry.id_map(),
            corpus_root: self.corpus.root.clone(),
            corpus_hash: self.corpus_hash.clone(),
            effective_batch_size: self.config.effective_batch_size(),
            parameters: self.generator.num_parameters() + self.discriminator.params.numel(),
            resumed_from_epoch: self.resumed_from,
            status: status.into(),
            epochs: Vec::new(),
            metrics: Vec::new(),
        }
    }

    /// One generator update followed by one discriminator update.
    fn step(&mut self, y: &Tensor, key: GroupKey, condition: ModalityMask, lr: f64) -> Result<StepLosses> {
        let availability = key.availability;
        let x = mask_input(y, availability, condition)?;

        let mut g = Graph::new();
        g.freeze_prefix("disc.");
        let xv = g.input(x);
        let y_hat = self.generator.forward(&mut g, xv, condition, key.dataset_id, availability)?;
        let mut scores = [None; NUM_MODALITIES];
        for m in targets(availability, condition).modalities() {
            let channel = g.slice_channel(y_hat, m.index());
            scores[m.index()] = Some(self.discriminator.forward(&mut g, m, channel)?);
        }
        let (loss, report) =
            generator_objective(&mut g, y_hat, y, availability, condition, &scores, &self.config.loss)?;
        g.backward(loss);
        let grads = g.param_grads();
        let audit = audit_gradients(&g, y_hat, &grads, availability, condition);
        let fake = g.value(y_hat).clone();
        drop(g);
        self.opt_g.step(&mut self.generator.params, &grads, lr)?;

        let mut g = Graph::new();
        let (d_loss, d_report) =
            discriminator_step_objective(&mut g, &self.discriminator, &fake, y, availability, condition)?;
        g.backward(d_loss);
        self.opt_d.step(&mut self.discriminator.params, &g.param_grads(), lr)?;

        Ok(StepLosses {
            total: report.total,
            syn: report.syn,
            rec: report.rec,
            adv: report.adv,
            d: d_report.total,
            audit,
        })
    }

    /// Trains epoch `self.epoch`, appending to the optional logs.
    pub fn run_epoch(
        &mut self,
        mut loss_log: Option<&mut dyn Write>,
        plan_log: Option<&mut dyn Write>,
    ) -> Result<EpochSummary> {
        let started = Instant::now();
        let epoch = self.epoch;
        let lr = lr_at_epoch(epoch, &self.config)?;
        let corpus = self.corpus;
        let set = train_set(corpus)?;
        let groups = group_refs(
            set.samples
                .iter()
                .enumerate()
                .map(|(i, s)| (SampleRef(i), GroupKey::of(s))),
        );
        let plan = build_epoch_plan(
            &groups,
            self.config.effective_batch_size(),
            epoch_seed(self.config.seeds.schedule(), epoch),
        )?;
        if let Some(w) = plan_log {
            plan.write_csv(epoch, w).map_err(|e| Error::io(PLAN_LOG_FILE, e))?;
        }
        let mut cond_rng = stream_indexed(self.config.seeds.condition(), "condition", &[epoch as u64]);
        let mut acc = StepLosses::default();
        for (step, batch) in plan.batches.iter().enumerate() {
            let condition = sample_condition(batch.key.availability, &mut cond_rng)?;
            let y = stack_batch(&set, batch);
            let s = self.step(&y, batch.key, condition, lr)?;
            if let Some(w) = loss_log.as_deref_mut() {
                let row = LossLogRow {
                    epoch,
                    step,
                    dataset_id: batch.key.dataset_id,
                    availability: batch.key.availability,
                    condition,
                    syn: s.syn,
                    rec: s.rec,
                    adv: s.adv,
                    d_loss: s.d,
                };
                writeln!(w, "{}", row.to_csv()).map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
            }
            acc.total += s.total;
            acc.syn += s.syn;
            acc.rec += s.rec;
            acc.adv += s.adv;
            acc.d += s.d;
            acc.audit += s.audit;
        }
        let n = plan.len() as f64;
        let members: usize = plan.batches.iter().map(|b| b.members.len()).sum();
        self.epoch += 1;
        Ok(EpochSummary {
            epoch,
            lr,
            batches: plan.len(),
            samples: set.samples.len(),
            padded: members - set.samples.len(),
            skipped_single_modality: set.skipped,
            mean_total: acc.total / n,
            mean_syn: acc.syn / n,
            mean_rec: acc.rec / n,
            mean_adv: acc.adv / n,
            mean_d_loss: acc.d / n,
            wall_clock_s: started.elapsed().as_secs_f64(),
            audit_violations: acc.audit,
        })
    }
}

/// Counts gradient flows the selective supervision forbids: into output
/// channels of unavailable modalities, into decoders of unavailable
/// modalities, into encoders of non-source modalities, or into any critic.
fn audit_gradients(
    g: &Graph,
    y_hat: crate::autograd::Var,
    grads: &std::collections::BTreeMap<String, Tensor>,
    availability: ModalityMask,
    condition: ModalityMask,
) -> usize {
    let mut violations = 0;
    if let Some(dy) = g.grad(y_hat) {
        let (b, _, h, w) = dy.dims4();
        for bi in 0..b {
            for m in Modality::ALL.into_iter().filter(|m| !availability.contains(*m)) {
                let off = (bi * NUM_MODALITIES + m.index()) * h * w;
                if dy.data()[off..off + h * w].iter().any(|&v| v != 0.0) {
                    violations += 1;
                }
            }
        }
    }
    for (name, t) in grads {
        let nonzero = t.data().iter().any(|&v| v != 0.0);
        let forbidden = name.starts_with("disc.")
            || Modality::ALL.into_iter().any(|m| {
                (!availability.contains(m) && name.starts_with(&format!("gen.dec.{m}.")))
                    || (!condition.contains(m) && name.starts_with(&format!("gen.enc.{m}.")))
            });
        if forbidden && nonzero {
            violations += 1;
        }
    }
    violations
}

/// Per-epoch progress callback.
pub type EpochHook<'h> = &'h mut dyn FnMut(&EpochSummary);

#[derive(Default)]
pub struct TrainOptions<'h> {
    /// Output directory for logs, checkpoints, manifest and metrics.
    pub out: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    pub on_epoch: Option<EpochHook<'h>>,
}

pub struct TrainOutcome {
    pub manifest: RunManifest,
    pub generator: GeneratorState,
    pub checkpoint: Checkpoint,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Trains to `config.train.epochs`, then scores the configured tasks on
/// the test split.
pub fn train(
    config: &TrainConfig,
    registry: &DatasetRegistry,
    corpus: &Corpus,
    mut options: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    let tasks = config.tasks()?;
    let mut trainer = match options.resume.take() {
        Some(ck) => Trainer::resume(config.clone(), registry, corpus, ck)?,
        None => Trainer::new(config.clone(), registry, corpus)?,
    };
    let mut manifest = trainer.manifest("running");
    let out = options.out.clone();
    let mut logs = None;
    if let Some(dir) = &out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        manifest.write(dir)?;
        let mut loss = create(&dir.join(LOSS_LOG_FILE))?;
        writeln!(loss, "{LOSS_LOG_HEADER}").map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
        let mut plans = create(&dir.join(PLAN_LOG_FILE))?;
        writeln!(plans, "epoch,batch,dataset_id,availability,members").map_err(|e| Error::io(PLAN_LOG_FILE, e))?;
        logs = Some((loss, plans));
    }
    while trainer.epoch < config.train.epochs {
        let summary = match logs.as_mut() {
            Some((l, p)) => trainer.run_epoch(Some(l), Some(p))?,
            None => trainer.run_epoch(None, None)?,
        };
        if let Some(hook) = options.on_epoch.as_deref_mut() {
            hook(&summary);
        }
        manifest.epochs.push(summary);
        if let Some(dir) = &out {
            let every = config.train.checkpoint_every;
            if every > 0 && trainer.epoch % every == 0 && trainer.epoch < config.train.epochs {
                let ckdir = dir.join("checkpoints");
                fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
                trainer.checkpoint().save(&ckdir.join(format!("epoch_{:04}.ckpt", trainer.epoch)))?;
            }
            manifest.write(dir)?;
        }
    }
    if let Some((mut l, mut p)) = logs {
        l.flush().map_err(|e| Error::io(LOSS_LOG_FILE, e))?;
        p.flush().map_err(|e| Error::io(PLAN_LOG_FILE, e))?;
    }
    if !tasks.is_empty() {
        manifest.metrics = evaluate_model(&trainer.generator, registry, corpus, Split::Test, &tasks)?;
    }
    manifest.status = "complete".into();
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = &out {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        if !manifest.metrics.is_empty() {
            write_metrics_csv(&dir.join(METRICS_FILE), &manifest.metrics)?;
        }
        if config.eval.montage_cases > 0 {
            if let Some(task) = tasks.first() {
                write_task_montage(
                    &trainer.generator,
                    corpus,
                    *task,
                    config.eval.montage_cases,
                    &dir.join("montage.png"),
                )?;
            }
        }
        manifest.write(dir)?;
    }
    Ok(TrainOutcome {
        manifest,
        generator: trainer.generator,
        checkpoint,
    })
}

/// Scores every task on every dataset whose coverage contains it. Tasks no
/// dataset can evaluate on `split` are an error.
pub fn evaluate_model(
    generator: &GeneratorState,
    registry: &DatasetRegistry,
    corpus: &Corpus,
    split: Split,
    tasks: &[SynthesisTask],
) -> Result<Vec<MetricRow>> {
    if tasks.is_empty() {
        return Err(Error::EmptyTask("no tasks to evaluate".into()));
    }
    let test: Vec<&MultiModalSample> = corpus.samples(split).collect();
    let mut rows = Vec::new();
    for task in tasks {
        let mut any = false;
        for ds in registry.datasets() {
            if !task.sources.with(task.target).is_subset_of(ds.coverage) {
                continue;
            }
            match evaluate_task(generator, &test, ds, *task, &SsimParams::default()) {
                Ok(row) => {
                    rows.push(row);
                    any = true;
                }
                Err(Error::EmptyTask(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if !any {
            return Err(Error::EmptyTask(format!("no {split} slice can evaluate {task}")));
        }
    }
    Ok(rows)
}

/// Montage rows `sources | synthesized | ground truth | |error|` for the
/// first `cases` evaluable test slices.
pub fn write_task_montage(
    generator: &GeneratorState,
    corpus: &Corpus,
    task: SynthesisTask,
    cases: usize,
    path: &Path,
) -> Result<()> {
    let needed = task.sources.with(task.target);
    let picked: Vec<&MultiModalSample> = corpus
        .samples(Split::Test)
        .filter(|s| needed.is_subset_of(s.availability))
        .take(cases)
        .collect();
    let Some(first) = picked.first() else {
        return Err(Error::EmptyTask(format!("no held-out slice for montage of {task}")));
    };
    let (h, w) = (first.height(), first.width());
    let mut outputs = Vec::new();
    for s in &picked {
        let x = mask_input(&s.images, s.availability, task.sources)?;
        let y = crate::network::forward_generator(&x, task.sources, s.dataset_id, generator)?;
        let plane = h * w;
        let pred = y.data()[task.target.index() * plane..][..plane].to_vec();
        let err = abs_error(&pred, s.channel(task.target));
        outputs.push((pred, err));
    }
    let rows: Vec<Vec<Tile<'_>>> = picked
        .iter()
        .zip(&outputs)
        .map(|(s, (pred, err))| {
            let mut row: Vec<Tile<'_>> = task.sources.modalities().map(|m| Tile { pixels: s.channel(m) }).collect();
            row.push(Tile { pixels: pred });
            row.push(Tile {
                pixels: s.channel(task.target),
            });
            row.push(Tile { pixels: err });
            row
        })
        .collect();
    write_montage(path, &rows, h, w)
}

#[cfg(test)]
mod tests;
