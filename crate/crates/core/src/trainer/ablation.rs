use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{train, Arm, RunManifest, TrainConfig, TrainOptions};
use crate::datamodel::{Corpus, DatasetRegistry};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub arm: Arm,
    pub seed: u64,
    pub dataset: String,
    pub task: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmTiming {
    pub arm: Arm,
    pub seed: u64,
    pub batch_size: usize,
    pub mean_epoch_s: f64,
    pub batches_per_epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub timings: Vec<ArmTiming>,
}

pub const ABLATION_CSV_HEADER: &str = "arm,seed,dataset,task,psnr_mean,psnr_std,ssim_mean,ssim_std,count";

impl AblationReport {
    /// Mean PSNR over tasks, keyed by dataset, for one arm and seed.
    pub fn dataset_psnr(&self, arm: Arm, seed: u64) -> BTreeMap<String, f64> {
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.rows.iter().filter(|r| r.arm == arm && r.seed == seed) {
            let e = sums.entry(r.dataset.clone()).or_default();
            e.0 += r.psnr_mean;
            e.1 += 1;
        }
        sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.rows.iter().map(|r| r.seed).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Repetitions in which `a` matches or beats `b` on every dataset.
    pub fn wins(&self, a: Arm, b: Arm) -> (usize, usize) {
        let seeds = self.seeds();
        let won = seeds
            .iter()
            .filter(|&&seed| {
                let (pa, pb) = (self.dataset_psnr(a, seed), self.dataset_psnr(b, seed));
                !pa.is_empty() && pa.iter().all(|(d, v)| pb.get(d).is_some_and(|w| v >= w))
            })
            .count();
        (won, seeds.len())
    }

    /// Mean per-epoch wall-clock of an arm across repetitions.
    pub fn mean_epoch_seconds(&self, arm: Arm) -> Option<f64> {
        let t: Vec<f64> = self.timings.iter().filter(|t| t.arm == arm).map(|t| t.mean_epoch_s).collect();
        (!t.is_empty()).then(|| t.iter().sum::<f64>() / t.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.arm.name(),
                r.seed,
                r.dataset,
                r.task,
                r.psnr_mean,
                r.psnr_std,
                r.ssim_mean,
                r.ssim_std,
                r.count
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("ablation.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        let text = serde_json::to_vec_pretty(self).expect("report serializes");
        fs::write(&json, text).map_err(|e| Error::io(&json, e))
    }
}

/// Trains every configured arm once per seed, with matched seeds across
/// arms, and collects held-out metrics and epoch timings.
pub fn run_ablation(
    config: &TrainConfig,
    registry: &DatasetRegistry,
    corpus: &Corpus,
    out: Option<&Path>,
    on_run: &mut dyn FnMut(Arm, u64, &RunManifest),
) -> Result<AblationReport> {
    let arms = &config.ablation.arms;
    let mut distinct = arms.clone();
    distinct.sort();
    distinct.dedup();
    if distinct.len() < 2 || distinct.len() != arms.len() {
        return Err(Error::field("ablation.arms", "needs at least two distinct arms"));
    }
    if config.ablation.seeds.is_empty() {
        return Err(Error::field("ablation.seeds", "needs at least one seed"));
    }
    if config.eval.tasks.is_empty() {
        return Err(Error::field("eval.tasks", "an ablation needs at least one task"));
    }
    let mut report = AblationReport::default();
    for &seed in &config.ablation.seeds {
        for &arm in arms {
            let mut cfg = arm.apply(config);
            cfg.seeds.global = seed;
            cfg.seeds.init = None;
            cfg.seeds.schedule = None;
            cfg.seeds.condition = None;
            let options = TrainOptions {
                out: out.map(|d| d.join(arm.name()).join(format!("seed{seed}"))),
                ..TrainOptions::default()
            };
            let outcome = train(&cfg, registry, corpus, options)?;
            let m = &outcome.manifest;
            for row in &m.metrics {
                report.rows.push(AblationRow {
                    arm,
                    seed,
                    dataset: row.dataset.clone(),
                    task: row.task.clone(),
                    psnr_mean: row.psnr_mean,
                    psnr_std: row.psnr_std,
                    ssim_mean: row.ssim_mean,
                    ssim_std: row.ssim_std,
                    count: row.count,
                });
            }
            report.timings.push(ArmTiming {
                arm,
                seed,
                batch_size: cfg.effective_batch_size(),
                mean_epoch_s: m.mean_epoch_seconds(),
                batches_per_epoch: m.epochs.first().map_or(0, |e| e.batches),
            });
            on_run(arm, seed, m);
        }
    }
    if let Some(dir) = out {
        report.write(dir)?;
    }
    Ok(report)
}
