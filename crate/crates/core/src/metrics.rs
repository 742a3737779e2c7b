//! PSNR / SSIM kernels and the per-task evaluation harness.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::datamodel::{DatasetDescriptor, Modality, ModalityMask, MultiModalSample, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::losses::mask_input;
use crate::network::GeneratorState;
use crate::tensor::Tensor;

/// PSNR values are capped here inside aggregates so identical pairs keep
/// means finite.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const METRICS_CSV_HEADER: &str = "task,dataset,psnr_mean,psnr_std,ssim_mean,ssim_std,count,skipped";

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("image sizes differ: {} vs {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Shape("empty image".into()));
    }
    Ok(())
}

/// `10 log10(max^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr(y: &[f64], y_hat: &[f64], max_value: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    if max_value.is_nan() || max_value <= 0.0 {
        return Err(Error::Validation(format!("max value {max_value} must be positive")));
    }
    let mse = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised 1-D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-(i as f64 - r).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let z: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / z).collect()
    }
}

/// Separable valid-mode Gaussian filter of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = taps.iter().enumerate().map(|(t, wt)| wt * img[r * w + c + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps.iter().enumerate().map(|(t, wt)| wt * rows[(r + t) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h x w` images over all valid window positions.
pub fn ssim(y: &[f64], y_hat: &[f64], h: usize, w: usize, params: &SsimParams) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.len() != h * w {
        return Err(Error::Shape(format!("{} pixels for a {h}x{w} image", y.len())));
    }
    if h < params.window || w < params.window {
        return Err(Error::Shape(format!(
            "{h}x{w} image is smaller than the {}-pixel window",
            params.window
        )));
    }
    let taps = params.taps();
    let f = |img: &[f64]| filter_valid(img, h, w, &taps);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_x = f(y);
    let mu_y = f(y_hat);
    let e_xx = f(&prod(y, y));
    let e_yy = f(&prod(y_hat, y_hat));
    let e_xy = f(&prod(y, y_hat));
    let (c1, c2) = (params.c1(), params.c2());
    let mut total = 0.0;
    for i in 0..mu_x.len() {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let vx = e_xx[i] - mx * mx;
        let vy = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / mu_x.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// A one-to-one or many-to-one synthesis task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SynthesisTask {
    pub sources: ModalityMask,
    pub target: Modality,
}

impl SynthesisTask {
    pub fn new(sources: ModalityMask, target: Modality) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::InvalidTask("task has no source modality".into()));
        }
        if sources.contains(target) {
            return Err(Error::InvalidTask(format!("{target} is both source and target")));
        }
        Ok(SynthesisTask { sources, target })
    }

    /// `"T1+T2→FLAIR"`.
    pub fn label(&self) -> String {
        let src: Vec<&str> = self.sources.modalities().map(Modality::name).collect();
        format!("{}→{}", src.join("+"), self.target)
    }

    /// Parses `"T1,T2->FLAIR"`, `"T1+T2->FLAIR"` or the arrow form of [`label`](Self::label).
    pub fn parse(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once("->")
            .or_else(|| s.split_once('→'))
            .ok_or_else(|| Error::InvalidTask(format!("task `{s}` is not of the form SOURCES->TARGET")))?;
        let names: Vec<&str> = lhs.split([',', '+']).map(str::trim).filter(|n| !n.is_empty()).collect();
        let sources = crate::datamodel::make_mask(&names)?;
        SynthesisTask::new(sources, rhs.trim().parse()?)
    }
}

impl fmt::Display for SynthesisTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub task: String,
    pub dataset: String,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub count: usize,
    /// Slices of the dataset that lacked a source or the target.
    pub skipped: usize,
}

fn fmt_pm(mean: f64, std: f64, digits: usize) -> String {
    format!("{mean:.digits$}±{std:.digits$}")
}

impl MetricRow {
    pub fn psnr_cell(&self) -> String {
        fmt_pm(self.psnr_mean, self.psnr_std, 2)
    }

    pub fn ssim_cell(&self) -> String {
        fmt_pm(self.ssim_mean, self.ssim_std, 4)
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.task,
            self.dataset,
            self.psnr_mean,
            self.psnr_std,
            self.ssim_mean,
            self.ssim_std,
            self.count,
            self.skipped
        )
    }
}

impl fmt::Display for MetricRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<18} {:<12} PSNR {} dB  SSIM {}  (n={})",
            self.task,
            self.dataset,
            self.psnr_cell(),
            self.ssim_cell(),
            self.count
        )
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(METRICS_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Anything that maps a masked `[B, 6, H, W]` batch to six output channels.
pub trait Synthesizer {
    fn synthesize(&self, x: &Tensor, sources: ModalityMask, dataset_id: usize, outputs: ModalityMask)
        -> Result<Tensor>;
}

impl Synthesizer for GeneratorState {
    fn synthesize(
        &self,
        x: &Tensor,
        sources: ModalityMask,
        dataset_id: usize,
        outputs: ModalityMask,
    ) -> Result<Tensor> {
        let mut g = crate::autograd::Graph::new();
        let xv = g.input(x.clone());
        let y = self.forward(&mut g, xv, sources, dataset_id, outputs)?;
        Ok(g.value(y).clone())
    }
}

/// Slices per forward pass during evaluation.
const EVAL_CHUNK: usize = 16;

/// Scores `task` on the samples of `dataset`. Slices lacking a source or
/// the target are skipped and counted.
pub fn evaluate_task<S: Synthesizer + ?Sized>(
    model: &S,
    samples: &[&MultiModalSample],
    dataset: &DatasetDescriptor,
    task: SynthesisTask,
    ssim_params: &SsimParams,
) -> Result<MetricRow> {
    let needed = task.sources.with(task.target);
    let in_dataset: Vec<&MultiModalSample> =
        samples.iter().copied().filter(|s| s.dataset_id == dataset.id).collect();
    let usable: Vec<&MultiModalSample> = in_dataset
        .iter()
        .copied()
        .filter(|s| needed.is_subset_of(s.availability))
        .collect();
    if usable.is_empty() {
        return Err(Error::EmptyTask(format!(
            "no {} slice has {} available",
            dataset.name,
            needed.names()
        )));
    }
    let mut psnrs = Vec::with_capacity(usable.len());
    let mut ssims = Vec::with_capacity(usable.len());
    let outputs = ModalityMask::EMPTY.with(task.target);
    for chunk in usable.chunks(EVAL_CHUNK) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let inputs = chunk
            .iter()
            .map(|s| {
                if (s.height(), s.width()) != (h, w) {
                    return Err(Error::Shape("slices of one dataset differ in size".into()));
                }
                mask_input(&s.images, s.availability, task.sources)
            })
            .collect::<Result<Vec<_>>>()?;
        let x = Tensor::stack(&inputs);
        let y_hat = model.synthesize(&x, task.sources, dataset.id, outputs)?;
        if y_hat.shape() != x.shape() {
            return Err(Error::Shape(format!(
                "synthesizer returned {:?} for input {:?}",
                y_hat.shape(),
                x.shape()
            )));
        }
        let plane = h * w;
        for (b, s) in chunk.iter().enumerate() {
            let pred = &y_hat.data()[(b * NUM_MODALITIES + task.target.index()) * plane..][..plane];
            let truth = s.channel(task.target);
            psnrs.push(psnr(truth, pred, 1.0)?.min(PSNR_CAP_DB));
            ssims.push(ssim(truth, pred, h, w, ssim_params)?);
        }
    }
    let (psnr_mean, psnr_std) = mean_std(&psnrs);
    let (ssim_mean, ssim_std) = mean_std(&ssims);
    Ok(MetricRow {
        task: task.label(),
        dataset: dataset.name.clone(),
        psnr_mean,
        psnr_std,
        ssim_mean,
        ssim_std,
        count: usable.len(),
        skipped: in_dataset.len() - usable.len(),
    })
}

/// PSNR of the all-zero prediction, the floor any useful model must beat.
pub fn zero_baseline(
    samples: &[&MultiModalSample],
    dataset: &DatasetDescriptor,
    task: SynthesisTask,
) -> Result<MetricRow> {
    struct Zero;
    impl Synthesizer for Zero {
        fn synthesize(&self, x: &Tensor, _: ModalityMask, _: usize, _: ModalityMask) -> Result<Tensor> {
            Ok(Tensor::zeros(x.shape()))
        }
    }
    evaluate_task(&Zero, samples, dataset, task, &SsimParams::default())
}
