//! Deterministic multi-dataset phantom corpora.
//!
//! Each slice is rendered from a latent anatomy shared by all of its
//! modalities. A modality is a fixed analytic transform of that anatomy;
//! a dataset adds its own gamma/gain/bias/noise profile on top, which
//! produces the cross-dataset intensity shift.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    make_mask, write_slice, DatasetRegistry, IntensityProfile, Modality, ModalityMask,
    MultiModalSample, Split,
};
use crate::error::{Error, Result};
use crate::seed::{stream_indexed, Rng};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "phantom_manifest.json";

/// Per-modality rendering constants: exponent applied to the anatomy,
/// additive lesion contrast and additive fluid contrast.
#[derive(Clone, Copy, Debug)]
pub struct ModalityContrast {
    pub exponent: f64,
    pub lesion: f64,
    pub fluid: f64,
}

pub fn modality_contrast(m: Modality) -> ModalityContrast {
    let (exponent, lesion, fluid) = match m {
        Modality::T1 => (1.0, -0.12, -0.25),
        Modality::T2 => (0.6, 0.25, 0.35),
        // enhancing lesions
        Modality::T1C => (1.0, 0.35, -0.25),
        // suppressed fluid
        Modality::Flair => (0.8, 0.30, -0.35),
        Modality::Dwi => (1.4, 0.40, -0.15),
        Modality::Adc => (0.7, -0.20, 0.40),
    };
    ModalityContrast {
        exponent,
        lesion,
        fluid,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// Center and radii as fractions of the image side.
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Ellipse {
    /// Normalized radius at pixel center `(x, y)` of a `size x size` grid.
    fn radius_at(&self, x: usize, y: usize, size: usize) -> f64 {
        let px = (x as f64 + 0.5) / size as f64 - self.cx;
        let py = (y as f64 + 0.5) / size as f64 - self.cy;
        let (s, c) = self.angle.sin_cos();
        let u = (c * px + s * py) / self.rx;
        let v = (-s * px + c * py) / self.ry;
        (u * u + v * v).sqrt()
    }

    /// Soft indicator: 1 inside, 0 outside, smoothstep across `r in [0.8, 1.2]`.
    pub fn indicator(&self, x: usize, y: usize, size: usize) -> f64 {
        let r = self.radius_at(x, y, size);
        let t = ((1.2 - r) / 0.4).clamp(0.0, 1.0);
        t * t * (3.0 - 2.0 * t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cx: f64,
    pub cy: f64,
    pub sigma: f64,
    pub amplitude: f64,
}

/// Random parameters of one slice's anatomy, before rasterization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyParams {
    pub head: Ellipse,
    pub tissue_level: f64,
    pub blobs: Vec<Blob>,
    pub fluid: Option<Ellipse>,
    pub lesions: Vec<Ellipse>,
}

impl AnatomyParams {
    pub fn sample(rng: &mut Rng) -> Self {
        let head = Ellipse {
            cx: 0.5 + rng.random_range(-0.03..0.03),
            cy: 0.5 + rng.random_range(-0.03..0.03),
            rx: rng.random_range(0.36..0.44),
            ry: rng.random_range(0.38..0.46),
            angle: rng.random_range(-0.2..0.2),
        };
        let blobs = (0..5)
            .map(|_| Blob {
                cx: head.cx + rng.random_range(-0.25..0.25),
                cy: head.cy + rng.random_range(-0.25..0.25),
                sigma: rng.random_range(0.06..0.15),
                amplitude: rng.random_range(-0.25..0.35),
            })
            .collect();
        let fluid = Some(Ellipse {
            cx: head.cx + rng.random_range(-0.05..0.05),
            cy: head.cy + rng.random_range(-0.05..0.05),
            rx: rng.random_range(0.06..0.11),
            ry: rng.random_range(0.08..0.14),
            angle: rng.random_range(-0.5..0.5),
        });
        let n_lesions = rng.random_range(0..=2);
        let lesions = (0..n_lesions)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let dist = rng.random_range(0.12..0.25);
                Ellipse {
                    cx: head.cx + dist * theta.cos(),
                    cy: head.cy + dist * theta.sin(),
                    rx: rng.random_range(0.05..0.10),
                    ry: rng.random_range(0.05..0.10),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                }
            })
            .collect();
        AnatomyParams {
            head,
            tissue_level: rng.random_range(0.4..0.55),
            blobs,
            fluid,
            lesions,
        }
    }

    pub fn rasterize(&self, size: usize) -> LatentAnatomy {
        let mut base = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let inside = self.head.indicator(x, y, size);
                if inside == 0.0 {
                    continue;
                }
                let px = (x as f64 + 0.5) / size as f64;
                let py = (y as f64 + 0.5) / size as f64;
                let texture: f64 = self
                    .blobs
                    .iter()
                    .map(|b| {
                        let d2 = (px - b.cx).powi(2) + (py - b.cy).powi(2);
                        b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp()
                    })
                    .sum();
                base[y * size + x] = (inside * (self.tissue_level + texture)).clamp(0.0, 1.0);
            }
        }
        LatentAnatomy {
            size,
            base,
            fluid: self.fluid,
            lesions: self.lesions.clone(),
        }
    }
}

/// Anatomy field shared by every modality of one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentAnatomy {
    pub size: usize,
    /// Row-major `size x size`, values in `[0, 1]`.
    pub base: Vec<f64>,
    pub fluid: Option<Ellipse>,
    pub lesions: Vec<Ellipse>,
}

impl LatentAnatomy {
    /// Uniform field with no fluid or lesions; used as an analytic probe.
    pub fn constant(size: usize, value: f64) -> Self {
        LatentAnatomy {
            size,
            base: vec![value; size * size],
            fluid: None,
            lesions: Vec::new(),
        }
    }

    fn lesion_indicator(&self, x: usize, y: usize) -> f64 {
        self.lesions
            .iter()
            .map(|l| l.indicator(x, y, self.size))
            .fold(0.0, f64::max)
    }
}

/// `clip(gain * base^(gamma * g_k) + bias + contrast_k + noise, 0, 1)`.
///
/// Noise is only drawn from `rng` when `noise_sigma > 0`.
pub fn render_modality(
    anatomy: &LatentAnatomy,
    modality: Modality,
    profile: &IntensityProfile,
    rng: &mut Rng,
) -> Vec<f64> {
    let k = modality_contrast(modality);
    let exponent = profile.gamma * k.exponent;
    let noise = (profile.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, profile.noise_sigma).expect("sigma validated"));
    let size = anatomy.size;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let b = anatomy.base[y * size + x];
            let mut v = profile.gain * b.powf(exponent) + profile.bias;
            if !anatomy.lesions.is_empty() {
                v += k.lesion * anatomy.lesion_indicator(x, y);
            }
            if let Some(fluid) = &anatomy.fluid {
                v += k.fluid * fluid.indicator(x, y, size);
            }
            if let Some(n) = &noise {
                // noise only inside the head keeps the background flat
                if b > 0.0 {
                    v += n.sample(rng);
                }
            }
            out.push(v.clamp(0.0, 1.0));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomDataset {
    pub name: String,
    pub coverage: Vec<String>,
    pub case_count: usize,
    /// The last `holdout_cases` cases form the test split.
    #[serde(default)]
    pub holdout_cases: usize,
    pub slices_per_case: usize,
    pub image_size: usize,
    #[serde(default)]
    pub missingness_rate: f64,
    #[serde(default)]
    pub profile: IntensityProfile,
}

/// Phantom corpus description; the same document doubles as the
/// dataset registry file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub global_seed: u64,
    pub datasets: Vec<PhantomDataset>,
}

impl PhantomSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<phantom spec>"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let spec: PhantomSpec = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::field("datasets", "at least one dataset is required"));
        }
        self.registry()?;
        for (i, d) in self.datasets.iter().enumerate() {
            let f = |name: &str| format!("datasets[{i}].{name}");
            if d.case_count == 0 {
                return Err(Error::field(f("case_count"), "must be >= 1"));
            }
            if d.holdout_cases > d.case_count {
                return Err(Error::field(f("holdout_cases"), "exceeds case_count"));
            }
            if d.slices_per_case == 0 {
                return Err(Error::field(f("slices_per_case"), "must be >= 1"));
            }
            if d.image_size < 4 {
                return Err(Error::field(f("image_size"), "must be >= 4"));
            }
            if !(0.0..1.0).contains(&d.missingness_rate) {
                return Err(Error::field(f("missingness_rate"), "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<DatasetRegistry> {
        let mut entries = Vec::with_capacity(self.datasets.len());
        for (i, d) in self.datasets.iter().enumerate() {
            let coverage = make_mask(&d.coverage)
                .map_err(|e| Error::field(format!("datasets[{i}].coverage"), e.to_string()))?;
            entries.push((d.name.clone(), coverage, d.profile));
        }
        DatasetRegistry::new(entries)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceRecord {
    pub slice_index: u32,
    pub anatomy: AnatomyParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub dataset: String,
    pub dataset_id: usize,
    pub case_id: String,
    pub split: Split,
    pub availability: ModalityMask,
    pub dropped: Vec<Modality>,
    pub slices: Vec<SliceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomManifest {
    pub spec: PhantomSpec,
    pub global_seed: u64,
    pub registry_hash: String,
    pub cases: Vec<CaseRecord>,
}

/// Drops each covered modality with probability `rate`, redrawing the whole
/// case until at least two modalities remain (when coverage allows it).
pub fn draw_availability(coverage: ModalityMask, rate: f64, rng: &mut Rng) -> ModalityMask {
    let floor = coverage.count().min(2);
    loop {
        let kept: ModalityMask = coverage
            .modalities()
            .filter(|_| rate == 0.0 || rng.random::<f64>() >= rate)
            .collect();
        if kept.count() >= floor {
            return kept;
        }
    }
}

pub fn case_id(index: usize) -> String {
    format!("case{index:03}")
}

/// Draws every random decision of the corpus without rendering pixels.
pub fn plan_corpus(spec: &PhantomSpec) -> Result<PhantomManifest> {
    spec.validate()?;
    let registry = spec.registry()?;
    let mut cases = Vec::new();
    for (d_idx, d) in spec.datasets.iter().enumerate() {
        let coverage = registry.datasets()[d_idx].coverage;
        for c in 0..d.case_count {
            let mut drops = stream_indexed(spec.global_seed, "drops", &[d_idx as u64, c as u64]);
            let availability = draw_availability(coverage, d.missingness_rate, &mut drops);
            let slices = (0..d.slices_per_case)
                .map(|s| {
                    let mut rng = stream_indexed(
                        spec.global_seed,
                        "anatomy",
                        &[d_idx as u64, c as u64, s as u64],
                    );
                    SliceRecord {
                        slice_index: s as u32,
                        anatomy: AnatomyParams::sample(&mut rng),
                    }
                })
                .collect();
            let split = if c >= d.case_count - d.holdout_cases {
                Split::Test
            } else {
                Split::Train
            };
            cases.push(CaseRecord {
                dataset: d.name.clone(),
                dataset_id: d_idx,
                case_id: case_id(c),
                split,
                availability,
                dropped: coverage.minus(availability).modalities().collect(),
                slices,
            });
        }
    }
    Ok(PhantomManifest {
        spec: spec.clone(),
        global_seed: spec.global_seed,
        registry_hash: registry.hash(),
        cases,
    })
}

/// Renders one planned slice into a sample.
pub fn render_slice(spec: &PhantomSpec, case: &CaseRecord, slice: &SliceRecord) -> MultiModalSample {
    let d = &spec.datasets[case.dataset_id];
    let size = d.image_size;
    let anatomy = slice.anatomy.rasterize(size);
    let case_index: u64 = case.case_id.trim_start_matches("case").parse().unwrap_or(0);
    let mut images = Tensor::zeros(&[6, size, size]);
    let plane = size * size;
    for m in case.availability.modalities() {
        let mut noise = stream_indexed(
            spec.global_seed,
            "noise",
            &[case.dataset_id as u64, case_index, slice.slice_index as u64, m.index() as u64],
        );
        let img = render_modality(&anatomy, m, &d.profile, &mut noise);
        images.data_mut()[m.index() * plane..(m.index() + 1) * plane].copy_from_slice(&img);
    }
    MultiModalSample {
        images,
        availability: case.availability,
        dataset_id: case.dataset_id,
        case_id: case.case_id.clone(),
        slice_index: slice.slice_index,
    }
}

/// True when `dir` exists and has at least one entry.
pub fn dir_is_nonempty(dir: &Path) -> bool {
    fs::read_dir(dir)
        .map(|mut it| it.next().is_some())
        .unwrap_or(false)
}

/// Writes the manifest first, then every slice directory.
pub fn generate_phantom_corpus(
    spec: &PhantomSpec,
    out: &Path,
    overwrite: bool,
) -> Result<PhantomManifest> {
    let manifest = plan_corpus(spec)?;
    if dir_is_nonempty(out) {
        if !overwrite {
            return Err(Error::Validation(format!(
                "output directory {} is not empty; pass the overwrite flag to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    for case in &manifest.cases {
        for slice in &case.slices {
            let sample = render_slice(spec, case, slice);
            write_slice(out, &case.dataset, &sample, case.split)?;
        }
    }
    Ok(manifest)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::Corpus;
    use crate::seed::stream;

    const TWO_SITES: &str = r#"
        global_seed = 5
        [[datasets]]
        name = "siteA"
        coverage = ["T1", "T2", "T1C", "FLAIR"]
        case_count = 4
        slices_per_case = 3
        image_size = 16
        profile = { gamma = 1.0, gain = 0.8, bias = 0.0, noise_sigma = 0.01 }
        [[datasets]]
        name = "siteB"
        coverage = ["T1", "T2", "FLAIR", "ADC"]
        case_count = 4
        holdout_cases = 1
        slices_per_case = 3
        image_size = 16
        profile = { gamma = 1.3, gain = 1.2, bias = 0.02, noise_sigma = 0.02 }
    "#;

    #[test]
    fn identity_profile_reproduces_the_exponent_transform() {
        let mut rng = stream(1, "anatomy");
        let mut anatomy = AnatomyParams::sample(&mut rng).rasterize(24);
        anatomy.lesions.clear();
        anatomy.fluid = None;
        for m in Modality::ALL {
            let img = render_modality(&anatomy, m, &IntensityProfile::default(), &mut rng);
            let g = modality_contrast(m).exponent;
            for (v, b) in img.iter().zip(&anatomy.base) {
                assert_eq!(*v, b.powf(g));
            }
        }
    }

    #[test]
    fn gain_ratio_on_constant_probe() {
        let anatomy = LatentAnatomy::constant(16, 0.5);
        let mut rng = stream(0, "noise");
        let profile = |gain| IntensityProfile {
            gain,
            ..IntensityProfile::default()
        };
        let lo = render_modality(&anatomy, Modality::T2, &profile(0.8), &mut rng);
        let hi = render_modality(&anatomy, Modality::T2, &profile(1.2), &mut rng);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let ratio = mean(&hi) / mean(&lo);
        assert!((ratio / 1.5 - 1.0).abs() < 0.05, "ratio {ratio}");
    }

    #[test]
    fn rendering_is_deterministic() {
        let anatomy = AnatomyParams::sample(&mut stream(9, "anatomy")).rasterize(16);
        let profile = IntensityProfile {
            noise_sigma: 0.05,
            ..IntensityProfile::default()
        };
        let a = render_modality(&anatomy, Modality::Flair, &profile, &mut stream(4, "noise"));
        let b = render_modality(&anatomy, Modality::Flair, &profile, &mut stream(4, "noise"));
        assert_eq!(a, b);
    }

    #[test]
    fn corpus_counts_and_validity() {
        let mut spec = PhantomSpec::from_toml_str(TWO_SITES).unwrap();
        spec.datasets.iter_mut().for_each(|d| d.missingness_rate = 0.0);
        let tmp = tempfile::tempdir().unwrap();
        let manifest = generate_phantom_corpus(&spec, tmp.path(), false).unwrap();
        assert_eq!(manifest.cases.len(), 8);
        let registry = spec.registry().unwrap();
        let corpus = Corpus::load(tmp.path(), &registry).unwrap();
        assert_eq!(corpus.len(), 24);
        for e in &corpus.entries {
            assert_eq!(e.sample.availability, registry.get(e.sample.dataset_id).unwrap().coverage);
        }
        assert_eq!(corpus.samples(Split::Test).count(), 3);
    }

    #[test]
    fn regeneration_is_byte_identical_and_guarded() {
        let spec = PhantomSpec::from_toml_str(TWO_SITES).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_phantom_corpus(&spec, a.path(), false).unwrap();
        generate_phantom_corpus(&spec, b.path(), false).unwrap();
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
        assert!(generate_phantom_corpus(&spec, a.path(), false).is_err());
        generate_phantom_corpus(&spec, a.path(), true).unwrap();
        assert_eq!(dir_digest(a.path()), dir_digest(b.path()));
    }

    fn dir_digest(root: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for e in fs::read_dir(&dir).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(root).unwrap().display().to_string();
                    out.push((rel, fs::read(&p).unwrap()));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn drop_fraction_tracks_missingness() {
        let coverage = ModalityMask::FULL;
        let mut rng = stream(17, "drops");
        let (mut dropped, mut total) = (0usize, 0usize);
        for _ in 0..400 {
            let kept = draw_availability(coverage, 0.5, &mut rng);
            assert!(kept.count() >= 2);
            dropped += 6 - kept.count();
            total += 6;
        }
        let frac = dropped as f64 / total as f64;
        assert!((frac - 0.5).abs() <= 0.1, "drop fraction {frac}");
    }

    #[test]
    fn datasets_with_distinct_profiles_shift_histograms() {
        let spec = PhantomSpec::from_toml_str(TWO_SITES).unwrap();
        let manifest = plan_corpus(&spec).unwrap();
        let mut per_site: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for case in &manifest.cases {
            if !case.availability.contains(Modality::Flair) {
                continue;
            }
            for s in &case.slices {
                let sample = render_slice(&spec, case, s);
                per_site[case.dataset_id].extend(
                    sample.channel(Modality::Flair).iter().filter(|v| **v > 0.0),
                );
            }
        }
        let d = ks_statistic(&per_site[0], &per_site[1]);
        assert!(d > 0.1, "KS statistic {d}");
    }

    #[test]
    fn malformed_spec_names_field() {
        let err = PhantomSpec::from_toml_str(&TWO_SITES.replace("case_count = 4\n        holdout", "case_count = 0\n        holdout"))
            .unwrap_err();
        assert!(err.to_string().contains("datasets[1].case_count"), "{err}");
        let err = PhantomSpec::from_toml_str("global_seed = 1\ndatasets = [{ name = \"a\" }]").unwrap_err();
        assert!(err.to_string().contains("coverage"), "{err}");
    }
}
