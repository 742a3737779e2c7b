//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or strings and returns either an image
//! buffer or a JSON document, so the page needs no bundler.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use pmm_synth::datamodel::{IntensityProfile, Modality, Split};
use pmm_synth::metrics::{psnr, ssim, SsimParams, PSNR_CAP_DB};
use pmm_synth::network::pfm_modulate;
use pmm_synth::phantom::{plan_corpus, render_modality, AnatomyParams, PhantomSpec};
use pmm_synth::scheduler::{build_epoch_plan, epoch_seed, group_refs, GroupKey, SampleRef};
use pmm_synth::seed::{stream, stream_indexed};
use pmm_synth::Tensor;

type Res<T> = Result<T, String>;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn to_js<T>(r: Res<T>) -> Result<T, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

fn modality(name: &str) -> Res<Modality> {
    name.parse().map_err(err)
}

fn profile(gamma: f64, gain: f64, bias: f64, noise_sigma: f64) -> Res<IntensityProfile> {
    let p = IntensityProfile {
        gamma,
        gain,
        bias,
        noise_sigma,
    };
    p.validate("profile").map_err(err)?;
    Ok(p)
}

fn render(seed: u64, size: usize, m: Modality, p: &IntensityProfile) -> Vec<f64> {
    let anatomy = AnatomyParams::sample(&mut stream(seed, "anatomy")).rasterize(size);
    render_modality(&anatomy, m, p, &mut stream_indexed(seed, "noise", &[m.index() as u64]))
}

/// Renders one phantom slice of `modality` as a row-major `size x size`
/// image in [0, 1]. The anatomy depends only on `seed`, so changing the
/// profile shows the same head under a different scanner.
#[wasm_bindgen]
pub fn render_phantom(
    seed: u64,
    size: usize,
    modality_name: &str,
    gamma: f64,
    gain: f64,
    bias: f64,
    noise_sigma: f64,
) -> Result<Vec<f64>, JsValue> {
    to_js(render_phantom_impl(seed, size, modality_name, gamma, gain, bias, noise_sigma))
}

#[allow(clippy::too_many_arguments)]
fn render_phantom_impl(
    seed: u64,
    size: usize,
    modality_name: &str,
    gamma: f64,
    gain: f64,
    bias: f64,
    noise_sigma: f64,
) -> Res<Vec<f64>> {
    if !(8..=256).contains(&size) {
        return Err(err("size must lie in 8..=256"));
    }
    let m = modality(modality_name)?;
    Ok(render(seed, size, m, &profile(gamma, gain, bias, noise_sigma)?))
}

#[derive(Serialize)]
struct Modulated {
    image: Vec<f64>,
    psnr: f64,
    ssim: f64,
}

/// Applies a single-channel feature modulation `x * (gamma + 1) + beta` to
/// the reference phantom (default profile) and scores the result against it.
/// Returns `{ image, psnr, ssim }` as JSON.
#[wasm_bindgen]
pub fn modulate_phantom(seed: u64, size: usize, modality_name: &str, gamma: f64, beta: f64) -> Result<String, JsValue> {
    to_js(modulate_phantom_impl(seed, size, modality_name, gamma, beta))
}

fn modulate_phantom_impl(seed: u64, size: usize, modality_name: &str, gamma: f64, beta: f64) -> Res<String> {
    if !(16..=256).contains(&size) {
        return Err(err("size must lie in 16..=256"));
    }
    let m = modality(modality_name)?;
    let reference = render(seed, size, m, &IntensityProfile::default());
    let features = Tensor::new(vec![1, size, size], reference.clone());
    let out = pfm_modulate(&features, &[gamma, beta]).map_err(err)?;
    let image = out.data().to_vec();
    let p = psnr(&reference, &image, 1.0).map_err(err)?.min(PSNR_CAP_DB);
    let s = ssim(&reference, &image, size, size, &SsimParams::default()).map_err(err)?;
    serde_json::to_string(&Modulated { image, psnr: p, ssim: s }).map_err(err)
}

#[derive(Serialize)]
struct PlanMember {
    id: String,
    /// Repeat appearance of a slice already scheduled this epoch.
    pad: bool,
}

#[derive(Serialize)]
struct PlanBatch {
    dataset: String,
    availability: String,
    members: Vec<PlanMember>,
}

#[derive(Serialize)]
struct PlanGroup {
    dataset: String,
    availability: String,
    size: usize,
    batches: usize,
}

#[derive(Serialize)]
struct PlanView {
    samples: usize,
    padded: usize,
    groups: Vec<PlanGroup>,
    batches: Vec<PlanBatch>,
    problems: Vec<String>,
}

/// Plans the training split of the phantom corpus described by `spec_toml`
/// and returns one epoch of modality-consistent batches as JSON.
#[wasm_bindgen]
pub fn plan_batches(spec_toml: &str, batch_size: usize, epoch: usize) -> Result<String, JsValue> {
    to_js(plan_batches_impl(spec_toml, batch_size, epoch))
}

fn plan_batches_impl(spec_toml: &str, batch_size: usize, epoch: usize) -> Res<String> {
    let spec = PhantomSpec::from_toml_str(spec_toml).map_err(err)?;
    let manifest = plan_corpus(&spec).map_err(err)?;
    let mut samples: Vec<(String, GroupKey)> = Vec::new();
    for case in manifest.cases.iter().filter(|c| c.split == Split::Train) {
        for s in &case.slices {
            let key = GroupKey {
                dataset_id: case.dataset_id,
                availability: case.availability,
            };
            samples.push((format!("{}/{}/s{}", case.dataset, case.case_id, s.slice_index), key));
        }
    }
    if samples.is_empty() {
        return Err(err("the phantom spec has no training slices"));
    }
    let groups = group_refs(samples.iter().enumerate().map(|(i, (_, k))| (SampleRef(i), *k)));
    let plan = build_epoch_plan(&groups, batch_size, epoch_seed(spec.global_seed, epoch)).map_err(err)?;
    let name = |id: usize| spec.datasets[id].name.clone();

    let mut seen = std::collections::BTreeSet::new();
    let batches: Vec<PlanBatch> = plan
        .batches
        .iter()
        .map(|b| PlanBatch {
            dataset: name(b.key.dataset_id),
            availability: b.key.availability.names(),
            members: b
                .members
                .iter()
                .map(|r| PlanMember {
                    id: samples[r.0].0.clone(),
                    pad: !seen.insert(*r),
                })
                .collect(),
        })
        .collect();
    let view = PlanView {
        samples: samples.len(),
        padded: plan.len() * batch_size - samples.len(),
        groups: groups
            .iter()
            .map(|(k, members)| PlanGroup {
                dataset: name(k.dataset_id),
                availability: k.availability.names(),
                size: members.len(),
                batches: members.len().div_ceil(batch_size),
            })
            .collect(),
        batches,
        problems: plan.check(&groups),
    };
    serde_json::to_string(&view).map_err(err)
}
