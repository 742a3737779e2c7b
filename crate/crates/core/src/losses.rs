//! Selective-supervision objectives.
//!
//! A sample with availability `M` is split by a synthesis condition `SC`
//! (`SC ⊆ M`) into sources (`sc_i = 1`) and targets (`m_i = 1, sc_i = 0`).
//! Sources are reconstructed, targets are synthesized and judged by their
//! modality's discriminator; unavailable modalities contribute nothing.
//! Pixel terms are means over every pixel of the batch, summed over
//! modalities.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datamodel::{Modality, ModalityMask, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::network::DiscriminatorBank;
use crate::seed::Rng;
use crate::tensor::Tensor;

/// Column header of the per-step loss log.
pub const LOSS_LOG_HEADER: &str = "epoch,step,dataset_id,availability,condition,syn,rec,adv,d_loss";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub syn: f64,
    pub rec: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            syn: 100.0,
            rec: 30.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (v, field) in [(self.syn, "loss.syn"), (self.rec, "loss.rec"), (self.adv, "loss.adv")] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::field(field, "must be a finite nonnegative number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub syn: f64,
    pub rec: f64,
    pub adv: f64,
    pub syn_per: [f64; NUM_MODALITIES],
    pub rec_per: [f64; NUM_MODALITIES],
    pub adv_per: [f64; NUM_MODALITIES],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct DiscReport {
    pub total: f64,
    pub per: [f64; NUM_MODALITIES],
}

fn check_condition(availability: ModalityMask, condition: ModalityMask) -> Result<()> {
    if !condition.is_subset_of(availability) {
        return Err(Error::Constraint(format!(
            "condition {} selects modalities outside availability {}",
            condition.to_bit_string(),
            availability.to_bit_string()
        )));
    }
    Ok(())
}

fn check_channels(t: &Tensor, what: &str) -> Result<()> {
    let ok = match t.shape() {
        [c, _, _] | [_, c, _, _] => *c == NUM_MODALITIES,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what} must have {NUM_MODALITIES} modality channels, got shape {:?}",
            t.shape()
        )))
    }
}

fn as_batch(t: &Tensor) -> Tensor {
    match t.shape() {
        [c, h, w] => t.clone().reshape(vec![1, *c, *h, *w]),
        _ => t.clone(),
    }
}

/// Zeroes every channel whose condition bit is clear. Accepts `[6, H, W]`
/// or `[B, 6, H, W]`.
pub fn mask_input(y: &Tensor, availability: ModalityMask, condition: ModalityMask) -> Result<Tensor> {
    check_channels(y, "sample")?;
    check_condition(availability, condition)?;
    let mut x = y.clone();
    let shape = x.shape().to_vec();
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        if !condition.is_set(i % NUM_MODALITIES) {
            chunk.fill(0.0);
        }
    }
    Ok(x)
}

/// Targets of a condition: available but not given.
pub fn targets(availability: ModalityMask, condition: ModalityMask) -> ModalityMask {
    availability.minus(condition)
}

/// Generator objective on the graph. `y_hat` is `[B, 6, H, W]`; `fake_scores[i]`
/// must hold the discriminator map of `y_hat` channel `i` for every target
/// `i` whenever the adversarial weight is nonzero.
pub fn generator_objective(
    g: &mut Graph,
    y_hat: Var,
    y: &Tensor,
    availability: ModalityMask,
    condition: ModalityMask,
    fake_scores: &[Option<Var>; NUM_MODALITIES],
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    check_channels(g.value(y_hat), "synthesis")?;
    check_channels(y, "ground truth")?;
    check_condition(availability, condition)?;
    let y = as_batch(y);
    if g.value(y_hat).shape() != y.shape() {
        return Err(Error::Shape(format!(
            "synthesis {:?} vs ground truth {:?}",
            g.value(y_hat).shape(),
            y.shape()
        )));
    }
    let mut report = LossReport::default();
    let (mut syn, mut rec, mut adv) = (Vec::new(), Vec::new(), Vec::new());
    for m in availability.modalities() {
        let i = m.index();
        let yi = g.slice_channel(y_hat, i);
        let l1 = g.mean_abs_diff(yi, y.channel(i));
        if condition.contains(m) {
            report.rec_per[i] = g.value(l1).item();
            rec.push((l1, 1.0));
        } else {
            report.syn_per[i] = g.value(l1).item();
            syn.push((l1, 1.0));
            if weights.adv != 0.0 {
                let score = fake_scores[i].ok_or_else(|| {
                    Error::Constraint(format!("missing discriminator output for target {m}"))
                })?;
                let l2 = g.mean_sq_diff(score, 1.0);
                report.adv_per[i] = g.value(l2).item();
                adv.push((l2, 1.0));
            }
        }
    }
    let syn = g.weighted_sum(&syn);
    let rec = g.weighted_sum(&rec);
    let adv = g.weighted_sum(&adv);
    let total = g.weighted_sum(&[(syn, weights.syn), (rec, weights.rec), (adv, weights.adv)]);
    report.syn = g.value(syn).item();
    report.rec = g.value(rec).item();
    report.adv = g.value(adv).item();
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Generator loss of concrete tensors; `fake_scores[i]` is the realism map
/// of `y_hat` channel `i`.
pub fn generator_loss(
    y_hat: &Tensor,
    y: &Tensor,
    availability: ModalityMask,
    condition: ModalityMask,
    fake_scores: &[Option<Tensor>; NUM_MODALITIES],
    weights: &LossWeights,
) -> Result<LossReport> {
    check_channels(y_hat, "synthesis")?;
    let mut g = Graph::new();
    let yv = g.input(as_batch(y_hat));
    let scores = std::array::from_fn(|i| fake_scores[i].clone().map(|t| g.input(t)));
    let (_, report) = generator_objective(&mut g, yv, y, availability, condition, &scores, weights)?;
    Ok(report)
}

/// Discriminator objective given realism maps of synthesized (`fake`) and
/// real images, each gated by `(1 - sc_i) m_i`.
pub fn discriminator_objective(
    g: &mut Graph,
    availability: ModalityMask,
    condition: ModalityMask,
    fake: &[Option<Var>; NUM_MODALITIES],
    real: &[Option<Var>; NUM_MODALITIES],
) -> Result<(Var, DiscReport)> {
    check_condition(availability, condition)?;
    let mut report = DiscReport::default();
    let mut terms = Vec::new();
    for m in targets(availability, condition).modalities() {
        let i = m.index();
        let missing = || Error::Constraint(format!("missing discriminator output for target {m}"));
        let f = g.mean_sq_diff(fake[i].ok_or_else(missing)?, 0.0);
        let r = g.mean_sq_diff(real[i].ok_or_else(missing)?, 1.0);
        report.per[i] = g.value(f).item() + g.value(r).item();
        terms.push((f, 1.0));
        terms.push((r, 1.0));
    }
    let total = g.weighted_sum(&terms);
    report.total = g.value(total).item();
    Ok((total, report))
}

/// Builds the discriminator objective for a batch on `g`, running each
/// target's discriminator on the (detached) synthesis and on the ground
/// truth.
pub fn discriminator_step_objective(
    g: &mut Graph,
    bank: &DiscriminatorBank,
    y_hat: &Tensor,
    y: &Tensor,
    availability: ModalityMask,
    condition: ModalityMask,
) -> Result<(Var, DiscReport)> {
    check_channels(y_hat, "synthesis")?;
    check_channels(y, "ground truth")?;
    check_condition(availability, condition)?;
    let (y_hat, y) = (as_batch(y_hat), as_batch(y));
    if y_hat.shape() != y.shape() {
        return Err(Error::Shape(format!(
            "synthesis {:?} vs ground truth {:?}",
            y_hat.shape(),
            y.shape()
        )));
    }
    let mut fake = [None; NUM_MODALITIES];
    let mut real = [None; NUM_MODALITIES];
    for m in targets(availability, condition).modalities() {
        let i = m.index();
        let f = g.input(y_hat.channel(i));
        fake[i] = Some(bank.forward(g, m, f)?);
        let r = g.input(y.channel(i));
        real[i] = Some(bank.forward(g, m, r)?);
    }
    discriminator_objective(g, availability, condition, &fake, &real)
}

/// Discriminator loss of concrete tensors under `bank`.
pub fn discriminator_loss(
    y_hat: &Tensor,
    y: &Tensor,
    availability: ModalityMask,
    condition: ModalityMask,
    bank: &DiscriminatorBank,
) -> Result<DiscReport> {
    let mut g = Graph::new();
    let (_, report) = discriminator_step_objective(&mut g, bank, y_hat, y, availability, condition)?;
    Ok(report)
}

/// Every condition with at least one source and one target.
pub fn valid_conditions(availability: ModalityMask) -> Vec<ModalityMask> {
    let mods: Vec<Modality> = availability.modalities().collect();
    let k = mods.len();
    if k < 2 {
        return Vec::new();
    }
    (1..(1u32 << k) - 1).map(|code| subset(&mods, code)).collect()
}

fn subset(mods: &[Modality], code: u32) -> ModalityMask {
    mods.iter()
        .enumerate()
        .filter(|(j, _)| code >> j & 1 == 1)
        .map(|(_, m)| *m)
        .collect()
}

/// Draws a condition uniformly from [`valid_conditions`].
pub fn sample_condition(availability: ModalityMask, rng: &mut Rng) -> Result<ModalityMask> {
    let mods: Vec<Modality> = availability.modalities().collect();
    if mods.len() < 2 {
        return Err(Error::Untrainable(format!(
            "availability {} has fewer than two modalities",
            availability.to_bit_string()
        )));
    }
    let code = rng.random_range(1..(1u32 << mods.len()) - 1);
    Ok(subset(&mods, code))
}

/// One line of the per-step loss log.
#[derive(Clone, Debug, PartialEq)]
pub struct LossLogRow {
    pub epoch: usize,
    pub step: usize,
    pub dataset_id: usize,
    pub availability: ModalityMask,
    pub condition: ModalityMask,
    pub syn: f64,
    pub rec: f64,
    pub adv: f64,
    pub d_loss: f64,
}

impl LossLogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.dataset_id,
            self.availability.to_bit_string(),
            self.condition.to_bit_string(),
            self.syn,
            self.rec,
            self.adv,
            self.d_loss
        )
    }
}
