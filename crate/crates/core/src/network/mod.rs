//! Unified synthesis backbone.
//!
//! One common encoder sees the whole masked input; one encoder per source
//! modality sees its own channel. At every resolution level the common
//! features are concatenated with each modality's features and fused by a
//! gated mixture over the available streams. One decoder per output
//! modality reads the fused pyramid. Every convolutional block of the
//! generator is modulated by an embedding of the dataset identifier.
//!
//! Parameters live in a [`ParamStore`] under canonical path names such as
//! `gen.enc.T1.l0.b0.conv.weight`; initialisation draws each tensor from a
//! stream derived from the init seed and its name, so adding or removing
//! parameters never perturbs the others.

mod discriminator;
mod fusion;
mod generator;
mod pfm;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use discriminator::{discriminate, DiscriminatorBank};
pub use fusion::fuse_features;
pub use generator::{forward_generator, GeneratorState};
pub use pfm::{encode_dataset_id, pfm_modulate, sinusoidal_code};

use crate::autograd::{Graph, ParamStore, Var};
use crate::error::Result;
use crate::seed::stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub blocks_per_level: usize,
    /// Dimension of the sinusoidal identifier code and of the embedding.
    pub d_id: usize,
    pub embed_hidden: usize,
    pub pfm_hidden: usize,
    pub disc_channels: usize,
    pub disc_stages: usize,
    pub pfm_enabled: bool,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            base_channels: 32,
            levels: 3,
            blocks_per_level: 2,
            d_id: 64,
            embed_hidden: 64,
            pfm_hidden: 64,
            disc_channels: 16,
            disc_stages: 3,
            pfm_enabled: true,
            leaky_slope: 0.2,
        }
    }
}

impl NetConfig {
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> crate::Result<()> {
        use crate::Error;
        let checks = [
            (self.base_channels >= 1, "model.base_channels", "must be >= 1"),
            (self.levels >= 1, "model.levels", "must be >= 1"),
            (self.blocks_per_level >= 1, "model.blocks_per_level", "must be >= 1"),
            (self.d_id >= 2 && self.d_id.is_multiple_of(2), "model.d_id", "must be an even number >= 2"),
            (self.embed_hidden >= 1, "model.embed_hidden", "must be >= 1"),
            (self.pfm_hidden >= 1, "model.pfm_hidden", "must be >= 1"),
            (self.disc_channels >= 1, "model.disc_channels", "must be >= 1"),
            (self.disc_stages >= 1, "model.disc_stages", "must be >= 1"),
            (self.leaky_slope.is_finite(), "model.leaky_slope", "must be finite"),
        ];
        for (ok, field, msg) in checks {
            if !ok {
                return Err(Error::field(field, msg));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// He-normal for leaky-ReLU layers.
    Kaiming { fan_in: usize, slope: f64 },
    /// Normal with std `1/sqrt(fan_in)`.
    Lecun { fan_in: usize },
}

fn init_tensor(init_seed: u64, name: &str, shape: &[usize], init: Init) -> Tensor {
    let std = match init {
        Init::Kaiming { fan_in, slope } => (2.0 / ((1.0 + slope * slope) * fan_in as f64)).sqrt(),
        Init::Lecun { fan_in } => (1.0 / fan_in as f64).sqrt(),
    };
    let mut rng = stream(init_seed, name);
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
}

/// One convolution, optionally modulated and activated.
#[derive(Clone, Debug, PartialEq)]
struct BlockSpec {
    name: String,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    modulated: bool,
    activated: bool,
}

impl BlockSpec {
    fn conv(name: String, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        BlockSpec {
            name,
            c_in,
            c_out,
            k,
            stride,
            modulated: true,
            activated: true,
        }
    }

    fn plain(mut self) -> Self {
        self.modulated = false;
        self.activated = false;
        self
    }

    fn unmodulated(mut self) -> Self {
        self.modulated = false;
        self
    }

    fn init_params(&self, cfg: &NetConfig, seed: u64, store: &mut ParamStore) {
        let w = format!("{}.conv.weight", self.name);
        let fan_in = self.c_in * self.k * self.k;
        let init = if self.activated {
            Init::Kaiming {
                fan_in,
                slope: cfg.leaky_slope,
            }
        } else {
            Init::Lecun { fan_in }
        };
        store.insert(&w, init_tensor(seed, &w, &[self.c_out, self.c_in, self.k, self.k], init));
        store.insert(format!("{}.conv.bias", self.name), Tensor::zeros(&[self.c_out]));
        if self.modulated && cfg.pfm_enabled {
            let fc1 = format!("{}.pfm.fc1.weight", self.name);
            store.insert(
                &fc1,
                init_tensor(seed, &fc1, &[cfg.pfm_hidden, cfg.d_id], Init::Lecun { fan_in: cfg.d_id }),
            );
            store.insert(format!("{}.pfm.fc1.bias", self.name), Tensor::zeros(&[cfg.pfm_hidden]));
            // Zero head: gamma = beta = 0, i.e. identity modulation at init.
            store.insert(
                format!("{}.pfm.fc2.weight", self.name),
                Tensor::zeros(&[2 * self.c_out, cfg.pfm_hidden]),
            );
            store.insert(format!("{}.pfm.fc2.bias", self.name), Tensor::zeros(&[2 * self.c_out]));
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        cfg: &NetConfig,
        x: Var,
        embedding: Option<Var>,
    ) -> Result<Var> {
        let w = g.param(params, &format!("{}.conv.weight", self.name))?;
        let b = g.param(params, &format!("{}.conv.bias", self.name))?;
        let mut y = g.conv2d(x, w, b, self.stride, self.k / 2);
        if self.modulated && cfg.pfm_enabled {
            let emb = embedding.expect("modulated block needs an embedding");
            let (gamma, beta) = pfm::block_gamma_beta(g, params, &self.name, emb, self.c_out)?;
            y = g.channel_affine(y, gamma, beta);
        }
        if self.activated {
            y = g.leaky_relu(y, cfg.leaky_slope);
        }
        Ok(y)
    }
}

fn run_blocks(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &NetConfig,
    blocks: &[BlockSpec],
    mut x: Var,
    embedding: Option<Var>,
) -> Result<Var> {
    for b in blocks {
        x = b.forward(g, params, cfg, x, embedding)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests;
