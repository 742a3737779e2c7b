//! Dataset-conditioned feature modulation.
//!
//! The integer dataset identifier is expanded into a sinusoidal code over
//! a geometric frequency ladder, mapped by a two-layer MLP to an embedding,
//! and every modulated block maps that embedding through its own MLP to a
//! per-channel scale `gamma` and shift `beta`:
//! `F_hat = F * (gamma + 1) + beta`.

use super::NetConfig;
use crate::autograd::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub(crate) const EMBED_PREFIX: &str = "gen.pfm.embed";

/// Interleaved `sin, cos` pairs of `n * 10000^(-2k/d)` for `k < d/2`.
pub fn sinusoidal_code(n: usize, d: usize) -> Vec<f64> {
    let mut code = Vec::with_capacity(d);
    for k in 0..d / 2 {
        let freq = 10000f64.powf(-2.0 * k as f64 / d as f64);
        let (s, c) = (n as f64 * freq).sin_cos();
        code.push(s);
        code.push(c);
    }
    code
}

pub(crate) fn init_embedding(cfg: &NetConfig, seed: u64, store: &mut ParamStore) {
    use super::{init_tensor, Init};
    let fc1 = format!("{EMBED_PREFIX}.fc1.weight");
    store.insert(
        &fc1,
        init_tensor(seed, &fc1, &[cfg.embed_hidden, cfg.d_id], Init::Lecun { fan_in: cfg.d_id }),
    );
    let b1 = format!("{EMBED_PREFIX}.fc1.bias");
    store.insert(&b1, init_tensor(seed, &b1, &[cfg.embed_hidden], Init::Lecun { fan_in: cfg.d_id }));
    let fc2 = format!("{EMBED_PREFIX}.fc2.weight");
    store.insert(
        &fc2,
        init_tensor(seed, &fc2, &[cfg.d_id, cfg.embed_hidden], Init::Lecun { fan_in: cfg.embed_hidden }),
    );
    store.insert(format!("{EMBED_PREFIX}.fc2.bias"), Tensor::zeros(&[cfg.d_id]));
}

/// Embedding of identifier `n` on the graph.
pub(crate) fn embedding(g: &mut Graph, params: &ParamStore, cfg: &NetConfig, n: usize) -> Result<Var> {
    let code = g.input(Tensor::new(vec![cfg.d_id], sinusoidal_code(n, cfg.d_id)));
    let w1 = g.param(params, &format!("{EMBED_PREFIX}.fc1.weight"))?;
    let b1 = g.param(params, &format!("{EMBED_PREFIX}.fc1.bias"))?;
    let w2 = g.param(params, &format!("{EMBED_PREFIX}.fc2.weight"))?;
    let b2 = g.param(params, &format!("{EMBED_PREFIX}.fc2.bias"))?;
    let h = g.linear(code, w1, b1);
    let h = g.silu(h);
    Ok(g.linear(h, w2, b2))
}

/// `(gamma, beta)` of block `block`, each of length `channels`.
pub(crate) fn block_gamma_beta(
    g: &mut Graph,
    params: &ParamStore,
    block: &str,
    emb: Var,
    channels: usize,
) -> Result<(Var, Var)> {
    let w1 = g.param(params, &format!("{block}.pfm.fc1.weight"))?;
    let b1 = g.param(params, &format!("{block}.pfm.fc1.bias"))?;
    let w2 = g.param(params, &format!("{block}.pfm.fc2.weight"))?;
    let b2 = g.param(params, &format!("{block}.pfm.fc2.bias"))?;
    let h = g.linear(emb, w1, b1);
    let h = g.silu(h);
    let out = g.linear(h, w2, b2);
    let len = g.value(out).numel();
    if len != 2 * channels {
        return Err(Error::Shape(format!(
            "modulation head of `{block}` yields {len} values for {channels} channels"
        )));
    }
    Ok((g.slice1d(out, 0, channels), g.slice1d(out, channels, channels)))
}

/// Dataset embedding of `n` under the generator's embedding MLP.
pub fn encode_dataset_id(n: usize, state: &super::GeneratorState) -> Result<Tensor> {
    if n >= state.n_datasets {
        return Err(Error::Conditioning {
            id: n,
            count: state.n_datasets,
        });
    }
    if !state.config.pfm_enabled {
        return Err(Error::Config("modulation is disabled for this model".into()));
    }
    let mut g = Graph::new();
    let e = embedding(&mut g, &state.params, &state.config, n)?;
    Ok(g.value(e).clone())
}

/// Applies `F * (gamma + 1) + beta` to a `[C, H, W]` or `[B, C, H, W]`
/// feature map, where `gamma_beta` holds `gamma` followed by `beta`.
pub fn pfm_modulate(features: &Tensor, gamma_beta: &[f64]) -> Result<Tensor> {
    let shape = features.shape().to_vec();
    let as4 = match shape.len() {
        3 => features.clone().reshape(vec![1, shape[0], shape[1], shape[2]]),
        4 => features.clone(),
        _ => return Err(Error::Shape(format!("feature map of shape {shape:?}"))),
    };
    let c = as4.dims4().1;
    if gamma_beta.len() != 2 * c {
        return Err(Error::Shape(format!(
            "{} modulation values for {c} channels (expected {})",
            gamma_beta.len(),
            2 * c
        )));
    }
    let mut g = Graph::new();
    let x = g.input(as4);
    let gamma = g.input(Tensor::new(vec![c], gamma_beta[..c].to_vec()));
    let beta = g.input(Tensor::new(vec![c], gamma_beta[c..].to_vec()));
    let y = g.channel_affine(x, gamma, beta);
    Ok(g.value(y).clone().reshape(shape))
}
