//! Fusion of a variable number of source streams.
//!
//! Every stream passes through the same 1x1 transform and the same 1x1
//! gate; gate logits are normalised by a softmax over the streams that are
//! present, per pixel, and the transformed features are mixed with those
//! weights. Sharing the transform and gate makes the result independent of
//! stream order and of how many streams are supplied.

use super::{BlockSpec, NetConfig};
use crate::autograd::{Graph, ParamStore, Var};
use crate::datamodel::Modality;
use crate::error::{Error, Result};

pub(crate) fn transform_spec(cfg: &NetConfig, level: usize) -> BlockSpec {
    let c = cfg.channels(level);
    BlockSpec::conv(format!("gen.fuse.l{level}.transform"), 2 * c, c, 1, 1)
}

pub(crate) fn gate_spec(cfg: &NetConfig, level: usize) -> BlockSpec {
    let c = cfg.channels(level);
    BlockSpec::conv(format!("gen.fuse.l{level}.gate"), 2 * c, 1, 1, 1).plain()
}

/// Fuses `(modality, features)` streams at resolution `level`. Streams are
/// processed in canonical modality order.
pub fn fuse_features(
    g: &mut Graph,
    params: &ParamStore,
    cfg: &NetConfig,
    level: usize,
    streams: &[(Modality, Var)],
    embedding: Option<Var>,
) -> Result<Var> {
    if streams.is_empty() {
        return Err(Error::InvalidTask("fusion needs at least one source stream".into()));
    }
    let mut ordered = streams.to_vec();
    ordered.sort_by_key(|(m, _)| *m);
    if ordered.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::InvalidTask("duplicate source stream".into()));
    }
    let transform = transform_spec(cfg, level);
    let gate = gate_spec(cfg, level);
    let mut feats = Vec::with_capacity(ordered.len());
    let mut logits = Vec::with_capacity(ordered.len());
    for (_, s) in &ordered {
        feats.push(transform.forward(g, params, cfg, *s, embedding)?);
        logits.push(gate.forward(g, params, cfg, *s, embedding)?);
    }
    Ok(g.gated_mix(&feats, &logits))
}
