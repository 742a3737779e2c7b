use super::{BlockSpec, NetConfig};
use crate::autograd::{Graph, ParamStore, Var};
use crate::datamodel::{Modality, ModalityMask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One least-squares patch critic per covered modality.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorBank {
    pub config: NetConfig,
    pub coverage: ModalityMask,
    pub params: ParamStore,
}

fn blocks(cfg: &NetConfig, m: Modality) -> Vec<BlockSpec> {
    let mut out = Vec::with_capacity(cfg.disc_stages + 1);
    let mut c_in = 1;
    for k in 0..cfg.disc_stages {
        let c = cfg.disc_channels << k;
        out.push(BlockSpec::conv(format!("disc.{m}.s{k}"), c_in, c, 3, 2).unmodulated());
        c_in = c;
    }
    out.push(BlockSpec::conv(format!("disc.{m}.head"), c_in, 1, 3, 1).plain());
    out
}

impl DiscriminatorBank {
    pub fn new(config: NetConfig, coverage: ModalityMask, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for m in coverage.modalities() {
            for b in blocks(&config, m) {
                b.init_params(&config, init_seed, &mut params);
            }
        }
        Ok(DiscriminatorBank {
            config,
            coverage,
            params,
        })
    }

    /// Realism map `[B, 1, h, w]` of a `[B, 1, H, W]` batch of modality `m`.
    pub fn forward(&self, g: &mut Graph, m: Modality, x: Var) -> Result<Var> {
        if !self.coverage.contains(m) {
            return Err(Error::Config(format!(
                "no discriminator for {m}: outside coverage {}",
                self.coverage.names()
            )));
        }
        super::run_blocks(g, &self.params, &self.config, &blocks(&self.config, m), x, None)
    }

    /// Spatial extent of the realism map for an `h x w` input.
    pub fn map_size(&self, h: usize, w: usize) -> (usize, usize) {
        (0..self.config.disc_stages).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
    }
}

/// Realism map `[h, w]` of a single `H x W` image of modality `m`.
pub fn discriminate(m: Modality, image: &Tensor, bank: &DiscriminatorBank) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected [H, W], got {s:?}"))),
    };
    let mut g = Graph::new();
    let x = g.input(image.clone().reshape(vec![1, 1, h, w]));
    let y = bank.forward(&mut g, m, x)?;
    let (_, _, oh, ow) = g.value(y).dims4();
    Ok(g.value(y).clone().reshape(vec![oh, ow]))
}
