use super::{fusion, pfm, run_blocks, BlockSpec, NetConfig};
use crate::autograd::{Graph, ParamStore, Var};
use crate::datamodel::{union_coverage, DatasetRegistry, Modality, ModalityMask, NUM_MODALITIES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const COMMON: &str = "common";

/// Generator parameters together with the architecture and the coverage
/// they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorState {
    pub config: NetConfig,
    /// Union coverage: encoder and decoder streams exist exactly for these.
    pub coverage: ModalityMask,
    pub n_datasets: usize,
    pub params: ParamStore,
}

fn encoder_blocks(cfg: &NetConfig, stream: &str, c_in: usize) -> Vec<Vec<BlockSpec>> {
    (0..cfg.levels)
        .map(|l| {
            let c = cfg.channels(l);
            (0..cfg.blocks_per_level)
                .map(|b| {
                    let name = format!("gen.enc.{stream}.l{l}.b{b}");
                    match (l, b) {
                        (0, 0) => BlockSpec::conv(name, c_in, c, 3, 1),
                        (_, 0) => BlockSpec::conv(name, cfg.channels(l - 1), c, 3, 2),
                        _ => BlockSpec::conv(name, c, c, 3, 1),
                    }
                })
                .collect()
        })
        .collect()
}

fn decoder_blocks(cfg: &NetConfig, m: Modality) -> (Vec<BlockSpec>, BlockSpec) {
    let top = cfg.levels - 1;
    let mut blocks = vec![BlockSpec::conv(
        format!("gen.dec.{m}.l{top}"),
        cfg.channels(top),
        cfg.channels(top),
        3,
        1,
    )];
    for l in (0..top).rev() {
        blocks.push(BlockSpec::conv(
            format!("gen.dec.{m}.l{l}"),
            cfg.channels(l + 1) + cfg.channels(l),
            cfg.channels(l),
            3,
            1,
        ));
    }
    let head = BlockSpec::conv(format!("gen.dec.{m}.head"), cfg.channels(0), 1, 1, 1).plain();
    (blocks, head)
}

impl GeneratorState {
    pub fn new(config: NetConfig, registry: &DatasetRegistry, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let coverage = union_coverage(registry)?;
        let mut params = ParamStore::new();
        let mut add = |spec: &BlockSpec| spec.init_params(&config, init_seed, &mut params);
        for level in encoder_blocks(&config, COMMON, NUM_MODALITIES) {
            level.iter().for_each(&mut add);
        }
        for m in coverage.modalities() {
            for level in encoder_blocks(&config, m.name(), 1) {
                level.iter().for_each(&mut add);
            }
        }
        for l in 0..config.levels {
            add(&fusion::transform_spec(&config, l));
            add(&fusion::gate_spec(&config, l));
        }
        for m in coverage.modalities() {
            let (blocks, head) = decoder_blocks(&config, m);
            blocks.iter().for_each(&mut add);
            add(&head);
        }
        if config.pfm_enabled {
            pfm::init_embedding(&config, init_seed, &mut params);
        }
        Ok(GeneratorState {
            config,
            coverage,
            n_datasets: registry.len(),
            params,
        })
    }

    /// Spatial size divisor required of inputs.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.levels - 1)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Builds the forward pass on `g` for a `[B, 6, H, W]` batch that shares
    /// one source mask and one dataset identifier. Returns `[B, 6, H, W]`;
    /// channels outside `outputs` are constant zero and carry no gradient.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        source: ModalityMask,
        n: usize,
        outputs: ModalityMask,
    ) -> Result<Var> {
        self.check_request(g.value(x), source, n)?;
        if !outputs.is_subset_of(self.coverage) {
            return Err(Error::InvalidTask(format!(
                "requested outputs {} outside coverage {}",
                outputs.names(),
                self.coverage.names()
            )));
        }
        let cfg = &self.config;
        let p = &self.params;
        let emb = if cfg.pfm_enabled {
            Some(pfm::embedding(g, p, cfg, n)?)
        } else {
            None
        };

        let common = encode(g, p, cfg, &encoder_blocks(cfg, COMMON, NUM_MODALITIES), x, emb)?;
        let mut per_source = Vec::new();
        for m in source.modalities() {
            let xi = g.slice_channel(x, m.index());
            let feats = encode(g, p, cfg, &encoder_blocks(cfg, m.name(), 1), xi, emb)?;
            per_source.push((m, feats));
        }
        let mut fused = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            let streams: Vec<(Modality, Var)> = per_source
                .iter()
                .map(|(m, feats)| (*m, g.concat(&[common[l], feats[l]])))
                .collect();
            fused.push(fusion::fuse_features(g, p, cfg, l, &streams, emb)?);
        }

        let (b, _, h, w) = g.value(x).dims4();
        let mut channels = Vec::with_capacity(NUM_MODALITIES);
        for m in Modality::ALL {
            if !outputs.contains(m) {
                channels.push(g.input(Tensor::zeros(&[b, 1, h, w])));
                continue;
            }
            let (blocks, head) = decoder_blocks(cfg, m);
            let top = cfg.levels - 1;
            let mut y = blocks[0].forward(g, p, cfg, fused[top], emb)?;
            for (i, l) in (0..top).rev().enumerate() {
                let up = g.upsample2x(y);
                let cat = g.concat(&[up, fused[l]]);
                y = blocks[i + 1].forward(g, p, cfg, cat, emb)?;
            }
            let logits = head.forward(g, p, cfg, y, emb)?;
            channels.push(g.sigmoid(logits));
        }
        Ok(g.concat(&channels))
    }

    fn check_request(&self, x: &Tensor, source: ModalityMask, n: usize) -> Result<()> {
        if source.is_empty() {
            return Err(Error::InvalidTask("source mask is empty".into()));
        }
        if !source.is_subset_of(self.coverage) {
            return Err(Error::InvalidTask(format!(
                "source {} outside coverage {}",
                source.names(),
                self.coverage.names()
            )));
        }
        if n >= self.n_datasets {
            return Err(Error::Conditioning {
                id: n,
                count: self.n_datasets,
            });
        }
        if x.shape().len() != 4 || x.shape()[1] != NUM_MODALITIES {
            return Err(Error::Shape(format!(
                "expected [B, {NUM_MODALITIES}, H, W], got {:?}",
                x.shape()
            )));
        }
        let (b, _, h, w) = x.dims4();
        let k = self.size_multiple();
        if h == 0 || w == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::Shape(format!(
                "spatial size {h}x{w} must be a positive multiple of {k}"
            )));
        }
        let plane = h * w;
        for bi in 0..b {
            for m in Modality::ALL {
                if source.contains(m) {
                    continue;
                }
                let off = (bi * NUM_MODALITIES + m.index()) * plane;
                if x.data()[off..off + plane].iter().any(|&v| v != 0.0) {
                    return Err(Error::InvalidTask(format!(
                        "input channel {m} is not zero but absent from the source mask"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn encode(
    g: &mut Graph,
    p: &ParamStore,
    cfg: &NetConfig,
    levels: &[Vec<BlockSpec>],
    mut x: Var,
    emb: Option<Var>,
) -> Result<Vec<Var>> {
    let mut out = Vec::with_capacity(levels.len());
    for blocks in levels {
        x = run_blocks(g, p, cfg, blocks, x, emb)?;
        out.push(x);
    }
    Ok(out)
}

/// Synthesizes all six channels of a single `[6, H, W]` masked input.
/// Channels outside the generator's coverage are returned as zero.
pub fn forward_generator(
    x: &Tensor,
    source: ModalityMask,
    n: usize,
    state: &GeneratorState,
) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("expected [6, H, W], got {shape:?}")));
    }
    let mut g = Graph::new();
    let xv = g.input(x.clone().reshape(vec![1, shape[0], shape[1], shape[2]]));
    let y = state.forward(&mut g, xv, source, n, state.coverage)?;
    Ok(g.value(y).clone().reshape(shape))
}
