//! Binary checkpoint container.
//!
//! Layout: an 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then every tensor as raw little-endian `f64` in header order.
//! Values round-trip bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::datamodel::DatasetRegistry;
use crate::error::{Error, Result};
use crate::network::{DiscriminatorBank, GeneratorState, NetConfig};
use crate::optim::{Adam, AdamConfig, Moments};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PMMSYN01";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub registry: DatasetRegistry,
    pub corpus_hash: Option<String>,
    /// Echo of the training configuration that produced the weights.
    pub train_config: serde_json::Value,
    pub generator: GeneratorState,
    pub discriminator: Option<DiscriminatorBank>,
    pub opt_g: Option<Adam>,
    pub opt_d: Option<Adam>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    epoch: usize,
    net: NetConfig,
    registry: DatasetRegistry,
    registry_hash: String,
    corpus_hash: Option<String>,
    train_config: serde_json::Value,
    has_discriminator: bool,
    adam_g: Option<AdamConfig>,
    adam_d: Option<AdamConfig>,
    /// `section -> name -> steps` for optimizer moments.
    adam_steps: BTreeMap<String, BTreeMap<String, u64>>,
    tensors: Vec<TensorEntry>,
}

fn push_store(entries: &mut Vec<TensorEntry>, blob: &mut Vec<u8>, section: &str, store: &ParamStore) {
    for (name, t) in store.iter() {
        entries.push(TensorEntry {
            section: section.into(),
            name: name.clone(),
            shape: t.shape().to_vec(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn moments_stores(opt: &Adam) -> (ParamStore, ParamStore, BTreeMap<String, u64>) {
    let (mut m, mut v, mut steps) = (ParamStore::new(), ParamStore::new(), BTreeMap::new());
    for (name, st) in &opt.state {
        m.insert(name.clone(), st.m.clone());
        v.insert(name.clone(), st.v.clone());
        steps.insert(name.clone(), st.steps);
    }
    (m, v, steps)
}

impl Checkpoint {
    pub fn registry_hash(&self) -> String {
        self.registry.hash()
    }

    /// Refuses a checkpoint whose registry differs from `registry`.
    pub fn verify_registry(&self, registry: &DatasetRegistry) -> Result<()> {
        let (have, want) = (self.registry_hash(), registry.hash());
        if have != want {
            return Err(Error::Checkpoint(format!(
                "registry hash mismatch: checkpoint {have}, current {want}"
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut blob = Vec::new();
        let mut adam_steps = BTreeMap::new();
        push_store(&mut entries, &mut blob, "generator", &self.generator.params);
        if let Some(d) = &self.discriminator {
            push_store(&mut entries, &mut blob, "discriminator", &d.params);
        }
        for (tag, opt) in [("g", &self.opt_g), ("d", &self.opt_d)] {
            if let Some(opt) = opt {
                let (m, v, steps) = moments_stores(opt);
                push_store(&mut entries, &mut blob, &format!("adam.{tag}.m"), &m);
                push_store(&mut entries, &mut blob, &format!("adam.{tag}.v"), &v);
                adam_steps.insert(tag.to_string(), steps);
            }
        }
        let header = Header {
            format: 1,
            epoch: self.epoch,
            net: self.generator.config.clone(),
            registry: self.registry.clone(),
            registry_hash: self.registry_hash(),
            corpus_hash: self.corpus_hash.clone(),
            train_config: self.train_config.clone(),
            has_discriminator: self.discriminator.is_some(),
            adam_g: self.opt_g.as_ref().map(|o| o.config),
            adam_d: self.opt_d.as_ref().map(|o| o.config),
            adam_steps,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.registry.hash() != header.registry_hash {
            return Err(bad("embedded registry does not match its recorded hash"));
        }
        let mut blob = &bytes[16 + hlen..];
        let mut sections: BTreeMap<String, ParamStore> = BTreeMap::new();
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if blob.len() < n * 8 {
                return Err(bad("truncated tensor data"));
            }
            let data = blob[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[n * 8..];
            sections
                .entry(e.section.clone())
                .or_default()
                .insert(e.name.clone(), Tensor::new(e.shape.clone(), data));
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }

        let mut generator = GeneratorState::new(header.net.clone(), &header.registry, 0)?;
        let gen_params = sections.remove("generator").unwrap_or_default();
        check_same_layout(&generator.params, &gen_params, "generator")?;
        generator.params = gen_params;

        let discriminator = if header.has_discriminator {
            let mut bank = DiscriminatorBank::new(header.net.clone(), generator.coverage, 0)?;
            let params = sections.remove("discriminator").unwrap_or_default();
            check_same_layout(&bank.params, &params, "discriminator")?;
            bank.params = params;
            Some(bank)
        } else {
            None
        };

        let mut restore = |tag: &str, config: Option<AdamConfig>| -> Result<Option<Adam>> {
            let Some(config) = config else { return Ok(None) };
            let m = sections.remove(&format!("adam.{tag}.m")).unwrap_or_default();
            let mut v = sections.remove(&format!("adam.{tag}.v")).unwrap_or_default();
            let steps = header.adam_steps.get(tag).cloned().unwrap_or_default();
            let mut opt = Adam::new(config);
            for (name, mt) in m.iter() {
                let vt = v.remove(name).ok_or_else(|| bad("optimizer moments are incomplete"))?;
                let s = *steps.get(name).ok_or_else(|| bad("optimizer step count missing"))?;
                opt.state.insert(name.clone(), Moments { m: mt.clone(), v: vt, steps: s });
            }
            Ok(Some(opt))
        };
        let opt_g = restore("g", header.adam_g)?;
        let opt_d = restore("d", header.adam_d)?;

        Ok(Checkpoint {
            epoch: header.epoch,
            registry: header.registry,
            corpus_hash: header.corpus_hash,
            train_config: header.train_config,
            generator,
            discriminator,
            opt_g,
            opt_d,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn check_same_layout(want: &ParamStore, got: &ParamStore, what: &str) -> Result<()> {
    let mismatch = want.len() != got.len()
        || want
            .iter()
            .any(|(n, t)| got.get(n).map(|g| g.shape() != t.shape()).unwrap_or(true));
    if mismatch {
        return Err(Error::Checkpoint(format!(
            "{what} parameters do not match the recorded architecture"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{IntensityProfile, ModalityMask};

    fn registry(name: &str) -> DatasetRegistry {
        DatasetRegistry::new(vec![
            (name.into(), ModalityMask::parse_bit_string("111000").unwrap(), IntensityProfile::default()),
            ("b".into(), ModalityMask::parse_bit_string("100110").unwrap(), IntensityProfile::default()),
        ])
        .unwrap()
    }

    fn small() -> NetConfig {
        NetConfig {
            base_channels: 2,
            levels: 2,
            blocks_per_level: 1,
            d_id: 4,
            embed_hidden: 4,
            pfm_hidden: 4,
            disc_channels: 2,
            ..NetConfig::default()
        }
    }

    fn checkpoint() -> Checkpoint {
        let reg = registry("a");
        let generator = GeneratorState::new(small(), &reg, 3).unwrap();
        let discriminator = DiscriminatorBank::new(small(), generator.coverage, 4).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        let name = generator.params.names().next().unwrap().clone();
        let shape = generator.params.get(&name).unwrap().shape().to_vec();
        grads.insert(name, Tensor::full(&shape, 0.1 + 1.0 / 3.0));
        let mut params = generator.params.clone();
        opt.step(&mut params, &grads, 1e-3).unwrap();
        Checkpoint {
            epoch: 3,
            registry: reg,
            corpus_hash: Some("abc".into()),
            train_config: serde_json::json!({"epochs": 5}),
            generator: GeneratorState { params, ..generator },
            discriminator: Some(discriminator),
            opt_g: Some(opt),
            opt_d: Some(Adam::new(AdamConfig::default())),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }

    #[test]
    fn registry_mismatch_is_refused() {
        let ck = checkpoint();
        ck.verify_registry(&registry("a")).unwrap();
        assert!(matches!(ck.verify_registry(&registry("z")), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = checkpoint().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(Checkpoint::from_bytes(b"garbage!garbage!").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn no_modulation_means_no_modulation_keys() {
        let reg = registry("a");
        let cfg = NetConfig {
            pfm_enabled: false,
            ..small()
        };
        let ck = Checkpoint {
            epoch: 0,
            registry: reg.clone(),
            corpus_hash: None,
            train_config: serde_json::Value::Null,
            generator: GeneratorState::new(cfg, &reg, 1).unwrap(),
            discriminator: None,
            opt_g: None,
            opt_d: None,
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert!(back.generator.params.names().all(|n| !n.contains("pfm")));
        assert_eq!(back, ck);
    }
}
