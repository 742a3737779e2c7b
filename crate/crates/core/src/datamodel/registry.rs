use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{make_mask, ModalityMask};
use crate::error::{Error, Result};

/// Per-dataset intensity transform applied by the phantom renderer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntensityProfile {
    pub gamma: f64,
    pub gain: f64,
    pub bias: f64,
    pub noise_sigma: f64,
}

impl Default for IntensityProfile {
    fn default() -> Self {
        IntensityProfile {
            gamma: 1.0,
            gain: 1.0,
            bias: 0.0,
            noise_sigma: 0.0,
        }
    }
}

impl IntensityProfile {
    pub fn validate(&self, field: &str) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::field(format!("{field}.gamma"), "must be a finite value > 0"));
        }
        if !self.gain.is_finite() {
            return Err(Error::field(format!("{field}.gain"), "must be finite"));
        }
        if !self.bias.is_finite() {
            return Err(Error::field(format!("{field}.bias"), "must be finite"));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::field(format!("{field}.noise_sigma"), "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub id: usize,
    pub name: String,
    pub coverage: ModalityMask,
    pub profile: IntensityProfile,
}

/// Ordered datasets; identifiers are list positions.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetRegistry {
    datasets: Vec<DatasetDescriptor>,
}

#[derive(Deserialize)]
struct RawDocument {
    datasets: Vec<RawDataset>,
}

#[derive(Deserialize)]
struct RawDataset {
    name: String,
    coverage: Vec<String>,
    #[serde(default)]
    profile: IntensityProfile,
}

impl DatasetRegistry {
    /// Assigns identifiers by listing order and checks every invariant.
    pub fn new(entries: Vec<(String, ModalityMask, IntensityProfile)>) -> Result<Self> {
        let mut datasets = Vec::with_capacity(entries.len());
        for (id, (name, coverage, profile)) in entries.into_iter().enumerate() {
            let field = format!("datasets[{id}]");
            if name.is_empty() || name.contains(['/', '\\']) {
                return Err(Error::field(
                    format!("{field}.name"),
                    "must be a non-empty name without path separators",
                ));
            }
            if datasets.iter().any(|d: &DatasetDescriptor| d.name == name) {
                return Err(Error::field(
                    format!("{field}.name"),
                    format!("duplicate dataset name `{name}`"),
                ));
            }
            if coverage.is_empty() {
                return Err(Error::field(
                    format!("{field}.coverage"),
                    "must list at least one modality",
                ));
            }
            profile.validate(&format!("{field}.profile"))?;
            datasets.push(DatasetDescriptor {
                id,
                name,
                coverage,
                profile,
            });
        }
        Ok(DatasetRegistry { datasets })
    }

    /// Parses the `[[datasets]]` entries of a registry document; other
    /// top-level keys (phantom parameters) are ignored here.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::parse(text, Path::new("<registry>"))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let raw: RawDocument = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut entries = Vec::with_capacity(raw.datasets.len());
        for (i, d) in raw.datasets.into_iter().enumerate() {
            let coverage = make_mask(&d.coverage)
                .map_err(|e| Error::field(format!("datasets[{i}].coverage"), e.to_string()))?;
            entries.push((d.name, coverage, d.profile));
        }
        Self::new(entries)
    }

    pub fn datasets(&self) -> &[DatasetDescriptor] {
        &self.datasets
    }

    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&DatasetDescriptor> {
        self.datasets.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&DatasetDescriptor> {
        self.datasets.iter().find(|d| d.name == name)
    }

    /// SHA-256 over the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("registry serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// `name -> identifier` pairs in identifier order.
    pub fn id_map(&self) -> Vec<(String, usize)> {
        self.datasets.iter().map(|d| (d.name.clone(), d.id)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers_follow_listing_order() {
        let reg = DatasetRegistry::from_toml_str(
            r#"
            global_seed = 3
            [[datasets]]
            name = "b"
            coverage = ["T1", "T2"]
            case_count = 4
            [[datasets]]
            name = "a"
            coverage = ["FLAIR"]
            profile = { gamma = 1.5, gain = 0.8, bias = 0.05 }
            "#,
        )
        .unwrap();
        assert_eq!(reg.id_map(), vec![("b".into(), 0), ("a".into(), 1)]);
        assert_eq!(reg.get(1).unwrap().profile.gamma, 1.5);
        assert_eq!(reg.get(0).unwrap().profile, IntensityProfile::default());
    }

    #[test]
    fn errors_name_the_field() {
        let err = DatasetRegistry::from_toml_str(
            r#"
            [[datasets]]
            name = "a"
            coverage = []
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("datasets[0].coverage"), "{err}");

        let err = DatasetRegistry::from_toml_str(
            r#"
            [[datasets]]
            name = "a"
            coverage = ["T1"]
            profile = { gamma = -1.0, gain = 1.0, bias = 0.0 }
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("datasets[0].profile.gamma"), "{err}");

        let err = DatasetRegistry::from_toml_str(
            r#"
            [[datasets]]
            name = "a"
            coverage = ["T9"]
            "#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("T9"), "{err}");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let text = r#"
            [[datasets]]
            name = "a"
            coverage = ["T1"]
        "#;
        let a = DatasetRegistry::from_toml_str(text).unwrap();
        let b = DatasetRegistry::from_toml_str(text).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = DatasetRegistry::from_toml_str(&text.replace("\"a\"", "\"c\"")).unwrap();
        assert_ne!(a.hash(), c.hash());
    }
}
