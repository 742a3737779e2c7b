//! Modality vocabulary, dataset registry and the per-slice sample container.
//!
//! Every mask, network stream and file layout in the crate indexes against
//! the fixed ordering `T1, T2, T1C, FLAIR, DWI, ADC`.

mod disk;
mod registry;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use disk::{read_slice, slice_dir, write_slice, Corpus, CorpusEntry, SliceMeta, Split};
pub use registry::{DatasetDescriptor, DatasetRegistry, IntensityProfile};

pub const NUM_MODALITIES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    T1,
    T2,
    T1C,
    Flair,
    Dwi,
    Adc,
}

impl Modality {
    pub const ALL: [Modality; NUM_MODALITIES] = [
        Modality::T1,
        Modality::T2,
        Modality::T1C,
        Modality::Flair,
        Modality::Dwi,
        Modality::Adc,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Modality> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::T1C => "T1C",
            Modality::Flair => "FLAIR",
            Modality::Dwi => "DWI",
            Modality::Adc => "ADC",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::UnknownModality(s.to_string()))
    }
}

impl Serialize for Modality {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Modality {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Six binary flags over the fixed modality ordering.
///
/// Serialized as a six-character bit string such as `"110100"` (T1 first).
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub const EMPTY: ModalityMask = ModalityMask(0);
    pub const FULL: ModalityMask = ModalityMask(0b11_1111);

    pub fn from_bits(bits: [u8; NUM_MODALITIES]) -> Result<Self> {
        let mut mask = 0u8;
        for (i, &b) in bits.iter().enumerate() {
            match b {
                0 => {}
                1 => mask |= 1 << i,
                other => {
                    return Err(Error::Validation(format!(
                        "mask flag {i} is {other}, expected 0 or 1"
                    )))
                }
            }
        }
        Ok(ModalityMask(mask))
    }

    pub fn bits(self) -> [u8; NUM_MODALITIES] {
        std::array::from_fn(|i| (self.0 >> i) & 1)
    }

    pub fn from_raw(raw: u8) -> Option<Self> {
        (raw <= Self::FULL.0).then_some(ModalityMask(raw))
    }

    pub fn raw(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_set(self, index: usize) -> bool {
        self.0 & (1 << index) != 0
    }

    pub fn with(self, m: Modality) -> Self {
        ModalityMask(self.0 | (1 << m.index()))
    }

    pub fn without(self, m: Modality) -> Self {
        ModalityMask(self.0 & !(1 << m.index()))
    }

    pub fn count(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: Self) -> Self {
        ModalityMask(self.0 | other.0)
    }

    pub fn intersect(self, other: Self) -> Self {
        ModalityMask(self.0 & other.0)
    }

    /// Bits set in `self` but not in `other`.
    pub fn minus(self, other: Self) -> Self {
        ModalityMask(self.0 & !other.0)
    }

    /// `self_i <= other_i` for every flag.
    pub fn is_subset_of(self, other: Self) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn to_bit_string(self) -> String {
        self.bits().iter().map(|b| if *b == 1 { '1' } else { '0' }).collect()
    }

    pub fn parse_bit_string(s: &str) -> Result<Self> {
        if s.len() != NUM_MODALITIES {
            return Err(Error::Validation(format!(
                "mask `{s}` must have exactly {NUM_MODALITIES} flags"
            )));
        }
        let mut bits = [0u8; NUM_MODALITIES];
        for (i, c) in s.chars().enumerate() {
            bits[i] = match c {
                '0' => 0,
                '1' => 1,
                _ => {
                    return Err(Error::Validation(format!(
                        "mask `{s}` contains non-binary flag `{c}`"
                    )))
                }
            };
        }
        Self::from_bits(bits)
    }

    /// Human-readable `T1+T2` style listing.
    pub fn names(self) -> String {
        let names: Vec<_> = self.modalities().map(Modality::name).collect();
        names.join("+")
    }
}

impl fmt::Debug for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModalityMask({})", self.to_bit_string())
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

impl FromIterator<Modality> for ModalityMask {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(ModalityMask::EMPTY, ModalityMask::with)
    }
}

impl Serialize for ModalityMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_bit_string())
    }
}

impl<'de> Deserialize<'de> for ModalityMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ModalityMask::parse_bit_string(&s).map_err(serde::de::Error::custom)
    }
}

/// Builds a mask from canonical modality names.
pub fn make_mask<S: AsRef<str>>(names: &[S]) -> Result<ModalityMask> {
    let mut mask = ModalityMask::EMPTY;
    for name in names {
        let m: Modality = name.as_ref().parse()?;
        if mask.contains(m) {
            return Err(Error::Validation(format!("duplicate modality `{m}`")));
        }
        mask = mask.with(m);
    }
    Ok(mask)
}

/// Bitwise OR of every dataset's coverage.
pub fn union_coverage(registry: &DatasetRegistry) -> Result<ModalityMask> {
    if registry.is_empty() {
        return Err(Error::Config("registry has no datasets".into()));
    }
    Ok(registry
        .datasets()
        .iter()
        .fold(ModalityMask::EMPTY, |acc, d| acc.union(d.coverage)))
}

/// One case-slice: six channels (zero where missing), availability and origin.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    /// `[6, H, W]`, intensities in `[0, 1]`.
    pub images: Tensor,
    pub availability: ModalityMask,
    pub dataset_id: usize,
    pub case_id: String,
    pub slice_index: u32,
}

impl MultiModalSample {
    pub fn height(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channel(&self, m: Modality) -> &[f64] {
        let plane = self.height() * self.width();
        &self.images.data()[m.index() * plane..(m.index() + 1) * plane]
    }

    /// Stable `dataset/case/slice` identifier.
    pub fn key(&self) -> String {
        format!("{}/{}/{}", self.dataset_id, self.case_id, self.slice_index)
    }
}

/// Checks every sample invariant and names each violation.
pub fn check_sample(sample: &MultiModalSample, registry: &DatasetRegistry) -> Vec<String> {
    let mut violations = Vec::new();
    let shape = sample.images.shape();
    if shape.len() != 3 || shape[0] != NUM_MODALITIES {
        violations.push(format!("image stack has shape {shape:?}, expected [6, H, W]"));
        return violations;
    }
    match registry.get(sample.dataset_id) {
        None => violations.push(format!("unknown dataset {}", sample.dataset_id)),
        Some(d) if !sample.availability.is_subset_of(d.coverage) => violations.push(format!(
            "availability {} not covered by dataset `{}` coverage {}",
            sample.availability, d.name, d.coverage
        )),
        Some(_) => {}
    }
    for m in Modality::ALL {
        let channel = sample.channel(m);
        let i = m.index();
        if channel.iter().any(|v| !(0.0..=1.0).contains(v)) {
            violations.push(format!("intensity out of [0, 1] in channel {i}"));
        }
        let all_zero = channel.iter().all(|&v| v == 0.0);
        if !sample.availability.contains(m) && !all_zero {
            violations.push(format!("nonzero masked channel {i}"));
        }
        if sample.availability.contains(m) && all_zero {
            violations.push(format!("available channel {i} is all-zero"));
        }
    }
    violations
}

pub fn validate_sample(
    sample: MultiModalSample,
    registry: &DatasetRegistry,
) -> Result<MultiModalSample> {
    let violations = check_sample(&sample, registry);
    if violations.is_empty() {
        Ok(sample)
    } else {
        Err(Error::InvalidSample(violations))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry4() -> DatasetRegistry {
        DatasetRegistry::from_toml_str(
            r#"
            [[datasets]]
            name = "TTG"
            coverage = ["T1", "T2", "T1C", "FLAIR", "DWI", "ADC"]
            [[datasets]]
            name = "TTI"
            coverage = ["T1", "T2", "FLAIR", "ADC"]
            [[datasets]]
            name = "BraTS"
            coverage = ["T1", "T2", "T1C", "FLAIR"]
            [[datasets]]
            name = "ISLES"
            coverage = ["FLAIR", "DWI", "ADC"]
            "#,
        )
        .unwrap()
    }

    fn sample(availability: ModalityMask, dataset_id: usize) -> MultiModalSample {
        let (h, w) = (4, 4);
        let mut images = Tensor::zeros(&[6, h, w]);
        for m in availability.modalities() {
            let plane = h * w;
            images.data_mut()[m.index() * plane..(m.index() + 1) * plane].fill(0.5);
        }
        MultiModalSample {
            images,
            availability,
            dataset_id,
            case_id: "case000".into(),
            slice_index: 0,
        }
    }

    #[test]
    fn mask_from_names() {
        assert_eq!(make_mask(&["T1", "T2"]).unwrap().bits(), [1, 1, 0, 0, 0, 0]);
        assert_eq!(make_mask::<&str>(&[]).unwrap().bits(), [0; 6]);
        assert_eq!(
            make_mask(&["ADC", "FLAIR", "DWI"]).unwrap().bits(),
            [0, 0, 0, 1, 1, 1]
        );
        assert!(matches!(make_mask(&["T3"]), Err(Error::UnknownModality(_))));
        assert!(matches!(make_mask(&["T1", "T1"]), Err(Error::Validation(_))));
    }

    #[test]
    fn modality_vocabulary_is_a_bijection() {
        for (i, m) in Modality::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(Modality::from_index(i), Some(*m));
            assert_eq!(m.name().parse::<Modality>().unwrap(), *m);
        }
        assert_eq!(Modality::from_index(6), None);
    }

    #[test]
    fn bit_strings() {
        let m = ModalityMask::parse_bit_string("110101").unwrap();
        assert_eq!(m.to_bit_string(), "110101");
        assert_eq!(m.count(), 4);
        assert!(ModalityMask::parse_bit_string("1101").is_err());
        assert!(ModalityMask::parse_bit_string("110201").is_err());
        assert!(ModalityMask::from_bits([1, 0, 2, 0, 0, 0]).is_err());
    }

    #[test]
    fn union_of_coverages() {
        let reg = DatasetRegistry::from_toml_str(
            r#"
            [[datasets]]
            name = "a"
            coverage = ["T1", "T2", "T1C", "FLAIR"]
            [[datasets]]
            name = "b"
            coverage = ["T1", "T2", "FLAIR", "ADC"]
            "#,
        )
        .unwrap();
        assert_eq!(union_coverage(&reg).unwrap().bits(), [1, 1, 1, 1, 0, 1]);
        assert_eq!(union_coverage(&registry4()).unwrap(), ModalityMask::FULL);
        assert!(matches!(
            union_coverage(&DatasetRegistry::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sample_validation() {
        let reg = registry4();
        let ok = sample(make_mask(&["T1", "T2"]).unwrap(), 0);
        assert!(validate_sample(ok, &reg).is_ok());

        let mut bad = sample(make_mask(&["T1"]).unwrap(), 0);
        bad.images.data_mut()[3 * 16 + 5] = 0.5;
        let err = validate_sample(bad, &reg).unwrap_err();
        assert!(err.to_string().contains("nonzero masked channel 3"), "{err}");

        let unknown = sample(make_mask(&["T1"]).unwrap(), 7);
        let err = validate_sample(unknown, &reg).unwrap_err();
        assert!(err.to_string().contains("unknown dataset"), "{err}");

        let uncovered = sample(make_mask(&["T1", "DWI"]).unwrap(), 3);
        let v = check_sample(&uncovered, &reg);
        assert!(v.iter().any(|s| s.contains("not covered")), "{v:?}");

        let mut bright = sample(make_mask(&["T1"]).unwrap(), 0);
        bright.images.data_mut()[0] = 1.5;
        assert!(check_sample(&bright, &reg)
            .iter()
            .any(|s| s.contains("out of [0, 1]")));
    }
}
