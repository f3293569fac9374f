//! The closed label vocabulary of the NIH chest X-ray metadata.
//!
//! Positions in this table are the positions of the model's output units, so
//! the order is part of the on-disk format (checkpoints, manifests).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Bump when the table below changes.
pub const VOCABULARY_VERSION: u32 = 1;

pub const NUM_LABELS: usize = 15;

pub const LABEL_NAMES: [&str; NUM_LABELS] = [
    "Atelectasis",
    "Cardiomegaly",
    "Consolidation",
    "Edema",
    "Effusion",
    "Emphysema",
    "Fibrosis",
    "Hernia",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pleural_Thickening",
    "Pneumonia",
    "Pneumothorax",
    "No Finding",
];

/// One vocabulary label, stored as its output index.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(u8);

impl Label {
    pub const NO_FINDING: Label = Label(14);

    pub fn from_index(index: usize) -> Option<Label> {
        (index < NUM_LABELS).then_some(Label(index as u8))
    }

    /// Case-sensitive lookup after trimming surrounding whitespace.
    pub fn parse(token: &str) -> Option<Label> {
        let token = token.trim();
        LABEL_NAMES
            .iter()
            .position(|name| *name == token)
            .map(|i| Label(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn name(self) -> &'static str {
        LABEL_NAMES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = Label> {
        (0..NUM_LABELS as u8).map(Label)
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Label({})", self.name())
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown finding label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for Label {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Label::parse(s).ok_or_else(|| UnknownLabel(s.trim().to_string()))
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A set of labels, iterated in vocabulary order.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct LabelSet(u16);

impl LabelSet {
    pub fn empty() -> LabelSet {
        LabelSet(0)
    }

    pub fn single(label: Label) -> LabelSet {
        LabelSet(1 << label.0)
    }

    pub fn insert(&mut self, label: Label) {
        self.0 |= 1 << label.0;
    }

    pub fn contains(self, label: Label) -> bool {
        self.0 & (1 << label.0) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Label> {
        Label::all().filter(move |l| self.contains(*l))
    }

    /// Parses a `|`-separated "Finding Labels" field.
    pub fn parse_field(field: &str) -> Result<LabelSet, UnknownLabel> {
        let mut set = LabelSet::empty();
        for token in field.split('|') {
            set.insert(token.parse()?);
        }
        Ok(set)
    }

    /// Renders in vocabulary order, `|`-separated.
    pub fn to_field(self) -> String {
        self.iter().map(Label::name).collect::<Vec<_>>().join("|")
    }
}

impl FromIterator<Label> for LabelSet {
    fn from_iter<I: IntoIterator<Item = Label>>(iter: I) -> Self {
        let mut set = LabelSet::empty();
        for l in iter {
            set.insert(l);
        }
        set
    }
}

impl fmt::Debug for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter().map(Label::name)).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn vocabulary_is_fifteen_distinct_labels() {
        let distinct: HashSet<_> = LABEL_NAMES.iter().collect();
        assert_eq!(distinct.len(), NUM_LABELS);
        assert_eq!(Label::parse("No Finding"), Some(Label::NO_FINDING));
        for l in Label::all() {
            assert_eq!(Label::parse(l.name()), Some(l));
        }
    }

    #[test]
    fn parsing_is_trimmed_and_case_sensitive() {
        assert_eq!(Label::parse("  Mass "), Label::from_index(9));
        assert_eq!(Label::parse("mass"), None);
        assert_eq!(Label::parse("Covid"), None);
    }

    #[test]
    fn label_field_round_trip() {
        let set = LabelSet::parse_field("Pneumothorax|Infiltration|Mass").unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.to_field(), "Infiltration|Mass|Pneumothorax");
        assert!(LabelSet::parse_field("Mass|Covid").is_err());
    }
}
