//! Cell classes of the merged Bethesda taxonomy and the slide-label rule.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const TAXONOMY_VERSION: &str = "tbs-merged-5class-v1";
pub const NUM_CLASSES: usize = 5;

/// Ordinal cell class. SCC, HSIL and ASC-H share one class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CellClass {
    Nilm = 0,
    AscUs = 1,
    Lsil = 2,
    AscHHsil = 3,
    Agc = 4,
}

impl CellClass {
    pub const ALL: [CellClass; NUM_CLASSES] = [
        CellClass::Nilm,
        CellClass::AscUs,
        CellClass::Lsil,
        CellClass::AscHHsil,
        CellClass::Agc,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::InvalidClass(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            CellClass::Nilm => "NILM",
            CellClass::AscUs => "ASC-US",
            CellClass::Lsil => "LSIL",
            CellClass::AscHHsil => "ASC-H/HSIL",
            CellClass::Agc => "AGC",
        }
    }

    pub fn is_positive(self) -> bool {
        self != CellClass::Nilm
    }
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for CellClass {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for CellClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        merge_taxonomy(&s).map_err(serde::de::Error::custom)
    }
}

/// Maps a raw Bethesda label onto the merged five-class taxonomy.
///
/// Also accepts the merged name `ASC-H/HSIL` so manifests round-trip.
pub fn merge_taxonomy(raw_label: &str) -> Result<CellClass> {
    match raw_label.trim() {
        "NILM" => Ok(CellClass::Nilm),
        "ASC-US" => Ok(CellClass::AscUs),
        "LSIL" => Ok(CellClass::Lsil),
        "ASC-H" | "HSIL" | "SCC" | "ASC-H/HSIL" => Ok(CellClass::AscHHsil),
        "AGC" => Ok(CellClass::Agc),
        _ => Err(Error::UnknownLabel(raw_label.to_string())),
    }
}

/// Severity ordering used when pooling cell labels into a slide label.
///
/// The default ranks classes by id, which puts AGC above the squamous
/// lesions. `agc_below_high_grade` swaps AGC under ASC-H/HSIL instead.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Severity {
    #[serde(default)]
    pub agc_below_high_grade: bool,
}

impl Severity {
    pub fn rank(self, c: CellClass) -> usize {
        match (self.agc_below_high_grade, c) {
            (true, CellClass::Agc) => 3,
            (true, CellClass::AscHHsil) => 4,
            _ => c.id(),
        }
    }

    /// Max-pooling of cell labels; `None` for an empty input.
    pub fn max_of(self, labels: impl IntoIterator<Item = CellClass>) -> Option<CellClass> {
        labels.into_iter().max_by_key(|&c| self.rank(c))
    }
}

/// Slide label as the most severe cell label.
pub fn bag_label_from_cells(cell_labels: &[CellClass]) -> Result<CellClass> {
    Severity::default()
        .max_of(cell_labels.iter().copied())
        .ok_or(Error::Empty("cell label list"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn raw_labels_merge() {
        assert_eq!(merge_taxonomy("NILM").unwrap().id(), 0);
        for raw in ["SCC", "HSIL", "ASC-H"] {
            assert_eq!(merge_taxonomy(raw).unwrap().id(), 3);
        }
        assert_eq!(merge_taxonomy("AGC").unwrap().id(), 4);
        assert_eq!(merge_taxonomy("ASC-US").unwrap().id(), 1);
        assert_eq!(merge_taxonomy("LSIL").unwrap().id(), 2);
    }

    #[test]
    fn unknown_label_names_the_string() {
        let err = merge_taxonomy("CIN2").unwrap_err();
        assert!(err.to_string().contains("CIN2"));
    }

    #[test]
    fn merge_is_surjective_and_collapses_exactly_three() {
        let raws = ["NILM", "ASC-US", "LSIL", "ASC-H", "HSIL", "SCC", "AGC"];
        let mapped: Vec<usize> = raws.iter().map(|r| merge_taxonomy(r).unwrap().id()).collect();
        for id in 0..NUM_CLASSES {
            assert!(mapped.contains(&id));
        }
        let collapsed: Vec<&str> = raws
            .iter()
            .zip(&mapped)
            .filter(|(_, &m)| m == 3)
            .map(|(r, _)| *r)
            .collect();
        assert_eq!(collapsed, ["ASC-H", "HSIL", "SCC"]);
    }

    #[test]
    fn bag_label_examples() {
        use CellClass::*;
        assert_eq!(bag_label_from_cells(&[Nilm, Nilm, Nilm]).unwrap(), Nilm);
        assert_eq!(bag_label_from_cells(&[Nilm, Lsil, AscUs]).unwrap(), Lsil);
        assert_eq!(bag_label_from_cells(&[AscUs, AscHHsil, Nilm, AscHHsil]).unwrap(), AscHHsil);
        assert!(matches!(bag_label_from_cells(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn alternative_severity_puts_high_grade_on_top() {
        let sev = Severity {
            agc_below_high_grade: true,
        };
        assert_eq!(sev.max_of([CellClass::Agc, CellClass::AscHHsil]), Some(CellClass::AscHHsil));
        assert_eq!(Severity::default().max_of([CellClass::Agc, CellClass::AscHHsil]), Some(CellClass::Agc));
    }

    #[test]
    fn serde_uses_names() {
        let s = serde_json::to_string(&CellClass::AscHHsil).unwrap();
        assert_eq!(s, "\"ASC-H/HSIL\"");
        let c: CellClass = serde_json::from_str("\"SCC\"").unwrap();
        assert_eq!(c, CellClass::AscHHsil);
    }

    proptest! {
        #[test]
        fn bag_label_is_order_free(ids in proptest::collection::vec(0usize..5, 1..40), seed in any::<u64>()) {
            let labels: Vec<CellClass> = ids.iter().map(|&i| CellClass::from_id(i).unwrap()).collect();
            let mut shuffled = labels.clone();
            // deterministic Fisher-Yates driven by the seed
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(bag_label_from_cells(&labels).unwrap(), bag_label_from_cells(&shuffled).unwrap());
        }
    }
}
