use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error};

/// The five defect categories. Logit index 0 is background, so a class
/// with [`DefectClass::index`] `i` owns logit `i + 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DefectClass {
    BrokenEnd,
    BrokenPick,
    Felter,
    OilStains,
    Sundries,
}

impl DefectClass {
    pub const ALL: [DefectClass; 5] = [
        DefectClass::BrokenEnd,
        DefectClass::BrokenPick,
        DefectClass::Felter,
        DefectClass::OilStains,
        DefectClass::Sundries,
    ];

    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DefectClass::BrokenEnd => "brokenend",
            DefectClass::BrokenPick => "brokenpick",
            DefectClass::Felter => "felter",
            DefectClass::OilStains => "oilstains",
            DefectClass::Sundries => "sundries",
        }
    }

    /// Short tag used in label-combination names.
    pub fn abbrev(self) -> &'static str {
        match self {
            DefectClass::BrokenEnd => "be",
            DefectClass::BrokenPick => "bp",
            DefectClass::Felter => "f",
            DefectClass::OilStains => "o",
            DefectClass::Sundries => "s",
        }
    }
}

impl fmt::Display for DefectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DefectClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s || c.abbrev() == s)
            .ok_or_else(|| invalid!("unknown defect class {s:?}"))
    }
}
