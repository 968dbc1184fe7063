//! Disease nodes and per-disease clinical states.

use std::fmt;

pub const N_NODES: usize = 18;
/// Leading diseases scored by the classification metrics.
pub const N_CORE: usize = 14;
pub const N_STATES: usize = 4;

/// Canonical node order: 14 core findings, then 4 anatomical attributes.
pub const DISEASES: [&str; N_NODES] = [
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Opacity",
    "Lung Lesion",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
    "Aorta",
    "Bone",
    "Hemidiaphragm",
    "Lung Volume",
];

pub fn disease_index(name: &str) -> Option<usize> {
    DISEASES.iter().position(|d| *d == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClinicalState {
    Pos = 0,
    Neg = 1,
    Bla = 2,
    Unc = 3,
}

impl ClinicalState {
    pub const ALL: [ClinicalState; N_STATES] =
        [ClinicalState::Pos, ClinicalState::Neg, ClinicalState::Bla, ClinicalState::Unc];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            ClinicalState::Pos => "[POS]",
            ClinicalState::Neg => "[NEG]",
            ClinicalState::Bla => "[BLA]",
            ClinicalState::Unc => "[UNC]",
        }
    }

    /// Binary ground truth: POS is 1, NEG/BLA are 0, UNC follows `unc_positive`.
    pub fn binary(self, unc_positive: bool) -> u8 {
        match self {
            ClinicalState::Pos => 1,
            ClinicalState::Unc if unc_positive => 1,
            _ => 0,
        }
    }
}

impl fmt::Display for ClinicalState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl std::str::FromStr for ClinicalState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|st| st.token().eq_ignore_ascii_case(s) || st.token().trim_matches(['[', ']']).eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown clinical state `{s}`"))
    }
}
