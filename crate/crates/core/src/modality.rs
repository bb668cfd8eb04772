//! Sensor modalities and non-empty modality subsets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{AnysegError, Result};

/// One sensor stream. Declaration order is the canonical order used for
/// subset labels (`FEL`, `RDEL`, ...) and for deterministic summation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    /// Frame camera; rendered like RGB.
    #[serde(rename = "F")]
    Frame,
    #[serde(rename = "R")]
    Rgb,
    #[serde(rename = "D")]
    Depth,
    #[serde(rename = "E")]
    Event,
    #[serde(rename = "L")]
    Lidar,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Frame,
        Modality::Rgb,
        Modality::Depth,
        Modality::Event,
        Modality::Lidar,
    ];

    pub fn letter(self) -> char {
        match self {
            Modality::Frame => 'F',
            Modality::Rgb => 'R',
            Modality::Depth => 'D',
            Modality::Event => 'E',
            Modality::Lidar => 'L',
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    /// Parses a list such as `"RDEL"` or `"F,E,L"`.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let mut out: Vec<Modality> = Vec::new();
        for c in s.chars().filter(|c| !c.is_whitespace() && *c != ',') {
            let m: Modality = c.to_string().parse()?;
            if out.contains(&m) {
                return Err(AnysegError::Config(format!("modality {m} listed twice in `{s}`")));
            }
            out.push(m);
        }
        out.sort();
        Ok(out)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for Modality {
    type Err = AnysegError;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| s.len() == 1 && s.starts_with(m.letter()))
            .ok_or_else(|| AnysegError::Config(format!("unknown modality `{s}`")))
    }
}

/// A non-empty set of modalities. Serialized as its label, e.g. `"RDE"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalityMask(u8);

impl ModalityMask {
    pub fn new(modalities: impl IntoIterator<Item = Modality>) -> Result<Self> {
        let bits = modalities.into_iter().fold(0u8, |b, m| b | m.bit());
        if bits == 0 {
            Err(AnysegError::EmptyModalitySet)
        } else {
            Ok(Self(bits))
        }
    }

    /// Selects the entries of `modalities` whose position bit is set in
    /// `selector`.
    pub fn from_selector(modalities: &[Modality], selector: usize) -> Result<Self> {
        Self::new(
            modalities
                .iter()
                .enumerate()
                .filter(|(i, _)| selector >> i & 1 == 1)
                .map(|(_, &m)| m),
        )
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        false
    }

    /// Members in canonical order.
    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    pub fn is_subset_of(self, modalities: &[Modality]) -> bool {
        self.iter().all(|m| modalities.contains(&m))
    }

    /// Unordered pairs of members, each in canonical order.
    pub fn pairs(self) -> Vec<(Modality, Modality)> {
        let members: Vec<Modality> = self.iter().collect();
        let mut out = Vec::new();
        for (i, &a) in members.iter().enumerate() {
            for &b in &members[i + 1..] {
                out.push((a, b));
            }
        }
        out
    }

    pub fn label(self) -> String {
        self.iter().map(Modality::letter).collect()
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl From<ModalityMask> for String {
    fn from(m: ModalityMask) -> Self {
        m.label()
    }
}

impl TryFrom<String> for ModalityMask {
    type Error = AnysegError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for ModalityMask {
    type Err = AnysegError;

    fn from_str(s: &str) -> Result<Self> {
        ModalityMask::new(Modality::parse_list(s)?)
    }
}

/// All `2^M - 1` non-empty subsets, ordered by size and then
/// lexicographically in canonical order (`F, E, L, FE, FL, EL, FEL`).
pub fn all_subsets(modalities: &[Modality]) -> Vec<ModalityMask> {
    let mut sorted = modalities.to_vec();
    sorted.sort();
    sorted.dedup();
    let m = sorted.len();
    let mut out = Vec::with_capacity((1 << m) - 1);
    for size in 1..=m {
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            out.push(ModalityMask::new(combo.iter().map(|&i| sorted[i])).expect("non-empty"));
            // advance to the next combination in lexicographic order
            let Some(pos) = (0..size).rev().find(|&i| combo[i] < m - size + i) else {
                break;
            };
            combo[pos] += 1;
            for j in pos + 1..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_modality_subset_order() {
        let mods = Modality::parse_list("FEL").unwrap();
        let labels: Vec<String> = all_subsets(&mods).iter().map(|m| m.label()).collect();
        assert_eq!(labels, ["F", "E", "L", "FE", "FL", "EL", "FEL"]);
    }

    #[test]
    fn subset_counts() {
        for m in 1..=5 {
            let subsets = all_subsets(&Modality::ALL[..m]);
            assert_eq!(subsets.len(), (1 << m) - 1);
            let mut dedup = subsets.clone();
            dedup.sort();
            dedup.dedup();
            assert_eq!(dedup.len(), subsets.len());
        }
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(matches!(ModalityMask::new([]), Err(AnysegError::EmptyModalitySet)));
        assert!(ModalityMask::from_selector(&[Modality::Rgb], 0).is_err());
    }

    #[test]
    fn parse_and_pairs() {
        let mask: ModalityMask = "L,R,D".parse().unwrap();
        assert_eq!(mask.label(), "RDL");
        assert_eq!(
            mask.pairs(),
            vec![
                (Modality::Rgb, Modality::Depth),
                (Modality::Rgb, Modality::Lidar),
                (Modality::Depth, Modality::Lidar)
            ]
        );
        assert!("RR".parse::<ModalityMask>().is_err());
        assert!("X".parse::<ModalityMask>().is_err());
    }
}
