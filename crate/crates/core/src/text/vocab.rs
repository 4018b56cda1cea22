//! Descriptive vocabulary per organ, shipped as `data/vocabulary.csv`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::organ::Organ;

const BUILTIN: &str = include_str!("../../data/vocabulary.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Texture,
    Margin,
    Attenuation,
    Pathology,
}

/// Visual effect a descriptor has on the rendered lesion. Phantom
/// generation and failure description share these classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Appearance {
    Hypodense,
    Hyperdense,
    Cystic,
    Heterogeneous,
    Homogeneous,
    IllDefined,
    WellDefined,
}

impl Appearance {
    pub const ALL: [Appearance; 7] = [
        Appearance::Hypodense,
        Appearance::Hyperdense,
        Appearance::Cystic,
        Appearance::Heterogeneous,
        Appearance::Homogeneous,
        Appearance::IllDefined,
        Appearance::WellDefined,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Appearance::Hypodense => "hypodense",
            Appearance::Hyperdense => "hyperdense",
            Appearance::Cystic => "cystic",
            Appearance::Heterogeneous => "heterogeneous",
            Appearance::Homogeneous => "homogeneous",
            Appearance::IllDefined => "ill_defined",
            Appearance::WellDefined => "well_defined",
        }
    }

    /// Pairs that cannot describe the same lesion.
    pub fn conflicts_with(self, other: Appearance) -> bool {
        use Appearance::*;
        let pair = |a, b| (self == a && other == b) || (self == b && other == a);
        pair(Hypodense, Hyperdense)
            || pair(Cystic, Hyperdense)
            || pair(Cystic, Heterogeneous)
            || pair(Cystic, IllDefined)
            || pair(Heterogeneous, Homogeneous)
            || pair(IllDefined, WellDefined)
    }
}

impl fmt::Display for Appearance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Appearance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Appearance::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Format(format!("unknown appearance `{s}`")))
    }
}

impl FromStr for Category {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "texture" => Ok(Category::Texture),
            "margin" => Ok(Category::Margin),
            "attenuation" => Ok(Category::Attenuation),
            "pathology" => Ok(Category::Pathology),
            other => Err(Error::Format(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Term {
    pub phrase: String,
    pub category: Category,
    pub appearance: Appearance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    by_organ: BTreeMap<Organ, Vec<Term>>,
}

impl Vocabulary {
    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: std::sync::OnceLock<Vocabulary> = std::sync::OnceLock::new();
        VOCAB.get_or_init(|| Vocabulary::parse(BUILTIN).expect("builtin vocabulary is valid"))
    }

    /// Parses `organ,phrase,category,appearance` rows; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Vocabulary> {
        let mut by_organ: BTreeMap<Organ, Vec<Term>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let [organ, phrase, category, appearance] = cols[..] else {
                return Err(Error::Format(format!("vocabulary line {}: expected 4 columns", n + 1)));
            };
            let organ: Organ = organ.parse()?;
            let phrase = phrase.to_ascii_lowercase();
            if phrase.is_empty() {
                return Err(Error::Format(format!("vocabulary line {}: empty phrase", n + 1)));
            }
            let terms = by_organ.entry(organ).or_default();
            if terms.iter().any(|t| t.phrase == phrase) {
                return Err(Error::Format(format!("duplicate phrase `{phrase}` for {organ}")));
            }
            terms.push(Term {
                phrase,
                category: category.parse()?,
                appearance: appearance.parse()?,
            });
        }
        if by_organ.is_empty() {
            return Err(Error::Format("vocabulary is empty".into()));
        }
        Ok(Vocabulary { by_organ })
    }

    pub fn terms(&self, organ: Organ) -> &[Term] {
        self.by_organ.get(&organ).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn lookup(&self, organ: Organ, phrase: &str) -> Option<&Term> {
        self.terms(organ).iter().find(|t| t.phrase == phrase)
    }

    /// First listed phrase carrying `appearance` for the organ.
    pub fn preferred(&self, organ: Organ, appearance: Appearance) -> Option<&Term> {
        self.terms(organ).iter().find(|t| t.appearance == appearance)
    }

    pub fn organs(&self) -> impl Iterator<Item = Organ> + '_ {
        self.by_organ.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Organ, &Term)> + '_ {
        self.by_organ
            .iter()
            .flat_map(|(o, ts)| ts.iter().map(move |t| (*o, t)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_every_organ() {
        let v = Vocabulary::builtin();
        for organ in Organ::ALL {
            assert!(!v.terms(organ).is_empty());
            for a in [Appearance::Hypodense, Appearance::Hyperdense, Appearance::Cystic, Appearance::Heterogeneous, Appearance::IllDefined] {
                assert!(v.preferred(organ, a).is_some(), "{organ} lacks {a}");
            }
        }
    }

    #[test]
    fn duplicates_rejected() {
        let e = Vocabulary::parse("liver,cyst,pathology,cystic\nliver,cyst,pathology,cystic\n");
        assert!(e.is_err());
    }

    #[test]
    fn conflicts_are_symmetric() {
        for a in Appearance::ALL {
            for b in Appearance::ALL {
                assert_eq!(a.conflicts_with(b), b.conflicts_with(a));
            }
            assert!(!a.conflicts_with(a));
        }
    }
}
