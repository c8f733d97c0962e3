//! The three knowledge scales.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Category feature (text), part-relation graph, and wide external graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Scale {
    #[serde(rename = "KI-S")]
    Small,
    #[serde(rename = "KI-M")]
    Medium,
    #[serde(rename = "KI-L")]
    Large,
}

impl Scale {
    pub const ALL: [Scale; 3] = [Scale::Small, Scale::Medium, Scale::Large];

    pub fn tag(self) -> &'static str {
        match self {
            Scale::Small => "KI-S",
            Scale::Medium => "KI-M",
            Scale::Large => "KI-L",
        }
    }

    /// Single-letter form used on the command line (`s`, `m`, `l`).
    pub fn letter(self) -> char {
        match self {
            Scale::Small => 's',
            Scale::Medium => 'm',
            Scale::Large => 'l',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "s" | "ki-s" | "small" => Ok(Scale::Small),
            "m" | "ki-m" | "medium" => Ok(Scale::Medium),
            "l" | "ki-l" | "large" => Ok(Scale::Large),
            other => Err(format!("unknown scale {other:?} (expected s, m or l)")),
        }
    }
}

/// Set of enabled scales. The empty mask is the no-injection baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ScaleMask(u8);

impl ScaleMask {
    pub const NONE: ScaleMask = ScaleMask(0);
    pub const ALL: ScaleMask = ScaleMask(0b111);

    pub fn only(scale: Scale) -> Self {
        ScaleMask(1 << scale.index())
    }

    pub fn from_scales(scales: &[Scale]) -> Self {
        ScaleMask(scales.iter().fold(0, |m, s| m | (1 << s.index())))
    }

    pub fn contains(self, scale: Scale) -> bool {
        self.0 & (1 << scale.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn scales(self) -> impl Iterator<Item = Scale> {
        Scale::ALL.into_iter().filter(move |&s| self.contains(s))
    }

    /// The five masks of the ablation table, in table order.
    pub fn ablation_set() -> [ScaleMask; 5] {
        [
            ScaleMask::NONE,
            ScaleMask::only(Scale::Large),
            ScaleMask::only(Scale::Medium),
            ScaleMask::only(Scale::Small),
            ScaleMask::ALL,
        ]
    }
}

impl fmt::Display for ScaleMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let letters: Vec<String> = self.scales().map(|s| s.letter().to_string()).collect();
        f.write_str(&letters.join(","))
    }
}

impl FromStr for ScaleMask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(ScaleMask::NONE);
        }
        if s.eq_ignore_ascii_case("all") {
            return Ok(ScaleMask::ALL);
        }
        let scales = s.split(',').map(str::parse).collect::<Result<Vec<Scale>, _>>()?;
        Ok(ScaleMask::from_scales(&scales))
    }
}

impl TryFrom<String> for ScaleMask {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ScaleMask> for String {
    fn from(m: ScaleMask) -> String {
        m.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trips_through_text() {
        for m in ScaleMask::ablation_set() {
            assert_eq!(m.to_string().parse::<ScaleMask>().unwrap(), m);
        }
        assert_eq!("s,m,l".parse::<ScaleMask>().unwrap(), ScaleMask::ALL);
        assert!("x".parse::<ScaleMask>().is_err());
    }
}
