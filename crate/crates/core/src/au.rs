//! Facial Action Unit identifiers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::Error;

/// FACS Action Unit number. Displays as `AU04`; parses `AU04`, `AU4`, `au4` and `4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActionUnit(pub u16);

/// The pain-related Action Units evaluated by the pipeline.
pub const PAIN_AUS: [ActionUnit; 8] = [
    ActionUnit(4),
    ActionUnit(6),
    ActionUnit(7),
    ActionUnit(9),
    ActionUnit(10),
    ActionUnit(25),
    ActionUnit(26),
    ActionUnit(27),
];

impl ActionUnit {
    pub fn number(self) -> u16 {
        self.0
    }
}

impl fmt::Display for ActionUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AU{:02}", self.0)
    }
}

impl FromStr for ActionUnit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let trimmed = s.trim();
        let digits = if trimmed.len() > 2 && trimmed[..2].eq_ignore_ascii_case("au") {
            &trimmed[2..]
        } else {
            trimmed
        };
        digits
            .parse::<u16>()
            .map(ActionUnit)
            .map_err(|_| Error::UnknownAu(s.to_string()))
    }
}

impl Serialize for ActionUnit {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ActionUnit {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
