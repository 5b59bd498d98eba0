use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Scale preset shared by the data generator, the models and the harness.
///
/// `Full` uses 64×64 images, 128-channel image features and 500k/10k
/// instances. `Desk` shrinks everything so a laptop CPU can train it:
/// 32×32 images, 64 channels, 256-dim recurrent state, 512-dim classifier
/// and 30k/3k instances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Full,
    #[default]
    Desk,
}

impl Preset {
    pub fn canvas(self) -> usize {
        match self {
            Preset::Full => 64,
            Preset::Desk => 32,
        }
    }

    pub fn train_instances(self) -> usize {
        match self {
            Preset::Full => 500_000,
            Preset::Desk => 30_000,
        }
    }

    pub fn val_instances(self) -> usize {
        match self {
            Preset::Full => 10_000,
            Preset::Desk => 3_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Desk => "desk",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            _ => Err(format!("unknown preset '{s}' (expected full or desk)")),
        }
    }
}
