use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preset::Preset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Core {
    CnnLstm,
    San,
    RelNet,
    Film,
    Mc,
}

impl Core {
    pub const ALL: [Core; 5] = [Core::CnnLstm, Core::San, Core::RelNet, Core::Film, Core::Mc];

    /// Name used in experiment legends.
    pub fn legend(self) -> &'static str {
        match self {
            Core::CnnLstm => "cnnlstm",
            Core::San => "san",
            Core::RelNet => "relnet",
            Core::Film => "film",
            Core::Mc => "mc",
        }
    }

    /// Whether the unmodified model attaches coordinates.
    pub fn default_coords(self) -> bool {
        matches!(self, Core::RelNet | Core::Film)
    }

    pub fn default_layers(self) -> CoreLayers {
        match self {
            Core::Film => CoreLayers::Convolutional,
            _ => CoreLayers::FullyConnected,
        }
    }

    pub fn default_fusion(self) -> Fusion {
        match self {
            Core::Film => Fusion::Film,
            _ => Fusion::Concat,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Concat,
    Film,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoreLayers {
    FullyConnected,
    Convolutional,
}

/// Which input a unimodal baseline drops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Language,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recurrent {
    Lstm,
    Gru,
}

pub const DEFAULT_FILM_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub core: Core,
    pub coords: bool,
    pub fusion: Fusion,
    pub core_layers: CoreLayers,
    pub early_fusion: bool,
    #[serde(default = "default_film_layers")]
    pub film_layer_count: usize,
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub zero_modality: Option<Modality>,
}

fn default_film_layers() -> usize {
    DEFAULT_FILM_LAYERS
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{core} does not support {what}")]
    Unsupported { core: &'static str, what: &'static str },
    #[error("film_layer_count must be at least 1")]
    NoFilmLayers,
    #[error("unknown model name `{0}`")]
    UnknownName(String),
}

/// Layer widths for one preset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub canvas: usize,
    pub image_channels: usize,
    pub embedding: usize,
    pub rnn: usize,
    pub relnet_rnn: usize,
    pub classifier_hidden: usize,
    pub san: usize,
    pub san_rounds: usize,
    pub relnet_projection: usize,
    pub relnet_hidden: usize,
    pub film_out: usize,
}

impl Dims {
    pub fn of(preset: Preset) -> Dims {
        let full = preset == Preset::Full;
        Dims {
            canvas: preset.canvas(),
            image_channels: if full { 128 } else { 64 },
            embedding: 128,
            rnn: if full { 512 } else { 256 },
            relnet_rnn: 128,
            classifier_hidden: if full { 1024 } else { 512 },
            san: 256,
            san_rounds: 2,
            relnet_projection: 32,
            relnet_hidden: 256,
            film_out: 128,
        }
    }

    /// Side length of the image feature grid.
    pub fn grid(&self) -> usize {
        self.canvas / 8
    }
}

impl ModelConfig {
    /// The model as published, without modifications.
    pub fn base(core: Core, preset: Preset) -> Self {
        ModelConfig {
            core,
            coords: core.default_coords(),
            fusion: core.default_fusion(),
            core_layers: core.default_layers(),
            early_fusion: false,
            film_layer_count: DEFAULT_FILM_LAYERS,
            preset,
            zero_modality: None,
        }
    }

    pub fn dims(&self) -> Dims {
        Dims::of(self.preset)
    }

    pub fn recurrent(&self) -> Recurrent {
        match self.core {
            Core::Film => Recurrent::Gru,
            _ => Recurrent::Lstm,
        }
    }

    pub fn sentence_size(&self) -> usize {
        let d = self.dims();
        match self.core {
            Core::RelNet => d.relnet_rnn,
            _ => d.rnn,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let core = self.core.legend();
        let bad = |what| Err(ConfigError::Unsupported { core, what });
        if self.film_layer_count < 1 {
            return Err(ConfigError::NoFilmLayers);
        }
        let film_fusion = self.fusion == Fusion::Film;
        let convs = self.core_layers == CoreLayers::Convolutional;
        match self.core {
            Core::RelNet | Core::San if convs => return bad("convolutional core layers"),
            Core::RelNet | Core::San if film_fusion => return bad("FiLM fusion"),
            Core::CnnLstm if !self.early_fusion && (film_fusion || convs) => {
                return bad("FiLM fusion or convolutions without early fusion")
            }
            _ => {}
        }
        if self.early_fusion && self.core != Core::CnnLstm {
            return bad("the early-fusion toggle");
        }
        if self.zero_modality.is_some() && (self.core != Core::CnnLstm || self.early_fusion) {
            return bad("unimodal operation");
        }
        Ok(())
    }

    /// Legend-style name, e.g. `mc+coords+FiLM+convs` or `film--coords`.
    pub fn name(&self) -> String {
        let mut s = match (self.core, self.zero_modality) {
            (Core::CnnLstm, Some(Modality::Language)) => "cnn".to_string(),
            (Core::CnnLstm, Some(Modality::Image)) => "lstm".to_string(),
            (core, _) => core.legend().to_string(),
        };
        if self.coords != self.core.default_coords() {
            s.push_str(if self.coords { "+coords" } else { "--coords" });
        }
        if self.early_fusion {
            s.push_str("+early");
        }
        if self.core != Core::Film && self.fusion == Fusion::Film {
            s.push_str("+FiLM");
        }
        if self.core_layers != self.core.default_layers() {
            s.push_str(if self.core_layers == CoreLayers::Convolutional {
                "+convs"
            } else {
                "--convs"
            });
        }
        if self.film_layer_count != DEFAULT_FILM_LAYERS {
            if self.film_layer_count == 1 {
                s.push_str("--layers");
            } else {
                s.push_str(&format!("+layers{}", self.film_layer_count));
            }
        }
        s
    }

    /// Parses a legend-style name. The result is validated.
    pub fn from_name(name: &str, preset: Preset) -> Result<Self, ConfigError> {
        let unknown = || ConfigError::UnknownName(name.to_string());
        let split = name.find(['+', '-']).unwrap_or(name.len());
        let (base, mut rest) = name.split_at(split);
        let mut cfg = match base {
            "cnn" => ModelConfig {
                zero_modality: Some(Modality::Language),
                ..ModelConfig::base(Core::CnnLstm, preset)
            },
            "lstm" => ModelConfig {
                zero_modality: Some(Modality::Image),
                ..ModelConfig::base(Core::CnnLstm, preset)
            },
            _ => {
                let core = Core::ALL.into_iter().find(|c| c.legend() == base).ok_or_else(unknown)?;
                ModelConfig::base(core, preset)
            }
        };
        while !rest.is_empty() {
            let (add, body) = if let Some(b) = rest.strip_prefix("--") {
                (false, b)
            } else if let Some(b) = rest.strip_prefix('+') {
                (true, b)
            } else {
                return Err(unknown());
            };
            let end = body.find(['+', '-']).unwrap_or(body.len());
            let (word, tail) = body.split_at(end);
            match (add, word) {
                (_, "coords") => cfg.coords = add,
                (true, "early") => cfg.early_fusion = true,
                (true, "FiLM") => cfg.fusion = Fusion::Film,
                (true, "convs") => cfg.core_layers = CoreLayers::Convolutional,
                (false, "convs") => cfg.core_layers = CoreLayers::FullyConnected,
                (false, "layers") => cfg.film_layer_count = 1,
                (true, w) if w.starts_with("layers") => {
                    cfg.film_layer_count = w["layers".len()..].parse().map_err(|_| unknown())?
                }
                _ => return Err(unknown()),
            }
            rest = tail;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for ModelConfig {
    type Err = ConfigError;

    /// Parses a desk-preset legend name.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelConfig::from_name(s, Preset::Desk)
    }
}

/// The twelve variants used by the trainability and trend checks.
pub const ACCEPTANCE_VARIANTS: [&str; 12] = [
    "cnnlstm",
    "cnnlstm+coords",
    "cnnlstm+early+FiLM+convs",
    "san",
    "san+coords",
    "relnet",
    "relnet--coords",
    "film",
    "film--coords",
    "mc",
    "mc+coords",
    "mc+FiLM+convs",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for name in ACCEPTANCE_VARIANTS.iter().copied().chain([
            "cnn",
            "lstm",
            "film--convs",
            "film--layers",
            "mc+coords+FiLM+convs",
            "mc+convs",
            "mc+FiLM",
            "cnnlstm+early",
            "cnnlstm+coords+early+FiLM",
        ]) {
            let cfg = ModelConfig::from_name(name, Preset::Desk).unwrap();
            assert_eq!(cfg.name(), name);
        }
    }

    #[test]
    fn illegal_combinations_are_rejected() {
        for name in [
            "relnet+convs",
            "relnet+FiLM",
            "san+FiLM",
            "san+convs",
            "cnnlstm+FiLM",
            "mc+early",
            "film+layers0",
        ] {
            assert!(ModelConfig::from_name(name, Preset::Desk).is_err(), "{name}");
        }
        assert!(ModelConfig::from_name("resnet", Preset::Desk).is_err());
    }

    #[test]
    fn recurrent_kind_and_size_follow_the_core() {
        let film = ModelConfig::base(Core::Film, Preset::Full);
        assert_eq!((film.recurrent(), film.sentence_size()), (Recurrent::Gru, 512));
        let rn = ModelConfig::base(Core::RelNet, Preset::Full);
        assert_eq!((rn.recurrent(), rn.sentence_size()), (Recurrent::Lstm, 128));
        assert_eq!(film.film_layer_count, 4);
    }

    #[test]
    fn json_round_trip() {
        let cfg = ModelConfig::from_name("mc+coords+FiLM+convs", Preset::Full).unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"core\":\"mc\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }
}
