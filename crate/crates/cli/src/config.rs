use std::path::Path;

use serde::{Deserialize, Serialize};

use mmtl_core::data::Dims;
use mmtl_core::models::ModelConfig;
use mmtl_core::trainer::TrainConfig;

use crate::CliError;

/// Contents of a `.cfg` file: the architecture and the run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {}", e.message())))?;
        config.model.validate()?;
        config.train.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// Rejects datasets whose sample shapes differ from what `model` consumes.
pub fn check_dims(model: &ModelConfig, dims: Dims) -> Result<(), CliError> {
    let mut problems = Vec::new();
    if model.audio_len != dims.audio_len {
        problems.push(format!("audio length {} vs {}", dims.audio_len, model.audio_len));
    }
    if model.frames != dims.frames {
        problems.push(format!("frames {} vs {}", dims.frames, model.frames));
    }
    if let Some(v) = &model.visual {
        if (v.channels, v.height, v.width) != (dims.channels, dims.height, dims.width) {
            problems.push(format!(
                "frame shape {:?} vs {:?}",
                (dims.channels, dims.height, dims.width),
                (v.channels, v.height, v.width)
            ));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("dataset does not fit the model: {}", problems.join(", "))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mmtl_core::joint_loss::WeightingMode;
    use mmtl_core::trainer::Modality;

    const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs");

    fn shipped(name: &str) -> RunConfig {
        RunConfig::load(&Path::new(CONFIGS).join(name)).unwrap()
    }

    #[test]
    fn shipped_configs_match_the_presets() {
        let defaults = TrainConfig::new(Modality::Multimodal, WeightingMode::dynamic(2));
        let toy = shipped("toy.cfg");
        assert_eq!(toy.model, ModelConfig::toy_preset());
        assert_eq!(toy.train, defaults);
        let paper = shipped("paper.cfg");
        assert_eq!(paper.model, ModelConfig::paper_preset());
        assert_eq!(paper.train, defaults);
    }

    #[test]
    fn unknown_keys_are_named() {
        let text = std::fs::read_to_string(Path::new(CONFIGS).join("toy.cfg")).unwrap();
        let bad = text.replacen("batch_size", "batch_sise", 1);
        match RunConfig::parse(&bad) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("batch_sise"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let bad = text.replacen("dropout", "drop_out", 1);
        match RunConfig::parse(&bad) {
            Err(CliError::Usage(msg)) => assert!(msg.contains("drop_out"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn broken_shape_chain_is_a_usage_error() {
        let mut config = shipped("toy.cfg");
        config.model.speech.as_mut().unwrap()[0].kernel = 1000;
        let text = toml::to_string(&config).unwrap();
        assert!(matches!(RunConfig::parse(&text), Err(CliError::Usage(_))));
    }
}
