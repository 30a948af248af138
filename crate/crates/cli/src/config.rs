use std::path::Path;

use dcvit::complexity::BenchSweep;
use dcvit::datagen::SynthTask;
use dcvit::encoder::ModelConfig;
use dcvit::training::TrainConfig;
use serde::Deserialize;

use crate::Failure;

/// Dataset size and split fractions for `train` and `eval`.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_samples: usize,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_samples: 2000, split: [0.8, 0.2, 0.0] }
    }
}

/// One JSON run file; each command reads the sections it needs.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    pub train: Option<TrainConfig>,
    pub task: Option<SynthTask>,
    pub data: Option<DataConfig>,
    pub bench: Option<BenchSweep>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Failure::Config(m) => Failure::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Failure::Config(e.into_inner().to_string())
            } else {
                Failure::Config(format!("at `{path}`: {}", e.into_inner()))
            }
        })
    }

    pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, Failure> {
        section
            .as_ref()
            .ok_or_else(|| Failure::Config(format!("missing `{name}` section")))
    }
}
