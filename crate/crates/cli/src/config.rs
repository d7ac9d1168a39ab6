use std::path::Path;

use atlaseg::em::EmConfig;
use atlaseg::registration::{RegistrationConfig, Stage};
use atlaseg::ClassMap;
use serde::{Deserialize, Serialize};

use crate::{CliError, RegistrationFlags};

/// Settings shared by all subcommands, loadable from `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub class_map: ClassMap,
    pub registration: RegistrationConfig,
    pub em: EmConfig,
    pub lambda: f64,
    pub n_bins: usize,
    pub exclude_background_votes: bool,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            class_map: ClassMap::whole_heart(),
            registration: RegistrationConfig::default(),
            em: EmConfig::default(),
            lambda: 0.01,
            n_bins: atlaseg::bayes::DEFAULT_BINS,
            exclude_background_votes: false,
        }
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| atlaseg::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError {
            code: crate::EXIT_DATA,
            message: format!("{}: {e}", path.display()),
        })
    }

    pub fn registration_with(
        &self,
        flags: &RegistrationFlags,
    ) -> Result<RegistrationConfig, CliError> {
        let mut r = self.registration.clone();
        if let Some(l) = flags.levels {
            r.levels = l;
        }
        if let Some(b) = flags.bins {
            r.mi.bins = b;
        }
        if let Some(i) = flags.iterations {
            r.asgd.iterations = i;
        }
        if let Some(s) = flags.seed {
            r.asgd.seed = s;
        }
        if let Some(stages) = &flags.stages {
            r.stages = stages
                .iter()
                .map(|s| match s.as_str() {
                    "affine" => Ok(Stage::Affine),
                    "ffd" => Ok(Stage::Ffd),
                    other => Err(CliError::usage(format!(
                        "unknown stage '{other}' (expected affine or ffd)"
                    ))),
                })
                .collect::<Result<_, _>>()?;
        }
        r.validate().map_err(|e| CliError::usage(e.to_string()))?;
        Ok(r)
    }
}
