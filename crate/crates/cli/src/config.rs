use std::fs;
use std::path::Path;

use serde::Deserialize;
use treechoice::baselines::BaselineConfig;
use treechoice::dataio::LoadOptions;
use treechoice::evaluation::{EvalOptions, SplitSpec};
use treechoice::{Error, TrainConfig};

/// Settings read from a `--config` TOML file. Every section and key is
/// optional; command-line flags override whatever is set here.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub baseline: BaselineConfig,
    pub split: SplitSpec,
    pub eval: EvalOptions,
    pub load: LoadOptions,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {}", path.display(), e.message())))
    }
}

/// Overwrites `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: FileConfig = toml::from_str("[train]\ndim = 8\n[split]\nseed = 9\n").unwrap();
        assert_eq!(cfg.train.dim, 8);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert_eq!(cfg.split.seed, 9);
        assert_eq!(cfg.eval.cutoffs, vec![1, 3, 5, 10]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("[train]\ndimension = 8\n").is_err());
        assert!(toml::from_str::<FileConfig>("[nonsense]\n").is_err());
    }

    #[test]
    fn flag_overrides() {
        let mut x = 3;
        set(&mut x, None);
        assert_eq!(x, 3);
        set(&mut x, Some(5));
        assert_eq!(x, 5);
    }
}
