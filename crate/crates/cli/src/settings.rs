use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::de::{DeserializeOwned, IntoDeserializer};
use symclone_core::data::RunConfig;
use symclone_core::Error;

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Sets every entry of the `seeds` table.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl Common {
    /// Loads the configuration and applies the shared overrides; command-specific
    /// overrides go through `apply` before validation.
    pub fn load(&self, apply: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if let Some(s) = self.seed {
            let seeds = &mut cfg.seeds;
            (seeds.init, seeds.clone, seeds.split, seeds.transform, seeds.train) = (s, s, s, s, s);
        }
        apply(&mut cfg)?;
        cfg.validate()?;
        cfg.clone.seed = cfg.seeds.clone;
        Ok(cfg)
    }
}

/// Parses a flag value with the same spelling the config file uses.
pub fn parse_enum<T: DeserializeOwned>(key: &str, value: &str) -> Result<T> {
    T::deserialize(IntoDeserializer::<serde::de::value::Error>::into_deserializer(value)).map_err(|e| {
        Error::Config {
            key: key.into(),
            msg: e.to_string(),
        }
        .into()
    })
}
