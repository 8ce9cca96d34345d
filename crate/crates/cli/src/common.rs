use std::fs;
use std::path::Path;

use caplearn::config::{RunManifest, ScenarioConfig};
use caplearn::error::Error;

use crate::ConfigSource;

/// Loads the scenario from --config or --preset and applies the seed
/// override before anything hashes or copies it.
pub fn resolve_config(source: &ConfigSource) -> Result<ScenarioConfig, Error> {
    let mut cfg = match (&source.config, &source.preset) {
        (Some(path), None) => {
            let raw = fs::read_to_string(path).map_err(|e| {
                Error::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            ScenarioConfig::from_toml_str(&raw)?
        }
        (None, Some(name)) => ScenarioConfig::preset(name)?,
        _ => return Err(Error::Config("one of --config or --preset is required".into())),
    };
    if let Some(seed) = source.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// Writes the effective config and the provenance manifest into the run
/// directory, creating it if needed.
pub fn write_run_preamble(out: &Path, command: &str, cfg: &ScenarioConfig) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;
    let manifest = RunManifest::new(command, cfg);
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// 2 for anything the user can fix in inputs, 3 for numerical trouble.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) | Error::Io(_) | Error::Json(_) => 2,
        Error::NonFinite(_)
        | Error::GpNotPositiveDefinite { .. }
        | Error::QpNoConvergence { .. }
        | Error::NumericalFault(_) => 3,
    }
}
