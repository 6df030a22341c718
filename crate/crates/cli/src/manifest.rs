use std::path::Path;

use mpum::{Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config_hash: String,
    config: &'a RunConfig,
    /// Subcommand-specific arguments.
    args: &'a serde_json::Value,
    outputs: &'a [String],
}

/// Records what produced the files in `out`.
pub fn write(out: &Path, command: &str, cfg: &RunConfig, args: &serde_json::Value, outputs: &[String]) -> Result<()> {
    let m = Manifest {
        tool: "mpum",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed(),
        config_hash: crate::config::sha256_hex(&serde_json::to_string(&(cfg, args))?),
        config: cfg,
        args,
        outputs,
    };
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&m)?).map_err(|e| Error::Io { path, source: e })
}
