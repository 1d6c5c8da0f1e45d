pub mod bench;
pub mod convert;
pub mod eval;
pub mod export;
pub mod sweep;
pub mod transfer;

use std::path::Path;

use serde::Serialize;

use crate::error::{CliError, CliResult};

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub(crate) fn json_line(value: &impl Serialize) -> CliResult<String> {
    serde_json::to_string(value).map_err(|e| CliError::Config(e.to_string()))
}
