use std::path::PathBuf;

use anyhow::anyhow;
use duiit_core::report::{compare, RunReport};

use crate::error::{CliError, CliResult};

pub fn cmd_compare(reports: &[PathBuf], csv: Option<&PathBuf>) -> CliResult<()> {
    if reports.len() < 2 {
        return Err(CliError::config(anyhow!("compare needs at least 2 reports, got {}", reports.len())));
    }
    let loaded = reports.iter().map(RunReport::load).collect::<Result<Vec<_>, _>>()?;
    let table = compare(&loaded)?;
    print!("{}", table.to_table());
    let text = table.to_csv()?;
    match csv {
        Some(path) => std::fs::write(path, text).map_err(|e| anyhow!("{}: {e}", path.display()))?,
        None => print!("\n{text}"),
    }
    Ok(())
}
