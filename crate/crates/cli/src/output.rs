use std::io::Write;
use std::path::Path;

use earl_core::EarlError;
use tempfile::NamedTempFile;

use crate::commands::CliError;

/// Writes `bytes` to `path` through a temporary file in the same directory,
/// or to standard output when no path is given.
pub fn write_output(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    let Some(path) = path else {
        let mut out = std::io::stdout().lock();
        out.write_all(bytes).map_err(EarlError::from)?;
        return Ok(out.flush().map_err(EarlError::from)?);
    };
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(EarlError::from)?;
    tmp.write_all(bytes).map_err(EarlError::from)?;
    tmp.as_file().sync_all().map_err(EarlError::from)?;
    tmp.persist(path).map_err(|e| EarlError::from(e.error))?;
    Ok(())
}
