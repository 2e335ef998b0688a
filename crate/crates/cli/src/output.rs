use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{io_error, CliError};

/// Collects a command's outputs in a hidden directory under `--out` and
/// moves them into place only on `commit`. Dropping an uncommitted staging
/// area removes it, and removes `--out` too if this run created it.
pub struct Staging {
    out: PathBuf,
    dir: PathBuf,
    created_out: bool,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self, CliError> {
        if out.exists() && !out.is_dir() {
            return Err(CliError::Usage(format!("--out {} exists and is not a directory", out.display())));
        }
        let created_out = !out.exists();
        fs::create_dir_all(out).map_err(|e| io_error("cannot create", out, e))?;
        let dir = out.join(format!(".aofl-staging-{}", std::process::id()));
        let staging = Staging {
            out: out.to_path_buf(),
            dir,
            created_out,
            committed: false,
        };
        fs::create_dir(&staging.dir).map_err(|e| io_error("cannot create", &staging.dir, e))?;
        Ok(staging)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, contents).map_err(|e| io_error("cannot write", &path, e))
    }

    /// Renames every staged file into `--out`, replacing older versions.
    pub fn commit(mut self) -> Result<Vec<PathBuf>, CliError> {
        let mut names: Vec<_> = fs::read_dir(&self.dir)
            .map_err(|e| io_error("cannot read", &self.dir, e))?
            .map(|entry| entry.map(|e| e.file_name()))
            .collect::<Result<_, _>>()
            .map_err(|e| io_error("cannot read", &self.dir, e))?;
        names.sort();
        let mut written = Vec::with_capacity(names.len());
        for name in names {
            let target = self.out.join(&name);
            fs::rename(self.dir.join(&name), &target).map_err(|e| io_error("cannot move output to", &target, e))?;
            written.push(target);
        }
        fs::remove_dir(&self.dir).map_err(|e| io_error("cannot remove", &self.dir, e))?;
        self.committed = true;
        Ok(written)
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        let _ = fs::remove_dir_all(&self.dir);
        if self.created_out {
            let _ = fs::remove_dir(&self.out);
        }
    }
}
