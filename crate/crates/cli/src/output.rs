//! All-or-nothing output: every file a command produces is staged next to its
//! destination and renamed into place only after the whole command succeeded.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

pub struct OutputSet {
    dir: PathBuf,
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl OutputSet {
    /// Creates `dir` if needed and checks that it accepts new files.
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        NamedTempFile::new_in(dir)
            .with_context(|| format!("output directory {} is not writable", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            staged: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Stages `name`, filled by `fill`.
    pub fn write<F>(&mut self, name: &str, fill: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut dyn Write) -> Result<()>,
    {
        let dest = self.path(name);
        let mut tmp = NamedTempFile::new_in(&self.dir)
            .with_context(|| format!("staging {}", dest.display()))?;
        {
            let mut w = BufWriter::new(tmp.as_file_mut());
            fill(&mut w).with_context(|| format!("writing {}", dest.display()))?;
            w.flush()?;
        }
        self.staged.push((tmp, dest.clone()));
        Ok(dest)
    }

    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        self.write(name, |w| Ok(w.write_all(bytes)?))
    }

    /// Moves every staged file into place. Dropping the set without committing
    /// deletes the staged files.
    pub fn commit(self) -> Result<Vec<PathBuf>> {
        let mut done = Vec::with_capacity(self.staged.len());
        for (tmp, dest) in self.staged {
            tmp.as_file().sync_all()?;
            tmp.persist(&dest)
                .with_context(|| format!("moving output into {}", dest.display()))?;
            done.push(dest);
        }
        Ok(done)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nothing_lands_without_commit() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = OutputSet::new(dir.path()).unwrap();
            out.write_bytes("a.txt", b"hello").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
        let mut out = OutputSet::new(dir.path()).unwrap();
        out.write_bytes("a.txt", b"hello").unwrap();
        out.commit().unwrap();
        assert_eq!(fs::read(dir.path().join("a.txt")).unwrap(), b"hello");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
