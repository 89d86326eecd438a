use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// Tracks files and directories a command creates so that a failed run
/// leaves nothing behind.
#[derive(Debug)]
pub struct Outputs {
    root: PathBuf,
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let mut out = Self {
            root: root.into(),
            files: Vec::new(),
            dirs: Vec::new(),
            committed: false,
        };
        let root = out.root.clone();
        out.ensure_dir(&root)?;
        Ok(out)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn ensure_dir(&mut self, dir: &Path) -> Result<()> {
        let mut missing = Vec::new();
        let mut cur = Some(dir);
        while let Some(d) = cur {
            if d.as_os_str().is_empty() || d.exists() {
                break;
            }
            missing.push(d.to_path_buf());
            cur = d.parent();
        }
        for d in missing.into_iter().rev() {
            fs::create_dir(&d).with_context(|| format!("creating {}", d.display()))?;
            self.dirs.push(d);
        }
        Ok(())
    }

    /// Registers `rel` (and any payload files written next to it later via
    /// [`Self::register`]) and returns its full path.
    pub fn file(&mut self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            self.ensure_dir(parent)?;
        }
        self.files.push(path.clone());
        Ok(path)
    }

    /// Records a file written by library code alongside a registered one.
    pub fn register(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    /// Records every file in `dir` that starts with `stem.`.
    pub fn register_siblings(&mut self, path: &Path) -> Result<()> {
        let (Some(dir), Some(stem)) = (path.parent(), path.file_stem()) else {
            return Ok(());
        };
        let prefix = format!("{}.", stem.to_string_lossy());
        for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let p = entry?.path();
            if p.file_name().is_some_and(|n| n.to_string_lossy().starts_with(&prefix)) && !self.files.contains(&p) {
                self.files.push(p);
            }
        }
        Ok(())
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.file(rel)?;
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Keeps everything written so far.
    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in self.files.iter().rev() {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir(d);
        }
    }
}
