use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use humanwarp::geometry::MapGrid;
use humanwarp::io::write_hdm;

/// Artifacts of one run. Unless `commit` is called, everything this run
/// wrote is removed again on drop, together with the output directory if the
/// run created it.
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn create(dir: &Path) -> Result<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        Ok(Outputs {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Registers a file that a library call is about to write.
    pub fn expect(&mut self, name: &str) -> PathBuf {
        let path = self.dir.join(name);
        self.files.push(path.clone());
        path
    }

    pub fn text(&mut self, name: &str, body: &str) -> Result<()> {
        let path = self.expect(name);
        fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn map(&mut self, name: &str, grid: &MapGrid) -> Result<()> {
        let path = self.expect(name);
        write_hdm(&path, grid).with_context(|| format!("cannot write {}", path.display()))
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        if self.created_dir {
            let _ = fs::remove_dir_all(&self.dir);
        } else {
            for f in &self.files {
                let _ = fs::remove_file(f);
            }
        }
    }
}
