use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use tracing::warn;

use super::PipelineError;

pub const LOCK_FILE: &str = "manifest.lock";

/// Exclusive writer lock on a run directory, released on drop.
///
/// A lock left by a process that no longer exists is taken over on Linux;
/// elsewhere it has to be removed by hand.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        let path = run_dir.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut file) => {
                    writeln!(file, "{}", std::process::id()).map_err(PipelineError::io(&path))?;
                    return Ok(Self { path });
                }
                Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).unwrap_or_default().trim().to_owned();
                    if !holder_is_gone(&holder) {
                        return Err(PipelineError::Locked { path, holder });
                    }
                    warn!(holder, "removing stale run lock");
                    fs::remove_file(&path).map_err(PipelineError::io(&path))?;
                }
                Err(e) => return Err(PipelineError::io(&path)(e)),
            }
        }
        let holder = fs::read_to_string(&path).unwrap_or_default().trim().to_owned();
        Err(PipelineError::Locked { path, holder })
    }
}

fn holder_is_gone(holder: &str) -> bool {
    let proc_root = Path::new("/proc/self");
    match holder.parse::<u32>() {
        Ok(pid) if proc_root.exists() => {
            pid != std::process::id() && !Path::new("/proc").join(pid.to_string()).exists()
        }
        _ => false,
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_holder_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let first = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(
            RunLock::acquire(dir.path()),
            Err(PipelineError::Locked { .. })
        ));
        drop(first);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stale_lock_is_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        // Pid far above the default pid_max.
        fs::write(dir.path().join(LOCK_FILE), "4294967290\n").unwrap();
        if Path::new("/proc/self").exists() {
            RunLock::acquire(dir.path()).unwrap();
        }
    }
}
