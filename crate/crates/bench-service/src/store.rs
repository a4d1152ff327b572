//! JSON-lines event logs on disk, one file per session.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::session::{Event, Session, SessionError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: {source}")]
    Session { path: PathBuf, source: SessionError },
}

/// Session logs under one directory, or nowhere when `dir` is `None`.
#[derive(Clone, Debug)]
pub struct EventLog {
    dir: Option<PathBuf>,
}

impl EventLog {
    pub fn in_memory() -> Self {
        Self { dir: None }
    }

    pub fn open(dir: impl AsRef<Path>) -> io::Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: Some(dir.as_ref().to_path_buf()),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn append(&self, session_id: &str, ev: &Event) -> io::Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut line = serde_json::to_string(ev).map_err(io::Error::other)?;
        line.push('\n');
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join(format!("{session_id}.jsonl")))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()
    }

    /// Every stored session, oldest first.
    pub fn load_all(&self) -> Result<Vec<Session>, StoreError> {
        let Some(dir) = &self.dir else { return Ok(Vec::new()) };
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        let mut out = Vec::with_capacity(paths.len());
        for p in paths {
            out.push(read_log(&p)?);
        }
        out.sort_by(|a, b| a.created_at_ms.cmp(&b.created_at_ms).then_with(|| a.id.cmp(&b.id)));
        Ok(out)
    }
}

pub fn read_log(path: &Path) -> Result<Session, StoreError> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(serde_json::from_str::<Event>(&line).map_err(|e| StoreError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Session::fold(&events).map_err(|source| StoreError::Session {
        path: path.to_path_buf(),
        source,
    })
}
