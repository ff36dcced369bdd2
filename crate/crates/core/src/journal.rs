//! Append-only record files shared by the queue logs, the state store and the
//! data catalog.
//!
//! Each record is framed as
//!
//! ```text
//! +----------------+----------------+----------------------+
//! | len: u32 (LE)  | crc32: u32 (LE)| body: `len` bytes    |
//! +----------------+----------------+----------------------+
//! ```
//!
//! where `body` is a JSON document and `crc32` covers the body only. A record
//! whose header or body runs past the end of the file, or whose checksum or
//! JSON does not verify, marks a torn tail: it and everything after it is
//! truncated on replay.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::marker::PhantomData;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

const HEADER_LEN: usize = 8;

/// Upper bound on a single record body; anything larger is treated as
/// corruption rather than allocated.
const MAX_RECORD_LEN: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("journal i/o on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("failed to encode journal record: {0}")]
    Encode(#[from] serde_json::Error),
}

/// Outcome of reading a journal file back.
#[derive(Debug)]
pub struct Replay<T> {
    pub records: Vec<T>,
    /// Bytes dropped from the tail because the final record was torn or corrupt.
    pub truncated_bytes: u64,
}

pub struct Journal<T> {
    path: PathBuf,
    file: File,
    sync: bool,
    _record: PhantomData<fn(&T)>,
}

impl<T> std::fmt::Debug for Journal<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("path", &self.path).finish()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> JournalError + '_ {
    move |source| JournalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn encode_frame(body: &[u8]) -> Vec<u8> {
    let mut frame = Vec::with_capacity(HEADER_LEN + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
    frame.extend_from_slice(&crc32fast::hash(body).to_le_bytes());
    frame.extend_from_slice(body);
    frame
}

/// Split `bytes` into verified frame bodies; returns them with the length of
/// the valid prefix.
fn split_frames(bytes: &[u8]) -> (Vec<&[u8]>, usize) {
    let mut bodies = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= HEADER_LEN {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap());
        if len > MAX_RECORD_LEN || bytes.len() - pos - HEADER_LEN < len {
            break;
        }
        let body = &bytes[pos + HEADER_LEN..pos + HEADER_LEN + len];
        if crc32fast::hash(body) != crc {
            break;
        }
        bodies.push(body);
        pos += HEADER_LEN + len;
    }
    (bodies, pos)
}

impl<T: Serialize + DeserializeOwned> Journal<T> {
    /// Read every intact record in `path`, truncating a torn tail in place.
    /// A missing file replays as empty.
    pub fn replay(path: &Path) -> Result<Replay<T>, JournalError> {
        let mut bytes = Vec::new();
        match File::open(path) {
            Ok(mut f) => {
                f.read_to_end(&mut bytes).map_err(io_err(path))?;
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Ok(Replay {
                    records: Vec::new(),
                    truncated_bytes: 0,
                })
            }
            Err(e) => return Err(io_err(path)(e)),
        }

        let (bodies, mut valid) = split_frames(&bytes);
        let mut records = Vec::with_capacity(bodies.len());
        let mut consumed = 0;
        for body in bodies {
            match serde_json::from_slice::<T>(body) {
                Ok(rec) => {
                    records.push(rec);
                    consumed += HEADER_LEN + body.len();
                }
                Err(_) => {
                    valid = consumed;
                    break;
                }
            }
        }
        let truncated_bytes = (bytes.len() - valid) as u64;
        if truncated_bytes > 0 {
            let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
            f.set_len(valid as u64).map_err(io_err(path))?;
            f.sync_all().map_err(io_err(path))?;
        }
        Ok(Replay {
            records,
            truncated_bytes,
        })
    }

    /// Open `path` for appending, creating it if needed.
    pub fn open(path: &Path, sync: bool) -> Result<Self, JournalError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            sync,
            _record: PhantomData,
        })
    }

    /// Atomically replace the file at `path` with `records` and return a
    /// journal positioned to append after them.
    pub fn rewrite<'a, I>(path: &Path, records: I, sync: bool) -> Result<Self, JournalError>
    where
        I: IntoIterator<Item = &'a T>,
        T: 'a,
    {
        let tmp = path.with_extension("compact");
        {
            let mut out = io::BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
            for rec in records {
                let body = serde_json::to_vec(rec)?;
                out.write_all(&encode_frame(&body)).map_err(io_err(&tmp))?;
            }
            let file = out.into_inner().map_err(|e| io_err(&tmp)(e.into_error()))?;
            file.sync_all().map_err(io_err(&tmp))?;
        }
        fs::rename(&tmp, path).map_err(io_err(path))?;
        Self::open(path, sync)
    }

    pub fn append(&mut self, record: &T) -> Result<(), JournalError> {
        let body = serde_json::to_vec(record)?;
        self.file
            .write_all(&encode_frame(&body))
            .map_err(io_err(&self.path))?;
        if self.sync {
            self.file.sync_data().map_err(io_err(&self.path))?;
        }
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
