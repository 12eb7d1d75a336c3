//! Append-only reservation journal, one JSON record per line.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Reservation, ReservationError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum JournalRecord {
    Create { reservation: Reservation },
    Cancel { reservation_id: String },
}

#[derive(Debug)]
pub struct Journal {
    path: PathBuf,
    file: File,
}

fn io_err(e: impl std::fmt::Display) -> ReservationError {
    ReservationError::Journal(e.to_string())
}

impl Journal {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ReservationError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err)?;
        Ok(Self { path, file })
    }

    pub fn read_all(&self) -> Result<Vec<JournalRecord>, ReservationError> {
        let reader = BufReader::new(File::open(&self.path).map_err(io_err)?);
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| ReservationError::Journal(format!("line {}: {e}", n + 1)))?;
            records.push(record);
        }
        Ok(records)
    }

    pub fn append(&mut self, record: &JournalRecord) -> Result<(), ReservationError> {
        let mut line = serde_json::to_string(record).map_err(io_err)?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(io_err)?;
        self.file.sync_data().map_err(io_err)
    }
}
