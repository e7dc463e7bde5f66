//! Dataset container: `SWDS` magic, format version, a length-prefixed JSON
//! header, then fixed-size records. Loaded files are memory-mapped.

use std::fs::File;
use std::io::Write;
use std::ops::Deref;
use std::path::Path;

use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use crate::config::{TaskConfig, TaskKind};
use crate::error::{Error, Result};

use super::{clevr, copy, triangles, Example, Split};

pub const DATASET_MAGIC: &[u8; 4] = b"SWDS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub task: TaskConfig,
    pub split: Split,
    pub n_records: usize,
    pub record_size: usize,
}

enum Bytes {
    Owned(Vec<u8>),
    Mapped(Mmap, usize),
}

impl Deref for Bytes {
    type Target = [u8];
    fn deref(&self) -> &[u8] {
        match self {
            Bytes::Owned(v) => v,
            Bytes::Mapped(m, offset) => &m[*offset..],
        }
    }
}

pub struct Dataset {
    pub header: DatasetHeader,
    records: Bytes,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset").field("header", &self.header).finish()
    }
}

impl Dataset {
    pub(crate) fn from_records(task: &TaskConfig, split: Split, record_size: usize, records: Vec<Vec<u8>>) -> Self {
        let n_records = records.len();
        let mut bytes = Vec::with_capacity(n_records * record_size);
        for r in records {
            debug_assert_eq!(r.len(), record_size);
            bytes.extend_from_slice(&r);
        }
        Self {
            header: DatasetHeader {
                version: DATASET_VERSION,
                task: task.clone(),
                split,
                n_records,
                record_size,
            },
            records: Bytes::Owned(bytes),
        }
    }

    pub fn record(&self, i: usize) -> &[u8] {
        let s = self.header.record_size;
        &self.records[i * s..(i + 1) * s]
    }

    pub fn n_records(&self) -> usize {
        self.header.n_records
    }

    fn questions_per_record(&self) -> usize {
        match self.header.task.kind {
            TaskKind::SortOfClevr if self.header.task.relational_only && self.header.split == Split::Train => {
                clevr::QUESTIONS_PER_IMAGE / 2
            }
            TaskKind::SortOfClevr => clevr::QUESTIONS_PER_IMAGE,
            _ => 1,
        }
    }

    /// Number of examples (Sort-of-CLEVR has several questions per image).
    pub fn len(&self) -> usize {
        self.n_records() * self.questions_per_record()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example(&self, i: usize) -> Example<'_> {
        let task = &self.header.task;
        match task.kind {
            TaskKind::Triangles => triangles::example(task, self.record(i)),
            TaskKind::SortOfClevr => {
                let q = self.questions_per_record();
                let slot = i % q;
                // Relational questions occupy the second half of each record.
                let slot = if q < clevr::QUESTIONS_PER_IMAGE { slot + q } else { slot };
                clevr::example(self.record(i / q), slot)
            }
            TaskKind::Copy => copy::example(task, self.record(i)),
        }
    }

    /// Raw bytes of header and records, as written to disk.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len() + self.records.len());
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&self.records);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        // SAFETY: the mapping is read-only and dataset files are not
        // modified while a run has them open.
        let map = unsafe { Mmap::map(&file)? };
        if map.len() < 12 || &map[..4] != DATASET_MAGIC {
            return Err(Error::format(format!("{} is not a dataset file", path.display())));
        }
        let version = u32::from_le_bytes(map[4..8].try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::format(format!(
                "dataset version {version} is not supported (expected {DATASET_VERSION})"
            )));
        }
        let hlen = u32::from_le_bytes(map[8..12].try_into().unwrap()) as usize;
        if map.len() < 12 + hlen {
            return Err(Error::format("truncated dataset header"));
        }
        let header: DatasetHeader = serde_json::from_slice(&map[12..12 + hlen])?;
        let offset = 12 + hlen;
        if map.len() - offset != header.n_records * header.record_size {
            return Err(Error::format(format!(
                "dataset holds {} record bytes, header promises {} x {}",
                map.len() - offset,
                header.n_records,
                header.record_size
            )));
        }
        Ok(Self {
            header,
            records: Bytes::Mapped(map, offset),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::generate;

    #[test]
    fn save_and_map_round_trip() {
        let task = TaskConfig {
            kind: TaskKind::Copy,
            n_train: 5,
            ..Default::default()
        };
        let ds = generate(&task, Split::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("copy.swds");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.header, ds.header);
        assert_eq!(back.to_bytes(), ds.to_bytes());
        assert_eq!(back.example(3).target, ds.example(3).target);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.swds");
        std::fs::write(&path, b"NOPE00000000").unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Format(_))));
        let mut bytes = b"SWDS".to_vec();
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(Dataset::load(&path).unwrap_err().to_string().contains("version 9"));
    }
}
