//! On-disk spill format.
//!
//! A spill file is the raw concatenation of object payloads. Next to each
//! `<name>.bin` sits `<name>.idx`, one JSON object per line:
//! `{"object_id":"<32 hex>","offset":0,"length":10240,"checksum":123}`,
//! where `checksum` is FNV-1a 64 over the payload bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bytes::Bytes;
use serde::{Deserialize, Serialize};

use crate::checksum::fnv1a64;
use crate::error::{Error, Result};
use crate::ids::ObjectId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpillEntry {
    pub object_id: ObjectId,
    pub offset: u64,
    pub length: u64,
    pub checksum: u64,
}

#[derive(Debug, Clone)]
pub struct SpillFile {
    pub file_id: u64,
    pub path: PathBuf,
    pub entries: Vec<SpillEntry>,
    pub total_bytes: u64,
}

/// Where one spilled object lives.
#[derive(Debug, Clone)]
pub struct SpillAddress {
    pub file_id: u64,
    pub path: Arc<PathBuf>,
    pub offset: u64,
    pub length: u64,
    pub checksum: u64,
}

pub fn index_path(data: &Path) -> PathBuf {
    data.with_extension("idx")
}

/// Writes `objects` back to back into `dir/spill-<file_id>.bin` plus its index.
pub fn write_spill_file(
    dir: &Path,
    file_id: u64,
    objects: &[(ObjectId, Bytes)],
) -> Result<SpillFile> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("spill-{file_id:06}.bin"));
    let mut data = BufWriter::with_capacity(1 << 20, File::create(&path)?);
    let mut entries = Vec::with_capacity(objects.len());
    let mut offset = 0u64;
    for (id, bytes) in objects {
        data.write_all(bytes)?;
        entries.push(SpillEntry {
            object_id: *id,
            offset,
            length: bytes.len() as u64,
            checksum: fnv1a64(bytes),
        });
        offset += bytes.len() as u64;
    }
    data.flush()?;
    let mut idx = BufWriter::new(File::create(index_path(&path))?);
    for e in &entries {
        serde_json::to_writer(&mut idx, e).map_err(|e| Error::Io(e.to_string()))?;
        idx.write_all(b"\n")?;
    }
    idx.flush()?;
    Ok(SpillFile {
        file_id,
        path,
        entries,
        total_bytes: offset,
    })
}

pub fn read_index(data: &Path) -> Result<Vec<SpillEntry>> {
    let r = BufReader::new(File::open(index_path(data))?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Io(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Reads one object back and verifies its checksum.
pub fn read_object(id: ObjectId, addr: &SpillAddress) -> Result<Bytes> {
    let mut f = File::open(addr.path.as_ref()).map_err(|_| Error::SpillFileCorrupt(id))?;
    f.seek(SeekFrom::Start(addr.offset))
        .map_err(|_| Error::SpillFileCorrupt(id))?;
    let mut buf = vec![0u8; addr.length as usize];
    f.read_exact(&mut buf)
        .map_err(|_| Error::SpillFileCorrupt(id))?;
    if fnv1a64(&buf) != addr.checksum {
        return Err(Error::SpillFileCorrupt(id));
    }
    Ok(Bytes::from(buf))
}

/// Splits a victim list into file-sized groups. Every group reaches
/// `threshold` bytes except when the whole batch is smaller; a remainder
/// below the threshold is folded into the previous group. A zero threshold
/// yields one group per object.
pub fn fuse_groups(sizes: &[u64], threshold: u64) -> Vec<std::ops::Range<usize>> {
    if threshold == 0 {
        return (0..sizes.len()).map(|i| i..i + 1).collect();
    }
    let mut groups: Vec<std::ops::Range<usize>> = Vec::new();
    let mut start = 0;
    let mut acc = 0u64;
    for (i, &s) in sizes.iter().enumerate() {
        acc += s;
        if acc >= threshold {
            groups.push(start..i + 1);
            start = i + 1;
            acc = 0;
        }
    }
    if start < sizes.len() {
        match groups.last_mut() {
            Some(last) => last.end = sizes.len(),
            None => groups.push(start..sizes.len()),
        }
    }
    groups
}
