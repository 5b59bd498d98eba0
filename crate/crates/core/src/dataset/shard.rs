//! Binary shard files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! header   "SVQA" | u32 version | u32 canvas | u32 max_len | u32 record count
//! record   u32 length of the rest of the record
//!          u32 scene seed | u32 caption seed | u8 label | u8 token count
//!          u8[max_len] token ids | u8[canvas * canvas * 3] RGB pixels
//! trailer  SHA-256 of everything before it (32 bytes)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::{DatasetError, Example};
use crate::lang::Encoded;
use crate::scene::Image;

pub const MAGIC: &[u8; 4] = b"SVQA";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;
const DIGEST_LEN: u64 = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub canvas: u32,
    pub max_len: u32,
    pub count: u32,
}

impl ShardHeader {
    pub fn new(canvas: usize, max_len: usize, count: usize) -> Self {
        ShardHeader {
            version: FORMAT_VERSION,
            canvas: canvas as u32,
            max_len: max_len as u32,
            count: count as u32,
        }
    }

    /// Bytes following the length prefix of each record.
    pub fn record_body_len(&self) -> usize {
        4 + 4 + 1 + 1 + self.max_len as usize + (self.canvas as usize).pow(2) * 3
    }

    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[0..4].copy_from_slice(MAGIC);
        b[4..8].copy_from_slice(&self.version.to_le_bytes());
        b[8..12].copy_from_slice(&self.canvas.to_le_bytes());
        b[12..16].copy_from_slice(&self.max_len.to_le_bytes());
        b[16..20].copy_from_slice(&self.count.to_le_bytes());
        b
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Streams records into a shard, hashing as it goes.
pub struct ShardWriter {
    out: BufWriter<File>,
    hasher: Sha256,
    header: ShardHeader,
    written: u32,
    path: PathBuf,
}

impl ShardWriter {
    pub fn create(path: &Path, header: ShardHeader) -> Result<Self, DatasetError> {
        let mut w = ShardWriter {
            out: BufWriter::new(File::create(path)?),
            hasher: Sha256::new(),
            header,
            written: 0,
            path: path.to_path_buf(),
        };
        w.put(&header.to_bytes())?;
        Ok(w)
    }

    fn put(&mut self, bytes: &[u8]) -> Result<(), DatasetError> {
        self.hasher.update(bytes);
        self.out.write_all(bytes)?;
        Ok(())
    }

    pub fn write(&mut self, ex: &Example) -> Result<(), DatasetError> {
        let h = self.header;
        if ex.image.width != h.canvas as usize
            || ex.image.height != h.canvas as usize
            || ex.tokens.ids.len() != h.max_len as usize
        {
            return Err(DatasetError::Shape(format!(
                "example does not fit shard geometry {}px / {} tokens",
                h.canvas, h.max_len
            )));
        }
        if self.written >= h.count {
            return Err(DatasetError::Shape("more records than declared".into()));
        }
        let mut rec = Vec::with_capacity(4 + h.record_body_len());
        rec.extend_from_slice(&(h.record_body_len() as u32).to_le_bytes());
        rec.extend_from_slice(&ex.scene_seed.to_le_bytes());
        rec.extend_from_slice(&ex.caption_seed.to_le_bytes());
        rec.push(ex.label as u8);
        rec.push(ex.tokens.len as u8);
        rec.extend_from_slice(&ex.tokens.ids);
        rec.extend_from_slice(&ex.image.data);
        self.put(&rec)?;
        self.written += 1;
        Ok(())
    }

    /// Seals the shard and returns its hex SHA-256.
    pub fn finish(mut self) -> Result<String, DatasetError> {
        if self.written != self.header.count {
            return Err(DatasetError::Shape(format!(
                "{}: declared {} records, wrote {}",
                self.path.display(),
                self.header.count,
                self.written
            )));
        }
        let digest = self.hasher.finalize();
        self.out.write_all(&digest)?;
        self.out.flush()?;
        Ok(hex::encode(digest))
    }
}

/// Verifies a shard's trailer and returns its hex digest.
pub fn verify_checksum(path: &Path) -> Result<String, DatasetError> {
    let mut f = File::open(path)?;
    let total = f.metadata()?.len();
    if total < HEADER_LEN + DIGEST_LEN {
        return Err(DatasetError::Truncated {
            path: path.to_path_buf(),
            record: 0,
        });
    }
    let mut hasher = Sha256::new();
    let mut remaining = total - DIGEST_LEN;
    let mut buf = vec![0u8; 1 << 16];
    {
        let mut r = BufReader::new(&mut f);
        while remaining > 0 {
            let n = remaining.min(buf.len() as u64) as usize;
            r.read_exact(&mut buf[..n])?;
            hasher.update(&buf[..n]);
            remaining -= n as u64;
        }
    }
    f.seek(SeekFrom::Start(total - DIGEST_LEN))?;
    let mut stored = [0u8; DIGEST_LEN as usize];
    f.read_exact(&mut stored)?;
    let digest = hasher.finalize();
    if digest.as_slice() != stored {
        return Err(DatasetError::Checksum {
            path: path.to_path_buf(),
        });
    }
    Ok(hex::encode(digest))
}

/// Streaming record reader. Opening verifies the checksum and the version
/// before any record is handed out.
pub struct ShardReader {
    input: BufReader<File>,
    header: ShardHeader,
    next: u32,
    path: PathBuf,
    digest: String,
}

impl ShardReader {
    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let digest = verify_checksum(path)?;
        let mut input = BufReader::new(File::open(path)?);
        let mut hb = [0u8; HEADER_LEN as usize];
        input.read_exact(&mut hb)?;
        if &hb[0..4] != MAGIC {
            return Err(DatasetError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        let header = ShardHeader {
            version: u32_at(&hb, 4),
            canvas: u32_at(&hb, 8),
            max_len: u32_at(&hb, 12),
            count: u32_at(&hb, 16),
        };
        if header.version != FORMAT_VERSION {
            return Err(DatasetError::Version {
                found: header.version,
                expected: FORMAT_VERSION,
            });
        }
        Ok(ShardReader {
            input,
            header,
            next: 0,
            path: path.to_path_buf(),
            digest,
        })
    }

    pub fn header(&self) -> ShardHeader {
        self.header
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn truncated(&self) -> DatasetError {
        DatasetError::Truncated {
            path: self.path.clone(),
            record: self.next as usize,
        }
    }

    fn read_record(&mut self) -> Result<Example, DatasetError> {
        let h = self.header;
        let mut lb = [0u8; 4];
        self.input.read_exact(&mut lb).map_err(|_| self.truncated())?;
        let body_len = u32::from_le_bytes(lb) as usize;
        if body_len != h.record_body_len() {
            return Err(self.truncated());
        }
        let mut body = vec![0u8; body_len];
        self.input.read_exact(&mut body).map_err(|_| self.truncated())?;
        // The trailer digest follows the last record; a short record would
        // otherwise silently consume it.
        if self.next + 1 == h.count {
            let pos = self.input.stream_position()?;
            let total = self.input.get_ref().metadata()?.len();
            if pos + DIGEST_LEN != total {
                return Err(self.truncated());
            }
        }
        let max_len = h.max_len as usize;
        let canvas = h.canvas as usize;
        let len = body[9] as usize;
        if len > max_len {
            return Err(DatasetError::Shape(format!(
                "record {} declares {len} tokens > {max_len}",
                self.next
            )));
        }
        Ok(Example {
            scene_seed: u32_at(&body, 0),
            caption_seed: u32_at(&body, 4),
            label: body[8] != 0,
            tokens: Encoded {
                ids: body[10..10 + max_len].to_vec(),
                len,
            },
            image: Image {
                width: canvas,
                height: canvas,
                data: body[10 + max_len..].to_vec(),
            },
        })
    }
}

impl Iterator for ShardReader {
    type Item = Result<Example, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.header.count {
            return None;
        }
        let r = self.read_record();
        self.next += 1;
        if r.is_err() {
            // Stop after the first error.
            self.next = self.header.count;
        }
        Some(r)
    }
}

/// Writes a complete shard in one call.
pub fn write_examples(
    path: &Path,
    canvas: usize,
    max_len: usize,
    examples: &[Example],
) -> Result<String, DatasetError> {
    let mut w = ShardWriter::create(path, ShardHeader::new(canvas, max_len, examples.len()))?;
    for ex in examples {
        w.write(ex)?;
    }
    w.finish()
}

/// Reads every record of a shard.
pub fn read_examples(path: &Path) -> Result<Vec<Example>, DatasetError> {
    ShardReader::open(path)?.collect()
}
