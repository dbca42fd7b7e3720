use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::StoreError;

const MAGIC: &[u8; 4] = b"FBST";
const VERSION: u32 = 1;

/// Statistics of an input graph (or a partition of one): dimensions, edge
/// count, average positive-edge strength, and the per-vertex degree maps
/// used to scale regularization.
///
/// Degrees count positive training edges only; synthetic negatives never
/// contribute. Vertices absent from a map (seen only in held-out splits or
/// as sampled negatives) are treated as degree 1.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GraphStats {
    pub num_rows: u64,
    pub num_cols: u64,
    pub num_edges: u64,
    pub avg_strength: f32,
    pub out_degree: HashMap<u64, u32>,
    pub in_degree: HashMap<u64, u32>,
}

impl GraphStats {
    pub fn out_degree_or_one(&self, id: u64) -> u32 {
        self.out_degree.get(&id).copied().unwrap_or(1)
    }

    pub fn in_degree_or_one(&self, id: u64) -> u32 {
        self.in_degree.get(&id).copied().unwrap_or(1)
    }

    /// Inclusive range of row vertex ids observed in training, used to draw
    /// row endpoints for synthetic negatives.
    pub fn row_id_range(&self) -> Option<(u64, u64)> {
        let min = self.out_degree.keys().min()?;
        let max = self.out_degree.keys().max()?;
        Some((*min, *max))
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.num_rows)?;
        w.write_u64::<LittleEndian>(self.num_cols)?;
        w.write_u64::<LittleEndian>(self.num_edges)?;
        w.write_f32::<LittleEndian>(self.avg_strength)?;
        write_degrees(&mut w, &self.out_degree)?;
        write_degrees(&mut w, &self.in_degree)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let mut r = CountingReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(r.parse_error("bad magic, not a stats file"));
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(r.parse_error(&format!("unsupported stats version {version}")));
        }
        let num_rows = r.read_u64("row count")?;
        let num_cols = r.read_u64("column count")?;
        let num_edges = r.read_u64("edge count")?;
        let avg_strength = r.read_f32("average strength")?;
        let out_degree = read_degrees(&mut r)?;
        let in_degree = read_degrees(&mut r)?;
        Ok(GraphStats {
            num_rows,
            num_cols,
            num_edges,
            avg_strength,
            out_degree,
            in_degree,
        })
    }
}

fn write_degrees<W: Write>(w: &mut W, degrees: &HashMap<u64, u32>) -> Result<(), StoreError> {
    w.write_u64::<LittleEndian>(degrees.len() as u64)?;
    // sorted by id so files are byte-identical across runs
    let mut entries: Vec<(u64, u32)> = degrees.iter().map(|(&id, &d)| (id, d)).collect();
    entries.sort_unstable_by_key(|&(id, _)| id);
    for (id, degree) in entries {
        w.write_u64::<LittleEndian>(id)?;
        w.write_u32::<LittleEndian>(degree)?;
    }
    Ok(())
}

fn read_degrees<R: Read>(r: &mut CountingReader<R>) -> Result<HashMap<u64, u32>, StoreError> {
    let count = r.read_u64("degree entry count")?;
    let mut degrees = HashMap::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let id = r.read_u64("vertex id")?;
        let degree = r.read_u32("degree")?;
        degrees.insert(id, degree);
    }
    Ok(degrees)
}

/// Reader wrapper that tracks the byte offset for parse diagnostics.
pub(crate) struct CountingReader<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        CountingReader { inner, pos: 0 }
    }

    pub fn parse_error(&self, message: &str) -> StoreError {
        StoreError::Parse {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    pub fn read_exact_at(&mut self, buf: &mut [u8], what: &str) -> Result<(), StoreError> {
        let at = self.pos;
        self.inner.read_exact(buf).map_err(|e| StoreError::Parse {
            offset: at,
            message: format!("reading {what}: {e}"),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32, StoreError> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64, StoreError> {
        let mut buf = [0u8; 8];
        self.read_exact_at(&mut buf, what)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn read_f32(&mut self, what: &str) -> Result<f32, StoreError> {
        let mut buf = [0u8; 4];
        self.read_exact_at(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }

    /// True if the stream is exhausted; consumes nothing on false.
    pub fn at_eof(&mut self) -> Result<bool, StoreError>
    where
        R: std::io::BufRead,
    {
        Ok(self.inner.fill_buf()?.is_empty())
    }
}

impl<R: std::io::BufRead> std::io::BufRead for CountingReader<R> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.pos += amt as u64;
        self.inner.consume(amt)
    }
}

impl<R: Read> Read for CountingReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}
