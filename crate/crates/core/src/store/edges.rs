use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Seek, SeekFrom, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use super::stats::CountingReader;
use super::StoreError;

const MAGIC: &[u8; 4] = b"FBED";
const VERSION: u32 = 1;

/// One observed (or synthesized) entry of the interaction matrix: a
/// directed edge from row vertex `i` to column vertex `j` with strength `a`
/// and error weight `w`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u64,
    pub j: u64,
    pub a: f32,
    pub w: f32,
    /// True for on-the-fly generated negative examples; implies `a == 0`.
    /// Never persisted: edge files hold real observations only.
    pub synthetic_negative: bool,
}

impl Edge {
    pub fn new(i: u64, j: u64, a: f32, w: f32) -> Self {
        Edge {
            i,
            j,
            a,
            w,
            synthetic_negative: false,
        }
    }

    pub fn negative(i: u64, j: u64, w: f32) -> Self {
        Edge {
            i,
            j,
            a: 0.0,
            w,
            synthetic_negative: true,
        }
    }
}

/// Streaming writer for the binary edge-partition format: magic "FBED",
/// u32 version, u64 count, then (u64 i, u64 j, f32 a, f32 w) records,
/// little-endian. The count is patched in on `finish`.
pub struct EdgeFileWriter {
    out: BufWriter<File>,
    count: u64,
}

impl EdgeFileWriter {
    pub fn create(path: &Path) -> Result<Self, StoreError> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_u32::<LittleEndian>(VERSION)?;
        out.write_u64::<LittleEndian>(0)?; // count placeholder
        Ok(EdgeFileWriter { out, count: 0 })
    }

    pub fn write(&mut self, edge: &Edge) -> Result<(), StoreError> {
        self.out.write_u64::<LittleEndian>(edge.i)?;
        self.out.write_u64::<LittleEndian>(edge.j)?;
        self.out.write_f32::<LittleEndian>(edge.a)?;
        self.out.write_f32::<LittleEndian>(edge.w)?;
        self.count += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<u64, StoreError> {
        self.out.flush()?;
        let file = self.out.get_mut();
        file.seek(SeekFrom::Start(8))?;
        file.write_u64::<LittleEndian>(self.count)?;
        file.flush()?;
        Ok(self.count)
    }
}

/// Streaming reader for the FBED format. Holds only a fixed read buffer;
/// peak memory does not depend on the record count. Re-open the file for
/// another pass.
pub struct EdgeFileReader {
    r: CountingReader<BufReader<File>>,
    declared: u64,
    read: u64,
}

impl EdgeFileReader {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let mut r = CountingReader::new(BufReader::new(File::open(path)?));
        let mut magic = [0u8; 4];
        r.read_exact_at(&mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(r.parse_error("bad magic, not an edge file"));
        }
        let version = r.read_u32("version")?;
        if version != VERSION {
            return Err(r.parse_error(&format!("unsupported edge file version {version}")));
        }
        let declared = r.read_u64("edge count")?;
        Ok(EdgeFileReader {
            r,
            declared,
            read: 0,
        })
    }

    /// Number of edges the header declares.
    pub fn declared_count(&self) -> u64 {
        self.declared
    }
}

impl Iterator for EdgeFileReader {
    type Item = Result<Edge, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.declared {
            // a well-formed file ends exactly here
            return match self.r.at_eof() {
                Ok(true) => None,
                Ok(false) => Some(Err(self.r.parse_error("trailing bytes after declared edges"))),
                Err(e) => Some(Err(e)),
            };
        }
        let record = (|| {
            let i = self.r.read_u64("edge source")?;
            let j = self.r.read_u64("edge destination")?;
            let a = self.r.read_f32("edge strength")?;
            let w = self.r.read_f32("edge weight")?;
            Ok(Edge::new(i, j, a, w))
        })();
        self.read += 1;
        Some(record)
    }
}

/// Reader for the tab-separated text format `i<TAB>j<TAB>a[<TAB>w]`,
/// with `w` defaulting to 1.0. Blank lines are skipped.
pub struct TsvEdgeReader {
    lines: std::io::Lines<BufReader<File>>,
    line_no: u64,
}

impl TsvEdgeReader {
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        Ok(TsvEdgeReader {
            lines: BufReader::new(File::open(path)?).lines(),
            line_no: 0,
        })
    }

    fn parse(line: &str, line_no: u64) -> Result<Edge, StoreError> {
        let bad = |message: &str| StoreError::ParseLine {
            line: line_no,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let i = fields
            .next()
            .ok_or_else(|| bad("missing source id"))?
            .trim()
            .parse::<u64>()
            .map_err(|e| bad(&format!("source id: {e}")))?;
        let j = fields
            .next()
            .ok_or_else(|| bad("missing destination id"))?
            .trim()
            .parse::<u64>()
            .map_err(|e| bad(&format!("destination id: {e}")))?;
        let a = fields
            .next()
            .ok_or_else(|| bad("missing strength"))?
            .trim()
            .parse::<f32>()
            .map_err(|e| bad(&format!("strength: {e}")))?;
        let w = match fields.next() {
            Some(field) => field
                .trim()
                .parse::<f32>()
                .map_err(|e| bad(&format!("weight: {e}")))?,
            None => 1.0,
        };
        Ok(Edge::new(i, j, a, w))
    }
}

impl Iterator for TsvEdgeReader {
    type Item = Result<Edge, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(line) => line,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            return Some(Self::parse(&line, self.line_no));
        }
    }
}

/// Opens an edge file in either supported format, sniffing the FBED magic.
pub fn open_edge_file(path: &Path) -> Result<Box<dyn Iterator<Item = Result<Edge, StoreError>>>, StoreError> {
    let mut header = [0u8; 4];
    let is_binary = {
        use std::io::Read;
        let mut f = File::open(path)?;
        match f.read_exact(&mut header) {
            Ok(()) => &header == MAGIC,
            Err(_) => false,
        }
    };
    if is_binary {
        Ok(Box::new(EdgeFileReader::open(path)?))
    } else {
        Ok(Box::new(TsvEdgeReader::open(path)?))
    }
}

/// Collects a whole edge file into memory. Intended for held-out splits and
/// tests, not for the training stream.
pub fn read_all_edges(path: &Path) -> Result<Vec<Edge>, StoreError> {
    open_edge_file(path)?.collect()
}
