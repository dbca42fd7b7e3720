use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::model::{FactorLookup, GlobalBias};

use super::stats::CountingReader;
use super::StoreError;

const MAGIC: &[u8; 4] = b"FBFM";
const VERSION: u32 = 1;

/// Writes factor vectors to the binary factor-matrix format: magic "FBFM",
/// u32 version, u32 width, u64 count, then (u64 id, width x f32) records,
/// little-endian, in the order given.
pub fn save_factor_matrix<'a>(
    path: &Path,
    width: usize,
    entries: impl Iterator<Item = (u64, &'a [f32])>,
) -> Result<u64, StoreError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    out.write_u32::<LittleEndian>(width as u32)?;
    out.write_u64::<LittleEndian>(0)?;
    let mut count = 0u64;
    for (id, vector) in entries {
        if vector.len() != width {
            return Err(StoreError::WidthMismatch {
                expected: width,
                got: vector.len(),
            });
        }
        out.write_u64::<LittleEndian>(id)?;
        for &x in vector {
            out.write_f32::<LittleEndian>(x)?;
        }
        count += 1;
    }
    out.flush()?;
    let file = out.get_mut();
    use std::io::{Seek, SeekFrom};
    file.seek(SeekFrom::Start(12))?;
    file.write_u64::<LittleEndian>(count)?;
    file.flush()?;
    Ok(count)
}

/// A factor matrix loaded back from an export file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedFactors {
    pub width: usize,
    pub vectors: HashMap<u64, Vec<f32>>,
}

impl FactorLookup for ExportedFactors {
    fn vector(&self, id: u64) -> Option<&[f32]> {
        self.vectors.get(&id).map(|v| v.as_slice())
    }

    fn for_each_vector(&self, f: &mut dyn FnMut(u64, &[f32])) {
        for (id, v) in &self.vectors {
            f(*id, v);
        }
    }
}

pub fn load_factor_matrix(path: &Path) -> Result<ExportedFactors, StoreError> {
    let mut r = CountingReader::new(BufReader::new(File::open(path)?));
    let mut magic = [0u8; 4];
    r.read_exact_at(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(r.parse_error("bad magic, not a factor matrix file"));
    }
    let version = r.read_u32("version")?;
    if version != VERSION {
        return Err(r.parse_error(&format!("unsupported factor matrix version {version}")));
    }
    let width = r.read_u32("width")? as usize;
    let count = r.read_u64("vector count")?;
    let mut vectors = HashMap::with_capacity(count.min(1 << 24) as usize);
    for _ in 0..count {
        let id = r.read_u64("vertex id")?;
        let mut vector = vec![0.0f32; width];
        for slot in vector.iter_mut() {
            *slot = r.read_f32("factor value")?;
        }
        vectors.insert(id, vector);
    }
    Ok(ExportedFactors { width, vectors })
}

#[derive(Serialize, Deserialize)]
struct GlobalBiasSidecar {
    g: Vec<f32>,
}

/// Saves the per-model global bias values as a small JSON sidecar.
pub fn save_global_bias(path: &Path, g: &GlobalBias) -> Result<(), StoreError> {
    let sidecar = GlobalBiasSidecar {
        g: g.values().to_vec(),
    };
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut f, &sidecar).map_err(std::io::Error::other)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

pub fn load_global_bias(path: &Path) -> Result<GlobalBias, StoreError> {
    let f = BufReader::new(File::open(path)?);
    let sidecar: GlobalBiasSidecar =
        serde_json::from_reader(f).map_err(std::io::Error::other)?;
    Ok(GlobalBias::from_values(sidecar.g))
}
