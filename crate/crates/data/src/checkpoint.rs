//! Versioned binary surfel checkpoints.
//!
//! Layout (all little-endian): magic `2GSR`, `u32` version (currently 1),
//! `u32` max SH degree, `u64` surfel count, then per surfel
//! `f32 mu[3]`, `f32 quat[4]`, `f32 log_scale[2]`, `f32 raw_opacity`,
//! `f32 sh[3 * (deg + 1)^2]` (RGB triples in basis order), `u64 id`,
//! `u8 flags` (bit 0 = high-error, bit 1 = clone); finally a `u32`
//! length-prefixed JSON block with run metadata and the active SH degree.
//! Parameters are stored as `f32`, so a write -> read -> write cycle is
//! byte-identical.

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::path::Path;

use surfelsplat_core::sh::MAX_DEGREE;
use surfelsplat_core::surfel::sh_coeff_count;
use surfelsplat_core::{Surfel, SurfelSet};

use crate::DataError;

const MAGIC: [u8; 4] = *b"2GSR";
const VERSION: u32 = 1;

/// Run state stored alongside the surfels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: u32,
    pub iteration: u64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MetaBlock {
    #[serde(flatten)]
    meta: CheckpointMeta,
    active_sh_degree: usize,
}

/// Serializes the set and metadata to `path`.
pub fn checkpoint_write(
    set: &SurfelSet,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<(), DataError> {
    let path = path.as_ref();
    let n_coeffs = sh_coeff_count(set.max_sh_degree);
    let mut buf: Vec<u8> = Vec::with_capacity(32 + set.len() * (4 * (10 + 3 * n_coeffs) + 9));
    buf.extend_from_slice(&MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(set.max_sh_degree as u32).expect("vec write");
    buf.write_u64::<LittleEndian>(set.len() as u64).expect("vec write");
    for s in &set.surfels {
        if s.sh.len() != n_coeffs {
            return Err(DataError::Checkpoint(format!(
                "surfel {} has {} sh coefficients, set degree {} needs {}",
                s.id,
                s.sh.len(),
                set.max_sh_degree,
                n_coeffs
            )));
        }
        for k in 0..3 {
            buf.write_f32::<LittleEndian>(s.mu[k] as f32).expect("vec write");
        }
        for q in s.quat {
            buf.write_f32::<LittleEndian>(q as f32).expect("vec write");
        }
        for l in s.log_scale {
            buf.write_f32::<LittleEndian>(l as f32).expect("vec write");
        }
        buf.write_f32::<LittleEndian>(s.raw_opacity as f32).expect("vec write");
        for coeff in &s.sh {
            for c in coeff {
                buf.write_f32::<LittleEndian>(*c as f32).expect("vec write");
            }
        }
        buf.write_u64::<LittleEndian>(s.id).expect("vec write");
        let flags = (s.heg as u8) | ((s.is_clone as u8) << 1);
        buf.push(flags);
    }
    let block = MetaBlock { meta: *meta, active_sh_degree: set.active_sh_degree };
    let json = serde_json::to_vec(&block)
        .map_err(|source| DataError::Json { path: path.into(), source })?;
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    std::fs::write(path, buf).map_err(DataError::io(path))
}

/// Bounds-checked little-endian cursor; errors report the failing offset.
struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        if self.pos + n > self.buf.len() {
            return Err(DataError::Checkpoint(format!(
                "truncated file: {what} needs {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8, DataError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, DataError> {
        Ok(self.take(4, what)?.read_u32::<LittleEndian>().expect("sized"))
    }

    fn u64(&mut self, what: &str) -> Result<u64, DataError> {
        Ok(self.take(8, what)?.read_u64::<LittleEndian>().expect("sized"))
    }

    fn f32(&mut self, what: &str) -> Result<f64, DataError> {
        Ok(self.take(4, what)?.read_f32::<LittleEndian>().expect("sized") as f64)
    }
}

/// Reads a checkpoint back into a surfel set and its metadata.
pub fn checkpoint_read(path: impl AsRef<Path>) -> Result<(SurfelSet, CheckpointMeta), DataError> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(DataError::io(path))?;
    let mut cur = Cursor { buf: &bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(DataError::Checkpoint(format!("bad magic {magic:02x?}, expected \"2GSR\"")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(DataError::Checkpoint(format!(
            "unsupported version {version} (this build reads version {VERSION})"
        )));
    }
    let degree = cur.u32("sh degree")? as usize;
    if degree > MAX_DEGREE {
        return Err(DataError::Checkpoint(format!(
            "sh degree {degree} exceeds the supported maximum {MAX_DEGREE}"
        )));
    }
    let count = cur.u64("surfel count")? as usize;
    let n_coeffs = sh_coeff_count(degree);
    let per_surfel = 4 * (10 + 3 * n_coeffs) + 8 + 1;
    let need = count.checked_mul(per_surfel).ok_or_else(|| {
        DataError::Checkpoint(format!("surfel count {count} overflows the format"))
    })?;
    if cur.pos + need > bytes.len() {
        return Err(DataError::Checkpoint(format!(
            "truncated file: {count} surfels need {need} bytes at offset {}, file has {}",
            cur.pos,
            bytes.len()
        )));
    }
    let mut surfels = Vec::with_capacity(count);
    for i in 0..count {
        let what = format!("surfel {i}");
        let mu = Vector3::new(cur.f32(&what)?, cur.f32(&what)?, cur.f32(&what)?);
        let mut quat = [0.0; 4];
        for q in &mut quat {
            *q = cur.f32(&what)?;
        }
        let log_scale = [cur.f32(&what)?, cur.f32(&what)?];
        let raw_opacity = cur.f32(&what)?;
        let mut sh = Vec::with_capacity(n_coeffs);
        for _ in 0..n_coeffs {
            sh.push([cur.f32(&what)?, cur.f32(&what)?, cur.f32(&what)?]);
        }
        let id = cur.u64(&what)?;
        let flags = cur.u8(&what)?;
        surfels.push(Surfel {
            mu,
            quat,
            log_scale,
            raw_opacity,
            sh,
            id,
            heg: flags & 1 != 0,
            is_clone: flags & 2 != 0,
        });
    }
    let json_len = cur.u32("metadata length")? as usize;
    let json = cur.take(json_len, "metadata block")?;
    let block: MetaBlock = serde_json::from_slice(json)
        .map_err(|source| DataError::Json { path: path.into(), source })?;
    if block.active_sh_degree > degree {
        return Err(DataError::Checkpoint(format!(
            "active sh degree {} exceeds stored degree {degree}",
            block.active_sh_degree
        )));
    }
    let set = SurfelSet::from_surfels(surfels, degree, block.active_sh_degree);
    set.validate()?;
    Ok((set, block.meta))
}
