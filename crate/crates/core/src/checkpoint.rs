//! DYCK checkpoint files: config snapshot, epoch counter, optimizer step,
//! and length-prefixed named tensor records.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic "DYCK" | version u16 | num_ids u32 | epoch u32 | adam_step u64
//! | config_len u32 | config utf-8 | record_count u32 | records...
//! record: body_len u32 | name_len u16 | name utf-8 | dtype u8 (1 = f64)
//!         | rank u8 | rank x u32 extents | values f64
//! ```
//!
//! Values are stored as raw f64 bits, so a save/load round trip reproduces
//! forward outputs bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DYCK";
pub const CHECKPOINT_VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub num_ids: usize,
    pub epoch: usize,
    pub adam_step: u64,
    /// Keyed by record name; BTreeMap keeps the on-disk order canonical.
    pub records: BTreeMap<String, Record>,
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.num_ids as u32).to_le_bytes())?;
    w.write_all(&(ckpt.epoch as u32).to_le_bytes())?;
    w.write_all(&ckpt.adam_step.to_le_bytes())?;
    let config_text = ckpt.config.render();
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&(ckpt.records.len() as u32).to_le_bytes())?;
    for (name, rec) in &ckpt.records {
        let body_len = 2 + name.len() + 1 + 1 + 4 * rec.shape.len() + 8 * rec.values.len();
        w.write_all(&(body_len as u32).to_le_bytes())?;
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[DTYPE_F64, rec.shape.len() as u8])?;
        for &d in &rec.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &rec.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::FormatError(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let num_ids = read_u32(&mut r)? as usize;
    let epoch = read_u32(&mut r)? as usize;
    let adam_step = read_u64(&mut r)?;
    let config_len = read_u32(&mut r)? as usize;
    let mut config_bytes = vec![0u8; config_len];
    r.read_exact(&mut config_bytes)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::FormatError("config snapshot is not UTF-8".into()))?;
    let config = TrainConfig::parse(&config_text)?;

    let count = read_u32(&mut r)? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let body_len = read_u32(&mut r)? as usize;
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::FormatError("record name is not UTF-8".into()))?;
        let mut meta = [0u8; 2];
        r.read_exact(&mut meta)?;
        let (dtype, rank) = (meta[0], meta[1] as usize);
        if dtype != DTYPE_F64 {
            return Err(Error::FormatError(format!(
                "record '{name}' has unsupported dtype {dtype}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let expected_body = 2 + name_len + 2 + 4 * rank + 8 * numel;
        if body_len != expected_body {
            return Err(Error::FormatError(format!(
                "record '{name}' length {body_len} does not match shape {shape:?}"
            )));
        }
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        if records.insert(name.clone(), Record { shape, values }).is_some() {
            return Err(Error::FormatError(format!("duplicate record '{name}'")));
        }
    }
    Ok(Checkpoint {
        config,
        num_ids,
        epoch,
        adam_step,
        records,
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dyck");
        let mut records = BTreeMap::new();
        records.insert(
            "w".to_string(),
            Record {
                shape: vec![2, 2],
                values: vec![0.1, -3.5e-200, f64::MIN_POSITIVE, 7.0],
            },
        );
        let ckpt = Checkpoint {
            config: TrainConfig::default(),
            num_ids: 8,
            epoch: 12,
            adam_step: 360,
            records,
        };
        save(&path, &ckpt).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.num_ids, 8);
        assert_eq!(loaded.epoch, 12);
        assert_eq!(loaded.adam_step, 360);
        assert_eq!(loaded.config.render(), ckpt.config.render());
        let w = &loaded.records["w"];
        assert_eq!(w.shape, vec![2, 2]);
        for (a, b) in w.values.iter().zip(&ckpt.records["w"].values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dyck");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&99u16.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 16]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load(&path),
            Err(Error::CheckpointVersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.dyck");
        std::fs::write(&path, b"NOPE\x01\x00").unwrap();
        assert!(matches!(load(&path), Err(Error::FormatError(_))));
    }
}
