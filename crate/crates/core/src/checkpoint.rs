//! Binary detector checkpoints.
//!
//! Layout, little-endian: magic `GCKP`, u32 version, u32 length plus the
//! JSON [`DetectorConfig`], u32 array count, then per array a u32 name length,
//! the UTF-8 name, u32 rows, u32 cols and `rows · cols` f32 values.
//! Loading rebuilds the detector from the echoed config and requires every
//! named array to be present with its expected shape.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::encoders::files::{check_header, read_f32s, read_u32};
use crate::error::{Error, Result};
use crate::model::{Detector, DetectorConfig};
use crate::tensor::Mat;

const MAGIC: &[u8; 4] = b"GCKP";
const VERSION: u32 = 1;
const WHAT: &str = "checkpoint";

pub fn encode_checkpoint(detector: &Detector) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    let config = serde_json::to_vec(&detector.config).map_err(|e| Error::format(WHAT, e.to_string()))?;
    buf.write_u32::<LittleEndian>(config.len() as u32).expect("vec write");
    buf.extend_from_slice(&config);
    let named = detector.params.named();
    buf.write_u32::<LittleEndian>(named.len() as u32).expect("vec write");
    for (_, name, m) in named {
        buf.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
        buf.extend_from_slice(name.as_bytes());
        buf.write_u32::<LittleEndian>(m.rows() as u32).expect("vec write");
        buf.write_u32::<LittleEndian>(m.cols() as u32).expect("vec write");
        for &v in m.data() {
            buf.write_f32::<LittleEndian>(v as f32).expect("vec write");
        }
    }
    Ok(buf)
}

pub fn decode_checkpoint(bytes: Vec<u8>) -> Result<Detector> {
    let mut r = Cursor::new(bytes);
    check_header(&mut r, MAGIC, VERSION, WHAT)?;
    let config_len = read_u32(&mut r, WHAT)? as usize;
    let config_bytes = read_bytes(&mut r, config_len)?;
    let config: DetectorConfig =
        serde_json::from_slice(&config_bytes).map_err(|e| Error::format(WHAT, format!("config: {e}")))?;
    let mut detector = Detector::new(config)?;

    let count = read_u32(&mut r, WHAT)? as usize;
    let mut arrays: HashMap<String, Mat> = HashMap::new();
    for _ in 0..count {
        let len = read_u32(&mut r, WHAT)? as usize;
        let name = String::from_utf8(read_bytes(&mut r, len)?).map_err(|_| Error::format(WHAT, "name is not UTF-8"))?;
        let rows = read_u32(&mut r, WHAT)? as usize;
        let cols = read_u32(&mut r, WHAT)? as usize;
        let data = read_f32s(&mut r, rows * cols, WHAT)?;
        if arrays.insert(name.clone(), Mat::from_vec(rows, cols, data)).is_some() {
            return Err(Error::format(WHAT, format!("array {name} appears twice")));
        }
    }
    if r.position() != r.get_ref().len() as u64 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    for (_, name, slot) in detector.params.named_mut() {
        let m = arrays
            .remove(&name)
            .ok_or_else(|| Error::format(WHAT, format!("missing array {name}")))?;
        if m.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "checkpoint array {name} is {:?}, config expects {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    if let Some(extra) = arrays.keys().min() {
        return Err(Error::format(WHAT, format!("unexpected array {extra}")));
    }
    Ok(detector)
}

pub fn write_checkpoint(path: &Path, detector: &Detector) -> Result<()> {
    let bytes = encode_checkpoint(detector)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Detector> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(bytes)
}

/// The detector as it reads back from a checkpoint: every parameter
/// rounded to f32.
pub fn round_trip(detector: &Detector) -> Result<Detector> {
    decode_checkpoint(encode_checkpoint(detector)?)
}

fn read_bytes(r: &mut Cursor<Vec<u8>>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if remaining < n as u64 {
        return Err(Error::format(WHAT, "truncated"));
    }
    let mut out = vec![0u8; n];
    r.read_exact(&mut out).map_err(|_| Error::format(WHAT, "truncated"))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::QueryMode;

    fn small() -> Detector {
        Detector::new(DetectorConfig {
            dim: 8,
            top_k: 4,
            query_mode: QueryMode::FullName,
            init_seed: 3,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_rounds_to_f32_and_keeps_config() {
        let det = small();
        let back = round_trip(&det).unwrap();
        assert_eq!(back.config, det.config);
        for ((_, n1, a), (_, n2, b)) in det.params.named().into_iter().zip(back.params.named()) {
            assert_eq!(n1, n2);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*y, f64::from(*x as f32));
            }
        }
        // a second pass is exact
        let again = round_trip(&back).unwrap();
        assert_eq!(again.params, back.params);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let det = small();
        write_checkpoint(&path, &det).unwrap();
        assert_eq!(read_checkpoint(&path).unwrap().params, round_trip(&det).unwrap().params);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_checkpoint(&small()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(bad).is_err());
        assert!(decode_checkpoint(bytes[..bytes.len() - 3].to_vec()).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint(long).is_err());
    }

    #[test]
    fn config_echo_guards_shapes() {
        let det = small();
        let mut bytes = encode_checkpoint(&det).unwrap();
        // swap the echoed config for one with a wider model
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut cfg = det.config.clone();
        cfg.dim = 9;
        let json = serde_json::to_vec(&cfg).unwrap();
        assert_eq!(json.len(), len);
        bytes[12..12 + len].copy_from_slice(&json);
        assert!(matches!(decode_checkpoint(bytes), Err(Error::Shape(_))));
    }
}
