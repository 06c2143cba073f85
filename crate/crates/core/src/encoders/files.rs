//! Precomputed embeddings and feature maps in small little-endian binary
//! formats.
//!
//! Embedding table: `GEMB`, u32 version, u32 dim, u32 count, then `count`
//! names (u32 byte length + UTF-8), then `count × dim` f32 values.
//!
//! Feature map: `GFMP`, u32 version, u32 height, width, dim, stride,
//! image height, image width, then `height × width × dim` f32 values in
//! row-major cell order.

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{EmbeddingVector, ImageEncoder, ImageInput, SpatialFeatureMap, TextEncoder};
use crate::error::{Error, Result};
use crate::tensor::Mat;

const EMB_MAGIC: &[u8; 4] = b"GEMB";
const FMAP_MAGIC: &[u8; 4] = b"GFMP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    names: Vec<String>,
    index: HashMap<String, usize>,
    rows: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut table = Self {
            dim,
            names: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
        };
        for (name, v) in entries {
            if v.len() != dim {
                return Err(Error::Shape(format!("{name:?} has {} values, table dim {dim}", v.len())));
            }
            if table.index.insert(name.clone(), table.names.len()).is_some() {
                return Err(Error::InvalidInput(format!("duplicate entry {name:?}")));
            }
            table.names.push(name);
            table.rows.push(v);
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index.get(name).map(|&i| self.rows[i].as_slice())
    }
}

pub fn write_embedding_table(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(EMB_MAGIC);
    for v in [VERSION, table.dim as u32, table.len() as u32] {
        buf.write_u32::<LittleEndian>(v).expect("vec write");
    }
    for name in &table.names {
        buf.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
        buf.write_all(name.as_bytes()).expect("vec write");
    }
    for row in &table.rows {
        for &x in row {
            buf.write_f32::<LittleEndian>(x as f32).expect("vec write");
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub(crate) fn check_header(r: &mut Cursor<Vec<u8>>, magic: &[u8; 4], expected: u32, what: &'static str) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| Error::format(what, "truncated header"))?;
    if &m != magic {
        return Err(Error::format(what, format!("bad magic {m:?}")));
    }
    let version = read_u32(r, what)?;
    if version != expected {
        return Err(Error::format(what, format!("version {version}, expected {expected}")));
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut Cursor<Vec<u8>>, what: &'static str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(|_| Error::format(what, "truncated"))
}

pub(crate) fn read_f32s(r: &mut Cursor<Vec<u8>>, n: usize, what: &'static str) -> Result<Vec<f64>> {
    let remaining = r.get_ref().len() as u64 - r.position();
    if remaining < 4 * n as u64 {
        return Err(Error::format(what, format!("expected {n} values, {remaining} bytes left")));
    }
    (0..n)
        .map(|_| {
            r.read_f32::<LittleEndian>()
                .map(f64::from)
                .map_err(|_| Error::format(what, "truncated data"))
        })
        .collect()
}

pub fn read_embedding_table(path: &Path) -> Result<EmbeddingTable> {
    const WHAT: &str = "embedding table";
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(bytes);
    check_header(&mut r, EMB_MAGIC, VERSION, WHAT)?;
    let dim = read_u32(&mut r, WHAT)? as usize;
    let count = read_u32(&mut r, WHAT)? as usize;
    let mut names = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = read_u32(&mut r, WHAT)? as usize;
        let remaining = r.get_ref().len() as u64 - r.position();
        if remaining < len as u64 {
            return Err(Error::format(WHAT, "truncated name"));
        }
        let mut s = vec![0u8; len];
        r.read_exact(&mut s).map_err(|_| Error::format(WHAT, "truncated name"))?;
        names.push(String::from_utf8(s).map_err(|e| Error::format(WHAT, e.to_string()))?);
    }
    let data = read_f32s(&mut r, count * dim, WHAT)?;
    let entries = names
        .into_iter()
        .zip(data.chunks(dim.max(1)).map(|c| c.to_vec()))
        .collect();
    EmbeddingTable::new(dim, entries)
}

pub fn write_feature_map(path: &Path, map: &SpatialFeatureMap) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(FMAP_MAGIC);
    let header = [
        VERSION,
        map.height as u32,
        map.width as u32,
        map.dim() as u32,
        map.stride as u32,
        map.image_size.0 as u32,
        map.image_size.1 as u32,
    ];
    for v in header {
        buf.write_u32::<LittleEndian>(v).expect("vec write");
    }
    for &x in map.features.data() {
        buf.write_f32::<LittleEndian>(x as f32).expect("vec write");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: &Path) -> Result<SpatialFeatureMap> {
    const WHAT: &str = "feature map";
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Cursor::new(bytes);
    check_header(&mut r, FMAP_MAGIC, VERSION, WHAT)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r, WHAT)? as usize;
    }
    let [h, w, d, stride, ih, iw] = dims;
    let data = read_f32s(&mut r, h * w * d, WHAT)?;
    SpatialFeatureMap::new(h, w, stride, (ih, iw), Mat::from_vec(h * w, d, data))
}

/// Text encoder backed by a lookup table; unknown text is an error.
#[derive(Debug, Clone)]
pub struct FileTextEncoder {
    table: EmbeddingTable,
}

impl FileTextEncoder {
    pub fn new(table: EmbeddingTable) -> Self {
        Self { table }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_embedding_table(path).map(Self::new)
    }
}

impl TextEncoder for FileTextEncoder {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        let v = self
            .table
            .get(text)
            .ok_or_else(|| Error::Backend(format!("no precomputed embedding for {text:?}")))?;
        EmbeddingVector::unit(v.to_vec())
    }
}

/// Image encoder that loads `<dir>/<image_id>.gfmp`.
#[derive(Debug, Clone)]
pub struct FeatureMapDirectory {
    root: PathBuf,
}

impl FeatureMapDirectory {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.gfmp"))
    }
}

impl ImageEncoder for FeatureMapDirectory {
    fn encode(&self, image: &ImageInput) -> Result<SpatialFeatureMap> {
        match image {
            ImageInput::Precomputed(id) => read_feature_map(&self.path_for(id)),
            ImageInput::Scene(s) => read_feature_map(&self.path_for(&s.image_id)),
            ImageInput::Raster { format, .. } => Err(Error::InvalidInput(format!(
                "feature-map directory cannot decode {format:?} images"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gemb");
        let table = EmbeddingTable::new(
            3,
            vec![("dog".into(), vec![1.0, 0.5, -0.25]), ("red ball".into(), vec![0.0, 2.0, 1.0])],
        )
        .unwrap();
        write_embedding_table(&path, &table).unwrap();
        let back = read_embedding_table(&path).unwrap();
        assert_eq!(back, table);

        let enc = FileTextEncoder::load(&path).unwrap();
        let e = enc.encode("red ball").unwrap();
        let n = 5f64.sqrt();
        assert!((e.values[1] - 2.0 / n).abs() < 1e-6);
        assert!(enc.encode("cat").is_err());
    }

    #[test]
    fn truncated_and_foreign_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.gemb");
        let table = EmbeddingTable::new(2, vec![("a".into(), vec![1.0, 2.0])]).unwrap();
        write_embedding_table(&path, &table).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_embedding_table(&path), Err(Error::Format { .. })));
        fs::write(&path, b"XXXX\x01\0\0\0").unwrap();
        assert!(matches!(read_embedding_table(&path), Err(Error::Format { .. })));
        assert!(matches!(read_feature_map(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn feature_map_round_trip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| i as f64 * 0.5).collect();
        let map = SpatialFeatureMap::new(2, 3, 8, (16, 24), Mat::from_vec(6, 4, data)).unwrap();
        let store = FeatureMapDirectory::new(dir.path());
        write_feature_map(&store.path_for("img1"), &map).unwrap();
        let back = store.encode(&ImageInput::Precomputed("img1".into())).unwrap();
        assert_eq!(back, map);
        assert!(store.encode(&ImageInput::Precomputed("img2".into())).is_err());
    }
}
