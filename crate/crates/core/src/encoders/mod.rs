//! Text and image encoders.
//!
//! Text encoders are frozen and return unit vectors. The trainable
//! [`ProjectionHead`] sits on top of the frozen text encoder to produce the
//! refined full-name embeddings used for attribute discrimination. Image
//! encoders return a dense [`SpatialFeatureMap`].

pub(crate) mod files;
mod synthetic;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Mat};
use crate::vocabulary::FineGrainedClass;

pub use files::{
    read_embedding_table, read_feature_map, write_embedding_table, write_feature_map,
    EmbeddingTable, FeatureMapDirectory, FileTextEncoder,
};
pub use synthetic::{
    concept_direction, PlantedObject, PlantedPatch, SceneSpec, SyntheticImageConfig,
    SyntheticImageEncoder, SyntheticTextConfig, SyntheticTextEncoder,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl EmbeddingVector {
    /// Normalizes `values`; fails on a zero vector.
    pub fn unit(values: Vec<f64>) -> Result<Self> {
        let values = tensor::normalized(&values)
            .ok_or_else(|| Error::InvalidInput("cannot normalize a zero vector".into()))?;
        Ok(Self {
            values,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<EmbeddingVector>;
}

impl<E: TextEncoder + ?Sized> TextEncoder for &E {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        (**self).encode(text)
    }
}

/// Memoizes another encoder; safe to share across threads.
pub struct CachedTextEncoder<E> {
    inner: E,
    cache: std::sync::Mutex<HashMap<String, EmbeddingVector>>,
}

impl<E: TextEncoder> CachedTextEncoder<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: std::sync::Mutex::new(HashMap::new()),
        }
    }
}

impl<E: TextEncoder> TextEncoder for CachedTextEncoder<E> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        if let Some(e) = self.cache.lock().expect("cache lock").get(text) {
            return Ok(e.clone());
        }
        let e = self.inner.encode(text)?;
        self.cache.lock().expect("cache lock").insert(text.to_string(), e.clone());
        Ok(e)
    }
}

/// Encodes `text` and checks the result against the backend's dimension.
pub fn encode_text(backend: &dyn TextEncoder, text: &str) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("empty text".into()));
    }
    let e = backend.encode(text)?;
    if e.dim() != backend.dim() {
        return Err(Error::Shape(format!(
            "encoder returned dimension {} but is configured for {}",
            e.dim(),
            backend.dim()
        )));
    }
    Ok(e)
}

/// Linear refinement `normalize(W·e + b)` applied after the frozen text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub weight: Mat,
    pub bias: Mat,
    pub trainable: bool,
}

impl ProjectionHead {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Mat::identity(dim),
            bias: Mat::zeros(1, dim),
            trainable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.rows()
    }

    /// Frobenius distance of `[W | b]` from the identity head.
    pub fn distance_from_identity(&self) -> f64 {
        let d = self.dim();
        let mut sq = 0.0;
        for r in 0..d {
            for c in 0..d {
                let target = if r == c { 1.0 } else { 0.0 };
                sq += (self.weight.get(r, c) - target).powi(2);
            }
        }
        sq += self.bias.data().iter().map(|b| b * b).sum::<f64>();
        sq.sqrt()
    }
}

/// Graph form of the projection: every row of `rows` is mapped by
/// `normalize(W·e + b)`.
pub fn refine_rows(g: &mut Graph, weight: Var, bias: Var, rows: Var) -> Var {
    let projected = g.matmul_t(rows, weight);
    let shifted = g.add_row(projected, bias);
    g.normalize_rows(shifted)
}

pub fn refine_embedding(head: &ProjectionHead, e: &EmbeddingVector) -> Result<EmbeddingVector> {
    if e.dim() != head.dim() {
        return Err(Error::Shape(format!(
            "embedding dimension {} vs projection {}",
            e.dim(),
            head.dim()
        )));
    }
    let mut g = Graph::new();
    let w = g.leaf(head.weight.clone());
    let b = g.leaf(head.bias.clone());
    let x = g.leaf(Mat::row_vector(e.values.clone()));
    let y = refine_rows(&mut g, w, b, x);
    EmbeddingVector::unit(g.value(y).data().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddings {
    pub subject: EmbeddingVector,
    pub attributes: Vec<EmbeddingVector>,
    /// Frozen-encoder embedding of the full name.
    pub full: EmbeddingVector,
    /// Full name passed through the projection head.
    pub refined_full: EmbeddingVector,
}

/// Per-class subject, attribute and full-name embeddings for a vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    pub classes: Vec<ClassEmbeddings>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.classes.first().map(|c| c.subject.dim()).unwrap_or(0)
    }

    pub fn subjects(&self) -> Vec<&EmbeddingVector> {
        self.classes.iter().map(|c| &c.subject).collect()
    }

    pub fn attributes(&self) -> Vec<&[EmbeddingVector]> {
        self.classes.iter().map(|c| c.attributes.as_slice()).collect()
    }

    pub fn refined_full(&self) -> Vec<&EmbeddingVector> {
        self.classes.iter().map(|c| &c.refined_full).collect()
    }

    pub fn subject_matrix(&self) -> Mat {
        rows_of(self.classes.iter().map(|c| &c.subject))
    }

    pub fn full_matrix(&self) -> Mat {
        rows_of(self.classes.iter().map(|c| &c.full))
    }

    pub fn refined_matrix(&self) -> Mat {
        rows_of(self.classes.iter().map(|c| &c.refined_full))
    }
}

pub(crate) fn rows_of<'a>(vs: impl Iterator<Item = &'a EmbeddingVector>) -> Mat {
    let rows: Vec<&[f64]> = vs.map(|v| v.as_slice()).collect();
    Mat::from_rows(&rows)
}

/// Encodes subjects, bare attribute phrases and full names for every class.
/// All classes are attempted; failures are reported together.
pub fn embed_vocabulary(
    vocab: &[FineGrainedClass],
    backend: &dyn TextEncoder,
    head: &ProjectionHead,
) -> Result<EmbeddingSet> {
    let mut memo: HashMap<&str, EmbeddingVector> = HashMap::new();
    let encode = |text: &str, memo: &HashMap<&str, EmbeddingVector>| -> Result<EmbeddingVector> {
        if let Some(e) = memo.get(text) {
            return Ok(e.clone());
        }
        encode_text(backend, text)
    };
    let mut classes = Vec::with_capacity(vocab.len());
    let mut failures = Vec::new();
    for class in vocab {
        let result = (|| -> Result<ClassEmbeddings> {
            let subject = encode(&class.subject, &memo)?;
            let attributes = class
                .attributes
                .iter()
                .map(|a| encode(a, &memo))
                .collect::<Result<Vec<_>>>()?;
            let full = encode(&class.full_name, &memo)?;
            let refined_full = refine_embedding(head, &full)?;
            Ok(ClassEmbeddings {
                subject,
                attributes,
                full,
                refined_full,
            })
        })();
        match result {
            Ok(c) => {
                memo.insert(class.subject.as_str(), c.subject.clone());
                memo.insert(class.full_name.as_str(), c.full.clone());
                for (a, e) in class.attributes.iter().zip(&c.attributes) {
                    memo.insert(a.as_str(), e.clone());
                }
                classes.push(c);
            }
            Err(e) => failures.push(format!("class {} ({:?}): {e}", class.class_id, class.full_name)),
        }
    }
    if failures.is_empty() {
        Ok(EmbeddingSet { classes })
    } else {
        Err(Error::Backend(failures.join("; ")))
    }
}

/// Dense image features on an `H × W` grid, one `d`-vector per cell,
/// stored row-major (`cell = row · W + col`).
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFeatureMap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    /// `(height, width)` of the source image in pixels.
    pub image_size: (usize, usize),
    pub features: Mat,
}

impl SpatialFeatureMap {
    pub fn new(height: usize, width: usize, stride: usize, image_size: (usize, usize), features: Mat) -> Result<Self> {
        if features.rows() != height * width {
            return Err(Error::Shape(format!(
                "{} feature rows for a {height}x{width} grid",
                features.rows()
            )));
        }
        if height * stride < image_size.0 || width * stride < image_size.1 {
            return Err(Error::Shape(format!(
                "{height}x{width} grid at stride {stride} does not cover {image_size:?}"
            )));
        }
        Ok(Self {
            height,
            width,
            stride,
            image_size,
            features,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f64] {
        self.features.row(row * self.width + col)
    }

    /// Center of cell `(row, col)` in normalized image coordinates `(x, y)`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let x = (col as f64 + 0.5) * self.stride as f64 / self.image_size.1 as f64;
        let y = (row as f64 + 0.5) * self.stride as f64 / self.image_size.0 as f64;
        (x, y)
    }

    /// Cell extent in normalized image coordinates `(w, h)`.
    pub fn cell_size(&self) -> (f64, f64) {
        (
            self.stride as f64 / self.image_size.1 as f64,
            self.stride as f64 / self.image_size.0 as f64,
        )
    }

    pub fn cell_of_index(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }
}

/// Anything an image encoder can consume.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    Scene(SceneSpec),
    /// Identifier of a precomputed feature map.
    Precomputed(String),
    /// Encoded raster bytes. No bundled backend decodes these.
    Raster { format: String, bytes: Vec<u8> },
}

pub trait ImageEncoder: Send + Sync {
    fn encode(&self, image: &ImageInput) -> Result<SpatialFeatureMap>;
}

pub fn encode_image(backend: &dyn ImageEncoder, image: &ImageInput) -> Result<SpatialFeatureMap> {
    backend.encode(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocabulary::rule_based_parse;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> EmbeddingVector {
        EmbeddingVector::unit((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_head_is_a_no_op_on_unit_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random_unit(&mut rng, 16);
        let out = refine_embedding(&ProjectionHead::identity(16), &e).unwrap();
        for (a, b) in out.values.iter().zip(&e.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_scaling_cancels_under_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = random_unit(&mut rng, 8);
        let mut head = ProjectionHead::identity(8);
        head.weight = head.weight.scale(2.0);
        let out = refine_embedding(&head, &e).unwrap();
        for (a, b) in out.values.iter().zip(&e.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn random_head_matches_direct_matrix_vector_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 12;
        let weight = Mat::from_vec(d, d, (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let bias = Mat::from_vec(1, d, (0..d).map(|_| rng.random_range(-0.5..0.5)).collect());
        let head = ProjectionHead { weight: weight.clone(), bias: bias.clone(), trainable: true };
        let e = random_unit(&mut rng, d);
        let out = refine_embedding(&head, &e).unwrap();

        let mut y = vec![0.0; d];
        for r in 0..d {
            y[r] = bias.data()[r];
            for c in 0..d {
                y[r] += weight.get(r, c) * e.values[c];
            }
        }
        let n = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in out.values.iter().zip(&y) {
            assert!((a - b / n).abs() < 1e-6);
        }
        assert!(refine_embedding(&ProjectionHead::identity(4), &e).is_err());
    }

    #[test]
    fn vocabulary_embedding_shapes() {
        let enc = SyntheticTextEncoder::new(SyntheticTextConfig::default());
        let head = ProjectionHead::identity(enc.dim());
        let one = vec![FineGrainedClass::from_parse(0, &rule_based_parse("dog"))];
        let set = embed_vocabulary(&one, &enc, &head).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.attributes(), vec![&[][..]]);

        let vocab = vec![FineGrainedClass::from_parse(0, &rule_based_parse("a small brown dog"))];
        let set = embed_vocabulary(&vocab, &enc, &head).unwrap();
        assert_eq!(set.classes[0].attributes.len(), 2);
        let direct = encode_text(&enc, "a small brown dog").unwrap();
        assert_eq!(set.classes[0].refined_full.values.len(), direct.values.len());
        for (a, b) in set.classes[0].refined_full.values.iter().zip(&direct.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn embedding_failures_are_collected_across_classes() {
        let table = EmbeddingTable::new(4, vec![("dog".into(), vec![1.0, 0.0, 0.0, 0.0])]).unwrap();
        let enc = FileTextEncoder::new(table);
        let vocab = vec![
            FineGrainedClass::from_parse(0, &rule_based_parse("red cat")),
            FineGrainedClass::from_parse(1, &rule_based_parse("blue fox")),
        ];
        let err = embed_vocabulary(&vocab, &enc, &ProjectionHead::identity(4)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("class 0") && msg.contains("class 1"), "{msg}");
    }

    #[test]
    fn feature_map_coverage_is_checked() {
        assert!(SpatialFeatureMap::new(2, 2, 8, (16, 16), Mat::zeros(4, 3)).is_ok());
        assert!(SpatialFeatureMap::new(2, 2, 8, (17, 16), Mat::zeros(4, 3)).is_err());
        assert!(SpatialFeatureMap::new(2, 2, 8, (16, 16), Mat::zeros(3, 3)).is_err());
    }
}
