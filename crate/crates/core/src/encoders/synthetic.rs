//! Seeded stand-ins for a frozen vision-language model.
//!
//! Every concept word has a hash-seeded unit direction. The text encoder
//! sums the directions of the content words in a phrase and adds a
//! phrase-specific direction, so multi-word names behave like a joint
//! embedding in which every token counts the same. The image encoder plants
//! objects and clutter patches into a grid as mixtures of concept
//! directions. Image-side directions are offset from the text-side ones by a
//! fixed per-concept perturbation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingVector, ImageEncoder, ImageInput, SpatialFeatureMap, TextEncoder};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{dot, Mat};

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "with", "on", "in", "of", "and", "at", "to", "for", "by", "from", "near",
    "under", "above", "its", "is",
];

/// Unit direction for `key`, reproducible across processes for a given seed.
pub fn concept_direction(seed: u64, dim: usize, key: &str) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(b"guided-concept");
    hasher.update(seed.to_le_bytes());
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn content_tokens(text: &str) -> Vec<String> {
    let all: Vec<String> = text
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| !c.is_alphanumeric() && c != '-')
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect();
    let content: Vec<String> = all
        .iter()
        .filter(|t| !STOP_WORDS.contains(&t.as_str()))
        .cloned()
        .collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTextConfig {
    pub seed: u64,
    pub dim: usize,
    /// Weight of the non-compositional, whole-phrase direction.
    pub phrase_weight: f64,
    /// Optional prompt template with `{}` for the text, e.g. `"a photo of a {}"`.
    pub template: Option<String>,
}

impl Default for SyntheticTextConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            phrase_weight: 0.5,
            template: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTextEncoder {
    config: SyntheticTextConfig,
}

impl SyntheticTextEncoder {
    pub fn new(config: SyntheticTextConfig) -> Self {
        Self { config }
    }

    pub fn config(&self) -> &SyntheticTextConfig {
        &self.config
    }
}

impl TextEncoder for SyntheticTextEncoder {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn encode(&self, text: &str) -> Result<EmbeddingVector> {
        let text = match &self.config.template {
            Some(t) => t.replace("{}", text),
            None => text.to_string(),
        };
        let tokens = content_tokens(&text);
        let (seed, dim) = (self.config.seed, self.config.dim);
        match tokens.len() {
            0 => Err(Error::InvalidInput(format!("no tokens in {text:?}"))),
            1 => EmbeddingVector::unit(concept_direction(seed, dim, &tokens[0])),
            _ => {
                let mut v = vec![0.0; dim];
                for t in &tokens {
                    for (acc, x) in v.iter_mut().zip(concept_direction(seed, dim, t)) {
                        *acc += x;
                    }
                }
                let phrase = format!("phrase:{}", tokens.join(" "));
                for (acc, x) in v.iter_mut().zip(concept_direction(seed, dim, &phrase)) {
                    *acc += self.config.phrase_weight * x;
                }
                EmbeddingVector::unit(v)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub subject: String,
    pub attributes: Vec<String>,
    pub bbox: BBox,
}

/// Background clutter carrying only attribute concepts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedPatch {
    pub concepts: Vec<String>,
    pub bbox: BBox,
}

/// A synthetic image: planted objects and clutter plus a noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub image_id: String,
    pub noise_seed: u64,
    pub objects: Vec<PlantedObject>,
    #[serde(default)]
    pub patches: Vec<PlantedPatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticImageConfig {
    pub text: SyntheticTextConfig,
    pub grid_height: usize,
    pub grid_width: usize,
    pub stride: usize,
    pub subject_weight: f64,
    pub attribute_weight: f64,
    pub patch_weight: f64,
    /// Norm of the per-cell noise vector.
    pub noise_scale: f64,
    /// Fraction of cell noise kept inside the span of the registered concepts.
    pub noise_leakage: f64,
    /// Norm of a per-object appearance offset drawn inside the concept span.
    pub instance_noise: f64,
    /// Size of the per-concept offset between text and image directions.
    pub modality_gap: f64,
    /// Radial decay of a planted signal away from its box center: a cell at
    /// normalized radius `r` is weighted by `exp(-center_falloff · r²)`.
    pub center_falloff: f64,
    /// Concepts whose span defines the "semantic" subspace for leakage and
    /// instance noise.
    pub registry: Vec<String>,
}

impl Default for SyntheticImageConfig {
    fn default() -> Self {
        Self {
            text: SyntheticTextConfig::default(),
            grid_height: 8,
            grid_width: 8,
            stride: 16,
            subject_weight: 1.0,
            attribute_weight: 0.25,
            patch_weight: 0.6,
            noise_scale: 0.5,
            noise_leakage: 0.5,
            instance_noise: 0.2,
            modality_gap: 0.75,
            center_falloff: 2.0,
            registry: Vec::new(),
        }
    }
}

pub struct SyntheticImageEncoder {
    config: SyntheticImageConfig,
    text: SyntheticTextEncoder,
    /// Orthonormal basis (rows) of the registered image directions.
    basis: Mat,
}

impl SyntheticImageEncoder {
    pub fn new(config: SyntheticImageConfig) -> Self {
        let text = SyntheticTextEncoder::new(config.text.clone());
        let dim = config.text.dim;
        let mut basis_rows: Vec<Vec<f64>> = Vec::new();
        for concept in &config.registry {
            let mut v = image_direction(&text, config.modality_gap, concept)
                .unwrap_or_else(|_| vec![0.0; dim]);
            for b in &basis_rows {
                let p = dot(&v, b);
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
            let n = dot(&v, &v).sqrt();
            if n > 1e-8 && basis_rows.len() < dim {
                basis_rows.push(v.into_iter().map(|x| x / n).collect());
            }
        }
        let basis = if basis_rows.is_empty() {
            Mat::zeros(0, dim)
        } else {
            Mat::from_rows(&basis_rows)
        };
        Self {
            config,
            text,
            basis,
        }
    }

    pub fn config(&self) -> &SyntheticImageConfig {
        &self.config
    }

    pub fn text_encoder(&self) -> &SyntheticTextEncoder {
        &self.text
    }

    /// The direction planted for `concept`.
    pub fn direction(&self, concept: &str) -> Result<Vec<f64>> {
        image_direction(&self.text, self.config.modality_gap, concept)
    }

    fn project_to_span(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; v.len()];
        for r in 0..self.basis.rows() {
            let b = self.basis.row(r);
            let p = dot(v, b);
            for (o, x) in out.iter_mut().zip(b) {
                *o += p * x;
            }
        }
        out
    }

    fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
        (0..dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn object_vector(&self, obj: &PlantedObject, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let dim = self.config.text.dim;
        let mut v = vec![0.0; dim];
        axpy(&mut v, self.config.subject_weight, &self.direction(&obj.subject)?);
        for a in &obj.attributes {
            axpy(&mut v, self.config.attribute_weight, &self.direction(a)?);
        }
        let raw = Self::gaussian(rng, dim);
        if self.config.instance_noise > 0.0 && self.basis.rows() > 0 {
            let in_span = self.project_to_span(&raw);
            let n = dot(&in_span, &in_span).sqrt();
            if n > 0.0 {
                axpy(&mut v, self.config.instance_noise / n, &in_span);
            }
        }
        Ok(v)
    }

    pub fn render(&self, scene: &SceneSpec) -> Result<SpatialFeatureMap> {
        let cfg = &self.config;
        let (gh, gw, dim) = (cfg.grid_height, cfg.grid_width, cfg.text.dim);
        if gh == 0 || gw == 0 || cfg.stride == 0 {
            return Err(Error::Config("synthetic grid must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(scene.noise_seed);
        let objects: Vec<(BBox, Vec<f64>)> = scene
            .objects
            .iter()
            .map(|o| Ok((o.bbox, self.object_vector(o, &mut rng)?)))
            .collect::<Result<_>>()?;
        let patches: Vec<(BBox, Vec<f64>)> = scene
            .patches
            .iter()
            .map(|p| {
                let mut v = vec![0.0; dim];
                for c in &p.concepts {
                    axpy(&mut v, cfg.patch_weight, &self.direction(c)?);
                }
                Ok((p.bbox, v))
            })
            .collect::<Result<_>>()?;

        let mut features = Mat::zeros(gh * gw, dim);
        let (cw, ch) = (1.0 / gw as f64, 1.0 / gh as f64);
        for r in 0..gh {
            for c in 0..gw {
                let cell = BBox::from_corners(c as f64 * cw, r as f64 * ch, (c + 1) as f64 * cw, (r + 1) as f64 * ch);
                let row = features.row_mut(r * gw + c);
                for (bbox, v) in objects.iter().chain(&patches) {
                    let cover = bbox.intersection_area(&cell) / cell.area();
                    if cover > 0.0 {
                        let (cx, cy) = ((c as f64 + 0.5) * cw, (r as f64 + 0.5) * ch);
                        let dx = (cx - bbox.cx) / (0.5 * bbox.w);
                        let dy = (cy - bbox.cy) / (0.5 * bbox.h);
                        let falloff = (-cfg.center_falloff * (dx * dx + dy * dy)).exp();
                        axpy(row, cover * falloff, v);
                    }
                }
                let z = Self::gaussian(&mut rng, dim);
                let zn = dot(&z, &z).sqrt();
                let mut noise: Vec<f64> = z.iter().map(|x| x / zn).collect();
                if self.basis.rows() > 0 {
                    let span = self.project_to_span(&noise);
                    axpy(&mut noise, -(1.0 - cfg.noise_leakage), &span);
                }
                axpy(row, cfg.noise_scale, &noise);
            }
        }
        SpatialFeatureMap::new(gh, gw, cfg.stride, (gh * cfg.stride, gw * cfg.stride), features)
    }
}

impl ImageEncoder for SyntheticImageEncoder {
    fn encode(&self, image: &ImageInput) -> Result<SpatialFeatureMap> {
        match image {
            ImageInput::Scene(scene) => self.render(scene),
            ImageInput::Precomputed(id) => Err(Error::InvalidInput(format!(
                "synthetic encoder cannot load precomputed map {id:?}"
            ))),
            ImageInput::Raster { format, bytes } => {
                if bytes.len() < self.config.stride * self.config.stride {
                    Err(Error::InvalidInput("image smaller than one stride".into()))
                } else {
                    Err(Error::InvalidInput(format!("unsupported image format {format:?}")))
                }
            }
        }
    }
}

fn image_direction(text: &SyntheticTextEncoder, gap: f64, concept: &str) -> Result<Vec<f64>> {
    let e = text.encode(concept)?;
    let cfg = text.config();
    let offset = concept_direction(cfg.seed, cfg.dim, &format!("visual:{}", concept.to_lowercase()));
    let v: Vec<f64> = e.values.iter().zip(&offset).map(|(a, b)| a + gap * b).collect();
    let n = dot(&v, &v).sqrt();
    Ok(v.into_iter().map(|x| x / n).collect())
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
