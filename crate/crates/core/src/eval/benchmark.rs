//! Seeded synthetic benchmark: scenes of planted objects and attribute
//! clutter, per-track annotations with hard negatives, and the train/test
//! samples derived from them.
//!
//! Files: `manifest.json` holds the world, tracks, attribute pools and base
//! classes; `images.jsonl` holds one [`ImageRecord`] per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{generate_negatives, AnnotationRecord, AnnotationResult, ApResult, AttributePools, ScoredBox, TrackSpec};
use crate::boxes::{iou, BBox};
use crate::encoders::{PlantedObject, PlantedPatch, SceneSpec, SyntheticImageConfig, SyntheticImageEncoder};
use crate::encoders::{embed_vocabulary, ProjectionHead, SpatialFeatureMap, TextEncoder};
use crate::error::{Error, Result};
use crate::fgad::{pool_region, PoolingMode};
use crate::tensor::cosine;
use crate::training::TrainSample;
use crate::vocabulary::FineGrainedClass;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeType {
    pub name: String,
    pub values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub subjects: Vec<String>,
    /// Attribute types in the order their words appear in a name.
    pub attribute_types: Vec<AttributeType>,
    pub train_images: usize,
    pub test_images: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_clutter: usize,
    pub max_clutter: usize,
    /// Chance that an image holds a second object of its first object's
    /// subject, with other attributes.
    pub twin_probability: f64,
    /// Attribute words carried by each clutter patch.
    pub clutter_attributes: usize,
    pub object_size: (f64, f64),
    pub clutter_size: (f64, f64),
    /// Boxes in one scene overlap by at most this IoU.
    pub max_overlap: f64,
    pub placement_retries: usize,
    /// Share of attribute combinations reserved for training images.
    pub train_fraction: f64,
    pub tracks: Vec<TrackSpec>,
    /// Negatives per object in training vocabularies.
    pub training_negatives: usize,
    pub seed: u64,
    pub image: SyntheticImageConfig,
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

impl Default for WorldConfig {
    fn default() -> Self {
        let types = [
            ("color", ["red", "green", "blue"]),
            ("material", ["wooden", "metal", "plastic"]),
            ("pattern", ["striped", "dotted", "checkered"]),
            ("transparency", ["opaque", "transparent", "translucent"]),
        ];
        Self {
            subjects: words(&["lamp", "chair", "mug", "bottle", "vase", "bag"]),
            attribute_types: types
                .iter()
                .map(|(n, vs)| AttributeType {
                    name: n.to_string(),
                    values: words(vs),
                })
                .collect(),
            train_images: 240,
            test_images: 120,
            min_objects: 1,
            max_objects: 3,
            min_clutter: 1,
            max_clutter: 3,
            twin_probability: 0.5,
            clutter_attributes: 2,
            object_size: (0.25, 0.45),
            clutter_size: (0.12, 0.25),
            max_overlap: 0.1,
            placement_retries: 100,
            train_fraction: 0.6,
            tracks: TrackSpec::standard(),
            training_negatives: 6,
            seed: 0,
            image: SyntheticImageConfig::default(),
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects.len() < 2 {
            return Err(Error::Config("at least 2 subjects required".into()));
        }
        if self.attribute_types.is_empty() || self.attribute_types.iter().any(|t| t.values.len() < 2) {
            return Err(Error::Config("every attribute type needs at least 2 values".into()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects || self.max_objects > self.subjects.len() {
            return Err(Error::Config("objects per image must satisfy 1 ≤ min ≤ max ≤ subjects".into()));
        }
        if self.min_clutter > self.max_clutter {
            return Err(Error::Config("min_clutter exceeds max_clutter".into()));
        }
        for (lo, hi) in [self.object_size, self.clutter_size] {
            if !(0.0 < lo && lo <= hi && hi < 1.0) {
                return Err(Error::Config(format!("box size range ({lo}, {hi}) must lie in (0, 1)")));
            }
        }
        if !(0.0..=1.0).contains(&self.twin_probability) {
            return Err(Error::Config("twin_probability must lie in [0, 1]".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        for t in &self.tracks {
            t.validate()?;
            if t.attributes_substituted > self.attribute_types.len() {
                return Err(Error::Config(format!("track {} substitutes more attributes than exist", t.name)));
            }
        }
        Ok(())
    }

    /// Image config with every subject and attribute registered.
    pub fn image_config(&self) -> SyntheticImageConfig {
        let mut cfg = self.image.clone();
        cfg.registry = self.subjects.clone();
        for t in &self.attribute_types {
            cfg.registry.extend(t.values.iter().cloned());
        }
        cfg
    }

    pub fn pools(&self) -> AttributePools {
        AttributePools::new(
            self.attribute_types
                .iter()
                .map(|t| (t.name.clone(), t.values.clone()))
                .collect(),
        )
    }

    pub fn class(&self, subject: &str, attributes: &[String]) -> FineGrainedClass {
        let mut name = attributes.join(" ");
        name.push(' ');
        name.push_str(subject);
        FineGrainedClass {
            class_id: 0,
            full_name: name,
            subject: subject.to_string(),
            attributes: attributes.to_vec(),
        }
    }

    fn all_combinations(&self) -> Vec<Vec<String>> {
        let mut out: Vec<Vec<String>> = vec![Vec::new()];
        for t in &self.attribute_types {
            out = out
                .into_iter()
                .flat_map(|p| {
                    t.values.iter().map(move |v| {
                        let mut q = p.clone();
                        q.push(v.clone());
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Whether a subject/attribute combination belongs to the training split.
    pub fn is_train_combination(&self, subject: &str, attributes: &[String]) -> bool {
        let mut h = Sha256::new();
        h.update(b"guided-split");
        h.update(self.seed.to_le_bytes());
        h.update(subject.as_bytes());
        for a in attributes {
            h.update(b"|");
            h.update(a.as_bytes());
        }
        let d = h.finalize();
        let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes")) as f64 / u64::MAX as f64;
        x < self.train_fraction
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectLabel {
    pub class: FineGrainedClass,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub split: Split,
    pub scene: SceneSpec,
    pub objects: Vec<ObjectLabel>,
    /// Test images only: one record per object and track.
    pub annotations: Vec<AnnotationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub world: WorldConfig,
    pub pools: AttributePools,
    /// One class per subject with its usual attributes, the coarse
    /// pretraining vocabulary.
    pub base_classes: Vec<FineGrainedClass>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<ImageRecord>,
}

fn derived_seed(seed: u64, label: &str, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn place(rng: &mut ChaCha8Rng, size: (f64, f64), taken: &[BBox], cfg: &WorldConfig) -> Result<BBox> {
    for _ in 0..cfg.placement_retries.max(1) {
        let w = rng.random_range(size.0..=size.1);
        let h = rng.random_range(size.0..=size.1);
        let cx = rng.random_range(w / 2.0..=1.0 - w / 2.0);
        let cy = rng.random_range(h / 2.0..=1.0 - h / 2.0);
        let b = BBox::new(cx, cy, w, h);
        if !b.fits_unit() {
            continue;
        }
        let mut ok = true;
        for t in taken {
            if iou(&b, t)? > cfg.max_overlap {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(b);
        }
    }
    Err(Error::InvalidInput(format!(
        "could not place a box within {} retries",
        cfg.placement_retries
    )))
}

pub fn generate_synthetic_benchmark(world: &WorldConfig) -> Result<Dataset> {
    world.validate()?;
    let combos = world.all_combinations();
    let mut split_combos: BTreeMap<(&str, bool), Vec<&Vec<String>>> = BTreeMap::new();
    for s in &world.subjects {
        for c in &combos {
            split_combos
                .entry((s.as_str(), world.is_train_combination(s, c)))
                .or_default()
                .push(c);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(world.seed, "base", 0));
    let mut base_classes = Vec::new();
    for s in &world.subjects {
        let pool = split_combos
            .get(&(s.as_str(), true))
            .ok_or_else(|| Error::Config(format!("subject {s} has no training combinations")))?;
        let typical = pool.choose(&mut rng).expect("non-empty pool");
        base_classes.push(world.class(s, typical));
    }
    for s in &world.subjects {
        if !split_combos.contains_key(&(s.as_str(), false)) {
            return Err(Error::Config(format!("subject {s} has no held-out combinations")));
        }
    }

    let pools = world.pools();
    let total = world.train_images + world.test_images;
    let mut images = Vec::with_capacity(total);
    for index in 0..total {
        let split = if index < world.train_images { Split::Train } else { Split::Test };
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(world.seed, "image", index));
        let image_id = format!("img{index:05}");
        let n_obj = rng.random_range(world.min_objects..=world.max_objects);
        let mut subjects: Vec<&String> = world.subjects.iter().collect();
        subjects.shuffle(&mut rng);
        let mut taken = Vec::new();
        let mut objects = Vec::new();
        for s in subjects.into_iter().take(n_obj) {
            let pool = &split_combos[&(s.as_str(), split == Split::Train)];
            let attrs = pool.choose(&mut rng).expect("non-empty pool");
            let bbox = place(&mut rng, world.object_size, &taken, world)?;
            taken.push(bbox);
            objects.push(ObjectLabel {
                class: world.class(s, attrs),
                bbox,
            });
        }
        if rng.random_bool(world.twin_probability) {
            let first = &objects[0].class;
            let pool = &split_combos[&(first.subject.as_str(), split == Split::Train)];
            let others: Vec<_> = pool.iter().filter(|a| ***a != first.attributes).collect();
            if let (Some(attrs), Ok(bbox)) = (others.choose(&mut rng), place(&mut rng, world.object_size, &taken, world)) {
                taken.push(bbox);
                objects.push(ObjectLabel {
                    class: world.class(&first.subject, attrs),
                    bbox,
                });
            }
        }
        let mut patches = Vec::new();
        let n_clutter = rng.random_range(world.min_clutter..=world.max_clutter);
        for _ in 0..n_clutter {
            // a crowded scene simply gets less clutter
            let Ok(bbox) = place(&mut rng, world.clutter_size, &taken, world) else {
                break;
            };
            taken.push(bbox);
            let mut types: Vec<&AttributeType> = world.attribute_types.iter().collect();
            types.shuffle(&mut rng);
            let concepts = types
                .into_iter()
                .take(world.clutter_attributes)
                .map(|t| t.values.choose(&mut rng).expect("non-empty values").clone())
                .collect();
            patches.push(PlantedPatch { concepts, bbox });
        }
        let scene = SceneSpec {
            image_id: image_id.clone(),
            noise_seed: rng.random(),
            objects: objects
                .iter()
                .map(|o| PlantedObject {
                    subject: o.class.subject.clone(),
                    attributes: o.class.attributes.clone(),
                    bbox: o.bbox,
                })
                .collect(),
            patches,
        };
        let mut annotations = Vec::new();
        if split == Split::Test {
            for (oi, o) in objects.iter().enumerate() {
                for (ti, track) in world.tracks.iter().enumerate() {
                    let seed = derived_seed(world.seed, "negatives", (index * 64 + oi) * 64 + ti);
                    let set = generate_negatives(
                        &o.class,
                        track.attributes_substituted,
                        &pools,
                        track.negatives_per_annotation,
                        seed,
                        track.attribute_type.as_deref(),
                    )?;
                    annotations.push(AnnotationRecord {
                        image_id: image_id.clone(),
                        track: track.name.clone(),
                        gt_box: o.bbox,
                        positive: o.class.clone(),
                        negatives: set.negatives,
                    });
                }
            }
        }
        images.push(ImageRecord {
            image_id,
            split,
            scene,
            objects,
            annotations,
        });
    }
    Ok(Dataset {
        manifest: Manifest {
            world: world.clone(),
            pools,
            base_classes,
        },
        images,
    })
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.jsonl";

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = serde_json::to_string_pretty(&dataset.manifest).map_err(|e| Error::format("manifest", e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for img in &dataset.images {
        serde_json::to_writer(&mut out, img).map_err(|e| Error::format("image record", e.to_string()))?;
        out.write_all(b"\n").expect("vec write");
    }
    let path = dir.join(IMAGES_FILE);
    fs::write(&path, out).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))?;
    let path = dir.join(IMAGES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let images = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format("image record", format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<ImageRecord>>>()?;
    Ok(Dataset { manifest, images })
}

impl Dataset {
    pub fn encoder(&self) -> SyntheticImageEncoder {
        SyntheticImageEncoder::new(self.manifest.world.image_config())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn render(&self, encoder: &SyntheticImageEncoder, split: Split) -> Result<Vec<SpatialFeatureMap>> {
        self.split(split).map(|i| encoder.render(&i.scene)).collect()
    }

    pub fn track_names(&self) -> Vec<String> {
        self.manifest.world.tracks.iter().map(|t| t.name.clone()).collect()
    }

    /// Coarse pretraining samples: base classes as the vocabulary, labels
    /// by subject, no fine supervision.
    pub fn stage1_samples(&self, maps: &[SpatialFeatureMap], text: &dyn TextEncoder) -> Result<Vec<TrainSample>> {
        let mut classes = self.manifest.base_classes.clone();
        classes.sort_by(|a, b| a.full_name.cmp(&b.full_name));
        for (i, c) in classes.iter_mut().enumerate() {
            c.class_id = i;
        }
        let emb = embed_vocabulary(&classes, text, &ProjectionHead::identity(text.dim()))?;
        self.split(Split::Train)
            .zip(maps)
            .map(|(img, map)| {
                let ids = img
                    .objects
                    .iter()
                    .map(|o| {
                        classes
                            .iter()
                            .position(|c| c.subject == o.class.subject)
                            .ok_or_else(|| Error::InvalidInput(format!("no base class for {}", o.class.subject)))
                    })
                    .collect::<Result<Vec<_>>>()?;
                TrainSample::new(
                    img.image_id.clone(),
                    map.clone(),
                    classes.clone(),
                    emb.clone(),
                    img.objects.iter().map(|o| o.bbox).collect(),
                    ids,
                    false,
                )
            })
            .collect()
    }

    /// Fine-grained samples: every object's positive plus hard negatives
    /// with one to three substitutions, and one class for each absent subject.
    pub fn stage2_samples(&self, maps: &[SpatialFeatureMap], text: &dyn TextEncoder) -> Result<Vec<TrainSample>> {
        let world = &self.manifest.world;
        let head = ProjectionHead::identity(text.dim());
        let n_types = world.attribute_types.len();
        self.split(Split::Train)
            .zip(maps)
            .enumerate()
            .map(|(index, (img, map))| {
                let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(world.seed, "train-vocab", index));
                let mut classes: Vec<FineGrainedClass> = Vec::new();
                for o in &img.objects {
                    classes.push(o.class.clone());
                    let subs = rng.random_range(1..=n_types.min(3));
                    let set = generate_negatives(
                        &o.class,
                        subs,
                        &self.manifest.pools,
                        world.training_negatives,
                        rng.random(),
                        None,
                    )?;
                    classes.extend(set.negatives);
                }
                for s in &world.subjects {
                    if img.objects.iter().all(|o| &o.class.subject != s) {
                        let attrs: Vec<String> = world
                            .attribute_types
                            .iter()
                            .map(|t| t.values.choose(&mut rng).expect("non-empty values").clone())
                            .collect();
                        classes.push(world.class(s, &attrs));
                    }
                }
                classes.sort_by(|a, b| a.full_name.cmp(&b.full_name));
                classes.dedup_by(|a, b| a.full_name == b.full_name);
                for (i, c) in classes.iter_mut().enumerate() {
                    c.class_id = i;
                }
                let ids = img
                    .objects
                    .iter()
                    .map(|o| classes.iter().position(|c| c.full_name == o.class.full_name).expect("positive kept"))
                    .collect();
                let emb = embed_vocabulary(&classes, text, &head)?;
                TrainSample::new(
                    img.image_id.clone(),
                    map.clone(),
                    classes,
                    emb,
                    img.objects.iter().map(|o| o.bbox).collect(),
                    ids,
                    true,
                )
            })
            .collect()
    }
}

/// Scores each planted object's true box by cosine between its pooled
/// features and the planted mixture of every caption in the vocabulary.
pub fn oracle_results(dataset: &Dataset, track: &str) -> Result<Vec<AnnotationResult>> {
    let encoder = dataset.encoder();
    let cfg = encoder.config().clone();
    let mut out = Vec::new();
    for img in dataset.split(Split::Test) {
        let anns: Vec<&AnnotationRecord> = img.annotations.iter().filter(|a| a.track == track).collect();
        if anns.is_empty() {
            continue;
        }
        let map = encoder.render(&img.scene)?;
        let regions = img
            .objects
            .iter()
            .map(|o| pool_region(&map, &o.bbox, PoolingMode::Mean).map(|r| r.vector))
            .collect::<Result<Vec<_>>>()?;
        for ann in anns {
            let (vocab, positive) = ann.vocabulary();
            let mixtures = vocab
                .iter()
                .map(|c| {
                    let mut v = encoder.direction(&c.subject)?.iter().map(|x| x * cfg.subject_weight).collect::<Vec<_>>();
                    for a in &c.attributes {
                        for (acc, x) in v.iter_mut().zip(encoder.direction(a)?) {
                            *acc += cfg.attribute_weight * x;
                        }
                    }
                    Ok(v)
                })
                .collect::<Result<Vec<_>>>()?;
            let predictions = img
                .objects
                .iter()
                .zip(&regions)
                .map(|(o, r)| ScoredBox {
                    bbox: o.bbox,
                    scores: mixtures.iter().map(|m| cosine(r, m)).collect(),
                })
                .collect();
            out.push(AnnotationResult {
                gt_box: ann.gt_box,
                positive,
                predictions,
            });
        }
    }
    Ok(out)
}

pub fn oracle_map(dataset: &Dataset) -> Result<ApResult> {
    let mut tracks = BTreeMap::new();
    for name in dataset.track_names() {
        let results = oracle_results(dataset, &name)?;
        tracks.insert(name, super::evaluate_track(&results, 0.5)?);
    }
    Ok(ApResult::from_tracks(tracks))
}
