//! Per-annotation evaluation with hard negatives, average precision, and
//! negative-caption generation by attribute substitution.

pub mod ablation;
pub mod benchmark;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{Error, Result};
use crate::tensor::argmax;
use crate::vocabulary::FineGrainedClass;

/// One ground-truth object under one track: its positive caption and the
/// hard negatives it competes with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub track: String,
    #[serde(rename = "box")]
    pub gt_box: BBox,
    pub positive: FineGrainedClass,
    pub negatives: Vec<FineGrainedClass>,
}

impl AnnotationRecord {
    /// Positive plus negatives ordered by full name, with the positive's
    /// position. Class ids are the positions.
    pub fn vocabulary(&self) -> (Vec<FineGrainedClass>, usize) {
        let mut all: Vec<FineGrainedClass> = std::iter::once(&self.positive).chain(&self.negatives).cloned().collect();
        all.sort_by(|a, b| a.full_name.cmp(&b.full_name));
        all.dedup_by(|a, b| a.full_name == b.full_name);
        for (i, c) in all.iter_mut().enumerate() {
            c.class_id = i;
        }
        let pos = all
            .iter()
            .position(|c| c.full_name == self.positive.full_name)
            .expect("positive is in its own vocabulary");
        (all, pos)
    }

    pub fn validate(&self) -> Result<()> {
        for n in &self.negatives {
            if n.subject != self.positive.subject {
                return Err(Error::InvalidInput(format!(
                    "negative {:?} changes the subject of {:?}",
                    n.full_name, self.positive.full_name
                )));
            }
            if n.attributes == self.positive.attributes {
                return Err(Error::InvalidInput(format!("negative {:?} equals the positive", n.full_name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrackSpec {
    pub name: String,
    pub negatives_per_annotation: usize,
    pub attributes_substituted: usize,
    /// Attribute type the substitutions are restricted to, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attribute_type: Option<String>,
}

impl TrackSpec {
    pub fn new(name: &str, substituted: usize, attribute_type: Option<&str>) -> Self {
        Self {
            name: name.into(),
            negatives_per_annotation: 10,
            attributes_substituted: substituted,
            attribute_type: attribute_type.map(str::to_string),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.attributes_substituted) {
            return Err(Error::Config(format!(
                "track {} substitutes {} attributes, expected 1 to 3",
                self.name, self.attributes_substituted
            )));
        }
        if self.negatives_per_annotation == 0 {
            return Err(Error::Config(format!("track {} requests no negatives", self.name)));
        }
        Ok(())
    }

    /// The eight standard tracks. Trivial and Easy both substitute three
    /// attributes.
    pub fn standard() -> Vec<TrackSpec> {
        vec![
            Self::new("Trivial", 3, None),
            Self::new("Easy", 3, None),
            Self::new("Medium", 2, None),
            Self::new("Hard", 1, None),
            Self::new("Color", 1, Some("color")),
            Self::new("Material", 1, Some("material")),
            Self::new("Pattern", 1, Some("pattern")),
            Self::new("Transparency", 1, Some("transparency")),
        ]
    }
}

/// Attribute values grouped by type.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributePools {
    pub values: BTreeMap<String, Vec<String>>,
    /// Types of words that are not (or not only) pool members.
    #[serde(default)]
    pub known_types: BTreeMap<String, String>,
}

impl AttributePools {
    pub fn new(values: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            values,
            known_types: BTreeMap::new(),
        }
    }

    pub fn with_type(mut self, word: &str, kind: &str) -> Self {
        self.known_types.insert(word.into(), kind.into());
        self
    }

    pub fn type_of(&self, word: &str) -> Option<&str> {
        if let Some(t) = self.known_types.get(word) {
            return Some(t);
        }
        self.values
            .iter()
            .find(|(_, vs)| vs.iter().any(|v| v == word))
            .map(|(t, _)| t.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NegativeSet {
    pub negatives: Vec<FineGrainedClass>,
    /// Set when fewer than the requested count could be produced.
    pub warning: Option<String>,
}

fn replace_word(name: &str, old: &str, new: &str) -> String {
    let mut out: Vec<String> = Vec::new();
    let words: Vec<&str> = name.split(' ').collect();
    let olds: Vec<&str> = old.split(' ').collect();
    let mut i = 0;
    let mut done = false;
    while i < words.len() {
        if !done && words[i..].starts_with(&olds) {
            out.push(new.to_string());
            i += olds.len();
            done = true;
        } else {
            out.push(words[i].to_string());
            i += 1;
        }
    }
    out.join(" ")
}

fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Negatives that replace exactly `substitutions` attribute phrases of the
/// positive with other values of the same type. `attribute_type` restricts
/// which slots may change.
pub fn generate_negatives(
    positive: &FineGrainedClass,
    substitutions: usize,
    pools: &AttributePools,
    count: usize,
    seed: u64,
    attribute_type: Option<&str>,
) -> Result<NegativeSet> {
    if substitutions == 0 || substitutions > positive.attributes.len() {
        return Err(Error::InvalidInput(format!(
            "cannot substitute {substitutions} of {} attributes in {:?}",
            positive.attributes.len(),
            positive.full_name
        )));
    }
    let mut slots = Vec::new();
    for (i, a) in positive.attributes.iter().enumerate() {
        let Some(t) = pools.type_of(a) else { continue };
        if attribute_type.is_some_and(|want| want != t) {
            continue;
        }
        let alternatives: Vec<&String> = pools
            .values
            .get(t)
            .map(|vs| vs.iter().filter(|v| !positive.attributes.contains(v)).collect())
            .unwrap_or_default();
        if !alternatives.is_empty() {
            slots.push((i, alternatives));
        }
    }
    let mut candidates: Vec<Vec<(usize, &String)>> = Vec::new();
    for combo in combinations(slots.len(), substitutions) {
        let mut partial: Vec<Vec<(usize, &String)>> = vec![Vec::new()];
        for &s in &combo {
            let (slot, alts) = &slots[s];
            partial = partial
                .into_iter()
                .flat_map(|p| {
                    alts.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push((*slot, *a));
                        q
                    })
                })
                .collect();
        }
        candidates.extend(partial);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    let mut seen = BTreeSet::new();
    let mut negatives = Vec::new();
    for cand in candidates {
        if negatives.len() == count {
            break;
        }
        let mut attributes = positive.attributes.clone();
        let mut full_name = positive.full_name.clone();
        for (slot, value) in cand {
            full_name = replace_word(&full_name, &positive.attributes[slot], value);
            attributes[slot] = value.clone();
        }
        if seen.insert(full_name.clone()) {
            negatives.push(FineGrainedClass {
                class_id: negatives.len(),
                full_name,
                subject: positive.subject.clone(),
                attributes,
            });
        }
    }
    let warning = (negatives.len() < count).then(|| {
        let msg = format!(
            "only {} of {count} negatives available for {:?}",
            negatives.len(),
            positive.full_name
        );
        log::debug!("{msg}");
        msg
    });
    Ok(NegativeSet { negatives, warning })
}

/// A detected box with its final scores over an annotation's vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub scores: Vec<f64>,
}

/// Everything the evaluator needs about one annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationResult {
    #[serde(rename = "box")]
    pub gt_box: BBox,
    /// Position of the positive caption in the score vectors.
    pub positive: usize,
    pub predictions: Vec<ScoredBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackAp {
    pub ap: f64,
    pub annotations: usize,
    pub predictions: usize,
    pub true_positives: usize,
}

struct Ranked {
    score: f64,
    annotation: usize,
    qualifies: bool,
}

fn ranked(results: &[AnnotationResult], iou_threshold: f64) -> Result<Vec<Ranked>> {
    let mut out = Vec::new();
    for (a, r) in results.iter().enumerate() {
        for p in &r.predictions {
            if r.positive >= p.scores.len() {
                return Err(Error::Shape(format!(
                    "positive index {} outside {} scores",
                    r.positive,
                    p.scores.len()
                )));
            }
            let score = p.scores[r.positive];
            if !score.is_finite() {
                return Err(Error::InvalidInput("non-finite prediction score".into()));
            }
            let qualifies = argmax(&p.scores) == r.positive && iou(&p.bbox, &r.gt_box)? >= iou_threshold;
            out.push(Ranked {
                score,
                annotation: a,
                qualifies,
            });
        }
    }
    Ok(out)
}

/// Average precision over the positive-caption scores. A prediction is a
/// true positive when its box overlaps the annotation by at least
/// `iou_threshold` and its highest score is the positive caption; per
/// annotation only the highest-scored such prediction counts. Tied scores
/// are ranked as one block; precision is interpolated over all points.
pub fn evaluate_track(results: &[AnnotationResult], iou_threshold: f64) -> Result<TrackAp> {
    if results.is_empty() {
        return Err(Error::InvalidInput("no annotations to evaluate".into()));
    }
    let mut preds = ranked(results, iou_threshold)?;
    preds.sort_by(|a, b| b.score.total_cmp(&a.score));
    let total = results.len() as f64;
    let mut claimed = vec![false; results.len()];
    let mut tp = 0usize;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    let mut i = 0;
    while i < preds.len() {
        let mut j = i;
        while j < preds.len() && preds[j].score == preds[i].score {
            let p = &preds[j];
            if p.qualifies && !claimed[p.annotation] {
                claimed[p.annotation] = true;
                tp += 1;
            }
            j += 1;
        }
        curve.push((tp as f64 / total, tp as f64 / j as f64));
        i = j;
    }
    Ok(TrackAp {
        ap: all_point_ap(&curve),
        annotations: results.len(),
        predictions: preds.len(),
        true_positives: tp,
    })
}

/// Area under the interpolated precision curve; `curve` holds
/// (recall, precision) by descending score cutoff.
fn all_point_ap(curve: &[(f64, f64)]) -> f64 {
    let mut best = 0.0f64;
    let mut interp = vec![0.0; curve.len()];
    for (k, &(_, p)) in curve.iter().enumerate().rev() {
        best = best.max(p);
        interp[k] = best;
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (k, &(r, _)) in curve.iter().enumerate() {
        ap += (r - prev) * interp[k];
        prev = r;
    }
    ap
}

/// Mean AP over IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn evaluate_track_coco(results: &[AnnotationResult]) -> Result<f64> {
    let mut sum = 0.0;
    for t in 0..10 {
        sum += evaluate_track(results, 0.5 + 0.05 * t as f64)?.ap;
    }
    Ok(sum / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub tracks: BTreeMap<String, TrackAp>,
    /// Unweighted mean of the per-track AP.
    pub mean_ap: f64,
}

impl ApResult {
    pub fn from_tracks(tracks: BTreeMap<String, TrackAp>) -> Self {
        let mean_ap = if tracks.is_empty() {
            0.0
        } else {
            tracks.values().map(|t| t.ap).sum::<f64>() / tracks.len() as f64
        };
        Self { tracks, mean_ap }
    }
}
