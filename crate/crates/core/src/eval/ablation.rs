//! Train-and-evaluate harness over model variants on the synthetic
//! benchmark, with the localization diagnostics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::benchmark::{generate_synthetic_benchmark, Dataset, Split, WorldConfig};
use super::{evaluate_track, AnnotationResult, ApResult, ScoredBox};
use crate::boxes::{iou, BBox};
use crate::encoders::{embed_vocabulary, CachedTextEncoder, SpatialFeatureMap, TextEncoder};
use crate::error::{Error, Result};
use crate::fgad::{fuse_with, score_predictions, FusionConfig, FusionStrategy};
use crate::model::{DetectionVocab, Detector, DetectorConfig, QueryMode, Trainable};
use crate::training::{train_stage1, train_stage2, TrainConfig};

/// Coarse and fine scores of one detected box over an annotation's vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub coarse: Vec<f64>,
    pub fine: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredAnnotation {
    pub image_id: String,
    pub track: String,
    #[serde(rename = "box")]
    pub gt_box: BBox,
    pub positive: usize,
    pub classes: Vec<String>,
    pub predictions: Vec<ScoredPrediction>,
}

/// Runs the detector once per test annotation, on that annotation's own
/// vocabulary, and keeps both score vectors of every kept box.
pub fn score_dataset(
    detector: &Detector,
    dataset: &Dataset,
    test_maps: &[SpatialFeatureMap],
    text: &dyn TextEncoder,
    fusion: &FusionConfig,
) -> Result<Vec<ScoredAnnotation>> {
    let text = CachedTextEncoder::new(text);
    let images: Vec<_> = dataset.split(Split::Test).zip(test_maps).collect();
    let per_image = images
        .par_iter()
        .map(|(img, map)| {
            let mut fw = detector.forward(Trainable::NONE);
            let state = fw.encode(map)?;
            let mut out = Vec::with_capacity(img.annotations.len());
            for ann in &img.annotations {
                let (classes, positive) = ann.vocabulary();
                let emb = embed_vocabulary(&classes, &text, &detector.params.projection)?;
                let vocab = DetectionVocab::new(&classes, &emb, detector.config.query_mode)?;
                let preds = fw.detect(&state, &vocab)?;
                let scored = score_predictions(&preds, map, &emb.refined_matrix(), fusion)?;
                out.push(ScoredAnnotation {
                    image_id: img.image_id.clone(),
                    track: ann.track.clone(),
                    gt_box: ann.gt_box,
                    positive,
                    classes: classes.into_iter().map(|c| c.full_name).collect(),
                    predictions: scored
                        .into_iter()
                        .map(|p| ScoredPrediction {
                            bbox: p.bbox,
                            coarse: p.coarse_scores,
                            fine: p.fine_scores.unwrap_or_default(),
                        })
                        .collect(),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Final scores under `fusion`, grouped by track.
pub fn fused_results(scored: &[ScoredAnnotation], fusion: &FusionConfig) -> BTreeMap<String, Vec<AnnotationResult>> {
    let mut out: BTreeMap<String, Vec<AnnotationResult>> = BTreeMap::new();
    for a in scored {
        out.entry(a.track.clone()).or_default().push(AnnotationResult {
            gt_box: a.gt_box,
            positive: a.positive,
            predictions: a
                .predictions
                .iter()
                .map(|p| ScoredBox {
                    bbox: p.bbox,
                    scores: fuse_with(fusion, &p.coarse, &p.fine),
                })
                .collect(),
        });
    }
    out
}

pub fn map_of(scored: &[ScoredAnnotation], fusion: &FusionConfig, iou_threshold: f64) -> Result<ApResult> {
    let mut tracks = BTreeMap::new();
    for (name, results) in fused_results(scored, fusion) {
        tracks.insert(name, evaluate_track(&results, iou_threshold)?);
    }
    Ok(ApResult::from_tracks(tracks))
}

/// Mean IoU with the ground truth, and mean coarse score for the positive, of
/// the prediction matched to each annotation under the training matching cost
/// `-ln s_coarse + l1_weight · L1`. Annotations without predictions count as 0.
pub fn localization_diagnostics(scored: &[ScoredAnnotation], l1_weight: f64) -> Result<(f64, f64)> {
    if scored.is_empty() {
        return Ok((0.0, 0.0));
    }
    let cost = |p: &ScoredPrediction, a: &ScoredAnnotation| {
        let l1: f64 = p.bbox.to_array().iter().zip(a.gt_box.to_array()).map(|(x, y)| (x - y).abs()).sum();
        -p.coarse[a.positive].max(1e-12).ln() + l1_weight * l1
    };
    let (mut iou_sum, mut score_sum) = (0.0, 0.0);
    for a in scored {
        let best = a.predictions.iter().min_by(|x, y| cost(x, a).total_cmp(&cost(y, a)));
        if let Some(p) = best {
            iou_sum += iou(&p.bbox, &a.gt_box)?;
            score_sum += p.coarse[a.positive];
        }
    }
    let n = scored.len() as f64;
    Ok((iou_sum / n, score_sum / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Variant {
    Full,
    NoAef,
    NoCgod,
    NoProjection,
    /// The full model scored at another fusion weight.
    Alpha(f64),
    /// The full model with arithmetic instead of geometric fusion.
    WeightedAverage,
    /// The coarse-pretrained model, queried and scored with full names.
    Stage1FullName,
}

impl Variant {
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoAef => "no_AEF".into(),
            Variant::NoCgod => "no_CGOD".into(),
            Variant::NoProjection => "no_projection".into(),
            Variant::Alpha(a) => format!("alpha_{a}"),
            Variant::WeightedAverage => "weighted_average".into(),
            Variant::Stage1FullName => "stage1_full_name".into(),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "full" => Variant::Full,
            "no_AEF" | "no_aef" => Variant::NoAef,
            "no_CGOD" | "no_cgod" => Variant::NoCgod,
            "no_projection" => Variant::NoProjection,
            "weighted_average" => Variant::WeightedAverage,
            "stage1_full_name" => Variant::Stage1FullName,
            other => match other.strip_prefix("alpha_").map(str::parse::<f64>) {
                Some(Ok(a)) if (0.0..=1.0).contains(&a) => Variant::Alpha(a),
                _ => return Err(Error::Config(format!("unknown ablation variant {other:?}"))),
            },
        })
    }

    pub fn standard_suite() -> Vec<Variant> {
        let mut v = vec![Variant::Full, Variant::NoAef, Variant::NoCgod, Variant::NoProjection];
        v.extend([0.2, 0.4, 0.6, 0.8].map(Variant::Alpha));
        v.push(Variant::WeightedAverage);
        v.push(Variant::Stage1FullName);
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub world: WorldConfig,
    pub seeds: Vec<u64>,
    pub detector: DetectorConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    pub fusion: FusionConfig,
    pub iou_threshold: f64,
    pub variants: Vec<Variant>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            seeds: vec![0, 1, 2],
            detector: DetectorConfig::default(),
            stage1: TrainConfig::stage1(),
            stage2: TrainConfig::stage2(),
            fusion: FusionConfig::default(),
            iou_threshold: 0.5,
            variants: Variant::standard_suite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Option<ApResult>,
    pub mean_iou: Option<f64>,
    pub mean_score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub seeds: Vec<SeedOutcome>,
    /// Means over the seeds that succeeded.
    pub mean_ap: f64,
    pub mean_iou: f64,
    pub mean_score: f64,
    pub track_ap: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Fixed-width table: one row per variant, mAP in points per track.
    pub fn table(&self) -> String {
        let tracks: Vec<String> = self
            .rows
            .iter()
            .find_map(|r| (!r.track_ap.is_empty()).then(|| r.track_ap.keys().cloned().collect()))
            .unwrap_or_default();
        let mut s = format!("{:<18}", "variant");
        for t in &tracks {
            let _ = write!(s, " {:>12}", t);
        }
        let _ = writeln!(s, " {:>8} {:>9} {:>10}", "mAP", "mean_IoU", "mean_score");
        for r in &self.rows {
            let _ = write!(s, "{:<18}", r.name);
            for t in &tracks {
                match r.track_ap.get(t) {
                    Some(v) => {
                        let _ = write!(s, " {:>12.2}", 100.0 * v);
                    }
                    None => {
                        let _ = write!(s, " {:>12}", "-");
                    }
                }
            }
            let failed = r.seeds.iter().filter(|o| o.error.is_some()).count();
            let _ = write!(s, " {:>8.2} {:>9.4} {:>10.4}", 100.0 * r.mean_ap, r.mean_iou, r.mean_score);
            if failed > 0 {
                let _ = write!(s, "  ({failed} seed(s) failed)");
            }
            s.push('\n');
        }
        s
    }
}

struct SeedContext {
    dataset: Dataset,
    train_maps: Vec<SpatialFeatureMap>,
    test_maps: Vec<SpatialFeatureMap>,
    stage1: Detector,
}

fn prepare_seed(cfg: &AblationConfig, seed: u64) -> Result<SeedContext> {
    let world = WorldConfig {
        seed,
        ..cfg.world.clone()
    };
    let dataset = generate_synthetic_benchmark(&world)?;
    let encoder = dataset.encoder();
    let train_maps = dataset.render(&encoder, Split::Train)?;
    let test_maps = dataset.render(&encoder, Split::Test)?;
    let mut detector = Detector::new(DetectorConfig {
        init_seed: seed,
        query_mode: QueryMode::Subject,
        ..cfg.detector.clone()
    })?;
    let samples = dataset.stage1_samples(&train_maps, encoder.text_encoder())?;
    let stage1 = TrainConfig {
        seed,
        ..cfg.stage1.clone()
    };
    train_stage1(&mut detector, &samples, &stage1)?;
    Ok(SeedContext {
        dataset,
        train_maps,
        test_maps,
        stage1: detector,
    })
}

/// Stage 2 for one trained variant, starting from the shared stage-1 model.
fn train_variant(cfg: &AblationConfig, ctx: &SeedContext, variant: Variant, seed: u64) -> Result<Detector> {
    let mut det = ctx.stage1.clone();
    let mut stage2 = TrainConfig {
        seed,
        ..cfg.stage2.clone()
    };
    match variant {
        Variant::NoAef => det.config.use_aef = false,
        Variant::NoCgod => det.config.query_mode = QueryMode::FullName,
        Variant::NoProjection => stage2.freeze_projection = true,
        _ => {}
    }
    if variant == Variant::Stage1FullName {
        det.config.query_mode = QueryMode::FullName;
        return Ok(det);
    }
    let encoder = ctx.dataset.encoder();
    let samples = ctx.dataset.stage2_samples(&ctx.train_maps, encoder.text_encoder())?;
    train_stage2(&mut det, &samples, &[], &stage2)?;
    Ok(det)
}

fn outcome(
    seed: u64,
    scored: &Result<Vec<ScoredAnnotation>>,
    fusion: &FusionConfig,
    iou_threshold: f64,
    l1_weight: f64,
) -> SeedOutcome {
    let computed = scored.as_ref().map_err(|e| e.to_string()).and_then(|s| {
        let r = map_of(s, fusion, iou_threshold).map_err(|e| e.to_string())?;
        let (i, sc) = localization_diagnostics(s, l1_weight).map_err(|e| e.to_string())?;
        Ok((r, i, sc))
    });
    match computed {
        Ok((r, i, sc)) => SeedOutcome {
            seed,
            result: Some(r),
            mean_iou: Some(i),
            mean_score: Some(sc),
            error: None,
        },
        Err(e) => SeedOutcome {
            seed,
            result: None,
            mean_iou: None,
            mean_score: None,
            error: Some(e),
        },
    }
}

/// Trains and evaluates every variant for every seed. Each seed shares one
/// stage-1 model; inference-only variants reuse the full model's scores.
/// A failing variant is recorded and the rest proceed.
pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    cfg.fusion.validate()?;
    let mut per_variant: Vec<Vec<SeedOutcome>> = vec![Vec::new(); cfg.variants.len()];
    for &seed in &cfg.seeds {
        let ctx = match prepare_seed(cfg, seed) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("seed {seed}: shared stage failed: {e}");
                for v in per_variant.iter_mut() {
                    v.push(outcome(seed, &Err(Error::Backend(e.to_string())), &cfg.fusion, cfg.iou_threshold, cfg.stage1.match_l1_weight));
                }
                continue;
            }
        };
        let encoder = ctx.dataset.encoder();
        let mut trained: BTreeMap<String, Result<Vec<ScoredAnnotation>>> = BTreeMap::new();
        for (vi, &variant) in cfg.variants.iter().enumerate() {
            let base = match variant {
                Variant::Alpha(_) | Variant::WeightedAverage => Variant::Full,
                v => v,
            };
            let key = base.name();
            if !trained.contains_key(&key) {
                log::info!("seed {seed}: training {key}");
                let scored = train_variant(cfg, &ctx, base, seed).and_then(|det| {
                    score_dataset(&det, &ctx.dataset, &ctx.test_maps, encoder.text_encoder(), &cfg.fusion)
                });
                if let Err(e) = &scored {
                    log::warn!("seed {seed}: variant {key} failed: {e}");
                }
                trained.insert(key.clone(), scored);
            }
            let fusion = match variant {
                Variant::Alpha(a) => FusionConfig { alpha: a, ..cfg.fusion },
                Variant::WeightedAverage => FusionConfig {
                    strategy: FusionStrategy::WeightedAverage,
                    ..cfg.fusion
                },
                _ => cfg.fusion,
            };
            per_variant[vi].push(outcome(seed, &trained[&key], &fusion, cfg.iou_threshold, cfg.stage1.match_l1_weight));
        }
    }
    let rows = cfg
        .variants
        .iter()
        .zip(per_variant)
        .map(|(v, seeds)| {
            let ok: Vec<&SeedOutcome> = seeds.iter().filter(|o| o.result.is_some()).collect();
            let n = ok.len().max(1) as f64;
            let mut track_ap: BTreeMap<String, f64> = BTreeMap::new();
            for o in &ok {
                for (t, ap) in &o.result.as_ref().expect("filtered").tracks {
                    *track_ap.entry(t.clone()).or_default() += ap.ap / n;
                }
            }
            AblationRow {
                name: v.name(),
                mean_ap: ok.iter().map(|o| o.result.as_ref().expect("filtered").mean_ap).sum::<f64>() / n,
                mean_iou: ok.iter().filter_map(|o| o.mean_iou).sum::<f64>() / n,
                mean_score: ok.iter().filter_map(|o| o.mean_score).sum::<f64>() / n,
                track_ap,
                seeds,
            }
        })
        .collect();
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::standard_suite() {
            assert_eq!(Variant::parse(&v.name()).unwrap(), v);
        }
        assert!(Variant::parse("no_such").is_err());
    }

    #[test]
    fn diagnostics_use_the_matching_cost() {
        let gt = BBox::new(0.5, 0.5, 0.4, 0.4);
        let a = ScoredAnnotation {
            image_id: "i".into(),
            track: "Hard".into(),
            gt_box: gt,
            positive: 1,
            classes: vec!["a".into(), "b".into()],
            predictions: vec![
                ScoredPrediction {
                    bbox: BBox::new(0.1, 0.1, 0.1, 0.1),
                    coarse: vec![0.9, 0.2],
                    fine: vec![0.5, 0.5],
                },
                ScoredPrediction {
                    bbox: gt,
                    coarse: vec![0.1, 0.7],
                    fine: vec![0.5, 0.5],
                },
            ],
        };
        let (i, s) = localization_diagnostics(std::slice::from_ref(&a), 5.0).unwrap();
        assert!((i - 1.0).abs() < 1e-12);
        assert_eq!(s, 0.7);
        // with no box term the higher positive score wins, whatever the box
        let mut b = a;
        b.predictions[0].coarse[1] = 0.8;
        let (i, s) = localization_diagnostics(&[b], 0.0).unwrap();
        assert_eq!(i, 0.0);
        assert_eq!(s, 0.8);
    }
}
