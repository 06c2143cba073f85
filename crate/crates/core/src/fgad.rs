//! Fine-grained attribute discrimination.
//!
//! Each detected box is pooled from the frozen image features, compared
//! with the refined full-name embeddings, and the resulting distribution is
//! fused with the detector's coarse confidence.

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::cgod::Prediction;
use crate::encoders::SpatialFeatureMap;
use crate::error::{Error, Result};
use crate::llm::LlmBackend;
use crate::tensor::{cosine, normalized, softmax, Mat};

/// Floor applied to `s_fine` before taking its logarithm.
pub const FINE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub vector: Vec<f64>,
    pub bbox: BBox,
    pub cell_count: usize,
}

/// Pools the cells whose centers lie inside `bbox` and unit-normalizes the
/// result. A box that contains no cell center falls back to the cell under
/// its own center.
pub fn pool_region(map: &SpatialFeatureMap, bbox: &BBox, mode: PoolingMode) -> Result<RegionFeature> {
    if bbox.is_degenerate() {
        return Err(Error::InvalidInput(format!("degenerate box {bbox:?}")));
    }
    let mut cells = Vec::new();
    for r in 0..map.height {
        for c in 0..map.width {
            let (x, y) = map.cell_center(r, c);
            if bbox.contains_point(x, y) {
                cells.push(r * map.width + c);
            }
        }
    }
    if cells.is_empty() {
        let (cw, ch) = map.cell_size();
        let col = ((bbox.cx / cw).floor().max(0.0) as usize).min(map.width - 1);
        let row = ((bbox.cy / ch).floor().max(0.0) as usize).min(map.height - 1);
        cells.push(row * map.width + col);
    }
    let d = map.dim();
    let mut acc = match mode {
        PoolingMode::Mean => vec![0.0; d],
        PoolingMode::Max => vec![f64::NEG_INFINITY; d],
    };
    for &i in &cells {
        for (a, &x) in acc.iter_mut().zip(map.features.row(i)) {
            match mode {
                PoolingMode::Mean => *a += x,
                PoolingMode::Max => *a = a.max(x),
            }
        }
    }
    if mode == PoolingMode::Mean {
        let n = cells.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
    }
    let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return Err(Error::InvalidInput("pooled region is not normalizable".into()));
    }
    Ok(RegionFeature {
        vector: acc.into_iter().map(|x| x / norm).collect(),
        bbox: *bbox,
        cell_count: cells.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// `s_coarse^α · s_fine^(1−α)`.
    #[default]
    Multiplicative,
    /// `α · s_coarse + (1−α) · s_fine`.
    WeightedAverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub m_fine: f64,
    pub strategy: FusionStrategy,
    pub pooling: PoolingMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            m_fine: 100.0,
            strategy: FusionStrategy::Multiplicative,
            pooling: PoolingMode::Mean,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.m_fine > 0.0) {
            return Err(Error::Config(format!("m_fine {} must be positive", self.m_fine)));
        }
        Ok(())
    }
}

/// `l_i = m · cos(region, t̂_i)`, `s = softmax(l)`. The softmax subtracts the
/// row maximum, so these logits are not clamped: clamping would merge classes
/// whose scaled cosines both exceed the clamp.
pub fn fine_scores(region: &[f64], refined_full: &Mat, m_fine: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if refined_full.rows() == 0 {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    if refined_full.cols() != region.len() {
        return Err(Error::Shape(format!(
            "region dimension {} vs embeddings {}",
            region.len(),
            refined_full.cols()
        )));
    }
    let logits: Vec<f64> = (0..refined_full.rows())
        .map(|i| m_fine * cosine(region, refined_full.row(i)))
        .collect();
    let scores = softmax(&logits);
    Ok((logits, scores))
}

/// Elementwise weighted geometric mean, evaluated in log space.
pub fn fuse_scores(s_coarse: &[f64], s_fine: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 1.0 {
        return s_coarse.to_vec();
    }
    s_coarse
        .iter()
        .zip(s_fine)
        .map(|(&c, &f)| (alpha * c.ln() + (1.0 - alpha) * f.max(FINE_FLOOR).ln()).exp())
        .collect()
}

pub fn fuse_weighted_average(s_coarse: &[f64], s_fine: &[f64], alpha: f64) -> Vec<f64> {
    s_coarse
        .iter()
        .zip(s_fine)
        .map(|(&c, &f)| alpha * c + (1.0 - alpha) * f)
        .collect()
}

pub fn fuse_with(config: &FusionConfig, s_coarse: &[f64], s_fine: &[f64]) -> Vec<f64> {
    match config.strategy {
        FusionStrategy::Multiplicative => fuse_scores(s_coarse, s_fine, config.alpha),
        FusionStrategy::WeightedAverage => fuse_weighted_average(s_coarse, s_fine, config.alpha),
    }
}

/// Attaches `s_fine` and `s_final` to every prediction, in order. A box whose
/// pooled feature cannot be normalized gets a uniform `s_fine`.
pub fn score_predictions(
    predictions: &[Prediction],
    map: &SpatialFeatureMap,
    refined_full: &Mat,
    config: &FusionConfig,
) -> Result<Vec<Prediction>> {
    config.validate()?;
    let n = refined_full.rows();
    predictions
        .iter()
        .map(|p| {
            if p.coarse_scores.len() != n {
                return Err(Error::Shape(format!(
                    "prediction has {} coarse scores for {n} classes",
                    p.coarse_scores.len()
                )));
            }
            let fine = match pool_region(map, &p.bbox, config.pooling) {
                Ok(region) => fine_scores(&region.vector, refined_full, config.m_fine)?.1,
                Err(Error::InvalidInput(_)) => vec![1.0 / n as f64; n],
                Err(e) => return Err(e),
            };
            let fused = fuse_with(config, &p.coarse_scores, &fine);
            let mut out = p.clone();
            out.fine_scores = Some(fine);
            out.final_scores = Some(fused);
            Ok(out)
        })
        .collect()
}

/// Identifies the crop a generative scorer is asked about.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRef {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// A vision-language model that reports the probability of answering "yes".
pub trait GenerativeScorer: Send + Sync {
    fn yes_probability(&self, region: &RegionRef, caption: &str) -> Result<f64>;
}

pub fn generative_prompt(region: &RegionRef, caption: &str) -> String {
    let b = region.bbox;
    format!(
        "image {} region [{:.4}, {:.4}, {:.4}, {:.4}]\nDoes this image match the attributes: {}? Answer yes or no.",
        region.image_id, b.cx, b.cy, b.w, b.h, caption
    )
}

/// Scorer over any text backend. The reply must contain the yes-probability
/// as a number in `[0, 1]`, optionally as `p_yes: <number>`.
pub struct TextBackendScorer<B> {
    backend: B,
}

impl<B: LlmBackend> TextBackendScorer<B> {
    pub fn new(backend: B) -> Self {
        Self { backend }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }
}

fn parse_probability(reply: &str) -> Option<f64> {
    let text = reply.trim();
    let text = text.strip_prefix("p_yes:").unwrap_or(text).trim();
    text.parse::<f64>().ok().filter(|p| (0.0..=1.0).contains(p))
}

impl<B: LlmBackend> GenerativeScorer for TextBackendScorer<B> {
    fn yes_probability(&self, region: &RegionRef, caption: &str) -> Result<f64> {
        let reply = self.backend.complete(&generative_prompt(region, caption))?;
        parse_probability(&reply)
            .ok_or_else(|| Error::Backend(format!("no yes-probability in reply {reply:?}")))
    }
}

/// Per-caption yes-probabilities renormalized by `softmax(m_fine · p)`.
pub fn generative_fine_scores(
    scorer: &dyn GenerativeScorer,
    region: &RegionRef,
    captions: &[&str],
    m_fine: f64,
) -> Result<Vec<f64>> {
    if captions.is_empty() {
        return Err(Error::InvalidInput("empty vocabulary".into()));
    }
    let logits = captions
        .iter()
        .map(|c| scorer.yes_probability(region, c).map(|p| m_fine * p))
        .collect::<Result<Vec<_>>>()?;
    Ok(softmax(&logits))
}

/// [`score_predictions`] with a generative scorer in place of the pooled similarity.
pub fn score_predictions_generative(
    predictions: &[Prediction],
    image_id: &str,
    captions: &[&str],
    scorer: &dyn GenerativeScorer,
    config: &FusionConfig,
) -> Result<Vec<Prediction>> {
    config.validate()?;
    predictions
        .iter()
        .map(|p| {
            if p.coarse_scores.len() != captions.len() {
                return Err(Error::Shape("coarse scores and captions differ in length".into()));
            }
            let region = RegionRef { image_id: image_id.to_string(), bbox: p.bbox };
            let fine = generative_fine_scores(scorer, &region, captions, config.m_fine)?;
            let mut out = p.clone();
            out.final_scores = Some(fuse_with(config, &p.coarse_scores, &fine));
            out.fine_scores = Some(fine);
            Ok(out)
        })
        .collect()
}

/// Unit-normalized copy of a vector, or an error for the zero vector.
pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    normalized(v).ok_or_else(|| Error::InvalidInput("zero vector".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{ReplayBackend, TranscriptRecord};
    use crate::tensor::argmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map_from(rows: Vec<Vec<f64>>, h: usize, w: usize) -> SpatialFeatureMap {
        SpatialFeatureMap::new(h, w, 10, (h * 10, w * 10), Mat::from_rows(&rows)).unwrap()
    }

    #[test]
    fn pooling_reference_cases() {
        let rows = vec![vec![3.0, 0.0], vec![0.0, 2.0], vec![1.0, 1.0], vec![-1.0, 0.0]];
        let map = map_from(rows, 2, 2);
        let one = pool_region(&map, &BBox::from_corners(0.0, 0.0, 0.5, 0.5), PoolingMode::Mean).unwrap();
        assert_eq!(one.cell_count, 1);
        assert_eq!(one.vector, vec![1.0, 0.0]);

        let all = pool_region(&map, &BBox::new(0.5, 0.5, 1.0, 1.0), PoolingMode::Mean).unwrap();
        assert_eq!(all.cell_count, 4);
        let n = (0.75f64 * 0.75 + 0.75 * 0.75).sqrt();
        assert!((all.vector[0] - 0.75 / n).abs() < 1e-12);

        // small box between centers falls back to the cell under its center
        let tiny = pool_region(&map, &BBox::new(0.6, 0.1, 0.05, 0.05), PoolingMode::Mean).unwrap();
        assert_eq!(tiny.cell_count, 1);
        assert_eq!(tiny.vector, vec![0.0, 1.0]);

        assert!(pool_region(&map, &BBox::new(0.5, 0.5, 0.0, 0.2), PoolingMode::Mean).is_err());

        let cancel = map_from(vec![vec![1.0, 2.0], vec![-1.0, -2.0]], 1, 2);
        let err = pool_region(&cancel, &BBox::new(0.5, 0.5, 1.0, 1.0), PoolingMode::Mean).unwrap_err();
        assert!(err.to_string().contains("normalizable"));

        let max = pool_region(&map, &BBox::new(0.5, 0.5, 1.0, 1.0), PoolingMode::Max).unwrap();
        let n = (9.0f64 + 4.0).sqrt();
        assert!((max.vector[0] - 3.0 / n).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn uniform_map_pools_to_its_direction(cx in 0.05f64..0.95, cy in 0.05f64..0.95, w in 0.01f64..1.0, h in 0.01f64..1.0) {
            let v = vec![0.3, -0.4, 1.2];
            let map = map_from(vec![v.clone(); 16], 4, 4);
            let r = pool_region(&map, &BBox::new(cx, cy, w, h), PoolingMode::Mean).unwrap();
            let u = unit(&v).unwrap();
            for (a, b) in r.vector.iter().zip(&u) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fine_scores_reference_cases() {
        let one = Mat::row_vector(vec![0.0, 1.0]);
        assert_eq!(fine_scores(&[1.0, 0.0], &one, 100.0).unwrap().1, vec![1.0]);

        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![0.9, (1.0f64 - 0.81).sqrt()]]);
        let (l, s) = fine_scores(&[1.0, 0.0], &t, 100.0).unwrap();
        assert!((l[0] - 100.0).abs() < 1e-9 && (l[1] - 90.0).abs() < 1e-9);
        let e = (-10.0f64).exp();
        assert!((s[0] - 1.0 / (1.0 + e)).abs() < 1e-9);
        assert!((s[0] - 0.9999546).abs() < 1e-7);
        assert!((s[1] - 0.0000454).abs() < 1e-7);

        let t = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let (_, s) = fine_scores(&[1.0, 0.0, 0.0], &t, 100.0).unwrap();
        assert_eq!(argmax(&s), 0);
    }

    proptest! {
        #[test]
        fn fine_scores_are_a_distribution(seed in any::<u64>(), n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = Mat::from_vec(n, 5, (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect());
            let r: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (l, s) = fine_scores(&r, &t, 7.0).unwrap();
            prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let shifted = softmax(&l.iter().map(|x| x + 3.5).collect::<Vec<_>>());
            prop_assert_eq!(argmax(&shifted), argmax(&s));
            for (a, b) in shifted.iter().zip(&s) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fusion_reference_cases() {
        for alpha in [0.0, 0.3, 0.6, 1.0] {
            assert!((fuse_scores(&[0.5], &[0.5], alpha)[0] - 0.5).abs() < 1e-12);
        }
        assert_eq!(fuse_scores(&[0.3, 0.8], &[0.9, 0.1], 1.0), vec![0.3, 0.8]);
        let f = fuse_scores(&[0.8], &[0.3], 0.6)[0];
        assert!((f - (0.6 * 0.8f64.ln() + 0.4 * 0.3f64.ln()).exp()).abs() < 1e-9);
        assert!((f - 0.540).abs() < 1e-3);
        assert!(fuse_scores(&[0.9], &[0.0], 0.6)[0] > 0.0);
        assert_eq!(fuse_weighted_average(&[0.8], &[0.4], 0.5), vec![0.6000000000000001]);
    }

    proptest! {
        #[test]
        fn fusion_properties(c in 1e-6f64..1.0, f in 0.0f64..1.0, d in 0.0f64..0.5, alpha in 0.0f64..1.0, scale in 0.01f64..1.0) {
            let base = fuse_scores(&[c], &[f], alpha)[0];
            prop_assert!(fuse_scores(&[(c + d).min(1.0)], &[f], alpha)[0] >= base);
            prop_assert!(fuse_scores(&[c], &[(f + d).min(1.0)], alpha)[0] >= base);
            prop_assert!((fuse_scores(&[c], &[c], alpha)[0] - c).abs() < 1e-12);

            let sc = [c, 0.5, 0.9];
            let sf = [f.max(1e-3), 0.2, 0.05];
            let scaled: Vec<f64> = sf.iter().map(|x| x * scale).collect();
            prop_assert_eq!(argmax(&fuse_scores(&sc, &sf, alpha)), argmax(&fuse_scores(&sc, &scaled, alpha)));
        }

        #[test]
        fn class_permutation_is_equivariant(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4;
            let t = Mat::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
            let r: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sc: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
            let perm = [2usize, 0, 3, 1];
            let tp = Mat::from_rows(&perm.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>());
            let scp: Vec<f64> = perm.iter().map(|&i| sc[i]).collect();
            let (_, sf) = fine_scores(&r, &t, 10.0).unwrap();
            let (_, sfp) = fine_scores(&r, &tp, 10.0).unwrap();
            let fin = fuse_scores(&sc, &sf, 0.6);
            let finp = fuse_scores(&scp, &sfp, 0.6);
            for (slot, &i) in perm.iter().enumerate() {
                prop_assert!((sfp[slot] - sf[i]).abs() < 1e-12);
                prop_assert!((finp[slot] - fin[i]).abs() < 1e-12);
            }
        }
    }

    fn prediction(bbox: BBox, coarse: Vec<f64>) -> Prediction {
        Prediction {
            embedding: vec![],
            bbox,
            coarse_logits: coarse.iter().map(|s| (s / (1.0 - s)).ln()).collect(),
            coarse_scores: coarse,
            fine_scores: None,
            final_scores: None,
            source_cell: (0, 0),
            matched_class: 0,
        }
    }

    #[test]
    fn score_predictions_keeps_order_and_handles_degenerate_regions() {
        let map = map_from(vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]], 2, 2);
        let t = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let preds = vec![
            prediction(BBox::new(0.5, 0.25, 1.0, 0.5), vec![0.7, 0.6]),
            prediction(BBox::new(0.25, 0.75, 0.5, 0.5), vec![0.2, 0.9]),
        ];
        let cfg = FusionConfig::default();
        let out = score_predictions(&preds, &map, &t, &cfg).unwrap();
        assert_eq!(out[0].fine_scores.as_deref(), Some(&[0.5, 0.5][..]));
        assert_eq!(argmax(out[1].final_scores.as_ref().unwrap()), 1);
        assert_eq!(out[1].bbox, preds[1].bbox);

        let boundary = FusionConfig { alpha: 1.0, ..cfg };
        for p in score_predictions(&preds, &map, &t, &boundary).unwrap() {
            assert_eq!(p.final_scores.unwrap(), p.coarse_scores);
        }
        assert!(FusionConfig { alpha: 1.5, ..cfg }.validate().is_err());
    }

    struct Fixed(Vec<(String, f64)>);

    impl GenerativeScorer for Fixed {
        fn yes_probability(&self, _: &RegionRef, caption: &str) -> Result<f64> {
            self.0
                .iter()
                .find(|(c, _)| c == caption)
                .map(|(_, p)| *p)
                .ok_or_else(|| Error::Backend("missing".into()))
        }
    }

    #[test]
    fn oracle_generative_backend_matches_ideal_fine_scores() {
        let captions = ["red mug", "blue mug", "green mug"];
        let oracle = Fixed(vec![("red mug".into(), 1.0), ("blue mug".into(), 0.0), ("green mug".into(), 0.0)]);
        let preds = vec![
            prediction(BBox::new(0.3, 0.3, 0.2, 0.2), vec![0.9, 0.9, 0.9]),
            prediction(BBox::new(0.7, 0.7, 0.2, 0.2), vec![0.4, 0.4, 0.4]),
        ];
        let cfg = FusionConfig::default();
        let out = score_predictions_generative(&preds, "img", &captions, &oracle, &cfg).unwrap();
        let ideal = softmax(&[100.0, 0.0, 0.0]);
        for p in &out {
            assert_eq!(p.fine_scores.as_deref(), Some(ideal.as_slice()));
            assert_eq!(argmax(p.final_scores.as_ref().unwrap()), 0);
        }

        let flat = Fixed(captions.iter().map(|c| (c.to_string(), 0.5)).collect());
        let out = score_predictions_generative(&preds, "img", &captions, &flat, &cfg).unwrap();
        assert!(out[0].final_scores.as_ref().unwrap()[0] > out[1].final_scores.as_ref().unwrap()[0]);
        assert!(generative_fine_scores(&flat, &RegionRef { image_id: "i".into(), bbox: preds[0].bbox }, &["other"], 100.0).is_err());
    }

    #[test]
    fn replayed_transcript_gives_identical_scores() {
        let region = RegionRef { image_id: "img7".into(), bbox: BBox::new(0.5, 0.5, 0.4, 0.3) };
        let captions: Vec<String> = (0..10).map(|i| format!("caption {i}")).collect();
        let records: Vec<TranscriptRecord> = captions
            .iter()
            .enumerate()
            .map(|(i, c)| TranscriptRecord {
                request: generative_prompt(&region, c),
                response: format!("p_yes: {}", i as f64 / 10.0),
            })
            .collect();
        let refs: Vec<&str> = captions.iter().map(|s| s.as_str()).collect();
        let run = || {
            let scorer = TextBackendScorer::new(ReplayBackend::new(records.clone()));
            generative_fine_scores(&scorer, &region, &refs, 100.0).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(argmax(&a), 9);

        let broken = TextBackendScorer::new(ReplayBackend::new(vec![TranscriptRecord {
            request: generative_prompt(&region, "x"),
            response: "maybe".into(),
        }]));
        assert!(broken.yes_probability(&region, "x").is_err());
    }
}
