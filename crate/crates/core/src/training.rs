//! Two-stage training: detection losses on coarse supervision, then the
//! binary fine loss with the projection head unfrozen.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::encoders::{EmbeddingSet, SpatialFeatureMap};
use crate::error::{Error, Result};
use crate::fgad::{pool_region, PoolingMode, FINE_FLOOR};
use crate::model::{DetectionVocab, Detector, ParamGroup, QueryMode, Selection, Trainable};
use crate::tensor::Mat;
use crate::vocabulary::FineGrainedClass;

/// One training image with its own vocabulary.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image_id: String,
    pub map: SpatialFeatureMap,
    pub classes: Vec<FineGrainedClass>,
    pub embeddings: EmbeddingSet,
    pub gt_boxes: Vec<BBox>,
    /// Index into `classes` of every object's fine-grained label.
    pub gt_fine_ids: Vec<usize>,
    /// Whether the fine loss applies (false for coarse co-training data).
    pub fine_supervised: bool,
}

impl TrainSample {
    pub fn new(
        image_id: impl Into<String>,
        map: SpatialFeatureMap,
        classes: Vec<FineGrainedClass>,
        embeddings: EmbeddingSet,
        gt_boxes: Vec<BBox>,
        gt_fine_ids: Vec<usize>,
        fine_supervised: bool,
    ) -> Result<Self> {
        if gt_boxes.len() != gt_fine_ids.len() {
            return Err(Error::Shape(format!(
                "{} boxes but {} labels",
                gt_boxes.len(),
                gt_fine_ids.len()
            )));
        }
        if classes.len() != embeddings.len() {
            return Err(Error::Shape("classes and embeddings differ in length".into()));
        }
        if let Some(&bad) = gt_fine_ids.iter().find(|&&i| i >= classes.len()) {
            return Err(Error::InvalidInput(format!("label {bad} outside a vocabulary of {}", classes.len())));
        }
        if let Some(b) = gt_boxes.iter().find(|b| b.is_degenerate()) {
            return Err(Error::InvalidInput(format!("degenerate ground-truth box {b:?}")));
        }
        Ok(Self {
            image_id: image_id.into(),
            map,
            classes,
            embeddings,
            gt_boxes,
            gt_fine_ids,
            fine_supervised,
        })
    }

    pub fn vocab(&self, mode: QueryMode) -> Result<DetectionVocab> {
        DetectionVocab::new(&self.classes, &self.embeddings, mode)
    }

    /// Group index of every object under `vocab`.
    pub fn gt_subject_ids(&self, vocab: &DetectionVocab) -> Vec<usize> {
        self.gt_fine_ids.iter().map(|&c| vocab.class_group[c]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub class: f64,
    pub box_l1: f64,
    pub fine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            class: 1.0,
            box_l1: 5.0,
            fine: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: u8,
    pub iterations: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Weight of the L1 term in the matching cost.
    pub match_l1_weight: f64,
    pub alpha: f64,
    pub m_fine: f64,
    pub pooling: PoolingMode,
    pub seed: u64,
    /// Mix coarse samples into stage-2 batches.
    pub co_training: bool,
    /// Keep the projection head at its current value in stage 2.
    pub freeze_projection: bool,
    /// Rescale the batch gradient to at most this global norm.
    pub clip_norm: Option<f64>,
    /// A batch loss above this (or non-finite) aborts training.
    pub max_loss: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::stage1()
    }
}

impl TrainConfig {
    pub fn stage1() -> Self {
        Self {
            stage: 1,
            iterations: 500,
            learning_rate: 0.2,
            batch_size: 4,
            weights: LossWeights::default(),
            match_l1_weight: 5.0,
            alpha: 0.6,
            m_fine: 100.0,
            pooling: PoolingMode::Mean,
            seed: 0,
            co_training: false,
            freeze_projection: false,
            clip_norm: Some(1.0),
            max_loss: 1e4,
        }
    }

    pub fn stage2() -> Self {
        Self {
            stage: 2,
            iterations: 300,
            weights: LossWeights {
                fine: 1.0,
                ..LossWeights::default()
            },
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.stage {
            1 if self.weights.fine != 0.0 => {
                return Err(Error::Config("stage 1 requires fine-loss weight 0".into()))
            }
            1 | 2 => {}
            s => return Err(Error::Config(format!("stage must be 1 or 2, got {s}"))),
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be a finite non-negative number".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let w = &self.weights;
        if [w.class, w.box_l1, w.fine, self.match_l1_weight].iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        Trainable {
            projection: self.stage == 2 && !self.freeze_projection,
            ..Trainable::ALL
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column
/// (rows ≤ columns). Returns the column of each row.
pub fn hungarian(cost: &Mat) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(Error::InvalidInput(format!("{n} rows cannot be assigned to {m} columns")));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // potentials over 1-based indices; column 0 is a virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// One-to-one assignment of ground truths to predictions. `group_logits`
/// is `k × G`; the result lists `(prediction, ground truth)` pairs ordered
/// by ground truth.
pub fn match_predictions(
    group_logits: &Mat,
    boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_groups: &[usize],
    l1_weight: f64,
) -> Result<Vec<(usize, usize)>> {
    let k = group_logits.rows();
    if k == 0 || boxes.len() != k {
        return Err(Error::InvalidInput(format!("{k} logit rows and {} boxes", boxes.len())));
    }
    if gt_boxes.len() != gt_groups.len() {
        return Err(Error::Shape("ground-truth boxes and labels differ in length".into()));
    }
    if gt_boxes.len() > k {
        return Err(Error::InvalidInput(format!(
            "{} ground truths but only {k} predictions",
            gt_boxes.len()
        )));
    }
    let mut cost = Mat::zeros(gt_boxes.len(), k);
    for (t, (gb, &grp)) in gt_boxes.iter().zip(gt_groups).enumerate() {
        for (j, b) in boxes.iter().enumerate() {
            // −ln σ(x) = softplus(−x)
            cost.set(t, j, softplus(-group_logits.get(j, grp)) + l1_weight * b.l1(gb));
        }
    }
    let cols = hungarian(&cost)?;
    Ok(cols.into_iter().enumerate().map(|(t, j)| (j, t)).collect())
}

/// Detection loss terms as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct DetectionLoss {
    /// Binary cross-entropy summed over groups, averaged over predictions.
    pub class: Var,
    /// L1 over matched boxes, averaged over matched pairs; `None` without matches.
    pub box_l1: Option<Var>,
}

pub fn detection_loss(
    g: &mut Graph,
    group_logits: Var,
    boxes: Var,
    matches: &[(usize, usize)],
    gt_boxes: &[BBox],
    gt_groups: &[usize],
) -> DetectionLoss {
    let (k, groups) = g.value(group_logits).shape();
    let mut targets = Mat::zeros(k, groups);
    for &(j, t) in matches {
        targets.set(j, gt_groups[t], 1.0);
    }
    let bce = g.bce_with_logits(group_logits, targets);
    let bce = g.sum(bce);
    let class = g.scale(bce, 1.0 / k as f64);
    let box_l1 = (!matches.is_empty()).then(|| {
        let at: Vec<(usize, usize)> = matches.iter().flat_map(|&(j, _)| (0..4).map(move |c| (j, c))).collect();
        let picked = g.pick(boxes, &at);
        let target: Vec<f64> = matches.iter().flat_map(|&(_, t)| gt_boxes[t].to_array()).collect();
        let target = g.constant(Mat::row_vector(target));
        let diff = g.sub(picked, target);
        let diff = g.abs(diff);
        let s = g.sum(diff);
        g.scale(s, 1.0 / matches.len() as f64)
    });
    DetectionLoss { class, box_l1 }
}

/// `−Σ_j (α ln s_coarse[gt] + (1−α) ln s_fine[gt])`, with both scores
/// floored at 1e-12.
pub fn fine_loss(s_coarse: &[Vec<f64>], s_fine: &[Vec<f64>], gt: &[usize], alpha: f64) -> Result<f64> {
    if s_coarse.len() != gt.len() || s_fine.len() != gt.len() {
        return Err(Error::Shape("one score row per matched prediction required".into()));
    }
    let mut total = 0.0;
    for ((sc, sf), &c) in s_coarse.iter().zip(s_fine).zip(gt) {
        if c >= sc.len() || c >= sf.len() {
            return Err(Error::InvalidInput(format!("label {c} outside the score vector")));
        }
        total -= alpha * sc[c].max(FINE_FLOOR).ln() + (1.0 - alpha) * sf[c].max(FINE_FLOOR).ln();
    }
    Ok(total)
}

/// Graph form of [`fine_loss`]. `coarse_logits` are the clamped group
/// logits, `regions` unit pooled features (`m × d`, one per matched
/// prediction), `refined` the refined full-name rows (`n × d`).
#[allow(clippy::too_many_arguments)]
pub fn fine_loss_graph(
    g: &mut Graph,
    coarse_logits: Var,
    class_group: &[usize],
    matched: &[usize],
    regions: Var,
    refined: Var,
    gt_fine: &[usize],
    alpha: f64,
    m_fine: f64,
) -> Var {
    let floor = FINE_FLOOR.ln();
    let at: Vec<(usize, usize)> = matched.iter().zip(gt_fine).map(|(&j, &c)| (j, class_group[c])).collect();
    let picked = g.pick(coarse_logits, &at);
    let lc = g.log_sigmoid(picked);
    let lc = g.clamp(lc, floor, 0.0);
    let cos = g.matmul_t(regions, refined);
    let logits = g.scale(cos, m_fine);
    let ls = g.log_softmax_rows(logits);
    let at: Vec<(usize, usize)> = gt_fine.iter().enumerate().map(|(i, &c)| (i, c)).collect();
    let lf = g.pick(ls, &at);
    let lf = g.clamp(lf, floor, 0.0);
    let a = g.scale(lc, -alpha);
    let b = g.scale(lf, alpha - 1.0);
    let both = g.add(a, b);
    g.sum(both)
}

/// Discrete decisions of one forward pass, replayable for gradient checks.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub selection: Selection,
    pub matches: Vec<(usize, usize)>,
    /// Pooled region feature of each match, `None` when pooling failed.
    pub regions: Vec<Option<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub class: f64,
    pub box_l1: f64,
    pub fine: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.total += s * o.total;
        self.class += s * o.class;
        self.box_l1 += s * o.box_l1;
        self.fine += s * o.fine;
    }
}

pub struct ImageLoss {
    pub parts: LossParts,
    /// Parameter gradients in [`crate::model::DetectorParams::named`] order.
    pub gradients: Option<Vec<Mat>>,
    pub frozen: Frozen,
}

/// Loss of one image, optionally with gradients. With `frozen`, the
/// selection, matching and pooling regions are replayed instead of recomputed.
pub fn image_loss(
    detector: &Detector,
    sample: &TrainSample,
    vocab: &DetectionVocab,
    config: &TrainConfig,
    trainable: Trainable,
    frozen: Option<&Frozen>,
    with_gradients: bool,
) -> Result<ImageLoss> {
    let mut fw = detector.forward(trainable);
    let state = fw.encode(&sample.map)?;
    let selection = match frozen {
        Some(f) => f.selection.clone(),
        None => fw.select(&state, vocab)?,
    };
    let out = fw.decode(&state, vocab, &selection)?;
    let gt_groups = sample.gt_subject_ids(vocab);
    let boxes_now: Vec<BBox> = {
        let b = fw.graph.value(out.boxes);
        (0..b.rows()).map(|r| BBox::from_array([b.get(r, 0), b.get(r, 1), b.get(r, 2), b.get(r, 3)])).collect()
    };
    let matches = match frozen {
        Some(f) => f.matches.clone(),
        None => match_predictions(
            fw.graph.value(out.group_logits),
            &boxes_now,
            &sample.gt_boxes,
            &gt_groups,
            config.match_l1_weight,
        )?,
    };
    let regions: Vec<Option<Vec<f64>>> = match frozen {
        Some(f) => f.regions.clone(),
        None if config.weights.fine > 0.0 && sample.fine_supervised => matches
            .iter()
            .map(|&(j, _)| pool_region(&sample.map, &boxes_now[j], config.pooling).ok().map(|r| r.vector))
            .collect(),
        None => vec![None; matches.len()],
    };

    let g = &mut fw.graph;
    let det = detection_loss(g, out.group_logits, out.boxes, &matches, &sample.gt_boxes, &gt_groups);
    let mut parts = LossParts {
        class: g.scalar(det.class),
        ..Default::default()
    };
    let mut total = g.scale(det.class, config.weights.class);
    if let Some(l1) = det.box_l1 {
        parts.box_l1 = g.scalar(l1);
        let t = g.scale(l1, config.weights.box_l1);
        total = g.add(total, t);
    }
    let used: Vec<usize> = (0..matches.len()).filter(|&i| regions[i].is_some()).collect();
    if config.weights.fine > 0.0 && sample.fine_supervised && !used.is_empty() {
        let rows: Vec<&[f64]> = used.iter().map(|&i| regions[i].as_deref().unwrap_or(&[])).collect();
        let region_mat = g.constant(Mat::from_rows(&rows));
        let matched: Vec<usize> = used.iter().map(|&i| matches[i].0).collect();
        let gt_fine: Vec<usize> = used.iter().map(|&i| sample.gt_fine_ids[matches[i].1]).collect();
        let refined = fw.refined_full(vocab);
        let g = &mut fw.graph;
        let fl = fine_loss_graph(
            g,
            out.group_logits,
            &vocab.class_group,
            &matched,
            region_mat,
            refined,
            &gt_fine,
            config.alpha,
            config.m_fine,
        );
        parts.fine = g.scalar(fl);
        let t = g.scale(fl, config.weights.fine);
        total = g.add(total, t);
    }
    parts.total = fw.graph.scalar(total);
    let gradients = with_gradients.then(|| {
        let grads = fw.graph.backward(total);
        fw.parameter_gradients(&grads)
    });
    Ok(ImageLoss {
        parts,
        gradients,
        frozen: Frozen {
            selection,
            matches,
            regions,
        },
    })
}

/// IoU of every ground truth with the prediction matched to it.
pub fn matched_ious(detector: &Detector, sample: &TrainSample, config: &TrainConfig) -> Result<Vec<f64>> {
    let vocab = sample.vocab(detector.config.query_mode)?;
    let mut fw = detector.forward(Trainable::NONE);
    let state = fw.encode(&sample.map)?;
    let selection = fw.select(&state, &vocab)?;
    let out = fw.decode(&state, &vocab, &selection)?;
    let b = fw.graph.value(out.boxes);
    let boxes: Vec<BBox> = (0..b.rows())
        .map(|r| BBox::from_array([b.get(r, 0), b.get(r, 1), b.get(r, 2), b.get(r, 3)]))
        .collect();
    let matches = match_predictions(
        fw.graph.value(out.group_logits),
        &boxes,
        &sample.gt_boxes,
        &sample.gt_subject_ids(&vocab),
        config.match_l1_weight,
    )?;
    matches
        .iter()
        .map(|&(j, t)| crate::boxes::iou(&boxes[j], &sample.gt_boxes[t]))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub parts: LossParts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
}

/// One JSON record per line.
pub fn write_loss_log(path: &Path, report: &TrainReport) -> Result<()> {
    let mut out = Vec::new();
    for r in &report.losses {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::format("loss log", e.to_string()))?;
        out.write_all(b"\n").expect("vec write");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn train_loop(
    detector: &mut Detector,
    pool: &[(&TrainSample, DetectionVocab)],
    config: &TrainConfig,
) -> Result<TrainReport> {
    let trainable = config.trainable();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = TrainReport::default();
    if pool.is_empty() {
        return if config.iterations == 0 {
            Ok(report)
        } else {
            Err(Error::InvalidInput("no training samples".into()))
        };
    }
    let scale = 1.0 / config.batch_size as f64;
    for iteration in 0..config.iterations {
        let mut parts = LossParts::default();
        let mut acc: Option<Vec<Mat>> = None;
        for _ in 0..config.batch_size {
            let (sample, vocab) = &pool[rng.random_range(0..pool.len())];
            let loss = match image_loss(detector, sample, vocab, config, trainable, None, true) {
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Divergence {
                        iteration,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            parts.add_scaled(&loss.parts, scale);
            let grads = loss.gradients.unwrap_or_default();
            match acc.as_mut() {
                None => acc = Some(grads),
                Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| x.add_assign(y)),
            }
        }
        if !parts.total.is_finite() || parts.total > config.max_loss {
            return Err(Error::Divergence {
                iteration,
                loss: parts.total,
            });
        }
        let mut grads = acc.unwrap_or_default();
        for g in grads.iter_mut() {
            *g = g.scale(scale);
        }
        if let Some(c) = config.clip_norm {
            let norm = detector
                .params
                .named()
                .iter()
                .zip(&grads)
                .filter(|((group, _, _), _)| trainable.contains(*group))
                .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
                .sum::<f64>()
                .sqrt();
            if norm > c {
                for g in grads.iter_mut() {
                    *g = g.scale(c / norm);
                }
            }
        }
        detector.apply_gradients(&grads, config.learning_rate, trainable);
        // an overflowing step has no meaningful loss to report
        if detector.params.named().iter().any(|(_, _, m)| m.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                iteration,
                loss: f64::NAN,
            });
        }
        log::debug!("iteration {iteration}: loss {:.6}", parts.total);
        report.losses.push(LossRecord { iteration, parts });
    }
    Ok(report)
}

fn prepared(samples: &[TrainSample], mode: QueryMode) -> Result<Vec<(&TrainSample, DetectionVocab)>> {
    samples.iter().map(|s| Ok((s, s.vocab(mode)?))).collect()
}

/// Detection losses only; the projection head must still be the identity.
pub fn train_stage1(detector: &mut Detector, samples: &[TrainSample], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if config.stage != 1 {
        return Err(Error::Config("train_stage1 needs a stage-1 config".into()));
    }
    if detector.params.projection.distance_from_identity() != 0.0 {
        return Err(Error::Config("stage 1 expects the projection head at identity".into()));
    }
    let pool = prepared(samples, detector.config.query_mode)?;
    train_loop(detector, &pool, config)
}

/// Detection losses plus the fine loss. With `co_training`, the coarse
/// samples join the sampling pool without fine supervision.
pub fn train_stage2(
    detector: &mut Detector,
    fine: &[TrainSample],
    coarse: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if config.stage != 2 {
        return Err(Error::Config("train_stage2 needs a stage-2 config".into()));
    }
    let mode = detector.config.query_mode;
    let mut pool = prepared(fine, mode)?;
    if config.co_training {
        for s in coarse {
            if s.fine_supervised {
                return Err(Error::InvalidInput(format!("co-training sample {} carries fine supervision", s.image_id)));
            }
            pool.push((s, s.vocab(mode)?));
        }
    }
    train_loop(detector, &pool, config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub group: ParamGroup,
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the checked entries.
    pub relative_error: f64,
}

/// Central finite differences on up to `per_tensor` entries of every
/// parameter, with the discrete decisions of the unperturbed pass frozen.
pub fn gradient_check(
    detector: &Detector,
    sample: &TrainSample,
    config: &TrainConfig,
    per_tensor: usize,
    step: f64,
) -> Result<Vec<GradientCheck>> {
    let trainable = Trainable::ALL;
    let vocab = sample.vocab(detector.config.query_mode)?;
    let base = image_loss(detector, sample, &vocab, config, trainable, None, true)?;
    let analytic = base.gradients.unwrap_or_default();
    let names: Vec<(ParamGroup, String, usize)> = detector
        .params
        .named()
        .into_iter()
        .map(|(g, n, m)| (g, n, m.len()))
        .collect();
    let mut probe = detector.clone();
    let mut out = Vec::new();
    for (t, (group, name, len)) in names.into_iter().enumerate() {
        let stride = (len / per_tensor.max(1)).max(1);
        let idx: Vec<usize> = (0..len).step_by(stride).take(per_tensor).collect();
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            let orig = probe.params.named()[t].2.data()[i];
            let mut eval = |v: f64| -> Result<f64> {
                probe.params.named_mut()[t].2.data_mut()[i] = v;
                let l = image_loss(&probe, sample, &vocab, config, trainable, Some(&base.frozen), false)?;
                Ok(l.parts.total)
            };
            let plus = eval(orig + step)?;
            let minus = eval(orig - step)?;
            eval(orig)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[t].data()[i];
            diff += (a - numeric).powi(2);
            an += a * a;
            nn += numeric * numeric;
        }
        let denom = an.sqrt().max(nn.sqrt());
        out.push(GradientCheck {
            group,
            name,
            checked: idx.len(),
            analytic_norm: an.sqrt(),
            relative_error: if denom > 0.0 { diff.sqrt() / denom } else { 0.0 },
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn brute_force(cost: &Mat) -> f64 {
        fn rec(cost: &Mat, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for j in 0..cost.cols() {
                if !used[j] {
                    used[j] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, j), best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        best
    }

    proptest! {
        #[test]
        fn hungarian_matches_exhaustive_search(
            rows in 1usize..=6,
            extra in 0usize..=3,
            seed in any::<u64>(),
        ) {
            let cols = rows + extra;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data = (0..rows * cols).map(|_| rng.random_range(-3.0..5.0)).collect();
            let cost = Mat::from_vec(rows, cols, data);
            let cols_of = hungarian(&cost).unwrap();
            let mut seen = cols_of.clone();
            seen.sort();
            seen.dedup();
            prop_assert_eq!(seen.len(), rows);
            let total: f64 = cols_of.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
            prop_assert!((total - brute_force(&cost)).abs() < 1e-9);
        }

        #[test]
        fn fine_loss_is_the_log_of_the_fused_score(
            sc in 1e-6f64..1.0,
            sf in 1e-6f64..1.0,
            alpha in 0.0f64..=1.0,
        ) {
            let l = fine_loss(&[vec![sc]], &[vec![sf]], &[0], alpha).unwrap();
            let fused = sc.powf(alpha) * sf.powf(1.0 - alpha);
            prop_assert!((l + fused.ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_small_cases() {
        let logits = Mat::from_vec(1, 1, vec![0.0]);
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        assert_eq!(match_predictions(&logits, &[b], &[b], &[0], 1.0).unwrap(), vec![(0, 0)]);

        let logits = Mat::from_vec(2, 1, vec![0.0, 0.0]);
        let p = [BBox::new(0.2, 0.2, 0.1, 0.1), BBox::new(0.8, 0.8, 0.1, 0.1)];
        let gt = [BBox::new(0.8, 0.8, 0.1, 0.1), BBox::new(0.2, 0.2, 0.1, 0.1)];
        assert_eq!(match_predictions(&logits, &p, &gt, &[0, 0], 1.0).unwrap(), vec![(1, 0), (0, 1)]);
        assert!(match_predictions(&Mat::zeros(1, 1), &p[..1], &gt, &[0, 0], 1.0).is_err());
    }

    #[test]
    fn fine_loss_reference_values() {
        let l = fine_loss(&[vec![0.8]], &[vec![0.5]], &[0], 0.6).unwrap();
        assert!((l - 0.4111).abs() < 1e-4);
        assert!((l - -(0.6 * 0.8f64.ln() + 0.4 * 0.5f64.ln())).abs() < 1e-12);
        assert_eq!(fine_loss(&[vec![1.0]], &[vec![1.0]], &[0], 0.6).unwrap(), 0.0);
        let sc = vec![vec![0.3, 0.7], vec![0.9, 0.2]];
        let sf = vec![vec![0.1, 0.9], vec![0.5, 0.5]];
        let l = fine_loss(&sc, &sf, &[1, 0], 1.0).unwrap();
        assert_eq!(l, -(0.7f64.ln() + 0.9f64.ln()));
    }

    #[test]
    fn background_bce_at_half() {
        let mut g = Graph::new();
        let logits = g.constant(Mat::zeros(3, 5));
        let boxes = g.constant(Mat::filled(3, 4, 0.5));
        let loss = detection_loss(&mut g, logits, boxes, &[], &[], &[]);
        assert!((g.scalar(loss.class) - 5.0 * 2f64.ln()).abs() < 1e-12);
        assert!(loss.box_l1.is_none());
    }

    #[test]
    fn perfect_prediction_loss_vanishes() {
        let mut g = Graph::new();
        let mut l = Mat::filled(1, 2, -80.0);
        l.set(0, 1, 80.0);
        let logits = g.constant(l);
        let gt = BBox::new(0.4, 0.6, 0.2, 0.3);
        let boxes = g.constant(Mat::row_vector(gt.to_array().to_vec()));
        let loss = detection_loss(&mut g, logits, boxes, &[(0, 0)], &[gt], &[1]);
        assert!(g.scalar(loss.class) < 1e-30);
        assert_eq!(g.scalar(loss.box_l1.unwrap()), 0.0);
    }

    #[test]
    fn graph_fine_loss_agrees_with_the_scalar_form() {
        let mut g = Graph::new();
        let logits = Mat::from_vec(2, 2, vec![0.4, -1.0, 2.0, 0.3]);
        let regions = Mat::from_rows(&[vec![0.6, 0.8], vec![1.0, 0.0]]);
        let refined = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.8, 0.6]]);
        let class_group = [0, 1, 1];
        let (gt, matched, m) = ([2usize, 0], [1usize, 0], 3.0);
        let lv = g.constant(logits.clone());
        let rv = g.constant(regions.clone());
        let fv = g.constant(refined.clone());
        let l = fine_loss_graph(&mut g, lv, &class_group, &matched, rv, fv, &gt, 0.6, m);

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut sc = Vec::new();
        let mut sf = Vec::new();
        for (i, &j) in matched.iter().enumerate() {
            sc.push(class_group.iter().map(|&grp| sig(logits.get(j, grp))).collect::<Vec<_>>());
            let e: Vec<f64> = (0..3)
                .map(|c| (m * (regions.get(i, 0) * refined.get(c, 0) + regions.get(i, 1) * refined.get(c, 1))).exp())
                .collect();
            let z: f64 = e.iter().sum();
            sf.push(e.iter().map(|x| x / z).collect::<Vec<_>>());
        }
        let expect = fine_loss(&sc, &sf, &gt, 0.6).unwrap();
        assert!((g.scalar(l) - expect).abs() < 1e-9);
    }
}
