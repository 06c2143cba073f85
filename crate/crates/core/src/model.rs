//! The full detector: encoder refiner, query selection, attribute fusion,
//! decoder, box head and the text projection head, with one forward pass
//! shared by training and inference.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Var};
use crate::boxes::{iou, BBox};
use crate::cgod::{
    aef_attend, box_head, classify, coarse_logits, decoder_layer, decoder_memory, positional_features,
    refiner_layer, select_topk, AefParams, AefVars, BoxHeadParams, BoxHeadVars, DecoderLayerParams,
    DecoderLayerVars, DecoderParams, LayerMemory, Prediction, QueryCandidate, RefinerLayerParams,
    RefinerLayerVars, POS_FEATURES,
};
use crate::encoders::{refine_rows, EmbeddingSet, ProjectionHead, SpatialFeatureMap};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Mat};
use crate::vocabulary::FineGrainedClass;

/// Which text drives the detector's classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Coarse subjects; fine-grained classes sharing a subject share a group.
    #[default]
    Subject,
    /// Full fine-grained names, one group per class.
    FullName,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub dim: usize,
    pub top_k: usize,
    pub refiner_layers: usize,
    pub decoder_layers: usize,
    pub m_coarse: f64,
    /// Dot-product scale inside the refiner and decoder attention.
    pub attention_scale: f64,
    /// Dot-product scale of attribute fusion; `None` means `1/√d`.
    pub aef_scale: Option<f64>,
    /// Side length of the reference box placed on each query's cell.
    pub anchor_size: f64,
    pub use_aef: bool,
    pub query_mode: QueryMode,
    /// Class-agnostic suppression of overlapping predictions at inference.
    pub nms_iou: Option<f64>,
    pub init_seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            top_k: 16,
            refiner_layers: 1,
            decoder_layers: 2,
            m_coarse: 100.0,
            attention_scale: 2.0,
            aef_scale: None,
            anchor_size: 0.3,
            use_aef: true,
            query_mode: QueryMode::Subject,
            nms_iou: Some(0.3),
            init_seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.top_k == 0 {
            return Err(Error::Config("dim and top_k must be positive".into()));
        }
        if !(self.m_coarse > 0.0) {
            return Err(Error::Config("m_coarse must be positive".into()));
        }
        if !(self.anchor_size > 0.0 && self.anchor_size < 1.0) {
            return Err(Error::Config("anchor_size must lie in (0, 1)".into()));
        }
        if let Some(t) = self.nms_iou {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("nms_iou must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Parameter groups, used for freezing and for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Refiner,
    Aef,
    Decoder,
    BoxHead,
    Projection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Refiner,
        ParamGroup::Aef,
        ParamGroup::Decoder,
        ParamGroup::BoxHead,
        ParamGroup::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Refiner => "refiner",
            ParamGroup::Aef => "aef",
            ParamGroup::Decoder => "decoder",
            ParamGroup::BoxHead => "box",
            ParamGroup::Projection => "projection",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    pub refiner: Vec<RefinerLayerParams>,
    pub aef: AefParams,
    pub decoder: DecoderParams,
    pub projection: ProjectionHead,
}

impl DetectorParams {
    /// Every array with its group and a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(ParamGroup, String, &Mat)> {
        let mut out = Vec::new();
        for (l, layer) in self.refiner.iter().enumerate() {
            for (n, m) in layer.named() {
                out.push((ParamGroup::Refiner, format!("refiner.{l}.{n}"), m));
            }
        }
        for (n, m) in self.aef.named() {
            out.push((ParamGroup::Aef, format!("aef.{n}"), m));
        }
        for (l, layer) in self.decoder.layers.iter().enumerate() {
            for (n, m) in layer.named() {
                out.push((ParamGroup::Decoder, format!("decoder.{l}.{n}"), m));
            }
        }
        for (n, m) in self.decoder.box_head.named() {
            out.push((ParamGroup::BoxHead, format!("box.{n}"), m));
        }
        out.push((ParamGroup::Projection, "projection.weight".into(), &self.projection.weight));
        out.push((ParamGroup::Projection, "projection.bias".into(), &self.projection.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(ParamGroup, String, &mut Mat)> {
        let mut out = Vec::new();
        for (l, layer) in self.refiner.iter_mut().enumerate() {
            for (n, m) in layer.named_mut() {
                out.push((ParamGroup::Refiner, format!("refiner.{l}.{n}"), m));
            }
        }
        for (n, m) in self.aef.named_mut() {
            out.push((ParamGroup::Aef, format!("aef.{n}"), m));
        }
        for (l, layer) in self.decoder.layers.iter_mut().enumerate() {
            for (n, m) in layer.named_mut() {
                out.push((ParamGroup::Decoder, format!("decoder.{l}.{n}"), m));
            }
        }
        for (n, m) in self.decoder.box_head.named_mut() {
            out.push((ParamGroup::BoxHead, format!("box.{n}"), m));
        }
        out.push((ParamGroup::Projection, "projection.weight".into(), &mut self.projection.weight));
        out.push((ParamGroup::Projection, "projection.bias".into(), &mut self.projection.bias));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, _, m)| m.len()).sum()
    }
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn gaussian(&mut self, rows: usize, cols: usize, std: f64) -> Mat {
        let normal = Normal::new(0.0, std).expect("finite std");
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(&mut self.rng)).collect())
    }

    /// Identity plus a small perturbation.
    fn near_identity(&mut self, d: usize, std: f64) -> Mat {
        let mut m = self.gaussian(d, d, std);
        for i in 0..d {
            m.set(i, i, m.get(i, i) + 1.0);
        }
        m
    }
}

impl DetectorParams {
    pub fn init(config: &DetectorConfig) -> Self {
        let d = config.dim;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let fan = 1.0 / (d as f64).sqrt();
        let refiner = (0..config.refiner_layers)
            .map(|_| RefinerLayerParams {
                wq: init.near_identity(d, 0.02),
                wk: init.near_identity(d, 0.02),
                wv: init.gaussian(d, d, fan),
                wo: init.gaussian(d, d, 0.1 * fan),
                scale: config.attention_scale,
            })
            .collect();
        let aef = AefParams {
            query: init.gaussian(1, d, 1.0),
            wq: init.gaussian(d, d, fan),
            wk: init.gaussian(d, d, fan),
            wv: init.gaussian(d, d, fan),
            wo: init.gaussian(d, d, 0.1 * fan),
            scale: config.aef_scale.unwrap_or(fan),
        };
        let layers = (0..config.decoder_layers)
            .map(|_| DecoderLayerParams {
                wq: init.near_identity(d, 0.02),
                wk: init.near_identity(d, 0.02),
                wv: init.gaussian(d, d, fan),
                wo: init.gaussian(d, d, 0.1 * fan),
                pq: init.gaussian(POS_FEATURES, d, 0.1),
                pk: init.gaussian(POS_FEATURES, d, 0.1),
                pv: init.gaussian(POS_FEATURES, d, 1.0),
                w1: init.gaussian(d, d, fan),
                b1: Mat::zeros(1, d),
                w2: init.gaussian(d, d, 0.1 * fan),
                b2: Mat::zeros(1, d),
                scale: config.attention_scale,
            })
            .collect();
        let box_head = BoxHeadParams {
            w1: init.gaussian(d, d, fan),
            b1: Mat::zeros(1, d),
            w2: init.gaussian(d, d, fan),
            b2: Mat::zeros(1, d),
            w3: init.gaussian(d, 4, 0.01),
            b3: Mat::zeros(1, 4),
        };
        Self {
            refiner,
            aef,
            decoder: DecoderParams { layers, box_head },
            projection: ProjectionHead::identity(d),
        }
    }
}

/// Class embeddings for one detection call.
#[derive(Debug, Clone)]
pub struct DetectionVocab {
    /// Names of the fine-grained classes, in vocabulary order.
    pub names: Vec<String>,
    /// Detector-side embedding of every class (subject or full name), `n × d`.
    pub classes: Mat,
    /// Group of every class; classes with the same detector text share one.
    pub class_group: Vec<usize>,
    /// One unit row per group, `G × d`.
    pub groups: Mat,
    /// Attribute embeddings per class, fused into queries.
    pub attributes: Vec<Vec<Vec<f64>>>,
    /// Frozen full-name embeddings, `n × d`, input of the projection head.
    pub full_text: Mat,
}

impl DetectionVocab {
    pub fn new(classes: &[FineGrainedClass], emb: &EmbeddingSet, mode: QueryMode) -> Result<Self> {
        if classes.is_empty() || classes.len() != emb.len() {
            return Err(Error::Shape(format!(
                "{} classes but {} embeddings",
                classes.len(),
                emb.len()
            )));
        }
        let mut group_of: HashMap<&str, usize> = HashMap::new();
        let mut group_rows: Vec<Vec<f64>> = Vec::new();
        let mut class_group = Vec::with_capacity(classes.len());
        let mut rows = Vec::with_capacity(classes.len());
        for (c, e) in classes.iter().zip(&emb.classes) {
            let (key, row) = match mode {
                QueryMode::Subject => (c.subject.as_str(), &e.subject),
                QueryMode::FullName => (c.full_name.as_str(), &e.full),
            };
            let g = *group_of.entry(key).or_insert_with(|| {
                group_rows.push(row.values.clone());
                group_rows.len() - 1
            });
            class_group.push(g);
            rows.push(row.values.clone());
        }
        Ok(Self {
            names: classes.iter().map(|c| c.full_name.clone()).collect(),
            classes: Mat::from_rows(&rows),
            class_group,
            groups: crate::cgod::unit_rows(&Mat::from_rows(&group_rows)),
            attributes: emb
                .classes
                .iter()
                .map(|c| c.attributes.iter().map(|a| a.values.clone()).collect())
                .collect(),
            full_text: emb.full_matrix(),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn group_count(&self) -> usize {
        self.groups.rows()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Which groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub refiner: bool,
    pub aef: bool,
    pub decoder: bool,
    pub box_head: bool,
    pub projection: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        refiner: false,
        aef: false,
        decoder: false,
        box_head: false,
        projection: false,
    };

    pub const ALL: Trainable = Trainable {
        refiner: true,
        aef: true,
        decoder: true,
        box_head: true,
        projection: true,
    };

    pub fn contains(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Refiner => self.refiner,
            ParamGroup::Aef => self.aef,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::BoxHead => self.box_head,
            ParamGroup::Projection => self.projection,
        }
    }
}

struct Bound {
    refiner: Vec<RefinerLayerVars>,
    aef: AefVars,
    decoder: Vec<DecoderLayerVars>,
    box_head: BoxHeadVars,
    proj_w: Var,
    proj_b: Var,
}

impl Bound {
    /// Vars in the same order as [`DetectorParams::named`].
    fn list(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.refiner {
            out.extend(l.list());
        }
        out.extend(self.aef.list());
        for l in &self.decoder {
            out.extend(l.list());
        }
        out.extend(self.box_head.list());
        out.push(self.proj_w);
        out.push(self.proj_b);
        out
    }
}

/// Encoded image: refined features plus the decoder keys and values.
#[derive(Debug, Clone)]
pub struct ImageState {
    pub f_enc: Var,
    pos: Var,
    memory: Vec<LayerMemory>,
    height: usize,
    width: usize,
    cell_centers: Vec<(f64, f64)>,
}

/// Query selection, frozen so that gradient checks and training can replay it.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<QueryCandidate>,
}

impl Selection {
    pub fn rows(&self) -> Vec<usize> {
        self.candidates.iter().map(|c| c.row).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeOutput {
    /// Prediction embeddings, `k × d`.
    pub embeddings: Var,
    /// Boxes, `k × 4`.
    pub boxes: Var,
    /// Clamped coarse logits per group, `k × G`.
    pub group_logits: Var,
}

/// A forward pass under construction.
pub struct Forward<'a> {
    pub graph: Graph,
    detector: &'a Detector,
    bound: Bound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: DetectorParams,
}

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let params = DetectorParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn forward(&self, trainable: Trainable) -> Forward<'_> {
        let mut g = Graph::new();
        let p = &self.params;
        let refiner = p.refiner.iter().map(|l| l.bind(&mut g, trainable.refiner)).collect();
        let aef = AefVars::bind(&mut g, &p.aef, trainable.aef);
        let decoder = p.decoder.layers.iter().map(|l| l.bind(&mut g, trainable.decoder)).collect();
        let box_head = p.decoder.box_head.bind(&mut g, trainable.box_head);
        let bind = |g: &mut Graph, m: &Mat| {
            if trainable.projection {
                g.leaf(m.clone())
            } else {
                g.constant(m.clone())
            }
        };
        let proj_w = bind(&mut g, &p.projection.weight);
        let proj_b = bind(&mut g, &p.projection.bias);
        Forward {
            graph: g,
            detector: self,
            bound: Bound {
                refiner,
                aef,
                decoder,
                box_head,
                proj_w,
                proj_b,
            },
        }
    }

    /// Full inference on one image for one vocabulary, suppression included.
    pub fn detect(&self, map: &SpatialFeatureMap, vocab: &DetectionVocab) -> Result<Vec<Prediction>> {
        let mut fw = self.forward(Trainable::NONE);
        let state = fw.encode(map)?;
        fw.detect(&state, vocab)
    }

    /// Plain SGD step over the trainable groups.
    pub fn apply_gradients(&mut self, grads: &[Mat], lr: f64, trainable: Trainable) {
        for ((group, _, m), g) in self.params.named_mut().into_iter().zip(grads) {
            if trainable.contains(group) {
                for (w, d) in m.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
        }
    }
}

impl Forward<'_> {
    pub fn detector(&self) -> &Detector {
        self.detector
    }

    pub fn encode(&mut self, map: &SpatialFeatureMap) -> Result<ImageState> {
        let cfg = &self.detector.config;
        if map.dim() != cfg.dim {
            return Err(Error::Shape(format!("feature dimension {} vs detector {}", map.dim(), cfg.dim)));
        }
        if map.cells() < cfg.top_k {
            return Err(Error::InvalidInput(format!("{} cells for top-k {}", map.cells(), cfg.top_k)));
        }
        let g = &mut self.graph;
        let mut f = g.constant(map.features.clone());
        for layer in &self.bound.refiner {
            f = refiner_layer(g, layer, f);
        }
        let pos = g.constant(positional_features(map.height, map.width));
        let memory = self.bound.decoder.iter().map(|l| decoder_memory(g, l, f, pos)).collect();
        let mut cell_centers = Vec::with_capacity(map.cells());
        for r in 0..map.height {
            for c in 0..map.width {
                cell_centers.push(map.cell_center(r, c));
            }
        }
        Ok(ImageState {
            f_enc: f,
            pos,
            memory,
            height: map.height,
            width: map.width,
            cell_centers,
        })
    }

    pub fn select(&self, state: &ImageState, vocab: &DetectionVocab) -> Result<Selection> {
        let cfg = &self.detector.config;
        let f = self.graph.value(state.f_enc);
        let logits = classify(&vocab.classes, f, cfg.m_coarse)?;
        let candidates = select_topk(&logits, f, cfg.top_k, state.width)?;
        Ok(Selection { candidates })
    }

    pub fn decode(&mut self, state: &ImageState, vocab: &DetectionVocab, selection: &Selection) -> Result<DecodeOutput> {
        let cfg = &self.detector.config;
        let rows = selection.rows();
        let g = &mut self.graph;
        let mut q = g.gather_rows(state.f_enc, &rows);
        if cfg.use_aef {
            let mut slot_of: HashMap<usize, usize> = HashMap::new();
            let mut parts = Vec::new();
            let mut slots = Vec::with_capacity(rows.len());
            for cand in &selection.candidates {
                let c = cand.matched_class;
                if c >= vocab.len() {
                    return Err(Error::Shape(format!("matched class {c} outside vocabulary")));
                }
                let slot = *slot_of.entry(c).or_insert_with(|| {
                    let attrs: Vec<&[f64]> = vocab.attributes[c].iter().map(|a| a.as_slice()).collect();
                    let (_, out) = aef_attend(g, &self.bound.aef, vocab.classes.row(c), &attrs);
                    parts.push(out);
                    parts.len() - 1
                });
                slots.push(slot);
            }
            let offsets = g.concat_rows(&parts);
            let per_query = g.gather_rows(offsets, &slots);
            q = g.add(q, per_query);
        }
        let qpos = g.gather_rows(state.pos, &rows);
        for (layer, mem) in self.bound.decoder.iter().zip(&state.memory) {
            q = decoder_layer(g, layer, mem, q, qpos);
        }
        let a = cfg.anchor_size;
        let refs: Vec<BBox> = rows
            .iter()
            .map(|&r| {
                let (x, y) = state.cell_centers[r];
                BBox::new(x, y, a, a)
            })
            .collect();
        let boxes = box_head(g, &self.bound.box_head, q, &refs);
        let groups = g.constant(vocab.groups.clone());
        let group_logits = coarse_logits(g, q, groups, cfg.m_coarse);
        Ok(DecodeOutput {
            embeddings: q,
            boxes,
            group_logits,
        })
    }

    /// Refined full-name embeddings `normalize(W·e + b)`, `n × d`.
    pub fn refined_full(&mut self, vocab: &DetectionVocab) -> Var {
        let e = self.graph.constant(vocab.full_text.clone());
        refine_rows(&mut self.graph, self.bound.proj_w, self.bound.proj_b, e)
    }

    /// Reads predictions off a decoded batch, one per query, in query order.
    pub fn predictions(&self, out: &DecodeOutput, vocab: &DetectionVocab, selection: &Selection) -> Vec<Prediction> {
        let p = self.graph.value(out.embeddings);
        let b = self.graph.value(out.boxes);
        let gl = self.graph.value(out.group_logits);
        selection
            .candidates
            .iter()
            .enumerate()
            .map(|(j, cand)| {
                let logits: Vec<f64> = vocab.class_group.iter().map(|&gi| gl.get(j, gi)).collect();
                Prediction {
                    embedding: p.row(j).to_vec(),
                    bbox: BBox::from_array([b.get(j, 0), b.get(j, 1), b.get(j, 2), b.get(j, 3)]),
                    coarse_scores: logits.iter().map(|&l| sigmoid(l)).collect(),
                    coarse_logits: logits,
                    fine_scores: None,
                    final_scores: None,
                    source_cell: cand.source_cell,
                    matched_class: cand.matched_class,
                }
            })
            .collect()
    }

    /// Select, decode and suppress duplicates.
    pub fn detect(&mut self, state: &ImageState, vocab: &DetectionVocab) -> Result<Vec<Prediction>> {
        let sel = self.select(state, vocab)?;
        let out = self.decode(state, vocab, &sel)?;
        let preds = self.predictions(&out, vocab, &sel);
        Ok(match self.detector.config.nms_iou {
            Some(t) => nms(preds, t),
            None => preds,
        })
    }

    /// Gradients of every parameter in [`DetectorParams::named`] order;
    /// frozen groups get zeros.
    pub fn parameter_gradients(&self, grads: &Gradients) -> Vec<Mat> {
        self.bound
            .list()
            .into_iter()
            .zip(self.detector.params.named())
            .map(|(v, (_, _, m))| grads.get_or_zeros(v, m.shape()))
            .collect()
    }

    pub fn grid(&self, state: &ImageState) -> (usize, usize) {
        (state.height, state.width)
    }
}

/// Greedy class-agnostic suppression by maximum coarse score. Kept
/// predictions stay in their original order.
pub fn nms(predictions: Vec<Prediction>, iou_threshold: f64) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .max_coarse()
            .total_cmp(&predictions[a].max_coarse())
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; predictions.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = kept.iter().any(|&k| {
            iou(&predictions[k].bbox, &predictions[i].bbox).map(|v| v > iou_threshold).unwrap_or(false)
        });
        if !suppressed {
            keep[i] = true;
            kept.push(i);
        }
    }
    predictions.into_iter().zip(keep).filter(|(_, k)| *k).map(|(p, _)| p).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DetectorConfig {
        DetectorConfig {
            dim: 8,
            top_k: 3,
            decoder_layers: 1,
            ..Default::default()
        }
    }

    #[test]
    fn named_and_bound_orders_agree() {
        let det = Detector::new(tiny()).unwrap();
        let fw = det.forward(Trainable::ALL);
        assert_eq!(fw.bound.list().len(), det.params.named().len());
        let names: Vec<String> = det.params.named().into_iter().map(|(_, n, _)| n).collect();
        assert!(names.contains(&"decoder.0.pv".to_string()));
        assert!(names.contains(&"projection.bias".to_string()));
        for ((_, n, m), v) in det.params.named().into_iter().zip(fw.bound.list()) {
            assert_eq!(fw.graph.value(v), m, "{n}");
        }
    }

    #[test]
    fn suppression_keeps_the_strongest_of_overlapping_boxes() {
        let mk = |cx: f64, s: f64| Prediction {
            embedding: vec![],
            bbox: BBox::new(cx, 0.5, 0.3, 0.3),
            coarse_logits: vec![0.0],
            coarse_scores: vec![s],
            fine_scores: None,
            final_scores: None,
            source_cell: (0, 0),
            matched_class: 0,
        };
        let kept = nms(vec![mk(0.3, 0.4), mk(0.32, 0.9), mk(0.8, 0.1)], 0.5);
        assert_eq!(kept.iter().map(|p| p.coarse_scores[0]).collect::<Vec<_>>(), vec![0.9, 0.1]);
    }
}
