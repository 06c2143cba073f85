//! Coarse-grained object detection.
//!
//! Features are classified against subject embeddings, the strongest cells
//! become object queries, attribute embeddings are fused into the queries,
//! and a small cross-attention decoder turns each query into a prediction
//! embedding and a box. Coarse confidence is a scaled-cosine sigmoid against
//! the subject embeddings.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::tensor::{argmax, inverse_sigmoid, sigmoid, Mat};

/// Sigmoid logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]`.
pub const LOGIT_CLAMP: f64 = 80.0;

/// Number of fixed positional features per cell: `x, y, x², y²` of the cell center.
pub const POS_FEATURES: usize = 4;

/// `logits[j][i] = scale · cos(features_j, classes_i)`.
pub fn classify(classes: &Mat, features: &Mat, scale: f64) -> Result<Mat> {
    if classes.cols() != features.cols() {
        return Err(Error::Shape(format!(
            "class embeddings have dimension {} but features {}",
            classes.cols(),
            features.cols()
        )));
    }
    let c = unit_rows(classes);
    let f = unit_rows(features);
    Ok(f.matmul_t(&c).scale(scale))
}

/// Row-normalized copy; zero rows stay zero.
pub fn unit_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryCandidate {
    pub embedding: Vec<f64>,
    pub matched_class: usize,
    /// Flattened cell index.
    pub row: usize,
    pub source_cell: (usize, usize),
    pub selection_logit: f64,
}

/// The `k` rows with the largest max-over-classes logit, strongest first.
/// Ties go to the lower row, and within a row to the lower class.
pub fn select_topk(logits: &Mat, features: &Mat, k: usize, grid_width: usize) -> Result<Vec<QueryCandidate>> {
    let m = logits.rows();
    if k == 0 || k > m {
        return Err(Error::InvalidInput(format!("cannot select {k} of {m} rows")));
    }
    if features.rows() != m {
        return Err(Error::Shape(format!("{m} logit rows but {} feature rows", features.rows())));
    }
    if logits.cols() == 0 || grid_width == 0 {
        return Err(Error::InvalidInput("no classes or zero grid width".into()));
    }
    let mut rows: Vec<(usize, usize, f64)> = (0..m)
        .map(|r| {
            let c = argmax(logits.row(r));
            (r, c, logits.get(r, c))
        })
        .collect();
    rows.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    Ok(rows
        .into_iter()
        .take(k)
        .map(|(r, c, logit)| QueryCandidate {
            embedding: features.row(r).to_vec(),
            matched_class: c,
            row: r,
            source_cell: (r / grid_width, r % grid_width),
            selection_logit: logit,
        })
        .collect())
}

/// Attribute-embedding fusion parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AefParams {
    /// Shared learnable attention query, `1 × d`.
    pub query: Mat,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub scale: f64,
}

impl AefParams {
    pub fn dim(&self) -> usize {
        self.query.cols()
    }

    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("query", &self.query),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("query", &mut self.query),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AefVars {
    pub query: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub scale: f64,
}

impl AefVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.query, self.wq, self.wk, self.wv, self.wo]
    }

    pub fn bind(g: &mut Graph, p: &AefParams, trainable: bool) -> Self {
        let mut v = |m: &Mat| if trainable { g.leaf(m.clone()) } else { g.constant(m.clone()) };
        Self {
            query: v(&p.query),
            wq: v(&p.wq),
            wk: v(&p.wk),
            wv: v(&p.wv),
            wo: v(&p.wo),
            scale: p.scale,
        }
    }
}

/// Keys `{0} ∪ {t^j − t}` and values `{t} ∪ {t^j}`.
pub fn aef_keys_values(subject: &[f64], attributes: &[&[f64]]) -> (Mat, Mat) {
    let d = subject.len();
    let mut keys = vec![vec![0.0; d]];
    let mut values = vec![subject.to_vec()];
    for a in attributes {
        keys.push(a.iter().zip(subject).map(|(x, t)| x - t).collect());
        values.push(a.to_vec());
    }
    (Mat::from_rows(&keys), Mat::from_rows(&values))
}

/// Returns `(attention weights 1 × (1+n_j), attention output after OutProj 1 × d)`.
pub fn aef_attend(g: &mut Graph, v: &AefVars, subject: &[f64], attributes: &[&[f64]]) -> (Var, Var) {
    let (keys, values) = aef_keys_values(subject, attributes);
    let keys = g.constant(keys);
    let values = g.constant(values);
    let qh = g.matmul(v.query, v.wq);
    let kh = g.matmul(keys, v.wk);
    let logits = g.matmul_t(qh, kh);
    let logits = g.scale(logits, v.scale);
    let weights = g.softmax_rows(logits);
    let vh = g.matmul(values, v.wv);
    let mixed = g.matmul(weights, vh);
    let out = g.matmul(mixed, v.wo);
    (weights, out)
}

fn check_aef_inputs(params: &AefParams, subject: &[f64], attributes: &[&[f64]]) -> Result<()> {
    let d = params.dim();
    if subject.len() != d || attributes.iter().any(|a| a.len() != d) {
        return Err(Error::Shape(format!("attribute fusion expects dimension {d}")));
    }
    Ok(())
}

/// Softmax weights over the `1 + n_j` slots.
pub fn aef_weights(params: &AefParams, subject: &[f64], attributes: &[&[f64]]) -> Result<Vec<f64>> {
    check_aef_inputs(params, subject, attributes)?;
    let mut g = Graph::new();
    let v = AefVars::bind(&mut g, params, false);
    let (w, _) = aef_attend(&mut g, &v, subject, attributes);
    Ok(g.value(w).data().to_vec())
}

/// `q + OutProj(Attention(q^l, keys, values))`.
pub fn attribute_fuse(q: &[f64], params: &AefParams, subject: &[f64], attributes: &[&[f64]]) -> Result<Vec<f64>> {
    check_aef_inputs(params, subject, attributes)?;
    if q.len() != params.dim() {
        return Err(Error::Shape("query dimension".into()));
    }
    let mut g = Graph::new();
    let v = AefVars::bind(&mut g, params, false);
    let (_, out) = aef_attend(&mut g, &v, subject, attributes);
    Ok(q.iter().zip(g.value(out).data()).map(|(a, b)| a + b).collect())
}

/// Fixed positional features of every cell, `m × POS_FEATURES`.
pub fn positional_features(height: usize, width: usize) -> Mat {
    let mut rows = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let x = (c as f64 + 0.5) / width as f64;
            let y = (r as f64 + 0.5) / height as f64;
            rows.push(vec![x, y, x * x, y * y]);
        }
    }
    Mat::from_rows(&rows)
}

/// One self-attention layer of the encoder refiner:
/// `F' = F + softmax(s · (F Wq)(F Wk)ᵀ) (F Wv) Wo`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerLayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub scale: f64,
}

impl RefinerLayerParams {
    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wo", &self.wo)]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RefinerLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub scale: f64,
}

impl RefinerLayerVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.wq, self.wk, self.wv, self.wo]
    }
}

pub fn refiner_layer(g: &mut Graph, v: &RefinerLayerVars, features: Var) -> Var {
    let q = g.matmul(features, v.wq);
    let k = g.matmul(features, v.wk);
    let logits = g.matmul_t(q, k);
    let logits = g.scale(logits, v.scale);
    let a = g.softmax_rows(logits);
    let vals = g.matmul(features, v.wv);
    let mixed = g.matmul(a, vals);
    let out = g.matmul(mixed, v.wo);
    g.add(features, out)
}

/// Cross-attention over the refined map followed by a residual feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    /// Positional projections for queries, keys and values, `POS_FEATURES × d`.
    pub pq: Mat,
    pub pk: Mat,
    pub pv: Mat,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub scale: f64,
}

impl DecoderLayerParams {
    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("pq", &self.pq),
            ("pk", &self.pk),
            ("pv", &self.pv),
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("pq", &mut self.pq),
            ("pk", &mut self.pk),
            ("pv", &mut self.pv),
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayerVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub pq: Var,
    pub pk: Var,
    pub pv: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub scale: f64,
}

impl DecoderLayerVars {
    pub fn list(&self) -> Vec<Var> {
        vec![
            self.wq, self.wk, self.wv, self.wo, self.pq, self.pk, self.pv, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

/// Keys and values of one decoder layer; they depend only on the image.
#[derive(Debug, Clone, Copy)]
pub struct LayerMemory {
    pub keys: Var,
    pub values: Var,
}

pub fn decoder_memory(g: &mut Graph, v: &DecoderLayerVars, features: Var, pos: Var) -> LayerMemory {
    let k = g.matmul(features, v.wk);
    let kp = g.matmul(pos, v.pk);
    let keys = g.add(k, kp);
    let val = g.matmul(features, v.wv);
    let vp = g.matmul(pos, v.pv);
    let values = g.add(val, vp);
    LayerMemory { keys, values }
}

pub fn decoder_layer(g: &mut Graph, v: &DecoderLayerVars, mem: &LayerMemory, queries: Var, query_pos: Var) -> Var {
    let q = g.matmul(queries, v.wq);
    let qp = g.matmul(query_pos, v.pq);
    let q = g.add(q, qp);
    let logits = g.matmul_t(q, mem.keys);
    let logits = g.scale(logits, v.scale);
    let a = g.softmax_rows(logits);
    let mixed = g.matmul(a, mem.values);
    let out = g.matmul(mixed, v.wo);
    let x = g.add(queries, out);
    let h = g.matmul(x, v.w1);
    let h = g.add_row(h, v.b1);
    let h = g.relu(h);
    let h = g.matmul(h, v.w2);
    let h = g.add_row(h, v.b2);
    g.add(x, h)
}

/// Three affine layers; the output offsets the reference box in logit space.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxHeadParams {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub w3: Mat,
    pub b3: Mat,
}

impl BoxHeadParams {
    pub fn named(&self) -> Vec<(&'static str, &Mat)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("w2", &self.w2),
            ("b2", &self.b2),
            ("w3", &self.w3),
            ("b3", &self.b3),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w3", &mut self.w3),
            ("b3", &mut self.b3),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoxHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub w3: Var,
    pub b3: Var,
}

impl BoxHeadVars {
    pub fn list(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]
    }
}

/// `sigmoid(head(p) + inverse_sigmoid(reference))`, one `(cx, cy, w, h)` row per query.
pub fn box_head(g: &mut Graph, v: &BoxHeadVars, p: Var, references: &[BBox]) -> Var {
    let h = g.matmul(p, v.w1);
    let h = g.add_row(h, v.b1);
    let h = g.relu(h);
    let h = g.matmul(h, v.w2);
    let h = g.add_row(h, v.b2);
    let h = g.relu(h);
    let o = g.matmul(h, v.w3);
    let o = g.add_row(o, v.b3);
    let refs: Vec<Vec<f64>> = references
        .iter()
        .map(|b| b.to_array().iter().map(|&x| inverse_sigmoid(x)).collect())
        .collect();
    let refs = g.constant(Mat::from_rows(&refs));
    let o = g.add(o, refs);
    g.sigmoid(o)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayerParams>,
    pub box_head: BoxHeadParams,
}

fn bind_mat(g: &mut Graph, m: &Mat, trainable: bool) -> Var {
    if trainable {
        g.leaf(m.clone())
    } else {
        g.constant(m.clone())
    }
}

impl DecoderLayerParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> DecoderLayerVars {
        let mut b = |m: &Mat| bind_mat(g, m, trainable);
        DecoderLayerVars {
            wq: b(&self.wq),
            wk: b(&self.wk),
            wv: b(&self.wv),
            wo: b(&self.wo),
            pq: b(&self.pq),
            pk: b(&self.pk),
            pv: b(&self.pv),
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
            scale: self.scale,
        }
    }
}

impl RefinerLayerParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> RefinerLayerVars {
        let mut b = |m: &Mat| bind_mat(g, m, trainable);
        RefinerLayerVars {
            wq: b(&self.wq),
            wk: b(&self.wk),
            wv: b(&self.wv),
            wo: b(&self.wo),
            scale: self.scale,
        }
    }
}

impl BoxHeadParams {
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoxHeadVars {
        let mut b = |m: &Mat| bind_mat(g, m, trainable);
        BoxHeadVars {
            w1: b(&self.w1),
            b1: b(&self.b1),
            w2: b(&self.w2),
            b2: b(&self.b2),
            w3: b(&self.w3),
            b3: b(&self.b3),
        }
    }
}

/// Runs the decoder on already-fused queries. `query_pos` holds the
/// positional features of each query's source cell and `references` its
/// reference box. Returns one `(p_j, b_j)` per query, in query order.
pub fn decode(
    fused_queries: &Mat,
    query_pos: &Mat,
    references: &[BBox],
    features: &Mat,
    feature_pos: &Mat,
    params: &DecoderParams,
) -> Result<Vec<(Vec<f64>, BBox)>> {
    let k = fused_queries.rows();
    if k == 0 {
        return Err(Error::InvalidInput("decode needs at least one query".into()));
    }
    if features.rows() == 0 {
        return Err(Error::InvalidInput("empty feature map".into()));
    }
    if query_pos.rows() != k || references.len() != k || feature_pos.rows() != features.rows() {
        return Err(Error::Shape("decoder query/position/reference counts differ".into()));
    }
    if fused_queries.cols() != features.cols() {
        return Err(Error::Shape("query and feature dimensions differ".into()));
    }
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let fp = g.constant(feature_pos.clone());
    let qp = g.constant(query_pos.clone());
    let mut x = g.constant(fused_queries.clone());
    for layer in &params.layers {
        let v = layer.bind(&mut g, false);
        let mem = decoder_memory(&mut g, &v, f, fp);
        x = decoder_layer(&mut g, &v, &mem, x, qp);
    }
    let bh = params.box_head.bind(&mut g, false);
    let boxes = box_head(&mut g, &bh, x, references);
    let p = g.value(x);
    let b = g.value(boxes);
    Ok((0..k)
        .map(|j| (p.row(j).to_vec(), BBox::from_array([b.get(j, 0), b.get(j, 1), b.get(j, 2), b.get(j, 3)])))
        .collect())
}

/// `l = clamp(m · cos(p, t_i))`, `s = sigmoid(l)`.
pub fn coarse_scores(p: &[f64], subjects: &Mat, m_coarse: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = classify(subjects, &Mat::row_vector(p.to_vec()), m_coarse)?;
    let logits: Vec<f64> = logits.data().iter().map(|l| l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
    let scores = logits.iter().map(|&l| sigmoid(l)).collect();
    Ok((logits, scores))
}

/// Graph form of [`coarse_scores`] for many predictions: clamped logits, `k × n`.
/// `classes` must hold unit rows.
pub fn coarse_logits(g: &mut Graph, p: Var, classes: Var, m_coarse: f64) -> Var {
    let unit = g.normalize_rows(p);
    let cos = g.matmul_t(unit, classes);
    let l = g.scale(cos, m_coarse);
    g.clamp(l, -LOGIT_CLAMP, LOGIT_CLAMP)
}

/// One detected box with its scores over the query vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub embedding: Vec<f64>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub coarse_logits: Vec<f64>,
    pub coarse_scores: Vec<f64>,
    #[serde(default)]
    pub fine_scores: Option<Vec<f64>>,
    #[serde(default)]
    pub final_scores: Option<Vec<f64>>,
    pub source_cell: (usize, usize),
    pub matched_class: usize,
}

impl Prediction {
    pub fn max_coarse(&self) -> f64 {
        self.coarse_scores.iter().cloned().fold(0.0, f64::max)
    }
}
