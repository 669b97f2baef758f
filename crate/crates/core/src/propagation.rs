//! Geometric encoding of the full template and geometry-guided spreading of
//! visible-point features to every template point.
//!
//! The encoder is a three-layer per-point MLP over fixed sinusoidal inputs:
//! the point's centered coordinates plus the mean and max over its k-NN
//! neighborhood of encoded edge vectors. The embedding is the MLP output
//! concatenated with the positional encoding itself, so no row is ever zero.

use crate::error::{Error, Result};
use crate::features::PointFeatureSet;
use crate::geom::{sub3, KnnGraph, PointCloud, Vec3};
use crate::params::{Bound, Init, ParamLayout};
use crate::tape::{softmax_rows, Matrix, Tape, Var};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;

const POS_OCTAVES: usize = 4;
const EDGE_SCALE: f64 = 8.0;
const ENCODER_LAYERS: usize = 3;

/// Width of `sinusoid(v, octaves, scale)`.
pub fn sinusoid_width(octaves: usize) -> usize {
    3 + 6 * octaves
}

/// `[s·v, sin(2^l π s v), cos(2^l π s v)]` for `l < octaves`.
pub fn sinusoid(v: Vec3, octaves: usize, scale: f64, out: &mut [f64]) {
    for a in 0..3 {
        out[a] = v[a] * scale;
    }
    let mut k = 3;
    for l in 0..octaves {
        let f = std::f64::consts::PI * scale * (1u64 << l) as f64;
        for a in 0..3 {
            let (s, c) = (f * v[a]).sin_cos();
            out[k] = s;
            out[k + 3] = c;
            k += 1;
        }
        k += 3;
    }
}

/// Positional encoding of centroid-centered coordinates, `N × (3 + 6·4)`.
pub fn centered_positional_encoding(cloud: &PointCloud) -> Matrix {
    let c = cloud.centroid();
    let w = sinusoid_width(POS_OCTAVES);
    let mut out = Matrix::zeros(cloud.len(), w);
    for (i, &p) in cloud.points.iter().enumerate() {
        sinusoid(sub3(p, c), POS_OCTAVES, 1.0, out.row_mut(i));
    }
    out
}

/// Fixed encoder input: `[pe(centered p) ‖ mean_j enc(e_ij) ‖ max_j enc(e_ij)]`.
pub fn encoder_inputs(cloud: &PointCloud, graph: &KnnGraph) -> Result<Matrix> {
    if graph.len() != cloud.len() {
        return Err(Error::Dimension(format!("graph has {} nodes for {} points", graph.len(), cloud.len())));
    }
    let w = sinusoid_width(POS_OCTAVES);
    let pe = centered_positional_encoding(cloud);
    let mut out = Matrix::zeros(cloud.len(), 3 * w);
    let mut enc = vec![0.0; w];
    for (i, nbrs) in graph.neighbors.iter().enumerate() {
        let row = out.row_mut(i);
        row[..w].copy_from_slice(pe.row(i));
        let (mean, max) = row[w..].split_at_mut(w);
        max.fill(f64::NEG_INFINITY);
        for &j in nbrs {
            sinusoid(sub3(cloud.points[j], cloud.points[i]), POS_OCTAVES, EDGE_SCALE, &mut enc);
            for c in 0..w {
                mean[c] += enc[c] / nbrs.len() as f64;
                max[c] = max[c].max(enc[c]);
            }
        }
        if nbrs.is_empty() {
            max.fill(0.0);
        }
    }
    Ok(out)
}

pub fn encoder_input_width() -> usize {
    3 * sinusoid_width(POS_OCTAVES)
}

/// Width of [`GeometricEmbedding`] rows for a learned width `d`.
pub fn embedding_width(d: usize) -> usize {
    d + sinusoid_width(POS_OCTAVES)
}

/// `N × (d + positional)` per-point geometric embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricEmbedding {
    pub vectors: Matrix,
}

/// Layer `l` maps `widths[l] → widths[l + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeoEncoderParams {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Matrix>,
}

impl GeoEncoderParams {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, hidden: usize, d: usize) {
        let widths = [encoder_input_width(), hidden, hidden, d];
        for l in 0..ENCODER_LAYERS {
            let sd = 1.0 / (widths[l] as f64).sqrt();
            layout.push(format!("{prefix}.l{l}.w"), widths[l], widths[l + 1], Init::Normal(sd));
            layout.push(format!("{prefix}.l{l}.b"), 1, widths[l + 1], Init::Zeros);
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> GeoEncoderVars {
        GeoEncoderVars {
            layers: self.weights.iter().zip(&self.biases).map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone()))).collect(),
        }
    }
}

pub struct GeoEncoderVars {
    pub layers: Vec<(Var, Var)>,
}

impl GeoEncoderVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        Self { layers: (0..ENCODER_LAYERS).map(|l| (b.var(&format!("{prefix}.l{l}.w")), b.var(&format!("{prefix}.l{l}.b")))).collect() }
    }
}

/// Learned MLP applied to the fixed `inputs`, concatenated with the
/// positional encoding (the first block of `inputs`).
pub fn encode_on_tape(t: &mut Tape, inputs: Var, positional: Var, p: &GeoEncoderVars) -> Var {
    let mut h = inputs;
    for (l, &(w, b)) in p.layers.iter().enumerate() {
        let z = t.matmul(h, w);
        h = t.add_row(z, b);
        if l + 1 < p.layers.len() {
            h = t.silu(h);
        }
    }
    t.concat_cols(&[h, positional])
}

pub fn encode_geometry(cloud: &PointCloud, graph: &KnnGraph, params: &GeoEncoderParams) -> Result<GeometricEmbedding> {
    let inputs = encoder_inputs(cloud, graph)?;
    if params.weights.first().map(|w| w.rows()) != Some(inputs.cols()) {
        return Err(Error::Dimension("encoder input width does not match parameters".into()));
    }
    for pair in params.weights.windows(2) {
        if pair[0].cols() != pair[1].rows() {
            return Err(Error::Dimension("encoder layer widths do not chain".into()));
        }
    }
    let mut t = Tape::new();
    let pos = centered_positional_encoding(cloud);
    let iv = t.leaf(inputs);
    let pv = t.leaf(pos);
    let vars = params.vars(&mut t);
    let out = encode_on_tape(&mut t, iv, pv, &vars);
    Ok(GeometricEmbedding { vectors: t.value(out).clone() })
}

/// `N × M` cosine similarities between every point and the visible points.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix {
    pub values: Matrix,
}

pub fn affinity_on_tape(t: &mut Tape, embedding: Var, visible: &[usize]) -> Var {
    let unit = t.normalize_rows(embedding);
    let vis = t.gather_rows(unit, visible);
    t.matmul_nt(unit, vis)
}

pub fn affinity(emb: &GeometricEmbedding, visible_indices: &[usize]) -> Result<AffinityMatrix> {
    if visible_indices.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    if let Some(&bad) = visible_indices.iter().find(|&&i| i >= emb.vectors.rows()) {
        return Err(Error::Dimension(format!("visible index {bad} out of range")));
    }
    let mut t = Tape::new();
    let e = t.leaf(emb.vectors.clone());
    let a = affinity_on_tape(&mut t, e, visible_indices);
    Ok(AffinityMatrix { values: t.value(a).clone().map(|x| x.clamp(-1.0, 1.0)) })
}

/// `softmax(affinity / τ) · features`.
pub fn propagate_on_tape(t: &mut Tape, affinity: Var, features: Var, temperature: f64) -> Var {
    let logits = t.scale(affinity, 1.0 / temperature);
    let w = t.softmax_rows(logits);
    t.matmul(w, features)
}

/// Propagation weights, one row per template point.
pub fn propagation_weights(aff: &AffinityMatrix, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidTemperature(temperature));
    }
    Ok(softmax_rows(&aff.values.scaled(1.0 / temperature)))
}

pub fn propagate_features(aff: &AffinityMatrix, visible_feats: &PointFeatureSet, temperature: f64) -> Result<Matrix> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidTemperature(temperature));
    }
    if aff.values.cols() != visible_feats.len() {
        return Err(Error::Dimension(format!("{} affinity columns for {} visible features", aff.values.cols(), visible_feats.len())));
    }
    if visible_feats.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    let mut t = Tape::new();
    let a = t.leaf(aff.values.clone());
    let f = t.leaf(visible_feats.features.clone());
    let out = propagate_on_tape(&mut t, a, f, temperature);
    Ok(t.value(out).clone())
}
