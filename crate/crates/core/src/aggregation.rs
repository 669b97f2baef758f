//! Primary-view selection, relative pose embedding and pose-aware fusion of
//! multi-view visible-point features.

use crate::attention::{attention_on_tape, AttentionParams, AttnVars};
use crate::error::{Error, Result};
use crate::features::{image_similarity, PatchFeatureMap, PointFeatureSet};
use crate::geom::{flatten_pose, relative_pose, PointCloud, PoseSE3};
use crate::params::{Bound, Init, ParamLayout, Params};
use crate::tape::{Matrix, Tape, Var};

/// Template views with their sampled visible-point features.
#[derive(Clone, Debug)]
pub struct ViewSet {
    pub views: Vec<(PatchFeatureMap, PointFeatureSet)>,
}

impl ViewSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn validate(&self, cloud: &PointCloud) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::EmptyViewSet);
        }
        for (k, (_, set)) in self.views.iter().enumerate() {
            if set.point_indices.iter().any(|&i| i >= cloud.len()) {
                return Err(Error::Dimension(format!("view {k} references points beyond the template")));
            }
        }
        Ok(())
    }
}

/// `W_pose` stored as `12 × D` so the embedding is a row: `p · W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseEmbeddingParams {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl PoseEmbeddingParams {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, d: usize) {
        layout.push(format!("{prefix}.w"), 12, d, Init::Normal(0.1));
        layout.push(format!("{prefix}.b"), 1, d, Init::Zeros);
    }

    pub fn from_params(p: &Params, prefix: &str) -> Self {
        Self { weight: p.matrix(&format!("{prefix}.w")), bias: p.matrix(&format!("{prefix}.b")) }
    }

    pub fn dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn vars(&self, t: &mut Tape) -> PoseVars {
        PoseVars { weight: t.leaf(self.weight.clone()), bias: t.leaf(self.bias.clone()) }
    }
}

#[derive(Clone, Copy)]
pub struct PoseVars {
    pub weight: Var,
    pub bias: Var,
}

impl PoseVars {
    pub fn from_bound(b: &Bound, prefix: &str) -> Self {
        Self { weight: b.var(&format!("{prefix}.w")), bias: b.var(&format!("{prefix}.b")) }
    }
}

/// Index of the view most similar to the target; ties go to the lowest index.
pub fn select_primary_view(views: &ViewSet, target: &PatchFeatureMap) -> Result<usize> {
    if views.is_empty() {
        return Err(Error::EmptyViewSet);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, (map, _)) in views.views.iter().enumerate() {
        let s = image_similarity(map, target)?;
        if s > best.0 {
            best = (s, k);
        }
    }
    Ok(best.1)
}

pub fn embed_pose_on_tape(t: &mut Tape, rel: &PoseSE3, p: &PoseVars) -> Var {
    let flat = t.leaf(Matrix::from_vec(1, 12, flatten_pose(rel).to_vec()));
    let e = t.matmul(flat, p.weight);
    t.add(e, p.bias)
}

/// `W_pose · flatten(rel) + b_pose`.
pub fn embed_pose(rel: &PoseSE3, params: &PoseEmbeddingParams) -> Vec<f64> {
    let mut t = Tape::new();
    let vars = params.vars(&mut t);
    let e = embed_pose_on_tape(&mut t, rel, &vars);
    t.value(e).data().to_vec()
}

/// Adds `e` to every feature row.
pub fn modulate(feats: &PointFeatureSet, e: &[f64]) -> Result<PointFeatureSet> {
    if feats.dim() != e.len() {
        return Err(Error::Dimension(format!("embedding width {} for features of width {}", e.len(), feats.dim())));
    }
    let mut out = feats.clone();
    for r in 0..out.features.rows() {
        for (x, y) in out.features.row_mut(r).iter_mut().zip(e) {
            *x += y;
        }
    }
    Ok(out)
}

/// `primary + Attention(primary, concat(all))`.
pub fn fuse_on_tape(t: &mut Tape, primary: Var, all: &[Var], p: &AttnVars) -> Var {
    let bank = if all.len() == 1 { all[0] } else { t.concat_rows(all) };
    let fused = attention_on_tape(t, primary, bank, p);
    t.add(fused, primary)
}

pub fn cross_view_fuse(primary_mod: &PointFeatureSet, all_mod: &[PointFeatureSet], params: &AttentionParams) -> Result<PointFeatureSet> {
    params.validate()?;
    let bank_rows: usize = all_mod.iter().map(|s| s.len()).sum();
    if bank_rows == 0 {
        return Err(Error::EmptyViewSet);
    }
    let d = params.d_in();
    if primary_mod.dim() != d || all_mod.iter().any(|s| s.dim() != d && !s.is_empty()) {
        return Err(Error::Dimension(format!("fusion expects width {d}")));
    }
    let mut t = Tape::new();
    let q = t.leaf(primary_mod.features.clone());
    let bank: Vec<Var> = all_mod.iter().filter(|s| !s.is_empty()).map(|s| t.leaf(s.features.clone())).collect();
    let vars = params.vars(&mut t);
    let out = fuse_on_tape(&mut t, q, &bank, &vars);
    Ok(PointFeatureSet { features: t.value(out).clone(), point_indices: primary_mod.point_indices.clone(), out_of_frame: primary_mod.out_of_frame })
}

/// Everything about a view set that does not depend on learned parameters.
#[derive(Clone, Debug)]
pub struct PreparedViews {
    pub primary: usize,
    pub relative_poses: Vec<PoseSE3>,
    pub features: Vec<Matrix>,
    pub primary_indices: Vec<usize>,
}

pub fn prepare_views(cloud: &PointCloud, views: &ViewSet, target: &PatchFeatureMap) -> Result<PreparedViews> {
    views.validate(cloud)?;
    let primary = select_primary_view(views, target)?;
    let primary_pose = views.views[primary].0.pose;
    // the primary's own relative pose is the identity up to rounding; store it exactly
    let relative_poses = views
        .views
        .iter()
        .enumerate()
        .map(|(k, (m, _))| if k == primary { PoseSE3::IDENTITY } else { relative_pose(&primary_pose, &m.pose) })
        .collect();
    let primary_set = &views.views[primary].1;
    if primary_set.is_empty() {
        return Err(Error::EmptyVisibleSet);
    }
    Ok(PreparedViews {
        primary,
        relative_poses,
        features: views.views.iter().map(|(_, s)| s.features.clone()).collect(),
        primary_indices: primary_set.point_indices.clone(),
    })
}

/// Fused primary-view features, `M* × D`.
pub fn aggregate_on_tape(t: &mut Tape, prep: &PreparedViews, pose: &PoseVars, fuse: &AttnVars) -> Var {
    let mut modulated = Vec::with_capacity(prep.features.len());
    let mut primary = None;
    for (k, (rel, feats)) in prep.relative_poses.iter().zip(&prep.features).enumerate() {
        if feats.rows() == 0 {
            continue;
        }
        let e = embed_pose_on_tape(t, rel, pose);
        let f = t.leaf(feats.clone());
        let m = t.add_row(f, e);
        if k == prep.primary {
            primary = Some(m);
        }
        modulated.push(m);
    }
    let primary = primary.expect("primary view has visible points");
    fuse_on_tape(t, primary, &modulated, fuse)
}

/// Returns the fused primary-view features and the primary index.
pub fn aggregate_template(
    cloud: &PointCloud,
    views: &ViewSet,
    target: &PatchFeatureMap,
    pose: &PoseEmbeddingParams,
    fuse: &AttentionParams,
) -> Result<(PointFeatureSet, usize)> {
    fuse.validate()?;
    let prep = prepare_views(cloud, views, target)?;
    if views.views.iter().any(|(_, s)| !s.is_empty() && s.dim() != fuse.d_in()) || pose.dim() != fuse.d_in() {
        return Err(Error::Dimension("view features, pose embedding and fusion widths must agree".into()));
    }
    let mut t = Tape::new();
    let pv = pose.vars(&mut t);
    let fv = fuse.vars(&mut t);
    let out = aggregate_on_tape(&mut t, &prep, &pv, &fv);
    let primary_set = &views.views[prep.primary].1;
    Ok((
        PointFeatureSet { features: t.value(out).clone(), point_indices: prep.primary_indices.clone(), out_of_frame: primary_set.out_of_frame },
        prep.primary,
    ))
}
