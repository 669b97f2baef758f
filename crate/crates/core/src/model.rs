//! The full conditioning pipeline and velocity network, wired through one
//! parameter layout, plus the per-pair training objective.

use crate::aggregation::{aggregate_on_tape, prepare_views, PoseEmbeddingParams, PoseVars, PreparedViews, ViewSet};
use crate::attention::{align_on_tape, block_on_tape, AttentionParams, AttnVars, BlockParams, BlockVars};
use crate::config::TrainConfig;
use crate::data::SyntheticPair;
use crate::error::{Error, Result};
use crate::features::{sample_features_at, PatchFeatureMap};
use crate::flow::{fm_loss_on_tape, velocity_on_tape, DeformationField, VelocityNetParams, VelocityShape, VelocityVars};
use crate::geom::{build_knn_graph, compute_visibility, KnnGraph, PointCloud, VisibilityParams};
use crate::losses::{deformation_terms_grad, LossBreakdown, MaskView};
use crate::params::{Bound, ParamLayout, Params};
use crate::propagation::{affinity_on_tape, centered_positional_encoding, encode_on_tape, encoder_inputs, propagate_on_tape, GeoEncoderParams, GeoEncoderVars};
use crate::tape::{Matrix, Tape, Var};

fn velocity_shape(cfg: &TrainConfig) -> VelocityShape {
    VelocityShape {
        cond_dim: cfg.feature_dim,
        width: cfg.vel_width,
        attn_width: cfg.vel_width,
        heads: cfg.attn_heads,
        depth: cfg.vel_depth,
        mlp_hidden: cfg.mlp_hidden,
    }
}

/// Parameter blocks in order: `pose`, `fuse`, `geo`, `align`, `refine`, `vel`.
pub fn model_layout(cfg: &TrainConfig) -> ParamLayout {
    let d = cfg.feature_dim;
    let mut l = ParamLayout::new();
    PoseEmbeddingParams::declare(&mut l, "pose", d);
    AttentionParams::declare(&mut l, "fuse", d, cfg.attn_width);
    GeoEncoderParams::declare(&mut l, "geo", cfg.geo_hidden, cfg.geo_dim);
    AttentionParams::declare(&mut l, "align", d, cfg.attn_width);
    for i in 0..cfg.attn_depth {
        BlockParams::declare(&mut l, &format!("refine.b{i}"), d, cfg.attn_width, cfg.mlp_hidden);
    }
    VelocityNetParams::declare(&mut l, "vel", &velocity_shape(cfg));
    l
}

/// Initialization with the zero output head.
pub fn init_params(cfg: &TrainConfig) -> Params {
    model_layout(cfg).initialize(cfg.seed, false)
}

pub fn velocity_params(params: &Params, cfg: &TrainConfig) -> VelocityNetParams {
    VelocityNetParams::from_params(params, "vel", cfg.vel_depth, cfg.attn_heads)
}

struct ModelVars {
    pose: PoseVars,
    fuse: AttnVars,
    geo: GeoEncoderVars,
    align: AttnVars,
    refine: Vec<BlockVars>,
    vel: VelocityVars,
}

impl ModelVars {
    fn from_bound(b: &Bound, cfg: &TrainConfig) -> Self {
        let h = cfg.attn_heads;
        Self {
            pose: PoseVars::from_bound(b, "pose"),
            fuse: AttnVars::from_bound(b, "fuse", h),
            geo: GeoEncoderVars::from_bound(b, "geo"),
            align: AttnVars::from_bound(b, "align", h),
            refine: (0..cfg.attn_depth).map(|i| BlockVars::from_bound(b, &format!("refine.b{i}"), h)).collect(),
            vel: VelocityVars::from_bound(b, "vel", cfg.vel_depth, h),
        }
    }
}

/// Parameter-free inputs of one pair, computed once.
#[derive(Clone, Debug)]
pub struct PairInputs {
    pub template: PointCloud,
    pub target: PointCloud,
    pub graph: KnnGraph,
    pub encoder_inputs: Matrix,
    pub positional: Matrix,
    pub views: PreparedViews,
    pub target_grid: Matrix,
    pub masks: Vec<MaskView>,
    pub target_velocity: Matrix,
}

pub fn check_compatible(cfg: &TrainConfig, pair: &SyntheticPair) -> Result<()> {
    let d = cfg.feature_dim;
    if pair.template.len() != cfg.num_points {
        return Err(Error::Config(format!("config expects {} points, pair `{}` has {}", cfg.num_points, pair.id, pair.template.len())));
    }
    if pair.template_views.len() != cfg.num_views {
        return Err(Error::Config(format!("config expects {} views, pair `{}` has {}", cfg.num_views, pair.id, pair.template_views.len())));
    }
    if pair.target_view.dim() != d || pair.template_views.iter().any(|v| v.dim() != d) {
        return Err(Error::Config(format!("config expects feature width {d} in pair `{}`", pair.id)));
    }
    if pair.target.len() != pair.template.len() {
        return Err(Error::Correspondence(pair.template.len(), pair.target.len()));
    }
    Ok(())
}

pub fn prepare_pair(cfg: &TrainConfig, pair: &SyntheticPair) -> Result<PairInputs> {
    check_compatible(cfg, pair)?;
    let mut x = prepare_inputs(cfg, &pair.template, &pair.template_views, &pair.target_view)?;
    x.target = pair.target.clone();
    x.masks = pair.gt_masks.clone();
    for (i, d) in pair.gt_deformation.vectors.iter().enumerate() {
        x.target_velocity.row_mut(i).copy_from_slice(d);
    }
    Ok(x)
}

/// Inputs for inference only: the target cloud is a placeholder equal to
/// the template and there are no masks.
pub fn prepare_inputs(cfg: &TrainConfig, template: &PointCloud, views: &[PatchFeatureMap], target_view: &PatchFeatureMap) -> Result<PairInputs> {
    if views.iter().chain([target_view]).any(|v| v.dim() != cfg.feature_dim) {
        return Err(Error::Config(format!("config expects feature width {}", cfg.feature_dim)));
    }
    let vis = VisibilityParams { max_visible: Some(cfg.num_visible), ..VisibilityParams::default() };
    let views = views
        .iter()
        .map(|m| {
            let visible = compute_visibility(template, &m.pose, &m.intr, &vis);
            Ok((m.clone(), sample_features_at(m, template, &visible)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let views = prepare_views(template, &ViewSet { views }, target_view)?;
    let graph = build_knn_graph(template, cfg.knn_k)?;
    Ok(PairInputs {
        encoder_inputs: encoder_inputs(template, &graph)?,
        positional: centered_positional_encoding(template),
        graph,
        template: template.clone(),
        target: template.clone(),
        views,
        target_grid: target_view.grid.clone(),
        masks: Vec::new(),
        target_velocity: Matrix::zeros(template.len(), 3),
    })
}

/// Conditioning rows `c`, one per template point.
fn conditioning_on_tape(t: &mut Tape, x: &PairInputs, v: &ModelVars, cfg: &TrainConfig) -> Var {
    let fused = aggregate_on_tape(t, &x.views, &v.pose, &v.fuse);
    let inputs = t.leaf(x.encoder_inputs.clone());
    let positional = t.leaf(x.positional.clone());
    let g = encode_on_tape(t, inputs, positional, &v.geo);
    let aff = affinity_on_tape(t, g, &x.views.primary_indices);
    let complete = propagate_on_tape(t, aff, fused, cfg.temperature);
    let grid = t.leaf(x.target_grid.clone());
    let mut h = align_on_tape(t, complete, grid, &v.align);
    for b in &v.refine {
        h = block_on_tape(t, h, b);
    }
    h
}

/// Conditioning rows for a pair, with no gradient bookkeeping.
pub fn conditioning(params: &Params, cfg: &TrainConfig, x: &PairInputs) -> Matrix {
    let mut t = Tape::new();
    let bound = params.bind(&mut t);
    let vars = ModelVars::from_bound(&bound, cfg);
    let c = conditioning_on_tape(&mut t, x, &vars, cfg);
    t.value(c).clone()
}

/// Single-step deformation `v(S, 0, c)`.
pub fn predict(params: &Params, cfg: &TrainConfig, x: &PairInputs) -> Result<DeformationField> {
    let mut t = Tape::new();
    let bound = params.bind(&mut t);
    let vars = ModelVars::from_bound(&bound, cfg);
    let c = conditioning_on_tape(&mut t, x, &vars, cfg);
    let d = velocity_on_tape(&mut t, &x.template.points, 0.0, c, &vars.vel);
    let field = DeformationField { vectors: t.value(d).to_points() };
    if field.vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidGeometry("model produced a non-finite deformation".into()));
    }
    Ok(field)
}

/// Weighted objective of one pair at flow time `t_sample`, with its
/// gradient over the flat parameter vector.
pub fn pair_objective(params: &Params, cfg: &TrainConfig, x: &PairInputs, t_sample: f64) -> Result<(LossBreakdown, Vec<f64>)> {
    let w = &cfg.weights;
    let mut t = Tape::new();
    let bound = params.bind(&mut t);
    let vars = ModelVars::from_bound(&bound, cfg);
    let c = conditioning_on_tape(&mut t, x, &vars, cfg);

    let xt: Vec<_> = x
        .template
        .points
        .iter()
        .zip(&x.target.points)
        .map(|(a, b)| std::array::from_fn(|k| (1.0 - t_sample) * a[k] + t_sample * b[k]))
        .collect();
    let v = velocity_on_tape(&mut t, &xt, t_sample, c, &vars.vel);
    let fm = fm_loss_on_tape(&mut t, v, &x.target_velocity);

    let d = velocity_on_tape(&mut t, &x.template.points, 0.0, c, &vars.vel);
    let field = DeformationField { vectors: t.value(d).to_points() };
    let (mut breakdown, grad) = deformation_terms_grad(&x.template, &x.target, &x.graph, &field, &x.masks, &cfg.splat(), w)?;
    let geo = t.custom_scalar(&[d], breakdown.total, vec![Matrix::from_points(&grad)]);
    let total = t.combine(&[(fm, w.fm), (geo, 1.0)]);

    breakdown.fm = t.scalar(fm);
    breakdown.total = t.scalar(total);
    let grads = t.backward(total);
    Ok((breakdown, bound.gather(&params.layout, &grads)))
}
