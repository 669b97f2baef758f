//! Multi-head scaled dot-product attention, cross-attention of template
//! features against a target feature grid, and pre-norm self-attention
//! refinement blocks.

use crate::error::{Error, Result};
use crate::features::PatchFeatureMap;
use crate::params::{Bound, Init, ParamLayout, Params};
use crate::tape::{Matrix, Tape, Var};

/// Projections `D_in → width` for queries, keys and values and
/// `width → D_in` for the output, so attention output can be added back to
/// its query stream.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub heads: usize,
}

impl AttentionParams {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, d_in: usize, width: usize) {
        let sd = 1.0 / (d_in as f64).sqrt();
        layout.push(format!("{prefix}.wq"), d_in, width, Init::Normal(sd));
        layout.push(format!("{prefix}.wk"), d_in, width, Init::Normal(sd));
        layout.push(format!("{prefix}.wv"), d_in, width, Init::Normal(sd));
        layout.push(format!("{prefix}.wo"), width, d_in, Init::ZeroStart(1.0 / (width as f64).sqrt()));
    }

    pub fn from_params(p: &Params, prefix: &str, heads: usize) -> Self {
        Self {
            wq: p.matrix(&format!("{prefix}.wq")),
            wk: p.matrix(&format!("{prefix}.wk")),
            wv: p.matrix(&format!("{prefix}.wv")),
            wo: p.matrix(&format!("{prefix}.wo")),
            heads,
        }
    }

    pub fn d_in(&self) -> usize {
        self.wq.rows()
    }

    pub fn width(&self) -> usize {
        self.wq.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (d, w) = (self.d_in(), self.width());
        if self.wk.shape() != (d, w) || self.wv.shape() != (d, w) || self.wo.shape() != (w, d) {
            return Err(Error::Dimension("attention projection shapes disagree".into()));
        }
        if self.heads == 0 || w % self.heads != 0 {
            return Err(Error::Dimension(format!("width {w} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    pub fn vars(&self, t: &mut Tape) -> AttnVars {
        AttnVars {
            wq: t.leaf(self.wq.clone()),
            wk: t.leaf(self.wk.clone()),
            wv: t.leaf(self.wv.clone()),
            wo: t.leaf(self.wo.clone()),
            heads: self.heads,
        }
    }
}

#[derive(Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub heads: usize,
}

impl AttnVars {
    pub fn from_bound(b: &Bound, prefix: &str, heads: usize) -> Self {
        Self {
            wq: b.var(&format!("{prefix}.wq")),
            wk: b.var(&format!("{prefix}.wk")),
            wv: b.var(&format!("{prefix}.wv")),
            wo: b.var(&format!("{prefix}.wo")),
            heads,
        }
    }
}

/// Heads concatenated, then the output projection; no residual.
pub fn attention_on_tape(t: &mut Tape, q_in: Var, kv_in: Var, p: &AttnVars) -> Var {
    let q = t.matmul(q_in, p.wq);
    let k = t.matmul(kv_in, p.wk);
    let v = t.matmul(kv_in, p.wv);
    let width = t.value(q).cols();
    let hd = width / p.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let heads: Vec<Var> = (0..p.heads)
        .map(|h| {
            let (qh, kh, vh) = if p.heads == 1 {
                (q, k, v)
            } else {
                (t.slice_cols(q, h * hd, hd), t.slice_cols(k, h * hd, hd), t.slice_cols(v, h * hd, hd))
            };
            let logits = t.matmul_nt(qh, kh);
            let logits = t.scale(logits, scale);
            let w = t.softmax_rows(logits);
            t.matmul(w, vh)
        })
        .collect();
    let cat = if heads.len() == 1 { heads[0] } else { t.concat_cols(&heads) };
    t.matmul(cat, p.wo)
}

fn check_inputs(q_in: &Matrix, kv_in: &Matrix, params: &AttentionParams) -> Result<()> {
    params.validate()?;
    if kv_in.rows() == 0 {
        return Err(Error::Dimension("attention needs at least one key".into()));
    }
    if q_in.cols() != params.d_in() || kv_in.cols() != params.d_in() {
        return Err(Error::Dimension(format!(
            "attention inputs have widths {}/{} but projections expect {}",
            q_in.cols(),
            kv_in.cols(),
            params.d_in()
        )));
    }
    Ok(())
}

pub fn attention(q_in: &Matrix, kv_in: &Matrix, params: &AttentionParams) -> Result<Matrix> {
    check_inputs(q_in, kv_in, params)?;
    let mut t = Tape::new();
    let (q, kv) = (t.leaf(q_in.clone()), t.leaf(kv_in.clone()));
    let vars = params.vars(&mut t);
    let out = attention_on_tape(&mut t, q, kv, &vars);
    Ok(t.value(out).clone())
}

/// `queries + Attention(queries, target patches)`.
pub fn align_on_tape(t: &mut Tape, queries: Var, target: Var, p: &AttnVars) -> Var {
    let att = attention_on_tape(t, queries, target, p);
    t.add(queries, att)
}

pub fn align_to_target(template_feats: &Matrix, target_map: &PatchFeatureMap, params: &AttentionParams) -> Result<Matrix> {
    if target_map.grid.rows() == 0 {
        return Err(Error::EmptyTarget);
    }
    check_inputs(template_feats, &target_map.grid, params)?;
    let mut t = Tape::new();
    let (q, kv) = (t.leaf(template_feats.clone()), t.leaf(target_map.grid.clone()));
    let vars = params.vars(&mut t);
    let out = align_on_tape(&mut t, q, kv, &vars);
    Ok(t.value(out).clone())
}

/// Pre-norm residual block: `x + Attn(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub attn: AttentionParams,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub mlp_w1: Matrix,
    pub mlp_b1: Matrix,
    pub mlp_w2: Matrix,
    pub mlp_b2: Matrix,
}

impl BlockParams {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, d: usize, attn_width: usize, mlp_hidden: usize) {
        layout.push(format!("{prefix}.ln1.g"), 1, d, Init::Ones);
        layout.push(format!("{prefix}.ln1.b"), 1, d, Init::Zeros);
        AttentionParams::declare(layout, &format!("{prefix}.attn"), d, attn_width);
        layout.push(format!("{prefix}.ln2.g"), 1, d, Init::Ones);
        layout.push(format!("{prefix}.ln2.b"), 1, d, Init::Zeros);
        layout.push(format!("{prefix}.mlp.w1"), d, mlp_hidden, Init::Normal(1.0 / (d as f64).sqrt()));
        layout.push(format!("{prefix}.mlp.b1"), 1, mlp_hidden, Init::Zeros);
        layout.push(format!("{prefix}.mlp.w2"), mlp_hidden, d, Init::ZeroStart(1.0 / (mlp_hidden as f64).sqrt()));
        layout.push(format!("{prefix}.mlp.b2"), 1, d, Init::Zeros);
    }

    pub fn from_params(p: &Params, prefix: &str, heads: usize) -> Self {
        let m = |s: &str| p.matrix(&format!("{prefix}.{s}"));
        Self {
            ln1_gain: m("ln1.g"),
            ln1_bias: m("ln1.b"),
            attn: AttentionParams::from_params(p, &format!("{prefix}.attn"), heads),
            ln2_gain: m("ln2.g"),
            ln2_bias: m("ln2.b"),
            mlp_w1: m("mlp.w1"),
            mlp_b1: m("mlp.b1"),
            mlp_w2: m("mlp.w2"),
            mlp_b2: m("mlp.b2"),
        }
    }

    pub fn width(&self) -> usize {
        self.ln1_gain.cols()
    }

    pub fn vars(&self, t: &mut Tape) -> BlockVars {
        BlockVars {
            ln1_gain: t.leaf(self.ln1_gain.clone()),
            ln1_bias: t.leaf(self.ln1_bias.clone()),
            attn: self.attn.vars(t),
            ln2_gain: t.leaf(self.ln2_gain.clone()),
            ln2_bias: t.leaf(self.ln2_bias.clone()),
            mlp_w1: t.leaf(self.mlp_w1.clone()),
            mlp_b1: t.leaf(self.mlp_b1.clone()),
            mlp_w2: t.leaf(self.mlp_w2.clone()),
            mlp_b2: t.leaf(self.mlp_b2.clone()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        self.attn.validate()?;
        let ok = self.ln1_bias.shape() == (1, d)
            && self.ln2_gain.shape() == (1, d)
            && self.ln2_bias.shape() == (1, d)
            && self.attn.d_in() == d
            && self.mlp_w1.rows() == d
            && self.mlp_b1.shape() == (1, self.mlp_w1.cols())
            && self.mlp_w2.shape() == (self.mlp_w1.cols(), d)
            && self.mlp_b2.shape() == (1, d);
        if ok {
            Ok(())
        } else {
            Err(Error::Dimension("self-attention block shapes disagree".into()))
        }
    }
}

#[derive(Clone, Copy)]
pub struct BlockVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub attn: AttnVars,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
}

impl BlockVars {
    pub fn from_bound(b: &Bound, prefix: &str, heads: usize) -> Self {
        let v = |s: &str| b.var(&format!("{prefix}.{s}"));
        Self {
            ln1_gain: v("ln1.g"),
            ln1_bias: v("ln1.b"),
            attn: AttnVars::from_bound(b, &format!("{prefix}.attn"), heads),
            ln2_gain: v("ln2.g"),
            ln2_bias: v("ln2.b"),
            mlp_w1: v("mlp.w1"),
            mlp_b1: v("mlp.b1"),
            mlp_w2: v("mlp.w2"),
            mlp_b2: v("mlp.b2"),
        }
    }
}

pub fn block_on_tape(t: &mut Tape, x: Var, p: &BlockVars) -> Var {
    let n1 = t.layer_norm(x, p.ln1_gain, p.ln1_bias);
    let a = attention_on_tape(t, n1, n1, &p.attn);
    let x = t.add(x, a);
    let n2 = t.layer_norm(x, p.ln2_gain, p.ln2_bias);
    let h = t.matmul(n2, p.mlp_w1);
    let h = t.add_row(h, p.mlp_b1);
    let h = t.silu(h);
    let h = t.matmul(h, p.mlp_w2);
    let h = t.add_row(h, p.mlp_b2);
    t.add(x, h)
}

/// `N × D` conditioning rows, one per template point.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningContext {
    pub features: Matrix,
}

pub fn refine_self_attention(feats: &Matrix, blocks: &[BlockParams]) -> Result<ConditioningContext> {
    if blocks.is_empty() {
        return Err(Error::Config("refinement needs at least one block".into()));
    }
    for b in blocks {
        b.validate()?;
        if b.width() != feats.cols() {
            return Err(Error::Dimension(format!("block width {} for features of width {}", b.width(), feats.cols())));
        }
    }
    let mut t = Tape::new();
    let mut x = t.leaf(feats.clone());
    for b in blocks {
        let vars = b.vars(&mut t);
        x = block_on_tape(&mut t, x, &vars);
    }
    Ok(ConditioningContext { features: t.value(x).clone() })
}
