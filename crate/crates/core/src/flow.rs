//! Conditional flow matching over index-aligned point clouds: the linear
//! interpolation path, its constant target velocity, the per-point velocity
//! network and deformation by one Euler step (or several).

use crate::attention::{block_on_tape, BlockParams, BlockVars, ConditioningContext};
use crate::error::{Error, Result};
use crate::geom::{add3, scale3, sub3, PointCloud, Vec3};
use crate::params::{Bound, Init, ParamLayout, Params};
use crate::propagation::{sinusoid, sinusoid_width};
use crate::tape::{Matrix, Tape, Var};

pub const TIME_EMBEDDING_DIM: usize = 16;
const POSITION_OCTAVES: usize = 5;

/// `[sin(2^k t), cos(2^k t)]` for `k < dim / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeEmbedding {
    pub dim: usize,
}

impl Default for TimeEmbedding {
    fn default() -> Self {
        Self { dim: TIME_EMBEDDING_DIM }
    }
}

impl TimeEmbedding {
    pub fn encode(&self, t: f64) -> Vec<f64> {
        let half = self.dim / 2;
        let mut out = vec![0.0; self.dim];
        for k in 0..half {
            let (s, c) = (t * (1u64 << k) as f64).sin_cos();
            out[k] = s;
            out[half + k] = c;
        }
        out
    }
}

/// Per-point displacement, same order as the template.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    pub vectors: Vec<Vec3>,
}

impl DeformationField {
    pub fn zeros(n: usize) -> Self {
        Self { vectors: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn apply(&self, cloud: &PointCloud) -> Result<PointCloud> {
        if cloud.len() != self.len() {
            return Err(Error::Correspondence(cloud.len(), self.len()));
        }
        let points = cloud.points.iter().zip(&self.vectors).map(|(&p, &d)| add3(p, d)).collect();
        Ok(PointCloud { id: cloud.id.clone(), points })
    }
}

fn check_time(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(Error::InvalidTime(t))
    }
}

/// `(1 − t)·x0 + t·x1`, index-aligned.
pub fn interpolate_path(x0: &PointCloud, x1: &PointCloud, t: f64) -> Result<PointCloud> {
    if x0.len() != x1.len() {
        return Err(Error::Correspondence(x0.len(), x1.len()));
    }
    check_time(t)?;
    let points = x0
        .points
        .iter()
        .zip(&x1.points)
        .map(|(&a, &b)| {
            if t == 0.0 {
                a
            } else if t == 1.0 {
                b
            } else {
                add3(scale3(a, 1.0 - t), scale3(b, t))
            }
        })
        .collect();
    Ok(PointCloud { id: x0.id.clone(), points })
}

/// `x1 − x0` per point.
pub fn target_velocity(x0: &PointCloud, x1: &PointCloud) -> Result<DeformationField> {
    if x0.len() != x1.len() {
        return Err(Error::Correspondence(x0.len(), x1.len()));
    }
    Ok(DeformationField { vectors: x0.points.iter().zip(&x1.points).map(|(&a, &b)| sub3(b, a)).collect() })
}

pub fn velocity_input_width(cond_dim: usize) -> usize {
    sinusoid_width(POSITION_OCTAVES) + cond_dim + TIME_EMBEDDING_DIM
}

/// Dimensions of the velocity network.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityShape {
    pub cond_dim: usize,
    pub width: usize,
    pub attn_width: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_hidden: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityNetParams {
    pub in_w: Matrix,
    pub in_b: Matrix,
    pub blocks: Vec<BlockParams>,
    pub out_gain: Matrix,
    pub out_bias: Matrix,
    pub head_w: Matrix,
    pub head_b: Matrix,
}

impl VelocityNetParams {
    pub fn declare(layout: &mut ParamLayout, prefix: &str, s: &VelocityShape) {
        let in_w = velocity_input_width(s.cond_dim);
        layout.push(format!("{prefix}.in.w"), in_w, s.width, Init::Normal(1.0 / (in_w as f64).sqrt()));
        layout.push(format!("{prefix}.in.b"), 1, s.width, Init::Zeros);
        for i in 0..s.depth {
            BlockParams::declare(layout, &format!("{prefix}.b{i}"), s.width, s.attn_width, s.mlp_hidden);
        }
        layout.push(format!("{prefix}.out.g"), 1, s.width, Init::Ones);
        layout.push(format!("{prefix}.out.b"), 1, s.width, Init::Zeros);
        layout.push(format!("{prefix}.head.w"), s.width, 3, Init::ZeroStart(1.0 / (s.width as f64).sqrt()));
        layout.push(format!("{prefix}.head.b"), 1, 3, Init::Zeros);
    }

    pub fn from_params(p: &Params, prefix: &str, depth: usize, heads: usize) -> Self {
        let m = |s: &str| p.matrix(&format!("{prefix}.{s}"));
        Self {
            in_w: m("in.w"),
            in_b: m("in.b"),
            blocks: (0..depth).map(|i| BlockParams::from_params(p, &format!("{prefix}.b{i}"), heads)).collect(),
            out_gain: m("out.g"),
            out_bias: m("out.b"),
            head_w: m("head.w"),
            head_b: m("head.b"),
        }
    }

    pub fn cond_dim(&self) -> usize {
        self.in_w.rows() - sinusoid_width(POSITION_OCTAVES) - TIME_EMBEDDING_DIM
    }

    fn vars(&self, t: &mut Tape) -> VelocityVars {
        let mut leaf = |m: &Matrix| t.leaf(m.clone());
        let (in_w, in_b) = (leaf(&self.in_w), leaf(&self.in_b));
        let blocks = self.blocks.iter().map(|b| b.vars(t)).collect();
        VelocityVars {
            in_w,
            in_b,
            blocks,
            out_gain: t.leaf(self.out_gain.clone()),
            out_bias: t.leaf(self.out_bias.clone()),
            head_w: t.leaf(self.head_w.clone()),
            head_b: t.leaf(self.head_b.clone()),
        }
    }
}

pub struct VelocityVars {
    pub in_w: Var,
    pub in_b: Var,
    pub blocks: Vec<BlockVars>,
    pub out_gain: Var,
    pub out_bias: Var,
    pub head_w: Var,
    pub head_b: Var,
}

impl VelocityVars {
    pub fn from_bound(b: &Bound, prefix: &str, depth: usize, heads: usize) -> Self {
        let v = |s: &str| b.var(&format!("{prefix}.{s}"));
        Self {
            in_w: v("in.w"),
            in_b: v("in.b"),
            blocks: (0..depth).map(|i| BlockVars::from_bound(b, &format!("{prefix}.b{i}"), heads)).collect(),
            out_gain: v("out.g"),
            out_bias: v("out.b"),
            head_w: v("head.w"),
            head_b: v("head.b"),
        }
    }
}

/// Fixed per-point network input apart from the conditioning rows.
pub fn position_time_inputs(points: &[Vec3], t: f64) -> (Matrix, Matrix) {
    let w = sinusoid_width(POSITION_OCTAVES);
    let mut pe = Matrix::zeros(points.len(), w);
    for (i, &p) in points.iter().enumerate() {
        sinusoid(p, POSITION_OCTAVES, 1.0, pe.row_mut(i));
    }
    let te = TimeEmbedding::default().encode(t);
    let mut tm = Matrix::zeros(points.len(), te.len());
    for i in 0..points.len() {
        tm.row_mut(i).copy_from_slice(&te);
    }
    (pe, tm)
}

/// `N × 3` velocity at `points` and time `t`.
pub fn velocity_on_tape(tape: &mut Tape, points: &[Vec3], t: f64, cond: Var, p: &VelocityVars) -> Var {
    let (pe, tm) = position_time_inputs(points, t);
    let pe = tape.leaf(pe);
    let tm = tape.leaf(tm);
    let x = tape.concat_cols(&[pe, cond, tm]);
    let h = tape.matmul(x, p.in_w);
    let mut h = tape.add_row(h, p.in_b);
    for b in &p.blocks {
        h = block_on_tape(tape, h, b);
    }
    let h = tape.layer_norm(h, p.out_gain, p.out_bias);
    let v = tape.matmul(h, p.head_w);
    tape.add_row(v, p.head_b)
}

fn check_forward(x: &PointCloud, t: f64, c: &ConditioningContext, params: &VelocityNetParams) -> Result<()> {
    check_time(t)?;
    if c.features.rows() != x.len() {
        return Err(Error::Dimension(format!("{} conditioning rows for {} points", c.features.rows(), x.len())));
    }
    if c.features.cols() != params.cond_dim() {
        return Err(Error::Dimension(format!("conditioning width {} but network expects {}", c.features.cols(), params.cond_dim())));
    }
    Ok(())
}

pub fn velocity_forward(x_t: &PointCloud, t: f64, c: &ConditioningContext, params: &VelocityNetParams) -> Result<DeformationField> {
    check_forward(x_t, t, c, params)?;
    let mut tape = Tape::new();
    let vars = params.vars(&mut tape);
    let cond = tape.leaf(c.features.clone());
    let v = velocity_on_tape(&mut tape, &x_t.points, t, cond, &vars);
    let vectors = tape.value(v).to_points();
    if vectors.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGeometry("velocity network produced non-finite output".into()));
    }
    Ok(DeformationField { vectors })
}

/// `D = v(S, 0, c)`, `T̂ = S + D`.
pub fn single_step_deform(template: &PointCloud, c: &ConditioningContext, params: &VelocityNetParams) -> Result<(DeformationField, PointCloud)> {
    let field = velocity_forward(template, 0.0, c, params)?;
    let deformed = field.apply(template)?;
    Ok((field, deformed))
}

/// Explicit Euler with `steps` uniform steps from `t = 0`.
pub fn integrate_ode(template: &PointCloud, c: &ConditioningContext, params: &VelocityNetParams, steps: usize) -> Result<PointCloud> {
    if steps < 1 {
        return Err(Error::InvalidSteps(steps));
    }
    let dt = 1.0 / steps as f64;
    let mut x = template.clone();
    for k in 0..steps {
        let v = velocity_forward(&x, k as f64 / steps as f64, c, params)?;
        for (p, d) in x.points.iter_mut().zip(&v.vectors) {
            *p = add3(*p, scale3(*d, dt));
        }
    }
    Ok(x)
}

/// Mean over points of `‖v − u‖²`.
pub fn fm_loss_on_tape(tape: &mut Tape, v: Var, u: &Matrix) -> Var {
    let vv = tape.value(v);
    assert_eq!(vv.shape(), u.shape());
    let n = vv.rows() as f64;
    let mut grad = Matrix::zeros(vv.rows(), 3);
    let mut total = 0.0;
    for (g, (a, b)) in grad.data_mut().iter_mut().zip(vv.data().iter().zip(u.data())) {
        let r = a - b;
        total += r * r;
        *g = 2.0 * r / n;
    }
    tape.custom_scalar(&[v], total / n, vec![grad])
}

pub fn fm_loss(params: &VelocityNetParams, x0: &PointCloud, x1: &PointCloud, c: &ConditioningContext, t: f64) -> Result<f64> {
    let u = target_velocity(x0, x1)?;
    let xt = interpolate_path(x0, x1, t)?;
    let v = velocity_forward(&xt, t, c, params)?;
    let n = v.len() as f64;
    Ok(v.vectors.iter().zip(&u.vectors).map(|(a, b)| {
        let d = sub3(*a, *b);
        d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
    }).sum::<f64>() / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> VelocityShape {
        VelocityShape { cond_dim: 4, width: 8, attn_width: 8, heads: 2, depth: 2, mlp_hidden: 8 }
    }

    fn params(random: bool, seed: u64) -> VelocityNetParams {
        let mut l = ParamLayout::new();
        VelocityNetParams::declare(&mut l, "vel", &shape());
        VelocityNetParams::from_params(&l.initialize(seed, random), "vel", 2, 2)
    }

    fn ctx(n: usize) -> ConditioningContext {
        ConditioningContext { features: Matrix::from_vec(n, 4, (0..n * 4).map(|i| (i as f64 * 0.37).sin()).collect()) }
    }

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new("c", points).unwrap()
    }

    /// Head emits a constant `b` for any input.
    fn constant_params(b: Vec3) -> VelocityNetParams {
        let mut p = params(true, 3);
        p.head_w = Matrix::zeros(8, 3);
        p.head_b = Matrix::from_rows(&[b]);
        p
    }

    #[test]
    fn path_examples() {
        let a = cloud(vec![[0.0; 3], [0.3, -0.1, 0.2]]);
        let b = cloud(vec![[2.0, 0.0, 0.0], [0.1, 0.7, -0.4]]);
        assert_eq!(interpolate_path(&a, &b, 0.0).unwrap(), a);
        assert_eq!(interpolate_path(&a, &b, 1.0).unwrap().points, b.points);
        assert_eq!(interpolate_path(&a, &b, 0.5).unwrap().points[0], [1.0, 0.0, 0.0]);
        assert!(matches!(interpolate_path(&a, &b, 1.5), Err(Error::InvalidTime(_))));
        let short = cloud(vec![[0.0; 3]]);
        assert!(matches!(interpolate_path(&a, &short, 0.5), Err(Error::Correspondence(2, 1))));
    }

    #[test]
    fn target_velocity_examples() {
        let a = cloud(vec![[0.0; 3], [0.3, -0.1, 0.2]]);
        assert_eq!(target_velocity(&a, &a).unwrap(), DeformationField::zeros(2));
        let up = a.translated([0.0, 0.0, 1.0]);
        for v in target_velocity(&a, &up).unwrap().vectors {
            assert!((v[2] - 1.0).abs() < 1e-15 && v[0].abs() < 1e-15 && v[1].abs() < 1e-15);
        }
        assert!(matches!(target_velocity(&a, &cloud(vec![[0.0; 3]])), Err(Error::Correspondence(_, _))));
    }

    #[test]
    fn zero_head_is_safe_start() {
        let p = params(false, 1);
        let x = cloud(vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1], [0.4, -0.3, 0.0]]);
        assert_eq!(velocity_forward(&x, 0.3, &ctx(3), &p).unwrap(), DeformationField::zeros(3));
        let (d, t) = single_step_deform(&x, &ctx(3), &p).unwrap();
        assert_eq!((d, t), (DeformationField::zeros(3), x.clone()));
        assert_eq!(integrate_ode(&x, &ctx(3), &p, 5).unwrap(), x);
    }

    #[test]
    fn permutation_equivariance() {
        let p = params(true, 2);
        let x = cloud(vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1], [0.4, -0.3, 0.0]]);
        let c = ctx(3);
        let perm = [2, 0, 1];
        let xp = cloud(perm.iter().map(|&i| x.points[i]).collect());
        let cp = ConditioningContext { features: Matrix::from_rows(&perm.iter().map(|&i| c.features.row(i).to_vec()).collect::<Vec<_>>()) };
        let a = velocity_forward(&x, 0.4, &c, &p).unwrap();
        let b = velocity_forward(&xp, 0.4, &cp, &p).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for ax in 0..3 {
                assert!((a.vectors[i][ax] - b.vectors[k][ax]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_velocity_integration() {
        let b = [0.1, -0.2, 0.05];
        let p = constant_params(b);
        let x = cloud(vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1]]);
        let (_, single) = single_step_deform(&x, &ctx(2), &p).unwrap();
        for (s, q) in single.points.iter().zip(&x.points) {
            assert_eq!(*s, add3(*q, b));
        }
        let four = integrate_ode(&x, &ctx(2), &p, 4).unwrap();
        for (s, q) in four.points.iter().zip(&x.points) {
            // four quarter steps of b
            for ax in 0..3 {
                assert!((s[ax] - (q[ax] + b[ax])).abs() < 1e-15);
            }
        }
        let one = integrate_ode(&x, &ctx(2), &params(true, 9), 1).unwrap();
        assert_eq!(one, single_step_deform(&x, &ctx(2), &params(true, 9)).unwrap().1);
        assert!(matches!(integrate_ode(&x, &ctx(2), &p, 0), Err(Error::InvalidSteps(0))));
    }

    #[test]
    fn fm_loss_examples() {
        let x0 = cloud(vec![[0.1, 0.2, 0.3], [-0.2, 0.0, 0.1]]);
        let zero = params(false, 1);
        assert_eq!(fm_loss(&zero, &x0, &x0, &ctx(2), 0.5).unwrap(), 0.0);
        let up = x0.translated([0.0, 0.0, 1.0]);
        // per-point squared norm of (0,0,1), averaged over points
        assert!((fm_loss(&zero, &x0, &up, &ctx(2), 0.3).unwrap() - 1.0).abs() < 1e-12);
        let exact = constant_params([0.0, 0.0, 1.0]);
        assert!(fm_loss(&exact, &x0, &up, &ctx(2), 0.7).unwrap() < 1e-24);
        assert!(matches!(fm_loss(&zero, &x0, &cloud(vec![[0.0; 3]]), &ctx(2), 0.1), Err(Error::Correspondence(_, _))));
    }

    #[test]
    fn time_embedding_is_deterministic() {
        let te = TimeEmbedding::default();
        assert_eq!(te.encode(0.25), te.encode(0.25));
        assert_eq!(te.encode(0.0)[..8], [0.0; 8]);
        assert_eq!(te.encode(0.0)[8..], [1.0; 8]);
    }

    type Rows = Vec<Vec<f64>>;

    fn rows(m: &Matrix) -> Rows {
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    fn mm(a: &Rows, w: &Matrix) -> Rows {
        a.iter().map(|r| (0..w.cols()).map(|c| r.iter().enumerate().map(|(k, x)| x * w.get(k, c)).sum()).collect()).collect()
    }

    fn add_bias(a: &Rows, b: &Matrix) -> Rows {
        a.iter().map(|r| r.iter().enumerate().map(|(c, x)| x + b.get(0, c)).collect()).collect()
    }

    fn ln(a: &Rows, g: &Matrix, b: &Matrix) -> Rows {
        a.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                r.iter().enumerate().map(|(c, x)| (x - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c)).collect()
            })
            .collect()
    }

    fn attn(x: &Rows, p: &crate::attention::AttentionParams) -> Rows {
        let (q, k, v) = (mm(x, &p.wq), mm(x, &p.wk), mm(x, &p.wv));
        let hd = p.wq.cols() / p.heads;
        let mut cat = vec![vec![0.0; p.wq.cols()]; x.len()];
        for h in 0..p.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..x.len() {
                let logits: Vec<f64> = (0..x.len()).map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt()).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for j in 0..x.len() {
                    for c in cols.clone() {
                        cat[i][c] += logits[j].exp() / z * v[j][c];
                    }
                }
            }
        }
        mm(&cat, &p.wo)
    }

    fn plus(a: &Rows, b: &Rows) -> Rows {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    #[test]
    fn two_point_network_matches_composed_layers() {
        let p = params(true, 11);
        let x = cloud(vec![[0.3, -0.2, 0.1], [-0.1, 0.25, -0.35]]);
        let c = ctx(2);
        let t = 0.6;
        let mut h: Rows = x
            .points
            .iter()
            .enumerate()
            .map(|(i, &q)| {
                let mut pe = vec![0.0; sinusoid_width(POSITION_OCTAVES)];
                sinusoid(q, POSITION_OCTAVES, 1.0, &mut pe);
                let mut row = pe;
                row.extend_from_slice(c.features.row(i));
                for k in 0..8 {
                    row.push((t * (1u64 << k) as f64).sin());
                }
                for k in 0..8 {
                    row.push((t * (1u64 << k) as f64).cos());
                }
                row
            })
            .collect();
        h = add_bias(&mm(&h, &p.in_w), &p.in_b);
        for b in &p.blocks {
            h = plus(&h, &attn(&ln(&h, &b.ln1_gain, &b.ln1_bias), &b.attn));
            let m = add_bias(&mm(&ln(&h, &b.ln2_gain, &b.ln2_bias), &b.mlp_w1), &b.mlp_b1);
            let m: Rows = m.iter().map(|r| r.iter().map(|z| z / (1.0 + (-z).exp())).collect()).collect();
            h = plus(&h, &add_bias(&mm(&m, &b.mlp_w2), &b.mlp_b2));
        }
        let out = add_bias(&mm(&ln(&h, &p.out_gain, &p.out_bias), &p.head_w), &p.head_b);
        let got = velocity_forward(&x, t, &c, &p).unwrap();
        for (g, o) in got.vectors.iter().zip(&out) {
            for ax in 0..3 {
                assert!((g[ax] - o[ax]).abs() < 1e-12, "{g:?} vs {o:?}");
            }
        }
        assert!(rows(&p.head_w).iter().flatten().any(|w| *w != 0.0));
    }
}
