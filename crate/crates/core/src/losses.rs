//! Geometric training losses and the soft silhouette renderer.
//!
//! Each term has a `*_grad` companion returning the gradient with respect
//! to the predicted points, which is how the terms join the autodiff tape.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DeformationField;
use crate::geom::{
    add3, axis_angle, cross3, dist2, dot3, mat_vec, norm3, scale3, sub3, CameraIntrinsics, KnnGraph, Mat3, PointCloud, PoseSE3,
    SilhouetteMask, Vec3, IDENTITY3,
};

pub const DEFAULT_SIGMA_PX: f64 = 1.5;
pub const DEFAULT_CUTOFF_SIGMAS: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub fm: f64,
    pub cd: f64,
    pub lap: f64,
    pub arap: f64,
    pub reg: f64,
    pub sil: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fm: 1.0, cd: 100.0, lap: 1.0, arap: 1.0, reg: 1.0, sil: 5.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.fm, self.cd, self.lap, self.arap, self.reg, self.sil];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm: f64,
    pub cd: f64,
    pub lap: f64,
    pub arap: f64,
    pub reg: f64,
    pub sil: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn from_terms(fm: f64, cd: f64, lap: f64, arap: f64, reg: f64, sil: f64, w: &LossWeights) -> Self {
        let total = w.fm * fm + w.cd * cd + w.lap * lap + w.arap * arap + w.reg * reg + w.sil * sil;
        Self { fm, cd, lap, arap, reg, sil, total }
    }

    /// `(name, value)` pairs in reporting order, total last.
    pub fn terms(&self) -> [(&'static str, f64); 7] {
        [("fm", self.fm), ("cd", self.cd), ("lap", self.lap), ("arap", self.arap), ("reg", self.reg), ("sil", self.sil), ("total", self.total)]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.fm += s * other.fm;
        self.cd += s * other.cd;
        self.lap += s * other.lap;
        self.arap += s * other.arap;
        self.reg += s * other.reg;
        self.sil += s * other.sil;
        self.total += s * other.total;
    }
}

fn non_empty(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyCloud)
    } else {
        Ok(())
    }
}

fn aligned(a: &PointCloud, b: &PointCloud) -> Result<()> {
    if a.len() == b.len() {
        Ok(())
    } else {
        Err(Error::Correspondence(a.len(), b.len()))
    }
}

/// Index and squared distance of the nearest point in `set`; ties keep
/// the lower index.
pub(crate) fn nearest(p: Vec3, set: &[Vec3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &q) in set.iter().enumerate() {
        let d = dist2(p, q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

pub fn chamfer_loss(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    Ok(chamfer_loss_grad(pred, gt)?.0)
}

/// Sum-form Chamfer and its gradient with respect to `pred`.
pub fn chamfer_loss_grad(pred: &PointCloud, gt: &PointCloud) -> Result<(f64, Vec<Vec3>)> {
    non_empty(pred, gt)?;
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut total = 0.0;
    for (i, &p) in pred.points.iter().enumerate() {
        let (j, d) = nearest(p, &gt.points);
        total += d;
        grad[i] = add3(grad[i], scale3(sub3(p, gt.points[j]), 2.0));
    }
    for &q in &gt.points {
        let (i, d) = nearest(q, &pred.points);
        total += d;
        grad[i] = add3(grad[i], scale3(sub3(pred.points[i], q), 2.0));
    }
    Ok((total, grad))
}

fn laplacian_coords(points: &[Vec3], graph: &KnnGraph, i: usize) -> Vec3 {
    let nb = &graph.neighbors[i];
    let mut c = [0.0; 3];
    for &j in nb {
        c = add3(c, points[j]);
    }
    sub3(points[i], scale3(c, 1.0 / nb.len() as f64))
}

fn check_graph(src: &PointCloud, graph: &KnnGraph) -> Result<()> {
    if graph.len() != src.len() {
        return Err(Error::Correspondence(src.len(), graph.len()));
    }
    Ok(())
}

pub fn laplacian_loss(pred: &PointCloud, src: &PointCloud, graph: &KnnGraph) -> Result<f64> {
    Ok(laplacian_loss_grad(pred, src, graph)?.0)
}

pub fn laplacian_loss_grad(pred: &PointCloud, src: &PointCloud, graph: &KnnGraph) -> Result<(f64, Vec<Vec3>)> {
    aligned(pred, src)?;
    check_graph(src, graph)?;
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut total = 0.0;
    for i in 0..pred.len() {
        let r = sub3(laplacian_coords(&pred.points, graph, i), laplacian_coords(&src.points, graph, i));
        total += dot3(r, r);
        grad[i] = add3(grad[i], scale3(r, 2.0));
        let share = scale3(r, -2.0 / graph.neighbors[i].len() as f64);
        for &j in &graph.neighbors[i] {
            grad[j] = add3(grad[j], share);
        }
    }
    Ok((total, grad))
}

fn to_na(m: &Mat3) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn from_na(m: &Matrix3<f64>) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

/// Smallest rotation taking unit `a` onto unit `b`.
fn minimal_rotation(a: Vec3, b: Vec3) -> Mat3 {
    let c = dot3(a, b);
    if c < -1.0 + 1e-12 {
        // half turn about an axis orthogonal to `a`
        let pick = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
            [1.0, 0.0, 0.0]
        } else if a[1].abs() <= a[2].abs() {
            [0.0, 1.0, 0.0]
        } else {
            [0.0, 0.0, 1.0]
        };
        let axis = cross3(a, pick);
        return axis_angle(scale3(axis, 1.0 / norm3(axis)), std::f64::consts::PI);
    }
    let w = cross3(a, b);
    let k = [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]];
    let k = to_na(&k);
    from_na(&(Matrix3::identity() + k + k * k / (1.0 + c)))
}

/// Proper rotation minimizing `Σ ‖dst − R·src‖²`.
pub fn kabsch_rotation(edges_src: &[Vec3], edges_dst: &[Vec3]) -> Mat3 {
    let mut h = Matrix3::<f64>::zeros();
    for (s, d) in edges_src.iter().zip(edges_dst) {
        for r in 0..3 {
            for c in 0..3 {
                h[(r, c)] += s[r] * d[c];
            }
        }
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let sv = svd.singular_values;
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]));
    let top = sv[order[0]];
    if top <= 1e-300 {
        return IDENTITY3;
    }
    if sv[order[1]] <= 1e-10 * top {
        let col = |m: &Matrix3<f64>, i: usize| [m[(0, i)], m[(1, i)], m[(2, i)]];
        let a = col(&u, order[0]);
        let b = col(&vt.transpose(), order[0]);
        return minimal_rotation(a, b);
    }
    let v = vt.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let mut diag = Matrix3::identity();
    diag[(order[2], order[2])] = d;
    from_na(&(v * diag * u.transpose()))
}

fn edges(points: &[Vec3], graph: &KnnGraph, i: usize) -> Vec<Vec3> {
    graph.neighbors[i].iter().map(|&j| sub3(points[i], points[j])).collect()
}

pub fn arap_loss(pred: &PointCloud, src: &PointCloud, graph: &KnnGraph) -> Result<f64> {
    Ok(arap_loss_grad(pred, src, graph)?.0)
}

/// Uniform-weight ARAP energy; the gradient holds each local rotation fixed.
pub fn arap_loss_grad(pred: &PointCloud, src: &PointCloud, graph: &KnnGraph) -> Result<(f64, Vec<Vec3>)> {
    aligned(pred, src)?;
    check_graph(src, graph)?;
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut total = 0.0;
    for i in 0..pred.len() {
        let es = edges(&src.points, graph, i);
        let ed = edges(&pred.points, graph, i);
        let rot = kabsch_rotation(&es, &ed);
        for (k, &j) in graph.neighbors[i].iter().enumerate() {
            let w = graph.weights[i][k];
            let r = sub3(ed[k], mat_vec(&rot, es[k]));
            total += w * dot3(r, r);
            let g = scale3(r, 2.0 * w);
            grad[i] = add3(grad[i], g);
            grad[j] = sub3(grad[j], g);
        }
    }
    Ok((total, grad))
}

/// `(1/N) Σ ‖d_i‖²`.
pub fn reg_loss(field: &DeformationField) -> f64 {
    if field.is_empty() {
        return 0.0;
    }
    field.vectors.iter().map(|d| dot3(*d, *d)).sum::<f64>() / field.len() as f64
}

pub fn reg_loss_grad(field: &DeformationField) -> Vec<Vec3> {
    let n = field.len() as f64;
    field.vectors.iter().map(|d| scale3(*d, 2.0 / n)).collect()
}

/// Gaussian splat width and truncation radius in units of `sigma_px`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatParams {
    pub sigma_px: f64,
    pub cutoff_sigmas: f64,
}

impl Default for SplatParams {
    fn default() -> Self {
        Self { sigma_px: DEFAULT_SIGMA_PX, cutoff_sigmas: DEFAULT_CUTOFF_SIGMAS }
    }
}

impl SplatParams {
    pub fn exact(sigma_px: f64) -> Self {
        Self { sigma_px, cutoff_sigmas: f64::INFINITY }
    }
}

/// Ground-truth mask and the camera it was observed from.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskView {
    pub mask: SilhouetteMask,
    pub pose: PoseSE3,
    pub intr: CameraIntrinsics,
}

struct Splat {
    u: f64,
    v: f64,
    cam: Vec3,
}

fn project_splats(points: &[Vec3], pose: &PoseSE3, intr: &CameraIntrinsics) -> Vec<Option<Splat>> {
    points
        .iter()
        .map(|&p| {
            let cam = pose.world_to_camera(p);
            (cam[2] > 0.0).then(|| Splat { u: intr.fx * cam[0] / cam[2] + intr.cx, v: intr.fy * cam[1] / cam[2] + intr.cy, cam })
        })
        .collect()
}

fn window(center: f64, radius: f64, size: usize) -> Option<(usize, usize)> {
    if size == 0 {
        return None;
    }
    if !radius.is_finite() {
        return Some((0, size - 1));
    }
    let lo = (center - radius).ceil().max(0.0);
    let hi = (center + radius).floor().min(size as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Per-pixel `Σ log(1 − g)` over non-saturating points and the count of
/// saturating ones.
struct Coverage {
    log_free: Vec<f64>,
    saturated: Vec<u32>,
}

impl Coverage {
    fn value(&self, idx: usize) -> f64 {
        if self.saturated[idx] > 0 {
            1.0
        } else {
            -self.log_free[idx].exp_m1()
        }
    }

    /// `Π_{j≠i} (1 − g_j)` at pixel `idx` given point i's `1 − g_i`.
    fn others(&self, idx: usize, free_i: f64) -> f64 {
        match (self.saturated[idx], free_i == 0.0) {
            (0, false) => (self.log_free[idx] - free_i.ln()).exp(),
            (1, true) => self.log_free[idx].exp(),
            _ => 0.0,
        }
    }
}

fn accumulate(splats: &[Option<Splat>], intr: &CameraIntrinsics, sp: &SplatParams) -> Coverage {
    let (h, w) = (intr.height, intr.width);
    let mut cov = Coverage { log_free: vec![0.0; h * w], saturated: vec![0; h * w] };
    let radius = sp.cutoff_sigmas * sp.sigma_px;
    let inv = 1.0 / (2.0 * sp.sigma_px * sp.sigma_px);
    for s in splats.iter().flatten() {
        let (Some((x0, x1)), Some((y0, y1))) = (window(s.u, radius, w), window(s.v, radius, h)) else { continue };
        for y in y0..=y1 {
            for x in x0..=x1 {
                let r2 = (s.u - x as f64).powi(2) + (s.v - y as f64).powi(2);
                let free = -(-r2 * inv).exp_m1();
                let idx = y * w + x;
                if free == 0.0 {
                    cov.saturated[idx] += 1;
                } else {
                    cov.log_free[idx] += free.ln();
                }
            }
        }
    }
    cov
}

fn check_splat(sp: &SplatParams) -> Result<()> {
    if sp.sigma_px.is_finite() && sp.sigma_px > 0.0 && sp.cutoff_sigmas > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid splat parameters {sp:?}")))
    }
}

/// Soft coverage `1 − Π(1 − exp(−r²/2σ²))` with the default truncation.
pub fn render_silhouette(cloud: &PointCloud, pose: &PoseSE3, intr: &CameraIntrinsics, sigma_px: f64) -> Result<SilhouetteMask> {
    render_silhouette_with(cloud, pose, intr, &SplatParams { sigma_px, ..SplatParams::default() })
}

pub fn render_silhouette_with(cloud: &PointCloud, pose: &PoseSE3, intr: &CameraIntrinsics, sp: &SplatParams) -> Result<SilhouetteMask> {
    check_splat(sp)?;
    let cov = accumulate(&project_splats(&cloud.points, pose, intr), intr, sp);
    let values = (0..intr.height * intr.width).map(|i| cov.value(i)).collect();
    Ok(SilhouetteMask { height: intr.height, width: intr.width, values })
}

pub fn silhouette_loss(pred: &PointCloud, gt_masks: &[MaskView], sigma_px: f64) -> Result<f64> {
    Ok(silhouette_loss_grad(pred, gt_masks, &SplatParams { sigma_px, ..SplatParams::default() })?.0)
}

/// `Σ_k mean_pixels (S_k − G_k)²` and its gradient with respect to `pred`.
pub fn silhouette_loss_grad(pred: &PointCloud, gt_masks: &[MaskView], sp: &SplatParams) -> Result<(f64, Vec<Vec3>)> {
    check_splat(sp)?;
    if gt_masks.is_empty() {
        return Err(Error::EmptyViewSet);
    }
    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut total = 0.0;
    let radius = sp.cutoff_sigmas * sp.sigma_px;
    let inv_var = 1.0 / (sp.sigma_px * sp.sigma_px);
    for view in gt_masks {
        let intr = &view.intr;
        let (h, w) = (intr.height, intr.width);
        if view.mask.height != h || view.mask.width != w {
            return Err(Error::Dimension(format!("mask {}x{} for a {h}x{w} camera", view.mask.height, view.mask.width)));
        }
        let splats = project_splats(&pred.points, &view.pose, intr);
        let cov = accumulate(&splats, intr, sp);
        let npix = (h * w) as f64;
        let mut d_value = vec![0.0; h * w];
        for (i, dv) in d_value.iter_mut().enumerate() {
            let r = cov.value(i) - view.mask.values[i];
            total += r * r / npix;
            *dv = 2.0 * r / npix;
        }
        for (pi, s) in splats.iter().enumerate() {
            let Some(s) = s else { continue };
            let (Some((x0, x1)), Some((y0, y1))) = (window(s.u, radius, w), window(s.v, radius, h)) else { continue };
            let (mut du, mut dv) = (0.0, 0.0);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let idx = y * w + x;
                    if d_value[idx] == 0.0 {
                        continue;
                    }
                    let (ex, ey) = (s.u - x as f64, s.v - y as f64);
                    let a = (ex * ex + ey * ey) * 0.5 * inv_var;
                    let g = (-a).exp();
                    let free = -(-a).exp_m1();
                    // d value / d g_i, then d g_i / d(u, v)
                    let c = d_value[idx] * cov.others(idx, free) * g * inv_var;
                    du -= c * ex;
                    dv -= c * ey;
                }
            }
            let [cx, cy, cz] = s.cam;
            let d_cam = [du * intr.fx / cz, dv * intr.fy / cz, -(du * intr.fx * cx + dv * intr.fy * cy) / (cz * cz)];
            grad[pi] = add3(grad[pi], mat_vec(&view.pose.rotation, d_cam));
        }
    }
    Ok((total, grad))
}

/// Everything the six terms need for one pair.
pub struct LossInputs<'a> {
    pub velocity: &'a DeformationField,
    pub target_velocity: &'a DeformationField,
    pub pred: &'a PointCloud,
    pub gt: &'a PointCloud,
    pub src: &'a PointCloud,
    pub graph: &'a KnnGraph,
    pub field: &'a DeformationField,
    pub masks: &'a [MaskView],
    pub splat: SplatParams,
}

pub fn fm_term(v: &DeformationField, u: &DeformationField) -> Result<f64> {
    if v.len() != u.len() {
        return Err(Error::Correspondence(v.len(), u.len()));
    }
    if v.is_empty() {
        return Ok(0.0);
    }
    Ok(v.vectors.iter().zip(&u.vectors).map(|(a, b)| dist2(*a, *b)).sum::<f64>() / v.len() as f64)
}

pub fn total_loss(inputs: &LossInputs<'_>, weights: &LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    let fm = fm_term(inputs.velocity, inputs.target_velocity)?;
    let cd = chamfer_loss(inputs.pred, inputs.gt)?;
    let lap = laplacian_loss(inputs.pred, inputs.src, inputs.graph)?;
    let arap = arap_loss(inputs.pred, inputs.src, inputs.graph)?;
    let reg = reg_loss(inputs.field);
    let sil = silhouette_loss_grad(inputs.pred, inputs.masks, &inputs.splat)?.0;
    Ok(LossBreakdown::from_terms(fm, cd, lap, arap, reg, sil, weights))
}

/// Weighted value and gradient of the five terms that depend on the
/// single-step prediction `src + field`, taken with respect to the field.
pub fn deformation_terms_grad(
    src: &PointCloud,
    gt: &PointCloud,
    graph: &KnnGraph,
    field: &DeformationField,
    masks: &[MaskView],
    splat: &SplatParams,
    w: &LossWeights,
) -> Result<(LossBreakdown, Vec<Vec3>)> {
    let pred = field.apply(src)?;
    let n = pred.len();
    let mut grad = vec![[0.0; 3]; n];
    let mut fold = |g: Vec<Vec3>, s: f64| {
        if s != 0.0 {
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc = add3(*acc, scale3(x, s));
            }
        }
    };
    let (cd, g) = chamfer_loss_grad(&pred, gt)?;
    fold(g, w.cd);
    let (lap, g) = laplacian_loss_grad(&pred, src, graph)?;
    fold(g, w.lap);
    let (arap, g) = arap_loss_grad(&pred, src, graph)?;
    fold(g, w.arap);
    let reg = reg_loss(field);
    fold(reg_loss_grad(field), w.reg);
    let (sil, g) = if masks.is_empty() || w.sil == 0.0 { (0.0, vec![[0.0; 3]; n]) } else { silhouette_loss_grad(&pred, masks, splat)? };
    fold(g, w.sil);
    Ok((LossBreakdown::from_terms(0.0, cd, lap, arap, reg, sil, w), grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{build_knn_graph, det3, mat_mul3, transpose3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new("c", points).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cloud((0..n).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect())
    }

    fn rz90() -> Mat3 {
        [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]
    }

    fn max_diff(a: &Mat3, b: &Mat3) -> f64 {
        (0..9).map(|i| (a[i / 3][i % 3] - b[i / 3][i % 3]).abs()).fold(0.0, f64::max)
    }

    /// Central differences of `f` at `x`, compared with `grad`.
    fn check_grad(x: &PointCloud, grad: &[Vec3], f: impl Fn(&PointCloud) -> f64, h: f64, tol: f64) {
        let mut worst: f64 = 0.0;
        let mut scale: f64 = 1e-8;
        for i in 0..x.len() {
            for ax in 0..3 {
                let mut p = x.clone();
                p.points[i][ax] += h;
                let up = f(&p);
                p.points[i][ax] -= 2.0 * h;
                let down = f(&p);
                let fd = (up - down) / (2.0 * h);
                worst = worst.max((fd - grad[i][ax]).abs());
                scale = scale.max(fd.abs()).max(grad[i][ax].abs());
            }
        }
        assert!(worst / scale <= tol, "gradient error {worst} relative to {scale}");
    }

    #[test]
    fn chamfer_examples() {
        let a = cloud(vec![[0.0; 3]]);
        let b = cloud(vec![[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer_loss(&a, &b).unwrap(), 2.0);
        let two = cloud(vec![[0.0; 3], [2.0, 0.0, 0.0]]);
        assert_eq!(chamfer_loss(&two, &b).unwrap(), 3.0);
        assert_eq!(chamfer_loss(&b, &two).unwrap(), 3.0);
        let empty = PointCloud { id: "e".into(), points: vec![] };
        assert!(matches!(chamfer_loss(&empty, &a), Err(Error::EmptyCloud)));
    }

    #[test]
    fn chamfer_gradient() {
        let p = random_cloud(5, 1);
        let g = random_cloud(6, 2);
        let (_, grad) = chamfer_loss_grad(&p, &g).unwrap();
        check_grad(&p, &grad, |x| chamfer_loss(x, &g).unwrap(), 1e-6, 1e-4);
    }

    #[test]
    fn laplacian_examples() {
        let src = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let graph = build_knn_graph(&src, 2).unwrap();
        assert_eq!(laplacian_loss(&src, &src, &graph).unwrap(), 0.0);
        let moved = src.translated([0.3, -1.0, 2.0]);
        assert!(laplacian_loss(&moved, &src, &graph).unwrap() < 1e-24);
        let h = 0.4;
        let mut bent = src.clone();
        bent.points[1][2] = h;
        // δ changes: (0,0,−h/2), (0,0,h), (0,0,−h/2)
        let expect = h * h / 4.0 + h * h + h * h / 4.0;
        assert!((laplacian_loss(&bent, &src, &graph).unwrap() - expect).abs() < 1e-15);
        let short = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]);
        assert!(matches!(laplacian_loss(&short, &src, &graph), Err(Error::Correspondence(2, 3))));
    }

    #[test]
    fn laplacian_gradient() {
        let src = random_cloud(6, 3);
        let graph = build_knn_graph(&src, 3).unwrap();
        let pred = random_cloud(6, 4);
        let (_, grad) = laplacian_loss_grad(&pred, &src, &graph).unwrap();
        check_grad(&pred, &grad, |x| laplacian_loss(x, &src, &graph).unwrap(), 1e-6, 1e-4);
    }

    #[test]
    fn kabsch_examples() {
        let src = vec![[1.0, 0.2, -0.3], [0.1, 0.9, 0.4], [-0.5, 0.3, 1.1]];
        assert!(max_diff(&kabsch_rotation(&src, &src), &IDENTITY3) < 1e-12);
        let dst: Vec<Vec3> = src.iter().map(|&e| mat_vec(&rz90(), e)).collect();
        assert!(max_diff(&kabsch_rotation(&src, &dst), &rz90()) < 1e-9);
        let single = [[0.3, -0.2, 0.5]];
        let parallel = [[0.6, -0.4, 1.0]];
        assert!(max_diff(&kabsch_rotation(&single, &parallel), &IDENTITY3) < 1e-12);
        assert_eq!(kabsch_rotation(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]), IDENTITY3);
    }

    #[test]
    fn kabsch_is_proper_under_reflection() {
        let src = vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.5, 0.5, 0.1]];
        let dst: Vec<Vec3> = src.iter().map(|e| [e[0], e[1], -e[2]]).collect();
        let r = kabsch_rotation(&src, &dst);
        assert!((det3(&r) - 1.0).abs() < 1e-12);
        assert!(max_diff(&mat_mul3(&r, &transpose3(&r)), &IDENTITY3) < 1e-12);
    }

    #[test]
    fn kabsch_rank_one_maps_direction() {
        let src = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]];
        let dst = [[0.0, 1.0, 0.0], [0.0, 2.0, 0.0]];
        let r = kabsch_rotation(&src, &dst);
        assert!(max_diff(&r, &rz90()) < 1e-12);
        let flipped = [[-1.0, 0.0, 0.0]];
        let r = kabsch_rotation(&[[1.0, 0.0, 0.0]], &flipped);
        let img = mat_vec(&r, [1.0, 0.0, 0.0]);
        assert!(sub3(img, flipped[0]).iter().all(|x| x.abs() < 1e-12));
        assert!((det3(&r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn arap_examples() {
        let src = random_cloud(12, 5);
        let graph = build_knn_graph(&src, 4).unwrap();
        assert!(arap_loss(&src, &src, &graph).unwrap() < 1e-24);
        let axis = [0.3, -0.5, 0.8];
        let rot = axis_angle(scale3(axis, 1.0 / norm3(axis)), 1.1);
        let rigid = cloud(src.points.iter().map(|&p| add3(mat_vec(&rot, p), [0.4, 1.0, -2.0])).collect());
        assert!(arap_loss(&rigid, &src, &graph).unwrap() < 1e-9);
        let doubled = cloud(src.points.iter().map(|&p| scale3(p, 2.0)).collect());
        let expect: f64 = (0..src.len()).flat_map(|i| edges(&src.points, &graph, i)).map(|e| dot3(e, e)).sum();
        assert!((arap_loss(&doubled, &src, &graph).unwrap() - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn arap_gradient() {
        let src = random_cloud(6, 6);
        let graph = build_knn_graph(&src, 3).unwrap();
        let pred = random_cloud(6, 7);
        let (_, grad) = arap_loss_grad(&pred, &src, &graph).unwrap();
        // rotations are re-solved inside `f`; at the optimum their first-order effect vanishes
        check_grad(&pred, &grad, |x| arap_loss(x, &src, &graph).unwrap(), 1e-6, 1e-4);
    }

    #[test]
    fn reg_examples() {
        assert_eq!(reg_loss(&DeformationField::zeros(4)), 0.0);
        assert_eq!(reg_loss(&DeformationField { vectors: vec![[0.0, 1.0, 0.0]; 5] }), 1.0);
        assert_eq!(reg_loss(&DeformationField { vectors: vec![[1.0, 2.0, 2.0]] }), 9.0);
    }

    fn camera() -> (PoseSE3, CameraIntrinsics) {
        (PoseSE3::IDENTITY, CameraIntrinsics::new(10.0, 10.0, 4.0, 4.0, 8, 8).unwrap())
    }

    #[test]
    fn silhouette_examples() {
        let (pose, intr) = camera();
        let behind = cloud(vec![[0.0, 0.0, -1.0]]);
        assert!(render_silhouette(&behind, &pose, &intr, 1.5).unwrap().values.iter().all(|&v| v == 0.0));
        let center = cloud(vec![[0.0, 0.0, 2.0]]);
        let m = render_silhouette(&center, &pose, &intr, 1.5).unwrap();
        assert_eq!(m.get(4, 4), 1.0);
        let g = (-1.0f64 / (2.0 * 1.5 * 1.5)).exp();
        assert!((m.get(5, 4) - g).abs() < 1e-15);
        let twice = cloud(vec![[0.05, 0.0, 2.0], [0.05, 0.0, 2.0]]);
        let once = cloud(vec![[0.05, 0.0, 2.0]]);
        let g1 = render_silhouette(&once, &pose, &intr, 1.5).unwrap().get(3, 4);
        let g2 = render_silhouette(&twice, &pose, &intr, 1.5).unwrap().get(3, 4);
        assert!((g2 - (1.0 - (1.0 - g1).powi(2))).abs() < 1e-14);
    }

    #[test]
    fn silhouette_loss_examples() {
        let (pose, intr) = camera();
        let pred = cloud(vec![[0.05, 0.1, 2.0], [-0.1, 0.0, 1.5]]);
        let own = render_silhouette(&pred, &pose, &intr, 1.5).unwrap();
        let view = |mask| MaskView { mask, pose, intr };
        assert_eq!(silhouette_loss(&pred, &[view(own)], 1.5).unwrap(), 0.0);
        let behind = cloud(vec![[0.0, 0.0, -1.0]]);
        assert_eq!(silhouette_loss(&behind, &[view(SilhouetteMask::zeros(8, 8))], 1.5).unwrap(), 0.0);
        let mut one = SilhouetteMask::zeros(8, 8);
        one.values[10] = 1.0;
        assert!((silhouette_loss(&behind, &[view(one)], 1.5).unwrap() - 1.0 / 64.0).abs() < 1e-15);
        let wrong = MaskView { mask: SilhouetteMask::zeros(4, 4), pose, intr };
        assert!(matches!(silhouette_loss(&pred, &[wrong], 1.5), Err(Error::Dimension(_))));
    }

    #[test]
    fn silhouette_gradient() {
        let (pose, intr) = camera();
        let pred = cloud(vec![[0.05, 0.1, 2.0], [-0.1, 0.01, 1.5], [0.12, -0.2, 2.5], [0.0, 0.0, 2.2]]);
        let gt = render_silhouette(&cloud(vec![[0.0, 0.05, 2.0], [-0.15, 0.1, 1.6]]), &pose, &intr, 1.5).unwrap();
        let other = PoseSE3::look_at([2.0, 0.0, 2.0], [0.0, 0.0, 2.0], [0.0, -1.0, 0.0]);
        let masks = vec![MaskView { mask: gt.clone(), pose, intr }, MaskView { mask: gt, pose: other, intr }];
        let sp = SplatParams::exact(1.5);
        let (_, grad) = silhouette_loss_grad(&pred, &masks, &sp).unwrap();
        check_grad(&pred, &grad, |x| silhouette_loss_grad(x, &masks, &sp).unwrap().0, 1e-6, 1e-4);
    }

    #[test]
    fn silhouette_monotone_in_points() {
        let (pose, intr) = camera();
        let mut pts = vec![[0.05, 0.1, 2.0]];
        let mut prev = render_silhouette(&cloud(pts.clone()), &pose, &intr, 1.5).unwrap();
        for extra in [[-0.1, 0.0, 1.5], [0.3, 0.3, 2.0], [0.05, 0.1, 2.0]] {
            pts.push(extra);
            let next = render_silhouette(&cloud(pts.clone()), &pose, &intr, 1.5).unwrap();
            assert!(next.values.iter().zip(&prev.values).all(|(a, b)| a >= b && *a <= 1.0));
            prev = next;
        }
    }

    #[test]
    fn total_loss_examples() {
        let src = random_cloud(8, 8);
        let graph = build_knn_graph(&src, 3).unwrap();
        let (pose, intr) = camera();
        let zero = DeformationField::zeros(8);
        let masks = vec![MaskView { mask: render_silhouette_with(&src, &pose, &intr, &SplatParams::default()).unwrap(), pose, intr }];
        let w = LossWeights::default();
        let inputs = LossInputs {
            velocity: &zero,
            target_velocity: &zero,
            pred: &src,
            gt: &src,
            src: &src,
            graph: &graph,
            field: &zero,
            masks: &masks,
            splat: SplatParams::default(),
        };
        assert!(total_loss(&inputs, &w).unwrap().total < 1e-20);

        let shift = DeformationField { vectors: vec![[0.0, 0.0, 1.0]; 8] };
        let moved = shift.apply(&src).unwrap();
        let far = PoseSE3::translation([0.0, 0.0, -4.0]);
        let own = vec![MaskView { mask: render_silhouette_with(&moved, &far, &intr, &SplatParams::default()).unwrap(), pose: far, intr }];
        let reg_only = LossInputs { pred: &moved, gt: &moved, field: &shift, masks: &own, ..inputs };
        let b = total_loss(&reg_only, &w).unwrap();
        assert!(b.lap < 1e-24 && b.arap < 1e-20 && b.cd == 0.0 && b.sil == 0.0 && b.fm == 0.0);
        assert!((b.reg - 1.0).abs() < 1e-15);
        assert!((b.total - b.reg).abs() < 1e-12);
    }

    #[test]
    fn total_is_weighted_sum() {
        let src = random_cloud(6, 9);
        let gt = random_cloud(6, 10);
        let graph = build_knn_graph(&src, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let field = DeformationField { vectors: (0..6).map(|_| [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), 0.1]).collect() };
        let u = DeformationField { vectors: (0..6).map(|_| [rng.random_range(-0.2..0.2), 0.0, 0.3]).collect() };
        let pred = field.apply(&src).unwrap();
        let (_, intr) = camera();
        let shifted = PoseSE3::translation([0.0, 0.0, -3.0]);
        let masks = vec![MaskView { mask: render_silhouette(&gt, &shifted, &intr, 1.5).unwrap(), pose: shifted, intr }];
        let w = LossWeights { fm: 0.5, cd: 3.0, lap: 2.0, arap: 0.7, reg: 1.3, sil: 4.0 };
        let inputs = LossInputs { velocity: &field, target_velocity: &u, pred: &pred, gt: &gt, src: &src, graph: &graph, field: &field, masks: &masks, splat: SplatParams::default() };
        let b = total_loss(&inputs, &w).unwrap();
        let by_hand = 0.5 * fm_term(&field, &u).unwrap()
            + 3.0 * chamfer_loss(&pred, &gt).unwrap()
            + 2.0 * laplacian_loss(&pred, &src, &graph).unwrap()
            + 0.7 * arap_loss(&pred, &src, &graph).unwrap()
            + 1.3 * reg_loss(&field)
            + 4.0 * silhouette_loss(&pred, &masks, 1.5).unwrap();
        assert!((b.total - by_hand).abs() < 1e-9);
        let (d, _) = deformation_terms_grad(&src, &gt, &graph, &field, &masks, &SplatParams::default(), &w).unwrap();
        assert!((d.total + 0.5 * b.fm - b.total).abs() < 1e-9);
    }
}
