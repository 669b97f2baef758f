//! Evaluation tables, file-based inference, contact transfer and
//! depth-shaded renders.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, SyntheticPair};
use crate::error::{Error, Result};
use crate::features::load_feature_map;
use crate::flow::DeformationField;
use crate::geom::{load_cloud, write_pcf, CameraIntrinsics, PointCloud, PoseSE3, Vec3};
use crate::losses::render_silhouette_with;
use crate::metrics::{metric_cd, metric_emd_detailed, metric_siou, DEFAULT_SIOU_THRESHOLD, EXACT_EMD_LIMIT};
use crate::model::{predict, prepare_inputs, prepare_pair};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub pair_id: String,
    pub cd: f64,
    pub emd: f64,
    pub siou: f64,
    pub emd_approximate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn mean(&self) -> (f64, f64, f64) {
        let n = self.rows.len().max(1) as f64;
        let mut acc = (0.0, 0.0, 0.0);
        for r in &self.rows {
            acc.0 += r.cd;
            acc.1 += r.emd;
            acc.2 += r.siou;
        }
        (acc.0 / n, acc.1 / n, acc.2 / n)
    }

    /// Header line, one tab-separated row per pair, then the means. Rows
    /// whose EMD came from the approximate solver carry a trailing `~`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# pair_id\tcd\temd\tsiou\n");
        for r in &self.rows {
            let flag = if r.emd_approximate { "~" } else { "" };
            let _ = writeln!(s, "{}\t{}\t{}{flag}\t{}", r.pair_id, r.cd, r.emd, r.siou);
        }
        let (cd, emd, siou) = self.mean();
        let _ = writeln!(s, "# mean\t{cd}\t{emd}\t{siou}");
        s
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(Error::Format(format!("table row needs 4 fields: `{line}`")));
            }
            let num = |s: &str| s.trim_end_matches('~').parse::<f64>().map_err(|e| Error::Format(format!("bad number `{s}`: {e}")));
            rows.push(EvalRow { pair_id: f[0].into(), cd: num(f[1])?, emd: num(f[2])?, siou: num(f[3])?, emd_approximate: f[2].ends_with('~') });
        }
        Ok(Self { rows })
    }
}

fn score(pair: &SyntheticPair, deformed: &PointCloud, sigma_px: f64) -> Result<EvalRow> {
    let emd = metric_emd_detailed(deformed, &pair.target, EXACT_EMD_LIMIT)?;
    let view = pair.target_mask();
    let splat = crate::losses::SplatParams { sigma_px, ..Default::default() };
    let mask = render_silhouette_with(deformed, &view.pose, &view.intr, &splat)?;
    Ok(EvalRow {
        pair_id: pair.id.clone(),
        cd: metric_cd(deformed, &pair.target)?,
        emd: emd.value,
        siou: metric_siou(&mask, &view.mask, DEFAULT_SIOU_THRESHOLD)?,
        emd_approximate: emd.approximate,
    })
}

/// Single-step deformation of every pair scored against its target; the
/// S-IoU is taken from the target's observation camera.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<EvalTable> {
    let cfg = &checkpoint.config;
    checkpoint.check_layout()?;
    let params = checkpoint.params();
    let rows = dataset
        .pairs
        .par_iter()
        .map(|pair| {
            let x = prepare_pair(cfg, pair)?;
            let field = predict(&params, cfg, &x)?;
            score(pair, &field.apply(&pair.template)?, dataset.spec.sigma_px)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalTable { rows })
}

/// Scores of the undeformed templates.
pub fn evaluate_identity(dataset: &Dataset) -> Result<EvalTable> {
    let rows = dataset.pairs.par_iter().map(|p| score(p, &p.template, dataset.spec.sigma_px)).collect::<Result<Vec<_>>>()?;
    Ok(EvalTable { rows })
}

fn to_f32_points(points: &[Vec3]) -> Vec<[f32; 3]> {
    points.iter().map(|p| p.map(|x| x as f32)).collect()
}

fn widen(points: &[[f32; 3]]) -> Vec<Vec3> {
    points.iter().map(|p| p.map(|x| x as f64)).collect()
}

/// Deforms the template through the checkpoint and writes `deformed.pcf`
/// and `field.pcf` into `out_dir`. Both are rounded to `f32` with the
/// deformed cloud computed as `template + field` in `f32`, so the two files
/// reconstruct each other exactly.
pub fn infer(checkpoint: &Checkpoint, template: &Path, views: &[&Path], target_feat: &Path, out_dir: &Path) -> Result<(PointCloud, DeformationField)> {
    checkpoint.check_layout()?;
    let cfg = &checkpoint.config;
    let template = load_cloud(template)?;
    let views = views.iter().map(|p| load_feature_map(p)).collect::<Result<Vec<_>>>()?;
    let target_view = load_feature_map(target_feat)?;
    let x = prepare_inputs(cfg, &template, &views, &target_view)?;
    let field = predict(&checkpoint.params(), cfg, &x)?;
    let d32 = to_f32_points(&field.vectors);
    let t32 = to_f32_points(&template.points);
    let p32: Vec<[f32; 3]> = t32.iter().zip(&d32).map(|(t, d)| [t[0] + d[0], t[1] + d[1], t[2] + d[2]]).collect();
    let deformed = PointCloud { id: "deformed".into(), points: widen(&p32) };
    let field = DeformationField { vectors: widen(&d32) };
    fs::create_dir_all(out_dir)?;
    write_pcf(fs::File::create(out_dir.join("deformed.pcf"))?, &deformed.points)?;
    write_pcf(fs::File::create(out_dir.join("field.pcf"))?, &field.vectors)?;
    Ok((deformed, field))
}

/// Index-attached scalars in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactField {
    pub values: Vec<f64>,
}

impl ContactField {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidGeometry("contact values must lie in [0, 1]".into()));
        }
        Ok(Self { values })
    }

    /// One value per line; blank lines are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let values = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|e| Error::Format(format!("bad contact value `{l}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::new(values)
    }

    pub fn format(&self) -> String {
        self.values.iter().map(|v| format!("{v}\n")).collect()
    }
}

/// Moves the template by the field; contact values stay with their index.
pub fn transfer_contact_map(field: &DeformationField, template: &PointCloud, contact: &ContactField) -> Result<(PointCloud, ContactField)> {
    if contact.values.len() != template.len() {
        return Err(Error::Correspondence(template.len(), contact.values.len()));
    }
    Ok((field.apply(template)?, contact.clone()))
}

const RENDER_SIGMA_PX: f64 = 1.0;

/// 8-bit depth-shaded splat image: each pixel takes the maximum over points
/// of Gaussian weight times a shade that is 1 at the nearest point and 0.3
/// at the farthest.
pub fn render_image(cloud: &PointCloud, pose: &PoseSE3, intr: &CameraIntrinsics) -> Vec<u8> {
    let (h, w) = (intr.height, intr.width);
    let projected: Vec<(f64, f64, f64)> = cloud
        .points
        .iter()
        .filter_map(|&p| {
            let c = pose.world_to_camera(p);
            (c[2] > 0.0).then(|| (intr.fx * c[0] / c[2] + intr.cx, intr.fy * c[1] / c[2] + intr.cy, c[2]))
        })
        .collect();
    let mut img = vec![0.0f64; h * w];
    if !projected.is_empty() {
        let zmin = projected.iter().map(|p| p.2).fold(f64::INFINITY, f64::min);
        let zmax = projected.iter().map(|p| p.2).fold(f64::NEG_INFINITY, f64::max);
        let radius = 4.0 * RENDER_SIGMA_PX;
        for &(u, v, z) in &projected {
            let shade = if zmax > zmin { 0.3 + 0.7 * (zmax - z) / (zmax - zmin) } else { 1.0 };
            let (x0, x1) = ((u - radius).ceil().max(0.0), (u + radius).floor().min(w as f64 - 1.0));
            let (y0, y1) = ((v - radius).ceil().max(0.0), (v + radius).floor().min(h as f64 - 1.0));
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for y in y0 as usize..=y1 as usize {
                for x in x0 as usize..=x1 as usize {
                    let r2 = (u - x as f64).powi(2) + (v - y as f64).powi(2);
                    let val = shade * (-r2 / (2.0 * RENDER_SIGMA_PX * RENDER_SIGMA_PX)).exp();
                    let px = &mut img[y * w + x];
                    *px = px.max(val);
                }
            }
        }
    }
    img.iter().map(|v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn render_cloud(cloud: &PointCloud, pose: &PoseSE3, intr: &CameraIntrinsics, out: &Path) -> Result<()> {
    let img = render_image(cloud, pose, intr);
    fs::write(out, encode_pgm(intr.width, intr.height, &img))?;
    Ok(())
}
