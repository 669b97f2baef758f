//! Per-view patch feature grids and their attachment to 3D points.

use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geom::{
    compute_visibility, project_point, CameraIntrinsics, PointCloud, PoseSE3, Vec3, VisibilityParams,
};
use crate::tape::Matrix;

/// Default channel count for real foundation features.
pub const FOUNDATION_FEATURE_DIM: usize = 768;

/// `H_p × W_p × D` grid, stored as an `(H_p · W_p) × D` matrix in
/// (row, col) order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchFeatureMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub grid: Matrix,
    pub pose: PoseSE3,
    pub intr: CameraIntrinsics,
    pub patch_size: usize,
}

impl PatchFeatureMap {
    pub fn new(grid_h: usize, grid_w: usize, grid: Matrix, pose: PoseSE3, intr: CameraIntrinsics, patch_size: usize) -> Result<Self> {
        if grid.rows() != grid_h * grid_w {
            return Err(Error::Dimension(format!("grid has {} rows, expected {grid_h}x{grid_w}", grid.rows())));
        }
        if grid_h * patch_size > intr.height || grid_w * patch_size > intr.width {
            return Err(Error::Dimension("patch grid exceeds the image".into()));
        }
        if !grid.is_finite() {
            return Err(Error::Format("non-finite feature".into()));
        }
        Ok(Self { grid_h, grid_w, grid, pose, intr, patch_size })
    }

    pub fn dim(&self) -> usize {
        self.grid.cols()
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        self.grid.row(row * self.grid_w + col)
    }

    pub fn scaled(&self, s: f64) -> PatchFeatureMap {
        PatchFeatureMap { grid: self.grid.scaled(s), ..self.clone() }
    }
}

/// Features of the visible subset of a cloud, tagged with their point indices.
#[derive(Clone, Debug, PartialEq)]
pub struct PointFeatureSet {
    pub features: Matrix,
    pub point_indices: Vec<usize>,
    /// Visible points skipped because they projected outside the frame.
    pub out_of_frame: usize,
}

impl PointFeatureSet {
    pub fn len(&self) -> usize {
        self.point_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.point_indices.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

const FMF_MAGIC: &[u8; 4] = b"FMF1";

pub fn encode_feature_map(map: &PatchFeatureMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 16 + 128 + 32 + 8 + map.grid.data().len() * 4);
    out.extend_from_slice(FMF_MAGIC);
    for v in [map.grid_h, map.grid_w, map.dim(), map.patch_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for row in map.pose.to_matrix4() {
        for x in row {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for x in [map.intr.fx, map.intr.fy, map.intr.cx, map.intr.cy] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(map.intr.height as u32).to_le_bytes());
    out.extend_from_slice(&(map.intr.width as u32).to_le_bytes());
    for &x in map.grid.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated FMF1 file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_feature_map(bytes: &[u8]) -> Result<PatchFeatureMap> {
    if bytes.len() < 4 || &bytes[..4] != FMF_MAGIC {
        return Err(Error::Format("missing FMF1 magic".into()));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let (gh, gw, d, patch) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let mut m = [[0.0; 4]; 4];
    for row in m.iter_mut() {
        for x in row.iter_mut() {
            *x = c.f64()?;
        }
    }
    let (fx, fy, cx, cy) = (c.f64()?, c.f64()?, c.f64()?, c.f64()?);
    let (h, w) = (c.u32()? as usize, c.u32()? as usize);
    let count = gh
        .checked_mul(gw)
        .and_then(|x| x.checked_mul(d))
        .ok_or_else(|| Error::Format("FMF1 dimensions overflow".into()))?;
    let payload = c.take(count.checked_mul(4).ok_or_else(|| Error::Format("FMF1 dimensions overflow".into()))?)?;
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after FMF1 payload", bytes.len() - c.pos)));
    }
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    let pose = PoseSE3::from_matrix4(&m).map_err(|e| Error::Format(format!("FMF1 pose: {e}")))?;
    let intr = CameraIntrinsics::new(fx, fy, cx, cy, h, w).map_err(|e| Error::Format(format!("FMF1 intrinsics: {e}")))?;
    PatchFeatureMap::new(gh, gw, Matrix::from_vec(gh * gw, d, data), pose, intr, patch)
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn load_feature_map(path: &Path) -> Result<PatchFeatureMap> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_feature_map(&bytes)
}

pub fn save_feature_map(path: &Path, map: &PatchFeatureMap) -> Result<()> {
    std::fs::write(path, encode_feature_map(map))?;
    Ok(())
}

/// Random Fourier encoding of world coordinates. The same seed always yields
/// the same encoding, so a surface point gets the same feature in every view.
#[derive(Clone, Debug)]
pub struct WorldEncoding {
    frequencies: Vec<Vec3>,
}

impl WorldEncoding {
    pub const FREQUENCY_SCALE: f64 = 3.0;

    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 || dim % 2 != 0 {
            return Err(Error::Config(format!("synthetic feature dim must be even and >= 8, got {dim}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, Self::FREQUENCY_SCALE).unwrap();
        let frequencies = (0..dim / 2).map(|_| [normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng)]).collect();
        Ok(Self { frequencies })
    }

    pub fn dim(&self) -> usize {
        self.frequencies.len() * 2
    }

    pub fn encode(&self, p: Vec3, out: &mut [f64]) {
        let half = self.frequencies.len();
        for (k, w) in self.frequencies.iter().enumerate() {
            let (s, c) = (w[0] * p[0] + w[1] * p[1] + w[2] * p[2]).sin_cos();
            out[k] = s;
            out[half + k] = c;
        }
    }
}

/// Deterministic stand-in for foundation features. Each patch carries a
/// Gaussian-weighted blend of the world encodings of nearby visible points,
/// centered on the patch with σ of half a patch and cut off at 1.5 patches.
/// The blend is normalized once the total weight reaches one and fades
/// linearly below that, so empty regions stay zero.
pub fn synthetic_feature_map(
    cloud: &PointCloud,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    dim: usize,
    patch_size: usize,
    seed: u64,
) -> Result<PatchFeatureMap> {
    let enc = WorldEncoding::new(dim, seed)?;
    synthetic_feature_map_with(cloud, pose, intr, &enc, patch_size)
}

pub fn synthetic_feature_map_with(
    cloud: &PointCloud,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    enc: &WorldEncoding,
    patch_size: usize,
) -> Result<PatchFeatureMap> {
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let (gh, gw) = (intr.height / patch_size, intr.width / patch_size);
    let visible = compute_visibility(cloud, pose, intr, &VisibilityParams::default());
    let p = patch_size as f64;
    let sigma = 0.5 * p;
    let reach = 1.5 * p;
    let mut grid = Matrix::zeros(gh * gw, enc.dim());
    let mut weight = vec![0.0; gh * gw];
    let mut code = vec![0.0; enc.dim()];
    for (i, &pt) in cloud.points.iter().enumerate() {
        if !visible[i] {
            continue;
        }
        let (u, v, _) = project_point(pt, pose, intr);
        enc.encode(pt, &mut code);
        let lo = |x: f64| ((x - reach - 0.5 * (p - 1.0)) / p).ceil().max(0.0) as usize;
        let hi = |x: f64, n: usize| (((x + reach - 0.5 * (p - 1.0)) / p).floor() as isize).min(n as isize - 1);
        let (c0, c1, r0, r1) = (lo(u), hi(u, gw), lo(v), hi(v, gh));
        for r in r0 as isize..=r1 {
            for c in c0 as isize..=c1 {
                let (cx, cy) = (c as f64 * p + 0.5 * (p - 1.0), r as f64 * p + 0.5 * (p - 1.0));
                let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                if d2 > reach * reach {
                    continue;
                }
                let w = (-d2 / (2.0 * sigma * sigma)).exp();
                let cell = r as usize * gw + c as usize;
                weight[cell] += w;
                for (g, x) in grid.row_mut(cell).iter_mut().zip(&code) {
                    *g += w * x;
                }
            }
        }
    }
    for (cell, &w) in weight.iter().enumerate() {
        if w > 1.0 {
            grid.row_mut(cell).iter_mut().for_each(|g| *g /= w);
        }
    }
    PatchFeatureMap::new(gh, gw, grid, *pose, *intr, patch_size)
}

/// Bilinear lookup at the projection of every visible point.
///
/// Patch `(r, c)` is centered at pixel `(c·P + (P−1)/2, r·P + (P−1)/2)`;
/// coordinates beyond the outermost centers clamp to the border.
pub fn sample_features_at(map: &PatchFeatureMap, cloud: &PointCloud, visibility: &[bool]) -> Result<PointFeatureSet> {
    if visibility.len() != cloud.len() {
        return Err(Error::Dimension(format!("visibility has {} entries for {} points", visibility.len(), cloud.len())));
    }
    let d = map.dim();
    let p = map.patch_size as f64;
    let mut rows = Vec::new();
    let mut point_indices = Vec::new();
    let mut out_of_frame = 0;
    for (i, &pt) in cloud.points.iter().enumerate() {
        if !visibility[i] {
            continue;
        }
        let (u, v, z) = project_point(pt, &map.pose, &map.intr);
        if z <= 0.0 || map.intr.pixel_of(u, v).is_none() {
            out_of_frame += 1;
            continue;
        }
        let gx = ((u - (p - 1.0) / 2.0) / p).clamp(0.0, (map.grid_w - 1) as f64);
        let gy = ((v - (p - 1.0) / 2.0) / p).clamp(0.0, (map.grid_h - 1) as f64);
        let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(map.grid_w - 1), (y0 + 1).min(map.grid_h - 1));
        let (tx, ty) = (gx - x0 as f64, gy - y0 as f64);
        let mut f = vec![0.0; d];
        for (r, c, w) in [
            (y0, x0, (1.0 - tx) * (1.0 - ty)),
            (y0, x1, tx * (1.0 - ty)),
            (y1, x0, (1.0 - tx) * ty),
            (y1, x1, tx * ty),
        ] {
            if w == 0.0 {
                continue;
            }
            for (o, x) in f.iter_mut().zip(map.feature(r, c)) {
                *o += w * x;
            }
        }
        rows.push(f);
        point_indices.push(i);
    }
    let features = if rows.is_empty() { Matrix::zeros(0, d) } else { Matrix::from_rows(&rows) };
    Ok(PointFeatureSet { features, point_indices, out_of_frame })
}

/// Mean over patches with any non-zero channel; zero vector for an empty map.
pub fn mean_pooled(map: &PatchFeatureMap) -> Vec<f64> {
    let mut acc = vec![0.0; map.dim()];
    let mut count = 0usize;
    for r in 0..map.grid.rows() {
        let row = map.grid.row(r);
        if row.iter().all(|&x| x == 0.0) {
            continue;
        }
        count += 1;
        for (a, x) in acc.iter_mut().zip(row) {
            *a += x;
        }
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    acc
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Cosine similarity of the mean-pooled feature vectors.
pub fn image_similarity(a: &PatchFeatureMap, b: &PatchFeatureMap) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    Ok(cosine(&mean_pooled(a), &mean_pooled(b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat_map(values: &[&[f64]], gh: usize, gw: usize, patch: usize) -> PatchFeatureMap {
        let intr = CameraIntrinsics::square(gh.max(gw) * patch, 50.0);
        PatchFeatureMap::new(gh, gw, Matrix::from_rows(values), PoseSE3::IDENTITY, intr, patch).unwrap()
    }

    #[test]
    fn fmf_round_trip_and_errors() {
        let map = flat_map(&[&[1.0, 2.0, 3.0, 4.0], &[0.5, 0.25, -1.0, 8.0], &[0.0; 4], &[1e-3, 2e3, 7.0, -3.5]], 2, 2, 4);
        let bytes = encode_feature_map(&map);
        let back = decode_feature_map(&bytes).unwrap();
        assert_eq!((back.grid_h, back.grid_w, back.dim()), (2, 2, 4));
        assert_eq!(encode_feature_map(&back), bytes);

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_feature_map(&bad), Err(Error::Format(_))));
        assert!(matches!(decode_feature_map(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn fmf_header_larger_than_payload() {
        let map = flat_map(&[&[1.0; 4], &[1.0; 4], &[1.0; 4], &[1.0; 4]], 2, 2, 4);
        let mut bytes = encode_feature_map(&map);
        // claim 4x4x768 while the payload holds 2x2x4
        bytes[4..8].copy_from_slice(&4u32.to_le_bytes());
        bytes[8..12].copy_from_slice(&4u32.to_le_bytes());
        bytes[12..16].copy_from_slice(&768u32.to_le_bytes());
        let err = decode_feature_map(&bytes).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn bilinear_at_center_and_midpoint() {
        // 1x2 grid, patch 4: centers at pixel x = 1.5 and 5.5, y = 1.5
        let intr = CameraIntrinsics::new(10.0, 10.0, 1.5, 1.5, 8, 8).unwrap();
        let grid = Matrix::from_rows(&[[1.0, 10.0], [3.0, 30.0]]);
        let map = PatchFeatureMap::new(1, 2, grid, PoseSE3::IDENTITY, intr, 4).unwrap();
        // u = 10·x/z + 1.5
        let cloud = PointCloud::new("c", vec![[0.0, 0.0, 1.0], [0.4, 0.0, 1.0], [0.2, 0.0, 1.0]]).unwrap();
        let set = sample_features_at(&map, &cloud, &[true, true, true]).unwrap();
        assert_eq!(set.features.row(0), &[1.0, 10.0]);
        assert_eq!(set.features.row(1), &[3.0, 30.0]);
        assert!((set.features.get(2, 0) - 2.0).abs() < 1e-12);
        assert!((set.features.get(2, 1) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn bilinear_matches_scalar_oracle() {
        let intr = CameraIntrinsics::new(20.0, 20.0, 3.5, 3.5, 8, 8).unwrap();
        let vals = [[1.0, -2.0], [4.0, 0.5], [2.5, 7.0], [-1.0, 3.0]];
        let grid = Matrix::from_rows(&vals);
        let map = PatchFeatureMap::new(2, 2, grid, PoseSE3::IDENTITY, intr, 4).unwrap();
        // u = 20·0.05 + 3.5 = 4.5, v = 20·(-0.03) + 3.5 = 2.9
        let cloud = PointCloud::new("c", vec![[0.05, -0.03, 1.0]]).unwrap();
        let set = sample_features_at(&map, &cloud, &[true]).unwrap();
        // centers at 1.5 and 5.5, so gx = (4.5 - 1.5)/4 = 0.75, gy = (2.9 - 1.5)/4 = 0.35
        let (tx, ty) = (0.75, 0.35);
        for ch in 0..2 {
            let top = vals[0][ch] * (1.0 - tx) + vals[1][ch] * tx;
            let bot = vals[2][ch] * (1.0 - tx) + vals[3][ch] * tx;
            let expected = top * (1.0 - ty) + bot * ty;
            assert!((set.features.get(0, ch) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_frame_visible_points_are_counted() {
        let intr = CameraIntrinsics::square(8, 10.0);
        let map = PatchFeatureMap::new(2, 2, Matrix::filled(4, 2, 1.0), PoseSE3::IDENTITY, intr, 4).unwrap();
        let cloud = PointCloud::new("c", vec![[0.0, 0.0, 1.0], [5.0, 0.0, 1.0], [0.0, 0.0, -1.0]]).unwrap();
        let set = sample_features_at(&map, &cloud, &[true, true, true]).unwrap();
        assert_eq!(set.point_indices, vec![0]);
        assert_eq!(set.out_of_frame, 2);
    }

    #[test]
    fn similarity_examples() {
        let a = flat_map(&[&[1.0, 2.0], &[0.0, 0.0], &[3.0, -1.0], &[0.5, 0.5]], 2, 2, 4);
        assert!((image_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((image_similarity(&a, &a.scaled(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(image_similarity(&a, &a.scaled(0.0)).unwrap(), 0.0);
        let b = flat_map(&[&[1.0, 2.0, 3.0], &[0.0; 3], &[0.0; 3], &[0.0; 3]], 2, 2, 4);
        assert!(matches!(image_similarity(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn synthetic_map_determinism_and_empty_view() {
        let cloud = PointCloud::new("c", vec![[0.0, 0.0, 0.0], [0.1, 0.2, 0.0], [-0.2, 0.1, 0.1]]).unwrap();
        let intr = CameraIntrinsics::square(32, 30.0);
        let pose = PoseSE3::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, -1.0, 0.0]);
        let a = synthetic_feature_map(&cloud, &pose, &intr, 16, 8, 3).unwrap();
        let b = synthetic_feature_map(&cloud, &pose, &intr, 16, 8, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.grid.data().iter().any(|&x| x != 0.0));
        let behind = PoseSE3::look_at([0.0, 0.0, -2.0], [0.0, 0.0, -4.0], [0.0, -1.0, 0.0]);
        let empty = synthetic_feature_map(&cloud, &behind, &intr, 16, 8, 3).unwrap();
        assert!(empty.grid.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn synthetic_point_consistent_across_views() {
        let cloud = PointCloud::new("c", vec![[0.05, -0.02, 0.03]]).unwrap();
        let intr = CameraIntrinsics::square(32, 30.0);
        let v1 = PoseSE3::look_at([0.0, -2.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0]);
        let v2 = PoseSE3::look_at([1.5, 1.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]);
        let vis = [true];
        let m1 = synthetic_feature_map(&cloud, &v1, &intr, 32, 4, 9).unwrap();
        let m2 = synthetic_feature_map(&cloud, &v2, &intr, 32, 4, 9).unwrap();
        let f1 = sample_features_at(&m1, &cloud, &vis).unwrap();
        let f2 = sample_features_at(&m2, &cloud, &vis).unwrap();
        // the nearest patch center sees the point; bilinear neighbors may be
        // empty, so compare the patch the point falls into directly
        let cell = |m: &PatchFeatureMap, pose: &PoseSE3| {
            let (u, v, _) = project_point(cloud.points[0], pose, &intr);
            let (x, y) = intr.pixel_of(u, v).unwrap();
            m.feature(y / 4, x / 4).to_vec()
        };
        assert!(cosine(&cell(&m1, &v1), &cell(&m2, &v2)) >= 0.99);
        assert_eq!(f1.len(), 1);
        assert_eq!(f2.len(), 1);
    }
}
