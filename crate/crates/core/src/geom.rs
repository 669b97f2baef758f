//! Canonical geometric types and the pose, projection, visibility and
//! neighborhood primitives shared by the rest of the crate.
//!
//! Camera convention: poses are camera-to-world, the camera looks down its
//! local +z axis with x to the right and y down, and pixel `(x, y)` has its
//! center at integer coordinates `(x, y)`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

pub fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot3(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross3(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm3(a: Vec3) -> f64 {
    dot3(a, a).sqrt()
}

pub fn dist2(a: Vec3, b: Vec3) -> f64 {
    let d = sub3(a, b);
    dot3(d, d)
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot3(m[0], v), dot3(m[1], v), dot3(m[2], v)]
}

pub fn mat_t_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

pub fn mat_mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, x) in row.iter_mut().enumerate() {
            *x = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose3(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in m.iter().enumerate() {
        for (j, &x) in row.iter().enumerate() {
            out[j][i] = x;
        }
    }
    out
}

pub fn det3(m: &Mat3) -> f64 {
    dot3(m[0], cross3(m[1], m[2]))
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Rotation by `angle` radians about the unit `axis` (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm3(axis);
    let [x, y, z] = scale3(axis, 1.0 / n);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
        [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
        [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
    ]
}

/// Ordered point set. Index order carries dense correspondence and no
/// operation in this crate permutes it.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub id: String,
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite coordinate".into()));
        }
        Ok(Self { id: id.into(), points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        let s = self.points.iter().fold([0.0; 3], |acc, &p| add3(acc, p));
        scale3(s, 1.0 / self.len() as f64)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    pub fn translated(&self, offset: Vec3) -> PointCloud {
        PointCloud { id: self.id.clone(), points: self.points.iter().map(|&p| add3(p, offset)).collect() }
    }
}

/// Centers the bounding box at the origin and scales the longest axis to 1.
///
/// Returns `(normalized, scale, center)` with `original = normalized * scale + center`.
pub fn normalize_to_unit_cube(cloud: &PointCloud) -> Result<(PointCloud, f64, Vec3)> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if cloud.points.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGeometry("non-finite coordinate".into()));
    }
    let (lo, hi) = cloud.bounds();
    let center = scale3(add3(lo, hi), 0.5);
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let scale = if extent > 0.0 { extent } else { 1.0 };
    let points = cloud.points.iter().map(|&p| scale3(sub3(p, center), 1.0 / scale)).collect();
    Ok((PointCloud { id: cloud.id.clone(), points }, scale, center))
}

pub fn denormalize(cloud: &PointCloud, scale: f64, center: Vec3) -> PointCloud {
    PointCloud {
        id: cloud.id.clone(),
        points: cloud.points.iter().map(|&p| add3(scale3(p, scale), center)).collect(),
    }
}

/// Rigid camera-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl PoseSE3 {
    pub const IDENTITY: PoseSE3 = PoseSE3 { rotation: IDENTITY3, translation: [0.0; 3] };

    /// Checks orthonormality and `det = +1` to 1e-6.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let pose = PoseSE3 { rotation, translation };
        if !pose.is_valid(1e-6) {
            return Err(Error::InvalidGeometry("rotation is not a proper orthonormal matrix".into()));
        }
        Ok(pose)
    }

    pub fn translation(t: Vec3) -> Self {
        PoseSE3 { rotation: IDENTITY3, translation: t }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        if self.rotation.iter().flatten().chain(&self.translation).any(|x| !x.is_finite()) {
            return false;
        }
        let rrt = mat_mul3(&self.rotation, &transpose3(&self.rotation));
        let ortho = (0..3).all(|i| (0..3).all(|j| (rrt[i][j] - IDENTITY3[i][j]).abs() <= tol));
        ortho && (det3(&self.rotation) - 1.0).abs() <= tol
    }

    /// Camera at `eye` looking at `target`; `up` picks the roll.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let forward = scale3(sub3(target, eye), 1.0 / norm3(sub3(target, eye)));
        let mut right = cross3(forward, up);
        if norm3(right) < 1e-9 {
            // up is parallel to the viewing direction
            right = cross3(forward, [1.0, 0.0, 0.0]);
        }
        let right = scale3(right, 1.0 / norm3(right));
        let down = cross3(forward, right);
        // columns are the camera axes expressed in world coordinates
        let rotation = [
            [right[0], down[0], forward[0]],
            [right[1], down[1], forward[1]],
            [right[2], down[2], forward[2]],
        ];
        PoseSE3 { rotation, translation: eye }
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3 {
            rotation: mat_mul3(&self.rotation, &other.rotation),
            translation: add3(mat_vec(&self.rotation, other.translation), self.translation),
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = transpose3(&self.rotation);
        PoseSE3 { rotation: rt, translation: scale3(mat_vec(&rt, self.translation), -1.0) }
    }

    pub fn apply(&self, p: Vec3) -> Vec3 {
        add3(mat_vec(&self.rotation, p), self.translation)
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, sub3(p, self.translation))
    }

    pub fn to_matrix4(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_matrix4(m: &[[f64; 4]; 4]) -> Result<Self> {
        let bottom = [0.0, 0.0, 0.0, 1.0];
        if m[3].iter().zip(&bottom).any(|(a, b)| (a - b).abs() > 1e-9) {
            return Err(Error::InvalidGeometry("last row of pose matrix must be 0 0 0 1".into()));
        }
        let rotation = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        PoseSE3::new(rotation, [m[0][3], m[1][3], m[2][3]])
    }
}

/// `(primary)⁻¹ · aux`: the auxiliary camera expressed in the primary camera frame.
pub fn relative_pose(primary: &PoseSE3, aux: &PoseSE3) -> PoseSE3 {
    primary.inverse().compose(aux)
}

/// Rotation row-major, then translation.
pub fn flatten_pose(pose: &PoseSE3) -> [f64; 12] {
    let mut out = [0.0; 12];
    for i in 0..3 {
        for j in 0..3 {
            out[i * 3 + j] = pose.rotation[i][j];
        }
        out[9 + i] = pose.translation[i];
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, height: usize, width: usize) -> Result<Self> {
        let intr = CameraIntrinsics { fx, fy, cx, cy, height, width };
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidGeometry("focal lengths must be positive".into()));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(Error::InvalidGeometry("principal point outside the image".into()));
        }
        Ok(intr)
    }

    /// Square image with the principal point at the center pixel.
    pub fn square(size: usize, focal: f64) -> Self {
        let c = size as f64 / 2.0;
        CameraIntrinsics { fx: focal, fy: focal, cx: c, cy: c, height: size, width: size }
    }

    /// Nearest pixel `(col, row)` if the continuous coordinate falls inside the image.
    pub fn pixel_of(&self, u: f64, v: f64) -> Option<(usize, usize)> {
        let (x, y) = (u.round(), v.round());
        if x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64 {
            Some((x as usize, y as usize))
        } else {
            None
        }
    }
}

/// Pinhole projection `(u, v, depth)`. `depth <= 0` means behind the camera
/// and `u, v` are then meaningless.
pub fn project_point(p: Vec3, pose: &PoseSE3, intr: &CameraIntrinsics) -> (f64, f64, f64) {
    let c = pose.world_to_camera(p);
    let z = c[2];
    if z <= 0.0 {
        return (f64::NAN, f64::NAN, z);
    }
    (intr.fx * c[0] / z + intr.cx, intr.fy * c[1] / z + intr.cy, z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VisibilityMode {
    /// Z-buffer splatting; when more than `max_visible` survive, the nearest
    /// `max_visible` by depth are kept.
    ZBuffer,
    /// The `max_visible` nearest in-frame points by depth, no occlusion test.
    TopByDepth,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VisibilityParams {
    pub splat_radius_px: usize,
    pub depth_tolerance: f64,
    pub max_visible: Option<usize>,
    pub mode: VisibilityMode,
}

impl Default for VisibilityParams {
    fn default() -> Self {
        Self { splat_radius_px: 2, depth_tolerance: 0.01, max_visible: None, mode: VisibilityMode::ZBuffer }
    }
}

/// Per-point visibility mask.
///
/// Every in-frame point writes its depth into a square footprint of the
/// z-buffer; a point is visible iff its own pixel holds no depth closer than
/// its own by more than the tolerance.
pub fn compute_visibility(
    cloud: &PointCloud,
    pose: &PoseSE3,
    intr: &CameraIntrinsics,
    params: &VisibilityParams,
) -> Vec<bool> {
    let n = cloud.len();
    let projected: Vec<Option<(usize, usize, f64)>> = cloud
        .points
        .iter()
        .map(|&p| {
            let (u, v, z) = project_point(p, pose, intr);
            if z <= 0.0 {
                return None;
            }
            intr.pixel_of(u, v).map(|(x, y)| (x, y, z))
        })
        .collect();

    let mut visible = vec![false; n];
    match params.mode {
        VisibilityMode::TopByDepth => {
            for (i, p) in projected.iter().enumerate() {
                visible[i] = p.is_some();
            }
        }
        VisibilityMode::ZBuffer => {
            let (w, h) = (intr.width, intr.height);
            let r = params.splat_radius_px as isize;
            let mut zbuf = vec![f64::INFINITY; w * h];
            for &(x, y, z) in projected.iter().flatten() {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (px, py) = (x as isize + dx, y as isize + dy);
                        if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
                            continue;
                        }
                        let cell = &mut zbuf[py as usize * w + px as usize];
                        if z < *cell {
                            *cell = z;
                        }
                    }
                }
            }
            for (i, p) in projected.iter().enumerate() {
                if let Some((x, y, z)) = *p {
                    visible[i] = z - zbuf[y * w + x] <= params.depth_tolerance;
                }
            }
        }
    }

    if let Some(limit) = params.max_visible {
        let mut order: Vec<usize> = (0..n).filter(|&i| visible[i]).collect();
        if order.len() > limit {
            let depth = |i: usize| projected[i].map(|p| p.2).unwrap_or(f64::INFINITY);
            order.sort_by(|&a, &b| depth(a).total_cmp(&depth(b)).then(a.cmp(&b)));
            for &i in &order[limit..] {
                visible[i] = false;
            }
        }
    }
    visible
}

/// Exact k-nearest-neighbor graph with uniform edge weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<usize>>,
    pub weights: Vec<Vec<f64>>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

/// Brute-force Euclidean k-NN excluding self; ties go to the lower index.
pub fn build_knn_graph(cloud: &PointCloud, k: usize) -> Result<KnnGraph> {
    let n = cloud.len();
    if n <= k {
        return Err(Error::InsufficientPoints { have: n, need: k });
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (dist2(cloud.points[i], cloud.points[j]), j))
                .collect();
            let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if k < cand.len() {
                cand.select_nth_unstable_by(k, cmp);
                cand.truncate(k);
            }
            cand.sort_by(cmp);
            cand.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let weights = vec![vec![1.0; k]; n];
    Ok(KnnGraph { k, neighbors, weights })
}

/// H × W grid of coverage values in [0, 1], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SilhouetteMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SilhouetteMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, values: vec![0.0; height * width] }
    }

    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!("mask payload {} != {height}x{width}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::InvalidGeometry("mask values must lie in [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

const PCF_MAGIC: &[u8; 4] = b"PCF1";

pub fn write_pcf<W: Write>(mut w: W, points: &[Vec3]) -> Result<()> {
    w.write_all(PCF_MAGIC)?;
    w.write_all(&(points.len() as u32).to_le_bytes())?;
    for p in points {
        for &x in p {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_pcf<R: Read>(mut r: R) -> Result<Vec<Vec3>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 8 || &bytes[..4] != PCF_MAGIC {
        return Err(Error::Format("missing PCF1 magic".into()));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    if payload.len() != n * 12 {
        return Err(Error::Format(format!("PCF1 payload is {} bytes, header implies {}", payload.len(), n * 12)));
    }
    Ok(payload
        .chunks_exact(12)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes(c[o..o + 4].try_into().unwrap()) as f64;
            [f(0), f(4), f(8)]
        })
        .collect())
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut buf = Vec::new();
    write_pcf(&mut buf, &cloud.points)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    let points = read_pcf(std::fs::File::open(path)?)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    PointCloud::new(id, points)
}

/// 16 whitespace-separated numbers, row-major 4×4.
pub fn parse_pose(text: &str) -> Result<PoseSE3> {
    let nums: Vec<f64> = text
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| Error::Format(format!("bad pose entry `{t}`: {e}"))))
        .collect::<Result<_>>()?;
    if nums.len() != 16 {
        return Err(Error::Format(format!("pose file needs 16 numbers, found {}", nums.len())));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, x) in nums.into_iter().enumerate() {
        m[i / 4][i % 4] = x;
    }
    PoseSE3::from_matrix4(&m)
}

pub fn format_pose(pose: &PoseSE3) -> String {
    pose.to_matrix4()
        .iter()
        .map(|r| r.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        + "\n"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: Vec<Vec3>) -> PointCloud {
        PointCloud::new("t", points).unwrap()
    }

    #[test]
    fn normalize_cube_corners() {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push([x, y, z]);
                }
            }
        }
        let (out, scale, center) = normalize_to_unit_cube(&cloud(pts.clone())).unwrap();
        assert_eq!(scale, 2.0);
        assert_eq!(center, [0.0; 3]);
        for (o, p) in out.points.iter().zip(&pts) {
            assert_eq!(*o, scale3(*p, 0.5));
        }
    }

    #[test]
    fn normalize_single_point_and_segment() {
        let (out, scale, center) = normalize_to_unit_cube(&cloud(vec![[3.0, 3.0, 3.0]])).unwrap();
        assert_eq!((out.points[0], scale, center), ([0.0; 3], 1.0, [3.0; 3]));

        let (out, scale, center) = normalize_to_unit_cube(&cloud(vec![[0.0; 3], [4.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points, vec![[-0.5, 0.0, 0.0], [0.5, 0.0, 0.0]]);
        assert_eq!((scale, center), (4.0, [2.0, 0.0, 0.0]));
    }

    #[test]
    fn normalize_rejects_non_finite() {
        let bad = PointCloud { id: "x".into(), points: vec![[f64::NAN, 0.0, 0.0]] };
        assert!(matches!(normalize_to_unit_cube(&bad), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn projection_examples() {
        let intr = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let id = PoseSE3::IDENTITY;
        assert_eq!(project_point([0.0, 0.0, 1.0], &id, &intr), (64.0, 64.0, 1.0));
        let (u, v, z) = project_point([0.1, 0.0, 1.0], &id, &intr);
        assert!((u - 74.0).abs() < 1e-12 && v == 64.0 && z == 1.0);
        let (_, _, z) = project_point([0.0; 3], &id, &intr);
        assert!(z <= 0.0);
        let mask = compute_visibility(&cloud(vec![[0.0; 3]]), &id, &intr, &VisibilityParams::default());
        assert_eq!(mask, vec![false]);
    }

    #[test]
    fn visibility_occlusion_on_same_ray() {
        let intr = CameraIntrinsics::square(64, 60.0);
        let c = cloud(vec![[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]);
        let mask = compute_visibility(&c, &PoseSE3::IDENTITY, &intr, &VisibilityParams::default());
        assert_eq!(mask, vec![true, false]);
        let single = compute_visibility(&cloud(vec![[0.0, 0.0, 2.0]]), &PoseSE3::IDENTITY, &intr, &VisibilityParams::default());
        assert_eq!(single, vec![true]);
    }

    #[test]
    fn visibility_ring_with_hidden_point() {
        // ring of 8 points at depth 2 facing the camera, one extra point 0.5
        // behind the first ring point on the same ray
        let intr = CameraIntrinsics::square(64, 60.0);
        let mut pts: Vec<Vec3> = (0..8)
            .map(|k| {
                let a = k as f64 * std::f64::consts::FRAC_PI_4;
                [0.5 * a.cos(), 0.5 * a.sin(), 2.0]
            })
            .collect();
        pts.push(scale3(pts[0], 2.5 / 2.0));
        let mask = compute_visibility(&cloud(pts), &PoseSE3::IDENTITY, &intr, &VisibilityParams::default());
        assert!(mask[..8].iter().all(|&v| v));
        assert!(!mask[8]);
    }

    #[test]
    fn visibility_top_m_keeps_nearest() {
        let intr = CameraIntrinsics::square(64, 60.0);
        let c = cloud(vec![[0.3, 0.0, 3.0], [-0.3, 0.0, 1.5], [0.0, 0.3, 2.0]]);
        let params = VisibilityParams { max_visible: Some(2), ..Default::default() };
        assert_eq!(compute_visibility(&c, &PoseSE3::IDENTITY, &intr, &params), vec![false, true, true]);
        let params = VisibilityParams { max_visible: Some(1), mode: VisibilityMode::TopByDepth, ..Default::default() };
        assert_eq!(compute_visibility(&c, &PoseSE3::IDENTITY, &intr, &params), vec![false, true, false]);
    }

    #[test]
    fn knn_examples() {
        let g = build_knn_graph(&cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), 1).unwrap();
        assert_eq!(g.neighbors, vec![vec![1], vec![0], vec![1]]);
        let s = 3f64.sqrt() / 2.0;
        let tri = cloud(vec![[0.0; 3], [1.0, 0.0, 0.0], [0.5, s, 0.0]]);
        let mut g = build_knn_graph(&tri, 2).unwrap();
        g.neighbors.iter_mut().for_each(|n| n.sort());
        assert_eq!(g.neighbors, vec![vec![1, 2], vec![0, 2], vec![0, 1]]);
        assert!(matches!(
            build_knn_graph(&cloud(vec![[0.0; 3], [1.0, 0.0, 0.0]]), 2),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    #[test]
    fn relative_pose_examples() {
        let a = PoseSE3::translation([1.0, 0.0, 0.0]);
        let b = PoseSE3::translation([1.0, 0.0, 1.0]);
        assert_eq!(relative_pose(&a, &b), PoseSE3::translation([0.0, 0.0, 1.0]));
        assert_eq!(relative_pose(&PoseSE3::IDENTITY, &b), b);
        let r = relative_pose(&b, &b);
        assert!(flatten_pose(&r).iter().zip(flatten_pose(&PoseSE3::IDENTITY)).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_pose(&PoseSE3::IDENTITY), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(
            flatten_pose(&PoseSE3::translation([0.0, 0.0, 1.0])),
            [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
        let rz = PoseSE3::new(axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2), [0.0; 3]).unwrap();
        let expected = [0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        assert!(flatten_pose(&rz).iter().zip(expected).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn look_at_points_camera_at_target() {
        let pose = PoseSE3::look_at([0.0, -2.0, 1.0], [0.0; 3], [0.0, 0.0, 1.0]);
        assert!(pose.is_valid(1e-9));
        let c = pose.world_to_camera([0.0; 3]);
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12 && c[2] > 0.0);
    }

    #[test]
    fn pcf_rejects_bad_magic_and_truncation() {
        assert!(matches!(read_pcf(&b"XXXX\0\0\0\0"[..]), Err(Error::Format(_))));
        let mut buf = Vec::new();
        write_pcf(&mut buf, &[[1.0, 2.0, 3.0]]).unwrap();
        buf.pop();
        assert!(matches!(read_pcf(&buf[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pose_text_round_trip() {
        let pose = PoseSE3::look_at([1.0, 2.0, 3.0], [0.0; 3], [0.0, 0.0, 1.0]);
        let back = parse_pose(&format_pose(&pose)).unwrap();
        assert_eq!(back, pose);
        assert!(matches!(parse_pose("1 2 3"), Err(Error::Format(_))));
    }
}
