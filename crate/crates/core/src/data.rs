//! Synthetic superquadric pairs and their on-disk dataset layout.
//!
//! The template is a unit sphere sampled at fixed `(η, ω)` parameter
//! points; each target is a superquadric evaluated at the same parameters,
//! so point `i` of the target corresponds to point `i` of the template.
//! Both clouds are normalized to the unit cube independently.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::features::{load_feature_map, save_feature_map, synthetic_feature_map_with, PatchFeatureMap, WorldEncoding};
use crate::flow::{target_velocity, DeformationField};
use crate::geom::{load_cloud, normalize_to_unit_cube, save_cloud, CameraIntrinsics, PointCloud, PoseSE3, Vec3};
use crate::losses::{render_silhouette_with, MaskView, SplatParams, DEFAULT_SIGMA_PX};

const MANIFEST: &str = "manifest.json";
const WORLD_UP: Vec3 = [0.0, 0.0, 1.0];

/// Generation settings; stored verbatim as the dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub family: String,
    pub count: usize,
    pub seed: u64,
    pub template_seed: u64,
    pub feature_seed: u64,
    pub num_points: usize,
    pub num_views: usize,
    pub feature_dim: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub focal: f64,
    pub camera_distance: f64,
    pub ring_elevation_deg: f64,
    pub target_elevation_deg: [f64; 2],
    pub scale_range: [f64; 2],
    pub exponent_range: [f64; 2],
    pub sigma_px: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            family: "superquadric".into(),
            count: 64,
            seed: 0,
            template_seed: 0,
            feature_seed: 0,
            num_points: 256,
            num_views: 4,
            feature_dim: 32,
            image_size: 64,
            patch_size: 8,
            focal: 60.0,
            camera_distance: 2.2,
            ring_elevation_deg: 30.0,
            target_elevation_deg: [10.0, 75.0],
            scale_range: [0.6, 1.4],
            exponent_range: [0.6, 1.0],
            sigma_px: DEFAULT_SIGMA_PX,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.family != "superquadric" {
            return Err(Error::Config(format!("unknown shape family `{}`", self.family)));
        }
        if self.num_points == 0 || self.num_views == 0 || self.image_size == 0 || self.patch_size == 0 {
            return Err(Error::Config("point, view, image and patch counts must be positive".into()));
        }
        let ranges = [self.scale_range, self.exponent_range, self.target_elevation_deg];
        if ranges.iter().any(|r| !(r[0] <= r[1]) || !(r[0] > 0.0)) || self.target_elevation_deg[1] >= 90.0 {
            return Err(Error::Config("ranges must be positive and ordered; elevations below 90°".into()));
        }
        if !(self.focal > 0.0 && self.camera_distance > 0.0 && self.sigma_px > 0.0) {
            return Err(Error::Config("focal, camera distance and sigma must be positive".into()));
        }
        Ok(())
    }

    /// Defaults with the point, view, feature and camera settings of `cfg`.
    pub fn matching(cfg: &TrainConfig) -> Self {
        Self {
            num_points: cfg.num_points,
            num_views: cfg.num_views,
            feature_dim: cfg.feature_dim,
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            focal: cfg.focal,
            camera_distance: cfg.camera_distance,
            sigma_px: cfg.sigma_px,
            ..Self::default()
        }
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        CameraIntrinsics::square(self.image_size, self.focal)
    }

    pub fn splat(&self) -> SplatParams {
        SplatParams { sigma_px: self.sigma_px, ..SplatParams::default() }
    }
}

/// Axis scales and the two superquadric exponents (1, 1 is an ellipsoid).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    pub scales: Vec3,
    pub exponents: [f64; 2],
}

impl ShapeParams {
    pub const SPHERE: ShapeParams = ShapeParams { scales: [1.0; 3], exponents: [1.0; 2] };
}

fn signed_pow(x: f64, e: f64) -> f64 {
    x.signum() * x.abs().powf(e)
}

/// Superquadric surface at latitude `eta` and longitude `omega`.
pub fn superquadric_point(eta: f64, omega: f64, s: &ShapeParams) -> Vec3 {
    let [e1, e2] = s.exponents;
    let ce = signed_pow(eta.cos(), e1);
    [
        s.scales[0] * ce * signed_pow(omega.cos(), e2),
        s.scales[1] * ce * signed_pow(omega.sin(), e2),
        s.scales[2] * signed_pow(eta.sin(), e1),
    ]
}

/// `(η, ω)` pairs uniform over the sphere's area.
pub fn sample_parameters(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random_range(-1.0f64..1.0).asin(), rng.random_range(-PI..PI))).collect()
}

/// Rounds through `f32` so a cloud equals its file representation.
fn quantize(points: Vec<Vec3>) -> Vec<Vec3> {
    points.into_iter().map(|p| p.map(|x| x as f32 as f64)).collect()
}

pub fn superquadric_cloud(id: &str, params: &[(f64, f64)], shape: &ShapeParams) -> Result<PointCloud> {
    let raw = PointCloud::new(id, params.iter().map(|&(e, o)| superquadric_point(e, o, shape)).collect())?;
    let (norm, _, _) = normalize_to_unit_cube(&raw)?;
    Ok(PointCloud { id: id.into(), points: quantize(norm.points) })
}

fn orbit_pose(distance: f64, elevation: f64, azimuth: f64) -> PoseSE3 {
    let eye = [distance * elevation.cos() * azimuth.cos(), distance * elevation.cos() * azimuth.sin(), distance * elevation.sin()];
    PoseSE3::look_at(eye, [0.0; 3], WORLD_UP)
}

/// `K` cameras evenly spaced in azimuth at a fixed elevation.
pub fn ring_poses(spec: &GenSpec) -> Vec<PoseSE3> {
    let elev = spec.ring_elevation_deg.to_radians();
    (0..spec.num_views).map(|k| orbit_pose(spec.camera_distance, elev, 2.0 * PI * k as f64 / spec.num_views as f64)).collect()
}

/// Camera direction uniform over the hemisphere band between the two
/// elevation limits.
pub fn random_hemisphere_pose(spec: &GenSpec, rng: &mut impl Rng) -> PoseSE3 {
    let [lo, hi] = spec.target_elevation_deg.map(|d| d.to_radians().sin());
    let elev = rng.random_range(lo..=hi).asin();
    let azim = rng.random_range(-PI..PI);
    orbit_pose(spec.camera_distance, elev, azim)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPair {
    pub id: String,
    pub template: PointCloud,
    pub target: PointCloud,
    pub template_views: Vec<PatchFeatureMap>,
    pub target_view: PatchFeatureMap,
    /// Target silhouettes from every template camera, then from the target camera.
    pub gt_masks: Vec<MaskView>,
    pub gt_deformation: DeformationField,
}

impl SyntheticPair {
    /// Mask seen from the target's observation camera.
    pub fn target_mask(&self) -> &MaskView {
        self.gt_masks.last().expect("pair has masks")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: GenSpec,
    pub pairs: Vec<SyntheticPair>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn render_masks(target: &PointCloud, poses: &[PoseSE3], intr: &CameraIntrinsics, sp: &SplatParams) -> Result<Vec<MaskView>> {
    poses.iter().map(|p| Ok(MaskView { mask: render_silhouette_with(target, p, intr, sp)?, pose: *p, intr: *intr })).collect()
}

/// Assembles a pair from its two clouds and cameras.
pub fn build_pair(
    spec: &GenSpec,
    id: String,
    template: PointCloud,
    target: PointCloud,
    target_pose: PoseSE3,
    enc: &WorldEncoding,
) -> Result<SyntheticPair> {
    let intr = spec.intrinsics();
    let poses = ring_poses(spec);
    let view = |cloud: &PointCloud, pose: &PoseSE3| -> Result<PatchFeatureMap> {
        let mut map = synthetic_feature_map_with(cloud, pose, &intr, enc, spec.patch_size)?;
        map.grid.data_mut().iter_mut().for_each(|x| *x = *x as f32 as f64);
        Ok(map)
    };
    let template_views = poses.iter().map(|p| view(&template, p)).collect::<Result<Vec<_>>>()?;
    let target_view = view(&target, &target_pose)?;
    let mut mask_poses = poses;
    mask_poses.push(target_pose);
    let gt_masks = render_masks(&target, &mask_poses, &intr, &spec.splat())?;
    let gt_deformation = target_velocity(&template, &target)?;
    Ok(SyntheticPair { id, template, target, template_views, target_view, gt_masks, gt_deformation })
}

/// Deterministic per `spec.seed`; pairs are built in parallel.
pub fn generate_synthetic_pairs(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let enc = WorldEncoding::new(spec.feature_dim, spec.feature_seed)?;
    let params = sample_parameters(spec.num_points, spec.template_seed);
    let template = superquadric_cloud("template", &params, &ShapeParams::SPHERE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draws: Vec<(ShapeParams, PoseSE3)> = (0..spec.count)
        .map(|_| {
            let [slo, shi] = spec.scale_range;
            let [elo, ehi] = spec.exponent_range;
            let scales = [rng.random_range(slo..=shi), rng.random_range(slo..=shi), rng.random_range(slo..=shi)];
            let exponents = [rng.random_range(elo..=ehi), rng.random_range(elo..=ehi)];
            (ShapeParams { scales, exponents }, random_hemisphere_pose(spec, &mut rng))
        })
        .collect();
    let pairs = draws
        .par_iter()
        .enumerate()
        .map(|(i, (shape, pose))| {
            let id = format!("pair_{i:04}");
            let target = superquadric_cloud(&id, &params, shape)?;
            build_pair(spec, id, template.clone(), target, *pose, &enc)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec: spec.clone(), pairs })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: GenSpec,
    pairs: Vec<String>,
}

fn view_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("view_{k:02}.fmf"))
}

/// `manifest.json` plus one directory per pair holding PCF1 clouds and
/// FMF1 feature maps. Masks are re-rendered on load.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest { spec: dataset.spec.clone(), pairs: dataset.pairs.iter().map(|p| p.id.clone()).collect() };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    for pair in &dataset.pairs {
        let pd = dir.join(&pair.id);
        fs::create_dir_all(&pd)?;
        save_cloud(&pd.join("template.pcf"), &pair.template)?;
        save_cloud(&pd.join("target.pcf"), &pair.target)?;
        for (k, v) in pair.template_views.iter().enumerate() {
            save_feature_map(&view_path(&pd, k), v)?;
        }
        save_feature_map(&pd.join("target.fmf"), &pair.target_view)?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let spec = manifest.spec;
    spec.validate()?;
    let intr = spec.intrinsics();
    let pairs = manifest
        .pairs
        .par_iter()
        .map(|id| {
            let pd = dir.join(id);
            let mut template = load_cloud(&pd.join("template.pcf"))?;
            let mut target = load_cloud(&pd.join("target.pcf"))?;
            template.id = "template".into();
            target.id = id.clone();
            let template_views = (0..spec.num_views).map(|k| load_feature_map(&view_path(&pd, k))).collect::<Result<Vec<_>>>()?;
            let target_view = load_feature_map(&pd.join("target.fmf"))?;
            let mut poses: Vec<PoseSE3> = template_views.iter().map(|v| v.pose).collect();
            poses.push(target_view.pose);
            let gt_masks = render_masks(&target, &poses, &intr, &spec.splat())?;
            let gt_deformation = target_velocity(&template, &target)?;
            Ok(SyntheticPair { id: id.clone(), template, target, template_views, target_view, gt_masks, gt_deformation })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { spec, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenSpec {
        GenSpec { count: 3, num_points: 64, feature_dim: 8, image_size: 32, patch_size: 4, focal: 30.0, ..GenSpec::default() }
    }

    #[test]
    fn unit_scales_give_identity_pairs() {
        let spec = GenSpec { scale_range: [1.0, 1.0], exponent_range: [1.0, 1.0], ..small() };
        let ds = generate_synthetic_pairs(&spec).unwrap();
        for p in &ds.pairs {
            assert_eq!(p.template.points, p.target.points);
            assert!(p.gt_deformation.vectors.iter().all(|d| *d == [0.0; 3]));
        }
    }

    #[test]
    fn ellipsoid_stretch_is_analytic() {
        let params = sample_parameters(50, 3);
        let stretched = ShapeParams { scales: [1.0, 1.0, 2.0], exponents: [1.0, 1.0] };
        for &(e, o) in &params {
            let s = superquadric_point(e, o, &ShapeParams::SPHERE);
            let t = superquadric_point(e, o, &stretched);
            assert!((t[2] - s[2] - s[2] * (2.0 - 1.0)).abs() < 1e-15);
            assert_eq!((t[0], t[1]), (s[0], s[1]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_pairs(&small()).unwrap();
        let b = generate_synthetic_pairs(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_pairs(&GenSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.pairs[0].target, c.pairs[0].target);
        assert_eq!(a.pairs[0].template, c.pairs[0].template);
    }

    #[test]
    fn unknown_family_is_rejected() {
        let spec = GenSpec { family: "torus".into(), ..small() };
        assert!(matches!(generate_synthetic_pairs(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let ds = generate_synthetic_pairs(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn target_cameras_stay_in_band() {
        let spec = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let p = random_hemisphere_pose(&spec, &mut rng);
            let elev = (p.translation[2] / spec.camera_distance).asin().to_degrees();
            assert!((10.0 - 1e-9..=75.0 + 1e-9).contains(&elev));
        }
    }
}
