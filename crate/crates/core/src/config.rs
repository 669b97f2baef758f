//! Training configuration, serialized as JSON with these field names.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LossWeights, SplatParams, DEFAULT_CUTOFF_SIGMAS, DEFAULT_SIGMA_PX};
use crate::propagation::DEFAULT_TEMPERATURE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub num_points: usize,
    pub num_visible: usize,
    pub num_views: usize,
    pub feature_dim: usize,
    pub geo_dim: usize,
    pub geo_hidden: usize,
    pub attn_width: usize,
    pub attn_heads: usize,
    pub attn_depth: usize,
    pub mlp_hidden: usize,
    pub vel_width: usize,
    pub vel_depth: usize,
    pub temperature: f64,
    pub sigma_px: f64,
    pub splat_cutoff: f64,
    pub knn_k: usize,
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub anneal_start: f64,
    pub lr_floor: f64,
    pub grad_clip: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub weight_decay: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub focal: f64,
    pub camera_distance: f64,
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_points: 256,
            num_visible: 128,
            num_views: 4,
            feature_dim: 32,
            geo_dim: 64,
            geo_hidden: 64,
            attn_width: 64,
            attn_heads: 8,
            attn_depth: 2,
            mlp_hidden: 128,
            vel_width: 64,
            vel_depth: 2,
            temperature: DEFAULT_TEMPERATURE,
            sigma_px: DEFAULT_SIGMA_PX,
            splat_cutoff: DEFAULT_CUTOFF_SIGMAS,
            knn_k: 8,
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            epochs: 300,
            seed: 0,
            anneal_start: 0.5,
            lr_floor: 0.01,
            grad_clip: 0.0,
            weight_decay: 0.0,
            image_size: 64,
            patch_size: 8,
            focal: 60.0,
            camera_distance: 2.2,
            parallel: true,
        }
    }
}

impl TrainConfig {
    /// Full-size model and optimizer settings.
    pub fn full_scale() -> Self {
        Self {
            num_points: 1024,
            num_visible: 512,
            num_views: 16,
            feature_dim: 768,
            geo_dim: 256,
            geo_hidden: 384,
            attn_width: 512,
            attn_depth: 2,
            mlp_hidden: 1024,
            vel_width: 512,
            vel_depth: 2,
            learning_rate: 1e-5,
            batch_size: 8,
            epochs: 100,
            image_size: 512,
            patch_size: 16,
            focal: 480.0,
            ..Self::default()
        }
    }

    /// Widths at most 8 and a handful of points, for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            num_points: 6,
            num_visible: 4,
            num_views: 2,
            feature_dim: 8,
            geo_dim: 8,
            geo_hidden: 8,
            attn_width: 8,
            attn_heads: 2,
            attn_depth: 1,
            mlp_hidden: 8,
            vel_width: 8,
            vel_depth: 2,
            knn_k: 2,
            splat_cutoff: 0.0,
            image_size: 16,
            patch_size: 4,
            focal: 14.0,
            batch_size: 2,
            epochs: 2,
            parallel: false,
            ..Self::default()
        }
    }

    /// A `splat_cutoff` of zero disables truncation.
    pub fn splat(&self) -> SplatParams {
        let cutoff_sigmas = if self.splat_cutoff == 0.0 { f64::INFINITY } else { self.splat_cutoff };
        SplatParams { sigma_px: self.sigma_px, cutoff_sigmas }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_points", self.num_points),
            ("num_visible", self.num_visible),
            ("num_views", self.num_views),
            ("feature_dim", self.feature_dim),
            ("geo_dim", self.geo_dim),
            ("geo_hidden", self.geo_hidden),
            ("attn_width", self.attn_width),
            ("attn_heads", self.attn_heads),
            ("attn_depth", self.attn_depth),
            ("mlp_hidden", self.mlp_hidden),
            ("vel_width", self.vel_width),
            ("vel_depth", self.vel_depth),
            ("knn_k", self.knn_k),
            ("batch_size", self.batch_size),
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if self.attn_width % self.attn_heads != 0 || self.vel_width % self.attn_heads != 0 {
            return Err(Error::Config("attention widths must be divisible by `attn_heads`".into()));
        }
        if self.feature_dim % 2 != 0 || self.feature_dim < 8 {
            return Err(Error::Config("`feature_dim` must be even and at least 8".into()));
        }
        if self.knn_k >= self.num_points {
            return Err(Error::Config("`knn_k` must be below `num_points`".into()));
        }
        let reals = [
            ("temperature", self.temperature),
            ("sigma_px", self.sigma_px),
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("focal", self.focal),
            ("camera_distance", self.camera_distance),
        ];
        if let Some((name, _)) = reals.iter().find(|(_, v)| !(*v > 0.0)) {
            return Err(Error::Config(format!("`{name}` must be positive")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.anneal_start) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("`anneal_start` and `lr_floor` must lie in [0, 1]".into()));
        }
        if !(self.grad_clip >= 0.0) || !(self.splat_cutoff >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("`grad_clip`, `splat_cutoff` and `weight_decay` must be non-negative".into()));
        }
        self.weights.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for c in [TrainConfig::default(), TrainConfig::full_scale(), TrainConfig::tiny()] {
            c.validate().unwrap();
            assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        }
        assert!(TrainConfig::tiny().splat().cutoff_sigmas.is_infinite());
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = TrainConfig::from_json(r#"{"epochs": 3, "weights": {"fm":1,"cd":0,"lap":0,"arap":0,"reg":0,"sil":0}}"#).unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.weights.cd, 0.0);
        assert!(TrainConfig::from_json(r#"{"epochz": 3}"#).is_err());
        assert!(matches!(TrainConfig::from_json(r#"{"knn_k": 0}"#), Err(Error::Config(_))));
    }
}
