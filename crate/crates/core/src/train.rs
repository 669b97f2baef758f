//! Adam training loop with a delayed cosine schedule, and the
//! finite-difference gradient check.

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{Dataset, SyntheticPair};
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{init_params, model_layout, pair_objective, prepare_pair, PairInputs};
use crate::params::{ParamLayout, Params};

/// Learning rate for `epoch`: constant until `anneal_start · epochs`, then a
/// half cosine down to `lr_floor · learning_rate`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    let lr = cfg.learning_rate;
    let floor = cfg.lr_floor * lr;
    let start = cfg.anneal_start * cfg.epochs as f64;
    let e = epoch as f64;
    if e < start || cfg.epochs as f64 <= start {
        return lr;
    }
    let progress = ((e - start) / (cfg.epochs as f64 - start)).min(1.0);
    floor + (lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * (mh / (vh.sqrt() + cfg.adam_eps) + cfg.weight_decay * params[i]);
        }
    }
}

/// Epoch means of every loss term, in epoch order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<LossBreakdown>,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainHistory,
}

fn check_finite(b: &LossBreakdown, grad: &[f64], epoch: usize) -> Result<()> {
    if let Some(term) = b.first_non_finite() {
        return Err(Error::Diverged { term: term.into(), epoch });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { term: "gradient".into(), epoch });
    }
    Ok(())
}

pub fn prepare_all(cfg: &TrainConfig, pairs: &[SyntheticPair]) -> Result<Vec<PairInputs>> {
    pairs.par_iter().map(|p| prepare_pair(cfg, p)).collect()
}

/// Trains from the seeded initialization. Per-pair gradients of a batch run
/// in parallel when `cfg.parallel` is set and are summed in pair order, so
/// the result does not depend on thread scheduling.
pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training needs at least one pair".into()));
    }
    let inputs = prepare_all(cfg, &dataset.pairs)?;
    let mut params = init_params(cfg);
    let mut adam = Adam::new(params.values.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = learning_rate(cfg, epoch);
        let mut mean = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            let times: Vec<f64> = batch.iter().map(|_| rng.random_range(0.0..=1.0)).collect();
            let job = |(&i, &t): (&usize, &f64)| pair_objective(&params, cfg, &inputs[i], t);
            let results: Vec<Result<(LossBreakdown, Vec<f64>)>> = if cfg.parallel {
                batch.par_iter().zip(times.par_iter()).map(job).collect()
            } else {
                batch.iter().zip(times.iter()).map(job).collect()
            };
            let mut grad = vec![0.0; params.values.len()];
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (b, g) = r?;
                check_finite(&b, &g, epoch)?;
                mean.add_scaled(&b, 1.0 / inputs.len() as f64);
                for (acc, x) in grad.iter_mut().zip(&g) {
                    *acc += scale * x;
                }
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    grad.iter_mut().for_each(|g| *g *= cfg.grad_clip / norm);
                }
            }
            adam.update(&mut params.values, &grad, lr, cfg);
        }
        info!(
            "epoch {epoch} lr {lr:.3e} total {:.6} fm {:.6} cd {:.6} lap {:.6} arap {:.6} reg {:.6} sil {:.6}",
            mean.total, mean.fm, mean.cd, mean.lap, mean.arap, mean.reg, mean.sil
        );
        history.epochs.push(mean);
    }
    let checkpoint = Checkpoint::from_state(cfg, &params, &adam, cfg.epochs);
    Ok(TrainOutcome { checkpoint, history })
}

/// Per-block maximum relative error between analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub blocks: Vec<(String, f64)>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn failing(&self) -> Vec<&str> {
        self.blocks.iter().filter(|(_, e)| !(*e <= self.tolerance)).map(|(n, _)| n.as_str()).collect()
    }
}

/// Relative error per block: `max |a − f| / max(max |a|, max |f|, 1e-12)`.
pub fn compare_gradients(layout: &ParamLayout, analytic: &[f64], numeric: &[f64], tolerance: f64) -> GradReport {
    let mut blocks: Vec<(String, f64, f64)> = Vec::new();
    for e in layout.entries() {
        let name = e.block().to_string();
        if blocks.last().is_none_or(|(n, _, _)| *n != name) {
            blocks.push((name, 0.0, 0.0));
        }
        let slot = blocks.last_mut().unwrap();
        for i in e.offset..e.offset + e.len() {
            let (a, f) = (analytic[i], numeric[i]);
            slot.1 = f64::max(slot.1, (a - f).abs());
            slot.2 = slot.2.max(a.abs()).max(f.abs());
            if !(a - f).abs().is_finite() {
                slot.1 = f64::INFINITY;
            }
        }
    }
    let blocks: Vec<(String, f64)> = blocks.into_iter().map(|(n, err, scale)| (n, err / scale.max(1e-12))).collect();
    let passed = blocks.iter().all(|(_, e)| *e <= tolerance);
    GradReport { blocks, tolerance, passed }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TIME: f64 = 0.37;

/// Central differences of the pair objective over every parameter, from a
/// fully random initialization so no block starts at zero.
pub fn numeric_gradient(params: &Params, cfg: &TrainConfig, x: &PairInputs, t: f64) -> Result<Vec<f64>> {
    let mut p = params.clone();
    let mut out = vec![0.0; p.values.len()];
    for i in 0..p.values.len() {
        let orig = p.values[i];
        p.values[i] = orig + GRADCHECK_STEP;
        let up = pair_objective(&p, cfg, x, t)?.0.total;
        p.values[i] = orig - GRADCHECK_STEP;
        let down = pair_objective(&p, cfg, x, t)?.0.total;
        p.values[i] = orig;
        out[i] = (up - down) / (2.0 * GRADCHECK_STEP);
    }
    Ok(out)
}

pub fn gradient_check(cfg: &TrainConfig, pair: &SyntheticPair, tolerance: f64) -> Result<GradReport> {
    cfg.validate()?;
    let x = prepare_pair(cfg, pair)?;
    let params = model_layout(cfg).initialize(cfg.seed, true);
    let (_, analytic) = pair_objective(&params, cfg, &x, GRADCHECK_TIME)?;
    let numeric = numeric_gradient(&params, cfg, &x, GRADCHECK_TIME)?;
    Ok(compare_gradients(&params.layout, &analytic, &numeric, tolerance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_pairs, GenSpec};

    #[test]
    fn schedule_holds_then_anneals_to_floor() {
        let cfg = TrainConfig { epochs: 100, ..TrainConfig::default() };
        assert_eq!(learning_rate(&cfg, 0), 1e-3);
        assert_eq!(learning_rate(&cfg, 49), 1e-3);
        assert_eq!(learning_rate(&cfg, 50), 1e-3);
        assert!((learning_rate(&cfg, 75) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
        assert!(learning_rate(&cfg, 99) < learning_rate(&cfg, 98));
        assert!((learning_rate(&cfg, 100) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        adam.update(&mut p, &[0.5, -2.0], 0.1, &cfg);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn corrupted_block_is_reported() {
        let mut l = ParamLayout::new();
        l.push("a.w", 1, 2, crate::params::Init::Zeros);
        l.push("b.w", 1, 2, crate::params::Init::Zeros);
        let numeric = [1.0, 2.0, 3.0, 4.0];
        let mut analytic = numeric;
        analytic[3] += 0.1;
        let r = compare_gradients(&l, &analytic, &numeric, 1e-4);
        assert!(!r.passed);
        assert_eq!(r.failing(), vec!["b"]);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::tiny() };
        let spec = GenSpec { count: 2, num_points: 6, num_views: 2, feature_dim: 8, image_size: 16, patch_size: 4, focal: 14.0, ..GenSpec::default() };
        let ds = generate_synthetic_pairs(&spec).unwrap();
        let out = train(&cfg, &ds).unwrap();
        let init = Checkpoint::from_state(&cfg, &init_params(&cfg), &Adam::new(out.checkpoint.values.len()), 0);
        assert_eq!(out.checkpoint, init);
    }
}
