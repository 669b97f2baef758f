//! Evaluation metrics: averaged Chamfer, earth mover's distance over
//! bijections and silhouette IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{dist2, PointCloud, SilhouetteMask, Vec3};
use crate::losses::nearest;

pub const EXACT_EMD_LIMIT: usize = 512;
pub const DEFAULT_SIOU_THRESHOLD: f64 = 0.5;

/// `mean_p min_q ‖p−q‖² + mean_q min_p ‖q−p‖²`.
pub fn metric_cd(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let one_way = |a: &[Vec3], b: &[Vec3]| a.iter().map(|&p| nearest(p, b).1).sum::<f64>() / a.len() as f64;
    Ok(one_way(&pred.points, &gt.points) + one_way(&gt.points, &pred.points))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmdResult {
    pub value: f64,
    pub approximate: bool,
}

fn cost_matrix(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let n = a.len();
    let mut c = vec![0.0; n * n];
    for (i, &p) in a.iter().enumerate() {
        for (j, &q) in b.iter().enumerate() {
            c[i * n + j] = dist2(p, q).sqrt();
        }
    }
    c
}

/// Minimum-cost perfect matching on a square cost matrix; returns the
/// column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based potentials and matching
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut min_v = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < min_v[j] {
                    min_v[j] = cur;
                    way[j] = j0;
                }
                if min_v[j] < delta {
                    delta = min_v[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_v[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            assign[row_of[j] - 1] = j - 1;
        }
    }
    assign
}

/// Forward auction with ε-scaling, then pairwise-swap polishing. The
/// final ε bounds the total excess cost by `n · ε`, here a `1e-4` fraction
/// of the mean entry.
pub fn auction_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let mean = cost.iter().sum::<f64>() / (n * n) as f64;
    let max = cost.iter().cloned().fold(0.0, f64::max);
    let eps_final = (1e-4 * mean / n as f64).max(f64::MIN_POSITIVE);
    let mut prices = vec![0.0; n];
    let mut eps = (max / 4.0).max(eps_final);
    let mut assign;
    loop {
        let mut owner = vec![usize::MAX; n];
        assign = vec![usize::MAX; n];
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let (mut best, mut best_j, mut second) = (f64::NEG_INFINITY, 0, f64::NEG_INFINITY);
            for j in 0..n {
                let value = -cost[i * n + j] - prices[j];
                if value > best {
                    second = best;
                    best = value;
                    best_j = j;
                } else if value > second {
                    second = value;
                }
            }
            let gap = if second.is_finite() { best - second } else { 0.0 };
            prices[best_j] += gap + eps;
            if owner[best_j] != usize::MAX {
                assign[owner[best_j]] = usize::MAX;
                queue.push(owner[best_j]);
            }
            owner[best_j] = i;
            assign[i] = best_j;
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps / 5.0).max(eps_final);
    }
    swap_polish(cost, n, &mut assign);
    assign
}

fn swap_polish(cost: &[f64], n: usize, assign: &mut [usize]) {
    let mut improved = true;
    while improved {
        improved = false;
        for a in 0..n {
            for b in a + 1..n {
                let (ja, jb) = (assign[a], assign[b]);
                let now = cost[a * n + ja] + cost[b * n + jb];
                let swapped = cost[a * n + jb] + cost[b * n + ja];
                if swapped < now - 1e-15 * now.abs() {
                    assign.swap(a, b);
                    improved = true;
                }
            }
        }
    }
}

fn mean_cost(cost: &[f64], n: usize, assign: &[usize]) -> f64 {
    assign.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64
}

/// Mean unsquared distance under the optimal bijection; exact up to
/// `exact_limit` points, auction-based above it.
pub fn metric_emd_detailed(pred: &PointCloud, gt: &PointCloud, exact_limit: usize) -> Result<EmdResult> {
    if pred.len() != gt.len() {
        return Err(Error::Cardinality(pred.len(), gt.len()));
    }
    let n = pred.len();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let cost = cost_matrix(&pred.points, &gt.points);
    let (assign, approximate) = if n <= exact_limit { (hungarian(&cost, n), false) } else { (auction_assignment(&cost, n), true) };
    Ok(EmdResult { value: mean_cost(&cost, n, &assign), approximate })
}

pub fn metric_emd(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    Ok(metric_emd_detailed(pred, gt, EXACT_EMD_LIMIT)?.value)
}

pub fn metric_emd_approx(pred: &PointCloud, gt: &PointCloud) -> Result<f64> {
    Ok(metric_emd_detailed(pred, gt, 0)?.value)
}

/// IoU of the masks binarized at `threshold`; two empty masks score 1.
pub fn metric_siou(pred_mask: &SilhouetteMask, gt_mask: &SilhouetteMask, threshold: f64) -> Result<f64> {
    if pred_mask.height != gt_mask.height || pred_mask.width != gt_mask.width {
        return Err(Error::Dimension(format!(
            "masks {}x{} and {}x{}",
            pred_mask.height, pred_mask.width, gt_mask.height, gt_mask.width
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred_mask.values.iter().zip(&gt_mask.values) {
        let (a, b) = (a >= threshold, b >= threshold);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}
