//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use towscan::anomaly::RocPoint;
use towscan::localize::{iou, DefectBox};
use towscan::nnet::{Layer, Tensor};
use towscan::DepthMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Brute-force 3×3 median with replicated borders: sort all nine values.
pub fn median_oracle(map: &DepthMap) -> Vec<f64> {
    let (w, h) = (map.width() as isize, map.height() as isize);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let mut v = Vec::with_capacity(9);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let xx = (x + dx).clamp(0, w - 1) as usize;
                    let yy = (y + dy).clamp(0, h - 1) as usize;
                    v.push(map.pixels()[yy * w as usize + xx]);
                }
            }
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out.push(v[4]);
        }
    }
    out
}

/// Mean squared error as an explicit double loop over rows and columns.
pub fn mse_oracle(a: &[f32], b: &[f32], side: usize) -> f64 {
    let mut acc = 0.0f64;
    for r in 0..side {
        for c in 0..side {
            let d = a[r * side + c] as f64 - b[r * side + c] as f64;
            acc += d * d;
        }
    }
    acc / (side * side) as f64
}

/// Probability that an abnormal score beats a normal one, ties counting half.
pub fn mann_whitney(normal: &[f64], abnormal: &[f64]) -> f64 {
    let mut wins = 0.0;
    for &a in abnormal {
        for &n in normal {
            if a > n {
                wins += 1.0;
            } else if a == n {
                wins += 0.5;
            }
        }
    }
    wins / (normal.len() * abnormal.len()) as f64
}

/// Tries every candidate threshold (midpoints between distinct scores and
/// the two infinities), counting `score > t` directly.
pub fn best_threshold_oracle(normal: &[f64], abnormal: &[f64]) -> RocPoint {
    let mut distinct: Vec<f64> = normal.iter().chain(abnormal).copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    let mut candidates = vec![f64::INFINITY, f64::NEG_INFINITY];
    for p in distinct.windows(2) {
        candidates.push(0.5 * (p[0] + p[1]));
    }
    let point = |t: f64| RocPoint {
        fpr: normal.iter().filter(|&&s| s > t).count() as f64 / normal.len() as f64,
        tpr: abnormal.iter().filter(|&&s| s > t).count() as f64 / abnormal.len() as f64,
        threshold: t,
    };
    let mut best = point(candidates[0]);
    for &t in &candidates[1..] {
        let p = point(t);
        let d = |q: &RocPoint| q.fpr * q.fpr + (1.0 - q.tpr) * (1.0 - q.tpr);
        let better = d(&p) < d(&best)
            || (d(&p) == d(&best)
                && (p.fpr < best.fpr || (p.fpr == best.fpr && p.threshold > best.threshold)));
        if better {
            best = p;
        }
    }
    best
}

/// Greedy matching by rescanning every unused pair for the largest IoU.
/// Returns `(predicted, ground_truth, iou)` in pick order.
pub fn greedy_match_oracle(pred: &[DefectBox], gt: &[DefectBox]) -> Vec<(usize, usize, f64)> {
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for g in 0..gt.len() {
            for p in 0..pred.len() {
                if used_p[p] || used_g[g] {
                    continue;
                }
                let v = iou(&pred[p], &gt[g]);
                if v > 0.0 && best.is_none_or(|b| v > b.2) {
                    best = Some((p, g, v));
                }
            }
        }
        match best {
            Some((p, g, v)) => {
                used_p[p] = true;
                used_g[g] = true;
                out.push((p, g, v));
            }
            None => return out,
        }
    }
}

/// Largest total IoU over all one-to-one assignments.
pub fn optimal_total_iou(pred: &[DefectBox], gt: &[DefectBox]) -> f64 {
    fn go(pred: &[DefectBox], gt: &[DefectBox], g: usize, used: &mut Vec<bool>) -> f64 {
        if g == gt.len() {
            return 0.0;
        }
        let mut best = go(pred, gt, g + 1, used);
        for p in 0..pred.len() {
            if !used[p] {
                used[p] = true;
                best = best.max(iou(&pred[p], &gt[g]) + go(pred, gt, g + 1, used));
                used[p] = false;
            }
        }
        best
    }
    go(pred, gt, 0, &mut vec![false; pred.len()])
}

/// Relative error between two gradient vectors, as a norm ratio.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt()
        + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Finite-difference check of one layer on input `x` with the linear loss
/// `Σ y·r`. Returns the worst relative error over the input and every
/// parameter gradient.
pub fn layer_gradient_error(
    layer: &Layer<f64>,
    x: &Tensor<f64>,
    eps: f64,
    rng: &mut impl Rng,
) -> f64 {
    let y = layer.forward(x).unwrap();
    let r = random_tensor(y.shape(), rng);
    let loss = |l: &Layer<f64>, x: &Tensor<f64>| -> f64 {
        let y = l.forward(x).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let (dx, dparams) = layer.backward(x, &y, &r).unwrap();

    let mut numeric = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += eps;
        let mut xm = x.clone();
        xm.data_mut()[i] -= eps;
        numeric.push((loss(layer, &xp) - loss(layer, &xm)) / (2.0 * eps));
    }
    let mut worst = relative_error(dx.data(), &numeric);

    for (k, analytic) in dparams.iter().enumerate() {
        let len = layer.params()[k].len();
        let mut numeric = Vec::with_capacity(len);
        for i in 0..len {
            let mut lp = layer.clone();
            lp.params_mut()[k].data_mut()[i] += eps;
            let mut lm = layer.clone();
            lm.params_mut()[k].data_mut()[i] -= eps;
            numeric.push((loss(&lp, x) - loss(&lm, x)) / (2.0 * eps));
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// Pushes values away from the ReLU kink so central differences stay on one
/// side of it.
pub fn away_from_zero(t: &mut Tensor<f64>, margin: f64) {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
}
