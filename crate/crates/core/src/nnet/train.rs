use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Cae;
use super::tensor::{Scalar, Tensor};
use super::NnError;
use crate::sampler::{SampleLabel, SampleSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(NnError::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &TrainConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            step: 0,
            m: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>]) {
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        // lr·m̂/(√v̂ + ε) = (lr/c1)·m / (√v/√c2 + ε)
        let lr_t = T::lit(self.lr / c1);
        let inv_sqrt_c2 = T::lit(1.0 / c2.sqrt());
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *w = *w - lr_t * *mi / (vi.sqrt() * inv_sqrt_c2 + eps);
            }
        }
    }
}

/// Mean squared error over every element, accumulated in f64.
pub fn mse_loss<T: Scalar>(reconstruction: &Tensor<T>, target: &Tensor<T>) -> f64 {
    let n = target.len() as f64;
    reconstruction
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum::<f64>()
        / n
}

/// One optimisation step on `batch`; returns the batch loss.
pub fn train_step<T: Scalar>(
    model: &mut Cae<T>,
    optimizer: &mut Adam<T>,
    batch: &Tensor<T>,
) -> Result<f64, NnError> {
    let trace = model.forward_trace(batch)?;
    let target = batch.clone().reshape(trace.output().shape())?;
    let loss = mse_loss(trace.output(), &target);
    let scale = T::lit(2.0 / target.len() as f64);
    let grad_data = trace
        .output()
        .data()
        .iter()
        .zip(target.data())
        .map(|(&y, &x)| scale * (y - x))
        .collect();
    let d_out = Tensor::from_vec(target.shape(), grad_data)?;
    let grads = model.backward(&trace, &d_out)?;
    optimizer.step(model.params_mut(), &grads);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Cae<f32>,
    /// Mean per-pixel MSE of each epoch, averaged over all samples.
    pub loss_history: Vec<f64>,
}

/// Trains on anomaly-free windows with seeded per-epoch shuffling.
pub fn train(
    model: Cae<f32>,
    train_set: &SampleSet,
    config: &TrainConfig,
) -> Result<Trained, NnError> {
    if let Some(i) = train_set
        .samples
        .iter()
        .position(|s| s.label == SampleLabel::Abnormal)
    {
        return Err(NnError::AbnormalTrainingSample(i));
    }
    if train_set.window != model.input_size() {
        return Err(NnError::Shape(format!(
            "model expects {0}x{0} windows, set holds {1}x{1}",
            model.input_size(),
            train_set.window
        )));
    }
    train_on_pixels(model, &train_set.flat_pixels(), config)
}

/// Same as [`train`] on a flat buffer of `N · S · S` window pixels.
pub fn train_on_pixels(
    mut model: Cae<f32>,
    pixels: &[f32],
    config: &TrainConfig,
) -> Result<Trained, NnError> {
    config.validate()?;
    let s = model.input_size();
    let per = s * s;
    if pixels.is_empty() || !pixels.len().is_multiple_of(per) {
        return Err(NnError::Shape(format!(
            "training buffer of {} values is not a positive multiple of {per}",
            pixels.len()
        )));
    }
    let n = pixels.len() / per;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = Adam::new(config, &model.params());
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut buffer = Vec::with_capacity(config.batch_size * per);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            buffer.clear();
            for &i in chunk {
                buffer.extend_from_slice(&pixels[i * per..(i + 1) * per]);
            }
            let batch = Tensor::from_vec(&[chunk.len(), s, s], std::mem::take(&mut buffer))?;
            let loss = train_step(&mut model, &mut optimizer, &batch).map_err(|e| match e {
                NnError::NonFinite { layer, name } => NnError::Diverged {
                    epoch,
                    batch: b,
                    detail: format!("non-finite activation in layer {layer} ({name})"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(NnError::Diverged {
                    epoch,
                    batch: b,
                    detail: "loss is not finite".into(),
                });
            }
            total += loss * chunk.len() as f64;
            buffer = batch.into_data();
        }
        history.push(total / n as f64);
    }
    Ok(Trained {
        model,
        loss_history: history,
    })
}

/// Reconstructions for a flat buffer of windows, evaluated in batches.
pub fn reconstruct(
    model: &Cae<f32>,
    pixels: &[f32],
    batch_size: usize,
) -> Result<Vec<f32>, NnError> {
    let s = model.input_size();
    let per = s * s;
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(batch_size.max(1) * per) {
        let n = chunk.len() / per;
        let batch = Tensor::from_vec(&[n, s, s], chunk.to_vec())?;
        out.extend_from_slice(model.forward(&batch)?.data());
    }
    Ok(out)
}

/// Loss history as CSV (`epoch,mean_mse`).
pub fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,mean_mse\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{},{:e}\n", i + 1, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn stripes(n: usize, seed: u64) -> Vec<f32> {
        // horizontal stripe patterns with a random phase and level
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n * 1024);
        for _ in 0..n {
            let phase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
            let level: f32 = rng.gen_range(0.2..0.6);
            for y in 0..32 {
                for _x in 0..32 {
                    out.push(level + 0.3 * ((y as f32) * 0.4 + phase).sin().abs());
                }
            }
        }
        out
    }

    fn quick(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: lr,
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases() {
        let data = stripes(64, 1);
        let t = train_on_pixels(Cae::new(8, 32, 1).unwrap(), &data, &quick(6, 1e-3)).unwrap();
        assert_eq!(t.loss_history.len(), 6);
        assert!(t.loss_history.iter().all(|l| l.is_finite()));
        assert!(
            t.loss_history[5] < t.loss_history[0] * 0.9,
            "{:?}",
            t.loss_history
        );
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let data = stripes(40, 2);
        let t = train_on_pixels(Cae::new(4, 32, 3).unwrap(), &data, &quick(3, 0.0)).unwrap();
        for l in &t.loss_history {
            assert!(
                (l - t.loss_history[0]).abs() <= 1e-12,
                "{:?}",
                t.loss_history
            );
        }
    }

    #[test]
    fn same_seed_same_history() {
        let data = stripes(40, 3);
        let a = train_on_pixels(Cae::new(4, 32, 5).unwrap(), &data, &quick(2, 1e-3)).unwrap();
        let b = train_on_pixels(Cae::new(4, 32, 5).unwrap(), &data, &quick(2, 1e-3)).unwrap();
        assert_eq!(a.loss_history, b.loss_history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn constant_dataset_is_learned() {
        let data = vec![0.37f32; 32 * 1024];
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            learning_rate: 3e-3,
            seed: 1,
            ..TrainConfig::default()
        };
        let t = train_on_pixels(Cae::new(2, 32, 11).unwrap(), &data, &cfg).unwrap();
        let recon = reconstruct(&t.model, &data[..1024], 1).unwrap();
        let mse: f64 = recon
            .iter()
            .map(|&r| ((r - 0.37) as f64).powi(2))
            .sum::<f64>()
            / 1024.0;
        assert!(mse <= 1e-3, "mse {mse}");
    }

    #[test]
    fn rejects_bad_config() {
        let data = stripes(4, 1);
        let mut cfg = quick(1, 1e-3);
        cfg.epochs = 0;
        assert!(train_on_pixels(Cae::new(4, 32, 0).unwrap(), &data, &cfg).is_err());
        cfg.epochs = 1;
        cfg.batch_size = 0;
        assert!(train_on_pixels(Cae::new(4, 32, 0).unwrap(), &data, &cfg).is_err());
    }

    #[test]
    fn csv_log_format() {
        assert_eq!(loss_csv(&[0.5, 0.25]), "epoch,mean_mse\n1,5e-1\n2,2.5e-1\n");
    }
}
