use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Whether normalization uses the current batch (and updates the running
/// statistics of the selected bank) or the bank's running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// One set of normalization parameters and statistics.
#[derive(Debug, Clone)]
pub struct CdbnBank {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl CdbnBank {
    fn new(channels: usize) -> Self {
        CdbnBank {
            gamma: Tensor::param(vec![1.0; channels], &[channels]).expect("1-d"),
            beta: Tensor::param(vec![0.0; channels], &[channels]).expect("1-d"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn digest(&self) -> u64 {
        super::digest([
            self.gamma.data(),
            self.beta.data(),
            self.running_mean.as_slice(),
            self.running_var.as_slice(),
        ])
    }
}

/// Per-channel batch statistics measured in a train-mode pass, applied to a
/// bank's running estimates with [`CdbnLayer::absorb`].
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub bank: usize,
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the value folded into `running_var`.
    pub var: Vec<f64>,
}

/// Compound-domain batch normalization: bank 0 serves the source domain and
/// banks `1..=K` the discovered sub-target domains.
///
/// `y = γ_b · (x − μ) / sqrt(σ² + ε) + β_b`, with `(μ, σ²)` the batch
/// statistics in train mode and bank `b`'s running estimates in eval mode.
/// Running estimates follow `r ← (1 − momentum)·r + momentum·batch`.
#[derive(Debug, Clone)]
pub struct CdbnLayer {
    channels: usize,
    banks: Vec<CdbnBank>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl CdbnLayer {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPSILON: f64 = 1e-5;

    /// A layer with `clusters + 1` banks.
    pub fn new(channels: usize, clusters: usize) -> Self {
        CdbnLayer {
            channels,
            banks: (0..=clusters).map(|_| CdbnBank::new(channels)).collect(),
            momentum: Self::DEFAULT_MOMENTUM,
            epsilon: Self::DEFAULT_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_banks(&self) -> usize {
        self.banks.len()
    }

    pub fn bank(&self, k: usize) -> &CdbnBank {
        &self.banks[k]
    }

    pub fn bank_mut(&mut self, k: usize) -> &mut CdbnBank {
        &mut self.banks[k]
    }

    pub fn banks(&self) -> &[CdbnBank] {
        &self.banks
    }

    fn check(&self, x: &Tensor, bank: usize) -> Result<()> {
        if bank >= self.banks.len() {
            return Err(Error::invalid(
                "cdbn",
                format!("bank {bank} out of range (layer has {})", self.banks.len()),
            ));
        }
        let s = x.shape();
        if s.len() != 4 || s[1] != self.channels {
            return Err(Error::Shape {
                op: "cdbn",
                lhs: s.to_vec(),
                rhs: vec![0, self.channels, 0, 0],
            });
        }
        Ok(())
    }

    /// Normalizes `x` with bank `bank`. Train mode returns the batch
    /// statistics; the caller folds them in with [`absorb`](Self::absorb)
    /// (or [`forward`](Self::forward) does both).
    pub fn normalize(
        &self,
        x: &Tensor,
        bank: usize,
        mode: NormMode,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        self.check(x, bank)?;
        let b = &self.banks[bank];
        self.normalize_with(x, bank, mode, &b.gamma, &b.beta)
    }

    /// As [`normalize`](Self::normalize) but with caller-supplied affine
    /// parameters (used when the scale and shift are being substituted).
    pub fn normalize_with(
        &self,
        x: &Tensor,
        bank: usize,
        mode: NormMode,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> Result<(Tensor, Option<BatchStats>)> {
        self.check(x, bank)?;
        let c = self.channels;
        let shape = x.shape().to_vec();
        let per_channel = [1, c, 1, 1];
        let g = gamma.reshape(&per_channel)?;
        let b = beta.reshape(&per_channel)?;
        match mode {
            NormMode::Train => {
                if shape[0] < 2 {
                    return Err(Error::invalid(
                        "cdbn",
                        format!("train mode needs a batch of at least 2, got {}", shape[0]),
                    ));
                }
                let n = (shape[0] * shape[2] * shape[3]) as f64;
                let mean = x.sum_to(&per_channel)?.scale(1.0 / n);
                let centered = x.sub(&mean.broadcast_to(&shape)?)?;
                let var = centered.square().sum_to(&per_channel)?.scale(1.0 / n);
                let inv_std = var.shift(self.epsilon).sqrt().recip();
                let y = centered
                    .mul(&inv_std.mul(&g)?.broadcast_to(&shape)?)?
                    .add(&b.broadcast_to(&shape)?)?;
                let stats = BatchStats {
                    bank,
                    mean: mean.to_vec(),
                    var: var.data().iter().map(|v| v * n / (n - 1.0)).collect(),
                };
                Ok((y, Some(stats)))
            }
            NormMode::Eval => {
                let bank_ref = &self.banks[bank];
                let inv_std: Vec<f64> = bank_ref
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + self.epsilon).sqrt())
                    .collect();
                let inv_std = Tensor::new(inv_std, &per_channel)?;
                let mean = Tensor::new(bank_ref.running_mean.clone(), &per_channel)?;
                let scale = g.mul(&inv_std)?;
                let shift = b.sub(&mean.mul(&scale)?)?;
                let y = x
                    .mul(&scale.broadcast_to(&shape)?)?
                    .add(&shift.broadcast_to(&shape)?)?;
                Ok((y, None))
            }
        }
    }

    /// Folds batch statistics into the running estimates of their bank only.
    pub fn absorb(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let bank = &mut self.banks[stats.bank];
        for (r, s) in bank.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * s;
        }
        for (r, s) in bank.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * s;
        }
    }

    pub fn forward(&mut self, x: &Tensor, bank: usize, mode: NormMode) -> Result<Tensor> {
        let (y, stats) = self.normalize(x, bank, mode)?;
        if let Some(s) = stats {
            self.absorb(&s);
        }
        Ok(y)
    }

    /// Digest of every bank's parameters and statistics.
    pub fn bank_digests(&self) -> Vec<u64> {
        self.banks.iter().map(CdbnBank::digest).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(seed: u64, n: usize, c: usize, offset: f64, spread: f64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * c * 4 * 4)
            .map(|_| offset + spread * rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(data, &[n, c, 4, 4]).unwrap()
    }

    fn channel_moments(y: &Tensor) -> Vec<(f64, f64)> {
        let s = y.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        (0..c)
            .map(|ch| {
                let vals: Vec<f64> = (0..n)
                    .flat_map(|i| {
                        let base = (i * c + ch) * hw;
                        y.data()[base..base + hw].to_vec()
                    })
                    .collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                (mean, var)
            })
            .collect()
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut layer = CdbnLayer::new(3, 2);
        // σ² ≈ 133, so ε/σ² stays below 1e-7
        let x = random_batch(7, 4, 3, 2.0, 20.0);
        let y = layer.forward(&x, 1, NormMode::Train).unwrap();
        for (mean, var) in channel_moments(&y) {
            assert!(mean.abs() < 1e-9, "mean {mean}");
            // ε shrinks the variance by σ²/(σ²+ε)
            assert!((var - 1.0).abs() < 1e-6, "var {var}");
        }
    }

    #[test]
    fn affine_parameters_set_output_moments() {
        let mut layer = CdbnLayer::new(2, 1);
        layer.bank_mut(0).gamma = Tensor::param(vec![2.0, 2.0], &[2]).unwrap();
        layer.bank_mut(0).beta = Tensor::param(vec![3.0, 3.0], &[2]).unwrap();
        let x = random_batch(3, 4, 2, 0.0, 20.0);
        let y = layer.forward(&x, 0, NormMode::Train).unwrap();
        for (mean, var) in channel_moments(&y) {
            assert!((mean - 3.0).abs() < 1e-9);
            assert!((var.sqrt() - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn running_stats_follow_ema_per_bank() {
        let mut layer = CdbnLayer::new(1, 2);
        let a = random_batch(1, 4, 1, 5.0, 0.5);
        let b = random_batch(2, 4, 1, -3.0, 0.5);
        let bank0 = layer.bank(0).digest();
        let mean_of = |t: &Tensor| t.data().iter().sum::<f64>() / t.numel() as f64;
        let (mut ra, mut rb) = (0.0, 0.0);
        for _ in 0..30 {
            layer.forward(&a, 1, NormMode::Train).unwrap();
            layer.forward(&b, 2, NormMode::Train).unwrap();
            ra = 0.9 * ra + 0.1 * mean_of(&a);
            rb = 0.9 * rb + 0.1 * mean_of(&b);
        }
        assert!((layer.bank(1).running_mean[0] - ra).abs() < 1e-12);
        assert!((layer.bank(2).running_mean[0] - rb).abs() < 1e-12);
        assert_eq!(layer.bank(0).digest(), bank0);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut layer = CdbnLayer::new(1, 1);
        layer.bank_mut(1).running_mean = vec![2.0];
        layer.bank_mut(1).running_var = vec![4.0 - layer.epsilon];
        let x = Tensor::new(vec![4.0], &[1, 1, 1, 1]).unwrap();
        let y = layer.forward(&x, 1, NormMode::Eval).unwrap();
        assert!((y.item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_bank_and_tiny_batches() {
        let mut layer = CdbnLayer::new(2, 1);
        let x = random_batch(0, 1, 2, 0.0, 1.0);
        assert!(layer.forward(&x, 2, NormMode::Eval).is_err());
        assert!(layer.forward(&x, 0, NormMode::Train).is_err());
        assert!(layer.forward(&x, 0, NormMode::Eval).is_ok());
    }
}
