use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{he_conv, CdbnLayer, NormMode, Params};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegNetConfig {
    pub in_channels: usize,
    /// Output channels of the 3×3 conv stack; each conv is followed by CDBN
    /// and a ReLU.
    pub widths: Vec<usize>,
    /// Dilation of each 3×3 conv (padding equals dilation, so spatial size
    /// is preserved).
    pub dilations: Vec<usize>,
    pub num_classes: usize,
    pub clusters: usize,
}

impl SegNetConfig {
    pub fn new(num_classes: usize, clusters: usize) -> Self {
        SegNetConfig {
            in_channels: 3,
            widths: vec![16, 32, 32],
            dilations: vec![1, 2, 4],
            num_classes,
            clusters,
        }
    }
}

/// Multi-branch segmentation network. Branch `k` is the network evaluated
/// with bank `k` selected in every CDBN layer; bank 0 is the source branch.
/// The output is a per-pixel class distribution `(N, M, H, W)`.
#[derive(Debug, Clone)]
pub struct SegNet {
    config: SegNetConfig,
    conv: Params,
    cdbn: Vec<CdbnLayer>,
}

impl SegNet {
    pub fn new(config: SegNetConfig, rng: &mut impl Rng) -> Self {
        assert_eq!(config.widths.len(), config.dilations.len());
        let mut conv = Params::new();
        let mut cdbn = Vec::new();
        let mut inp = config.in_channels;
        for (i, &w) in config.widths.iter().enumerate() {
            conv.push(format!("conv{}.w", i + 1), he_conv(rng, w, inp, 3));
            cdbn.push(CdbnLayer::new(w, config.clusters));
            inp = w;
        }
        conv.push("head.w", he_conv(rng, config.num_classes, inp, 1));
        conv.push(
            "head.b",
            Tensor::param(vec![0.0; config.num_classes], &[config.num_classes])
                .expect("1-d"),
        );
        SegNet { config, conv, cdbn }
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn clusters(&self) -> usize {
        self.config.clusters
    }

    /// Convolution weights and head bias (everything except CDBN).
    pub fn conv_params(&self) -> &Params {
        &self.conv
    }

    pub fn conv_params_mut(&mut self) -> &mut Params {
        &mut self.conv
    }

    pub fn cdbn(&self) -> &[CdbnLayer] {
        &self.cdbn
    }

    pub fn cdbn_mut(&mut self) -> &mut [CdbnLayer] {
        &mut self.cdbn
    }

    /// CDBN scale/shift of every layer and bank, in a fixed order.
    pub fn cdbn_params(&self) -> Params {
        let mut p = Params::new();
        for (l, layer) in self.cdbn.iter().enumerate() {
            for (k, bank) in layer.banks().iter().enumerate() {
                p.push(format!("cdbn{}.bank{k}.gamma", l + 1), bank.gamma.clone());
                p.push(format!("cdbn{}.bank{k}.beta", l + 1), bank.beta.clone());
            }
        }
        p
    }

    pub fn set_cdbn_params(&mut self, values: Vec<Tensor>) {
        let mut it = values.into_iter();
        for layer in &mut self.cdbn {
            for k in 0..layer.num_banks() {
                let bank = layer.bank_mut(k);
                bank.gamma = it.next().expect("gamma");
                bank.beta = it.next().expect("beta");
            }
        }
        assert!(it.next().is_none(), "too many CDBN parameters");
    }

    /// Parameters optimized in a stage: conv weights, plus every CDBN scale
    /// and shift when `with_cdbn`.
    pub fn trainable(&self, with_cdbn: bool) -> Params {
        let mut p = self.conv.clone();
        if with_cdbn {
            for (name, t) in self.cdbn_params().iter() {
                p.push(name, t.clone());
            }
        }
        p
    }

    pub fn set_trainable(&mut self, with_cdbn: bool, mut values: Vec<Tensor>) {
        let rest = values.split_off(self.conv.len());
        self.conv.set_all(values);
        if with_cdbn {
            self.set_cdbn_params(rest);
        } else {
            assert!(rest.is_empty());
        }
    }

    fn check_input(&self, x: &Tensor, bank: usize) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::Shape {
                op: "segnet",
                lhs: s.to_vec(),
                rhs: vec![0, self.config.in_channels, 0, 0],
            });
        }
        if bank > self.config.clusters {
            return Err(Error::invalid(
                "segnet",
                format!("bank {bank} out of range 0..={}", self.config.clusters),
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        conv: &[Tensor],
        x: &Tensor,
        bank: usize,
        mode: NormMode,
        mut absorb: impl FnMut(usize, super::BatchStats),
    ) -> Result<Tensor> {
        self.check_input(x, bank)?;
        let n = self.config.widths.len();
        let mut h = x.clone();
        for i in 0..n {
            let d = self.config.dilations[i];
            h = h.conv2d(&conv[i], None, 1, d, d)?;
            let (y, stats) = self.cdbn[i].normalize(&h, bank, mode)?;
            if let Some(s) = stats {
                absorb(i, s);
            }
            h = y.relu();
        }
        h.conv2d(&conv[n], Some(&conv[n + 1]), 1, 0, 1)?.softmax(1)
    }

    /// Forward through branch `bank`. Train mode normalizes with batch
    /// statistics and updates that bank's running estimates.
    pub fn forward(&mut self, x: &Tensor, bank: usize, mode: NormMode) -> Result<Tensor> {
        let conv = self.conv.tensors().to_vec();
        let mut pending = Vec::new();
        let out = self.run(&conv, x, bank, mode, |i, s| pending.push((i, s)))?;
        for (i, s) in pending {
            self.cdbn[i].absorb(&s);
        }
        Ok(out)
    }

    /// Eval-mode forward with substituted conv parameters (same order as
    /// [`conv_params`](Self::conv_params)); CDBN stays frozen.
    pub fn forward_with(&self, conv: &[Tensor], x: &Tensor, bank: usize) -> Result<Tensor> {
        if conv.len() != self.conv.len() {
            return Err(Error::invalid(
                "segnet",
                format!("expected {} conv tensors, got {}", self.conv.len(), conv.len()),
            ));
        }
        self.run(conv, x, bank, NormMode::Eval, |_, _| {})
    }

    /// Eval-mode forward with the network's own parameters.
    pub fn predict(&self, x: &Tensor, bank: usize) -> Result<Tensor> {
        self.forward_with(self.conv.tensors(), x, bank)
    }

    /// Digest of bank `k` across all CDBN layers.
    pub fn bank_digest(&self, k: usize) -> u64 {
        let parts: Vec<f64> = self
            .cdbn
            .iter()
            .map(|l| f64::from_bits(l.bank(k).digest()))
            .collect();
        super::digest([parts.as_slice()])
    }

    pub fn bank_digests(&self) -> Vec<u64> {
        (0..=self.config.clusters).map(|k| self.bank_digest(k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data = (0..n * 3 * 8 * 8).map(|_| rng.random::<f64>()).collect();
        Tensor::new(data, &[n, 3, 8, 8]).unwrap()
    }

    #[test]
    fn output_is_pixelwise_simplex_for_every_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = SegNet::new(SegNetConfig::new(4, 3), &mut rng);
        let x = input(2);
        for k in 0..=3 {
            for mode in [NormMode::Train, NormMode::Eval] {
                let p = net.forward(&x, k, mode).unwrap();
                assert_eq!(p.shape(), &[2, 4, 8, 8]);
                for n in 0..2 {
                    for px in 0..64 {
                        let s: f64 = (0..4).map(|c| p.data()[(n * 4 + c) * 64 + px]).sum();
                        assert!((s - 1.0).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn train_pass_touches_only_selected_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = SegNet::new(SegNetConfig::new(4, 4), &mut rng);
        let before = net.bank_digests();
        net.forward(&input(3), 2, NormMode::Train).unwrap();
        let after = net.bank_digests();
        for k in 0..=4 {
            assert_eq!(before[k] == after[k], k != 2, "bank {k}");
        }
    }

    #[test]
    fn trainable_roundtrip_keeps_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = SegNet::new(SegNetConfig::new(3, 2), &mut rng);
        let p = net.trainable(true);
        assert_eq!(p.len(), 5 + 3 * 3 * 2);
        let bumped: Vec<Tensor> = p.tensors().iter().map(|t| t.shift(1.0).to_param()).collect();
        net.set_trainable(true, bumped.clone());
        assert_eq!(net.trainable(true).tensors()[7].data(), bumped[7].data());
    }
}
