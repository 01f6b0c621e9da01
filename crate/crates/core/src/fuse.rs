//! Style-conditioned fusion of the per-cluster branches.
//!
//! Every target image runs through all `K` target branches of the
//! segmentation network. A [`Hypernetwork`] maps the image's style code to
//! a categorical weight vector and the fused prediction is the per-pixel
//! convex combination of the branch probability maps.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::cluster::{assign, Centroids, StyleCode, CODE_LEN};
use crate::error::{Error, Result};
use crate::nn::{binary_cross_entropy, Discriminator, Params, SegNet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FuseConfig {
    pub iters: usize,
    pub lambda2: f64,
    pub fusion: Fusion,
    /// Temperature of the distance-weighted baseline.
    pub temperature: f64,
    pub source_batch: usize,
    pub target_batch: usize,
    pub hyper_hidden: usize,
    pub hyper_optim: HyperOptim,
    /// Full-batch Adam steps that fit a fresh hypernetwork to the
    /// nearest-centroid assignments before the stage starts; 0 trains it
    /// from its random initialization.
    pub warm_start_steps: usize,
    pub warm_start_lr: f64,
}

/// Optimizer of the hypernetwork parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperOptim {
    /// Shares the generator's SGD, at `lr_scale` times its scheduled rate.
    Sgd { lr_scale: f64 },
    /// Separate Adam state with base rate `lr` under the same polynomial
    /// decay.
    Adam { lr: f64 },
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            iters: 200,
            lambda2: 0.001,
            fusion: Fusion::Hyper,
            temperature: 1.0,
            source_batch: 4,
            target_batch: 4,
            hyper_hidden: 32,
            hyper_optim: HyperOptim::Sgd { lr_scale: 1.0 },
            warm_start_steps: 200,
            warm_start_lr: 0.01,
        }
    }
}

/// Fuse stage without meta-learning: G's conv weights fine-tune and H
/// trains on `L_seg + λ₂·L_fadv`, CDBN frozen. See
/// [`meta::train_fused`](crate::meta::train_fused).
pub fn train_fuse(
    bundle: &mut crate::bundle::ModelBundle,
    data: &crate::meta::StageData<'_>,
    config: &FuseConfig,
    optim: &crate::nn::OptimConfig,
    seed: u64,
) -> Result<Vec<crate::meta::FusedLogRow>> {
    crate::meta::train_fused(bundle, data, config, None, optim, seed)
}

/// Two-layer perceptron `code → relu(hidden) → softmax(K)`.
///
/// The output layer starts at zero, so an untrained network weights every
/// branch equally.
#[derive(Debug, Clone)]
pub struct Hypernetwork {
    params: Params,
}

impl Hypernetwork {
    pub fn new(k: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / CODE_LEN as f64).sqrt()).expect("finite");
        let w1 = (0..CODE_LEN * hidden).map(|_| normal.sample(rng)).collect();
        let mut params = Params::new();
        params.push("w1", Tensor::param(w1, &[CODE_LEN, hidden]).expect("2-d"));
        params.push("b1", Tensor::param(vec![0.0; hidden], &[hidden]).expect("1-d"));
        params.push("w2", Tensor::param(vec![0.0; hidden * k], &[hidden, k]).expect("2-d"));
        params.push("b2", Tensor::param(vec![0.0; k], &[k]).expect("1-d"));
        Hypernetwork { params }
    }

    pub fn k(&self) -> usize {
        self.params.tensors()[3].numel()
    }

    pub fn hidden(&self) -> usize {
        self.params.tensors()[1].numel()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, codes: &Tensor) -> Result<Tensor> {
        self.forward_with(self.params.tensors(), codes)
    }

    /// Weights `(N, K)` for codes `(N, 8)` with substituted parameters.
    pub fn forward_with(&self, p: &[Tensor], codes: &Tensor) -> Result<Tensor> {
        let n = codes.shape()[0];
        let (hidden, k) = (self.hidden(), self.k());
        let h = codes
            .matmul(&p[0])?
            .add(&p[1].reshape(&[1, hidden])?.broadcast_to(&[n, hidden])?)?
            .relu();
        h.matmul(&p[2])?
            .add(&p[3].reshape(&[1, k])?.broadcast_to(&[n, k])?)?
            .softmax(1)
    }
}

impl Hypernetwork {
    /// Fits the network to the cluster assignment of `codes` by minimizing
    /// the cross entropy against the nearest-centroid one-hots. Returns the
    /// final loss.
    pub fn fit_assignments(
        &mut self,
        codes: &[StyleCode],
        centroids: &Centroids,
        steps: usize,
        lr: f64,
    ) -> Result<f64> {
        if centroids.k() != self.k() {
            return Err(Error::invalid("hypernetwork", "centroid count differs from K"));
        }
        if codes.is_empty() {
            return Err(Error::invalid("hypernetwork", "no codes to fit"));
        }
        let x = code_tensor(codes);
        let onehots: Vec<f64> = codes.iter().flat_map(|c| onehot_weights(c, centroids)).collect();
        let target = Tensor::new(onehots, &[codes.len(), self.k()])?;
        let mut adam = crate::nn::AdamState::default();
        let mut last = f64::NAN;
        for _ in 0..steps {
            let params = self.params.tensors().to_vec();
            let w = self.forward_with(&params, &x)?;
            let loss = target
                .mul(&w.clamp_min(crate::nn::PROB_FLOOR).log())?
                .sum()
                .scale(-1.0 / codes.len() as f64);
            last = loss.item();
            let g = crate::autodiff::grad(&loss, &params)?;
            let mut next = params;
            adam.step(&mut next, &g, lr)?;
            self.params.set_all(next);
        }
        Ok(last)
    }
}

/// Stacks style codes into an `(N, 8)` constant tensor.
pub fn code_tensor(codes: &[StyleCode]) -> Tensor {
    Tensor::new(codes.concat(), &[codes.len(), CODE_LEN]).expect("consistent")
}

/// How branch weights are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned hypernetwork on the style code.
    Hyper,
    /// `1/K` for every branch.
    Average,
    /// Softmin of the distances between the code and the centroids.
    Distance,
    /// All weight on the nearest centroid's branch.
    Onehot,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Hyper => "hyper",
            Fusion::Average => "average",
            Fusion::Distance => "distance",
            Fusion::Onehot => "onehot",
        }
    }

    pub fn parse(s: &str) -> Result<Fusion> {
        match s {
            "hyper" => Ok(Fusion::Hyper),
            "average" => Ok(Fusion::Average),
            "distance" => Ok(Fusion::Distance),
            "onehot" => Ok(Fusion::Onehot),
            _ => Err(Error::Config(format!(
                "unknown fusion {s:?} (expected hyper, average, distance or onehot)"
            ))),
        }
    }
}

/// `w_k ∝ exp(−‖c − c_k‖ / temperature)`.
pub fn distance_weights(code: &[f64], centroids: &Centroids, temperature: f64) -> Vec<f64> {
    let d: Vec<f64> = centroids
        .points
        .iter()
        .map(|c| c.iter().zip(code).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect();
    let lo = d.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = d.iter().map(|v| (-(v - lo) / temperature).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn onehot_weights(code: &[f64], centroids: &Centroids) -> Vec<f64> {
    let mut w = vec![0.0; centroids.k()];
    w[assign(code, centroids)] = 1.0;
    w
}

/// Branch weights `(N, K)` for `codes` under a fixed (non-learned) rule.
pub fn fixed_weights(
    fusion: Fusion,
    codes: &[StyleCode],
    centroids: &Centroids,
    temperature: f64,
) -> Result<Tensor> {
    let k = centroids.k();
    let mut data = Vec::with_capacity(codes.len() * k);
    for c in codes {
        match fusion {
            Fusion::Average => data.extend(std::iter::repeat_n(1.0 / k as f64, k)),
            Fusion::Distance => data.extend(distance_weights(c, centroids, temperature)),
            Fusion::Onehot => data.extend(onehot_weights(c, centroids)),
            Fusion::Hyper => {
                return Err(Error::invalid("fusion", "hypernetwork weights are not fixed"))
            }
        }
    }
    Tensor::new(data, &[codes.len(), k])
}

/// `Σ_k w[:, k] · G_k(x)` with every branch in eval mode.
///
/// `conv` substitutes the segmentation network's conv parameters;
/// `weights` is `(N, K)` with rows on the simplex.
pub fn fused_prediction(seg: &SegNet, conv: &[Tensor], x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let k = seg.clusters();
    let n = x.shape()[0];
    if weights.shape() != [n, k] {
        return Err(Error::Shape {
            op: "fused-prediction",
            lhs: weights.shape().to_vec(),
            rhs: vec![n, k],
        });
    }
    let mut fused: Option<Tensor> = None;
    for j in 0..k {
        let p = seg.forward_with(conv, x, j + 1)?;
        let mut sel = vec![0.0; k];
        sel[j] = 1.0;
        let w = weights
            .matmul(&Tensor::new(sel, &[k, 1])?)?
            .reshape(&[n, 1, 1, 1])?
            .broadcast_to(p.shape())?;
        let term = w.mul(&p)?;
        fused = Some(match fused {
            None => term,
            Some(f) => f.add(&term)?,
        });
    }
    fused.ok_or_else(|| Error::invalid("fused-prediction", "network has no target branches"))
}

/// Generator-side adversarial loss on the fused map (discriminator frozen).
pub fn fuse_adv_loss(d: &Discriminator, fused: &Tensor) -> Result<Tensor> {
    Ok(binary_cross_entropy(&d.forward_frozen(fused)?, true))
}

/// Discriminator loss: source prediction real, fused prediction fake.
/// Both inputs are detached, so only the discriminator learns.
pub fn fuse_d_loss(d: &Discriminator, source_pred: &Tensor, fused: &Tensor) -> Result<Tensor> {
    let real = binary_cross_entropy(&d.forward(&source_pred.detach())?, true);
    let fake = binary_cross_entropy(&d.forward(&fused.detach())?, false);
    real.add(&fake)
}

/// `L_seg + λ₂·L_fadv`.
pub fn fuse_objective(l_seg: &Tensor, l_fadv: &Tensor, lambda2: f64) -> Result<Tensor> {
    l_seg.add(&l_fadv.scale(lambda2))
}

/// Per-row entropy `−Σ w log w` of a weight matrix `(N, K)`.
pub fn weight_entropies(weights: &Tensor) -> Vec<f64> {
    let k = weights.shape()[1];
    weights
        .data()
        .chunks(k)
        .map(|row| -row.iter().filter(|&&w| w > 0.0).map(|w| w * w.ln()).sum::<f64>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fresh_hypernetwork_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Hypernetwork::new(4, 32, &mut rng);
        let codes = Tensor::new((0..24).map(|i| i as f64 * 0.3 - 2.0).collect(), &[3, 8]).unwrap();
        let w = h.forward(&codes).unwrap();
        assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn single_branch_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = Hypernetwork::new(1, 32, &mut rng);
        let w = h.forward(&Tensor::full(&[2, 8], 0.7)).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn distance_weights_prefer_nearer_centroid() {
        let c = Centroids {
            points: vec![vec![0.0; 8], vec![1.0; 8]],
            inertia: 0.0,
            inertia_history: vec![],
            iterations: 0,
            seed: 0,
        };
        let w = distance_weights(&[0.1; 8], &c, 1.0);
        assert!(w[0] > w[1]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(onehot_weights(&[0.9; 8], &c), vec![0.0, 1.0]);
    }

    #[test]
    fn fusion_names_roundtrip() {
        for f in [Fusion::Hyper, Fusion::Average, Fusion::Distance, Fusion::Onehot] {
            assert_eq!(Fusion::parse(f.name()).unwrap(), f);
        }
        assert!(Fusion::parse("max").is_err());
    }
}
