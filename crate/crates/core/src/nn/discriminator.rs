use rand::Rng;

use super::{he_conv, Params};
use crate::autodiff::Tensor;
use crate::error::Result;

/// Output-space discriminator: maps an `(N, M, H, W)` class-probability map
/// to `(N, 1, H/4, W/4)` per-location probabilities that the map came from
/// the source domain.
///
/// Four 3×3 convs with widths 32-64-64-1; the first two stride 2, leaky ReLU
/// (slope 0.2) between layers, sigmoid at the end.
#[derive(Debug, Clone)]
pub struct Discriminator {
    params: Params,
}

const WIDTHS: [usize; 4] = [32, 64, 64, 1];
const STRIDES: [usize; 4] = [2, 2, 1, 1];
const SLOPE: f64 = 0.2;

impl Discriminator {
    pub fn new(num_classes: usize, rng: &mut impl Rng) -> Self {
        let mut params = Params::new();
        let mut inp = num_classes;
        for (i, &w) in WIDTHS.iter().enumerate() {
            params.push(format!("conv{}.w", i + 1), he_conv(rng, w, inp, 3));
            params.push(
                format!("conv{}.b", i + 1),
                Tensor::param(vec![0.0; w], &[w]).expect("1-d"),
            );
            inp = w;
        }
        Discriminator { params }
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn forward(&self, probs: &Tensor) -> Result<Tensor> {
        self.forward_with(self.params.tensors(), probs)
    }

    /// Forward with substituted parameters, e.g. [`Params::frozen`] copies
    /// when only the generator should receive gradients.
    pub fn forward_with(&self, params: &[Tensor], probs: &Tensor) -> Result<Tensor> {
        let mut h = probs.clone();
        for i in 0..WIDTHS.len() {
            h = h.conv2d(&params[2 * i], Some(&params[2 * i + 1]), STRIDES[i], 1, 1)?;
            if i + 1 < WIDTHS.len() {
                h = h.leaky_relu(SLOPE);
            }
        }
        Ok(h.sigmoid())
    }

    /// Forward that propagates gradients to the input but never to the
    /// discriminator's own parameters.
    pub fn forward_frozen(&self, probs: &Tensor) -> Result<Tensor> {
        self.forward_with(&self.params.frozen(), probs)
    }
}
