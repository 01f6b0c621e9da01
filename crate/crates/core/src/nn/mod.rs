//! Layers, losses and optimizers of the segmentation pipeline.

mod cdbn;
mod discriminator;
pub mod loss;
pub mod optim;
mod segnet;

pub use cdbn::{BatchStats, CdbnBank, CdbnLayer, NormMode};
pub use discriminator::Discriminator;
pub use loss::{binary_cross_entropy, entropy_loss, seg_cross_entropy, PROB_FLOOR};
pub use optim::{AdamState, OptimConfig, PolySchedule, SgdState};
pub use segnet::{SegNet, SegNetConfig};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

/// Ordered, named parameter tensors of one network.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Replaces values in order; shapes must agree.
    pub fn set_all(&mut self, values: Vec<Tensor>) {
        assert_eq!(values.len(), self.tensors.len());
        for (old, new) in self.tensors.iter().zip(&values) {
            assert_eq!(old.shape(), new.shape());
        }
        self.tensors = values;
    }

    /// Detached copies, for passes that must not update this network.
    pub fn frozen(&self) -> Vec<Tensor> {
        self.tensors.iter().map(Tensor::detach).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// He-normal initialised conv kernel `(out, in, kh, kw)`.
pub(crate) fn he_conv(rng: &mut impl Rng, out: usize, inp: usize, k: usize) -> Tensor {
    let fan_in = (inp * k * k) as f64;
    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
    let data = (0..out * inp * k * k).map(|_| normal.sample(rng)).collect();
    Tensor::param(data, &[out, inp, k, k]).expect("consistent shape")
}

/// FNV-1a over the bit patterns of a sequence of slices.
pub fn digest<'a>(parts: impl IntoIterator<Item = &'a [f64]>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for v in part {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        // separator so ([a],[b]) and ([a,b]) differ
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
