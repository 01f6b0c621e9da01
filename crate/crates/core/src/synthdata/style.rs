use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::Scene;
use crate::rng;

/// Appearance change applied to a whole image. Every variant maps `[0, 1]`
/// into `[0, 1]` (results are clamped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleTransform {
    Identity,
    /// `v ← v^gamma`.
    Gamma { gamma: f64 },
    /// Per-channel gains.
    ColorCast { gains: [f64; 3] },
    /// i.i.d. Gaussian noise, drawn from the style seed.
    AdditiveNoise { sigma: f64 },
    /// Blend toward luminance by `rho` (1 = grayscale).
    Desaturate { rho: f64 },
    /// `v ← 0.5 + c·(v − 0.5)`.
    Contrast { c: f64 },
    /// Steps applied in order.
    Chain { steps: Vec<StyleTransform> },
}

pub(crate) fn luminance(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

impl StyleTransform {
    /// Applies the transform to a `(3, H, W)` image in place.
    pub fn apply_image(&self, image: &mut [f64], seed: u64) {
        self.apply_inner(image, seed, 0);
    }

    fn apply_inner(&self, image: &mut [f64], seed: u64, depth: u64) {
        let plane = image.len() / 3;
        match self {
            StyleTransform::Identity => {}
            StyleTransform::Gamma { gamma } => {
                image.iter_mut().for_each(|v| *v = v.powf(*gamma));
            }
            StyleTransform::ColorCast { gains } => {
                for (ch, gain) in gains.iter().enumerate() {
                    image[ch * plane..(ch + 1) * plane]
                        .iter_mut()
                        .for_each(|v| *v *= gain);
                }
            }
            StyleTransform::AdditiveNoise { sigma } => {
                let mut r = rng::stream(seed, "style-noise", depth);
                let n = Normal::new(0.0, *sigma).expect("finite sigma");
                image.iter_mut().for_each(|v| *v += n.sample(&mut r));
            }
            StyleTransform::Desaturate { rho } => {
                for p in 0..plane {
                    let l = luminance(image[p], image[plane + p], image[2 * plane + p]);
                    for ch in 0..3 {
                        let v = &mut image[ch * plane + p];
                        *v = (1.0 - rho) * *v + rho * l;
                    }
                }
            }
            StyleTransform::Contrast { c } => {
                image.iter_mut().for_each(|v| *v = 0.5 + c * (*v - 0.5));
            }
            StyleTransform::Chain { steps } => {
                for (i, s) in steps.iter().enumerate() {
                    s.apply_inner(image, seed, depth * 16 + i as u64 + 1);
                }
            }
        }
        image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Flattened numeric parameters (used to check that open styles share
    /// nothing with the compound ones).
    pub fn parameters(&self) -> Vec<f64> {
        match self {
            StyleTransform::Identity => Vec::new(),
            StyleTransform::Gamma { gamma } => vec![*gamma],
            StyleTransform::ColorCast { gains } => gains.to_vec(),
            StyleTransform::AdditiveNoise { sigma } => vec![*sigma],
            StyleTransform::Desaturate { rho } => vec![*rho],
            StyleTransform::Contrast { c } => vec![*c],
            StyleTransform::Chain { steps } => steps.iter().flat_map(|s| s.parameters()).collect(),
        }
    }
}

/// Restyled copy of `scene`; labels are untouched.
pub fn apply_style(scene: &Scene, transform: &StyleTransform, seed: u64) -> Scene {
    let mut out = scene.clone();
    transform.apply_image(&mut out.image, seed);
    out
}
