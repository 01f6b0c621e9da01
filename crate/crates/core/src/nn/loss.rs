//! Loss primitives. All logarithms are taken of `max(p, PROB_FLOOR)`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const PROB_FLOOR: f64 = 1e-12;

fn class_map_dims(op: &'static str, probs: &Tensor) -> Result<(usize, usize)> {
    let s = probs.shape();
    if s.len() != 4 {
        return Err(Error::invalid(op, format!("expected (N, M, H, W), got {s:?}")));
    }
    Ok((s[1], s[0] * s[2] * s[3]))
}

/// Pixel-averaged cross entropy between class probabilities `(N, M, H, W)`
/// and integer labels `(N, H, W)`.
pub fn seg_cross_entropy(probs: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (m, pixels) = class_map_dims("seg-cross-entropy", probs)?;
    let s = probs.shape();
    if labels.shape() != [s[0], s[2], s[3]] {
        return Err(Error::Shape {
            op: "seg-cross-entropy",
            lhs: s.to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    let hw = s[2] * s[3];
    let mut onehot = vec![0.0; probs.numel()];
    for (i, &l) in labels.data().iter().enumerate() {
        if l < 0.0 || l.fract() != 0.0 || l as usize >= m {
            return Err(Error::invalid(
                "seg-cross-entropy",
                format!("label {l} outside 0..{m}"),
            ));
        }
        let (n, px) = (i / hw, i % hw);
        onehot[(n * m + l as usize) * hw + px] = 1.0;
    }
    let onehot = Tensor::new(onehot, s)?;
    Ok(onehot
        .mul(&probs.clamp_min(PROB_FLOOR).log())?
        .sum()
        .scale(-1.0 / pixels as f64))
}

/// Mean binary cross entropy of discriminator outputs against a constant
/// label: source (`real = true`) or target (`real = false`).
pub fn binary_cross_entropy(d_out: &Tensor, real: bool) -> Tensor {
    let p = if real { d_out.clone() } else { d_out.neg().shift(1.0) };
    p.clamp_min(PROB_FLOOR).log().mean().neg()
}

/// Pixel-averaged self-entropy of class probabilities `(N, C, H, W)`:
/// `−(1/NHW) Σ p log p`. Lies in `[0, ln C]`.
pub fn entropy_loss(probs: &Tensor) -> Result<Tensor> {
    let (_, pixels) = class_map_dims("entropy", probs)?;
    Ok(probs
        .mul(&probs.clamp_min(PROB_FLOOR).log())?
        .sum()
        .scale(-1.0 / pixels as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(n: usize, m: usize, hw: usize, f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut d = Vec::new();
        for i in 0..n {
            for c in 0..m {
                for p in 0..hw {
                    d.push(f(i, c, p));
                }
            }
        }
        Tensor::new(d, &[n, m, 1, hw]).unwrap()
    }

    #[test]
    fn cross_entropy_of_perfect_prediction_vanishes() {
        let labels = Tensor::new(vec![0.0, 2.0, 1.0], &[1, 1, 3]).unwrap();
        let p = map(1, 3, 3, |_, c, px| if c == [0, 2, 1][px] { 1.0 } else { 0.0 });
        assert!(seg_cross_entropy(&p, &labels).unwrap().item() < 1e-11);
    }

    #[test]
    fn cross_entropy_of_uniform_is_ln_m() {
        let labels = Tensor::new(vec![3.0, 0.0, 1.0, 2.0], &[2, 1, 2]).unwrap();
        let p = map(2, 4, 2, |_, _, _| 0.25);
        let l = seg_cross_entropy(&p, &labels).unwrap().item();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_pixels() {
        // true-class probabilities 0.9 and 0.5
        let labels = Tensor::new(vec![0.0, 1.0], &[1, 1, 2]).unwrap();
        let p = Tensor::new(vec![0.9, 0.5, 0.1, 0.5], &[1, 2, 1, 2]).unwrap();
        let l = seg_cross_entropy(&p, &labels).unwrap().item();
        let expect = (-(0.9f64.ln()) - 0.5f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-15, "{l}");
        assert!((l - 0.399_254).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let labels = Tensor::new(vec![2.0], &[1, 1, 1]).unwrap();
        let p = Tensor::new(vec![0.5, 0.5], &[1, 2, 1, 1]).unwrap();
        assert!(seg_cross_entropy(&p, &labels).is_err());
    }

    #[test]
    fn entropy_examples() {
        let onehot = map(1, 3, 2, |_, c, _| if c == 1 { 1.0 } else { 0.0 });
        assert_eq!(entropy_loss(&onehot).unwrap().item(), 0.0);
        let uniform = map(2, 4, 3, |_, _, _| 0.25);
        assert!((entropy_loss(&uniform).unwrap().item() - 4f64.ln()).abs() < 1e-12);
        let skew = map(1, 2, 5, |_, c, _| if c == 0 { 0.7 } else { 0.3 });
        let e = entropy_loss(&skew).unwrap().item();
        assert!((e - 0.610_864).abs() < 1e-6, "{e}");
    }

    #[test]
    fn bce_at_half_is_ln2() {
        let d = Tensor::full(&[2, 1, 3, 3], 0.5);
        assert!((binary_cross_entropy(&d, true).item() - 2f64.ln()).abs() < 1e-12);
        assert!((binary_cross_entropy(&d, false).item() - 2f64.ln()).abs() < 1e-12);
    }
}
