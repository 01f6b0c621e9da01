//! Style codes, k-means over the compound target, nearest-centroid
//! assignment.
//!
//! A style code is eight appearance statistics of an image: per-channel
//! means and standard deviations, the mean luminance-gradient magnitude and
//! the luminance skewness. Codes are standardized with statistics fitted
//! once on the target corpus and then frozen, so open-domain images land in
//! the same coordinate system.

mod kmeans;

pub use kmeans::{assign, kmeans_fit, Centroids, KmeansConfig};

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::synthdata::{luminance, Split};

pub const CODE_LEN: usize = 8;

pub type StyleCode = [f64; CODE_LEN];

/// Unstandardized appearance statistics of a `(3, H, W)` image.
pub fn raw_style(image: &[f64], height: usize, width: usize) -> StyleCode {
    let plane = height * width;
    assert_eq!(image.len(), 3 * plane, "expected a (3, H, W) image");
    let mut code = [0.0; CODE_LEN];
    for ch in 0..3 {
        let px = &image[ch * plane..(ch + 1) * plane];
        let mean = px.iter().sum::<f64>() / plane as f64;
        let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
        code[ch] = mean;
        code[3 + ch] = var.sqrt();
    }
    let lum: Vec<f64> = (0..plane)
        .map(|p| luminance(image[p], image[plane + p], image[2 * plane + p]))
        .collect();
    let mut grad = 0.0;
    for y in 0..height - 1 {
        for x in 0..width - 1 {
            let p = y * width + x;
            let dx = lum[p + 1] - lum[p];
            let dy = lum[p + width] - lum[p];
            grad += (dx * dx + dy * dy).sqrt();
        }
    }
    code[6] = grad / ((height - 1) * (width - 1)) as f64;
    let mean = lum.iter().sum::<f64>() / plane as f64;
    let var = lum.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
    code[7] = if var > 1e-24 {
        lum.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / plane as f64 / var.powf(1.5)
    } else {
        0.0
    };
    code
}

/// Per-feature affine standardization fitted on one corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleEncoder {
    pub mean: StyleCode,
    pub std: StyleCode,
}

impl StyleEncoder {
    /// Fits mean and standard deviation of every feature over `raw`.
    /// Features with (near) zero spread keep unit scale.
    pub fn fit(raw: &[StyleCode]) -> Result<StyleEncoder> {
        if raw.is_empty() {
            return Err(Error::invalid("style-encoder", "empty corpus"));
        }
        let n = raw.len() as f64;
        let mut mean = [0.0; CODE_LEN];
        let mut std = [0.0; CODE_LEN];
        for j in 0..CODE_LEN {
            mean[j] = raw.iter().map(|c| c[j]).sum::<f64>() / n;
            let var = raw.iter().map(|c| (c[j] - mean[j]).powi(2)).sum::<f64>() / n;
            std[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(StyleEncoder { mean, std })
    }

    /// Fits on every image of `split`.
    pub fn fit_split(split: &Split) -> Result<StyleEncoder> {
        StyleEncoder::fit(&raw_codes(split))
    }

    pub fn standardize(&self, raw: &StyleCode) -> StyleCode {
        let mut out = [0.0; CODE_LEN];
        for j in 0..CODE_LEN {
            out[j] = (raw[j] - self.mean[j]) / self.std[j];
        }
        out
    }

    pub fn extract(&self, image: &[f64], height: usize, width: usize) -> StyleCode {
        self.standardize(&raw_style(image, height, width))
    }

    pub fn codes(&self, split: &Split) -> Vec<StyleCode> {
        raw_codes(split).iter().map(|c| self.standardize(c)).collect()
    }
}

pub fn raw_codes(split: &Split) -> Vec<StyleCode> {
    (0..split.len())
        .map(|i| raw_style(split.image(i), split.height, split.width))
        .collect()
}

/// Everything the cluster stage produces: the frozen encoder and the
/// fitted centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub encoder: StyleEncoder,
    pub centroids: Centroids,
}

impl ClusterModel {
    /// Fits the encoder and k-means on the unlabeled target split.
    pub fn fit(target: &Split, config: &KmeansConfig) -> Result<ClusterModel> {
        let encoder = StyleEncoder::fit_split(target)?;
        let codes = encoder.codes(target);
        let centroids = kmeans_fit(&codes, config)?;
        Ok(ClusterModel { encoder, centroids })
    }

    pub fn k(&self) -> usize {
        self.centroids.k()
    }

    pub fn code(&self, image: &[f64], height: usize, width: usize) -> StyleCode {
        self.encoder.extract(image, height, width)
    }

    pub fn assign_split(&self, split: &Split) -> Vec<usize> {
        self.encoder
            .codes(split)
            .iter()
            .map(|c| assign(c, &self.centroids))
            .collect()
    }

    pub fn to_container(&self, classes: usize) -> Container {
        let k = self.k();
        let mut c = Container::new("centroids", classes, k);
        c.iteration = self.centroids.iterations as u64;
        c.push("centroids", &[k, CODE_LEN], self.centroids.points.concat());
        c.push("encoder/mean", &[CODE_LEN], self.encoder.mean.to_vec());
        c.push("encoder/std", &[CODE_LEN], self.encoder.std.to_vec());
        c.push("fit/inertia", &[], vec![self.centroids.inertia]);
        c.push(
            "fit/inertia_history",
            &[self.centroids.inertia_history.len()],
            self.centroids.inertia_history.clone(),
        );
        c.push(
            "fit/seed",
            &[2],
            vec![(self.centroids.seed >> 32) as f64, (self.centroids.seed & 0xffff_ffff) as f64],
        );
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<ClusterModel> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if c.kind != "centroids" {
            return Err(fail(format!("expected a centroids file, found {}", c.kind)));
        }
        let cent = c.require("centroids", path)?;
        if cent.shape.len() != 2 || cent.shape[1] != CODE_LEN || cent.shape[0] == 0 {
            return Err(fail(format!("bad centroid shape {:?}", cent.shape)));
        }
        let arr = |name: &str| -> Result<StyleCode> {
            let e = c.require(name, path)?;
            e.data
                .as_slice()
                .try_into()
                .map_err(|_| fail(format!("{name} must hold {CODE_LEN} values")))
        };
        let seed = c.require("fit/seed", path)?;
        if seed.data.len() != 2 {
            return Err(fail("fit/seed must hold 2 values".into()));
        }
        Ok(ClusterModel {
            encoder: StyleEncoder {
                mean: arr("encoder/mean")?,
                std: arr("encoder/std")?,
            },
            centroids: Centroids {
                points: cent.data.chunks(CODE_LEN).map(<[f64]>::to_vec).collect(),
                inertia: c.require("fit/inertia", path)?.data[0],
                inertia_history: c.require("fit/inertia_history", path)?.data.clone(),
                iterations: c.iteration as usize,
                seed: ((seed.data[0] as u64) << 32) | seed.data[1] as u64,
            },
        })
    }

    pub fn write(&self, path: &Path, classes: usize) -> Result<()> {
        self.to_container(classes).write(path)
    }

    pub fn read(path: &Path) -> Result<ClusterModel> {
        ClusterModel::from_container(&Container::read(path)?, path)
    }
}

/// Agreement between clusters and the hidden generating domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    /// `counts[k][d]`: images of domain `d` assigned to cluster `k`.
    pub counts: Vec<Vec<usize>>,
    /// `Σ_k max_d counts[k][d] / total`.
    pub purity: f64,
}

pub fn cluster_report(
    assignments: &[usize],
    provenance: &[usize],
    k: usize,
    domains: usize,
) -> Result<ClusterReport> {
    if assignments.len() != provenance.len() || assignments.is_empty() {
        return Err(Error::invalid(
            "cluster-report",
            "assignments and provenance must be non-empty and of equal length",
        ));
    }
    let mut counts = vec![vec![0; domains]; k];
    for (&a, &p) in assignments.iter().zip(provenance) {
        if a >= k || p >= domains {
            return Err(Error::invalid("cluster-report", "index out of range"));
        }
        counts[a][p] += 1;
    }
    let hit: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    Ok(ClusterReport {
        purity: hit as f64 / assignments.len() as f64,
        counts,
    })
}
