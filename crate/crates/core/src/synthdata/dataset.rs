use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scene::{gen_scene_sized, NUM_CLASSES};
use super::style::{apply_style, StyleTransform};
use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng;

/// One style domain and its share of a mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub transform: StyleTransform,
    pub weight: f64,
}

impl DomainSpec {
    pub fn new(name: &str, transform: StyleTransform, weight: f64) -> Self {
        DomainSpec {
            name: name.to_string(),
            transform,
            weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Counts {
    pub source: usize,
    /// Unlabeled compound-target images used for training.
    pub target: usize,
    /// Held-out compound-target images for evaluation.
    pub target_test: usize,
    pub open: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub width: usize,
    pub height: usize,
    pub source: DomainSpec,
    pub compound: Vec<DomainSpec>,
    pub open: Vec<DomainSpec>,
    pub counts: Counts,
}

impl Default for DatasetSpec {
    /// Identity-styled source; a compound target mixing a brightening gamma, a blue
    /// cast and sensor noise in equal parts; a washed-out open domain.
    fn default() -> Self {
        let third = 1.0 / 3.0;
        DatasetSpec {
            width: 32,
            height: 32,
            source: DomainSpec::new("source", StyleTransform::Identity, 1.0),
            compound: vec![
                DomainSpec::new("gamma", StyleTransform::Gamma { gamma: 0.5 }, third),
                DomainSpec::new(
                    "blue-cast",
                    StyleTransform::ColorCast {
                        gains: [0.7, 0.85, 1.4],
                    },
                    third,
                ),
                DomainSpec::new("noise", StyleTransform::AdditiveNoise { sigma: 0.08 }, third),
            ],
            open: vec![DomainSpec::new(
                "washed-out",
                StyleTransform::Chain {
                    steps: vec![
                        StyleTransform::Desaturate { rho: 0.15 },
                        StyleTransform::Contrast { c: 0.8 },
                    ],
                },
                1.0,
            )],
            counts: Counts {
                source: 200,
                target: 300,
                target_test: 120,
                open: 60,
            },
        }
    }
}

impl Default for Counts {
    fn default() -> Self {
        DatasetSpec::default().counts
    }
}

/// Images `(N, 3, H, W)` of one split, with labels `(N, H, W)` when the
/// split is labeled for training.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub images: Vec<f64>,
    pub labels: Option<Vec<u8>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.images.len() / self.image_len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected images into an `(n, 3, H, W)` constant tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(data, &[indices.len(), 3, self.height, self.width]).expect("consistent")
    }

    /// Labels of the selected images as an `(n, H, W)` tensor.
    pub fn label_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("split", format!("split {} has no labels", self.name)))?;
        Ok(label_tensor(labels, indices, self.height, self.width))
    }
}

pub(crate) fn label_tensor(labels: &[u8], indices: &[usize], h: usize, w: usize) -> Tensor {
    let hw = h * w;
    let mut data = Vec::with_capacity(indices.len() * hw);
    for &i in indices {
        data.extend(labels[i * hw..(i + 1) * hw].iter().map(|&l| f64::from(l)));
    }
    Tensor::new(data, &[indices.len(), h, w]).expect("consistent")
}

/// Ground truth withheld from every training path: the generating domain
/// of each image and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub domains: Vec<String>,
    pub provenance: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Truth {
    pub fn label_batch(&self, indices: &[usize], h: usize, w: usize) -> Tensor {
        label_tensor(&self.labels, indices, h, w)
    }

    pub fn labels_of(&self, i: usize, hw: usize) -> &[u8] {
        &self.labels[i * hw..(i + 1) * hw]
    }
}

/// Wrapper that keeps evaluation-only data out of casual reach. Training
/// code never receives a `Sealed` value; evaluation opens it explicitly.
#[derive(Debug, Clone, PartialEq)]
pub struct Sealed<T>(T);

impl<T> Sealed<T> {
    pub(crate) fn new(value: T) -> Self {
        Sealed(value)
    }

    pub fn eval_only(&self) -> &T {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTruth {
    pub target: Truth,
    pub target_test: Truth,
    pub open: Truth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub source: Split,
    pub target: Split,
    pub target_test: Split,
    pub open: Split,
    truth: Option<Sealed<EvalTruth>>,
}

impl Dataset {
    /// The sealed ground truth, if this dataset was generated or loaded
    /// together with it.
    pub fn truth(&self) -> Result<&Sealed<EvalTruth>> {
        self.truth.as_ref().ok_or_else(|| Error::MissingArtifact {
            path: "eval_only".into(),
            what: "evaluation truth was not loaded".into(),
        })
    }

    /// Copy without the sealed truth.
    pub fn without_truth(&self) -> Dataset {
        Dataset {
            truth: None,
            ..self.clone()
        }
    }
}

fn check_mixture(what: &str, specs: &[DomainSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::invalid("make-dataset", format!("empty {what} spec")));
    }
    if specs.iter().any(|s| !(s.weight > 0.0)) {
        return Err(Error::invalid("make-dataset", format!("{what} weights must be positive")));
    }
    let total: f64 = specs.iter().map(|s| s.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(
            "make-dataset",
            format!("{what} weights sum to {total}, expected 1"),
        ));
    }
    Ok(())
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let c = self.counts;
        if c.source == 0 || c.target == 0 || c.target_test == 0 || c.open == 0 {
            return Err(Error::invalid("make-dataset", "every split count must be positive"));
        }
        if self.width < 12 || self.height < 12 {
            return Err(Error::invalid("make-dataset", "images must be at least 12×12"));
        }
        check_mixture("compound", &self.compound)?;
        check_mixture("open", &self.open)
    }
}

fn pick(rng: &mut impl Rng, specs: &[DomainSpec]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, s) in specs.iter().enumerate() {
        acc += s.weight;
        if u < acc {
            return i;
        }
    }
    specs.len() - 1
}

fn render(spec: &DatasetSpec, seed: u64, tag: &str, n: usize, domains: &[DomainSpec]) -> (Split, Truth) {
    let mut images = Vec::with_capacity(n * 3 * spec.width * spec.height);
    let mut labels = Vec::with_capacity(n * spec.width * spec.height);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n as u64 {
        let d = if domains.len() == 1 {
            0
        } else {
            pick(&mut rng::stream(seed, &format!("{tag}-domain"), i), domains)
        };
        let scene = gen_scene_sized(
            rng::derive_seed(seed, &format!("{tag}-scene"), i),
            spec.width,
            spec.height,
        );
        let styled = apply_style(
            &scene,
            &domains[d].transform,
            rng::derive_seed(seed, &format!("{tag}-style"), i),
        );
        images.extend_from_slice(&styled.image);
        labels.extend_from_slice(&styled.labels);
        provenance.push(d);
    }
    let split = Split {
        name: tag.to_string(),
        height: spec.height,
        width: spec.width,
        images,
        labels: None,
    };
    let truth = Truth {
        domains: domains.iter().map(|d| d.name.clone()).collect(),
        provenance,
        labels,
    };
    (split, truth)
}

/// Generates every split of `spec` from `seed`. Each image draws from its
/// own stream keyed by (seed, split, index), so the result is bit-stable.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let c = spec.counts;
    let (mut source, src_truth) = render(spec, seed, "source", c.source, std::slice::from_ref(&spec.source));
    source.labels = Some(src_truth.labels);
    let (target, target_truth) = render(spec, seed, "target", c.target, &spec.compound);
    let (target_test, test_truth) = render(spec, seed, "target_test", c.target_test, &spec.compound);
    let (open, open_truth) = render(spec, seed, "open", c.open, &spec.open);
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        source,
        target,
        target_test,
        open,
        truth: Some(Sealed::new(EvalTruth {
            target: target_truth,
            target_test: test_truth,
            open: open_truth,
        })),
    })
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    classes: usize,
    splits: Vec<ManifestSplit>,
    spec: DatasetSpec,
}

#[derive(Serialize, Deserialize)]
struct ManifestSplit {
    name: String,
    count: usize,
    file: String,
    labeled: bool,
}

const EVAL_DIR: &str = "eval_only";

fn split_container(s: &Split) -> Container {
    let mut c = Container::new("split", NUM_CLASSES, 0);
    c.push("images", &[s.len(), 3, s.height, s.width], s.images.clone());
    if let Some(l) = &s.labels {
        c.push(
            "labels",
            &[s.len(), s.height, s.width],
            l.iter().map(|&v| f64::from(v)).collect(),
        );
    }
    c
}

fn to_labels(data: &[f64], path: &Path) -> Result<Vec<u8>> {
    data.iter()
        .map(|&v| {
            if v >= 0.0 && v < NUM_CLASSES as f64 && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("label {v} out of range"),
                })
            }
        })
        .collect()
}

fn read_split(dir: &Path, name: &str, spec: &DatasetSpec) -> Result<Split> {
    let path = dir.join(format!("{name}.bin"));
    let c = Container::read_kind(&path, "split")?;
    let images = c.require("images", &path)?;
    if images.shape.len() != 4 || images.shape[1..] != [3, spec.height, spec.width] {
        return Err(Error::Format {
            path,
            msg: format!("image shape {:?} does not match manifest", images.shape),
        });
    }
    let labels = match c.get("labels") {
        Some(l) => Some(to_labels(&l.data, &path)?),
        None => None,
    };
    Ok(Split {
        name: name.to_string(),
        height: spec.height,
        width: spec.width,
        images: images.data.clone(),
        labels,
    })
}

impl Dataset {
    /// Writes `manifest.toml`, one container per split and, when present,
    /// the sealed truth under `eval_only/`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let splits = [&self.source, &self.target, &self.target_test, &self.open];
        let manifest = Manifest {
            format: "metadapt-dataset-1".into(),
            seed: self.seed,
            classes: NUM_CLASSES,
            splits: splits
                .iter()
                .map(|s| ManifestSplit {
                    name: s.name.clone(),
                    count: s.len(),
                    file: format!("{}.bin", s.name),
                    labeled: s.labels.is_some(),
                })
                .collect(),
            spec: self.spec.clone(),
        };
        let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let path = dir.join("manifest.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for s in splits {
            split_container(s).write(&dir.join(format!("{}.bin", s.name)))?;
        }
        if let Some(truth) = &self.truth {
            let t = truth.eval_only();
            let eval = dir.join(EVAL_DIR);
            let mut c = Container::new("eval-truth", NUM_CLASSES, 0);
            let hw = [self.spec.height, self.spec.width];
            let mut prov = csv::Writer::from_path(eval_path(&eval, "provenance.csv")?)?;
            prov.write_record(["split", "sample_id", "domain"])?;
            for (name, truth) in [("target", &t.target), ("target_test", &t.target_test), ("open", &t.open)] {
                let n = truth.provenance.len();
                c.push(
                    format!("{name}/labels"),
                    &[n, hw[0], hw[1]],
                    truth.labels.iter().map(|&v| f64::from(v)).collect(),
                );
                for (i, &d) in truth.provenance.iter().enumerate() {
                    prov.write_record([name, &i.to_string(), &truth.domains[d]])?;
                }
            }
            prov.flush().map_err(|e| Error::io(eval.join("provenance.csv"), e))?;
            c.write(&eval.join("labels.bin"))?;
        }
        Ok(())
    }

    /// Loads a dataset directory. The sealed truth is loaded when its
    /// `eval_only/` files exist.
    pub fn read_dir(dir: &Path) -> Result<Dataset> {
        let path = dir.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact {
                    path: path.clone(),
                    what: "dataset manifest (run gen-data first)".into(),
                }
            } else {
                Error::io(&path, e)
            }
        })?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        let spec = manifest.spec;
        let source = read_split(dir, "source", &spec)?;
        let target = read_split(dir, "target", &spec)?;
        let target_test = read_split(dir, "target_test", &spec)?;
        let open = read_split(dir, "open", &spec)?;
        if source.labels.is_none() {
            return Err(Error::Format {
                path: dir.join("source.bin"),
                msg: "source split must be labeled".into(),
            });
        }
        let eval = dir.join(EVAL_DIR);
        let truth = if eval.join("labels.bin").exists() {
            Some(Sealed::new(read_truth(&eval, &spec, [&target, &target_test, &open])?))
        } else {
            None
        };
        Ok(Dataset {
            spec,
            seed: manifest.seed,
            source,
            target,
            target_test,
            open,
            truth,
        })
    }
}

fn eval_path(eval: &Path, file: &str) -> Result<std::path::PathBuf> {
    fs::create_dir_all(eval).map_err(|e| Error::io(eval, e))?;
    Ok(eval.join(file))
}

fn read_truth(eval: &Path, spec: &DatasetSpec, splits: [&Split; 3]) -> Result<EvalTruth> {
    let path = eval.join("labels.bin");
    let c = Container::read_kind(&path, "eval-truth")?;
    let prov_path = eval.join("provenance.csv");
    let mut rows: Vec<(String, usize, String)> = Vec::new();
    let mut rdr = csv::Reader::from_path(&prov_path)?;
    for rec in rdr.deserialize() {
        rows.push(rec?);
    }
    let mut out = Vec::new();
    for (name, mix, split) in [
        ("target", &spec.compound, splits[0]),
        ("target_test", &spec.compound, splits[1]),
        ("open", &spec.open, splits[2]),
    ] {
        let labels = to_labels(&c.require(&format!("{name}/labels"), &path)?.data, &path)?;
        let domains: Vec<String> = mix.iter().map(|d| d.name.clone()).collect();
        let mut provenance = Vec::new();
        for (_, _, d) in rows.iter().filter(|r| r.0 == name) {
            let idx = domains.iter().position(|x| x == d).ok_or_else(|| Error::Format {
                path: prov_path.clone(),
                msg: format!("unknown domain {d}"),
            })?;
            provenance.push(idx);
        }
        if provenance.len() != split.len() || labels.len() != split.len() * spec.width * spec.height {
            return Err(Error::Format {
                path: path.clone(),
                msg: format!("{name} truth does not match the split size"),
            });
        }
        out.push(Truth {
            domains,
            provenance,
            labels,
        });
    }
    let open = out.pop().expect("three");
    let target_test = out.pop().expect("three");
    let target = out.pop().expect("three");
    Ok(EvalTruth {
        target,
        target_test,
        open,
    })
}
