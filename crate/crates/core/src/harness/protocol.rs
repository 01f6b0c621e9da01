//! The staged protocol: data, cluster, split, then fuse (with or without
//! MAML), evaluation and the online pass. Every stage reads its
//! predecessor's artifact from disk and writes its own, so a run can be
//! stopped and resumed between stages.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{ExperimentConfig, StageSeeds, StreamOrder};
use super::eval::{evaluate, EvalMode};
use super::metrics::ConfusionMatrix;
use super::report::{self, MetricRow, OnlineRow};
use crate::bundle::{ModelBundle, Stage};
use crate::cluster::{cluster_report, ClusterModel, KmeansConfig, StyleCode};
use crate::error::{Error, Result};
use crate::fuse::{code_tensor, fixed_weights, Fusion};
use crate::meta::{online_update, train_fused, Fuser, StageData};
use crate::nn::SegNetConfig;
use crate::split::{train_split, train_supervised};
use crate::synthdata::{make_dataset, Dataset, DatasetSpec, NUM_CLASSES};

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn seeds(&self) -> PathBuf {
        self.root.join("seeds.csv")
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn centroids(&self) -> PathBuf {
        self.root.join("cluster/centroids.bin")
    }
    pub fn assignments(&self) -> PathBuf {
        self.root.join("cluster/assignments.csv")
    }
    pub fn codes(&self) -> PathBuf {
        self.root.join("cluster/codes.csv")
    }
    pub fn cluster_report(&self) -> PathBuf {
        self.root.join("cluster/report.csv")
    }
    /// Checkpoint of a training stage: `source_only`, `split`, `fuse` or
    /// `meta`.
    pub fn checkpoint(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("checkpoint.bin")
    }
    pub fn log(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("log.csv")
    }
    pub fn weights(&self, stage: &str) -> PathBuf {
        self.root.join(stage).join("weights.csv")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn online(&self, on: bool) -> PathBuf {
        self.root.join(if on { "online_on.csv" } else { "online_off.csv" })
    }
}

fn missing(path: &Path, what: &str) -> Error {
    Error::MissingArtifact {
        path: path.to_path_buf(),
        what: what.into(),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(missing(path, what))
    }
}

/// Generates the dataset and writes it to `dir`.
pub fn gen_data(spec: &DatasetSpec, seed: u64, dir: &Path) -> Result<Dataset> {
    let ds = make_dataset(spec, seed)?;
    ds.write_dir(dir)?;
    Ok(ds)
}

pub fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::read_dir(dir)
}

/// Output paths of the cluster stage.
#[derive(Debug, Clone)]
pub struct ClusterPaths {
    pub centroids: PathBuf,
    pub assignments: PathBuf,
    pub codes: PathBuf,
    /// Cluster-by-domain counts and purity; written only when the
    /// dataset carries its eval-only truth.
    pub report: Option<PathBuf>,
}

/// Fits the style encoder and k-means on the target split; writes the
/// centroids, the target assignments (with the eval-only domain column
/// when truth is available) and the codes of every unlabeled split.
pub fn cluster_stage(
    ds: &Dataset,
    k: usize,
    kmeans: &KmeansConfig,
    paths: &ClusterPaths,
) -> Result<ClusterModel> {
    let cfg = KmeansConfig { k, ..*kmeans };
    let model = ClusterModel::fit(&ds.target, &cfg)?;
    model.write(&paths.centroids, NUM_CLASSES)?;
    let assign = model.assign_split(&ds.target);
    let names = ds.truth().ok().map(|t| {
        let t = &t.eval_only().target;
        t.provenance.iter().map(|&d| t.domains[d].clone()).collect::<Vec<_>>()
    });
    report::write_assignments(&paths.assignments, &assign, names.as_deref())?;
    let mut rows = Vec::new();
    for split in [&ds.target, &ds.target_test, &ds.open] {
        for (i, c) in model.encoder.codes(split).into_iter().enumerate() {
            rows.push((split.name.as_str(), i, crate::cluster::assign(&c, &model.centroids), c));
        }
    }
    report::write_codes(&paths.codes, &rows)?;
    if let (Some(path), Ok(truth)) = (&paths.report, ds.truth()) {
        let t = &truth.eval_only().target;
        let r = cluster_report(&assign, &t.provenance, k, t.domains.len())?;
        report::write_cluster_report(path, &r, &t.domains)?;
    }
    Ok(model)
}

pub fn load_cluster(path: &Path) -> Result<ClusterModel> {
    require(path, "centroids (run cluster first)")?;
    ClusterModel::read(path)
}

fn fresh_bundle(cfg: &ExperimentConfig, seeds: &StageSeeds) -> ModelBundle {
    ModelBundle::new(
        SegNetConfig::new(NUM_CLASSES, cfg.cluster.k),
        cfg.fuse.hyper_hidden,
        seeds.init,
    )
}

/// `out` when it already holds a checkpoint of `stage`.
fn resume(out: &Path, stage: Stage) -> Result<Option<ModelBundle>> {
    if out.exists() {
        let b = ModelBundle::load(out)?;
        if b.stage == stage {
            return Ok(Some(b));
        }
    }
    Ok(None)
}

fn load_split(path: &Path) -> Result<ModelBundle> {
    require(path, "split checkpoint (run train-split first)")?;
    let b = ModelBundle::load(path)?;
    if b.stage != Stage::Split {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected a split checkpoint, found stage {}", b.stage.name()),
        });
    }
    Ok(b)
}

/// Source-only reference training on bank 0.
pub fn source_only_stage(cfg: &ExperimentConfig, ds: &Dataset, out: &Path, log: &Path) -> Result<ModelBundle> {
    let seeds = cfg.seeds();
    let mut b = resume(out, Stage::Supervised)?.unwrap_or_else(|| fresh_bundle(cfg, &seeds));
    let resumed = b.stage == Stage::Supervised && b.iteration > 0;
    let rows = train_supervised(&mut b, &ds.source, &cfg.split, &cfg.optim, seeds.split)?;
    report::write_rows(log, &rows, resumed)?;
    b.save(out)?;
    Ok(b)
}

/// Split training from a fresh initialization.
pub fn split_stage(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cluster: &ClusterModel,
    out: &Path,
    log: &Path,
) -> Result<ModelBundle> {
    if cluster.k() != cfg.cluster.k {
        return Err(Error::Config(format!(
            "centroids hold {} clusters but cluster.k = {}",
            cluster.k(),
            cfg.cluster.k
        )));
    }
    let seeds = cfg.seeds();
    let mut b = resume(out, Stage::Split)?.unwrap_or_else(|| fresh_bundle(cfg, &seeds));
    let resumed = b.stage == Stage::Split && b.iteration > 0;
    let assign = cluster.assign_split(&ds.target);
    let rows = train_split(&mut b, &ds.source, &ds.target, &assign, &cfg.split, &cfg.optim, seeds.split)?;
    report::write_rows(log, &rows, resumed)?;
    b.save(out)?;
    Ok(b)
}

/// Output paths of a fuse or meta stage.
#[derive(Debug, Clone)]
pub struct FusePaths {
    pub from: PathBuf,
    pub out: PathBuf,
    pub log: PathBuf,
    pub weights: PathBuf,
}

/// Fuse training from a split checkpoint, with MAML when `maml` is set.
/// Writes the per-iteration log and the final branch weights of every
/// target image.
pub fn fuse_stage(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    cluster: &ClusterModel,
    maml: bool,
    paths: &FusePaths,
) -> Result<ModelBundle> {
    let stage = if maml { Stage::Meta } else { Stage::Fuse };
    let mut b = match resume(&paths.out, stage)? {
        Some(b) => b,
        None => load_split(&paths.from)?,
    };
    let resumed = b.stage == stage && b.iteration > 0;
    let codes = cluster.encoder.codes(&ds.target);
    let data = StageData {
        source: &ds.source,
        target: &ds.target,
        target_codes: &codes,
        cluster,
    };
    let meta = maml.then_some(&cfg.meta);
    let rows = train_fused(&mut b, &data, &cfg.fuse, meta, &cfg.optim, cfg.seeds().fuse)?;
    report::write_rows(&paths.log, &rows, resumed)?;
    let w = stage_weights(&b, cfg.fuse.fusion, cluster, &codes, cfg.fuse.temperature)?;
    let assign: Vec<usize> = codes.iter().map(|c| crate::cluster::assign(c, &cluster.centroids)).collect();
    report::write_weights(&paths.weights, &w, &assign)?;
    b.save(&paths.out)?;
    Ok(b)
}

fn stage_weights(
    b: &ModelBundle,
    fusion: Fusion,
    cluster: &ClusterModel,
    codes: &[StyleCode],
    temperature: f64,
) -> Result<crate::autodiff::Tensor> {
    crate::autodiff::no_grad(|| match fusion {
        Fusion::Hyper => b.hyper.forward(&code_tensor(codes)),
        f => fixed_weights(f, codes, &cluster.centroids, temperature),
    })
}

/// Confusion matrices of `mode` on the target test split and the open
/// split.
pub fn eval_stage(
    model: &str,
    b: &ModelBundle,
    ds: &Dataset,
    cluster: Option<&ClusterModel>,
    mode: EvalMode,
    temperature: f64,
) -> Result<Vec<MetricRow>> {
    let truth = ds.truth()?.eval_only();
    let mut rows = Vec::new();
    for (split, t) in [(&ds.target_test, &truth.target_test), (&ds.open, &truth.open)] {
        rows.push(MetricRow {
            model: model.into(),
            split: split.name.clone(),
            mode: mode.name(),
            conf: evaluate(b, split, t, mode, cluster, temperature)?,
        });
    }
    Ok(rows)
}

/// Result of streaming the open split through a fused model.
#[derive(Debug, Clone)]
pub struct OnlineResult {
    pub rows: Vec<OnlineRow>,
    /// Accumulated over the recorded (pre-update) predictions.
    pub conf: ConfusionMatrix,
    pub bundle: ModelBundle,
}

/// Online pass over the open split in `order`; `eta = None` keeps the
/// model frozen.
pub fn eval_online(
    b: &ModelBundle,
    ds: &Dataset,
    cluster: &ClusterModel,
    fusion: Fusion,
    temperature: f64,
    order: StreamOrder,
    eta: Option<f64>,
) -> Result<OnlineResult> {
    let truth = &ds.truth()?.eval_only().open;
    let split = &ds.open;
    let codes = cluster.encoder.codes(split);
    let fuser = Fuser {
        fusion,
        cluster,
        temperature,
    };
    let mut bundle = b.clone();
    let steps = online_update(&mut bundle, &fuser, split, &codes, &order.indices(split.len()), eta.unwrap_or(0.0))?;
    let hw = split.height * split.width;
    let mut conf = ConfusionMatrix::new(NUM_CLASSES);
    let mut rows = Vec::with_capacity(steps.len());
    for s in steps {
        let mut one = ConfusionMatrix::new(NUM_CLASSES);
        one.add(truth.labels_of(s.image, hw), &s.prediction)?;
        conf.merge(&one);
        rows.push(OnlineRow {
            image_id: s.image,
            entropy_before: s.entropy_before,
            entropy_after: s.entropy_after,
            iou: one.iou(),
        });
    }
    Ok(OnlineResult { rows, conf, bundle })
}

/// What a finished protocol run leaves behind, besides its files.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub layout: RunLayout,
    pub metrics: Vec<MetricRow>,
    pub online_off: ConfusionMatrix,
    pub online_on: ConfusionMatrix,
    pub final_stage: Stage,
}

impl Artifacts {
    pub fn miou(&self, model: &str, split: &str) -> Option<f64> {
        self.metrics
            .iter()
            .find(|r| r.model == model && r.split == split)
            .map(|r| r.conf.miou())
    }
}

/// Runs every stage in order under `out`. Stages whose outputs already
/// exist are loaded instead of recomputed; a partially trained checkpoint
/// of the running stage is resumed.
pub fn run_protocol(cfg: &ExperimentConfig, out: &Path) -> Result<Artifacts> {
    cfg.validate()?;
    let layout = RunLayout::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let text = cfg.to_toml()?;
    fs::write(layout.config(), text).map_err(|e| Error::io(layout.config(), e))?;
    let seeds = cfg.seeds();
    report::write_rows(
        &layout.seeds(),
        &seeds
            .rows()
            .iter()
            .map(|&(stage, seed)| SeedRow { stage, seed })
            .collect::<Vec<_>>(),
        false,
    )?;

    let ds = if layout.data().join("manifest.toml").exists() {
        load_data(&layout.data())?
    } else {
        gen_data(&cfg.dataset, seeds.data, &layout.data())?
    };
    let cluster = if layout.centroids().exists() {
        load_cluster(&layout.centroids())?
    } else {
        let kmeans = KmeansConfig {
            k: cfg.cluster.k,
            seed: seeds.cluster,
            max_iter: cfg.cluster.max_iter,
            tol: cfg.cluster.tol,
        };
        let paths = ClusterPaths {
            centroids: layout.centroids(),
            assignments: layout.assignments(),
            codes: layout.codes(),
            report: Some(layout.cluster_report()),
        };
        cluster_stage(&ds, cfg.cluster.k, &kmeans, &paths)?
    };

    let mut metrics = Vec::new();
    if cfg.protocol.source_only {
        let b = finished_or(&layout, "source_only", Stage::Supervised, cfg.split.iters, || {
            source_only_stage(cfg, &ds, &layout.checkpoint("source_only"), &layout.log("source_only"))
        })?;
        metrics.extend(eval_stage("source_only", &b, &ds, None, EvalMode::SourceBank, 1.0)?);
    }
    let split = finished_or(&layout, "split", Stage::Split, cfg.split.iters, || {
        split_stage(cfg, &ds, &cluster, &layout.checkpoint("split"), &layout.log("split"))
    })?;
    metrics.extend(eval_stage("split", &split, &ds, Some(&cluster), EvalMode::Routed, 1.0)?);

    let (name, stage, iters) = if cfg.protocol.maml {
        ("meta", Stage::Meta, cfg.meta.iters)
    } else {
        ("fuse", Stage::Fuse, cfg.fuse.iters)
    };
    let fused = finished_or(&layout, name, stage, iters, || {
        let paths = FusePaths {
            from: layout.checkpoint("split"),
            out: layout.checkpoint(name),
            log: layout.log(name),
            weights: layout.weights(name),
        };
        fuse_stage(cfg, &ds, &cluster, cfg.protocol.maml, &paths)
    })?;
    let mode = EvalMode::Fused(cfg.fuse.fusion);
    metrics.extend(eval_stage(name, &fused, &ds, Some(&cluster), mode, cfg.fuse.temperature)?);

    let order = cfg.protocol.stream_order;
    let off = eval_online(&fused, &ds, &cluster, cfg.fuse.fusion, cfg.fuse.temperature, order, None)?;
    let eta = cfg.meta.eta(&cfg.optim);
    let on = eval_online(&fused, &ds, &cluster, cfg.fuse.fusion, cfg.fuse.temperature, order, Some(eta))?;
    report::write_online(&layout.online(false), &off.rows)?;
    report::write_online(&layout.online(true), &on.rows)?;
    for (m, r) in [("online_off", &off), ("online_on", &on)] {
        metrics.push(MetricRow {
            model: format!("{name}_{m}"),
            split: "open".into(),
            mode: "stream".into(),
            conf: r.conf.clone(),
        });
    }
    report::write_metrics(&layout.metrics(), &metrics)?;
    Ok(Artifacts {
        layout,
        metrics,
        online_off: off.conf,
        online_on: on.conf,
        final_stage: stage,
    })
}

#[derive(serde::Serialize)]
struct SeedRow {
    stage: &'static str,
    seed: u64,
}

/// Loads a completed checkpoint of `stage`, or runs `train`.
fn finished_or(
    layout: &RunLayout,
    name: &str,
    stage: Stage,
    iters: usize,
    train: impl FnOnce() -> Result<ModelBundle>,
) -> Result<ModelBundle> {
    let path = layout.checkpoint(name);
    if path.exists() {
        let b = ModelBundle::load(&path)?;
        if b.stage == stage && b.iteration as usize >= iters {
            return Ok(b);
        }
    }
    train()
}
