use serde::{Deserialize, Serialize};

use super::metrics::ConfusionMatrix;
use crate::autodiff::no_grad;
use crate::bundle::ModelBundle;
use crate::cluster::ClusterModel;
use crate::error::{Error, Result};
use crate::fuse::Fusion;
use crate::meta::{argmax_classes, Fuser};
use crate::synthdata::{Split, Truth};

/// How a trained bundle turns a target image into a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Source branch only (the source-only baseline).
    SourceBank,
    /// The branch of the image's nearest centroid.
    Routed,
    /// Fused prediction with the given weighting rule.
    Fused(Fusion),
}

impl EvalMode {
    pub fn name(self) -> String {
        match self {
            EvalMode::SourceBank => "source_bank".into(),
            EvalMode::Routed => "routed".into(),
            EvalMode::Fused(f) => format!("fused_{}", f.name()),
        }
    }
}

const EVAL_BATCH: usize = 16;

/// Predicted class maps `(N·H·W)` for every image of `split`.
pub fn predict_split(
    bundle: &ModelBundle,
    split: &Split,
    mode: EvalMode,
    cluster: Option<&ClusterModel>,
    temperature: f64,
) -> Result<Vec<u8>> {
    let need_cluster = || {
        cluster.ok_or_else(|| Error::invalid("eval", format!("{} needs centroids", mode.name())))
    };
    no_grad(|| {
        let mut out = Vec::with_capacity(split.len() * split.height * split.width);
        let all: Vec<usize> = (0..split.len()).collect();
        for chunk in all.chunks(EVAL_BATCH) {
            match mode {
                EvalMode::SourceBank => {
                    out.extend(argmax_classes(&bundle.seg.predict(&split.batch(chunk), 0)?));
                }
                EvalMode::Routed => {
                    let c = need_cluster()?;
                    for &i in chunk {
                        let code = c.code(split.image(i), split.height, split.width);
                        let k = crate::cluster::assign(&code, &c.centroids);
                        out.extend(argmax_classes(&bundle.seg.predict(&split.batch(&[i]), k + 1)?));
                    }
                }
                EvalMode::Fused(f) => {
                    let c = need_cluster()?;
                    let fuser = Fuser {
                        fusion: f,
                        cluster: c,
                        temperature,
                    };
                    let codes: Vec<_> = chunk
                        .iter()
                        .map(|&i| c.code(split.image(i), split.height, split.width))
                        .collect();
                    let theta = fuser.theta(bundle);
                    let (p, _) = fuser.predict(bundle, &theta, &split.batch(chunk), &codes)?;
                    out.extend(argmax_classes(&p));
                }
            }
        }
        Ok(out)
    })
}

/// Confusion matrix of `mode` on `split` against its sealed truth.
pub fn evaluate(
    bundle: &ModelBundle,
    split: &Split,
    truth: &Truth,
    mode: EvalMode,
    cluster: Option<&ClusterModel>,
    temperature: f64,
) -> Result<ConfusionMatrix> {
    let pred = predict_split(bundle, split, mode, cluster, temperature)?;
    if truth.labels.len() != pred.len() {
        return Err(Error::invalid("eval", "truth does not match the split"));
    }
    let mut conf = ConfusionMatrix::new(bundle.seg.num_classes());
    conf.add(&truth.labels, &pred)?;
    Ok(conf)
}
