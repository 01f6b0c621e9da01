//! Meta-training of the fused model and entropy-driven online adaptation.
//!
//! One training iteration:
//!
//! 1. inner step on target images `D_in`:
//!    `θ⁺ = θ − α ∇_θ L_ent(fused(D_in; θ))`
//! 2. outer loss on a source batch and a target batch `D_out`, evaluated
//!    at `θ⁺`: `L_out = L_seg + λ₂·L_fadv + δ·L_ent`
//! 3. `θ ← θ − lr·SGD(∇_θ L_out)`; in exact mode the gradient flows
//!    through `θ⁺` back into the inner gradient (second order), in
//!    first-order mode the inner gradient is a constant
//! 4. discriminator step on the detached source and fused predictions.
//!
//! `θ` holds the conv weights of the segmentation network and, with
//! hypernetwork fusion, the hypernetwork. CDBN layers stay frozen.

use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, grad_graph, no_grad, Tensor};
use crate::bundle::{ModelBundle, Stage};
use crate::cluster::{ClusterModel, StyleCode};
use crate::error::{Error, Result};
use crate::fuse::{
    code_tensor, fixed_weights, fuse_adv_loss, fuse_d_loss, fuse_objective, fused_prediction,
    weight_entropies, FuseConfig, Fusion, HyperOptim,
};
use crate::nn::{entropy_loss, seg_cross_entropy, OptimConfig, PolySchedule};
use crate::rng;
use crate::split::{disc_step, draw, source_batch};
use crate::synthdata::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MamlMode {
    /// Differentiate through the inner gradient.
    Exact,
    /// Treat the inner gradient as a constant.
    FirstOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub iters: usize,
    /// Inner-step rate α.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub inner_batch: usize,
    pub mode: MamlMode,
    /// Weight δ of the outer entropy term.
    pub delta: f64,
    /// Online-update rate η; defaults to the last rate of the stage's
    /// polynomial schedule.
    pub online_lr: Option<f64>,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            iters: 200,
            inner_lr: 2.5e-4,
            inner_steps: 1,
            inner_batch: 4,
            mode: MamlMode::Exact,
            delta: 1e-4,
            online_lr: None,
        }
    }
}

impl MetaConfig {
    pub fn eta(&self, optim: &OptimConfig) -> f64 {
        self.online_lr
            .unwrap_or_else(|| optim.schedule(self.iters).lr(self.iters.saturating_sub(1)))
    }
}

/// Inputs of the fuse and meta stages. Contains no evaluation truth.
#[derive(Debug, Clone, Copy)]
pub struct StageData<'a> {
    pub source: &'a Split,
    pub target: &'a Split,
    /// Style codes of `target`, in order.
    pub target_codes: &'a [StyleCode],
    pub cluster: &'a ClusterModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedLogRow {
    pub iter: usize,
    pub l_in: f64,
    pub l_seg: f64,
    pub l_fadv: f64,
    pub l_ent: f64,
    pub l_out: f64,
    pub l_fd: f64,
    pub lr: f64,
    pub inner_lr: f64,
    pub mean_weight_entropy: f64,
    pub max_weight_entropy: f64,
}

/// Branch-weight rule of a fused model.
#[derive(Debug, Clone, Copy)]
pub struct Fuser<'a> {
    pub fusion: Fusion,
    pub cluster: &'a ClusterModel,
    pub temperature: f64,
}

impl Fuser<'_> {
    /// Weights `(N, K)`; `hyper` substitutes the hypernetwork parameters.
    pub fn weights(&self, bundle: &ModelBundle, hyper: &[Tensor], codes: &[StyleCode]) -> Result<Tensor> {
        match self.fusion {
            Fusion::Hyper => bundle.hyper.forward_with(hyper, &code_tensor(codes)),
            f => fixed_weights(f, codes, &self.cluster.centroids, self.temperature),
        }
    }

    /// Parameters adapted by training and online updates.
    pub fn theta(&self, bundle: &ModelBundle) -> Vec<Tensor> {
        let mut t = bundle.seg.conv_params().tensors().to_vec();
        if self.fusion == Fusion::Hyper {
            t.extend_from_slice(bundle.hyper.params().tensors());
        }
        t
    }

    pub fn set_theta(&self, bundle: &mut ModelBundle, mut theta: Vec<Tensor>) {
        let hyper = theta.split_off(bundle.seg.conv_params().len());
        bundle.seg.conv_params_mut().set_all(theta);
        if self.fusion == Fusion::Hyper {
            bundle.hyper.params_mut().set_all(hyper);
        }
    }

    /// Fused class probabilities of `x` under parameters `theta`.
    pub fn predict(&self, bundle: &ModelBundle, theta: &[Tensor], x: &Tensor, codes: &[StyleCode]) -> Result<(Tensor, Tensor)> {
        let n_conv = bundle.seg.conv_params().len();
        let w = self.weights(bundle, &theta[n_conv..], codes)?;
        let p = fused_prediction(&bundle.seg, &theta[..n_conv], x, &w)?;
        Ok((p, w))
    }
}

fn check_stage_data(bundle: &ModelBundle, data: &StageData<'_>) -> Result<()> {
    if data.target_codes.len() != data.target.len() {
        return Err(Error::invalid("fuse", "one style code per target image required"));
    }
    if data.cluster.k() != bundle.seg.clusters() {
        return Err(Error::invalid(
            "fuse",
            format!("{} centroids for a network with {} target banks", data.cluster.k(), bundle.seg.clusters()),
        ));
    }
    if data.source.labels.is_none() || data.target.is_empty() {
        return Err(Error::invalid("fuse", "need a labeled source and a non-empty target"));
    }
    Ok(())
}

fn inner_step(
    fuser: &Fuser<'_>,
    bundle: &ModelBundle,
    theta: &[Tensor],
    x: &Tensor,
    codes: &[StyleCode],
    meta: &MetaConfig,
) -> Result<(Vec<Tensor>, f64)> {
    let mut cur = theta.to_vec();
    let mut first = None;
    for _ in 0..meta.inner_steps {
        let (p, _) = fuser.predict(bundle, &cur, x, codes)?;
        let l_in = entropy_loss(&p)?;
        first.get_or_insert(l_in.item());
        let g = match meta.mode {
            MamlMode::Exact => grad_graph(&l_in, &cur)?,
            MamlMode::FirstOrder => grad(&l_in, &cur)?,
        };
        cur = cur
            .iter()
            .zip(&g)
            .map(|(t, g)| t.sub(&g.scale(meta.inner_lr)))
            .collect::<Result<_>>()?;
    }
    Ok((cur, first.unwrap_or(f64::NAN)))
}

/// Fuse-stage training, with the MAML inner/outer structure when `meta`
/// is given. Resumes from `bundle.iteration` if the bundle is already in
/// the matching stage.
pub fn train_fused(
    bundle: &mut ModelBundle,
    data: &StageData<'_>,
    fuse: &FuseConfig,
    meta: Option<&MetaConfig>,
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<FusedLogRow>> {
    check_stage_data(bundle, data)?;
    if let Some(m) = meta {
        if !(m.inner_lr >= 0.0) || !(m.delta >= 0.0) || m.inner_batch == 0 {
            return Err(Error::invalid("meta", "need α ≥ 0, δ ≥ 0 and a non-empty inner batch"));
        }
    }
    let stage = if meta.is_some() { Stage::Meta } else { Stage::Fuse };
    if bundle.stage != stage {
        let fresh_hyper = matches!(bundle.stage, Stage::Init | Stage::Supervised | Stage::Split);
        bundle.begin_stage(stage, optim.sgd(), optim.adam());
        if fresh_hyper && fuse.fusion == Fusion::Hyper && fuse.warm_start_steps > 0 {
            bundle.hyper.fit_assignments(
                data.target_codes,
                &data.cluster.centroids,
                fuse.warm_start_steps,
                fuse.warm_start_lr,
            )?;
        }
    }
    let iters = meta.map_or(fuse.iters, |m| m.iters);
    let fuser = Fuser {
        fusion: fuse.fusion,
        cluster: data.cluster,
        temperature: fuse.temperature,
    };
    let sched = optim.schedule(iters);
    let dsched = optim.disc_schedule(iters);
    let n_conv = bundle.seg.conv_params().len();
    let mut log = Vec::new();
    for i in bundle.iteration as usize..iters {
        let theta = fuser.theta(bundle);
        let lr = sched.lr(i);

        let (theta_plus, l_in) = match meta {
            Some(m) => {
                let idx = draw(&mut rng::stream(seed, "meta-inner", i as u64), data.target.len(), m.inner_batch);
                let codes: Vec<StyleCode> = idx.iter().map(|&j| data.target_codes[j]).collect();
                inner_step(&fuser, bundle, &theta, &data.target.batch(&idx), &codes, m)?
            }
            None => (theta.clone(), f64::NAN),
        };

        let (xs, ys) = source_batch(data.source, seed, "fuse-source", i, fuse.source_batch)?;
        let idx = draw(&mut rng::stream(seed, "fuse-target", i as u64), data.target.len(), fuse.target_batch);
        let codes: Vec<StyleCode> = idx.iter().map(|&j| data.target_codes[j]).collect();
        let xt = data.target.batch(&idx);

        let ps = bundle.seg.forward_with(&theta_plus[..n_conv], &xs, 0)?;
        let l_seg = seg_cross_entropy(&ps, &ys)?;
        let (fused, w) = fuser.predict(bundle, &theta_plus, &xt, &codes)?;
        let l_fadv = fuse_adv_loss(&bundle.disc, &fused)?;
        let mut l_out = fuse_objective(&l_seg, &l_fadv, fuse.lambda2)?;
        let mut l_ent = f64::NAN;
        if let Some(m) = meta {
            let e = entropy_loss(&fused)?;
            l_ent = e.item();
            l_out = l_out.add(&e.scale(m.delta))?;
        }
        let mut grads = grad(&l_out, &theta)?;
        let mut params = theta;
        match fuse.hyper_optim {
            HyperOptim::Sgd { lr_scale } => {
                let lrs: Vec<f64> = (0..params.len())
                    .map(|j| if j < n_conv { lr } else { lr * lr_scale })
                    .collect();
                bundle.gen_opt.step_each(&mut params, &grads, &lrs)?;
            }
            HyperOptim::Adam { lr: hyper_lr } => {
                let mut hyper = params.split_off(n_conv);
                let hyper_grads = grads.split_off(n_conv);
                bundle.gen_opt.step(&mut params, &grads, lr)?;
                if !hyper.is_empty() {
                    let hlr = PolySchedule { base_lr: hyper_lr, ..sched }.lr(i);
                    bundle.hyper_opt.step(&mut hyper, &hyper_grads, hlr)?;
                }
                params.extend(hyper);
            }
        }
        fuser.set_theta(bundle, params);

        let l_fd = fuse_d_loss(&bundle.disc, &ps, &fused)?;
        disc_step(bundle, &l_fd, dsched.lr(i))?;
        bundle.iteration = i as u64 + 1;

        let ents = weight_entropies(&w);
        log.push(FusedLogRow {
            iter: i,
            l_in,
            l_seg: l_seg.item(),
            l_fadv: l_fadv.item(),
            l_ent,
            l_out: l_out.item(),
            l_fd: l_fd.item(),
            lr,
            inner_lr: meta.map_or(f64::NAN, |m| m.inner_lr),
            mean_weight_entropy: ents.iter().sum::<f64>() / ents.len() as f64,
            max_weight_entropy: ents.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(log)
}

/// MAML training of the fused model.
pub fn train_meta(
    bundle: &mut ModelBundle,
    data: &StageData<'_>,
    fuse: &FuseConfig,
    meta: &MetaConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<FusedLogRow>> {
    train_fused(bundle, data, fuse, Some(meta), optim, seed)
}

/// Per-pixel argmax of `(N, M, H, W)` probabilities; ties go to the lower
/// class.
pub fn argmax_classes(probs: &Tensor) -> Vec<u8> {
    let s = probs.shape();
    let (n, m, hw) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..m {
                if d[(i * m + c) * hw + p] > d[(i * m + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    out
}

/// What happened to one image of an online stream.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineStep {
    pub image: usize,
    /// Prediction recorded before this image's own update.
    pub prediction: Vec<u8>,
    pub entropy_before: f64,
    /// Entropy of the same image after the update (equal to
    /// `entropy_before` when updates are off).
    pub entropy_after: f64,
}

/// Streams `order` through the fused model. For every image the fused
/// prediction is recorded first, then `θ ← θ − η ∇_θ L_ent` on that image.
/// Updates accumulate over the stream; CDBN layers never change.
pub fn online_update(
    bundle: &mut ModelBundle,
    fuser: &Fuser<'_>,
    split: &Split,
    codes: &[StyleCode],
    order: &[usize],
    eta: f64,
) -> Result<Vec<OnlineStep>> {
    if codes.len() != split.len() {
        return Err(Error::invalid("online", "one style code per image required"));
    }
    let mut out = Vec::with_capacity(order.len());
    for &i in order {
        if i >= split.len() {
            return Err(Error::invalid("online", format!("image {i} out of range")));
        }
        let x = split.batch(&[i]);
        let code = [codes[i]];
        let theta = fuser.theta(bundle);
        let (p, _) = fuser.predict(bundle, &theta, &x, &code)?;
        let l = entropy_loss(&p)?;
        let prediction = argmax_classes(&p);
        let before = l.item();
        let mut after = before;
        if eta != 0.0 {
            let g = grad(&l, &theta)?;
            let next: Vec<Tensor> = theta
                .iter()
                .zip(&g)
                .map(|(t, g)| Ok(t.sub(&g.scale(eta))?.detach().to_param()))
                .collect::<Result<_>>()?;
            fuser.set_theta(bundle, next);
            let theta = fuser.theta(bundle);
            after = no_grad(|| -> Result<f64> {
                let (p, _) = fuser.predict(bundle, &theta, &x, &code)?;
                Ok(entropy_loss(&p)?.item())
            })?;
        }
        out.push(OnlineStep {
            image: i,
            prediction,
            entropy_before: before,
            entropy_after: after,
        });
    }
    Ok(out)
}
