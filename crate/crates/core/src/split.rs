//! Split stage: supervised segmentation on the source plus adversarial
//! alignment of every cluster branch with the source output distribution.
//!
//! Each iteration draws a source batch (routed through bank 0) and a
//! target batch from one randomly chosen cluster `k` (routed through bank
//! `k + 1`). The generator minimizes `L_seg + λ₁·L_sadv` by SGD with a
//! polynomial schedule while the discriminator, whose parameters are held
//! fixed during that step, then minimizes its own loss with Adam.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad, Tensor};
use crate::bundle::{ModelBundle, Stage};
use crate::error::{Error, Result};
use crate::nn::{binary_cross_entropy, seg_cross_entropy, Discriminator, NormMode, OptimConfig};
use crate::rng;
use crate::synthdata::Split;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub iters: usize,
    pub lambda1: f64,
    pub source_batch: usize,
    pub target_batch: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            iters: 200,
            lambda1: 0.001,
            source_batch: 4,
            target_batch: 4,
        }
    }
}

/// One row of the split-stage log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitLogRow {
    pub iter: usize,
    pub l_seg: f64,
    pub l_sadv: f64,
    pub l_sd: f64,
    pub lr: f64,
}

/// `Σ_k −mean log D(G_k(x_t^k))` over the given branch outputs, with the
/// discriminator frozen.
pub fn multi_branch_adv_loss(d: &Discriminator, branch_preds: &[Tensor]) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for p in branch_preds {
        let term = binary_cross_entropy(&d.forward_frozen(p)?, true);
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("split-adv", "no target batch for any cluster"))
}

/// Source outputs labeled real, every branch output labeled fake. Inputs
/// are detached, so only the discriminator receives gradients.
pub fn discriminator_loss_split(
    d: &Discriminator,
    source_pred: &Tensor,
    branch_preds: &[Tensor],
) -> Result<Tensor> {
    if branch_preds.is_empty() {
        return Err(Error::invalid("split-d", "no target batch for any cluster"));
    }
    let mut total = binary_cross_entropy(&d.forward(&source_pred.detach())?, true);
    for p in branch_preds {
        total = total.add(&binary_cross_entropy(&d.forward(&p.detach())?, false))?;
    }
    Ok(total)
}

/// `L_seg + λ₁·L_sadv`.
pub fn split_objective(l_seg: &Tensor, l_sadv: &Tensor, lambda1: f64) -> Result<Tensor> {
    l_seg.add(&l_sadv.scale(lambda1))
}

/// `n` distinct indices below `len` when possible, otherwise `n` draws
/// with replacement.
pub(crate) fn draw(rng: &mut impl Rng, len: usize, n: usize) -> Vec<usize> {
    if len >= n {
        index::sample(rng, len, n).into_vec()
    } else {
        (0..n).map(|_| rng.random_range(0..len)).collect()
    }
}

pub(crate) fn source_batch(split: &Split, seed: u64, tag: &str, iter: usize, n: usize) -> Result<(Tensor, Tensor)> {
    let idx = draw(&mut rng::stream(seed, tag, iter as u64), split.len(), n);
    Ok((split.batch(&idx), split.label_batch(&idx)?))
}

fn members(assignments: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![Vec::new(); k];
    for (i, &a) in assignments.iter().enumerate() {
        m[a].push(i);
    }
    m
}

fn check_inputs(bundle: &ModelBundle, source: &Split, batch: usize) -> Result<()> {
    if source.labels.is_none() {
        return Err(Error::invalid("split", "source split must be labeled"));
    }
    if source.is_empty() || batch < 2 {
        return Err(Error::invalid("split", "need a non-empty source and batches of at least 2"));
    }
    if bundle.seg.num_classes() == 0 {
        return Err(Error::invalid("split", "network has no classes"));
    }
    Ok(())
}

fn enter(bundle: &mut ModelBundle, stage: Stage, optim: &OptimConfig) {
    if bundle.stage != stage {
        bundle.begin_stage(stage, optim.sgd(), optim.adam());
    }
}

/// Trains G (conv weights and every CDBN scale/shift) and D for
/// `config.iters` iterations, resuming from `bundle.iteration` if the
/// bundle is already in the split stage.
pub fn train_split(
    bundle: &mut ModelBundle,
    source: &Split,
    target: &Split,
    assignments: &[usize],
    config: &SplitConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<SplitLogRow>> {
    check_inputs(bundle, source, config.source_batch.min(config.target_batch))?;
    let k = bundle.seg.clusters();
    if assignments.len() != target.len() {
        return Err(Error::invalid(
            "split",
            format!("{} target images but {} cluster assignments", target.len(), assignments.len()),
        ));
    }
    if let Some(&bad) = assignments.iter().find(|&&a| a >= k) {
        return Err(Error::invalid("split", format!("assignment {bad} outside 0..{k}")));
    }
    let members = members(assignments, k);
    let eligible: Vec<usize> = (0..k).filter(|&c| members[c].len() >= 2).collect();
    if eligible.is_empty() {
        return Err(Error::invalid("split", "no cluster has two or more target images"));
    }
    enter(bundle, Stage::Split, optim);
    let sched = optim.schedule(config.iters);
    let dsched = optim.disc_schedule(config.iters);
    let mut log = Vec::new();
    for i in bundle.iteration as usize..config.iters {
        let (xs, ys) = source_batch(source, seed, "split-source", i, config.source_batch)?;
        let mut trng = rng::stream(seed, "split-target", i as u64);
        let cluster = eligible[trng.random_range(0..eligible.len())];
        let pick = draw(&mut trng, members[cluster].len(), config.target_batch);
        let idx: Vec<usize> = pick.iter().map(|&j| members[cluster][j]).collect();
        let xt = target.batch(&idx);

        let ps = bundle.seg.forward(&xs, 0, NormMode::Train)?;
        let pt = bundle.seg.forward(&xt, cluster + 1, NormMode::Train)?;
        let l_seg = seg_cross_entropy(&ps, &ys)?;
        let l_sadv = multi_branch_adv_loss(&bundle.disc, std::slice::from_ref(&pt))?;
        let loss = split_objective(&l_seg, &l_sadv, config.lambda1)?;
        let lr = sched.lr(i);
        g_step(bundle, &loss, lr, &[0, cluster + 1])?;

        let l_sd = discriminator_loss_split(&bundle.disc, &ps, std::slice::from_ref(&pt))?;
        disc_step(bundle, &l_sd, dsched.lr(i))?;
        bundle.iteration = i as u64 + 1;
        log.push(SplitLogRow {
            iter: i,
            l_seg: l_seg.item(),
            l_sadv: l_sadv.item(),
            l_sd: l_sd.item(),
            lr,
        });
    }
    Ok(log)
}

/// SGD step on the conv weights and the CDBN scale/shift of `banks`.
/// Every other bank is skipped entirely, weight decay included.
fn g_step(bundle: &mut ModelBundle, loss: &Tensor, lr: f64, banks: &[usize]) -> Result<()> {
    let n_conv = bundle.seg.conv_params().len();
    let per_layer = 2 * (bundle.seg.clusters() + 1);
    let mut params = bundle.seg.trainable(true).tensors().to_vec();
    // cdbn parameters come layer by layer, bank by bank, gamma then beta
    let active: Vec<bool> = (0..params.len())
        .map(|j| j < n_conv || banks.contains(&((j - n_conv) % per_layer / 2)))
        .collect();
    let grads = grad(loss, &params)?;
    let lrs = vec![lr; params.len()];
    bundle.gen_opt.step_active(&mut params, &grads, &lrs, &active)?;
    bundle.seg.set_trainable(true, params);
    Ok(())
}

pub(crate) fn disc_step(bundle: &mut ModelBundle, loss: &Tensor, lr: f64) -> Result<()> {
    let mut params = bundle.disc.params().tensors().to_vec();
    let grads = grad(loss, &params)?;
    bundle.disc_opt.step(&mut params, &grads, lr)?;
    bundle.disc.params_mut().set_all(params);
    Ok(())
}

/// Source-only reference: the same source batches, schedule and
/// optimizer as [`train_split`], without any target data. Only bank 0 is
/// used. Logged adversarial terms are zero.
pub fn train_supervised(
    bundle: &mut ModelBundle,
    source: &Split,
    config: &SplitConfig,
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<SplitLogRow>> {
    check_inputs(bundle, source, config.source_batch)?;
    enter(bundle, Stage::Supervised, optim);
    let sched = optim.schedule(config.iters);
    let mut log = Vec::new();
    for i in bundle.iteration as usize..config.iters {
        let (xs, ys) = source_batch(source, seed, "split-source", i, config.source_batch)?;
        let ps = bundle.seg.forward(&xs, 0, NormMode::Train)?;
        let l_seg = seg_cross_entropy(&ps, &ys)?;
        let lr = sched.lr(i);
        g_step(bundle, &l_seg, lr, &[0])?;
        bundle.iteration = i as u64 + 1;
        log.push(SplitLogRow {
            iter: i,
            l_seg: l_seg.item(),
            l_sadv: 0.0,
            l_sd: 0.0,
            lr,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn const_d(p: f64) -> Discriminator {
        // zero weights and a final bias of logit(p) make D constant
        let mut d = Discriminator::new(2, &mut ChaCha8Rng::seed_from_u64(0));
        let params: Vec<Tensor> = d
            .params()
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let v = if i == 7 { (p / (1.0 - p)).ln() } else { 0.0 };
                Tensor::param(vec![v; t.numel()], t.shape()).unwrap()
            })
            .collect();
        d.params_mut().set_all(params);
        d
    }

    fn pred() -> Tensor {
        Tensor::full(&[2, 2, 8, 8], 0.5)
    }

    #[test]
    fn adversarial_terms_at_constant_discriminators() {
        let l = multi_branch_adv_loss(&const_d(0.5), &[pred()]).unwrap().item();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        let two = multi_branch_adv_loss(&const_d(0.5), &[pred()]).unwrap().item()
            + multi_branch_adv_loss(&const_d(0.25), &[pred()]).unwrap().item();
        assert!((two - 2.079_442).abs() < 1e-6);
        let sd = discriminator_loss_split(&const_d(0.5), &pred(), &[pred()]).unwrap().item();
        assert!((sd - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(multi_branch_adv_loss(&const_d(0.5), &[]).is_err());
    }

    #[test]
    fn objective_arithmetic() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(2.0);
        assert_eq!(split_objective(&a, &b, 0.0).unwrap().item(), 1.0);
        assert!((split_objective(&a, &b, 0.001).unwrap().item() - 1.002).abs() < 1e-15);
    }

    #[test]
    fn draw_without_and_with_replacement() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let mut d = draw(&mut r, 10, 4);
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 4);
        assert_eq!(draw(&mut r, 2, 5).len(), 5);
    }
}
