//! Everything a training stage hands to the next: segmentation network,
//! hypernetwork, discriminator, optimizer states and the iteration count.
//!
//! Checkpoints use the [`container`](crate::container) format. Entry names:
//!
//! ```text
//! config/seg           in_channels, classes, clusters, widths…, dilations…
//! stage                stage code (see Stage)
//! seg/<param>          conv weights and head bias
//! seg/cdbn<l>/bank<k>/{gamma,beta,running_mean,running_var}
//! hyper/<param>        hypernetwork
//! disc/<param>         discriminator
//! opt/gen/config       momentum, weight decay
//! opt/gen/buf<i>       SGD momentum buffers
//! opt/disc/config      beta1, beta2, epsilon, step
//! opt/disc/m<i>, v<i>  Adam moments
//! opt/hyper/...        same layout, hypernetwork Adam state
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::fuse::Hypernetwork;
use crate::nn::{digest, AdamState, Discriminator, Params, SegNet, SegNetConfig, SgdState};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Init,
    Supervised,
    Split,
    Fuse,
    Meta,
}

impl Stage {
    fn code(self) -> f64 {
        match self {
            Stage::Init => 0.0,
            Stage::Supervised => 1.0,
            Stage::Split => 2.0,
            Stage::Fuse => 3.0,
            Stage::Meta => 4.0,
        }
    }

    fn from_code(c: f64) -> Option<Stage> {
        Some(match c as i64 {
            0 => Stage::Init,
            1 => Stage::Supervised,
            2 => Stage::Split,
            3 => Stage::Fuse,
            4 => Stage::Meta,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Supervised => "supervised",
            Stage::Split => "split",
            Stage::Fuse => "fuse",
            Stage::Meta => "meta",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub seg: SegNet,
    pub hyper: Hypernetwork,
    pub disc: Discriminator,
    /// SGD state of whichever generator-side parameter set the last stage
    /// optimized.
    pub gen_opt: SgdState,
    pub disc_opt: AdamState,
    /// Adam state of the hypernetwork when it is not optimized by SGD.
    pub hyper_opt: AdamState,
    pub stage: Stage,
    pub iteration: u64,
}

impl ModelBundle {
    /// Fresh networks; each draws its initial weights from its own stream
    /// of `seed`.
    pub fn new(config: SegNetConfig, hyper_hidden: usize, seed: u64) -> Self {
        let classes = config.num_classes;
        let k = config.clusters;
        ModelBundle {
            seg: SegNet::new(config, &mut rng::stream(seed, "init-seg", 0)),
            hyper: Hypernetwork::new(k, hyper_hidden, &mut rng::stream(seed, "init-hyper", 0)),
            disc: Discriminator::new(classes, &mut rng::stream(seed, "init-disc", 0)),
            gen_opt: SgdState::default(),
            disc_opt: AdamState::default(),
            hyper_opt: AdamState::default(),
            stage: Stage::Init,
            iteration: 0,
        }
    }

    /// Starts a new stage: optimizer states and the iteration count reset.
    pub fn begin_stage(&mut self, stage: Stage, sgd: SgdState, adam: AdamState) {
        self.stage = stage;
        self.iteration = 0;
        self.gen_opt = sgd;
        self.hyper_opt = adam.clone();
        self.disc_opt = adam;
    }

    pub fn to_container(&self) -> Container {
        let cfg = self.seg.config();
        let mut c = Container::new("checkpoint", cfg.num_classes, cfg.clusters);
        c.iteration = self.iteration;
        let mut header = vec![
            cfg.in_channels as f64,
            cfg.num_classes as f64,
            cfg.clusters as f64,
            cfg.widths.len() as f64,
        ];
        header.extend(cfg.widths.iter().map(|&w| w as f64));
        header.extend(cfg.dilations.iter().map(|&d| d as f64));
        c.push("config/seg", &[header.len()], header);
        c.push("stage", &[], vec![self.stage.code()]);
        push_params(&mut c, "seg", self.seg.conv_params());
        for (l, layer) in self.seg.cdbn().iter().enumerate() {
            for (k, bank) in layer.banks().iter().enumerate() {
                let p = format!("seg/cdbn{}/bank{k}", l + 1);
                let ch = layer.channels();
                c.push(format!("{p}/gamma"), &[ch], bank.gamma.to_vec());
                c.push(format!("{p}/beta"), &[ch], bank.beta.to_vec());
                c.push(format!("{p}/running_mean"), &[ch], bank.running_mean.clone());
                c.push(format!("{p}/running_var"), &[ch], bank.running_var.clone());
            }
        }
        push_params(&mut c, "hyper", self.hyper.params());
        push_params(&mut c, "disc", self.disc.params());
        c.push(
            "opt/gen/config",
            &[2],
            vec![self.gen_opt.momentum, self.gen_opt.weight_decay],
        );
        for (i, b) in self.gen_opt.buffers.iter().enumerate() {
            c.push(format!("opt/gen/buf{i}"), &[b.len()], b.clone());
        }
        push_adam(&mut c, "opt/disc", &self.disc_opt);
        push_adam(&mut c, "opt/hyper", &self.hyper_opt);
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<ModelBundle> {
        let fail = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if c.kind != "checkpoint" {
            return Err(fail(format!("expected a checkpoint, found {}", c.kind)));
        }
        let h = &c.require("config/seg", path)?.data;
        let layers = *h.get(3).ok_or_else(|| fail("short config/seg".into()))? as usize;
        if h.len() != 4 + 2 * layers {
            return Err(fail("config/seg length does not match layer count".into()));
        }
        let config = SegNetConfig {
            in_channels: h[0] as usize,
            num_classes: h[1] as usize,
            clusters: h[2] as usize,
            widths: h[4..4 + layers].iter().map(|&v| v as usize).collect(),
            dilations: h[4 + layers..].iter().map(|&v| v as usize).collect(),
        };
        if config.num_classes != c.classes as usize || config.clusters != c.clusters as usize {
            return Err(fail("header M/K disagree with config/seg".into()));
        }
        let hidden = c.require("hyper/b1", path)?.data.len();
        let mut b = ModelBundle::new(config, hidden, 0);
        load_params(c, path, "seg", b.seg.conv_params_mut())?;
        for l in 0..b.seg.cdbn().len() {
            let banks = b.seg.cdbn()[l].num_banks();
            for k in 0..banks {
                let p = format!("seg/cdbn{}/bank{k}", l + 1);
                let ch = b.seg.cdbn()[l].channels();
                let get = |name: &str| -> Result<Vec<f64>> {
                    let e = c.require(&format!("{p}/{name}"), path)?;
                    if e.data.len() != ch {
                        return Err(fail(format!("{p}/{name} has wrong length")));
                    }
                    Ok(e.data.clone())
                };
                let bank = b.seg.cdbn_mut()[l].bank_mut(k);
                bank.gamma = Tensor::param(get("gamma")?, &[ch])?;
                bank.beta = Tensor::param(get("beta")?, &[ch])?;
                bank.running_mean = get("running_mean")?;
                bank.running_var = get("running_var")?;
            }
        }
        load_params(c, path, "hyper", b.hyper.params_mut())?;
        load_params(c, path, "disc", b.disc.params_mut())?;
        let g = &c.require("opt/gen/config", path)?.data;
        b.gen_opt = SgdState::new(g[0], g[1]);
        let mut i = 0;
        while let Some(e) = c.get(&format!("opt/gen/buf{i}")) {
            b.gen_opt.buffers.push(e.data.clone());
            i += 1;
        }
        b.disc_opt = load_adam(c, path, "opt/disc")?;
        b.hyper_opt = load_adam(c, path, "opt/hyper")?;
        b.stage = Stage::from_code(c.require("stage", path)?.data[0])
            .ok_or_else(|| fail("unknown stage code".into()))?;
        b.iteration = c.iteration;
        Ok(b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<ModelBundle> {
        ModelBundle::from_container(&Container::read(path)?, path)
    }

    /// Digest of every CDBN bank (parameters and statistics).
    pub fn cdbn_digest(&self) -> u64 {
        let d: Vec<f64> = self
            .seg
            .bank_digests()
            .into_iter()
            .map(f64::from_bits)
            .collect();
        digest([d.as_slice()])
    }
}

fn push_adam(c: &mut Container, prefix: &str, a: &AdamState) {
    c.push(
        format!("{prefix}/config"),
        &[4],
        vec![a.beta1, a.beta2, a.epsilon, a.step as f64],
    );
    for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
        c.push(format!("{prefix}/m{i}"), &[m.len()], m.clone());
        c.push(format!("{prefix}/v{i}"), &[v.len()], v.clone());
    }
}

fn load_adam(c: &Container, path: &Path, prefix: &str) -> Result<AdamState> {
    let a = &c.require(&format!("{prefix}/config"), path)?.data;
    if a.len() != 4 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("{prefix}/config must hold 4 values"),
        });
    }
    let mut s = AdamState::new(a[0], a[1]);
    s.epsilon = a[2];
    s.step = a[3] as u64;
    let mut i = 0;
    while let Some(m) = c.get(&format!("{prefix}/m{i}")) {
        s.m.push(m.data.clone());
        s.v.push(c.require(&format!("{prefix}/v{i}"), path)?.data.clone());
        i += 1;
    }
    Ok(s)
}

fn push_params(c: &mut Container, prefix: &str, p: &Params) {
    for (name, t) in p.iter() {
        c.push(format!("{prefix}/{name}"), t.shape(), t.to_vec());
    }
}

fn load_params(c: &Container, path: &Path, prefix: &str, p: &mut Params) -> Result<()> {
    let mut values = Vec::with_capacity(p.len());
    for (name, t) in p.iter() {
        let e = c.require(&format!("{prefix}/{name}"), path)?;
        if e.shape != t.shape() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("{prefix}/{name}: shape {:?}, expected {:?}", e.shape, t.shape()),
            });
        }
        values.push(Tensor::param(e.data.clone(), &e.shape)?);
    }
    p.set_all(values);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut b = ModelBundle::new(SegNetConfig::new(4, 3), 16, 9);
        b.stage = Stage::Split;
        b.iteration = 12;
        b.gen_opt.buffers = vec![vec![0.5, -1.0], vec![2.0]];
        b.disc_opt.step = 3;
        b.disc_opt.m = vec![vec![1.0]];
        b.disc_opt.v = vec![vec![4.0]];
        b.seg.cdbn_mut()[1].bank_mut(2).running_mean[0] = 0.25;
        let c = b.to_container();
        let back = ModelBundle::from_container(&c, Path::new("x")).unwrap();
        assert_eq!(back.to_container(), c);
        assert_eq!(back.stage, Stage::Split);
        assert_eq!(back.iteration, 12);
        assert_eq!(back.cdbn_digest(), b.cdbn_digest());
    }

    #[test]
    fn header_names_m_and_k() {
        let b = ModelBundle::new(SegNetConfig::new(5, 2), 8, 0);
        let c = b.to_container();
        assert_eq!((c.classes, c.clusters), (5, 2));
        // K + 1 banks in each of the three CDBN layers
        for l in 1..=3 {
            for k in 0..=2 {
                assert!(c.get(&format!("seg/cdbn{l}/bank{k}/running_var")).is_some());
            }
            assert!(c.get(&format!("seg/cdbn{l}/bank3/gamma")).is_none());
        }
    }
}
