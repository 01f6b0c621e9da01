mod common;

use common::*;
use metadapt::autodiff::{grad, grad_graph, no_grad, Tensor};
use metadapt::bundle::ModelBundle;
use metadapt::cluster::{ClusterModel, KmeansConfig, StyleCode};
use metadapt::fuse::{FuseConfig, Fusion};
use metadapt::meta::*;
use metadapt::nn::{OptimConfig, SegNetConfig};
use metadapt::split::{train_split, SplitConfig};
use metadapt::synthdata::{make_dataset, Counts, Dataset, DatasetSpec, NUM_CLASSES};

struct Fixture {
    ds: Dataset,
    cluster: ClusterModel,
    codes: Vec<StyleCode>,
    open_codes: Vec<StyleCode>,
    split: ModelBundle,
}

fn fixture(seed: u64) -> Fixture {
    let mut s = DatasetSpec::default();
    s.width = 16;
    s.height = 16;
    s.counts = Counts {
        source: 12,
        target: 24,
        target_test: 4,
        open: 6,
    };
    let ds = make_dataset(&s, seed).unwrap();
    let cluster = ClusterModel::fit(&ds.target, &KmeansConfig::new(4, seed)).unwrap();
    let codes = cluster.encoder.codes(&ds.target);
    let open_codes = cluster.encoder.codes(&ds.open);
    let mut split = ModelBundle::new(SegNetConfig::new(NUM_CLASSES, 4), 32, seed);
    let cfg = SplitConfig { iters: 8, ..SplitConfig::default() };
    train_split(&mut split, &ds.source, &ds.target, &cluster.assign_split(&ds.target), &cfg, &optim(), seed).unwrap();
    Fixture {
        ds,
        cluster,
        codes,
        open_codes,
        split,
    }
}

fn optim() -> OptimConfig {
    OptimConfig { lr: 0.01, ..OptimConfig::default() }
}

fn fuse_cfg() -> FuseConfig {
    FuseConfig {
        iters: 4,
        warm_start_steps: 20,
        ..FuseConfig::default()
    }
}

fn bits(b: &ModelBundle) -> Vec<u64> {
    let mut out: Vec<u64> = Vec::new();
    for ts in [b.seg.conv_params().tensors(), b.hyper.params().tensors(), b.disc.params().tensors()] {
        out.extend(ts.iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())));
    }
    out
}

#[test]
fn zero_alpha_and_delta_reduce_meta_to_fuse() {
    let f = fixture(1);
    let data = StageData {
        source: &f.ds.source,
        target: &f.ds.target,
        target_codes: &f.codes,
        cluster: &f.cluster,
    };
    let meta = MetaConfig {
        iters: 4,
        inner_lr: 0.0,
        delta: 0.0,
        ..MetaConfig::default()
    };
    for mode in [MamlMode::Exact, MamlMode::FirstOrder] {
        let mut a = f.split.clone();
        let mut b = f.split.clone();
        let la = train_fused(&mut a, &data, &fuse_cfg(), None, &optim(), 3).unwrap();
        let lb = train_fused(&mut b, &data, &fuse_cfg(), Some(&MetaConfig { mode, ..meta }), &optim(), 3).unwrap();
        let curve = |rows: &[FusedLogRow]| rows.iter().map(|r| (r.l_seg.to_bits(), r.l_fadv.to_bits())).collect::<Vec<_>>();
        assert_eq!(curve(&la), curve(&lb));
        assert_eq!(bits(&a), bits(&b), "{mode:?}");
    }
}

#[test]
fn fused_stages_leave_cdbn_alone() {
    let f = fixture(2);
    let data = StageData {
        source: &f.ds.source,
        target: &f.ds.target,
        target_codes: &f.codes,
        cluster: &f.cluster,
    };
    let before = f.split.cdbn_digest();
    let mut b = f.split.clone();
    let meta = MetaConfig { iters: 3, inner_lr: 0.01, ..MetaConfig::default() };
    let log = train_meta(&mut b, &data, &fuse_cfg(), &meta, &optim(), 4).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.l_in.is_finite() && r.l_out.is_finite()));
    assert_eq!(b.cdbn_digest(), before);
    assert_ne!(bits(&b), bits(&f.split));
}

#[test]
fn first_order_equals_exact_for_a_linear_inner_loss() {
    let mut r = rng(5);
    let theta = param(uniform(&mut r, &[3, 4], -1.0, 1.0), &[3, 4]);
    let a = Tensor::new(uniform(&mut r, &[3, 4], -1.0, 1.0), &[3, 4]).unwrap();
    let x = Tensor::new(uniform(&mut r, &[2, 3], -1.0, 1.0), &[2, 3]).unwrap();
    let inner = |t: &Tensor| t.mul(&a).unwrap().sum();
    let outer = |t: &Tensor| x.matmul(t).unwrap().softmax(1).unwrap().log().square().mean();
    let meta_grad = |graph: bool| {
        let l = inner(&theta);
        let g = if graph { grad_graph(&l, std::slice::from_ref(&theta)) } else { grad(&l, std::slice::from_ref(&theta)) }.unwrap();
        let plus = theta.sub(&g[0].scale(0.3)).unwrap();
        grad(&outer(&plus), std::slice::from_ref(&theta)).unwrap()[0].to_vec()
    };
    assert_eq!(meta_grad(true), meta_grad(false));
}

fn frozen_predictions(b: &ModelBundle, fuser: &Fuser<'_>, f: &Fixture) -> Vec<Vec<u8>> {
    let theta = fuser.theta(b);
    (0..f.ds.open.len())
        .map(|i| {
            no_grad(|| {
                let (p, _) = fuser.predict(b, &theta, &f.ds.open.batch(&[i]), &[f.open_codes[i]]).unwrap();
                argmax_classes(&p)
            })
        })
        .collect()
}

#[test]
fn zero_eta_matches_frozen_evaluation() {
    let f = fixture(3);
    let fuser = Fuser { fusion: Fusion::Hyper, cluster: &f.cluster, temperature: 1.0 };
    let mut b = f.split.clone();
    let order: Vec<usize> = (0..f.ds.open.len()).collect();
    let steps = online_update(&mut b, &fuser, &f.ds.open, &f.open_codes, &order, 0.0).unwrap();
    let frozen = frozen_predictions(&f.split, &fuser, &f);
    for s in &steps {
        assert_eq!(s.prediction, frozen[s.image]);
        assert_eq!(s.entropy_after, s.entropy_before);
    }
    assert_eq!(bits(&b), bits(&f.split));
}

#[test]
fn online_updates_record_first_then_step() {
    let f = fixture(4);
    let fuser = Fuser { fusion: Fusion::Hyper, cluster: &f.cluster, temperature: 1.0 };
    let order: Vec<usize> = (0..f.ds.open.len()).rev().collect();
    let run = || {
        let mut b = f.split.clone();
        let steps = online_update(&mut b, &fuser, &f.ds.open, &f.open_codes, &order, 1e-3).unwrap();
        (b, steps)
    };
    let (a, steps) = run();
    let (b, again) = run();
    assert_eq!(steps, again);
    assert_eq!(bits(&a), bits(&b));
    // the first recorded prediction precedes any update
    assert_eq!(steps[0].prediction, frozen_predictions(&f.split, &fuser, &f)[order[0]]);
    assert_eq!(a.cdbn_digest(), f.split.cdbn_digest());
    assert_ne!(bits(&a), bits(&f.split));
    let down = steps.iter().filter(|s| s.entropy_after <= s.entropy_before).count();
    assert!(down * 10 >= steps.len() * 8, "{down} of {}", steps.len());

    // another order is allowed to end elsewhere; it must still run cleanly
    let mut c = f.split.clone();
    let fwd: Vec<usize> = (0..f.ds.open.len()).collect();
    online_update(&mut c, &fuser, &f.ds.open, &f.open_codes, &fwd, 1e-3).unwrap();

    let mut d = f.split.clone();
    assert!(online_update(&mut d, &fuser, &f.ds.open, &f.open_codes, &[], 1e-3).unwrap().is_empty());
    assert_eq!(bits(&d), bits(&f.split));
}

#[test]
fn meta_rejects_bad_configs() {
    let f = fixture(6);
    let data = StageData {
        source: &f.ds.source,
        target: &f.ds.target,
        target_codes: &f.codes,
        cluster: &f.cluster,
    };
    let mut b = f.split.clone();
    let bad = MetaConfig { delta: -1.0, ..MetaConfig::default() };
    assert!(train_meta(&mut b, &data, &fuse_cfg(), &bad, &optim(), 0).is_err());
    let short = StageData { target_codes: &f.codes[1..], ..data };
    assert!(train_meta(&mut b, &short, &fuse_cfg(), &MetaConfig::default(), &optim(), 0).is_err());
}
