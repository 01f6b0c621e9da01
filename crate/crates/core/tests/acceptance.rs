//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line before
//! asserting. Run with `--nocapture` to see them.

mod common;

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use metadapt::autodiff::{grad, grad_graph, Tensor};
use metadapt::bundle::ModelBundle;
use metadapt::cluster::{assign, cluster_report, kmeans_fit, ClusterModel, KmeansConfig};
use metadapt::fuse::{fused_prediction, Fusion};
use metadapt::harness::{
    cluster_stage, eval_online, eval_stage, fuse_stage, gen_data, median, run_protocol,
    source_only_stage, split_stage, ClusterPaths, EvalMode, ExperimentConfig, FusePaths,
    RunLayout, StageSeeds, StreamOrder,
};
use metadapt::nn::{
    binary_cross_entropy, entropy_loss, seg_cross_entropy, CdbnLayer, Discriminator, NormMode,
    SegNetConfig,
};
use metadapt::split::{discriminator_loss_split, multi_branch_adv_loss, train_split, SplitConfig};
use metadapt::synthdata::{make_dataset, DatasetSpec, NUM_CLASSES};
use rand::Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

// ---------------------------------------------------------------- 1

type Case = (Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Tensor>);

fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Vec<f64> {
    uniform(r, shape, -2.0, 2.0)
        .into_iter()
        .map(|v: f64| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
        .collect()
}

fn primitive_case(kind: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let dims = |r: &mut rand_chacha::ChaCha8Rng| vec![r.random_range(1..4), r.random_range(1..5)];
    let s = dims(&mut r);
    let ws = seed + 10_000;
    match kind {
        "add" | "sub" | "mul" => {
            let a = param(uniform(&mut r, &s, -2.0, 2.0), &s);
            let b = param(uniform(&mut r, &s, -2.0, 2.0), &s);
            let k = kind.to_string();
            (
                vec![a, b],
                Box::new(move |t| {
                    let out = match k.as_str() {
                        "add" => t[0].add(&t[1]),
                        "sub" => t[0].sub(&t[1]),
                        _ => t[0].mul(&t[1]),
                    };
                    weighted_sum(&out.unwrap(), ws)
                }),
            )
        }
        "scalar-mul" => {
            let c = r.random_range(-3.0..3.0);
            (
                vec![param(uniform(&mut r, &s, -2.0, 2.0), &s)],
                Box::new(move |t| weighted_sum(&t[0].scale(c), ws)),
            )
        }
        "matmul" => {
            let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
            let a = param(uniform(&mut r, &[m, k], -1.0, 1.0), &[m, k]);
            let b = param(uniform(&mut r, &[k, n], -1.0, 1.0), &[k, n]);
            (vec![a, b], Box::new(move |t| weighted_sum(&t[0].matmul(&t[1]).unwrap(), ws)))
        }
        "conv2d" => {
            let stride = r.random_range(1..3);
            let padding = r.random_range(0..2);
            let (cin, cout) = (r.random_range(1..3), r.random_range(1..3));
            let xs = [2, cin, 5, 5];
            let x = param(uniform(&mut r, &xs, -1.0, 1.0), &xs);
            let w = param(uniform(&mut r, &[cout, cin, 3, 3], -1.0, 1.0), &[cout, cin, 3, 3]);
            let b = param(uniform(&mut r, &[cout], -1.0, 1.0), &[cout]);
            (
                vec![x, w, b],
                Box::new(move |t| {
                    weighted_sum(&t[0].conv2d(&t[1], Some(&t[2]), stride, padding, 1).unwrap(), ws)
                }),
            )
        }
        "relu" | "leaky-relu" => {
            let leaky = kind == "leaky-relu";
            (
                vec![param(away_from_zero(&mut r, &s), &s)],
                Box::new(move |t| {
                    let y = if leaky { t[0].leaky_relu(0.2) } else { t[0].relu() };
                    weighted_sum(&y, ws)
                }),
            )
        }
        "exp" => (
            vec![param(uniform(&mut r, &s, -2.0, 2.0), &s)],
            Box::new(move |t| weighted_sum(&t[0].exp(), ws)),
        ),
        "log" => (
            vec![param(uniform(&mut r, &s, 0.5, 3.0), &s)],
            Box::new(move |t| weighted_sum(&t[0].log(), ws)),
        ),
        "softmax" => {
            let shape = [2, r.random_range(2..5), 2, 2];
            (
                vec![param(uniform(&mut r, &shape, -2.0, 2.0), &shape)],
                Box::new(move |t| weighted_sum(&t[0].softmax(1).unwrap(), ws)),
            )
        }
        "sum" | "mean" => {
            let mean = kind == "mean";
            (
                vec![param(uniform(&mut r, &s, -2.0, 2.0), &s)],
                Box::new(move |t| weighted_sum(&if mean { t[0].mean() } else { t[0].sum() }, ws)),
            )
        }
        "square" => (
            vec![param(away_from_zero(&mut r, &s), &s)],
            Box::new(move |t| weighted_sum(&t[0].square(), ws)),
        ),
        "sigmoid" => (
            vec![param(uniform(&mut r, &s, -3.0, 3.0), &s)],
            Box::new(move |t| weighted_sum(&t[0].sigmoid(), ws)),
        ),
        _ => unreachable!("{kind}"),
    }
}

#[test]
fn c01_autodiff_oracle() {
    let kinds = [
        "add", "sub", "mul", "scalar-mul", "matmul", "conv2d", "relu", "leaky-relu", "exp", "log",
        "softmax", "sum", "mean", "square", "sigmoid",
    ];
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for kind in kinds {
        for seed in 0..100 {
            let (inputs, f) = primitive_case(kind, seed);
            let e = max_fd_error(&inputs, &*f);
            if e > worst.0 {
                worst = (e, kind);
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst.0 < 1e-5 && elapsed < Duration::from_secs(60);
    verdict(
        "1 autodiff oracle",
        ok,
        format!(
            "15 primitives x 100 cases, worst relative error {:.2e} ({}), {:.1?}",
            worst.0, worst.1, elapsed
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 2

/// `x → softmax(sigmoid(x W1 + b1) W2)` with 4·5 + 5 + 5·5 = 50 parameters.
fn toy_probs(theta: &[Tensor], x: &Tensor) -> Tensor {
    let n = x.shape()[0];
    let h = x
        .matmul(&theta[0])
        .unwrap()
        .add(&theta[1].reshape(&[1, 5]).unwrap().broadcast_to(&[n, 5]).unwrap())
        .unwrap()
        .sigmoid();
    h.matmul(&theta[2]).unwrap().softmax(1).unwrap().reshape(&[n, 5, 1, 1]).unwrap()
}

fn toy_in(theta: &[Tensor], x: &Tensor) -> Tensor {
    entropy_loss(&toy_probs(theta, x)).unwrap()
}

fn toy_out(theta: &[Tensor], x: &Tensor, y: &Tensor) -> Tensor {
    let p = toy_probs(theta, x);
    seg_cross_entropy(&p, y).unwrap().add(&entropy_loss(&p).unwrap().scale(0.3)).unwrap()
}

#[test]
fn c02_maml_exactness() {
    let start = Instant::now();
    let alpha = 0.1;
    let theta = param(vec![1.0], &[1]);
    let inner = |t: &Tensor| t.square().sum().scale(0.5);
    let g = grad_graph(&inner(&theta), std::slice::from_ref(&theta)).unwrap();
    let plus = theta.sub(&g[0].scale(alpha)).unwrap();
    let exact_q = grad(&inner(&plus), std::slice::from_ref(&theta)).unwrap()[0].item();
    let g = grad(&inner(&theta), std::slice::from_ref(&theta)).unwrap();
    let plus = theta.sub(&g[0].scale(alpha)).unwrap();
    let first_q = grad(&inner(&plus), std::slice::from_ref(&theta)).unwrap()[0].item();
    let quad_ok = (exact_q - 0.81).abs() < 1e-10 && (first_q - 0.9).abs() < 1e-10;

    let mut r = rng(42);
    let shapes: [&[usize]; 3] = [&[4, 5], &[5], &[5, 5]];
    let theta: Vec<Tensor> = shapes.iter().map(|s| param(uniform(&mut r, s, -1.0, 1.0), s)).collect();
    assert_eq!(theta.iter().map(Tensor::numel).sum::<usize>(), 50);
    let x_in = Tensor::new(uniform(&mut r, &[6, 4], -2.0, 2.0), &[6, 4]).unwrap();
    let x_out = Tensor::new(uniform(&mut r, &[6, 4], -2.0, 2.0), &[6, 4]).unwrap();
    let y = Tensor::new((0..6).map(|i| (i % 5) as f64).collect(), &[6, 1, 1]).unwrap();
    let alpha = 0.5;
    let composed = |theta: &[Tensor], graph: bool| -> Tensor {
        let l = toy_in(theta, &x_in);
        let g = if graph { grad_graph(&l, theta) } else { grad(&l, theta) }.unwrap();
        let plus: Vec<Tensor> = theta.iter().zip(&g).map(|(t, g)| t.sub(&g.scale(alpha)).unwrap()).collect();
        toy_out(&plus, &x_out, &y)
    };
    let exact = grad(&composed(&theta, true), &theta).unwrap();
    let first = grad(&composed(&theta, false), &theta).unwrap();
    let mut worst = 0.0f64;
    let mut gap = 0.0f64;
    for i in 0..3 {
        for e in 0..theta[i].numel() {
            let at = |d: f64| {
                let moved: Vec<Tensor> = theta
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut v = t.to_vec();
                        if j == i {
                            v[e] += d;
                        }
                        param(v, t.shape())
                    })
                    .collect();
                composed(&moved, false).item()
            };
            let numeric = (at(H) - at(-H)) / (2.0 * H);
            worst = worst.max(rel_err(exact[i].data()[e], numeric));
            gap = gap.max(rel_err(first[i].data()[e], numeric));
        }
    }
    let elapsed = start.elapsed();
    let ok = quad_ok && worst < 1e-5 && elapsed < Duration::from_secs(60);
    verdict(
        "2 MAML exactness",
        ok,
        format!(
            "quadratic exact {exact_q:.12} first-order {first_q:.12}; 50-param net exact vs FD {worst:.2e} (first-order would be {gap:.2e}), {elapsed:.1?}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 3

fn small_spec() -> DatasetSpec {
    let mut spec = DatasetSpec::default();
    spec.width = 16;
    spec.height = 16;
    spec.counts.source = 16;
    spec.counts.target = 24;
    spec.counts.target_test = 4;
    spec.counts.open = 4;
    spec
}

#[test]
fn c03_cdbn_isolation() {
    let ds = make_dataset(&small_spec(), 5).unwrap();
    let mut b = ModelBundle::new(SegNetConfig::new(NUM_CLASSES, 4), 32, 5);
    // clusters 0 and 1 get images, cluster 2 a single (ineligible) image,
    // cluster 3 none: banks 3 and 4 must never be routed
    let mut assignments: Vec<usize> = (0..ds.target.len()).map(|i| i % 2).collect();
    assignments[0] = 2;
    let before = b.seg.bank_digests();
    let cfg = SplitConfig {
        iters: 200,
        ..SplitConfig::default()
    };
    let mut optim = ExperimentConfig::desk().optim;
    optim.weight_decay = 5e-4;
    train_split(&mut b, &ds.source, &ds.target, &assignments, &cfg, &optim, 9).unwrap();
    let after = b.seg.bank_digests();
    let untouched = before[3] == after[3] && before[4] == after[4];
    let trained = (0..3).all(|k| before[k] != after[k]);

    let mut layer = CdbnLayer::new(6, 2);
    let mut r = rng(3);
    let x = Tensor::new(
        (0..4 * 6 * 5 * 5).map(|i| 40.0 * (i % 7) as f64 - 50.0 + r.random_range(-20.0..20.0)).collect(),
        &[4, 6, 5, 5],
    )
    .unwrap();
    let y = layer.forward(&x, 1, NormMode::Train).unwrap();
    let (mut max_mu, mut max_var) = (0.0f64, 0.0f64);
    let plane = 25;
    for c in 0..6 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|n| y.data()[(n * 6 + c) * plane..(n * 6 + c + 1) * plane].to_vec())
            .collect();
        let mu = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / vals.len() as f64;
        max_mu = max_mu.max(mu.abs());
        max_var = max_var.max((var - 1.0).abs());
    }
    let ok = untouched && trained && max_mu < 1e-9 && max_var < 1e-6;
    verdict(
        "3 CDBN isolation",
        ok,
        format!(
            "200 split iterations: non-routed banks identical {untouched}, routed banks changed {trained}; train-mode |mean| {max_mu:.1e}, |var-1| {max_var:.1e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 4

fn exhaustive_two_partition(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    let cost = |members: &[&Vec<f64>]| -> f64 {
        if members.is_empty() {
            return 0.0;
        }
        let d = members[0].len();
        let mean: Vec<f64> = (0..d)
            .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
            .collect();
        members
            .iter()
            .map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum()
    };
    let mut best = f64::INFINITY;
    // point 0 always in side A; every non-empty side B
    for mask in 1u32..(1 << (n - 1)) {
        let (mut a, mut b) = (vec![&points[0]], Vec::new());
        for (i, p) in points.iter().enumerate().skip(1) {
            if mask >> (i - 1) & 1 == 1 {
                b.push(p);
            } else {
                a.push(p);
            }
        }
        best = best.min(cost(&a) + cost(&b));
    }
    best
}

#[test]
fn c04_kmeans_oracle() {
    let mut r = rng(11);
    let mut inertia_ok = true;
    let mut partition_ok = true;
    let mut monotone = true;
    for inst in 0..40 {
        let n = r.random_range(4..=12);
        let dim = if inst % 2 == 0 { 2 } else { 8 };
        let dir: Vec<f64> = uniform(&mut r, &[dim], -1.0, 1.0);
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let truth: Vec<usize> = (0..n).map(|i| usize::from(i * 2 >= n)).collect();
        let points: Vec<Vec<f64>> = truth
            .iter()
            .map(|&t| {
                (0..dim)
                    .map(|j| t as f64 * 10.0 * dir[j] / norm + r.random_range(-0.1..0.1))
                    .collect()
            })
            .collect();
        let c = kmeans_fit(&points, &KmeansConfig::new(2, inst)).unwrap();
        let best = exhaustive_two_partition(&points);
        inertia_ok &= (c.inertia - best).abs() <= 1e-9 * best.max(1e-12);
        let labels: Vec<usize> = points.iter().map(|p| assign(p, &c)).collect();
        partition_ok &= labels.iter().zip(&truth).all(|(l, t)| (l == &labels[0]) == (t == &truth[0]));
        monotone &= c.inertia_history.windows(2).all(|w| w[1] <= w[0]);
    }
    // a harder, unstructured instance for monotonicity
    let cloud: Vec<Vec<f64>> = (0..400).map(|_| uniform(&mut r, &[8], -1.0, 1.0)).collect();
    let c = kmeans_fit(&cloud, &KmeansConfig::new(6, 1)).unwrap();
    monotone &= c.inertia_history.windows(2).all(|w| w[1] <= w[0]);
    let mut scan_ok = true;
    for _ in 0..1000 {
        let q = uniform(&mut r, &[8], -1.5, 1.5);
        let d: Vec<f64> = c.points.iter().map(|p| p.iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let brute = (0..d.len()).fold(0, |best, k| if d[k] < d[best] { k } else { best });
        scan_ok &= assign(&q, &c) == brute;
    }
    let ok = inertia_ok && partition_ok && monotone && scan_ok;
    verdict(
        "4 k-means oracle",
        ok,
        format!(
            "40 planted instances: optimal inertia {inertia_ok}, planted partition {partition_ok}; monotone inertia {monotone} ({} Lloyd steps on 400 points); 1000-query scan {scan_ok}",
            c.iterations
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 5

#[test]
fn c05_cluster_purity() {
    let start = Instant::now();
    let mut purities = Vec::new();
    for seed in SEEDS {
        let seeds = StageSeeds::new(seed);
        let ds = make_dataset(&DatasetSpec::default(), seeds.data).unwrap();
        let model = ClusterModel::fit(&ds.target, &KmeansConfig::new(4, seeds.cluster)).unwrap();
        let t = &ds.truth().unwrap().eval_only().target;
        let r = cluster_report(&model.assign_split(&ds.target), &t.provenance, 4, t.domains.len()).unwrap();
        purities.push(r.purity);
    }
    let m = median(&purities);
    let elapsed = start.elapsed();
    let ok = m >= 0.9 && elapsed < Duration::from_secs(120);
    verdict(
        "5 cluster purity",
        ok,
        format!("K=4 purity per seed {purities:.3?}, median {m:.3} (need >= 0.9), {elapsed:.1?}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 6

fn constant_discriminator(p: f64) -> Discriminator {
    let mut d = Discriminator::new(NUM_CLASSES, &mut rng(0));
    let n = d.params().len();
    let params: Vec<Tensor> = d
        .params()
        .tensors()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let v = if i == n - 1 { (p / (1.0 - p)).ln() } else { 0.0 };
            param(vec![v; t.numel()], t.shape())
        })
        .collect();
    d.params_mut().set_all(params);
    d
}

#[test]
fn c06_loss_identities() {
    let mut r = rng(6);
    let mut ce_err = 0.0f64;
    for m in 2..=8 {
        let p = Tensor::full(&[2, m, 3, 3], 1.0 / m as f64);
        let labels = Tensor::new((0..18).map(|i| (i % m) as f64).collect(), &[2, 3, 3]).unwrap();
        ce_err = ce_err.max((seg_cross_entropy(&p, &labels).unwrap().item() - (m as f64).ln()).abs());
    }
    let mut bounds = true;
    for _ in 0..1000 {
        let c = r.random_range(2..6);
        let raw = uniform(&mut r, &[2, c, 4, 4], 0.0, 1.0);
        // sharpen some maps toward one-hot corners
        let power = r.random_range(1.0..12.0);
        let mut v: Vec<f64> = raw.iter().map(|x: &f64| x.powf(power)).collect();
        for n in 0..2 {
            for px in 0..16 {
                let s: f64 = (0..c).map(|k| v[(n * c + k) * 16 + px]).sum();
                (0..c).for_each(|k| v[(n * c + k) * 16 + px] /= s);
            }
        }
        let e = entropy_loss(&Tensor::new(v, &[2, c, 4, 4]).unwrap()).unwrap().item();
        bounds &= (-1e-12..=(c as f64).ln() + 1e-12).contains(&e);
    }
    let half = constant_discriminator(0.5);
    let pred = Tensor::full(&[2, NUM_CLASSES, 8, 8], 0.25);
    let ln2 = 2f64.ln();
    let adv = multi_branch_adv_loss(&half, std::slice::from_ref(&pred)).unwrap().item();
    let d_loss = discriminator_loss_split(&half, &pred, std::slice::from_ref(&pred)).unwrap().item();
    let raw_fake = binary_cross_entropy(&Tensor::full(&[3, 1, 2, 2], 0.5), false).item();
    let adv_err = (adv - ln2).abs().max((d_loss - 2.0 * ln2).abs()).max((raw_fake - ln2).abs());
    let ok = ce_err < 1e-9 && bounds && adv_err < 1e-9;
    verdict(
        "6 loss identities",
        ok,
        format!(
            "uniform CE vs ln M max error {ce_err:.1e}; entropy within [0, ln C] on 1000 maps {bounds}; D=0.5 terms vs ln 2 max error {adv_err:.1e}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 7

#[test]
fn c07_fusion_contracts() {
    let ds = make_dataset(&small_spec(), 7).unwrap();
    let mut b = ModelBundle::new(SegNetConfig::new(NUM_CLASSES, 4), 32, 7);
    // give every bank its own statistics and affine parameters
    let mut r = rng(70);
    for layer in b.seg.cdbn_mut() {
        for k in 0..layer.num_banks() {
            let c = layer.channels();
            let bank = layer.bank_mut(k);
            bank.gamma = param(uniform(&mut r, &[c], 0.5, 1.5), &[c]);
            bank.beta = param(uniform(&mut r, &[c], -0.5, 0.5), &[c]);
            bank.running_mean = uniform(&mut r, &[c], -0.3, 0.3);
            bank.running_var = uniform(&mut r, &[c], 0.5, 2.0);
        }
    }
    let x = ds.target.batch(&[0, 1, 2]);
    let conv = b.seg.conv_params().tensors().to_vec();
    let branches: Vec<Tensor> = (1..=4).map(|k| b.seg.predict(&x, k).unwrap()).collect();

    let mut onehot_exact = true;
    for j in 0..4 {
        let mut w = vec![0.0; 12];
        (0..3).for_each(|n| w[n * 4 + j] = 1.0);
        let f = fused_prediction(&b.seg, &conv, &x, &Tensor::new(w, &[3, 4]).unwrap()).unwrap();
        onehot_exact &= f.data() == branches[j].data();
    }

    let (mut simplex, mut convex) = (0.0f64, true);
    let m = NUM_CLASSES;
    let hw = 16 * 16;
    for _ in 0..1000 {
        let mut w: Vec<f64> = (0..12).map(|_| -r.random::<f64>().ln()).collect();
        for row in w.chunks_mut(4) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        let f = fused_prediction(&b.seg, &conv, &x, &Tensor::new(w, &[3, 4]).unwrap()).unwrap();
        let d = f.data();
        for n in 0..3 {
            for px in 0..hw {
                let s: f64 = (0..m).map(|c| d[(n * m + c) * hw + px]).sum();
                simplex = simplex.max((s - 1.0).abs());
                for c in 0..m {
                    let i = (n * m + c) * hw + px;
                    let lo = branches.iter().map(|p| p.data()[i]).fold(f64::INFINITY, f64::min);
                    let hi = branches.iter().map(|p| p.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                    convex &= d[i] >= lo - 1e-12 && d[i] <= hi + 1e-12;
                }
            }
        }
    }

    // one-hot fusion at the cluster assignment against routed split forward
    let cluster = ClusterModel::fit(&ds.target, &KmeansConfig::new(4, 1)).unwrap();
    let fuser = metadapt::meta::Fuser {
        fusion: Fusion::Onehot,
        cluster: &cluster,
        temperature: 1.0,
    };
    let mut routed_exact = true;
    for i in 0..ds.target.len() {
        let xi = ds.target.batch(&[i]);
        let code = cluster.code(ds.target.image(i), 16, 16);
        let (fused, _) = fuser.predict(&b, &fuser.theta(&b), &xi, &[code]).unwrap();
        let routed = b.seg.predict(&xi, assign(&code, &cluster.centroids) + 1).unwrap();
        routed_exact &= fused.data() == routed.data();
    }
    let ok = onehot_exact && simplex < 1e-12 && convex && routed_exact;
    verdict(
        "7 fusion contracts",
        ok,
        format!(
            "one-hot = branch bit-exact {onehot_exact}; 1000 draws: simplex error {simplex:.1e}, within branch bounds {convex}; cluster one-hot fusion = split forward bit-exact on {} images {routed_exact}",
            ds.target.len()
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 8, 9

#[derive(Debug, Clone)]
struct SeedRun {
    source_only: f64,
    split: f64,
    hyper: f64,
    average: f64,
    distance: f64,
    meta: f64,
    online_off: f64,
    online_on: f64,
    entropy_down: f64,
    cdbn_unchanged: bool,
}

struct Runs {
    runs: Vec<SeedRun>,
    elapsed: Duration,
}

fn desk_seed(seed: u64) -> SeedRun {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = seed;
    let seeds = cfg.seeds();
    let l = RunLayout::new(dir.path());
    let ds = gen_data(&cfg.dataset, seeds.data, &l.data()).unwrap();
    let kmeans = KmeansConfig {
        k: cfg.cluster.k,
        seed: seeds.cluster,
        max_iter: cfg.cluster.max_iter,
        tol: cfg.cluster.tol,
    };
    let paths = ClusterPaths {
        centroids: l.centroids(),
        assignments: l.assignments(),
        codes: l.codes(),
        report: None,
    };
    let cluster = cluster_stage(&ds, cfg.cluster.k, &kmeans, &paths).unwrap();
    let target = |rows: Vec<metadapt::harness::report::MetricRow>| {
        rows.iter().find(|r| r.split == "target_test").unwrap().conf.miou()
    };

    let so = source_only_stage(&cfg, &ds, &l.checkpoint("source_only"), &l.log("source_only")).unwrap();
    let source_only = target(eval_stage("so", &so, &ds, None, EvalMode::SourceBank, 1.0).unwrap());
    let sp = split_stage(&cfg, &ds, &cluster, &l.checkpoint("split"), &l.log("split")).unwrap();
    let split = target(eval_stage("split", &sp, &ds, Some(&cluster), EvalMode::Routed, 1.0).unwrap());

    let fused = |fusion: Fusion, maml: bool| {
        let mut c = cfg.clone();
        c.fuse.fusion = fusion;
        let name = format!("{}_{}", if maml { "meta" } else { "fuse" }, fusion.name());
        let p = FusePaths {
            from: l.checkpoint("split"),
            out: l.checkpoint(&name),
            log: l.log(&name),
            weights: l.weights(&name),
        };
        let b = fuse_stage(&c, &ds, &cluster, maml, &p).unwrap();
        let m = target(eval_stage(&name, &b, &ds, Some(&cluster), EvalMode::Fused(fusion), c.fuse.temperature).unwrap());
        (b, m)
    };
    let (_, hyper) = fused(Fusion::Hyper, false);
    let (_, average) = fused(Fusion::Average, false);
    let (_, distance) = fused(Fusion::Distance, false);
    let (meta_b, meta) = fused(Fusion::Hyper, true);

    let order = StreamOrder::Manifest;
    let t = cfg.fuse.temperature;
    let off = eval_online(&meta_b, &ds, &cluster, Fusion::Hyper, t, order, None).unwrap();
    let on = eval_online(&meta_b, &ds, &cluster, Fusion::Hyper, t, order, Some(cfg.meta.eta(&cfg.optim))).unwrap();
    let down = on.rows.iter().filter(|r| r.entropy_after <= r.entropy_before).count();
    SeedRun {
        source_only,
        split,
        hyper,
        average,
        distance,
        meta,
        online_off: off.conf.miou(),
        online_on: on.conf.miou(),
        entropy_down: down as f64 / on.rows.len() as f64,
        cdbn_unchanged: on.bundle.cdbn_digest() == meta_b.cdbn_digest()
            && off.bundle.cdbn_digest() == meta_b.cdbn_digest(),
    }
}

fn desk_runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_seed(s)).collect();
        for (s, r) in SEEDS.iter().zip(&runs) {
            println!("  seed {s}: {r:?}");
        }
        Runs {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

fn med(runs: &[SeedRun], f: impl Fn(&SeedRun) -> f64) -> f64 {
    median(&runs.iter().map(f).collect::<Vec<_>>())
}

#[test]
fn c08_directional_ordering() {
    let r = desk_runs();
    let so = med(&r.runs, |x| x.source_only);
    let split = med(&r.runs, |x| x.split);
    let hyper = med(&r.runs, |x| x.hyper);
    let avg = med(&r.runs, |x| x.average);
    let dist = med(&r.runs, |x| x.distance);
    let meta = med(&r.runs, |x| x.meta);
    let ok = so < split && split < hyper && hyper >= avg && hyper >= dist && r.elapsed < Duration::from_secs(15 * 60);
    verdict(
        "8 directional ordering",
        ok,
        format!(
            "median target mIoU: source-only {so:.4} < split {split:.4} < fuse(hyper) {hyper:.4}; average {avg:.4}, distance {dist:.4}; (meta {meta:.4}); {:.0?} for 3 seeds",
            r.elapsed
        ),
    );
    assert!(ok);
}

#[test]
fn c09_online_update() {
    let r = desk_runs();
    let off = med(&r.runs, |x| x.online_off);
    let on = med(&r.runs, |x| x.online_on);
    let frac: Vec<f64> = r.runs.iter().map(|x| x.entropy_down).collect();
    let hashes = r.runs.iter().all(|x| x.cdbn_unchanged);
    let ok = on >= off && frac.iter().all(|&f| f >= 0.8) && hashes;
    verdict(
        "9 online update",
        ok,
        format!(
            "median open mIoU online on {on:.4} vs off {off:.4}; entropy non-increasing per seed {frac:.3?} (need >= 0.8); CDBN unchanged {hashes}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_reproducibility() {
    let mut cfg = ExperimentConfig::desk();
    cfg.seed = 17;
    cfg.dataset.counts.source = 24;
    cfg.dataset.counts.target = 32;
    cfg.dataset.counts.target_test = 8;
    cfg.dataset.counts.open = 8;
    cfg.split.iters = 12;
    cfg.fuse.iters = 4;
    cfg.fuse.warm_start_steps = 20;
    cfg.meta.iters = 4;
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_protocol(&cfg, a.path()).unwrap();
    run_protocol(&cfg, b.path()).unwrap();
    let files = [
        "source_only/checkpoint.bin",
        "split/checkpoint.bin",
        "meta/checkpoint.bin",
        "cluster/centroids.bin",
        "metrics.csv",
        "online_on.csv",
        "online_off.csv",
        "split/log.csv",
        "meta/log.csv",
    ];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(a.path().join(f)).unwrap() == std::fs::read(b.path().join(f)).unwrap())
        .collect();
    let ok = same.iter().all(|&s| s);
    verdict(
        "10 reproducibility",
        ok,
        format!("two full protocol runs, {} artifacts byte-identical: {same:?}", files.len()),
    );
    assert!(ok);
}
