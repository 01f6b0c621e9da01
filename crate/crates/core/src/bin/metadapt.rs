use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use metadapt::bundle::{ModelBundle, Stage};
use metadapt::cluster::KmeansConfig;
use metadapt::fuse::Fusion;
use metadapt::harness::report::{self, MetricRow};
use metadapt::harness::{
    cluster_stage, compare_runs, eval_online, eval_stage, fuse_stage, gen_data, load_cluster,
    load_data, run_protocol, source_only_stage, split_stage, ClusterPaths, EvalMode,
    ExperimentConfig, FusePaths, RunLayout, StreamOrder,
};
use metadapt::meta::MamlMode;
use metadapt::Error;

#[derive(Parser)]
#[command(name = "metadapt", version, about = "Open compound domain adaptation pipeline")]
struct Cli {
    /// Experiment config (TOML); the desk preset when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory that holds default input and output locations.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    GenData(DataArg),
    /// Fit style codes and k-means on the target split.
    Cluster(DataArg),
    /// Split-stage training (or the source-only reference).
    TrainSplit(TrainSplitArgs),
    /// Fuse-stage training from a split checkpoint.
    TrainFuse(FuseArgs),
    /// MAML fuse training from a split checkpoint.
    TrainMeta(MetaArgs),
    /// mIoU of a checkpoint on the target test and open splits.
    Eval(EvalArgs),
    /// Stream the open split through a fused checkpoint.
    EvalOnline(OnlineArgs),
    /// Line up the metrics of several run directories.
    Compare(CompareArgs),
    /// Every stage in order, with evaluation.
    Run,
}

#[derive(Args)]
struct DataArg {
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct Inputs {
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    centroids: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSplitArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    /// Train the source-only reference instead (no target data).
    #[arg(long)]
    source_only: bool,
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Split checkpoint to start from.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Args)]
struct MetaArgs {
    #[command(flatten)]
    fuse: FuseArgs,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// How predictions are formed; follows the checkpoint's stage when
    /// omitted.
    #[arg(long, value_enum)]
    mode: Option<EvalArg>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Metrics CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OnlineArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `manifest` or `shuffled:<seed>`.
    #[arg(long, default_value = "manifest")]
    stream_order: String,
    #[arg(long, value_enum, default_value = "on")]
    online: Switch,
    /// Online step size; the final training rate when omitted.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, value_enum)]
    fusion: Option<FusionArg>,
    /// Per-image CSV to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FusionArg {
    Hyper,
    Average,
    Distance,
    Onehot,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Fusion {
        match f {
            FusionArg::Hyper => Fusion::Hyper,
            FusionArg::Average => Fusion::Average,
            FusionArg::Distance => Fusion::Distance,
            FusionArg::Onehot => Fusion::Onehot,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    FirstOrder,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalArg {
    Source,
    Routed,
    Fused,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

struct Ctx {
    cfg: ExperimentConfig,
    layout: RunLayout,
}

impl Ctx {
    fn data(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.layout.data())
    }
    fn centroids(&self, p: &Option<PathBuf>) -> PathBuf {
        p.clone().unwrap_or_else(|| self.layout.centroids())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("bad arguments");
            print_error("usage", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            print_error(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}

/// One JSON object on stderr.
fn print_error(kind: &str, msg: &str) {
    let esc = |s: &str| {
        s.chars()
            .flat_map(|c| match c {
                '"' => "\\\"".chars().collect::<Vec<_>>(),
                '\\' => "\\\\".chars().collect(),
                '\n' => "\\n".chars().collect(),
                c if c.is_control() => format!("\\u{:04x}", c as u32).chars().collect(),
                c => vec![c],
            })
            .collect::<String>()
    };
    eprintln!("{{\"error\":\"{}\",\"message\":\"{}\"}}", esc(kind), esc(msg));
}

fn run(cli: Cli) -> metadapt::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        cfg,
        layout: RunLayout::new(&cli.out_dir),
    };
    match cli.command {
        Command::GenData(a) => {
            let dir = ctx.data(&a.data_dir);
            let ds = gen_data(&ctx.cfg.dataset, ctx.cfg.seeds().data, &dir)?;
            println!(
                "wrote {}: source {} target {} target_test {} open {}",
                dir.display(),
                ds.source.len(),
                ds.target.len(),
                ds.target_test.len(),
                ds.open.len()
            );
        }
        Command::Cluster(a) => {
            let ds = load_data(&ctx.data(&a.data_dir))?;
            let kmeans = KmeansConfig {
                k: ctx.cfg.cluster.k,
                seed: ctx.cfg.seeds().cluster,
                max_iter: ctx.cfg.cluster.max_iter,
                tol: ctx.cfg.cluster.tol,
            };
            let paths = ClusterPaths {
                centroids: ctx.layout.centroids(),
                assignments: ctx.layout.assignments(),
                codes: ctx.layout.codes(),
                report: Some(ctx.layout.cluster_report()),
            };
            let m = cluster_stage(&ds, ctx.cfg.cluster.k, &kmeans, &paths)?;
            println!(
                "k={} inertia {:.4} after {} iterations -> {}",
                m.k(),
                m.centroids.inertia,
                m.centroids.iterations,
                paths.centroids.display()
            );
        }
        Command::TrainSplit(a) => train_split_cmd(ctx, a)?,
        Command::TrainFuse(a) => train_fuse_cmd(ctx, a, None)?,
        Command::TrainMeta(a) => {
            let mode = a.mode;
            train_fuse_cmd(ctx, a.fuse, Some(mode))?
        }
        Command::Eval(a) => eval_cmd(ctx, a)?,
        Command::EvalOnline(a) => online_cmd(ctx, a)?,
        Command::Compare(a) => {
            let c = compare_runs(&a.runs)?;
            print!("{c}");
            if let Some(out) = a.out {
                c.write_csv(&out)?;
            }
        }
        Command::Run => {
            let art = run_protocol(&ctx.cfg, &ctx.layout.root)?;
            for r in &art.metrics {
                println!("{:<22} {:<12} {:<16} {:.4}", r.model, r.split, r.mode, r.conf.miou());
            }
        }
    }
    Ok(())
}

fn train_split_cmd(mut ctx: Ctx, a: TrainSplitArgs) -> metadapt::Result<()> {
    if let Some(n) = a.iters {
        ctx.cfg.split.iters = n;
    }
    let ds = load_data(&ctx.data(&a.inputs.data_dir))?;
    let name = if a.source_only { "source_only" } else { "split" };
    let out = a.out_checkpoint.unwrap_or_else(|| ctx.layout.checkpoint(name));
    let log = a.log.unwrap_or_else(|| sibling(&out, "log.csv"));
    let b = if a.source_only {
        source_only_stage(&ctx.cfg, &ds, &out, &log)?
    } else {
        let cluster = load_cluster(&ctx.centroids(&a.inputs.centroids))?;
        split_stage(&ctx.cfg, &ds, &cluster, &out, &log)?
    };
    println!("{} iterations -> {} (log {})", b.iteration, out.display(), log.display());
    Ok(())
}

fn train_fuse_cmd(mut ctx: Ctx, a: FuseArgs, meta: Option<Option<ModeArg>>) -> metadapt::Result<()> {
    let maml = meta.is_some();
    if let Some(f) = a.fusion {
        ctx.cfg.fuse.fusion = f.into();
    }
    if let Some(n) = a.iters {
        if maml {
            ctx.cfg.meta.iters = n;
        } else {
            ctx.cfg.fuse.iters = n;
        }
    }
    if let Some(Some(m)) = meta {
        ctx.cfg.meta.mode = match m {
            ModeArg::Exact => MamlMode::Exact,
            ModeArg::FirstOrder => MamlMode::FirstOrder,
        };
    }
    let name = if maml { "meta" } else { "fuse" };
    let ds = load_data(&ctx.data(&a.inputs.data_dir))?;
    let cluster = load_cluster(&ctx.centroids(&a.inputs.centroids))?;
    let out = a.out_checkpoint.unwrap_or_else(|| ctx.layout.checkpoint(name));
    let paths = FusePaths {
        from: a.checkpoint.unwrap_or_else(|| ctx.layout.checkpoint("split")),
        log: a.log.unwrap_or_else(|| sibling(&out, "log.csv")),
        weights: a.weights.unwrap_or_else(|| sibling(&out, "weights.csv")),
        out,
    };
    let b = fuse_stage(&ctx.cfg, &ds, &cluster, maml, &paths)?;
    println!(
        "{} fusion, {} iterations -> {} (log {}, weights {})",
        ctx.cfg.fuse.fusion.name(),
        b.iteration,
        paths.out.display(),
        paths.log.display(),
        paths.weights.display()
    );
    Ok(())
}

fn sibling(path: &Path, file: &str) -> PathBuf {
    path.parent().map(|d| d.join(file)).unwrap_or_else(|| PathBuf::from(file))
}

fn eval_cmd(ctx: Ctx, a: EvalArgs) -> metadapt::Result<()> {
    let ds = load_data(&ctx.data(&a.inputs.data_dir))?;
    let b = load_checkpoint(&a.checkpoint)?;
    let fusion = a.fusion.map(Fusion::from).unwrap_or(ctx.cfg.fuse.fusion);
    let mode = match a.mode {
        Some(EvalArg::Source) => EvalMode::SourceBank,
        Some(EvalArg::Routed) => EvalMode::Routed,
        Some(EvalArg::Fused) => EvalMode::Fused(fusion),
        None => match b.stage {
            Stage::Init | Stage::Supervised => EvalMode::SourceBank,
            Stage::Split => EvalMode::Routed,
            Stage::Fuse | Stage::Meta => EvalMode::Fused(fusion),
        },
    };
    let cluster = match mode {
        EvalMode::SourceBank => None,
        _ => Some(load_cluster(&ctx.centroids(&a.inputs.centroids))?),
    };
    let rows = eval_stage(b.stage.name(), &b, &ds, cluster.as_ref(), mode, ctx.cfg.fuse.temperature)?;
    print_metrics(&rows);
    if let Some(out) = a.out {
        report::write_metrics(&out, &rows)?;
    }
    Ok(())
}

fn online_cmd(ctx: Ctx, a: OnlineArgs) -> metadapt::Result<()> {
    let ds = load_data(&ctx.data(&a.inputs.data_dir))?;
    let cluster = load_cluster(&ctx.centroids(&a.inputs.centroids))?;
    let b = load_checkpoint(&a.checkpoint)?;
    let fusion = a.fusion.map(Fusion::from).unwrap_or(ctx.cfg.fuse.fusion);
    let order = StreamOrder::parse(&a.stream_order)?;
    let eta = match a.online {
        Switch::On => Some(a.eta.unwrap_or_else(|| ctx.cfg.meta.eta(&ctx.cfg.optim))),
        Switch::Off => None,
    };
    let r = eval_online(&b, &ds, &cluster, fusion, ctx.cfg.fuse.temperature, order, eta)?;
    let on = a.online == Switch::On;
    let out = a.out.unwrap_or_else(|| ctx.layout.online(on));
    report::write_online(&out, &r.rows)?;
    let dec = r.rows.iter().filter(|x| x.entropy_after <= x.entropy_before).count();
    println!(
        "online {}: open mIoU {:.4}, entropy non-increasing on {}/{} images -> {}",
        if on { "on" } else { "off" },
        r.conf.miou(),
        dec,
        r.rows.len(),
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> metadapt::Result<ModelBundle> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            what: "checkpoint".into(),
        });
    }
    ModelBundle::load(path)
}

fn print_metrics(rows: &[MetricRow]) {
    for r in rows {
        println!("{:<12} {:<12} {:<16} {:.4}", r.model, r.split, r.mode, r.conf.miou());
    }
}
