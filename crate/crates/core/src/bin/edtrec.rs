use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use edtrec::agent::DtAgent;
use edtrec::config::ExperimentConfig;
use edtrec::envsim::{default_policies, generate_offline_dataset, ItemGraph};
use edtrec::eval::{evaluate_policy, known_paths, rank_metrics};
use edtrec::experiment::{self, graph_encoder, graph_manifest, new_learner, save_eval, write_jsonl};
use edtrec::policy::{objective_gradcheck, Checkpoint, SampleMode};
use edtrec::qlearn::{cql_fit, QTable};
use edtrec::relabel::{relabel_dataset, table_value};
use edtrec::trainer::{finetune_online, pretrain_offline, RelabelMode};
use edtrec::trajectory::{
    ingest_ratings, load_dataset, load_manifest, read_ratings_csv, save_dataset, DatasetManifest, StateSpace,
};
use edtrec::{Error, Result};

/// Return-conditioned recommendation policies with value-guided relabeling.
#[derive(Parser, Debug)]
#[command(name = "edtrec", version)]
struct Cli {
    /// Seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that relative output paths are placed in.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// key=value config file; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate an offline dataset from an item graph or a ratings log.
    GenData(GenData),
    /// Fit the conservative Q-table on a dataset.
    FitQ(FitQ),
    /// Attach value-guided RTG to every trajectory.
    Relabel(RelabelCmd),
    /// Offline pretraining.
    Pretrain(Pretrain),
    /// Online finetuning against an item graph.
    Finetune(Finetune),
    /// Episodic evaluation against an item graph.
    Eval(EvalCmd),
    /// Top-k ranking metrics on held-out trajectories.
    RankEval(RankEval),
    /// Finite-difference checks of the autodiff primitives and the policy loss.
    GradCheck(GradCheck),
    /// Full pipeline into one directory.
    Run(Run),
}

#[derive(Args, Debug, Clone, Default)]
struct PolicyFlags {
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    /// Entropy target; `auto` for the default.
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    sigma_min: Option<f64>,
    #[arg(long)]
    sigma_max: Option<f64>,
    /// `dual`, `off`, or a fixed λ.
    #[arg(long)]
    entropy: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args, Debug)]
struct GenData {
    /// Item graph file (built-in graph if omitted).
    #[arg(long, conflicts_with = "ratings")]
    graph: Option<PathBuf>,
    /// Number of episodes.
    #[arg(long)]
    n: Option<usize>,
    /// Ratings CSV (user,item,rating,timestamp).
    #[arg(long, requires = "max_rating")]
    ratings: Option<PathBuf>,
    #[arg(long)]
    max_rating: Option<f64>,
    /// Clicked items kept in each ratings state.
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitQ {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    sweeps: Option<usize>,
    /// `uniform_logged` or `uniform_all`.
    #[arg(long)]
    mu: Option<String>,
}

#[derive(Args, Debug)]
struct RelabelCmd {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    qtable: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-trajectory audit records.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Pretrain {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Size the item encoder from this graph instead of the manifest.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Q-table for relabeling (fitted on the dataset if omitted).
    #[arg(long)]
    qtable: Option<PathBuf>,
    #[arg(long)]
    relabel: Option<RelabelMode>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args, Debug)]
struct Finetune {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    g_online: Option<f64>,
    #[arg(long = "K")]
    k: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-round metrics (defaults to `<out>.metrics.jsonl`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Never evict the top-N seed trajectories.
    #[arg(long)]
    protect_seeds: bool,
    #[arg(long)]
    relabel: Option<RelabelMode>,
    #[arg(long)]
    qtable: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalCmd {
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// Offline dataset; its paths do not count as stitched.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    g_online: Option<f64>,
    /// Sample actions instead of taking the mean.
    #[arg(long)]
    stochastic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankEval {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Condition on this return instead of the logged one.
    #[arg(long)]
    g_online: Option<f64>,
}

#[derive(Args, Debug)]
struct GradCheck {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Entries checked per policy parameter tensor (all if omitted).
    #[arg(long)]
    per_param: Option<usize>,
}

#[derive(Args, Debug)]
struct Run {
    /// Extra `key=value` overrides.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    graph: Option<PathBuf>,
}

struct Ctx {
    seed: Option<u64>,
    out_dir: Option<PathBuf>,
    cfg: ExperimentConfig,
}

impl Ctx {
    fn out(&self, p: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if p.is_relative() => d.join(p),
            _ => p.to_path_buf(),
        }
    }

    fn write_target(&self, p: &Path) -> Result<PathBuf> {
        let p = self.out(p);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn graph(&self, flag: Option<&Path>) -> Result<ItemGraph> {
        match flag.or(self.cfg.graph.as_deref()) {
            Some(p) => ItemGraph::from_file(p),
            None => Ok(ItemGraph::stitch_world()),
        }
    }
}

fn apply_policy_flags(cfg: &mut ExperimentConfig, f: &PolicyFlags) -> Result<()> {
    let here = Path::new(".");
    let pairs = [
        ("layers", f.layers.map(|v| v.to_string())),
        ("heads", f.heads.map(|v| v.to_string())),
        ("width", f.width.map(|v| v.to_string())),
        ("beta", f.beta.clone()),
        ("sigma_min", f.sigma_min.map(|v| v.to_string())),
        ("sigma_max", f.sigma_max.map(|v| v.to_string())),
        ("entropy", f.entropy.clone()),
        ("lr", f.lr.map(|v| v.to_string())),
    ];
    for (k, v) in pairs {
        if let Some(v) = v {
            cfg.set(k, &v, here)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    // `run` may still get its graph from a flag, so the key is checked there.
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file_partial(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ctx = Ctx {
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        cfg,
    };
    match cli.cmd {
        Cmd::GenData(a) => gen_data(ctx, a),
        Cmd::FitQ(a) => fit_q(ctx, a),
        Cmd::Relabel(a) => relabel(ctx, a),
        Cmd::Pretrain(a) => pretrain(ctx, a),
        Cmd::Finetune(a) => finetune(ctx, a),
        Cmd::Eval(a) => eval(ctx, a),
        Cmd::RankEval(a) => rank_eval(ctx, a),
        Cmd::GradCheck(a) => grad_check(a),
        Cmd::Run(a) => run(ctx, a),
    }
}

fn gen_data(ctx: Ctx, a: GenData) -> Result<()> {
    let out = ctx.write_target(&a.out)?;
    if let Some(path) = &a.ratings {
        let max = a.max_rating.expect("clap enforces --max-rating");
        let log = ingest_ratings(&read_ratings_csv(path)?, max, a.window, None)?;
        let m = DatasetManifest::new(
            &log.trajectories,
            edtrec::trajectory::ActionSpace::Discrete(log.items.len()),
            StateSpace::IdWindow {
                slots: a.window,
                n_items: log.items.len(),
            },
            format!("ratings {}", path.display()),
        );
        save_dataset(&out, &log.trajectories, &m)?;
        println!(
            "{} trajectories, {} items -> {}",
            log.trajectories.len(),
            log.items.len(),
            out.display()
        );
        return Ok(());
    }
    let graph = ctx.graph(a.graph.as_deref())?;
    let n = a.n.unwrap_or(ctx.cfg.n_trajectories);
    let data = generate_offline_dataset(&graph, &default_policies(&graph), n, ctx.cfg.seed)?;
    save_dataset(
        &out,
        &data,
        &graph_manifest(&graph, &data, "item-graph logging policies"),
    )?;
    println!("{n} trajectories -> {}", out.display());
    Ok(())
}

fn fit_q(ctx: Ctx, a: FitQ) -> Result<()> {
    let mut cql = ctx.cfg.cql().clone();
    if let Some(v) = a.alpha {
        cql.alpha = v;
    }
    if let Some(v) = a.gamma {
        cql.gamma = v;
    }
    if let Some(v) = a.sweeps {
        cql.sweeps = v;
    }
    if let Some(v) = &a.mu {
        cql.mu = v.parse()?;
    }
    let q = cql_fit(&load_dataset(&a.dataset)?, &cql)?;
    let out = ctx.write_target(&a.out)?;
    q.save(&out)?;
    println!("{} state-action values -> {}", q.len(), out.display());
    Ok(())
}

fn relabel(ctx: Ctx, a: RelabelCmd) -> Result<()> {
    let mut data = load_dataset(&a.dataset)?;
    let q = QTable::load(&a.qtable)?;
    let report = relabel_dataset(&mut data, table_value(&q))?;
    let manifest = match load_manifest(&a.dataset) {
        Ok(m) => DatasetManifest::new(
            &data,
            m.action_space,
            m.state_space,
            format!("relabeled {}", a.dataset.display()),
        ),
        Err(_) => DatasetManifest::infer(&data, "relabeled")?,
    };
    let out = ctx.write_target(&a.out)?;
    save_dataset(&out, &data, &manifest)?;
    if let Some(r) = &a.report {
        report.save(&ctx.write_target(r)?)?;
    }
    println!(
        "{} of {} trajectories raised -> {}",
        report.trajectories_raised(),
        data.len(),
        out.display()
    );
    Ok(())
}

fn pretrain(mut ctx: Ctx, a: Pretrain) -> Result<()> {
    apply_policy_flags(&mut ctx.cfg, &a.policy)?;
    if let Some(k) = a.k {
        ctx.cfg.set("K", &k.to_string(), Path::new("."))?;
    }
    let data = load_dataset(&a.dataset)?;
    let enc = match a.graph.as_deref().or(ctx.cfg.graph.as_deref()) {
        Some(p) => graph_encoder(&ItemGraph::from_file(p)?, ctx.cfg.d_a, ctx.cfg.seed)?,
        None => {
            let m = load_manifest(&a.dataset).or_else(|_| DatasetManifest::infer(&data, "inferred"))?;
            edtrec::features::Encoder::for_manifest(&m, ctx.cfg.d_a, ctx.cfg.seed)?
        }
    };
    let mut train = ctx.cfg.train_config();
    if let Some(r) = a.relabel {
        train.relabel = r;
    }
    if let Some(i) = a.iters {
        train.pretrain_iters = i;
    }
    let q = a.qtable.as_deref().map(QTable::load).transpose()?;
    let mut learner = new_learner(&ctx.cfg, &enc)?;
    let stats = pretrain_offline(&mut learner, &enc, &data, &train, q.as_ref())?;
    let out = ctx.write_target(&a.out)?;
    Checkpoint::from_learner(&learner, &enc)?.save(&out)?;
    if let Some(s) = stats.last() {
        println!(
            "{} steps: nll {:.4} entropy {:.4} lambda {:.4} -> {}",
            stats.len(),
            s.nll,
            s.entropy,
            s.lambda,
            out.display()
        );
    }
    Ok(())
}

fn finetune(ctx: Ctx, a: Finetune) -> Result<()> {
    let graph = ctx.graph(a.graph.as_deref())?;
    let data = load_dataset(&a.dataset)?;
    let (mut learner, enc) = Checkpoint::load(&a.ckpt)?.into_parts()?;
    let mut train = ctx.cfg.train_config();
    train.k = learner.net.cfg.k;
    if let Some(k) = a.k {
        train.k = k;
    }
    if let Some(g) = a.g_online {
        train.g_online = g;
    }
    if let Some(r) = a.rounds {
        train.rounds = r;
    }
    if let Some(r) = a.relabel {
        train.relabel = r;
    }
    train.protect_seeds |= a.protect_seeds;
    let q = a.qtable.as_deref().map(QTable::load).transpose()?;
    let metrics = finetune_online(&graph, &mut learner, &enc, &data, &train, q.as_ref())?;
    let out = ctx.write_target(&a.out)?;
    Checkpoint::from_learner(&learner, &enc)?.save(&out)?;
    let metrics_path = match &a.metrics {
        Some(p) => ctx.write_target(p)?,
        None => PathBuf::from(format!("{}.metrics.jsonl", out.display())),
    };
    write_jsonl(&metrics_path, &metrics)?;
    println!(
        "{} rounds -> {} (metrics {})",
        metrics.len(),
        out.display(),
        metrics_path.display()
    );
    Ok(())
}

fn eval(ctx: Ctx, a: EvalCmd) -> Result<()> {
    let graph = ctx.graph(a.graph.as_deref())?;
    let (learner, enc) = Checkpoint::load(&a.ckpt)?.into_parts()?;
    let known = match &a.dataset {
        Some(p) => known_paths(&load_dataset(p)?),
        None => Default::default(),
    };
    let mode = if a.stochastic {
        SampleMode::Stochastic
    } else {
        SampleMode::Mean
    };
    let g = a.g_online.unwrap_or(ctx.cfg.train.g_online);
    let mut agent = DtAgent::new(&learner.net, &enc, g, mode);
    let episodes = a.episodes.unwrap_or(ctx.cfg.eval_episodes);
    let seed = ctx.seed.unwrap_or(ctx.cfg.eval_seed);
    let r = evaluate_policy(&graph, &mut agent, episodes, &known, seed, ctx.cfg.train.step_cap)?;
    if let Some(p) = &a.out {
        save_eval(&ctx.write_target(p)?, &r)?;
    }
    println!(
        "episodes {} mean_return {:.4} std {:.4} stitch_rate {:.4}",
        r.episodes, r.mean_return, r.std_return, r.stitch_rate
    );
    Ok(())
}

fn rank_eval(_ctx: Ctx, a: RankEval) -> Result<()> {
    let (learner, enc) = Checkpoint::load(&a.ckpt)?.into_parts()?;
    let m = rank_metrics(&learner.net, &enc, &load_dataset(&a.dataset)?, a.k, a.g_online)?;
    println!(
        "recall@{k} {:.4} precision@{k} {:.4} ndcg@{k} {:.4}",
        m.recall,
        m.precision,
        m.ndcg,
        k = a.k
    );
    Ok(())
}

fn grad_check(a: GradCheck) -> Result<()> {
    let mut ok = true;
    for name in numcore::gradcheck::PRIMITIVES {
        let worst = (0..a.seeds)
            .map(|s| numcore::gradcheck::check_primitive(name, s).map(|r| r.max_rel_err))
            .collect::<std::result::Result<Vec<_>, _>>()?
            .into_iter()
            .fold(0.0, f64::max);
        ok &= worst < a.tol;
        println!(
            "{:<8} {name:<16} max rel err {worst:.3e}",
            if worst < a.tol { "PASS" } else { "FAIL" }
        );
    }
    let cfg = edtrec::policy::PolicyConfig {
        layers: 2,
        width: 16,
        state_dim: 4,
        action_dim: 3,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for s in 0..a.seeds {
        worst = worst.max(objective_gradcheck(&cfg, s, 0.5, a.per_param)?.max_rel_err);
    }
    ok &= worst < a.tol;
    println!(
        "{:<8} {:<16} max rel err {worst:.3e}",
        if worst < a.tol { "PASS" } else { "FAIL" },
        "policy J-λH"
    );
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "gradient check above tolerance {}",
            a.tol
        )))
    }
}

fn run(ctx: Ctx, a: Run) -> Result<()> {
    let mut cfg = ctx.cfg.clone();
    let here = Path::new(".");
    if let Some(g) = &a.graph {
        cfg.set("graph", &g.display().to_string(), here)?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim(), here)?;
    }
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if cfg.graph.is_none() {
        return Err(Error::MissingKey("graph".into()));
    }
    let dir = ctx
        .out_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("seed{}", cfg.seed)));
    let s = experiment::run(&cfg, &dir)?;
    println!(
        "mean_return {:.4} stitch_rate {:.4} -> {}",
        s.eval.mean_return,
        s.eval.stitch_rate,
        s.dir.display()
    );
    Ok(())
}
