//! End-to-end pipeline: data → Q-table → relabel → pretrain → finetune → eval.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::agent::DtAgent;
use crate::config::ExperimentConfig;
use crate::envsim::{default_policies, generate_offline_dataset, ItemGraph};
use crate::error::{Error, Result};
use crate::eval::{evaluate_policy, known_paths, EvalReport};
use crate::features::Encoder;
use crate::policy::{Checkpoint, Learner, PolicyNet, SampleMode};
use crate::qlearn::{cql_fit, QTable};
use crate::relabel::{relabel_dataset, table_value};
use crate::trainer::{finetune_online, pretrain_offline};
use crate::trajectory::{load_dataset, save_dataset, DatasetManifest};

pub const DATASET: &str = "dataset.jsonl";
pub const QTABLE: &str = "qtable.txt";
pub const RELABELED: &str = "relabeled.jsonl";
pub const PRETRAIN_CKPT: &str = "pretrain.ckpt";
pub const FINETUNE_CKPT: &str = "finetune.ckpt";
pub const METRICS: &str = "metrics.jsonl";
pub const EVAL: &str = "eval.jsonl";
pub const RESOLVED: &str = "resolved.cfg";
pub const RELABEL_REPORT: &str = "relabel_report.jsonl";

/// The named artifacts every run produces (besides the resolved config).
pub const ARTIFACTS: [&str; 7] = [DATASET, QTABLE, RELABELED, PRETRAIN_CKPT, FINETUNE_CKPT, METRICS, EVAL];

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    })
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| Error::format(path, e))?;
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}

/// Item encoder sized by the graph rather than by what a dataset happens
/// to contain.
pub fn graph_encoder(graph: &ItemGraph, d_a: usize, seed: u64) -> Result<Encoder> {
    let (state, action) = graph.spaces();
    Encoder::new(state, action, d_a, seed)
}

pub fn graph_manifest(graph: &ItemGraph, data: &[crate::trajectory::Trajectory], provenance: &str) -> DatasetManifest {
    let (state, action) = graph.spaces();
    DatasetManifest::new(data, action, state, provenance)
}

/// Fresh learner for `enc`, shaped by `cfg`.
pub fn new_learner(cfg: &ExperimentConfig, enc: &Encoder) -> Result<Learner> {
    let policy = cfg.policy_for(enc.state_dim(), enc.action_dim());
    let learner = cfg.learner_for(&policy);
    Learner::new(PolicyNet::new(policy, cfg.seed)?, learner)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub stitch_rate: f64,
}

/// Summary line followed by one line per episode.
pub fn save_eval(path: &Path, r: &EvalReport) -> Result<()> {
    let summary = EvalSummary {
        episodes: r.episodes,
        mean_return: r.mean_return,
        std_return: r.std_return,
        stitch_rate: r.stitch_rate,
    };
    let mut lines = vec![serde_json::to_value(summary).map_err(|e| Error::format(path, e))?];
    for t in &r.traces {
        lines.push(serde_json::to_value(t).map_err(|e| Error::format(path, e))?);
    }
    write_jsonl(path, lines)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub eval: EvalReport,
}

/// Runs every stage into `out`. A failure names the stage it came from.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let graph_path = cfg.graph.clone().ok_or_else(|| Error::MissingKey("graph".into()))?;
    fs::create_dir_all(out)?;
    fs::write(out.join(RESOLVED), cfg.to_text())?;
    let train = cfg.train_config();

    let graph = stage("gen-data", || {
        let graph = ItemGraph::from_file(&graph_path)?;
        let data = generate_offline_dataset(&graph, &default_policies(&graph), cfg.n_trajectories, cfg.seed)?;
        save_dataset(
            &out.join(DATASET),
            &data,
            &graph_manifest(&graph, &data, "item-graph logging policies"),
        )?;
        Ok(graph)
    })?;

    let q = stage("fit-q", || {
        let data = load_dataset(&out.join(DATASET))?;
        let q = cql_fit(&data, cfg.cql())?;
        q.save(&out.join(QTABLE))?;
        Ok(q)
    })?;

    stage("relabel", || {
        let mut data = load_dataset(&out.join(DATASET))?;
        let report = relabel_dataset(&mut data, table_value(&q))?;
        save_dataset(&out.join(RELABELED), &data, &graph_manifest(&graph, &data, "relabeled"))?;
        report.save(&out.join(RELABEL_REPORT))
    })?;

    stage("pretrain", || {
        let data = load_dataset(&out.join(RELABELED))?;
        let enc = graph_encoder(&graph, cfg.d_a, cfg.seed)?;
        let mut learner = new_learner(cfg, &enc)?;
        let q = QTable::load(&out.join(QTABLE))?;
        pretrain_offline(&mut learner, &enc, &data, &train, Some(&q))?;
        Checkpoint::from_learner(&learner, &enc)?.save(&out.join(PRETRAIN_CKPT))
    })?;

    stage("finetune", || {
        let data = load_dataset(&out.join(DATASET))?;
        let (mut learner, enc) = Checkpoint::load(&out.join(PRETRAIN_CKPT))?.into_parts()?;
        let q = QTable::load(&out.join(QTABLE))?;
        let metrics = finetune_online(&graph, &mut learner, &enc, &data, &train, Some(&q))?;
        write_jsonl(&out.join(METRICS), &metrics)?;
        Checkpoint::from_learner(&learner, &enc)?.save(&out.join(FINETUNE_CKPT))
    })?;

    let eval = stage("eval", || {
        let data = load_dataset(&out.join(DATASET))?;
        let (learner, enc) = Checkpoint::load(&out.join(FINETUNE_CKPT))?.into_parts()?;
        let mut agent = DtAgent::new(&learner.net, &enc, train.g_online, SampleMode::Mean);
        let report = evaluate_policy(
            &graph,
            &mut agent,
            cfg.eval_episodes,
            &known_paths(&data),
            cfg.eval_seed,
            train.step_cap,
        )?;
        save_eval(&out.join(EVAL), &report)?;
        Ok(report)
    })?;

    Ok(RunSummary {
        dir: out.to_path_buf(),
        eval,
    })
}
