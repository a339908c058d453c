//! The work behind each CLI verb, callable without a process boundary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use irk_core::eval::{CrossMode, EvalReport};
use irk_core::instruct::{PhraseBank, TaskKind};
use irk_core::model::Model;
use irk_core::protocol::{
    self, evaluate_self, evaluate_sweep, evaluate_task, Embedder, QueryInstruction, RetrievalFeature,
};
use irk_core::synth::{Dataset, Modality, Split};
use irk_core::train::{InstructionFeatures, Trainer};
use irk_core::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, write_atomic};
use crate::config::RunConfig;
use crate::data::{load_dataset, render_parallel, thread_count, write_dataset, DatasetInfo};
use crate::error::{io_err, json_err, IrkError, Result};
use crate::metrics::MetricsLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.irk";
pub const METRICS_FILE: &str = "metrics.json";

/// Dataset and rendered images: read from `cfg.data` when set, otherwise
/// generated from `cfg.synth`.
pub fn dataset_for(cfg: &RunConfig) -> Result<(Dataset, Vec<Tensor<f32>>)> {
    let threads = thread_count(cfg.deterministic)?;
    match &cfg.data {
        Some(dir) => load_dataset(dir, threads),
        None => {
            let ds = Dataset::generate(cfg.synth.clone())?;
            let images = render_parallel(&ds, threads)?;
            Ok((ds, images))
        }
    }
}

pub fn build_trainer(cfg: &RunConfig) -> Result<Trainer> {
    cfg.validate()?;
    let (ds, images) = dataset_for(cfg)?;
    Ok(Trainer::new(
        cfg.model.clone(),
        cfg.train.clone(),
        ds,
        images,
        PhraseBank::builtin()?,
        cfg.seed,
    )?)
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub log: MetricsLog,
    /// Last checkpoint written, if an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Trains for `cfg.steps` steps, then evaluates every enabled task.
///
/// With `out_dir`, `checkpoint.irk` is rewritten every
/// `cfg.checkpoint_every` steps and after the last one, and `metrics.json`
/// holds the log. A failing step leaves the previous checkpoint in place.
pub fn train(mut trainer: Trainer, cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let start = Instant::now();
    let mut log = MetricsLog::default();
    let ckpt_path = match out_dir {
        Some(d) => {
            fs::create_dir_all(d).map_err(io_err(d))?;
            Some(d.join(CHECKPOINT_FILE))
        }
        None => None,
    };
    let mut saved: Option<u64> = None;
    let save = |t: &Trainer, saved: &mut Option<u64>| -> Result<()> {
        if let Some(p) = &ckpt_path {
            checkpoint::save(p, &t.model, &t.store, t.steps_done())?;
            *saved = Some(t.steps_done());
        }
        Ok(())
    };
    for _ in 0..cfg.steps {
        let rec = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                let kept = match (saved, &ckpt_path) {
                    (Some(s), Some(p)) => format!("; last good checkpoint (step {s}) kept at {}", p.display()),
                    _ => String::new(),
                };
                return Err(IrkError::Config(format!(
                    "training aborted at step {}: {e}{kept}",
                    trainer.steps_done()
                )));
            }
        };
        if rec.step % 50 == 0 {
            log::info!("step {} {} loss {:.4} lr {:.2e}", rec.step, rec.task, rec.loss, rec.lr);
        }
        log.push(rec, start.elapsed().as_secs_f64())?;
        let done = trainer.steps_done();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            save(&trainer, &mut saved)?;
        }
    }
    if saved != Some(trainer.steps_done()) {
        save(&trainer, &mut saved)?;
    }
    let tasks: Vec<TaskKind> = {
        let mut seen = BTreeSet::new();
        cfg.train.tasks.iter().copied().filter(|t| seen.insert(*t)).collect()
    };
    log.evals = evaluate_tasks(
        &trainer.model,
        &trainer.store,
        &trainer.data,
        &trainer.images,
        cfg.feature,
        &tasks,
        None,
        false,
    )?;
    if let Some(d) = out_dir {
        write_json(&d.join(METRICS_FILE), &log)?;
    }
    Ok(TrainOutcome {
        trainer,
        log,
        checkpoint: ckpt_path,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(json_err(path))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn has_task(data: &Dataset, task: TaskKind, modality: Option<Modality>) -> bool {
    let tagged = |s: Split| {
        data.split(s)
            .any(|r| r.tasks.contains(&task) && modality.is_none_or(|m| r.modality == m))
    };
    tagged(Split::Query) && tagged(Split::Gallery)
}

/// Reports for `tasks` on the test split. VI without `mode` is reported in
/// both directions.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_tasks(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    images: &[Tensor<f32>],
    feature: RetrievalFeature,
    tasks: &[TaskKind],
    mode: Option<CrossMode>,
    sweep: bool,
) -> Result<Vec<EvalReport>> {
    let bank = PhraseBank::builtin()?;
    let mut features = InstructionFeatures::new();
    let mut emb = Embedder {
        feature,
        model,
        store,
        data,
        images,
        features: &mut features,
    };
    let mut out = Vec::new();
    for &task in tasks {
        if !has_task(data, task, None) {
            return Err(IrkError::Config(format!("task {task} is not present in the manifest")));
        }
        let modes = match (task, mode) {
            (TaskKind::Vi, Some(m)) => vec![Some(m)],
            (TaskKind::Vi, None) => vec![Some(CrossMode::Vis2ir), Some(CrossMode::Ir2vis)],
            _ => vec![None],
        };
        for m in modes {
            let report = if sweep {
                evaluate_sweep(&mut emb, &bank, task, m)?
            } else {
                evaluate_task(&mut emb, &bank, task, m)?.report
            };
            out.push(report);
        }
    }
    Ok(out)
}

/// Trad queries searched against themselves; a sound pipeline scores 1.0.
pub fn evaluate_self_gallery(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    images: &[Tensor<f32>],
    feature: RetrievalFeature,
) -> Result<EvalReport> {
    let bank = PhraseBank::builtin()?;
    let mut features = InstructionFeatures::new();
    let mut emb = Embedder {
        feature,
        model,
        store,
        data,
        images,
        features: &mut features,
    };
    Ok(evaluate_self(&mut emb, &bank)?.report)
}

/// Generates the dataset of `cfg.synth` into `dir`.
pub fn synth(cfg: &RunConfig, dir: &Path, inline: bool) -> Result<DatasetInfo> {
    cfg.validate()?;
    let ds = Dataset::generate(cfg.synth.clone())?;
    write_dataset(dir, &ds, inline, thread_count(cfg.deterministic)?)
}

/// Instruction of a free-form retrieval query.
#[derive(Clone, Debug)]
pub enum QueryInput {
    Text(Vec<String>),
    Template(Tensor<f32>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub rank: usize,
    pub record: usize,
    pub identity: usize,
    pub camera: usize,
    pub clothes: usize,
    pub score: f64,
}

/// The `top_n` best gallery records for one query. The gallery is every
/// gallery-split record tagged with `task`; for VI, `mode` restricts it to
/// the target modality.
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    model: &Model,
    store: &ParamStore<f32>,
    data: &Dataset,
    images: &[Tensor<f32>],
    feature: RetrievalFeature,
    task: TaskKind,
    mode: Option<CrossMode>,
    image: Option<&Tensor<f32>>,
    instruction: &QueryInput,
    top_n: usize,
) -> Result<Vec<RankedItem>> {
    let target = match (task, mode) {
        (TaskKind::Vi, Some(CrossMode::Vis2ir)) => Some(Modality::Infrared),
        (TaskKind::Vi, Some(CrossMode::Ir2vis)) => Some(Modality::Visible),
        _ => None,
    };
    let gallery: Vec<usize> = data
        .split(Split::Gallery)
        .filter(|r| r.tasks.contains(&task) && target.is_none_or(|m| r.modality == m))
        .map(|r| r.index)
        .collect();
    if gallery.is_empty() {
        return Err(IrkError::Config(format!("no gallery records tagged {task}")));
    }
    let mut features = InstructionFeatures::new();
    let mut emb = Embedder {
        feature,
        model,
        store,
        data,
        images,
        features: &mut features,
    };
    let q = match instruction {
        QueryInput::Text(s) => QueryInstruction::Text(s),
        QueryInput::Template(t) => QueryInstruction::Template(t),
    };
    let hits = protocol::retrieve(&mut emb, task, image, q, &gallery, top_n)?;
    Ok(hits
        .into_iter()
        .enumerate()
        .map(|(i, h)| {
            let r = &data.records[h.record];
            RankedItem {
                rank: i + 1,
                record: h.record,
                identity: r.identity,
                camera: r.camera,
                clothes: r.clothes,
                score: h.score,
            }
        })
        .collect())
}
