use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use afn_core::env::TreeEnv;
use afn_core::model::{AnyModel, NeuralConfig, NeuralModel, TabularModel};
use afn_core::selfplay::{Metrics, ObjectiveKind, TbTrainer, TrainConfig, TrainError, TreeTrainer};
use afn_core::tree::ExpandedTree;
use serde::{Deserialize, Serialize};

use super::{default_out, Common};
use crate::checkpoint::{Checkpoint, TrainerState};
use crate::config::{self, default_version, EnvConfig};
use crate::{with_env, CliError};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// One logit row per position key.
    #[default]
    Tabular,
    Neural(NeuralConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRun {
    #[serde(default = "default_version")]
    pub version: u32,
    pub env: EnvConfig,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "train_out")]
    pub out_dir: PathBuf,
    /// Save a checkpoint every this many epochs; the last epoch always saves.
    #[serde(default = "one")]
    pub checkpoint_every: usize,
}

fn train_out() -> PathBuf {
    default_out("train")
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub step: u64,
    pub epochs: u64,
    pub last: Option<Metrics>,
}

pub fn run(common: &Common, resume: bool) -> Result<TrainSummary, CliError> {
    let run: TrainRun = config::load(common.config.as_deref(), &common.overrides())?;
    train(&run, resume)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.json")
}

pub fn train(run: &TrainRun, resume: bool) -> Result<TrainSummary, CliError> {
    if run.checkpoint_every == 0 {
        return Err(CliError::config("checkpoint_every", "must be positive"));
    }
    config::write_resolved(&run.out_dir, run)?;
    let previous = if resume {
        let c = Checkpoint::load(&checkpoint_path(&run.out_dir))?;
        if c.env != run.env {
            return Err(CliError::config("env", "differs from the checkpoint's environment"));
        }
        Some(c)
    } else {
        None
    };
    let metrics_path = run.out_dir.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&metrics_path)
        .map_err(|e| CliError::io(&metrics_path, e))?;
    let mut log = MetricsLog { out: BufWriter::new(file), error: None, path: metrics_path.clone() };

    let env = run.env.build()?;
    let (step, epochs, last) = if run.train.objective == ObjectiveKind::Tb {
        with_env!(&env, |e| train_tb(e, run, previous, &mut log))?
    } else {
        let tree = with_env!(&env, |e| ExpandedTree::build(e))?;
        train_tree(&tree, run, previous, &mut log)?
    };
    log.flush()?;
    Ok(TrainSummary { checkpoint: checkpoint_path(&run.out_dir), metrics: metrics_path, step, epochs, last })
}

struct MetricsLog {
    out: BufWriter<File>,
    error: Option<std::io::Error>,
    path: PathBuf,
}

impl MetricsLog {
    fn write(&mut self, m: &Metrics) {
        if self.error.is_some() {
            return;
        }
        let r = serde_json::to_writer(&mut self.out, m)
            .map_err(std::io::Error::from)
            .and_then(|_| self.out.write_all(b"\n"));
        if let Err(e) = r {
            self.error = Some(e);
        }
    }

    fn flush(&mut self) -> Result<(), CliError> {
        if let Some(e) = self.error.take() {
            return Err(CliError::io(&self.path, e));
        }
        self.out.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

/// Applies the run's epoch and step budget to a resumed config and rejects
/// any other change.
fn resumed_config(stored: &TrainConfig, wanted: &TrainConfig) -> Result<TrainConfig, CliError> {
    let mut c = stored.clone();
    c.epochs = wanted.epochs;
    c.max_steps = wanted.max_steps;
    c.stop_when_unbeaten = wanted.stop_when_unbeaten;
    if &c != wanted {
        return Err(CliError::config("train", "only epochs, max_steps and stop_when_unbeaten may change on resume"));
    }
    Ok(c)
}

fn failure(run: &TrainRun, e: TrainError) -> CliError {
    if let TrainError::NonFinite { batch, .. } = &e {
        let path = run.out_dir.join("failed_batch.jsonl");
        let mut text = batch.join("\n");
        text.push('\n');
        let _ = std::fs::write(&path, text);
        return CliError { path: Some(path.display().to_string()), ..CliError::new("non_finite", e.to_string()) };
    }
    e.into()
}

fn new_model<E: TreeEnv>(env: &E, run: &TrainRun) -> AnyModel {
    let width = env.action_space_size();
    match run.model {
        ModelSpec::Tabular => AnyModel::Tabular(TabularModel::new(width, run.train.adam)),
        ModelSpec::Neural(c) => AnyModel::Neural(NeuralModel::new(c, env.feature_shape(), width, run.train.adam)),
    }
}

type Progress = (u64, u64, Option<Metrics>);

fn train_tb<E: TreeEnv>(
    env: &E,
    run: &TrainRun,
    previous: Option<Checkpoint>,
    log: &mut MetricsLog,
) -> Result<Progress, CliError> {
    let mut trainer = match previous {
        Some(Checkpoint { trainer: TrainerState::Tb(mut s), .. }) => {
            s.config = resumed_config(&s.config, &run.train)?;
            TbTrainer::resume(env, s)?
        }
        Some(_) => return Err(CliError::config("train.objective", "checkpoint was not trained with tb")),
        None => TbTrainer::new(env, run.train.clone(), new_model(env, run))?,
    };
    let save = |t: &TbTrainer<E>| {
        Checkpoint::new(run.env.clone(), TrainerState::Tb(t.state.clone())).save(&checkpoint_path(&run.out_dir))
    };
    let mut last = None;
    let mut since = 0;
    while !trainer.finished() {
        let report = trainer.run_epoch(&mut |m| log.write(m)).map_err(|e| failure(run, e))?;
        log.flush()?;
        since += 1;
        let stop = report.stop;
        last = Some(report.metrics);
        if since >= run.checkpoint_every || stop || trainer.finished() {
            save(&trainer)?;
            since = 0;
        }
        if stop {
            break;
        }
    }
    if last.is_none() {
        save(&trainer)?;
    }
    Ok((trainer.state.step, trainer.state.epoch, last))
}

fn train_tree(
    tree: &ExpandedTree,
    run: &TrainRun,
    previous: Option<Checkpoint>,
    log: &mut MetricsLog,
) -> Result<Progress, CliError> {
    let mut trainer = match previous {
        Some(Checkpoint { trainer: TrainerState::Tree(mut s), .. }) => {
            s.config = resumed_config(&s.config, &run.train)?;
            TreeTrainer::resume(tree, s)?
        }
        Some(_) => return Err(CliError::config("train.objective", "checkpoint was trained with tb")),
        None => TreeTrainer::new(tree, run.train.clone())?,
    };
    let save = |t: &TreeTrainer| {
        Checkpoint::new(run.env.clone(), TrainerState::Tree(t.state.clone())).save(&checkpoint_path(&run.out_dir))
    };
    let mut last = None;
    let mut since = 0;
    while !trainer.finished() {
        let report = trainer.run_epoch(&mut |m| log.write(m)).map_err(|e| failure(run, e))?;
        log.flush()?;
        since += 1;
        let stop = report.stop;
        last = Some(report.metrics);
        if since >= run.checkpoint_every || stop || trainer.finished() {
            save(&trainer)?;
            since = 0;
        }
        if stop {
            break;
        }
    }
    if last.is_none() {
        save(&trainer)?;
    }
    Ok((trainer.state.step, trainer.state.epoch, last))
}
