//! Run directory layout, the single-writer lock and the training sink that
//! persists logs, checkpoints and replay buffers.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pushgrasp::config::RunConfig;
use pushgrasp::learning::{ActionRecord, EpisodeLog, ReplayBuffer, TrainSink, Trainer};
use pushgrasp::policy::{load_checkpoint, meta_path, save_checkpoint, CheckpointMeta, DualNet, Stage};
use pushgrasp::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";
const LOCK_FILE: &str = "LOCK";

/// Held while a command writes into a run directory.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> std::result::Result<Self, CliError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(format!(
                "{} is held by another process (remove {} if that process is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Core(e.into())),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub run_id: String,
    pub config_hash: String,
    pub architecture_hash: String,
}

pub struct RunDir {
    pub root: PathBuf,
    pub info: RunInfo,
}

impl RunDir {
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    /// Creates the layout and config snapshot, or checks an existing one
    /// against `cfg`.
    pub fn open_or_create(root: &Path, cfg: &RunConfig) -> std::result::Result<Self, CliError> {
        let snapshot = root.join(CONFIG_FILE);
        if snapshot.exists() {
            let saved = RunConfig::from_text(&fs::read_to_string(&snapshot)?)?;
            if saved.hash() != cfg.hash() {
                return Err(CliError::Core(Error::Incompatible(format!(
                    "config hash {} differs from the run's snapshot {}; differing keys: {}",
                    cfg.hash(),
                    saved.hash(),
                    config_diff(&saved, cfg).join(", ")
                ))));
            }
            let info: RunInfo = serde_json::from_str(&fs::read_to_string(root.join(RUN_FILE))?).map_err(Error::from)?;
            return Ok(Self {
                root: root.to_path_buf(),
                info,
            });
        }
        for sub in ["checkpoints", "logs", "scenes", "plots"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let run_id = root
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run-{}", cfg.hash()));
        let info = RunInfo {
            run_id,
            config_hash: cfg.hash(),
            architecture_hash: cfg.architecture_hash(),
        };
        fs::write(root.join(RUN_FILE), serde_json::to_string_pretty(&info).map_err(Error::from)?)?;
        fs::write(&snapshot, cfg.to_text())?;
        Ok(Self {
            root: root.to_path_buf(),
            info,
        })
    }

    pub fn checkpoint_path(&self, stage: Stage, episode: u64) -> PathBuf {
        self.checkpoints().join(format!("{}_ep{:05}.ckpt", stage.name(), episode))
    }

    pub fn final_checkpoint(&self, stage: Stage) -> PathBuf {
        self.checkpoints().join(format!("{}_final.ckpt", stage.name()))
    }

    /// Complete checkpoints of `stage`, oldest first.
    pub fn stage_checkpoints(&self, stage: Stage) -> Result<Vec<(u64, PathBuf)>> {
        let prefix = format!("{}_ep", stage.name());
        let mut out = Vec::new();
        let dir = self.checkpoints();
        if !dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            let Some(ep) = name.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".ckpt")) else {
                continue;
            };
            if let Ok(ep) = ep.parse::<u64>() {
                if meta_path(&path).exists() {
                    out.push((ep, path));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

pub fn replay_paths(ckpt: &Path) -> (PathBuf, PathBuf) {
    let s = ckpt.with_extension("");
    let base = s.to_string_lossy();
    (PathBuf::from(format!("{base}.grasp_replay.jsonl")), PathBuf::from(format!("{base}.push_replay.jsonl")))
}

/// Keys whose values differ between two configs.
pub fn config_diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let ta = a.to_text();
    let tb = b.to_text();
    ta.lines()
        .zip(tb.lines())
        .filter(|(x, y)| x != y)
        .map(|(x, y)| {
            let key = x.split('=').next().unwrap_or("").trim();
            let va = x.split_once('=').map(|p| p.1.trim()).unwrap_or("");
            let vb = y.split_once('=').map(|p| p.1.trim()).unwrap_or("");
            format!("{key} ({va} -> {vb})")
        })
        .collect()
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Restores trainer state saved next to `ckpt`.
pub fn load_trainer_state(ckpt: &Path, cfg: &RunConfig, run_id: &str) -> std::result::Result<(Trainer, CheckpointMeta), CliError> {
    let (nets, meta) = load_checkpoint(ckpt)?;
    let mut trainer = Trainer::with_nets(cfg.clone(), run_id, nets);
    let (gp, pp) = replay_paths(ckpt);
    for (path, buf) in [(gp, &mut trainer.grasp_buffer), (pp, &mut trainer.push_buffer)] {
        if !path.exists() {
            return Err(CliError::Core(Error::Prerequisite(format!(
                "replay buffer {} for checkpoint {} is missing",
                path.display(),
                ckpt.display()
            ))));
        }
        *buf = ReplayBuffer::from_jsonl(&fs::read_to_string(&path)?, cfg.learn.replay_capacity, cfg)?;
    }
    trainer.actions_taken = meta.actions;
    trainer.updates = meta.step;
    Ok((trainer, meta))
}

/// Writes logs in batches at each checkpoint so logs never run ahead of the
/// state a resume starts from.
pub struct FileSink<'a> {
    run: &'a RunDir,
    actions: Vec<ActionRecord>,
    episodes: Vec<EpisodeLog>,
    verbose: bool,
}

impl<'a> FileSink<'a> {
    pub fn new(run: &'a RunDir, verbose: bool) -> Self {
        Self {
            run,
            actions: Vec::new(),
            episodes: Vec::new(),
            verbose,
        }
    }

    fn append<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
        let mut text = String::new();
        for it in items {
            text.push_str(&serde_json::to_string(it)?);
            text.push('\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        f.write_all(text.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }
}

impl TrainSink for FileSink<'_> {
    fn action(&mut self, record: &ActionRecord) -> Result<()> {
        self.actions.push(record.clone());
        Ok(())
    }

    fn episode(&mut self, record: &EpisodeLog) -> Result<()> {
        if self.verbose {
            eprintln!(
                "{} episode {:>5}  actions {:>2}  pushes {:>2}  success {}  eps {:.3}",
                record.stage, record.episode, record.actions, record.pushes, record.success as u8, record.epsilon
            );
        }
        self.episodes.push(record.clone());
        Ok(())
    }

    fn checkpoint(&mut self, trainer: &Trainer, meta: &CheckpointMeta) -> Result<()> {
        let logs = self.run.logs();
        Self::append(&logs.join("actions.jsonl"), &self.actions)?;
        Self::append(&logs.join("episodes.jsonl"), &self.episodes)?;
        self.actions.clear();
        self.episodes.clear();

        let path = self.run.checkpoint_path(meta.stage, meta.episode);
        let (gp, pp) = replay_paths(&path);
        write_atomic(&gp, trainer.grasp_buffer.to_jsonl()?.as_bytes())?;
        write_atomic(&pp, trainer.push_buffer.to_jsonl()?.as_bytes())?;
        save_checkpoint(&path, &trainer.nets, meta)?;
        // Only the newest episode checkpoint keeps its replay buffers.
        let keep = path.with_extension("").file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for entry in fs::read_dir(self.run.checkpoints())? {
            let p = entry?.path();
            let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if name.ends_with("_replay.jsonl") && name.contains("_ep") && !name.starts_with(&format!("{keep}.")) {
                let _ = fs::remove_file(p);
            }
        }
        Ok(())
    }
}

/// Copies the last checkpoint of a finished stage to its `_final` name.
pub fn finalize_stage(run: &RunDir, nets: &DualNet, meta: &CheckpointMeta, last: &Path) -> Result<()> {
    let fin = run.final_checkpoint(meta.stage);
    let (g0, p0) = replay_paths(last);
    let (g1, p1) = replay_paths(&fin);
    fs::copy(&g0, &g1)?;
    fs::copy(&p0, &p1)?;
    save_checkpoint(&fin, nets, meta)?;
    Ok(())
}

/// Drops log lines at or after (`stage`, `episode`) plus any torn trailing
/// line; returns how many lines were removed.
pub fn truncate_logs(run: &RunDir, stage: Stage, episode: u64) -> Result<usize> {
    let mut dropped = 0;
    for name in ["actions.jsonl", "episodes.jsonl"] {
        let path = run.logs().join(name);
        if !path.exists() {
            continue;
        }
        let text = fs::read_to_string(&path)?;
        let mut keep = String::new();
        for line in text.lines() {
            let v: Option<serde_json::Value> = serde_json::from_str(line).ok();
            let ok = v.as_ref().is_some_and(|v| {
                let s: Option<Stage> = v.get("stage").and_then(|s| s.as_str()).and_then(|s| s.parse().ok());
                let e = v.get("episode").and_then(|e| e.as_u64());
                matches!((s, e), (Some(s), Some(e)) if s < stage || (s == stage && e < episode))
            });
            if ok {
                keep.push_str(line);
                keep.push('\n');
            } else {
                dropped += 1;
            }
        }
        if dropped > 0 {
            write_atomic(&path, keep.as_bytes())?;
        }
    }
    Ok(dropped)
}
