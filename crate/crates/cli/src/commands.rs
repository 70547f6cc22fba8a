//! train, eval, gen-scenes, replay and compare.

use std::fs;
use std::path::{Path, PathBuf};

use pushgrasp::config::{RunConfig, Scenario};
use pushgrasp::evaluation::{
    benchmark_scene_seed, run_benchmark, run_episode, Agent, BenchmarkSummary, EpisodeMeta, EpisodeRecord, QAgent, RandomAgent,
};
use pushgrasp::learning::{ReplayBuffer, Trainer};
use pushgrasp::policy::{load_checkpoint, Stage};
use pushgrasp::sim::spawn_scene;
use pushgrasp::Error;
use serde::{Deserialize, Serialize};

use crate::rundir::{finalize_stage, load_trainer_state, replay_paths, truncate_logs, FileSink, RunDir, RunLock, CONFIG_FILE};
use crate::{AgentArg, CliError, CliResult, ConfigArgs, StageArg};

fn read_snapshot(dir: &Path) -> CliResult<Option<RunConfig>> {
    let p = dir.join(CONFIG_FILE);
    if p.exists() {
        Ok(Some(RunConfig::from_text(&fs::read_to_string(p)?)?))
    } else {
        Ok(None)
    }
}

/// Trainer for the start of `stage` when not resuming.
fn fresh_trainer(run: &RunDir, cfg: &RunConfig, stage: Stage, init: Option<&Path>) -> CliResult<Trainer> {
    if let Some(path) = init {
        let (nets, meta) = load_checkpoint(path)?;
        if meta.architecture_hash != cfg.architecture_hash() {
            return Err(Error::Incompatible(format!(
                "{} was trained with architecture {}, the config describes {}",
                path.display(),
                meta.architecture_hash,
                cfg.architecture_hash()
            ))
            .into());
        }
        let mut t = Trainer::with_nets(cfg.clone(), run.info.run_id.clone(), nets);
        let (gp, pp) = replay_paths(path);
        if gp.exists() && pp.exists() {
            t.grasp_buffer = ReplayBuffer::from_jsonl(&fs::read_to_string(gp)?, cfg.learn.replay_capacity, cfg)?;
            t.push_buffer = ReplayBuffer::from_jsonl(&fs::read_to_string(pp)?, cfg.learn.replay_capacity, cfg)?;
        }
        t.actions_taken = meta.actions;
        t.updates = meta.step;
        return Ok(t);
    }
    let idx = Stage::ALL.iter().position(|&s| s == stage).expect("known stage");
    if idx == 0 {
        return Ok(Trainer::new(cfg.clone(), run.info.run_id.clone())?);
    }
    let prev = Stage::ALL[idx - 1];
    let fin = run.final_checkpoint(prev);
    if !pushgrasp::policy::meta_path(&fin).exists() {
        return Err(Error::Prerequisite(format!(
            "{stage} starts from a finished {prev} checkpoint, but {} does not exist; run `pushgrasp train --stage {prev} --out {}` first or pass --init <checkpoint>",
            fin.display(),
            run.root.display()
        ))
        .into());
    }
    Ok(load_trainer_state(&fin, cfg, &run.info.run_id)?.0)
}

pub fn train(args: &ConfigArgs, stages: StageArg, out: &Path, resume: bool, init: Option<&Path>, seed: Option<u64>, verbose: bool) -> CliResult<()> {
    fs::create_dir_all(out)?;
    let _lock = RunLock::acquire(out)?;
    let mut cfg = args.resolve(read_snapshot(out)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let run = RunDir::open_or_create(out, &cfg)?;
    for (i, stage) in stages.stages().into_iter().enumerate() {
        let done = pushgrasp::policy::meta_path(&run.final_checkpoint(stage)).exists();
        let existing = run.stage_checkpoints(stage)?;
        let (mut trainer, start) = if resume {
            if done {
                println!("{stage}: already complete");
                continue;
            }
            match existing.last() {
                Some((_, path)) => {
                    let (t, meta) = load_trainer_state(path, &cfg, &run.info.run_id)?;
                    if meta.config_hash != cfg.hash() {
                        return Err(Error::Incompatible(format!(
                            "checkpoint {} has config hash {}, the effective config hashes to {}",
                            path.display(),
                            meta.config_hash,
                            cfg.hash()
                        ))
                        .into());
                    }
                    (t, meta.episode)
                }
                None => (fresh_trainer(&run, &cfg, stage, if i == 0 { init } else { None })?, 0),
            }
        } else {
            if done || !existing.is_empty() {
                return Err(Error::Incompatible(format!(
                    "{stage} already has checkpoints in {}; pass --resume to continue it",
                    run.root.display()
                ))
                .into());
            }
            (fresh_trainer(&run, &cfg, stage, if i == 0 { init } else { None })?, 0)
        };
        let dropped = truncate_logs(&run, stage, start)?;
        if dropped > 0 {
            eprintln!("{stage}: dropped {dropped} log lines written after the last checkpoint");
        }
        if start > 0 {
            println!("{stage}: resuming at episode {start}");
        }
        let mut sink = FileSink::new(&run, verbose);
        let report = trainer.run_stage(stage, start, &mut sink)?;
        let budget = pushgrasp::learning::StagePlan::for_stage(stage, &cfg.learn).episode_budget as u64;
        let meta = trainer.meta(stage, budget);
        finalize_stage(&run, &trainer.nets, &meta, &run.checkpoint_path(stage, budget))?;
        println!(
            "{stage}: {} episodes, {} successes, {} updates, {} quarantined, grasp threshold {:.4}",
            report.episodes, report.successes, report.updates, report.quarantined, report.grasp_threshold
        );
    }
    Ok(())
}

/// What an eval directory was produced with; lets `replay` rebuild the agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalInfo {
    pub agent: String,
    pub checkpoint: Option<PathBuf>,
    pub scenario: Scenario,
    pub objects: Vec<usize>,
    pub scenes: usize,
    pub base_seed: u64,
}

pub fn make_agent(agent: AgentArg, checkpoint: Option<&Path>, cfg: &RunConfig) -> CliResult<Box<dyn Agent>> {
    match agent {
        AgentArg::Random => Ok(Box::new(RandomAgent::default())),
        AgentArg::RandomGrasp => Ok(Box::new(RandomAgent::grasp_only())),
        AgentArg::Trained => {
            let path = checkpoint.ok_or_else(|| Error::Prerequisite("the trained agent needs --checkpoint <file>".into()))?;
            let (nets, _) = load_checkpoint(path)?;
            if nets.grasp.arch.resolution != cfg.perception.resolution {
                return Err(Error::Incompatible(format!(
                    "checkpoint expects resolution {}, config has perception.resolution = {}",
                    nets.grasp.arch.resolution, cfg.perception.resolution
                ))
                .into());
            }
            Ok(Box::new(QAgent::new(nets)))
        }
    }
}

fn agent_name(a: AgentArg) -> &'static str {
    match a {
        AgentArg::Trained => "trained",
        AgentArg::Random => "random",
        AgentArg::RandomGrasp => "random_grasp",
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> CliResult<()> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    args: &ConfigArgs,
    checkpoint: Option<&Path>,
    agent_arg: AgentArg,
    scenario: Scenario,
    objects: &[usize],
    scenes: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> CliResult<()> {
    let mut cfg = args.resolve(None)?;
    if let Some(s) = seed {
        cfg.eval.base_seed = s;
    }
    let n_scenes = scenes.unwrap_or(cfg.eval.n_scenes);
    let agent = make_agent(agent_arg, checkpoint, &cfg)?;
    fs::create_dir_all(out)?;
    let _lock = RunLock::acquire(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    let info = EvalInfo {
        agent: agent_name(agent_arg).into(),
        checkpoint: checkpoint.map(|p| p.canonicalize().unwrap_or_else(|_| p.to_path_buf())),
        scenario,
        objects: objects.to_vec(),
        scenes: n_scenes,
        base_seed: cfg.eval.base_seed,
    };
    fs::write(out.join("eval.json"), serde_json::to_string_pretty(&info)?)?;
    println!("{}", BenchmarkSummary::table_header());
    for &n in objects {
        let (records, report) = run_benchmark(agent.as_ref(), scenario, n, n_scenes, cfg.eval.base_seed, &cfg)?;
        write_jsonl(&out.join(format!("records_{scenario}_{n}.jsonl")), &records)?;
        let summary = BenchmarkSummary::new(agent.name(), scenario, n, &report);
        fs::write(out.join(format!("summary_{scenario}_{n}.json")), serde_json::to_string_pretty(&summary)?)?;
        println!("{}", summary.table_row());
    }
    Ok(())
}

pub fn gen_scenes(args: &ConfigArgs, scenario: Scenario, objects: usize, count: usize, seed: u64, out: &Path) -> CliResult<()> {
    let cfg = args.resolve(None)?;
    fs::create_dir_all(out)?;
    let mut certified = 0;
    for i in 0..count {
        let s = benchmark_scene_seed(seed, scenario, objects, i as u64);
        let scene = spawn_scene(scenario, objects, s, &cfg.sim)?;
        certified += (scene.certificate == Some(true)) as usize;
        scene.save(&out.join(format!("scene_{i:04}.json")))?;
    }
    match scenario {
        Scenario::Packed => println!("wrote {count} scenes to {} ({certified} certified)", out.display()),
        _ => println!("wrote {count} scenes to {}", out.display()),
    }
    Ok(())
}

/// Parses a records file, failing on the first malformed line.
pub fn read_records(path: &Path) -> CliResult<Vec<EpisodeRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: EpisodeRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        out.push(r);
    }
    Ok(out)
}

/// Config and agent for re-running records from an eval directory.
pub fn replay_context(
    args: &ConfigArgs,
    records: &Path,
    checkpoint: Option<&Path>,
    agent: AgentArg,
) -> CliResult<(RunConfig, Box<dyn Agent>)> {
    let dir = records.parent().unwrap_or(Path::new("."));
    let cfg = args.resolve(read_snapshot(dir)?)?;
    let info: Option<EvalInfo> = fs::read_to_string(dir.join("eval.json")).ok().and_then(|t| serde_json::from_str(&t).ok());
    let (agent, ckpt) = match (&info, checkpoint) {
        (_, Some(c)) => (agent, Some(c.to_path_buf())),
        (Some(i), None) => {
            let a = match i.agent.as_str() {
                "random" => AgentArg::Random,
                "random_grasp" => AgentArg::RandomGrasp,
                _ => agent,
            };
            (a, i.checkpoint.clone())
        }
        (None, None) => (agent, None),
    };
    let agent = make_agent(agent, ckpt.as_deref(), &cfg)?;
    Ok((cfg, agent))
}

pub fn replay(args: &ConfigArgs, records: &Path, index: usize, checkpoint: Option<&Path>, agent: AgentArg) -> CliResult<()> {
    let all = read_records(records)?;
    let rec = all
        .get(index)
        .ok_or_else(|| Error::Config(format!("index {index} out of range: {} holds {} records", records.display(), all.len())))?;
    let (cfg, agent) = replay_context(args, records, checkpoint, agent)?;
    let scene = spawn_scene(rec.scenario, rec.n_objects, rec.seed, &cfg.sim)?;
    let again = run_episode(
        scene,
        agent.as_ref(),
        &cfg,
        EpisodeMeta {
            scenario: rec.scenario,
            n_objects: rec.n_objects,
            seed: rec.seed,
        },
    );
    match first_divergence(rec, &again) {
        None => {
            println!(
                "replay of record {index}: {} actions reproduced, termination {:?}, zero divergence",
                rec.actions.len(),
                rec.termination_reason
            );
            Ok(())
        }
        Some(msg) => Err(CliError::Divergence(msg)),
    }
}

/// First step where the replayed record departs from the stored one.
pub fn first_divergence(a: &EpisodeRecord, b: &EpisodeRecord) -> Option<String> {
    for (step, (x, y)) in a.actions.iter().zip(&b.actions).enumerate() {
        if x.primitive != y.primitive || x.k != y.k || x.u != y.u || x.v != y.v || x.q_value.to_bits() != y.q_value.to_bits() {
            return Some(format!(
                "step {step}: recorded {} k={} u={} v={} q={}, replayed {} k={} u={} v={} q={}",
                x.primitive, x.k, x.u, x.v, x.q_value, y.primitive, y.k, y.u, y.v, y.q_value
            ));
        }
    }
    if a.actions.len() != b.actions.len() {
        let step = a.actions.len().min(b.actions.len());
        return Some(format!("step {step}: recorded {} actions, replayed {}", a.actions.len(), b.actions.len()));
    }
    if a != b {
        return Some(format!(
            "step {}: same actions but outcome differs (recorded {:?}, replayed {:?})",
            a.actions.len(),
            a.termination_reason,
            b.termination_reason
        ));
    }
    None
}

/// Full-scale published rows, shown for reference only.
const REFERENCE_ROWS: [(&str, &str, f64, f64, f64, f64, f64, f64); 4] = [
    ("packed", "-", 98.98, 1.01, 86.08, 3.32, 1.12, 0.03),
    ("pile", "10", 98.97, 1.02, 66.21, 3.91, 1.02, 0.14),
    ("pile", "15", 100.0, 0.0, 74.60, 3.89, 3.67, 0.98),
    ("pile", "20", 97.22, 1.95, 69.23, 4.62, 6.09, 1.82),
];

pub fn compare_table(summaries: &[BenchmarkSummary]) -> String {
    let mut out = String::new();
    out.push_str(&BenchmarkSummary::table_header());
    out.push('\n');
    for s in summaries {
        out.push_str(&s.table_row());
        out.push('\n');
    }
    for (scene, n, c, ce, gs, gse, mn, mne) in REFERENCE_ROWS {
        out.push_str(&format!(
            "{:<16} {:<7} {:>3} | {:>16} | {:>16} | {:>12}\n",
            "ref-full-scale",
            scene,
            n,
            format!("{c:.2} ± {ce:.2}"),
            format!("{gs:.2} ± {gse:.2}"),
            format!("{mn:.2} ± {mne:.2}")
        ));
    }
    out
}

pub fn compare(paths: &[PathBuf], out: Option<&Path>) -> CliResult<()> {
    let mut rows = Vec::new();
    for p in paths {
        let s: BenchmarkSummary = serde_json::from_str(&fs::read_to_string(p)?)?;
        rows.push(s);
    }
    let table = compare_table(&rows);
    print!("{table}");
    if let Some(o) = out {
        fs::write(o, &table)?;
    }
    Ok(())
}
