use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use jcas_core::sensing_rx::Calibration;
use jcas_train::checkpoint::{Checkpoint, Model};
use jcas_train::mimo::{mimo_finetune, mimo_limit, mimo_pretrain, MimoSystem};
use jcas_train::system::SingleUserSystem;
use jcas_train::trainer::{finetune, limit, pretrain, Phase, TraceRow, TrainPlan};

use crate::config::{ExperimentConfig, Overrides};
use crate::output::{num, resolve_out_dir, Meta, Table};

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
}

enum Run {
    Single(SingleUserSystem),
    Multi(MimoSystem),
}

impl Run {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match (cfg.mimo_scenario(), &cfg.mimo) {
            (Some(sc), Some(m)) => Run::Multi(MimoSystem::new(sc, m.alpha, cfg.seed)?),
            _ => Run::Single(SingleUserSystem::new(cfg.scenario.build(), cfg.modulation(), cfg.angle_loss, cfg.seed)?),
        })
    }

    fn phase(&mut self, phase: Phase, plan: &TrainPlan) -> Result<(Vec<TraceRow>, Vec<Calibration>)> {
        Ok(match (self, phase) {
            (Run::Single(s), Phase::Pretrain) => (pretrain(s, plan)?, vec![]),
            (Run::Single(s), Phase::Finetune) => (finetune(s, plan)?, vec![]),
            (Run::Single(s), Phase::Limit) => (vec![], limit(s, plan)?),
            (Run::Multi(s), Phase::Pretrain) => (mimo_pretrain(s, plan)?, vec![]),
            (Run::Multi(s), Phase::Finetune) => (mimo_finetune(s, plan)?, vec![]),
            (Run::Multi(s), Phase::Limit) => (vec![], mimo_limit(s, plan)?),
        })
    }

    fn model(&self) -> Model {
        match self {
            Run::Single(s) => Model::SingleUser(s.clone()),
            Run::Multi(s) => Model::MultiUser(s.clone()),
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    version: &'a str,
    seed: u64,
    config_sha256: &'a str,
    checkpoint: &'a Path,
    checkpoint_sha256: String,
    /// Wall time per phase; the only field that differs between reruns.
    seconds: [f64; 3],
    final_losses: Option<&'a TraceRow>,
}

pub fn run(args: TrainArgs) -> Result<PathBuf> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply(&args.overrides);
    cfg.validate()?;
    let out = resolve_out_dir(args.out.as_deref(), cfg.output_dir.as_deref());
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let plan = cfg.plan();
    let hash = cfg.hash();
    fs::write(out.join("config.toml"), toml::to_string(&cfg)?)?;

    let ck_path = out.join("checkpoint.json");
    let mut run = Run::new(&cfg)?;
    let mut trace = Vec::new();
    let mut calibrations = Vec::new();
    let mut seconds = [0.0; 3];
    for (i, phase) in [Phase::Pretrain, Phase::Finetune, Phase::Limit].into_iter().enumerate() {
        let t = Instant::now();
        let (rows, cals) = run.phase(phase, &plan)?;
        seconds[i] = t.elapsed().as_secs_f64();
        log::info!("{phase:?} finished in {:.1} s", seconds[i]);
        trace.extend(rows);
        calibrations.extend(cals);
        // a run killed later still leaves the last finished phase on disk
        Checkpoint::new(plan.clone(), run.model(), phase != Phase::Limit).save(&ck_path)?;
    }

    let meta = Meta::new("train", cfg.seed, &hash);
    let mut t = Table::create(
        &out.join("loss.csv"),
        &meta,
        &["phase", "step", "symbols", "l_comm", "l_detect", "l_angle", "l_total"],
    )?;
    for r in &trace {
        let phase = match r.phase {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
            Phase::Limit => "limit",
        };
        t.row([phase.to_string(), r.step.to_string(), r.symbols.to_string(), num(r.comm), num(r.detect), num(r.angle), num(r.total)])?;
    }
    t.finish()?;

    let mut t = Table::create(&out.join("thresholds.csv"), &meta, &["n_win", "offset", "degenerate", "undersampled"])?;
    for (i, c) in calibrations.iter().enumerate() {
        t.row([(i + 1).to_string(), num(c.offset), c.degenerate.to_string(), c.undersampled.to_string()])?;
    }
    t.finish()?;

    let bytes = fs::read(&ck_path)?;
    let summary = Summary {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config_sha256: &hash,
        checkpoint: &ck_path,
        checkpoint_sha256: hex::encode(Sha256::digest(&bytes)),
        seconds,
        final_losses: trace.last(),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    log::info!("checkpoint {} (sha256 {})", ck_path.display(), summary.checkpoint_sha256);
    Ok(ck_path)
}
