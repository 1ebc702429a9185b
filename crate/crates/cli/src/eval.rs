use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use jcas_train::checkpoint::{Checkpoint, Model};
use jcas_train::mimo::mimo_ber_sweep;
use jcas_train::sweep::{sweep, Axis, EvalPoint};

use crate::output::{num, Meta, Table};

pub const EVAL_COLUMNS: [&str; 17] = [
    "windows",
    "p_d",
    "p_d_ci",
    "p_f",
    "p_f_ci",
    "p_d_np",
    "p_f_np",
    "rmse_nn",
    "bias_nn",
    "rmse_esprit",
    "crb_rmse",
    "ber_nn",
    "ber_mld",
    "bmi_nn",
    "bmi_mld",
    "gain_sensing",
    "gain_comm",
];

pub fn eval_fields(r: &jcas_train::sweep::EvalRow) -> Vec<String> {
    let mut v = vec![r.windows.to_string()];
    v.extend(
        [
            r.p_d,
            r.p_d_ci,
            r.p_f,
            r.p_f_ci,
            r.p_d_np,
            r.p_f_np,
            r.rmse_nn,
            r.bias_nn,
            r.rmse_esprit,
            r.crb_rmse,
            r.ber_nn,
            r.ber_mld,
            r.bmi_nn,
            r.bmi_mld,
            r.gain_sensing,
            r.gain_comm,
        ]
        .map(num),
    );
    v
}

/// Reads a checkpoint, refusing unfinished runs unless `allow_partial`.
pub fn load_checkpoint(path: &Path, allow_partial: bool) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let text = String::from_utf8(bytes).with_context(|| format!("{} is not a text checkpoint", path.display()))?;
    let ck = Checkpoint::from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if ck.partial && !allow_partial {
        bail!(
            "checkpoint {} is partial (training stopped before limiting); pass --allow-partial to use it anyway",
            path.display()
        );
    }
    Ok((ck, hex::encode(Sha256::digest(text.as_bytes()))))
}

/// `start:stop:step` (stop included), a comma list, or empty.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let num = |t: &str| -> Result<f64> { t.trim().parse::<f64>().with_context(|| format!("bad grid value `{t}`")) };
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [a, b, step] = parts[..] else {
            bail!("grid range must be start:stop:step, got `{s}`");
        };
        let (a, b, step) = (num(a)?, num(b)?, num(step)?);
        if !(step > 0.0) || !(a.is_finite() && b.is_finite()) {
            bail!("grid range needs finite bounds and a positive step, got `{s}`");
        }
        let n = ((b - a) / step + 1e-9).floor();
        if n < 0.0 {
            return Ok(Vec::new());
        }
        return Ok((0..=n as usize).map(|i| a + i as f64 * step).collect());
    }
    s.split(',').map(num).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TargetMode {
    Present,
    Absent,
    /// Drawn with the scenario's prior.
    Random,
}

#[derive(Debug, Clone)]
pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub axis: String,
    pub grid: String,
    pub trials: usize,
    pub snr_c_db: Option<f64>,
    pub snr_s_db: Option<f64>,
    pub window: Option<usize>,
    pub target: TargetMode,
    pub seed: u64,
    pub out: PathBuf,
    pub allow_partial: bool,
}

#[derive(Serialize)]
struct Settings<'a> {
    checkpoint_sha256: &'a str,
    axis: &'a str,
    grid: &'a [f64],
    trials: usize,
    snr_c_db: Option<f64>,
    snr_s_db: Option<f64>,
    window: Option<usize>,
    target: Option<bool>,
    seed: u64,
}

pub fn run(a: &EvalArgs) -> Result<PathBuf> {
    let axis: Axis = a.axis.parse()?;
    if axis == Axis::SensingWeight {
        bail!("axis w_s compares several checkpoints; use `jcas figure tradeoff --checkpoint ...`");
    }
    let grid = parse_grid(&a.grid)?;
    let (ck, ck_hash) = load_checkpoint(&a.checkpoint, a.allow_partial)?;
    let target = match a.target {
        TargetMode::Present => Some(true),
        TargetMode::Absent => Some(false),
        TargetMode::Random => None,
    };
    let settings = Settings {
        checkpoint_sha256: &ck_hash,
        axis: axis.name(),
        grid: &grid,
        trials: a.trials,
        snr_c_db: a.snr_c_db,
        snr_s_db: a.snr_s_db,
        window: a.window,
        target,
        seed: a.seed,
    };
    let hash = hex::encode(Sha256::digest(serde_json::to_string(&settings)?.as_bytes()));
    let meta = Meta::new("eval", a.seed, hash)
        .with("checkpoint", a.checkpoint.display())
        .with("checkpoint_sha256", &ck_hash)
        .with("training_seed", ck.plan.seed)
        .with("sensing_weight", ck.plan.sensing_weight)
        .with("axis", axis.name())
        .with("trials_per_point", a.trials);

    match &ck.model {
        Model::SingleUser(sys) => {
            let col = match axis {
                Axis::SnrC => "snr_c_db",
                Axis::SnrS => "snr_s_db",
                _ => "n_win",
            };
            let mut header = vec![col];
            header.extend(EVAL_COLUMNS);
            let mut t = Table::create(&a.out, &meta, &header)?;
            let base = EvalPoint {
                snr_c_db: a.snr_c_db,
                snr_s_db: a.snr_s_db,
                window: a.window,
                target,
            };
            for row in sweep(sys, axis, &grid, base, a.trials, a.seed)? {
                let mut f = vec![num(row.value)];
                f.extend(eval_fields(&row));
                t.row(f)?;
            }
            t.finish()
        }
        Model::MultiUser(sys) => {
            if axis != Axis::SnrC {
                bail!("multi-user checkpoints support only the snr_c axis (per-UE BER)");
            }
            let users = sys.scenario.users();
            let mut header = vec!["snr_c_db".to_string()];
            header.extend((1..=users).map(|u| format!("ber_nn_ue{u}")));
            header.extend((1..=users).map(|u| format!("ber_mld_ue{u}")));
            let refs: Vec<&str> = header.iter().map(String::as_str).collect();
            let mut t = Table::create(&a.out, &meta, &refs)?;
            if a.trials > 0 && !grid.is_empty() {
                for r in mimo_ber_sweep(sys, &grid, a.trials, a.seed)? {
                    let mut f = vec![num(r.snr_c_db)];
                    f.extend(r.ber_nn.iter().chain(&r.ber_mld).map(|&x| num(x)));
                    t.row(f)?;
                }
            }
            t.finish()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("").unwrap(), Vec::<f64>::new());
        assert_eq!(parse_grid("1:3:1").unwrap(), vec![1.0, 2.0, 3.0]);
        assert_eq!(parse_grid("-10:10:5").unwrap(), vec![-10.0, -5.0, 0.0, 5.0, 10.0]);
        assert_eq!(parse_grid("0:1:0.1").unwrap().len(), 11);
        assert_eq!(parse_grid("2.5, 4").unwrap(), vec![2.5, 4.0]);
        assert!(parse_grid("1:2").is_err());
        assert!(parse_grid("1:2:0").is_err());
        assert!(parse_grid("a,b").is_err());
    }
}
