//! Classical references that need no trained model.

use std::path::PathBuf;

use anyhow::{bail, Result};
use sha2::{Digest, Sha256};

use jcas_core::airlink::steering_vector;
use jcas_core::baselines::{crb_full, crb_simplified, esprit_aoa, np_decide, np_threshold, CrbParams};
use jcas_core::numerics::{CMat, RngStream, C64};
use jcas_core::sensing_rx::correlate;

use crate::eval::parse_grid;
use crate::output::{num, Meta, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Baseline {
    /// Bound on the angle RMSE.
    Crb,
    /// ESPRIT RMSE next to the bound.
    Esprit,
    /// Energy detector P_d and P_f.
    Np,
}

#[derive(Debug, Clone)]
pub struct BaselineArgs {
    pub which: Baseline,
    pub antennas: usize,
    pub window: usize,
    /// Effective SNR grid, dB.
    pub grid: String,
    pub trials: usize,
    pub false_alarm: f64,
    /// Target angles are drawn uniformly from this interval, degrees.
    pub angle_deg: [f64; 2],
    pub seed: u64,
    pub out: PathBuf,
}

/// `K × N` echo of one target with Rayleigh reflections plus white noise.
fn echo(p: &CrbParams, theta: f64, target: bool, rng: &mut RngStream) -> CMat {
    let a = steering_vector(theta, p.antennas);
    let amp = (p.target_var * p.beam_gain).sqrt();
    let taps: Vec<C64> = (0..p.window).map(|_| rng.cnormal() * amp).collect();
    let sigma = p.noise_var.sqrt();
    CMat::from_fn(p.antennas, p.window, |r, c| {
        let s = if target { a[r] * taps[c] } else { C64::new(0.0, 0.0) };
        s + rng.cnormal() * sigma
    })
}

pub fn run(a: &BaselineArgs) -> Result<PathBuf> {
    if a.antennas < 2 || a.window < 1 {
        bail!("need at least 2 antennas and a window of at least 1");
    }
    if !(a.angle_deg[0] <= a.angle_deg[1]) {
        bail!("angle interval is empty");
    }
    let grid = parse_grid(&a.grid)?;
    let settings = format!("{:?} {} {} {:?} {} {} {:?} {}", a.which, a.antennas, a.window, grid, a.trials, a.false_alarm, a.angle_deg, a.seed);
    let hash = hex::encode(Sha256::digest(settings.as_bytes()));
    let name = format!("{:?}", a.which).to_lowercase();
    let meta = Meta::new(format!("baseline {name}"), a.seed, hash)
        .with("antennas", a.antennas)
        .with("n_win", a.window);
    let (lo, hi) = (a.angle_deg[0].to_radians(), a.angle_deg[1].to_radians());
    let mut rng = RngStream::new(a.seed, 0xBA5E);

    match a.which {
        Baseline::Crb => {
            let mut t = Table::create(&a.out, &meta, &["snr_eff_db", "crb_rmse_rad", "crb_simplified_rmse_rad"])?;
            let theta = 0.5 * (lo + hi);
            for &s in &grid {
                let p = CrbParams::at_effective_snr(a.antennas, a.window, s, theta);
                t.row([num(s), num(crb_full(&p)?.sqrt()), num(crb_simplified(&p)?.sqrt())])?;
            }
            t.finish()
        }
        Baseline::Esprit => {
            let mut t = Table::create(&a.out, &meta, &["snr_eff_db", "trials", "rmse_esprit_rad", "crb_rmse_rad", "degenerate"])?;
            for &s in &grid {
                if a.trials == 0 {
                    break;
                }
                let (mut sq, mut bound, mut degenerate) = (0.0, 0.0, 0usize);
                for _ in 0..a.trials {
                    let theta = rng.uniform_in(lo, hi);
                    let p = CrbParams::at_effective_snr(a.antennas, a.window, s, theta);
                    let e = esprit_aoa(&correlate(&echo(&p, theta, true, &mut rng)))?;
                    sq += (e.angle - theta).powi(2);
                    bound += crb_full(&p)?;
                    degenerate += usize::from(e.degenerate);
                }
                let n = a.trials as f64;
                t.row([num(s), a.trials.to_string(), num((sq / n).sqrt()), num((bound / n).sqrt()), degenerate.to_string()])?;
            }
            t.finish()
        }
        Baseline::Np => {
            let mut t = Table::create(&a.out, &meta, &["snr_eff_db", "trials", "threshold", "p_d", "p_f"])?;
            let thr = np_threshold(a.antennas, a.window, a.false_alarm)?;
            for &s in &grid {
                if a.trials == 0 {
                    break;
                }
                let (mut hits, mut alarms) = (0usize, 0usize);
                for _ in 0..a.trials {
                    let theta = rng.uniform_in(lo, hi);
                    let p = CrbParams::at_effective_snr(a.antennas, a.window, s, theta);
                    hits += usize::from(np_decide(&echo(&p, theta, true, &mut rng), p.noise_var, thr).detected);
                    alarms += usize::from(np_decide(&echo(&p, theta, false, &mut rng), p.noise_var, thr).detected);
                }
                let n = a.trials as f64;
                t.row([num(s), a.trials.to_string(), num(thr), num(hits as f64 / n), num(alarms as f64 / n)])?;
            }
            t.finish()
        }
    }
}
