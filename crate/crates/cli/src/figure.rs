use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Result};
use sha2::{Digest, Sha256};

use jcas_core::airlink::{area_power_fractions, beam_pattern, default_grid_step, full_grid};
use jcas_core::constellation::{dmin_from_kappa, kurtosis, make_psk, make_qam, mean_min_distance, Constellation};
use jcas_train::checkpoint::{Checkpoint, Model};
use jcas_train::mimo::{mimo_beam_patterns, mimo_ber_sweep, MimoSystem};
use jcas_train::sweep::{tradeoff, EvalPoint};
use jcas_train::system::SingleUserSystem;

use crate::eval::{eval_fields, load_checkpoint, parse_grid, EVAL_COLUMNS};
use crate::output::{num, Meta, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Beam,
    Tradeoff,
    Kurtosis,
    Constellation,
}

impl Figure {
    pub const ALL: [Figure; 4] = [Figure::Beam, Figure::Tradeoff, Figure::Kurtosis, Figure::Constellation];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Beam => "beam",
            Figure::Tradeoff => "tradeoff",
            Figure::Kurtosis => "kurtosis",
            Figure::Constellation => "constellation",
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Figure::ALL.iter().map(|f| f.name()).collect();
            anyhow!("unknown figure `{s}`; valid names: {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone)]
pub struct FigureArgs {
    pub name: String,
    pub checkpoints: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub trials: usize,
    pub snr_c_db: f64,
    pub snr_s_db: f64,
    pub window: usize,
    /// SNR grid for the per-UE BER table of a multi-user checkpoint.
    pub ber_grid: String,
    pub allow_partial: bool,
}

struct Loaded {
    path: PathBuf,
    ck: Checkpoint,
    hash: String,
}

impl Loaded {
    fn w_s(&self) -> f64 {
        self.ck.plan.sensing_weight
    }

    fn single(&self) -> Result<&SingleUserSystem> {
        Ok(self.ck.single_user()?)
    }
}

fn meta(a: &FigureArgs, fig: Figure, loaded: &[Loaded]) -> Meta {
    let mut h = Sha256::new();
    h.update(fig.name());
    for l in loaded {
        h.update(&l.hash);
    }
    h.update(format!("{} {} {} {} {} {}", a.seed, a.trials, a.snr_c_db, a.snr_s_db, a.window, a.ber_grid));
    let mut m = Meta::new(format!("figure {fig}"), a.seed, hex::encode(h.finalize()));
    for (i, l) in loaded.iter().enumerate() {
        m = m.with(&format!("checkpoint_{}", i + 1), format!("{} (w_s {}, sha256 {})", l.path.display(), l.w_s(), l.hash));
    }
    m
}

/// Writes the figure's tables into `out_dir` and returns their paths.
pub fn run(a: &FigureArgs) -> Result<Vec<PathBuf>> {
    let fig: Figure = a.name.parse()?;
    let loaded = a
        .checkpoints
        .iter()
        .map(|p| {
            let (ck, hash) = load_checkpoint(p, a.allow_partial)?;
            Ok(Loaded {
                path: p.clone(),
                ck,
                hash,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = meta(a, fig, &loaded);
    let out = &a.out_dir;
    match fig {
        Figure::Beam => beam(a, &loaded, &m, out),
        Figure::Tradeoff => {
            if loaded.is_empty() {
                bail!("figure tradeoff needs one --checkpoint per sensing weight");
            }
            let systems = loaded.iter().map(|l| Ok((l.w_s(), l.single()?))).collect::<Result<Vec<_>>>()?;
            let point = EvalPoint {
                snr_c_db: Some(a.snr_c_db),
                snr_s_db: Some(a.snr_s_db),
                window: Some(a.window),
                target: Some(true),
            };
            let mut rows = if a.trials == 0 { vec![] } else { tradeoff(&systems, point, a.trials, a.seed)? };
            rows.sort_by(|x, y| x.value.total_cmp(&y.value));
            let mut header = vec!["w_s"];
            header.extend(EVAL_COLUMNS);
            let mut t = Table::create(&out.join("tradeoff.csv"), &m, &header)?;
            for r in &rows {
                let mut f = vec![num(r.value)];
                f.extend(eval_fields(r));
                t.row(f)?;
            }
            Ok(vec![t.finish()?])
        }
        Figure::Kurtosis => {
            let mut t = Table::create(&out.join("kurtosis.csv"), &m, &["source", "w_s", "kurtosis", "mean_min_distance"])?;
            let refs = [("psk", make_psk(16)?), ("qam", make_qam(16)?)];
            for (name, c) in &refs {
                t.row([name.to_string(), num(f64::NAN), num(kurtosis(c)), num(mean_min_distance(c))])?;
            }
            for l in &loaded {
                let c = l.single()?.constellation()?;
                t.row(["trained".to_string(), num(l.w_s()), num(kurtosis(&c)), num(mean_min_distance(&c))])?;
            }
            let first = t.finish()?;
            let mut t = Table::create(&out.join("kurtosis_curve.csv"), &m, &["kurtosis", "mean_min_distance", "valid"])?;
            for i in 0..=200 {
                let k = 1.0 + i as f64 * 0.005;
                let d = dmin_from_kappa(k, 16)?;
                t.row([num(k), num(d.value), d.valid.to_string()])?;
            }
            Ok(vec![first, t.finish()?])
        }
        Figure::Constellation => {
            if loaded.is_empty() {
                bail!("figure constellation needs at least one --checkpoint");
            }
            let mut t = Table::create(&out.join("constellation.csv"), &m, &["w_s", "index", "bits", "re", "im"])?;
            for l in &loaded {
                let c: Constellation = match &l.ck.model {
                    Model::SingleUser(s) => s.constellation()?,
                    Model::MultiUser(s) => s.constellation()?,
                };
                for (i, bits, re, im) in c.table() {
                    t.row([num(l.w_s()), i.to_string(), bits, num(re), num(im)])?;
                }
            }
            Ok(vec![t.finish()?])
        }
    }
}

fn beam(a: &FigureArgs, loaded: &[Loaded], m: &Meta, out: &Path) -> Result<Vec<PathBuf>> {
    let grid = full_grid(default_grid_step());
    match loaded {
        [] => bail!("figure beam needs at least one --checkpoint"),
        [l] if matches!(l.ck.model, Model::MultiUser(_)) => {
            let sys = l.ck.multi_user()?;
            mimo_beam(a, sys, &grid, m, out)
        }
        _ => {
            let systems = loaded.iter().map(|l| l.single()).collect::<Result<Vec<_>>>()?;
            let patterns = systems
                .iter()
                .map(|s| Ok(beam_pattern(&s.precoder()?, &grid)))
                .collect::<Result<Vec<_>>>()?;
            let names: Vec<String> = if systems.len() == 1 {
                vec!["power".into()]
            } else {
                (1..=systems.len()).map(|i| format!("power_{i}")).collect()
            };
            let mut header = vec!["angle_deg"];
            header.extend(names.iter().map(String::as_str));
            let mut t = Table::create(&out.join("beam.csv"), m, &header)?;
            for (i, th) in grid.iter().enumerate() {
                let mut f = vec![num(th.to_degrees())];
                f.extend(patterns.iter().map(|p| num(p[i])));
                t.row(f)?;
            }
            let first = t.finish()?;
            let mut t = Table::create(&out.join("beam_fractions.csv"), m, &["w_s", "frac_sens", "frac_comm", "frac_out"])?;
            for (l, s) in loaded.iter().zip(&systems) {
                let fr = area_power_fractions(&s.precoder()?, &s.scenario, default_grid_step())?;
                t.row([num(l.w_s()), num(fr.sensing), num(fr.comm), num(fr.outside)])?;
            }
            Ok(vec![first, t.finish()?])
        }
    }
}

fn mimo_beam(a: &FigureArgs, sys: &MimoSystem, grid: &[f64], m: &Meta, out: &Path) -> Result<Vec<PathBuf>> {
    let users = sys.scenario.users();
    let mut header = vec!["angle_deg".to_string()];
    header.extend((1..=users).map(|u| format!("p_ue{u}")));
    header.push("p_sum".into());
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::create(&out.join("beam.csv"), m, &refs)?;
    for r in mimo_beam_patterns(sys, grid)? {
        let mut f = vec![num(r.angle_deg)];
        f.extend(r.per_ue.iter().map(|&p| num(p)));
        f.push(num(r.sum));
        t.row(f)?;
    }
    let first = t.finish()?;

    let snr = parse_grid(&a.ber_grid)?;
    let mut header = vec!["snr_c_db".to_string()];
    header.extend((1..=users).map(|u| format!("ber_nn_ue{u}")));
    header.extend((1..=users).map(|u| format!("ber_mld_ue{u}")));
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut t = Table::create(&out.join("ber.csv"), m, &refs)?;
    if a.trials > 0 && !snr.is_empty() {
        for r in mimo_ber_sweep(sys, &snr, a.trials, a.seed)? {
            let mut f = vec![num(r.snr_c_db)];
            f.extend(r.ber_nn.iter().chain(&r.ber_mld).map(|&x| num(x)));
            t.row(f)?;
        }
    }
    Ok(vec![first, t.finish()?])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for f in Figure::ALL {
            assert_eq!(f.name().parse::<Figure>().unwrap(), f);
        }
        let msg = "bogus".parse::<Figure>().unwrap_err().to_string();
        assert!(msg.contains("beam, tradeoff, kurtosis, constellation"), "{msg}");
    }
}
