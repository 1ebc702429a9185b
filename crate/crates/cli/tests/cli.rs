use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use jcas_core::airlink::ScenarioConfig;
use jcas_train::checkpoint::{Checkpoint, Model};
use jcas_train::system::{AngleLoss, Modulation, SingleUserSystem};

fn jcas(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jcas"))
        .args(args)
        .current_dir(dir)
        .env_remove("JCAS_OUT_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY: &str = r#"
seed = 5
modulation = "trained"

[scenario]
antennas = 4
max_window = 3

[plan]
sensing_weight = 0.5
pretrain_symbols = 600
finetune_symbols = 600
limit_windows = 400
batch_symbols = 100
"#;

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn train_tiny(dir: &Path, out: &str) -> PathBuf {
    write_config(dir, "tiny.toml", TINY);
    ok(jcas(&["train", "--config", "tiny.toml", "--out", out], dir));
    dir.join(out).join("checkpoint.json")
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

/// Data lines of a CSV file: everything after the metadata block.
fn table(path: &Path) -> (String, Vec<String>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#')).map(String::from);
    let header = lines.next().expect("header present");
    (header, lines.collect())
}

#[test]
fn train_writes_checkpoint_and_tables() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "run");
    let loaded = Checkpoint::load(&ck).unwrap();
    assert!(!loaded.partial);
    assert!(loaded.single_user().unwrap().thresholds.is_calibrated());
    let (header, rows) = table(&dir.path().join("run/loss.csv"));
    assert_eq!(header, "phase,step,symbols,l_comm,l_detect,l_angle,l_total");
    assert!(!rows.is_empty());
    let (_, rows) = table(&dir.path().join("run/thresholds.csv"));
    assert_eq!(rows.len(), 3);
    let text = fs::read_to_string(dir.path().join("run/loss.csv")).unwrap();
    assert!(text.contains("# seed: 5") && text.contains("# config_sha256: "));
    assert!(dir.path().join("run/summary.json").exists());
}

#[test]
fn fixed_seed_rerun_gives_identical_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a");
    let b = train_tiny(dir.path(), "b");
    assert_eq!(sha(&a), sha(&b));
    assert_eq!(sha(&dir.path().join("a/loss.csv")), sha(&dir.path().join("b/loss.csv")));
    ok(jcas(&["train", "--config", "tiny.toml", "--out", "c", "--seed", "6"], dir.path()));
    assert_ne!(sha(&a), sha(&dir.path().join("c/checkpoint.json")));
}

#[test]
fn zero_budgets_store_initial_networks() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY
        .replace("pretrain_symbols = 600", "pretrain_symbols = 0")
        .replace("finetune_symbols = 600", "finetune_symbols = 0");
    write_config(dir.path(), "zero.toml", &text);
    ok(jcas(&["train", "--config", "zero.toml", "--out", "z"], dir.path()));
    let ck = Checkpoint::load(&dir.path().join("z/checkpoint.json")).unwrap();
    let cfg = ScenarioConfig {
        antennas: 4,
        max_window: 3,
        ..Default::default()
    };
    let fresh = SingleUserSystem::new(cfg, Modulation::Trained, AngleLoss::CrbNormalized, 5).unwrap();
    assert_eq!(ck.single_user().unwrap().nets, fresh.nets);
}

#[test]
fn missing_field_is_named() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "bad.toml", &TINY.replace("sensing_weight = 0.5", ""));
    let out = jcas(&["train", "--config", "bad.toml", "--out", "x"], dir.path());
    assert!(!out.status.success());
    let msg = stderr(&out);
    assert!(msg.contains("plan") && msg.contains("sensing_weight"), "{msg}");
}

#[test]
fn flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY);
    ok(jcas(&["train", "--config", "tiny.toml", "--out", "o", "--sensing-weight", "0.9", "--seed", "11"], dir.path()));
    let ck = Checkpoint::load(&dir.path().join("o/checkpoint.json")).unwrap();
    assert_eq!((ck.plan.sensing_weight, ck.plan.seed), (0.9, 11));
}

#[test]
fn env_var_sets_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "tiny.toml", TINY);
    let out = Command::new(env!("CARGO_BIN_EXE_jcas"))
        .args(["train", "--config", "tiny.toml"])
        .current_dir(dir.path())
        .env("JCAS_OUT_DIR", dir.path().join("from-env"))
        .output()
        .unwrap();
    ok(out);
    assert!(dir.path().join("from-env/checkpoint.json").exists());
}

#[test]
fn eval_sweeps_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "run");
    let ck = ck.to_str().unwrap();
    let args = ["eval", "--checkpoint", ck, "--axis", "snr_s", "--grid", "-10:10:10", "--trials", "200"];
    ok(jcas(&[&args[..], &["--out", "e1.csv"]].concat(), dir.path()));
    ok(jcas(&[&args[..], &["--out", "e2.csv"]].concat(), dir.path()));
    assert_eq!(sha(&dir.path().join("e1.csv")), sha(&dir.path().join("e2.csv")));
    let (header, rows) = table(&dir.path().join("e1.csv"));
    for col in ["snr_s_db", "p_d", "p_f", "p_d_np", "rmse_nn", "rmse_esprit", "crb_rmse"] {
        assert!(header.split(',').any(|c| c == col), "missing {col} in {header}");
    }
    assert_eq!(rows.len(), 3);
}

#[test]
fn eval_empty_grid_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "run");
    ok(jcas(&["eval", "--checkpoint", ck.to_str().unwrap(), "--axis", "n_win", "--grid", "", "--out", "e.csv"], dir.path()));
    let (header, rows) = table(&dir.path().join("e.csv"));
    assert!(header.starts_with("n_win,"));
    assert!(rows.is_empty());
}

#[test]
fn eval_refuses_other_versions_and_partial_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "run");
    let text = fs::read_to_string(&ck).unwrap();

    let old = dir.path().join("old.json");
    fs::write(&old, text.replacen("\"version\":1", "\"version\":99", 1)).unwrap();
    let out = jcas(&["eval", "--checkpoint", old.to_str().unwrap(), "--axis", "snr_s", "--grid", "0", "--out", "e.csv"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("version 99"), "{}", stderr(&out));

    let part = dir.path().join("part.json");
    fs::write(&part, text.replacen("\"partial\":false", "\"partial\":true", 1)).unwrap();
    let args = ["eval", "--checkpoint", part.to_str().unwrap(), "--axis", "snr_s", "--grid", "0", "--trials", "50", "--out", "p.csv"];
    let out = jcas(&args, dir.path());
    assert!(!out.status.success() && stderr(&out).contains("partial"), "{}", stderr(&out));
    ok(jcas(&[&args[..], &["--allow-partial"]].concat(), dir.path()));
}

#[test]
fn unknown_figure_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = jcas(&["figure", "heatmap"], dir.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("beam, tradeoff, kurtosis, constellation"), "{}", stderr(&out));
}

#[test]
fn kurtosis_figure_has_reference_markers() {
    let dir = tempfile::tempdir().unwrap();
    ok(jcas(&["figure", "kurtosis", "--out", "fig"], dir.path()));
    let (header, rows) = table(&dir.path().join("fig/kurtosis.csv"));
    assert_eq!(header, "source,w_s,kurtosis,mean_min_distance");
    let get = |name: &str| -> (f64, f64) {
        let r = rows.iter().find(|r| r.starts_with(name)).unwrap();
        let f: Vec<&str> = r.split(',').collect();
        (f[2].parse().unwrap(), f[3].parse().unwrap())
    };
    let (k, d) = get("psk");
    assert!((k - 1.0).abs() < 1e-9 && (d - 0.390).abs() < 5e-4);
    let (k, d) = get("qam");
    assert!((k - 1.32).abs() < 1e-9 && (d - 0.632).abs() < 5e-4);
    assert!(dir.path().join("fig/kurtosis_curve.csv").exists());
}

#[test]
fn beam_and_constellation_figures() {
    let dir = tempfile::tempdir().unwrap();
    let ck = train_tiny(dir.path(), "run");
    let ck = ck.to_str().unwrap();
    ok(jcas(&["figure", "beam", "--checkpoint", ck, "--out", "fig"], dir.path()));
    let (header, rows) = table(&dir.path().join("fig/beam.csv"));
    assert_eq!(header, "angle_deg,power");
    assert_eq!(rows.len(), 720);
    let step: Vec<f64> = rows[..2].iter().map(|r| r.split(',').next().unwrap().parse().unwrap()).collect();
    assert!((step[1] - step[0] - 0.25).abs() < 1e-9);
    let (header, rows) = table(&dir.path().join("fig/beam_fractions.csv"));
    assert_eq!((header.as_str(), rows.len()), ("w_s,frac_sens,frac_comm,frac_out", 1));

    ok(jcas(&["figure", "constellation", "--checkpoint", ck, "--checkpoint", ck, "--out", "fig"], dir.path()));
    let (header, rows) = table(&dir.path().join("fig/constellation.csv"));
    assert_eq!(header, "w_s,index,bits,re,im");
    assert_eq!(rows.len(), 32);

    ok(jcas(&["figure", "tradeoff", "--checkpoint", ck, "--trials", "200", "--out", "fig"], dir.path()));
    let (header, rows) = table(&dir.path().join("fig/tradeoff.csv"));
    assert!(header.starts_with("w_s,") && header.contains("bmi_nn") && header.contains("rmse_nn"));
    assert_eq!(rows.len(), 1);
}

#[test]
fn multi_user_run_writes_per_ue_tables() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[mimo]\nue_angles_deg = [50.0, 70.0]\n");
    write_config(dir.path(), "mu.toml", &text);
    ok(jcas(&["train", "--config", "mu.toml", "--out", "mu"], dir.path()));
    let ck = Checkpoint::load(&dir.path().join("mu/checkpoint.json")).unwrap();
    assert!(matches!(ck.model, Model::MultiUser(_)));
    let path = dir.path().join("mu/checkpoint.json");
    let args = ["figure", "beam", "--checkpoint", path.to_str().unwrap(), "--trials", "100", "--ber-grid", "0:20:10", "--out", "fig"];
    ok(jcas(&args, dir.path()));
    let (header, _) = table(&dir.path().join("fig/beam.csv"));
    assert_eq!(header, "angle_deg,p_ue1,p_ue2,p_sum");
    let (header, rows) = table(&dir.path().join("fig/ber.csv"));
    assert_eq!(header, "snr_c_db,ber_nn_ue1,ber_nn_ue2,ber_mld_ue1,ber_mld_ue2");
    assert_eq!(rows.len(), 3);
}

#[test]
fn baselines_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    ok(jcas(&["baseline", "crb", "--grid", "-5:5:0.5", "--out", "crb.csv"], dir.path()));
    let (header, rows) = table(&dir.path().join("crb.csv"));
    assert!(header.starts_with("snr_eff_db,crb_rmse_rad"));
    assert_eq!(rows.len(), 21);
    let zero: Vec<&str> = rows[10].split(',').collect();
    assert_eq!(zero[0], "0");
    assert!((zero[1].parse::<f64>().unwrap() - 0.01258).abs() < 1e-4);

    ok(jcas(&["baseline", "np", "--n-win", "5", "--grid", "-5,5", "--trials", "2000", "--out", "np.csv"], dir.path()));
    let (_, rows) = table(&dir.path().join("np.csv"));
    let pd: Vec<f64> = rows.iter().map(|r| r.split(',').nth(3).unwrap().parse().unwrap()).collect();
    assert!(pd[1] > pd[0]);

    ok(jcas(&["baseline", "esprit", "--grid", "10", "--trials", "500", "--n-win", "15", "--out", "es.csv"], dir.path()));
    let (_, rows) = table(&dir.path().join("es.csv"));
    let f: Vec<f64> = rows[0].split(',').skip(2).take(2).map(|x| x.parse().unwrap()).collect();
    assert!(f[0] < 2.0 * f[1], "{f:?}");
}
