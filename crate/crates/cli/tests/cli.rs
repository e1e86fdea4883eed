use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wzsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wzsr"))
        .args(args)
        .env_remove("WZSR_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny three-stage run that trains in well under a second.
fn tiny_config(dir: &Path, extra_train: &str) -> PathBuf {
    let text = format!(
        r#"scenario = "222"
out_dir = "{out}"

[model]
stages = 3
alphabet = 2
hidden = 6
prior_kind = "conditional"

[train]
epochs = 3
samples_per_epoch = 4000
batch_size = 500
lambda = 20.0
seed = 1
noise_variance = 0.1
{extra_train}
[eval]
samples = 10000
"#,
        out = dir.join("runs").display()
    );
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn train(cfg: &Path, extra: &[&str]) -> (PathBuf, PathBuf) {
    let mut args = vec!["train", "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = wzsr(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let mut lines = out.lines();
    (lines.next().unwrap().into(), lines.next().unwrap().into())
}

#[test]
fn bounds_closed_form_rates() {
    let o = wzsr(&["bounds", "--noise-var", "0.1", "--distortions", "0.1,0.025,0.00625"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# "));
    assert_eq!(lines.next().unwrap(), "curve,distortion_mse,rate_bits");
    let wz: Vec<f64> = lines
        .filter(|l| l.starts_with("wz_bound"))
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert_eq!(wz.len(), 3);
    for (got, want) in wz.iter().zip([0.0, 1.0, 2.0]) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn same_seed_gives_identical_artifacts() {
    // The output directory is part of the stored config, so both runs share it.
    let a = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path(), "");
    let (ck_a, log_a) = train(&cfg, &["--seed", "7"]);
    let first = (std::fs::read(&ck_a).unwrap(), std::fs::read(&log_a).unwrap());
    let (ck_b, log_b) = train(&cfg, &["--seed", "7"]);
    assert_eq!((&ck_a, &log_a), (&ck_b, &log_b));
    assert!(ck_a.ends_with("222-conditional-lambda20-seed7/checkpoint.wzsr"));
    assert_eq!(first.0, std::fs::read(&ck_b).unwrap());
    assert_eq!(first.1, std::fs::read(&log_b).unwrap());
    let log = std::fs::read_to_string(&log_a).unwrap();
    assert!(log.starts_with("# checkpoint_sha256="));
    assert_eq!(log.lines().nth(1).unwrap(), "epoch,tau,lr,stage,rate_term_bits,mse,total_loss");
    assert_eq!(log.lines().count(), 2 + 3 * 3);

    let (ck_c, _) = train(&cfg, &["--seed", "8"]);
    assert_ne!(first.0, std::fs::read(&ck_c).unwrap());
}

#[test]
fn eval_is_repeatable_and_bounded() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = train(&tiny_config(dir.path(), ""), &["--aux-prior", "--epochs", "30", "--samples-per-epoch", "10000"]);
    let out1 = dir.path().join("e1.csv");
    let out2 = dir.path().join("e2.csv");
    for out in [&out1, &out2] {
        let o = wzsr(&["eval", ck.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("R_marginal"));
    }
    let threaded = dir.path().join("e3.csv");
    let o = wzsr(&[
        "eval",
        ck.to_str().unwrap(),
        "--seed",
        "3",
        "--threads",
        "2",
        "--out",
        threaded.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&out1).unwrap();
    assert_eq!(text, std::fs::read_to_string(&out2).unwrap());
    assert_eq!(text, std::fs::read_to_string(&threaded).unwrap());
    let rows: Vec<&str> = text.lines().skip(2).collect();
    assert_eq!(rows.len(), 3);
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        let marginal: f64 = f[4].parse().unwrap();
        let conditional: f64 = f[5].parse().unwrap();
        assert!((0.0..=1.01).contains(&marginal), "{r}");
        assert!((0.0..=1.01).contains(&conditional), "{r}");
    }
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "learning_rate = 0.5\n");
    let o = wzsr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    let o = wzsr(&["train", "--scenario", "333", "--lambda", "5", "--noise-var", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scenario"));

    let o = wzsr(&["train", "--scenario", "44"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("lambda"));
}

#[test]
fn divergence_exits_3_with_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = wzsr(&["train", "--config", cfg.to_str().unwrap(), "--lambda", "1e308"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("epoch 0"), "{}", stderr(&o));
}

#[test]
fn version_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = train(&tiny_config(dir.path(), ""), &[]);
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
    let bad = dir.path().join("future.wzsr");
    std::fs::write(&bad, bytes).unwrap();
    let o = wzsr(&["eval", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn sweep_rows_and_offline_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = wzsr(&["sweep", "--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let path = PathBuf::from(stdout(&o).trim());
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("# checkpoint_sha256="));
    let rows: Vec<&str> = text.lines().skip(2).collect();
    let model = rows.iter().filter(|r| r.split(',').nth(3).map_or(false, |s| !s.is_empty())).count();
    assert_eq!(model, 15);
    let curves: std::collections::BTreeSet<&str> = rows
        .iter()
        .map(|r| r.split(',').nth(1).unwrap())
        .filter(|k| k.starts_with("wz_") || k.starts_with("no_"))
        .collect();
    assert_eq!(curves.into_iter().collect::<Vec<_>>(), ["no_side_info", "wz_bound"]);

    let again = wzsr(&["sweep", "--config", cfg.to_str().unwrap(), "--epochs", "1", "--no-train"]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert_eq!(std::fs::read_to_string(&path).unwrap(), text);
    let missing = wzsr(&["sweep", "--config", cfg.to_str().unwrap(), "--lambdas", "7", "--no-train"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("training is disabled"));
}

#[test]
fn exports_have_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, _) = train(&tiny_config(dir.path(), ""), &[]);
    let o = wzsr(&["export-binning", ck.to_str().unwrap(), "--resolution", "1500"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let binning = std::fs::read_to_string(ck.with_file_name("binning.csv")).unwrap();
    assert_eq!(binning.lines().count(), 2 + 1500 * 3);
    assert!(ck.with_file_name("binning_transitions.csv").exists());
    assert!(ck.with_file_name("binning_message.csv").exists());

    let o = wzsr(&["export-recon", ck.to_str().unwrap(), "--resolution", "101", "--prefix", "0", "--prefix", "1,0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let recon = std::fs::read_to_string(ck.with_file_name("reconstruction.csv")).unwrap();
    assert_eq!(recon.lines().count(), 2 + 2 * 101);
    assert!(recon.lines().nth(2).unwrap().starts_with("0XX,"));

    let bad = wzsr(&["export-recon", ck.to_str().unwrap(), "--prefix", "2"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("alphabet"));
}

#[test]
fn env_var_sets_default_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("from-env");
    let o = Command::new(env!("CARGO_BIN_EXE_wzsr"))
        .args([
            "train", "--scenario", "mono-2", "--lambda", "5", "--noise-var", "0.1", "--epochs", "1",
            "--samples-per-epoch", "2000",
        ])
        .env("WZSR_OUT_DIR", &env_out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with(env_out.to_str().unwrap()));
}

#[test]
fn shipped_configs_carry_full_scale_hyperparameters() {
    use wzsr_core::config::Scenario;
    use wzsr_core::{PriorKind, RunConfig};
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, scenario) in [("paper_222.cfg", Scenario::TwoTwoTwo), ("paper_44.cfg", Scenario::FourFour)] {
        let cfg = RunConfig::load(&root.join(file)).unwrap();
        let mut want = RunConfig::for_scenario(scenario, PriorKind::Conditional, 150.0, 0.1, 0);
        want.eval.samples = 10_000_000;
        assert_eq!(cfg, want, "{file}");
        assert_eq!(cfg.train.decay_every(PriorKind::Marginal), 80);
        assert_eq!(cfg.train.decay_every(PriorKind::Conditional), 40);
        let desk = cfg.desk_scale();
        assert_eq!((desk.train.epochs, desk.train.samples_per_epoch, desk.eval.samples), (60, 50_000, 1_000_000));
    }
}
