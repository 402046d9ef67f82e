use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anchorlab::config::ExperimentConfig;
use anchorlab::learned::{load_checkpoint, save_checkpoint, Denoiser};
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_anchorlab"));
    c.env_remove("ANCHORLAB_OUT");
    c
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn exec(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `base` with `edit` applied as a new config in `dir`.
fn derived_config(dir: &Path, base: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(config(base)).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(format!("derived-{base}"));
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn data_rows(csv: &Path) -> usize {
    fs::read_to_string(csv).unwrap().lines().count() - 1
}

#[test]
fn minimal_run_writes_both_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = exec(bin().args(["run", "--config"]).arg(config("minimal.json")).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("summary.json").is_file());
    assert_eq!(data_rows(&out.join("trajectory.csv")), 100);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps_completed"], 100);
    assert_eq!(summary["config"]["guidance"]["variant"], "anchords");
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let o = exec(bin().env("ANCHORLAB_OUT", &out).args(["run", "--config"]).arg(config("minimal.json")));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("trajectory.csv").is_file());
}

#[test]
fn unknown_variant_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = derived_config(tmp.path(), "minimal.json", |v| v["guidance"]["variant"] = "anchor-ds".into());
    let o = exec(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("x")));
    assert_eq!(o.status.code(), Some(1));
    let msg = stderr(&o);
    assert!(msg.contains("guidance.variant") && msg.contains("anchor-ds"), "{msg}");
    assert!(msg.contains("line"), "{msg}");
}

#[test]
fn misspelled_field_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = derived_config(tmp.path(), "minimal.json", |v| v["run"]["stpes"] = 5.into());
    let o = exec(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("x")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stpes"), "{}", stderr(&o));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let csvs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|d| {
            let out = tmp.path().join(d);
            let o = exec(bin().args(["run", "--config"]).arg(config("bimodal.json")).arg("--out").arg(&out));
            assert!(o.status.success(), "{}", stderr(&o));
            fs::read(out.join("trajectory.csv")).unwrap()
        })
        .collect();
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn divergent_run_exits_with_runtime_code_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = derived_config(tmp.path(), "minimal.json", |v| {
        v["guidance"]["variant"] = "vanilla-sds".into();
        v["run"]["optimizer"] = "sgd".into();
        v["run"]["lr"] = 1e6.into();
        v["run"]["steps"] = 500.into();
    });
    let out = tmp.path().join("diverged");
    let o = exec(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(&out));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let rows = data_rows(&out.join("trajectory.csv"));
    assert!(rows > 0 && rows < 500);
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["failure"].is_string());
}

#[test]
fn single_pair_sweep_matches_run() {
    let tmp = tempfile::tempdir().unwrap();
    let run_out = tmp.path().join("run");
    let o = exec(bin().args(["run", "--config"]).arg(config("bimodal.json")).args(["--seed", "3", "--out"]).arg(&run_out));
    assert!(o.status.success());
    let sweep_out = tmp.path().join("sweep");
    let o = exec(
        bin().args(["sweep", "--config"]).arg(config("bimodal.json")).args(["--seeds", "3", "--variants", "anchords", "--out"]).arg(&sweep_out),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let child = sweep_out.join("anchords/seed-3");
    assert_eq!(fs::read(run_out.join("trajectory.csv")).unwrap(), fs::read(child.join("trajectory.csv")).unwrap());
    assert_eq!(fs::read(run_out.join("summary.json")).unwrap(), fs::read(child.join("summary.json")).unwrap());
    assert_eq!(data_rows(&sweep_out.join("sweep.csv")), 1);
}

#[test]
fn sweep_variants_share_noise_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = exec(
        bin()
            .args(["sweep", "--config"])
            .arg(config("bimodal.json"))
            .args(["--seeds", "0,1", "--variants", "vanilla-sds,anchords,anchords-filter", "--jobs", "3", "--out"])
            .arg(&out),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let hash = |variant: &str, seed: u64| -> String {
        let s: Value =
            serde_json::from_str(&fs::read_to_string(out.join(variant).join(format!("seed-{seed}/summary.json"))).unwrap()).unwrap();
        s["stream_hash"].as_str().unwrap().to_string()
    };
    for seed in [0, 1] {
        assert_eq!(hash("vanilla-sds", seed), hash("anchords", seed));
        assert_eq!(hash("anchords", seed), hash("anchords-filter", seed));
    }
    assert_ne!(hash("anchords", 0), hash("anchords", 1));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 7);
    assert!(runs.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn bad_variant_list_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exec(
        bin().args(["sweep", "--config"]).arg(config("minimal.json")).args(["--variants", "bogus", "--out"]).arg(tmp.path()),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn validate_passes_with_enough_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exec(bin().args(["validate", "--out"]).arg(tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("validation.json")).unwrap()).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.len() >= 12);
    for c in checks {
        assert!(c["name"].is_string() && c["tolerance"].is_number() && c["observed"].is_number());
        assert_eq!(c["passed"], true, "{c}");
    }
}

#[test]
fn corrupted_eta_fails_the_gap_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exec(bin().args(["validate", "--corrupt-eta", "1.01", "--out"]).arg(tmp.path()));
    assert_eq!(o.status.code(), Some(3));
    let report: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("validation.json")).unwrap()).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(failed, ["guidance.reconstruction_gap_identity"]);
}

fn train(tmp: &Path, steps: usize) -> (PathBuf, PathBuf, Output) {
    let cfg = derived_config(tmp, "learned.json", |v| v["training"]["steps"] = steps.into());
    let out = tmp.join("train");
    let ckpt = out.join("prior.ckpt");
    let o = exec(bin().args(["train-prior", "--config"]).arg(&cfg).arg("--out").arg(&out).arg("--checkpoint").arg(&ckpt));
    (cfg, out, o)
}

#[test]
fn zero_step_training_writes_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (cfg, out, o) = train(tmp.path(), 0);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = ExperimentConfig::load(&cfg).unwrap();
    let fresh = Denoiser::new(cfg.arch(), cfg.training.init_seed);
    let loaded = load_checkpoint(&out.join("prior.ckpt")).unwrap();
    assert_eq!(loaded.arch(), fresh.arch());
    assert!(loaded.params().iter().zip(fresh.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    assert_eq!(data_rows(&out.join("loss.csv")), 0);

    // Reload and rewrite: identical bytes.
    let again = tmp.path().join("again.ckpt");
    save_checkpoint(&loaded, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(out.join("prior.ckpt")).unwrap());
}

#[test]
fn learned_run_without_checkpoint_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = derived_config(tmp.path(), "learned.json", |v| v["prior"]["checkpoint"] = "missing.ckpt".into());
    let o = exec(bin().args(["run", "--config"]).arg(&cfg).arg("--out").arg(tmp.path().join("x")));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.ckpt"));
}

/// Trains with the shipped learned-prior settings, then runs the fine-tuning
/// variant against the checkpoint and charts everything.
#[test]
fn default_training_reduces_loss_tenfold_and_feeds_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = derived_config(tmp.path(), "learned.json", |_| {});
    let shipped = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(shipped.training.options.steps, 20_000);
    let (cfg, out, o) = train(tmp.path(), 20_000);
    assert!(o.status.success(), "{}", stderr(&o));
    let t: Value = serde_json::from_str(&fs::read_to_string(out.join("training.json")).unwrap()).unwrap();
    let reduction = t["reduction"].as_f64().unwrap();
    assert!(reduction >= 10.0, "validation loss fell only {reduction}x");
    assert_eq!(data_rows(&out.join("loss.csv")), 20_000);

    let run_out = tmp.path().join("finetune");
    let o = exec(
        bin()
            .args(["run", "--config"])
            .arg(&cfg)
            .arg("--checkpoint")
            .arg(out.join("prior.ckpt"))
            .arg("--out")
            .arg(&run_out),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let s: Value = serde_json::from_str(&fs::read_to_string(run_out.join("summary.json")).unwrap()).unwrap();
    assert!(s["finetune_steps"].as_u64().unwrap() >= 200);
    assert!(run_out.join("finetuned.ckpt").is_file());

    let o = exec(bin().args(["report", "--out"]).arg(tmp.path()));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [out.join("loss.svg"), run_out.join("nearest_mode_distance.svg"), run_out.join("gradients.svg")] {
        assert!(fs::read_to_string(&f).unwrap().starts_with("<svg"), "{}", f.display());
    }
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = exec(bin().args(["report", "--out"]).arg(tmp.path()));
    assert_eq!(o.status.code(), Some(2));
}
