use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn xdomain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xdomain")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xdomain(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> (i32, String) {
    let out = xdomain(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: kind="), "{err}");
    (out.status.code().unwrap(), err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const CONFIG: &str = r#"
[data]
dir = "DATA"
sources = ["plain", "inverted"]
target = ["colored"]
eval = "colored"

[scenario]
kind = "dg"
epochs = 2
batch_size = 16
beta = 0.6

[tasks]
active = ["jigsaw", "rotation"]
grid_n = 2
permutations = 4

[weights]
alpha_s_jigsaw = 0.5
alpha_s_rotation = 0.5

[optimizer]
lr = 0.01

[model]
backbone = "cam"
conv1 = 4
conv2 = 6
"#;

fn setup(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["synth-data", "--out", p(&data), "--classes", "3", "--per-domain", "30", "--size", "16", "--styles", "plain,inverted,colored"]);
    let cfg = dir.join("run.toml");
    let text = CONFIG.replace("DATA", p(&data)).replace("target = [\"colored\"]\n", "");
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn gen_perms_writes_the_set() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("perms.txt");
    ok(&["gen-perms", "--tiles", "9", "--count", "30", "--seed", "0", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 30);
    assert_eq!(text.lines().next(), Some("0,1,2,3,4,5,6,7,8"));
    let (code, err) = fail(&["gen-perms", "--tiles", "3", "--count", "7", "--out", p(&out)]);
    assert_eq!(code, 6);
    assert!(err.contains("kind=invalid"));
}

#[test]
fn train_eval_cam_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["train", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["train", "--config", p(&cfg), "--out", p(&b)]);
    let metrics = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(a.join("model.ckpt")).unwrap(), fs::read(b.join("model.ckpt")).unwrap());
    assert_eq!(String::from_utf8(metrics).unwrap().lines().count(), 3);
    assert!(a.join("permutations.txt").exists());

    // The written config reproduces the run on its own.
    let c = dir.path().join("c");
    ok(&["train", "--config", p(&a.join("config.toml")), "--out", p(&c)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(c.join("metrics.csv")).unwrap());

    let data = dir.path().join("data");
    let ckpt = a.join("model.ckpt");
    let line = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--domain", "colored"]);
    assert!(line.starts_with("accuracy="), "{line}");
    let line = ok(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--domain", "plain", "--pretext", "jigsaw", "--perms", p(&a.join("permutations.txt"))]);
    assert!(line.starts_with("pretext=jigsaw accuracy="), "{line}");
    let (code, _) = fail(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--domain", "plain", "--pretext", "jigsaw"]);
    assert_eq!(code, 6);

    let heat = dir.path().join("heat.png");
    ok(&["cam", "--checkpoint", p(&ckpt), "--image", p(&data.join("colored/00000.png")), "--class", "0", "--out", p(&heat)]);
    assert!(heat.exists());

    let report = dir.path().join("report");
    ok(&["report", "--metrics", p(&a.join("metrics.csv")), "--out", p(&report)]);
    assert!(fs::read_to_string(report.join("summary.md")).unwrap().contains("| 2 |"));
    assert!(report.join("metrics0_metrics.png").exists());
}

#[test]
fn override_matches_edited_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let a = dir.path().join("a");
    ok(&["train", "--config", p(&cfg), "--override", "scenario.epochs=1", "--override", "tasks.active=[\"rotation\"]", "--out", p(&a)]);
    let edited = dir.path().join("edited.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("epochs = 2", "epochs = 1").replace("[\"jigsaw\", \"rotation\"]", "[\"rotation\"]");
    fs::write(&edited, text).unwrap();
    let b = dir.path().join("b");
    ok(&["train", "--config", p(&edited), "--out", p(&b)]);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = dir.path().join("o");
    let (code, err) = fail(&["train", "--config", p(&cfg), "--override", "model.depth=3", "--out", p(&out)]);
    assert_eq!(code, 3, "{err}");
    let (code, _) = fail(&["train", "--config", p(&dir.path().join("missing.toml")), "--out", p(&out)]);
    assert_eq!(code, 4);
    let (code, err) = fail(&["train", "--config", p(&cfg), "--override", "scenario.kind=da", "--out", p(&out)]);
    assert_eq!(code, 5, "{err}");
    let bogus = dir.path().join("bogus.ckpt");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let (code, _) = fail(&["eval", "--checkpoint", p(&bogus), "--data", p(&dir.path().join("data")), "--domain", "plain"]);
    assert_eq!(code, 8);
}

#[test]
fn sweep_and_single_epoch_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let sweep = dir.path().join("sweep.csv");
    ok(&["sweep", "--config", p(&cfg), "--override", "scenario.epochs=1", "--param", "beta", "--values", "0.5,1.0", "--seeds", "0,1", "--out", p(&sweep)]);
    assert_eq!(fs::read_to_string(&sweep).unwrap().lines().count(), 3);
    let run = dir.path().join("run");
    ok(&["train", "--config", p(&cfg), "--override", "scenario.epochs=1", "--out", p(&run)]);
    let report = dir.path().join("report");
    ok(&["report", "--metrics", p(&run.join("metrics.csv")), "--sweep", p(&sweep), "--out", p(&report)]);
    assert!(report.join("sweep0_sweep.png").exists());
    let out = xdomain(&["sweep", "--config", p(&cfg), "--param", "gamma", "--values", "1", "--out", p(&sweep)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_lists_config_keys() {
    let help = ok(&["train", "--help"]);
    for key in ["validation_fraction", "alpha_t_rotation", "schedule_steepness", "head_lr", "discriminator_hidden2", "target_classes"] {
        assert!(help.contains(key), "{key}");
    }
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        // A missing data directory is an io error; config errors would exit 3.
        let out = xdomain(&["train", "--config", p(&path), "--override", "data.dir=/nonexistent", "--out", "/nonexistent/out"]);
        assert_eq!(out.status.code(), Some(4), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
        n += 1;
    }
    assert_eq!(n, 3);
}
