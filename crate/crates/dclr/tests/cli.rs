use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
datagen.n_slides = 4
datagen.side = 128
encoder.depth = 2
encoder.base_channels = 4
encoder.input_side = 16
encoder.embed_dim = 8
encoder.hidden_dim = 8
encoder.proj_dim = 4
contrastive.batch_size = 16
pretrain.max_epochs = 2
pretrain.stride = 16
pretrain.max_patches = 64
pipeline.stride = 8
";

fn dclr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dclr"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stage(cmd: &str, cwd: &Path, out: &str) {
    let o = dclr(&[cmd, "--config", "small.cfg", "--seed", "5", "--threads", "1", "--out", out], cwd);
    assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
}

fn full_run(cwd: &Path, out: &str) {
    for cmd in ["gen", "pretrain", "segment", "refine", "eval"] {
        stage(cmd, cwd, out);
    }
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
    dir
}

fn test_ids(run: &Path) -> Vec<String> {
    let manifest = fs::read_to_string(run.join("data/manifest.txt")).unwrap();
    manifest.lines().filter_map(|l| l.strip_prefix("test = ")).map(str::to_string).collect()
}

fn error_line(o: &Output) -> String {
    assert!(!o.status.success());
    let stderr = String::from_utf8(o.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "{stderr}");
    lines[0].to_string()
}

#[test]
fn staged_run_is_complete_and_reproducible() {
    let dir = setup();
    let cwd = dir.path();
    full_run(cwd, "a");
    full_run(cwd, "b");
    for stage_dir in ["data", "model", "segment", "refine", "eval"] {
        let cfg = fs::read_to_string(cwd.join("a").join(stage_dir).join("config.txt")).unwrap();
        assert!(cfg.contains("run.seed = 5\n") && cfg.contains("encoder.input_side = 16\n"));
    }
    let summary = |run: &str| fs::read(cwd.join(run).join("eval/summary.txt")).unwrap();
    assert_eq!(summary("a"), summary("b"));
    let metrics = fs::read_to_string(cwd.join("a/eval/metrics.txt")).unwrap();
    assert!(metrics.starts_with("format = dclr-metrics 1\n"));
    for key in ["patch_accuracy", "dice_pre_crf", "dice_post_crf", "crf_gain"] {
        assert!(metrics.contains(&format!("\n{key} = ")), "{key} missing from {metrics}");
    }

    // a rerun of one stage in place reproduces its outputs
    let refined = cwd.join(format!("a/refine/{}.dten", test_ids(&cwd.join("a"))[0]));
    let before = fs::read(&refined).unwrap();
    stage("refine", cwd, "a");
    assert_eq!(fs::read(&refined).unwrap(), before);
}

#[test]
fn eval_of_ground_truth_scores_one() {
    let dir = setup();
    let cwd = dir.path();
    full_run(cwd, "run");
    let run = cwd.join("run");
    let ids = test_ids(&run);
    assert!(!ids.is_empty());
    for id in &ids {
        let gt = run.join(format!("data/{id}_mask.png"));
        fs::copy(&gt, run.join(format!("segment/{id}.png"))).unwrap();
        fs::copy(&gt, run.join(format!("refine/{id}.png"))).unwrap();
    }
    stage("eval", cwd, "run");
    let metrics = fs::read_to_string(run.join("eval/metrics.txt")).unwrap();
    assert!(metrics.contains("\ndice_pre_crf = 1.000000\n"), "{metrics}");
    assert!(metrics.contains("\ndice_post_crf = 1.000000\n"), "{metrics}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = setup();
    fs::write(dir.path().join("bad.cfg"), "run.seed = 1\nencoder.widht = 3\n").unwrap();
    let o = dclr(&["gen", "--config", "bad.cfg", "--out", "x"], dir.path());
    let line = error_line(&o);
    assert!(line.starts_with("error kind=config message=\"bad.cfg:2: unknown key encoder.widht"), "{line}");
    assert!(!dir.path().join("x").exists());
}

#[test]
fn stages_name_their_missing_inputs() {
    let dir = setup();
    let o = dclr(&["segment", "--out", "empty"], dir.path());
    let line = error_line(&o);
    assert!(line.starts_with("error kind=missing-input message=\"missing input empty/model/manifest.txt"), "{line}");
    let o = dclr(&["gen", "--config", "absent.cfg"], dir.path());
    assert!(error_line(&o).starts_with("error kind=missing-input"));
}

#[test]
fn corrupt_stage_outputs_are_reported() {
    let dir = setup();
    let cwd = dir.path();
    for cmd in ["gen", "pretrain", "segment"] {
        stage(cmd, cwd, "run");
    }
    let id = test_ids(&cwd.join("run")).remove(0);
    let probs = cwd.join(format!("run/segment/{id}.dten"));
    let mut bytes = fs::read(&probs).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&probs, bytes).unwrap();
    let o = dclr(&["refine", "--config", "small.cfg", "--out", "run"], cwd);
    let line = error_line(&o);
    assert!(line.starts_with("error kind=format message=") && line.contains(&format!("{id}.dten")), "{line}");
}

#[test]
fn usage_errors_are_one_line() {
    let dir = setup();
    let o = dclr(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error kind=usage message="));
    let o = dclr(&["--help"], dir.path());
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("pretrain"));
}
