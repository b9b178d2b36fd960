use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn sdlab(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdlab"))
        .args(args)
        .current_dir(dir)
        .env_remove("SDLAB_THREADS")
        .output()
        .unwrap()
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let path = dir.path().join("cfg.toml");
    fs::write(&path, text).unwrap();
    path
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn data_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn missing_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let o = sdlab(&["--config", "nope.toml", "distill"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.toml"));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[distill]\niterations = \"many\"\n");
    assert_eq!(code(&sdlab(&["--config", cfg.to_str().unwrap(), "distill"], dir.path())), 2);
    let cfg = write_config(&dir, "[distill]\niterations = 0\n");
    assert_eq!(code(&sdlab(&["--config", cfg.to_str().unwrap(), "distill"], dir.path())), 2);
}

#[test]
fn one_iteration_gives_one_row_and_a_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[distill]\niterations = 1\n");
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "run", "distill"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    assert_eq!(data_rows(&run.join("trajectory.csv")), 1);
    for f in ["manifest.toml", "scene.csv", "operator.vdmop"] {
        assert!(run.join(f).exists(), "{f}");
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "seed = 3\n[distill]\niterations = 50\nsnapshot_every = 10\n");
    assert_eq!(code(&sdlab(&["--config", cfg.to_str().unwrap(), "--out", "a", "distill"], dir.path())), 0);
    let a = dir.path().join("a");
    assert_eq!(data_rows(&a.join("snapshots.csv")), 5);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 3"));
    assert!(manifest.contains("T = 1000"));
    assert!(manifest.contains("cutoff = 300"));
    let o = sdlab(&["--config", a.join("manifest.toml").to_str().unwrap(), "--out", "b", "distill"], dir.path());
    assert_eq!(code(&o), 0);
    let b = dir.path().join("b");
    assert_eq!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
    assert_eq!(fs::read(a.join("operator.vdmop")).unwrap(), fs::read(b.join("operator.vdmop")).unwrap());
    let rerun = fs::read_to_string(b.join("manifest.toml")).unwrap();
    assert_eq!(rerun.replace("output_dir = \"b\"", "output_dir = \"a\""), manifest);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "seed = 1\n[distill]\niterations = 20\n");
    let c = cfg.to_str().unwrap();
    sdlab(&["--config", c, "--out", "a", "distill"], dir.path());
    sdlab(&["--config", c, "--seed", "2", "--out", "b", "distill"], dir.path());
    sdlab(&["--config", c, "--seed", "1", "--out", "c", "distill"], dir.path());
    let read = |d: &str| fs::read(dir.path().join(d).join("trajectory.csv")).unwrap();
    assert_ne!(read("a"), read("b"));
    assert_eq!(read("a"), read("c"));
}

#[test]
fn splat_distill_writes_images_and_checkpoints() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "[mixture]\npreset = \"templates\"\nsigma = 0.1\n\
         [renderer]\nkind = \"splat\"\nheight = 8\nwidth = 8\nchannels = 3\nsplats = 4\n\
         [operator]\nhidden_dims = [16]\n\
         [distill]\niterations = 4\nsnapshot_every = 2\ncondition = \"template1\"\n",
    );
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "run", "distill"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    let ppm = fs::read(run.join("render.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), 11 + 8 * 8 * 3);
    assert!(fs::read(run.join("scene.splat")).unwrap().starts_with(b"SPLAT1"));
    assert!(fs::read(run.join("operator.vdmop")).unwrap().starts_with(b"VDMOP1"));
    assert!(run.join("snapshots/iter_000002.splat").exists());
    assert!(run.join("snapshots/iter_000004.splat").exists());
}

#[test]
fn non_finite_run_aborts_with_code_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[distill]\niterations = 10\nscene_lr = 1e308\n[renderer]\ninit_value = 1e308\n");
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "run", "distill"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn sample_counts_and_determinism() {
    let dir = TempDir::new().unwrap();
    let o = sdlab(&["--out", "zero", "sample", "--count", "0"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(!dir.path().join("zero").exists());

    for name in ["a", "b"] {
        let o = sdlab(&["--out", name, "--seed", "5", "sample", "--count", "3", "--condition", "right"], dir.path());
        assert_eq!(code(&o), 0);
    }
    let a = dir.path().join("a/samples.csv");
    assert_eq!(data_rows(&a), 3);
    assert_eq!(fs::read(&a).unwrap(), fs::read(dir.path().join("b/samples.csv")).unwrap());
    // right-mode samples sit near +2
    for line in fs::read_to_string(&a).unwrap().lines().skip(1) {
        let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((x - 2.0).abs() < 1.5, "{x}");
    }

    assert_eq!(code(&sdlab(&["sample", "--condition", "nope"], dir.path())), 2);
}

#[test]
fn image_samples_are_netpbm_files() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[mixture]\npreset = \"templates\"\n[renderer]\nkind = \"splat\"\nheight = 6\nwidth = 6\n");
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "s", "sample", "--count", "3"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut names: Vec<String> = fs::read_dir(dir.path().join("s"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["sample_000.pgm", "sample_001.pgm", "sample_002.pgm"]);
}

#[test]
fn analyze_reports() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[analysis]\ntrials = 200\nt_grid = [1, 50, 500, 1000]\n");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&sdlab(&["--config", c, "--out", "r", "analyze", "--which", "correlation"], dir.path())), 0);
    let corr = fs::read_to_string(dir.path().join("r/correlation.csv")).unwrap();
    assert_eq!(corr.lines().next().unwrap(), "t,value,stderr,trials");
    assert_eq!(corr.lines().count(), 5);

    assert_eq!(code(&sdlab(&["--config", c, "--out", "r", "analyze", "--which", "variance"], dir.path())), 0);
    assert_eq!(data_rows(&dir.path().join("r/variance.csv")), 4);

    assert_eq!(code(&sdlab(&["analyze", "--which", "entropy"], dir.path())), 2);
}

#[test]
fn kl_of_matched_gaussians_vanishes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "[mixture]\npreset = \"explicit\"\nsigma = 1e-6\ncomponents = [{ weight = 1.0, mean = [0.5] }]\n\
         [analysis]\nkl_theta = [0.5]\n",
    );
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "k", "analyze", "--which", "kl"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("k/kl.csv")).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines().skip(1) {
        let kl: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(kl.abs() < 1e-8, "{line}");
    }
}

#[test]
fn ablation_table_has_three_designs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "[analysis.benchmark]\niterations = 100\n[analysis.degradation_task]\nsteps = 50\n",
    );
    let o = sdlab(&["--config", cfg.to_str().unwrap(), "--out", "ab", "analyze", "--which", "ablation"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("ab/ablation.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,final_mode_dist,final_op_loss,seed");
    let variants: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["nonlinear", "linear", "nonlinear_plus_noise"]);
}

#[test]
fn gradcheck_exit_codes() {
    let dir = TempDir::new().unwrap();
    let o = sdlab(&["gradcheck"], dir.path());
    assert_eq!(code(&o), 0);
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().filter(|l| l.ends_with("PASS")).count(), 4);

    let o = sdlab(&["gradcheck", "--inject-fault", "render-grad"], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).lines().any(|l| l.starts_with("renderer") && l.ends_with("FAIL")));

    let cfg = write_config(&dir, "[gradcheck]\nchecks = []\n");
    assert_eq!(code(&sdlab(&["--config", cfg.to_str().unwrap(), "gradcheck"], dir.path())), 2);
}

#[test]
fn thread_count_from_flag_or_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "[distill]\niterations = 30\n");
    let c = cfg.to_str().unwrap();
    assert_eq!(code(&sdlab(&["--config", c, "--threads", "1", "--out", "one", "distill"], dir.path())), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_sdlab"))
        .args(["--config", c, "--out", "env", "distill"])
        .current_dir(dir.path())
        .env("SDLAB_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let read = |d: &str| fs::read(dir.path().join(d).join("trajectory.csv")).unwrap();
    assert_eq!(read("one"), read("env"));
    assert_eq!(code(&sdlab(&["--threads", "0", "distill"], dir.path())), 2);
}
