use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[layout]
frames = 3
height = 4
width = 4

[attention]
heads = 2
head_dim = 4

[model]
layers = 1

[train]
steps = 4
batch_size = 2
report_every = 2
eval_examples = 4

[dataset]
num_videos = 8

[sampler]
steps = 5

[sweep]
seeds = 0, 1
";

fn dymos(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dymos")).args(args).env("DYMOS_THREADS", "1").output().expect("run dymos")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.conf");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny config into `dir/train` and returns the config path.
fn trained(dir: &Path) -> PathBuf {
    let cfg = tiny_config(dir);
    let out = dir.join("train");
    let o = dymos(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", text(&o));
    cfg
}

#[test]
fn missing_config_exits_2_and_names_path() {
    let o = dymos(&["train", "--config", "/no/such/dir/exp.conf"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o).contains("/no/such/dir/exp.conf"));
}

#[test]
fn bad_config_reports_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.conf");
    fs::write(&p, "[sampler]\nsteps = 10\n[modulation]\ngamma = lots\n").unwrap();
    let o = dymos(&["config", "--config", s(&p)]);
    assert_eq!(o.status.code(), Some(2));
    let t = text(&o);
    assert!(t.contains("line 4") && t.contains("modulation.gamma"), "{t}");
}

#[test]
fn invalid_flag_values_exit_2() {
    for args in [
        vec!["sample", "--schedule", "cubic"],
        vec!["sample", "--guidance", "0.5"],
        vec!["sample", "--lambda", "1.5"],
        vec!["sweep", "--gammas", "0,x"],
        vec!["bench", "--size", "30", "--frames", "4"],
    ] {
        let o = dymos(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", text(&o));
    }
}

#[test]
fn help_lists_every_flag_with_default() {
    for cmd in ["train", "sample", "sweep", "bench", "config"] {
        let o = dymos(&[cmd, "--help"]);
        let help = String::from_utf8_lossy(&o.stdout).to_string();
        let mut entries: Vec<String> = Vec::new();
        for line in help.lines().map(str::trim_start) {
            if line.starts_with('-') {
                entries.push(line.to_string());
            } else if let Some(e) = entries.last_mut() {
                e.push(' ');
                e.push_str(line);
            }
        }
        let mut flags = 0;
        for e in entries.iter().filter(|e| !e.starts_with("-h, --help") && !e.starts_with("-V, --version")) {
            flags += 1;
            assert_eq!(e.matches("[default:").count(), 1, "`{cmd}`: {e}");
        }
        assert!(flags > 0, "{help}");
    }
    let help = String::from_utf8_lossy(&dymos(&["sample", "--help"]).stdout).to_string();
    assert!(help.contains("[default: 0.6]") && help.contains("[default: 0.2]"));
}

#[test]
fn config_command_prints_round_trippable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let o = dymos(&["config", "--set", "modulation.schedule=log"]);
    assert!(o.status.success());
    let p = dir.path().join("resolved.conf");
    fs::write(&p, &o.stdout).unwrap();
    let again = dymos(&["config", "--config", s(&p)]);
    assert_eq!(again.stdout, o.stdout);
    let json = dymos(&["config", "--json"]);
    assert!(String::from_utf8_lossy(&json.stdout).contains("\"schema_version\": 1"));
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = dymos(&["train", "--config", s(&cfg), "--out", s(out)]);
        assert!(o.status.success(), "{}", text(&o));
    }
    for f in ["i2v.weights", "t2v.weights", "i2v_loss.csv", "t2v_loss.csv", "config.json"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read(a.join("i2v.weights")).unwrap(), fs::read(b.join("i2v.weights")).unwrap());
    assert_eq!(fs::read(a.join("t2v.weights")).unwrap(), fs::read(b.join("t2v.weights")).unwrap());
    assert_ne!(fs::read(a.join("i2v.weights")).unwrap(), fs::read(a.join("t2v.weights")).unwrap());
    let loss = fs::read_to_string(a.join("i2v_loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n2,"), "{loss}");
}

#[test]
fn training_divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = dymos(&["train", "--config", s(&cfg), "--i2v-only", "--set", "train.learning_rate=1e12", "--out", s(&dir.path().join("t"))]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("diverged"), "{}", text(&o));
}

#[test]
fn sampling_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let w = dir.path().join("train/i2v.weights");
    let run = |name: &str, extra: &[&str]| -> (Output, PathBuf) {
        let out = dir.path().join(name);
        let mut args = vec!["sample", "--config", s(&cfg), "--weights", s(&w), "--out", s(&out)];
        args.extend_from_slice(extra);
        let o = dymos(&args);
        assert!(o.status.success(), "{}", text(&o));
        (o, out)
    };

    let (_, g0) = run("g0", &["--gamma", "0"]);
    let (_, off) = run("off", &["--no-modulation"]);
    assert_eq!(fs::read(g0.join("latent.dmlt")).unwrap(), fs::read(off.join("latent.dmlt")).unwrap());
    let (_, on) = run("on", &["--gamma", "3", "--lambda", "1"]);
    assert_ne!(fs::read(on.join("latent.dmlt")).unwrap(), fs::read(off.join("latent.dmlt")).unwrap());
    for f in 0..3 {
        assert!(g0.join(format!("frame_{f:03}.pgm")).exists());
    }
    assert!(g0.join("config.json").exists());

    let (o, _) = run("gate", &["--lambda", "0.2", "--steps", "40"]);
    let log = String::from_utf8_lossy(&o.stdout).to_string();
    assert!(log.contains("active steps: [1,2,3,4,5,6,7] of 40"), "{log}");
    assert_eq!(log.lines().filter(|l| l.ends_with(" modulated")).count(), 7);
    assert!(log.contains("step 8/40 t=0.8250->0.8000 plain"), "{log}");

    let (o, _) = run("log", &["--schedule", "log"]);
    let log = String::from_utf8_lossy(&o.stdout).to_string();
    for f in 1..3 {
        let phi = (1.0 + f as f64).ln() / 3f64.ln();
        assert!(log.contains(&format!("phi[{f}] = {phi:.6}")), "{log}");
    }

    let (_, cap) = run("cap", &["--capture"]);
    let steps = fs::read_to_string(cap.join("attention_steps.csv")).unwrap();
    assert!(steps.starts_with("step,query_frame,key_frame,attention\n1,0,0,"));
    assert_eq!(steps.lines().count(), 1 + 5 * 9);
    assert!(fs::read_to_string(cap.join("attention_window.pgm")).unwrap().starts_with("P2\n"));
}

#[test]
fn sweep_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let w = dir.path().join("train/i2v.weights");
    let csv = dir.path().join("one/sweep.csv");
    let o = dymos(&["sweep", "--config", s(&cfg), "--weights", s(&w), "--gammas", "0", "--out", s(&csv)]);
    assert!(o.status.success(), "{}", text(&o));
    let one = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = one.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "gamma,dd_proxy,ref_mse,d_gamma,refmass_f1,refmass_f2");
    assert!(lines[1].starts_with("0,") && lines[1].split(',').nth(3) == Some("0"));

    let full = dir.path().join("full/sweep.csv");
    let t2v = dir.path().join("train/t2v.weights");
    let o = dymos(&[
        "sweep", "--config", s(&cfg), "--weights", s(&w), "--t2v-weights", s(&t2v), "--gammas", "-1,0,1", "--out", s(&full),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let rows: Vec<String> = fs::read_to_string(&full).unwrap().lines().skip(1).map(String::from).collect();
    assert_eq!(rows.len(), 3);
    let dd = |r: &str| r.split(',').nth(1).unwrap().to_string();
    assert_eq!(dd(&rows[1]), dd(lines[1]), "gamma 0 row must match the single-gamma run");
    let d = full.parent().unwrap();
    for f in ["difference_gm1.pgm", "difference_g0.csv", "attention_g1.pgm", "sweep_samples.csv", "reference_delta.csv", "comparator_attention.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let names: Vec<String> = fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(names.iter().all(|n| !n.contains(".tmp")), "{names:?}");
}

#[test]
fn bench_report_format() {
    let o = dymos(&["bench", "--size", "64", "--heads", "2", "--iters", "3"]);
    assert!(o.status.success(), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    for key in ["S=64", "heads=2", "iters=3", "median=", "p90=", "overhead="] {
        assert!(out.contains(key), "{out}");
    }
}
