use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flowguide"));
    c.env_remove("FLOWGUIDE_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "model.depth=2",
    "--set",
    "model.width=16",
    "--set",
    "model.time_embed_dim=8",
    "--set",
    "align.projector_hidden=8",
    "--set",
    "batch_size=16",
    "--set",
    "total_steps=30",
    "--set",
    "guidance.warmup_steps=10",
];

fn train_tiny(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = train_tiny(&a, &["--set", "guidance.w=1.45"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&train_tiny(&b, &["--set", "guidance.w=1.45"])), 0);
    for f in ["metrics.csv", "resolved_config.json", "latest.ckpt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 31);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["guidance"]["w"], 1.45);
    assert_eq!(resolved["train"]["total_steps"], 30);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(&dir.path().join("x"), &["--set", "guidance.w=-1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("guidance.w"));
    assert_eq!(code(&train_tiny(&dir.path().join("y"), &["--set", "nope=3"])), 1);
    assert_eq!(code(&run(&["train", "--bogus"])), 1);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
}

#[test]
fn seed_precedence_env_over_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(TINY);
    let o = bin().env("FLOWGUIDE_SEED", "9").args(&args).output().unwrap();
    assert_eq!(code(&o), 0);
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 9);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let half = dir.path().join("half");
    let rest = dir.path().join("rest");
    assert_eq!(code(&train_tiny(&full, &[])), 0);
    assert_eq!(code(&train_tiny(&half, &["--set", "total_steps=12"])), 0);
    let o = run(&[
        "train",
        "--resume",
        half.join("latest.ckpt").to_str().unwrap(),
        "--set",
        "total_steps=30",
        "--out",
        rest.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tail_full: Vec<String> = std::fs::read_to_string(full.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(13)
        .map(String::from)
        .collect();
    let tail_resumed: Vec<String> = std::fs::read_to_string(rest.join("metrics.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(String::from)
        .collect();
    assert_eq!(tail_full, tail_resumed);
    let o = run(&[
        "train",
        "--resume",
        half.join("latest.ckpt").to_str().unwrap(),
        "--set",
        "lr=0.5",
        "--out",
        rest.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn sample_eval_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert_eq!(code(&train_tiny(&run_dir, &[])), 0);
    let ckpt = run_dir.join("latest.ckpt");
    let samples = dir.path().join("samples.csv");
    let o = run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--n",
        "20",
        "--steps",
        "6",
        "--out",
        samples.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&samples).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "label,x0,x1,seed,steps,cfg_scale,sampler,config_hash");
    assert_eq!(lines.len(), 81);
    assert!(lines[1].contains(",0,6,1.45,euler_maruyama,"));

    let single = run(&[
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--n",
        "2",
        "--cfg",
        "1.0",
        "--steps",
        "50",
        "--out",
        dir.path().join("single.csv").to_str().unwrap(),
    ]);
    assert!(String::from_utf8_lossy(&single.stderr).contains("50 network evaluations"));

    let ev = dir.path().join("ev");
    let o = run(&["eval", "--samples", samples.to_str().unwrap(), "--out", ev.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(ev.join("report.csv")).unwrap();
    assert!(report.starts_with("condition,n,fd,kl,align_acc,mean_err,cov_err,mode_entropy\n"));
    assert_eq!(report.lines().count(), 6);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["meta"]["steps"], 6);
    let ev2 = dir.path().join("ev2");
    run(&["eval", "--samples", samples.to_str().unwrap(), "--out", ev2.to_str().unwrap()]);
    assert_eq!(report, std::fs::read_to_string(ev2.join("report.csv")).unwrap());

    let sw = dir.path().join("sw");
    let o = run(&[
        "sweep",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--axis",
        "cfg_scale",
        "--values",
        "1.0,1.45,4.0,6.0",
        "--n",
        "10",
        "--steps",
        "4",
        "--out",
        sw.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sweep = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    assert!(sweep.lines().nth(1).unwrap().starts_with("cfg_scale,1,"));

    let sw2 = dir.path().join("sw2");
    let o = run(&[
        "sweep",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--axis",
        "steps",
        "--values",
        "5,25",
        "--n",
        "10",
        "--out",
        sw2.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read_to_string(sw2.join("sweep.csv")).unwrap().lines().count(), 3);
    assert_eq!(
        code(&run(&["sweep", "--checkpoint", ckpt.to_str().unwrap(), "--axis", "steps", "--values", "2.5"])),
        1
    );
}

#[test]
fn sample_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["sample", "--checkpoint", dir.path().join("missing.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let run_dir = dir.path().join("run");
    assert_eq!(code(&train_tiny(&run_dir, &["--set", "total_steps=2"])), 0);
    let ckpt = run_dir.join("latest.ckpt");
    assert_eq!(code(&run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--sampler", "heun"])), 1);
    assert_eq!(code(&run(&["sample", "--checkpoint", ckpt.to_str().unwrap(), "--n", "0"])), 1);
}

#[test]
fn eval_reports_bad_rows_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "label,x0,x1\n0,1.0,2.0\n1,abc,2.0\n").unwrap();
    let o = run(&["eval", "--samples", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.csv:3"), "{}", String::from_utf8_lossy(&o.stderr));
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_ne!(code(&run(&["eval", "--samples", empty.to_str().unwrap()])), 0);
    let bad_label = dir.path().join("label.csv");
    std::fs::write(&bad_label, "label,x0,x1\n7,1.0,2.0\n").unwrap();
    assert_eq!(code(&run(&["eval", "--samples", bad_label.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])), 1);
}

#[test]
fn eval_of_exact_task_samples_is_near_zero() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exact.csv");
    let means = [[3.0, 3.0], [-3.0, 3.0], [-3.0, -3.0], [3.0, -3.0]];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut text = String::from("label,x0,x1\n");
    for (l, m) in means.iter().enumerate() {
        for _ in 0..10_000 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            text.push_str(&format!("{l},{},{}\n", m[0] + 0.5 * a, m[1] + 0.5 * b));
        }
    }
    std::fs::write(&p, text).unwrap();
    let o = run(&["eval", "--samples", p.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(json["aggregate"]["fd"].as_f64().unwrap() < 0.01);
}

#[test]
fn oracle_check_passes_and_detects_sign_flip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle.json");
    let o = run(&["oracle-check", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(stdout.lines().filter(|l| l.starts_with("PASS")).count(), 6);
    assert!(out.exists());
    let o = run(&["oracle-check", "--inject-sign-flip"]);
    assert_eq!(code(&o), 2);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("FAIL stop_gradient")));
}
