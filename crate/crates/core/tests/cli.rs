mod common;

use std::path::Path;
use std::process::{Command, Output};

fn pom(args: &[&str]) -> Output {
    Command::new(common::pom_bin()).args(args).env_remove("POM_SEED").output().expect("spawn pom")
}

fn text(out: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr))
}

fn write(path: &Path, body: &str) -> String {
    std::fs::write(path, body).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn check_passes_and_is_seed_deterministic() {
    let a = pom(&["--seed", "7", "check"]);
    assert!(a.status.success(), "{}", text(&a));
    let b = pom(&["--seed", "7", "check"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn injected_select_sign_breaks_equivariance() {
    let out = pom(&["--inject-fault", "select-sign", "check"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("equivariance"), "{}", text(&out));
}

#[test]
fn injected_sigmoid_backward_is_caught_by_gradcheck() {
    let clean = pom(&["gradcheck", "--module", "pom"]);
    assert!(clean.status.success(), "{}", text(&clean));

    let out = pom(&["--inject-fault", "sigmoid-backward", "gradcheck", "--module", "pom"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out).contains("w_sel"), "{}", text(&out));
}

#[test]
fn missing_config_names_the_path() {
    let out = pom(&["train", "--config", "/nonexistent/run.conf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("/nonexistent/run.conf"), "{}", text(&out));
}

#[test]
fn unsupported_thread_count_is_a_usage_error() {
    let out = pom(&["bench", "--threads", "4", "--seq-lens", "16"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("--threads"));
    assert_eq!(pom(&["bench", "--threads", "x"]).status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write(&dir.path().join("bad.conf"), "steps = 5\nlearning_rate = 0.1\n");
    let out = pom(&["train", "--config", &conf, "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out).contains("learning_rate"), "{}", text(&out));
}

#[test]
fn train_then_sample_with_zero_guidance_matches_unconditional() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = write(&d.join("train.conf"), "loss = flow_matching\nsteps = 20\nbatch = 16\nclasses = 2\ndim = 8\nseed = 3\n");
    let out = pom(&["train", "--config", &conf, "--out-dir", d.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    let metrics = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 21);

    let ck = d.join("checkpoint.pom");
    let sample = |name: &str, extra: &str| -> Vec<String> {
        let csv = d.join(format!("{name}.csv"));
        let body = format!(
            "checkpoint = {}\nout = {}\nsamples = 10\nsample_steps = 6\nseed = 4\n{extra}",
            ck.display(),
            csv.display()
        );
        let conf = write(&d.join(format!("{name}.conf")), &body);
        let out = pom(&["sample", "--config", &conf]);
        assert!(out.status.success(), "{}", text(&out));
        let rows = std::fs::read_to_string(csv).unwrap();
        // Only the coordinates; the label column differs by construction.
        rows.lines().skip(1).map(|l| l.rsplit_once(',').unwrap().0.to_owned()).collect()
    };
    let guided = sample("guided", "cfg_weight = 0\nclass = 1\n");
    let plain = sample("plain", "class = none\n");
    assert_eq!(guided.len(), 10);
    assert_eq!(guided, plain);
    assert_ne!(sample("conditional", "cfg_weight = 1\nclass = 1\n"), plain);
}

#[test]
fn ablate_writes_one_row_per_dividing_degree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = write(
        &d.join("ablate.conf"),
        "steps = 4\nbatch = 8\ndim = 12\nbudget = 12\ndegrees = 1,5,4\nsamples = 256\nsample_steps = 2\n",
    );
    let csv = d.join("ablation.csv");
    let out = pom(&["ablate", "--config", &conf, "--out", csv.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping degree 5"), "{}", text(&out));

    let body = std::fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = body.lines().collect();
    assert_eq!(lines[0], "degree,expand,pom_params,final_loss,energy_distance");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,12,"));
    assert!(lines[2].starts_with("4,3,"));
    let params = |l: &str| l.split(',').nth(2).unwrap().to_owned();
    assert_eq!(params(lines[1]), params(lines[2]));
}
