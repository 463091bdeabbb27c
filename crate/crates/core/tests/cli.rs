use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_markov-tower");

const DOUBLING: &str = r#"
model = "doubling"
p = 0.0
sigma = 0.8408964152537145
n_max = 30
particles = 3000
sample = 2000
corr_n_max = 12
corr_sample = 20000
clt_n = 200
clt_sample = 2000
markov_samples = 8
pair_sample = 200
fit_lo = 5
fit_hi = 30
theta = 0.5
"#;

fn run(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(BIN)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap()
}

#[test]
fn doubling_pipeline_completes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&run(p, DOUBLING, &["--seed", "11", "build-tower"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "verify-tower"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "diagnose"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "tail-fit", "--manifest", p.join("out/manifest.json").to_str().unwrap()]));
    ok(&run(p, DOUBLING, &["--seed", "11", "correlations"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "clt"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "orbit-stats"]));
    ok(&run(p, DOUBLING, &["--seed", "11", "hyperbolic-times"]));

    let v: serde_json::Value = serde_json::from_str(&read(p, "verify_summary.json")).unwrap();
    assert_eq!(v["master_seed"], 11);
    assert_eq!(v["markov"]["pass_fraction"], 1.0);
    assert_eq!(v["distortion"]["b_tilde"], 0.0);
    assert!(v["problems"].as_array().unwrap().is_empty());

    for (name, head) in [
        ("correlations.csv", "n,c_n,stderr"),
        ("tails.csv", "n,value,stderr"),
        ("diagnostics.csv", "n,leb_A,leb_B,leb_Delta,h_n,in_E_n,in_F"),
        ("gamma_fraction.csv", "n,fraction,stderr,censored_fraction"),
        ("hyperbolic_times.csv", "point,n_hyp"),
        ("tower_steps.csv", "n,leb_delta_n,leb_R_eq_n,elements_cumulative"),
        ("verify_elements.csv", "lo,hi,R,min_slope,max_slope,distortion_lip"),
    ] {
        let text = read(p, name);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# master_seed=11"), "{name}");
        assert_eq!(lines.next(), Some(head), "{name}");
    }
    // No orbit of the doubling map stays in Gamma_n.
    let g = read(p, "gamma_fraction.csv");
    assert!(g.lines().skip(2).all(|l| l.split(',').nth(1) == Some("0")));
}

#[test]
fn outputs_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&run(d, DOUBLING, &["--threads", if d == a.path() { "1" } else { "4" }, "correlations"]));
        ok(&run(d, DOUBLING, &["orbit-stats"]));
    }
    for f in ["correlations.csv", "gamma_fraction.csv", "hyperbolic_density.csv", "expansion_hist.csv"] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
}

#[test]
fn corrupted_manifest_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(&run(p, DOUBLING, &["build-tower"]));
    let path = p.join("out/manifest.json");
    let mut man: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let m = &mut man["elements"][3]["offsets"]["m"];
    m[1] = serde_json::json!(m[1].as_f64().unwrap() * 1.01);
    std::fs::write(&path, serde_json::to_string(&man).unwrap()).unwrap();
    let o = run(p, DOUBLING, &["verify-tower"]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("verify_summary.json"), "{err}");
    let v: serde_json::Value = serde_json::from_str(&read(p, "verify_summary.json")).unwrap();
    let failures = v["markov"]["failures"].as_array().unwrap();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0]["id"], 3);

    std::fs::write(&path, "{\"model\":").unwrap();
    assert_eq!(run(p, DOUBLING, &["verify-tower"]).status.code(), Some(2));
}

#[test]
fn config_errors_name_the_constraint() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), "model = \"lsv\"\nalpha = 0.5\neps_collar = 0.001\n", &["build-tower"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("collar_epsilon_bound"));
    let o = run(d.path(), "delta_0 = 0.01\n", &["build-tower"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(d.path(), DOUBLING, &["no-such-command"]);
    assert_eq!(o.status.code(), Some(2));
}
