use std::io::{BufRead, BufReader};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use millforge_core::env::LOG_HEADER;
use millforge_core::policy::PolicyFile;
use millforge_core::protocol::{read_frame, write_frame, Request, Response};
use serde_json::Value;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn millforge(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_millforge"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn millforge")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn config(name: &str) -> String {
    repo().join("configs").join(name).display().to_string()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn csv_rows(p: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(p).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn rollout_outputs_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let cfg = config("default.json");
    ok(&millforge(&a, &["--config", &cfg, "--seed", "5", "rollout"]));
    ok(&millforge(&b, &["--config", &cfg, "--seed", "5", "rollout"]));
    for f in ["trajectory.csv", "audit.csv", "report.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }

    let (header, rows) = csv_rows(&a.join("trajectory.csv"));
    assert_eq!(header, LOG_HEADER);
    assert!(!rows.is_empty());
    let (header, _) = csv_rows(&a.join("audit.csv"));
    assert_eq!(header, ["step", "w_before_j", "w_after_j", "port_work_j", "tank_j", "tank_floor_j", "tank_max_j"]);

    let report = json(&a.join("report.json"));
    for key in ["command", "seed", "policy", "et_enabled", "damping_ratio", "termination", "table", "episode"] {
        assert!(report.get(key).is_some(), "report.json lacks {key}");
    }
    assert_eq!(report["seed"], 5);
    let t = &report["table"];
    let sum: f64 = ["time", "deviation", "mrv", "force"].iter().map(|k| t[k].as_f64().unwrap()).sum();
    assert!((sum - t["total"].as_f64().unwrap()).abs() < 1e-12);

    let c = dir.path().join("c");
    ok(&millforge(&c, &["--config", &cfg, "--seed", "6", "rollout"]));
    assert_ne!(std::fs::read(a.join("trajectory.csv")).unwrap(), std::fs::read(c.join("trajectory.csv")).unwrap());
}

#[test]
fn stress_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("stress.json");
    let plain = millforge(&dir.path().join("plain"), &["--config", &cfg, "rollout", "--policy", "stress", "--no-et"]);
    assert_eq!(plain.status.code(), Some(3), "{}", String::from_utf8_lossy(&plain.stderr));
    let report = json(&dir.path().join("plain/report.json"));
    assert_eq!(report["termination"], "safety");

    let tank = millforge(&dir.path().join("tank"), &["--config", &cfg, "rollout", "--policy", "stress", "--et"]);
    ok(&tank);
    assert_eq!(json(&dir.path().join("tank/report.json"))["episode"]["audit"]["passed"], true);
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = millforge(dir.path(), &["--config", "/nonexistent/scenario.json", "rollout"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"env": {"stiffness": 3}}"#).unwrap();
    let o = millforge(dir.path(), &["--config", bad.to_str().unwrap(), "rollout"]);
    assert_eq!(o.status.code(), Some(2));

    let o = millforge(dir.path(), &["compare", "--strategies", "baseline,magic"]);
    assert_eq!(o.status.code(), Some(2));
    let o = millforge(dir.path(), &["compare", "--strategies", "policy"]);
    assert_eq!(o.status.code(), Some(2));
    let o = millforge(dir.path(), &["gen-workpiece", "--family", "gothic"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_load() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["default.json", "stress.json", "table2.json"] {
        let o = millforge(&dir.path().join(name), &["--config", &config(name), "gen-workpiece"]);
        ok(&o);
    }
}

fn parse(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn compare_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let policy = dir.path().join("baseline_policy.json");
    std::fs::write(&policy, r#"{"type": "baseline", "feed_mm_s": 30.0}"#).unwrap();
    let out = dir.path().join("cmp");
    ok(&millforge(
        &out,
        &["compare", "--strategies", "baseline,policy,policy+doc-offset", "--policy", policy.to_str().unwrap(), "--n-trials", "4"],
    ));

    let (th, trials) = csv_rows(&out.join("compare_trials.csv"));
    assert_eq!(th, ["strategy", "trial", "seed", "termination", "time", "deviation", "mrv", "force", "total"]);
    assert_eq!(trials.len(), 12);
    let (sh, summary) = csv_rows(&out.join("compare_summary.csv"));
    assert_eq!(sh.len(), 3 + 2 * 5);
    assert_eq!(summary.len(), 3);

    for row in &summary {
        let mine: Vec<&Vec<String>> = trials.iter().filter(|t| t[0] == row[0]).collect();
        assert_eq!(mine.len(), 4);
        let seeds: Vec<u64> = mine.iter().map(|t| t[2].parse().unwrap()).collect();
        assert_eq!(seeds, [10000, 10001, 10002, 10003]);
        for k in 0..5 {
            let xs: Vec<f64> = mine.iter().map(|t| parse(&t[4 + k])).collect();
            let mean = xs.iter().sum::<f64>() / 4.0;
            let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
            assert!((parse(&row[3 + 2 * k]) - mean).abs() <= 1e-12 * (1.0 + mean.abs()), "{} col {k}", row[0]);
            assert!((parse(&row[4 + 2 * k]) - sd / 2.0).abs() <= 1e-12 * (1.0 + sd), "{} col {k}", row[0]);
        }
        // signed columns add up to the total
        for t in &mine {
            let s: f64 = (4..8).map(|i| parse(&t[i])).sum();
            assert!((s - parse(&t[8])).abs() < 1e-12);
        }
    }

    // the deeper cut removes more material on the shared seeds
    let mrv = |name: &str| summary.iter().find(|r| r[0] == name).map(|r| parse(&r[7])).unwrap();
    assert!(mrv("policy+doc-offset") > mrv("policy"));

    let doc = json(&out.join("compare.json"));
    assert_eq!(doc["n_trials"], 4);
    assert_eq!(doc["strategies"].as_array().unwrap().len(), 3);
}

#[test]
fn compare_single_trial_has_no_stderr() {
    let dir = tempfile::tempdir().unwrap();
    ok(&millforge(dir.path(), &["compare", "--strategies", "baseline", "--n-trials", "1"]));
    let (_, summary) = csv_rows(&dir.path().join("compare_summary.csv"));
    for k in 0..5 {
        assert!(!summary[0][3 + 2 * k].is_empty());
        assert!(summary[0][4 + 2 * k].is_empty());
    }
    assert!(json(&dir.path().join("compare.json"))["strategies"][0]["stderr"].is_null());
}

#[test]
fn ego_budget_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(&millforge(dir.path(), &["ego", "--budget", "115"]));
    let (h, rows) = csv_rows(&dir.path().join("ego_history.csv"));
    assert_eq!(h, ["index", "phase", "feed_mm_s", "rdoc_mm", "stiffness_per_s2", "reward"]);
    assert_eq!(rows.len(), 115);
    let (_, pd) = csv_rows(&dir.path().join("partial_dependence.csv"));
    assert!(!pd.is_empty());
    let res = json(&dir.path().join("ego_result.json"));
    let best = rows.iter().map(|r| parse(&r[5])).fold(f64::NEG_INFINITY, f64::max);
    assert!(res["history"].as_array().unwrap().len() == 115);
    assert!(best.is_finite());

    // the optimum feeds the ego strategy of compare
    let cmp = dir.path().join("cmp");
    let ego = dir.path().join("ego_result.json");
    ok(&millforge(&cmp, &["compare", "--strategies", "ego", "--ego-result", ego.to_str().unwrap(), "--n-trials", "2"]));
}

#[test]
fn fit_recovers_fixture_constants() {
    let dir = tempfile::tempdir().unwrap();
    let log = repo().join("fixtures/fit/synthetic.csv");
    ok(&millforge(dir.path(), &["fit", "--log", log.to_str().unwrap()]));
    let r = json(&dir.path().join("fit_report.json"));
    let truth = json(&repo().join("fixtures/fit/synthetic_spec.json"));
    for key in ["kc_n_per_mm2", "ke_n_per_mm"] {
        for i in 0..3 {
            let got = r["material"][key][i].as_f64().unwrap();
            let want = truth["material"][key][i].as_f64().unwrap();
            assert!(((got - want) / want).abs() < 1e-3, "{key}[{i}]: {got} vs {want}");
        }
    }
}

#[test]
fn fit_without_logs_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(millforge(dir.path(), &["fit"]).status.code(), Some(2));
}

#[test]
fn train_zero_generations_keeps_policy() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&millforge(&first, &["train", "--generations", "1", "--population", "8"]));
    let (h, curve) = csv_rows(&first.join("curve.csv"));
    assert_eq!(h, ["generation", "mean", "std", "best"]);
    assert_eq!(curve.len(), 1);

    let second = dir.path().join("second");
    let init = first.join("policy.json");
    ok(&millforge(&second, &["train", "--generations", "0", "--init", init.to_str().unwrap()]));
    let a = PolicyFile::load(&init).unwrap();
    let b = PolicyFile::load(&second.join("policy.json")).unwrap();
    assert_eq!(a, b);

    // the trained policy runs through rollout
    ok(&millforge(&dir.path().join("roll"), &["rollout", "--policy", init.to_str().unwrap()]));
}

#[test]
fn exported_mlp_policy_rolls_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = 17;
    let hidden = 64;
    let layer = |inp: usize, out: usize| serde_json::json!({"weight": vec![vec![0.0; inp]; out], "bias": vec![0.0; out]});
    let policy = serde_json::json!({
        "type": "mlp",
        "obs_mean": vec![0.0; d],
        "obs_std": vec![1.0; d],
        "activation": "tanh",
        "layers": [layer(d, hidden), layer(hidden, hidden), layer(hidden, 5)],
        "low": [100.0, 100.0, 100.0, -1.0, -5.0],
        "high": [2000.0, 2000.0, 2000.0, 1.0, 5.0],
    });
    let p = dir.path().join("mlp.json");
    std::fs::write(&p, serde_json::to_string(&policy).unwrap()).unwrap();
    let out = dir.path().join("roll");
    let o = millforge(&out, &["rollout", "--policy", p.to_str().unwrap()]);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(json(&out.join("report.json"))["policy"], p.to_str().unwrap());

    // wrong observation width
    let mut wrong = policy.clone();
    wrong["obs_mean"] = serde_json::json!(vec![0.0; 15]);
    std::fs::write(&p, serde_json::to_string(&wrong).unwrap()).unwrap();
    assert_eq!(millforge(&out, &["rollout", "--policy", p.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn gen_workpiece_formats() {
    let dir = tempfile::tempdir().unwrap();
    let csv_out = dir.path().join("csv");
    ok(&millforge(&csv_out, &["gen-workpiece", "--family", "sinusoidal", "--amplitude-mm", "1", "--wavelength-mm", "20"]));
    let meta = json(&csv_out.join("heightfield.json"));
    assert_eq!(meta["nx"], 2001);
    assert_eq!(meta["ny"], 9);
    assert_eq!(meta["dx_mm"], 0.1);
    let data = std::fs::read_to_string(csv_out.join(meta["data_file"].as_str().unwrap())).unwrap();
    let n: usize = data.lines().map(|l| l.split(',').filter(|s| !s.trim().is_empty()).count()).sum();
    assert_eq!(n, 2001 * 9);

    let bin_out = dir.path().join("bin");
    ok(&millforge(&bin_out, &["gen-workpiece", "--family", "sinusoidal", "--amplitude-mm", "1", "--wavelength-mm", "20", "--format", "binary"]));
    let meta = json(&bin_out.join("heightfield.json"));
    let bytes = std::fs::metadata(bin_out.join(meta["data_file"].as_str().unwrap())).unwrap().len();
    assert_eq!(bytes, 2001 * 9 * 8);
}

#[test]
fn ppo_config_values() {
    let c = json(&repo().join("configs/ppo_table1.json"));
    assert_eq!(c["learning_rate"], 3e-4);
    assert_eq!(c["batch_size"], 1024);
    assert_eq!(c["discount"], 0.99);
    assert_eq!(c["actor_hidden_layers"], serde_json::json!([64, 64]));
    assert_eq!(c["critic_hidden_layers"], serde_json::json!([64, 64]));
    assert_eq!(c["activation"], "tanh");
    assert_eq!(c["normalize_observations"], true);
    assert_eq!(c["export"]["policy_type"], "mlp");
    assert_eq!(c["env"]["endpoint"], "127.0.0.1:7463");
    // learning rate halves a quarter of the way through training
    let total = c["total_timesteps"].as_f64().unwrap();
    let half_life = c["lr_half_life_fraction"].as_f64().unwrap() * total;
    let lr = |t: f64| 3e-4 * 0.5f64.powf(t / half_life);
    assert!((lr(0.25 * total) - 1.5e-4).abs() < 1e-15);
    assert!((lr(total) - 3e-4 / 16.0).abs() < 1e-15);
}

#[test]
fn serve_env_over_tcp() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_millforge"))
        .arg("--out")
        .arg(dir.path())
        .args(["serve-env", "--addr", "127.0.0.1:0", "--max-connections", "1"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening ").expect("listening line").to_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    let call = |s: &mut TcpStream, r: &Request| -> Response {
        write_frame(s, r).unwrap();
        read_frame(s).unwrap().unwrap()
    };
    let Response::Spec(spec) = call(&mut s, &Request::Spec) else { panic!("no spec") };
    assert_eq!((spec.obs_dim, spec.action_dim), (17, 5));
    let Response::Reset { obs } = call(&mut s, &Request::Reset { seed: 2 }) else { panic!("no reset") };
    assert_eq!(obs.len(), 17);
    let Response::Step { info, .. } = call(&mut s, &Request::Step { action: vec![5000.0, 800.0, 800.0, 0.0, 0.0] }) else {
        panic!("no step")
    };
    assert!(info.action_clipped);
    assert_eq!(call(&mut s, &Request::Close), Response::Closed);
    assert!(matches!(call(&mut s, &Request::Step { action: vec![800.0, 800.0, 800.0, 0.0, 0.0] }), Response::Error { .. }));
    drop(s);
    assert!(child.wait().unwrap().success());
}

#[test]
fn log_level_env_var() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_millforge"))
        .env("MILLFORGE_LOG_LEVEL", "info")
        .arg("--out")
        .arg(dir.path())
        .arg("rollout")
        .output()
        .unwrap();
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("rollout seed"));
    let quiet = millforge(dir.path(), &["rollout"]);
    assert!(quiet.stderr.is_empty());
}
