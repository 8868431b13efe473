use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::Path;

use millforge_core::cem::{train_cem, warm_start_policy};
use millforge_core::ego::{optimize, partial_dependence, EgoResult, MillingObjective, SamplePhase};
use millforge_core::env::{EnvConfig, MillingEnv, Termination, LOG_HEADER};
use millforge_core::fit::{fit_logs, synthesize, FitOptions, ForceLog, SyntheticSpec};
use millforge_core::policy::{run_episode, PolicyFile};
use millforge_core::protocol::serve_listener;
use millforge_core::workpiece::{DataFormat, Heightfield, SurfaceFamily, SurfaceSpec};
use serde::Serialize;
use serde_json::json;

use crate::table::{summarize, TableRow, COLUMNS};
use crate::{Context, ControlArgs, Failure, Format};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn config_err(what: &str) -> impl Fn(millforge_core::Error) -> Failure + '_ {
    move |e| Failure::Config(format!("{what}: {e}"))
}

fn termination_name(t: Option<Termination>) -> &'static str {
    match t {
        Some(Termination::PathEnd) => "path_end",
        Some(Termination::TimeLimit) => "time_limit",
        Some(Termination::Safety) => "safety",
        None => "none",
    }
}

pub fn rollout(ctx: &Context, policy: &str, control: &ControlArgs) -> Result<(), Failure> {
    let mut env_cfg = ctx.cfg.env.clone();
    let file = match policy {
        "baseline" => PolicyFile::Baseline(ctx.cfg.baseline.clone()),
        "stress" => {
            env_cfg = ctx.cfg.stress.apply(&env_cfg, env_cfg.controller.et_enabled);
            PolicyFile::Stress(ctx.cfg.stress.clone())
        }
        path => PolicyFile::load(Path::new(path)).map_err(config_err(path))?,
    };
    control.apply(&mut env_cfg);
    env_cfg.record_trajectory = true;
    let mut env = MillingEnv::new(env_cfg.clone())?;
    let mut pol = file.instantiate(&env_cfg).map_err(config_err("policy"))?;
    let report = run_episode(&mut env, pol.as_mut(), ctx.seed)?;

    let mut w = csv::Writer::from_path(ctx.out.join("trajectory.csv"))?;
    w.write_record(LOG_HEADER)?;
    for r in env.trajectory() {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(ctx.out.join("audit.csv"))?;
    w.write_record(["step", "w_before_j", "w_after_j", "port_work_j", "tank_j", "tank_floor_j", "tank_max_j"])?;
    for (k, a) in env.audit_records().iter().enumerate() {
        let row = [a.w_before, a.w_after, a.port_work, a.tank_j, a.tank_floor_j, a.tank_max_j];
        let mut rec = vec![k.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let table = TableRow::from(&report.reward);
    write_json(
        &ctx.out.join("report.json"),
        &json!({
            "command": "rollout",
            "seed": ctx.seed,
            "policy": policy,
            "et_enabled": env_cfg.controller.et_enabled,
            "damping_ratio": env_cfg.controller.damping_ratio,
            "termination": termination_name(report.termination),
            "table": table,
            "episode": report,
        }),
    )?;
    log::info!(
        "rollout seed {}: {} after {} control steps, total {:.4}, audit {}",
        ctx.seed,
        termination_name(report.termination),
        report.control_steps,
        report.reward.total,
        if report.audit.passed { "passed" } else { "violated" }
    );
    if report.termination == Some(Termination::Safety) {
        return Err(Failure::Safety(format!(
            "episode stopped on safety bounds after {} control steps (audit {})",
            report.control_steps,
            if report.audit.passed { "passed" } else { "violated" }
        )));
    }
    Ok(())
}

const STRATEGIES: [&str; 4] = ["baseline", "policy", "policy+doc-offset", "ego"];

pub fn compare(
    ctx: &Context,
    strategies: &[String],
    policy: Option<&Path>,
    ego_result: Option<&Path>,
    n_trials: Option<usize>,
    control: &ControlArgs,
) -> Result<(), Failure> {
    if let Some(s) = strategies.iter().find(|s| !STRATEGIES.contains(&s.as_str())) {
        return Err(Failure::Config(format!("unknown strategy {s:?}; expected one of {STRATEGIES:?}")));
    }
    let cc = &ctx.cfg.compare;
    let n = n_trials.unwrap_or(cc.n_trials);
    if n == 0 {
        return Err(Failure::Config("n_trials must be positive".into()));
    }
    let mut base_env = ctx.cfg.env.clone();
    control.apply(&mut base_env);

    let policy_file = match policy {
        Some(p) => Some(PolicyFile::load(p).map_err(config_err(&p.display().to_string()))?),
        None => None,
    };
    let ego = match ego_result {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str::<EgoResult>(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };

    let mut setups: Vec<(String, EnvConfig, PolicyFile)> = Vec::new();
    for s in strategies {
        let need_policy = || policy_file.clone().ok_or_else(|| Failure::Config(format!("strategy {s} needs --policy")));
        let setup = match s.as_str() {
            "baseline" => (base_env.clone(), PolicyFile::Baseline(ctx.cfg.baseline.clone())),
            "policy" => (base_env.clone(), need_policy()?),
            "policy+doc-offset" => {
                let mut c = base_env.clone();
                c.doc_offset_mm += cc.doc_offset_mm;
                (c, need_policy()?)
            }
            _ => {
                let r = ego.as_ref().ok_or_else(|| Failure::Config("strategy ego needs --ego-result".into()))?;
                let obj = MillingObjective { env: base_env.clone(), seed: 0, vary_seed: false };
                (obj.env_for(&r.optimum), PolicyFile::Baseline(r.optimum.baseline()))
            }
        };
        setup.1.instantiate(&setup.0).map_err(config_err(s))?;
        setups.push((s.clone(), setup.0, setup.1));
    }

    let mut trials = csv::Writer::from_path(ctx.out.join("compare_trials.csv"))?;
    let mut header = vec!["strategy", "trial", "seed", "termination"];
    header.extend(COLUMNS);
    trials.write_record(&header)?;
    let mut summary_json = Vec::new();
    let mut trials_json = Vec::new();
    let mut summary = csv::Writer::from_path(ctx.out.join("compare_summary.csv"))?;
    let mut header = vec!["strategy".to_string(), "n".to_string(), "safety_stops".to_string()];
    for c in COLUMNS {
        header.push(format!("{c}_mean"));
        header.push(format!("{c}_stderr"));
    }
    summary.write_record(&header)?;

    for (name, env_cfg, file) in &setups {
        let mut env = MillingEnv::new(env_cfg.clone())?;
        let mut pol = file.instantiate(env_cfg)?;
        let mut rows = Vec::with_capacity(n);
        let mut stops = 0;
        for i in 0..n {
            let seed = cc.seed_base + i as u64;
            let report = run_episode(&mut env, pol.as_mut(), seed)?;
            let row = TableRow::from(&report.reward);
            let term = termination_name(report.termination);
            if report.termination == Some(Termination::Safety) {
                stops += 1;
            }
            let mut rec = vec![name.clone(), i.to_string(), seed.to_string(), term.to_string()];
            rec.extend(row.values().iter().map(|v| format!("{v:?}")));
            trials.write_record(&rec)?;
            trials_json.push(json!({"strategy": name, "trial": i, "seed": seed, "termination": term, "values": row}));
            rows.push(row);
        }
        let (mean, se) = summarize(&rows);
        let mut rec = vec![name.clone(), n.to_string(), stops.to_string()];
        for k in 0..COLUMNS.len() {
            rec.push(format!("{:?}", mean.values()[k]));
            rec.push(se.map(|s| format!("{:?}", s.values()[k])).unwrap_or_default());
        }
        summary.write_record(&rec)?;
        summary_json.push(json!({"strategy": name, "n": n, "safety_stops": stops, "mean": mean, "stderr": se}));
        log::info!("{name}: total {:.4} over {n} trials", mean.total);
        if stops > 0 {
            log::warn!("{name}: {stops} of {n} trials stopped on safety bounds");
        }
    }
    trials.flush()?;
    summary.flush()?;
    write_json(
        &ctx.out.join("compare.json"),
        &json!({
            "command": "compare",
            "n_trials": n,
            "seed_base": cc.seed_base,
            "columns": COLUMNS,
            "strategies": summary_json,
            "trials": trials_json,
        }),
    )
}

pub fn train(ctx: &Context, generations: Option<usize>, population: Option<usize>, init: Option<&Path>) -> Result<(), Failure> {
    let mut cem = ctx.cfg.train.clone();
    if let Some(g) = generations {
        cem.generations = g;
    }
    if let Some(p) = population {
        cem.population = p;
    }
    cem.validate()?;
    let env_cfg = ctx.cfg.env.clone();
    let init = match init {
        Some(p) => match PolicyFile::load(p).map_err(config_err(&p.display().to_string()))? {
            PolicyFile::Linear(l) => {
                PolicyFile::Linear(l.clone()).instantiate(&env_cfg).map_err(config_err("initial policy"))?;
                l
            }
            _ => return Err(Failure::Config("the initial policy must be a linear policy".into())),
        },
        None => warm_start_policy(&env_cfg, &ctx.cfg.baseline, &cem, ctx.seed)?,
    };
    let c = env_cfg.clone();
    let res = train_cem(move || MillingEnv::new(c.clone()), init, &cem, ctx.seed)?;

    PolicyFile::Linear(res.policy.clone()).save(&ctx.out.join("policy.json"))?;
    let mut w = csv::Writer::from_path(ctx.out.join("curve.csv"))?;
    w.write_record(["generation", "mean", "std", "best"])?;
    for g in &res.curve {
        w.write_record([g.generation.to_string(), format!("{:?}", g.mean), format!("{:?}", g.std), format!("{:?}", g.best)])?;
    }
    w.flush()?;
    write_json(
        &ctx.out.join("train.json"),
        &json!({
            "command": "train",
            "seed": ctx.seed,
            "cem": cem,
            "final_mean": res.curve.last().map(|g| g.mean),
            "final_best": res.curve.last().map(|g| g.best),
        }),
    )
}

pub fn ego(ctx: &Context, budget: Option<usize>) -> Result<(), Failure> {
    let mut cfg = ctx.cfg.ego.clone();
    if let Some(b) = budget {
        cfg.budget = b;
    }
    cfg.validate()?;
    let mut obj = MillingObjective { env: ctx.cfg.env.clone(), seed: ctx.seed, vary_seed: cfg.vary_episode_seed };
    let res = optimize(&mut obj, &cfg, ctx.seed)?;

    let mut w = csv::Writer::from_path(ctx.out.join("ego_history.csv"))?;
    w.write_record(["index", "phase", "feed_mm_s", "rdoc_mm", "stiffness_per_s2", "reward"])?;
    for s in &res.history {
        let phase = match s.phase {
            SamplePhase::Design => "design",
            SamplePhase::Acquisition => "acquisition",
        };
        w.write_record([
            s.index.to_string(),
            phase.to_string(),
            format!("{:?}", s.params.feed_mm_s),
            format!("{:?}", s.params.rdoc_mm),
            format!("{:?}", s.params.stiffness),
            format!("{:?}", s.reward),
        ])?;
    }
    w.flush()?;

    let gp = res.surrogate(&cfg)?;
    let names = ["feed_mm_s", "rdoc_mm", "stiffness_per_s2"];
    let mut w = csv::Writer::from_path(ctx.out.join("partial_dependence.csv"))?;
    w.write_record(["parameter", "value", "mean_reward"])?;
    for (k, &i) in cfg.active_dims().iter().enumerate() {
        for (u, m) in partial_dependence(&gp, k, 64, 8) {
            let v = cfg.lower[i] + u * (cfg.upper[i] - cfg.lower[i]);
            w.write_record([names[i].to_string(), format!("{v:?}"), format!("{m:?}")])?;
        }
    }
    w.flush()?;
    write_json(&ctx.out.join("ego_result.json"), &res)?;
    log::info!(
        "ego optimum feed {:.3} mm/s, rdoc {:.3} mm, stiffness {:.1}: predicted {:.4}",
        res.optimum.feed_mm_s,
        res.optimum.rdoc_mm,
        res.optimum.stiffness,
        res.predicted_reward
    );
    Ok(())
}

pub fn fit(ctx: &Context, logs: &[std::path::PathBuf], synth: Option<&Path>, axis_weights: Option<Vec<f64>>) -> Result<(), Failure> {
    let mut all = Vec::new();
    for p in logs {
        all.push(ForceLog::load(p).map_err(config_err(&p.display().to_string()))?);
    }
    if let Some(p) = synth {
        let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        let spec: SyntheticSpec = serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        let log = synthesize(&spec)?;
        log.save(&ctx.out.join("synthetic.csv"))?;
        all.push(log);
    }
    if all.is_empty() {
        return Err(Failure::Config("fit needs at least one --log or --synthesize".into()));
    }
    let mut opts = FitOptions::default();
    if let Some(w) = axis_weights {
        opts.axis_weights = [w[0], w[1], w[2]];
    }
    let res = fit_logs(&all, &opts)?;
    write_json(&ctx.out.join("fit_report.json"), &res)?;
    log::info!("fit: Kc {:?} Ke {:?}, rmse {:.4} N", res.material.kc_n_per_mm2, res.material.ke_n_per_mm, res.rmse_overall_n);
    Ok(())
}

pub fn gen_workpiece(
    ctx: &Context,
    family: Option<&str>,
    amplitude_mm: Option<f64>,
    wavelength_mm: Option<f64>,
    format: Format,
) -> Result<(), Failure> {
    let mut spec = ctx.cfg.env.surface.clone().unwrap_or_else(|| SurfaceSpec { seed: ctx.seed, ..SurfaceSpec::default() });
    if let Some(f) = family {
        spec.family = serde_json::from_value::<SurfaceFamily>(json!(f))
            .map_err(|_| Failure::Config(format!("unknown surface family {f:?}")))?;
    }
    if let Some(a) = amplitude_mm {
        spec.amplitude_mm = a;
    }
    if let Some(w) = wavelength_mm {
        spec.wavelength_mm = w;
    }
    spec.validate()?;
    let hf = Heightfield::generate(&spec, ctx.cfg.env.grid)?;
    let format = match format {
        Format::Csv => DataFormat::Csv,
        Format::Binary => DataFormat::Binary,
    };
    hf.save(&ctx.out.join("heightfield.json"), format)?;
    write_json(&ctx.out.join("surface.json"), &spec)?;
    Ok(())
}

pub fn serve_env(ctx: &Context, addr: &str, max_connections: Option<usize>, control: &ControlArgs) -> Result<(), Failure> {
    let mut env_cfg = ctx.cfg.env.clone();
    control.apply(&mut env_cfg);
    env_cfg.validate()?;
    let listener = TcpListener::bind(addr)?;
    // the bound address goes to stdout so callers can use port 0
    println!("listening {}", listener.local_addr()?);
    std::io::stdout().flush()?;
    serve_listener(listener, env_cfg, max_connections)?;
    Ok(())
}
