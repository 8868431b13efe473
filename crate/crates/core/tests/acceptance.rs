//! Acceptance suite. Every test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) and then asserts the same condition.

use std::f64::consts::TAU;
use std::io::Write;
use std::time::Instant;

use millforge_core::cem::{train_cem, warm_start_policy, CemConfig};
use millforge_core::control::{ControllerConfig, LawChoice, OscController};
use millforge_core::cutting::{
    chip_thickness, total_force, CuttingOptions, Engagement, FeedState, MaterialParams,
};
use millforge_core::ego::{optimize, EgoConfig, ProcessParams};
use millforge_core::env::{EnvConfig, MillingEnv, Termination};
use millforge_core::fit::{fit_logs, synthesize, FitOptions, SyntheticSpec};
use millforge_core::policy::{
    run_episode, sign_test, BaselineConfig, BaselinePolicy, Policy, RandomStiffnessPolicy, StressConfig,
    StressPolicy,
};
use millforge_core::tool::{element_frame, ToolGeometry};
use millforge_core::workpiece::{slitting_orientation, GridSpec, Heightfield, SurfaceFamily, SurfaceSpec, ToolPose};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, started: Instant, detail: String) {
    let line = format!(
        "{} {name} ({:.1} s): {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{name}: {detail}");
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Rotation3::new(axis.normalize() * rng.gen_range(0.0..TAU)).into_inner()
}

#[test]
fn chip_thickness_oracle() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100_000 {
        let f = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let theta = rng.gen_range(-10.0..10.0);
        // matrix form: radial component of the model-frame feed seen from the flute
        let r = element_frame(theta).rotation;
        let matrix = -(r.transpose() * f).y;
        let closed = f.x * theta.sin() + f.y * theta.cos();
        worst = worst.max((matrix - closed).abs()).max((chip_thickness(&f, theta).raw - closed).abs());
    }
    let elapsed = t0.elapsed().as_secs_f64();
    verdict(
        "chip thickness oracle",
        worst <= 1e-12 && elapsed < 1.0,
        t0,
        format!("1e5 draws, max |matrix - closed| = {worst:.2e}"),
    );
}

/// Scalar re-derivation of the summed element forces.
fn scalar_force(tool: &ToolGeometry, m: &MaterialParams, feed: &FeedState, g: &Engagement) -> [f64; 3] {
    let nf = tool.n_flutes() as f64;
    let w = tool.spindle_speed();
    let rv = feed.r_w_to_m * feed.v_w;
    let (fx, fy) = (rv.x / (nf * w), rv.y / (nf * w));
    let mut out = [0.0; 3];
    for f in 0..tool.n_flutes() {
        for d in 0..tool.n_discs() {
            if !g.get(f, d) {
                continue;
            }
            let b = tool.edge_length(f, d);
            let raw = feed.theta + f as f64 * tool.pitch() - (d as f64 + 0.5) * tool.helix().tan() * b / tool.radius();
            let th = raw.rem_euclid(TAU);
            let h = fx * th.sin() + fy * th.cos();
            if h <= 0.0 {
                continue;
            }
            let ft = b * m.ke[0] + b * h * m.kc[0];
            let fr = b * m.ke[1] + b * h * m.kc[1];
            let fa = b * m.ke[2] + b * h * m.kc[2];
            out[0] += -th.cos() * ft - th.sin() * fr;
            out[1] += th.sin() * ft - th.cos() * fr;
            out[2] += fa;
        }
    }
    out
}

#[test]
fn force_model_brute_force() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let nf = rng.gen_range(1..=60);
        let nd = rng.gen_range(1..=5);
        let edges: Vec<f64> = (0..nf * nd).map(|_| rng.gen_range(0.05..3.0)).collect();
        let tool = ToolGeometry::new(
            rng.gen_range(2.0..60.0),
            TAU / nf as f64,
            rng.gen_range(-0.8..0.8),
            nf,
            nd,
            edges,
            rng.gen_range(100.0..20000.0),
            false,
        )
        .unwrap();
        let m = MaterialParams {
            kc: Vector3::new(rng.gen_range(0.0..2000.0), rng.gen_range(0.0..2000.0), rng.gen_range(-50.0..50.0)),
            ke: Vector3::new(rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(-5.0..5.0)),
        };
        let mut g = Engagement::none(nf, nd);
        for f in 0..nf {
            for d in 0..nd {
                g.set(f, d, rng.gen_bool(0.5));
            }
        }
        let feed = FeedState {
            v_w: Vector3::new(rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0), rng.gen_range(-300.0..300.0)),
            r_w_to_m: random_rotation(&mut rng),
            theta: rng.gen_range(0.0..TAU),
        };
        let got = total_force(&tool, &m, &feed, &g, &CuttingOptions::default()).unwrap().f_m;
        let want = scalar_force(&tool, &m, &feed, &g);
        for i in 0..3 {
            worst = worst.max((got[i] - want[i]).abs());
        }
    }
    verdict(
        "force model brute-force equivalence",
        worst <= 1e-9 && t0.elapsed().as_secs_f64() < 10.0,
        t0,
        format!("1e3 configurations, max |F - oracle| = {worst:.2e} N"),
    );
}

#[test]
fn zero_cases() {
    let t0 = Instant::now();
    let tool = ToolGeometry::uniform(25.0, 50, 1, 0.5, 0.0, 1000.0).unwrap();
    let m = MaterialParams::reference();
    let opts = CuttingOptions::default();
    let moving = FeedState { v_w: Vector3::new(25.0, 3.0, -1.0), r_w_to_m: Matrix3::identity(), theta: 0.4 };
    let none = total_force(&tool, &m, &moving, &Engagement::none(50, 1), &opts).unwrap();
    let still = FeedState { v_w: Vector3::zeros(), ..moving };
    let idle = total_force(&tool, &m, &still, &Engagement::all(50, 1), &opts).unwrap();
    let pass = none.f_m == Vector3::zeros()
        && none.mrv_rate == 0.0
        && idle.f_m == Vector3::zeros()
        && idle.mrv_rate == 0.0;
    verdict(
        "zero cases",
        pass,
        t0,
        format!("no engagement F={:?} mrv={}; zero feed F={:?} mrv={}", none.f_m.as_slice(), none.mrv_rate, idle.f_m.as_slice(), idle.mrv_rate),
    );
}

fn max_rel(got: &[f64; 6], want: &[f64; 6]) -> f64 {
    got.iter().zip(want).map(|(g, w)| ((g - w) / w).abs()).fold(0.0, f64::max)
}

#[test]
fn mechanistic_fit_round_trip() {
    let t0 = Instant::now();
    let truth = MaterialParams::reference();
    let want = [truth.kc[0], truth.kc[1], truth.kc[2], truth.ke[0], truth.ke[1], truth.ke[2]];
    let flat = |r: &millforge_core::fit::FitResult| {
        let m = &r.material;
        [m.kc_n_per_mm2[0], m.kc_n_per_mm2[1], m.kc_n_per_mm2[2], m.ke_n_per_mm[0], m.ke_n_per_mm[1], m.ke_n_per_mm[2]]
    };
    let clean = synthesize(&SyntheticSpec { samples_per_feed: 2000, ..Default::default() }).unwrap();
    let r0 = fit_logs(&[clean], &FitOptions::default()).unwrap();
    let e0 = max_rel(&flat(&r0), &want);

    let sigma = 0.5;
    // the axial constants are tiny, so the bias window needs as many
    // records as a feed group
    let noisy = synthesize(&SyntheticSpec {
        samples_per_feed: 100_000,
        baseline_records: 100_000,
        noise_sd_n: sigma,
        seed: 7,
        ..Default::default()
    })
    .unwrap();
    let r1 = fit_logs(&[noisy], &FitOptions::default()).unwrap();
    let e1 = max_rel(&flat(&r1), &want);
    let rmse_gap = (r1.rmse_overall_n - sigma).abs() / sigma;

    verdict(
        "mechanistic fit round-trip",
        e0 <= 1e-3 && e1 <= 0.05 && rmse_gap <= 0.2 && r1.rmse_instantaneous && t0.elapsed().as_secs_f64() < 30.0,
        t0,
        format!(
            "noiseless max rel err {e0:.2e}; noisy (sigma {sigma} N) max rel err {e1:.2e} {:?}, rmse {:.4} N ({:.1}% from sigma)",
            flat(&r1).iter().zip(&want).map(|(g, w)| format!("{:.2}%", 100.0 * (g - w) / w)).collect::<Vec<_>>(),
            r1.rmse_overall_n,
            100.0 * rmse_gap
        ),
    );
}

#[test]
fn passivity_suite() {
    let t0 = Instant::now();
    let mut worst_step = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    let mut runs = 0;
    for (z, &zeta) in [1.0, 0.5, 0.1].iter().enumerate() {
        let mut cfg = EnvConfig::default();
        cfg.controller.damping_ratio = zeta;
        cfg.controller.et_enabled = true;
        cfg.controller.stiffness_rate_limit_per_s = 2e5;
        let mut env = MillingEnv::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(300 + z as u64);
        for k in 0..100 {
            let hold = rng.gen_range(1..=5);
            let mut p = RandomStiffnessPolicy::new(rng.gen(), hold, BaselineConfig::default(), &cfg);
            let seed = 5_000 + 100 * z as u64 + k;
            let r = run_episode(&mut env, &mut p, seed).unwrap();
            runs += 1;
            worst_step = worst_step.max(r.audit.max_step_excess);
            if !r.audit.passed {
                failures.push((zeta, seed, r.audit.max_violation, r.audit.tank_bounds_ok));
            }
        }
    }
    verdict(
        "passivity suite",
        failures.is_empty() && t0.elapsed().as_secs_f64() < 300.0,
        t0,
        format!("{runs} rollouts over zeta in {{1, 0.5, 0.1}}; worst per-step excess {worst_step:.2e} J; failures {failures:?}"),
    );
}

#[test]
fn stress_test_et_vs_plain() {
    let t0 = Instant::now();
    let stress = StressConfig::default();
    let base = EnvConfig::default();
    let seed = 11;
    let run = |et: bool| {
        let cfg = stress.apply(&base, et);
        let mut env = MillingEnv::new(cfg.clone()).unwrap();
        let mut p = StressPolicy::new(stress.clone(), &cfg);
        run_episode(&mut env, &mut p, seed).unwrap()
    };
    let with = run(true);
    let without = run(false);
    let pass = with.termination == Some(Termination::PathEnd)
        && with.audit.passed
        && with.max_error_mm < base.max_tracking_error_mm
        && without.audit.max_violation > 0.0
        && without.termination == Some(Termination::Safety);
    verdict(
        "stress test (zeta 0.1)",
        pass && t0.elapsed().as_secs_f64() < 120.0,
        t0,
        format!(
            "ET: {:?}, max error {:.2} mm, audit violation {:.2e} J; plain: {:?} after {} steps, audit violation {:.3} J",
            with.termination, with.max_error_mm, with.audit.max_violation, without.termination, without.control_steps, without.audit.max_violation
        ),
    );
}

#[test]
fn closed_loop_correctness() {
    let t0 = Instant::now();
    let dt = 1e-4;
    let k = 800.0;
    let zeta = 0.3;
    let cfg = ControllerConfig { k_c: [k; 3], damping_ratio: zeta, et_enabled: false, ..Default::default() };
    let mut c = OscController::new(cfg).unwrap();
    let e0 = Vector3::new(1.0, -0.5, 0.25);
    let (mut e, mut v) = (e0, Vector3::zeros());
    let wn: f64 = k.sqrt();
    let wd = wn * (1.0 - zeta * zeta).sqrt();
    let mut worst = 0.0f64;
    for n in 1..=20_000 {
        let out = c.step(&e, &v, &Vector3::zeros(), (n - 1) as f64 * dt, dt).unwrap();
        e = out.e;
        v = out.e_dot;
        let t = n as f64 * dt;
        let shape = (-zeta * wn * t).exp() * ((wd * t).cos() + zeta * wn / wd * (wd * t).sin());
        worst = worst.max((e - e0 * shape).norm() / e0.norm());
    }

    // inertia shaping with a time-varying inertia and an external force
    let cfg = ControllerConfig {
        law: LawChoice::InertiaShapingWhenStatic,
        lambda_v_amplitude_kg: [10.0, 5.0, 20.0],
        lambda_v_frequency_hz: 3.0,
        damping_ratio: 0.7,
        ..Default::default()
    };
    let mut c = OscController::new(cfg.clone()).unwrap();
    let lc = Matrix3::from_diagonal(&Vector3::from(cfg.lambda_c_kg));
    let kc = Matrix3::from_diagonal(&Vector3::from(cfg.k_c));
    let (mut e, mut v) = (Vector3::new(0.5, 0.2, -0.3), Vector3::new(3.0, 0.0, -1.0));
    let mut residual = 0.0f64;
    for n in 0..10_000 {
        let t = n as f64 * dt;
        let f_e = Vector3::new(20.0 * (7.0 * t).sin(), -5.0, 12.0 * (3.0 * t).cos());
        let out = c.step(&e, &v, &f_e, t, dt).unwrap();
        let acc = (out.e_dot - v) / dt;
        let vel = (out.e - e) / dt;
        let pos = 0.5 * (out.e + e);
        let g = c.gains_at(t + 0.5 * dt);
        let lhs = (lc * acc + g.lambda() * g.k_d * vel + lc * kc * pos) * 1e-3;
        residual = residual.max((lhs - f_e).norm());
        e = out.e;
        v = out.e_dot;
    }
    verdict(
        "closed-loop correctness",
        worst <= 1e-3 && residual < 1e-6,
        t0,
        format!("free response max rel error {worst:.2e} over 2 s at dt 1e-4; inertia-shaping residual {residual:.2e} N"),
    );
}

#[test]
fn volume_accounting() {
    let t0 = Instant::now();
    let tool = ToolGeometry::uniform(25.0, 50, 1, 0.5, 0.0, 1000.0).unwrap();
    let grid = GridSpec { nx: 2001, ny: 9, dx_mm: 0.1, dy_mm: 0.5, origin_mm: [0.0, 0.0] };
    let mut hf = Heightfield::generate(&SurfaceSpec { family: SurfaceFamily::Flat, ..Default::default() }, grid).unwrap();
    let v0 = hf.volume();
    let (r, depth, len) = (25.0, 5.0, 100.0);
    let z = 20.0 - depth + r;
    let pose = |x: f64| ToolPose { position: Vector3::new(x, 2.25, z), r_m_to_w: slitting_orientation() };
    let removed = hf.remove_material(&tool, &pose(50.0), &pose(50.0 + len));
    let segment = r * r * ((r - depth) / r).acos() - (r - depth) * (2.0 * r * depth - depth * depth).sqrt();
    let analytic = 0.5 * (len * depth + segment);
    let delta = v0 - hf.volume();
    let slot_err = (delta - analytic).abs() / analytic;
    let ledger_err = (removed - delta).abs() / delta;

    let cfg = EnvConfig::default();
    let mut env = MillingEnv::new(cfg.clone()).unwrap();
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut p = BaselinePolicy::new(BaselineConfig::default(), &cfg);
        let r = run_episode(&mut env, &mut p, 900 + seed).unwrap();
        let d = env.heightfield_delta();
        worst = worst.max((r.chip_volume_mm3 - d).abs() / d).max((r.removed_volume_mm3 - d).abs() / d);
    }
    verdict(
        "volume accounting",
        slot_err <= 0.02 && ledger_err <= 0.005 && worst <= 0.005,
        t0,
        format!(
            "slot {delta:.3} vs analytic {analytic:.3} mm^3 ({:.2}%); 10 episodes max |MRV sum - heightfield delta| {:.3}%",
            100.0 * slot_err,
            100.0 * worst
        ),
    );
}

#[test]
fn ego_quadratic() {
    let t0 = Instant::now();
    let cfg = EgoConfig::default();
    let star = [17.0, 9.0, 1300.0];
    let mut worst = 0.0f64;
    let mut hits = 0;
    for seed in 0..10 {
        let c = cfg.clone();
        let mut rigged = move |p: &ProcessParams, _k: usize| -> millforge_core::Result<f64> {
            let a = p.to_array();
            Ok(-(0..3).map(|i| ((a[i] - star[i]) / (c.upper[i] - c.lower[i])).powi(2)).sum::<f64>())
        };
        let r = optimize(&mut rigged, &cfg, seed).unwrap();
        let o = r.optimum.to_array();
        let err = (0..3).map(|i| (o[i] - star[i]).abs() / (cfg.upper[i] - cfg.lower[i])).fold(0.0, f64::max);
        worst = worst.max(err);
        if err <= 0.02 && r.history.len() == 115 {
            hits += 1;
        }
    }
    verdict(
        "EGO quadratic sanity",
        hits == 10 && t0.elapsed().as_secs_f64() < 300.0,
        t0,
        format!("{hits}/10 seeds within 2% of box range at budget 115; worst {:.3}%", 100.0 * worst),
    );
}

#[test]
fn learning_beats_baseline() {
    let t0 = Instant::now();
    let cfg = EnvConfig::default();
    let cem = CemConfig::default();
    let init = warm_start_policy(&cfg, &BaselineConfig::default(), &cem, 0).unwrap();
    let c = cfg.clone();
    let trained = train_cem(move || MillingEnv::new(c.clone()), init, &cem, 0).unwrap();

    let mut env = MillingEnv::new(cfg.clone()).unwrap();
    let mut eval = |p: &mut dyn Policy| {
        (0..20u64)
            .map(|k| run_episode(&mut env, p, 20_000 + k).unwrap().reward)
            .collect::<Vec<_>>()
    };
    let learned = eval(&mut trained.policy.clone());
    let base = eval(&mut BaselinePolicy::new(BaselineConfig::default(), &cfg));
    let totals = |v: &[millforge_core::env::RewardBreakdown]| v.iter().map(|r| r.total).collect::<Vec<_>>();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (wins, n, p) = sign_test(&totals(&learned), &totals(&base));
    let dev_l = mean(&learned.iter().map(|r| r.deviation_term).collect::<Vec<_>>());
    let dev_b = mean(&base.iter().map(|r| r.deviation_term).collect::<Vec<_>>());
    let (tl, tb) = (mean(&totals(&learned)), mean(&totals(&base)));
    verdict(
        "learning improves over baseline",
        tl > tb && p < 0.05 && dev_l < dev_b,
        t0,
        format!("CEM 40x64 total {tl:.4} vs baseline {tb:.4}; sign test {wins}/{n} p={p:.2e}; deviation {dev_l:.4} vs {dev_b:.4}"),
    );
}
