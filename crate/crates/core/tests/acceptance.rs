//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and exits non-zero if any criterion fails.
//!
//! The learning criteria train real models at desk scale and take well over
//! an hour on one core. Artifacts are kept under the cargo target tmp dir.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tdil::attnlab::{attention_rollout, domain_attention, AttentionStack, SEQ};
use tdil::cli::{self, Agent, EvalOptions};
use tdil::config::RunConfig;
use tdil::datastore::{step_refs, Dataset, Episode, EpisodeStep};
use tdil::diffcore::{uniform, seeded, Tape};
use tdil::gazenet::{mdn_nll, GmmParams};
use tdil::gradsuite;
use tdil::policynet::{
    match_param_counts, tokenize_state, ModelConfig, PolicyInput, PolicyNet, Variant, OUTPUT_DIM, STATE_DIM,
};
use tdil::simenv::world::BOX_HALF;
use tdil::simenv::{block_metrics, Pose2, SimConfig, TaskKind};
use tdil::trainer::{self, evaluate, gaze_errors, ExpertController, EvalSummary};

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let line = format!("[{tag}] {id}: {detail}");
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mins(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() / 60.0
}

fn ac1(r: &mut Report) {
    let t = Instant::now();
    let results = gradsuite::run_all().expect("gradient suite runs");
    let worst = results.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    let points_ok = results.iter().all(|c| c.points >= 10);
    let m = mins(t);
    r.record(
        "AC1 gradient correctness",
        failed.is_empty() && points_ok && m <= 5.0,
        format!(
            "{} checks, worst rel error {worst:.2e} (≤ 1e-4), failed {failed:?}, {m:.2} min (≤ 5)",
            results.len()
        ),
    );
}

/// Bivariate normal density written from the covariance matrix directly.
fn oracle_density(g: &GmmParams, x: f64, y: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..g.components() {
        let [sx, sy] = g.sigma[i];
        let cov = [[sx * sx, g.rho[i] * sx * sy], [g.rho[i] * sx * sy, sy * sy]];
        let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
        let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
        let d = [x - g.mu[i][0], y - g.mu[i][1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        total += g.p[i] * (-0.5 * q).exp() / (2.0 * PI * det.sqrt());
    }
    total
}

fn ac2(r: &mut Report) {
    let t = Instant::now();
    let mut rg = rng(2);
    let (mut worst_point, mut worst_mass) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = 8;
        let mut raw = vec![0.0; 6 * n];
        for i in 0..n {
            raw[i] = rg.random_range(-1.5..1.5);
            raw[n + i] = rg.random_range(-1.5..1.5);
            raw[2 * n + i] = rg.random_range(-2.5..-0.5);
            raw[3 * n + i] = rg.random_range(-2.5..-0.5);
            raw[4 * n + i] = rg.random_range(-1.5..1.5);
            raw[5 * n + i] = rg.random_range(-2.0..2.0);
        }
        let g = GmmParams::from_raw(&raw, n).unwrap();
        // grid over every component's ±9σ box, spacing a fifth of the narrowest σ
        let smin = g.sigma.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        let h = smin / 5.0;
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for i in 0..n {
            for a in 0..2 {
                lo[a] = lo[a].min(g.mu[i][a] - 9.0 * g.sigma[i][a]);
                hi[a] = hi[a].max(g.mu[i][a] + 9.0 * g.sigma[i][a]);
            }
        }
        let nx = ((hi[0] - lo[0]) / h).ceil() as usize;
        let ny = ((hi[1] - lo[1]) / h).ceil() as usize;
        let mut mass = 0.0;
        for ix in 0..nx {
            let x = lo[0] + (ix as f64 + 0.5) * h;
            for iy in 0..ny {
                let y = lo[1] + (iy as f64 + 0.5) * h;
                let want = oracle_density(&g, x, y);
                let got = (-mdn_nll(&g, [x, y]).unwrap()).exp();
                worst_point = worst_point.max((got - want).abs());
                mass += got * h * h;
            }
        }
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    let m = mins(t);
    r.record(
        "AC2 MDN validity",
        worst_point <= 1e-6 && worst_mass <= 1e-2 && m <= 2.0,
        format!("100 mixtures, max |density error| {worst_point:.2e} (≤ 1e-6), max |mass − 1| {worst_mass:.2e} (≤ 1e-2), {m:.2} min (≤ 2)"),
    );
}

fn ac3(r: &mut Report) {
    let cfg = ModelConfig::default();
    let net = PolicyNet::new(cfg.clone(), 3).unwrap();
    let state: [f64; STATE_DIM] = std::array::from_fn(|i| (i as f64 * 0.37).sin());
    let tokens = tokenize_state(&state);
    let fovea = uniform(&[3, cfg.fovea_size, cfg.fovea_size], 0.0, 1.0, &mut seeded(4));
    let inputs = [PolicyInput { fovea: &fovea, state }, PolicyInput { fovea: &fovea, state }];
    let mut tape = Tape::new();
    let fwd = net.forward(&mut tape, &inputs, None).unwrap();
    let seq_shape = tape.shape(fwd.encoded.unwrap()).to_vec();
    let out_shape = tape.shape(fwd.output).to_vec();
    let stacks = net.attention_stacks(&tape, &fwd).unwrap();
    let s = &stacks[0];
    let worst_row = s
        .layers
        .iter()
        .flat_map(|l| l.chunks(SEQ).map(|row| (row.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    let ok = tokens.len() == 22 * 23
        && (0..22).all(|k| tokens[k * 23] == state[k] && tokens[k * 23 + 1 + k] == 1.0)
        && seq_shape == [2, 23, 64]
        && s.layers.len() == 3
        && s.size == 23
        && s.layers.iter().all(|l| l.len() == 23 * 23)
        && worst_row <= 1e-9
        && out_shape == [2, OUTPUT_DIM]
        && OUTPUT_DIM == 16;
    r.record(
        "AC3 arity and shapes",
        ok,
        format!(
            "tokens 22×23, sequence {:?}, attention {}×{}×{} (max |row sum − 1| {worst_row:.1e}), output {:?}",
            &seq_shape[1..],
            s.layers.len(),
            s.size,
            s.size,
            out_shape[1]
        ),
    );
}

fn random_stochastic(rg: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m: Vec<f64> = (0..SEQ * SEQ).map(|_| rg.random_range(0.0..1.0f64).powi(3)).collect();
    for row in m.chunks_mut(SEQ) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    m
}

fn ac4(r: &mut Report) {
    let mut rg = rng(4);
    let (mut worst_row, mut worst_sum) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let layers = (0..1 + i % 4).map(|_| random_stochastic(&mut rg)).collect();
        let stack = AttentionStack::new(SEQ, layers).unwrap();
        for residual in [true, false] {
            let roll = attention_rollout(&stack, residual).unwrap();
            for row in roll.chunks(SEQ) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            let w = domain_attention(&roll).unwrap();
            worst_sum = worst_sum.max((w.iter().sum::<f64>() - 23.0).abs());
        }
    }
    let uniform_stack = AttentionStack::new(SEQ, vec![vec![1.0 / 23.0; SEQ * SEQ]; 3]).unwrap();
    let mut uniform_w = Vec::new();
    let mut uniform_dev = 0.0f64;
    for residual in [true, false] {
        let w = domain_attention(&attention_rollout(&uniform_stack, residual).unwrap()).unwrap();
        for (got, want) in w.iter().zip([1.0, 2.0, 10.0, 10.0]) {
            uniform_dev = uniform_dev.max((got - want).abs());
        }
        uniform_w.push(w);
    }
    // 1/23 is not representable, so "exact" is checked at a few ulps of 10
    let ok = worst_row <= 1e-9 && worst_sum <= 1e-9 && uniform_dev <= 1e-12;
    r.record(
        "AC4 rollout invariants",
        ok,
        format!(
            "1000 stacks × 2 modes: max |row sum − 1| {worst_row:.1e}, max |ΣW − 23| {worst_sum:.1e}; uniform W {:?} (max dev {uniform_dev:.1e})",
            uniform_w[0]
        ),
    );
}

fn ac5(r: &mut Report) {
    let reference = ModelConfig::default();
    let ref_count = PolicyNet::new(reference.clone(), 0).unwrap().num_params();
    let mut parts = vec![format!("transformer {ref_count}")];
    let mut ok = ref_count == 476_152;
    for v in [Variant::Baseline, Variant::BaselineGap] {
        let target = ModelConfig {
            variant: v,
            ..reference.clone()
        };
        let m = match_param_counts(&reference, &target).unwrap();
        // count by instantiating the matched model, not from the analytic formula
        let got = PolicyNet::new(m.config.clone(), 0).unwrap().num_params();
        let rel = got.abs_diff(ref_count) as f64 / ref_count as f64;
        ok &= rel <= 0.05 && got == m.target_params;
        parts.push(format!("{} {got} (hidden {}, {:+.2}%)", v.name(), m.config.mlp_hidden, 100.0 * (got as f64 / ref_count as f64 - 1.0)));
    }
    r.record("AC5 parameter matching", ok, parts.join(", "));
}

fn run_cli_ok(what: &str, result: tdil::Result<impl Sized>) {
    if let Err(e) = result {
        panic!("{what}: {e}");
    }
}

struct Artifacts {
    gaze: PathBuf,
    policy_data: PathBuf,
    transformer: Option<(PathBuf, PathBuf)>,
}

fn ac6(r: &mut Report, work: &Path) -> PathBuf {
    let t = Instant::now();
    let cfg = RunConfig {
        train: tdil::config::TrainConfig {
            time_budget_s: 14.0 * 60.0 - 60.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let data = work.join("gaze200.badm");
    run_cli_ok("gen-data", cli::gen_data(&cfg, TaskKind::PickTwo, 200, 600, &data));
    let out = work.join("gaze");
    run_cli_ok("train-gaze", cli::run_train_gaze(&cfg, &data, &out));
    let m = mins(t);
    let ds = Dataset::read(&data).unwrap();
    let (net, gcfg) = cli::load_gaze(&out).unwrap();
    let (_, val) = tdil::datastore::split_train_val(ds.episodes.len(), gcfg.train.train_fraction, gcfg.seed).unwrap();
    let mut errs = gaze_errors(&net, &ds, &step_refs(&ds, &val)).unwrap();
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let median = if n % 2 == 1 { errs[n / 2] } else { 0.5 * (errs[n / 2 - 1] + errs[n / 2]) };
    // normalized coordinates span [−1, 1], so the image width is 2
    let limit = 0.05 * 2.0;
    r.record(
        "AC6 gaze learning",
        median <= limit && m <= 15.0,
        format!("median val gaze error {median:.4} over {n} steps (≤ {limit}), {m:.1} min (≤ 15)"),
    );
    out
}

fn train_and_eval(work: &Path, data: &Path, gaze: &Path, variant: Variant, seed: u64, episodes: usize) -> (PathBuf, PathBuf, f64) {
    let t = Instant::now();
    let cfg = RunConfig {
        seed,
        ..Default::default()
    };
    let pol = work.join(format!("{}_s{seed}", variant.name()));
    run_cli_ok("train-policy", cli::run_train_policy(&cfg, data, variant, &pol));
    let ev = work.join(format!("eval_{}_s{seed}", variant.name()));
    let opts = EvalOptions {
        task: TaskKind::PickTwo,
        episodes: Some(episodes),
        seed: 0,
        data: None,
        threads: 1,
    };
    let agent = Agent::Learned {
        policy: pol.clone(),
        gaze: gaze.to_path_buf(),
    };
    run_cli_ok("eval", cli::run_eval(&agent, &opts, &ev));
    (pol, ev, mins(t))
}

fn ac7(r: &mut Report, work: &Path, art: &mut Artifacts) {
    let cfg = RunConfig::default();
    run_cli_ok("gen-data", cli::gen_data(&cfg, TaskKind::PickTwo, 300, 700, &art.policy_data));
    let mut rates = Vec::new();
    let mut ok = true;
    let mut parts = Vec::new();
    for v in Variant::ALL {
        let (pol, ev, m) = train_and_eval(work, &art.policy_data, &art.gaze, v, 0, 50);
        let report = cli::read_report(&ev).unwrap();
        let rate = report.success_rate();
        ok &= m <= 30.0 && report.n_episodes == 50;
        if v == Variant::Transformer {
            ok &= rate >= 0.7;
            art.transformer = Some((pol, ev));
        }
        parts.push(format!("{} {:.0}% ({m:.1} min)", v.name(), 100.0 * rate));
        rates.push((v, rate));
    }
    let t_rate = rates[0].1;
    let ordering = rates[1..].iter().all(|&(_, b)| t_rate >= b);
    r.record(
        "AC7 policy learning",
        ok,
        format!(
            "both-objects success over 50 episodes: {} (transformer ≥ 70%); ordering transformer ≥ baselines: {ordering}",
            parts.join(", ")
        ),
    );
}

fn ac8(r: &mut Report, work: &Path, art: &Artifacts) {
    let mut evals = Vec::new();
    if let Some((_, ev)) = &art.transformer {
        evals.push((0u64, ev.clone()));
    }
    let (_, ev1, _) = train_and_eval(work, &art.policy_data, &art.gaze, Variant::Transformer, 1, 24);
    evals.push((1, ev1));
    let mut passes = 0;
    let mut parts = Vec::new();
    for (seed, ev) in &evals {
        let a = cli::analyze_attention(ev, &work.join(format!("analysis_s{seed}")), true).unwrap();
        match &a.shift {
            Some(s) => {
                passes += usize::from(s.passes && a.episodes >= 20);
                parts.push(format!(
                    "seed {seed}: {} episodes, left {:.3}→{:.3}, right {:.3}→{:.3}, {}",
                    a.episodes,
                    s.left_first,
                    s.left_second,
                    s.right_first,
                    s.right_second,
                    if s.passes { "shift" } else { "no shift" }
                ));
            }
            None => parts.push(format!("seed {seed}: no second subtask reached")),
        }
    }
    r.record(
        "AC8 attention shift",
        passes >= 1 && evals.len() == 2,
        format!("{} (needs ≥ 1 of 2 seeds)", parts.join("; ")),
    );
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    for kv in [
        "image_size=32",
        "fovea_size=16",
        "gaze.channels=4,8",
        "gaze.hidden=8",
        "policy.d_model=8",
        "policy.heads=2",
        "policy.layers=1",
        "policy.ffn_dim=16",
        "policy.mlp_hidden=12",
        "policy.channels=4,8",
        "train.epochs=2",
        "train.batch_size=16",
    ] {
        let (k, v) = kv.split_once('=').unwrap();
        cfg.set(k, v).unwrap();
    }
    cfg
}

fn random_dataset(rg: &mut ChaCha8Rng) -> Dataset {
    let (height, width) = (rg.random_range(1..6), rg.random_range(1..6));
    let f = |v: f64| v as f32 as f64;
    let episodes = (0..rg.random_range(0..4))
        .map(|_| Episode {
            seed: rg.random(),
            steps: (0..rg.random_range(0..5))
                .map(|i| {
                    let mut arm = || {
                        let mut a = [0.0; 10];
                        for k in 0..3 {
                            a[k] = f(rg.random_range(-1.0..1.0));
                            let th: f64 = rg.random_range(-PI..PI);
                            a[3 + 2 * k] = f(th.cos());
                            a[4 + 2 * k] = f(th.sin());
                        }
                        a[9] = f(rg.random_range(0.0..1.6));
                        a
                    };
                    let (left, right) = (arm(), arm());
                    EpisodeStep {
                        step: i,
                        image: (0..3 * height * width).map(|_| rg.random()).collect(),
                        gaze: [f(rg.random_range(-1.0..1.0)), f(rg.random_range(-1.0..1.0))],
                        left,
                        right,
                        action: std::array::from_fn(|_| f(rg.random_range(-0.1..0.1))),
                        grip: [rg.random_range(0..2), rg.random_range(0..2)],
                    }
                })
                .collect(),
        })
        .collect();
    Dataset {
        task: if rg.random() { TaskKind::PickTwo } else { TaskKind::PushBox },
        height,
        width,
        seed: rg.random(),
        episodes,
    }
}

fn ac9(r: &mut Report, work: &Path) {
    let cfg = tiny_config();
    let data = work.join("tiny.badm");
    run_cli_ok("gen-data", cli::gen_data(&cfg, TaskKind::PickTwo, 4, 900, &data));
    let files = [trainer::CHECKPOINT_FILE, trainer::METRICS_FILE];
    let mut same = true;
    for (kind, runs) in [("gaze", ["g_a", "g_b"]), ("policy", ["p_a", "p_b"])] {
        for run in runs {
            let out = work.join(run);
            if kind == "gaze" {
                run_cli_ok("train-gaze", cli::run_train_gaze(&cfg, &data, &out));
            } else {
                run_cli_ok("train-policy", cli::run_train_policy(&cfg, &data, Variant::Transformer, &out));
            }
        }
        for f in files {
            let a = std::fs::read(work.join(runs[0]).join(f)).unwrap();
            let b = std::fs::read(work.join(runs[1]).join(f)).unwrap();
            same &= a == b;
        }
    }
    let mut rg = rng(9);
    let mut round_trips = 0;
    for i in 0..50 {
        let d = random_dataset(&mut rg);
        let p = work.join(format!("rt{i}.badm"));
        d.write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = Dataset::read(&p).unwrap();
        if back == d && back.encode().unwrap() == bytes {
            round_trips += 1;
        }
    }
    r.record(
        "AC9 determinism and IO",
        same && round_trips == 50,
        format!("rerun checkpoints and metrics identical: {same}; dataset round trips {round_trips}/50"),
    );
}

fn ac10(r: &mut Report) {
    let sim = SimConfig::default();
    let starts: Vec<u64> = (0..20).map(|i| tdil::simenv::episode_seed(1000, i)).collect();
    let make = || -> tdil::Result<Box<dyn trainer::Controller>> { Ok(Box::new(ExpertController::new(sim.gaze_noise))) };
    let (_, summary, records) = evaluate(&sim, TaskKind::PushBox, &starts, 1, &make).unwrap();
    let worst_corner = records
        .iter()
        .map(|e| e.top_left_error.unwrap().max(e.top_right_error.unwrap()))
        .fold(0.0, f64::max);
    let worst_tilt = records.iter().map(|e| e.tilt_deg.unwrap().abs()).fold(0.0, f64::max);
    let rate = match summary {
        EvalSummary::Push { success_rate, .. } => success_rate,
        _ => 0.0,
    };
    let mut rg = rng(10);
    let mut zeros = true;
    for _ in 0..100 {
        let goal = Pose2 {
            x: rg.random_range(-0.8..0.8),
            y: rg.random_range(-0.8..0.8),
            yaw: rg.random_range(-PI..PI),
        };
        let m = block_metrics(&goal, &goal, BOX_HALF);
        zeros &= m.top_left_error == 0.0 && m.top_right_error == 0.0 && m.tilt_deg == 0.0;
    }
    r.record(
        "AC10 push metrics harness",
        worst_corner <= 0.08 && worst_tilt <= 10.0 && zeros,
        format!(
            "expert over 20 episodes: max corner error {worst_corner:.4} (≤ 0.08), max |tilt| {worst_tilt:.2}° (≤ 10), success {:.0}%; identical poses give exact zeros: {zeros}",
            100.0 * rate
        ),
    );
}

fn main() {
    // like libtest, positional arguments select criteria by substring
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| id.contains(f.as_str()));
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).unwrap();
    let mut r = Report { lines: Vec::new() };
    if wanted("AC1") {
        ac1(&mut r);
    }
    if wanted("AC2") {
        ac2(&mut r);
    }
    if wanted("AC3") {
        ac3(&mut r);
    }
    if wanted("AC4") {
        ac4(&mut r);
    }
    if wanted("AC5") {
        ac5(&mut r);
    }
    if wanted("AC9") {
        ac9(&mut r, &work);
    }
    if wanted("AC10") {
        ac10(&mut r);
    }
    // AC7 and AC8 reuse the gaze model and the policy runs before them
    let heavy = ["AC6", "AC7", "AC8"].iter().any(|id| wanted(id));
    if heavy {
        let mut art = Artifacts {
            gaze: ac6(&mut r, &work),
            policy_data: work.join("pick300.badm"),
            transformer: None,
        };
        if wanted("AC7") || wanted("AC8") {
            ac7(&mut r, &work, &mut art);
        }
        if wanted("AC8") {
            ac8(&mut r, &work, &art);
        }
    }

    println!("\nacceptance summary");
    for (_, line) in &r.lines {
        println!("{line}");
    }
    let failed = r.lines.iter().filter(|(p, _)| !p).count();
    println!("{} of {} criteria passed", r.lines.len() - failed, r.lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
