//! The `tdil` command line: data generation, training, evaluation and
//! attention analysis.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attnlab::{decode_stacks, encode_stacks, export_traces, summarize, DomainTrace, ShiftCheck};
use crate::config::{sha256_hex, RunConfig};
use crate::datastore::{split_train_val, step_refs, Dataset};
use crate::diffcore::checkpoint;
use crate::error::{Error, Result};
use crate::gazenet::GazeNet;
use crate::gradsuite::{self, CheckResult};
use crate::policynet::{PolicyNet, Variant};
use crate::simenv::{record_demos, TaskKind};
use crate::trainer::{
    self, eval::attention_records, evaluate, evaluation_starts, file_entry, gaze_errors, metrics_csv, train_gaze,
    train_policy, Controller, EvalReport, ExpertController, LearnedController, Manifest, ATTENTION_FILE,
    CHECKPOINT_FILE, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE, REPORT_FILE,
};

#[derive(Parser, Debug)]
#[command(name = "tdil", version, about = "Dual-arm imitation learning with a token transformer policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted demonstrations into a dataset file.
    GenData {
        #[arg(long)]
        task: String,
        #[arg(long)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the gaze predictor.
    TrainGaze {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train a policy variant by behavior cloning.
    TrainPolicy {
        #[arg(long)]
        data: PathBuf,
        /// transformer, baseline or baseline-gap.
        #[arg(long, default_value = "transformer")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Closed-loop evaluation in the simulator.
    Eval {
        /// Trained policy directory.
        #[arg(long, required_unless_present = "expert")]
        policy: Option<PathBuf>,
        /// Trained gaze directory.
        #[arg(long, required_unless_present = "expert")]
        gaze: Option<PathBuf>,
        /// Run the scripted expert instead of a learned agent.
        #[arg(long, conflicts_with_all = ["policy", "gaze"])]
        expert: bool,
        #[arg(long)]
        task: String,
        /// Defaults to the config's `eval.episodes`.
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Dataset whose validation episodes supply the starts. Defaults to
        /// the split recorded by the policy run.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long)]
        out: PathBuf,
        /// Only read when `--expert` is given; a learned agent uses the
        /// config stored with the policy.
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Attention rollout traces of an evaluation run.
    AnalyzeAttention {
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Multiply raw attention without residual mixing.
        #[arg(long)]
        pure_rollout: bool,
    },
    /// Finite-difference gradient checks of every op and model.
    Gradcheck,
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            task,
            episodes,
            seed,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let g = gen_data(&cfg, TaskKind::parse(&task)?, episodes, seed, &out)?;
            println!(
                "expert success rate: {:.4} ({} of {} attempts)",
                g.success_rate(),
                g.successes,
                g.attempts
            );
        }
        Command::TrainGaze { data, out, config } => {
            let m = run_train_gaze(&config.load()?, &data, &out)?;
            print_metrics(&m);
        }
        Command::TrainPolicy {
            data,
            variant,
            out,
            config,
        } => {
            let m = run_train_policy(&config.load()?, &data, Variant::parse(&variant)?, &out)?;
            print_metrics(&m);
        }
        Command::Eval {
            policy,
            gaze,
            expert,
            task,
            episodes,
            seed,
            data,
            threads,
            out,
            config,
        } => {
            let agent = match (expert, policy, gaze) {
                (true, _, _) => Agent::Expert(config.load()?),
                (false, Some(p), Some(g)) => Agent::Learned { policy: p, gaze: g },
                _ => return Err(Error::Usage("eval needs --policy and --gaze, or --expert".into())),
            };
            let opts = EvalOptions {
                task: TaskKind::parse(&task)?,
                episodes,
                seed,
                data,
                threads,
            };
            let report = run_eval(&agent, &opts, &out)?;
            println!("{}", serde_json::to_string(&report.summary).map_err(|e| Error::Format(e.to_string()))?);
        }
        Command::AnalyzeAttention {
            eval,
            out,
            pure_rollout,
        } => {
            let a = analyze_attention(&eval, &out, !pure_rollout)?;
            println!("episodes analyzed: {}", a.episodes);
            if let Some(s) = a.shift {
                println!("attention shift check: {}", if s.passes { "pass" } else { "fail" });
            }
        }
        Command::Gradcheck => {
            let results = gradsuite::run_all()?;
            print!("{}", gradcheck_report(&results));
            if let Some(bad) = results.iter().find(|c| !c.passed()) {
                return Err(Error::Domain(format!(
                    "gradient check `{}` failed with relative error {:e}",
                    bad.name, bad.max_rel_error
                )));
            }
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn print_metrics(m: &Manifest) {
    for (k, v) in &m.metrics {
        println!("{k}: {v}");
    }
}

pub fn gradcheck_report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for c in results {
        let _ = writeln!(
            s,
            "{} {:<32} points {:>2}  max rel error {:.3e}",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.points,
            c.max_rel_error
        );
    }
    s
}

/// Records `episodes` expert demonstrations to `out` and writes
/// `<out>.manifest.json` next to it.
pub fn gen_data(
    cfg: &RunConfig,
    task: TaskKind,
    episodes: usize,
    seed: u64,
    out: &Path,
) -> Result<crate::simenv::Generated> {
    let g = record_demos(&cfg.sim, task, episodes, seed)?;
    g.dataset.write(out)?;
    let mut m = Manifest {
        command: "gen-data".into(),
        config_hash: cfg.hash(),
        seed,
        outputs: vec![file_entry("dataset", out)?],
        ..Manifest::default()
    };
    m.metrics.insert("attempts".into(), g.attempts as f64);
    m.metrics.insert("expert_success_rate".into(), g.success_rate());
    m.metrics.insert("steps".into(), g.dataset.num_steps() as f64);
    m.write(&sibling(out, ".manifest.json"))?;
    Ok(g)
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok((Dataset::decode(&bytes)?, sha256_hex(&bytes)))
}

fn write_run(
    out: &Path,
    cfg: &RunConfig,
    checkpoint_bytes: &[u8],
    curve: &[trainer::EpochMetrics],
    manifest: &mut Manifest,
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let ck = out.join(CHECKPOINT_FILE);
    std::fs::write(&ck, checkpoint_bytes).map_err(io_err(&ck))?;
    let mp = out.join(METRICS_FILE);
    std::fs::write(&mp, metrics_csv(curve)).map_err(io_err(&mp))?;
    let cp = out.join(CONFIG_FILE);
    std::fs::write(&cp, cfg.canonical_text()).map_err(io_err(&cp))?;
    manifest.outputs = vec![
        file_entry("checkpoint", &ck)?,
        file_entry("metrics", &mp)?,
        file_entry("config", &cp)?,
    ];
    manifest.write(&out.join(MANIFEST_FILE))
}

fn log_epoch(what: &'static str) -> impl FnMut(&trainer::EpochMetrics) {
    move |m| eprintln!("{what} epoch {}: train {:.6} val {:.6}", m.epoch, m.train_loss, m.val_loss)
}

fn training_manifest(
    command: &str,
    cfg: &RunConfig,
    data: &Path,
    data_hash: String,
    outcome: &trainer::TrainOutcome,
) -> Manifest {
    let mut m = Manifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        inputs: vec![trainer::FileEntry {
            role: "dataset".into(),
            path: data.display().to_string(),
            sha256: data_hash,
        }],
        lr_choice: Some(cfg.train.lr_choice.name().into()),
        lr: Some(cfg.train.lr()),
        epochs_run: Some(outcome.curve.len()),
        stop_reason: Some(outcome.stop.name().into()),
        best_epoch: Some(outcome.best_epoch),
        ..Manifest::default()
    };
    m.metrics.insert("init_val_loss".into(), outcome.init_val_loss);
    m.metrics.insert("best_val_loss".into(), outcome.best_val_loss);
    if let Some(last) = outcome.curve.last() {
        m.metrics.insert("final_train_loss".into(), last.train_loss);
        m.metrics.insert("final_val_loss".into(), last.val_loss);
    }
    m
}

/// Trains the gaze predictor on `data` and writes the run to `out`.
pub fn run_train_gaze(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Manifest> {
    let (ds, hash) = load_dataset(data)?;
    let run = train_gaze(&ds, cfg, log_epoch("gaze"))?;
    let mut m = training_manifest("train-gaze", cfg, data, hash, &run.outcome);
    m.lr = Some(cfg.train.for_gaze().lr());
    m.param_count = Some(run.net.num_params());
    m.val_episode_seeds = run.val_episodes.iter().map(|&e| ds.episodes[e].seed).collect();
    let mut errs = gaze_errors(&run.net, &ds, &step_refs(&ds, &run.val_episodes))?;
    errs.sort_by(f64::total_cmp);
    if !errs.is_empty() {
        m.metrics.insert("median_val_gaze_error".into(), errs[errs.len() / 2]);
    }
    write_run(out, cfg, &run.outcome.best, &run.outcome.curve, &mut m)?;
    Ok(m)
}

/// Trains one policy variant on `data` and writes the run to `out`. The
/// stored config carries the variant and any matched baseline width.
pub fn run_train_policy(cfg: &RunConfig, data: &Path, variant: Variant, out: &Path) -> Result<Manifest> {
    let (ds, hash) = load_dataset(data)?;
    let run = train_policy(&ds, cfg, variant, log_epoch(variant.name()))?;
    let mut stored = cfg.clone();
    stored.model = run.net.config.clone();
    let mut m = training_manifest("train-policy", &stored, data, hash, &run.outcome);
    m.variant = Some(variant.name().into());
    m.param_count = Some(run.net.num_params());
    m.reference_param_count = Some(run.reference_params);
    m.val_episode_seeds = run.val_episodes.iter().map(|&e| ds.episodes[e].seed).collect();
    write_run(out, &stored, &run.outcome.best, &run.outcome.curve, &mut m)?;
    Ok(m)
}

fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a trained policy directory.
pub fn load_policy(dir: &Path) -> Result<(PolicyNet, RunConfig, Manifest)> {
    let cfg = load_run_config(dir)?;
    let mut net = PolicyNet::new(cfg.model.clone(), cfg.seed)?;
    checkpoint::load(&mut net.store, &dir.join(CHECKPOINT_FILE))?;
    Ok((net, cfg, Manifest::read(&dir.join(MANIFEST_FILE))?))
}

/// Loads a trained gaze directory.
pub fn load_gaze(dir: &Path) -> Result<(GazeNet, RunConfig)> {
    let cfg = load_run_config(dir)?;
    let mut net = GazeNet::new(cfg.gaze.clone(), cfg.seed)?;
    checkpoint::load(&mut net.store, &dir.join(CHECKPOINT_FILE))?;
    Ok((net, cfg))
}

pub enum Agent {
    Expert(RunConfig),
    Learned { policy: PathBuf, gaze: PathBuf },
}

pub struct EvalOptions {
    pub task: TaskKind,
    pub episodes: Option<usize>,
    pub seed: u64,
    pub data: Option<PathBuf>,
    pub threads: usize,
}

fn dataset_val_seeds(path: &Path, cfg: &RunConfig) -> Result<(Vec<u64>, trainer::FileEntry)> {
    let (ds, hash) = load_dataset(path)?;
    let (_, val) = split_train_val(ds.episodes.len(), cfg.train.train_fraction, cfg.seed)?;
    let entry = trainer::FileEntry {
        role: "starts".into(),
        path: path.display().to_string(),
        sha256: hash,
    };
    Ok((val.iter().map(|&e| ds.episodes[e].seed).collect(), entry))
}

/// Runs the evaluation and writes `report.json`, `attention.batt` and a
/// manifest to `out`.
pub fn run_eval(agent: &Agent, opts: &EvalOptions, out: &Path) -> Result<EvalReport> {
    let mut inputs = Vec::new();
    let (cfg, mut val_seeds, controller, learned) = match agent {
        Agent::Expert(cfg) => (cfg.clone(), Vec::new(), "expert".to_string(), None),
        Agent::Learned { policy, gaze } => {
            let (pnet, cfg, pm) = load_policy(policy)?;
            let (gnet, gcfg) = load_gaze(gaze)?;
            if gcfg.sim.image_size != cfg.sim.image_size {
                return Err(Error::Config(format!(
                    "gaze run uses image_size {}, policy run uses {}",
                    gcfg.sim.image_size, cfg.sim.image_size
                )));
            }
            inputs.push(file_entry("policy_checkpoint", &policy.join(CHECKPOINT_FILE))?);
            inputs.push(file_entry("gaze_checkpoint", &gaze.join(CHECKPOINT_FILE))?);
            let name = pnet.variant().name().to_string();
            (
                cfg,
                pm.val_episode_seeds,
                name,
                Some(LearnedController {
                    gaze: gnet,
                    policy: pnet,
                }),
            )
        }
    };
    if let Some(d) = &opts.data {
        let (seeds, entry) = dataset_val_seeds(d, &cfg)?;
        val_seeds = seeds;
        inputs.push(entry);
    }
    let n = opts.episodes.unwrap_or(cfg.eval.episodes);
    let starts = evaluation_starts(&val_seeds, n, opts.seed);
    let noise = cfg.sim.gaze_noise;
    let make = |learned: &Option<LearnedController>| -> Result<Box<dyn Controller>> {
        Ok(match learned {
            Some(l) => Box::new(l.clone()),
            None => Box::new(ExpertController::new(noise)),
        })
    };
    let (outcomes, summary, episodes) = evaluate(&cfg.sim, opts.task, &starts, opts.threads, &|| make(&learned))?;
    let report = EvalReport {
        task: opts.task.name().into(),
        controller,
        n_episodes: n,
        seed: opts.seed,
        summary,
        episodes,
    };
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let rp = out.join(REPORT_FILE);
    let mut text = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(&rp, text).map_err(io_err(&rp))?;
    let ap = out.join(ATTENTION_FILE);
    std::fs::write(&ap, encode_stacks(&attention_records(opts.task, &outcomes))?).map_err(io_err(&ap))?;
    let mut m = Manifest {
        command: "eval".into(),
        config_hash: cfg.hash(),
        seed: opts.seed,
        inputs,
        outputs: vec![file_entry("report", &rp)?, file_entry("attention", &ap)?],
        variant: Some(report.controller.clone()),
        ..Manifest::default()
    };
    m.metrics.insert("success_rate".into(), report.success_rate());
    m.write(&out.join(MANIFEST_FILE))?;
    Ok(report)
}

pub fn read_report(dir: &Path) -> Result<EvalReport> {
    let p = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&p).map_err(io_err(&p))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub left_first: f64,
    pub left_second: f64,
    pub right_first: f64,
    pub right_second: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub task: String,
    pub residual: bool,
    pub episodes: usize,
    pub subtasks: [String; 2],
    /// Mean W′ per subtask and domain, in `Image, Gaze, Left, Right` order.
    pub means: [[Option<f64>; 4]; 2],
    pub shift: Option<ShiftReport>,
}

/// Reads an evaluation directory and writes `traces.csv`, `summary.csv` and
/// `analysis.json` to `out`.
pub fn analyze_attention(eval_dir: &Path, out: &Path, residual: bool) -> Result<Analysis> {
    let report = read_report(eval_dir)?;
    let task = report.task_kind()?;
    let ap = eval_dir.join(ATTENTION_FILE);
    let episodes = decode_stacks(&std::fs::read(&ap).map_err(io_err(&ap))?)?;
    let traces = episodes
        .iter()
        .filter(|e| e.stacks.len() >= 2)
        .map(|e| DomainTrace::from_stacks(e.episode, &e.stacks, e.split, residual))
        .collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let names = task.subtask_names();
    let rows = export_traces(&traces, names, &out.join("traces.csv"), &out.join("summary.csv"))?;
    let means = summarize(&rows);
    let shift = ShiftCheck::from_summary(&means).map(|s| ShiftReport {
        left_first: s.left_first,
        left_second: s.left_second,
        right_first: s.right_first,
        right_second: s.right_second,
        passes: s.passes(),
    });
    let a = Analysis {
        task: task.name().into(),
        residual,
        episodes: traces.len(),
        subtasks: names.map(String::from),
        means,
        shift,
    };
    let p = out.join("analysis.json");
    let mut text = serde_json::to_string_pretty(&a).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    std::fs::write(&p, text).map_err(io_err(&p))?;
    Ok(a)
}
