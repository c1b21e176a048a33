use std::path::{Path, PathBuf};

use edge_admission::artifacts::{read_csv, read_json, DpArtifact, PolicyArtifact, SCHEMA_VERSION};
use edge_admission::config::{ExperimentConfig, LearnerConfig};
use edge_admission::dp::{check_threshold_structure, check_value_monotone, value_iteration, PlanningKernel, ViOptions};
use edge_admission::eval::{
    aggregate_curves, behavioral_compare, evaluate as rollouts, exact_value, rate_trajectory, CurvePoint, EventTrace,
    Policy, PolicySeries,
};
use edge_admission::learners::{qlearning_train, BaselinePolicy, QLearningConfig};
use edge_admission::model::Model;
use edge_admission::rng::SeedTree;
use edge_admission::salmut::{self, SalmutConfig, ThresholdVector};
use edge_admission::scenario::{ScenarioState, TrajectoryPoint};
use edge_admission::training::{EvalStats, Evaluator, TrainingRow};
use edge_admission::{Error, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::manifest::Outputs;
use crate::Common;

/// Defaults, then the config file, then the flags.
fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(kind) = common.scenario {
        cfg.scenario.kind = kind;
    }
    if let Some(name) = &common.learner {
        if cfg.learner.name() != name {
            cfg.learner = LearnerConfig::from_name(name)?;
        }
    }
    if let Some(scale) = common.horizon_scale {
        cfg.scenario.horizon_scale = scale;
    }
    if common.paper_literal_sign {
        if let LearnerConfig::Salmut(s) = &mut cfg.learner {
            s.paper_literal_sign = true;
        }
    }
    if common.self_loop_variant {
        cfg.dp.kernel = PlanningKernel::SelfLoop;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn initial_rate(cfg: &ExperimentConfig, seed: u64) -> Result<f64> {
    Ok(ScenarioState::new(cfg.scenario.clone(), SeedTree::new(seed))?.aggregate_rate())
}

fn structure_report(v: &edge_admission::dp::ValueTable, policy: &edge_admission::dp::DeterministicPolicy) -> String {
    let mut out = String::new();
    let mono = check_value_monotone(v);
    if mono.is_empty() {
        out.push_str("value monotone in load: PASS\n");
    } else {
        out.push_str(&format!(
            "value monotone in load: FAIL ({} violations, first at {})\n",
            mono.len(),
            mono[0]
        ));
    }
    match check_threshold_structure(policy) {
        Ok(t) => {
            out.push_str("threshold policy in load: PASS\n");
            let tau: Vec<String> = (0..t.tau.len())
                .map(|x| t.last_accept(x).map_or("-".to_string(), |v| v.to_string()))
                .collect();
            out.push_str(&format!("thresholds: {}\n", tau.join(" ")));
        }
        Err(rows) => {
            let first = rows[0];
            out.push_str(&format!(
                "threshold policy in load: FAIL ({} rows, first x={} offloads at {} and accepts at {})\n",
                rows.len(),
                first.x,
                first.offload_at,
                first.accept_at
            ));
        }
    }
    out
}

pub fn solve(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let seed = cfg.seeds[0];
    let lambda = initial_rate(&cfg, seed)?;
    let sol = value_iteration(lambda, &model, &cfg.dp)?;
    let x0 = cfg.eval.initial_state;
    let art = DpArtifact::from_solution(&sol, x0);
    let mut out = Outputs::new(&cfg.output_dir);
    let path = out.json("dp_solution.json", &art)?;
    out.json(
        "dp_policy.json",
        &PolicyArtifact {
            schema_version: SCHEMA_VERSION,
            learner: "dp".into(),
            seed,
            steps: 0,
            model: cfg.model.clone(),
            policy: Policy::Table {
                policy: sol.policy.clone(),
            },
            q: Some(sol.q.clone()),
        },
    )?;
    out.finish("solve", &cfg)?;
    println!("lambda {lambda}");
    println!("kernel {:?}", sol.kernel);
    println!("iterations {}", sol.iterations);
    println!("residual {:.3e}", sol.residual);
    println!("V{x0} {:.6}", art.initial_value);
    print!("{}", structure_report(&sol.v, &sol.policy));
    println!("wrote {}", path.display());
    Ok(())
}

struct SeedRun {
    seed: u64,
    log: Vec<TrainingRow>,
    artifact: PolicyArtifact,
}

/// Evaluates at logged steps that are multiples of `eval.eval_every`, and at the horizon.
fn eval_schedule(cfg: &ExperimentConfig, log_every: u64, horizon: u64) -> impl FnMut() -> bool {
    let every = log_every.max(1);
    let eval_every = cfg.eval.eval_every;
    let mut calls = 0u64;
    move || {
        let step = calls.saturating_mul(every).min(horizon);
        calls += 1;
        step % eval_every == 0 || step == horizon
    }
}

fn train_salmut(cfg: &ExperimentConfig, sc: &SalmutConfig, model: &Model, seed: u64) -> Result<SeedRun> {
    let mut scenario = ScenarioState::new(cfg.scenario.clone(), SeedTree::new(seed))?;
    let horizon = sc.horizon.unwrap_or_else(|| cfg.scenario.horizon());
    let eval_tree = SeedTree::new(seed).child("training_eval", 0);
    let mut due = eval_schedule(cfg, sc.eval_every, horizon);
    let mut hook = |tau: &ThresholdVector, lambda: f64| -> Result<Option<EvalStats>> {
        if !due() {
            return Ok(None);
        }
        let policy = Policy::Threshold {
            tau: tau.clone(),
            temperature: sc.temperature,
        };
        Ok(Some(rollouts(&policy, model, lambda, &cfg.eval, &eval_tree)?.stats()))
    };
    let outcome = salmut::train(&mut scenario, model, sc, SeedTree::new(seed), Some(&mut hook as &mut Evaluator<_>))?;
    Ok(SeedRun {
        seed,
        log: outcome.log,
        artifact: PolicyArtifact {
            schema_version: SCHEMA_VERSION,
            learner: "salmut".into(),
            seed,
            steps: outcome.steps,
            model: cfg.model.clone(),
            policy: Policy::Threshold {
                tau: outcome.tau,
                temperature: sc.temperature,
            },
            q: Some(outcome.q),
        },
    })
}

fn train_qlearning(cfg: &ExperimentConfig, qc: &QLearningConfig, model: &Model, seed: u64) -> Result<SeedRun> {
    let mut scenario = ScenarioState::new(cfg.scenario.clone(), SeedTree::new(seed))?;
    let horizon = qc.horizon.unwrap_or_else(|| cfg.scenario.horizon());
    let eval_tree = SeedTree::new(seed).child("training_eval", 0);
    let mut due = eval_schedule(cfg, qc.eval_every, horizon);
    let mut hook = |q: &edge_admission::dp::QTable, lambda: f64| -> Result<Option<EvalStats>> {
        if !due() {
            return Ok(None);
        }
        let policy = Policy::QGreedy { q: q.clone() };
        Ok(Some(rollouts(&policy, model, lambda, &cfg.eval, &eval_tree)?.stats()))
    };
    let outcome = qlearning_train(&mut scenario, model, qc, SeedTree::new(seed), Some(&mut hook as &mut Evaluator<_>))?;
    Ok(SeedRun {
        seed,
        log: outcome.log,
        artifact: PolicyArtifact {
            schema_version: SCHEMA_VERSION,
            learner: "qlearning".into(),
            seed,
            steps: outcome.steps,
            model: cfg.model.clone(),
            policy: Policy::QGreedy { q: outcome.q },
            q: None,
        },
    })
}

/// Median and quartiles of the evaluated cost across seeds at every evaluated step.
fn curve(logs: &[&[TrainingRow]]) -> Result<Vec<CurvePoint>> {
    let paths: Vec<Vec<(u64, f64)>> = logs
        .iter()
        .map(|log| log.iter().filter_map(|r| r.eval_mean.map(|m| (r.step, m))).collect())
        .collect();
    aggregate_curves(&paths)
}

fn run_learner(cfg: &ExperimentConfig, model: &Model, learner: &LearnerConfig) -> Result<Vec<SeedRun>> {
    cfg.seeds
        .par_iter()
        .map(|&seed| match learner {
            LearnerConfig::Salmut(sc) => train_salmut(cfg, sc, model, seed),
            LearnerConfig::Qlearning(qc) => train_qlearning(cfg, qc, model, seed),
            other => Err(Error::config(
                "learner.name",
                format!("`{}` is not trainable, expected salmut or qlearning", other.name()),
            )),
        })
        .collect()
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let name = cfg.learner.name();
    let runs = run_learner(&cfg, &model, &cfg.learner)?;
    let mut out = Outputs::new(&cfg.output_dir);
    for run in &runs {
        out.csv(&format!("train/{name}_seed{}_log.csv", run.seed), &run.log)?;
        out.json(&format!("train/{name}_seed{}_policy.json", run.seed), &run.artifact)?;
    }
    let logs: Vec<&[TrainingRow]> = runs.iter().map(|r| r.log.as_slice()).collect();
    out.csv(&format!("train/{name}_curve.csv"), &curve(&logs)?)?;
    out.finish("train", &cfg)?;
    for run in &runs {
        let last = run.log.last().and_then(|r| r.eval_mean);
        match last {
            Some(m) => println!("{name} seed {}: {} steps, final evaluated cost {m:.4}", run.seed, run.artifact.steps),
            None => println!("{name} seed {}: {} steps", run.seed, run.artifact.steps),
        }
    }
    println!("wrote {}", cfg.output_dir.join("train").display());
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    policy: String,
    learner: String,
    seed: u64,
    lambda: f64,
    mean: f64,
    std_error: f64,
    q1: f64,
    median: f64,
    q3: f64,
    exact_value: f64,
    mean_overload_entries: f64,
    mean_offloads: f64,
}

#[derive(Serialize)]
struct BehaviorRow<'a> {
    seed: u64,
    policy: &'a str,
    window: usize,
    steps: usize,
    discounted_cost: f64,
    undiscounted_cost: f64,
    overload_entries: usize,
    offloads: usize,
    arrivals: usize,
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    seed: u64,
    policy: &'a str,
    overload_entries: usize,
    offloads: usize,
    arrivals: usize,
    undiscounted_cost: f64,
}

#[allow(clippy::too_many_arguments)]
fn eval_row(name: &str, learner: &str, seed: u64, policy: &Policy, model: &Model, lambda: f64, cfg: &ExperimentConfig, tree: &SeedTree) -> Result<EvalRow> {
    let report = rollouts(policy, model, lambda, &cfg.eval, tree)?;
    let exact = exact_value(policy, model, lambda)?;
    Ok(EvalRow {
        policy: name.to_string(),
        learner: learner.to_string(),
        seed,
        lambda,
        mean: report.mean,
        std_error: report.std_error,
        q1: report.q1,
        median: report.median,
        q3: report.q3,
        exact_value: *exact.at(cfg.eval.initial_state),
        mean_overload_entries: report.mean_overload_entries,
        mean_offloads: report.mean_offloads,
    })
}

/// Every policy over one event trace and one rate path of the configured scenario.
fn behavior(cfg: &ExperimentConfig, model: &Model, seed: u64, policies: &[(String, Policy)]) -> Result<Vec<PolicySeries>> {
    let len = cfg.scenario.horizon() as usize;
    let rates = rate_trajectory(&cfg.scenario, SeedTree::new(seed), len)?;
    let trace = EventTrace::generate(seed, len);
    behavioral_compare(
        policies,
        model,
        &rates,
        &trace,
        cfg.eval.window,
        cfg.eval.discount(model),
        cfg.eval.initial_state,
        cfg.eval.overload_level,
    )
}

fn behavior_rows(seed: u64, series: &[PolicySeries]) -> (Vec<BehaviorRow<'_>>, Vec<ScatterRow<'_>>) {
    let mut windows = Vec::new();
    let mut totals = Vec::new();
    for s in series {
        for w in &s.windows {
            windows.push(BehaviorRow {
                seed,
                policy: &s.name,
                window: w.index,
                steps: w.steps,
                discounted_cost: w.discounted_cost,
                undiscounted_cost: w.undiscounted_cost,
                overload_entries: w.overload_entries,
                offloads: w.offloads,
                arrivals: w.arrivals,
            });
        }
        let t = s.total();
        totals.push(ScatterRow {
            seed,
            policy: &s.name,
            overload_entries: t.overload_entries,
            offloads: t.offloads,
            arrivals: t.arrivals,
            undiscounted_cost: t.undiscounted_cost,
        });
    }
    (windows, totals)
}

fn policy_name(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

pub fn evaluate(common: &Common, policies: &[PathBuf], logs: &[PathBuf], check_structure: Option<&Path>) -> Result<()> {
    let cfg = load_config(common)?;
    if policies.is_empty() && logs.is_empty() && check_structure.is_none() {
        return Err(Error::config("evaluate", "nothing to do: pass --policy, --log or --check-structure"));
    }
    if let Some(path) = check_structure {
        let art: DpArtifact = read_json(path)?;
        println!("{} (lambda {}, kernel {:?})", path.display(), art.lambda, art.kernel);
        print!("{}", structure_report(&art.v, &art.policy));
    }
    let model = cfg.model()?;
    let mut loaded = Vec::with_capacity(policies.len());
    for path in policies {
        let art: PolicyArtifact = read_json(path)?;
        if art.model != cfg.model {
            return Err(Error::config(
                "model",
                format!("{} was produced for a different model block", path.display()),
            ));
        }
        loaded.push((policy_name(path), art));
    }
    let mut training = Vec::with_capacity(logs.len());
    for path in logs {
        training.push(read_csv::<TrainingRow>(path)?);
    }
    let mut out = Outputs::new(&cfg.output_dir);
    if !loaded.is_empty() {
        let seed = cfg.seeds[0];
        let tree = SeedTree::new(seed).child("evaluate", 0);
        let lambda = initial_rate(&cfg, seed)?;
        let rows = loaded
            .iter()
            .map(|(name, art)| eval_row(name, &art.learner, art.seed, &art.policy, &model, lambda, &cfg, &tree))
            .collect::<Result<Vec<_>>>()?;
        let named: Vec<(String, Policy)> = loaded.iter().map(|(n, a)| (n.clone(), a.policy.clone())).collect();
        let series = behavior(&cfg, &model, seed, &named)?;
        let (windows, totals) = behavior_rows(seed, &series);
        out.csv("evaluate/evaluation.csv", &rows)?;
        out.csv("evaluate/behavioral.csv", &windows)?;
        out.csv("evaluate/scatter.csv", &totals)?;
        for r in &rows {
            println!(
                "{}: mean {:.4} ± {:.4} (median {:.4}, exact {:.4})",
                r.policy, r.mean, r.std_error, r.median, r.exact_value
            );
        }
        for t in &totals {
            println!("{}: overload entries {}, offloads {}", t.policy, t.overload_entries, t.offloads);
        }
    }
    if !training.is_empty() {
        let refs: Vec<&[TrainingRow]> = training.iter().map(Vec::as_slice).collect();
        out.csv("evaluate/curve.csv", &curve(&refs)?)?;
    }
    out.finish("evaluate", &cfg)?;
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    seed: u64,
    dp: f64,
    salmut: f64,
    qlearning: f64,
    baseline: f64,
}

struct CompareRun {
    seed: u64,
    salmut_log: Vec<TrainingRow>,
    qlearning_log: Vec<TrainingRow>,
    evals: Vec<EvalRow>,
    series: Vec<PolicySeries>,
}

fn compare_seed(cfg: &ExperimentConfig, model: &Model, sc: &SalmutConfig, qc: &QLearningConfig, seed: u64) -> Result<CompareRun> {
    let lambda = initial_rate(cfg, seed)?;
    // Learned policies act in the simulator, so the reference optimum plans with its kernel.
    let dp_opts = ViOptions {
        kernel: PlanningKernel::Simulator,
        ..cfg.dp
    };
    let dp = value_iteration(lambda, model, &dp_opts)?;
    let s = train_salmut(cfg, sc, model, seed)?;
    let q = train_qlearning(cfg, qc, model, seed)?;
    let policies = vec![
        ("dp".to_string(), Policy::Table { policy: dp.policy }),
        ("salmut".to_string(), s.artifact.policy),
        ("qlearning".to_string(), q.artifact.policy),
        (
            "baseline".to_string(),
            Policy::Baseline {
                baseline: match &cfg.learner {
                    LearnerConfig::Baseline(b) => *b,
                    _ => BaselinePolicy::default(),
                },
            },
        ),
    ];
    let tree = SeedTree::new(seed).child("compare", 0);
    let evals = policies
        .iter()
        .map(|(name, p)| eval_row(name, name, seed, p, model, lambda, cfg, &tree))
        .collect::<Result<Vec<_>>>()?;
    let series = behavior(cfg, model, seed, &policies)?;
    Ok(CompareRun {
        seed,
        salmut_log: s.log,
        qlearning_log: q.log,
        evals,
        series,
    })
}

pub fn compare(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let model = cfg.model()?;
    let sc = match &cfg.learner {
        LearnerConfig::Salmut(s) => s.clone(),
        _ => SalmutConfig {
            paper_literal_sign: common.paper_literal_sign,
            ..SalmutConfig::default()
        },
    };
    let qc = match &cfg.learner {
        LearnerConfig::Qlearning(q) => q.clone(),
        _ => QLearningConfig::default(),
    };
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| compare_seed(&cfg, &model, &sc, &qc, seed))
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::with_capacity(runs.len());
    let mut evals = Vec::new();
    let mut windows = Vec::new();
    let mut totals = Vec::new();
    for run in &runs {
        let mean = |name: &str| run.evals.iter().find(|e| e.policy == name).map_or(f64::NAN, |e| e.mean);
        summary.push(SummaryRow {
            seed: run.seed,
            dp: mean("dp"),
            salmut: mean("salmut"),
            qlearning: mean("qlearning"),
            baseline: mean("baseline"),
        });
        evals.extend(run.evals.iter());
        let (w, t) = behavior_rows(run.seed, &run.series);
        windows.extend(w);
        totals.extend(t);
    }
    let salmut_logs: Vec<&[TrainingRow]> = runs.iter().map(|r| r.salmut_log.as_slice()).collect();
    let q_logs: Vec<&[TrainingRow]> = runs.iter().map(|r| r.qlearning_log.as_slice()).collect();

    let mut out = Outputs::new(&cfg.output_dir);
    out.csv("compare/summary.csv", &summary)?;
    out.csv("compare/evaluation.csv", &evals)?;
    out.csv("compare/behavioral.csv", &windows)?;
    out.csv("compare/scatter.csv", &totals)?;
    out.csv("compare/curve_salmut.csv", &curve(&salmut_logs)?)?;
    out.csv("compare/curve_qlearning.csv", &curve(&q_logs)?)?;
    out.finish("compare", &cfg)?;

    let n = summary.len() as f64;
    let avg = |f: fn(&SummaryRow) -> f64| summary.iter().map(f).sum::<f64>() / n;
    println!("mean discounted cost over {} seeds", summary.len());
    println!("  dp         {:.4}", avg(|r| r.dp));
    println!("  salmut     {:.4}", avg(|r| r.salmut));
    println!("  qlearning  {:.4}", avg(|r| r.qlearning));
    println!("  baseline   {:.4}", avg(|r| r.baseline));
    println!("wrote {}", cfg.output_dir.join("compare").display());
    Ok(())
}

/// Rows at step 0 and wherever the rate or the population changes.
fn change_points(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<TrajectoryPoint>> {
    let mut state = ScenarioState::new(cfg.scenario.clone(), SeedTree::new(seed))?;
    let mut out: Vec<TrajectoryPoint> = Vec::new();
    for step in 0..cfg.scenario.horizon() {
        let p = TrajectoryPoint {
            step,
            lambda: state.aggregate_rate(),
            n_users: state.n_users(),
        };
        if out.last().is_none_or(|q| q.lambda != p.lambda || q.n_users != p.n_users) {
            out.push(p);
        }
        state.advance();
    }
    Ok(out)
}

pub fn trajectory(common: &Common, every: Option<u64>) -> Result<()> {
    let cfg = load_config(common)?;
    if every == Some(0) {
        return Err(Error::config("every", "must be >= 1"));
    }
    let mut out = Outputs::new(&cfg.output_dir);
    let kind = cfg.scenario.kind;
    for &seed in &cfg.seeds {
        let points = match every {
            Some(n) => edge_admission::scenario::trajectory(&cfg.scenario, SeedTree::new(seed), cfg.scenario.horizon(), n)?,
            None => change_points(&cfg, seed)?,
        };
        let path = out.csv(&format!("trajectory/s{kind}_seed{seed}.csv"), &points)?;
        println!("seed {seed}: {} rows -> {}", points.len(), path.display());
    }
    out.finish("trajectory", &cfg)?;
    Ok(())
}
