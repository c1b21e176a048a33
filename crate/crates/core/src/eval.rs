//! Policy evaluation: discounted-cost rollouts, quantile summaries and the
//! windowed overload/offload counters on shared event traces.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{policy_evaluation, DeterministicPolicy, PlanningKernel, QTable, ValueTable};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::learners::{baseline_decide, BaselinePolicy};
use crate::model::{step_with_draws, Action, Event, Model, ModelParams, State};
use crate::rng::{SeedTree, StepRngs, EVAL, TRACE};
use crate::salmut::ThresholdVector;
use crate::scenario::{ScenarioConfig, ScenarioState};
use crate::training::EvalStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rollout_length: usize,
    pub n_rollouts: usize,
    pub n_sample_paths: usize,
    pub eval_every: u64,
    pub initial_state: State,
    /// Window length for the overload/offload counters.
    pub window: usize,
    /// Overrides the model's discount factor when set.
    pub beta: Option<f64>,
    /// Loads at or above this level count as overloaded.
    pub overload_level: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            rollout_length: 1000,
            n_rollouts: 100,
            n_sample_paths: 10,
            eval_every: 1000,
            initial_state: State::new(0, 0),
            window: 1000,
            beta: None,
            overload_level: 18,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        let counts = [
            ("eval.rollout_length", self.rollout_length as u64),
            ("eval.n_rollouts", self.n_rollouts as u64),
            ("eval.n_sample_paths", self.n_sample_paths as u64),
            ("eval.eval_every", self.eval_every),
            ("eval.window", self.window as u64),
        ];
        for (field, n) in counts {
            if n == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if let Some(b) = self.beta {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config("eval.beta", "must lie in (0, 1)"));
            }
        }
        if !params.contains(self.initial_state) {
            return Err(Error::config("eval.initial_state", "outside the state space"));
        }
        Ok(())
    }

    pub fn discount(&self, model: &Model) -> f64 {
        self.beta.unwrap_or(model.params.discount_beta)
    }
}

/// Any policy the harness can roll out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Table { policy: DeterministicPolicy },
    /// Thresholds rounded down: accept iff `ℓ ≤ ⌊τ(x)⌋`.
    Threshold { tau: ThresholdVector, temperature: f64 },
    QGreedy { q: QTable },
    Baseline { baseline: BaselinePolicy },
}

impl Policy {
    #[inline]
    pub fn decide(&self, s: State, params: &ModelParams) -> Action {
        if s.x >= params.buffer_capacity {
            return Action::Offload;
        }
        match self {
            Policy::Table { policy } => *policy.at(s),
            Policy::Threshold { tau, .. } => tau.greedy_action(s, params),
            Policy::QGreedy { q } => q.greedy(s, params),
            Policy::Baseline { baseline } => baseline_decide(s, baseline, params),
        }
    }

    pub fn to_table(&self, params: &ModelParams) -> DeterministicPolicy {
        Grid::from_fn(params.rows(), params.cols(), |x, ell| self.decide(State::new(x, ell), params))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Policy::Table { .. } => "table",
            Policy::Threshold { .. } => "threshold",
            Policy::QGreedy { .. } => "q_greedy",
            Policy::Baseline { .. } => "baseline",
        }
    }
}

/// Counters of one rollout or one window.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub index: usize,
    pub steps: usize,
    pub discounted_cost: f64,
    pub undiscounted_cost: f64,
    /// Transitions from a load below the overload level to one at or above it.
    pub overload_entries: usize,
    /// Offloaded arrivals, including those forced by a full buffer.
    pub offloads: usize,
    pub arrivals: usize,
}

/// Advances `metrics` by one transition, discounting from the start of the window.
#[inline]
fn account(metrics: &mut MetricsWindow, s: State, event: Event, action: Option<Action>, next: State, cost: f64, discount: f64, overload: usize) {
    metrics.steps += 1;
    metrics.discounted_cost += discount * cost;
    metrics.undiscounted_cost += cost;
    if s.ell < overload && next.ell >= overload {
        metrics.overload_entries += 1;
    }
    if event == Event::Arrival {
        metrics.arrivals += 1;
        if action == Some(Action::Offload) {
            metrics.offloads += 1;
        }
    }
}

/// One rollout of `h` steps from `x0` at a frozen arrival rate.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    policy: &Policy,
    model: &Model,
    lambda: f64,
    h: usize,
    beta: f64,
    x0: State,
    overload_level: usize,
    rngs: &mut StepRngs,
) -> Result<MetricsWindow> {
    let p = &model.params;
    let mut metrics = MetricsWindow::default();
    let mut s = x0;
    let mut discount = 1.0;
    for _ in 0..h {
        let a = policy.decide(s, p);
        let event_u: f64 = rngs.events.gen();
        let resource_u: f64 = rngs.resources.gen();
        let tr = step_with_draws(s, a, lambda, p, &model.costs, &model.resources, event_u, resource_u)?;
        account(&mut metrics, s, tr.event, tr.action, tr.next, tr.cost, discount, overload_level);
        discount *= beta;
        s = tr.next;
    }
    Ok(metrics)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: f64,
    pub std_error: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mean_overload_entries: f64,
    pub mean_offloads: f64,
    pub costs: Vec<f64>,
}

impl EvalReport {
    pub fn stats(&self) -> EvalStats {
        EvalStats {
            mean: self.mean,
            q1: self.q1,
            median: self.median,
            q3: self.q3,
        }
    }
}

/// `n_rollouts` independent rollouts, rollout `i` drawing from `seed.child("eval", i)`.
pub fn evaluate(policy: &Policy, model: &Model, lambda: f64, cfg: &EvalConfig, seed: &SeedTree) -> Result<EvalReport> {
    let beta = cfg.discount(model);
    let mut costs = Vec::with_capacity(cfg.n_rollouts);
    let (mut ov, mut off) = (0usize, 0usize);
    for i in 0..cfg.n_rollouts {
        let mut rngs = StepRngs::from_tree(&seed.child(EVAL, i as u64));
        let m = rollout(policy, model, lambda, cfg.rollout_length, beta, cfg.initial_state, cfg.overload_level, &mut rngs)?;
        costs.push(m.discounted_cost);
        ov += m.overload_entries;
        off += m.offloads;
    }
    let n = costs.len() as f64;
    let mean = costs.iter().sum::<f64>() / n;
    let var = if costs.len() > 1 {
        costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let s = sorted(&costs);
    Ok(EvalReport {
        mean,
        std_error: (var / n).sqrt(),
        q1: quantile(&s, 0.25),
        median: quantile(&s, 0.5),
        q3: quantile(&s, 0.75),
        mean_overload_entries: ov as f64 / n,
        mean_offloads: off as f64 / n,
        costs,
    })
}

/// Exact discounted value of a policy under the simulator's dynamics.
pub fn exact_value(policy: &Policy, model: &Model, lambda: f64) -> Result<ValueTable> {
    policy_evaluation(&policy.to_table(&model.params), lambda, model, PlanningKernel::Simulator)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: u64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Per-step median and quartiles across sample paths. Every curve must share the same steps.
pub fn aggregate_curves(curves: &[Vec<(u64, f64)>]) -> Result<Vec<CurvePoint>> {
    let Some(first) = curves.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(first.len());
    for (i, (step, _)) in first.iter().enumerate() {
        let mut values = Vec::with_capacity(curves.len());
        for c in curves {
            match c.get(i) {
                Some((st, v)) if st == step => values.push(*v),
                _ => return Err(Error::config("curves", format!("sample paths disagree at step {step}"))),
            }
        }
        let s = sorted(&values);
        out.push(CurvePoint {
            step: *step,
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
        });
    }
    Ok(out)
}

/// Pre-drawn event and resource uniforms shared by every policy in a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct EventTrace {
    pub seed: u64,
    pub event_u: Vec<f64>,
    pub resource_u: Vec<f64>,
}

impl EventTrace {
    pub fn generate(seed: u64, len: usize) -> Self {
        let tree = SeedTree::new(seed).child(TRACE, 0);
        let mut ev = tree.stream("event_u");
        let mut rs = tree.stream("resource_u");
        Self {
            seed,
            event_u: (0..len).map(|_| ev.gen()).collect(),
            resource_u: (0..len).map(|_| rs.gen()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.event_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.event_u.is_empty()
    }
}

/// Arrival rate at every step of a scenario run.
pub fn rate_trajectory(config: &ScenarioConfig, seed: SeedTree, len: usize) -> Result<Vec<f64>> {
    let mut sc = ScenarioState::new(config.clone(), seed)?;
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        out.push(sc.aggregate_rate());
        sc.advance();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySeries {
    pub name: String,
    pub windows: Vec<MetricsWindow>,
}

impl PolicySeries {
    pub fn total(&self) -> MetricsWindow {
        let mut t = MetricsWindow::default();
        for w in &self.windows {
            t.steps += w.steps;
            t.undiscounted_cost += w.undiscounted_cost;
            t.overload_entries += w.overload_entries;
            t.offloads += w.offloads;
            t.arrivals += w.arrivals;
        }
        t
    }
}

/// Runs every policy over the same uniforms and the same arrival-rate path.
/// An arrival occurs at step `t` iff `z_t ≤ λ_t / (λ_t + min(x_t, k)·μ)`.
#[allow(clippy::too_many_arguments)]
pub fn behavioral_compare(
    policies: &[(String, Policy)],
    model: &Model,
    rates: &[f64],
    trace: &EventTrace,
    window: usize,
    beta: f64,
    x0: State,
    overload_level: usize,
) -> Result<Vec<PolicySeries>> {
    if rates.len() < trace.len() {
        return Err(Error::config("trace", "rate path shorter than event trace"));
    }
    let window = window.max(1);
    let p = &model.params;
    let mut out = Vec::with_capacity(policies.len());
    for (name, policy) in policies {
        let mut windows = Vec::with_capacity(trace.len() / window + 1);
        let mut current = MetricsWindow::default();
        let mut discount = 1.0;
        let mut s = x0;
        for t in 0..trace.len() {
            let a = policy.decide(s, p);
            let tr = step_with_draws(s, a, rates[t], p, &model.costs, &model.resources, trace.event_u[t], trace.resource_u[t])?;
            account(&mut current, s, tr.event, tr.action, tr.next, tr.cost, discount, overload_level);
            discount *= beta;
            s = tr.next;
            if current.steps == window {
                current.index = windows.len();
                windows.push(current);
                current = MetricsWindow::default();
                discount = 1.0;
            }
        }
        if current.steps > 0 {
            current.index = windows.len();
            windows.push(current);
        }
        out.push(PolicySeries {
            name: name.clone(),
            windows,
        });
    }
    Ok(out)
}
