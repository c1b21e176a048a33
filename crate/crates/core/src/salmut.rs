//! Two-timescale threshold learning: a TD critic over `Q` and a projected
//! gradient actor over the sigmoid-relaxed threshold vector `τ`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{QTable, ValueTable};
use crate::error::{Error, Result};
use crate::model::{Action, Model, ModelParams, State};
use crate::rng::{SeedTree, SimRng, EXPLORATION, INIT};
use crate::scenario::ScenarioState;
use crate::training::{run_arrival_loop, ArrivalLearner, EpochTransition, Evaluator, LoopConfig, TrainingRow};

/// Per-queue-length thresholds `τ(x) ∈ [0, L]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector {
    tau: Vec<f64>,
    upper: f64,
}

impl ThresholdVector {
    pub fn new(tau: Vec<f64>, cpu_levels: usize) -> Result<Self> {
        let upper = cpu_levels as f64;
        if let Some(bad) = tau.iter().find(|t| !(0.0..=upper).contains(*t)) {
            return Err(Error::config("tau", format!("threshold {bad} outside [0, {upper}]")));
        }
        Ok(Self { tau, upper })
    }

    pub fn constant(value: f64, params: &ModelParams) -> Result<Self> {
        Self::new(vec![value; params.rows()], params.cpu_levels)
    }

    pub fn uniform(rng: &mut SimRng, params: &ModelParams) -> Self {
        let upper = params.cpu_levels as f64;
        let tau = (0..params.rows()).map(|_| rng.gen::<f64>() * upper).collect();
        Self { tau, upper }
    }

    pub fn len(&self) -> usize {
        self.tau.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    #[inline]
    pub fn get(&self, x: usize) -> f64 {
        self.tau[x]
    }

    /// Sets `τ(x)` to `value` clipped to `[0, L]`.
    #[inline]
    pub fn set_projected(&mut self, x: usize, value: f64) {
        self.tau[x] = value.clamp(0.0, self.upper);
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.tau
    }

    /// Deterministic rounding used at evaluation: accept iff `ℓ ≤ ⌊τ(x)⌋` and `x < X`.
    #[inline]
    pub fn greedy_action(&self, s: State, params: &ModelParams) -> Action {
        if s.x < params.buffer_capacity && (s.ell as f64) <= self.tau[s.x].floor() {
            Action::Accept
        } else {
            Action::Offload
        }
    }

    /// Integer cutoffs `⌊τ(x)⌋`.
    pub fn rounded(&self) -> Vec<usize> {
        self.tau.iter().map(|t| t.floor() as usize).collect()
    }
}

#[inline]
fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid acceptance probability `f(τ(x), ℓ) = σ((τ(x) − ℓ)/T)`.
///
/// At a full buffer the simulator overrides the sampled action with `Offload`.
#[inline]
pub fn accept_probability(tau: &ThresholdVector, s: State, temperature: f64) -> f64 {
    logistic((tau.get(s.x) - s.ell as f64) / temperature)
}

/// `∂f/∂τ(x) = f(1 − f)/T`, evaluated as `e^{−|z|} / (1 + e^{−|z|})² / T`.
#[inline]
pub fn f_gradient(tau: &ThresholdVector, s: State, temperature: f64) -> f64 {
    let z = (tau.get(s.x) - s.ell as f64) / temperature;
    let e = (-z.abs()).exp();
    e / ((1.0 + e) * (1.0 + e)) / temperature
}

/// Per-visit gradient term `ΔQ(x, ℓ)·∇f(τ(x), ℓ)` with `ΔQ = Q(·, Accept) − Q(·, Offload)`.
#[inline]
pub fn gradient_estimate(q: &QTable, s: State, tau: &ThresholdVector, temperature: f64) -> f64 {
    (q.get(s, Action::Accept) - q.get(s, Action::Offload)) * f_gradient(tau, s, temperature)
}

/// Draws the training action: `Accept` with probability `f`, forced `Offload` at a full buffer.
pub fn sample_action(tau: &ThresholdVector, s: State, temperature: f64, params: &ModelParams, rng: &mut SimRng) -> Action {
    if s.x >= params.buffer_capacity {
        return Action::Offload;
    }
    if rng.gen::<f64>() < accept_probability(tau, s, temperature) {
        Action::Accept
    } else {
        Action::Offload
    }
}

/// `cost + discount·min_a' Q(s', a') − Q(s, a)`.
#[inline]
pub fn td_error(q: &QTable, s: State, a: Action, cost: f64, next: State, discount: f64, params: &ModelParams) -> f64 {
    cost + discount * q.value(next, params) - q.get(s, a)
}

/// TD(0) step on the visited cell. Returns the TD error.
#[allow(clippy::too_many_arguments)]
pub fn critic_update(
    q: &mut QTable,
    s: State,
    a: Action,
    cost: f64,
    next: State,
    rate: f64,
    discount: f64,
    params: &ModelParams,
) -> f64 {
    let td = td_error(q, s, a, cost, next, discount, params);
    *q.get_mut(s, a) += rate * td;
    td
}

/// Projected threshold step at `s`. Descends the cost gradient unless
/// `literal_sign` is set, in which case the step is added. Returns the change
/// applied to `τ(x)`.
pub fn actor_update(tau: &mut ThresholdVector, s: State, q: &QTable, rate: f64, temperature: f64, literal_sign: bool) -> f64 {
    let g = gradient_estimate(q, s, tau, temperature);
    apply_actor_step(tau, s.x, rate * g, literal_sign)
}

fn apply_actor_step(tau: &mut ThresholdVector, x: usize, step: f64, literal_sign: bool) -> f64 {
    let before = tau.get(x);
    let target = if literal_sign { before + step } else { before - step };
    tau.set_projected(x, target);
    tau.get(x) - before
}

/// Robbins–Monro schedule `b(n) = b₀ / (1 + n/n₀)^κ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub initial: f64,
    pub offset: f64,
    pub exponent: f64,
}

impl Schedule {
    #[inline]
    pub fn rate(&self, n: u64) -> f64 {
        self.initial / (1.0 + n as f64 / self.offset).powf(self.exponent)
    }

    fn validate(&self, field: &str) -> Result<()> {
        if !(self.initial > 0.0 && self.initial <= 1.0) {
            return Err(Error::config(format!("{field}.initial"), "must lie in (0, 1]"));
        }
        if !(self.offset > 0.0 && self.offset.is_finite()) {
            return Err(Error::config(format!("{field}.offset"), "must be positive"));
        }
        if !(self.exponent > 0.5 && self.exponent <= 1.0) {
            return Err(Error::config(
                format!("{field}.exponent"),
                "needs 0.5 < κ <= 1 so that Σb diverges and Σb² converges",
            ));
        }
        Ok(())
    }
}

/// Per-coordinate adaptive moment estimates, advanced only when a coordinate is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveMoments {
    first: Vec<f64>,
    second: Vec<f64>,
    count: Vec<u32>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdaptiveMoments {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
            count: vec![0; n],
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Bias-corrected direction `m̂ / (√v̂ + ε)` after folding in gradient `g`.
    pub fn direction(&mut self, i: usize, g: f64) -> f64 {
        self.count[i] = self.count[i].saturating_add(1);
        let t = self.count[i].min(i32::MAX as u32) as i32;
        self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * g;
        self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * g * g;
        let m = self.first[i] / (1.0 - self.beta1.powi(t));
        let v = self.second[i] / (1.0 - self.beta2.powi(t));
        m / (v.sqrt() + self.epsilon)
    }

    pub fn is_finite(&self) -> bool {
        self.first.iter().chain(&self.second).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptiveRates {
    pub critic_rate: f64,
    pub actor_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdaptiveRates {
    fn default() -> Self {
        Self {
            critic_rate: 0.03,
            actor_rate: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecayingRates {
    pub critic: Schedule,
    pub actor: Schedule,
}

impl Default for DecayingRates {
    fn default() -> Self {
        Self {
            critic: Schedule {
                initial: 0.5,
                offset: 1000.0,
                exponent: 0.6,
            },
            actor: Schedule {
                initial: 0.05,
                offset: 1000.0,
                exponent: 0.9,
            },
        }
    }
}

/// Step-size regime of both timescales.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RateMode {
    /// Constant base rates scaled by adaptive moment estimates.
    Adaptive(AdaptiveRates),
    /// Decaying schedules satisfying the two-timescale conditions.
    Decaying(DecayingRates),
}

impl Default for RateMode {
    fn default() -> Self {
        RateMode::Adaptive(AdaptiveRates::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialTau {
    #[default]
    Uniform,
    Constant {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SalmutConfig {
    pub temperature: f64,
    pub rates: RateMode,
    pub initial_tau: InitialTau,
    /// Training steps; `None` runs for the scenario horizon.
    pub horizon: Option<u64>,
    pub eval_every: u64,
    pub paper_literal_sign: bool,
}

impl Default for SalmutConfig {
    fn default() -> Self {
        Self {
            temperature: 0.3,
            rates: RateMode::default(),
            initial_tau: InitialTau::Uniform,
            horizon: None,
            eval_every: 1000,
            paper_literal_sign: false,
        }
    }
}

impl SalmutConfig {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("learner.temperature", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("learner.eval_every", "must be >= 1"));
        }
        match self.rates {
            RateMode::Adaptive(r) => {
                for (field, rate) in [("learner.rates.critic_rate", r.critic_rate), ("learner.rates.actor_rate", r.actor_rate)] {
                    if !(rate > 0.0 && rate <= 1.0) {
                        return Err(Error::config(field, "must lie in (0, 1]"));
                    }
                }
                if !((0.0..1.0).contains(&r.beta1) && (0.0..1.0).contains(&r.beta2)) {
                    return Err(Error::config("learner.rates.beta1", "moment decays must lie in [0, 1)"));
                }
                if !(r.epsilon > 0.0) {
                    return Err(Error::config("learner.rates.epsilon", "must be positive"));
                }
            }
            RateMode::Decaying(r) => {
                r.critic.validate("learner.rates.critic")?;
                r.actor.validate("learner.rates.actor")?;
                if !(r.critic.exponent < r.actor.exponent) {
                    return Err(Error::config(
                        "learner.rates.actor.exponent",
                        "actor must decay faster than critic (κ_critic < κ_actor)",
                    ));
                }
            }
        }
        if let InitialTau::Constant { value } = self.initial_tau {
            if !(0.0..=params.cpu_levels as f64).contains(&value) {
                return Err(Error::config("learner.initial_tau.value", "must lie in [0, L]"));
            }
        }
        Ok(())
    }
}

/// Learner state: thresholds, critic, optimizer moments and the update counter.
#[derive(Debug, Clone)]
pub struct Salmut {
    pub config: SalmutConfig,
    pub tau: ThresholdVector,
    pub q: QTable,
    params: ModelParams,
    critic_moments: Option<AdaptiveMoments>,
    actor_moments: Option<AdaptiveMoments>,
    updates: u64,
    exploration: SimRng,
}

impl Salmut {
    pub fn new(config: SalmutConfig, params: &ModelParams, seed: &SeedTree) -> Result<Self> {
        config.validate(params)?;
        let tau = match config.initial_tau {
            InitialTau::Uniform => ThresholdVector::uniform(&mut seed.stream(INIT), params),
            InitialTau::Constant { value } => ThresholdVector::constant(value, params)?,
        };
        let (critic_moments, actor_moments) = match config.rates {
            RateMode::Adaptive(r) => (
                Some(AdaptiveMoments::new(2 * params.n_states(), r.beta1, r.beta2, r.epsilon)),
                Some(AdaptiveMoments::new(params.rows(), r.beta1, r.beta2, r.epsilon)),
            ),
            RateMode::Decaying(_) => (None, None),
        };
        Ok(Self {
            tau,
            q: QTable::zeros(params),
            params: params.clone(),
            critic_moments,
            actor_moments,
            updates: 0,
            exploration: seed.stream(EXPLORATION),
            config,
        })
    }

    fn critic_rate(&self) -> f64 {
        match self.config.rates {
            RateMode::Adaptive(r) => r.critic_rate,
            RateMode::Decaying(r) => r.critic.rate(self.updates),
        }
    }

    fn actor_rate(&self) -> f64 {
        match self.config.rates {
            RateMode::Adaptive(r) => r.actor_rate,
            RateMode::Decaying(r) => r.actor.rate(self.updates),
        }
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }
}

impl ArrivalLearner for Salmut {
    fn choose(&mut self, s: State) -> Action {
        sample_action(&self.tau, s, self.config.temperature, &self.params, &mut self.exploration)
    }

    fn learn(&mut self, tr: &EpochTransition) {
        let rate = self.critic_rate();
        match self.critic_moments.as_mut() {
            None => {
                critic_update(&mut self.q, tr.state, tr.action, tr.cost, tr.next, rate, tr.discount, &self.params);
            }
            Some(moments) => {
                let td = td_error(&self.q, tr.state, tr.action, tr.cost, tr.next, tr.discount, &self.params);
                let i = 2 * self.q.grid().index_of(tr.state.x, tr.state.ell) + tr.action.code();
                *self.q.get_mut(tr.state, tr.action) -= rate * moments.direction(i, -td);
            }
        }
    }

    fn improve(&mut self, s: State) -> Option<f64> {
        let g = gradient_estimate(&self.q, s, &self.tau, self.config.temperature);
        let rate = self.actor_rate();
        let step = match self.actor_moments.as_mut() {
            None => rate * g,
            Some(moments) => rate * moments.direction(s.x, g),
        };
        apply_actor_step(&mut self.tau, s.x, step, self.config.paper_literal_sign);
        self.updates += 1;
        Some(g)
    }

    fn policy_hash(&self) -> u64 {
        crate::training::hash_f64s(self.tau.as_slice())
    }
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct SalmutOutcome {
    pub tau: ThresholdVector,
    pub q: QTable,
    pub log: Vec<TrainingRow>,
    pub steps: u64,
}

/// Trains from `Q ≡ 0` and the configured initial thresholds.
///
/// `evaluate` is called at every logging point with the current thresholds and
/// the current arrival rate; pass `None` to skip evaluation.
pub fn train(
    scenario: &mut ScenarioState,
    model: &Model,
    config: &SalmutConfig,
    seed: SeedTree,
    evaluate: Option<&mut Evaluator<'_, ThresholdVector>>,
) -> Result<SalmutOutcome> {
    let mut learner = Salmut::new(config.clone(), &model.params, &seed)?;
    let horizon = config.horizon.unwrap_or_else(|| scenario.config().horizon());
    let loop_cfg = LoopConfig {
        horizon,
        log_every: config.eval_every,
    };
    let log = match evaluate {
        Some(f) => run_arrival_loop(&mut learner, scenario, model, &seed, &loop_cfg, &mut |l: &Salmut, lambda| {
            f(&l.tau, lambda)
        })?,
        None => run_arrival_loop(&mut learner, scenario, model, &seed, &loop_cfg, &mut |_: &Salmut, _| Ok(None))?,
    };
    Ok(SalmutOutcome {
        tau: learner.tau,
        q: learner.q,
        log,
        steps: horizon,
    })
}

/// `Σ_s μ(s)·ΔQ(s)·∇f(τ(x), ℓ)` for an occupancy table `μ` over arrival states.
pub fn explicit_gradient_sum(occupancy: &ValueTable, q: &QTable, tau: &ThresholdVector, temperature: f64) -> f64 {
    occupancy
        .iter_states()
        .map(|s| occupancy.at(s) * gradient_estimate(q, s, tau, temperature))
        .sum()
}
