//! Reference policies: tabular Q-learning and the static load threshold.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dp::{DeterministicPolicy, QTable};
use crate::error::{Error, Result};
use crate::model::{Action, Model, ModelParams, State};
use crate::rng::{SeedTree, SimRng, EXPLORATION};
use crate::salmut::{critic_update, Schedule};
use crate::scenario::ScenarioState;
use crate::training::{hash_actions, run_arrival_loop, ArrivalLearner, EpochTransition, Evaluator, LoopConfig, TrainingRow};

/// Accepts while the load is below `accept_below` and the buffer has room.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinePolicy {
    pub accept_below: usize,
}

impl Default for BaselinePolicy {
    fn default() -> Self {
        Self { accept_below: 18 }
    }
}

impl BaselinePolicy {
    pub fn validate(&self, params: &ModelParams) -> Result<()> {
        if self.accept_below > params.cpu_levels + 1 {
            return Err(Error::config("learner.accept_below", "must be <= L + 1"));
        }
        Ok(())
    }
}

#[inline]
pub fn baseline_decide(s: State, bp: &BaselinePolicy, params: &ModelParams) -> Action {
    if s.ell < bp.accept_below && s.x < params.buffer_capacity {
        Action::Accept
    } else {
        Action::Offload
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateSpec {
    Constant { value: f64 },
    Decaying { schedule: Schedule },
}

impl RateSpec {
    #[inline]
    pub fn rate(&self, n: u64) -> f64 {
        match self {
            RateSpec::Constant { value } => *value,
            RateSpec::Decaying { schedule } => schedule.rate(n),
        }
    }
}

/// Exploration probability as a function of training progress.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Exploration {
    Constant {
        epsilon: f64,
    },
    /// Linear from `start` to `end` over the first `fraction` of the horizon, then `end`.
    Linear { start: f64, end: f64, fraction: f64 },
}

impl Exploration {
    pub fn epsilon(&self, t: u64, horizon: u64) -> f64 {
        match *self {
            Exploration::Constant { epsilon } => epsilon,
            Exploration::Linear { start, end, fraction } => {
                let span = fraction * horizon as f64;
                if span <= 0.0 {
                    return end;
                }
                let progress = (t as f64 / span).min(1.0);
                start + (end - start) * progress
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QLearningConfig {
    pub rate: RateSpec,
    pub exploration: Exploration,
    /// Training steps; `None` runs for the scenario horizon.
    pub horizon: Option<u64>,
    pub eval_every: u64,
}

impl Default for QLearningConfig {
    fn default() -> Self {
        Self {
            rate: RateSpec::Constant { value: 0.01 },
            exploration: Exploration::Linear {
                start: 1.0,
                end: 0.05,
                fraction: 0.5,
            },
            horizon: None,
            eval_every: 1000,
        }
    }
}

impl QLearningConfig {
    pub fn validate(&self) -> Result<()> {
        match self.rate {
            RateSpec::Constant { value } if !(value > 0.0 && value <= 1.0) => {
                return Err(Error::config("learner.rate.value", "must lie in (0, 1]"));
            }
            RateSpec::Decaying { schedule } if !(schedule.initial > 0.0 && schedule.initial <= 1.0 && schedule.offset > 0.0) => {
                return Err(Error::config("learner.rate.schedule", "initial rate must lie in (0, 1], offset > 0"));
            }
            _ => {}
        }
        let eps = match self.exploration {
            Exploration::Constant { epsilon } => vec![epsilon],
            Exploration::Linear { start, end, fraction } => {
                if !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::config("learner.exploration.fraction", "must lie in [0, 1]"));
                }
                vec![start, end]
            }
        };
        if eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::config("learner.exploration", "epsilon must lie in [0, 1]"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("learner.eval_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// ε-greedy tabular learner over the arrival-epoch chain.
#[derive(Debug, Clone)]
pub struct QLearner {
    pub config: QLearningConfig,
    pub q: QTable,
    params: ModelParams,
    epsilon: f64,
    updates: u64,
    exploration: SimRng,
}

impl QLearner {
    pub fn new(config: QLearningConfig, params: &ModelParams, seed: &SeedTree) -> Result<Self> {
        Self::with_q(config, QTable::zeros(params), params, seed)
    }

    pub fn with_q(config: QLearningConfig, q: QTable, params: &ModelParams, seed: &SeedTree) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            epsilon: config.exploration.epsilon(0, 1),
            config,
            q,
            params: params.clone(),
            updates: 0,
            exploration: seed.stream(EXPLORATION),
        })
    }

    pub fn greedy_policy(&self) -> DeterministicPolicy {
        self.q.greedy_policy(&self.params)
    }
}

impl ArrivalLearner for QLearner {
    fn begin_step(&mut self, t: u64, horizon: u64) {
        self.epsilon = self.config.exploration.epsilon(t, horizon);
    }

    fn choose(&mut self, s: State) -> Action {
        if self.exploration.gen::<f64>() < self.epsilon {
            if self.exploration.gen::<bool>() {
                Action::Accept
            } else {
                Action::Offload
            }
        } else {
            self.q.greedy(s, &self.params)
        }
    }

    fn learn(&mut self, tr: &EpochTransition) {
        let rate = self.config.rate.rate(self.updates);
        critic_update(&mut self.q, tr.state, tr.action, tr.cost, tr.next, rate, tr.discount, &self.params);
        self.updates += 1;
    }

    fn policy_hash(&self) -> u64 {
        hash_actions(self.greedy_policy().as_slice())
    }
}

#[derive(Debug, Clone)]
pub struct QLearningOutcome {
    pub q: QTable,
    pub policy: DeterministicPolicy,
    pub log: Vec<TrainingRow>,
    pub steps: u64,
}

pub fn qlearning_train(
    scenario: &mut ScenarioState,
    model: &Model,
    config: &QLearningConfig,
    seed: SeedTree,
    evaluate: Option<&mut Evaluator<'_, QTable>>,
) -> Result<QLearningOutcome> {
    let mut learner = QLearner::new(config.clone(), &model.params, &seed)?;
    let horizon = config.horizon.unwrap_or_else(|| scenario.config().horizon());
    let loop_cfg = LoopConfig {
        horizon,
        log_every: config.eval_every,
    };
    let log = match evaluate {
        Some(f) => run_arrival_loop(&mut learner, scenario, model, &seed, &loop_cfg, &mut |l: &QLearner, lambda| f(&l.q, lambda))?,
        None => run_arrival_loop(&mut learner, scenario, model, &seed, &loop_cfg, &mut |_: &QLearner, _| Ok(None))?,
    };
    let policy = learner.greedy_policy();
    Ok(QLearningOutcome {
        q: learner.q,
        policy,
        log,
        steps: horizon,
    })
}
