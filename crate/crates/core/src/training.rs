//! Arrival-gated training loop shared by the learners.
//!
//! Learning happens only at arrival epochs. The transition seen by the critic
//! runs from one arrival to the next: departures in between advance the state
//! and contribute their discounted cost, and the discount of the transition is
//! `β^m` for `m` uniformized steps.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{step_with_draws, Action, Event, Model, State};
use crate::rng::{SeedTree, StepRngs};
use crate::scenario::ScenarioState;
use rand::Rng;

/// Critic sample between two consecutive arrival epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochTransition {
    pub state: State,
    pub action: Action,
    /// `Σ_j β^j c_j` over the steps from `state` until the next arrival.
    pub cost: f64,
    /// `β^m` where `m` is the number of steps taken.
    pub discount: f64,
    pub next: State,
}

pub trait ArrivalLearner {
    /// Behavior action at an arrival with `x < X`.
    fn choose(&mut self, s: State) -> Action;
    /// Critic update for a completed arrival-to-arrival transition.
    fn learn(&mut self, tr: &EpochTransition);
    /// Actor update at an arrival with `x < X`; returns the gradient estimate if any.
    fn improve(&mut self, _s: State) -> Option<f64> {
        None
    }
    /// Called before every step with the step index and the horizon.
    fn begin_step(&mut self, _t: u64, _horizon: u64) {}
    fn policy_hash(&self) -> u64;
}

/// Summary of one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Evaluation hook: receives a policy snapshot and the current arrival rate.
pub type Evaluator<'a, P> = dyn FnMut(&P, f64) -> Result<Option<EvalStats>> + 'a;

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub step: u64,
    pub policy_hash: String,
    pub lambda: f64,
    pub n_users: usize,
    pub eval_mean: Option<f64>,
    pub eval_q1: Option<f64>,
    pub eval_median: Option<f64>,
    pub eval_q3: Option<f64>,
    /// Mean `|gradient estimate|` over the actor updates since the previous row.
    pub window_abs_gradient: Option<f64>,
    /// Signed mean of the same estimates.
    pub window_mean_gradient: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopConfig {
    pub horizon: u64,
    /// A row is logged at step 0, every `log_every` steps and at the horizon.
    pub log_every: u64,
}

pub fn hash_bytes(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn hash_f64s(values: &[f64]) -> u64 {
    hash_bytes(values.iter().flat_map(|v| v.to_bits().to_le_bytes()))
}

pub fn hash_actions(actions: &[Action]) -> u64 {
    hash_bytes(actions.iter().map(|a| a.code() as u8))
}

struct Pending {
    state: State,
    action: Action,
    cost: f64,
    discount: f64,
}

/// Runs `cfg.horizon` uniformized steps from `(0, 0)`, advancing the scenario
/// after every step and recomputing `δ` from its current aggregate rate.
pub fn run_arrival_loop<L: ArrivalLearner>(
    learner: &mut L,
    scenario: &mut ScenarioState,
    model: &Model,
    seed: &SeedTree,
    cfg: &LoopConfig,
    evaluate: &mut dyn FnMut(&L, f64) -> Result<Option<EvalStats>>,
) -> Result<Vec<TrainingRow>> {
    let params = &model.params;
    let beta = model.beta();
    let every = cfg.log_every.max(1);
    let mut rngs = StepRngs::from_tree(seed);
    let mut s = State::new(0, 0);
    let mut pending: Option<Pending> = None;
    let mut grad_abs = 0.0;
    let mut grad_sum = 0.0;
    let mut grad_count = 0u64;
    let mut log = Vec::with_capacity((cfg.horizon / every + 2) as usize);

    let mut record = |t: u64, learner: &L, scenario: &ScenarioState, grads: (&mut f64, &mut f64, &mut u64)| -> Result<()> {
        let (grad_abs, grad_sum, grad_count) = grads;
        let lambda = scenario.aggregate_rate();
        let stats = evaluate(learner, lambda)?;
        log.push(TrainingRow {
            step: t,
            policy_hash: format!("{:016x}", learner.policy_hash()),
            lambda,
            n_users: scenario.n_users(),
            eval_mean: stats.map(|e| e.mean),
            eval_q1: stats.map(|e| e.q1),
            eval_median: stats.map(|e| e.median),
            eval_q3: stats.map(|e| e.q3),
            window_abs_gradient: (*grad_count > 0).then(|| *grad_abs / *grad_count as f64),
            window_mean_gradient: (*grad_count > 0).then(|| *grad_sum / *grad_count as f64),
        });
        *grad_abs = 0.0;
        *grad_sum = 0.0;
        *grad_count = 0;
        Ok(())
    };

    record(0, learner, scenario, (&mut grad_abs, &mut grad_sum, &mut grad_count))?;
    for t in 0..cfg.horizon {
        learner.begin_step(t, cfg.horizon);
        let lambda = scenario.aggregate_rate();
        let d = model.delta(s.x, lambda)?;
        let event_u: f64 = rngs.events.gen();
        let resource_u: f64 = rngs.resources.gen();
        let arrival = event_u <= d;
        let action = if arrival {
            if let Some(p) = pending.take() {
                learner.learn(&EpochTransition {
                    state: p.state,
                    action: p.action,
                    cost: p.cost,
                    discount: p.discount,
                    next: s,
                });
            }
            if s.x < params.buffer_capacity {
                learner.choose(s)
            } else {
                Action::Offload
            }
        } else {
            Action::Accept
        };
        let tr = step_with_draws(s, action, lambda, params, &model.costs, &model.resources, event_u, resource_u)?;
        match tr.event {
            Event::Arrival => {
                pending = Some(Pending {
                    state: s,
                    action,
                    cost: tr.cost,
                    discount: beta,
                });
                if s.x < params.buffer_capacity {
                    if let Some(g) = learner.improve(s) {
                        grad_abs += g.abs();
                        grad_sum += g;
                        grad_count += 1;
                    }
                }
            }
            Event::Departure => {
                if let Some(p) = pending.as_mut() {
                    p.cost += p.discount * tr.cost;
                    p.discount *= beta;
                }
            }
        }
        s = tr.next;
        scenario.advance();
        let done = t + 1;
        if done % every == 0 || done == cfg.horizon {
            record(done, learner, scenario, (&mut grad_abs, &mut grad_sum, &mut grad_count))?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;

    /// Records every critic sample and always accepts.
    struct Recorder {
        samples: Vec<EpochTransition>,
        chosen: Vec<State>,
    }

    impl ArrivalLearner for Recorder {
        fn choose(&mut self, s: State) -> Action {
            self.chosen.push(s);
            Action::Accept
        }
        fn learn(&mut self, tr: &EpochTransition) {
            self.samples.push(*tr);
        }
        fn policy_hash(&self) -> u64 {
            0
        }
    }

    #[test]
    fn epoch_transitions_chain_and_discount() {
        let model = Model::reference();
        let mut sc = ScenarioState::new(ScenarioConfig::default(), SeedTree::new(3)).unwrap();
        let mut rec = Recorder {
            samples: Vec::new(),
            chosen: Vec::new(),
        };
        let cfg = LoopConfig {
            horizon: 5000,
            log_every: 1000,
        };
        let log = run_arrival_loop(&mut rec, &mut sc, &model, &SeedTree::new(3), &cfg, &mut |_, _| Ok(None)).unwrap();
        assert_eq!(log.len(), 6);
        assert_eq!(log.last().unwrap().step, 5000);
        assert!(!rec.samples.is_empty());
        for pair in rec.samples.windows(2) {
            assert_eq!(pair[0].next, pair[1].state);
        }
        for tr in &rec.samples {
            let m = (tr.discount.ln() / 0.95f64.ln()).round();
            assert!(m >= 1.0);
            assert!((tr.discount - 0.95f64.powi(m as i32)).abs() < 1e-12);
        }
    }

    #[test]
    fn log_rows_at_boundaries() {
        let model = Model::reference();
        let mut sc = ScenarioState::new(ScenarioConfig::default(), SeedTree::new(1)).unwrap();
        let mut rec = Recorder {
            samples: Vec::new(),
            chosen: Vec::new(),
        };
        let cfg = LoopConfig {
            horizon: 2500,
            log_every: 1000,
        };
        let log = run_arrival_loop(&mut rec, &mut sc, &model, &SeedTree::new(1), &cfg, &mut |_, _| Ok(None)).unwrap();
        let steps: Vec<u64> = log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 1000, 2000, 2500]);
        assert!(log.iter().all(|r| r.window_abs_gradient.is_none() && r.lambda == 6.0));
    }
}
