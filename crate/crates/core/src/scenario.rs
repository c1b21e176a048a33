//! Time-varying traffic: per-user request rates and a changing user population.
//!
//! All change points are defined on a reference horizon of 10⁶ steps and are
//! rescaled by `horizon_scale` for shorter runs. Six scenario kinds are
//! supported:
//!
//! | kind | rates                                    | population          |
//! |------|------------------------------------------|---------------------|
//! | 1    | constant `λ_low`                         | fixed               |
//! | 2    | all users `low → high → low` in thirds   | fixed               |
//! | 3    | per-user random toggling low/high        | fixed               |
//! | 4    | constant `λ_low`                         | leave / stay / add  |
//! | 5    | as 2                                     | leave / stay / add  |
//! | 6    | as 3                                     | leave / stay / add  |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{SeedTree, SimRng, SCENARIO};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Scenario number, 1 through 6.
    pub kind: u8,
    pub n_users: usize,
    pub lambda_low: f64,
    pub lambda_high: f64,
    /// Phase boundaries of the low/high/low schedule as fractions of the horizon.
    pub phase_fractions: [f64; 2],
    pub toggle_period: u64,
    pub toggle_prob: f64,
    pub population_period: u64,
    pub leave_prob: f64,
    pub stay_prob: f64,
    pub add_prob: f64,
    /// Reference horizon on which the periods above are expressed.
    pub base_horizon: u64,
    pub horizon_scale: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            kind: 1,
            n_users: 24,
            lambda_low: 0.25,
            lambda_high: 0.375,
            phase_fractions: [1.0 / 3.0, 2.0 / 3.0],
            toggle_period: 10_000,
            toggle_prob: 0.1,
            population_period: 100_000,
            leave_prob: 0.05,
            stay_prob: 0.9,
            add_prob: 0.05,
            base_horizon: 1_000_000,
            horizon_scale: 1.0,
        }
    }
}

fn scaled(value: u64, scale: f64) -> u64 {
    ((value as f64 * scale).round() as u64).max(1)
}

impl ScenarioConfig {
    pub fn with_kind(kind: u8) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=6).contains(&self.kind) {
            return Err(Error::config("scenario.kind", format!("must be 1..=6, got {}", self.kind)));
        }
        let probs = [
            ("scenario.toggle_prob", self.toggle_prob),
            ("scenario.leave_prob", self.leave_prob),
            ("scenario.stay_prob", self.stay_prob),
            ("scenario.add_prob", self.add_prob),
        ];
        for (field, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, format!("probability {p} outside [0, 1]")));
            }
        }
        let total = self.leave_prob + self.stay_prob + self.add_prob;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("scenario.stay_prob", format!("leave+stay+add = {total}, expected 1")));
        }
        if !(self.lambda_low >= 0.0 && self.lambda_low <= self.lambda_high && self.lambda_high.is_finite()) {
            return Err(Error::config("scenario.lambda_low", "need 0 <= lambda_low <= lambda_high"));
        }
        let [a, b] = self.phase_fractions;
        if !(0.0 <= a && a <= b && b <= 1.0) {
            return Err(Error::config("scenario.phase_fractions", "need 0 <= first <= second <= 1"));
        }
        if !(self.horizon_scale > 0.0 && self.horizon_scale.is_finite()) {
            return Err(Error::config("scenario.horizon_scale", "must be positive"));
        }
        if self.toggle_period == 0 || self.population_period == 0 || self.base_horizon == 0 {
            return Err(Error::config("scenario", "periods and horizon must be positive"));
        }
        Ok(())
    }

    /// Scenario horizon in steps after scaling.
    pub fn horizon(&self) -> u64 {
        scaled(self.base_horizon, self.horizon_scale)
    }

    pub fn scaled_toggle_period(&self) -> u64 {
        scaled(self.toggle_period, self.horizon_scale)
    }

    pub fn scaled_population_period(&self) -> u64 {
        scaled(self.population_period, self.horizon_scale)
    }

    /// Steps at which the low/high/low schedule switches.
    pub fn phase_boundaries(&self) -> [u64; 2] {
        let h = self.horizon() as f64;
        [
            (self.phase_fractions[0] * h).round() as u64,
            (self.phase_fractions[1] * h).round() as u64,
        ]
    }

    fn phased_rates(&self) -> bool {
        matches!(self.kind, 2 | 5)
    }

    fn toggling(&self) -> bool {
        matches!(self.kind, 3 | 6)
    }

    fn varying_population(&self) -> bool {
        self.kind >= 4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DrawPurpose {
    Toggle,
    Population,
}

#[derive(Debug, Clone)]
pub struct User {
    pub id: u64,
    pub high: bool,
    rng: SimRng,
}

/// Evolving user population and aggregate arrival rate.
#[derive(Debug, Clone)]
pub struct ScenarioState {
    config: ScenarioConfig,
    tree: SeedTree,
    users: Vec<User>,
    next_id: u64,
    step: u64,
    aggregate: f64,
}

impl ScenarioState {
    pub fn new(config: ScenarioConfig, seed: SeedTree) -> Result<Self> {
        config.validate()?;
        let tree = seed.child(SCENARIO, 0);
        let mut state = Self {
            tree,
            users: Vec::with_capacity(config.n_users),
            next_id: 0,
            step: 0,
            aggregate: 0.0,
            config,
        };
        for _ in 0..state.config.n_users {
            let mut user = state.spawn(false);
            if state.config.toggling() {
                user.high = user.rng.gen::<f64>() < 0.5;
            }
            state.users.push(user);
        }
        state.recompute();
        Ok(state)
    }

    fn spawn(&mut self, high: bool) -> User {
        let id = self.next_id;
        self.next_id += 1;
        User {
            id,
            high,
            rng: self.tree.indexed("user", id),
        }
    }

    fn recompute(&mut self) {
        let (lo, hi) = (self.config.lambda_low, self.config.lambda_high);
        self.aggregate = self.users.iter().map(|u| if u.high { hi } else { lo }).sum();
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn users(&self) -> &[User] {
        &self.users
    }

    /// Sum of the active users' current rates.
    pub fn aggregate_rate(&self) -> f64 {
        self.aggregate
    }

    /// Advance one step using each user's own random stream.
    pub fn advance(&mut self) {
        self.advance_inner(None);
    }

    /// Advance one step with externally supplied uniforms, for forced traces.
    pub fn advance_with(&mut self, draw: &mut dyn FnMut(u64, DrawPurpose) -> f64) {
        self.advance_inner(Some(draw));
    }

    fn advance_inner(&mut self, mut draw: Option<&mut dyn FnMut(u64, DrawPurpose) -> f64>) {
        self.step += 1;
        let t = self.step;
        let mut changed = false;

        if self.config.phased_rates() {
            let [b1, b2] = self.config.phase_boundaries();
            if t == b1 || t == b2 {
                let high = t == b1 && b1 < b2;
                for u in &mut self.users {
                    u.high = high;
                }
                changed = true;
            }
        }

        if self.config.toggling() && t % self.config.scaled_toggle_period() == 0 {
            let p = self.config.toggle_prob;
            for u in &mut self.users {
                let z = match draw.as_mut() {
                    Some(f) => f(u.id, DrawPurpose::Toggle),
                    None => u.rng.gen(),
                };
                if z < p {
                    u.high = !u.high;
                }
            }
            changed = true;
        }

        if self.config.varying_population() && t % self.config.scaled_population_period() == 0 {
            let leave = self.config.leave_prob;
            let stay = leave + self.config.stay_prob;
            let current = std::mem::take(&mut self.users);
            let mut next = Vec::with_capacity(current.len() + 4);
            for mut u in current {
                let z = match draw.as_mut() {
                    Some(f) => f(u.id, DrawPurpose::Population),
                    None => u.rng.gen(),
                };
                if z < leave {
                    continue;
                }
                let high = u.high;
                next.push(u);
                if z >= stay {
                    let child = self.spawn(high);
                    next.push(child);
                }
            }
            self.users = next;
            changed = true;
        }

        if changed {
            self.recompute();
        }
    }
}

/// One row of an exported rate trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: u64,
    pub lambda: f64,
    pub n_users: usize,
}

/// `(step, λ, N)` sampled every `every` steps over `steps` steps, starting at step 0.
pub fn trajectory(config: &ScenarioConfig, seed: SeedTree, steps: u64, every: u64) -> Result<Vec<TrajectoryPoint>> {
    let every = every.max(1);
    let mut state = ScenarioState::new(config.clone(), seed)?;
    let mut out = Vec::with_capacity((steps / every + 1) as usize);
    for t in 0..steps {
        if t % every == 0 {
            out.push(TrajectoryPoint {
                step: t,
                lambda: state.aggregate_rate(),
                n_users: state.n_users(),
            });
        }
        state.advance();
    }
    Ok(out)
}
