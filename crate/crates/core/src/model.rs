//! States, costs and transition kernels of the uniformized admission chain.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::rng::StepRngs;

/// Structural constants of the edge server and the discounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelParams {
    /// Buffer size `X`; queue length ranges over `0..=X`.
    pub buffer_capacity: usize,
    /// CPU capacity `L`; load ranges over `0..=L`.
    pub cpu_levels: usize,
    /// Number of cores `k`.
    pub cores: usize,
    /// Per-core service rate `μ`.
    pub service_rate: f64,
    /// Discrete-time discount factor `β`.
    pub discount_beta: f64,
    /// Continuous-time discount rate `α` (optional, only cross-checked).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discount_rate: Option<f64>,
    /// Uniformization rate `ν = λ_ref + kμ` (optional, only cross-checked).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniformization_rate: Option<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            buffer_capacity: 20,
            cpu_levels: 20,
            cores: 2,
            service_rate: 3.0,
            discount_beta: 0.95,
            discount_rate: None,
            uniformization_rate: None,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.buffer_capacity < 1 {
            return Err(Error::config("model.buffer_capacity", "must be >= 1"));
        }
        if self.cpu_levels < 1 {
            return Err(Error::config("model.cpu_levels", "must be >= 1"));
        }
        if self.cores < 1 {
            return Err(Error::config("model.cores", "must be >= 1"));
        }
        if !(self.service_rate > 0.0 && self.service_rate.is_finite()) {
            return Err(Error::config("model.service_rate", "must be positive and finite"));
        }
        let beta = self.discount_beta;
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::config("model.discount_beta", "must lie in (0, 1)"));
        }
        if let (Some(alpha), Some(nu)) = (self.discount_rate, self.uniformization_rate) {
            if !(alpha > 0.0 && nu > 0.0) {
                return Err(Error::config(
                    "model.discount_rate",
                    "alpha and nu must both be positive",
                ));
            }
            let implied = nu / (alpha + nu);
            if (implied - beta).abs() > 1e-12 {
                return Err(Error::config(
                    "model.discount_beta",
                    format!("beta={beta} disagrees with nu/(alpha+nu)={implied}"),
                ));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.buffer_capacity + 1
    }

    pub fn cols(&self) -> usize {
        self.cpu_levels + 1
    }

    pub fn n_states(&self) -> usize {
        self.rows() * self.cols()
    }

    pub fn contains(&self, s: State) -> bool {
        s.x <= self.buffer_capacity && s.ell <= self.cpu_levels
    }

    /// Actions the controller may choose at `s`; a full buffer forces offloading.
    pub fn admissible(&self, s: State) -> &'static [Action] {
        if s.x >= self.buffer_capacity {
            &[Action::Offload]
        } else {
            &[Action::Accept, Action::Offload]
        }
    }
}

/// Holding, running and offload-penalty costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModel {
    /// Holding cost `h` per waiting request.
    pub holding: f64,
    /// Running cost `c(ℓ)`, one entry per load level.
    pub running: Vec<f64>,
    /// Offload penalty `p(ℓ)`, one entry per load level.
    pub penalty: Vec<f64>,
}

/// A load level where `c` or `c + p` decreases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityViolation {
    pub table: &'static str,
    pub ell: usize,
    pub value: f64,
    pub next: f64,
}

impl CostModel {
    pub fn new(holding: f64, running: Vec<f64>, penalty: Vec<f64>, cpu_levels: usize) -> Result<Self> {
        let model = Self {
            holding,
            running,
            penalty,
        };
        model.validate(cpu_levels)?;
        Ok(model)
    }

    /// Tables used by the reference experiments: a small reward for moderate
    /// load, a large cost in the overload band, and a steep penalty for
    /// offloading an almost idle server.
    pub fn reference(cpu_levels: usize) -> Self {
        let running = (0..=cpu_levels)
            .map(|ell| match ell {
                0..=5 => 0.0,
                6..=17 => -0.2,
                _ => 10.0,
            })
            .collect();
        let penalty = (0..=cpu_levels)
            .map(|ell| if ell < 3 { 10.0 } else { 1.0 })
            .collect();
        Self {
            holding: 0.12,
            running,
            penalty,
        }
    }

    /// All-zero tables; every policy has zero cost.
    pub fn zero(cpu_levels: usize) -> Self {
        Self {
            holding: 0.0,
            running: vec![0.0; cpu_levels + 1],
            penalty: vec![0.0; cpu_levels + 1],
        }
    }

    pub fn validate(&self, cpu_levels: usize) -> Result<()> {
        let want = cpu_levels + 1;
        if self.running.len() != want {
            return Err(Error::config(
                "costs.running",
                format!("expected {want} entries (L+1), found {}", self.running.len()),
            ));
        }
        if self.penalty.len() != want {
            return Err(Error::config(
                "costs.penalty",
                format!("expected {want} entries (L+1), found {}", self.penalty.len()),
            ));
        }
        if !self.holding.is_finite() {
            return Err(Error::config("costs.holding", "must be finite"));
        }
        if let Some(i) = self.running.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("costs.running[{i}]"), "must be finite"));
        }
        if let Some(i) = self.penalty.iter().position(|v| !v.is_finite()) {
            return Err(Error::config(format!("costs.penalty[{i}]"), "must be finite"));
        }
        Ok(())
    }

    /// Levels where `c(ℓ)` or `c(ℓ) + p(ℓ)` fails to be weakly increasing.
    pub fn monotonicity_violations(&self) -> Vec<MonotonicityViolation> {
        let mut out = Vec::new();
        for ell in 0..self.running.len().saturating_sub(1) {
            let (c0, c1) = (self.running[ell], self.running[ell + 1]);
            if c1 < c0 {
                out.push(MonotonicityViolation {
                    table: "running",
                    ell,
                    value: c0,
                    next: c1,
                });
            }
            let (s0, s1) = (c0 + self.penalty[ell], c1 + self.penalty[ell + 1]);
            if s1 < s0 {
                out.push(MonotonicityViolation {
                    table: "running+penalty",
                    ell,
                    value: s0,
                    next: s1,
                });
            }
        }
        out
    }

    /// Fails with a config error when the tables are not weakly increasing.
    pub fn require_monotone(&self) -> Result<()> {
        match self.monotonicity_violations().first() {
            None => Ok(()),
            Some(v) => Err(Error::config(
                format!("costs.{}", v.table),
                format!("decreases from {} to {} at level {}", v.value, v.next, v.ell),
            )),
        }
    }
}

/// Distribution of CPU levels requested by a single request, `P(r)` for `r = 1..=R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResourceDist {
    /// `pmf[r - 1] = P(r)`.
    pub pmf: Vec<f64>,
}

impl Default for ResourceDist {
    fn default() -> Self {
        Self { pmf: vec![0.6, 0.4] }
    }
}

impl ResourceDist {
    pub fn new(pmf: Vec<f64>) -> Result<Self> {
        let dist = Self { pmf };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pmf.is_empty() {
            return Err(Error::config("resources.pmf", "must have at least one entry"));
        }
        if let Some(i) = self.pmf.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::config(format!("resources.pmf[{i}]"), "must be finite and >= 0"));
        }
        let total: f64 = self.pmf.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config("resources.pmf", format!("sums to {total}, expected 1")));
        }
        Ok(())
    }

    pub fn max_request(&self) -> usize {
        self.pmf.len()
    }

    /// `(r, P(r))` for every `r` with positive mass.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf
            .iter()
            .enumerate()
            .filter(|(_, p)| **p > 0.0)
            .map(|(i, p)| (i + 1, *p))
    }

    /// Inverse-CDF draw from a uniform `u ∈ [0, 1)`.
    pub fn sample_from_uniform(&self, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 1;
        for (r, p) in self.support() {
            acc += p;
            last = r;
            if u < acc {
                return r;
            }
        }
        last
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct State {
    pub x: usize,
    pub ell: usize,
}

impl State {
    pub const fn new(x: usize, ell: usize) -> Self {
        Self { x, ell }
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.ell)
    }
}

/// Admission decision. Serialized as its integer code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    Accept = 0,
    Offload = 1,
}

impl Action {
    pub const ALL: [Action; 2] = [Action::Accept, Action::Offload];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Action> {
        match code {
            0 => Some(Action::Accept),
            1 => Some(Action::Offload),
            _ => None,
        }
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(deserializer)?;
        Action::from_code(code as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid action code {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    Arrival,
    Departure,
}

/// Model parameters, costs and resource distribution bundled together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub params: ModelParams,
    pub costs: CostModel,
    pub resources: ResourceDist,
}

impl Model {
    pub fn new(params: ModelParams, costs: CostModel, resources: ResourceDist) -> Result<Self> {
        params.validate()?;
        costs.validate(params.cpu_levels)?;
        resources.validate()?;
        Ok(Self {
            params,
            costs,
            resources,
        })
    }

    /// Reference server: `X = L = 20`, `k = 2`, `μ = 3`, `β = 0.95`.
    pub fn reference() -> Self {
        let params = ModelParams::default();
        let costs = CostModel::reference(params.cpu_levels);
        Self {
            params,
            costs,
            resources: ResourceDist::default(),
        }
    }

    pub fn beta(&self) -> f64 {
        self.params.discount_beta
    }

    pub fn cost(&self, s: State, a: Action) -> f64 {
        cost(s, a, &self.costs, self.params.cores)
    }

    pub fn delta(&self, x: usize, lambda: f64) -> Result<f64> {
        delta(x, lambda, &self.params)
    }
}

/// Per-step cost `h·[x−k]⁺ + c(ℓ) + p(ℓ)·1{a = Offload}`.
pub fn cost(s: State, a: Action, costs: &CostModel, cores: usize) -> f64 {
    let waiting = s.x.saturating_sub(cores) as f64;
    let base = costs.holding * waiting + costs.running[s.ell];
    match a {
        Action::Accept => base,
        Action::Offload => base + costs.penalty[s.ell],
    }
}

/// Probability that the next uniformized event is an arrival, `λ / (λ + min(x, k)·μ)`.
pub fn delta(x: usize, lambda: f64, params: &ModelParams) -> Result<f64> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::config("lambda", format!("arrival rate must be finite and >= 0, got {lambda}")));
    }
    let service = x.min(params.cores) as f64 * params.service_rate;
    let total = lambda + service;
    if total <= 0.0 {
        return Err(Error::NoEvent { x, lambda });
    }
    Ok(lambda / total)
}

/// Post-arrival state for a request needing `r` CPU levels.
pub fn arrival_target(s: State, a: Action, r: usize, params: &ModelParams) -> State {
    match a {
        Action::Accept => State::new(
            (s.x + 1).min(params.buffer_capacity),
            (s.ell + r).min(params.cpu_levels),
        ),
        Action::Offload => s,
    }
}

/// Post-departure state when `r` CPU levels are released.
pub fn departure_target(s: State, r: usize) -> State {
    State::new(s.x.saturating_sub(1), s.ell.saturating_sub(r))
}

/// Exact one-step distribution of the uniformized chain, merged over clamped
/// outcomes and sorted by state.
pub fn transition_pmf(
    s: State,
    a: Action,
    lambda: f64,
    params: &ModelParams,
    resources: &ResourceDist,
) -> Result<Vec<(State, f64)>> {
    let d = delta(s.x, lambda, params)?;
    let mut out: Vec<(State, f64)> = Vec::with_capacity(2 * resources.max_request());
    let mut push = |target: State, mass: f64| {
        if mass <= 0.0 {
            return;
        }
        match out.iter_mut().find(|(t, _)| *t == target) {
            Some((_, m)) => *m += mass,
            None => out.push((target, mass)),
        }
    };
    for (r, p) in resources.support() {
        push(arrival_target(s, a, r, params), d * p);
        push(departure_target(s, r), (1.0 - d) * p);
    }
    out.sort_by_key(|(t, _)| *t);
    Ok(out)
}

/// Result of one uniformized step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub next: State,
    pub event: Event,
    /// Action actually applied at an arrival (after forced offload), `None` at departures.
    pub action: Option<Action>,
    pub cost: f64,
}

/// One step driven by explicit uniforms: `event_u` selects the event, `resource_u`
/// the resource amount. The arrival action is replaced by `Offload` at a full buffer.
#[allow(clippy::too_many_arguments)]
pub fn step_with_draws(
    s: State,
    action_at_arrival: Action,
    lambda: f64,
    params: &ModelParams,
    costs: &CostModel,
    resources: &ResourceDist,
    event_u: f64,
    resource_u: f64,
) -> Result<Transition> {
    let d = delta(s.x, lambda, params)?;
    let r = resources.sample_from_uniform(resource_u);
    if event_u <= d {
        let a = if s.x >= params.buffer_capacity {
            Action::Offload
        } else {
            action_at_arrival
        };
        Ok(Transition {
            next: arrival_target(s, a, r, params),
            event: Event::Arrival,
            action: Some(a),
            cost: cost(s, a, costs, params.cores),
        })
    } else {
        Ok(Transition {
            next: departure_target(s, r),
            event: Event::Departure,
            action: None,
            cost: cost(s, Action::Accept, costs, params.cores),
        })
    }
}

/// One step of the uniformized chain with draws from the seeded streams.
/// Both streams advance by exactly one draw per step.
pub fn step(
    s: State,
    action_at_arrival: Action,
    lambda: f64,
    model: &Model,
    rngs: &mut StepRngs,
) -> Result<Transition> {
    let event_u: f64 = rngs.events.gen();
    let resource_u: f64 = rngs.resources.gen();
    step_with_draws(
        s,
        action_at_arrival,
        lambda,
        &model.params,
        &model.costs,
        &model.resources,
        event_u,
        resource_u,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn reference() -> Model {
        Model::reference()
    }

    #[test]
    fn reference_cost_examples() {
        let m = reference();
        assert_abs_diff_eq!(m.cost(State::new(0, 0), Action::Accept), 0.0);
        assert_abs_diff_eq!(m.cost(State::new(5, 10), Action::Offload), 1.16, epsilon = 1e-12);
        assert_abs_diff_eq!(m.cost(State::new(2, 19), Action::Accept), 10.0);
        assert_abs_diff_eq!(m.cost(State::new(0, 0), Action::Offload), 10.0);
        assert_abs_diff_eq!(m.cost(State::new(0, 3), Action::Offload), 1.0);
    }

    #[test]
    fn reference_tables_violate_monotonicity() {
        let v = CostModel::reference(20).monotonicity_violations();
        assert!(v.iter().any(|v| v.table == "running" && v.ell == 5));
        assert!(v.iter().any(|v| v.table == "running+penalty" && v.ell == 2));
        assert!(CostModel::reference(20).require_monotone().is_err());
        assert!(CostModel::zero(20).require_monotone().is_ok());
    }

    #[test]
    fn cost_table_length_checked() {
        let err = CostModel::new(0.1, vec![0.0; 20], vec![0.0; 21], 20).unwrap_err();
        assert!(err.to_string().contains("costs.running"), "{err}");
    }

    #[test]
    fn beta_cross_check() {
        let mut p = ModelParams::default();
        p.discount_rate = Some(1.0);
        p.uniformization_rate = Some(19.0);
        assert!(p.validate().is_ok());
        p.uniformization_rate = Some(18.0);
        assert!(p.validate().is_err());
    }

    #[test]
    fn resource_dist_validation() {
        assert!(ResourceDist::new(vec![0.5, 0.4]).is_err());
        assert!(ResourceDist::new(vec![1.2, -0.2]).is_err());
        let d = ResourceDist::default();
        assert_eq!(d.sample_from_uniform(0.0), 1);
        assert_eq!(d.sample_from_uniform(0.59), 1);
        assert_eq!(d.sample_from_uniform(0.6), 2);
        assert_eq!(d.sample_from_uniform(0.999), 2);
    }

    #[test]
    fn delta_examples() {
        let p = ModelParams::default();
        assert_eq!(delta(0, 6.0, &p).unwrap(), 1.0);
        assert_abs_diff_eq!(delta(2, 6.0, &p).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(delta(1, 6.0, &p).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert!(matches!(delta(0, 0.0, &p), Err(Error::NoEvent { .. })));
        assert_eq!(delta(3, 0.0, &p).unwrap(), 0.0);
    }

    #[test]
    fn pmf_examples() {
        let m = reference();
        let pmf = transition_pmf(State::new(0, 0), Action::Accept, 6.0, &m.params, &m.resources).unwrap();
        assert_eq!(pmf, vec![(State::new(1, 1), 0.6), (State::new(1, 2), 0.4)]);
        let pmf = transition_pmf(State::new(0, 0), Action::Offload, 6.0, &m.params, &m.resources).unwrap();
        assert_eq!(pmf, vec![(State::new(0, 0), 1.0)]);
    }

    #[test]
    fn pmf_merges_clamped_mass() {
        let m = reference();
        // At (X, L) accepting clamps both coordinates: all arrival mass lands on (X, L).
        let s = State::new(20, 20);
        let pmf = transition_pmf(s, Action::Accept, 6.0, &m.params, &m.resources).unwrap();
        let d = 6.0 / 12.0;
        let at_corner = pmf.iter().find(|(t, _)| *t == s).unwrap().1;
        assert_abs_diff_eq!(at_corner, d, epsilon = 1e-15);
        // Departure from ℓ = 1 clamps r = 1 and r = 2 to ℓ' = 0.
        let pmf = transition_pmf(State::new(1, 1), Action::Offload, 6.0, &m.params, &m.resources).unwrap();
        let d = 6.0 / 9.0;
        assert_eq!(pmf.len(), 2);
        assert_abs_diff_eq!(pmf[0].1, 1.0 - d, epsilon = 1e-15);
        assert_eq!(pmf[0].0, State::new(0, 0));
    }

    #[test]
    fn step_examples() {
        let m = reference();
        let t = step_with_draws(State::new(0, 0), Action::Accept, 6.0, &m.params, &m.costs, &m.resources, 0.3, 0.1).unwrap();
        assert_eq!(t.next, State::new(1, 1));
        assert_eq!(t.event, Event::Arrival);
        assert_eq!(t.cost, 0.0);

        let t = step_with_draws(State::new(0, 0), Action::Offload, 6.0, &m.params, &m.costs, &m.resources, 0.3, 0.1).unwrap();
        assert_eq!(t.next, State::new(0, 0));
        assert_eq!(t.event, Event::Arrival);
        assert_eq!(t.cost, 10.0);
    }

    #[test]
    fn departure_charges_no_penalty() {
        let m = reference();
        // δ(1) = 2/3, so u = 0.9 is a departure.
        let t = step_with_draws(State::new(1, 4), Action::Offload, 6.0, &m.params, &m.costs, &m.resources, 0.9, 0.7).unwrap();
        assert_eq!(t.event, Event::Departure);
        assert_eq!(t.next, State::new(0, 2));
        assert_eq!(t.action, None);
        assert_eq!(t.cost, m.cost(State::new(1, 4), Action::Accept));
    }

    #[test]
    fn full_buffer_forces_offload() {
        let m = reference();
        let s = State::new(20, 7);
        let t = step_with_draws(s, Action::Accept, 6.0, &m.params, &m.costs, &m.resources, 0.0, 0.0).unwrap();
        assert_eq!(t.action, Some(Action::Offload));
        assert_eq!(t.next, s);
        assert_eq!(t.cost, m.cost(s, Action::Offload));
    }

    #[test]
    fn empirical_event_frequency_matches_delta() {
        let m = reference();
        let mut rngs = StepRngs::from_tree(&SeedTree::new(11));
        let s = State::new(1, 5);
        let n = 100_000;
        let arrivals = (0..n)
            .filter(|_| step(s, Action::Accept, 6.0, &m, &mut rngs).unwrap().event == Event::Arrival)
            .count();
        let d = 2.0 / 3.0;
        let sigma = (d * (1.0 - d) / n as f64).sqrt();
        assert!((arrivals as f64 / n as f64 - d).abs() <= 3.0 * sigma);
    }

    proptest! {
        #[test]
        fn pmf_normalized_and_in_bounds(
            x in 0usize..=20, ell in 0usize..=20, offload in any::<bool>(), lambda in 0.01f64..20.0
        ) {
            let m = reference();
            let a = if offload { Action::Offload } else { Action::Accept };
            let pmf = transition_pmf(State::new(x, ell), a, lambda, &m.params, &m.resources).unwrap();
            let total: f64 = pmf.iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(pmf.iter().all(|(t, p)| m.params.contains(*t) && *p > 0.0));
        }

        #[test]
        fn delta_weakly_decreasing_and_flat_beyond_cores(x in 0usize..20, lambda in 0.01f64..20.0) {
            let p = ModelParams::default();
            let a = delta(x, lambda, &p).unwrap();
            let b = delta(x + 1, lambda, &p).unwrap();
            prop_assert!(b <= a);
            if x >= p.cores {
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn reference_cost_floor(x in 0usize..=20, ell in 0usize..=20, offload in any::<bool>()) {
            let m = reference();
            let a = if offload { Action::Offload } else { Action::Accept };
            prop_assert!(m.cost(State::new(x, ell), a) >= -0.2 - 1e-15);
        }
    }
}
