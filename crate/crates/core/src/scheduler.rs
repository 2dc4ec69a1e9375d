//! Coordination of the per-layer CMA-ES optimizers.
//!
//! Three strategies share one sample / evaluate / report loop:
//!
//! * divide-and-conquer: one active layer per iteration (round robin), the
//!   others frozen at their best-seen solution;
//! * all-in-time: every layer samples and updates every iteration;
//! * rolling: each optimizer cycles Unstable -> Testing -> Stable -> Unstable.
//!   Unstable optimizers re-evaluate shuffled candidates against changing
//!   partners, Testing optimizers re-evaluate their best half twice and update,
//!   Stable optimizers hold their best solution fixed.
//!
//! Every iteration zips the per-layer candidate lists into `m` groups through
//! independent random permutations and evaluates each group once.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cmaes::{CmaesOptimizer, EvaluatedSolution};
use crate::error::{check_len, Error, Result};
use crate::rng::RngStream;

/// Scores one group: a list of intrinsic vectors in layer order.
pub trait GroupObjective: Sync {
    fn evaluate(&self, group: &[Vec<f64>]) -> Result<f64>;
}

impl<F> GroupObjective for F
where
    F: Fn(&[Vec<f64>]) -> Result<f64> + Sync,
{
    fn evaluate(&self, group: &[Vec<f64>]) -> Result<f64> {
        self(group)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    DivideAndConquer,
    AllInTime,
    Rolling,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [
        StrategyKind::DivideAndConquer,
        StrategyKind::AllInTime,
        StrategyKind::Rolling,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::DivideAndConquer => "divide-and-conquer",
            StrategyKind::AllInTime => "all-in-time",
            StrategyKind::Rolling => "rolling",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "divide-and-conquer" | "dac" => Ok(StrategyKind::DivideAndConquer),
            "all-in-time" | "ait" => Ok(StrategyKind::AllInTime),
            "rolling" => Ok(StrategyKind::Rolling),
            other => Err(Error::config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What a Testing optimizer passes to `tell`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestingPayload {
    /// `m/2` distinct candidates, each with its averaged error.
    #[default]
    Deduplicated,
    /// All `m` entries as evaluated, duplicates included.
    Duplicates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub layers: usize,
    pub dim: usize,
    pub population: usize,
    pub sigma0: f64,
    pub strategy: StrategyKind,
    /// Rolling state counts `(N_u, N_t, N_s)`; ignored by other strategies.
    pub counts: Option<(usize, usize, usize)>,
    #[serde(default)]
    pub testing_payload: TestingPayload,
    #[serde(default)]
    pub initial_mean: Option<Vec<f64>>,
}

impl SchedulerConfig {
    pub fn new(layers: usize, dim: usize, population: usize, sigma0: f64, strategy: StrategyKind) -> Self {
        Self {
            layers,
            dim,
            population,
            sigma0,
            strategy,
            counts: None,
            testing_payload: TestingPayload::default(),
            initial_mean: None,
        }
    }

    pub fn with_counts(mut self, unstable: usize, testing: usize, stable: usize) -> Self {
        self.counts = Some((unstable, testing, stable));
        self
    }

    /// `(L/2, L/3, rest)` rounded so the counts sum to `L` and stay ordered.
    pub fn default_counts(layers: usize) -> (usize, usize, usize) {
        let testing = (layers / 3).max(1).min(layers / 2);
        let stable = (layers / 6).min(testing);
        let unstable = layers - testing - stable;
        (unstable, testing, stable)
    }

    pub fn rolling_counts(&self) -> (usize, usize, usize) {
        self.counts.unwrap_or_else(|| Self::default_counts(self.layers))
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::config("at least one layer is required"));
        }
        if self.dim == 0 {
            return Err(Error::config("intrinsic dimension must be >= 1"));
        }
        if self.population < 4 {
            return Err(Error::config(format!(
                "population must be >= 4, got {}",
                self.population
            )));
        }
        if !(self.sigma0.is_finite() && self.sigma0 > 0.0) {
            return Err(Error::config("sigma0 must be positive"));
        }
        if let Some(m) = &self.initial_mean {
            check_len("initial mean", self.dim, m.len())?;
        }
        if self.strategy == StrategyKind::Rolling {
            let (u, t, s) = self.rolling_counts();
            if u + t + s != self.layers {
                return Err(Error::config(format!(
                    "state counts {u}/{t}/{s} must sum to L = {}",
                    self.layers
                )));
            }
            if !(u >= t && t >= s) {
                return Err(Error::config(format!(
                    "state counts must satisfy N_u >= N_t >= N_s, got {u}/{t}/{s}"
                )));
            }
            if t == 0 {
                return Err(Error::config("rolling needs N_t >= 1"));
            }
            if self.population % 2 != 0 {
                return Err(Error::config(
                    "rolling needs an even population (Testing re-samples m/2 candidates twice)",
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SlotState {
    Unstable,
    Testing,
    Stable,
}

impl SlotState {
    fn legal_transition(from: SlotState, to: SlotState) -> bool {
        use SlotState::*;
        matches!(
            (from, to),
            (Unstable, Unstable) | (Unstable, Testing) | (Testing, Stable) | (Testing, Unstable) | (Stable, Unstable)
        )
    }
}

/// A candidate vector plus every error observed for it since it was sampled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

impl Candidate {
    fn fresh(values: Vec<f64>) -> Self {
        Self {
            values,
            errors: Vec::new(),
        }
    }

    pub fn mean_error(&self) -> Option<f64> {
        if self.errors.is_empty() {
            None
        } else {
            Some(self.errors.iter().sum::<f64>() / self.errors.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSlot {
    pub layer: usize,
    pub optimizer: CmaesOptimizer,
    pub state: SlotState,
    pub prev_state: Option<SlotState>,
    /// Running threshold; `None` stands for +infinity.
    pub threshold: Option<f64>,
    pub mu_old: Option<Vec<f64>>,
    /// Distinct candidates of the current iteration with their error ledger.
    pub pool: Vec<Candidate>,
    /// `m` entries indexing into `pool`.
    pub pending: Vec<usize>,
    pub tells: usize,
}

impl OptimizerSlot {
    fn fresh_pool(&mut self) {
        self.pool = self.optimizer.ask().into_iter().map(Candidate::fresh).collect();
        self.pending = (0..self.pool.len()).collect();
    }

    fn hold(&mut self, values: Vec<f64>, m: usize) {
        self.pool = vec![Candidate::fresh(values)];
        self.pending = vec![0; m];
    }

    /// Pool index with the lowest mean error; ties to the lower index.
    fn best_index(&self) -> Option<usize> {
        self.pool
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.mean_error().map(|e| (i, e)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .map(|(i, _)| i)
    }

    /// Best-seen solution, or the current mean before the first tell.
    fn anchor(&self) -> Vec<f64> {
        self.optimizer
            .try_best_seen()
            .map(|b| b.candidate.clone())
            .unwrap_or_else(|| self.optimizer.mean().to_vec())
    }

    fn mean_shift(&self) -> f64 {
        match &self.mu_old {
            Some(old) => self
                .optimizer
                .mean()
                .iter()
                .zip(old)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
            None => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub total: usize,
    pub consumed: usize,
}

impl BudgetLedger {
    pub fn remaining(&self) -> usize {
        self.total - self.consumed
    }
}

/// One iteration's groups. `assignment[slot][group]` is the pool index the
/// slot contributed to that group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationPlan {
    pub iteration: usize,
    pub groups: Vec<Vec<Vec<f64>>>,
    pub assignment: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub consumed: usize,
    pub iteration_best: f64,
    pub iteration_mean: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub strategy: StrategyKind,
    pub best_group: Vec<Vec<f64>>,
    pub best_error: f64,
    pub trace: Vec<TraceEntry>,
    pub tell_counts: Vec<usize>,
    pub consumed: usize,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    config: SchedulerConfig,
    slots: Vec<OptimizerSlot>,
    iteration: usize,
    budget: BudgetLedger,
    rng: RngStream,
    outstanding: Option<usize>,
    best: Option<(Vec<Vec<f64>>, f64)>,
    trace: Vec<TraceEntry>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut slots = Vec::with_capacity(config.layers);
        for layer in 0..config.layers {
            let optimizer = CmaesOptimizer::new(
                config.dim,
                config.population,
                config.sigma0,
                config.initial_mean.clone(),
                rng.fork(&format!("cmaes-{layer}")),
            )?;
            slots.push(OptimizerSlot {
                layer,
                optimizer,
                state: SlotState::Unstable,
                prev_state: None,
                threshold: None,
                mu_old: None,
                pool: Vec::new(),
                pending: Vec::new(),
                tells: 0,
            });
        }
        let mut sched = Self {
            config,
            slots,
            iteration: 0,
            budget: BudgetLedger {
                total: 0,
                consumed: 0,
            },
            rng: rng.fork("scheduler"),
            outstanding: None,
            best: None,
            trace: Vec::new(),
        };
        if sched.config.strategy == StrategyKind::Rolling {
            sched.assign_initial_states();
        }
        Ok(sched)
    }

    /// Random initial states with exact counts and slot 0 Unstable.
    fn assign_initial_states(&mut self) {
        let (u, t, s) = self.config.rolling_counts();
        let mut states = Vec::with_capacity(self.config.layers - 1);
        states.extend(std::iter::repeat_n(SlotState::Unstable, u - 1));
        states.extend(std::iter::repeat_n(SlotState::Testing, t));
        states.extend(std::iter::repeat_n(SlotState::Stable, s));
        self.rng.shuffle(&mut states);
        self.slots[0].state = SlotState::Unstable;
        for (slot, st) in self.slots[1..].iter_mut().zip(states) {
            slot.state = st;
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn slots(&self) -> &[OptimizerSlot] {
        &self.slots
    }

    pub fn states(&self) -> Vec<SlotState> {
        self.slots.iter().map(|s| s.state).collect()
    }

    pub fn state_histogram(&self) -> (usize, usize, usize) {
        let mut h = (0, 0, 0);
        for s in &self.slots {
            match s.state {
                SlotState::Unstable => h.0 += 1,
                SlotState::Testing => h.1 += 1,
                SlotState::Stable => h.2 += 1,
            }
        }
        h
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn budget(&self) -> &BudgetLedger {
        &self.budget
    }

    pub fn tell_counts(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.tells).collect()
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn best(&self) -> Option<(&[Vec<f64>], f64)> {
        self.best.as_ref().map(|(g, e)| (g.as_slice(), *e))
    }

    /// Sets the total budget `B` in black-box calls.
    pub fn set_budget(&mut self, total: usize) -> Result<()> {
        if total < self.config.population {
            return Err(Error::config(format!(
                "budget {total} is smaller than one iteration (m = {})",
                self.config.population
            )));
        }
        if total < self.budget.consumed {
            return Err(Error::config(format!(
                "budget {total} is below the {} calls already consumed",
                self.budget.consumed
            )));
        }
        self.budget.total = total;
        Ok(())
    }

    /// Whether another full iteration fits in the budget.
    pub fn can_continue(&self) -> bool {
        self.outstanding.is_none() && self.budget.consumed + self.config.population <= self.budget.total
    }

    pub fn sample_iteration(&mut self) -> Result<IterationPlan> {
        if self.outstanding.is_some() {
            return Err(Error::contract("previous plan has not been reported"));
        }
        if self.budget.consumed + self.config.population > self.budget.total {
            return Err(Error::contract("budget exhausted"));
        }
        let m = self.config.population;
        match self.config.strategy {
            StrategyKind::AllInTime => {
                for slot in &mut self.slots {
                    slot.fresh_pool();
                }
            }
            StrategyKind::DivideAndConquer => {
                let active = self.iteration % self.config.layers;
                for slot in &mut self.slots {
                    if slot.layer == active {
                        slot.fresh_pool();
                    } else {
                        let anchor = slot.anchor();
                        slot.hold(anchor, m);
                    }
                }
            }
            StrategyKind::Rolling => {
                for i in 0..self.slots.len() {
                    self.sample_rolling_slot(i)?;
                }
            }
        }

        let mut assignment = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            check_len("pending candidates", m, slot.pending.len())?;
            let perm = self.rng.permutation(m);
            assignment.push(perm.iter().map(|&k| slot.pending[k]).collect::<Vec<_>>());
        }
        let groups = (0..m)
            .map(|k| {
                self.slots
                    .iter()
                    .zip(&assignment)
                    .map(|(slot, a)| slot.pool[a[k]].values.clone())
                    .collect()
            })
            .collect();
        self.outstanding = Some(self.iteration);
        Ok(IterationPlan {
            iteration: self.iteration,
            groups,
            assignment,
        })
    }

    fn sample_rolling_slot(&mut self, i: usize) -> Result<()> {
        let m = self.config.population;
        let slot = &mut self.slots[i];
        match (slot.state, slot.prev_state) {
            (SlotState::Unstable, Some(SlotState::Unstable)) => {
                slot.pending = self.rng.permutation(slot.pool.len());
            }
            (SlotState::Unstable, _) | (SlotState::Testing, None) => slot.fresh_pool(),
            (SlotState::Testing, Some(SlotState::Unstable)) => {
                let mut ranked: Vec<(usize, f64)> = slot
                    .pool
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (k, c.mean_error().unwrap_or(f64::INFINITY)))
                    .collect();
                ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                let keep: Vec<Candidate> = ranked[..m / 2]
                    .iter()
                    .map(|&(k, _)| slot.pool[k].clone())
                    .collect();
                slot.pool = keep;
                let mut pending: Vec<usize> = (0..m / 2).flat_map(|k| [k, k]).collect();
                self.rng.shuffle(&mut pending);
                slot.pending = pending;
            }
            (SlotState::Stable, Some(SlotState::Testing)) => {
                let best = slot
                    .best_index()
                    .map(|k| slot.pool[k].values.clone())
                    .ok_or_else(|| Error::Invariant(format!("slot {i} entered Stable without observations")))?;
                slot.hold(best, m);
            }
            (SlotState::Stable, None) => {
                let mean = slot.optimizer.mean().to_vec();
                slot.hold(mean, m);
            }
            (state, prev) => {
                return Err(Error::Invariant(format!(
                    "slot {i} reached {state:?} from {prev:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn report_errors(&mut self, plan: &IterationPlan, errors: &[f64]) -> Result<()> {
        if self.outstanding != Some(plan.iteration) || plan.iteration != self.iteration {
            return Err(Error::contract(format!(
                "stale plan for iteration {} (scheduler at {})",
                plan.iteration, self.iteration
            )));
        }
        let m = self.config.population;
        check_len("reported errors", m, errors.len())?;
        if errors.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFinite("reported errors"));
        }

        for (slot, a) in self.slots.iter_mut().zip(&plan.assignment) {
            for (k, &idx) in a.iter().enumerate() {
                slot.pool[idx].errors.push(errors[k]);
            }
        }

        match self.config.strategy {
            StrategyKind::AllInTime => {
                for (slot, a) in self.slots.iter_mut().zip(&plan.assignment) {
                    tell_raw(slot, a, errors)?;
                }
            }
            StrategyKind::DivideAndConquer => {
                let active = self.iteration % self.config.layers;
                let slot = &mut self.slots[active];
                tell_raw(slot, &plan.assignment[active], errors)?;
            }
            StrategyKind::Rolling => self.report_rolling(plan, errors)?,
        }

        self.budget.consumed += m;
        let (best_k, iteration_best) = errors
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .expect("m >= 4");
        if self.best.as_ref().is_none_or(|(_, e)| iteration_best < *e) {
            self.best = Some((plan.groups[best_k].clone(), iteration_best));
        }
        self.trace.push(TraceEntry {
            iteration: self.iteration,
            consumed: self.budget.consumed,
            iteration_best,
            iteration_mean: errors.iter().sum::<f64>() / m as f64,
            best_so_far: self.best.as_ref().map(|b| b.1).unwrap_or(iteration_best),
        });
        self.outstanding = None;
        self.iteration += 1;
        Ok(())
    }

    fn report_rolling(&mut self, plan: &IterationPlan, errors: &[f64]) -> Result<()> {
        let t = self.iteration;
        let (_, n_testing, n_stable) = self.config.rolling_counts();
        let payload = self.config.testing_payload;

        if t > 0 {
            for (slot, a) in self.slots.iter_mut().zip(&plan.assignment) {
                if slot.state != SlotState::Testing {
                    continue;
                }
                let solutions: Vec<EvaluatedSolution> = match payload {
                    TestingPayload::Deduplicated => slot
                        .pool
                        .iter()
                        .filter_map(|c| {
                            c.mean_error()
                                .map(|e| EvaluatedSolution::new(c.values.clone(), e))
                        })
                        .collect(),
                    TestingPayload::Duplicates => a
                        .iter()
                        .zip(errors)
                        .map(|(&idx, &e)| EvaluatedSolution::new(slot.pool[idx].values.clone(), e))
                        .collect(),
                };
                slot.mu_old = Some(slot.optimizer.mean().to_vec());
                slot.optimizer.tell(&solutions)?;
                slot.tells += 1;
            }
        }

        let unstable: Vec<usize> = self.indices_in(SlotState::Unstable);
        let testing: Vec<usize> = self.indices_in(SlotState::Testing);
        let (promote, settle) = if t == 0 {
            (
                self.rng.sample(&unstable, n_testing),
                self.rng.sample(&testing, n_stable),
            )
        } else {
            let mut ranked_u: Vec<(usize, usize, f64)> = unstable
                .iter()
                .map(|&i| {
                    let slot = &self.slots[i];
                    let avgs: Vec<f64> = slot.pool.iter().filter_map(Candidate::mean_error).collect();
                    let above = match slot.threshold {
                        Some(phi) => avgs.iter().filter(|&&e| e >= phi).count(),
                        None => 0,
                    };
                    let mean = avgs.iter().sum::<f64>() / avgs.len().max(1) as f64;
                    (i, above, mean)
                })
                .collect();
            ranked_u.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)));
            let mut ranked_t: Vec<(usize, f64)> = testing
                .iter()
                .map(|&i| (i, self.slots[i].mean_shift()))
                .collect();
            ranked_t.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            (
                ranked_u.iter().take(n_testing).map(|r| r.0).collect::<Vec<_>>(),
                ranked_t.iter().take(n_stable).map(|r| r.0).collect::<Vec<_>>(),
            )
        };

        let mean_error = errors.iter().sum::<f64>() / errors.len() as f64;
        for slot in &mut self.slots {
            let old = slot.state;
            slot.prev_state = Some(old);
            slot.state = SlotState::Unstable;
            match old {
                SlotState::Unstable => {
                    slot.threshold = Some(slot.threshold.map_or(mean_error, |phi| phi.max(mean_error)));
                    if promote.contains(&slot.layer) {
                        slot.state = SlotState::Testing;
                        slot.threshold = Some(slot.threshold.map_or(mean_error, |phi| phi.min(mean_error)));
                    }
                }
                SlotState::Testing => {
                    slot.threshold = Some(slot.threshold.map_or(mean_error, |phi| phi.min(mean_error)));
                    if settle.contains(&slot.layer) {
                        slot.state = SlotState::Stable;
                    }
                }
                SlotState::Stable => {}
            }
            if !SlotState::legal_transition(old, slot.state) {
                return Err(Error::Invariant(format!(
                    "illegal transition {old:?} -> {:?} on slot {}",
                    slot.state, slot.layer
                )));
            }
        }

        let expected = self.config.rolling_counts();
        let got = self.state_histogram();
        if got != expected {
            return Err(Error::Invariant(format!(
                "state histogram {got:?} differs from {expected:?}"
            )));
        }
        Ok(())
    }

    fn indices_in(&self, state: SlotState) -> Vec<usize> {
        self.slots
            .iter()
            .filter(|s| s.state == state)
            .map(|s| s.layer)
            .collect()
    }

    /// Sample, evaluate every group (possibly in parallel) and report.
    pub fn step<O: GroupObjective + ?Sized>(&mut self, objective: &O) -> Result<&TraceEntry> {
        let plan = self.sample_iteration()?;
        let iteration = plan.iteration;
        let errors = plan
            .groups
            .par_iter()
            .map(|g| objective.evaluate(g))
            .collect::<Result<Vec<f64>>>()
            .map_err(|e| Error::Objective {
                iteration,
                source: Box::new(e),
            })?;
        if let Some(k) = errors.iter().position(|e| !e.is_finite()) {
            return Err(Error::Objective {
                iteration,
                source: Box::new(Error::contract(format!("group {k} returned a non-finite error"))),
            });
        }
        self.report_errors(&plan, &errors)?;
        Ok(self.trace.last().expect("just pushed"))
    }

    /// Runs whole iterations until the next one would exceed `budget`.
    pub fn run<O: GroupObjective + ?Sized>(&mut self, objective: &O, budget: usize) -> Result<RunResult> {
        self.set_budget(budget)?;
        while self.can_continue() {
            self.step(objective)?;
        }
        Ok(self.result())
    }

    pub fn result(&self) -> RunResult {
        let (best_group, best_error) = self
            .best
            .clone()
            .unwrap_or_else(|| (Vec::new(), f64::INFINITY));
        RunResult {
            strategy: self.config.strategy,
            best_group,
            best_error,
            trace: self.trace.clone(),
            tell_counts: self.tell_counts(),
            consumed: self.budget.consumed,
            iterations: self.iteration,
        }
    }
}

fn tell_raw(slot: &mut OptimizerSlot, assignment: &[usize], errors: &[f64]) -> Result<()> {
    let solutions: Vec<EvaluatedSolution> = assignment
        .iter()
        .zip(errors)
        .map(|(&idx, &e)| EvaluatedSolution::new(slot.pool[idx].values.clone(), e))
        .collect();
    slot.mu_old = Some(slot.optimizer.mean().to_vec());
    slot.optimizer.tell(&solutions)?;
    slot.tells += 1;
    Ok(())
}
