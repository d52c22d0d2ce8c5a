//! State retention for the reverse pass.
//!
//! The forward pass keeps a small set of states; the reverse pass walks the
//! segments between them from last to first and rematerializes whatever it
//! needs inside a segment by recursive bisection: advance to the midpoint,
//! reverse the right half, then the left half. With the
//! [`RetentionPolicy::Logarithmic`] policy the forward pass keeps exactly the
//! states the bisection would compute first on `[0, T)` (the "right spine"
//! `0, T/2, 3T/4, ..., T-1`), so at most `~log2 T` states are alive and at
//! most `(T/2) log2 T` extra steps are recomputed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{load_state, save_state};
use crate::optim::OptimizerState;
use crate::trainer::TrainPlan;

/// Constant in the live-state bound `peak <= LIVE_STATE_FACTOR * max(1, ceil(log2 T))`.
///
/// The logarithmic policy peaks at `ceil(log2 T) + 2` held states: the spine,
/// the final state while the terminal adjoint is formed, and one
/// rematerialized state per bisection level minus the spine entries already
/// released. `ceil(log2 T) + 2 <= 3 ceil(log2 T)` for every `T >= 2`, and the
/// `T = 1` case holds two states against a bound of three.
pub const LIVE_STATE_FACTOR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum RetentionPolicy {
    /// Keep every state `s_0..s_{T-1}`; no recomputation.
    RetainAll,
    /// Keep every `interval`-th state and bisect inside segments. With
    /// `interval = ceil(sqrt(T))` this is the classic two-level scheme.
    Periodic { interval: usize },
    /// Keep the bisection spine; `O(log T)` memory.
    Logarithmic,
}

impl RetentionPolicy {
    pub fn two_level(steps: usize) -> Self {
        RetentionPolicy::Periodic {
            interval: ((steps as f64).sqrt().ceil() as usize).max(1),
        }
    }

    /// Step indices whose states the forward pass keeps.
    pub fn retained_steps(&self, steps: usize) -> BTreeSet<usize> {
        if steps == 0 {
            return BTreeSet::new();
        }
        match *self {
            RetentionPolicy::RetainAll => (0..steps).collect(),
            RetentionPolicy::Periodic { interval } => {
                (0..steps).step_by(interval.max(1)).collect()
            }
            RetentionPolicy::Logarithmic => {
                let mut keep = BTreeSet::from([0]);
                let mut a = 0;
                while steps - a > 1 {
                    a = bisect(a, steps);
                    keep.insert(a);
                }
                keep
            }
        }
    }
}

/// Midpoint used to split `[a, b)`, `b - a >= 2`.
#[inline]
fn bisect(a: usize, b: usize) -> usize {
    a + (b - a) / 2
}

#[derive(Debug, Clone)]
enum Slot {
    Memory(OptimizerState),
    Disk(PathBuf),
}

impl Slot {
    fn load(&self) -> Result<OptimizerState> {
        match self {
            Slot::Memory(s) => Ok(s.clone()),
            Slot::Disk(p) => load_state(p),
        }
    }

    fn into_state(self) -> Result<OptimizerState> {
        match self {
            Slot::Memory(s) => Ok(s),
            Slot::Disk(p) => load_state(&p),
        }
    }
}

/// Retained states of one recorded training run, keyed by step index.
#[derive(Debug, Clone)]
pub struct CheckpointStore {
    policy: RetentionPolicy,
    steps: usize,
    plan_fingerprint: String,
    at_center: bool,
    entries: BTreeMap<usize, Slot>,
    final_state: Option<Slot>,
    peak_entries: usize,
}

#[derive(Serialize, Deserialize)]
struct StoreIndex {
    policy: RetentionPolicy,
    steps: usize,
    plan_fingerprint: String,
    at_center: bool,
    retained: Vec<usize>,
}

const INDEX_FILE: &str = "store.json";
const FINAL_FILE: &str = "final.state";

fn state_file(t: usize) -> String {
    format!("state_{t:08}.state")
}

impl CheckpointStore {
    pub(crate) fn new(policy: RetentionPolicy, plan: &TrainPlan, at_center: bool) -> Self {
        CheckpointStore {
            policy,
            steps: plan.steps,
            plan_fingerprint: plan.fingerprint().to_string(),
            at_center,
            entries: BTreeMap::new(),
            final_state: None,
            peak_entries: 0,
        }
    }

    pub(crate) fn insert(&mut self, s: OptimizerState) -> Result<()> {
        if s.step >= self.steps {
            return Err(Error::Config(format!("state step {} beyond run", s.step)));
        }
        self.entries.insert(s.step, Slot::Memory(s));
        self.peak_entries = self.peak_entries.max(self.entries.len());
        Ok(())
    }

    pub(crate) fn set_final(&mut self, s: OptimizerState) -> Result<()> {
        if s.step != self.steps {
            return Err(Error::Config(format!(
                "final state has step {}, run has {}",
                s.step, self.steps
            )));
        }
        self.final_state = Some(Slot::Memory(s));
        Ok(())
    }

    pub fn policy(&self) -> RetentionPolicy {
        self.policy
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn plan_fingerprint(&self) -> &str {
        &self.plan_fingerprint
    }

    /// Whether the recorded run used all-ones weights.
    pub fn at_center(&self) -> bool {
        self.at_center
    }

    pub fn retained_steps(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    /// Most states held at once during the forward pass.
    pub fn forward_peak(&self) -> usize {
        self.peak_entries
    }

    pub fn load(&self, t: usize) -> Result<OptimizerState> {
        self.entries
            .get(&t)
            .ok_or(Error::MissingCheckpoint { step: t })?
            .load()
    }

    pub fn final_state(&self) -> Result<OptimizerState> {
        self.final_state
            .as_ref()
            .ok_or(Error::MissingCheckpoint { step: self.steps })?
            .load()
    }

    /// Writes every retained state and an index to `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (&t, slot) in &self.entries {
            save_state(&slot.load()?, &dir.join(state_file(t)))?;
        }
        save_state(&self.final_state()?, &dir.join(FINAL_FILE))?;
        let index = StoreIndex {
            policy: self.policy,
            steps: self.steps,
            plan_fingerprint: self.plan_fingerprint.clone(),
            at_center: self.at_center,
            retained: self.retained_steps(),
        };
        fs::write(dir.join(INDEX_FILE), serde_json::to_vec_pretty(&index)?)?;
        Ok(())
    }

    /// Moves every retained state to `dir`; states are read back on demand.
    pub fn spill_to(mut self, dir: &Path) -> Result<Self> {
        self.save_dir(dir)?;
        for (&t, slot) in self.entries.iter_mut() {
            *slot = Slot::Disk(dir.join(state_file(t)));
        }
        self.final_state = Some(Slot::Disk(dir.join(FINAL_FILE)));
        Ok(self)
    }

    /// Opens a store written by [`save_dir`](Self::save_dir), lazily.
    pub fn open_dir(dir: &Path) -> Result<Self> {
        let index: StoreIndex = serde_json::from_slice(&fs::read(dir.join(INDEX_FILE))?)?;
        let mut entries = BTreeMap::new();
        for t in index.retained {
            let p = dir.join(state_file(t));
            if !p.exists() {
                return Err(Error::MissingCheckpoint { step: t });
            }
            entries.insert(t, Slot::Disk(p));
        }
        let final_path = dir.join(FINAL_FILE);
        if !final_path.exists() {
            return Err(Error::MissingCheckpoint { step: index.steps });
        }
        Ok(CheckpointStore {
            policy: index.policy,
            steps: index.steps,
            plan_fingerprint: index.plan_fingerprint,
            at_center: index.at_center,
            entries,
            final_state: Some(Slot::Disk(final_path)),
            peak_entries: 0,
        })
    }

    pub(crate) fn take_final(&mut self) -> Result<OptimizerState> {
        self.final_state
            .take()
            .ok_or(Error::MissingCheckpoint { step: self.steps })?
            .into_state()
    }
}

/// Cost counters of one reverse pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayBudget {
    /// Steps of training executed during the forward (recording) pass.
    pub forward_steps_total: usize,
    /// Extra forward steps executed to rematerialize states in reverse.
    pub recompute_steps_total: usize,
    /// Most optimizer states held in memory at once during the reverse pass.
    pub peak_live_states: usize,
    #[serde(skip)]
    live: usize,
}

impl ReplayBudget {
    pub fn for_run(steps: usize) -> Self {
        ReplayBudget {
            forward_steps_total: steps,
            ..Default::default()
        }
    }

    fn acquire(&mut self, k: usize) {
        self.live += k;
        self.peak_live_states = self.peak_live_states.max(self.live);
    }

    fn release(&mut self, k: usize) {
        self.live -= k;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub steps: usize,
    pub forward_steps_total: usize,
    pub recompute_steps_total: usize,
    pub recompute_bound: usize,
    pub peak_live_states: usize,
    pub live_state_factor: usize,
    pub live_state_bound: usize,
    pub passed: bool,
}

pub fn ceil_log2(t: usize) -> usize {
    if t <= 1 {
        0
    } else {
        (usize::BITS - (t - 1).leading_zeros()) as usize
    }
}

/// Compares a finished pass against `T ceil(log2 T) + T` recomputed steps
/// and `LIVE_STATE_FACTOR * max(1, ceil(log2 T))` live states.
pub fn budget_report(budget: &ReplayBudget, steps: usize) -> BudgetReport {
    let lg = ceil_log2(steps);
    let recompute_bound = steps * lg + steps;
    let live_state_bound = LIVE_STATE_FACTOR * lg.max(1);
    BudgetReport {
        steps,
        forward_steps_total: budget.forward_steps_total,
        recompute_steps_total: budget.recompute_steps_total,
        recompute_bound,
        peak_live_states: budget.peak_live_states,
        live_state_factor: LIVE_STATE_FACTOR,
        live_state_bound,
        passed: budget.recompute_steps_total <= recompute_bound
            && budget.peak_live_states <= live_state_bound,
    }
}

/// [`budget_report`], failing with [`Error::Budget`] on a violation.
pub fn audit_budget(budget: &ReplayBudget, steps: usize) -> Result<BudgetReport> {
    let r = budget_report(budget, steps);
    if r.passed {
        Ok(r)
    } else {
        Err(Error::Budget(format!(
            "T = {steps}: recomputed {} (bound {}), peak live {} (bound {})",
            r.recompute_steps_total, r.recompute_bound, r.peak_live_states, r.live_state_bound
        )))
    }
}

/// What a reverse sweep needs from its caller.
pub(crate) trait Sweep {
    type State;
    /// Receives the final state `s_T` before any step is visited.
    fn start(&mut self, final_state: &Self::State) -> Result<()>;
    /// Rematerializes the state at `to` from `s` (at `from`).
    fn advance(&mut self, s: &Self::State, from: usize, to: usize) -> Result<Self::State>;
    /// Consumes the state at step `t`; called for `t = T-1, ..., 0` in order.
    fn visit(&mut self, t: usize, s: &Self::State) -> Result<()>;
}

/// A retained state, either in memory or loadable on demand.
pub(crate) enum Held<'a, S> {
    Ready(S),
    Deferred(Box<dyn FnOnce() -> Result<S> + 'a>),
}

/// Visits every step in descending order, starting from the retained states
/// (ascending by step; must include step 0 when `steps > 0`). In-memory
/// states count as live from the start; each is released as soon as its
/// segment has been reversed.
pub(crate) fn run_sweep<W: Sweep>(
    sweep: &mut W,
    final_state: W::State,
    retained: Vec<(usize, Held<'_, W::State>)>,
    steps: usize,
    budget: &mut ReplayBudget,
) -> Result<()> {
    let ready = retained
        .iter()
        .filter(|(_, h)| matches!(h, Held::Ready(_)))
        .count();
    budget.acquire(ready + 1);
    sweep.start(&final_state)?;
    drop(final_state);
    budget.release(1);
    if steps == 0 {
        return Ok(());
    }
    if retained.first().map(|(t, _)| *t) != Some(0) {
        return Err(Error::MissingCheckpoint { step: 0 });
    }
    let mut end = steps;
    for (start, held) in retained.into_iter().rev() {
        if start >= end {
            return Err(Error::MissingCheckpoint { step: start });
        }
        let state = match held {
            Held::Ready(s) => s,
            Held::Deferred(load) => {
                let s = load()?;
                budget.acquire(1);
                s
            }
        };
        reverse_segment(sweep, start, end, &state, budget)?;
        drop(state);
        budget.release(1);
        end = start;
    }
    Ok(())
}

fn reverse_segment<W: Sweep>(
    sweep: &mut W,
    a: usize,
    b: usize,
    s_a: &W::State,
    budget: &mut ReplayBudget,
) -> Result<()> {
    if b - a == 1 {
        return sweep.visit(a, s_a);
    }
    let mid = bisect(a, b);
    let s_mid = sweep.advance(s_a, a, mid)?;
    budget.recompute_steps_total += mid - a;
    budget.acquire(1);
    reverse_segment(sweep, mid, b, &s_mid, budget)?;
    drop(s_mid);
    budget.release(1);
    reverse_segment(sweep, a, mid, s_a, budget)
}

/// Drives a sweep over the states of `store`, consuming it.
pub(crate) fn sweep_store<W: Sweep<State = OptimizerState>>(
    sweep: &mut W,
    mut store: CheckpointStore,
    budget: &mut ReplayBudget,
) -> Result<()> {
    let steps = store.steps;
    let final_state = store.take_final()?;
    let entries = std::mem::take(&mut store.entries);
    let retained = entries
        .into_iter()
        .map(|(t, slot)| {
            let held = match slot {
                Slot::Memory(s) => Held::Ready(s),
                Slot::Disk(p) => Held::Deferred(Box::new(move || load_state(&p))),
            };
            (t, held)
        })
        .collect();
    run_sweep(sweep, final_state, retained, steps, budget)
}

/// Runs the traversal of `policy` for `steps` with placeholder states, to
/// predict a pass's cost without training anything.
pub fn simulate_schedule(policy: RetentionPolicy, steps: usize) -> ReplayBudget {
    struct Counting {
        next: Option<usize>,
    }
    impl Sweep for Counting {
        type State = usize;
        fn start(&mut self, s: &usize) -> Result<()> {
            self.next = s.checked_sub(1);
            Ok(())
        }
        fn advance(&mut self, s: &usize, from: usize, to: usize) -> Result<usize> {
            assert_eq!(*s, from);
            Ok(to)
        }
        fn visit(&mut self, t: usize, s: &usize) -> Result<()> {
            assert_eq!((*s, Some(t)), (t, self.next), "steps must be visited in reverse");
            self.next = t.checked_sub(1);
            Ok(())
        }
    }
    let retained = policy
        .retained_steps(steps)
        .into_iter()
        .map(|t| (t, Held::Ready(t)))
        .collect();
    let mut budget = ReplayBudget::for_run(steps);
    run_sweep(&mut Counting { next: None }, steps, retained, steps, &mut budget)
        .expect("placeholder sweep cannot fail");
    budget
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logarithmic_spine() {
        let keep: Vec<usize> = RetentionPolicy::Logarithmic.retained_steps(8).into_iter().collect();
        assert_eq!(keep, vec![0, 4, 6, 7]);
        assert_eq!(
            RetentionPolicy::Logarithmic.retained_steps(1).into_iter().collect::<Vec<_>>(),
            vec![0]
        );
        assert!(RetentionPolicy::Logarithmic.retained_steps(0).is_empty());
    }

    #[test]
    fn ceil_log2_values() {
        assert_eq!(ceil_log2(1), 0);
        assert_eq!(ceil_log2(2), 1);
        assert_eq!(ceil_log2(8), 3);
        assert_eq!(ceil_log2(9), 4);
        assert_eq!(ceil_log2(1024), 10);
    }

    #[test]
    fn one_step_needs_no_recompute() {
        let b = simulate_schedule(RetentionPolicy::Logarithmic, 1);
        assert_eq!(b.recompute_steps_total, 0);
        assert!(audit_budget(&b, 1).is_ok());
    }

    #[test]
    fn eight_steps_hand_count() {
        // spine 0,4,6,7: segments [7,8) and [6,7) need nothing, [4,6) advances
        // 4->5, [0,4) advances 0->2, 2->3 and 0->1.
        let b = simulate_schedule(RetentionPolicy::Logarithmic, 8);
        assert_eq!(b.recompute_steps_total, 5);
        assert!(b.peak_live_states <= LIVE_STATE_FACTOR * 3);
        assert_eq!(b.peak_live_states, 5);
    }

    #[test]
    fn logarithmic_budget_holds_across_lengths() {
        for t in 1..=300 {
            let b = simulate_schedule(RetentionPolicy::Logarithmic, t);
            audit_budget(&b, t).unwrap_or_else(|e| panic!("T={t}: {e}"));
        }
        let b = simulate_schedule(RetentionPolicy::Logarithmic, 1024);
        assert!(b.recompute_steps_total <= 1024 * 10 + 1024);
        audit_budget(&b, 1024).unwrap();
    }

    #[test]
    fn retain_all_recomputes_nothing_but_holds_everything() {
        let b = simulate_schedule(RetentionPolicy::RetainAll, 64);
        assert_eq!(b.recompute_steps_total, 0);
        assert_eq!(b.peak_live_states, 65);
        assert!(audit_budget(&b, 64).is_err());
    }

    #[test]
    fn two_level_exceeds_log_memory_for_long_runs() {
        let t = 1024;
        let b = simulate_schedule(RetentionPolicy::two_level(t), t);
        assert!(b.recompute_steps_total <= t * 10 + t);
        assert!(b.peak_live_states > LIVE_STATE_FACTOR * 10);
    }
}
