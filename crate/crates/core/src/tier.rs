//! Tiered boosting: per-item stage budgets, category benchmarks and the
//! promote / exit rule applied when a stage ends.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Channel, EventRecord};
use crate::ids::{CategoryId, ItemId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    /// Exposure budget of each stage; the number of entries is K.
    pub budgets: Vec<u64>,
    /// Promotion safety factor of each stage.
    pub gammas: Vec<f64>,
    /// Stages ending with fewer exposures than this exit without a CTR test.
    pub min_eval_exposures: u64,
    /// A stage ends after this many slots even if budget remains.
    pub max_stage_slots: u32,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            budgets: vec![100, 300, 900],
            gammas: vec![1.05, 1.20, 1.35],
            min_eval_exposures: 20,
            max_stage_slots: 10,
        }
    }
}

impl StageConfig {
    pub fn stage_count(&self) -> u8 {
        self.budgets.len() as u8
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.budgets.len();
        if k == 0 || k > 8 {
            return Err(Error::config("stages: between 1 and 8 stages are supported"));
        }
        if self.gammas.len() != k {
            return Err(Error::config(format!("stages: {k} budgets but {} gammas", self.gammas.len())));
        }
        if self.budgets[0] == 0 {
            return Err(Error::config("stages: budgets must be positive"));
        }
        if self.budgets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("stages: budgets must be strictly increasing"));
        }
        if self.gammas.iter().any(|g| !(g.is_finite() && *g >= 1.0)) {
            return Err(Error::config("stages: every gamma must be finite and >= 1"));
        }
        if self.gammas.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("stages: gammas must be strictly increasing"));
        }
        if self.max_stage_slots == 0 {
            return Err(Error::config("stages: max_stage_slots must be positive"));
        }
        Ok(())
    }

    /// Budget of a 1-based stage.
    #[inline]
    pub fn budget(&self, stage: u8) -> u64 {
        self.budgets[stage as usize - 1]
    }

    #[inline]
    pub fn gamma(&self, stage: u8) -> f64 {
        self.gammas[stage as usize - 1]
    }

    /// Re-segments the same total per-item budget into `k` stages.
    ///
    /// Budgets keep the ratio between the first two configured stages (3 for
    /// a single-stage config) and are rounded so they still sum to the total;
    /// gammas keep the configured prefix and extend by the last step.
    pub fn with_stage_count(&self, k: u8) -> Result<Self> {
        self.validate()?;
        if k == 0 {
            return Err(Error::config("stage_count must be >= 1"));
        }
        let cur = self.budgets.len();
        if k as usize == cur {
            return Ok(self.clone());
        }
        let total: u64 = self.budgets.iter().sum();
        let ratio = if cur >= 2 { self.budgets[1] as f64 / self.budgets[0] as f64 } else { 3.0 };
        let k = k as usize;
        let weights: Vec<f64> = (0..k).map(|i| ratio.powi(i as i32)).collect();
        let wsum: f64 = weights.iter().sum();
        let mut budgets: Vec<u64> = weights.iter().map(|w| (total as f64 * w / wsum).round() as u64).collect();
        let assigned: u64 = budgets[..k - 1].iter().sum();
        budgets[k - 1] = total.saturating_sub(assigned);
        let step = if cur >= 2 { self.gammas[cur - 1] - self.gammas[cur - 2] } else { 0.15 };
        let gammas = (0..k)
            .map(|i| if i < cur { self.gammas[i] } else { self.gammas[cur - 1] + step * (i + 1 - cur) as f64 })
            .collect();
        let out = Self { budgets, gammas, ..self.clone() };
        out.validate()?;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "stage")]
pub enum StageStatus {
    Active(u8),
    Exited,
    Graduated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Stay,
    Promote,
    Exit,
    Graduate,
}

/// What actually happened to a ledger after a stage ended, once ablation
/// rules are applied to the raw [`Decision`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Promoted,
    Exited,
    Graduated,
    /// Failed but the exit rule is off: the same stage starts over.
    Rearmed,
    /// Left boosting because the item stopped being cold.
    Expired,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub stage: u8,
    pub outcome: Outcome,
    pub slot: u32,
    pub observed_ctr: Option<f64>,
    pub benchmark: f64,
    /// Whether the stage CTR met `gamma * benchmark`.
    pub passed: bool,
    pub stage_pv: u64,
    pub stage_clicks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoostLedger {
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub status: StageStatus,
    pub admitted_slot: u32,
    pub entered_slot: u32,
    pub stage_pv: u64,
    pub stage_clicks: u64,
    pub total_boost_pv: u64,
    /// Every stage the item was granted, in order (re-armed stages repeat).
    pub stages_entered: Vec<u8>,
    pub history: Vec<HistoryEntry>,
}

impl BoostLedger {
    pub fn current_stage(&self) -> Option<u8> {
        match self.status {
            StageStatus::Active(k) => Some(k),
            _ => None,
        }
    }

    pub fn is_active(&self) -> bool {
        matches!(self.status, StageStatus::Active(_))
    }

    pub fn remaining_budget(&self, cfg: &StageConfig) -> u64 {
        self.current_stage().map(|k| cfg.budget(k).saturating_sub(self.stage_pv)).unwrap_or(0)
    }

    /// Slots left in the current stage as seen at the start of slot `now`.
    pub fn remaining_slots(&self, cfg: &StageConfig, now: u32) -> u32 {
        cfg.max_stage_slots.saturating_sub(now.saturating_sub(self.entered_slot))
    }

    pub fn stage_ctr(&self) -> Option<f64> {
        (self.stage_pv > 0).then(|| self.stage_clicks as f64 / self.stage_pv as f64)
    }

    fn enter(&mut self, stage: u8, slot: u32) {
        self.status = StageStatus::Active(stage);
        self.entered_slot = slot;
        self.stage_pv = 0;
        self.stage_clicks = 0;
        self.stages_entered.push(stage);
    }
}

pub type LedgerBook = BTreeMap<ItemId, BoostLedger>;

/// Opens a ledger at the grade's stage (capped at K).
pub fn admit_item<'a>(
    book: &'a mut LedgerBook,
    item_id: ItemId,
    category_id: CategoryId,
    grade_stage: u8,
    cfg: &StageConfig,
    slot: u32,
) -> Result<&'a BoostLedger> {
    if book.contains_key(&item_id) {
        return Err(Error::Admission(item_id));
    }
    let stage = grade_stage.clamp(1, cfg.stage_count());
    let mut ledger = BoostLedger {
        item_id,
        category_id,
        status: StageStatus::Exited,
        admitted_slot: slot,
        entered_slot: slot,
        stage_pv: 0,
        stage_clicks: 0,
        total_boost_pv: 0,
        stages_entered: Vec::new(),
        history: Vec::new(),
    };
    ledger.enter(stage, slot);
    Ok(book.entry(item_id).or_insert(ledger))
}

/// Counts one boost exposure against the current stage budget.
pub fn record_boost_event(ledger: &mut BoostLedger, event: &EventRecord, cfg: &StageConfig) -> Result<()> {
    if event.channel != Channel::Boost {
        return Err(Error::Event("natural event recorded against a boost ledger".into()));
    }
    if event.item_id != ledger.item_id {
        return Err(Error::Event(format!("event for {} recorded on ledger of {}", event.item_id, ledger.item_id)));
    }
    let Some(stage) = ledger.current_stage() else {
        return Err(Error::Event(format!("boost exposure for inactive {}", ledger.item_id)));
    };
    let budget = cfg.budget(stage);
    if ledger.stage_pv >= budget {
        return Err(Error::LedgerOverflow { item: ledger.item_id, stage, budget });
    }
    ledger.stage_pv += 1;
    ledger.stage_clicks += event.clicked as u64;
    ledger.total_boost_pv += 1;
    Ok(())
}

/// Raw promote / exit rule, evaluated at the start of slot `now`.
pub fn evaluate_stage(ledger: &BoostLedger, benchmark_ctr: f64, cfg: &StageConfig, now: u32) -> Decision {
    let Some(k) = ledger.current_stage() else {
        return Decision::Stay;
    };
    let budget_left = ledger.stage_pv < cfg.budget(k);
    let time_left = now.saturating_sub(ledger.entered_slot) < cfg.max_stage_slots;
    if budget_left && time_left {
        return Decision::Stay;
    }
    if stage_passes(ledger.stage_pv, ledger.stage_clicks, benchmark_ctr, cfg.gamma(k), cfg.min_eval_exposures) {
        if k >= cfg.stage_count() {
            Decision::Graduate
        } else {
            Decision::Promote
        }
    } else {
        Decision::Exit
    }
}

/// `clicks / pv >= gamma * benchmark`, with too few exposures failing.
#[inline]
pub fn stage_passes(pv: u64, clicks: u64, benchmark_ctr: f64, gamma: f64, min_eval: u64) -> bool {
    if pv == 0 || pv < min_eval {
        return false;
    }
    meets_threshold(clicks as f64 / pv as f64, gamma, benchmark_ctr)
}

/// `ctr >= gamma * benchmark`, forgiving a relative 1e-12 of rounding so that
/// e.g. 0.06 against 1.2 * 0.05 counts as equal.
#[inline]
pub fn meets_threshold(ctr: f64, gamma: f64, benchmark_ctr: f64) -> bool {
    let threshold = gamma * benchmark_ctr;
    ctr >= threshold - THRESHOLD_REL_TOL * threshold.abs()
}

pub const THRESHOLD_REL_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleFlags {
    pub disable_exit: bool,
    pub disable_promotion: bool,
}

/// One line of the stage-transition audit log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAudit {
    pub slot: u32,
    pub item_id: ItemId,
    pub stage: u8,
    pub decision: Decision,
    pub outcome: Outcome,
    pub ctr: Option<f64>,
    pub benchmark: f64,
    pub gamma: f64,
    pub entered_slot: u32,
    pub budget: u64,
    pub stage_pv: u64,
    pub stage_clicks: u64,
}

/// Evaluates the ledger and applies the result. Returns an audit record
/// whenever the current stage ended.
pub fn step_ledger(
    ledger: &mut BoostLedger,
    benchmark_ctr: f64,
    cfg: &StageConfig,
    rules: RuleFlags,
    now: u32,
) -> Option<StageAudit> {
    let decision = evaluate_stage(ledger, benchmark_ctr, cfg, now);
    let k = ledger.current_stage()?;
    let outcome = match decision {
        Decision::Stay => return None,
        Decision::Promote if rules.disable_promotion => Outcome::Graduated,
        Decision::Promote => Outcome::Promoted,
        Decision::Graduate => Outcome::Graduated,
        Decision::Exit if rules.disable_exit => Outcome::Rearmed,
        Decision::Exit => Outcome::Exited,
    };
    Some(close_stage(ledger, k, decision, outcome, benchmark_ctr, cfg, now))
}

/// Takes an active item out of boosting because it is no longer cold.
pub fn expire_ledger(ledger: &mut BoostLedger, benchmark_ctr: f64, cfg: &StageConfig, now: u32) -> Option<StageAudit> {
    let k = ledger.current_stage()?;
    Some(close_stage(ledger, k, Decision::Exit, Outcome::Expired, benchmark_ctr, cfg, now))
}

fn close_stage(
    ledger: &mut BoostLedger,
    k: u8,
    decision: Decision,
    outcome: Outcome,
    benchmark_ctr: f64,
    cfg: &StageConfig,
    now: u32,
) -> StageAudit {
    let ctr = ledger.stage_ctr();
    let passed =
        stage_passes(ledger.stage_pv, ledger.stage_clicks, benchmark_ctr, cfg.gamma(k), cfg.min_eval_exposures);
    ledger.history.push(HistoryEntry {
        stage: k,
        outcome,
        slot: now,
        observed_ctr: ctr,
        benchmark: benchmark_ctr,
        passed,
        stage_pv: ledger.stage_pv,
        stage_clicks: ledger.stage_clicks,
    });
    let audit = StageAudit {
        slot: now,
        item_id: ledger.item_id,
        stage: k,
        decision,
        outcome,
        ctr,
        benchmark: benchmark_ctr,
        gamma: cfg.gamma(k),
        entered_slot: ledger.entered_slot,
        budget: cfg.budget(k),
        stage_pv: ledger.stage_pv,
        stage_clicks: ledger.stage_clicks,
    };
    match outcome {
        Outcome::Promoted => ledger.enter(k + 1, now),
        Outcome::Rearmed => ledger.enter(k, now),
        Outcome::Exited | Outcome::Expired => ledger.status = StageStatus::Exited,
        Outcome::Graduated => ledger.status = StageStatus::Graduated,
    }
    audit
}

/// Budget accounting of one ledger.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetTally {
    /// Sum of the budgets of every stage the item entered.
    pub granted: u64,
    /// Sum of the budgets of the stages whose threshold the item met.
    pub passed: u64,
    /// Boost exposures actually consumed.
    pub spent: u64,
}

pub fn total_boost_budget(ledger: &BoostLedger, cfg: &StageConfig) -> BudgetTally {
    BudgetTally {
        granted: ledger.stages_entered.iter().map(|&k| cfg.budget(k)).sum(),
        passed: ledger.history.iter().filter(|h| h.passed).map(|h| cfg.budget(h.stage)).sum(),
        spent: ledger.total_boost_pv,
    }
}

/// Rolling natural-channel CTR of one category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryBenchmark {
    pub category_id: CategoryId,
    pub rolling_ctr: f64,
    pub window_slots: u32,
    /// Per-slot (slot, pv, clicks) inside the window, oldest first.
    pub window: VecDeque<(u32, u64, u64)>,
}

impl CategoryBenchmark {
    pub fn new(category_id: CategoryId, initial_ctr: f64, window_slots: u32) -> Self {
        Self { category_id, rolling_ctr: initial_ctr, window_slots, window: VecDeque::new() }
    }
}

/// Adds the category's natural events of `slot` and recomputes the trailing
/// window CTR; keeps the previous value when the window has no exposures.
pub fn update_benchmark(bench: &mut CategoryBenchmark, events: &[&EventRecord], slot: u32) -> Result<()> {
    let mut pv = 0;
    let mut clicks = 0;
    for e in events {
        if e.channel != Channel::Natural {
            return Err(Error::Event("benchmark fed a boost event".into()));
        }
        pv += 1;
        clicks += e.clicked as u64;
    }
    bench.window.push_back((slot, pv, clicks));
    let oldest = slot.saturating_add(1).saturating_sub(bench.window_slots);
    while bench.window.front().is_some_and(|&(s, _, _)| s < oldest) {
        bench.window.pop_front();
    }
    let (wpv, wclicks) = bench.window.iter().fold((0u64, 0u64), |(p, c), &(_, a, b)| (p + a, c + b));
    if wpv > 0 {
        bench.rolling_ctr = wclicks as f64 / wpv as f64;
    }
    Ok(())
}
