//! The slot loop that wires the simulator, the predictors, tier control
//! and bidding together, plus artifact persistence and ablation suites.

use std::cell::RefCell;
use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bidding::{
    compute_user_factor, decide_delivery, end_of_slot_repricing, initial_speed_factor, panel_volume, quote_price,
    select_boost_slate, BidTrace, BoostCandidate, PacingState,
};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::events::{read_jsonl_file, write_jsonl_file, Channel, EventRecord};
use crate::foundation::{random_exposure_log, train_foundation, FoundationModel, TrainConfig, TrainReport};
use crate::grading::{percentile_p40, rank_and_grade};
use crate::ids::{CategoryId, ItemId, UserId};
use crate::metrics::{auc, build_report, write_report_csv, Catalog, ItemMeta, Report, ReportSummary};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Real;
use crate::stack::{
    build_stack_features_with_score, fine_tune, stack_predict, EnrichedSample, LabeledStack, RealtimeStats, Source,
    StackConfig, StackModel,
};
use crate::tier::{
    admit_item, expire_ledger, record_boost_event, step_ledger, total_boost_budget, update_benchmark, BudgetTally,
    CategoryBenchmark, LedgerBook, RuleFlags, StageAudit, StageConfig,
};
use crate::world::{
    generate_world, natural_recommend, simulate_session, BoostExposure, CtrScorer, WorldConfig, WorldState,
};

/// One line of the per-slot grading snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub slot: u32,
    pub item_id: ItemId,
    pub p40: f64,
    pub rank_percent: f64,
    pub stage: u8,
}

/// Scores both predictors gave a cold-item exposure before seeing its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub slot: u32,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub channel: Channel,
    /// 1-based index of this exposure in the item's life.
    pub interaction: u64,
    /// Clicks the item had collected before this exposure.
    pub prior_clicks: u64,
    pub foundation: f64,
    pub stacked: f64,
    pub clicked: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotSnapshot {
    pub slot: u32,
    pub sessions: u64,
    pub natural_pv: u64,
    pub boost_pv: u64,
    pub cold_pv: u64,
    pub active_boosting: u64,
    pub admitted: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub item_id: ItemId,
    pub stages_entered: Vec<u8>,
    pub tally: BudgetTally,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub foundation: TrainReport,
    pub warmup_events: usize,
    /// Prequential AUCs on cold exposures, split by interaction index.
    pub phase1_foundation_auc: Option<f64>,
    pub phase1_stacked_auc: Option<f64>,
    pub phase2_foundation_auc: Option<f64>,
    pub phase2_stacked_auc: Option<f64>,
    pub phase1_samples: usize,
    pub phase2_samples: usize,
    pub ledger_overflows: u64,
    pub slots: Vec<SlotSnapshot>,
    pub ledgers: Vec<LedgerSummary>,
}

pub struct RunArtifacts {
    pub config: ScenarioConfig,
    pub events: Vec<EventRecord>,
    pub audits: Vec<StageAudit>,
    pub grades: Vec<GradeRecord>,
    pub bid_trace: Vec<BidTrace>,
    pub predictions: Vec<PredictionRecord>,
    pub catalog: Catalog,
    pub ledgers: LedgerBook,
    pub stages: StageConfig,
    pub report: Report,
    pub diagnostics: Diagnostics,
    pub foundation: FoundationModel<f64>,
}

/// Exposures served while the item has fewer than this many clicks form
/// phase I (its first one to three interactions); later ones phase II.
pub const PHASE1_CLICKS: u64 = 3;

/// Weight kept by older stage starts in the first-slot tally.
const FIRST_SLOT_DECAY: f64 = 0.9;

/// Memo of the frozen foundation's scores. Its inputs are static profile
/// data, so an entry never goes stale.
struct ScoreCache<T: Real> {
    /// `[item][user]`, NaN when not computed yet.
    table: RefCell<Vec<Vec<T>>>,
}

impl<T: Real> ScoreCache<T> {
    fn new() -> Self {
        Self { table: RefCell::new(Vec::new()) }
    }

    fn get(&self, model: &FoundationModel<T>, world: &WorldState, user: UserId, item: ItemId) -> Result<T> {
        let mut table = self.table.borrow_mut();
        if table.len() <= item.index() {
            table.resize_with(world.items.len().max(item.index() + 1), Vec::new);
        }
        let row = &mut table[item.index()];
        if row.is_empty() {
            row.resize(world.users.len(), T::nan());
        }
        let slot = row.get_mut(user.index()).ok_or(Error::Lookup { kind: "user", id: user.0 })?;
        if slot.is_nan() {
            *slot = model.predict(world, user, item)?;
        }
        Ok(*slot)
    }
}

struct CachedScorer<'a, T: Real> {
    model: &'a FoundationModel<T>,
    cache: &'a ScoreCache<T>,
}

impl<T: Real> CtrScorer for CachedScorer<'_, T> {
    fn ctr(&self, world: &WorldState, user: UserId, item: ItemId) -> f64 {
        self.cache.get(self.model, world, user, item).map(|p| p.to_f64_lossy()).unwrap_or(0.5)
    }
}

/// Runs one scenario with `f64` models.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    run_scenario_as::<f64>(cfg)
}

/// Runs one scenario with models in scalar type `T`.
pub fn run_scenario_as<T: Real>(cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    run_prepared(&prepare::<T>(cfg)?, cfg)
}

/// Everything a run builds before slot 0: the world after warmup, the
/// trained foundation, the pre-trained stack and the grading panel. None of
/// it depends on the ablation flags, so arms of one seed can share it.
#[derive(Clone)]
pub struct Prepared<T: Real> {
    key: PrepKey,
    world: WorldState,
    foundation: FoundationModel<T>,
    foundation_report: TrainReport,
    stack: StackModel<T>,
    benchmarks: Vec<CategoryBenchmark>,
    panel: Vec<UserId>,
    warmup_events: usize,
}

/// The parts of a scenario a [`Prepared`] state was built from.
#[derive(Clone, Debug, PartialEq)]
struct PrepKey {
    seed: u64,
    world: WorldConfig,
    foundation: TrainConfig,
    stack: StackConfig,
    warmup_rounds: u32,
    stack_pretrain_epochs: u32,
    benchmark_window_slots: u32,
}

impl PrepKey {
    fn of(cfg: &ScenarioConfig) -> Self {
        Self {
            seed: cfg.seed,
            world: cfg.world.clone(),
            foundation: cfg.foundation.clone(),
            stack: cfg.stack.clone(),
            warmup_rounds: cfg.harness.warmup_rounds,
            stack_pretrain_epochs: cfg.harness.stack_pretrain_epochs,
            benchmark_window_slots: cfg.harness.benchmark_window_slots,
        }
    }
}

impl<T: Real> Prepared<T> {
    pub fn foundation(&self) -> &FoundationModel<T> {
        &self.foundation
    }

    pub fn foundation_report(&self) -> &TrainReport {
        &self.foundation_report
    }
}

pub fn prepare<T: Real>(cfg: &ScenarioConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    let stages = cfg.effective_stages()?;
    let mut world = generate_world(&cfg.world, cfg.seed)?;
    let warm = random_exposure_log(&mut world, cfg.harness.warmup_rounds, 0)?;
    let (foundation, foundation_report) = train_foundation::<T>(&warm, &world, &cfg.foundation, 0, cfg.seed)?;
    let mut stack = StackModel::new(&foundation, &cfg.stack, stages.stage_count(), cfg.world.cold_window, cfg.seed)?;

    // Pre-train the stack on the warmup log as if every item were cold,
    // with the exposures seen so far in the log standing in for boost history.
    let mut pre = Vec::with_capacity(warm.len());
    let mut seen: BTreeMap<ItemId, (u64, u64)> = BTreeMap::new();
    for e in &warm {
        let score = foundation.predict_as_cold(&world, e.user_id, e.item_id)?;
        let so_far = seen.entry(e.item_id).or_default();
        let rt = RealtimeStats { boost_pv: so_far.0, boost_clicks: so_far.1, ..Default::default() };
        so_far.0 += 1;
        so_far.1 += e.clicked as u64;
        let features =
            build_stack_features_with_score(&foundation, &stack, &world, e.user_id, e.item_id, &rt, 0, score)?;
        let sample = EnrichedSample {
            user_id: e.user_id,
            item_id: e.item_id,
            label: e.clicked,
            source: Source::Natural,
            slot: 0,
        };
        pre.push(LabeledStack { sample, features });
    }
    for _ in 0..cfg.harness.stack_pretrain_epochs {
        fine_tune(&mut stack, &pre, &cfg.stack)?;
    }

    let benchmarks = (0..cfg.world.num_categories)
        .map(|c| {
            let cat = CategoryId(c as u16);
            let (pv, clicks) = warm
                .iter()
                .filter(|e| world.items[e.item_id.index()].category_id == cat)
                .fold((0u64, 0u64), |(p, k), e| (p + 1, k + e.clicked as u64));
            let ctr = if pv > 0 { clicks as f64 / pv as f64 } else { 0.0 };
            CategoryBenchmark::new(cat, ctr, cfg.harness.benchmark_window_slots)
        })
        .collect();
    world.refresh_popular_pool();
    let mut rng = stream_rng(cfg.seed, Stream::UserSample, 0);
    let num_users = world.users.len() as u32;
    let panel = (0..cfg.stack.user_sample_size).map(|_| UserId(rng.random_range(0..num_users))).collect();
    Ok(Prepared {
        key: PrepKey::of(cfg),
        world,
        foundation,
        foundation_report,
        stack,
        benchmarks,
        panel,
        warmup_events: warm.len(),
    })
}

/// Runs `cfg` from a shared prepared state. `cfg` may differ from the one
/// `prep` was built with only in run length, output, pacing, stages,
/// reporting, holdout, tracing and ablation settings.
pub fn run_prepared<T: Real>(prep: &Prepared<T>, cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    cfg.validate()?;
    if PrepKey::of(cfg) != prep.key {
        return Err(Error::config("scenario does not match the prepared state (seed, world, models or warmup differ)"));
    }
    let mut sim = Simulation::from_prepared(prep, cfg)?;
    for t in 0..cfg.slots {
        sim.step(t).map_err(|e| e.at_slot(t))?;
    }
    sim.finish()
}

/// Per-item natural-channel counts over the trailing window.
#[derive(Default)]
struct NaturalWindow {
    slots: VecDeque<(u32, u64, u64)>,
    pv: u64,
    clicks: u64,
}

struct Simulation<T: Real> {
    cfg: ScenarioConfig,
    stages: StageConfig,
    rules: RuleFlags,
    world: WorldState,
    foundation: FoundationModel<T>,
    scores: ScoreCache<T>,
    stack: StackModel<T>,
    /// Fixed user panel behind every item's CTR distribution.
    panel: Vec<UserId>,
    /// Latest panel predictions per graded item, in panel order.
    panel_predictions: BTreeMap<ItemId, Vec<f64>>,
    last_sessions: u64,
    /// Decayed (exposures, predicted passes) per stage, first slots only.
    first_slot_tally: BTreeMap<u8, (f64, f64)>,
    book: LedgerBook,
    pacing: BTreeMap<ItemId, PacingState>,
    benchmarks: Vec<CategoryBenchmark>,
    p40: BTreeMap<ItemId, f64>,
    natural_window: BTreeMap<ItemId, NaturalWindow>,
    holdout: BTreeMap<ItemId, bool>,
    pending_admission: Vec<ItemId>,
    events: Vec<EventRecord>,
    audits: Vec<StageAudit>,
    grades: Vec<GradeRecord>,
    bid_trace: Vec<BidTrace>,
    predictions: Vec<PredictionRecord>,
    snapshots: Vec<SlotSnapshot>,
    foundation_report: TrainReport,
    warmup_events: usize,
}

impl<T: Real> Simulation<T> {
    fn from_prepared(prep: &Prepared<T>, cfg: &ScenarioConfig) -> Result<Self> {
        let stages = cfg.effective_stages()?;
        let mut stack = prep.stack.clone();
        stack.stage_count = stages.stage_count();
        Ok(Self {
            cfg: cfg.clone(),
            rules: RuleFlags {
                disable_exit: cfg.ablation.disable_exit,
                disable_promotion: cfg.ablation.disable_promotion,
            },
            stages,
            world: prep.world.clone(),
            foundation: prep.foundation.clone(),
            scores: ScoreCache::new(),
            stack,
            panel: prep.panel.clone(),
            panel_predictions: BTreeMap::new(),
            last_sessions: 0,
            first_slot_tally: BTreeMap::new(),
            book: LedgerBook::new(),
            pacing: BTreeMap::new(),
            benchmarks: prep.benchmarks.clone(),
            p40: BTreeMap::new(),
            natural_window: BTreeMap::new(),
            holdout: BTreeMap::new(),
            pending_admission: Vec::new(),
            events: Vec::new(),
            audits: Vec::new(),
            grades: Vec::new(),
            bid_trace: Vec::new(),
            predictions: Vec::new(),
            snapshots: Vec::new(),
            foundation_report: prep.foundation_report.clone(),
            warmup_events: prep.warmup_events,
        })
    }

    fn foundation_score(&self, user: UserId, item: ItemId) -> Result<T> {
        self.scores.get(&self.foundation, &self.world, user, item)
    }

    fn boosting_enabled(&self) -> bool {
        !self.cfg.ablation.disable_boosting
    }

    fn realtime(&self, item: ItemId) -> RealtimeStats {
        let c = self.world.counters(item);
        let nw = self.natural_window.get(&item);
        RealtimeStats {
            stage: self.book.get(&item).and_then(|l| l.current_stage()).unwrap_or(0),
            boost_pv: c.boost_pv,
            boost_clicks: c.boost_clicks,
            natural_pv: nw.map(|w| w.pv).unwrap_or(0),
            natural_clicks: nw.map(|w| w.clicks).unwrap_or(0),
        }
    }

    fn step(&mut self, t: u32) -> Result<()> {
        let seed = self.cfg.seed;
        for id in self.world.spawn_cold_items(t)? {
            let mut rng = stream_rng(seed, Stream::Holdout, id.0 as u64);
            let held = rng.random::<f64>() < self.cfg.harness.holdout_fraction;
            self.holdout.insert(id, held);
            self.pending_admission.push(id);
        }
        self.world.refresh_popular_pool();

        // Items eligible for boost delivery this slot, with their item-level state.
        let active: Vec<(ItemId, u8, f64, RealtimeStats)> = self
            .book
            .values()
            .filter_map(|l| {
                let k = l.current_stage()?;
                let p = *self.p40.get(&l.item_id)?;
                Some((l.item_id, k, p, self.realtime(l.item_id)))
            })
            .collect();

        let arrivals = self.world.arrivals(t);
        let boost_slots = if self.boosting_enabled() { self.world.config.boost_slots() } else { 0 };
        let natural_slots = self.world.config.session_length - boost_slots;
        let mut slot_samples: Vec<LabeledStack<T>> = Vec::new();
        let mut snap = SlotSnapshot { slot: t, sessions: arrivals.len() as u64, ..Default::default() };
        let first_event = self.events.len();

        for (s_idx, &user) in arrivals.iter().enumerate() {
            let mut rng = stream_rng(seed, Stream::Sessions, ((t as u64) << 24) | s_idx as u64);
            let scorer = CachedScorer { model: &self.foundation, cache: &self.scores };
            let natural = if natural_slots > 0 {
                natural_recommend(&self.world, &scorer, user, t, natural_slots, &mut rng)?
            } else {
                Vec::new()
            };
            let boost = if boost_slots > 0 && !active.is_empty() {
                self.boost_slate(user, t, &active, boost_slots)?
            } else {
                Vec::new()
            };
            // Score every cold item that is about to be exposed before the outcome is known.
            let mut scored: BTreeMap<ItemId, (T, LabeledStack<T>)> = BTreeMap::new();
            for &item in boost.iter().map(|b| &b.item_id).chain(natural.iter()) {
                if !self.world.is_cold(item, t as i64) || scored.contains_key(&item) {
                    continue;
                }
                let score = self.foundation_score(user, item)?;
                let rt = self.realtime(item);
                let features = build_stack_features_with_score(
                    &self.foundation,
                    &self.stack,
                    &self.world,
                    user,
                    item,
                    &rt,
                    t,
                    score,
                )?;
                let sample =
                    EnrichedSample { user_id: user, item_id: item, label: false, source: Source::Natural, slot: t };
                scored.insert(item, (score, LabeledStack { sample, features }));
            }
            let evs = simulate_session(&mut self.world, user, t, &natural, &boost, &mut rng)?;
            for e in &evs {
                match e.channel {
                    Channel::Boost => {
                        snap.boost_pv += 1;
                        let ledger = self
                            .book
                            .get_mut(&e.item_id)
                            .ok_or_else(|| Error::Event(format!("boost exposure for unadmitted {}", e.item_id)))?;
                        record_boost_event(ledger, e, &self.stages)?;
                        if let Some(p) = self.pacing.get_mut(&e.item_id) {
                            p.deliveries_this_slot += 1;
                        }
                    }
                    Channel::Natural => snap.natural_pv += 1,
                }
                if let Some((fscore, mut labeled)) = scored.remove(&e.item_id) {
                    snap.cold_pv += 1;
                    let stacked = stack_predict(&self.stack, &labeled.features)?;
                    let counters = self.world.counters(e.item_id);
                    labeled.sample.label = e.clicked;
                    labeled.sample.source = match e.channel {
                        Channel::Boost => Source::Boost,
                        Channel::Natural => Source::Natural,
                    };
                    self.predictions.push(PredictionRecord {
                        slot: t,
                        user_id: user,
                        item_id: e.item_id,
                        channel: e.channel,
                        interaction: counters.pv,
                        prior_clicks: counters.clicks - e.clicked as u64,
                        foundation: fscore.to_f64_lossy(),
                        stacked: stacked.to_f64_lossy(),
                        clicked: e.clicked,
                    });
                    slot_samples.push(labeled);
                }
            }
            self.events.extend(evs);
        }

        self.close_slot(t, first_event, &slot_samples, &mut snap)?;
        self.snapshots.push(snap);
        Ok(())
    }

    /// Bid / price test for every boosting item against `user`.
    fn boost_slate(
        &mut self,
        user: UserId,
        t: u32,
        active: &[(ItemId, u8, f64, RealtimeStats)],
        boost_slots: usize,
    ) -> Result<Vec<BoostExposure>> {
        let ab = self.cfg.ablation;
        let mut candidates = Vec::new();
        if ab.disable_bidding {
            // Item-level potential order, no per-user test.
            for &(item, stage, p40, _) in active {
                if self.book[&item].remaining_budget(&self.stages) == 0 {
                    continue;
                }
                candidates.push(BoostCandidate { item_id: item, stage, bid: p40, quote: None });
            }
        } else {
            let u = self.world.user(user)?;
            let uf = if ab.disable_user_factor { 1.0 } else { compute_user_factor(u) };
            for &(item, stage, p40, rt) in active {
                if self.book[&item].remaining_budget(&self.stages) == 0 {
                    continue;
                }
                let Some(state) = self.pacing.get(&item) else { continue };
                let score = self.foundation_score(user, item)?;
                let x = build_stack_features_with_score(
                    &self.foundation,
                    &self.stack,
                    &self.world,
                    user,
                    item,
                    &rt,
                    t,
                    score,
                )?;
                let bid = stack_predict(&self.stack, &x)?.to_f64_lossy();
                let quote = quote_price(p40, state, user, uf, t)?;
                let delivered = decide_delivery(bid, &quote);
                if self.cfg.harness.bid_trace {
                    self.bid_trace.push(BidTrace {
                        slot: t,
                        user_id: user,
                        item_id: item,
                        bid,
                        price: quote.price,
                        speed_factor: quote.speed_factor,
                        user_factor: quote.user_factor,
                        delivered,
                    });
                }
                if delivered {
                    candidates.push(BoostCandidate { item_id: item, stage, bid, quote: Some(quote) });
                }
            }
        }
        let slate = select_boost_slate(candidates, self.cfg.pacing.slate_size);
        Ok(slate
            .into_iter()
            .take(boost_slots)
            .map(|c| BoostExposure {
                item_id: c.item_id,
                bid: c.quote.as_ref().map(|_| c.bid),
                price: c.quote.as_ref().map(|q| q.price),
                stage: c.stage,
            })
            .collect())
    }

    fn close_slot(
        &mut self,
        t: u32,
        first_event: usize,
        samples: &[LabeledStack<T>],
        snap: &mut SlotSnapshot,
    ) -> Result<()> {
        let now = t + 1;
        // Benchmarks and natural windows from this slot's natural events.
        let mut per_cat: Vec<Vec<&EventRecord>> = vec![Vec::new(); self.benchmarks.len()];
        let mut per_item: BTreeMap<ItemId, (u64, u64)> = BTreeMap::new();
        for e in &self.events[first_event..] {
            if e.channel != Channel::Natural {
                continue;
            }
            per_cat[self.world.items[e.item_id.index()].category_id.index()].push(e);
            if self.world.is_cold(e.item_id, t as i64) {
                let c = per_item.entry(e.item_id).or_default();
                c.0 += 1;
                c.1 += e.clicked as u64;
            }
        }
        for (b, evs) in self.benchmarks.iter_mut().zip(&per_cat) {
            update_benchmark(b, evs, t)?;
        }
        self.world.decay_popularity();
        self.last_sessions = snap.sessions;
        let window = self.cfg.stack.natural_window_slots;
        let oldest = now.saturating_sub(window);
        for (item, (pv, clicks)) in per_item {
            let w = self.natural_window.entry(item).or_default();
            w.slots.push_back((t, pv, clicks));
        }
        let world = &self.world;
        self.natural_window.retain(|item, w| {
            while w.slots.front().is_some_and(|&(s, _, _)| s < oldest) {
                w.slots.pop_front();
            }
            w.pv = w.slots.iter().map(|s| s.1).sum();
            w.clicks = w.slots.iter().map(|s| s.2).sum();
            world.is_cold(*item, now as i64) && !w.slots.is_empty()
        });

        // Stage decisions, then retire items that stopped being cold.
        for ledger in self.book.values_mut() {
            if !ledger.is_active() {
                continue;
            }
            let bench = self.benchmarks[ledger.category_id.index()].rolling_ctr;
            if let Some(a) = step_ledger(ledger, bench, &self.stages, self.rules, now) {
                self.audits.push(a);
            }
            if ledger.is_active() && !self.world.is_cold(ledger.item_id, now as i64) {
                if let Some(a) = expire_ledger(ledger, bench, &self.stages, now) {
                    self.audits.push(a);
                }
            }
        }

        fine_tune(&mut self.stack, samples, &self.cfg.stack)?;

        if self.boosting_enabled() {
            self.regrade_and_admit(now, snap)?;
            let panel = self.panel_traffic();
            if !self.cfg.ablation.disable_speed_factor {
                self.tally_first_slots(&panel, now);
            }
            let mut pacing = std::mem::take(&mut self.pacing);
            let initial = |item: ItemId, target: f64| self.initial_speed(&panel, item, target);
            end_of_slot_repricing(
                &mut pacing,
                &self.book,
                &self.stages,
                &self.cfg.pacing,
                now,
                !self.cfg.ablation.disable_speed_factor,
                &initial,
            )?;
            self.pacing = pacing;
        } else {
            self.pending_admission.clear();
        }
        snap.active_boosting = self.book.values().filter(|l| l.is_active()).count() as u64;
        Ok(())
    }

    /// Grades every cold item against one shared user sample and admits the
    /// items uploaded this slot.
    fn regrade_and_admit(&mut self, now: u32, snap: &mut SlotSnapshot) -> Result<()> {
        let cold: Vec<ItemId> = self
            .world
            .items
            .iter()
            .filter(|i| {
                i.is_cold(now as i64, self.world.config.cold_window) || self.pending_admission.contains(&i.item_id)
            })
            .map(|i| i.item_id)
            .collect();
        if cold.is_empty() {
            return Ok(());
        }
        let mut p40_all = BTreeMap::new();
        let mut predictions = BTreeMap::new();
        for &item in &cold {
            let dist = self.panel_distribution(item, now)?;
            p40_all.insert(item, percentile_p40(&dist)?.to_f64_lossy());
            predictions.insert(item, dist.iter().map(|p| p.to_f64_lossy()).collect());
        }
        self.panel_predictions = predictions;
        let grades = rank_and_grade(&p40_all)?;
        for g in grades.values() {
            self.grades.push(GradeRecord {
                slot: now,
                item_id: g.item_id,
                p40: g.ctr_distribution_p40,
                rank_percent: g.rank_percent,
                stage: g.stage,
            });
        }
        self.p40 = p40_all;
        for item in std::mem::take(&mut self.pending_admission) {
            if self.holdout.get(&item).copied().unwrap_or(false) {
                continue;
            }
            let cat = self.world.item(item)?.category_id;
            admit_item(&mut self.book, item, cat, grades[&item].stage, &self.stages, now)?;
            snap.admitted += 1;
            // Bids from now on see the stage feature; price them alike.
            let dist = self.panel_distribution(item, now)?;
            self.p40.insert(item, percentile_p40(&dist)?.to_f64_lossy());
            self.panel_predictions.insert(item, dist.iter().map(|p| p.to_f64_lossy()).collect());
        }
        Ok(())
    }

    fn panel_distribution(&self, item: ItemId, now: u32) -> Result<Vec<T>> {
        let rt = self.realtime(item);
        let mut dist = Vec::with_capacity(self.panel.len());
        for &u in &self.panel {
            let score = self.foundation_score(u, item)?;
            let x =
                build_stack_features_with_score(&self.foundation, &self.stack, &self.world, u, item, &rt, now, score)?;
            dist.push(stack_predict(&self.stack, &x)?);
        }
        Ok(dist)
    }

    /// `(user factor, traffic weight)` of every panel user right now.
    fn panel_traffic(&self) -> Vec<(f64, f64)> {
        self.panel
            .iter()
            .map(|u| {
                let p = &self.world.users[u.index()];
                let uf = if self.cfg.ablation.disable_user_factor { 1.0 } else { compute_user_factor(p) };
                (uf, p.arrival_rate)
            })
            .collect()
    }

    /// Speed factor a fresh stage starts from: the one the panel predicts
    /// would deliver `target` exposures next slot.
    fn initial_speed(&self, panel: &[(f64, f64)], item: ItemId, target: f64) -> f64 {
        let Some(ratios) = self.panel_ratios(panel, item) else {
            return 1.0;
        };
        let stage = self.book.get(&item).and_then(|l| l.current_stage()).unwrap_or(1);
        initial_speed_factor(
            &ratios,
            self.last_sessions as f64,
            target / self.first_slot_yield(stage),
            &self.cfg.pacing,
        )
    }

    /// Exposures per predicted pass in the first slot of a stage. The panel
    /// ignores fatigue built up within the slot and slate competition, so it
    /// overstates volume.
    fn first_slot_yield(&self, stage: u8) -> f64 {
        match self.first_slot_tally.get(&stage) {
            Some(&(won, predicted)) if predicted >= 1.0 => (won / predicted).clamp(0.05, 1.0),
            _ => 1.0,
        }
    }

    /// Folds the slot that just closed into the first-slot tally, for every
    /// stage that started with it.
    fn tally_first_slots(&mut self, panel: &[(f64, f64)], now: u32) {
        let sessions = self.last_sessions as f64;
        let mut fresh = Vec::new();
        for (item, st) in &self.pacing {
            if st.entered_slot + 1 != now {
                continue;
            }
            if let Some(ratios) = self.panel_ratios(panel, *item) {
                fresh.push((
                    st.stage,
                    st.deliveries_this_slot as f64,
                    panel_volume(&ratios, sessions, st.speed_factor),
                ));
            }
        }
        for (stage, won, predicted) in fresh {
            let t = self.first_slot_tally.entry(stage).or_insert((0.0, 0.0));
            *t = (FIRST_SLOT_DECAY * t.0 + won, FIRST_SLOT_DECAY * t.1 + predicted);
        }
    }

    fn panel_ratios(&self, panel: &[(f64, f64)], item: ItemId) -> Option<Vec<(f64, f64)>> {
        let preds = self.panel_predictions.get(&item)?;
        let p40 = *self.p40.get(&item)?;
        (p40 > 0.0).then(|| preds.iter().zip(panel).map(|(y, (uf, w))| (y / (p40 * uf), *w)).collect())
    }

    fn finish(self) -> Result<RunArtifacts> {
        let catalog = Catalog::new(
            self.cfg.world.cold_window,
            self.world.items.iter().map(|i| ItemMeta {
                item_id: i.item_id,
                category_id: i.category_id,
                upload_slot: i.upload_slot,
                holdout: self.holdout.get(&i.item_id).copied().unwrap_or(false),
            }),
        );
        let report = build_report(&self.events, &catalog, self.cfg.slots, &self.cfg.report)?;
        let (p1, p2): (Vec<&PredictionRecord>, Vec<&PredictionRecord>) =
            self.predictions.iter().partition(|p| p.prior_clicks < PHASE1_CLICKS);
        let phase_auc = |ps: &[&PredictionRecord], stacked: bool| {
            let scores: Vec<f64> = ps.iter().map(|p| if stacked { p.stacked } else { p.foundation }).collect();
            let labels: Vec<bool> = ps.iter().map(|p| p.clicked).collect();
            auc(&scores, &labels)
        };
        let ledgers = self
            .book
            .values()
            .map(|l| LedgerSummary {
                item_id: l.item_id,
                stages_entered: l.stages_entered.clone(),
                tally: total_boost_budget(l, &self.stages),
            })
            .collect();
        let diagnostics = Diagnostics {
            foundation: self.foundation_report.clone(),
            warmup_events: self.warmup_events,
            phase1_foundation_auc: phase_auc(&p1, false),
            phase1_stacked_auc: phase_auc(&p1, true),
            phase2_foundation_auc: phase_auc(&p2, false),
            phase2_stacked_auc: phase_auc(&p2, true),
            phase1_samples: p1.len(),
            phase2_samples: p2.len(),
            ledger_overflows: 0,
            slots: self.snapshots,
            ledgers,
        };
        let foundation = to_f64_foundation(&self.foundation)?;
        Ok(RunArtifacts {
            config: self.cfg,
            events: self.events,
            audits: self.audits,
            grades: self.grades,
            bid_trace: self.bid_trace,
            predictions: self.predictions,
            catalog,
            ledgers: self.book,
            stages: self.stages,
            report,
            diagnostics,
            foundation,
        })
    }
}

fn to_f64_foundation<T: Real>(m: &FoundationModel<T>) -> Result<FoundationModel<f64>> {
    // Round-trip through JSON: every f32 is exactly representable as f64.
    let v = serde_json::to_value(m)?;
    Ok(serde_json::from_value(v)?)
}

pub const EVENTS_FILE: &str = "events.jsonl";
pub const AUDIT_FILE: &str = "stage_audit.jsonl";
pub const GRADES_FILE: &str = "grades.jsonl";
pub const BID_TRACE_FILE: &str = "bid_trace.jsonl";
pub const ITEMS_FILE: &str = "items.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "resolved_config.toml";
pub const FOUNDATION_FILE: &str = "foundation.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";

/// Writes every artifact of a run into `dir`.
pub fn write_artifacts(run: &RunArtifacts, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), run.config.to_toml()?)?;
    write_jsonl_file(&dir.join(EVENTS_FILE), &run.events)?;
    write_jsonl_file(&dir.join(AUDIT_FILE), &run.audits)?;
    write_jsonl_file(&dir.join(GRADES_FILE), &run.grades)?;
    if run.config.harness.bid_trace {
        write_jsonl_file(&dir.join(BID_TRACE_FILE), &run.bid_trace)?;
    }
    let items: Vec<&ItemMeta> = run.catalog.items.values().collect();
    write_jsonl_file(&dir.join(ITEMS_FILE), &items)?;
    write_report_files(&run.report, dir)?;
    run.foundation.save_json(&dir.join(FOUNDATION_FILE))?;
    fs::write(dir.join(DIAGNOSTICS_FILE), serde_json::to_string_pretty(&run.diagnostics)?)?;
    Ok(())
}

pub fn write_report_files(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    write_report_csv(&report.rows, &mut csv)?;
    fs::write(dir.join(METRICS_FILE), csv)?;
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&report.summary)?)?;
    Ok(())
}

/// Recomputes the report of a persisted run from its event log alone.
pub fn report_from_dir(run_dir: &Path) -> Result<Report> {
    let cfg = ScenarioConfig::load(&run_dir.join(CONFIG_FILE))?;
    let events: Vec<EventRecord> = read_jsonl_file(&run_dir.join(EVENTS_FILE))?;
    let items: Vec<ItemMeta> = read_jsonl_file(&run_dir.join(ITEMS_FILE))?;
    let catalog = Catalog::new(cfg.world.cold_window, items);
    build_report(&events, &catalog, cfg.slots, &cfg.report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Rules,
    Levels,
    Bidding,
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rules" => Ok(Suite::Rules),
            "levels" => Ok(Suite::Levels),
            "bidding" => Ok(Suite::Bidding),
            other => Err(Error::config(format!("unknown suite {other:?} (rules, levels, bidding)"))),
        }
    }
}

/// Arms of a suite; the first arm is the reference the others are compared to.
pub fn suite_arms(base: &ScenarioConfig, suite: Suite) -> Vec<(String, ScenarioConfig)> {
    let with = |name: &str, f: &dyn Fn(&mut ScenarioConfig)| {
        let mut c = base.clone();
        f(&mut c);
        (name.to_string(), c)
    };
    match suite {
        Suite::Rules => vec![
            with("base", &|_| {}),
            with("no_exit", &|c| c.ablation.disable_exit = true),
            with("no_promotion", &|c| c.ablation.disable_promotion = true),
        ],
        Suite::Levels => (1..=4u8)
            .map(|k| with(&format!("stages_{k}"), &|c: &mut ScenarioConfig| c.ablation.stage_count = Some(k)))
            .collect(),
        Suite::Bidding => vec![
            with("base", &|_| {}),
            with("no_bidding", &|c| c.ablation.disable_bidding = true),
            with("no_speed_factor", &|c| c.ablation.disable_speed_factor = true),
            with("no_user_factor", &|c| c.ablation.disable_user_factor = true),
        ],
    }
}

/// Headline cold-item metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub cold_ctr_percent: f64,
    pub cold_pay: u64,
    pub cold_gmv: f64,
    pub cold_pv: u64,
    pub roi: Option<f64>,
    pub hot_items: usize,
}

impl ArmMetrics {
    pub fn from_summary(s: &ReportSummary) -> Self {
        Self {
            cold_ctr_percent: s.cold.ctr_percent,
            cold_pay: s.cold.pays,
            cold_gmv: s.cold.gmv,
            cold_pv: s.cold.pv,
            roi: s.roi,
            hot_items: s.hot_items,
        }
    }

    /// `(name, value)` pairs compared across arms.
    pub fn values(&self) -> [(&'static str, Option<f64>); 5] {
        [
            ("cold_ctr_percent", Some(self.cold_ctr_percent)),
            ("cold_pay", Some(self.cold_pay as f64)),
            ("cold_gmv", Some(self.cold_gmv)),
            ("roi", self.roi),
            ("hot_items", Some(self.hot_items as f64)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub metrics: ArmMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmDelta {
    pub arm: String,
    pub metric: String,
    /// Mean over seeds of `(arm - reference) / reference * 100`.
    pub mean_relative_percent: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub suite: Suite,
    pub reference: String,
    pub runs: Vec<ArmRun>,
    pub deltas: Vec<ArmDelta>,
}

/// Runs every arm of `suite` on each seed; arms of one seed share one
/// prepared state.
pub fn run_ablation_suite(base: &ScenarioConfig, suite: Suite, seeds: &[u64]) -> Result<AblationReport> {
    let arms = suite_arms(base, suite);
    let mut runs = Vec::new();
    for &seed in seeds {
        let prep = prepare::<f64>(&ScenarioConfig { seed, ..arms[0].1.clone() })?;
        for (name, cfg) in &arms {
            let cfg = ScenarioConfig { seed, ..cfg.clone() };
            let run = run_prepared(&prep, &cfg)?;
            runs.push(ArmRun { arm: name.clone(), seed, metrics: ArmMetrics::from_summary(&run.report.summary) });
        }
    }
    let reference = arms[0].0.clone();
    let mut deltas = Vec::new();
    for (name, _) in arms.iter().skip(1) {
        for idx in 0..runs[0].metrics.values().len() {
            let metric = runs[0].metrics.values()[idx].0;
            let mut rel = Vec::new();
            for &seed in seeds {
                let get = |arm: &str| {
                    runs.iter().find(|r| r.arm == arm && r.seed == seed).and_then(|r| r.metrics.values()[idx].1)
                };
                if let (Some(a), Some(r)) = (get(name), get(&reference)) {
                    if r != 0.0 {
                        rel.push((a - r) / r * 100.0);
                    }
                }
            }
            let mean = (!rel.is_empty()).then(|| rel.iter().sum::<f64>() / rel.len() as f64);
            deltas.push(ArmDelta { arm: name.clone(), metric: metric.to_string(), mean_relative_percent: mean });
        }
    }
    Ok(AblationReport { suite, reference, runs, deltas })
}

/// Seeds used by suites when none are given: `base, base+1, ...`.
pub fn default_seeds(base: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| base.wrapping_add(i)).collect()
}
