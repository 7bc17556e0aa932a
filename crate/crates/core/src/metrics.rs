//! Offline metrics computed purely from event logs and the item catalog.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Channel, EventRecord};
use crate::ids::{CategoryId, ItemId};

/// Half-open slot range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotRange {
    pub start: u32,
    pub end: u32,
}

impl SlotRange {
    pub fn new(start: u32, end: u32) -> Self {
        Self { start, end }
    }

    #[inline]
    pub fn contains(&self, slot: u32) -> bool {
        slot >= self.start && slot < self.end
    }

    pub fn len(&self) -> u32 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What the metrics need to know about an item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub item_id: ItemId,
    pub category_id: CategoryId,
    pub upload_slot: i32,
    /// Held out of boosting; serves as the control bucket.
    pub holdout: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub cold_window: u32,
    pub items: BTreeMap<ItemId, ItemMeta>,
}

impl Catalog {
    pub fn new(cold_window: u32, items: impl IntoIterator<Item = ItemMeta>) -> Self {
        Self { cold_window, items: items.into_iter().map(|m| (m.item_id, m)).collect() }
    }

    /// Age of `item` at `slot`, `None` for unknown items.
    pub fn age(&self, item: ItemId, slot: u32) -> Option<i64> {
        self.items.get(&item).map(|m| slot as i64 - m.upload_slot as i64)
    }

    pub fn is_cold(&self, item: ItemId, slot: u32) -> bool {
        self.age(item, slot).is_some_and(|a| a >= 0 && a < self.cold_window as i64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Effectiveness {
    pub pv: u64,
    pub clicks: u64,
    pub pays: u64,
    pub gmv: f64,
    /// `clicks / pv * 100`, 0 without exposures.
    pub ctr_percent: f64,
}

impl Effectiveness {
    fn add(&mut self, e: &EventRecord) {
        self.pv += 1;
        self.clicks += e.clicked as u64;
        self.pays += e.paid as u64;
        self.gmv += e.gmv_value;
    }

    fn finish(mut self) -> Self {
        self.ctr_percent = percent(self.clicks, self.pv);
        self
    }
}

#[inline]
fn percent(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64 * 100.0
    }
}

pub fn compute_effectiveness<'a, F>(
    events: impl IntoIterator<Item = &'a EventRecord>,
    window: SlotRange,
    cohort: F,
) -> Effectiveness
where
    F: Fn(&EventRecord) -> bool,
{
    let mut out = Effectiveness::default();
    for e in events {
        if window.contains(e.slot) && cohort(e) {
            out.add(e);
        }
    }
    out.finish()
}

/// Percentage of the window's exposures that went to cold items.
pub fn compute_traffic_share<'a, F>(
    events: impl IntoIterator<Item = &'a EventRecord>,
    window: SlotRange,
    cold: F,
) -> f64
where
    F: Fn(&EventRecord) -> bool,
{
    let (mut total, mut c) = (0u64, 0u64);
    for e in events {
        if window.contains(e.slot) {
            total += 1;
            c += cold(e) as u64;
        }
    }
    percent(c, total)
}

/// Natural cold PV earned per boost cold PV spent; `None` without boost PV.
pub fn compute_roi<'a, F>(events: impl IntoIterator<Item = &'a EventRecord>, window: SlotRange, cold: F) -> Option<f64>
where
    F: Fn(&EventRecord) -> bool,
{
    let (mut natural, mut boost) = (0u64, 0u64);
    for e in events {
        if window.contains(e.slot) && cold(e) {
            match e.channel {
                Channel::Natural => natural += 1,
                Channel::Boost => boost += 1,
            }
        }
    }
    (boost > 0).then(|| natural as f64 / boost as f64)
}

/// Per-slot PV of every item inside the window.
pub fn per_slot_pv<'a>(
    events: impl IntoIterator<Item = &'a EventRecord>,
    window: SlotRange,
) -> BTreeMap<u32, BTreeMap<ItemId, u64>> {
    let mut out: BTreeMap<u32, BTreeMap<ItemId, u64>> = BTreeMap::new();
    for e in events {
        if window.contains(e.slot) {
            *out.entry(e.slot).or_default().entry(e.item_id).or_default() += 1;
        }
    }
    out
}

/// Items whose PV strictly exceeds `threshold` in at least one slot.
pub fn count_hot_items<'a>(
    events: impl IntoIterator<Item = &'a EventRecord>,
    window: SlotRange,
    threshold: u64,
) -> usize {
    let mut hot = BTreeSet::new();
    for items in per_slot_pv(events, window).values() {
        hot.extend(items.iter().filter(|(_, pv)| **pv > threshold).map(|(i, _)| *i));
    }
    hot.len()
}

/// Incremental natural exposure per unit of boost exposure, for one CTR bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplificationBucket {
    /// Boost CTR range `[lo, hi)` as a fraction.
    pub ctr_lo: f64,
    pub ctr_hi: f64,
    pub boosted_items: usize,
    pub boost_pv: u64,
    pub boosted_natural_pv: f64,
    pub control_natural_pv: f64,
    /// Absent when the bucket has no boost exposure.
    pub alpha: Option<f64>,
}

/// `(boosted natural PV - matched control natural PV) / boost PV`.
pub fn amplification(boosted_natural: f64, control_natural: f64, boost_pv: u64) -> Option<f64> {
    (boost_pv > 0).then(|| (boosted_natural - control_natural) / boost_pv as f64)
}

/// Estimates the amplification per boost-CTR bucket.
///
/// Every boosted item (non-holdout, at least one boost exposure) whose whole
/// cold window lies inside the log is compared with the holdout items of
/// the same category launched within `match_slots` slots of it (falling
/// back to the whole category). Natural PV is counted over each item's cold
/// window.
pub fn estimate_amplification(
    events: &[EventRecord],
    catalog: &Catalog,
    log_end: u32,
    bucket_edges: &[f64],
    match_slots: i32,
) -> Vec<AmplificationBucket> {
    #[derive(Default, Clone, Copy)]
    struct Tally {
        natural: u64,
        boost: u64,
        boost_clicks: u64,
    }
    let w = catalog.cold_window as i64;
    let mut tallies: BTreeMap<ItemId, Tally> = BTreeMap::new();
    for e in events {
        if !catalog.is_cold(e.item_id, e.slot) {
            continue;
        }
        let t = tallies.entry(e.item_id).or_default();
        match e.channel {
            Channel::Natural => t.natural += 1,
            Channel::Boost => {
                t.boost += 1;
                t.boost_clicks += e.clicked as u64;
            }
        }
    }
    let complete = |m: &ItemMeta| m.upload_slot >= 0 && m.upload_slot as i64 + w <= log_end as i64;
    let controls: Vec<&ItemMeta> = catalog.items.values().filter(|m| m.holdout && complete(m)).collect();
    let natural_of = |id: ItemId| tallies.get(&id).map(|t| t.natural).unwrap_or(0) as f64;

    let mut buckets: Vec<AmplificationBucket> = bucket_edges
        .windows(2)
        .map(|b| AmplificationBucket {
            ctr_lo: b[0],
            ctr_hi: b[1],
            boosted_items: 0,
            boost_pv: 0,
            boosted_natural_pv: 0.0,
            control_natural_pv: 0.0,
            alpha: None,
        })
        .collect();
    for m in catalog.items.values().filter(|m| !m.holdout && complete(m)) {
        let Some(t) = tallies.get(&m.item_id).copied().filter(|t| t.boost > 0) else { continue };
        let ctr = t.boost_clicks as f64 / t.boost as f64;
        let Some(b) = buckets.iter_mut().find(|b| ctr >= b.ctr_lo && ctr < b.ctr_hi) else { continue };
        let near: Vec<f64> = controls
            .iter()
            .filter(|c| c.category_id == m.category_id && (c.upload_slot - m.upload_slot).abs() <= match_slots)
            .map(|c| natural_of(c.item_id))
            .collect();
        let pool = if near.is_empty() {
            controls.iter().filter(|c| c.category_id == m.category_id).map(|c| natural_of(c.item_id)).collect()
        } else {
            near
        };
        if pool.is_empty() {
            continue;
        }
        b.boosted_items += 1;
        b.boost_pv += t.boost;
        b.boosted_natural_pv += t.natural as f64;
        b.control_natural_pv += pool.iter().sum::<f64>() / pool.len() as f64;
    }
    for b in &mut buckets {
        b.alpha = amplification(b.boosted_natural_pv, b.control_natural_pv, b.boost_pv);
    }
    buckets
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionPoint {
    pub lag: u32,
    pub percent: f64,
    /// Number of (t, t + lag) pairs averaged.
    pub pairs: u32,
}

/// Items with the highest PV in one slot; ties by item id, zero-PV items never count.
pub fn top_k(pv: &BTreeMap<ItemId, u64>, k: usize) -> BTreeSet<ItemId> {
    let mut v: Vec<(u64, ItemId)> = pv.iter().filter(|(_, p)| **p > 0).map(|(i, p)| (*p, *i)).collect();
    v.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    v.into_iter().take(k).map(|(_, i)| i).collect()
}

/// `|TopK(t) ∩ TopK(t + L)| / k * 100` averaged over every valid `t` in the window.
pub fn topk_retention<'a>(
    events: impl IntoIterator<Item = &'a EventRecord>,
    k: usize,
    lags: &[u32],
    window: SlotRange,
) -> Result<Vec<RetentionPoint>> {
    if k == 0 {
        return Err(Error::config("top-k retention needs k >= 1"));
    }
    if let Some(&max) = lags.iter().max() {
        if max >= window.len() {
            return Err(Error::config(format!("window of {} slots is too short for lag {max}", window.len())));
        }
    }
    let per_slot = per_slot_pv(events, window);
    let empty = BTreeMap::new();
    let tops: Vec<BTreeSet<ItemId>> =
        (window.start..window.end).map(|t| top_k(per_slot.get(&t).unwrap_or(&empty), k)).collect();
    Ok(lags
        .iter()
        .map(|&lag| {
            let pairs = tops.len() - lag as usize;
            let total: f64 = (0..pairs)
                .map(|t| tops[t].intersection(&tops[t + lag as usize]).count() as f64 / k as f64 * 100.0)
                .sum();
            RetentionPoint { lag, percent: total / pairs as f64, pairs: pairs as u32 }
        })
        .collect())
}

/// Fraction of items launched in `[0, log_end - age - span]` whose mean
/// per-slot PV over ages `[age, age + span)` is below `threshold`.
pub fn low_exposure_fraction(
    events: &[EventRecord],
    catalog: &Catalog,
    log_end: u32,
    age: u32,
    span: u32,
    threshold: f64,
    include: impl Fn(&ItemMeta) -> bool,
) -> Option<f64> {
    let span = span.max(1);
    let mut pv: BTreeMap<ItemId, u64> = BTreeMap::new();
    for e in events {
        if let Some(a) = catalog.age(e.item_id, e.slot) {
            if a >= age as i64 && a < (age + span) as i64 {
                *pv.entry(e.item_id).or_default() += 1;
            }
        }
    }
    let eligible: Vec<&ItemMeta> = catalog
        .items
        .values()
        .filter(|m| m.upload_slot >= 0 && (m.upload_slot as i64 + (age + span) as i64) <= log_end as i64 && include(m))
        .collect();
    if eligible.is_empty() {
        return None;
    }
    let low = eligible.iter().filter(|m| (*pv.get(&m.item_id).unwrap_or(&0) as f64 / span as f64) < threshold).count();
    Some(low as f64 / eligible.len() as f64)
}

/// Gini coefficient of non-negative values (0 for empty or all-zero input).
pub fn gini(values: &[f64]) -> f64 {
    let n = values.len();
    let total: f64 = values.iter().sum();
    if n == 0 || total <= 0.0 {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * (i as f64 + 1.0) - n as f64 - 1.0) * x).sum();
    weighted / (n as f64 * total)
}

/// Area under the ROC curve with tied scores counted as half; `None` when
/// one class is missing.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of positive ranks with average ranks for ties.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    let p = pos as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Launch-age buckets of the report, in slots.
pub const COHORT_EDGES: [u32; 3] = [3, 7, 30];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CohortView {
    /// Items aged `[0, edge)`.
    Cumulative,
    /// Items aged `[previous edge, edge)`.
    Disjoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Slots per report window.
    pub window_slots: u32,
    pub hot_threshold: u64,
    pub top_k: usize,
    pub retention_lags: Vec<u32>,
    pub amplification_buckets: Vec<f64>,
    pub amplification_match_slots: i32,
    /// Age and threshold of the low-exposure measurement.
    pub low_exposure_age: u32,
    pub low_exposure_span: u32,
    pub low_exposure_pv: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            window_slots: 10,
            hot_threshold: 100,
            top_k: 20,
            retention_lags: vec![7, 14, 21, 30],
            amplification_buckets: vec![0.0, 0.04, 0.08, 0.12, 0.16, 1.01],
            amplification_match_slots: 5,
            low_exposure_age: 30,
            low_exposure_span: 1,
            low_exposure_pv: 10.0,
        }
    }
}

/// One row of the tabular report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub window_start: u32,
    pub window_end: u32,
    pub cohort: String,
    pub metric: String,
    pub value: f64,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub schema_version: u32,
    pub slots: u32,
    pub total_pv: u64,
    pub natural_pv: u64,
    pub boost_pv: u64,
    pub cold: Effectiveness,
    pub cold_boost: Effectiveness,
    pub cold_natural: Effectiveness,
    pub all: Effectiveness,
    pub traffic_share_percent: f64,
    pub roi: Option<f64>,
    pub hot_items: usize,
    pub retention: Vec<RetentionPoint>,
    pub low_exposure_fraction: Option<f64>,
    pub amplification: Vec<AmplificationBucket>,
    pub exposure_gini: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub summary: ReportSummary,
}

/// Computes every report metric from an event log.
pub fn build_report(events: &[EventRecord], catalog: &Catalog, slots: u32, cfg: &ReportConfig) -> Result<Report> {
    if cfg.window_slots == 0 {
        return Err(Error::config("report.window_slots must be >= 1"));
    }
    let full = SlotRange::new(0, slots);
    let cold = |e: &EventRecord| catalog.is_cold(e.item_id, e.slot);
    let mut rows = Vec::new();
    let mut start = 0;
    while start < slots {
        let w = SlotRange::new(start, (start + cfg.window_slots).min(slots));
        let mut push = |cohort: String, metric: &str, value: f64| {
            rows.push(ReportRow { window_start: w.start, window_end: w.end, cohort, metric: metric.into(), value })
        };
        let mut lo = 0;
        for hi in COHORT_EDGES {
            for (view, from) in [(CohortView::Cumulative, 0), (CohortView::Disjoint, lo)] {
                let label = format!("{}:{}-{}", if view == CohortView::Cumulative { "cum" } else { "age" }, from, hi);
                let in_cohort =
                    |e: &EventRecord| catalog.age(e.item_id, e.slot).is_some_and(|a| a >= from as i64 && a < hi as i64);
                let eff = compute_effectiveness(events, w, in_cohort);
                push(label.clone(), "pv", eff.pv as f64);
                push(label.clone(), "clicks", eff.clicks as f64);
                push(label.clone(), "ctr_percent", eff.ctr_percent);
                push(label.clone(), "pay", eff.pays as f64);
                push(label.clone(), "gmv", eff.gmv);
                if let Some(roi) = compute_roi(events, w, in_cohort) {
                    push(label.clone(), "roi", roi);
                }
                if view == CohortView::Cumulative && from == lo {
                    // Identical cohorts; emit once.
                    break;
                }
            }
            lo = hi;
        }
        let all = compute_effectiveness(events, w, |_| true);
        push("all".into(), "pv", all.pv as f64);
        push("all".into(), "ctr_percent", all.ctr_percent);
        push("all".into(), "traffic_share_cold_percent", compute_traffic_share(events, w, cold));
        push("all".into(), "hot_items", count_hot_items(events, w, cfg.hot_threshold) as f64);
        start = w.end;
    }

    let boost_pv = events.iter().filter(|e| full.contains(e.slot) && e.channel == Channel::Boost).count() as u64;
    let total = events.iter().filter(|e| full.contains(e.slot)).count() as u64;
    let usable_lags: Vec<u32> = cfg.retention_lags.iter().copied().filter(|l| *l < slots).collect();
    let retention = topk_retention(events, cfg.top_k, &usable_lags, full)?;
    let mut item_pv: BTreeMap<ItemId, f64> = catalog.items.keys().map(|i| (*i, 0.0)).collect();
    for e in events.iter().filter(|e| full.contains(e.slot)) {
        *item_pv.entry(e.item_id).or_default() += 1.0;
    }
    let summary = ReportSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        slots,
        total_pv: total,
        natural_pv: total - boost_pv,
        boost_pv,
        cold: compute_effectiveness(events, full, cold),
        cold_boost: compute_effectiveness(events, full, |e| cold(e) && e.channel == Channel::Boost),
        cold_natural: compute_effectiveness(events, full, |e| cold(e) && e.channel == Channel::Natural),
        all: compute_effectiveness(events, full, |_| true),
        traffic_share_percent: compute_traffic_share(events, full, cold),
        roi: compute_roi(events, full, cold),
        hot_items: count_hot_items(events, full, cfg.hot_threshold),
        retention,
        low_exposure_fraction: low_exposure_fraction(
            events,
            catalog,
            slots,
            cfg.low_exposure_age,
            cfg.low_exposure_span,
            cfg.low_exposure_pv,
            |_| true,
        ),
        amplification: estimate_amplification(
            events,
            catalog,
            slots,
            &cfg.amplification_buckets,
            cfg.amplification_match_slots,
        ),
        exposure_gini: gini(&item_pv.values().copied().collect::<Vec<_>>()),
    };
    Ok(Report { rows, summary })
}

/// Writes rows as CSV with a header line.
pub fn write_report_csv<W: std::io::Write>(rows: &[ReportRow], mut w: W) -> Result<()> {
    writeln!(w, "window_start,window_end,cohort,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.window_start, r.window_end, r.cohort, r.metric, r.value)?;
    }
    Ok(())
}
