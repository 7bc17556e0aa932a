//! Item-oriented delivery: every boosting item bids its cold-CTR estimate
//! for a user and is shown only when the bid beats a dynamic price.
//!
//! `price = P40 * S * U` where `S` tracks how fast the item is spending its
//! stage budget and `U` reflects the user's fatigue and activity.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ItemId, UserId};
use crate::scalar::Real;
use crate::tier::{LedgerBook, StageConfig};
use crate::world::UserProfile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PacingConfig {
    /// Weights of the current, previous and second-previous speed error.
    pub deltas: [f64; 3],
    pub speed_min: f64,
    pub speed_max: f64,
    /// Speed error reported when an item delivered nothing.
    pub error_floor: f64,
    /// Exponent on the speed error when it rescales the factor in force.
    /// Deliveries respond to price faster than linearly, so 1 overshoots.
    pub gain: f64,
    /// Most candidates kept per request.
    pub slate_size: usize,
}

impl Default for PacingConfig {
    fn default() -> Self {
        Self { deltas: [0.6, 0.3, 0.1], speed_min: 0.1, speed_max: 50.0, error_floor: 0.01, gain: 0.3, slate_size: 10 }
    }
}

impl PacingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) || self.deltas[0] <= 0.0 {
            return Err(Error::config("pacing.deltas must be non-negative with a positive first weight"));
        }
        if !(self.speed_min > 0.0 && self.speed_min <= 1.0 && self.speed_max >= 1.0 && self.speed_max.is_finite()) {
            return Err(Error::config("pacing: need 0 < speed_min <= 1 <= speed_max"));
        }
        if !(self.error_floor > 0.0) {
            return Err(Error::config("pacing.error_floor must be positive"));
        }
        if !(self.gain > 0.0 && self.gain <= 1.0) {
            return Err(Error::config("pacing.gain must be in (0, 1]"));
        }
        if self.slate_size == 0 {
            return Err(Error::config("pacing.slate_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PacingState {
    pub item_id: ItemId,
    /// Stage and entry slot this state belongs to; a new stage resets it.
    pub stage: u8,
    pub entered_slot: u32,
    pub target_speed: f64,
    /// Most recent first, at most three entries; each is the factor implied
    /// by that slot's speed error.
    pub error_history: VecDeque<f64>,
    pub speed_factor: f64,
    pub deliveries_this_slot: u64,
}

impl PacingState {
    pub fn new(item_id: ItemId, stage: u8, entered_slot: u32, target_speed: f64) -> Self {
        Self {
            item_id,
            stage,
            entered_slot,
            target_speed,
            error_history: VecDeque::with_capacity(3),
            speed_factor: 1.0,
            deliveries_this_slot: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub slot: u32,
    pub base_p40: f64,
    pub speed_factor: f64,
    pub user_factor: f64,
    pub price: f64,
}

/// `ln(fatigue + e) / sqrt(activity)`.
#[inline]
pub fn user_factor<T: Real>(fatigue: u32, activity_grade: u8) -> T {
    let f = T::lit(fatigue as f64) + T::lit(std::f64::consts::E);
    f.ln() / T::lit(activity_grade.max(1) as f64).sqrt()
}

pub fn compute_user_factor(user: &UserProfile) -> f64 {
    user_factor(user.fatigue_counter, user.activity_grade)
}

/// `actual / target`, floored when nothing was delivered.
pub fn compute_speed_error<T: Real>(actual: T, target: T, floor: T) -> Result<T> {
    if !(target > T::zero()) {
        return Err(Error::config(format!("target speed must be positive, got {target}")));
    }
    if actual <= T::zero() {
        return Ok(floor);
    }
    Ok(actual / target)
}

/// `δ·history / Σδ`, with weights renormalised over the entries present.
/// `history` is newest first and must not be empty.
pub fn smoothed_speed<T: Real>(history: &[T], deltas: &[T; 3]) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for (e, d) in history.iter().zip(deltas) {
        num += *d * *e;
        den += *d;
    }
    num / den
}

/// Pushes the new error and recomputes the clamped speed factor.
pub fn update_speed_factor(state: &mut PacingState, new_error: f64, cfg: &PacingConfig) -> Result<()> {
    if !(new_error > 0.0 && new_error.is_finite()) {
        return Err(Error::Numeric(format!("speed error must be positive, got {new_error}")));
    }
    state.error_history.push_front(new_error);
    state.error_history.truncate(3);
    let hist: Vec<f64> = state.error_history.iter().copied().collect();
    state.speed_factor = smoothed_speed(&hist, &cfg.deltas).clamp(cfg.speed_min, cfg.speed_max);
    Ok(())
}

pub fn quote_price(p40: f64, state: &PacingState, user: UserId, user_factor: f64, slot: u32) -> Result<PriceQuote> {
    let s = state.speed_factor;
    if !(p40.is_finite() && s.is_finite() && user_factor.is_finite()) {
        return Err(Error::Numeric(format!("non-finite price input p40={p40} S={s} U={user_factor}")));
    }
    Ok(PriceQuote {
        user_id: user,
        item_id: state.item_id,
        slot,
        base_p40: p40,
        speed_factor: s,
        user_factor,
        price: p40 * s * user_factor,
    })
}

/// Deliver iff `bid > price`.
#[inline]
pub fn decide_delivery(bid: f64, quote: &PriceQuote) -> bool {
    bid > quote.price
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoostCandidate {
    pub item_id: ItemId,
    pub stage: u8,
    pub bid: f64,
    pub quote: Option<PriceQuote>,
}

/// Highest bids first, ties by item id, at most `n`.
pub fn select_boost_slate(mut candidates: Vec<BoostCandidate>, n: usize) -> Vec<BoostCandidate> {
    candidates.sort_by(|a, b| b.bid.total_cmp(&a.bid).then(a.item_id.cmp(&b.item_id)));
    candidates.truncate(n);
    candidates
}

/// One line of the optional per-decision trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BidTrace {
    pub slot: u32,
    pub user_id: UserId,
    pub item_id: ItemId,
    pub bid: f64,
    pub price: f64,
    pub speed_factor: f64,
    pub user_factor: f64,
    pub delivered: bool,
}

/// Speed factor that would deliver `target` exposures in a slot of
/// `sessions` requests, predicted from a weighted user panel.
///
/// Each entry is `(bid / (p40 * U), weight)` for one panel user, the weight
/// being the user's share of traffic. Delivery at factor `S` reaches every
/// user whose ratio exceeds `S`, so the answer is the ratio at which the
/// cumulative traffic share (highest ratios first) reaches
/// `target / sessions`. Competition between items is ignored, which errs on
/// the side of under-delivery.
pub fn initial_speed_factor(panel: &[(f64, f64)], sessions: f64, target: f64, cfg: &PacingConfig) -> f64 {
    let total: f64 = panel.iter().map(|p| p.1).sum();
    if !(total > 0.0 && sessions > 0.0 && target > 0.0) {
        return 1.0;
    }
    let need = target / sessions * total;
    let mut sorted: Vec<(f64, f64)> = panel.iter().copied().filter(|p| p.0.is_finite()).collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut acc = 0.0;
    for (ratio, w) in sorted {
        acc += w;
        if acc >= need {
            return ratio.clamp(cfg.speed_min, cfg.speed_max);
        }
    }
    cfg.speed_min
}

/// Expected passes in a slot of `sessions` requests at factor `s`, from the
/// same panel `initial_speed_factor` inverts.
pub fn panel_volume(panel: &[(f64, f64)], sessions: f64, s: f64) -> f64 {
    let total: f64 = panel.iter().map(|p| p.1).sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let above: f64 = panel.iter().filter(|p| p.0 > s).map(|p| p.1).sum();
    sessions * above / total
}

/// Closes slot `now - 1` for every boosting item: turns the slot's
/// deliveries into a speed error, updates the speed factor and sets the
/// target for slot `now` to `remaining budget / remaining stage slots`.
///
/// The smoother is fed `S * E^gain`, a damped guess at the factor that
/// would have hit the target, so a persistent error keeps moving `S` until
/// the clamp. Items that entered a new stage start from a fresh state whose
/// factor comes from `initial`.
#[allow(clippy::too_many_arguments)]
pub fn end_of_slot_repricing(
    states: &mut BTreeMap<ItemId, PacingState>,
    book: &LedgerBook,
    stages: &StageConfig,
    cfg: &PacingConfig,
    now: u32,
    speed_factor_enabled: bool,
    initial: &dyn Fn(ItemId, f64) -> f64,
) -> Result<()> {
    states.retain(|id, _| book.get(id).is_some_and(|l| l.is_active()));
    for (id, ledger) in book {
        let Some(stage) = ledger.current_stage() else { continue };
        let fresh = states.get(id).is_none_or(|s| s.stage != stage || s.entered_slot != ledger.entered_slot);
        if fresh {
            let target = stages.budget(stage) as f64 / stages.max_stage_slots as f64;
            let mut st = PacingState::new(*id, stage, ledger.entered_slot, target);
            if speed_factor_enabled {
                // The starting factor also seeds the smoother, so one empty
                // slot cannot throw the price to the floor.
                st.speed_factor = initial(*id, target).clamp(cfg.speed_min, cfg.speed_max);
                st.error_history.push_front(st.speed_factor);
            }
            states.insert(*id, st);
            continue;
        }
        let st = states.get_mut(id).expect("present");
        if speed_factor_enabled && st.target_speed > 0.0 {
            let e = compute_speed_error(st.deliveries_this_slot as f64, st.target_speed, cfg.error_floor)?;
            let implied = st.speed_factor * e.powf(cfg.gain);
            update_speed_factor(st, implied, cfg)?;
        }
        st.deliveries_this_slot = 0;
        let remaining_slots = ledger.remaining_slots(stages, now);
        if remaining_slots > 0 {
            st.target_speed = ledger.remaining_budget(stages) as f64 / remaining_slots as f64;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::CategoryId;
    use crate::tier::admit_item;

    fn state(s: f64) -> PacingState {
        PacingState { speed_factor: s, ..PacingState::new(ItemId(1), 1, 0, 10.0) }
    }

    #[test]
    fn user_factor_values() {
        assert!((user_factor::<f64>(0, 1) - 1.0).abs() < 1e-15);
        assert!((user_factor::<f64>(0, 4) - 0.5).abs() < 1e-15);
        let e = std::f64::consts::E;
        // Fatigue is integral, so check the inverse construction on the real-valued formula.
        let f = e * e - e;
        assert!(((f + e).ln() - 2.0).abs() < 1e-15);
        assert!(user_factor::<f64>(3, 2) > user_factor::<f64>(2, 2));
        assert!(user_factor::<f64>(3, 2) > user_factor::<f64>(3, 3));
    }

    #[test]
    fn speed_error_values() {
        assert_eq!(compute_speed_error(2.0, 4.0, 0.01).unwrap(), 0.5);
        assert_eq!(compute_speed_error(4.0, 4.0, 0.01).unwrap(), 1.0);
        assert_eq!(compute_speed_error(0.0, 4.0, 0.01).unwrap(), 0.01);
        assert!(matches!(compute_speed_error(1.0, 0.0, 0.01), Err(Error::Config(_))));
        assert!(matches!(compute_speed_error(1.0, -1.0, 0.01), Err(Error::Config(_))));
    }

    #[test]
    fn speed_factor_smoothing() {
        let cfg = PacingConfig::default();
        let mut st = state(1.0);
        update_speed_factor(&mut st, 0.7, &cfg).unwrap();
        assert!((st.speed_factor - 0.7).abs() < 1e-15);
        let mut st = state(1.0);
        for e in [2.0, 1.0, 0.5] {
            update_speed_factor(&mut st, e, &cfg).unwrap();
        }
        assert!((st.speed_factor - 0.8).abs() < 1e-12);
        let mut st = state(1.0);
        for _ in 0..3 {
            update_speed_factor(&mut st, 1.7, &cfg).unwrap();
        }
        assert!((st.speed_factor - 1.7).abs() < 1e-12);
        let mut st = state(1.0);
        update_speed_factor(&mut st, 500.0, &cfg).unwrap();
        assert_eq!(st.speed_factor, 50.0);
        assert!(update_speed_factor(&mut st, 0.0, &cfg).is_err());
    }

    #[test]
    fn price_is_product() {
        assert_eq!(quote_price(0.1, &state(1.0), UserId(0), 1.0, 0).unwrap().price, 0.1);
        assert_eq!(quote_price(0.1, &state(0.5), UserId(0), 2.0, 0).unwrap().price, 0.1);
        assert!((quote_price(0.05, &state(0.8), UserId(0), 1.5, 0).unwrap().price - 0.06).abs() < 1e-15);
        assert!(quote_price(f64::NAN, &state(0.8), UserId(0), 1.5, 0).is_err());
    }

    #[test]
    fn delivery_is_strict() {
        let q = quote_price(0.2, &state(1.0), UserId(0), 1.0, 0).unwrap();
        assert!(decide_delivery(0.3, &q));
        assert!(!decide_delivery(0.2, &q));
        assert!(!decide_delivery(0.1, &q));
    }

    #[test]
    fn slate_order() {
        let c = |id, bid| BoostCandidate { item_id: ItemId(id), stage: 1, bid, quote: None };
        let s = select_boost_slate(vec![c(3, 0.1), c(1, 0.3), c(2, 0.2)], 2);
        assert_eq!(s.iter().map(|x| x.item_id.0).collect::<Vec<_>>(), vec![1, 2]);
        assert!(select_boost_slate(vec![], 2).is_empty());
        let s = select_boost_slate(vec![c(9, 0.2), c(4, 0.2), c(7, 0.2)], 3);
        assert_eq!(s.iter().map(|x| x.item_id.0).collect::<Vec<_>>(), vec![4, 7, 9]);
    }

    #[test]
    fn repricing_sets_remaining_target_and_feedback() {
        let stages = StageConfig::default();
        let cfg = PacingConfig::default();
        let mut book = LedgerBook::new();
        admit_item(&mut book, ItemId(1), CategoryId(0), 1, &stages, 0).unwrap();
        let mut states = BTreeMap::new();
        let neutral = |_: ItemId, _: f64| 1.0;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 0, true, &neutral).unwrap();
        assert_eq!(states[&ItemId(1)].target_speed, 10.0);
        // Slot 0 delivered 10 of the 100: 90 left over 9 slots.
        book.get_mut(&ItemId(1)).unwrap().stage_pv = 10;
        states.get_mut(&ItemId(1)).unwrap().deliveries_this_slot = 10;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 1, true, &neutral).unwrap();
        assert_eq!(states[&ItemId(1)].target_speed, 10.0);
        assert_eq!(states[&ItemId(1)].speed_factor, 1.0);
        // Under-delivery lowers the factor, i.e. the price.
        states.get_mut(&ItemId(1)).unwrap().deliveries_this_slot = 2;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 2, true, &neutral).unwrap();
        assert!(states[&ItemId(1)].speed_factor < 1.0);
        let before = states[&ItemId(1)].speed_factor;
        states.get_mut(&ItemId(1)).unwrap().deliveries_this_slot = 0;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 3, true, &neutral).unwrap();
        assert!(states[&ItemId(1)].speed_factor < before);
    }

    #[test]
    fn persistent_under_delivery_reaches_the_floor() {
        let stages = StageConfig::default();
        let cfg = PacingConfig::default();
        let mut book = LedgerBook::new();
        admit_item(&mut book, ItemId(1), CategoryId(0), 3, &stages, 0).unwrap();
        let mut states = BTreeMap::new();
        let neutral = |_: ItemId, _: f64| 1.0;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 0, true, &neutral).unwrap();
        let mut last = states[&ItemId(1)].speed_factor;
        for now in 1..9 {
            states.get_mut(&ItemId(1)).unwrap().deliveries_this_slot = 1;
            end_of_slot_repricing(&mut states, &book, &stages, &cfg, now, true, &neutral).unwrap();
            let s = states[&ItemId(1)].speed_factor;
            assert!(s < last || s == cfg.speed_min, "slot {now}: {s} vs {last}");
            last = s;
        }
        assert_eq!(last, cfg.speed_min);
    }

    #[test]
    fn disabled_speed_factor_stays_neutral() {
        let stages = StageConfig::default();
        let cfg = PacingConfig::default();
        let mut book = LedgerBook::new();
        admit_item(&mut book, ItemId(1), CategoryId(0), 1, &stages, 0).unwrap();
        let mut states = BTreeMap::new();
        let high = |_: ItemId, _: f64| 7.0;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 0, false, &high).unwrap();
        states.get_mut(&ItemId(1)).unwrap().deliveries_this_slot = 90;
        end_of_slot_repricing(&mut states, &book, &stages, &cfg, 1, false, &high).unwrap();
        assert_eq!(states[&ItemId(1)].speed_factor, 1.0);
    }

    #[test]
    fn initial_factor_meets_target_share() {
        let cfg = PacingConfig::default();
        // Ten equally weighted users with ratios 0.5 ..= 5.0.
        let panel: Vec<(f64, f64)> = (1..=10).map(|k| (k as f64 * 0.5, 1.0)).collect();
        // 30 of 100 sessions: the three highest ratios.
        assert_eq!(initial_speed_factor(&panel, 100.0, 30.0, &cfg), 4.0);
        assert_eq!(initial_speed_factor(&panel, 100.0, 1000.0, &cfg), cfg.speed_min);
        assert_eq!(initial_speed_factor(&panel, 100.0, 1.0, &cfg), 5.0);
        assert_eq!(initial_speed_factor(&[], 100.0, 1.0, &cfg), 1.0);
        let big: Vec<(f64, f64)> = vec![(50.0, 1.0)];
        assert_eq!(initial_speed_factor(&big, 100.0, 1.0, &cfg), cfg.speed_max);
    }
}
