use std::collections::BTreeMap;

use coldboost::bidding::{update_speed_factor, PacingConfig, PacingState};
use coldboost::events::{read_jsonl, write_jsonl};
use coldboost::grading::{percentile_p40, rank_and_grade};
use coldboost::tier::{
    admit_item, record_boost_event, step_ledger, total_boost_budget, LedgerBook, RuleFlags, StageConfig,
};
use coldboost::{AblationFlags, CategoryId, Channel, EventRecord, ItemId, ScenarioConfig, UserId};
use proptest::prelude::*;

fn boost_event(item: ItemId, slot: u32, clicked: bool, stage: u8) -> EventRecord {
    EventRecord {
        slot,
        user_id: UserId(0),
        item_id: item,
        channel: Channel::Boost,
        clicked,
        paid: false,
        gmv_value: 0.0,
        bid: None,
        price: None,
        stage_at_event: Some(stage),
    }
}

proptest! {
    #[test]
    fn p40_splits_the_sample(v in prop::collection::vec(0.0f64..1.0, 1..200)) {
        let p = percentile_p40(&v).unwrap();
        let n = v.len() as f64;
        let at_most = v.iter().filter(|x| **x <= p).count() as f64;
        let below = v.iter().filter(|x| **x < p).count() as f64;
        prop_assert!(v.contains(&p));
        prop_assert!(at_most >= 0.4 * n);
        prop_assert!(below < 0.4 * n);
    }

    #[test]
    fn grades_are_monotone(v in prop::collection::vec(0.0f64..1.0, 1..100)) {
        let m: BTreeMap<ItemId, f64> = v.iter().enumerate().map(|(i, &x)| (ItemId(i as u32), x)).collect();
        let g = rank_and_grade(&m).unwrap();
        for a in g.values() {
            prop_assert!(a.rank_percent > 0.0 && a.rank_percent <= 100.0);
            for b in g.values() {
                if a.ctr_distribution_p40 < b.ctr_distribution_p40 {
                    prop_assert!(a.rank_percent < b.rank_percent && a.stage <= b.stage);
                }
            }
        }
        // The top item always lands in the last stage.
        prop_assert!(g.values().any(|x| x.stage == 3));
    }

    #[test]
    fn speed_factor_stays_clamped(errors in prop::collection::vec(1e-4f64..1e4, 1..30)) {
        let cfg = PacingConfig::default();
        let mut st = PacingState::new(ItemId(0), 1, 0, 5.0);
        for e in errors {
            update_speed_factor(&mut st, e, &cfg).unwrap();
            prop_assert!(st.speed_factor >= cfg.speed_min && st.speed_factor <= cfg.speed_max);
            prop_assert!(st.error_history.len() <= 3);
        }
    }

    #[test]
    fn constant_error_is_a_fixed_point(e in 0.2f64..20.0) {
        let cfg = PacingConfig::default();
        let mut st = PacingState::new(ItemId(0), 1, 0, 5.0);
        for _ in 0..3 {
            update_speed_factor(&mut st, e, &cfg).unwrap();
        }
        prop_assert!((st.speed_factor - e).abs() < 1e-12 * e);
    }

    #[test]
    fn restaging_keeps_the_total(k in 1u8..=4) {
        let cfg = StageConfig::default();
        let total: u64 = cfg.budgets.iter().sum();
        let r = cfg.with_stage_count(k).unwrap();
        prop_assert_eq!(r.stage_count(), k);
        prop_assert_eq!(r.budgets.iter().sum::<u64>(), total);
        prop_assert!(r.budgets.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn ledgers_never_overspend(
        start in 1u8..=3,
        rules in (any::<bool>(), any::<bool>()),
        slots in prop::collection::vec((0u64..400, 0.0f64..0.2), 1..25),
    ) {
        let cfg = StageConfig::default();
        let rules = RuleFlags { disable_exit: rules.0, disable_promotion: rules.1 };
        let mut book = LedgerBook::new();
        admit_item(&mut book, ItemId(1), CategoryId(0), start, &cfg, 0).unwrap();
        let l = book.get_mut(&ItemId(1)).unwrap();
        for (t, (want, ctr)) in slots.into_iter().enumerate() {
            let t = t as u32;
            step_ledger(l, 0.05, &cfg, rules, t);
            let Some(stage) = l.current_stage() else { break };
            // Deliveries stop at the budget the way the slate builder does.
            let n = want.min(l.remaining_budget(&cfg));
            for j in 0..n {
                record_boost_event(l, &boost_event(ItemId(1), t, (j as f64) < ctr * n as f64, stage), &cfg).unwrap();
            }
            prop_assert!(l.stage_pv <= cfg.budget(stage));
        }
        let tally = total_boost_budget(l, &cfg);
        let closed: u64 = l.history.iter().map(|h| h.stage_pv).sum();
        prop_assert_eq!(tally.spent, closed + if l.is_active() { l.stage_pv } else { 0 });
        prop_assert!(tally.spent <= tally.granted);
        prop_assert!(tally.passed <= tally.granted);
    }

    #[test]
    fn event_log_roundtrips(
        rows in prop::collection::vec((0u32..100, 0u32..500, 0u32..900, any::<bool>(), 0.0f64..1.0), 0..50),
    ) {
        let events: Vec<EventRecord> = rows
            .into_iter()
            .map(|(slot, u, i, boost, x)| EventRecord {
                slot,
                user_id: UserId(u),
                item_id: ItemId(i),
                channel: if boost { Channel::Boost } else { Channel::Natural },
                clicked: x > 0.5,
                paid: x > 0.9,
                gmv_value: if x > 0.9 { x * 37.0 } else { 0.0 },
                bid: boost.then_some(x / 3.0),
                price: boost.then_some(x / 7.0),
                stage_at_event: boost.then_some(2),
            })
            .collect();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &events).unwrap();
        let back: Vec<EventRecord> = read_jsonl(&buf[..]).unwrap();
        prop_assert_eq!(back, events);
    }

    #[test]
    fn config_roundtrips(
        seed in any::<u64>(),
        slots in 1u32..500,
        flags in prop::collection::vec(any::<bool>(), 7),
        k in prop::option::of(1u8..=4),
    ) {
        let cfg = ScenarioConfig {
            seed,
            slots,
            ablation: AblationFlags {
                disable_exit: flags[0],
                disable_promotion: flags[1],
                stage_count: k,
                disable_bidding: flags[2],
                disable_speed_factor: flags[3],
                disable_user_factor: flags[4],
                disable_boosting: flags[5],
            },
            ..Default::default()
        };
        let back = ScenarioConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
