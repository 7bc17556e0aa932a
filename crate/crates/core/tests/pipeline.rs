use std::collections::BTreeMap;

use coldboost::harness::{self, run_scenario_as};
use coldboost::tier::total_boost_budget;
use coldboost::{prepare, run_prepared, run_scenario, Channel, Error, ItemId, ScenarioConfig};

fn small(seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig { seed, slots: 12, ..Default::default() };
    c.world.num_users = 120;
    c.world.num_warm_items = 80;
    c.foundation.epochs = 2;
    c.harness.warmup_rounds = 4;
    c.harness.stack_pretrain_epochs = 1;
    c
}

#[test]
fn boost_events_match_the_ledgers() {
    let run = run_scenario(&small(4)).unwrap();
    assert_eq!(run.diagnostics.ledger_overflows, 0);
    let mut per_item: BTreeMap<ItemId, u64> = BTreeMap::new();
    for e in &run.events {
        e.validate().unwrap();
        if e.channel == Channel::Boost {
            *per_item.entry(e.item_id).or_default() += 1;
            let bid = e.bid.unwrap();
            assert!(bid > e.price.unwrap());
        }
    }
    assert!(!per_item.is_empty());
    for (item, n) in per_item {
        let ledger = &run.ledgers[&item];
        let tally = total_boost_budget(ledger, &run.stages);
        assert_eq!(tally.spent, n, "{item}");
        assert!(tally.spent <= tally.granted);
    }
    for a in &run.audits {
        assert!(a.stage_pv <= a.budget);
    }
}

#[test]
fn boosting_off_has_no_boost_channel() {
    let mut c = small(5);
    c.ablation.disable_boosting = true;
    let run = run_scenario(&c).unwrap();
    assert!(run.events.iter().all(|e| e.channel == Channel::Natural));
    assert!(run.ledgers.is_empty());
    assert_eq!(run.report.summary.boost_pv, 0);
}

#[test]
fn full_boost_share_leaves_natural_empty() {
    let mut c = small(6);
    c.world.boost_share = 1.0;
    let run = run_scenario(&c).unwrap();
    assert!(run.events.iter().all(|e| e.channel == Channel::Boost));
}

#[test]
fn shared_preparation_matches_a_fresh_run() {
    let c = small(7);
    let prep = prepare::<f64>(&c).unwrap();
    let mut arm = c.clone();
    arm.ablation.disable_exit = true;
    let a = run_prepared(&prep, &c).unwrap();
    let b = run_prepared(&prep, &arm).unwrap();
    assert_eq!(a.events, run_scenario(&c).unwrap().events);
    assert_eq!(b.events, run_scenario(&arm).unwrap().events);
}

#[test]
fn preparation_of_another_world_is_refused() {
    let c = small(8);
    let prep = prepare::<f64>(&c).unwrap();
    let other = ScenarioConfig { seed: 9, ..c };
    assert!(matches!(run_prepared(&prep, &other), Err(Error::Config(_))));
}

#[test]
fn single_precision_runs() {
    let run = run_scenario_as::<f32>(&small(10)).unwrap();
    assert!(!run.events.is_empty());
    assert_eq!(run.diagnostics.ledger_overflows, 0);
}

#[test]
fn persisted_run_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_scenario(&small(11)).unwrap();
    harness::write_artifacts(&run, dir.path()).unwrap();
    let cfg = ScenarioConfig::load(&dir.path().join(harness::CONFIG_FILE)).unwrap();
    let again = run_scenario(&cfg).unwrap();
    assert_eq!(again.events, run.events);
    assert_eq!(harness::report_from_dir(dir.path()).unwrap().summary, run.report.summary);
    let f = coldboost::FoundationModel64::load_json(&dir.path().join(harness::FOUNDATION_FILE)).unwrap();
    assert_eq!(f, run.foundation);
}

#[test]
fn invalid_config_is_a_config_error() {
    let mut c = small(12);
    c.world.session_length = 0;
    let e = run_scenario(&c).err().unwrap();
    assert!(e.is_config());
}

/// Gini of cumulative PV over the items that exist by the end of `slot`.
fn cumulative_gini(run: &coldboost::RunArtifacts, slot: u32) -> f64 {
    let mut pv: BTreeMap<ItemId, f64> =
        run.catalog.items.values().filter(|m| m.upload_slot <= slot as i32).map(|m| (m.item_id, 0.0)).collect();
    for e in run.events.iter().filter(|e| e.slot <= slot) {
        *pv.get_mut(&e.item_id).unwrap() += 1.0;
    }
    coldboost::metrics::gini(&pv.values().copied().collect::<Vec<_>>())
}

#[test]
fn without_boosting_the_rich_get_richer() {
    for seed in 1..=5 {
        let mut c = ScenarioConfig { seed, slots: 50, ..Default::default() };
        c.ablation.disable_boosting = true;
        let run = run_scenario(&c).unwrap();
        let g: Vec<f64> = [9, 19, 29, 39, 49].iter().map(|&t| cumulative_gini(&run, t)).collect();
        assert!(g.windows(2).all(|w| w[0] < w[1]), "seed {seed}: {g:?}");
    }
}
